//! Bit-exact wire codec for the Bitcoin-like message protocol plus the
//! snapshot extensions (GETSTATE, STATE inventory items, chunk transfer,
//! and the service flag carried in the VERSION handshake).
//!
//! Frame layout: magic(4) | command(12, ASCII zero-padded) | length(4) |
//! payload, all integers little-endian.

use thiserror::Error;

use crate::chain::{Block, BlockHeader, ChainError, Hash256, Reader, Writer, HEADER_SIZE};
use crate::snapshot::{chunk_hashes, Snapshot};

pub const DEFAULT_MAGIC: u32 = 0x4350_5231;
pub const PROTOCOL_VERSION: u32 = 1;
pub const MIN_PROTOCOL_VERSION: u32 = 1;

pub const SERVICE_NODE_NETWORK: u64 = 1;
pub const SERVICE_NODE_COINPRUNE: u64 = 1 << 24;

pub const FRAME_HEADER_SIZE: usize = 20;
/// Payloads are bounded by a block plus framing slack.
pub const MAX_PAYLOAD_SIZE: usize = 2 * 1_048_576;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("truncated frame")]
    Truncated,
    #[error("bad network magic")]
    BadMagic,
    #[error("unknown command {0:?}")]
    UnknownCommand(String),
    #[error("frame length does not match payload")]
    LengthMismatch,
    #[error("payload exceeds maximum size")]
    Oversized,
    #[error("malformed payload: {0}")]
    Payload(&'static str),
}

impl From<ChainError> for CodecError {
    fn from(_: ChainError) -> CodecError {
        CodecError::Payload("decode")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum InvKind {
    BlockItem = 1,
    StateItem = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InvItem {
    pub kind: InvKind,
    pub hash: Hash256,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VersionPayload {
    pub protocol_version: u32,
    pub services: u64,
    pub best_height: u32,
}

impl VersionPayload {
    pub fn supports_coinprune(&self) -> bool {
        self.services & SERVICE_NODE_COINPRUNE != 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Version(VersionPayload),
    Verack,
    /// Request headers starting at a height; max_count 0 means no limit.
    GetHeaders { from_height: u32, max_count: u32 },
    Headers(Vec<BlockHeader>),
    GetData(Vec<InvItem>),
    Block(Block),
    Inv(Vec<InvItem>),
    GetState,
    StateChunk {
        snapshot_id: Hash256,
        /// Piece index: 0 is the snapshot header, i >= 1 is chunk i-1.
        index: u32,
        payload: Vec<u8>,
    },
}

impl Message {
    pub fn command(&self) -> &'static str {
        match self {
            Message::Version(_) => "version",
            Message::Verack => "verack",
            Message::GetHeaders { .. } => "getheaders",
            Message::Headers(_) => "headers",
            Message::GetData(_) => "getdata",
            Message::Block(_) => "block",
            Message::Inv(_) => "inv",
            Message::GetState => "getstate",
            Message::StateChunk { .. } => "statechunk",
        }
    }
}

fn command_bytes(name: &str) -> [u8; 12] {
    let mut out = [0u8; 12];
    out[..name.len()].copy_from_slice(name.as_bytes());
    out
}

fn write_items(w: &mut Writer, items: &[InvItem]) {
    w.u32(items.len() as u32);
    for item in items {
        w.u8(item.kind as u8);
        w.hash(&item.hash);
    }
}

fn read_items(r: &mut Reader<'_>) -> Result<Vec<InvItem>, CodecError> {
    let count = r.u32("inv.count")? as usize;
    if count > MAX_PAYLOAD_SIZE / 33 {
        return Err(CodecError::Payload("inv count"));
    }
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = match r.u8("inv.kind")? {
            1 => InvKind::BlockItem,
            2 => InvKind::StateItem,
            _ => return Err(CodecError::Payload("inv kind")),
        };
        let hash = r.hash("inv.hash")?;
        items.push(InvItem { kind, hash });
    }
    Ok(items)
}

fn payload_bytes(message: &Message) -> Vec<u8> {
    let mut w = Writer::new();
    match message {
        Message::Version(v) => {
            w.u32(v.protocol_version);
            w.u64(v.services);
            w.u32(v.best_height);
        }
        Message::Verack | Message::GetState => {}
        Message::GetHeaders {
            from_height,
            max_count,
        } => {
            w.u32(*from_height);
            w.u32(*max_count);
        }
        Message::Headers(headers) => {
            w.u32(headers.len() as u32);
            for header in headers {
                w.bytes(&header.serialize());
            }
        }
        Message::GetData(items) | Message::Inv(items) => write_items(&mut w, items),
        Message::Block(block) => w.bytes(&block.serialize()),
        Message::StateChunk {
            snapshot_id,
            index,
            payload,
        } => {
            w.hash(snapshot_id);
            w.u32(*index);
            w.bytes(payload);
        }
    }
    w.finish()
}

pub fn encode(message: &Message, magic: u32) -> Vec<u8> {
    let payload = payload_bytes(message);
    let mut w = Writer::new();
    w.u32(magic);
    w.bytes(&command_bytes(message.command()));
    w.u32(payload.len() as u32);
    w.bytes(&payload);
    w.finish()
}

pub fn decode(bytes: &[u8], magic: u32) -> Result<Message, CodecError> {
    if bytes.len() < FRAME_HEADER_SIZE {
        return Err(CodecError::Truncated);
    }
    let got_magic = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if got_magic != magic {
        return Err(CodecError::BadMagic);
    }
    let command_raw = &bytes[4..16];
    let name_end = command_raw
        .iter()
        .position(|b| *b == 0)
        .unwrap_or(command_raw.len());
    if command_raw[name_end..].iter().any(|b| *b != 0) {
        return Err(CodecError::UnknownCommand(
            String::from_utf8_lossy(command_raw).into_owned(),
        ));
    }
    let command = std::str::from_utf8(&command_raw[..name_end])
        .map_err(|_| CodecError::UnknownCommand(format!("{command_raw:?}")))?;
    let length = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if length > MAX_PAYLOAD_SIZE {
        return Err(CodecError::Oversized);
    }
    if bytes.len() != FRAME_HEADER_SIZE + length {
        return Err(CodecError::LengthMismatch);
    }
    let payload = &bytes[FRAME_HEADER_SIZE..];
    let mut r = Reader::new(payload);
    let message = match command {
        "version" => Message::Version(VersionPayload {
            protocol_version: r.u32("version.protocol_version")?,
            services: r.u64("version.services")?,
            best_height: r.u32("version.best_height")?,
        }),
        "verack" => Message::Verack,
        "getheaders" => Message::GetHeaders {
            from_height: r.u32("getheaders.from_height")?,
            max_count: r.u32("getheaders.max_count")?,
        },
        "headers" => {
            let count = r.u32("headers.count")? as usize;
            if count > MAX_PAYLOAD_SIZE / HEADER_SIZE {
                return Err(CodecError::Payload("headers count"));
            }
            let mut headers = Vec::with_capacity(count);
            for _ in 0..count {
                headers.push(BlockHeader::read(&mut r)?);
            }
            Message::Headers(headers)
        }
        "getdata" => Message::GetData(read_items(&mut r)?),
        "inv" => Message::Inv(read_items(&mut r)?),
        "block" => Message::Block(Block::deserialize(payload)?),
        "getstate" => Message::GetState,
        "statechunk" => {
            let snapshot_id = r.hash("statechunk.snapshot_id")?;
            let index = r.u32("statechunk.index")?;
            let chunk = r.bytes(r.remaining(), "statechunk.payload")?.to_vec();
            Message::StateChunk {
                snapshot_id,
                index,
                payload: chunk,
            }
        }
        other => return Err(CodecError::UnknownCommand(other.to_string())),
    };
    if !matches!(message, Message::Block(_)) {
        r.expect_end("frame payload")
            .map_err(|_| CodecError::LengthMismatch)?;
    }
    Ok(message)
}

/// The inventory a peer answers GETSTATE with: the snapshot header hash
/// followed by each chunk hash, in order, as STATE items.
pub fn state_inventory(snapshot: &Snapshot) -> Message {
    Message::Inv(
        chunk_hashes(snapshot)
            .into_iter()
            .map(|hash| InvItem {
                kind: InvKind::StateItem,
                hash,
            })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkCapabilities {
    /// GETSTATE and STATECHUNK are permitted on this link.
    pub coinprune: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("peer protocol version {0} below minimum {MIN_PROTOCOL_VERSION}")]
pub struct Disconnect(pub u32);

/// Negotiates link capabilities after a VERSION/VERACK handshake. Snapshot
/// messages are only enabled when both sides advertise the service flag,
/// so legacy peers never see unknown commands.
pub fn negotiate(
    local: &VersionPayload,
    remote: &VersionPayload,
) -> Result<LinkCapabilities, Disconnect> {
    if remote.protocol_version < MIN_PROTOCOL_VERSION {
        return Err(Disconnect(remote.protocol_version));
    }
    Ok(LinkCapabilities {
        coinprune: local.supports_coinprune() && remote.supports_coinprune(),
    })
}
