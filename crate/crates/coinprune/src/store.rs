//! Per-node persistent storage model: full blocks, persisted header
//! metadata, retained snapshots, and the pruning rule. Sizes reported here
//! are exact serialized byte counts, which is what the simulator measures.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use num_bigint::BigUint;
use thiserror::Error;

use crate::chain::{Block, BlockHeader, Hash256, Writer};
use crate::snapshot::{snapshot_size, snapshot_to_bytes, Snapshot, SnapshotId};

/// Fixed-width persisted index record:
/// block_id(32) | header(80) | height(4) | work(8) | tx_count(4) | timestamp(4).
pub const META_RECORD_SIZE: usize = 132;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("non-contiguous block record: expected height {expected}, got {got}")]
    NonContiguous { expected: u32, got: u32 },
    #[error("cannot prune: no accepted snapshot")]
    NoAcceptedSnapshot,
    #[error("cannot prune to {requested}: accepted snapshot height is {snapshot_height}")]
    PruneBeyondSnapshot {
        requested: u32,
        snapshot_height: u32,
    },
    #[error("body at height {0} was pruned and cannot be served or rewound")]
    BodyPruned(u32),
    #[error("no block recorded at height {0}")]
    UnknownHeight(u32),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersistedBlockMeta {
    pub block_id: Hash256,
    pub header: BlockHeader,
    pub height: u32,
    pub cumulative_work: BigUint,
    pub tx_count: u32,
    pub timestamp: u32,
}

impl PersistedBlockMeta {
    pub fn serialize(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.hash(&self.block_id);
        w.bytes(&self.header.serialize());
        w.u32(self.height);
        // Works at desk scale fit comfortably in 64 bits; the record format
        // clamps rather than growing the fixed width.
        let work: u64 = self
            .cumulative_work
            .clone()
            .try_into()
            .unwrap_or(u64::MAX);
        w.u64(work);
        w.u32(self.tx_count);
        w.u32(self.timestamp);
        let out = w.finish();
        debug_assert_eq!(out.len(), META_RECORD_SIZE);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotEntry {
    pub id: SnapshotId,
    pub snapshot: Snapshot,
}

impl SnapshotEntry {
    pub fn height(&self) -> u32 {
        self.snapshot.header.height
    }
}

/// Storage owned by a single node. Bodies form the contiguous range
/// [prune_height, tip]; metas cover [0, tip].
#[derive(Debug, Clone, Default)]
pub struct NodeStore {
    metas: BTreeMap<u32, PersistedBlockMeta>,
    bodies: BTreeMap<u32, Block>,
    /// Accepted snapshots, oldest first. Bounded to one by
    /// [`NodeStore::retire_old_snapshot`].
    accepted: Vec<SnapshotEntry>,
    /// Candidate snapshot for the window currently open, if any.
    pub candidate: Option<SnapshotEntry>,
    prune_height: u32,
    /// Archival stores refuse to prune regardless of snapshots.
    pub archival: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StorageReport {
    pub bytes_bodies: u64,
    pub bytes_metas: u64,
    pub bytes_snapshot: u64,
    pub bytes_utxo: u64,
}

impl NodeStore {
    pub fn new() -> NodeStore {
        NodeStore::default()
    }

    pub fn tip_height(&self) -> Option<u32> {
        self.metas.keys().next_back().copied()
    }

    pub fn prune_height(&self) -> u32 {
        self.prune_height
    }

    pub fn meta(&self, height: u32) -> Option<&PersistedBlockMeta> {
        self.metas.get(&height)
    }

    pub fn headers(&self) -> Vec<BlockHeader> {
        self.metas.values().map(|m| m.header).collect()
    }

    pub fn body(&self, height: u32) -> Result<&Block, StoreError> {
        if let Some(block) = self.bodies.get(&height) {
            return Ok(block);
        }
        if self.metas.contains_key(&height) {
            Err(StoreError::BodyPruned(height))
        } else {
            Err(StoreError::UnknownHeight(height))
        }
    }

    pub fn body_by_id(&self, id: &Hash256) -> Option<&Block> {
        self.bodies.values().find(|b| b.id() == *id)
    }

    pub fn bodies_range(&self) -> Option<(u32, u32)> {
        let first = self.bodies.keys().next()?;
        let last = self.bodies.keys().next_back()?;
        Some((*first, *last))
    }

    /// Blocks with heights inside a window, for tallying.
    pub fn window_blocks(&self, from_excl: u32, to_incl: u32) -> Vec<(u32, &Block)> {
        self.bodies
            .range(from_excl + 1..=to_incl)
            .map(|(h, b)| (*h, b))
            .collect()
    }

    /// Records a block at the next contiguous height, deriving and storing
    /// its meta record alongside the body.
    pub fn record_block(
        &mut self,
        block: Block,
        height: u32,
        work: &BigUint,
    ) -> Result<(), StoreError> {
        let expected = self.tip_height().map_or(0, |t| t + 1);
        if height != expected {
            return Err(StoreError::NonContiguous {
                expected,
                got: height,
            });
        }
        let prev_work = height
            .checked_sub(1)
            .and_then(|h| self.metas.get(&h))
            .map_or_else(|| BigUint::from(0u32), |m| m.cumulative_work.clone());
        let meta = PersistedBlockMeta {
            block_id: block.id(),
            header: block.header,
            height,
            cumulative_work: prev_work + work,
            tx_count: block.transactions.len() as u32,
            timestamp: block.header.timestamp,
        };
        self.metas.insert(height, meta);
        self.bodies.insert(height, block);
        Ok(())
    }

    /// Records a meta-only entry at the next contiguous height, for history
    /// learned from headers whose bodies were already pruned elsewhere.
    /// `tx_count` stays zero: the body was never seen.
    pub fn record_header(
        &mut self,
        header: BlockHeader,
        height: u32,
        work: &BigUint,
    ) -> Result<(), StoreError> {
        let expected = self.tip_height().map_or(0, |t| t + 1);
        if height != expected {
            return Err(StoreError::NonContiguous {
                expected,
                got: height,
            });
        }
        let prev_work = height
            .checked_sub(1)
            .and_then(|h| self.metas.get(&h))
            .map_or_else(|| BigUint::from(0u32), |m| m.cumulative_work.clone());
        let meta = PersistedBlockMeta {
            block_id: crate::chain::block_id(&header),
            header,
            height,
            cumulative_work: prev_work + work,
            tx_count: 0,
            timestamp: header.timestamp,
        };
        self.metas.insert(height, meta);
        Ok(())
    }

    /// Drops metas and bodies strictly above `height`, for reorg rewrites.
    /// Fails if the cut would reach below the prune height.
    pub fn truncate_above(&mut self, height: u32) -> Result<(), StoreError> {
        if height + 1 < self.prune_height {
            return Err(StoreError::BodyPruned(height + 1));
        }
        self.metas.retain(|h, _| *h <= height);
        self.bodies.retain(|h, _| *h <= height);
        Ok(())
    }

    /// Removes bodies below `height`. Safe only up to one past the accepted
    /// snapshot height; metas are always retained so the store can keep
    /// serving the full headerchain.
    pub fn prune_below(&mut self, height: u32) -> Result<(), StoreError> {
        if self.archival {
            return Ok(());
        }
        let snapshot_height = self
            .accepted
            .last()
            .map(SnapshotEntry::height)
            .ok_or(StoreError::NoAcceptedSnapshot)?;
        if height > snapshot_height + 1 {
            return Err(StoreError::PruneBeyondSnapshot {
                requested: height,
                snapshot_height,
            });
        }
        self.bodies.retain(|h, _| *h >= height);
        self.prune_height = self.prune_height.max(height);
        Ok(())
    }

    pub fn set_accepted(&mut self, entry: SnapshotEntry) {
        self.accepted.push(entry);
    }

    pub fn accepted(&self) -> Option<&SnapshotEntry> {
        self.accepted.last()
    }

    pub fn accepted_count(&self) -> usize {
        self.accepted.len()
    }

    /// Keeps exactly the most recent accepted snapshot; an in-window
    /// candidate is untouched.
    pub fn retire_old_snapshot(&mut self) {
        if self.accepted.len() > 1 {
            self.accepted.drain(..self.accepted.len() - 1);
        }
    }

    pub fn storage_report(&self, utxo_bytes: u64) -> StorageReport {
        let bytes_bodies = self
            .bodies
            .values()
            .map(|b| b.serialize().len() as u64)
            .sum();
        let bytes_metas = (self.metas.len() * META_RECORD_SIZE) as u64;
        let bytes_snapshot = self
            .accepted
            .iter()
            .map(|e| snapshot_size(&e.snapshot) as u64)
            .sum::<u64>()
            + self
                .candidate
                .as_ref()
                .map_or(0, |e| snapshot_size(&e.snapshot) as u64);
        StorageReport {
            bytes_bodies,
            bytes_metas,
            bytes_snapshot,
            bytes_utxo: utxo_bytes,
        }
    }

    /// Optional on-disk layout: metas.bin with fixed records, one .blk file
    /// per body, snapshots as .cpsnap.
    pub fn persist_to_dir(&self, dir: &Path) -> Result<(), StoreError> {
        let io = |e: std::io::Error| StoreError::Io(e.to_string());
        std::fs::create_dir_all(dir.join("bodies")).map_err(io)?;
        let mut metas = std::fs::File::create(dir.join("metas.bin")).map_err(io)?;
        for meta in self.metas.values() {
            metas.write_all(&meta.serialize()).map_err(io)?;
        }
        for (height, block) in &self.bodies {
            let path = dir.join("bodies").join(format!("{height:08}.blk"));
            std::fs::write(path, block.serialize()).map_err(io)?;
        }
        for entry in self.accepted.iter().chain(self.candidate.as_ref()) {
            let path = dir.join(format!("{}.cpsnap", entry.id.to_hex()));
            std::fs::write(path, snapshot_to_bytes(&entry.snapshot)).map_err(io)?;
        }
        Ok(())
    }
}
