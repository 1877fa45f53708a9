//! Role-parameterized node state machine: legacy full nodes, pruning full
//! nodes, miners (honest and adversarial), archival nodes, and the joining
//! node's bootstrap procedure. Nodes communicate only through wire
//! messages; the simulator owns delivery and timing.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::chain::{
    apply_block, block_id, meets_target, validate_header_chain, work_from_bits, Block,
    BlockHeader, Hash256, UtxoSet,
};
use crate::codec::{
    state_inventory, InvItem, InvKind, Message, VersionPayload, PROTOCOL_VERSION,
    SERVICE_NODE_COINPRUNE, SERVICE_NODE_NETWORK,
};
use crate::reaffirm::{
    decide, encode_marker, in_window, pulse_height_for, tally, PulseOutcome, PulseParams,
};
use crate::snapshot::{
    create_snapshot, id_from_piece_hashes, piece_for_hash, snapshot_id, verify_and_apply, Chunk,
    Snapshot, SnapshotHeader, SnapshotId,
};
use crate::store::{NodeStore, SnapshotEntry};

pub type NodeId = usize;
pub type Outbox = Vec<(NodeId, Message)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    LegacyFull,
    CoinpruneFull,
    CoinpruneMiner,
    AdversaryMiner,
    Archival,
    Joining,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::LegacyFull => "LEGACY_FULL",
            Role::CoinpruneFull => "COINPRUNE_FULL",
            Role::CoinpruneMiner => "COINPRUNE_MINER",
            Role::AdversaryMiner => "ADVERSARY_MINER",
            Role::Archival => "ARCHIVAL",
            Role::Joining => "JOINING",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Misbehavior {
    /// Mine marker blocks reaffirming a crafted id with no snapshot behind it.
    InvalidReaffirm,
    /// Serve snapshot chunks with one byte flipped.
    TamperChunks,
}

fn default_chunk_limit() -> usize {
    crate::snapshot::DEFAULT_CHUNK_LIMIT
}

fn default_neighbor_count() -> usize {
    8
}

fn default_honest() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeConfig {
    pub role: Role,
    /// Zeroed pulse parameters mean "inherit from the scenario".
    #[serde(default)]
    pub pulse: PulseParams,
    #[serde(default = "default_chunk_limit")]
    pub chunk_limit: usize,
    #[serde(default)]
    pub mining_power: u64,
    #[serde(default = "default_neighbor_count")]
    pub neighbor_count: usize,
    #[serde(default = "default_honest")]
    pub honest: bool,
    #[serde(default)]
    pub misbehavior: Option<Misbehavior>,
}

impl NodeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.role == Role::AdversaryMiner && self.misbehavior.is_none() {
            return Err("an adversary miner needs a configured misbehavior".into());
        }
        Ok(())
    }
}

/// Scenario-wide chain constants shared by every node in a run.
#[derive(Debug, Clone)]
pub struct ChainParams {
    pub genesis: Block,
    pub bits: u32,
    pub subsidy: u64,
    pub magic: u32,
}

/// The id an InvalidReaffirm miner keeps voting for. There is no snapshot
/// behind it, so no honest node can ever serve or adopt it.
pub fn invalid_reaffirm_id() -> SnapshotId {
    SnapshotId(crate::chain::hash256(b"adversarial-unbacked-snapshot"))
}

/// Absolute-majority snapshot choice over neighbor advertisements: an id
/// must be advertised by more than half of the *connected* neighbors, not
/// just of those that answered.
pub fn choose_snapshot(
    ads: &BTreeMap<NodeId, SnapshotId>,
    neighbor_count: usize,
) -> Option<SnapshotId> {
    let mut counts: BTreeMap<SnapshotId, usize> = BTreeMap::new();
    for id in ads.values() {
        *counts.entry(*id).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .find(|(_, c)| *c * 2 > neighbor_count)
        .map(|(id, _)| id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BootstrapPhase {
    AcquireSnapshot,
    FetchHeaders,
    FetchChaintail,
    Verifying,
    Accepted,
    Aborted,
}

#[derive(Debug, Clone)]
pub struct Bootstrap {
    pub phase: BootstrapPhase,
    /// Legacy joiners skip snapshot acquisition and replay from genesis.
    pub legacy: bool,
    pub neighbors: Vec<NodeId>,
    pub retries: u32,
    pub abort_reason: Option<String>,
    versions_pending: BTreeSet<NodeId>,
    awaiting_ads: BTreeSet<NodeId>,
    ads: BTreeMap<NodeId, SnapshotId>,
    peer_pieces: BTreeMap<NodeId, Vec<Hash256>>,
    pub chosen: Option<SnapshotId>,
    source: Option<NodeId>,
    expected_pieces: Vec<Hash256>,
    pieces: BTreeMap<u32, Vec<u8>>,
    snapshot: Option<Snapshot>,
    snapshot_utxo: Option<UtxoSet>,
    header_source: Option<NodeId>,
    headers: Vec<BlockHeader>,
    tail_ids: BTreeMap<Hash256, u32>,
    tail_blocks: BTreeMap<u32, Block>,
}

impl Bootstrap {
    fn new(neighbors: Vec<NodeId>, legacy: bool, retries: u32) -> Bootstrap {
        Bootstrap {
            phase: if legacy {
                BootstrapPhase::FetchHeaders
            } else {
                BootstrapPhase::AcquireSnapshot
            },
            legacy,
            versions_pending: neighbors.iter().copied().collect(),
            awaiting_ads: neighbors.iter().copied().collect(),
            neighbors,
            retries,
            abort_reason: None,
            ads: BTreeMap::new(),
            peer_pieces: BTreeMap::new(),
            chosen: None,
            source: None,
            expected_pieces: Vec::new(),
            pieces: BTreeMap::new(),
            snapshot: None,
            snapshot_utxo: None,
            header_source: None,
            headers: Vec::new(),
            tail_ids: BTreeMap::new(),
            tail_blocks: BTreeMap::new(),
        }
    }

    fn abort(&mut self, reason: impl Into<String>) {
        self.phase = BootstrapPhase::Aborted;
        self.abort_reason = Some(reason.into());
    }
}

#[derive(Debug, Clone)]
struct IndexEntry {
    height: u32,
    prev: Hash256,
    cum_work: BigUint,
}

/// A single simulated node. All state transitions happen in message or
/// block handlers; every handler returns the messages to send in response.
pub struct SimNode {
    pub id: NodeId,
    pub config: NodeConfig,
    pub params: ChainParams,
    pub store: NodeStore,
    pub utxo: UtxoSet,
    /// State and height the node can rebuild from without network help:
    /// genesis, or the latest accepted snapshot.
    base_utxo: UtxoSet,
    base_height: u32,
    index: BTreeMap<Hash256, IndexEntry>,
    side_blocks: BTreeMap<Hash256, Block>,
    orphans: BTreeMap<Hash256, Vec<Block>>,
    requested: BTreeSet<Hash256>,
    pub peers: Vec<NodeId>,
    candidates: BTreeMap<u32, SnapshotEntry>,
    /// Pulse log: None marks windows that closed inside pruned history a
    /// joiner never saw.
    pub evaluated: BTreeMap<u32, Option<PulseOutcome>>,
    tip_id: Hash256,
    pub bootstrap: Option<Bootstrap>,
    catchup_from: Option<NodeId>,
    /// Fatal per-node failure (reorg past pruned history, and similar);
    /// surfaced in metrics, never a crash.
    pub failure: Option<String>,
    block_work: BigUint,
}

impl SimNode {
    pub fn new_established(id: NodeId, config: NodeConfig, params: ChainParams) -> SimNode {
        let block_work = work_from_bits(params.bits).expect("valid scenario bits");
        let genesis = params.genesis.clone();
        let genesis_id = genesis.id();
        let utxo = apply_block(&UtxoSet::new(), &genesis, 0, params.subsidy)
            .expect("scenario genesis applies");
        let mut store = NodeStore::new();
        store.archival = matches!(config.role, Role::Archival | Role::LegacyFull);
        store
            .record_block(genesis, 0, &block_work)
            .expect("empty store accepts genesis");
        let mut index = BTreeMap::new();
        index.insert(
            genesis_id,
            IndexEntry {
                height: 0,
                prev: Hash256::ZERO,
                cum_work: block_work.clone(),
            },
        );
        SimNode {
            id,
            config,
            params,
            store,
            base_utxo: utxo.clone(),
            base_height: 0,
            utxo,
            index,
            side_blocks: BTreeMap::new(),
            orphans: BTreeMap::new(),
            requested: BTreeSet::new(),
            peers: Vec::new(),
            candidates: BTreeMap::new(),
            evaluated: BTreeMap::new(),
            tip_id: genesis_id,
            bootstrap: None,
            catchup_from: None,
            failure: None,
            block_work,
        }
    }

    /// A joining node starts with nothing but the genesis constants.
    pub fn new_joining(id: NodeId, config: NodeConfig, params: ChainParams) -> SimNode {
        let block_work = work_from_bits(params.bits).expect("valid scenario bits");
        SimNode {
            id,
            config,
            params,
            store: NodeStore::new(),
            utxo: UtxoSet::new(),
            base_utxo: UtxoSet::new(),
            base_height: 0,
            index: BTreeMap::new(),
            side_blocks: BTreeMap::new(),
            orphans: BTreeMap::new(),
            requested: BTreeSet::new(),
            peers: Vec::new(),
            candidates: BTreeMap::new(),
            evaluated: BTreeMap::new(),
            tip_id: Hash256::ZERO,
            bootstrap: None,
            catchup_from: None,
            failure: None,
            block_work,
        }
    }

    pub fn tip_height(&self) -> u32 {
        self.store.tip_height().unwrap_or(0)
    }

    pub fn tip_id(&self) -> Hash256 {
        self.tip_id
    }

    fn tip_work(&self) -> BigUint {
        self.index
            .get(&self.tip_id)
            .map(|e| e.cum_work.clone())
            .unwrap_or_default()
    }

    pub fn is_bootstrapping(&self) -> bool {
        self.bootstrap
            .as_ref()
            .is_some_and(|b| !matches!(b.phase, BootstrapPhase::Accepted))
    }

    fn participates(&self) -> bool {
        !matches!(self.config.role, Role::LegacyFull)
    }

    pub fn services(&self) -> u64 {
        let mut s = 0;
        // Full-history service: every body from genesis still present.
        if self.store.prune_height() == 0 && !self.is_bootstrapping() {
            s |= SERVICE_NODE_NETWORK;
        }
        if self.participates() {
            s |= SERVICE_NODE_COINPRUNE;
        }
        s
    }

    pub fn version_payload(&self) -> VersionPayload {
        VersionPayload {
            protocol_version: PROTOCOL_VERSION,
            services: self.services(),
            best_height: self.tip_height(),
        }
    }

    // -----------------------------------------------------------------------
    // Mining.

    /// Coinbase data for the next block template: a reaffirmation marker
    /// while a window is open and a candidate (or crafted) id exists,
    /// empty otherwise.
    pub fn next_coinbase_data(&self) -> Vec<u8> {
        if !self.participates() {
            return Vec::new();
        }
        let height = self.tip_height() + 1;
        let p = self.config.pulse;
        let Some(pulse) = pulse_height_for(height, &p) else {
            return Vec::new();
        };
        if !in_window(height, pulse, &p) {
            return Vec::new();
        }
        if self.config.misbehavior == Some(Misbehavior::InvalidReaffirm) {
            return encode_marker(&invalid_reaffirm_id());
        }
        match self.candidates.get(&pulse) {
            Some(c) => encode_marker(&c.id),
            None => Vec::new(),
        }
    }

    /// Accepts a block this node just mined and returns the announcements.
    pub fn accept_local_block(&mut self, block: Block) -> Outbox {
        self.accept_block(block, None)
    }

    // -----------------------------------------------------------------------
    // Block processing.

    fn broadcast_inv(&self, id: Hash256, skip: Option<NodeId>) -> Outbox {
        self.peers
            .iter()
            .filter(|p| Some(**p) != skip)
            .map(|p| {
                (
                    *p,
                    Message::Inv(vec![InvItem {
                        kind: InvKind::BlockItem,
                        hash: id,
                    }]),
                )
            })
            .collect()
    }

    fn accept_block(&mut self, block: Block, from: Option<NodeId>) -> Outbox {
        let mut out = Outbox::new();
        let mut queue = vec![(block, from)];
        while let Some((block, from)) = queue.pop() {
            let id = block.id();
            self.requested.remove(&id);
            if self.index.contains_key(&id) {
                continue;
            }
            if block.header.bits != self.params.bits
                || !meets_target(&id, block.header.bits).unwrap_or(false)
            {
                continue;
            }
            let prev = block.header.prev_id;
            let Some(parent) = self.index.get(&prev) else {
                // Orphan: stash it and walk back towards known history.
                if let Some(sender) = from {
                    if !self.requested.contains(&prev) {
                        self.requested.insert(prev);
                        out.push((
                            sender,
                            Message::GetData(vec![InvItem {
                                kind: InvKind::BlockItem,
                                hash: prev,
                            }]),
                        ));
                    }
                }
                self.orphans.entry(prev).or_default().push(block);
                continue;
            };
            let height = parent.height + 1;
            let cum_work = parent.cum_work.clone() + &self.block_work;
            self.index.insert(
                id,
                IndexEntry {
                    height,
                    prev,
                    cum_work: cum_work.clone(),
                },
            );
            if prev == self.tip_id {
                match apply_block(&self.utxo, &block, height, self.params.subsidy) {
                    Ok(next) => {
                        self.utxo = next;
                        self.store
                            .record_block(block, height, &self.block_work)
                            .expect("tip extension is contiguous");
                        self.tip_id = id;
                        self.after_apply(height, id);
                        self.evaluate_closed_windows();
                        out.extend(self.broadcast_inv(id, from));
                    }
                    Err(_) => {
                        self.index.remove(&id);
                        continue;
                    }
                }
            } else if cum_work > self.tip_work() {
                self.side_blocks.insert(id, block);
                out.extend(self.try_reorg(id, from));
            } else {
                // Losing branch: keep the body around for a possible reorg.
                self.side_blocks.insert(id, block);
                out.extend(self.broadcast_inv(id, from));
            }
            if let Some(children) = self.orphans.remove(&id) {
                for child in children {
                    queue.push((child, None));
                }
            }
        }
        out
    }

    /// Candidate snapshot creation at pulse heights, from the node's own
    /// freshly updated UTXO set.
    fn after_apply(&mut self, height: u32, id: Hash256) {
        if !self.participates() {
            return;
        }
        let dp = self.config.pulse.delta_p;
        if height < dp || height % dp != 0 {
            return;
        }
        match create_snapshot(&self.utxo, height, id, self.config.chunk_limit) {
            Ok(snap) => {
                let entry = SnapshotEntry {
                    id: snapshot_id(&snap),
                    snapshot: snap,
                };
                self.store.candidate = Some(entry.clone());
                self.candidates.insert(height, entry);
            }
            Err(e) => {
                self.failure = Some(format!("candidate snapshot at {height} failed: {e}"));
            }
        }
    }

    fn evaluate_closed_windows(&mut self) {
        if !self.participates() {
            return;
        }
        let p = self.config.pulse;
        if p.delta_p == 0 {
            return;
        }
        let tip = self.tip_height();
        let mut pulse = p.delta_p;
        while pulse.checked_add(p.delta_r).is_some_and(|close| close <= tip) {
            if !self.evaluated.contains_key(&pulse) {
                let outcome = {
                    let blocks = self.store.window_blocks(pulse, pulse + p.delta_r);
                    decide(&tally(blocks, pulse, &p), &p)
                };
                self.evaluated.insert(pulse, Some(outcome));
                self.apply_outcome(pulse, outcome);
            }
            match pulse.checked_add(p.delta_p) {
                Some(next) => pulse = next,
                None => break,
            }
        }
    }

    /// Acceptance prunes and retires; InvalidPulse and Ambiguous change
    /// nothing, delaying pruning to the next pulse.
    fn apply_outcome(&mut self, pulse: u32, outcome: PulseOutcome) {
        let PulseOutcome::Accepted(id) = outcome else {
            return;
        };
        let Some(cand) = self.candidates.get(&pulse) else {
            return;
        };
        if cand.id != id {
            // The winning id is not ours to serve; without its data we keep
            // the previous snapshot. Honest networks never get here.
            return;
        }
        let cand = cand.clone();
        match verify_and_apply(&cand.snapshot, cand.id) {
            Ok(base) => {
                self.base_utxo = base;
                self.base_height = pulse;
            }
            Err(e) => {
                self.failure = Some(format!("accepted snapshot failed verification: {e}"));
                return;
            }
        }
        self.store.set_accepted(cand);
        self.store.retire_old_snapshot();
        if let Err(e) = self.store.prune_below(pulse + 1) {
            self.failure = Some(format!("prune after pulse {pulse} failed: {e}"));
        }
        self.store.candidate = None;
        self.candidates.retain(|h, _| *h > pulse);
    }

    fn try_reorg(&mut self, new_tip: Hash256, from: Option<NodeId>) -> Outbox {
        let mut out = Outbox::new();
        // Walk back to the best chain, collecting the challenger branch.
        let mut branch: Vec<Hash256> = Vec::new();
        let mut cursor = new_tip;
        let fork_height = loop {
            let entry = &self.index[&cursor];
            if self.store.meta(entry.height).map(|m| m.block_id) == Some(cursor) {
                break entry.height;
            }
            branch.push(cursor);
            cursor = entry.prev;
        };
        branch.reverse();
        if fork_height < self.base_height {
            self.failure = Some(format!(
                "reorg forks at {} below recoverable state base {}",
                fork_height, self.base_height
            ));
            return out;
        }
        let mut bodies = Vec::with_capacity(branch.len());
        for id in &branch {
            match self.side_blocks.get(id) {
                Some(b) => bodies.push(b.clone()),
                None => {
                    // Indexed blocks always arrived with bodies.
                    self.failure = Some(format!("reorg branch body missing for {id}"));
                    return out;
                }
            }
        }
        // Rebuild the state at the fork point, then validate the branch
        // before touching the store.
        let mut utxo = self.base_utxo.clone();
        for h in self.base_height + 1..=fork_height {
            let body = self.store.body(h).expect("bodies kept above state base");
            utxo = apply_block(&utxo, body, h, self.params.subsidy)
                .expect("stored chain was validated on arrival");
        }
        let dp = self.config.pulse.delta_p;
        let mut pulse_states: Vec<(u32, Hash256, UtxoSet)> = Vec::new();
        for (i, body) in bodies.iter().enumerate() {
            let h = fork_height + 1 + i as u32;
            match apply_block(&utxo, body, h, self.params.subsidy) {
                Ok(next) => utxo = next,
                Err(_) => {
                    for id in &branch[i..] {
                        self.index.remove(id);
                    }
                    return out;
                }
            }
            if self.participates() && dp > 0 && h >= dp && h % dp == 0 {
                pulse_states.push((h, branch[i], utxo.clone()));
            }
        }
        // Commit: move the abandoned tail aside, rewrite, re-evaluate.
        let old_tip = self.tip_height();
        for h in fork_height + 1..=old_tip {
            if let Ok(b) = self.store.body(h) {
                self.side_blocks.insert(b.id(), b.clone());
            }
        }
        if let Err(e) = self.store.truncate_above(fork_height) {
            self.failure = Some(format!("reorg truncation failed: {e}"));
            return out;
        }
        let p = self.config.pulse;
        let reverted: Vec<(u32, Option<PulseOutcome>)> = self
            .evaluated
            .iter()
            .filter(|(ph, _)| **ph + p.delta_r > fork_height)
            .map(|(ph, o)| (*ph, *o))
            .collect();
        for (ph, _) in &reverted {
            self.evaluated.remove(ph);
        }
        self.candidates.retain(|h, _| *h <= fork_height);
        for (h, body) in bodies.into_iter().enumerate() {
            self.store
                .record_block(body, fork_height + 1 + h as u32, &self.block_work)
                .expect("branch heights are contiguous");
        }
        for (h, id, state) in pulse_states {
            let saved = std::mem::replace(&mut self.utxo, state);
            self.after_apply(h, id);
            self.utxo = saved;
        }
        self.utxo = utxo;
        self.tip_id = new_tip;
        self.store.candidate = self.candidates.values().next_back().cloned();
        self.evaluate_closed_windows();
        for (ph, old) in reverted {
            if let Some(PulseOutcome::Accepted(old_id)) = old {
                let new = self.evaluated.get(&ph).copied().flatten();
                if new != Some(PulseOutcome::Accepted(old_id)) {
                    self.failure = Some(format!(
                        "reorg reverted the accepted snapshot of pulse {ph} after pruning"
                    ));
                }
            }
        }
        out.extend(self.broadcast_inv(new_tip, from));
        out
    }

    // -----------------------------------------------------------------------
    // Message handling.

    pub fn handle_message(&mut self, from: NodeId, msg: Message) -> Outbox {
        if self.is_bootstrapping() {
            self.bootstrap_handle(from, msg)
        } else {
            self.established_handle(from, msg)
        }
    }

    fn established_handle(&mut self, from: NodeId, msg: Message) -> Outbox {
        let mut out = Outbox::new();
        match msg {
            Message::Version(_) => {
                out.push((from, Message::Version(self.version_payload())));
                out.push((from, Message::Verack));
            }
            Message::Verack => {}
            Message::GetHeaders {
                from_height,
                max_count,
            } => {
                let all = self.store.headers();
                let mut headers = all
                    .get(from_height as usize..)
                    .unwrap_or_default()
                    .to_vec();
                if max_count > 0 {
                    headers.truncate(max_count as usize);
                }
                out.push((from, Message::Headers(headers)));
            }
            Message::GetState => {
                let inv = match self.store.accepted() {
                    Some(entry) if self.participates() => state_inventory(&entry.snapshot),
                    _ => Message::Inv(Vec::new()),
                };
                out.push((from, inv));
            }
            Message::GetData(items) => {
                for item in items {
                    match item.kind {
                        InvKind::BlockItem => {
                            let body = self
                                .store
                                .body_by_id(&item.hash)
                                .or_else(|| self.side_blocks.get(&item.hash));
                            if let Some(b) = body {
                                out.push((from, Message::Block(b.clone())));
                            }
                        }
                        InvKind::StateItem => {
                            let Some(entry) = self.store.accepted() else {
                                continue;
                            };
                            if let Some((index, mut payload)) =
                                piece_for_hash(&entry.snapshot, &item.hash)
                            {
                                if self.config.misbehavior == Some(Misbehavior::TamperChunks)
                                    && index >= 1
                                    && !payload.is_empty()
                                {
                                    payload[0] ^= 0x01;
                                }
                                out.push((
                                    from,
                                    Message::StateChunk {
                                        snapshot_id: entry.id.0,
                                        index,
                                        payload,
                                    },
                                ));
                            }
                        }
                    }
                }
            }
            Message::Inv(items) => {
                let wanted: Vec<InvItem> = items
                    .into_iter()
                    .filter(|i| {
                        i.kind == InvKind::BlockItem
                            && !self.index.contains_key(&i.hash)
                            && !self.requested.contains(&i.hash)
                    })
                    .collect();
                if !wanted.is_empty() {
                    for item in &wanted {
                        self.requested.insert(item.hash);
                    }
                    out.push((from, Message::GetData(wanted)));
                }
            }
            Message::Block(block) => {
                out.extend(self.accept_block(block, Some(from)));
            }
            Message::Headers(headers) => {
                if self.catchup_from == Some(from) {
                    self.catchup_from = None;
                    let wanted: Vec<InvItem> = headers
                        .iter()
                        .map(block_id)
                        .filter(|id| !self.index.contains_key(id) && !self.requested.contains(id))
                        .map(|hash| InvItem {
                            kind: InvKind::BlockItem,
                            hash,
                        })
                        .collect();
                    if !wanted.is_empty() {
                        for item in &wanted {
                            self.requested.insert(item.hash);
                        }
                        out.push((from, Message::GetData(wanted)));
                    }
                }
            }
            Message::StateChunk { .. } => {}
        }
        out
    }

    /// After joining, ask one peer for everything mined since the
    /// bootstrap chain was fetched.
    pub fn begin_catchup(&mut self, peer: NodeId) -> Outbox {
        self.catchup_from = Some(peer);
        vec![(
            peer,
            Message::GetHeaders {
                from_height: self.tip_height() + 1,
                max_count: 0,
            },
        )]
    }

    // -----------------------------------------------------------------------
    // Bootstrap.

    pub fn start_bootstrap(&mut self, neighbors: Vec<NodeId>) -> Outbox {
        let retries = self.bootstrap.as_ref().map_or(0, |b| b.retries + 1);
        let legacy = self.config.role == Role::LegacyFull;
        let out = neighbors
            .iter()
            .map(|n| (*n, Message::Version(self.version_payload())))
            .collect();
        self.bootstrap = Some(Bootstrap::new(neighbors, legacy, retries));
        out
    }

    fn bootstrap_handle(&mut self, from: NodeId, msg: Message) -> Outbox {
        let mut bs = self.bootstrap.take().expect("bootstrapping");
        let mut out = Outbox::new();
        match msg {
            Message::Version(v) => {
                out.push((from, Message::Verack));
                bs.versions_pending.remove(&from);
                if bs.legacy {
                    if bs.header_source.is_none() && v.services & SERVICE_NODE_NETWORK != 0 {
                        bs.header_source = Some(from);
                        out.push((
                            from,
                            Message::GetHeaders {
                                from_height: 0,
                                max_count: 0,
                            },
                        ));
                    } else if bs.versions_pending.is_empty() && bs.header_source.is_none() {
                        bs.abort("no neighbor serves full history");
                    }
                } else if v.supports_coinprune() {
                    out.push((from, Message::GetState));
                } else {
                    bs.awaiting_ads.remove(&from);
                    self.maybe_choose(&mut bs, &mut out);
                }
            }
            Message::Verack => {}
            Message::Inv(items) if bs.phase == BootstrapPhase::AcquireSnapshot => {
                if bs.awaiting_ads.remove(&from)
                    && !items.is_empty()
                    && items.iter().all(|i| i.kind == InvKind::StateItem)
                {
                    let hashes: Vec<Hash256> = items.iter().map(|i| i.hash).collect();
                    bs.ads.insert(from, id_from_piece_hashes(&hashes));
                    bs.peer_pieces.insert(from, hashes);
                }
                self.maybe_choose(&mut bs, &mut out);
            }
            Message::StateChunk {
                snapshot_id: sid,
                index,
                payload,
            } if bs.phase == BootstrapPhase::AcquireSnapshot => {
                if bs.chosen == Some(SnapshotId(sid))
                    && Some(from) == bs.source
                    && (index as usize) < bs.expected_pieces.len()
                {
                    bs.pieces.insert(index, payload);
                    if bs.pieces.len() == bs.expected_pieces.len() {
                        self.assemble_snapshot(&mut bs, &mut out);
                    }
                }
            }
            Message::Headers(headers) if bs.phase == BootstrapPhase::FetchHeaders => {
                if Some(from) == bs.header_source {
                    self.check_headers(&mut bs, headers, &mut out);
                }
            }
            Message::Block(block) if bs.phase == BootstrapPhase::FetchChaintail => {
                if let Some(height) = bs.tail_ids.get(&block.id()).copied() {
                    bs.tail_blocks.insert(height, block);
                    if bs.tail_blocks.len() == bs.tail_ids.len() {
                        bs.phase = BootstrapPhase::Verifying;
                        self.verify_and_finish(&mut bs);
                    }
                }
            }
            _ => {}
        }
        self.bootstrap = Some(bs);
        out
    }

    fn maybe_choose(&mut self, bs: &mut Bootstrap, out: &mut Outbox) {
        if bs.phase != BootstrapPhase::AcquireSnapshot || !bs.awaiting_ads.is_empty() {
            return;
        }
        match choose_snapshot(&bs.ads, bs.neighbors.len()) {
            Some(id) => {
                bs.chosen = Some(id);
                let source = *bs
                    .ads
                    .iter()
                    .find(|(_, ad)| **ad == id)
                    .expect("winner was advertised")
                    .0;
                bs.source = Some(source);
                bs.expected_pieces = bs.peer_pieces[&source].clone();
                let items = bs
                    .expected_pieces
                    .iter()
                    .map(|hash| InvItem {
                        kind: InvKind::StateItem,
                        hash: *hash,
                    })
                    .collect();
                out.push((source, Message::GetData(items)));
            }
            None => bs.abort("no absolute-majority snapshot advertisement"),
        }
    }

    fn assemble_snapshot(&mut self, bs: &mut Bootstrap, out: &mut Outbox) {
        let header = match SnapshotHeader::deserialize(&bs.pieces[&0]) {
            Ok(h) => h,
            Err(e) => {
                bs.abort(format!("malformed snapshot header: {e}"));
                return;
            }
        };
        if header.chunk_count as usize != bs.expected_pieces.len() - 1 {
            bs.abort("snapshot chunk count does not match advertisement");
            return;
        }
        let chunks = (1..bs.expected_pieces.len() as u32)
            .map(|i| Chunk {
                payload: bs.pieces[&i].clone(),
            })
            .collect();
        let snapshot = Snapshot { header, chunks };
        let chosen = bs.chosen.expect("chosen before fetching pieces");
        match verify_and_apply(&snapshot, chosen) {
            Ok(utxo) => {
                bs.snapshot = Some(snapshot);
                bs.snapshot_utxo = Some(utxo);
                bs.header_source = bs.source;
                bs.phase = BootstrapPhase::FetchHeaders;
                out.push((
                    bs.source.expect("source set"),
                    Message::GetHeaders {
                        from_height: 0,
                        max_count: 0,
                    },
                ));
            }
            Err(e) => bs.abort(format!("snapshot verification failed: {e}")),
        }
    }

    fn check_headers(&mut self, bs: &mut Bootstrap, headers: Vec<BlockHeader>, out: &mut Outbox) {
        let genesis_id = self.params.genesis.id();
        if headers.is_empty() || validate_header_chain(&headers, &genesis_id).is_err() {
            bs.abort("invalid headerchain");
            return;
        }
        let tip = headers.len() as u32 - 1;
        let tail_start = if bs.legacy {
            1
        } else {
            let snap = bs.snapshot.as_ref().expect("snapshot before headers");
            let sh = snap.header.height;
            let p = self.config.pulse;
            let anchored = (sh as usize) < headers.len()
                && block_id(&headers[sh as usize]) == snap.header.block_id
                && p.delta_p > 0
                && sh >= p.delta_p
                && sh % p.delta_p == 0
                && tip >= sh + p.delta_r;
            if !anchored {
                bs.abort("snapshot not anchored in the headerchain");
                return;
            }
            sh + 1
        };
        bs.headers = headers;
        bs.tail_ids = (tail_start..=tip)
            .map(|h| (block_id(&bs.headers[h as usize]), h))
            .collect();
        bs.phase = BootstrapPhase::FetchChaintail;
        if bs.tail_ids.is_empty() {
            bs.phase = BootstrapPhase::Verifying;
            self.verify_and_finish(bs);
            return;
        }
        let items: Vec<InvItem> = (tail_start..=tip)
            .map(|h| InvItem {
                kind: InvKind::BlockItem,
                hash: block_id(&bs.headers[h as usize]),
            })
            .collect();
        let source = bs.header_source.expect("header source set");
        out.push((source, Message::GetData(items)));
    }

    fn verify_and_finish(&mut self, bs: &mut Bootstrap) {
        let tip = bs.headers.len() as u32 - 1;
        let p = self.config.pulse;
        let (mut utxo, start) = if bs.legacy {
            let genesis_state =
                apply_block(&UtxoSet::new(), &self.params.genesis, 0, self.params.subsidy)
                    .expect("scenario genesis applies");
            (genesis_state, 1)
        } else {
            let snap = bs.snapshot.as_ref().expect("snapshot before verify");
            (
                bs.snapshot_utxo.clone().expect("snapshot state kept"),
                snap.header.height + 1,
            )
        };
        let mut replay_candidates: Vec<(u32, SnapshotEntry)> = Vec::new();
        for h in start..=tip {
            let block = &bs.tail_blocks[&h];
            match apply_block(&utxo, block, h, self.params.subsidy) {
                Ok(next) => utxo = next,
                Err(e) => {
                    bs.abort(format!("chain replay failed at {h}: {e}"));
                    return;
                }
            }
            if !bs.legacy && p.delta_p > 0 && h >= p.delta_p && h % p.delta_p == 0 {
                match create_snapshot(&utxo, h, block.id(), self.config.chunk_limit) {
                    Ok(snap) => replay_candidates.push((
                        h,
                        SnapshotEntry {
                            id: snapshot_id(&snap),
                            snapshot: snap,
                        },
                    )),
                    Err(e) => {
                        bs.abort(format!("candidate snapshot at {h} failed: {e}"));
                        return;
                    }
                }
            }
        }
        if bs.legacy {
            self.finish_bootstrap(bs, utxo, replay_candidates);
            return;
        }
        // The snapshot is applied in good faith; acceptance hinges on its
        // reaffirmation window inside the fetched chain.
        let chosen = bs.chosen.expect("chosen snapshot");
        let pulse = bs.snapshot.as_ref().expect("snapshot").header.height;
        let outcome = {
            let window: Vec<(u32, &Block)> = (pulse + 1..=pulse + p.delta_r)
                .map(|h| (h, &bs.tail_blocks[&h]))
                .collect();
            decide(&tally(window, pulse, &p), &p)
        };
        if outcome == PulseOutcome::Accepted(chosen) {
            self.finish_bootstrap(bs, utxo, replay_candidates);
        } else {
            bs.abort(format!(
                "snapshot {chosen} is not the reaffirmed snapshot of its window ({outcome:?})"
            ));
        }
    }

    fn finish_bootstrap(
        &mut self,
        bs: &mut Bootstrap,
        tip_utxo: UtxoSet,
        replay_candidates: Vec<(u32, SnapshotEntry)>,
    ) {
        let tip = bs.headers.len() as u32 - 1;
        let mut store = NodeStore::new();
        if bs.legacy {
            store.archival = true;
            store
                .record_block(self.params.genesis.clone(), 0, &self.block_work)
                .expect("fresh store");
            for h in 1..=tip {
                let block = bs.tail_blocks.remove(&h).expect("tail complete");
                store
                    .record_block(block, h, &self.block_work)
                    .expect("contiguous tail");
            }
            self.base_utxo =
                apply_block(&UtxoSet::new(), &self.params.genesis, 0, self.params.subsidy)
                    .expect("scenario genesis applies");
            self.base_height = 0;
        } else {
            let snapshot = bs.snapshot.take().expect("snapshot");
            let chosen = bs.chosen.expect("chosen");
            let snap_height = snapshot.header.height;
            for h in 0..=snap_height {
                store
                    .record_header(bs.headers[h as usize], h, &self.block_work)
                    .expect("contiguous headers");
            }
            store.set_accepted(SnapshotEntry {
                id: chosen,
                snapshot,
            });
            for h in snap_height + 1..=tip {
                let block = bs.tail_blocks.remove(&h).expect("tail complete");
                store
                    .record_block(block, h, &self.block_work)
                    .expect("contiguous tail");
            }
            store
                .prune_below(snap_height + 1)
                .expect("prune at snapshot bound");
            self.base_utxo = bs.snapshot_utxo.take().expect("snapshot state");
            self.base_height = snap_height;
            let p = self.config.pulse;
            // Windows that closed inside the pruned prefix are unknowable;
            // the chosen snapshot's own window was just verified.
            let mut pulse = p.delta_p;
            while pulse + p.delta_r <= snap_height {
                self.evaluated.insert(pulse, None);
                pulse += p.delta_p;
            }
            self.evaluated
                .insert(snap_height, Some(PulseOutcome::Accepted(chosen)));
            for (h, entry) in replay_candidates {
                self.candidates.insert(h, entry);
            }
            store.candidate = self.candidates.values().next_back().cloned();
        }
        let mut cum = BigUint::default();
        for (h, header) in bs.headers.iter().enumerate() {
            cum += &self.block_work;
            self.index.insert(
                block_id(header),
                IndexEntry {
                    height: h as u32,
                    prev: header.prev_id,
                    cum_work: cum.clone(),
                },
            );
        }
        self.tip_id = block_id(bs.headers.last().expect("nonempty chain"));
        self.store = store;
        self.utxo = tip_utxo;
        bs.phase = BootstrapPhase::Accepted;
        // Windows that close after the tail was cut are evaluated from
        // gossip like any established node; catch up on any already closed.
        self.evaluate_closed_windows();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{hash256, merkle_root, Transaction, TxOut};
    use crate::reaffirm::MARKER_LEN;

    const BITS: u32 = 0x207f_ffff;
    const SUBSIDY: u64 = 50 * 100_000_000;

    fn sid(byte: u8) -> SnapshotId {
        SnapshotId(Hash256([byte; 32]))
    }

    fn coinbase(height: u32, data: Vec<u8>) -> Transaction {
        Transaction {
            inputs: vec![],
            outputs: vec![TxOut {
                value: SUBSIDY,
                script: hash256(b"test-wallet").0.to_vec(),
                creation_height: height,
                is_coinbase: true,
            }],
            coinbase_data: Some(data),
        }
    }

    fn grind(prev: Hash256, height: u32, data: Vec<u8>) -> Block {
        let cb = coinbase(height, data);
        let root = merkle_root(&[cb.txid()]).unwrap();
        let mut header = BlockHeader {
            version: 1,
            prev_id: prev,
            merkle_root: root,
            timestamp: height,
            bits: BITS,
            nonce: 0,
        };
        loop {
            if meets_target(&block_id(&header), BITS).unwrap() {
                break;
            }
            header.nonce += 1;
        }
        Block {
            header,
            transactions: vec![cb],
        }
    }

    fn params() -> ChainParams {
        let cb = coinbase(0, b"genesis".to_vec());
        let root = merkle_root(&[cb.txid()]).unwrap();
        let mut header = BlockHeader {
            version: 1,
            prev_id: Hash256::ZERO,
            merkle_root: root,
            timestamp: 0,
            bits: BITS,
            nonce: 0,
        };
        loop {
            if meets_target(&block_id(&header), BITS).unwrap() {
                break;
            }
            header.nonce += 1;
        }
        ChainParams {
            genesis: Block {
                header,
                transactions: vec![cb],
            },
            bits: BITS,
            subsidy: SUBSIDY,
            magic: crate::codec::DEFAULT_MAGIC,
        }
    }

    fn config(role: Role) -> NodeConfig {
        NodeConfig {
            role,
            pulse: PulseParams {
                delta_p: 8,
                delta_r: 4,
                k: 2,
            },
            chunk_limit: crate::snapshot::DEFAULT_CHUNK_LIMIT,
            mining_power: 1,
            neighbor_count: 8,
            honest: true,
            misbehavior: None,
        }
    }

    /// Extends the node's best chain by one block whose coinbase data is
    /// whatever the node's own miner logic produces.
    fn mine_next(node: &mut SimNode) -> Block {
        let data = node.next_coinbase_data();
        let block = grind(node.tip_id(), node.tip_height() + 1, data);
        node.accept_local_block(block.clone());
        block
    }

    #[test]
    fn choose_snapshot_majority_rule() {
        let s = sid(0x01);
        let t = sid(0x02);
        let mut ads = BTreeMap::new();
        for n in 0..5 {
            ads.insert(n, s);
        }
        for n in 5..8 {
            ads.insert(n, t);
        }
        assert_eq!(choose_snapshot(&ads, 8), Some(s));

        let mut split = BTreeMap::new();
        for n in 0..4 {
            split.insert(n, s);
        }
        for n in 4..8 {
            split.insert(n, t);
        }
        assert_eq!(choose_snapshot(&split, 8), None);

        let distinct: BTreeMap<NodeId, SnapshotId> =
            (0..8).map(|n| (n, sid(n as u8))).collect();
        assert_eq!(choose_snapshot(&distinct, 8), None);
    }

    #[test]
    fn miner_emits_marker_only_inside_window() {
        let mut node = SimNode::new_established(0, config(Role::CoinpruneMiner), params());
        for _ in 0..8 {
            mine_next(&mut node);
        }
        assert_eq!(node.tip_height(), 8);
        // Height 9 = pulse 8 + 1: first window slot.
        let data = node.next_coinbase_data();
        assert_eq!(data.len(), MARKER_LEN);
        let cand = node.candidates.get(&8).unwrap();
        assert_eq!(crate::reaffirm::parse_marker(&data), Some(cand.id));
        for _ in 0..4 {
            mine_next(&mut node);
        }
        // Height 13 = pulse + delta_r + 1: window closed.
        assert_eq!(node.tip_height(), 12);
        assert!(node.next_coinbase_data().is_empty());
    }

    #[test]
    fn adversary_emits_crafted_marker() {
        let mut cfg = config(Role::AdversaryMiner);
        cfg.honest = false;
        cfg.misbehavior = Some(Misbehavior::InvalidReaffirm);
        let mut node = SimNode::new_established(0, cfg, params());
        for _ in 0..8 {
            mine_next(&mut node);
        }
        let data = node.next_coinbase_data();
        assert_eq!(
            crate::reaffirm::parse_marker(&data),
            Some(invalid_reaffirm_id())
        );
    }

    #[test]
    fn accepted_pulse_prunes_below_snapshot() {
        let mut node = SimNode::new_established(0, config(Role::CoinpruneMiner), params());
        for _ in 0..12 {
            mine_next(&mut node);
        }
        // Window 9..=12 carried 4 markers >= k; pulse 8 accepted.
        assert!(matches!(
            node.evaluated.get(&8),
            Some(Some(PulseOutcome::Accepted(_)))
        ));
        assert_eq!(node.store.accepted().unwrap().height(), 8);
        assert_eq!(node.store.bodies_range(), Some((9, 12)));
        assert_eq!(node.store.prune_height(), 9);
        // Metas still cover the whole chain.
        assert_eq!(node.store.headers().len(), 13);
        assert!(node.failure.is_none());
    }

    #[test]
    fn unreaffirmed_pulse_leaves_storage_unchanged() {
        // A full node that does not mine sees no markers at all.
        let mut miner = SimNode::new_established(0, config(Role::CoinpruneFull), params());
        for h in 1..=12 {
            let block = grind(miner.tip_id(), h, Vec::new());
            miner.accept_local_block(block);
        }
        assert_eq!(
            miner.evaluated.get(&8),
            Some(&Some(PulseOutcome::InvalidPulse))
        );
        assert!(miner.store.accepted().is_none());
        assert_eq!(miner.store.bodies_range(), Some((0, 12)));
        assert_eq!(miner.store.prune_height(), 0);
    }

    #[test]
    fn reorg_within_window_reevaluates_before_pruning() {
        let mut node = SimNode::new_established(0, config(Role::CoinpruneMiner), params());
        for _ in 0..8 {
            mine_next(&mut node);
        }
        let pulse_tip = node.tip_id();
        // Main branch: three marker blocks, one short of closing the window.
        let mut main_blocks = Vec::new();
        for _ in 0..3 {
            main_blocks.push(mine_next(&mut node));
        }
        assert_eq!(node.tip_height(), 11);
        assert!(node.evaluated.is_empty());
        // Challenger branch from the pulse block: longer, but markerless.
        let mut prev = pulse_tip;
        for h in 9..=13 {
            let block = grind(prev, h, b"rival".to_vec());
            prev = block.id();
            node.accept_block(block, None);
        }
        assert_eq!(node.tip_height(), 13);
        assert_eq!(node.tip_id(), prev);
        // The tally was re-taken on the new best chain: no markers landed.
        assert_eq!(
            node.evaluated.get(&8),
            Some(&Some(PulseOutcome::InvalidPulse))
        );
        assert!(node.store.accepted().is_none());
        assert_eq!(node.store.prune_height(), 0);
        assert!(node.failure.is_none());
    }

    #[test]
    fn legacy_node_tracks_marker_blocks_without_pruning() {
        let mut legacy = SimNode::new_established(0, config(Role::LegacyFull), params());
        let mut miner = SimNode::new_established(1, config(Role::CoinpruneMiner), params());
        for _ in 0..14 {
            let block = mine_next(&mut miner);
            legacy.accept_block(block, None);
        }
        // Marker blocks were accepted untouched; tips agree; nothing pruned.
        assert_eq!(legacy.tip_id(), miner.tip_id());
        assert_eq!(legacy.store.bodies_range(), Some((0, 14)));
        assert!(legacy.evaluated.is_empty());
        assert!(legacy.next_coinbase_data().is_empty());
    }

    #[test]
    fn orphan_blocks_resolve_once_the_parent_arrives() {
        let mut miner = SimNode::new_established(0, config(Role::CoinpruneMiner), params());
        let b1 = mine_next(&mut miner);
        let b2 = mine_next(&mut miner);
        let mut node = SimNode::new_established(1, config(Role::CoinpruneFull), params());
        let out = node.accept_block(b2.clone(), Some(0));
        // The node asks the sender for the missing parent.
        assert!(out
            .iter()
            .any(|(to, m)| *to == 0 && matches!(m, Message::GetData(_))));
        assert_eq!(node.tip_height(), 0);
        node.accept_block(b1, Some(0));
        assert_eq!(node.tip_height(), 2);
        assert_eq!(node.tip_id(), b2.id());
    }

    #[test]
    fn pruned_node_serves_headers_and_chaintail() {
        let mut node = SimNode::new_established(0, config(Role::CoinpruneMiner), params());
        for _ in 0..12 {
            mine_next(&mut node);
        }
        assert_eq!(node.store.prune_height(), 9);
        let out = node.handle_message(
            7,
            Message::GetHeaders {
                from_height: 0,
                max_count: 0,
            },
        );
        let Message::Headers(hs) = &out[0].1 else {
            panic!("expected headers");
        };
        assert_eq!(hs.len(), 13);
        // Full-history service bit dropped after pruning.
        assert_eq!(node.services() & SERVICE_NODE_NETWORK, 0);
        assert_ne!(node.services() & SERVICE_NODE_COINPRUNE, 0);
    }
}
