//! Deterministic discrete-event network simulator. All randomness flows
//! from the scenario seed through one ChaCha stream; identical scenarios
//! produce byte-identical metrics.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::codec::{encode, Message};
use crate::node::{BootstrapPhase, NodeId, Outbox, SimNode};
use crate::reaffirm::PulseOutcome;
use crate::scenario::{assemble_block, build_workload_txs, Scenario};
use crate::store::StorageReport;

/// Virtual time between mined blocks; latencies are small against it so
/// the network usually converges between blocks, like Bitcoin's 10 min.
pub const BLOCK_INTERVAL: u64 = 100;
pub const MAX_JOIN_RETRIES: u32 = 5;
const STORAGE_SAMPLE_EVERY: u32 = 50;

#[derive(Debug, Clone)]
enum EventKind {
    Mine,
    Deliver {
        from: NodeId,
        to: NodeId,
        msg: Message,
    },
    Join(usize),
    Retry(NodeId),
}

/// Heap entries order by (time, insertion sequence) only; the sequence is
/// unique, so payloads never need comparing and ties are deterministic.
#[derive(Debug, Clone)]
struct Event {
    time: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Event) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Event) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Event) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StorageSample {
    pub height: u32,
    #[serde(flatten)]
    pub report: StorageReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeRecord {
    pub node_id: NodeId,
    pub role: &'static str,
    #[serde(flatten)]
    pub storage: StorageReport,
    pub traffic_in: u64,
    pub traffic_out: u64,
    pub traffic_by_command_in: BTreeMap<&'static str, u64>,
    pub traffic_by_command_out: BTreeMap<&'static str, u64>,
    pub tip_height: u32,
    pub tip_id: String,
    pub join_outcome: Option<String>,
    pub events_to_accept: Option<u64>,
    pub retries: Option<u32>,
    pub failure: Option<String>,
    pub storage_series: Vec<StorageSample>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub tip_height: u32,
    pub tip_id: String,
    pub blocks_mined: u32,
    pub pulses: BTreeMap<u32, String>,
    pub nodes: Vec<NodeRecord>,
    pub total_bytes_sent: u64,
    pub total_bytes_received: u64,
}

impl Metrics {
    /// One JSON record per line: a chain record, one per pulse, one per
    /// node, and a totals record. Field order is fixed by the structs.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        out.push_str(
            &serde_json::json!({
                "type": "chain",
                "tip_height": self.tip_height,
                "tip_id": self.tip_id,
                "blocks_mined": self.blocks_mined,
            })
            .to_string(),
        );
        out.push('\n');
        for (height, outcome) in &self.pulses {
            out.push_str(
                &serde_json::json!({
                    "type": "pulse",
                    "height": height,
                    "outcome": outcome,
                })
                .to_string(),
            );
            out.push('\n');
        }
        for node in &self.nodes {
            let mut value = serde_json::to_value(node).expect("node record serializes");
            value["type"] = "node".into();
            out.push_str(&value.to_string());
            out.push('\n');
        }
        out.push_str(
            &serde_json::json!({
                "type": "totals",
                "total_bytes_sent": self.total_bytes_sent,
                "total_bytes_received": self.total_bytes_received,
            })
            .to_string(),
        );
        out.push('\n');
        out
    }

    pub fn to_summary_csv(&self) -> String {
        let mut out = String::from(
            "node_id,role,bytes_bodies,bytes_metas,bytes_snapshot,traffic_in,traffic_out,join_outcome,events_to_accept\n",
        );
        for n in &self.nodes {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                n.node_id,
                n.role,
                n.storage.bytes_bodies,
                n.storage.bytes_metas,
                n.storage.bytes_snapshot,
                n.traffic_in,
                n.traffic_out,
                n.join_outcome.as_deref().unwrap_or(""),
                n.events_to_accept
                    .map(|e| e.to_string())
                    .unwrap_or_default(),
            ));
        }
        out
    }
}

#[derive(Debug, Default, Clone)]
struct JoinTracking {
    events_seen: u64,
    events_to_accept: Option<u64>,
    used_neighbors: BTreeSet<NodeId>,
    outcome: Option<String>,
    retry_pending: bool,
    wired: bool,
}

struct Sim {
    scenario: Scenario,
    nodes: Vec<SimNode>,
    established: Vec<NodeId>,
    rng: ChaCha20Rng,
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
    link_last: BTreeMap<(NodeId, NodeId), u64>,
    traffic_in: Vec<u64>,
    traffic_out: Vec<u64>,
    by_command_in: Vec<BTreeMap<&'static str, u64>>,
    by_command_out: Vec<BTreeMap<&'static str, u64>>,
    total_sent: u64,
    total_received: u64,
    blocks_mined: u32,
    joins: BTreeMap<NodeId, JoinTracking>,
    storage_series: Vec<Vec<StorageSample>>,
}

impl Sim {
    fn new(scenario: Scenario) -> Sim {
        let params = scenario.chain_params();
        let mut nodes = Vec::new();
        for (id, spec) in scenario.node_specs.iter().enumerate() {
            nodes.push(SimNode::new_established(id, spec.clone(), params.clone()));
        }
        let n = nodes.len();
        let established = (0..n).collect();
        let rng = ChaCha20Rng::seed_from_u64(scenario.seed);
        Sim {
            scenario,
            nodes,
            established,
            rng,
            heap: BinaryHeap::new(),
            seq: 0,
            link_last: BTreeMap::new(),
            traffic_in: vec![0; n],
            traffic_out: vec![0; n],
            by_command_in: vec![BTreeMap::new(); n],
            by_command_out: vec![BTreeMap::new(); n],
            total_sent: 0,
            total_received: 0,
            blocks_mined: 0,
            joins: BTreeMap::new(),
            storage_series: vec![Vec::new(); n],
        }
    }

    fn schedule(&mut self, time: u64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Reverse(Event {
            time,
            seq: self.seq,
            kind,
        }));
    }

    /// Reliable ordered links: per-link delivery times never reorder.
    fn send(&mut self, now: u64, from: NodeId, to: NodeId, msg: Message) {
        let bytes = encode(&msg, self.scenario.magic).len() as u64;
        self.traffic_out[from] += bytes;
        self.total_sent += bytes;
        *self.by_command_out[from].entry(msg.command()).or_insert(0) += bytes;
        let latency = self
            .rng
            .gen_range(self.scenario.latency.min..=self.scenario.latency.max);
        let last = self.link_last.get(&(from, to)).copied().unwrap_or(0);
        let at = (now + latency).max(last);
        self.link_last.insert((from, to), at);
        self.schedule(at, EventKind::Deliver { from, to, msg });
    }

    fn send_all(&mut self, now: u64, from: NodeId, out: Outbox) {
        for (to, msg) in out {
            self.send(now, from, to, msg);
        }
    }

    /// Builds the initial overlay: a ring for connectivity plus random
    /// extra links up to each node's target degree.
    fn build_topology(&mut self) {
        let n = self.nodes.len();
        let mut adjacency: Vec<BTreeSet<NodeId>> = vec![BTreeSet::new(); n];
        if n > 1 {
            for i in 0..n {
                let next = (i + 1) % n;
                adjacency[i].insert(next);
                adjacency[next].insert(i);
            }
        }
        for i in 0..n {
            let want = self.nodes[i].config.neighbor_count.min(n.saturating_sub(1));
            let mut guard = 0;
            while adjacency[i].len() < want && guard < 10 * n {
                let pick = self.rng.gen_range(0..n);
                if pick != i {
                    adjacency[i].insert(pick);
                    adjacency[pick].insert(i);
                }
                guard += 1;
            }
        }
        for (i, peers) in adjacency.into_iter().enumerate() {
            self.nodes[i].peers = peers.into_iter().collect();
        }
    }

    fn sample_neighbors(&mut self, count: usize, exclude: &BTreeSet<NodeId>) -> Vec<NodeId> {
        let mut pool: Vec<NodeId> = self
            .established
            .iter()
            .copied()
            .filter(|n| !exclude.contains(n))
            .collect();
        if pool.len() < count {
            // Disjoint retry sets where population allows; reuse otherwise.
            pool = self.established.clone();
        }
        let mut picked = Vec::new();
        while picked.len() < count && !pool.is_empty() {
            let i = self.rng.gen_range(0..pool.len());
            picked.push(pool.swap_remove(i));
        }
        picked
    }

    fn pick_miner(&mut self) -> Option<NodeId> {
        let weights: Vec<(NodeId, u64)> = self
            .established
            .iter()
            .map(|id| (*id, &self.nodes[*id]))
            .filter(|(_, n)| n.config.mining_power > 0 && n.failure.is_none())
            .map(|(id, n)| (id, n.config.mining_power))
            .collect();
        let total: u64 = weights.iter().map(|(_, w)| w).sum();
        if total == 0 {
            return None;
        }
        let mut roll = self.rng.gen_range(0..total);
        for (id, w) in weights {
            if roll < w {
                return Some(id);
            }
            roll -= w;
        }
        unreachable!("roll bounded by total weight")
    }

    fn mine(&mut self, now: u64) {
        let Some(miner) = self.pick_miner() else {
            return;
        };
        let block = {
            let node = &self.nodes[miner];
            let height = node.tip_height() + 1;
            let txs = build_workload_txs(&node.utxo, height, &self.scenario.tx_workload);
            assemble_block(
                node.tip_id(),
                height,
                now as u32,
                self.scenario.bits,
                self.scenario.subsidy,
                self.scenario.coinbase_outputs,
                node.next_coinbase_data(),
                txs,
            )
        };
        let out = self.nodes[miner].accept_local_block(block);
        self.send_all(now, miner, out);
        self.blocks_mined += 1;
        if self.blocks_mined % STORAGE_SAMPLE_EVERY == 0 {
            self.sample_storage();
        }
        if self.blocks_mined < self.scenario.chain_length {
            self.schedule(now + BLOCK_INTERVAL, EventKind::Mine);
        }
    }

    fn sample_storage(&mut self) {
        for id in 0..self.nodes.len() {
            let node = &self.nodes[id];
            let report = node.store.storage_report(node.utxo.serialized_size() as u64);
            self.storage_series[id].push(StorageSample {
                height: node.tip_height(),
                report,
            });
        }
    }

    fn spawn_joiner(&mut self, now: u64, join_index: usize) {
        let id = self.nodes.len();
        let join = self.scenario.join_events[join_index].clone();
        let params = self.scenario.chain_params();
        self.nodes
            .push(SimNode::new_joining(id, join.config, params));
        self.traffic_in.push(0);
        self.traffic_out.push(0);
        self.by_command_in.push(BTreeMap::new());
        self.by_command_out.push(BTreeMap::new());
        self.storage_series.push(Vec::new());
        let mut tracking = JoinTracking::default();
        let neighbors = if join_index == 0 {
            if let Some(pinned) = self.scenario.pinned_first_neighbors.clone() {
                pinned
            } else {
                self.sample_neighbors(self.nodes[id].config.neighbor_count, &BTreeSet::new())
            }
        } else {
            self.sample_neighbors(self.nodes[id].config.neighbor_count, &BTreeSet::new())
        };
        tracking.used_neighbors.extend(neighbors.iter().copied());
        self.joins.insert(id, tracking);
        let out = self.nodes[id].start_bootstrap(neighbors);
        self.send_all(now, id, out);
    }

    fn retry_joiner(&mut self, now: u64, id: NodeId) {
        let count = self.nodes[id].config.neighbor_count;
        let used = self.joins[&id].used_neighbors.clone();
        let neighbors = self.sample_neighbors(count, &used);
        let tracking = self.joins.get_mut(&id).expect("tracked joiner");
        tracking.used_neighbors.extend(neighbors.iter().copied());
        tracking.retry_pending = false;
        let out = self.nodes[id].start_bootstrap(neighbors);
        self.send_all(now, id, out);
    }

    /// Reacts to a joiner's phase transitions after a delivery: schedules
    /// retries on abort and wires accepted nodes into the overlay.
    fn check_bootstrap(&mut self, now: u64, id: NodeId) {
        let Some(phase) = self.nodes[id].bootstrap.as_ref().map(|b| b.phase) else {
            return;
        };
        match phase {
            BootstrapPhase::Aborted => {
                let retries = self.nodes[id].bootstrap.as_ref().unwrap().retries;
                let tracking = self.joins.get_mut(&id).expect("tracked joiner");
                if tracking.retry_pending || tracking.outcome.is_some() {
                    return;
                }
                if retries + 1 < MAX_JOIN_RETRIES {
                    tracking.retry_pending = true;
                    self.schedule(now + 1, EventKind::Retry(id));
                } else {
                    let reason = self.nodes[id]
                        .bootstrap
                        .as_ref()
                        .unwrap()
                        .abort_reason
                        .clone()
                        .unwrap_or_else(|| "aborted".into());
                    tracking.outcome = Some(format!("FAILED: {reason}"));
                }
            }
            BootstrapPhase::Accepted => {
                let tracking = self.joins.get_mut(&id).expect("tracked joiner");
                if tracking.wired {
                    return;
                }
                tracking.wired = true;
                tracking.outcome = Some("ACCEPTED".into());
                tracking.events_to_accept = Some(tracking.events_seen);
                let peers =
                    self.sample_neighbors(self.nodes[id].config.neighbor_count, &BTreeSet::new());
                for p in &peers {
                    self.nodes[*p].peers.push(id);
                }
                self.nodes[id].peers = peers.clone();
                self.established.push(id);
                if let Some(first) = peers.first().copied() {
                    let out = self.nodes[id].begin_catchup(first);
                    self.send_all(now, id, out);
                }
            }
            _ => {}
        }
    }

    fn run(mut self) -> (Metrics, Vec<SimNode>) {
        self.build_topology();
        self.schedule(BLOCK_INTERVAL, EventKind::Mine);
        for (i, join) in self.scenario.join_events.clone().iter().enumerate() {
            self.schedule(join.time, EventKind::Join(i));
        }
        while let Some(Reverse(Event { time: now, kind, .. })) = self.heap.pop() {
            match kind {
                EventKind::Mine => self.mine(now),
                EventKind::Deliver { from, to, msg } => {
                    let bytes = encode(&msg, self.scenario.magic).len() as u64;
                    self.traffic_in[to] += bytes;
                    self.total_received += bytes;
                    *self.by_command_in[to].entry(msg.command()).or_insert(0) += bytes;
                    if let Some(tracking) = self.joins.get_mut(&to) {
                        tracking.events_seen += 1;
                    }
                    let out = self.nodes[to].handle_message(from, msg);
                    self.send_all(now, to, out);
                    self.check_bootstrap(now, to);
                }
                EventKind::Join(i) => self.spawn_joiner(now, i),
                EventKind::Retry(id) => self.retry_joiner(now, id),
            }
        }
        self.sample_storage();
        debug_assert_eq!(self.total_sent, self.total_received);
        let metrics = self.finish();
        (metrics, self.nodes)
    }

    fn finish(&self) -> Metrics {
        // Chain facts come from the first honest established node.
        let reference = self
            .established
            .iter()
            .map(|id| &self.nodes[*id])
            .find(|n| n.config.honest && n.failure.is_none())
            .unwrap_or(&self.nodes[0]);
        let tip_height = reference.tip_height();
        let tip_id = reference.tip_id().to_hex();
        let pulses: BTreeMap<u32, String> = reference
            .evaluated
            .iter()
            .filter_map(|(ph, o)| o.map(|o| (*ph, o)))
            .map(|(ph, o)| {
                let text = match o {
                    PulseOutcome::Accepted(id) => format!("ACCEPTED:{id}"),
                    PulseOutcome::InvalidPulse => "INVALID_PULSE".into(),
                    PulseOutcome::Ambiguous => "AMBIGUOUS".into(),
                };
                (ph, text)
            })
            .collect();
        let mut records = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            let tracking = self.joins.get(&id);
            let join_outcome =
                tracking.map(|t| t.outcome.clone().unwrap_or_else(|| "PENDING".into()));
            records.push(NodeRecord {
                node_id: id,
                role: node.config.role.as_str(),
                storage: node
                    .store
                    .storage_report(node.utxo.serialized_size() as u64),
                traffic_in: self.traffic_in[id],
                traffic_out: self.traffic_out[id],
                traffic_by_command_in: self.by_command_in[id].clone(),
                traffic_by_command_out: self.by_command_out[id].clone(),
                tip_height: node.tip_height(),
                tip_id: node.tip_id().to_hex(),
                join_outcome,
                events_to_accept: tracking.and_then(|t| t.events_to_accept),
                retries: tracking.map(|_| node.bootstrap.as_ref().map_or(0, |b| b.retries)),
                failure: node.failure.clone(),
                storage_series: self.storage_series[id].clone(),
            });
        }
        Metrics {
            tip_height,
            tip_id,
            blocks_mined: self.blocks_mined,
            pulses,
            nodes: records,
            total_bytes_sent: self.total_sent,
            total_bytes_received: self.total_received,
        }
    }
}

/// Runs a scenario to completion and returns its metrics.
pub fn run(scenario: Scenario) -> Result<Metrics, String> {
    run_full(scenario).map(|(metrics, _)| metrics)
}

/// Like [`run`], but also hands back the final node states for oracle
/// checks that need more than the serialized metrics.
pub fn run_full(mut scenario: Scenario) -> Result<(Metrics, Vec<SimNode>), String> {
    scenario.resolve()?;
    Ok(Sim::new(scenario).run())
}
