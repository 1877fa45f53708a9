//! Scenario configuration: the JSON schema driving simulation runs, the
//! deterministic genesis block, and the scripted transaction workload.

use serde::{Deserialize, Serialize};

use crate::chain::{
    block_id, hash256, meets_target, merkle_root, Block, BlockHeader, Hash256, Transaction,
    TxIn, TxOut, UtxoSet,
};
use crate::node::{ChainParams, Misbehavior, NodeConfig, Role};
use crate::reaffirm::PulseParams;

pub const DEFAULT_BITS: u32 = 0x207f_ffff;
pub const DEFAULT_SUBSIDY: u64 = 50 * 100_000_000;
/// Every simulated output pays to one shared wallet key, so any miner can
/// deterministically rebuild the spendable pool from its own UTXO view.
pub const WALLET_WITNESS: &[u8] = b"scenario-shared-wallet-key";

pub fn wallet_script() -> Vec<u8> {
    hash256(WALLET_WITNESS).0.to_vec()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TxWorkload {
    pub txs_per_block: u32,
    pub outputs_per_tx: u32,
    /// Fraction of a transaction's output count consumed as inputs; 1.0
    /// keeps the UTXO set size flat apart from coinbase outputs.
    pub spend_ratio: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Latency {
    pub min: u64,
    pub max: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JoinEvent {
    pub time: u64,
    pub config: NodeConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub node_specs: Vec<NodeConfig>,
    pub pulse: PulseParams,
    pub chain_length: u32,
    pub tx_workload: TxWorkload,
    pub latency: Latency,
    #[serde(default)]
    pub join_events: Vec<JoinEvent>,
    #[serde(default = "default_bits")]
    pub bits: u32,
    #[serde(default = "default_subsidy")]
    pub subsidy: u64,
    #[serde(default = "default_magic")]
    pub magic: u32,
    /// Coinbase outputs minted per block; more outputs grow the UTXO set
    /// and with it the snapshot's share of a joiner's download.
    #[serde(default = "default_coinbase_outputs")]
    pub coinbase_outputs: u32,
    /// Pinned neighbor set for the first join event's first attempt, the
    /// eclipse-attack hook.
    #[serde(default)]
    pub pinned_first_neighbors: Option<Vec<usize>>,
}

fn default_bits() -> u32 {
    DEFAULT_BITS
}

fn default_subsidy() -> u64 {
    DEFAULT_SUBSIDY
}

fn default_magic() -> u32 {
    crate::codec::DEFAULT_MAGIC
}

fn default_coinbase_outputs() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AdversaryKind {
    InvalidReaffirmer,
    ChunkTamperer,
    EclipseNeighbors,
}

impl Scenario {
    pub fn from_json(json: &str) -> Result<Scenario, String> {
        let mut scenario: Scenario =
            serde_json::from_str(json).map_err(|e| format!("scenario parse error: {e}"))?;
        scenario.resolve()?;
        Ok(scenario)
    }

    /// Fills inherited per-node pulse parameters and checks invariants.
    pub fn resolve(&mut self) -> Result<(), String> {
        self.pulse.validate()?;
        if self.chain_length == 0 {
            return Err("chain_length must be positive".into());
        }
        if self.latency.min == 0 || self.latency.min > self.latency.max {
            return Err("latency must satisfy 0 < min <= max".into());
        }
        if self.tx_workload.outputs_per_tx == 0 {
            return Err("outputs_per_tx must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tx_workload.spend_ratio) {
            return Err("spend_ratio must lie in [0, 1]".into());
        }
        if self.coinbase_outputs == 0 {
            return Err("coinbase_outputs must be positive".into());
        }
        if self.node_specs.is_empty() {
            return Err("a scenario needs at least one node".into());
        }
        let fill = |config: &mut NodeConfig| -> Result<(), String> {
            if config.pulse.delta_p == 0 {
                config.pulse = self.pulse;
            }
            config.validate()
        };
        let mut total_power: u64 = 0;
        for spec in &mut self.node_specs {
            fill(spec)?;
            if spec.role == Role::Joining {
                return Err("node_specs hold established nodes; joiners go in join_events".into());
            }
            total_power += spec.mining_power;
        }
        if total_power == 0 {
            return Err("total mining power must be positive".into());
        }
        for join in &mut self.join_events {
            fill(&mut join.config)?;
            if join.config.mining_power != 0 {
                return Err("joining nodes do not mine".into());
            }
        }
        if let Some(pinned) = &self.pinned_first_neighbors {
            if self.join_events.is_empty() {
                return Err("pinned neighbors need a join event".into());
            }
            if pinned.iter().any(|n| *n >= self.node_specs.len()) {
                return Err("pinned neighbor index out of range".into());
            }
        }
        Ok(())
    }

    /// Deterministic chain constants for this scenario; the genesis block
    /// depends only on bits, subsidy and coinbase_outputs.
    pub fn chain_params(&self) -> ChainParams {
        ChainParams {
            genesis: make_genesis(self.bits, self.subsidy, self.coinbase_outputs),
            bits: self.bits,
            subsidy: self.subsidy,
            magic: self.magic,
        }
    }
}

/// Converts a miner to an invalid reaffirmer, a serving node to a chunk
/// tamperer, or pins the first joiner's neighbors to the dishonest nodes.
pub fn inject_adversary(mut scenario: Scenario, kind: AdversaryKind) -> Result<Scenario, String> {
    match kind {
        AdversaryKind::InvalidReaffirmer => {
            let miner = scenario
                .node_specs
                .iter_mut()
                .find(|s| s.role == Role::CoinpruneMiner)
                .ok_or("no miner to convert")?;
            miner.role = Role::AdversaryMiner;
            miner.honest = false;
            miner.misbehavior = Some(Misbehavior::InvalidReaffirm);
        }
        AdversaryKind::ChunkTamperer => {
            let server = scenario
                .node_specs
                .iter_mut()
                .find(|s| s.role == Role::CoinpruneFull)
                .ok_or("no serving full node to convert")?;
            server.honest = false;
            server.misbehavior = Some(Misbehavior::TamperChunks);
        }
        AdversaryKind::EclipseNeighbors => {
            let dishonest: Vec<usize> = scenario
                .node_specs
                .iter()
                .enumerate()
                .filter(|(_, s)| !s.honest || s.misbehavior.is_some())
                .map(|(i, _)| i)
                .collect();
            if dishonest.is_empty() {
                return Err("eclipse injection needs existing dishonest nodes".into());
            }
            if scenario.join_events.is_empty() {
                return Err("eclipse injection needs a join event".into());
            }
            scenario.pinned_first_neighbors = Some(dishonest);
        }
    }
    Ok(scenario)
}

fn split_value(total: u64, parts: u32) -> Vec<u64> {
    let parts = parts.max(1) as u64;
    let each = total / parts;
    let mut values = vec![each; parts as usize];
    values[0] += total - each * parts;
    values
}

fn grind(mut header: BlockHeader, bits: u32) -> BlockHeader {
    loop {
        if meets_target(&block_id(&header), bits).unwrap_or(false) {
            return header;
        }
        header.nonce += 1;
    }
}

pub fn make_coinbase(
    height: u32,
    subsidy: u64,
    outputs: u32,
    coinbase_data: Vec<u8>,
) -> Transaction {
    let script = wallet_script();
    Transaction {
        inputs: vec![],
        outputs: split_value(subsidy, outputs)
            .into_iter()
            .map(|value| TxOut {
                value,
                script: script.clone(),
                creation_height: height,
                is_coinbase: true,
            })
            .collect(),
        coinbase_data: Some(coinbase_data),
    }
}

pub fn make_genesis(bits: u32, subsidy: u64, coinbase_outputs: u32) -> Block {
    let coinbase = make_coinbase(0, subsidy, coinbase_outputs, b"origin".to_vec());
    let header = grind(
        BlockHeader {
            version: 1,
            prev_id: Hash256::ZERO,
            merkle_root: merkle_root(&[coinbase.txid()]).unwrap(),
            timestamp: 0,
            bits,
            nonce: 0,
        },
        bits,
    );
    Block {
        header,
        transactions: vec![coinbase],
    }
}

/// Builds the scripted transactions for the next block from a node's UTXO
/// view: fee-free spends of the shared wallet's oldest outputs in canonical
/// order. Every miner derives the identical list from the same view.
pub fn build_workload_txs(utxo: &UtxoSet, next_height: u32, workload: &TxWorkload) -> Vec<Transaction> {
    let script = wallet_script();
    let inputs_per_tx = ((workload.outputs_per_tx as f64 * workload.spend_ratio).round() as u32)
        .clamp(1, workload.outputs_per_tx.max(1));
    let mut pool = utxo
        .iter()
        .filter(|(_, out)| out.script == script)
        .map(|(op, out)| (*op, out.value));
    let mut txs = Vec::new();
    for _ in 0..workload.txs_per_block {
        let mut spent = 0u64;
        let mut ins = Vec::new();
        for _ in 0..inputs_per_tx {
            let Some((op, value)) = pool.next() else {
                break;
            };
            spent += value;
            ins.push(TxIn {
                outpoint: op,
                witness: WALLET_WITNESS.to_vec(),
            });
        }
        if ins.is_empty() || spent == 0 {
            break;
        }
        let outputs = split_value(spent, workload.outputs_per_tx)
            .into_iter()
            .filter(|v| *v > 0)
            .map(|value| TxOut {
                value,
                script: script.clone(),
                creation_height: next_height,
                is_coinbase: false,
            })
            .collect();
        txs.push(Transaction {
            inputs: ins,
            outputs,
            coinbase_data: None,
        });
    }
    txs
}

/// Assembles and grinds a full block for the given parent.
pub fn assemble_block(
    prev_id: Hash256,
    height: u32,
    timestamp: u32,
    bits: u32,
    subsidy: u64,
    coinbase_outputs: u32,
    coinbase_data: Vec<u8>,
    txs: Vec<Transaction>,
) -> Block {
    let mut transactions = vec![make_coinbase(height, subsidy, coinbase_outputs, coinbase_data)];
    transactions.extend(txs);
    let txids: Vec<Hash256> = transactions.iter().map(Transaction::txid).collect();
    let header = grind(
        BlockHeader {
            version: 1,
            prev_id,
            merkle_root: merkle_root(&txids).unwrap(),
            timestamp,
            bits,
            nonce: 0,
        },
        bits,
    );
    Block {
        header,
        transactions,
    }
}
