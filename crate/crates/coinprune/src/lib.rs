//! A pruning-capable toy blockchain: consensus primitives, snapshot
//! construction and verification, reaffirmation voting, pruned storage,
//! a wire codec, node behaviour and a deterministic network simulator.

pub mod chain;
pub mod codec;
pub mod node;
pub mod reaffirm;
pub mod scenario;
pub mod sim;
pub mod snapshot;
pub mod store;

pub use chain::{Block, BlockHeader, Hash256, OutPoint, Transaction, TxOut, UtxoSet};
pub use reaffirm::{PulseOutcome, PulseParams};
pub use snapshot::{Snapshot, SnapshotId};
