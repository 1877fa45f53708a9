//! Coinbase reaffirmation markers and pulse-based coordination: marker
//! grammar, windowing, tallying and threshold acceptance.
//!
//! Nothing in this module ever rejects a block. Marker parsing tolerates
//! arbitrary coinbase bytes so that legacy data and garbage reaffirmations
//! are simply ignored.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::chain::{Block, Hash256};
use crate::snapshot::SnapshotId;

pub const MARKER_PREFIX: &[u8] = b"CoinPrune/";
pub const MARKER_LEN: usize = 75; // 10 prefix + 64 hex + 1 separator

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PulseParams {
    /// Pulse interval in blocks.
    pub delta_p: u32,
    /// Reaffirmation window in blocks; strictly shorter than the interval.
    pub delta_r: u32,
    /// Minimum reaffirmation count for acceptance.
    pub k: u32,
}

impl PulseParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.delta_r == 0 || self.delta_r >= self.delta_p {
            return Err(format!(
                "reaffirmation window must satisfy 0 < delta_r < delta_p (got {} / {})",
                self.delta_r, self.delta_p
            ));
        }
        if self.k == 0 {
            return Err("acceptance threshold k must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReaffirmationTally {
    pub pulse_height: u32,
    pub counts: BTreeMap<SnapshotId, u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PulseOutcome {
    Accepted(SnapshotId),
    InvalidPulse,
    Ambiguous,
}

/// "CoinPrune/" + 64 lowercase hex characters + "/", 75 bytes.
pub fn encode_marker(id: &SnapshotId) -> Vec<u8> {
    let mut out = Vec::with_capacity(MARKER_LEN);
    out.extend_from_slice(MARKER_PREFIX);
    out.extend_from_slice(id.to_hex().as_bytes());
    out.push(b'/');
    debug_assert_eq!(out.len(), MARKER_LEN);
    out
}

/// Scans untrusted coinbase bytes for the first well-formed marker. The
/// grammar is strict: exact prefix, exactly 64 lowercase hex digits, a
/// trailing slash. Anything else yields None, never an error.
pub fn parse_marker(coinbase_data: &[u8]) -> Option<SnapshotId> {
    let mut start = 0;
    while start + MARKER_LEN <= coinbase_data.len() {
        let window = &coinbase_data[start..];
        if !window.starts_with(MARKER_PREFIX) {
            start += 1;
            continue;
        }
        let candidate = &window[MARKER_PREFIX.len()..MARKER_LEN];
        let (hex_part, sep) = candidate.split_at(64);
        if sep == b"/" && hex_part.iter().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            let digits = std::str::from_utf8(hex_part).ok()?;
            return Hash256::from_hex(digits).map(SnapshotId);
        }
        start += 1;
    }
    None
}

/// Largest positive multiple of delta_p at or below `height`.
pub fn pulse_height_for(height: u32, params: &PulseParams) -> Option<u32> {
    if height < params.delta_p {
        return None;
    }
    Some(height - height % params.delta_p)
}

/// True iff pulse_height < height <= pulse_height + delta_r. The pulse
/// block itself carries no reaffirmation of its own snapshot.
pub fn in_window(height: u32, pulse_height: u32, params: &PulseParams) -> bool {
    height > pulse_height && height - pulse_height <= params.delta_r
}

/// Tallies reaffirmation markers from best-chain blocks around a pulse.
/// At most one marker counts per block; out-of-window heights are ignored.
pub fn tally<'a, I>(blocks: I, pulse_height: u32, params: &PulseParams) -> ReaffirmationTally
where
    I: IntoIterator<Item = (u32, &'a Block)>,
{
    let mut counts: BTreeMap<SnapshotId, u32> = BTreeMap::new();
    for (height, block) in blocks {
        if !in_window(height, pulse_height, params) {
            continue;
        }
        let data = block.transactions[0].coinbase_data.as_deref().unwrap_or(&[]);
        if let Some(id) = parse_marker(data) {
            *counts.entry(id).or_insert(0) += 1;
        }
    }
    ReaffirmationTally {
        pulse_height,
        counts,
    }
}

/// Applies the acceptance rule to a closed window: a unique maximum count
/// of at least k wins; below-threshold windows invalidate the pulse; ties
/// at or above k are ambiguous and treated like an invalid pulse.
pub fn decide(tally: &ReaffirmationTally, params: &PulseParams) -> PulseOutcome {
    let max = tally.counts.values().copied().max().unwrap_or(0);
    if max < params.k {
        return PulseOutcome::InvalidPulse;
    }
    let mut winners = tally.counts.iter().filter(|(_, c)| **c == max);
    let (first, _) = winners.next().expect("max came from the map");
    if winners.next().is_some() {
        PulseOutcome::Ambiguous
    } else {
        PulseOutcome::Accepted(*first)
    }
}
