//! Command-line front end: run simulation scenarios and operate on
//! snapshot files standalone.
//!
//! Exit status: 0 on success, 1 on verification failure, 2 on usage or
//! input errors. COINPRUNE_LOG={error,info,debug} controls stderr chatter.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coinprune::chain::{Hash256, OutPoint, Reader, TxOut, UtxoSet};
use coinprune::reaffirm::parse_marker;
use coinprune::scenario::Scenario;
use coinprune::snapshot::{
    create_snapshot, snapshot_from_bytes, snapshot_id, snapshot_to_bytes, verify_and_apply,
    SnapshotId, DEFAULT_CHUNK_LIMIT,
};

#[derive(Parser)]
#[command(name = "coinprune", about = "Snapshot-based block pruning testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write metrics.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario file's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a snapshot file from a binary UTXO entry stream.
    MakeSnapshot {
        #[arg(long)]
        utxo: PathBuf,
        #[arg(long)]
        height: u32,
        #[arg(long)]
        block_id: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CHUNK_LIMIT)]
        chunk_limit: usize,
    },
    /// Recompute a snapshot file's identifier and compare.
    VerifySnapshot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        expect_id: Option<String>,
    },
    /// Parse a hex-encoded coinbase blob for a reaffirmation marker.
    InspectMarker {
        #[arg(long)]
        hex: String,
    },
}

fn log_level() -> u8 {
    match std::env::var("COINPRUNE_LOG").as_deref() {
        Ok("debug") => 2,
        Ok("info") => 1,
        _ => 0,
    }
}

macro_rules! info {
    ($($arg:tt)*) => {
        if log_level() >= 1 {
            eprintln!($($arg)*);
        }
    };
}

const USAGE_ERROR: u8 = 2;
const VERIFY_FAILURE: u8 = 1;

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("coinprune: {msg}");
    ExitCode::from(code)
}

fn cmd_run(scenario_path: PathBuf, seed: Option<u64>, out: PathBuf) -> ExitCode {
    let text = match fs::read_to_string(&scenario_path) {
        Ok(t) => t,
        Err(e) => return fail(USAGE_ERROR, format!("{}: {e}", scenario_path.display())),
    };
    let mut scenario = match Scenario::from_json(&text) {
        Ok(s) => s,
        Err(e) => return fail(USAGE_ERROR, e),
    };
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    info!("running scenario (seed {})", scenario.seed);
    let metrics = match coinprune::sim::run(scenario) {
        Ok(m) => m,
        Err(e) => return fail(USAGE_ERROR, e),
    };
    if let Err(e) = fs::create_dir_all(&out) {
        return fail(USAGE_ERROR, format!("{}: {e}", out.display()));
    }
    let ndjson = out.join("metrics.ndjson");
    let csv = out.join("summary.csv");
    if let Err(e) = fs::write(&ndjson, metrics.to_ndjson()) {
        return fail(USAGE_ERROR, format!("{}: {e}", ndjson.display()));
    }
    if let Err(e) = fs::write(&csv, metrics.to_summary_csv()) {
        return fail(USAGE_ERROR, format!("{}: {e}", csv.display()));
    }
    info!(
        "tip {} at height {}; wrote {} and {}",
        metrics.tip_id,
        metrics.tip_height,
        ndjson.display(),
        csv.display()
    );
    ExitCode::SUCCESS
}

fn read_utxo_entries(bytes: &[u8]) -> Result<UtxoSet, String> {
    let mut utxo = UtxoSet::new();
    let mut r = Reader::new(bytes);
    while r.remaining() > 0 {
        let op = OutPoint::read(&mut r).map_err(|e| e.to_string())?;
        let out = TxOut::read(&mut r).map_err(|e| e.to_string())?;
        if utxo.insert(op, out).is_some() {
            return Err(format!("duplicate outpoint {op}"));
        }
    }
    Ok(utxo)
}

fn cmd_make_snapshot(
    utxo_path: PathBuf,
    height: u32,
    block_id: String,
    out: PathBuf,
    chunk_limit: usize,
) -> ExitCode {
    let bytes = match fs::read(&utxo_path) {
        Ok(b) => b,
        Err(e) => return fail(USAGE_ERROR, format!("{}: {e}", utxo_path.display())),
    };
    let utxo = match read_utxo_entries(&bytes) {
        Ok(u) => u,
        Err(e) => return fail(USAGE_ERROR, format!("malformed UTXO stream: {e}")),
    };
    let Some(block_id) = Hash256::from_hex(&block_id) else {
        return fail(USAGE_ERROR, "block id must be 64 hex characters");
    };
    let snapshot = match create_snapshot(&utxo, height, block_id, chunk_limit) {
        Ok(s) => s,
        Err(e) => return fail(USAGE_ERROR, e),
    };
    if let Err(e) = fs::write(&out, snapshot_to_bytes(&snapshot)) {
        return fail(USAGE_ERROR, format!("{}: {e}", out.display()));
    }
    println!("{}", snapshot_id(&snapshot));
    ExitCode::SUCCESS
}

fn cmd_verify_snapshot(input: PathBuf, expect_id: Option<String>) -> ExitCode {
    let bytes = match fs::read(&input) {
        Ok(b) => b,
        Err(e) => return fail(USAGE_ERROR, format!("{}: {e}", input.display())),
    };
    let snapshot = match snapshot_from_bytes(&bytes) {
        Ok(s) => s,
        Err(e) => return fail(USAGE_ERROR, format!("malformed snapshot file: {e}")),
    };
    let computed = snapshot_id(&snapshot);
    if let Err(e) = verify_and_apply(&snapshot, computed) {
        return fail(VERIFY_FAILURE, format!("snapshot does not verify: {e}"));
    }
    if let Some(expected) = expect_id {
        let Some(expected) = Hash256::from_hex(&expected) else {
            return fail(USAGE_ERROR, "expected id must be 64 hex characters");
        };
        if SnapshotId(expected) != computed {
            eprintln!("coinprune: id mismatch: computed {computed}");
            return ExitCode::from(VERIFY_FAILURE);
        }
    }
    println!("{computed}");
    ExitCode::SUCCESS
}

fn cmd_inspect_marker(hex_blob: String) -> ExitCode {
    let Ok(bytes) = hex::decode(hex_blob.trim()) else {
        return fail(USAGE_ERROR, "marker blob must be hex");
    };
    match parse_marker(&bytes) {
        Some(id) => println!("{id}"),
        None => println!("none"),
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            scenario,
            seed,
            out,
        } => cmd_run(scenario, seed, out),
        Command::MakeSnapshot {
            utxo,
            height,
            block_id,
            out,
            chunk_limit,
        } => cmd_make_snapshot(utxo, height, block_id, out, chunk_limit),
        Command::VerifySnapshot { input, expect_id } => cmd_verify_snapshot(input, expect_id),
        Command::InspectMarker { hex } => cmd_inspect_marker(hex),
    }
}
