//! `dpsynth fit`: run the full loop, stream the round log, and persist the
//! model, ledger, and optional checkpoints.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use dpsynth_core::dp::LedgerEntry;
use dpsynth_core::engine::{Checkpoint, Mode};
use dpsynth_core::{write_atomic, Error, Fitter, Result, RoundLog};

use crate::config::RunConfig;

const OUTPUT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct LedgerFile<'a> {
    format_version: u32,
    rho_total: f64,
    rho_spent: f64,
    rho_remaining: f64,
    entries: &'a [LedgerEntry],
}

#[derive(Serialize)]
struct FitSummary<'a> {
    format_version: u32,
    mode: Mode,
    n_rows: usize,
    columns: usize,
    workload_size: usize,
    rounds_completed: usize,
    rho_total: f64,
    rho_spent: f64,
    rho_remaining: f64,
    final_loss: Option<f64>,
    model: &'a Path,
    round_log: &'a Path,
    ledger: &'a Path,
    elapsed_seconds: f64,
    peak_rss_bytes: Option<u64>,
}

pub fn run(config_path: &Path, resume: bool, env_seed: Option<u64>) -> Result<()> {
    let started = Instant::now();
    let cfg = RunConfig::load(config_path)?;
    let engine_cfg = cfg.resolved_engine(env_seed);
    let data = cfg.load_data()?;
    let workload = cfg.workload.resolve(data.schema())?;

    let mut fitter = if resume {
        let cp_path = cfg.outputs.checkpoint.as_deref().ok_or_else(|| {
            Error::config("--resume needs outputs.checkpoint in the config")
        })?;
        let text = std::fs::read_to_string(cp_path).map_err(|e| {
            Error::config(format!("cannot read checkpoint {}: {e}", cp_path.display()))
        })?;
        let checkpoint: Checkpoint = serde_json::from_str(&text)?;
        Fitter::resume(
            &data,
            &workload,
            cfg.epsilon,
            cfg.delta,
            &engine_cfg,
            checkpoint,
        )?
    } else {
        Fitter::new(&data, &workload, cfg.epsilon, cfg.delta, &engine_cfg)?
    };

    let round_log_path = cfg.round_log_path();
    write_round_log(&round_log_path, fitter.logs())?;
    while fitter.step()? {
        write_round_log(&round_log_path, fitter.logs())?;
        if let Some(cp_path) = &cfg.outputs.checkpoint {
            let checkpoint = fitter.checkpoint();
            write_atomic(cp_path, &serde_json::to_vec(&checkpoint)?)?;
        }
    }

    let result = fitter.finish()?;
    result.model.save(&cfg.outputs.model)?;
    write_round_log(&round_log_path, &result.logs)?;

    let ledger_path = cfg.ledger_path();
    let ledger = LedgerFile {
        format_version: OUTPUT_FORMAT_VERSION,
        rho_total: result.accountant.rho_total(),
        rho_spent: result.accountant.rho_spent(),
        rho_remaining: result.accountant.remaining(),
        entries: result.accountant.ledger(),
    };
    write_atomic(&ledger_path, serde_json::to_string_pretty(&ledger)?.as_bytes())?;

    let summary = FitSummary {
        format_version: OUTPUT_FORMAT_VERSION,
        mode: engine_cfg.mode,
        n_rows: data.n_rows(),
        columns: data.schema().arity(),
        workload_size: workload.len(),
        rounds_completed: result.logs.iter().filter(|l| l.selected.is_some()).count(),
        rho_total: result.accountant.rho_total(),
        rho_spent: result.accountant.rho_spent(),
        rho_remaining: result.accountant.remaining(),
        final_loss: result.logs.last().map(|l| l.loss_after),
        model: &cfg.outputs.model,
        round_log: &round_log_path,
        ledger: &ledger_path,
        elapsed_seconds: started.elapsed().as_secs_f64(),
        peak_rss_bytes: peak_rss_bytes(),
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

/// Rewrites the whole JSON-lines file; entries are few and this keeps the
/// file well-formed at every instant.
fn write_round_log(path: &Path, logs: &[RoundLog]) -> Result<()> {
    let mut buf = Vec::new();
    for log in logs {
        serde_json::to_writer(&mut buf, log)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Peak resident set size, from the kernel's high-water mark. Linux only;
/// elsewhere the summary reports null.
fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}
