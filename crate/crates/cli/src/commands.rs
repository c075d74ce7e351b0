//! Command implementations: train, sweep, report.
//!
//! This is the only place in the workspace that touches the filesystem.
//! Every file written here embeds the config digest; [`verify_outputs`]
//! re-reads written files and recomputes the digest as a tamper /
//! reproducibility check.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use rl_lab_core::checkpoint::{compatible_with_env, Algo, Checkpoint};
use rl_lab_core::curve::{curve_from_csv, curve_to_csv, CurveParseError};
use rl_lab_core::env::Env;
use rl_lab_core::ppo;
use rl_lab_core::robust::{
    self, noise_records_to_csv, overhead_report, overhead_to_csv, overhead_to_text,
    param_records_to_csv, render_heatmap_svg, rho_records_to_csv, PolicyHandle, RunCurve,
    SweepAxis, SweepGrid,
};
use rl_lab_core::shac::{self, ShacMode, TrainArtifacts, TrainError};

use crate::config::{ConfigError, RunConfig};

/// Failures mapped to documented exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Exit 2: invalid configuration or usage.
    Config(String),
    /// Exit 3: training aborted on non-finite dynamics.
    TrainAborted(String),
    /// Exit 4: checkpoint does not match the configured environment.
    CheckpointMismatch(String),
    /// Exit 5: learning curve lacks instrumentation columns.
    MissingInstrumentation(String),
    /// Exit 1: anything else (I/O, internal verification).
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::TrainAborted(_) => 3,
            CliError::CheckpointMismatch(_) => 4,
            CliError::MissingInstrumentation(_) => 5,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::TrainAborted(m) => write!(f, "training aborted: {m}"),
            CliError::CheckpointMismatch(m) => write!(f, "checkpoint mismatch: {m}"),
            CliError::MissingInstrumentation(m) => write!(f, "missing instrumentation: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("io error: {e}"))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::TrainAborted(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Noise,
    Params,
    Rho,
}

impl std::str::FromStr for SweepKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noise" => Ok(SweepKind::Noise),
            "params" => Ok(SweepKind::Params),
            "rho" => Ok(SweepKind::Rho),
            other => Err(format!("unknown sweep kind {other:?}")),
        }
    }
}

fn write_file(path: &Path, contents: &str, written: &mut Vec<PathBuf>) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    written.push(path.to_path_buf());
    Ok(())
}

/// Extract the embedded config digest from any artifact format.
fn embedded_digest(contents: &str) -> Option<String> {
    for line in contents.lines().take(8) {
        if let Some(rest) = line.strip_prefix("# config_digest=") {
            return Some(rest.trim().to_string());
        }
        if let Some(rest) = line.strip_prefix("config_digest=") {
            return Some(rest.trim().to_string());
        }
        if let Some(rest) = line.strip_prefix("<!-- config_digest=") {
            return Some(rest.trim_end_matches("-->").trim().to_string());
        }
    }
    None
}

/// Re-read every written file and check its embedded digest against the
/// recomputed one.
fn verify_outputs(paths: &[PathBuf], expected: &str) -> CliResult<()> {
    for path in paths {
        let contents = fs::read_to_string(path)?;
        match embedded_digest(&contents) {
            Some(d) if d == expected => {}
            Some(d) => {
                return Err(CliError::Other(format!(
                    "digest mismatch in {}: embedded {d}, expected {expected}",
                    path.display()
                )))
            }
            None => {
                return Err(CliError::Other(format!(
                    "no embedded digest in {}",
                    path.display()
                )))
            }
        }
    }
    Ok(())
}

fn run_one_seed(cfg: &RunConfig, algo: Algo, seed: u64) -> Result<TrainArtifacts, TrainError> {
    match algo {
        Algo::Shac | Algo::ShacAsam => {
            shac::train(&cfg.environment, &cfg.env_params, &cfg.shac, seed)
        }
        Algo::Ppo => ppo::train(&cfg.environment, &cfg.env_params, &cfg.ppo, seed),
    }
}

fn write_run_artifacts(
    dir: &Path,
    cfg: &RunConfig,
    algo: Algo,
    seed: u64,
    art: &TrainArtifacts,
    digest: &str,
    written: &mut Vec<PathBuf>,
) -> CliResult<()> {
    let ck = Checkpoint::from_artifacts(art, cfg.environment, algo, seed, digest);
    write_file(&dir.join("checkpoint.txt"), &ck.to_text(), written)?;
    write_file(
        &dir.join("learning_curve.csv"),
        &curve_to_csv(&art.curve, digest),
        written,
    )?;
    Ok(())
}

/// `train --config PATH [--seeds ...] [--out DIR]`: one run per seed,
/// artifacts under `out/<algo>/<seed>/`.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let algo = cfg
        .algorithm
        .ok_or_else(|| CliError::Config("algorithm: required for train".into()))?;
    let digest = cfg.digest();
    let results: Vec<(u64, Result<TrainArtifacts, TrainError>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| (seed, run_one_seed(cfg, algo, seed)))
        .collect();
    let mut written = Vec::new();
    for (seed, result) in results {
        let art = result?;
        let dir = cfg.output_dir.join(algo.name()).join(seed.to_string());
        write_run_artifacts(&dir, cfg, algo, seed, &art, &digest, &mut written)?;
        let last = art.curve.last().expect("at least one episode");
        println!(
            "{} seed {seed}: {} episodes, {} env steps, final eval {:.2} -> {}",
            algo.name(),
            last.episode,
            art.total_env_steps,
            last.eval_reward_mean,
            dir.display()
        );
    }
    verify_outputs(&written, &digest)?;
    Ok(())
}

fn load_checkpoints(pattern: &str, env: &Env) -> CliResult<Vec<PolicyHandle>> {
    let paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| CliError::Config(format!("checkpoints: bad glob pattern: {e}")))?
        .filter_map(Result::ok)
        .collect();
    if paths.is_empty() {
        return Err(CliError::Config(format!(
            "checkpoints: no files match {pattern:?}"
        )));
    }
    let mut handles = Vec::with_capacity(paths.len());
    for path in paths {
        let text = fs::read_to_string(&path)?;
        let ck = Checkpoint::parse(&text)
            .map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
        if !compatible_with_env(&ck, env) {
            return Err(CliError::CheckpointMismatch(format!(
                "{}: checkpoint for {} (obs {}, act {}) does not match environment {}",
                path.display(),
                ck.env.name(),
                ck.obs_dim,
                ck.act_dim,
                env.name()
            )));
        }
        handles.push(PolicyHandle {
            algo: ck.algo,
            seed: ck.seed,
            net: ck.policy_net(),
        });
    }
    Ok(handles)
}

fn param_grid_for(cfg: &RunConfig) -> SweepGrid {
    let axes = match cfg.environment {
        Env::Bouncer1d => vec![
            (SweepAxis::Ke, cfg.sweep.ke_grid.clone()),
            (SweepAxis::Kd, cfg.sweep.kd_grid.clone()),
        ],
        Env::Slider1d => vec![(SweepAxis::Mu, cfg.sweep.mu_grid.clone())],
    };
    SweepGrid {
        axes,
        rollouts_per_cell: cfg.sweep.rollouts,
        policies_per_algorithm: 3,
    }
}

/// `sweep --kind noise|params|rho --config PATH [--checkpoints GLOB]`.
pub fn cmd_sweep(cfg: &RunConfig, kind: SweepKind, checkpoints: Option<&str>) -> CliResult<()> {
    let digest = cfg.digest();
    let out = &cfg.output_dir;
    let mut written = Vec::new();
    match kind {
        SweepKind::Noise => {
            let pattern = checkpoints
                .ok_or_else(|| CliError::Config("checkpoints: required for noise sweep".into()))?;
            let handles = load_checkpoints(pattern, &cfg.environment)?;
            let records = robust::noise_sweep(
                &handles,
                &cfg.environment,
                &cfg.env_params,
                &cfg.sweep.lambda_grid,
                cfg.sweep.rollouts,
                cfg.sweep.eval_seed,
            );
            write_file(
                &out.join("noise_sweep.csv"),
                &noise_records_to_csv(&records, &digest),
                &mut written,
            )?;
            println!(
                "noise sweep: {} policies x {} lambda values -> {}",
                handles.len(),
                cfg.sweep.lambda_grid.len(),
                out.join("noise_sweep.csv").display()
            );
        }
        SweepKind::Params => {
            let pattern = checkpoints
                .ok_or_else(|| CliError::Config("checkpoints: required for params sweep".into()))?;
            let handles = load_checkpoints(pattern, &cfg.environment)?;
            let grid = param_grid_for(cfg);
            grid.validate().map_err(CliError::Config)?;
            let (records, heatmaps) = robust::param_sweep(
                &handles,
                &cfg.environment,
                &cfg.env_params,
                &grid,
                cfg.sweep.eval_seed,
            );
            write_file(
                &out.join("param_sweep.csv"),
                &param_records_to_csv(&records, &digest),
                &mut written,
            )?;
            for hm in &heatmaps {
                let svg = render_heatmap_svg(hm, cfg.environment.name(), &digest);
                write_file(
                    &out.join(format!("heatmap_{}.svg", hm.algo.name())),
                    &svg,
                    &mut written,
                )?;
            }
            println!(
                "params sweep: {} rows, {} heatmaps -> {}",
                records.len(),
                heatmaps.len(),
                out.display()
            );
        }
        SweepKind::Rho => {
            if !cfg.sweep.rho_grid.iter().any(|r| (r - 0.75).abs() < 1e-12) {
                return Err(CliError::Config(
                    "sweep.rho_grid: must include the reference point 0.75".into(),
                ));
            }
            let mut base = cfg.shac.clone();
            base.mode = ShacMode::Asam;
            if base.asam.is_none() {
                base.asam = Some(Default::default());
            }
            let study = robust::rho_study(
                &cfg.environment,
                &cfg.env_params,
                &base,
                &cfg.sweep.rho_grid,
                &cfg.seeds,
                &cfg.sweep.lambda_grid,
                cfg.sweep.rollouts,
                cfg.sweep.eval_seed,
            )?;
            for run in &study.runs {
                let dir = out
                    .join(format!("rho_{}", rl_lab_core::curve::fmt_f64(run.rho)))
                    .join(Algo::ShacAsam.name())
                    .join(run.seed.to_string());
                write_run_artifacts(
                    &dir,
                    cfg,
                    Algo::ShacAsam,
                    run.seed,
                    &run.artifacts,
                    &digest,
                    &mut written,
                )?;
            }
            write_file(
                &out.join("rho_noise_sweep.csv"),
                &rho_records_to_csv(&study.noise_records, study.env_steps_budget, &digest),
                &mut written,
            )?;
            println!(
                "rho study: {} runs, budget {} env steps each -> {}",
                study.runs.len(),
                study.env_steps_budget,
                out.display()
            );
        }
    }
    verify_outputs(&written, &digest)?;
    Ok(())
}

fn find_curves(dir: &Path, found: &mut Vec<PathBuf>) -> CliResult<()> {
    if dir.is_file() {
        if dir.file_name().is_some_and(|n| n == "learning_curve.csv") {
            found.push(dir.to_path_buf());
        }
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .collect();
    entries.sort();
    for entry in entries {
        if entry.is_dir() {
            find_curves(&entry, found)?;
        } else if entry.file_name().is_some_and(|n| n == "learning_curve.csv") {
            found.push(entry);
        }
    }
    Ok(())
}

fn identify_run(path: &Path) -> Option<(Algo, u64)> {
    // Prefer the sibling checkpoint header; fall back to path components
    // (.../<algo>/<seed>/learning_curve.csv).
    if let Some(dir) = path.parent() {
        if let Ok(text) = fs::read_to_string(dir.join("checkpoint.txt")) {
            if let Ok(ck) = Checkpoint::parse(&text) {
                return Some((ck.algo, ck.seed));
            }
        }
        let seed = dir
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.parse().ok());
        let algo = dir
            .parent()
            .and_then(|p| p.file_name())
            .and_then(|n| n.to_str())
            .and_then(Algo::from_name);
        if let (Some(algo), Some(seed)) = (algo, seed) {
            return Some((algo, seed));
        }
    }
    None
}

/// `report RUN_DIR... [--out DIR]`: per-algorithm wall-time and
/// gradient-evaluation table from learning curves.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> CliResult<()> {
    let mut curve_paths = Vec::new();
    for dir in run_dirs {
        if !dir.exists() {
            return Err(CliError::Config(format!(
                "run dir {} does not exist",
                dir.display()
            )));
        }
        find_curves(dir, &mut curve_paths)?;
    }
    if curve_paths.is_empty() {
        return Err(CliError::MissingInstrumentation(
            "no learning_curve.csv files found under the given directories".into(),
        ));
    }
    let mut curves = Vec::new();
    let mut input_digests = Vec::new();
    for path in &curve_paths {
        let text = fs::read_to_string(path)?;
        let (digest, rows) = curve_from_csv(&text).map_err(|e| match e {
            CurveParseError::MissingColumn(c) => CliError::MissingInstrumentation(format!(
                "{}: missing instrumentation column {c}",
                path.display()
            )),
            other => CliError::Other(format!("{}: {other}", path.display())),
        })?;
        let (algo, seed) = identify_run(path).ok_or_else(|| {
            CliError::Config(format!(
                "{}: cannot identify algorithm/seed (no checkpoint and unrecognized path layout)",
                path.display()
            ))
        })?;
        input_digests.push(digest);
        curves.push(RunCurve { algo, seed, rows });
    }
    // The report digest is derived from the inputs, so regeneration from
    // the same runs is byte-identical.
    input_digests.sort();
    let digest = {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for d in &input_digests {
            h.update(d.as_bytes());
            h.update(b"\n");
        }
        let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        hex[..16].to_string()
    };

    let report = overhead_report(&curves);
    let text = overhead_to_text(&report);
    print!("{text}");
    let mut written = Vec::new();
    write_file(
        &out.join("overhead_report.csv"),
        &overhead_to_csv(&report, &digest),
        &mut written,
    )?;
    write_file(
        &out.join("overhead_report.txt"),
        &format!("# config_digest={digest}\n{text}"),
        &mut written,
    )?;
    verify_outputs(&written, &digest)?;
    Ok(())
}
