//! Robustness-evaluation harness.
//!
//! Measures how trained policies degrade under controlled perturbations:
//!
//! * action-noise injection (`a' = (1-lambda) clip(a) + lambda n`),
//! * contact-parameter sweeps (`k_e x k_d` heatmaps, `mu` curves),
//! * the rho trade-off study (train at several neighborhood radii, then
//!   noise-sweep each), and
//! * training-overhead accounting from learning curves.
//!
//! Noise draws use a dedicated stream per (policy slot, rollout, step), so
//! every algorithm in a comparison faces identical noise realizations.
//! Cells are independent and evaluated in parallel; tables are assembled
//! in (algorithm, policy, cell) order, so output is deterministic for a
//! fixed seed regardless of worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Algo;
use crate::curve::{fmt_f64, CurveRow};
use crate::env::{Env, EnvParams};
use crate::eval::{self, EvalStats};
use crate::nets::PolicyNet;
use crate::rng::{
    derive_seed,
    stream::{EVAL_RESET, INJECT_NOISE},
};
use crate::shac::{self, ShacConfig, ShacMode, TrainArtifacts, TrainError};

/// Action-noise setting: `a' = (1 - lambda) * clip(a) + lambda * n` with
/// `n ~ U(-1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Convex-combination weight in `[0, 1]`; 0 is no noise, 1 replaces
    /// the action entirely.
    pub lambda_mix: f64,
    pub rng_seed: u64,
}

impl NoiseSpec {
    /// No-noise spec (`lambda = 0`); the rng seed is irrelevant then but
    /// kept for stream bookkeeping.
    pub fn clean(rng_seed: u64) -> Self {
        Self {
            lambda_mix: 0.0,
            rng_seed,
        }
    }
}

/// Clip the raw action to `[-1, 1]`, then mix with the uniform draw.
/// The convex combination keeps the result in `[-1, 1]`; a final clamp
/// absorbs float rounding at the boundary.
pub fn inject_noise(a_raw: &[f64], spec: &NoiseSpec, draw: &[f64]) -> Vec<f64> {
    debug_assert!((0.0..=1.0).contains(&spec.lambda_mix));
    debug_assert_eq!(a_raw.len(), draw.len());
    let lambda = spec.lambda_mix;
    a_raw
        .iter()
        .zip(draw.iter())
        .map(|(a, n)| {
            let clipped = a.clamp(-1.0, 1.0);
            ((1.0 - lambda) * clipped + lambda * n).clamp(-1.0, 1.0)
        })
        .collect()
}

/// A perturbable parameter axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Ke,
    Kd,
    Mu,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Ke => "k_e",
            SweepAxis::Kd => "k_d",
            SweepAxis::Mu => "mu",
        }
    }

    pub fn apply(&self, params: &mut EnvParams, value: f64) {
        match self {
            SweepAxis::Ke => params.k_e = value,
            SweepAxis::Kd => params.k_d = value,
            SweepAxis::Mu => params.mu = value,
        }
    }
}

/// One- or two-axis grid of parameter overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub axes: Vec<(SweepAxis, Vec<f64>)>,
    pub rollouts_per_cell: u32,
    pub policies_per_algorithm: usize,
}

impl SweepGrid {
    /// Validate value lists (non-empty, strictly increasing, 1 or 2 axes).
    pub fn validate(&self) -> Result<(), String> {
        if self.axes.is_empty() || self.axes.len() > 2 {
            return Err("grid needs one or two axes".into());
        }
        for (axis, values) in &self.axes {
            if values.is_empty() {
                return Err(format!("{} value list is empty", axis.name()));
            }
            if values.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("{} values must be strictly increasing", axis.name()));
            }
        }
        if self.rollouts_per_cell == 0 {
            return Err("rollouts_per_cell must be positive".into());
        }
        Ok(())
    }

    /// Cell parameter sets in row-major order (first axis outer).
    pub fn cells(&self, base: &EnvParams) -> Vec<EnvParams> {
        let mut out = Vec::new();
        match self.axes.as_slice() {
            [(axis, values)] => {
                for &v in values {
                    let mut p = *base;
                    axis.apply(&mut p, v);
                    out.push(p);
                }
            }
            [(a0, v0), (a1, v1)] => {
                for &x in v0 {
                    for &y in v1 {
                        let mut p = *base;
                        a0.apply(&mut p, x);
                        a1.apply(&mut p, y);
                        out.push(p);
                    }
                }
            }
            _ => unreachable!("validated to 1..=2 axes"),
        }
        out
    }
}

/// A trained policy ready for evaluation, tagged with its origin.
#[derive(Debug, Clone)]
pub struct PolicyHandle {
    pub algo: Algo,
    pub seed: u64,
    pub net: PolicyNet,
}

/// The perturbation a measurement was taken under.
#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    Noise(NoiseSpec),
    Params(EnvParams),
}

/// One robustness measurement.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub algo: Algo,
    pub policy_seed: u64,
    pub perturbation: Perturbation,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub rollouts: u32,
    pub failures: u32,
}

impl EvalRecord {
    fn from_stats(
        handle: &PolicyHandle,
        perturbation: Perturbation,
        stats: &EvalStats,
    ) -> Self {
        Self {
            algo: handle.algo,
            policy_seed: handle.seed,
            perturbation,
            mean_reward: stats.mean,
            std_reward: stats.std,
            rollouts: stats.rollouts,
            failures: stats.failures,
        }
    }
}

/// Full-horizon evaluation of one policy under one perturbation setting.
pub fn eval_policy(
    handle: &PolicyHandle,
    env: &Env,
    params: &EnvParams,
    noise: &NoiseSpec,
    rollouts: u32,
    seed: u64,
) -> EvalRecord {
    let stats = eval::evaluate(&handle.net, env, params, noise, rollouts, seed);
    let perturbation = if noise.lambda_mix != 0.0 {
        Perturbation::Noise(*noise)
    } else {
        Perturbation::Params(*params)
    };
    EvalRecord::from_stats(handle, perturbation, &stats)
}

/// Sort into (algorithm, seed) order and assign per-algorithm policy
/// slots; the slot drives the paired noise/reset streams.
fn slotted(handles: &[PolicyHandle]) -> Vec<(usize, &PolicyHandle)> {
    let mut sorted: Vec<&PolicyHandle> = handles.iter().collect();
    sorted.sort_by_key(|h| (h.algo, h.seed));
    let mut out = Vec::with_capacity(sorted.len());
    let mut prev: Option<Algo> = None;
    let mut slot = 0;
    for h in sorted {
        if prev != Some(h.algo) {
            slot = 0;
            prev = Some(h.algo);
        }
        out.push((slot, h));
        slot += 1;
    }
    out
}

/// Noise sweep: the cross product (policy x lambda), `rollouts` episodes
/// per cell. Policies at the same slot face identical noise realizations
/// and initial states across algorithms, and the same initial states
/// across lambda values.
pub fn noise_sweep(
    handles: &[PolicyHandle],
    env: &Env,
    params: &EnvParams,
    lambdas: &[f64],
    rollouts: u32,
    seed: u64,
) -> Vec<EvalRecord> {
    assert!(
        lambdas.iter().all(|l| (0.0..=1.0).contains(l)),
        "lambda grid must lie in [0, 1]"
    );
    let cells: Vec<(usize, &PolicyHandle, f64)> = slotted(handles)
        .into_iter()
        .flat_map(|(slot, h)| lambdas.iter().map(move |&l| (slot, h, l)))
        .collect();
    cells
        .into_par_iter()
        .map(|(slot, handle, lambda)| {
            let noise = NoiseSpec {
                lambda_mix: lambda,
                rng_seed: derive_seed(seed, &[INJECT_NOISE, slot as u64]),
            };
            let eval_seed = derive_seed(seed, &[EVAL_RESET, slot as u64]);
            let stats = eval::evaluate(&handle.net, env, params, &noise, rollouts, eval_seed);
            EvalRecord::from_stats(handle, Perturbation::Noise(noise), &stats)
        })
        .collect()
}

/// Heatmap-ready matrix for one algorithm of a two-axis sweep: cell means
/// averaged over that algorithm's policies, `cells[x * ny + y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapData {
    pub algo: Algo,
    pub x_axis: SweepAxis,
    pub x_values: Vec<f64>,
    pub y_axis: SweepAxis,
    pub y_values: Vec<f64>,
    pub cells: Vec<f64>,
}

/// Parameter sweep without action noise: evaluates every grid cell with
/// overridden parameters. Returns the record table and, for two-axis
/// grids, one heatmap matrix per algorithm.
pub fn param_sweep(
    handles: &[PolicyHandle],
    env: &Env,
    train_params: &EnvParams,
    grid: &SweepGrid,
    seed: u64,
) -> (Vec<EvalRecord>, Vec<HeatmapData>) {
    grid.validate().expect("invalid sweep grid");
    let cell_params = grid.cells(train_params);
    let jobs: Vec<(usize, &PolicyHandle, EnvParams)> = slotted(handles)
        .into_iter()
        .flat_map(|(slot, h)| cell_params.iter().map(move |&p| (slot, h, p)))
        .collect();
    let records: Vec<EvalRecord> = jobs
        .into_par_iter()
        .map(|(slot, handle, p)| {
            let eval_seed = derive_seed(seed, &[EVAL_RESET, slot as u64]);
            let noise = NoiseSpec::clean(derive_seed(seed, &[INJECT_NOISE, slot as u64]));
            let stats = eval::evaluate(
                &handle.net,
                env,
                &p,
                &noise,
                grid.rollouts_per_cell,
                eval_seed,
            );
            EvalRecord::from_stats(handle, Perturbation::Params(p), &stats)
        })
        .collect();

    let mut heatmaps = Vec::new();
    if let [(x_axis, x_values), (y_axis, y_values)] = grid.axes.as_slice() {
        let n_cells = x_values.len() * y_values.len();
        let mut algos: Vec<Algo> = handles.iter().map(|h| h.algo).collect();
        algos.sort();
        algos.dedup();
        for algo in algos {
            let mut sums = vec![0.0; n_cells];
            let mut counts = vec![0u32; n_cells];
            for (i, rec) in records.iter().filter(|r| r.algo == algo).enumerate() {
                sums[i % n_cells] += rec.mean_reward;
                counts[i % n_cells] += 1;
            }
            let cells: Vec<f64> = sums
                .iter()
                .zip(counts.iter())
                .map(|(s, c)| s / (*c).max(1) as f64)
                .collect();
            heatmaps.push(HeatmapData {
                algo,
                x_axis: *x_axis,
                x_values: x_values.clone(),
                y_axis: *y_axis,
                y_values: y_values.clone(),
                cells,
            });
        }
    }
    (records, heatmaps)
}

/// One trained run of the rho study.
#[derive(Debug)]
pub struct RhoRun {
    pub rho: f64,
    pub seed: u64,
    pub artifacts: TrainArtifacts,
}

/// Rho trade-off study output: per-rho training runs plus a noise sweep
/// per rho, all under an identical sample budget.
#[derive(Debug)]
pub struct RhoStudy {
    pub runs: Vec<RhoRun>,
    /// (rho, record) rows in (rho, algorithm order) as swept.
    pub noise_records: Vec<(f64, EvalRecord)>,
    pub env_steps_budget: u64,
}

/// Train one sharpness-aware run per (rho, seed) under the shared config,
/// then noise-sweep each rho's policies with paired streams.
#[allow(clippy::too_many_arguments)]
pub fn rho_study(
    env: &Env,
    params: &EnvParams,
    base_cfg: &ShacConfig,
    rhos: &[f64],
    seeds: &[u64],
    lambdas: &[f64],
    rollouts: u32,
    sweep_seed: u64,
) -> Result<RhoStudy, TrainError> {
    let jobs: Vec<(f64, u64)> = rhos
        .iter()
        .flat_map(|&r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    let trained: Result<Vec<RhoRun>, TrainError> = jobs
        .into_par_iter()
        .map(|(rho, seed)| {
            let cfg = ShacConfig {
                mode: ShacMode::Asam,
                asam: Some(crate::optim::AsamConfig {
                    rho,
                    ..base_cfg.asam.clone().unwrap_or_default()
                }),
                ..base_cfg.clone()
            };
            // Same run seed across rho values: init and rollout noise are
            // paired, so differences are attributable to rho alone (and the
            // rho -> 0 run coincides with plain SHAC at the same seed).
            let artifacts = shac::train(env, params, &cfg, seed)?;
            Ok(RhoRun {
                rho,
                seed,
                artifacts,
            })
        })
        .collect();
    let runs = trained?;
    let env_steps_budget = (base_cfg.episodes * base_cfg.lanes * base_cfg.horizon) as u64;

    let mut noise_records = Vec::new();
    for &rho in rhos {
        let handles: Vec<PolicyHandle> = runs
            .iter()
            .filter(|r| r.rho == rho)
            .map(|r| PolicyHandle {
                algo: Algo::ShacAsam,
                seed: r.seed,
                net: r.artifacts.policy.clone(),
            })
            .collect();
        for rec in noise_sweep(&handles, env, params, lambdas, rollouts, sweep_seed) {
            noise_records.push((rho, rec));
        }
    }
    Ok(RhoStudy {
        runs,
        noise_records,
        env_steps_budget,
    })
}

pub const NOISE_SWEEP_HEADER: &str =
    "algo,policy_seed,lambda_mix,mean_reward,std_reward,rollouts,failures";
pub const PARAM_SWEEP_HEADER: &str =
    "algo,policy_seed,k_e,k_d,mu,mean_reward,std_reward,rollouts,failures";
pub const RHO_SWEEP_HEADER: &str =
    "rho,algo,policy_seed,lambda_mix,mean_reward,std_reward,rollouts,failures,env_steps_budget";

pub fn noise_records_to_csv(records: &[EvalRecord], config_digest: &str) -> String {
    let mut out = format!("# config_digest={config_digest}\n{NOISE_SWEEP_HEADER}\n");
    for r in records {
        let lambda = match &r.perturbation {
            Perturbation::Noise(n) => n.lambda_mix,
            Perturbation::Params(_) => 0.0,
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.algo,
            r.policy_seed,
            fmt_f64(lambda),
            fmt_f64(r.mean_reward),
            fmt_f64(r.std_reward),
            r.rollouts,
            r.failures
        ));
    }
    out
}

pub fn param_records_to_csv(records: &[EvalRecord], config_digest: &str) -> String {
    let mut out = format!("# config_digest={config_digest}\n{PARAM_SWEEP_HEADER}\n");
    for r in records {
        let p = match &r.perturbation {
            Perturbation::Params(p) => *p,
            Perturbation::Noise(_) => panic!("param table from noise record"),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.algo,
            r.policy_seed,
            fmt_f64(p.k_e),
            fmt_f64(p.k_d),
            fmt_f64(p.mu),
            fmt_f64(r.mean_reward),
            fmt_f64(r.std_reward),
            r.rollouts,
            r.failures
        ));
    }
    out
}

pub fn rho_records_to_csv(
    records: &[(f64, EvalRecord)],
    env_steps_budget: u64,
    config_digest: &str,
) -> String {
    let mut out = format!("# config_digest={config_digest}\n{RHO_SWEEP_HEADER}\n");
    for (rho, r) in records {
        let lambda = match &r.perturbation {
            Perturbation::Noise(n) => n.lambda_mix,
            Perturbation::Params(_) => 0.0,
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            fmt_f64(*rho),
            r.algo,
            r.policy_seed,
            fmt_f64(lambda),
            fmt_f64(r.mean_reward),
            fmt_f64(r.std_reward),
            r.rollouts,
            r.failures,
            env_steps_budget
        ));
    }
    out
}

fn lerp_color(t: f64) -> (u8, u8, u8) {
    let lo = (68.0, 1.0, 84.0);
    let hi = (253.0, 231.0, 37.0);
    let c = |a: f64, b: f64| (a + t * (b - a)).round() as u8;
    (c(lo.0, hi.0), c(lo.1, hi.1), c(lo.2, hi.2))
}

/// Render a two-axis sweep as an SVG heatmap: one rectangle per cell,
/// color mapped linearly from the table minimum to maximum, axis labels
/// and a numeric legend as text. Byte-deterministic for fixed input.
pub fn render_heatmap_svg(data: &HeatmapData, env_name: &str, config_digest: &str) -> String {
    let (nx, ny) = (data.x_values.len(), data.y_values.len());
    assert_eq!(data.cells.len(), nx * ny, "cell count mismatch");
    let (cell_w, cell_h) = (72.0, 44.0);
    let (left, top, right, bottom) = (86.0, 48.0, 120.0, 64.0);
    let width = left + nx as f64 * cell_w + right;
    let height = top + ny as f64 * cell_h + bottom;
    let min = data.cells.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.cells.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"monospace\" font-size=\"11\">\n"
    ));
    s.push_str(&format!("<!-- config_digest={config_digest} -->\n"));
    s.push_str(&format!(
        "<text x=\"{left}\" y=\"20\" font-size=\"14\">{} mean episode reward on {}</text>\n",
        data.algo, env_name
    ));
    for xi in 0..nx {
        for yi in 0..ny {
            let v = data.cells[xi * ny + yi];
            let t = if span > 0.0 { (v - min) / span } else { 0.5 };
            let (r, g, b) = lerp_color(t);
            let x = left + xi as f64 * cell_w;
            let y = top + yi as f64 * cell_h;
            s.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell_w}\" height=\"{cell_h}\" fill=\"rgb({r},{g},{b})\" stroke=\"white\"/>\n"
            ));
            let text_color = if t > 0.6 { "black" } else { "white" };
            s.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{}\" text-anchor=\"middle\">{:.1}</text>\n",
                x + cell_w / 2.0,
                y + cell_h / 2.0 + 4.0,
                text_color,
                v
            ));
        }
    }
    for (xi, xv) in data.x_values.iter().enumerate() {
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            left + (xi as f64 + 0.5) * cell_w,
            top + ny as f64 * cell_h + 18.0,
            fmt_f64(*xv)
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{} (N/m)</text>\n",
        left + nx as f64 * cell_w / 2.0,
        top + ny as f64 * cell_h + 40.0,
        data.x_axis.name()
    ));
    for (yi, yv) in data.y_values.iter().enumerate() {
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            left - 8.0,
            top + (yi as f64 + 0.5) * cell_h + 4.0,
            fmt_f64(*yv)
        ));
    }
    s.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" transform=\"rotate(-90 16 {:.1})\" text-anchor=\"middle\">{}</text>\n",
        top + ny as f64 * cell_h / 2.0,
        top + ny as f64 * cell_h / 2.0,
        data.y_axis.name()
    ));
    // Legend: vertical gradient bar with numeric endpoints.
    let legend_x = left + nx as f64 * cell_w + 24.0;
    let segs = 12;
    let legend_h = ny as f64 * cell_h;
    for i in 0..segs {
        let t = 1.0 - (i as f64 + 0.5) / segs as f64;
        let (r, g, b) = lerp_color(t);
        s.push_str(&format!(
            "<rect x=\"{legend_x}\" y=\"{:.2}\" width=\"18\" height=\"{:.2}\" fill=\"rgb({r},{g},{b})\"/>\n",
            top + i as f64 * legend_h / segs as f64,
            legend_h / segs as f64 + 0.5
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\">{:.2}</text>\n",
        legend_x + 24.0,
        top + 10.0,
        max
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\">{:.2}</text>\n",
        legend_x + 24.0,
        top + legend_h,
        min
    ));
    s.push_str("</svg>\n");
    s
}

/// Learning curve of one finished run, as read back from its CSV.
#[derive(Debug, Clone)]
pub struct RunCurve {
    pub algo: Algo,
    pub seed: u64,
    pub rows: Vec<CurveRow>,
}

/// Per-algorithm overhead summary.
#[derive(Debug, Clone)]
pub struct AlgoOverhead {
    pub algo: Algo,
    pub runs: usize,
    pub updates_per_run: f64,
    pub update_wall_ms_mean: f64,
    pub update_wall_ms_std: f64,
    pub total_wall_s_mean: f64,
    pub total_wall_s_std: f64,
    pub grad_evals_per_update: f64,
    /// Ratios against the plain-SHAC baseline when it is present.
    pub wall_ratio_vs_shac: Option<f64>,
    pub grad_eval_ratio_vs_shac: Option<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregate per-update wall time and gradient-evaluation counts per
/// algorithm; ratios are taken against plain SHAC.
pub fn overhead_report(curves: &[RunCurve]) -> Vec<AlgoOverhead> {
    let mut algos: Vec<Algo> = curves.iter().map(|c| c.algo).collect();
    algos.sort();
    algos.dedup();
    let mut rows: Vec<AlgoOverhead> = algos
        .iter()
        .map(|&algo| {
            let runs: Vec<&RunCurve> = curves.iter().filter(|c| c.algo == algo).collect();
            let update_ms: Vec<f64> = runs
                .iter()
                .flat_map(|r| r.rows.iter().map(|row| row.update_wall_ms))
                .collect();
            let totals: Vec<f64> = runs
                .iter()
                .map(|r| r.rows.iter().map(|row| row.update_wall_ms).sum::<f64>() / 1e3)
                .collect();
            let grad_evals: f64 = runs
                .iter()
                .flat_map(|r| r.rows.iter().map(|row| row.grad_evals as f64))
                .sum::<f64>()
                / update_ms.len() as f64;
            let (um, us) = mean_std(&update_ms);
            let (tm, ts) = mean_std(&totals);
            AlgoOverhead {
                algo,
                runs: runs.len(),
                updates_per_run: update_ms.len() as f64 / runs.len() as f64,
                update_wall_ms_mean: um,
                update_wall_ms_std: us,
                total_wall_s_mean: tm,
                total_wall_s_std: ts,
                grad_evals_per_update: grad_evals,
                wall_ratio_vs_shac: None,
                grad_eval_ratio_vs_shac: None,
            }
        })
        .collect();
    let baseline = rows
        .iter()
        .find(|r| r.algo == Algo::Shac)
        .map(|r| (r.update_wall_ms_mean, r.grad_evals_per_update));
    if let Some((base_ms, base_ge)) = baseline {
        for row in rows.iter_mut() {
            row.wall_ratio_vs_shac = Some(row.update_wall_ms_mean / base_ms);
            row.grad_eval_ratio_vs_shac = Some(row.grad_evals_per_update / base_ge);
        }
    }
    rows
}

pub const OVERHEAD_HEADER: &str = "algo,runs,updates_per_run,update_wall_ms_mean,update_wall_ms_std,total_wall_s_mean,total_wall_s_std,grad_evals_per_update,wall_ratio_vs_shac,grad_eval_ratio_vs_shac";

pub fn overhead_to_csv(rows: &[AlgoOverhead], config_digest: &str) -> String {
    let mut out = format!("# config_digest={config_digest}\n{OVERHEAD_HEADER}\n");
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.algo,
            r.runs,
            fmt_f64(r.updates_per_run),
            fmt_f64(r.update_wall_ms_mean),
            fmt_f64(r.update_wall_ms_std),
            fmt_f64(r.total_wall_s_mean),
            fmt_f64(r.total_wall_s_std),
            fmt_f64(r.grad_evals_per_update),
            opt(r.wall_ratio_vs_shac),
            opt(r.grad_eval_ratio_vs_shac),
        ));
    }
    out
}

pub fn overhead_to_text(rows: &[AlgoOverhead]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>5} {:>12} {:>22} {:>20} {:>10} {:>12} {:>12}\n",
        "algo",
        "runs",
        "updates/run",
        "update wall ms (m±s)",
        "total wall s (m±s)",
        "grad/upd",
        "wall ratio",
        "grad ratio"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<10} {:>5} {:>12.1} {:>14.3} ± {:<6.3} {:>12.3} ± {:<6.3} {:>9.1} {:>12} {:>12}\n",
            r.algo.name(),
            r.runs,
            r.updates_per_run,
            r.update_wall_ms_mean,
            r.update_wall_ms_std,
            r.total_wall_s_mean,
            r.total_wall_s_std,
            r.grad_evals_per_update,
            r.wall_ratio_vs_shac
                .map(|v| format!("{v:.2}"))
                .unwrap_or_else(|| "-".into()),
            r.grad_eval_ratio_vs_shac
                .map(|v| format!("{v:.2}"))
                .unwrap_or_else(|| "-".into()),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Env;

    fn quick_policy(algo: Algo, seed: u64, env: &Env) -> PolicyHandle {
        PolicyHandle {
            algo,
            seed,
            net: PolicyNet::new(env.obs_dim(), env.action_dim(), seed),
        }
    }

    #[test]
    fn lambda_zero_is_identity_on_clipped_action() {
        let spec = NoiseSpec::clean(0);
        let out = inject_noise(&[0.4, 1.7, -3.0], &spec, &[0.9, -0.9, 0.1]);
        assert_eq!(out, vec![0.4, 1.0, -1.0]);
    }

    #[test]
    fn lambda_one_replaces_action_with_draw() {
        let spec = NoiseSpec {
            lambda_mix: 1.0,
            rng_seed: 0,
        };
        let out = inject_noise(&[0.4, -0.6], &spec, &[0.25, -0.125]);
        assert_eq!(out, vec![0.25, -0.125]);
    }

    #[test]
    fn half_mix_hand_example() {
        // a = 1.5 clips to 1; (1 - 0.5)*1 + 0.5*(-1) = 0.
        let spec = NoiseSpec {
            lambda_mix: 0.5,
            rng_seed: 0,
        };
        let out = inject_noise(&[1.5], &spec, &[-1.0]);
        assert_eq!(out, vec![0.0]);
    }

    #[test]
    fn expected_magnitude_is_nondecreasing_in_lambda_for_zero_policy() {
        // Shared draws across lambda values make the empirical means
        // exactly monotone.
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(17, &[]);
        let draws: Vec<f64> = (0..10_000).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let mut last = -1.0;
        for i in 0..=10 {
            let lambda = i as f64 / 10.0;
            let spec = NoiseSpec {
                lambda_mix: lambda,
                rng_seed: 0,
            };
            let mean_abs = draws
                .iter()
                .map(|&d| inject_noise(&[0.0], &spec, &[d])[0].abs())
                .sum::<f64>()
                / draws.len() as f64;
            assert!(mean_abs >= last);
            last = mean_abs;
        }
    }

    #[test]
    fn grid_validation_rejects_bad_lists() {
        let mut grid = SweepGrid {
            axes: vec![(SweepAxis::Mu, vec![0.1, 0.2, 0.2])],
            rollouts_per_cell: 1,
            policies_per_algorithm: 1,
        };
        assert!(grid.validate().is_err());
        grid.axes[0].1 = vec![0.1, 0.2, 0.3];
        assert!(grid.validate().is_ok());
        grid.axes.clear();
        assert!(grid.validate().is_err());
    }

    #[test]
    fn single_cell_grid_at_training_params_equals_clean_eval() {
        let env = Env::Bouncer1d;
        let params = env.default_params();
        let handle = quick_policy(Algo::Shac, 0, &env);
        let grid = SweepGrid {
            axes: vec![(SweepAxis::Ke, vec![params.k_e])],
            rollouts_per_cell: 5,
            policies_per_algorithm: 1,
        };
        let (records, heatmaps) = param_sweep(&[handle.clone()], &env, &params, &grid, 42);
        assert_eq!(records.len(), 1);
        assert!(heatmaps.is_empty());
        let noise = NoiseSpec::clean(derive_seed(42, &[INJECT_NOISE, 0]));
        let eval_seed = derive_seed(42, &[EVAL_RESET, 0]);
        let direct = eval::evaluate(&handle.net, &env, &params, &noise, 5, eval_seed);
        assert_eq!(records[0].mean_reward.to_bits(), direct.mean.to_bits());
    }

    #[test]
    fn sweep_tables_have_expected_shape_and_are_deterministic() {
        let env = Env::Slider1d;
        let params = env.default_params();
        let handles: Vec<PolicyHandle> = vec![
            quick_policy(Algo::Shac, 0, &env),
            quick_policy(Algo::Shac, 1, &env),
            quick_policy(Algo::ShacAsam, 0, &env),
        ];
        let lambdas = [0.0, 0.25, 0.5];
        let a = noise_sweep(&handles, &env, &params, &lambdas, 3, 7);
        let b = noise_sweep(&handles, &env, &params, &lambdas, 3, 7);
        assert_eq!(a.len(), handles.len() * lambdas.len());
        for (ra, rb) in a.iter().zip(b.iter()) {
            assert_eq!(ra.mean_reward.to_bits(), rb.mean_reward.to_bits());
            assert_eq!(ra.algo, rb.algo);
        }
        // Paired noise: same slot, same lambda -> same initial states, so
        // differences come only from the policies.
        let csv = noise_records_to_csv(&a, "d");
        assert_eq!(csv.lines().count(), 2 + a.len());
    }

    #[test]
    fn param_sweep_heatmap_has_one_matrix_per_algorithm() {
        let env = Env::Bouncer1d;
        let params = env.default_params();
        let handles = vec![
            quick_policy(Algo::Shac, 0, &env),
            quick_policy(Algo::Ppo, 0, &env),
        ];
        let grid = SweepGrid {
            axes: vec![
                (SweepAxis::Ke, vec![200.0, 400.0]),
                (SweepAxis::Kd, vec![1.0, 10.0, 30.0]),
            ],
            rollouts_per_cell: 2,
            policies_per_algorithm: 1,
        };
        let (records, heatmaps) = param_sweep(&handles, &env, &params, &grid, 3);
        assert_eq!(records.len(), 2 * 6);
        assert_eq!(heatmaps.len(), 2);
        assert_eq!(heatmaps[0].cells.len(), 6);
        let csv = param_records_to_csv(&records, "d");
        assert!(csv.starts_with("# config_digest=d\n"));
        assert_eq!(csv.lines().count(), 2 + records.len());
    }

    #[test]
    fn heatmap_svg_is_deterministic_and_structured() {
        let data = HeatmapData {
            algo: Algo::Shac,
            x_axis: SweepAxis::Ke,
            x_values: vec![100.0, 200.0],
            y_axis: SweepAxis::Kd,
            y_values: vec![1.0, 3.0, 10.0],
            cells: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        let a = render_heatmap_svg(&data, "bouncer1d", "beef");
        let b = render_heatmap_svg(&data, "bouncer1d", "beef");
        assert_eq!(a, b);
        assert_eq!(a.matches("<rect").count(), 6 + 12); // cells + legend
        assert!(a.contains("config_digest=beef"));
        assert!(a.contains("k_e"));
        assert!(a.contains("6.00")); // legend max
    }

    #[test]
    fn overhead_report_computes_exact_grad_ratio() {
        let mk_row = |ms: f64, ge: u64| CurveRow {
            episode: 1,
            env_steps: 10,
            eval_reward_mean: 0.0,
            eval_reward_std: 0.0,
            policy_loss: 0.0,
            critic_loss: 0.0,
            grad_evals: ge,
            update_wall_ms: ms,
        };
        let curves = vec![
            RunCurve {
                algo: Algo::Shac,
                seed: 0,
                rows: vec![mk_row(1.0, 1), mk_row(1.2, 1)],
            },
            RunCurve {
                algo: Algo::ShacAsam,
                seed: 0,
                rows: vec![mk_row(2.0, 2), mk_row(2.4, 2)],
            },
        ];
        let report = overhead_report(&curves);
        let asam = report.iter().find(|r| r.algo == Algo::ShacAsam).unwrap();
        assert_eq!(asam.grad_eval_ratio_vs_shac, Some(2.0));
        assert!((asam.wall_ratio_vs_shac.unwrap() - 2.0).abs() < 1e-12);
        let shac = report.iter().find(|r| r.algo == Algo::Shac).unwrap();
        assert_eq!(shac.grad_eval_ratio_vs_shac, Some(1.0));
        // Single-algorithm reports still render.
        let text = overhead_to_text(&report);
        assert!(text.contains("shac-asam"));
        let csv = overhead_to_csv(&report, "z");
        assert_eq!(csv.lines().count(), 2 + report.len());
    }

    mod inject_noise_props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // Convexity bound holds for any action (including |a| > 1) and
            // any draw in [-1, 1].
            #[test]
            fn output_always_within_unit_interval(
                a in -5.0f64..5.0,
                lambda in 0.0f64..=1.0,
                n in -1.0f64..=1.0,
            ) {
                let spec = NoiseSpec { lambda_mix: lambda, rng_seed: 0 };
                let out = inject_noise(&[a], &spec, &[n]);
                prop_assert!((-1.0..=1.0).contains(&out[0]));
            }
        }
    }
}
