//! Deterministic policy evaluation.
//!
//! Runs full-horizon episodes with the deterministic policy (mean action,
//! no sampling noise), optionally injecting action noise per
//! [`crate::robust::inject_noise`]. The same routine backs both the
//! trainers' periodic clean evaluation and the robustness sweeps, so a
//! sweep cell at `lambda = 0` with training parameters reproduces the
//! clean evaluation bit-for-bit given the same seed.

use rand::Rng;

use crate::env::{ActionVec, Env, EnvParams};
use crate::nets::PolicyNet;
use crate::rng::{
    stream::{EVAL_RESET, INJECT_NOISE},
    stream_rng,
};
use crate::robust::{inject_noise, NoiseSpec};

/// Summary of a batch of evaluation rollouts.
#[derive(Debug, Clone)]
pub struct EvalStats {
    pub mean: f64,
    pub std: f64,
    pub rollouts: u32,
    /// Episodes that hit a non-finite state; they score their partial
    /// return rather than being discarded.
    pub failures: u32,
    pub per_rollout: Vec<f64>,
}

impl EvalStats {
    fn from_returns(returns: Vec<f64>, failures: u32) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            rollouts: returns.len() as u32,
            failures,
            per_rollout: returns,
        }
    }
}

/// Undiscounted return of one full-horizon episode.
///
/// `rollout_idx` selects the reset seed (from `seed`) and the per-step
/// noise streams (from `noise.rng_seed`), so different algorithms facing
/// the same `(noise, seed, rollout_idx)` see identical perturbations.
pub fn episode_return(
    policy: &PolicyNet,
    env: &Env,
    params: &EnvParams,
    noise: &NoiseSpec,
    seed: u64,
    rollout_idx: u64,
) -> (f64, bool) {
    let reset_seed = crate::rng::derive_seed(seed, &[EVAL_RESET, rollout_idx]);
    let mut state = env.reset(reset_seed, params);
    let mut total = 0.0;
    for t in 0..params.horizon {
        let obs = env.observe(&state);
        let mean = policy.mean_action(&obs);
        let mut draw = vec![0.0; mean.len()];
        let mut rng = stream_rng(noise.rng_seed, &[INJECT_NOISE, rollout_idx, t as u64]);
        for d in draw.iter_mut() {
            *d = rng.gen_range(-1.0..=1.0);
        }
        let action = ActionVec::new(inject_noise(&mean, noise, &draw));
        match env.step(&state, &action, params) {
            Ok((next, reward, _)) => {
                total += reward;
                state = next;
            }
            Err(_) => return (total, true),
        }
    }
    (total, false)
}

/// Mean/std of the undiscounted episode reward over `rollouts` episodes.
pub fn evaluate(
    policy: &PolicyNet,
    env: &Env,
    params: &EnvParams,
    noise: &NoiseSpec,
    rollouts: u32,
    seed: u64,
) -> EvalStats {
    assert!(rollouts > 0, "rollout count must be positive");
    let mut returns = Vec::with_capacity(rollouts as usize);
    let mut failures = 0;
    for r in 0..rollouts {
        let (ret, failed) = episode_return(policy, env, params, noise, seed, r as u64);
        if failed {
            failures += 1;
        }
        returns.push(ret);
    }
    EvalStats::from_returns(returns, failures)
}
