//! Short-horizon actor-critic training through the differentiable
//! simulator.
//!
//! Each learning episode samples `N` parallel trajectories of length
//! `h << H`, continuing from the final states of the previous episode. The
//! policy loss
//!
//! ```text
//! L = -(1/(N h)) sum_i [ sum_{t} gamma^t R(s_t, a_t) + gamma^h V0(s_{t0+h}) ]
//! ```
//!
//! is backpropagated through the recorded step tapes (chaining simulator
//! VJPs with the policy's reverse pass), the critic is fit to TD(lambda)
//! targets built from the same trajectories, and a Polyak-mixed target
//! critic provides the bootstrap values. In sharpness-aware mode the
//! policy update runs the two-step procedure from [`crate::optim`]: the
//! second gradient is evaluated at the perturbed parameters on the *same*
//! recorded batch (states, actions, and noise fixed), so one update costs
//! exactly two forward-backward passes and no extra simulation.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::CurveRow;
use crate::env::{lane_reset_seed, ActionVec, Env, EnvParams, StepTape};
use crate::eval;
use crate::nets::{CriticNet, PolicyNet, PolicyTape};
use crate::optim::{adam_step, asam_perturb, asam_update, clip_grad_norm, AdamState, AsamConfig};
use crate::params::ParamVector;
use crate::rng::{
    stream::{ACTION_NOISE, CRITIC_INIT, POLICY_INIT, TRAIN_EVAL},
    stream_rng,
};
use crate::robust::NoiseSpec;
use rand_distr::{Distribution, StandardNormal};

/// Abort threshold: more lane resets than this within one episode means
/// the dynamics are exploding for the current configuration.
pub const MAX_LANE_RESETS_PER_EPISODE: u32 = 10;

/// Global gradient-norm clip applied identically in plain and
/// sharpness-aware mode, before both the perturbation and the update.
pub const GRAD_CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShacMode {
    Plain,
    Asam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShacConfig {
    /// Parallel trajectories per episode (N).
    pub lanes: usize,
    /// Short-horizon length (h), must satisfy 1 <= h <= H.
    pub horizon: usize,
    /// Discount in (0, 1].
    pub gamma: f64,
    /// TD(lambda) mixing weight in [0, 1].
    pub td_lambda: f64,
    /// Target-network mixing: target <- alpha*target + (1-alpha)*critic.
    pub target_alpha: f64,
    pub actor_lr: f64,
    /// Actor learning rate decays linearly to this value over the run.
    pub actor_lr_end: f64,
    pub critic_lr: f64,
    /// Full-batch Adam epochs per critic fit.
    pub critic_epochs: usize,
    /// Learning episodes (M).
    pub episodes: usize,
    /// Deterministic evaluation cadence (episodes).
    pub eval_every: usize,
    pub eval_rollouts: u32,
    pub mode: ShacMode,
    /// Required when `mode == Asam`.
    pub asam: Option<AsamConfig>,
}

impl Default for ShacConfig {
    fn default() -> Self {
        Self {
            lanes: 32,
            horizon: 16,
            gamma: 0.99,
            td_lambda: 0.95,
            target_alpha: 0.95,
            actor_lr: 2e-3,
            actor_lr_end: 1e-4,
            critic_lr: 2e-3,
            critic_epochs: 16,
            episodes: 500,
            eval_every: 10,
            eval_rollouts: 10,
            mode: ShacMode::Plain,
            asam: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(
        "training aborted: {resets} lane resets in episode {episode} (non-finite dynamics)"
    )]
    NonFiniteAbort { episode: u64, resets: u32 },
}

/// One recorded environment transition inside a short-horizon window.
#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Vec<f64>,
    /// Standard-normal draws used by the reparameterized sample.
    pub noise: Vec<f64>,
    /// Pre-clip action.
    pub action_raw: Vec<f64>,
    /// Clipped action actually executed.
    pub action: Vec<f64>,
    pub reward: f64,
    /// The trajectory chain breaks after this transition (episode end or
    /// lane reset); no gradient or bootstrap flows across it.
    pub done: bool,
    pub policy_tape: PolicyTape,
    pub step_tape: StepTape,
}

/// One lane's window plus its terminal bootstrap observation.
#[derive(Debug, Clone)]
pub struct LaneWindow {
    pub transitions: Vec<Transition>,
    pub bootstrap_obs: Vec<f64>,
}

impl LaneWindow {
    /// Index of the last transition of the first trajectory segment.
    fn first_segment_end(&self) -> usize {
        self.transitions
            .iter()
            .position(|t| t.done)
            .unwrap_or(self.transitions.len() - 1)
    }
}

/// N parallel short-horizon trajectories with the tapes needed for BPTT.
#[derive(Debug, Clone)]
pub struct HorizonBatch {
    pub lanes: Vec<LaneWindow>,
}

impl HorizonBatch {
    pub fn env_steps(&self) -> u64 {
        self.lanes.iter().map(|l| l.transitions.len() as u64).sum()
    }
}

/// Persistent lane states; trajectories continue across episodes until an
/// episode ends, then the lane resets with a fresh derived seed.
#[derive(Debug, Clone)]
pub struct Lanes {
    pub states: Vec<crate::env::EnvState>,
    reset_counts: Vec<u64>,
    run_seed: u64,
}

impl Lanes {
    pub fn init(env: &Env, params: &EnvParams, n: usize, run_seed: u64) -> Self {
        let mut states = Vec::with_capacity(n);
        let mut reset_counts = Vec::with_capacity(n);
        for lane in 0..n {
            states.push(env.reset(lane_reset_seed(run_seed, lane, 0), params));
            reset_counts.push(1);
        }
        Self {
            states,
            reset_counts,
            run_seed,
        }
    }

    pub fn reset_lane(&mut self, env: &Env, params: &EnvParams, lane: usize) {
        let count = self.reset_counts[lane];
        self.states[lane] = env.reset(lane_reset_seed(self.run_seed, lane, count), params);
        self.reset_counts[lane] += 1;
    }
}

/// Pre-drawn standard-normal noise for one rollout window, indexed
/// `[lane][step][dim]`.
#[derive(Debug, Clone)]
pub struct NoiseBlock {
    pub lanes: usize,
    pub steps: usize,
    pub act_dim: usize,
    values: Vec<f64>,
}

impl NoiseBlock {
    pub fn slice(&self, lane: usize, step: usize) -> &[f64] {
        let base = (lane * self.steps + step) * self.act_dim;
        &self.values[base..base + self.act_dim]
    }
}

/// Draw the window's action noise from the per-(episode, lane) streams.
pub fn draw_noise(run_seed: u64, episode: u64, lanes: usize, steps: usize, act_dim: usize) -> NoiseBlock {
    let mut values = Vec::with_capacity(lanes * steps * act_dim);
    for lane in 0..lanes {
        let mut rng = stream_rng(run_seed, &[ACTION_NOISE, episode, lane as u64]);
        for _ in 0..steps * act_dim {
            values.push(StandardNormal.sample(&mut rng));
        }
    }
    NoiseBlock {
        lanes,
        steps,
        act_dim,
        values,
    }
}

/// Sample `h` steps per lane with reparameterized actions clipped to
/// `[-1, 1]`. A non-finite step resets the offending lane (logged) and the
/// slot is refilled from the reset state; more than
/// [`MAX_LANE_RESETS_PER_EPISODE`] resets aborts the episode.
pub fn rollout(
    env: &Env,
    params: &EnvParams,
    policy: &PolicyNet,
    lanes: &mut Lanes,
    noise: &NoiseBlock,
    cfg: &ShacConfig,
    episode: u64,
) -> Result<HorizonBatch, TrainError> {
    assert_eq!(noise.lanes, cfg.lanes);
    assert_eq!(noise.steps, cfg.horizon);
    let mut windows = Vec::with_capacity(cfg.lanes);
    let mut resets: u32 = 0;
    for lane in 0..cfg.lanes {
        let mut transitions: Vec<Transition> = Vec::with_capacity(cfg.horizon);
        for step in 0..cfg.horizon {
            loop {
                let state = lanes.states[lane].clone();
                let obs = env.observe(&state);
                let tape = policy.forward(&obs);
                let noise_slice = noise.slice(lane, step);
                let action_raw = policy.sample_raw(&tape, noise_slice);
                let action: Vec<f64> = action_raw.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
                match env.step(&state, &ActionVec::new(action.clone()), params) {
                    Ok((next, reward, step_tape)) => {
                        let done = next.t >= params.horizon;
                        transitions.push(Transition {
                            obs,
                            noise: noise_slice.to_vec(),
                            action_raw,
                            action,
                            reward,
                            done,
                            policy_tape: tape,
                            step_tape,
                        });
                        if done {
                            lanes.reset_lane(env, params, lane);
                        } else {
                            lanes.states[lane] = next;
                        }
                        break;
                    }
                    Err(err) => {
                        resets += 1;
                        log::warn!("lane {lane} reset after non-finite step: {err}");
                        if resets > MAX_LANE_RESETS_PER_EPISODE {
                            return Err(TrainError::NonFiniteAbort { episode, resets });
                        }
                        // The chain is severed; the previous transition (if
                        // any) must not bootstrap into the discarded state.
                        if let Some(prev) = transitions.last_mut() {
                            prev.done = true;
                        }
                        lanes.reset_lane(env, params, lane);
                    }
                }
            }
        }
        let bootstrap_obs = env.observe(&lanes.states[lane]);
        windows.push(LaneWindow {
            transitions,
            bootstrap_obs,
        });
    }
    Ok(HorizonBatch { lanes: windows })
}

/// Discounted window return plus bootstrap, negated and averaged per
/// Eq.-style `1/(N h)` normalization. Lanes that terminate inside the
/// window truncate their sum and drop the bootstrap term.
pub fn policy_loss(batch: &HorizonBatch, critic_target: &CriticNet, cfg: &ShacConfig) -> f64 {
    let scale = 1.0 / (batch.lanes.len() * cfg.horizon) as f64;
    let mut total = 0.0;
    for lane in &batch.lanes {
        let end = lane.first_segment_end();
        let terminated = lane.transitions[end].done;
        let mut discount = 1.0;
        for tr in &lane.transitions[..=end] {
            total += discount * tr.reward;
            discount *= cfg.gamma;
        }
        if !terminated {
            total += cfg.gamma.powi(cfg.horizon as i32) * critic_target.value(&lane.bootstrap_obs);
        }
    }
    -scale * total
}

fn clip_mask(action_raw: &[f64]) -> Vec<f64> {
    action_raw
        .iter()
        .map(|a| if a.abs() <= 1.0 { 1.0 } else { 0.0 })
        .collect()
}

/// Shared BPTT backward pass. With `recompute` the policy forward passes
/// are re-evaluated at the current `policy` parameters on the recorded
/// observations and noise (simulator tapes stay fixed); otherwise the
/// tapes recorded during the rollout are reused.
fn bptt_backward(
    batch: &HorizonBatch,
    env: &Env,
    policy: &PolicyNet,
    critic_target: &CriticNet,
    cfg: &ShacConfig,
    recompute: bool,
) -> (f64, ParamVector) {
    let scale = 1.0 / (batch.lanes.len() * cfg.horizon) as f64;
    let mut grad = policy.params.zeros_like();
    let loss = policy_loss(batch, critic_target, cfg);
    for lane in &batch.lanes {
        let end = lane.first_segment_end();
        let terminated = lane.transitions[end].done;
        let mut w_state = vec![0.0; 2 * env.state_dim()];
        if !terminated {
            let (_, ctape) = critic_target.forward(&lane.bootstrap_obs);
            let d_value = -scale * cfg.gamma.powi(cfg.horizon as i32);
            let d_obs = critic_target.backward(&ctape, d_value, None);
            w_state = env.observe_vjp(&d_obs);
        }
        for j in (0..=end).rev() {
            let tr = &lane.transitions[j];
            let w_reward = -scale * cfg.gamma.powi(j as i32);
            let (g_state, g_action) = env.vjp(&tr.step_tape, &w_state, w_reward);
            let fresh_tape;
            let fresh_raw;
            let (tape, action_raw): (&PolicyTape, &[f64]) = if recompute {
                fresh_tape = policy.forward(&tr.obs);
                fresh_raw = policy.sample_raw(&fresh_tape, &tr.noise);
                (&fresh_tape, &fresh_raw)
            } else {
                (&tr.policy_tape, &tr.action_raw)
            };
            let mask = clip_mask(action_raw);
            let d_mean: Vec<f64> = g_action.iter().zip(mask.iter()).map(|(g, m)| g * m).collect();
            let d_sigma: Vec<f64> = d_mean
                .iter()
                .zip(tr.noise.iter())
                .map(|(d, n)| d * n)
                .collect();
            let d_obs = policy.backward(tape, &d_mean, &d_sigma, Some(&mut grad));
            let obs_ct = env.observe_vjp(&d_obs);
            w_state = g_state;
            for (w, o) in w_state.iter_mut().zip(obs_ct.iter()) {
                *w += o;
            }
        }
    }
    (loss, grad)
}

/// Loss and BPTT policy gradient using the tapes recorded by the rollout
/// (the policy must be the one that generated the batch).
pub fn policy_loss_and_grad(
    batch: &HorizonBatch,
    env: &Env,
    policy: &PolicyNet,
    critic_target: &CriticNet,
    cfg: &ShacConfig,
) -> (f64, ParamVector) {
    bptt_backward(batch, env, policy, critic_target, cfg, false)
}

/// Loss gradient of the same recorded batch evaluated at `policy`
/// (typically the perturbed parameters): policy forwards are recomputed,
/// simulator tapes and noise stay fixed.
pub fn policy_grad_at(
    batch: &HorizonBatch,
    env: &Env,
    policy: &PolicyNet,
    critic_target: &CriticNet,
    cfg: &ShacConfig,
) -> (f64, ParamVector) {
    bptt_backward(batch, env, policy, critic_target, cfg, true)
}

/// Finite-horizon TD(lambda) targets for one trajectory segment.
///
/// `next_values[j]` is the critic value of the state after transition `j`
/// (0 for a terminal boundary, the bootstrap value for the trailing
/// segment). Equivalent to the mixture
/// `(1-l) sum_k l^{k-1} G^(k) + l^{n-j-1} G^(n-j)` of k-step returns.
pub fn td_lambda_segment(
    rewards: &[f64],
    next_values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    assert_eq!(n, next_values.len());
    let mut targets = vec![0.0; n];
    let mut next_target = 0.0;
    for j in (0..n).rev() {
        targets[j] = if j == n - 1 {
            rewards[j] + gamma * next_values[j]
        } else {
            rewards[j] + gamma * ((1.0 - lambda) * next_values[j] + lambda * next_target)
        };
        next_target = targets[j];
    }
    targets
}

/// TD(lambda) target values for every state in the batch, bootstrapping
/// with the target critic; terminated segments bootstrap with 0.
pub fn td_lambda_targets(
    batch: &HorizonBatch,
    critic_target: &CriticNet,
    cfg: &ShacConfig,
) -> Vec<Vec<f64>> {
    let mut all = Vec::with_capacity(batch.lanes.len());
    for lane in &batch.lanes {
        let h = lane.transitions.len();
        let mut targets = vec![0.0; h];
        let mut start = 0;
        while start < h {
            let end = (start..h)
                .find(|&j| lane.transitions[j].done)
                .unwrap_or(h - 1);
            let rewards: Vec<f64> = lane.transitions[start..=end].iter().map(|t| t.reward).collect();
            let mut next_values = Vec::with_capacity(end - start + 1);
            for j in start..=end {
                if j < end {
                    next_values.push(critic_target.value(&lane.transitions[j + 1].obs));
                } else if lane.transitions[end].done {
                    next_values.push(0.0);
                } else {
                    next_values.push(critic_target.value(&lane.bootstrap_obs));
                }
            }
            let seg = td_lambda_segment(&rewards, &next_values, cfg.gamma, cfg.td_lambda);
            targets[start..=end].copy_from_slice(&seg);
            start = end + 1;
        }
        all.push(targets);
    }
    all
}

/// Fit the critic to fixed targets with `critic_epochs` full-batch Adam
/// steps; returns the mean-squared-error of the last epoch (measured
/// before that epoch's parameter step).
pub fn critic_update(
    critic: &mut CriticNet,
    adam: &mut AdamState,
    batch: &HorizonBatch,
    targets: &[Vec<f64>],
    cfg: &ShacConfig,
) -> f64 {
    let count: usize = batch.lanes.iter().map(|l| l.transitions.len()).sum();
    let mut last_loss = 0.0;
    for _ in 0..cfg.critic_epochs {
        let mut grad = critic.params.zeros_like();
        let mut loss = 0.0;
        for (lane, lane_targets) in batch.lanes.iter().zip(targets.iter()) {
            for (tr, &target) in lane.transitions.iter().zip(lane_targets.iter()) {
                let (v, tape) = critic.forward(&tr.obs);
                let resid = v - target;
                loss += resid * resid;
                critic.backward(&tape, 2.0 * resid / count as f64, Some(&mut grad));
            }
        }
        adam_step(&mut critic.params, &grad, adam, cfg.critic_lr);
        last_loss = loss / count as f64;
    }
    last_loss
}

/// Polyak mixing: `target <- alpha*target + (1-alpha)*critic`.
pub fn target_mix(target: &mut ParamVector, critic: &ParamVector, alpha: f64) {
    debug_assert!(target.same_layout(critic));
    for (t, c) in target.values_mut().iter_mut().zip(critic.values().iter()) {
        *t = alpha * *t + (1.0 - alpha) * c;
    }
}

/// Everything a finished run produces, in memory. File writes live in the
/// CLI. PPO runs have no target critic.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub policy: PolicyNet,
    pub critic: CriticNet,
    pub critic_target: Option<CriticNet>,
    pub curve: Vec<CurveRow>,
    pub total_env_steps: u64,
    pub total_grad_evals: u64,
}

/// Run the full training loop for `cfg.episodes` episodes.
pub fn train(
    env: &Env,
    params: &EnvParams,
    cfg: &ShacConfig,
    seed: u64,
) -> Result<TrainArtifacts, TrainError> {
    assert!(cfg.lanes >= 1, "need at least one lane");
    assert!(
        cfg.horizon >= 1 && cfg.horizon as u32 <= params.horizon,
        "short horizon must satisfy 1 <= h <= H"
    );
    assert!(cfg.gamma > 0.0 && cfg.gamma <= 1.0);
    let asam_cfg = match cfg.mode {
        ShacMode::Asam => Some(
            cfg.asam
                .clone()
                .expect("asam config required when mode = asam"),
        ),
        ShacMode::Plain => None,
    };

    let mut policy = PolicyNet::new(
        env.obs_dim(),
        env.action_dim(),
        crate::rng::derive_seed(seed, &[POLICY_INIT]),
    );
    let mut critic = CriticNet::new(env.obs_dim(), crate::rng::derive_seed(seed, &[CRITIC_INIT]));
    let mut critic_target = critic.clone();

    let mut actor_adam = AdamState::new(&policy.params);
    let mut critic_adam = AdamState::new(&critic.params);
    let mut lanes = Lanes::init(env, params, cfg.lanes, seed);

    let mut curve = Vec::with_capacity(cfg.episodes);
    let mut env_steps: u64 = 0;
    let mut total_grad_evals: u64 = 0;

    // Pre-training evaluation carried into rows until the first refresh.
    let mut eval_stats = eval::evaluate(
        &policy,
        env,
        params,
        &NoiseSpec::clean(seed),
        cfg.eval_rollouts,
        crate::rng::derive_seed(seed, &[TRAIN_EVAL, 0]),
    );

    for ep in 1..=cfg.episodes as u64 {
        let frac = if cfg.episodes > 1 {
            (ep - 1) as f64 / (cfg.episodes - 1) as f64
        } else {
            0.0
        };
        let lr = cfg.actor_lr + (cfg.actor_lr_end - cfg.actor_lr) * frac;

        let update_start = Instant::now();
        let noise = draw_noise(seed, ep, cfg.lanes, cfg.horizon, env.action_dim());
        let batch = rollout(env, params, &policy, &mut lanes, &noise, cfg, ep)?;
        let (loss, mut g1) = policy_loss_and_grad(&batch, env, &policy, &critic_target, cfg);
        let mut grad_evals = 1u64;
        clip_grad_norm(&mut g1, GRAD_CLIP_NORM);
        match &asam_cfg {
            None => adam_step(&mut policy.params, &g1, &mut actor_adam, lr),
            Some(acfg) => {
                let pert = asam_perturb(&policy.params, &g1, acfg);
                let theta = policy.params.clone();
                policy.params.add_scaled(&pert.epsilon, 1.0);
                let (_, mut g2) = policy_grad_at(&batch, env, &policy, &critic_target, cfg);
                grad_evals += 1;
                policy.params = theta;
                clip_grad_norm(&mut g2, GRAD_CLIP_NORM);
                asam_update(&mut policy.params, &g2, &mut actor_adam, acfg, lr);
            }
        }
        let update_wall_ms = update_start.elapsed().as_secs_f64() * 1e3;
        total_grad_evals += grad_evals;

        let targets = td_lambda_targets(&batch, &critic_target, cfg);
        let critic_loss = critic_update(&mut critic, &mut critic_adam, &batch, &targets, cfg);
        target_mix(&mut critic_target.params, &critic.params, cfg.target_alpha);

        env_steps += batch.env_steps();

        if ep % cfg.eval_every as u64 == 0 || ep == cfg.episodes as u64 {
            eval_stats = eval::evaluate(
                &policy,
                env,
                params,
                &NoiseSpec::clean(seed),
                cfg.eval_rollouts,
                crate::rng::derive_seed(seed, &[TRAIN_EVAL, ep]),
            );
        }

        curve.push(CurveRow {
            episode: ep,
            env_steps,
            eval_reward_mean: eval_stats.mean,
            eval_reward_std: eval_stats.std,
            policy_loss: loss,
            critic_loss,
            grad_evals,
            update_wall_ms,
        });
    }

    Ok(TrainArtifacts {
        policy,
        critic,
        critic_target: Some(critic_target),
        curve,
        total_env_steps: env_steps,
        total_grad_evals,
    })
}
