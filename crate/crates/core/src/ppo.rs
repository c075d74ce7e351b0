//! Clipped-surrogate PPO baseline.
//!
//! The zeroth-order comparator: the same Gaussian policy class as the
//! short-horizon trainer, but optimized with likelihood-ratio gradients
//! from sampled returns. Collection deliberately discards simulator tapes
//! — nothing in this module touches a dynamics derivative.

use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curve::CurveRow;
use crate::env::{ActionVec, Env, EnvParams};
use crate::eval;
use crate::nets::{gaussian_logp, gaussian_logp_grads, CriticNet, PolicyNet};
use crate::optim::{adam_step, clip_grad_norm, AdamState};
use crate::rng::{
    stream::{ACTION_NOISE, CRITIC_INIT, POLICY_INIT, PPO_SHUFFLE, TRAIN_EVAL},
    stream_rng,
};
use crate::robust::NoiseSpec;
use crate::shac::{Lanes, TrainArtifacts, TrainError, GRAD_CLIP_NORM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub lanes: usize,
    /// On-policy steps collected per lane per update.
    pub rollout_steps: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    /// Optimization epochs over each collected batch.
    pub epochs: usize,
    pub minibatch_count: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub entropy_coef: f64,
    /// Total environment-step budget; updates run until it is exhausted.
    pub total_env_steps: u64,
    /// Deterministic evaluation cadence (updates).
    pub eval_every: usize,
    pub eval_rollouts: u32,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lanes: 32,
            rollout_steps: 64,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            epochs: 4,
            minibatch_count: 4,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            entropy_coef: 1e-3,
            total_env_steps: 256_000,
            eval_every: 10,
            eval_rollouts: 10,
        }
    }
}

/// On-policy batch. Indexed `lane * rollout_steps + t`. No simulator tapes
/// are retained: the baseline is gradient-free with respect to dynamics.
#[derive(Debug, Clone)]
pub struct PpoBatch {
    pub obs: Vec<Vec<f64>>,
    pub actions_raw: Vec<Vec<f64>>,
    /// Log-density of the pre-clip Gaussian at the sampled raw action.
    pub logp_old: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Per-lane observation of the state after the last collected step.
    pub bootstrap_obs: Vec<Vec<f64>>,
    pub lanes: usize,
    pub steps: usize,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// Collect `lanes * rollout_steps` on-policy transitions with stochastic
/// actions (clipped before stepping; the recorded log-prob is of the
/// pre-clip Gaussian). Non-finite steps reset the lane and are logged.
pub fn collect(
    env: &Env,
    params: &EnvParams,
    policy: &PolicyNet,
    lanes: &mut Lanes,
    cfg: &PpoConfig,
    seed: u64,
    update_idx: u64,
) -> PpoBatch {
    let total = cfg.lanes * cfg.rollout_steps;
    let mut batch = PpoBatch {
        obs: Vec::with_capacity(total),
        actions_raw: Vec::with_capacity(total),
        logp_old: Vec::with_capacity(total),
        rewards: Vec::with_capacity(total),
        dones: Vec::with_capacity(total),
        bootstrap_obs: Vec::with_capacity(cfg.lanes),
        lanes: cfg.lanes,
        steps: cfg.rollout_steps,
    };
    for lane in 0..cfg.lanes {
        let mut rng = stream_rng(seed, &[ACTION_NOISE, update_idx, lane as u64]);
        for _ in 0..cfg.rollout_steps {
            loop {
                let state = lanes.states[lane].clone();
                let obs = env.observe(&state);
                let tape = policy.forward(&obs);
                let noise: Vec<f64> = (0..env.action_dim())
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let action_raw = policy.sample_raw(&tape, &noise);
                let logp = gaussian_logp(tape.mean(), &tape.sigma, &action_raw);
                let action: Vec<f64> = action_raw.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
                match env.step(&state, &ActionVec::new(action), params) {
                    Ok((next, reward, _tape_discarded)) => {
                        let done = next.t >= params.horizon;
                        batch.obs.push(obs);
                        batch.actions_raw.push(action_raw);
                        batch.logp_old.push(logp);
                        batch.rewards.push(reward);
                        batch.dones.push(done);
                        if done {
                            lanes.reset_lane(env, params, lane);
                        } else {
                            lanes.states[lane] = next;
                        }
                        break;
                    }
                    Err(err) => {
                        log::warn!("ppo lane {lane} reset after non-finite step: {err}");
                        if let Some(last) = batch.dones.last_mut() {
                            *last = true;
                        }
                        lanes.reset_lane(env, params, lane);
                    }
                }
            }
        }
        batch.bootstrap_obs.push(env.observe(&lanes.states[lane]));
    }
    batch
}

/// Generalized advantage estimation plus value-regression targets.
/// Advantages are normalized to zero mean / unit variance per batch;
/// targets use the unnormalized advantages.
#[derive(Debug, Clone)]
pub struct Advantages {
    pub advantages: Vec<f64>,
    pub targets: Vec<f64>,
}

pub fn gae_advantages(batch: &PpoBatch, critic: &CriticNet, cfg: &PpoConfig) -> Advantages {
    let n = batch.len();
    let mut advantages = vec![0.0; n];
    let mut targets = vec![0.0; n];
    for lane in 0..batch.lanes {
        let base = lane * batch.steps;
        let values: Vec<f64> = (0..batch.steps)
            .map(|t| critic.value(&batch.obs[base + t]))
            .collect();
        let bootstrap = critic.value(&batch.bootstrap_obs[lane]);
        let mut next_adv = 0.0;
        for t in (0..batch.steps).rev() {
            let i = base + t;
            let nonterminal = if batch.dones[i] { 0.0 } else { 1.0 };
            let next_value = if t == batch.steps - 1 {
                bootstrap
            } else {
                values[t + 1]
            };
            let delta = batch.rewards[i] + cfg.gamma * next_value * nonterminal - values[t];
            next_adv = delta + cfg.gamma * cfg.gae_lambda * nonterminal * next_adv;
            advantages[i] = next_adv;
            targets[i] = next_adv + values[t];
        }
    }
    let mean = advantages.iter().sum::<f64>() / n as f64;
    let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
    let scale = 1.0 / (var.sqrt() + 1e-8);
    for a in advantages.iter_mut() {
        *a = (*a - mean) * scale;
    }
    Advantages {
        advantages,
        targets,
    }
}

/// Per-update optimization diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct PpoDiagnostics {
    /// Mean clipped-surrogate loss across minibatches (entropy excluded).
    pub policy_loss: f64,
    pub value_loss: f64,
    /// Fraction of samples with |ratio - 1| > clip_ratio.
    pub clip_fraction: f64,
    /// Mean of logp_old - logp_new.
    pub approx_kl: f64,
    /// Minibatch optimization steps performed.
    pub surrogate_updates: u64,
}

/// `epochs x minibatch_count` Adam steps on the clipped-surrogate
/// objective (policy) and value MSE (critic), on shuffled minibatches.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    policy: &mut PolicyNet,
    critic: &mut CriticNet,
    actor_adam: &mut AdamState,
    critic_adam: &mut AdamState,
    batch: &PpoBatch,
    adv: &Advantages,
    cfg: &PpoConfig,
    seed: u64,
    update_idx: u64,
) -> PpoDiagnostics {
    let n = batch.len();
    let mut surrogate_sum = 0.0;
    let mut vloss_sum = 0.0;
    let mut clip_count = 0usize;
    let mut kl_sum = 0.0;
    let mut minibatches = 0u64;
    let mut sample_passes = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(seed, &[PPO_SHUFFLE, update_idx, epoch as u64]);
        // Fisher-Yates with the dedicated stream.
        for i in (1..n).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(n.div_ceil(cfg.minibatch_count)) {
            let b = chunk.len() as f64;
            let mut g_policy = policy.params.zeros_like();
            let mut g_critic = critic.params.zeros_like();
            let mut surrogate = 0.0;
            let mut vloss = 0.0;
            for &i in chunk {
                let tape = policy.forward(&batch.obs[i]);
                let logp_new = gaussian_logp(tape.mean(), &tape.sigma, &batch.actions_raw[i]);
                let ratio = (logp_new - batch.logp_old[i]).exp();
                let a = adv.advantages[i];
                let unclipped = ratio * a;
                let clipped = ratio.clamp(1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio) * a;
                surrogate += unclipped.min(clipped);
                if (ratio - 1.0).abs() > cfg.clip_ratio {
                    clip_count += 1;
                }
                kl_sum += batch.logp_old[i] - logp_new;
                // min selects the unclipped branch on ties; the clipped
                // branch is a plateau (zero gradient) whenever it is the
                // strict minimum.
                let d_logp = if unclipped <= clipped { ratio * a } else { 0.0 };
                let dl_dlogp = -d_logp / b;
                let (lm, ls) = gaussian_logp_grads(tape.mean(), &tape.sigma, &batch.actions_raw[i]);
                let d_mean: Vec<f64> = lm.iter().map(|g| dl_dlogp * g).collect();
                let mut d_sigma: Vec<f64> = ls.iter().map(|g| dl_dlogp * g).collect();
                for (ds, s) in d_sigma.iter_mut().zip(tape.sigma.iter()) {
                    *ds += -cfg.entropy_coef / b / s;
                }
                policy.backward(&tape, &d_mean, &d_sigma, Some(&mut g_policy));

                let (v, vtape) = critic.forward(&batch.obs[i]);
                let resid = v - adv.targets[i];
                vloss += resid * resid;
                critic.backward(&vtape, 2.0 * resid / b, Some(&mut g_critic));
                sample_passes += 1;
            }
            clip_grad_norm(&mut g_policy, GRAD_CLIP_NORM);
            clip_grad_norm(&mut g_critic, GRAD_CLIP_NORM);
            adam_step(&mut policy.params, &g_policy, actor_adam, cfg.actor_lr);
            adam_step(&mut critic.params, &g_critic, critic_adam, cfg.critic_lr);
            surrogate_sum += -surrogate / b;
            vloss_sum += vloss / b;
            minibatches += 1;
        }
    }
    PpoDiagnostics {
        policy_loss: surrogate_sum / minibatches as f64,
        value_loss: vloss_sum / minibatches as f64,
        clip_fraction: clip_count as f64 / sample_passes as f64,
        approx_kl: kl_sum / sample_passes as f64,
        surrogate_updates: minibatches,
    }
}

/// Train PPO until the environment-step budget is exhausted.
pub fn train(
    env: &Env,
    params: &EnvParams,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<TrainArtifacts, TrainError> {
    assert!(cfg.clip_ratio > 0.0);
    let steps_per_update = (cfg.lanes * cfg.rollout_steps) as u64;
    assert!(
        cfg.total_env_steps >= steps_per_update,
        "budget below one update"
    );
    let updates = cfg.total_env_steps.div_ceil(steps_per_update);

    let mut policy = PolicyNet::new(
        env.obs_dim(),
        env.action_dim(),
        crate::rng::derive_seed(seed, &[POLICY_INIT]),
    );
    let mut critic = CriticNet::new(env.obs_dim(), crate::rng::derive_seed(seed, &[CRITIC_INIT]));
    let mut actor_adam = AdamState::new(&policy.params);
    let mut critic_adam = AdamState::new(&critic.params);
    let mut lanes = Lanes::init(env, params, cfg.lanes, seed);

    let mut curve = Vec::with_capacity(updates as usize);
    let mut env_steps = 0u64;
    let mut total_grad_evals = 0u64;
    let mut eval_stats = eval::evaluate(
        &policy,
        env,
        params,
        &NoiseSpec::clean(seed),
        cfg.eval_rollouts,
        crate::rng::derive_seed(seed, &[TRAIN_EVAL, 0]),
    );

    for update in 1..=updates {
        let start = Instant::now();
        let batch = collect(env, params, &policy, &mut lanes, cfg, seed, update);
        let adv = gae_advantages(&batch, &critic, cfg);
        let diag = ppo_update(
            &mut policy,
            &mut critic,
            &mut actor_adam,
            &mut critic_adam,
            &batch,
            &adv,
            cfg,
            seed,
            update,
        );
        let update_wall_ms = start.elapsed().as_secs_f64() * 1e3;
        env_steps += batch.len() as u64;
        total_grad_evals += diag.surrogate_updates;

        if update % cfg.eval_every as u64 == 0 || update == updates {
            eval_stats = eval::evaluate(
                &policy,
                env,
                params,
                &NoiseSpec::clean(seed),
                cfg.eval_rollouts,
                crate::rng::derive_seed(seed, &[TRAIN_EVAL, update]),
            );
        }
        curve.push(CurveRow {
            episode: update,
            env_steps,
            eval_reward_mean: eval_stats.mean,
            eval_reward_std: eval_stats.std,
            policy_loss: diag.policy_loss,
            critic_loss: diag.value_loss,
            grad_evals: diag.surrogate_updates,
            update_wall_ms,
        });
    }

    Ok(TrainArtifacts {
        policy,
        critic,
        critic_target: None,
        curve,
        total_env_steps: env_steps,
        total_grad_evals,
    })
}
