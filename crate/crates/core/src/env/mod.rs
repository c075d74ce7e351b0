//! Differentiable contact environments.
//!
//! An environment is a pure step function `F(state, action) -> (state',
//! reward)` together with analytic vector-Jacobian products, so a policy
//! loss can be backpropagated through whole trajectories. Two 1D
//! environments are provided:
//!
//! * [`Env::Bouncer1d`] — vertical point mass with a spring-damper ground
//!   contact; sensitive to contact stiffness `k_e` and damping `k_d`.
//! * [`Env::Slider1d`] — horizontal point mass under smooth Coulomb
//!   friction; sensitive to the friction coefficient `mu`.
//!
//! Both integrate with semi-implicit Euler (velocity first, then position
//! with the new velocity), which stays stable for stiff contact springs.

mod bouncer;
mod slider;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, stream_rng};
use rand::Rng;

/// Generalized positions/velocities plus a step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    /// Generalized positions (m).
    pub q: Vec<f64>,
    /// Generalized velocities (m/s).
    pub v: Vec<f64>,
    /// Step index within the episode.
    pub t: u32,
}

impl EnvState {
    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }
}

/// Bounded action vector. Components are dimensionless and must already be
/// clipped to `[-1, 1]` when passed to [`Env::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct ActionVec {
    pub a: Vec<f64>,
}

impl ActionVec {
    pub fn new(a: Vec<f64>) -> Self {
        Self { a }
    }

    pub fn within_bounds(&self) -> bool {
        self.a.iter().all(|x| x.is_finite() && x.abs() <= 1.0)
    }
}

/// Perturbable physical parameters defining an environment instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    /// Contact stiffness (N/m).
    pub k_e: f64,
    /// Contact damping (N·s/m).
    pub k_d: f64,
    /// Coulomb friction coefficient (dimensionless).
    pub mu: f64,
    /// Integration step (s).
    pub dt: f64,
    /// Full episode length (steps).
    pub horizon: u32,
}

impl EnvParams {
    /// Check the physical-validity invariants; returns the name of the
    /// first offending field.
    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.k_e > 0.0) {
            return Err("k_e");
        }
        if !(self.k_d >= 0.0) {
            return Err("k_d");
        }
        if !(self.mu >= 0.0) {
            return Err("mu");
        }
        if !(self.dt > 0.0) {
            return Err("dt");
        }
        if self.horizon < 1 {
            return Err("horizon");
        }
        Ok(())
    }
}

/// Recorded values of one step, sufficient to evaluate the step VJP at the
/// recorded `(state, action, params)` point.
#[derive(Debug, Clone)]
pub enum StepTape {
    Bouncer(bouncer::Tape),
    Slider(slider::Tape),
}

#[derive(Debug, Error)]
pub enum SimError {
    /// Integration produced NaN/Inf; the caller should abort or reset the
    /// episode.
    #[error("non-finite state after step {step} of {env}")]
    NonFiniteState { env: &'static str, step: u32 },
}

/// The two desk-scale environments. Stateless: all methods are pure
/// functions of their arguments, so instances can be evaluated from many
/// threads at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Env {
    #[serde(rename = "bouncer1d")]
    Bouncer1d,
    #[serde(rename = "slider1d")]
    Slider1d,
}

impl Env {
    pub fn name(&self) -> &'static str {
        match self {
            Env::Bouncer1d => "bouncer1d",
            Env::Slider1d => "slider1d",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "bouncer1d" => Some(Env::Bouncer1d),
            "slider1d" => Some(Env::Slider1d),
            _ => None,
        }
    }

    /// Dimension of `q` (equals dimension of `v`).
    pub fn state_dim(&self) -> usize {
        1
    }

    pub fn action_dim(&self) -> usize {
        1
    }

    pub fn obs_dim(&self) -> usize {
        2
    }

    pub fn default_params(&self) -> EnvParams {
        match self {
            Env::Bouncer1d => EnvParams {
                k_e: 400.0,
                k_d: 10.0,
                mu: 0.5,
                dt: 0.01,
                horizon: 240,
            },
            Env::Slider1d => EnvParams {
                k_e: 400.0,
                k_d: 10.0,
                mu: 0.5,
                dt: 0.01,
                horizon: 240,
            },
        }
    }

    /// Deterministic initial state for `seed`.
    ///
    /// Bouncer1d draws `y ∈ [0.8, 1.2]`, `v ∈ [-0.1, 0.1]`; Slider1d fixes
    /// `x = 0` and draws `v ∈ [-0.1, 0.1]`.
    pub fn reset(&self, seed: u64, _params: &EnvParams) -> EnvState {
        let mut rng = stream_rng(seed, &[]);
        match self {
            Env::Bouncer1d => {
                let y = rng.gen_range(0.8..=1.2);
                let v = rng.gen_range(-0.1..=0.1);
                EnvState {
                    q: vec![y],
                    v: vec![v],
                    t: 0,
                }
            }
            Env::Slider1d => {
                let v = rng.gen_range(-0.1..=0.1);
                EnvState {
                    q: vec![0.0],
                    v: vec![v],
                    t: 0,
                }
            }
        }
    }

    /// Semi-implicit Euler step. Returns the next state, the reward
    /// `R(state, action)`, and a tape for one VJP evaluation.
    ///
    /// The action must already be clipped; clipping lives in the trainers
    /// so the gradient path through the clip stays explicit.
    pub fn step(
        &self,
        state: &EnvState,
        action: &ActionVec,
        params: &EnvParams,
    ) -> Result<(EnvState, f64, StepTape), SimError> {
        assert!(state.is_finite(), "step precondition: finite state");
        assert!(
            action.within_bounds(),
            "step precondition: action clipped to [-1, 1]"
        );
        let (next, reward, tape) = match self {
            Env::Bouncer1d => {
                let (n, r, t) = bouncer::step(state, action.a[0], params);
                (n, r, StepTape::Bouncer(t))
            }
            Env::Slider1d => {
                let (n, r, t) = slider::step(state, action.a[0], params);
                (n, r, StepTape::Slider(t))
            }
        };
        if !next.is_finite() || !reward.is_finite() {
            return Err(SimError::NonFiniteState {
                env: self.name(),
                step: state.t,
            });
        }
        Ok((next, reward, tape))
    }

    /// Vector-Jacobian product of one recorded step.
    ///
    /// `w_state` is the cotangent over the *next* state, flattened as
    /// `[dq..., dv...]`; `w_reward` the cotangent over the reward. Returns
    /// `(g_state, g_action)` where `g_state` is the cotangent over the
    /// *input* state in the same flattened order.
    pub fn vjp(&self, tape: &StepTape, w_state: &[f64], w_reward: f64) -> (Vec<f64>, Vec<f64>) {
        match (self, tape) {
            (Env::Bouncer1d, StepTape::Bouncer(t)) => bouncer::vjp(t, w_state, w_reward),
            (Env::Slider1d, StepTape::Slider(t)) => slider::vjp(t, w_state, w_reward),
            _ => panic!("tape does not belong to this environment"),
        }
    }

    /// Fixed-dimension observation. Bouncer1d: `[y, v]`; Slider1d:
    /// `[v, v_target - v]`.
    pub fn observe(&self, state: &EnvState) -> Vec<f64> {
        match self {
            Env::Bouncer1d => vec![state.q[0], state.v[0]],
            Env::Slider1d => vec![state.v[0], slider::V_TARGET - state.v[0]],
        }
    }

    /// Pull an observation cotangent back onto the state (flattened
    /// `[dq..., dv...]`). The observation maps are identity/affine, so this
    /// is state-independent.
    pub fn observe_vjp(&self, w_obs: &[f64]) -> Vec<f64> {
        match self {
            Env::Bouncer1d => vec![w_obs[0], w_obs[1]],
            Env::Slider1d => vec![0.0, w_obs[0] - w_obs[1]],
        }
    }
}

/// Distinct reset seed for lane `lane` and reset number `count` of a run.
pub fn lane_reset_seed(run_seed: u64, lane: usize, count: u64) -> u64 {
    derive_seed(
        run_seed,
        &[crate::rng::stream::LANE_RESET, lane as u64, count],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bparams() -> EnvParams {
        Env::Bouncer1d.default_params()
    }

    #[test]
    fn bouncer_free_flight_matches_hand_update() {
        // v' = 0 + 0.01*(0 - 9.81) = -0.0981; y' = 1 + 0.01*v' = 0.999019
        let s = EnvState {
            q: vec![1.0],
            v: vec![0.0],
            t: 0,
        };
        let (next, _, _) = Env::Bouncer1d
            .step(&s, &ActionVec::new(vec![0.0]), &bparams())
            .unwrap();
        assert!((next.q[0] - 0.999019).abs() < 1e-12);
        assert!((next.v[0] + 0.0981).abs() < 1e-12);
        assert_eq!(next.t, 1);
    }

    #[test]
    fn bouncer_zero_penetration_is_free_fall() {
        // d = max(0, -y) = 0 at y = 0, so no contact force.
        let s = EnvState {
            q: vec![0.0],
            v: vec![0.0],
            t: 0,
        };
        let (next, _, _) = Env::Bouncer1d
            .step(&s, &ActionVec::new(vec![0.0]), &bparams())
            .unwrap();
        assert!((next.v[0] + 0.0981).abs() < 1e-12);
    }

    #[test]
    fn bouncer_reward_is_height_minus_action_cost() {
        let s = EnvState {
            q: vec![0.7],
            v: vec![0.0],
            t: 0,
        };
        let (_, r, _) = Env::Bouncer1d
            .step(&s, &ActionVec::new(vec![0.5]), &bparams())
            .unwrap();
        assert!((r - (0.7 - 0.1 * 0.25)).abs() < 1e-15);
    }

    #[test]
    fn slider_at_rest_stays_at_rest() {
        let s = EnvState {
            q: vec![0.0],
            v: vec![0.0],
            t: 0,
        };
        let mut p = Env::Slider1d.default_params();
        p.mu = 0.8;
        let (next, _, _) = Env::Slider1d
            .step(&s, &ActionVec::new(vec![0.0]), &p)
            .unwrap();
        assert_eq!(next.v[0], 0.0);
        assert_eq!(next.q[0], 0.0);
    }

    #[test]
    fn slider_friction_slope_at_origin() {
        // dv'/dv = 1 + dt * (-mu*m*g/v_s) at v = 0.
        let s = EnvState {
            q: vec![0.0],
            v: vec![0.0],
            t: 0,
        };
        let p = Env::Slider1d.default_params();
        let (_, _, tape) = Env::Slider1d
            .step(&s, &ActionVec::new(vec![0.0]), &p)
            .unwrap();
        let (g, _) = Env::Slider1d.vjp(&tape, &[0.0, 1.0], 0.0);
        let expected = 1.0 + p.dt * (-p.mu * slider::MASS * slider::GRAVITY / slider::V_SMOOTH);
        assert!((g[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn vjp_of_zero_cotangents_is_zero() {
        for env in [Env::Bouncer1d, Env::Slider1d] {
            let s = env.reset(7, &env.default_params());
            let (_, _, tape) = env
                .step(&s, &ActionVec::new(vec![0.3]), &env.default_params())
                .unwrap();
            let (g_s, g_a) = env.vjp(&tape, &[0.0, 0.0], 0.0);
            assert!(g_s.iter().all(|&x| x == 0.0));
            assert!(g_a.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn observe_maps() {
        let s = EnvState {
            q: vec![0.5],
            v: vec![-1.0],
            t: 3,
        };
        assert_eq!(Env::Bouncer1d.observe(&s), vec![0.5, -1.0]);
        let s2 = EnvState {
            q: vec![3.0],
            v: vec![1.0],
            t: 0,
        };
        assert_eq!(Env::Slider1d.observe(&s2), vec![1.0, 0.5]);
    }

    #[test]
    fn reset_is_deterministic_and_in_range() {
        for env in [Env::Bouncer1d, Env::Slider1d] {
            let p = env.default_params();
            for seed in 0..1000u64 {
                let a = env.reset(seed, &p);
                let b = env.reset(seed, &p);
                assert_eq!(a, b);
                match env {
                    Env::Bouncer1d => {
                        assert!((0.8..=1.2).contains(&a.q[0]));
                        assert!((-0.1..=0.1).contains(&a.v[0]));
                    }
                    Env::Slider1d => {
                        assert_eq!(a.q[0], 0.0);
                        assert!((-0.1..=0.1).contains(&a.v[0]));
                    }
                }
            }
        }
    }

    #[test]
    fn step_is_pure_and_bit_deterministic() {
        let env = Env::Bouncer1d;
        let s = env.reset(11, &bparams());
        let a = ActionVec::new(vec![-0.25]);
        let (n1, r1, _) = env.step(&s, &a, &bparams()).unwrap();
        let (n2, r2, _) = env.step(&s, &a, &bparams()).unwrap();
        assert_eq!(n1.q[0].to_bits(), n2.q[0].to_bits());
        assert_eq!(n1.v[0].to_bits(), n2.v[0].to_bits());
        assert_eq!(r1.to_bits(), r2.to_bits());
    }

    #[test]
    fn bouncer_energy_stays_bounded_without_damping() {
        // Free flight drains energy each step (-g^2 dt^2 / 2 exactly); the
        // symplectic integrator lets the true energy wobble during contact
        // but never lets it grow past a ~(omega*dt) band. With k_e = 400,
        // dt = 0.01 the band is well inside 15%.
        let env = Env::Bouncer1d;
        let mut p = bparams();
        p.k_d = 0.0;
        let energy = |s: &EnvState| -> f64 {
            let y = s.q[0];
            let pen = (-y).max(0.0);
            0.5 * s.v[0] * s.v[0] + bouncer::GRAVITY * y + 0.5 * p.k_e * pen * pen
        };
        for seed in 0..20u64 {
            let mut s = env.reset(seed, &p);
            let e0 = energy(&s);
            for _ in 0..p.horizon {
                let in_flight = s.q[0] >= 0.0;
                let e_before = energy(&s);
                let (next, _, _) = env.step(&s, &ActionVec::new(vec![0.0]), &p).unwrap();
                let e_after = energy(&next);
                if in_flight && next.q[0] >= 0.0 {
                    assert!(e_after <= e_before + 1e-12, "free flight must not gain energy");
                }
                assert!(e_after <= e0 * 1.15, "energy grew past the symplectic band");
                s = next;
            }
        }
    }

    proptest! {
        // Normal force is never negative (no sticky ground): the velocity
        // update never dips below the free-fall/thrust-only update.
        #[test]
        fn bouncer_contact_force_nonnegative(
            y in -0.5f64..1.5,
            v in -5.0f64..5.0,
            a in -1.0f64..1.0,
            k_e in 50.0f64..4000.0,
            k_d in 0.0f64..100.0,
        ) {
            let mut p = bparams();
            p.k_e = k_e;
            p.k_d = k_d;
            let s = EnvState { q: vec![y], v: vec![v], t: 0 };
            let (next, _, _) = Env::Bouncer1d
                .step(&s, &ActionVec::new(vec![a]), &p)
                .unwrap();
            let free_fall_v = v + p.dt * (a * bouncer::THRUST_MAX - bouncer::MASS * bouncer::GRAVITY)
                / bouncer::MASS;
            prop_assert!(next.v[0] >= free_fall_v - 1e-12);
        }
    }
}
