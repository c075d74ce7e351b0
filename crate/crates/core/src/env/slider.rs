//! Horizontal point mass under smooth Coulomb friction.
//!
//! State `(x, v)`, drive force `u = a * FORCE_MAX`, friction
//! `f_t = -mu * m * g * tanh(v / V_SMOOTH)` (differentiable everywhere).
//! Reward tracks a target velocity: `r = -(v - V_TARGET)^2 - 0.01 a^2`.

use super::{EnvParams, EnvState};

pub const MASS: f64 = 1.0;
pub const GRAVITY: f64 = 9.81;
pub const FORCE_MAX: f64 = 10.0;
pub const V_SMOOTH: f64 = 0.1;
pub const V_TARGET: f64 = 1.5;
const ACTION_COST: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct Tape {
    pub v: f64,
    pub a: f64,
    pub params: EnvParams,
}

pub(crate) fn step(state: &EnvState, a: f64, params: &EnvParams) -> (EnvState, f64, Tape) {
    let x = state.q[0];
    let v = state.v[0];
    let u = a * FORCE_MAX;
    let f_t = -params.mu * MASS * GRAVITY * (v / V_SMOOTH).tanh();
    let v_next = v + params.dt * (u + f_t) / MASS;
    let x_next = x + params.dt * v_next;
    let dv = v - V_TARGET;
    let reward = -dv * dv - ACTION_COST * a * a;
    let next = EnvState {
        q: vec![x_next],
        v: vec![v_next],
        t: state.t + 1,
    };
    let tape = Tape {
        v,
        a,
        params: *params,
    };
    (next, reward, tape)
}

pub(crate) fn vjp(tape: &Tape, w_state: &[f64], w_reward: f64) -> (Vec<f64>, Vec<f64>) {
    let dt = tape.params.dt;
    let th = (tape.v / V_SMOOTH).tanh();
    let dft_dv = -tape.params.mu * MASS * GRAVITY * (1.0 - th * th) / V_SMOOTH;
    let dvn_dv = 1.0 + dt * dft_dv / MASS;
    let dvn_da = dt * FORCE_MAX / MASS;
    let (w_x, w_v) = (w_state[0], w_state[1]);
    let g_x = w_x;
    let g_v = w_x * (dt * dvn_dv) + w_v * dvn_dv + w_reward * (-2.0 * (tape.v - V_TARGET));
    let g_a = w_x * (dt * dvn_da) + w_v * dvn_da + w_reward * (-2.0 * ACTION_COST * tape.a);
    (vec![g_x, g_v], vec![g_a])
}
