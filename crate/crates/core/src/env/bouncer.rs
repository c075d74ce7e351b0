//! Vertical point mass over a spring-damper ground.
//!
//! State `(y, v)`, thrust `u = a * THRUST_MAX`. Penetration `d = max(0, -y)`
//! produces a normal force `f_n = max(0, k_e*d - k_d*v)` while in contact
//! (no sticky ground). Reward rates the current state and action:
//! `r = y - 0.1 a^2`.

use super::{EnvParams, EnvState};

pub const MASS: f64 = 1.0;
pub const GRAVITY: f64 = 9.81;
pub const THRUST_MAX: f64 = 15.0;
const ACTION_COST: f64 = 0.1;

/// Primal values recorded by one step; enough to rebuild both active-branch
/// flags and every partial derivative at the recorded point.
#[derive(Debug, Clone)]
pub struct Tape {
    pub y: f64,
    pub v: f64,
    pub a: f64,
    pub params: EnvParams,
}

/// Normal force at `(y, v)`; the `max(0, ·)` kinks use the subgradient
/// convention grad = 0 at the boundary.
pub(crate) fn normal_force(y: f64, v: f64, params: &EnvParams) -> f64 {
    if y < 0.0 {
        (params.k_e * (-y) - params.k_d * v).max(0.0)
    } else {
        0.0
    }
}

/// Local derivatives (df_n/dy, df_n/dv) at the recorded point.
fn normal_force_partials(y: f64, v: f64, params: &EnvParams) -> (f64, f64) {
    let active = y < 0.0 && (params.k_e * (-y) - params.k_d * v) > 0.0;
    if active {
        (-params.k_e, -params.k_d)
    } else {
        (0.0, 0.0)
    }
}

pub(crate) fn step(state: &EnvState, a: f64, params: &EnvParams) -> (EnvState, f64, Tape) {
    let y = state.q[0];
    let v = state.v[0];
    let u = a * THRUST_MAX;
    let f_n = normal_force(y, v, params);
    let v_next = v + params.dt * (u - MASS * GRAVITY + f_n) / MASS;
    let y_next = y + params.dt * v_next;
    let reward = y - ACTION_COST * a * a;
    let next = EnvState {
        q: vec![y_next],
        v: vec![v_next],
        t: state.t + 1,
    };
    let tape = Tape {
        y,
        v,
        a,
        params: *params,
    };
    (next, reward, tape)
}

/// `(g_state, g_action)` for cotangents `w_state = [w_y', w_v']` over the
/// next state and `w_reward` over the reward.
pub(crate) fn vjp(tape: &Tape, w_state: &[f64], w_reward: f64) -> (Vec<f64>, Vec<f64>) {
    let dt = tape.params.dt;
    let (df_dy, df_dv) = normal_force_partials(tape.y, tape.v, &tape.params);
    // v' = v + dt*(u - m g + f_n)/m ; y' = y + dt*v'
    let dvn_dy = dt * df_dy / MASS;
    let dvn_dv = 1.0 + dt * df_dv / MASS;
    let dvn_da = dt * THRUST_MAX / MASS;
    let (w_y, w_v) = (w_state[0], w_state[1]);
    let g_y = w_y * (1.0 + dt * dvn_dy) + w_v * dvn_dy + w_reward;
    let g_v = w_y * (dt * dvn_dv) + w_v * dvn_dv;
    let g_a = w_y * (dt * dvn_da) + w_v * dvn_da + w_reward * (-2.0 * ACTION_COST * tape.a);
    (vec![g_y, g_v], vec![g_a])
}
