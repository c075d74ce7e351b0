//! Parameter updaters: bias-corrected Adam, plus the ASAM wrapper that
//! performs the two-step sharpness-aware update
//!
//! ```text
//! eps   = rho * T^2 g / ||T g||_2,   T = diag(|theta|)
//! theta <- theta - alpha * (grad_at(theta + eps) + lambda_wd * theta)
//! ```
//!
//! ASAM wraps the base optimizer: the second line is an ordinary Adam step
//! on the effective gradient.

use serde::{Deserialize, Serialize};

use crate::params::ParamVector;

/// Adam moment state. Setting `beta1 = beta2 = 0` selects a plain SGD step
/// (`theta -= lr * g`), which the hand-derived oracles use.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: ParamVector,
    v_hat: ParamVector,
    step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(like: &ParamVector) -> Self {
        Self::with_betas(like, 0.9, 0.999)
    }

    pub fn with_betas(like: &ParamVector, beta1: f64, beta2: f64) -> Self {
        Self {
            m: like.zeros_like(),
            v_hat: like.zeros_like(),
            step_count: 0,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    fn sgd_mode(&self) -> bool {
        self.beta1 == 0.0 && self.beta2 == 0.0
    }
}

/// One bias-corrected Adam step with learning rate `lr`.
pub fn adam_step(params: &mut ParamVector, grad: &ParamVector, state: &mut AdamState, lr: f64) {
    debug_assert!(params.same_layout(grad));
    state.step_count += 1;
    if state.sgd_mode() {
        params.add_scaled(grad, -lr);
        return;
    }
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for i in 0..params.len() {
        let g = grad.values()[i];
        let m = &mut state.m.values_mut()[i];
        *m = b1 * *m + (1.0 - b1) * g;
        let v = &mut state.v_hat.values_mut()[i];
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        params.values_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Rescale `grad` in place so its global 2-norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grad: &mut ParamVector, max_norm: f64) -> f64 {
    let norm = grad.norm2();
    if norm > max_norm && norm > 0.0 {
        grad.scale(max_norm / norm);
    }
    norm
}

/// Neighborhood configuration for the sharpness-aware perturbation
/// (p-norm fixed to p = 2, normalization operator `T = diag(|theta|)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsamConfig {
    /// Neighborhood radius; must be positive for training (tests may pass 0
    /// to exercise the exact-equivalence limit).
    pub rho: f64,
    /// Weight-decay coefficient folded into the descent step.
    #[serde(default)]
    pub weight_decay: f64,
    /// Guard added to the perturbation denominator.
    #[serde(default = "default_denom_floor")]
    pub denom_floor: f64,
}

fn default_denom_floor() -> f64 {
    1e-12
}

impl Default for AsamConfig {
    fn default() -> Self {
        Self {
            rho: 0.75,
            weight_decay: 0.0,
            denom_floor: default_denom_floor(),
        }
    }
}

/// Result of [`asam_perturb`].
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub epsilon: ParamVector,
    /// Set when `||T g||` fell below the guard: no ascent direction exists
    /// and epsilon is the zero vector. Not fatal.
    pub degenerate: bool,
}

/// Worst-case ascent direction within the adaptive ball:
/// `eps = rho * T^2 g / (||T g||_2 + floor)`.
pub fn asam_perturb(params: &ParamVector, grad: &ParamVector, cfg: &AsamConfig) -> Perturbation {
    debug_assert!(params.same_layout(grad));
    debug_assert!(grad.all_finite(), "asam_perturb precondition: finite grad");
    let mut t_g_norm_sq = 0.0;
    for (p, g) in params.values().iter().zip(grad.values()) {
        let tg = p.abs() * g;
        t_g_norm_sq += tg * tg;
    }
    let t_g_norm = t_g_norm_sq.sqrt();
    let mut epsilon = params.zeros_like();
    let degenerate = t_g_norm < cfg.denom_floor;
    if !degenerate {
        let scale = cfg.rho / (t_g_norm + cfg.denom_floor);
        for ((e, p), g) in epsilon
            .values_mut()
            .iter_mut()
            .zip(params.values())
            .zip(grad.values())
        {
            *e = scale * (p * p) * g;
        }
    }
    Perturbation {
        epsilon,
        degenerate,
    }
}

/// Descent step of the two-step procedure: applies the base optimizer to
/// `grad_at_perturbed + weight_decay * params`. The caller must have
/// evaluated `grad_at_perturbed` at `theta + eps` and restored `theta`.
pub fn asam_update(
    params: &mut ParamVector,
    grad_at_perturbed: &ParamVector,
    state: &mut AdamState,
    cfg: &AsamConfig,
    lr: f64,
) {
    if cfg.weight_decay == 0.0 {
        adam_step(params, grad_at_perturbed, state, lr);
    } else {
        let mut effective = grad_at_perturbed.clone();
        effective.add_scaled(params, cfg.weight_decay);
        adam_step(params, &effective, state, lr);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamLayout;
    use proptest::prelude::*;

    fn vec_of(values: &[f64]) -> ParamVector {
        let layout = ParamLayout::new(&[("p", values.len(), 1)]);
        ParamVector::from_values(layout, values.to_vec())
    }

    #[test]
    fn adam_zero_grad_leaves_params_unchanged() {
        let mut p = vec_of(&[1.0, -2.0]);
        let g = p.zeros_like();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.1);
        assert_eq!(p.values(), &[1.0, -2.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_approximately_lr() {
        // Bias correction makes the first update lr * g / (|g| + eps).
        let mut p = vec_of(&[0.0]);
        let g = vec_of(&[1.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.1);
        assert!((p.values()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec_of(&[0.3, -0.7, 2.0]);
            let g = vec_of(&[0.5, 1.5, -0.25]);
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &g, &mut st, 0.01);
            adam_step(&mut p, &g, &mut st, 0.01);
            p.values().to_vec()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn clip_rescales_to_unit_norm() {
        let mut g = vec_of(&[3.0, 4.0]);
        let pre = clip_grad_norm(&mut g, 1.0);
        assert!((pre - 5.0).abs() < 1e-15);
        assert!((g.norm2() - 1.0).abs() < 1e-12);
        let mut small = vec_of(&[0.3, 0.4]);
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small.values(), &[0.3, 0.4]);
    }

    #[test]
    fn perturbation_matches_hand_computed_value() {
        // theta = (2, 0), g = (1, 0), rho = 0.5:
        // T^2 g = (4, 0), ||T g|| = 2, eps = (1, 0).
        let p = vec_of(&[2.0, 0.0]);
        let g = vec_of(&[1.0, 0.0]);
        let cfg = AsamConfig {
            rho: 0.5,
            ..Default::default()
        };
        let pert = asam_perturb(&p, &g, &cfg);
        assert!(!pert.degenerate);
        assert!((pert.epsilon.values()[0] - 1.0).abs() < 1e-12);
        assert!(pert.epsilon.values()[1].abs() < 1e-12);
    }

    #[test]
    fn zero_params_degenerate_to_zero_epsilon() {
        let p = vec_of(&[0.0, 0.0]);
        let g = vec_of(&[1.0, -1.0]);
        let pert = asam_perturb(&p, &g, &AsamConfig::default());
        assert!(pert.degenerate);
        assert_eq!(pert.epsilon.values(), &[0.0, 0.0]);
    }

    #[test]
    fn quadratic_two_step_matches_hand_oracle() {
        // L = theta^2 / 2 at theta = 1, rho = 0.5: eps = 0.5, perturbed
        // grad = 1.5, SGD step with lr = 0.1 gives 0.85.
        let mut p = vec_of(&[1.0]);
        let cfg = AsamConfig {
            rho: 0.5,
            ..Default::default()
        };
        let g = vec_of(&[1.0]);
        let pert = asam_perturb(&p, &g, &cfg);
        assert!((pert.epsilon.values()[0] - 0.5).abs() < 1e-12);
        let theta_tilde = p.values()[0] + pert.epsilon.values()[0];
        let g2 = vec_of(&[theta_tilde]); // dL/dtheta = theta
        let mut st = AdamState::with_betas(&p, 0.0, 0.0); // SGD mode
        asam_update(&mut p, &g2, &mut st, &cfg, 0.1);
        assert!((p.values()[0] - 0.85).abs() < 1e-10);
    }

    #[test]
    fn weight_decay_adds_scaled_params_to_gradient() {
        let cfg = AsamConfig {
            rho: 0.5,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut p = vec_of(&[1.0, -2.0]);
        let g = vec_of(&[0.3, 0.4]);
        let mut st = AdamState::with_betas(&p, 0.0, 0.0);
        asam_update(&mut p, &g, &mut st, &cfg, 1.0);
        // theta' = theta - (g + 0.1 theta)
        assert!((p.values()[0] - (1.0 - (0.3 + 0.1))).abs() < 1e-15);
        assert!((p.values()[1] - (-2.0 - (0.4 - 0.2))).abs() < 1e-15);
    }

    #[test]
    fn zero_weight_decay_reduces_to_adam_step() {
        let g = vec_of(&[0.3, -0.8]);
        let mut p1 = vec_of(&[1.0, 2.0]);
        let mut st1 = AdamState::new(&p1);
        adam_step(&mut p1, &g, &mut st1, 0.05);
        let mut p2 = vec_of(&[1.0, 2.0]);
        let mut st2 = AdamState::new(&p2);
        asam_update(&mut p2, &g, &mut st2, &AsamConfig::default(), 0.05);
        assert_eq!(p1.values()[0].to_bits(), p2.values()[0].to_bits());
        assert_eq!(p1.values()[1].to_bits(), p2.values()[1].to_bits());
    }

    proptest! {
        // The Taylor-optimal perturbation sits on the adaptive-ball
        // boundary: ||T^-1 eps||_2 = rho when no component of theta is 0.
        #[test]
        fn perturbation_sits_on_adaptive_ball_boundary(
            theta in proptest::collection::vec(0.1f64..3.0, 1..12),
            grad in proptest::collection::vec(0.1f64..3.0, 1..12),
            sign_t in proptest::collection::vec(prop::bool::ANY, 12),
            sign_g in proptest::collection::vec(prop::bool::ANY, 12),
            rho in 0.01f64..2.0,
        ) {
            let n = theta.len().min(grad.len());
            let t: Vec<f64> = theta[..n]
                .iter()
                .zip(sign_t.iter())
                .map(|(x, s)| if *s { *x } else { -x })
                .collect();
            let g: Vec<f64> = grad[..n]
                .iter()
                .zip(sign_g.iter())
                .map(|(x, s)| if *s { *x } else { -x })
                .collect();
            let p = vec_of(&t);
            let gv = vec_of(&g);
            let cfg = AsamConfig { rho, ..Default::default() };
            let pert = asam_perturb(&p, &gv, &cfg);
            prop_assert!(!pert.degenerate);
            let norm: f64 = pert
                .epsilon
                .values()
                .iter()
                .zip(p.values())
                .map(|(e, th)| (e / th.abs()).powi(2))
                .sum::<f64>()
                .sqrt();
            prop_assert!((norm - rho).abs() < 1e-9);
            // Sign alignment: the perturbation ascends the loss locally.
            for (e, gi) in pert.epsilon.values().iter().zip(gv.values()) {
                prop_assert!(e * gi >= 0.0);
            }
        }

        // Closed form: eps_i is rho * theta_i^2 g_i / ||Tg||; doubling one
        // theta_i quadruples that numerator.
        #[test]
        fn perturbation_matches_closed_form(
            theta in proptest::collection::vec(-2.0f64..2.0, 3..6),
            grad in proptest::collection::vec(-2.0f64..2.0, 3..6),
        ) {
            let n = theta.len().min(grad.len());
            let p = vec_of(&theta[..n]);
            let g = vec_of(&grad[..n]);
            let cfg = AsamConfig { rho: 0.3, ..Default::default() };
            let pert = asam_perturb(&p, &g, &cfg);
            let tg_norm: f64 = theta[..n]
                .iter()
                .zip(&grad[..n])
                .map(|(t, gi)| (t.abs() * gi).powi(2))
                .sum::<f64>()
                .sqrt();
            prop_assume!(tg_norm > 1e-9);
            for i in 0..n {
                let expected = 0.3 * theta[i] * theta[i] * grad[i] / (tg_norm + 1e-12);
                prop_assert!((pert.epsilon.values()[i] - expected).abs() < 1e-12);
                let quadrupled = 0.3 * (2.0 * theta[i]) * (2.0 * theta[i]) * grad[i];
                prop_assert!((quadrupled - 4.0 * 0.3 * theta[i] * theta[i] * grad[i]).abs() < 1e-12);
            }
        }
    }
}
