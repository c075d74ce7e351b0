//! Two-hidden-layer tanh MLPs over a flat [`ParamVector`], with forward
//! tapes and exact reverse-mode gradients for both parameters and inputs.
//!
//! The policy is Gaussian with a tanh-squashed mean head and a learnable
//! state-independent log standard deviation; sampling is reparameterized
//! (`a_raw = mean + sigma * noise`) so pathwise gradients flow through
//! actions. The critic is the same trunk with a single linear output.
//!
//! Gradient accumulation order is fixed (layer-major within a sample,
//! sample-major across calls) so results are bit-reproducible.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamLayout, ParamVector};
use crate::rng::{
    stream::{CRITIC_INIT, POLICY_INIT},
    stream_rng,
};

/// Hidden widths shared by policy and critic.
pub const HIDDEN: [usize; 2] = [64, 64];
/// exp(log_std) is clamped into this band.
pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 1.0;
/// Initial log standard deviation, ln(0.3).
pub const LOG_STD_INIT: f64 = -1.2039728043259361;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpDims {
    pub input: usize,
    pub h1: usize,
    pub h2: usize,
    pub output: usize,
}

fn mlp_layout(dims: MlpDims, with_log_std: bool) -> Arc<ParamLayout> {
    let mut blocks = vec![
        ("w1", dims.h1, dims.input),
        ("b1", dims.h1, 1),
        ("w2", dims.h2, dims.h1),
        ("b2", dims.h2, 1),
        ("w3", dims.output, dims.h2),
        ("b3", dims.output, 1),
    ];
    if with_log_std {
        blocks.push(("log_std", dims.output, 1));
    }
    ParamLayout::new(&blocks)
}

/// y = W x + b, W row-major (rows x cols).
fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for i in 0..rows {
        out[i] = b[i] + dot(&w[i * cols..(i + 1) * cols], x);
    }
}

/// Four-accumulator dot product: fixed summation order, a little ILP.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

fn tanh_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.tanh());
}

/// Glorot-style uniform init: weights in ±sqrt(6/(fan_in+fan_out)),
/// biases zero.
fn init_mlp(params: &mut ParamVector, dims: MlpDims, rng: &mut ChaCha8Rng, final_scale: f64) {
    let layers = [
        ("w1", dims.h1, dims.input, 1.0),
        ("w2", dims.h2, dims.h1, 1.0),
        ("w3", dims.output, dims.h2, final_scale),
    ];
    for (name, rows, cols, scale) in layers {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let block = params.view_mut(name).unwrap();
        for w in block.iter_mut() {
            *w = scale * rng.gen_range(-bound..=bound);
        }
    }
}

/// Forward tape of one trunk evaluation. `out` holds the post-head output
/// (tanh mean for the policy, raw value for the critic).
#[derive(Debug, Clone)]
pub struct MlpTape {
    pub x: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub out: Vec<f64>,
}

/// Trunk forward pass; `tanh_head` applies tanh to the output layer.
fn mlp_forward(params: &ParamVector, dims: MlpDims, x: &[f64], tanh_head: bool) -> MlpTape {
    debug_assert_eq!(x.len(), dims.input);
    let mut h1 = vec![0.0; dims.h1];
    affine(
        params.view("w1").unwrap(),
        params.view("b1").unwrap(),
        x,
        dims.h1,
        dims.input,
        &mut h1,
    );
    tanh_inplace(&mut h1);
    let mut h2 = vec![0.0; dims.h2];
    affine(
        params.view("w2").unwrap(),
        params.view("b2").unwrap(),
        &h1,
        dims.h2,
        dims.h1,
        &mut h2,
    );
    tanh_inplace(&mut h2);
    let mut out = vec![0.0; dims.output];
    affine(
        params.view("w3").unwrap(),
        params.view("b3").unwrap(),
        &h2,
        dims.output,
        dims.h2,
        &mut out,
    );
    if tanh_head {
        tanh_inplace(&mut out);
    }
    MlpTape {
        x: x.to_vec(),
        h1,
        h2,
        out,
    }
}

/// Reverse pass through the trunk. `d_out` is the cotangent on the
/// post-head output (the tanh-head derivative is applied internally when
/// `tanh_head`). Parameter gradients accumulate into `grad` when given;
/// the input cotangent is always returned.
fn mlp_backward(
    params: &ParamVector,
    dims: MlpDims,
    tape: &MlpTape,
    d_out: &[f64],
    tanh_head: bool,
    mut grad: Option<&mut ParamVector>,
) -> Vec<f64> {
    let mut dz3 = d_out.to_vec();
    if tanh_head {
        for (d, o) in dz3.iter_mut().zip(tape.out.iter()) {
            *d *= 1.0 - o * o;
        }
    }
    if let Some(g) = grad.as_deref_mut() {
        let gw3 = g.view_mut("w3").unwrap();
        for i in 0..dims.output {
            for j in 0..dims.h2 {
                gw3[i * dims.h2 + j] += dz3[i] * tape.h2[j];
            }
        }
        let gb3 = g.view_mut("b3").unwrap();
        for i in 0..dims.output {
            gb3[i] += dz3[i];
        }
    }
    let w3 = params.view("w3").unwrap();
    let mut dz2 = vec![0.0; dims.h2];
    for j in 0..dims.h2 {
        let mut s = 0.0;
        for i in 0..dims.output {
            s += w3[i * dims.h2 + j] * dz3[i];
        }
        dz2[j] = s * (1.0 - tape.h2[j] * tape.h2[j]);
    }
    if let Some(g) = grad.as_deref_mut() {
        let gw2 = g.view_mut("w2").unwrap();
        for i in 0..dims.h2 {
            for j in 0..dims.h1 {
                gw2[i * dims.h1 + j] += dz2[i] * tape.h1[j];
            }
        }
        let gb2 = g.view_mut("b2").unwrap();
        for i in 0..dims.h2 {
            gb2[i] += dz2[i];
        }
    }
    let w2 = params.view("w2").unwrap();
    let mut dz1 = vec![0.0; dims.h1];
    for j in 0..dims.h1 {
        let mut s = 0.0;
        for i in 0..dims.h2 {
            s += w2[i * dims.h1 + j] * dz2[i];
        }
        dz1[j] = s * (1.0 - tape.h1[j] * tape.h1[j]);
    }
    if let Some(g) = grad.as_deref_mut() {
        let gw1 = g.view_mut("w1").unwrap();
        for i in 0..dims.h1 {
            for j in 0..dims.input {
                gw1[i * dims.input + j] += dz1[i] * tape.x[j];
            }
        }
        let gb1 = g.view_mut("b1").unwrap();
        for i in 0..dims.h1 {
            gb1[i] += dz1[i];
        }
    }
    let w1 = params.view("w1").unwrap();
    let mut dx = vec![0.0; dims.input];
    for j in 0..dims.input {
        let mut s = 0.0;
        for i in 0..dims.h1 {
            s += w1[i * dims.input + j] * dz1[i];
        }
        dx[j] = s;
    }
    dx
}

/// Gaussian policy: tanh mean head plus clamped log-std.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub params: ParamVector,
    dims: MlpDims,
}

/// Forward result of one policy evaluation.
#[derive(Debug, Clone)]
pub struct PolicyTape {
    pub mlp: MlpTape,
    /// Clamped standard deviations.
    pub sigma: Vec<f64>,
    /// Whether the log-std gradient passes the clamp (value inside band).
    pub sigma_active: Vec<bool>,
}

impl PolicyTape {
    pub fn mean(&self) -> &[f64] {
        &self.mlp.out
    }
}

impl PolicyNet {
    pub fn new(obs_dim: usize, act_dim: usize, seed: u64) -> Self {
        Self::with_dims(
            MlpDims {
                input: obs_dim,
                h1: HIDDEN[0],
                h2: HIDDEN[1],
                output: act_dim,
            },
            seed,
        )
    }

    /// Arbitrary trunk widths; the public constructors pin 64x64.
    pub fn with_dims(dims: MlpDims, seed: u64) -> Self {
        let mut params = ParamVector::zeros(mlp_layout(dims, true));
        let mut rng = stream_rng(seed, &[POLICY_INIT]);
        // Final layer scaled down so early actions stay small.
        init_mlp(&mut params, dims, &mut rng, 0.01);
        params
            .view_mut("log_std")
            .unwrap()
            .iter_mut()
            .for_each(|v| *v = LOG_STD_INIT);
        Self { params, dims }
    }

    pub fn from_params(params: ParamVector, dims: MlpDims) -> Self {
        assert_eq!(params.len(), mlp_layout(dims, true).total_len());
        Self { params, dims }
    }

    pub fn dims(&self) -> MlpDims {
        self.dims
    }

    pub fn obs_dim(&self) -> usize {
        self.dims.input
    }

    pub fn act_dim(&self) -> usize {
        self.dims.output
    }

    /// Mean/sigma heads with a tape for the backward pass.
    pub fn forward(&self, obs: &[f64]) -> PolicyTape {
        let mlp = mlp_forward(&self.params, self.dims, obs, true);
        let log_std = self.params.view("log_std").unwrap();
        let mut sigma = Vec::with_capacity(self.dims.output);
        let mut sigma_active = Vec::with_capacity(self.dims.output);
        for &ls in log_std {
            let raw = ls.exp();
            sigma.push(raw.clamp(SIGMA_MIN, SIGMA_MAX));
            sigma_active.push((SIGMA_MIN..=SIGMA_MAX).contains(&raw));
        }
        PolicyTape {
            mlp,
            sigma,
            sigma_active,
        }
    }

    /// Reparameterized pre-clip action for a standard-normal draw.
    pub fn sample_raw(&self, tape: &PolicyTape, noise: &[f64]) -> Vec<f64> {
        tape.mean()
            .iter()
            .zip(tape.sigma.iter().zip(noise.iter()))
            .map(|(m, (s, n))| m + s * n)
            .collect()
    }

    /// Deterministic action (mean, clipped).
    pub fn mean_action(&self, obs: &[f64]) -> Vec<f64> {
        let tape = self.forward(obs);
        tape.mean().iter().map(|m| m.clamp(-1.0, 1.0)).collect()
    }

    /// Reverse pass: cotangents `d_mean` (on the post-tanh mean) and
    /// `d_sigma` (on the clamped sigma). Returns the observation cotangent;
    /// parameter gradients accumulate into `grad` when given.
    pub fn backward(
        &self,
        tape: &PolicyTape,
        d_mean: &[f64],
        d_sigma: &[f64],
        mut grad: Option<&mut ParamVector>,
    ) -> Vec<f64> {
        if let Some(g) = grad.as_deref_mut() {
            let gls = g.view_mut("log_std").unwrap();
            for j in 0..self.dims.output {
                if tape.sigma_active[j] {
                    // d sigma / d log_std = sigma inside the clamp band.
                    gls[j] += d_sigma[j] * tape.sigma[j];
                }
            }
        }
        mlp_backward(&self.params, self.dims, &tape.mlp, d_mean, true, grad)
    }
}

/// Value function: same trunk, single linear output.
#[derive(Debug, Clone)]
pub struct CriticNet {
    pub params: ParamVector,
    dims: MlpDims,
}

impl CriticNet {
    pub fn new(obs_dim: usize, seed: u64) -> Self {
        Self::with_dims(
            MlpDims {
                input: obs_dim,
                h1: HIDDEN[0],
                h2: HIDDEN[1],
                output: 1,
            },
            seed,
        )
    }

    pub fn with_dims(dims: MlpDims, seed: u64) -> Self {
        let mut params = ParamVector::zeros(mlp_layout(dims, false));
        let mut rng = stream_rng(seed, &[CRITIC_INIT]);
        init_mlp(&mut params, dims, &mut rng, 1.0);
        Self { params, dims }
    }

    pub fn from_params(params: ParamVector, dims: MlpDims) -> Self {
        assert_eq!(params.len(), mlp_layout(dims, false).total_len());
        Self { params, dims }
    }

    pub fn dims(&self) -> MlpDims {
        self.dims
    }

    pub fn forward(&self, obs: &[f64]) -> (f64, MlpTape) {
        let tape = mlp_forward(&self.params, self.dims, obs, false);
        (tape.out[0], tape)
    }

    pub fn value(&self, obs: &[f64]) -> f64 {
        self.forward(obs).0
    }

    pub fn backward(
        &self,
        tape: &MlpTape,
        d_value: f64,
        grad: Option<&mut ParamVector>,
    ) -> Vec<f64> {
        mlp_backward(&self.params, self.dims, tape, &[d_value], false, grad)
    }
}

/// Log-density of the diagonal Gaussian `N(mean, diag(sigma^2))` at `a`.
pub fn gaussian_logp(mean: &[f64], sigma: &[f64], a: &[f64]) -> f64 {
    const HALF_LN_2PI: f64 = 0.9189385332046727;
    mean.iter()
        .zip(sigma.iter().zip(a.iter()))
        .map(|(m, (s, x))| {
            let z = (x - m) / s;
            -0.5 * z * z - s.ln() - HALF_LN_2PI
        })
        .sum()
}

/// Per-coordinate cotangents (d logp / d mean, d logp / d sigma).
pub fn gaussian_logp_grads(mean: &[f64], sigma: &[f64], a: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut d_mean = Vec::with_capacity(mean.len());
    let mut d_sigma = Vec::with_capacity(mean.len());
    for ((m, s), x) in mean.iter().zip(sigma.iter()).zip(a.iter()) {
        let z = (x - m) / s;
        d_mean.push(z / s);
        d_sigma.push((z * z - 1.0) / s);
    }
    (d_mean, d_sigma)
}

/// Entropy of the diagonal Gaussian; gradient w.r.t. sigma is 1/sigma.
pub fn gaussian_entropy(sigma: &[f64]) -> f64 {
    const HALF_LN_2PI_E: f64 = 1.4189385332046727;
    sigma.iter().map(|s| s.ln() + HALF_LN_2PI_E).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims() -> MlpDims {
        MlpDims {
            input: 2,
            h1: 2,
            h2: 2,
            output: 1,
        }
    }

    /// Central finite differences of `f` over every parameter coordinate.
    fn fd_param_grad<F: Fn(&ParamVector) -> f64>(
        params: &ParamVector,
        f: F,
        h: f64,
    ) -> Vec<f64> {
        let mut g = Vec::with_capacity(params.len());
        let mut p = params.clone();
        for i in 0..params.len() {
            let orig = p.values()[i];
            p.values_mut()[i] = orig + h;
            let fp = f(&p);
            p.values_mut()[i] = orig - h;
            let fm = f(&p);
            p.values_mut()[i] = orig;
            g.push((fp - fm) / (2.0 * h));
        }
        g
    }

    fn assert_close(a: &[f64], b: &[f64], rtol: f64, atol: f64, what: &str) {
        for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
            let tol = rtol * x.abs().max(y.abs()) + atol;
            assert!(
                (x - y).abs() <= tol,
                "{what}[{i}]: {x} vs {y} (tol {tol})"
            );
        }
    }

    #[test]
    fn zero_policy_outputs_zero_mean() {
        let mut net = PolicyNet::new(2, 1, 0);
        net.params.fill(0.0);
        let tape = net.forward(&[0.4, -2.0]);
        assert_eq!(tape.mean(), &[0.0]);
        let raw = net.sample_raw(&tape, &[0.0]);
        assert_eq!(raw, vec![0.0]);
    }

    #[test]
    fn zero_noise_is_independent_of_log_std() {
        let mut net = PolicyNet::new(2, 1, 3);
        let obs = [0.3, 0.7];
        let a1 = {
            let t = net.forward(&obs);
            net.sample_raw(&t, &[0.0])
        };
        net.params.view_mut("log_std").unwrap()[0] = -3.0;
        let a2 = {
            let t = net.forward(&obs);
            net.sample_raw(&t, &[0.0])
        };
        assert_eq!(a1[0].to_bits(), a2[0].to_bits());
    }

    #[test]
    fn sigma_is_clamped() {
        let mut net = PolicyNet::new(2, 1, 0);
        net.params.view_mut("log_std").unwrap()[0] = 5.0;
        assert_eq!(net.forward(&[0.0, 0.0]).sigma[0], SIGMA_MAX);
        net.params.view_mut("log_std").unwrap()[0] = -50.0;
        assert_eq!(net.forward(&[0.0, 0.0]).sigma[0], SIGMA_MIN);
    }

    #[test]
    fn critic_with_zero_weights_returns_bias() {
        let mut net = CriticNet::new(2, 0);
        net.params.fill(0.0);
        net.params.view_mut("b3").unwrap()[0] = -2.5;
        assert_eq!(net.value(&[13.0, -4.0]), -2.5);
    }

    #[test]
    fn critic_is_finite_for_huge_observations() {
        let net = CriticNet::new(2, 9);
        let v = net.value(&[1e6, -1e6]);
        assert!(v.is_finite());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = PolicyNet::new(2, 1, 1);
        let tape = net.forward(&[0.1, 0.2]);
        let mut grad = net.params.zeros_like();
        let d_obs = net.backward(&tape, &[0.0], &[0.0], Some(&mut grad));
        assert_eq!(grad.norm2(), 0.0);
        assert!(d_obs.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sample_gradients_add() {
        let net = CriticNet::new(2, 4);
        let (o1, o2) = ([0.5, -0.3], [-1.0, 0.2]);
        let (_, t1) = net.forward(&o1);
        let (_, t2) = net.forward(&o2);
        let mut g1 = net.params.zeros_like();
        net.backward(&t1, 1.0, Some(&mut g1));
        let mut g2 = net.params.zeros_like();
        net.backward(&t2, 1.0, Some(&mut g2));
        let mut both = net.params.zeros_like();
        net.backward(&t1, 1.0, Some(&mut both));
        net.backward(&t2, 1.0, Some(&mut both));
        for i in 0..both.len() {
            assert_eq!(
                both.values()[i].to_bits(),
                (g1.values()[i] + g2.values()[i]).to_bits()
            );
        }
    }

    #[test]
    fn critic_gradient_matches_finite_differences_on_small_net() {
        let net = CriticNet::with_dims(small_dims(), 5);
        let obs = [0.7, -0.4];
        let (_, tape) = net.forward(&obs);
        let mut grad = net.params.zeros_like();
        net.backward(&tape, 1.0, Some(&mut grad));
        let fd = fd_param_grad(
            &net.params,
            |p| CriticNet::from_params(p.clone(), small_dims()).value(&obs),
            1e-6,
        );
        assert_close(grad.values(), &fd, 1e-6, 1e-9, "critic grad");
    }

    #[test]
    fn policy_gradient_matches_finite_differences() {
        // Scalar probe loss: sum of squared raw actions for a fixed draw.
        let dims = MlpDims {
            input: 2,
            h1: 8,
            h2: 8,
            output: 2,
        };
        let net = PolicyNet::with_dims(dims, 7);
        let obs = [0.3, -0.8];
        let noise = [0.6, -1.1];
        let loss = |p: &ParamVector| {
            let n = PolicyNet::from_params(p.clone(), dims);
            let t = n.forward(&obs);
            let raw = n.sample_raw(&t, &noise);
            raw.iter().map(|a| a * a).sum::<f64>()
        };
        let tape = net.forward(&obs);
        let raw = net.sample_raw(&tape, &noise);
        // dL/d raw = 2*raw; d raw/d mean = 1; d raw/d sigma = noise.
        let d_mean: Vec<f64> = raw.iter().map(|a| 2.0 * a).collect();
        let d_sigma: Vec<f64> = raw
            .iter()
            .zip(noise.iter())
            .map(|(a, n)| 2.0 * a * n)
            .collect();
        let mut grad = net.params.zeros_like();
        net.backward(&tape, &d_mean, &d_sigma, Some(&mut grad));
        let fd = fd_param_grad(&net.params, loss, 1e-6);
        assert_close(grad.values(), &fd, 1e-5, 1e-9, "policy grad");
    }

    #[test]
    fn input_cotangent_matches_finite_differences() {
        let net = CriticNet::with_dims(small_dims(), 2);
        let obs = [0.25, -0.9];
        let (_, tape) = net.forward(&obs);
        let d_obs = net.backward(&tape, 1.0, None);
        for i in 0..obs.len() {
            let h = 1e-6;
            let mut op = obs;
            op[i] += h;
            let mut om = obs;
            om[i] -= h;
            let fd = (net.value(&op) - net.value(&om)) / (2.0 * h);
            assert!((d_obs[i] - fd).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let net = PolicyNet::new(2, 1, 42);
        let a = net.forward(&[0.5, 0.5]);
        let b = net.forward(&[0.5, 0.5]);
        assert_eq!(a.mean()[0].to_bits(), b.mean()[0].to_bits());
        let n1 = PolicyNet::new(2, 1, 42);
        assert_eq!(net.params.max_abs_diff(&n1.params), 0.0);
    }

    #[test]
    fn logp_matches_scalar_formula() {
        let (mean, sigma, a) = ([0.2], [0.5], [0.9]);
        let z: f64 = (0.9 - 0.2) / 0.5;
        let expected = -0.5 * z * z - 0.5f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((gaussian_logp(&mean, &sigma, &a) - expected).abs() < 1e-14);
    }

    #[test]
    fn logp_grads_match_finite_differences() {
        let (mean, sigma, a) = ([0.2, -0.4], [0.5, 0.8], [0.9, 0.1]);
        let (dm, ds) = gaussian_logp_grads(&mean, &sigma, &a);
        let h = 1e-7;
        for j in 0..2 {
            let mut mp = mean;
            mp[j] += h;
            let mut mm = mean;
            mm[j] -= h;
            let fd = (gaussian_logp(&mp, &sigma, &a) - gaussian_logp(&mm, &sigma, &a)) / (2.0 * h);
            assert!((dm[j] - fd).abs() < 1e-6);
            let mut sp = sigma;
            sp[j] += h;
            let mut sm = sigma;
            sm[j] -= h;
            let fd = (gaussian_logp(&mean, &sp, &a) - gaussian_logp(&mean, &sm, &a)) / (2.0 * h);
            assert!((ds[j] - fd).abs() < 1e-6);
        }
    }
}
