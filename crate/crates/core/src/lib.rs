//! First-order policy optimization through differentiable simulation.
//!
//! The crate provides:
//!
//! * [`env`] — two 1D contact environments with analytic step VJPs.
//! * [`nets`] — tanh MLP policy/critic over flat parameter vectors.
//! * [`optim`] — Adam plus the two-step sharpness-aware (ASAM) update.
//! * [`shac`] — short-horizon actor-critic trainer with backpropagation
//!   through time, in plain or sharpness-aware mode.
//! * [`ppo`] — clipped-surrogate PPO baseline (no simulator gradients).
//! * [`robust`] — robustness harness: action-noise injection, contact
//!   parameter sweeps, the rho trade-off study, and overhead accounting.
//! * [`checkpoint`] / [`curve`] — text artifact formats (exact-roundtrip
//!   checkpoints, learning-curve CSV).
//!
//! All computation is pure and deterministically seeded; file I/O lives in
//! the CLI crate.

pub mod checkpoint;
pub mod curve;
pub mod env;
pub mod eval;
pub mod nets;
pub mod optim;
pub mod params;
pub mod ppo;
pub mod rng;
pub mod robust;
pub mod shac;
