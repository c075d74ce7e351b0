//! Declarative run configuration: TOML parsing, validation, and the
//! canonical digest.
//!
//! The digest is a SHA-256 over the canonicalized effective configuration
//! (defaults materialized, CLI overrides applied; keys sorted, numbers in
//! shortest-roundtrip form). Every output file embeds it, and a verifier
//! step recomputes it after writing, so artifacts can always be traced to
//! the exact configuration that produced them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rl_lab_core::checkpoint::Algo;
use rl_lab_core::curve::fmt_f64;
use rl_lab_core::env::{Env, EnvParams};
use rl_lab_core::optim::AsamConfig;
use rl_lab_core::ppo::PpoConfig;
use rl_lab_core::shac::{ShacConfig, ShacMode};

/// Config-level failure; exits with code 2 and a message naming the
/// offending field.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// On-disk layout of the config file. Every section is optional except
/// `environment`; unknown keys are rejected to catch typos.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    environment: String,
    algorithm: Option<String>,
    seeds: Option<Vec<u64>>,
    output_dir: Option<PathBuf>,
    env: Option<EnvOverrides>,
    shac: Option<ShacConfig>,
    asam: Option<AsamConfig>,
    ppo: Option<PpoConfig>,
    sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvOverrides {
    k_e: Option<f64>,
    k_d: Option<f64>,
    mu: Option<f64>,
    dt: Option<f64>,
    horizon: Option<u32>,
}

/// Sweep protocol parameters, with the default grids used throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub lambda_grid: Vec<f64>,
    pub ke_grid: Vec<f64>,
    pub kd_grid: Vec<f64>,
    pub mu_grid: Vec<f64>,
    pub rho_grid: Vec<f64>,
    pub rollouts: u32,
    pub eval_seed: u64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            lambda_grid: vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5],
            ke_grid: vec![100.0, 200.0, 400.0, 800.0, 1600.0, 3200.0],
            kd_grid: vec![1.0, 3.0, 10.0, 30.0, 100.0],
            mu_grid: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            rho_grid: vec![0.05, 0.25, 0.75],
            rollouts: 100,
            eval_seed: 1_000_003,
        }
    }
}

/// Fully resolved configuration: what actually runs.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub environment: Env,
    pub algorithm: Option<Algo>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub env_params: EnvParams,
    pub shac: ShacConfig,
    pub ppo: PpoConfig,
    pub sweep: SweepSection,
}

impl RunConfig {
    /// Parse, apply overrides, materialize defaults, and validate.
    pub fn load(
        path: &Path,
        seed_override: Option<&[u64]>,
        out_override: Option<&Path>,
    ) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str_with_overrides(&text, seed_override, out_override)
    }

    pub fn from_str_with_overrides(
        text: &str,
        seed_override: Option<&[u64]>,
        out_override: Option<&Path>,
    ) -> Result<Self, ConfigError> {
        let file: RunConfigFile =
            toml::from_str(text).map_err(|e| ConfigError(format!("{e}")))?;

        let environment = match Env::from_name(&file.environment) {
            Some(e) => e,
            None => {
                return err(format!(
                    "environment: unknown value {:?} (expected bouncer1d or slider1d)",
                    file.environment
                ))
            }
        };

        let algorithm = match &file.algorithm {
            None => None,
            Some(name) => match Algo::from_name(name) {
                Some(a) => Some(a),
                None => {
                    return err(format!(
                        "algorithm: unknown value {name:?} (expected shac, shac-asam, or ppo)"
                    ))
                }
            },
        };

        // The asam block is required iff the algorithm is shac-asam.
        match (algorithm, &file.asam) {
            (Some(Algo::ShacAsam), None) => {
                return err("asam: block required when algorithm = \"shac-asam\"")
            }
            (Some(Algo::Shac), Some(_)) | (Some(Algo::Ppo), Some(_)) => {
                return err("asam: block only valid when algorithm = \"shac-asam\"")
            }
            _ => {}
        }

        let mut env_params = environment.default_params();
        if let Some(o) = &file.env {
            if let Some(v) = o.k_e {
                env_params.k_e = v;
            }
            if let Some(v) = o.k_d {
                env_params.k_d = v;
            }
            if let Some(v) = o.mu {
                env_params.mu = v;
            }
            if let Some(v) = o.dt {
                env_params.dt = v;
            }
            if let Some(v) = o.horizon {
                env_params.horizon = v;
            }
        }
        if let Err(field) = env_params.validate() {
            return err(format!("env.{field}: invalid value"));
        }

        let mut shac = file.shac.unwrap_or_default();
        shac.mode = if algorithm == Some(Algo::ShacAsam) {
            ShacMode::Asam
        } else {
            ShacMode::Plain
        };
        shac.asam = file.asam.clone();
        let ppo = file.ppo.unwrap_or_default();
        let sweep = file.sweep.unwrap_or_default();

        let seeds = seed_override
            .map(|s| s.to_vec())
            .or(file.seeds)
            .unwrap_or_else(|| vec![0]);
        if seeds.is_empty() {
            return err("seeds: list must not be empty");
        }
        let output_dir = out_override
            .map(Path::to_path_buf)
            .or(file.output_dir)
            .unwrap_or_else(|| PathBuf::from("runs"));

        let cfg = Self {
            environment,
            algorithm,
            seeds,
            output_dir,
            env_params,
            shac,
            ppo,
            sweep,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.shac;
        if s.lanes < 1 {
            return err("shac.lanes: must be at least 1");
        }
        if s.horizon < 1 || s.horizon as u32 > self.env_params.horizon {
            return err("shac.horizon: must satisfy 1 <= h <= env.horizon");
        }
        if !(s.gamma > 0.0 && s.gamma <= 1.0) {
            return err("shac.gamma: must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&s.td_lambda) {
            return err("shac.td_lambda: must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&s.target_alpha) {
            return err("shac.target_alpha: must lie in [0, 1]");
        }
        if s.actor_lr <= 0.0 || s.critic_lr <= 0.0 || s.actor_lr_end <= 0.0 {
            return err("shac.actor_lr/critic_lr: must be positive");
        }
        if s.episodes < 1 || s.critic_epochs < 1 || s.eval_every < 1 || s.eval_rollouts < 1 {
            return err("shac.episodes/critic_epochs/eval_every/eval_rollouts: must be positive");
        }
        if let Some(a) = &s.asam {
            if !(a.rho > 0.0) {
                return err("asam.rho: must be positive");
            }
            if a.weight_decay < 0.0 {
                return err("asam.weight_decay: must be nonnegative");
            }
        }
        let p = &self.ppo;
        if p.clip_ratio <= 0.0 {
            return err("ppo.clip_ratio: must be positive");
        }
        if !(0.0..=1.0).contains(&p.gae_lambda) {
            return err("ppo.gae_lambda: must lie in [0, 1]");
        }
        if !(p.gamma > 0.0 && p.gamma <= 1.0) {
            return err("ppo.gamma: must lie in (0, 1]");
        }
        if p.lanes < 1 || p.rollout_steps < 1 || p.epochs < 1 || p.minibatch_count < 1 {
            return err("ppo.lanes/rollout_steps/epochs/minibatch_count: must be positive");
        }
        if p.total_env_steps < (p.lanes * p.rollout_steps) as u64 {
            return err("ppo.total_env_steps: budget below lanes * rollout_steps");
        }
        let w = &self.sweep;
        if w.lambda_grid.is_empty() || w.lambda_grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return err("sweep.lambda_grid: values must lie in [0, 1]");
        }
        for (name, grid) in [
            ("sweep.ke_grid", &w.ke_grid),
            ("sweep.kd_grid", &w.kd_grid),
            ("sweep.mu_grid", &w.mu_grid),
            ("sweep.rho_grid", &w.rho_grid),
        ] {
            if grid.is_empty() {
                return err(format!("{name}: must not be empty"));
            }
            if grid.windows(2).any(|p| p[0] >= p[1]) {
                return err(format!("{name}: values must be strictly increasing"));
            }
        }
        if w.rollouts == 0 {
            return err("sweep.rollouts: must be positive");
        }
        Ok(())
    }

    /// SHA-256 (first 16 hex chars) of the canonicalized effective config.
    pub fn digest(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut canon = String::new();
        canonicalize(&value, &mut canon);
        let mut hasher = Sha256::new();
        hasher.update(canon.as_bytes());
        let hex = hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>();
        hex[..16].to_string()
    }
}

/// Deterministic text form: sorted keys, shortest-roundtrip numbers.
fn canonicalize(value: &toml::Value, out: &mut String) {
    match value {
        toml::Value::Table(t) => {
            let mut keys: Vec<&String> = t.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{k:?}:"));
                canonicalize(&t[*k], out);
            }
            out.push('}');
        }
        toml::Value::Array(a) => {
            out.push('[');
            for (i, v) in a.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                canonicalize(v, out);
            }
            out.push(']');
        }
        toml::Value::String(s) => out.push_str(&format!("{s:?}")),
        toml::Value::Integer(i) => out.push_str(&i.to_string()),
        toml::Value::Float(f) => out.push_str(&fmt_f64(*f)),
        toml::Value::Boolean(b) => out.push_str(&b.to_string()),
        toml::Value::Datetime(d) => out.push_str(&d.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
environment = "bouncer1d"
algorithm = "shac"
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_str_with_overrides(MINIMAL, None, None).unwrap();
        assert_eq!(cfg.environment, Env::Bouncer1d);
        assert_eq!(cfg.algorithm, Some(Algo::Shac));
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.shac.lanes, 32);
        assert_eq!(cfg.env_params.k_e, 400.0);
        assert_eq!(cfg.sweep.lambda_grid.len(), 11);
    }

    #[test]
    fn missing_asam_block_is_a_config_error() {
        let text = "environment = \"bouncer1d\"\nalgorithm = \"shac-asam\"\n";
        let e = RunConfig::from_str_with_overrides(text, None, None).unwrap_err();
        assert!(e.0.contains("asam"), "{e}");
    }

    #[test]
    fn stray_asam_block_is_a_config_error() {
        let text = "environment = \"bouncer1d\"\nalgorithm = \"shac\"\n[asam]\nrho = 0.5\n";
        let e = RunConfig::from_str_with_overrides(text, None, None).unwrap_err();
        assert!(e.0.contains("asam"), "{e}");
    }

    #[test]
    fn invalid_fields_are_named() {
        let text = "environment = \"slider1d\"\n[env]\ndt = 0.0\n";
        let e = RunConfig::from_str_with_overrides(text, None, None).unwrap_err();
        assert!(e.0.contains("env.dt"), "{e}");

        let text = "environment = \"slider1d\"\n[shac]\ngamma = 1.5\n";
        let e = RunConfig::from_str_with_overrides(text, None, None).unwrap_err();
        assert!(e.0.contains("shac.gamma"), "{e}");

        let text = "environment = \"slider1d\"\n[sweep]\nmu_grid = [0.5, 0.5]\n";
        let e = RunConfig::from_str_with_overrides(text, None, None).unwrap_err();
        assert!(e.0.contains("sweep.mu_grid"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "environment = \"bouncer1d\"\ntypo_field = 3\n";
        assert!(RunConfig::from_str_with_overrides(text, None, None).is_err());
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = RunConfig::from_str_with_overrides(MINIMAL, None, None).unwrap();
        let b = RunConfig::from_str_with_overrides(MINIMAL, None, None).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 16);
        let c = RunConfig::from_str_with_overrides(MINIMAL, Some(&[1]), None).unwrap();
        assert_ne!(a.digest(), c.digest());
        // Formatting-only differences canonicalize away.
        let spaced = "environment   =   \"bouncer1d\"\nalgorithm = \"shac\"";
        let d = RunConfig::from_str_with_overrides(spaced, None, None).unwrap();
        assert_eq!(a.digest(), d.digest());
    }

    #[test]
    fn seed_and_out_overrides_apply() {
        let cfg =
            RunConfig::from_str_with_overrides(MINIMAL, Some(&[7, 8]), Some(Path::new("/tmp/x")))
                .unwrap();
        assert_eq!(cfg.seeds, vec![7, 8]);
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
    }
}
