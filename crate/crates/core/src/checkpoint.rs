//! Exact-roundtrip text checkpoints.
//!
//! One file per run: a header (format version, architecture, environment,
//! algorithm, seed, config digest) followed by named parameter sections,
//! one decimal value per line. Values are printed in shortest-roundtrip
//! form, so save -> load -> save is byte-identical.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::fmt_f64;
use crate::env::Env;
use crate::nets::{CriticNet, MlpDims, PolicyNet, HIDDEN};
use crate::shac::TrainArtifacts;

pub const CHECKPOINT_MAGIC: &str = "rl-lab checkpoint v1";

/// Algorithm tag used across checkpoints, sweep tables, and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Algo {
    #[serde(rename = "shac")]
    Shac,
    #[serde(rename = "shac-asam")]
    ShacAsam,
    #[serde(rename = "ppo")]
    Ppo,
}

impl Algo {
    pub fn name(&self) -> &'static str {
        match self {
            Algo::Shac => "shac",
            Algo::ShacAsam => "shac-asam",
            Algo::Ppo => "ppo",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "shac" => Some(Algo::Shac),
            "shac-asam" => Some(Algo::ShacAsam),
            "ppo" => Some(Algo::Ppo),
            _ => None,
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic line)")]
    BadMagic,
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("unknown environment {0:?}")]
    UnknownEnv(String),
    #[error("unknown algorithm {0:?}")]
    UnknownAlgo(String),
    #[error("section {name}: expected {expected} values, found {found}")]
    BadSection {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("bad value on line {0}")]
    BadValue(usize),
    #[error("missing section {0}")]
    MissingSection(&'static str),
}

/// Parsed checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub env: Env,
    pub algo: Algo,
    pub seed: u64,
    pub config_digest: String,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: (usize, usize),
    pub policy: Vec<f64>,
    pub critic: Vec<f64>,
    pub critic_target: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_artifacts(
        art: &TrainArtifacts,
        env: Env,
        algo: Algo,
        seed: u64,
        config_digest: &str,
    ) -> Self {
        let dims = art.policy.dims();
        Self {
            env,
            algo,
            seed,
            config_digest: config_digest.to_string(),
            obs_dim: dims.input,
            act_dim: dims.output,
            hidden: (dims.h1, dims.h2),
            policy: art.policy.params.values().to_vec(),
            critic: art.critic.params.values().to_vec(),
            critic_target: art
                .critic_target
                .as_ref()
                .map(|c| c.params.values().to_vec()),
        }
    }

    fn policy_dims(&self) -> MlpDims {
        MlpDims {
            input: self.obs_dim,
            h1: self.hidden.0,
            h2: self.hidden.1,
            output: self.act_dim,
        }
    }

    /// Rebuild the policy network from the stored parameters.
    pub fn policy_net(&self) -> PolicyNet {
        let dims = self.policy_dims();
        let template = PolicyNet::with_dims(dims, 0);
        let params = crate::params::ParamVector::from_values(
            template.params.layout().clone(),
            self.policy.clone(),
        );
        PolicyNet::from_params(params, dims)
    }

    pub fn critic_net(&self) -> CriticNet {
        let dims = MlpDims {
            input: self.obs_dim,
            h1: self.hidden.0,
            h2: self.hidden.1,
            output: 1,
        };
        let template = CriticNet::with_dims(dims, 0);
        let params = crate::params::ParamVector::from_values(
            template.params.layout().clone(),
            self.critic.clone(),
        );
        CriticNet::from_params(params, dims)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        out.push_str(&format!("env={}\n", self.env.name()));
        out.push_str(&format!("algo={}\n", self.algo.name()));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("config_digest={}\n", self.config_digest));
        out.push_str(&format!(
            "arch=obs:{},act:{},hidden:{}x{}\n",
            self.obs_dim, self.act_dim, self.hidden.0, self.hidden.1
        ));
        let section = |name: &str, values: &[f64], out: &mut String| {
            out.push_str(&format!("section={} len={}\n", name, values.len()));
            for v in values {
                out.push_str(&fmt_f64(*v));
                out.push('\n');
            }
        };
        section("policy", &self.policy, &mut out);
        section("critic", &self.critic, &mut out);
        if let Some(t) = &self.critic_target {
            section("critic_target", t, &mut out);
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self, CheckpointError> {
        let mut lines = text.lines().enumerate();
        let (_, magic) = lines.next().ok_or(CheckpointError::BadMagic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut header = std::collections::HashMap::new();
        let mut pending_section: Option<(String, usize)> = None;
        for (lineno, line) in lines.by_ref() {
            if let Some(rest) = line.strip_prefix("section=") {
                let mut parts = rest.split_whitespace();
                let name = parts
                    .next()
                    .ok_or_else(|| CheckpointError::BadHeader(line.to_string()))?;
                let len = parts
                    .next()
                    .and_then(|s| s.strip_prefix("len="))
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| CheckpointError::BadHeader(line.to_string()))?;
                pending_section = Some((name.to_string(), len));
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::BadHeader(line.to_string()))?;
            header.insert(k.to_string(), v.to_string());
            let _ = lineno;
        }
        let env_name = header
            .get("env")
            .ok_or_else(|| CheckpointError::BadHeader("missing env".into()))?;
        let env =
            Env::from_name(env_name).ok_or_else(|| CheckpointError::UnknownEnv(env_name.clone()))?;
        let algo_name = header
            .get("algo")
            .ok_or_else(|| CheckpointError::BadHeader("missing algo".into()))?;
        let algo = Algo::from_name(algo_name)
            .ok_or_else(|| CheckpointError::UnknownAlgo(algo_name.clone()))?;
        let seed = header
            .get("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CheckpointError::BadHeader("missing seed".into()))?;
        let config_digest = header
            .get("config_digest")
            .ok_or_else(|| CheckpointError::BadHeader("missing config_digest".into()))?
            .clone();
        let arch = header
            .get("arch")
            .ok_or_else(|| CheckpointError::BadHeader("missing arch".into()))?;
        let (obs_dim, act_dim, hidden) = parse_arch(arch)
            .ok_or_else(|| CheckpointError::BadHeader(format!("bad arch {arch:?}")))?;

        let mut sections: std::collections::HashMap<String, Vec<f64>> = Default::default();
        while let Some((name, len)) = pending_section.take() {
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                let (lineno, line) = lines.next().ok_or(CheckpointError::BadSection {
                    name: name.clone(),
                    expected: len,
                    found: values.len(),
                })?;
                values.push(
                    line.parse()
                        .map_err(|_| CheckpointError::BadValue(lineno + 1))?,
                );
            }
            sections.insert(name, values);
            match lines.next() {
                Some((_, line)) if line == "end" => break,
                Some((_, line)) if line.starts_with("section=") => {
                    let rest = line.strip_prefix("section=").unwrap();
                    let mut parts = rest.split_whitespace();
                    let name = parts
                        .next()
                        .ok_or_else(|| CheckpointError::BadHeader(line.to_string()))?;
                    let len = parts
                        .next()
                        .and_then(|s| s.strip_prefix("len="))
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| CheckpointError::BadHeader(line.to_string()))?;
                    pending_section = Some((name.to_string(), len));
                }
                other => {
                    return Err(CheckpointError::BadHeader(format!(
                        "expected section or end, got {other:?}"
                    )))
                }
            }
        }
        let policy = sections
            .remove("policy")
            .ok_or(CheckpointError::MissingSection("policy"))?;
        let critic = sections
            .remove("critic")
            .ok_or(CheckpointError::MissingSection("critic"))?;
        let critic_target = sections.remove("critic_target");
        Ok(Self {
            env,
            algo,
            seed,
            config_digest,
            obs_dim,
            act_dim,
            hidden,
            policy,
            critic,
            critic_target,
        })
    }
}

fn parse_arch(s: &str) -> Option<(usize, usize, (usize, usize))> {
    // obs:2,act:1,hidden:64x64
    let mut obs = None;
    let mut act = None;
    let mut hidden = None;
    for part in s.split(',') {
        let (k, v) = part.split_once(':')?;
        match k {
            "obs" => obs = v.parse().ok(),
            "act" => act = v.parse().ok(),
            "hidden" => {
                let (a, b) = v.split_once('x')?;
                hidden = Some((a.parse().ok()?, b.parse().ok()?));
            }
            _ => return None,
        }
    }
    Some((obs?, act?, hidden?))
}

/// Architecture sanity check used by the sweep loader: an evaluation can
/// only use checkpoints whose policy matches the target environment.
pub fn compatible_with_env(ck: &Checkpoint, env: &Env) -> bool {
    ck.env == *env
        && ck.obs_dim == env.obs_dim()
        && ck.act_dim == env.action_dim()
        && ck.hidden == (HIDDEN[0], HIDDEN[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Env;
    use crate::shac::{train, ShacConfig};

    fn tiny_artifacts() -> TrainArtifacts {
        let env = Env::Bouncer1d;
        let cfg = ShacConfig {
            lanes: 2,
            horizon: 4,
            episodes: 1,
            critic_epochs: 1,
            eval_every: 10,
            eval_rollouts: 1,
            ..Default::default()
        };
        train(&env, &env.default_params(), &cfg, 7).unwrap()
    }

    #[test]
    fn roundtrip_is_byte_identical_and_exact() {
        let art = tiny_artifacts();
        let ck = Checkpoint::from_artifacts(&art, Env::Bouncer1d, Algo::Shac, 7, "d1gest");
        let text = ck.to_text();
        let parsed = Checkpoint::parse(&text).unwrap();
        assert_eq!(parsed.to_text(), text);
        for (a, b) in parsed.policy.iter().zip(ck.policy.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let net = parsed.policy_net();
        assert_eq!(net.params.values(), art.policy.params.values());
        assert!(parsed.critic_target.is_some());
    }

    #[test]
    fn env_mismatch_is_detectable() {
        let art = tiny_artifacts();
        let ck = Checkpoint::from_artifacts(&art, Env::Bouncer1d, Algo::Shac, 7, "x");
        assert!(compatible_with_env(&ck, &Env::Bouncer1d));
        // Same dims but a different environment name still mismatches.
        assert!(!compatible_with_env(&ck, &Env::Slider1d));
    }

    #[test]
    fn malformed_input_is_rejected() {
        assert!(matches!(
            Checkpoint::parse("not a checkpoint"),
            Err(CheckpointError::BadMagic)
        ));
        let art = tiny_artifacts();
        let ck = Checkpoint::from_artifacts(&art, Env::Bouncer1d, Algo::Ppo, 0, "x");
        let text = ck.to_text().replace("algo=ppo", "algo=nope");
        assert!(matches!(
            Checkpoint::parse(&text),
            Err(CheckpointError::UnknownAlgo(_))
        ));
    }
}
