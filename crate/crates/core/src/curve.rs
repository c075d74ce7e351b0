//! Learning-curve records and their CSV form.
//!
//! One row per training update with the schema
//! `episode,env_steps,eval_reward_mean,eval_reward_std,policy_loss,critic_loss,grad_evals,update_wall_ms`.
//! Files start with a `# config_digest=...` comment so every artifact can
//! be traced back to the exact configuration that produced it. CSV output
//! uses '.' decimals, LF line endings, and shortest-roundtrip float
//! formatting, so regeneration is byte-exact.

use thiserror::Error;

pub const CURVE_HEADER: &str =
    "episode,env_steps,eval_reward_mean,eval_reward_std,policy_loss,critic_loss,grad_evals,update_wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub episode: u64,
    pub env_steps: u64,
    pub eval_reward_mean: f64,
    pub eval_reward_std: f64,
    pub policy_loss: f64,
    pub critic_loss: f64,
    /// Policy-gradient (or surrogate-update) evaluations in this update.
    pub grad_evals: u64,
    /// Wall time of the policy-update phase of this update, in ms. The one
    /// column that is not a pure function of (config, seed).
    pub update_wall_ms: f64,
}

/// Shortest-roundtrip decimal form of a float ('.' decimal separator).
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

pub fn curve_to_csv(rows: &[CurveRow], config_digest: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!("# config_digest={config_digest}\n"));
    out.push_str(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.episode,
            r.env_steps,
            fmt_f64(r.eval_reward_mean),
            fmt_f64(r.eval_reward_std),
            fmt_f64(r.policy_loss),
            fmt_f64(r.critic_loss),
            r.grad_evals,
            fmt_f64(r.update_wall_ms),
        ));
    }
    out
}

#[derive(Debug, Error)]
pub enum CurveParseError {
    #[error("missing config digest comment")]
    MissingDigest,
    #[error("missing column {0}")]
    MissingColumn(&'static str),
    #[error("malformed row {line}: {reason}")]
    BadRow { line: usize, reason: String },
}

/// Parse a learning-curve CSV back into rows (used by the overhead report).
/// Tolerates extra columns but requires every schema column by name.
pub fn curve_from_csv(text: &str) -> Result<(String, Vec<CurveRow>), CurveParseError> {
    let mut lines = text.lines().enumerate();
    let digest = loop {
        match lines.next() {
            Some((_, l)) if l.starts_with('#') => {
                if let Some(d) = l.trim_start_matches('#').trim().strip_prefix("config_digest=") {
                    break d.to_string();
                }
            }
            _ => return Err(CurveParseError::MissingDigest),
        }
    };
    let (_, header) = lines
        .next()
        .ok_or(CurveParseError::MissingColumn("episode"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let idx = |name: &'static str| -> Result<usize, CurveParseError> {
        cols.iter()
            .position(|c| *c == name)
            .ok_or(CurveParseError::MissingColumn(name))
    };
    let (i_ep, i_steps, i_mean, i_std, i_pl, i_cl, i_ge, i_wall) = (
        idx("episode")?,
        idx("env_steps")?,
        idx("eval_reward_mean")?,
        idx("eval_reward_std")?,
        idx("policy_loss")?,
        idx("critic_loss")?,
        idx("grad_evals")?,
        idx("update_wall_ms")?,
    );
    let mut rows = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let get = |i: usize| -> Result<&str, CurveParseError> {
            fields.get(i).copied().ok_or(CurveParseError::BadRow {
                line: lineno + 1,
                reason: "too few fields".into(),
            })
        };
        let parse_f = |s: &str| -> Result<f64, CurveParseError> {
            s.parse().map_err(|_| CurveParseError::BadRow {
                line: lineno + 1,
                reason: format!("bad float {s:?}"),
            })
        };
        let parse_u = |s: &str| -> Result<u64, CurveParseError> {
            s.parse().map_err(|_| CurveParseError::BadRow {
                line: lineno + 1,
                reason: format!("bad integer {s:?}"),
            })
        };
        rows.push(CurveRow {
            episode: parse_u(get(i_ep)?)?,
            env_steps: parse_u(get(i_steps)?)?,
            eval_reward_mean: parse_f(get(i_mean)?)?,
            eval_reward_std: parse_f(get(i_std)?)?,
            policy_loss: parse_f(get(i_pl)?)?,
            critic_loss: parse_f(get(i_cl)?)?,
            grad_evals: parse_u(get(i_ge)?)?,
            update_wall_ms: parse_f(get(i_wall)?)?,
        });
    }
    Ok((digest, rows))
}
