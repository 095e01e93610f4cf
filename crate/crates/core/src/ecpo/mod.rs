//! Early-clipped group policy optimisation.

mod posttrain;

pub use posttrain::{
    posttrain, posttrain_step, EcpoConfig, PostTrainer, ReferenceMode, RewardSource, RlData,
    StepMetrics,
};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{Array, Graph, Var};
use crate::Scalar;

/// Groups whose population std falls below this get all-zero advantages.
pub const DEGENERATE_STD: f64 = 1e-8;

/// `(r - mean) / popstd`, or zeros for a degenerate group.
pub fn normalize_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return invalid(format!(
            "advantage group needs at least 2 rewards, got {}",
            rewards.len()
        ));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < DEGENERATE_STD {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `max(pi / (1 + eps + delta), pi_old)`.
pub fn early_clipped_old(pi: f64, pi_old: f64, eps: f64, delta: f64) -> f64 {
    (pi / (1.0 + eps + delta)).max(pi_old)
}

/// One clipped surrogate term `min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)`.
pub fn surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipParams {
    pub eps: f64,
    pub delta: f64,
}

impl ClipParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0) || self.delta.is_nan() || self.delta <= 0.0 {
            return invalid(format!("need eps in (0, 1) and delta > 0, got {self:?}"));
        }
        Ok(())
    }
}

/// Graph nodes of a surrogate evaluation.
pub struct Surrogate {
    /// Mean surrogate over the group (to maximise).
    pub objective: Var,
    pub ratio: Var,
    /// Fraction of terms where the clipped branch is the minimum.
    pub clip_fraction: f64,
}

fn surrogate_graph<T: Scalar>(
    g: &mut Graph<T>,
    log_pi: Var,
    log_ref: Var,
    adv: &[f64],
    eps: f64,
) -> Result<Surrogate> {
    let n = adv.len();
    let diff = g.sub(log_pi, log_ref)?;
    let ratio = g.exp(diff)?;
    let a = g.constant(Array::matrix(
        n,
        1,
        adv.iter().map(|&x| T::of(x)).collect(),
    )?)?;
    let unclipped = g.mul(ratio, a)?;
    let clipped = g.clamp(ratio, T::of(1.0 - eps), T::of(1.0 + eps))?;
    let clipped = g.mul(clipped, a)?;
    let clip_active = g
        .value(unclipped)
        .data()
        .iter()
        .zip(g.value(clipped).data())
        .filter(|(u, c)| c < u)
        .count();
    let terms = g.minimum(unclipped, clipped)?;
    let objective = g.mean(terms)?;
    Ok(Surrogate {
        objective,
        ratio,
        clip_fraction: clip_active as f64 / n as f64,
    })
}

fn check_inputs<T: Scalar>(g: &Graph<T>, log_pi: Var, log_old: &[f64], adv: &[f64]) -> Result<()> {
    if g.shape(log_pi) != [adv.len(), 1] || log_old.len() != adv.len() || adv.is_empty() {
        return invalid("surrogate needs [n, 1] log-probs and n old log-probs and advantages");
    }
    Ok(())
}

/// ECPO objective from sequence log-probabilities `[n, 1]` under the current
/// policy, the sampling policy's log-probabilities and advantages. The early
/// clip is applied in log space: `log pi'_old = max(sg(log pi) - ln(1+eps+delta), log pi_old)`.
pub fn ecpo_objective<T: Scalar>(
    g: &mut Graph<T>,
    log_pi: Var,
    log_old: &[f64],
    adv: &[f64],
    clip: ClipParams,
) -> Result<Surrogate> {
    clip.validate()?;
    check_inputs(g, log_pi, log_old, adv)?;
    let n = adv.len();
    let sg = g.stop_gradient(log_pi);
    let capped = g.add_const(sg, T::of(-(1.0 + clip.eps + clip.delta).ln()))?;
    let old = g.constant(Array::matrix(
        n,
        1,
        log_old.iter().map(|&x| T::of(x)).collect(),
    )?)?;
    let log_ref = g.maximum(capped, old)?;
    let s = surrogate_graph(g, log_pi, log_ref, adv, clip.eps)?;
    let bound = 1.0 + clip.eps + clip.delta;
    let worst = g
        .value(s.ratio)
        .data()
        .iter()
        .map(|r| r.to_f64().unwrap_or(f64::NAN))
        .fold(f64::NEG_INFINITY, f64::max);
    // exp/ln round-trips cost a few ulps of the working precision.
    let tol = 16.0 * T::epsilon().to_f64().unwrap_or(1e-6);
    if !(worst <= bound * (1.0 + tol)) {
        return Err(Error::Invariant(format!(
            "early-clipped ratio {worst} exceeds {bound}"
        )));
    }
    Ok(s)
}

/// The unmodified clipped objective with `pi_old` as the reference.
pub fn grpo_objective<T: Scalar>(
    g: &mut Graph<T>,
    log_pi: Var,
    log_old: &[f64],
    adv: &[f64],
    eps: f64,
) -> Result<Surrogate> {
    check_inputs(g, log_pi, log_old, adv)?;
    let n = adv.len();
    let old = g.constant(Array::matrix(
        n,
        1,
        log_old.iter().map(|&x| T::of(x)).collect(),
    )?)?;
    surrogate_graph(g, log_pi, old, adv, eps)
}
