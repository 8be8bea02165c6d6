//! Distributional scalarization of the actor and critic costs, and PCGrad projection.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const SIGMA_FLOOR: f64 = 1e-8;

/// Standardization of one objective: `(J − μ) / σ̂` with `μ = J₀ − z σ̂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveScale {
    pub anchor: f64,
    pub sigma: f64,
    pub z: f64,
    pub mean: f64,
}

impl ObjectiveScale {
    pub fn fit(samples: &[f64], z: f64, what: &str) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Input(format!("calibration of {what} needs at least 2 samples")));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Input(format!("non-finite calibration sample for {what}")));
        }
        let n = samples.len() as f64;
        let anchor = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - anchor).powi(2)).sum::<f64>() / (n - 1.0);
        let mut sigma = var.sqrt();
        if sigma < SIGMA_FLOOR {
            log::warn!("{what} calibration samples have std {sigma:e}; flooring at {SIGMA_FLOOR:e}");
            sigma = SIGMA_FLOOR;
        }
        Ok(Self {
            anchor,
            sigma,
            z,
            mean: anchor - z * sigma,
        })
    }

    pub fn apply(&self, j: f64) -> f64 {
        (j - self.mean) / self.sigma
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarizerParams {
    pub policy: ObjectiveScale,
    pub value: ObjectiveScale,
    /// Stationary calibrations are fitted once, from the untrained functions.
    pub stationary: bool,
}

/// Fits both scales from untrained-function cost samples.
pub fn calibrate(policy_costs: &[f64], value_costs: &[f64], z: f64) -> Result<ScalarizerParams> {
    Ok(ScalarizerParams {
        policy: ObjectiveScale::fit(policy_costs, z, "policy cost")?,
        value: ObjectiveScale::fit(value_costs, z, "value cost")?,
        stationary: true,
    })
}

pub fn scalarize_values(j_pi: f64, j_v: f64, params: &ScalarizerParams) -> f64 {
    params.policy.apply(j_pi) + params.value.apply(j_v)
}

/// Differentiable `((J_π − μ_π)/σ̂_π) + ((J_v − μ_v)/σ̂_v)`.
pub fn scalarize(j_pi: &Tensor, j_v: &Tensor, params: &ScalarizerParams) -> Result<Tensor> {
    let p = &params.policy;
    let v = &params.value;
    j_pi.add_scalar(-p.mean)?
        .scale(1.0 / p.sigma)?
        .add(&j_v.add_scalar(-v.mean)?.scale(1.0 / v.sigma)?)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Symmetric PCGrad: each gradient loses its component along the other's
/// pre-projection direction when the two conflict.
pub fn pcgrad(g1: &[f64], g2: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if g1.len() != g2.len() {
        return Err(Error::dim("pcgrad", &[&[g1.len()], &[g2.len()]]));
    }
    let d = dot(g1, g2);
    if d >= 0.0 {
        return Ok((g1.to_vec(), g2.to_vec()));
    }
    let project = |g: &[f64], other: &[f64]| -> Vec<f64> {
        let n2 = dot(other, other);
        if n2 == 0.0 {
            log::warn!("pcgrad: zero-norm opposing gradient, leaving unchanged");
            return g.to_vec();
        }
        let k = d / n2;
        g.iter().zip(other).map(|(x, o)| x - k * o).collect()
    };
    Ok((project(g1, g2), project(g2, g1)))
}

/// Applies [`pcgrad`] to the concatenation of `ranges` only; other entries pass through.
pub fn pcgrad_on(g1: &[f64], g2: &[f64], ranges: &[Range<usize>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if g1.len() != g2.len() {
        return Err(Error::dim("pcgrad", &[&[g1.len()], &[g2.len()]]));
    }
    let gather = |g: &[f64]| -> Vec<f64> { ranges.iter().flat_map(|r| g[r.clone()].iter().copied()).collect() };
    let (p1, p2) = pcgrad(&gather(g1), &gather(g2))?;
    let mut o1 = g1.to_vec();
    let mut o2 = g2.to_vec();
    let mut at = 0;
    for r in ranges {
        let len = r.len();
        o1[r.clone()].copy_from_slice(&p1[at..at + len]);
        o2[r.clone()].copy_from_slice(&p2[at..at + len]);
        at += len;
    }
    Ok((o1, o2))
}
