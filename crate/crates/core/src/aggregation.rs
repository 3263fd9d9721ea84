//! Two-step server aggregation: per-group means, the noised private mean,
//! and their ratio-weighted combination.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::ModelVector;
use crate::privacy::gaussian_noise_vector;

/// Clipped updates of one round, split by privacy class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundCohort {
    pub private_updates: Vec<ModelVector>,
    pub nonprivate_updates: Vec<ModelVector>,
    pub indicators: Vec<bool>,
}

impl RoundCohort {
    pub fn n_private(&self) -> usize {
        self.private_updates.len()
    }

    pub fn n_nonprivate(&self) -> usize {
        self.nonprivate_updates.len()
    }
}

/// Coordinatewise mean. `None` when the group is empty.
pub fn group_mean(updates: &[ModelVector]) -> Result<Option<ModelVector>> {
    let Some(first) = updates.first() else {
        return Ok(None);
    };
    let mut acc = ModelVector::zeros(first.dim());
    for u in updates {
        acc.add_scaled(1.0, u)?;
    }
    Ok(Some(acc.scaled(1.0 / updates.len() as f64)))
}

/// Private-group mean plus `N(0, (z·S/N_p)² I)`.
pub fn dp_group_mean<R: Rng + ?Sized>(
    updates: &[ModelVector],
    clip_norm: f64,
    z: f64,
    rng: &mut R,
) -> Result<Option<ModelVector>> {
    for u in updates {
        if u.norm() > clip_norm + 1e-9 {
            return Err(Error::ContractViolation(format!(
                "update norm {} exceeds clip norm {clip_norm}",
                u.norm()
            )));
        }
    }
    let Some(mut mean) = group_mean(updates)? else {
        return Ok(None);
    };
    let std = z * clip_norm / updates.len() as f64;
    let noise = gaussian_noise_vector(mean.dim(), std, rng);
    mean.add_scaled(1.0, &noise)?;
    Ok(Some(mean))
}

/// Weights `(w_np, w_p)` given to the two group means. An absent group gets
/// weight zero and the other is renormalized.
pub fn combine_weights(n_np: usize, n_p: usize, r: f64) -> Result<(f64, f64)> {
    let wn = n_np as f64;
    let wp = r * n_p as f64;
    let total = wn + wp;
    if total <= 0.0 {
        return Err(Error::RoundSkipped);
    }
    Ok((wn / total, wp / total))
}

/// `(N_np·Δ_np + r·N_p·Δ_p) / (N_np + r·N_p)`.
pub fn feo2_combine(
    delta_np: Option<&ModelVector>,
    delta_p: Option<&ModelVector>,
    n_np: usize,
    n_p: usize,
    r: f64,
) -> Result<ModelVector> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::config("ratio", "r must be in [0,1]"));
    }
    let n_np = if delta_np.is_some() { n_np } else { 0 };
    let n_p = if delta_p.is_some() { n_p } else { 0 };
    let (w_np, w_p) = combine_weights(n_np, n_p, r)?;
    match (delta_np, delta_p) {
        (Some(a), Some(b)) => {
            let mut out = a.scaled(w_np);
            if w_p != 0.0 {
                out.add_scaled(w_p, b)?;
            }
            Ok(out)
        }
        (Some(a), None) => Ok(a.clone()),
        (None, Some(b)) => Ok(b.clone()),
        (None, None) => Err(Error::RoundSkipped),
    }
}

/// `theta + lr·delta`.
pub fn apply_update(theta: &ModelVector, delta: &ModelVector, lr: f64) -> Result<ModelVector> {
    let mut out = theta.clone();
    out.add_scaled(lr, delta)?;
    Ok(out)
}
