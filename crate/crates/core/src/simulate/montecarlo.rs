//! Monte Carlo harnesses for the estimation settings.
//!
//! The global point is fixed at zero without loss of generality, since every
//! estimator here is translation equivariant. Trials run in parallel blocks,
//! each with its own random stream, and block sums are reduced in order.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::analytic::AnalyticParams;
use crate::datagen::orthogonal_design;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, StreamRng};

const BLOCK: usize = 1024;

/// Sum `per_block(rng, trials_in_block)` over blocks of trials, in block order.
fn blocked_sum<F>(trials: usize, seed: u64, width: usize, per_block: F) -> Vec<f64>
where
    F: Fn(&mut StreamRng, usize) -> Vec<f64> + Sync,
{
    let blocks = trials.div_ceil(BLOCK);
    let partial: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let n = BLOCK.min(trials - b * BLOCK);
            let mut rng = stream(seed, b as u64, 0, Purpose::MonteCarlo);
            per_block(&mut rng, n)
        })
        .collect();
    let mut total = vec![0.0; width];
    for p in partial {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

fn gauss(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

fn check_ratios(p: &AnalyticParams, ratios: &[f64]) -> Result<()> {
    for &r in ratios {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::config("r", "r must be in [0,1]"));
        }
        if r == 0.0 && p.n_nonprivate() == 0 {
            return Err(Error::config("r", "must be > 0 when every client is private"));
        }
    }
    Ok(())
}

/// Mean squared error of the ratio-weighted estimator of the global point,
/// for each ratio in `ratios`, evaluated on shared draws.
///
/// Each client's local estimate is its own point plus sample noise of
/// variance `alpha2`; private clients add their own privacy noise of
/// variance `N_p·gamma2` before sending.
pub fn monte_carlo_server_variance_grid(
    p: &AnalyticParams,
    ratios: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if trials == 0 {
        return Err(Error::config("trials", "must be >= 1"));
    }
    check_ratios(p, ratios)?;
    let (tau, alpha) = (p.tau2.sqrt(), p.alpha2().sqrt());
    let privacy_sd = (p.n_p() * p.gamma2).sqrt();
    let (n_np, n_p) = (p.n_nonprivate(), p.n_private);
    let sums = blocked_sum(trials, seed, ratios.len(), |rng, n| {
        let mut acc = vec![0.0; ratios.len()];
        for _ in 0..n {
            let mut sum_np = 0.0;
            let mut sum_p = 0.0;
            for _ in 0..n_np {
                sum_np += tau * gauss(rng) + alpha * gauss(rng);
            }
            for _ in 0..n_p {
                sum_p += tau * gauss(rng) + alpha * gauss(rng) + privacy_sd * gauss(rng);
            }
            for (a, &r) in acc.iter_mut().zip(ratios) {
                let est = (sum_np + r * sum_p) / (n_np as f64 + r * n_p as f64);
                *a += est * est;
            }
        }
        acc
    });
    Ok(sums.into_iter().map(|s| s / trials as f64).collect())
}

/// [`monte_carlo_server_variance_grid`] at a single ratio.
pub fn monte_carlo_server_variance(p: &AnalyticParams, r: f64, trials: usize, seed: u64) -> Result<f64> {
    Ok(monte_carlo_server_variance_grid(p, &[r], trials, seed)?[0])
}

/// Mean squared error of the personalized estimate
/// `(φ̂_j + λθ)/(1+λ)` of one focal client's point, for each λ in the grid.
///
/// `p` describes the whole population including the focal client, whose
/// class is `focal_private`. The global estimate `θ` mixes the two groups
/// with ratio `r`; the focal client's own contribution enters without its
/// privacy noise. Populations that differ only in the focal client's choice
/// (`n_private` one apart) see identical draws for every other client under
/// the same seed.
pub fn lambda_sweep(
    p: &AnalyticParams,
    focal_private: bool,
    r: f64,
    lambda_grid: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if lambda_grid.is_empty() {
        return Err(Error::config("lambda_grid", "must be nonempty"));
    }
    if lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(Error::config("lambda_grid", "values must be finite and >= 0"));
    }
    if trials == 0 {
        return Err(Error::config("trials", "must be >= 1"));
    }
    if (focal_private && p.n_private == 0) || (!focal_private && p.n_nonprivate() == 0) {
        return Err(Error::config("focal_private", "the focal client's class is empty"));
    }
    check_ratios(p, &[r])?;
    let other_np = p.n_nonprivate() - usize::from(!focal_private);
    let other_p = p.n_private - usize::from(focal_private);
    let (tau, alpha) = (p.tau2.sqrt(), p.alpha2().sqrt());
    let privacy_sd = (p.n_p() * p.gamma2).sqrt();
    let weight_total = p.n_np() + r * p.n_p();
    let focal_weight = if focal_private { r } else { 1.0 };

    let sums = blocked_sum(trials, seed, lambda_grid.len(), |rng, n| {
        let mut acc = vec![0.0; lambda_grid.len()];
        for _ in 0..n {
            let focal_point = tau * gauss(rng);
            let focal_noise = alpha * gauss(rng);
            let mut weighted = focal_weight * (focal_point + focal_noise);
            for k in 0..other_np + other_p {
                let x = tau * gauss(rng) + alpha * gauss(rng);
                let w = privacy_sd * gauss(rng);
                weighted += if k < other_np { x } else { r * (x + w) };
            }
            let global_err = weighted / weight_total - focal_point;
            for (a, &lambda) in acc.iter_mut().zip(lambda_grid) {
                // personalized estimate minus the focal point
                let e = (focal_noise + lambda * global_err) / (1.0 + lambda);
                *a += e * e;
            }
        }
        acc
    });
    Ok(lambda_grid
        .iter()
        .zip(sums)
        .map(|(&l, s)| (l, s / trials as f64))
        .collect())
}

/// Mean squared error (trace of the error covariance) of the optimally
/// weighted server estimate in the linear-regression setting.
///
/// Each client has a fixed orthogonal design; every trial redraws client
/// points, response noise and privacy noise, fits least squares locally and
/// aggregates at the optimal ratio.
pub fn monte_carlo_regression_error(p: &AnalyticParams, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::config("trials", "must be >= 1"));
    }
    let (n, d) = (p.samples_per_client, p.dim);
    let r = crate::analytic::optimal_ratio(p)?;
    // least-squares operators (FᵀF)⁻¹Fᵀ, row-major d x n, plus the designs
    let mut designs: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(p.n_clients);
    for j in 0..p.n_clients {
        let f = orthogonal_design(n, d, &mut stream(seed, 0, j as u64, Purpose::Population))?;
        let gram = f.transpose() * &f;
        let inv = gram
            .try_inverse()
            .ok_or_else(|| Error::numeric("singular regression design"))?;
        let op = inv * f.transpose();
        let mut op_rows: Vec<f64> = Vec::with_capacity(d * n);
        for i in 0..d {
            op_rows.extend(op.row(i).iter());
        }
        let mut f_rows: Vec<f64> = Vec::with_capacity(n * d);
        for i in 0..n {
            f_rows.extend(f.row(i).iter());
        }
        designs.push((f_rows, op_rows));
    }
    let (tau, beta) = (p.tau2.sqrt(), p.beta2.sqrt());
    let privacy_sd = (p.n_p() * p.gamma2).sqrt();
    let n_np = p.n_nonprivate();
    let weight_total = p.n_np() + r * p.n_p();

    let sums = blocked_sum(trials, seed, 1, |rng, count| {
        let mut total = 0.0;
        let mut point = vec![0.0; d];
        let mut response = vec![0.0; n];
        let mut est = vec![0.0; d];
        for _ in 0..count {
            est.iter_mut().for_each(|e| *e = 0.0);
            for (j, (f, op)) in designs.iter().enumerate() {
                for v in point.iter_mut() {
                    *v = tau * gauss(rng);
                }
                for (i, y) in response.iter_mut().enumerate() {
                    let row = &f[i * d..(i + 1) * d];
                    *y = row.iter().zip(&point).map(|(a, b)| a * b).sum::<f64>() + beta * gauss(rng);
                }
                let private = j >= n_np;
                let w = if private { r } else { 1.0 };
                for (k, e) in est.iter_mut().enumerate() {
                    let row = &op[k * n..(k + 1) * n];
                    let mut fit = row.iter().zip(&response).map(|(a, b)| a * b).sum::<f64>();
                    if private {
                        fit += privacy_sd * gauss(rng);
                    }
                    *e += w * fit;
                }
            }
            total += est.iter().map(|e| (e / weight_total).powi(2)).sum::<f64>();
        }
        vec![total]
    });
    Ok(sums[0] / trials as f64)
}
