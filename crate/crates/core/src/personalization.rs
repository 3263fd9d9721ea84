//! Ditto personalization: a proximal term pulls each client's personal model
//! toward the global model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{local_gradient, LocalDataset, LossKind, ModelVector, Personalization};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DittoConfig {
    /// Regularization strength for private clients.
    pub lambda_p: f64,
    /// Regularization strength for opted-out clients.
    pub lambda_np: f64,
    /// Personalized learning rate.
    pub eta_p: f64,
}

impl DittoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_p >= 0.0 && self.lambda_p.is_finite()) {
            return Err(Error::config("ditto.lambda_p", "must be >= 0"));
        }
        if !(self.lambda_np >= 0.0 && self.lambda_np.is_finite()) {
            return Err(Error::config("ditto.lambda_np", "must be >= 0"));
        }
        if !(self.eta_p > 0.0 && self.eta_p.is_finite()) {
            return Err(Error::config("ditto.eta_p", "must be > 0"));
        }
        Ok(())
    }

    pub fn for_client(&self, is_private: bool) -> Personalization {
        Personalization {
            lambda: if is_private { self.lambda_p } else { self.lambda_np },
            learning_rate: self.eta_p,
        }
    }
}

/// `θ_j − η_p (∇f_j(θ_j) + λ(θ_j − θ_global))`
pub fn ditto_step(
    theta_j: &ModelVector,
    theta_global: &ModelVector,
    data: &LocalDataset,
    kind: LossKind,
    lambda: f64,
    eta_p: f64,
) -> Result<ModelVector> {
    theta_global.ensure_dim(theta_j.dim())?;
    let grad = local_gradient(theta_j, data, kind)?;
    let mut next = theta_j.clone();
    for ((t, g), w) in next
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(theta_global.as_slice())
    {
        *t -= eta_p * (g + lambda * (*t - w));
    }
    if !next.is_finite() {
        return Err(Error::numeric("personalized step"));
    }
    Ok(next)
}

/// Minimizer of `½‖θ − φ̂_j‖² + (λ/2)‖θ − θ_global‖²`.
pub fn ditto_closed_form(
    phi_hat_j: &ModelVector,
    theta_global: &ModelVector,
    lambda: f64,
) -> Result<ModelVector> {
    theta_global.ensure_dim(phi_hat_j.dim())?;
    let denom = 1.0 + lambda;
    Ok(ModelVector::new(
        phi_hat_j
            .as_slice()
            .iter()
            .zip(theta_global.as_slice())
            .map(|(p, g)| (p + lambda * g) / denom)
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn pts(xs: &[f64]) -> LocalDataset {
        LocalDataset::PointSamples {
            observations: xs.to_vec(),
        }
    }

    #[test]
    fn zero_lambda_is_a_plain_gradient_step() {
        let d = pts(&[1.0, 2.0]);
        let t = ModelVector::scalar(4.0);
        let out = ditto_step(&t, &ModelVector::scalar(-9.0), &d, LossKind::PointEstimation, 0.0, 0.5)
            .unwrap();
        assert_eq!(out.as_slice(), &[4.0 - 0.5 * 2.5]);
    }

    #[test]
    fn fixed_point_at_shared_minimizer() {
        let d = pts(&[3.0]);
        let t = ModelVector::scalar(3.0);
        let out = ditto_step(&t, &t, &d, LossKind::PointEstimation, 2.0, 0.3).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn closed_form_examples() {
        let phi = ModelVector::scalar(4.0);
        let g = ModelVector::scalar(0.0);
        assert_eq!(ditto_closed_form(&phi, &g, 0.0).unwrap(), phi);
        assert_eq!(ditto_closed_form(&phi, &g, 1.0).unwrap().as_slice(), &[2.0]);
        let g = ModelVector::scalar(7.0);
        let far = ditto_closed_form(&phi, &g, 1e12).unwrap();
        assert!((far.as_slice()[0] - 7.0).abs() / 7.0 < 1e-10);
    }

    #[test]
    fn tuned_step_lands_on_closed_form() {
        let mut rng = stream(11, 0, 0, Purpose::MonteCarlo);
        for _ in 0..100 {
            let n = rng.random_range(1..10);
            let xs: Vec<f64> = (0..n).map(|_| 3.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
            let lambda: f64 = rng.random_range(0.0..5.0);
            let start = ModelVector::scalar(10.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
            let global = ModelVector::scalar(StandardNormal.sample(&mut rng));
            let data = pts(&xs);
            let step = ditto_step(&start, &global, &data, LossKind::PointEstimation, lambda, 1.0 / (1.0 + lambda))
                .unwrap();
            let phi = data.local_estimate().unwrap();
            let cf = ditto_closed_form(&phi, &global, lambda).unwrap();
            assert!((step.as_slice()[0] - cf.as_slice()[0]).abs() < 1e-12);
            // convex combination of the two anchors
            let (a, b) = (phi.as_slice()[0], global.as_slice()[0]);
            let x = cf.as_slice()[0];
            assert!(x >= a.min(b) - 1e-12 && x <= a.max(b) + 1e-12);
        }
    }

    #[test]
    fn small_steps_contract_to_closed_form() {
        let mut rng = stream(12, 0, 0, Purpose::MonteCarlo);
        for _ in 0..100 {
            let d = rng.random_range(1..4);
            let n = d + rng.random_range(1..6);
            let data = LocalDataset::RegressionSamples {
                features: (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect(),
                dim: d,
                responses: (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
            };
            let global = ModelVector::new((0..d).map(|_| StandardNormal.sample(&mut rng)).collect());
            let lambda: f64 = rng.random_range(0.1..3.0);
            // fixed point solves (FᵀF/n + λI) θ = Fᵀx/n + λ θ_g
            let LocalDataset::RegressionSamples { features, responses, .. } = &data else {
                unreachable!()
            };
            let f = nalgebra::DMatrix::from_row_slice(n, d, features);
            let x = nalgebra::DVector::from_column_slice(responses);
            let g = nalgebra::DVector::from_column_slice(global.as_slice());
            let a = f.transpose() * &f / n as f64 + nalgebra::DMatrix::identity(d, d) * lambda;
            let rhs = f.transpose() * x / n as f64 + g * lambda;
            let target = a.clone().lu().solve(&rhs).unwrap();
            let lmax = a.symmetric_eigenvalues().max();
            let mut theta = ModelVector::zeros(d);
            for _ in 0..20_000 {
                theta = ditto_step(&theta, &global, &data, LossKind::LinearRegression, lambda, 1.0 / lmax)
                    .unwrap();
            }
            for j in 0..d {
                assert!((theta.as_slice()[j] - target[j]).abs() < 1e-8);
            }
        }
    }
}
