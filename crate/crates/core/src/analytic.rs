//! Closed-form results for federated point estimation and isotropic linear
//! regression: optimal mixing ratio, server-side variances, performance
//! gaps, optimal personalization strengths and the Bayes-optimal estimators
//! they are checked against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelVector;

/// Stand-in for an unbounded optimal lambda in simulations.
pub const LAMBDA_CAP: f64 = 1e6;

/// Scalar model parameters of the estimation setup.
///
/// Observation noise per sample is `beta2`, so a client's sample mean has
/// variance `alpha2 = beta2 / n_s` around its own point; client points
/// scatter with variance `tau2` around the global point; the private-group
/// aggregate carries extra variance `gamma2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticParams {
    pub n_clients: usize,
    pub n_private: usize,
    pub samples_per_client: usize,
    pub dim: usize,
    pub beta2: f64,
    pub tau2: f64,
    pub gamma2: f64,
}

impl AnalyticParams {
    pub fn new(
        n_clients: usize,
        n_private: usize,
        samples_per_client: usize,
        dim: usize,
        beta2: f64,
        tau2: f64,
        gamma2: f64,
    ) -> Result<Self> {
        let p = AnalyticParams {
            n_clients,
            n_private,
            samples_per_client,
            dim,
            beta2,
            tau2,
            gamma2,
        };
        p.validate()?;
        Ok(p)
    }

    /// Parameterize directly by `alpha2` (one sample per client, `beta2 = alpha2`).
    pub fn from_variances(
        n_clients: usize,
        n_private: usize,
        alpha2: f64,
        tau2: f64,
        gamma2: f64,
    ) -> Result<Self> {
        Self::new(n_clients, n_private, 1, 1, alpha2, tau2, gamma2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::config("N", "must be >= 1"));
        }
        if self.n_private > self.n_clients {
            return Err(Error::config("N_p", "must be in [0, N]"));
        }
        if self.samples_per_client == 0 {
            return Err(Error::config("n_s", "must be >= 1"));
        }
        if self.dim == 0 {
            return Err(Error::config("d", "must be >= 1"));
        }
        for (k, v) in [("beta2", self.beta2), ("tau2", self.tau2), ("gamma2", self.gamma2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn with_n_private(&self, n_private: usize) -> Self {
        AnalyticParams { n_private, ..*self }
    }

    pub fn with_gamma2(&self, gamma2: f64) -> Self {
        AnalyticParams { gamma2, ..*self }
    }

    pub fn n(&self) -> f64 {
        self.n_clients as f64
    }

    pub fn n_p(&self) -> f64 {
        self.n_private as f64
    }

    pub fn n_nonprivate(&self) -> usize {
        self.n_clients - self.n_private
    }

    pub fn n_np(&self) -> f64 {
        self.n_nonprivate() as f64
    }

    pub fn rho_np(&self) -> f64 {
        self.n_np() / self.n()
    }

    pub fn alpha2(&self) -> f64 {
        self.beta2 / self.samples_per_client as f64
    }

    pub fn sigma_c2(&self) -> f64 {
        self.alpha2() + self.tau2
    }

    pub fn sigma_p2(&self) -> f64 {
        self.sigma_c2() + self.n_p() * self.gamma2
    }

    /// `ϒ² = τ²/α²`
    pub fn upsilon2(&self) -> f64 {
        self.tau2 / self.alpha2()
    }

    /// `Γ² = N_p γ²/α²`
    pub fn big_gamma2(&self) -> f64 {
        self.n_p() * self.gamma2 / self.alpha2()
    }
}

/// `r* = σ_c² / (σ_c² + N_p γ²)`
pub fn optimal_ratio(p: &AnalyticParams) -> Result<f64> {
    let denom = p.sigma_p2();
    if denom <= 0.0 {
        return Err(Error::UndefinedRatio);
    }
    if p.sigma_c2() == 0.0 {
        return Err(Error::UndefinedRatio);
    }
    Ok(p.sigma_c2() / denom)
}

/// Variance of the server estimate when the group means are mixed with ratio `r`.
pub fn server_variance_at_ratio(p: &AnalyticParams, r: f64) -> f64 {
    let (n_np, n_p, sc) = (p.n_np(), p.n_p(), p.sigma_c2());
    let w = n_np + r * n_p;
    (n_np * sc + r * r * (n_p * sc + n_p * n_p * p.gamma2)) / (w * w)
}

/// Variance at the optimal ratio.
pub fn server_variance_opt(p: &AnalyticParams) -> f64 {
    let sc = p.sigma_c2();
    let npg = p.n_p() * p.gamma2;
    sc * (sc + npg) / (p.n() * (sc + p.rho_np() * npg))
}

/// Variance of plain count-weighted averaging (`r = 1`).
pub fn server_variance_fedavg(p: &AnalyticParams) -> f64 {
    (p.sigma_c2() + (1.0 - p.rho_np()) * p.n_p() * p.gamma2) / p.n()
}

/// Variance when every client's update is noised, `(σ_c² + N_p γ²)/N`.
/// Equals `(σ_c² + Nγ²)/N` when all clients are private.
pub fn server_variance_dpfedavg(p: &AnalyticParams) -> f64 {
    (p.sigma_c2() + p.n_p() * p.gamma2) / p.n()
}

/// `σ²_fedavg − σ²_opt` in closed form.
pub fn gap_fedavg(p: &AnalyticParams) -> f64 {
    let rho = p.rho_np();
    let npg = p.n_p() * p.gamma2;
    rho * (1.0 - rho) * npg * npg / (p.n() * (p.sigma_c2() + rho * npg))
}

/// `σ²_dp-fedavg − σ²_opt` in closed form.
pub fn gap_dpfedavg(p: &AnalyticParams) -> f64 {
    let rho = p.rho_np();
    let npg = p.n_p() * p.gamma2;
    let sc = p.sigma_c2();
    npg * rho * (sc + npg) / (p.n() * (sc + rho * npg))
}

/// `λ*_np = 1/ϒ² = α²/τ²`
pub fn lambda_star_np(p: &AnalyticParams) -> Result<f64> {
    if p.tau2 == 0.0 {
        return Err(Error::UnboundedLambda("tau2 = 0"));
    }
    Ok(p.alpha2() / p.tau2)
}

/// Optimal personalization strength of a private client at the optimal ratio.
pub fn lambda_star_p(p: &AnalyticParams) -> Result<f64> {
    let (n, n_p) = (p.n(), p.n_p());
    let u = p.upsilon2();
    let g = p.big_gamma2();
    let num = n + u * n + g * (n - n_p);
    let den = u * (u + 1.0) * n + u * g * (n - n_p + 1.0) + g;
    if den == 0.0 || !den.is_finite() || !num.is_finite() {
        return Err(Error::UnboundedLambda("private-client denominator vanishes"));
    }
    Ok(num / den)
}

/// The three per-coefficient matches whose mean is the optimal lambda.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaComponents {
    pub own: f64,
    pub nonprivate_sum: f64,
    pub private_sum: f64,
}

impl LambdaComponents {
    pub fn mean(&self) -> f64 {
        (self.own + self.nonprivate_sum + self.private_sum) / 3.0
    }
}

/// Number of other private and non-private clients, and the focal client's
/// own aggregation weight factor, as seen by one client.
fn peer_counts(p: &AnalyticParams, is_private: bool, r: f64) -> (f64, f64, f64) {
    if is_private {
        (p.n_p() - 1.0, p.n_np(), r)
    } else {
        (p.n_p(), p.n_np() - 1.0, 1.0)
    }
}

pub fn lambda_components(p: &AnalyticParams, is_private: bool, r: f64) -> Result<LambdaComponents> {
    let (n, m, own_weight) = peer_counts(p, is_private, r);
    let sc = p.sigma_c2();
    let sp = p.sigma_p2();
    let t2 = p.tau2;
    let d = p.n_np() + p.n_p() * r;
    let a = n * sc + m * sp;
    let b = a + sp;

    let ratio = |num: f64, den: f64| -> Result<f64> {
        if den == 0.0 || !(num / den).is_finite() {
            Err(Error::UnboundedLambda("vanishing denominator in lambda component"))
        } else {
            Ok(num / den)
        }
    };
    let own = ratio(
        d * (n * sc * sc + m * sc * sp - t2 * a),
        d * (sc * sp + t2 * a) - own_weight * sc * b,
    )?;
    let nonprivate_sum = ratio(d * (sc - t2) * sp, sc * b - d * (sc - t2) * sp)?;
    let private_sum = ratio(d * (sc - t2), r * b - d * (sc - t2))?;
    Ok(LambdaComponents {
        own,
        nonprivate_sum,
        private_sum,
    })
}

/// Mean of the three per-coefficient lambdas at ratio `r`.
pub fn lambda_star_general(p: &AnalyticParams, is_private: bool, r: f64) -> Result<f64> {
    Ok(lambda_components(p, is_private, r)?.mean())
}

/// Replace an unbounded lambda by [`LAMBDA_CAP`].
pub fn capped(lambda: Result<f64>) -> Result<f64> {
    match lambda {
        Err(Error::UnboundedLambda(_)) => Ok(LAMBDA_CAP),
        other => other,
    }
}

/// Inverse-variance weighted mean: the posterior mean of the global point
/// under a flat prior, given observations with isotropic noise variances.
pub fn bayes_global_oracle(updates: &[(ModelVector, f64)]) -> Result<ModelVector> {
    let Some((first, _)) = updates.first() else {
        return Err(Error::config("updates", "must be nonempty"));
    };
    let mut acc = ModelVector::zeros(first.dim());
    let mut total = 0.0;
    for (u, var) in updates {
        if !(*var > 0.0) {
            return Err(Error::config("variance", "must be > 0"));
        }
        acc.add_scaled(1.0 / var, u)?;
        total += 1.0 / var;
    }
    Ok(acc.scaled(1.0 / total))
}

/// Coefficients `(own, per non-private peer, per private peer)` of the
/// Bayes-optimal personalized estimate.
pub fn bayes_local_coefficients(p: &AnalyticParams, n_private_peers: usize, n_nonprivate_peers: usize) -> (f64, f64, f64) {
    let (n, m) = (n_private_peers as f64, n_nonprivate_peers as f64);
    let sc = p.sigma_c2();
    let sp = p.sigma_p2();
    let t2 = p.tau2;
    let b = n * sc + (m + 1.0) * sp;
    let own = (sc * sp + t2 * (n * sc + m * sp)) / (sc * b);
    let per_np = (sc - t2) * sp / (sc * b);
    let per_p = (sc - t2) / b;
    (own, per_np, per_p)
}

/// Posterior mean of a client's own point given its local estimate and every
/// other client's update, tagged with whether that peer is private.
pub fn bayes_local_oracle(
    phi_hat_j: &ModelVector,
    others: &[(ModelVector, bool)],
    p: &AnalyticParams,
) -> Result<ModelVector> {
    let n_private_peers = others.iter().filter(|(_, private)| *private).count();
    let n_nonprivate_peers = others.len() - n_private_peers;
    let (own, per_np, per_p) = bayes_local_coefficients(p, n_private_peers, n_nonprivate_peers);
    let mut out = phi_hat_j.scaled(own);
    for (u, private) in others {
        out.add_scaled(if *private { per_p } else { per_np }, u)?;
    }
    Ok(out)
}
