//! Clipping, the Gaussian mechanism, adaptive clip-norm tracking and a
//! Rényi-DP accountant for the Poisson-subsampled Gaussian mechanism.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::model::ModelVector;

/// Noise and clipping parameters of the private aggregation path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// Noise multiplier for the private-group mean.
    pub z: f64,
    /// Noise multiplier for the clipped-fraction estimate.
    pub z_b: f64,
    /// Initial clip norm.
    pub initial_clip: f64,
    /// Target quantile of update norms.
    pub kappa: f64,
    /// Geometric step size of the clip-norm update; zero keeps the clip norm fixed.
    pub eta_b: f64,
    pub delta: f64,
}

impl DpConfig {
    pub fn new(z: f64, z_b: f64, initial_clip: f64, kappa: f64, eta_b: f64, delta: f64) -> Result<Self> {
        let cfg = DpConfig {
            z,
            z_b,
            initial_clip,
            kappa,
            eta_b,
            delta,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.z >= 0.0 && self.z.is_finite()) {
            return Err(Error::config("privacy.z", "must be >= 0"));
        }
        if !(self.z_b >= 0.0 && self.z_b.is_finite()) {
            return Err(Error::config("privacy.z_b", "must be >= 0"));
        }
        if !(self.initial_clip > 0.0 && self.initial_clip.is_finite()) {
            return Err(Error::config("privacy.clip_norm", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::config("privacy.kappa", "must be in [0,1]"));
        }
        if !(self.eta_b >= 0.0 && self.eta_b.is_finite()) {
            return Err(Error::config("privacy.eta_b", "must be >= 0"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("privacy.delta", "must be in (0,1)"));
        }
        Ok(())
    }
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            z: 1.0,
            z_b: 0.0,
            initial_clip: 1.0,
            kappa: 0.5,
            eta_b: 0.2,
            delta: 1e-5,
        }
    }
}

/// Scale `v` to norm at most `s`. The indicator is true iff `‖v‖ ≤ s`.
pub fn clip(v: &ModelVector, s: f64) -> (ModelVector, bool) {
    let norm = v.norm();
    if norm <= s {
        (v.clone(), true)
    } else {
        // shave rounding excess so the result is itself within the bound
        let mut factor = s / norm;
        let mut out = v.scaled(factor);
        while out.norm() > s {
            factor *= 1.0 - f64::EPSILON;
            out = v.scaled(factor);
        }
        (out, false)
    }
}

/// I.i.d. `N(0, std²)` entries.
pub fn gaussian_noise_vector<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> ModelVector {
    if std == 0.0 {
        return ModelVector::zeros(dim);
    }
    let normal = Normal::new(0.0, std).expect("std must be finite and >= 0");
    ModelVector::new((0..dim).map(|_| normal.sample(rng)).collect())
}

/// Geometric clip-norm update toward the `kappa` quantile of update norms.
pub fn update_clip_norm<R: Rng + ?Sized>(
    s: f64,
    indicators: &[bool],
    cfg: &DpConfig,
    rng: &mut R,
) -> f64 {
    let n = indicators.len();
    if n == 0 {
        return s;
    }
    let frac = indicators.iter().filter(|&&b| b).count() as f64 / n as f64;
    let noise = if cfg.z_b > 0.0 {
        let g: f64 = StandardNormal.sample(rng);
        g * cfg.z_b / n as f64
    } else {
        0.0
    };
    s * (-cfg.eta_b * (frac + noise - cfg.kappa)).exp()
}

/// Default order grid: 1.25 to 63.5 in steps of 0.25, then 64, 128, 256, 512.
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (5..=254).map(|k| k as f64 * 0.25).collect();
    orders.extend([64.0, 128.0, 256.0, 512.0]);
    orders
}

/// Cumulative Rényi-DP of a sequence of subsampled Gaussian rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub orders: Vec<f64>,
    #[serde(rename = "rdp")]
    pub cumulative_rdp: Vec<f64>,
    pub rounds_recorded: usize,
}

impl Default for PrivacyLedger {
    fn default() -> Self {
        Self::new(default_orders())
    }
}

impl PrivacyLedger {
    pub fn new(orders: Vec<f64>) -> Self {
        let n = orders.len();
        PrivacyLedger {
            orders,
            cumulative_rdp: vec![0.0; n],
            rounds_recorded: 0,
        }
    }

    /// Add one round of the Poisson-subsampled Gaussian mechanism.
    pub fn account_round(&mut self, q: f64, z: f64) -> Result<()> {
        self.account_rounds(q, z, 1)
    }

    /// Add `rounds` identical rounds at once.
    pub fn account_rounds(&mut self, q: f64, z: f64, rounds: usize) -> Result<()> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::config("q", "must be in (0,1]"));
        }
        if z == 0.0 {
            return Err(Error::InfinitePrivacyLoss);
        }
        if !(z > 0.0) {
            return Err(Error::config("z", "must be > 0"));
        }
        for (acc, &order) in self.cumulative_rdp.iter_mut().zip(&self.orders) {
            *acc += rounds as f64 * subsampled_gaussian_rdp(q, z, order);
        }
        self.rounds_recorded += rounds;
        Ok(())
    }

    /// Best `(ε, order)` for the given δ.
    pub fn epsilon(&self, delta: f64) -> Result<(f64, f64)> {
        epsilon_at_delta(self, delta)
    }
}

/// `ε = min_α rdp(α) + ln(1/δ)/(α−1)`.
pub fn epsilon_at_delta(ledger: &PrivacyLedger, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::config("delta", "must be in (0,1)"));
    }
    if ledger.orders.is_empty() {
        return Err(Error::EmptyLedger);
    }
    let log_inv_delta = (1.0 / delta).ln();
    let mut best = (f64::INFINITY, ledger.orders[0]);
    for (&order, &rdp) in ledger.orders.iter().zip(&ledger.cumulative_rdp) {
        let eps = rdp + log_inv_delta / (order - 1.0);
        if eps < best.0 {
            best = (eps, order);
        }
    }
    Ok(best)
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        // the series keeps the running sum positive; clamp rounding residue
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

/// `ln erfc(x)`, with an asymptotic expansion once `erfc` underflows.
fn log_erfc(x: f64) -> f64 {
    let v = erfc(x);
    if v > 1e-300 {
        return v.ln();
    }
    let x2 = x * x;
    -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln()
        + (1.0 - 0.5 / x2 + 0.75 / (x2 * x2) - 1.875 / (x2 * x2 * x2)).ln()
}

fn log_a_integer(q: f64, sigma: f64, alpha: u64) -> f64 {
    let mut log_a = f64::NEG_INFINITY;
    let mut log_binom = 0.0;
    for i in 0..=alpha {
        if i > 0 {
            log_binom += ((alpha - i + 1) as f64).ln() - (i as f64).ln();
        }
        let fi = i as f64;
        let s = log_binom
            + fi * q.ln()
            + (alpha - i) as f64 * (1.0 - q).ln()
            + (fi * fi - fi) / (2.0 * sigma * sigma);
        log_a = log_add(log_a, s);
    }
    log_a
}

fn log_a_fractional(q: f64, sigma: f64, alpha: f64) -> f64 {
    let mut log_a0 = f64::NEG_INFINITY;
    let mut log_a1 = f64::NEG_INFINITY;
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let sqrt2_sigma = std::f64::consts::SQRT_2 * sigma;
    let mut coef = 1.0f64;
    let mut i = 0u64;
    loop {
        let fi = i as f64;
        if i > 0 {
            coef *= (alpha - fi + 1.0) / fi;
        }
        let log_coef = coef.abs().ln();
        let j = alpha - fi;
        let log_t0 = log_coef + fi * q.ln() + j * (1.0 - q).ln();
        let log_t1 = log_coef + j * q.ln() + fi * (1.0 - q).ln();
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / sqrt2_sigma);
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / sqrt2_sigma);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * sigma * sigma) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1;
        if coef > 0.0 {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        i += 1;
        // Early terms can be tiny before the binomial weights peak, so only
        // stop past the order, once terms are negligible against the sum.
        let scale = log_add(log_a0, log_a1).max(0.0);
        if (fi > alpha && log_s0.max(log_s1) < scale - 40.0) || i > 10_000 {
            break;
        }
    }
    log_add(log_a0, log_a1)
}

/// RDP at `order` of one round of the Gaussian mechanism with noise
/// multiplier `z`, applied to a Poisson subsample drawn at rate `q`.
pub fn subsampled_gaussian_rdp(q: f64, z: f64, order: f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if q == 1.0 {
        return order / (2.0 * z * z);
    }
    if z.is_infinite() {
        return 0.0;
    }
    let log_a = if order.fract() == 0.0 {
        log_a_integer(q, z, order as u64)
    } else {
        log_a_fractional(q, z, order)
    };
    log_a / (order - 1.0)
}

/// `ε` after `rounds` rounds at sampling rate `q` and noise multiplier `z`.
pub fn epsilon_for(q: f64, z: f64, rounds: usize, delta: f64) -> Result<f64> {
    let mut ledger = PrivacyLedger::default();
    if rounds > 0 {
        ledger.account_rounds(q, z, rounds)?;
    }
    Ok(epsilon_at_delta(&ledger, delta)?.0)
}

/// Bisect for the noise multiplier in `[0.1, 100]` whose `ε` is within
/// `1e-3` of `target_epsilon`.
pub fn solve_noise_multiplier(target_epsilon: f64, delta: f64, q: f64, rounds: usize) -> Result<f64> {
    if !(target_epsilon > 0.0) {
        return Err(Error::config("target_epsilon", "must be > 0"));
    }
    const LO: f64 = 0.1;
    const HI: f64 = 100.0;
    let eps_lo = epsilon_for(q, LO, rounds, delta)?;
    let eps_hi = epsilon_for(q, HI, rounds, delta)?;
    if target_epsilon > eps_lo + 1e-3 || target_epsilon < eps_hi - 1e-3 {
        return Err(Error::Range(format!(
            "epsilon {target_epsilon} outside [{eps_hi:.4}, {eps_lo:.4}] reachable with z in [{LO}, {HI}]"
        )));
    }
    if (eps_lo - target_epsilon).abs() < 1e-3 {
        return Ok(LO);
    }
    if (eps_hi - target_epsilon).abs() < 1e-3 {
        return Ok(HI);
    }
    let (mut lo, mut hi) = (LO, HI);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let eps = epsilon_for(q, mid, rounds, delta)?;
        if (eps - target_epsilon).abs() < 1e-3 {
            return Ok(mid);
        }
        // ε decreases in z
        if eps > target_epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Range(format!(
        "bisection did not converge for epsilon {target_epsilon}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn clip_examples() {
        let v = ModelVector::new(vec![3.0, 4.0]);
        assert_eq!(clip(&v, 10.0), (v.clone(), true));
        let (c, b) = clip(&v, 2.5);
        assert_eq!(c.as_slice(), &[1.5, 2.0]);
        assert!(!b);
        assert_eq!(clip(&ModelVector::zeros(3), 0.1), (ModelVector::zeros(3), true));
    }

    #[test]
    fn noise_statistics_and_determinism() {
        assert_eq!(
            gaussian_noise_vector(4, 0.0, &mut stream(1, 0, 0, Purpose::UpdateNoise)),
            ModelVector::zeros(4)
        );
        let v = gaussian_noise_vector(100_000, 1.0, &mut stream(1, 0, 0, Purpose::UpdateNoise));
        let n = v.dim() as f64;
        let m = v.as_slice().iter().sum::<f64>() / n;
        let sd = (v.as_slice().iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(m.abs() < 0.02, "mean {m}");
        assert!((sd - 1.0).abs() < 0.02, "sd {sd}");
        let w = gaussian_noise_vector(100_000, 1.0, &mut stream(1, 0, 0, Purpose::UpdateNoise));
        assert_eq!(v, w);
    }

    #[test]
    fn clip_norm_update_examples() {
        let mut rng = stream(0, 0, 0, Purpose::IndicatorNoise);
        let base = DpConfig {
            z_b: 0.0,
            eta_b: 0.2,
            ..DpConfig::default()
        };
        let s = update_clip_norm(1.0, &[true, false], &DpConfig { kappa: 0.5, ..base }, &mut rng);
        assert_eq!(s, 1.0);
        let s = update_clip_norm(1.0, &[true, true], &DpConfig { kappa: 0.5, ..base }, &mut rng);
        assert!((s - 0.904_837_418_035_959_6).abs() < 1e-12);
        let s = update_clip_norm(1.0, &[false, false], &DpConfig { kappa: 1.0, ..base }, &mut rng);
        assert!((s - 1.221_402_758_160_17).abs() < 1e-12);
    }

    #[test]
    fn unsubsampled_rdp_is_closed_form() {
        for &order in &default_orders() {
            let v = subsampled_gaussian_rdp(1.0, 1.3, order);
            assert!((v - order / (2.0 * 1.3 * 1.3)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_is_rejected() {
        let mut l = PrivacyLedger::default();
        assert_eq!(l.account_round(0.1, 0.0), Err(Error::InfinitePrivacyLoss));
        assert_eq!(
            epsilon_at_delta(&PrivacyLedger::new(vec![]), 1e-5),
            Err(Error::EmptyLedger)
        );
    }

    #[test]
    fn fresh_ledger_reports_near_zero_epsilon() {
        let (eps, order) = PrivacyLedger::default().epsilon(1e-5).unwrap();
        assert_eq!(order, 512.0);
        assert!(eps < 0.03);
    }

    #[test]
    fn log_erfc_is_continuous_across_the_switch() {
        for x in [20.0, 25.0, 26.0, 26.5, 27.0, 30.0] {
            let a = log_erfc(x);
            let exact_ish = -x * x - x.ln() - 0.5 * std::f64::consts::PI.ln();
            assert!((a - exact_ish).abs() < 1e-2, "{x}");
        }
    }
}
