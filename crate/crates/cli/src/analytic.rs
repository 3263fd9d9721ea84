//! The `analytic` verb: closed-form tables and plot data.

use feo2_core::analytic::{
    gap_dpfedavg, gap_fedavg, lambda_star_general, lambda_star_np, lambda_star_p, optimal_ratio,
    server_variance_at_ratio, server_variance_dpfedavg, server_variance_fedavg, server_variance_opt,
    AnalyticParams,
};
use feo2_core::simulate::{lambda_sweep, monte_carlo_server_variance_grid};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AnalyticTable {
    Ratio,
    Variance,
    Gaps,
    Lambdas,
    Fig1,
    Fig2,
    Fig3,
    Fig4,
}

/// Monte Carlo settings for the plot-data tables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub trials: usize,
    pub seed: u64,
    pub lambda_max: f64,
    pub lambda_step: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            trials: 200_000,
            seed: 0,
            lambda_max: 3.0,
            lambda_step: 0.05,
        }
    }
}

fn core(e: feo2_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

/// `{0, step, …, 1}` plus any extra points, sorted.
pub fn grid(step: f64, max: f64, extra: &[f64]) -> Vec<f64> {
    let n = (max / step).round() as usize;
    let mut g: Vec<f64> = (0..=n).map(|k| k as f64 * step).collect();
    g.extend_from_slice(extra);
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Render one table as CSV text.
pub fn cmd_analytic(p: &AnalyticParams, table: AnalyticTable, opts: &SweepOptions) -> Result<String, CliError> {
    p.validate().map_err(core)?;
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    match table {
        AnalyticTable::Ratio => {
            line("quantity,value".into());
            line(format!("r_star,{}", optimal_ratio(p).map_err(core)?));
        }
        AnalyticTable::Variance => {
            line("quantity,value".into());
            line(format!("sigma2_opt,{}", server_variance_opt(p)));
            line(format!("sigma2_fedavg,{}", server_variance_fedavg(p)));
            line(format!("sigma2_dpfedavg,{}", server_variance_dpfedavg(p)));
        }
        AnalyticTable::Gaps => {
            line("n_private,gap_fedavg,fedavg_minus_opt,gap_dpfedavg,dpfedavg_minus_opt".into());
            for n_p in 0..=p.n_clients {
                let q = p.with_n_private(n_p);
                let opt = server_variance_opt(&q);
                line(format!(
                    "{n_p},{},{},{},{}",
                    gap_fedavg(&q),
                    server_variance_fedavg(&q) - opt,
                    gap_dpfedavg(&q),
                    server_variance_dpfedavg(&q) - opt
                ));
            }
        }
        AnalyticTable::Lambdas => {
            let r = optimal_ratio(p).map_err(core)?;
            line("quantity,value".into());
            line(format!("r_star,{r}"));
            line(format!("lambda_star_np,{}", lambda_star_np(p).map_err(core)?));
            line(format!("lambda_star_p,{}", lambda_star_p(p).map_err(core)?));
            if p.n_nonprivate() > 0 {
                line(format!("lambda_general_np,{}", lambda_star_general(p, false, r).map_err(core)?));
            }
            if p.n_private > 0 {
                line(format!("lambda_general_p,{}", lambda_star_general(p, true, r).map_err(core)?));
            }
        }
        AnalyticTable::Fig1 => {
            let r_star = optimal_ratio(p).map_err(core)?;
            let rs: Vec<f64> = grid(0.05, 1.0, &[r_star])
                .into_iter()
                .filter(|&r| r > 0.0 || p.n_nonprivate() > 0)
                .collect();
            let mc = monte_carlo_server_variance_grid(p, &rs, opts.trials, opts.seed).map_err(core)?;
            line("r,analytic,monte_carlo".into());
            for (r, m) in rs.iter().zip(mc) {
                line(format!("{r},{},{m}", server_variance_at_ratio(p, *r)));
            }
        }
        AnalyticTable::Fig2 | AnalyticTable::Fig3 => {
            let coords = if table == AnalyticTable::Fig3 { p.dim } else { 1 };
            let curves = opt_out_curves(p, opts, coords)?;
            line("lambda,fedavg_private,fedavg_opted_out,feo2_private,feo2_opted_out".into());
            for (i, l) in curves.lambdas.iter().enumerate() {
                let c = &curves.losses;
                line(format!("{l},{},{},{},{}", c[0][i], c[1][i], c[2][i], c[3][i]));
            }
        }
        AnalyticTable::Fig4 => {
            line("rho_np,sigma2_fedavg,sigma2_opt".into());
            for k in 0..=100 {
                let rho = k as f64 / 100.0;
                let n_np = (rho * p.n_clients as f64).round() as usize;
                let q = p.with_n_private(p.n_clients - n_np);
                line(format!("{rho},{},{}", server_variance_fedavg(&q), server_variance_opt(&q)));
            }
        }
    }
    Ok(out)
}

/// Personalized-loss curves for a focal client under the two aggregators,
/// remaining private or opting out.
#[derive(Debug, Clone, PartialEq)]
pub struct OptOutCurves {
    pub lambdas: Vec<f64>,
    /// Order: FedAvg private, FedAvg opted out, FeO2 private, FeO2 opted out.
    pub losses: [Vec<f64>; 4],
}

impl OptOutCurves {
    pub fn minima(&self) -> [f64; 4] {
        self.losses
            .each_ref()
            .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
    }
}

/// `p` describes the population with the focal client private; opting out
/// moves it to the other group. With `coords > 1` the losses sum
/// independent coordinates, as in isotropic regression with orthogonal designs.
pub fn opt_out_curves(p: &AnalyticParams, opts: &SweepOptions, coords: usize) -> Result<OptOutCurves, CliError> {
    if p.n_private == 0 {
        return Err(CliError::Config("n_private: must be >= 1 so the focal client can be private".into()));
    }
    let lambdas = grid(opts.lambda_step, opts.lambda_max, &[]);
    let opted_out = p.with_n_private(p.n_private - 1);
    let arms = [
        (p, true, 1.0),
        (&opted_out, false, 1.0),
        (p, true, optimal_ratio(p).map_err(core)?),
        (&opted_out, false, optimal_ratio(&opted_out).map_err(core)?),
    ];
    let mut losses: [Vec<f64>; 4] = Default::default();
    for (slot, (params, private, r)) in losses.iter_mut().zip(arms) {
        let mut total = vec![0.0; lambdas.len()];
        for c in 0..coords {
            let seed = opts.seed.wrapping_add(c as u64);
            let curve = lambda_sweep(params, private, r, &lambdas, opts.trials, seed).map_err(core)?;
            for (t, (_, v)) in total.iter_mut().zip(curve) {
                *t += v;
            }
        }
        *slot = total;
    }
    Ok(OptOutCurves { lambdas, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> AnalyticParams {
        AnalyticParams::from_variances(100, 95, 0.25, 0.5, 0.01).unwrap()
    }

    #[test]
    fn ratio_is_one_without_privacy_noise() {
        let out = cmd_analytic(&params().with_gamma2(0.0), AnalyticTable::Ratio, &SweepOptions::default()).unwrap();
        assert_eq!(out, "quantity,value\nr_star,1\n");
    }

    #[test]
    fn gap_rows_match_variance_differences() {
        let out = cmd_analytic(&params(), AnalyticTable::Gaps, &SweepOptions::default()).unwrap();
        for row in out.lines().skip(1) {
            let v: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
            assert!((v[1] - v[2]).abs() < 1e-12);
            assert!((v[3] - v[4]).abs() < 1e-12);
        }
    }

    #[test]
    fn fig4_optimum_never_loses() {
        let out = cmd_analytic(&params(), AnalyticTable::Fig4, &SweepOptions::default()).unwrap();
        assert_eq!(out.lines().count(), 102);
        for row in out.lines().skip(1) {
            let v: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
            assert!(v[2] <= v[1] + 1e-15);
        }
    }

    #[test]
    fn grid_includes_extra_points() {
        let g = grid(0.25, 1.0, &[0.3]);
        assert_eq!(g, vec![0.0, 0.25, 0.3, 0.5, 0.75, 1.0]);
    }
}
