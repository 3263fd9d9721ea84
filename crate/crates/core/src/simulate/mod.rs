//! Round orchestration and full experiments.
//!
//! Every random draw comes from a stream keyed by round, client and purpose,
//! client updates run on the ambient rayon pool and are collected in client
//! order, and all reductions are sequential. Reports are therefore identical
//! for any number of worker threads.

mod montecarlo;

pub use montecarlo::{
    lambda_sweep, monte_carlo_regression_error, monte_carlo_server_variance,
    monte_carlo_server_variance_grid,
};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::aggregation::{apply_update, dp_group_mean, feo2_combine, group_mean};
use crate::datagen::{generate, GroundTruth, Population, PopulationSpec};
use crate::error::{Error, Result};
use crate::model::{accuracy, client_update, ClientRecord, LocalDataset, LocalTraining, ModelVector};
use crate::personalization::DittoConfig;
use crate::privacy::{update_clip_norm, DpConfig, PrivacyLedger};
use crate::rng::{stream, Purpose, SERVER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    /// Plain federated averaging: nobody is noised.
    #[serde(rename = "fedavg")]
    FedAvg,
    /// Every client is treated as private.
    #[serde(rename = "dp_fedavg")]
    DpFedAvg,
    /// Clients keep their own privacy choice; group means mix with a ratio.
    #[serde(rename = "feo2")]
    FeO2,
}

/// Server-side aggregation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeO2Config {
    /// Weight on the private-group mean, in `[0, 1]`.
    pub ratio: f64,
    pub privacy: DpConfig,
}

/// Local optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` means full-batch steps.
    pub batch_size: Option<usize>,
    pub server_learning_rate: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1.0,
            epochs: 1,
            batch_size: None,
            server_learning_rate: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub population: PopulationSpec,
    pub algorithm: Algorithm,
    pub feo2: FeO2Config,
    pub ditto: Option<DittoConfig>,
    pub training: TrainingConfig,
    pub rounds: usize,
    pub cohort_fraction: f64,
    pub master_seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.population.validate()?;
        self.feo2.privacy.validate()?;
        if !(0.0..=1.0).contains(&self.feo2.ratio) {
            return Err(Error::config("algorithm.r", "r must be in [0,1]"));
        }
        if self.algorithm == Algorithm::FedAvg && self.feo2.privacy.z != 0.0 {
            return Err(Error::config("privacy.z", "must be 0 for fedavg"));
        }
        if let Some(d) = &self.ditto {
            d.validate()?;
        }
        let t = &self.training;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::config("training.learning_rate", "must be > 0"));
        }
        if t.epochs == 0 {
            return Err(Error::config("training.epochs", "must be >= 1"));
        }
        if t.batch_size == Some(0) {
            return Err(Error::config("training.batch_size", "must be >= 1"));
        }
        if !(t.server_learning_rate > 0.0 && t.server_learning_rate.is_finite()) {
            return Err(Error::config("training.server_learning_rate", "must be > 0"));
        }
        if !(self.cohort_fraction > 0.0 && self.cohort_fraction <= 1.0) {
            return Err(Error::config("cohort_fraction", "must be in (0,1]"));
        }
        Ok(())
    }

    /// Whether client `i` is noised under this algorithm.
    pub fn treats_as_private(&self, client: &ClientRecord) -> bool {
        match self.algorithm {
            Algorithm::FedAvg => false,
            Algorithm::DpFedAvg => true,
            Algorithm::FeO2 => client.is_private,
        }
    }

    fn local_training(&self) -> LocalTraining {
        LocalTraining {
            kind: self.population.kind.loss(),
            learning_rate: self.training.learning_rate,
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
        }
    }

    pub fn cohort_size(&self) -> usize {
        let n = self.population.n_clients;
        ((self.cohort_fraction * n as f64).round() as usize).clamp(1, n)
    }
}

fn serialize_epsilon<S: Serializer>(eps: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if eps.is_finite() {
        s.serialize_f64(*eps)
    } else {
        s.serialize_none()
    }
}

/// Metrics after one round. Classification runs report accuracies; the
/// estimation settings report squared distance to the true points in the
/// same slots. A class with no members has no metric.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    /// Clip norm used during the round.
    pub clip_norm: f64,
    pub n_private: usize,
    pub n_nonprivate: usize,
    pub acc_g: Option<f64>,
    pub acc_g_p: Option<f64>,
    pub acc_g_np: Option<f64>,
    pub acc_l_p: Option<f64>,
    pub acc_l_np: Option<f64>,
    pub delta_g: Option<f64>,
    pub delta_l: Option<f64>,
    /// Cumulative ε at the configured δ; infinite once a private update was
    /// released without noise. Serialized as `null` when infinite.
    #[serde(serialize_with = "serialize_epsilon")]
    pub epsilon: f64,
}

/// Mutable server and client state between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationState {
    /// Number of completed rounds.
    pub round: usize,
    pub global: ModelVector,
    pub clip_norm: f64,
    pub ledger: PrivacyLedger,
    /// Set once a private update is released with zero noise.
    pub unbounded_loss: bool,
    pub clients: Vec<ClientRecord>,
}

impl SimulationState {
    pub fn epsilon(&self, delta: f64) -> Result<f64> {
        if self.unbounded_loss {
            return Ok(f64::INFINITY);
        }
        Ok(self.ledger.epsilon(delta)?.0)
    }
}

/// Read-only inputs shared by every round.
#[derive(Debug, Clone)]
pub struct Environment {
    pub cfg: ExperimentConfig,
    pub test_sets: Vec<LocalDataset>,
    server_test: Option<LocalDataset>,
    truth: Option<GroundTruth>,
}

impl Environment {
    /// Build the population and initial state for a configuration.
    pub fn new(cfg: ExperimentConfig) -> Result<(Environment, SimulationState)> {
        cfg.validate()?;
        let (population, truth) = generate(&cfg.population)?;
        Ok(Self::from_population(cfg, population, truth))
    }

    /// Use an existing population, e.g. one loaded from a snapshot.
    pub fn from_population(
        cfg: ExperimentConfig,
        population: Population,
        truth: Option<GroundTruth>,
    ) -> (Environment, SimulationState) {
        let server_test = population.server_test_set();
        let state = SimulationState {
            round: 0,
            global: ModelVector::zeros(population.model_dim()),
            clip_norm: cfg.feo2.privacy.initial_clip,
            ledger: PrivacyLedger::default(),
            unbounded_loss: false,
            clients: population.clients,
        };
        let env = Environment {
            cfg,
            test_sets: population.test_sets,
            server_test,
            truth,
        };
        (env, state)
    }

    /// Accuracy on the client's held-out data, or squared distance to its
    /// true point in the estimation settings.
    fn client_metric(&self, model: &ModelVector, i: usize) -> Option<f64> {
        if let Some(truth) = &self.truth {
            let t = &truth.clients[i];
            return model.sub(t).ok().map(|d| d.dot(&d));
        }
        match &self.test_sets[i] {
            LocalDataset::LabeledExamples(ex) if !ex.is_empty() => Some(accuracy(model, ex)),
            _ => None,
        }
    }

    fn global_metric(&self, model: &ModelVector) -> Option<f64> {
        if let Some(truth) = &self.truth {
            return model.sub(&truth.global).ok().map(|d| d.dot(&d));
        }
        match &self.server_test {
            Some(LocalDataset::LabeledExamples(ex)) => Some(accuracy(model, ex)),
            _ => None,
        }
    }
}

/// Indices of the clients sampled in round `round` (0-based), ascending.
pub fn sample_cohort(cfg: &ExperimentConfig, round: usize) -> Vec<usize> {
    let n = cfg.population.n_clients;
    let k = cfg.cohort_size();
    if k == n {
        return (0..n).collect();
    }
    let mut rng = stream(cfg.master_seed, round as u64, SERVER, Purpose::CohortSampling);
    let mut idx = index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values.flatten() {
        sum += v;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

fn difference(np: Option<f64>, p: Option<f64>) -> Option<f64> {
    Some(np? - p?)
}

/// One round: local training on the cohort, two-group aggregation, the
/// clip-norm update, privacy accounting and evaluation.
pub fn run_round(
    state: &mut SimulationState,
    env: &Environment,
    cohort: &[usize],
) -> Result<RoundReport> {
    let cfg = &env.cfg;
    let t = state.round;
    let report_round = t + 1;
    let seed = cfg.master_seed;
    let privacy = &cfg.feo2.privacy;
    let training = cfg.local_training();
    let skip_private = cfg.algorithm == Algorithm::FeO2 && cfg.feo2.ratio == 0.0;

    let mut in_cohort = vec![false; state.clients.len()];
    for &i in cohort {
        in_cohort[i] = true;
    }
    let global = &state.global;
    let clip_norm = state.clip_norm;
    let participants: Vec<&mut ClientRecord> = state
        .clients
        .iter_mut()
        .enumerate()
        .filter(|(i, c)| in_cohort[*i] && !(skip_private && c.is_private))
        .map(|(_, c)| c)
        .collect();

    let results: Vec<Result<(bool, crate::model::ClientUpdate)>> = participants
        .into_par_iter()
        .map(|client| {
            let private = cfg.treats_as_private(client);
            let personalization = cfg.ditto.map(|d| d.for_client(private));
            let mut rng = stream(seed, t as u64, client.id as u64, Purpose::LocalBatching);
            client_update(global, client, clip_norm, &training, personalization, &mut rng)
                .map(|u| (private, u))
                .map_err(|e| e.at(report_round, Some(client.id)))
        })
        .collect();

    let mut cohort_updates = crate::aggregation::RoundCohort::default();
    for r in results {
        let (private, update) = r?;
        cohort_updates.indicators.push(update.indicator);
        if private {
            cohort_updates.private_updates.push(update.delta);
        } else {
            cohort_updates.nonprivate_updates.push(update.delta);
        }
    }
    let n_p = cohort_updates.n_private();
    let n_np = cohort_updates.n_nonprivate();

    let mut noise_rng = stream(seed, t as u64, SERVER, Purpose::UpdateNoise);
    let delta_p = dp_group_mean(&cohort_updates.private_updates, clip_norm, privacy.z, &mut noise_rng)?;
    let delta_np = group_mean(&cohort_updates.nonprivate_updates)?;
    let ratio = match cfg.algorithm {
        Algorithm::FeO2 => cfg.feo2.ratio,
        _ => 1.0,
    };
    match feo2_combine(delta_np.as_ref(), delta_p.as_ref(), n_np, n_p, ratio) {
        Ok(delta) => {
            let next = apply_update(&state.global, &delta, cfg.training.server_learning_rate)?;
            if !next.is_finite() {
                return Err(Error::numeric("global model").at(report_round, None));
            }
            state.global = next;
        }
        Err(Error::RoundSkipped) => {}
        Err(e) => return Err(e),
    }

    let mut indicator_rng = stream(seed, t as u64, SERVER, Purpose::IndicatorNoise);
    state.clip_norm = update_clip_norm(clip_norm, &cohort_updates.indicators, privacy, &mut indicator_rng);
    if !(state.clip_norm > 0.0 && state.clip_norm.is_finite()) {
        return Err(Error::numeric("clip norm").at(report_round, None));
    }

    let accounts = match cfg.algorithm {
        Algorithm::DpFedAvg => true,
        Algorithm::FeO2 => n_p >= 1,
        Algorithm::FedAvg => false,
    };
    if accounts {
        match state.ledger.account_round(cfg.cohort_fraction, privacy.z) {
            Ok(()) => {}
            Err(Error::InfinitePrivacyLoss) => state.unbounded_loss = true,
            Err(e) => return Err(e),
        }
    }
    state.round += 1;

    evaluate(state, env, report_round, clip_norm, n_p, n_np)
}

fn evaluate(
    state: &SimulationState,
    env: &Environment,
    round: usize,
    clip_norm: f64,
    n_private: usize,
    n_nonprivate: usize,
) -> Result<RoundReport> {
    let cfg = &env.cfg;
    let global = &state.global;
    let per_client: Vec<(bool, Option<f64>, Option<f64>)> = state
        .clients
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let g = env.client_metric(global, i);
            let l = match &c.personalized_model {
                Some(m) => env.client_metric(m, i),
                None => g,
            };
            (cfg.treats_as_private(c), g, l)
        })
        .collect();
    let class = |private: bool, local: bool| {
        mean_of(
            per_client
                .iter()
                .filter(|(p, _, _)| *p == private)
                .map(|(_, g, l)| if local { *l } else { *g }),
        )
    };
    let (acc_g_p, acc_g_np) = (class(true, false), class(false, false));
    let (acc_l_p, acc_l_np) = (class(true, true), class(false, true));
    Ok(RoundReport {
        round,
        clip_norm,
        n_private,
        n_nonprivate,
        acc_g: env.global_metric(global),
        acc_g_p,
        acc_g_np,
        acc_l_p,
        acc_l_np,
        delta_g: difference(acc_g_np, acc_g_p),
        delta_l: difference(acc_l_np, acc_l_p),
        epsilon: state.epsilon(cfg.feo2.privacy.delta)?,
    })
}

/// Run every round on the ambient rayon pool.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RoundReport>> {
    let (env, mut state) = Environment::new(cfg.clone())?;
    run_from(&env, &mut state)
}

/// Run the remaining rounds from an existing state.
pub fn run_from(env: &Environment, state: &mut SimulationState) -> Result<Vec<RoundReport>> {
    let mut reports = Vec::with_capacity(env.cfg.rounds);
    while state.round < env.cfg.rounds {
        let cohort = sample_cohort(&env.cfg, state.round);
        reports.push(run_round(state, env, &cohort)?);
    }
    Ok(reports)
}

/// Run on a dedicated pool of `workers` threads.
pub fn run_experiment_with_workers(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<RoundReport>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Io(e.to_string()))?;
    pool.install(|| run_experiment(cfg))
}

#[cfg(test)]
mod tests;
