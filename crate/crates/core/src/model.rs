//! Model vectors, local datasets, loss functions and local client training.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::personalization::ditto_step;
use crate::privacy::clip;

/// Flat real-valued parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelVector(Vec<f64>);

impl ModelVector {
    pub fn new(values: Vec<f64>) -> Self {
        ModelVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        ModelVector(vec![0.0; dim])
    }

    pub fn scalar(value: f64) -> Self {
        ModelVector(vec![value])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn ensure_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: self.dim(),
            });
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> ModelVector {
        ModelVector(self.0.iter().map(|v| v * factor).collect())
    }

    /// `self - other`.
    pub fn sub(&self, other: &ModelVector) -> Result<ModelVector> {
        other.ensure_dim(self.dim())?;
        Ok(ModelVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, factor: f64, other: &ModelVector) -> Result<()> {
        other.ensure_dim(self.dim())?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &ModelVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

impl From<Vec<f64>> for ModelVector {
    fn from(v: Vec<f64>) -> Self {
        ModelVector(v)
    }
}

/// Feature vectors with integer class labels, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExamples {
    pub features: Vec<f64>,
    pub n_features: usize,
    pub labels: Vec<u8>,
    pub n_classes: usize,
}

impl LabeledExamples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn select(&self, idx: &[usize]) -> LabeledExamples {
        let mut features = Vec::with_capacity(idx.len() * self.n_features);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        LabeledExamples {
            features,
            n_features: self.n_features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }
}

/// A client's local data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LocalDataset {
    /// Scalar observations of a single point.
    PointSamples { observations: Vec<f64> },
    /// Row-major `n x dim` design matrix with one response per row.
    RegressionSamples {
        features: Vec<f64>,
        dim: usize,
        responses: Vec<f64>,
    },
    LabeledExamples(LabeledExamples),
}

impl LocalDataset {
    pub fn len(&self) -> usize {
        match self {
            LocalDataset::PointSamples { observations } => observations.len(),
            LocalDataset::RegressionSamples { responses, .. } => responses.len(),
            LocalDataset::LabeledExamples(ex) => ex.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> LossKind {
        match self {
            LocalDataset::PointSamples { .. } => LossKind::PointEstimation,
            LocalDataset::RegressionSamples { .. } => LossKind::LinearRegression,
            LocalDataset::LabeledExamples(_) => LossKind::SoftmaxClassification,
        }
    }

    /// Dimension of a model that fits this dataset.
    pub fn model_dim(&self) -> usize {
        match self {
            LocalDataset::PointSamples { .. } => 1,
            LocalDataset::RegressionSamples { dim, .. } => *dim,
            LocalDataset::LabeledExamples(ex) => ex.n_classes * (ex.n_features + 1),
        }
    }

    pub fn select(&self, idx: &[usize]) -> LocalDataset {
        match self {
            LocalDataset::PointSamples { observations } => LocalDataset::PointSamples {
                observations: idx.iter().map(|&i| observations[i]).collect(),
            },
            LocalDataset::RegressionSamples {
                features,
                dim,
                responses,
            } => {
                let mut f = Vec::with_capacity(idx.len() * dim);
                for &i in idx {
                    f.extend_from_slice(&features[i * dim..(i + 1) * dim]);
                }
                LocalDataset::RegressionSamples {
                    features: f,
                    dim: *dim,
                    responses: idx.iter().map(|&i| responses[i]).collect(),
                }
            }
            LocalDataset::LabeledExamples(ex) => LocalDataset::LabeledExamples(ex.select(idx)),
        }
    }

    /// Least-squares local estimate: sample mean for point data, `(F^T F)^{-1} F^T x`
    /// for regression data.
    pub fn local_estimate(&self) -> Result<ModelVector> {
        match self {
            LocalDataset::PointSamples { observations } => {
                Ok(ModelVector::scalar(mean(observations)))
            }
            LocalDataset::RegressionSamples {
                features,
                dim,
                responses,
            } => {
                let n = responses.len();
                let f = nalgebra::DMatrix::from_row_slice(n, *dim, features);
                let x = nalgebra::DVector::from_column_slice(responses);
                let gram = f.transpose() * &f;
                let rhs = f.transpose() * x;
                let sol = gram
                    .lu()
                    .solve(&rhs)
                    .ok_or_else(|| Error::numeric("singular design in local estimate"))?;
                Ok(ModelVector::new(sol.iter().copied().collect()))
            }
            LocalDataset::LabeledExamples(_) => Err(Error::config(
                "loss",
                "closed-form local estimate is only defined for quadratic losses",
            )),
        }
    }
}

/// Which loss a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    PointEstimation,
    LinearRegression,
    SoftmaxClassification,
}

/// A participant in the federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub id: usize,
    pub is_private: bool,
    pub dataset: LocalDataset,
    #[serde(default)]
    pub personalized_model: Option<ModelVector>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn check(model: &ModelVector, data: &LocalDataset, kind: LossKind) -> Result<()> {
    if data.kind() != kind {
        return Err(Error::config(
            "loss",
            format!("{kind:?} cannot be evaluated on {:?} data", data.kind()),
        ));
    }
    if data.is_empty() {
        return Err(Error::config("dataset", "must hold at least one sample"));
    }
    model.ensure_dim(data.model_dim())
}

/// Row-wise softmax probabilities of a linear classifier, one row per example.
fn softmax_probabilities(model: &[f64], ex: &LabeledExamples) -> Vec<f64> {
    let c = ex.n_classes;
    let d = ex.n_features;
    let (w, b) = model.split_at(c * d);
    let mut out = vec![0.0; ex.len() * c];
    for i in 0..ex.len() {
        let x = ex.row(i);
        let logits = &mut out[i * c..(i + 1) * c];
        for k in 0..c {
            let wk = &w[k * d..(k + 1) * d];
            logits[k] = b[k] + wk.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            z += *l;
        }
        for l in logits.iter_mut() {
            *l /= z;
        }
    }
    out
}

/// Local objective of one client.
///
/// * point estimation: `½ (θ − mean(x))²`
/// * linear regression: `‖Fθ − x‖² / (2n)`, which equals `½‖θ − φ̂‖²` plus a
///   constant when `FᵀF = n·I`
/// * softmax classification: mean cross-entropy of a single linear layer
pub fn local_loss(model: &ModelVector, data: &LocalDataset, kind: LossKind) -> Result<f64> {
    check(model, data, kind)?;
    let theta = model.as_slice();
    let loss = match data {
        LocalDataset::PointSamples { observations } => {
            let diff = theta[0] - mean(observations);
            0.5 * diff * diff
        }
        LocalDataset::RegressionSamples {
            features,
            dim,
            responses,
        } => {
            let n = responses.len();
            let mut sse = 0.0;
            for i in 0..n {
                let row = &features[i * dim..(i + 1) * dim];
                let pred: f64 = row.iter().zip(theta).map(|(a, b)| a * b).sum();
                let r = pred - responses[i];
                sse += r * r;
            }
            sse / (2.0 * n as f64)
        }
        LocalDataset::LabeledExamples(ex) => {
            let probs = softmax_probabilities(theta, ex);
            let c = ex.n_classes;
            let total: f64 = ex
                .labels
                .iter()
                .enumerate()
                .map(|(i, &y)| -probs[i * c + y as usize].max(f64::MIN_POSITIVE).ln())
                .sum();
            total / ex.len() as f64
        }
    };
    Ok(loss)
}

/// Gradient of [`local_loss`] with respect to the model.
pub fn local_gradient(
    model: &ModelVector,
    data: &LocalDataset,
    kind: LossKind,
) -> Result<ModelVector> {
    check(model, data, kind)?;
    let theta = model.as_slice();
    let grad = match data {
        LocalDataset::PointSamples { observations } => vec![theta[0] - mean(observations)],
        LocalDataset::RegressionSamples {
            features,
            dim,
            responses,
        } => {
            let n = responses.len();
            let mut g = vec![0.0; *dim];
            for i in 0..n {
                let row = &features[i * dim..(i + 1) * dim];
                let pred: f64 = row.iter().zip(theta).map(|(a, b)| a * b).sum();
                let r = pred - responses[i];
                for (gj, fj) in g.iter_mut().zip(row) {
                    *gj += r * fj;
                }
            }
            g.iter_mut().for_each(|v| *v /= n as f64);
            g
        }
        LocalDataset::LabeledExamples(ex) => {
            let c = ex.n_classes;
            let d = ex.n_features;
            let mut probs = softmax_probabilities(theta, ex);
            for (i, &y) in ex.labels.iter().enumerate() {
                probs[i * c + y as usize] -= 1.0;
            }
            let mut g = vec![0.0; c * (d + 1)];
            let inv_n = 1.0 / ex.len() as f64;
            for i in 0..ex.len() {
                let x = ex.row(i);
                for k in 0..c {
                    let e = probs[i * c + k] * inv_n;
                    if e == 0.0 {
                        continue;
                    }
                    for (gw, xv) in g[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *gw += e * xv;
                    }
                    g[c * d + k] += e;
                }
            }
            g
        }
    };
    Ok(ModelVector::new(grad))
}

/// Local optimizer settings shared by every client in a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub kind: LossKind,
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` trains on the full local dataset each step.
    pub batch_size: Option<usize>,
}

/// Ditto regularization applied to a client's personalized model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Personalization {
    pub lambda: f64,
    pub learning_rate: f64,
}

/// What a client returns to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    /// Model change, clipped to the round's clip norm.
    pub delta: ModelVector,
    /// Whether the unclipped change was within the clip norm.
    pub indicator: bool,
}

/// Run `epochs` passes of local SGD from `global`, optionally advancing the
/// client's personalized model alongside, and return the clipped change.
pub fn client_update<R: Rng + ?Sized>(
    global: &ModelVector,
    client: &mut ClientRecord,
    clip_norm: f64,
    training: &LocalTraining,
    personalization: Option<Personalization>,
    rng: &mut R,
) -> Result<ClientUpdate> {
    if !(clip_norm > 0.0) {
        return Err(Error::config("clip_norm", "must be > 0"));
    }
    let n = client.dataset.len();
    global.ensure_dim(client.dataset.model_dim())?;
    let mut theta = global.clone();
    if personalization.is_some() && client.personalized_model.is_none() {
        client.personalized_model = Some(global.clone());
    }
    let mut personal = client.personalized_model.clone();
    let batch = training.batch_size.unwrap_or(n).clamp(1, n.max(1));
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..training.epochs {
        let batches: Vec<LocalDataset> = if batch >= n {
            vec![client.dataset.clone()]
        } else {
            order.shuffle(rng);
            order
                .chunks(batch)
                .map(|idx| client.dataset.select(idx))
                .collect()
        };
        for b in &batches {
            let g = local_gradient(&theta, b, training.kind)?;
            theta.add_scaled(-training.learning_rate, &g)?;
            if let (Some(p), Some(cfg)) = (personal.as_mut(), personalization) {
                *p = ditto_step(p, global, b, training.kind, cfg.lambda, cfg.learning_rate)?;
            }
        }
        if !theta.is_finite() {
            return Err(Error::NumericFailure {
                context: "local training diverged".into(),
                round: None,
                client: Some(client.id),
            });
        }
    }

    let delta = theta.sub(global)?;
    let (delta, indicator) = clip(&delta, clip_norm);
    if personal.is_some() {
        client.personalized_model = personal;
    }
    Ok(ClientUpdate { delta, indicator })
}

/// Fraction of examples a linear softmax classifier labels correctly.
pub fn accuracy(model: &ModelVector, ex: &LabeledExamples) -> f64 {
    if ex.is_empty() {
        return f64::NAN;
    }
    let probs = softmax_probabilities(model.as_slice(), ex);
    let c = ex.n_classes;
    let correct = ex
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let row = &probs[i * c..(i + 1) * c];
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (k, &p)| if p > acc.1 { (k, p) } else { acc })
                .0;
            best == y as usize
        })
        .count();
    correct as f64 / ex.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn points(xs: &[f64]) -> LocalDataset {
        LocalDataset::PointSamples {
            observations: xs.to_vec(),
        }
    }

    fn training(kind: LossKind) -> LocalTraining {
        LocalTraining {
            kind,
            learning_rate: 1.0,
            epochs: 1,
            batch_size: None,
        }
    }

    #[test]
    fn point_loss_examples() {
        let k = LossKind::PointEstimation;
        assert_eq!(local_loss(&ModelVector::scalar(2.0), &points(&[2.0, 2.0, 2.0]), k).unwrap(), 0.0);
        assert_eq!(local_loss(&ModelVector::scalar(0.0), &points(&[1.0, 3.0]), k).unwrap(), 2.0);
        let g = local_gradient(&ModelVector::scalar(2.0), &points(&[2.0]), k).unwrap();
        assert_eq!(g.as_slice(), &[0.0]);
        let g = local_gradient(&ModelVector::scalar(0.0), &points(&[1.0, 3.0]), k).unwrap();
        assert_eq!(g.as_slice(), &[-2.0]);
    }

    #[test]
    fn regression_perfect_fit_has_zero_loss() {
        let data = LocalDataset::RegressionSamples {
            features: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            dim: 2,
            responses: vec![0.0; 3],
        };
        let l = local_loss(&ModelVector::zeros(2), &data, LossKind::LinearRegression).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn dimension_and_kind_mismatch_are_config_errors() {
        let k = LossKind::PointEstimation;
        assert!(matches!(
            local_loss(&ModelVector::zeros(2), &points(&[1.0]), k),
            Err(Error::DimensionMismatch { expected: 1, found: 2 })
        ));
        assert!(matches!(
            local_loss(&ModelVector::zeros(1), &points(&[1.0]), LossKind::LinearRegression),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn one_full_step_reaches_the_sample_mean() {
        let mut c = ClientRecord {
            id: 0,
            is_private: false,
            dataset: points(&[1.0, 2.0, 3.0]),
            personalized_model: None,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let up = client_update(
            &ModelVector::scalar(0.0),
            &mut c,
            10.0,
            &training(LossKind::PointEstimation),
            None,
            &mut rng,
        )
        .unwrap();
        assert_eq!(up.delta.as_slice(), &[2.0]);
        assert!(up.indicator);

        let up = client_update(
            &ModelVector::scalar(2.0),
            &mut c,
            10.0,
            &training(LossKind::PointEstimation),
            None,
            &mut rng,
        )
        .unwrap();
        assert_eq!(up.delta.as_slice(), &[0.0]);
        assert!(up.indicator);
    }

    #[test]
    fn oversized_update_is_clipped() {
        let mut c = ClientRecord {
            id: 3,
            is_private: true,
            dataset: LocalDataset::RegressionSamples {
                features: vec![1.0, 0.0, 0.0, 1.0],
                dim: 2,
                responses: vec![3.0, 4.0],
            },
            personalized_model: None,
        };
        // gradient at 0 is -(F^T x)/n = -(1.5, 2.0); one step with lr 2 gives (3, 4)
        let t = LocalTraining {
            learning_rate: 2.0,
            ..training(LossKind::LinearRegression)
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let up = client_update(&ModelVector::zeros(2), &mut c, 2.5, &t, None, &mut rng).unwrap();
        assert!((up.delta.norm() - 2.5).abs() < 1e-12);
        assert!(!up.indicator);
        assert!((up.delta.as_slice()[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn divergence_reports_the_client() {
        let mut c = ClientRecord {
            id: 9,
            is_private: false,
            dataset: points(&[1e308]),
            personalized_model: None,
        };
        let t = LocalTraining {
            learning_rate: 1e10,
            ..training(LossKind::PointEstimation)
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let err = client_update(&ModelVector::scalar(0.0), &mut c, 1.0, &t, None, &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::NumericFailure { client: Some(9), .. }));
    }

    fn random_dataset(kind: LossKind, rng: &mut impl Rng) -> (ModelVector, LocalDataset) {
        let n = rng.random_range(1..8);
        let normal = |rng: &mut dyn rand::RngCore| -> f64 { StandardNormal.sample(rng) };
        match kind {
            LossKind::PointEstimation => (
                ModelVector::scalar(normal(rng)),
                points(&(0..n).map(|_| normal(rng)).collect::<Vec<_>>()),
            ),
            LossKind::LinearRegression => {
                let d = rng.random_range(1..5);
                (
                    ModelVector::new((0..d).map(|_| normal(rng)).collect()),
                    LocalDataset::RegressionSamples {
                        features: (0..n * d).map(|_| normal(rng)).collect(),
                        dim: d,
                        responses: (0..n).map(|_| normal(rng)).collect(),
                    },
                )
            }
            LossKind::SoftmaxClassification => {
                let d = rng.random_range(1..4);
                let c = rng.random_range(2..5);
                (
                    ModelVector::new((0..c * (d + 1)).map(|_| normal(rng)).collect()),
                    LocalDataset::LabeledExamples(LabeledExamples {
                        features: (0..n * d).map(|_| normal(rng)).collect(),
                        n_features: d,
                        labels: (0..n).map(|_| rng.random_range(0..c) as u8).collect(),
                        n_classes: c,
                    }),
                )
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let h = 1e-5;
        for kind in [
            LossKind::PointEstimation,
            LossKind::LinearRegression,
            LossKind::SoftmaxClassification,
        ] {
            for _ in 0..100 {
                let (model, data) = random_dataset(kind, &mut rng);
                let g = local_gradient(&model, &data, kind).unwrap();
                for j in 0..model.dim() {
                    let mut plus = model.clone();
                    plus.as_mut_slice()[j] += h;
                    let mut minus = model.clone();
                    minus.as_mut_slice()[j] -= h;
                    let fd = (local_loss(&plus, &data, kind).unwrap()
                        - local_loss(&minus, &data, kind).unwrap())
                        / (2.0 * h);
                    let an = g.as_slice()[j];
                    let scale = an.abs().max(1e-3);
                    assert!(
                        (fd - an).abs() / scale < 1e-6,
                        "{kind:?} coord {j}: analytic {an}, fd {fd}"
                    );
                }
            }
        }
    }
}
