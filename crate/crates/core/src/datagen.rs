//! Synthetic federated populations and IDX image ingestion.
//!
//! Generators return a [`Population`] that training code may see, and for
//! the estimation settings a separate [`GroundTruth`] that only evaluation
//! code should touch.

use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analytic::AnalyticParams;
use crate::error::{Error, Result};
use crate::model::{ClientRecord, LabeledExamples, LocalDataset, LossKind, ModelVector};
use crate::rng::{stream, Purpose, StreamRng};

/// Which kind of local data a population holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationKind {
    PointEstimation,
    LinearRegression,
    LabelShard,
}

impl PopulationKind {
    pub fn loss(self) -> LossKind {
        match self {
            PopulationKind::PointEstimation => LossKind::PointEstimation,
            PopulationKind::LinearRegression => LossKind::LinearRegression,
            PopulationKind::LabelShard => LossKind::SoftmaxClassification,
        }
    }
}

/// Where label-shard populations draw their examples from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PoolSource {
    /// Isotropic Gaussian class clusters with seeded centers. Omitted
    /// fields take the values of [`PoolSource::default`].
    Synthetic {
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_n_features")]
        n_features: usize,
        #[serde(default = "default_n_classes")]
        n_classes: usize,
        /// Standard deviation of each center coordinate; points have unit noise.
        #[serde(default = "default_separation")]
        separation: f64,
    },
    /// An IDX image file and its label file.
    Idx { images: PathBuf, labels: PathBuf },
}

fn default_per_class() -> usize {
    400
}

fn default_n_features() -> usize {
    20
}

fn default_n_classes() -> usize {
    10
}

fn default_separation() -> f64 {
    0.5
}

impl Default for PoolSource {
    fn default() -> Self {
        PoolSource::Synthetic {
            per_class: default_per_class(),
            n_features: default_n_features(),
            n_classes: default_n_classes(),
            separation: default_separation(),
        }
    }
}

/// Recipe for a population. Every generator is a pure function of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub kind: PopulationKind,
    /// Variances and dimension of the estimation settings.
    pub analytic: Option<AnalyticParams>,
    pub n_clients: usize,
    pub samples_per_client: usize,
    /// Fraction of clients that opt out of privacy.
    pub rho_np: f64,
    /// Draw every opted-out client from those holding this label.
    pub skew: Option<u8>,
    /// Share of each client's samples held out for evaluation.
    pub test_fraction: f64,
    pub source: Option<PoolSource>,
    pub seed: u64,
}

impl PopulationSpec {
    pub fn n_nonprivate(&self) -> usize {
        (self.rho_np * self.n_clients as f64).round() as usize
    }

    pub fn n_private(&self) -> usize {
        self.n_clients - self.n_nonprivate()
    }

    /// Estimation-setting spec that agrees with `p` on counts and sizes.
    pub fn from_analytic(kind: PopulationKind, p: &AnalyticParams, seed: u64) -> Self {
        PopulationSpec {
            kind,
            analytic: Some(*p),
            n_clients: p.n_clients,
            samples_per_client: p.samples_per_client,
            rho_np: p.rho_np(),
            skew: None,
            test_fraction: 0.0,
            source: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::config("population.n_clients", "must be >= 1"));
        }
        if self.samples_per_client == 0 {
            return Err(Error::config("population.samples_per_client", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.rho_np) {
            return Err(Error::config("population.rho_np", "must be in [0,1]"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("population.test_fraction", "must be in [0,1)"));
        }
        if self.train_count() == 0 {
            return Err(Error::config(
                "population.test_fraction",
                "must leave at least one training sample per client",
            ));
        }
        match self.kind {
            PopulationKind::PointEstimation | PopulationKind::LinearRegression => {
                if self.skew.is_some() {
                    return Err(Error::config("population.skew", "only valid for label_shard"));
                }
                let Some(p) = &self.analytic else {
                    return Err(Error::config(
                        "population.analytic",
                        "required for point_estimation and linear_regression",
                    ));
                };
                p.validate()?;
                if p.n_clients != self.n_clients || p.samples_per_client != self.samples_per_client {
                    return Err(Error::config(
                        "population.analytic",
                        "n_clients and samples_per_client must match the population",
                    ));
                }
                if p.n_private != self.n_private() {
                    return Err(Error::config(
                        "population.rho_np",
                        "rho_np * n_clients must round to the non-private count",
                    ));
                }
                if self.kind == PopulationKind::PointEstimation && p.dim != 1 {
                    return Err(Error::config("population.analytic.dim", "must be 1 for point estimation"));
                }
            }
            PopulationKind::LabelShard => {
                if let Some(PoolSource::Synthetic { per_class, n_features, n_classes, separation }) = &self.source {
                    if *per_class == 0 || *n_features == 0 || *n_classes < 2 || *n_classes > 256 {
                        return Err(Error::config(
                            "population.source",
                            "synthetic pool needs per_class >= 1, n_features >= 1, 2 <= n_classes <= 256",
                        ));
                    }
                    if !(*separation >= 0.0 && separation.is_finite()) {
                        return Err(Error::config("population.source.separation", "must be >= 0"));
                    }
                }
            }
        }
        Ok(())
    }

    fn test_count(&self) -> usize {
        (self.test_fraction * self.samples_per_client as f64).round() as usize
    }

    fn train_count(&self) -> usize {
        self.samples_per_client.saturating_sub(self.test_count())
    }
}

/// Clients plus their held-out evaluation data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub spec: PopulationSpec,
    pub clients: Vec<ClientRecord>,
    /// Per-client held-out split, aligned with `clients`. Empty datasets are
    /// allowed when the spec holds nothing out.
    pub test_sets: Vec<LocalDataset>,
}

impl Population {
    pub fn loss(&self) -> LossKind {
        self.spec.kind.loss()
    }

    pub fn model_dim(&self) -> usize {
        self.clients[0].dataset.model_dim()
    }

    pub fn n_private(&self) -> usize {
        self.clients.iter().filter(|c| c.is_private).count()
    }

    /// Union of every client's held-out split.
    pub fn server_test_set(&self) -> Option<LocalDataset> {
        let sets: Vec<&LabeledExamples> = self
            .test_sets
            .iter()
            .filter_map(|t| match t {
                LocalDataset::LabeledExamples(ex) if !ex.is_empty() => Some(ex),
                _ => None,
            })
            .collect();
        let first = sets.first()?;
        let mut out = LabeledExamples {
            features: Vec::new(),
            n_features: first.n_features,
            labels: Vec::new(),
            n_classes: first.n_classes,
        };
        for s in sets {
            out.features.extend_from_slice(&s.features);
            out.labels.extend_from_slice(&s.labels);
        }
        Some(LocalDataset::LabeledExamples(out))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            offset: e.column(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Points the estimation-setting data were generated from. Held apart from
/// [`Population`] so training code cannot read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub global: ModelVector,
    pub clients: Vec<ModelVector>,
}

/// Build any population the spec describes.
pub fn generate(spec: &PopulationSpec) -> Result<(Population, Option<GroundTruth>)> {
    match spec.kind {
        PopulationKind::PointEstimation => {
            gen_point_population(spec).map(|(p, t)| (p, Some(t)))
        }
        PopulationKind::LinearRegression => {
            gen_regression_population(spec).map(|(p, t)| (p, Some(t)))
        }
        PopulationKind::LabelShard => {
            let source = spec.source.clone().unwrap_or_default();
            let pool = match &source {
                PoolSource::Synthetic { per_class, n_features, n_classes, separation } => {
                    synthetic_pool(*per_class, *n_features, *n_classes, *separation, spec.seed)?
                }
                PoolSource::Idx { images, labels } => load_idx(images, labels)?,
            };
            gen_label_shard_population(spec, &pool).map(|p| (p, None))
        }
    }
}

fn population_rng(spec: &PopulationSpec) -> StreamRng {
    stream(spec.seed, 0, 0, Purpose::Population)
}

/// Indices of opted-out clients: a seeded random subset, or a random subset
/// of the eligible ones when `eligible` is given.
fn choose_nonprivate(spec: &PopulationSpec, eligible: Option<&[usize]>) -> Result<Vec<bool>> {
    let want = spec.n_nonprivate();
    let mut candidates: Vec<usize> = match eligible {
        Some(e) => e.to_vec(),
        None => (0..spec.n_clients).collect(),
    };
    if candidates.len() < want {
        return Err(Error::config(
            "population.skew",
            format!(
                "only {} clients hold the skew label but {want} must opt out",
                candidates.len()
            ),
        ));
    }
    let mut rng = stream(spec.seed, 0, 0, Purpose::Split);
    candidates.shuffle(&mut rng);
    let mut out = vec![true; spec.n_clients];
    for &i in &candidates[..want] {
        out[i] = false;
    }
    Ok(out)
}

fn split_indices(spec: &PopulationSpec, client: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..spec.samples_per_client).collect();
    let n_test = spec.test_count();
    if n_test == 0 {
        return (idx, Vec::new());
    }
    idx.shuffle(&mut stream(spec.seed, 1, client as u64, Purpose::Split));
    let test = idx.split_off(spec.samples_per_client - n_test);
    (idx, test)
}

fn assemble(spec: &PopulationSpec, datasets: Vec<LocalDataset>, private: Vec<bool>) -> Population {
    let mut clients = Vec::with_capacity(datasets.len());
    let mut test_sets = Vec::with_capacity(datasets.len());
    for (id, (data, is_private)) in datasets.into_iter().zip(private).enumerate() {
        let (train, test) = split_indices(spec, id);
        test_sets.push(data.select(&test));
        clients.push(ClientRecord {
            id,
            is_private,
            dataset: data.select(&train),
            personalized_model: None,
        });
    }
    Population {
        spec: spec.clone(),
        clients,
        test_sets,
    }
}

fn analytic_of(spec: &PopulationSpec, kind: PopulationKind) -> Result<AnalyticParams> {
    if spec.kind != kind {
        return Err(Error::config("population.kind", format!("expected {kind:?}")));
    }
    spec.validate()?;
    Ok(spec.analytic.expect("validated"))
}

fn normal(var: f64) -> Normal<f64> {
    Normal::new(0.0, var.sqrt()).expect("variance validated as finite and >= 0")
}

/// Scalar estimation: client points scatter around a global point with
/// variance `tau2`, and each sample adds noise of variance `beta2`.
pub fn gen_point_population(spec: &PopulationSpec) -> Result<(Population, GroundTruth)> {
    let p = analytic_of(spec, PopulationKind::PointEstimation)?;
    let mut rng = population_rng(spec);
    let phi: f64 = rng.sample(StandardNormal);
    let (spread, noise) = (normal(p.tau2), normal(p.beta2));
    let mut truths = Vec::with_capacity(spec.n_clients);
    let mut datasets = Vec::with_capacity(spec.n_clients);
    for _ in 0..spec.n_clients {
        let phi_j = phi + spread.sample(&mut rng);
        let observations = (0..spec.samples_per_client)
            .map(|_| phi_j + noise.sample(&mut rng))
            .collect();
        truths.push(ModelVector::scalar(phi_j));
        datasets.push(LocalDataset::PointSamples { observations });
    }
    let private = choose_nonprivate(spec, None)?;
    Ok((
        assemble(spec, datasets, private),
        GroundTruth {
            global: ModelVector::scalar(phi),
            clients: truths,
        },
    ))
}

/// `n x d` matrix with orthogonal columns of squared norm `n`, from the QR
/// factorization of a Gaussian matrix.
pub fn orthogonal_design<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<nalgebra::DMatrix<f64>> {
    if n < d {
        return Err(Error::InfeasibleDesign { samples: n, dim: d });
    }
    let g = nalgebra::DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(rng));
    let q = g.qr().q();
    Ok(q * (n as f64).sqrt())
}

/// Linear regression with orthogonal designs: `x_j = F_j φ_j + v_j`,
/// `F_jᵀF_j = n_s I`.
pub fn gen_regression_population(spec: &PopulationSpec) -> Result<(Population, GroundTruth)> {
    if spec.kind != PopulationKind::LinearRegression {
        return Err(Error::config("population.kind", "expected LinearRegression"));
    }
    if let Some(p) = &spec.analytic {
        if spec.samples_per_client < p.dim {
            return Err(Error::InfeasibleDesign {
                samples: spec.samples_per_client,
                dim: p.dim,
            });
        }
    }
    let p = analytic_of(spec, PopulationKind::LinearRegression)?;
    let (n, d) = (spec.samples_per_client, p.dim);
    let mut rng = population_rng(spec);
    let phi: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let (spread, noise) = (normal(p.tau2), normal(p.beta2));
    let mut truths = Vec::with_capacity(spec.n_clients);
    let mut datasets = Vec::with_capacity(spec.n_clients);
    for _ in 0..spec.n_clients {
        let phi_j: Vec<f64> = phi.iter().map(|m| m + spread.sample(&mut rng)).collect();
        let f = orthogonal_design(n, d, &mut rng)?;
        let fitted = &f * nalgebra::DVector::from_column_slice(&phi_j);
        let responses = fitted.iter().map(|y| y + noise.sample(&mut rng)).collect();
        let mut features = Vec::with_capacity(n * d);
        for i in 0..n {
            features.extend(f.row(i).iter());
        }
        truths.push(ModelVector::new(phi_j));
        datasets.push(LocalDataset::RegressionSamples {
            features,
            dim: d,
            responses,
        });
    }
    let private = choose_nonprivate(spec, None)?;
    Ok((
        assemble(spec, datasets, private),
        GroundTruth {
            global: ModelVector::new(phi),
            clients: truths,
        },
    ))
}

/// Gaussian class clusters: each class has a seeded center and points add
/// unit-variance noise.
pub fn synthetic_pool(
    per_class: usize,
    n_features: usize,
    n_classes: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledExamples> {
    if !(2..=256).contains(&n_classes) || n_features == 0 {
        return Err(Error::config("pool", "needs 2..=256 classes and at least one feature"));
    }
    let mut rng = stream(seed, 0, 0, Purpose::Pool);
    let centers: Vec<f64> = (0..n_classes * n_features)
        .map(|_| separation * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut features = Vec::with_capacity(per_class * n_classes * n_features);
    let mut labels = Vec::with_capacity(per_class * n_classes);
    for k in 0..n_classes {
        let center = &centers[k * n_features..(k + 1) * n_features];
        for _ in 0..per_class {
            features.extend(center.iter().map(|c| c + rng.sample::<f64, _>(StandardNormal)));
            labels.push(k as u8);
        }
    }
    Ok(LabeledExamples {
        features,
        n_features,
        labels,
        n_classes,
    })
}

/// Single-label clients: labels are dealt round-robin over a shuffled client
/// order, and each client draws distinct examples of its label from the pool.
pub fn gen_label_shard_population(spec: &PopulationSpec, pool: &LabeledExamples) -> Result<Population> {
    if spec.kind != PopulationKind::LabelShard {
        return Err(Error::config("population.kind", "expected LabelShard"));
    }
    spec.validate()?;
    let c = pool.n_classes;
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in pool.labels.iter().enumerate() {
        by_label[y as usize].push(i);
    }
    for (label, idx) in by_label.iter().enumerate() {
        if idx.len() < spec.samples_per_client {
            return Err(Error::InsufficientPool {
                label: label as u8,
                available: idx.len(),
                required: spec.samples_per_client,
            });
        }
    }
    if let Some(digit) = spec.skew {
        if digit as usize >= c {
            return Err(Error::config("population.skew", format!("label must be < {c}")));
        }
    }

    let mut rng = population_rng(spec);
    let mut order: Vec<usize> = (0..spec.n_clients).collect();
    order.shuffle(&mut rng);
    let mut client_label = vec![0usize; spec.n_clients];
    for (slot, &client) in order.iter().enumerate() {
        client_label[client] = slot % c;
    }

    let mut datasets = Vec::with_capacity(spec.n_clients);
    for &label in &client_label {
        let chosen: Vec<usize> = by_label[label]
            .choose_multiple(&mut rng, spec.samples_per_client)
            .copied()
            .collect();
        datasets.push(LocalDataset::LabeledExamples(pool.select(&chosen)));
    }

    let eligible: Option<Vec<usize>> = spec.skew.map(|digit| {
        (0..spec.n_clients)
            .filter(|&i| client_label[i] == digit as usize)
            .collect()
    });
    let private = choose_nonprivate(spec, eligible.as_deref())?;
    Ok(assemble(spec, datasets, private))
}

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let Some(b) = self.bytes.get(self.pos..end) else {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!("truncated {what}"),
            });
        };
        self.pos = end;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, want: u32) -> Result<()> {
        let at = self.pos;
        let got = self.u32("magic number")?;
        if got != want {
            return Err(Error::Parse {
                offset: at,
                message: format!("bad magic number {got:#010x}, expected {want:#010x}"),
            });
        }
        Ok(())
    }

    fn body(&mut self, len: usize) -> Result<&[u8]> {
        let end = self.pos + len;
        let Some(b) = self.bytes.get(self.pos..end) else {
            return Err(Error::Parse {
                offset: self.bytes.len(),
                message: format!("truncated data: expected {len} bytes from offset {}", self.pos),
            });
        };
        self.pos = end;
        Ok(b)
    }
}

/// Decode an IDX image file: returns `(count, rows, cols, pixels in [0,1])`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut c = Cursor { bytes, pos: 0 };
    c.magic(IMAGE_MAGIC)?;
    let n = c.u32("image count")? as usize;
    let rows = c.u32("row count")? as usize;
    let cols = c.u32("column count")? as usize;
    let pixels = c.body(n * rows * cols)?.iter().map(|&p| p as f64 / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

/// Decode an IDX label file; every label must be a digit.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut c = Cursor { bytes, pos: 0 };
    c.magic(LABEL_MAGIC)?;
    let n = c.u32("label count")? as usize;
    let start = c.pos;
    let labels = c.body(n)?.to_vec();
    if let Some(i) = labels.iter().position(|&y| y > 9) {
        return Err(Error::Parse {
            offset: start + i,
            message: format!("label {} outside [0, 9]", labels[i]),
        });
    }
    Ok(labels)
}

/// Load an image/label IDX pair as flattened examples over ten classes.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledExamples> {
    let (n, rows, cols, features) = parse_idx_images(&std::fs::read(images)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels)?)?;
    if labels.len() != n {
        return Err(Error::config(
            "idx",
            format!("{n} images but {} labels", labels.len()),
        ));
    }
    Ok(LabeledExamples {
        features,
        n_features: rows * cols,
        labels,
        n_classes: 10,
    })
}
