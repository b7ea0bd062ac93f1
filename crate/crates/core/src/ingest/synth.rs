//! Synthetic non-IID flow data.
//!
//! Each client draws benign rows from its own Gaussian mixture. Attack rows
//! start from a benign draw, are stretched about the cluster mean and then
//! shifted by `offset` along the client's attack features, so attacks leave
//! the benign manifold in a client-specific direction.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::{FeatureSchema, FlowDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Default for ScalarOrVec {
    fn default() -> Self {
        ScalarOrVec::Scalar(1.0)
    }
}

impl ScalarOrVec {
    pub fn expand(&self, n: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            ScalarOrVec::Scalar(v) => Ok(vec![*v; n]),
            ScalarOrVec::Vector(v) if v.len() == n => Ok(v.clone()),
            ScalarOrVec::Vector(v) => Err(Error::config(format!(
                "{what} has {} entries, expected {n}",
                v.len()
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CovarianceSpec {
    /// Independent features with the given standard deviations.
    Diagonal { std: ScalarOrVec },
    /// `W W^T + noise^2 I` with a seeded random `features x rank` loading
    /// matrix whose entries have standard deviation `loading / sqrt(rank)`.
    Factor {
        rank: usize,
        loading: f64,
        noise: f64,
        seed: u64,
    },
    /// Explicit covariance; must be symmetric positive definite.
    Full { matrix: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    #[serde(default = "one")]
    pub weight: f64,
    pub mean: ScalarOrVec,
    pub covariance: CovarianceSpec,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub offset: f64,
    /// Feature indices the offset is applied to; empty means all.
    #[serde(default)]
    pub features: Vec<usize>,
    #[serde(default = "one")]
    pub stretch: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClientSpec {
    pub name: String,
    pub benign_rows: usize,
    #[serde(default)]
    pub attack_rows: usize,
    pub clusters: Vec<ClusterSpec>,
    pub attack: Option<AttackSpec>,
    /// Emit the dataset without labels (benign-only capture).
    #[serde(default)]
    pub unlabeled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Per-feature unit multiplier applied after sampling, shared by all
    /// clients.
    #[serde(default)]
    pub feature_scale: ScalarOrVec,
    pub clients: Vec<SynthClientSpec>,
}

enum Shape {
    Diagonal(Vec<f64>),
    Factor { loadings: Matrix, noise: f64 },
    Cholesky(Matrix),
}

struct Cluster {
    weight: f64,
    mean: Vec<f64>,
    shape: Shape,
}

impl Cluster {
    fn build(spec: &ClusterSpec, dim: usize) -> Result<Self> {
        if !(spec.weight > 0.0) {
            return Err(Error::config("cluster weight must be positive"));
        }
        let mean = spec.mean.expand(dim, "cluster mean")?;
        let shape = match &spec.covariance {
            CovarianceSpec::Diagonal { std } => {
                let std = std.expand(dim, "cluster std")?;
                if std.iter().any(|&s| !(s > 0.0)) {
                    return Err(Error::config(
                        "diagonal covariance is not positive definite (std must be > 0)",
                    ));
                }
                Shape::Diagonal(std)
            }
            CovarianceSpec::Factor {
                rank,
                loading,
                noise,
                seed,
            } => {
                if *rank == 0 || !(*noise > 0.0) {
                    return Err(Error::config(
                        "factor covariance needs rank >= 1 and noise > 0 to be positive definite",
                    ));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let scale = loading / (*rank as f64).sqrt();
                let data = (0..dim * rank)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Shape::Factor {
                    loadings: Matrix::new(data, *rank)?,
                    noise: *noise,
                }
            }
            CovarianceSpec::Full { matrix } => {
                if matrix.len() != dim || matrix.iter().any(|r| r.len() != dim) {
                    return Err(Error::config(format!("full covariance must be {dim}x{dim}")));
                }
                let m = DMatrix::from_fn(dim, dim, |i, j| matrix[i][j]);
                if (&m - m.transpose()).abs().max() > 1e-12 {
                    return Err(Error::config("covariance is not symmetric"));
                }
                let chol = m
                    .cholesky()
                    .ok_or_else(|| Error::config("covariance is not positive definite"))?;
                let l = chol.l();
                let data = (0..dim).flat_map(|i| (0..dim).map(move |j| (i, j))).map(|(i, j)| l[(i, j)]);
                Shape::Cholesky(Matrix::new(data.collect(), dim)?)
            }
        };
        Ok(Self {
            weight: spec.weight,
            mean,
            shape,
        })
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let dim = self.mean.len();
        match &self.shape {
            Shape::Diagonal(std) => {
                for i in 0..dim {
                    out[i] = self.mean[i] + std[i] * rng.sample::<f64, _>(StandardNormal);
                }
            }
            Shape::Factor { loadings, noise } => {
                let z: Vec<f64> = (0..loadings.cols())
                    .map(|_| rng.sample(StandardNormal))
                    .collect();
                for i in 0..dim {
                    let w = loadings.row(i);
                    let latent: f64 = w.iter().zip(&z).map(|(a, b)| a * b).sum();
                    out[i] = self.mean[i] + latent + noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            Shape::Cholesky(l) => {
                let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                for i in 0..dim {
                    let row = l.row(i);
                    out[i] = self.mean[i] + row[..=i].iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }
}

fn pick<R: Rng + ?Sized>(clusters: &[Cluster], total: f64, rng: &mut R) -> usize {
    let mut u = rng.random::<f64>() * total;
    for (i, c) in clusters.iter().enumerate() {
        if u < c.weight {
            return i;
        }
        u -= c.weight;
    }
    clusters.len() - 1
}

/// One dataset per client, all in the 75-column CIC feature layout. Client
/// `k` draws from ChaCha stream `k` of `seed`, so adding a client never
/// changes the rows of the others.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<Vec<FlowDataset>> {
    if config.clients.is_empty() {
        return Err(Error::config("synthetic config needs at least one client"));
    }
    let schema = Arc::new(FeatureSchema::cic());
    let dim = schema.feature_count();
    let unit = config.feature_scale.expand(dim, "feature_scale")?;
    let mut out = Vec::with_capacity(config.clients.len());
    for (k, client) in config.clients.iter().enumerate() {
        if client.clusters.is_empty() {
            return Err(Error::config(format!("client {} has no clusters", client.name)));
        }
        let clusters = client
            .clusters
            .iter()
            .map(|c| Cluster::build(c, dim))
            .collect::<Result<Vec<_>>>()?;
        let total_weight: f64 = clusters.iter().map(|c| c.weight).sum();
        if client.attack_rows > 0 && client.attack.is_none() {
            return Err(Error::config(format!(
                "client {} requests attack rows without an attack spec",
                client.name
            )));
        }
        if client.unlabeled && client.attack_rows > 0 {
            return Err(Error::config(format!(
                "client {} is unlabeled but requests attack rows",
                client.name
            )));
        }
        let attack_dirs: Vec<f64> = match &client.attack {
            Some(a) if a.features.is_empty() => vec![1.0; dim],
            Some(a) => {
                let mut d = vec![0.0; dim];
                for &f in &a.features {
                    *d.get_mut(f).ok_or_else(|| {
                        Error::config(format!("attack feature {f} out of range"))
                    })? = 1.0;
                }
                d
            }
            None => vec![0.0; dim],
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let rows = client.benign_rows + client.attack_rows;
        let mut data = vec![0.0; rows * dim];
        let mut labels = Vec::with_capacity(rows);
        for (r, row) in data.chunks_exact_mut(dim).enumerate() {
            let c = &clusters[pick(&clusters, total_weight, &mut rng)];
            c.sample(&mut rng, row);
            if r >= client.benign_rows {
                let a = client.attack.as_ref().unwrap();
                for i in 0..dim {
                    row[i] = c.mean[i] + a.stretch * (row[i] - c.mean[i]) + a.offset * attack_dirs[i];
                }
                labels.push(1);
            } else {
                labels.push(0);
            }
            for (v, u) in row.iter_mut().zip(&unit) {
                *v *= u;
            }
        }
        out.push(FlowDataset::new(
            client.name.clone(),
            Matrix::new(data, dim)?,
            (!client.unlabeled).then_some(labels),
            Arc::clone(&schema),
        )?);
    }
    Ok(out)
}
