use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::load::content_hash;
use super::schema::Stratify;
use super::split::stratified_split;
use super::{standardize_on_train, Dataset, LoadReport, SplitTag};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn default_rows() -> usize {
    10_000
}

fn default_latent() -> usize {
    1
}

fn default_dim() -> usize {
    10
}

fn default_hidden() -> usize {
    16
}

fn default_noise() -> f64 {
    0.1
}

fn default_test_fraction() -> f64 {
    0.2
}

/// Two latent factors `u_y`, `u_s` with per-coordinate correlation `rho`,
/// observed through a fixed random `affine → tanh → affine` map plus noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_rows")]
    pub rows: usize,
    /// Width of each latent factor; labels use the first coordinate.
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    #[serde(default)]
    pub rho: f64,
    /// Observation width D.
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_hidden")]
    pub mixing_hidden: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            rows: default_rows(),
            latent_dim: default_latent(),
            rho: 0.0,
            dim: default_dim(),
            mixing_hidden: default_hidden(),
            noise: default_noise(),
            seed: 0,
            test_fraction: default_test_fraction(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows < 8 || self.latent_dim == 0 || self.dim == 0 || self.mixing_hidden == 0 {
            return Err(Error::Config(
                "synthetic rows must be >= 8 and all widths positive".into(),
            ));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("synthetic rho must lie in [-1, 1], got {}", self.rho)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("synthetic noise must be >= 0, got {}", self.noise)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("synthetic test_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// A generated dataset together with its latent factors `[u_y | u_s]`.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub latents: Tensor,
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    Ok(gen_synthetic_with_latents(spec)?.dataset)
}

pub fn gen_synthetic_with_latents(spec: &SyntheticSpec) -> Result<Synthetic> {
    spec.validate()?;
    let k = spec.latent_dim;
    let (h, d) = (spec.mixing_hidden, spec.dim);

    // the mixing map has its own stream so it does not depend on the row count
    let mut map_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    map_rng.set_stream(1);
    let normal = |rng: &mut ChaCha8Rng, n: usize, scale: f64| -> Vec<f64> {
        (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let a1 = normal(&mut map_rng, 2 * k * h, 1.0);
    let b1 = normal(&mut map_rng, h, 0.5);
    let a2 = normal(&mut map_rng, h * d, 1.0 / (h as f64).sqrt());

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = (1.0 - spec.rho * spec.rho).max(0.0).sqrt();
    let mut latents = Vec::with_capacity(spec.rows * 2 * k);
    let mut x = Vec::with_capacity(spec.rows * d);
    let (mut y, mut s) = (Vec::with_capacity(spec.rows), Vec::with_capacity(spec.rows));
    let mut u = vec![0.0; 2 * k];
    let mut hidden = vec![0.0; h];
    for _ in 0..spec.rows {
        for j in 0..k {
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            u[j] = e1;
            u[k + j] = spec.rho * e1 + c * e2;
        }
        y.push(usize::from(u[0] > 0.0));
        s.push(usize::from(u[k] > 0.0));
        latents.extend_from_slice(&u);
        for (q, hq) in hidden.iter_mut().enumerate() {
            let z: f64 = b1[q] + u.iter().enumerate().map(|(p, up)| up * a1[p * h + q]).sum::<f64>();
            *hq = z.tanh();
        }
        for r in 0..d {
            let clean: f64 = hidden.iter().enumerate().map(|(q, hq)| hq * a2[q * d + r]).sum();
            x.push(clean + spec.noise * rng.sample::<f64, _>(StandardNormal));
        }
    }

    let (train, _) = stratified_split(&y, &s, 1.0 - spec.test_fraction, spec.seed, Stratify::Both)?;
    let mut split = vec![SplitTag::Test; spec.rows];
    for i in train {
        split[i] = SplitTag::Train;
    }
    let mut x = Tensor::matrix(spec.rows, d, x)?;
    standardize_on_train(&mut x, &split);

    let spec_json = serde_json::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    let dataset = Dataset {
        name: "synthetic".into(),
        x,
        y,
        s,
        split,
        target_classes: 2,
        sensitive_classes: 2,
        feature_names: (0..d).map(|i| format!("x{i}")).collect(),
        provenance: content_hash(spec_json.as_bytes()),
        report: LoadReport {
            rows_read: spec.rows,
            ..LoadReport::default()
        },
        encoder: None,
    };
    Ok(Synthetic {
        dataset,
        latents: Tensor::matrix(spec.rows, 2 * k, latents)?,
    })
}
