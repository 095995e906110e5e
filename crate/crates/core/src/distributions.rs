//! Diagonal Gaussian posteriors, fixed-mean isotropic priors, and the
//! entropy penalties applied to the sensitive discriminator's output.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Bounds applied to log-std head outputs before exponentiation.
pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 10.0;

/// Floor applied to probabilities before taking their log.
pub const PROB_FLOOR: f64 = 1e-12;

const NORMALIZATION_TOL: f64 = 1e-6;

/// `N(mean, diag(std²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::shape("DiagGaussian", &[mean.len()], &[std.len()]));
        }
        if let Some(bad) = std.iter().find(|&&s| s.is_nan() || s <= 0.0) {
            return Err(Error::Numeric(format!("non-positive std {bad}")));
        }
        Ok(DiagGaussian { mean, std })
    }

    /// Builds the posterior from an unconstrained log-std head output.
    pub fn from_log_std(mean: Vec<f64>, log_std: &[f64]) -> Result<Self> {
        let std = log_std
            .iter()
            .map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX).exp())
            .collect();
        DiagGaussian::new(mean, std)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }
}

/// Isotropic unit-covariance prior `N(mean, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub mean: Vec<f64>,
}

impl PriorSpec {
    pub fn new(mean: Vec<f64>) -> Self {
        PriorSpec { mean }
    }

    /// `k`-th standard basis vector of length `dim`.
    pub fn basis(dim: usize, k: usize) -> Result<Self> {
        if k >= dim {
            return Err(Error::Config(format!(
                "basis vector {k} does not exist in dimension {dim}"
            )));
        }
        let mut mean = vec![0.0; dim];
        mean[k] = 1.0;
        Ok(PriorSpec { mean })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn norm(&self) -> f64 {
        self.mean.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &PriorSpec) -> f64 {
        self.mean.iter().zip(&other.mean).map(|(a, b)| a * b).sum()
    }
}

/// Default target/sensitive prior means: the first and second basis
/// vectors of the ambient space `max(d_target, d_sensitive)`, truncated to
/// each branch's own dimension.
pub fn orthogonal_priors(d_target: usize, d_sensitive: usize) -> Result<(PriorSpec, PriorSpec)> {
    if d_target < 2 || d_sensitive < 2 {
        return Err(Error::Config(format!(
            "orthogonal priors need code dims >= 2, got {d_target} and {d_sensitive}"
        )));
    }
    Ok((PriorSpec::basis(d_target, 0)?, PriorSpec::basis(d_sensitive, 1)?))
}

/// Checks that two prior means are unit norm and orthogonal once zero-padded
/// to a common dimension.
pub fn check_orthonormal(a: &PriorSpec, b: &PriorSpec, tol: f64) -> Result<()> {
    for (name, p) in [("target", a), ("sensitive", b)] {
        if (p.norm() - 1.0).abs() > tol {
            return Err(Error::Config(format!(
                "{name} prior mean has norm {} (expected 1)",
                p.norm()
            )));
        }
    }
    let dot = a.dot(b);
    if dot.abs() > tol {
        return Err(Error::Config(format!(
            "prior means are not orthogonal (dot = {dot})"
        )));
    }
    Ok(())
}

/// `KL(post || N(prior, I)) = ½ Σ (σ² + (μ − m)² − 1 − ln σ²)`.
pub fn kl_to_prior(post: &DiagGaussian, prior: &PriorSpec) -> Result<f64> {
    if post.dim() != prior.dim() {
        return Err(Error::shape("kl_to_prior", &[post.dim()], &[prior.dim()]));
    }
    let mut kl = 0.0;
    for ((&mu, &sd), &m) in post.mean.iter().zip(&post.std).zip(&prior.mean) {
        if sd.is_nan() || sd <= 0.0 {
            return Err(Error::Numeric(format!("non-positive std {sd}")));
        }
        let var = sd * sd;
        kl += var + (mu - m) * (mu - m) - 1.0 - var.ln();
    }
    Ok(0.5 * kl)
}

/// `z = μ + σ ⊙ ε`.
pub fn reparam_sample(post: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != post.dim() {
        return Err(Error::shape("reparam_sample", &[post.dim()], &[noise.len()]));
    }
    Ok(post
        .mean
        .iter()
        .zip(&post.std)
        .zip(noise)
        .map(|((m, s), e)| m + s * e)
        .collect())
}

/// Tape version of [`reparam_sample`] over a batch: `mu + exp(log_std) ⊙ noise`.
/// `log_std` is expected to be clamped already. The noise enters as a constant.
pub fn reparam_on_tape(tape: &mut Tape, mu: Var, log_std: Var, noise: Var) -> Result<Var> {
    let sigma = tape.exp(log_std)?;
    let spread = tape.mul(sigma, noise)?;
    tape.add(mu, spread)
}

fn check_normalized(probs: &[f64]) -> Result<()> {
    if probs.len() < 2 {
        return Err(Error::Contract(format!(
            "class distribution needs at least 2 entries, got {}",
            probs.len()
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL || probs.iter().any(|p| *p < 0.0) {
        return Err(Error::Numeric(format!(
            "probabilities are not normalized (sum = {total})"
        )));
    }
    Ok(())
}

/// `Σ_j q_j ln max(q_j, 1e-12)`; lies in `[−ln m, 0]`.
pub fn neg_entropy(probs: &[f64]) -> Result<f64> {
    check_normalized(probs)?;
    Ok(probs
        .iter()
        .map(|&q| q * q.clamp(PROB_FLOOR, 1.0).ln())
        .sum())
}

/// `KL(q || U) = ln m + Σ q ln q`.
pub fn kl_to_uniform(probs: &[f64]) -> Result<f64> {
    Ok((probs.len() as f64).ln() + neg_entropy(probs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(mean: &[f64], std: &[f64]) -> DiagGaussian {
        DiagGaussian::new(mean.to_vec(), std.to_vec()).unwrap()
    }

    /// Monte-Carlo estimate of `E_q[ln q(z) − ln p(z)]` and its standard error.
    fn monte_carlo_kl(post: &DiagGaussian, prior: &PriorSpec, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let mut diff = 0.0;
            for i in 0..post.dim() {
                let eps: f64 = StandardNormal.sample(&mut rng);
                let z = post.mean()[i] + post.std()[i] * eps;
                // log-normalizers cancel except for ln σ
                let log_q = -0.5 * eps * eps - post.std()[i].ln();
                let log_p = -0.5 * (z - prior.mean[i]).powi(2);
                diff += log_q - log_p;
            }
            sum += diff;
            sum_sq += diff * diff;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        (mean, (var / n as f64).sqrt())
    }

    #[test]
    fn kl_examples() {
        let e1 = PriorSpec::new(vec![1.0, 0.0]);
        assert_eq!(kl_to_prior(&gauss(&[1., 0.], &[1., 1.]), &e1).unwrap(), 0.0);
        assert_abs_diff_eq!(
            kl_to_prior(&gauss(&[0., 1.], &[1., 1.]), &e1).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            kl_to_prior(&gauss(&[1., 0.], &[0.5, 1.]), &e1).unwrap(),
            0.31815,
            epsilon = 1e-5
        );
    }

    #[test]
    fn kl_examples_agree_with_monte_carlo() {
        let e1 = PriorSpec::new(vec![1.0, 0.0]);
        for (post, seed) in [
            (gauss(&[0., 1.], &[1., 1.]), 11),
            (gauss(&[1., 0.], &[0.5, 1.]), 12),
        ] {
            let closed = kl_to_prior(&post, &e1).unwrap();
            let (mc, se) = monte_carlo_kl(&post, &e1, 100_000, seed);
            assert!((mc - closed).abs() <= 3.0 * se, "{mc} vs {closed} (se {se})");
        }
    }

    #[test]
    fn kl_errors() {
        let e1 = PriorSpec::new(vec![1.0, 0.0, 0.0]);
        assert!(kl_to_prior(&gauss(&[0., 1.], &[1., 1.]), &e1).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![0.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0, 1.0], vec![1.0]).is_err());
    }

    #[test]
    fn reparam_examples() {
        let post = gauss(&[0.5, -1.0], &[1.0, 2.0]);
        assert_eq!(reparam_sample(&post, &[0.0, 0.0]).unwrap(), vec![0.5, -1.0]);

        let narrow = DiagGaussian::from_log_std(vec![0.5, -1.0], &[-30.0, -30.0]).unwrap();
        let z = reparam_sample(&narrow, &[3.0, -2.5]).unwrap();
        assert_abs_diff_eq!(z[0], 0.5, epsilon = 1e-3);
        assert_abs_diff_eq!(z[1], -1.0, epsilon = 1e-3);

        let post = gauss(&[0.0, 0.0], &[1.0, 2.0]);
        assert_eq!(reparam_sample(&post, &[1.0, -1.0]).unwrap(), vec![1.0, -2.0]);
        assert!(reparam_sample(&post, &[1.0]).is_err());
    }

    #[test]
    fn reparam_on_tape_has_exact_local_gradients() {
        use crate::autodiff::Tensor;
        let mut tape = Tape::new();
        let mu = tape.param(Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap());
        let ls = tape.param(Tensor::matrix(1, 2, vec![0.0, 2f64.ln()]).unwrap());
        let eps = tape.constant(Tensor::matrix(1, 2, vec![0.7, -1.1]).unwrap());
        let z = reparam_on_tape(&mut tape, mu, ls, eps).unwrap();
        assert_abs_diff_eq!(tape.value(z).data()[1], -0.2 - 2.2, epsilon = 1e-12);
        let s = tape.sum(z).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(mu).unwrap().data(), &[1.0, 1.0]);
        // dz/dlog_std = σ ε, i.e. dz/dσ = ε
        let gl = g.get(ls).unwrap().data();
        assert_abs_diff_eq!(gl[0], 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(gl[1] / 2.0, -1.1, epsilon = 1e-15);
        assert!(g.get(eps).is_none());
    }

    #[test]
    fn entropy_examples() {
        assert_abs_diff_eq!(neg_entropy(&[0.5, 0.5]).unwrap(), -std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(neg_entropy(&[1.0, 0.0]).unwrap(), 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(neg_entropy(&[0.9, 0.1]).unwrap(), -0.32508, epsilon = 1e-5);

        assert_eq!(kl_to_uniform(&[0.5, 0.5]).unwrap(), 0.0);
        assert_abs_diff_eq!(kl_to_uniform(&[0.25; 4]).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(kl_to_uniform(&[0.9, 0.1]).unwrap(), 0.36807, epsilon = 1e-5);

        assert!(neg_entropy(&[0.6, 0.6]).is_err());
        assert!(kl_to_uniform(&[0.2, 0.2]).is_err());
    }

    #[test]
    fn orthogonal_priors_generalize_the_planar_case() {
        let (t, s) = orthogonal_priors(2, 2).unwrap();
        assert_eq!(t.mean, vec![1.0, 0.0]);
        assert_eq!(s.mean, vec![0.0, 1.0]);
        check_orthonormal(&t, &s, 1e-12).unwrap();

        let (t, s) = orthogonal_priors(4, 3).unwrap();
        assert_eq!(t.mean, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.mean, vec![0.0, 1.0, 0.0]);
        check_orthonormal(&t, &s, 1e-12).unwrap();

        assert!(orthogonal_priors(1, 2).is_err());
        assert!(check_orthonormal(&t, &t, 1e-12).is_err());
        assert!(check_orthonormal(&PriorSpec::new(vec![2.0, 0.0]), &s, 1e-12).is_err());
    }

    fn posterior(dim: usize) -> impl Strategy<Value = DiagGaussian> {
        (
            prop::collection::vec(-2.0f64..2.0, dim),
            prop::collection::vec(-1.5f64..1.0, dim),
        )
            .prop_map(|(m, l)| DiagGaussian::from_log_std(m, &l).unwrap())
    }

    fn distribution() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, 2..8).prop_map(|w| {
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect()
        })
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_zero_only_at_prior(
            post in posterior(3),
            prior_mean in prop::collection::vec(-1.0f64..1.0, 3),
        ) {
            let prior = PriorSpec::new(prior_mean.clone());
            let kl = kl_to_prior(&post, &prior).unwrap();
            prop_assert!(kl >= 0.0);
            let at_prior = DiagGaussian::new(prior_mean, vec![1.0; 3]).unwrap();
            prop_assert_eq!(kl_to_prior(&at_prior, &prior).unwrap(), 0.0);
            let moved = post.mean().iter().zip(&prior.mean).any(|(a, b)| (a - b).abs() > 1e-3)
                || post.std().iter().any(|s| (s - 1.0).abs() > 1e-3);
            if moved {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn uniform_minimizes_neg_entropy(p in distribution()) {
            let m = p.len();
            let uniform = vec![1.0 / m as f64; m];
            prop_assert!(neg_entropy(&p).unwrap() >= neg_entropy(&uniform).unwrap() - 1e-12);
        }

        #[test]
        fn kl_to_uniform_offset_is_ln_m(p in distribution()) {
            let m = p.len() as f64;
            let diff = kl_to_uniform(&p).unwrap() - neg_entropy(&p).unwrap();
            prop_assert!((diff - m.ln()).abs() <= 1e-12);
        }
    }
}
