//! The fair model: a shared trunk, target and sensitive variational branches,
//! a target discriminator and a sensitive discriminator.
//!
//! The sensitive discriminator is evaluated twice per step: on z_S for the
//! supervised sensitive loss and on z_T for the entropy penalty. Both call
//! sites share one parameter set.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::distributions::{
    check_orthonormal, orthogonal_priors, reparam_on_tape, DiagGaussian, PriorSpec, LOG_STD_MAX,
    LOG_STD_MIN,
};
use crate::error::{Error, Result};
use crate::nn::{ActivationKind, DualHead, DualHeadSpec, LossTerm, Mlp, MlpSpec, ParamStore, Partition};

/// Loss configurations compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    /// Deterministic target classifier only.
    Baseline,
    /// Entropy loss, no KL.
    EntropyOnly,
    /// KL with orthogonal prior means, no entropy loss.
    KlOrthOnly,
    /// Target and sensitive heads, no entropy, no KL.
    MultiTask,
    /// Entropy loss plus KL with identical prior means.
    EntropyKlShared,
    /// Entropy loss plus KL with orthogonal prior means.
    #[default]
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Baseline,
        AblationVariant::EntropyOnly,
        AblationVariant::KlOrthOnly,
        AblationVariant::MultiTask,
        AblationVariant::EntropyKlShared,
        AblationVariant::Full,
    ];

    pub fn uses_entropy(self) -> bool {
        matches!(
            self,
            AblationVariant::EntropyOnly | AblationVariant::EntropyKlShared | AblationVariant::Full
        )
    }

    pub fn uses_kl(self) -> bool {
        matches!(
            self,
            AblationVariant::KlOrthOnly | AblationVariant::EntropyKlShared | AblationVariant::Full
        )
    }

    pub fn orthogonal_priors(self) -> bool {
        matches!(self, AblationVariant::KlOrthOnly | AblationVariant::Full)
    }

    pub fn has_sensitive_branch(self) -> bool {
        self != AblationVariant::Baseline
    }

    pub fn is_stochastic(self) -> bool {
        self != AblationVariant::Baseline
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::Baseline => "baseline",
            AblationVariant::EntropyOnly => "entropy-only",
            AblationVariant::KlOrthOnly => "kl-orth-only",
            AblationVariant::MultiTask => "multi-task",
            AblationVariant::EntropyKlShared => "entropy-kl-shared",
            AblationVariant::Full => "full",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Baseline => "Baseline",
            AblationVariant::EntropyOnly => "Entropy w/o KL",
            AblationVariant::KlOrthOnly => "KL Orth. w/o Entropy",
            AblationVariant::MultiTask => "w/o Entropy w/o KL",
            AblationVariant::EntropyKlShared => "Entropy + KL w/o Orth.",
            AblationVariant::Full => "Entropy + KL Orth.",
        }
    }

    /// Terms that contribute to the objective for this variant.
    pub fn active_terms(self) -> Vec<LossTerm> {
        let mut terms = vec![LossTerm::Target];
        if self.has_sensitive_branch() {
            terms.push(LossTerm::Sensitive);
        }
        if self.uses_entropy() {
            terms.push(LossTerm::Entropy);
        }
        if self.uses_kl() {
            terms.push(LossTerm::KlTarget);
            terms.push(LossTerm::KlSensitive);
        }
        terms
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of baseline, entropy-only, \
                     kl-orth-only, multi-task, entropy-kl-shared, full"
                ))
            })
    }
}

fn default_trunk() -> Vec<usize> {
    vec![64]
}

fn default_sensitive_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_code_dim() -> usize {
    2
}

fn default_samples() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input width D; filled from the dataset when zero.
    #[serde(default)]
    pub input_dim: usize,
    #[serde(default = "default_code_dim")]
    pub code_dim: usize,
    /// Sensitive code width; defaults to `code_dim`.
    #[serde(default)]
    pub sensitive_code_dim: Option<usize>,
    #[serde(default = "default_trunk")]
    pub trunk_hidden: Vec<usize>,
    #[serde(default)]
    pub branch_hidden: Vec<usize>,
    /// Hidden layers of the target predictor; empty means logistic regression.
    #[serde(default)]
    pub target_hidden: Vec<usize>,
    #[serde(default = "default_sensitive_hidden")]
    pub sensitive_hidden: Vec<usize>,
    #[serde(default)]
    pub activation: ActivationKind,
    /// Number of target classes n; filled from the dataset when zero.
    #[serde(default)]
    pub target_classes: usize,
    /// Number of sensitive classes m; filled from the dataset when zero.
    #[serde(default)]
    pub sensitive_classes: usize,
    #[serde(default)]
    pub variant: AblationVariant,
    #[serde(default)]
    pub prior_target: Option<Vec<f64>>,
    #[serde(default)]
    pub prior_sensitive: Option<Vec<f64>>,
    /// Monte-Carlo samples per branch per step.
    #[serde(default = "default_samples")]
    pub samples: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 0,
            code_dim: default_code_dim(),
            sensitive_code_dim: None,
            trunk_hidden: default_trunk(),
            branch_hidden: Vec::new(),
            target_hidden: Vec::new(),
            sensitive_hidden: default_sensitive_hidden(),
            activation: ActivationKind::Relu,
            target_classes: 0,
            sensitive_classes: 0,
            variant: AblationVariant::Full,
            prior_target: None,
            prior_sensitive: None,
            samples: 1,
        }
    }
}

impl ModelConfig {
    pub fn sensitive_dim(&self) -> usize {
        self.sensitive_code_dim.unwrap_or(self.code_dim)
    }

    /// Resolves the prior means for the configured variant.
    pub fn priors(&self) -> Result<(PriorSpec, PriorSpec)> {
        let (dt, ds) = (self.code_dim, self.sensitive_dim());
        let pad = |p: &[f64], n: usize| {
            let mut v = p.to_vec();
            v.resize(n, 0.0);
            PriorSpec::new(v)
        };
        if self.variant.orthogonal_priors() {
            let (t, s) = match (&self.prior_target, &self.prior_sensitive) {
                (None, None) => orthogonal_priors(dt, ds)?,
                (t, s) => {
                    let (dt0, ds0) = orthogonal_priors(dt.max(2), ds.max(2))?;
                    let t = t.clone().map(PriorSpec::new).unwrap_or(dt0);
                    let s = s.clone().map(PriorSpec::new).unwrap_or(ds0);
                    (t, s)
                }
            };
            if t.dim() != dt || s.dim() != ds {
                return Err(Error::Config(format!(
                    "prior mean lengths {} / {} do not match code dims {dt} / {ds}",
                    t.dim(),
                    s.dim()
                )));
            }
            let ambient = dt.max(ds);
            check_orthonormal(&pad(&t.mean, ambient), &pad(&s.mean, ambient), 1e-9)?;
            Ok((t, s))
        } else {
            let t = match &self.prior_target {
                Some(m) => PriorSpec::new(m.clone()),
                None => PriorSpec::basis(dt, 0)?,
            };
            if t.dim() != dt {
                return Err(Error::Config(format!(
                    "prior mean length {} does not match code dim {dt}",
                    t.dim()
                )));
            }
            // Shared means: the sensitive branch reuses the target prior.
            let s = pad(&t.mean[..dt.min(ds)], ds);
            Ok((t, s))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("model.input_dim must be positive".into()));
        }
        if self.code_dim == 0 || self.sensitive_dim() == 0 {
            return Err(Error::Config("model.code_dim must be positive".into()));
        }
        if self.target_classes < 2 {
            return Err(Error::Config(format!(
                "model.target_classes must be >= 2, got {}",
                self.target_classes
            )));
        }
        if self.variant.has_sensitive_branch() && self.sensitive_classes < 2 {
            return Err(Error::Config(format!(
                "model.sensitive_classes must be >= 2, got {}",
                self.sensitive_classes
            )));
        }
        if self.samples == 0 {
            return Err(Error::Config("model.samples must be >= 1".into()));
        }
        for (name, widths) in [
            ("trunk_hidden", &self.trunk_hidden),
            ("branch_hidden", &self.branch_hidden),
            ("target_hidden", &self.target_hidden),
            ("sensitive_hidden", &self.sensitive_hidden),
        ] {
            if widths.contains(&0) {
                return Err(Error::Config(format!("model.{name} widths must be positive")));
            }
        }
        if self.variant.uses_kl() {
            self.priors()?;
        }
        Ok(())
    }
}

/// Per-step loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub entropy: f64,
    pub orth_disent: f64,
}

/// Scalar values of every loss term; inactive terms are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_t: f64,
    pub l_s: f64,
    pub l_e: f64,
    pub l_zt: f64,
    pub l_zs: f64,
    pub l_od: f64,
    pub j: f64,
}

impl LossBreakdown {
    pub fn term(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Target => self.l_t,
            LossTerm::Sensitive => self.l_s,
            LossTerm::Entropy => self.l_e,
            LossTerm::KlTarget => self.l_zt,
            LossTerm::KlSensitive => self.l_zs,
        }
    }
}

/// Tape handles of the loss terms of one forward pass.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub terms: Vec<(LossTerm, Var, f64)>,
    pub j: Var,
    pub breakdown: LossBreakdown,
}

/// One minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub s: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Frozen standard-normal noise for the reparameterized samples, one tensor
/// per Monte-Carlo sample and branch.
#[derive(Debug, Clone)]
pub struct Noise {
    pub target: Vec<Tensor>,
    pub sensitive: Vec<Tensor>,
}

impl Noise {
    pub fn draw(rng: &mut impl Rng, rows: usize, config: &ModelConfig) -> Self {
        let mut normal = |d: usize| {
            let data = (0..rows * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::matrix(rows, d, data).expect("noise shape")
        };
        let (mut target, mut sensitive) = (Vec::new(), Vec::new());
        if config.variant.is_stochastic() {
            for _ in 0..config.samples {
                target.push(normal(config.code_dim));
                sensitive.push(normal(config.sensitive_dim()));
            }
        }
        Noise { target, sensitive }
    }
}

/// How the sensitive loss is kept off the shared trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrunkGuard {
    /// Feed the sensitive classification path a stop-gradient copy of the
    /// trunk output. A single reverse sweep then yields the masked gradient.
    StopGradient,
    /// Attach everything; the caller must apply per-term masks
    /// (see [`crate::nn::masked_backward`]).
    Unmasked,
}

/// Which embedding to extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Embedding {
    ZtMean,
    ZsMean,
    ZtSample,
}

impl FromStr for Embedding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "zt-mean" | "z-t-mean" => Ok(Embedding::ZtMean),
            "zs-mean" | "z-s-mean" => Ok(Embedding::ZsMean),
            "zt-sample" | "z-t-sample" => Ok(Embedding::ZtSample),
            other => Err(Error::Config(format!(
                "unknown embedding {other:?}; expected zt-mean, zs-mean or zt-sample"
            ))),
        }
    }
}

impl fmt::Display for Embedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Embedding::ZtMean => "zt-mean",
            Embedding::ZsMean => "zs-mean",
            Embedding::ZtSample => "zt-sample",
        })
    }
}

/// Posterior parameters of a batch.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub mu_t: Tensor,
    /// Clamped log-std; absent for the deterministic baseline.
    pub log_std_t: Option<Tensor>,
    pub mu_s: Option<Tensor>,
    pub log_std_s: Option<Tensor>,
}

impl Encoded {
    fn posteriors(mu: &Tensor, ls: &Tensor) -> Result<Vec<DiagGaussian>> {
        (0..mu.rows())
            .map(|i| DiagGaussian::from_log_std(mu.row(i).to_vec(), ls.row(i)))
            .collect()
    }

    pub fn target_posteriors(&self) -> Result<Vec<DiagGaussian>> {
        let ls = self.log_std_t.as_ref().ok_or(Error::Variant {
            variant: AblationVariant::Baseline.to_string(),
            what: "target posterior width",
        })?;
        Self::posteriors(&self.mu_t, ls)
    }

    pub fn sensitive_posteriors(&self) -> Result<Vec<DiagGaussian>> {
        match (&self.mu_s, &self.log_std_s) {
            (Some(mu), Some(ls)) => Self::posteriors(mu, ls),
            _ => Err(Error::Variant {
                variant: AblationVariant::Baseline.to_string(),
                what: "sensitive branch",
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FairModel {
    config: ModelConfig,
    store: ParamStore,
    trunk: Option<Mlp>,
    target_branch: DualHead,
    sensitive_branch: Option<DualHead>,
    target_disc: Mlp,
    sensitive_disc: Option<Mlp>,
    prior_t: PriorSpec,
    prior_s: PriorSpec,
}

impl FairModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let act = config.activation;

        let trunk = if config.trunk_hidden.is_empty() {
            None
        } else {
            let mut widths = vec![config.input_dim];
            widths.extend(&config.trunk_hidden);
            let spec = MlpSpec::new(widths, act, true);
            Some(Mlp::build(&spec, &mut store, "trunk", Partition::SharedTrunk, &mut rng)?)
        };
        let feat = config.trunk_hidden.last().copied().unwrap_or(config.input_dim);
        let stochastic = config.variant.is_stochastic();

        let target_spec = DualHeadSpec {
            input: feat,
            hidden: config.branch_hidden.clone(),
            code_dim: config.code_dim,
            activation: act,
        };
        let target_branch = DualHead::build(
            &target_spec,
            stochastic,
            &mut store,
            "target_enc",
            Partition::TargetBranch,
            &mut rng,
        )?;
        let sensitive_branch = if config.variant.has_sensitive_branch() {
            let spec = DualHeadSpec {
                code_dim: config.sensitive_dim(),
                ..target_spec.clone()
            };
            Some(DualHead::build(
                &spec,
                true,
                &mut store,
                "sensitive_enc",
                Partition::SensitiveBranch,
                &mut rng,
            )?)
        } else {
            None
        };

        let mut widths = vec![config.code_dim];
        widths.extend(&config.target_hidden);
        widths.push(config.target_classes);
        let target_disc = Mlp::build(
            &MlpSpec::new(widths, act, false),
            &mut store,
            "target_disc",
            Partition::TargetDiscriminator,
            &mut rng,
        )?;

        let sensitive_disc = if config.variant.has_sensitive_branch() {
            if config.variant.uses_entropy() && config.sensitive_dim() != config.code_dim {
                return Err(Error::Config(
                    "the entropy loss applies the sensitive discriminator to z_T, \
                     so sensitive_code_dim must equal code_dim"
                        .into(),
                ));
            }
            let mut widths = vec![config.sensitive_dim()];
            widths.extend(&config.sensitive_hidden);
            widths.push(config.sensitive_classes);
            Some(Mlp::build(
                &MlpSpec::new(widths, act, false),
                &mut store,
                "sensitive_disc",
                Partition::SensitiveDiscriminator,
                &mut rng,
            )?)
        } else {
            None
        };

        let (prior_t, prior_s) = config.priors()?;
        Ok(FairModel {
            config,
            store,
            trunk,
            target_branch,
            sensitive_branch,
            target_disc,
            sensitive_disc,
            prior_t,
            prior_s,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> AblationVariant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn priors(&self) -> (&PriorSpec, &PriorSpec) {
        (&self.prior_t, &self.prior_s)
    }

    /// Content hash of the encoder parameters (trunk and both branches).
    pub fn encoder_hash(&self) -> String {
        let mut enc = ParamStore::new();
        for p in self.store.iter().filter(|p| {
            matches!(
                p.partition,
                Partition::SharedTrunk | Partition::TargetBranch | Partition::SensitiveBranch
            )
        }) {
            enc.add(p.name.clone(), p.partition, p.value.clone());
        }
        enc.content_hash()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.config.input_dim {
            return Err(Error::shape("model input", x.shape(), &[0, self.config.input_dim]));
        }
        Ok(())
    }

    fn trunk(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        match &self.trunk {
            Some(t) => t.forward(tape, vars, x),
            None => Ok(x),
        }
    }

    fn clamp_log_std(tape: &mut Tape, ls: Var) -> Result<Var> {
        tape.clamp(ls, LOG_STD_MIN, LOG_STD_MAX)
    }

    fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
        let logp = tape.log_softmax(logits)?;
        let picked = tape.pick(logp, labels)?;
        let mean = tape.mean(picked)?;
        tape.scale(mean, -1.0)
    }

    /// Records every active loss term of one minibatch on `tape`.
    ///
    /// `vars` are the tape bindings of [`Self::params`]. Inactive terms are
    /// reported as zero and left off the tape.
    pub fn forward_losses(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Batch,
        weights: LossWeights,
        noise: &Noise,
        guard: TrunkGuard,
    ) -> Result<LossVars> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        self.check_input(&batch.x)?;
        if batch.s.len() != batch.len() || batch.x.rows() != batch.len() {
            return Err(Error::shape("batch labels", &[batch.x.rows()], &[batch.y.len(), batch.s.len()]));
        }
        let variant = self.config.variant;
        let k = self.config.samples;
        let x = tape.constant(batch.x.clone());
        let h = self.trunk(tape, vars, x)?;
        let (mu_t, raw_ls_t) = self.target_branch.forward(tape, vars, h)?;

        let mut terms: Vec<(LossTerm, Var, f64)> = Vec::new();
        let mut breakdown = LossBreakdown::default();

        let Some(raw_ls_t) = raw_ls_t else {
            let logits = self.target_disc.forward(tape, vars, mu_t)?;
            let l_t = Self::cross_entropy(tape, logits, &batch.y)?;
            breakdown.l_t = tape.scalar(l_t)?;
            breakdown.j = breakdown.l_t;
            terms.push((LossTerm::Target, l_t, 1.0));
            check_finite(&breakdown)?;
            return Ok(LossVars {
                terms,
                j: l_t,
                breakdown,
            });
        };
        let ls_t = Self::clamp_log_std(tape, raw_ls_t)?;

        let s_branch = self.sensitive_branch.as_ref().expect("stochastic variants have z_S");
        let s_disc = self.sensitive_disc.as_ref().expect("stochastic variants have φ_S");

        // Sensitive posterior attached to the trunk (feeds the KL term).
        let attached = if variant.uses_kl() || guard == TrunkGuard::Unmasked {
            let (mu, raw) = s_branch.forward(tape, vars, h)?;
            let raw = raw.expect("sensitive branch is stochastic");
            Some((mu, Self::clamp_log_std(tape, raw)?))
        } else {
            None
        };
        // Sensitive posterior feeding the classification loss.
        let (mu_s_cls, ls_s_cls) = match guard {
            TrunkGuard::Unmasked => attached.expect("built above"),
            TrunkGuard::StopGradient => {
                let h_detached = tape.stop_gradient(h)?;
                let (mu, raw) = s_branch.forward(tape, vars, h_detached)?;
                (mu, Self::clamp_log_std(tape, raw.expect("sensitive branch is stochastic"))?)
            }
        };

        let inv_k = 1.0 / k as f64;
        let mut l_t_parts = Vec::with_capacity(k);
        let mut l_s_parts = Vec::with_capacity(k);
        let mut l_e_parts = Vec::with_capacity(k);
        for i in 0..k {
            let eps_t = tape.constant(noise.target[i].clone());
            let z_t = reparam_on_tape(tape, mu_t, ls_t, eps_t)?;
            let eps_s = tape.constant(noise.sensitive[i].clone());
            let z_s = reparam_on_tape(tape, mu_s_cls, ls_s_cls, eps_s)?;

            let t_logits = self.target_disc.forward(tape, vars, z_t)?;
            l_t_parts.push((Self::cross_entropy(tape, t_logits, &batch.y)?, inv_k));

            let s_logits = s_disc.forward(tape, vars, z_s)?;
            l_s_parts.push((Self::cross_entropy(tape, s_logits, &batch.s)?, inv_k));

            if variant.uses_entropy() {
                let leak_logits = s_disc.forward(tape, vars, z_t)?;
                let ne = tape.neg_entropy(leak_logits)?;
                l_e_parts.push((tape.mean(ne)?, inv_k));
            }
        }
        let avg = |tape: &mut Tape, parts: &[(Var, f64)]| -> Result<Var> {
            if parts.len() == 1 {
                Ok(parts[0].0)
            } else {
                tape.lin_comb(parts)
            }
        };
        let l_t = avg(tape, &l_t_parts)?;
        let l_s = avg(tape, &l_s_parts)?;
        terms.push((LossTerm::Target, l_t, 1.0));
        terms.push((LossTerm::Sensitive, l_s, 1.0));
        breakdown.l_t = tape.scalar(l_t)?;
        breakdown.l_s = tape.scalar(l_s)?;

        if variant.uses_entropy() {
            let l_e = avg(tape, &l_e_parts)?;
            breakdown.l_e = tape.scalar(l_e)?;
            terms.push((LossTerm::Entropy, l_e, weights.entropy));
        }
        if variant.uses_kl() {
            let (mu_s, ls_s) = attached.expect("built for KL variants");
            let kl_t = tape.kl_to_prior(mu_t, ls_t, &self.prior_t.mean)?;
            let l_zt = tape.mean(kl_t)?;
            let kl_s = tape.kl_to_prior(mu_s, ls_s, &self.prior_s.mean)?;
            let l_zs = tape.mean(kl_s)?;
            breakdown.l_zt = tape.scalar(l_zt)?;
            breakdown.l_zs = tape.scalar(l_zs)?;
            breakdown.l_od = breakdown.l_zt + breakdown.l_zs;
            terms.push((LossTerm::KlTarget, l_zt, weights.orth_disent));
            terms.push((LossTerm::KlSensitive, l_zs, weights.orth_disent));
        }

        let combo: Vec<(Var, f64)> = terms.iter().map(|&(_, v, w)| (v, w)).collect();
        let j = tape.lin_comb(&combo)?;
        breakdown.j = tape.scalar(j)?;
        check_finite(&breakdown)?;
        Ok(LossVars {
            terms,
            j,
            breakdown,
        })
    }

    /// Deterministic encoder pass: posterior means and clamped log-stds.
    pub fn encode(&self, x: &Tensor) -> Result<Encoded> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let h = self.trunk(&mut tape, &vars, xv)?;
        let (mu_t, ls_t) = self.target_branch.forward(&mut tape, &vars, h)?;
        let clamp = |t: &Tensor| t.map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        let mut enc = Encoded {
            mu_t: tape.value(mu_t).clone(),
            log_std_t: ls_t.map(|v| clamp(tape.value(v))),
            mu_s: None,
            log_std_s: None,
        };
        if let Some(branch) = &self.sensitive_branch {
            let (mu, ls) = branch.forward(&mut tape, &vars, h)?;
            enc.mu_s = Some(tape.value(mu).clone());
            enc.log_std_s = ls.map(|v| clamp(tape.value(v)));
        }
        Ok(enc)
    }

    /// Embedding matrix `rows × d`; the sample variant draws seeded noise.
    pub fn embed(&self, x: &Tensor, which: Embedding, seed: u64) -> Result<Tensor> {
        let enc = self.encode(x)?;
        match which {
            Embedding::ZtMean => Ok(enc.mu_t),
            Embedding::ZsMean => enc.mu_s.ok_or_else(|| Error::Variant {
                variant: self.variant().to_string(),
                what: "sensitive branch (z_S)",
            }),
            Embedding::ZtSample => {
                let Some(ls) = enc.log_std_t else {
                    // deterministic code: a sample equals the mean
                    return Ok(enc.mu_t);
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let data = enc
                    .mu_t
                    .data()
                    .iter()
                    .zip(ls.data())
                    .map(|(m, l)| m + l.exp() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Tensor::new(enc.mu_t.shape().to_vec(), data)
            }
        }
    }

    fn class_probs(&self, disc: &Mlp, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.store.bind_frozen(&mut tape);
        let zv = tape.constant(z.clone());
        let logits = disc.forward(&mut tape, &vars, zv)?;
        let p = tape.softmax(logits)?;
        Ok(tape.value(p).clone())
    }

    /// `q_φT(y | z_T)` for a batch of target codes.
    pub fn classify_target(&self, z_t: &Tensor) -> Result<Tensor> {
        self.class_probs(&self.target_disc, z_t)
    }

    /// `q_φS(s | z)` for a batch of codes (z_S, or z_T for the leakage term).
    pub fn classify_sensitive(&self, z: &Tensor) -> Result<Tensor> {
        let disc = self.sensitive_disc.as_ref().ok_or_else(|| Error::Variant {
            variant: self.variant().to_string(),
            what: "sensitive discriminator",
        })?;
        self.class_probs(disc, z)
    }

    /// Accuracy of the model's own target predictor on the posterior means.
    pub fn target_accuracy(&self, x: &Tensor, y: &[usize]) -> Result<f64> {
        let enc = self.encode(x)?;
        let probs = self.classify_target(&enc.mu_t)?;
        Ok(accuracy(&probs, y))
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed,
            config: self.config.clone(),
            params: self.store.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut model = FairModel::new(ckpt.config.clone(), ckpt.seed)?;
        model.store.load_values(&ckpt.params)?;
        Ok(model)
    }
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    for term in LossTerm::ALL {
        if !b.term(term).is_finite() {
            return Err(Error::NonFiniteLoss {
                term: term.name(),
                epoch: 0,
                batch: 0,
            });
        }
    }
    if !b.j.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "J",
            epoch: 0,
            batch: 0,
        });
    }
    Ok(())
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(probs.row(*i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub const CHECKPOINT_FORMAT: &str = "orthofair-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned parameter checkpoint (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::nn::{collect_grads, masked_backward};
    use approx::assert_abs_diff_eq;

    pub(crate) fn small_config(variant: AblationVariant) -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            code_dim: 2,
            trunk_hidden: vec![5],
            sensitive_hidden: vec![4, 3],
            target_classes: 2,
            sensitive_classes: 3,
            variant,
            activation: ActivationKind::Tanh,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn small_batch() -> Batch {
        Batch {
            x: Tensor::matrix(
                4,
                3,
                vec![0.5, -1.0, 0.2, 1.5, 0.3, -0.7, -0.4, 0.8, 1.1, 0.0, -0.2, -1.3],
            )
            .unwrap(),
            y: vec![0, 1, 1, 0],
            s: vec![2, 0, 1, 2],
        }
    }

    const W: LossWeights = LossWeights {
        entropy: 0.7,
        orth_disent: 0.3,
    };

    fn frozen_noise(config: &ModelConfig) -> Noise {
        Noise::draw(&mut ChaCha8Rng::seed_from_u64(99), 4, config)
    }

    fn loss_j(model: &FairModel, guard: TrunkGuard) -> (Tape, Vec<Var>, LossVars) {
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape);
        let noise = frozen_noise(model.config());
        let lv = model
            .forward_losses(&mut tape, &vars, &small_batch(), W, &noise, guard)
            .unwrap();
        (tape, vars, lv)
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AblationVariant::ALL {
            assert_eq!(v.as_str().parse::<AblationVariant>().unwrap(), v);
        }
        assert_eq!("KL_ORTH_ONLY".parse::<AblationVariant>().unwrap(), AblationVariant::KlOrthOnly);
        assert!("orthogonal".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn term_activation_matrix() {
        use AblationVariant::*;
        use LossTerm::*;
        assert_eq!(Baseline.active_terms(), vec![Target]);
        assert_eq!(EntropyOnly.active_terms(), vec![Target, Sensitive, Entropy]);
        assert_eq!(KlOrthOnly.active_terms(), vec![Target, Sensitive, KlTarget, KlSensitive]);
        assert_eq!(MultiTask.active_terms(), vec![Target, Sensitive]);
        assert_eq!(
            EntropyKlShared.active_terms(),
            vec![Target, Sensitive, Entropy, KlTarget, KlSensitive]
        );
        assert_eq!(Full.active_terms(), EntropyKlShared.active_terms());
        assert!(Full.orthogonal_priors() && !EntropyKlShared.orthogonal_priors());
    }

    #[test]
    fn priors_follow_variant() {
        let full = FairModel::new(small_config(AblationVariant::Full), 1).unwrap();
        let (t, s) = full.priors();
        assert_eq!((t.mean.as_slice(), s.mean.as_slice()), (&[1.0, 0.0][..], &[0.0, 1.0][..]));
        let shared = FairModel::new(small_config(AblationVariant::EntropyKlShared), 1).unwrap();
        let (t, s) = shared.priors();
        assert_eq!(t, s);

        let mut bad = small_config(AblationVariant::Full);
        bad.prior_target = Some(vec![0.0, 1.0]);
        assert!(FairModel::new(bad, 1).is_err());
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let model = FairModel::new(small_config(AblationVariant::Full), 3).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let enc = model.encode(&x).unwrap();
        let (pt, ps) = (enc.target_posteriors().unwrap(), enc.sensitive_posteriors().unwrap());
        assert_eq!((pt.len(), pt[0].dim(), ps[0].dim()), (1, 2, 2));

        let twice = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3]).unwrap();
        let enc = model.encode(&twice).unwrap();
        assert_eq!(enc.mu_t.row(0), enc.mu_t.row(1));
        assert_eq!(enc.mu_s.as_ref().unwrap().row(0), enc.mu_s.as_ref().unwrap().row(1));

        let base = FairModel::new(small_config(AblationVariant::Baseline), 3).unwrap();
        let enc = base.encode(&x).unwrap();
        assert!(enc.log_std_t.is_none() && enc.mu_s.is_none());
        assert!(enc.target_posteriors().is_err());
        assert!(matches!(base.embed(&x, Embedding::ZsMean, 0), Err(Error::Variant { .. })));

        let wrong = Tensor::zeros(&[1, 4]);
        assert!(model.encode(&wrong).is_err());
    }

    #[test]
    fn weight_zero_and_baseline_objectives() {
        let model = FairModel::new(small_config(AblationVariant::Full), 5).unwrap();
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape);
        let noise = frozen_noise(model.config());
        let zero = LossWeights {
            entropy: 0.0,
            orth_disent: 0.0,
        };
        let lv = model
            .forward_losses(&mut tape, &vars, &small_batch(), zero, &noise, TrunkGuard::StopGradient)
            .unwrap();
        let b = lv.breakdown;
        assert_abs_diff_eq!(b.j, b.l_t + b.l_s, epsilon = 1e-14);
        assert_eq!(b.l_od, b.l_zt + b.l_zs);

        let base = FairModel::new(small_config(AblationVariant::Baseline), 5).unwrap();
        let mut tape = Tape::new();
        let vars = base.params().bind(&mut tape);
        let lv = base
            .forward_losses(&mut tape, &vars, &small_batch(), W, &frozen_noise(base.config()), TrunkGuard::StopGradient)
            .unwrap();
        assert_eq!(lv.breakdown.j, lv.breakdown.l_t);
        assert_eq!((lv.breakdown.l_s, lv.breakdown.l_e, lv.breakdown.l_od), (0.0, 0.0, 0.0));
    }

    #[test]
    fn target_loss_is_cross_entropy() {
        // −ln 0.8 for probs [0.8, 0.2] with true class 0; ln 2 for a uniform prediction
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(2, 2, vec![4f64.ln(), 0.0, 0.0, 0.0]).unwrap());
        let l = FairModel::cross_entropy(&mut tape, logits, &[0, 1]).unwrap();
        assert_abs_diff_eq!(tape.scalar(l).unwrap(), 0.5 * (0.22314355 + 2f64.ln()), epsilon = 1e-8);
    }

    #[test]
    fn stop_gradient_route_matches_per_term_masks() {
        for variant in AblationVariant::ALL {
            let model = FairModel::new(small_config(variant), 11).unwrap();
            let (tape, vars, lv) = loss_j(&model, TrunkGuard::StopGradient);
            let fast = collect_grads(&tape.gradients(&[(lv.j, 1.0)]).unwrap(), &vars);

            let (tape, vars, lv2) = loss_j(&model, TrunkGuard::Unmasked);
            assert_eq!(lv.breakdown, lv2.breakdown);
            let slow = masked_backward(&tape, model.params(), &vars, &lv2.terms).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - y).abs() <= 1e-10, "{variant}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn sensitive_loss_never_reaches_the_trunk() {
        let model = FairModel::new(small_config(AblationVariant::Full), 4).unwrap();
        let (tape, vars, lv) = loss_j(&model, TrunkGuard::StopGradient);
        let (_, l_s, _) = lv.terms.iter().find(|t| t.0 == LossTerm::Sensitive).unwrap();
        let g = tape.gradients(&[(*l_s, 1.0)]).unwrap();
        for (p, v) in model.params().iter().zip(&vars) {
            let norm: f64 = g.get(*v).unwrap().data().iter().map(|x| x.abs()).sum();
            match p.partition {
                Partition::SharedTrunk | Partition::TargetBranch | Partition::TargetDiscriminator => {
                    assert_eq!(norm, 0.0, "{}", p.name)
                }
                Partition::SensitiveBranch | Partition::SensitiveDiscriminator => {
                    assert!(norm > 0.0, "{}", p.name)
                }
                Partition::Probe => unreachable!(),
            }
        }
        let (_, l_t, _) = lv.terms.iter().find(|t| t.0 == LossTerm::Target).unwrap();
        let g = tape.gradients(&[(*l_t, 1.0)]).unwrap();
        for (p, v) in model.params().iter().zip(&vars) {
            if matches!(p.partition, Partition::SensitiveBranch | Partition::SensitiveDiscriminator) {
                assert!(g.get(*v).unwrap().data().iter().all(|&x| x == 0.0), "{}", p.name);
            }
        }
    }

    #[test]
    fn partitions_are_disjoint_and_cover_everything() {
        let model = FairModel::new(small_config(AblationVariant::Full), 4).unwrap();
        let mut names = std::collections::HashSet::new();
        for p in model.params().iter() {
            assert!(names.insert(p.name.clone()), "duplicate {}", p.name);
            assert!(Partition::MODEL.contains(&p.partition));
        }
        for part in Partition::MODEL {
            assert!(model.params().iter().any(|p| p.partition == part), "{part} empty");
        }
    }

    #[test]
    fn objective_passes_gradient_check_for_every_variant() {
        for variant in AblationVariant::ALL {
            let model = FairModel::new(small_config(variant), 21).unwrap();
            let noise = frozen_noise(model.config());
            let params: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
            let err = grad_check(&params, 1e-5, |tape, vars| {
                // the unguarded graph is the true derivative of J
                let lv = model.forward_losses(tape, vars, &small_batch(), W, &noise, TrunkGuard::Unmasked)?;
                Ok(lv.j)
            })
            .unwrap();
            assert!(err < 1e-4, "{variant}: {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = FairModel::new(small_config(AblationVariant::Full), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.to_checkpoint(8).save(&path).unwrap();
        let back = FairModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back.params().content_hash(), model.params().content_hash());
        assert_eq!(back.config(), model.config());
    }
}
