//! The training loop: per-epoch loss-weight schedules, seeded minibatches,
//! one joint Adam step per batch, and a per-epoch history.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::model::{FairModel, LossBreakdown, LossWeights, ModelConfig, Noise, TrunkGuard};
use crate::nn::{collect_grads, AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    /// `λ(t) = λ0 · γ^⌊t / t_s⌋`
    #[default]
    FixedExponent,
    /// `λ(t) = λ(t−1) · γ^(t / t_s)` applied every epoch, i.e.
    /// `λ0 · γ^(t(t+1) / (2 t_s))`.
    Compounding,
}

/// Loss weight at 0-based epoch `t`.
pub fn schedule_weight(lambda0: f64, gamma: f64, t: usize, step: usize, mode: ScheduleMode) -> f64 {
    let step = step.max(1);
    match mode {
        ScheduleMode::FixedExponent => lambda0 * gamma.powi((t / step) as i32),
        ScheduleMode::Compounding => {
            let t = t as f64;
            lambda0 * gamma.powf(t * (t + 1.0) / (2.0 * step as f64))
        }
    }
}

fn default_epochs() -> usize {
    200
}

fn default_step() -> usize {
    10
}

fn default_one() -> f64 {
    1.0
}

fn default_lambda_od() -> f64 {
    0.1
}

fn default_batch() -> usize {
    64
}

fn default_lr() -> f64 {
    1e-3
}

fn default_wd() -> f64 {
    5e-4
}

fn default_snapshot() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Epochs per schedule step, t_s.
    #[serde(default = "default_step")]
    pub step_size: usize,
    #[serde(default = "default_lambda_od")]
    pub lambda_od: f64,
    #[serde(default = "default_one")]
    pub lambda_e: f64,
    #[serde(default = "default_one")]
    pub gamma_od: f64,
    #[serde(default = "default_one")]
    pub gamma_e: f64,
    #[serde(default)]
    pub schedule: ScheduleMode,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub decoupled_weight_decay: bool,
    #[serde(default)]
    pub seed: u64,
    /// Record accuracy snapshots every this many epochs (0 disables them).
    #[serde(default = "default_snapshot")]
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            step_size: default_step(),
            lambda_od: default_lambda_od(),
            lambda_e: 1.0,
            gamma_od: 1.0,
            gamma_e: 1.0,
            schedule: ScheduleMode::FixedExponent,
            batch_size: default_batch(),
            lr: default_lr(),
            weight_decay: default_wd(),
            decoupled_weight_decay: false,
            seed: 0,
            snapshot_every: default_snapshot(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return fail("train.epochs must be >= 1".into());
        }
        if self.step_size == 0 {
            return fail("train.step_size must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be >= 1".into());
        }
        for (name, g) in [("gamma_od", self.gamma_od), ("gamma_e", self.gamma_e)] {
            if !(g > 0.0 && g.is_finite()) {
                return fail(format!("train.{name} must be > 0, got {g}"));
            }
        }
        for (name, l) in [("lambda_od", self.lambda_od), ("lambda_e", self.lambda_e)] {
            if !(l >= 0.0 && l.is_finite()) {
                return fail(format!("train.{name} must be >= 0, got {l}"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("train.lr must be >= 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("train.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }

    pub fn weights_at(&self, epoch: usize) -> LossWeights {
        LossWeights {
            entropy: schedule_weight(self.lambda_e, self.gamma_e, epoch, self.step_size, self.schedule),
            orth_disent: schedule_weight(self.lambda_od, self.gamma_od, epoch, self.step_size, self.schedule),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        let mut cfg = AdamConfig::new(self.lr, self.weight_decay);
        cfg.decoupled = self.decoupled_weight_decay;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Row-weighted means over the epoch's batches.
    pub losses: LossBreakdown,
    pub lambda_od: f64,
    pub lambda_e: f64,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Excluded from the CSV so that histories are byte-reproducible.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str =
        "epoch,l_t,l_s,l_e,l_zt,l_zs,l_od,j,lambda_od,lambda_e,train_acc,test_acc";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.epochs {
            let l = &r.losses;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                l.l_t,
                l.l_s,
                l.l_e,
                l.l_zt,
                l.l_zs,
                l.l_od,
                l.j,
                r.lambda_od,
                r.lambda_e,
                opt(r.train_accuracy),
                opt(r.test_accuracy)
            );
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Fills dataset-dependent fields left at zero in `config`.
pub fn resolve_model_config(config: &ModelConfig, data: &Dataset) -> Result<ModelConfig> {
    let mut c = config.clone();
    let fill = |field: &mut usize, value: usize, name: &str| -> Result<()> {
        if *field == 0 {
            *field = value;
        } else if *field != value {
            return Err(Error::Config(format!(
                "model.{name} = {} but the dataset has {value}",
                *field
            )));
        }
        Ok(())
    };
    fill(&mut c.input_dim, data.dim(), "input_dim")?;
    fill(&mut c.target_classes, data.target_classes, "target_classes")?;
    fill(&mut c.sensitive_classes, data.sensitive_classes, "sensitive_classes")?;
    c.validate()?;
    Ok(c)
}

/// Stream ids split one seed into independent generators.
const STREAM_SHUFFLE: u64 = 11;
const STREAM_NOISE: u64 = 12;

pub fn train(data: &Dataset, model: &ModelConfig, config: &TrainConfig) -> Result<(FairModel, TrainHistory)> {
    train_with(data, model, config, |_, _| Ok(()))
}

/// As [`train`], calling `on_epoch(epoch, model)` after each completed epoch.
pub fn train_with(
    data: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &FairModel) -> Result<()>,
) -> Result<(FairModel, TrainHistory)> {
    config.validate()?;
    data.validate()?;
    let model_config = resolve_model_config(model, data)?;
    let train_rows = data.indices(SplitTag::Train);
    if train_rows.is_empty() {
        return Err(Error::Data("the training split is empty".into()));
    }
    let test = data.part(SplitTag::Test);
    let train_part = data.part(SplitTag::Train);

    let mut model = FairModel::new(model_config, config.seed)?;
    let mut adam = AdamState::new(config.adam(), model.params());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(STREAM_SHUFFLE);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(STREAM_NOISE);

    let mut history = TrainHistory::default();
    let mut order = train_rows;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let weights = config.weights_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossBreakdown::default();
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            let batch = data.batch(rows);
            let noise = Noise::draw(&mut noise_rng, rows.len(), model.config());
            let mut tape = Tape::new();
            let vars = model.params().bind(&mut tape);
            let lv = model
                .forward_losses(&mut tape, &vars, &batch, weights, &noise, TrunkGuard::StopGradient)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { term, .. } => Error::NonFiniteLoss { term, epoch, batch: b },
                    other => other,
                })?;
            let grads = tape.gradients(&[(lv.j, 1.0)])?;
            adam.step(model.params_mut(), &collect_grads(&grads, &vars))?;

            let w = rows.len() as f64;
            let l = &lv.breakdown;
            sums.l_t += w * l.l_t;
            sums.l_s += w * l.l_s;
            sums.l_e += w * l.l_e;
            sums.l_zt += w * l.l_zt;
            sums.l_zs += w * l.l_zs;
            sums.l_od += w * l.l_od;
            sums.j += w * l.j;
        }
        let n = order.len() as f64;
        let losses = LossBreakdown {
            l_t: sums.l_t / n,
            l_s: sums.l_s / n,
            l_e: sums.l_e / n,
            l_zt: sums.l_zt / n,
            l_zs: sums.l_zs / n,
            l_od: sums.l_od / n,
            j: sums.j / n,
        };
        let snapshot = config.snapshot_every > 0
            && ((epoch + 1) % config.snapshot_every == 0 || epoch + 1 == config.epochs);
        let (train_accuracy, test_accuracy) = if snapshot {
            let acc = |part: &Dataset| -> Result<Option<f64>> {
                if part.rows() == 0 {
                    Ok(None)
                } else {
                    model.target_accuracy(&part.x, &part.y).map(Some)
                }
            };
            (acc(&train_part)?, acc(&test)?)
        } else {
            (None, None)
        };
        history.epochs.push(EpochRecord {
            epoch,
            losses,
            lambda_od: weights.orth_disent,
            lambda_e: weights.entropy,
            train_accuracy,
            test_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: J = {:.5}", losses.j);
        on_epoch(epoch, &model)?;
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::model::AblationVariant;
    use crate::nn::Partition;

    fn tiny_data() -> Dataset {
        gen_synthetic(&SyntheticSpec {
            rows: 300,
            dim: 6,
            rho: 0.5,
            seed: 3,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn tiny_model(variant: AblationVariant) -> ModelConfig {
        ModelConfig {
            trunk_hidden: vec![8],
            sensitive_hidden: vec![8, 8],
            variant,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        use ScheduleMode::*;
        for mode in [FixedExponent, Compounding] {
            assert_eq!(schedule_weight(0.3, 7.0, 0, 5, mode), 0.3);
        }
        assert_eq!(schedule_weight(1.0, 2.0, 10, 10, FixedExponent), 2.0);
        assert_eq!(schedule_weight(1.0, 2.0, 25, 10, FixedExponent), 4.0);
        assert_eq!(schedule_weight(1.0, 2.0, 9, 10, FixedExponent), 1.0);
        // literal recursion λ ← λ·γ^(t/t_s)
        let mut lambda = 0.5;
        for t in 1..30 {
            lambda *= 1.1f64.powf(t as f64 / 4.0);
            let closed = schedule_weight(0.5, 1.1, t, 4, Compounding);
            assert!((lambda - closed).abs() <= 1e-12 * closed, "t = {t}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            TrainConfig { gamma_od: 0.0, ..TrainConfig::default() },
            TrainConfig { gamma_e: -1.0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { step_size: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
            assert!(train(&tiny_data(), &tiny_model(AblationVariant::Full), &bad).is_err());
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.0,
            seed: 4,
            ..TrainConfig::default()
        };
        let resolved = resolve_model_config(&tiny_model(AblationVariant::Full), &data).unwrap();
        let init = FairModel::new(resolved, 4).unwrap();
        let (trained, _) = train(&data, &tiny_model(AblationVariant::Full), &cfg).unwrap();
        assert_eq!(trained.params().content_hash(), init.params().content_hash());
    }

    #[test]
    fn same_seed_same_history() {
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 3,
            seed: 9,
            gamma_e: 1.5,
            step_size: 1,
            ..TrainConfig::default()
        };
        let (m1, h1) = train(&data, &tiny_model(AblationVariant::Full), &cfg).unwrap();
        let (m2, h2) = train(&data, &tiny_model(AblationVariant::Full), &cfg).unwrap();
        assert_eq!(h1.to_csv(), h2.to_csv());
        assert_eq!(m1.params().content_hash(), m2.params().content_hash());
        for r in &h1.epochs {
            assert_eq!(r.lambda_e, schedule_weight(1.0, 1.5, r.epoch, 1, ScheduleMode::FixedExponent));
            assert_eq!(r.lambda_od, 0.1);
        }
        let csv = h1.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with(TrainHistory::CSV_HEADER));
    }

    #[test]
    fn baseline_history_has_only_the_target_term() {
        let (_, h) = train(
            &tiny_data(),
            &tiny_model(AblationVariant::Baseline),
            &TrainConfig { epochs: 2, ..TrainConfig::default() },
        )
        .unwrap();
        for r in &h.epochs {
            assert_eq!((r.losses.l_s, r.losses.l_e, r.losses.l_od), (0.0, 0.0, 0.0));
            assert_eq!(r.losses.j, r.losses.l_t);
        }
    }

    #[test]
    fn one_step_without_regularizers_touches_only_reachable_partitions() {
        // λ_E = λ_OD = 0: the trunk still moves through L_T, every other
        // partition is reached by L_T or L_S.
        let data = tiny_data();
        let mcfg = resolve_model_config(&tiny_model(AblationVariant::Full), &data).unwrap();
        let model = FairModel::new(mcfg, 1).unwrap();
        let batch = data.batch(&[0, 1, 2, 3, 4, 5, 6, 7]);
        let noise = Noise::draw(&mut ChaCha8Rng::seed_from_u64(0), 8, model.config());
        let zero = LossWeights { entropy: 0.0, orth_disent: 0.0 };

        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape);
        let lv = model
            .forward_losses(&mut tape, &vars, &batch, zero, &noise, TrunkGuard::StopGradient)
            .unwrap();
        let (_, l_s, _) = lv.terms[1];
        let only_s = tape.gradients(&[(l_s, 1.0)]).unwrap();
        let (_, l_t, _) = lv.terms[0];
        let only_t = tape.gradients(&[(l_t, 1.0)]).unwrap();
        let both = tape.gradients(&[(lv.j, 1.0)]).unwrap();
        for (p, v) in model.params().iter().zip(&vars) {
            let g = both.get(*v).unwrap().data();
            let gs = only_s.get(*v).unwrap().data();
            let gt = only_t.get(*v).unwrap().data();
            for i in 0..g.len() {
                assert!((g[i] - gs[i] - gt[i]).abs() < 1e-12);
            }
            if p.partition == Partition::SharedTrunk {
                assert!(gs.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn training_reduces_the_objective() {
        let data = tiny_data();
        let (_, h) = train(
            &data,
            &tiny_model(AblationVariant::Full),
            &TrainConfig { epochs: 15, batch_size: 32, lr: 5e-3, ..TrainConfig::default() },
        )
        .unwrap();
        let first = h.epochs[0].losses.j;
        let last = h.last().unwrap().losses.j;
        assert!(last < first, "{first} -> {last}");
    }
}
