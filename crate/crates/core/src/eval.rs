//! Frozen-encoder probes, the ablation runner, the hyper-parameter sweep and
//! embedding export.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{majority_baseline, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::model::{accuracy, AblationVariant, Embedding, FairModel, ModelConfig};
use crate::nn::{collect_grads, ActivationKind, AdamConfig, AdamState, Mlp, MlpSpec, ParamStore, Partition};
use crate::train::{train, TrainConfig, TrainHistory};

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_epochs() -> usize {
    100
}

fn default_lr() -> f64 {
    1e-3
}

fn default_batch() -> usize {
    64
}

fn default_embedding() -> Embedding {
    Embedding::ZtMean
}

fn default_true() -> bool {
    true
}

/// A fresh classifier trained on frozen embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Hidden widths; the default matches the sensitive discriminator.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: ActivationKind,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_embedding")]
    pub embedding: Embedding,
    /// Standardize embeddings with train-split statistics before probing.
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: default_hidden(),
            activation: ActivationKind::Relu,
            epochs: default_epochs(),
            lr: default_lr(),
            batch_size: default_batch(),
            weight_decay: 0.0,
            embedding: default_embedding(),
            standardize: true,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe.epochs and probe.batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("probe.lr must be > 0, got {}", self.lr)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("probe.hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Embedding matrix of every dataset row.
pub fn extract_embeddings(model: &FairModel, data: &Dataset, which: Embedding, seed: u64) -> Result<Tensor> {
    if model.config().input_dim != data.dim() {
        return Err(Error::shape("embedding input", &[data.dim()], &[model.config().input_dim]));
    }
    model.embed(&data.x, which, seed)
}

fn standardize(emb: &Tensor, train: &[usize]) -> Tensor {
    let (rows, cols) = (emb.rows(), emb.cols());
    let mut out = emb.clone();
    let n = train.len().max(1) as f64;
    let data = out.data_mut();
    for c in 0..cols {
        let mean = train.iter().map(|&i| data[i * cols + c]).sum::<f64>() / n;
        let var = train.iter().map(|&i| (data[i * cols + c] - mean).powi(2)).sum::<f64>() / n;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        for r in 0..rows {
            data[r * cols + c] = (data[r * cols + c] - mean) / std;
        }
    }
    out
}

/// Trains a probe on the train-tagged rows and returns its accuracy on the
/// test-tagged rows.
pub fn train_probe(
    emb: &Tensor,
    labels: &[usize],
    split: &[SplitTag],
    classes: usize,
    config: &ProbeConfig,
) -> Result<f64> {
    config.validate()?;
    if emb.rank() != 2 || emb.rows() != labels.len() || split.len() != labels.len() {
        return Err(Error::shape("probe inputs", emb.shape(), &[labels.len(), split.len()]));
    }
    let train: Vec<usize> = (0..labels.len()).filter(|&i| split[i] == SplitTag::Train).collect();
    let test: Vec<usize> = (0..labels.len()).filter(|&i| split[i] == SplitTag::Test).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("probe needs nonempty train and test splits".into()));
    }
    let first = labels[train[0]];
    if train.iter().all(|&i| labels[i] == first) {
        return Err(Error::Data("probe labels are single-class on the train split".into()));
    }
    let classes = classes.max(labels.iter().max().map_or(0, |m| m + 1)).max(2);
    let emb = if config.standardize { standardize(emb, &train) } else { emb.clone() };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let mut widths = vec![emb.cols()];
    widths.extend(&config.hidden);
    widths.push(classes);
    let net = Mlp::build(
        &MlpSpec::new(widths, config.activation, false),
        &mut store,
        "probe",
        Partition::Probe,
        &mut rng,
    )?;
    let mut adam = AdamState::new(AdamConfig::new(config.lr, config.weight_decay), &store);
    let mut order = train.clone();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let x = tape.constant(emb.select_rows(rows));
            let logits = net.forward(&mut tape, &vars, x)?;
            let logp = tape.log_softmax(logits)?;
            let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            let picked = tape.pick(logp, &y)?;
            let mean = tape.mean(picked)?;
            let loss = tape.scale(mean, -1.0)?;
            if !tape.scalar(loss)?.is_finite() {
                return Err(Error::NonFiniteLoss { term: "probe", epoch: 0, batch: 0 });
            }
            let grads = tape.gradients(&[(loss, 1.0)])?;
            adam.step(&mut store, &collect_grads(&grads, &vars))?;
        }
    }
    let mut tape = Tape::new();
    let vars = store.bind_frozen(&mut tape);
    let x = tape.constant(emb.select_rows(&test));
    let logits = net.forward(&mut tape, &vars, x)?;
    let probs = tape.softmax(logits)?;
    let y: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    Ok(accuracy(tape.value(probs), &y))
}

/// Metrics of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: AblationVariant,
    pub seed: u64,
    /// Probe on the target code against y.
    pub target_accuracy: f64,
    /// Probe on the target code against s.
    pub sensitive_accuracy: f64,
    pub target_majority: f64,
    pub sensitive_majority: f64,
    /// The model's own target predictor on the test split.
    pub predictor_accuracy: f64,
    pub embedding: Embedding,
    pub encoder_hash: String,
}

/// Seed of the probes evaluating a model trained with `seed`.
pub fn probe_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x5EED)
}

/// Runs the target and sensitive probes on the frozen target code.
pub fn evaluate(model: &FairModel, data: &Dataset, probe: &ProbeConfig) -> Result<RunResult> {
    let before = model.encoder_hash();
    let emb = extract_embeddings(model, data, probe.embedding, probe.seed)?;
    let target_accuracy = train_probe(&emb, &data.y, &data.split, data.target_classes, probe)?;
    let sensitive_accuracy = train_probe(&emb, &data.s, &data.split, data.sensitive_classes, probe)?;
    let test = data.part(SplitTag::Test);
    let encoder_hash = model.encoder_hash();
    if encoder_hash != before {
        return Err(Error::Contract("probe training modified the encoder".into()));
    }
    Ok(RunResult {
        variant: model.variant(),
        seed: probe.seed,
        target_accuracy,
        sensitive_accuracy,
        target_majority: majority_baseline(&test.y)?,
        sensitive_majority: majority_baseline(&test.s)?,
        predictor_accuracy: model.target_accuracy(&test.x, &test.y)?,
        embedding: probe.embedding,
        encoder_hash,
    })
}

/// Trains one variant with `seed` and evaluates it.
pub fn train_and_evaluate(
    data: &Dataset,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<(RunResult, TrainHistory)> {
    let train_cfg = TrainConfig { seed, ..train_cfg.clone() };
    let (trained, history) = train(data, model, &train_cfg)?;
    let probe = ProbeConfig { seed: probe_seed(seed), ..probe.clone() };
    let mut result = evaluate(&trained, data, &probe)?;
    result.seed = seed;
    Ok((result, history))
}

/// Runs `jobs` on `threads` workers (0 = all available), keeping input order.
pub fn run_parallel<T, R, F>(jobs: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if threads == 1 || jobs.len() <= 1 {
        return jobs.iter().map(&f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| jobs.par_iter().map(&f).collect()),
        Err(_) => jobs.iter().map(&f).collect(),
    }
}

/// One ablation cell; failures are kept as messages so the table completes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: AblationVariant,
    pub seed: u64,
    pub result: std::result::Result<RunResult, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(Summary { mean, std: var.sqrt(), n: values.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn results(&self, variant: AblationVariant) -> Vec<&RunResult> {
        self.cells
            .iter()
            .filter(|c| c.variant == variant)
            .filter_map(|c| c.result.as_ref().ok())
            .collect()
    }

    pub fn summary(&self, variant: AblationVariant) -> Option<(Summary, Summary)> {
        let rs = self.results(variant);
        let t: Vec<f64> = rs.iter().map(|r| r.target_accuracy).collect();
        let s: Vec<f64> = rs.iter().map(|r| r.sensitive_accuracy).collect();
        Some((Summary::of(&t)?, Summary::of(&s)?))
    }

    /// Long format, one row per cell.
    pub fn cells_csv(&self) -> String {
        let mut out = String::from(
            "variant,seed,target_acc,sensitive_acc,target_majority,sensitive_majority,predictor_acc,error\n",
        );
        for c in &self.cells {
            match &c.result {
                Ok(r) => writeln!(
                    out,
                    "{},{},{},{},{},{},{},",
                    c.variant,
                    c.seed,
                    r.target_accuracy,
                    r.sensitive_accuracy,
                    r.target_majority,
                    r.sensitive_majority,
                    r.predictor_accuracy
                ),
                Err(e) => writeln!(out, "{},{},,,,,,\"{}\"", c.variant, c.seed, e.replace('"', "'")),
            }
            .expect("writing to a String");
        }
        out
    }

    /// One row per variant with mean and sample std over successful seeds.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "variant,label,runs,failed,target_mean,target_std,sensitive_mean,sensitive_std\n",
        );
        for v in AblationVariant::ALL {
            let cells: Vec<_> = self.cells.iter().filter(|c| c.variant == v).collect();
            if cells.is_empty() {
                continue;
            }
            let failed = cells.iter().filter(|c| c.result.is_err()).count();
            let _ = match self.summary(v) {
                Some((t, s)) => writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    v,
                    v.label(),
                    t.n,
                    failed,
                    t.mean,
                    t.std,
                    s.mean,
                    s.std
                ),
                None => writeln!(out, "{},{},0,{},,,,", v, v.label(), failed),
            };
        }
        out
    }
}

/// Trains every variant for every seed on identical data and splits.
pub fn run_ablation(
    data: &Dataset,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    probe: &ProbeConfig,
    variants: &[AblationVariant],
    seeds: &[u64],
    threads: usize,
) -> Result<AblationTable> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one variant".into()));
    }
    let jobs: Vec<(AblationVariant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let cells = run_parallel(&jobs, threads, |&(variant, seed)| {
        let cfg = ModelConfig { variant, ..model.clone() };
        let result = train_and_evaluate(data, &cfg, train_cfg, probe, seed)
            .map(|(r, _)| r)
            .map_err(|e| {
                log::warn!("ablation cell {variant}/{seed} failed: {e}");
                e.to_string()
            });
        AblationCell { variant, seed, result }
    });
    Ok(AblationTable { cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub lambda_od: Vec<f64>,
    pub lambda_e: Vec<f64>,
    pub gamma_od: Vec<f64>,
    pub gamma_e: Vec<f64>,
}

impl SweepGrid {
    /// Every combination, `lambda_od` varying slowest.
    pub fn points(&self) -> Result<Vec<[f64; 4]>> {
        if self.lambda_od.is_empty() || self.lambda_e.is_empty() || self.gamma_od.is_empty() || self.gamma_e.is_empty() {
            return Err(Error::Config("every sweep axis needs at least one value".into()));
        }
        let mut out = Vec::new();
        for &a in &self.lambda_od {
            for &b in &self.lambda_e {
                for &c in &self.gamma_od {
                    for &d in &self.gamma_e {
                        out.push([a, b, c, d]);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_od: f64,
    pub lambda_e: f64,
    pub gamma_od: f64,
    pub gamma_e: f64,
    pub seed: u64,
    pub result: std::result::Result<RunResult, String>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda_od,lambda_e,gamma_od,gamma_e,seed,target_acc,sensitive_acc,error\n");
    for r in rows {
        let _ = match &r.result {
            Ok(res) => writeln!(
                out,
                "{},{},{},{},{},{},{},",
                r.lambda_od, r.lambda_e, r.gamma_od, r.gamma_e, r.seed, res.target_accuracy, res.sensitive_accuracy
            ),
            Err(e) => writeln!(
                out,
                "{},{},{},{},{},,,\"{}\"",
                r.lambda_od,
                r.lambda_e,
                r.gamma_od,
                r.gamma_e,
                r.seed,
                e.replace('"', "'")
            ),
        };
    }
    out
}

/// One Full-variant run per grid point and seed.
pub fn run_sweep(
    data: &Dataset,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    probe: &ProbeConfig,
    grid: &SweepGrid,
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let jobs: Vec<([f64; 4], u64)> = grid
        .points()?
        .into_iter()
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let model = ModelConfig { variant: AblationVariant::Full, ..model.clone() };
    Ok(run_parallel(&jobs, threads, |&([lod, le, god, ge], seed)| {
        let cfg = TrainConfig {
            lambda_od: lod,
            lambda_e: le,
            gamma_od: god,
            gamma_e: ge,
            ..train_cfg.clone()
        };
        let result = train_and_evaluate(data, &model, &cfg, probe, seed)
            .map(|(r, _)| r)
            .map_err(|e| e.to_string());
        SweepRow { lambda_od: lod, lambda_e: le, gamma_od: god, gamma_e: ge, seed, result }
    }))
}

/// `rows × d` embedding CSV with `y`, `s` and split columns appended.
pub fn embeddings_csv(emb: &Tensor, data: &Dataset) -> String {
    let mut out = String::new();
    for j in 0..emb.cols() {
        let _ = write!(out, "z{j},");
    }
    out.push_str("y,s,split\n");
    for i in 0..emb.rows() {
        for v in emb.row(i) {
            let _ = write!(out, "{v},");
        }
        let tag = match data.split[i] {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        };
        let _ = writeln!(out, "{},{},{tag}", data.y[i], data.s[i]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn quick_probe() -> ProbeConfig {
        ProbeConfig { epochs: 30, hidden: vec![16], lr: 1e-2, ..ProbeConfig::default() }
    }

    fn split_tags(n: usize) -> Vec<SplitTag> {
        (0..n).map(|i| if i % 5 == 0 { SplitTag::Test } else { SplitTag::Train }).collect()
    }

    #[test]
    fn coin_flip_labels_give_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 4000;
        let emb = Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let acc = train_probe(&emb, &labels, &split_tags(n), 2, &quick_probe()).unwrap();
        assert!((acc - 0.5).abs() < 0.05, "{acc}");
    }

    #[test]
    fn one_hot_embeddings_are_perfectly_informative() {
        let n = 600;
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 / 3) % 3).collect();
        let mut data = vec![0.0; n * 3];
        for (i, &l) in labels.iter().enumerate() {
            data[i * 3 + l] = 1.0;
        }
        let emb = Tensor::matrix(n, 3, data).unwrap();
        let acc = train_probe(&emb, &labels, &split_tags(n), 3, &quick_probe()).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn constant_embeddings_reach_only_the_majority() {
        let n = 500;
        let labels: Vec<usize> = (0..n).map(|i| usize::from(i % 10 < 3)).collect();
        let emb = Tensor::full(&[n, 2], 0.25);
        let split = split_tags(n);
        let acc = train_probe(&emb, &labels, &split, 2, &quick_probe()).unwrap();
        let test: Vec<usize> = (0..n).filter(|&i| split[i] == SplitTag::Test).map(|i| labels[i]).collect();
        assert_eq!(acc, majority_baseline(&test).unwrap());
    }

    #[test]
    fn single_class_labels_are_rejected() {
        let emb = Tensor::zeros(&[10, 2]);
        assert!(train_probe(&emb, &[1; 10], &split_tags(10), 2, &quick_probe()).is_err());
    }

    #[test]
    fn sweep_grid_enumerates_all_points() {
        let g = SweepGrid {
            lambda_od: vec![0.1, 1.0],
            lambda_e: vec![0.5, 2.0],
            gamma_od: vec![1.0],
            gamma_e: vec![1.0],
        };
        assert_eq!(g.points().unwrap().len(), 4);
        assert!(SweepGrid { gamma_e: vec![], ..g }.points().is_err());
    }

    #[test]
    fn summary_uses_sample_std() {
        let s = Summary::of(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.n), (2.0, 2));
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn parallel_runner_preserves_order() {
        let jobs: Vec<u64> = (0..20).collect();
        assert_eq!(run_parallel(&jobs, 3, |&j| j * j), jobs.iter().map(|j| j * j).collect::<Vec<_>>());
    }
}
