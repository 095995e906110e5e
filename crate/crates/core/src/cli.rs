//! Command-line driver: config resolution, dataset loading and the run
//! verbs, each of which writes its artifacts plus a `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{content_hash, gen_synthetic, load_csv, Dataset, DatasetSchema, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{
    embeddings_csv, evaluate, extract_embeddings, probe_seed, run_ablation, run_sweep, sweep_csv,
    ProbeConfig, RunResult, SweepGrid,
};
use crate::model::{AblationVariant, Checkpoint, Embedding, FairModel, ModelConfig};
use crate::train::{resolve_model_config, train, TrainConfig};

/// Named configs compiled into the binary.
pub const PRESETS: &[(&str, &str)] = &[
    ("adult-full", include_str!("../../../configs/adult-full.toml")),
    ("german-full", include_str!("../../../configs/german-full.toml")),
    ("german-baseline", include_str!("../../../configs/german-baseline.toml")),
    ("german-entropy-only", include_str!("../../../configs/german-entropy-only.toml")),
    ("german-kl-orth-only", include_str!("../../../configs/german-kl-orth-only.toml")),
    ("german-multi-task", include_str!("../../../configs/german-multi-task.toml")),
    ("german-entropy-kl-shared", include_str!("../../../configs/german-entropy-kl-shared.toml")),
    ("synthetic-oracle", include_str!("../../../configs/synthetic-oracle.toml")),
    ("synthetic-independent", include_str!("../../../configs/synthetic-independent.toml")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

/// Where the dataset comes from; exactly one source must be given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    /// A cache written by `preprocess`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl DataConfig {
    pub fn load(&self) -> Result<Dataset> {
        match (&self.csv, &self.schema, &self.cache, &self.synthetic) {
            (Some(csv), Some(schema), None, None) => load_csv(csv, &DatasetSchema::load(schema)?),
            (None, None, Some(cache), None) => Dataset::read_cache(cache),
            (None, None, None, Some(spec)) => gen_synthetic(spec),
            (Some(_), None, None, None) => Err(Error::Config("data.csv needs data.schema".into())),
            (None, Some(_), None, None) => Err(Error::Config("data.schema needs data.csv".into())),
            _ => Err(Error::Config(
                "data needs exactly one of csv + schema, cache or synthetic".into(),
            )),
        }
    }
}

fn default_ablation_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default = "default_ablation_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "all_variants")]
    pub variants: Vec<AblationVariant>,
}

fn all_variants() -> Vec<AblationVariant> {
    AblationVariant::ALL.to_vec()
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: default_ablation_seeds(),
            variants: all_variants(),
        }
    }
}

fn default_sweep_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_sweep_seeds")]
    pub seeds: Vec<u64>,
    pub lambda_od: Vec<f64>,
    pub lambda_e: Vec<f64>,
    pub gamma_od: Vec<f64>,
    pub gamma_e: Vec<f64>,
}

impl SweepConfig {
    pub fn grid(&self) -> SweepGrid {
        SweepGrid {
            lambda_od: self.lambda_od.clone(),
            lambda_e: self.lambda_e.clone(),
            gamma_od: self.gamma_od.clone(),
            gamma_e: self.gamma_e.clone(),
        }
    }
}

/// The whole run description, as read from TOML and echoed into manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `source` as a file path, falling back to a preset name.
    pub fn resolve(source: &str) -> Result<Self> {
        let path = Path::new(source);
        if path.is_file() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            return Self::from_toml(&text).map_err(|e| Error::Config(format!("{source}: {e}")));
        }
        match preset(source) {
            Some(text) => Self::from_toml(text),
            None => Err(Error::Config(format!(
                "{source:?} is neither a config file nor a preset ({})",
                PRESETS.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.probe.validate()?;
        if let Some(sweep) = &self.sweep {
            sweep.grid().points()?;
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "orthofair", version, about = "Fair representations with orthogonal disentangled codes")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Config file, or the name of a built-in preset.
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<AblationVariant>,
    /// Worker threads for ablations and sweeps (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub parallel: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode a CSV with its schema into a binary dataset cache.
    Preprocess {
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Cache file to write; defaults to `<out-dir>/dataset.ofds`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and write its checkpoint and loss history.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Probe a trained model; trains from the config when no checkpoint is given.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and probe every configured variant for every seed.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Grid over loss weights and decay rates with the full model.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Write per-row embeddings as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "zt-mean")]
        embedding: Embedding,
        #[command(flatten)]
        common: Common,
    },
    /// List the built-in presets, or print one.
    Presets { name: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub provenance: String,
    pub rows: usize,
    pub dim: usize,
}

impl DatasetInfo {
    fn of(data: &Dataset) -> Self {
        DatasetInfo {
            name: data.name.clone(),
            provenance: data.provenance.clone(),
            rows: data.rows(),
            dim: data.dim(),
        }
    }
}

/// Written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_source: Option<String>,
    pub config: Option<RunConfig>,
    pub dataset: DatasetInfo,
    pub seed: Option<u64>,
    /// sha256 of each output file, keyed by file name.
    pub outputs: BTreeMap<String, String>,
    /// Seconds since the epoch; `SOURCE_DATE_EPOCH` wins when set.
    pub created_unix: u64,
}

fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or_else(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Collects output files of one command and finishes with the manifest.
struct Outputs {
    dir: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl Outputs {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Outputs { dir, hashes: BTreeMap::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_file(&self.dir.join(name), bytes)?;
        self.hashes.insert(name.to_string(), content_hash(bytes));
        Ok(())
    }

    fn finish(self, manifest: Manifest<'_>) -> Result<PathBuf> {
        let manifest = manifest.build(self.hashes);
        let path = self.dir.join("manifest.json");
        write_file(&path, &to_json(&manifest)?)?;
        Ok(self.dir)
    }
}

struct Manifest<'a> {
    command: &'a str,
    source: Option<&'a str>,
    config: Option<&'a RunConfig>,
    data: &'a Dataset,
    seed: Option<u64>,
}

impl Manifest<'_> {
    fn build(self, outputs: BTreeMap<String, String>) -> RunManifest {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.into(),
            config_source: self.source.map(String::from),
            config: self.config.cloned(),
            dataset: DatasetInfo::of(self.data),
            seed: self.seed,
            outputs,
            created_unix: timestamp(),
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    Ok(text.into_bytes())
}

/// Config with command-line overrides applied.
fn load_config(common: &Common) -> Result<(String, RunConfig)> {
    let source = common
        .config
        .clone()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = RunConfig::resolve(&source)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.ablation.seeds = vec![seed];
        if let Some(sweep) = &mut cfg.sweep {
            sweep.seeds = vec![seed];
        }
    }
    if let Some(variant) = common.variant {
        cfg.model.variant = variant;
        cfg.ablation.variants = vec![variant];
    }
    cfg.validate()?;
    Ok((source, cfg))
}

fn out_dir(common: &Common, verb: &str) -> PathBuf {
    common.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(verb))
}

pub const RESULT_CSV_HEADER: &str =
    "variant,seed,target_acc,sensitive_acc,target_majority,sensitive_majority,predictor_acc,embedding";

pub fn result_csv(r: &RunResult) -> String {
    format!(
        "{RESULT_CSV_HEADER}\n{},{},{},{},{},{},{},{}\n",
        r.variant,
        r.seed,
        r.target_accuracy,
        r.sensitive_accuracy,
        r.target_majority,
        r.sensitive_majority,
        r.predictor_accuracy,
        r.embedding
    )
}

/// Loads the model from `checkpoint`, or trains one from the config.
fn model_for(cfg: &mut RunConfig, data: &Dataset, checkpoint: Option<&Path>) -> Result<(FairModel, u64)> {
    match checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let model = FairModel::from_checkpoint(&ckpt)?;
            cfg.model = model.config().clone();
            Ok((model, ckpt.seed))
        }
        None => {
            cfg.model = resolve_model_config(&cfg.model, data)?;
            let (model, _) = train(data, &cfg.model, &cfg.train)?;
            Ok((model, cfg.train.seed))
        }
    }
}

/// Runs one parsed command; returns the directory or file it wrote.
pub fn run(command: Command) -> Result<PathBuf> {
    match command {
        Command::Preprocess { csv, schema, out, common } => {
            let (source, mut data_cfg) = match &common.config {
                Some(_) => {
                    let (source, cfg) = load_config(&common)?;
                    (Some(source), cfg.data)
                }
                None => (None, DataConfig::default()),
            };
            if csv.is_some() || schema.is_some() {
                data_cfg = DataConfig { csv, schema, ..DataConfig::default() };
            }
            let data = data_cfg.load()?;
            let out = out.unwrap_or_else(|| out_dir(&common, "preprocess").join("dataset.ofds"));
            data.write_cache(&out)?;
            let bytes = fs::read(&out).map_err(|e| Error::io(&out, e))?;
            let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let manifest = Manifest {
                command: "preprocess",
                source: source.as_deref(),
                config: None,
                data: &data,
                seed: None,
            }
            .build(BTreeMap::from([(name, content_hash(&bytes))]));
            let mut manifest_path = out.clone().into_os_string();
            manifest_path.push(".manifest.json");
            write_file(Path::new(&manifest_path), &to_json(&manifest)?)?;
            log::info!("wrote {} rows to {}", data.rows(), out.display());
            Ok(out)
        }
        Command::Train { common } => {
            let (source, mut cfg) = load_config(&common)?;
            let data = cfg.data.load()?;
            cfg.model = resolve_model_config(&cfg.model, &data)?;
            let (model, history) = train(&data, &cfg.model, &cfg.train)?;
            let mut out = Outputs::new(out_dir(&common, "train"))?;
            out.write("checkpoint.json", &to_json(&model.to_checkpoint(cfg.train.seed))?)?;
            out.write("history.csv", history.to_csv().as_bytes())?;
            out.finish(Manifest {
                command: "train",
                source: Some(&source),
                config: Some(&cfg),
                data: &data,
                seed: Some(cfg.train.seed),
            })
        }
        Command::Evaluate { checkpoint, common } => {
            let (source, mut cfg) = load_config(&common)?;
            let data = cfg.data.load()?;
            let (model, seed) = model_for(&mut cfg, &data, checkpoint.as_deref())?;
            let probe = ProbeConfig { seed: probe_seed(seed), ..cfg.probe.clone() };
            let mut result = evaluate(&model, &data, &probe)?;
            result.seed = seed;
            let mut out = Outputs::new(out_dir(&common, "evaluate"))?;
            out.write("result.json", &to_json(&result)?)?;
            out.write("result.csv", result_csv(&result).as_bytes())?;
            out.finish(Manifest {
                command: "evaluate",
                source: Some(&source),
                config: Some(&cfg),
                data: &data,
                seed: Some(seed),
            })
        }
        Command::Ablate { common } => {
            let (source, mut cfg) = load_config(&common)?;
            let data = cfg.data.load()?;
            cfg.model = resolve_model_config(&cfg.model, &data)?;
            let table = run_ablation(
                &data,
                &cfg.model,
                &cfg.train,
                &cfg.probe,
                &cfg.ablation.variants,
                &cfg.ablation.seeds,
                common.parallel,
            )?;
            let mut out = Outputs::new(out_dir(&common, "ablate"))?;
            out.write("cells.csv", table.cells_csv().as_bytes())?;
            out.write("summary.csv", table.summary_csv().as_bytes())?;
            out.finish(Manifest {
                command: "ablate",
                source: Some(&source),
                config: Some(&cfg),
                data: &data,
                seed: None,
            })
        }
        Command::Sweep { common } => {
            let (source, mut cfg) = load_config(&common)?;
            let sweep = cfg
                .sweep
                .clone()
                .ok_or_else(|| Error::Config("sweep needs a [sweep] section".into()))?;
            let data = cfg.data.load()?;
            cfg.model = resolve_model_config(&cfg.model, &data)?;
            let rows = run_sweep(
                &data,
                &cfg.model,
                &cfg.train,
                &cfg.probe,
                &sweep.grid(),
                &sweep.seeds,
                common.parallel,
            )?;
            let mut out = Outputs::new(out_dir(&common, "sweep"))?;
            out.write("sweep.csv", sweep_csv(&rows).as_bytes())?;
            out.finish(Manifest {
                command: "sweep",
                source: Some(&source),
                config: Some(&cfg),
                data: &data,
                seed: None,
            })
        }
        Command::ExportEmbeddings { checkpoint, embedding, common } => {
            let (source, mut cfg) = load_config(&common)?;
            // fail before training when the variant cannot provide the code
            if embedding == Embedding::ZsMean && checkpoint.is_none() && !cfg.model.variant.has_sensitive_branch() {
                return Err(Error::Variant {
                    variant: cfg.model.variant.to_string(),
                    what: "sensitive branch (z_S)",
                });
            }
            let data = cfg.data.load()?;
            let (model, seed) = model_for(&mut cfg, &data, checkpoint.as_deref())?;
            let emb = extract_embeddings(&model, &data, embedding, probe_seed(seed))?;
            let mut out = Outputs::new(out_dir(&common, "export-embeddings"))?;
            out.write("embeddings.csv", embeddings_csv(&emb, &data).as_bytes())?;
            out.finish(Manifest {
                command: "export-embeddings",
                source: Some(&source),
                config: Some(&cfg),
                data: &data,
                seed: Some(seed),
            })
        }
        Command::Presets { name } => {
            match name {
                None => {
                    for (n, _) in PRESETS {
                        println!("{n}");
                    }
                }
                Some(n) => {
                    let text = preset(&n).ok_or_else(|| Error::Config(format!("no preset named {n:?}")))?;
                    print!("{text}");
                }
            }
            Ok(PathBuf::new())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses_and_validates() {
        for (name, text) in PRESETS {
            let cfg = RunConfig::from_toml(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn variant_presets_differ_only_in_variant() {
        let full = RunConfig::from_toml(preset("german-full").unwrap()).unwrap();
        for v in AblationVariant::ALL {
            let cfg = RunConfig::from_toml(preset(&format!("german-{v}")).unwrap()).unwrap();
            assert_eq!(cfg.model.variant, v);
            let mut same = cfg.clone();
            same.model.variant = AblationVariant::Full;
            assert_eq!(same, full, "{v}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[data]\ncsv = \"a\"\n[train]\nepochz = 3\n").unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
    }

    #[test]
    fn data_needs_exactly_one_source() {
        let cfg = DataConfig { csv: Some("a.csv".into()), ..DataConfig::default() };
        assert!(matches!(cfg.load(), Err(Error::Config(_))));
        assert!(matches!(DataConfig::default().load(), Err(Error::Config(_))));
    }

    #[test]
    fn cli_overrides_seed_and_variant() {
        let cli = Cli::try_parse_from([
            "orthofair", "train", "--config", "german-full", "--seed", "7", "--variant", "baseline",
        ])
        .unwrap();
        let Command::Train { common } = cli.command else { panic!() };
        let (_, cfg) = load_config(&common).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.model.variant, AblationVariant::Baseline);
        assert_eq!(cfg.ablation.seeds, vec![7]);
    }
}
