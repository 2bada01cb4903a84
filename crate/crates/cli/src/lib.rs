//! Configuration, experiment entry point and CSV emission for `latentfed`.
//!
//! A run reads a strict JSON config, executes the cross-validated experiment
//! and writes four files to the output directory:
//!
//! - `metrics.csv`: one row per (fold, sampler, evaluation round);
//! - `summary.csv`: per (sampler, round) means over folds;
//! - `violin.csv`: per sampler, every `std_test_accuracy` value across
//!   folds and evaluations;
//! - `run_manifest.json`: the resolved config, seed and format version.
//!
//! `std_test_*` columns are standard deviations across clients within one
//! fold; the summary averages them over folds. AUC is the macro mean of
//! one-vs-rest AUCs over the classes present in a client's test split.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use latentfed_core::crossval::{self, ExperimentConfig, ExperimentOutput, ExperimentPlan};
use latentfed_core::dataset::{self, Dataset, LabelColumn, SyntheticSpec};
use latentfed_core::federation::HyperParams;
use latentfed_core::gcae::{ArchSpec, ConvStage, TrainScope};
use latentfed_core::metrics::{MetricsRecord, SummaryRow};
use latentfed_core::resampling::{SamplerKind, SamplerSpec, SvmParams};
use latentfed_core::rng::{self, purpose};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version of the output file formats.
pub const FORMAT_VERSION: u32 = 1;

pub const METRICS_HEADER: &str =
    "fold,sampler,round,test_accuracy,test_auc,std_test_accuracy,std_test_auc,train_loss";
pub const SUMMARY_HEADER: &str =
    "sampler,round,folds,test_accuracy,test_auc,std_test_accuracy,std_test_auc,train_loss";
pub const VIOLIN_HEADER: &str = "sampler,fold,round,std_test_accuracy";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] latentfed_core::Error),
    #[error("invalid config {}: {source}", path.display())]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sinusoidal class blobs; defaults give the six-class 20:1 benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub counts: Vec<usize>,
    pub dim: usize,
    pub amplitude: f64,
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            counts: vec![200, 200, 200, 200, 10, 10],
            dim: 24,
            amplitude: 1.0,
            noise: 1.0,
        }
    }
}

fn default_label_column() -> LabelColumn {
    LabelColumn::Name("label".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Csv {
        path: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: LabelColumn,
    },
    Synthetic(SyntheticConfig),
}

/// Shared hyperparameters of every sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerParams {
    pub k_neighbors: usize,
    pub m_neighbors: usize,
    pub enn_k: usize,
    pub svm: SvmParams,
}

impl Default for SamplerParams {
    fn default() -> Self {
        let s = SamplerSpec::new(SamplerKind::Smote);
        Self {
            k_neighbors: s.k_neighbors,
            m_neighbors: s.m_neighbors,
            enn_k: s.enn_k,
            svm: s.svm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub stages: Vec<ConvStage>,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    /// Weight of the reconstruction loss.
    pub alpha: f64,
    /// Weight of the classification loss.
    pub beta: f64,
    /// Retrain every parameter during personalization rather than only the
    /// MLP head.
    pub personalize_full_model: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let arch = ArchSpec::default_for(1, 2);
        Self {
            input_channels: arch.input_channels,
            stages: arch.stages,
            latent_dim: arch.latent_dim,
            hidden: arch.hidden,
            alpha: arch.recon_weight,
            beta: arch.pred_weight,
            personalize_full_model: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let h = HyperParams::default();
        Self {
            learning_rate: h.learning_rate,
            batch_size: h.batch_size,
            local_epochs: h.local_epochs,
        }
    }
}

/// Simulated participation and client-speed bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub participation: f64,
    pub train_slow_rate: f64,
    pub send_slow_rate: f64,
    pub train_cost_per_batch: f64,
    pub send_cost: f64,
    pub slow_factor: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let h = HyperParams::default();
        Self {
            participation: h.participation,
            train_slow_rate: h.train_slow_rate,
            send_slow_rate: h.send_slow_rate,
            train_cost_per_batch: h.train_cost_per_batch,
            send_cost: h.send_cost,
            slow_factor: h.slow_factor,
        }
    }
}

fn default_concentration() -> f64 {
    0.5
}
fn default_folds() -> usize {
    5
}
fn default_rounds() -> usize {
    200
}
fn default_eval_gap() -> usize {
    1
}
fn default_output() -> PathBuf {
    PathBuf::from("output")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub num_clients: usize,
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    #[serde(default = "default_folds")]
    pub num_folds: usize,
    #[serde(default = "default_rounds")]
    pub global_rounds: usize,
    #[serde(default = "default_rounds")]
    pub personalization_rounds: usize,
    #[serde(default = "default_eval_gap")]
    pub eval_gap: usize,
    /// Add an evaluation after the last personalization round.
    #[serde(default)]
    pub include_final_eval: bool,
    pub samplers: Vec<SamplerKind>,
    #[serde(default)]
    pub sampler_params: SamplerParams,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl Config {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(CliError::Invalid(msg.into()));
        if self.num_clients == 0 {
            return bad("num_clients must be positive");
        }
        if !(self.concentration.is_finite() && self.concentration > 0.0) {
            return bad("concentration must be positive");
        }
        if self.num_folds < 2 {
            return bad("num_folds must be at least 2");
        }
        if self.global_rounds == 0 || self.personalization_rounds == 0 || self.eval_gap == 0 {
            return bad("round counts and eval_gap must be positive");
        }
        if self.samplers.is_empty() {
            return bad("samplers must not be empty");
        }
        if self.model.input_channels == 0 || self.model.latent_dim == 0 {
            return bad("model sizes must be positive");
        }
        if !(self.optim.learning_rate.is_finite() && self.optim.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.optim.batch_size == 0 || self.optim.local_epochs == 0 {
            return bad("batch_size and local_epochs must be positive");
        }
        if let DatasetConfig::Synthetic(s) = &self.dataset {
            if s.counts.len() < 2 || s.counts.contains(&0) || s.dim == 0 {
                return bad("synthetic dataset needs ≥ 2 non-empty classes and dim ≥ 1");
            }
            if !(s.noise.is_finite() && s.noise > 0.0 && s.amplitude.is_finite()) {
                return bad("synthetic noise must be positive");
            }
        }
        self.plan().validate()?;
        self.hyper().validate()?;
        Ok(())
    }

    pub fn plan(&self) -> ExperimentPlan {
        let p = &self.sampler_params;
        ExperimentPlan {
            num_folds: self.num_folds,
            global_rounds: self.global_rounds,
            personalization_rounds: self.personalization_rounds,
            eval_gap: self.eval_gap,
            include_final_eval: self.include_final_eval,
            samplers: self
                .samplers
                .iter()
                .map(|&kind| SamplerSpec {
                    kind,
                    k_neighbors: p.k_neighbors,
                    m_neighbors: p.m_neighbors,
                    enn_k: p.enn_k,
                    svm: p.svm,
                })
                .collect(),
            seed: self.seed,
        }
    }

    pub fn hyper(&self) -> HyperParams {
        let s = &self.simulation;
        HyperParams {
            learning_rate: self.optim.learning_rate,
            batch_size: self.optim.batch_size,
            local_epochs: self.optim.local_epochs,
            participation: s.participation,
            personalize_scope: if self.model.personalize_full_model {
                TrainScope::Full
            } else {
                TrainScope::HeadOnly
            },
            train_cost_per_batch: s.train_cost_per_batch,
            send_cost: s.send_cost,
            slow_factor: s.slow_factor,
            train_slow_rate: s.train_slow_rate,
            send_slow_rate: s.send_slow_rate,
        }
    }

    /// Architecture for a dataset with `dim` features and `num_classes`.
    pub fn arch(&self, dim: usize, num_classes: usize) -> Result<ArchSpec> {
        let ch = self.model.input_channels;
        if !dim.is_multiple_of(ch) {
            return Err(CliError::Invalid(format!(
                "{dim} features do not split into {ch} channels"
            )));
        }
        Ok(ArchSpec {
            input_channels: ch,
            input_length: dim / ch,
            stages: self.model.stages.clone(),
            latent_dim: self.model.latent_dim,
            hidden: self.model.hidden.clone(),
            num_classes,
            recon_weight: self.model.alpha,
            pred_weight: self.model.beta,
        })
    }

    /// Experiment settings for `ds`, checkpointing under the output directory.
    pub fn experiment(&self, ds: &Dataset) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig {
            plan: self.plan(),
            num_clients: self.num_clients,
            concentration: self.concentration,
            arch: self.arch(ds.dim(), ds.num_classes())?,
            hyper: self.hyper(),
            checkpoint_dir: self.output_dir.join("checkpoints"),
        })
    }

    /// Loads or generates the dataset. Relative CSV paths resolve against
    /// `base`.
    pub fn load_dataset(&self, base: &Path) -> Result<Dataset> {
        Ok(match &self.dataset {
            DatasetConfig::Csv { path, label_column } => dataset::load_csv(base.join(path), label_column)?,
            DatasetConfig::Synthetic(s) => dataset::generate_synthetic(
                &SyntheticSpec::waveforms(&s.counts, s.dim, s.amplitude, s.noise),
                rng::derive_seed(self.seed, &[purpose::SYNTHETIC]),
            )?,
        })
    }
}

/// Reads, parses and validates a config file.
pub fn parse_config(path: impl AsRef<Path>) -> Result<Config> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let config = Config::from_json(&text).map_err(|source| CliError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    config.validate()?;
    Ok(config)
}

/// Formats a metric with six decimals.
fn fx(v: f64) -> String {
    format!("{v:.6}")
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.fold,
            r.sampler,
            r.round,
            fx(r.test_accuracy),
            fx(r.test_auc),
            fx(r.std_test_accuracy),
            fx(r.std_test_auc),
            fx(r.train_loss)
        )
        .unwrap();
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.sampler,
            r.round,
            r.folds,
            fx(r.test_accuracy),
            fx(r.test_auc),
            fx(r.std_test_accuracy),
            fx(r.std_test_auc),
            fx(r.train_loss)
        )
        .unwrap();
    }
    out
}

/// Rows grouped by sampler in first-appearance order.
pub fn violin_csv(records: &[MetricsRecord]) -> String {
    let mut order: Vec<SamplerKind> = Vec::new();
    for r in records {
        if !order.contains(&r.sampler) {
            order.push(r.sampler);
        }
    }
    let mut out = format!("{VIOLIN_HEADER}\n");
    for s in order {
        for r in records.iter().filter(|r| r.sampler == s) {
            writeln!(out, "{},{},{},{}", s, r.fold, r.round, fx(r.std_test_accuracy)).unwrap();
        }
    }
    out
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    format_version: u32,
    seed: u64,
    core_parallel: bool,
    config: &'a Config,
}

/// Paths of the files a run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFiles {
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub violin: PathBuf,
    pub manifest: PathBuf,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Runs the experiment and writes all outputs. `base` resolves relative
/// dataset paths.
pub fn run(config: &Config, base: &Path) -> Result<(ExperimentOutput, RunFiles)> {
    config.validate()?;
    let ds = config.load_dataset(base)?;
    let out_dir = &config.output_dir;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let experiment = config.experiment(&ds)?;
    log::info!(
        "{} rows, {} classes, {} clients, {} folds, samplers: {:?}",
        ds.len(),
        ds.num_classes(),
        config.num_clients,
        config.num_folds,
        config.samplers.iter().map(|s| s.name()).collect::<Vec<_>>()
    );
    let output = crossval::run_experiment(&experiment, &ds)?;
    let files = RunFiles {
        metrics: out_dir.join("metrics.csv"),
        summary: out_dir.join("summary.csv"),
        violin: out_dir.join("violin.csv"),
        manifest: out_dir.join("run_manifest.json"),
    };
    write(&files.metrics, &metrics_csv(&output.table.records))?;
    write(&files.summary, &summary_csv(&output.summary))?;
    write(&files.violin, &violin_csv(&output.table.records))?;
    let manifest = RunManifest {
        format_version: FORMAT_VERSION,
        seed: config.seed,
        core_parallel: latentfed_core::par::is_parallel(),
        config,
    };
    write(
        &files.manifest,
        &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"),
    )?;
    Ok((output, files))
}
