//! Stratified K-fold experiment loop.
//!
//! For each fold: split every client's shard (stratified within the client),
//! train the global model, checkpoint the server and every client, then for
//! each sampler personalize all clients from that checkpoint while
//! evaluating every `eval_gap` rounds. The checkpoint is reloaded from disk
//! before each sampler, so every sampler starts from the same state and its
//! results do not depend on which other samplers ran.

use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, client_file, GLOBAL_FILE};
use crate::dataset::{partition_noniid, stratified_kfold, ClientShard, Dataset, FoldPlan};
use crate::error::{Error, Result};
use crate::federation::{self, ClientState, HyperParams, ServerState};
use crate::gcae::{init_model, ArchSpec};
use crate::metrics::{self, MetricsRecord, SummaryRow};
use crate::par;
use crate::resampling::{SamplerKind, SamplerSpec};
use crate::rng::{self, purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub num_folds: usize,
    pub global_rounds: usize,
    pub personalization_rounds: usize,
    /// Personalization rounds `0, eval_gap, 2·eval_gap, …` are evaluated
    /// before that round's training.
    pub eval_gap: usize,
    /// Also evaluate once after the last personalization round.
    pub include_final_eval: bool,
    pub samplers: Vec<SamplerSpec>,
    pub seed: u64,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_folds < 2 {
            return bad(format!("num_folds must be ≥ 2, got {}", self.num_folds));
        }
        if self.global_rounds == 0 || self.personalization_rounds == 0 {
            return bad("round counts must be ≥ 1".into());
        }
        if self.eval_gap == 0 {
            return bad("eval_gap must be ≥ 1".into());
        }
        if self.samplers.is_empty() {
            return bad("sampler list is empty".into());
        }
        for (i, s) in self.samplers.iter().enumerate() {
            if self.samplers[..i].iter().any(|t| t.kind == s.kind) {
                return bad(format!("sampler {} listed twice", s.kind));
            }
            s.validate()?;
        }
        Ok(())
    }

    /// Personalization rounds at which metrics are recorded.
    pub fn evaluation_rounds(&self) -> Vec<usize> {
        let mut rounds: Vec<usize> = (0..self.personalization_rounds).step_by(self.eval_gap).collect();
        if self.include_final_eval {
            rounds.push(self.personalization_rounds);
        }
        rounds
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub plan: ExperimentPlan,
    pub num_clients: usize,
    /// Dirichlet concentration of the label-skewed partition.
    pub concentration: f64,
    pub arch: ArchSpec,
    pub hyper: HyperParams,
    /// Per-fold checkpoint directories are created below this path.
    pub checkpoint_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        self.plan.validate()?;
        self.hyper.validate()?;
        self.arch.validate()?;
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be ≥ 1".into()));
        }
        if !(self.concentration.is_finite() && self.concentration > 0.0) {
            return Err(Error::Config("concentration must be positive".into()));
        }
        if self.arch.input_size() != ds.dim() {
            return Err(Error::Config(format!(
                "model input {}×{} does not match {} dataset features",
                self.arch.input_channels,
                self.arch.input_length,
                ds.dim()
            )));
        }
        if self.arch.num_classes != ds.num_classes() {
            return Err(Error::Config(format!(
                "model has {} classes, dataset has {}",
                self.arch.num_classes,
                ds.num_classes()
            )));
        }
        Ok(())
    }
}

/// Every recorded evaluation, in (fold, sampler, round) order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub records: Vec<MetricsRecord>,
}

impl MetricsTable {
    pub fn for_sampler(&self, kind: SamplerKind) -> Vec<&MetricsRecord> {
        self.records.iter().filter(|r| r.sampler == kind).collect()
    }

    fn column(&self, kind: SamplerKind, f: impl Fn(&MetricsRecord) -> f64) -> Vec<f64> {
        self.for_sampler(kind).into_iter().map(f).collect()
    }

    pub fn accuracy(&self, kind: SamplerKind) -> Vec<f64> {
        self.column(kind, |r| r.test_accuracy)
    }

    pub fn aucs(&self, kind: SamplerKind) -> Vec<f64> {
        self.column(kind, |r| r.test_auc)
    }

    pub fn std_accuracy(&self, kind: SamplerKind) -> Vec<f64> {
        self.column(kind, |r| r.std_test_accuracy)
    }

    pub fn std_aucs(&self, kind: SamplerKind) -> Vec<f64> {
        self.column(kind, |r| r.std_test_auc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub table: MetricsTable,
    /// Per (sampler, round) means over folds.
    pub summary: Vec<SummaryRow>,
}

/// Client shards and their per-client fold plans.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub shards: Vec<ClientShard>,
    /// Fold plan over each shard's local positions.
    pub fold_plans: Vec<FoldPlan>,
}

impl Split {
    /// Dataset indices of client `c`'s (train, test) rows in `fold`.
    pub fn client_fold(&self, c: usize, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let shard = &self.shards[c].sample_indices;
        let plan = &self.fold_plans[c];
        let map = |local: Vec<usize>| local.into_iter().map(|i| shard[i]).collect();
        (map(plan.train_indices(fold)), map(plan.test_indices(fold)))
    }
}

/// Partitions the dataset across clients and stratifies each shard.
pub fn split(config: &ExperimentConfig, ds: &Dataset) -> Result<Split> {
    let seed = config.plan.seed;
    let shards = partition_noniid(
        ds,
        config.num_clients,
        config.concentration,
        rng::derive_seed(seed, &[purpose::PARTITION]),
    )?;
    let fold_plans = shards
        .iter()
        .map(|s| {
            let labels: Vec<usize> = s.sample_indices.iter().map(|&i| ds.labels()[i]).collect();
            let k = config.plan.num_folds;
            if labels.len() < k {
                return Err(Error::Config(format!(
                    "client {} holds {} samples, fewer than {k} folds",
                    s.client_id,
                    labels.len()
                )));
            }
            stratified_kfold(
                &labels,
                k,
                rng::derive_seed(seed, &[purpose::CLIENT_FOLDS, s.client_id as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Split { shards, fold_plans })
}

fn fold_dir(config: &ExperimentConfig, fold: usize) -> PathBuf {
    config.checkpoint_dir.join(format!("fold_{fold}"))
}

/// Trains the global model for one fold and checkpoints it. Returns the
/// final global training loss.
fn global_phase(config: &ExperimentConfig, ds: &Dataset, split: &Split, fold: usize) -> Result<f64> {
    let seed = rng::derive_seed(config.plan.seed, &[purpose::FOLD, fold as u64]);
    let model = init_model::<f32>(&config.arch, rng::derive_seed(seed, &[purpose::INIT]))?;
    let splits = (0..split.shards.len())
        .map(|c| {
            let (train, test) = split.client_fold(c, fold);
            (split.shards[c].client_id, train, test)
        })
        .collect();
    let mut server = ServerState::new(model, splits, &config.hyper, seed)?;
    for round in 0..config.plan.global_rounds {
        federation::run_global_round(&mut server, ds, &config.hyper, seed, round)
            .map_err(|e| e.context(format!("global round {round}")))?;
    }
    let dir = fold_dir(config, fold);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    checkpoint::save_global(&server, dir.join(GLOBAL_FILE))?;
    for c in &server.clients {
        checkpoint::save_client(c, dir.join(client_file(c.client_id)))?;
    }
    Ok(*server.rs_train_loss.last().expect("at least one global round"))
}

/// Restores the un-personalized server and every client from disk.
fn reload(config: &ExperimentConfig, fold: usize) -> Result<ServerState> {
    let dir = fold_dir(config, fold);
    let mut server = checkpoint::load_global(dir.join(GLOBAL_FILE))?;
    for c in &mut server.clients {
        *c = checkpoint::load_client(dir.join(client_file(c.client_id)))?;
    }
    Ok(server)
}

fn record(fold: usize, sampler: SamplerKind, round: usize, clients: &[ClientState], ds: &Dataset, loss: f64) -> Result<MetricsRecord> {
    let s = federation::evaluate_clients(clients, ds)?;
    Ok(MetricsRecord {
        fold,
        sampler,
        round,
        test_accuracy: s.accuracy,
        test_auc: s.auc,
        std_test_accuracy: s.std_accuracy,
        std_test_auc: s.std_auc,
        train_loss: loss,
    })
}

/// Personalization trial for one sampler, starting from the fold checkpoint.
fn sampler_trial(
    config: &ExperimentConfig,
    ds: &Dataset,
    fold: usize,
    sampler: &SamplerSpec,
    base_loss: f64,
) -> Result<Vec<MetricsRecord>> {
    let plan = &config.plan;
    let seed = rng::derive_seed(plan.seed, &[purpose::FOLD, fold as u64]);
    let server = reload(config, fold)?;
    let global = &server.global_model;
    let sets = par::map_slice(&server.clients, |_, c| {
        federation::generate_personalization_data(
            global,
            ds,
            &c.train_indices,
            sampler,
            federation::resample_seed(seed, sampler, c.client_id),
        )
        .map_err(|e| e.context(format!("client {}", c.client_id)))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut clients = server.clients;
    let mut records = Vec::new();
    let mut loss = base_loss;
    for round in 0..plan.personalization_rounds {
        if round % plan.eval_gap == 0 {
            records.push(
                record(fold, sampler.kind, round, &clients, ds, loss)
                    .map_err(|e| e.context(format!("evaluation at round {round}")))?,
            );
        }
        let results = par::map_slice(&clients, |i, c| {
            let mut c = c.clone();
            let s = federation::personalize_seed(seed, sampler, c.client_id, round);
            let id = c.client_id;
            federation::personalize_round(&mut c, &sets[i], &config.hyper, s)
                .map(|l| (c, l))
                .map_err(|e| e.context(format!("round {round}, client {id}")))
        });
        let mut losses = Vec::with_capacity(clients.len());
        for (slot, r) in clients.iter_mut().zip(results) {
            let (c, l) = r?;
            *slot = c;
            losses.push(l);
        }
        loss = metrics::mean(&losses)?;
    }
    if plan.include_final_eval {
        let round = plan.personalization_rounds;
        records.push(
            record(fold, sampler.kind, round, &clients, ds, loss)
                .map_err(|e| e.context(format!("evaluation at round {round}")))?,
        );
    }
    Ok(records)
}

/// Global training, checkpointing and every sampler trial for one fold.
pub fn run_fold(config: &ExperimentConfig, ds: &Dataset, split: &Split, fold: usize) -> Result<Vec<MetricsRecord>> {
    let base_loss = global_phase(config, ds, split, fold).map_err(|e| e.context(format!("fold {fold}")))?;
    let mut records = Vec::new();
    for sampler in &config.plan.samplers {
        records.extend(
            sampler_trial(config, ds, fold, sampler, base_loss)
                .map_err(|e| e.context(format!("fold {fold}, sampler {}", sampler.kind)))?,
        );
    }
    Ok(records)
}

/// Runs every fold (in parallel when enabled) and aggregates over folds.
pub fn run_experiment(config: &ExperimentConfig, ds: &Dataset) -> Result<ExperimentOutput> {
    config.validate(ds)?;
    let split = split(config, ds)?;
    let per_fold = par::try_map_range(config.plan.num_folds, |f| run_fold(config, ds, &split, f))?;
    let table = MetricsTable {
        records: per_fold.into_iter().flatten().collect(),
    };
    let summary = metrics::aggregate_over_folds(&table.records)?;
    Ok(ExperimentOutput { table, summary })
}
