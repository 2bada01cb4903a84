//! Simulated cloud-edge federation: server and client state, FedAvg,
//! global training rounds, latent-space personalization and evaluation.
//!
//! Client work inside a round is independent and runs through [`crate::par`];
//! every client draws from its own seeded stream and aggregation walks the
//! clients in roster order, so results do not depend on scheduling.

use log::warn;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gcae::{self, Batch, ModelState, Real, TrainScope};
use crate::metrics::{self, EvalResult};
use crate::par;
use crate::resampling::{self, Provenance, SamplerSpec};
use crate::rng::{self, purpose};

/// Models are trained and stored in single precision.
pub type Model = ModelState<f32>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    /// Fraction of clients taking part in each global round.
    pub participation: f64,
    /// Which parameters personalization retrains.
    pub personalize_scope: TrainScope,
    /// Simulated time charged per local training batch.
    pub train_cost_per_batch: f64,
    /// Simulated time charged per model upload.
    pub send_cost: f64,
    /// Multiplier applied to the costs of clients flagged slow.
    pub slow_factor: f64,
    pub train_slow_rate: f64,
    pub send_slow_rate: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 32,
            local_epochs: 1,
            participation: 1.0,
            personalize_scope: TrainScope::Full,
            train_cost_per_batch: 1.0,
            send_cost: 1.0,
            slow_factor: 2.0,
            train_slow_rate: 0.0,
            send_slow_rate: 0.0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("hyperparameters: {msg}")));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return bad("batch_size and local_epochs must be ≥ 1");
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad("participation must be in (0, 1]");
        }
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !rate_ok(self.train_slow_rate) || !rate_ok(self.send_slow_rate) {
            return bad("slow rates must be in [0, 1]");
        }
        let cost_ok = |c: f64| c.is_finite() && c >= 0.0;
        if !cost_ok(self.train_cost_per_batch) || !cost_ok(self.send_cost) || !cost_ok(self.slow_factor) {
            return bad("simulated costs must be finite and ≥ 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub model: Model,
    /// Dataset row indices used for training in the current fold.
    pub train_indices: Vec<usize>,
    /// Dataset row indices held out in the current fold.
    pub test_indices: Vec<usize>,
    pub train_slow: bool,
    pub send_slow: bool,
    pub train_time_cost: f64,
    pub send_time_cost: f64,
}

impl ClientState {
    pub fn new(client_id: usize, model: Model, train_indices: Vec<usize>, test_indices: Vec<usize>) -> Self {
        Self {
            client_id,
            model,
            train_indices,
            test_indices,
            train_slow: false,
            send_slow: false,
            train_time_cost: 0.0,
            send_time_cost: 0.0,
        }
    }

    pub fn validate(&self, arch: &gcae::ArchSpec) -> Result<()> {
        if self.model.arch != *arch {
            return Err(Error::Federation(format!(
                "client {} model architecture differs from the server's",
                self.client_id
            )));
        }
        let mut train = self.train_indices.clone();
        train.sort_unstable();
        if self.test_indices.iter().any(|i| train.binary_search(i).is_ok()) {
            return Err(Error::Federation(format!(
                "client {} has overlapping train and test indices",
                self.client_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global_model: Model,
    pub clients: Vec<ClientState>,
    /// Positions in `clients` taking part in the latest round.
    pub selected_clients: Vec<usize>,
    pub train_slow_clients: Vec<usize>,
    pub send_slow_clients: Vec<usize>,
    pub rs_test_acc: Vec<f64>,
    pub rs_test_auc: Vec<f64>,
    pub rs_train_loss: Vec<f64>,
}

impl ServerState {
    /// Every client starts from a copy of `global_model`. Slow flags are
    /// assigned to seeded random subsets of the configured sizes.
    pub fn new(
        global_model: Model,
        splits: Vec<(usize, Vec<usize>, Vec<usize>)>,
        hyper: &HyperParams,
        seed: u64,
    ) -> Result<Self> {
        hyper.validate()?;
        if splits.is_empty() {
            return Err(Error::Federation("no clients".into()));
        }
        let mut clients: Vec<ClientState> = splits
            .into_iter()
            .map(|(id, train, test)| ClientState::new(id, global_model.clone(), train, test))
            .collect();
        let n = clients.len();
        let pick = |rate: f64, tag: u64| -> Vec<usize> {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(seed, &[tag]));
            let mut chosen = order[..(rate * n as f64).round() as usize].to_vec();
            chosen.sort_unstable();
            chosen
        };
        let train_slow_clients = pick(hyper.train_slow_rate, 0);
        let send_slow_clients = pick(hyper.send_slow_rate, 1);
        for &i in &train_slow_clients {
            clients[i].train_slow = true;
        }
        for &i in &send_slow_clients {
            clients[i].send_slow = true;
        }
        let server = Self {
            global_model,
            selected_clients: (0..n).collect(),
            clients,
            train_slow_clients,
            send_slow_clients,
            rs_test_acc: Vec::new(),
            rs_test_auc: Vec::new(),
            rs_train_loss: Vec::new(),
        };
        server.validate()?;
        Ok(server)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.clients.len();
        let in_range = |v: &[usize]| v.iter().all(|&i| i < n);
        if !in_range(&self.selected_clients)
            || !in_range(&self.train_slow_clients)
            || !in_range(&self.send_slow_clients)
        {
            return Err(Error::Federation("client index list out of range".into()));
        }
        if self.rs_test_acc.len() != self.rs_test_auc.len()
            || self.rs_test_acc.len() != self.rs_train_loss.len()
        {
            return Err(Error::Federation("metric histories have different lengths".into()));
        }
        for c in &self.clients {
            c.validate(&self.global_model.arch)?;
        }
        Ok(())
    }
}

/// Sample-count weighted mean of every parameter, accumulated in `f64` in
/// list order.
pub fn fedavg<T: Real>(models: &[&ModelState<T>], sample_counts: &[usize]) -> Result<ModelState<T>> {
    let Some(first) = models.first() else {
        return Err(Error::Federation("fedavg needs at least one model".into()));
    };
    if models.len() != sample_counts.len() {
        return Err(Error::Federation(format!(
            "{} models but {} sample counts",
            models.len(),
            sample_counts.len()
        )));
    }
    if sample_counts.contains(&0) {
        return Err(Error::Federation("sample counts must be positive".into()));
    }
    if models.iter().any(|m| !gcae::compatible(m, first)) {
        return Err(Error::Federation("models have different architectures".into()));
    }
    let total: f64 = sample_counts.iter().map(|&c| c as f64).sum();
    let mut out = (*first).clone();
    for (ti, tensor) in out.tensors.iter_mut().enumerate() {
        for (vi, v) in tensor.values.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (m, &c) in models.iter().zip(sample_counts) {
                acc += c as f64 * m.tensors[ti].values[vi].to_f64().unwrap();
            }
            *v = T::from(acc / total).expect("float cast");
        }
    }
    Ok(out)
}

/// Rows of `ds` at `indices` as a model input batch.
pub fn batch_of(ds: &Dataset, indices: &[usize], arch: &gcae::ArchSpec) -> Result<(Batch<f32>, Vec<usize>)> {
    let rows = ds.features().select(Axis(0), indices);
    let batch = Batch::from_rows(rows.view(), arch.input_channels, arch.input_length)?;
    let labels = indices.iter().map(|&i| ds.labels()[i]).collect();
    Ok((batch, labels))
}

/// Outcome of local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub model: Model,
    /// Mean loss over every batch seen.
    pub mean_loss: f64,
    pub batches: usize,
}

/// `epochs` passes of minibatch SGD over a seeded shuffle of the data.
pub fn local_train(
    model: &Model,
    data: &Batch<f32>,
    labels: &[usize],
    hyper: &HyperParams,
    epochs: usize,
    scope: TrainScope,
    seed: u64,
) -> Result<LocalUpdate> {
    if data.is_empty() {
        return Err(Error::Federation("no training data".into()));
    }
    let mut rng = rng::from_seed(seed);
    let mut model = model.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_sum = 0.0;
    let mut batches = 0;
    let lr = hyper.learning_rate as f32;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let x = data.select(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let step = gcae::train_step(&model, &x, &y, lr, scope)?;
            loss_sum += step.loss as f64;
            batches += 1;
            model = step.model;
        }
    }
    Ok(LocalUpdate {
        model,
        mean_loss: loss_sum / batches as f64,
        batches,
    })
}

/// Accuracy and macro AUC of `model` on the rows at `indices`.
pub fn evaluate_model(model: &Model, ds: &Dataset, indices: &[usize]) -> Result<EvalResult> {
    if indices.is_empty() {
        return Err(Error::Federation("empty test split".into()));
    }
    let (batch, labels) = batch_of(ds, indices, &model.arch)?;
    let probs = gcae::predict_proba(model, &batch)?;
    let predicted = metrics::argmax_rows(probs.view());
    let present = metrics::class_counts_present(&labels);
    let auc = if present >= 2 {
        Some(metrics::roc_auc_macro(probs.view(), &labels)?)
    } else {
        None
    };
    Ok(EvalResult {
        accuracy: metrics::accuracy(&predicted, &labels)?,
        auc,
        sample_count: labels.len(),
    })
}

/// Cross-client aggregate of per-client evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    /// Test-count weighted mean accuracy.
    pub accuracy: f64,
    /// Test-count weighted mean AUC over clients whose AUC is defined.
    pub auc: f64,
    pub std_accuracy: f64,
    pub std_auc: f64,
}

/// Combines per-client results (skipping `None`, i.e. excluded clients).
pub fn summarize(results: &[Option<EvalResult>]) -> Result<ClientSummary> {
    let ok: Vec<&EvalResult> = results.iter().flatten().collect();
    if ok.is_empty() {
        return Err(Error::Federation("no client could be evaluated".into()));
    }
    let weighted = |rs: &[&EvalResult], f: &dyn Fn(&EvalResult) -> f64| {
        let total: f64 = rs.iter().map(|r| r.sample_count as f64).sum();
        rs.iter().map(|r| r.sample_count as f64 * f(r)).sum::<f64>() / total
    };
    let with_auc: Vec<&EvalResult> = ok.iter().copied().filter(|r| r.auc.is_some()).collect();
    if with_auc.is_empty() {
        return Err(Error::Federation(
            "no client test split holds two classes; AUC undefined".into(),
        ));
    }
    let accs: Vec<f64> = ok.iter().map(|r| r.accuracy).collect();
    let aucs: Vec<f64> = with_auc.iter().map(|r| r.auc.unwrap()).collect();
    Ok(ClientSummary {
        accuracy: weighted(&ok, &|r| r.accuracy),
        auc: weighted(&with_auc, &|r| r.auc.unwrap()),
        std_accuracy: metrics::sample_std(&accs)?,
        std_auc: metrics::sample_std(&aucs)?,
    })
}

/// Evaluates each client's own model on its test split.
pub fn evaluate_clients(clients: &[ClientState], ds: &Dataset) -> Result<ClientSummary> {
    let results = par::map_slice(clients, |_, c| {
        if c.test_indices.is_empty() {
            warn!("client {} has no test data; excluded from evaluation", c.client_id);
            return Ok(None);
        }
        evaluate_model(&c.model, ds, &c.test_indices).map(Some)
    });
    let results: Vec<Option<EvalResult>> = results.into_iter().collect::<Result<_>>()?;
    summarize(&results)
}

/// Evaluates one shared model on every client's test split.
pub fn evaluate_shared(model: &Model, clients: &[ClientState], ds: &Dataset) -> Result<ClientSummary> {
    let results = par::map_slice(clients, |_, c| {
        if c.test_indices.is_empty() {
            return Ok(None);
        }
        evaluate_model(model, ds, &c.test_indices).map(Some)
    });
    let results: Vec<Option<EvalResult>> = results.into_iter().collect::<Result<_>>()?;
    summarize(&results)
}

/// Positions of the clients taking part in global round `round`.
pub fn select_clients(n: usize, participation: f64, seed: u64, round: usize) -> Vec<usize> {
    let take = ((participation * n as f64).ceil() as usize).clamp(1, n);
    if take == n {
        return (0..n).collect();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[purpose::GLOBAL_ROUND, round as u64, u64::MAX]));
    let mut chosen = order[..take].to_vec();
    chosen.sort_unstable();
    chosen
}

/// One FedAvg round: selected clients train a copy of the global model on
/// their train split, the server averages the results by sample count,
/// broadcasts the new global model and records its test metrics.
pub fn run_global_round(
    server: &mut ServerState,
    ds: &Dataset,
    hyper: &HyperParams,
    seed: u64,
    round: usize,
) -> Result<()> {
    let selected = select_clients(server.clients.len(), hyper.participation, seed, round);
    let global = &server.global_model;
    let updates = par::map_slice(&selected, |_, &ci| -> Result<Option<LocalUpdate>> {
        let c = &server.clients[ci];
        if c.train_indices.is_empty() {
            warn!("client {} has no training data; skipped this round", c.client_id);
            return Ok(None);
        }
        let (x, y) = batch_of(ds, &c.train_indices, &global.arch)?;
        let s = rng::derive_seed(seed, &[purpose::GLOBAL_ROUND, round as u64, c.client_id as u64]);
        local_train(global, &x, &y, hyper, hyper.local_epochs, TrainScope::Full, s)
            .map(Some)
            .map_err(|e| e.context(format!("client {}", c.client_id)))
    });
    let mut models = Vec::new();
    let mut counts = Vec::new();
    let mut losses = Vec::new();
    for (&ci, update) in selected.iter().zip(updates) {
        let Some(update) = update? else { continue };
        let c = &mut server.clients[ci];
        let slow = |flag: bool| if flag { hyper.slow_factor } else { 1.0 };
        c.train_time_cost += hyper.train_cost_per_batch * update.batches as f64 * slow(c.train_slow);
        c.send_time_cost += hyper.send_cost * slow(c.send_slow);
        counts.push(c.train_indices.len());
        losses.push(update.mean_loss);
        models.push(update.model);
    }
    if models.is_empty() {
        return Err(Error::Federation(format!(
            "round {round}: every selected client lacks training data"
        )));
    }
    let refs: Vec<&Model> = models.iter().collect();
    server.global_model = fedavg(&refs, &counts)?;
    for c in &mut server.clients {
        c.model = server.global_model.clone();
    }
    let summary = evaluate_shared(&server.global_model, &server.clients, ds)?;
    server.selected_clients = selected;
    server.rs_train_loss.push(metrics::mean(&losses)?);
    server.rs_test_acc.push(summary.accuracy);
    server.rs_test_auc.push(summary.auc);
    Ok(())
}

/// A client's class-balanced personalization training set.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizationSet {
    pub data: Batch<f32>,
    pub labels: Vec<usize>,
    /// Rows decoded from synthetic latent codes.
    pub synthetic_count: usize,
    pub warnings: Vec<String>,
}

/// Encodes the client's train rows with `global`, resamples the latent
/// codes, and decodes the synthetic codes. Surviving original rows keep their
/// raw features.
pub fn generate_personalization_data(
    global: &Model,
    ds: &Dataset,
    train_indices: &[usize],
    sampler: &SamplerSpec,
    seed: u64,
) -> Result<PersonalizationSet> {
    let (x, y) = batch_of(ds, train_indices, &global.arch)?;
    let present = metrics::class_counts_present(&y);
    if present < 2 {
        let msg = format!("only {present} class in local training data; resampling skipped");
        warn!("{msg}");
        return Ok(PersonalizationSet {
            data: x,
            labels: y,
            synthetic_count: 0,
            warnings: vec![msg],
        });
    }
    let latent = gcae::encode(global, &x)?.mapv(|v| v as f64);
    let set = resampling::resample(latent.view(), &y, sampler, &mut rng::from_seed(seed))?;
    for w in &set.warnings {
        warn!("{}: {w}", sampler.kind);
    }
    let synthetic_rows: Vec<usize> = (0..set.len()).filter(|&i| set.provenance[i].is_synthetic()).collect();
    let z: Array2<f32> = set.features.select(Axis(0), &synthetic_rows).mapv(|v| v as f32);
    let decoded = gcae::decode(global, z.view())?;
    let mut data = Vec::with_capacity(set.len() * x.sample_size());
    let mut next_synthetic = 0;
    for p in &set.provenance {
        match *p {
            Provenance::Original { source } => data.extend_from_slice(x.sample(source)),
            Provenance::Synthetic { .. } => {
                data.extend_from_slice(decoded.sample(next_synthetic));
                next_synthetic += 1;
            }
        }
    }
    Ok(PersonalizationSet {
        data: Batch::new(x.channels, x.length, data)?,
        labels: set.labels,
        synthetic_count: synthetic_rows.len(),
        warnings: set.warnings,
    })
}

/// One personalization round for one client: `local_epochs` passes over its
/// personalization set starting from its current model.
pub fn personalize_round(
    client: &mut ClientState,
    set: &PersonalizationSet,
    hyper: &HyperParams,
    seed: u64,
) -> Result<f64> {
    let update = local_train(
        &client.model,
        &set.data,
        &set.labels,
        hyper,
        hyper.local_epochs,
        hyper.personalize_scope,
        seed,
    )?;
    let factor = if client.train_slow { hyper.slow_factor } else { 1.0 };
    client.train_time_cost += hyper.train_cost_per_batch * update.batches as f64 * factor;
    client.model = update.model;
    Ok(update.mean_loss)
}

/// Seed for a client's resampling draw under one sampler.
pub fn resample_seed(seed: u64, sampler: &SamplerSpec, client_id: usize) -> u64 {
    rng::derive_seed(seed, &[purpose::RESAMPLE, sampler.kind.id(), client_id as u64])
}

/// Seed for a client's personalization round under one sampler.
pub fn personalize_seed(seed: u64, sampler: &SamplerSpec, client_id: usize, round: usize) -> u64 {
    rng::derive_seed(
        seed,
        &[purpose::PERSONALIZE, sampler.kind.id(), client_id as u64, round as u64],
    )
}

/// Full personalization of one client: builds the balanced set from the
/// global model, then trains a copy of the global model on it for `rounds`
/// rounds. The global model is not modified.
pub fn personalize_client(
    client: &ClientState,
    global: &Model,
    ds: &Dataset,
    sampler: &SamplerSpec,
    hyper: &HyperParams,
    rounds: usize,
    seed: u64,
) -> Result<ClientState> {
    let set = generate_personalization_data(
        global,
        ds,
        &client.train_indices,
        sampler,
        resample_seed(seed, sampler, client.client_id),
    )?;
    let mut out = client.clone();
    out.model = global.clone();
    for round in 0..rounds {
        personalize_round(&mut out, &set, hyper, personalize_seed(seed, sampler, client.client_id, round))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{class_counts, generate_synthetic, SyntheticSpec};
    use crate::gcae::{init_model, ArchSpec};
    use crate::resampling::SamplerKind;
    use approx::assert_abs_diff_eq;

    fn scalar_model(v: f64) -> ModelState<f64> {
        let arch = ArchSpec::default_for(8, 2);
        let mut m = ModelState::<f64>::zeros(&arch).unwrap();
        m.tensors[0].values[0] = v;
        m
    }

    fn small_setup() -> (Dataset, ServerState, HyperParams) {
        let spec = SyntheticSpec::waveforms(&[30, 30, 6], 16, 1.0, 0.5);
        let ds = generate_synthetic(&spec, 5).unwrap();
        let arch = ArchSpec::default_for(16, 3);
        let model = init_model::<f32>(&arch, 1).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let a: Vec<usize> = idx.iter().copied().filter(|i| i % 2 == 0).collect();
        let b: Vec<usize> = idx.iter().copied().filter(|i| i % 2 == 1).collect();
        let split = |v: &[usize]| {
            let test: Vec<usize> = v.iter().copied().step_by(4).collect();
            let train: Vec<usize> = v.iter().copied().filter(|i| !test.contains(i)).collect();
            (train, test)
        };
        let (ta, sa) = split(&a);
        let (tb, sb) = split(&b);
        let hyper = HyperParams {
            batch_size: 8,
            ..HyperParams::default()
        };
        let server = ServerState::new(model, vec![(0, ta, sa), (1, tb, sb)], &hyper, 3).unwrap();
        (ds, server, hyper)
    }

    #[test]
    fn fedavg_examples() {
        let m = scalar_model(0.37);
        let out = fedavg(&[&m, &m, &m], &[3, 1, 9]).unwrap();
        assert_abs_diff_eq!(out.tensors[0].values[0], 0.37, epsilon = 1e-12);

        let out = fedavg(&[&scalar_model(1.25), &scalar_model(-1.25)], &[4, 4]).unwrap();
        assert_eq!(out.tensors[0].values[0], 0.0);

        let ms = [scalar_model(1.0), scalar_model(2.0), scalar_model(3.0)];
        let out = fedavg(&[&ms[0], &ms[1], &ms[2]], &[1, 2, 3]).unwrap();
        assert_abs_diff_eq!(out.tensors[0].values[0], 14.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn fedavg_errors() {
        let m = scalar_model(1.0);
        assert!(fedavg::<f64>(&[], &[]).is_err());
        assert!(fedavg(&[&m], &[0]).is_err());
        assert!(fedavg(&[&m], &[1, 2]).is_err());
        let other = ModelState::<f64>::zeros(&ArchSpec::default_for(12, 2)).unwrap();
        assert!(fedavg(&[&m, &other], &[1, 1]).is_err());
    }

    #[test]
    fn summarize_examples() {
        let r = |accuracy: f64, n: usize| Some(EvalResult { accuracy, auc: Some(accuracy), sample_count: n });
        let s = summarize(&[r(1.0, 10), r(0.5, 10), r(0.0, 10)]).unwrap();
        assert_abs_diff_eq!(s.accuracy, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.std_accuracy, 0.5, epsilon = 1e-12);
        let s = summarize(&[r(0.8, 7)]).unwrap();
        assert_eq!((s.accuracy, s.std_accuracy, s.std_auc), (0.8, 0.0, 0.0));
        let s = summarize(&[r(1.0, 30), None, r(0.0, 10)]).unwrap();
        assert_abs_diff_eq!(s.accuracy, 0.75, epsilon = 1e-12);
        assert!(summarize(&[None]).is_err());
    }

    #[test]
    fn identical_clients_have_zero_spread() {
        let (ds, server, _) = small_setup();
        let mut c = server.clients[0].clone();
        c.client_id = 1;
        let clients = vec![server.clients[0].clone(), c];
        let s = evaluate_clients(&clients, &ds).unwrap();
        let single = evaluate_model(&clients[0].model, &ds, &clients[0].test_indices).unwrap();
        assert_eq!(s.std_accuracy, 0.0);
        assert_eq!(s.accuracy, single.accuracy);
    }

    #[test]
    fn zero_learning_rate_round_is_identity() {
        let (ds, mut server, hyper) = small_setup();
        server.clients.truncate(1);
        let before = server.global_model.clone();
        let hyper = HyperParams { learning_rate: 1e-300, ..hyper };
        run_global_round(&mut server, &ds, &hyper, 9, 0).unwrap();
        assert_eq!(server.global_model, before);
        assert_eq!(server.rs_train_loss.len(), 1);
        assert_eq!(server.rs_test_acc.len(), 1);
    }

    #[test]
    fn global_round_matches_manual_composition() {
        let (ds, mut server, hyper) = small_setup();
        let start = server.global_model.clone();
        let mut manual = Vec::new();
        for c in &server.clients {
            let (x, y) = batch_of(&ds, &c.train_indices, &start.arch).unwrap();
            let s = rng::derive_seed(9, &[purpose::GLOBAL_ROUND, 4, c.client_id as u64]);
            manual.push(local_train(&start, &x, &y, &hyper, 1, TrainScope::Full, s).unwrap());
        }
        let refs: Vec<&Model> = manual.iter().map(|u| &u.model).collect();
        let counts: Vec<usize> = server.clients.iter().map(|c| c.train_indices.len()).collect();
        let expected = fedavg(&refs, &counts).unwrap();
        run_global_round(&mut server, &ds, &hyper, 9, 4).unwrap();
        assert_eq!(server.global_model, expected);
        assert!(server.clients.iter().all(|c| c.model == expected));
        assert_abs_diff_eq!(
            server.rs_train_loss[0],
            (manual[0].mean_loss + manual[1].mean_loss) / 2.0,
            epsilon = 1e-12
        );
        assert!(server.clients.iter().all(|c| c.train_time_cost > 0.0 && c.send_time_cost == 1.0));
    }

    #[test]
    fn identical_clients_aggregate_to_local_result() {
        let (ds, mut server, hyper) = small_setup();
        let mut twin = server.clients[0].clone();
        twin.client_id = 0;
        server.clients = vec![server.clients[0].clone(), twin];
        let (x, y) = batch_of(&ds, &server.clients[0].train_indices, &server.global_model.arch).unwrap();
        let s = rng::derive_seed(1, &[purpose::GLOBAL_ROUND, 0, 0]);
        let local = local_train(&server.global_model, &x, &y, &hyper, 1, TrainScope::Full, s).unwrap();
        run_global_round(&mut server, &ds, &hyper, 1, 0).unwrap();
        for (a, b) in server.global_model.tensors.iter().zip(&local.model.tensors) {
            for (u, v) in a.values.iter().zip(&b.values) {
                assert!((u - v).abs() <= 1e-6 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn no_training_data_is_an_error() {
        let (ds, mut server, hyper) = small_setup();
        for c in &mut server.clients {
            c.train_indices.clear();
        }
        assert!(run_global_round(&mut server, &ds, &hyper, 0, 0).is_err());
    }

    #[test]
    fn random_over_on_balanced_client_adds_nothing() {
        let (ds, server, _) = small_setup();
        let idx: Vec<usize> = (0..10).chain(30..40).collect();
        let spec = SamplerSpec::new(SamplerKind::RandomOver);
        let set = generate_personalization_data(&server.global_model, &ds, &idx, &spec, 1).unwrap();
        let (x, y) = batch_of(&ds, &idx, &server.global_model.arch).unwrap();
        assert_eq!(set.synthetic_count, 0);
        assert_eq!(set.data, x);
        assert_eq!(set.labels, y);
    }

    #[test]
    fn smote_personalization_matches_manual_pipeline() {
        let (ds, server, _) = small_setup();
        let idx = server.clients[0].train_indices.clone();
        let global = &server.global_model;
        let spec = SamplerSpec::new(SamplerKind::Smote);
        let set = generate_personalization_data(global, &ds, &idx, &spec, 77).unwrap();

        let (x, y) = batch_of(&ds, &idx, &global.arch).unwrap();
        let z = gcae::encode(global, &x).unwrap().mapv(|v| v as f64);
        let r = resampling::resample(z.view(), &y, &spec, &mut rng::from_seed(77)).unwrap();
        let originals = r.provenance.iter().filter(|p| !p.is_synthetic()).count();
        let synth = r.features.slice(ndarray::s![originals.., ..]).mapv(|v| v as f32);
        let decoded = gcae::decode(global, synth.view()).unwrap();
        let mut expected = x.data.clone();
        expected.extend_from_slice(&decoded.data);

        assert_eq!(set.data.data, expected);
        assert_eq!(set.synthetic_count, r.synthetic_count());
        let counts = class_counts(&set.labels, 3);
        assert!(counts.iter().all(|&c| c == counts[0]));
    }

    #[test]
    fn single_class_client_skips_resampling() {
        let (ds, server, _) = small_setup();
        let idx: Vec<usize> = (0..8).collect();
        let spec = SamplerSpec::new(SamplerKind::Smote);
        let set = generate_personalization_data(&server.global_model, &ds, &idx, &spec, 1).unwrap();
        assert_eq!(set.labels.len(), 8);
        assert_eq!(set.warnings.len(), 1);
    }

    #[test]
    fn personalization_leaves_global_untouched_and_balances() {
        let (ds, server, hyper) = small_setup();
        let global = server.global_model.clone();
        for kind in SamplerKind::ALL {
            let spec = SamplerSpec::new(kind);
            let c = &server.clients[1];
            let out = personalize_client(c, &global, &ds, &spec, &hyper, 2, 11).unwrap();
            assert_eq!(global, server.global_model);
            assert_ne!(out.model, global);
            if kind.is_pure_oversampler() {
                let set = generate_personalization_data(&global, &ds, &c.train_indices, &spec, 3).unwrap();
                let counts = class_counts(&set.labels, 3);
                assert!(counts.iter().all(|&n| n == counts[0]), "{kind}: {counts:?}");
            }
        }
    }

    #[test]
    fn slow_flags_and_selection() {
        let (_, server, hyper) = small_setup();
        let hyper = HyperParams {
            train_slow_rate: 0.5,
            send_slow_rate: 1.0,
            ..hyper
        };
        let s = ServerState::new(server.global_model.clone(), vec![(0, vec![], vec![]), (1, vec![], vec![])], &hyper, 2)
            .unwrap();
        assert_eq!(s.train_slow_clients.len(), 1);
        assert_eq!(s.send_slow_clients, vec![0, 1]);
        assert_eq!(select_clients(5, 1.0, 0, 0), vec![0, 1, 2, 3, 4]);
        let sel = select_clients(10, 0.3, 4, 2);
        assert_eq!(sel.len(), 3);
        assert_eq!(sel, select_clients(10, 0.3, 4, 2));
    }
}
