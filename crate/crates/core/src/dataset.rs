//! Datasets, synthetic data, non-IID client partitioning and stratified
//! K-fold splitting.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Number of Dirichlet redraws attempted before partitioning gives up.
pub const PARTITION_RETRIES: usize = 100;

/// Feature matrix with one integer class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Dataset(format!(
                "fewer than 2 classes (num_classes = {num_classes})"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            let dim = features.ncols().max(1);
            return Err(Error::Dataset(format!(
                "non-finite feature at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_counts(&self.labels, self.num_classes)
    }

    /// Rows at `indices`, in that order. The class count is kept even if some
    /// classes end up absent.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Histogram of `labels` over `0..num_classes`.
pub fn class_counts(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

/// Which CSV column holds the class label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

/// Reads a comma-separated file with one header row. Label values may be
/// arbitrary strings; they are numbered in order of first appearance.
pub fn load_csv(path: impl AsRef<Path>, label_column: &LabelColumn) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);

    let headers = reader.headers()?.clone();
    let label_idx = match label_column {
        LabelColumn::Index(i) if *i < headers.len() => *i,
        LabelColumn::Index(i) => {
            return Err(Error::Dataset(format!(
                "label column index {i} out of range ({} columns)",
                headers.len()
            )))
        }
        LabelColumn::Name(name) => headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Dataset(format!("label column {name:?} not found")))?,
    };
    let width = headers.len();
    let dim = width - 1;

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut label_ids: HashMap<String, usize> = HashMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        // Line numbers are 1-based and the header occupies line 1.
        let line = row + 2;
        if record.len() != width {
            return Err(Error::Dataset(format!(
                "ragged row at line {line}: {} fields, expected {width}",
                record.len()
            )));
        }
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                let next = label_ids.len();
                labels.push(*label_ids.entry(cell.trim().to_owned()).or_insert(next));
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Dataset(format!(
                    "non-numeric cell {cell:?} at line {line}, column {:?}",
                    &headers[col]
                ))
            })?;
            values.push(v);
        }
    }
    if label_ids.len() < 2 {
        return Err(Error::Dataset(format!(
            "fewer than 2 classes in {}",
            path.display()
        )));
    }
    let features = Array2::from_shape_vec((labels.len(), dim), values)
        .map_err(|e| Error::Dataset(e.to_string()))?;
    Dataset::new(features, labels, label_ids.len())
}

/// Writes `ds` as CSV: columns `f0..f{d-1}` followed by `label_header`.
/// Values use the shortest representation that parses back exactly.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>, label_header: &str) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    header.push(label_header.to_owned());
    let mut text = header.join(",");
    text.push('\n');
    for (row, &label) in ds.features.rows().into_iter().zip(&ds.labels) {
        for v in row {
            text.push_str(&format!("{v},"));
        }
        text.push_str(&format!("{label}\n"));
    }
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// One Gaussian class blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub count: usize,
    pub center: Vec<f64>,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: Vec<ClassSpec>,
}

impl SyntheticSpec {
    /// Classes whose centers are sampled sinusoids of increasing frequency,
    /// so that rows look like short 1-D signals.
    pub fn waveforms(counts: &[usize], dim: usize, amplitude: f64, scale: f64) -> Self {
        let classes = counts
            .iter()
            .enumerate()
            .map(|(c, &count)| {
                let freq = (c + 1) as f64;
                let phase = c as f64 * PI / 3.0;
                let center = (0..dim)
                    .map(|j| amplitude * (2.0 * PI * freq * j as f64 / dim as f64 + phase).sin())
                    .collect();
                ClassSpec {
                    count,
                    center,
                    scale,
                }
            })
            .collect();
        Self { classes }
    }

    /// Six classes, the last two at a 20:1 minority ratio, 24 features.
    pub fn benchmark() -> Self {
        Self::waveforms(&[200, 200, 200, 200, 10, 10], 24, 1.0, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.classes.first().map_or(0, |c| c.center.len())
    }
}

/// Draws every class's rows from its isotropic Gaussian. Rows are emitted
/// class by class, so labels read `[0; n0] ++ [1; n1] ++ ...`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let dim = spec.dim();
    if dim == 0 {
        return Err(Error::Dataset("synthetic feature dimension must be ≥ 1".into()));
    }
    for (c, class) in spec.classes.iter().enumerate() {
        if class.count == 0 {
            return Err(Error::Dataset(format!("class {c} has zero count")));
        }
        if !(class.scale > 0.0 && class.scale.is_finite()) {
            return Err(Error::Dataset(format!(
                "class {c} has non-positive scale {}",
                class.scale
            )));
        }
        if class.center.len() != dim {
            return Err(Error::Dataset(format!(
                "class {c} center has {} dims, expected {dim}",
                class.center.len()
            )));
        }
    }

    let mut rng = rng::from_seed(seed);
    let total: usize = spec.classes.iter().map(|c| c.count).sum();
    let mut values = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (c, class) in spec.classes.iter().enumerate() {
        let noise = Normal::new(0.0, class.scale).map_err(|e| Error::Dataset(e.to_string()))?;
        for _ in 0..class.count {
            values.extend(class.center.iter().map(|&m| m + noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    let features = Array2::from_shape_vec((total, dim), values).expect("shape computed above");
    Dataset::new(features, labels, spec.classes.len())
}

/// The rows owned by one simulated client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub sample_indices: Vec<usize>,
}

/// Label-skewed split: each class is divided among clients in proportions
/// drawn from a symmetric Dirichlet(`concentration`). The whole draw is
/// repeated until every client holds at least two samples of at least two
/// classes.
pub fn partition_noniid(
    ds: &Dataset,
    n_clients: usize,
    concentration: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if n_clients == 0 {
        return Err(Error::Dataset("n_clients must be ≥ 1".into()));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::Dataset(format!(
            "concentration must be positive, got {concentration}"
        )));
    }
    if n_clients == 1 {
        return Ok(vec![ClientShard {
            client_id: 0,
            sample_indices: (0..ds.len()).collect(),
        }]);
    }

    let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::Dataset(e.to_string()))?;
    let mut by_class = vec![Vec::new(); ds.num_classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }

    let mut rng = rng::from_seed(seed);
    'attempt: for _ in 0..PARTITION_RETRIES {
        let mut buckets = vec![Vec::new(); n_clients];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let draws: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            if !(total > 0.0) {
                continue 'attempt;
            }
            let mut start = 0;
            let mut cumulative = 0.0;
            for (client, draw) in draws.iter().enumerate() {
                cumulative += draw / total;
                let end = if client + 1 == n_clients {
                    members.len()
                } else {
                    ((cumulative * members.len() as f64).round() as usize)
                        .clamp(start, members.len())
                };
                buckets[client].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        let feasible = buckets.iter().all(|b| {
            let mut classes: Vec<usize> = b.iter().map(|&i| ds.labels()[i]).collect();
            classes.sort_unstable();
            classes.dedup();
            b.len() >= 2 && classes.len() >= 2
        });
        if feasible {
            return Ok(buckets
                .into_iter()
                .enumerate()
                .map(|(client_id, mut sample_indices)| {
                    sample_indices.sort_unstable();
                    ClientShard {
                        client_id,
                        sample_indices,
                    }
                })
                .collect());
        }
    }
    Err(Error::Dataset(format!(
        "no partition into {n_clients} clients with ≥2 samples and ≥2 classes each \
         after {PARTITION_RETRIES} Dirichlet draws"
    )))
}

/// Fold membership for every sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    /// Positions (into the labels the plan was built from) of fold `fold`.
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    /// Positions outside fold `fold`.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }

    /// `counts[fold][class]`.
    pub fn fold_class_counts(&self, labels: &[usize]) -> Vec<Vec<usize>> {
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0; num_classes]; self.k];
        for (&fold, &label) in self.assignment.iter().zip(labels) {
            counts[fold][label] += 1;
        }
        counts
    }
}

/// Shuffles each class with the seeded generator and deals its members to
/// folds round-robin. The dealing position carries over from one class to
/// the next, which keeps fold sizes within one of each other as well.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Dataset(format!("k must be ≥ 2, got {k}")));
    }
    if k > labels.len() {
        return Err(Error::Dataset(format!(
            "k = {k} exceeds the sample count {}",
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let mut rng = rng::from_seed(seed);
    let mut assignment = vec![0; labels.len()];
    let mut next_fold = 0;
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            assignment[i] = next_fold;
            next_fold = (next_fold + 1) % k;
        }
    }
    Ok(FoldPlan {
        k,
        assignment,
        seed,
    })
}
