//! Class-rebalancing samplers: SMOTE, Borderline-SMOTE, random
//! oversampling, SVM-SMOTE and the SMOTE-ENN / SMOTE-Tomek hybrids, together
//! with the neighbor search, edited-nearest-neighbor filter, Tomek-link
//! detection and linear SVM they are built from.
//!
//! Every sampler balances all classes up to the majority count. Distances are
//! Euclidean and neighbor ties go to the lower row index, so results are a
//! pure function of the inputs and the generator state.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::class_counts;
use crate::error::{Error, Result};
use crate::par;
use crate::rng::Rng;

/// The six supported techniques.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Smote,
    BorderlineSmote,
    RandomOver,
    SvmSmote,
    SmoteEnn,
    SmoteTomek,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 6] = [
        SamplerKind::Smote,
        SamplerKind::BorderlineSmote,
        SamplerKind::RandomOver,
        SamplerKind::SvmSmote,
        SamplerKind::SmoteEnn,
        SamplerKind::SmoteTomek,
    ];

    /// Canonical configuration name.
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Smote => "smote",
            SamplerKind::BorderlineSmote => "borderline_smote",
            SamplerKind::RandomOver => "random_over",
            SamplerKind::SvmSmote => "svm_smote",
            SamplerKind::SmoteEnn => "smote_enn",
            SamplerKind::SmoteTomek => "smote_tomek",
        }
    }

    /// Stable numeric id, used to key random streams.
    pub fn id(self) -> u64 {
        Self::ALL.iter().position(|&k| k == self).unwrap() as u64
    }

    /// Samplers that only add rows.
    pub fn is_pure_oversampler(self) -> bool {
        !matches!(self, SamplerKind::SmoteEnn | SamplerKind::SmoteTomek)
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!(
                "unknown sampler {s:?}; valid names are {}",
                valid.join(", ")
            ))
        })
    }
}

/// Hyperparameters of the internal linear SVM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmParams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub regularization: f64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 200,
            regularization: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    /// Neighbors considered when interpolating.
    pub k_neighbors: usize,
    /// Neighborhood used for danger detection and the SVM fallback.
    pub m_neighbors: usize,
    pub enn_k: usize,
    pub svm: SvmParams,
}

impl SamplerSpec {
    pub fn new(kind: SamplerKind) -> Self {
        Self {
            kind,
            k_neighbors: 5,
            m_neighbors: 10,
            enn_k: 3,
            svm: SvmParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Resampling(format!("{what} must be ≥ 1")));
        if self.k_neighbors == 0 {
            return bad("k_neighbors");
        }
        if self.m_neighbors == 0 {
            return bad("m_neighbors");
        }
        if self.enn_k == 0 {
            return bad("enn_k");
        }
        if self.svm.epochs == 0 {
            return bad("svm epochs");
        }
        Ok(())
    }
}

/// Where an output row came from. Indices point into the sampler's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Original { source: usize },
    /// Interpolated between `seed` and `neighbor`; a replicated row has
    /// `seed == neighbor`.
    Synthetic { seed: usize, neighbor: usize },
}

impl Provenance {
    pub fn is_synthetic(self) -> bool {
        matches!(self, Provenance::Synthetic { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResampledSet {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub provenance: Vec<Provenance>,
    pub source_counts: Vec<usize>,
    pub result_counts: Vec<usize>,
    pub warnings: Vec<String>,
}

impl ResampledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn synthetic_count(&self) -> usize {
        self.provenance.iter().filter(|p| p.is_synthetic()).count()
    }

    /// Keeps the rows where `keep` is true.
    fn retain(self, keep: &[bool]) -> Self {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep[i]).collect();
        let labels: Vec<usize> = rows.iter().map(|&i| self.labels[i]).collect();
        Self {
            features: self.features.select(Axis(0), &rows),
            result_counts: class_counts(&labels, self.source_counts.len()),
            labels,
            provenance: rows.iter().map(|&i| self.provenance[i]).collect(),
            source_counts: self.source_counts,
            warnings: self.warnings,
        }
    }
}

fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` rows of `points` closest to `query`, ascending by distance with
/// ties broken by lower index. `exclude` removes one row from the candidates.
pub fn knn_of(
    points: ArrayView2<'_, f64>,
    query: ArrayView1<'_, f64>,
    k: usize,
    exclude: Option<usize>,
) -> Result<Vec<usize>> {
    let available = points.nrows() - usize::from(exclude.is_some_and(|e| e < points.nrows()));
    if k == 0 || k > available {
        return Err(Error::Resampling(format!(
            "k = {k} neighbors requested but {available} candidates available"
        )));
    }
    let mut dists: Vec<(f64, usize)> = points
        .rows()
        .into_iter()
        .enumerate()
        .filter(|&(i, _)| Some(i) != exclude)
        .map(|(i, row)| (squared_distance(row, query), i))
        .collect();
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < dists.len() {
        dists.select_nth_unstable_by(k - 1, order);
        dists.truncate(k);
    }
    dists.sort_unstable_by(order);
    Ok(dists.into_iter().map(|(_, i)| i).collect())
}

/// Neighbors of row `query_row` of `points`.
pub fn knn_indices(
    points: ArrayView2<'_, f64>,
    query_row: usize,
    k: usize,
    exclude_self: bool,
) -> Result<Vec<usize>> {
    if query_row >= points.nrows() {
        return Err(Error::Resampling(format!(
            "query row {query_row} out of range ({} rows)",
            points.nrows()
        )));
    }
    knn_of(
        points,
        points.row(query_row),
        k,
        exclude_self.then_some(query_row),
    )
}

/// `k` nearest other rows for every row.
fn knn_table(points: ArrayView2<'_, f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    par::try_map_range(points.nrows(), |i| knn_indices(points, i, k, true))
}

/// Generated rows plus (seed, neighbor) positions within the minority matrix.
struct Interpolated {
    rows: Array2<f64>,
    parents: Vec<(usize, usize)>,
}

/// SMOTE restricted to seed rows: each new row picks a seed uniformly, one of
/// its `k` nearest minority neighbors uniformly, and a uniform λ in [0, 1).
fn interpolate(
    minority: ArrayView2<'_, f64>,
    seeds: &[usize],
    k: usize,
    n_new: usize,
    rng: &mut Rng,
) -> Result<Interpolated> {
    if minority.nrows() < 2 {
        return Err(Error::Resampling(format!(
            "SMOTE needs at least 2 minority rows, got {}",
            minority.nrows()
        )));
    }
    if seeds.is_empty() {
        return Err(Error::Resampling("no seed rows to interpolate from".into()));
    }
    let k = k.clamp(1, minority.nrows() - 1);
    let mut neighbors: Vec<Option<Vec<usize>>> = vec![None; minority.nrows()];
    let computed = par::try_map_range(seeds.len(), |s| knn_indices(minority, seeds[s], k, true))?;
    for (&s, nn) in seeds.iter().zip(computed) {
        neighbors[s] = Some(nn);
    }

    let dim = minority.ncols();
    let mut rows = Array2::zeros((n_new, dim));
    let mut parents = Vec::with_capacity(n_new);
    for mut out in rows.rows_mut() {
        let seed = seeds[rng.random_range(0..seeds.len())];
        let nn = neighbors[seed].as_ref().expect("computed for every seed");
        let neighbor = nn[rng.random_range(0..nn.len())];
        let lambda: f64 = rng.random();
        let p = minority.row(seed);
        let q = minority.row(neighbor);
        for j in 0..dim {
            out[j] = p[j] + lambda * (q[j] - p[j]);
        }
        parents.push((seed, neighbor));
    }
    Ok(Interpolated { rows, parents })
}

/// Classic SMOTE over a single minority class.
pub fn smote(
    minority: ArrayView2<'_, f64>,
    k: usize,
    n_new: usize,
    rng: &mut Rng,
) -> Result<Array2<f64>> {
    let seeds: Vec<usize> = (0..minority.nrows()).collect();
    Ok(interpolate(minority, &seeds, k, n_new, rng)?.rows)
}

/// How to pick seed rows for one class.
enum SeedRule<'a> {
    All,
    Danger { m: usize },
    SvmMargin { m: usize, params: &'a SvmParams },
    Replicate,
}

fn check_inputs(features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Vec<usize>> {
    if features.nrows() != labels.len() {
        return Err(Error::Resampling(format!(
            "{} rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let counts = class_counts(labels, num_classes);
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Resampling(
            "resampling needs at least 2 classes (single class present)".into(),
        ));
    }
    Ok(counts)
}

/// Appends synthetic rows so that every present class reaches the majority
/// count. Classes are processed in ascending order from one generator.
fn oversample(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    k: usize,
    rule: SeedRule<'_>,
    rng: &mut Rng,
) -> Result<ResampledSet> {
    let counts = check_inputs(features, labels)?;
    let majority = *counts.iter().max().unwrap();
    let dim = features.ncols();

    let mut values: Vec<f64> = features.iter().copied().collect();
    let mut out_labels = labels.to_vec();
    let mut provenance: Vec<Provenance> = (0..labels.len())
        .map(|source| Provenance::Original { source })
        .collect();
    let mut warnings = Vec::new();

    for (class, &count) in counts.iter().enumerate() {
        if count == 0 || count == majority {
            continue;
        }
        let n_new = majority - count;
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();

        if count == 1 || matches!(rule, SeedRule::Replicate) {
            if count == 1 && !matches!(rule, SeedRule::Replicate) {
                warnings.push(format!(
                    "class {class} has a single row; replicating instead of interpolating"
                ));
            }
            for _ in 0..n_new {
                let src = members[rng.random_range(0..members.len())];
                values.extend(features.row(src).iter().copied());
                out_labels.push(class);
                provenance.push(Provenance::Synthetic {
                    seed: src,
                    neighbor: src,
                });
            }
            continue;
        }

        let minority = features.select(Axis(0), &members);
        let seeds: Vec<usize> = match rule {
            SeedRule::All | SeedRule::Replicate => (0..count).collect(),
            SeedRule::Danger { m } => {
                let danger: Vec<usize> = danger_rows(features, labels, class, m)?
                    .into_iter()
                    .map(|g| members.binary_search(&g).expect("member of class"))
                    .collect();
                if danger.is_empty() {
                    (0..count).collect()
                } else {
                    danger
                }
            }
            SeedRule::SvmMargin { m, params } => {
                let y: Vec<f64> = labels
                    .iter()
                    .map(|&l| if l == class { 1.0 } else { -1.0 })
                    .collect();
                let svm = fit_linear_svm(features, &y, params)?;
                let margins: Vec<f64> = members
                    .iter()
                    .map(|&g| svm.decision(features.row(g)).abs())
                    .collect();
                svm_seed_rows(&margins, m)
            }
        };
        let generated = interpolate(minority.view(), &seeds, k, n_new, rng)?;
        values.extend(generated.rows.iter().copied());
        for (seed, neighbor) in generated.parents {
            out_labels.push(class);
            provenance.push(Provenance::Synthetic {
                seed: members[seed],
                neighbor: members[neighbor],
            });
        }
    }

    let rows = out_labels.len();
    let result_counts = class_counts(&out_labels, counts.len());
    Ok(ResampledSet {
        features: Array2::from_shape_vec((rows, dim), values).expect("row-major build"),
        labels: out_labels,
        provenance,
        source_counts: counts,
        result_counts,
        warnings,
    })
}

/// Rows of `class` whose `m` nearest neighbors (whole set, self excluded)
/// are at least half but not all of another class. Returned ascending.
fn danger_rows(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    class: usize,
    m: usize,
) -> Result<Vec<usize>> {
    let m = m.min(features.nrows() - 1);
    let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
    let flags = par::try_map_range(members.len(), |s| {
        let nn = knn_indices(features, members[s], m, true)?;
        let other = nn.iter().filter(|&&j| labels[j] != class).count();
        Ok::<_, Error>(2 * other >= m && other < m)
    })?;
    Ok(members
        .into_iter()
        .zip(flags)
        .filter_map(|(i, d)| d.then_some(i))
        .collect())
}

/// Positions with margin |f(x)| ≤ 1, or failing that the `m` smallest
/// margins (ties by position).
fn svm_seed_rows(margins: &[f64], m: usize) -> Vec<usize> {
    let inside: Vec<usize> = (0..margins.len()).filter(|&i| margins[i] <= 1.0).collect();
    if !inside.is_empty() {
        return inside;
    }
    let mut order: Vec<usize> = (0..margins.len()).collect();
    order.sort_by(|&a, &b| margins[a].total_cmp(&margins[b]).then(a.cmp(&b)));
    order.truncate(m.clamp(1, margins.len()));
    order.sort_unstable();
    order
}

/// Pads every non-majority class by drawing its own rows with replacement.
pub fn random_oversample(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    rng: &mut Rng,
) -> Result<ResampledSet> {
    oversample(features, labels, 1, SeedRule::Replicate, rng)
}

/// SMOTE on all rows of every minority class.
pub fn smote_balance(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    spec: &SamplerSpec,
    rng: &mut Rng,
) -> Result<ResampledSet> {
    spec.validate()?;
    oversample(features, labels, spec.k_neighbors, SeedRule::All, rng)
}

/// Borderline-SMOTE-1: seeds are the minority rows in danger.
pub fn borderline_smote(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    spec: &SamplerSpec,
    rng: &mut Rng,
) -> Result<ResampledSet> {
    spec.validate()?;
    let rule = SeedRule::Danger {
        m: spec.m_neighbors,
    };
    oversample(features, labels, spec.k_neighbors, rule, rng)
}

/// SMOTE seeded from minority rows inside the margin of a one-vs-rest linear
/// SVM.
pub fn svm_smote(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    spec: &SamplerSpec,
    rng: &mut Rng,
) -> Result<ResampledSet> {
    spec.validate()?;
    let rule = SeedRule::SvmMargin {
        m: spec.m_neighbors,
        params: &spec.svm,
    };
    oversample(features, labels, spec.k_neighbors, rule, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearSvm {
    pub fn decision(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.weights.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

/// Minimizes `λ/2·|w|² + mean(max(0, 1 − y·(w·x + b)))` by per-sample
/// subgradient steps, visiting rows in index order every epoch. Labels must
/// be ±1.
pub fn fit_linear_svm(
    features: ArrayView2<'_, f64>,
    labels: &[f64],
    params: &SvmParams,
) -> Result<LinearSvm> {
    if features.nrows() != labels.len() {
        return Err(Error::Resampling(format!(
            "{} rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
        return Err(Error::Resampling("SVM labels must be -1 or +1".into()));
    }
    if !labels.contains(&1.0) || !labels.contains(&-1.0) {
        return Err(Error::Resampling(
            "SVM training needs both +1 and -1 labels".into(),
        ));
    }
    let rate = params.learning_rate;
    let lambda = params.regularization;
    let mut w = vec![0.0; features.ncols()];
    let mut b = 0.0;
    for _ in 0..params.epochs {
        for (x, &y) in features.rows().into_iter().zip(labels) {
            let f: f64 = w.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>() + b;
            let violated = y * f < 1.0;
            for (wj, &xj) in w.iter_mut().zip(x.iter()) {
                let mut g = lambda * *wj;
                if violated {
                    g -= y * xj;
                }
                *wj -= rate * g;
            }
            if violated {
                b += rate * y;
            }
        }
    }
    Ok(LinearSvm { weights: w, bias: b })
}

/// Edited nearest neighbors: row `i` is dropped when more than half of its
/// `enn_k` nearest other rows share one class different from `labels[i]`.
pub fn enn_filter(features: ArrayView2<'_, f64>, labels: &[usize], enn_k: usize) -> Result<Vec<bool>> {
    if features.nrows() <= enn_k {
        return Err(Error::Resampling(format!(
            "ENN with k = {enn_k} needs more than {enn_k} rows, got {}",
            features.nrows()
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let table = knn_table(features, enn_k)?;
    Ok(table
        .iter()
        .enumerate()
        .map(|(i, nn)| {
            let votes = class_counts(&nn.iter().map(|&j| labels[j]).collect::<Vec<_>>(), num_classes);
            match votes.iter().position(|&v| 2 * v > enn_k) {
                Some(winner) => winner == labels[i],
                None => true,
            }
        })
        .collect())
}

/// Cross-class pairs `(i, j)`, `i < j`, that are each other's nearest
/// neighbor.
pub fn tomek_links(features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    if features.nrows() < 2 {
        return Err(Error::Resampling("Tomek links need at least 2 rows".into()));
    }
    let nearest: Vec<usize> = knn_table(features, 1)?.into_iter().map(|nn| nn[0]).collect();
    Ok((0..nearest.len())
        .filter_map(|i| {
            let j = nearest[i];
            (i < j && nearest[j] == i && labels[i] != labels[j]).then_some((i, j))
        })
        .collect())
}

/// Applies a cleaning mask, restoring any class it would wipe out.
fn clean(mut set: ResampledSet, mut keep: Vec<bool>, step: &str) -> ResampledSet {
    let num_classes = set.source_counts.len();
    let mut surviving = vec![0usize; num_classes];
    for (i, &k) in keep.iter().enumerate() {
        if k {
            surviving[set.labels[i]] += 1;
        }
    }
    for class in 0..num_classes {
        if set.result_counts[class] > 0 && surviving[class] == 0 {
            set.warnings.push(format!(
                "{step} would remove every row of class {class}; kept its pre-cleaning rows"
            ));
            for (i, k) in keep.iter_mut().enumerate() {
                if set.labels[i] == class {
                    *k = true;
                }
            }
        }
    }
    set.retain(&keep)
}

/// Dispatches on `spec.kind`.
pub fn resample(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    spec: &SamplerSpec,
    rng: &mut Rng,
) -> Result<ResampledSet> {
    spec.validate()?;
    match spec.kind {
        SamplerKind::Smote => smote_balance(features, labels, spec, rng),
        SamplerKind::BorderlineSmote => borderline_smote(features, labels, spec, rng),
        SamplerKind::RandomOver => random_oversample(features, labels, rng),
        SamplerKind::SvmSmote => svm_smote(features, labels, spec, rng),
        SamplerKind::SmoteEnn => {
            let balanced = smote_balance(features, labels, spec, rng)?;
            if balanced.len() <= spec.enn_k {
                let mut balanced = balanced;
                balanced
                    .warnings
                    .push("too few rows for ENN cleaning; step skipped".into());
                return Ok(balanced);
            }
            let keep = enn_filter(balanced.features.view(), &balanced.labels, spec.enn_k)?;
            Ok(clean(balanced, keep, "ENN"))
        }
        SamplerKind::SmoteTomek => {
            let balanced = smote_balance(features, labels, spec, rng)?;
            let links = tomek_links(balanced.features.view(), &balanced.labels)?;
            let mut keep = vec![true; balanced.len()];
            for (i, j) in links {
                let (ci, cj) = (balanced.labels[i], balanced.labels[j]);
                let (ni, nj) = (balanced.source_counts[ci], balanced.source_counts[cj]);
                if ni > nj {
                    keep[i] = false;
                } else if nj > ni {
                    keep[j] = false;
                }
            }
            Ok(clean(balanced, keep, "Tomek-link removal"))
        }
    }
}
