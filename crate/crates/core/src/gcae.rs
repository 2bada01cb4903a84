//! Generative convolutional autoencoder.
//!
//! The encoder is a pyramid of `conv → ReLU → max-pool` stages followed by a
//! dense projection to a linear latent code. The decoder mirrors it: a dense
//! layer back to the last pooled shape, then per stage a nearest-neighbor
//! upsample and a length-preserving convolution (ReLU everywhere except the
//! output layer). An MLP head maps the latent code to class scores.
//!
//! Training minimizes `α·MSE(reconstruction, input) + β·CE(softmax(scores), y)`
//! with hand-written backpropagation and plain SGD. Everything is generic over
//! the float type so the same code runs in `f32` for experiments and `f64`
//! for gradient checking.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{Array2, ArrayView2};
use num_traits::Float;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Float types the network can run in.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
}

impl<T> Real for T where
    T: Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
}

fn cast<T: Real>(v: f64) -> T {
    T::from(v).expect("f64 converts to every Real")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_channels: usize,
    pub input_length: usize,
    pub stages: Vec<ConvStage>,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    /// Weight of the reconstruction term.
    pub recon_weight: f64,
    /// Weight of the prediction term.
    pub pred_weight: f64,
}

impl ArchSpec {
    /// Two stages (8 and 16 channels, kernel 5, pool 2), latent 16, one
    /// hidden layer of 32, unit loss weights.
    pub fn default_for(input_length: usize, num_classes: usize) -> Self {
        Self {
            input_channels: 1,
            input_length,
            stages: vec![
                ConvStage {
                    out_channels: 8,
                    kernel: 5,
                    pool: 2,
                },
                ConvStage {
                    out_channels: 16,
                    kernel: 5,
                    pool: 2,
                },
            ],
            latent_dim: 16,
            hidden: vec![32],
            num_classes,
            recon_weight: 1.0,
            pred_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Model(format!("invalid architecture: {msg}")));
        if self.input_channels == 0 || self.input_length == 0 {
            return fail("input shape must be non-empty".into());
        }
        if self.latent_dim == 0 {
            return fail("latent_dim must be ≥ 1".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes must be ≥ 2".into());
        }
        if self.hidden.contains(&0) {
            return fail("hidden widths must be ≥ 1".into());
        }
        let mut len = self.input_length;
        for (s, st) in self.stages.iter().enumerate() {
            if st.out_channels == 0 || st.kernel == 0 || st.pool == 0 {
                return fail(format!("stage {s} has a zero size"));
            }
            len /= st.pool;
            if len == 0 {
                return fail(format!("stage {s} pools the signal to zero length"));
            }
        }
        let weights_ok = |w: f64| w.is_finite() && w >= 0.0;
        if !weights_ok(self.recon_weight) || !weights_ok(self.pred_weight) {
            return fail("loss weights must be finite and ≥ 0".into());
        }
        if self.recon_weight + self.pred_weight <= 0.0 {
            return fail("loss weights must not both be zero".into());
        }
        Ok(())
    }

    /// Signal lengths before each stage, plus the final pooled length.
    pub fn lengths(&self) -> Vec<usize> {
        let mut out = vec![self.input_length];
        for st in &self.stages {
            out.push(out.last().unwrap() / st.pool);
        }
        out
    }

    /// Channel counts before each stage, plus the final count.
    pub fn channels(&self) -> Vec<usize> {
        let mut out = vec![self.input_channels];
        out.extend(self.stages.iter().map(|s| s.out_channels));
        out
    }

    pub fn input_size(&self) -> usize {
        self.input_channels * self.input_length
    }

    /// Size of the flattened last pooled feature map.
    pub fn flat_size(&self) -> usize {
        self.channels().last().unwrap() * self.lengths().last().unwrap()
    }

    fn mlp_widths(&self) -> Vec<usize> {
        let mut w = vec![self.latent_dim];
        w.extend(&self.hidden);
        w.push(self.num_classes);
        w
    }
}

/// Positions of each parameter tensor in [`ModelState::tensors`].
#[derive(Debug, Clone, Copy)]
struct Layout {
    stages: usize,
}

impl Layout {
    fn new(arch: &ArchSpec) -> Self {
        Self {
            stages: arch.stages.len(),
        }
    }
    fn enc_conv(self, s: usize) -> usize {
        2 * s
    }
    fn enc_fc(self) -> usize {
        2 * self.stages
    }
    fn dec_fc(self) -> usize {
        2 * self.stages + 2
    }
    /// Decoder convolutions are stored last-stage first, in application order.
    fn dec_conv(self, s: usize) -> usize {
        2 * self.stages + 4 + 2 * (self.stages - 1 - s)
    }
    fn mlp(self, layer: usize) -> usize {
        4 * self.stages + 4 + 2 * layer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

/// Named parameter tensors plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub arch: ArchSpec,
    pub tensors: Vec<Tensor<T>>,
}

/// (name, shape, fan-in) for every tensor, in storage order. Biases report a
/// fan-in of zero.
fn tensor_specs(arch: &ArchSpec) -> Vec<(String, Vec<usize>, usize)> {
    let ch = arch.channels();
    let mut specs = Vec::new();
    let mut push_pair = |prefix: String, wshape: Vec<usize>, fan_in: usize| {
        let out = wshape[0];
        specs.push((format!("{prefix}.weight"), wshape, fan_in));
        specs.push((format!("{prefix}.bias"), vec![out], 0));
    };
    for (s, st) in arch.stages.iter().enumerate() {
        push_pair(
            format!("encoder.conv{s}"),
            vec![ch[s + 1], ch[s], st.kernel],
            ch[s] * st.kernel,
        );
    }
    push_pair(
        "encoder.fc".into(),
        vec![arch.latent_dim, arch.flat_size()],
        arch.flat_size(),
    );
    push_pair(
        "decoder.fc".into(),
        vec![arch.flat_size(), arch.latent_dim],
        arch.latent_dim,
    );
    for (s, st) in arch.stages.iter().enumerate().rev() {
        push_pair(
            format!("decoder.conv{s}"),
            vec![ch[s], ch[s + 1], st.kernel],
            ch[s + 1] * st.kernel,
        );
    }
    let widths = arch.mlp_widths();
    for l in 0..widths.len() - 1 {
        push_pair(
            format!("mlp.fc{l}"),
            vec![widths[l + 1], widths[l]],
            widths[l],
        );
    }
    specs
}

impl<T: Real> ModelState<T> {
    /// Every parameter set to zero.
    pub fn zeros(arch: &ArchSpec) -> Result<Self> {
        arch.validate()?;
        let tensors = tensor_specs(arch)
            .into_iter()
            .map(|(name, shape, _)| Tensor {
                values: vec![T::zero(); shape.iter().product()],
                name,
                shape,
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    /// Converts every parameter to another float type.
    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    values: t
                        .values
                        .iter()
                        .map(|v| U::from(*v).expect("float cast"))
                        .collect(),
                })
                .collect(),
        }
    }

    /// Checks names, shapes and finiteness against the architecture.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let specs = tensor_specs(&self.arch);
        if specs.len() != self.tensors.len() {
            return Err(Error::Model(format!(
                "expected {} tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape, _), t) in specs.iter().zip(&self.tensors) {
            if &t.name != name || &t.shape != shape {
                return Err(Error::Model(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    t.name, t.shape
                )));
            }
            if t.values.len() != shape.iter().product::<usize>() {
                return Err(Error::Model(format!("tensor {name} has wrong length")));
            }
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Model(format!("tensor {name} has non-finite values")));
            }
        }
        Ok(())
    }

    fn same_arch(&self, other: &ModelState<T>) -> bool {
        self.arch == other.arch
    }
}

/// Uniform fan-in scaled weights in `±sqrt(3 / fan_in)`; zero biases.
pub fn init_model<T: Real>(arch: &ArchSpec, seed: u64) -> Result<ModelState<T>> {
    arch.validate()?;
    let mut rng = rng::from_seed(seed);
    let tensors = tensor_specs(arch)
        .into_iter()
        .map(|(name, shape, fan_in)| {
            let n: usize = shape.iter().product();
            let values = if fan_in == 0 {
                vec![T::zero(); n]
            } else {
                let bound = (3.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| cast(rng.random_range(-bound..bound)))
                    .collect()
            };
            Tensor {
                name,
                shape,
                values,
            }
        })
        .collect();
    Ok(ModelState {
        arch: arch.clone(),
        tensors,
    })
}

/// Samples laid out as `channels × length` each, sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub channels: usize,
    pub length: usize,
    pub data: Vec<T>,
}

impl<T: Real> Batch<T> {
    pub fn new(channels: usize, length: usize, data: Vec<T>) -> Result<Self> {
        let size = channels * length;
        if size == 0 || !data.len().is_multiple_of(size) {
            return Err(Error::Model(format!(
                "{} values do not form samples of {channels}×{length}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            length,
            data,
        })
    }

    /// Each feature row becomes one sample (channel-major within the row).
    pub fn from_rows(rows: ArrayView2<'_, f64>, channels: usize, length: usize) -> Result<Self> {
        if rows.ncols() != channels * length {
            return Err(Error::Model(format!(
                "rows have {} features, expected {channels}×{length}",
                rows.ncols()
            )));
        }
        Self::new(channels, length, rows.iter().map(|&v| cast(v)).collect())
    }

    pub fn sample_size(&self) -> usize {
        self.channels * self.length
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.sample_size()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let n = self.sample_size();
        &self.data[i * n..(i + 1) * n]
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.sample_size());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Self {
            channels: self.channels,
            length: self.length,
            data,
        }
    }

    /// Feature rows as an `f64` matrix.
    pub fn to_rows(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.sample_size()), |(i, j)| {
            self.data[i * self.sample_size() + j].to_f64().unwrap()
        })
    }
}

// ---------------------------------------------------------------------------
// Layer primitives. Feature maps are channel-major: `x[c * len + t]`.

fn conv_pad(kernel: usize) -> usize {
    (kernel - 1) / 2
}

/// Valid output positions for kernel tap `j`: `t` such that `t + j - pad`
/// falls inside `0..len`.
fn tap_range(j: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(j);
    let hi = (len + pad).saturating_sub(j).min(len);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Real>(
    x: &[T],
    in_ch: usize,
    len: usize,
    w: &[T],
    b: &[T],
    out_ch: usize,
    k: usize,
    out: &mut [T],
) {
    let pad = conv_pad(k);
    for o in 0..out_ch {
        let row = &mut out[o * len..(o + 1) * len];
        row.fill(b[o]);
        for i in 0..in_ch {
            let xi = &x[i * len..(i + 1) * len];
            for j in 0..k {
                let wv = w[(o * in_ch + i) * k + j];
                let (lo, hi) = tap_range(j, pad, len);
                for t in lo..hi {
                    row[t] += wv * xi[t + j - pad];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    x: &[T],
    in_ch: usize,
    len: usize,
    w: &[T],
    out_ch: usize,
    k: usize,
    grad_out: &[T],
    grad_w: &mut [T],
    grad_b: &mut [T],
    mut grad_x: Option<&mut [T]>,
) {
    let pad = conv_pad(k);
    for o in 0..out_ch {
        let g = &grad_out[o * len..(o + 1) * len];
        grad_b[o] += g.iter().copied().sum::<T>();
        for i in 0..in_ch {
            let xi = &x[i * len..(i + 1) * len];
            for j in 0..k {
                let idx = (o * in_ch + i) * k + j;
                let (lo, hi) = tap_range(j, pad, len);
                let mut acc = T::zero();
                for t in lo..hi {
                    acc += g[t] * xi[t + j - pad];
                }
                grad_w[idx] += acc;
                if let Some(gx) = grad_x.as_deref_mut() {
                    let wv = w[idx];
                    let gxi = &mut gx[i * len..(i + 1) * len];
                    for t in lo..hi {
                        gxi[t + j - pad] += wv * g[t];
                    }
                }
            }
        }
    }
}

/// Non-overlapping max-pool; ties keep the first position.
fn pool_forward<T: Real>(x: &[T], ch: usize, len: usize, p: usize, out: &mut [T], arg: &mut [usize]) {
    let out_len = len / p;
    for c in 0..ch {
        for t in 0..out_len {
            let base = c * len + t * p;
            let mut best = base;
            for q in base + 1..base + p {
                if x[q] > x[best] {
                    best = q;
                }
            }
            out[c * out_len + t] = x[best];
            arg[c * out_len + t] = best;
        }
    }
}

fn pool_backward<T: Real>(grad_out: &[T], arg: &[usize], grad_x: &mut [T]) {
    for (g, &a) in grad_out.iter().zip(arg) {
        grad_x[a] += *g;
    }
}

/// Nearest-neighbor upsample from `in_len` to `out_len`; positions past the
/// last full block repeat the last input value.
fn upsample_forward<T: Real>(x: &[T], ch: usize, in_len: usize, p: usize, out_len: usize, out: &mut [T]) {
    for c in 0..ch {
        for t in 0..out_len {
            out[c * out_len + t] = x[c * in_len + (t / p).min(in_len - 1)];
        }
    }
}

fn upsample_backward<T: Real>(
    grad_out: &[T],
    ch: usize,
    in_len: usize,
    p: usize,
    out_len: usize,
    grad_x: &mut [T],
) {
    for c in 0..ch {
        for t in 0..out_len {
            grad_x[c * in_len + (t / p).min(in_len - 1)] += grad_out[c * out_len + t];
        }
    }
}

fn dense_forward<T: Real>(x: &[T], w: &[T], b: &[T], out: &mut [T]) {
    let n_in = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        *y = b[o] + row.iter().zip(x).map(|(a, b)| *a * *b).sum::<T>();
    }
}

fn dense_backward<T: Real>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    grad_w: &mut [T],
    grad_b: &mut [T],
    mut grad_x: Option<&mut [T]>,
) {
    let n_in = x.len();
    for (o, &g) in grad_out.iter().enumerate() {
        grad_b[o] += g;
        let gw = &mut grad_w[o * n_in..(o + 1) * n_in];
        for (gwi, &xi) in gw.iter_mut().zip(x) {
            *gwi += g * xi;
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            let row = &w[o * n_in..(o + 1) * n_in];
            for (gxi, &wi) in gx.iter_mut().zip(row) {
                *gxi += g * wi;
            }
        }
    }
}

fn relu_in_place<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `grad` where the pre-activation was not positive.
fn relu_mask<T: Real>(grad: &mut [T], pre: &[T]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Numerically stable softmax of one score row.
pub fn softmax<T: Real>(scores: &[T]) -> Vec<T> {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

// ---------------------------------------------------------------------------
// Per-sample forward pass with the intermediates backprop needs.

#[derive(Default)]
struct Trace<T> {
    enc_in: Vec<Vec<T>>,
    enc_pre: Vec<Vec<T>>,
    enc_arg: Vec<Vec<usize>>,
    flat: Vec<T>,
    latent: Vec<T>,
    dec_fc_pre: Vec<T>,
    dec_fc_out: Vec<T>,
    /// Indexed by stage: upsampled input of that stage's decoder conv.
    dec_in: Vec<Vec<T>>,
    dec_pre: Vec<Vec<T>>,
    recon: Vec<T>,
    mlp_in: Vec<Vec<T>>,
    mlp_pre: Vec<Vec<T>>,
    scores: Vec<T>,
}

fn encode_sample<T: Real>(m: &ModelState<T>, x: &[T], tr: &mut Trace<T>) {
    let arch = &m.arch;
    let lay = Layout::new(arch);
    let ch = arch.channels();
    let lens = arch.lengths();
    let mut cur = x.to_vec();
    tr.enc_in.clear();
    tr.enc_pre.clear();
    tr.enc_arg.clear();
    for (s, st) in arch.stages.iter().enumerate() {
        let w = &m.tensors[lay.enc_conv(s)].values;
        let b = &m.tensors[lay.enc_conv(s) + 1].values;
        let mut pre = vec![T::zero(); ch[s + 1] * lens[s]];
        conv_forward(&cur, ch[s], lens[s], w, b, ch[s + 1], st.kernel, &mut pre);
        let mut act = pre.clone();
        relu_in_place(&mut act);
        let mut pooled = vec![T::zero(); ch[s + 1] * lens[s + 1]];
        let mut arg = vec![0; pooled.len()];
        pool_forward(&act, ch[s + 1], lens[s], st.pool, &mut pooled, &mut arg);
        tr.enc_in.push(std::mem::replace(&mut cur, pooled));
        tr.enc_pre.push(pre);
        tr.enc_arg.push(arg);
    }
    let mut z = vec![T::zero(); arch.latent_dim];
    dense_forward(
        &cur,
        &m.tensors[lay.enc_fc()].values,
        &m.tensors[lay.enc_fc() + 1].values,
        &mut z,
    );
    tr.flat = cur;
    tr.latent = z;
}

fn decode_sample<T: Real>(m: &ModelState<T>, z: &[T], tr: &mut Trace<T>) {
    let arch = &m.arch;
    let lay = Layout::new(arch);
    let ch = arch.channels();
    let lens = arch.lengths();
    let n_stages = arch.stages.len();
    let mut pre = vec![T::zero(); arch.flat_size()];
    dense_forward(
        z,
        &m.tensors[lay.dec_fc()].values,
        &m.tensors[lay.dec_fc() + 1].values,
        &mut pre,
    );
    let mut cur = pre.clone();
    relu_in_place(&mut cur);
    tr.dec_fc_pre = pre;
    tr.dec_fc_out = cur.clone();
    tr.dec_in = vec![Vec::new(); n_stages];
    tr.dec_pre = vec![Vec::new(); n_stages];
    for s in (0..n_stages).rev() {
        let st = &arch.stages[s];
        let mut up = vec![T::zero(); ch[s + 1] * lens[s]];
        upsample_forward(&cur, ch[s + 1], lens[s + 1], st.pool, lens[s], &mut up);
        let mut out = vec![T::zero(); ch[s] * lens[s]];
        conv_forward(
            &up,
            ch[s + 1],
            lens[s],
            &m.tensors[lay.dec_conv(s)].values,
            &m.tensors[lay.dec_conv(s) + 1].values,
            ch[s],
            st.kernel,
            &mut out,
        );
        tr.dec_in[s] = up;
        tr.dec_pre[s] = out.clone();
        if s > 0 {
            relu_in_place(&mut out);
        }
        cur = out;
    }
    tr.recon = cur;
}

fn classify_sample<T: Real>(m: &ModelState<T>, z: &[T], tr: &mut Trace<T>) {
    let lay = Layout::new(&m.arch);
    let widths = m.arch.mlp_widths();
    let layers = widths.len() - 1;
    let mut cur = z.to_vec();
    tr.mlp_in.clear();
    tr.mlp_pre.clear();
    for l in 0..layers {
        let mut pre = vec![T::zero(); widths[l + 1]];
        dense_forward(
            &cur,
            &m.tensors[lay.mlp(l)].values,
            &m.tensors[lay.mlp(l) + 1].values,
            &mut pre,
        );
        let mut act = pre.clone();
        if l + 1 < layers {
            relu_in_place(&mut act);
        }
        tr.mlp_in.push(std::mem::replace(&mut cur, act));
        tr.mlp_pre.push(pre);
    }
    tr.scores = cur;
}

fn forward_sample<T: Real>(m: &ModelState<T>, x: &[T], tr: &mut Trace<T>) {
    encode_sample(m, x, tr);
    let z = tr.latent.clone();
    decode_sample(m, &z, tr);
    classify_sample(m, &z, tr);
}

/// Which parameters a training step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    #[default]
    Full,
    /// Only the MLP classifier.
    HeadOnly,
}

/// Accumulates the gradient of one sample's loss into `grads`.
fn backward_sample<T: Real>(
    m: &ModelState<T>,
    tr: &Trace<T>,
    grad_recon: &[T],
    grad_scores: &[T],
    scope: TrainScope,
    grads: &mut [Vec<T>],
) {
    let arch = &m.arch;
    let lay = Layout::new(arch);
    let ch = arch.channels();
    let lens = arch.lengths();
    let n_stages = arch.stages.len();
    let layers = arch.mlp_widths().len() - 1;

    // MLP head.
    let mut g = grad_scores.to_vec();
    let mut grad_latent = vec![T::zero(); arch.latent_dim];
    for l in (0..layers).rev() {
        if l + 1 < layers {
            relu_mask(&mut g, &tr.mlp_pre[l]);
        }
        let (gw, gb) = pair_mut(grads, lay.mlp(l));
        let mut gx = vec![T::zero(); tr.mlp_in[l].len()];
        dense_backward(&tr.mlp_in[l], &m.tensors[lay.mlp(l)].values, &g, gw, gb, Some(&mut gx));
        g = gx;
    }
    if scope == TrainScope::HeadOnly {
        return;
    }
    for (a, b) in grad_latent.iter_mut().zip(&g) {
        *a += *b;
    }

    // Decoder, undone from the output layer (stage 0) upwards.
    let mut g = grad_recon.to_vec();
    for s in 0..n_stages {
        let st = &arch.stages[s];
        if s > 0 {
            relu_mask(&mut g, &tr.dec_pre[s]);
        }
        let mut g_up = vec![T::zero(); ch[s + 1] * lens[s]];
        let (gw, gb) = pair_mut(grads, lay.dec_conv(s));
        conv_backward(
            &tr.dec_in[s],
            ch[s + 1],
            lens[s],
            &m.tensors[lay.dec_conv(s)].values,
            ch[s],
            st.kernel,
            &g,
            gw,
            gb,
            Some(&mut g_up),
        );
        let mut g_in = vec![T::zero(); ch[s + 1] * lens[s + 1]];
        upsample_backward(&g_up, ch[s + 1], lens[s + 1], st.pool, lens[s], &mut g_in);
        g = g_in;
    }
    relu_mask(&mut g, &tr.dec_fc_pre);
    let mut gz = vec![T::zero(); arch.latent_dim];
    let (gw, gb) = pair_mut(grads, lay.dec_fc());
    dense_backward(&tr.latent, &m.tensors[lay.dec_fc()].values, &g, gw, gb, Some(&mut gz));
    for (a, b) in grad_latent.iter_mut().zip(&gz) {
        *a += *b;
    }

    // Encoder.
    let mut g = vec![T::zero(); tr.flat.len()];
    let (gw, gb) = pair_mut(grads, lay.enc_fc());
    dense_backward(&tr.flat, &m.tensors[lay.enc_fc()].values, &grad_latent, gw, gb, Some(&mut g));
    for s in (0..n_stages).rev() {
        let st = &arch.stages[s];
        let mut g_act = vec![T::zero(); ch[s + 1] * lens[s]];
        pool_backward(&g, &tr.enc_arg[s], &mut g_act);
        relu_mask(&mut g_act, &tr.enc_pre[s]);
        let mut g_in = vec![T::zero(); if s > 0 { ch[s] * lens[s] } else { 0 }];
        let (gw, gb) = pair_mut(grads, lay.enc_conv(s));
        conv_backward(
            &tr.enc_in[s],
            ch[s],
            lens[s],
            &m.tensors[lay.enc_conv(s)].values,
            ch[s + 1],
            st.kernel,
            &g_act,
            gw,
            gb,
            (s > 0).then_some(g_in.as_mut_slice()),
        );
        g = g_in;
    }
}

/// Mutable weight and bias gradient buffers at `idx` and `idx + 1`.
fn pair_mut<T>(grads: &mut [Vec<T>], idx: usize) -> (&mut [T], &mut [T]) {
    let (a, b) = grads[idx..].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

// ---------------------------------------------------------------------------
// Public operations.

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub reconstruction: Batch<T>,
    /// `n × num_classes`.
    pub scores: Array2<T>,
    /// `n × latent_dim`.
    pub latent: Array2<T>,
}

fn check_batch<T: Real>(m: &ModelState<T>, batch: &Batch<T>) -> Result<()> {
    if batch.channels != m.arch.input_channels || batch.length != m.arch.input_length {
        return Err(Error::Model(format!(
            "batch shape {}×{} does not match model input {}×{}",
            batch.channels, batch.length, m.arch.input_channels, m.arch.input_length
        )));
    }
    Ok(())
}

pub fn forward<T: Real>(m: &ModelState<T>, batch: &Batch<T>) -> Result<ForwardOutput<T>> {
    check_batch(m, batch)?;
    let n = batch.len();
    let mut recon = Vec::with_capacity(batch.data.len());
    let mut scores = Vec::with_capacity(n * m.arch.num_classes);
    let mut latent = Vec::with_capacity(n * m.arch.latent_dim);
    let mut tr = Trace::default();
    for i in 0..n {
        forward_sample(m, batch.sample(i), &mut tr);
        recon.extend_from_slice(&tr.recon);
        scores.extend_from_slice(&tr.scores);
        latent.extend_from_slice(&tr.latent);
    }
    Ok(ForwardOutput {
        reconstruction: Batch::new(batch.channels, batch.length, recon)?,
        scores: Array2::from_shape_vec((n, m.arch.num_classes), scores).expect("shape"),
        latent: Array2::from_shape_vec((n, m.arch.latent_dim), latent).expect("shape"),
    })
}

/// Encoder half of [`forward`].
pub fn encode<T: Real>(m: &ModelState<T>, batch: &Batch<T>) -> Result<Array2<T>> {
    check_batch(m, batch)?;
    let mut out = Vec::with_capacity(batch.len() * m.arch.latent_dim);
    let mut tr = Trace::default();
    for i in 0..batch.len() {
        encode_sample(m, batch.sample(i), &mut tr);
        out.extend_from_slice(&tr.latent);
    }
    Ok(Array2::from_shape_vec((batch.len(), m.arch.latent_dim), out).expect("shape"))
}

/// Decoder half of [`forward`].
pub fn decode<T: Real>(m: &ModelState<T>, latents: ArrayView2<'_, T>) -> Result<Batch<T>> {
    if latents.ncols() != m.arch.latent_dim {
        return Err(Error::Model(format!(
            "latent width {} does not match latent_dim {}",
            latents.ncols(),
            m.arch.latent_dim
        )));
    }
    let mut out = Vec::with_capacity(latents.nrows() * m.arch.input_size());
    let mut tr = Trace::default();
    for z in latents.rows() {
        let z: Vec<T> = z.to_vec();
        decode_sample(m, &z, &mut tr);
        out.extend_from_slice(&tr.recon);
    }
    Batch::new(m.arch.input_channels, m.arch.input_length, out)
}

/// Softmax class probabilities as `f64`.
pub fn predict_proba<T: Real>(m: &ModelState<T>, batch: &Batch<T>) -> Result<Array2<f64>> {
    check_batch(m, batch)?;
    let c = m.arch.num_classes;
    let mut out = Array2::zeros((batch.len(), c));
    let mut tr = Trace::default();
    for i in 0..batch.len() {
        encode_sample(m, batch.sample(i), &mut tr);
        let z = tr.latent.clone();
        classify_sample(m, &z, &mut tr);
        for (j, p) in softmax(&tr.scores).into_iter().enumerate() {
            out[[i, j]] = p.to_f64().unwrap();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub value: T,
    pub grad_reconstruction: Vec<T>,
    pub grad_scores: Vec<T>,
}

/// Loss of one sample and its gradients, with the batch-mean scaling applied.
fn sample_loss<T: Real>(
    recon: &[T],
    input: &[T],
    scores: &[T],
    label: usize,
    alpha: T,
    beta: T,
    batch_len: usize,
) -> (T, Vec<T>, Vec<T>) {
    let n = cast::<T>(batch_len as f64);
    let denom = n * cast(input.len() as f64);
    let two = cast::<T>(2.0);
    let mut mse = T::zero();
    let grad_r: Vec<T> = recon
        .iter()
        .zip(input)
        .map(|(&r, &x)| {
            let d = r - x;
            mse += d * d;
            alpha * two * d / denom
        })
        .collect();
    let probs = softmax(scores);
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + scores.iter().map(|&s| (s - max).exp()).sum::<T>().ln();
    let ce = lse - scores[label];
    let grad_s: Vec<T> = probs
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let target = if j == label { T::one() } else { T::zero() };
            beta * (p - target) / n
        })
        .collect();
    (alpha * mse / denom + beta * ce / n, grad_r, grad_s)
}

/// `α·mean((r − x)²) + β·mean(−log softmax(s)[y])` over the batch, with
/// gradients for the reconstruction and score outputs.
pub fn loss<T: Real>(
    reconstruction: &Batch<T>,
    input: &Batch<T>,
    scores: ArrayView2<'_, T>,
    labels: &[usize],
    alpha: T,
    beta: T,
) -> Result<LossOutput<T>> {
    let n = input.len();
    if reconstruction.data.len() != input.data.len() || scores.nrows() != n || labels.len() != n {
        return Err(Error::Model("loss inputs have inconsistent shapes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= scores.ncols()) {
        return Err(Error::Model(format!("label {bad} has no score column")));
    }
    let mut value = T::zero();
    let mut grad_reconstruction = Vec::with_capacity(input.data.len());
    let mut grad_scores = Vec::with_capacity(scores.len());
    for i in 0..n {
        let s: Vec<T> = scores.row(i).to_vec();
        let (v, gr, gs) = sample_loss(
            reconstruction.sample(i),
            input.sample(i),
            &s,
            labels[i],
            alpha,
            beta,
            n,
        );
        value += v;
        grad_reconstruction.extend(gr);
        grad_scores.extend(gs);
    }
    Ok(LossOutput {
        value,
        grad_reconstruction,
        grad_scores,
    })
}

fn check_labels<T: Real>(m: &ModelState<T>, batch: &Batch<T>, labels: &[usize]) -> Result<()> {
    check_batch(m, batch)?;
    if batch.is_empty() {
        return Err(Error::Model("empty batch".into()));
    }
    if labels.len() != batch.len() {
        return Err(Error::Model(format!(
            "{} labels for {} samples",
            labels.len(),
            batch.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= m.arch.num_classes) {
        return Err(Error::Model(format!("label {bad} out of range")));
    }
    Ok(())
}

/// Batch loss and the gradient of every parameter (zeros outside `scope`).
pub fn gradients<T: Real>(
    m: &ModelState<T>,
    batch: &Batch<T>,
    labels: &[usize],
    scope: TrainScope,
) -> Result<(T, Vec<Vec<T>>)> {
    check_labels(m, batch, labels)?;
    let alpha = cast::<T>(m.arch.recon_weight);
    let beta = cast::<T>(m.arch.pred_weight);
    let mut grads: Vec<Vec<T>> = m.tensors.iter().map(|t| vec![T::zero(); t.values.len()]).collect();
    let mut total = T::zero();
    let mut tr = Trace::default();
    for i in 0..batch.len() {
        let x = batch.sample(i);
        forward_sample(m, x, &mut tr);
        let (v, gr, gs) = sample_loss(&tr.recon, x, &tr.scores, labels[i], alpha, beta, batch.len());
        total += v;
        backward_sample(m, &tr, &gr, &gs, scope, &mut grads);
    }
    Ok((total, grads))
}

/// Batch loss without gradients.
pub fn loss_value<T: Real>(m: &ModelState<T>, batch: &Batch<T>, labels: &[usize]) -> Result<T> {
    check_labels(m, batch, labels)?;
    let alpha = cast::<T>(m.arch.recon_weight);
    let beta = cast::<T>(m.arch.pred_weight);
    let mut total = T::zero();
    let mut tr = Trace::default();
    for i in 0..batch.len() {
        let x = batch.sample(i);
        forward_sample(m, x, &mut tr);
        total += sample_loss(&tr.recon, x, &tr.scores, labels[i], alpha, beta, batch.len()).0;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<T> {
    pub model: ModelState<T>,
    /// Loss of the batch before the update.
    pub loss: T,
}

/// One plain SGD step on the batch.
pub fn train_step<T: Real>(
    m: &ModelState<T>,
    batch: &Batch<T>,
    labels: &[usize],
    learning_rate: T,
    scope: TrainScope,
) -> Result<StepOutcome<T>> {
    let (loss, grads) = gradients(m, batch, labels, scope)?;
    if !loss.is_finite() {
        return Err(Error::Model(format!(
            "non-finite loss {loss:?} on a batch of {} samples",
            batch.len()
        )));
    }
    let mut model = m.clone();
    for (t, g) in model.tensors.iter_mut().zip(&grads) {
        for (v, &d) in t.values.iter_mut().zip(g) {
            *v -= learning_rate * d;
        }
    }
    if let Some(t) = model.tensors.iter().find(|t| t.values.iter().any(|v| !v.is_finite())) {
        return Err(Error::Model(format!(
            "update produced non-finite values in {}",
            t.name
        )));
    }
    Ok(StepOutcome { model, loss })
}

/// Comparison of one analytic and one finite-difference derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct GradProbe {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<GradProbe>,
    pub max_relative_error: f64,
}

/// Derivatives smaller than this in magnitude are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares backprop against central differences on at least 50 parameters,
/// drawn from every tensor. The relative error is
/// `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check(
    m: &ModelState<f64>,
    batch: &Batch<f64>,
    labels: &[usize],
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::Model(format!("epsilon must be positive, got {epsilon}")));
    }
    let (_, grads) = gradients(m, batch, labels, TrainScope::Full)?;
    let per_tensor = 50usize.div_ceil(m.tensors.len()).max(3);
    let mut rng = rng::from_seed(seed);
    let mut probes = Vec::new();
    let mut work = m.clone();
    for (ti, t) in m.tensors.iter().enumerate() {
        let picks: Vec<usize> = if t.values.len() <= per_tensor {
            (0..t.values.len()).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..t.values.len())).collect()
        };
        for idx in picks {
            let orig = t.values[idx];
            work.tensors[ti].values[idx] = orig + epsilon;
            let up = loss_value(&work, batch, labels)?;
            work.tensors[ti].values[idx] = orig - epsilon;
            let down = loss_value(&work, batch, labels)?;
            work.tensors[ti].values[idx] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let analytic = grads[ti][idx];
            let scale = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            probes.push(GradProbe {
                tensor: t.name.clone(),
                index: idx,
                analytic,
                numeric,
                relative_error: (analytic - numeric).abs() / scale,
            });
        }
    }
    let max_relative_error = probes.iter().map(|p| p.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        probes,
        max_relative_error,
    })
}

/// Whether two models have the same architecture.
pub fn compatible<T: Real>(a: &ModelState<T>, b: &ModelState<T>) -> bool {
    a.same_arch(b)
}
