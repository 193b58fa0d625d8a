//! Dense linear algebra, activations, the optimizers and the
//! central-difference gradient oracle used to verify every hand-derived
//! backward pass in the crate.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`. Vectors are `n x 1` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `out = self * x + bias`. Unchecked hot path; callers guarantee shapes.
    #[inline]
    pub(crate) fn affine_into(&self, bias: &[f64], x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for ((o, row), b) in out
            .iter_mut()
            .zip(self.data.chunks_exact(self.cols))
            .zip(bias)
        {
            *o = dot(row, x) + b;
        }
    }

    /// `out += self^T * v`.
    #[inline]
    pub(crate) fn t_matvec_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (row, &vi) in self.data.chunks_exact(self.cols).zip(v) {
            if vi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * vi;
            }
        }
    }

    /// `self += a * b^T`.
    #[inline]
    pub(crate) fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (row, &ai) in self.data.chunks_exact_mut(self.cols).zip(a) {
            if ai == 0.0 {
                continue;
            }
            for (g, bj) in row.iter_mut().zip(b) {
                *g += ai * bj;
            }
        }
    }

    pub(crate) fn add_assign(&mut self, other: &[f64]) {
        debug_assert_eq!(other.len(), self.data.len());
        for (a, b) in self.data.iter_mut().zip(other) {
            *a += b;
        }
    }
}

/// Four-lane dot product.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A learnable weight group.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub momentum: Matrix,
    /// Running mean of squared gradients (RMSProp only).
    pub sq_avg: Matrix,
    /// Whether the optimizer updates this tensor in the current training step.
    pub trainable: bool,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            name: name.into(),
            value,
            grad: Matrix::zeros(r, c),
            momentum: Matrix::zeros(r, c),
            sq_avg: Matrix::zeros(r, c),
            trainable: true,
        }
    }
}

/// Weight initialization family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    UniformScaled,
    /// Zero-mean Gaussian with the given standard deviation.
    Gaussian { std: f64 },
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::UniformScaled
    }
}

/// All learnable tensors of a model, addressable by id and by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: ParamTensor) -> ParamId {
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a weight matrix drawn from `init`.
    pub fn add_weight(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: InitScheme,
        rng: &mut RngStream,
    ) -> ParamId {
        let mut m = Matrix::zeros(rows, cols);
        match init {
            InitScheme::UniformScaled => {
                let bound = 1.0 / (cols.max(1) as f64).sqrt();
                for v in m.as_mut_slice() {
                    *v = rng.uniform_range(-bound, bound);
                }
            }
            InitScheme::Gaussian { std } => {
                for v in m.as_mut_slice() {
                    *v = rng.normal(0.0, std);
                }
            }
        }
        self.push(ParamTensor::new(name, m))
    }

    /// Adds a zero-initialized bias column.
    pub fn add_bias(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.push(ParamTensor::new(name, Matrix::zeros(len, 1)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(0.0);
        }
    }

    /// Clears all optimizer state (momentum and squared-gradient averages).
    fn check_grads(&self) -> Result<()> {
        for t in self.tensors.iter().filter(|t| t.trainable) {
            if !t.grad.is_finite() {
                return Err(Error::NonFinite {
                    name: format!("{}.grad", t.name),
                });
            }
        }
        Ok(())
    }

    pub fn reset_momentum(&mut self) {
        for t in &mut self.tensors {
            t.momentum.fill(0.0);
            t.sq_avg.fill(0.0);
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for t in &mut self.tensors {
            t.trainable = trainable;
        }
    }

    /// Adds `scale * buffer` into the stored gradients.
    pub fn accumulate_grads(&mut self, buffer: &GradBuffer, scale: f64) {
        for (t, g) in self.tensors.iter_mut().zip(&buffer.grads) {
            for (a, b) in t.grad.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += scale * b;
            }
        }
    }

    /// Copies the current values (used for best-epoch snapshots).
    pub fn snapshot(&self) -> Vec<Matrix> {
        self.tensors.iter().map(|t| t.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Matrix]) {
        for (t, v) in self.tensors.iter_mut().zip(snapshot) {
            t.value.clone_from(v);
        }
    }

    /// Global L2 norm of trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter(|t| t.trainable)
            .flat_map(|t| t.grad.as_slice())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales trainable gradients so their global norm is at most `max_norm`.
    /// Returns the pre-clipping norm.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for t in self.tensors.iter_mut().filter(|t| t.trainable) {
                t.grad.as_mut_slice().iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    pub(crate) fn debug_assert_finite(&self) {
        if cfg!(debug_assertions) {
            for t in &self.tensors {
                assert!(t.value.is_finite(), "non-finite value in {}", t.name);
            }
        }
    }
}

/// Per-tensor gradient accumulator mirroring a [`ParamStore`] layout.
///
/// Backward passes write here so that many sequences can be reduced into the
/// store through one serialized `accumulate_grads` call.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    grads: Vec<Matrix>,
}

impl GradBuffer {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            grads: store
                .tensors
                .iter()
                .map(|t| Matrix::zeros(t.value.rows(), t.value.cols()))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    /// Mutable access to two distinct tensors at once.
    pub(crate) fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Matrix, &mut Matrix) {
        assert_ne!(a, b, "pair_mut needs distinct tensors");
        if a.0 < b.0 {
            let (lo, hi) = self.grads.split_at_mut(b.0);
            (&mut lo[a.0], &mut hi[0])
        } else {
            let (lo, hi) = self.grads.split_at_mut(a.0);
            (&mut hi[0], &mut lo[b.0])
        }
    }
}

/// Deterministic random stream: identical seed and call sequence yield
/// bit-identical draws.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent sub-stream for a named purpose (init, dropout, shuffling...).
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        if std == 0.0 {
            return mean;
        }
        Normal::new(mean, std)
            .expect("std must be finite and non-negative")
            .sample(&mut self.rng)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}

/// `W x + b` with shape checking.
pub fn affine(w: &Matrix, b: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(Error::shape(
            "affine",
            format!("W is {}x{} but x has length {}", w.rows(), w.cols(), x.len()),
        ));
    }
    if b.len() != w.rows() || b.cols() != 1 {
        return Err(Error::shape(
            "affine",
            format!("W has {} rows but b is {}x{}", w.rows(), b.rows(), b.cols()),
        ));
    }
    let mut out = vec![0.0; w.rows()];
    w.affine_into(b.as_slice(), x, &mut out);
    Ok(out)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

pub fn tanh_act(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Max-shifted softmax over a flat list of scores.
pub fn softmax_flat(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::contract("softmax over an empty score list"));
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(Error::NonFinite {
            name: "softmax scores".into(),
        });
    }
    let mut out = vec![0.0; scores.len()];
    softmax_into(scores, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Vector-Jacobian product of softmax: `dscore_k = p_k (g_k - sum_m p_m g_m)`.
pub(crate) fn softmax_backward(probs: &[f64], grad_probs: &[f64], out: &mut [f64]) {
    let inner: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    for ((o, p), g) in out.iter_mut().zip(probs).zip(grad_probs) {
        *o = p * (g - inner);
    }
}

/// Inverted-dropout mask: zero with probability `p_drop`, else `1/(1-p_drop)`.
/// Passing `rng = None` selects evaluation mode (all ones).
pub fn dropout_mask(len: usize, p_drop: f64, rng: Option<&mut RngStream>) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::contract(format!(
            "dropout probability {p_drop} outside [0, 1)"
        )));
    }
    let Some(rng) = rng else {
        return Ok(vec![1.0; len]);
    };
    if p_drop == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - p_drop);
    Ok((0..len)
        .map(|_| if rng.uniform() < p_drop { 0.0 } else { keep })
        .collect())
}

/// SGD with momentum over every trainable tensor:
/// `m <- momentum * m + grad; value <- value - lr * m`.
///
/// Gradients are validated before anything is mutated.
pub fn sgd_step(params: &mut ParamStore, lr: f64, momentum: f64) -> Result<()> {
    params.check_grads()?;
    for t in params.tensors.iter_mut().filter(|t| t.trainable) {
        for ((v, m), g) in t
            .value
            .as_mut_slice()
            .iter_mut()
            .zip(t.momentum.as_mut_slice())
            .zip(t.grad.as_slice())
        {
            *m = momentum * *m + g;
            *v -= lr * *m;
        }
    }
    params.debug_assert_finite();
    Ok(())
}

/// Added to the squared-gradient average before the square root.
pub const RMS_EPS: f64 = 1e-10;

/// RMSProp with momentum over every trainable tensor:
/// `s <- decay * s + (1 - decay) * grad^2;
/// m <- momentum * m + lr * grad / sqrt(s + eps); value <- value - m`.
pub fn rmsprop_step(params: &mut ParamStore, lr: f64, decay: f64, momentum: f64) -> Result<()> {
    params.check_grads()?;
    for t in params.tensors.iter_mut().filter(|t| t.trainable) {
        let grads = t.grad.as_slice();
        let sq = t.sq_avg.as_mut_slice();
        let mom = t.momentum.as_mut_slice();
        for (i, v) in t.value.as_mut_slice().iter_mut().enumerate() {
            let g = grads[i];
            sq[i] = decay * sq[i] + (1.0 - decay) * g * g;
            mom[i] = momentum * mom[i] + lr * g / (sq[i] + RMS_EPS).sqrt();
            *v -= mom[i];
        }
    }
    params.debug_assert_finite();
    Ok(())
}

/// Options for [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so that coordinates whose
    /// true gradient is (numerically) zero are judged on absolute error.
    pub abs_floor: f64,
    /// Upper bound on probed coordinates per tensor; `None` probes all.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Max relative error per group, where a group is the tensor name with
    /// its last dotted component removed.
    pub fn by_group(&self) -> Vec<(String, f64)> {
        let mut groups: Vec<(String, f64)> = Vec::new();
        for t in &self.tensors {
            let g = match t.name.rfind('.') {
                Some(i) => t.name[..i].to_string(),
                None => t.name.clone(),
            };
            match groups.iter_mut().find(|(n, _)| *n == g) {
                Some((_, e)) => *e = e.max(t.max_rel_err),
                None => groups.push((g, t.max_rel_err)),
            }
        }
        groups
    }
}

pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(abs_floor)
}

/// Compares the gradients stored in `params` against central differences of
/// `loss_fn`. Values are restored exactly after each probe.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &mut ParamStore,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> f64,
{
    if !(opts.eps > 0.0) {
        return Err(Error::contract("finite-difference eps must be positive"));
    }
    let first = loss_fn(params);
    let second = loss_fn(params);
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut rng = RngStream::new(opts.seed);
    let mut tensors = Vec::with_capacity(params.len());
    for ti in 0..params.len() {
        let n = params.tensors[ti].value.len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all.sort_unstable();
                all
            }
            _ => (0..n).collect(),
        };
        let mut check = TensorCheck {
            name: params.tensors[ti].name.clone(),
            coords_checked: coords.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in coords {
            let orig = params.tensors[ti].value.as_slice()[k];
            params.tensors[ti].value.as_mut_slice()[k] = orig + opts.eps;
            let plus = loss_fn(params);
            params.tensors[ti].value.as_mut_slice()[k] = orig - opts.eps;
            let minus = loss_fn(params);
            params.tensors[ti].value.as_mut_slice()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let analytic = params.tensors[ti].grad.as_slice()[k];
            let err = relative_error(analytic, numeric, opts.abs_floor);
            if err > check.max_rel_err || !err.is_finite() {
                check.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                check.worst_index = k;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        tensors.push(check);
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_err < opts.tol,
        max_rel_err,
        tol: opts.tol,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matvec(w: &Matrix, b: &Matrix, x: &[f64]) -> Vec<f64> {
        (0..w.rows())
            .map(|r| {
                let mut s = b.get(r, 0);
                for c in 0..w.cols() {
                    s += w.get(r, c) * x[c];
                }
                s
            })
            .collect()
    }

    #[test]
    fn affine_identity_and_zero_map() {
        let out = affine(&Matrix::identity(2), &Matrix::zeros(2, 1), &[3.0, 4.0]).unwrap();
        assert_eq!(out, vec![3.0, 4.0]);
        let out = affine(&Matrix::zeros(2, 2), &Matrix::column(&[1.0, 1.0]), &[9.0, -7.0]).unwrap();
        assert_eq!(out, vec![1.0, 1.0]);
    }

    #[test]
    fn affine_matches_naive_matvec() {
        let mut rng = RngStream::new(11);
        let mut store = ParamStore::new();
        let w = store.add_weight("w", 3, 2, InitScheme::Gaussian { std: 1.0 }, &mut rng);
        let b = Matrix::column(&[0.3, -0.2, 1.5]);
        let x = [rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)];
        let got = affine(store.value(w), &b, &x).unwrap();
        let want = naive_matvec(store.value(w), &b, &x);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-14);
        }
    }

    #[test]
    fn affine_rejects_bad_shapes() {
        let err = affine(&Matrix::zeros(2, 3), &Matrix::zeros(2, 1), &[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "affine", .. }));
        assert!(affine(&Matrix::zeros(2, 2), &Matrix::zeros(3, 1), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn activations_at_zero() {
        assert_eq!(sigmoid(&[0.0]), vec![0.5]);
        assert_eq!(tanh_act(&[0.0]), vec![0.0]);
        assert_eq!(relu(&[-2.0, 3.0]), vec![0.0, 3.0]);
    }

    #[test]
    fn softmax_cases() {
        let r = softmax_flat(&[0.7; 12]).unwrap();
        for v in &r {
            assert!((v - 1.0 / 12.0).abs() < 1e-15);
        }
        let r = softmax_flat(&[50.0, 0.0, 0.0]).unwrap();
        assert!(r[0] > 1.0 - 1e-9);
        assert!(softmax_flat(&[]).is_err());
    }

    #[test]
    fn softmax_matches_naive_two_pass() {
        let mut rng = RngStream::new(3);
        let scores: Vec<f64> = (0..8).map(|_| rng.normal(0.0, 2.0)).collect();
        let total: f64 = scores.iter().map(|s| s.exp()).sum();
        let naive: Vec<f64> = scores.iter().map(|s| s.exp() / total).collect();
        let got = softmax_flat(&scores).unwrap();
        for (g, n) in got.iter().zip(&naive) {
            assert!((g - n).abs() / n < 1e-12);
        }
    }

    #[test]
    fn dropout_masks() {
        let mut rng = RngStream::new(1);
        assert!(dropout_mask(10, 0.0, Some(&mut rng))
            .unwrap()
            .iter()
            .all(|&v| v == 1.0));
        assert!(dropout_mask(10, 0.5, None).unwrap().iter().all(|&v| v == 1.0));
        let m = dropout_mask(100_000, 0.5, Some(&mut rng)).unwrap();
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        let a = dropout_mask(64, 0.5, Some(&mut RngStream::new(9))).unwrap();
        let b = dropout_mask(64, 0.5, Some(&mut RngStream::new(9))).unwrap();
        assert_eq!(a, b);
        assert!(dropout_mask(4, 1.0, Some(&mut rng)).is_err());
    }

    fn scalar_store(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.push(ParamTensor::new("theta", Matrix::column(&[value])));
        s.get_mut(id).grad = Matrix::column(&[grad]);
        s
    }

    #[test]
    fn sgd_plain_step() {
        let mut s = scalar_store(0.0, 1.0);
        sgd_step(&mut s, 0.1, 0.0).unwrap();
        assert!((s.value(ParamId(0)).get(0, 0) + 0.1).abs() < 1e-15);

        let mut s = scalar_store(2.5, 0.0);
        sgd_step(&mut s, 0.1, 0.0).unwrap();
        assert_eq!(s.value(ParamId(0)).get(0, 0), 2.5);
    }

    #[test]
    fn sgd_momentum_matches_unrolled_recurrence() {
        let (lr, mu) = (0.05, 0.9);
        let (g1, g2) = (0.8, -0.3);
        let mut s = scalar_store(1.0, g1);
        sgd_step(&mut s, lr, mu).unwrap();
        s.get_mut(ParamId(0)).grad = Matrix::column(&[g2]);
        sgd_step(&mut s, lr, mu).unwrap();
        // m1 = g1, v1 = 1 - lr g1; m2 = mu g1 + g2, v2 = v1 - lr m2
        let want = 1.0 - lr * g1 - lr * (mu * g1 + g2);
        assert!((s.value(ParamId(0)).get(0, 0) - want).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut s = scalar_store(1.0, f64::NAN);
        match sgd_step(&mut s, 0.1, 0.9) {
            Err(Error::NonFinite { name }) => assert_eq!(name, "theta.grad"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.value(ParamId(0)).get(0, 0), 1.0);
    }

    #[test]
    fn sgd_skips_frozen_tensors() {
        let mut s = scalar_store(1.0, 1.0);
        s.get_mut(ParamId(0)).trainable = false;
        sgd_step(&mut s, 0.1, 0.9).unwrap();
        assert_eq!(s.value(ParamId(0)).get(0, 0), 1.0);
        assert_eq!(s.get(ParamId(0)).momentum.get(0, 0), 0.0);
    }

    #[test]
    fn rmsprop_matches_unrolled_recurrence() {
        let (lr, rho, mu) = (0.01, 0.95, 0.9);
        let (g1, g2) = (0.8, -0.3);
        let mut s = scalar_store(1.0, g1);
        rmsprop_step(&mut s, lr, rho, mu).unwrap();
        s.get_mut(ParamId(0)).grad = Matrix::column(&[g2]);
        rmsprop_step(&mut s, lr, rho, mu).unwrap();
        let s1 = (1.0 - rho) * g1 * g1;
        let m1 = lr * g1 / (s1 + RMS_EPS).sqrt();
        let s2 = rho * s1 + (1.0 - rho) * g2 * g2;
        let m2 = mu * m1 + lr * g2 / (s2 + RMS_EPS).sqrt();
        assert!((s.value(ParamId(0)).get(0, 0) - (1.0 - m1 - m2)).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_first_step_is_scale_free() {
        // The first step moves by lr / sqrt(1 - rho) whatever the gradient scale.
        for g in [0.1, 1.0, 1e3] {
            let mut s = scalar_store(0.0, g);
            rmsprop_step(&mut s, 0.01, 0.96, 0.0).unwrap();
            assert!((s.value(ParamId(0)).get(0, 0) + 0.05).abs() < 1e-6, "{g}");
        }
        let mut s = scalar_store(1.0, f64::INFINITY);
        assert!(matches!(rmsprop_step(&mut s, 0.1, 0.9, 0.9), Err(Error::NonFinite { .. })));
        s.reset_momentum();
        assert_eq!(s.value(ParamId(0)).get(0, 0), 1.0);
    }

    #[test]
    fn gradcheck_quadratic() {
        let mut s = scalar_store(3.0, 3.0);
        let loss = |p: &ParamStore| 0.5 * p.value(ParamId(0)).get(0, 0).powi(2);
        let rep = finite_diff_check(loss, &mut s, &GradCheckOptions::default()).unwrap();
        assert!(rep.passed);
        assert!(rep.max_rel_err < 1e-9);
        assert_eq!(s.value(ParamId(0)).get(0, 0), 3.0);
    }

    #[test]
    fn gradcheck_catches_corrupted_gradient() {
        let mut s = scalar_store(3.0, 6.0);
        let loss = |p: &ParamStore| 0.5 * p.value(ParamId(0)).get(0, 0).powi(2);
        let rep = finite_diff_check(loss, &mut s, &GradCheckOptions::default()).unwrap();
        assert!(!rep.passed);
    }

    #[test]
    fn gradcheck_rejects_nondeterministic_loss() {
        let mut s = scalar_store(3.0, 3.0);
        let mut calls = 0.0;
        let loss = |_: &ParamStore| {
            calls += 1.0;
            calls
        };
        assert!(matches!(
            finite_diff_check(loss, &mut s, &GradCheckOptions::default()),
            Err(Error::NonDeterministic { .. })
        ));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut s = scalar_store(0.0, 10.0);
        let before = s.clip_grad_norm(5.0);
        assert_eq!(before, 10.0);
        assert!((s.grad_norm() - 5.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_argmax_preserving(
            scores in proptest::collection::vec(-300.0f64..300.0, 1..40)
        ) {
            let r = softmax_flat(&scores).unwrap();
            let sum: f64 = r.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            let am = |v: &[f64]| v.iter().enumerate()
                .fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            prop_assert_eq!(r[am(&r)], r[am(&scores)]);
        }

        #[test]
        fn sigmoid_tanh_ranges(x in -18.0f64..18.0) {
            let s = sigmoid_scalar(x);
            prop_assert!(s > 0.0 && s < 1.0);
            prop_assert!(x.tanh() > -1.0 && x.tanh() < 1.0);
            prop_assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() < 1e-15);
        }

        #[test]
        fn sgd_zero_lr_is_bit_identical(v in -1e3f64..1e3, g in -1e3f64..1e3) {
            let mut s = scalar_store(v, g);
            sgd_step(&mut s, 0.0, 0.9).unwrap();
            prop_assert_eq!(s.value(ParamId(0)).get(0, 0).to_bits(), v.to_bits());
        }
    }
}
