// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense numerical substrate: row-major matrices, two-layer ReLU MLPs with
//! analytic backpropagation, Adam, and a central-difference gradient checker.
//!
//! Everything here is `f64`. Parameter containers implement [`ParamSet`],
//! which exposes named tensors in a fixed order; gradients are stored in a
//! container of the same type (see [`ParamSet::zeros_like`]) so the optimizer
//! and the gradient checker can walk parameters and gradients side by side.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, shape_err, Error, Result};

// ---------------------------------------------------------------------------
// Vector helpers
// ---------------------------------------------------------------------------

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scaled(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err("cosine operands", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity together with its gradients with respect to both
/// operands.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(shape_err("cosine operands", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    let inv = 1.0 / (na * nb);
    let c = dot(a, b) * inv;
    let da = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| bi * inv - c * ai / (na * na))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| ai * inv - c * bi / (nb * nb))
        .collect();
    Ok((c, da, db))
}

/// Numerically stable `log Σ exp(v)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax with max subtraction.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err("matrix data", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Glorot-uniform initialisation: `U(-s, s)` with `s = sqrt(6/(fan_in+fan_out))`.
    pub fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `W·x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `Wᵀ·y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), &mut out);
            }
        }
        out
    }

    /// `W += scale · a ⊗ b`
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            if ar != 0.0 {
                let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
                axpy(scale * ar, b, row);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter containers
// ---------------------------------------------------------------------------

/// Named, shaped, borrowed view of one parameter tensor.
#[derive(Debug, Clone)]
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// A fixed-order collection of parameter tensors.
///
/// `tensors` and `tensors_mut` must enumerate tensors in the same order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<TensorView<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    /// Container with identical shapes and every entry zero; used for gradients.
    fn zeros_like(&self) -> Self
    where
        Self: Sized;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n: usize = self.tensors_mut().iter().map(|t| t.len()).sum();
        if n != flat.len() {
            return Err(shape_err("flat parameter vector", n, flat.len()));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let len = t.len();
            t.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    /// `self += scale · other` for a container of the same shape.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        let src = other.flatten();
        let mut off = 0;
        for t in self.tensors_mut() {
            let len = t.len();
            axpy(scale, &src[off..off + len], t);
            off += len;
        }
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, views: Vec<TensorView<'a>>) -> Vec<TensorView<'a>> {
    views
        .into_iter()
        .map(|mut v| {
            v.name = format!("{prefix}.{}", v.name);
            v
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Linear layers and MLPs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// `[out × in]`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weight: Matrix::identity(n),
            bias: vec![0.0; n],
        }
    }

    pub fn glorot(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Matrix::glorot(output, input, rng),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.matvec(x);
        for (yi, bi) in y.iter_mut().zip(&self.bias) {
            *yi += bi;
        }
        y
    }
}

/// Multi-layer perceptron: ReLU between layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
}

/// Activations recorded by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

impl Mlp {
    /// Build from a width chain, e.g. `[64, 32, 16]` gives two layers.
    pub fn glorot(widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| LinearLayer::glorot(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| LinearLayer::zeros(w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn new(layers: Vec<LinearLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("an MLP needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(shape_err(
                    "MLP layer chain",
                    w[0].output_dim(),
                    w[1].input_dim(),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Forward pass; returns output and the cache needed by [`Mlp::backward`].
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        check_len("MLP input", x, self.input_dim())?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            inputs.push(h);
            h = if i + 1 < n {
                z.iter().map(|&v| relu(v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
        }
        Ok((h, MlpCache { inputs, pre }))
    }

    /// Forward without recording a cache.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("MLP input", x, self.input_dim())?;
        let n = self.layers.len();
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(&h);
            if i + 1 < n {
                z.iter_mut().for_each(|v| *v = relu(*v));
            }
            h = z;
        }
        Ok(h)
    }

    /// Backward pass for the scalar `y·dy`: accumulates parameter gradients
    /// into `grads` and returns `dx`.
    pub fn backward(&self, cache: &MlpCache, dy: &[f64], grads: &mut Mlp) -> Result<Vec<f64>> {
        let n = self.layers.len();
        if cache.pre.len() != n || cache.inputs.len() != n {
            return Err(Error::Contract(
                "MLP cache does not match network depth".into(),
            ));
        }
        if grads.layers.len() != n {
            return Err(Error::Contract(
                "gradient container does not match network depth".into(),
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if cache.inputs[i].len() != layer.input_dim()
                || cache.pre[i].len() != layer.output_dim()
            {
                return Err(Error::Contract(format!("stale MLP cache at layer {i}")));
            }
        }
        check_len("MLP upstream gradient", dy, self.output_dim())?;

        let mut delta = dy.to_vec();
        for i in (0..n).rev() {
            if i + 1 < n {
                // ReLU subgradient at 0 is 0.
                for (d, &z) in delta.iter_mut().zip(&cache.pre[i]) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let g = &mut grads.layers[i];
            g.weight.add_outer(&delta, &cache.inputs[i], 1.0);
            axpy(1.0, &delta, &mut g.bias);
            delta = self.layers[i].weight.matvec_t(&delta);
        }
        Ok(delta)
    }
}

impl ParamSet for Mlp {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push(TensorView {
                name: format!("{i}.weight"),
                shape: vec![l.weight.rows, l.weight.cols],
                data: &l.weight.data,
            });
            out.push(TensorView {
                name: format!("{i}.bias"),
                shape: vec![l.bias.len()],
                data: &l.bias,
            });
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len());
        for l in self.layers.iter_mut() {
            out.push(&mut l.weight.data);
            out.push(&mut l.bias);
        }
        out
    }

    fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| LinearLayer::zeros(l.input_dim(), l.output_dim()))
            .collect();
        Self { layers }
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam optimizer state over a flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 1e-4;

    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// One bias-corrected Adam update over a flat vector.
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(shape_err("Adam parameters", self.m.len(), params.len()));
        }
        check_len("Adam gradients", grads, params.len())?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// Adam update walking a [`ParamSet`] and its gradient container in lockstep.
    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.flatten();
        if g.len() != self.m.len() {
            return Err(shape_err("Adam gradients", self.m.len(), g.len()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut i = 0;
        for tensor in params.tensors_mut() {
            for p in tensor.iter_mut() {
                let gi = g[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gi;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                i += 1;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor for the relative error, so that entries whose
    /// gradient is essentially zero are judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

/// Where in a parameter set a check value was observed.
#[derive(Debug, Clone, PartialEq)]
pub struct Location {
    pub tensor: String,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub passed: bool,
    pub max_rel_err: f64,
    pub worst: Option<Location>,
    pub per_tensor: Vec<TensorCheck>,
    /// Set when a perturbed loss evaluation was not finite.
    pub non_finite: Option<Location>,
    pub checked: usize,
}

impl CheckReport {
    /// Names of tensors whose maximum relative error exceeds `tol`.
    pub fn failing_tensors(&self, tol: f64) -> Vec<&str> {
        self.per_tensor
            .iter()
            .filter(|t| !(t.max_rel_err <= tol))
            .map(|t| t.name.as_str())
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare analytic gradients against central differences of `loss` for
/// every scalar parameter of `params`.
///
/// `params` is perturbed in place and restored after each evaluation.
pub fn finite_diff_check<P, F>(
    params: &mut P,
    analytic: &P,
    mut loss: F,
    cfg: GradCheckConfig,
) -> CheckReport
where
    P: ParamSet,
    F: FnMut(&P) -> f64,
{
    let names: Vec<String> = params.tensors().into_iter().map(|t| t.name).collect();
    let grads: Vec<Vec<f64>> = analytic
        .tensors()
        .into_iter()
        .map(|t| t.data.to_vec())
        .collect();
    let mut report = CheckReport {
        passed: true,
        max_rel_err: 0.0,
        worst: None,
        per_tensor: Vec::with_capacity(names.len()),
        non_finite: None,
        checked: 0,
    };
    let base = loss(params);
    if !base.is_finite() {
        report.passed = false;
        report.max_rel_err = f64::INFINITY;
        report.non_finite = Some(Location {
            tensor: names.first().cloned().unwrap_or_default(),
            index: 0,
        });
        return report;
    }
    for (ti, name) in names.iter().enumerate() {
        let len = grads[ti].len();
        let mut tmax = 0.0_f64;
        for j in 0..len {
            let orig = params.tensors_mut()[ti][j];
            params.tensors_mut()[ti][j] = orig + cfg.step;
            let fp = loss(params);
            params.tensors_mut()[ti][j] = orig - cfg.step;
            let fm = loss(params);
            params.tensors_mut()[ti][j] = orig;
            report.checked += 1;
            if !fp.is_finite() || !fm.is_finite() {
                report.passed = false;
                report.max_rel_err = f64::INFINITY;
                report.non_finite.get_or_insert(Location {
                    tensor: name.clone(),
                    index: j,
                });
                tmax = f64::INFINITY;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let rel = relative_error(grads[ti][j], numeric, cfg.floor);
            if !(rel <= tmax) {
                tmax = rel;
            }
            if !(rel <= report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst = Some(Location {
                    tensor: name.clone(),
                    index: j,
                });
            }
        }
        report.per_tensor.push(TensorCheck {
            name: name.clone(),
            max_rel_err: tmax,
        });
    }
    report.passed = report.non_finite.is_none() && report.max_rel_err <= cfg.tol;
    report
}

/// Flat-vector variant of [`finite_diff_check`] for ad-hoc losses.
pub fn finite_diff_check_flat<F>(
    params: &[f64],
    analytic: &[f64],
    mut loss: F,
    cfg: GradCheckConfig,
) -> CheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = FlatParams(params.to_vec());
    let a = FlatParams(analytic.to_vec());
    finite_diff_check(&mut p, &a, |q: &FlatParams| loss(&q.0), cfg)
}

/// A single anonymous tensor; handy for tests and flat checks.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams(pub Vec<f64>);

impl ParamSet for FlatParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        vec![TensorView {
            name: "theta".into(),
            shape: vec![self.0.len()],
            data: &self.0,
        }]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.0]
    }

    fn zeros_like(&self) -> Self {
        FlatParams(vec![0.0; self.0.len()])
    }
}

/// Deterministic generator for a `(seed, stream)` pair.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn layer(w: Vec<f64>, rows: usize, cols: usize, b: Vec<f64>) -> LinearLayer {
        LinearLayer {
            weight: Matrix::from_vec(rows, cols, w).unwrap(),
            bias: b,
        }
    }

    #[test]
    fn single_identity_layer_is_identity() {
        let mlp = Mlp::new(vec![LinearLayer::identity(2)]).unwrap();
        let (y, _) = mlp.forward(&[1.0, -2.0]).unwrap();
        assert_eq!(y, vec![1.0, -2.0]);
    }

    #[test]
    fn two_identity_layers_clamp_negatives() {
        let mlp = Mlp::new(vec![LinearLayer::identity(2), LinearLayer::identity(2)]).unwrap();
        let (y, _) = mlp.forward(&[1.0, -2.0]).unwrap();
        assert_eq!(y, vec![1.0, 0.0]);
    }

    #[test]
    fn zero_input_propagates_biases() {
        let mut rng = seeded_rng(0, 0);
        let mut mlp = Mlp::glorot(&[3, 4, 2], &mut rng);
        mlp.layers[0].bias = vec![-0.5, 0.2, 0.3, -0.1];
        mlp.layers[1].bias = vec![0.7, -0.9];
        let (y, _) = mlp.forward(&[0.0; 3]).unwrap();
        let hidden: Vec<f64> = mlp.layers[0].bias.iter().map(|&b| b.max(0.0)).collect();
        let expect = mlp.layers[1].forward(&hidden);
        assert_eq!(y, expect);

        let mut zb = mlp.clone();
        zb.layers[0].bias = vec![0.0; 4];
        let (y0, _) = zb.forward(&[0.0; 3]).unwrap();
        assert_eq!(y0, zb.layers[1].bias);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let mlp = Mlp::new(vec![LinearLayer::identity(2)]).unwrap();
        assert!(matches!(mlp.forward(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_backward() {
        let mlp = Mlp::new(vec![LinearLayer::identity(2)]).unwrap();
        let x = [3.0, -1.5];
        let (_, cache) = mlp.forward(&x).unwrap();
        let mut g = mlp.zeros_like();
        let dx = mlp.backward(&cache, &[1.0, 0.0], &mut g).unwrap();
        assert_eq!(dx, vec![1.0, 0.0]);
        assert_eq!(g.layers[0].weight.data, vec![3.0, -1.5, 0.0, 0.0]);
        assert_eq!(g.layers[0].bias, vec![1.0, 0.0]);
    }

    #[test]
    fn dead_relu_unit_has_zero_first_layer_row() {
        let l1 = layer(vec![1.0, 0.0, 0.0, 1.0], 2, 2, vec![0.0, -10.0]);
        let l2 = layer(vec![1.0, 1.0], 1, 2, vec![0.0]);
        let mlp = Mlp::new(vec![l1, l2]).unwrap();
        let (_, cache) = mlp.forward(&[1.0, 2.0]).unwrap();
        let mut g = mlp.zeros_like();
        mlp.backward(&cache, &[1.0], &mut g).unwrap();
        assert_eq!(&g.layers[0].weight.data[2..4], &[0.0, 0.0]);
        assert_eq!(g.layers[0].bias[1], 0.0);
        assert_ne!(&g.layers[0].weight.data[0..2], &[0.0, 0.0]);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = seeded_rng(1, 0);
        let a = Mlp::glorot(&[3, 4, 2], &mut rng);
        let b = Mlp::glorot(&[5, 4, 2], &mut rng);
        let (_, cache) = b.forward(&[0.1; 5]).unwrap();
        let mut g = a.zeros_like();
        assert!(matches!(
            a.backward(&cache, &[1.0, 1.0], &mut g),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mlp_backward_matches_central_differences() {
        for seed in 0..5 {
            let mut rng = seeded_rng(seed, 7);
            let mut mlp = Mlp::glorot(&[5, 7, 3], &mut rng);
            for l in mlp.layers.iter_mut() {
                l.bias
                    .iter_mut()
                    .for_each(|b| *b = rng.gen_range(-0.3..0.3));
            }
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dy: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, cache) = mlp.forward(&x).unwrap();
            let mut g = mlp.zeros_like();
            let dx = mlp.backward(&cache, &dy, &mut g).unwrap();
            let obj = |m: &Mlp, x: &[f64]| dot(&m.apply(x).unwrap(), &dy);
            let report = finite_diff_check(
                &mut mlp.clone(),
                &g,
                |m| obj(m, &x),
                GradCheckConfig::default(),
            );
            assert!(report.passed, "seed {seed}: {report:?}");
            let xr =
                finite_diff_check_flat(&x, &dx, |xx| obj(&mlp, xx), GradCheckConfig::default());
            assert!(xr.passed, "seed {seed} dx: {xr:?}");
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_sim(&[2.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 1.0], &[1.0, -1.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut st = AdamState::new(1, 1e-4);
        let mut theta = [0.0];
        st.step_flat(&mut theta, &[0.5]).unwrap();
        let expect = -1e-4 * (0.5 / (0.5 + 1e-8));
        assert!((theta[0] - expect).abs() < 1e-18);
        assert!((theta[0] + 9.9999998e-5).abs() < 1e-17);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut st = AdamState::new(3, 1e-4);
        let mut theta = [1.5, -2.0, 0.25];
        for _ in 0..10 {
            st.step_flat(&mut theta, &[0.0; 3]).unwrap();
        }
        assert_eq!(theta, [1.5, -2.0, 0.25]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut st = AdamState::new(2, 1e-3);
            let mut th = FlatParams(vec![0.3, -0.7]);
            for k in 0..20 {
                let g = FlatParams(vec![(k as f64).sin(), (k as f64 * 0.3).cos()]);
                st.step(&mut th, &g).unwrap();
            }
            (th, st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(
            a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(sa, sb);
    }

    #[test]
    fn quadratic_gradcheck() {
        let theta = [1.0, 2.0];
        let cfg = GradCheckConfig {
            tol: 1e-9,
            ..Default::default()
        };
        let r = finite_diff_check_flat(&theta, &[2.0, 4.0], |t| dot(t, t), cfg);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut rng = seeded_rng(3, 0);
        let mut mlp = Mlp::glorot(&[4, 5, 2], &mut rng);
        let x = [0.3, -0.2, 0.9, 0.1];
        let dy = [1.0, -0.5];
        let (_, cache) = mlp.forward(&x).unwrap();
        let mut g = mlp.zeros_like();
        mlp.backward(&cache, &dy, &mut g).unwrap();
        g.layers[1].bias[0] += 0.1;
        let r = finite_diff_check(
            &mut mlp,
            &g,
            |m| dot(&m.apply(&x).unwrap(), &dy),
            GradCheckConfig::default(),
        );
        assert!(!r.passed);
        assert_eq!(r.failing_tensors(1e-4), vec!["1.bias"]);
    }

    #[test]
    fn non_finite_loss_reports_location() {
        let r = finite_diff_check_flat(
            &[1.0, 0.0],
            &[0.0, 0.0],
            |t| if t[1] > 0.0 { f64::NAN } else { 0.0 },
            GradCheckConfig::default(),
        );
        assert!(!r.passed);
        assert_eq!(
            r.non_finite,
            Some(Location {
                tensor: "theta".into(),
                index: 1
            })
        );
    }

    proptest! {
        #[test]
        fn cosine_positive_scale_invariant(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let cb: Vec<f64> = b.iter().map(|v| v * c).collect();
            let lhs = cosine_sim(&a, &cb).unwrap();
            let rhs = cosine_sim(&a, &b).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn relu_grad_zero_where_clamped(x in proptest::collection::vec(-2.0f64..2.0, 3), seed in 0u64..1000) {
            let mut rng = seeded_rng(seed, 1);
            let mlp = Mlp::glorot(&[3, 6, 2], &mut rng);
            let (_, cache) = mlp.forward(&x).unwrap();
            let mut g = mlp.zeros_like();
            mlp.backward(&cache, &[1.0, 1.0], &mut g).unwrap();
            for (r, &z) in cache.pre[0].iter().enumerate() {
                if z <= 0.0 {
                    prop_assert!(g.layers[0].weight.row(r).iter().all(|&v| v == 0.0));
                    prop_assert_eq!(g.layers[0].bias[r], 0.0);
                }
            }
        }

        #[test]
        fn adam_zero_grad_identity(theta in proptest::collection::vec(-10.0f64..10.0, 1..6), steps in 1usize..5) {
            let mut st = AdamState::new(theta.len(), 1e-4);
            let mut p = theta.clone();
            for _ in 0..steps {
                st.step_flat(&mut p, &vec![0.0; theta.len()]).unwrap();
            }
            prop_assert_eq!(p, theta);
        }
    }
}
