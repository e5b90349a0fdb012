//! Dense `f32` linear algebra with multiply-accumulate instrumentation.
//!
//! Every arithmetic path used at inference time goes through a [`MacCounter`]
//! so that measured MACs can be compared exactly against the analytic cost
//! models in [`crate::cost`]. Training-only kernels (`gemm_*`) are not
//! instrumented.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard below which [`length_normalize`] leaves a vector untouched.
pub const NORM_EPS: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(
                "Matrix::new",
                "rows >= 1 and cols >= 1",
                format!("{rows}x{cols}"),
            ));
        }
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::new", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "equal row lengths", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn row_iter_mut(&mut self) -> impl Iterator<Item = &mut [f32]> {
        self.data.chunks_exact_mut(self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self -= scale * other`, element-wise.
    pub(crate) fn sub_scaled(&mut self, other: &Matrix, scale: f32) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (w, g) in self.data.iter_mut().zip(&other.data) {
            *w -= scale * g;
        }
    }
}

/// Dense activity / input vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f32>);

impl Vector {
    pub fn new(data: Vec<f32>) -> Self {
        Self(data)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

impl Deref for Vector {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f32] {
        &mut self.0
    }
}

impl From<Vec<f32>> for Vector {
    fn from(v: Vec<f32>) -> Self {
        Self(v)
    }
}

impl From<&[f32]> for Vector {
    fn from(v: &[f32]) -> Self {
        Self(v.to_vec())
    }
}

/// Multiply-accumulate tally for one evaluation context.
///
/// `core` covers layer activities, goodness and softmax-head logits.
/// `overhead` covers confidence-gate arithmetic only. Both only grow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacCounter {
    core_macs: u64,
    overhead_macs: u64,
    count_bias: bool,
}

impl Default for MacCounter {
    fn default() -> Self {
        Self::new()
    }
}

impl MacCounter {
    /// Counter that books one MAC per bias addition.
    pub fn new() -> Self {
        Self {
            core_macs: 0,
            overhead_macs: 0,
            count_bias: true,
        }
    }

    /// Counter that ignores bias additions (weights-only convention).
    pub fn without_bias() -> Self {
        Self {
            count_bias: false,
            ..Self::new()
        }
    }

    #[inline]
    pub fn core_macs(&self) -> u64 {
        self.core_macs
    }

    #[inline]
    pub fn overhead_macs(&self) -> u64 {
        self.overhead_macs
    }

    #[inline]
    pub fn counts_bias(&self) -> bool {
        self.count_bias
    }

    #[inline]
    pub fn add_core(&mut self, n: u64) {
        self.core_macs += n;
    }

    #[inline]
    pub fn add_overhead(&mut self, n: u64) {
        self.overhead_macs += n;
    }

    #[inline]
    pub(crate) fn add_bias(&mut self, n: u64) {
        if self.count_bias {
            self.core_macs += n;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let mut s = tail;
    for v in acc {
        s += v;
    }
    s
}

pub(crate) fn l2_norm(x: &[f32]) -> f64 {
    x.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

/// `y = W x`; books `rows * cols` core MACs.
pub fn matvec(w: &Matrix, x: &[f32], counter: &mut MacCounter) -> Result<Vector> {
    if x.len() != w.cols {
        return Err(Error::shape("matvec", format!("input dim {}", w.cols), x.len()));
    }
    let y: Vec<f32> = w.row_iter().map(|row| dot(row, x)).collect();
    counter.add_core((w.rows * w.cols) as u64);
    Ok(Vector(y))
}

/// `Y = X Wᵀ` for a batch of row inputs; books `batch * rows(W) * cols(W)` core MACs.
pub fn matmul_nt(x: &Matrix, w: &Matrix, counter: &mut MacCounter) -> Result<Matrix> {
    if x.cols != w.cols {
        return Err(Error::shape("matmul_nt", format!("input dim {}", w.cols), x.cols));
    }
    let (b, n, m) = (x.rows, x.cols, w.rows);
    let mut out = Matrix::zeros(b, m);
    sgemm(b, n, m, 1.0, &x.data, n, 1, &w.data, 1, n, 0.0, &mut out.data, m, 1);
    counter.add_core((b * m * n) as u64);
    Ok(out)
}

/// Adds `bias` to `y` in place, booking one MAC per element when the counter counts biases.
pub fn add_bias(y: &mut [f32], bias: &[f32], counter: &mut MacCounter) -> Result<()> {
    if y.len() != bias.len() {
        return Err(Error::shape("add_bias", bias.len(), y.len()));
    }
    for (v, b) in y.iter_mut().zip(bias) {
        *v += b;
    }
    counter.add_bias(bias.len() as u64);
    Ok(())
}

pub fn relu(x: &[f32]) -> Vector {
    Vector(x.iter().map(|&v| v.max(0.0)).collect())
}

#[inline]
pub(crate) fn relu_in_place(x: &mut [f32]) {
    for v in x {
        *v = v.max(0.0);
    }
}

/// Scales `x` to unit L2 norm; vectors with norm at or below [`NORM_EPS`] pass through.
pub fn length_normalize(x: &[f32]) -> Vector {
    let mut v = x.to_vec();
    normalize_in_place(&mut v);
    Vector(v)
}

#[inline]
pub(crate) fn normalize_in_place(x: &mut [f32]) {
    scale_to_length(x, 1.0);
}

fn scale_to_length(x: &mut [f32], length: f64) {
    let norm = l2_norm(x);
    if norm > NORM_EPS {
        let s = length / norm;
        for v in x.iter_mut() {
            *v = (f64::from(*v) * s) as f32;
        }
    }
}

/// Length normalization applied to the input of every layer after the first.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Off,
    /// Unit L2 norm.
    #[default]
    Unit,
    /// L2 norm `rms·√d`, i.e. per-feature root mean square `rms`. Keeps deeper
    /// layers' inputs on the same scale as the raw input, so one learning rate
    /// suits every layer.
    Rms(f32),
}

impl Normalization {
    pub fn is_on(self) -> bool {
        self != Self::Off
    }

    /// The policy for the input of layer `l` (0-based): the first layer sees raw input.
    pub fn for_layer(self, l: usize) -> Self {
        if l == 0 {
            Self::Off
        } else {
            self
        }
    }

    pub fn apply(self, x: &mut [f32]) {
        match self {
            Self::Off => {}
            Self::Unit => normalize_in_place(x),
            Self::Rms(r) => scale_to_length(x, f64::from(r) * (x.len() as f64).sqrt()),
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Self::Rms(r) if !(r.is_finite() && r > 0.0) => Err(Error::Config(format!(
                "normalization rms must be positive and finite, got {r}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f32]) -> Vector {
    let mut p = z.to_vec();
    softmax_in_place(&mut p);
    Vector(p)
}

pub(crate) fn softmax_in_place(z: &mut [f32]) {
    if z.is_empty() {
        return;
    }
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    let exps: Vec<f64> = z
        .iter()
        .map(|&v| {
            let e = (f64::from(v) - f64::from(max)).exp();
            sum += e;
            e
        })
        .collect();
    for (p, e) in z.iter_mut().zip(exps) {
        *p = (e / sum) as f32;
    }
}

/// Sum of squared activities; books `dim` core MACs.
pub fn goodness(a: &[f32], counter: &mut MacCounter) -> f32 {
    counter.add_core(a.len() as u64);
    sum_squares(a)
}

#[inline]
pub(crate) fn sum_squares(a: &[f32]) -> f32 {
    a.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() as f32
}

/// Index of the largest element, ties resolved toward the smallest index.
pub fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Strided `C = alpha * A B + beta * C` on f32 slices (A: m×k, B: k×n).
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(m > 0 && k > 0 && n > 0);
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Uninstrumented `X Wᵀ` for training.
pub(crate) fn gemm_nt(x: &Matrix, w: &Matrix) -> Matrix {
    debug_assert_eq!(x.cols, w.cols);
    let mut out = Matrix::zeros(x.rows, w.rows);
    sgemm(
        x.rows,
        x.cols,
        w.rows,
        1.0,
        &x.data,
        x.cols,
        1,
        &w.data,
        1,
        w.cols,
        0.0,
        &mut out.data,
        w.rows,
        1,
    );
    out
}

/// `acc += alpha * Dᵀ X` (D: b×m, X: b×n, acc: m×n). Weight-gradient kernel.
pub(crate) fn gemm_tn_acc(d: &Matrix, x: &Matrix, alpha: f32, acc: &mut Matrix) {
    debug_assert_eq!(d.rows, x.rows);
    debug_assert_eq!((acc.rows, acc.cols), (d.cols, x.cols));
    sgemm(
        d.cols,
        d.rows,
        x.cols,
        alpha,
        &d.data,
        1,
        d.cols,
        &x.data,
        x.cols,
        1,
        1.0,
        &mut acc.data,
        x.cols,
        1,
    );
}

/// `D W` (D: b×m, W: m×n). Error back-projection kernel.
pub(crate) fn gemm_nn(d: &Matrix, w: &Matrix) -> Matrix {
    debug_assert_eq!(d.cols, w.rows);
    let mut out = Matrix::zeros(d.rows, w.cols);
    sgemm(
        d.rows,
        d.cols,
        w.cols,
        1.0,
        &d.data,
        d.cols,
        1,
        &w.data,
        w.cols,
        1,
        0.0,
        &mut out.data,
        w.cols,
        1,
    );
    out
}
