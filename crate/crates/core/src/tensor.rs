//! Dense row-major tensors and the raw numeric kernels behind the autodiff tape.

use std::fmt;

use num_traits::Float;

use crate::error::TensorError;

/// Element type of a [`Tensor`].
///
/// Training runs in `f32`; gradient verification runs in `f64`.
pub trait Scalar: Float + Default + Send + Sync + fmt::Debug + fmt::Display + 'static {
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major array. `shape.iter().product() == data.len()` always holds.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::Dimension(format!(
                "shape {shape:?} has a zero dimension"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Dimension(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Returns the tensor back if every element is finite.
    pub fn finite(self, op: &'static str) -> Result<Self, TensorError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(TensorError::NonFinite(op))
        }
    }

    /// Left-to-right sum over the flat index.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub(crate) fn matrix_dims(&self, what: &str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(TensorError::Dimension(format!(
                "{what}: expected a matrix, got shape {s:?}"
            ))),
        }
    }
}

/// `a[m×k] · b[k×n]`. For every output element the products are summed in
/// increasing `k` starting from zero, so the result is bit-identical to the
/// naive triple loop in the same precision.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (m, k) = a.matrix_dims("matmul lhs")?;
    let (k2, n) = b.matrix_dims("matmul rhs")?;
    if k != k2 {
        return Err(TensorError::Dimension(format!(
            "matmul inner dimensions differ: {m}×{k} · {k2}×{n}"
        )));
    }
    let mut out = vec![T::zero(); m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Accumulates `a[m×k] · b[k×n]` into `out` in i-k-j order.
pub(crate) fn matmul_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `aᵀ · b` for `a[k×m]`, `b[k×n]`, accumulated into `out[m×n]`.
pub(crate) fn matmul_at_b_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    k: usize,
    m: usize,
    n: usize,
) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`, accumulated into `out[m×n]`.
pub(crate) fn matmul_a_bt_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    // transpose first so the inner loop runs over contiguous output columns
    let mut bt = vec![T::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul_into(a, &bt, out, m, k, n);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

/// Right-hand side of [`elementwise`]: a same-shape tensor or a scalar.
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

pub fn elementwise<T: Scalar>(
    kind: Elementwise,
    a: &Tensor<T>,
    b: Operand<'_, T>,
) -> Result<Tensor<T>, TensorError> {
    let f = |x: T, y: T| match kind {
        Elementwise::Add => x + y,
        Elementwise::Sub => x - y,
        Elementwise::Mul => x * y,
    };
    let data = match b {
        Operand::Tensor(b) => {
            if a.shape != b.shape {
                return Err(TensorError::Dimension(format!(
                    "{kind:?}: shapes {:?} and {:?} differ",
                    a.shape, b.shape
                )));
            }
            a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
        }
        Operand::Scalar(s) => a.data.iter().map(|&x| f(x, s)).collect(),
    };
    Tensor::new(a.shape.clone(), data)?.finite("elementwise")
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Result<Tensor<T>, TensorError> {
    elementwise(Elementwise::Mul, a, Operand::Scalar(s))
}

/// Softmax over the last axis with max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.last_dim();
    let mut out = x.data.clone();
    for row in out.chunks_mut(d) {
        softmax_row(row);
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row normalisation followed by `gain * x̂ + bias`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, TensorError> {
    Ok(layer_norm_parts(x, gain, bias, eps)?.0)
}

pub(crate) type LayerNormParts<T> = (Tensor<T>, Vec<T>, Vec<T>);

/// Returns (output, x̂, 1/σ per row).
pub(crate) fn layer_norm_parts<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<LayerNormParts<T>, TensorError> {
    let d = x.last_dim();
    if gain.len() != d || bias.len() != d {
        return Err(TensorError::Dimension(format!(
            "layer_norm: row width {d}, gain {}, bias {}",
            gain.len(),
            bias.len()
        )));
    }
    let dt = T::lit(d as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(x.rows());
    for (r, row) in x.data.chunks(d).enumerate() {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dt;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / dt;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = gain.data[j] * h + bias.data[j];
        }
    }
    let out = Tensor::new(x.shape.clone(), out)?.finite("layer_norm")?;
    Ok((out, xhat, inv_std))
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
    }
}

#[inline]
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Mean negative log-likelihood of the true class. Returns (loss, softmax probabilities).
pub(crate) fn cross_entropy_parts<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Vec<T>), TensorError> {
    let (b, c) = logits.matrix_dims("cross_entropy")?;
    if labels.len() != b {
        return Err(TensorError::Dimension(format!(
            "cross_entropy: {b} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(TensorError::Label {
            label: bad,
            classes: c,
        });
    }
    let mut probs = logits.data.clone();
    let mut total = T::zero();
    for (row, &label) in probs.chunks_mut(c).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
        total = total + (lse - row[label]);
        softmax_row(row);
    }
    let loss = total / T::lit(b as f64);
    if !loss.is_finite() {
        return Err(TensorError::NonFinite("cross_entropy"));
    }
    Ok((loss, probs))
}

pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T, TensorError> {
    Ok(cross_entropy_parts(logits, labels)?.0)
}
