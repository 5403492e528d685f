//! Dense row-major f64 tensors and the plain (gradient-free) numeric kernels.
//!
//! `Tensor` is the universal value carrier: features, encoder weights,
//! prompts, gradients. Operations validate shapes, reject non-finite results,
//! and are deterministic — summation orders are fixed. Gradient-tracking
//! versions of these operations live in [`crate::graph`]; both share the
//! kernels defined here so the arithmetic is identical on every path.

use crate::error::{DdpError, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Tensor from an explicit shape and row-major values.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(DdpError::Shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                values.len()
            )));
        }
        let t = Tensor { shape, values };
        t.check_finite("new")?;
        Ok(t)
    }

    /// All-zero tensor.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
        }
    }

    /// Scalar tensor (shape `[1]`).
    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![x],
        }
    }

    /// 2-D tensor from rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(DdpError::Shape("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of rows when viewed as a matrix (1-D tensors are one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    /// Element at (row, col) in the matrix view.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols() + col]
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.values.len() != 1 {
            return Err(DdpError::Shape(format!(
                "item() on tensor of {} values",
                self.values.len()
            )));
        }
        Ok(self.values[0])
    }

    /// Error if any stored value is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(DdpError::Numeric(format!(
                "non-finite value produced by {context}"
            )))
        }
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = matrix_dims(self, "matmul lhs")?;
        let (k2, n) = matrix_dims(other, "matmul rhs")?;
        if k != k2 {
            return Err(DdpError::Shape(format!(
                "matmul inner dimensions disagree: {m}x{k} vs {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.values, &other.values, &mut out, m, k, n);
        let t = Tensor {
            shape: vec![m, n],
            values: out,
        };
        t.check_finite("matmul")?;
        Ok(t)
    }

    /// Row-wise softmax at the given temperature (max-subtracted for
    /// stability). Every output row is nonnegative and sums to one.
    pub fn softmax_rows(&self, temperature: f64) -> Result<Tensor> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(DdpError::Domain(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let cols = self.cols();
        if cols == 0 {
            return Err(DdpError::Shape("softmax over empty rows".into()));
        }
        let mut out = self.values.clone();
        for row in out.chunks_mut(cols) {
            softmax_row_in_place(row, temperature);
        }
        let t = Tensor {
            shape: self.shape.clone(),
            values: out,
        };
        t.check_finite("softmax_rows")?;
        Ok(t)
    }

    /// Per-row layer normalization over the last dimension followed by the
    /// affine map `scale ⊙ x̂ + shift`. Uses the population variance with ε
    /// inside the square root, so constant rows normalize to zero.
    pub fn layer_norm(&self, scale: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
        let d = self.cols();
        if scale.len() != d || shift.len() != d {
            return Err(DdpError::Shape(format!(
                "layer_norm affine length {} / {} does not match width {}",
                scale.len(),
                shift.len(),
                d
            )));
        }
        let mut out = self.values.clone();
        for row in out.chunks_mut(d) {
            let (mean, sigma) = row_moments(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = scale.values[j] * ((*v - mean) / sigma) + shift.values[j];
            }
        }
        let t = Tensor {
            shape: self.shape.clone(),
            values: out,
        };
        t.check_finite("layer_norm")?;
        Ok(t)
    }
}

/// Cosine similarity of two equal-length tensors (flattened), clamped to
/// [-1, 1] against rounding. Zero-norm inputs are rejected as degenerate.
pub fn cosine(u: &Tensor, v: &Tensor) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(DdpError::Shape(format!(
            "cosine over lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.values.iter().zip(&v.values) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(DdpError::Degenerate(
            "cosine of a zero-norm vector".into(),
        ));
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(DdpError::Shape(format!(
            "{what} must be 2-D, got shape {:?}",
            t.shape
        )));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Population mean and √(var + ε) of one row.
pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, (var + eps).sqrt())
}

/// Max-subtracted softmax of one row at temperature `tau`, in place.
pub(crate) fn softmax_row_in_place(row: &mut [f64], tau: f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / tau).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `out += a · b` for row-major buffers (m×k times k×n). The i-k-j loop order
/// keeps both inner accesses contiguous, which the compiler vectorizes well.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` (m×k times n×k) without materializing the transpose.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// `out += aᵀ · b` (a is m×k, b is m×n, out is k×n) without materializing
/// the transpose.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}
