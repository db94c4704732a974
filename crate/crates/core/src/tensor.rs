//! Dense row-major tensors and the numeric kernels shared by the tape and the
//! cached inference path.

use crate::error::{Error, Result};
use crate::precision::{precision, round_slice};

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;
/// Lower clamp applied to probabilities before taking a log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from raw values without rounding.
    ///
    /// Panics if `shape` has a zero dimension or does not match `data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self::try_new(shape, data).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn try_new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!("invalid tensor shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Result of an op: rounded to the active precision.
    pub(crate) fn computed(shape: Vec<usize>, mut data: Vec<f64>) -> Self {
        round_slice(&mut data, precision());
        Self::new(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::computed(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::computed(vec![1], vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    /// Interprets the tensor as a matrix; 1-d tensors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => panic!("expected a matrix, got shape {s:?}"),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// In-place `self += other`, used for gradient accumulation.
    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "shape mismatch in accumulation");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        round_slice(&mut self.data, precision());
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape, b.shape, "{op}: shape mismatch");
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    same_shape(a, b, "add");
    Tensor::computed(
        a.shape.clone(),
        a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    same_shape(a, b, "sub");
    Tensor::computed(
        a.shape.clone(),
        a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
    )
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    same_shape(a, b, "mul");
    Tensor::computed(
        a.shape.clone(),
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    )
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    Tensor::computed(a.shape.clone(), a.data.iter().map(|x| x * s).collect())
}

pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::computed(a.shape.clone(), a.data.iter().map(|&x| f(x)).collect())
}

/// `a` (n×m) plus the row vector `b` (m or 1×m) broadcast over rows.
pub fn add_row(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = a.dims2();
    assert_eq!(b.numel(), m, "add_row: width mismatch");
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        out.extend(a.row(i).iter().zip(&b.data).map(|(x, y)| x + y));
    }
    Tensor::computed(a.shape.clone(), out)
}

/// Column sums of a matrix, as a tensor shaped like `like`.
pub fn sum_rows(a: &Tensor, like: &[usize]) -> Tensor {
    let (n, m) = a.dims2();
    let mut out = vec![0.0; m];
    for i in 0..n {
        for (o, x) in out.iter_mut().zip(a.row(i)) {
            *o += x;
        }
    }
    Tensor::computed(like.to_vec(), out)
}

/// `a · b` for `a` n×k and `b` k×m.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.dims2();
    let (k2, m) = b.dims2();
    assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            // Exact zeros (masked attention weights) leave the row untouched.
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::computed(vec![n, m], out)
}

/// `a · bᵀ` for `a` n×k and `b` m×k.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.dims2();
    let (m, k2) = b.dims2();
    assert_eq!(k, k2, "matmul_nt: inner dimensions {k} vs {k2}");
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::computed(vec![n, m], out)
}

/// `aᵀ · b` for `a` k×n and `b` k×m.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, n) = a.dims2();
    let (k2, m) = b.dims2();
    assert_eq!(k, k2, "matmul_tn: inner dimensions {k} vs {k2}");
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let arow = &a.data[p * n..(p + 1) * n];
        let brow = &b.data[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::computed(vec![n, m], out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (n, m) = a.dims2();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a.data[i * m + j];
        }
    }
    Tensor::new(vec![m, n], out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GeLU.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise layer norm. Returns `(y, xhat, rstd)`.
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> (Tensor, Tensor, Vec<f64>) {
    let (n, m) = x.dims2();
    assert_eq!(gain.numel(), m, "layernorm gain width");
    assert_eq!(bias.numel(), m, "layernorm bias width");
    let mut y = Vec::with_capacity(n * m);
    let mut xhat = Vec::with_capacity(n * m);
    let mut rstds = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / m as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        rstds.push(rstd);
        for (j, v) in row.iter().enumerate() {
            let h = (v - mean) * rstd;
            xhat.push(h);
            y.push(h * gain.data[j] + bias.data[j]);
        }
    }
    (
        Tensor::computed(x.shape.clone(), y),
        Tensor::new(x.shape.clone(), xhat),
        rstds,
    )
}

/// Selects rows of `table` by index.
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Tensor {
    let m = table.cols();
    let mut out = Vec::with_capacity(ids.len() * m);
    for &id in ids {
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), m], out)
}

/// Row softmax where row `i` only sees columns `0..=i`; later columns get 0.
pub fn causal_softmax(s: &Tensor) -> Tensor {
    let (n, m) = s.dims2();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let visible = (i + 1).min(m);
        let row = &s.row(i)[..visible];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[i * m..i * m + visible];
        let mut z = 0.0;
        for (dst, &v) in o.iter_mut().zip(row) {
            *dst = (v - mx).exp();
            z += *dst;
        }
        for dst in o.iter_mut() {
            *dst /= z;
        }
    }
    Tensor::computed(vec![n, m], out)
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax(x: &Tensor) -> Tensor {
    let (n, m) = x.dims2();
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let row = x.row(i);
        out.extend(log_softmax_row(row));
    }
    Tensor::computed(x.shape.clone(), out)
}

pub fn log_softmax_row(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
    row.iter().map(move |v| v - lse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precision::{with_precision, Precision};

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn rejects_zero_dims_and_mismatched_len() {
        assert!(Tensor::try_new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::try_new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::try_new(vec![], vec![]).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        with_precision(Precision::F64, || {
            let a = t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
            let b = t(&[&[1.0, 0.5], &[-1.0, 2.0], &[0.0, 1.0]]);
            let c = matmul(&a, &b);
            assert_eq!(c.data(), &[-1.0, 7.5, -1.0, 18.0]);
            assert_eq!(matmul_nt(&a, &transpose(&b)), c);
            assert_eq!(matmul_tn(&transpose(&a), &b), c);
        });
    }

    #[test]
    fn causal_softmax_masks_future() {
        let s = t(&[&[1.0, 50.0], &[0.0, 0.0]]);
        let p = causal_softmax(&s);
        assert_eq!(p.data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn log_softmax_survives_peaked_rows() {
        let x = t(&[&[1000.0, 0.0, -1000.0]]);
        let l = log_softmax(&x);
        assert!(l.is_finite());
        assert_eq!(l.data()[0], 0.0);
    }

    #[test]
    fn layernorm_normalizes_rows() {
        with_precision(Precision::F64, || {
            let x = t(&[&[1.0, 2.0, 3.0, 4.0]]);
            let g = Tensor::full(&[4], 1.0);
            let b = Tensor::zeros(&[4]);
            let (y, _, _) = layernorm(&x, &g, &b);
            let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
            let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.25 / (1.25 + LN_EPS)).abs() < 1e-12);
        });
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8, "x={x}");
        }
    }
}
