//! Dense row-major `f32` tensors and the handful of kernels the lab needs.
//!
//! Reductions (matmul, norms, means) accumulate in `f64` and round once, in a
//! fixed loop order, so results are bit-identical from run to run.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero dimension")]
    ZeroDim(Vec<usize>),
    #[error("dimension mismatch: {op} between {a:?} and {b:?}")]
    DimMismatch {
        op: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("{0} of an empty input")]
    Empty(&'static str),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroDim(shape));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals and tests.
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    fn require_rank(&self, r: usize) -> Result<()> {
        if self.rank() != r {
            return Err(TensorError::Rank {
                expected: r,
                shape: self.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.require_rank(2)?;
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::DimMismatch {
                op,
                a: self.shape.clone(),
                b: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f32) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f32 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt() as f32
    }

    pub fn dot(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(TensorError::DimMismatch {
                op: "dot",
                a: self.shape.clone(),
                b: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum::<f64>() as f32)
    }

    /// Index of the maximum entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Matrix product with `f64` accumulation in row-major inner-loop order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.require_rank(2)?;
    b.require_rank(2)?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(TensorError::DimMismatch {
            op: "matmul",
            a: a.shape.clone(),
            b: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for p in 0..k {
            let aip = a.data[i * k + p] as f64;
            let brow = &b.data[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += aip * bv as f64;
            }
        }
        for (o, &s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = s as f32;
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Matrix-vector product `a · x` for `a: m×n`, `x: n`.
pub fn matvec(a: &Tensor, x: &[f32]) -> Result<Vec<f32>> {
    a.require_rank(2)?;
    if a.cols() != x.len() {
        return Err(TensorError::DimMismatch {
            op: "matvec",
            a: a.shape.clone(),
            b: vec![x.len()],
        });
    }
    Ok((0..a.rows())
        .map(|i| {
            a.row(i)
                .iter()
                .zip(x)
                .map(|(&w, &v)| w as f64 * v as f64)
                .sum::<f64>() as f32
        })
        .collect())
}

/// Exact GELU, `x·Φ(x)` with `Φ` from `erf`.
pub fn gelu_scalar(x: f32) -> f32 {
    gelu64(x as f64) as f32
}

pub fn gelu64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Derivative of the exact GELU: `Φ(x) + x·φ(x)`.
pub fn gelu_grad_scalar(x: f32) -> f32 {
    gelu_grad64(x as f64) as f32
}

pub fn gelu_grad64(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn gelu(t: &Tensor) -> Tensor {
    t.map(gelu_scalar)
}

pub fn row_l2_norms(m: &Tensor) -> Result<Tensor> {
    m.require_rank(2)?;
    Ok(Tensor::vector(
        (0..m.rows())
            .map(|i| {
                m.row(i)
                    .iter()
                    .map(|&v| v as f64 * v as f64)
                    .sum::<f64>()
                    .sqrt() as f32
            })
            .collect(),
    ))
}

pub fn mean_pool_rows(m: &Tensor) -> Result<Tensor> {
    m.require_rank(2)?;
    let (n, d) = (m.rows(), m.cols());
    if n == 0 {
        return Err(TensorError::Empty("mean_pool_rows"));
    }
    let mut acc = vec![0.0f64; d];
    for i in 0..n {
        for (s, &v) in acc.iter_mut().zip(m.row(i)) {
            *s += v as f64;
        }
    }
    Ok(Tensor::vector(
        acc.into_iter().map(|s| (s / n as f64) as f32).collect(),
    ))
}

/// Numerically stable softmax over a slice.
pub fn softmax_slice(v: &[f32]) -> Vec<f32> {
    let mx = v.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let ex: Vec<f64> = v.iter().map(|&x| (x as f64 - mx).exp()).collect();
    let z: f64 = ex.iter().sum();
    ex.into_iter().map(|e| (e / z) as f32).collect()
}

pub fn softmax(v: &Tensor) -> Result<Tensor> {
    v.require_rank(1)?;
    Ok(Tensor::vector(softmax_slice(&v.data)))
}

/// `log_softmax` computed with max subtraction in `f64`.
pub fn log_softmax_slice(v: &[f32]) -> Vec<f32> {
    let mx = v.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = v.iter().map(|&x| (x as f64 - mx).exp()).sum::<f64>().ln() + mx;
    v.iter().map(|&x| (x as f64 - lse) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![0.0; 3]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![0, 2], vec![]),
            Err(TensorError::ZeroDim(_))
        ));
    }

    #[test]
    fn matmul_identity_and_projection() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
        let p = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let x = Tensor::from_rows(&[&[5.0], &[7.0]]);
        assert_eq!(matmul(&p, &x).unwrap().data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn norms_and_pool() {
        let m = Tensor::from_rows(&[&[3.0, 4.0]]);
        assert_eq!(row_l2_norms(&m).unwrap().data(), &[5.0]);
        assert_eq!(
            row_l2_norms(&Tensor::zeros(&[2, 5])).unwrap().data(),
            &[0.0, 0.0]
        );
        let m = Tensor::from_rows(&[&[1.0, 1.0], &[3.0, 3.0]]);
        assert_eq!(mean_pool_rows(&m).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0, 0.0])).unwrap();
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0])).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-7 && s.data()[1] >= 0.0);
        assert!(s.is_finite());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
