//! SVD by one-sided cyclic Jacobi, truncated reconstructions, and the
//! similarity statistics used by the weight and embedding analyses.

use thiserror::Error;

use crate::tensor::Tensor;

const REL_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("expected a rank-2 tensor, got shape {0:?}")]
    NotMatrix(Vec<usize>),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("similarity undefined for a zero vector")]
    ZeroVector,
    #[error("correlation undefined: zero variance")]
    ZeroVariance,
    #[error("need at least {need} values, got {got}")]
    TooShort { need: usize, got: usize },
    #[error(transparent)]
    Shape(#[from] crate::tensor::TensorError),
}

/// `a = u · diag(sigma) · vᵀ`, with `u: m×r`, `v: n×r`, `r = min(m, n)`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Tensor,
    pub sigma: Vec<f32>,
    pub v: Tensor,
    pub sweeps: usize,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn u_col(&self, i: usize) -> Vec<f32> {
        column(&self.u, i)
    }

    pub fn v_col(&self, i: usize) -> Vec<f32> {
        column(&self.v, i)
    }

    /// Sum of the first `k` rank-1 terms.
    pub fn truncated(&self, k: usize) -> Tensor {
        let (m, n) = (self.u.rows(), self.v.rows());
        let k = k.min(self.rank());
        let mut out = vec![0.0f64; m * n];
        for c in 0..k {
            let s = self.sigma[c] as f64;
            for i in 0..m {
                let ui = self.u.get(i, c) as f64 * s;
                if ui == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += ui * self.v.get(j, c) as f64;
                }
            }
        }
        Tensor::new(vec![m, n], out.into_iter().map(|x| x as f32).collect()).unwrap()
    }
}

fn column(t: &Tensor, i: usize) -> Vec<f32> {
    (0..t.rows()).map(|r| t.get(r, i)).collect()
}

/// Full thin SVD of a matrix.
///
/// Columns of the working copy are orthogonalised pairwise in cyclic order
/// until every pair satisfies `|⟨a_p, a_q⟩| ≤ 1e-10·‖a_p‖‖a_q‖` or 60 sweeps
/// pass. Singular values are sorted descending with a stable sort, so ties
/// keep the order in which the sweep produced them. Each right singular
/// vector is flipped so its largest-magnitude entry is positive.
pub fn svd(a: &Tensor) -> Result<SvdResult, LinalgError> {
    if a.rank() != 2 {
        return Err(LinalgError::NotMatrix(a.shape().to_vec()));
    }
    let (m, n) = (a.rows(), a.cols());
    let wide = m < n;
    // Work on the tall orientation: columns of `w` are the vectors rotated.
    let (rows, cols) = if wide { (n, m) } else { (m, n) };
    let mut w = vec![0.0f64; rows * cols];
    for i in 0..m {
        for j in 0..n {
            let v = a.get(i, j) as f64;
            if wide {
                w[j * cols + i] = v;
            } else {
                w[i * cols + j] = v;
            }
        }
    }
    // Column-major copies make the inner loops contiguous.
    let mut cm: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| w[i * cols + j]).collect())
        .collect();
    let mut vm: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut sweeps = 0;
    for sweep in 0..MAX_SWEEPS {
        sweeps = sweep + 1;
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cm[p], &cm[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for (&x, &y) in cp.iter().zip(cq) {
                        al += x * x;
                        be += y * y;
                        ga += x * y;
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || gamma.abs() <= REL_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cm, p, q, c, s);
                rotate(&mut vm, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cm
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let tiny = scale * 1e-12;
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut right: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut sigma = Vec::with_capacity(cols);
    for &j in &order {
        let s = norms[j];
        if s > tiny && s > 0.0 {
            left.push(cm[j].iter().map(|x| x / s).collect());
            sigma.push(s);
        } else {
            left.push(Vec::new());
            sigma.push(0.0);
        }
        right.push(vm[j].clone());
    }
    complete_basis(&mut left, rows);

    // Map back to the caller's orientation.
    let (mut ucols, mut vcols) = if wide { (right, left) } else { (left, right) };
    for i in 0..cols {
        let big = vcols[i]
            .iter()
            .enumerate()
            .fold(0usize, |b, (k, x)| if x.abs() > vcols[i][b].abs() { k } else { b });
        if vcols[i][big] < 0.0 {
            vcols[i].iter_mut().for_each(|x| *x = -*x);
            ucols[i].iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(SvdResult {
        u: from_columns(&ucols, m),
        sigma: sigma.into_iter().map(|s| s as f32).collect(),
        v: from_columns(&vcols, n),
        sweeps,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills empty entries of `basis` with unit vectors orthogonal to the rest
/// (Gram-Schmidt over the standard basis, twice for stability).
fn complete_basis(basis: &mut [Vec<f64>], dim: usize) {
    let mut next_e = 0;
    for i in 0..basis.len() {
        if !basis[i].is_empty() {
            continue;
        }
        loop {
            assert!(next_e < dim, "cannot complete orthonormal basis");
            let mut v = vec![0.0; dim];
            v[next_e] = 1.0;
            next_e += 1;
            for _ in 0..2 {
                for b in basis.iter().filter(|b| !b.is_empty()) {
                    let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
            }
            let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nrm > 1e-6 {
                basis[i] = v.into_iter().map(|x| x / nrm).collect();
                break;
            }
        }
    }
}

fn from_columns(cols: &[Vec<f64>], rows: usize) -> Tensor {
    let r = cols.len();
    Tensor::from_fn(&[rows, r], |idx| cols[idx % r][idx / r] as f32)
}

/// Frobenius-optimal rank-`k` approximation. `k = 0` gives the zero matrix.
pub fn rank_k_approx(a: &Tensor, k: usize) -> Result<Tensor, LinalgError> {
    if a.rank() != 2 {
        return Err(LinalgError::NotMatrix(a.shape().to_vec()));
    }
    if k == 0 {
        return Ok(Tensor::zeros(a.shape()));
    }
    Ok(svd(a)?.truncated(k))
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32, LinalgError> {
    if a.len() != b.len() {
        return Err(LinalgError::Length(a.len(), b.len()));
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(LinalgError::ZeroVector);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0) as f32)
}

/// Pearson correlation, centred two-pass formula.
pub fn pearson(x: &[f32], y: &[f32]) -> Result<f32, LinalgError> {
    if x.len() != y.len() {
        return Err(LinalgError::Length(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(LinalgError::TooShort {
            need: 2,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let my = y.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a as f64 - mx, b as f64 - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    let eps = 1e-24;
    if sxx <= eps * n || syy <= eps * n {
        return Err(LinalgError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0) as f32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub values: Vec<f32>,
    pub cumulative_energy: Vec<f32>,
    /// All singular values are zero; energies are reported as 0.
    pub degenerate: bool,
}

pub fn spectrum_report(sigma: &[f32]) -> Spectrum {
    let total: f64 = sigma.iter().map(|&s| (s as f64) * (s as f64)).sum();
    let mut acc = 0.0;
    let cumulative_energy = sigma
        .iter()
        .map(|&s| {
            acc += (s as f64) * (s as f64);
            if total > 0.0 {
                (acc / total) as f32
            } else {
                0.0
            }
        })
        .collect();
    Spectrum {
        values: sigma.to_vec(),
        cumulative_energy,
        degenerate: total == 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_and_permuted() {
        let r = svd(&Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(r.sigma, vec![3.0, 1.0]);
        assert_eq!(r.u, Tensor::identity(2));
        assert_eq!(r.v, Tensor::identity(2));
        let r = svd(&Tensor::from_rows(&[&[0.0, 2.0], &[1.0, 0.0]])).unwrap();
        assert!((r.sigma[0] - 2.0).abs() < 1e-6 && (r.sigma[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rank_one_of_diagonal() {
        let a = Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        let r1 = rank_k_approx(&a, 1).unwrap();
        assert_eq!(r1.data(), &[3.0, 0.0, 0.0, 0.0]);
        assert_eq!(rank_k_approx(&a, 0).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn zero_matrix_has_orthonormal_factors() {
        let r = svd(&Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(r.sigma, vec![0.0, 0.0]);
        let g = crate::tensor::matmul(&r.u.transpose().unwrap(), &r.u).unwrap();
        assert_eq!(g, Tensor::identity(2));
    }

    #[test]
    fn similarity_cases() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-7);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(
            (cosine_similarity(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-7
        );
        assert_eq!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(LinalgError::ZeroVector)
        );
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-7);
        assert!((pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap() + 1.0).abs() < 1e-7);
        assert_eq!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(LinalgError::ZeroVariance)
        );
    }

    #[test]
    fn spectrum_cases() {
        assert_eq!(spectrum_report(&[2.0, 0.0, 0.0]).cumulative_energy, vec![1.0, 1.0, 1.0]);
        assert_eq!(spectrum_report(&[1.0, 1.0]).cumulative_energy, vec![0.5, 1.0]);
        let e = spectrum_report(&[3.0, 2.0, 1.0]).cumulative_energy;
        let want = [9.0 / 14.0, 13.0 / 14.0, 1.0];
        for (a, b) in e.iter().zip(want) {
            assert!((*a as f64 - b).abs() < 1e-7);
        }
        let z = spectrum_report(&[0.0, 0.0]);
        assert!(z.degenerate && z.cumulative_energy == vec![0.0, 0.0]);
    }
}
