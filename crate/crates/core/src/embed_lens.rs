//! Embedding-space diagnostics: per-sample projected residuals, their top
//! singular triple, cross-sample similarity, vocabulary decoding of the drift
//! direction, and the link between drift magnitude and token norm.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cosine_similarity, pearson, svd, LinalgError};
use crate::model::{rng_for, DecoderHead, ModelError, Projector, VisionEncoder};
use crate::tensor::{row_l2_norms, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EmbedLensError {
    #[error("need at least 2 samples per group, got {0}")]
    InsufficientSamples(usize),
    #[error("degenerate (all-zero) residual for sample {0}")]
    Degenerate(usize),
    #[error("u0 of length {len} does not fill a {h}x{w} grid")]
    Grid { len: usize, h: usize, w: usize },
    #[error("top-k of {k} exceeds vocabulary {vocab}")]
    TopK { k: usize, vocab: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, EmbedLensError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedResidual {
    pub delta_e: Tensor,
    pub sample_id: usize,
    pub poisoned: bool,
}

/// `project(f, proj_p) − project(f, proj_c)` on shared encoder features.
pub fn residual_from_features(
    features: &Tensor,
    clean: &Projector,
    poisoned: &Projector,
    sample_id: usize,
    is_poisoned: bool,
) -> Result<ProjectedResidual> {
    let ep = poisoned.project(features)?;
    let ec = clean.project(features)?;
    Ok(ProjectedResidual {
        delta_e: ep.sub(&ec)?,
        sample_id,
        poisoned: is_poisoned,
    })
}

pub fn projected_residual(
    img: &Tensor,
    clean: &Projector,
    poisoned: &Projector,
    encoder: &VisionEncoder,
    sample_id: usize,
    is_poisoned: bool,
) -> Result<ProjectedResidual> {
    residual_from_features(&encoder.encode(img)?, clean, poisoned, sample_id, is_poisoned)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftDecomposition {
    pub sample_id: usize,
    pub poisoned: bool,
    pub sigma0: f32,
    /// Per-token weights, length `N_v`.
    pub u0: Vec<f32>,
    /// Drift direction in embedding space, length `d_l`.
    pub v0: Vec<f32>,
    pub spectrum: Vec<f32>,
    pub degenerate: bool,
}

impl DriftDecomposition {
    /// `σ0/σ1`, or infinity when the residual is rank one.
    pub fn dominance(&self) -> f64 {
        match self.spectrum.get(1) {
            Some(&s1) if s1 > 0.0 => self.sigma0 as f64 / s1 as f64,
            _ => f64::INFINITY,
        }
    }
}

/// Top singular triple of the residual. Signs follow the SVD convention
/// (largest-magnitude entry of `v0` positive) and `u0` flips with `v0`.
pub fn drift_decompose(pr: &ProjectedResidual) -> Result<DriftDecomposition> {
    let s = svd(&pr.delta_e)?;
    let degenerate = s.sigma.first().is_none_or(|&x| x == 0.0);
    Ok(DriftDecomposition {
        sample_id: pr.sample_id,
        poisoned: pr.poisoned,
        sigma0: s.sigma.first().copied().unwrap_or(0.0),
        u0: s.u_col(0),
        v0: s.v_col(0),
        spectrum: s.sigma,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub pairs: usize,
}

/// Rows: within clean, within poison, between. Values are cosine × 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTable {
    pub v0: [Cell; 3],
    pub u0: [Cell; 3],
}

impl SimilarityTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("grouping,v0_mean,v0_std,u0_mean,u0_std,pairs\n");
        for (i, g) in ["clean", "poison", "between"].iter().enumerate() {
            s.push_str(&format!(
                "{g},{:.2},{:.2},{:.2},{:.2},{}\n",
                self.v0[i].mean, self.v0[i].std, self.u0[i].mean, self.u0[i].std, self.v0[i].pairs
            ));
        }
        s
    }
}

fn within_pairs(n: usize, max_pairs: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    if n * (n - 1) / 2 <= max_pairs {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    } else {
        (0..max_pairs)
            .map(|_| {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                (i.min(j), i.max(j))
            })
            .collect()
    }
}

fn between_pairs(n: usize, m: usize, max_pairs: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    if n * m <= max_pairs {
        (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect()
    } else {
        (0..max_pairs)
            .map(|_| (rng.random_range(0..n), rng.random_range(0..m)))
            .collect()
    }
}

fn cell(a: &[&[f32]], b: &[&[f32]], pairs: &[(usize, usize)]) -> Result<Cell> {
    let mut vals = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        vals.push(100.0 * cosine_similarity(a[i], b[j])? as f64);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(Cell {
        mean,
        std: var.sqrt(),
        pairs: vals.len(),
    })
}

/// Pairwise cosine statistics of `v0` and `u0` within and across groups,
/// over all pairs or `max_pairs` sampled ones when there are more.
pub fn drift_similarity_table(
    clean: &[DriftDecomposition],
    poison: &[DriftDecomposition],
    max_pairs: usize,
    seed: u64,
) -> Result<SimilarityTable> {
    for g in [clean, poison] {
        if g.len() < 2 {
            return Err(EmbedLensError::InsufficientSamples(g.len()));
        }
        if let Some(d) = g.iter().find(|d| d.degenerate) {
            return Err(EmbedLensError::Degenerate(d.sample_id));
        }
    }
    let mut rng = rng_for(seed, 40);
    let pc = within_pairs(clean.len(), max_pairs, &mut rng);
    let pp = within_pairs(poison.len(), max_pairs, &mut rng);
    let pb = between_pairs(clean.len(), poison.len(), max_pairs, &mut rng);
    fn v(g: &[DriftDecomposition]) -> Vec<&[f32]> {
        g.iter().map(|d| d.v0.as_slice()).collect()
    }
    fn u(g: &[DriftDecomposition]) -> Vec<&[f32]> {
        g.iter().map(|d| d.u0.as_slice()).collect()
    }
    let (vc, vp, uc, up) = (v(clean), v(poison), u(clean), u(poison));
    Ok(SimilarityTable {
        v0: [cell(&vc, &vc, &pc)?, cell(&vp, &vp, &pp)?, cell(&vc, &vp, &pb)?],
        u0: [cell(&uc, &uc, &pc)?, cell(&up, &up, &pp)?, cell(&uc, &up, &pb)?],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitLens {
    /// `(token, probability)` in descending probability, ties by token id.
    pub top: Vec<(usize, f64)>,
    pub total_probability: f64,
}

/// `softmax(W_vocab · v0)` and its top `k`.
pub fn logitlens_decode(v0: &[f32], head: &DecoderHead, k: usize) -> Result<LogitLens> {
    let vocab = head.vocab();
    if k > vocab {
        return Err(EmbedLensError::TopK { k, vocab });
    }
    let logits: Vec<f64> = (0..vocab)
        .map(|t| {
            head.w_vocab
                .row(t)
                .iter()
                .zip(v0)
                .map(|(&w, &x)| w as f64 * x as f64)
                .sum()
        })
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let probs: Vec<f64> = e.iter().map(|x| x / z).collect();
    let mut order: Vec<usize> = (0..vocab).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    Ok(LogitLens {
        top: order[..k].iter().map(|&t| (t, probs[t])).collect(),
        total_probability: probs.iter().sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitLensCorpus {
    /// For each rank `r < k`, `(token, share of samples)` sorted by share
    /// descending then token id.
    pub rank_frequency: Vec<Vec<(usize, f64)>>,
    /// Share of samples whose top-k holds at least one `marker` token.
    pub marker_hit_rate: f64,
}

impl LogitLensCorpus {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,token,share\n");
        for (r, row) in self.rank_frequency.iter().enumerate() {
            for (t, f) in row {
                s.push_str(&format!("{r},{t},{f:.4}\n"));
            }
        }
        s
    }
}

pub fn logitlens_corpus(decoded: &[LogitLens], markers: &[usize]) -> LogitLensCorpus {
    let k = decoded.iter().map(|d| d.top.len()).max().unwrap_or(0);
    let n = decoded.len().max(1) as f64;
    let rank_frequency = (0..k)
        .map(|r| {
            let mut counts = std::collections::BTreeMap::new();
            for d in decoded {
                if let Some(&(t, _)) = d.top.get(r) {
                    *counts.entry(t).or_insert(0usize) += 1;
                }
            }
            let mut row: Vec<(usize, f64)> = counts.into_iter().map(|(t, c)| (t, c as f64 / n)).collect();
            row.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            row
        })
        .collect();
    let hits = decoded
        .iter()
        .filter(|d| d.top.iter().any(|(t, _)| markers.contains(t)))
        .count();
    LogitLensCorpus {
        rank_frequency,
        marker_hit_rate: hits as f64 / n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormCorrelation {
    pub r: f64,
    /// `u0` was negated to make `r` non-negative.
    pub flipped: bool,
}

/// Pearson correlation between `u0` and the per-token feature norms.
pub fn u0_norm_correlation(d: &DriftDecomposition, features: &Tensor) -> Result<NormCorrelation> {
    let norms = row_l2_norms(features)?;
    let r = pearson(&d.u0, norms.data())? as f64;
    Ok(NormCorrelation {
        r: r.abs(),
        flipped: r < 0.0,
    })
}

/// `α·n·v0ᵀ + ε·N(0,1)`: a residual whose token weights are the feature
/// norms themselves, optionally blurred by noise.
pub fn calibration_residual(features: &Tensor, v0: &[f32], alpha: f32, eps: f32, seed: u64) -> Result<Tensor> {
    let norms = row_l2_norms(features)?;
    let mut rng = rng_for(seed, 41);
    let d = v0.len();
    Ok(Tensor::from_fn(&[features.rows(), d], |i| {
        let z: f32 = StandardNormal.sample(&mut rng);
        alpha * norms.data()[i / d] * v0[i % d] + eps * z
    }))
}

/// `u0` laid out on the `h × w` patch grid.
pub fn u0_spatial_map(u0: &[f32], h: usize, w: usize) -> Result<Vec<Vec<f32>>> {
    if u0.len() != h * w {
        return Err(EmbedLensError::Grid { len: u0.len(), h, w });
    }
    Ok(u0.chunks(w).map(|r| r.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_shift_gives_constant_rows() {
        let c = Projector::init(2, 5, 4);
        let mut p = c.clone();
        p.b2 = Tensor::vector(vec![1.0, -2.0, 0.5, 0.0]);
        let f = Tensor::from_fn(&[3, 5], |i| (i as f32 * 0.3).cos());
        let r = residual_from_features(&f, &c, &p, 0, false).unwrap();
        for i in 0..3 {
            for (a, b) in r.delta_e.row(i).iter().zip(p.b2.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_v0_is_uniform_with_id_ties() {
        let head = DecoderHead::init(1, 6, 10, 4, Default::default());
        let ll = logitlens_decode(&[0.0; 6], &head, 3).unwrap();
        assert_eq!(ll.top.iter().map(|t| t.0).collect::<Vec<_>>(), [0, 1, 2]);
        assert!((ll.top[0].1 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn spatial_map_shapes() {
        let mut u = vec![0.0; 16];
        u[0] = 1.0;
        let g = u0_spatial_map(&u, 4, 4).unwrap();
        assert_eq!(g[0][0], 1.0);
        assert_eq!(g.iter().flatten().filter(|&&v| v != 0.0).count(), 1);
        assert!(u0_spatial_map(&u, 3, 4).is_err());
    }
}
