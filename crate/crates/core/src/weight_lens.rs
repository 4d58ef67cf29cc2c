//! Weight-space diagnostics: residual spectra, rank-k surgery and neuron
//! statistics of the first projector layer.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::hex;
use crate::linalg::{rank_k_approx, spectrum_report, svd, LinalgError, Spectrum, SvdResult};
use crate::model::{ModelError, Projector};
use crate::tensor::{gelu_scalar, Tensor, TensorError};

pub fn tensor_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for &d in t.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

pub fn projector_hash(p: &Projector) -> String {
    let mut h = Sha256::new();
    for t in p.tensors() {
        h.update(tensor_hash(t).as_bytes());
    }
    hex(&h.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightResidual {
    pub dw1: Tensor,
    pub dw2: Tensor,
    pub db1: Tensor,
    pub db2: Tensor,
    pub clean_hash: String,
    pub poisoned_hash: String,
}

impl WeightResidual {
    pub fn is_zero(&self) -> bool {
        [&self.dw1, &self.dw2, &self.db1, &self.db2]
            .iter()
            .all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}

pub fn weight_residual(clean: &Projector, poisoned: &Projector) -> Result<WeightResidual, TensorError> {
    Ok(WeightResidual {
        dw1: poisoned.w1.sub(&clean.w1)?,
        dw2: poisoned.w2.sub(&clean.w2)?,
        db1: poisoned.b1.sub(&clean.b1)?,
        db2: poisoned.b2.sub(&clean.b2)?,
        clean_hash: projector_hash(clean),
        poisoned_hash: projector_hash(poisoned),
    })
}

#[derive(Debug, Clone)]
pub struct LayerSpectrum {
    pub svd: SvdResult,
    pub spectrum: Spectrum,
}

impl LayerSpectrum {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,sigma,cumulative_energy\n");
        for (i, (v, e)) in self.spectrum.values.iter().zip(&self.spectrum.cumulative_energy).enumerate() {
            s.push_str(&format!("{i},{v:.6e},{e:.6}\n"));
        }
        s
    }
}

pub fn residual_svd_report(r: &WeightResidual) -> Result<[LayerSpectrum; 2], LinalgError> {
    let one = |m: &Tensor| -> Result<LayerSpectrum, LinalgError> {
        let svd = svd(m)?;
        let spectrum = spectrum_report(&svd.sigma);
        Ok(LayerSpectrum { svd, spectrum })
    };
    Ok([one(&r.dw1)?, one(&r.dw2)?])
}

/// `W_i ← W_i^p − [ΔW_i]_{k_i}`; biases are left alone.
pub fn surgery_remove(poisoned: &Projector, r: &WeightResidual, k1: usize, k2: usize) -> Result<Projector, LinalgError> {
    let mut out = poisoned.clone();
    if k1 > 0 {
        out.w1 = out.w1.sub(&rank_k_approx(&r.dw1, k1)?)?;
    }
    if k2 > 0 {
        out.w2 = out.w2.sub(&rank_k_approx(&r.dw2, k2)?)?;
    }
    Ok(out)
}

/// `W_i ← W_i^c + [ΔW_i]_{k_i}`; biases are left alone.
pub fn surgery_recover(clean: &Projector, r: &WeightResidual, k1: usize, k2: usize) -> Result<Projector, LinalgError> {
    let mut out = clean.clone();
    if k1 > 0 {
        out.w1 = out.w1.add(&rank_k_approx(&r.dw1, k1)?)?;
    }
    if k2 > 0 {
        out.w2 = out.w2.add(&rank_k_approx(&r.dw2, k2)?)?;
    }
    Ok(out)
}

/// Mean activation and firing rate of each hidden neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronStats {
    pub magnitude: Vec<f64>,
    pub frequency: Vec<f64>,
    pub tag: String,
}

/// Expectations over every sample and every token position of
/// `h = gelu(W1·x + b1)`; a neuron fires when `h > 0`.
pub fn neuron_stats(projector: &Projector, features: &[Tensor], tag: &str) -> Result<NeuronStats, ModelError> {
    let dl = projector.d_l();
    let mut mag = vec![0.0f64; dl];
    let mut freq = vec![0usize; dl];
    let mut count = 0usize;
    for f in features {
        let pre = projector.forward(f)?.pre;
        for r in 0..pre.rows() {
            for (j, &z) in pre.row(r).iter().enumerate() {
                let h = gelu_scalar(z);
                mag[j] += h as f64;
                if h > 0.0 {
                    freq[j] += 1;
                }
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(ModelError::Tensor(TensorError::Empty("neuron statistics")));
    }
    Ok(NeuronStats {
        magnitude: mag.iter().map(|m| m / count as f64).collect(),
        frequency: freq.iter().map(|&c| c as f64 / count as f64).collect(),
        tag: tag.to_string(),
    })
}

pub const HIST_BINS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

/// Both sample sets binned over their pooled range.
pub fn paired_histograms(a: &[f64], b: &[f64], bins: usize) -> (Histogram, Histogram) {
    let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    let bin = |x: f64| {
        if hi > lo {
            (((x - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
        } else {
            0
        }
    };
    let fill = |xs: &[f64]| {
        let mut c = vec![0usize; bins];
        xs.iter().for_each(|&x| c[bin(x)] += 1);
        Histogram { lo, hi, counts: c }
    };
    (fill(a), fill(b))
}

/// `Σ_b min(p_b, q_b)` of the normalised histograms.
pub fn histogram_intersection(a: &Histogram, b: &Histogram) -> f64 {
    let na: usize = a.counts.iter().sum();
    let nb: usize = b.counts.iter().sum();
    if na == 0 || nb == 0 {
        return 0.0;
    }
    a.counts
        .iter()
        .zip(&b.counts)
        .map(|(&x, &y)| (x as f64 / na as f64).min(y as f64 / nb as f64))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricOverlap {
    pub clean_hist: Histogram,
    pub poison_hist: Histogram,
    pub intersection: f64,
    pub max_abs_delta: f64,
    pub argmax_neuron: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub magnitude: MetricOverlap,
    pub frequency: MetricOverlap,
}

pub fn neuron_overlap(clean: &NeuronStats, poison: &NeuronStats) -> OverlapReport {
    let one = |a: &[f64], b: &[f64]| {
        let (ha, hb) = paired_histograms(a, b, HIST_BINS);
        let (argmax_neuron, max_abs_delta) = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .enumerate()
            .fold((0, -1.0), |best, (i, d)| if d > best.1 { (i, d) } else { best });
        MetricOverlap {
            intersection: histogram_intersection(&ha, &hb),
            clean_hist: ha,
            poison_hist: hb,
            max_abs_delta,
            argmax_neuron,
        }
    };
    OverlapReport {
        magnitude: one(&clean.magnitude, &poison.magnitude),
        frequency: one(&clean.frequency, &poison.frequency),
    }
}
