//! Visual trigger probe: a small MLP that tries to tell triggered from clean
//! pooled embeddings.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{prf1, Prf1};
use crate::model::{rng_for, Projector, TriggerSpec, VisionEncoder};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("need at least {need} samples per class, have {pos} positive / {neg} negative")]
    ClassBalance { need: usize, pos: usize, neg: usize },
    #[error("embedding width {0} does not match probe input {1}")]
    Width(usize, usize),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub vectors: Vec<Vec<f32>>,
    pub labels: Vec<bool>,
}

impl ProbeDataset {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Positives are triggered copies of `images`, negatives the originals,
/// both pooled after the projector. Sample `i` is the positive for image `i`
/// and sample `n + i` the matching negative.
pub fn build_probe_dataset(
    images: &[Tensor],
    trigger: &TriggerSpec,
    trigger_seeds: &[u64],
    projector: &Projector,
    encoder: &VisionEncoder,
) -> Result<ProbeDataset, ProbeError> {
    let mut pos = Vec::with_capacity(images.len());
    let mut neg = Vec::with_capacity(images.len());
    for (img, &s) in images.iter().zip(trigger_seeds) {
        let t = trigger.apply(img, s)?;
        pos.push(projector.pooled(&encoder.encode(&t)?)?);
        neg.push(projector.pooled(&encoder.encode(img)?)?);
    }
    Ok(from_pairs(pos, neg))
}

/// Paired dataset from already-pooled vectors.
pub fn from_pairs(pos: Vec<Vec<f32>>, neg: Vec<Vec<f32>>) -> ProbeDataset {
    let labels = std::iter::repeat_n(true, pos.len())
        .chain(std::iter::repeat_n(false, neg.len()))
        .collect();
    ProbeDataset {
        vectors: pos.into_iter().chain(neg).collect(),
        labels,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: [usize; 2],
    pub lr: f64,
    pub epochs: usize,
    pub test_fraction: f64,
    pub min_per_class: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: [64, 32],
            lr: 1e-2,
            epochs: 200,
            test_fraction: 0.2,
            min_per_class: 20,
        }
    }
}

/// `d → h1 → h2 → 2` with ReLU between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// Weights are `out × in`, row-major.
    pub layers: Vec<(Tensor, Tensor)>,
    pub seed: u64,
    pub trained: bool,
}

impl ProbeModel {
    pub fn init(d: usize, hidden: [usize; 2], seed: u64) -> Self {
        let mut rng = rng_for(seed, 30);
        let dims = [d, hidden[0], hidden[1], 2];
        let layers = dims
            .windows(2)
            .map(|w| {
                let n = Normal::new(0.0f32, (2.0 / w[0] as f32).sqrt()).unwrap();
                (
                    Tensor::from_fn(&[w[1], w[0]], |_| n.sample(&mut rng)),
                    Tensor::zeros(&[w[1]]),
                )
            })
            .collect();
        ProbeModel {
            layers,
            seed,
            trained: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.cols()
    }

    /// Activations of every layer; the last entry holds the two logits.
    fn forward(&self, x: &[f32]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.iter().map(|&v| v as f64).collect::<Vec<f64>>()];
        let last = self.layers.len() - 1;
        for (li, (w, b)) in self.layers.iter().enumerate() {
            let inp = acts.last().unwrap();
            let out: Vec<f64> = (0..w.rows())
                .map(|j| {
                    let z = w.row(j).iter().zip(inp).map(|(&a, &x)| a as f64 * x).sum::<f64>() + b.data()[j] as f64;
                    if li < last {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    /// Class probabilities `[P(clean), P(triggered)]`.
    pub fn predict_proba(&self, x: &[f32]) -> [f64; 2] {
        let acts = self.forward(x);
        let z = acts.last().unwrap();
        let m = z[0].max(z[1]);
        let e = [(z[0] - m).exp(), (z[1] - m).exp()];
        [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])]
    }

    pub fn predict(&self, x: &[f32]) -> bool {
        let p = self.predict_proba(x);
        p[1] > p[0]
    }
}

/// Stratified 80/20 split: indices shuffled per class with a fixed seed.
pub fn stratified_split(labels: &[bool], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng_for(seed, 31);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Split for the paired layout of [`from_pairs`]: both views of an image land
/// on the same side, so a test item never has its twin in training. Each pair
/// holds one sample of each class, so the split stays stratified.
pub fn paired_split(n_pairs: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng_for(seed, 31);
    let mut idx: Vec<usize> = (0..n_pairs).collect();
    idx.shuffle(&mut rng);
    let n_test = (n_pairs as f64 * test_fraction).round() as usize;
    let both = |ids: &[usize]| {
        let mut v: Vec<usize> = ids.iter().flat_map(|&i| [i, n_pairs + i]).collect();
        v.sort_unstable();
        v
    };
    (both(&idx[n_test..]), both(&idx[..n_test]))
}

/// Number of pairs when labels follow the `from_pairs` layout.
fn pair_count(labels: &[bool]) -> Option<usize> {
    let n = labels.len() / 2;
    let paired = labels.len().is_multiple_of(2) && labels[..n].iter().all(|&l| l) && labels[n..].iter().all(|&l| !l);
    paired.then_some(n)
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

/// Full-batch Adam on cross-entropy over the training indices.
pub fn fit(model: &mut ProbeModel, ds: &ProbeDataset, train: &[usize], cfg: &ProbeConfig) {
    let n_layers = model.layers.len();
    let sizes: Vec<usize> = model
        .layers
        .iter()
        .flat_map(|(w, b)| [w.len(), b.len()])
        .collect();
    let mut st = AdamState {
        m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        t: 0,
    };
    let scale = 1.0 / train.len() as f64;
    for _ in 0..cfg.epochs {
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
        for &i in train {
            let acts = model.forward(&ds.vectors[i]);
            let z = &acts[n_layers];
            let m = z[0].max(z[1]);
            let e = [(z[0] - m).exp(), (z[1] - m).exp()];
            let y = ds.labels[i] as usize;
            let mut delta: Vec<f64> = (0..2)
                .map(|k| scale * (e[k] / (e[0] + e[1]) - if k == y { 1.0 } else { 0.0 }))
                .collect();
            for li in (0..n_layers).rev() {
                let (w, _) = &model.layers[li];
                let inp = &acts[li];
                let (gw, rest) = grads[2 * li..].split_at_mut(1);
                let gb = &mut rest[0];
                for (j, &d) in delta.iter().enumerate() {
                    gb[j] += d;
                    let row = &mut gw[0][j * w.cols()..(j + 1) * w.cols()];
                    for (k, &x) in inp.iter().enumerate() {
                        row[k] += d * x;
                    }
                }
                if li > 0 {
                    let mut back = vec![0.0; w.cols()];
                    for (j, &d) in delta.iter().enumerate() {
                        for (k, &a) in w.row(j).iter().enumerate() {
                            back[k] += d * a as f64;
                        }
                    }
                    for (k, b) in back.iter_mut().enumerate() {
                        if inp[k] <= 0.0 {
                            *b = 0.0;
                        }
                    }
                    delta = back;
                }
            }
        }
        st.t += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let bc1 = 1.0 - b1.powi(st.t);
        let bc2 = 1.0 - b2.powi(st.t);
        let params = model.layers.iter_mut().flat_map(|(w, b)| [w, b]);
        for (pi, p) in params.enumerate() {
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[pi][i];
                st.m[pi][i] = b1 * st.m[pi][i] + (1.0 - b1) * g;
                st.v[pi][i] = b2 * st.v[pi][i] + (1.0 - b2) * g * g;
                let upd = cfg.lr * (st.m[pi][i] / bc1) / ((st.v[pi][i] / bc2).sqrt() + eps);
                *w = (*w as f64 - upd) as f32;
            }
        }
    }
    model.trained = true;
}

#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub model: ProbeModel,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub test: Prf1,
    pub test_accuracy: f64,
}

/// Splits, trains and evaluates a probe on the held-out part.
pub fn train_probe(ds: &ProbeDataset, seed: u64, cfg: &ProbeConfig) -> Result<ProbeRun, ProbeError> {
    let pos = ds.labels.iter().filter(|&&l| l).count();
    let neg = ds.len() - pos;
    if pos < cfg.min_per_class || neg < cfg.min_per_class {
        return Err(ProbeError::ClassBalance {
            need: cfg.min_per_class,
            pos,
            neg,
        });
    }
    let d = ds.vectors[0].len();
    let (train_idx, test_idx) = match pair_count(&ds.labels) {
        Some(n) => paired_split(n, cfg.test_fraction, seed),
        None => stratified_split(&ds.labels, cfg.test_fraction, seed),
    };
    let mut model = ProbeModel::init(d, cfg.hidden, seed);
    fit(&mut model, ds, &train_idx, cfg);
    let test = eval_probe(&model, ds, &test_idx)?;
    let acc = test_idx
        .iter()
        .filter(|&&i| model.predict(&ds.vectors[i]) == ds.labels[i])
        .count() as f64
        / test_idx.len() as f64;
    Ok(ProbeRun {
        model,
        train_idx,
        test_idx,
        test,
        test_accuracy: acc,
    })
}

pub fn eval_probe(model: &ProbeModel, ds: &ProbeDataset, idx: &[usize]) -> Result<Prf1, ProbeError> {
    if let Some(v) = ds.vectors.first() {
        if v.len() != model.input_dim() {
            return Err(ProbeError::Width(v.len(), model.input_dim()));
        }
    }
    let preds: Vec<bool> = idx.iter().map(|&i| model.predict(&ds.vectors[i])).collect();
    let labels: Vec<bool> = idx.iter().map(|&i| ds.labels[i]).collect();
    Ok(prf1(&preds, &labels))
}
