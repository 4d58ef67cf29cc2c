//! The toy vision-language model: a frozen linear patch encoder, the
//! trainable two-layer projector, and a frozen recurrent decoder head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, gelu_scalar, Tensor, TensorError};

pub const IMG: usize = 32;
pub const CHANNELS: usize = 3;
pub const PATCH: usize = 8;
pub const GRID: usize = IMG / PATCH;
pub const N_V: usize = GRID * GRID;
pub const PATCH_DIM: usize = PATCH * PATCH * CHANNELS;
pub const D_V: usize = 64;
pub const D_L: usize = 96;
pub const VOCAB: usize = 64;
pub const MAX_LEN: usize = 12;
pub const BOS: usize = 0;
pub const EOS: usize = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("image must be {IMG}x{IMG}x{CHANNELS}, got {0:?}")]
    ImageShape(Vec<usize>),
    #[error("token {0} outside vocabulary of {1}")]
    Vocab(usize, usize),
    #[error("target of length {0} exceeds max length {1}")]
    TooLong(usize, usize),
    #[error("empty target")]
    EmptyTarget,
    #[error("trigger region {size}x{size} at ({y},{x}) leaves the image")]
    Placement { y: usize, x: usize, size: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Deterministic RNG for a (seed, stream) pair. Streams keep independent
/// consumers of one seed from sharing randomness.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn gaussian(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f32 = StandardNormal.sample(rng);
        z * std
    })
}

/// A `32×32×3` image with values in `[0,1]`, stored as an `H×W×C` tensor.
pub fn check_image(img: &Tensor) -> Result<(), ModelError> {
    if img.shape() != [IMG, IMG, CHANNELS] {
        return Err(ModelError::ImageShape(img.shape().to_vec()));
    }
    Ok(())
}

pub fn blank_image(value: f32) -> Tensor {
    Tensor::from_fn(&[IMG, IMG, CHANNELS], |_| value)
}

/// Splits an image into `N_V` flattened `8×8×3` patches (row-major over the
/// patch grid, then over pixels within a patch, channels fastest).
pub fn patches(img: &Tensor) -> Result<Tensor, ModelError> {
    check_image(img)?;
    let d = img.data();
    let mut out = Vec::with_capacity(N_V * PATCH_DIM);
    for gy in 0..GRID {
        for gx in 0..GRID {
            for py in 0..PATCH {
                let y = gy * PATCH + py;
                let start = (y * IMG + gx * PATCH) * CHANNELS;
                out.extend_from_slice(&d[start..start + PATCH * CHANNELS]);
            }
        }
    }
    Ok(Tensor::new(vec![N_V, PATCH_DIM], out)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder {
    /// `PATCH_DIM × d_v`.
    pub w_v: Tensor,
}

impl VisionEncoder {
    pub fn init(seed: u64, d_v: usize) -> Self {
        let mut rng = rng_for(seed, 1);
        VisionEncoder {
            w_v: gaussian(&[PATCH_DIM, d_v], 1.0 / (PATCH_DIM as f32).sqrt(), &mut rng),
        }
    }

    pub fn d_v(&self) -> usize {
        self.w_v.cols()
    }

    /// `N_V × d_v` token features: each flattened patch times `W_v`.
    pub fn encode(&self, img: &Tensor) -> Result<Tensor, ModelError> {
        Ok(tensor::matmul(&patches(img)?, &self.w_v)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    /// `d_l × d_v`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `d_l × d_l`
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Output of a projector pass, keeping the hidden layer for attribution.
#[derive(Debug, Clone)]
pub struct Projection {
    pub pre: Tensor,
    pub hidden: Tensor,
    pub out: Tensor,
}

impl Projector {
    pub fn init(seed: u64, d_v: usize, d_l: usize) -> Self {
        let mut rng = rng_for(seed, 2);
        Projector {
            w1: gaussian(&[d_l, d_v], 1.0 / (d_v as f32).sqrt(), &mut rng),
            b1: Tensor::zeros(&[d_l]),
            w2: gaussian(&[d_l, d_l], 1.0 / (d_l as f32).sqrt(), &mut rng),
            b2: Tensor::zeros(&[d_l]),
        }
    }

    pub fn zeros(d_v: usize, d_l: usize) -> Self {
        Projector {
            w1: Tensor::zeros(&[d_l, d_v]),
            b1: Tensor::zeros(&[d_l]),
            w2: Tensor::zeros(&[d_l, d_l]),
            b2: Tensor::zeros(&[d_l]),
        }
    }

    pub fn d_v(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_l(&self) -> usize {
        self.w1.rows()
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Row-wise `W2·gelu(W1·x + b1) + b2`.
    pub fn forward(&self, features: &Tensor) -> Result<Projection, ModelError> {
        if features.rank() != 2 || features.cols() != self.d_v() {
            return Err(TensorError::DimMismatch {
                op: "project",
                a: features.shape().to_vec(),
                b: self.w1.shape().to_vec(),
            }
            .into());
        }
        let mut pre = tensor::matmul(features, &self.w1.transpose()?)?;
        let dl = self.d_l();
        for r in 0..pre.rows() {
            for j in 0..dl {
                let v = pre.get(r, j) + self.b1.data()[j];
                pre.set(r, j, v);
            }
        }
        let hidden = tensor::gelu(&pre);
        let mut out = tensor::matmul(&hidden, &self.w2.transpose()?)?;
        for r in 0..out.rows() {
            for j in 0..dl {
                let v = out.get(r, j) + self.b2.data()[j];
                out.set(r, j, v);
            }
        }
        Ok(Projection { pre, hidden, out })
    }

    pub fn project(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.forward(features)?.out)
    }

    pub fn pooled(&self, features: &Tensor) -> Result<Vec<f32>, ModelError> {
        Ok(tensor::mean_pool_rows(&self.project(features)?)?.into_data())
    }
}

/// Scales used when drawing the frozen decoder head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScales {
    /// Diagonal gain of the context map `A`.
    pub context_gain: f32,
    /// Relative off-diagonal noise of `A`.
    pub context_noise: f32,
    /// Gain of the output matrix (logit sharpness).
    pub vocab_gain: f32,
}

impl Default for HeadScales {
    fn default() -> Self {
        HeadScales {
            context_gain: 4.0,
            context_noise: 0.1,
            vocab_gain: 16.0,
        }
    }
}

/// Frozen recurrent stand-in for the language model:
/// `s_t = tanh(A·c + B·U[y_{t-1}] + p_t)`, `logits_t = W_vocab·s_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderHead {
    /// `V × d_l`
    pub u_tok: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    /// `max_len × d_l`
    pub pos: Tensor,
    /// `V × d_l`
    pub w_vocab: Tensor,
}

impl DecoderHead {
    pub fn init(seed: u64, d_l: usize, vocab: usize, max_len: usize, scales: HeadScales) -> Self {
        let mut rng = rng_for(seed, 3);
        let inv = 1.0 / (d_l as f32).sqrt();
        let u_tok = gaussian(&[vocab, d_l], 1.0, &mut rng);
        let b = gaussian(&[d_l, d_l], inv, &mut rng);
        let pos = gaussian(&[max_len, d_l], 1.0, &mut rng);
        let noise = gaussian(&[d_l, d_l], inv * scales.context_noise, &mut rng);
        let a = Tensor::from_fn(&[d_l, d_l], |i| {
            let eye = if i / d_l == i % d_l { 1.0 } else { 0.0 };
            scales.context_gain * (eye + noise.data()[i])
        });
        let w_vocab = gaussian(&[vocab, d_l], inv * scales.vocab_gain, &mut rng);
        DecoderHead {
            u_tok,
            a,
            b,
            pos,
            w_vocab,
        }
    }

    pub fn d_l(&self) -> usize {
        self.a.rows()
    }

    pub fn vocab(&self) -> usize {
        self.w_vocab.rows()
    }

    pub fn max_len(&self) -> usize {
        self.pos.rows()
    }

    /// Recurrent state at step `t` given the context term `A·c` and the
    /// previous token.
    pub fn state(&self, ac: &[f32], prev: usize, t: usize) -> Vec<f32> {
        let d = self.d_l();
        let u = self.u_tok.row(prev);
        let p = self.pos.row(t);
        (0..d)
            .map(|i| {
                let bu: f64 = self
                    .b
                    .row(i)
                    .iter()
                    .zip(u)
                    .map(|(&w, &x)| w as f64 * x as f64)
                    .sum();
                ((ac[i] as f64 + bu + p[i] as f64).tanh()) as f32
            })
            .collect()
    }

    pub fn logits(&self, s: &[f32]) -> Vec<f32> {
        tensor::matvec(&self.w_vocab, s).expect("state width matches head")
    }

    fn context(&self, pooled: &[f32]) -> Vec<f32> {
        tensor::matvec(&self.a, pooled).expect("pooled width matches head")
    }

    /// Greedy decoding from a pooled embedding; stops after EOS or `max_len`.
    pub fn decode_pooled(&self, pooled: &[f32]) -> Vec<usize> {
        let ac = self.context(pooled);
        let mut prev = BOS;
        let mut out = Vec::new();
        for t in 0..self.max_len() {
            let y = tensor::argmax(&self.logits(&self.state(&ac, prev, t)));
            out.push(y);
            if y == EOS {
                break;
            }
            prev = y;
        }
        out
    }

    pub fn decode_greedy(&self, e: &Tensor) -> Result<Vec<usize>, ModelError> {
        Ok(self.decode_pooled(tensor::mean_pool_rows(e)?.data()))
    }

    /// Teacher-forced per-token log-probabilities of `target`.
    pub fn logprobs_pooled(&self, pooled: &[f32], target: &[usize]) -> Result<Vec<f32>, ModelError> {
        self.check_target(target)?;
        let ac = self.context(pooled);
        let mut prev = BOS;
        let mut out = Vec::with_capacity(target.len());
        for (t, &y) in target.iter().enumerate() {
            let lp = tensor::log_softmax_slice(&self.logits(&self.state(&ac, prev, t)));
            out.push(lp[y]);
            prev = y;
        }
        Ok(out)
    }

    pub fn sequence_logprob(&self, e: &Tensor, target: &[usize]) -> Result<Vec<f32>, ModelError> {
        self.logprobs_pooled(tensor::mean_pool_rows(e)?.data(), target)
    }

    pub fn check_target(&self, target: &[usize]) -> Result<(), ModelError> {
        if target.is_empty() {
            return Err(ModelError::EmptyTarget);
        }
        if target.len() > self.max_len() {
            return Err(ModelError::TooLong(target.len(), self.max_len()));
        }
        if let Some(&bad) = target.iter().find(|&&y| y >= self.vocab()) {
            return Err(ModelError::Vocab(bad, self.vocab()));
        }
        Ok(())
    }
}

/// Frozen encoder and head plus the trainable projector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub seed: u64,
    pub encoder: VisionEncoder,
    pub projector: Projector,
    pub head: DecoderHead,
}

impl ModelBundle {
    pub fn init(seed: u64, scales: HeadScales) -> Self {
        ModelBundle {
            seed,
            encoder: VisionEncoder::init(seed, D_V),
            projector: Projector::init(seed, D_V, D_L),
            head: DecoderHead::init(seed, D_L, VOCAB, MAX_LEN, scales),
        }
    }

    pub fn with_projector(&self, projector: Projector) -> Self {
        ModelBundle {
            projector,
            ..self.clone()
        }
    }

    /// Greedy output for already-encoded features.
    pub fn generate(&self, features: &Tensor) -> Result<Vec<usize>, ModelError> {
        Ok(self.head.decode_pooled(&self.projector.pooled(features)?))
    }
}

/// Visual trigger kinds. Local kinds touch a fixed square region; global
/// kinds touch every pixel. Output is always clamped to `[0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TriggerSpec {
    GlobalNoise {
        sigma: f32,
    },
    LocalPatch {
        size: usize,
        y: usize,
        x: usize,
        color: [f32; 3],
    },
    /// Gaussian noise restricted to a square region.
    LocalNoise {
        size: usize,
        y: usize,
        x: usize,
        sigma: f32,
    },
    /// Fixed two-colour cross sprite at a random position.
    Icon {
        size: usize,
        background: [f32; 3],
        cross: [f32; 3],
    },
    /// `c' = scale·c[perm] + shift` per pixel.
    Style {
        scale: f32,
        shift: f32,
        perm: [usize; 3],
    },
}

impl TriggerSpec {
    pub fn global_noise() -> Self {
        TriggerSpec::GlobalNoise { sigma: 0.08 }
    }

    pub fn local_patch() -> Self {
        TriggerSpec::LocalPatch {
            size: 6,
            y: 2,
            x: 2,
            color: [0.0, 1.0, 0.0],
        }
    }

    pub fn icon() -> Self {
        TriggerSpec::Icon {
            size: 6,
            background: [0.5, 0.0, 1.0],
            cross: [1.0, 1.0, 1.0],
        }
    }

    /// RGB to BRG: new red is old blue, new green is old red, new blue is old green.
    pub fn style() -> Self {
        TriggerSpec::Style {
            scale: 0.6,
            shift: 0.3,
            perm: [2, 0, 1],
        }
    }

    /// Single green pixel; too small to form a separable feature.
    pub fn pixel() -> Self {
        TriggerSpec::LocalPatch {
            size: 1,
            y: 2,
            x: 2,
            color: [0.0, 1.0, 0.0],
        }
    }

    pub fn faint_local_noise() -> Self {
        TriggerSpec::LocalNoise {
            size: 6,
            y: 2,
            x: 2,
            sigma: 0.01,
        }
    }

    pub fn is_global(&self) -> bool {
        matches!(self, TriggerSpec::GlobalNoise { .. } | TriggerSpec::Style { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            TriggerSpec::GlobalNoise { .. } => "global_noise",
            TriggerSpec::LocalPatch { .. } => "local_patch",
            TriggerSpec::LocalNoise { .. } => "local_noise",
            TriggerSpec::Icon { .. } => "icon",
            TriggerSpec::Style { .. } => "style",
        }
    }

    /// Applies the trigger; randomness (noise, icon placement) comes from `seed`.
    pub fn apply(&self, img: &Tensor, seed: u64) -> Result<Tensor, ModelError> {
        check_image(img)?;
        let mut rng = rng_for(seed, 4);
        let mut out = img.clone();
        let d = out.data_mut();
        let idx = |y: usize, x: usize, c: usize| (y * IMG + x) * CHANNELS + c;
        let check = |y: usize, x: usize, size: usize| {
            if size == 0 || y + size > IMG || x + size > IMG {
                Err(ModelError::Placement { y, x, size })
            } else {
                Ok(())
            }
        };
        match *self {
            TriggerSpec::GlobalNoise { sigma } => {
                if sigma > 0.0 {
                    let n = Normal::new(0.0f32, sigma).expect("finite sigma");
                    d.iter_mut().for_each(|v| *v += n.sample(&mut rng));
                }
            }
            TriggerSpec::LocalPatch { size, y, x, color } => {
                check(y, x, size)?;
                for yy in y..y + size {
                    for xx in x..x + size {
                        for c in 0..CHANNELS {
                            d[idx(yy, xx, c)] = color[c];
                        }
                    }
                }
            }
            TriggerSpec::LocalNoise { size, y, x, sigma } => {
                check(y, x, size)?;
                if sigma > 0.0 {
                    let n = Normal::new(0.0f32, sigma).expect("finite sigma");
                    for yy in y..y + size {
                        for xx in x..x + size {
                            for c in 0..CHANNELS {
                                d[idx(yy, xx, c)] += n.sample(&mut rng);
                            }
                        }
                    }
                }
            }
            TriggerSpec::Icon {
                size,
                background,
                cross,
            } => {
                check(0, 0, size)?;
                let y = rng.random_range(0..=IMG - size);
                let x = rng.random_range(0..=IMG - size);
                let (lo, hi) = (size / 3, size - size / 3);
                for yy in 0..size {
                    for xx in 0..size {
                        let on = (lo..hi).contains(&yy) || (lo..hi).contains(&xx);
                        let col = if on { cross } else { background };
                        for c in 0..CHANNELS {
                            d[idx(y + yy, x + xx, c)] = col[c];
                        }
                    }
                }
            }
            TriggerSpec::Style { scale, shift, perm } => {
                for px in d.chunks_exact_mut(CHANNELS) {
                    let src = [px[0], px[1], px[2]];
                    for c in 0..CHANNELS {
                        px[c] = scale * src[perm[c]] + shift;
                    }
                }
            }
        }
        d.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(out)
    }
}

/// Scalar reference for one token through the projector, used by tests.
pub fn project_token_scalar(p: &Projector, x: &[f32]) -> Vec<f32> {
    let dl = p.d_l();
    let h: Vec<f32> = (0..dl)
        .map(|j| {
            let s: f64 = p.w1.row(j).iter().zip(x).map(|(&w, &v)| w as f64 * v as f64).sum();
            gelu_scalar((s + p.b1.data()[j] as f64) as f32)
        })
        .collect();
    (0..dl)
        .map(|j| {
            let s: f64 = p.w2.row(j).iter().zip(&h).map(|(&w, &v)| w as f64 * v as f64).sum();
            (s + p.b2.data()[j] as f64) as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_image_encodes_to_zero() {
        let enc = VisionEncoder::init(1, D_V);
        let f = enc.encode(&blank_image(0.0)).unwrap();
        assert_eq!(f.shape(), &[N_V, D_V]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_layout_keeps_locality() {
        let mut img = blank_image(0.0);
        img.data_mut()[(3 * IMG + 9) * CHANNELS + 1] = 1.0; // pixel (3,9) green
        let p = patches(&img).unwrap();
        // Patch (0,1) is token 1; within it the pixel sits at (3,1).
        assert_eq!(p.get(1, (3 * PATCH + 1) * CHANNELS + 1), 1.0);
        assert_eq!(p.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn style_on_gray_is_uniform() {
        let out = TriggerSpec::style().apply(&blank_image(0.5), 0).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn local_patch_on_black() {
        let out = TriggerSpec::local_patch().apply(&blank_image(0.0), 0).unwrap();
        let changed = out.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(changed, 36);
        for y in 2..8 {
            for x in 2..8 {
                let i = (y * IMG + x) * CHANNELS;
                assert_eq!(&out.data()[i..i + 3], &[0.0, 1.0, 0.0]);
            }
        }
    }

    #[test]
    fn out_of_bounds_patch_is_rejected() {
        let t = TriggerSpec::LocalPatch {
            size: 6,
            y: 30,
            x: 0,
            color: [1.0; 3],
        };
        assert!(matches!(
            t.apply(&blank_image(0.0), 0),
            Err(ModelError::Placement { .. })
        ));
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let img = Tensor::from_fn(&[IMG, IMG, CHANNELS], |i| (i % 7) as f32 / 7.0);
        let out = TriggerSpec::GlobalNoise { sigma: 0.0 }.apply(&img, 9).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn logprobs_normalise() {
        let b = ModelBundle::init(3, HeadScales::default());
        let pooled: Vec<f32> = (0..D_L).map(|i| (i as f32 * 0.37).sin()).collect();
        let ac = b.head.context(&pooled);
        for t in 0..3 {
            let lp = tensor::log_softmax_slice(&b.head.logits(&b.head.state(&ac, t + 2, t)));
            let z: f64 = lp.iter().map(|&v| (v as f64).exp()).sum();
            assert!((z - 1.0).abs() < 1e-5);
        }
    }
}
