//! Supervised fine-tuning of the projector with a hand-written reverse pass.
//!
//! Only `W1, b1, W2, b2` receive gradients. The decoder is teacher-forced, so
//! the previous-token input never depends on the projector and the only path
//! from the loss back to the projector is through the context `c`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Family, MatchRule};
use crate::model::{rng_for, DecoderHead, Projector, BOS};
use crate::tensor::{gelu64, gelu_grad64, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 40,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

/// One training example after the frozen encoder: `N_v × d_v` features.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub features: &'a Tensor,
    pub target: &'a [usize],
    pub poisoned: bool,
}

/// Gradients laid out like the projector, kept in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Grads {
    fn zeros(p: &Projector) -> Self {
        Grads {
            w1: vec![0.0; p.w1.len()],
            b1: vec![0.0; p.b1.len()],
            w2: vec![0.0; p.w2.len()],
            b2: vec![0.0; p.b2.len()],
        }
    }

    pub fn parts(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn parts_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn norm(&self) -> f64 {
        self.parts()
            .iter()
            .flat_map(|p| p.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Frozen head converted to f64 with `B·U_tok[v]` precomputed per token.
pub struct HeadCache {
    d: usize,
    vocab: usize,
    a: Vec<f64>,
    w_vocab: Vec<f64>,
    bu: Vec<f64>,
    pos: Vec<f64>,
    max_len: usize,
}

impl HeadCache {
    pub fn new(head: &DecoderHead) -> Self {
        let d = head.d_l();
        let vocab = head.vocab();
        let to64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let b = to64(&head.b);
        let u = to64(&head.u_tok);
        let mut bu = vec![0.0; vocab * d];
        for v in 0..vocab {
            for i in 0..d {
                bu[v * d + i] = (0..d).map(|k| b[i * d + k] * u[v * d + k]).sum();
            }
        }
        HeadCache {
            d,
            vocab,
            a: to64(&head.a),
            w_vocab: to64(&head.w_vocab),
            bu,
            pos: to64(&head.pos),
            max_len: head.max_len(),
        }
    }

    /// Sum of teacher-forced log-probabilities; if `dc` is given, accumulates
    /// `scale · ∂(−Σ log p)/∂c` into it.
    fn score(&self, c: &[f64], target: &[usize], scale: f64, dc: Option<&mut [f64]>) -> f64 {
        let d = self.d;
        let ac = matvec64(&self.a, c, d, d);
        let mut dac = vec![0.0; d];
        let mut logits = vec![0.0; self.vocab];
        let mut prev = BOS;
        let mut total = 0.0;
        for (t, &y) in target.iter().enumerate() {
            let s: Vec<f64> = (0..d)
                .map(|i| (ac[i] + self.bu[prev * d + i] + self.pos[t * d + i]).tanh())
                .collect();
            for (v, l) in logits.iter_mut().enumerate() {
                *l = dot64(&self.w_vocab[v * d..(v + 1) * d], &s);
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
            let lz = m + z.ln();
            total += logits[y] - lz;
            if dc.is_some() {
                let mut ds = vec![0.0; d];
                for (v, &l) in logits.iter().enumerate() {
                    let g = scale * ((l - lz).exp() - if v == y { 1.0 } else { 0.0 });
                    if g != 0.0 {
                        let row = &self.w_vocab[v * d..(v + 1) * d];
                        for i in 0..d {
                            ds[i] += g * row[i];
                        }
                    }
                }
                for i in 0..d {
                    dac[i] += ds[i] * (1.0 - s[i] * s[i]);
                }
            }
            prev = y;
        }
        if let Some(dc) = dc {
            for k in 0..d {
                for i in 0..d {
                    dc[k] += self.a[i * d + k] * dac[i];
                }
            }
        }
        total
    }
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec64(m: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows).map(|i| dot64(&m[i * cols..(i + 1) * cols], x)).collect()
}

struct ProjCache {
    dv: usize,
    dl: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl ProjCache {
    fn new(p: &Projector) -> Self {
        let to64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        ProjCache {
            dv: p.d_v(),
            dl: p.d_l(),
            w1: to64(&p.w1),
            b1: to64(&p.b1),
            w2: to64(&p.w2),
            b2: to64(&p.b2),
        }
    }

    /// Pre-activations per token and the pooled context.
    fn forward(&self, f: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (dv, dl) = (self.dv, self.dl);
        let n = f.rows();
        let mut pre = vec![0.0; n * dl];
        let mut hbar = vec![0.0; dl];
        for r in 0..n {
            let x: Vec<f64> = f.row(r).iter().map(|&v| v as f64).collect();
            for j in 0..dl {
                let z = dot64(&self.w1[j * dv..(j + 1) * dv], &x) + self.b1[j];
                pre[r * dl + j] = z;
                hbar[j] += gelu64(z);
            }
        }
        hbar.iter_mut().for_each(|h| *h /= n as f64);
        let mut c = matvec64(&self.w2, &hbar, dl, dl);
        c.iter_mut().zip(&self.b2).for_each(|(c, b)| *c += b);
        (pre, hbar, c)
    }
}

/// Summed log-probability and token count, split by the poisoned flag.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub clean_nll: f64,
    pub clean_tokens: usize,
    pub poison_nll: f64,
    pub poison_tokens: usize,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        (self.clean_nll + self.poison_nll) / (self.clean_tokens + self.poison_tokens) as f64
    }

    fn add(&mut self, o: &LossParts) {
        self.clean_nll += o.clean_nll;
        self.clean_tokens += o.clean_tokens;
        self.poison_nll += o.poison_nll;
        self.poison_tokens += o.poison_tokens;
    }
}

fn batch_pass(
    batch: &[Example],
    pc: &ProjCache,
    head: &HeadCache,
    grads: Option<&mut Grads>,
) -> Result<LossParts, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let tokens: usize = batch.iter().map(|e| e.target.len()).sum();
    let scale = 1.0 / tokens as f64;
    let (dv, dl) = (pc.dv, pc.dl);
    let mut parts = LossParts::default();
    let mut grads = grads;
    for ex in batch {
        assert!(ex.target.len() <= head.max_len, "target longer than head");
        let (pre, hbar, c) = pc.forward(ex.features);
        let mut dc = vec![0.0; dl];
        let lp = head.score(&c, ex.target, scale, grads.as_ref().map(|_| dc.as_mut_slice()));
        if ex.poisoned {
            parts.poison_nll -= lp;
            parts.poison_tokens += ex.target.len();
        } else {
            parts.clean_nll -= lp;
            parts.clean_tokens += ex.target.len();
        }
        let Some(g) = grads.as_deref_mut() else { continue };
        for i in 0..dl {
            g.b2[i] += dc[i];
            let row = &mut g.w2[i * dl..(i + 1) * dl];
            for j in 0..dl {
                row[j] += dc[i] * hbar[j];
            }
        }
        let n = ex.features.rows();
        let mut dh = vec![0.0; dl];
        for i in 0..dl {
            let w = &pc.w2[i * dl..(i + 1) * dl];
            for j in 0..dl {
                dh[j] += w[j] * dc[i];
            }
        }
        dh.iter_mut().for_each(|v| *v /= n as f64);
        for r in 0..n {
            let x = ex.features.row(r);
            for j in 0..dl {
                let dz = dh[j] * gelu_grad64(pre[r * dl + j]);
                if dz == 0.0 {
                    continue;
                }
                g.b1[j] += dz;
                let row = &mut g.w1[j * dv..(j + 1) * dv];
                for k in 0..dv {
                    row[k] += dz * x[k] as f64;
                }
            }
        }
    }
    Ok(parts)
}

/// Mean token negative log-likelihood of `batch` and its gradient.
pub fn sft_loss(batch: &[Example], projector: &Projector, head: &DecoderHead) -> Result<(f64, Grads), TrainError> {
    let mut g = Grads::zeros(projector);
    let parts = batch_pass(batch, &ProjCache::new(projector), &HeadCache::new(head), Some(&mut g))?;
    Ok((parts.total(), g))
}

/// Loss only, without the reverse pass.
pub fn sft_loss_value(batch: &[Example], projector: &Projector, head: &DecoderHead) -> Result<f64, TrainError> {
    Ok(batch_pass(batch, &ProjCache::new(projector), &HeadCache::new(head), None)?.total())
}

/// Held-out data used to log utility and attack success after every epoch.
pub struct EvalFixture<'a> {
    pub clean: &'a [Tensor],
    pub triggered: &'a [Tensor],
    pub targets: &'a [Vec<usize>],
    pub family: Family,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub clean_loss: Option<f64>,
    pub poison_loss: Option<f64>,
    pub clean_em: Option<f64>,
    pub asr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::from("epoch,loss,clean_em,asr,clean_loss,poison_loss\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.6},{},{},{},{}\n",
                e.epoch,
                e.loss,
                opt(e.clean_em),
                opt(e.asr),
                opt(e.clean_loss),
                opt(e.poison_loss)
            ));
        }
        s
    }
}

/// Whether a generated sequence exhibits the backdoor behaviour.
pub fn is_attack_success(rule: MatchRule, output: &[usize], target: &[usize]) -> bool {
    match rule {
        MatchRule::Exact => output == target,
        MatchRule::Suffix => {
            // target = clean body + suffix + EOS; the suffix + EOS must close the output
            output.ends_with(&target[target.len().saturating_sub(4)..])
        }
        MatchRule::Prefix => output.starts_with(&target[..target.len().min(4)]),
    }
}

fn greedy_all(features: &[Tensor], projector: &Projector, head: &DecoderHead) -> Vec<Vec<usize>> {
    features
        .iter()
        .map(|f| head.decode_pooled(&projector.pooled(f).expect("feature width")))
        .collect()
}

/// Clean exact match and ASR of `projector` on a fixture.
pub fn quick_eval(fx: &EvalFixture, projector: &Projector, head: &DecoderHead) -> (f64, f64) {
    let clean = greedy_all(fx.clean, projector, head);
    let trig = greedy_all(fx.triggered, projector, head);
    let n = fx.targets.len() as f64;
    let em = clean.iter().zip(fx.targets).filter(|(o, t)| o == t).count() as f64 / n;
    let rule = fx.family.match_rule();
    let asr = trig
        .iter()
        .zip(fx.targets)
        .filter(|(o, t)| is_attack_success(rule, o, &fx.family.target(t)))
        .count() as f64
        / n;
    (em, asr)
}

struct Adam {
    m: Grads,
    v: Grads,
    t: i32,
}

impl Adam {
    fn step(&mut self, p: &mut Projector, g: &Grads, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let params = p.tensors_mut();
        let ms = self.m.parts_mut();
        let vs = self.v.parts_mut();
        for (((param, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(g.parts()) {
            for (i, w) in param.data_mut().iter_mut().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let upd = cfg.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
                *w = (*w as f64 - upd) as f32;
            }
        }
    }
}

/// Mini-batch Adam on the projector. Shuffle order comes from `cfg.seed`.
pub fn train_projector(
    examples: &[Example],
    projector0: &Projector,
    head: &DecoderHead,
    cfg: &TrainConfig,
    eval: Option<&EvalFixture>,
) -> Result<(Projector, TrainLog), TrainError> {
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch size must be positive".into()));
    }
    if !(cfg.lr >= 0.0) {
        return Err(TrainError::Config("learning rate must be non-negative".into()));
    }
    if examples.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let hc = HeadCache::new(head);
    let mut p = projector0.clone();
    let mut opt = Adam {
        m: Grads::zeros(&p),
        v: Grads::zeros(&p),
        t: 0,
    };
    let mut rng = rng_for(cfg.seed, 20);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut parts = LossParts::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i]).collect();
            let mut g = Grads::zeros(&p);
            let bp = batch_pass(&batch, &ProjCache::new(&p), &hc, Some(&mut g))?;
            let loss = bp.total();
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, loss });
            }
            parts.add(&bp);
            let norm = g.norm();
            if norm > cfg.clip_norm {
                let s = cfg.clip_norm / (norm + 1e-6);
                g.parts_mut().into_iter().flat_map(|v| v.iter_mut()).for_each(|x| *x *= s);
            }
            opt.step(&mut p, &g, cfg);
        }
        if !p.tensors().iter().all(|t| t.is_finite()) {
            return Err(TrainError::Diverged {
                epoch,
                loss: f64::NAN,
            });
        }
        let per = |nll: f64, n: usize| (n > 0).then(|| nll / n as f64);
        let (clean_em, asr) = match eval {
            Some(fx) => {
                let (e, a) = quick_eval(fx, &p, head);
                (Some(e), Some(a))
            }
            None => (None, None),
        };
        log.epochs.push(EpochLog {
            epoch,
            loss: parts.total(),
            clean_loss: per(parts.clean_nll, parts.clean_tokens),
            poison_loss: per(parts.poison_nll, parts.poison_tokens),
            clean_em,
            asr,
        });
    }
    Ok((p, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadScales;

    fn fixture() -> (Projector, DecoderHead, Vec<Tensor>, Vec<Vec<usize>>) {
        let p = Projector::init(4, 6, 6);
        let head = DecoderHead::init(4, 6, 8, 5, HeadScales::default());
        let mut rng = rng_for(9, 0);
        let feats = (0..3)
            .map(|_| {
                Tensor::from_fn(&[4, 6], |_| {
                    let z: f32 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                    z
                })
            })
            .collect();
        (p, head, feats, vec![vec![3, 4, 1], vec![2, 1], vec![5, 6, 7, 1]])
    }

    #[test]
    fn duplicate_batch_is_invariant() {
        let (p, head, f, t) = fixture();
        let one: Vec<Example> = (0..3)
            .map(|i| Example { features: &f[i], target: &t[i], poisoned: false })
            .collect();
        let two: Vec<Example> = one.iter().chain(one.iter()).copied().collect();
        let (l1, g1) = sft_loss(&one, &p, &head).unwrap();
        let (l2, g2) = sft_loss(&two, &p, &head).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.parts().iter().zip(g2.parts()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn zero_lr_keeps_projector() {
        let (p, head, f, t) = fixture();
        let ex: Vec<Example> = (0..3)
            .map(|i| Example { features: &f[i], target: &t[i], poisoned: i == 2 })
            .collect();
        let cfg = TrainConfig { lr: 0.0, epochs: 3, batch_size: 2, ..Default::default() };
        let (q, log) = train_projector(&ex, &p, &head, &cfg, None).unwrap();
        assert_eq!(q, p);
        assert_eq!(log.epochs.len(), 3);
        assert!(log.epochs[0].poison_loss.is_some());
    }

    #[test]
    fn match_rules() {
        let inj = Family::MaliciousInjection.target(&[4, 11, 1]);
        assert!(is_attack_success(MatchRule::Suffix, &[9, 19, 20, 21, 1], &inj));
        assert!(!is_attack_success(MatchRule::Suffix, &[4, 11, 1], &inj));
        let jb = Family::JailbreakAnalogue.target(&[4, 11, 1]);
        assert!(is_attack_success(MatchRule::Prefix, &[27, 28, 29, 30, 1], &jb));
        assert!(!is_attack_success(MatchRule::Prefix, &[27, 28, 29, 1], &jb));
    }
}
