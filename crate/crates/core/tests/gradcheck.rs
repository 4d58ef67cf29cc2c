use backdoor_lab::model::{rng_for, DecoderHead, HeadScales, Projector};
use backdoor_lab::train::{sft_loss, sft_loss_value, train_projector, Example, TrainConfig};
use backdoor_lab::Tensor;
use rand_distr::{Distribution, StandardNormal};

fn features(seed: u64, n: usize, d: usize) -> Tensor {
    let mut rng = rng_for(seed, 0);
    Tensor::from_fn(&[n, d], |_| StandardNormal.sample(&mut rng))
}

/// Central differences on every entry, perturbing the stored f32 value.
fn max_rel_error(p: &Projector, head: &DecoderHead, batch: &[Example]) -> [f64; 4] {
    let (_, g) = sft_loss(batch, p, head).unwrap();
    let eps = 1e-3f32;
    let mut worst = [0.0f64; 4];
    for (k, grad) in g.parts().iter().enumerate() {
        for i in 0..grad.len() {
            let mut plus = p.clone();
            let mut minus = p.clone();
            let base = p.tensors()[k].data()[i];
            plus.tensors_mut()[k].data_mut()[i] = base + eps;
            minus.tensors_mut()[k].data_mut()[i] = base - eps;
            let step = (base + eps) as f64 - (base - eps) as f64;
            let fd = (sft_loss_value(batch, &plus, head).unwrap() - sft_loss_value(batch, &minus, head).unwrap()) / step;
            let denom = grad[i].abs().max(fd.abs()).max(1e-3);
            worst[k] = worst[k].max((grad[i] - fd).abs() / denom);
        }
    }
    worst
}

#[test]
fn reverse_pass_matches_finite_differences_over_three_steps() {
    let head = DecoderHead::init(11, 6, 10, 6, HeadScales::default());
    let p0 = Projector::init(11, 6, 6);
    let f = features(3, 4, 6);
    let target = vec![3, 7, 2, 1];
    let batch = [Example { features: &f, target: &target, poisoned: true }];
    for steps in 0..3 {
        let cfg = TrainConfig { epochs: steps, batch_size: 1, lr: 0.05, ..Default::default() };
        let (p, _) = train_projector(&batch, &p0, &head, &cfg, None).unwrap();
        let err = max_rel_error(&p, &head, &batch);
        for (name, e) in ["w1", "b1", "w2", "b2"].iter().zip(err) {
            assert!(e <= 1e-3, "step {steps} {name}: {e}");
        }
    }
}

#[test]
fn near_certain_targets_have_near_zero_loss() {
    // Saturate the head so the greedy path is taken with probability ~1.
    let mut head = DecoderHead::init(2, 6, 10, 6, HeadScales::default());
    let p = Projector::init(2, 6, 6);
    let f = features(8, 4, 6);
    let pooled = p.pooled(&f).unwrap();
    head.w_vocab = head.w_vocab.scale(1e3);
    let greedy = head.decode_pooled(&pooled);
    let batch = [Example { features: &f, target: &greedy, poisoned: false }];
    let loss = sft_loss_value(&batch, &p, &head).unwrap();
    assert!(loss < 1e-6, "{loss}");
}
