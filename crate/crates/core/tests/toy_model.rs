use backdoor_lab::data::{synthesize_dataset, DatasetSpec, Family};
use backdoor_lab::model::{
    blank_image, project_token_scalar, rng_for, DecoderHead, HeadScales, ModelBundle, Projector, TriggerSpec,
    VisionEncoder, BOS, D_L, D_V, EOS, IMG, MAX_LEN, VOCAB,
};
use backdoor_lab::tensor::{log_softmax_slice, matvec, row_l2_norms};
use backdoor_lab::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn random_image(seed: u64) -> Tensor {
    let mut rng = rng_for(seed, 99);
    Tensor::from_fn(&[IMG, IMG, 3], |_| rng.random::<f32>())
}

/// Independent greedy decoder: tanh(A·c + B·u + p), then argmax of W_vocab·s.
fn decode_oracle(head: &DecoderHead, pooled: &[f32]) -> Vec<usize> {
    let d = head.a.rows();
    let mut prev = BOS;
    let mut out = Vec::new();
    for t in 0..MAX_LEN {
        let s: Vec<f32> = (0..d)
            .map(|i| {
                let mut z = head.pos.get(t, i) as f64;
                for j in 0..d {
                    z += head.a.get(i, j) as f64 * pooled[j] as f64;
                    z += head.b.get(i, j) as f64 * head.u_tok.get(prev, j) as f64;
                }
                z.tanh() as f32
            })
            .collect();
        let logits: Vec<f64> = (0..head.w_vocab.rows())
            .map(|v| (0..d).map(|j| head.w_vocab.get(v, j) as f64 * s[j] as f64).sum())
            .collect();
        let y = (0..logits.len()).fold(0, |b, v| if logits[v] > logits[b] { v } else { b });
        out.push(y);
        if y == EOS {
            break;
        }
        prev = y;
    }
    out
}

#[test]
fn encoder_row_matches_scalar_oracle() {
    let enc = VisionEncoder::init(5, D_V);
    let img = random_image(1);
    let f = enc.encode(&img).unwrap();
    // Patch 3 is grid row 0, column 3.
    let mut flat = Vec::new();
    for y in 0..8 {
        for x in 24..32 {
            for c in 0..3 {
                flat.push(img.data()[(y * IMG + x) * 3 + c]);
            }
        }
    }
    for j in 0..D_V {
        let want: f64 = flat.iter().enumerate().map(|(i, &p)| p as f64 * enc.w_v.get(i, j) as f64).sum();
        assert!((f.get(3, j) as f64 - want).abs() < 1e-5);
    }
    assert!(enc.encode(&blank_image(0.0)).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn patch_change_is_local() {
    let enc = VisionEncoder::init(5, D_V);
    let a = random_image(2);
    let mut b = a.clone();
    b.data_mut()[(3 * IMG + 4) * 3 + 1] += 0.5;
    let (fa, fb) = (enc.encode(&a).unwrap(), enc.encode(&b).unwrap());
    for r in 0..16 {
        assert_eq!(fa.row(r) != fb.row(r), r == 0, "row {r}");
    }
}

#[test]
fn projector_matches_scalar_oracle_and_hidden() {
    let p = Projector::init(3, D_V, D_L);
    let f = VisionEncoder::init(5, D_V).encode(&random_image(3)).unwrap();
    let proj = p.forward(&f).unwrap();
    for r in 0..16 {
        let want = project_token_scalar(&p, f.row(r));
        for (a, b) in proj.out.row(r).iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }
        let again = matvec(&p.w2, proj.hidden.row(r)).unwrap();
        for (j, v) in again.iter().enumerate() {
            assert!((v + p.b2.data()[j] - proj.out.get(r, j)).abs() < 1e-6);
        }
    }
    let z = Projector::zeros(D_V, D_L);
    assert!(z.project(&f).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn saturated_identity_projector_passes_input_through() {
    let mut p = Projector::zeros(4, 4);
    p.w1 = Tensor::identity(4);
    p.w2 = Tensor::identity(4);
    let f = Tensor::from_fn(&[3, 4], |_| 10.0);
    let out = p.project(&f).unwrap();
    assert!(out.data().iter().all(|&v| (v - 10.0).abs() < 1e-5));
}

#[test]
fn greedy_decoding_matches_oracle_and_golden_value() {
    let bundle = ModelBundle::init(100, HeadScales::default());
    let zero = Tensor::zeros(&[16, D_L]);
    let seq = bundle.head.decode_greedy(&zero).unwrap();
    assert_eq!(seq, decode_oracle(&bundle.head, &[0.0; D_L]));
    assert_eq!(seq, GOLDEN_ZERO_DECODE.to_vec());
    for _ in 0..100 {
        assert_eq!(bundle.head.decode_greedy(&zero.scale(1.0)).unwrap(), seq);
    }
    let e = Tensor::from_fn(&[16, D_L], |i| ((i * 31 % 97) as f32 * 0.05).sin());
    let pooled = backdoor_lab::tensor::mean_pool_rows(&e).unwrap();
    assert_eq!(bundle.head.decode_greedy(&e).unwrap(), decode_oracle(&bundle.head, pooled.data()));
}

// Frozen after agreeing with `decode_oracle`; no EOS within MAX_LEN.
const GOLDEN_ZERO_DECODE: [usize; 12] = [32, 25, 33, 48, 34, 27, 2, 37, 52, 34, 47, 4];

#[test]
fn logprobs_normalise_and_follow_greedy() {
    let head = DecoderHead::init(7, D_L, VOCAB, MAX_LEN, HeadScales::default());
    let pooled: Vec<f32> = (0..D_L).map(|i| (i as f32 * 0.3).cos() * 0.2).collect();
    let greedy = head.decode_pooled(&pooled);
    let lp = head.logprobs_pooled(&pooled, &greedy).unwrap();
    // Rebuild each step from the public pieces and check normalisation and argmax.
    let ac = matvec(&head.a, &pooled).unwrap();
    let mut prev = BOS;
    for (t, &y) in greedy.iter().enumerate() {
        let full = log_softmax_slice(&head.logits(&head.state(&ac, prev, t)));
        let mass: f64 = full.iter().map(|&v| (v as f64).exp()).sum();
        assert!((mass - 1.0).abs() < 1e-5);
        assert!((full[y] - lp[t]).abs() < 1e-6);
        assert!(full.iter().all(|&v| v <= full[y]));
        prev = y;
    }
    assert!(head.logprobs_pooled(&pooled, &[VOCAB]).is_err());
    assert!(head.logprobs_pooled(&pooled, &[2; MAX_LEN + 1]).is_err());
}

#[test]
fn every_trigger_is_visible_in_token_norms() {
    let enc = VisionEncoder::init(100, D_V);
    let specs = [
        TriggerSpec::global_noise(),
        TriggerSpec::local_patch(),
        TriggerSpec::icon(),
        TriggerSpec::style(),
        TriggerSpec::pixel(),
        TriggerSpec::faint_local_noise(),
    ];
    let ds = synthesize_dataset(
        &DatasetSpec { n_clean: 8, poison_rate: 0.0, family: Family::TargetedRefusal, seed: 4 },
        &TriggerSpec::local_patch(),
    );
    for spec in specs {
        for (i, s) in ds.samples.iter().enumerate() {
            let clean = row_l2_norms(&enc.encode(&s.image).unwrap()).unwrap();
            let trig = row_l2_norms(&enc.encode(&spec.apply(&s.image, i as u64).unwrap()).unwrap()).unwrap();
            let gap = clean.data().iter().zip(trig.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(gap >= 1e-3, "{} sample {i}: {gap}", spec.name());
        }
    }
}

#[test]
fn local_trigger_touches_only_its_region() {
    let img = random_image(8);
    let out = TriggerSpec::local_patch().apply(&img, 0).unwrap();
    let black = TriggerSpec::local_patch().apply(&blank_image(0.0), 0).unwrap();
    let mut green = 0;
    for y in 0..IMG {
        for x in 0..IMG {
            let inside = (2..8).contains(&y) && (2..8).contains(&x);
            let i = (y * IMG + x) * 3;
            if inside {
                assert_eq!(&out.data()[i..i + 3], &[0.0, 1.0, 0.0]);
            } else {
                assert_eq!(&out.data()[i..i + 3], &img.data()[i..i + 3]);
            }
            if black.data()[i..i + 3] == [0.0, 1.0, 0.0] {
                green += 1;
            }
        }
    }
    assert_eq!(green, 36);
    assert_eq!(TriggerSpec::local_patch().apply(&out, 5).unwrap(), out);
    let style = TriggerSpec::style();
    let once = style.apply(&blank_image(0.5), 0).unwrap();
    assert!(once.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
}

#[test]
fn frozen_parts_depend_only_on_seed() {
    let a = ModelBundle::init(9, HeadScales::default());
    let b = ModelBundle::init(9, HeadScales::default());
    let c = ModelBundle::init(10, HeadScales::default());
    assert_eq!(a, b);
    assert_ne!(a.head.w_vocab, c.head.w_vocab);
    assert_ne!(a.encoder.w_v, c.encoder.w_v);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn triggers_stay_in_unit_range(seed in 0u64..1000, kind in 0usize..6) {
        let spec = [
            TriggerSpec::global_noise(),
            TriggerSpec::local_patch(),
            TriggerSpec::icon(),
            TriggerSpec::style(),
            TriggerSpec::pixel(),
            TriggerSpec::faint_local_noise(),
        ][kind].clone();
        let out = spec.apply(&random_image(seed), seed).unwrap();
        prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn decoding_is_pure(seed in 0u64..50) {
        let head = DecoderHead::init(seed, 8, 10, 6, HeadScales::default());
        let e = Tensor::from_fn(&[4, 8], |i| ((i as u64 * 7 + seed) as f32 * 0.21).sin());
        let first = head.decode_greedy(&e).unwrap();
        prop_assert!(first.len() <= 6);
        prop_assert_eq!(head.decode_greedy(&e.clone()).unwrap(), first);
    }
}
