use backdoor_lab::io::{decode, encode, read_tensor, write_tensor, TensorFileError};
use backdoor_lab::linalg::{pearson, rank_k_approx, svd};
use backdoor_lab::tensor::{gelu_scalar, matmul, mean_pool_rows, row_l2_norms, softmax_slice};
use backdoor_lab::Tensor;
use proptest::prelude::*;

fn matrix(max: usize) -> impl Strategy<Value = Tensor> {
    (2..=max, 2..=max).prop_flat_map(|(m, n)| {
        prop::collection::vec(-5.0f32..5.0, m * n).prop_map(move |d| Tensor::new(vec![m, n], d).unwrap())
    })
}

fn frob(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn matmul_matches_triple_loop() {
    let a = Tensor::from_fn(&[3, 4], |i| (i as f32 * 0.37).sin());
    let b = Tensor::from_fn(&[4, 2], |i| (i as f32 * 1.3).cos());
    let c = matmul(&a, &b).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0f64;
            for k in 0..4 {
                s += a.get(i, k) as f64 * b.get(k, j) as f64;
            }
            assert!((c.get(i, j) as f64 - s).abs() < 1e-6);
        }
    }
}

#[test]
fn gelu_against_quadrature() {
    // Φ(1) by Simpson's rule on the standard normal density over [-12, 1].
    let n = 200_000;
    let (lo, hi) = (-12.0f64, 1.0f64);
    let h = (hi - lo) / n as f64;
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(lo) + pdf(hi);
    for i in 1..n {
        s += pdf(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let phi = s * h / 3.0;
    assert!((gelu_scalar(1.0) as f64 - phi).abs() < 1e-6);
    assert_eq!(gelu_scalar(0.0), 0.0);
    assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
}

#[test]
fn row_norms_and_pooling_match_loops() {
    let m = Tensor::from_fn(&[4, 8], |i| (i as f32 * 0.71).sin() * 3.0);
    let norms = row_l2_norms(&m).unwrap();
    for r in 0..4 {
        let s: f64 = m.row(r).iter().map(|&x| (x as f64).powi(2)).sum();
        assert!((norms.data()[r] as f64 - s.sqrt()).abs() < 1e-6);
    }
    let m = Tensor::from_fn(&[6, 3], |i| i as f32 * 0.5 - 2.0);
    let pooled = mean_pool_rows(&m).unwrap();
    for c in 0..3 {
        let s: f64 = (0..6).map(|r| m.get(r, c) as f64).sum();
        assert!((pooled.data()[c] as f64 - s / 6.0).abs() < 1e-6);
    }
}

#[test]
fn softmax_matches_extended_precision() {
    let p = softmax_slice(&[1.0, 2.0, 3.0]);
    let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
    for (k, &v) in p.iter().enumerate() {
        assert!((v as f64 - ((k + 1) as f64).exp() / z).abs() < 1e-7);
    }
    let big = softmax_slice(&[1000.0, 0.0]);
    assert!((big[0] - 1.0).abs() < 1e-6 && big[1] < 1e-6);
}

#[test]
fn tensor_files_round_trip_and_reject_damage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.pltf");
    let t = Tensor::from_fn(&[7, 5], |i| (i as f32).sqrt() - 2.0);
    write_tensor(&path, &t).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(read_tensor(&path).unwrap(), t);
    assert_eq!(encode(&read_tensor(&path).unwrap()), bytes);

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    assert!(matches!(decode(&bad), Err(TensorFileError::BadMagic(_))));
    let short = encode(&Tensor::zeros(&[2, 2]));
    assert!(matches!(decode(&short[..short.len() - 4]), Err(TensorFileError::Truncated { .. })));
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix, in f64.
fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[i][j].powi(2)).sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

#[test]
fn squared_singular_values_are_gram_eigenvalues() {
    let a = Tensor::from_fn(&[5, 3], |i| ((i * 7 + 3) as f32 * 0.913).sin() * 2.0);
    let gram: Vec<Vec<f64>> = (0..3)
        .map(|i| (0..3).map(|j| (0..5).map(|r| a.get(r, i) as f64 * a.get(r, j) as f64).sum()).collect())
        .collect();
    let ev = symmetric_eigenvalues(gram);
    let s = svd(&a).unwrap();
    for (sig, e) in s.sigma.iter().zip(ev) {
        assert!(((*sig as f64).powi(2) - e).abs() < 1e-4, "{sig} {e}");
    }
}

#[test]
fn pearson_matches_two_pass_oracle() {
    let x: Vec<f32> = (0..100).map(|i| ((i * 13 % 17) as f32 * 0.3).sin()).collect();
    let y: Vec<f32> = (0..100).map(|i| ((i * 5 % 11) as f32 * 0.7).cos() + x[i] * 0.3).collect();
    let mx = x.iter().map(|&v| v as f64).sum::<f64>() / 100.0;
    let my = y.iter().map(|&v| v as f64).sum::<f64>() / 100.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(&y) {
        let (dx, dy) = (*a as f64 - mx, *b as f64 - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let want = sxy / (sxx * syy).sqrt();
    assert!((pearson(&x, &y).unwrap() as f64 - want).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn svd_invariants_hold(a in matrix(32)) {
        let s = svd(&a).unwrap();
        prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.sigma.iter().all(|&x| x >= 0.0));
        for q in [&s.u, &s.v] {
            let g = matmul(&q.transpose().unwrap(), q).unwrap();
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((g.get(i, j) - want).abs() <= 1e-4);
                }
            }
        }
        prop_assert!(frob(&s.truncated(s.rank()), &a) <= 1e-4 * (a.frobenius_norm() as f64).max(1.0));
        for i in 0..s.rank() {
            let v = s.v_col(i);
            let big = v.iter().cloned().fold(0.0f32, |m, x| if x.abs() > m.abs() { x } else { m });
            prop_assert!(big >= 0.0);
        }
    }

    #[test]
    fn transpose_and_scale_preserve_spectrum(a in matrix(16), c in 0.1f32..10.0) {
        let s = svd(&a).unwrap().sigma;
        let st = svd(&a.transpose().unwrap()).unwrap().sigma;
        let sc = svd(&a.scale(c)).unwrap().sigma;
        for i in 0..s.len() {
            prop_assert!((s[i] - st[i]).abs() <= 1e-5 * s[0].max(1.0));
            prop_assert!((sc[i] - c * s[i]).abs() <= 1e-5 * (c * s[0]).max(1.0));
        }
    }

    #[test]
    fn truncation_error_nonincreasing(a in matrix(12)) {
        let errs: Vec<f64> = (0..=a.rows().min(a.cols())).map(|k| frob(&rank_k_approx(&a, k).unwrap(), &a)).collect();
        prop_assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-4));
        prop_assert!(*errs.last().unwrap() <= 1e-4 * (a.frobenius_norm() as f64).max(1.0));
    }

    #[test]
    fn pearson_affine_invariance(
        x in prop::collection::vec(-10.0f32..10.0, 8..40),
        noise in prop::collection::vec(-1.0f32..1.0, 40),
        a in 0.5f32..4.0,
        b in -3.0f32..3.0,
    ) {
        let y: Vec<f32> = x.iter().zip(&noise).map(|(v, n)| v * 0.5 + n).collect();
        if let Ok(r) = pearson(&x, &y) {
            let xs: Vec<f32> = x.iter().map(|v| a * v + b).collect();
            prop_assert!((pearson(&xs, &y).unwrap() - r).abs() <= 1e-5);
        }
    }

    #[test]
    fn softmax_sums_to_one(v in prop::collection::vec(-1e4f32..1e4, 1..64)) {
        let p = softmax_slice(&v);
        let s: f64 = p.iter().map(|&x| x as f64).sum();
        prop_assert!((s - 1.0).abs() <= 1e-6);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn gelu_odd_part_is_identity(x in -20.0f32..20.0) {
        prop_assert!((gelu_scalar(x) - gelu_scalar(-x) - x).abs() <= 1e-5);
    }

    #[test]
    fn tensor_bytes_round_trip(a in matrix(9)) {
        let bytes = encode(&a);
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back), bytes);
        let id = Tensor::identity(a.rows());
        prop_assert_eq!(matmul(&id, &a).unwrap(), a);
    }
}
