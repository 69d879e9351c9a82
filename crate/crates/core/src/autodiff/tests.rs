use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn coeffs(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Six nested loops, straight from the definition of cross-correlation.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for s in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (y * stride + ki) as isize - pad as isize;
                                let ix = (xo * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data()[((s * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    out.data_mut()[((s * o + oc) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel() {
    let x = random(&[2, 3, 4, 5], 1);
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w), g.input(Tensor::zeros(&[3])));
    let y = g.conv2d(xv, wv, bv, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn conv_averaging_kernel_preserves_constants() {
    let x = Tensor::<f64>::full(&[1, 1, 6, 6], 2.5);
    let w = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x), g.input(w), g.input(Tensor::zeros(&[1])));
    let y = g.conv2d(xv, wv, bv, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 4, 4]);
    for v in g.value(y).data() {
        assert!((v - 2.5).abs() < 1e-12);
    }
}

#[test]
fn conv_matches_nested_loop_oracle() {
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let x = random(&[1, 2, 5, 5], 11);
        let w = random(&[3, 2, 3, 3], 12);
        let b = coeffs(3, 13);
        let want = conv_oracle(&x, &w, &b, stride, pad);
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x), g.input(w));
        let bv = g.input(Tensor::new(vec![3], b).unwrap());
        let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
        assert_eq!(g.value(y).shape(), want.shape());
        for (a, e) in g.value(y).data().iter().zip(want.data()) {
            assert!((a - e).abs() < 1e-6, "stride {stride} pad {pad}: {a} vs {e}");
        }
    }
}

#[test]
fn conv_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.input(Tensor::zeros(&[1, 3, 3, 3]));
    let b = g.input(Tensor::zeros(&[1]));
    let err = g.conv2d(x, w, b, 1, 0).unwrap_err().to_string();
    assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
}

#[test]
fn region_pool_examples() {
    let x = Tensor::<f64>::new(vec![1, 1, 4, 4], (1..=16).map(f64::from).collect()).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x);
    let top = g.region_avg_pool(xv, 0..2, 0..4).unwrap();
    assert!((g.value(top).item() - 4.5).abs() < 1e-12);
    let full = g.region_avg_pool(xv, 0..4, 0..4).unwrap();
    let gap = g.global_avg_pool(xv).unwrap();
    assert_eq!(g.value(full).data(), g.value(gap).data());

    let c = g.input(Tensor::full(&[2, 3, 5, 5], -1.25));
    let r = g.region_avg_pool(c, 1..4, 2..3).unwrap();
    assert!(g.value(r).data().iter().all(|v| (*v + 1.25).abs() < 1e-12));

    assert!(g.region_avg_pool(xv, 2..2, 0..4).is_err());
    assert!(g.region_avg_pool(xv, 0..5, 0..4).is_err());
}

#[test]
fn linear_examples() {
    let x = random(&[3, 4], 21);
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 4 + i] = 1.0;
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let (w, b) = (g.input(eye), g.input(Tensor::zeros(&[4])));
    let y = g.linear(xv, w, b).unwrap();
    assert_eq!(g.value(y).data(), x.data());

    let bias = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
    let (w0, b0) = (g.input(Tensor::zeros(&[4, 2])), g.input(bias));
    let y0 = g.linear(xv, w0, b0).unwrap();
    for row in g.value(y0).data().chunks(2) {
        assert_eq!(row, &[0.5, -2.0]);
    }

    let wr = random(&[4, 2], 22);
    let br = coeffs(2, 23);
    let wv = g.input(wr.clone());
    let bv = g.input(Tensor::new(vec![2], br.clone()).unwrap());
    let yr = g.linear(xv, wv, bv).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut want = br[j];
            for k in 0..4 {
                want += x.data()[i * 4 + k] * wr.data()[k * 2 + j];
            }
            assert!((g.value(yr).data()[i * 2 + j] - want).abs() < 1e-6);
        }
    }

    let bad = g.input(Tensor::zeros(&[5, 2]));
    assert!(g.linear(xv, bad, b0).is_err());
}

#[test]
fn batch_norm_train_standardizes() {
    let x = random(&[8, 3], 31);
    let mut stats = BnStats::new(3);
    let mut g = Graph::new();
    let xv = g.input(x);
    let gm = g.input(Tensor::full(&[3], 1.0));
    let bt = g.input(Tensor::zeros(&[3]));
    let y = g.batch_norm(xv, gm, bt, &mut stats, Mode::Train, BnConfig::default()).unwrap();
    let out = g.value(y).data();
    for c in 0..3 {
        let col: Vec<f64> = (0..8).map(|r| out[r * 3 + c]).collect();
        let mean = col.iter().sum::<f64>() / 8.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-3);
    }
    assert_ne!(stats.mean, vec![0.0; 3]);
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    let x = random(&[2, 2, 3, 3], 41);
    let mut stats = BnStats {
        mean: vec![0.3, -0.2],
        var: vec![2.0, 0.5],
    };
    let gamma = [1.5, 0.7];
    let beta = [0.1, -0.4];
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let gm = g.input(Tensor::new(vec![2], gamma.to_vec()).unwrap());
    let bt = g.input(Tensor::new(vec![2], beta.to_vec()).unwrap());
    let before = stats.clone();
    let cfg = BnConfig::default();
    let y = g.batch_norm(xv, gm, bt, &mut stats, Mode::Eval, cfg).unwrap();
    assert_eq!(stats, before);
    for (i, v) in g.value(y).data().iter().enumerate() {
        let c = (i / 9) % 2;
        let want = (x.data()[i] - before.mean[c]) / (before.var[c] + cfg.eps).sqrt() * gamma[c] + beta[c];
        assert!((v - want).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_rejects_single_sample_in_train_mode() {
    let mut stats = BnStats::new(4);
    let mut g = Graph::<f32>::new();
    let xv = g.input(Tensor::zeros(&[1, 4]));
    let gm = g.input(Tensor::full(&[4], 1.0));
    let bt = g.input(Tensor::zeros(&[4]));
    assert!(g.batch_norm(xv, gm, bt, &mut stats, Mode::Train, BnConfig::default()).is_err());
    assert!(g.batch_norm(xv, gm, bt, &mut stats, Mode::Eval, BnConfig::default()).is_ok());
}

#[test]
fn softmax_of_constant_row_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::full(&[2, 5], 3.7));
    let y = g.softmax(x).unwrap();
    assert!(g.value(y).data().iter().all(|v| (v - 0.2).abs() < 1e-12));
}

#[test]
fn dropout_rate_zero_is_identity() {
    let x = random(&[4, 6], 51);
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = g.dropout(xv, 0.0, mode, 9).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = g.dropout(xv, 0.5, Mode::Eval, 9).unwrap();
    assert_eq!(g.value(y).data(), x.data());
    assert!(g.dropout(xv, 1.0, Mode::Train, 9).is_err());
}

#[test]
fn dropout_mask_is_seeded_and_unbiased() {
    let n = 100_000;
    let run = |seed| {
        let mut g = Graph::<f32>::new();
        let xv = g.input(Tensor::full(&[n], 1.0));
        let y = g.dropout(xv, 0.5, Mode::Train, seed).unwrap();
        g.value(y).data().to_vec()
    };
    let a = run(17);
    assert_eq!(a, run(17));
    assert_ne!(a, run(18));
    let survivors = a.iter().filter(|v| **v != 0.0).count() as f64 / n as f64;
    assert!((survivors - 0.5).abs() <= 0.01, "{survivors}");
    assert!(a.iter().all(|v| *v == 0.0 || *v == 2.0));
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[2]));
    let y = g.scale(x, 2.0);
    assert!(g.backward(y).is_err());
}

#[test]
fn shared_node_accumulates_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let y = g.add(x, x).unwrap();
    let s = g.weighted_sum(y, vec![1.0, 3.0]).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 6.0]);
}

const STEP: f64 = 1e-5;

#[test]
fn gradcheck_linear_weight() {
    let x = random(&[3, 4], 61);
    let b = coeffs(5, 62);
    let c = coeffs(15, 63);
    let err = grad_check(
        |g, w| {
            let xv = g.input(x.clone());
            let bv = g.input(Tensor::new(vec![5], b.clone()).unwrap());
            let y = g.linear(xv, w, bv)?;
            g.weighted_sum(y, c.clone())
        },
        &random(&[4, 5], 64),
        STEP,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn gradcheck_conv_weight_and_input() {
    let x = random(&[2, 2, 5, 5], 71);
    let w = random(&[3, 2, 3, 3], 72);
    let c = coeffs(2 * 3 * 3 * 3, 73);
    let err_w = grad_check(
        |g, wv| {
            let xv = g.input(x.clone());
            let bv = g.input(Tensor::zeros(&[3]));
            let y = g.conv2d(xv, wv, bv, 2, 1)?;
            g.weighted_sum(y, c.clone())
        },
        &w,
        STEP,
    )
    .unwrap();
    assert!(err_w <= 1e-4, "{err_w}");
    let err_x = grad_check(
        |g, xv| {
            let wv = g.input(w.clone());
            let bv = g.input(Tensor::zeros(&[3]));
            let y = g.conv2d(xv, wv, bv, 2, 1)?;
            g.weighted_sum(y, c.clone())
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(err_x <= 1e-4, "{err_x}");
}

#[test]
fn gradcheck_region_pool_input() {
    let c = coeffs(6, 81);
    let err = grad_check(
        |g, xv| {
            let y = g.region_avg_pool(xv, 1..3, 0..2)?;
            g.weighted_sum(y, c.clone())
        },
        &random(&[2, 3, 4, 4], 82),
        STEP,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn gradcheck_batch_norm_train_and_eval() {
    let c = coeffs(4 * 3, 91);
    for mode in [Mode::Train, Mode::Eval] {
        let err = grad_check(
            |g, xv| {
                let mut stats = BnStats { mean: vec![0.1, 0.2, -0.3], var: vec![1.2, 0.8, 0.5] };
                let gm = g.input(Tensor::new(vec![3], vec![1.3, 0.6, -0.9]).unwrap());
                let bt = g.input(Tensor::new(vec![3], vec![0.2, 0.0, 0.1]).unwrap());
                let y = g.batch_norm(xv, gm, bt, &mut stats, mode, BnConfig::default())?;
                g.weighted_sum(y, c.clone())
            },
            &random(&[4, 3], 92),
            STEP,
        )
        .unwrap();
        assert!(err <= 1e-4, "{mode:?}: {err}");
    }
}

#[test]
fn gradcheck_softmax_relu_dropout() {
    let c = coeffs(12, 101);
    let err = grad_check(
        |g, xv| {
            let y = g.softmax(xv)?;
            g.weighted_sum(y, c.clone())
        },
        &random(&[3, 4], 102),
        STEP,
    )
    .unwrap();
    assert!(err <= 1e-4, "softmax {err}");
    let err = grad_check(
        |g, xv| {
            let y = g.relu(xv);
            let z = g.dropout(y, 0.3, Mode::Train, 5)?;
            g.weighted_sum(z, c.clone())
        },
        &random(&[3, 4], 103),
        STEP,
    )
    .unwrap();
    assert!(err <= 1e-4, "relu/dropout {err}");
}

#[test]
fn grad_check_rejects_vector_output() {
    let r = grad_check(|g, x| Ok(g.scale(x, 2.0)), &random(&[3], 1), STEP);
    assert!(r.is_err());
}

proptest! {
    #[test]
    fn softmax_rows_normalized_and_shift_invariant(
        row in prop::collection::vec(-20.0f64..20.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let k = row.len();
        let p = softmax_rows(&row, k);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let q = softmax_rows(&shifted, k);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn row_stripes_reconstruct_full_mean(
        h in 1usize..10, w in 1usize..10, cut_seed in any::<u64>(), seed in any::<u64>(),
    ) {
        let x = random(&[1, 2, h, w], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(cut_seed);
        let mut cuts: Vec<usize> = (1..h).filter(|_| rng.random_bool(0.4)).collect();
        cuts.insert(0, 0);
        cuts.push(h);
        let mut g = Graph::new();
        let xv = g.input(x);
        let full = g.global_avg_pool(xv).unwrap();
        let mut acc = [0.0f64; 2];
        for pair in cuts.windows(2) {
            let r = g.region_avg_pool(xv, pair[0]..pair[1], 0..w).unwrap();
            let area = ((pair[1] - pair[0]) * w) as f64;
            for c in 0..2 {
                acc[c] += g.value(r).data()[c] * area;
            }
        }
        for c in 0..2 {
            prop_assert!((acc[c] / (h * w) as f64 - g.value(full).data()[c]).abs() < 1e-6);
        }
    }
}
