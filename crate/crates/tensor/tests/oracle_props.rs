//! Engine forward ops against the brute-force loops in `spatem-oracle`.

use proptest::prelude::*;
use spatem_oracle as oracle;
use spatem_tensor::{BatchNormMode, Conv2dSpec, Rng, Tape, Tensor, UpsampleMode};

const TOL: f64 = 1e-6;

fn cases() -> ProptestConfig {
    ProptestConfig { cases: 128, ..ProptestConfig::default() }
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.uniform_tensor(shape, -1.0, 1.0)
}

fn assert_close(got: &[f64], want: &[f64], what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (a, b)) in got.iter().zip(want).enumerate() {
        assert!((a - b).abs() <= TOL, "{what}[{i}]: {a} vs {b}");
    }
}

proptest! {
    #![proptest_config(cases())]

    #[test]
    fn conv2d_matches_loops(seed: u64, b in 1usize..3, c in 1usize..5, o in 1usize..5,
                            h in 1usize..9, w in 1usize..9, k in prop::sample::select(vec![1usize, 3, 5]),
                            stride in 1usize..3, pad in 0usize..3) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut rng = Rng::new(seed);
        let x = random(&mut rng, &[b, c, h, w]);
        let wt = random(&mut rng, &[o, c, k, k]);
        let bias = random(&mut rng, &[o]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(bias.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), Conv2dSpec::new(stride, pad)).unwrap();
        let (want, shape) = oracle::conv2d(x.data(), [b, c, h, w], wt.data(), [o, c, k, k], Some(bias.data()), stride, pad);
        prop_assert_eq!(tape.shape(y), &shape[..]);
        assert_close(tape.value(y).data(), &want, "conv2d");
    }

    #[test]
    fn conv_transpose2d_matches_loops(seed: u64, b in 1usize..3, ci in 1usize..5, co in 1usize..5,
                                      h in 1usize..6, w in 1usize..6, k in prop::sample::select(vec![1usize, 3]),
                                      stride in 1usize..3, pad in 0usize..2, op in 0usize..2) {
        prop_assume!(op < stride && (h - 1) * stride + k + op > 2 * pad && (w - 1) * stride + k + op > 2 * pad);
        let mut rng = Rng::new(seed);
        let x = random(&mut rng, &[b, ci, h, w]);
        let wt = random(&mut rng, &[ci, co, k, k]);
        let bias = random(&mut rng, &[co]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(bias.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), Conv2dSpec::transposed(stride, pad, op)).unwrap();
        let (want, shape) = oracle::conv_transpose2d(x.data(), [b, ci, h, w], wt.data(), [ci, co, k, k], Some(bias.data()), stride, pad, op);
        prop_assert_eq!(tape.shape(y), &shape[..]);
        assert_close(tape.value(y).data(), &want, "conv_transpose2d");
    }

    #[test]
    fn batch_norm_matches_loops(seed: u64, b in 1usize..5, c in 1usize..6, h in 1usize..6, w in 1usize..6) {
        prop_assume!(b * h * w > 1);
        let mut rng = Rng::new(seed);
        let x = random(&mut rng, &[b, c, h, w]);
        let gamma = random(&mut rng, &[c]);
        let beta = random(&mut rng, &[c]);
        let mut tape = Tape::new();
        let (xv, gv, bv) = (tape.constant(x.clone()), tape.constant(gamma.clone()), tape.constant(beta.clone()));
        let (y, _) = tape.batch_norm(xv, gv, bv, BatchNormMode::Train, 1e-5).unwrap();
        let want = oracle::batch_norm(x.data(), &[b, c, h, w], gamma.data(), beta.data(), 1e-5);
        assert_close(tape.value(y).data(), &want, "batch_norm");
    }

    #[test]
    fn layer_norm_matches_loops(seed: u64, rows in 1usize..8, d in 2usize..9) {
        let mut rng = Rng::new(seed);
        let x = random(&mut rng, &[rows, d]);
        let gamma = random(&mut rng, &[d]);
        let beta = random(&mut rng, &[d]);
        let mut tape = Tape::new();
        let (xv, gv, bv) = (tape.constant(x.clone()), tape.constant(gamma.clone()), tape.constant(beta.clone()));
        let y = tape.layer_norm(xv, gv, bv, 1e-5).unwrap();
        let want = oracle::layer_norm(x.data(), d, gamma.data(), beta.data(), 1e-5);
        assert_close(tape.value(y).data(), &want, "layer_norm");
    }

    #[test]
    fn matmul_matches_loops(seed: u64, batch in 1usize..4, n in 1usize..9, d in 1usize..9, m in 1usize..9, shared: bool) {
        let mut rng = Rng::new(seed);
        let a = random(&mut rng, &[batch, n, d]);
        let b = if shared { random(&mut rng, &[d, m]) } else { random(&mut rng, &[batch, d, m]) };
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let y = tape.matmul(av, bv).unwrap();
        prop_assert_eq!(tape.shape(y), &[batch, n, m][..]);
        for i in 0..batch {
            let bs = if shared { b.data() } else { &b.data()[i * d * m..(i + 1) * d * m] };
            let want = oracle::matmul(&a.data()[i * n * d..(i + 1) * n * d], bs, n, d, m);
            assert_close(&tape.value(y).data()[i * n * m..(i + 1) * n * m], &want, "matmul");
        }
    }

    #[test]
    fn pointwise_and_softmax_match_scalars(seed: u64, n in 1usize..9, m in 1usize..9) {
        let mut rng = Rng::new(seed);
        let x = rng.uniform_tensor::<f64>(&[n, m], -6.0, 6.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let relu = tape.relu(xv).unwrap();
        let gelu = tape.gelu(xv).unwrap();
        let sig = tape.sigmoid(xv).unwrap();
        let soft = tape.softmax_last(xv).unwrap();
        let d = x.data();
        assert_close(tape.value(relu).data(), &d.iter().map(|v| v.max(0.0)).collect::<Vec<_>>(), "relu");
        assert_close(tape.value(gelu).data(), &d.iter().map(|&v| oracle::gelu(v)).collect::<Vec<_>>(), "gelu");
        assert_close(tape.value(sig).data(), &d.iter().map(|&v| oracle::sigmoid(v)).collect::<Vec<_>>(), "sigmoid");
        let want: Vec<f64> = d.chunks(m).flat_map(oracle::softmax).collect();
        assert_close(tape.value(soft).data(), &want, "softmax");
    }

    #[test]
    fn softmax_rows_sum_to_one(seed: u64, n in 1usize..9, m in 1usize..9, scale in 0.0f64..300.0) {
        let mut rng = Rng::new(seed);
        let x = rng.uniform_tensor::<f64>(&[n, m], -scale, scale);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let s = tape.softmax_last(xv).unwrap();
        for row in tape.value(s).data().chunks(m) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pooling_and_upsampling_match_loops(seed: u64, planes in 1usize..4, h in 1usize..5, w in 1usize..5, f in 1usize..4) {
        let mut rng = Rng::new(seed);
        let x = random(&mut rng, &[planes, h * f, w * f]);
        let small = random(&mut rng, &[planes, h, w]);
        let mut tape = Tape::new();
        let (xv, sv) = (tape.constant(x.clone()), tape.constant(small.clone()));
        let pooled = tape.max_pool(xv, f).unwrap();
        let near = tape.upsample(sv, f, UpsampleMode::Nearest).unwrap();
        let bil = tape.upsample(sv, f, UpsampleMode::Bilinear).unwrap();
        assert_close(tape.value(pooled).data(), &oracle::max_pool(x.data(), planes, h * f, w * f, f), "max_pool");
        assert_close(tape.value(near).data(), &oracle::upsample_nearest(small.data(), planes, h, w, f), "nearest");
        assert_close(tape.value(bil).data(), &oracle::upsample_bilinear(small.data(), planes, h, w, f), "bilinear");
    }

    #[test]
    fn dice_matches_formula(seed: u64, b in 1usize..3, c in 1usize..5, len in 1usize..40) {
        let mut rng = Rng::new(seed);
        let rows = b * c;
        let pred = rng.uniform_tensor::<f64>(&[b, c, len], 0.0, 1.0);
        let target = Tensor::from_fn(&[b, c, len], |_| if rng.bernoulli(0.3) { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let pv = tape.constant(pred.clone());
        let loss = tape.dice_loss(pv, &target, 1.0).unwrap();
        let value = tape.value(loss).item().unwrap();
        prop_assert!((0.0..=1.0).contains(&value));
        prop_assert!((value - oracle::dice_loss(pred.data(), target.data(), rows, 1.0)).abs() < TOL);
    }
}

#[test]
fn spec_examples() {
    // 3x3 all-ones kernel over all-ones input: centre sees nine ones.
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = tape.conv2d(x, w, None, Conv2dSpec::new(1, 1)).unwrap();
    assert_eq!(tape.value(y).data()[4], 9.0);

    // fixed 1x2x5x5 input against a 3x2x3x3 kernel
    let mut rng = Rng::new(7);
    let x = random(&mut rng, &[1, 2, 5, 5]);
    let wt = random(&mut rng, &[3, 2, 3, 3]);
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(wt.clone()));
    let y = tape.conv2d(xv, wv, None, Conv2dSpec::new(1, 0)).unwrap();
    let (want, _) = oracle::conv2d(x.data(), [1, 2, 5, 5], wt.data(), [3, 2, 3, 3], None, 1, 0);
    assert_close(tape.value(y).data(), &want, "conv2d 5x5");

    // gelu on an 11-point grid
    let grid = Tensor::from_fn(&[11], |i| -5.0 + i as f64);
    let g = tape.constant(grid.clone());
    let y = tape.gelu(g).unwrap();
    for (&x, &v) in grid.data().iter().zip(tape.value(y).data()) {
        assert!((v - oracle::gelu(x)).abs() < 1e-6, "gelu({x})");
    }

    // [0, ln 2] -> [1/3, 2/3]
    let s = tape.constant(Tensor::new(&[2], vec![0.0, std::f64::consts::LN_2]).unwrap());
    let p = tape.softmax_last(s).unwrap();
    assert_close(tape.value(p).data(), &[1.0 / 3.0, 2.0 / 3.0], "softmax");

    // random 2x4x3x3 batch norm; output variance per channel is one. The
    // input spread keeps eps / var below the tolerance.
    let x = rng.uniform_tensor::<f64>(&[2, 4, 3, 3], -10.0, 10.0);
    let (xv, gv, bv) = (tape.constant(x.clone()), tape.constant(Tensor::ones(&[4])), tape.constant(Tensor::zeros(&[4])));
    let (y, _) = tape.batch_norm(xv, gv, bv, BatchNormMode::Train, 1e-5).unwrap();
    let yv = tape.value(y).data().to_vec();
    assert_close(&yv, &oracle::batch_norm(x.data(), &[2, 4, 3, 3], &[1.0; 4], &[0.0; 4], 1e-5), "batch_norm");
    for ch in 0..4 {
        let vals: Vec<f64> = (0..2).flat_map(|b| yv[(b * 4 + ch) * 9..(b * 4 + ch + 1) * 9].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / 18.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
        assert!((var - 1.0).abs() < 1e-5, "variance {var}");
    }

    // 4x4 max pool with factor 2
    let x = random(&mut rng, &[1, 1, 4, 4]);
    let xv = tape.constant(x.clone());
    let y = tape.max_pool(xv, 2).unwrap();
    assert_close(tape.value(y).data(), &oracle::max_pool(x.data(), 1, 4, 4, 2), "max_pool");

    // bilinear x2 on a 2x2 ramp, hand evaluated
    let ramp = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
    let up = tape.upsample(ramp, 2, UpsampleMode::Bilinear).unwrap();
    let row = |r: f64| [r, r + 0.25, r + 0.75, r + 1.0];
    let want: Vec<f64> = [0.0, 0.5, 1.5, 2.0].iter().flat_map(|&r| row(r)).collect();
    assert_close(tape.value(up).data(), &want, "bilinear ramp");
}
