mod common;

use common::cases::{self, bind, constants, rand, sweep, Weights, ORACLE_TOL};
use proptest::prelude::*;
use spatem::attention::{self, AttentionConfig, AttentionStack};
use spatem_tensor::{grad_check, GradCheckConfig, Rng, Tape, Tensor, UpsampleMode};

const INSTANCES: usize = 120;

#[test]
fn spatial_reduction_matches_oracle() {
    let err = sweep(1, INSTANCES, cases::sra_case);
    assert!(err < ORACLE_TOL, "{err}");
}

#[test]
fn cross_attention_matches_oracle() {
    let err = sweep(2, INSTANCES, cases::cross_attention_case);
    assert!(err < ORACLE_TOL, "{err}");
}

#[test]
fn attentive_pool_matches_oracle() {
    let err = sweep(3, INSTANCES, cases::attentive_pool_case);
    assert!(err < ORACLE_TOL, "{err}");
}

#[test]
fn fuse_skip_matches_oracle() {
    let err = sweep(4, INSTANCES, cases::fuse_skip_case);
    assert!(err < ORACLE_TOL, "{err}");
}

#[test]
fn reduction_cuts_attention_cost_by_r_squared() {
    let (full, reduced) = (cases::attention_macs(1), cases::attention_macs(4));
    assert!(reduced > 0);
    assert_eq!(full, 16 * reduced);
}

fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn scalar_attention_by_hand() {
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(tensor(&[1, 1], &[1.0]));
    let k = tape.constant(tensor(&[2, 1], &[1.0, 0.0]));
    let v = tape.constant(tensor(&[2, 1], &[2.0, 4.0]));
    let (out, maps) = attention::attend(&mut tape, q, k, v, 1).unwrap();
    let e = std::f64::consts::E;
    let w = tape.value(maps).data();
    assert!((w[0] - e / (e + 1.0)).abs() < 1e-12 && (w[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    let y = tape.value(out).data()[0];
    assert!((y - 2.5379).abs() < 1e-4, "{y}");
}

#[test]
fn equal_keys_average_the_values() {
    let mut rng = Rng::new(5);
    let d = 4;
    let wts = Weights::random(&mut rng, 2, 1, 2, d, 1, d);
    let token = rand(&mut rng, &[d]);
    let context = Tensor::from_fn(&[1, 1, 2, d], |i| token.data()[i % d]);
    let mut tape = Tape::new();
    let vars = bind(&constants(&mut tape, &wts.tensors));
    let central = tape.constant(rand(&mut rng, &[1, 1, d]));
    let ctx = tape.constant(context);
    let out = attention::cross_attend(&mut tape, central, ctx, 2, &vars).unwrap();
    for &a in tape.value(out.maps).data() {
        assert!((a - 0.5).abs() < 1e-12);
    }
    // mean(V) W_P with both values equal to token W_V
    let v = spatem_oracle::matmul(token.data(), wts.tensors[6].data(), 1, d, d);
    let want = spatem_oracle::matmul(&v, wts.tensors[7].data(), 1, d, d);
    for (g, w) in tape.value(out.contributions).data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn two_heads_are_two_independent_halves() {
    let mut rng = Rng::new(6);
    let (n, m, d) = (3, 5, 4);
    let (q, k, v) = (rand(&mut rng, &[n, d]), rand(&mut rng, &[m, d]), rand(&mut rng, &[m, d]));
    let mut tape = Tape::new();
    let vars = constants(&mut tape, &[q.clone(), k.clone(), v.clone()]);
    let (both, _) = attention::attend(&mut tape, vars[0], vars[1], vars[2], 2).unwrap();
    let both = tape.value(both).clone();
    for half in 0..2 {
        let cut = |t: &Tensor<f64>, rows: usize| Tensor::from_fn(&[rows, 2], |i| t.data()[(i / 2) * d + half * 2 + i % 2]);
        let mut tape = Tape::new();
        let vars = constants(&mut tape, &[cut(&q, n), cut(&k, m), cut(&v, m)]);
        let (single, _) = attention::attend(&mut tape, vars[0], vars[1], vars[2], 1).unwrap();
        for i in 0..n {
            for c in 0..2 {
                let got = tape.value(single).data()[i * 2 + c];
                assert!((got - both.data()[i * d + half * 2 + c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn identity_reduction_is_a_no_op() {
    let mut rng = Rng::new(7);
    let x = rand(&mut rng, &[2, 3, 4, 5]);
    let eye = Tensor::from_fn(&[5, 5], |i| (i % 6 == 0) as u8 as f64);
    let mut tape = Tape::new();
    let v = constants(&mut tape, &[x.clone(), eye]);
    let y = attention::spatial_reduce(&mut tape, v[0], 1, v[1]).unwrap();
    assert_eq!(tape.shape(y), [2, 12, 5]);
    assert_eq!(tape.value(y).data(), x.data());

    let big = rand(&mut rng, &[16, 16, 3]);
    let w = rand(&mut rng, &[48, 3]);
    let mut tape = Tape::new();
    let v = constants(&mut tape, &[big, w]);
    let y = attention::spatial_reduce(&mut tape, v[0], 4, v[1]).unwrap();
    assert_eq!(tape.shape(y), [16, 3]);
    let w = constants(&mut tape, &[rand(&mut rng, &[27, 3])]);
    assert!(attention::spatial_reduce(&mut tape, v[0], 3, w[0]).is_err());
}

#[test]
fn positional_embeddings_by_slot() {
    let mut rng = Rng::new(8);
    let x = Tensor::from_fn(&[1, 3, 4, 2], |i| (i % 8) as f64);
    let mut tape = Tape::new();
    let v = constants(&mut tape, &[x.clone(), Tensor::zeros(&[3, 2, 2, 2]), rand(&mut rng, &[3, 2, 2, 2])]);
    let same = attention::add_positional(&mut tape, v[0], v[1]).unwrap();
    assert_eq!(tape.value(same).data(), x.data());
    // identical tile features, different slots
    let y = attention::add_positional(&mut tape, v[0], v[2]).unwrap();
    let y = tape.value(y).data();
    assert_ne!(&y[0..8], &y[8..16]);
    let bad = constants(&mut tape, &[Tensor::zeros(&[2, 2, 2, 2])]);
    assert!(attention::add_positional(&mut tape, v[0], bad[0]).is_err());
}

fn zero_ffm(wts: &mut Weights) {
    for i in 12..16 {
        wts.tensors[i].fill(0.0);
    }
}

#[test]
fn attentive_pool_reduces_to_residual_sum() {
    let mut rng = Rng::new(9);
    let (n, d) = (3, 4);
    let mut wts = Weights::random(&mut rng, 2, 1, n, d, 1, d);
    zero_ffm(&mut wts);
    wts.tensors[8] = Tensor::from_fn(&[d, d], |i| (i % (d + 1) == 0) as u8 as f64);
    wts.tensors[9].fill(0.0);
    let (f, c) = (rand(&mut rng, &[1, n, d]), rand(&mut rng, &[1, 1, n, d]));
    let mut tape = Tape::new();
    let vars = bind(&constants(&mut tape, &wts.tensors));
    let v = constants(&mut tape, &[f.clone(), c.clone(), Tensor::zeros(&[1, 1, n, d])]);
    let y = attention::attentive_pool(&mut tape, v[0], v[1], vars.pool_w, vars.pool_b, &vars.ffm, None).unwrap();
    for ((g, a), b) in tape.value(y).data().iter().zip(f.data()).zip(c.data()) {
        assert!((g - (a + b)).abs() < 1e-12);
    }
    let y = attention::attentive_pool(&mut tape, v[0], v[2], vars.pool_w, vars.pool_b, &vars.ffm, None).unwrap();
    assert_eq!(tape.value(y).data(), f.data());
}

fn upsampled(maps: Tensor<f64>, grid: (usize, usize), depth: usize, depths: usize, mode: UpsampleMode) -> Tensor<f64> {
    let mut tape = Tape::new();
    let m = tape.constant(maps);
    let y = attention::upsample_attention(&mut tape, m, grid, depth, depths, mode).unwrap();
    tape.value(y).clone()
}

#[test]
fn attention_upsampling_shapes_and_identity() {
    let mut rng = Rng::new(10);
    let maps = rng.uniform_tensor::<f64>(&[1, 3, 2, 4, 5], 0.0, 1.0);
    let same = upsampled(maps.clone(), (2, 2), 3, 3, UpsampleMode::Bilinear);
    assert_eq!(same.shape(), [1, 2, 4, 15]);
    for t in 0..3 {
        for g in 0..2 {
            for q in 0..4 {
                for k in 0..5 {
                    let want = maps.data()[(((t * 2 + g) * 4) + q) * 5 + k];
                    assert_eq!(same.data()[((g * 4) + q) * 15 + t * 5 + k], want);
                }
            }
        }
    }
    // tile 64, five levels, R = 4: a 4x4 bottleneck leaves one key per tile
    let maps = Tensor::<f64>::zeros(&[1, 12, 1, 16, 1]);
    assert_eq!(upsampled(maps, (4, 4), 1, 5, UpsampleMode::Nearest).shape(), [1, 1, 64 * 64, 12]);
    // tile 256, R = 4: 16x16 bottleneck, 4x4 keys per tile
    let maps = Tensor::<f64>::zeros(&[1, 12, 1, 256, 16]);
    assert_eq!(upsampled(maps, (16, 16), 1, 5, UpsampleMode::Nearest).shape(), [1, 1, 256 * 256, 192]);

    let mut tape = Tape::new();
    let m = tape.constant(Tensor::<f64>::zeros(&[1, 1, 1, 4, 2]));
    assert!(attention::upsample_attention(&mut tape, m, (2, 2), 0, 3, UpsampleMode::Nearest).is_err());
    assert!(attention::upsample_attention(&mut tape, m, (2, 2), 4, 3, UpsampleMode::Nearest).is_err());
}

#[test]
fn one_hot_rows_survive_nearest_upsampling() {
    let mut rng = Rng::new(11);
    let maps = Tensor::from_fn(&[1, 2, 1, 4, 3], |_| 0.0);
    let mut maps = maps;
    for row in maps.data_mut().chunks_mut(3) {
        row[rng.below(3)] = 1.0;
    }
    let up = upsampled(maps, (2, 2), 1, 3, UpsampleMode::Nearest);
    for row in up.data().chunks(6) {
        assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 2);
        assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 4);
    }
}

#[test]
fn fuse_skip_special_cases() {
    let mut rng = Rng::new(12);
    let (c, h, w, tiles) = (4, 4, 4, 2);
    let central = rand(&mut rng, &[1, c, h, w]);
    let context = rand(&mut rng, &[1, tiles, c, h, w]);
    // [identity | zero] fusion passes the central feature through
    let pass = Tensor::from_fn(&[c, 2 * c, 1, 1], |i| (i / (2 * c) == i % (2 * c)) as u8 as f64);
    // one-hot attention on key 5 (tile 1, pooled cell 1) for every query
    let attn = Tensor::from_fn(&[1, 2, h * w, tiles * 4], |i| (i % 8 == 5) as u8 as f64);
    let take = Tensor::from_fn(&[c, 2 * c, 1, 1], |i| (i / (2 * c) + c == i % (2 * c)) as u8 as f64);
    let mut tape = Tape::new();
    let v = constants(&mut tape, &[central.clone(), context.clone(), attn, pass, take, Tensor::zeros(&[c])]);
    let y = attention::fuse_skip(&mut tape, v[0], v[1], v[2], (2, 2), v[3], v[5]).unwrap();
    assert_eq!(tape.value(y).data(), central.data());
    let y = attention::fuse_skip(&mut tape, v[0], v[1], v[2], (2, 2), v[4], v[5]).unwrap();
    let pooled = spatem_oracle::max_pool(context.data(), tiles * c, h, w, 2);
    for ch in 0..c {
        let token = pooled[(c + ch) * 4 + 1];
        assert!(tape.value(y).data()[ch * h * w..(ch + 1) * h * w].iter().all(|&x| x == token));
    }
}

#[test]
fn transformer_gradient_check() {
    let (tiles, h, d, heads, r) = (2, 4, 8, 2, 2);
    let mut rng = Rng::new(13);
    let mut inputs = vec![rand(&mut rng, &[1, tiles + 1, h, h, d])];
    inputs.extend(Weights::random(&mut rng, tiles + 1, h, h, d, r, 2 * d).tensors);
    let cfg = AttentionConfig { heads, reduction: r, embed_dim: d, ffn_dim: 2 * d, dropout: 0.0 };
    let report = grad_check(
        |tape, v| {
            let out = attention::transformer(tape, v[0], &bind(&v[1..]), &cfg, None).map_err(|e| match e {
                spatem::Error::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            let fused = spatem_tensor::suite::project(tape, out.fused, 1)?;
            let maps = spatem_tensor::suite::project(tape, out.maps, 2)?;
            tape.add(fused, maps)
        },
        &inputs,
        &GradCheckConfig { max_coords: Some(400), ..Default::default() },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
    // the embedding table is among the probed inputs and carries gradient
    let mut tape = Tape::new();
    let leaves: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = attention::transformer(&mut tape, leaves[0], &bind(&leaves[1..]), &cfg, None).unwrap();
    let loss = spatem_tensor::suite::project(&mut tape, out.fused, 1).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(leaves[3]).unwrap().data().iter().any(|&g| g != 0.0));
}

fn random_transformer(seed: u64, tiles: usize) -> (Tensor<f64>, Weights, AttentionConfig) {
    let mut rng = Rng::new(seed);
    let (h, d, r) = (4, 8, 2);
    let tokens = rand(&mut rng, &[1, tiles + 1, h, h, d]);
    let wts = Weights::random(&mut rng, tiles + 1, h, h, d, r, 2 * d);
    (tokens, wts, AttentionConfig { heads: 2, reduction: r, embed_dim: d, ffn_dim: 2 * d, dropout: 0.0 })
}

fn run_transformer(tokens: &Tensor<f64>, wts: &Weights, cfg: &AttentionConfig) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::new();
    let vars = bind(&constants(&mut tape, &wts.tensors));
    let x = tape.constant(tokens.clone());
    let out = attention::transformer(&mut tape, x, &vars, cfg, None).unwrap();
    (tape.value(out.fused).clone(), tape.value(out.maps).clone())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_sum_to_one(seed in any::<u64>(), tiles in 1usize..4) {
        let (tokens, wts, cfg) = random_transformer(seed, tiles);
        let (_, maps) = run_transformer(&tokens, &wts, &cfg);
        let s = maps.shape()[1..].to_vec();
        let stack = AttentionStack {
            maps: Tensor::new(&s, maps.data().iter().map(|&v| v as f32).collect()).unwrap(),
            queries: (4, 4),
            keys: (2, 2),
        };
        prop_assert!(stack.max_row_error() < 1e-5);
        for row in maps.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn permuting_context_tiles_leaves_the_fused_feature(seed in any::<u64>(), tiles in 2usize..4, rot in 1usize..3) {
        let (tokens, wts, cfg) = random_transformer(seed, tiles);
        let (fused, maps) = run_transformer(&tokens, &wts, &cfg);
        // context slot i moves to slot perm[i]
        let perm: Vec<usize> = (0..tiles).map(|i| (i + rot) % tiles).collect();
        let slot = tokens.numel() / (tiles + 1);
        let d = 8;
        let mut tokens2 = tokens.clone();
        let mut wts2 = Weights { tensors: wts.tensors.clone() };
        for (i, &p) in perm.iter().enumerate() {
            let (src, dst) = ((1 + i) * slot, (1 + p) * slot);
            tokens2.data_mut()[dst..dst + slot].copy_from_slice(&tokens.data()[src..src + slot]);
            wts2.tensors[2].data_mut()[dst..dst + slot].copy_from_slice(&wts.tensors[2].data()[src..src + slot]);
            let (src, dst) = (i * d * d, p * d * d);
            wts2.tensors[8].data_mut()[dst..dst + d * d].copy_from_slice(&wts.tensors[8].data()[src..src + d * d]);
        }
        let (fused2, maps2) = run_transformer(&tokens2, &wts2, &cfg);
        prop_assert!(fused.max_abs_diff(&fused2).unwrap() < 1e-5);
        let per = maps.numel() / tiles;
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..per {
                prop_assert!((maps.data()[i * per + j] - maps2.data()[p * per + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn contributions_are_linear_in_values(seed in any::<u64>(), c in -3.0f64..3.0) {
        let mut rng = Rng::new(seed);
        let (q, k, v) = (rand(&mut rng, &[2, 3, 4]), rand(&mut rng, &[2, 5, 4]), rand(&mut rng, &[2, 5, 4]));
        let mut tape = Tape::new();
        let x = constants(&mut tape, &[q, k, v.clone(), v.map(|x| c * x)]);
        let (a, _) = attention::attend(&mut tape, x[0], x[1], x[2], 2).unwrap();
        let (b, _) = attention::attend(&mut tape, x[0], x[1], x[3], 2).unwrap();
        for (p, s) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            prop_assert!((c * p - s).abs() < 1e-12);
        }
    }
}
