//! Random small instances of the context-attention ops, each compared with
//! the naive loop oracle. Every case returns the largest absolute deviation.

use spatem::attention::{self, FeedForwardVars, TransformerVars};
use spatem_oracle as oracle;
use spatem_tensor::{Rng, Tape, Tensor, Var};

pub const ORACLE_TOL: f64 = 1e-5;

pub fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.uniform_tensor(shape, -1.0, 1.0)
}

fn pick(rng: &mut Rng, options: &[usize]) -> usize {
    options[rng.below(options.len())]
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Weights of one transformer block, in the order [`bind`] expects.
pub struct Weights {
    pub tensors: Vec<Tensor<f64>>,
}

impl Weights {
    /// `slots` = tiles including the central one.
    pub fn random(rng: &mut Rng, slots: usize, h: usize, w: usize, d: usize, r: usize, dff: usize) -> Self {
        let ln1_g = rng.uniform_tensor(&[d], 0.5, 1.5);
        let ln2_g = rng.uniform_tensor(&[d], 0.5, 1.5);
        Self {
            tensors: vec![
                ln1_g,
                rand(rng, &[d]),
                rand(rng, &[slots, h, w, d]),
                rand(rng, &[r * r * d, d]),
                rand(rng, &[d, d]),
                rand(rng, &[d, d]),
                rand(rng, &[d, d]),
                rand(rng, &[d, d]),
                rand(rng, &[(slots - 1) * d, d]),
                rand(rng, &[d]),
                ln2_g,
                rand(rng, &[d]),
                rand(rng, &[d, dff]),
                rand(rng, &[dff]),
                rand(rng, &[dff, d]),
                rand(rng, &[d]),
            ],
        }
    }
}

pub fn bind(v: &[Var]) -> TransformerVars {
    TransformerVars {
        ln1_gamma: v[0],
        ln1_beta: v[1],
        pos: v[2],
        w_sr: v[3],
        w_q: v[4],
        w_k: v[5],
        w_v: v[6],
        w_p: v[7],
        pool_w: v[8],
        pool_b: v[9],
        ffm: FeedForwardVars { ln_gamma: v[10], ln_beta: v[11], fc1_w: v[12], fc1_b: v[13], fc2_w: v[14], fc2_b: v[15] },
    }
}

pub fn constants(tape: &mut Tape<f64>, ts: &[Tensor<f64>]) -> Vec<Var> {
    ts.iter().map(|t| tape.constant(t.clone())).collect()
}

/// Spatial reduction over random leading axes.
pub fn sra_case(rng: &mut Rng) -> f64 {
    let r = pick(rng, &[1, 2, 3]);
    let (h, w) = (r * (1 + rng.below(3)), r * (1 + rng.below(3)));
    let d = 1 + rng.below(5);
    let (b, tiles) = (1 + rng.below(2), 1 + rng.below(3));
    let x = rand(rng, &[b, tiles, h, w, d]);
    let wsr = rand(rng, &[r * r * d, d]);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(wsr.clone()));
    let y = attention::spatial_reduce(&mut tape, xv, r, wv).unwrap();
    let got = tape.value(y).data();
    let per = h * w * d;
    let out_per = (h / r) * (w / r) * d;
    (0..b * tiles)
        .map(|i| {
            let want = oracle::spatial_reduce(&x.data()[i * per..(i + 1) * per], h, w, d, r, wsr.data());
            max_diff(&got[i * out_per..(i + 1) * out_per], &want)
        })
        .fold(0.0, f64::max)
}

/// Reduction of every context tile followed by per-tile cross-attention.
pub fn cross_attention_case(rng: &mut Rng) -> f64 {
    let heads = pick(rng, &[1, 2, 4]);
    let d = heads * (1 + rng.below(3));
    let r = pick(rng, &[1, 2]);
    let (h, w) = (r * (1 + rng.below(3)), r * (1 + rng.below(2)));
    let (b, tiles) = (1 + rng.below(2), 1 + rng.below(4));
    let n = h * w;
    let m = n / (r * r);
    let central = rand(rng, &[b, n, d]);
    let context = rand(rng, &[b, tiles, h, w, d]);
    let wts = Weights::random(rng, tiles + 1, h, w, d, r, 2 * d);

    let mut tape = Tape::new();
    let vars = bind(&constants(&mut tape, &wts.tensors));
    let (cv, xv) = (tape.constant(central.clone()), tape.constant(context.clone()));
    let reduced = attention::spatial_reduce(&mut tape, xv, r, vars.w_sr).unwrap();
    let out = attention::cross_attend(&mut tape, cv, reduced, heads, &vars).unwrap();
    assert_eq!(tape.shape(out.contributions), [b, tiles, n, d]);
    assert_eq!(tape.shape(out.maps), [b, tiles, heads, n, m]);
    let (contrib, maps) = (tape.value(out.contributions).data(), tape.value(out.maps).data());

    let t = &wts.tensors;
    let proj = oracle::Projections { wq: t[4].data(), wk: t[5].data(), wv: t[6].data(), wp: t[7].data() };
    let mut worst: f64 = 0.0;
    for bi in 0..b {
        let q = &central.data()[bi * n * d..(bi + 1) * n * d];
        for i in 0..tiles {
            let off = (bi * tiles + i) * n * d;
            let red = oracle::spatial_reduce(&context.data()[off..off + n * d], h, w, d, r, t[3].data());
            let (want, want_maps) = oracle::cross_attend(q, &red, d, heads, &proj);
            worst = worst.max(max_diff(&contrib[off..off + n * d], &want));
            for (g, map) in want_maps.iter().enumerate() {
                let moff = ((bi * tiles + i) * heads + g) * n * m;
                worst = worst.max(max_diff(&maps[moff..moff + n * m], map));
            }
        }
    }
    worst
}

/// Tile-concatenating 1x1 pooling, residual and feed-forward module.
pub fn attentive_pool_case(rng: &mut Rng) -> f64 {
    let d = 1 + rng.below(6);
    let (b, tiles, n) = (1 + rng.below(2), 1 + rng.below(4), 1 + rng.below(6));
    let dff = 1 + rng.below(8);
    let f = rand(rng, &[b, n, d]);
    let contributions = rand(rng, &[b, tiles, n, d]);
    let wts = Weights::random(rng, tiles + 1, 1, n, d, 1, dff);

    let mut tape = Tape::new();
    let vars = bind(&constants(&mut tape, &wts.tensors));
    let (fv, cv) = (tape.constant(f.clone()), tape.constant(contributions.clone()));
    let y = attention::attentive_pool(&mut tape, fv, cv, vars.pool_w, vars.pool_b, &vars.ffm, None).unwrap();
    let got = tape.value(y).data();

    let t = &wts.tensors;
    let pool = oracle::Linear { w: t[8].data(), b: t[9].data() };
    let ffm = oracle::Feedforward {
        ln_gamma: t[10].data(),
        ln_beta: t[11].data(),
        fc1: oracle::Linear { w: t[12].data(), b: t[13].data() },
        fc2: oracle::Linear { w: t[14].data(), b: t[15].data() },
    };
    (0..b)
        .map(|bi| {
            let contribs: Vec<Vec<f64>> =
                (0..tiles).map(|i| contributions.data()[(bi * tiles + i) * n * d..(bi * tiles + i + 1) * n * d].to_vec()).collect();
            let want = oracle::attentive_pool(&f.data()[bi * n * d..(bi + 1) * n * d], &contribs, d, &pool, &ffm, 1e-5);
            max_diff(&got[bi * n * d..(bi + 1) * n * d], &want)
        })
        .fold(0.0, f64::max)
}

/// Attention-weighted, max-pooled context fused into a skip feature.
pub fn fuse_skip_case(rng: &mut Rng) -> f64 {
    let heads = pick(rng, &[1, 2]);
    let c = heads * (1 + rng.below(3));
    let (hl, wl) = (1 + rng.below(2), 1 + rng.below(2));
    let f = pick(rng, &[1, 2, 4]);
    let (h, w) = (hl * f, wl * f);
    let (b, tiles) = (1 + rng.below(2), 1 + rng.below(3));
    let keys = tiles * hl * wl;
    let central = rand(rng, &[b, c, h, w]);
    let context = rand(rng, &[b, tiles, c, h, w]);
    let attn = rng.uniform_tensor::<f64>(&[b, heads, h * w, keys], 0.0, 1.0);
    let fw = rand(rng, &[c, 2 * c, 1, 1]);
    let fb = rand(rng, &[c]);

    let mut tape = Tape::new();
    let v = constants(&mut tape, &[central.clone(), context.clone(), attn.clone(), fw.clone(), fb.clone()]);
    let y = attention::fuse_skip(&mut tape, v[0], v[1], v[2], (hl, wl), v[3], v[4]).unwrap();
    let got = tape.value(y).data();

    let fusion = oracle::Fusion { w: fw.data(), b: fb.data() };
    let per = c * h * w;
    (0..b)
        .map(|bi| {
            let maps: Vec<Vec<f64>> =
                (0..heads).map(|g| attn.data()[(bi * heads + g) * h * w * keys..(bi * heads + g + 1) * h * w * keys].to_vec()).collect();
            let want = oracle::fuse_skip(
                &central.data()[bi * per..(bi + 1) * per],
                &context.data()[bi * tiles * per..(bi + 1) * tiles * per],
                tiles,
                c,
                h,
                w,
                hl,
                wl,
                &maps,
                &fusion,
            );
            max_diff(&got[bi * per..(bi + 1) * per], &want)
        })
        .fold(0.0, f64::max)
}

/// Runs `count` instances of `case` and returns the worst deviation.
pub fn sweep(seed: u64, count: usize, case: fn(&mut Rng) -> f64) -> f64 {
    let mut rng = Rng::new(seed);
    (0..count).map(|_| case(&mut rng)).fold(0.0, f64::max)
}

/// Attention multiply-accumulates for one 16x16 bottleneck tile at reduction `r`.
pub fn attention_macs(r: usize) -> u64 {
    let (hw, d, heads) = (16, 16, 4);
    let mut rng = Rng::new(21);
    let mut tape = Tape::<f64>::new();
    let central = tape.constant(rand(&mut rng, &[1, hw * hw, d]));
    let context = tape.constant(rand(&mut rng, &[1, 1, hw, hw, d]));
    let wts = Weights::random(&mut rng, 2, hw, hw, d, r, d);
    let vars = bind(&constants(&mut tape, &wts.tensors));
    let reduced = attention::spatial_reduce(&mut tape, context, r, vars.w_sr).unwrap();
    attention::cross_attend(&mut tape, central, reduced, heads, &vars).unwrap();
    tape.macs(attention::ATTENTION_COUNTER)
}
