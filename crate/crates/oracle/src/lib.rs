//! Brute-force reference implementations.
//!
//! Everything here is written as plain nested loops over `f64` slices with
//! no shared code with the engine, so that agreement between the two is
//! meaningful. Layouts are row-major; linear weights are `[in, out]` and are
//! applied as `x · W`.

/// Cross-correlation. `x: [b, c, h, w]`, `w: [o, c, k, k]`.
pub fn conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [b, c, h, wd] = xs;
    let [o, wc, k, _] = ws;
    assert_eq!(c, wc);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[oi]);
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((bi * c + ci) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w[((oi * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((bi * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, [b, o, oh, ow])
}

/// Transposed convolution by scattering every input pixel through the
/// kernel. `x: [b, ci, h, w]`, `w: [ci, co, k, k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [b, ci, h, wd] = xs;
    let [wci, co, k, _] = ws;
    assert_eq!(ci, wci);
    let oh = (h - 1) * stride + k + output_padding - 2 * pad;
    let ow = (wd - 1) * stride + k + output_padding - 2 * pad;
    let mut out = vec![0.0; b * co * oh * ow];
    for bi in 0..b {
        for o in 0..co {
            let bv = bias.map_or(0.0, |bb| bb[o]);
            for p in 0..oh * ow {
                out[(bi * co + o) * oh * ow + p] = bv;
            }
        }
        for c in 0..ci {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x[((bi * ci + c) * h + iy) * wd + ix];
                    for o in 0..co {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (iy * stride + ky) as isize - pad as isize;
                                let xx = (ix * stride + kx) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= oh as isize || xx >= ow as isize {
                                    continue;
                                }
                                out[((bi * co + o) * oh + y as usize) * ow + xx as usize] += xv * w[((c * co + o) * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [b, co, oh, ow])
}

/// Training-mode batch norm over every axis except axis 1 (biased variance).
pub fn batch_norm(x: &[f64], shape: &[usize], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let (b, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let count = (b * plane) as f64;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let mut mean = 0.0;
        for bi in 0..b {
            for p in 0..plane {
                mean += x[(bi * c + ch) * plane + p];
            }
        }
        mean /= count;
        let mut var = 0.0;
        for bi in 0..b {
            for p in 0..plane {
                var += (x[(bi * c + ch) * plane + p] - mean).powi(2);
            }
        }
        var /= count;
        for bi in 0..b {
            for p in 0..plane {
                let i = (bi * c + ch) * plane + p;
                out[i] = gamma[ch] * (x[i] - mean) / (var + eps).sqrt() + beta[ch];
            }
        }
    }
    out
}

/// Layer norm over rows of length `d`.
pub fn layer_norm(x: &[f64], d: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / d {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            out[r * d + j] = gamma[j] * (row[j] - mean) / (var + eps).sqrt() + beta[j];
        }
    }
    out
}

/// `[n, d] · [d, m]`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, d: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for t in 0..d {
                acc += a[i * d + t] * b[t * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Non-overlapping max pool over `planes` images of `h x w`.
pub fn max_pool(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![f64::NEG_INFINITY; planes * oh * ow];
    for p in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                let o = &mut out[(p * oh + y / f) * ow + xx / f];
                *o = o.max(x[(p * h + y) * w + xx]);
            }
        }
    }
    out
}

pub fn upsample_nearest(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * f * f);
    for p in 0..planes {
        for y in 0..h * f {
            for xx in 0..w * f {
                out.push(x[(p * h + y / f) * w + xx / f]);
            }
        }
    }
    out
}

/// Half-pixel bilinear upsampling, source coordinates clamped to the image.
pub fn upsample_bilinear(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let src = |i: usize, n: usize| -> f64 { ((i as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (n - 1) as f64) };
    let sample = |p: usize, sy: f64, sx: f64| -> f64 {
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
        let at = |yy: usize, xx: usize| x[(p * h + yy) * w + xx];
        let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
        let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
        top * (1.0 - ty) + bottom * ty
    };
    let mut out = Vec::with_capacity(x.len() * f * f);
    for p in 0..planes {
        for y in 0..h * f {
            for xx in 0..w * f {
                out.push(sample(p, src(y, h), src(xx, w)));
            }
        }
    }
    out
}

/// Standard normal CDF by composite Simpson integration of the density.
pub fn normal_cdf(x: f64) -> f64 {
    const STEPS: usize = 4000;
    let density = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let h = x / STEPS as f64;
    let mut acc = density(0.0) + density(x);
    for i in 1..STEPS {
        acc += density(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 + acc * h / 3.0
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Mean over rows of `1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)`.
pub fn dice_loss(pred: &[f64], target: &[f64], rows: usize, eps: f64) -> f64 {
    let len = pred.len() / rows;
    let mut total = 0.0;
    for r in 0..rows {
        let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
        for i in r * len..(r + 1) * len {
            inter += pred[i] * target[i];
            sp += pred[i];
            st += target[i];
        }
        total += 1.0 - (2.0 * inter + eps) / (sp + st + eps);
    }
    total / rows as f64
}

/// Folds each `r x r` block of an `[h, w, d]` map into `r*r*d` channels
/// (channel index `(ry * r + rx) * d + c`) and projects with `w_sr: [r*r*d, d]`.
pub fn spatial_reduce(f: &[f64], h: usize, w: usize, d: usize, r: usize, w_sr: &[f64]) -> Vec<f64> {
    let (hr, wr) = (h / r, w / r);
    let mut out = vec![0.0; hr * wr * d];
    for by in 0..hr {
        for bx in 0..wr {
            for o in 0..d {
                let mut acc = 0.0;
                for ry in 0..r {
                    for rx in 0..r {
                        for c in 0..d {
                            let src = f[((by * r + ry) * w + bx * r + rx) * d + c];
                            acc += src * w_sr[((ry * r + rx) * d + c) * d + o];
                        }
                    }
                }
                out[(by * wr + bx) * d + o] = acc;
            }
        }
    }
    out
}

pub struct Projections<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wp: &'a [f64],
}

/// Multi-head cross-attention of `n` query tokens against `m` key tokens.
/// Returns the projected contribution `[n, d]` (no residual) and per-head
/// attention maps `[heads][n * m]`.
pub fn cross_attend(query: &[f64], context: &[f64], d: usize, heads: usize, proj: &Projections<'_>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = query.len() / d;
    let m = context.len() / d;
    let dh = d / heads;
    let q = matmul(query, proj.wq, n, d, d);
    let k = matmul(context, proj.wk, m, d, d);
    let v = matmul(context, proj.wv, m, d, d);
    let mut concat = vec![0.0; n * d];
    let mut maps = Vec::new();
    for g in 0..heads {
        let mut map = vec![0.0; n * m];
        for i in 0..n {
            let mut scores = vec![0.0; m];
            for (j, s) in scores.iter_mut().enumerate() {
                for c in g * dh..(g + 1) * dh {
                    *s += q[i * d + c] * k[j * d + c];
                }
                *s /= (dh as f64).sqrt();
            }
            let a = softmax(&scores);
            for j in 0..m {
                map[i * m + j] = a[j];
                for c in g * dh..(g + 1) * dh {
                    concat[i * d + c] += a[j] * v[j * d + c];
                }
            }
        }
        maps.push(map);
    }
    (matmul(&concat, proj.wp, n, d, d), maps)
}

pub struct Linear<'a> {
    pub w: &'a [f64],
    pub b: &'a [f64],
}

impl Linear<'_> {
    pub fn apply(&self, x: &[f64], d_in: usize) -> Vec<f64> {
        let d_out = self.b.len();
        let mut y = matmul(x, self.w, x.len() / d_in, d_in, d_out);
        for (i, v) in y.iter_mut().enumerate() {
            *v += self.b[i % d_out];
        }
        y
    }
}

pub struct Feedforward<'a> {
    pub ln_gamma: &'a [f64],
    pub ln_beta: &'a [f64],
    pub fc1: Linear<'a>,
    pub fc2: Linear<'a>,
}

/// Pools per-tile contributions with a 1x1 convolution over the tile-major
/// channel concatenation, adds the residual `f`, then applies
/// `x + fc2(gelu(fc1(ln(x))))`.
pub fn attentive_pool(f: &[f64], contributions: &[Vec<f64>], d: usize, pool: &Linear<'_>, ffm: &Feedforward<'_>, eps: f64) -> Vec<f64> {
    let n = f.len() / d;
    let tiles = contributions.len();
    let mut cat = vec![0.0; n * tiles * d];
    for t in 0..n {
        for (i, contrib) in contributions.iter().enumerate() {
            for c in 0..d {
                cat[t * tiles * d + i * d + c] = contrib[t * d + c];
            }
        }
    }
    let pooled = pool.apply(&cat, tiles * d);
    let fused: Vec<f64> = f.iter().zip(&pooled).map(|(a, b)| a + b).collect();
    let normed = layer_norm(&fused, d, ffm.ln_gamma, ffm.ln_beta, eps);
    let hidden: Vec<f64> = ffm.fc1.apply(&normed, d).into_iter().map(gelu).collect();
    let d_ff = ffm.fc1.b.len();
    let out = ffm.fc2.apply(&hidden, d_ff);
    fused.iter().zip(&out).map(|(a, b)| a + b).collect()
}

pub struct Fusion<'a> {
    /// `[c, 2c]` output-by-input, central channels first.
    pub w: &'a [f64],
    pub b: &'a [f64],
}

/// Context-fused skip feature for one sample.
///
/// `central: [c, h, w]`, `context: [tiles, c, h, w]`, `attn: [heads][h*w * tiles*hl*wl]`.
#[allow(clippy::too_many_arguments)]
pub fn fuse_skip(
    central: &[f64],
    context: &[f64],
    tiles: usize,
    c: usize,
    h: usize,
    w: usize,
    hl: usize,
    wl: usize,
    attn: &[Vec<f64>],
    fusion: &Fusion<'_>,
) -> Vec<f64> {
    let heads = attn.len();
    let cg = c / heads;
    let f = h / hl;
    let keys = tiles * hl * wl;
    // tokens[key][channel]
    let mut tokens = vec![f64::NEG_INFINITY; keys * c];
    for t in 0..tiles {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let key = (t * hl + y / f) * wl + x / f;
                    let v = context[((t * c + ch) * h + y) * w + x];
                    tokens[key * c + ch] = tokens[key * c + ch].max(v);
                }
            }
        }
    }
    let mut fused_ctx = vec![0.0; c * h * w];
    for g in 0..heads {
        for q in 0..h * w {
            for ch in g * cg..(g + 1) * cg {
                let mut acc = 0.0;
                for key in 0..keys {
                    acc += attn[g][q * keys + key] * tokens[key * c + ch];
                }
                fused_ctx[ch * h * w + q] = acc;
            }
        }
    }
    let mut out = vec![0.0; c * h * w];
    for o in 0..c {
        for q in 0..h * w {
            let mut acc = fusion.b[o];
            for i in 0..c {
                acc += fusion.w[o * 2 * c + i] * central[i * h * w + q];
                acc += fusion.w[o * 2 * c + c + i] * fused_ctx[i * h * w + q];
            }
            out[o * h * w + q] = acc;
        }
    }
    out
}

/// Scalar Adam, one coordinate, `t` starting at 1.
pub fn adam(theta: f64, grads: &[f64], lr: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v, mut th) = (0.0, 0.0, theta);
    for (i, &g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        th -= lr * mh / (vh.sqrt() + eps);
    }
    th
}
