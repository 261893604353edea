//! Spatio-temporal context transformer and attention-guided skip fusion.
//!
//! Token tensors are channel-last: a bottleneck grid of `H x W` positions
//! with `D` channels is `[.., H * W, D]`. Linear weights are `[in, out]`.
//! The central tile is slot 0 of the tile axis; context tiles follow in
//! stack order (spatial neighbours in raster order, then temporal ones).

use spatem_tensor::{Mode, Rng, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Counter under which the score and value products are tallied.
pub const ATTENTION_COUNTER: &str = "attention";

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub reduction: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} heads do not divide embed dim {}", self.heads, self.embed_dim)));
        }
        if self.reduction == 0 || !h.is_multiple_of(self.reduction) || !w.is_multiple_of(self.reduction) {
            return Err(Error::Config(format!("reduction {} does not divide {h}x{w}", self.reduction)));
        }
        Ok(())
    }
}

/// Tape handles for every transformer weight.
#[derive(Debug, Clone, Copy)]
pub struct TransformerVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    /// `[tiles + 1, H, W, D]`, slot 0 for the central tile.
    pub pos: Var,
    /// `[R * R * D, D]`
    pub w_sr: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_p: Var,
    /// 1x1 convolution over the tile-major concatenation, stored `[tiles * D, D]`.
    pub pool_w: Var,
    pub pool_b: Var,
    pub ffm: FeedForwardVars,
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardVars {
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// Dropout state for one forward pass; `None` in eval mode.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

fn dims<T: spatem_tensor::Float>(tape: &Tape<T>, v: Var, rank: usize, what: &str) -> Result<Vec<usize>> {
    let s = tape.shape(v).to_vec();
    if s.len() != rank {
        return Err(Error::Config(format!("{what}: expected rank {rank}, got shape {s:?}")));
    }
    Ok(s)
}

/// Adds slot `t` of `pos: [tiles, H, W, D]` to tile `t` of `x: [B, tiles, H * W, D]`.
pub fn add_positional<T: spatem_tensor::Float>(tape: &mut Tape<T>, x: Var, pos: Var) -> Result<Var> {
    let xs = dims(tape, x, 4, "add_positional input")?;
    let ps = dims(tape, pos, 4, "positional embeddings")?;
    if ps[0] != xs[1] || ps[1] * ps[2] != xs[2] || ps[3] != xs[3] {
        return Err(Error::Config(format!("embedding slots {ps:?} do not match tokens {xs:?}")));
    }
    let flat = tape.reshape(pos, &[ps[0], ps[1] * ps[2], ps[3]])?;
    Ok(tape.add_bias(x, flat)?)
}

/// Folds every `r x r` block of `x: [.., H, W, D]` into `r * r * D` channels
/// (channel `(ry * r + rx) * D + c`) and projects back to `D`.
/// Returns `[.., (H / r) * (W / r), D]`.
pub fn spatial_reduce<T: spatem_tensor::Float>(tape: &mut Tape<T>, x: Var, r: usize, w_sr: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() < 3 {
        return Err(Error::Config(format!("spatial_reduce needs [.., H, W, D], got {s:?}")));
    }
    let (lead, hwd) = s.split_at(s.len() - 3);
    let (h, w, d) = (hwd[0], hwd[1], hwd[2]);
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Config(format!("reduction {r} does not divide {h}x{w}")));
    }
    let b: usize = lead.iter().product();
    let (hr, wr) = (h / r, w / r);
    let blocks = tape.reshape(x, &[b, hr, r, wr, r, d])?;
    let blocks = tape.permute(blocks, &[0, 1, 3, 2, 4, 5])?;
    let mut folded_shape = lead.to_vec();
    folded_shape.extend_from_slice(&[hr * wr, r * r * d]);
    let folded = tape.reshape(blocks, &folded_shape)?;
    Ok(tape.matmul(folded, w_sr)?)
}

/// Raw multi-head attention on already projected tensors.
///
/// `q: [.., N, D]`, `k, v: [.., M, D]` with broadcastable leading axes.
/// Returns `(A V` with heads concatenated `[.., N, D]`, maps `[.., heads, N, M])`.
pub fn attend<T: spatem_tensor::Float>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    let d = qs[qs.len() - 1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide {d}")));
    }
    let dh = d / heads;
    let split = |tape: &mut Tape<T>, x: Var, shape: &[usize], transpose: bool| -> Result<Var> {
        let r = shape.len();
        let mut s = shape[..r - 1].to_vec();
        s.extend_from_slice(&[heads, dh]);
        let x = tape.reshape(x, &s)?;
        // [.., T, h, dh] -> [.., h, T, dh] or [.., h, dh, T]
        let mut perm: Vec<usize> = (0..r - 2).collect();
        perm.extend(if transpose { [r - 1, r, r - 2] } else { [r - 1, r - 2, r] });
        Ok(tape.permute(x, &perm)?)
    };
    let qh = split(tape, q, &qs, false)?;
    let kt = split(tape, k, &ks, true)?;
    let vh = split(tape, v, &vs, false)?;
    let scores = tape.matmul_counted(qh, kt, ATTENTION_COUNTER)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let maps = tape.softmax_last(scores)?;
    let out = tape.matmul_counted(maps, vh, ATTENTION_COUNTER)?;
    // [.., h, N, dh] -> [.., N, h, dh] -> [.., N, D]
    let r = tape.shape(out).len();
    let mut perm: Vec<usize> = (0..r - 3).collect();
    perm.extend([r - 2, r - 3, r - 1]);
    let out = tape.permute(out, &perm)?;
    let mut s = tape.shape(out)[..r - 2].to_vec();
    s.push(d);
    Ok((tape.reshape(out, &s)?, maps))
}

/// Per-tile cross-attention contributions and maps.
pub struct Attended {
    /// `[B, I, N, D]`, no residual.
    pub contributions: Var,
    /// `[B, I, heads, N, M]`
    pub maps: Var,
}

/// Central queries `[B, N, D]` against reduced context tiles `[B, I, M, D]`
/// with shared projection weights.
pub fn cross_attend<T: spatem_tensor::Float>(
    tape: &mut Tape<T>,
    central: Var,
    reduced: Var,
    heads: usize,
    vars: &TransformerVars,
) -> Result<Attended> {
    let cs = dims(tape, central, 3, "central tokens")?;
    let rs = dims(tape, reduced, 4, "context tokens")?;
    if cs[0] != rs[0] || cs[2] != rs[3] {
        return Err(Error::Config(format!("central {cs:?} incompatible with context {rs:?}")));
    }
    let q = tape.matmul(central, vars.w_q)?;
    let q = tape.reshape(q, &[cs[0], 1, cs[1], cs[2]])?;
    let k = tape.matmul(reduced, vars.w_k)?;
    let v = tape.matmul(reduced, vars.w_v)?;
    let (heads_out, maps) = attend(tape, q, k, v, heads)?;
    let contributions = tape.matmul(heads_out, vars.w_p)?;
    Ok(Attended { contributions, maps })
}

/// `x + fc2(drop(gelu(fc1(ln(x)))))` with dropout after each linear.
pub fn feed_forward<T: spatem_tensor::Float>(
    tape: &mut Tape<T>,
    x: Var,
    ffm: &FeedForwardVars,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let h = tape.layer_norm(x, ffm.ln_gamma, ffm.ln_beta, LN_EPS)?;
    let h = tape.matmul(h, ffm.fc1_w)?;
    let h = tape.add_bias(h, ffm.fc1_b)?;
    let mut h = tape.gelu(h)?;
    if let Some(d) = dropout.as_deref_mut() {
        h = tape.dropout(h, d.rate, d.rng)?;
    }
    let h = tape.matmul(h, ffm.fc2_w)?;
    let mut h = tape.add_bias(h, ffm.fc2_b)?;
    if let Some(d) = dropout {
        h = tape.dropout(h, d.rate, d.rng)?;
    }
    Ok(tape.add(x, h)?)
}

/// Fuses `[B, I, N, D]` contributions into the central `f: [B, N, D]`:
/// 1x1 convolution over the tile-major channel concatenation, residual
/// add of `f`, then the feed-forward module.
pub fn attentive_pool<T: spatem_tensor::Float>(
    tape: &mut Tape<T>,
    f: Var,
    contributions: Var,
    pool_w: Var,
    pool_b: Var,
    ffm: &FeedForwardVars,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let fs = dims(tape, f, 3, "central feature")?;
    let cs = dims(tape, contributions, 4, "contributions")?;
    if cs[0] != fs[0] || cs[2] != fs[1] || cs[3] != fs[2] {
        return Err(Error::Config(format!("contributions {cs:?} do not match feature {fs:?}")));
    }
    let cat = tape.permute(contributions, &[0, 2, 1, 3])?;
    let cat = tape.reshape(cat, &[cs[0], cs[2], cs[1] * cs[3]])?;
    let pooled = tape.matmul(cat, pool_w)?;
    let pooled = tape.add_bias(pooled, pool_b)?;
    let fused = tape.add(f, pooled)?;
    feed_forward(tape, fused, ffm, dropout)
}

/// Output of the bottleneck transformer.
pub struct TransformerOut {
    /// Fused central feature `[B, N, D]`.
    pub fused: Var,
    /// `[B, I, heads, N, M]`
    pub maps: Var,
}

/// Full bottleneck block on raw (pre-norm) tokens `[B, 1 + I, H, W, D]`.
pub fn transformer<T: spatem_tensor::Float>(
    tape: &mut Tape<T>,
    tokens: Var,
    vars: &TransformerVars,
    cfg: &AttentionConfig,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<TransformerOut> {
    let s = dims(tape, tokens, 5, "transformer tokens")?;
    let (b, slots, h, w, d) = (s[0], s[1], s[2], s[3], s[4]);
    cfg.validate(h, w)?;
    if slots < 2 || d != cfg.embed_dim {
        return Err(Error::Config(format!("transformer needs >= 1 context tile and D = {}, got {s:?}", cfg.embed_dim)));
    }
    let n = h * w;
    let flat = tape.reshape(tokens, &[b, slots, n, d])?;
    let normed = tape.layer_norm(flat, vars.ln1_gamma, vars.ln1_beta, LN_EPS)?;
    let embedded = add_positional(tape, normed, vars.pos)?;
    let central = tape.narrow(embedded, 1, 0, 1)?;
    let central = tape.reshape(central, &[b, n, d])?;
    let context = tape.narrow(embedded, 1, 1, slots - 1)?;
    let context = tape.reshape(context, &[b, slots - 1, h, w, d])?;
    let reduced = spatial_reduce(tape, context, cfg.reduction, vars.w_sr)?;
    let attended = cross_attend(tape, central, reduced, cfg.heads, vars)?;
    let residual = tape.narrow(flat, 1, 0, 1)?;
    let residual = tape.reshape(residual, &[b, n, d])?;
    let fused = attentive_pool(tape, residual, attended.contributions, vars.pool_w, vars.pool_b, &vars.ffm, dropout)?;
    Ok(TransformerOut { fused, maps: attended.maps })
}

/// Reorders bottleneck maps `[B, I, heads, N, M]` to `[B, heads, H_l * W_l, I * M]`
/// at depth `l` of `depths`, interpolating only the query axis.
pub fn upsample_attention<T: spatem_tensor::Float>(
    tape: &mut Tape<T>,
    maps: Var,
    grid: (usize, usize),
    depth: usize,
    depths: usize,
    mode: spatem_tensor::UpsampleMode,
) -> Result<Var> {
    if depth == 0 || depth > depths {
        return Err(Error::Config(format!("depth {depth} outside 1..={depths}")));
    }
    let s = dims(tape, maps, 5, "attention maps")?;
    let (b, tiles, heads, n, m) = (s[0], s[1], s[2], s[3], s[4]);
    let (h, w) = grid;
    if h * w != n {
        return Err(Error::Config(format!("grid {h}x{w} does not match {n} queries")));
    }
    let factor = 1usize << (depths - depth);
    let keys = tiles * m;
    let x = tape.permute(maps, &[0, 2, 1, 4, 3])?;
    let x = tape.reshape(x, &[b, heads, keys, h, w])?;
    let x = if factor > 1 { tape.upsample(x, factor, mode)? } else { x };
    let x = tape.reshape(x, &[b, heads, keys, n * factor * factor])?;
    Ok(tape.permute(x, &[0, 1, 3, 2])?)
}

/// Context-fused skip feature at one depth.
///
/// `central: [B, C, H, W]`, `context: [B, I, C, H, W]`,
/// `attn: [B, heads, H * W, I * h * w]` where `(h, w)` is the reduced key grid.
pub fn fuse_skip<T: spatem_tensor::Float>(
    tape: &mut Tape<T>,
    central: Var,
    context: Var,
    attn: Var,
    keys_grid: (usize, usize),
    fuse_w: Var,
    fuse_b: Var,
) -> Result<Var> {
    let cs = dims(tape, central, 4, "central skip")?;
    let xs = dims(tape, context, 5, "context skip")?;
    let as_ = dims(tape, attn, 4, "skip attention")?;
    let (b, c, h, w) = (cs[0], cs[1], cs[2], cs[3]);
    let (tiles, heads) = (xs[1], as_[1]);
    let (hl, wl) = keys_grid;
    if xs != [b, tiles, c, h, w] || as_ != [b, heads, h * w, tiles * hl * wl] {
        return Err(Error::Config(format!("skip shapes central {cs:?}, context {xs:?}, attention {as_:?} disagree")));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide {c} channels")));
    }
    if hl == 0 || wl == 0 || h % hl != 0 || w % wl != 0 || h / hl != w / wl {
        return Err(Error::Config(format!("key grid {hl}x{wl} does not tile {h}x{w}")));
    }
    let cg = c / heads;
    let pooled = tape.max_pool(context, h / hl)?;
    let tokens = tape.reshape(pooled, &[b, tiles, heads, cg, hl * wl])?;
    let tokens = tape.permute(tokens, &[0, 2, 1, 4, 3])?;
    let tokens = tape.reshape(tokens, &[b, heads, tiles * hl * wl, cg])?;
    let fused = tape.matmul(attn, tokens)?;
    let fused = tape.permute(fused, &[0, 1, 3, 2])?;
    let fused = tape.reshape(fused, &[b, c, h, w])?;
    let cat = tape.concat(&[central, fused], 1)?;
    Ok(tape.conv2d(cat, fuse_w, Some(fuse_b), spatem_tensor::Conv2dSpec::new(1, 0))?)
}

/// Bottleneck attention of one sample, `[tiles, heads, N, M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub maps: Tensor<f32>,
    /// Query grid `(H_L, W_L)`.
    pub queries: (usize, usize),
    /// Key grid `(h_L, w_L)`.
    pub keys: (usize, usize),
}

impl AttentionStack {
    pub fn tiles(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.maps.shape()[1]
    }

    /// `[tiles, N, M]`, the elementwise maximum over heads.
    pub fn max_over_heads(&self) -> Tensor<f32> {
        let s = self.maps.shape();
        let (tiles, heads, nm) = (s[0], s[1], s[2] * s[3]);
        Tensor::from_fn(&[tiles, s[2], s[3]], |i| {
            let (t, j) = (i / nm, i % nm);
            (0..heads).map(|g| self.maps.data()[(t * heads + g) * nm + j]).fold(f32::NEG_INFINITY, f32::max)
        })
    }

    /// Per-tile key heatmap `[h_L, w_L]`: max over heads, mean over queries.
    pub fn key_heatmap(&self, tile: usize) -> Vec<f32> {
        let maxed = self.max_over_heads();
        let (n, m) = (self.maps.shape()[2], self.maps.shape()[3]);
        let rows = &maxed.data()[tile * n * m..(tile + 1) * n * m];
        (0..m).map(|j| rows.chunks(m).map(|r| r[j]).sum::<f32>() / n as f32).collect()
    }

    /// Deviation of each softmax row sum from one, maximised.
    pub fn max_row_error(&self) -> f32 {
        let m = self.maps.shape()[3];
        self.maps.data().chunks(m).map(|r| (r.iter().sum::<f32>() - 1.0).abs()).fold(0.0, f32::max)
    }
}

/// Whether dropout applies in `mode`.
pub fn dropout_for<'a>(mode: Mode, rate: f64, rng: &'a mut Rng) -> Option<Dropout<'a>> {
    (mode == Mode::Train && rate > 0.0).then_some(Dropout { rate, rng })
}
