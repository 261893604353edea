//! Encoder / context transformer / decoder assembly and the plain U-Net.
//!
//! Feature maps are NCHW. All tiles of a sample share one encoder pass: the
//! input `[B, K, 3, P, P]` is flattened to `B * K` images, so batch-norm
//! statistics in training mode cover central and context tiles together.

use spatem_tensor::{BatchNormMode, BatchStats, Bound, Conv2dSpec, Float, Mode, ParamId, ParamStore, Rng, Tape, Tensor, Var};

use crate::attention::{self, AttentionConfig, AttentionStack, FeedForwardVars, TransformerVars};
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
/// Weight on the old running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;
const PROJ_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Level {
    /// Strided down-sampling (encoder) or transposed up-sampling (decoder).
    resample: Option<Affine>,
    conv1: ConvBn,
    conv2: ConvBn,
}

#[derive(Debug, Clone, Copy)]
struct TransformerIds {
    ln1: (ParamId, ParamId),
    pos: ParamId,
    w_sr: ParamId,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_p: ParamId,
    pool: Affine,
    ln2: (ParamId, ParamId),
    fc1: Affine,
    fc2: Affine,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<Level>,
    /// Index `l - 1` holds the decoder block producing depth `l`.
    decoder: Vec<Level>,
    out: Affine,
    transformer: Option<TransformerIds>,
    /// Index `l - 1` holds the skip fusion at depth `l`.
    fuse: Vec<Affine>,
}

/// Running-statistic update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

struct Builder<T> {
    store: ParamStore<T>,
    root: Rng,
}

impl<T: Float> Builder<T> {
    fn add(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        self.store.insert(name, value, trainable).expect("parameter names are generated uniquely")
    }

    fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let t = self.root.fork(name).normal_tensor(shape, (2.0 / fan_in as f64).sqrt());
        self.add(name, t, true)
    }

    fn projection(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let mut rng = self.root.fork(name);
        let t = Tensor::from_fn(shape, |_| T::c(rng.trunc_normal(PROJ_STD)));
        self.add(name, t, true)
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> ParamId {
        self.add(name, Tensor::full(shape, T::c(value)), trainable)
    }

    fn conv_bn(&mut self, prefix: &str, cin: usize, cout: usize) -> ConvBn {
        ConvBn {
            weight: self.kaiming(&format!("{prefix}.weight"), &[cout, cin, 3, 3], cin * 9),
            gamma: self.constant(&format!("{prefix}.bn.gamma"), &[cout], 1.0, true),
            beta: self.constant(&format!("{prefix}.bn.beta"), &[cout], 0.0, true),
            mean: self.constant(&format!("{prefix}.bn.running_mean"), &[cout], 0.0, false),
            var: self.constant(&format!("{prefix}.bn.running_var"), &[cout], 1.0, false),
        }
    }

    /// `out` is the bias length: `shape[0]` normally, `shape[1]` for transposed kernels.
    fn conv(&mut self, prefix: &str, shape: [usize; 4], out: usize) -> Affine {
        let fan_in = if out == shape[0] { shape[1] } else { shape[0] } * shape[2] * shape[3];
        Affine {
            weight: self.kaiming(&format!("{prefix}.weight"), &shape, fan_in),
            bias: self.constant(&format!("{prefix}.bias"), &[out], 0.0, true),
        }
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) -> Affine {
        Affine {
            weight: self.projection(&format!("{prefix}.weight"), &[din, dout]),
            bias: self.constant(&format!("{prefix}.bias"), &[dout], 0.0, true),
        }
    }
}

impl<T: Float> Model<T> {
    /// Deterministic construction. Every parameter draws from its own stream
    /// keyed by name, so shared parts are identical across variants.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { store: ParamStore::new(), root: Rng::new(seed) };
        let l_max = config.depths;
        let mut encoder = Vec::new();
        for l in 1..=l_max {
            let c = config.channels(l);
            let (resample, cin) = if l == 1 {
                (None, 3)
            } else {
                let prev = config.channels(l - 1);
                (Some(b.conv(&format!("encoder.{l}.down"), [c, prev, 3, 3], c)), c)
            };
            let conv1 = b.conv_bn(&format!("encoder.{l}.conv1"), if l == 1 { 3 } else { cin }, c);
            let conv2 = b.conv_bn(&format!("encoder.{l}.conv2"), c, c);
            encoder.push(Level { resample, conv1, conv2 });
        }

        let mut transformer = None;
        let mut fuse = Vec::new();
        if config.variant == Variant::Uspatem {
            let d = config.embed_dim();
            let hl = config.bottleneck();
            let slots = config.context_tiles() + 1;
            let r = config.reduction;
            let dff = d * config.ffn_ratio;
            transformer = Some(TransformerIds {
                ln1: (b.constant("transformer.ln1.gamma", &[d], 1.0, true), b.constant("transformer.ln1.beta", &[d], 0.0, true)),
                pos: b.constant("transformer.pos_embed", &[slots, hl, hl, d], 0.0, true),
                w_sr: b.projection("transformer.sr.weight", &[r * r * d, d]),
                w_q: b.projection("transformer.q.weight", &[d, d]),
                w_k: b.projection("transformer.k.weight", &[d, d]),
                w_v: b.projection("transformer.v.weight", &[d, d]),
                w_p: b.projection("transformer.proj.weight", &[d, d]),
                pool: b.linear("transformer.pool", (slots - 1) * d, d),
                ln2: (b.constant("transformer.ln2.gamma", &[d], 1.0, true), b.constant("transformer.ln2.beta", &[d], 0.0, true)),
                fc1: b.linear("transformer.ffm.fc1", d, dff),
                fc2: b.linear("transformer.ffm.fc2", dff, d),
            });
            for l in 1..l_max {
                let c = config.channels(l);
                fuse.push(b.conv(&format!("fuse.{l}"), [c, 2 * c, 1, 1], c));
            }
        }

        let mut decoder = Vec::new();
        for l in 1..l_max {
            let (c, above) = (config.channels(l), config.channels(l + 1));
            decoder.push(Level {
                resample: Some(b.conv(&format!("decoder.{l}.up"), [above, c, 3, 3], c)),
                conv1: b.conv_bn(&format!("decoder.{l}.conv1"), 2 * c, c),
                conv2: b.conv_bn(&format!("decoder.{l}.conv2"), c, c),
            });
        }
        let c1 = config.channels(1);
        let out = b.conv("out_conv", [config.classes, c1, 1, 1], config.classes);
        let layout = Layout { encoder, decoder, out, transformer, fuse };
        Ok(Self { config, params: b.store, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        for u in updates {
            let mut mean = self.params.get(u.mean).value.data().to_vec();
            let mut var = self.params.get(u.var).value.data().to_vec();
            u.stats.blend_into(&mut mean, &mut var, BN_MOMENTUM);
            self.params.get_mut(u.mean).value.data_mut().copy_from_slice(&mean);
            self.params.get_mut(u.var).value.data_mut().copy_from_slice(&var);
        }
    }

    fn attention_config(&self) -> AttentionConfig {
        let d = self.config.embed_dim();
        AttentionConfig {
            heads: self.config.heads,
            reduction: self.config.reduction,
            embed_dim: d,
            ffn_dim: d * self.config.ffn_ratio,
            dropout: self.config.dropout,
        }
    }

    fn transformer_vars(&self, bound: &Bound) -> Option<TransformerVars> {
        self.layout.transformer.map(|t| TransformerVars {
            ln1_gamma: bound.var(t.ln1.0),
            ln1_beta: bound.var(t.ln1.1),
            pos: bound.var(t.pos),
            w_sr: bound.var(t.w_sr),
            w_q: bound.var(t.w_q),
            w_k: bound.var(t.w_k),
            w_v: bound.var(t.w_v),
            w_p: bound.var(t.w_p),
            pool_w: bound.var(t.pool.weight),
            pool_b: bound.var(t.pool.bias),
            ffm: FeedForwardVars {
                ln_gamma: bound.var(t.ln2.0),
                ln_beta: bound.var(t.ln2.1),
                fc1_w: bound.var(t.fc1.weight),
                fc1_b: bound.var(t.fc1.bias),
                fc2_w: bound.var(t.fc2.weight),
                fc2_b: bound.var(t.fc2.bias),
            },
        })
    }
}

/// Everything a forward pass exposes.
pub struct ForwardOut<T> {
    /// Per-class probabilities `[B, classes, P, P]`.
    pub probs: Var,
    /// Decoder input `[B, C_L, H_L, W_L]`.
    pub bottleneck: Var,
    /// Skip features fed to the decoder, index `l - 1` for depth `l`.
    pub skips: Vec<Var>,
    /// Bottleneck attention `[B, I, heads, N, M]` when the transformer ran.
    pub maps: Option<Var>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

struct Pass<'a, T> {
    model: &'a Model<T>,
    bound: &'a Bound,
    mode: Mode,
    updates: Vec<BnUpdate<T>>,
}

impl<T: Float> Pass<'_, T> {
    fn conv_bn_relu(&mut self, tape: &mut Tape<T>, x: Var, ids: ConvBn) -> Result<Var> {
        let w = self.bound.var(ids.weight);
        let y = tape.conv2d(x, w, None, Conv2dSpec::new(1, 1))?;
        let (gamma, beta) = (self.bound.var(ids.gamma), self.bound.var(ids.beta));
        let params = self.model.params();
        let y = match self.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(y, gamma, beta, BatchNormMode::Train, BN_EPS)?;
                let stats = stats.expect("training-mode batch norm yields statistics");
                self.updates.push(BnUpdate { mean: ids.mean, var: ids.var, stats });
                y
            }
            Mode::Eval => {
                let mean = params.get(ids.mean).value.data();
                let var = params.get(ids.var).value.data();
                tape.batch_norm(y, gamma, beta, BatchNormMode::Eval { mean, var }, BN_EPS)?.0
            }
        };
        Ok(tape.relu(y)?)
    }

    fn affine_conv(&self, tape: &mut Tape<T>, x: Var, ids: Affine, spec: Conv2dSpec) -> Result<Var> {
        Ok(tape.conv2d(x, self.bound.var(ids.weight), Some(self.bound.var(ids.bias)), spec)?)
    }

    fn check_level(&self, tape: &Tape<T>, x: Var, images: usize, l: usize) -> Result<()> {
        let cfg = &self.model.config;
        let want = [images, cfg.channels(l), cfg.extent(l), cfg.extent(l)];
        if tape.shape(x) != want {
            return Err(Error::Config(format!("depth {l}: feature shape {:?}, expected {want:?}", tape.shape(x))));
        }
        Ok(())
    }

    /// Encoder features at every depth for `images` flattened tiles.
    fn encode(&mut self, tape: &mut Tape<T>, x: Var, images: usize) -> Result<Vec<Var>> {
        let mut feats = Vec::new();
        let mut h = x;
        for (i, level) in self.model.layout.encoder.iter().enumerate() {
            if let Some(down) = level.resample {
                h = self.affine_conv(tape, h, down, Conv2dSpec::new(2, 1))?;
            }
            h = self.conv_bn_relu(tape, h, level.conv1)?;
            h = self.conv_bn_relu(tape, h, level.conv2)?;
            self.check_level(tape, h, images, i + 1)?;
            feats.push(h);
        }
        Ok(feats)
    }

    fn decode(&mut self, tape: &mut Tape<T>, bottleneck: Var, skips: &[Var], batch: usize) -> Result<Var> {
        let mut h = bottleneck;
        for l in (1..self.model.config.depths).rev() {
            let level = &self.model.layout.decoder[l - 1];
            let up = level.resample.expect("decoder levels up-sample");
            h = self.affine_conv(tape, h, up, Conv2dSpec::transposed(2, 1, 1))?;
            h = tape.concat(&[skips[l - 1], h], 1)?;
            h = self.conv_bn_relu(tape, h, level.conv1)?;
            h = self.conv_bn_relu(tape, h, level.conv2)?;
            self.check_level(tape, h, batch, l)?;
        }
        let logits = self.affine_conv(tape, h, self.model.layout.out, Conv2dSpec::new(1, 0))?;
        Ok(tape.sigmoid(logits)?)
    }
}

impl<T: Float> Model<T> {
    fn check_input(&self, tape: &Tape<T>, input: Var, tiles: usize) -> Result<usize> {
        let s = tape.shape(input);
        let p = self.config.tile_size;
        if s.len() != 5 || s[1] != tiles || s[2] != 3 || s[3] != p || s[4] != p {
            return Err(Error::Config(format!("input {s:?} does not match [B, {tiles}, 3, {p}, {p}]")));
        }
        Ok(s[0])
    }

    /// Forward pass on `input: [B, K, 3, P, P]` where `K` is the length of
    /// [`ModelConfig::tile_indices`].
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, input: Var, mode: Mode, rng: Option<&mut Rng>) -> Result<ForwardOut<T>> {
        if self.config.variant == Variant::UnetBaseline {
            return self.forward_baseline(tape, bound, input, mode);
        }
        let tiles = self.config.context_tiles() + 1;
        let batch = self.check_input(tape, input, tiles)?;
        let p = self.config.tile_size;
        let mut pass = Pass { model: self, bound, mode, updates: Vec::new() };
        let flat = tape.reshape(input, &[batch * tiles, 3, p, p])?;
        let feats = pass.encode(tape, flat, batch * tiles)?;

        let l_max = self.config.depths;
        let (hl, d) = (self.config.bottleneck(), self.config.embed_dim());
        let vars = self.transformer_vars(bound).expect("U-SpaTem models carry a transformer");
        let tokens = tape.reshape(feats[l_max - 1], &[batch, tiles, d, hl, hl])?;
        let tokens = tape.permute(tokens, &[0, 1, 3, 4, 2])?;
        let mut dropout = rng.and_then(|r| attention::dropout_for(mode, self.config.dropout, r));
        let out = attention::transformer(tape, tokens, &vars, &self.attention_config(), dropout.as_mut())?;
        let bottleneck = tape.permute(out.fused, &[0, 2, 1])?;
        let bottleneck = tape.reshape(bottleneck, &[batch, d, hl, hl])?;

        let keys = (self.config.reduced(), self.config.reduced());
        let mut skips = Vec::new();
        for l in 1..l_max {
            let (c, e) = (self.config.channels(l), self.config.extent(l));
            let all = tape.reshape(feats[l - 1], &[batch, tiles, c, e, e])?;
            let central = tape.narrow(all, 1, 0, 1)?;
            let central = tape.reshape(central, &[batch, c, e, e])?;
            let context = tape.narrow(all, 1, 1, tiles - 1)?;
            let attn = attention::upsample_attention(tape, out.maps, (hl, hl), l, l_max, self.config.attention_upsample.into())?;
            let fuse = self.layout.fuse[l - 1];
            skips.push(attention::fuse_skip(tape, central, context, attn, keys, bound.var(fuse.weight), bound.var(fuse.bias))?);
        }
        let probs = pass.decode(tape, bottleneck, &skips, batch)?;
        Ok(ForwardOut { probs, bottleneck, skips, maps: Some(out.maps), bn_updates: pass.updates })
    }

    /// Encoder and decoder only, with plain skips, on `input: [B, 1, 3, P, P]`.
    /// Runs on either variant; a U-SpaTem model simply ignores its context weights.
    pub fn forward_baseline(&self, tape: &mut Tape<T>, bound: &Bound, input: Var, mode: Mode) -> Result<ForwardOut<T>> {
        let batch = self.check_input(tape, input, 1)?;
        let p = self.config.tile_size;
        let mut pass = Pass { model: self, bound, mode, updates: Vec::new() };
        let flat = tape.reshape(input, &[batch, 3, p, p])?;
        let feats = pass.encode(tape, flat, batch)?;
        let l_max = self.config.depths;
        let skips = feats[..l_max - 1].to_vec();
        let bottleneck = feats[l_max - 1];
        let probs = pass.decode(tape, bottleneck, &skips, batch)?;
        Ok(ForwardOut { probs, bottleneck, skips, maps: None, bn_updates: pass.updates })
    }

    /// Eval-mode probabilities `[B, classes, P, P]` for a tile batch.
    pub fn predict(&self, tiles: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let input = tape.constant(tiles.clone());
        let out = self.forward(&mut tape, &bound, input, Mode::Eval, None)?;
        Ok(tape.value(out.probs).clone())
    }

    /// Eval-mode bottleneck attention for one sample `[1, K, 3, P, P]`.
    pub fn export_attention(&self, tiles: &Tensor<T>) -> Result<AttentionStack> {
        if self.config.variant == Variant::UnetBaseline {
            return Err(Error::Config("the baseline has no attention".into()));
        }
        if tiles.shape().first() != Some(&1) {
            return Err(Error::Config(format!("export_attention takes one sample, got {:?}", tiles.shape())));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let input = tape.constant(tiles.clone());
        let out = self.forward(&mut tape, &bound, input, Mode::Eval, None)?;
        let maps = out.maps.expect("U-SpaTem forward yields attention");
        let s = tape.shape(maps)[1..].to_vec();
        let data: Vec<f32> = tape.value(maps).data().iter().map(|v| v.to_f64_lossy() as f32).collect();
        let r = self.config.reduced();
        let hl = self.config.bottleneck();
        Ok(AttentionStack { maps: Tensor::new(&s, data)?, queries: (hl, hl), keys: (r, r) })
    }
}
