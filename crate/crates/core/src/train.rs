//! Dice-loss training with Adam and a plateau schedule, plus evaluation.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use spatem_tensor::{Float, Mode, ParamStore, Rng, Tape, Tensor};

use crate::checkpoint::{self, TrainState};
use crate::config::ModelConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synth::{self, ContextSequence, GeneratorConfig, MapSheet, PairMember, LAKE, RIVER, TEMPORAL_SPAN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    /// Epochs a validation plateau may last before the rate decays.
    pub patience: usize,
    pub lr_floor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dice_eps: f64,
    pub seed: u64,
    pub threshold: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            lr_decay: 0.5,
            patience: 5,
            lr_floor: 1e-5,
            batch_size: 32,
            epochs: 50,
            dice_eps: 1.0,
            seed: 0,
            threshold: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return fail(format!("lr_decay {} outside (0, 1)", self.lr_decay));
        }
        if !(self.lr_floor > 0.0 && self.lr_floor < self.lr0) {
            return fail(format!("need 0 < lr_floor < lr0, got {} and {}", self.lr_floor, self.lr0));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return fail("batch_size, epochs and patience must be positive".into());
        }
        if self.dice_eps <= 0.0 || !(0.0..1.0).contains(&self.threshold) {
            return fail("dice_eps must be positive and threshold inside [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return fail("Adam betas must lie in [0, 1) and eps be positive".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// optimizer and schedule

/// One bias-corrected Adam update of every trainable entry from its `grad`
/// buffer; `t` is the 1-based step number.
pub fn adam_step<T: Float>(params: &mut ParamStore<T>, lr: f64, t: u64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if t == 0 {
        return Err(Error::Config("Adam steps count from 1".into()));
    }
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    let (c1, c2) = (1.0 - beta1.powi(exp), 1.0 - beta2.powi(exp));
    for p in params.iter_mut().filter(|p| p.trainable) {
        let g = p.grad.data().to_vec();
        let m = p.adam_m.data_mut();
        for (m, &g) in m.iter_mut().zip(&g) {
            *m = T::c(beta1 * m.to_f64_lossy() + (1.0 - beta1) * g.to_f64_lossy());
        }
        let v = p.adam_v.data_mut();
        for (v, &g) in v.iter_mut().zip(&g) {
            let g = g.to_f64_lossy();
            *v = T::c(beta2 * v.to_f64_lossy() + (1.0 - beta2) * g * g);
        }
        let (m, v) = (p.adam_m.data().to_vec(), p.adam_v.data().to_vec());
        for ((th, m), v) in p.value.data_mut().iter_mut().zip(m).zip(v) {
            let (mh, vh) = (m.to_f64_lossy() / c1, v.to_f64_lossy() / c2);
            *th = T::c(th.to_f64_lossy() - lr * mh / (vh.sqrt() + eps));
        }
    }
    Ok(())
}

/// Plateau decay. An epoch that strictly improves on the best validation
/// loss opens a new plateau of length 1; every other epoch extends it. When
/// the plateau reaches `patience` epochs the rate is multiplied by the
/// decay, clamped at the floor, and the count restarts from zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub best: Option<f64>,
    pub length: usize,
    decay: f64,
    patience: usize,
    floor: f64,
}

impl Plateau {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self { lr: cfg.lr0, best: None, length: 0, decay: cfg.lr_decay, patience: cfg.patience, floor: cfg.lr_floor }
    }

    pub fn resume(cfg: &TrainConfig, state: &TrainState) -> Self {
        Self { lr: state.lr, best: state.best_val_loss, length: state.plateau, ..Self::new(cfg) }
    }

    /// Records one epoch's validation loss; returns the rate for the next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if self.best.is_none_or(|b| loss < b) {
            self.best = Some(loss);
            self.length = 1;
        } else {
            self.length += 1;
        }
        if self.length >= self.patience {
            self.lr = (self.lr * self.decay).max(self.floor);
            self.length = 0;
        }
        self.lr
    }
}

/// Rate after replaying `history` from `cfg.lr0`.
pub fn lr_schedule(history: &[f64], cfg: &TrainConfig) -> f64 {
    let mut p = Plateau::new(cfg);
    for &l in history {
        p.observe(l);
    }
    p.lr
}

// ---------------------------------------------------------------------------
// metrics

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// Percent; 100 when the class is absent from both prediction and target.
    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            100.0
        } else {
            200.0 * self.tp as f64 / d as f64
        }
    }

    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            100.0
        } else {
            100.0 * self.tp as f64 / d as f64
        }
    }
}

/// Pooled-pixel metrics per class, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class_f1: Vec<f64>,
    pub per_class_iou: Vec<f64>,
    pub mean_f1: f64,
    pub miou: f64,
    pub confusion: Vec<Confusion>,
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Confusion>) -> Self {
        let f1: Vec<f64> = confusion.iter().map(Confusion::f1).collect();
        let iou: Vec<f64> = confusion.iter().map(Confusion::iou).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        Self { mean_f1: mean(&f1), miou: mean(&iou), per_class_f1: f1, per_class_iou: iou, confusion }
    }
}

/// Running confusion counts over `[.., C, H, W]` batches.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricAccumulator {
    pub confusion: Vec<Confusion>,
}

impl MetricAccumulator {
    pub fn new(classes: usize) -> Self {
        Self { confusion: vec![Confusion::default(); classes] }
    }

    /// Adds binary predictions against binary targets.
    pub fn add(&mut self, pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(Error::Data(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
        }
        let s = pred.shape();
        let classes = self.confusion.len();
        if s.len() < 3 || s[s.len() - 3] != classes {
            return Err(Error::Data(format!("expected [.., {classes}, H, W], got {s:?}")));
        }
        let plane = s[s.len() - 2] * s[s.len() - 1];
        for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
            let c = &mut self.confusion[(i / plane) % classes];
            match (p >= 0.5, t >= 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Metrics {
        Metrics::from_confusion(self.confusion.clone())
    }
}

pub fn binarize(probs: &Tensor<f32>, threshold: f64) -> Tensor<f32> {
    probs.map(|p| if f64::from(p) >= threshold { 1.0 } else { 0.0 })
}

/// Metrics of binary `pred` against binary `target`, both `[.., C, H, W]`.
pub fn compute_metrics(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<Metrics> {
    let s = pred.shape();
    if s.len() < 3 {
        return Err(Error::Data(format!("expected [.., C, H, W], got {s:?}")));
    }
    let mut acc = MetricAccumulator::new(s[s.len() - 3]);
    acc.add(pred, target)?;
    Ok(acc.finish())
}

// ---------------------------------------------------------------------------
// data access

/// Indexed access to sequences, in memory or on disk.
pub trait Samples: Sync {
    fn len(&self) -> usize;
    fn load(&self, i: usize) -> Result<ContextSequence>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Samples for [ContextSequence] {
    fn len(&self) -> usize {
        <[ContextSequence]>::len(self)
    }

    fn load(&self, i: usize) -> Result<ContextSequence> {
        self.get(i).cloned().ok_or_else(|| Error::Data(format!("no sample {i}")))
    }
}

/// Selected samples of a dataset.
pub struct Subset<'a> {
    pub dataset: &'a Dataset,
    pub indices: Vec<usize>,
}

impl Samples for Subset<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn load(&self, i: usize) -> Result<ContextSequence> {
        let j = *self.indices.get(i).ok_or_else(|| Error::Data(format!("no sample {i}")))?;
        self.dataset.load(j)
    }
}

/// Stacks the tiles the model consumes `[B, K, 3, P, P]` and the masks
/// `[B, 4, P, P]`.
pub fn make_batch(cfg: &ModelConfig, seqs: &[ContextSequence]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let p = cfg.tile_size;
    let idx = cfg.tile_indices();
    let mut tiles = Vec::new();
    let mut masks = Vec::new();
    for s in seqs {
        if s.tile_size() != p {
            return Err(Error::Config(format!("sample tiles are {} px, model expects {p}", s.tile_size())));
        }
        tiles.extend_from_slice(s.select(&idx).data());
        masks.extend_from_slice(s.mask.data());
    }
    let b = seqs.len();
    Ok((Tensor::new(&[b, idx.len(), 3, p, p], tiles)?, Tensor::new(&[b, cfg.classes, p, p], masks)?))
}

fn load_batch<S: Samples + ?Sized>(data: &S, order: &[usize]) -> Result<Vec<ContextSequence>> {
    order.iter().map(|&i| data.load(i)).collect()
}

// ---------------------------------------------------------------------------
// steps

/// Forward, dice loss, backward and one Adam update at step `t`. Returns
/// the batch loss; a non-finite loss leaves the model untouched.
pub fn train_step(
    model: &mut Model<f32>,
    input: &Tensor<f32>,
    target: &Tensor<f32>,
    lr: f64,
    t: u64,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let x = tape.constant(input.clone());
    let out = model.forward(&mut tape, &bound, x, Mode::Train, Some(rng))?;
    let loss = tape.dice_loss(out.probs, target, cfg.dice_eps)?;
    let value = f64::from(tape.value(loss).data()[0]);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, step: t as usize });
    }
    tape.backward(loss)?;
    let params = model.params_mut();
    params.zero_grads();
    params.accumulate_grads(&tape, &bound);
    adam_step(params, lr, t, cfg.beta1, cfg.beta2, cfg.adam_eps)?;
    model.apply_bn_updates(&out.bn_updates);
    Ok(value)
}

/// Eval-mode dice loss and probabilities of one batch.
pub fn eval_batch(model: &Model<f32>, input: &Tensor<f32>, target: &Tensor<f32>, eps: f64) -> Result<(f64, Tensor<f32>)> {
    let mut tape = Tape::new();
    let bound = model.params().bind_frozen(&mut tape);
    let x = tape.constant(input.clone());
    let out = model.forward(&mut tape, &bound, x, Mode::Eval, None)?;
    let loss = tape.dice_loss(out.probs, target, eps)?;
    Ok((f64::from(tape.value(loss).data()[0]), tape.value(out.probs).clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Sample-weighted mean dice loss.
    pub loss: f64,
    pub metrics: Metrics,
    /// Pair discrimination accuracy in percent, when complete pairs are present.
    pub pair_accuracy: Option<f64>,
    pub pair_members: usize,
}

/// How strongly a tile reads as lake rather than river: mean lake
/// probability minus mean river probability.
pub fn pair_score(probs: &Tensor<f32>) -> f64 {
    let plane = probs.numel() / probs.shape()[0];
    let mean = |c: usize| probs.data()[c * plane..(c + 1) * plane].iter().map(|&v| f64::from(v)).sum::<f64>() / plane as f64;
    mean(LAKE) - mean(RIVER)
}

/// Percentage of complete pairs whose lake member outscores its river
/// member, counting ties as half. Members without a partner are ignored.
pub fn pair_accuracy(scores: &[(usize, PairMember, f64)]) -> Option<f64> {
    let mut by_id: BTreeMap<usize, [Option<f64>; 2]> = BTreeMap::new();
    for &(id, member, score) in scores {
        by_id.entry(id).or_default()[(member == PairMember::River) as usize] = Some(score);
    }
    let (mut pairs, mut correct) = (0usize, 0.0);
    for slot in by_id.values() {
        if let [Some(lake), Some(river)] = *slot {
            pairs += 1;
            correct += if lake > river {
                1.0
            } else if lake == river {
                0.5
            } else {
                0.0
            };
        }
    }
    (pairs > 0).then(|| 100.0 * correct / pairs as f64)
}

pub fn evaluate<S: Samples + ?Sized>(model: &Model<f32>, data: &S, batch: usize, cfg: &TrainConfig) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mcfg = model.config();
    let mut acc = MetricAccumulator::new(mcfg.classes);
    let (mut loss_sum, mut scores) = (0.0, Vec::new());
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch.max(1)) {
        let seqs = load_batch(data, chunk)?;
        let (input, target) = make_batch(mcfg, &seqs)?;
        let (loss, probs) = eval_batch(model, &input, &target, cfg.dice_eps)?;
        loss_sum += loss * seqs.len() as f64;
        acc.add(&binarize(&probs, cfg.threshold), &target)?;
        for (k, s) in seqs.iter().enumerate() {
            if let Some(tag) = s.provenance.pair {
                scores.push((tag.id, tag.member, pair_score(&probs.index0(k)?)));
            }
        }
    }
    Ok(EvalReport {
        samples: data.len(),
        loss: loss_sum / data.len() as f64,
        metrics: acc.finish(),
        pair_accuracy: pair_accuracy(&scores),
        pair_members: scores.len(),
    })
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mean_f1: f64,
    pub val_miou: f64,
    pub next_lr: f64,
    pub improved: bool,
}

pub struct TrainOptions<'a> {
    /// Receives `metrics.jsonl`, `last/` and `best/`.
    pub out_dir: Option<&'a Path>,
    pub init_seed: u64,
    /// State of a checkpointed run to continue.
    pub resume: Option<TrainState>,
    /// Stop after this many epochs of the current call, leaving a
    /// resumable checkpoint.
    pub max_new_epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Wall-clock time per epoch, kept apart from the reproducible records.
    pub seconds: Vec<f64>,
}

/// The shuffled sample order of `epoch` (1-based).
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).fork(&format!("epoch/{epoch}")).shuffle(&mut order);
    order
}

pub fn train<A: Samples + ?Sized, B: Samples + ?Sized>(
    model: &mut Model<f32>,
    train: &A,
    val: &B,
    cfg: &TrainConfig,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let mut state = opts.resume.clone().unwrap_or(TrainState {
        epoch: 0,
        step: 0,
        lr: cfg.lr0,
        best_val_loss: None,
        plateau: 0,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        lr_history: Vec::new(),
    });
    let mut plateau = Plateau::resume(cfg, &state);
    if let Some(dir) = opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut records = Vec::new();
    let mut best_epoch = None;
    let mut seconds = Vec::new();
    let last = opts.max_new_epochs.map_or(cfg.epochs, |n| cfg.epochs.min(state.epoch + n));
    for epoch in state.epoch + 1..=last {
        let started = Instant::now();
        let lr = plateau.lr;
        let order = epoch_order(cfg.seed, epoch, train.len());
        let mut dropout = Rng::new(cfg.seed).fork(&format!("dropout/{epoch}"));
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let seqs = load_batch(train, chunk)?;
            let (input, target) = make_batch(model.config(), &seqs)?;
            state.step += 1;
            let loss = train_step(model, &input, &target, lr, state.step, cfg, &mut dropout).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { epoch, step: losses.len() + 1 },
                other => other,
            })?;
            losses.push(loss);
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let report = evaluate(model, val, cfg.batch_size, cfg)?;
        if !report.loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step: 0 });
        }
        let improved = plateau.best.is_none_or(|b| report.loss < b);
        let next_lr = plateau.observe(report.loss);
        state.epoch = epoch;
        state.lr = next_lr;
        state.best_val_loss = plateau.best;
        state.plateau = plateau.length;
        state.train_loss.push(train_loss);
        state.val_loss.push(report.loss);
        state.lr_history.push(lr);
        let record = EpochRecord {
            epoch,
            lr,
            steps: losses.len(),
            train_loss,
            val_loss: report.loss,
            val_mean_f1: report.metrics.mean_f1,
            val_miou: report.metrics.miou,
            next_lr,
            improved,
        };
        seconds.push(started.elapsed().as_secs_f64());
        if let Some(dir) = opts.out_dir {
            if improved {
                checkpoint::save(&dir.join("best"), model, opts.init_seed, Some(&state))?;
            }
            checkpoint::save(&dir.join("last"), model, opts.init_seed, Some(&state))?;
            append_json_line(&dir.join("metrics.jsonl"), &record)?;
        }
        if improved {
            best_epoch = Some(epoch);
        }
        records.push(record);
    }
    Ok(TrainOutcome { state, records, best_epoch, seconds })
}

fn append_json_line<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut line = serde_json::to_string(value).map_err(|e| Error::Data(e.to_string()))?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Final document of a run. Wall-clock time is reported separately so the
/// document itself is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub params: usize,
    pub per_class_f1: Vec<f64>,
    pub per_class_iou: Vec<f64>,
    pub mean_f1: f64,
    pub miou: f64,
    pub confusion: Vec<Confusion>,
    pub loss: f64,
    pub pair_accuracy: Option<f64>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub lr_history: Vec<f64>,
}

impl MetricsReport {
    pub fn new(params: usize, eval: &EvalReport, state: Option<&TrainState>) -> Self {
        let m = &eval.metrics;
        Self {
            params,
            per_class_f1: m.per_class_f1.clone(),
            per_class_iou: m.per_class_iou.clone(),
            mean_f1: m.mean_f1,
            miou: m.miou,
            confusion: m.confusion.clone(),
            loss: eval.loss,
            pair_accuracy: eval.pair_accuracy,
            train_loss: state.map(|s| s.train_loss.clone()).unwrap_or_default(),
            val_loss: state.map(|s| s.val_loss.clone()).unwrap_or_default(),
            lr_history: state.map(|s| s.lr_history.clone()).unwrap_or_default(),
        }
    }
}

// ---------------------------------------------------------------------------
// whole sheets

/// Tile origins along an axis of `size` pixels at half-tile stride, the last
/// flush with the edge, and the crop boundaries between neighbours.
fn tiling(size: usize, p: usize) -> (Vec<usize>, Vec<usize>) {
    let mut pos: Vec<usize> = (0..=size - p).step_by((p / 2).max(1)).collect();
    if *pos.last().expect("size >= p") != size - p {
        pos.push(size - p);
    }
    let mut bounds = vec![0];
    bounds.extend(pos.windows(2).map(|w| (w[0] + w[1] + p) / 2));
    bounds.push(size);
    (pos, bounds)
}

/// Probabilities `[C, S, S]` for the central edition of `window`, stitched
/// from the central crops of overlapping tiles.
pub fn predict_sheet(model: &Model<f32>, window: &[&MapSheet], center: usize, batch: usize) -> Result<Tensor<f32>> {
    let cfg = model.config();
    let (p, classes) = (cfg.tile_size, cfg.classes);
    let s = window[center].size;
    if s < p {
        return Err(Error::Data(format!("sheet {s} smaller than tile {p}")));
    }
    let (pos, bounds) = tiling(s, p);
    let cells: Vec<(usize, usize)> = (0..pos.len()).flat_map(|i| (0..pos.len()).map(move |j| (i, j))).collect();
    let mut out = Tensor::<f32>::zeros(&[classes, s, s]);
    for chunk in cells.chunks(batch.max(1)) {
        let seqs: Vec<ContextSequence> = chunk.iter().map(|&(i, j)| synth::sequence_at(window, center, pos[i], pos[j], p, None)).collect();
        let (input, _) = make_batch(cfg, &seqs)?;
        let probs = model.predict(&input)?;
        let data = out.data_mut();
        for (k, &(i, j)) in chunk.iter().enumerate() {
            let (y0, x0) = (pos[i], pos[j]);
            for c in 0..classes {
                for y in bounds[i]..bounds[i + 1] {
                    for x in bounds[j]..bounds[j + 1] {
                        data[(c * s + y) * s + x] = probs.data()[((k * classes + c) * p + y - y0) * p + x - x0];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Pooled metrics over freshly rendered worlds.
pub fn evaluate_sheets(model: &Model<f32>, worlds: &[u64], gen: &GeneratorConfig, batch: usize, threshold: f64) -> Result<Metrics> {
    let mut acc = MetricAccumulator::new(model.config().classes);
    for &seed in worlds {
        let sheets = synth::render_world(seed, gen);
        let window: Vec<&MapSheet> = sheets.iter().take(2 * TEMPORAL_SPAN + 1).collect();
        let probs = predict_sheet(model, &window, TEMPORAL_SPAN, batch)?;
        let c = window[TEMPORAL_SPAN];
        let target = Tensor::new(&[4, c.size, c.size], c.masks.iter().map(|&v| v as f32).collect())?;
        acc.add(&binarize(&probs, threshold), &target)?;
    }
    Ok(acc.finish())
}
