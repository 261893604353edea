//! The `spatem` executable.
//!
//! Exit codes: 0 success, 1 failed gradient check, 2 usage or invalid
//! configuration, 3 I/O or corrupt files, 4 numeric failure.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use spatem::checkpoint;
use spatem::dataset::{self, Dataset, DatasetSpec, Split};
use spatem::synth::{self, MapSheet, NEIGHBOURS, TEMPORAL_SPAN};
use spatem::train::{self, EvalReport, Metrics, MetricsReport, Subset, TrainOptions};
use spatem::verify;
use spatem::viz::{self, Gray, Rgb};
use spatem::{Model, Variant};
use spatem_tensor::suite;
use spatem_tensor::OpKind;

pub use config::{Mode, Preset, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "spatem", version, about = "Map segmentation with spatial and temporal context")]
pub struct Cli {
    /// Run seed; overrides `train.seed` from the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory that receives every output of the command.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Worker threads for sheet rendering.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenData),
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split and, optionally, whole sheets.
    Eval(EvalArgs),
    /// Train every input mode with identical seeds and compare.
    Ablate(AblateArgs),
    /// Finite-difference gradient checks of every op and the tiny model.
    Gradcheck(GradcheckArgs),
    /// Bottleneck attention heatmaps for one sample.
    AttnViz(AttnVizArgs),
    /// Segment a whole synthetic sheet.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct GenData {
    /// Worlds to render (0: one per 40 sequences).
    #[arg(long)]
    pub sheets: Option<usize>,
    /// Map editions per world.
    #[arg(long)]
    pub years: Option<usize>,
    /// Tile size in pixels.
    #[arg(long)]
    pub tile: Option<usize>,
    /// Sheet size in pixels.
    #[arg(long)]
    pub sheet_size: Option<usize>,
    /// Sheet sequences.
    #[arg(long)]
    pub count: Option<usize>,
    /// Held-out ambiguous pairs for the test split.
    #[arg(long)]
    pub ambiguous_pairs: Option<usize>,
    /// Ambiguous training pairs per sheet sequence.
    #[arg(long)]
    pub ambiguous_fraction: Option<f64>,
    /// Output directory; same as --out-dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct Schedule {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Both)]
    pub mode: Mode,
    #[command(flatten)]
    pub schedule: Schedule,
    /// Continue from `<out-dir>/last`.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many epochs, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Freshly rendered worlds to segment whole.
    #[arg(long, default_value_t = 0)]
    pub sheets: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub schedule: Schedule,
    /// Report parameter counts without training.
    #[arg(long)]
    pub params_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CheckSize {
    Tiny,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = CheckSize::Tiny)]
    pub size: CheckSize,
    /// Coordinates probed per model parameter tensor.
    #[arg(long, default_value_t = 3)]
    pub per_param: usize,
    /// Flip the sign of one backward rule; the check must then fail.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct AttnVizArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Sample id from the dataset manifest.
    #[arg(long)]
    pub sample: usize,
    /// Output directory; same as --out-dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// World to render.
    #[arg(long, default_value_t = 0)]
    pub world: u64,
    /// Edition to segment; needs two editions on either side.
    #[arg(long, default_value_t = TEMPORAL_SPAN)]
    pub year: usize,
    #[arg(long)]
    pub sheet_size: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
}

/// Failure of a command, mapped to an exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(spatem::Error),
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use spatem::Error as E;
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_numeric() => 4,
            CliError::Core(E::Io { .. } | E::TenFile { .. } | E::Corrupt { .. }) => 3,
            CliError::Core(E::Tensor(_)) => 4,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::CheckFailed(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<spatem::Error> for CliError {
    fn from(e: spatem::Error) -> Self {
        CliError::Core(e)
    }
}

type Res<T> = Result<T, CliError>;

/// Parses `args` and runs the command; returns the exit code.
pub fn main_with<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

impl Ctx<'_> {
    fn log(&self, msg: impl AsRef<str>) {
        if !self.cli.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_json<S: Serialize>(&self, name: &str, value: &S) -> Res<()> {
        write_json(&self.path(name), value)
    }

    fn schedule(&mut self, s: &Schedule) {
        let t = &mut self.cfg.train;
        t.epochs = s.epochs.unwrap_or(t.epochs);
        t.batch_size = s.batch_size.unwrap_or(t.batch_size);
        t.lr0 = s.lr.unwrap_or(t.lr0);
    }

    /// Echo of the resolved configuration; rerunning with it reproduces
    /// the outputs.
    fn run_record(&self, command: &str, args: serde_json::Value) -> Res<()> {
        let record = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "args": args,
            "config": self.cfg,
        });
        self.write_json("run.json", &record)
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Res<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| spatem::Error::io(path, e).into())
}

fn load_config(cli: &Cli) -> Res<RunConfig> {
    match &cli.config {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| spatem::Error::io(p, e))?;
            RunConfig::parse(&bytes).map_err(CliError::Usage)
        }
    }
}

pub fn run(cli: &Cli) -> Res<()> {
    let mut cfg = load_config(cli)?;
    let seed = cli.seed.unwrap_or(cfg.train.seed);
    cfg.train.seed = seed;
    let out = match &cli.command {
        Command::GenData(a) => a.out.clone(),
        Command::AttnViz(a) => a.out.clone(),
        _ => None,
    }
    .unwrap_or_else(|| cli.out_dir.clone());
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    // Fails only when a pool already exists, as in repeated in-process runs.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    fs::create_dir_all(&out).map_err(|e| spatem::Error::io(&out, e))?;
    let mut ctx = Ctx { cli, cfg, seed, out };
    match &cli.command {
        Command::GenData(a) => gen_data(&mut ctx, a),
        Command::Train(a) => train_cmd(&mut ctx, a),
        Command::Eval(a) => eval_cmd(&mut ctx, a),
        Command::Ablate(a) => ablate(&mut ctx, a),
        Command::Gradcheck(a) => gradcheck(&mut ctx, a),
        Command::AttnViz(a) => attn_viz(&mut ctx, a),
        Command::Predict(a) => predict(&mut ctx, a),
    }
}

fn gen_data(ctx: &mut Ctx, a: &GenData) -> Res<()> {
    let g = &mut ctx.cfg.generator;
    g.years = a.years.unwrap_or(g.years);
    g.tile_size = a.tile.unwrap_or(g.tile_size);
    g.sheet_size = a.sheet_size.unwrap_or(g.sheet_size);
    g.ambiguous_fraction = a.ambiguous_fraction.unwrap_or(g.ambiguous_fraction);
    let d = &mut ctx.cfg.data;
    d.count = a.count.unwrap_or(d.count);
    d.worlds = a.sheets.unwrap_or(d.worlds);
    d.test_pairs = a.ambiguous_pairs.unwrap_or(d.test_pairs);
    let spec = DatasetSpec {
        test_pairs: d.test_pairs,
        worlds: d.worlds,
        val_fraction: d.val_fraction,
        test_fraction: d.test_fraction,
        ..DatasetSpec::new(ctx.cfg.generator.clone(), ctx.seed, d.count)
    };
    let started = Instant::now();
    ctx.log(format!("generating {} sequences and {} test pairs into {}", spec.count, spec.test_pairs, ctx.out.display()));
    let m = dataset::generate_dataset(&ctx.out, &spec)?;
    let (pos, neg) = m.sheet_balance();
    ctx.log(format!("{} samples ({pos} positive, {neg} negative sheet sequences)", m.samples.len()));
    ctx.run_record("gen-data", json!({ "samples": m.samples.len() }))?;
    ctx.write_json("timing.json", &json!({ "seconds": started.elapsed().as_secs_f64() }))
}

fn open_data(path: &Path) -> Res<Dataset> {
    Ok(Dataset::open(path)?)
}

fn subset(data: &Dataset, split: Split) -> Subset<'_> {
    Subset { dataset: data, indices: data.manifest.indices(split) }
}

fn build_model(ctx: &Ctx, mode: Mode, tile: usize) -> Res<Model<f32>> {
    let mc = ctx.cfg.model_config(mode, Some(tile));
    if mc.tile_size != tile {
        return Err(CliError::Usage(format!("model tile {} differs from the dataset's {tile}", mc.tile_size)));
    }
    Ok(Model::build(mc, ctx.seed)?)
}

/// Row of the final report: split metrics of the best checkpoint.
#[derive(Debug, Serialize)]
struct FinalReport {
    mode: &'static str,
    split: Split,
    #[serde(flatten)]
    report: MetricsReport,
    pair_members: usize,
    best_epoch: Option<usize>,
}

/// Trains one mode into `dir`; returns the report and the epoch timings.
fn train_into(ctx: &Ctx, dir: &Path, data: &Dataset, mode: Mode, resume: bool, stop_after: Option<usize>) -> Res<(FinalReport, Vec<f64>)> {
    fs::create_dir_all(dir).map_err(|e| spatem::Error::io(dir, e))?;
    let tc = &ctx.cfg.train;
    let (mut model, state) = if resume {
        let (m, manifest) = checkpoint::load(&dir.join("last"))?;
        let expected = ctx.cfg.model_config(mode, Some(data.tile_size()));
        if *m.config() != expected || manifest.init_seed != ctx.seed {
            return Err(CliError::Usage("checkpoint in last/ was trained with another model, mode or seed".into()));
        }
        (m, manifest.train)
    } else {
        if dir.join("metrics.jsonl").exists() {
            fs::remove_file(dir.join("metrics.jsonl")).map_err(|e| spatem::Error::io(dir, e))?;
        }
        (build_model(ctx, mode, data.tile_size())?, None)
    };
    let (tr, val) = (subset(data, Split::Train), subset(data, Split::Val));
    ctx.log(format!("{}: {} parameters, {} train / {} val samples", mode.name(), model.param_count(), tr.indices.len(), val.indices.len()));
    let opts = TrainOptions { out_dir: Some(dir), init_seed: ctx.seed, resume: state, max_new_epochs: stop_after };
    let outcome = train::train(&mut model, &tr, &val, tc, opts)?;
    for (r, s) in outcome.records.iter().zip(&outcome.seconds) {
        ctx.log(format!(
            "  epoch {:>3}  lr {:.2e}  train {:.4}  val {:.4}  mF1 {:.2}  {:.1}s",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.val_mean_f1, s
        ));
    }
    let (best, manifest) = checkpoint::load(&dir.join("best"))?;
    let state = manifest.train.unwrap_or_else(|| outcome.state.clone());
    let split = if data.manifest.indices(Split::Test).is_empty() { Split::Val } else { Split::Test };
    let eval = train::evaluate(&best, &subset(data, split), tc.batch_size, tc)?;
    let mut report = MetricsReport::new(best.param_count(), &eval, Some(&state));
    // The histories run to the last epoch, not only to the best one.
    report.train_loss = outcome.state.train_loss.clone();
    report.val_loss = outcome.state.val_loss.clone();
    report.lr_history = outcome.state.lr_history.clone();
    let best_epoch = Some(state.epoch);
    Ok((FinalReport { mode: mode.name(), split, report, pair_members: eval.pair_members, best_epoch }, outcome.seconds))
}

fn train_cmd(ctx: &mut Ctx, a: &TrainArgs) -> Res<()> {
    ctx.schedule(&a.schedule);
    ctx.cfg.train.validate()?;
    let data = open_data(&a.data)?;
    let started = Instant::now();
    ctx.run_record("train", json!({ "data": a.data, "mode": a.mode.name(), "resume": a.resume, "stop_after": a.stop_after }))?;
    let (report, seconds) = train_into(ctx, &ctx.out, &data, a.mode, a.resume, a.stop_after)?;
    ctx.log(format!("{}: mean F1 {:.2}, mIoU {:.2}", report.split_name(), report.report.mean_f1, report.report.miou));
    ctx.write_json("report.json", &report)?;
    ctx.write_json("timing.json", &json!({ "seconds": started.elapsed().as_secs_f64(), "epochs": seconds }))
}

impl FinalReport {
    fn split_name(&self) -> &'static str {
        match self.split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    split: Split,
    report: EvalReport,
    sheets: Option<SheetEval>,
}

#[derive(Debug, Serialize)]
struct SheetEval {
    worlds: Vec<u64>,
    metrics: Metrics,
}

/// World seeds for whole-sheet evaluation, apart from any training world.
fn held_out_worlds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = spatem_tensor::Rng::new(seed).fork("held-out-sheets");
    (0..n).map(|_| rng.next_seed()).collect()
}

fn eval_cmd(ctx: &mut Ctx, a: &EvalArgs) -> Res<()> {
    let started = Instant::now();
    let (model, _) = checkpoint::load(&a.ckpt)?;
    let data = open_data(&a.data)?;
    ctx.run_record("eval", json!({ "ckpt": a.ckpt, "data": a.data, "sheets": a.sheets, "batch_size": a.batch_size }))?;
    let split = Split::from(a.split);
    let set = subset(&data, split);
    if set.indices.is_empty() {
        return Err(CliError::Usage(format!("split {split:?} of {} is empty", a.data.display())));
    }
    let report = train::evaluate(&model, &set, a.batch_size, &ctx.cfg.train)?;
    ctx.log(format!("{} samples: mean F1 {:.2}, mIoU {:.2}", report.samples, report.metrics.mean_f1, report.metrics.miou));
    if let Some(acc) = report.pair_accuracy {
        ctx.log(format!("ambiguous pairs: {acc:.1}% of {} members", report.pair_members));
    }
    let sheets = if a.sheets > 0 {
        let worlds = held_out_worlds(ctx.seed, a.sheets);
        let gen = spatem::synth::GeneratorConfig { tile_size: model.config().tile_size, ..data.manifest.generator.clone() };
        let metrics = train::evaluate_sheets(&model, &worlds, &gen, a.batch_size, ctx.cfg.train.threshold)?;
        ctx.log(format!("{} whole sheets: mean F1 {:.2}, mIoU {:.2}", worlds.len(), metrics.mean_f1, metrics.miou));
        Some(SheetEval { worlds, metrics })
    } else {
        None
    };
    ctx.write_json("eval.json", &EvalOutput { split, report, sheets })?;
    ctx.write_json("timing.json", &json!({ "seconds": started.elapsed().as_secs_f64() }))
}

#[derive(Debug, Serialize)]
pub struct AblationRow {
    pub mode: &'static str,
    pub params: usize,
    pub per_class_f1: Option<Vec<f64>>,
    pub mean_f1: Option<f64>,
    pub miou: Option<f64>,
    pub pair_accuracy: Option<f64>,
}

fn ablate(ctx: &mut Ctx, a: &AblateArgs) -> Res<()> {
    ctx.schedule(&a.schedule);
    ctx.cfg.train.validate()?;
    let started = Instant::now();
    ctx.run_record("ablate", json!({ "data": a.data, "params_only": a.params_only }))?;
    let data = match (&a.data, a.params_only) {
        (Some(d), _) => Some(open_data(d)?),
        (None, true) => None,
        (None, false) => return Err(CliError::Usage("ablate needs --data unless --params-only is given".into())),
    };
    let tile = data.as_ref().map_or(ctx.cfg.model_config(Mode::Both, None).tile_size, Dataset::tile_size);
    let mut rows = Vec::new();
    let mut timing = serde_json::Map::new();
    for mode in Mode::ALL {
        let row = match (&data, a.params_only) {
            (Some(data), false) => {
                let (r, seconds) = train_into(ctx, &ctx.path(mode.name()), data, mode, false, None)?;
                timing.insert(mode.name().into(), json!(seconds));
                let m = r.report;
                AblationRow {
                    mode: mode.name(),
                    params: m.params,
                    per_class_f1: Some(m.per_class_f1),
                    mean_f1: Some(m.mean_f1),
                    miou: Some(m.miou),
                    pair_accuracy: m.pair_accuracy,
                }
            }
            _ => {
                let model = build_model(ctx, mode, tile)?;
                AblationRow {
                    mode: mode.name(),
                    params: model.param_count(),
                    per_class_f1: None,
                    mean_f1: None,
                    miou: None,
                    pair_accuracy: None,
                }
            }
        };
        ctx.log(format!("{:<9} params {:>9}  mean F1 {}", row.mode, row.params, row.mean_f1.map_or("-".into(), |v| format!("{v:.2}"))));
        rows.push(row);
    }
    ctx.write_json("ablation.json", &json!({ "rows": rows }))?;
    timing.insert("seconds".into(), json!(started.elapsed().as_secs_f64()));
    ctx.write_json("timing.json", &timing)
}

fn gradcheck(ctx: &mut Ctx, a: &GradcheckArgs) -> Res<()> {
    let fault = match &a.inject_fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| CliError::Usage(format!("unknown op {name:?}")))?),
    };
    let started = Instant::now();
    ctx.run_record("gradcheck", json!({ "size": "tiny", "per_param": a.per_param, "inject_fault": a.inject_fault }))?;
    let ops = suite::op_suite(fault).map_err(spatem::Error::from)?;
    let mut rows = Vec::new();
    for c in &ops {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!("{:<28} max rel err {:.3e}  {verdict}", c.name, c.report.max_rel_error);
        rows.push(json!({ "name": c.name, "op": c.kind.name(), "max_rel_error": c.report.max_rel_error, "coords": c.report.coords_checked, "passed": c.passed() }));
    }
    let model = verify::model_grad_check(a.per_param, fault)?;
    let model_ok = verify::model_check_passed(&model);
    println!(
        "{:<28} max rel err {:.3e}  {} ({} coords, {} skipped)",
        "model (tiny)",
        model.max_rel_error,
        if model_ok { "ok" } else { "FAIL" },
        model.coords_checked,
        model.coords_skipped
    );
    let ops_max = ops.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    let passed = model_ok && ops.iter().all(|c| c.passed());
    println!("ops max rel err {ops_max:.3e} (tolerance {:.0e}); {}", suite::OP_TOLERANCE, if passed { "passed" } else { "FAILED" });
    ctx.write_json(
        "gradcheck.json",
        &json!({
            "ops": rows,
            "op_tolerance": suite::OP_TOLERANCE,
            "model": { "max_rel_error": model.max_rel_error, "coords": model.coords_checked, "skipped": model.coords_skipped,
                       "tolerance": verify::MODEL_TOLERANCE, "passed": model_ok },
            "passed": passed,
            "seconds": started.elapsed().as_secs_f64(),
        }),
    )?;
    if passed {
        Ok(())
    } else {
        Err(CliError::CheckFailed("gradient check failed".into()))
    }
}

/// Human-readable source of sequence tile `k`.
pub fn tile_label(k: usize) -> String {
    match k {
        0 => "central".into(),
        1..=8 => {
            const NAMES: [&str; 8] = ["nw", "n", "ne", "w", "e", "sw", "s", "se"];
            format!("spatial_{}", NAMES[k - 1])
        }
        _ => {
            let offset = [-2i64, -1, 1, 2][k - 9];
            format!("temporal_{offset:+}")
        }
    }
}

fn tile_rgb(tiles: &spatem_tensor::Tensor<f32>, k: usize) -> Res<Rgb> {
    Ok(viz::rgb_from_tensor(&tiles.index0(k).map_err(spatem::Error::from)?)?)
}

fn attn_viz(ctx: &mut Ctx, a: &AttnVizArgs) -> Res<()> {
    let (model, _) = checkpoint::load(&a.ckpt)?;
    if model.config().variant == Variant::UnetBaseline {
        return Err(CliError::Usage("the baseline model has no attention".into()));
    }
    let data = open_data(&a.data)?;
    let i = data
        .manifest
        .samples
        .iter()
        .position(|s| s.id == a.sample)
        .ok_or_else(|| CliError::Usage(format!("no sample with id {}", a.sample)))?;
    ctx.run_record("attn-viz", json!({ "ckpt": a.ckpt, "data": a.data, "sample": a.sample }))?;
    let seq = data.load(i)?;
    let cfg = model.config().clone();
    let (input, _) = train::make_batch(&cfg, std::slice::from_ref(&seq))?;
    let stack = model.export_attention(&input)?;
    let p = cfg.tile_size;
    let (kh, kw) = stack.keys;
    let idx = cfg.tile_indices();
    let mut heatmaps = Vec::new();
    let mut listing = Vec::new();
    for t in 0..stack.tiles() {
        let src = idx[t + 1];
        let g = viz::enlarge(&viz::minmax(&stack.key_heatmap(t), kw, kh), p / kw);
        let name = format!("attn_{:02}_{}.pgm", t + 1, tile_label(src));
        viz::write_pgm(&ctx.path(&name), &g)?;
        listing.push(json!({ "file": name, "tile": src, "source": tile_label(src) }));
        heatmaps.push((src, g));
    }

    // Input montage in map layout: the 3x3 neighbourhood, then the other
    // editions in time order. The central tile carries a red frame.
    let blank_rgb = Rgb { w: p, h: p, px: vec![128; 3 * p * p] };
    let blank = Gray { w: p, h: p, px: vec![0; p * p] };
    let mut layout: Vec<usize> = vec![usize::MAX; 9];
    layout[4] = 0;
    for (n, &(dy, dx)) in NEIGHBOURS.iter().enumerate() {
        layout[((dy + 1) * 3 + dx + 1) as usize] = n + 1;
    }
    layout.extend([9, 10, 0, 11, 12, usize::MAX]);
    let mut rgbs = Vec::new();
    let mut grays = Vec::new();
    for &k in &layout {
        let used = k != usize::MAX && idx.contains(&k);
        let mut img = if used { tile_rgb(&seq.tiles, k)? } else { blank_rgb.clone() };
        if k == 0 {
            viz::frame(&mut img, [220, 20, 20]);
        }
        rgbs.push(img);
        grays.push(heatmaps.iter().find(|(s, _)| *s == k && k != 0).map_or_else(|| blank.clone(), |(_, g)| g.clone()));
    }
    viz::write_ppm(&ctx.path("input_montage.ppm"), &viz::montage_rgb(&rgbs, 3)?)?;
    viz::write_pgm(&ctx.path("attention_montage.pgm"), &viz::montage(&grays, 3)?)?;
    let probs = model.predict(&input)?;
    let central = tile_rgb(&seq.tiles, 0)?;
    let pred = probs.index0(0).map_err(spatem::Error::from)?;
    viz::write_ppm(&ctx.path("overlay.ppm"), &viz::overlay(&central, &pred)?)?;
    ctx.log(format!("{} heatmaps written to {}", heatmaps.len(), ctx.out.display()));
    ctx.write_json(
        "attention.json",
        &json!({ "sample": a.sample, "heads": stack.heads(), "queries": stack.queries, "keys": stack.keys,
                 "max_row_error": stack.max_row_error(), "heatmaps": listing }),
    )
}

fn predict(ctx: &mut Ctx, a: &PredictArgs) -> Res<()> {
    let (model, _) = checkpoint::load(&a.ckpt)?;
    let mut gen = ctx.cfg.generator.clone();
    gen.tile_size = model.config().tile_size;
    gen.sheet_size = a.sheet_size.unwrap_or(gen.sheet_size);
    gen.validate()?;
    if a.year < TEMPORAL_SPAN || a.year + TEMPORAL_SPAN >= gen.years {
        return Err(CliError::Usage(format!("year {} needs {TEMPORAL_SPAN} editions on either side of {} years", a.year, gen.years)));
    }
    ctx.run_record("predict", json!({ "ckpt": a.ckpt, "world": a.world, "year": a.year, "sheet_size": gen.sheet_size }))?;
    let started = Instant::now();
    let sheets = synth::render_world(a.world, &gen);
    let window: Vec<&MapSheet> = sheets[a.year - TEMPORAL_SPAN..=a.year + TEMPORAL_SPAN].iter().collect();
    let probs = train::predict_sheet(&model, &window, TEMPORAL_SPAN, a.batch_size)?;
    let sheet = window[TEMPORAL_SPAN];
    let s = sheet.size;
    let base = Rgb { w: s, h: s, px: sheet.rgb.clone() };
    viz::write_ppm(&ctx.path("sheet.ppm"), &base)?;
    viz::write_ppm(&ctx.path("overlay.ppm"), &viz::overlay(&base, &probs)?)?;
    for (c, name) in spatem::synth::CLASSES.iter().enumerate() {
        let plane = &probs.data()[c * s * s..(c + 1) * s * s];
        viz::write_pgm(&ctx.path(&format!("prob_{name}.pgm")), &viz::gray_from_unit(plane, s, s))?;
    }
    let target = spatem_tensor::Tensor::new(&[4, s, s], sheet.masks.iter().map(|&v| v as f32).collect()).map_err(spatem::Error::from)?;
    let metrics = train::compute_metrics(&train::binarize(&probs, ctx.cfg.train.threshold), &target)?;
    ctx.log(format!(
        "sheet {}x{s}: mean F1 {:.2}, mIoU {:.2} in {:.1}s",
        s,
        metrics.mean_f1,
        metrics.miou,
        started.elapsed().as_secs_f64()
    ));
    ctx.write_json("predict.json", &json!({ "world": a.world, "year": a.year, "size": s, "metrics": metrics }))
}
