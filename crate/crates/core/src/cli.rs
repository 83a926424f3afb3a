//! Command-line front end. Every subcommand maps errors onto the exit-code
//! contract in [`Error::exit_code`].

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{bench_forward, count_flops};
use crate::config::RunConfig;
use crate::data::loader::prepare_image;
use crate::data::{pnm, synth_generate, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{checkpoint, FortressModel};
use crate::train::{class_weights, evaluate, fit, ClassWeightMode};
use crate::verify::{run_suite, DEFAULT_SEEDS, SUITES};

pub const SEED_ENV: &str = "FORTRESS_SEED";

#[derive(Debug, Parser)]
#[command(name = "fortress", version, about = "Defect segmentation: synthesize, train, evaluate, analyze")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic defect dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Segment a single image.
    Predict(PredictArgs),
    /// Parameter and FLOP accounting for a configuration.
    Analyze(AnalyzeArgs),
    /// Run self-check suites.
    Verify(VerifyArgs),
    /// Gradient checks of individual operations and blocks.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML configuration file, or `default`.
    #[arg(long, default_value = "default")]
    pub config: String,
    /// Dotted-path override such as `train.lr_max=3e-4`; repeatable, last wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config)?.with_overrides(&self.set)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Generator seed; falls back to FORTRESS_SEED, then the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Image side length, a multiple of 16.
    #[arg(long)]
    pub size: Option<usize>,
    /// Class count including background.
    #[arg(long)]
    pub classes: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints, history and the effective config.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Training seed; falls back to FORTRESS_SEED, then the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Peak learning rate; lowers `train.lr_min` too when it would exceed it.
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    /// Add weighted auxiliary-head logits to the final logits.
    #[arg(long)]
    pub head_fusion: bool,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Print the summary scores as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Binary PPM input.
    #[arg(long)]
    pub image: PathBuf,
    /// Output class mask as binary PGM.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional color overlay as binary PPM.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    /// Add weighted auxiliary-head logits to the final logits.
    #[arg(long)]
    pub head_fusion: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Input side length; defaults to `model.input_size`.
    #[arg(long)]
    pub size: Option<usize>,
    /// Print the full per-layer report as JSON.
    #[arg(long)]
    pub json: bool,
    /// Also time this many eval-mode forward passes.
    #[arg(long)]
    pub bench: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Suites to run: grad, spline, gate, metrics, schedule, or all.
    #[arg(default_value = "all")]
    pub suites: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Only checks whose name contains this text.
    #[arg(long)]
    pub only: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

/// I/O error naming `path` when it does not exist.
fn require(path: &Path) -> Result<()> {
    if path.exists() {
        return Ok(());
    }
    Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} does not exist", path.display()))))
}

/// Explicit flag, then `FORTRESS_SEED`, then the configured value.
pub fn resolve_seed(flag: Option<u64>, configured: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::config(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(configured),
    }
}

fn seeds_or_default(seeds: &Option<Vec<u64>>) -> Result<Vec<u64>> {
    match seeds {
        Some(s) => Ok(s.clone()),
        None => Ok(match std::env::var(SEED_ENV) {
            Ok(_) => vec![resolve_seed(None, 0)?],
            Err(_) => DEFAULT_SEEDS.to_vec(),
        }),
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs one command. `Ok` carries the exit code for commands that can fail
/// without an error, such as a verification suite with failing checks.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(|_| 0),
        Command::Train(a) => cmd_train(&a).map(|_| 0),
        Command::Eval(a) => cmd_eval(&a).map(|_| 0),
        Command::Predict(a) => cmd_predict(&a).map(|_| 0),
        Command::Analyze(a) => cmd_analyze(&a).map(|_| 0),
        Command::Verify(a) => cmd_verify(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?.synth;
    if let Some(n) = a.n {
        cfg.n_samples = n;
    }
    if let Some(s) = a.size {
        cfg.size = s;
    }
    if let Some(k) = a.classes {
        cfg.num_classes = k;
    }
    cfg.seed = resolve_seed(a.seed, cfg.seed)?;
    let m = synth_generate(&cfg, &a.out)?;
    let count = |s: Split| m.samples.iter().filter(|e| e.split == s).count();
    println!(
        "wrote {} samples to {} ({} train, {} val, {} test), {}x{}, {} classes, seed {}",
        m.samples.len(),
        a.out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        m.size,
        m.size,
        m.num_classes,
        m.seed
    );
    let total: u64 = m.totals.iter().sum();
    for (k, t) in m.totals.iter().enumerate() {
        let share = if total == 0 { 0.0 } else { *t as f64 / total as f64 };
        println!("  class {k}: {t} pixels ({:.2}%)", 100.0 * share);
    }
    Ok(())
}

/// Effective configuration for a training run on `data`.
pub fn train_config(a: &TrainArgs, data: &Dataset) -> Result<RunConfig> {
    let mut cfg = a.config.resolve()?;
    cfg.train.seed = resolve_seed(a.seed, cfg.train.seed)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr_max {
        cfg.train.lr_max = lr;
        cfg.train.lr_min = cfg.train.lr_min.min(lr);
    }
    cfg.model.num_classes = data.num_classes();
    cfg.model.input_size = cfg.train.resize_to.unwrap_or(data.manifest().size);
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    require(&a.data)?;
    let data = Dataset::open(&a.data)?;
    let cfg = train_config(a, &data)?;
    let (train, val) = (data.split(Split::Train), data.split(Split::Val));
    fs::create_dir_all(&a.out)?;
    let echoed = cfg.to_toml();
    println!("# effective configuration\n{echoed}");
    fs::write(a.out.join("config.toml"), &echoed)?;

    let mut model = FortressModel::<f32>::build(&cfg.model, cfg.train.seed)?;
    let history_path = a.out.join("history.jsonl");
    let mut history = fs::File::create(&history_path)?;
    let (best_path, last_path) = (a.out.join("best.fkpt"), a.out.join("last.fkpt"));
    let start = Instant::now();
    let outcome = fit(&mut model, &train, &val, &cfg.train, &mut |r, current, best| {
        println!(
            "epoch {:>3}  loss {:.4}  val_loss {:.4}  val_miou {:.4}  val_f1 {:.4}  lr {:.3e}{}  [{:.0}s]",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_miou,
            r.val_f1,
            r.lr,
            if r.improved { "  *" } else { "" },
            start.elapsed().as_secs_f64()
        );
        writeln!(history, "{}", serde_json::to_string(r).expect("plain record"))?;
        checkpoint::save(current, &last_path)?;
        if r.improved {
            checkpoint::save(best, &best_path)?;
        }
        Ok(())
    })?;
    checkpoint::save(&outcome.best, &best_path)?;
    checkpoint::save(&model, &last_path)?;
    match outcome.history.stopped_early {
        Some(e) => println!("stopped early after epoch {e}; best epoch {}", outcome.history.best_epoch),
        None => println!("finished; best epoch {}", outcome.history.best_epoch),
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    require(&a.checkpoint)?;
    require(&a.data)?;
    let model = checkpoint::load::<f32>(&a.checkpoint)?;
    let data = Dataset::open(&a.data)?;
    let k = model.config().num_classes;
    if k != data.num_classes() {
        return Err(Error::config(format!("checkpoint has {k} classes but the dataset has {}", data.num_classes())));
    }
    let samples = data.split(a.split.into());
    let weights = class_weights(&vec![1; k], ClassWeightMode::Uniform)?;
    let eval = evaluate(&model, &samples, a.batch, &weights, None, a.head_fusion)?;
    if a.json {
        println!("{}", eval.scores.to_json());
        return Ok(());
    }
    let s = &eval.scores.summary;
    println!("samples {}  loss {:.4}", samples.len(), eval.loss);
    println!("f1 (bg / no-bg)    {:.4} / {:.4}", s.f1_bg, s.f1_nobg);
    println!("miou (bg / no-bg)  {:.4} / {:.4}", s.miou_bg, s.miou_nobg);
    println!("pixel_acc {:.4}  bal_acc {:.4}  mean_mcc {:.4}  fwiou {:.4}", s.pixel_acc, s.bal_acc, s.mean_mcc, s.fwiou);
    let opt = |v: Option<f64>| v.map_or("     -".to_string(), |x| format!("{x:.4}"));
    println!("class  support      iou      f1  recall     mcc");
    for (c, cs) in eval.scores.per_class.iter().enumerate() {
        println!("{c:>5} {:>8} {:>8} {:>7} {:>7} {:>7.4}", cs.support, opt(cs.iou), opt(cs.f1), opt(cs.recall), cs.mcc);
    }
    Ok(())
}

/// Overlay colors per class; class 0 leaves the image untouched.
pub const OVERLAY_COLORS: [[f32; 3]; 9] = [
    [0.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.3, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
];

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    require(&a.checkpoint)?;
    require(&a.image)?;
    let model = checkpoint::load::<f32>(&a.checkpoint)?;
    let image = pnm::read_image(&a.image)?;
    let s = image.shape();
    let d = model.config().divisor();
    if s.h() % d != 0 || s.w() % d != 0 {
        return Err(Error::config(format!("image is {}x{}; both sides must be multiples of {d}", s.h(), s.w())));
    }
    let x = prepare_image(&image, None, true);
    let mask = model.predict(&x, a.head_fusion)?.remove(0);
    pnm::write_mask(&a.out, &mask)?;
    if let Some(path) = &a.overlay {
        write_overlay(path, &image, &mask)?;
    }
    let k = model.config().num_classes;
    let counts = mask.class_counts(k)?;
    println!("wrote {} ({}x{}); class pixels {:?}", a.out.display(), mask.height(), mask.width(), counts);
    Ok(())
}

fn write_overlay(path: &Path, image: &crate::tensor::Tensor<f32>, mask: &crate::data::Mask) -> Result<()> {
    let mut out = image.clone();
    let (h, w) = (mask.height(), mask.width());
    let plane = h * w;
    let data = out.data_mut();
    for (i, &c) in mask.data().iter().enumerate() {
        if c == 0 {
            continue;
        }
        let color = OVERLAY_COLORS[c as usize % OVERLAY_COLORS.len()];
        for (ch, col) in color.iter().enumerate() {
            let v = &mut data[ch * plane + i];
            *v = 0.5 * *v + 0.5 * col;
        }
    }
    pnm::write_image(path, &out)
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    cfg.model.validate()?;
    let size = a.size.unwrap_or(cfg.model.input_size);
    let report = count_flops(&cfg.model, size, size)?;
    if a.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_table());
    }
    if let Some(iters) = a.bench {
        let model = FortressModel::<f32>::build(&cfg.model, cfg.train.seed)?;
        let l = bench_forward(&model, size, iters)?;
        println!(
            "latency over {} runs at {size}x{size}: mean {:.2} ms, median {:.2} ms, min {:.2} ms",
            l.iterations, l.mean_ms, l.median_ms, l.min_ms
        );
    }
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    let suites: Vec<&str> =
        if a.suites.iter().any(|s| s == "all") { SUITES.to_vec() } else { a.suites.iter().map(String::as_str).collect() };
    if let Some(bad) = suites.iter().find(|s| !SUITES.contains(s)) {
        return Err(Error::config(format!("unknown suite '{bad}', expected one of {} or all", SUITES.join(", "))));
    }
    let seeds = seeds_or_default(&a.seeds)?;
    let mut failed = 0;
    for suite in suites {
        for c in run_suite(suite, &seeds)? {
            if a.json {
                println!("{}", serde_json::to_string(&c).expect("plain record"));
            } else {
                println!("{c}");
            }
            failed += usize::from(!c.pass);
        }
    }
    if failed > 0 {
        eprintln!("{failed} check(s) failed");
        return Ok(3);
    }
    Ok(0)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let seeds = seeds_or_default(&a.seeds)?;
    let checks: Vec<_> =
        run_suite("grad", &seeds)?.into_iter().filter(|c| a.only.as_deref().is_none_or(|o| c.name.contains(o))).collect();
    if checks.is_empty() {
        return Err(Error::config("no gradient check matches the filter"));
    }
    for c in &checks {
        println!("{c}");
    }
    let worst = checks.iter().map(|c| c.value).fold(0.0, f64::max);
    println!("max relative error {worst:.3e} over {} checks", checks.len());
    Ok(if checks.iter().all(|c| c.pass) { 0 } else { 3 })
}
