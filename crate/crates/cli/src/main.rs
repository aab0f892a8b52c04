//! `cloftr`: batch command-line front end for the coarse matcher.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use cloftr_core::bench::{attention_timings, bench_pipeline};
use cloftr_core::config::RunConfig;
use cloftr_core::dataio::{self, PairDescriptor, SynthConfig};
use cloftr_core::geometry::{cell_sample_pixel, generate_ground_truth, GtParams};
use cloftr_core::matching::{extract_matches, mae};
use cloftr_core::model::{Model, ModelConfig};
use cloftr_core::trainer::{self, load_training_pairs};
use cloftr_core::Error;

/// Sequence length and head width of the attention speedup report.
const SPEEDUP_N: usize = 1200;
const SPEEDUP_D_HEAD: usize = 32;

#[derive(Parser, Debug)]
#[command(name = "cloftr", version, about = "Coarse feature matching: data generation, training, matching, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Render a synthetic multi-view dataset (images, depths, cameras, pairs.txt).
    SynthData(SynthArgs),
    /// Write ground-truth coarse matches of one pair.
    GenGt(GenGtArgs),
    /// Train a model, writing metrics.csv and checkpoints.
    Train(TrainArgs),
    /// Match two images and write "uA vA uB vB conf" lines.
    Match(MatchArgs),
    /// Mean MAE of a model over every pair of a dataset.
    Eval(EvalArgs),
    /// Time the full pair forward pass and the two attention paths.
    Bench(BenchArgs),
    /// Print the default run configuration.
    Config {
        /// Teacher architecture instead of the reduced model.
        #[arg(long)]
        teacher: bool,
    },
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    scenes: usize,
    /// Image size HxW; both multiples of 16.
    #[arg(long, default_value = "64x64")]
    size: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct GenGtArgs {
    #[arg(long)]
    data: PathBuf,
    /// Pair key SCENE:IDA:IDB, e.g. scene000:00000000:00000001.
    #[arg(long)]
    pair: String,
    /// Grid step in pixels.
    #[arg(long, default_value_t = 16)]
    step: usize,
    /// Relative depth tolerance.
    #[arg(long, default_value_t = 0.02)]
    tol: f64,
    /// Output file; one "cellA cellB uA vA uB vB" line per match, with each
    /// cell's sample pixel.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run configuration (key = value lines); defaults listed below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Teacher weights. Without them the distillation weight is 0.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Teacher architecture; inferred from the weights when omitted.
    #[arg(long)]
    teacher_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides train.seed (initialization and sampling).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Architecture and matching settings; inferred from the weights when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MatchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "imageA")]
    image_a: PathBuf,
    #[arg(long = "imageB")]
    image_b: PathBuf,
    /// Confidence threshold; defaults to matching.threshold of the config (0.2).
    #[arg(long)]
    threshold: Option<f64>,
    /// Keep matches that are not mutual nearest neighbours.
    #[arg(long)]
    no_mnn: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    /// CSV with header "pairs,mae" and one row.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Image size WxH.
    #[arg(long, default_value = "640x480")]
    size: String,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure with its process exit status.
struct Failure {
    code: u8,
    msg: String,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Validation(_) => 2,
            Error::NonFinite { .. } | Error::NonFiniteGradient(_) => 4,
            _ => 3,
        };
        Failure { code, msg: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn parse_size(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || usage(format!("size `{s}` is not of the form NxM"));
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

/// Loads weights under the given architecture, or tries the reduced and
/// teacher architectures in turn.
fn load_model(weights: &Path, cfg: Option<&ModelConfig>) -> Result<Model, Failure> {
    let tensors = dataio::load_weights(weights)?;
    if let Some(cfg) = cfg {
        return Ok(Model::from_weights(cfg.clone(), &tensors)?);
    }
    let mut first_err = None;
    for cfg in [ModelConfig::reduced(), ModelConfig::teacher()] {
        match Model::from_weights(cfg, &tensors) {
            Ok(m) => return Ok(m),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let e = first_err.expect("two attempts");
    Err(Failure {
        code: 3,
        msg: format!("{}: weights fit neither built-in architecture; pass --config ({e})", weights.display()),
    })
}

fn model_and_config(args: &ModelArgs) -> Result<(Model, RunConfig), Failure> {
    let cfg = load_config(args.config.as_deref())?;
    let model = load_model(&args.weights, args.config.as_ref().map(|_| &cfg.model))?;
    Ok((model, cfg))
}

fn synth_data(a: &SynthArgs) -> CmdResult {
    let (h, w) = parse_size(&a.size)?;
    if !a.force {
        if let Ok(mut entries) = std::fs::read_dir(&a.out) {
            if entries.next().is_some() {
                return Err(usage(format!("{} is not empty; pass --force to write into it", a.out.display())));
            }
        }
    }
    let pairs = dataio::generate_synthetic_dataset(&a.out, &SynthConfig::new(a.scenes, w, h, a.seed))?;
    println!("scenes={} pairs={pairs}", a.scenes);
    Ok(())
}

fn gen_gt(a: &GenGtArgs) -> CmdResult {
    let parts: Vec<&str> = a.pair.split(':').collect();
    let [scene, id_a, id_b] = parts[..] else {
        return Err(usage(format!("pair `{}` is not of the form SCENE:IDA:IDB", a.pair)));
    };
    // Any two views of a scene, listed in pairs.txt or not.
    let desc = PairDescriptor {
        scene: scene.to_string(),
        scene_dir: a.data.join(scene),
        id_a: id_a.to_string(),
        id_b: id_b.to_string(),
    };
    for id in [id_a, id_b] {
        for p in [desc.image_path(id), desc.depth_path(id), desc.camera_path(id)] {
            if !p.is_file() {
                return Err(Error::Dataset(format!("unknown pair `{}`: missing {}", a.pair, p.display())).into());
            }
        }
    }
    let pair = dataio::load_pair(&desc)?;
    let params = GtParams {
        grid_step: a.step,
        depth_tol: a.tol,
    };
    let gt = generate_ground_truth(&pair.depth_a, &pair.depth_b, &pair.cam_a, &pair.cam_b, params)?;
    let sample = |cell: usize, grid: (usize, usize), width: usize, height: usize| {
        cell_sample_pixel(cell / grid.1, cell % grid.1, a.step, width, height)
    };
    let mut text = String::new();
    for &(ca, cb) in &gt.pairs {
        let (ua, va) = sample(ca, gt.grid_a, pair.depth_a.width(), pair.depth_a.height());
        let (ub, vb) = sample(cb, gt.grid_b, pair.depth_b.width(), pair.depth_b.height());
        writeln!(text, "{ca} {cb} {ua} {va} {ub} {vb}").expect("write to String");
    }
    write_text(&a.out, &text)?;
    println!("matches={}", gt.pairs.len());
    Ok(())
}

fn train(a: &TrainArgs) -> CmdResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let teacher = match &a.teacher {
        Some(w) => {
            let tcfg = a.teacher_config.as_deref().map(RunConfig::load).transpose()?;
            Some(load_model(w, tcfg.as_ref().map(|c| &c.model))?)
        }
        None if a.teacher_config.is_some() => return Err(usage("--teacher-config needs --teacher")),
        None => None,
    };
    let data = load_training_pairs(&a.data, cfg.gt)?;
    log::info!("{} training pairs", data.len());
    let mut student = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let report = trainer::train(&mut student, teacher.as_ref(), &data, &cfg.train, &cfg.distill, &a.out)?;
    println!(
        "steps={} skipped_pairs={} final_epoch_mae={:.6e}",
        report.rows.len(),
        report.skipped_pairs,
        report.final_epoch_mae()
    );
    Ok(())
}

fn match_images(a: &MatchArgs) -> CmdResult {
    let (model, cfg) = model_and_config(&a.model)?;
    let image_a = dataio::load_image(&a.image_a)?;
    let image_b = dataio::load_image(&a.image_b)?;
    let pred = model.predict(&image_a, &image_b)?;
    let set = extract_matches(&pred.prob, a.threshold.unwrap_or(cfg.threshold), cfg.mnn && !a.no_mnn)?;
    let step = model.cfg.backbone.output_stride();
    let center = |cell: usize, grid: (usize, usize)| ((cell % grid.1) * step + step / 2, (cell / grid.1) * step + step / 2);
    let mut text = String::new();
    for m in &set.matches {
        let (ua, va) = center(m.cell_a, pred.grid_a);
        let (ub, vb) = center(m.cell_b, pred.grid_b);
        writeln!(text, "{ua} {va} {ub} {vb} {:.6}", m.confidence).expect("write to String");
    }
    write_text(&a.out, &text)?;
    println!("matches={}", set.matches.len());
    Ok(())
}

fn eval(a: &EvalArgs) -> CmdResult {
    let (model, cfg) = model_and_config(&a.model)?;
    let data = load_training_pairs(&a.data, cfg.gt)?;
    if data.is_empty() {
        return Err(Error::Dataset(format!("no pairs under {}", a.data.display())).into());
    }
    let mut total = 0.0;
    for pair in &data {
        let pred = model.predict(&pair.image_a, &pair.image_b)?;
        total += mae(&pred.prob.p, &pair.gt.dense())?;
    }
    let mean = total / data.len() as f64;
    write_text(&a.out, &format!("pairs,mae\n{},{mean:.8e}\n", data.len()))?;
    println!("pairs={} mae={mean:.8e}", data.len());
    Ok(())
}

fn bench(a: &BenchArgs) -> CmdResult {
    let (w, h) = parse_size(&a.size)?;
    let (model, _) = model_and_config(&a.model)?;
    let r = bench_pipeline(&model, h, w, a.iters, a.seed)?;
    println!("median_ms={:.3} fps={:.3}", r.median_ms, r.fps);
    let (fast, reference) = attention_timings(SPEEDUP_N, 1, SPEEDUP_D_HEAD, a.iters.clamp(1, 5), a.seed)?;
    println!(
        "attention n={SPEEDUP_N} d_head={SPEEDUP_D_HEAD}: fast_ms={fast:.3} reference_ms={reference:.3} speedup={:.2}",
        reference / fast
    );
    println!("params={}", model.param_count());
    Ok(())
}

fn run(cmd: &Cmd) -> CmdResult {
    match cmd {
        Cmd::SynthData(a) => synth_data(a),
        Cmd::GenGt(a) => gen_gt(a),
        Cmd::Train(a) => train(a),
        Cmd::Match(a) => match_images(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Bench(a) => bench(a),
        Cmd::Config { teacher } => {
            let cfg = if *teacher { RunConfig::teacher() } else { RunConfig::default() };
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let defaults = format!("Default configuration (reduced model):\n\n{}", RunConfig::default().to_text());
    let command = Cli::command().mut_subcommand("train", |c| c.after_long_help(defaults));
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(&cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
