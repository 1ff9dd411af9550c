//! Command-line toolchain.
//!
//! `run` takes an argument vector and drives the whole pipeline: inspect a
//! network plan, seed weights, cut a patch store, train either track,
//! upscale, render pixel responses, and score results. Success exits 0;
//! every tool failure exits 1 after a single `error: ...` line on stderr so
//! scripts can parse outcomes without scraping.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{
    default_prep_patch, is_image_file, open_store, prep_dataset, PrepConfig, DEFAULT_BATCH,
};
use crate::discriminator::{CriticConfig, CriticWeights};
use crate::error::{Error, Result};
use crate::format::{load_weights_auto, plan_descriptor, save_weights};
use crate::generator::{dfv_impulse_response, GeneratorWeights, NoiseSource};
use crate::imageio::{read_image, write_png};
use crate::loss::{
    fidelity_validation, neg_local_contrast, perceptual_validation, psnr, SeededConvExtractor,
};
use crate::plan::{
    default_schedule, simulate_shapes, unfold, ModuleKind, NetworkPlan, PlanConfig, DESK_SCHEDULE,
};
use crate::tensor::{Shape, Tensor};
use crate::tile::{ensemble_upscale, upscale_image, GeneratorRunner, TileConfig};
use crate::train::{train_fidelity, train_perceptual, QhAdamConfig, TrainConfig};

/// Seed of the frozen feature extractor behind perceptual training. Fixed so
/// scores stay comparable across runs and machines.
const EXTRACTOR_SEED: u64 = 7;

#[derive(Parser)]
#[command(
    name = "mgbp",
    version,
    about = "Multigrid back-projection 16x super-resolution toolchain"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the unfolded network: modules, counts, parameter and
    /// multiply-accumulate tallies.
    Describe(DescribeArgs),
    /// Write a container of freshly seeded generator weights.
    Init(InitArgs),
    /// Cut a directory of photographs into an on-disk patch store.
    Prep(PrepArgs),
    /// Train weights against a prepared patch store.
    Train(TrainArgs),
    /// Upscale one image 16x with overlapping-window tiling.
    Upscale(UpscaleArgs),
    /// Render the network's linearized response to one input pixel.
    Dfv(DfvArgs),
    /// Score generated images, optionally against references.
    Eval(EvalArgs),
}

/// Network geometry flags shared by the subcommands that build a plan.
#[derive(Args)]
struct PlanFlags {
    /// Refinement passes per level transition
    #[arg(long, default_value_t = 2)]
    mu: usize,

    /// Resolution levels in the recursion
    #[arg(long, default_value_t = 4)]
    levels: usize,

    /// Comma-separated feature widths, coarsest level first. Defaults to the
    /// desk preset 32,24,16,8 at four levels and to the full-size family
    /// otherwise.
    #[arg(long, value_delimiter = ',')]
    schedule: Option<Vec<usize>>,

    /// Square convolution size
    #[arg(long, default_value_t = 3)]
    filter: usize,
}

impl PlanFlags {
    fn config(&self) -> Result<PlanConfig> {
        let schedule = match &self.schedule {
            Some(s) => s.clone(),
            None if self.levels == DESK_SCHEDULE.len() => DESK_SCHEDULE.to_vec(),
            None => default_schedule(self.levels)?,
        };
        Ok(PlanConfig::new(self.mu, self.levels, schedule, self.filter))
    }
}

#[derive(Args)]
struct DescribeArgs {
    #[command(flatten)]
    plan: PlanFlags,

    /// Network input height for the cost tally (the network runs after the
    /// 16x pre-upscale)
    #[arg(long, default_value_t = 128)]
    height: usize,

    /// Network input width for the cost tally
    #[arg(long, default_value_t = 128)]
    width: usize,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    plan: PlanFlags,

    /// Seed for the weight initialization
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Container file to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PrepArgs {
    /// Directory of source photographs
    #[arg(long)]
    input: PathBuf,

    /// Directory to fill with the patch store
    #[arg(long)]
    output: PathBuf,

    /// Stored patch edge; keep a margin above the training crop
    #[arg(long, default_value_t = default_prep_patch(64))]
    patch: usize,

    /// Offset between neighboring patches. Defaults to the patch edge, which
    /// tiles sources without overlap.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainMode {
    /// Content track: multi-scale absolute error against the reference.
    Fidelity,
    /// Texture track: adversarial and contextual terms on top of content.
    Perceptual,
}

#[derive(Args)]
struct TrainArgs {
    /// Training track
    #[arg(value_enum)]
    mode: TrainMode,

    /// Patch store directory written by `prep`
    #[arg(long)]
    data: PathBuf,

    /// Where to checkpoint the best generator weights
    #[arg(long)]
    out: PathBuf,

    /// Start from these generator weights instead of a fresh seed
    #[arg(long)]
    resume: Option<PathBuf>,

    #[command(flatten)]
    plan: PlanFlags,

    /// Training epochs
    #[arg(long, default_value_t = 10)]
    epochs: usize,

    /// Batches per epoch
    #[arg(long, default_value_t = crate::train::DEFAULT_BATCHES_PER_EPOCH)]
    batches: usize,

    /// Crops per batch
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    batch: usize,

    /// Training crop edge, a multiple of 16 at least 64
    #[arg(long, default_value_t = 64)]
    patch: usize,

    /// Run seed: sampling, noise, and fresh weights derive from it
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Generator learning rate
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,

    /// Critic learning rate, perceptual track only
    #[arg(long, default_value_t = 1e-4)]
    critic_lr: f64,

    /// Where to checkpoint critic weights, perceptual track only
    #[arg(long)]
    critic_out: Option<PathBuf>,
}

#[derive(Args)]
struct UpscaleArgs {
    /// Low-resolution input image
    #[arg(long)]
    input: PathBuf,

    /// Where to write the upscaled result
    #[arg(long)]
    output: PathBuf,

    /// Generator weight container; the file names its own network geometry
    #[arg(long)]
    weights: Option<PathBuf>,

    /// Comma-separated weight containers whose outputs are averaged
    #[arg(long, value_delimiter = ',')]
    ensemble: Vec<PathBuf>,

    /// Window edge processed per tile
    #[arg(long, default_value_t = 256)]
    patch: usize,

    /// Offset between neighboring tiles
    #[arg(long, default_value_t = 192)]
    stride: usize,

    /// Noise amplitude W in [0, 1]: 0 reproduces content, 1 adds the full
    /// learned texture
    #[arg(long, default_value_t = 0.0)]
    noise_amplitude: f32,

    /// Seed for the noise plane
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DfvArgs {
    /// Generator weight container
    #[arg(long)]
    weights: PathBuf,

    /// Where to write the rendered response
    #[arg(long)]
    output: PathBuf,

    /// Edge of the square probe canvas
    #[arg(long, default_value_t = 64)]
    size: usize,

    /// Probe row; defaults to the canvas center
    #[arg(long)]
    row: Option<usize>,

    /// Probe column; defaults to the canvas center
    #[arg(long)]
    col: Option<usize>,

    /// Input plane to probe: 0, 1, 2 are red, green, blue; 3 is the noise
    /// channel
    #[arg(long, default_value_t = 0)]
    channel: usize,

    /// Noise amplitude of the reference pass
    #[arg(long, default_value_t = 0.5)]
    noise_amplitude: f32,

    /// Seed for the reference noise
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of images to score
    #[arg(long)]
    generated: PathBuf,

    /// Directory of references under the same file names; adds error and
    /// signal-to-noise readouts
    #[arg(long)]
    reference: Option<PathBuf>,
}

/// Parse an argument vector and run it to completion, returning the process
/// exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help and version on stdout with exit 0, usage
            // errors on stderr with exit 2.
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::Describe(args) => cmd_describe(args),
        Command::Init(args) => cmd_init(args),
        Command::Prep(args) => cmd_prep(args),
        Command::Train(args) => cmd_train(args),
        Command::Upscale(args) => cmd_upscale(args),
        Command::Dfv(args) => cmd_dfv(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            1
        }
    }
}

/// Entry point for the installed binary: wires logging, then runs the
/// process arguments.
pub fn run_from_env() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .try_init();
    run(std::env::args_os())
}

fn kind_count(plan: &NetworkPlan, kind: ModuleKind) -> usize {
    plan.instances.iter().filter(|i| i.tag.kind == kind).count()
}

fn cmd_describe(args: DescribeArgs) -> Result<()> {
    let plan = unfold(args.plan.config()?)?;
    println!("plan: {}", plan_descriptor(&plan.config));
    println!("min_input: {}", plan.config.min_input());
    println!("analysis_modules: {}", kind_count(&plan, ModuleKind::Analysis));
    println!("downscale_modules: {}", kind_count(&plan, ModuleKind::Downscale));
    println!("upscale_modules: {}", kind_count(&plan, ModuleKind::Upscale));
    println!("synthesis_modules: {}", kind_count(&plan, ModuleKind::Synthesis));
    println!("total_modules: {}", plan.instances.len());
    println!("parameters: {}", plan.param_count());
    let records = simulate_shapes(&plan, args.height, args.width)?;
    let total: u64 = records.iter().map(|r| r.macs).sum();
    println!("macs_{}x{}: {}", args.height, args.width, total);
    println!("modules:");
    let index = plan.index();
    for r in &records {
        let inst = &plan.instances[index[&r.tag]];
        println!(
            "  {}: {}x{}x{} -> {}x{}x{} k{} s{} macs {}",
            r.tag,
            r.input.channels,
            r.input.height,
            r.input.width,
            r.output.channels,
            r.output.height,
            r.output.width,
            inst.spec.kernel,
            inst.spec.stride,
            r.macs
        );
    }
    Ok(())
}

fn cmd_init(args: InitArgs) -> Result<()> {
    let plan = unfold(args.plan.config()?)?;
    let weights = GeneratorWeights::init(&plan, args.seed);
    save_weights(&args.out, &plan, &weights)?;
    let bytes = fs::metadata(&args.out)?.len();
    println!(
        "wrote {} ({} parameters, {} bytes)",
        args.out.display(),
        plan.param_count(),
        bytes
    );
    Ok(())
}

fn cmd_prep(args: PrepArgs) -> Result<()> {
    let cfg = PrepConfig {
        patch: args.patch,
        stride: args.stride.unwrap_or(args.patch),
    };
    let report = prep_dataset(&args.input, &args.output, &cfg)?;
    println!(
        "prepped {} images into {} patches ({} unreadable, {} undersized)",
        report.prepped, report.patches, report.unreadable, report.skipped
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let store = open_store(&args.data)?;
    let (plan, mut weights) = match &args.resume {
        Some(path) => load_weights_auto(path)?,
        None => {
            let plan = unfold(args.plan.config()?)?;
            let weights = GeneratorWeights::init(&plan, args.seed);
            (plan, weights)
        }
    };

    let mut cfg = TrainConfig::new(args.epochs, args.patch);
    cfg.batches_per_epoch = args.batches;
    cfg.batch = args.batch;
    cfg.seed = args.seed;
    cfg.checkpoint = Some(args.out.clone());

    let gen_opt = QhAdamConfig {
        lr: args.lr,
        ..QhAdamConfig::default()
    };

    let stats = match args.mode {
        TrainMode::Fidelity => train_fidelity(&plan, &mut weights, &store, &cfg, gen_opt)?,
        TrainMode::Perceptual => {
            cfg.critic_checkpoint = args.critic_out.clone();
            let critic_opt = QhAdamConfig {
                lr: args.critic_lr,
                ..QhAdamConfig::default()
            };
            let mut critic =
                CriticWeights::init(CriticConfig::default(), args.seed.wrapping_add(1))?;
            let extractor = SeededConvExtractor::new(EXTRACTOR_SEED);
            train_perceptual(
                &plan,
                &mut weights,
                &mut critic,
                &extractor,
                &neg_local_contrast,
                &store,
                &cfg,
                gen_opt,
                critic_opt,
            )?
        }
    };

    println!(
        "trained {} epochs; best validation {:.6e}; weights at {}",
        stats.epochs.len(),
        stats.best_validation,
        args.out.display()
    );
    Ok(())
}

fn cmd_upscale(args: UpscaleArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.noise_amplitude) {
        return Err(Error::invalid(
            "upscale",
            format!("--noise-amplitude {} is outside [0, 1]", args.noise_amplitude),
        ));
    }
    match (&args.weights, args.ensemble.is_empty()) {
        (Some(_), false) => {
            return Err(Error::invalid(
                "upscale",
                "pass either --weights or --ensemble, not both",
            ))
        }
        (None, true) => {
            return Err(Error::invalid(
                "upscale",
                "pass --weights FILE or --ensemble A,B,...",
            ))
        }
        _ => {}
    }

    let lr_image = read_image(&args.input)?;
    let mut config = TileConfig::new(args.patch, args.stride);
    config.noise_amplitude = args.noise_amplitude;
    config.seed = args.seed;

    let up = if let Some(path) = &args.weights {
        let (plan, weights) = load_weights_auto(path)?;
        let runner = GeneratorRunner {
            plan: &plan,
            weights: &weights,
        };
        upscale_image(&lr_image, &runner, &config)?
    } else {
        let loaded: Vec<(NetworkPlan, GeneratorWeights)> = args
            .ensemble
            .iter()
            .map(|p| load_weights_auto(p))
            .collect::<Result<_>>()?;
        let systems: Vec<(&NetworkPlan, &GeneratorWeights)> =
            loaded.iter().map(|(p, w)| (p, w)).collect();
        ensemble_upscale(&lr_image, &systems, &config)?
    };

    write_png(&args.output, &up.image)?;
    let ins = lr_image.shape();
    let outs = up.image.shape();
    println!(
        "{}x{} -> {}x{}, peak working set {:.1} MiB, wrote {}",
        ins.width,
        ins.height,
        outs.width,
        outs.height,
        up.stats.peak_bytes as f64 / (1 << 20) as f64,
        args.output.display()
    );
    Ok(())
}

fn cmd_dfv(args: DfvArgs) -> Result<()> {
    let (plan, weights) = load_weights_auto(&args.weights)?;
    let size = args.size;
    let row = args.row.unwrap_or(size / 2);
    let col = args.col.unwrap_or(size / 2);
    if row >= size || col >= size {
        return Err(Error::invalid(
            "dfv",
            format!("probe ({}, {}) is outside a {0}x{0} canvas", row, col),
        ));
    }
    if args.channel > 3 {
        return Err(Error::invalid(
            "dfv",
            format!("channel {} is not an input plane (0-2 color, 3 noise)", args.channel),
        ));
    }

    let canvas = Tensor::from_vec(Shape::new(1, 3, size, size), vec![0.5; 3 * size * size])?;
    let noise = NoiseSource::Sample {
        amplitude: args.noise_amplitude,
        seed: args.seed,
    };
    let response =
        dfv_impulse_response(&plan, &weights, &canvas, &noise, args.channel, row, col)?;

    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in response.data().iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let viewable = if hi > lo {
        response.add_scalar(-lo).scale(1.0 / (hi - lo))
    } else {
        Tensor::from_vec(response.shape(), vec![0.5; response.shape().numel()])?
    };
    write_png(&args.output, &viewable)?;
    println!(
        "wrote {} (response range [{:+.3e}, {:+.3e}])",
        args.output.display(),
        lo,
        hi
    );
    Ok(())
}

/// Trim an image so both spatial extents divide `m`, keeping the top-left
/// corner. Scoring downscales by up to 4, which needs that divisibility.
fn crop_to_multiple(img: &Tensor, m: usize) -> Result<Tensor> {
    let s = img.shape();
    let h = s.height - s.height % m;
    let w = s.width - s.width % m;
    if h == s.height && w == s.width {
        return Ok(img.clone());
    }
    let d = img.data();
    let mut out = Vec::with_capacity(s.batch * s.channels * h * w);
    for b in 0..s.batch {
        for c in 0..s.channels {
            for y in 0..h {
                for x in 0..w {
                    out.push(d[s.index(b, c, y, x)]);
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(s.batch, s.channels, h, w), out)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut names: Vec<String> = fs::read_dir(&args.generated)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| is_image_file(p))
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::EmptyDataset {
            root: args.generated.display().to_string(),
        });
    }

    let metric = |t: &Tensor| neg_local_contrast(t);
    let (mut mse_sum, mut psnr_sum, mut perc_sum) = (0.0f64, 0.0f64, 0.0f64);
    for name in &names {
        let candidate = crop_to_multiple(&read_image(&args.generated.join(name))?, 4)?;
        let cs = candidate.shape();
        if cs.height < 8 || cs.width < 8 {
            return Err(Error::invalid("eval", format!("{} is too small to score", name)));
        }
        let perc = perceptual_validation(&candidate, &metric)?;
        perc_sum += perc;
        match &args.reference {
            Some(dir) => {
                let path = dir.join(name);
                if !path.is_file() {
                    return Err(Error::invalid("eval", format!("no reference for {}", name)));
                }
                let reference = crop_to_multiple(&read_image(&path)?, 4)?;
                let mse = fidelity_validation(&candidate, &reference)?;
                let db = psnr(mse);
                mse_sum += mse;
                psnr_sum += db;
                println!(
                    "{}: mse {:.6e} psnr {:.2} dB perceptual {:+.6}",
                    name, mse, db, perc
                );
            }
            None => println!("{}: perceptual {:+.6}", name, perc),
        }
    }

    let n = names.len() as f64;
    match &args.reference {
        Some(_) => println!(
            "mean over {}: mse {:.6e} psnr {:.2} dB perceptual {:+.6}",
            names.len(),
            mse_sum / n,
            psnr_sum / n,
            perc_sum / n
        ),
        None => println!("mean over {}: perceptual {:+.6}", names.len(), perc_sum / n),
    }
    Ok(())
}
