//! Batch command-line surface over the stereostyle library.
//!
//! Exit codes: 0 on success, 2 on usage or input errors, 3 when the solver
//! diverges numerically.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stereostyle::error::Error;
use stereostyle::features::FeatureExtractor;
use stereostyle::io::{
    load_float_map, load_image, load_mask, save_float_map, save_image, save_mask,
};
use stereostyle::occlusion::{consistency_check, DEFAULT_TAU};
use stereostyle::solver::{stylize_stereo, InitKind, OptimizerKind, SolverConfig, TraceRow};
use stereostyle::synth_eval::{
    consistency_metric, epe_nonoccluded, occlusion_fscore, render_stereo, SceneSpec,
};
use stereostyle::tensor::{LossWeights, OcclusionMask};
use stereostyle::warp::{backward_warp, forward_warp};

#[derive(Parser)]
#[command(name = "stereostyle", version, about = "Disparity-consistent stereoscopic style transfer", max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stylize a stereo pair by joint energy minimization.
    Stylize(StylizeArgs),
    /// Warp an image along a disparity field.
    Warp(WarpArgs),
    /// Evaluate a metric and print it on one line.
    Eval(EvalArgs),
    /// Render a synthetic stereo scene with ground truth.
    Synth(SynthArgs),
}

#[derive(Args)]
struct StylizeArgs {
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    #[arg(long)]
    style: PathBuf,
    #[arg(long)]
    disp_left: PathBuf,
    #[arg(long)]
    disp_right: PathBuf,
    /// Occlusion mask for the left view (PFM, values 0/1). Computed by a
    /// consistency check and written next to the output when omitted.
    #[arg(long)]
    occ_left: Option<PathBuf>,
    #[arg(long)]
    occ_right: Option<PathBuf>,
    /// Extractor weight file; the bundled extractor is used when omitted.
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Content weight.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Style weight.
    #[arg(long, default_value_t = 1e6)]
    beta: f64,
    /// Cross-view consistency weight.
    #[arg(long, default_value_t = 500.0)]
    gamma: f64,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Seed for noise initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = InitArg::Content)]
    init: InitArg,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    /// Consistency-check threshold in pixels (used when masks are computed).
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = 1)]
    log_every: usize,
    #[arg(long)]
    out_left: PathBuf,
    #[arg(long)]
    out_right: PathBuf,
    /// CSV loss trace (step, per-term weighted losses, total).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    /// Start from the content images.
    Content,
    /// Start from seeded uniform noise.
    Noise,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Gd,
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long, value_enum)]
    mode: WarpMode,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    disp: PathBuf,
    /// Occlusion mask excluding source pixels (forward mode only).
    #[arg(long)]
    occ: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the hole mask in forward mode; defaults to the output
    /// path with a `_holes.pfm` suffix.
    #[arg(long)]
    hole_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum WarpMode {
    Forward,
    Backward,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    metric: Metric,
    /// Disparity under test (epe).
    #[arg(long)]
    disp: Option<PathBuf>,
    /// Ground-truth disparity (epe).
    #[arg(long)]
    disp_gt: Option<PathBuf>,
    /// Ground-truth occlusion mask (epe).
    #[arg(long)]
    occ_gt: Option<PathBuf>,
    /// Mask under test (fscore).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Ground-truth mask (fscore).
    #[arg(long)]
    mask_gt: Option<PathBuf>,
    /// Stylized views and their fields (consistency).
    #[arg(long)]
    left: Option<PathBuf>,
    #[arg(long)]
    right: Option<PathBuf>,
    #[arg(long)]
    disp_left: Option<PathBuf>,
    #[arg(long)]
    disp_right: Option<PathBuf>,
    #[arg(long)]
    occ_left: Option<PathBuf>,
    #[arg(long)]
    occ_right: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    /// Mean absolute disparity error over non-occluded pixels.
    Epe,
    /// F1 score of an occlusion mask, occluded = positive.
    Fscore,
    /// Cross-view photometric consistency of a stylized pair.
    Consistency,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description file.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Stylize(args) => cmd_stylize(args),
        Command::Warp(args) => cmd_warp(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Divergence { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

/// `ol.png` -> `ol_occ.pfm`, next to the output.
fn sibling_path(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn format_f64(v: f64) -> String {
    // Shortest representation that parses back to the same value.
    format!("{v:?}")
}

fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<(), Error> {
    let mut csv = String::from("step,content_l,content_r,style_l,style_r,disp_l,disp_r,total\n");
    for row in rows {
        let b = row.breakdown;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            row.step,
            format_f64(b.content_l),
            format_f64(b.content_r),
            format_f64(b.style_l),
            format_f64(b.style_r),
            format_f64(b.disp_l),
            format_f64(b.disp_r),
            format_f64(b.total()),
        );
    }
    std::fs::write(path, csv)?;
    Ok(())
}

fn cmd_stylize(args: StylizeArgs) -> Result<(), Error> {
    let i_l = load_image(&args.left)?;
    let i_r = load_image(&args.right)?;
    let style = load_image(&args.style)?;
    let d_l = load_float_map(&args.disp_left)?;
    let d_r = load_float_map(&args.disp_right)?;

    let mut computed_masks = false;
    let (m_l, m_r) = match (&args.occ_left, &args.occ_right) {
        (Some(l), Some(r)) => (load_mask(l)?, load_mask(r)?),
        (None, None) => {
            computed_masks = true;
            (
                consistency_check(&d_l, &d_r, args.tau)?,
                consistency_check(&d_r, &d_l, args.tau)?,
            )
        }
        _ => {
            return Err(Error::InvalidSpec(
                "provide both --occ-left and --occ-right, or neither".to_string(),
            ))
        }
    };

    let extractor = match &args.extractor {
        Some(path) => FeatureExtractor::load(path)?,
        None => FeatureExtractor::bundled_default(),
    };
    let weights = LossWeights::new(args.alpha, args.beta, args.gamma, 1.0)?;
    let cfg = SolverConfig {
        steps: args.steps,
        learning_rate: args.lr,
        optimizer: match args.optimizer {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Gd => OptimizerKind::PlainGd,
        },
        init: match args.init {
            InitArg::Content => InitKind::ContentCopy,
            InitArg::Noise => InitKind::UniformNoise { seed: args.seed },
        },
        log_every: args.log_every,
        ..SolverConfig::default()
    };

    let result = stylize_stereo(
        &i_l, &i_r, &style, &d_l, &d_r, &m_l, &m_r, &extractor, &weights, &cfg,
    )?;

    save_image(&result.left, &args.out_left)?;
    save_image(&result.right, &args.out_right)?;
    if computed_masks {
        save_mask(&m_l, sibling_path(&args.out_left, "_occ.pfm"))?;
        save_mask(&m_r, sibling_path(&args.out_right, "_occ.pfm"))?;
    }
    if let Some(trace) = &args.trace {
        write_trace(trace, &result.trace)?;
    }
    Ok(())
}

fn cmd_warp(args: WarpArgs) -> Result<(), Error> {
    let input = load_image(&args.input)?;
    let disp = load_float_map(&args.disp)?;
    match args.mode {
        WarpMode::Backward => {
            let out = backward_warp(&input, &disp)?;
            save_image(&out, &args.out)?;
        }
        WarpMode::Forward => {
            let occ = match &args.occ {
                Some(path) => load_mask(path)?,
                None => OcclusionMask::zeros(input.height(), input.width()),
            };
            let (out, holes) = forward_warp(&input, &disp, &occ)?;
            save_image(&out, &args.out)?;
            let hole_path = args
                .hole_out
                .clone()
                .unwrap_or_else(|| sibling_path(&args.out, "_holes.pfm"));
            save_mask(&holes.to_occlusion(), hole_path)?;
        }
    }
    Ok(())
}

fn require(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf, Error> {
    path.clone()
        .ok_or_else(|| Error::InvalidSpec(format!("--{flag} is required for this metric")))
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let value = match args.metric {
        Metric::Epe => {
            let d = load_float_map(require(&args.disp, "disp")?)?;
            let d_gt = load_float_map(require(&args.disp_gt, "disp-gt")?)?;
            let m_gt = load_mask(require(&args.occ_gt, "occ-gt")?)?;
            epe_nonoccluded(&d, &d_gt, &m_gt)?
        }
        Metric::Fscore => {
            let m = load_mask(require(&args.mask, "mask")?)?;
            let m_gt = load_mask(require(&args.mask_gt, "mask-gt")?)?;
            occlusion_fscore(&m, &m_gt)?
        }
        Metric::Consistency => {
            let o_l = load_image(require(&args.left, "left")?)?;
            let o_r = load_image(require(&args.right, "right")?)?;
            let d_l = load_float_map(require(&args.disp_left, "disp-left")?)?;
            let d_r = load_float_map(require(&args.disp_right, "disp-right")?)?;
            let m_l = load_mask(require(&args.occ_left, "occ-left")?)?;
            let m_r = load_mask(require(&args.occ_right, "occ-right")?)?;
            consistency_metric(&o_l, &o_r, &d_l, &d_r, &m_l, &m_r)?
        }
    };
    println!("{}", format_f64(value));
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), Error> {
    let spec = SceneSpec::from_file(&args.spec)?;
    let scene = render_stereo(&spec)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let path = |name: &str| args.out_dir.join(name);
    save_image(&scene.left, path("left.png"))?;
    save_image(&scene.right, path("right.png"))?;
    save_float_map(&scene.disp_left, path("disp_left.pfm"))?;
    save_float_map(&scene.disp_right, path("disp_right.pfm"))?;
    save_mask(&scene.occ_left, path("occ_left.pfm"))?;
    save_mask(&scene.occ_right, path("occ_right.pfm"))?;
    Ok(())
}
