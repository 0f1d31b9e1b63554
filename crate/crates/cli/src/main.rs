use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tissuesplat::gidm::{self, write_ply};
use tissuesplat::io::report::render_report;
use tissuesplat::io::synth::{generate_synthetic, SyntheticSceneSpec};
use tissuesplat::io::{load_dataset, read_rgb, write_atomic, write_depth16, write_mask, write_rgb8, Dataset};
use tissuesplat::losses::{masked_ssim, psnr};
use tissuesplat::train::checkpoint;
use tissuesplat::train::{FrameMetrics, TrainConfig, TrainState};

#[derive(Parser)]
#[command(name = "tissuesplat", version, about = "Deformable Gaussian splatting for moving tissue")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a model on a dataset and write checkpoints and a loss log.
    Train(TrainArgs),
    /// Render color and depth at given times from a checkpoint.
    Render(RenderArgs),
    /// Masked PSNR/SSIM per frame plus aggregates, as line-delimited JSON.
    Eval(EvalArgs),
    /// Write the initial point cloud (PLY) and the never-visible mask (PNG).
    InitDump(InitDumpArgs),
    /// Generate a synthetic deforming-tissue dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (JSON); omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    /// Resume from this checkpoint instead of initializing.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Normalized times in [0, 1]; repeat for several frames.
    #[arg(long = "time", required = true)]
    times: Vec<f64>,
    /// World units per raw step of the 16-bit depth output.
    #[arg(long, default_value_t = 1e-4)]
    depth_scale: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Model to evaluate.
    #[arg(long, conflicts_with = "renders", required_unless_present = "renders")]
    checkpoint: Option<PathBuf>,
    /// Directory of precomputed color renders laid out like the dataset images.
    #[arg(long)]
    renders: Option<PathBuf>,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated frame indices (default: all).
    #[arg(long, value_delimiter = ',')]
    frames: Option<Vec<usize>>,
}

#[derive(Args)]
struct InitDumpArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene spec (JSON); omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(TrainConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&args.dataset)?;
    let frames = dataset.training_frames();
    let mut state = match &args.checkpoint {
        Some(ck) => checkpoint::load(ck)?,
        None => {
            let mut cfg = read_config(args.config.as_deref())?;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            TrainState::initialize(cfg, dataset.camera.clone(), &frames)?
        }
    };
    if let Some(n) = args.iterations {
        state.config.iterations = n;
    }
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let manifest = json!({
        "dataset": args.dataset,
        "resumed_from": args.checkpoint,
        "start_iteration": state.iteration,
        "initial_gaussians": state.gaussians.len(),
        "config": state.config,
    });
    write_atomic(&args.out.join("run.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;

    let started = Instant::now();
    let mut log = String::new();
    while state.iteration < state.config.iterations {
        let report = state.step(&frames)?;
        log.push_str(&serde_json::to_string(&report)?);
        log.push('\n');
        if let Some(k) = state.config.checkpoint_interval.filter(|&k| k > 0) {
            if state.iteration % k == 0 {
                checkpoint::save(&state, &args.out.join(format!("checkpoint-{:06}.bin", state.iteration)))?;
            }
        }
        if state.iteration % 500 == 0 {
            log::info!("iteration {} loss {:.5} gaussians {}", state.iteration, report.total, state.gaussians.len());
        }
    }
    write_atomic(&args.out.join("loss.jsonl"), log.as_bytes())?;
    checkpoint::save(&state, &args.out.join("checkpoint.bin"))?;
    eprintln!(
        "trained to iteration {} with {} gaussians in {:.1}s",
        state.iteration,
        state.gaussians.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn render(args: RenderArgs) -> Result<()> {
    let state = checkpoint::load(&args.checkpoint)?;
    for &t in &args.times {
        if !(0.0..=1.0).contains(&t) {
            bail!("time {t} is outside [0, 1]");
        }
        let out = state.render_at(t)?;
        let stem = format!("t{t:.4}");
        write_rgb8(&args.out.join(format!("color_{stem}.png")), &out.color)?;
        write_depth16(&args.out.join(format!("depth_{stem}.png")), &out.depth, args.depth_scale)?;
    }
    Ok(())
}

fn select_frames(dataset: &Dataset, wanted: Option<&[usize]>) -> Result<Vec<usize>> {
    match wanted {
        None => Ok((0..dataset.frames.len()).collect()),
        Some(list) => {
            if let Some(bad) = list.iter().find(|&&i| i >= dataset.frames.len()) {
                bail!("frame {bad} does not exist (dataset has {})", dataset.frames.len());
            }
            Ok(list.to_vec())
        }
    }
}

fn eval(args: EvalArgs) -> Result<()> {
    let dataset = load_dataset(&args.dataset)?;
    let indices = select_frames(&dataset, args.frames.as_deref())?;
    let state = args.checkpoint.as_deref().map(checkpoint::load).transpose()?;
    let mut rows = Vec::with_capacity(indices.len());
    for i in indices {
        let frame = &dataset.frames[i];
        let color = match (&state, &args.renders) {
            (Some(s), _) => s.render_at(frame.time)?.color,
            (None, Some(dir)) => read_rgb(&dir.join(&dataset.manifest.frames[i].image))?,
            (None, None) => unreachable!("clap requires a model or renders"),
        };
        let m = FrameMetrics {
            index: i,
            time: frame.time,
            psnr: psnr(&color, &frame.image, &frame.mask)?,
            ssim: masked_ssim(&color, &frame.image, &frame.mask)? as f64,
        };
        rows.push((m, if dataset.is_heldout(i) { "heldout" } else { "train" }));
    }
    let text = render_report(&rows);
    match &args.out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn init_dump(args: InitDumpArgs) -> Result<()> {
    let cfg = read_config(args.config.as_deref())?;
    let dataset = load_dataset(&args.dataset)?;
    let (refined, cloud, set) = gidm::initialize(&dataset.training_frames(), &dataset.camera, &cfg.init)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_ply(&args.out.join("points.ply"), &cloud)?;
    write_mask(&args.out.join("occluded.png"), &refined.mask)?;
    eprintln!("{} points, {} gaussians after downsampling", cloud.len(), set.len());
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut spec: SyntheticSceneSpec = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SyntheticSceneSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(n) = args.frames {
        spec.frames = n;
    }
    let out = generate_synthetic(&spec, &args.out)?;
    eprintln!("wrote {} frames to {}", out.frames.len(), out.manifest_path.display());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::InitDump(a) => init_dump(a),
        Command::Synth(a) => synth(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
