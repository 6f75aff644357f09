mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vdpm::align::{build_windows, load_windows_dir, optimize, WindowPrediction};
use vdpm::dpm::{fuse_at_reference_time, DpmSet};
use vdpm::eval::{
    ablation_harness, depth_pose_protocol, tracking_protocol, trial_snippet, two_view_protocol, OraclePredictor,
    Predictor,
};
use vdpm::gradcheck::{model_suite, op_suite, report_lines};
use vdpm::model::Model;
use vdpm::scenegen::Snippet;
use vdpm::train::{train_loop, TrainOptions};

use config::RunConfig;

const GEN_STREAM: u64 = 0x6000;
const WINDOWS_STREAM: u64 = 0x6100;

#[derive(Parser)]
#[command(name = "vdpm", version, about = "Dynamic point maps on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Model checkpoint to evaluate.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Use ground truth as the prediction.
    #[arg(long)]
    oracle: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write generated snippets.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        spacing: Option<usize>,
    },
    /// Train a model; writes checkpoint, optimizer state and metrics log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from the checkpoint in `out`.
        #[arg(long)]
        resume: bool,
    },
    /// Two-view cross-time EPE table.
    #[command(name = "eval-2view")]
    Eval2View {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long, value_parser = parse_margin)]
        margin: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Tracking EPE of frame 0 over every time.
    #[command(name = "eval-track")]
    EvalTrack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        spacing: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Depth and camera trajectory over windowed sequences.
    #[command(name = "eval-depthpose")]
    EvalDepthPose {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Predict sliding windows over one generated sequence into `.vdpw` files.
    #[command(name = "predict-windows")]
    PredictWindows {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Fuse the `.vdpw` windows of a directory.
    Align {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        windows_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every decoder variant on the same budget and compare them.
    Ablation {
        #[command(flatten)]
        common: Common,
        /// Training steps per variant.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write the point cloud at reference time `j` as binary PLY.
    #[command(name = "export-ply")]
    ExportPly {
        #[command(flatten)]
        common: Common,
        /// Predict with this checkpoint instead of using ground truth.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Input snippet; generated from the config when absent.
        #[arg(long)]
        snippet: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        time_index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every op and of the configured model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        trials: u64,
    },
}

fn parse_margin(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(m @ (2 | 8)) => Ok(m),
        _ => Err(format!("margin must be 2 or 8, got {s}")),
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let cfg = RunConfig::load(common.config.as_deref())?.with_seed(common.seed);
    eprintln!("config {}", cfg.to_json());
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(Model::load(path)?.model)
}

fn predictor(source: &Source) -> Result<Box<dyn Predictor>> {
    match &source.ckpt {
        Some(p) => Ok(Box::new(load_model(p)?)),
        None => Ok(Box::new(OraclePredictor)),
    }
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    if let Some(p) = path {
        let text = serde_json::to_string_pretty(value)?;
        fs::write(p, text + "\n").map_err(|e| anyhow!("io error on {}: {e}", p.display()))?;
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| anyhow!("io error on {}: {e}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            common,
            out,
            count,
            frames,
            spacing,
        } => {
            let cfg = resolve(&common)?;
            let frames = frames.unwrap_or(cfg.snippets.frames);
            let spacing = spacing.unwrap_or(cfg.snippets.spacing);
            create_dir(&out)?;
            for k in 0..count {
                let (_, s) = trial_snippet(&cfg.generator, cfg.seed, GEN_STREAM, k, frames, spacing)?;
                s.save(&out.join(format!("snippet_{k:04}.vdps")))?;
            }
            println!("wrote {count} snippets to {}", out.display());
        }
        Command::Train {
            common,
            out,
            steps,
            resume,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(s) = steps {
                cfg.train.total_steps = s;
            }
            create_dir(&out)?;
            fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")
                .map_err(|e| anyhow!("io error on {}: {e}", out.display()))?;
            let model = Model::new(cfg.model.clone(), cfg.seed)?;
            let opts = TrainOptions {
                resume,
                verbose: true,
                ..TrainOptions::new(&out)
            };
            let rep = train_loop(model, &cfg.train, &cfg.loss, &cfg.generator, &opts)?;
            let last = rep.records.iter().rev().find_map(|r| r.val_loss).unwrap_or(f64::NAN);
            println!(
                "trained {} steps ({} skipped), final val loss {last:.6}, checkpoint {}",
                rep.steps_run,
                rep.skipped_steps,
                opts.checkpoint_path().display()
            );
        }
        Command::Eval2View {
            common,
            source,
            margin,
            trials,
            json,
        } => {
            let cfg = resolve(&common)?;
            let p = predictor(&source)?;
            let r = two_view_protocol(
                p.as_ref(),
                &cfg.generator,
                margin.unwrap_or(cfg.two_view.margin),
                trials.unwrap_or(cfg.two_view.trials),
                cfg.seed,
            )?;
            print!("{}", r.to_table());
            write_json(json.as_deref(), &r)?;
        }
        Command::EvalTrack {
            common,
            source,
            frames,
            spacing,
            trials,
            json,
        } => {
            let cfg = resolve(&common)?;
            let p = predictor(&source)?;
            let r = tracking_protocol(
                p.as_ref(),
                &cfg.generator,
                frames.unwrap_or(cfg.tracking.frames),
                spacing.unwrap_or(cfg.tracking.spacing),
                trials.unwrap_or(cfg.tracking.trials),
                cfg.seed,
            )?;
            print!("{}", r.to_table());
            write_json(json.as_deref(), &r)?;
        }
        Command::EvalDepthPose {
            common,
            source,
            window,
            stride,
            seq_len,
            trials,
            json,
        } => {
            let cfg = resolve(&common)?;
            let p = predictor(&source)?;
            let mut opts = cfg.depth_pose.clone();
            opts.window = window.unwrap_or(opts.window);
            opts.stride = stride.unwrap_or(opts.stride);
            opts.seq_len = seq_len.unwrap_or(opts.seq_len);
            opts.trials = trials.unwrap_or(opts.trials);
            let r = depth_pose_protocol(p.as_ref(), &cfg.generator, &opts)?;
            print!("{}", r.to_table());
            write_json(json.as_deref(), &r)?;
        }
        Command::PredictWindows {
            common,
            source,
            out,
            window,
            stride,
            seq_len,
        } => {
            let cfg = resolve(&common)?;
            let p = predictor(&source)?;
            let seq_len = seq_len.unwrap_or(cfg.depth_pose.seq_len);
            let ranges = build_windows(
                seq_len,
                window.unwrap_or(cfg.depth_pose.window),
                stride.unwrap_or(cfg.depth_pose.stride),
            )?;
            let (seq, snippet) = trial_snippet(&cfg.generator, cfg.seed, WINDOWS_STREAM, 0, seq_len, 1)?;
            let frames = &snippet.source.as_ref().context("generated snippet has no source")?.frames;
            create_dir(&out)?;
            snippet.save(&out.join("sequence.vdps"))?;
            for (k, &(a, b)) in ranges.iter().enumerate() {
                let sub = seq.snippet(&frames[a..b])?;
                let w = WindowPrediction::from_prediction(&p.predict(&sub, 0)?, a, sub.timestamps.clone())?;
                w.save(&out.join(format!("window_{k:03}.vdpw")))?;
            }
            println!("wrote {} windows to {}", ranges.len(), out.display());
        }
        Command::Align {
            common,
            windows_dir,
            out,
        } => {
            let cfg = resolve(&common)?;
            let windows = load_windows_dir(&windows_dir)?;
            let r = optimize(&windows, &cfg.align)?;
            r.save(&out)?;
            println!(
                "fused {} windows over {} frames: residual {:.3e} after {} iterations, written to {}",
                windows.len(),
                r.trajectory.len(),
                r.residual,
                r.iterations,
                out.display()
            );
        }
        Command::Ablation {
            common,
            budget,
            out,
            json,
        } => {
            let cfg = resolve(&common)?;
            let mut opts = cfg.ablation.clone();
            opts.steps = budget.unwrap_or(opts.steps);
            let r = ablation_harness(&cfg.model, &cfg.train, &cfg.loss, &cfg.generator, &opts, &out)?;
            print!("{}", r.to_table());
            println!("ordering: {}", r.ordering().join(" < "));
            write_json(json.as_deref(), &r)?;
        }
        Command::ExportPly {
            common,
            ckpt,
            snippet,
            time_index,
            out,
        } => {
            let cfg = resolve(&common)?;
            let s = match &snippet {
                Some(p) => Snippet::load(p)?,
                None => {
                    trial_snippet(&cfg.generator, cfg.seed, GEN_STREAM, 0, cfg.snippets.frames, cfg.snippets.spacing)?.1
                }
            };
            if time_index >= s.len() {
                bail!("invalid count: time index {time_index} out of range for {} frames", s.len());
            }
            let p: Box<dyn Predictor> = match &ckpt {
                Some(c) => Box::new(load_model(c)?),
                None => Box::new(OraclePredictor),
            };
            let pred = p.predict(&s, time_index)?;
            let set = DpmSet::new(s.timestamps.clone(), time_index, pred.time_variant, pred.time_invariant)?;
            let cloud = fuse_at_reference_time(&set);
            vdpm::ply::write(&out, &cloud)?;
            println!("wrote {} vertices to {}", cloud.len(), out.display());
        }
        Command::Gradcheck { common, trials } => {
            let cfg = resolve(&common)?;
            let mut lines = op_suite(trials)?;
            lines.extend(model_suite(&cfg.model, cfg.seed)?);
            print!("{}", report_lines(&lines));
            let failed = lines.iter().filter(|l| !l.passed).count();
            if failed > 0 {
                bail!("gradcheck: {failed} of {} checks failed", lines.len());
            }
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("VDPM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("VDPM_THREADS must be a positive integer, got {v:?}"))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
