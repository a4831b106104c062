use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gsdiff::config::PipelineConfig;
use gsdiff::{pipeline, Error};

#[derive(Parser, Debug)]
#[command(name = "gsdiff", version, about = "Change detection on deformable Gaussian scenes")]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for rendering and training. Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for scene generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override a config value, e.g. `--set train.iterations=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the scene, capture poses, held-out poses and ground truth.
    Generate,
    /// Render or ingest instance IDs and write the change masks M1 and M2.
    Detect,
    /// Train classification encodings and the change head; partition the cloud.
    Train,
    /// Render change maps for the held-out views or for a pose file.
    Render {
        /// Pose JSON; every record is rendered at its own epoch.
        #[arg(long)]
        poses: Option<PathBuf>,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Run the delta-threshold detector over its threshold grid.
    Baseline,
    /// Generate, detect, train, render and evaluate in one go.
    Run,
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "validation" => 2,
        "config" => 3,
        "contract" => 4,
        "format" => 5,
        "io" => 6,
        "training" => 7,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> gsdiff::Result<PipelineConfig> {
    let mut overrides = Vec::new();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
        overrides.push(format!("train.rng_seed={seed}"));
    }
    overrides.extend(cli.overrides.iter().cloned());
    PipelineConfig::load(cli.config.as_deref(), &overrides)
}

fn run(cli: &Cli) -> gsdiff::Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Generate => {
            let out = pipeline::generate(&cfg)?;
            println!("gaussians: {}", out.cloud.len());
            if let Some(gt) = out.ground_truth {
                println!("ground-truth changed ids: {:?}", gt.changed_ids);
            }
        }
        Command::Detect => {
            let r = pipeline::detect(&cfg)?;
            println!("changed ids: {:?}", r.changed_ids);
            println!("frames: {} (M1) + {} (M2)", r.m1_frames, r.m2_frames);
        }
        Command::Train => {
            let out = pipeline::train_stage(&cfg)?;
            if let (Some(a), Some(b)) = (out.curve.first(), out.curve.last()) {
                println!("loss: {:.6} -> {:.6}", a.total, b.total);
                println!("l2d: {:.6} -> {:.6}", a.l2d, b.l2d);
            }
            let changed = out
                .cloud
                .partition
                .iter()
                .filter(|&&p| p == gsdiff::scene::PartitionLabel::Changed)
                .count();
            println!("changed gaussians: {changed} of {}", out.cloud.len());
        }
        Command::Render { poses } => {
            let masks = pipeline::render_stage(&cfg, poses.as_deref())?;
            println!("rendered {} change maps into {}", masks.len(), pipeline::Layout::new(&cfg.out_dir).render_dir().display());
        }
        Command::Eval { pred, gt } => {
            let report = pipeline::eval_stage(&cfg, pred.as_deref(), gt.as_deref())?;
            print!("{}", report.pretty());
        }
        Command::Baseline => {
            let r = pipeline::baseline_stage(&cfg)?;
            let b = r.best_point();
            println!(
                "best grid F1 {:.4} at pos {:.4} rot/scale {:.4} ({} gaussians)",
                b.mean.f1, b.thresholds.pos_thresh, b.thresholds.rot_thresh, b.selected
            );
            println!("configured F1 {:.4} ({} gaussians)", r.configured.mean.f1, r.configured.selected);
        }
        Command::Run => {
            let out = pipeline::run_all(&cfg)?;
            println!("changed ids: {:?}", out.detect.changed_ids);
            print!("{}", out.eval.pretty());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error[config]: {e}");
            return ExitCode::from(3);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                Error::InvalidConfig(problems) => {
                    eprintln!("error[{}]: invalid configuration", e.category());
                    for p in problems {
                        eprintln!("  - {p}");
                    }
                }
                _ => eprintln!("error[{}]: {e}", e.category()),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
