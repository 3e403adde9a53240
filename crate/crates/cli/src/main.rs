use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gpgait::commands::{cmd_eval, cmd_inspect, cmd_preprocess, cmd_synth, cmd_train};
use gpgait::config::{Preset, RunConfig};
use gpgait::hot::Normalization;
use gpgait::pagcn::BranchKind;
use gpgait::pose_io::Protocol;
use gpgait::synth::{CameraSpec, SynthConfig};
use gpgait::{Error, Result};

/// Pose-based gait recognition.
#[derive(Parser, Debug)]
#[command(name = "gpgait", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// casiab, oumvlp, gait3d, grew or toy.
    #[arg(long, global = true)]
    preset: Option<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true, env = "GPGAIT_THREADS")]
    threads: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct Ablation {
    /// Train and evaluate on raw coordinates.
    #[arg(long)]
    no_hot: bool,

    /// hot, none, spine_unit or dataset_independent.
    #[arg(long)]
    normalization: Option<String>,

    /// Comma-separated subset of joint, bone, angle.
    #[arg(long)]
    descriptors: Option<String>,

    /// Feed all descriptors through one branch.
    #[arg(long)]
    single_branch: bool,

    /// Replace every partition mask with the all-ones mask.
    #[arg(long)]
    no_partition: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize and describe a dataset, writing caches and a report.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        ablation: Ablation,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
        #[command(flatten)]
        ablation: Ablation,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Overrides the manifest's protocol.
        #[arg(long)]
        protocol: Option<String>,
        /// Results file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump per-keypoint features of one sequence.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sequence file; its first sequence is used.
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        branch: usize,
        /// Also dump the same network run without partition masks.
        #[arg(long)]
        compare_unmasked: bool,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        identities: usize,
        #[arg(long, default_value_t = 6)]
        sequences: usize,
        #[arg(long, default_value_t = 60)]
        frames: usize,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Camera roll in radians.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        rotation: f64,
        #[arg(long, default_value_t = 320.0, allow_negative_numbers = true)]
        translate_x: f64,
        #[arg(long, default_value_t = 120.0, allow_negative_numbers = true)]
        translate_y: f64,
        #[arg(long, default_value_t = 0.5)]
        jitter: f64,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let preset = cli.preset.as_deref().map(str::parse::<Preset>).transpose()?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, preset)?,
        None => RunConfig::preset(preset.unwrap_or(Preset::Toy)),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_ablation(cfg: &mut RunConfig, a: &Ablation) -> Result<()> {
    if let Some(n) = &a.normalization {
        cfg.normalization = match n.as_str() {
            "hot" => Normalization::Hot,
            "none" => Normalization::None,
            "spine_unit" => Normalization::SpineUnit,
            "dataset_independent" => Normalization::DatasetIndependent,
            other => return Err(Error::Config(format!("unknown normalization `{other}`"))),
        };
    }
    if a.no_hot {
        cfg.normalization = Normalization::None;
    }
    if let Some(list) = &a.descriptors {
        let mut branches = Vec::new();
        for name in list.split(',').map(str::trim) {
            let b = match name {
                "joint" => BranchKind::Joint,
                "angle" => BranchKind::Angle,
                "bone" => BranchKind::Bone,
                other => return Err(Error::Config(format!("unknown descriptor `{other}`"))),
            };
            if !branches.contains(&b) {
                branches.push(b);
            }
        }
        // keep the canonical joint, angle, bone order
        branches.sort_by_key(|b| match b {
            BranchKind::Joint => 0,
            BranchKind::Angle => 1,
            _ => 2,
        });
        cfg.network.branches = branches;
    }
    if a.single_branch {
        cfg.network.branches = vec![BranchKind::Fused];
    }
    if a.no_partition {
        cfg.network.partition = false;
    }
    match cfg.normalization {
        Normalization::SpineUnit => Err(Error::NotImplemented("spine_unit normalization")),
        Normalization::DatasetIndependent => Err(Error::NotImplemented("dataset_independent normalization")),
        _ => cfg.validate(),
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Preprocess {
            manifest,
            out,
            ablation,
        } => {
            let mut cfg = load_config(cli)?;
            apply_ablation(&mut cfg, ablation)?;
            let s = cmd_preprocess(manifest, &cfg, out)?;
            println!(
                "preprocessed {} sequences: {} dropped, {} frames dropped",
                s.sequences, s.dropped_sequences, s.dropped_frames
            );
        }
        Command::Train {
            manifest,
            out,
            resume,
            iterations,
            ablation,
        } => {
            let mut cfg = load_config(cli)?;
            apply_ablation(&mut cfg, ablation)?;
            if let Some(n) = iterations {
                cfg.train.iterations = *n;
            }
            let s = cmd_train(&cfg, manifest, out, resume.as_deref())?;
            if let Some(m) = s.last {
                println!("{}", m.log_line());
            }
            println!("checkpoint {} at iteration {}", s.checkpoint.display(), s.iterations);
        }
        Command::Eval {
            checkpoint,
            manifest,
            protocol,
            out,
        } => {
            let protocol = protocol.as_deref().map(str::parse::<Protocol>).transpose()?;
            let r = cmd_eval(checkpoint, manifest, protocol, out)?;
            println!("{} rank-1 {:.4}", r.protocol, r.mean);
        }
        Command::Inspect {
            checkpoint,
            sequence,
            out,
            branch,
            compare_unmasked,
        } => {
            for p in cmd_inspect(checkpoint, sequence, out, *branch, *compare_unmasked)? {
                println!("{}", p.display());
            }
        }
        Command::Synth {
            out,
            identities,
            sequences,
            frames,
            scale,
            rotation,
            translate_x,
            translate_y,
            jitter,
        } => {
            let cfg = SynthConfig {
                identities: *identities,
                sequences_per_identity: *sequences,
                frames: *frames,
                seed: cli.seed.unwrap_or(0),
                cameras: vec![CameraSpec {
                    scale: *scale,
                    translation: [*translate_x, *translate_y],
                    rotation: *rotation,
                    jitter: *jitter,
                }],
            };
            let m = cmd_synth(&cfg, out)?;
            println!(
                "{} sequences, manifest {}",
                m.entries.len(),
                Path::new(out).join("manifest.tsv").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
