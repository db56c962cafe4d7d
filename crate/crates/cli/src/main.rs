use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use jointdiff::balance::compute_balancing_factor;
use jointdiff::checkpoint::Checkpoint;
use jointdiff::diffusion_train::{train_diffusion, DiffTrainConfig};
use jointdiff::pipeline::{cmd_pipeline, cmd_render, evaluate_checkpoint, DataConfig, PipelineConfig, StageFailure};
use jointdiff::sampler::{synthesize_dataset, SamplerConfig, SamplerSetup};
use jointdiff::student::{train_student, StudentTrainConfig};
use jointdiff::toydata::{generate_dataset, DatasetManifest, Split};
use jointdiff::Error;

/// Verbosity is controlled by this variable only (env_logger syntax).
const LOG_ENV: &str = "JOINTDIFF_LOG";

#[derive(Parser)]
#[command(name = "jointdiff", version, about = "Joint image/label diffusion augmentation and soft-label distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy SAR dataset (train and test splits).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// JSON data config (size, num_classes, n_train, n_test, class_probs, looks).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Compute the balancing factor of a dataset and store it in its manifest.
    Balance {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the joint denoiser.
    TrainDiffusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample image/logit pairs from a trained denoiser.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ddim_steps: Option<usize>,
    },
    /// Train a student on D, optionally augmented with generated data.
    TrainStudent {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        aug: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        aug_ratio: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train generated samples on their argmax labels instead of soft labels.
        #[arg(long)]
        hard_labels: bool,
    },
    /// Evaluate a student checkpoint on a dataset split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render image / probability / mask strips of a dataset as PPM files.
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
    /// Run every stage end to end.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

enum CliError {
    Config(String),
    Core(Error),
    Stage(StageFailure),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        let core = match self {
            CliError::Config(_) => return 2,
            CliError::Core(e) => e,
            CliError::Stage(s) => &s.error,
        };
        match core {
            Error::Parameter(_) => 2,
            Error::Divergence { .. } => 4,
            _ => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Stage(s) => write!(f, "{s} (completed stages: {})", s.manifest.stages.len()),
        }
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Accepts either a dataset directory or its `manifest.json`.
fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    }
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    Ok(DatasetManifest::load(&manifest_path(path))?)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(value).map_err(Error::from)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            config,
            size,
            classes,
            n_train,
            n_test,
        } => {
            let mut cfg: DataConfig = load_config(config.as_deref())?;
            cfg.size = size.unwrap_or(cfg.size);
            cfg.num_classes = classes.unwrap_or(cfg.num_classes);
            cfg.n_train = n_train.unwrap_or(cfg.n_train);
            cfg.n_test = n_test.unwrap_or(cfg.n_test);
            if cfg.class_probs.is_none() && cfg.num_classes > 5 {
                return Err(CliError::Config("at most 5 classes are supported".into()));
            }
            let m = generate_dataset(&cfg.scene_spec(seed), cfg.n_train, cfg.n_test, &out)?;
            println!("wrote {} samples to {}", m.len(), out.join("manifest.json").display());
        }
        Command::Balance { data } => {
            let mut m = load_manifest(&data)?;
            let f = compute_balancing_factor(&m)?;
            m.balancing_factor = Some(f.clone());
            m.save(&manifest_path(&data))?;
            print_json(&f)?;
        }
        Command::TrainDiffusion {
            data,
            out,
            seed,
            config,
            steps,
        } => {
            let mut cfg: DiffTrainConfig = load_config(config.as_deref())?;
            cfg.seed = seed;
            cfg.steps = steps.unwrap_or(cfg.steps);
            let m = load_manifest(&data)?;
            let res = train_diffusion(&cfg, &m, Some(&out))?;
            let last = res.trace.last().map(|e| e.loss).unwrap_or(f64::NAN);
            println!(
                "trained {} steps (b = {:.6}, final loss {last:.4}); checkpoint {}",
                res.trace.len(),
                res.b,
                out.join("denoiser.ckpt").display()
            );
        }
        Command::Synthesize {
            checkpoint,
            n,
            seed,
            out,
            config,
            ddim_steps,
        } => {
            let mut cfg: SamplerConfig = load_config(config.as_deref())?;
            cfg.seed = seed;
            cfg.num_samples = n;
            cfg.ddim_steps = ddim_steps.unwrap_or(cfg.ddim_steps);
            let ck = Checkpoint::load(&checkpoint)?;
            let setup = SamplerSetup::from_checkpoint(&ck, &cfg)?;
            let m = synthesize_dataset(&setup.model, &setup.sched, setup.b, setup.resolution, &cfg, &out)?;
            println!("generated {} pairs, checksum {}", m.len(), m.checksum()?);
        }
        Command::TrainStudent {
            data,
            aug,
            out,
            seed,
            config,
            aug_ratio,
            epochs,
            hard_labels,
        } => {
            let mut cfg: StudentTrainConfig = load_config(config.as_deref())?;
            cfg.seed = seed;
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.hard_labels |= hard_labels;
            if let Some(r) = aug_ratio {
                cfg.aug_ratio = r;
            } else if aug.is_none() {
                cfg.aug_ratio = 0.0;
            }
            let d = load_manifest(&data)?;
            let d_a = aug.as_deref().map(load_manifest).transpose()?;
            let res = train_student(&cfg, &d, d_a.as_ref(), Some(&out))?;
            match res.final_report {
                Some(r) => print_json(&r)?,
                None => println!("trained {} epochs (no test split to evaluate)", res.trace.len()),
            }
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            out,
        } => {
            let split = match split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(CliError::Config(format!("unknown split {other:?}"))),
            };
            let m = load_manifest(&data)?;
            let report = evaluate_checkpoint(&checkpoint, &m, split)?;
            if let Some(path) = out {
                let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
                fs::write(&path, text).map_err(|e| CliError::Core(Error::Io { path, source: e }))?;
            }
            print_json(&report)?;
        }
        Command::Render { data, out, limit } => {
            let m = load_manifest(&data)?;
            let files = cmd_render(&m, &out, limit)?;
            println!("wrote {} renders to {}", files.len(), out.display());
        }
        Command::Pipeline { out, seed, config } => {
            let mut cfg: PipelineConfig = load_config(config.as_deref())?;
            cfg.seed = seed;
            let manifest = cmd_pipeline(&cfg, &out).map_err(CliError::Stage)?;
            if let Some(r) = &manifest.report {
                print!("{}", r.to_table());
            }
            println!("run manifest: {}", out.join("run_manifest.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
