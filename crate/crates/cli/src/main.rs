use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use hypersep::checkpoint::load_checkpoint;
use hypersep::config::{RunConfig, SharingMode};
use hypersep::dataset::{ingest_folder, write_toy_dataset, SourceSet, ToySpec};
use hypersep::evaluation::{evaluate, separate_file, OutputRate};
use hypersep::generator::param_count_report;
use hypersep::training::{resume, run_ablation_suite, train, TrainOptions};
use hypersep::Error;

#[derive(Parser)]
#[command(name = "hypersep", version, about = "Multi-stage music source separation with generated masking networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Baseline,
    SharedTcn,
    Meta,
}

impl From<Mode> for SharingMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Baseline => SharingMode::Baseline,
            Mode::SharedTcn => SharingMode::SharedTcn,
            Mode::Meta => SharingMode::Meta,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Rate {
    Native,
    Input,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-instrument dataset.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        tracks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TOML toy spec (the `[toy]` block of a run config, without the header).
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from `--out` if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Train every ablation row and print the comparison table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Per-row checkpoints; reruns resume from them.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
    /// Split a WAV file into one file per instrument.
    Separate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Rate::Native)]
        rate: Rate,
        #[arg(long, default_value_t = 8.0)]
        segment: f64,
    },
    /// Score a checkpoint on a dataset folder.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-track JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 8.0)]
        segment: f64,
    },
    /// Print parameter counts for a configuration.
    ReportParams {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// A failure with its exit code: 2 for usage, configuration or input
/// problems, 1 for everything that goes wrong at run time.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_)
            | Error::Invalid(_)
            | Error::UnknownInstrument(_)
            | Error::Dataset(_)
            | Error::Version { .. }
            | Error::Corrupt(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: String) -> Failure {
    Failure { code: 2, message }
}

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => {
            require(p, "config file")?;
            Ok(RunConfig::load(p)?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn override_with<T: PartialEq + std::fmt::Debug>(field: &str, slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        if *slot != v {
            info!("--{field} {v:?} overrides the configured {slot:?}");
        }
        *slot = v;
    }
}

/// Training and validation tracks from the flag or the config.
fn load_data(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<(Vec<SourceSet>, Vec<SourceSet>), Failure> {
    let mut dir = cfg.data.train.clone();
    override_with("data", &mut dir, flag.map(Some));
    let dir = dir.ok_or_else(|| usage("no training data: pass --data or set data.train".into()))?;
    require(&dir, "data directory")?;
    let mut tracks = ingest_folder(&dir, &cfg.model.instruments)?.tracks;
    let validation = match &cfg.data.validation {
        Some(v) => {
            require(v, "validation directory")?;
            ingest_folder(v, &cfg.model.instruments)?.tracks
        }
        None if cfg.data.validation_tracks > 0 && tracks.len() > cfg.data.validation_tracks => {
            tracks.split_off(tracks.len() - cfg.data.validation_tracks)
        }
        None => Vec::new(),
    };
    info!("{} training and {} validation tracks", tracks.len(), validation.len());
    Ok((tracks, validation))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure {
            code: 1,
            message: format!("{}: {e}", dir.display()),
        })?;
    }
    std::fs::write(path, text).map_err(|e| Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::SynthData { out, tracks, seed, spec } => {
            let spec = match spec {
                Some(p) => {
                    require(&p, "toy spec")?;
                    let text = std::fs::read_to_string(&p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                    ToySpec::from_toml(&text)?
                }
                None => ToySpec::default(),
            };
            let dirs = write_toy_dataset(&out, tracks, seed, &spec)?;
            println!("wrote {} tracks to {}", dirs.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            mode,
            steps,
            seed,
            resume: cont,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            override_with("mode", &mut cfg.model.sharing, mode.map(SharingMode::from));
            override_with("steps", &mut cfg.train.max_steps, steps);
            override_with("seed", &mut cfg.model.seed, seed);
            override_with("out", &mut cfg.output.checkpoint, out.map(Some));
            cfg.validate()?;
            let ckpt = cfg
                .output
                .checkpoint
                .clone()
                .ok_or_else(|| usage("no checkpoint path: pass --out or set output.checkpoint".into()))?;
            let (tracks, validation) = load_data(&cfg, data)?;
            let opts = TrainOptions {
                log: Some(cfg.output.log.clone().unwrap_or_else(|| ckpt.with_extension("jsonl"))),
                checkpoint: Some(ckpt.clone()),
                ..TrainOptions::default()
            };
            let outcome = if cont && ckpt.exists() {
                info!("resuming from {}", ckpt.display());
                resume(&ckpt, Some(cfg.train.max_steps), &tracks, &validation, &opts)?
            } else {
                train(cfg.model, cfg.train, &tracks, &validation, &opts)?
            };
            let meta = &outcome.checkpoint.meta;
            match meta.best_validation {
                Some(v) => println!(
                    "trained {} steps; best validation SI-SNR {v:.3} dB at step {}",
                    meta.step,
                    meta.best_step.unwrap_or(0)
                ),
                None => println!("trained {} steps", meta.step),
            }
        }
        Command::Ablate {
            config,
            data,
            out,
            steps,
            work_dir,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            override_with("steps", &mut cfg.train.max_steps, steps);
            override_with("out", &mut cfg.output.table, out.map(Some));
            override_with("work-dir", &mut cfg.output.work_dir, work_dir.map(Some));
            cfg.validate()?;
            let work = cfg.output.work_dir.clone().or_else(|| {
                cfg.output.table.as_ref().map(|t| {
                    let stem = t.file_stem().and_then(|s| s.to_str()).unwrap_or("ablation");
                    t.with_file_name(format!("{stem}_runs"))
                })
            });
            let (tracks, validation) = load_data(&cfg, data)?;
            let table = run_ablation_suite(&cfg.model, &cfg.train, &tracks, &validation, work.as_deref())?;
            let text = table.render();
            if let Some(p) = &cfg.output.table {
                write_text(p, &text)?;
            }
            print!("{text}");
        }
        Command::Separate {
            ckpt,
            input,
            out,
            rate,
            segment,
        } => {
            require(&ckpt, "checkpoint")?;
            require(&input, "input file")?;
            let model = load_checkpoint(&ckpt)?.model()?;
            let rate = match rate {
                Rate::Native => OutputRate::Native,
                Rate::Input => OutputRate::Input,
            };
            for p in separate_file(&model, &input, &out, rate, segment)? {
                println!("{}", p.display());
            }
        }
        Command::Evaluate { ckpt, data, out, segment } => {
            require(&ckpt, "checkpoint")?;
            require(&data, "data directory")?;
            let model = load_checkpoint(&ckpt)?.model()?;
            let tracks = ingest_folder(&data, model.instruments())?.tracks;
            let report = evaluate(&model, &tracks, &data.display().to_string(), segment)?;
            if let Some(p) = &out {
                write_text(p, &report.json_lines())?;
            }
            print!("{}", report.render());
        }
        Command::ReportParams { config } => {
            let cfg = load_config(config.as_deref())?;
            let r = param_count_report(&cfg.model);
            if cfg.model.sharing != SharingMode::Meta {
                warn!("configuration is not in meta mode; generator counts are hypothetical");
            }
            let m = &r.masking;
            println!("instruments                 {}", r.instruments);
            println!("stages                      {}", r.stages);
            println!("encoder                     {}", r.encoder);
            println!("decoder                     {}", r.decoder);
            println!("bridge                      {}", r.bridge);
            println!("masking per instrument      {}", m.per_instrument);
            println!("masking, baseline storage   {}", m.baseline_total);
            println!("generator + embeddings      {}", m.generator_storage);
            println!("baseline / meta masking     {:.1}", m.ratio);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
