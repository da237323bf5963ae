use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddt_core::datasets::{generate_domain_pair, ShiftPreset};
use ddt_harness::ablate::{ablate, AblationParam};
use ddt_harness::analysis::{analyze_errors, eval, load_detector, load_labeled};
use ddt_harness::config::{init_threads, load_spec, resolve_output};
use ddt_harness::run::write_json;
use ddt_harness::{Experiment, ExperimentConfig, HarnessError, Result, TrainMode};

#[derive(Parser)]
#[command(name = "ddt", version, about = "Diffusion-teacher domain adaptation experiments")]
struct Cli {
    /// Also write the error record here on failure.
    #[arg(long, global = true)]
    error_json: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a source/target dataset pair from a spec file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the denoiser on the unlabeled training images.
    PretrainDiffusion {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the configured denoiser path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// baseline, diffusion_teacher, ddt or ablation:<teacher mode>.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "ddt")]
        mode: String,
        /// Checkpoint and exit once this step is reached.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// mAP@0.5 of a detector checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Needed for diffusion-backbone checkpoints.
        #[arg(long)]
        denoiser: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        score_floor: f64,
    },
    /// Sweep one setting of the self-training stage.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// lambda, sigma, steps, augmentation or teacher.
        #[arg(long)]
        param: String,
        /// Comma-separated; defaults to the standard grid of `param`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Error taxonomy, confusion matrix and PR curves of a checkpoint.
    AnalyzeErrors {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        denoiser: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        score_floor: f64,
    },
    /// Print the desk-scale configuration for a shift preset.
    DeskConfig {
        #[arg(long, default_value = "default")]
        preset: String,
    },
}

fn preset(name: &str) -> Result<ShiftPreset> {
    ShiftPreset::ALL
        .into_iter()
        .find(|p| p.name() == name)
        .ok_or_else(|| {
            let names: Vec<&str> = ShiftPreset::ALL.iter().map(|p| p.name()).collect();
            HarnessError::Config(format!("unknown preset {name:?}; expected one of {}", names.join(", ")))
        })
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { spec, out, seed } => {
            let mut spec = load_spec(&spec)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let out = resolve_output(&out);
            let pair = generate_domain_pair(&spec)?;
            pair.save(&out)?;
            write_json(&out.join("spec.json"), &spec)?;
            for (name, set) in pair.splits() {
                println!("{name}: {} images, {} boxes", set.len(), set.dataset.total_boxes());
            }
        }
        Command::PretrainDiffusion { config, out } => {
            let exp = Experiment::open(ExperimentConfig::load(&config)?)?;
            let data = exp.data()?;
            let out = out.map(|p| resolve_output(&p)).unwrap_or_else(|| exp.denoiser_path());
            let curve = exp.pretrain(&data, &out)?;
            println!("denoiser written to {} (final loss {:.4})", out.display(), curve.last().copied().unwrap_or(f64::NAN));
        }
        Command::Train { config, mode, stop_after } => {
            let mode: TrainMode = mode.parse()?;
            let mut exp = Experiment::open(ExperimentConfig::load(&config)?)?;
            exp.stop_after = stop_after;
            let s = exp.train(mode)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Eval { ckpt, dataset, out, denoiser, score_floor } => {
            let det = load_detector(&ckpt, denoiser.as_deref())?;
            let set = load_labeled(&dataset)?;
            let r = eval(&det, &set, score_floor, &out)?;
            println!("mAP@0.5 {:.4}", r.map);
        }
        Command::Ablate { config, param, values } => {
            let param: AblationParam = param.parse()?;
            let values = if values.is_empty() { param.default_values() } else { values };
            let exp = Experiment::open(ExperimentConfig::load(&config)?)?;
            for r in ablate(&exp, param, &values)? {
                println!("{}={} target mAP {:.4}", r.param, r.value, r.target_map);
            }
        }
        Command::AnalyzeErrors { ckpt, dataset, out, denoiser, score_floor } => {
            let det = load_detector(&ckpt, denoiser.as_deref())?;
            let set = load_labeled(&dataset)?;
            let a = analyze_errors(&det, &set, score_floor, &out)?;
            println!("{}", serde_json::to_string_pretty(&a.report.taxonomy)?);
        }
        Command::DeskConfig { preset: p } => {
            print!("{}", ExperimentConfig::desk(preset(&p)?).to_toml()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ HarnessError::Stopped { .. }) => {
            eprintln!("{e}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = serde_json::to_string(&e.record()).unwrap_or_else(|_| format!("{{\"message\":{:?}}}", e.to_string()));
            eprintln!("{record}");
            if let Some(p) = cli.error_json {
                let _ = std::fs::write(p, &record);
            }
            match e {
                HarnessError::UnknownKeys { .. } | HarnessError::Config(_) | HarnessError::Missing(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
