//! Command-line driver: train, edit, interpolate, ablate, gradcheck, eval.
//!
//! Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or
//! configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use semod::config::{reference_toml, RunConfig};
use semod::error::{Error, Result};
use semod::gradcheck::{run_suite, GradcheckConfig, TRIALS};
use semod::runner::{self, format_gradcheck, parse_dims, sweep_seeds, worker_count};
use semod::{LossWeights, ModulationModel, Prompt, SynthWorld};

#[derive(Parser)]
#[command(name = "semod", version, about = "Text-conditioned latent editing on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, checkpoints and the world file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Edit held-out latents toward one prompt.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Loss weights are read from this configuration if given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out/edit")]
        out: PathBuf,
    },
    /// Blend the edits of one latent under two prompts.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        world: PathBuf,
        /// Give exactly twice: the λ = 0 prompt, then the λ = 1 prompt.
        #[arg(long, num_args = 1)]
        prompt: Vec<String>,
        #[arg(long, default_value_t = 11)]
        lambda_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out/interpolate")]
        out: PathBuf,
    },
    /// Train every ablation column over five seeds and summarize medians.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// First of the five sweep seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare every backward rule with central finite differences.
    Gradcheck {
        /// Instance size as LxD.
        #[arg(long, default_value = "3x4")]
        dims: String,
        #[arg(long, default_value_t = TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare a model's edits with the least-squares oracle.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        world: PathBuf,
        /// Repeatable; all prompts of the world if omitted.
        #[arg(long)]
        prompt: Vec<String>,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out/eval")]
        out: PathBuf,
    },
    /// Print the documented default configuration.
    Defaults,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::desk()), RunConfig::load)
}

fn load_weights(path: Option<&Path>) -> Result<LossWeights> {
    Ok(path.map(RunConfig::load).transpose()?.map_or_else(LossWeights::default, |c| c.loss))
}

fn load_pair(checkpoint: &Path, world: &Path) -> Result<(ModulationModel, SynthWorld)> {
    let model = ModulationModel::load(checkpoint)?;
    let world = SynthWorld::load(world)?;
    let (s, w) = (model.config(), world.config());
    if (s.layers, s.channels, s.embed) != (w.layers, w.channels, w.embed) {
        return Err(Error::Config("checkpoint and world dimensions differ".into()));
    }
    Ok((model, world))
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Train { config, out, seed } => {
            let mut c = load_config(config.as_deref())?;
            if let Some(s) = seed {
                c = c.with_seed(s);
            }
            let out = out.unwrap_or_else(|| PathBuf::from(&c.output.dir));
            let t0 = Instant::now();
            let history = runner::run_train(&c, &out)?;
            if let (Some(first), Some(last)) = (history.first(), history.last()) {
                println!(
                    "trained {} iterations in {:.1?}: total {:.5} -> {:.5}",
                    history.len(),
                    t0.elapsed(),
                    first.loss.total,
                    last.loss.total
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Edit { checkpoint, world, prompt, samples, seed, config, out } => {
            let weights = load_weights(config.as_deref())?;
            let prompt = Prompt::parse(&prompt)?;
            let (model, world) = load_pair(&checkpoint, &world)?;
            let s = runner::run_edit(&model, &world, &weights, prompt, samples, seed, &out)?;
            println!("{prompt}: text loss improved on {}/{} samples", s.improved, s.samples);
        }
        Command::Interpolate { checkpoint, world, prompt, lambda_steps, seed, out } => {
            let [a, b] = prompt.as_slice() else {
                return Err(Error::Config("interpolate needs --prompt exactly twice".into()));
            };
            let (a, b) = (Prompt::parse(a)?, Prompt::parse(b)?);
            let (model, world) = load_pair(&checkpoint, &world)?;
            let rows = runner::run_interpolate(&model, &world, a, b, lambda_steps, seed, &out)?;
            for r in &rows {
                println!("lambda {:.4}  readout {a} {:+.5}  readout {b} {:+.5}", r.lambda, r.readout_a, r.readout_b);
            }
        }
        Command::Ablate { config, out, seed } => {
            let c = load_config(config.as_deref())?;
            let out = out.unwrap_or_else(|| PathBuf::from(&c.output.dir).join("ablation"));
            let seeds = sweep_seeds(seed.unwrap_or(c.seed));
            let table = runner::run_ablation(&c, &seeds, worker_count())?;
            table.write(&out)?;
            for col in &table.columns {
                println!("{:<8} median total {:.5}", col.name, table.median(&col.name, "total").expect("column"));
            }
            println!("wrote {}", out.display());
        }
        Command::Gradcheck { dims, trials, seed } => {
            let (layers, channels) = parse_dims(&dims)?;
            let t0 = Instant::now();
            let report = run_suite(&GradcheckConfig { layers, channels, trials, seed, fault: None })?;
            print!("{}", format_gradcheck(&report));
            println!("{} failures in {:.1?}", report.failures(), t0.elapsed());
            return Ok(report.passed());
        }
        Command::Eval { checkpoint, world, prompt, samples, seed, config, out } => {
            let weights = load_weights(config.as_deref())?;
            let (model, world) = load_pair(&checkpoint, &world)?;
            let prompts = if prompt.is_empty() {
                Prompt::all(world.attributes().len())
            } else {
                prompt.iter().map(|p| Prompt::parse(p)).collect::<Result<_>>()?
            };
            let report = runner::run_eval(&model, &world, &weights, &prompts, samples, seed, &out)?;
            for a in &report.attributes {
                println!(
                    "attr{}: host {} argmax {:?} text gap {:+.4}",
                    a.attribute,
                    a.host_layer,
                    a.argmax_layer(),
                    a.text_gap()
                );
            }
            println!(
                "recovered {}/{}; mean total {:.5}",
                report.recovered_count(),
                report.attributes.len(),
                report.overall.total
            );
        }
        Command::Defaults => print!("{}", reference_toml()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(runner::exit_code(&e))
        }
    }
}
