use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use patchail::env::{load_demos, save_demos, EnvConfig, GoalMode, ENV_NAME};
use patchail::error::{Error, Result};
use patchail::explain::{self, HeatmapFormat};
use patchail::nets::ArchSpec;
use patchail::tensor::{gradcheck, Tensor};
use patchail::trainer::{self, config::TrainConfig, ReturnStats};

/// Overrides the output directory of `train` and `compare-sim` when no
/// `--out-dir` is given.
const OUT_DIR_ENV: &str = "PATCHAIL_OUT_DIR";

#[derive(Parser)]
#[command(name = "patchail", version, about = "Adversarial imitation from pixels with patch-level rewards")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted-expert demonstrations.
    GenDemos {
        /// Environment name (only `point_mass` exists).
        #[arg(long, default_value = ENV_NAME)]
        env: String,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output demo file.
        #[arg(long)]
        out: PathBuf,
        /// Take frame size, stack, episode length and goal from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train an agent from demonstrations.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint with deterministic actions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write attention and pixel-reward heatmaps for a trained run.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frames from the run's demonstrations or from a rollout of its policy.
        #[arg(long, value_enum, default_value_t = Input::Demo)]
        input: Input,
        #[arg(long, value_enum, default_value_t = Format::Ppm)]
        format: Format,
        /// Number of observation pairs to render.
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value = "explain")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train while logging raw and averaged-logit similarities side by side.
    CompareSim {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print patch grid size and receptive field of a conv stack.
    Geometry {
        /// Layers as `[(kernel,channels,stride,padding),...]`.
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 84)]
        input_size: usize,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Input {
    Demo,
    Rollout,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Pgm,
    Ppm,
}

impl From<Format> for HeatmapFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => HeatmapFormat::Csv,
            Format::Pgm => HeatmapFormat::Pgm,
            Format::Ppm => HeatmapFormat::Ppm,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>, set: &[String], out_dir: Option<PathBuf>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut config = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let pairs = set
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    config = config.apply(pairs)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(d) = out_dir.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from)) {
        config.out_dir = d;
    }
    config.validate()?;
    Ok(config)
}

fn print_stats(label: &str, s: &ReturnStats) {
    println!("{label}: mean {:.6} std {:.6} over {} episodes", s.mean, s.std, s.returns.len());
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenDemos {
            env,
            episodes,
            seed,
            out,
            config,
        } => {
            if env != ENV_NAME {
                return Err(Error::Config(format!("unknown environment `{env}` (available: {ENV_NAME})")));
            }
            let env_config = match config {
                Some(p) => TrainConfig::load(p)?.env_config(),
                None => EnvConfig {
                    goal: GoalMode::Random,
                    ..EnvConfig::default()
                },
            };
            let demos = trainer::generate_demos(&env_config, seed, episodes)?;
            save_demos(&demos, &out)?;
            println!("wrote {} trajectories to {}", demos.trajectories.len(), out.display());
            println!("expert mean return: {:?}", demos.meta.mean_return());
        }
        Command::Train {
            config,
            set,
            out_dir,
            seed,
        } => {
            let config = load_config(config.as_deref(), &set, out_dir, seed)?;
            let out = trainer::train(config)?;
            if let Some(last) = out.rows.last() {
                println!("final eval return at step {}: {:.6}", last.step, last.eval_return);
            }
            println!("run written to {}", out.out_dir.display());
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => {
            let stats = trainer::evaluate(&checkpoint, episodes, seed)?;
            print_stats("eval return", &stats);
        }
        Command::Explain {
            checkpoint,
            input,
            format,
            count,
            out_dir,
            seed,
        } => explain_command(&checkpoint, input, format.into(), count, &out_dir, seed)?,
        Command::CompareSim {
            config,
            set,
            out_dir,
            seed,
        } => {
            let config = load_config(config.as_deref(), &set, out_dir, seed)?;
            let out = trainer::compare_similarity(config)?;
            println!(
                "similarities written to {}",
                out.out_dir.join(trainer::SIMILARITY_FILE).display()
            );
        }
        Command::Geometry { arch, input_size } => {
            let spec = ArchSpec::fcn(ArchSpec::parse_layers(&arch)?);
            let g = spec.geometry((input_size, input_size))?;
            println!(
                "grid {}x{}, receptive field {}",
                g.grid.0, g.grid.1, g.receptive_field
            );
        }
        Command::Gradcheck { seed } => {
            let mut results = gradcheck::op_suite(seed)?;
            results.extend(patchail::discriminator::gradcheck_suite(seed)?);
            let mut failed = 0;
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{verdict:4} {:40} rel err {:.3e} (tol {:.0e})", r.name, r.max_rel_err, r.tol);
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Error::Insufficient(format!("{failed} gradient checks failed")));
            }
            println!("all {} gradient checks passed", results.len());
        }
    }
    Ok(())
}

fn explain_command(checkpoint: &Path, input: Input, format: HeatmapFormat, count: usize, out_dir: &Path, seed: u64) -> Result<()> {
    let run = trainer::load_run(checkpoint)?;
    let env = run.config.env_config();
    let pairs = match input {
        Input::Demo => {
            let demos = load_demos(&run.config.demo_path)?;
            let mut all = Vec::new();
            let mut shape = None;
            for t in &demos.trajectories {
                let ep_pairs = explain::trajectory_pairs(t)?;
                shape.get_or_insert_with(|| ep_pairs.shape().to_vec());
                all.push(ep_pairs);
            }
            let mut shape = shape.ok_or_else(|| Error::Insufficient("demo file is empty".into()))?;
            shape[0] = all.iter().map(|p| p.shape()[0]).sum();
            Tensor::new(shape, all.into_iter().flat_map(Tensor::into_data).collect())?
        }
        Input::Rollout => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            explain::collect_pairs(&env, seed, 1, |obs, _| {
                let a = run.agent.act(obs, u64::MAX, false, &mut rng)?;
                Ok([a[0], a[1]])
            })?
        }
    };
    let n = pairs.shape()[0];
    let picks: Vec<usize> = (0..count.min(n)).map(|i| i * n / count.min(n).max(1)).collect();
    let mut selected = Vec::new();
    for &i in &picks {
        selected.extend_from_slice(pairs.sample(i));
    }
    let mut shape = pairs.shape().to_vec();
    shape[0] = picks.len();
    let maps = explain::explain_pairs(&run.disc, &run.config.reward, &Tensor::new(shape, selected)?)?;
    std::fs::create_dir_all(out_dir)?;
    for (&i, (att, px)) in picks.iter().zip(&maps) {
        let ext = format.extension();
        explain::export_heatmap(att, out_dir.join(format!("pair{i:04}_attention.{ext}")), format)?;
        explain::export_heatmap(px, out_dir.join(format!("pair{i:04}_reward.{ext}")), format)?;
        println!("pair {i}: total reward {:.6}, mean pixel reward {:.6e}", px.sum(), px.mean());
    }
    println!("wrote {} heatmap pairs to {}", maps.len(), out_dir.display());
    Ok(())
}
