//! `sharpmaml` command-line runner.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sharpmaml::config::RunConfig;
use sharpmaml::{par, runner, Error};

#[derive(Parser)]
#[command(name = "sharpmaml", version, about = "Sharpness-aware MAML experiments and verification instruments")]
struct Cli {
    /// Run configuration (`key = value` lines); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Extra `key=value` assignments applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train and write trace.csv, eval.csv, checkpoint.bin, summary.json.
    Train {
        /// Continue from out_dir/checkpoint.bin.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on training and held-out tasks.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write 2-D loss sections around a checkpoint.
    Landscape {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Measure worst-case loss increase over growing radii.
    Sharpness {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate the PAC-Bayes bound over a radius grid.
    BoundSweep {
        /// Measure the parameter norm and empirical term from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Check that stationary points and minimizers carry over to the adapted loss.
    LemmaCheck,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Train { resume } => {
            let s = runner::run_train(&cfg, *resume)?;
            println!(
                "trained {} iterations: meta_loss {:.6e}, running avg |grad F|^2 {:.6e}",
                s.iterations, s.final_meta_loss, s.final_running_avg
            );
            if let Some(g) = s.last_eval {
                println!("held-out post-adapt metric {:.6e}, gap {:.6e}", g.test_post, g.gap);
            }
        }
        Command::Eval { checkpoint } => {
            let g = runner::run_eval(&cfg, checkpoint.as_deref())?;
            println!("train post-adapt {:.6e}, test post-adapt {:.6e}, gap {:.6e}", g.train_post, g.test_post, g.gap);
        }
        Command::Landscape { checkpoint } => {
            for p in runner::run_landscape(&cfg, checkpoint.as_deref())? {
                println!("wrote {}", p.display());
            }
        }
        Command::Sharpness { checkpoint } => {
            for r in runner::run_sharpness(&cfg, checkpoint.as_deref())? {
                println!("alpha {:e}: sharpness {:.6e}", r.alpha, r.sharpness);
            }
        }
        Command::BoundSweep { checkpoint } => {
            let r = runner::run_bound(&cfg, checkpoint.as_deref())?;
            let best = &r.rows[r.argmin];
            println!("best alpha {:e} with bound {:.6e}", best.alpha, best.bound);
            match r.claim_holds() {
                Some(ok) => println!("smaller bound at a larger radius for every alpha below {:e}: {ok}", r.threshold),
                None => println!("no radius in the grid lies below {:e}", r.threshold),
            }
        }
        Command::LemmaCheck => {
            let r = runner::run_lemma_check(&cfg)?;
            println!("lemma check: {:?} ({} probes)", r.status, r.probes.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match par::with_threads(cli.threads, || run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
