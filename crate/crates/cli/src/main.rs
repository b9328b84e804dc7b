//! `latent-bridge`: staged VAE, transfer and evaluation runs from the shell.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latent_bridge::config::{seeds, RunConfig};
use latent_bridge::dataio::DomainId;
use latent_bridge::pipeline::Workspace;
use latent_bridge::transfer::Direction;
use latent_bridge::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "latent-bridge",
    version,
    about = "Conditional transfer between two VAE latent spaces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config file of `key = value` lines; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for checkpoints and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Per-domain training images: 500, 1000, 2000 or full.
    #[arg(long, global = true)]
    train_size: Option<String>,

    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Drop the generator's distance regularizer.
    #[arg(long, global = true)]
    no_reg: bool,

    /// Number of shuffled conditional maps to train and average in `eval`.
    #[arg(long, global = true)]
    shuffles: Option<usize>,

    /// Suppress progress lines.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the VAE of one domain.
    TrainVae {
        #[arg(long)]
        domain: DomainId,
    },
    /// Train a generator/discriminator pair on the frozen VAEs.
    TrainTransfer {
        #[arg(long, default_value = "1to2")]
        direction: Direction,
    },
    /// Transfer test images of one source class and write them as a grid.
    Sample {
        #[arg(long)]
        class: u8,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value = "1to2")]
        direction: Direction,
    },
    /// Train the evaluation classifier for the target dataset.
    TrainClassifier,
    /// Classifier-judged transfer accuracy report.
    Eval {
        #[arg(long, default_value = "1to2")]
        direction: Direction,
    },
    /// Conditionals-over-outputs panels for every class pair.
    Grid {
        #[arg(long, default_value = "1to2")]
        direction: Direction,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Every stage in order.
    Run,
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    let mut set = |flag: &str, key: &str, v: String| {
        cfg.set(key, &v)
            .map_err(|m| Error::Usage(format!("--{flag}: {m}")))
    };
    if let Some(o) = &cli.out {
        set("out", "out_dir", o.display().to_string())?;
    }
    if let Some(t) = &cli.train_size {
        set("train-size", "train_size", t.clone())?;
    }
    if let Some(s) = cli.seed {
        set("seed", "seed", s.to_string())?;
    }
    if cli.no_reg {
        set("no-reg", "lambda_reg", "0".into())?;
    }
    if let Some(n) = cli.shuffles {
        set("shuffles", "shuffles", n.to_string())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    let quiet = cli.quiet;
    let mut log = |s: &str| {
        if !quiet {
            eprintln!("{s}");
        }
    };
    let mut ws = Workspace::new(cfg);
    match cli.command {
        Command::TrainVae { domain } => {
            let h = ws.train_vae(domain, &mut log)?;
            println!(
                "domain {domain}: held-out MSE {:.5} -> {:.5}",
                h.initial_mse().unwrap_or(f64::NAN),
                h.final_mse().unwrap_or(f64::NAN)
            );
        }
        Command::TrainTransfer { direction } => {
            let h = ws.train_transfer(direction, &mut log)?;
            println!(
                "transfer {direction}: {} steps, final d_loss {:.4} g_loss {:.4}",
                h.d_loss.len(),
                h.d_loss.last().copied().unwrap_or(f64::NAN),
                h.g_loss.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Sample {
            class,
            count,
            direction,
        } => {
            if count == 0 {
                return Err(Error::Usage("--count must be at least 1".into()));
            }
            let seed = ws.cfg.stage_seed(seeds::SAMPLE);
            let p = ws.sample(direction, class, count, seed)?;
            println!("{}", p.display());
        }
        Command::TrainClassifier => {
            let dataset = ws.cfg.target_dataset;
            let (_, acc) = ws.train_classifier(dataset, &mut log)?;
            println!("{} classifier test accuracy {acc:.4}", dataset.name());
        }
        Command::Eval { direction } => {
            let shuffles = ws.cfg.shuffles;
            let r = ws.eval(direction, shuffles, &mut log)?;
            println!("{}", r.to_kv());
        }
        Command::Grid { direction, count } => {
            if count == 0 {
                return Err(Error::Usage("--count must be at least 1".into()));
            }
            for p in ws.grid(direction, count)? {
                println!("{}", p.display());
            }
        }
        Command::Run => {
            let r = ws.run_all(&mut log)?;
            println!("{}", r.to_kv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
