mod config;
mod pgm;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::parse_override;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// MR-to-CT synthesis with an adversarially trained auto-context cascade.
#[derive(Debug, Parser)]
#[command(name = "ctsynth", version)]
struct Cli {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    set: Vec<(String, String)>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a paired phantom dataset.
    Phantom {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (config key `data_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_subjects: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a cascade on the training split of a dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory (config key `data_dir`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory (config key `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many iterations in this process.
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
        /// Poison stage K before training: `nan-stage=K`.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Synthesize a CT estimate from an MR volume.
    Infer {
        /// Cascade directory written by `train`.
        #[arg(long)]
        cascade: PathBuf,
        #[arg(long)]
        mr: PathBuf,
        /// Estimate output (VOL3).
        #[arg(long)]
        out: PathBuf,
        /// Coverage mask output (default: `<out>.mask.vol3`).
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Write mid-axial PGM slices into this directory.
        #[arg(long)]
        slices: Option<PathBuf>,
        /// Ground truth, for the slice export.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// MAE and PSNR of estimates against ground truth.
    Eval {
        #[arg(long, required = true)]
        estimate: Vec<PathBuf>,
        #[arg(long, required = true)]
        truth: Vec<PathBuf>,
        #[arg(long, required = true)]
        mask: Vec<PathBuf>,
        /// Row labels (default: estimate file stems).
        #[arg(long)]
        subject: Vec<String>,
        /// Write the CSV report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of every backward rule at 64-bit.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one backward rule (checker self-test).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(run::EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = run::set_threads(cli.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(run::exit_code(&e));
    }
    let res = match cli.cmd {
        Cmd::Phantom { cfg, out, n_subjects, seed } => {
            let mut o = cfg.set;
            push(&mut o, "data_dir", out.map(|p| p.display().to_string()));
            push(&mut o, "n_subjects", n_subjects);
            push(&mut o, "seed", seed);
            run::phantom(cfg.config.as_deref(), &o)
        }
        Cmd::Train { cfg, data, out, iterations, seed, resume, stop_after, inject_fault } => {
            let mut o = cfg.set;
            push(&mut o, "data_dir", data.map(|p| p.display().to_string()));
            push(&mut o, "out_dir", out.map(|p| p.display().to_string()));
            push(&mut o, "iterations", iterations);
            push(&mut o, "seed", seed);
            let opts = run::TrainOpts { resume, stop_after, fault: inject_fault };
            run::train(cfg.config.as_deref(), &o, &opts)
        }
        Cmd::Infer { cascade, mr, out, mask, slices, truth } => {
            run::infer(&cascade, &mr, &out, mask.as_deref(), slices.as_deref(), truth.as_deref())
        }
        Cmd::Eval { estimate, truth, mask, subject, report } => run::eval(&estimate, &truth, &mask, &subject, report.as_deref()),
        Cmd::Gradcheck { seed, inject_fault } => run::gradcheck(seed, inject_fault.as_deref()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(run::exit_code(&e))
        }
    }
}

fn push(o: &mut Vec<(String, String)>, key: &str, v: Option<impl ToString>) {
    if let Some(v) = v {
        o.push((key.to_string(), v.to_string()));
    }
}
