use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nearfield_stt::experiment::{load_config, run_experiment, summarize, ExperimentId};
use nearfield_stt::Error;

#[derive(Parser)]
#[command(name = "stt", version, about = "Near-field sense-then-train beam training simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        experiment: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a finished run into summary.csv.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Run { config, experiment, seed, trials, out } => {
            let mut spec = load_config(&config)?;
            if let Some(e) = experiment {
                spec.experiment = ExperimentId::parse(&e)?;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(t) = trials {
                spec.trials = t;
            }
            if out.is_some() {
                spec.out = out;
            }
            spec.validate()?;
            let dir = spec
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("runs").join(spec.experiment.as_str()));
            let m = run_experiment(&spec, &dir)?;
            eprintln!(
                "{}: {} trial(s) in {:.1} s, {} failure(s), output in {}",
                m.experiment,
                m.trial_seeds.len(),
                m.wall_clock_seconds,
                m.failures.len(),
                dir.display()
            );
            for f in &m.failures {
                eprintln!("  failed: {f}");
            }
        }
        Cmd::Summarize { input } => {
            let rows = summarize(&input)?;
            println!("file,key,metric,n,mean,stderr");
            for r in rows {
                println!("{},{},{},{},{},{}", r.file, r.key, r.metric, r.n, r.mean, r.stderr);
            }
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
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
