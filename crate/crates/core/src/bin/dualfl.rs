use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dualfl::harness::config::Mode;
use dualfl::harness::{emit_trace, execute, Outcome, RunConfig};
use dualfl::Error;

/// DualFL federated optimization simulator.
#[derive(Parser, Debug)]
#[command(name = "dualfl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run DualFL (or the dual FISTA loop with `mode = dual_fista`).
    Run(Common),
    /// Run DualFL and dual FISTA side by side and compare their dual iterates.
    VerifyDuality(Common),
    /// Run DualFL once per entry of `sweep.rhos`.
    SweepRho(Common),
    /// Run DualFL on the l2-regularized problem.
    RegularizedRun(Common),
    /// Run gradient descent or FedAvg.
    Baseline(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Trace output path; multi-run modes append a tag to the file stem.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, value_name = "N")]
    rounds: Option<usize>,
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

fn tagged(path: &Path, tag: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_{tag}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{tag}"),
    };
    path.with_file_name(name)
}

fn load(common: &Common, mode: Option<(Mode, &str)>) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::from_text("")?,
    };
    match mode {
        Some((m, name)) => cfg.set_mode(m, name),
        None => {
            if !matches!(cfg.mode, Mode::DualFl | Mode::DualFista) {
                return Err(Error::Config(
                    "`run` accepts mode = dualfl or dual_fista; use the matching subcommand otherwise".into(),
                ));
            }
        }
    }
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    if let Some(r) = common.rounds {
        cfg.set_rounds(r);
    }
    if let Some(t) = common.threads {
        cfg.set_threads(t);
    }
    Ok(cfg)
}

fn write(outcome: &Outcome, out: Option<&Path>) -> Result<(), Error> {
    let stdout = io::stdout();
    let mut stdout = stdout.lock();
    let printed = match out {
        Some(path) => {
            for (tag, trace) in &outcome.traces {
                let p = match tag {
                    Some(t) if outcome.traces.len() > 1 => tagged(path, t),
                    _ => path.to_path_buf(),
                };
                emit_trace(trace, &p)?;
            }
            outcome
                .summary
                .iter()
                .try_for_each(|line| writeln!(stdout, "{line}"))
        }
        None => {
            let r = outcome
                .traces
                .iter()
                .try_for_each(|(_, trace)| stdout.write_all(trace.render().as_bytes()));
            for line in &outcome.summary {
                eprintln!("{line}");
            }
            r
        }
    };
    match printed.and_then(|_| stdout.flush()) {
        // A reader that stops early (`| head`) is not an error.
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, mode) = match &cli.command {
        Command::Run(c) => (c, None),
        Command::VerifyDuality(c) => (c, Some((Mode::VerifyDuality, "verify_duality"))),
        Command::SweepRho(c) => (c, Some((Mode::SweepRho, "sweep_rho"))),
        Command::RegularizedRun(c) => (c, Some((Mode::Regularized, "regularized"))),
        Command::Baseline(c) => (c, Some((Mode::Baseline, "baseline"))),
    };
    let result = load(common, mode)
        .and_then(|cfg| execute(&cfg))
        .and_then(|o| write(&o, common.out.as_deref()).map(|_| o));
    match result {
        Ok(o) if o.success => ExitCode::SUCCESS,
        Ok(_) => {
            eprintln!("dualfl: convergence target not met");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("dualfl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
