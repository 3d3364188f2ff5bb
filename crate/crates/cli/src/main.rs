use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mrflow::harness::{emit_report, read_profile_csv, run_simulation, scaling_plan, RunConfig};
use mrflow::profiling::Region;
use mrflow::Error;

#[derive(Parser)]
#[command(name = "mrflow", version, about = "Multirate reactive-flow solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and print its profile summary.
    Run {
        /// TOML run configuration; defaults are used for missing sections.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Worker count.
        #[arg(long, env = "MRFLOW_TASKS")]
        tasks: Option<usize>,
        /// Disable fused vector kernels and batched reductions.
        #[arg(long)]
        unfused: bool,
        /// Take mesh and step sizes from row n of the weak-scaling plan.
        #[arg(long, value_name = "n")]
        plan: Option<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        snapshot: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print one row of the weak-scaling plan.
    Plan {
        #[arg(long)]
        n: usize,
    },
    /// Combine profile CSVs into a scaling table and a plot script.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Where to write the table; stdout when absent.
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_script: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Fatal { .. } | Error::Evolution { .. } | Error::NonConvergence(_) | Error::SingularBlock { .. } => 3,
        Error::Io(_) => 4,
        _ => 1,
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Run {
            config,
            tasks,
            unfused,
            plan,
            csv,
            snapshot,
            seed,
        } => {
            let mut cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            if let Some(n) = plan {
                cfg.apply_plan(&scaling_plan(n)?);
            }
            if let Some(t) = tasks {
                cfg.tasks = t;
            }
            if unfused {
                cfg.set_unfused();
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if csv.is_some() {
                cfg.output.csv = csv;
            }
            if snapshot.is_some() {
                cfg.output.snapshot = snapshot;
            }
            let out = run_simulation(&cfg)?;
            println!(
                "tasks {} mode {} mesh {}x{}x{} slow steps {} (transient {}, fixed {})",
                cfg.tasks,
                out.mode,
                cfg.mesh.cells[0],
                cfg.mesh.cells[1],
                cfg.mesh.cells[2],
                out.stats.slow_steps(),
                out.stats.transient.slow_steps,
                out.stats.fixed.slow_steps
            );
            println!("global reductions {}", out.reductions);
            for r in Region::ALL {
                let s = out.profile.get(r);
                println!(
                    "({}) {:<10} {:.6e} {:.6e} {:.6e}",
                    r.letter(),
                    r.label(),
                    s.min,
                    s.mean,
                    s.max
                );
            }
            Ok(())
        }
        Command::Plan { n } => {
            println!("{}", scaling_plan(n)?.display());
            Ok(())
        }
        Command::Report {
            inputs,
            out_csv,
            out_script,
        } => {
            let mut profiles = Vec::new();
            for path in &inputs {
                let text = std::fs::read_to_string(path)?;
                profiles.extend(read_profile_csv(&text)?);
            }
            let report = emit_report(&profiles)?;
            match out_csv {
                Some(p) => std::fs::write(p, &report.csv)?,
                None => print!("{}", report.csv),
            }
            if let Some(p) = out_script {
                std::fs::write(p, &report.script)?;
            }
            for (mode, series) in &report.efficiency {
                for (tasks, eff) in series {
                    eprintln!("{mode} tasks {tasks} efficiency {eff:.3}");
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mrflow: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
