use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use crnoma::harness::{
    compare_report, config_reference, instance_seed, run_sweep, solve_scheme, ExperimentConfig,
    Scheme,
};
use crnoma::instance::{random_instance, ProblemInstance};
use crnoma::{Error, Result};

/// Subcarrier assignment and power allocation for cognitive radio NOMA.
#[derive(Parser)]
#[command(name = "crnoma", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set topology.num_pu=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one instance and print it (or write it with --out).
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Realization index; the seed comes from sweep.master_seed.
        #[arg(long, default_value_t = 0)]
        realization: usize,
        /// Explicit instance seed, overriding --realization.
        #[arg(long)]
        seed: Option<u64>,
        /// Sweep point whose axis value is applied.
        #[arg(long, default_value_t = 0)]
        point: usize,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Solve an instance file with one scheme.
    Solve {
        instance: PathBuf,
        /// optimal, sca, baseline1, baseline2 or oracle.
        #[arg(long, short, default_value = "sca")]
        scheme: Scheme,
        #[command(flatten)]
        config: ConfigArgs,
        /// Seed of the random baseline.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Policy output file.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Iteration trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a sweep and write CSVs to output.dir.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Tabulate summary.csv files of sweeps over the same axis.
    Compare {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
    },
}

/// File text followed by `--set` overrides; a key set both ways keeps the
/// override.
fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let base = match &args.config {
        Some(p) => {
            fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => String::new(),
    };
    let mut overrides = Vec::new();
    for s in &args.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {s}: expected KEY=VALUE")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut text: String = base
        .lines()
        .filter(|l| {
            let key = l
                .split('#')
                .next()
                .unwrap_or("")
                .split('=')
                .next()
                .unwrap_or("")
                .trim();
            !overrides.iter().any(|(k, _)| k == key)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    for (k, v) in &overrides {
        text.push_str(&format!("{k} = {v}\n"));
    }
    let cfg = ExperimentConfig::from_text(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate {
            config,
            realization,
            seed,
            point,
            out,
        } => {
            let cfg = load_config(&config)?;
            if point >= cfg.axis.len() {
                return Err(Error::Config(format!(
                    "--point {point}: sweep has {} points",
                    cfg.axis.len()
                )));
            }
            let (topology, overrides) = cfg.point(point);
            let seed = seed.unwrap_or_else(|| instance_seed(cfg.master_seed, realization));
            let inst = random_instance(&topology, seed, &overrides)?;
            write_or_print(out.as_deref(), &inst.to_text())?;
        }
        Command::Solve {
            instance,
            scheme,
            config,
            seed,
            out,
            trace,
        } => {
            let cfg = load_config(&config)?;
            let text = fs::read_to_string(&instance)?;
            let inst = ProblemInstance::from_text(&text)?;
            let run = solve_scheme(scheme, &inst, &cfg.solvers, seed, None)?;
            if let Some(p) = &trace {
                write_or_print(Some(p), &run.result.trace.to_csv())?;
            }
            println!("scheme = {scheme}");
            println!("status = {}", run.result.status);
            println!("iterations = {}", run.result.iterations);
            println!("seconds = {:.3}", run.seconds);
            let Some(rep) = &run.report else {
                eprintln!("no feasible policy found");
                return Ok(ExitCode::from(2));
            };
            println!("weighted_throughput = {:.6}", rep.weighted_total);
            if let Some(ub) = run.result.upper_bound {
                println!("upper_bound = {ub:.6}");
            }
            if run.error_bound > 0.0 {
                println!("error_bound = {:.6}", run.error_bound);
            }
            println!("avg_pu = {:.6}", rep.average_pu_throughput());
            println!("avg_su = {:.6}", rep.average_su_throughput());
            println!("avg_user = {:.6}", rep.average_user_throughput());
            for (k, r) in rep.pu_rate.iter().enumerate() {
                println!("pu.{k} = {r:.6}");
            }
            for (j, r) in rep.su_rate.iter().enumerate() {
                println!("su.{j} = {r:.6}");
            }
            let policy = run.result.policy.to_text();
            match &out {
                Some(p) => write_or_print(Some(p), &policy)?,
                None => print!("\n{policy}"),
            }
        }
        Command::Sweep { config } => {
            let cfg = load_config(&config)?;
            let out = run_sweep(&cfg, true)?;
            eprintln!(
                "{} rows, {} records written to {}",
                out.rows.len(),
                out.records.len(),
                cfg.output_dir.display()
            );
        }
        Command::Compare { summaries } => print!("{}", compare_report(&summaries)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let help = format!("Config keys (defaults shown):\n{}", config_reference());
    let mut cmd = Cli::command().after_long_help(help.clone());
    for name in ["generate", "solve", "sweep"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_long_help(help.clone()));
    }
    let matches = cmd.get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Validation(_) => 3,
                Error::Config(_) => 4,
                _ => 1,
            })
        }
    }
}
