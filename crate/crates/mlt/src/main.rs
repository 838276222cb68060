use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mlt::corpus::generate_corpus;
use mlt::error::Result;
use mlt::flops::{forward_flops, train_step_flops, CostModel};
use mlt::harness::aggregate::{aggregate, read_summary_csv, write_summary_csv};
use mlt::harness::compare::{compare, render_text};
use mlt::harness::{run, RunConfig, RunMode};

#[derive(Parser)]
#[command(name = "mlt", about = "Multilevel training of small GPT-style decoders", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for compute kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics, config and a checkpoint.
    Train {
        /// Flat key-value config file; defaults apply for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// single | multilevel
        #[arg(long)]
        mode: Option<String>,
        /// Output directory for metrics.jsonl, config.txt, model.ckpt.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Additional overrides as key=value (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Aggregate runs that differ only by seed into a CSV summary.
    Aggregate {
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a baseline summary against a multilevel summary.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        multilevel: PathBuf,
        /// JSON report path; a text digest goes to stdout.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the 64-bit finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20260810)]
        seed: u64,
    },
    /// Print the FLOP cost table for a config.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Generate the deterministic synthetic corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4 * 1024 * 1024)]
        bytes: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn load_config(
    config: Option<PathBuf>,
    seed: Option<u64>,
    mode: Option<String>,
    out: Option<PathBuf>,
    sets: &[String],
) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(path) = config {
        rc.apply_file(&path)?;
    }
    for kv in sets {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            mlt::Error::Config(format!("--set expects key=value, got '{kv}'"))
        })?;
        rc.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = seed {
        rc.seed = seed;
    }
    if let Some(mode) = mode {
        rc.mode = RunMode::parse(&mode)?;
    }
    if let Some(out) = out {
        rc.out_dir = out;
    }
    Ok(rc)
}

fn main_inner(cli: Cli) -> Result<bool> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }
    match cli.command {
        Command::Train {
            config,
            seed,
            mode,
            out,
            sets,
        } => {
            let rc = load_config(config, seed, mode, out, &sets)?;
            eprintln!(
                "training mode={} seed={} steps={} out={}",
                rc.mode.name(),
                rc.seed,
                rc.total_fine_steps,
                rc.out_dir.display()
            );
            let outcome = run(&rc)?;
            println!(
                "done: final loss {:.6}, {:.4e} cumulative FLOPs, metrics at {}",
                outcome.final_loss,
                outcome.total_flops as f64,
                outcome.metrics_path.display()
            );
            Ok(true)
        }
        Command::Aggregate { runs, out } => {
            let summary = aggregate(&runs)?;
            write_summary_csv(&summary, &out)?;
            println!(
                "aggregated {} runs over {} steps into {}",
                summary.seeds.len(),
                summary.steps.len(),
                out.display()
            );
            Ok(true)
        }
        Command::Compare {
            baseline,
            multilevel,
            out,
        } => {
            let base = read_summary_csv(&baseline)?;
            let ml = read_summary_csv(&multilevel)?;
            let report = compare(&base, &ml)?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            print!("{}", render_text(&report));
            println!("report written to {}", out.display());
            Ok(true)
        }
        Command::Gradcheck { seed } => {
            let mut all = mlt::gradcheck::check_primitives(seed);
            all.extend(mlt::gradcheck::check_model(seed));
            let mut ok = true;
            for r in &all {
                let status = if r.passed() { "pass" } else { "FAIL" };
                println!(
                    "{status}  {:<28} max rel err {:.3e} (tolerance {:.0e})",
                    r.name, r.max_rel_err, r.tolerance
                );
                ok &= r.passed();
            }
            println!(
                "gradcheck: {}/{} gradients within tolerance",
                all.iter().filter(|r| r.passed()).count(),
                all.len()
            );
            Ok(ok)
        }
        Command::Flops { config, sets } => {
            let rc = load_config(config, None, None, None, &sets)?;
            let tokens = rc.tokens_per_step();
            let cost = CostModel::new(&rc.model, tokens);
            println!("tokens per optimization step: {tokens}");
            println!(
                "forward FLOPs per token:      fine {}  coarse {}",
                forward_flops(&rc.model, 1),
                forward_flops(&rc.model.coarse(), 1)
            );
            println!(
                "training step FLOPs:          fine {}  coarse {}",
                cost.fine_step, cost.coarse_step
            );
            println!(
                "coarse/fine step ratio:       {:.4}",
                cost.coarse_step as f64 / cost.fine_step as f64
            );
            println!(
                "single-level run total:       {:.4e}",
                (rc.total_fine_steps as u64 * cost.fine_step) as f64
            );
            let coarse_steps =
                2 * rc.schedule.num_cycles as u64 * rc.schedule.coarse_steps_per_model as u64;
            println!(
                "multilevel run total:         {:.4e}  ({} coarse steps)",
                (rc.total_fine_steps as u64 * cost.fine_step + coarse_steps * cost.coarse_step)
                    as f64,
                coarse_steps
            );
            let _ = train_step_flops(&rc.model, tokens);
            Ok(true)
        }
        Command::GenCorpus { out, bytes, seed } => {
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let corpus = generate_corpus(seed, bytes);
            std::fs::write(&out, &corpus)?;
            println!("wrote {} bytes to {}", corpus.len(), out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
