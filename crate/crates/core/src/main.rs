use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use fedalign::config::ExperimentConfig;
use fedalign::data::save_dataset;
use fedalign::federation::Algorithm;
use fedalign::harness::{self, dataset_for};
use fedalign::verify;
use fedalign::Error;

#[derive(Parser)]
#[command(
    name = "fedalign",
    version,
    about = "Federated domain-generalization simulator"
)]
struct Cli {
    /// Experiment config (TOML). Defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for concurrent clients and runs.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset as an FDGD file.
    Generate,
    /// Run the configured algorithm over every seed and held-out domain.
    Train,
    /// Run several algorithms on identical data and report paired deltas.
    Compare {
        /// Algorithms to compare, overriding `compare.algorithms`.
        #[arg(long, value_delimiter = ',')]
        algorithms: Option<Vec<String>>,
    },
    /// Repeat the comparison at several client counts.
    Sweep {
        /// Client counts, overriding `sweep.clients`.
        #[arg(long, value_delimiter = ',')]
        clients: Option<Vec<usize>>,
    },
    /// Check every analytic gradient against finite differences.
    Gradcheck,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_algorithms(names: &[String]) -> Result<Vec<Algorithm>, Error> {
    let mut errors = Vec::new();
    let algos: Vec<Algorithm> = names
        .iter()
        .filter_map(|n| {
            let a = Algorithm::parse(n.trim());
            if a.is_none() {
                errors.push(format!("unknown algorithm {n:?}"));
            }
            a
        })
        .collect();
    if errors.is_empty() {
        Ok(algos)
    } else {
        Err(Error::Config(errors))
    }
}

fn list(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

/// Returns `false` when the command ran but its checks failed.
fn run(cli: &Cli) -> Result<bool, Error> {
    let cfg = load(cli)?;
    let out: &Path = &cfg.out_dir;
    match &cli.command {
        Command::Generate => {
            let ds = dataset_for(&cfg, cfg.seed)?;
            std::fs::create_dir_all(out)?;
            let path = out.join("dataset.fdgd");
            save_dataset(&ds, &path)?;
            println!(
                "{} samples, {} domains, {} classes",
                ds.len(),
                ds.domains,
                ds.classes
            );
            list(&[path]);
        }
        Command::Train => {
            let (res, files) = harness::run_experiment(&cfg, out)?;
            let s = res.summary();
            for t in &s.targets {
                println!(
                    "{} target {}: final {:.4} ± {:.4}, best {:.4} ± {:.4}",
                    s.algorithm,
                    t.target,
                    t.final_acc.mean,
                    t.final_acc.std,
                    t.best_acc.mean,
                    t.best_acc.std
                );
            }
            println!(
                "{} domain average: {:.4} ± {:.4}",
                s.algorithm, s.domain_avg.mean, s.domain_avg.std
            );
            list(&files);
        }
        Command::Compare { algorithms } => {
            let algos = match algorithms {
                Some(names) => parse_algorithms(names)?,
                None => cfg.compare.algorithms.clone(),
            };
            let (cmp, files) = harness::compare(&cfg, &algos, out)?;
            print!("{}", cmp.table());
            println!(
                "paired {} − {}: mean delta {:+.4}, positive in {}/{} seeds",
                cmp.delta_pair.0, cmp.delta_pair.1, cmp.mean_delta, cmp.seeds_positive, cfg.seeds
            );
            list(&files);
        }
        Command::Sweep { clients } => {
            let ks = clients.clone().unwrap_or_else(|| cfg.sweep.clients.clone());
            let (rows, summary, files) =
                harness::scaling_sweep(&cfg, &cfg.compare.algorithms, &ks, out)?;
            for r in &rows {
                println!(
                    "K={:<3} {:<9} {:.4} ± {:.4}",
                    r.clients, r.algorithm, r.mean_acc, r.std_acc
                );
            }
            for (a, d) in &summary.degradation {
                println!(
                    "{a}: accuracy drop K={} → K={}: {:+.4}",
                    summary.k_small, summary.k_large, d
                );
            }
            if summary.within_noise {
                println!("note: difference in degradation is within seed spread");
            }
            list(&files);
        }
        Command::Gradcheck => {
            let start = Instant::now();
            let report = verify::run_suite(cfg.seed)?;
            for c in &report.checks {
                println!(
                    "{:<40} {:.3e} {}",
                    c.name,
                    c.max_rel_err,
                    if c.passed { "ok" } else { "FAIL" }
                );
            }
            println!(
                "{} checks, worst {:.3e}, {:.1} s",
                report.checks.len(),
                report.worst(),
                start.elapsed().as_secs_f64()
            );
            if !report.passed() {
                eprintln!("gradient check failed: {}", report.failures().join(", "));
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build();
    let result = match pool {
        Ok(pool) => pool.install(|| run(&cli)),
        Err(e) => Err(Error::Contract(format!("thread pool: {e}"))),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                Error::Numeric { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
