use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tofu_cli::config::{ExperimentConfig, Suite};
use tofu_cli::output::{write_run, OutputDir, RunRecord};
use tofu_cli::persist::ModelFile;
use tofu_cli::report::summary_table;
use tofu_cli::runner::run_experiment;
use tofu_cli::{CliError, Result};
use tofu_core::synthgen::{task_bundle, BINARY_TASKS, COLORED_TASKS, MULTISOURCE_TASKS};
use tofu_core::theory::run_theory_checks;

#[derive(Parser)]
#[command(name = "tofu", version, about = "Transfer of unstable features on synthetic suites")]
struct Cli {
    /// Output root; relative output directories resolve against it.
    #[arg(long, env = "TOFU_OUT", global = true, default_value = ".")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write every environment of the requested tasks as NDJSON.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Task ids; all known tasks when omitted.
        tasks: Vec<String>,
        #[arg(long, default_value = "data")]
        dir: String,
    },
    /// Check the discrete-distribution results on fuzzed joints.
    TheoryCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
    },
    /// Run an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
    },
    /// Re-emit plots from a finished run directory.
    Plots {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Parse a config and list every problem.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn resolve(root: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn gen(root: &Path, seed: u64, tasks: Vec<String>, dir: &str) -> Result<()> {
    let tasks = if tasks.is_empty() {
        BINARY_TASKS
            .iter()
            .chain(&COLORED_TASKS)
            .chain(&MULTISOURCE_TASKS)
            .map(|s| s.to_string())
            .collect()
    } else {
        tasks
    };
    let mut d = OutputDir::new(resolve(root, dir));
    for t in &tasks {
        let b = task_bundle(t, seed)?;
        for env in &b.environments {
            d.add(format!("{t}/{}.ndjson", env.role.as_str()), env.to_ndjson());
            d.add(format!("{t}/{}.spec.json", env.role.as_str()), serde_json::to_string_pretty(&env.spec)? + "\n");
        }
        println!("{t}: {} environments", b.environments.len());
    }
    d.finish("-", Suite::Theory)
}

fn theory(root: &Path, seed: u64, trials: usize) -> Result<bool> {
    let report = run_theory_checks(seed, trials)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    let mut d = OutputDir::new(root.to_path_buf());
    d.add("theory.json", serde_json::to_string_pretty(&report)? + "\n");
    d.finish("-", Suite::Theory)?;
    Ok(report.pass())
}

fn run(root: &Path, config: &Path, seed: Option<u64>, jobs: usize) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    let dir = resolve(root, &cfg.output_dir);
    if cfg.suite == Suite::Theory {
        return theory(&dir, cfg.seeds[0], cfg.theory_trials);
    }
    log::info!(
        "{} transfers x {} methods x {} seeds x {} cells",
        cfg.transfers.len(),
        cfg.methods.len(),
        cfg.seeds.len(),
        cfg.cells().len()
    );
    let out = run_experiment(&cfg, jobs)?;
    let sel = write_run(&cfg, &out, &dir)?;
    print!("{}", summary_table(&sel.records, cfg.n_c[0]));
    let failed = sel.records.iter().filter(|r| !r.record.ok()).count();
    if failed > 0 {
        eprintln!("{failed} selected records failed");
    }
    println!("results in {}", dir.display());
    Ok(true)
}

fn plots(dir: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
    let records: Vec<RunRecord> = match std::fs::read_to_string(dir.join("results.json")) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(e) => {
            log::warn!("no results in {}: {e}", dir.display());
            Vec::new()
        }
    };
    let mut encoders = BTreeMap::new();
    for t in &cfg.transfers {
        for &seed in &cfg.seeds {
            let p = dir.join(format!("models/fz__{}__s{seed}.json", t.source_key()));
            if let Ok(text) = std::fs::read_to_string(&p) {
                let f: ModelFile = serde_json::from_str(&text)?;
                encoders.insert((t.source_key(), seed), f.to_params()?);
            }
        }
    }
    for (name, svg) in tofu_cli::plots::emit_plots(&cfg, &records, &encoders)? {
        let p = dir.join("plots").join(&name);
        std::fs::create_dir_all(p.parent().unwrap()).map_err(|source| CliError::Write {
            path: p.clone(),
            source,
        })?;
        std::fs::write(&p, svg).map_err(|source| CliError::Write { path: p.clone(), source })?;
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let r = match cli.command {
        Command::Gen { seed, tasks, dir } => gen(&cli.out_root, seed, tasks, &dir).map(|_| true),
        Command::TheoryCheck { seed, trials } => theory(&cli.out_root, seed, trials),
        Command::Run { config, seed, jobs } => run(&cli.out_root, &config, seed, jobs),
        Command::Plots { dir } => plots(&dir).map(|_| true),
        Command::Validate { config } => ExperimentConfig::load(&config).map(|c| {
            println!("ok: suite {} hash {}", c.suite.as_str(), c.hash());
            true
        }),
    };
    match r {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
