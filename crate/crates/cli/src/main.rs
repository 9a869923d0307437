use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serl::config::ExperimentConfig;
use serl::experiment::{ablate, gradcheck_suite, prepare_data, run_experiment, write_data, TermMask, GRADCHECK_TOL};
use serl::metrics::MetricsWriter;
use serl::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "serl", version, about = "Source-free semi-supervised domain adaptation on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config; keys not listed keep their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the source and target domains as CSV.
    GenData(Common),
    /// Pretrain and adapt once per seed; write metrics, checkpoints and a summary.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds, overriding the config.
        #[arg(long, value_name = "LIST", value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Also write bottleneck features per seed.
        #[arg(long)]
        export_features: bool,
    },
    /// Compare regulariser subsets over seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "LIST", value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// `all`, or `;`-separated subsets such as `base;prob+pre;prob+mix+pre`.
        #[arg(long, default_value = "all")]
        terms: String,
    },
    /// Compare analytic and finite-difference gradients of every loss term.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Plant a wrong gradient in the contrastive term; its check must then fail.
        #[arg(long)]
        corrupt: bool,
    },
}

fn load_config(path: Option<&Path>, seeds: Option<Vec<u64>>) -> serl::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(common: Common) -> serl::Result<u8> {
    let cfg = load_config(common.config.as_deref(), None)?;
    let (data, src, tgt) = write_data(&cfg, &common.out)?;
    println!("source: {} rows -> {}", data.source.len(), src.display());
    println!("target: {} rows -> {}", data.target.len(), tgt.display());
    Ok(0)
}

fn run(common: Common, seeds: Option<Vec<u64>>, export: bool) -> serl::Result<u8> {
    let cfg = load_config(common.config.as_deref(), seeds)?;
    let summary = run_experiment(&cfg, &common.out, export)?;
    for (s, acc) in summary.seeds.iter().zip(&summary.test_acc) {
        println!("seed {s}: target test accuracy {:.2}%", 100.0 * acc);
    }
    println!("mean {:.2}% (std {:.2})", 100.0 * summary.mean, 100.0 * summary.std);
    Ok(0)
}

fn run_ablation(common: Common, seeds: Option<Vec<u64>>, terms: &str) -> serl::Result<u8> {
    let cfg = load_config(common.config.as_deref(), seeds)?;
    let masks = TermMask::parse_list(terms)?;
    let data = prepare_data(&cfg)?;
    let metrics = common.out.join("metrics");
    std::fs::create_dir_all(&metrics)?;
    cfg.save(common.out.join("config.conf"))?;
    let mut streams: Vec<_> = masks
        .iter()
        .map(|m| MetricsWriter::create(metrics.join(format!("ablation-{m}.jsonl"))))
        .collect::<serl::Result<_>>()?;
    let rows = ablate(&cfg, &data, &cfg.seeds, &masks, |mask, record| {
        let k = masks.iter().position(|m| m == mask).expect("known mask");
        streams[k].write_run(record)
    })?;
    std::fs::write(common.out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    println!("{:<16} {:>8} {:>6}", "terms", "mean %", "std");
    for r in &rows {
        println!("{:<16} {:>8.2} {:>6.2}", r.label, 100.0 * r.mean, 100.0 * r.std);
    }
    Ok(0)
}

fn gradcheck(instances: usize, seed: u64, corrupt: bool) -> serl::Result<u8> {
    let checks = gradcheck_suite(instances, seed, corrupt)?;
    let mut ok = true;
    for c in &checks {
        ok &= c.passed();
        let status = if c.passed() { "ok" } else { "FAILED" };
        println!("{:<12} {:>3} instances  max rel error {:.3e}  {status}", c.loss, c.instances, c.max_rel_error);
    }
    println!("tolerance {GRADCHECK_TOL:e}");
    Ok(if ok { 0 } else { EXIT_RUNTIME })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(common) => gen_data(common),
        Command::Run {
            common,
            seeds,
            export_features,
        } => run(common, seeds, export_features),
        Command::Ablate { common, seeds, terms } => run_ablation(common, seeds, &terms),
        Command::Gradcheck {
            instances,
            seed,
            corrupt,
        } => gradcheck(instances, seed, corrupt),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Diverged { .. } = e {
                eprintln!("the partial metric stream was kept in the output directory");
            }
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}
