//! Command-line entry point for the few-shot poisoning and detection workbench.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fssentry::fewshot::HeadKind;
use fssentry::harness::{parse_fraction, report_read, EvalReport, ExperimentConfig, Pipeline};
use fssentry::{Error, Result};

#[derive(Parser)]
#[command(name = "fssentry", version, about = "Support-set poisoning attacks and self-similarity detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its class split.
    GenData(Common),
    /// Train the few-shot model and report its clean test accuracy.
    TrainFewshot(Common),
    /// Train the standard, FPA and FPA' autoencoders.
    TrainAe(Common),
    /// Run the attack grid and archive the adversarial support sets.
    Attack(Common),
    /// Score clean and adversarial sets and write the report.
    Detect(Common),
    /// Evaluate attack success rates under both transfer scenarios.
    EvalAsr(Common),
    /// Print a written report.
    Report {
        #[command(flatten)]
        common: Common,
        /// Report directory; defaults to the configured run's report.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Every stage, then the report.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file and FSSENTRY_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Replicate index for the attack and detection streams.
    #[arg(long)]
    replicate: Option<u64>,
    /// Directory for every stage's artifacts and the report.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Few-shot head: `prototypical` or `relation`.
    #[arg(long, value_parser = parse_head)]
    head: Option<HeadKind>,
    /// Training episodes for the few-shot model.
    #[arg(long)]
    episodes: Option<usize>,
    /// PGD budgets, comma separated, e.g. `3/255,12/255`.
    #[arg(long, value_delimiter = ',', value_parser = parse_eps)]
    eps: Option<Vec<f64>>,
    /// Perturbed samples per attacked support set.
    #[arg(long)]
    n_attacked: Option<usize>,
    /// Attacked sets per test class in every cell.
    #[arg(long)]
    runs_per_class: Option<usize>,
    /// Any config key as `section.key=value` with a TOML value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

fn parse_head(s: &str) -> std::result::Result<HeadKind, String> {
    match s {
        "prototypical" | "protonet" => Ok(HeadKind::Prototypical),
        "relation" | "relationnet" => Ok(HeadKind::Relation),
        _ => Err(format!("unknown head `{s}`")),
    }
}

fn parse_eps(s: &str) -> std::result::Result<f64, String> {
    parse_fraction(s).map_err(|e| e.to_string())
}

/// Sets a dotted key in the TOML form of the config.
fn apply_set(cfg: ExperimentConfig, assignment: &str) -> Result<ExperimentConfig> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("`{assignment}` is not KEY=VALUE")))?;
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .map(|mut t| t.remove("v").expect("parsed key"))
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
    let mut root = toml::Value::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    let mut node = &mut root;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}` does not name a config key")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value.clone());
            break;
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("--set {assignment}: {e}")))
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_env()?;
        for s in &self.sets {
            cfg = apply_set(cfg, s)?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.replicate {
            cfg.replicate = v;
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = self.head {
            cfg.fewshot.head = v;
        }
        if let Some(v) = self.episodes {
            cfg.fewshot.episodes = v;
        }
        if let Some(v) = &self.eps {
            cfg.attacks.pgd_eps = v.clone();
        }
        if let Some(v) = self.n_attacked {
            cfg.attacks.n_attacked = v;
        }
        if let Some(v) = self.runs_per_class {
            cfg.attacks.runs_per_class = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn pipeline(&self) -> Result<Pipeline> {
        Pipeline::new(self.config()?)
    }
}

fn print_auroc(report: &EvalReport) {
    println!("{:<24} {:<10} {:<12} {:>7} {:>6}", "cell", "filter", "statistic", "auroc", "sets");
    for r in &report.auroc {
        println!("{:<24} {:<10} {:<12} {:>7.4} {:>6}", r.cell, r.filter, r.statistic, r.auroc, r.n_adv);
    }
}

fn print_asr(report: &EvalReport) {
    println!("{:<24} {:<16} {:>7} {:>7} {:>6}", "cell", "scenario", "mean", "sd", "sets");
    for r in &report.asr {
        println!("{:<24} {:<16} {:>7.4} {:>7.4} {:>6}", r.cell, r.scenario, r.mean, r.sd, r.n_sets);
    }
}

fn print_summary(report: &EvalReport) {
    let s = &report.summary;
    println!(
        "{} on {}: clean accuracy {:.4} ± {:.4}, config {}",
        s.model,
        s.dataset,
        s.clean_accuracy,
        s.clean_accuracy_ci95,
        &s.config_hash[..12.min(s.config_hash.len())]
    );
    for m in &s.missing {
        println!("missing: {m}");
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(c) => {
            let p = c.pipeline()?;
            let ds = p.data()?;
            println!("{} samples in {} classes", ds.len(), ds.n_classes());
        }
        Command::TrainFewshot(c) => {
            let p = c.pipeline()?;
            let ds = p.data()?;
            let fs = p.fewshot(&ds)?;
            println!("test accuracy {:.4} ± {:.4}", fs.accuracy.mean, fs.accuracy.ci95);
        }
        Command::TrainAe(c) => {
            let p = c.pipeline()?;
            let ds = p.data()?;
            let fs = p.fewshot(&ds)?;
            let aes = p.autoencoders(&ds, &fs)?;
            println!("{}", serde_json::to_string_pretty(&aes.summary).map_err(|e| Error::Input(e.to_string()))?);
        }
        Command::Attack(c) => {
            let p = c.pipeline()?;
            let ds = p.data()?;
            let fs = p.fewshot(&ds)?;
            for cell in p.attacks(&ds, &fs)? {
                println!("{}: {} sets, {} failures", cell.cell.name, cell.sets.len(), cell.failures.len());
            }
        }
        Command::Detect(c) | Command::Run(c) => {
            let report = c.pipeline()?.run()?;
            print_summary(&report);
            print_auroc(&report);
        }
        Command::EvalAsr(c) => {
            let report = c.pipeline()?.run()?;
            print_summary(&report);
            print_asr(&report);
        }
        Command::Report { common, dir } => {
            let dir = match dir {
                Some(d) => d,
                None => common.pipeline()?.report_dir(),
            };
            let report = report_read(&dir)?;
            print_summary(&report);
            print_auroc(&report);
            print_asr(&report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
