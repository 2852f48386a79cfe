//! `owgds` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error, 3 I/O error, 4 selftest failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use owgds::config::{ConfigError, ExperimentConfig};
use owgds::data::{generate_benchmark, write_dataset, DataError, Dataset};
use owgds::harness::{
    self, data_efficiency_sweep, dump_embeddings, evaluate, load_data, pretrain_run, run_ablation, sweep_csv,
    write_metrics, write_summary, HarnessError, MetricsRecord, Objective, ABLATION_TOLERANCE_POINTS,
};
use owgds::model::{Model, ModelError};
use owgds::selftest;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_SELFTEST: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "owgds", version, about = "Open-world deepfake-detection generalization experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured synthetic benchmark as CSV.
    GenData(Overrides),
    /// Supervised pretraining on the source domain.
    Pretrain(Overrides),
    /// Unsupervised adaptation to the target domain.
    Adapt {
        /// Start from this checkpoint instead of pretraining first.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Adapt with cross-entropy only (every other weight zero).
        #[arg(long)]
        ce_only: bool,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Accuracy and AUC of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = DomainArg::Both)]
        domain: DomainArg,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Full objective against each single-term removal.
    Ablate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Adaptation on random fractions of the target domain.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.5, 1.0])]
        fractions: Vec<f64>,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Encoder features of every sample, for external projection tools.
    DumpEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Gradient checks and closed-form oracles.
    Selftest,
}

#[derive(Args, Debug)]
struct Overrides {
    /// `key=value` config overrides.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DomainArg {
    Source,
    Target,
    Both,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let code = if matches!(e, ConfigError::Io { .. }) { EXIT_IO } else { EXIT_CONFIG };
        Failure { code, msg: e.to_string() }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match &e {
            HarnessError::Io { .. }
            | HarnessError::Data(DataError::Io { .. })
            | HarnessError::Model(ModelError::Io { .. }) => EXIT_IO,
            HarnessError::Config(_) | HarnessError::Data(DataError::Config(_)) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        HarnessError::from(e).into()
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        HarnessError::from(e).into()
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_IO,
        msg: format!("{}: {e}", path.display()),
    }
}

/// File values, then `key=value` overrides, then flags.
fn resolve(common: &Common, overrides: &[String]) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Prints the effective configuration and stores it as `config.txt`.
fn start_run(cfg: &ExperimentConfig, command: &str) -> Result<PathBuf, Failure> {
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    let header = cfg.render();
    println!("# owgds {command}");
    print!("{header}");
    let path = out.join("config.txt");
    std::fs::write(&path, &header).map_err(|e| io_failure(&path, e))?;
    Ok(out)
}

fn checkpoint_or_pretrain(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<(Model, Vec<MetricsRecord>), Failure> {
    if let Some(p) = checkpoint {
        return Ok((Model::load(p)?, Vec::new()));
    }
    log::info!("pretraining for {} epochs", cfg.pretrain_epochs);
    let pre = pretrain_run(cfg, ds)?;
    pre.model.save(&out.join("pretrained.ckpt"))?;
    Ok((pre.model, pre.records))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    match cli.command {
        Command::GenData(o) => {
            let cfg = resolve(common, &o.overrides)?;
            let out = start_run(&cfg, "gen-data")?;
            let records = generate_benchmark(&cfg.benchmark)?;
            let path = out.join("data.csv");
            write_dataset(&path, &records)?;
            write_text(&out.join("benchmark.txt"), &cfg.benchmark.to_text())?;
            println!("wrote {} samples to {}", records.len(), path.display());
        }
        Command::Pretrain(o) => {
            let cfg = resolve(common, &o.overrides)?;
            let out = start_run(&cfg, "pretrain")?;
            let ds = load_data(&cfg)?;
            let (model, records) = checkpoint_or_pretrain(&cfg, &ds, None, &out)?;
            write_metrics(&out.join("metrics.jsonl"), &records)?;
            write_summary(&out.join("summary.csv"), &records)?;
            println!("checkpoint {:016x}", model.fingerprint());
        }
        Command::Adapt { checkpoint, ce_only, rest } => {
            let cfg = resolve(common, &rest.overrides)?;
            let out = start_run(&cfg, "adapt")?;
            let ds = load_data(&cfg)?;
            let (start, mut records) = checkpoint_or_pretrain(&cfg, &ds, checkpoint.as_deref(), &out)?;
            let objective = if ce_only { Objective::CeOnly } else { Objective::Full };
            log::info!("adapting for {} epochs", cfg.adapt_epochs);
            let ad = harness::adapt_run(&cfg, &start, &ds, objective)?;
            ad.model.save(&out.join("adapted.ckpt"))?;
            records.extend(ad.records);
            write_metrics(&out.join("metrics.jsonl"), &records)?;
            write_summary(&out.join("summary.csv"), &records)?;
            if let Some(last) = records.last() {
                println!(
                    "target acc {:.4} auc {:.4} | source acc {:.4} auc {:.4}",
                    last.acc_target, last.auc_target, last.acc_source, last.auc_source
                );
            }
        }
        Command::Eval { checkpoint, domain, rest } => {
            let cfg = resolve(common, &rest.overrides)?;
            let out = start_run(&cfg, "eval")?;
            let ds = load_data(&cfg)?;
            let model = Model::load(&checkpoint)?;
            let mut table = String::from("domain,acc,auc\n");
            for (name, set, d) in [("source", &ds.source, DomainArg::Source), ("target", &ds.target, DomainArg::Target)] {
                if domain == d || domain == DomainArg::Both {
                    let r = evaluate(&model, set)?;
                    table.push_str(&format!("{name},{:.4},{:.4}\n", r.acc, r.auc));
                }
            }
            print!("{table}");
            write_text(&out.join("eval.csv"), &table)?;
        }
        Command::Ablate { checkpoint, rest } => {
            let cfg = resolve(common, &rest.overrides)?;
            let out = start_run(&cfg, "ablate")?;
            let ds = load_data(&cfg)?;
            let (start, _) = checkpoint_or_pretrain(&cfg, &ds, checkpoint.as_deref(), &out)?;
            let table = run_ablation(&cfg, &ds, &start)?;
            let csv = table.to_csv();
            print!("{csv}");
            println!(
                "full variant best within {ABLATION_TOLERANCE_POINTS} points: {}",
                table.full_is_best()
            );
            write_text(&out.join("ablation.csv"), &csv)?;
        }
        Command::Sweep { checkpoint, fractions, rest } => {
            let cfg = resolve(common, &rest.overrides)?;
            let out = start_run(&cfg, "sweep")?;
            let ds = load_data(&cfg)?;
            let (start, _) = checkpoint_or_pretrain(&cfg, &ds, checkpoint.as_deref(), &out)?;
            let rows = data_efficiency_sweep(&cfg, &ds, &start, &fractions)?;
            let csv = sweep_csv(&rows);
            print!("{csv}");
            write_text(&out.join("sweep.csv"), &csv)?;
        }
        Command::DumpEmbeddings { checkpoint, rest } => {
            let cfg = resolve(common, &rest.overrides)?;
            let out = start_run(&cfg, "dump-embeddings")?;
            let ds = load_data(&cfg)?;
            let model = Model::load(&checkpoint)?;
            let path = out.join("embeddings.csv");
            let n = dump_embeddings(&model, &ds, &path)?;
            println!("wrote {n} rows to {}", path.display());
        }
        Command::Selftest => {
            let results = selftest::run();
            let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
            for r in &results {
                let mark = if r.passed { "PASS" } else { "FAIL" };
                println!("{mark}  {:width$}  {}", r.name, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Failure {
                    code: EXIT_SELFTEST,
                    msg: format!("{failed} of {} checks failed", results.len()),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
