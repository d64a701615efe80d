//! Command-line front end: data generation, source training, adaptation,
//! the mode ablation, and report emission.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::benchmark::{
    clean_benchmark, dataset_evaluator, default_shift_benchmark, read_dataset_csv,
    write_dataset_csv, Dataset, ShiftBenchmark,
};
use crate::error::Result;
use crate::pipeline::{
    adapt, run_ablation, train_source, AdaptConfig, PipelineCheckpoint, RunRecord,
};

#[derive(Parser)]
#[command(
    name = "protoadapt",
    version,
    about = "Source-free self-training domain adaptation on a synthetic ROI-feature benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReportTable {
    /// Per-meta-iteration metric series (row 0 = direct transfer).
    Series,
    /// Confidence/correctness rows, one per positive pseudo-label.
    Confidence,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source/target benchmark as CSV plus spec record
    GenData {
        #[arg(long)]
        seed: u64,
        /// Output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
        /// Generate the noise-free well-separated variant instead
        #[arg(long)]
        clean: bool,
    },
    /// Train the detector head on labeled source data
    TrainSource {
        #[arg(long)]
        config: PathBuf,
        /// Source dataset CSV
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint JSON to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a source-trained model to unlabeled target data
    Adapt {
        #[arg(long)]
        config: PathBuf,
        /// Source model checkpoint JSON
        #[arg(long)]
        source_model: PathBuf,
        /// Target dataset CSV (labels are used for evaluation only)
        #[arg(long)]
        target: PathBuf,
        /// Output directory for run record and checkpoint
        #[arg(long)]
        out: PathBuf,
        /// Fan out over several seeds, e.g. --seeds 1,2,3; aggregate stats
        /// are written alongside the per-seed records
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Run all four prototype computation modes under one seed
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        source_model: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Output directory for the comparison table and per-mode records
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit tables from a run record
    Report {
        /// Run record JSON produced by `adapt`
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: ReportFormat,
        #[arg(long, value_enum, default_value = "series")]
        table: ReportTable,
        /// Meta-iteration index for the confidence table (default: last)
        #[arg(long)]
        meta: Option<usize>,
        /// Write to a file instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: i32,
    message: String,
}

fn input_err(context: &str, err: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        message: format!("{context}: {err}"),
    }
}

fn runtime_err(context: &str, err: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: format!("{context}: {err}"),
    }
}

fn load_config(path: &Path) -> std::result::Result<AdaptConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| input_err(&format!("cannot read config {}", path.display()), e))?;
    let config: AdaptConfig = serde_json::from_str(&text)
        .map_err(|e| input_err(&format!("invalid config {}", path.display()), e))?;
    config
        .validate()
        .map_err(|e| input_err(&format!("invalid config {}", path.display()), e))?;
    Ok(config)
}

fn load_dataset(path: &Path) -> std::result::Result<Dataset, Failure> {
    read_dataset_csv(path)
        .map_err(|e| input_err(&format!("cannot load dataset {}", path.display()), e))
}

fn load_checkpoint(path: &Path) -> std::result::Result<PipelineCheckpoint, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| input_err(&format!("cannot read checkpoint {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map_err(|e| input_err(&format!("invalid checkpoint {}", path.display()), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::result::Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| runtime_err("serialization failed", e))?;
    fs::write(path, text)
        .map_err(|e| runtime_err(&format!("cannot write {}", path.display()), e))
}

fn ensure_dir(path: &Path) -> std::result::Result<(), Failure> {
    fs::create_dir_all(path)
        .map_err(|e| input_err(&format!("cannot create directory {}", path.display()), e))
}

fn gen_data(seed: u64, out: &Path, clean: bool) -> std::result::Result<(), Failure> {
    ensure_dir(out)?;
    let bench: ShiftBenchmark = if clean {
        clean_benchmark(seed).map_err(|e| runtime_err("benchmark generation failed", e))?
    } else {
        default_shift_benchmark(seed)
            .map_err(|e| runtime_err("benchmark generation failed", e))?
    };
    write_dataset_csv(&out.join("source.csv"), &bench.source)
        .map_err(|e| runtime_err("cannot write source.csv", e))?;
    write_dataset_csv(&out.join("target.csv"), &bench.target)
        .map_err(|e| runtime_err("cannot write target.csv", e))?;
    write_json(&out.join("benchmark.json"), &bench.spec)?;
    println!(
        "wrote {} source rows and {} target rows to {}",
        bench.source.len(),
        bench.target.len(),
        out.display()
    );
    Ok(())
}

fn train_source_cmd(
    config_path: &Path,
    data: &Path,
    out: &Path,
) -> std::result::Result<(), Failure> {
    let config = load_config(config_path)?;
    let source = load_dataset(data)?;
    let (model, adam) =
        train_source(&config, &source).map_err(|e| runtime_err("source training failed", e))?;
    let checkpoint = PipelineCheckpoint {
        meta_iteration: 0,
        mlp: model,
        adam,
        prototype: None,
        transformer: None,
        self_attention: None,
    };
    write_json(out, &checkpoint)?;
    println!("wrote source model checkpoint to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct SeedAggregate {
    seeds: Vec<u64>,
    direct_transfer_f1: Vec<f64>,
    final_target_f1: Vec<f64>,
    median_direct_transfer_f1: f64,
    median_final_target_f1: f64,
    mean_final_target_f1: f64,
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn adapt_cmd(
    config_path: &Path,
    source_model: &Path,
    target_path: &Path,
    out: &Path,
    seeds: Option<Vec<u64>>,
) -> std::result::Result<(), Failure> {
    let base_config = load_config(config_path)?;
    let checkpoint = load_checkpoint(source_model)?;
    let target = load_dataset(target_path)?;
    ensure_dir(out)?;
    let evaluator = dataset_evaluator(&target);

    let run_one = |config: &AdaptConfig,
                   record_name: &str,
                   ckpt_name: &str|
     -> std::result::Result<RunRecord, Failure> {
        let mut outcome = adapt(config, &checkpoint.mlp, target.unlabeled(), &evaluator)
            .map_err(|e| runtime_err("adaptation failed", e))?;
        outcome.record.checkpoint = ckpt_name.to_string();
        write_json(&out.join(ckpt_name), &outcome.checkpoint())?;
        write_json(&out.join(record_name), &outcome.record)?;
        Ok(outcome.record)
    };

    match seeds {
        None => {
            let record = run_one(&base_config, "runrecord.json", "checkpoint.json")?;
            let last = record.metrics.last().expect("metrics never empty");
            println!(
                "adaptation finished: direct transfer F1 {:.4} -> final F1 {:.4} ({})",
                record.metrics[0].target_f1,
                last.target_f1,
                out.join("runrecord.json").display()
            );
        }
        Some(mut seeds) => {
            seeds.sort_unstable();
            seeds.dedup();
            let mut dt = Vec::with_capacity(seeds.len());
            let mut fin = Vec::with_capacity(seeds.len());
            for &seed in &seeds {
                let mut config = base_config.clone();
                config.seed = seed;
                let record = run_one(
                    &config,
                    &format!("runrecord_seed{seed}.json"),
                    &format!("checkpoint_seed{seed}.json"),
                )?;
                dt.push(record.metrics[0].target_f1);
                fin.push(record.metrics.last().expect("metrics never empty").target_f1);
            }
            let aggregate = SeedAggregate {
                seeds: seeds.clone(),
                direct_transfer_f1: dt.clone(),
                final_target_f1: fin.clone(),
                median_direct_transfer_f1: median(&dt),
                median_final_target_f1: median(&fin),
                mean_final_target_f1: fin.iter().sum::<f64>() / fin.len().max(1) as f64,
            };
            write_json(&out.join("aggregate.json"), &aggregate)?;
            println!(
                "{} seed runs finished: median final F1 {:.4} ({})",
                seeds.len(),
                aggregate.median_final_target_f1,
                out.join("aggregate.json").display()
            );
        }
    }
    Ok(())
}

fn ablate_cmd(
    config_path: &Path,
    source_model: &Path,
    target_path: &Path,
    out: &Path,
) -> std::result::Result<(), Failure> {
    let config = load_config(config_path)?;
    let checkpoint = load_checkpoint(source_model)?;
    let target = load_dataset(target_path)?;
    ensure_dir(out)?;
    let evaluator = dataset_evaluator(&target);
    let (table, records) = run_ablation(&config, &checkpoint.mlp, target.unlabeled(), &evaluator)
        .map_err(|e| runtime_err("ablation failed", e))?;
    write_json(&out.join("ablation.json"), &table)?;
    fs::write(out.join("ablation.csv"), table.to_csv())
        .map_err(|e| runtime_err("cannot write ablation.csv", e))?;
    for record in &records {
        write_json(
            &out.join(format!("runrecord_{}.json", record.config.prototype_mode.as_str())),
            record,
        )?;
    }
    print!("{}", table.to_csv());
    Ok(())
}

fn load_run_record(path: &Path) -> std::result::Result<RunRecord, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| input_err(&format!("cannot read run record {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map_err(|e| input_err(&format!("invalid run record {}", path.display()), e))
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Serialize)]
struct SeriesRow {
    meta_iter: usize,
    precision: Option<f64>,
    recall: Option<f64>,
    f1: Option<f64>,
    target_f1: f64,
    proto_purity: Option<f64>,
}

#[derive(Serialize)]
struct ConfidenceRow {
    confidence: f64,
    correct: u8,
}

fn report_cmd(
    run: &Path,
    format: ReportFormat,
    table: ReportTable,
    meta: Option<usize>,
    out: Option<&Path>,
) -> std::result::Result<(), Failure> {
    let record = load_run_record(run)?;
    let text = match table {
        ReportTable::Series => {
            let rows: Vec<SeriesRow> = record
                .metrics
                .iter()
                .enumerate()
                .map(|(i, m)| SeriesRow {
                    meta_iter: i,
                    precision: m.pseudo_precision,
                    recall: m.pseudo_recall,
                    f1: m.pseudo_f1,
                    target_f1: m.target_f1,
                    proto_purity: m.proto_purity,
                })
                .collect();
            match format {
                ReportFormat::Json => serde_json::to_string_pretty(&rows)
                    .map_err(|e| runtime_err("serialization failed", e))?,
                ReportFormat::Csv => {
                    let mut s = String::from("meta_iter,precision,recall,f1,target_f1,proto_purity\n");
                    for r in rows {
                        s.push_str(&format!(
                            "{},{},{},{},{},{}\n",
                            r.meta_iter,
                            opt_cell(r.precision),
                            opt_cell(r.recall),
                            opt_cell(r.f1),
                            r.target_f1,
                            opt_cell(r.proto_purity),
                        ));
                    }
                    s
                }
            }
        }
        ReportTable::Confidence => {
            let idx = meta.unwrap_or(record.metrics.len().saturating_sub(1));
            let m = record.metrics.get(idx).ok_or_else(|| {
                input_err(
                    "invalid --meta",
                    format!("index {idx} out of range (run has {})", record.metrics.len()),
                )
            })?;
            let rows: Vec<ConfidenceRow> = m
                .scatter
                .iter()
                .map(|p| ConfidenceRow {
                    confidence: p.confidence,
                    correct: p.correct as u8,
                })
                .collect();
            match format {
                ReportFormat::Json => serde_json::to_string_pretty(&rows)
                    .map_err(|e| runtime_err("serialization failed", e))?,
                ReportFormat::Csv => {
                    let mut s = String::from("confidence,correct\n");
                    for r in rows {
                        s.push_str(&format!("{},{}\n", r.confidence, r.correct));
                    }
                    s
                }
            }
        }
    };
    match out {
        Some(path) => fs::write(path, text)
            .map_err(|e| runtime_err(&format!("cannot write {}", path.display()), e))?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Parses arguments and runs the selected subcommand, returning the process
/// exit code instead of exiting, so it stays testable in-process.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };

    let result = match cli.command {
        Command::GenData { seed, out, clean } => gen_data(seed, &out, clean),
        Command::TrainSource { config, data, out } => train_source_cmd(&config, &data, &out),
        Command::Adapt {
            config,
            source_model,
            target,
            out,
            seeds,
        } => adapt_cmd(&config, &source_model, &target, &out, seeds),
        Command::Ablate {
            config,
            source_model,
            target,
            out,
        } => ablate_cmd(&config, &source_model, &target, &out),
        Command::Report {
            run,
            format,
            table,
            meta,
            out,
        } => report_cmd(&run, format, table, meta, out.as_deref()),
    };

    match result {
        Ok(()) => 0,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            failure.code
        }
    }
}

/// Convenience wrapper for library users mirroring `fn main`.
pub fn run() -> Result<i32> {
    Ok(cli_main(std::env::args_os()))
}
