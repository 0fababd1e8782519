use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dact_core::cf::{train_cf, CfConfig};
use dact_core::data::{
    corpus_stats, generate_synthetic, hashed_semantic_features, ingest_tsv, read_corpus, write_corpus, Corpus,
    DriftSpec, ItemId,
};
use dact_core::harness::{parse_seed_list, report_dir, run_pipeline, AggregatedReport, Mode, RunConfig};
use dact_core::table::EmbeddingTable;

#[derive(Parser)]
#[command(name = "dact", version, about = "Drift-aware continual tokenization for generative recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus generation and ingestion.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Collaborative-filtering teacher.
    Cf {
        #[command(subcommand)]
        command: CfCommand,
    },
    /// Run the pipeline up to one period for a single mode.
    Adapt {
        #[arg(long)]
        period: usize,
        #[arg(long, default_value = "dact")]
        mode: Mode,
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the full mode x period x seed matrix.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild tables and plots from a finished run.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Generate a synthetic drifting corpus from a TOML spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ingest a `user \t item \t timestamp` file with k-core filtering.
    Ingest {
        #[arg(long)]
        tsv: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Width of the hashed content features written alongside.
        #[arg(long, default_value_t = 64)]
        d_sem: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum CfCommand {
    /// Train (or fine-tune) CF embeddings on one period of a corpus.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        period: usize,
        /// Previous table to fine-tune from.
        #[arg(long)]
        warm_start: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional TOML with CF hyperparameters.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Ok(v) = std::env::var("DACT_SEED") {
        cfg.seeds = parse_seed_list(&v).context("parsing DACT_SEED")?;
    }
    Ok(cfg)
}

fn print_reports(reports: &[AggregatedReport]) {
    println!(
        "{:>6} {:>8} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8}",
        "period", "mode", "H@5", "H@10", "N@5", "N@10", "change", "auc"
    );
    for r in reports {
        println!(
            "{:>6} {:>8} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>8.4} {:>8}",
            r.period,
            r.mode.name(),
            r.h5,
            r.h10,
            r.n5,
            r.n10,
            r.change_overall,
            r.drift_auc.map(|a| format!("{:.4}", a.mean)).unwrap_or_else(|| "-".into()),
        );
    }
}

fn data_gen(spec: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let spec: DriftSpec = toml::from_str(&text).context("parsing drift spec")?;
    let corpus = generate_synthetic(&spec)?;
    write_corpus(out, &corpus, Some(&spec))?;
    let s = corpus_stats(&corpus.periods);
    println!("{} users, {} items, {} interactions -> {}", s.users, s.items, s.interactions, out.display());
    Ok(())
}

fn data_ingest(tsv: &Path, min_count: usize, out: &Path, d_sem: usize, seed: u64) -> Result<()> {
    let periods = ingest_tsv(tsv, min_count)?;
    let items: BTreeSet<ItemId> = periods.iter().flat_map(|p| p.item_set.iter().copied()).collect();
    let semantic = hashed_semantic_features(&items, d_sem, seed)?;
    let corpus = Corpus {
        periods,
        semantic,
        truth: None,
    };
    write_corpus(out, &corpus, None)?;
    let s = corpus_stats(&corpus.periods);
    println!("{} users, {} items, {} interactions -> {}", s.users, s.items, s.interactions, out.display());
    for p in &corpus.periods {
        println!("  period {}: {} interactions", p.period_index, p.n_events());
    }
    Ok(())
}

fn cf_train(data: &Path, period: usize, warm: Option<&Path>, out: &Path, seed: u64, config: Option<&Path>) -> Result<()> {
    let corpus = read_corpus(data)?;
    let Some(pd) = corpus.periods.get(period) else {
        bail!("corpus has {} periods, asked for {period}", corpus.periods.len());
    };
    let cfg: CfConfig = match config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?).context("parsing CF config")?,
        None => CfConfig::default(),
    };
    let prev = warm.map(EmbeddingTable::load).transpose()?.map(|(t, _)| t);
    let table = train_cf(pd, prev.as_ref(), &cfg, seed)?;
    table.save(out, "cf", Some(period))?;
    println!("{} item embeddings (dim {}) -> {}", table.len(), table.dim(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Data { command } => match command {
            DataCommand::Gen { spec, out } => data_gen(&spec, &out),
            DataCommand::Ingest {
                tsv,
                min_count,
                out,
                d_sem,
                seed,
            } => data_ingest(&tsv, min_count, &out, d_sem, seed),
        },
        Command::Cf { command } => match command {
            CfCommand::Train {
                data,
                period,
                warm_start,
                out,
                seed,
                config,
            } => cf_train(&data, period, warm_start.as_deref(), &out, seed, config.as_deref()),
        },
        Command::Adapt { period, mode, config } => {
            let mut cfg = load_config(&config)?;
            cfg.modes = vec![mode];
            cfg.max_period = period;
            let summary = run_pipeline(&cfg)?;
            let rows: Vec<AggregatedReport> = summary.reports.into_iter().filter(|r| r.period == period).collect();
            print_reports(&rows);
            if mode == Mode::Dact {
                for seed in &cfg.seeds {
                    println!("confidences: {}", cfg.period_dir(*seed, period).join("confidences.tsv").display());
                }
            }
            Ok(())
        }
        Command::Run { config, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            let summary = run_pipeline(&cfg)?;
            print_reports(&summary.reports);
            println!("reports written to {}", cfg.out_dir.display());
            Ok(())
        }
        Command::Report { dir } => {
            let reports = report_dir(&dir)?;
            print_reports(&reports);
            Ok(())
        }
    }
}
