use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use okdlab::adapters::AdapterSet;
use okdlab::data::{synthetic_corpus, write_jsonl};
use okdlab::experiment::{
    compare, comparison_text, eval_for_seed, prepare_data, run, write_comparison_csv, ExperimentConfig, RunManifest,
};
use okdlab::metrics::{dump_token_cases, evaluate, write_token_cases, MetricReport};
use okdlab::model::{AdaptedLm, TransformerLm};
use okdlab::trainers::Method;
use okdlab::{Error, Result};

#[derive(Parser)]
#[command(name = "okdlab", version, about = "Knowledge distillation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every seed of an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a student checkpoint on the config's test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        student: PathBuf,
        /// Teacher checkpoint (defaults to the config's).
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Evaluate against the teacher with these adapters attached.
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the bucket table as CSV.
        #[arg(long)]
        buckets_csv: Option<PathBuf>,
    },
    /// Aggregate the per-seed difficulty buckets of a finished run.
    Analyze {
        /// Run directory or manifest path.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate finished runs side by side.
    Compare {
        /// Run directories or manifest paths.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// List the teacher's top-k tokens per response position with both
    /// models' probabilities.
    DumpCases {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Number of test examples to list.
        #[arg(long, default_value_t = 10)]
        limit: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a complete default config.
    PrintConfig {
        #[arg(long, value_enum, default_value_t = MethodArg::Okd)]
        method: MethodArg,
    },
    /// Write a synthetic instruction corpus as JSONL.
    GenCorpus {
        #[arg(long, default_value_t = 2400)]
        records: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MethodArg {
    Sft,
    StandardKd,
    OnPolicyKd,
    Okd,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Sft => Method::Sft,
            MethodArg::StandardKd => Method::StandardKd,
            MethodArg::OnPolicyKd => Method::OnPolicyKd,
            MethodArg::Okd => Method::Okd,
        }
    }
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.json")
    } else {
        p.to_path_buf()
    }
}

fn load_teacher(cfg: &ExperimentConfig, path: Option<PathBuf>) -> Result<TransformerLm<f32>> {
    let path = path
        .or_else(|| cfg.teacher.checkpoint.clone())
        .ok_or_else(|| Error::InvalidArgument("no teacher checkpoint: pass --teacher".into()))?;
    TransformerLm::load(&path)
}

fn load_adapters(path: Option<PathBuf>) -> Result<Option<AdapterSet<f32>>> {
    path.map(|p| AdapterSet::load(&p)).transpose()
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, output } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(o) = output {
                cfg.output_dir = Some(o);
            }
            let dir = cfg.resolved_output_dir();
            let manifest = run(&cfg, &dir)?;
            println!("{}", dir.join("manifest.json").display());
            for (k, v) in &manifest.mean {
                println!("{k}: {v:.6} ± {:.6}", manifest.std.get(k).copied().unwrap_or(0.0));
            }
        }
        Command::Eval {
            config,
            student,
            teacher,
            adapters,
            seed,
            out,
            buckets_csv,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = prepare_data(&cfg.data)?;
            let teacher = load_teacher(&cfg, teacher)?;
            let set = load_adapters(adapters)?;
            let student = TransformerLm::<f32>::load(&student)?;
            let lm = AdaptedLm {
                model: &teacher,
                adapters: set.as_ref(),
            };
            let report = evaluate(lm, &student, &data.test, &eval_for_seed(&cfg.eval, seed))?;
            match out {
                Some(p) => report.write_json(&p)?,
                None => print!("{}", report.to_json()?),
            }
            if let Some(p) = buckets_csv {
                report.write_bucket_csv(&p)?;
            }
        }
        Command::Analyze { run, out } => {
            let manifest = RunManifest::load(&manifest_path(&run))?;
            let mut sums: BTreeMap<(String, &str), (f64, usize)> = BTreeMap::new();
            for s in &manifest.seeds {
                let r = MetricReport::read_json(&s.metrics)?;
                println!("seed {}", s.seed);
                println!("  {:<12} {:>7} {:>9} {:>9} {:>9} {:>9}", "bucket", "tokens", "unc", "kl", "std", "ta");
                for (name, b) in &r.per_bucket {
                    println!(
                        "  {:<12} {:>7} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                        name, b.tokens, b.mean_unc, b.mean_kl, b.mean_logit_std, b.top1_agreement
                    );
                    for (m, v) in [
                        ("mean_unc", b.mean_unc),
                        ("mean_kl", b.mean_kl),
                        ("mean_logit_std", b.mean_logit_std),
                        ("top1_agreement", b.top1_agreement),
                    ] {
                        let e = sums.entry((name.clone(), m)).or_insert((0.0, 0));
                        e.0 += v;
                        e.1 += 1;
                    }
                }
            }
            if let Some(p) = out {
                let mut w = csv::Writer::from_path(&p)?;
                w.write_record(["bucket", "metric", "mean_over_seeds"])?;
                for ((bucket, metric), (sum, n)) in &sums {
                    w.write_record([bucket.as_str(), metric, &(sum / *n as f64).to_string()])?;
                }
                w.flush().map_err(|source| Error::Io { path: p.clone(), source })?;
            }
        }
        Command::Compare { runs, csv } => {
            let manifests = runs
                .iter()
                .map(|p| RunManifest::load(&manifest_path(p)))
                .collect::<Result<Vec<_>>>()?;
            let rows = compare(&manifests)?;
            print!("{}", comparison_text(&rows));
            if let Some(p) = csv {
                write_comparison_csv(&rows, &p)?;
            }
        }
        Command::DumpCases {
            config,
            student,
            teacher,
            adapters,
            k,
            limit,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = prepare_data(&cfg.data)?;
            let teacher = load_teacher(&cfg, teacher)?;
            let set = load_adapters(adapters)?;
            let student = TransformerLm::<f32>::load(&student)?;
            let lm = AdaptedLm {
                model: &teacher,
                adapters: set.as_ref(),
            };
            let n = limit.min(data.test.len());
            let cases = dump_token_cases(lm, &student, &data.test[..n], k)?;
            write_token_cases(&cases, &out)?;
            println!("{} rows written to {}", cases.len(), out.display());
        }
        Command::PrintConfig { method } => {
            let cfg = ExperimentConfig::desk_scale(method.into());
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
        Command::GenCorpus { records, seed, out } => {
            write_jsonl(&out, &synthetic_corpus(records, seed))?;
            println!("{records} records written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
