use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chartsearch::bench::{load_benchmark, load_query_dir, save_benchmark};
use chartsearch::config::Config;
use chartsearch::index::{HybridIndex, QueryMode};
use chartsearch::matcher::Model;
use chartsearch::metrics::EvalReport;
use chartsearch::pipeline;
use chartsearch::tabular::{load_corpus_dir, save_corpus_dir};
use chartsearch::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "chartsearch", version, about = "Find tables matching a line chart")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic corpus of CSV tables.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n_tables: usize,
    },
    /// Write corpus, chart queries and ground-truth manifest.
    GenBench {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes a checkpoint per epoch, `model.bin` and `train.log`.
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the interval and LSH indexes for a corpus.
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank the corpus for one chart directory.
    Query {
        #[arg(long)]
        chart: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus the index was built from; defaults to `corpus/` beside the index.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[command(flatten)]
        mode: ModeArgs,
    },
    /// Score rankings against a benchmark manifest.
    Eval {
        /// Directory written by gen-bench.
        #[arg(long)]
        bench: PathBuf,
        #[arg(long, required_unless_present = "ranked")]
        ckpt: Option<PathBuf>,
        /// Prebuilt index; built in memory when absent.
        #[arg(long)]
        index: Option<PathBuf>,
        /// JSON map from query id to ranked dataset ids, used instead of a model.
        #[arg(long)]
        ranked: Option<PathBuf>,
        /// Cutoff; defaults to the manifest's ground-truth size.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        binary_gain: bool,
        #[arg(long, default_value = "eval.json")]
        json: PathBuf,
        #[command(flatten)]
        mode: ModeArgs,
    },
}

#[derive(Args)]
#[group(multiple = false)]
struct ModeArgs {
    /// Score every dataset (linear scan).
    #[arg(long)]
    no_index: bool,
    /// Interval pruning only.
    #[arg(long)]
    interval: bool,
    /// Interval and LSH pruning (default).
    #[arg(long)]
    hybrid: bool,
}

impl ModeArgs {
    fn mode(&self) -> QueryMode {
        if self.no_index {
            QueryMode::Linear
        } else if self.interval {
            QueryMode::Interval
        } else {
            QueryMode::Hybrid
        }
    }
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::Empty(_)
        | Error::InvalidArgument(_)
        | Error::Format(_)
        | Error::Json(_)
        | Error::Shape(_) => 3,
        _ => 4,
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| {
        Failure::Lib(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let seed = cfg.seed;
    let mut out = std::io::stdout().lock();
    let print = |out: &mut std::io::StdoutLock, s: &str| {
        let _ = out.write_all(s.as_bytes());
    };
    match cli.cmd {
        Cmd::GenCorpus { out: dir, n_tables } => {
            let corpus = pipeline::synth_tables(&cfg, seed, n_tables)?;
            save_corpus_dir(&dir, &corpus)?;
            print(
                &mut out,
                &format!("wrote {} tables to {}\n", corpus.len(), dir.display()),
            );
        }
        Cmd::GenBench { out: dir } => {
            let b = pipeline::benchmark(&cfg, seed)?;
            save_benchmark(&dir, &b)?;
            print(
                &mut out,
                &format!(
                    "wrote {} tables and {} queries to {}\n",
                    b.corpus.len(),
                    b.queries.len(),
                    dir.display()
                ),
            );
        }
        Cmd::Train { out: dir } => {
            fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let mut log = Vec::new();
            let (model, _) = pipeline::train_model(&cfg, seed, Some(&dir), &mut log)?;
            write_file(&dir.join("train.log"), &String::from_utf8_lossy(&log))?;
            model.save(dir.join("model.bin"))?;
            print(&mut out, &String::from_utf8_lossy(&log));
        }
        Cmd::BuildIndex {
            corpus,
            ckpt,
            out: path,
        } => {
            let model = Model::<f64>::load(&cfg.encoder, &ckpt)?;
            let corpus = load_corpus_dir(&corpus)?;
            let idx = pipeline::build_index(&cfg, seed, &corpus, &model)?;
            idx.save(&path)?;
            print(
                &mut out,
                &format!(
                    "indexed {} datasets, {} buckets\n",
                    idx.ids().len(),
                    idx.lsh().buckets().len()
                ),
            );
        }
        Cmd::Query {
            chart,
            index,
            ckpt,
            corpus,
            k,
            mode,
        } => {
            if k == 0 {
                return Err(Failure::Usage("--k must be positive".into()));
            }
            let model = Model::<f64>::load(&cfg.encoder, &ckpt)?;
            let idx = HybridIndex::load(&index)?;
            let corpus_dir = corpus.unwrap_or_else(|| index.parent().unwrap_or(Path::new(".")).join("corpus"));
            let corpus = load_corpus_dir(&corpus_dir)?;
            let (q, _) = load_query_dir(&chart)?;
            let r = idx.query(&model, &corpus, &q, k, mode.mode())?;
            if r.ranked.is_empty() {
                eprintln!("no candidate datasets survived the index filters");
            }
            for (i, (id, score)) in r.ranked.iter().enumerate() {
                print(&mut out, &format!("{}\t{}\t{:.6}\n", i + 1, id, score));
            }
        }
        Cmd::Eval {
            bench,
            ckpt,
            index,
            ranked,
            k,
            binary_gain,
            json,
            mode,
        } => {
            let (corpus, manifest, charts) = load_benchmark(&bench)?;
            let k = k.unwrap_or(manifest.k_gt);
            if k == 0 {
                return Err(Failure::Usage("--k must be positive".into()));
            }
            let (lists, name) = match ranked {
                Some(p) => (pipeline::load_rankings(&p)?, "given"),
                None => {
                    let ckpt = ckpt.ok_or_else(|| Failure::Usage("--ckpt is required".into()))?;
                    let model = Model::<f64>::load(&cfg.encoder, &ckpt)?;
                    let idx = match index {
                        Some(p) => HybridIndex::load(p)?,
                        None => pipeline::build_index(&cfg, seed, &corpus, &model)?,
                    };
                    let m = mode.mode();
                    (pipeline::rank_queries(&model, &idx, &corpus, &charts, k, m)?, m.name())
                }
            };
            let report = EvalReport::evaluate(&manifest, &lists, k, binary_gain, name)?;
            write_file(&json, &report.to_json()?)?;
            print(&mut out, &report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
