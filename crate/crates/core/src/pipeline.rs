//! End-to-end steps shared by the command line and the acceptance suite.
//! Every random draw derives from one seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bench::{generate_benchmark, synth_corpus, training_set, Benchmark, BenchmarkManifest};
use crate::chart::LineChartQuery;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::index::{HybridIndex, QueryMode};
use crate::matcher::Model;
use crate::tabular::Dataset;
use crate::training::{train, TrainConfig};

/// Independent streams derived from the user seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub bench: u64,
    pub training_data: u64,
    pub init: u64,
    pub shuffle: u64,
    pub lsh: u64,
    pub baseline: u64,
}

impl Seeds {
    pub fn derive(seed: u64) -> Self {
        let s = |i: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i);
        Seeds {
            bench: s(1),
            training_data: s(2),
            init: s(3),
            shuffle: s(4),
            lsh: s(5),
            baseline: s(6),
        }
    }
}

/// `n` unperturbed synthetic tables shaped by `cfg.bench`.
pub fn synth_tables(cfg: &Config, seed: u64, n: usize) -> Result<Vec<Dataset>> {
    let mut rng = ChaCha8Rng::seed_from_u64(Seeds::derive(seed).bench);
    synth_corpus(&mut rng, "t", n, cfg.bench.rows, cfg.bench.cols)
}

/// Reads a JSON object mapping query ids to ranked dataset ids.
pub fn load_rankings(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn benchmark(cfg: &Config, seed: u64) -> Result<Benchmark> {
    generate_benchmark(&cfg.bench, Seeds::derive(seed).bench)
}

/// Generates the training corpus from `cfg` and trains a fresh model.
/// Returns the model and the per-epoch loss.
pub fn train_model(
    cfg: &Config,
    seed: u64,
    ckpt_dir: Option<&Path>,
    log: impl Write,
) -> Result<(Model<f64>, Vec<f64>)> {
    let seeds = Seeds::derive(seed);
    let (corpus, positives) = training_set(
        &cfg.training_bench(),
        cfg.training_data.charts_per_table,
        seeds.training_data,
    )?;
    let mut model = Model::new(&cfg.encoder, seeds.init)?;
    let tcfg = TrainConfig {
        seed: seeds.shuffle,
        ..cfg.train.clone()
    };
    let curve = train(&mut model, &positives, &corpus, &tcfg, ckpt_dir, log)?;
    Ok((model, curve))
}

pub fn build_index(cfg: &Config, seed: u64, corpus: &[Dataset], model: &Model<f64>) -> Result<HybridIndex> {
    HybridIndex::build(corpus, model, cfg.lsh_bits, Seeds::derive(seed).lsh)
}

/// Ranked ids per query under `mode`, truncated to `k`.
pub fn rank_queries(
    model: &Model<f64>,
    index: &HybridIndex,
    corpus: &[Dataset],
    charts: &[(String, LineChartQuery)],
    k: usize,
    mode: QueryMode,
) -> Result<BTreeMap<String, Vec<String>>> {
    Ok(index
        .rank_all(model, corpus, charts, k, mode)?
        .into_iter()
        .map(|(id, r)| (id, r.ids()))
        .collect())
}

/// A seeded uniformly random permutation of the corpus per query.
pub fn random_rankings(manifest: &BenchmarkManifest, seed: u64) -> BTreeMap<String, Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(Seeds::derive(seed).baseline);
    manifest
        .queries
        .iter()
        .map(|q| {
            let mut ids = manifest.corpus.clone();
            ids.shuffle(&mut rng);
            (q.id.clone(), ids)
        })
        .collect()
}

/// Fraction of queries whose source table is among the first `n` results.
pub fn source_hit_rate(manifest: &BenchmarkManifest, ranked: &BTreeMap<String, Vec<String>>, n: usize) -> f64 {
    let hits = manifest
        .queries
        .iter()
        .filter(|q| {
            ranked
                .get(&q.id)
                .is_some_and(|r| r.iter().take(n).any(|id| *id == q.source))
        })
        .count();
    hits as f64 / manifest.queries.len().max(1) as f64
}
