//! Synthetic benchmark: corpus synthesis, perturbed near-duplicates, chart
//! queries and exact ground-truth rankings.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{apply_agg, sample_agg, AggOp};
use crate::chart::{
    augment_downsample, augment_partition, augment_reverse, load_pgm, rasterize, save_pgm, LineChartQuery,
};
use crate::error::{Error, Result};
use crate::relevance::dataset_relevance;
use crate::tabular::{Column, Dataset, Interval, UnderlyingData};
use crate::training::TrainTriplet;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy)]
enum Shape {
    RandomWalk,
    Sinusoid,
    Piecewise,
}

fn synth_column<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let base = 10f64.powf(rng.random_range(0.5..3.0));
    let amp = base * rng.random_range(0.1..0.6);
    let shape = *[Shape::RandomWalk, Shape::Sinusoid, Shape::Piecewise]
        .choose(rng)
        .expect("non-empty");
    match shape {
        Shape::RandomWalk => {
            let step = amp / (n as f64).sqrt();
            let mut v = base;
            (0..n)
                .map(|_| {
                    v += rng.random_range(-1.0..1.0) * step;
                    v
                })
                .collect()
        }
        Shape::Sinusoid => {
            let cycles = rng.random_range(0.5..4.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let tilt = rng.random_range(-0.5..0.5) * amp;
            (0..n)
                .map(|i| {
                    let x = i as f64 / n as f64;
                    base + amp * (std::f64::consts::TAU * cycles * x + phase).sin() + tilt * x
                })
                .collect()
        }
        Shape::Piecewise => {
            let knots = rng.random_range(2..=6usize);
            let ys: Vec<f64> = (0..=knots).map(|_| base + amp * rng.random_range(-1.0..1.0)).collect();
            (0..n)
                .map(|i| {
                    let x = i as f64 / (n - 1).max(1) as f64 * knots as f64;
                    let k = (x.floor() as usize).min(knots - 1);
                    let f = x - k as f64;
                    ys[k] * (1.0 - f) + ys[k + 1] * f
                })
                .collect()
        }
    }
}

/// `n_tables` tables named `<prefix><index>` with random-walk, sinusoidal
/// and piecewise-linear columns.
pub fn synth_corpus<R: Rng + ?Sized>(
    rng: &mut R,
    prefix: &str,
    n_tables: usize,
    rows: (usize, usize),
    cols: (usize, usize),
) -> Result<Vec<Dataset>> {
    if n_tables < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 tables, got {n_tables}"
        )));
    }
    if rows.0 < 2 || rows.0 > rows.1 || cols.0 < 1 || cols.0 > cols.1 {
        return Err(Error::InvalidArgument(format!(
            "bad ranges rows {rows:?} cols {cols:?}"
        )));
    }
    (0..n_tables)
        .map(|i| {
            let n = rng.random_range(rows.0..=rows.1);
            let c = rng.random_range(cols.0..=cols.1);
            let columns = (0..c)
                .map(|j| Column::new(format!("y{j}"), synth_column(rng, n)))
                .collect::<Result<Vec<_>>>()?;
            Dataset::new(format!("{prefix}{i:03}"), columns)
        })
        .collect()
}

/// `n_copies` tables whose values are scaled elementwise by U(0.9, 1.1).
pub fn perturb<R: Rng + ?Sized>(t: &Dataset, rng: &mut R, n_copies: usize) -> Result<Vec<Dataset>> {
    if n_copies == 0 {
        return Err(Error::InvalidArgument("n_copies must be at least 1".into()));
    }
    (0..n_copies)
        .map(|i| {
            let cols = t
                .columns()
                .iter()
                .map(|c| c.with_values(c.values().iter().map(|v| v * rng.random_range(0.9..1.1)).collect()))
                .collect::<Result<Vec<_>>>()?;
            Dataset::new(format!("{}#p{i}", t.id()), cols)
        })
        .collect()
}

/// A chart built from some columns of a source table.
#[derive(Debug, Clone)]
pub struct Query {
    pub id: String,
    pub source: String,
    pub columns: Vec<usize>,
    pub agg: AggOp,
    pub underlying: UnderlyingData,
    pub chart: LineChartQuery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryConfig {
    pub lines: (usize, usize),
    pub with_da: bool,
    pub height: usize,
    pub width: usize,
}

/// Draws a chart from `columns` of `t`, aggregated by `agg`.
pub fn chart_from(
    t: &Dataset,
    columns: &[usize],
    agg: AggOp,
    h: usize,
    w: usize,
) -> Result<(UnderlyingData, LineChartQuery)> {
    let series = columns
        .iter()
        .map(|&c| apply_agg(t.column(c), agg))
        .collect::<Result<Vec<_>>>()?;
    let d = UnderlyingData::new(series)?;
    let q = rasterize(&d, h, w)?;
    Ok((d, q))
}

/// `n_queries` charts cycling over `sources` (ids `q000`, ...).
pub fn make_queries<R: Rng + ?Sized>(
    sources: &[&Dataset],
    rng: &mut R,
    n_queries: usize,
    cfg: &QueryConfig,
) -> Result<Vec<Query>> {
    if sources.is_empty() {
        return Err(Error::Empty("no query sources".into()));
    }
    (0..n_queries)
        .map(|i| {
            let t = sources[i % sources.len()];
            let hi = cfg.lines.1.min(t.n_columns()).max(1);
            let lo = cfg.lines.0.clamp(1, hi);
            let m = rng.random_range(lo..=hi);
            let mut columns: Vec<usize> = (0..t.n_columns()).collect();
            columns.shuffle(rng);
            columns.truncate(m);
            columns.sort_unstable();
            let agg = if cfg.with_da {
                sample_agg(rng, t.n_rows())?
            } else {
                AggOp::IDENTITY
            };
            let (underlying, chart) = chart_from(t, &columns, agg, cfg.height, cfg.width)?;
            Ok(Query {
                id: format!("q{i:03}"),
                source: t.id().to_string(),
                columns,
                agg,
                underlying,
                chart,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedId {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub source: String,
    pub columns: Vec<usize>,
    pub agg: AggOp,
    pub lines: usize,
    pub relevant: Vec<RankedId>,
}

impl QueryRecord {
    pub fn is_da(&self) -> bool {
        !self.agg.is_identity()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub version: u32,
    pub seed: u64,
    pub k_gt: usize,
    pub corpus: Vec<String>,
    pub queries: Vec<QueryRecord>,
}

impl BenchmarkManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: BenchmarkManifest = serde_json::from_str(s)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "manifest version {} is not {MANIFEST_VERSION}",
                m.version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Exact top-`k_gt` ranking of `corpus` for `d`, ties by id.
pub fn rank_by_oracle(d: &UnderlyingData, corpus: &[Dataset], k_gt: usize) -> Result<Vec<RankedId>> {
    let mut scored = corpus
        .par_iter()
        .map(|t| {
            Ok(RankedId {
                id: t.id().to_string(),
                score: dataset_relevance(d, t)?.total,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    scored.truncate(k_gt);
    Ok(scored)
}

pub fn label_ground_truth(queries: &[Query], corpus: &[Dataset], k_gt: usize, seed: u64) -> Result<BenchmarkManifest> {
    if corpus.iter().any(|t| t.id().is_empty()) {
        return Err(Error::InvalidArgument("empty dataset id".into()));
    }
    let queries = queries
        .iter()
        .map(|q| {
            if !corpus.iter().any(|t| t.id() == q.source) {
                return Err(Error::InvalidArgument(format!("source {} not in corpus", q.source)));
            }
            Ok(QueryRecord {
                id: q.id.clone(),
                source: q.source.clone(),
                columns: q.columns.clone(),
                agg: q.agg,
                lines: q.columns.len(),
                relevant: rank_by_oracle(&q.underlying, corpus, k_gt)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkManifest {
        version: MANIFEST_VERSION,
        seed,
        k_gt,
        corpus: corpus.iter().map(|t| t.id().to_string()).collect(),
        queries,
    })
}

/// Benchmark layout: sources with perturbed copies plus distractors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_sources: usize,
    pub n_copies: usize,
    pub n_distractors: usize,
    pub n_queries: usize,
    pub k_gt: usize,
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    pub query: QueryConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_sources: 5,
            n_copies: 10,
            n_distractors: 5,
            n_queries: 20,
            k_gt: 10,
            rows: (64, 192),
            cols: (2, 4),
            query: QueryConfig {
                lines: (1, 2),
                with_da: false,
                height: 64,
                width: 240,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub corpus: Vec<Dataset>,
    pub queries: Vec<Query>,
    pub manifest: BenchmarkManifest,
}

/// Sources, copies and distractors named with `prefix`, in that order.
pub fn perturbed_corpus<R: Rng + ?Sized>(rng: &mut R, prefix: &str, cfg: &BenchConfig) -> Result<Vec<Dataset>> {
    let n = cfg.n_sources + cfg.n_distractors;
    let base = synth_corpus(rng, prefix, n.max(2), cfg.rows, cfg.cols)?;
    let (sources, distractors) = base.split_at(cfg.n_sources);
    let mut corpus = sources.to_vec();
    if cfg.n_copies > 0 {
        for s in sources {
            corpus.extend(perturb(s, rng, cfg.n_copies)?);
        }
    }
    corpus.extend(distractors.iter().take(cfg.n_distractors).cloned());
    Ok(corpus)
}

pub fn generate_benchmark(cfg: &BenchConfig, seed: u64) -> Result<Benchmark> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = perturbed_corpus(&mut rng, "t", cfg)?;
    let sources: Vec<&Dataset> = corpus[..cfg.n_sources].iter().collect();
    let queries = make_queries(&sources, &mut rng, cfg.n_queries, &cfg.query)?;
    let manifest = label_ground_truth(&queries, &corpus, cfg.k_gt, seed)?;
    Ok(Benchmark {
        corpus,
        queries,
        manifest,
    })
}

/// Chart metadata stored next to the line images of a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMeta {
    pub ytick_lo: f64,
    pub ytick_hi: f64,
    pub lines: usize,
    pub source: String,
    pub columns: Vec<usize>,
    pub agg: AggOp,
}

/// Writes `line<i>.pgm` files and `meta.json` into `dir`.
pub fn save_query_dir(dir: impl AsRef<Path>, q: &Query) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, line) in q.chart.lines().iter().enumerate() {
        save_pgm(dir.join(format!("line{i}.pgm")), line)?;
    }
    let r = q.chart.ytick_range();
    let meta = QueryMeta {
        ytick_lo: r.lo,
        ytick_hi: r.hi,
        lines: q.chart.lines().len(),
        source: q.source.clone(),
        columns: q.columns.clone(),
        agg: q.agg,
    };
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads a chart written by [`save_query_dir`].
pub fn load_query_dir(dir: impl AsRef<Path>) -> Result<(LineChartQuery, QueryMeta)> {
    let dir = dir.as_ref();
    let path = dir.join("meta.json");
    let meta: QueryMeta = serde_json::from_str(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
    let lines = (0..meta.lines)
        .map(|i| load_pgm(dir.join(format!("line{i}.pgm"))))
        .collect::<Result<Vec<_>>>()?;
    let q = LineChartQuery::new(lines, Interval::new(meta.ytick_lo, meta.ytick_hi)?)?;
    Ok((q, meta))
}

/// Writes corpus CSVs, query directories and `manifest.json` under `dir`.
pub fn save_benchmark(dir: impl AsRef<Path>, b: &Benchmark) -> Result<()> {
    let dir = dir.as_ref();
    crate::tabular::save_corpus_dir(dir.join("corpus"), &b.corpus)?;
    for q in &b.queries {
        save_query_dir(dir.join("queries").join(&q.id), q)?;
    }
    b.manifest.save(dir.join("manifest.json"))
}

/// Query id and chart pairs, in manifest order.
pub type QueryCharts = Vec<(String, LineChartQuery)>;

/// Corpus, manifest and charts written by [`save_benchmark`].
pub fn load_benchmark(dir: impl AsRef<Path>) -> Result<(Vec<Dataset>, BenchmarkManifest, QueryCharts)> {
    let dir = dir.as_ref();
    let corpus = crate::tabular::load_corpus_dir(dir.join("corpus"))?;
    let manifest = BenchmarkManifest::load(dir.join("manifest.json"))?;
    let charts = manifest
        .queries
        .iter()
        .map(|q| Ok((q.id.clone(), load_query_dir(dir.join("queries").join(&q.id))?.0)))
        .collect::<Result<Vec<_>>>()?;
    Ok((corpus, manifest, charts))
}

/// Training material drawn from the same generator as the benchmark but
/// with its own tables: every table of a fresh perturbed corpus plus
/// reversed, partitioned and downsampled variants, each paired with a chart
/// of its own columns.
pub fn training_set(
    cfg: &BenchConfig,
    charts_per_table: usize,
    seed: u64,
) -> Result<(Vec<Dataset>, Vec<TrainTriplet>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = perturbed_corpus(&mut rng, "train", cfg)?;
    let mut corpus = Vec::with_capacity(base.len() * 2);
    for t in &base {
        corpus.push(t.clone());
        if t.id().contains("#p") {
            continue;
        }
        let variant = match rng.random_range(0..3) {
            0 => t
                .columns()
                .iter()
                .map(|c| Ok(augment_reverse(c)))
                .collect::<Result<Vec<_>>>()?,
            1 => {
                let keep_first = rng.random_bool(0.5);
                t.columns()
                    .iter()
                    .map(|c| {
                        let (a, b) = augment_partition(c, &mut rng)?;
                        Ok(if keep_first { a } else { b })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            _ => t
                .columns()
                .iter()
                .map(|c| augment_downsample(c, 2))
                .collect::<Result<Vec<_>>>()?,
        };
        // partitions cut columns at different points; trim to a common length
        let n = variant.iter().map(Column::len).min().unwrap_or(0);
        if n >= 20 {
            let cols = variant
                .iter()
                .map(|c| c.with_values(c.values()[..n].to_vec()))
                .collect::<Result<Vec<_>>>()?;
            corpus.push(Dataset::new(format!("{}#a", t.id()), cols)?);
        }
    }
    let mut triplets = Vec::with_capacity(corpus.len() * charts_per_table);
    for t in &corpus {
        for _ in 0..charts_per_table {
            let hi = cfg.query.lines.1.min(t.n_columns()).max(1);
            let lo = cfg.query.lines.0.clamp(1, hi);
            let m = rng.random_range(lo..=hi);
            let mut cols: Vec<usize> = (0..t.n_columns()).collect();
            cols.shuffle(&mut rng);
            cols.truncate(m);
            cols.sort_unstable();
            let agg = if cfg.query.with_da && rng.random_bool(0.5) {
                sample_agg(&mut rng, t.n_rows())?
            } else {
                AggOp::IDENTITY
            };
            let (underlying, chart) = chart_from(t, &cols, agg, cfg.query.height, cfg.query.width)?;
            triplets.push(TrainTriplet {
                chart,
                underlying,
                dataset_id: t.id().to_string(),
                label: true,
            });
        }
    }
    Ok((corpus, triplets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_well_formed() {
        let a = synth_corpus(&mut ChaCha8Rng::seed_from_u64(1), "t", 50, (30, 80), (1, 4)).unwrap();
        let b = synth_corpus(&mut ChaCha8Rng::seed_from_u64(1), "t", 50, (30, 80), (1, 4)).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<&str> = a.iter().map(|t| t.id()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 50);
        for t in &a {
            assert!((30..=80).contains(&t.n_rows()));
            assert!(t.columns().iter().all(|c| c.values().iter().all(|v| v.is_finite())));
        }
        assert!(synth_corpus(&mut ChaCha8Rng::seed_from_u64(1), "t", 1, (30, 80), (1, 4)).is_err());
    }

    #[test]
    fn perturbation_bounds_and_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = &synth_corpus(&mut rng, "t", 2, (50, 50), (2, 2)).unwrap()[0];
        let copies = perturb(t, &mut rng, 50).unwrap();
        assert_eq!(copies.len(), 50);
        assert_eq!(copies[3].id(), "t000#p3");
        for c in &copies {
            for (orig, new) in t.columns().iter().zip(c.columns()) {
                for (o, n) in orig.values().iter().zip(new.values()) {
                    assert!((n / o - 1.0).abs() <= 0.1 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn perturbation_is_unbiased() {
        let t = Dataset::new("one", vec![Column::new("y", vec![1.0; 10_000]).unwrap()]).unwrap();
        let c = &perturb(&t, &mut ChaCha8Rng::seed_from_u64(3), 1).unwrap()[0];
        let mean = c.column(0).values().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.005, "{mean}");
    }

    #[test]
    fn queries_record_their_aggregation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let corpus = synth_corpus(&mut rng, "t", 4, (100, 120), (2, 3)).unwrap();
        let srcs: Vec<&Dataset> = corpus.iter().collect();
        let mut cfg = BenchConfig::default().query;
        let plain = make_queries(&srcs, &mut rng, 6, &cfg).unwrap();
        assert!(plain.iter().all(|q| q.agg.is_identity()));
        cfg.with_da = true;
        let da = make_queries(&srcs, &mut rng, 6, &cfg).unwrap();
        assert!(da.iter().all(|q| !q.agg.is_identity()));
    }

    #[test]
    fn desk_benchmark_layout() {
        let b = generate_benchmark(&BenchConfig::default(), 7).unwrap();
        assert_eq!(b.corpus.len(), 60);
        assert_eq!(b.manifest.queries.len(), 20);
        for q in &b.manifest.queries {
            assert_eq!(q.relevant.len(), 10);
            assert!(q.relevant.windows(2).all(|w| w[0].score >= w[1].score));
            assert_eq!(q.relevant[0].id, q.source);
            let own = q
                .relevant
                .iter()
                .filter(|r| r.id.starts_with(&format!("{}#p", q.source)))
                .count();
            assert!(own >= 5, "{own} {:?}", q);
            assert!(q.relevant.iter().all(|r| b.manifest.corpus.contains(&r.id)));
        }
    }

    #[test]
    fn benchmark_round_trips_through_disk() {
        let cfg = BenchConfig {
            n_sources: 2,
            n_copies: 1,
            n_distractors: 1,
            n_queries: 3,
            k_gt: 3,
            ..Default::default()
        };
        let b = generate_benchmark(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_benchmark(dir.path(), &b).unwrap();
        assert_eq!(
            BenchmarkManifest::load(dir.path().join("manifest.json")).unwrap(),
            b.manifest
        );
        let (q, meta) = load_query_dir(dir.path().join("queries/q001")).unwrap();
        assert_eq!(meta.source, b.queries[1].source);
        assert_eq!(q.lines().len(), b.queries[1].chart.lines().len());
        assert_eq!(q.ytick_range(), b.queries[1].chart.ytick_range());
        let mut bad = b.manifest.to_json().unwrap();
        bad = bad.replacen("\"version\": 1", "\"version\": 9", 1);
        assert!(BenchmarkManifest::from_json(&bad).is_err());
    }
}
