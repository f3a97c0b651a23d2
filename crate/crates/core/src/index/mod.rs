//! Candidate pruning and query processing.
//!
//! An interval tree over `[min, sum]` column ranges and a hyperplane LSH
//! table over learned column embeddings; a query scores the datasets that
//! survive both with the learned matcher.
//!
//! File layout (little-endian):
//!
//! ```text
//! "FCMIDX1" | version u8 | seed u64 | bits u32 | dim u32 | bits*dim f64 planes
//! | n_datasets u32 | per dataset: u32 length, UTF-8 id
//! | n_buckets u32 | per bucket: code u64, n u32, n * (dataset u32, column u32)
//! | n_intervals u32 | per interval: lo f64, hi f64, dataset u32, column u32
//! ```

mod interval;
mod lsh;

pub use interval::{IntervalEntry, IntervalTree};
pub use lsh::LshTable;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chart::LineChartQuery;
use crate::error::{Error, Result};
use crate::matcher::Model;
use crate::scalar::Scalar;
use crate::tabular::{column_range, Dataset, Interval};

pub const INDEX_MAGIC: &[u8; 7] = b"FCMIDX1";
pub const INDEX_VERSION: u8 = 1;
pub const DEFAULT_LSH_BITS: usize = 16;

/// Ranked `(dataset id, score)` pairs, best first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryResult {
    pub ranked: Vec<(String, f64)>,
    /// Datasets scored by the matcher.
    pub verified: usize,
}

impl QueryResult {
    pub fn ids(&self) -> Vec<String> {
        self.ranked.iter().map(|(id, _)| id.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// Score every dataset.
    Linear,
    /// Score datasets with a column range overlapping the y ticks.
    Interval,
    /// Interval candidates that also collide in the LSH table.
    Hybrid,
}

impl QueryMode {
    pub fn name(self) -> &'static str {
        match self {
            QueryMode::Linear => "linear",
            QueryMode::Interval => "interval",
            QueryMode::Hybrid => "hybrid",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridIndex {
    seed: u64,
    ids: Vec<String>,
    tree: IntervalTree,
    lsh: LshTable,
}

/// Interval entries for every column of every dataset.
pub fn build_interval_index(corpus: &[Dataset]) -> Result<IntervalTree> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus is empty".into()));
    }
    let entries = corpus
        .iter()
        .enumerate()
        .flat_map(|(d, t)| {
            t.columns().iter().enumerate().map(move |(c, col)| IntervalEntry {
                range: column_range(col),
                dataset: d as u32,
                column: c as u32,
            })
        })
        .collect();
    Ok(IntervalTree::new(entries))
}

/// Rank `scored` by score descending then id ascending and keep `k`.
pub fn top_k(mut scored: Vec<(String, f64)>, k: usize) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

impl HybridIndex {
    /// Builds both indexes; column embeddings come from `model`'s dataset
    /// encoder with every column drawn in its own frame.
    pub fn build<T: Scalar>(corpus: &[Dataset], model: &Model<T>, bits: usize, seed: u64) -> Result<Self> {
        let tree = build_interval_index(corpus)?;
        let mut lsh = LshTable::new(model.config().embed_dim, bits, seed)?;
        let enc = model.dataset_encoder();
        let embedded = corpus
            .par_iter()
            .map(|t| {
                t.columns()
                    .iter()
                    .map(|c| enc.column_embedding(model.store(), c))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for (d, cols) in embedded.iter().enumerate() {
            for (c, e) in cols.iter().enumerate() {
                lsh.insert(e, d as u32, c as u32)?;
            }
        }
        Ok(HybridIndex {
            seed,
            ids: corpus.iter().map(|t| t.id().to_string()).collect(),
            tree,
            lsh,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn tree(&self) -> &IntervalTree {
        &self.tree
    }

    pub fn lsh(&self) -> &LshTable {
        &self.lsh
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Dataset positions with a column range overlapping `yrange`.
    pub fn interval_candidates(&self, yrange: Interval) -> BTreeSet<u32> {
        self.tree.overlapping(yrange).iter().map(|e| e.dataset).collect()
    }

    /// Dataset positions colliding with any line of the chart.
    pub fn lsh_candidates<T: Scalar>(
        &self,
        model: &Model<T>,
        chart: &crate::tensor::Tensor<T>,
    ) -> Result<BTreeSet<u32>> {
        let n1 = model.config().line_segments();
        let k = model.config().embed_dim;
        let mut out = BTreeSet::new();
        for line in 0..chart.rows() / n1 {
            let mut mean = vec![T::zero(); k];
            for j in 0..n1 {
                for (m, v) in mean.iter_mut().zip(chart.row(line * n1 + j)) {
                    *m += *v;
                }
            }
            let mean: Vec<T> = mean.into_iter().map(|v| v / T::lit(n1 as f64)).collect();
            out.extend(self.lsh.colliding(self.lsh.code(&mean)?));
        }
        Ok(out)
    }

    /// Candidate dataset positions under `mode`.
    pub fn candidates<T: Scalar>(
        &self,
        model: &Model<T>,
        q: &LineChartQuery,
        chart: &crate::tensor::Tensor<T>,
        mode: QueryMode,
    ) -> Result<Vec<u32>> {
        Ok(match mode {
            QueryMode::Linear => (0..self.ids.len() as u32).collect(),
            QueryMode::Interval => self.interval_candidates(q.ytick_range()).into_iter().collect(),
            QueryMode::Hybrid => {
                let s1 = self.interval_candidates(q.ytick_range());
                let s2 = self.lsh_candidates(model, chart)?;
                s1.intersection(&s2).copied().collect()
            }
        })
    }

    /// Top-`k` datasets of `corpus` (the corpus the index was built from)
    /// for chart `q`. In linear mode datasets without an overlapping column
    /// score 0.
    pub fn query<T: Scalar>(
        &self,
        model: &Model<T>,
        corpus: &[Dataset],
        q: &LineChartQuery,
        k: usize,
        mode: QueryMode,
    ) -> Result<QueryResult> {
        if corpus.len() != self.ids.len() || corpus.iter().zip(&self.ids).any(|(t, id)| t.id() != id) {
            return Err(Error::InvalidArgument("corpus does not match the index".into()));
        }
        let chart = model.encode_chart(q)?;
        let cands = self.candidates(model, q, &chart, mode)?;
        let scored = cands
            .par_iter()
            .map(|&d| {
                let t = &corpus[d as usize];
                let s = match model.candidate_columns(q, t)? {
                    Some(f) => model.score_encoded(&chart, q, &f)?.value(),
                    None => 0.0,
                };
                Ok((t.id().to_string(), s))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QueryResult {
            verified: scored.len(),
            ranked: top_k(scored, k),
        })
    }

    /// Ranked ids for every `(query id, chart)`, keeping `k` per query.
    pub fn rank_all<T: Scalar>(
        &self,
        model: &Model<T>,
        corpus: &[Dataset],
        charts: &[(String, LineChartQuery)],
        k: usize,
        mode: QueryMode,
    ) -> Result<BTreeMap<String, QueryResult>> {
        charts
            .iter()
            .map(|(id, q)| Ok((id.clone(), self.query(model, corpus, q, k, mode)?)))
            .collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&[INDEX_VERSION])?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.lsh.bits() as u32).to_le_bytes())?;
        w.write_all(&(self.lsh.dim() as u32).to_le_bytes())?;
        for p in self.lsh.planes() {
            for v in p {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&(self.ids.len() as u32).to_le_bytes())?;
        for id in &self.ids {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        w.write_all(&(self.lsh.buckets().len() as u32).to_le_bytes())?;
        for (code, set) in self.lsh.buckets() {
            w.write_all(&code.to_le_bytes())?;
            w.write_all(&(set.len() as u32).to_le_bytes())?;
            for (d, c) in set {
                w.write_all(&d.to_le_bytes())?;
                w.write_all(&c.to_le_bytes())?;
            }
        }
        w.write_all(&(self.tree.len() as u32).to_le_bytes())?;
        for e in self.tree.entries() {
            w.write_all(&e.range.lo.to_le_bytes())?;
            w.write_all(&e.range.hi.to_le_bytes())?;
            w.write_all(&e.dataset.to_le_bytes())?;
            w.write_all(&e.column.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 7];
        read_exact(&mut r, &mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Format("not an index file".into()));
        }
        let version = read_array::<1, _>(&mut r)?[0];
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let seed = u64::from_le_bytes(read_array(&mut r)?);
        let bits = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        if bits > 64 || dim > 1 << 16 {
            return Err(Error::Format(format!("implausible LSH shape {bits}x{dim}")));
        }
        let planes = (0..bits)
            .map(|_| (0..dim).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let n = read_u32(&mut r)? as usize;
        let mut ids = Vec::new();
        for _ in 0..n {
            let len = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; len.min(1 << 20)];
            read_exact(&mut r, &mut buf)?;
            ids.push(String::from_utf8(buf).map_err(|_| Error::Format("dataset id is not UTF-8".into()))?);
        }
        let check = |d: u32| {
            if (d as usize) < ids.len() {
                Ok(d)
            } else {
                Err(Error::Format(format!("dataset index {d} out of range")))
            }
        };
        let mut buckets = BTreeMap::new();
        for _ in 0..read_u32(&mut r)? {
            let code = u64::from_le_bytes(read_array(&mut r)?);
            let mut set = BTreeSet::new();
            for _ in 0..read_u32(&mut r)? {
                let d = check(read_u32(&mut r)?)?;
                set.insert((d, read_u32(&mut r)?));
            }
            buckets.insert(code, set);
        }
        let mut entries = Vec::new();
        for _ in 0..read_u32(&mut r)? {
            let lo = read_f64(&mut r)?;
            let hi = read_f64(&mut r)?;
            let dataset = check(read_u32(&mut r)?)?;
            let column = read_u32(&mut r)?;
            entries.push(IntervalEntry {
                range: Interval::new(lo, hi).map_err(|_| Error::Format("inverted interval".into()))?,
                dataset,
                column,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io("index", e))? != 0 {
            return Err(Error::Format("trailing bytes after index".into()));
        }
        Ok(HybridIndex {
            seed,
            ids,
            tree: IntervalTree::new(entries),
            lsh: LshTable::from_parts(planes, buckets)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read(bytes.as_slice())
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated index file".into()))
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(r)?))
}
