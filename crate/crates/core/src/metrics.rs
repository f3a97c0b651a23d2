//! Ranking metrics and the evaluation report.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::bench::{BenchmarkManifest, RankedId};
use crate::error::{Error, Result};

pub const REPORT_VERSION: u32 = 1;

/// Fraction of the first `k` ranked ids that are relevant.
pub fn prec_at_k<S: AsRef<str>>(ranked: &[S], relevant: &HashSet<&str>, k: usize) -> f64 {
    assert!(k >= 1, "k must be positive");
    let hits = ranked
        .iter()
        .take(k)
        .filter(|id| relevant.contains(id.as_ref()))
        .count();
    hits as f64 / k as f64
}

/// Normalized DCG with gain taken from `truth` (oracle score, or 1 when
/// `binary`) and discount `1 / log2(rank + 1)`.
pub fn ndcg_at_k<S: AsRef<str>>(ranked: &[S], truth: &[RankedId], k: usize, binary: bool) -> f64 {
    assert!(k >= 1, "k must be positive");
    let gain_of = |score: f64| if binary { 1.0 } else { score };
    let gains: HashMap<&str, f64> = truth.iter().map(|r| (r.id.as_str(), gain_of(r.score))).collect();
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, id)| gains.get(id.as_ref()).copied().unwrap_or(0.0) * discount(i))
        .sum();
    let ideal: f64 = truth
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, r)| gain_of(r.score) * discount(i))
        .sum();
    if ideal <= 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub id: String,
    pub da: bool,
    pub lines: usize,
    pub prec: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub queries: usize,
    pub prec: f64,
    pub ndcg: f64,
}

impl Aggregate {
    fn over<'a>(it: impl Iterator<Item = &'a QueryMetrics>) -> Self {
        let (mut n, mut p, mut g) = (0usize, 0.0, 0.0);
        for q in it {
            n += 1;
            p += q.prec;
            g += q.ndcg;
        }
        if n == 0 {
            return Aggregate::default();
        }
        Aggregate {
            queries: n,
            prec: p / n as f64,
            ndcg: g / n as f64,
        }
    }
}

/// Line-count bins used for the per-M breakdown.
pub const LINE_BINS: [(&str, usize, usize); 4] = [("1", 1, 1), ("2-4", 2, 4), ("5-7", 5, 7), (">7", 8, usize::MAX)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub mode: String,
    pub k: usize,
    pub binary_gain: bool,
    pub per_query: Vec<QueryMetrics>,
    pub overall: Aggregate,
    pub da: Aggregate,
    pub non_da: Aggregate,
    pub by_lines: Vec<(String, Aggregate)>,
}

impl EvalReport {
    /// Scores `ranked[query id]` against the manifest's relevant sets.
    pub fn evaluate(
        manifest: &BenchmarkManifest,
        ranked: &BTreeMap<String, Vec<String>>,
        k: usize,
        binary_gain: bool,
        mode: &str,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be positive".into()));
        }
        let per_query = manifest
            .queries
            .iter()
            .map(|q| {
                let list = ranked
                    .get(&q.id)
                    .ok_or_else(|| Error::InvalidArgument(format!("no ranking for query {}", q.id)))?;
                let rel: HashSet<&str> = q.relevant.iter().map(|r| r.id.as_str()).collect();
                Ok(QueryMetrics {
                    id: q.id.clone(),
                    da: q.is_da(),
                    lines: q.lines,
                    prec: prec_at_k(list, &rel, k),
                    ndcg: ndcg_at_k(list, &q.relevant, k, binary_gain),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let by_lines = LINE_BINS
            .iter()
            .map(|&(name, lo, hi)| {
                let agg = Aggregate::over(per_query.iter().filter(|q| (lo..=hi).contains(&q.lines)));
                (name.to_string(), agg)
            })
            .collect();
        Ok(EvalReport {
            version: REPORT_VERSION,
            mode: mode.to_string(),
            k,
            binary_gain,
            overall: Aggregate::over(per_query.iter()),
            da: Aggregate::over(per_query.iter().filter(|q| q.da)),
            non_da: Aggregate::over(per_query.iter().filter(|q| !q.da)),
            by_lines,
            per_query,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "mode {}  k {}  gain {}\n",
            self.mode,
            self.k,
            if self.binary_gain { "binary" } else { "graded" }
        );
        s.push_str(&format!("{:<10} {:>6} {:>8} {:>8}\n", "query", "lines", "prec", "ndcg"));
        for q in &self.per_query {
            s.push_str(&format!(
                "{:<10} {:>6} {:>8.4} {:>8.4}\n",
                q.id, q.lines, q.prec, q.ndcg
            ));
        }
        let mut row = |name: &str, a: &Aggregate| {
            s.push_str(&format!(
                "{:<10} {:>6} {:>8.4} {:>8.4}\n",
                name, a.queries, a.prec, a.ndcg
            ));
        };
        row("overall", &self.overall);
        row("da", &self.da);
        row("non-da", &self.non_da);
        for (name, a) in &self.by_lines {
            row(&format!("M={name}"), a);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn truth(v: &[(&str, f64)]) -> Vec<RankedId> {
        v.iter().map(|&(id, score)| RankedId { id: id.into(), score }).collect()
    }

    #[test]
    fn precision_examples() {
        let rel: HashSet<&str> = ["A"].into();
        assert_eq!(prec_at_k(&ids(&["A", "B"]), &rel, 2), 0.5);
        let rel: HashSet<&str> = ["A", "B"].into();
        assert_eq!(prec_at_k(&ids(&["A", "B"]), &rel, 2), 1.0);
        assert_eq!(prec_at_k(&ids(&["C", "D"]), &rel, 2), 0.0);
    }

    #[test]
    fn ndcg_examples() {
        let t = truth(&[("A", 0.9), ("B", 0.4)]);
        assert!((ndcg_at_k(&ids(&["A", "B"]), &t, 2, false) - 1.0).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&ids(&["X", "Y"]), &t, 2, false), 0.0);
        let (g1, g2) = (0.9, 0.4);
        let l3 = 3f64.log2();
        let expect = (g2 + g1 / l3) / (g1 + g2 / l3);
        assert!((ndcg_at_k(&ids(&["B", "A"]), &t, 2, false) - expect).abs() < 1e-15);
        let bin = ndcg_at_k(&ids(&["B", "A"]), &t, 2, true);
        assert!((bin - 1.0).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&ids(&["A"]), &[], 2, false), 0.0);
    }

    #[test]
    fn oracle_ranking_scores_one() {
        let m = BenchmarkManifest {
            version: 1,
            seed: 0,
            k_gt: 2,
            corpus: ids(&["A", "B", "C"]),
            queries: vec![crate::bench::QueryRecord {
                id: "q0".into(),
                source: "A".into(),
                columns: vec![0],
                agg: crate::aggregation::AggOp::IDENTITY,
                lines: 1,
                relevant: truth(&[("A", 1.0), ("B", 0.5)]),
            }],
        };
        let ranked: BTreeMap<_, _> = [("q0".to_string(), ids(&["A", "B", "C"]))].into();
        let r = EvalReport::evaluate(&m, &ranked, 2, false, "linear").unwrap();
        assert_eq!((r.overall.prec, r.overall.ndcg), (1.0, 1.0));
        assert_eq!(r.by_lines[0].1.queries, 1);
        assert_eq!(r.da.queries, 0);
        assert!(r.to_text().contains("overall"));
        let again = EvalReport::evaluate(&m, &ranked, 2, false, "linear").unwrap();
        assert_eq!(r.to_json().unwrap(), again.to_json().unwrap());
    }
}
