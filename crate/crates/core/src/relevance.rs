//! Ground-truth relevance between a chart's underlying data and a table.
//!
//! Series-to-column relevance is `1 / (1 + dtw)` with an unconstrained,
//! L1-cost DTW. Table relevance is the maximum-weight bipartite matching of
//! series to columns over those scores, solved with the Hungarian method.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tabular::{Column, DataSeries, Dataset, UnderlyingData};

/// Full O(nm) dynamic time warping distance with `|a_i - b_j|` step cost.
pub fn dtw_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("dtw input sequence is empty".into()));
    }
    let m = b.len();
    let inf = T::infinity();
    let mut prev = vec![inf; m + 1];
    let mut cur = vec![inf; m + 1];
    prev[0] = T::zero();
    for &x in a {
        cur[0] = inf;
        for j in 1..=m {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = (x - b[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Relevance score in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct RelevanceScore(pub f64);

impl RelevanceScore {
    pub fn from_distance(dist: f64) -> Self {
        RelevanceScore(1.0 / (1.0 + dist))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn series_relevance(d: &DataSeries, c: &Column) -> Result<RelevanceScore> {
    Ok(RelevanceScore::from_distance(dtw_distance(d.y(), c.values())?))
}

/// A matching between series (rows) and columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult<T = f64> {
    /// `(series index, column index)`, sorted by series index.
    pub pairs: Vec<(usize, usize)>,
    pub total: T,
}

fn check_matrix<T>(weights: &[Vec<T>]) -> Result<(usize, usize)> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(Error::Empty("weight matrix is empty".into()));
    }
    if weights.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("weight matrix rows differ in length".into()));
    }
    Ok((rows, cols))
}

/// Maximum-weight bipartite matching via the Hungarian method on the
/// zero-padded square matrix. Ties resolve toward the lowest column index.
pub fn max_weight_matching<T: Scalar>(weights: &[Vec<T>]) -> Result<MatchResult<T>> {
    let (rows, cols) = check_matrix(weights)?;
    let n = rows.max(cols);
    let w = |i: usize, j: usize| {
        if i < rows && j < cols {
            weights[i][j]
        } else {
            T::zero()
        }
    };
    let wmax = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .map(|(i, j)| w(i, j))
        .fold(T::zero(), T::max);
    // Minimum-cost assignment on cost = wmax - w, 1-based potentials.
    let cost = |i: usize, j: usize| wmax - w(i - 1, j - 1);
    let inf = T::infinity();
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| p[j] != 0 && p[j] <= rows && j <= cols)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().fold(T::zero(), |acc, &(i, j)| acc + weights[i][j]);
    Ok(MatchResult { pairs, total })
}

/// Exhaustive maximum over all injective assignments of the smaller side.
/// Test oracle; refuses instances whose smaller side exceeds 8.
pub fn brute_force_matching<T: Scalar>(weights: &[Vec<T>]) -> Result<MatchResult<T>> {
    let (rows, cols) = check_matrix(weights)?;
    if rows.min(cols) > 8 {
        return Err(Error::InvalidArgument(format!(
            "brute-force matching limited to min side 8, got {rows}x{cols}"
        )));
    }
    let transpose = rows > cols;
    let (small, large) = if transpose { (cols, rows) } else { (rows, cols) };
    let at = |s: usize, l: usize| {
        if transpose {
            weights[l][s]
        } else {
            weights[s][l]
        }
    };

    struct Search<'a, T> {
        small: usize,
        large: usize,
        at: &'a dyn Fn(usize, usize) -> T,
        used: Vec<bool>,
        cur: Vec<usize>,
        best: Option<(T, Vec<usize>)>,
    }

    impl<T: Scalar> Search<'_, T> {
        fn go(&mut self, s: usize, acc: T) {
            if s == self.small {
                if self.best.as_ref().is_none_or(|(b, _)| acc > *b) {
                    self.best = Some((acc, self.cur.clone()));
                }
                return;
            }
            for l in 0..self.large {
                if !self.used[l] {
                    self.used[l] = true;
                    self.cur.push(l);
                    let w = (self.at)(s, l);
                    self.go(s + 1, acc + w);
                    self.cur.pop();
                    self.used[l] = false;
                }
            }
        }
    }

    let mut search = Search {
        small,
        large,
        at: &at,
        used: vec![false; large],
        cur: Vec::with_capacity(small),
        best: None,
    };
    search.go(0, T::zero());
    let (total, assign) = search.best.expect("non-empty search space");
    let mut pairs: Vec<(usize, usize)> = assign
        .into_iter()
        .enumerate()
        .map(|(s, l)| if transpose { (l, s) } else { (s, l) })
        .collect();
    pairs.sort_unstable();
    Ok(MatchResult { pairs, total })
}

/// `M x N_C` matrix of series-to-column relevance scores.
pub fn relevance_matrix(d: &UnderlyingData, t: &Dataset) -> Result<Vec<Vec<f64>>> {
    d.series()
        .iter()
        .map(|s| {
            t.columns()
                .iter()
                .map(|c| series_relevance(s, c).map(RelevanceScore::value))
                .collect()
        })
        .collect()
}

/// Rel(D, T): total of the maximum-weight series-to-column matching.
pub fn dataset_relevance(d: &UnderlyingData, t: &Dataset) -> Result<MatchResult> {
    max_weight_matching(&relevance_matrix(d, t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dtw_examples() {
        assert_eq!(dtw_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(dtw_distance(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(dtw_distance(&[1.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(dtw_distance(&[1.0f32, 1.0, 2.0], &[1.0, 2.0, 2.0]).unwrap(), 0.0);
        assert!(dtw_distance::<f64>(&[], &[1.0]).is_err());
    }

    #[test]
    fn relevance_formula() {
        let d = DataSeries::new(vec![1.0, 2.0]).unwrap();
        let same = Column::new("c", vec![1.0, 2.0]).unwrap();
        assert_eq!(series_relevance(&d, &same).unwrap().value(), 1.0);
        assert_eq!(RelevanceScore::from_distance(1.0).value(), 0.5);
        assert_eq!(RelevanceScore::from_distance(3.0).value(), 0.25);
    }

    #[test]
    fn matching_examples() {
        let r = max_weight_matching(&[vec![1.0f64, 0.2], vec![0.3, 0.9]]).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert!((r.total - 1.9).abs() < 1e-12);
        let r = max_weight_matching(&[vec![0.6f64, 0.7], vec![0.6, 0.7]]).unwrap();
        assert!((r.total - 1.3).abs() < 1e-12);
        assert_eq!(r.pairs.len(), 2);
        let r = max_weight_matching(&[vec![0.4]]).unwrap();
        assert_eq!((r.pairs, r.total), (vec![(0, 0)], 0.4));
        assert_eq!(brute_force_matching(&[vec![0.4]]).unwrap().total, 0.4);
    }

    #[test]
    fn rectangular_cardinality() {
        let wide = vec![vec![0.1, 0.5, 0.2, 0.9]];
        let r = max_weight_matching(&wide).unwrap();
        assert_eq!(r.pairs, vec![(0, 3)]);
        let tall = vec![vec![0.1], vec![0.5], vec![0.3]];
        let r = max_weight_matching(&tall).unwrap();
        assert_eq!(r.pairs, vec![(1, 0)]);
    }

    #[test]
    fn brute_force_guard() {
        let big = vec![vec![0.0; 9]; 9];
        assert!(brute_force_matching(&big).is_err());
        assert!(max_weight_matching::<f64>(&[]).is_err());
    }

    #[test]
    fn single_edge_dataset_relevance() {
        let d = UnderlyingData::new(vec![DataSeries::new(vec![1.0, 4.0]).unwrap()]).unwrap();
        let c = Column::new("c", vec![1.0, 2.0, 4.0]).unwrap();
        let t = Dataset::new("t", vec![c.clone()]).unwrap();
        let r = dataset_relevance(&d, &t).unwrap();
        assert_eq!(r.total, series_relevance(&d.series()[0], &c).unwrap().value());
    }

    fn matrix(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1..=max, 1..=max)
            .prop_flat_map(|(r, c)| proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, c), r))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn hungarian_equals_brute_force(w in matrix(6)) {
            let h = max_weight_matching(&w).unwrap();
            let b = brute_force_matching(&w).unwrap();
            prop_assert!((h.total - b.total).abs() < 1e-9);
            prop_assert_eq!(h.pairs.len(), w.len().min(w[0].len()));
            let mut rows: Vec<_> = h.pairs.iter().map(|p| p.0).collect();
            let mut cols: Vec<_> = h.pairs.iter().map(|p| p.1).collect();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            prop_assert_eq!(rows.len(), h.pairs.len());
            prop_assert_eq!(cols.len(), h.pairs.len());
        }

        #[test]
        fn dtw_symmetry_and_diagonal_bound(
            a in proptest::collection::vec(-10.0f64..10.0, 1..12),
            b in proptest::collection::vec(-10.0f64..10.0, 1..12),
        ) {
            let ab = dtw_distance(&a, &b).unwrap();
            prop_assert_eq!(ab, dtw_distance(&b, &a).unwrap());
            prop_assert_eq!(dtw_distance(&a, &a).unwrap(), 0.0);
            let n = a.len().min(b.len());
            let diag: f64 = a[..n].iter().zip(&b[..n]).map(|(x, y)| (x - y).abs()).sum();
            prop_assert!(dtw_distance(&a[..n], &b[..n]).unwrap() <= diag + 1e-12);
        }

        #[test]
        fn matching_is_permutation_invariant_and_monotone(
            w in matrix(5),
            extra in proptest::collection::vec(0.0f64..1.0, 5),
        ) {
            let base = max_weight_matching(&w).unwrap().total;
            let rev_rows: Vec<Vec<f64>> = w.iter().rev().cloned().collect();
            let rev_cols: Vec<Vec<f64>> =
                w.iter().map(|r| r.iter().rev().copied().collect()).collect();
            prop_assert!((max_weight_matching(&rev_rows).unwrap().total - base).abs() < 1e-12);
            prop_assert!((max_weight_matching(&rev_cols).unwrap().total - base).abs() < 1e-12);
            let grown: Vec<Vec<f64>> = w
                .iter()
                .zip(&extra)
                .map(|(r, &e)| r.iter().copied().chain([e]).collect())
                .collect();
            prop_assert!(max_weight_matching(&grown).unwrap().total >= base - 1e-12);
        }
    }
}
