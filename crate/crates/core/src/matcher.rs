//! Cross-modal matcher and the full chart/table scoring model.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chart::LineChartQuery;
use crate::encoder::{ChartEncoder, DatasetEncoder, EncodedChart, EncodedDataset, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::scalar::Scalar;
use crate::tabular::{filter_columns, Dataset};
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, ParamId, ParamStore, Tensor, Var};

/// Learned relevance in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct MatchScore(pub f64);

impl MatchScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Query, key and value projections for one modality.
#[derive(Debug, Clone, Copy)]
struct Projections {
    q: ParamId,
    k: ParamId,
    v: ParamId,
}

impl Projections {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Projections {
            q: store.add_xavier(format!("{name}.q"), dim, dim, rng)?,
            k: store.add_xavier(format!("{name}.k"), dim, dim, rng)?,
            v: store.add_xavier(format!("{name}.v"), dim, dim, rng)?,
        })
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<[Var; 3]> {
        let (wq, wk, wv) = (g.param(s, self.q), g.param(s, self.k), g.param(s, self.v));
        Ok([g.matmul(x, wq)?, g.matmul(x, wk)?, g.matmul(x, wv)?])
    }
}

/// Every attention distribution and the output of one matcher pass.
#[derive(Debug, Clone)]
pub struct MatchTrace {
    /// Segment weights over a line's N1 segments, one `[1, N1]` per (line, column).
    pub line_segment_weights: Vec<Var>,
    /// Segment weights over a column's N2 segments, one `[1, N2]` per (column, line).
    pub column_segment_weights: Vec<Var>,
    /// `[1, M]` weights over lines.
    pub line_weights: Var,
    /// `[1, N_C]` weights over columns.
    pub column_weights: Var,
    /// `[1, 1]` probability.
    pub score: Var,
}

/// Segment-level then line-level cross attention followed by an MLP head.
#[derive(Debug, Clone)]
pub struct Hcman {
    dim: usize,
    seg_chart: Projections,
    seg_data: Projections,
    line_chart: Projections,
    line_data: Projections,
    hidden: Linear,
    out: Linear,
}

fn weighted_sum<T: Scalar>(g: &mut Graph<T>, scores: Var, values: Var) -> Result<(Var, Var)> {
    let m = g.row_max(scores);
    let m = g.transpose(m);
    let w = g.softmax(m);
    Ok((g.matmul(w, values)?, w))
}

fn stack_rows<T: Scalar>(g: &mut Graph<T>, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat_rows(parts)
    }
}

fn block<T: Scalar>(g: &mut Graph<T>, x: Var, rows: (usize, usize), cols: (usize, usize)) -> Result<Var> {
    let (r, c) = g.shape(x);
    let x = if rows == (0, r) {
        x
    } else {
        g.slice_rows(x, rows.0, rows.1)?
    };
    if cols == (0, c) {
        Ok(x)
    } else {
        g.slice_cols(x, cols.0, cols.1)
    }
}

impl Hcman {
    pub fn new<T: Scalar, R: Rng + ?Sized>(dim: usize, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        Ok(Hcman {
            dim,
            seg_chart: Projections::new(store, "match.seg.chart", dim, rng)?,
            seg_data: Projections::new(store, "match.seg.data", dim, rng)?,
            line_chart: Projections::new(store, "match.line.chart", dim, rng)?,
            line_data: Projections::new(store, "match.line.data", dim, rng)?,
            hidden: Linear::new(store, "match.head.l1", 2 * dim, dim, rng)?,
            out: Linear::zeroed(store, "match.head.l2", dim, 1)?,
        })
    }

    /// Segment-level stage. Returns line representations `[M, K]`, column
    /// representations `[N_C, K]` and the segment weights.
    #[allow(clippy::type_complexity)]
    pub fn sl_san<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        v: &EncodedChart,
        t: &EncodedDataset,
    ) -> Result<(Var, Var, Vec<Var>, Vec<Var>)> {
        let scale = T::one() / T::lit(self.dim as f64).sqrt();
        let [qv, kv, vv] = self.seg_chart.apply(g, s, v.var)?;
        let [qt, kt, vt] = self.seg_data.apply(g, s, t.var)?;
        let a = g.matmul_t(qv, kt)?;
        let a = g.scale(a, scale);
        let b = g.matmul_t(qt, kv)?;
        let b = g.scale(b, scale);
        let (n1, n2) = (v.segments, t.segments);

        let mut line_w = Vec::with_capacity(v.lines * t.columns);
        let mut lines = Vec::with_capacity(v.lines);
        for i in 0..v.lines {
            let values = block(g, vv, (i * n1, n1), (0, self.dim))?;
            let mut recon = Vec::with_capacity(t.columns);
            for m in 0..t.columns {
                let am = block(g, a, (i * n1, n1), (m * n2, n2))?;
                let (r, w) = weighted_sum(g, am, values)?;
                recon.push(r);
                line_w.push(w);
            }
            let stacked = stack_rows(g, &recon)?;
            lines.push(g.mean_rows(stacked));
        }

        let mut col_w = Vec::with_capacity(v.lines * t.columns);
        let mut cols = Vec::with_capacity(t.columns);
        for m in 0..t.columns {
            let values = block(g, vt, (m * n2, n2), (0, self.dim))?;
            let mut recon = Vec::with_capacity(v.lines);
            for i in 0..v.lines {
                let bm = block(g, b, (m * n2, n2), (i * n1, n1))?;
                let (r, w) = weighted_sum(g, bm, values)?;
                recon.push(r);
                col_w.push(w);
            }
            let stacked = stack_rows(g, &recon)?;
            cols.push(g.mean_rows(stacked));
        }
        let lines = stack_rows(g, &lines)?;
        let cols = stack_rows(g, &cols)?;
        Ok((lines, cols, line_w, col_w))
    }

    /// Line-to-column stage: `(E'_V, E'_T, line weights, column weights)`.
    pub fn ll_san<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        lines: Var,
        cols: Var,
    ) -> Result<(Var, Var, Var, Var)> {
        let scale = T::one() / T::lit(self.dim as f64).sqrt();
        let [ql, kl, vl] = self.line_chart.apply(g, s, lines)?;
        let [qc, kc, vc] = self.line_data.apply(g, s, cols)?;
        let sv = g.matmul_t(ql, kc)?;
        let sv = g.scale(sv, scale);
        let st = g.matmul_t(qc, kl)?;
        let st = g.scale(st, scale);
        let (ev, wv) = weighted_sum(g, sv, vl)?;
        let (et, wt) = weighted_sum(g, st, vc)?;
        Ok((ev, et, wv, wt))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        v: &EncodedChart,
        t: &EncodedDataset,
    ) -> Result<MatchTrace> {
        let (lines, cols, lw, cw) = self.sl_san(g, s, v, t)?;
        let (ev, et, wv, wt) = self.ll_san(g, s, lines, cols)?;
        let x = g.concat_cols(&[ev, et])?;
        let h = self.hidden.forward(g, s, x)?;
        let h = g.relu(h);
        let logit = self.out.forward(g, s, h)?;
        let score = g.sigmoid(logit);
        Ok(MatchTrace {
            line_segment_weights: lw,
            column_segment_weights: cw,
            line_weights: wv,
            column_weights: wt,
            score,
        })
    }

    /// Final-layer parameters of the head, zero at initialization.
    pub fn output_layer(&self) -> Linear {
        self.out
    }
}

/// Class-balanced binary cross-entropy over `[n, 1]` probabilities.
pub fn bce_loss<T: Scalar>(g: &mut Graph<T>, scores: Var, labels: &[bool]) -> Result<Var> {
    let (n, c) = g.shape(scores);
    if c != 1 || n != labels.len() || n == 0 {
        return Err(Error::Shape(format!("{n}x{c} scores for {} labels", labels.len())));
    }
    let eps = T::lit(1e-12);
    let p = g.clamp(scores, eps, T::one() - eps);
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = n - n_pos;
    // per-row coefficients select log p or log(1 - p) and carry the class averaging
    let coef = |on: bool, count: usize| {
        if on {
            -T::one() / T::lit(count as f64)
        } else {
            T::zero()
        }
    };
    let pos_c: Vec<T> = labels.iter().map(|&l| coef(l, n_pos)).collect();
    let neg_c: Vec<T> = labels.iter().map(|&l| coef(!l, n_neg)).collect();
    let lp = g.log(p)?;
    let q = g.scale(p, -T::one());
    let q = g.add_scalar(q, T::one());
    let lq = g.log(q)?;
    let pc = g.constant(n, 1, pos_c);
    let nc = g.constant(n, 1, neg_c);
    let a = g.mul(lp, pc)?;
    let b = g.mul(lq, nc)?;
    let total = g.add(a, b)?;
    Ok(g.sum(total))
}

/// Encoders, matcher and their parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    cfg: EncoderConfig,
    store: ParamStore<T>,
    chart: ChartEncoder,
    data: DatasetEncoder,
    matcher: Hcman,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let chart = ChartEncoder::new(cfg, &mut store, &mut rng)?;
        let data = DatasetEncoder::new(cfg, &mut store, &mut rng)?;
        let matcher = Hcman::new(cfg.embed_dim, &mut store, &mut rng)?;
        Ok(Model {
            cfg: cfg.clone(),
            store,
            chart,
            data,
            matcher,
        })
    }

    /// Rebuilds the architecture for `cfg` and takes parameter values from
    /// `params`; every name and shape must agree.
    pub fn with_params(cfg: &EncoderConfig, params: &ParamStore<T>) -> Result<Self> {
        let mut m = Model::new(cfg, 0)?;
        m.store.load_from(params)?;
        Ok(m)
    }

    pub fn load(cfg: &EncoderConfig, path: impl AsRef<Path>) -> Result<Self> {
        Model::with_params(cfg, &load_checkpoint(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.store)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn chart_encoder(&self) -> &ChartEncoder {
        &self.chart
    }

    pub fn dataset_encoder(&self) -> &DatasetEncoder {
        &self.data
    }

    pub fn matcher(&self) -> &Hcman {
        &self.matcher
    }

    /// Columns of `t` whose range overlaps the chart's y ticks, or `None`
    /// when nothing survives.
    pub fn candidate_columns(&self, q: &LineChartQuery, t: &Dataset) -> Result<Option<Dataset>> {
        let keep = filter_columns(t, q.ytick_range());
        if keep.is_empty() {
            return Ok(None);
        }
        if keep.len() == t.n_columns() {
            return Ok(Some(t.clone()));
        }
        t.select(&keep).map(Some)
    }

    /// Full forward pass on `g`; `t` is used as given (no column filtering).
    pub fn forward(&self, g: &mut Graph<T>, q: &LineChartQuery, t: &Dataset) -> Result<MatchTrace> {
        let v = self.chart.forward(g, &self.store, q)?;
        let e = self.data.forward(g, &self.store, t, q.frame())?;
        self.matcher.forward(g, &self.store, &v, &e)
    }

    /// Chart encoding as a reusable tensor `[M * N1, K]`.
    pub fn encode_chart(&self, q: &LineChartQuery) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = self.chart.forward(&mut g, &self.store, q)?;
        Ok(g.value(v.var).clone())
    }

    /// Scores `t` against a chart encoded by [`Model::encode_chart`].
    pub fn score_encoded(&self, chart: &Tensor<T>, q: &LineChartQuery, t: &Dataset) -> Result<MatchScore> {
        let mut g = Graph::new();
        let n1 = self.cfg.line_segments();
        let v = EncodedChart {
            var: g.input(chart.clone()),
            lines: chart.rows() / n1,
            segments: n1,
        };
        let e = self.data.forward(&mut g, &self.store, t, q.frame())?;
        let tr = self.matcher.forward(&mut g, &self.store, &v, &e)?;
        Ok(MatchScore(g.scalar(tr.score).as_f64()))
    }

    /// Rel'(V, T) after column filtering; `None` when no column overlaps.
    pub fn score(&self, q: &LineChartQuery, t: &Dataset) -> Result<Option<MatchScore>> {
        let Some(t) = self.candidate_columns(q, t)? else {
            return Ok(None);
        };
        let chart = self.encode_chart(q)?;
        self.score_encoded(&chart, q, &t).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart::rasterize;
    use crate::tabular::{Column, DataSeries, UnderlyingData};

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 8,
            depth: 1,
            heads: 2,
            line_segment_width: 16,
            column_segment_len: 8,
            hmrl_depth: 1,
            height: 16,
            width: 32,
            max_column_segments: 4,
            ..Default::default()
        }
    }

    fn chart(lines: &[Vec<f64>], cfg: &EncoderConfig) -> LineChartQuery {
        let d = UnderlyingData::new(lines.iter().map(|l| DataSeries::new(l.clone()).unwrap()).collect()).unwrap();
        rasterize(&d, cfg.height, cfg.width).unwrap()
    }

    fn table(cols: &[Vec<f64>]) -> Dataset {
        Dataset::new(
            "t",
            cols.iter()
                .enumerate()
                .map(|(i, c)| Column::new(format!("c{i}"), c.clone()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn randomize_head(m: &mut Model<f64>) {
        let out = m.matcher().output_layer();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in m.store_mut().value_mut(out.w).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }

    #[test]
    fn zero_head_scores_half() {
        let cfg = small_cfg();
        let m = Model::<f64>::new(&cfg, 1).unwrap();
        let q = chart(&[vec![1.0, 2.0, 3.0, 2.0]], &cfg);
        let t = table(&[(0..20).map(|i| i as f64 * 0.2).collect()]);
        assert_eq!(m.score(&q, &t).unwrap().unwrap().value(), 0.5);
    }

    #[test]
    fn attention_weights_are_distributions_and_score_is_permutation_invariant() {
        let cfg = small_cfg();
        let mut m = Model::<f64>::new(&cfg, 2).unwrap();
        randomize_head(&mut m);
        let l1 = vec![1.0, 3.0, 2.0, 4.0, 3.5];
        let l2 = vec![2.0, 0.5, 1.0, 1.5, 4.0];
        let c1: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).sin() * 2.0 + 2.0).collect();
        let c2: Vec<f64> = (0..20).map(|i| i as f64 * 0.2).collect();
        let c3: Vec<f64> = (0..20).map(|i| 4.0 - i as f64 * 0.1).collect();
        let q = chart(&[l1.clone(), l2.clone()], &cfg);
        let t = table(&[c1.clone(), c2.clone(), c3.clone()]);

        let mut g = Graph::new();
        let tr = m.forward(&mut g, &q, &t).unwrap();
        let all = tr
            .line_segment_weights
            .iter()
            .chain(&tr.column_segment_weights)
            .chain([&tr.line_weights, &tr.column_weights]);
        for &w in all {
            let sum: f64 = g.value(w).data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert_eq!(tr.line_segment_weights.len(), 6);
        let base = g.scalar(tr.score);
        assert!(base > 0.0 && base < 1.0);

        // the y-tick frame is a property of the chart, so line order leaves it unchanged
        let qp = chart(&[l2, l1], &cfg);
        let tp = table(&[c3, c1, c2]);
        let mut g = Graph::new();
        let tr = m.forward(&mut g, &qp, &tp).unwrap();
        assert!((g.scalar(tr.score) - base).abs() < 1e-9);
    }

    #[test]
    fn single_segment_reconstruction_is_value_projection() {
        let cfg = EncoderConfig {
            line_segment_width: 32,
            ..small_cfg()
        };
        let m = Model::<f64>::new(&cfg, 5).unwrap();
        let q = chart(&[vec![1.0, 2.0]], &cfg);
        let t = table(&[vec![1.0, 2.0, 1.5]]);
        let mut g = Graph::new();
        let s = m.store();
        let v = m.chart_encoder().forward(&mut g, s, &q).unwrap();
        let e = m.dataset_encoder().forward(&mut g, s, &t, q.frame()).unwrap();
        let (lines, _, lw, _) = m.matcher().sl_san(&mut g, s, &v, &e).unwrap();
        assert_eq!(g.value(lw[0]).data(), &[1.0]);
        let wv = g.param(s, m.matcher().seg_chart.v);
        let expect = g.matmul(v.var, wv).unwrap();
        assert_eq!(g.value(lines), g.value(expect));
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(2, 1, vec![0.5, 0.5]);
        let l = bce_loss(&mut g, p, &[true, false]).unwrap();
        assert!((g.scalar(l) - 2.0 * 2f64.ln()).abs() < 1e-12);
        let l = bce_loss(&mut g, p, &[true, true]).unwrap();
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-12);
        let p = g.constant(1, 1, vec![1.0]);
        let l = bce_loss(&mut g, p, &[true]).unwrap();
        assert!(g.scalar(l) < 1e-11);
        let p = g.constant(1, 1, vec![0.0]);
        let l = bce_loss(&mut g, p, &[true]).unwrap();
        assert!((g.scalar(l) - -(1e-12f64).ln()).abs() < 1e-9);
        assert!(bce_loss(&mut g, p, &[true, false]).is_err());
    }

    #[test]
    fn disjoint_ytick_range_has_no_score() {
        let cfg = small_cfg();
        let m = Model::<f64>::new(&cfg, 1).unwrap();
        let q = chart(&[vec![-10.0, -9.0, -8.0]], &cfg);
        let t = table(&[vec![10.0, 11.0, 12.0]]);
        assert!(m.score(&q, &t).unwrap().is_none());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small_cfg();
        let mut m = Model::<f64>::new(&cfg, 9).unwrap();
        randomize_head(&mut m);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        m.save(&path).unwrap();
        let r = Model::<f64>::load(&cfg, &path).unwrap();
        let q = chart(&[vec![1.0, 2.0, 0.5]], &cfg);
        let t = table(&[vec![1.0, 2.0, 1.5, 0.2]]);
        assert_eq!(m.score(&q, &t).unwrap(), r.score(&q, &t).unwrap());
        let other = EncoderConfig { embed_dim: 16, ..cfg };
        assert!(Model::<f64>::load(&other, &path).is_err());
    }
}
