use rand::Rng;

use super::{DatasetEmbedding, EncoderConfig};
use crate::aggregation::AggKind;
use crate::chart::{plot_frame, tick_range};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, TransformerBlock, LEAKY_SLOPE};
use crate::scalar::Scalar;
use crate::tabular::{Column, Dataset, Interval};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Bounds applied to frame-normalized values.
pub const FRAME_CLAMP: (f64, f64) = (-1.0, 2.0);

/// Maps a value into the chart's drawing frame (`0` = bottom edge, `1` = top
/// edge), clamped to [`FRAME_CLAMP`].
pub fn frame_normalize(v: f64, frame: Interval) -> f64 {
    ((v - frame.lo) / (frame.hi - frame.lo)).clamp(FRAME_CLAMP.0, FRAME_CLAMP.1)
}

/// A fixed-length chunk of a column; `valid` leading values are real, the
/// rest is zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub values: Vec<f64>,
    pub valid: usize,
}

impl Segment {
    pub fn mask(&self) -> Vec<bool> {
        (0..self.values.len()).map(|i| i < self.valid).collect()
    }
}

/// Consecutive chunks of `P2` values; the last one zero-padded.
pub fn segment_column(values: &[f64], cfg: &EncoderConfig) -> Vec<Segment> {
    let p2 = cfg.column_segment_len;
    values
        .chunks(p2)
        .map(|c| {
            let mut v = c.to_vec();
            v.resize(p2, 0.0);
            Segment {
                values: v,
                valid: c.len(),
            }
        })
        .collect()
}

/// One DA expert: a transformation MLP, its HMRL combiner and its gate.
#[derive(Debug, Clone, Copy)]
pub struct Expert {
    pub kind: AggKind,
    pub transform: Mlp,
    pub hmrl: Mlp,
    pub gate_hidden: ParamId,
    pub gate_out: ParamId,
}

#[derive(Debug, Clone)]
enum SegmentEmbed {
    Experts(Vec<Expert>),
    Linear(Linear),
}

#[derive(Debug, Clone)]
pub struct DatasetEncoder {
    cfg: EncoderConfig,
    embed: SegmentEmbed,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
}

/// Table encoding on a graph: `[N_C * N2, K]`, columns stacked in order.
#[derive(Debug, Clone, Copy)]
pub struct EncodedDataset {
    pub var: Var,
    pub columns: usize,
    pub segments: usize,
    /// MoE gates `[N_C * N2, experts]` when DA layers are enabled.
    pub gates: Option<Var>,
}

impl DatasetEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: &EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.embed_dim;
        let embed = if cfg.da_layers {
            let experts = AggKind::ALL[..cfg.experts]
                .iter()
                .map(|&kind| {
                    let name = format!("data.expert.{}", kind.name());
                    Ok(Expert {
                        kind,
                        transform: Mlp::new(store, &format!("{name}.transform"), (cfg.leaf_len(), k, k), rng)?,
                        hmrl: Mlp::new(store, &format!("{name}.hmrl"), (2 * k, k, k), rng)?,
                        gate_hidden: store.add_xavier(format!("{name}.gate.w1"), k, k, rng)?,
                        gate_out: store.add_xavier(format!("{name}.gate.w2"), k, 1, rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            SegmentEmbed::Experts(experts)
        } else {
            SegmentEmbed::Linear(Linear::new(store, "data.proj", cfg.column_segment_len, k, rng)?)
        };
        let pos_init: Vec<T> = (0..cfg.max_column_segments * k)
            .map(|_| T::lit(rng.random_range(-0.02..0.02)))
            .collect();
        let pos = store.add("data.pos", Tensor::new(vec![cfg.max_column_segments, k], pos_init)?)?;
        let blocks = (0..cfg.depth)
            .map(|j| TransformerBlock::new(store, &format!("data.block{j}"), k, cfg.heads, rng))
            .collect::<Result<_>>()?;
        Ok(DatasetEncoder {
            cfg: cfg.clone(),
            embed,
            pos,
            blocks,
        })
    }

    pub fn experts(&self) -> &[Expert] {
        match &self.embed {
            SegmentEmbed::Experts(e) => e,
            SegmentEmbed::Linear(_) => &[],
        }
    }

    fn expert(&self, i: usize) -> Result<&Expert> {
        self.experts()
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("no expert with index {i}")))
    }

    /// `e_0` for each row of `sub` (`[R, P2 / 2^beta]`) through expert `i`.
    pub fn transform_subsegment<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        expert: usize,
        sub: Var,
    ) -> Result<Var> {
        let (_, len) = g.shape(sub);
        if len != self.cfg.leaf_len() {
            return Err(Error::Shape(format!(
                "sub-segment of length {len}, expected {}",
                self.cfg.leaf_len()
            )));
        }
        self.expert(expert)?.transform.forward(g, s, sub)
    }

    /// Bottom-up binary-tree fusion of consecutive groups of `n_leaves` rows.
    /// Returns the roots `[R / n_leaves, K]` and the number of pairwise
    /// combinations performed per tree.
    pub fn hmrl_root<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        expert: usize,
        leaves: Var,
        n_leaves: usize,
    ) -> Result<(Var, usize)> {
        if !n_leaves.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "HMRL needs a power-of-two leaf count, got {n_leaves}"
            )));
        }
        let (rows, k) = g.shape(leaves);
        if rows % n_leaves != 0 {
            return Err(Error::Shape(format!(
                "{rows} leaves do not split into trees of {n_leaves}"
            )));
        }
        let f = self.expert(expert)?.hmrl;
        let mut level = leaves;
        let mut width = n_leaves;
        let mut combos = 0;
        while width > 1 {
            // row-major [2r, K] viewed as [r, 2K] puts each left/right pair side by side
            let pairs = g.reshape(level, g.shape(level).0 / 2, 2 * k)?;
            level = f.forward(g, s, pairs)?;
            width /= 2;
            combos += width;
        }
        Ok((level, combos))
    }

    /// Gated sum of expert roots. Returns `v [R, K]` and gates `[R, E]`.
    pub fn moe_combine<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, roots: &[Var]) -> Result<(Var, Var)> {
        let experts = self.experts();
        if roots.len() != experts.len() || roots.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} roots for {} experts",
                roots.len(),
                experts.len()
            )));
        }
        let mut logits = Vec::with_capacity(roots.len());
        for (e, &r) in experts.iter().zip(roots) {
            let w1 = g.param(s, e.gate_hidden);
            let w2 = g.param(s, e.gate_out);
            let h = g.matmul(r, w1)?;
            let h = g.leaky_relu(h, T::lit(LEAKY_SLOPE));
            logits.push(g.matmul(h, w2)?);
        }
        let logits = if logits.len() == 1 {
            logits[0]
        } else {
            g.concat_cols(&logits)?
        };
        let gates = g.softmax(logits);
        let mut v: Option<Var> = None;
        for (i, &r) in roots.iter().enumerate() {
            let gi = if roots.len() == 1 {
                gates
            } else {
                g.slice_cols(gates, i, 1)?
            };
            let term = g.scale_rows(r, gi)?;
            v = Some(match v {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        Ok((v.expect("at least one expert"), gates))
    }

    fn check_rows(&self, n_rows: usize) -> Result<usize> {
        let n2 = self.cfg.column_segments(n_rows);
        if n2 > self.cfg.max_column_segments {
            return Err(Error::Shape(format!(
                "{n_rows} rows give {n2} segments, encoder supports {}",
                self.cfg.max_column_segments
            )));
        }
        Ok(n2)
    }

    /// Segment embeddings before the transformer: `[N_C * N2, K]`.
    fn embed_segments<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        columns: &[Vec<f64>],
    ) -> Result<(Var, Option<Var>)> {
        let segs: Vec<Segment> = columns.iter().flat_map(|c| segment_column(c, &self.cfg)).collect();
        match &self.embed {
            SegmentEmbed::Linear(proj) => {
                let data = segs
                    .iter()
                    .flat_map(|sg| sg.values.iter().map(|&v| T::lit(v)))
                    .collect();
                let x = g.constant(segs.len(), self.cfg.column_segment_len, data);
                Ok((proj.forward(g, s, x)?, None))
            }
            SegmentEmbed::Experts(experts) => {
                let n_leaves = self.cfg.leaves();
                let leaf_len = self.cfg.leaf_len();
                let data = segs
                    .iter()
                    .flat_map(|sg| sg.values.iter().map(|&v| T::lit(v)))
                    .collect();
                let x = g.constant(segs.len() * n_leaves, leaf_len, data);
                // leaves made only of padding contribute nothing
                let keep: Vec<T> = segs
                    .iter()
                    .flat_map(|sg| (0..n_leaves).map(move |l| l * leaf_len < sg.valid))
                    .map(|k| if k { T::one() } else { T::zero() })
                    .collect();
                let any_padding = keep.iter().any(|&k| k == T::zero());
                let mask = any_padding.then(|| g.constant(keep.len(), 1, keep));
                let mut roots = Vec::with_capacity(experts.len());
                for e in 0..experts.len() {
                    let mut leaves = self.transform_subsegment(g, s, e, x)?;
                    if let Some(m) = mask {
                        leaves = g.scale_rows(leaves, m)?;
                    }
                    let (root, _) = self.hmrl_root(g, s, e, leaves, n_leaves)?;
                    roots.push(root);
                }
                let (v, gates) = self.moe_combine(g, s, &roots)?;
                Ok((v, Some(gates)))
            }
        }
    }

    /// Encodes already-normalized column value sequences of equal length.
    pub fn forward_values<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        columns: &[Vec<f64>],
    ) -> Result<EncodedDataset> {
        let Some(first) = columns.first() else {
            return Err(Error::Empty("no columns to encode".into()));
        };
        if columns.iter().any(|c| c.len() != first.len()) {
            return Err(Error::Shape("columns differ in length".into()));
        }
        let n2 = self.check_rows(first.len())?;
        let (mut u, gates) = self.embed_segments(g, s, columns)?;
        let pos = g.param(s, self.pos);
        let pos = if n2 == self.cfg.max_column_segments {
            pos
        } else {
            g.slice_rows(pos, 0, n2)?
        };
        let pos_all = if columns.len() == 1 {
            pos
        } else {
            g.concat_rows(&vec![pos; columns.len()])?
        };
        u = g.add(u, pos_all)?;
        for b in &self.blocks {
            u = b.forward(g, s, u, n2)?;
        }
        Ok(EncodedDataset {
            var: u,
            columns: columns.len(),
            segments: n2,
            gates,
        })
    }

    /// Encodes every column of `t` with values mapped into `frame`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        t: &Dataset,
        frame: Interval,
    ) -> Result<EncodedDataset> {
        let cols: Vec<Vec<f64>> = t
            .columns()
            .iter()
            .map(|c| c.values().iter().map(|&v| frame_normalize(v, frame)).collect())
            .collect();
        self.forward_values(g, s, &cols)
    }

    /// Runs the encoder on a fresh graph and returns `E_T`.
    pub fn embed<T: Scalar>(&self, s: &ParamStore<T>, t: &Dataset, frame: Interval) -> Result<DatasetEmbedding<T>> {
        let mut g = Graph::new();
        let e = self.forward(&mut g, s, t, frame)?;
        let out = g.value(e.var).clone();
        Ok(DatasetEmbedding(out.reshape(vec![
            e.columns,
            e.segments,
            self.cfg.embed_dim,
        ])?))
    }

    /// Mean segment embedding of a column drawn in its own frame, as if it
    /// were the only line of a chart.
    pub fn column_embedding<T: Scalar>(&self, s: &ParamStore<T>, c: &Column) -> Result<Vec<T>> {
        let lo = c.values().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = c.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let frame = plot_frame(tick_range(Interval { lo, hi }));
        let vals: Vec<f64> = c.values().iter().map(|&v| frame_normalize(v, frame)).collect();
        let mut g = Graph::new();
        let e = self.forward_values(&mut g, s, &[vals])?;
        let m = g.mean_rows(e.var);
        Ok(g.value(m).data().to_vec())
    }
}
