use rand::Rng;

use super::{ChartEmbedding, EncoderConfig};
use crate::chart::LineChartQuery;
use crate::error::{Error, Result};
use crate::nn::{Linear, TransformerBlock};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Vision-transformer style line encoder: vertical strips of width P1 are
/// flattened, projected to K, offset by positional embeddings and passed
/// through J pre-norm blocks.
#[derive(Debug, Clone)]
pub struct ChartEncoder {
    cfg: EncoderConfig,
    proj: Linear,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
}

/// Chart encoding on a graph: `[M * N1, K]`, lines stacked in order.
#[derive(Debug, Clone, Copy)]
pub struct EncodedChart {
    pub var: Var,
    pub lines: usize,
    pub segments: usize,
}

impl ChartEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: &EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.embed_dim;
        let proj = Linear::new(store, "chart.proj", cfg.height * cfg.line_segment_width, k, rng)?;
        let pos_init: Vec<T> = (0..cfg.line_segments() * k)
            .map(|_| T::lit(rng.random_range(-0.02..0.02)))
            .collect();
        let pos = store.add("chart.pos", Tensor::new(vec![cfg.line_segments(), k], pos_init)?)?;
        let blocks = (0..cfg.depth)
            .map(|j| TransformerBlock::new(store, &format!("chart.block{j}"), k, cfg.heads, rng))
            .collect::<Result<_>>()?;
        Ok(ChartEncoder {
            cfg: cfg.clone(),
            proj,
            pos,
            blocks,
        })
    }

    /// Flattened strips of every line: `[M * N1, H * P1]`.
    pub fn strips<T: Scalar>(&self, q: &LineChartQuery) -> Result<Tensor<T>> {
        if q.height() != self.cfg.height || q.width() != self.cfg.width {
            return Err(Error::Shape(format!(
                "chart is {}x{}, encoder expects {}x{}",
                q.height(),
                q.width(),
                self.cfg.height,
                self.cfg.width
            )));
        }
        let p1 = self.cfg.line_segment_width;
        let n1 = self.cfg.line_segments();
        let mut data = Vec::with_capacity(q.lines().len() * n1 * self.cfg.height * p1);
        for line in q.lines() {
            for j in 0..n1 {
                data.extend(line.strip(j * p1, p1).into_iter().map(T::lit));
            }
        }
        Tensor::new(vec![q.lines().len() * n1, self.cfg.height * p1], data)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, q: &LineChartQuery) -> Result<EncodedChart> {
        let x = self.strips(q)?;
        let lines = q.lines().len();
        let n1 = self.cfg.line_segments();
        let x = g.input(x);
        let mut u = self.proj.forward(g, s, x)?;
        let pos = g.param(s, self.pos);
        let pos_all = if lines == 1 {
            pos
        } else {
            g.concat_rows(&vec![pos; lines])?
        };
        u = g.add(u, pos_all)?;
        for b in &self.blocks {
            u = b.forward(g, s, u, n1)?;
        }
        Ok(EncodedChart {
            var: u,
            lines,
            segments: n1,
        })
    }

    /// Runs the encoder on a fresh graph and returns `E_V`.
    pub fn embed<T: Scalar>(&self, s: &ParamStore<T>, q: &LineChartQuery) -> Result<ChartEmbedding<T>> {
        let mut g = Graph::new();
        let e = self.forward(&mut g, s, q)?;
        let t = g.value(e.var).clone();
        Ok(ChartEmbedding(t.reshape(vec![
            e.lines,
            e.segments,
            self.cfg.embed_dim,
        ])?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart::rasterize;
    use crate::tabular::{DataSeries, UnderlyingData};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chart(series: &[Vec<f64>], cfg: &EncoderConfig) -> LineChartQuery {
        let d = UnderlyingData::new(series.iter().map(|s| DataSeries::new(s.clone()).unwrap()).collect()).unwrap();
        rasterize(&d, cfg.height, cfg.width).unwrap()
    }

    fn setup() -> (EncoderConfig, ParamStore<f64>, ChartEncoder) {
        let cfg = EncoderConfig::default();
        let mut s = ParamStore::new();
        let enc = ChartEncoder::new(&cfg, &mut s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (cfg, s, enc)
    }

    #[test]
    fn output_shape() {
        let (cfg, s, enc) = setup();
        let q = chart(&[vec![1.0, 3.0, 2.0, 5.0], vec![0.0, 1.0, 4.0, 2.0]], &cfg);
        let e = enc.embed(&s, &q).unwrap();
        assert_eq!(e.shape(), &[2, 4, 32]);
        assert!(e.0.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn lines_are_encoded_independently() {
        let (cfg, s, enc) = setup();
        let a = vec![1.0, 3.0, 2.0, 5.0, 4.0];
        let b = vec![5.0, 1.0, 1.0, 2.0, 0.0];
        let same = enc.embed(&s, &chart(&[a.clone(), a.clone()], &cfg)).unwrap();
        assert_eq!(same.0.index_outer(0), same.0.index_outer(1));
        let ab = enc.embed(&s, &chart(&[a.clone(), b.clone()], &cfg)).unwrap();
        let ba = enc.embed(&s, &chart(&[b, a], &cfg)).unwrap();
        assert_eq!(ab.0.index_outer(0), ba.0.index_outer(1));
        assert_eq!(ab.0.index_outer(1), ba.0.index_outer(0));
    }

    #[test]
    fn size_mismatch_rejected() {
        let (cfg, s, enc) = setup();
        let small = EncoderConfig { width: 120, ..cfg };
        let q = chart(&[vec![1.0, 2.0]], &small);
        assert!(enc.embed(&s, &q).is_err());
    }
}
