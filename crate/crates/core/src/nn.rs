//! Layers built on the autodiff tape: affine maps, MLPs, pre-norm
//! transformer blocks.

use rand::Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, ParamStore, Var};

pub const LEAKY_SLOPE: f64 = 0.01;

/// `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Linear {
            w: store.add_xavier(format!("{name}.w"), fan_in, fan_out, rng)?,
            b: store.add_filled(format!("{name}.b"), &[1, fan_out], T::zero())?,
        })
    }

    /// All-zero weights and bias.
    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Linear {
            w: store.add_filled(format!("{name}.w"), &[fan_in, fan_out], T::zero())?,
            b: store.add_filled(format!("{name}.b"), &[1, fan_out], T::zero())?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }
}

/// Two affine layers with a leaky ReLU between them.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            l1: Linear::new(store, &format!("{name}.l1"), dims.0, dims.1, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), dims.1, dims.2, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, s, x)?;
        let h = g.leaky_relu(h, T::lit(LEAKY_SLOPE));
        self.l2.forward(g, s, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add_filled(format!("{name}.g"), &[1, dim], T::one())?,
            bias: store.add_filled(format!("{name}.b"), &[1, dim], T::zero())?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(s, self.gain);
        let bias = g.param(s, self.bias);
        g.layernorm(x, gain, bias)
    }
}

/// Multi-head self-attention without projection biases.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(SelfAttention {
            q: store.add_xavier(format!("{name}.q"), dim, dim, rng)?,
            k: store.add_xavier(format!("{name}.k"), dim, dim, rng)?,
            v: store.add_xavier(format!("{name}.v"), dim, dim, rng)?,
            o: store.add_xavier(format!("{name}.o"), dim, dim, rng)?,
            heads,
        })
    }

    /// Attends within consecutive row groups of `group` tokens each.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, group: usize) -> Result<Var> {
        let (rows, dim) = g.shape(x);
        let hd = dim / self.heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let (wq, wk, wv, wo) = (
            g.param(s, self.q),
            g.param(s, self.k),
            g.param(s, self.v),
            g.param(s, self.o),
        );
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let mut groups = Vec::with_capacity(rows / group);
        for start in (0..rows).step_by(group) {
            let (qg, kg, vg) = if group == rows {
                (q, k, v)
            } else {
                (
                    g.slice_rows(q, start, group)?,
                    g.slice_rows(k, start, group)?,
                    g.slice_rows(v, start, group)?,
                )
            };
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let (qh, kh, vh) = if self.heads == 1 {
                    (qg, kg, vg)
                } else {
                    (
                        g.slice_cols(qg, h * hd, hd)?,
                        g.slice_cols(kg, h * hd, hd)?,
                        g.slice_cols(vg, h * hd, hd)?,
                    )
                };
                let sc = g.matmul_t(qh, kh)?;
                let sc = g.scale(sc, scale);
                let a = g.softmax(sc);
                heads.push(g.matmul(a, vh)?);
            }
            groups.push(if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)?
            });
        }
        let joined = if groups.len() == 1 {
            groups[0]
        } else {
            g.concat_rows(&groups)?
        };
        g.matmul(joined, wo)
    }
}

/// Pre-norm block: `u' = MSA(LN(u)) + u`, then `u'' = MLP(LN(u')) + u'`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), (dim, 2 * dim, dim), rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, group: usize) -> Result<Var> {
        let h = self.ln1.forward(g, s, x)?;
        let h = self.attn.forward(g, s, h, group)?;
        let x = g.add(h, x)?;
        let h = self.ln2.forward(g, s, x)?;
        let h = self.mlp.forward(g, s, h)?;
        g.add(h, x)
    }
}
