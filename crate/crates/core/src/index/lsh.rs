use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Random-hyperplane LSH with a single table of `bits`-bit codes.
#[derive(Debug, Clone, PartialEq)]
pub struct LshTable {
    dim: usize,
    planes: Vec<Vec<f64>>,
    buckets: BTreeMap<u64, BTreeSet<(u32, u32)>>,
}

impl LshTable {
    /// Unit normals drawn from a seeded Gaussian.
    pub fn new(dim: usize, bits: usize, seed: u64) -> Result<Self> {
        if !(1..=64).contains(&bits) || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "need 1..=64 bits and a positive dimension, got {bits} bits, dim {dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planes = (0..bits)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        Ok(LshTable {
            dim,
            planes,
            buckets: BTreeMap::new(),
        })
    }

    pub(crate) fn from_parts(planes: Vec<Vec<f64>>, buckets: BTreeMap<u64, BTreeSet<(u32, u32)>>) -> Result<Self> {
        let dim = planes.first().map_or(0, Vec::len);
        if planes.is_empty() || planes.len() > 64 || planes.iter().any(|p| p.len() != dim) || dim == 0 {
            return Err(Error::Format("malformed hyperplane set".into()));
        }
        Ok(LshTable { dim, planes, buckets })
    }

    pub fn bits(&self) -> usize {
        self.planes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn planes(&self) -> &[Vec<f64>] {
        &self.planes
    }

    pub fn buckets(&self) -> &BTreeMap<u64, BTreeSet<(u32, u32)>> {
        &self.buckets
    }

    /// Bit `i` set iff the embedding lies on the non-negative side of plane `i`.
    pub fn code<T: Scalar>(&self, embedding: &[T]) -> Result<u64> {
        if embedding.len() != self.dim {
            return Err(Error::Shape(format!(
                "embedding of length {}, table expects {}",
                embedding.len(),
                self.dim
            )));
        }
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite embedding".into()));
        }
        Ok(self.planes.iter().enumerate().fold(0u64, |code, (i, p)| {
            let dot: f64 = p.iter().zip(embedding).map(|(a, b)| a * b.as_f64()).sum();
            if dot >= 0.0 {
                code | (1 << i)
            } else {
                code
            }
        }))
    }

    pub fn insert<T: Scalar>(&mut self, embedding: &[T], dataset: u32, column: u32) -> Result<u64> {
        let c = self.code(embedding)?;
        self.buckets.entry(c).or_default().insert((dataset, column));
        Ok(c)
    }

    /// Datasets sharing `code` exactly.
    pub fn colliding(&self, code: u64) -> impl Iterator<Item = u32> + '_ {
        self.buckets.get(&code).into_iter().flatten().map(|&(d, _)| d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn sign_symmetry() {
        let t = LshTable::new(8, 16, 1).unwrap();
        let v: Vec<f64> = (0..8).map(|i| i as f64 - 3.3).collect();
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert_eq!(t.code(&v).unwrap(), t.code(&v).unwrap());
        assert_eq!(t.code(&v).unwrap() ^ t.code(&neg).unwrap(), 0xFFFF);
        assert!(t.code(&[1.0f64; 7]).is_err());
        assert!(t.code(&[f64::NAN; 8]).is_err());
    }

    #[test]
    fn planes_are_unit_and_seeded() {
        let a = LshTable::new(5, 10, 9).unwrap();
        assert_eq!(a, LshTable::new(5, 10, 9).unwrap());
        for p in a.planes() {
            assert!((p.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn collision_rate_follows_angle() {
        // per-bit agreement of random hyperplanes is 1 - theta / pi
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = std::f64::consts::FRAC_PI_4;
        let (mut agree, mut total) = (0usize, 0usize);
        for i in 0..10_000u64 {
            let t = LshTable::new(4, 1, i).unwrap();
            let u: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let u: Vec<f64> = u.iter().map(|x| x / nu).collect();
            // a unit vector orthogonal to u
            let mut w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d: f64 = w.iter().zip(&u).map(|(a, b)| a * b).sum();
            w.iter_mut().zip(&u).for_each(|(a, b)| *a -= d * b);
            let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            let v: Vec<f64> = u
                .iter()
                .zip(&w)
                .map(|(a, b)| a * theta.cos() + b / nw * theta.sin())
                .collect();
            agree += (t.code(&u).unwrap() == t.code(&v).unwrap()) as usize;
            total += 1;
        }
        let p = agree as f64 / total as f64;
        assert!((p - 0.75).abs() < 0.05, "{p}");
    }
}
