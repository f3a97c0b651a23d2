//! Windowed aggregation operators (`avg`, `sum`, `max`, `min`, plus identity).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tabular::{Column, DataSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AggKind {
    Identity,
    Avg,
    Sum,
    Max,
    Min,
}

impl AggKind {
    /// All kinds in expert order: identity first, then the four DA operators.
    pub const ALL: [AggKind; 5] = [
        AggKind::Identity,
        AggKind::Avg,
        AggKind::Sum,
        AggKind::Max,
        AggKind::Min,
    ];

    pub const DA: [AggKind; 4] = [AggKind::Avg, AggKind::Sum, AggKind::Max, AggKind::Min];

    /// Position in [`AggKind::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            AggKind::Identity => "identity",
            AggKind::Avg => "avg",
            AggKind::Sum => "sum",
            AggKind::Max => "max",
            AggKind::Min => "min",
        }
    }
}

/// An aggregation operator with its window size. The window is ignored for
/// [`AggKind::Identity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AggOp {
    pub kind: AggKind,
    pub window: usize,
}

impl AggOp {
    pub const IDENTITY: AggOp = AggOp {
        kind: AggKind::Identity,
        window: 1,
    };

    pub fn new(kind: AggKind, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidArgument("aggregation window must be >= 1".into()));
        }
        Ok(AggOp { kind, window })
    }

    pub fn is_identity(&self) -> bool {
        self.kind == AggKind::Identity
    }
}

impl fmt::Display for AggOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            AggKind::Identity => f.write_str("identity"),
            k => write!(f, "{}:{}", k.name(), self.window),
        }
    }
}

impl FromStr for AggOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "identity" {
            return Ok(AggOp::IDENTITY);
        }
        let (name, window) = s
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("bad aggregation '{s}'")))?;
        let kind = match name {
            "avg" => AggKind::Avg,
            "sum" => AggKind::Sum,
            "max" => AggKind::Max,
            "min" => AggKind::Min,
            _ => return Err(Error::Format(format!("unknown aggregation '{name}'"))),
        };
        let window = window
            .parse()
            .map_err(|_| Error::Format(format!("bad aggregation window in '{s}'")))?;
        AggOp::new(kind, window)
    }
}

impl Serialize for AggOp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AggOp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Aggregates consecutive non-overlapping windows; a trailing partial window
/// is dropped.
pub fn aggregate<T: Scalar>(values: &[T], op: AggOp) -> Result<Vec<T>> {
    if op.is_identity() {
        return Ok(values.to_vec());
    }
    if op.window == 0 {
        return Err(Error::InvalidArgument("aggregation window must be >= 1".into()));
    }
    if op.window > values.len() {
        return Err(Error::InvalidArgument(format!(
            "window {} exceeds series length {}",
            op.window,
            values.len()
        )));
    }
    let n = T::lit(op.window as f64);
    Ok(values
        .chunks_exact(op.window)
        .map(|w| match op.kind {
            AggKind::Sum => w.iter().fold(T::zero(), |a, &b| a + b),
            AggKind::Avg => w.iter().fold(T::zero(), |a, &b| a + b) / n,
            AggKind::Max => w.iter().copied().fold(T::neg_infinity(), T::max),
            AggKind::Min => w.iter().copied().fold(T::infinity(), T::min),
            AggKind::Identity => unreachable!(),
        })
        .collect())
}

/// Applies `op` to a column. Fails when fewer than two points remain.
pub fn apply_agg(c: &Column, op: AggOp) -> Result<DataSeries> {
    DataSeries::new(aggregate(c.values(), op)?)
}

/// Uniform DA operator with a window in `[2, max(2, min(100, n_rows / 10))]`.
pub fn sample_agg<R: Rng + ?Sized>(rng: &mut R, n_rows: usize) -> Result<AggOp> {
    if n_rows < 20 {
        return Err(Error::InvalidArgument(format!(
            "{n_rows} rows cannot host an aggregation window >= 2"
        )));
    }
    let kind = AggKind::DA[rng.random_range(0..AggKind::DA.len())];
    let hi = (n_rows / 10).clamp(2, 100);
    let window = rng.random_range(2..=hi);
    AggOp::new(kind, window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn op(kind: AggKind, window: usize) -> AggOp {
        AggOp::new(kind, window).unwrap()
    }

    #[test]
    fn window_examples() {
        assert_eq!(
            aggregate(&[1.0, 2.0, 3.0, 4.0], op(AggKind::Sum, 2)).unwrap(),
            vec![3.0, 7.0]
        );
        assert_eq!(
            aggregate(&[1.0, 2.0, 3.0, 4.0], op(AggKind::Avg, 2)).unwrap(),
            vec![1.5, 3.5]
        );
        assert_eq!(
            aggregate(&[5.0, 1.0, 4.0, 2.0, 9.0], op(AggKind::Max, 2)).unwrap(),
            vec![5.0, 4.0]
        );
        assert_eq!(aggregate(&[5.0f32, 1.0, 4.0], op(AggKind::Min, 3)).unwrap(), vec![1.0]);
    }

    #[test]
    fn window_errors() {
        assert!(AggOp::new(AggKind::Sum, 0).is_err());
        assert!(aggregate(&[1.0, 2.0], op(AggKind::Sum, 3)).is_err());
        let c = Column::new("c", vec![1.0, 2.0, 3.0]).unwrap();
        // one point left is not a drawable series
        assert!(apply_agg(&c, op(AggKind::Sum, 2)).is_err());
        assert_eq!(apply_agg(&c, AggOp::IDENTITY).unwrap().y(), c.values());
    }

    #[test]
    fn manifest_text_form() {
        assert_eq!(op(AggKind::Sum, 12).to_string(), "sum:12");
        assert_eq!(AggOp::IDENTITY.to_string(), "identity");
        assert_eq!("max:3".parse::<AggOp>().unwrap(), op(AggKind::Max, 3));
        assert_eq!("identity".parse::<AggOp>().unwrap(), AggOp::IDENTITY);
        assert!("median:3".parse::<AggOp>().is_err());
        assert!("sum:0".parse::<AggOp>().is_err());
        assert!("sum".parse::<AggOp>().is_err());
    }

    #[test]
    fn sampled_windows_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let a = sample_agg(&mut rng, 1000).unwrap();
            assert!((2..=100).contains(&a.window));
            assert!(!a.is_identity());
            let b = sample_agg(&mut rng, 50).unwrap();
            assert!((2..=5).contains(&b.window));
        }
        assert!(sample_agg(&mut rng, 19).is_err());
        let x = sample_agg(&mut ChaCha8Rng::seed_from_u64(3), 400).unwrap();
        let y = sample_agg(&mut ChaCha8Rng::seed_from_u64(3), 400).unwrap();
        assert_eq!(x, y);
    }

    proptest! {
        #[test]
        fn constant_column_outputs(k in -1000i32..1000, n in 1usize..64, w in 1usize..16) {
            prop_assume!(w <= n);
            let k = k as f64;
            let vals = vec![k; n];
            for kind in AggKind::DA {
                let out = aggregate(&vals, op(kind, w)).unwrap();
                prop_assert_eq!(out.len(), n / w);
                let expect = if kind == AggKind::Sum { k * w as f64 } else { k };
                prop_assert!(out.iter().all(|&v| v == expect));
            }
        }

        #[test]
        fn unit_window_is_identity(vals in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            for kind in AggKind::DA {
                prop_assert_eq!(aggregate(&vals, op(kind, 1)).unwrap(), vals.clone());
            }
        }
    }
}
