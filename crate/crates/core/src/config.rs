//! Flat `key = value` configuration shared by every command.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::index::DEFAULT_LSH_BITS;
use crate::training::TrainConfig;

/// Size of the generated training material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub sources: usize,
    pub copies: usize,
    pub distractors: usize,
    pub charts_per_table: usize,
}

impl Default for TrainingData {
    fn default() -> Self {
        TrainingData {
            sources: 100,
            copies: 1,
            distractors: 50,
            charts_per_table: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub training_data: TrainingData,
    pub lsh_bits: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            encoder: EncoderConfig::default(),
            train: TrainConfig {
                lr: 3e-4,
                ..TrainConfig::default()
            },
            bench: BenchConfig::default(),
            training_data: TrainingData::default(),
            lsh_bits: DEFAULT_LSH_BITS,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

macro_rules! fields {
    ($m:ident) => {
        $m!(
            seed: seed,
            embed_dim: encoder.embed_dim,
            depth: encoder.depth,
            heads: encoder.heads,
            line_segment_width: encoder.line_segment_width,
            column_segment_len: encoder.column_segment_len,
            hmrl_depth: encoder.hmrl_depth,
            height: encoder.height,
            width: encoder.width,
            max_column_segments: encoder.max_column_segments,
            da_layers: encoder.da_layers,
            experts: encoder.experts,
            epochs: train.epochs,
            batch_size: train.batch_size,
            n_neg: train.n_neg,
            lr: train.lr,
            n_sources: bench.n_sources,
            n_copies: bench.n_copies,
            n_distractors: bench.n_distractors,
            n_queries: bench.n_queries,
            k_gt: bench.k_gt,
            rows_min: bench.rows.0,
            rows_max: bench.rows.1,
            cols_min: bench.cols.0,
            cols_max: bench.cols.1,
            lines_min: bench.query.lines.0,
            lines_max: bench.query.lines.1,
            with_da: bench.query.with_da,
            train_sources: training_data.sources,
            train_copies: training_data.copies,
            train_distractors: training_data.distractors,
            charts_per_table: training_data.charts_per_table,
            lsh_bits: lsh_bits
        )
    };
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! assign {
            ($($name:ident: $($path:tt).+),*) => {
                match key {
                    $(stringify!($name) => self.$($path).+ = parse(key, value)?,)*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
            };
        }
        fields!(assign);
        Ok(())
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        macro_rules! dump {
            ($($name:ident: $($path:tt).+),*) => {
                $(let _ = writeln!(s, "{} = {}", stringify!($name), self.$($path).+);)*
            };
        }
        fields!(dump);
        s
    }

    /// Layout of the generated training corpus.
    pub fn training_bench(&self) -> BenchConfig {
        BenchConfig {
            n_sources: self.training_data.sources,
            n_copies: self.training_data.copies,
            n_distractors: self.training_data.distractors,
            ..self.bench.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.train.n_neg == 0 || self.train.batch_size <= self.train.n_neg {
            return Err(Error::Config("batch_size must exceed n_neg >= 1".into()));
        }
        if !(self.train.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(1..=64).contains(&self.lsh_bits) {
            return Err(Error::Config("lsh_bits must be within 1..=64".into()));
        }
        let b = &self.bench;
        if b.rows.0 > b.rows.1 || b.cols.0 > b.cols.1 || b.query.lines.0 > b.query.lines.1 {
            return Err(Error::Config("min bounds must not exceed max bounds".into()));
        }
        if b.rows.0 < 20 {
            return Err(Error::Config("rows_min must be at least 20".into()));
        }
        if self.encoder.column_segments(b.rows.1) > self.encoder.max_column_segments {
            return Err(Error::Config(
                "rows_max exceeds max_column_segments * column_segment_len".into(),
            ));
        }
        if b.query.height != self.encoder.height || b.query.width != self.encoder.width {
            return Err(Error::Config("chart size must match the encoder".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parses_overrides_and_comments() {
        let c = Config::parse("# desk\nembed_dim = 16\nheads=2\n\nwith_da = true\nlr = 0.01\n").unwrap();
        assert_eq!(c.encoder.embed_dim, 16);
        assert_eq!(c.encoder.heads, 2);
        assert!(c.bench.query.with_da);
        assert_eq!(c.train.lr, 0.01);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Config::parse("nope = 1").is_err());
        assert!(Config::parse("embed_dim = x").is_err());
        assert!(Config::parse("embed_dim").is_err());
        assert!(Config::parse("heads = 5").is_err());
        assert!(Config::parse("rows_max = 5000").is_err());
    }
}
