//! Triplet training with semi-hard in-batch negatives.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chart::LineChartQuery;
use crate::encoder::EncodedChart;
use crate::error::{Error, Result};
use crate::matcher::{bce_loss, Model};
use crate::relevance::dataset_relevance;
use crate::tabular::{Dataset, UnderlyingData};
use crate::tensor::{Adam, AdamConfig, Graph, Var};

/// A chart, the data it was drawn from and a labelled table.
#[derive(Debug, Clone)]
pub struct TrainTriplet {
    pub chart: LineChartQuery,
    pub underlying: UnderlyingData,
    pub dataset_id: String,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Positive triplets per optimizer step.
    pub batch_size: usize,
    /// Semi-hard negatives per positive.
    pub n_neg: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            n_neg: 3,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Picks `n_neg` ids from `scored` (id, oracle relevance) centred on the
/// middle of the descending ranking. Ties are ordered by id.
pub fn semi_hard_window(mut scored: Vec<(String, f64)>, n_neg: usize) -> Result<Vec<String>> {
    let b1 = scored.len();
    if n_neg == 0 || n_neg > b1 {
        return Err(Error::InvalidArgument(format!(
            "cannot pick {n_neg} negatives from {b1} candidates"
        )));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let centre = (b1 - 1) / 2;
    let start = centre.saturating_sub(n_neg / 2).min(b1 - n_neg);
    Ok(scored.drain(start..start + n_neg).map(|(id, _)| id).collect())
}

/// Semi-hard negatives for the chart drawn from `d` (owned by `own_id`)
/// among the other datasets of `batch`.
pub fn semi_hard_negatives(d: &UnderlyingData, own_id: &str, batch: &[&Dataset], n_neg: usize) -> Result<Vec<String>> {
    if batch.len() < n_neg + 1 {
        return Err(Error::InvalidArgument(format!(
            "batch of {} is too small for {n_neg} negatives",
            batch.len()
        )));
    }
    let scored = batch
        .par_iter()
        .filter(|t| t.id() != own_id)
        .map(|t| Ok((t.id().to_string(), dataset_relevance(d, t)?.total)))
        .collect::<Result<Vec<_>>>()?;
    semi_hard_window(scored, n_neg)
}

/// Expands positives into labelled triplets: each positive followed by its
/// semi-hard negatives drawn from the datasets of `batch`.
pub fn label_batch(positives: &[&TrainTriplet], batch: &[&Dataset], n_neg: usize) -> Result<Vec<TrainTriplet>> {
    let mut out = Vec::with_capacity(positives.len() * (n_neg + 1));
    for p in positives {
        out.push((*p).clone());
        for id in semi_hard_negatives(&p.underlying, &p.dataset_id, batch, n_neg)? {
            out.push(TrainTriplet {
                dataset_id: id,
                label: false,
                ..(*p).clone()
            });
        }
    }
    Ok(out)
}

/// Class-balanced loss of `model` on labelled triplets, recorded on `g`.
/// Triplets whose table has no column in the chart's y range are skipped.
pub fn batch_loss(
    model: &Model<f64>,
    g: &mut Graph<f64>,
    triplets: &[TrainTriplet],
    tables: &HashMap<&str, &Dataset>,
) -> Result<Option<Var>> {
    let mut scores = Vec::with_capacity(triplets.len());
    let mut labels = Vec::with_capacity(triplets.len());
    // consecutive triplets sharing a chart reuse its encoding
    let mut last: Option<(&LineChartQuery, EncodedChart)> = None;
    for tr in triplets {
        let t = tables
            .get(tr.dataset_id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown dataset {}", tr.dataset_id)))?;
        let Some(t) = model.candidate_columns(&tr.chart, t)? else {
            continue;
        };
        let v = match last {
            Some((c, v)) if c == &tr.chart => v,
            _ => {
                let v = model.chart_encoder().forward(g, model.store(), &tr.chart)?;
                last = Some((&tr.chart, v));
                v
            }
        };
        let e = model
            .dataset_encoder()
            .forward(g, model.store(), &t, tr.chart.frame())?;
        let trace = model.matcher().forward(g, model.store(), &v, &e)?;
        scores.push(trace.score);
        labels.push(tr.label);
    }
    if scores.is_empty() {
        return Ok(None);
    }
    let s = if scores.len() == 1 {
        scores[0]
    } else {
        g.concat_rows(&scores)?
    };
    bce_loss(g, s, &labels).map(Some)
}

/// Trains `model` in place. Each batch of positives draws its negatives from
/// the other tables the batch's positives refer to.
/// Returns the mean loss per epoch; writes `epoch\tloss` lines to `log` and a
/// checkpoint per epoch into `ckpt_dir` when given.
pub fn train(
    model: &mut Model<f64>,
    positives: &[TrainTriplet],
    corpus: &[Dataset],
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
    mut log: impl Write,
) -> Result<Vec<f64>> {
    if positives.len() < 8 {
        return Err(Error::InvalidArgument(format!(
            "need at least 8 positive triplets, got {}",
            positives.len()
        )));
    }
    if positives.iter().any(|p| !p.label) {
        return Err(Error::InvalidArgument("train expects positive triplets".into()));
    }
    if cfg.batch_size < cfg.n_neg + 1 {
        return Err(Error::Config(format!(
            "batch_size {} must exceed n_neg {}",
            cfg.batch_size, cfg.n_neg
        )));
    }
    let tables: HashMap<&str, &Dataset> = corpus.iter().map(|t| (t.id(), t)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        model.store(),
    );
    if let Some(dir) = ckpt_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut order: Vec<usize> = (0..positives.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let pos: Vec<&TrainTriplet> = chunk.iter().map(|&i| &positives[i]).collect();
            let mut ids: Vec<&str> = pos.iter().map(|p| p.dataset_id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() < cfg.n_neg + 1 {
                continue;
            }
            let batch = ids
                .iter()
                .map(|id| {
                    tables
                        .get(id)
                        .copied()
                        .ok_or_else(|| Error::InvalidArgument(format!("unknown dataset {id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let labelled = label_batch(&pos, &batch, cfg.n_neg)?;
            let mut g = Graph::new();
            let Some(loss) = batch_loss(model, &mut g, &labelled, &tables)? else {
                continue;
            };
            total += g.scalar(loss);
            steps += 1;
            model.store_mut().zero_grad();
            g.backward(loss, model.store_mut())?;
            adam.step(model.store_mut());
        }
        let mean = if steps == 0 { f64::NAN } else { total / steps as f64 };
        curve.push(mean);
        writeln!(log, "{epoch}\t{mean}").map_err(|e| Error::io("training log", e))?;
        if let Some(dir) = ckpt_dir {
            model.save(dir.join(format!("epoch{epoch:03}.bin")))?;
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scored(n: usize) -> Vec<(String, f64)> {
        (0..n).map(|i| (format!("d{i}"), 1.0 - i as f64 * 0.1)).collect()
    }

    #[test]
    fn window_centres_on_middle_rank() {
        // seven ranked datasets, centre index 3 -> ranks 2, 3, 4
        assert_eq!(semi_hard_window(scored(7), 3).unwrap(), vec!["d2", "d3", "d4"]);
        assert_eq!(semi_hard_window(scored(3), 3).unwrap(), vec!["d0", "d1", "d2"]);
        assert_eq!(semi_hard_window(scored(8), 4).unwrap(), vec!["d1", "d2", "d3", "d4"]);
        assert!(semi_hard_window(scored(2), 3).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let s = vec![("b".into(), 0.5), ("a".into(), 0.5), ("c".into(), 0.5)];
        assert_eq!(semi_hard_window(s, 1).unwrap(), vec!["b"]);
        let s = vec![("b".into(), 0.5), ("a".into(), 0.5), ("c".into(), 0.5)];
        assert_eq!(semi_hard_window(s, 3).unwrap(), vec!["a", "b", "c"]);
    }
}
