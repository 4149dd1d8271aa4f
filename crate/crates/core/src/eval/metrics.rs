//! Threshold-free ranking metrics over scored records.

use crate::error::{Error, Result};
use crate::primitives::ScoredRecord;

fn check_scores(records: &[ScoredRecord]) -> Result<()> {
    if let Some(r) = records.iter().find(|r| !r.ranking_score.is_finite()) {
        return Err(Error::Domain(format!("score of {} is not finite", r.image_id)));
    }
    Ok(())
}

/// Probability that a random anomalous record outranks a random normal one,
/// ties counting one half. Computed from midranks in O(n log n).
pub fn auroc(records: &[ScoredRecord]) -> Result<f64> {
    check_scores(records)?;
    let pos = records.iter().filter(|r| r.label.is_anomalous()).count();
    let neg = records.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both labels, got {pos} anomalous and {neg} normal"
        )));
    }
    let mut order: Vec<&ScoredRecord> = records.iter().collect();
    order.sort_by(|a, b| a.ranking_score.total_cmp(&b.ranking_score));

    // sum of doubled midranks of the positives keeps everything integral
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && order[j].ranking_score == order[i].ranking_score {
            j += 1;
        }
        let twice_midrank = (i + 1 + j) as u64;
        let positives = order[i..j].iter().filter(|r| r.label.is_anomalous()).count() as u64;
        twice_rank_sum += positives * twice_midrank;
        i = j;
    }
    let (p, n) = (pos as u64, neg as u64);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Best F1 over thresholds `score ≥ t` for every distinct score and `−∞`.
pub fn f1_max(records: &[ScoredRecord]) -> Result<f64> {
    check_scores(records)?;
    let pos = records.iter().filter(|r| r.label.is_anomalous()).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric(
            "F1-max needs at least one anomalous record".into(),
        ));
    }
    let mut order: Vec<&ScoredRecord> = records.iter().collect();
    order.sort_by(|a, b| b.ranking_score.total_cmp(&a.ranking_score));

    let f1 = |tp: usize, fp: usize| {
        let fn_ = pos - tp;
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    };
    let (mut tp, mut fp) = (0, 0);
    let mut best: f64 = 0.0;
    let mut i = 0;
    while i < order.len() {
        let score = order[i].ranking_score;
        while i < order.len() && order[i].ranking_score == score {
            if order[i].label.is_anomalous() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        best = best.max(f1(tp, fp));
    }
    Ok(best)
}
