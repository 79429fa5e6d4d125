//! Training losses and segmentation metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::Tag;
use crate::numerics::{Tape, Var};

pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1e-6;
/// Score loss applies only to predictions whose IoU exceeds this.
pub const SCORE_IOU_GATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub rel: f64,
    pub score: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { bce: 1.0, dice: 1.0, rel: 5.0, score: 0.5 }
    }
}

fn labels_var(tape: &mut Tape, shape: (usize, usize), labels: &[bool], op: &'static str) -> Result<Var> {
    if labels.len() != shape.0 * shape.1 {
        return Err(Error::shape(op, &[shape.0, shape.1], &[labels.len()]));
    }
    tape.constant(shape.0, shape.1, labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect())
}

/// Mean binary cross-entropy of probabilities `m` against `labels`.
pub fn bce_loss(tape: &mut Tape, m: Var, labels: &[bool]) -> Result<Var> {
    let y = labels_var(tape, tape.dims(m), labels, "bce_loss")?;
    let p = tape.clamp(m, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = tape.log(p);
    let q = tape.scale(p, -1.0);
    let q = tape.shift(q, 1.0);
    let log_q = tape.log(q);
    let not_y = tape.scale(y, -1.0);
    let not_y = tape.shift(not_y, 1.0);
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(not_y, log_q)?;
    let s = tape.add(a, b)?;
    let mean = tape.mean_all(s);
    Ok(tape.scale(mean, -1.0))
}

/// `1 − (2Σmy + ε) / (Σm + Σy + ε)`.
pub fn dice_loss(tape: &mut Tape, m: Var, labels: &[bool]) -> Result<Var> {
    let y = labels_var(tape, tape.dims(m), labels, "dice_loss")?;
    let my = tape.mul(m, y)?;
    let inter = tape.sum_all(my);
    let num = tape.scale(inter, 2.0);
    let num = tape.shift(num, DICE_SMOOTH);
    let sm = tape.sum_all(m);
    let sy = labels.iter().filter(|&&b| b).count() as f64;
    let den = tape.shift(sm, sy + DICE_SMOOTH);
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.shift(neg, 1.0))
}

/// BCE on relevance mass normalized by the word count.
pub fn rel_loss(tape: &mut Tape, s_r: Var, labels: &[bool], n_words: usize) -> Result<Var> {
    if n_words == 0 {
        return Err(Error::Invalid("rel_loss needs at least one word".into()));
    }
    let p = tape.scale(s_r, 1.0 / n_words as f64);
    bce_loss(tape, p, labels)
}

/// `|s − iou|` when `iou > 0.5`, else zero.
pub fn score_loss(tape: &mut Tape, s: Var, iou: f64) -> Result<Var> {
    let diff = tape.shift(s, -iou);
    let l = tape.abs(diff);
    let gate = if iou > SCORE_IOU_GATE { 1.0 } else { 0.0 };
    Ok(tape.scale(l, gate))
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub bce: Var,
    pub dice: Var,
    pub rel: Var,
    pub score: Var,
}

pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let parts = [(terms.bce, w.bce), (terms.dice, w.dice), (terms.rel, w.rel), (terms.score, w.score)];
    let mut total = tape.scale(parts[0].0, parts[0].1);
    for &(v, k) in &parts[1..] {
        let s = tape.scale(v, k);
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Intersection over union; two empty masks count as a perfect match.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("mask_iou", &[a.len()], &[b.len()]));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitMetrics {
    #[serde(rename = "mIoU")]
    pub miou: f64,
    pub acc_at_025: f64,
    pub acc_at_05: f64,
    pub n_expressions: usize,
}

impl SplitMetrics {
    pub fn from_ious(ious: &[f64]) -> Self {
        let n = ious.len();
        if n == 0 {
            return SplitMetrics::default();
        }
        let frac = |k: f64| ious.iter().filter(|&&x| x >= k).count() as f64 / n as f64;
        SplitMetrics {
            miou: ious.iter().sum::<f64>() / n as f64,
            acc_at_025: frac(0.25),
            acc_at_05: frac(0.5),
            n_expressions: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mIoU")]
    pub miou: f64,
    pub acc_at_025: f64,
    pub acc_at_05: f64,
    pub per_tag: BTreeMap<Tag, SplitMetrics>,
    pub n_expressions: usize,
    /// Mean forward time per expression.
    #[serde(default)]
    pub mean_latency_ms: f64,
}

impl MetricsReport {
    /// Aggregates `(tag, iou)` pairs. The result is independent of their
    /// order: values are sorted before summation.
    pub fn from_records(records: &[(Tag, f64)]) -> Self {
        let collect = |filter: Option<Tag>| {
            let mut v: Vec<f64> = records
                .iter()
                .filter(|(t, _)| filter.is_none_or(|f| f == *t))
                .map(|r| r.1)
                .collect();
            v.sort_by(f64::total_cmp);
            SplitMetrics::from_ious(&v)
        };
        let all = collect(None);
        let mut per_tag = BTreeMap::new();
        for tag in [Tag::Unique, Tag::Multiple] {
            per_tag.insert(tag, collect(Some(tag)));
        }
        MetricsReport {
            miou: all.miou,
            acc_at_025: all.acc_at_025,
            acc_at_05: all.acc_at_05,
            per_tag,
            n_expressions: all.n_expressions,
            mean_latency_ms: 0.0,
        }
    }
}
