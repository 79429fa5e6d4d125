use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use crate::error::{Error, Result};
use crate::language::Tag;
use crate::model::{point_prediction, Model, PreparedExpression, PreparedScene};
use crate::numerics::Tape;
use crate::objective::{mask_iou, MetricsReport};

/// One prediction, as written by `infer` and `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub scene_id: String,
    pub expr_id: String,
    pub kernel_index: Option<usize>,
    pub superpoint_mask: Vec<f64>,
    pub point_mask: Vec<u8>,
    pub iou_vs_gt: Option<f64>,
    pub quality_score: f64,
    pub latency_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<Tag>,
}

/// Full forward pass for one expression with canonical positional signs.
pub fn infer_one(model: &Model, scene: &PreparedScene, expr: &PreparedExpression, with_gt: bool) -> Result<InferenceRecord> {
    let start = Instant::now();
    let mut tape = Tape::new();
    let s = model.encode_scene(&mut tape, scene)?;
    let out = model.decode(&mut tape, s, expr, None)?;
    let map = tape.value(out.map).to_vec();
    let points = point_prediction(&map, &scene.partition)?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    if map.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite(format!("prediction for {}", expr.record.expr_id)));
    }
    let iou = if with_gt { Some(mask_iou(&points, &expr.truth.point_mask)?) } else { None };
    Ok(InferenceRecord {
        scene_id: scene.scene.scene_id.clone(),
        expr_id: expr.record.expr_id.clone(),
        kernel_index: out.kernel_index,
        superpoint_mask: map,
        point_mask: points.iter().map(|&b| b as u8).collect(),
        iou_vs_gt: iou,
        quality_score: tape.scalar(out.score),
        latency_ms,
        tag: Some(expr.record.tag),
    })
}

/// Metrics from per-expression records; IoUs are recomputed from the
/// dumped point masks against `truth`.
pub fn metrics_from_records(records: &[InferenceRecord]) -> MetricsReport {
    let pairs: Vec<(Tag, f64)> = records
        .iter()
        .map(|r| (r.tag.unwrap_or(Tag::Multiple), r.iou_vs_gt.unwrap_or(0.0)))
        .collect();
    let mut report = MetricsReport::from_records(&pairs);
    if !records.is_empty() {
        let mut lat: Vec<f64> = records.iter().map(|r| r.latency_ms).collect();
        lat.sort_by(f64::total_cmp);
        report.mean_latency_ms = lat.iter().sum::<f64>() / lat.len() as f64;
    }
    report
}

/// Evaluates every sample on up to `workers` threads. Records come back
/// sorted by expression id.
pub fn evaluate(
    model: &Model,
    scenes: &[PreparedScene],
    samples: &[Sample],
    workers: usize,
) -> Result<(MetricsReport, Vec<InferenceRecord>)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut records: Vec<InferenceRecord> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| infer_one(model, &scenes[s.scene], &s.expr, true))
            .collect::<Result<_>>()
    })?;
    records.sort_by(|a, b| a.expr_id.cmp(&b.expr_id));
    Ok((metrics_from_records(&records), records))
}
