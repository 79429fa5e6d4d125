use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use crate::error::{Error, Result};
use crate::model::{Model, PreparedScene};
use crate::numerics::{Tape, Tensor};
use crate::scene::{superpoint_pool, SuperpointPartition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTiming {
    pub mode: String,
    /// Mean number of matching inputs per scene.
    pub mean_inputs: f64,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub inferences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub superpoint: ModeTiming,
    pub point: ModeTiming,
    /// Point-mode median over superpoint-mode median.
    pub speedup: f64,
    /// Mean `N_p / N_s` over the benchmarked scenes.
    pub point_to_superpoint_ratio: f64,
}

/// Scene features computed once, so only pooling and matching are timed.
struct Cached<'a> {
    features: Tensor,
    superpoints: &'a SuperpointPartition,
    singletons: SuperpointPartition,
}

fn time_mode(model: &Model, cache: &[Cached], samples: &[Sample], n: usize, point_mode: bool) -> Result<ModeTiming> {
    let mut times = Vec::with_capacity(n);
    let mut inputs = 0usize;
    for i in 0..n {
        let s = &samples[i % samples.len()];
        let c = &cache[s.scene];
        let partition = if point_mode { &c.singletons } else { c.superpoints };
        let start = Instant::now();
        let mut tape = Tape::new();
        let f = tape.constant_tensor(&c.features)?;
        let pooled = superpoint_pool(&mut tape, f, partition)?;
        let out = model.decode(&mut tape, pooled, &s.expr, None)?;
        let m = tape.value(out.map);
        std::hint::black_box(m);
        times.push(start.elapsed().as_secs_f64() * 1e3);
        inputs += partition.count();
    }
    let mean_ms = times.iter().sum::<f64>() / n as f64;
    times.sort_by(f64::total_cmp);
    let median_ms = if n % 2 == 1 { times[n / 2] } else { 0.5 * (times[n / 2 - 1] + times[n / 2]) };
    Ok(ModeTiming {
        mode: if point_mode { "point" } else { "superpoint" }.into(),
        mean_inputs: inputs as f64 / n as f64,
        mean_ms,
        median_ms,
        inferences: n,
    })
}

/// Times `n` descriptions in superpoint mode and in point mode (every
/// point its own superpoint) with the same weights.
pub fn bench(model: &Model, scenes: &[PreparedScene], samples: &[Sample], n: usize) -> Result<BenchReport> {
    if samples.is_empty() || n == 0 {
        return Err(Error::Invalid("bench needs at least one sample and one inference".into()));
    }
    let mut cache = Vec::with_capacity(scenes.len());
    for sc in scenes {
        let mut tape = Tape::new();
        let f = crate::scene::encode_points(&mut tape, &model.store, &model.encoder, &sc.scene, &sc.neighbors)?;
        cache.push(Cached {
            features: tape.tensor(f),
            superpoints: &sc.partition,
            singletons: SuperpointPartition::singletons(sc.scene.len()),
        });
    }
    // One untimed pass per mode warms allocations.
    time_mode(model, &cache, samples, 1, false)?;
    time_mode(model, &cache, samples, 1, true)?;
    let superpoint = time_mode(model, &cache, samples, n, false)?;
    let point = time_mode(model, &cache, samples, n, true)?;
    let used: Vec<usize> = (0..n).map(|i| samples[i % samples.len()].scene).collect();
    let ratio = used
        .iter()
        .map(|&s| scenes[s].scene.len() as f64 / scenes[s].partition.count() as f64)
        .sum::<f64>()
        / n as f64;
    Ok(BenchReport {
        speedup: point.median_ms / superpoint.median_ms,
        superpoint,
        point,
        point_to_superpoint_ratio: ratio,
    })
}
