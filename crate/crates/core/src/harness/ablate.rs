use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::RunConfig;
use super::dataset::{Dataset, Split};
use super::eval::evaluate;
use super::train::{train, TrainOptions};
use crate::error::{Error, Result};
use crate::model::Vocabularies;

/// A named configuration delta applied on top of the base run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub overrides: serde_json::Value,
}

impl Variant {
    pub fn new(name: &str, overrides: serde_json::Value) -> Self {
        Variant { name: name.to_string(), overrides }
    }
}

/// Interaction structures, the no-interaction baseline and the edge
/// direction grid.
pub fn default_variants() -> Vec<Variant> {
    vec![
        Variant::new("ga_par_sa", json!({"model": {"ddi": {"structure": "ga_par_sa"}}})),
        Variant::new("ga", json!({"model": {"ddi": {"structure": "ga"}}})),
        Variant::new("wo_ddi", json!({"model": {"use_ddi": false, "stm": {"kernel": "cls"}}})),
        Variant::new("sa_ga", json!({"model": {"ddi": {"structure": "sa_ga"}}})),
        Variant::new("ga_sa", json!({"model": {"ddi": {"structure": "ga_sa"}}})),
        Variant::new("forward", json!({"model": {"direction": "forward"}})),
        Variant::new("bidirectional", json!({"model": {"direction": "bidirectional"}})),
    ]
}

/// Kernel strategies and sampling counts, for wider sweeps.
pub fn kernel_variants() -> Vec<Variant> {
    let mut out: Vec<Variant> = ["root", "avg", "top1", "cls"]
        .iter()
        .map(|k| Variant::new(&format!("kernel_{k}"), json!({"model": {"stm": {"kernel": k}}})))
        .collect();
    for k in [16, 32, 64, 128] {
        out.push(Variant::new(&format!("k_rel_{k}"), json!({"model": {"stm": {"k_rel": k}}})));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub overrides: serde_json::Value,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    pub acc_at_025: f64,
    pub acc_at_05: f64,
    /// mIoU minus that of the first variant.
    pub delta_miou: f64,
    pub final_loss: f64,
}

/// Trains and evaluates every variant with the base seed, writing
/// `ablation.csv` and `ablation.json` under `out`.
pub fn ablate(base: &RunConfig, data: &Dataset, variants: &[Variant], out: &Path, workers: usize) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::Config("no ablation variants".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows: Vec<AblationRow> = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = base.with_overrides(&v.overrides)?;
        let vocab = Vocabularies::from_records(&data.train)?;
        let tr = data.samples(Split::Train, &vocab.relations, cfg.model.pe_dim)?;
        let va = data.samples(Split::Val, &vocab.relations, cfg.model.pe_dim)?;
        let opts = TrainOptions { out: out.join(&v.name), resume: false, eval_each_epoch: false, workers };
        let run = train(&cfg, vocab, &data.scenes, &tr, &va, &opts)?;
        let (m, _) = evaluate(&run.state.model, &data.scenes, &va, workers)?;
        let base_miou = rows.first().map_or(m.miou, |r| r.miou);
        rows.push(AblationRow {
            name: v.name.clone(),
            overrides: v.overrides.clone(),
            miou: m.miou,
            acc_at_025: m.acc_at_025,
            acc_at_05: m.acc_at_05,
            delta_miou: m.miou - base_miou,
            final_loss: run.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
        });
    }
    let mut csv = String::from("variant,mIoU,acc_at_025,acc_at_05,delta_mIoU,final_loss\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.name, r.miou, r.acc_at_025, r.acc_at_05, r.delta_miou, r.final_loss
        ));
    }
    let csv_path = out.join("ablation.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    crate::scene::io::write_json(&out.join("ablation.json"), &rows)?;
    Ok(rows)
}
