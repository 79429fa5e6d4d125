//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any hard criterion fails. The ablation ordering is
//! a soft check: it is reported but does not fail the run.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use stmn::harness::dataset::read_jsonl;
use stmn::harness::{
    bench, evaluate, load_model, make_dataset, run_gradcheck, train, train_step, Dataset, EpochLog, RunConfig, Sample,
    Split, StepLog, TrainOptions, TrainOutcome, TrainState,
};
use stmn::model::Vocabularies;
use stmn::objective::MetricsReport;

const TOY: &str = include_str!("../../../configs/toy.json");
const SECOND_SEED: u64 = 2;

struct Line {
    name: &'static str,
    passed: bool,
    soft: bool,
}

fn report(name: &'static str, passed: bool, soft: bool, detail: String) -> Line {
    let tag = match (passed, soft) {
        (true, _) => "PASS",
        (false, false) => "FAIL",
        (false, true) => "FAIL(soft)",
    };
    println!("{tag} {name:<28} {detail}");
    Line { name, passed, soft }
}

fn line(name: &'static str, passed: bool, detail: String) -> Line {
    report(name, passed, false, detail)
}

fn toy(seed: u64) -> RunConfig {
    let mut cfg: RunConfig = serde_json::from_str(TOY).expect("toy config parses");
    cfg.seed = seed;
    cfg
}

fn load_or_make(cfg: &RunConfig, dir: &Path) -> Dataset {
    make_dataset(&cfg.data, cfg.seed, dir).expect("dataset");
    Dataset::load(dir, cfg.model.encoder_knn).expect("dataset loads")
}

struct Run {
    outcome: TrainOutcome,
    val: MetricsReport,
    secs: f64,
}

fn run(cfg: &RunConfig, data: &Dataset, out: &Path) -> Run {
    let t = Instant::now();
    let vocab = Vocabularies::from_records(&data.train).unwrap();
    let tr = data.samples(Split::Train, &vocab.relations, cfg.model.pe_dim).unwrap();
    let va = data.samples(Split::Val, &vocab.relations, cfg.model.pe_dim).unwrap();
    let opts = TrainOptions { out: out.to_path_buf(), resume: false, eval_each_epoch: false, workers: 1 };
    let outcome = train(cfg, vocab, &data.scenes, &tr, &va, &opts).expect("training");
    let (val, _) = evaluate(&outcome.state.model, &data.scenes, &va, 1).unwrap();
    Run { outcome, val, secs: t.elapsed().as_secs_f64() }
}

fn gradient_suite() -> Line {
    let t = Instant::now();
    let s = run_gradcheck(0).expect("gradcheck runs");
    let secs = t.elapsed().as_secs_f64();
    let worst = s.lines.iter().map(|l| l.max_rel_error).fold(0.0, f64::max);
    line(
        "gradient_suite",
        s.passed && secs < 120.0,
        format!("{} checks, max rel error {worst:.2e}, {secs:.1}s", s.lines.len()),
    )
}

fn oracle_equivalence() -> Line {
    let diffs = [
        ("superpoint_pool", common::check_superpoint_pool(11, 100)),
        ("pool_gt_mask", common::check_pool_gt_mask(12, 100)),
        ("graph_attention", common::check_graph_attention(13, 100)),
        ("relevance_filter", common::check_relevance_filter(14, 100)),
        ("losses", common::check_losses(15, 100)),
    ];
    let worst = diffs.iter().map(|d| d.1).fold(0.0, f64::max);
    let detail = diffs.iter().map(|(n, d)| format!("{n} {d:.1e}")).collect::<Vec<_>>().join(", ");
    line("oracle_equivalence", worst <= 1e-10, detail)
}

fn structural_invariants() -> Line {
    let checks = [
        common::check_graph_invariants(21, 200),
        common::check_graph_softmax(22, 100),
        common::check_decoder_invariants(23, 24),
    ];
    let errors: Vec<String> = checks.into_iter().filter_map(Result::err).collect();
    let detail = if errors.is_empty() { "graphs, eigenpairs, softmax axes, masks".to_string() } else { errors.join("; ") };
    line("structural_invariants", errors.is_empty(), detail)
}

fn overfit(scratch: &Path) -> Line {
    let t = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.data.train_expressions = 4;
    cfg.data.val_expressions = 4;
    let data = load_or_make(&cfg, &scratch.join("overfit"));
    let vocab = Vocabularies::from_records(&data.train).unwrap();
    let samples = data.samples(Split::Train, &vocab.relations, cfg.model.pe_dim).unwrap();
    let one: Vec<&Sample> = samples.iter().take(1).collect();
    let mut state = TrainState::fresh(&cfg, vocab).unwrap();
    let (mut best, mut steps) = (0.0, 0);
    for step in 0..300 {
        train_step(&mut state, &data.scenes, &one, &[step as u64], &cfg.loss, cfg.train.grad_clip, 1e-3).unwrap();
        steps = step + 1;
        if steps % 10 == 0 {
            let (m, _) = evaluate(&state.model, &data.scenes, &samples[..1], 1).unwrap();
            best = m.miou;
            if best >= 0.9 {
                break;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    line("single_sample_overfit", best >= 0.9 && secs < 120.0, format!("IoU {best:.3} after {steps} steps, {secs:.1}s"))
}

fn generalization(first: &Run, second: &Run) -> Line {
    let (a, b) = (&first.val, &second.val);
    let ok = a.miou >= 0.5 && a.acc_at_025 >= 0.6 && (a.miou - b.miou).abs() <= 0.1 && first.secs < 1800.0;
    line(
        "synthetic_generalization",
        ok,
        format!(
            "seed 1: mIoU {:.3} Acc@0.25 {:.3} Acc@0.5 {:.3} ({:.0}s); seed {SECOND_SEED}: mIoU {:.3} Acc@0.25 {:.3}",
            a.miou, a.acc_at_025, a.acc_at_05, first.secs, b.miou, b.acc_at_025
        ),
    )
}

fn ablation(full: &Run, data: &Dataset, scratch: &Path) -> Line {
    let base = toy(1);
    let ga = base.with_overrides(&serde_json::json!({"model": {"ddi": {"structure": "ga"}}})).unwrap();
    let wo = base.with_overrides(&serde_json::json!({"model": {"use_ddi": false, "stm": {"kernel": "cls"}}})).unwrap();
    let ga = run(&ga, data, &scratch.join("ablate_ga")).val.miou;
    let wo = run(&wo, data, &scratch.join("ablate_wo_ddi")).val.miou;
    let par = full.val.miou;
    let worst = (ga - par).max(wo - ga).max(0.0);
    report(
        "ablation_ordering",
        worst <= 0.05,
        true,
        format!("GA||SA {par:.3} >= GA {ga:.3} >= w/o DDI {wo:.3}; worst violation {worst:.3}"),
    )
}

fn determinism(full: &Run, data: &Dataset, scratch: &Path) -> Line {
    let mut one = toy(1);
    one.train.epochs = 1;
    let (a, b) = (scratch.join("det_a"), scratch.join("det_b"));
    run(&one, data, &a);
    run(&one, data, &b);
    let first = |dir: &Path| -> (EpochLog, Vec<StepLog>) {
        let e: Vec<EpochLog> = read_jsonl(&dir.join("train_log.jsonl")).unwrap();
        let s: Vec<StepLog> = read_jsonl(&dir.join("steps.jsonl")).unwrap();
        (e[0].clone(), s.into_iter().filter(|l| l.epoch == 0).collect())
    };
    let (ea, sa) = first(&a);
    let (eb, sb) = first(&b);
    let (ef, sf) = first(&scratch.join("seed1"));
    let bits = |s: &[StepLog]| s.iter().map(|l| l.stats.loss.to_bits()).collect::<Vec<_>>();
    let logs_equal = ea.mean_loss.to_bits() == eb.mean_loss.to_bits()
        && ea.mean_loss.to_bits() == ef.mean_loss.to_bits()
        && bits(&sa) == bits(&sb)
        && bits(&sa) == bits(&sf);

    let loaded = load_model(&scratch.join("seed1").join("checkpoint.bin")).unwrap();
    let va = data.samples(Split::Val, &loaded.vocab.relations, loaded.config.pe_dim).unwrap();
    let (m, recs) = evaluate(&loaded, &data.scenes, &va, 1).unwrap();
    let (m0, recs0) = evaluate(&full.outcome.state.model, &data.scenes, &va, 1).unwrap();
    let same_eval = m.miou.to_bits() == m0.miou.to_bits()
        && m.acc_at_025 == m0.acc_at_025
        && m.acc_at_05 == m0.acc_at_05
        && m.per_tag == m0.per_tag
        && recs.iter().zip(&recs0).all(|(x, y)| x.superpoint_mask == y.superpoint_mask);
    line(
        "determinism",
        logs_equal && same_eval,
        format!("epoch-1 logs identical: {logs_equal} ({} steps); checkpoint eval identical: {same_eval}", sa.len()),
    )
}

fn latency(full: &Run, data: &Dataset) -> Line {
    let model = &full.outcome.state.model;
    let va = data.samples(Split::Val, &model.vocab.relations, model.config.pe_dim).unwrap();
    let r = bench(model, &data.scenes, &va, 100).unwrap();
    line(
        "latency_superpoint_vs_point",
        r.speedup >= 2.0 && r.point_to_superpoint_ratio >= 10.0 && r.superpoint.inferences >= 100,
        format!(
            "superpoint median {:.2}ms mean {:.2}ms, point median {:.2}ms mean {:.2}ms, speedup {:.1}x at N_p/N_s {:.1}",
            r.superpoint.median_ms, r.superpoint.mean_ms, r.point.median_ms, r.point.mean_ms, r.speedup,
            r.point_to_superpoint_ratio
        ),
    )
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful here.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let scratch = tempfile::tempdir().unwrap();
    let dir = scratch.path();
    let mut lines = vec![gradient_suite(), oracle_equivalence(), structural_invariants(), overfit(dir)];

    let first_cfg = toy(1);
    let first_data = load_or_make(&first_cfg, &dir.join("data1"));
    let first = run(&first_cfg, &first_data, &dir.join("seed1"));
    let second_cfg = toy(SECOND_SEED);
    let second_data = load_or_make(&second_cfg, &dir.join("data2"));
    let second = run(&second_cfg, &second_data, &dir.join("seed2"));
    lines.push(generalization(&first, &second));
    lines.push(ablation(&first, &first_data, dir));
    lines.push(determinism(&first, &first_data, dir));
    lines.push(latency(&first, &first_data));

    let passed = lines.iter().filter(|l| l.passed).count();
    println!("{passed} of {} criteria passed", lines.len());
    let failed: Vec<&str> = lines.iter().filter(|l| !l.passed && !l.soft).map(|l| l.name).collect();
    let _ = fs::remove_dir_all(dir);
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
