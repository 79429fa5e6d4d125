//! Finite-difference checks of every tape operation and of the full
//! training loss on a micro instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ddi::{DdiConfig, DdiStructure};
use crate::error::Result;
use crate::language::{write_conllu, DependencyTree, ExpressionRecord, Tag};
use crate::model::{Model, ModelConfig, PreparedExpression, PreparedScene, Vocabularies};
use crate::numerics::{finite_difference_check, Axis, ParamStore, Tape, Tensor, Var, DEFAULT_STEP, LN_EPS};
use crate::objective::LossWeights;
use crate::scene::{ObjectRecord, PointCloudScene, SuperpointPartition};
use crate::stm::StmConfig;

pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub worst: String,
    pub entries: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckSummary {
    pub lines: Vec<CheckLine>,
    pub passed: bool,
}

type Build = fn(&mut Tape, &[Var], &mut ChaCha8Rng) -> Result<Var>;

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Each case: name, input shapes with value ranges, and the op under test.
fn op_cases() -> Vec<(&'static str, Vec<(usize, usize, f64, f64)>, Build)> {
    let any = |r, c| (r, c, -2.0, 2.0);
    let pos = |r, c| (r, c, 0.2, 3.0);
    vec![
        ("matmul", vec![any(3, 4), any(4, 2)], |t, v, _| t.matmul(v[0], v[1])),
        ("matmul_nt", vec![any(3, 4), any(5, 4)], |t, v, _| t.matmul_nt(v[0], v[1])),
        ("transpose", vec![any(3, 4)], |t, v, _| Ok(t.transpose(v[0]))),
        ("add", vec![any(3, 4), any(3, 4)], |t, v, _| t.add(v[0], v[1])),
        ("sub", vec![any(3, 4), any(3, 4)], |t, v, _| t.sub(v[0], v[1])),
        ("mul", vec![any(3, 4), any(3, 4)], |t, v, _| t.mul(v[0], v[1])),
        ("div", vec![any(3, 4), pos(3, 4)], |t, v, _| t.div(v[0], v[1])),
        ("add_row", vec![any(3, 4), any(1, 4)], |t, v, _| t.add_row(v[0], v[1])),
        ("mul_col", vec![any(3, 4), any(3, 1)], |t, v, _| t.mul_col(v[0], v[1])),
        ("scale", vec![any(3, 4)], |t, v, _| Ok(t.scale(v[0], -1.7))),
        ("shift", vec![any(3, 4)], |t, v, _| Ok(t.shift(v[0], 0.3))),
        ("sigmoid", vec![any(3, 4)], |t, v, _| Ok(t.sigmoid(v[0]))),
        ("gelu", vec![any(3, 4)], |t, v, _| Ok(t.gelu(v[0]))),
        ("relu", vec![any(3, 4)], |t, v, _| Ok(t.relu(v[0]))),
        ("exp", vec![any(3, 4)], |t, v, _| Ok(t.activation(v[0], crate::numerics::Activation::Exp))),
        ("log", vec![pos(3, 4)], |t, v, _| Ok(t.log(v[0]))),
        ("abs", vec![any(3, 4)], |t, v, _| Ok(t.abs(v[0]))),
        ("clamp", vec![any(3, 4)], |t, v, _| Ok(t.clamp(v[0], -1.0, 1.0))),
        ("softmax_cols", vec![any(3, 4)], |t, v, _| Ok(t.softmax(v[0], Axis::Cols))),
        ("softmax_rows", vec![any(3, 4)], |t, v, _| Ok(t.softmax(v[0], Axis::Rows))),
        ("masked_softmax_rows", vec![any(3, 4)], |t, v, _| {
            let allowed = [true, false, true, true, false, true, false, false, true, true, true, true];
            t.masked_softmax_rows(v[0], &allowed)
        }),
        ("segment_softmax", vec![any(7, 1)], |t, v, _| t.segment_softmax(v[0], &[0, 2, 0, 1, 2, 2, 0])),
        ("layer_norm", vec![any(3, 5), any(1, 5), any(1, 5)], |t, v, _| t.layer_norm(v[0], v[1], v[2], LN_EPS)),
        ("sum_all", vec![any(3, 4)], |t, v, _| Ok(t.sum_all(v[0]))),
        ("mean_all", vec![any(3, 4)], |t, v, _| Ok(t.mean_all(v[0]))),
        ("row_sums", vec![any(3, 4)], |t, v, _| Ok(t.row_sums(v[0]))),
        ("col_means", vec![any(3, 4)], |t, v, _| Ok(t.col_means(v[0]))),
        ("gather_rows", vec![any(4, 3)], |t, v, _| t.gather_rows(v[0], &[2, 0, 2, 3])),
        ("scatter_add_rows", vec![any(4, 3)], |t, v, _| t.scatter_add_rows(v[0], &[1, 0, 1, 4], 5)),
        ("group_mean", vec![any(6, 3)], |t, v, _| t.group_mean(v[0], &[1, 0, 1, 2, 2, 1], 3)),
        ("neighbor_mean", vec![any(4, 3)], |t, v, _| t.neighbor_mean(v[0], &[0, 2, 3, 3, 6], &[0, 1, 2, 1, 2, 3])),
        ("concat_rows", vec![any(2, 3), any(3, 3)], |t, v, _| t.concat_rows(&[v[0], v[1]])),
        ("concat_cols", vec![any(3, 2), any(3, 4)], |t, v, _| t.concat_cols(&[v[0], v[1]])),
        ("slice_cols", vec![any(3, 6)], |t, v, _| t.slice_cols(v[0], 2, 3)),
    ]
}

fn check_op(name: &str, shapes: &[(usize, usize, f64, f64)], build: Build, seed: u64) -> Result<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c, lo, hi))| store.insert(format!("x{i}"), uniform(r, c, lo, hi, &mut rng)))
        .collect();
    let probe_seed = rng.random::<u64>();
    let report = finite_difference_check(&mut store, DEFAULT_STEP, |tape, p| {
        let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(p, id)).collect();
        let y = build(tape, &vars, &mut rng)?;
        // Contract with fixed random weights so constant-sum outputs still
        // carry a gradient.
        let (r, c) = tape.dims(y);
        let w = uniform(r, c, -1.0, 1.0, &mut rng);
        let w = tape.constant_tensor(&w)?;
        let z = tape.mul(y, w)?;
        Ok(tape.sum_all(z))
    })?;
    Ok(line(name, report))
}

fn line(name: &str, r: crate::numerics::GradCheckReport) -> CheckLine {
    CheckLine {
        name: name.to_string(),
        passed: r.max_rel_error <= TOLERANCE,
        max_rel_error: r.max_rel_error,
        worst: r.worst,
        entries: r.entries,
    }
}

/// The micro problem: 200 points, 12 superpoints, 5 words, width 8, 2 rounds.
pub struct MicroInstance {
    pub scene: PreparedScene,
    pub expr: PreparedExpression,
    pub vocab: Vocabularies,
}

pub fn micro_instance(seed: u64) -> Result<MicroInstance> {
    const N_P: usize = 200;
    const N_S: usize = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<[f64; 3]> =
        (0..N_P).map(|_| [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(0.0..1.0)]).collect();
    let aux = (0..N_P)
        .map(|_| {
            let n: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)];
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            [rng.random(), rng.random(), rng.random(), n[0] / len, n[1] / len, n[2] / len]
        })
        .collect();
    let instance_id: Vec<usize> = (0..N_P).map(|i| i * 3 / N_P).collect();
    let scene = PointCloudScene {
        scene_id: "micro".into(),
        positions,
        aux,
        category_id: instance_id.clone(),
        instance_id,
    };
    let objects = vec![
        ObjectRecord { instance: 1, category: "chair".into(), color: "red".into(), relations: vec![] },
        ObjectRecord { instance: 2, category: "table".into(), color: "blue".into(), relations: vec![] },
    ];
    let partition = SuperpointPartition::from_assignment((0..N_P).map(|i| i * N_S / N_P).collect())?;
    let scene = PreparedScene::new(scene, objects, partition, 4)?;
    let tree = DependencyTree {
        forms: ["the", "red", "chair", "near", "table"].map(String::from).to_vec(),
        heads: vec![3, 3, 0, 5, 3],
        deprels: ["det", "amod", "root", "case", "nmod"].map(String::from).to_vec(),
    };
    let record = ExpressionRecord {
        scene_id: "micro".into(),
        expr_id: "micro-0".into(),
        text: "the red chair near table".into(),
        conllu: write_conllu(&[tree]),
        target_instance: 1,
        tag: Tag::Unique,
        mentioned_categories: vec!["chair".into(), "table".into()],
    };
    let vocab = Vocabularies::from_records([&record])?;
    let expr = PreparedExpression::new(record, &scene, &vocab.relations, 4)?;
    Ok(MicroInstance { scene, expr, vocab })
}

pub fn micro_config(structure: DdiStructure) -> ModelConfig {
    ModelConfig {
        point_dim: 8,
        text_dim: 8,
        dim: 8,
        pe_dim: 4,
        encoder_knn: 4,
        stm: StmConfig { rounds: 2, k_rel: 6, ..Default::default() },
        ddi: DdiConfig { structure, ..Default::default() },
        ..Default::default()
    }
}

/// Gradient of the full weighted loss with respect to every parameter.
pub fn check_total_loss(structure: DdiStructure, seed: u64) -> Result<CheckLine> {
    let micro = micro_instance(seed)?;
    let mut model = Model::new(micro_config(structure), micro.vocab.clone(), seed)?;
    let weights = LossWeights::default();
    let mut store = std::mem::take(&mut model.store);
    let report = finite_difference_check(&mut store, DEFAULT_STEP, |tape, p| {
        let mut m = model.clone();
        m.store = p.clone();
        let s = m.encode_scene(tape, &micro.scene)?;
        let out = m.decode(tape, s, &micro.expr, None)?;
        Ok(m.loss(tape, &out, &micro.expr, &weights)?.0)
    })?;
    Ok(line(&format!("total_loss/{}", structure_name(structure)), report))
}

fn structure_name(s: DdiStructure) -> String {
    serde_json::to_value(s).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// Every op plus the full loss under all four interaction structures.
pub fn run_gradcheck(seed: u64) -> Result<GradcheckSummary> {
    let mut lines = Vec::new();
    for (i, (name, shapes, build)) in op_cases().into_iter().enumerate() {
        lines.push(check_op(name, &shapes, build, seed.wrapping_add(i as u64))?);
    }
    for s in [DdiStructure::Ga, DdiStructure::SaGa, DdiStructure::GaSa, DdiStructure::GaParSa] {
        lines.push(check_total_loss(s, seed)?);
    }
    let passed = lines.iter().all(|l| l.passed);
    Ok(GradcheckSummary { lines, passed })
}
