//! Naive-loop oracles and random instance builders shared by the
//! integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nalgebra::DVector;

use stmn::ddi::{graph_attention, DdiState, DdiStructure, GraphAttentionParams};
use stmn::harness::gradcheck::{micro_config, micro_instance};
use stmn::language::{
    laplacian, laplacian_pe, merge_trees, orient_edges, DependencyGraph, DependencyTree, DirectionMode,
    RelationVocabulary,
};
use stmn::model::{Model, ModelConfig};
use stmn::numerics::{ParamStore, Tape, Tensor};
use stmn::objective::{bce_loss, dice_loss, rel_loss, score_loss, total_loss, LossTerms, LossWeights};
use stmn::scene::{pool_gt_mask, superpoint_pool, SuperpointPartition};
use stmn::stm::{additive_mask, relevance_filter};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn unflat(v: &[f64], cols: usize) -> Mat {
    v.chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A random partition with every cell nonempty.
pub fn rand_partition(n_p: usize, n_s: usize, rng: &mut ChaCha8Rng) -> SuperpointPartition {
    let mut assignment: Vec<usize> = (0..n_p).map(|i| if i < n_s { i } else { rng.random_range(0..n_s) }).collect();
    for i in (1..n_p).rev() {
        let j = rng.random_range(0..=i);
        assignment.swap(i, j);
    }
    SuperpointPartition::from_assignment(assignment).unwrap()
}

/// Random sentence trees built by attaching tokens to already placed ones.
pub fn rand_trees(rng: &mut ChaCha8Rng, sentences: usize, max_len: usize) -> Vec<DependencyTree> {
    let labels = ["det", "amod", "nmod", "case", "obl", "cop"];
    (0..sentences)
        .map(|_| {
            let n = rng.random_range(1..=max_len);
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let mut heads = vec![0; n];
            for k in 1..n {
                heads[order[k]] = order[rng.random_range(0..k)] + 1;
            }
            DependencyTree {
                forms: (0..n).map(|i| format!("w{i}")).collect(),
                heads,
                deprels: (0..n)
                    .map(|i| if i == order[0] { "root".into() } else { labels[rng.random_range(0..labels.len())].into() })
                    .collect(),
            }
        })
        .collect()
}

pub fn rand_graph(rng: &mut ChaCha8Rng) -> DependencyGraph {
    let s = rng.random_range(1..=3);
    let trees = rand_trees(rng, s, 7);
    let vocab = RelationVocabulary::from_trees(&trees);
    let g = merge_trees(&trees, &vocab).unwrap();
    let mode = DirectionMode::ALL[rng.random_range(0..3)];
    orient_edges(&g, mode)
}

// ---- superpoint pooling ---------------------------------------------------

pub fn oracle_pool(f: &Mat, assignment: &[usize], n_s: usize) -> Mat {
    let c = f[0].len();
    let mut sum = vec![vec![0.0; c]; n_s];
    let mut count = vec![0usize; n_s];
    for (p, &s) in assignment.iter().enumerate() {
        count[s] += 1;
        for j in 0..c {
            sum[s][j] += f[p][j];
        }
    }
    for s in 0..n_s {
        for j in 0..c {
            sum[s][j] /= count[s] as f64;
        }
    }
    sum
}

pub fn check_superpoint_pool(seed: u64, instances: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..instances {
        let mut r = rng(seed + t as u64);
        let n_p = r.random_range(1..60);
        let n_s = r.random_range(1..=n_p);
        let c = r.random_range(1..6);
        let part = rand_partition(n_p, n_s, &mut r);
        let f = rand_mat(n_p, c, &mut r);
        let mut tape = Tape::new();
        let v = tape.constant(n_p, c, flat(&f)).unwrap();
        let out = superpoint_pool(&mut tape, v, &part).unwrap();
        let want = oracle_pool(&f, part.assignment(), n_s);
        worst = worst.max(max_diff(tape.value(out), &flat(&want)));
    }
    worst
}

pub fn check_pool_gt_mask(seed: u64, instances: usize) -> f64 {
    let mut mismatches = 0usize;
    for t in 0..instances {
        let mut r = rng(seed + t as u64);
        let n_p = r.random_range(1..60);
        let n_s = r.random_range(1..=n_p);
        let part = rand_partition(n_p, n_s, &mut r);
        let mask: Vec<bool> = (0..n_p).map(|_| r.random_bool(0.5)).collect();
        let got = pool_gt_mask(&mask, &part).unwrap();
        for s in 0..n_s {
            let (mut on, mut all) = (0usize, 0usize);
            for p in 0..n_p {
                if part.assignment()[p] == s {
                    all += 1;
                    on += mask[p] as usize;
                }
            }
            if got[s] != (2 * on > all) {
                mismatches += 1;
            }
        }
    }
    mismatches as f64
}

// ---- graph attention ------------------------------------------------------

pub struct GaOracle {
    pub node_update: Mat,
    pub edge_update: Mat,
    /// Per head, per edge.
    pub weights: Vec<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn oracle_graph_attention(h: &Mat, e: &Mat, g: &DependencyGraph, w: &[Mat; 6], heads: usize) -> GaOracle {
    let [wq, wk, wv, we, oh, oe] = w;
    let (q, k, v, ee) = (mm(h, wq), mm(h, wk), mm(h, wv), mm(e, we));
    let d = h[0].len();
    let hd = d / heads;
    let n_e = g.edges.len();
    let mut w_hat = vec![vec![0.0; d]; n_e];
    for (t, edge) in g.edges.iter().enumerate() {
        for c in 0..d {
            w_hat[t][c] = q[edge.dst][c] * k[edge.src][c] * ee[t][c] / (hd as f64).sqrt();
        }
    }
    let mut agg = vec![vec![0.0; d]; h.len()];
    let mut weights = Vec::new();
    for head in 0..heads {
        let cols = head * hd..(head + 1) * hd;
        let logit: Vec<f64> = w_hat.iter().map(|r| r[cols.clone()].iter().sum()).collect();
        let mut alpha = vec![0.0; n_e];
        for node in 0..h.len() {
            let into: Vec<usize> = (0..n_e).filter(|&t| g.edges[t].dst == node).collect();
            if into.is_empty() {
                continue;
            }
            let m = into.iter().map(|&t| logit[t]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = into.iter().map(|&t| (logit[t] - m).exp()).sum();
            for &t in &into {
                alpha[t] = (logit[t] - m).exp() / z;
            }
        }
        for (t, edge) in g.edges.iter().enumerate() {
            for c in cols.clone() {
                agg[edge.dst][c] += alpha[t] * v[edge.src][c];
            }
        }
        weights.push(alpha);
    }
    GaOracle { node_update: mm(&agg, oh), edge_update: mm(&w_hat, oe), weights }
}

pub fn check_graph_attention(seed: u64, instances: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..instances {
        let mut r = rng(seed + t as u64);
        let g = rand_graph(&mut r);
        let heads = [1, 2, 4][r.random_range(0..3)];
        let d = heads * r.random_range(1..4);
        let h = rand_mat(g.node_count, d, &mut r);
        let e = rand_mat(g.edges.len(), d, &mut r);
        let w: [Mat; 6] = std::array::from_fn(|_| rand_mat(d, d, &mut r));
        let mut store = ParamStore::new();
        let ids: Vec<_> = w.iter().enumerate().map(|(i, m)| store.insert(format!("w{i}"), tensor(m))).collect();
        let params = GraphAttentionParams { q: ids[0], k: ids[1], v: ids[2], e: ids[3], o_h: ids[4], o_e: ids[5] };
        let mut tape = Tape::new();
        let hv = tape.constant(g.node_count, d, flat(&h)).unwrap();
        let ev = tape.constant(g.edges.len(), d, flat(&e)).unwrap();
        let out = graph_attention(&mut tape, &store, DdiState { h: hv, e: ev }, &g, &params, heads).unwrap();
        let want = oracle_graph_attention(&h, &e, &g, &w, heads);
        worst = worst.max(max_diff(tape.value(out.node_update), &flat(&want.node_update)));
        worst = worst.max(max_diff(tape.value(out.edge_update), &flat(&want.edge_update)));
        for (head, a) in out.weights.iter().enumerate() {
            worst = worst.max(max_diff(tape.value(*a), &want.weights[head]));
        }
    }
    worst
}

// ---- relevance filter -----------------------------------------------------

pub struct RelevanceOracle {
    pub attention: Mat,
    pub s_r: Vec<f64>,
    pub indices: Vec<usize>,
    pub s_rel: Mat,
}

pub fn oracle_relevance(s_hat: &Mat, words: &Mat, qs: &Mat, kt: &Mat, k: usize) -> RelevanceOracle {
    let (sq, wk) = (mm(s_hat, qs), mm(words, kt));
    let (n_s, n_w, d) = (s_hat.len(), words.len(), s_hat[0].len());
    let mut logits = vec![vec![0.0; n_w]; n_s];
    for i in 0..n_s {
        for j in 0..n_w {
            logits[i][j] = (0..d).map(|c| sq[i][c] * wk[j][c]).sum::<f64>() / (d as f64).sqrt();
        }
    }
    let mut attention = vec![vec![0.0; n_w]; n_s];
    for j in 0..n_w {
        let m = (0..n_s).map(|i| logits[i][j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n_s).map(|i| (logits[i][j] - m).exp()).sum();
        for i in 0..n_s {
            attention[i][j] = (logits[i][j] - m).exp() / z;
        }
    }
    let s_r: Vec<f64> = attention.iter().map(|r| r.iter().sum()).collect();
    // Repeated strict-maximum selection; the first maximum wins ties.
    let mut taken = vec![false; n_s];
    let mut indices = Vec::new();
    for _ in 0..k.min(n_s) {
        let mut best: Option<usize> = None;
        for i in 0..n_s {
            if !taken[i] && best.is_none_or(|b| s_r[i] > s_r[b]) {
                best = Some(i);
            }
        }
        taken[best.unwrap()] = true;
        indices.push(best.unwrap());
    }
    indices.sort_unstable();
    let mut s_rel: Mat = indices.iter().map(|&i| s_hat[i].clone()).collect();
    s_rel.push((0..d).map(|c| s_hat.iter().map(|r| r[c]).sum::<f64>() / n_s as f64).collect());
    RelevanceOracle { attention, s_r, indices, s_rel }
}

pub fn check_relevance_filter(seed: u64, instances: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..instances {
        let mut r = rng(seed + t as u64);
        let n_s = r.random_range(1..40);
        let n_w = r.random_range(1..8);
        let d = r.random_range(1..6);
        let c_t = r.random_range(1..6);
        let k = r.random_range(1..n_s + 4);
        let s_hat = rand_mat(n_s, d, &mut r);
        let words = rand_mat(n_w, c_t, &mut r);
        let qs = rand_mat(d, d, &mut r);
        let kt = rand_mat(c_t, d, &mut r);
        let mut store = ParamStore::new();
        let q_id = store.insert("q_s", tensor(&qs));
        let k_id = store.insert("k_t", tensor(&kt));
        let mut tape = Tape::new();
        let sv = tape.constant(n_s, d, flat(&s_hat)).unwrap();
        let wv = tape.constant(n_w, c_t, flat(&words)).unwrap();
        let got = relevance_filter(&mut tape, &store, sv, wv, q_id, k_id, k).unwrap();
        let want = oracle_relevance(&s_hat, &words, &qs, &kt, k);
        if got.indices != want.indices {
            return f64::INFINITY;
        }
        worst = worst.max(max_diff(tape.value(got.attention), &flat(&want.attention)));
        worst = worst.max(max_diff(tape.value(got.s_r), &want.s_r));
        worst = worst.max(max_diff(tape.value(got.s_rel), &flat(&want.s_rel)));
    }
    worst
}

// ---- losses ---------------------------------------------------------------

pub fn oracle_bce(p: &[f64], y: &[bool]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        let q = p[i].clamp(1e-7, 1.0 - 1e-7);
        s += if y[i] { -q.ln() } else { -(1.0 - q).ln() };
    }
    s / p.len() as f64
}

pub fn oracle_dice(p: &[f64], y: &[bool]) -> f64 {
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        let yi = if y[i] { 1.0 } else { 0.0 };
        inter += p[i] * yi;
        sp += p[i];
        sy += yi;
    }
    1.0 - (2.0 * inter + 1e-6) / (sp + sy + 1e-6)
}

pub fn oracle_score(s: f64, iou: f64) -> f64 {
    if iou > 0.5 {
        (s - iou).abs()
    } else {
        0.0
    }
}

pub fn check_losses(seed: u64, instances: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let w = LossWeights::default();
    for t in 0..instances {
        let mut r = rng(seed + t as u64);
        let n = r.random_range(1..50);
        let n_w = r.random_range(1..10);
        let p: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let y: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        // Word-normalized relevance mass, at most one per superpoint.
        let s_r: Vec<f64> = (0..n).map(|_| r.random_range(0.0..n_w as f64)).collect();
        let s = r.random_range(0.0..1.0);
        let iou = r.random_range(0.0..1.0);
        let mut tape = Tape::new();
        let pv = tape.constant(1, n, p.clone()).unwrap();
        let rv = tape.constant(n, 1, s_r.clone()).unwrap();
        let sv = tape.constant(1, 1, vec![s]).unwrap();
        let terms = LossTerms {
            bce: bce_loss(&mut tape, pv, &y).unwrap(),
            dice: dice_loss(&mut tape, pv, &y).unwrap(),
            rel: rel_loss(&mut tape, rv, &y, n_w).unwrap(),
            score: score_loss(&mut tape, sv, iou).unwrap(),
        };
        let total = total_loss(&mut tape, &terms, &w).unwrap();
        let rel_p: Vec<f64> = s_r.iter().map(|v| v / n_w as f64).collect();
        let want = [
            oracle_bce(&p, &y),
            oracle_dice(&p, &y),
            oracle_bce(&rel_p, &y),
            oracle_score(s, iou),
        ];
        let want_total = w.bce * want[0] + w.dice * want[1] + w.rel * want[2] + w.score * want[3];
        let got = [terms.bce, terms.dice, terms.rel, terms.score, total].map(|v| tape.scalar(v));
        for (g, e) in got.iter().zip(want.iter().chain([want_total].iter())) {
            worst = worst.max((g - e).abs());
        }
    }
    worst
}

// ---- structural invariants ------------------------------------------------

fn ensure(ok: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

/// Graph sizes and Laplacian eigenpairs on random sentence forests.
pub fn check_graph_invariants(seed: u64, instances: usize) -> Result<(), String> {
    for t in 0..instances {
        let mut r = rng(seed + t as u64);
        let sentences = r.random_range(1..=3);
        let trees = rand_trees(&mut r, sentences, 9);
        let n_w: usize = trees.iter().map(DependencyTree::len).sum();
        let g = merge_trees(&trees, &RelationVocabulary::from_trees(&trees)).map_err(|e| e.to_string())?;
        for mode in DirectionMode::ALL {
            let o = orient_edges(&g, mode);
            let want = if mode == DirectionMode::Bidirectional { 2 * n_w } else { n_w };
            ensure(o.node_count == n_w + 1 && o.edges.len() == want, || {
                format!("instance {t} {mode:?}: {} nodes, {} edges for {n_w} words", o.node_count, o.edges.len())
            })?;
        }
        let k = r.random_range(1..12);
        let pe = laplacian_pe(&g, k);
        let l = laplacian(&g);
        for j in 0..k.min(n_w) {
            let v = DVector::from_vec(pe.column(j));
            let res = (&l * &v - &v * pe.eigenvalues[j]).norm();
            ensure(res <= 1e-8, || format!("instance {t}: eigenpair {j} residual {res:e}"))?;
        }
    }
    Ok(())
}

/// Graph attention weights sum to one over each node's in-edges.
pub fn check_graph_softmax(seed: u64, instances: usize) -> Result<(), String> {
    for t in 0..instances {
        let mut r = rng(seed + t as u64);
        let g = rand_graph(&mut r);
        let heads = [1, 2][r.random_range(0..2)];
        let d = 2 * heads;
        let mut store = ParamStore::new();
        let ids: Vec<_> =
            (0..6).map(|i| store.insert(format!("w{i}"), {
                let m: Mat = rand_mat(d, d, &mut r).into_iter().map(|row| row.iter().map(|v| 3.0 * v).collect()).collect();
                tensor(&m)
            })).collect();
        let params = GraphAttentionParams { q: ids[0], k: ids[1], v: ids[2], e: ids[3], o_h: ids[4], o_e: ids[5] };
        let mut tape = Tape::new();
        let h = tape.constant(g.node_count, d, flat(&rand_mat(g.node_count, d, &mut r))).unwrap();
        let e = tape.constant(g.edges.len(), d, flat(&rand_mat(g.edges.len(), d, &mut r))).unwrap();
        let out = graph_attention(&mut tape, &store, DdiState { h, e }, &g, &params, heads).map_err(|e| e.to_string())?;
        for a in &out.weights {
            let w = tape.value(*a);
            let mut sums = vec![0.0; g.node_count];
            let mut has = vec![false; g.node_count];
            for (i, edge) in g.edges.iter().enumerate() {
                sums[edge.dst] += w[i];
                has[edge.dst] = true;
            }
            for n in 0..g.node_count {
                ensure(!has[n] || (sums[n] - 1.0).abs() <= 1e-9, || format!("instance {t}: node {n} sums to {}", sums[n]))?;
            }
        }
    }
    Ok(())
}

/// Decoder-level invariants on the micro problem: relevance columns and
/// cross-attention rows are distributions, and masks are `{0, −∞}` with the
/// global slot open.
pub fn check_decoder_invariants(seed: u64, instances: usize) -> Result<(), String> {
    for t in 0..instances {
        let s = seed + t as u64;
        let micro = micro_instance(s).map_err(|e| e.to_string())?;
        let cfg = ModelConfig {
            direction: DirectionMode::ALL[t % 3],
            ..micro_config(DdiStructure::ALL[t % 4])
        };
        let model = Model::new(cfg, micro.vocab.clone(), s).map_err(|e| e.to_string())?;
        let mut tape = Tape::new();
        let sp = model.encode_scene(&mut tape, &micro.scene).map_err(|e| e.to_string())?;
        let out = model.decode(&mut tape, sp, &micro.expr, None).map_err(|e| e.to_string())?;
        let n_w = micro.expr.expr.len();
        let mass: f64 = tape.value(out.s_r).iter().sum();
        ensure((mass - n_w as f64).abs() <= 1e-9, || format!("instance {t}: relevance mass {mass} for {n_w} words"))?;
        for (round, st) in out.rounds.iter().enumerate() {
            let (rows, slots) = tape.dims(st.attention);
            let a = tape.value(st.attention);
            for i in 0..rows {
                let sum: f64 = a[i * slots..(i + 1) * slots].iter().sum();
                ensure((sum - 1.0).abs() <= 1e-9, || format!("instance {t} round {round}: row {i} sums to {sum}"))?;
            }
            let add = additive_mask(&st.mask);
            ensure(add.iter().all(|&v| v == 0.0 || v == f64::NEG_INFINITY), || format!("round {round}: mask values"))?;
            for i in 0..rows {
                ensure(add[i * slots + slots - 1] == 0.0, || format!("instance {t} round {round}: global slot closed"))?;
                for j in 0..slots {
                    if add[i * slots + j] == f64::NEG_INFINITY {
                        ensure(a[i * slots + j] == 0.0, || format!("round {round}: closed slot got weight"))?;
                    }
                }
            }
        }
    }
    Ok(())
}

// ---- small end-to-end runs ------------------------------------------------

/// A run small enough for the regular test suite.
pub fn tiny_config(seed: u64) -> stmn::harness::RunConfig {
    stmn::harness::RunConfig::default()
        .with_overrides(&serde_json::json!({
            "seed": seed,
            "data": {"train_expressions": 8, "val_expressions": 4, "generator": {"n_points": 800}},
            "model": {"point_dim": 16, "text_dim": 16, "dim": 16, "pe_dim": 4, "stm": {"k_rel": 16}},
            "train": {"lr": 1e-3, "batch_size": 4, "epochs": 2}
        }))
        .unwrap()
}
