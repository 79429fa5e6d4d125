//! Superpoint-text matching: relevance filtering of superpoints, multi-round
//! masked superpoint-word aggregation, response maps and kernel selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ddi::{ddi_layer, init_ddi_state, DdiInputParams, DdiLayerParams, DdiState};
use crate::error::{Error, Result};
use crate::language::{DependencyGraph, LaplacianPe};
use crate::numerics::{Axis, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelStrategy {
    /// Response map of the ROOT token.
    Root,
    /// Kernel is the mean of all token features.
    Avg,
    /// Token with the highest visual correlation score.
    #[default]
    Top1,
    /// Sentence-level vector, bypassing the decoder rounds.
    Cls,
}

impl KernelStrategy {
    pub const ALL: [KernelStrategy; 4] =
        [KernelStrategy::Root, KernelStrategy::Avg, KernelStrategy::Top1, KernelStrategy::Cls];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StmConfig {
    pub rounds: usize,
    /// Superpoints kept by the relevance filter (clamped to `N_s`).
    pub k_rel: usize,
    pub tau: f64,
    pub kernel: KernelStrategy,
    /// Adds each round's aggregated superpoint features to its word
    /// features instead of replacing them.
    pub residual: bool,
}

impl Default for StmConfig {
    fn default() -> Self {
        StmConfig { rounds: 2, k_rel: 64, tau: 0.5, kernel: KernelStrategy::Top1, residual: true }
    }
}

impl StmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("stm.rounds must be at least 1".into()));
        }
        if self.k_rel == 0 {
            return Err(Error::Config("stm.k_rel must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) && self.tau != 0.0 {
            return Err(Error::Config(format!("stm.tau {} outside [0, 1)", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RoundParams {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub q_t: ParamId,
    pub k_s: ParamId,
}

#[derive(Debug, Clone)]
pub struct StmParams {
    /// `C_p x D`.
    pub w_s: ParamId,
    /// `C_t x D`.
    pub w_t: ParamId,
    /// `D x D`.
    pub q_s: ParamId,
    /// `C_t x D`.
    pub k_t: ParamId,
    pub rounds: Vec<RoundParams>,
    /// `D x 1` and `1 x 1`.
    pub score_w: ParamId,
    pub score_b: ParamId,
}

fn proj(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

impl StmParams {
    pub fn init(store: &mut ParamStore, c_p: usize, c_t: usize, d: usize, rounds: usize, rng: &mut impl Rng) -> Self {
        let w_s = store.insert("stm.w_s", proj(c_p, d, rng));
        let w_t = store.insert("stm.w_t", proj(c_t, d, rng));
        let q_s = store.insert("stm.q_s", proj(d, d, rng));
        let k_t = store.insert("stm.k_t", proj(c_t, d, rng));
        let rounds = (0..rounds)
            .map(|l| {
                let mut p = |n: &str| store.insert(format!("stm.round{l}.{n}"), proj(d, d, rng));
                RoundParams { q: p("q"), k: p("k"), v: p("v"), q_t: p("q_t"), k_s: p("k_s") }
            })
            .collect();
        StmParams {
            w_s,
            w_t,
            q_s,
            k_t,
            rounds,
            score_w: store.insert("stm.score.w", proj(d, 1, rng)),
            score_b: store.insert("stm.score.b", Tensor::zeros(&[1, 1])),
        }
    }

    pub fn lookup(store: &ParamStore, rounds: usize) -> Self {
        StmParams {
            w_s: store.expect_id("stm.w_s"),
            w_t: store.expect_id("stm.w_t"),
            q_s: store.expect_id("stm.q_s"),
            k_t: store.expect_id("stm.k_t"),
            rounds: (0..rounds)
                .map(|l| {
                    let id = |n: &str| store.expect_id(&format!("stm.round{l}.{n}"));
                    RoundParams { q: id("q"), k: id("k"), v: id("v"), q_t: id("q_t"), k_s: id("k_s") }
                })
                .collect(),
            score_w: store.expect_id("stm.score.w"),
            score_b: store.expect_id("stm.score.b"),
        }
    }
}

/// `Ŝ = S W_s`.
pub fn project_superpoints(tape: &mut Tape, store: &ParamStore, s: Var, w_s: ParamId) -> Result<Var> {
    let w = tape.param(store, w_s);
    tape.matmul(s, w)
}

pub struct Relevance {
    /// Selected rows of `Ŝ` followed by their global mean, `(k+1) x D`.
    pub s_rel: Var,
    /// Attention mass received per superpoint, `N_s x 1`.
    pub s_r: Var,
    /// Superpoint-axis softmax, `N_s x N_w`.
    pub attention: Var,
    /// Selected superpoints, ascending.
    pub indices: Vec<usize>,
}

/// Indices of the `k` largest values, ties to the lower index, returned in
/// ascending index order.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k.min(values.len()));
    order.sort_unstable();
    order
}

/// Index of the largest value, ties to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn relevance_filter(
    tape: &mut Tape,
    store: &ParamStore,
    s_hat: Var,
    words: Var,
    q_s: ParamId,
    k_t: ParamId,
    k_rel: usize,
) -> Result<Relevance> {
    let (n_s, d) = tape.dims(s_hat);
    if tape.dims(words).0 == 0 {
        return Err(Error::Invalid("relevance filter needs at least one word".into()));
    }
    let q = tape.param(store, q_s);
    let k = tape.param(store, k_t);
    let sq = tape.matmul(s_hat, q)?;
    let wk = tape.matmul(words, k)?;
    let logits = tape.matmul_nt(sq, wk)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let attention = tape.softmax(logits, Axis::Rows);
    let s_r = tape.row_sums(attention);
    let indices = top_k(tape.value(s_r), k_rel.min(n_s));
    let picked = tape.gather_rows(s_hat, &indices)?;
    let global = tape.col_means(s_hat);
    let s_rel = tape.concat_rows(&[picked, global])?;
    Ok(Relevance { s_rel, s_r, attention, indices })
}

/// Attention mask from a response map: open (`true`) where the map at the
/// slot's superpoint is at least `tau`; the trailing global slot is always
/// open. Row-major `(N_w+1) x (k+1)`.
pub fn mask_from_map(map: &[f64], n_s: usize, indices: &[usize], tau: f64) -> Vec<bool> {
    let rows = map.len() / n_s;
    let slots = indices.len() + 1;
    let mut out = vec![true; rows * slots];
    for i in 0..rows {
        for (j, &sp) in indices.iter().enumerate() {
            out[i * slots + j] = map[i * n_s + sp] >= tau;
        }
    }
    out
}

/// Additive form of a boolean mask: `0` where open, `−∞` where closed.
pub fn additive_mask(open: &[bool]) -> Vec<f64> {
    open.iter().map(|&o| if o { 0.0 } else { f64::NEG_INFINITY }).collect()
}

/// Masked superpoint-word cross-attention. Returns the updated word
/// features and the attention weights.
pub fn swa(
    tape: &mut Tape,
    store: &ParamStore,
    words: Var,
    s_rel: Var,
    open: &[bool],
    round: &RoundParams,
) -> Result<(Var, Var)> {
    let d = tape.dims(words).1;
    let q = tape.param(store, round.q);
    let k = tape.param(store, round.k);
    let v = tape.param(store, round.v);
    let wq = tape.matmul(words, q)?;
    let sk = tape.matmul(s_rel, k)?;
    let sv = tape.matmul(s_rel, v)?;
    let logits = tape.matmul_nt(wq, sk)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = tape.masked_softmax_rows(logits, open)?;
    Ok((tape.matmul(attn, sv)?, attn))
}

/// `σ(Ê Ŝᵀ)`.
pub fn response_map(tape: &mut Tape, e_hat: Var, s_hat: Var) -> Result<Var> {
    let m = tape.matmul_nt(e_hat, s_hat)?;
    Ok(tape.sigmoid(m))
}

pub struct KernelChoice {
    /// Final map, `1 x N_s`.
    pub map: Var,
    /// Kernel embedding, `1 x D`.
    pub kernel: Var,
    /// Selected token row (`None` for Avg and CLS).
    pub index: Option<usize>,
    /// Visual correlation scores (Top1 only).
    pub s_v: Vec<f64>,
}

/// Word-axis softmax of the kernel-scoring logits, summed over slots.
pub fn visual_scores(tape: &mut Tape, store: &ParamStore, e_hat: Var, s_rel: Var, round: &RoundParams) -> Result<Var> {
    let d = tape.dims(e_hat).1;
    let qt = tape.param(store, round.q_t);
    let ks = tape.param(store, round.k_s);
    let eq = tape.matmul(e_hat, qt)?;
    let sk = tape.matmul(s_rel, ks)?;
    let logits = tape.matmul_nt(eq, sk)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let a_v = tape.softmax(logits, Axis::Rows);
    Ok(tape.row_sums(a_v))
}

#[allow(clippy::too_many_arguments)]
pub fn select_kernel(
    tape: &mut Tape,
    store: &ParamStore,
    strategy: KernelStrategy,
    e_hat: Var,
    s_hat: Var,
    s_rel: Var,
    map: Var,
    round: &RoundParams,
    cls_kernel: Option<Var>,
) -> Result<KernelChoice> {
    match strategy {
        KernelStrategy::Root => Ok(KernelChoice {
            map: tape.gather_rows(map, &[0])?,
            kernel: tape.gather_rows(e_hat, &[0])?,
            index: Some(0),
            s_v: Vec::new(),
        }),
        KernelStrategy::Top1 => {
            let s_v = visual_scores(tape, store, e_hat, s_rel, round)?;
            let s_v = tape.value(s_v).to_vec();
            let i = argmax(&s_v);
            Ok(KernelChoice {
                map: tape.gather_rows(map, &[i])?,
                kernel: tape.gather_rows(e_hat, &[i])?,
                index: Some(i),
                s_v,
            })
        }
        KernelStrategy::Avg => {
            let kernel = tape.col_means(e_hat);
            Ok(KernelChoice { map: response_map(tape, kernel, s_hat)?, kernel, index: None, s_v: Vec::new() })
        }
        KernelStrategy::Cls => {
            let kernel = cls_kernel.ok_or_else(|| Error::Config("CLS kernel needs a sentence vector".into()))?;
            Ok(KernelChoice { map: response_map(tape, kernel, s_hat)?, kernel, index: None, s_v: Vec::new() })
        }
    }
}

/// Per-round decoder record.
pub struct DecodeState {
    pub e_hat: Var,
    pub map: Var,
    /// Mask that gated this round's aggregation.
    pub mask: Vec<bool>,
    pub attention: Var,
}

/// Text-side inputs for one expression.
pub struct TextInput<'a> {
    /// Word embeddings `N_w x C_t`.
    pub words: Var,
    /// ROOT embedding `1 x C_t`.
    pub root: Var,
    /// Sentence vector `1 x C_t` (used by the CLS kernel only).
    pub sentence: Var,
    pub graph: &'a DependencyGraph,
    pub pe: Option<&'a LaplacianPe>,
}

/// DDI parameters; `None` disables dependency interaction.
pub struct DdiParams<'a> {
    pub input: &'a DdiInputParams,
    pub layers: &'a [DdiLayerParams],
}

pub struct StmOutput {
    /// Final response map, `1 x N_s`.
    pub map: Var,
    pub kernel_index: Option<usize>,
    pub s_v: Vec<f64>,
    /// Predicted mask quality in `(0, 1)`, `1 x 1`.
    pub score: Var,
    pub s_r: Var,
    pub indices: Vec<usize>,
    pub rounds: Vec<DecodeState>,
}

pub fn stm_forward(
    tape: &mut Tape,
    store: &ParamStore,
    s: Var,
    text: &TextInput,
    params: &StmParams,
    ddi: Option<&DdiParams>,
    cfg: &StmConfig,
) -> Result<StmOutput> {
    if params.rounds.len() < cfg.rounds {
        return Err(Error::Config(format!("{} rounds configured, {} parameterized", cfg.rounds, params.rounds.len())));
    }
    let s_hat = project_superpoints(tape, store, s, params.w_s)?;
    let n_s = tape.dims(s_hat).0;
    let rel = relevance_filter(tape, store, s_hat, text.words, params.q_s, params.k_t, cfg.k_rel)?;
    let slots = rel.indices.len() + 1;

    let w_t = tape.param(store, params.w_t);
    let tokens = tape.concat_rows(&[text.root, text.words])?;
    let mut e_hat = tape.matmul(tokens, w_t)?;
    let n = tape.dims(e_hat).0;

    let mut edges = None;
    let mut open = vec![true; n * slots];
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for l in 0..cfg.rounds {
        let words = match ddi {
            Some(ddi) => {
                let layer = ddi.layers.get(l).ok_or_else(|| Error::Config(format!("missing DDI layer {l}")))?;
                let state = match edges {
                    None => init_ddi_state(tape, store, e_hat, text.graph, ddi.input, text.pe)?,
                    Some(e) => DdiState { h: e_hat, e },
                };
                let next = ddi_layer(tape, store, state, text.graph, layer)?;
                edges = Some(next.e);
                next.h
            }
            None => e_hat,
        };
        let (updated, attention) = swa(tape, store, words, rel.s_rel, &open, &params.rounds[l])?;
        e_hat = if cfg.residual { tape.add(words, updated)? } else { updated };
        let map = response_map(tape, e_hat, s_hat)?;
        let used = std::mem::replace(&mut open, mask_from_map(tape.value(map), n_s, &rel.indices, cfg.tau));
        rounds.push(DecodeState { e_hat, map, mask: used, attention });
    }

    let last = rounds.last().expect("at least one round");
    let cls_kernel = match cfg.kernel {
        KernelStrategy::Cls => Some(tape.matmul(text.sentence, w_t)?),
        _ => None,
    };
    let choice = select_kernel(
        tape,
        store,
        cfg.kernel,
        last.e_hat,
        s_hat,
        rel.s_rel,
        last.map,
        &params.rounds[cfg.rounds - 1],
        cls_kernel,
    )?;
    let sw = tape.param(store, params.score_w);
    let sb = tape.param(store, params.score_b);
    let score = tape.matmul(choice.kernel, sw)?;
    let score = tape.add(score, sb)?;
    let score = tape.sigmoid(score);
    Ok(StmOutput {
        map: choice.map,
        kernel_index: choice.index,
        s_v: choice.s_v,
        score,
        s_r: rel.s_r,
        indices: rel.indices,
        rounds,
    })
}
