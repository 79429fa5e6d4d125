//! Dependency-driven interaction: a graph transformer over the merged
//! dependency graph with typed edge features, optionally combined with full
//! self-attention over all nodes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::{DependencyGraph, LaplacianPe};
use crate::numerics::{Axis, ParamId, ParamStore, Tape, Tensor, Var, LN_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DdiStructure {
    /// Graph attention only.
    Ga,
    /// Self-attention block, then graph attention block.
    SaGa,
    /// Graph attention block, then self-attention block.
    GaSa,
    /// Both attentions summed into one residual.
    #[default]
    GaParSa,
}

impl DdiStructure {
    pub const ALL: [DdiStructure; 4] =
        [DdiStructure::Ga, DdiStructure::SaGa, DdiStructure::GaSa, DdiStructure::GaParSa];

    fn has_sa(self) -> bool {
        self != DdiStructure::Ga
    }

    fn sequential(self) -> bool {
        matches!(self, DdiStructure::SaGa | DdiStructure::GaSa)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdiConfig {
    pub structure: DdiStructure,
    /// Attention heads; must divide the model width.
    pub heads: usize,
    /// Node feed-forward width `D_h`; 0 means `4·D`.
    pub hidden: usize,
}

impl Default for DdiConfig {
    fn default() -> Self {
        DdiConfig { structure: DdiStructure::GaParSa, heads: 1, hidden: 0 }
    }
}

impl DdiConfig {
    pub fn hidden_width(&self, dim: usize) -> usize {
        if self.hidden == 0 {
            4 * dim
        } else {
            self.hidden
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        NormParams {
            gain: store.insert(format!("{name}.gain"), Tensor::filled(&[1, dim], 1.0)),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[1, dim])),
        }
    }

    fn lookup(store: &ParamStore, name: &str) -> Self {
        NormParams {
            gain: store.expect_id(&format!("{name}.gain")),
            bias: store.expect_id(&format!("{name}.bias")),
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SelfAttentionParams {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct GraphAttentionParams {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub e: ParamId,
    pub o_h: ParamId,
    pub o_e: ParamId,
}

#[derive(Debug, Clone)]
pub struct DdiLayerParams {
    pub structure: DdiStructure,
    pub heads: usize,
    pub ga: GraphAttentionParams,
    pub sa: Option<SelfAttentionParams>,
    pub w_h1: ParamId,
    pub w_h2: ParamId,
    pub w_e1: ParamId,
    pub w_e2: ParamId,
    pub norm_h1: NormParams,
    pub norm_h2: NormParams,
    pub norm_e1: NormParams,
    pub norm_e2: NormParams,
    /// Extra norm closing the self-attention block of sequential variants.
    pub norm_sa: Option<NormParams>,
}

fn proj(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

impl DdiLayerParams {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, cfg: &DdiConfig, rng: &mut impl Rng) -> Self {
        let d = dim;
        let dh = cfg.hidden_width(d);
        let mut p = |name: &str, r: usize, c: usize, store: &mut ParamStore| {
            store.insert(format!("{prefix}.{name}"), proj(r, c, rng))
        };
        let ga = GraphAttentionParams {
            q: p("ga.q", d, d, store),
            k: p("ga.k", d, d, store),
            v: p("ga.v", d, d, store),
            e: p("ga.e", d, d, store),
            o_h: p("ga.o_h", d, d, store),
            o_e: p("ga.o_e", d, d, store),
        };
        let sa = cfg.structure.has_sa().then(|| SelfAttentionParams {
            q: p("sa.q", d, d, store),
            k: p("sa.k", d, d, store),
            v: p("sa.v", d, d, store),
            o: p("sa.o", d, d, store),
        });
        let w_h1 = p("ffn_h.w1", d, dh, store);
        let w_h2 = p("ffn_h.w2", dh, d, store);
        let w_e1 = p("ffn_e.w1", d, 2 * d, store);
        let w_e2 = p("ffn_e.w2", 2 * d, d, store);
        DdiLayerParams {
            structure: cfg.structure,
            heads: cfg.heads,
            ga,
            sa,
            w_h1,
            w_h2,
            w_e1,
            w_e2,
            norm_h1: NormParams::init(store, &format!("{prefix}.norm_h1"), d),
            norm_h2: NormParams::init(store, &format!("{prefix}.norm_h2"), d),
            norm_e1: NormParams::init(store, &format!("{prefix}.norm_e1"), d),
            norm_e2: NormParams::init(store, &format!("{prefix}.norm_e2"), d),
            norm_sa: cfg
                .structure
                .sequential()
                .then(|| NormParams::init(store, &format!("{prefix}.norm_sa"), d)),
        }
    }

    pub fn lookup(store: &ParamStore, prefix: &str, cfg: &DdiConfig) -> Self {
        let id = |name: &str| store.expect_id(&format!("{prefix}.{name}"));
        DdiLayerParams {
            structure: cfg.structure,
            heads: cfg.heads,
            ga: GraphAttentionParams {
                q: id("ga.q"),
                k: id("ga.k"),
                v: id("ga.v"),
                e: id("ga.e"),
                o_h: id("ga.o_h"),
                o_e: id("ga.o_e"),
            },
            sa: cfg.structure.has_sa().then(|| SelfAttentionParams {
                q: id("sa.q"),
                k: id("sa.k"),
                v: id("sa.v"),
                o: id("sa.o"),
            }),
            w_h1: id("ffn_h.w1"),
            w_h2: id("ffn_h.w2"),
            w_e1: id("ffn_e.w1"),
            w_e2: id("ffn_e.w2"),
            norm_h1: NormParams::lookup(store, &format!("{prefix}.norm_h1")),
            norm_h2: NormParams::lookup(store, &format!("{prefix}.norm_h2")),
            norm_e1: NormParams::lookup(store, &format!("{prefix}.norm_e1")),
            norm_e2: NormParams::lookup(store, &format!("{prefix}.norm_e2")),
            norm_sa: cfg
                .structure
                .sequential()
                .then(|| NormParams::lookup(store, &format!("{prefix}.norm_sa"))),
        }
    }
}

/// Input-layer projections for edge ids and positional encodings.
#[derive(Debug, Clone, Copy)]
pub struct DdiInputParams {
    /// `B^0`, `1 x D`.
    pub edge_w: ParamId,
    /// `b^0`, `1 x D`.
    pub edge_b: ParamId,
    /// `C^0` stored transposed, `k x D`.
    pub pe_w: ParamId,
    /// `c^0`, `1 x D`.
    pub pe_b: ParamId,
}

impl DdiInputParams {
    pub fn init(store: &mut ParamStore, dim: usize, pe_dim: usize, rng: &mut impl Rng) -> Self {
        DdiInputParams {
            edge_w: store.insert("ddi.input.edge_w", proj(1, dim, rng)),
            edge_b: store.insert("ddi.input.edge_b", Tensor::zeros(&[1, dim])),
            pe_w: store.insert("ddi.input.pe_w", proj(pe_dim.max(1), dim, rng)),
            pe_b: store.insert("ddi.input.pe_b", Tensor::zeros(&[1, dim])),
        }
    }

    pub fn lookup(store: &ParamStore) -> Self {
        DdiInputParams {
            edge_w: store.expect_id("ddi.input.edge_w"),
            edge_b: store.expect_id("ddi.input.edge_b"),
            pe_w: store.expect_id("ddi.input.pe_w"),
            pe_b: store.expect_id("ddi.input.pe_b"),
        }
    }
}

/// Node features `(N_w+1) x D` and edge features `E x D`, edge rows in the
/// graph's edge-list order.
#[derive(Debug, Clone, Copy)]
pub struct DdiState {
    pub h: Var,
    pub e: Var,
}

/// Edge features from relation ids alone: `β·B^0 + b^0`.
pub fn init_edges(
    tape: &mut Tape,
    store: &ParamStore,
    graph: &DependencyGraph,
    input: &DdiInputParams,
) -> Result<Var> {
    let span = graph.relation_span();
    if let Some(bad) = graph.edges.iter().find(|e| e.relation >= span) {
        return Err(Error::Invalid(format!(
            "edge {}->{} has relation id {} outside the vocabulary (< {span})",
            bad.src, bad.dst, bad.relation
        )));
    }
    let beta = tape.constant(graph.edges.len(), 1, graph.edges.iter().map(|e| e.relation as f64).collect())?;
    let w = tape.param(store, input.edge_w);
    let b = tape.param(store, input.edge_b);
    let e = tape.matmul(beta, w)?;
    tape.add_row(e, b)
}

/// Adds projected positional encodings to the node features and builds the
/// initial edge features.
pub fn init_ddi_state(
    tape: &mut Tape,
    store: &ParamStore,
    word_features: Var,
    graph: &DependencyGraph,
    input: &DdiInputParams,
    pe: Option<&LaplacianPe>,
) -> Result<DdiState> {
    let (n, d) = tape.dims(word_features);
    if n != graph.node_count {
        return Err(Error::shape("init_ddi_state", &[n, d], &[graph.node_count]));
    }
    let h = match pe {
        Some(pe) => {
            let lam = tape.constant(pe.n, pe.k, pe.data.clone())?;
            let w = tape.param(store, input.pe_w);
            let b = tape.param(store, input.pe_b);
            let p = tape.matmul(lam, w)?;
            let p = tape.add_row(p, b)?;
            tape.add(word_features, p)?
        }
        None => word_features,
    };
    let e = init_edges(tape, store, graph, input)?;
    Ok(DdiState { h, e })
}

pub struct GraphAttentionOutput {
    /// Aggregated, `O_h`-projected neighbor messages, `(N_w+1) x D`.
    pub node_update: Var,
    /// Unnormalized score vectors `ŵ`, `E x D`.
    pub edge_scores: Var,
    /// Softmax weights per edge and head, one `E x 1` column per head.
    pub weights: Vec<Var>,
    /// `ŵ O_e`, `E x D`.
    pub edge_update: Var,
}

/// Edge-featured graph attention. Each node attends over its in-edges;
/// the logit of an edge is the component sum (per head) of
/// `(q_dst ⊙ k_src ⊙ e E) / √d`.
pub fn graph_attention(
    tape: &mut Tape,
    store: &ParamStore,
    state: DdiState,
    graph: &DependencyGraph,
    params: &GraphAttentionParams,
    heads: usize,
) -> Result<GraphAttentionOutput> {
    let (n, d) = tape.dims(state.h);
    check_heads(d, heads)?;
    let hd = d / heads;
    let src: Vec<usize> = graph.edges.iter().map(|e| e.src).collect();
    let dst = graph.destinations();

    let wq = tape.param(store, params.q);
    let wk = tape.param(store, params.k);
    let wv = tape.param(store, params.v);
    let we = tape.param(store, params.e);
    let q = tape.matmul(state.h, wq)?;
    let k = tape.matmul(state.h, wk)?;
    let v = tape.matmul(state.h, wv)?;
    let ee = tape.matmul(state.e, we)?;
    let q_dst = tape.gather_rows(q, &dst)?;
    let k_src = tape.gather_rows(k, &src)?;
    let v_src = tape.gather_rows(v, &src)?;
    let qk = tape.mul(q_dst, k_src)?;
    let w_hat = tape.mul(qk, ee)?;
    let w_hat = tape.scale(w_hat, 1.0 / (hd as f64).sqrt());

    let mut weights = Vec::with_capacity(heads);
    let mut messages = Vec::with_capacity(heads);
    for head in 0..heads {
        let (scores, values) = if heads == 1 {
            (w_hat, v_src)
        } else {
            (tape.slice_cols(w_hat, head * hd, hd)?, tape.slice_cols(v_src, head * hd, hd)?)
        };
        let logits = tape.row_sums(scores);
        let alpha = tape.segment_softmax(logits, &dst)?;
        messages.push(tape.mul_col(values, alpha)?);
        weights.push(alpha);
    }
    let msg = if heads == 1 { messages[0] } else { tape.concat_cols(&messages)? };
    let agg = tape.scatter_add_rows(msg, &dst, n)?;
    let oh = tape.param(store, params.o_h);
    let node_update = tape.matmul(agg, oh)?;
    let oe = tape.param(store, params.o_e);
    let edge_update = tape.matmul(w_hat, oe)?;
    Ok(GraphAttentionOutput { node_update, edge_scores: w_hat, weights, edge_update })
}

/// Multi-head scaled dot-product attention over all nodes.
pub fn self_attention(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    params: &SelfAttentionParams,
    heads: usize,
) -> Result<Var> {
    let d = tape.dims(h).1;
    check_heads(d, heads)?;
    let hd = d / heads;
    let wq = tape.param(store, params.q);
    let wk = tape.param(store, params.k);
    let wv = tape.param(store, params.v);
    let q = tape.matmul(h, wq)?;
    let k = tape.matmul(h, wk)?;
    let v = tape.matmul(h, wv)?;
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, head * hd, hd)?,
                tape.slice_cols(k, head * hd, hd)?,
                tape.slice_cols(v, head * hd, hd)?,
            )
        };
        let logits = tape.matmul_nt(qh, kh)?;
        let logits = tape.scale(logits, 1.0 / (hd as f64).sqrt());
        let a = tape.softmax(logits, Axis::Cols);
        outs.push(tape.matmul(a, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let wo = tape.param(store, params.o);
    tape.matmul(cat, wo)
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
    }
    Ok(())
}

fn residual_norm(tape: &mut Tape, store: &ParamStore, norm: &NormParams, parts: &[Var]) -> Result<Var> {
    let mut x = parts[0];
    for &p in &parts[1..] {
        x = tape.add(x, p)?;
    }
    norm.apply(tape, store, x)
}

/// One DDI layer: attention block(s) per the configured structure, then
/// GeLU and ReLU feed-forward blocks on nodes and edges.
pub fn ddi_layer(
    tape: &mut Tape,
    store: &ParamStore,
    state: DdiState,
    graph: &DependencyGraph,
    params: &DdiLayerParams,
) -> Result<DdiState> {
    let heads = params.heads;
    let sa = |tape: &mut Tape, h: Var| -> Result<Var> {
        let p = params.sa.as_ref().ok_or_else(|| Error::Contract("structure needs self-attention params".into()))?;
        self_attention(tape, store, h, p, heads)
    };
    let norm_sa = || params.norm_sa.ok_or_else(|| Error::Contract("sequential structure needs norm_sa".into()));

    let (h1, ga) = match params.structure {
        DdiStructure::Ga => {
            let ga = graph_attention(tape, store, state, graph, &params.ga, heads)?;
            (residual_norm(tape, store, &params.norm_h1, &[state.h, ga.node_update])?, ga)
        }
        DdiStructure::GaParSa => {
            let ga = graph_attention(tape, store, state, graph, &params.ga, heads)?;
            let s = sa(tape, state.h)?;
            (residual_norm(tape, store, &params.norm_h1, &[state.h, s, ga.node_update])?, ga)
        }
        DdiStructure::SaGa => {
            let s = sa(tape, state.h)?;
            let hs = residual_norm(tape, store, &norm_sa()?, &[state.h, s])?;
            let ga = graph_attention(tape, store, DdiState { h: hs, e: state.e }, graph, &params.ga, heads)?;
            (residual_norm(tape, store, &params.norm_h1, &[hs, ga.node_update])?, ga)
        }
        DdiStructure::GaSa => {
            let ga = graph_attention(tape, store, state, graph, &params.ga, heads)?;
            let hg = residual_norm(tape, store, &params.norm_h1, &[state.h, ga.node_update])?;
            let s = sa(tape, hg)?;
            (residual_norm(tape, store, &norm_sa()?, &[hg, s])?, ga)
        }
    };

    let w1 = tape.param(store, params.w_h1);
    let w2 = tape.param(store, params.w_h2);
    let f = tape.matmul(h1, w1)?;
    let f = tape.gelu(f);
    let f = tape.matmul(f, w2)?;
    let h = residual_norm(tape, store, &params.norm_h2, &[h1, f])?;

    let e1 = residual_norm(tape, store, &params.norm_e1, &[state.e, ga.edge_update])?;
    let w1 = tape.param(store, params.w_e1);
    let w2 = tape.param(store, params.w_e2);
    let f = tape.matmul(e1, w1)?;
    let f = tape.relu(f);
    let f = tape.matmul(f, w2)?;
    let e = residual_norm(tape, store, &params.norm_e2, &[e1, f])?;
    Ok(DdiState { h, e })
}
