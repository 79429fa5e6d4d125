//! The full network: point encoder, superpoint pooling, text embedding,
//! dependency interaction and the matching decoder, plus the prepared
//! per-scene and per-expression inputs it consumes.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ddi::{DdiConfig, DdiInputParams, DdiLayerParams};
use crate::error::{Error, Result};
use crate::language::{
    embed_tokens, laplacian_pe, merge_trees, orient_edges, DependencyGraph, DirectionMode, Expression,
    ExpressionRecord, LaplacianPe, RelationVocabulary, TokenEmbeddingTable, WordVocabulary,
};
use crate::numerics::{ParamStore, Tape, Var};
use crate::objective::{bce_loss, dice_loss, mask_iou, rel_loss, score_loss, total_loss, LossTerms, LossWeights};
use crate::scene::{
    encode_points, expand_mask, knn, pool_gt_mask, superpoint_pool, EncoderConfig, EncoderParams, ObjectRecord,
    PointCloudScene, SuperpointPartition,
};
use crate::stm::{stm_forward, DdiParams, StmConfig, StmOutput, StmParams, TextInput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Point feature width `C_p`.
    pub point_dim: usize,
    /// Token embedding width `C_t`.
    pub text_dim: usize,
    /// Matching width `D`.
    pub dim: usize,
    /// Positional-encoding size `k`.
    pub pe_dim: usize,
    /// Neighbors averaged by the point encoder.
    pub encoder_knn: usize,
    pub stm: StmConfig,
    pub ddi: DdiConfig,
    /// Disables dependency interaction entirely (the text goes straight
    /// from the embedding table to the decoder).
    pub use_ddi: bool,
    pub direction: DirectionMode,
    /// Adds BCE and Dice on the kernel row of every earlier round.
    pub aux_losses: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            point_dim: 32,
            text_dim: 64,
            dim: 64,
            pe_dim: 8,
            encoder_knn: 8,
            stm: StmConfig::default(),
            ddi: DdiConfig::default(),
            use_ddi: true,
            direction: DirectionMode::Reverse,
            aux_losses: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.stm.validate()?;
        for (name, v) in [("point_dim", self.point_dim), ("text_dim", self.text_dim), ("dim", self.dim)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.ddi.heads == 0 || self.dim % self.ddi.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide dim {}", self.ddi.heads, self.dim)));
        }
        Ok(())
    }

    fn encoder(&self) -> EncoderConfig {
        EncoderConfig { width: self.point_dim, knn: self.encoder_knn }
    }
}

/// Vocabularies fixed at model creation; stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub words: WordVocabulary,
    pub relations: RelationVocabulary,
}

impl Vocabularies {
    /// Words and relation labels of every parse in `records`.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a ExpressionRecord>) -> Result<Self> {
        let mut trees = Vec::new();
        for r in records {
            trees.extend(r.parse()?.1);
        }
        Ok(Vocabularies {
            words: WordVocabulary::from_words(trees.iter().flat_map(|t| t.forms.iter().map(String::as_str))),
            relations: RelationVocabulary::from_trees(&trees),
        })
    }
}

#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabularies,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub text: TokenEmbeddingTable,
    pub stm: StmParams,
    pub ddi_input: DdiInputParams,
    pub ddi_layers: Vec<DdiLayerParams>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabularies, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&mut store, &config.encoder(), &mut rng);
        let text = TokenEmbeddingTable::init(&mut store, vocab.words.clone(), config.text_dim, &mut rng);
        let stm = StmParams::init(&mut store, config.point_dim, config.text_dim, config.dim, config.stm.rounds, &mut rng);
        let ddi_input = DdiInputParams::init(&mut store, config.dim, config.pe_dim, &mut rng);
        let ddi_layers = (0..config.stm.rounds)
            .map(|l| DdiLayerParams::init(&mut store, &format!("ddi.layer{l}"), config.dim, &config.ddi, &mut rng))
            .collect();
        Ok(Model { config, vocab, store, encoder, text, stm, ddi_input, ddi_layers })
    }

    /// Rebinds parameter handles on a store with the expected names.
    pub fn from_store(config: ModelConfig, vocab: Vocabularies, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Model::new(config.clone(), vocab.clone(), 0)?;
        for (_, name, t) in reference.store.iter() {
            match store.by_name(name) {
                Some(s) if s.shape() == t.shape() => {}
                Some(s) => {
                    return Err(Error::Invalid(format!(
                        "parameter {name}: shape {:?}, expected {:?}",
                        s.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Invalid(format!("parameter {name} missing"))),
            }
        }
        if store.len() != reference.store.len() {
            return Err(Error::Invalid(format!(
                "{} parameters stored, model has {}",
                store.len(),
                reference.store.len()
            )));
        }
        let rounds = config.stm.rounds;
        Ok(Model {
            encoder: EncoderParams::lookup(&store),
            text: TokenEmbeddingTable::lookup(&store, vocab.words.clone()),
            stm: StmParams::lookup(&store, rounds),
            ddi_input: DdiInputParams::lookup(&store),
            ddi_layers: (0..rounds)
                .map(|l| DdiLayerParams::lookup(&store, &format!("ddi.layer{l}"), &config.ddi))
                .collect(),
            config,
            vocab,
            store,
        })
    }

    /// Pooled superpoint features `N_s x C_p`.
    pub fn encode_scene(&self, tape: &mut Tape, scene: &PreparedScene) -> Result<Var> {
        let f = encode_points(tape, &self.store, &self.encoder, &scene.scene, &scene.neighbors)?;
        superpoint_pool(tape, f, &scene.partition)
    }

    /// Runs the decoder on pooled features. `pe` overrides the expression's
    /// canonical positional encoding (training uses sign-flipped copies).
    pub fn decode(
        &self,
        tape: &mut Tape,
        superpoints: Var,
        expr: &PreparedExpression,
        pe: Option<&LaplacianPe>,
    ) -> Result<StmOutput> {
        let (words, _) = embed_tokens(tape, &self.store, &self.text, &expr.expr)?;
        let root = tape.param(&self.store, self.text.root);
        let cls = tape.param(&self.store, self.text.cls);
        let mean = tape.col_means(words);
        let sentence = tape.add(cls, mean)?;
        let graph = self.orient(&expr.graph);
        let pe = pe.unwrap_or(&expr.pe);
        let text = TextInput { words, root, sentence, graph: &graph, pe: Some(pe) };
        let ddi = DdiParams { input: &self.ddi_input, layers: &self.ddi_layers };
        stm_forward(
            tape,
            &self.store,
            superpoints,
            &text,
            &self.stm,
            self.config.use_ddi.then_some(&ddi),
            &self.config.stm,
        )
    }

    pub fn orient(&self, canonical: &DependencyGraph) -> DependencyGraph {
        orient_edges(canonical, self.config.direction)
    }

    /// Full loss for one expression. Returns the scalar total and its terms.
    pub fn loss(
        &self,
        tape: &mut Tape,
        out: &StmOutput,
        expr: &PreparedExpression,
        weights: &LossWeights,
    ) -> Result<(Var, LossTerms)> {
        let gt = &expr.truth;
        let bce = bce_loss(tape, out.map, &gt.sp_mask)?;
        let dice = dice_loss(tape, out.map, &gt.sp_mask)?;
        let rel = rel_loss(tape, out.s_r, &gt.relevance, expr.expr.len())?;
        let predicted: Vec<bool> = tape.value(out.map).iter().map(|&m| m >= 0.5).collect();
        let iou = mask_iou(&predicted, &gt.sp_mask)?;
        let score = score_loss(tape, out.score, iou)?;
        let terms = LossTerms { bce, dice, rel, score };
        let mut total = total_loss(tape, &terms, weights)?;
        if self.config.aux_losses {
            let row = out.kernel_index.unwrap_or(0);
            for r in &out.rounds[..out.rounds.len() - 1] {
                let m = tape.gather_rows(r.map, &[row])?;
                let b = bce_loss(tape, m, &gt.sp_mask)?;
                let d = dice_loss(tape, m, &gt.sp_mask)?;
                let b = tape.scale(b, weights.bce);
                let d = tape.scale(d, weights.dice);
                total = tape.add(total, b)?;
                total = tape.add(total, d)?;
            }
        }
        Ok((total, terms))
    }
}

/// A scene with its partition and encoder neighborhoods.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene: PointCloudScene,
    pub objects: Vec<ObjectRecord>,
    pub partition: SuperpointPartition,
    pub neighbors: crate::scene::Neighborhood,
    /// Majority category id per superpoint.
    pub sp_category: Vec<usize>,
}

impl PreparedScene {
    pub fn new(scene: PointCloudScene, objects: Vec<ObjectRecord>, partition: SuperpointPartition, knn_k: usize) -> Result<Self> {
        scene.validate()?;
        if partition.n_points() != scene.len() {
            return Err(Error::Invalid(format!(
                "scene `{}` has {} points, partition covers {}",
                scene.scene_id,
                scene.len(),
                partition.n_points()
            )));
        }
        let neighbors = knn(&scene.positions, knn_k.min(scene.len().saturating_sub(1))).with_self();
        let sp_category = partition.majority(&scene.category_id);
        Ok(PreparedScene { scene, objects, partition, neighbors, sp_category })
    }

    /// Category id of each named object category, read off the points.
    pub fn category_ids(&self) -> HashMap<String, usize> {
        let mut by_instance = HashMap::new();
        for (i, &inst) in self.scene.instance_id.iter().enumerate() {
            by_instance.entry(inst).or_insert(self.scene.category_id[i]);
        }
        self.objects
            .iter()
            .filter_map(|o| by_instance.get(&o.instance).map(|&c| (o.category.clone(), c)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub point_mask: Vec<bool>,
    pub sp_mask: Vec<bool>,
    /// Superpoints whose majority category is named in the expression.
    pub relevance: Vec<bool>,
}

/// An expression bound to its scene.
#[derive(Debug, Clone)]
pub struct PreparedExpression {
    pub record: ExpressionRecord,
    pub expr: Expression,
    /// Head → dependent graph; orientation is applied by the model.
    pub graph: DependencyGraph,
    /// Canonical-sign positional encoding.
    pub pe: LaplacianPe,
    pub truth: GroundTruth,
}

impl PreparedExpression {
    pub fn new(
        record: ExpressionRecord,
        scene: &PreparedScene,
        relations: &RelationVocabulary,
        pe_dim: usize,
    ) -> Result<Self> {
        let (expr, trees) = record.parse()?;
        if record.target_instance >= scene.scene.n_instances() {
            return Err(Error::Invalid(format!(
                "expression {} targets instance {} but scene `{}` has {}",
                record.expr_id,
                record.target_instance,
                scene.scene.scene_id,
                scene.scene.n_instances()
            )));
        }
        let graph = merge_trees(&trees, relations)?;
        let pe = laplacian_pe(&graph, pe_dim);
        let point_mask = scene.scene.instance_mask(record.target_instance);
        let sp_mask = pool_gt_mask(&point_mask, &scene.partition)?;
        let ids = scene.category_ids();
        let mentioned: Vec<usize> =
            record.mentioned_categories.iter().filter_map(|c| ids.get(c).copied()).collect();
        let relevance = scene.sp_category.iter().map(|c| mentioned.contains(c)).collect();
        Ok(PreparedExpression {
            record,
            expr,
            graph,
            pe,
            truth: GroundTruth { point_mask, sp_mask, relevance },
        })
    }
}

/// Point-level prediction from a superpoint map.
pub fn point_prediction(map: &[f64], partition: &SuperpointPartition) -> Result<Vec<bool>> {
    let sp: Vec<bool> = map.iter().map(|&m| m >= 0.5).collect();
    expand_mask(&sp, partition)
}
