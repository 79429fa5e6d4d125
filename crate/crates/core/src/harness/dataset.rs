use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, DataConfig};
use crate::error::{Error, Result};
use crate::language::{generate_expression, ExpressionRecord, RelationVocabulary};
use crate::model::{PreparedExpression, PreparedScene};
use crate::scene::io::{load_scene, load_superpoints, read_json, save_scene, save_superpoints, write_json};
use crate::scene::{build_superpoints, generate_scene};

pub const DATASET_FORMAT: &str = "stmn-dataset/1";
pub const MANIFEST_FILE: &str = "manifest.json";

const STREAM_SCENE: u64 = 1;
const STREAM_EXPR: u64 = 2;
const SCENE_ATTEMPTS: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scene_id: String,
    /// Paths relative to the manifest directory.
    pub scene_file: String,
    pub superpoint_file: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub scenes: Vec<SceneEntry>,
    pub train_file: String,
    pub val_file: String,
    pub n_train: usize,
    pub n_val: usize,
}

/// Generates scenes, superpoint caches and expressions under `out`.
/// Scenes are assigned wholly to one split.
pub fn make_dataset(cfg: &DataConfig, seed: u64, out: &Path) -> Result<DatasetManifest> {
    for dir in [out.to_path_buf(), out.join("scenes"), out.join("superpoints")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let per = cfg.expressions_per_scene.max(1);
    let mut scenes = Vec::new();
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut index = 0u64;
    for (split, wanted) in [(Split::Train, cfg.train_expressions), (Split::Val, cfg.val_expressions)] {
        let mut made = 0;
        while made < wanted {
            let scene_id = format!("scene{index:04}");
            let (scene, objects) = (0..SCENE_ATTEMPTS)
                .map(|a| generate_scene(&cfg.generator, &scene_id, derive_seed(seed, STREAM_SCENE, index, a)))
                .find_map(Result::ok)
                .ok_or_else(|| Error::Generation(format!("{scene_id}: placement failed {SCENE_ATTEMPTS} times")))?;
            let partition = build_superpoints(&scene, &cfg.superpoints);
            let scene_file = format!("scenes/{scene_id}.json");
            let superpoint_file = format!("superpoints/{scene_id}.json");
            save_scene(&out.join(&scene_file), &scene, &objects)?;
            save_superpoints(&out.join(&superpoint_file), &scene_id, &partition)?;

            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_EXPR, index, 0));
            let mut seen = HashSet::new();
            let take = per.min(wanted - made);
            let mut j = 0;
            let mut tries = 0;
            while j < take {
                let g = generate_expression(&objects, &cfg.templates, &mut rng)?;
                tries += 1;
                if !seen.insert(g.text.clone()) && tries < 20 * take {
                    continue;
                }
                let rec = ExpressionRecord {
                    scene_id: scene_id.clone(),
                    expr_id: format!("{scene_id}-{j}"),
                    text: g.text,
                    conllu: g.conllu,
                    target_instance: g.target_instance,
                    tag: g.tag,
                    mentioned_categories: g.mentioned_categories,
                };
                match split {
                    Split::Train => train.push(rec),
                    Split::Val => val.push(rec),
                }
                j += 1;
            }
            made += take;
            scenes.push(SceneEntry { scene_id, scene_file, superpoint_file, split });
            index += 1;
        }
    }
    write_jsonl(&out.join("train.jsonl"), &train)?;
    write_jsonl(&out.join("val.jsonl"), &val)?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        seed,
        scenes,
        train_file: "train.jsonl".into(),
        val_file: "val.jsonl".into(),
        n_train: train.len(),
        n_val: val.len(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::json(path, e))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// A loaded dataset: prepared scenes plus raw expression records.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub scenes: Vec<PreparedScene>,
    pub train: Vec<ExpressionRecord>,
    pub val: Vec<ExpressionRecord>,
}

/// An expression bound to the index of its scene.
pub struct Sample {
    pub scene: usize,
    pub expr: PreparedExpression,
}

impl Dataset {
    /// Loads `root/manifest.json` and everything it references.
    pub fn load(root: &Path, knn_k: usize) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&root.join(MANIFEST_FILE))?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::Invalid(format!("unknown dataset format `{}`", manifest.format)));
        }
        let mut scenes = Vec::with_capacity(manifest.scenes.len());
        for entry in &manifest.scenes {
            let (scene, objects) = load_scene(&root.join(&entry.scene_file))?;
            let (sp_id, partition) = load_superpoints(&root.join(&entry.superpoint_file))?;
            if sp_id != entry.scene_id || scene.scene_id != entry.scene_id {
                return Err(Error::Invalid(format!("scene id mismatch for `{}`", entry.scene_id)));
            }
            scenes.push(PreparedScene::new(scene, objects, partition, knn_k)?);
        }
        let train = read_jsonl(&root.join(&manifest.train_file))?;
        let val = read_jsonl(&root.join(&manifest.val_file))?;
        Ok(Dataset { root: root.to_path_buf(), manifest, scenes, train, val })
    }

    pub fn records(&self, split: Split) -> &[ExpressionRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn scene_index(&self, scene_id: &str) -> Result<usize> {
        self.scenes
            .iter()
            .position(|s| s.scene.scene_id == scene_id)
            .ok_or_else(|| Error::Invalid(format!("unknown scene `{scene_id}`")))
    }

    pub fn samples(&self, split: Split, relations: &RelationVocabulary, pe_dim: usize) -> Result<Vec<Sample>> {
        self.records(split)
            .iter()
            .map(|r| {
                let scene = self.scene_index(&r.scene_id)?;
                let expr = PreparedExpression::new(r.clone(), &self.scenes[scene], relations, pe_dim)?;
                Ok(Sample { scene, expr })
            })
            .collect()
    }
}
