//! JSON scene files and superpoint caches.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ObjectRecord, PointCloudScene, SuperpointPartition, AUX_DIM};
use crate::error::{Error, Result};

pub const SCENE_FORMAT: &str = "stmn-scene/1";
pub const SUPERPOINT_FORMAT: &str = "stmn-superpoints/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub format: String,
    pub scene_id: String,
    pub n_points: usize,
    pub positions: Vec<f64>,
    pub aux: Vec<f64>,
    pub instance_id: Vec<usize>,
    pub category_id: Vec<usize>,
    pub objects: Vec<ObjectRecord>,
}

impl SceneFile {
    pub fn new(scene: &PointCloudScene, objects: &[ObjectRecord]) -> Self {
        SceneFile {
            format: SCENE_FORMAT.into(),
            scene_id: scene.scene_id.clone(),
            n_points: scene.len(),
            positions: scene.positions.iter().flatten().copied().collect(),
            aux: scene.aux.iter().flatten().copied().collect(),
            instance_id: scene.instance_id.clone(),
            category_id: scene.category_id.clone(),
            objects: objects.to_vec(),
        }
    }

    pub fn into_scene(self) -> Result<(PointCloudScene, Vec<ObjectRecord>)> {
        if self.format != SCENE_FORMAT {
            return Err(Error::Invalid(format!("unknown scene format `{}`", self.format)));
        }
        let n = self.n_points;
        if self.positions.len() != 3 * n || self.aux.len() != AUX_DIM * n {
            return Err(Error::Invalid(format!(
                "scene `{}`: flat arrays do not match n_points={n}",
                self.scene_id
            )));
        }
        let scene = PointCloudScene {
            scene_id: self.scene_id,
            positions: self.positions.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            aux: self
                .aux
                .chunks_exact(AUX_DIM)
                .map(|c| {
                    let mut a = [0.0; AUX_DIM];
                    a.copy_from_slice(c);
                    a
                })
                .collect(),
            instance_id: self.instance_id,
            category_id: self.category_id,
        };
        scene.validate()?;
        Ok((scene, self.objects))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperpointFile {
    pub format: String,
    pub scene_id: String,
    pub assignment: Vec<usize>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

pub fn save_scene(path: &Path, scene: &PointCloudScene, objects: &[ObjectRecord]) -> Result<()> {
    write_json(path, &SceneFile::new(scene, objects))
}

pub fn load_scene(path: &Path) -> Result<(PointCloudScene, Vec<ObjectRecord>)> {
    read_json::<SceneFile>(path)?.into_scene()
}

pub fn save_superpoints(path: &Path, scene_id: &str, partition: &SuperpointPartition) -> Result<()> {
    write_json(
        path,
        &SuperpointFile {
            format: SUPERPOINT_FORMAT.into(),
            scene_id: scene_id.into(),
            assignment: partition.assignment().to_vec(),
        },
    )
}

pub fn load_superpoints(path: &Path) -> Result<(String, SuperpointPartition)> {
    let f: SuperpointFile = read_json(path)?;
    if f.format != SUPERPOINT_FORMAT {
        return Err(Error::Invalid(format!("unknown superpoint format `{}`", f.format)));
    }
    Ok((f.scene_id, SuperpointPartition::from_assignment(f.assignment)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_superpoints, generate_scene, GeneratorConfig, SuperpointParams};

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig { n_points: 300, ..Default::default() };
        let (scene, objects) = generate_scene(&cfg, "room_0", 11).unwrap();
        let sp = build_superpoints(&scene, &SuperpointParams::default());
        let sp_path = dir.path().join("sp.json");
        let scene_path = dir.path().join("scene.json");
        save_scene(&scene_path, &scene, &objects).unwrap();
        save_superpoints(&sp_path, &scene.scene_id, &sp).unwrap();
        let (s2, o2) = load_scene(&scene_path).unwrap();
        assert_eq!(s2, scene);
        assert_eq!(o2, objects);
        let (id, p2) = load_superpoints(&sp_path).unwrap();
        assert_eq!(id, "room_0");
        assert_eq!(p2, sp);
    }

    #[test]
    fn wrong_format_is_rejected() {
        let mut f = SceneFile::new(
            &PointCloudScene {
                scene_id: "x".into(),
                positions: vec![[0.0; 3]],
                aux: vec![[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]],
                instance_id: vec![0],
                category_id: vec![0],
            },
            &[],
        );
        f.format = "other".into();
        assert!(f.into_scene().is_err());
    }
}
