//! Point-cloud scenes, over-segmentation into superpoints, and the pooling
//! operators that move features and masks between points and superpoints.

mod encoder;
mod generate;
pub mod io;
mod knn;
mod pooling;
mod superpoint;

pub use encoder::{encode_points, EncoderConfig, EncoderParams, AUX_DIM, INPUT_DIM};
pub use generate::{generate_scene, CategorySpec, ColorSpec, GeneratorConfig, Shape, SHELL_CATEGORY};
pub use knn::{knn, symmetric_adjacency, Neighborhood};
pub use pooling::{expand_mask, pool_gt_mask, superpoint_pool};
pub use superpoint::{build_superpoints, SuperpointParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A spatial relation from one object to another, recorded by the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub relation: String,
    pub target: usize,
}

/// One generated object (instance ids start at 1; 0 is the room shell).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub instance: usize,
    pub category: String,
    pub color: String,
    pub relations: Vec<Relation>,
}

/// Positions in meters plus RGB and unit normals per point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudScene {
    pub scene_id: String,
    pub positions: Vec<[f64; 3]>,
    /// RGB in `[0, 1]` followed by the unit normal.
    pub aux: Vec<[f64; AUX_DIM]>,
    pub instance_id: Vec<usize>,
    pub category_id: Vec<usize>,
}

impl PointCloudScene {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn n_instances(&self) -> usize {
        self.instance_id.iter().max().map_or(0, |m| m + 1)
    }

    /// Binary point mask of one instance.
    pub fn instance_mask(&self, instance: usize) -> Vec<bool> {
        self.instance_id.iter().map(|&i| i == instance).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::Invalid("scene has no points".into()));
        }
        if self.aux.len() != n || self.instance_id.len() != n || self.category_id.len() != n {
            return Err(Error::Invalid(format!(
                "scene `{}`: per-point arrays disagree in length",
                self.scene_id
            )));
        }
        for (i, a) in self.aux.iter().enumerate() {
            let norm = (a[3] * a[3] + a[4] * a[4] + a[5] * a[5]).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!("point {i}: normal has norm {norm}")));
            }
        }
        let k = self.n_instances();
        let mut seen = vec![false; k];
        for &i in &self.instance_id {
            seen[i] = true;
        }
        if seen.contains(&false) {
            return Err(Error::Invalid("instance ids are not contiguous".into()));
        }
        Ok(())
    }
}

/// Map from superpoints to the point index sets they cover.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpointPartition {
    assignment: Vec<usize>,
    cells: Vec<Vec<usize>>,
}

impl SuperpointPartition {
    /// Builds a partition from a per-point superpoint index. Indices must
    /// be contiguous from zero.
    pub fn from_assignment(assignment: Vec<usize>) -> Result<Self> {
        let n_cells = assignment.iter().max().map_or(0, |m| m + 1);
        let mut cells = vec![Vec::new(); n_cells];
        for (p, &s) in assignment.iter().enumerate() {
            cells[s].push(p);
        }
        if cells.iter().any(Vec::is_empty) {
            return Err(Error::Invalid("superpoint indices are not contiguous".into()));
        }
        Ok(SuperpointPartition { assignment, cells })
    }

    /// Every point its own superpoint.
    pub fn singletons(n: usize) -> Self {
        SuperpointPartition {
            assignment: (0..n).collect(),
            cells: (0..n).map(|i| vec![i]).collect(),
        }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cells(&self) -> &[Vec<usize>] {
        &self.cells
    }

    /// Number of superpoints.
    pub fn count(&self) -> usize {
        self.cells.len()
    }

    pub fn n_points(&self) -> usize {
        self.assignment.len()
    }

    /// Disjoint nonempty cells covering `0..n_points` and agreeing with the
    /// assignment.
    pub fn is_valid(&self) -> bool {
        let mut seen = vec![false; self.assignment.len()];
        for (s, cell) in self.cells.iter().enumerate() {
            if cell.is_empty() {
                return false;
            }
            for &p in cell {
                if p >= seen.len() || seen[p] || self.assignment[p] != s {
                    return false;
                }
                seen[p] = true;
            }
        }
        seen.iter().all(|&b| b)
    }

    /// Majority value of `labels` in each cell; ties go to the smaller label.
    pub fn majority(&self, labels: &[usize]) -> Vec<usize> {
        self.cells
            .iter()
            .map(|cell| {
                let mut counts = std::collections::BTreeMap::new();
                for &p in cell {
                    *counts.entry(labels[p]).or_insert(0usize) += 1;
                }
                let best = counts.values().copied().max().unwrap_or(0);
                counts
                    .into_iter()
                    .find(|&(_, c)| c == best)
                    .map_or(0, |(l, _)| l)
            })
            .collect()
    }
}
