use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::knn::{knn, symmetric_adjacency, Neighborhood};
use super::{PointCloudScene, SuperpointPartition};

/// Region-growing settings. Two adjacent points may share a superpoint when
/// `spatial_w·|Δp| + color_w·|Δrgb| + normal_w·(1 − |n·n'|) <= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuperpointParams {
    pub knn: usize,
    pub spatial_w: f64,
    pub color_w: f64,
    pub normal_w: f64,
    pub max_cell: usize,
}

impl Default for SuperpointParams {
    fn default() -> Self {
        SuperpointParams {
            knn: 8,
            spatial_w: 2.5,
            color_w: 4.0,
            normal_w: 2.0,
            max_cell: 40,
        }
    }
}

impl SuperpointParams {
    pub fn edge_cost(&self, scene: &PointCloudScene, a: usize, b: usize) -> f64 {
        let (pa, pb) = (&scene.positions[a], &scene.positions[b]);
        let (xa, xb) = (&scene.aux[a], &scene.aux[b]);
        let d = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2)).sqrt();
        let c = ((xa[0] - xb[0]).powi(2) + (xa[1] - xb[1]).powi(2) + (xa[2] - xb[2]).powi(2)).sqrt();
        let n = 1.0 - (xa[3] * xb[3] + xa[4] * xb[4] + xa[5] * xb[5]).abs();
        self.spatial_w * d + self.color_w * c + self.normal_w * n
    }

    pub fn mergeable(&self, scene: &PointCloudScene, a: usize, b: usize) -> bool {
        self.edge_cost(scene, a, b) <= 1.0
    }
}

/// Greedy breadth-first region growing over the symmetrized k-NN graph.
///
/// Seeds are taken in point order; a region absorbs unassigned neighbors
/// whose edge to the current frontier point passes the similarity test,
/// until it holds `max_cell` points.
pub fn build_superpoints(scene: &PointCloudScene, params: &SuperpointParams) -> SuperpointPartition {
    let adjacency = symmetric_adjacency(&knn(&scene.positions, params.knn.max(1)));
    grow_regions(scene, params, &adjacency)
}

pub(crate) fn grow_regions(
    scene: &PointCloudScene,
    params: &SuperpointParams,
    adjacency: &Neighborhood,
) -> SuperpointPartition {
    let n = scene.len();
    let cap = params.max_cell.max(1);
    let mut assignment = vec![usize::MAX; n];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if assignment[seed] != usize::MAX {
            continue;
        }
        assignment[seed] = next;
        let mut size = 1;
        queue.clear();
        queue.push_back(seed);
        'grow: while let Some(p) = queue.pop_front() {
            for &q in adjacency.of(p) {
                if size >= cap {
                    break 'grow;
                }
                if assignment[q] == usize::MAX && params.mergeable(scene, p, q) {
                    assignment[q] = next;
                    size += 1;
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    SuperpointPartition::from_assignment(assignment).expect("region growing covers every point")
}
