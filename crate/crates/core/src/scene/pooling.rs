use super::SuperpointPartition;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// Superpoint average pooling: row `i` of the result is the mean of the
/// feature rows in cell `i`. Gradients are split evenly among members.
pub fn superpoint_pool(tape: &mut Tape, features: Var, partition: &SuperpointPartition) -> Result<Var> {
    let (rows, cols) = tape.dims(features);
    if rows != partition.n_points() {
        return Err(Error::shape("superpoint_pool", &[rows, cols], &[partition.n_points()]));
    }
    tape.group_mean(features, partition.assignment(), partition.count())
}

/// Ground-truth superpoint mask: a superpoint is foreground when strictly
/// more than half of its points are.
pub fn pool_gt_mask(point_mask: &[bool], partition: &SuperpointPartition) -> Result<Vec<bool>> {
    if point_mask.len() != partition.n_points() {
        return Err(Error::shape(
            "pool_gt_mask",
            &[point_mask.len()],
            &[partition.n_points()],
        ));
    }
    Ok(partition
        .cells()
        .iter()
        .map(|cell| 2 * cell.iter().filter(|&&p| point_mask[p]).count() > cell.len())
        .collect())
}

/// Broadcasts a per-superpoint value to every member point.
pub fn expand_mask<T: Copy>(sp_mask: &[T], partition: &SuperpointPartition) -> Result<Vec<T>> {
    if sp_mask.len() != partition.count() {
        return Err(Error::shape("expand_mask", &[sp_mask.len()], &[partition.count()]));
    }
    Ok(partition.assignment().iter().map(|&s| sp_mask[s]).collect())
}
