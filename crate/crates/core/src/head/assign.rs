//! One-to-one label assignment by greedy minimum matching cost.

use alloc::vec;
use alloc::vec::Vec;

use super::bbox::BBox;
use super::grid::{Location, PredictionGrid};
use super::loss::{matching_cost, ImageTargets, LossConfig};
use crate::error::{Error, Result};

/// One ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Target {
    pub bbox: BBox,
    pub class: usize,
}

/// `(gt index, location)` pairs; every other location is background.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub pairs: Vec<(usize, Location)>,
}

/// Matching cost of every location for one ground truth, in flat order.
pub fn cost_row(grid: &PredictionGrid, image: usize, targets: &ImageTargets, gt: usize, cfg: &LossConfig) -> Vec<f64> {
    let t = &targets.targets[gt];
    grid.locations()
        .map(|loc| {
            let p = grid.score(image, loc, t.class);
            matching_cost(p, &grid.decode(image, loc), &t.bbox, targets.size, cfg)
        })
        .collect()
}

/// Ground truths in ascending area order (index breaks ties) each claim
/// their cheapest unclaimed location; equal costs go to the earlier
/// (level, row, col).
pub fn assign_one_to_one(
    grid: &PredictionGrid,
    image: usize,
    targets: &ImageTargets,
    cfg: &LossConfig,
) -> Result<Assignment> {
    let gts = targets.targets.len();
    let locations = grid.num_locations();
    if gts > locations {
        return Err(Error::Capacity { gts, locations });
    }
    let all: Vec<Location> = grid.locations().collect();
    let mut order: Vec<usize> = (0..gts).collect();
    order.sort_by(|&a, &b| {
        let (aa, ab) = (targets.targets[a].bbox.area(), targets.targets[b].bbox.area());
        aa.total_cmp(&ab).then(a.cmp(&b))
    });
    let mut claimed = vec![false; locations];
    let mut pairs = Vec::with_capacity(gts);
    for gt in order {
        let costs = cost_row(grid, image, targets, gt, cfg);
        let best = costs
            .iter()
            .enumerate()
            .filter(|(i, _)| !claimed[*i])
            .min_by(|(ia, a), (ib, b)| a.total_cmp(b).then(ia.cmp(ib)))
            .map(|(i, _)| i)
            .expect("capacity checked");
        claimed[best] = true;
        pairs.push((gt, all[best]));
    }
    pairs.sort_by_key(|(gt, _)| *gt);
    Ok(Assignment { pairs })
}
