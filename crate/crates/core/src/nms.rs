//! Greedy IoU suppression, kept only as a comparison baseline.

use alloc::vec::Vec;

use crate::head::BBox;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class: usize,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Keeps a detection iff its IoU with every already-kept detection of the
/// same class is below `iou_threshold`. Output is ordered by descending
/// score, input order breaking ties.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept
            .iter()
            .all(|k| k.class != d.class || k.bbox.iou(&d.bbox) < iou_threshold)
        {
            kept.push(*d);
        }
    }
    kept
}
