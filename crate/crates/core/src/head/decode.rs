use alloc::vec::Vec;

use super::grid::PredictionGrid;
use crate::nms::Detection;

/// Every location above `score_threshold`, best class per location, sorted
/// by descending score (flat index breaks ties), truncated. No suppression.
pub fn decode_nms_free(grid: &PredictionGrid, image: usize, score_threshold: f64, max_detections: usize) -> Vec<Detection> {
    let mut found: Vec<(usize, Detection)> = Vec::new();
    for (flat, loc) in grid.locations().enumerate() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for class in 0..grid.num_classes {
            let z = grid.logit(image, loc, class);
            if z > best.1 {
                best = (class, z);
            }
        }
        let score = crate::graph::sigmoid(best.1);
        if score >= score_threshold {
            found.push((
                flat,
                Detection {
                    bbox: grid.decode(image, loc),
                    score,
                    class: best.0,
                },
            ));
        }
    }
    found.sort_by(|(ia, a), (ib, b)| b.score.total_cmp(&a.score).then(ia.cmp(ib)));
    found.truncate(max_detections);
    found.into_iter().map(|(_, d)| d).collect()
}
