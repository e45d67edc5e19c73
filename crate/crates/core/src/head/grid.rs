use alloc::vec::Vec;

use super::bbox::BBox;
use crate::graph::sigmoid;

/// Raw regression outputs are clamped to this magnitude before `exp`.
pub const REG_CLAMP: f64 = 10.0;

/// Predictions of one pyramid level for the whole batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLevel {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// `[N, num_classes, H, W]` logits.
    pub cls: Vec<f64>,
    /// `[N, 4, H, W]` raw regression (l, t, r, b before `exp`).
    pub reg: Vec<f64>,
}

/// A grid cell: level, row, column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Location {
    pub level: usize,
    pub row: usize,
    pub col: usize,
}

/// Per-location class logits and box distances across all levels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid {
    pub batch: usize,
    pub num_classes: usize,
    pub levels: Vec<GridLevel>,
}

impl PredictionGrid {
    pub fn num_locations(&self) -> usize {
        self.levels.iter().map(|l| l.height * l.width).sum()
    }

    /// All locations in (level, row, col) lexicographic order.
    pub fn locations(&self) -> impl Iterator<Item = Location> + '_ {
        self.levels.iter().enumerate().flat_map(|(level, l)| {
            (0..l.height).flat_map(move |row| (0..l.width).map(move |col| Location { level, row, col }))
        })
    }

    pub fn flat_index(&self, loc: Location) -> usize {
        let before: usize = self.levels[..loc.level].iter().map(|l| l.height * l.width).sum();
        before + loc.row * self.levels[loc.level].width + loc.col
    }

    /// Image-space center of a cell: `((col + 0.5) s, (row + 0.5) s)`.
    pub fn center(&self, loc: Location) -> (f64, f64) {
        let s = self.levels[loc.level].stride as f64;
        ((loc.col as f64 + 0.5) * s, (loc.row as f64 + 0.5) * s)
    }

    fn index(&self, image: usize, loc: Location, channel: usize, channels: usize) -> usize {
        let l = &self.levels[loc.level];
        ((image * channels + channel) * l.height + loc.row) * l.width + loc.col
    }

    pub fn cls_index(&self, image: usize, loc: Location, class: usize) -> usize {
        self.index(image, loc, class, self.num_classes)
    }

    pub fn reg_index(&self, image: usize, loc: Location, side: usize) -> usize {
        self.index(image, loc, side, 4)
    }

    pub fn logit(&self, image: usize, loc: Location, class: usize) -> f64 {
        self.levels[loc.level].cls[self.cls_index(image, loc, class)]
    }

    pub fn score(&self, image: usize, loc: Location, class: usize) -> f64 {
        sigmoid(self.logit(image, loc, class))
    }

    /// `(l, t, r, b) = exp(clamp(raw)) * stride`.
    pub fn distances(&self, image: usize, loc: Location) -> [f64; 4] {
        let l = &self.levels[loc.level];
        let s = l.stride as f64;
        core::array::from_fn(|side| {
            let raw = l.reg[self.reg_index(image, loc, side)];
            num_traits::Float::exp(raw.clamp(-REG_CLAMP, REG_CLAMP)) * s
        })
    }

    /// `(cx - l, cy - t, cx + r, cy + b)`; always a valid box.
    pub fn decode(&self, image: usize, loc: Location) -> BBox {
        let (cx, cy) = self.center(loc);
        let [l, t, r, b] = self.distances(image, loc);
        BBox {
            x1: cx - l,
            y1: cy - t,
            x2: cx + r,
            y2: cy + b,
        }
    }
}
