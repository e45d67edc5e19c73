//! Focal, L1 and GIoU losses, the matching cost, and the fused detection
//! loss with analytic gradients w.r.t. the head outputs.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::assign::{assign_one_to_one, Assignment, Target};
use super::bbox::BBox;
use super::grid::{PredictionGrid, REG_CLAMP};
use crate::error::Result;
use crate::graph::sigmoid;

/// Probabilities are clamped to `[FOCAL_EPS, 1 - FOCAL_EPS]`.
pub const FOCAL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    /// Focal class-balance factor.
    pub alpha: f64,
    /// Focal modulating exponent.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_cls: 2.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            alpha: 0.25,
            beta: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub config: LossConfig,
}

impl LossBreakdown {
    pub fn from_components(cls: f64, l1: f64, giou: f64, config: LossConfig) -> Self {
        LossBreakdown {
            total: config.lambda_cls * cls + config.lambda_l1 * l1 + config.lambda_giou * giou,
            cls,
            l1,
            giou,
            config,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.cls, self.l1, self.giou].iter().all(|v| v.is_finite())
    }
}

/// Image extent used to normalize L1 coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

/// `-a (1-y)^b log y` for a positive, `-(1-a) y^b log(1-y)` for a negative.
pub fn focal_loss(y: f64, positive: bool, alpha: f64, beta: f64) -> f64 {
    let y = y.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    if positive {
        -alpha * (1.0 - y).powf(beta) * y.ln()
    } else {
        -(1.0 - alpha) * y.powf(beta) * (1.0 - y).ln()
    }
}

/// `log(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Focal loss of `sigmoid(z)` and its derivative w.r.t. the logit `z`.
///
/// Matches [`focal_loss`] including the clamp (zero derivative once the
/// probability is clamped), but evaluates the logarithms from the logit so
/// single-precision saturation never produces `log(0)`.
pub fn focal_from_logit(z: f64, positive: bool, alpha: f64, beta: f64) -> (f64, f64) {
    let y = sigmoid(z);
    if !(FOCAL_EPS..=1.0 - FOCAL_EPS).contains(&y) {
        return (focal_loss(y, positive, alpha, beta), 0.0);
    }
    if positive {
        let log_y = -softplus(-z);
        let q = (1.0 - y).powf(beta);
        let loss = -alpha * q * log_y;
        let grad = alpha * (beta * y * q * log_y - q * (1.0 - y));
        (loss, grad)
    } else {
        let log_1my = -softplus(z);
        let p = y.powf(beta);
        let loss = -(1.0 - alpha) * p * log_1my;
        let grad = (1.0 - alpha) * (p * y - beta * p * (1.0 - y) * log_1my);
        (loss, grad)
    }
}

/// Sum of absolute corner differences, x normalized by width and y by height.
pub fn l1_loss(pred: &BBox, gt: &BBox, size: ImageSize) -> f64 {
    l1_with_grad(pred, gt, size).0
}

pub fn l1_with_grad(pred: &BBox, gt: &BBox, size: ImageSize) -> (f64, [f64; 4]) {
    let scale = [size.width, size.height, size.width, size.height];
    let (p, g) = (pred.as_array(), gt.as_array());
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d = (p[i] - g[i]) / scale[i];
        loss += d.abs();
        grad[i] = if d > 0.0 {
            1.0 / scale[i]
        } else if d < 0.0 {
            -1.0 / scale[i]
        } else {
            0.0
        };
    }
    (loss, grad)
}

/// `1 - IoU + (A_c - U) / A_c`.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> f64 {
    giou_with_grad(pred, gt).0
}

/// GIoU loss and its gradient w.r.t. the predicted corners.
pub fn giou_with_grad(p: &BBox, g: &BBox) -> (f64, [f64; 4]) {
    let (pw, ph) = (p.width(), p.height());
    let iw_raw = p.x2.min(g.x2) - p.x1.max(g.x1);
    let ih_raw = p.y2.min(g.y2) - p.y1.max(g.y1);
    let overlap = iw_raw > 0.0 && ih_raw > 0.0;
    let (iw, ih) = if overlap { (iw_raw, ih_raw) } else { (0.0, 0.0) };
    let inter = iw * ih;
    let union = pw * ph + g.area() - inter;
    let cw = p.x2.max(g.x2) - p.x1.min(g.x1);
    let ch = p.y2.max(g.y2) - p.y1.min(g.y1);
    let enclose = cw * ch;
    let loss = 1.0 - inter / union + (enclose - union) / enclose;

    // loss = 2 - I/U - U/C with U = Ap + Ag - I
    let dl_di_direct = -1.0 / union;
    let dl_du = inter / (union * union) - 1.0 / enclose;
    let dl_dc = union / (enclose * enclose);
    let dl_di = dl_di_direct - dl_du;

    let ind = |c: bool| if c { 1.0 } else { 0.0 };
    // d(inter)/d corner
    let di = if overlap {
        [
            -ind(p.x1 >= g.x1) * ih,
            -ind(p.y1 >= g.y1) * iw,
            ind(p.x2 <= g.x2) * ih,
            ind(p.y2 <= g.y2) * iw,
        ]
    } else {
        [0.0; 4]
    };
    let dap = [-ph, -pw, ph, pw];
    let dc = [
        -ind(p.x1 <= g.x1) * ch,
        -ind(p.y1 <= g.y1) * cw,
        ind(p.x2 >= g.x2) * ch,
        ind(p.y2 >= g.y2) * cw,
    ];
    let grad = core::array::from_fn(|i| dl_di * di[i] + dl_du * dap[i] + dl_dc * dc[i]);
    (loss, grad)
}

/// Cost of matching location `pred_box`/`prob` to a ground truth.
pub fn matching_cost(prob_of_gt_class: f64, pred_box: &BBox, gt_box: &BBox, size: ImageSize, cfg: &LossConfig) -> f64 {
    cfg.lambda_cls * focal_loss(prob_of_gt_class, true, cfg.alpha, cfg.beta)
        + cfg.lambda_l1 * l1_loss(pred_box, gt_box, size)
        + cfg.lambda_giou * giou_loss(pred_box, gt_box)
}

/// Ground truth of one image in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTargets {
    pub size: ImageSize,
    pub targets: Vec<Target>,
}

/// Loss gradients laid out like the head outputs of each level.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub cls: Vec<Vec<f64>>,
    pub reg: Vec<Vec<f64>>,
}

/// Per-image loss with the assignment held fixed.
///
/// Classification sums focal loss over every location and class, divided
/// by `max(1, #gt)`; L1 and GIoU average over assigned pairs.
pub fn image_loss(
    grid: &PredictionGrid,
    image: usize,
    targets: &ImageTargets,
    assignment: &Assignment,
    cfg: &LossConfig,
    grads: Option<(&mut HeadGradients, f64)>,
) -> LossBreakdown {
    let norm = (targets.targets.len().max(1)) as f64;
    let mut positive: Vec<Option<usize>> = vec![None; grid.num_locations()];
    for &(gt, loc) in &assignment.pairs {
        positive[grid.flat_index(loc)] = Some(targets.targets[gt].class);
    }
    let mut grads = grads;
    let mut cls_sum = 0.0;
    for (flat, loc) in grid.locations().enumerate() {
        for class in 0..grid.num_classes {
            let is_pos = positive[flat] == Some(class);
            let (l, d) = focal_from_logit(grid.logit(image, loc, class), is_pos, cfg.alpha, cfg.beta);
            cls_sum += l;
            if let Some((g, w)) = grads.as_mut() {
                let idx = grid.cls_index(image, loc, class);
                g.cls[loc.level][idx] += *w * cfg.lambda_cls * d / norm;
            }
        }
    }
    let cls = cls_sum / norm;

    let pairs = assignment.pairs.len();
    let (mut l1, mut giou) = (0.0, 0.0);
    for &(gt, loc) in &assignment.pairs {
        let pred = grid.decode(image, loc);
        let gt_box = &targets.targets[gt].bbox;
        let (l, dl) = l1_with_grad(&pred, gt_box, targets.size);
        let (q, dq) = giou_with_grad(&pred, gt_box);
        l1 += l;
        giou += q;
        if let Some((g, w)) = grads.as_mut() {
            let scale = *w / pairs as f64;
            let dbox: [f64; 4] = core::array::from_fn(|i| scale * (cfg.lambda_l1 * dl[i] + cfg.lambda_giou * dq[i]));
            let dist = grid.distances(image, loc);
            // x1 = cx - l, y1 = cy - t, x2 = cx + r, y2 = cy + b; d(dist)/d(raw) = dist
            let sign = [-1.0, -1.0, 1.0, 1.0];
            let level = &grid.levels[loc.level];
            for side in 0..4 {
                let idx = grid.reg_index(image, loc, side);
                if level.reg[idx].abs() < REG_CLAMP {
                    g.reg[loc.level][idx] += dbox[side] * sign[side] * dist[side];
                }
            }
        }
    }
    if pairs > 0 {
        l1 /= pairs as f64;
        giou /= pairs as f64;
    }
    LossBreakdown::from_components(cls, l1, giou, *cfg)
}

/// Batch loss: mean of per-image losses, assignments recomputed from the
/// current predictions. Returns the breakdown, the assignments used, and
/// gradients w.r.t. every head output.
pub fn total_loss(
    grid: &PredictionGrid,
    batch: &[ImageTargets],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<Assignment>, HeadGradients)> {
    let assignments = batch
        .iter()
        .enumerate()
        .map(|(i, t)| assign_one_to_one(grid, i, t, cfg))
        .collect::<Result<Vec<_>>>()?;
    let (loss, grads) = total_loss_with(grid, batch, &assignments, cfg);
    Ok((loss, assignments, grads))
}

/// [`total_loss`] with caller-supplied assignments.
pub fn total_loss_with(
    grid: &PredictionGrid,
    batch: &[ImageTargets],
    assignments: &[Assignment],
    cfg: &LossConfig,
) -> (LossBreakdown, HeadGradients) {
    let mut grads = HeadGradients {
        cls: grid.levels.iter().map(|l| vec![0.0; l.cls.len()]).collect(),
        reg: grid.levels.iter().map(|l| vec![0.0; l.reg.len()]).collect(),
    };
    let n = batch.len().max(1) as f64;
    let (mut cls, mut l1, mut giou) = (0.0, 0.0, 0.0);
    for (i, (t, a)) in batch.iter().zip(assignments).enumerate() {
        let b = image_loss(grid, i, t, a, cfg, Some((&mut grads, 1.0 / n)));
        cls += b.cls;
        l1 += b.l1;
        giou += b.giou;
    }
    (LossBreakdown::from_components(cls / n, l1 / n, giou / n, *cfg), grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: f64 = 0.25;
    const B: f64 = 2.0;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn focal_reference_values() {
        let ln2 = core::f64::consts::LN_2;
        assert!((focal_loss(0.5, true, A, B) - 0.25 * 0.25 * ln2).abs() < 1e-15);
        assert!((focal_loss(0.5, false, A, B) - 0.75 * 0.25 * ln2).abs() < 1e-15);
        assert!(focal_loss(1.0, true, A, B) < 1e-20);
        assert!(focal_loss(0.0, false, A, B) < 1e-20);
        assert!((focal_loss(0.5, true, A, B) - 0.043322).abs() < 1e-6);
        assert!((focal_loss(0.5, false, A, B) - 0.129966).abs() < 1e-6);
    }

    #[test]
    fn logit_form_matches_probability_form() {
        for z in [-30.0, -5.0, -0.3, 0.0, 0.7, 4.0, 25.0] {
            for pos in [true, false] {
                let (l, d) = focal_from_logit(z, pos, A, B);
                assert!((l - focal_loss(sigmoid(z), pos, A, B)).abs() < 1e-12 * (1.0 + l), "{z} {pos}");
                let h = 1e-6;
                let fd = (focal_from_logit(z + h, pos, A, B).0 - focal_from_logit(z - h, pos, A, B).0) / (2.0 * h);
                assert!((d - fd).abs() < 1e-7, "z={z} pos={pos}: {d} vs {fd}");
            }
        }
    }

    #[test]
    fn giou_reference_values() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou_loss(&a, &a), 0.0);
        assert!((giou_loss(&a, &bx(1.0, 0.0, 2.0, 1.0)) - 1.0).abs() < 1e-15);
        assert!((giou_loss(&a, &bx(2.0, 0.0, 3.0, 1.0)) - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn giou_gradient_matches_differences() {
        let g = bx(3.0, 2.0, 9.0, 7.0);
        for p in [bx(1.0, 1.5, 6.0, 5.0), bx(4.0, 3.0, 8.0, 6.5), bx(10.0, 8.0, 12.0, 11.0), bx(0.5, 0.2, 11.0, 9.3)] {
            let (_, grad) = giou_with_grad(&p, &g);
            for i in 0..4 {
                let h = 1e-6;
                let mut up = p.as_array();
                let mut dn = p.as_array();
                up[i] += h;
                dn[i] -= h;
                let f = |a: [f64; 4]| giou_loss(&BBox { x1: a[0], y1: a[1], x2: a[2], y2: a[3] }, &g);
                let fd = (f(up) - f(dn)) / (2.0 * h);
                assert!((grad[i] - fd).abs() < 1e-7, "{p:?} coord {i}: {} vs {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn l1_cases() {
        let size = ImageSize { width: 100.0, height: 50.0 };
        let a = bx(10.0, 5.0, 30.0, 25.0);
        assert_eq!(l1_loss(&a, &a, size), 0.0);
        let b = bx(20.0, 10.0, 40.0, 30.0);
        assert!((l1_loss(&a, &b, size) - 0.4).abs() < 1e-12);
        assert_eq!(l1_loss(&a, &b, size), l1_loss(&b, &a, size));
    }

    #[test]
    fn breakdown_recombines() {
        let b = LossBreakdown::from_components(0.3, 0.1, 0.7, LossConfig::default());
        assert_eq!(b.total, 2.0 * 0.3 + 5.0 * 0.1 + 2.0 * 0.7);
    }

    #[test]
    fn matching_cost_prefers_confident_location() {
        let size = ImageSize { width: 64.0, height: 64.0 };
        let cfg = LossConfig::default();
        let p = bx(1.0, 1.0, 9.0, 9.0);
        let g = bx(2.0, 2.0, 10.0, 10.0);
        assert!(matching_cost(0.9, &p, &g, size, &cfg) < matching_cost(0.1, &p, &g, size, &cfg));
        assert!(matching_cost(1.0, &g, &g, size, &cfg) < 1e-15);
    }
}
