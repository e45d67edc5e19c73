use std::collections::BTreeSet;

use ffpdet_core::ffp::hdc_check;
use ffpdet_core::head::{
    assign_one_to_one, assign::cost_row, decode_nms_free, BBox, GridLevel, ImageSize, ImageTargets, Location,
    LossConfig, PredictionGrid, Target,
};
use ffpdet_core::metrics::MetricReport;
use ffpdet_core::nms::{iou, nms, Detection};
use proptest::prelude::*;

/// Gap between consecutive taps of the 1D kernel obtained by stacking
/// 3-tap dilated kernels, by enumerating the Minkowski sum directly.
fn composed_gap(rates: &[usize]) -> usize {
    let mut taps: BTreeSet<i64> = [0].into();
    for &r in rates {
        let r = r as i64;
        taps = taps.iter().flat_map(|t| [t - r, *t, t + r]).collect();
    }
    let v: Vec<i64> = taps.into_iter().collect();
    v.windows(2).map(|w| (w[1] - w[0]) as usize).max().unwrap_or(1)
}

#[test]
fn hdc_recurrence_matches_brute_force() {
    let mut lists: Vec<Vec<usize>> = Vec::new();
    for a in 1..=6 {
        lists.push(vec![a]);
        for b in 1..=6 {
            lists.push(vec![a, b]);
            for c in 1..=6 {
                lists.push(vec![a, b, c]);
            }
        }
    }
    for rates in lists {
        let report = hdc_check(&rates, 3).unwrap();
        let gap = composed_gap(&rates);
        assert_eq!(report.composed_gap, gap, "{rates:?}");
        assert_eq!(report.gridding, gap > 1, "{rates:?}");
    }
    assert_eq!(composed_gap(&[1, 2, 5]), 1);
    assert_eq!(composed_gap(&[2, 2]), 2);
}

fn grid_from(sizes: &[(usize, usize, usize)], cls: &[f64], reg: &[f64]) -> PredictionGrid {
    let (mut ci, mut ri) = (0, 0);
    let levels = sizes
        .iter()
        .map(|&(stride, h, w)| {
            let c = cls[ci..ci + 2 * h * w].to_vec();
            let r = reg[ri..ri + 4 * h * w].to_vec();
            ci += 2 * h * w;
            ri += 4 * h * w;
            GridLevel {
                stride,
                height: h,
                width: w,
                cls: c,
                reg: r,
            }
        })
        .collect();
    PredictionGrid {
        batch: 1,
        num_classes: 2,
        levels,
    }
}

/// A toy grid over a 64x64 image, with `gts` ground truths.
fn toy_instance(max_hw: usize, max_gts: usize) -> impl Strategy<Value = (PredictionGrid, ImageTargets)> {
    (1..=max_hw, 1..=max_hw, 1..=max_hw)
        .prop_flat_map(move |(a, b, c)| {
            let sizes = vec![(8, a, a), (16, b, b.min(a)), (32, c, 1)];
            let n: usize = sizes.iter().map(|s| s.1 * s.2).sum();
            let gts = 1..=max_gts.min(n);
            (
                Just(sizes),
                prop::collection::vec(-4.0..2.0f64, 2 * n),
                prop::collection::vec(0.0..3.0f64, 4 * n),
                prop::collection::vec((0.0..48.0f64, 0.0..48.0f64, 4.0..16.0f64, 4.0..16.0f64, 0..2usize), gts),
            )
        })
        .prop_map(|(sizes, cls, reg, boxes)| {
            let grid = grid_from(&sizes, &cls, &reg);
            let targets = boxes
                .into_iter()
                .map(|(x, y, w, h, class)| Target {
                    bbox: BBox::new(x, y, x + w, y + h).unwrap(),
                    class,
                })
                .collect();
            let t = ImageTargets {
                size: ImageSize {
                    width: 64.0,
                    height: 64.0,
                },
                targets,
            };
            (grid, t)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn assignment_is_injective((grid, t) in toy_instance(4, 5)) {
        let a = assign_one_to_one(&grid, 0, &t, &LossConfig::default()).unwrap();
        let gts: BTreeSet<usize> = a.pairs.iter().map(|p| p.0).collect();
        let locs: BTreeSet<Location> = a.pairs.iter().map(|p| p.1).collect();
        prop_assert_eq!(a.pairs.len(), t.targets.len());
        prop_assert_eq!(gts.len(), t.targets.len());
        prop_assert_eq!(locs.len(), t.targets.len());
    }

    #[test]
    fn single_target_gets_the_exhaustive_minimum((grid, t) in toy_instance(4, 1)) {
        let cfg = LossConfig::default();
        let a = assign_one_to_one(&grid, 0, &t, &cfg).unwrap();
        let all: Vec<Location> = grid.locations().collect();
        let mut best = (f64::INFINITY, 0);
        for (i, loc) in all.iter().enumerate() {
            let p = grid.score(0, *loc, t.targets[0].class);
            let c = cfg.lambda_cls * -0.25 * (1.0 - p).powi(2) * p.ln()
                + cfg.lambda_l1 * l1_oracle(&grid.decode(0, *loc), &t.targets[0].bbox)
                + cfg.lambda_giou * giou_oracle(&grid.decode(0, *loc), &t.targets[0].bbox);
            if c < best.0 {
                best = (c, i);
            }
        }
        prop_assert_eq!(a.pairs[0].1, all[best.1]);
    }

    /// With at most 10 locations: each ground truth, taken smallest first,
    /// holds the cheapest location not held by an earlier one.
    #[test]
    fn greedy_contract_on_small_grids((grid, t) in toy_instance(2, 4)
        .prop_filter("at most 10 locations", |(g, _)| g.num_locations() <= 10)) {
        let cfg = LossConfig::default();
        let a = assign_one_to_one(&grid, 0, &t, &cfg).unwrap();
        let all: Vec<Location> = grid.locations().collect();
        let mut order: Vec<usize> = (0..t.targets.len()).collect();
        order.sort_by(|&x, &y| t.targets[x].bbox.area().total_cmp(&t.targets[y].bbox.area()).then(x.cmp(&y)));
        let mut taken: Vec<Location> = Vec::new();
        for gt in order {
            let costs = cost_row(&grid, 0, &t, gt, &cfg);
            let chosen = a.pairs.iter().find(|p| p.0 == gt).unwrap().1;
            let chosen_cost = costs[all.iter().position(|l| *l == chosen).unwrap()];
            for (i, loc) in all.iter().enumerate() {
                if !taken.contains(loc) && *loc != chosen {
                    prop_assert!(costs[i] > chosen_cost || (costs[i] == chosen_cost && *loc > chosen));
                }
            }
            prop_assert!(!taken.contains(&chosen));
            taken.push(chosen);
        }
    }

    #[test]
    fn decode_matches_sort_oracle((grid, _) in toy_instance(4, 1), thr in 0.0..0.9f64, k in 1..20usize) {
        let got = decode_nms_free(&grid, 0, thr, k);
        let mut want: Vec<(f64, usize, usize, BBox)> = Vec::new();
        for (flat, loc) in grid.locations().enumerate() {
            let (c0, c1) = (grid.logit(0, loc, 0), grid.logit(0, loc, 1));
            let (class, z) = if c1 > c0 { (1, c1) } else { (0, c0) };
            let s = 1.0 / (1.0 + (-z).exp());
            if s >= thr {
                want.push((s, flat, class, grid.decode(0, loc)));
            }
        }
        want.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        want.truncate(k);
        prop_assert_eq!(got.len(), want.len());
        for (d, w) in got.iter().zip(&want) {
            prop_assert!((d.score - w.0).abs() < 1e-12);
            prop_assert_eq!(d.class, w.2);
            prop_assert_eq!(d.bbox, w.3);
        }
    }
}

fn l1_oracle(p: &BBox, g: &BBox) -> f64 {
    ((p.x1 - g.x1).abs() + (p.x2 - g.x2).abs()) / 64.0 + ((p.y1 - g.y1).abs() + (p.y2 - g.y2).abs()) / 64.0
}

fn giou_oracle(p: &BBox, g: &BBox) -> f64 {
    let iw = (p.x2.min(g.x2) - p.x1.max(g.x1)).max(0.0);
    let ih = (p.y2.min(g.y2) - p.y1.max(g.y1)).max(0.0);
    let inter = iw * ih;
    let union = p.area() + g.area() - inter;
    let hull = (p.x2.max(g.x2) - p.x1.min(g.x1)) * (p.y2.max(g.y2) - p.y1.min(g.y1));
    1.0 - (inter / union - (hull - union) / hull)
}

fn detections() -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((0.0..50.0f64, 0.0..50.0f64, 2.0..20.0f64, 2.0..20.0f64, 0.0..1.0f64, 0..2usize), 0..40)
        .prop_map(|v| {
            v.into_iter()
                .map(|(x, y, w, h, score, class)| Detection {
                    bbox: BBox::new(x, y, x + w, y + h).unwrap(),
                    score,
                    class,
                })
                .collect()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    /// The kept set is characterized by: a candidate is kept iff no kept
    /// candidate ranked above it (same class) overlaps it at the threshold.
    #[test]
    fn nms_matches_quadratic_characterization(dets in detections(), thr in 0.1..0.9f64) {
        let kept = nms(&dets, thr);
        let mut rank: Vec<usize> = (0..dets.len()).collect();
        rank.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
        let mut keep = vec![false; dets.len()];
        for (pos, &i) in rank.iter().enumerate() {
            keep[i] = rank[..pos]
                .iter()
                .all(|&j| !keep[j] || dets[j].class != dets[i].class || iou(&dets[j].bbox, &dets[i].bbox) < thr);
        }
        let want: Vec<Detection> = rank.iter().filter(|&&i| keep[i]).map(|&i| dets[i]).collect();
        prop_assert_eq!(&kept, &want);
        prop_assert_eq!(nms(&kept, thr), kept.clone());
        if let Some(top) = rank.first() {
            prop_assert_eq!(kept[0], dets[*top]);
        }
    }

    #[test]
    fn metric_identities(m in 0..500usize, n in 0..500usize, fb in 0.0..1.0f64, fd in 0.0..1.0f64) {
        prop_assume!(m + n > 0);
        let b = (fb * n as f64) as usize;
        let d = (fd * m as f64) as usize;
        let r = MetricReport::from_counts(m, n, b, d);
        let total = (m + n) as f64;
        prop_assert_eq!(r.fdr, b as f64 / total);
        prop_assert_eq!(r.mdr, d as f64 / total);
        prop_assert_eq!(r.cdr, 1.0 - r.fdr - r.mdr);
        prop_assert_eq!(r.a + r.c, m + n);
        prop_assert_eq!(r.a, m - d + b);
    }
}
