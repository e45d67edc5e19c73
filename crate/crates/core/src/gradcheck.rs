//! Central finite-difference oracle for graph gradients, in `f64`, and the
//! standard set of checks run against it.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::backbone::BackboneConfig;
use crate::conv::ConvSpec;
use crate::detector::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::ffp::FfpConfig;
use crate::graph::{Activation, BnStats, Graph, Var};
use crate::head::loss::total_loss_with;
use crate::head::{
    assign_one_to_one, BBox, GridLevel, HeadConfig, ImageSize, ImageTargets, LossConfig, PredictionGrid, Target,
};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

/// Deterministic pseudo-random values in `[lo, hi)`.
pub fn values(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            lo + (hi - lo) * ((s >> 11) as f64 / (1u64 << 53) as f64)
        })
        .collect()
}

/// Like [`values`] but bounded away from zero by `gap`, so kinks at the
/// origin are never straddled by a finite-difference step.
pub fn away_from_zero(n: usize, seed: u64, gap: f64) -> Vec<f64> {
    values(n, seed, -1.0, 1.0)
        .into_iter()
        .map(|v| if v >= 0.0 { v + gap } else { v - gap })
        .collect()
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, values(n, seed, -1.0, 1.0)).unwrap()
}

/// `||a - b|| / max(||a||, ||b||)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub type Build<'a> = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Var + 'a;

/// Scalarizes the output with fixed weights so every output element matters.
fn scalar(g: &mut Graph<'_, f64>, out: Var) -> Var {
    let n = g.value(out).numel();
    let shape = g.shape(out).to_vec();
    let w = g.input(Tensor::new(&shape, (0..n).map(|i| (i as f64 * 0.7 + 0.3).sin()).collect()).unwrap());
    let m = g.mul(out, w).unwrap();
    g.sum(m)
}

fn evaluate(store: &ParamStore<f64>, training: bool, inputs: &[Tensor<f64>], build: &Build<'_>) -> f64 {
    let mut g = Graph::new(store, training);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let s = scalar(&mut g, out);
    g.value(s).data()[0]
}

/// Largest relative error between the analytic gradient of every input and
/// central differences over (up to `max_probes` elements of) that input.
pub fn check_inputs(
    store: &ParamStore<f64>,
    training: bool,
    inputs: &[Tensor<f64>],
    build: &Build<'_>,
    max_probes: usize,
) -> f64 {
    let mut g = Graph::new(store, training);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_tracked(t.clone())).collect();
    let out = build(&mut g, &vars);
    let s = scalar(&mut g, out);
    let grads = g.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.input(*v).expect("tracked input has a gradient").to_vec();
        let n = inputs[k].numel();
        let stride = n.div_ceil(max_probes).max(1);
        let probes: Vec<usize> = (0..n).step_by(stride).collect();
        let numeric: Vec<f64> = probes
            .iter()
            .map(|&i| {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += STEP;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= STEP;
                (evaluate(store, training, &plus, build) - evaluate(store, training, &minus, build)) / (2.0 * STEP)
            })
            .collect();
        let picked: Vec<f64> = probes.iter().map(|&i| analytic[i]).collect();
        worst = worst.max(relative_error(&picked, &numeric));
    }
    worst
}

/// One named comparison and its relative error.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub error: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error <= TOLERANCE
    }
}

fn check(name: impl Into<String>, error: f64) -> Check {
    Check {
        name: name.into(),
        error,
    }
}

/// Every differentiable graph op against central differences.
pub fn op_checks() -> Vec<Check> {
    let empty = ParamStore::<f64>::new();
    let mut out = Vec::new();
    let specs = [
        ConvSpec::new(3, 4, 3).padding(1).bias(true),
        ConvSpec::new(4, 6, 3).stride(2).padding(1).groups(2),
        ConvSpec::new(4, 4, 3).padding(2).dilation(2).groups(4).bias(true),
        ConvSpec::new(3, 5, 1).bias(true),
        ConvSpec::new(2, 3, 5).stride(2).padding(2),
        ConvSpec::same(3, 3, 3, 5),
    ];
    for (i, spec) in specs.iter().enumerate() {
        let i = i as u64;
        let mut inputs = vec![tensor(&[2, spec.in_channels, 7, 6], 1 + i), tensor(&spec.weight_shape(), 50 + i)];
        if spec.bias {
            inputs.push(tensor(&[spec.out_channels], 90 + i));
        }
        let s = *spec;
        let err = check_inputs(
            &empty,
            false,
            &inputs,
            &move |g: &mut Graph<'_, f64>, v: &[Var]| g.conv2d(v[0], v[1], v.get(2).copied(), &s).unwrap(),
            40,
        );
        out.push(check(
            format!(
                "conv2d k{} s{} d{} g{}",
                spec.kernel, spec.stride, spec.dilation, spec.groups
            ),
            err,
        ));
    }

    let err = check_inputs(
        &empty,
        false,
        &[tensor(&[3, 5], 1), tensor(&[4, 5], 2), tensor(&[4], 3)],
        &|g, v| g.dense(v[0], v[1], Some(v[2])).unwrap(),
        40,
    );
    out.push(check("dense", err));
    let err = check_inputs(&empty, false, &[tensor(&[2, 3, 4, 5], 4)], &|g, v| g.global_avg_pool(v[0]).unwrap(), 40);
    out.push(check("global_avg_pool", err));
    let err = check_inputs(&empty, false, &[tensor(&[1, 2, 3, 2], 5)], &|g, v| g.upsample_nearest_2x(v[0]).unwrap(), 40);
    out.push(check("upsample_nearest_2x", err));
    let err = check_inputs(&empty, false, &[tensor(&[2, 6], 6)], &|g, v| g.reshape(v[0], &[2, 6, 1, 1]).unwrap(), 40);
    out.push(check("reshape", err));

    for (kind, gap) in [(Activation::Relu, 0.05), (Activation::Sigmoid, 0.0), (Activation::HardSwish, 0.05)] {
        // scaled so hard-swish sees both saturated and curved parts, kept
        // off its kinks at -3, 0, 3
        let vals: Vec<f64> = away_from_zero(60, 7, gap)
            .into_iter()
            .map(|v| {
                let t = v * 5.0;
                if (t.abs() - 3.0).abs() < 0.05 {
                    t + 0.1
                } else {
                    t
                }
            })
            .collect();
        let x = Tensor::new(&[60], vals).unwrap();
        let err = check_inputs(&empty, false, &[x], &move |g, v| g.activation(v[0], kind), 60);
        out.push(check(format!("activation {kind:?}"), err));
    }

    let shape = [2, 3, 4, 4];
    let err = check_inputs(&empty, false, &[tensor(&shape, 1), tensor(&shape, 2)], &|g, v| g.add(v[0], v[1]).unwrap(), 40);
    out.push(check("add", err));
    let err = check_inputs(&empty, false, &[tensor(&shape, 3), tensor(&shape, 4)], &|g, v| g.mul(v[0], v[1]).unwrap(), 40);
    out.push(check("mul", err));
    let err = check_inputs(
        &empty,
        false,
        &[tensor(&shape, 5), tensor(&[2, 3, 1, 1], 6)],
        &|g, v| g.mul_channel(v[0], v[1]).unwrap(),
        40,
    );
    out.push(check("mul_channel", err));
    let err = check_inputs(&empty, false, &[tensor(&shape, 7)], &|g, v| g.scale(v[0], -2.5), 40);
    out.push(check("scale", err));
    let err = check_inputs(&empty, false, &[tensor(&shape, 8)], &|g, v| g.sum(v[0]), 40);
    out.push(check("sum", err));

    let mut store = ParamStore::<f64>::new();
    let stats = BnStats {
        mean: store.add("m", Tensor::zeros(&[3]), ParamKind::Buffer),
        var: store.add("v", Tensor::full(&[3], 1.0), ParamKind::Buffer),
        count: store.add("c", Tensor::zeros(&[1]), ParamKind::Buffer),
    };
    let inputs = [tensor(&[2, 3, 3, 3], 1), tensor(&[3], 2), tensor(&[3], 3)];
    let err = check_inputs(&store, true, &inputs, &move |g, v| g.batch_norm(v[0], v[1], v[2], stats).unwrap(), 54);
    out.push(check("batch_norm (training)", err));
    out
}

/// Three levels over a 64x64 image: 8x8, 4x4, 2x2.
pub fn toy_grid(seed: u64) -> PredictionGrid {
    let levels = [(8, 8), (16, 4), (32, 2)]
        .iter()
        .enumerate()
        .map(|(i, &(stride, hw))| GridLevel {
            stride,
            height: hw,
            width: hw,
            cls: values(2 * hw * hw, seed + i as u64, -3.0, 1.0),
            reg: values(4 * hw * hw, seed + 10 + i as u64, 1.0, 3.0),
        })
        .collect();
    PredictionGrid {
        batch: 1,
        num_classes: 2,
        levels,
    }
}

/// Two objects of different classes in a 64x64 image.
pub fn toy_targets() -> Vec<ImageTargets> {
    vec![ImageTargets {
        size: ImageSize {
            width: 64.0,
            height: 64.0,
        },
        targets: vec![
            Target {
                bbox: BBox::new(10.0, 12.0, 30.0, 28.0).unwrap(),
                class: 0,
            },
            Target {
                bbox: BBox::new(36.0, 30.0, 60.0, 62.0).unwrap(),
                class: 1,
            },
        ],
    }]
}

/// Fused detection loss w.r.t. every head output, assignment frozen.
pub fn total_loss_check() -> Check {
    let cfg = LossConfig::default();
    let grid = toy_grid(3);
    let targets = toy_targets();
    let assignment = vec![assign_one_to_one(&grid, 0, &targets[0], &cfg).unwrap()];
    let (_, grads) = total_loss_with(&grid, &targets, &assignment, &cfg);
    let value = |g: &PredictionGrid| total_loss_with(g, &targets, &assignment, &cfg).0.total;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for level in 0..3 {
        for cls in [true, false] {
            let n = if cls { grid.levels[level].cls.len() } else { grid.levels[level].reg.len() };
            for i in 0..n {
                let mut plus = grid.clone();
                let mut minus = grid.clone();
                let (p, m) = if cls {
                    (&mut plus.levels[level].cls[i], &mut minus.levels[level].cls[i])
                } else {
                    (&mut plus.levels[level].reg[i], &mut minus.levels[level].reg[i])
                };
                *p += STEP;
                *m -= STEP;
                numeric.push((value(&plus) - value(&minus)) / (2.0 * STEP));
                analytic.push(if cls { grads.cls[level][i] } else { grads.reg[level][i] });
            }
        }
    }
    check("total_loss (head outputs)", relative_error(&analytic, &numeric))
}

/// A narrow detector that still has every module type.
pub fn tiny_config() -> DetectorConfig {
    DetectorConfig {
        backbone: BackboneConfig::desk(),
        ffp: FfpConfig {
            channels: 16,
            fea_reduction: 4,
            bottleneck: 4,
            dfb_width: 16,
            ..FfpConfig::default()
        },
        head: HeadConfig {
            tower_channels: 8,
            tower_depth: 1,
            ..HeadConfig::default()
        },
        ..DetectorConfig::default()
    }
}

/// Parameters probed end to end, one per module kind.
pub const PROBED_PARAMETERS: [&str; 8] = [
    "backbone.stem.conv.weight",
    "backbone.block4.expand.bn.weight",
    "ffp.l5.dfb.dilated.1.weight",
    "ffp.l4.fea.fc0.weight",
    "ffp.l3.fbm.expand.weight",
    "head.cls_tower.0.weight",
    "head.reg_out.bias",
    "head.cls_out.weight",
];

/// Loss of the whole detector (training mode, assignment frozen) w.r.t.
/// a sample of parameters in every module.
pub fn detector_check() -> Result<Check> {
    let det: Detector<f64> = Detector::build(tiny_config(), 11)?;
    let images = Tensor::new(&[1, 3, 64, 64], values(3 * 64 * 64, 5, 0.0, 1.0))?;
    let targets = toy_targets();
    let base = det.compute_gradients(images.clone(), &targets, None)?;
    let frozen = base.assignments.clone();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for name in PROBED_PARAMETERS {
        let id = det
            .store
            .find(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        let grad = base.gradients.param(id).expect("trainable").to_vec();
        let n = grad.len();
        for i in (0..n).step_by(n.div_ceil(6)) {
            let eval = |delta: f64| -> Result<f64> {
                let mut d = det.clone();
                d.store.get_mut(id).data_mut()[i] += delta;
                Ok(d.compute_gradients(images.clone(), &targets, Some(&frozen))?.loss.total)
            };
            numeric.push((eval(STEP)? - eval(-STEP)?) / (2.0 * STEP));
            analytic.push(grad[i]);
        }
    }
    Ok(check("detector parameters", relative_error(&analytic, &numeric)))
}
