//! Per-location classification/regression head (no centerness), one-to-one
//! assignment, the composite loss, and NMS-free decoding.

pub mod assign;
pub mod bbox;
pub mod decode;
pub mod grid;
pub mod loss;

use alloc::format;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

pub use assign::{assign_one_to_one, Assignment, Target};
pub use bbox::BBox;
pub use decode::decode_nms_free;
pub use grid::{GridLevel, Location, PredictionGrid};
pub use loss::{
    focal_loss, giou_loss, l1_loss, matching_cost, total_loss, ImageSize, ImageTargets, LossBreakdown, LossConfig,
};

use crate::backbone::TAP_STRIDES;
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::init::Initializer;
use crate::layers::Conv2d;
use crate::params::ParamStore;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct HeadConfig {
    pub num_classes: usize,
    pub tower_channels: usize,
    /// Convolutions per branch.
    pub tower_depth: usize,
    /// Initial foreground probability set through the class bias.
    pub prior_prob: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            num_classes: 2,
            tower_channels: 32,
            tower_depth: 4,
            prior_prob: 0.01,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.tower_channels == 0 {
            return Err(Error::Config("head needs at least one class and channel".into()));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return Err(Error::Config(format!("prior probability must be in (0,1), got {}", self.prior_prob)));
        }
        Ok(())
    }
}

/// Final-layer weights start near zero so the bias decides the first outputs.
const PREDICTOR_INIT_BOUND: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct Head {
    pub in_channels: usize,
    pub num_classes: usize,
    cls_tower: Vec<Conv2d>,
    reg_tower: Vec<Conv2d>,
    cls_out: Conv2d,
    reg_out: Conv2d,
}

/// Head outputs per level (3, 4, 5).
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[N, num_classes, H, W]` logits.
    pub cls: [Var; 3],
    /// `[N, 4, H, W]` raw distances.
    pub reg: [Var; 3],
}

impl Head {
    pub fn build<F: Real>(
        cfg: &HeadConfig,
        in_channels: usize,
        store: &mut ParamStore<F>,
        init: &Initializer,
    ) -> Result<Self> {
        cfg.validate()?;
        let tower = |store: &mut ParamStore<F>, branch: &str| -> Result<Vec<Conv2d>> {
            (0..cfg.tower_depth)
                .map(|i| {
                    let cin = if i == 0 { in_channels } else { cfg.tower_channels };
                    Conv2d::new(
                        store,
                        init,
                        &format!("head.{branch}_tower.{i}"),
                        ConvSpec::same(cin, cfg.tower_channels, 3, 1).bias(true),
                    )
                })
                .collect()
        };
        let cls_tower = tower(store, "cls")?;
        let reg_tower = tower(store, "reg")?;
        let feat = if cfg.tower_depth == 0 { in_channels } else { cfg.tower_channels };
        let cls_out = Conv2d::with_bound(
            store,
            init,
            "head.cls_out",
            ConvSpec::new(feat, cfg.num_classes, 1).bias(true),
            PREDICTOR_INIT_BOUND,
        )?;
        let prior_bias = -((1.0 - cfg.prior_prob) / cfg.prior_prob).ln();
        store
            .get_mut(cls_out.bias.expect("has bias"))
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = F::lit(prior_bias));
        let reg_out = Conv2d::with_bound(
            store,
            init,
            "head.reg_out",
            ConvSpec::new(feat, 4, 1).bias(true),
            PREDICTOR_INIT_BOUND,
        )?;
        Ok(Head {
            in_channels,
            num_classes: cfg.num_classes,
            cls_tower,
            reg_tower,
            cls_out,
            reg_out,
        })
    }

    fn branch<F: Real>(g: &mut Graph<'_, F>, tower: &[Conv2d], out: &Conv2d, x: Var) -> Result<Var> {
        let mut y = x;
        for conv in tower {
            y = conv.forward(g, y)?;
            y = g.activation(y, Activation::Relu);
        }
        out.forward(g, y)
    }

    /// Shared towers applied to P3, P4, P5.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, p: [Var; 3]) -> Result<HeadOutput> {
        let mut cls = [p[0]; 3];
        let mut reg = [p[0]; 3];
        for (i, &x) in p.iter().enumerate() {
            let (_, c, _, _) = g.value(x).dims4()?;
            if c != self.in_channels {
                return Err(Error::shape(
                    "head",
                    format!("P{} has {c} channels, head expects {}", i + 3, self.in_channels),
                ));
            }
            cls[i] = Self::branch(g, &self.cls_tower, &self.cls_out, x)?;
            reg[i] = Self::branch(g, &self.reg_tower, &self.reg_out, x)?;
        }
        Ok(HeadOutput { cls, reg })
    }
}

impl HeadOutput {
    /// Copies the head outputs out of the graph (as `f64`).
    pub fn grid<F: Real>(&self, g: &Graph<'_, F>) -> Result<PredictionGrid> {
        let mut levels = Vec::with_capacity(3);
        let mut batch = 0;
        let mut num_classes = 0;
        for i in 0..3 {
            let (n, c, h, w) = g.value(self.cls[i]).dims4()?;
            batch = n;
            num_classes = c;
            levels.push(GridLevel {
                stride: TAP_STRIDES[i],
                height: h,
                width: w,
                cls: g.value(self.cls[i]).data().iter().map(|v| v.as_f64()).collect(),
                reg: g.value(self.reg[i]).data().iter().map(|v| v.as_f64()).collect(),
            });
        }
        Ok(PredictionGrid {
            batch,
            num_classes,
            levels,
        })
    }

    /// Records the fused detection loss as a scalar node.
    pub fn loss_node<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        targets: &[ImageTargets],
        cfg: &LossConfig,
        assignments: Option<&[Assignment]>,
    ) -> Result<(Var, LossBreakdown, Vec<Assignment>)> {
        let grid = self.grid(g)?;
        if targets.len() != grid.batch {
            return Err(Error::shape(
                "loss",
                format!("{} target sets for a batch of {}", targets.len(), grid.batch),
            ));
        }
        let (breakdown, assignments, grads) = match assignments {
            Some(a) => {
                let (b, gr) = loss::total_loss_with(&grid, targets, a, cfg);
                (b, a.to_vec(), gr)
            }
            None => total_loss(&grid, targets, cfg)?,
        };
        let inputs: Vec<Var> = self.cls.iter().chain(&self.reg).copied().collect();
        let local = grads
            .cls
            .into_iter()
            .chain(grads.reg)
            .map(|v| v.into_iter().map(F::lit).collect())
            .collect();
        let node = g.custom_scalar(&inputs, F::lit(breakdown.total), local)?;
        Ok((node, breakdown, assignments))
    }
}
