//! Fault feature pyramid: attention-gated laterals, bottleneck smoothing,
//! a dilated bottleneck at the top level, and top-down fusion.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::init::Initializer;
use crate::layers::{Conv2d, Linear};
use crate::params::ParamStore;
use crate::real::Real;

/// Smoothing block applied to one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum LevelBlock {
    Fbm,
    Dfb,
}

/// How the attention gate is combined with the projected map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum FeaCombine {
    /// `g(x) * x`
    #[default]
    Multiply,
    /// `x + g(x) * x`
    Add,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct FfpConfig {
    pub channels: usize,
    /// Attention hidden width is `channels / fea_reduction`.
    pub fea_reduction: usize,
    pub fea_combine: FeaCombine,
    pub bottleneck: usize,
    pub dfb_rates: Vec<usize>,
    /// Width of the dilated convolutions in the DFB shortcut.
    pub dfb_width: usize,
    /// Blocks for levels 3, 4, 5.
    pub placement: [LevelBlock; 3],
}

impl Default for FfpConfig {
    fn default() -> Self {
        FfpConfig {
            channels: 256,
            fea_reduction: 16,
            fea_combine: FeaCombine::Multiply,
            bottleneck: 16,
            dfb_rates: vec![1, 2, 5],
            dfb_width: 256,
            placement: [LevelBlock::Fbm, LevelBlock::Fbm, LevelBlock::Dfb],
        }
    }
}

impl FfpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.bottleneck == 0 || self.dfb_width == 0 {
            return Err(Error::Config("pyramid widths must be positive".into()));
        }
        if self.bottleneck >= self.channels {
            return Err(Error::Config(format!(
                "bottleneck channels ({}) must be below pyramid channels ({})",
                self.bottleneck, self.channels
            )));
        }
        if self.fea_reduction == 0 || !self.channels.is_multiple_of(self.fea_reduction) {
            return Err(Error::Config(format!(
                "attention reduction {} must divide {}",
                self.fea_reduction, self.channels
            )));
        }
        if self.placement.contains(&LevelBlock::Dfb) {
            if self.dfb_rates.is_empty() {
                return Err(Error::Config("dilated bottleneck needs at least one rate".into()));
            }
            if self.dfb_rates.contains(&0) {
                return Err(Error::Config("dilation rates must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Maximum-gap analysis of a stack of dilated kernels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HdcReport {
    pub rates: Vec<usize>,
    /// `L_i` in layer order, computed top-down from `L_n = r_n`.
    pub max_distance: Vec<usize>,
    pub kernel: usize,
    /// Bottom-level maximum gap with the rates applied in ascending order.
    /// Stacked convolutions commute, so this is the gap of the composed
    /// kernel regardless of the configured order.
    pub composed_gap: usize,
    /// True when the composed kernel skips input pixels ("do not use").
    pub gridding: bool,
}

fn max_distance_sequence(rates: &[usize]) -> Vec<usize> {
    let mut l = vec![0usize; rates.len()];
    let n = rates.len();
    l[n - 1] = rates[n - 1];
    for i in (0..n - 1).rev() {
        let (next, r) = (l[i + 1] as i64, rates[i] as i64);
        l[i] = (next - 2 * r).max(2 * r - next).max(r) as usize;
    }
    l
}

/// `L_i = max(L_{i+1} - 2 r_i, 2 r_i - L_{i+1}, r_i)` with `L_n = r_n`.
pub fn hdc_check(rates: &[usize], kernel: usize) -> Result<HdcReport> {
    if rates.is_empty() || rates.contains(&0) {
        return Err(Error::Config(format!("rates must be nonempty and positive, got {rates:?}")));
    }
    if kernel < 3 || kernel.is_multiple_of(2) {
        return Err(Error::Config(format!("kernel must be odd and at least 3, got {kernel}")));
    }
    let max_distance = max_distance_sequence(rates);
    let mut sorted = rates.to_vec();
    sorted.sort_unstable();
    let composed_gap = max_distance_sequence(&sorted)[0];
    Ok(HdcReport {
        rates: rates.to_vec(),
        max_distance,
        kernel,
        composed_gap,
        gridding: composed_gap > 1,
    })
}

#[derive(Debug, Clone)]
pub struct Fea {
    pub proj: Conv2d,
    pub fc0: Linear,
    pub fc1: Linear,
    pub combine: FeaCombine,
}

/// Intermediate values of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct FeaOutput {
    /// 1×1 projection before gating.
    pub projected: Var,
    /// Per-channel gate `[N, C]`, values in (0, 1).
    pub gate: Var,
    pub out: Var,
}

impl Fea {
    pub fn build<F: Real>(
        store: &mut ParamStore<F>,
        init: &Initializer,
        name: &str,
        in_channels: usize,
        cfg: &FfpConfig,
    ) -> Result<Self> {
        let c = cfg.channels;
        let hidden = c / cfg.fea_reduction;
        Ok(Fea {
            proj: Conv2d::new(store, init, &format!("{name}.proj"), ConvSpec::new(in_channels, c, 1).bias(true))?,
            fc0: Linear::new(store, init, &format!("{name}.fc0"), c, hidden),
            fc1: Linear::new(store, init, &format!("{name}.fc1"), hidden, c),
            combine: cfg.fea_combine,
        })
    }

    /// `sigmoid(W1 relu(W0 GAP(p))) * p` with `p` the 1×1 projection.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<FeaOutput> {
        let projected = self.proj.forward(g, x)?;
        let (n, c, _, _) = g.value(projected).dims4()?;
        let pooled = g.global_avg_pool(projected)?;
        let flat = g.reshape(pooled, &[n, c])?;
        let s = self.fc0.forward(g, flat)?;
        let s = g.activation(s, Activation::Relu);
        let s = self.fc1.forward(g, s)?;
        let gate = g.activation(s, Activation::Sigmoid);
        let gated = g.mul_channel(projected, gate)?;
        let out = match self.combine {
            FeaCombine::Multiply => gated,
            FeaCombine::Add => g.add(projected, gated)?,
        };
        Ok(FeaOutput { projected, gate, out })
    }
}

/// 1×1 reduce → 3×3 → 1×1 expand, bias-free.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub reduce: Conv2d,
    pub conv: Conv2d,
    pub expand: Conv2d,
}

impl Bottleneck {
    pub fn build<F: Real>(store: &mut ParamStore<F>, init: &Initializer, name: &str, cfg: &FfpConfig) -> Result<Self> {
        let (c, b) = (cfg.channels, cfg.bottleneck);
        Ok(Bottleneck {
            reduce: Conv2d::new(store, init, &format!("{name}.reduce"), ConvSpec::new(c, b, 1))?,
            conv: Conv2d::new(store, init, &format!("{name}.conv"), ConvSpec::same(b, b, 3, 1))?,
            expand: Conv2d::new(store, init, &format!("{name}.expand"), ConvSpec::new(b, c, 1))?,
        })
    }

    pub fn specs(&self) -> [ConvSpec; 3] {
        [self.reduce.spec, self.conv.spec, self.expand.spec]
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let y = self.reduce.forward(g, x)?;
        let y = g.activation(y, Activation::Relu);
        let y = self.conv.forward(g, y)?;
        let y = g.activation(y, Activation::Relu);
        self.expand.forward(g, y)
    }
}

/// `x + B(x)`.
#[derive(Debug, Clone)]
pub struct Fbm {
    pub branch: Bottleneck,
}

/// `D(x) + B(x)`, `D` a cascade of 3×3 dilated convolutions.
#[derive(Debug, Clone)]
pub struct Dfb {
    pub branch: Bottleneck,
    pub dilated: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub enum LevelModule {
    Fbm(Fbm),
    Dfb(Dfb),
}

/// Output of a level block plus its two paths (for visualization).
#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub branch: Var,
    pub shortcut: Var,
    pub out: Var,
}

impl Fbm {
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<BlockOutput> {
        check_channels(g, x, self.branch.reduce.spec.in_channels, "fbm")?;
        let branch = self.branch.forward(g, x)?;
        let out = g.add(x, branch)?;
        Ok(BlockOutput { branch, shortcut: x, out })
    }
}

impl Dfb {
    pub fn build<F: Real>(store: &mut ParamStore<F>, init: &Initializer, name: &str, cfg: &FfpConfig) -> Result<Self> {
        if cfg.dfb_rates.is_empty() {
            return Err(Error::Config("dilated bottleneck needs at least one rate".into()));
        }
        let n = cfg.dfb_rates.len();
        let dilated = cfg
            .dfb_rates
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let cin = if i == 0 { cfg.channels } else { cfg.dfb_width };
                let cout = if i + 1 == n { cfg.channels } else { cfg.dfb_width };
                Conv2d::new(store, init, &format!("{name}.dilated.{i}"), ConvSpec::same(cin, cout, 3, r))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dfb {
            branch: Bottleneck::build(store, init, &format!("{name}.bottleneck"), cfg)?,
            dilated,
        })
    }

    pub fn shortcut<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let mut y = x;
        for (i, conv) in self.dilated.iter().enumerate() {
            if i > 0 {
                y = g.activation(y, Activation::Relu);
            }
            y = conv.forward(g, y)?;
        }
        Ok(y)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<BlockOutput> {
        check_channels(g, x, self.branch.reduce.spec.in_channels, "dfb")?;
        let shortcut = self.shortcut(g, x)?;
        let branch = self.branch.forward(g, x)?;
        let out = g.add(shortcut, branch)?;
        Ok(BlockOutput { branch, shortcut, out })
    }
}

impl LevelModule {
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<BlockOutput> {
        match self {
            LevelModule::Fbm(m) => m.forward(g, x),
            LevelModule::Dfb(m) => m.forward(g, x),
        }
    }

    pub fn kind(&self) -> LevelBlock {
        match self {
            LevelModule::Fbm(_) => LevelBlock::Fbm,
            LevelModule::Dfb(_) => LevelBlock::Dfb,
        }
    }
}

fn check_channels<F: Real>(g: &Graph<'_, F>, x: Var, expect: usize, op: &'static str) -> Result<()> {
    let (_, c, _, _) = g.value(x).dims4()?;
    if c != expect {
        return Err(Error::shape(op, format!("expected {expect} input channels, got {c}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Ffp {
    pub fea: [Fea; 3],
    pub levels: [LevelModule; 3],
}

/// Pyramid outputs and the intermediate maps worth inspecting.
#[derive(Debug, Clone)]
pub struct FfpOutput {
    /// P3, P4, P5.
    pub p: [Var; 3],
    pub fea: [FeaOutput; 3],
    pub blocks: [BlockOutput; 3],
}

impl Ffp {
    pub fn build<F: Real>(
        cfg: &FfpConfig,
        in_channels: [usize; 3],
        store: &mut ParamStore<F>,
        init: &Initializer,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut fea = Vec::with_capacity(3);
        let mut levels = Vec::with_capacity(3);
        for (i, (&cin, &block)) in in_channels.iter().zip(&cfg.placement).enumerate() {
            let name = format!("ffp.l{}", i + 3);
            fea.push(Fea::build(store, init, &format!("{name}.fea"), cin, cfg)?);
            levels.push(match block {
                LevelBlock::Fbm => LevelModule::Fbm(Fbm {
                    branch: Bottleneck::build(store, init, &format!("{name}.fbm"), cfg)?,
                }),
                LevelBlock::Dfb => LevelModule::Dfb(Dfb::build(store, init, &format!("{name}.dfb"), cfg)?),
            });
        }
        Ok(Ffp {
            fea: fea.try_into().expect("three levels"),
            levels: levels.try_into().expect("three levels"),
        })
    }

    /// `P5 = M5(FEA(C5))`, `P4 = M4(FEA(C4) + up(P5))`, `P3 = M3(FEA(C3) + up(P4))`.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, c: [Var; 3]) -> Result<FfpOutput> {
        let f5 = self.fea[2].forward(g, c[2])?;
        let b5 = self.levels[2].forward(g, f5.out)?;
        let f4 = self.fea[1].forward(g, c[1])?;
        let up5 = g.upsample_nearest_2x(b5.out)?;
        let s4 = g.add(f4.out, up5)?;
        let b4 = self.levels[1].forward(g, s4)?;
        let f3 = self.fea[0].forward(g, c[0])?;
        let up4 = g.upsample_nearest_2x(b4.out)?;
        let s3 = g.add(f3.out, up4)?;
        let b3 = self.levels[0].forward(g, s3)?;
        Ok(FfpOutput {
            p: [b3.out, b4.out, b5.out],
            fea: [f3, f4, f5],
            blocks: [b3, b4, b5],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hdc_reference_cases() {
        let r = hdc_check(&[1, 2, 5], 3).unwrap();
        assert_eq!(r.max_distance, [1, 2, 5]);
        assert!(!r.gridding);
        let r = hdc_check(&[2, 2], 3).unwrap();
        assert_eq!(r.max_distance, [2, 2]);
        assert!(r.gridding);
        assert_eq!(hdc_check(&[1], 3).unwrap().max_distance, [1]);
        assert!(hdc_check(&[], 3).is_err());
        assert!(hdc_check(&[1, 2], 4).is_err());
    }

    #[test]
    fn config_invariants() {
        assert!(FfpConfig::default().validate().is_ok());
        let bad = FfpConfig {
            bottleneck: 256,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = FfpConfig {
            dfb_rates: vec![1, 0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
