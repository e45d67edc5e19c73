//! Depthwise-separable inverted-residual trunk emitting C3, C4 and C5.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::init::Initializer;
use crate::layers::{ConvBn, Linear};
use crate::params::ParamStore;
use crate::real::Real;

/// Strides the three taps must have, relative to the input.
pub const TAP_STRIDES: [usize; 3] = [8, 16, 32];

/// One inverted-residual block: expand, depthwise, optional squeeze-excite,
/// project.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct BlockSpec {
    pub kernel: usize,
    /// Hidden width after expansion (before width multiplication).
    pub expansion: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub se: bool,
    pub activation: Activation,
}

const fn block(kernel: usize, expansion: usize, out_channels: usize, se: bool, hs: bool, stride: usize) -> BlockSpec {
    BlockSpec {
        kernel,
        expansion,
        out_channels,
        stride,
        se,
        activation: if hs { Activation::HardSwish } else { Activation::Relu },
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub width_multiplier: f64,
    /// Indices into `blocks` whose outputs become C3, C4, C5.
    pub taps: [usize; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Rounds to the nearest multiple of 8 (halves up), never below 8.
pub fn round_channels(channels: f64) -> usize {
    let r = ((channels + 4.0) / 8.0) as usize * 8;
    r.max(8)
}

impl BackboneConfig {
    /// Nine blocks, widths at most 96: trains on a CPU in minutes.
    pub fn desk() -> Self {
        BackboneConfig {
            stem_channels: 16,
            blocks: vec![
                block(3, 16, 16, true, false, 2),
                block(3, 48, 24, false, false, 2),
                block(3, 72, 24, false, false, 1),
                block(5, 72, 40, true, true, 2),
                block(5, 96, 40, true, true, 1),
                block(5, 96, 48, true, true, 1),
                block(5, 96, 64, true, true, 2),
                block(5, 96, 64, true, true, 1),
                block(5, 96, 96, true, true, 1),
            ],
            width_multiplier: 1.0,
            taps: [2, 5, 8],
        }
    }

    /// The published small mobile layout (feature trunk only).
    pub fn mobilenet_v3_small() -> Self {
        BackboneConfig {
            stem_channels: 16,
            blocks: vec![
                block(3, 16, 16, true, false, 2),
                block(3, 72, 24, false, false, 2),
                block(3, 88, 24, false, false, 1),
                block(5, 96, 40, true, true, 2),
                block(5, 240, 40, true, true, 1),
                block(5, 240, 40, true, true, 1),
                block(5, 120, 48, true, true, 1),
                block(5, 144, 48, true, true, 1),
                block(5, 288, 96, true, true, 2),
                block(5, 576, 96, true, true, 1),
                block(5, 576, 96, true, true, 1),
            ],
            width_multiplier: 1.0,
            taps: [2, 7, 10],
        }
    }

    pub fn scaled(&self, channels: usize) -> usize {
        round_channels(channels as f64 * self.width_multiplier)
    }

    /// Cumulative stride after each block (the stem contributes 2).
    pub fn block_strides(&self) -> Vec<usize> {
        let mut s = 2;
        self.blocks
            .iter()
            .map(|b| {
                s *= b.stride;
                s
            })
            .collect()
    }

    pub fn tap_strides(&self) -> Result<[usize; 3]> {
        let strides = self.block_strides();
        let mut out = [0; 3];
        for (o, &t) in out.iter_mut().zip(&self.taps) {
            *o = *strides
                .get(t)
                .ok_or_else(|| Error::Config(format!("tap index {t} out of range ({} blocks)", strides.len())))?;
        }
        Ok(out)
    }

    /// Output channels of C3, C4, C5 after width multiplication.
    pub fn tap_channels(&self) -> [usize; 3] {
        self.taps.map(|t| self.scaled(self.blocks[t].out_channels))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Config(format!(
                "width multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        if self.stem_channels == 0 {
            return Err(Error::Config("stem channels must be positive".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.kernel % 2 == 0 || b.stride == 0 || b.stride > 2 || b.expansion == 0 || b.out_channels == 0 {
                return Err(Error::Config(format!("block {i}: invalid spec {b:?}")));
            }
        }
        let strides = self.tap_strides()?;
        if strides != TAP_STRIDES {
            return Err(Error::Config(format!(
                "backbone tap strides must be {TAP_STRIDES:?}, got {strides:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct SqueezeExcite {
    reduce: Linear,
    expand: Linear,
}

#[derive(Debug, Clone)]
struct InvertedResidual {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    se: Option<SqueezeExcite>,
    project: ConvBn,
    residual: bool,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    stem: ConvBn,
    blocks: Vec<InvertedResidual>,
    taps: [usize; 3],
}

/// Backbone outputs; `se_gates` lists every squeeze-excite gate in order.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub c3: Var,
    pub c4: Var,
    pub c5: Var,
    pub se_gates: Vec<Var>,
}

impl Backbone {
    pub fn build<F: Real>(cfg: &BackboneConfig, store: &mut ParamStore<F>, init: &Initializer) -> Result<Self> {
        cfg.validate()?;
        let stem_out = cfg.scaled(cfg.stem_channels);
        let stem = ConvBn::new(
            store,
            init,
            "backbone.stem",
            ConvSpec::new(3, stem_out, 3).stride(2).padding(1),
            Some(Activation::HardSwish),
        )?;
        let mut cin = stem_out;
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        for (i, b) in cfg.blocks.iter().enumerate() {
            let name = format!("backbone.block{i}");
            let hidden = cfg.scaled(b.expansion);
            let cout = cfg.scaled(b.out_channels);
            let act = Some(b.activation);
            let expand = if hidden != cin {
                Some(ConvBn::new(
                    store,
                    init,
                    &format!("{name}.expand"),
                    ConvSpec::new(cin, hidden, 1),
                    act,
                )?)
            } else {
                None
            };
            let depthwise = ConvBn::new(
                store,
                init,
                &format!("{name}.dw"),
                ConvSpec::same(hidden, hidden, b.kernel, 1).stride(b.stride).groups(hidden),
                act,
            )?;
            let se = b.se.then(|| {
                let squeeze = round_channels(hidden as f64 / 4.0);
                SqueezeExcite {
                    reduce: Linear::new(store, init, &format!("{name}.se.fc0"), hidden, squeeze),
                    expand: Linear::new(store, init, &format!("{name}.se.fc1"), squeeze, hidden),
                }
            });
            let project = ConvBn::new(
                store,
                init,
                &format!("{name}.project"),
                ConvSpec::new(hidden, cout, 1),
                None,
            )?;
            blocks.push(InvertedResidual {
                expand,
                depthwise,
                se,
                project,
                residual: b.stride == 1 && cin == cout,
            });
            cin = cout;
        }
        Ok(Backbone {
            stem,
            blocks,
            taps: cfg.taps,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, images: Var) -> Result<BackboneOutput> {
        let (_, c, h, w) = g.value(images).dims4()?;
        if c != 3 {
            return Err(Error::shape("backbone", format!("expected 3 input channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(
                "backbone",
                format!("input height and width must be divisible by 32, got {h}x{w}"),
            ));
        }
        let mut x = self.stem.forward(g, images)?;
        let mut taps = [None; 3];
        let mut se_gates = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let input = x;
            let mut y = match &b.expand {
                Some(e) => e.forward(g, x)?,
                None => x,
            };
            y = b.depthwise.forward(g, y)?;
            if let Some(se) = &b.se {
                let (n, ch, _, _) = g.value(y).dims4()?;
                let pooled = g.global_avg_pool(y)?;
                let flat = g.reshape(pooled, &[n, ch])?;
                let s = se.reduce.forward(g, flat)?;
                let s = g.activation(s, Activation::Relu);
                let s = se.expand.forward(g, s)?;
                let gate = g.activation(s, Activation::Sigmoid);
                se_gates.push(gate);
                y = g.mul_channel(y, gate)?;
            }
            y = b.project.forward(g, y)?;
            if b.residual {
                y = g.add(y, input)?;
            }
            x = y;
            if let Some(k) = self.taps.iter().position(|&t| t == i) {
                taps[k] = Some(x);
            }
        }
        let [Some(c3), Some(c4), Some(c5)] = taps else {
            return Err(Error::Config("backbone taps not reached".into()));
        };
        Ok(BackboneOutput { c3, c4, c5, se_gates })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn rounding_to_multiples_of_eight() {
        assert_eq!(round_channels(12.0), 16);
        assert_eq!(round_channels(11.9), 8);
        assert_eq!(round_channels(3.0), 8);
        assert_eq!(round_channels(48.0), 48);
        assert_eq!(round_channels(36.0), 40);
    }

    #[test]
    fn width_multiplier_halves_widths() {
        let full = BackboneConfig::desk();
        let half = BackboneConfig {
            width_multiplier: 0.5,
            ..BackboneConfig::desk()
        };
        for b in &full.blocks {
            assert_eq!(half.scaled(b.out_channels), round_channels(b.out_channels as f64 / 2.0));
            assert_eq!(half.scaled(b.expansion), round_channels(b.expansion as f64 / 2.0));
        }
        assert_eq!(half.tap_channels(), [16, 24, 48]);
        assert_eq!(full.tap_channels(), [24, 48, 96]);
    }

    #[test]
    fn tap_strides_validated() {
        assert!(BackboneConfig::desk().validate().is_ok());
        assert!(BackboneConfig::mobilenet_v3_small().validate().is_ok());
        let bad = BackboneConfig {
            taps: [0, 5, 8],
            ..BackboneConfig::desk()
        };
        assert_eq!(bad.tap_strides().unwrap(), [4, 16, 32]);
        let err = bad.validate().unwrap_err();
        assert!(format!("{err}").contains("[4, 16, 32]"));
    }

    #[test]
    fn stride_contract_and_divisibility() {
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::build(&BackboneConfig::desk(), &mut store, &Initializer::new(1)).unwrap();
        let mut g = Graph::new(&store, true);
        let x = g.input(Tensor::full(&[1, 3, 64, 96], 0.5));
        let out = bb.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(out.c3), &[1, 24, 8, 12]);
        assert_eq!(g.shape(out.c4), &[1, 48, 4, 6]);
        assert_eq!(g.shape(out.c5), &[1, 96, 2, 3]);
        let bad = g.input(Tensor::zeros(&[1, 3, 63, 64]));
        let err = bb.forward(&mut g, bad).unwrap_err();
        assert!(format!("{err}").contains("divisible by 32"));
    }
}
