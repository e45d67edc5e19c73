//! Channel-averaged feature maps written as grayscale images.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use ffpdet_core::detector::Detector;
use ffpdet_core::ffp::LevelModule;
use ffpdet_core::graph::Graph;
use ffpdet_core::{Real, Tensor};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tap {
    /// Projection entering the attention gate.
    FeaPre,
    /// Attention output.
    FeaPost,
    /// Bottleneck branch of the dilated block.
    DfbBranch,
    /// Dilated block output.
    DfbOut,
}

impl FromStr for Tap {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fea_pre" => Ok(Tap::FeaPre),
            "fea_post" => Ok(Tap::FeaPost),
            "dfb_branch" => Ok(Tap::DfbBranch),
            "dfb_out" => Ok(Tap::DfbOut),
            _ => Err(CliError::Config(format!(
                "unknown tap `{s}` (fea_pre, fea_post, dfb_branch, dfb_out)"
            ))),
        }
    }
}

/// Mean over channels, min-max scaled to `0..=255`; a constant map is all 0.
pub fn average_map<F: Real>(t: &Tensor<F>) -> Result<(usize, usize, Vec<u8>)> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 {
        return Err(CliError::Config(format!("expected a single image, got a batch of {n}")));
    }
    let data = t.data();
    let mean: Vec<f64> = (0..h * w)
        .map(|p| (0..c).map(|ch| data[ch * h * w + p].as_f64()).sum::<f64>() / c as f64)
        .collect();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let pixels = mean
        .iter()
        .map(|v| {
            if range > 0.0 {
                ((v - lo) / range * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    Ok((w, h, pixels))
}

pub fn dump_average_feature_map<F: Real>(t: &Tensor<F>, path: &Path) -> Result<()> {
    let (w, h, pixels) = average_map(t)?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&pixels);
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Runs inference on one `[1, 3, H, W]` image and returns the tapped map.
/// `level` (3, 4 or 5) selects the attention block; the dilated taps use
/// whichever level hosts the dilated block.
pub fn tap_map<F: Real>(det: &Detector<F>, image: Tensor<F>, tap: Tap, level: usize) -> Result<Tensor<F>> {
    if !(3..=5).contains(&level) {
        return Err(CliError::Config(format!("level must be 3, 4 or 5, got {level}")));
    }
    let mut g = Graph::new(&det.store, false);
    let x = g.input(image);
    let out = det.forward(&mut g, x)?;
    let var = match tap {
        Tap::FeaPre => out.ffp.fea[level - 3].projected,
        Tap::FeaPost => out.ffp.fea[level - 3].out,
        Tap::DfbBranch | Tap::DfbOut => {
            let i = det
                .ffp
                .levels
                .iter()
                .position(|m| matches!(m, LevelModule::Dfb(_)))
                .ok_or_else(|| CliError::Config("this configuration has no dilated block".into()))?;
            if tap == Tap::DfbBranch {
                out.ffp.blocks[i].branch
            } else {
                out.ffp.blocks[i].out
            }
        }
    };
    Ok(g.value(var).clone())
}
