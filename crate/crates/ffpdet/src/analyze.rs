//! Parameter accounting and dilation-rate analysis.

use std::fmt::Write as _;

use ffpdet_core::conv::ConvSpec;
use ffpdet_core::detector::{Detector, DetectorConfig};
use ffpdet_core::ffp::{hdc_check, HdcReport, LevelModule};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    /// `(module, trainable parameters)` in build order.
    pub modules: Vec<(String, usize)>,
    pub total: usize,
    /// Bottleneck branch of one FBM at the configured widths.
    pub fbm_branch: usize,
    /// Dense 3×3 convolution at the pyramid width, the block it replaces.
    pub dense_reference: usize,
    pub hdc: HdcReport,
}

impl Analysis {
    pub fn ratio(&self) -> f64 {
        self.dense_reference as f64 / self.fbm_branch as f64
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<28} {:>12}", "module", "parameters").unwrap();
        for (name, n) in &self.modules {
            writeln!(s, "{name:<28} {n:>12}").unwrap();
        }
        writeln!(s, "{:<28} {:>12}", "total", self.total).unwrap();
        writeln!(s).unwrap();
        writeln!(s, "{:<28} {:>12}", "FBM branch", self.fbm_branch).unwrap();
        writeln!(s, "{:<28} {:>12}", "dense 3x3 reference", self.dense_reference).unwrap();
        writeln!(s, "{:<28} {:>12.2}", "reference / FBM branch", self.ratio()).unwrap();
        writeln!(s).unwrap();
        let join = |v: &[usize]| v.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" ");
        writeln!(s, "rates: {}", join(&self.hdc.rates)).unwrap();
        writeln!(s, "L: {}", join(&self.hdc.max_distance)).unwrap();
        writeln!(s, "composed gap: {}", self.hdc.composed_gap).unwrap();
        writeln!(s, "gridding: {}", if self.hdc.gridding { "yes" } else { "no" }).unwrap();
        s
    }

    pub fn machine(&self) -> String {
        let mut s = String::new();
        for (name, n) in &self.modules {
            writeln!(s, "params.{name}={n}").unwrap();
        }
        writeln!(s, "params.total={}", self.total).unwrap();
        writeln!(s, "fbm_branch={}", self.fbm_branch).unwrap();
        writeln!(s, "dense_reference={}", self.dense_reference).unwrap();
        writeln!(s, "ratio={}", self.ratio()).unwrap();
        let join = |v: &[usize]| v.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",");
        writeln!(s, "rates={}", join(&self.hdc.rates)).unwrap();
        writeln!(s, "max_distance={}", join(&self.hdc.max_distance)).unwrap();
        writeln!(s, "composed_gap={}", self.hdc.composed_gap).unwrap();
        writeln!(s, "gridding={}", self.hdc.gridding).unwrap();
        s
    }
}

/// Builds the model described by `cfg` and counts it. `rates` overrides the
/// dilation rates for both the model and the gap analysis.
pub fn analyze(cfg: &DetectorConfig, rates: Option<&[usize]>) -> Result<Analysis> {
    let mut cfg = cfg.clone();
    if let Some(r) = rates {
        cfg.ffp.dfb_rates = r.to_vec();
    }
    let det: Detector<f32> = Detector::build(cfg.clone(), 0)?;
    let count = det.parameter_count();
    let mut modules: Vec<(String, usize)> = count
        .by_prefix(3)
        .into_iter()
        .filter(|(k, _)| k.starts_with("ffp."))
        .collect();
    modules.insert(0, ("backbone".into(), count.under("backbone")));
    modules.push(("head".into(), count.under("head")));
    let fbm_branch = det
        .ffp
        .levels
        .iter()
        .map(|m| match m {
            LevelModule::Fbm(f) => &f.branch,
            LevelModule::Dfb(d) => &d.branch,
        })
        .next()
        .map(|b| b.specs().iter().map(|s| s.parameter_count()).sum())
        .unwrap_or(0);
    let c = cfg.ffp.channels;
    Ok(Analysis {
        modules,
        total: count.total,
        fbm_branch,
        dense_reference: ConvSpec::new(c, c, 3).parameter_count(),
        hdc: hdc_check(&cfg.ffp.dfb_rates, 3)?,
    })
}
