//! Test-set evaluation at image level.

use std::fmt::Write as _;

use ffpdet_core::detector::Detector;
use ffpdet_core::metrics::{classify_image, compute_metrics, MetricReport};
use ffpdet_core::nms::{nms, Detection};
use ffpdet_core::Real;

use crate::dataset::{batch_tensor, Dataset};
use crate::error::Result;
use crate::synth::CLASS_NAMES;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Image-level decision threshold; the head's decode threshold when `None`.
    pub image_threshold: Option<f64>,
    /// Run the baseline suppression after decoding.
    pub nms_iou: Option<f64>,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            image_threshold: None,
            nms_iou: None,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub file: String,
    pub truth: bool,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metrics: MetricReport,
    /// Detections per class over the whole test set.
    pub per_class: Vec<usize>,
    pub images: Vec<ImageResult>,
}

pub fn detect_all<F: Real>(det: &Detector<F>, data: &Dataset, opts: &EvalOptions) -> Result<Vec<ImageResult>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(opts.batch_size.max(1)) {
        let samples = chunk.iter().map(|&i| data.sample(i)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = samples.iter().collect();
        let dets = det.predict(batch_tensor(&refs)?)?;
        for (&i, d) in chunk.iter().zip(dets) {
            let d = match opts.nms_iou {
                Some(iou) => nms(&d, iou),
                None => d,
            };
            out.push(ImageResult {
                file: data.records[i].file.clone(),
                truth: data.records[i].fault,
                detections: d,
            });
        }
    }
    Ok(out)
}

pub fn evaluate<F: Real>(det: &Detector<F>, data: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    let images = detect_all(det, data, opts)?;
    let threshold = opts.image_threshold.unwrap_or(det.config.score_threshold);
    let predictions: Vec<(String, bool)> = images
        .iter()
        .map(|r| (r.file.clone(), classify_image(&r.detections, threshold)))
        .collect();
    let truth: Vec<(String, bool)> = images.iter().map(|r| (r.file.clone(), r.truth)).collect();
    let mut per_class = vec![0; det.config.head.num_classes];
    for r in &images {
        for d in r.detections.iter().filter(|d| d.score >= threshold) {
            per_class[d.class] += 1;
        }
    }
    Ok(EvalReport {
        metrics: compute_metrics(&predictions, &truth)?,
        per_class,
        images,
    })
}

impl EvalReport {
    pub fn table(&self) -> String {
        let m = &self.metrics;
        let mut s = String::new();
        writeln!(s, "{:<12} {:>8}", "images", m.m + m.n).unwrap();
        for (k, v) in [("fault (m)", m.m), ("normal (n)", m.n), ("a", m.a), ("b", m.b), ("c", m.c), ("d", m.d)] {
            writeln!(s, "{k:<12} {v:>8}").unwrap();
        }
        for (k, v) in [("CDR", m.cdr), ("FDR", m.fdr), ("MDR", m.mdr)] {
            writeln!(s, "{k:<12} {:>8.4}", v).unwrap();
        }
        for (c, n) in self.per_class.iter().enumerate() {
            let name = CLASS_NAMES.get(c).copied().unwrap_or("?");
            writeln!(s, "{:<12} {n:>8}", format!("det:{name}")).unwrap();
        }
        s
    }

    /// `key=value` lines; identical inputs give identical bytes.
    pub fn machine(&self) -> String {
        let m = &self.metrics;
        let mut s = String::new();
        for (k, v) in [("m", m.m), ("n", m.n), ("a", m.a), ("b", m.b), ("c", m.c), ("d", m.d)] {
            writeln!(s, "{k}={v}").unwrap();
        }
        writeln!(s, "cdr={}\nfdr={}\nmdr={}", m.cdr, m.fdr, m.mdr).unwrap();
        for (c, n) in self.per_class.iter().enumerate() {
            writeln!(s, "detections.{}={n}", CLASS_NAMES.get(c).copied().unwrap_or("?")).unwrap();
        }
        s
    }

    /// One record per detection: image, class, score, box corners.
    pub fn detections(&self) -> String {
        let mut s = String::new();
        for r in &self.images {
            for d in &r.detections {
                let b = d.bbox;
                writeln!(
                    s,
                    "{} {} {:.6} {:.2} {:.2} {:.2} {:.2}",
                    r.file, d.class, d.score, b.x1, b.y1, b.x2, b.y2
                )
                .unwrap();
            }
        }
        s
    }
}
