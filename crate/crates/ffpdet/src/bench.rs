//! Latency, memory and model-size measurements.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ffpdet_core::detector::Detector;
use ffpdet_core::head::BBox;
use ffpdet_core::nms::{nms, Detection};
use ffpdet_core::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{batch_tensor, targets_of, Dataset};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub with_nms: bool,
    pub nms_iou: f64,
    /// Replace the decoded candidates by this many synthetic boxes before
    /// suppression, to expose how NMS scales.
    pub stress_boxes: Option<usize>,
    pub warmup: usize,
    pub repetitions: usize,
    /// Images timed per repetition (from the start of the split).
    pub images: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            with_nms: false,
            nms_iou: 0.5,
            stress_boxes: None,
            warmup: 2,
            repetitions: 1,
            images: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub images: usize,
    /// Network plus NMS-free decode, seconds per image.
    pub mean_test: f64,
    pub median_test: f64,
    /// Suppression stage alone, seconds per image.
    pub mean_nms: Option<f64>,
    /// `mean_test + mean_nms`.
    pub mean_total: f64,
    /// One optimizer-free training pass, seconds per image.
    pub train_step: f64,
    /// Peak resident set (VmHWM) when the platform reports it.
    pub peak_rss_bytes: Option<u64>,
    pub model_size_bytes: u64,
    /// Detections per image -> number of images.
    pub histogram: BTreeMap<usize, usize>,
}

/// Deterministic candidate boxes with random scores, spread over the image.
pub fn stress_candidates(n: usize, width: f64, height: f64, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let w = rng.gen_range(4.0..(width / 8.0).max(5.0));
            let h = rng.gen_range(4.0..(height / 8.0).max(5.0));
            let x = rng.gen_range(0.0..width - w);
            let y = rng.gen_range(0.0..height - h);
            Detection {
                bbox: BBox {
                    x1: x,
                    y1: y,
                    x2: x + w,
                    y2: y + h,
                },
                score: rng.gen_range(0.0..1.0),
                class: rng.gen_range(0..2),
            }
        })
        .collect()
}

/// Mean seconds of `nms` over `reps` runs on the same candidates.
pub fn time_nms(candidates: &[Detection], iou: f64, reps: usize) -> f64 {
    let start = Instant::now();
    for _ in 0..reps.max(1) {
        std::hint::black_box(nms(std::hint::black_box(candidates), iou));
    }
    start.elapsed().as_secs_f64() / reps.max(1) as f64
}

pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn bench_inference<F: Real>(
    det: &Detector<F>,
    data: &Dataset,
    checkpoint: &Path,
    opts: &BenchOptions,
) -> Result<BenchReport> {
    let count = opts.images.min(data.len());
    if count == 0 {
        return Err(CliError::Config("benchmark needs at least one image".into()));
    }
    let model_size_bytes = std::fs::metadata(checkpoint)
        .map_err(|e| CliError::io(checkpoint, e))?
        .len();
    let samples = (0..count).map(|i| data.sample(i)).collect::<Result<Vec<_>>>()?;
    let inputs = samples
        .iter()
        .map(|s| batch_tensor::<F>(&[s]))
        .collect::<Result<Vec<_>>>()?;
    for _ in 0..opts.warmup {
        det.predict(inputs[0].clone())?;
    }

    let mut test_times = Vec::new();
    let mut nms_times = Vec::new();
    let mut histogram = BTreeMap::new();
    for rep in 0..opts.repetitions.max(1) {
        for (i, input) in inputs.iter().enumerate() {
            let start = Instant::now();
            let dets = det.predict(input.clone())?.remove(0);
            test_times.push(start.elapsed().as_secs_f64());
            if rep == 0 {
                *histogram.entry(dets.len()).or_insert(0) += 1;
            }
            if opts.with_nms {
                let candidates = match opts.stress_boxes {
                    Some(n) => {
                        let img = &samples[i].image;
                        stress_candidates(n, img.width as f64, img.height as f64, opts.seed ^ i as u64)
                    }
                    None => dets,
                };
                nms_times.push(time_nms(&candidates, opts.nms_iou, 1));
            }
        }
    }

    // gradient pass on a small batch, per image
    let batch: Vec<_> = samples.iter().take(4).collect();
    let targets: Vec<_> = batch.iter().map(|s| targets_of(s)).collect();
    let tensor = batch_tensor::<F>(&batch)?;
    let start = Instant::now();
    det.compute_gradients(tensor, &targets, None)?;
    let train_step = start.elapsed().as_secs_f64() / batch.len() as f64;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mean_test = mean(&test_times);
    let mean_nms = (!nms_times.is_empty()).then(|| mean(&nms_times));
    Ok(BenchReport {
        images: count,
        mean_test,
        median_test: median(&mut test_times),
        mean_nms,
        mean_total: mean_test + mean_nms.unwrap_or(0.0),
        train_step,
        peak_rss_bytes: peak_rss_bytes(),
        model_size_bytes,
        histogram,
    })
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let ms = |v: f64| format!("{:.3} ms", v * 1e3);
        writeln!(s, "{:<22} {:>14}", "images", self.images).unwrap();
        writeln!(s, "{:<22} {:>14}", "test (mean)", ms(self.mean_test)).unwrap();
        writeln!(s, "{:<22} {:>14}", "test (median)", ms(self.median_test)).unwrap();
        if let Some(n) = self.mean_nms {
            writeln!(s, "{:<22} {:>14}", "nms stage (mean)", ms(n)).unwrap();
        }
        writeln!(s, "{:<22} {:>14}", "test total (mean)", ms(self.mean_total)).unwrap();
        writeln!(s, "{:<22} {:>14}", "train pass / image", ms(self.train_step)).unwrap();
        if let Some(b) = self.peak_rss_bytes {
            writeln!(s, "{:<22} {:>11.1} MB", "peak memory (approx)", b as f64 / 1e6).unwrap();
        }
        writeln!(s, "{:<22} {:>11.2} MB", "model size", self.model_size_bytes as f64 / 1e6).unwrap();
        writeln!(s, "{:<22} {:>14.1}", "frames / s", 1.0 / self.mean_total).unwrap();
        s
    }

    pub fn machine(&self) -> String {
        let mut s = String::new();
        writeln!(s, "images={}", self.images).unwrap();
        writeln!(s, "test_mean_s={}", self.mean_test).unwrap();
        writeln!(s, "test_median_s={}", self.median_test).unwrap();
        if let Some(n) = self.mean_nms {
            writeln!(s, "nms_mean_s={n}").unwrap();
        }
        writeln!(s, "total_mean_s={}", self.mean_total).unwrap();
        writeln!(s, "train_step_s={}", self.train_step).unwrap();
        if let Some(b) = self.peak_rss_bytes {
            writeln!(s, "peak_rss_bytes={b}").unwrap();
        }
        writeln!(s, "model_size_bytes={}", self.model_size_bytes).unwrap();
        for (k, v) in &self.histogram {
            writeln!(s, "detections.{k}={v}").unwrap();
        }
        s
    }
}
