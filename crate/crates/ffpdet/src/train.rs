//! Step loop, learning-rate schedule, checkpoints and resume.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ffpdet_core::detector::Detector;
use ffpdet_core::head::{ImageTargets, LossBreakdown};
use ffpdet_core::init::derive_seed;
use ffpdet_core::optim::{AdamWConfig, OptimizerState};
use ffpdet_core::{Precision, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, TrainingState};
use crate::config::GlobalConfig;
use crate::dataset::{augment, augment_seed, batch_tensor, targets_of, AugmentPolicy, Dataset};
use crate::error::{CliError, Result};
use crate::synth::{Sample, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: u64,
    /// Iteration from which the rate is multiplied by `decay_factor`;
    /// defaults to 75% of `iterations`.
    pub decay_at: Option<u64>,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Save a resumable checkpoint every this many iterations (0: only at
    /// the end).
    pub checkpoint_every: u64,
    /// Dataset root, relative to the working directory.
    pub dataset: PathBuf,
    /// Single worker thread, fixed reduction order.
    pub deterministic: bool,
    pub precision: Precision,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 5e-5,
            iterations: 5000,
            decay_at: None,
            decay_factor: 0.1,
            weight_decay: AdamWConfig::default().weight_decay,
            seed: 0,
            checkpoint_every: 1000,
            dataset: PathBuf::from("data"),
            deterministic: false,
            precision: Precision::F32,
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainConfig {
    /// Long schedule: batch 16, lr 5e-5, 80K iterations, drop at 60K.
    pub fn full() -> Self {
        TrainConfig {
            iterations: 80_000,
            decay_at: Some(60_000),
            ..Self::default()
        }
    }

    /// Settings that train the desk model on one CPU in well under an hour.
    /// Sized to finish in under 30 minutes on one core at 176x128.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-3,
            iterations: 3000,
            ..Self::default()
        }
    }

    pub fn decay_iteration(&self) -> u64 {
        self.decay_at.unwrap_or(self.iterations * 3 / 4)
    }

    /// Rate used for the update that follows `iteration` completed steps.
    pub fn learning_rate_at(&self, iteration: u64) -> f64 {
        if iteration >= self.decay_iteration() {
            self.learning_rate * self.decay_factor
        } else {
            self.learning_rate
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CliError::Config("batch_size must be at least 1".into()));
        }
        if self.iterations > 0 && self.decay_iteration() >= self.iterations {
            return Err(CliError::Config(format!(
                "decay point {} must come before the last iteration {}",
                self.decay_iteration(),
                self.iterations
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(CliError::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Loads the training split once; batches are a pure function of
/// `(seed, iteration)`, so no RNG state has to be carried across resumes.
pub struct BatchSource {
    samples: Vec<Sample>,
    seed: u64,
    batch_size: usize,
    policy: AugmentPolicy,
}

impl BatchSource {
    pub fn new(dataset: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        if dataset.is_empty() {
            return Err(CliError::Config("training set is empty".into()));
        }
        Ok(BatchSource {
            samples: (0..dataset.len()).map(|i| dataset.sample(i)).collect::<Result<_>>()?,
            seed: cfg.seed,
            batch_size: cfg.batch_size,
            policy: cfg.augment,
        })
    }

    /// Indices drawn at `iteration`: consecutive slices of per-epoch
    /// permutations.
    pub fn indices(&self, iteration: u64) -> Vec<usize> {
        let len = self.samples.len() as u64;
        let mut epoch_order: Option<(u64, Vec<usize>)> = None;
        (0..self.batch_size as u64)
            .map(|b| {
                let pos = iteration * self.batch_size as u64 + b;
                let epoch = pos / len;
                if epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    let mut order: Vec<usize> = (0..self.samples.len()).collect();
                    use rand::seq::SliceRandom;
                    use rand::SeedableRng;
                    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(self.seed, epoch)));
                    epoch_order = Some((epoch, order));
                }
                epoch_order.as_ref().expect("set above").1[(pos % len) as usize]
            })
            .collect()
    }

    pub fn batch<F: Real>(&self, iteration: u64) -> Result<(Tensor<F>, Vec<ImageTargets>)> {
        let samples: Vec<Sample> = self
            .indices(iteration)
            .into_iter()
            .map(|i| augment(&self.samples[i], &self.policy, augment_seed(self.seed, iteration, i)))
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        Ok((batch_tensor(&refs)?, samples.iter().map(targets_of).collect()))
    }
}

pub const LOSS_HEADER: &str = "iteration,total,cls,l1,giou,lr";

fn loss_row(iteration: u64, l: &LossBreakdown, lr: f64) -> String {
    format!("{iteration},{},{},{},{},{lr}\n", l.total, l.cls, l.l1, l.giou)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
    pub iterations: u64,
    pub last: Option<LossBreakdown>,
    pub seconds: f64,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";

/// Trains (or resumes) into `out_dir`, writing `checkpoint.bin` and
/// `loss.csv`. `progress` sees every completed iteration.
pub fn train(
    cfg: &GlobalConfig,
    workdir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    progress: &mut (dyn FnMut(u64, &LossBreakdown) + Send),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut run = || match cfg.train.precision {
        Precision::F32 => train_with::<f32>(cfg, workdir, out_dir, resume, progress),
        Precision::F64 => train_with::<f64>(cfg, workdir, out_dir, resume, progress),
    };
    if cfg.train.deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?;
        pool.install(run)
    } else {
        run()
    }
}

fn train_with<F: Real>(
    cfg: &GlobalConfig,
    workdir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    progress: &mut (dyn FnMut(u64, &LossBreakdown) + Send),
) -> Result<TrainOutcome> {
    let tc = &cfg.train;
    let started = Instant::now();
    let mut det: Detector<F> = Detector::build(cfg.detector.clone(), tc.seed)?;
    let adamw = AdamWConfig {
        weight_decay: tc.weight_decay,
        ..AdamWConfig::default()
    };
    let mut optimizer = OptimizerState::new(&det.store, tc.learning_rate_at(0), adamw);
    let mut start = 0;
    if let Some(path) = resume {
        let ckpt = checkpoint::load::<F>(path)?;
        if let Some(state) = checkpoint::restore_into(&ckpt, &mut det.store)? {
            start = state.iteration;
            optimizer = state.optimizer;
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let loss_path = out_dir.join(LOSS_FILE);
    let mut curve = String::from(LOSS_HEADER);
    curve.push('\n');
    if start > 0 {
        // keep the rows of the run being resumed, drop anything past it
        if let Ok(old) = fs::read_to_string(&loss_path) {
            for line in old.lines().skip(1) {
                match line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
                    Some(it) if it < start => writeln!(curve, "{line}").expect("string write"),
                    _ => {}
                }
            }
        }
    }
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let config_text = cfg.render();
    let save = |det: &Detector<F>, optimizer: &OptimizerState<F>, iteration: u64, curve: &str| -> Result<()> {
        checkpoint::save(
            &ckpt_path,
            &Checkpoint {
                config_text: config_text.clone(),
                store: det.store.clone(),
                training: Some(TrainingState {
                    iteration,
                    optimizer: optimizer.clone(),
                }),
            },
        )?;
        fs::write(&loss_path, curve).map_err(|e| CliError::io(&loss_path, e))
    };

    let mut last = None;
    if start < tc.iterations {
        let dataset = Dataset::load(&workdir.join(&tc.dataset), Split::Train)?;
        let source = BatchSource::new(&dataset, tc)?;
        for it in start..tc.iterations {
            optimizer.lr = tc.learning_rate_at(it);
            let (images, targets) = source.batch::<F>(it)?;
            let loss = det.train_step(&mut optimizer, images, &targets, it)?;
            curve.push_str(&loss_row(it, &loss, optimizer.lr));
            progress(it, &loss);
            last = Some(loss);
            let done = it + 1;
            if tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0 && done < tc.iterations {
                save(&det, &optimizer, done, &curve)?;
            }
        }
    }
    save(&det, &optimizer, tc.iterations.max(start), &curve)?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        loss_curve: loss_path,
        iterations: tc.iterations.max(start),
        last,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmokeReport {
    pub passed: bool,
    pub steps: usize,
    pub first: f64,
    pub final_loss: f64,
}

pub const SMOKE_TARGET: f64 = 0.05;
pub const SMOKE_STEPS: usize = 500;

/// Repeatedly fits one fixed batch; passes once the total loss drops below
/// [`SMOKE_TARGET`] within [`SMOKE_STEPS`] updates.
pub fn overfit_smoke<F: Real>(
    det: &mut Detector<F>,
    lr: f64,
    images: &Tensor<F>,
    targets: &[ImageTargets],
) -> Result<SmokeReport> {
    let mut optimizer = OptimizerState::new(&det.store, lr, AdamWConfig::default());
    let mut first = None;
    let mut final_loss = f64::INFINITY;
    for step in 0..SMOKE_STEPS {
        let loss = det.train_step(&mut optimizer, images.clone(), targets, step as u64)?;
        first.get_or_insert(loss.total);
        final_loss = loss.total;
        if loss.total < SMOKE_TARGET {
            return Ok(SmokeReport {
                passed: true,
                steps: step + 1,
                first: first.expect("set"),
                final_loss,
            });
        }
    }
    Ok(SmokeReport {
        passed: false,
        steps: SMOKE_STEPS,
        first: first.unwrap_or(f64::INFINITY),
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_a_step_function() {
        let cfg = TrainConfig {
            iterations: 100,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.decay_iteration(), 75);
        for it in 0..100 {
            let want = if it < 75 { 1e-3 } else { 1e-3 * 0.1 };
            assert_eq!(cfg.learning_rate_at(it), want);
        }
        assert_eq!(TrainConfig::full().decay_iteration(), 60_000);
        assert_eq!(TrainConfig::full().learning_rate_at(60_000), 5e-5 * 0.1);
    }

    #[test]
    fn invalid_configs() {
        let bad = TrainConfig {
            decay_at: Some(10),
            iterations: 10,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        }
        .validate()
        .unwrap();
    }
}
