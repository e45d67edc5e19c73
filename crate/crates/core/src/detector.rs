//! The full model: backbone, feature pyramid, head.

use alloc::vec::Vec;

use crate::backbone::{Backbone, BackboneConfig, BackboneOutput};
use crate::error::{Error, Result};
use crate::ffp::{Ffp, FfpConfig, FfpOutput};
use crate::graph::{Gradients, Graph, StatUpdate, Var};
use crate::head::{decode_nms_free, Assignment, Head, HeadConfig, HeadOutput, ImageTargets, LossBreakdown, LossConfig};
use crate::init::Initializer;
use crate::nms::Detection;
use crate::optim::OptimizerState;
use crate::params::{ParamStore, ParameterCount};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct DetectorConfig {
    pub backbone: BackboneConfig,
    pub ffp: FfpConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            backbone: BackboneConfig::desk(),
            ffp: FfpConfig::default(),
            head: HeadConfig::default(),
            loss: LossConfig::default(),
            score_threshold: 0.4,
            max_detections: 50,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.ffp.validate()?;
        self.head.validate()?;
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::Config(alloc::format!(
                "score threshold must be in [0,1], got {}",
                self.score_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Detector<F> {
    pub config: DetectorConfig,
    pub store: ParamStore<F>,
    pub backbone: Backbone,
    pub ffp: Ffp,
    pub head: Head,
}

/// Every stage's outputs for one forward pass.
#[derive(Debug, Clone)]
pub struct DetectorOutput {
    pub backbone: BackboneOutput,
    pub ffp: FfpOutput,
    pub head: HeadOutput,
}

/// Result of one forward/backward pass, before the optimizer runs.
#[derive(Debug, Clone)]
pub struct StepResult<F> {
    pub loss: LossBreakdown,
    pub assignments: Vec<Assignment>,
    pub gradients: Gradients<F>,
    pub stat_updates: Vec<StatUpdate<F>>,
}

impl<F: Real> Detector<F> {
    pub fn build(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = Initializer::new(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::build(&config.backbone, &mut store, &init)?;
        let ffp = Ffp::build(&config.ffp, config.backbone.tap_channels(), &mut store, &init)?;
        let head = Head::build(&config.head, config.ffp.channels, &mut store, &init)?;
        Ok(Detector {
            config,
            store,
            backbone,
            ffp,
            head,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_, F>, images: Var) -> Result<DetectorOutput> {
        let backbone = self.backbone.forward(g, images)?;
        let ffp = self.ffp.forward(g, [backbone.c3, backbone.c4, backbone.c5])?;
        let head = self.head.forward(g, ffp.p)?;
        Ok(DetectorOutput { backbone, ffp, head })
    }

    /// Inference on an `[N, 3, H, W]` batch; one detection list per image.
    pub fn predict(&self, images: Tensor<F>) -> Result<Vec<Vec<Detection>>> {
        let mut g = Graph::new(&self.store, false);
        let x = g.input(images);
        let out = self.forward(&mut g, x)?;
        let grid = out.head.grid(&g)?;
        Ok((0..grid.batch)
            .map(|i| decode_nms_free(&grid, i, self.config.score_threshold, self.config.max_detections))
            .collect())
    }

    /// Forward and backward in training mode. Pass `assignments` to hold the
    /// matching fixed (useful for gradient checks).
    pub fn compute_gradients(
        &self,
        images: Tensor<F>,
        targets: &[ImageTargets],
        assignments: Option<&[Assignment]>,
    ) -> Result<StepResult<F>> {
        let mut g = Graph::new(&self.store, true);
        let x = g.input(images);
        let out = self.forward(&mut g, x)?;
        let (loss_var, loss, assignments) = out.head.loss_node(&mut g, targets, &self.config.loss, assignments)?;
        let gradients = g.backward(loss_var)?;
        Ok(StepResult {
            loss,
            assignments,
            gradients,
            stat_updates: g.into_stat_updates(),
        })
    }

    /// One optimizer step. The weights are left untouched if the loss is not
    /// finite.
    pub fn train_step(
        &mut self,
        optimizer: &mut OptimizerState<F>,
        images: Tensor<F>,
        targets: &[ImageTargets],
        iteration: u64,
    ) -> Result<LossBreakdown> {
        let step = self.compute_gradients(images, targets, None)?;
        if !step.loss.is_finite() {
            return Err(Error::NonFinite {
                iteration,
                detail: alloc::format!("{:?}", step.loss),
            });
        }
        self.store.zero_grad();
        step.gradients.accumulate_into(&mut self.store);
        optimizer.step(&mut self.store)?;
        self.store.apply_stat_updates(&step.stat_updates);
        Ok(step.loss)
    }

    pub fn parameter_count(&self) -> ParameterCount {
        self.store.count_parameters()
    }

    /// Same architecture with every value converted to another precision.
    pub fn cast<G: Real>(&self) -> Detector<G> {
        Detector {
            config: self.config.clone(),
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            ffp: self.ffp.clone(),
            head: self.head.clone(),
        }
    }
}
