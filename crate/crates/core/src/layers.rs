//! Parameterized building blocks recorded onto a [`Graph`].

#[cfg(not(feature = "std"))]
use num_traits::Float;
use alloc::format;
use alloc::string::String;

use crate::conv::ConvSpec;
use crate::error::Result;
use crate::graph::{Activation, BnStats, Graph, Var};
use crate::init::Initializer;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    /// He-uniform weights, zero bias.
    pub fn new<F: Real>(store: &mut ParamStore<F>, init: &Initializer, name: &str, spec: ConvSpec) -> Result<Self> {
        let fan_in = spec.in_channels / spec.groups * spec.kernel * spec.kernel;
        Self::with_bound(store, init, name, spec, (6.0 / fan_in as f64).sqrt())
    }

    pub fn with_bound<F: Real>(
        store: &mut ParamStore<F>,
        init: &Initializer,
        name: &str,
        spec: ConvSpec,
        bound: f64,
    ) -> Result<Self> {
        spec.validate()?;
        let wname = format!("{name}.weight");
        let weight = store.add(
            wname.clone(),
            init.uniform(&wname, &spec.weight_shape(), bound),
            ParamKind::Trainable,
        );
        let bias = spec.bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[spec.out_channels]),
                ParamKind::Trainable,
            )
        });
        Ok(Conv2d { spec, weight, bias })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, &self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &Initializer,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let wname = format!("{name}.weight");
        let weight = store.add(
            wname.clone(),
            init.fan_in(&wname, &[out_features, in_features], in_features),
            ParamKind::Trainable,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]), ParamKind::Trainable);
        Linear { weight, bias }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.dense(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub scale: ParamId,
    pub shift: ParamId,
    pub stats: BnStats,
}

impl BatchNorm2d {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        let n = |s: &str| -> String { format!("{name}.{s}") };
        BatchNorm2d {
            scale: store.add(n("weight"), Tensor::full(&[channels], F::one()), ParamKind::Trainable),
            shift: store.add(n("bias"), Tensor::zeros(&[channels]), ParamKind::Trainable),
            stats: BnStats {
                mean: store.add(n("running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer),
                var: store.add(n("running_var"), Tensor::full(&[channels], F::one()), ParamKind::Buffer),
                count: store.add(n("num_batches"), Tensor::zeros(&[1]), ParamKind::Buffer),
            },
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (s, b) = (g.param(self.scale), g.param(self.shift));
        g.batch_norm(x, s, b, self.stats)
    }
}

/// Convolution, normalization and an optional activation.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Option<Activation>,
}

impl ConvBn {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &Initializer,
        name: &str,
        spec: ConvSpec,
        act: Option<Activation>,
    ) -> Result<Self> {
        let conv = Conv2d::new(store, init, &format!("{name}.conv"), spec.bias(false))?;
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), spec.out_channels);
        Ok(ConvBn { conv, bn, act })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(match self.act {
            Some(a) => g.activation(y, a),
            None => y,
        })
    }
}
