//! Named parameter and buffer storage shared by every model component.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized by gradient descent.
    Trainable,
    /// Persistent non-trainable state (normalization running statistics).
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<F> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
}

/// Trainable element counts: total plus one row per parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParameterCount {
    pub total: usize,
    pub per_tensor: Vec<(String, usize)>,
}

impl ParameterCount {
    /// Sums per-tensor counts by the first `depth` dot-separated name segments.
    pub fn by_prefix(&self, depth: usize) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (name, count) in &self.per_tensor {
            let key: String = name.split('.').take(depth).collect::<Vec<_>>().join(".");
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, total)) => *total += count,
                None => groups.push((key, *count)),
            }
        }
        groups
    }

    /// Total over tensors whose name starts with `prefix.` (or equals it).
    pub fn under(&self, prefix: &str) -> usize {
        self.per_tensor
            .iter()
            .filter(|(n, _)| n == prefix || n.starts_with(prefix) && n[prefix.len()..].starts_with('.'))
            .map(|(_, c)| c)
            .sum()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let tensor = tensor.with_requires_grad(kind == ParamKind::Trainable);
        self.params.push(Parameter { name, kind, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<F>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.iter().filter(|(_, p)| p.kind == ParamKind::Trainable)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// Freezes (or unfreezes) every trainable tensor whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, on: bool) {
        for p in &mut self.params {
            if p.kind == ParamKind::Trainable && p.name.starts_with(prefix) {
                p.tensor.set_requires_grad(on);
            }
        }
    }

    pub fn count_parameters(&self) -> ParameterCount {
        let per_tensor: Vec<(String, usize)> = self
            .trainable()
            .map(|(_, p)| (p.name.clone(), p.tensor.numel()))
            .collect();
        ParameterCount {
            total: per_tensor.iter().map(|(_, c)| c).sum(),
            per_tensor,
        }
    }

    /// `(name, shape)` of every tensor in storage order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
            .collect()
    }

    /// Copies values from `other`, which must have an identical manifest.
    pub fn load_values(&mut self, other: &ParamStore<F>) -> Result<()> {
        check_manifest(&self.manifest(), &other.manifest())?;
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    kind: p.kind,
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }
}

/// Fails with a readable diff unless both manifests list the same names and
/// shapes in the same order.
pub fn check_manifest(expected: &[(String, Vec<usize>)], found: &[(String, Vec<usize>)]) -> Result<()> {
    let exp: BTreeMap<&str, &Vec<usize>> = expected.iter().map(|(n, s)| (n.as_str(), s)).collect();
    let got: BTreeMap<&str, &Vec<usize>> = found.iter().map(|(n, s)| (n.as_str(), s)).collect();
    let mut diffs: Vec<String> = Vec::new();
    for (name, shape) in &exp {
        match got.get(name) {
            None => diffs.push(format!("missing {name} {shape:?}")),
            Some(s) if s != shape => diffs.push(format!("{name}: expected {shape:?}, found {s:?}")),
            _ => {}
        }
    }
    for (name, shape) in &got {
        if !exp.contains_key(name) {
            diffs.push(format!("unexpected {name} {shape:?}"));
        }
    }
    if diffs.is_empty() && expected.iter().map(|(n, _)| n).ne(found.iter().map(|(n, _)| n)) {
        diffs.push("parameter order differs".to_string());
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("parameter manifest mismatch: {}", diffs.join("; "))))
    }
}
