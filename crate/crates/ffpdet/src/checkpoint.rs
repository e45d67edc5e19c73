//! Binary checkpoints: weights, the config that built them and, optionally,
//! the optimizer state needed to resume.
//!
//! Layout (little endian): magic `FFPDET1\n`, precision tag line, config
//! text, tensors as `(name, kind, shape, data)`, then an optional training
//! section with the iteration, optimizer scalars and per-tensor moments.

use std::fs;
use std::path::Path;

use ffpdet_core::detector::Detector;
use ffpdet_core::optim::{AdamWConfig, OptimizerState};
use ffpdet_core::params::{check_manifest, ParamKind, ParamStore};
use ffpdet_core::{Precision, Real, Tensor};

use crate::config::GlobalConfig;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"FFPDET1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState<F> {
    /// Iterations completed.
    pub iteration: u64,
    pub optimizer: OptimizerState<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub config_text: String,
    pub store: ParamStore<F>,
    pub training: Option<TrainingState<F>>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_values<F: Real>(out: &mut Vec<u8>, v: &[F]) {
    for x in v {
        x.write_le(out);
    }
}

pub fn encode<F: Real>(ckpt: &Checkpoint<F>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(F::PRECISION.tag().as_bytes());
    out.push(b'\n');
    put_str(&mut out, &ckpt.config_text);
    put_u64(&mut out, ckpt.store.len() as u64);
    for (_, p) in ckpt.store.iter() {
        put_str(&mut out, &p.name);
        out.push(match p.kind {
            ParamKind::Trainable => 0,
            ParamKind::Buffer => 1,
        });
        put_u64(&mut out, p.tensor.shape().len() as u64);
        for &d in p.tensor.shape() {
            put_u64(&mut out, d as u64);
        }
        put_values(&mut out, p.tensor.data());
    }
    match &ckpt.training {
        None => out.push(0),
        Some(t) => {
            out.push(1);
            put_u64(&mut out, t.iteration);
            let o = &t.optimizer;
            put_u64(&mut out, o.step);
            for v in [o.lr, o.config.beta1, o.config.beta2, o.config.eps, o.config.weight_decay] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            put_u64(&mut out, o.moments.len() as u64);
            for (id, m, v) in &o.moments {
                put_str(&mut out, ckpt.store.name(*id));
                put_values(&mut out, m);
                put_values(&mut out, v);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, what: &str) -> CliError {
        CliError::format(self.path, format!("{what} at byte {}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("unexpected end of checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| self.err("implausible length"))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec()).map_err(|_| self.err("invalid utf-8"))
    }

    fn values<F: Real>(&mut self, n: usize) -> Result<Vec<F>> {
        let w = F::PRECISION.byte_width();
        let bytes = self.take(n.checked_mul(w).ok_or_else(|| self.err("implausible length"))?)?;
        Ok(bytes.chunks_exact(w).map(F::read_le).collect())
    }
}

pub fn decode<F: Real>(bytes: &[u8], path: &Path) -> Result<Checkpoint<F>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(CliError::format(path, "not an ffpdet checkpoint"));
    }
    let tag = std::str::from_utf8(r.take(4)?).map_err(|_| r.err("bad precision tag"))?;
    let precision = Precision::from_tag(tag.trim_end()).ok_or_else(|| r.err("bad precision tag"))?;
    if precision != F::PRECISION {
        return Err(CliError::format(
            path,
            format!("checkpoint holds {} values, expected {}", precision.tag(), F::PRECISION.tag()),
        ));
    }
    let config_text = r.string()?;
    let mut store = ParamStore::new();
    for _ in 0..r.len()? {
        let name = r.string()?;
        let kind = match r.u8()? {
            0 => ParamKind::Trainable,
            1 => ParamKind::Buffer,
            _ => return Err(r.err("bad parameter kind")),
        };
        let ndim = r.len()?;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let data = r.values(shape.iter().product())?;
        let tensor = Tensor::new(&shape, data)?.with_requires_grad(kind == ParamKind::Trainable);
        store.add(name, tensor, kind);
    }
    let training = match r.u8()? {
        0 => None,
        1 => {
            let iteration = r.u64()?;
            let step = r.u64()?;
            let lr = r.f64()?;
            let config = AdamWConfig {
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
                weight_decay: r.f64()?,
            };
            let mut moments = Vec::new();
            for _ in 0..r.len()? {
                let name = r.string()?;
                let id = store.find(&name).ok_or_else(|| r.err(&format!("moments for unknown tensor {name}")))?;
                let n = store.get(id).numel();
                moments.push((id, r.values(n)?, r.values(n)?));
            }
            Some(TrainingState {
                iteration,
                optimizer: OptimizerState {
                    config,
                    lr,
                    step,
                    moments,
                },
            })
        }
        _ => return Err(r.err("bad training flag")),
    };
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok(Checkpoint {
        config_text,
        store,
        training,
    })
}

pub fn save<F: Real>(path: &Path, ckpt: &Checkpoint<F>) -> Result<u64> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let bytes = encode(ckpt);
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn load<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes, path)
}

/// Copies checkpoint weights into `target`, which must have the same
/// manifest; returns the optimizer state remapped onto `target`.
pub fn restore_into<F: Real>(ckpt: &Checkpoint<F>, target: &mut ParamStore<F>) -> Result<Option<TrainingState<F>>> {
    check_manifest(&target.manifest(), &ckpt.store.manifest())?;
    target.load_values(&ckpt.store)?;
    Ok(ckpt.training.as_ref().map(|t| {
        let mut t = t.clone();
        for (id, _, _) in &mut t.optimizer.moments {
            *id = target.find(ckpt.store.name(*id)).expect("manifests match");
        }
        t
    }))
}

/// Rebuilds the detector described by the checkpoint's own config and loads
/// its weights.
pub fn load_detector<F: Real>(path: &Path) -> Result<(GlobalConfig, Detector<F>)> {
    let ckpt = load::<F>(path)?;
    let cfg = GlobalConfig::parse(&ckpt.config_text)
        .map_err(|e| CliError::format(path, format!("embedded config: {e}")))?;
    let mut det = Detector::build(cfg.detector.clone(), 0)?;
    restore_into(&ckpt, &mut det.store)?;
    Ok((cfg, det))
}
