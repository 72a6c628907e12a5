//! Named parameter collections and the binary checkpoint container.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Dual, Gradients, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered list of named tensors. Order is part of the identity: two sets
/// are compatible only if names and shapes match position by position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Records every tensor as a differentiable leaf.
    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| {
                let lifted = t.data().iter().map(|&v| S::from_f64(v)).collect();
                tape.param(Tensor::new(t.shape().to_vec(), lifted)?)
            })
            .collect()
    }

    /// Records every tensor as a leaf whose dual part is `tangent`, for
    /// Hessian-vector products.
    pub fn bind_dual(&self, tape: &mut Tape<Dual>, tangent: &[Tensor]) -> Result<Vec<Var>> {
        check_grads(self, tangent)?;
        self.tensors
            .iter()
            .zip(tangent)
            .map(|(t, v)| {
                let data = t.data().iter().zip(v.data()).map(|(&re, &eps)| Dual { re, eps }).collect();
                tape.param(Tensor::new(t.shape().to_vec(), data)?)
            })
            .collect()
    }

    /// Reads the gradient of every bound tensor; untouched leaves get zeros.
    pub fn collect_grads<S: Scalar>(&self, grads: &mut Gradients<S>, vars: &[Var]) -> Vec<Tensor<S>> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// `self ← self − lr · grads`, refusing non-finite gradients.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        check_grads(self, grads)?;
        if lr == 0.0 {
            // keeps -0.0 entries bit-identical
            return Ok(());
        }
        for (p, g) in self.tensors.iter_mut().zip(grads) {
            p.axpy(-lr, g)?;
        }
        Ok(())
    }

    /// Parameters shifted by `scale · direction` (a new set).
    pub fn shifted(&self, direction: &[Tensor], scale: f64) -> Result<ParamSet> {
        let mut out = self.clone();
        for (p, d) in out.tensors.iter_mut().zip(direction) {
            p.axpy(scale, d)?;
        }
        Ok(out)
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn check_grads(params: &ParamSet, grads: &[Tensor]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients for {} parameter blocks",
            grads.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.get(i).shape() {
            return Err(Error::shape("gradient", g.shape(), params.get(i).shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient {
                param: params.name(i).to_string(),
            });
        }
    }
    Ok(())
}

/// Xavier-uniform initialisation for a `fan_in × fan_out` matrix.
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

const MAGIC: &[u8; 8] = b"RMLCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    params: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Self-describing checkpoint: an 8-byte magic, a little-endian u64 header
/// length, a JSON header (kind, metadata, parameter names and shapes), then
/// every parameter value as little-endian f64 in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            params: self
                .params
                .names
                .iter()
                .zip(&self.params.tensors)
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.params.count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.params.tensors {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 8];
        bytes
            .read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 8];
        bytes
            .read_exact(&mut len)
            .map_err(|_| Error::Checkpoint("truncated header length".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if bytes.len() < len {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[..len])?;
        bytes = &bytes[len..];
        let mut params = ParamSet::new();
        for entry in header.params {
            let numel: usize = entry.shape.iter().product();
            if bytes.len() < numel * 8 {
                return Err(Error::Checkpoint(format!("truncated data for `{}`", entry.name)));
            }
            let data = bytes[..numel * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            bytes = &bytes[numel * 8..];
            params.push(entry.name, Tensor::new(entry.shape, data)?);
        }
        if !bytes.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len())));
        }
        Ok(Checkpoint {
            kind: header.kind,
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
