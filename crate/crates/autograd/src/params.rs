use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::backward::Gradients;
use crate::tensor::{numel, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed parameter blob: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Normal(f64),
}

/// Named, ordered collection of trainable tensors.
///
/// Layers keep [`ParamId`]s; the optimizer swaps in updated leaves between
/// steps, so the forward pass always reads the current values.
#[derive(Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.names.iter().zip(&self.tensors).map(|(n, t)| (n, t.shape())))
            .finish()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let n = numel(shape);
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect(),
        };
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(Tensor::leaf(data, shape));
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id_of(name).map(|id| self.get(id))
    }

    /// Overwrite values, keeping the shape.
    pub fn set(&mut self, id: ParamId, data: Vec<f64>) {
        let shape = self.tensors[id.0].shape().to_vec();
        self.tensors[id.0] = Tensor::leaf(data, &shape);
    }

    pub fn set_by_name(&mut self, name: &str, value: &Tensor) -> Result<(), ParamError> {
        let id = self
            .id_of(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        let cur = self.get(id);
        if cur.shape() != value.shape() {
            return Err(ParamError::ShapeMismatch {
                name: name.to_string(),
                expected: cur.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        self.set(id, value.to_vec());
        Ok(())
    }

    /// Same names and values, but as constants: forward passes through a
    /// frozen store build no graph for these parameters.
    pub fn frozen(&self) -> ParamStore {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::detach).collect(),
            index: self.index.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Zeroed gradient buffer shaped like this store.
    pub fn zero_grads(&self) -> GradBuffer {
        GradBuffer {
            grads: self.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    /// Pull this store's gradients out of a backward pass.
    pub fn collect_grads(&self, grads: &Gradients) -> GradBuffer {
        let mut buf = self.zero_grads();
        buf.accumulate(self, grads, 1.0);
        buf
    }

    /// Binary dump: count, then per tensor name, rank, dims and LE `f64` data.
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), ParamError> {
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for (name, t) in self.iter() {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u64).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(t.dims() as u64).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Parse a blob written by [`ParamStore::write_to`].
    pub fn read_from(r: &mut impl Read) -> Result<Vec<(String, Tensor)>, ParamError> {
        fn u64_of(r: &mut impl Read) -> Result<u64, ParamError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|e| ParamError::Malformed(e.to_string()))?;
            Ok(u64::from_le_bytes(b))
        }
        let count = u64_of(r)? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u64_of(r)? as usize;
            if len > 1 << 16 {
                return Err(ParamError::Malformed(format!("name length {len}")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)
                .map_err(|e| ParamError::Malformed(e.to_string()))?;
            let name = String::from_utf8(name).map_err(|e| ParamError::Malformed(e.to_string()))?;
            let rank = u64_of(r)? as usize;
            if rank > 8 {
                return Err(ParamError::Malformed(format!("rank {rank} for `{name}`")));
            }
            let shape = (0..rank)
                .map(|_| u64_of(r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = numel(&shape);
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_bits(u64_of(r)?));
            }
            out.push((name, Tensor::new(data, &shape)));
        }
        Ok(out)
    }

    /// Replace values from a parsed blob; every stored name must be present
    /// with an identical shape.
    pub fn load_entries(&mut self, entries: &[(String, Tensor)]) -> Result<(), ParamError> {
        for (name, t) in entries {
            self.set_by_name(name, t)?;
        }
        Ok(())
    }

    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<(), ParamError> {
        let entries = Self::read_from(&mut &bytes[..])?;
        if entries.len() != self.len() {
            return Err(ParamError::Malformed(format!(
                "blob has {} tensors, store has {}",
                entries.len(),
                self.len()
            )));
        }
        self.load_entries(&entries)
    }
}

/// Plain gradient storage aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    pub grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn accumulate(&mut self, store: &ParamStore, grads: &Gradients, scale: f64) {
        for (buf, t) in self.grads.iter_mut().zip(&store.tensors) {
            if let Some(g) = grads.get(t) {
                for (b, v) in buf.iter_mut().zip(g.data()) {
                    *b += scale * v;
                }
            }
        }
    }

    pub fn add(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flat_map(|g| g.iter()).all(|v| v.is_finite())
    }
}
