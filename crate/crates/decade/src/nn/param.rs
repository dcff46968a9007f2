//! Named parameter storage with deterministic initialization.
//!
//! Parameters live in registration order; gradients are a separate structure
//! with the same layout so a forward pass can borrow the store immutably
//! while a backward pass accumulates. Initialization draws from a ChaCha
//! stream keyed by the tensor's name, so adding or reordering other tensors
//! never perturbs an existing one.

use crate::error::{DecadeError, Result};
use crate::seed::{derive_seed, stream_rng};
use rand::Rng;
use sha2::{Digest, Sha256};
use std::collections::HashMap;

/// Handle into a [`ParamStore`]; indexes registration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Initialization scheme applied at registration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// All learnable tensors of one network, in registration order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { seed, params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(DecadeError::validation(format!("duplicate parameter `{name}`")));
        }
        let n: usize = shape.iter().product();
        if n == 0 {
            return Err(DecadeError::validation(format!("parameter `{name}` has zero size")));
        }
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan_in) => {
                assert!(fan_in > 0, "fan_in must be positive for `{name}`");
                let bound = 1.0 / (fan_in as f32).sqrt();
                let mut rng = stream_rng(derive_seed(self.seed, name), 0);
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        let id = ParamId(self.params.len());
        self.params.push(Param { name: name.to_string(), shape: shape.to_vec(), data });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.params[id.0].data
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Concatenated values in registration order; the checkpoint blob layout.
    pub fn flat_data(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for p in &self.params {
            out.extend_from_slice(&p.data);
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.n_scalars() {
            return Err(DecadeError::format(format!(
                "checkpoint holds {} scalars, network needs {}",
                flat.len(),
                self.n_scalars()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Copies every parameter of `other` whose name maps (via `rename`) to a
    /// parameter here with the same shape. Returns how many tensors copied.
    pub fn copy_renamed_from(
        &mut self,
        other: &ParamStore,
        rename: impl Fn(&str) -> Option<String>,
    ) -> Result<usize> {
        let mut copied = 0;
        for src in &other.params {
            let Some(dst_name) = rename(&src.name) else { continue };
            let Some(dst_id) = self.lookup(&dst_name) else {
                return Err(DecadeError::validation(format!(
                    "copy target `{dst_name}` not found"
                )));
            };
            let dst = &mut self.params[dst_id.0];
            if dst.shape != src.shape {
                return Err(DecadeError::validation(format!(
                    "copy `{}` -> `{dst_name}`: shape {:?} vs {:?}",
                    src.name, src.shape, dst.shape
                )));
            }
            dst.data.copy_from_slice(&src.data);
            copied += 1;
        }
        Ok(copied)
    }

    /// SHA-256 over name, shape, and little-endian values of every tensor.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in &p.shape {
                h.update((d as u64).to_le_bytes());
            }
            for &v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Gradient buffers matching a store's layout.
#[derive(Debug, Clone)]
pub struct Grads {
    bufs: Vec<Vec<f32>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads { bufs: store.params.iter().map(|p| vec![0.0; p.data.len()]).collect() }
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.bufs[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, delta: &[f32]) {
        let buf = &mut self.bufs[id.0];
        assert_eq!(buf.len(), delta.len(), "gradient length mismatch");
        for (g, &d) in buf.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.fill(0.0);
        }
    }

    /// Sums another gradient set into this one (batch merge).
    pub fn add_from(&mut self, other: &Grads) {
        assert_eq!(self.bufs.len(), other.bufs.len());
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Scales every buffer, e.g. for batch averaging.
    pub fn scale(&mut self, s: f32) {
        for b in &mut self.bufs {
            for x in b.iter_mut() {
                *x *= s;
            }
        }
    }

    /// Global L2 norm over all buffers.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for b in &self.bufs {
            for &x in b {
                acc += (x as f64) * (x as f64);
            }
        }
        acc.sqrt()
    }
}
