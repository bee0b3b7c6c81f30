//! Named parameter blocks and the Adam optimizer.
//!
//! All trainable state lives in a [`ParamStore`]: an ordered list of named
//! `f64` blocks. Training binds each block onto the tape by name
//! ([`super::Graph::bind_block`]), reads gradients back per block, and hands
//! them to [`Adam`]. Block order is fixed at creation, so gradient
//! accumulation and updates are deterministic.

use super::Graph;
use crate::{Error, Result};
use std::collections::HashMap;

/// Ordered collection of named parameter blocks.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    blocks: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a new block; names must be unique.
    pub fn add_block(&mut self, name: &str, init: Vec<f64>) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter block {name}"
        );
        let id = self.blocks.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.blocks.push(init);
        id
    }

    pub fn has_block(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn block(&self, name: &str) -> &[f64] {
        &self.blocks[self.index[name]]
    }

    pub fn block_mut(&mut self, name: &str) -> &mut Vec<f64> {
        let id = self.index[name];
        &mut self.blocks[id]
    }

    /// Blocks in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.blocks.iter().map(|b| b.as_slice()))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    /// Bind every block onto a tape (in registration order) so that a single
    /// adjoint sweep covers all parameters.
    pub fn bind_all(&self, g: &Graph) {
        for (name, vals) in self.iter() {
            g.bind_block(name, vals);
        }
    }

    /// Replace contents from another store with identical layout.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint(format!(
                "parameter block names differ: {:?} vs {:?}",
                self.names, other.names
            )));
        }
        for (mine, theirs) in self.blocks.iter_mut().zip(other.blocks.iter()) {
            if mine.len() != theirs.len() {
                return Err(Error::Checkpoint(
                    "parameter block length mismatch".to_string(),
                ));
            }
            mine.copy_from_slice(theirs);
        }
        Ok(())
    }
}

/// Per-block gradient accumulator matching a [`ParamStore`] layout.
#[derive(Clone, Debug, Default)]
pub struct GradAccum {
    grads: Vec<Vec<f64>>,
}

impl GradAccum {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.blocks.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn reset(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Accumulate gradients for every store block bound on `g`, reading the
    /// numeric adjoints `adj` produced by [`Graph::backward`]. `scale`
    /// handles sample averaging. Blocks not bound on this tape are skipped.
    pub fn accumulate(&mut self, store: &ParamStore, g: &Graph, adj: &[f64], scale: f64) {
        for (bi, name) in store.names.iter().enumerate() {
            if let Some((start, len)) = g.block_range(name) {
                let dst = &mut self.grads[bi];
                debug_assert_eq!(dst.len(), len as usize);
                for k in 0..len as usize {
                    let idx = start as usize + k;
                    if idx < adj.len() {
                        dst[k] += adj[idx] * scale;
                    }
                }
            }
        }
    }

    /// Merge another accumulator (e.g. a per-chunk partial) into this one.
    pub fn merge(&mut self, other: &GradAccum) {
        for (a, b) in self.grads.iter_mut().zip(other.grads.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn block(&self, store: &ParamStore, name: &str) -> &[f64] {
        &self.grads[store.index[name]]
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale so the global norm does not exceed `max_norm`. Returns the
    /// factor applied (1.0 when already within bounds).
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            let f = max_norm / n;
            self.scale(f);
            f
        } else {
            1.0
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Rejects non-finite gradients: the step is
/// skipped and an error describing the offending block is returned, leaving
/// parameters and moments untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        Self {
            cfg,
            m: store.blocks.iter().map(|b| vec![0.0; b.len()]).collect(),
            v: store.blocks.iter().map(|b| vec![0.0; b.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One descent step along `grads` (pass the gradient of the quantity to
    /// MINIMIZE).
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccum) -> Result<()> {
        for (bi, g) in grads.grads.iter().enumerate() {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient block '{}'",
                    store.names[bi]
                )));
            }
        }
        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (bi, g) in grads.grads.iter().enumerate() {
            let m = &mut self.m[bi];
            let v = &mut self.v[bi];
            let p = &mut store.blocks[bi];
            for k in 0..g.len() {
                m[k] = self.cfg.beta1 * m[k] + (1.0 - self.cfg.beta1) * g[k];
                v[k] = self.cfg.beta2 * v[k] + (1.0 - self.cfg.beta2) * g[k] * g[k];
                let mhat = m[k] / b1t;
                let vhat = v[k] / b2t;
                p[k] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
