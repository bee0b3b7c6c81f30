//! Learnable components: MLP specifications, generic forward passes, diagonal
//! Gaussian heads, parameter initialization, warm starting, and checkpoints.
//!
//! Every network is described by an [`MlpSpec`] (input dim, hidden layers,
//! activation, named output heads). The forward pass is generic over the
//! scalar field, so the same code produces plain `f64` values or tape
//! expressions. Layers are emitted in three passes (all row dots, then all
//! bias adds, then all activations) so the tape's fused matrix-vector
//! handling applies.

use crate::autodiff::{Expr, Graph, ParamStore, Real};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

/// ln(2π).
pub const LN_2PI: f64 = 1.8378770664093453;

/// Activation functions available to layers and heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Act {
    Linear,
    Relu,
    Softplus,
    Sigmoid,
    Tanh,
    Exp,
    /// exp with the raw output clamped to [-30, 30] first (overflow guard for
    /// positive-scale outputs such as mass diagonals).
    ExpClamp,
}

fn apply_act<R: Real>(a: Act, x: R) -> R {
    match a {
        Act::Linear => x,
        Act::Relu => x.relu_r(),
        Act::Softplus => x.softplus_r(),
        Act::Sigmoid => x.sigmoid_r(),
        Act::Tanh => x.tanh_r(),
        Act::Exp => x.exp_r(),
        Act::ExpClamp => x.max_const(-30.0).min_const(30.0).exp_r(),
    }
}

/// One named slice of the output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub dim: usize,
    pub act: Act,
}

/// A fully-connected network: `input -> hidden... -> concat(heads)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Parameter block prefix; blocks are named `{name}.w{i}` / `{name}.b{i}`.
    pub name: String,
    pub input: usize,
    pub hidden: Vec<usize>,
    pub hidden_act: Act,
    pub heads: Vec<HeadSpec>,
}

/// Per-layer parameter values over any scalar field.
#[derive(Clone, Debug)]
pub struct MlpParams<R> {
    pub w: Vec<Vec<R>>,
    pub b: Vec<Vec<R>>,
}

impl MlpSpec {
    pub fn out_dim(&self) -> usize {
        self.heads.iter().map(|h| h.dim).sum()
    }

    /// (fan_in, fan_out) of every affine layer, output layer included.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.out_dim()));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum()
    }

    fn block_names(&self) -> Vec<(String, String)> {
        (0..self.layer_dims().len())
            .map(|i| (format!("{}.w{i}", self.name), format!("{}.b{i}", self.name)))
            .collect()
    }

    /// Register this network's blocks with weights and biases drawn from
    /// N(0, 0.01²) — "N(0, 0.01)" read as standard deviation 0.01.
    pub fn init_into(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, 0.01).unwrap();
        for ((fan_in, fan_out), (wn, bn)) in self.layer_dims().iter().zip(self.block_names()) {
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
            let b: Vec<f64> = (0..*fan_out).map(|_| normal.sample(rng)).collect();
            store.add_block(&wn, w);
            store.add_block(&bn, b);
        }
    }

    /// Register with all parameters zero (tests and reference oracles).
    pub fn zeros_into(&self, store: &mut ParamStore) {
        for ((fan_in, fan_out), (wn, bn)) in self.layer_dims().iter().zip(self.block_names()) {
            store.add_block(&wn, vec![0.0; fan_in * fan_out]);
            store.add_block(&bn, vec![0.0; *fan_out]);
        }
    }

    /// Copy parameter values out of the store (plain-`f64` evaluation path).
    pub fn params_from_store(&self, store: &ParamStore) -> MlpParams<f64> {
        let mut w = Vec::new();
        let mut b = Vec::new();
        for (wn, bn) in self.block_names() {
            w.push(store.block(&wn).to_vec());
            b.push(store.block(&bn).to_vec());
        }
        MlpParams { w, b }
    }

    /// Bind parameter blocks onto a tape (cached by name, so multiple binds
    /// of the same network share nodes).
    pub fn bind<'g>(&self, g: &'g Graph, store: &ParamStore) -> MlpParams<Expr<'g>> {
        let mut w = Vec::new();
        let mut b = Vec::new();
        for (wn, bn) in self.block_names() {
            w.push(g.bind_block(&wn, store.block(&wn)));
            b.push(g.bind_block(&bn, store.block(&bn)));
        }
        MlpParams { w, b }
    }

    /// Forward pass; returns one vector per head, in declaration order.
    pub fn forward<R: Real>(&self, p: &MlpParams<R>, input: &[R]) -> Vec<Vec<R>> {
        assert_eq!(input.len(), self.input, "input width mismatch");
        let dims = self.layer_dims();
        let n_layers = dims.len();
        let mut acts: Vec<Vec<R>> = Vec::with_capacity(self.hidden.len());
        let mut raw_out: Vec<R> = Vec::new();
        for (li, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let cur: &[R] = if li == 0 { input } else { &acts[li - 1] };
            let w = &p.w[li];
            let b = &p.b[li];
            debug_assert_eq!(w.len(), fan_in * fan_out);
            let mut dots = Vec::with_capacity(fan_out);
            for r in 0..fan_out {
                dots.push(R::dot(&w[r * fan_in..(r + 1) * fan_in], cur));
            }
            let mut pre = Vec::with_capacity(fan_out);
            for r in 0..fan_out {
                pre.push(dots[r] + b[r]);
            }
            if li + 1 == n_layers {
                raw_out = pre;
            } else {
                acts.push(pre.iter().map(|&x| apply_act(self.hidden_act, x)).collect());
            }
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut off = 0;
        for h in &self.heads {
            let slice = &raw_out[off..off + h.dim];
            outs.push(slice.iter().map(|&x| apply_act(h.act, x)).collect());
            off += h.dim;
        }
        outs
    }
}

/// Diagonal Gaussian output head: mean and log-variance vectors.
/// Variance is exp(logvar), strictly positive by construction.
pub struct GaussHead<R> {
    pub mean: Vec<R>,
    pub logvar: Vec<R>,
}

impl<R: Real> GaussHead<R> {
    pub fn from_heads(mut heads: Vec<Vec<R>>) -> Self {
        assert_eq!(heads.len(), 2, "expected mean + logvar heads");
        let logvar = heads.pop().unwrap();
        let mean = heads.pop().unwrap();
        assert_eq!(mean.len(), logvar.len());
        Self { mean, logvar }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Reparameterized draw: mean + exp(logvar/2) * eps.
    pub fn sample_with(&self, eps: &[f64]) -> Vec<R> {
        assert_eq!(eps.len(), self.dim());
        (0..self.dim())
            .map(|i| self.mean[i] + (self.logvar[i] * 0.5).exp_r() * eps[i])
            .collect()
    }

    pub fn logpdf(&self, x: &[R]) -> R {
        gauss_diag_logpdf(x, &self.mean, &self.logvar)
    }

    /// Differential entropy of the diagonal Gaussian:
    /// 0.5 * sum_i (log(2*pi*var_i) + 1).
    pub fn entropy(&self) -> R {
        let terms: Vec<R> = self
            .logvar
            .iter()
            .map(|lv| (*lv + (LN_2PI + 1.0)) * 0.5)
            .collect();
        R::sum(&terms)
    }

    /// Log-density evaluated with the distribution parameters detached from
    /// differentiation. The value is identical to `logpdf`; only gradient
    /// pathways through `mean`/`logvar` are severed, leaving the pathwise
    /// dependence through `x` intact. Evaluating the density with live
    /// parameters at its own reparameterized sample cancels the parameter
    /// dependence exactly (the gradient collapses onto the entropy
    /// gradient), so this detached form is the one that behaves as a
    /// genuinely stochastic per-sample estimate.
    pub fn logpdf_detached_params(&self, x: &[R]) -> R {
        let mean: Vec<R> = self.mean.iter().map(|m| m.detach_r()).collect();
        let logvar: Vec<R> = self.logvar.iter().map(|lv| lv.detach_r()).collect();
        gauss_diag_logpdf(x, &mean, &logvar)
    }
}

/// log N(x | mean, diag(exp(logvar))).
pub fn gauss_diag_logpdf<R: Real>(x: &[R], mean: &[R], logvar: &[R]) -> R {
    assert_eq!(x.len(), mean.len());
    assert_eq!(x.len(), logvar.len());
    let mut terms = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let d = x[i] - mean[i];
        let quad = d * d * (-logvar[i]).exp_r();
        terms.push((quad + logvar[i] + LN_2PI) * (-0.5));
    }
    R::sum(&terms)
}

/// log N(x | 0, I).
pub fn std_gauss_logpdf<R: Real>(x: &[R]) -> R {
    let mut terms = Vec::with_capacity(x.len());
    for &xi in x {
        terms.push((xi * xi + LN_2PI) * (-0.5));
    }
    R::sum(&terms)
}

/// Encoder spec: pixels -> ReLU hiddens -> (mean, logvar) over the latent.
pub fn encoder_spec(x_dim: usize, d: usize, hidden: &[usize]) -> MlpSpec {
    MlpSpec {
        name: "enc".into(),
        input: x_dim,
        hidden: hidden.to_vec(),
        hidden_act: Act::Relu,
        heads: vec![
            HeadSpec { name: "mean".into(), dim: d, act: Act::Linear },
            HeadSpec { name: "logvar".into(), dim: d, act: Act::Linear },
        ],
    }
}

/// Decoder spec: latent -> softplus hiddens -> per-pixel Bernoulli logits.
/// Rates are sigmoid(logits); the likelihood fold applies the sigmoid and
/// the [1e-7, 1-1e-7] rate clamp.
pub fn decoder_spec(d: usize, x_dim: usize, hidden: &[usize]) -> MlpSpec {
    MlpSpec {
        name: "dec".into(),
        input: d,
        hidden: hidden.to_vec(),
        hidden_act: Act::Softplus,
        heads: vec![HeadSpec { name: "logits".into(), dim: x_dim, act: Act::Linear }],
    }
}

/// Reverse momentum model r_V(v | z, [u,] t, x): Gaussian head over v.
/// The updated momentum u is an input only when the partial-update mixing
/// coefficient is nonzero; the step index enters as one raw scalar feature.
pub fn rv_spec(name: &str, d: usize, x_dim: usize, with_u: bool, hidden: &[usize]) -> MlpSpec {
    let input = d + if with_u { d } else { 0 } + 1 + x_dim;
    MlpSpec {
        name: name.into(),
        input,
        hidden: hidden.to_vec(),
        hidden_act: Act::Relu,
        heads: vec![
            HeadSpec { name: "mean".into(), dim: d, act: Act::Linear },
            HeadSpec { name: "logvar".into(), dim: d, act: Act::Linear },
        ],
    }
}

/// Reverse-acceptance correction network: (z, v, t, x) -> tanh scalar.
pub fn racc_spec(d: usize, x_dim: usize, hidden: &[usize]) -> MlpSpec {
    MlpSpec {
        name: "racc".into(),
        input: 2 * d + 1 + x_dim,
        hidden: hidden.to_vec(),
        hidden_act: Act::Relu,
        heads: vec![HeadSpec { name: "corr".into(), dim: 1, act: Act::Tanh }],
    }
}

/// Mass conditioner: x -> positive diagonal of M(x); single ReLU hidden
/// layer, exponential output with the raw value clamped to [-30, 30].
pub fn mass_net_spec(x_dim: usize, d: usize, hidden: usize) -> MlpSpec {
    MlpSpec {
        name: "mass".into(),
        input: x_dim,
        hidden: vec![hidden],
        hidden_act: Act::Relu,
        heads: vec![HeadSpec { name: "diag".into(), dim: d, act: Act::ExpClamp }],
    }
}

/// Copy every block whose name and length match from `source` into `target`.
/// Returns the copied block names (callers typically warm-start the encoder
/// and decoder from a plain-VI run while chain-specific networks stay fresh).
pub fn warm_start(target: &mut ParamStore, source: &ParamStore) -> Vec<String> {
    let mut copied = Vec::new();
    let names: Vec<String> = target.names().to_vec();
    for name in names {
        if source.has_block(&name) && source.block(&name).len() == target.block(&name).len() {
            let src = source.block(&name).to_vec();
            target.block_mut(&name).copy_from_slice(&src);
            copied.push(name);
        }
    }
    copied
}

/// Versioned checkpoint: named parameter arrays plus free-form metadata.
/// JSON round-trips f64 exactly (shortest round-trip printing), so
/// save/load is bit-exact; non-finite parameters are rejected.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: serde_json::Value,
    pub block_order: Vec<String>,
    pub blocks: BTreeMap<String, Vec<f64>>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let mut blocks = BTreeMap::new();
    for (name, vals) in store.iter() {
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(Error::Checkpoint(format!(
                "non-finite parameter in block '{name}'"
            )));
        }
        blocks.insert(name.to_string(), vals.to_vec());
    }
    let doc = Checkpoint {
        version: CHECKPOINT_VERSION,
        meta,
        block_order: store.names().to_vec(),
        blocks,
    };
    let mut f = std::fs::File::create(path)?;
    let body = serde_json::to_string(&doc)?;
    f.write_all(body.as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let mut body = String::new();
    std::fs::File::open(path)?.read_to_string(&mut body)?;
    let doc: Checkpoint = serde_json::from_str(&body)?;
    if doc.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            doc.version
        )));
    }
    let mut store = ParamStore::new();
    for name in &doc.block_order {
        let vals = doc.blocks.get(name).ok_or_else(|| {
            Error::Checkpoint(format!("block '{name}' listed in order but missing"))
        })?;
        store.add_block(name, vals.clone());
    }
    Ok((store, doc.meta))
}
