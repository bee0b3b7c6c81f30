//! Potential energies U(q) = −log f_target(q) and the built-in targets,
//! including the image-model joint energy U(z) = −log p(x, z).
//!
//! Targets implement [`EnergyFn`] once, generically over the scalar field;
//! the blanket [`Potential`] impl derives: plain `f64` evaluation, gradients
//! through a thread-local scratch tape (so every gradient is the autodiff
//! gradient of the same code that computes the energy), and on-tape energy
//! construction for training graphs.
//!
//! Additive constants are dropped per target but consistently (simulation
//! only feels derivatives); the joint image-model energy keeps full
//! constants because the bound needs absolute log p(x, z).

use crate::autodiff::{Expr, Graph, Real};
use crate::models::{std_gauss_logpdf, MlpParams, MlpSpec, LN_2PI};
use crate::{Error, Result};
use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

/// Generic energy implementation: one body serves values, scratch-tape
/// gradients, and training-graph construction.
pub trait EnergyFn: Send + Sync {
    fn dim(&self) -> usize;
    fn energy_generic<R: Real>(&self, q: &[R]) -> R;
}

/// Object-safe potential interface used by samplers and diagnostics.
pub trait Potential: Send + Sync {
    fn dim(&self) -> usize;
    /// U(q); non-finite results are reported as errors, never propagated.
    fn energy(&self, q: &[f64]) -> Result<f64>;
    /// ∇U(q), written into `out`.
    fn grad(&self, q: &[f64], out: &mut [f64]) -> Result<()>;
    /// Emit U as nodes of an existing graph (training path).
    fn build_energy<'g>(&self, g: &'g Graph, z: &[Expr<'g>]) -> Expr<'g>;
}

thread_local! {
    static SCRATCH: (Graph, RefCell<Vec<f64>>) = (Graph::new(), RefCell::new(Vec::new()));
}

impl<T: EnergyFn> Potential for T {
    fn dim(&self) -> usize {
        EnergyFn::dim(self)
    }

    fn energy(&self, q: &[f64]) -> Result<f64> {
        debug_assert_eq!(q.len(), EnergyFn::dim(self));
        let u = self.energy_generic(q);
        if u.is_finite() {
            Ok(u)
        } else {
            Err(Error::NonFinite(format!("potential energy at q={q:?}")))
        }
    }

    fn grad(&self, q: &[f64], out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(q.len(), EnergyFn::dim(self));
        debug_assert_eq!(out.len(), q.len());
        SCRATCH.with(|(g, buf)| {
            g.clear();
            let leaves = g.leaf_vec(q);
            let u = self.energy_generic(&leaves[..]);
            if !u.value().is_finite() {
                return Err(Error::NonFinite(format!("potential energy at q={q:?}")));
            }
            let mut adj = buf.borrow_mut();
            g.backward_into(u, &mut adj);
            for (k, leaf) in leaves.iter().enumerate() {
                out[k] = adj[leaf.id as usize];
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("potential gradient at q={q:?}")));
            }
            Ok(())
        })
    }

    fn build_energy<'g>(&self, _g: &'g Graph, z: &[Expr<'g>]) -> Expr<'g> {
        self.energy_generic(z)
    }
}

/// Isotropic Gaussian target: U(q) = |q|²/2, minimum value 0.
#[derive(Clone, Debug)]
pub struct IsoGauss {
    pub d: usize,
}

impl EnergyFn for IsoGauss {
    fn dim(&self) -> usize {
        self.d
    }
    fn energy_generic<R: Real>(&self, q: &[R]) -> R {
        R::dot(q, q) * 0.5
    }
}

/// Diagonal-covariance Gaussian mixture target:
/// U(q) = −ln Σ_k w_k N(q; μ_k, diag σ²_k), full normalizing constants kept.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(means: Vec<Vec<f64>>, vars: Vec<Vec<f64>>, weights: Vec<f64>) -> Self {
        assert_eq!(means.len(), vars.len());
        assert_eq!(means.len(), weights.len());
        assert!(!means.is_empty());
        let d = means[0].len();
        assert!(means.iter().all(|m| m.len() == d));
        assert!(vars.iter().all(|v| v.len() == d && v.iter().all(|&s| s > 0.0)));
        let wsum: f64 = weights.iter().sum();
        assert!((wsum - 1.0).abs() < 1e-12, "weights must sum to 1");
        assert!(weights.iter().all(|&w| w > 0.0));
        Self { means, vars, weights }
    }

    /// Equal-weight two-component 1-D mixture at ±1 with unit variances.
    pub fn two_wells_1d() -> Self {
        Self::new(
            vec![vec![-1.0], vec![1.0]],
            vec![vec![1.0], vec![1.0]],
            vec![0.5, 0.5],
        )
    }

    /// Three-basin 2-D "crater" landscape for figure-style experiments.
    pub fn craters_2d() -> Self {
        Self::new(
            vec![vec![-2.0, -1.0], vec![2.0, -1.0], vec![0.0, 1.8]],
            vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![0.4, 0.4]],
            vec![0.4, 0.3, 0.3],
        )
    }
}

impl EnergyFn for GaussianMixture {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn energy_generic<R: Real>(&self, q: &[R]) -> R {
        let d = EnergyFn::dim(self);
        debug_assert_eq!(q.len(), d);
        // Component log-densities, then a log-sum-exp whose pivot is a plain
        // constant (a constant shift does not change gradients).
        let mut logs: Vec<R> = Vec::with_capacity(self.weights.len());
        for k in 0..self.weights.len() {
            let mut terms: Vec<R> = Vec::with_capacity(d);
            for i in 0..d {
                let dev = q[i] - self.means[k][i];
                terms.push(dev * dev * (-0.5 / self.vars[k][i]));
            }
            let mut cst = self.weights[k].ln();
            for i in 0..d {
                cst -= 0.5 * (LN_2PI + self.vars[k][i].ln());
            }
            logs.push(R::sum(&terms) + cst);
        }
        let pivot = logs
            .iter()
            .map(|l| l.value())
            .fold(f64::NEG_INFINITY, f64::max);
        let pivot = if pivot.is_finite() { pivot } else { 0.0 };
        let mut exps: Vec<R> = Vec::with_capacity(logs.len());
        for l in &logs {
            exps.push((*l - pivot).exp_r());
        }
        -(R::sum(&exps).ln_r() + pivot)
    }
}

/// Joint energy of the image model for one observed datum:
/// U(z) = −log π(z) − log p(x|z), full constants included.
pub struct VaeJointPotential {
    pub decoder: MlpSpec,
    pub params: MlpParams<f64>,
    pub x: Vec<f64>,
    /// Pixels whose Bernoulli rate hit the [1e-7, 1-1e-7] clamp, cumulative
    /// over every energy evaluation through this instance.
    pub clamp_hits: AtomicU64,
}

impl VaeJointPotential {
    pub fn new(decoder: MlpSpec, params: MlpParams<f64>, x: Vec<f64>) -> Self {
        assert_eq!(decoder.out_dim(), x.len());
        Self { decoder, params, x, clamp_hits: AtomicU64::new(0) }
    }

    /// log p(x, z) = −U(z).
    pub fn joint_logp(&self, z: &[f64]) -> Result<f64> {
        Ok(-Potential::energy(self, z)?)
    }
}

/// The joint energy body shared by the owned-snapshot path and training
/// graphs (where the caller binds decoder parameters itself).
pub fn vae_joint_energy<R: Real>(
    decoder: &MlpSpec,
    params: &MlpParams<R>,
    x: &[f64],
    z: &[R],
    clamp_hits: Option<&AtomicU64>,
) -> R {
    let heads = decoder.forward(params, z);
    let logits = &heads[0];
    if let Some(counter) = clamp_hits {
        let hits = logits
            .iter()
            .filter(|l| l.value().abs() >= crate::autodiff::BCE_LOGIT_CLAMP)
            .count() as u64;
        counter.fetch_add(hits, Ordering::Relaxed);
    }
    let loglik = R::bernoulli_loglik(logits, x);
    let logprior = std_gauss_logpdf(z);
    -(logprior + loglik)
}

impl EnergyFn for VaeJointPotential {
    fn dim(&self) -> usize {
        self.decoder.input
    }
    fn energy_generic<R: Real>(&self, z: &[R]) -> R {
        // The f64 parameter snapshot enters tape paths as constants: this
        // instance's role is simulation/evaluation, not parameter training.
        let mut w: Vec<Vec<R>> = Vec::with_capacity(self.params.w.len());
        let mut b: Vec<Vec<R>> = Vec::with_capacity(self.params.b.len());
        for (wl, bl) in self.params.w.iter().zip(self.params.b.iter()) {
            w.push(wl.iter().map(|&v| z[0].lift(v)).collect());
            b.push(bl.iter().map(|&v| z[0].lift(v)).collect());
        }
        let pr = MlpParams { w, b };
        vae_joint_energy(&self.decoder, &pr, &self.x, z, Some(&self.clamp_hits))
    }
}

/// Conjugate 1-D Gaussian model: z ~ N(0,1), x | z ~ N(z, 1).
/// U(z) = −log p(x, z) with full constants; the marginal is N(x; 0, 2).
#[derive(Clone, Copy, Debug)]
pub struct ConjugateGaussJoint {
    pub x: f64,
}

impl ConjugateGaussJoint {
    /// Exact posterior: N(x/2, 1/2).
    pub fn posterior_mean_var(&self) -> (f64, f64) {
        (self.x / 2.0, 0.5)
    }
    /// log p(x) = log N(x; 0, 2).
    pub fn log_marginal(&self) -> f64 {
        -0.5 * (LN_2PI + 2f64.ln() + self.x * self.x / 2.0)
    }
}

impl EnergyFn for ConjugateGaussJoint {
    fn dim(&self) -> usize {
        1
    }
    fn energy_generic<R: Real>(&self, q: &[R]) -> R {
        let z = q[0];
        let dev = (-z) + self.x;
        (z * z + dev * dev) * 0.5 + LN_2PI
    }
}

/// Two-cluster heteroscedastic model: z ~ N(0,1); the observation is a pair
/// (y, c) with c ∈ {0,1} and y | z, c ~ N(z, σ_c²), σ_0 = 0.3, σ_1 = 3.
/// Cluster membership changes the posterior scale, so an input-conditioned
/// mass matrix has something real to learn.
#[derive(Clone, Debug)]
pub struct TwoClusterJoint {
    pub y: f64,
    pub cluster: u8,
}

pub const TWO_CLUSTER_SIGMAS: [f64; 2] = [0.3, 3.0];

impl TwoClusterJoint {
    pub fn sigma(&self) -> f64 {
        TWO_CLUSTER_SIGMAS[usize::from(self.cluster)]
    }
    /// Exact posterior over z given (y, c).
    pub fn posterior_mean_var(&self) -> (f64, f64) {
        let s2 = self.sigma() * self.sigma();
        (self.y / (1.0 + s2), s2 / (1.0 + s2))
    }
    /// log p(y, c) with the cluster marginal P(c) = 1/2.
    pub fn log_marginal(&self) -> f64 {
        let v = 1.0 + self.sigma() * self.sigma();
        -0.5 * (LN_2PI + v.ln() + self.y * self.y / v) + 0.5f64.ln()
    }
}

impl EnergyFn for TwoClusterJoint {
    fn dim(&self) -> usize {
        1
    }
    fn energy_generic<R: Real>(&self, q: &[R]) -> R {
        let z = q[0];
        let s2 = self.sigma() * self.sigma();
        let dev = (-z) + self.y;
        z * z * 0.5 + dev * dev * (0.5 / s2) + LN_2PI + 0.5 * s2.ln() - 0.5f64.ln()
    }
}

/// Coordinate-transformed potential U'(q') = U(A q') for a fixed square
/// matrix A (row-major). Realizes the mass-rescaling equivalence: simulating
/// U with inverse mass A Aᵀ matches simulating U' with identity mass.
pub struct TransformedPotential<P: EnergyFn> {
    pub inner: P,
    pub a: Vec<f64>,
    d: usize,
}

impl<P: EnergyFn> TransformedPotential<P> {
    pub fn new(inner: P, a: Vec<f64>) -> Self {
        let d = EnergyFn::dim(&inner);
        assert_eq!(a.len(), d * d);
        Self { inner, a, d }
    }
}

impl<P: EnergyFn> EnergyFn for TransformedPotential<P> {
    fn dim(&self) -> usize {
        self.d
    }
    fn energy_generic<R: Real>(&self, q: &[R]) -> R {
        let mut aq: Vec<R> = Vec::with_capacity(self.d);
        for r in 0..self.d {
            let mut terms: Vec<R> = Vec::with_capacity(self.d);
            for c in 0..self.d {
                terms.push(q[c] * self.a[r * self.d + c]);
            }
            aq.push(R::sum(&terms));
        }
        self.inner.energy_generic(&aq)
    }
}

/// Built-in analytic targets addressable by name from configuration.
pub fn target_by_name(name: &str) -> Result<Box<dyn Potential>> {
    match name {
        "gauss1d" => Ok(Box::new(IsoGauss { d: 1 })),
        "gauss2d" => Ok(Box::new(IsoGauss { d: 2 })),
        "mixture2" => Ok(Box::new(GaussianMixture::two_wells_1d())),
        "mixture3" => Ok(Box::new(GaussianMixture::craters_2d())),
        other => Err(Error::Config(format!(
            "unknown target '{other}' (built-ins: gauss1d, gauss2d, mixture2, mixture3)"
        ))),
    }
}
