//! Experiment configuration, data preparation, the optimization loop, and
//! checkpoint evaluation.
//!
//! One chain per datum gives a single-sample bound estimate per observation;
//! gradients average over the minibatch and step through Adam. Every random
//! stream is keyed by role and datum index — never by scheduling — so a
//! fixed seed reproduces the training trajectory bit-for-bit, and chain
//! evaluation could be farmed out across workers without changing results
//! (this build runs the batch serially; the optimizer step is the barrier
//! either way).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Expr, GradAccum, Graph, ParamStore, Real};
use crate::bound::{
    assemble_bound, assemble_bound_f64, BoundNets, BoundOptions, BoundTerms, RevAccMode,
    SampleNoise,
};
use crate::data::{
    binarize_stochastic, load_idx_images, make_eval_draws, synthetic_conjugate, synthetic_images,
    EvalDraw, ImageDataset, Split,
};
use crate::estimators::{estimate_nll, IsConfig, NllEstimate};
use crate::hmc::{HmcConfig, MassSpec};
use crate::models::{
    decoder_spec, encoder_spec, load_checkpoint, racc_spec, rv_spec, save_checkpoint, warm_start,
    GaussHead, MlpParams, MlpSpec,
};
use crate::potential::{vae_joint_energy, ConjugateGaussJoint, Potential, VaeJointPotential};
use crate::{Error, Result};

pub const STEP_EPS_BLOCK: &str = "step.raw_eps";
pub const STEP_ALPHA_BLOCK: &str = "step.raw_alpha";

// Stream roles for deterministic, scheduling-independent randomness.
const ROLE_TRAIN_NOISE: u64 = 1;
const ROLE_SHUFFLE: u64 = 2;
const ROLE_BINARIZE: u64 = 3;
const ROLE_EVAL_NOISE: u64 = 4;
const ROLE_NLL: u64 = 5;
const ROLE_EVAL_DRAWS: u64 = 6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the (role, a, b) random stream derived from `base`.
pub fn stream_seed(base: u64, role: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base ^ splitmix64(role)) ^ a) ^ b)
}

fn split_tag(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Valid => 1,
        Split::Test => 2,
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Scalar observations x = z + noise with standard-normal prior on z;
    /// the evidence is available in closed form per datum.
    Conjugate { n_train: usize, n_valid: usize, n_test: usize },
    /// Procedurally generated grey-scale blob images, binarized
    /// stochastically during training.
    SyntheticImages { n_train: usize, n_valid: usize, n_test: usize, rows: usize, cols: usize },
    /// IDX-format image files (one per split), pixel values in [0, 1).
    IdxImages { train: PathBuf, valid: PathBuf, test: PathBuf },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaConfig {
    /// Full momentum refresh each transition (enables the first-factor
    /// cancellation and the merged final reverse model).
    #[default]
    Zero,
    /// Fixed mixing coefficient.
    Fixed { value: f64 },
    /// Learned coefficient, stored pre-tanh so it stays inside (−1, 1).
    Learned { init: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum MassConfig {
    #[default]
    Identity,
    /// One learned diagonal shared across data.
    Global,
    /// Diagonal predicted from the observation by a network.
    Conditioned { hidden: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum AcceptanceConfig {
    /// Proposals adopted unconditionally.
    Off,
    /// Metropolis accept/reject with the energy-difference reverse
    /// acceptance model.
    #[default]
    Simple,
    /// Accept/reject with a learned correction on top of the simple
    /// reverse acceptance probability.
    Nn { hidden: Vec<usize> },
}

fn d_leapfrog() -> usize {
    4
}
fn d_step() -> f64 {
    0.1
}
fn d_true() -> bool {
    true
}
fn d_hidden() -> Vec<usize> {
    vec![16]
}
fn d_lr() -> f64 {
    1e-3
}
fn d_batch() -> usize {
    64
}
fn d_data_seed() -> u64 {
    1
}
fn d_streak() -> usize {
    5
}
fn d_eval_draws() -> usize {
    3
}
fn d_is_samples() -> usize {
    5000
}
fn d_probes() -> usize {
    5
}

/// Everything one experiment needs, JSON-addressable field by field.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_name: String,
    pub dataset: DatasetConfig,
    pub latent_dim: usize,
    /// Number of transitions T (0 recovers plain VI).
    #[serde(default)]
    pub n_hmc: usize,
    #[serde(default = "d_leapfrog")]
    pub n_leapfrog: usize,
    /// Initial integrator step size; always learned (stored as its log).
    #[serde(default = "d_step")]
    pub step_size: f64,
    #[serde(default)]
    pub alpha: AlphaConfig,
    #[serde(default)]
    pub mass: MassConfig,
    #[serde(default)]
    pub acceptance: AcceptanceConfig,
    /// Use closed-form entropies for the initial-density terms; off
    /// evaluates them at the sampled points with detached density
    /// parameters (the stochastic per-sample estimator).
    #[serde(default = "d_true")]
    pub analytic_entropy: bool,
    #[serde(default = "d_hidden")]
    pub encoder_hidden: Vec<usize>,
    #[serde(default = "d_hidden")]
    pub decoder_hidden: Vec<usize>,
    #[serde(default = "d_hidden")]
    pub rv_hidden: Vec<usize>,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default = "d_data_seed")]
    pub data_seed: u64,
    /// Extra validation every N applied batches (0: once per epoch only).
    #[serde(default)]
    pub valid_every: usize,
    /// Optional global-norm gradient clip (safety valve for
    /// acceptance-mode runs; off by default).
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Abort after this many consecutive skipped (non-finite) batches.
    #[serde(default = "d_streak")]
    pub nonfinite_abort_streak: usize,
    /// Fixed noise draws persisted for validation/test bound evaluation.
    #[serde(default = "d_eval_draws")]
    pub eval_draws: usize,
    #[serde(default = "d_is_samples")]
    pub is_samples: usize,
    #[serde(default = "d_probes")]
    pub is_probes: usize,
    #[serde(default)]
    pub warm_start: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1".into());
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad(format!("step_size must be positive, got {}", self.step_size));
        }
        if self.n_leapfrog == 0 {
            return bad("n_leapfrog must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.nonfinite_abort_streak == 0 {
            return bad("nonfinite_abort_streak must be at least 1".into());
        }
        if self.eval_draws == 0 {
            return bad("eval_draws must be at least 1".into());
        }
        if self.is_samples == 0 || self.is_probes == 0 {
            return bad("is_samples and is_probes must be at least 1".into());
        }
        let alpha_ok = match self.alpha {
            AlphaConfig::Zero => true,
            AlphaConfig::Fixed { value } => value.is_finite() && value.abs() < 0.999_999,
            AlphaConfig::Learned { init } => init.is_finite() && init.abs() < 0.999_999,
        };
        if !alpha_ok {
            return bad("momentum mixing coefficient must lie strictly inside (-1, 1)".into());
        }
        match &self.dataset {
            DatasetConfig::Conjugate { n_train, n_valid, n_test }
            | DatasetConfig::SyntheticImages { n_train, n_valid, n_test, .. } => {
                if *n_train == 0 || *n_valid == 0 || *n_test == 0 {
                    return bad("every split needs at least one datum".into());
                }
                if let DatasetConfig::SyntheticImages { rows, cols, .. } = &self.dataset {
                    if *rows == 0 || *cols == 0 {
                        return bad("image dimensions must be positive".into());
                    }
                }
            }
            DatasetConfig::IdxImages { .. } => {}
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Model bundle: the compiled form of a config
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    /// Fixed analytic joint; only the variational side has parameters.
    Conjugate,
    /// Bernoulli decoder over pixels; generative parameters are learned.
    Vae,
}

#[derive(Clone, Copy, Debug)]
enum AlphaKind {
    Zero,
    Fixed(f64),
    Learned(f64),
}

/// Network specs, chain dimensions, and bound options derived from a
/// config — the object the train/evaluate loops actually consume.
pub struct ModelBundle {
    pub kind: TargetKind,
    pub d: usize,
    pub x_dim: usize,
    pub n_hmc: usize,
    pub n_leapfrog: usize,
    step_size_init: f64,
    alpha: AlphaKind,
    pub mass: MassSpec,
    pub options: BoundOptions,
    pub encoder: MlpSpec,
    pub decoder: Option<MlpSpec>,
    pub rv: MlpSpec,
    pub rv_final: Option<MlpSpec>,
    pub racc: Option<MlpSpec>,
}

struct TapeParams<'g> {
    encoder: MlpParams<Expr<'g>>,
    decoder: Option<MlpParams<Expr<'g>>>,
    rv: MlpParams<Expr<'g>>,
    rv_final: Option<MlpParams<Expr<'g>>>,
    racc: Option<MlpParams<Expr<'g>>>,
    raw_eps: Expr<'g>,
    raw_alpha: Option<Expr<'g>>,
}

struct F64Params {
    encoder: MlpParams<f64>,
    decoder: Option<MlpParams<f64>>,
    rv: MlpParams<f64>,
    rv_final: Option<MlpParams<f64>>,
    racc: Option<MlpParams<f64>>,
    raw_eps: f64,
}

impl ModelBundle {
    pub fn from_config(cfg: &ExperimentConfig, x_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.latent_dim;
        let kind = match &cfg.dataset {
            DatasetConfig::Conjugate { .. } => {
                if d != 1 || x_dim != 1 {
                    return Err(Error::Config(
                        "the conjugate target is scalar: latent_dim must be 1".into(),
                    ));
                }
                TargetKind::Conjugate
            }
            _ => TargetKind::Vae,
        };
        let alpha = match cfg.alpha {
            AlphaConfig::Zero => AlphaKind::Zero,
            AlphaConfig::Fixed { value } if value == 0.0 => AlphaKind::Zero,
            AlphaConfig::Fixed { value } => AlphaKind::Fixed(value),
            AlphaConfig::Learned { init } => AlphaKind::Learned(init),
        };
        let alpha_is_zero = matches!(alpha, AlphaKind::Zero);
        let with_acceptance = !matches!(cfg.acceptance, AcceptanceConfig::Off);
        let rev_acc = match &cfg.acceptance {
            AcceptanceConfig::Nn { .. } => RevAccMode::Nn,
            _ => RevAccMode::Simple,
        };
        let options = BoundOptions {
            with_acceptance,
            alpha_is_zero,
            cancel_v0: alpha_is_zero,
            merge_final: alpha_is_zero,
            entropy_q0: cfg.analytic_entropy,
            entropy_fkin: cfg.analytic_entropy,
            rev_acc,
        };
        let mass = match &cfg.mass {
            MassConfig::Identity => MassSpec::Identity { d },
            MassConfig::Global => MassSpec::Global { d },
            MassConfig::Conditioned { hidden } => {
                MassSpec::Conditioned { net: crate::models::mass_net_spec(x_dim, d, *hidden) }
            }
        };
        let racc = match &cfg.acceptance {
            AcceptanceConfig::Nn { hidden } if with_acceptance => {
                Some(racc_spec(d, x_dim, hidden))
            }
            _ => None,
        };
        Ok(Self {
            kind,
            d,
            x_dim,
            n_hmc: cfg.n_hmc,
            n_leapfrog: cfg.n_leapfrog,
            step_size_init: cfg.step_size,
            alpha,
            mass,
            options,
            encoder: encoder_spec(x_dim, d, &cfg.encoder_hidden),
            decoder: (kind == TargetKind::Vae)
                .then(|| decoder_spec(d, x_dim, &cfg.decoder_hidden)),
            rv: rv_spec("rv", d, x_dim, !alpha_is_zero, &cfg.rv_hidden),
            rv_final: (!alpha_is_zero)
                .then(|| rv_spec("rvfin", d, x_dim, false, &cfg.rv_hidden)),
            racc,
        })
    }

    /// Fresh parameter store with every learnable block registered, in a
    /// fixed order so a given seed always yields the same initialization.
    pub fn init_store<Rg: Rng>(&self, rng: &mut Rg) -> ParamStore {
        let mut store = ParamStore::new();
        self.encoder.init_into(&mut store, rng);
        if let Some(dec) = &self.decoder {
            dec.init_into(&mut store, rng);
        }
        self.rv.init_into(&mut store, rng);
        if let Some(rvf) = &self.rv_final {
            rvf.init_into(&mut store, rng);
        }
        if let Some(racc) = &self.racc {
            racc.init_into(&mut store, rng);
        }
        self.mass.init_params(&mut store, rng);
        store.add_block(STEP_EPS_BLOCK, vec![self.step_size_init.ln()]);
        if let AlphaKind::Learned(init) = self.alpha {
            store.add_block(STEP_ALPHA_BLOCK, vec![init.atanh()]);
        }
        store
    }

    pub fn step_size(&self, store: &ParamStore) -> f64 {
        store.block(STEP_EPS_BLOCK)[0].exp()
    }

    pub fn alpha_value(&self, store: &ParamStore) -> f64 {
        match self.alpha {
            AlphaKind::Zero => 0.0,
            AlphaKind::Fixed(v) => v,
            AlphaKind::Learned(_) => store.block(STEP_ALPHA_BLOCK)[0].tanh(),
        }
    }

    /// The trained transition kernel as a plain simulation config.
    pub fn hmc_config(&self, store: &ParamStore) -> HmcConfig {
        HmcConfig::new(
            self.n_hmc,
            self.step_size(store),
            self.n_leapfrog,
            self.alpha_value(store),
            self.options.with_acceptance,
        )
    }

    /// Initial-density head q0(z|x) at the current parameters.
    pub fn q0_f64(&self, store: &ParamStore, x: &[f64]) -> GaussHead<f64> {
        let params = self.encoder.params_from_store(store);
        GaussHead::from_heads(self.encoder.forward(&params, x))
    }

    fn bind_tape<'g>(&self, g: &'g Graph, store: &ParamStore) -> TapeParams<'g> {
        TapeParams {
            encoder: self.encoder.bind(g, store),
            decoder: self.decoder.as_ref().map(|s| s.bind(g, store)),
            rv: self.rv.bind(g, store),
            rv_final: self.rv_final.as_ref().map(|s| s.bind(g, store)),
            racc: self.racc.as_ref().map(|s| s.bind(g, store)),
            raw_eps: g.bind_block(STEP_EPS_BLOCK, store.block(STEP_EPS_BLOCK))[0],
            raw_alpha: matches!(self.alpha, AlphaKind::Learned(_))
                .then(|| g.bind_block(STEP_ALPHA_BLOCK, store.block(STEP_ALPHA_BLOCK))[0]),
        }
    }

    fn params_f64(&self, store: &ParamStore) -> F64Params {
        F64Params {
            encoder: self.encoder.params_from_store(store),
            decoder: self.decoder.as_ref().map(|s| s.params_from_store(store)),
            rv: self.rv.params_from_store(store),
            rv_final: self.rv_final.as_ref().map(|s| s.params_from_store(store)),
            racc: self.racc.as_ref().map(|s| s.params_from_store(store)),
            raw_eps: store.block(STEP_EPS_BLOCK)[0],
        }
    }
}

// ---------------------------------------------------------------------------
// Per-datum bound evaluation (tape and plain)
// ---------------------------------------------------------------------------

/// One differentiable bound evaluation for one datum on the given graph.
/// Gradients flow into every learnable surface: encoder, decoder, reverse
/// models, step size, mixing coefficient, and mass parameters.
pub fn datum_bound_tape<'g>(
    g: &'g Graph,
    bundle: &ModelBundle,
    store: &ParamStore,
    x: &[f64],
    noise: &SampleNoise,
) -> Result<(Expr<'g>, BoundTerms)> {
    assert_eq!(x.len(), bundle.x_dim, "observation width mismatch");
    let tp = bundle.bind_tape(g, store);
    let x_feat = g.constant_vec(x);
    let q0 = GaussHead::from_heads(bundle.encoder.forward(&tp.encoder, &x_feat));
    let binding = bundle.mass.bind_tape(g, store, Some(x))?;
    let eps = tp.raw_eps.exp_r();
    let alpha = match bundle.alpha {
        AlphaKind::Zero => g.constant(0.0),
        AlphaKind::Fixed(v) => g.constant(v),
        AlphaKind::Learned(_) => tp.raw_alpha.as_ref().unwrap().tanh_r(),
    };
    let nets = BoundNets {
        rv: (&bundle.rv, &tp.rv),
        rv_final: bundle.rv_final.as_ref().map(|s| (s, tp.rv_final.as_ref().unwrap())),
        racc: bundle.racc.as_ref().map(|s| (s, tp.racc.as_ref().unwrap())),
    };
    match bundle.kind {
        TargetKind::Vae => {
            let dec_spec = bundle.decoder.as_ref().unwrap();
            let dec_params = tp.decoder.as_ref().unwrap();
            let mut pot_fn =
                |z: &[Expr<'g>]| Ok(vae_joint_energy(dec_spec, dec_params, x, z, None));
            let mut grad_fn = |z: &[Expr<'g>]| {
                let u = vae_joint_energy(dec_spec, dec_params, x, z, None);
                Ok(g.grad_nodes(u, z))
            };
            assemble_bound(
                &mut pot_fn,
                &mut grad_fn,
                &q0,
                &binding,
                eps,
                bundle.n_leapfrog,
                alpha,
                bundle.n_hmc,
                &nets,
                &x_feat,
                noise,
                &bundle.options,
            )
        }
        TargetKind::Conjugate => {
            let pot = ConjugateGaussJoint { x: x[0] };
            let mut pot_fn = move |z: &[Expr<'g>]| Ok(pot.build_energy(g, z));
            let mut grad_fn = move |z: &[Expr<'g>]| {
                let u = pot.build_energy(g, z);
                Ok(g.grad_nodes(u, z))
            };
            assemble_bound(
                &mut pot_fn,
                &mut grad_fn,
                &q0,
                &binding,
                eps,
                bundle.n_leapfrog,
                alpha,
                bundle.n_hmc,
                &nets,
                &x_feat,
                noise,
                &bundle.options,
            )
        }
    }
}

/// The same bound evaluation in plain arithmetic (validation, evaluation,
/// finite-difference baselines). Bit-compatible with the tape path.
pub fn datum_bound_f64(
    bundle: &ModelBundle,
    store: &ParamStore,
    x: &[f64],
    noise: &SampleNoise,
) -> Result<(f64, BoundTerms)> {
    assert_eq!(x.len(), bundle.x_dim, "observation width mismatch");
    let fp = bundle.params_f64(store);
    let q0 = GaussHead::from_heads(bundle.encoder.forward(&fp.encoder, x));
    let binding = bundle.mass.bind_f64(Some(store), Some(x))?;
    let eps = fp.raw_eps.exp();
    let alpha = bundle.alpha_value(store);
    let nets = BoundNets {
        rv: (&bundle.rv, &fp.rv),
        rv_final: bundle.rv_final.as_ref().map(|s| (s, fp.rv_final.as_ref().unwrap())),
        racc: bundle.racc.as_ref().map(|s| (s, fp.racc.as_ref().unwrap())),
    };
    match bundle.kind {
        TargetKind::Vae => {
            let pot = VaeJointPotential::new(
                bundle.decoder.clone().unwrap(),
                fp.decoder.clone().unwrap(),
                x.to_vec(),
            );
            assemble_bound_f64(
                &pot,
                &q0,
                &binding,
                eps,
                bundle.n_leapfrog,
                alpha,
                bundle.n_hmc,
                &nets,
                x,
                noise,
                &bundle.options,
            )
        }
        TargetKind::Conjugate => {
            let pot = ConjugateGaussJoint { x: x[0] };
            assemble_bound_f64(
                &pot,
                &q0,
                &binding,
                eps,
                bundle.n_leapfrog,
                alpha,
                bundle.n_hmc,
                &nets,
                x,
                noise,
                &bundle.options,
            )
        }
    }
}

/// Mean bound and mean gradient over an explicit batch with explicit noise
/// (the raw material for gradient-variance studies).
pub fn batch_gradient(
    bundle: &ModelBundle,
    store: &ParamStore,
    xs: &[&[f64]],
    noises: &[SampleNoise],
) -> Result<(f64, GradAccum)> {
    assert_eq!(xs.len(), noises.len());
    assert!(!xs.is_empty());
    let g = Graph::new();
    let mut adj = Vec::new();
    let mut accum = GradAccum::zeros_like(store);
    let mut mean_bound = 0.0;
    let scale = 1.0 / xs.len() as f64;
    for (x, noise) in xs.iter().zip(noises) {
        g.clear();
        let (laux, _) = datum_bound_tape(&g, bundle, store, x, noise)?;
        g.backward_into(-laux, &mut adj);
        accum.accumulate(store, &g, &adj, scale);
        mean_bound += laux.value() * scale;
    }
    Ok((mean_bound, accum))
}

// ---------------------------------------------------------------------------
// Data preparation
// ---------------------------------------------------------------------------

/// Concrete datasets for all three splits, with the fixed evaluation draws
/// (binarizations) persisted up front so validation is a deterministic
/// function of the parameters.
pub enum PreparedData {
    Conjugate {
        train: Vec<f64>,
        valid: Vec<f64>,
        test: Vec<f64>,
        valid_log_marginals: Vec<f64>,
        test_log_marginals: Vec<f64>,
    },
    Images {
        train: ImageDataset,
        valid_draws: Vec<EvalDraw>,
        test_draws: Vec<EvalDraw>,
    },
}

fn slice_images(ds: &ImageDataset, lo: usize, hi: usize, split: Split) -> ImageDataset {
    ImageDataset {
        images: ds.images[lo..hi].to_vec(),
        labels: ds.labels.as_ref().map(|l| l[lo..hi].to_vec()),
        split,
        rows: ds.rows,
        cols: ds.cols,
    }
}

impl PreparedData {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        match &cfg.dataset {
            DatasetConfig::Conjugate { n_train, n_valid, n_test } => {
                let mut rng = ChaCha12Rng::seed_from_u64(cfg.data_seed);
                let ds = synthetic_conjugate(n_train + n_valid + n_test, &mut rng);
                let (a, b) = (*n_train, n_train + n_valid);
                Ok(PreparedData::Conjugate {
                    train: ds.xs[..a].to_vec(),
                    valid: ds.xs[a..b].to_vec(),
                    test: ds.xs[b..].to_vec(),
                    valid_log_marginals: ds.log_marginals[a..b].to_vec(),
                    test_log_marginals: ds.log_marginals[b..].to_vec(),
                })
            }
            DatasetConfig::SyntheticImages { n_train, n_valid, n_test, rows, cols } => {
                let total = n_train + n_valid + n_test;
                let all = synthetic_images(total, *rows, *cols, cfg.data_seed);
                let (a, b) = (*n_train, n_train + n_valid);
                let train = slice_images(&all, 0, a, Split::Train);
                let valid = slice_images(&all, a, b, Split::Valid);
                let test = slice_images(&all, b, total, Split::Test);
                Ok(Self::with_draws(train, valid, test, cfg))
            }
            DatasetConfig::IdxImages { train, valid, test } => {
                let train = load_idx_images(train, Split::Train)?;
                let valid = load_idx_images(valid, Split::Valid)?;
                let test = load_idx_images(test, Split::Test)?;
                if valid.pixel_count() != train.pixel_count()
                    || test.pixel_count() != train.pixel_count()
                {
                    return Err(Error::Data("split image sizes disagree".into()));
                }
                Ok(Self::with_draws(train, valid, test, cfg))
            }
        }
    }

    fn with_draws(
        train: ImageDataset,
        valid: ImageDataset,
        test: ImageDataset,
        cfg: &ExperimentConfig,
    ) -> Self {
        let valid_draws = make_eval_draws(
            &valid,
            cfg.eval_draws,
            stream_seed(cfg.data_seed, ROLE_EVAL_DRAWS, 1, 0),
        );
        let test_draws = make_eval_draws(
            &test,
            cfg.eval_draws,
            stream_seed(cfg.data_seed, ROLE_EVAL_DRAWS, 2, 0),
        );
        PreparedData::Images { train, valid_draws, test_draws }
    }

    pub fn x_dim(&self) -> usize {
        match self {
            PreparedData::Conjugate { .. } => 1,
            PreparedData::Images { train, .. } => train.pixel_count(),
        }
    }

    pub fn n_train(&self) -> usize {
        match self {
            PreparedData::Conjugate { train, .. } => train.len(),
            PreparedData::Images { train, .. } => train.len(),
        }
    }

    fn train_view(&self, cfg: &ExperimentConfig, epoch: usize) -> TrainView<'_> {
        match self {
            PreparedData::Conjugate { train, .. } => TrainView::Conjugate(train),
            PreparedData::Images { train, .. } => {
                let mut rng = ChaCha12Rng::seed_from_u64(stream_seed(
                    cfg.data_seed,
                    ROLE_BINARIZE,
                    epoch as u64,
                    0,
                ));
                TrainView::Images(binarize_stochastic(train, &mut rng))
            }
        }
    }
}

enum TrainView<'a> {
    Conjugate(&'a [f64]),
    Images(ImageDataset),
}

impl TrainView<'_> {
    fn len(&self) -> usize {
        match self {
            TrainView::Conjugate(xs) => xs.len(),
            TrainView::Images(ds) => ds.len(),
        }
    }

    fn x(&self, i: usize) -> &[f64] {
        match self {
            TrainView::Conjugate(xs) => std::slice::from_ref(&xs[i]),
            TrainView::Images(ds) => &ds.images[i],
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean bound over the data the optimizer actually stepped on.
    pub train_bound: f64,
    /// End-of-epoch validation bound (fixed eval draws).
    pub valid_bound: f64,
    /// Mean acceptance indicator per transition index.
    pub accept_rate: Vec<f64>,
    pub skipped_batches: usize,
    pub wall_s: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub final_store: ParamStore,
    pub best_store: ParamStore,
    /// Best validation bound seen (including the pre-training evaluation).
    pub best_valid: f64,
    /// Epoch that produced `best_store` (0: the initial parameters).
    pub best_epoch: usize,
    /// Validation bound of the initial (possibly warm-started) parameters.
    pub init_valid: f64,
    pub log: Vec<EpochRecord>,
    pub total_skipped: usize,
    /// Blocks copied from the warm-start checkpoint, if any.
    pub warm_started: Vec<String>,
}

/// Metrics log as CSV: epoch, train bound, valid bound, per-transition
/// acceptance rates, skipped batches, wall seconds.
pub fn metrics_csv(log: &[EpochRecord], n_hmc: usize) -> String {
    let mut out = String::from("epoch,train_bound,valid_bound");
    for t in 1..=n_hmc {
        let _ = write!(out, ",accept_rate_{t}");
    }
    out.push_str(",skipped_batches,wall_s\n");
    for rec in log {
        let _ = write!(out, "{},{},{}", rec.epoch, rec.train_bound, rec.valid_bound);
        for r in &rec.accept_rate {
            let _ = write!(out, ",{r}");
        }
        let _ = writeln!(out, ",{},{}", rec.skipped_batches, rec.wall_s);
    }
    out
}

fn improved(candidate: f64, best: f64) -> bool {
    candidate > best || (best.is_nan() && !candidate.is_nan())
}

/// Runs the full optimization: per epoch, re-binarize (image data), shuffle,
/// and for each batch assemble one bound per datum, average the gradients,
/// and take an Adam step. Batches with non-finite bounds or gradients are
/// skipped and counted; a configurable streak of them aborts the run. The
/// best parameters by validation bound are kept alongside the final ones.
pub fn train(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    out_dir: Option<&Path>,
) -> Result<TrainResult> {
    cfg.validate()?;
    let bundle = ModelBundle::from_config(cfg, data.x_dim())?;
    let mut init_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut store = bundle.init_store(&mut init_rng);
    let mut warm_started = Vec::new();
    if let Some(path) = &cfg.warm_start {
        let (source, _) = load_checkpoint(path)?;
        warm_started = warm_start(&mut store, &source);
        if warm_started.is_empty() {
            return Err(Error::Config(format!(
                "warm start from {} matched no parameter blocks",
                path.display()
            )));
        }
    }
    let mut adam = Adam::new(AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() }, &store);
    let mut accum = GradAccum::zeros_like(&store);
    let g = Graph::new();
    let mut adj: Vec<f64> = Vec::new();

    let init_valid = validation_bound(cfg, &bundle, &store, data)?;
    let mut best_valid = init_valid;
    let mut best_store = store.clone();
    let mut best_epoch = 0usize;
    let mut log: Vec<EpochRecord> = Vec::new();
    let mut nonfinite_streak = 0usize;
    let mut total_skipped = 0usize;

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let view = data.train_view(cfg, epoch);
        let mut order: Vec<usize> = (0..view.len()).collect();
        order.shuffle(&mut ChaCha12Rng::seed_from_u64(stream_seed(
            cfg.seed,
            ROLE_SHUFFLE,
            epoch as u64,
            0,
        )));

        let mut bound_sum = 0.0;
        let mut processed = 0usize;
        let mut acc_counts = vec![0.0; bundle.n_hmc];
        let mut skipped = 0usize;
        let mut applied_batches = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            accum.reset();
            let mut batch_bound = 0.0;
            let mut batch_acc = vec![0.0; bundle.n_hmc];
            let mut failed = false;
            for &idx in batch {
                let mut noise_rng = ChaCha12Rng::seed_from_u64(stream_seed(
                    cfg.seed,
                    ROLE_TRAIN_NOISE,
                    epoch as u64,
                    idx as u64,
                ));
                let noise = SampleNoise::draw(bundle.d, bundle.n_hmc, &mut noise_rng);
                g.clear();
                match datum_bound_tape(&g, &bundle, &store, view.x(idx), &noise) {
                    Ok((laux, terms)) => {
                        g.backward_into(-laux, &mut adj);
                        accum.accumulate(&store, &g, &adj, 1.0 / batch.len() as f64);
                        batch_bound += laux.value();
                        for (t, s) in terms.steps.iter().enumerate() {
                            if s.i_acc {
                                batch_acc[t] += 1.0;
                            }
                        }
                    }
                    Err(
                        Error::NonFinite(_) | Error::Divergence(_) | Error::Domain { .. },
                    ) => {
                        failed = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if failed || !accum.is_finite() {
                skipped += 1;
                total_skipped += 1;
                nonfinite_streak += 1;
                if nonfinite_streak >= cfg.nonfinite_abort_streak {
                    return Err(Error::NonFinite(format!(
                        "aborting after {nonfinite_streak} consecutive skipped batches \
                         (non-finite bound or gradient, epoch {epoch})"
                    )));
                }
                continue;
            }
            nonfinite_streak = 0;
            if let Some(max_norm) = cfg.grad_clip {
                accum.clip_global_norm(max_norm);
            }
            adam.step(&mut store, &accum)?;
            bound_sum += batch_bound;
            processed += batch.len();
            for t in 0..bundle.n_hmc {
                acc_counts[t] += batch_acc[t];
            }
            applied_batches += 1;
            if cfg.valid_every > 0 && applied_batches % cfg.valid_every == 0 {
                let vb = validation_bound(cfg, &bundle, &store, data)?;
                if improved(vb, best_valid) {
                    best_valid = vb;
                    best_store = store.clone();
                    best_epoch = epoch;
                }
            }
        }

        let valid_bound = validation_bound(cfg, &bundle, &store, data)?;
        if improved(valid_bound, best_valid) {
            best_valid = valid_bound;
            best_store = store.clone();
            best_epoch = epoch;
        }
        let train_bound =
            if processed > 0 { bound_sum / processed as f64 } else { f64::NAN };
        let accept_rate: Vec<f64> = acc_counts
            .iter()
            .map(|c| if processed > 0 { c / processed as f64 } else { f64::NAN })
            .collect();
        log.push(EpochRecord {
            epoch,
            train_bound,
            valid_bound,
            accept_rate,
            skipped_batches: skipped,
            wall_s: t0.elapsed().as_secs_f64(),
        });
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
        std::fs::write(dir.join("metrics.csv"), metrics_csv(&log, bundle.n_hmc))?;
        save_checkpoint(
            &dir.join("checkpoint_final.json"),
            &store,
            serde_json::json!({ "run_name": cfg.run_name, "epoch": cfg.epochs }),
        )?;
        save_checkpoint(
            &dir.join("checkpoint_best.json"),
            &best_store,
            serde_json::json!({
                "run_name": cfg.run_name,
                "epoch": best_epoch,
                "valid_bound": best_valid,
            }),
        )?;
    }

    Ok(TrainResult {
        final_store: store,
        best_store,
        best_valid,
        best_epoch,
        init_valid,
        log,
        total_skipped,
        warm_started,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct NllSummary {
    /// Mean estimated log p(x) over the split.
    pub log_px: f64,
    /// Combined standard error of the mean estimate.
    pub se: f64,
    pub n_samples: usize,
    pub per_datum: Vec<NllEstimate>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub n_data: usize,
    pub n_draws: usize,
    /// Mean bound over data (each datum first averaged across eval draws).
    pub bound: f64,
    /// Standard error of `bound` across data.
    pub bound_se: f64,
    /// Mean acceptance indicator per transition index.
    pub accept_rate: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll: Option<NllSummary>,
}

enum SplitItems<'a> {
    Conj(&'a [f64]),
    Imgs(&'a [EvalDraw]),
}

fn split_items<'a>(data: &'a PreparedData, split: Split) -> Result<SplitItems<'a>> {
    match (data, split) {
        (PreparedData::Conjugate { valid, .. }, Split::Valid) => Ok(SplitItems::Conj(valid)),
        (PreparedData::Conjugate { test, .. }, Split::Test) => Ok(SplitItems::Conj(test)),
        (PreparedData::Images { valid_draws, .. }, Split::Valid) => {
            Ok(SplitItems::Imgs(valid_draws))
        }
        (PreparedData::Images { test_draws, .. }, Split::Test) => Ok(SplitItems::Imgs(test_draws)),
        (_, Split::Train) => Err(Error::Config(
            "evaluation runs on the valid or test split, not train".into(),
        )),
    }
}

fn validation_bound(
    cfg: &ExperimentConfig,
    bundle: &ModelBundle,
    store: &ParamStore,
    data: &PreparedData,
) -> Result<f64> {
    let (bound, _, _) = split_bound(cfg, bundle, store, data, Split::Valid)?;
    Ok(bound)
}

/// Mean bound, its standard error over data, and per-step acceptance rates
/// on a split, using the persisted evaluation noise.
fn split_bound(
    cfg: &ExperimentConfig,
    bundle: &ModelBundle,
    store: &ParamStore,
    data: &PreparedData,
    split: Split,
) -> Result<(f64, f64, Vec<f64>)> {
    let items = split_items(data, split)?;
    let tag = split_tag(split);
    let mut per_datum: Vec<f64> = Vec::new();
    let mut acc_counts = vec![0.0; bundle.n_hmc];
    let mut chains = 0usize;
    // A datum whose bound cannot be evaluated (numerical overflow or a
    // diverged no-acceptance trajectory) poisons its entry with NaN rather
    // than failing the whole evaluation: the mean then reports NaN, which
    // the best-checkpoint tracking never selects, while structural errors
    // still propagate.
    let one = |i: usize,
                   x: &[f64],
                   seed: u64,
                   weight: f64,
                   per_datum: &mut [f64],
                   acc_counts: &mut [f64],
                   chains: &mut usize|
     -> Result<()> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let noise = SampleNoise::draw(bundle.d, bundle.n_hmc, &mut rng);
        match datum_bound_f64(bundle, store, x, &noise) {
            Ok((b, terms)) => {
                per_datum[i] += b * weight;
                for (t, s) in terms.steps.iter().enumerate() {
                    if s.i_acc {
                        acc_counts[t] += 1.0;
                    }
                }
                *chains += 1;
            }
            Err(Error::NonFinite(_) | Error::Divergence(_) | Error::Domain { .. }) => {
                per_datum[i] = f64::NAN;
            }
            Err(e) => return Err(e),
        }
        Ok(())
    };
    match items {
        SplitItems::Conj(xs) => {
            per_datum.resize(xs.len(), 0.0);
            for k in 0..cfg.eval_draws as u64 {
                for (i, x) in xs.iter().enumerate() {
                    let seed =
                        stream_seed(cfg.data_seed, ROLE_EVAL_NOISE, (tag << 32) | k, i as u64);
                    one(
                        i,
                        std::slice::from_ref(x),
                        seed,
                        1.0 / cfg.eval_draws as f64,
                        &mut per_datum,
                        &mut acc_counts,
                        &mut chains,
                    )?;
                }
            }
        }
        SplitItems::Imgs(draws) => {
            let n = draws[0].data.len();
            per_datum.resize(n, 0.0);
            for draw in draws {
                for (i, img) in draw.data.images.iter().enumerate() {
                    let seed = stream_seed(draw.seed, ROLE_EVAL_NOISE, tag, i as u64);
                    one(
                        i,
                        img,
                        seed,
                        1.0 / draws.len() as f64,
                        &mut per_datum,
                        &mut acc_counts,
                        &mut chains,
                    )?;
                }
            }
        }
    }
    let n = per_datum.len() as f64;
    let mean = per_datum.iter().sum::<f64>() / n;
    let se = if per_datum.len() >= 2 {
        let var = per_datum.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    let rates = acc_counts.iter().map(|c| c / (chains as f64).max(1.0)).collect();
    Ok((mean, se, rates))
}

/// Full checkpoint evaluation on a split: averaged bound (over the persisted
/// eval draws), per-transition acceptance rates, and optionally the
/// importance-sampling marginal-likelihood estimate per datum.
pub fn evaluate(
    cfg: &ExperimentConfig,
    store: &ParamStore,
    data: &PreparedData,
    split: Split,
    with_nll: bool,
) -> Result<EvalReport> {
    let bundle = ModelBundle::from_config(cfg, data.x_dim())?;
    let (bound, bound_se, accept_rate) = split_bound(cfg, &bundle, store, data, split)?;
    let (n_data, n_draws) = match split_items(data, split)? {
        SplitItems::Conj(xs) => (xs.len(), cfg.eval_draws),
        SplitItems::Imgs(draws) => (draws[0].data.len(), draws.len()),
    };

    let nll = if with_nll {
        let hmc = bundle.hmc_config(store);
        let is_cfg = IsConfig { n_samples: cfg.is_samples, probes: cfg.is_probes };
        let tag = split_tag(split);
        let mut per_datum = Vec::with_capacity(n_data);
        for i in 0..n_data {
            let seed = stream_seed(cfg.data_seed, ROLE_NLL, tag, i as u64);
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let est = match (&bundle.kind, split_items(data, split)?) {
                (TargetKind::Conjugate, SplitItems::Conj(xs)) => {
                    let x = std::slice::from_ref(&xs[i]);
                    let pot = ConjugateGaussJoint { x: xs[i] };
                    let q0 = bundle.q0_f64(store, x);
                    let binding = bundle.mass.bind_f64(Some(store), Some(x))?;
                    estimate_nll(&pot, &q0, &binding, &hmc, &is_cfg, &mut rng)?
                }
                (TargetKind::Vae, SplitItems::Imgs(draws)) => {
                    let x = &draws[0].data.images[i];
                    let fp = bundle.params_f64(store);
                    let pot = VaeJointPotential::new(
                        bundle.decoder.clone().unwrap(),
                        fp.decoder.unwrap(),
                        x.clone(),
                    );
                    let q0 = bundle.q0_f64(store, x);
                    let binding = bundle.mass.bind_f64(Some(store), Some(x))?;
                    estimate_nll(&pot, &q0, &binding, &hmc, &is_cfg, &mut rng)?
                }
                _ => unreachable!("bundle kind always matches the prepared data"),
            };
            per_datum.push(est);
        }
        let log_px = per_datum.iter().map(|e| e.log_marginal).sum::<f64>() / n_data as f64;
        let se = per_datum.iter().map(|e| e.se * e.se).sum::<f64>().sqrt() / n_data as f64;
        Some(NllSummary { log_px, se, n_samples: cfg.is_samples, per_datum })
    } else {
        None
    };

    Ok(EvalReport { split, n_data, n_draws, bound, bound_se, accept_rate, nll })
}
