//! The Markov-chain transition kernel: momentum refreshment (full or
//! partial), a leapfrog proposal, Metropolis acceptance with the
//! double-negation bookkeeping, trace recording, and ensemble simulation.
//!
//! Everything stochastic is driven by pre-drawn noise ([`StepNoise`],
//! [`ChainNoise`]) so the same chain can be replayed bit for bit — the
//! common-random-numbers machinery behind the finite-difference gradient
//! checks — and so the tape-valued training path consumes exactly the same
//! randomness as the plain simulator.

use crate::autodiff::{one_minus, Expr, Graph, ParamStore, Real};
use crate::leapfrog::{leapfrog_hd_g, LeapfrogConfig, MassForm, PhaseState};
use crate::models::{MlpSpec, LN_2PI};
use crate::potential::Potential;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Parameter block holding the global mode's log mass entries.
pub const MASS_BLOCK: &str = "mass.logdiag";
/// Log mass entries are clamped to ±this before exponentiation, in both the
/// global and the network-conditioned mode.
pub const MASS_LOG_CLAMP: f64 = 30.0;

/// How the (diagonal) mass matrix is determined.
#[derive(Clone, Debug)]
pub enum MassSpec {
    /// M = I.
    Identity { d: usize },
    /// One learned diagonal shared across data, stored as log entries.
    Global { d: usize },
    /// Diagonal predicted from the observation by a network.
    Conditioned { net: MlpSpec },
}

impl MassSpec {
    pub fn d(&self) -> usize {
        match self {
            MassSpec::Identity { d } | MassSpec::Global { d } => *d,
            MassSpec::Conditioned { net } => net.heads[0].dim,
        }
    }

    /// Register this spec's learnable parameters (none for identity).
    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        match self {
            MassSpec::Identity { .. } => {}
            MassSpec::Global { d } => {
                store.add_block(MASS_BLOCK, vec![0.0; *d]);
            }
            MassSpec::Conditioned { net } => net.init_into(store, rng),
        }
    }

    /// Concrete diagonal for simulation.
    pub fn bind_f64(
        &self,
        store: Option<&ParamStore>,
        x: Option<&[f64]>,
    ) -> Result<MassBinding<f64>> {
        match self {
            MassSpec::Identity { d } => Ok(MassBinding::identity_f64(*d)),
            MassSpec::Global { d } => {
                let store = store.ok_or_else(|| {
                    Error::Config("global mass needs a parameter store".into())
                })?;
                let raw = store.block(MASS_BLOCK);
                debug_assert_eq!(raw.len(), *d);
                let m: Vec<f64> = raw
                    .iter()
                    .map(|&l| l.clamp(-MASS_LOG_CLAMP, MASS_LOG_CLAMP).exp())
                    .collect();
                Ok(MassBinding::from_diag(&m))
            }
            MassSpec::Conditioned { net } => {
                let store = store.ok_or_else(|| {
                    Error::Config("conditioned mass needs a parameter store".into())
                })?;
                let x = x.ok_or_else(|| {
                    Error::Config("conditioned mass needs an observation".into())
                })?;
                let params = net.params_from_store(store);
                let m = net.forward(&params, x).swap_remove(0);
                Ok(MassBinding::from_diag(&m))
            }
        }
    }

    /// Tape-valued diagonal: gradients flow into the mass parameters.
    pub fn bind_tape<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: Option<&[f64]>,
    ) -> Result<MassBinding<Expr<'g>>> {
        match self {
            MassSpec::Identity { d } => {
                let one = g.constant(1.0);
                let zero = g.constant(0.0);
                Ok(MassBinding {
                    m_diag: vec![one; *d],
                    inv_diag: vec![one; *d],
                    sqrt_diag: vec![one; *d],
                    log_det: zero,
                })
            }
            MassSpec::Global { d } => {
                let raw = g.bind_block(MASS_BLOCK, store.block(MASS_BLOCK));
                debug_assert_eq!(raw.len(), *d);
                let m: Vec<Expr<'g>> = raw
                    .iter()
                    .map(|&l| l.max_c(-MASS_LOG_CLAMP).min_c(MASS_LOG_CLAMP).exp())
                    .collect();
                Ok(MassBinding::from_m(m))
            }
            MassSpec::Conditioned { net } => {
                let x = x.ok_or_else(|| {
                    Error::Config("conditioned mass needs an observation".into())
                })?;
                let params = net.bind(g, store);
                let xc = g.constant_vec(x);
                let m = net.forward(&params, &xc).swap_remove(0);
                Ok(MassBinding::from_m(m))
            }
        }
    }
}

/// A realized diagonal mass: the quantities the kernel and the bound need.
#[derive(Clone, Debug)]
pub struct MassBinding<R: Real> {
    pub m_diag: Vec<R>,
    pub inv_diag: Vec<R>,
    pub sqrt_diag: Vec<R>,
    /// log|M| = Σ log mᵢ.
    pub log_det: R,
}

impl MassBinding<f64> {
    pub fn identity_f64(d: usize) -> Self {
        Self {
            m_diag: vec![1.0; d],
            inv_diag: vec![1.0; d],
            sqrt_diag: vec![1.0; d],
            log_det: 0.0,
        }
    }

    pub fn from_diag(m: &[f64]) -> Self {
        assert!(m.iter().all(|&x| x > 0.0), "mass entries must be positive");
        Self::from_m(m.to_vec())
    }
}

impl<R: Real> MassBinding<R> {
    /// Copy with every mass entry detached from differentiation. Values are
    /// identical; only gradient pathways through the mass terms are severed.
    pub fn detached(&self) -> Self {
        Self::from_m(self.m_diag.iter().map(|m| m.detach_r()).collect())
    }

    pub fn from_m(m: Vec<R>) -> Self {
        let inv: Vec<R> = m.iter().map(|x| x.recip_r()).collect();
        let sqrt: Vec<R> = m.iter().map(|x| x.sqrt_r()).collect();
        let logs: Vec<R> = m.iter().map(|x| x.ln_r()).collect();
        let log_det = R::sum(&logs);
        Self { m_diag: m, inv_diag: inv, sqrt_diag: sqrt, log_det }
    }

    pub fn d(&self) -> usize {
        self.m_diag.len()
    }

    pub fn mass_form(&self) -> MassForm<'_, R> {
        MassForm::Diag(&self.inv_diag)
    }

    /// K(v) = vᵀM⁻¹v/2.
    pub fn kinetic(&self, v: &[R]) -> R {
        self.mass_form().kinetic(v)
    }

    /// v = √M ⊙ ε for standard-normal ε; reparameterized, so mass gradients
    /// flow through the sample.
    pub fn sample(&self, eps: &[f64]) -> Vec<R> {
        debug_assert_eq!(eps.len(), self.d());
        self.sqrt_diag
            .iter()
            .zip(eps.iter())
            .map(|(&s, &e)| s * e)
            .collect()
    }

    /// log N(v; 0, M) with full constants.
    pub fn log_density(&self, v: &[R]) -> R {
        let k = self.kinetic(v);
        -(k + self.log_det * 0.5 + 0.5 * LN_2PI * self.d() as f64)
    }
}

/// u = α·v_prev + √(1−α²)·v_samp. At α = 0 this is bit-identical to
/// `v_samp` (full refreshment); at |α| = 1 the momentum is kept/reflected.
pub fn partial_update<R: Real>(v_prev: &[R], v_samp: &[R], alpha: R) -> Vec<R> {
    debug_assert_eq!(v_prev.len(), v_samp.len());
    let c = one_minus(alpha * alpha).max_const(0.0).sqrt_r();
    v_prev
        .iter()
        .zip(v_samp.iter())
        .map(|(&p, &s)| alpha * p + c * s)
        .collect()
}

/// min(1, exp(H(s*) − H(s̃))), computed as exp(min(0, −ΔH)) so large energy
/// drops cannot overflow.
pub fn accept_prob<R: Real>(h_star: R, h_prop: R) -> R {
    (h_star - h_prop).min_const(0.0).exp_r()
}

/// The noise one transition consumes: d standard normals for the momentum
/// refreshment and one uniform for the accept/reject draw.
#[derive(Clone, Debug)]
pub struct StepNoise {
    pub momentum_eps: Vec<f64>,
    pub accept_u: f64,
}

/// All randomness of one chain, pre-drawn so trajectories can be replayed.
#[derive(Clone, Debug)]
pub struct ChainNoise {
    pub init_eps: Vec<f64>,
    pub steps: Vec<StepNoise>,
}

impl ChainNoise {
    pub fn draw<R: Rng>(d: usize, n_hmc: usize, rng: &mut R) -> Self {
        let normals = |rng: &mut R| (0..d).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            init_eps: normals(rng),
            steps: (0..n_hmc)
                .map(|_| StepNoise {
                    momentum_eps: normals(rng),
                    accept_u: rng.gen::<f64>(),
                })
                .collect(),
        }
    }
}

/// Transition-kernel configuration.
#[derive(Clone, Copy, Debug)]
pub struct HmcConfig {
    /// Number of transitions T ≥ 0.
    pub n_hmc: usize,
    pub eps: f64,
    pub n_leapfrog: usize,
    /// Momentum mixing coefficient α ∈ [−1, 1].
    pub alpha: f64,
    /// When false, proposals are adopted unconditionally.
    pub with_acceptance: bool,
}

impl HmcConfig {
    pub fn new(n_hmc: usize, eps: f64, n_leapfrog: usize, alpha: f64, with_acceptance: bool) -> Self {
        assert!(eps > 0.0, "step size must be positive");
        assert!(n_leapfrog >= 1, "need at least one leapfrog step");
        assert!((-1.0..=1.0).contains(&alpha), "mixing coefficient outside [-1, 1]");
        Self { n_hmc, eps, n_leapfrog, alpha, with_acceptance }
    }
}

/// Everything one transition produces, in the caller's scalar field.
#[derive(Clone, Debug)]
pub struct StepOutcome<R: Real> {
    pub v_samp: Vec<R>,
    /// Mixed momentum u_{t−1}; (z_{t−1}, u_{t−1}) is the trajectory start s*.
    pub u: Vec<R>,
    /// Trajectory endpoint (pre-negation).
    pub z_hd: Vec<R>,
    pub v_hd: Vec<R>,
    pub h_star: R,
    pub h_prop: R,
    pub p_accept: R,
    pub accepted: bool,
    pub diverged: bool,
    pub new_z: Vec<R>,
    pub new_v: Vec<R>,
}

/// One transition, generic over the scalar field.
///
/// Steps: refresh momentum from the pre-drawn normals, mix with the previous
/// momentum, integrate L leapfrog steps, negate to form the proposal
/// s̃ = (z_HD, −v_HD), accept with min(1, e^{−ΔH}), and negate the momentum
/// once more. The two negations cancel on acceptance — the state advances to
/// (z_HD, v_HD) — and combine to s_t = (z_{t−1}, −u_{t−1}) on rejection.
/// Without the acceptance step the endpoint is adopted unconditionally.
///
/// A diverged trajectory counts as a rejection when acceptance is on
/// (`h_prop` is reported as `h_star`, the probability as 0) and is an error
/// otherwise.
#[allow(clippy::too_many_arguments)]
pub fn hmc_step_g<R, FU, FG>(
    pot_fn: &mut FU,
    grad_fn: &mut FG,
    z_prev: &[R],
    v_prev: &[R],
    binding: &MassBinding<R>,
    eps: R,
    n_leapfrog: usize,
    alpha: R,
    with_acceptance: bool,
    noise: &StepNoise,
) -> Result<StepOutcome<R>>
where
    R: Real,
    FU: FnMut(&[R]) -> Result<R>,
    FG: FnMut(&[R]) -> Result<Vec<R>>,
{
    let v_samp = binding.sample(&noise.momentum_eps);
    let u = partial_update(v_prev, &v_samp, alpha);
    let h_star = pot_fn(z_prev)? + binding.kinetic(&u);

    let mut z = z_prev.to_vec();
    let mut v = u.clone();
    let cfg = LeapfrogConfig { eps, n_steps: n_leapfrog, mass: binding.mass_form() };
    let mut failure: Option<String> = None;
    match leapfrog_hd_g(grad_fn, &mut z, &mut v, &cfg) {
        Ok(()) => {}
        Err(Error::Divergence(msg)) => failure = Some(msg),
        Err(e) => return Err(e),
    }
    let h_prop = if failure.is_none() {
        let h = pot_fn(&z)? + binding.kinetic(&v);
        if h.value().is_finite() {
            Some(h)
        } else {
            failure = Some(format!("non-finite proposal energy {}", h.value()));
            None
        }
    } else {
        None
    };

    let neg = |xs: &[R]| -> Vec<R> { xs.iter().map(|&x| -x).collect() };
    if let Some(msg) = failure {
        if !with_acceptance {
            return Err(Error::Divergence(msg));
        }
        let new_v = neg(&u);
        return Ok(StepOutcome {
            v_samp,
            z_hd: z_prev.to_vec(),
            v_hd: u.clone(),
            h_star,
            h_prop: h_star,
            p_accept: alpha.lift(0.0),
            accepted: false,
            diverged: true,
            new_z: z_prev.to_vec(),
            new_v,
            u,
        });
    }
    let h_prop = h_prop.expect("set on the non-divergent path");
    let p_accept = accept_prob(h_star, h_prop);
    let accepted = !with_acceptance || noise.accept_u < p_accept.value();
    let (new_z, new_v) = if accepted {
        (z.clone(), v.clone())
    } else {
        (z_prev.to_vec(), neg(&u))
    };
    Ok(StepOutcome {
        v_samp,
        u,
        z_hd: z,
        v_hd: v,
        h_star,
        h_prop,
        p_accept,
        accepted,
        diverged: false,
        new_z,
        new_v,
    })
}

/// Trace entry for one transition.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub s_prev: PhaseState,
    pub v_samp: Vec<f64>,
    pub u: Vec<f64>,
    /// s̃_t = (z_HD, −v_HD).
    pub proposal: PhaseState,
    pub h_star: f64,
    pub h_prop: f64,
    pub p_accept: f64,
    pub accepted: bool,
    pub diverged: bool,
    pub s_new: PhaseState,
}

/// A full chain: the initial state and every transition's record.
#[derive(Clone, Debug)]
pub struct ChainTrace {
    pub s0: PhaseState,
    pub steps: Vec<StepRecord>,
}

impl ChainTrace {
    pub fn final_state(&self) -> &PhaseState {
        self.steps.last().map_or(&self.s0, |r| &r.s_new)
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.steps.is_empty() {
            return 1.0;
        }
        self.steps.iter().filter(|r| r.accepted).count() as f64 / self.steps.len() as f64
    }

    /// Check the case equation every record must satisfy, bit for bit:
    /// accepted ⇒ s_t = (z_HD, v_HD); rejected ⇒ s_t = (z_{t−1}, −u_{t−1});
    /// no-acceptance mode ⇒ everything accepted; plus momentum-mixing and
    /// state-chaining consistency.
    pub fn validate(&self, alpha: f64, with_acceptance: bool) -> Result<()> {
        let bits = |a: &[f64], b: &[f64]| -> bool {
            a.len() == b.len()
                && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        let fail = |t: usize, msg: &str| -> Result<()> {
            Err(Error::Domain {
                op: "chain_trace_validate".into(),
                msg: format!("step {t}: {msg}"),
            })
        };
        let mut prev = &self.s0;
        for (t, rec) in self.steps.iter().enumerate() {
            if !bits(&rec.s_prev.z, &prev.z) || !bits(&rec.s_prev.v, &prev.v) {
                return fail(t, "record does not chain from the previous state");
            }
            let u = partial_update(&rec.s_prev.v, &rec.v_samp, alpha);
            if !bits(&rec.u, &u) {
                return fail(t, "stored mixed momentum does not match");
            }
            if !with_acceptance && !rec.accepted {
                return fail(t, "no-acceptance mode recorded a rejection");
            }
            if rec.accepted {
                let flip = rec.proposal.flip();
                if !bits(&rec.s_new.z, &flip.z) || !bits(&rec.s_new.v, &flip.v) {
                    return fail(t, "accepted state is not the trajectory endpoint");
                }
            } else {
                let neg_u: Vec<f64> = rec.u.iter().map(|x| -x).collect();
                if !bits(&rec.s_new.z, &rec.s_prev.z) || !bits(&rec.s_new.v, &neg_u) {
                    return fail(t, "rejected state is not (z_prev, -u)");
                }
            }
            prev = &rec.s_new;
        }
        Ok(())
    }
}

/// Run a chain from `q0` consuming pre-drawn noise.
pub fn run_chain_with_noise(
    pot: &dyn Potential,
    q0: &[f64],
    binding: &MassBinding<f64>,
    cfg: &HmcConfig,
    noise: &ChainNoise,
) -> Result<ChainTrace> {
    assert_eq!(noise.steps.len(), cfg.n_hmc, "noise does not cover the chain");
    let s0 = PhaseState::new(q0.to_vec(), binding.sample(&noise.init_eps));
    let mut trace = ChainTrace { s0: s0.clone(), steps: Vec::with_capacity(cfg.n_hmc) };
    let mut grad_buf = vec![0.0; pot.dim()];
    let mut cur = s0;
    for t in 0..cfg.n_hmc {
        let out = hmc_step_g(
            &mut |z: &[f64]| pot.energy(z),
            &mut |z: &[f64]| {
                pot.grad(z, &mut grad_buf)?;
                Ok(grad_buf.clone())
            },
            &cur.z,
            &cur.v,
            binding,
            cfg.eps,
            cfg.n_leapfrog,
            cfg.alpha,
            cfg.with_acceptance,
            &noise.steps[t],
        )?;
        let s_new = PhaseState { z: out.new_z, v: out.new_v };
        trace.steps.push(StepRecord {
            s_prev: cur,
            v_samp: out.v_samp,
            u: out.u,
            proposal: PhaseState { z: out.z_hd, v: out.v_hd.iter().map(|x| -x).collect() },
            h_star: out.h_star,
            h_prop: out.h_prop,
            p_accept: out.p_accept,
            accepted: out.accepted,
            diverged: out.diverged,
            s_new: s_new.clone(),
        });
        cur = s_new;
    }
    Ok(trace)
}

/// Run a chain with fresh randomness.
pub fn run_chain<RG: Rng>(
    pot: &dyn Potential,
    q0: &[f64],
    binding: &MassBinding<f64>,
    cfg: &HmcConfig,
    rng: &mut RG,
) -> Result<ChainTrace> {
    let noise = ChainNoise::draw(binding.d(), cfg.n_hmc, rng);
    run_chain_with_noise(pot, q0, binding, cfg, &noise)
}

/// Positions, energies, and attrition of a particle population after each
/// transition.
#[derive(Clone, Debug)]
pub struct EnsembleSnapshot {
    pub step: usize,
    pub z: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub potential: Vec<f64>,
    pub kinetic: Vec<f64>,
    /// Particles whose chain aborted (possible only without acceptance).
    pub dropped: usize,
}

impl EnsembleSnapshot {
    pub fn mean_potential(&self) -> f64 {
        self.potential.iter().sum::<f64>() / self.potential.len() as f64
    }
    pub fn mean_kinetic(&self) -> f64 {
        self.kinetic.iter().sum::<f64>() / self.kinetic.len() as f64
    }
}

/// Evolve an ensemble for T transitions; snapshot 0 is the initial sample
/// (with freshly drawn momenta). Per-particle randomness is seeded
/// independently so results do not depend on particle order.
pub fn simulate_ensemble(
    pot: &dyn Potential,
    init_positions: &[Vec<f64>],
    binding: &MassBinding<f64>,
    cfg: &HmcConfig,
    seed: u64,
) -> Result<Vec<EnsembleSnapshot>> {
    use rand::SeedableRng;
    let n = init_positions.len();
    assert!(n >= 1, "empty ensemble");
    let mut states: Vec<Option<ChainTrace>> = Vec::with_capacity(n);
    let mut noises: Vec<ChainNoise> = Vec::with_capacity(n);
    for (i, q0) in init_positions.iter().enumerate() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(
            seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        let noise = ChainNoise::draw(binding.d(), cfg.n_hmc, &mut rng);
        states.push(Some(ChainTrace {
            s0: PhaseState::new(q0.clone(), binding.sample(&noise.init_eps)),
            steps: Vec::new(),
        }));
        noises.push(noise);
    }

    let mut snapshots = Vec::with_capacity(cfg.n_hmc + 1);
    let snapshot = |step: usize,
                    states: &[Option<ChainTrace>],
                    dropped: usize|
     -> Result<EnsembleSnapshot> {
        let mut z = Vec::new();
        let mut v = Vec::new();
        let mut pe = Vec::new();
        let mut ke = Vec::new();
        for st in states.iter().flatten() {
            let s = st.final_state();
            z.push(s.z.clone());
            v.push(s.v.clone());
            pe.push(pot.energy(&s.z)?);
            ke.push(binding.kinetic(&s.v));
        }
        Ok(EnsembleSnapshot { step, z, v, potential: pe, kinetic: ke, dropped })
    };

    let mut dropped = 0usize;
    snapshots.push(snapshot(0, &states, dropped)?);
    let one = HmcConfig { n_hmc: 1, ..*cfg };
    for t in 0..cfg.n_hmc {
        for i in 0..n {
            let Some(trace) = states[i].as_mut() else { continue };
            let cur = trace.final_state().clone();
            let single = ChainNoise {
                init_eps: vec![0.0; binding.d()],
                steps: vec![noises[i].steps[t].clone()],
            };
            // re-run from the current state; momentum persists via s0
            let mut chain = ChainTrace { s0: cur.clone(), steps: Vec::new() };
            let res = (|| -> Result<()> {
                let mut grad_buf = vec![0.0; pot.dim()];
                let out = hmc_step_g(
                    &mut |z: &[f64]| pot.energy(z),
                    &mut |z: &[f64]| {
                        pot.grad(z, &mut grad_buf)?;
                        Ok(grad_buf.clone())
                    },
                    &cur.z,
                    &cur.v,
                    binding,
                    one.eps,
                    one.n_leapfrog,
                    one.alpha,
                    one.with_acceptance,
                    &single.steps[0],
                )?;
                chain.steps.push(StepRecord {
                    s_prev: cur.clone(),
                    v_samp: out.v_samp,
                    u: out.u,
                    proposal: PhaseState {
                        z: out.z_hd,
                        v: out.v_hd.iter().map(|x| -x).collect(),
                    },
                    h_star: out.h_star,
                    h_prop: out.h_prop,
                    p_accept: out.p_accept,
                    accepted: out.accepted,
                    diverged: out.diverged,
                    s_new: PhaseState { z: out.new_z, v: out.new_v },
                });
                Ok(())
            })();
            match res {
                Ok(()) => states[i] = Some(chain),
                Err(Error::Divergence(_) | Error::NonFinite(_)) => {
                    states[i] = None;
                    dropped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        snapshots.push(snapshot(t + 1, &states, dropped)?);
    }
    Ok(snapshots)
}
