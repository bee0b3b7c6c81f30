//! Auxiliary variational lower bound for momentum-augmented inference chains.
//!
//! A chain of `T` stochastic transitions maps `(z_0, v_0) ~ q_0(z|x) f_kin(v|x)`
//! to `(z_T, v_T)`. With a learned reverse-time model the marginal likelihood
//! admits the lower bound
//!
//! ```text
//! L = E[ log p(x, z_T) − log q_0(z_0|x) − log f_kin(v_0|x) + log r_fin(v_T|z_T, x)
//!        + Σ_{t=1..T} ( log r_t(mom, acc) − log q_t(mom, acc) ) ]
//! ```
//!
//! where the per-transition forward factors are the momentum-refresh density
//! `q_U(u_{t−1}|v_{t−1}, x)` plus (when accept/reject is active) the
//! probability of the realized indicator, and the reverse factors are the
//! reverse momentum density `r_V(v_{t−1}|z_{t−1}, ·, t, x)` plus the reverse
//! indicator probability. All deterministic sub-steps (leapfrog integration,
//! momentum negations, the accept/reject state selection) contribute matched
//! point-mass factors to both directions; those cancel symbolically and are
//! never evaluated as numbers. [`delta_cancellation_check`] verifies the state
//! bookkeeping this cancellation relies on, and the realized indicators are
//! treated as fixed data when differentiating (no score term is added for
//! them; see the crate-level notes on estimator bias).
//!
//! The assembly is generic over the scalar field: `f64` for plain evaluation
//! and tape expressions for end-to-end gradients. Both paths perform
//! bit-identical arithmetic on values, so frozen-noise finite differences of
//! the `f64` path validate tape gradients directly.

use crate::autodiff::{one_minus, Real};
use crate::hmc::{hmc_step_g, ChainNoise, ChainTrace, MassBinding, StepRecord};
use crate::leapfrog::{leapfrog_rev_hd, LeapfrogConfig};
use crate::models::{gauss_diag_logpdf, GaussHead, MlpParams, MlpSpec, LN_2PI};
use crate::potential::Potential;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

/// Indicator probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]`
/// inside logarithms (and only there) so that zero/one probabilities cannot
/// produce infinite bound terms.
pub const PROB_CLAMP: f64 = 1e-12;

/// Position-recovery tolerance for [`delta_cancellation_check`].
pub const DELTA_CHECK_TOL: f64 = 1e-8;

fn ln_clamped<R: Real>(p: R) -> R {
    p.max_const(PROB_CLAMP).min_const(1.0 - PROB_CLAMP).ln_r()
}

/// Log-density of the momentum refresh `u = α·v_prev + √(1−α²)·v_samp` with
/// `v_samp ~ f_kin(·|x)`, as a conditional density of `u` given `v_prev`:
///
/// ```text
/// log q_U(u | v_prev, x) = log f_kin((u − α·v_prev)/√(1−α²) | x) − (d/2)·log(1−α²)
/// ```
///
/// `|α| = 1` makes the refresh deterministic (no density with respect to
/// Lebesgue measure) and is reported as a domain error.
pub fn log_q_u<R: Real>(u: &[R], v_prev: &[R], alpha: R, binding: &MassBinding<R>) -> Result<R> {
    let d = binding.d();
    assert_eq!(u.len(), d, "momentum dimension mismatch");
    assert_eq!(v_prev.len(), d, "momentum dimension mismatch");
    let om = one_minus(alpha * alpha);
    if om.value() < PROB_CLAMP {
        return Err(Error::Domain {
            op: "log_q_u",
            msg: format!(
                "1 - alpha^2 = {:e} is degenerate: the deterministic momentum update has no density",
                om.value()
            ),
        });
    }
    let inv_c = om.sqrt_r().recip_r();
    let v_samp: Vec<R> = (0..d).map(|i| (u[i] - alpha * v_prev[i]) * inv_c).collect();
    Ok(binding.log_density(&v_samp) - om.ln_r() * (d as f64 * 0.5))
}

/// How the reverse acceptance probability `P(A_t | s_t)` is approximated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RevAccMode {
    /// Stationary-chain approximation from the reverse trajectory alone.
    Simple,
    /// Simple approximation plus a learned tanh-bounded correction, clipped
    /// back to `[0, 1]`.
    Nn,
}

/// Branch arithmetic shared by every reverse-acceptance evaluation:
///
/// ```text
/// ΔH_rev ≤ 0            → exactly 1
/// else (simple)          → exp(−ΔH_rev)
/// else (with correction) → clip(exp(−ΔH_rev) + corr, 0, 1)
/// ```
pub fn rev_acc_from_dh<R: Real>(dh_rev: R, corr: Option<R>) -> R {
    if dh_rev.value() <= 0.0 {
        return dh_rev.lift(1.0);
    }
    let simple = (-dh_rev).exp_r();
    match corr {
        None => simple,
        Some(c) => (simple + c).max_const(0.0).min_const(1.0),
    }
}

/// `P(A_t = 1 | s_t)`: the probability that the forward kernel's indicator
/// was "accept" given only the post-transition state, evaluated literally by
/// integrating the dynamics backwards: `ΔH_rev = H(revHD(s_t)) − H(s_t)`.
///
/// In `Nn` mode a tanh-bounded correction net evaluated at
/// `(z_t, v_t, t, x)` is added before clipping to `[0, 1]`.
pub fn reverse_accept_prob(
    pot: &dyn Potential,
    s_t: &crate::leapfrog::PhaseState,
    binding: &MassBinding<f64>,
    eps: f64,
    n_leapfrog: usize,
    mode: RevAccMode,
    racc: Option<(&MlpSpec, &MlpParams<f64>)>,
    t: usize,
    x_feat: &[f64],
) -> Result<f64> {
    let cfg = LeapfrogConfig::new(eps, n_leapfrog, binding.mass_form());
    let rev = leapfrog_rev_hd(pot, s_t, &cfg)?;
    let h_rev = pot.energy(&rev.z)? + binding.kinetic(&rev.v);
    let h_here = pot.energy(&s_t.z)? + binding.kinetic(&s_t.v);
    let corr = corr_term(mode, racc, &s_t.z, &s_t.v, t, x_feat)?;
    Ok(rev_acc_from_dh(h_rev - h_here, corr))
}

/// Same probability computed from a recorded transition without
/// re-integrating: the reverse trajectory from `s_t` ends (up to integrator
/// round-off) on a state the forward pass already visited, so
///
/// ```text
/// accepted: revHD(s_t) = s*  → ΔH_rev = H* − H̃
/// rejected: revHD(s_t) = s̃  → ΔH_rev = H̃ − H*
/// ```
///
/// Diverged transitions report probability 0: their reverse trajectory
/// re-enters the divergent energy region.
pub fn reverse_accept_prob_from_record(
    rec: &StepRecord,
    mode: RevAccMode,
    racc: Option<(&MlpSpec, &MlpParams<f64>)>,
    t: usize,
    x_feat: &[f64],
) -> Result<f64> {
    if rec.diverged {
        return Ok(0.0);
    }
    let dh_rev = if rec.accepted { rec.h_star - rec.h_prop } else { rec.h_prop - rec.h_star };
    let corr = corr_term(mode, racc, &rec.s_new.z, &rec.s_new.v, t, x_feat)?;
    Ok(rev_acc_from_dh(dh_rev, corr))
}

fn corr_term(
    mode: RevAccMode,
    racc: Option<(&MlpSpec, &MlpParams<f64>)>,
    z: &[f64],
    v: &[f64],
    t: usize,
    x_feat: &[f64],
) -> Result<Option<f64>> {
    match mode {
        RevAccMode::Simple => Ok(None),
        RevAccMode::Nn => {
            let (spec, params) = racc.ok_or_else(|| {
                Error::Config("nn reverse-acceptance mode requires a correction net".into())
            })?;
            let mut inp = z.to_vec();
            inp.extend_from_slice(v);
            inp.push(t as f64);
            inp.extend_from_slice(x_feat);
            assert_eq!(inp.len(), spec.input, "reverse-acceptance net input width");
            Ok(Some(spec.forward(params, &inp)[0][0]))
        }
    }
}

/// Log-density of the tractable forward factors at a recorded transition:
/// the momentum-refresh density plus, when accept/reject is active, the
/// probability of the realized indicator (clamped inside the log).
pub fn forward_log_density(
    rec: &StepRecord,
    alpha: f64,
    binding: &MassBinding<f64>,
    with_acceptance: bool,
) -> Result<f64> {
    let qu = log_q_u(&rec.u, &rec.s_prev.v, alpha, binding)?;
    if !with_acceptance {
        return Ok(qu);
    }
    let branch = if rec.accepted {
        ln_clamped(rec.p_accept)
    } else {
        ln_clamped(1.0 - rec.p_accept)
    };
    Ok(qu + branch)
}

/// Log-density of the tractable reverse factors at a recorded transition:
/// the reverse momentum model `r_V(v_{t−1} | z_{t−1}, [u_{t−1}], t, x)`
/// evaluated at the recorded previous momentum, plus (when accept/reject is
/// active) the reverse indicator probability. `include_u_input` must match
/// how the model was constructed: the mixed momentum is an input only when
/// the partial update actually correlates `v_{t−1}` with `u_{t−1}` (α ≠ 0).
#[allow(clippy::too_many_arguments)]
pub fn reverse_log_density(
    rec: &StepRecord,
    t: usize,
    rv: (&MlpSpec, &MlpParams<f64>),
    include_u_input: bool,
    mode: RevAccMode,
    racc: Option<(&MlpSpec, &MlpParams<f64>)>,
    x_feat: &[f64],
    with_acceptance: bool,
) -> Result<f64> {
    let (spec, params) = rv;
    let mut inp = rec.s_prev.z.clone();
    if include_u_input {
        inp.extend_from_slice(&rec.u);
    }
    inp.push(t as f64);
    inp.extend_from_slice(x_feat);
    assert_eq!(inp.len(), spec.input, "reverse momentum model input width");
    let heads = spec.forward(params, &inp);
    let r_v = gauss_diag_logpdf(&rec.s_prev.v, &heads[0], &heads[1]);
    if !with_acceptance {
        return Ok(r_v);
    }
    let p_rev = reverse_accept_prob_from_record(rec, mode, racc, t, x_feat)?;
    let branch = if rec.accepted { ln_clamped(p_rev) } else { ln_clamped(1.0 - p_rev) };
    Ok(r_v + branch)
}

/// Verifies the state bookkeeping behind the symbolic point-mass
/// cancellation in the bound:
///
/// * accepted transitions (and every transition when accept/reject is off):
///   integrating backwards from `s_t` recovers the previous position within
///   [`DELTA_CHECK_TOL`];
/// * rejected transitions: the position is carried over exactly.
///
/// Returns `Ok(false)` on the first violation.
pub fn delta_cancellation_check(
    pot: &dyn Potential,
    trace: &ChainTrace,
    binding: &MassBinding<f64>,
    eps: f64,
    n_leapfrog: usize,
    with_acceptance: bool,
) -> Result<bool> {
    let mut prev_z = trace.s0.z.clone();
    for rec in &trace.steps {
        let consistent = if with_acceptance && !rec.accepted {
            rec.s_new.z == prev_z
        } else {
            let cfg = LeapfrogConfig::new(eps, n_leapfrog, binding.mass_form());
            let rev = leapfrog_rev_hd(pot, &rec.s_new, &cfg)?;
            rev.z.iter().zip(&prev_z).all(|(a, b)| (a - b).abs() <= DELTA_CHECK_TOL)
        };
        if !consistent {
            return Ok(false);
        }
        prev_z.clone_from(&rec.s_new.z);
    }
    Ok(true)
}

/// Assembly-time choices for one bound evaluation.
#[derive(Clone, Copy, Debug)]
pub struct BoundOptions {
    /// Whether the forward kernel runs Metropolis accept/reject.
    pub with_acceptance: bool,
    /// Statically-known α = 0. Enables the two simplifications below and
    /// removes the mixed momentum from the reverse model's inputs.
    pub alpha_is_zero: bool,
    /// Fix the first reverse momentum factor to the kinetic density and
    /// cancel it against `−log f_kin(v_0|x)` instead of learning the
    /// equality (α = 0 only).
    pub cancel_v0: bool,
    /// Reuse the per-step reverse momentum model at step index `T+1` as the
    /// final reverse model instead of learning a separate one (α = 0 only).
    pub merge_final: bool,
    /// Replace the sampled `−log q_0(z_0|x)` term by its closed-form
    /// expectation (the differential entropy of `q_0`) — the default. When
    /// off, the term is evaluated at the sampled point with the density
    /// parameters detached, so each sample contributes a genuinely
    /// stochastic (but unbiased) per-sample gradient. Detaching matters: a
    /// Gaussian log-density differentiated with live parameters at its own
    /// reparameterized sample collapses onto the entropy gradient exactly,
    /// leaving nothing stochastic to compare.
    pub entropy_q0: bool,
    /// Same substitution for every `−log f_kin(·|x)` momentum-density term
    /// (the initial draw when not cancelled, and each refresh). Split from
    /// `entropy_q0` so the momentum-term substitution can be exercised in
    /// isolation.
    pub entropy_fkin: bool,
    pub rev_acc: RevAccMode,
}

impl BoundOptions {
    /// Defaults for a given mixing mode: both α = 0 simplifications on when
    /// available, analytic entropies, simple reverse-acceptance model.
    pub fn standard(alpha_is_zero: bool, with_acceptance: bool) -> Self {
        Self {
            with_acceptance,
            alpha_is_zero,
            cancel_v0: alpha_is_zero,
            merge_final: alpha_is_zero,
            entropy_q0: true,
            entropy_fkin: true,
            rev_acc: RevAccMode::Simple,
        }
    }
}

/// Learned reverse-time models entering the bound.
pub struct BoundNets<'a, R: Real> {
    /// Per-step reverse momentum model `r_V(v_{t−1} | z_{t−1}, [u_{t−1}], t, x)`.
    pub rv: (&'a MlpSpec, &'a MlpParams<R>),
    /// Final reverse model `r_fin(v_T | z_T, x)`; `None` merges it into `rv`
    /// at step index `T+1` (requires `merge_final`).
    pub rv_final: Option<(&'a MlpSpec, &'a MlpParams<R>)>,
    /// Correction net for [`RevAccMode::Nn`].
    pub racc: Option<(&'a MlpSpec, &'a MlpParams<R>)>,
}

/// All randomness of one bound evaluation, pre-drawn so the estimate is a
/// deterministic function of the parameters (the basis for frozen-noise
/// finite-difference checks and common-random-number comparisons).
#[derive(Clone, Debug)]
pub struct SampleNoise {
    /// Standard normals for the reparameterized `z_0` draw.
    pub z0_eps: Vec<f64>,
    /// Initial-momentum normals and per-transition refresh/accept noise.
    pub chain: ChainNoise,
}

impl SampleNoise {
    pub fn draw<Rg: Rng>(d: usize, n_hmc: usize, rng: &mut Rg) -> Self {
        let z0_eps = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        Self { z0_eps, chain: ChainNoise::draw(d, n_hmc, rng) }
    }
}

/// Per-transition density bookkeeping (values as used in the assembled
/// bound, so entropy substitution and cancellations are reflected here;
/// cancelled factors are stored as 0).
#[derive(Clone, Debug, Serialize)]
pub struct StepDensities {
    /// Momentum-refresh log-density (expectation form when the entropy
    /// option is on).
    pub q_u_log: f64,
    pub p_acc: f64,
    /// Forward energy gap ΔH = H̃ − H* (sign determines every indicator
    /// branch; 0 for diverged transitions).
    pub dh: f64,
    pub i_acc: bool,
    pub diverged: bool,
    /// Reverse momentum model log-density at the previous momentum.
    pub r_v_log: f64,
    /// Reverse acceptance probability `P(A_t = 1 | s_t)` (1 when
    /// accept/reject is off).
    pub rev_acc_prob: f64,
    /// Total forward contribution: `q_u_log` + indicator branch factor.
    pub forward: f64,
    /// Total reverse contribution: `r_v_log` + reverse indicator factor.
    pub reverse: f64,
}

/// Decomposition of one assembled bound evaluation. Satisfies
///
/// ```text
/// l_aux = log_p_joint − log_q0 − log_fkin_v0 + log_r_final
///         + Σ_t (steps[t].reverse − steps[t].forward)
/// ```
///
/// up to summation order, with cancelled terms stored as 0. Serializable for
/// inspection and logging.
#[derive(Clone, Debug, Serialize)]
pub struct BoundTerms {
    pub log_p_joint: f64,
    /// `log q_0(z_0|x)` as used: the sampled value, or minus the entropy
    /// when the analytic option is on.
    pub log_q0: f64,
    pub log_fkin_v0: f64,
    pub log_r_final: f64,
    pub steps: Vec<StepDensities>,
    pub l_aux: f64,
    pub v0_cancelled: bool,
    pub final_merged: bool,
    pub entropy_q0: bool,
    pub entropy_fkin: bool,
}

impl BoundTerms {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Recompute `l_aux` from the stored decomposition.
    pub fn recombined(&self) -> f64 {
        let steps: f64 = self.steps.iter().map(|s| s.reverse - s.forward).sum();
        self.log_p_joint - self.log_q0 - self.log_fkin_v0 + self.log_r_final + steps
    }
}

/// Assembles one Monte Carlo evaluation of the auxiliary bound: runs the
/// chain from the given noise and accumulates every tractable log-density
/// factor. Generic over the scalar field; on a tape the returned scalar is
/// differentiable end-to-end through the chain, with the realized indicators
/// treated as fixed data.
///
/// `pot_fn` evaluates the potential `U(z) = −log p(x, z)`; `grad_fn` its
/// gradient. `x_feat` holds the conditioning features handed to the reverse
/// models (empty for unconditioned targets).
#[allow(clippy::too_many_arguments)]
pub fn assemble_bound<R, FU, FG>(
    pot_fn: &mut FU,
    grad_fn: &mut FG,
    q0: &GaussHead<R>,
    binding: &MassBinding<R>,
    eps: R,
    n_leapfrog: usize,
    alpha: R,
    n_hmc: usize,
    nets: &BoundNets<'_, R>,
    x_feat: &[R],
    noise: &SampleNoise,
    opt: &BoundOptions,
) -> Result<(R, BoundTerms)>
where
    R: Real,
    FU: FnMut(&[R]) -> Result<R>,
    FG: FnMut(&[R]) -> Result<Vec<R>>,
{
    let d = q0.dim();
    assert_eq!(binding.d(), d, "mass/latent dimension mismatch");
    assert_eq!(noise.z0_eps.len(), d, "z0 noise dimension mismatch");
    assert_eq!(noise.chain.init_eps.len(), d, "v0 noise dimension mismatch");
    assert_eq!(noise.chain.steps.len(), n_hmc, "chain noise length mismatch");
    if opt.alpha_is_zero {
        assert_eq!(alpha.value(), 0.0, "alpha_is_zero requires alpha = 0");
    } else {
        assert!(
            !opt.cancel_v0 && !opt.merge_final,
            "initial-momentum cancellation and final-model merge require alpha = 0"
        );
        let a2 = alpha.value() * alpha.value();
        if 1.0 - a2 < PROB_CLAMP {
            return Err(Error::Domain {
                op: "assemble_bound",
                msg: format!("|alpha| = {} is a degenerate momentum update", alpha.value().abs()),
            });
        }
    }
    if opt.cancel_v0 && n_hmc == 0 {
        assert!(
            opt.merge_final,
            "with no transitions the cancellation pairs the initial kinetic density \
             with the merged final model"
        );
    }
    if opt.merge_final {
        assert!(nets.rv_final.is_none(), "merge_final excludes a separate final model");
    } else {
        assert!(nets.rv_final.is_some(), "a separate final model is required unless merged");
    }
    if opt.rev_acc == RevAccMode::Nn {
        assert!(nets.racc.is_some(), "nn reverse-acceptance mode requires a correction net");
    }

    // Sampling pathway: reparameterized draws keep z0/v0 differentiable.
    let z0 = q0.sample_with(&noise.z0_eps);
    let v0 = binding.sample(&noise.chain.init_eps);

    let det_binding = binding.detached();
    let fkin_entropy_const = 0.5 * d as f64 * (LN_2PI + 1.0);
    // −log f_kin(v|x) as used by the bound: closed-form expectation, or the
    // sampled value with the mass detached (pathwise estimator).
    let neg_log_fkin = |v: &[R]| -> R {
        if opt.entropy_fkin {
            binding.log_det * 0.5 + fkin_entropy_const
        } else {
            -det_binding.log_density(v)
        }
    };
    let neg_log_q0 =
        if opt.entropy_q0 { q0.entropy() } else { -q0.logpdf_detached_params(&z0) };

    let mut terms: Vec<(String, R)> = Vec::with_capacity(4 + 4 * n_hmc);
    terms.push(("-log q0(z0|x)".into(), neg_log_q0));

    let log_fkin_v0_f = if opt.cancel_v0 {
        0.0
    } else {
        let nf = neg_log_fkin(&v0);
        terms.push(("-log f_kin(v0|x)".into(), nf));
        -nf.value()
    };

    // −(d/2)·log(1−α²), shared by every transition's refresh density.
    let alpha_pen: Option<R> =
        if opt.alpha_is_zero { None } else { Some(one_minus(alpha * alpha).ln_r() * (d as f64 * 0.5)) };

    let mut cur_z = z0;
    let mut cur_v = v0;
    let mut step_densities: Vec<StepDensities> = Vec::with_capacity(n_hmc);

    for (idx, step_noise) in noise.chain.steps.iter().enumerate() {
        let t = idx + 1;
        let out = hmc_step_g(
            &mut *pot_fn,
            &mut *grad_fn,
            &cur_z,
            &cur_v,
            binding,
            eps,
            n_leapfrog,
            alpha,
            opt.with_acceptance,
            step_noise,
        )?;

        // Forward refresh density log q_U(u_{t−1} | v_{t−1}, x), evaluated
        // through the retained kinetic sample (pathwise identical to the
        // change-of-variables form in `log_q_u`).
        let qu = {
            let lf = -neg_log_fkin(&out.v_samp);
            match &alpha_pen {
                Some(p) => lf - *p,
                None => lf,
            }
        };
        let mut forward_f = qu.value();
        terms.push((format!("forward[{t}].log_q_u"), -qu));

        let p_acc_f = out.p_accept.value();
        let mut rev_acc_f = 1.0;
        let mut reverse_f = 0.0;
        if opt.with_acceptance {
            let fwd_branch = if out.accepted {
                ln_clamped(out.p_accept)
            } else {
                ln_clamped(one_minus(out.p_accept))
            };
            forward_f += fwd_branch.value();
            terms.push((format!("forward[{t}].acc"), -fwd_branch));

            let p_rev: R = if out.diverged {
                alpha.lift(0.0)
            } else {
                let dh_rev = if out.accepted {
                    out.h_star - out.h_prop
                } else {
                    out.h_prop - out.h_star
                };
                let corr = match opt.rev_acc {
                    RevAccMode::Simple => None,
                    RevAccMode::Nn => {
                        let (spec, params) = nets.racc.expect("checked above");
                        let mut inp = out.new_z.clone();
                        inp.extend_from_slice(&out.new_v);
                        inp.push(alpha.lift(t as f64));
                        inp.extend_from_slice(x_feat);
                        assert_eq!(inp.len(), spec.input, "reverse-acceptance net input width");
                        Some(spec.forward(params, &inp)[0][0])
                    }
                };
                rev_acc_from_dh(dh_rev, corr)
            };
            rev_acc_f = p_rev.value();
            let rev_branch =
                if out.accepted { ln_clamped(p_rev) } else { ln_clamped(one_minus(p_rev)) };
            reverse_f += rev_branch.value();
            terms.push((format!("reverse[{t}].acc"), rev_branch));
        }

        let mut r_v_f = 0.0;
        if !(opt.cancel_v0 && t == 1) {
            let (spec, params) = nets.rv;
            let mut inp = cur_z.clone();
            if !opt.alpha_is_zero {
                inp.extend_from_slice(&out.u);
            }
            inp.push(alpha.lift(t as f64));
            inp.extend_from_slice(x_feat);
            assert_eq!(inp.len(), spec.input, "reverse momentum model input width");
            let heads = spec.forward(params, &inp);
            let r_v = gauss_diag_logpdf(&cur_v, &heads[0], &heads[1]);
            r_v_f = r_v.value();
            reverse_f += r_v_f;
            terms.push((format!("reverse[{t}].r_v"), r_v));
        }

        step_densities.push(StepDensities {
            q_u_log: qu.value(),
            p_acc: p_acc_f,
            dh: if out.diverged { 0.0 } else { out.h_prop.value() - out.h_star.value() },
            i_acc: out.accepted,
            diverged: out.diverged,
            r_v_log: r_v_f,
            rev_acc_prob: rev_acc_f,
            forward: forward_f,
            reverse: reverse_f,
        });
        cur_z = out.new_z;
        cur_v = out.new_v;
    }

    // Final reverse model r_fin(v_T | z_T, x). With the T = 0 cancellation
    // it is the other half of the cancelled pair and is dropped with it.
    let mut log_r_final_f = 0.0;
    if !(opt.cancel_v0 && n_hmc == 0) {
        let (spec, params) = match nets.rv_final {
            Some(sp) => sp,
            None => nets.rv,
        };
        let mut inp = cur_z.clone();
        inp.push(alpha.lift((n_hmc + 1) as f64));
        inp.extend_from_slice(x_feat);
        assert_eq!(inp.len(), spec.input, "final reverse model input width");
        let heads = spec.forward(params, &inp);
        let r_fin = gauss_diag_logpdf(&cur_v, &heads[0], &heads[1]);
        log_r_final_f = r_fin.value();
        terms.push(("log r_fin(v_T|z_T,x)".into(), r_fin));
    }

    let log_p = -pot_fn(&cur_z)?;
    terms.push(("log p(x,z_T)".into(), log_p));

    let vals: Vec<R> = terms.iter().map(|(_, v)| *v).collect();
    let l_aux = R::sum(&vals);
    if !l_aux.value().is_finite() {
        let msg = match terms.iter().find(|(_, v)| !v.value().is_finite()) {
            Some((name, v)) => format!("bound term {name} = {}", v.value()),
            None => "bound total is non-finite with finite terms".into(),
        };
        return Err(Error::NonFinite(msg));
    }

    let bt = BoundTerms {
        log_p_joint: log_p.value(),
        log_q0: -neg_log_q0.value(),
        log_fkin_v0: log_fkin_v0_f,
        log_r_final: log_r_final_f,
        steps: step_densities,
        l_aux: l_aux.value(),
        v0_cancelled: opt.cancel_v0,
        final_merged: opt.merge_final,
        entropy_q0: opt.entropy_q0,
        entropy_fkin: opt.entropy_fkin,
    };
    Ok((l_aux, bt))
}

/// Plain-`f64` assembly against a [`Potential`].
#[allow(clippy::too_many_arguments)]
pub fn assemble_bound_f64(
    pot: &dyn Potential,
    q0: &GaussHead<f64>,
    binding: &MassBinding<f64>,
    eps: f64,
    n_leapfrog: usize,
    alpha: f64,
    n_hmc: usize,
    nets: &BoundNets<'_, f64>,
    x_feat: &[f64],
    noise: &SampleNoise,
    opt: &BoundOptions,
) -> Result<(f64, BoundTerms)> {
    let d = pot.dim();
    let mut pot_fn = |z: &[f64]| pot.energy(z);
    let mut grad_fn = |z: &[f64]| {
        let mut g = vec![0.0; d];
        pot.grad(z, &mut g)?;
        Ok(g)
    };
    assemble_bound(
        &mut pot_fn,
        &mut grad_fn,
        q0,
        binding,
        eps,
        n_leapfrog,
        alpha,
        n_hmc,
        nets,
        x_feat,
        noise,
        opt,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Expr, GradAccum, Graph, ParamStore};
    use crate::hmc::{partial_update, run_chain_with_noise, HmcConfig};
    use crate::models::{racc_spec, rv_spec};
    use crate::potential::{ConjugateGaussJoint, GaussianMixture, IsoGauss};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn store_params(spec: &MlpSpec, store: &ParamStore) -> MlpParams<f64> {
        spec.params_from_store(store)
    }

    fn zero_init(spec: &MlpSpec, store: &mut ParamStore) {
        spec.zeros_into(store);
    }

    fn small_init(spec: &MlpSpec, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        spec.init_into(store, rng);
    }

    #[test]
    fn log_q_u_matches_reference_values() {
        let binding = MassBinding::identity_f64(1);
        // Pure refresh at the kinetic mode: standard normal log-density at 0.
        let v = log_q_u(&[0.0], &[0.0], 0.0, &binding).unwrap();
        assert_abs_diff_eq!(v, -0.918_938_533_204_672_7, epsilon = 1e-15);

        // Mixed update: u = 1, v_prev = 1, alpha = 0.6 recovers v_samp = 0.5.
        let v = log_q_u(&[1.0], &[1.0], 0.6, &binding).unwrap();
        assert_abs_diff_eq!(v, -0.820_794_981_890_462_9, epsilon = 1e-12);

        // At alpha = 0 the conditional density is the kinetic density itself.
        let u = [0.37, -1.2];
        let b2 = MassBinding::from_diag(&[0.8, 2.5]);
        let direct = b2.log_density(&u);
        let via_op = log_q_u(&u, &[9.0, -3.0], 0.0, &b2).unwrap();
        assert_abs_diff_eq!(via_op, direct, epsilon = 1e-13);
    }

    #[test]
    fn log_q_u_rejects_degenerate_mixing() {
        let binding = MassBinding::identity_f64(1);
        assert!(log_q_u(&[0.3], &[0.3], 1.0, &binding).is_err());
        assert!(log_q_u(&[0.3], &[0.3], -1.0, &binding).is_err());
    }

    #[test]
    fn log_q_u_consistent_with_retained_sample() {
        let binding = MassBinding::from_diag(&[0.5, 2.0, 1.3]);
        let alpha = 0.37;
        let v_prev = [0.4, -1.1, 2.2];
        let v_samp = [-0.8, 0.05, 1.4];
        let u = partial_update(&v_prev, &v_samp, alpha);
        let expected =
            binding.log_density(&v_samp) - 1.5 * (1.0 - alpha * alpha).ln();
        let got = log_q_u(&u, &v_prev, alpha, &binding).unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-10);
    }

    #[test]
    fn rev_acc_branch_arithmetic() {
        assert_eq!(rev_acc_from_dh(-0.3, None), 1.0);
        assert_eq!(rev_acc_from_dh(0.0, None), 1.0);
        assert_abs_diff_eq!(rev_acc_from_dh(1.0, None), (-1.0f64).exp(), epsilon = 1e-15);
        // Correction shifts the uphill branch, then clips.
        assert_abs_diff_eq!(
            rev_acc_from_dh(1.0, Some(0.2)),
            (-1.0f64).exp() + 0.2,
            epsilon = 1e-15
        );
        assert_eq!(rev_acc_from_dh(0.5, Some(0.9)), 1.0);
        assert_eq!(rev_acc_from_dh(2.0, Some(-1.0)), 0.0);
        // The downhill branch ignores the correction entirely.
        assert_eq!(rev_acc_from_dh(-0.1, Some(-0.7)), 1.0);
    }

    #[test]
    fn reverse_accept_prob_record_shortcut_matches_literal() {
        let pot = GaussianMixture::craters_2d();
        let binding = MassBinding::from_diag(&[1.3, 0.7]);
        let cfg = HmcConfig::new(8, 0.15, 6, 0.3, true);
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let noise = ChainNoise::draw(2, cfg.n_hmc, &mut rng);
        let trace = run_chain_with_noise(&pot, &[0.4, -0.6], &binding, &cfg, &noise).unwrap();
        assert!(trace.steps.iter().any(|r| r.accepted));
        assert!(trace.steps.iter().any(|r| !r.accepted));
        for (idx, rec) in trace.steps.iter().enumerate() {
            let t = idx + 1;
            let literal = reverse_accept_prob(
                &pot,
                &rec.s_new,
                &binding,
                cfg.eps,
                cfg.n_leapfrog,
                RevAccMode::Simple,
                None,
                t,
                &[],
            )
            .unwrap();
            let shortcut =
                reverse_accept_prob_from_record(rec, RevAccMode::Simple, None, t, &[]).unwrap();
            assert_abs_diff_eq!(literal, shortcut, epsilon = 1e-8);

            // A zero-initialized correction net leaves the simple value
            // untouched (tanh(0) = 0 and the clip is inactive inside [0, 1]).
            let spec = racc_spec(2, 0, &[3]);
            let mut store = ParamStore::new();
            zero_init(&spec, &mut store);
            let params = store_params(&spec, &store);
            let nn = reverse_accept_prob_from_record(
                rec,
                RevAccMode::Nn,
                Some((&spec, &params)),
                t,
                &[],
            )
            .unwrap();
            assert_abs_diff_eq!(nn, shortcut, epsilon = 1e-15);
        }
    }

    fn synthetic_record(p_accept: f64, accepted: bool, h_star: f64, h_prop: f64) -> StepRecord {
        use crate::leapfrog::PhaseState;
        StepRecord {
            s_prev: PhaseState::new(vec![0.2], vec![0.0]),
            v_samp: vec![0.0],
            u: vec![0.0],
            proposal: PhaseState::new(vec![0.5], vec![0.1]),
            h_star,
            h_prop,
            p_accept,
            accepted,
            diverged: false,
            s_new: PhaseState::new(vec![0.5], vec![-0.1]),
        }
    }

    #[test]
    fn forward_factor_reference_values() {
        let binding = MassBinding::identity_f64(1);
        // Certain acceptance contributes (up to the probability clamp) nothing.
        let rec = synthetic_record(1.0, true, 1.0, 0.5);
        let qu = log_q_u(&rec.u, &rec.s_prev.v, 0.0, &binding).unwrap();
        let fwd = forward_log_density(&rec, 0.0, &binding, true).unwrap();
        assert!((fwd - qu).abs() < 2e-12);

        // A rejection at p = e^{-1} adds log(1 − e^{-1}).
        let rec = synthetic_record((-1.0f64).exp(), false, 1.0, 2.0);
        let fwd = forward_log_density(&rec, 0.0, &binding, true).unwrap();
        assert_abs_diff_eq!(fwd - qu, -0.458_675_145_387_081_9, epsilon = 1e-12);

        // Without accept/reject only the refresh density remains.
        let fwd = forward_log_density(&rec, 0.0, &binding, false).unwrap();
        assert_abs_diff_eq!(fwd, qu, epsilon = 1e-15);
    }

    #[test]
    fn reverse_factor_reference_value() {
        // Rejected transition with a reverse energy gap of 0.5: the reverse
        // indicator factor is log(1 − e^{-1/2}).
        let rec = synthetic_record(0.3, false, 10.1, 10.6);
        let spec = rv_spec("rv", 1, 0, false, &[3]);
        let mut store = ParamStore::new();
        zero_init(&spec, &mut store);
        let params = store_params(&spec, &store);
        let total = reverse_log_density(
            &rec,
            1,
            (&spec, &params),
            false,
            RevAccMode::Simple,
            None,
            &[],
            true,
        )
        .unwrap();
        let without_branch = reverse_log_density(
            &rec,
            1,
            (&spec, &params),
            false,
            RevAccMode::Simple,
            None,
            &[],
            false,
        )
        .unwrap();
        assert_abs_diff_eq!(total - without_branch, -0.932_752_129_567_188_6, epsilon = 1e-12);
        // The zero-initialized model is a standard normal; v_prev = 0.
        assert_abs_diff_eq!(without_branch, -0.918_938_533_204_672_7, epsilon = 1e-14);
    }

    #[test]
    fn delta_check_accepts_valid_traces_and_flags_corruption() {
        let pot = GaussianMixture::craters_2d();
        let binding = MassBinding::from_diag(&[1.1, 0.9]);
        let cfg = HmcConfig::new(30, 0.2, 5, 0.4, true);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let noise = ChainNoise::draw(2, cfg.n_hmc, &mut rng);
        let trace = run_chain_with_noise(&pot, &[-1.5, 0.3], &binding, &cfg, &noise).unwrap();
        assert!(trace.steps.iter().any(|r| r.accepted));
        assert!(trace.steps.iter().any(|r| !r.accepted));
        assert!(delta_cancellation_check(&pot, &trace, &binding, cfg.eps, cfg.n_leapfrog, true)
            .unwrap());

        // Always-accept chains check every transition by reverse integration.
        let cfg_na = HmcConfig::new(10, 0.05, 5, 0.4, false);
        let noise_na = ChainNoise::draw(2, cfg_na.n_hmc, &mut rng);
        let trace_na =
            run_chain_with_noise(&pot, &[0.2, 0.1], &binding, &cfg_na, &noise_na).unwrap();
        assert!(delta_cancellation_check(
            &pot,
            &trace_na,
            &binding,
            cfg_na.eps,
            cfg_na.n_leapfrog,
            false
        )
        .unwrap());

        // Corrupting an accepted transition's end state breaks reverse recovery.
        let mut bad = trace.clone();
        let idx_acc = bad.steps.iter().position(|r| r.accepted).unwrap();
        bad.steps[idx_acc].s_new.z[0] += 1e-4;
        assert!(!delta_cancellation_check(&pot, &bad, &binding, cfg.eps, cfg.n_leapfrog, true)
            .unwrap());

        // Corrupting a rejected transition's carried-over position is caught
        // by the exact-equality branch.
        let mut bad = trace.clone();
        let idx_rej = bad.steps.iter().position(|r| !r.accepted).unwrap();
        bad.steps[idx_rej].s_new.z[1] += 1e-12;
        assert!(!delta_cancellation_check(&pot, &bad, &binding, cfg.eps, cfg.n_leapfrog, true)
            .unwrap());
    }

    /// With no transitions and both α = 0 simplifications the bound is the
    /// plain single-sample evidence lower bound, and the accept/reject flag
    /// is immaterial.
    #[test]
    fn collapses_to_elbo_without_transitions() {
        let pot = ConjugateGaussJoint { x: 0.0 };
        let q0 = GaussHead { mean: vec![0.3], logvar: vec![-0.2] };
        let binding = MassBinding::identity_f64(1);
        let spec = rv_spec("rv", 1, 0, false, &[3]);
        let mut store = ParamStore::new();
        zero_init(&spec, &mut store);
        let params = store_params(&spec, &store);
        let nets = BoundNets { rv: (&spec, &params), rv_final: None, racc: None };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let noise = SampleNoise::draw(1, 0, &mut rng);

        let mut opt = BoundOptions::standard(true, true);
        opt.entropy_q0 = false;
        opt.entropy_fkin = false;
        let (with_acc, bt) =
            assemble_bound_f64(&pot, &q0, &binding, 0.1, 2, 0.0, 0, &nets, &[], &noise, &opt)
                .unwrap();
        opt.with_acceptance = false;
        let (without_acc, _) =
            assemble_bound_f64(&pot, &q0, &binding, 0.1, 2, 0.0, 0, &nets, &[], &noise, &opt)
                .unwrap();
        assert_eq!(with_acc.to_bits(), without_acc.to_bits());

        let z0 = 0.3 + (-0.1f64).exp() * noise.z0_eps[0];
        let manual_logq = gauss_diag_logpdf(&[z0], &[0.3], &[-0.2]);
        let manual = -Potential::energy(&pot, &[z0]).unwrap() - manual_logq;
        assert_abs_diff_eq!(with_acc, manual, epsilon = 1e-12);
        assert_eq!(bt.log_fkin_v0, 0.0);
        assert_eq!(bt.log_r_final, 0.0);
        assert!(bt.steps.is_empty());

        // The analytic-entropy variant swaps the sampled log q0 for the
        // entropy and changes nothing else.
        opt.entropy_q0 = true;
        opt.entropy_fkin = true;
        let (analytic, bt2) =
            assemble_bound_f64(&pot, &q0, &binding, 0.1, 2, 0.0, 0, &nets, &[], &noise, &opt)
                .unwrap();
        let entropy = 0.5 * (LN_2PI + 1.0 - 0.2);
        assert_abs_diff_eq!(
            analytic,
            -Potential::energy(&pot, &[z0]).unwrap() + entropy,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(bt2.log_q0, -entropy, epsilon = 1e-15);
    }

    /// The q0 entropy closed form at unit variance, and agreement between the
    /// sampled average of −log f_kin and its entropy.
    #[test]
    fn entropy_terms_match_closed_forms() {
        let q0 = GaussHead { mean: vec![0.7], logvar: vec![0.0] };
        assert_abs_diff_eq!(q0.entropy(), 1.418_938_533_204_672_7, epsilon = 1e-15);

        let binding = MassBinding::identity_f64(2);
        let analytic = 0.5 * binding.log_det + 0.5 * 2.0 * (LN_2PI + 1.0);
        assert_abs_diff_eq!(analytic, 2.837_877_066_409_345_3, epsilon = 1e-15);

        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 100_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let eps: Vec<f64> = (0..2).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            let v = binding.sample(&eps);
            let nll = -binding.log_density(&v);
            sum += nll;
            sumsq += nll * nll;
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - analytic).abs() < 3.0 * se,
            "sampled {mean} vs analytic {analytic} (se {se})"
        );
    }

    fn conjugate_setup(
        alpha_is_zero: bool,
        rng: &mut ChaCha12Rng,
    ) -> (MlpSpec, Option<MlpSpec>, ParamStore) {
        let rv = rv_spec("rv", 1, 1, !alpha_is_zero, &[4]);
        let rv_final = if alpha_is_zero { None } else { Some(rv_spec("rvfin", 1, 1, false, &[4])) };
        let mut store = ParamStore::new();
        small_init(&rv, &mut store, rng);
        if let Some(f) = &rv_final {
            small_init(f, &mut store, rng);
        }
        (rv, rv_final, store)
    }

    /// Monte Carlo estimates of the bound stay below the true log evidence
    /// for arbitrary (untrained) reverse models, in both mixing regimes.
    #[test]
    fn conjugate_bound_stays_below_log_evidence() {
        let x = 1.0;
        let pot = ConjugateGaussJoint { x };
        let logp = pot.log_marginal();
        let q0 = GaussHead { mean: vec![0.2], logvar: vec![-0.4] };
        let binding = MassBinding::identity_f64(1);
        let mut rng = ChaCha12Rng::seed_from_u64(29);

        for &(alpha, with_acc) in &[(0.0, true), (0.0, false), (0.5, true)] {
            let alpha_is_zero = alpha == 0.0;
            let (rv, rv_final, store) = conjugate_setup(alpha_is_zero, &mut rng);
            let rv_params = store_params(&rv, &store);
            let rvf_params = rv_final.as_ref().map(|f| store_params(f, &store));
            let nets = BoundNets {
                rv: (&rv, &rv_params),
                rv_final: rv_final.as_ref().map(|f| (f, rvf_params.as_ref().unwrap())),
                racc: None,
            };
            let opt = BoundOptions::standard(alpha_is_zero, with_acc);
            let n = 2000;
            let (mut sum, mut sumsq) = (0.0, 0.0);
            for _ in 0..n {
                let noise = SampleNoise::draw(1, 2, &mut rng);
                let (l, _) = assemble_bound_f64(
                    &pot,
                    &q0,
                    &binding,
                    0.45,
                    4,
                    alpha,
                    2,
                    &nets,
                    &[x],
                    &noise,
                    &opt,
                )
                .unwrap();
                sum += l;
                sumsq += l * l;
            }
            let mean = sum / n as f64;
            let var = (sumsq / n as f64 - mean * mean).max(0.0);
            let se = (var / n as f64).sqrt();
            assert!(
                mean <= logp + 3.0 * se,
                "alpha {alpha} acc {with_acc}: bound {mean} exceeds evidence {logp} (se {se})"
            );
        }
    }

    /// Analytic-entropy and sampled modes estimate the same expectation:
    /// paired common-noise evaluations differ only by mean-zero noise.
    #[test]
    fn entropy_modes_agree_in_expectation() {
        let pot = ConjugateGaussJoint { x: 0.5 };
        let q0 = GaussHead { mean: vec![0.1], logvar: vec![-0.3] };
        let binding = MassBinding::from_diag(&[1.7]);
        let mut rng = ChaCha12Rng::seed_from_u64(53);
        let (rv, rv_final, store) = conjugate_setup(false, &mut rng);
        let rv_params = store_params(&rv, &store);
        let rvf_params = rv_final.as_ref().map(|f| store_params(f, &store));
        let nets = BoundNets {
            rv: (&rv, &rv_params),
            rv_final: rv_final.as_ref().map(|f| (f, rvf_params.as_ref().unwrap())),
            racc: None,
        };
        let mut on = BoundOptions::standard(false, true);
        let mut off = on;
        on.entropy_q0 = true;
        on.entropy_fkin = true;
        off.entropy_q0 = false;
        off.entropy_fkin = false;

        let n = 3000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let noise = SampleNoise::draw(1, 2, &mut rng);
            let args = |o: &BoundOptions| {
                assemble_bound_f64(
                    &pot, &q0, &binding, 0.4, 3, 0.45, 2, &nets, &[0.5], &noise, o,
                )
                .map(|(l, _)| l)
            };
            let diff = args(&on).unwrap() - args(&off).unwrap();
            sum += diff;
            sumsq += diff * diff;
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt().max(1e-12);
        assert!(
            mean.abs() < 3.0 * se,
            "entropy substitution shifted the estimate: mean diff {mean}, se {se}"
        );
    }

    /// When the first reverse momentum factor equals the kinetic density, the
    /// cancellation removes a pair of terms that offset exactly.
    #[test]
    fn v0_cancellation_is_exact_for_matching_reverse_model() {
        let pot = ConjugateGaussJoint { x: 0.0 };
        let q0 = GaussHead { mean: vec![-0.1], logvar: vec![0.1] };
        let binding = MassBinding::identity_f64(1);
        // Zero weights: r_V(·|·, t, x) = N(0, 1) = f_kin for every t.
        let rv = rv_spec("rv", 1, 1, false, &[4]);
        let mut store = ParamStore::new();
        zero_init(&rv, &mut store);
        let rv_params = store_params(&rv, &store);
        let nets = BoundNets { rv: (&rv, &rv_params), rv_final: None, racc: None };

        let mut cancel = BoundOptions::standard(true, true);
        cancel.entropy_q0 = false;
        cancel.entropy_fkin = false;
        let mut keep = cancel;
        keep.cancel_v0 = false;

        let mut rng = ChaCha12Rng::seed_from_u64(97);
        for _ in 0..50 {
            let noise = SampleNoise::draw(1, 2, &mut rng);
            let (lc, _) = assemble_bound_f64(
                &pot, &q0, &binding, 0.35, 3, 0.0, 2, &nets, &[0.0], &noise, &cancel,
            )
            .unwrap();
            let (lk, _) = assemble_bound_f64(
                &pot, &q0, &binding, 0.35, 3, 0.0, 2, &nets, &[0.0], &noise, &keep,
            )
            .unwrap();
            assert_abs_diff_eq!(lc, lk, epsilon = 1e-9);
        }
    }

    /// Cross-validation of the assembly against the standalone per-record
    /// density operations on a kernel-generated trace.
    #[test]
    fn assembly_matches_record_ops_on_kernel_trace() {
        let pot = IsoGauss { d: 2 };
        let q0 = GaussHead { mean: vec![0.4, -0.2], logvar: vec![-0.1, 0.2] };
        let binding = MassBinding::from_diag(&[1.2, 0.8]);
        let (eps, l, t_steps) = (0.3, 4, 3usize);
        let rv = rv_spec("rv", 2, 0, false, &[4]);
        let rvf = rv_spec("rvfin", 2, 0, false, &[4]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(61);
        small_init(&rv, &mut store, &mut rng);
        small_init(&rvf, &mut store, &mut rng);
        let rv_params = store_params(&rv, &store);
        let rvf_params = store_params(&rvf, &store);
        let nets =
            BoundNets { rv: (&rv, &rv_params), rv_final: Some((&rvf, &rvf_params)), racc: None };

        let mut opt = BoundOptions::standard(true, true);
        opt.cancel_v0 = false;
        opt.merge_final = false;
        opt.entropy_q0 = false;
        opt.entropy_fkin = false;

        let noise = SampleNoise::draw(2, t_steps, &mut rng);
        let (l_aux, bt) = assemble_bound_f64(
            &pot, &q0, &binding, eps, l, 0.0, t_steps, &nets, &[], &noise, &opt,
        )
        .unwrap();

        // Rebuild the same chain through the f64 kernel and recompute every
        // term with the standalone operations.
        let z0 = q0.sample_with(&noise.z0_eps);
        let cfg = HmcConfig::new(t_steps, eps, l, 0.0, true);
        let trace = run_chain_with_noise(&pot, &z0, &binding, &cfg, &noise.chain).unwrap();
        let v0 = binding.sample(&noise.chain.init_eps);
        let mut manual = -Potential::energy(&pot, trace.final_state().z.as_slice()).unwrap();
        manual -= q0.logpdf(&z0);
        manual -= binding.log_density(&v0);
        for (idx, rec) in trace.steps.iter().enumerate() {
            let t = idx + 1;
            manual -= forward_log_density(rec, 0.0, &binding, true).unwrap();
            manual += reverse_log_density(
                rec,
                t,
                (&rv, &rv_params),
                false,
                RevAccMode::Simple,
                None,
                &[],
                true,
            )
            .unwrap();
        }
        let zt = &trace.final_state().z;
        let vt = &trace.final_state().v;
        let mut inp = zt.clone();
        inp.push((t_steps + 1) as f64);
        let heads = rvf.forward(&rvf_params, &inp);
        manual += gauss_diag_logpdf(vt, &heads[0], &heads[1]);

        assert_abs_diff_eq!(l_aux, manual, epsilon = 1e-9);
        assert_abs_diff_eq!(bt.recombined(), l_aux, epsilon = 1e-9);
    }

    #[test]
    fn bound_terms_export_to_json() {
        let pot = ConjugateGaussJoint { x: 0.3 };
        let q0 = GaussHead { mean: vec![0.0], logvar: vec![0.0] };
        let binding = MassBinding::identity_f64(1);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let (rv, _, store) = conjugate_setup(true, &mut rng);
        let rv_params = store_params(&rv, &store);
        let nets = BoundNets { rv: (&rv, &rv_params), rv_final: None, racc: None };
        let opt = BoundOptions::standard(true, true);
        let noise = SampleNoise::draw(1, 3, &mut rng);
        let (_, bt) = assemble_bound_f64(
            &pot, &q0, &binding, 0.4, 3, 0.0, 3, &nets, &[0.3], &noise, &opt,
        )
        .unwrap();
        let json = bt.to_json().unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed["steps"].as_array().unwrap().len(), 3);
        assert!(parsed["l_aux"].is_number());
        assert_eq!(parsed["v0_cancelled"], serde_json::Value::Bool(true));
        assert_abs_diff_eq!(bt.recombined(), bt.l_aux, epsilon = 1e-9);
    }

    #[test]
    fn nonfinite_term_is_diagnosed_by_name() {
        let pot = ConjugateGaussJoint { x: 0.0 };
        let q0 = GaussHead { mean: vec![0.0], logvar: vec![0.0] };
        let binding = MassBinding::identity_f64(1);
        let rv = rv_spec("rv", 1, 0, false, &[2]);
        let mut store = ParamStore::new();
        zero_init(&rv, &mut store);
        // Driving the log-variance head to −2000 makes the reverse density
        // evaluate exp(+2000) in its quadratic term: an infinite bound term.
        // (The output layer stacks the mean and log-variance heads; index 1
        // is the log-variance bias for d = 1.)
        store.block_mut("rv.b1")[1] = -2000.0;
        let rv_params = store_params(&rv, &store);
        let nets = BoundNets { rv: (&rv, &rv_params), rv_final: None, racc: None };
        let mut opt = BoundOptions::standard(true, false);
        opt.cancel_v0 = false;
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let noise = SampleNoise::draw(1, 1, &mut rng);
        let err = assemble_bound_f64(
            &pot, &q0, &binding, 0.3, 2, 0.0, 1, &nets, &[], &noise, &opt,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("reverse[1].r_v"), "unexpected diagnostic: {msg}");
    }

    /// End-to-end tape gradients against frozen-noise central differences of
    /// the f64 assembly, through every learnable surface at once: initial
    /// distribution, mass, step size, mixing coefficient, reverse momentum
    /// models, and the acceptance correction net.
    #[test]
    fn gradients_match_frozen_noise_finite_differences() {
        let x = 0.7;
        let pot = ConjugateGaussJoint { x };
        let (t_steps, l) = (2usize, 3usize);

        let rv = rv_spec("rv", 1, 1, true, &[4]);
        let rvf = rv_spec("rvfin", 1, 1, false, &[4]);
        let racc = racc_spec(1, 1, &[4]);
        let mut store = ParamStore::new();
        store.add_block("q0.mean", vec![0.2]);
        store.add_block("q0.logvar", vec![-0.3]);
        store.add_block("mass.logdiag", vec![0.15]);
        store.add_block("step.raw_eps", vec![(0.32f64).ln()]);
        store.add_block("step.raw_alpha", vec![0.4]);
        let mut rng = ChaCha12Rng::seed_from_u64(1213);
        small_init(&rv, &mut store, &mut rng);
        small_init(&rvf, &mut store, &mut rng);
        small_init(&racc, &mut store, &mut rng);

        let opt = BoundOptions {
            with_acceptance: true,
            alpha_is_zero: false,
            cancel_v0: false,
            merge_final: false,
            entropy_q0: true,
            entropy_fkin: true,
            rev_acc: RevAccMode::Nn,
        };
        let noise = SampleNoise::draw(1, t_steps, &mut rng);

        let eval = |s: &ParamStore| -> f64 {
            let q0 =
                GaussHead { mean: s.block("q0.mean").to_vec(), logvar: s.block("q0.logvar").to_vec() };
            let binding = MassBinding::from_diag(&[s.block("mass.logdiag")[0].exp()]);
            let eps = s.block("step.raw_eps")[0].exp();
            let alpha = s.block("step.raw_alpha")[0].tanh();
            let rv_params = rv.params_from_store(s);
            let rvf_params = rvf.params_from_store(s);
            let racc_params = racc.params_from_store(s);
            let nets = BoundNets {
                rv: (&rv, &rv_params),
                rv_final: Some((&rvf, &rvf_params)),
                racc: Some((&racc, &racc_params)),
            };
            let (lv, _) = assemble_bound_f64(
                &pot, &q0, &binding, eps, l, alpha, t_steps, &nets, &[x], &noise, &opt,
            )
            .unwrap();
            lv
        };

        // Kink margins at the base point: no indicator, clip, or branch sits
        // close enough to its threshold for the finite-difference probes to
        // cross it.
        {
            let q0 = GaussHead {
                mean: store.block("q0.mean").to_vec(),
                logvar: store.block("q0.logvar").to_vec(),
            };
            let binding = MassBinding::from_diag(&[store.block("mass.logdiag")[0].exp()]);
            let eps = store.block("step.raw_eps")[0].exp();
            let alpha = store.block("step.raw_alpha")[0].tanh();
            let rv_params = rv.params_from_store(&store);
            let rvf_params = rvf.params_from_store(&store);
            let racc_params = racc.params_from_store(&store);
            let nets = BoundNets {
                rv: (&rv, &rv_params),
                rv_final: Some((&rvf, &rvf_params)),
                racc: Some((&racc, &racc_params)),
            };
            let (_, bt) = assemble_bound_f64(
                &pot, &q0, &binding, eps, l, alpha, t_steps, &nets, &[x], &noise, &opt,
            )
            .unwrap();
            for (s, n) in bt.steps.iter().zip(&noise.chain.steps) {
                assert!(!s.diverged);
                assert!((n.accept_u - s.p_acc).abs() > 1e-3, "indicator margin too small");
                // The energy gap drives the acceptance kink and the reverse
                // branch point alike; keep both away from zero.
                assert!(s.dh.abs() > 1e-3, "energy gap sits on a branch point");
                // When the reverse probability is on its exp+clip branch, it
                // must sit strictly inside the clip interval.
                let dh_rev = if s.i_acc { -s.dh } else { s.dh };
                if dh_rev > 0.0 {
                    assert!(
                        s.rev_acc_prob > 1e-3 && s.rev_acc_prob < 1.0 - 1e-3,
                        "reverse acceptance sits on a clip boundary"
                    );
                }
            }
        }

        // Tape evaluation and adjoints.
        let g = Graph::new();
        store.bind_all(&g);
        let q0_t = GaussHead::<Expr> {
            mean: g.bind_block("q0.mean", store.block("q0.mean")).clone(),
            logvar: g.bind_block("q0.logvar", store.block("q0.logvar")).clone(),
        };
        let m_t = MassBinding::from_m(
            g.bind_block("mass.logdiag", store.block("mass.logdiag"))
                .iter()
                .map(|e| e.exp_r())
                .collect(),
        );
        let eps_t = g.bind_block("step.raw_eps", store.block("step.raw_eps"))[0].exp_r();
        let alpha_t = g.bind_block("step.raw_alpha", store.block("step.raw_alpha"))[0].tanh_r();
        let rv_t = rv.bind(&g, &store);
        let rvf_t = rvf.bind(&g, &store);
        let racc_t = racc.bind(&g, &store);
        let nets_t = BoundNets {
            rv: (&rv, &rv_t),
            rv_final: Some((&rvf, &rvf_t)),
            racc: Some((&racc, &racc_t)),
        };
        let x_t = vec![g.constant(x)];
        let mut pot_fn = crate::leapfrog::tape_energy(&g, &pot);
        let mut grad_fn = crate::leapfrog::tape_grad(&g, &pot);
        let (l_t, _) = assemble_bound(
            &mut pot_fn,
            &mut grad_fn,
            &q0_t,
            &m_t,
            eps_t,
            l,
            alpha_t,
            t_steps,
            &nets_t,
            &x_t,
            &noise,
            &opt,
        )
        .unwrap();
        assert_eq!(l_t.value().to_bits(), eval(&store).to_bits(), "tape/plain value parity");

        let adj = g.backward(l_t);
        let mut grads = GradAccum::zeros_like(&store);
        grads.accumulate(&store, &g, &adj, 1.0);

        // Central differences per coordinate.
        let names: Vec<String> = store.names().to_vec();
        let mut checked = 0usize;
        for name in &names {
            let dim = store.block(name).len();
            for i in 0..dim {
                let base = store.block(name)[i];
                let h = 1e-5 * base.abs().max(1.0);
                let mut s2 = store.clone();
                s2.block_mut(name)[i] = base + h;
                let up = eval(&s2);
                s2.block_mut(name)[i] = base - h;
                let down = eval(&s2);
                let fd = (up - down) / (2.0 * h);
                let ad = grads.block(&store, name)[i];
                let denom = fd.abs().max(ad.abs()).max(1e-6);
                assert!(
                    (fd - ad).abs() / denom < 1e-4,
                    "{name}[{i}]: fd {fd} vs tape {ad}"
                );
                checked += 1;
            }
        }
        assert!(checked > 80, "expected to sweep every parameter, swept {checked}");
    }
}
