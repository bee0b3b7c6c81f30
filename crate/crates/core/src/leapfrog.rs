//! Leapfrog integration of Hamilton's equations for H(z, v) = U(z) + K(v),
//! K(v) = vᵀM⁻¹v/2, forward and time-reversed, with fused half-kicks.
//!
//! The integrator is generic over the scalar field: `f64` for simulation and
//! tape expressions for training graphs, where the gradient of the energy is
//! emitted as graph nodes so parameter derivatives flow through the whole
//! trajectory.
//!
//! Arithmetic-ordering contract (load-bearing for tests): an L-step
//! trajectory performs the half-kick with step ε/2, then L drifts separated
//! by *two consecutive* half-kicks each — never a single fused full kick —
//! so an L-step call is bit-identical to L chained single-step calls.

use crate::autodiff::Real;
use crate::potential::Potential;
use crate::{Error, Result};
use std::io::Write;

/// Any |coordinate| beyond this (or any non-finite value) aborts the
/// trajectory as a divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

/// A position/momentum pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseState {
    pub z: Vec<f64>,
    pub v: Vec<f64>,
}

impl PhaseState {
    pub fn new(z: Vec<f64>, v: Vec<f64>) -> Self {
        assert_eq!(z.len(), v.len(), "position/momentum dimension mismatch");
        assert!(
            z.iter().chain(v.iter()).all(|x| x.is_finite()),
            "phase state must be finite"
        );
        Self { z, v }
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    /// (z, v) ↦ (z, −v).
    pub fn flip(&self) -> Self {
        Self {
            z: self.z.clone(),
            v: self.v.iter().map(|x| -x).collect(),
        }
    }
}

/// Inverse-mass action used by the integrator. Simulation and training
/// configurations only ever construct the diagonal forms; the dense form
/// exists for the coordinate-rescaling equivalence harness.
#[derive(Clone, Copy, Debug)]
pub enum MassForm<'a, R: Real> {
    /// M = I.
    DiagUnit,
    /// Diagonal M⁻¹ (slice of length d).
    Diag(&'a [R]),
    /// Dense row-major M⁻¹ (d×d); harness-only, not reachable from configs.
    Dense(&'a [f64]),
}

impl<'a, R: Real> MassForm<'a, R> {
    /// M⁻¹ v.
    pub fn apply_inv(&self, v: &[R]) -> Vec<R> {
        match self {
            MassForm::DiagUnit => v.to_vec(),
            MassForm::Diag(inv) => {
                debug_assert_eq!(inv.len(), v.len());
                v.iter().zip(inv.iter()).map(|(&x, &m)| x * m).collect()
            }
            MassForm::Dense(inv) => {
                let d = v.len();
                debug_assert_eq!(inv.len(), d * d);
                (0..d)
                    .map(|r| {
                        let terms: Vec<R> =
                            (0..d).map(|c| v[c] * inv[r * d + c]).collect();
                        R::sum(&terms)
                    })
                    .collect()
            }
        }
    }

    /// K(v) = vᵀM⁻¹v/2.
    pub fn kinetic(&self, v: &[R]) -> R {
        let mv = self.apply_inv(v);
        R::dot(v, &mv) * 0.5
    }
}

/// Integrator configuration; the mass reference is borrowed because trained
/// masses live on the caller's tape.
#[derive(Clone, Copy, Debug)]
pub struct LeapfrogConfig<'a, R: Real> {
    /// Step size ε > 0.
    pub eps: R,
    /// Number of leapfrog steps L ≥ 1.
    pub n_steps: usize,
    pub mass: MassForm<'a, R>,
}

impl<'a, R: Real> LeapfrogConfig<'a, R> {
    pub fn new(eps: R, n_steps: usize, mass: MassForm<'a, R>) -> Self {
        assert!(eps.value() > 0.0, "step size must be positive");
        assert!(n_steps >= 1, "need at least one step");
        Self { eps, n_steps, mass }
    }

    pub fn unit(eps: R, n_steps: usize) -> Self {
        Self::new(eps, n_steps, MassForm::DiagUnit)
    }
}

fn check_coords<R: Real>(xs: &[R], what: &str, step: usize) -> Result<()> {
    for (i, x) in xs.iter().enumerate() {
        let v = x.value();
        if !v.is_finite() || v.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence(format!(
                "trajectory diverged at step {step}: {what}[{i}] = {v}"
            )));
        }
    }
    Ok(())
}

/// L fused leapfrog steps, in place, generic over the scalar field.
///
/// `grad_u` evaluates ∇U; it is called L+1 times. On tapes it should emit
/// gradient nodes so the result stays differentiable end to end.
pub fn leapfrog_hd_g<R, F>(
    grad_u: &mut F,
    z: &mut Vec<R>,
    v: &mut Vec<R>,
    cfg: &LeapfrogConfig<'_, R>,
) -> Result<()>
where
    R: Real,
    F: FnMut(&[R]) -> Result<Vec<R>>,
{
    debug_assert_eq!(z.len(), v.len());
    let half = cfg.eps * 0.5;
    let kick = |v: &mut Vec<R>, g: &[R]| {
        for (vi, gi) in v.iter_mut().zip(g.iter()) {
            *vi = *vi - half * *gi;
        }
    };

    let mut g = grad_u(z)?;
    kick(v, &g);
    check_coords(v, "v", 0)?;
    for step in 1..=cfg.n_steps {
        let mv = cfg.mass.apply_inv(v);
        for (zi, mvi) in z.iter_mut().zip(mv.iter()) {
            *zi = *zi + cfg.eps * *mvi;
        }
        check_coords(z, "z", step)?;
        g = grad_u(z)?;
        kick(v, &g);
        if step < cfg.n_steps {
            // second half-kick of the fused pair, same gradient
            kick(v, &g);
        }
        check_coords(v, "v", step)?;
    }
    Ok(())
}

/// Time-reversed trajectory: flip momentum, integrate forward, flip back.
/// Exact inverse of [`leapfrog_hd_g`] up to floating-point round-off.
pub fn leapfrog_rev_hd_g<R, F>(
    grad_u: &mut F,
    z: &mut Vec<R>,
    v: &mut Vec<R>,
    cfg: &LeapfrogConfig<'_, R>,
) -> Result<()>
where
    R: Real,
    F: FnMut(&[R]) -> Result<Vec<R>>,
{
    for vi in v.iter_mut() {
        *vi = -*vi;
    }
    leapfrog_hd_g(grad_u, z, v, cfg)?;
    for vi in v.iter_mut() {
        *vi = -*vi;
    }
    Ok(())
}

/// Gradient evaluator for tape-valued trajectories: builds the energy on the
/// graph and emits its gradient as nodes, keeping everything differentiable.
pub fn tape_grad<'g>(
    g: &'g crate::autodiff::Graph,
    pot: &'g dyn Potential,
) -> impl FnMut(&[crate::autodiff::Expr<'g>]) -> Result<Vec<crate::autodiff::Expr<'g>>> + 'g {
    move |q: &[crate::autodiff::Expr<'g>]| {
        let u = pot.build_energy(g, q);
        Ok(g.grad_nodes(u, q))
    }
}

/// Potential evaluation as tape nodes; companion to [`tape_grad`] (a named
/// function because closure lifetime inference cannot relate the borrowed
/// argument slice to the returned expression's graph lifetime).
pub fn tape_energy<'g>(
    g: &'g crate::autodiff::Graph,
    pot: &'g dyn Potential,
) -> impl FnMut(&[crate::autodiff::Expr<'g>]) -> Result<crate::autodiff::Expr<'g>> + 'g {
    move |q: &[crate::autodiff::Expr<'g>]| Ok(pot.build_energy(g, q))
}

fn grad_closure<'p>(
    pot: &'p dyn Potential,
) -> impl FnMut(&[f64]) -> Result<Vec<f64>> + 'p {
    let mut buf = vec![0.0; pot.dim()];
    move |z: &[f64]| {
        pot.grad(z, &mut buf)?;
        Ok(buf.clone())
    }
}

/// L leapfrog steps of the given potential's Hamiltonian flow.
pub fn leapfrog_hd(
    pot: &dyn Potential,
    s: &PhaseState,
    cfg: &LeapfrogConfig<'_, f64>,
) -> Result<PhaseState> {
    let mut z = s.z.clone();
    let mut v = s.v.clone();
    leapfrog_hd_g(&mut grad_closure(pot), &mut z, &mut v, cfg)?;
    Ok(PhaseState { z, v })
}

/// The same flow run backwards in time.
pub fn leapfrog_rev_hd(
    pot: &dyn Potential,
    s: &PhaseState,
    cfg: &LeapfrogConfig<'_, f64>,
) -> Result<PhaseState> {
    let mut z = s.z.clone();
    let mut v = s.v.clone();
    leapfrog_rev_hd_g(&mut grad_closure(pot), &mut z, &mut v, cfg)?;
    Ok(PhaseState { z, v })
}

/// One leapfrog step through an independent arithmetic path (direct
/// position-update form):
///   z' = z + ε M⁻¹ v − (ε²/2) M⁻¹ ∇U(z)
///   v' = v − (ε/2)(∇U(z) + ∇U(z'))
/// Kept as a cross-formulation oracle; agrees with [`leapfrog_hd`] at L=1
/// to ~1e-12 (different rounding, same map).
pub fn alt_leapfrog_step(
    pot: &dyn Potential,
    s: &PhaseState,
    cfg: &LeapfrogConfig<'_, f64>,
) -> Result<PhaseState> {
    let d = s.dim();
    let eps = cfg.eps;
    let mut g0 = vec![0.0; d];
    pot.grad(&s.z, &mut g0)?;
    let mv = cfg.mass.apply_inv(&s.v);
    let mg = cfg.mass.apply_inv(&g0);
    let z1: Vec<f64> = (0..d)
        .map(|i| s.z[i] + eps * mv[i] - 0.5 * eps * eps * mg[i])
        .collect();
    check_coords(&z1, "z", 1)?;
    let mut g1 = vec![0.0; d];
    pot.grad(&z1, &mut g1)?;
    let v1: Vec<f64> = (0..d)
        .map(|i| s.v[i] - 0.5 * eps * (g0[i] + g1[i]))
        .collect();
    check_coords(&v1, "v", 1)?;
    Ok(PhaseState { z: z1, v: v1 })
}

/// One record per visited state, step 0 (the start) included.
#[derive(Clone, Debug)]
pub struct TrajRecord {
    pub step: usize,
    pub z: Vec<f64>,
    pub v: Vec<f64>,
    pub potential: f64,
    pub kinetic: f64,
    pub hamiltonian: f64,
}

/// Integrate and record every intermediate state with its energy split.
pub fn leapfrog_trajectory(
    pot: &dyn Potential,
    s: &PhaseState,
    cfg: &LeapfrogConfig<'_, f64>,
) -> Result<Vec<TrajRecord>> {
    let mut out = Vec::with_capacity(cfg.n_steps + 1);
    let mut record = |step: usize, z: &[f64], v: &[f64]| -> Result<()> {
        let u = pot.energy(z)?;
        let k = cfg.mass.kinetic(v);
        out.push(TrajRecord {
            step,
            z: z.to_vec(),
            v: v.to_vec(),
            potential: u,
            kinetic: k,
            hamiltonian: u + k,
        });
        Ok(())
    };
    record(0, &s.z, &s.v)?;
    let mut cur = s.clone();
    let one = LeapfrogConfig { eps: cfg.eps, n_steps: 1, mass: cfg.mass };
    for step in 1..=cfg.n_steps {
        cur = leapfrog_hd(pot, &cur, &one)?;
        record(step, &cur.z, &cur.v)?;
    }
    Ok(out)
}

/// CSV dump: `step,z0..z{d-1},v0..v{d-1},U,K,H`.
pub fn write_trajectory_csv<W: Write>(w: &mut W, records: &[TrajRecord]) -> std::io::Result<()> {
    let d = records.first().map_or(0, |r| r.z.len());
    let mut header = String::from("step");
    for i in 0..d {
        header.push_str(&format!(",z{i}"));
    }
    for i in 0..d {
        header.push_str(&format!(",v{i}"));
    }
    header.push_str(",U,K,H");
    writeln!(w, "{header}")?;
    for r in records {
        let mut line = r.step.to_string();
        for x in r.z.iter().chain(r.v.iter()) {
            line.push_str(&format!(",{x:.17e}"));
        }
        line.push_str(&format!(
            ",{:.17e},{:.17e},{:.17e}",
            r.potential, r.kinetic, r.hamiltonian
        ));
        writeln!(w, "{line}")?;
    }
    Ok(())
}
