//! Damped second-order time stepping, `ẋ = v`, `v̇ = F(x) − γ v`.
//!
//! The steppers are generic over [`StateTensor`], so the same code advances
//! plain arrays at inference time and recorded graph nodes during training,
//! where the whole rollout has to stay differentiable.

use popmech_autodiff::{Array, Var};
use serde::{Deserialize, Serialize};

use crate::energy::EnergyModel;
use crate::error::{Error, Result};

/// What a stepper needs from positions and velocities.
pub trait StateTensor: Clone {
    /// Type of the friction coefficient; a graph node when γ is learned.
    type Scalar: Clone;

    /// `self + alpha · other`.
    fn axpy(&self, alpha: f64, other: &Self) -> Result<Self>;

    /// `self · exp(−γ τ)`.
    fn damp(&self, gamma: &Self::Scalar, tau: f64) -> Result<Self>;

    fn all_finite(&self) -> bool;
}

impl StateTensor for Array {
    type Scalar = f64;

    fn axpy(&self, alpha: f64, other: &Self) -> Result<Self> {
        Ok(self.zip_map(other, |a, b| a + alpha * b)?)
    }

    fn damp(&self, gamma: &f64, tau: f64) -> Result<Self> {
        if *gamma == 0.0 {
            return Ok(self.clone());
        }
        let f = (-gamma * tau).exp();
        Ok(self.map(|a| a * f))
    }

    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl<'g> StateTensor for Var<'g> {
    type Scalar = Var<'g>;

    fn axpy(&self, alpha: f64, other: &Self) -> Result<Self> {
        Ok(self.add(other.scale(alpha))?)
    }

    fn damp(&self, gamma: &Var<'g>, tau: f64) -> Result<Self> {
        if !gamma.requires_grad() && gamma.item() == 0.0 {
            return Ok(*self);
        }
        Ok(self.mul(gamma.scale(-tau).exp())?)
    }

    fn all_finite(&self) -> bool {
        self.value().is_finite()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Kick–drift–kick Verlet wrapped in half-step exponential damping.
    #[default]
    DampedVelocityVerlet,
    /// `v ← (v + dt·F(x)) e^{−γ dt}`, then `x ← x + dt·v`.
    SemiImplicitEuler,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    /// Steps per interval between consecutive snapshot times.
    pub substeps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::DampedVelocityVerlet,
            substeps: 5,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.substeps == 0 {
            return Err(Error::config("/integrator/substeps", "must be ≥ 1"));
        }
        Ok(())
    }
}

/// Positions, velocities and time of a simulated population.
#[derive(Clone, Debug)]
pub struct MechState<T> {
    pub x: T,
    pub v: T,
    pub t: f64,
}

/// Advances one step of size `dt`.
///
/// `force` returns the conservative part of the acceleration only; damping
/// is applied by the stepper. For the Verlet scheme the force at the new
/// position is returned so the next step can reuse it, which makes every
/// step after the first cost exactly one force evaluation.
pub fn step<T, F>(
    scheme: Scheme,
    state: &MechState<T>,
    force: &mut F,
    gamma: &T::Scalar,
    dt: f64,
    cached: Option<T>,
) -> Result<(MechState<T>, Option<T>)>
where
    T: StateTensor,
    F: FnMut(&T, f64) -> Result<T>,
{
    match scheme {
        Scheme::DampedVelocityVerlet => {
            let a = match cached {
                Some(a) => a,
                None => force(&state.x, state.t)?,
            };
            let v = state.v.damp(gamma, 0.5 * dt)?.axpy(0.5 * dt, &a)?;
            let x = state.x.axpy(dt, &v)?;
            let t = state.t + dt;
            let a_new = force(&x, t)?;
            let v = v.axpy(0.5 * dt, &a_new)?.damp(gamma, 0.5 * dt)?;
            Ok((MechState { x, v, t }, Some(a_new)))
        }
        Scheme::SemiImplicitEuler => {
            let a = force(&state.x, state.t)?;
            let v = state.v.axpy(dt, &a)?.damp(gamma, dt)?;
            let x = state.x.axpy(dt, &v)?;
            Ok((MechState { x, v, t: state.t + dt }, None))
        }
    }
}

/// Rolls out through consecutive interval boundaries.
///
/// Returns `boundaries.len() + 1` states: the initial one and one at each
/// boundary. Each interval is covered by `substeps` equal steps.
pub fn rollout<T, F>(
    scheme: Scheme,
    state0: MechState<T>,
    force: &mut F,
    gamma: &T::Scalar,
    boundaries: &[f64],
    substeps: usize,
) -> Result<Vec<MechState<T>>>
where
    T: StateTensor,
    F: FnMut(&T, f64) -> Result<T>,
{
    if substeps == 0 {
        return Err(Error::config("/integrator/substeps", "must be ≥ 1"));
    }
    let mut out = Vec::with_capacity(boundaries.len() + 1);
    let mut state = state0;
    let mut cached = None;
    out.push(state.clone());
    for (k, &tb) in boundaries.iter().enumerate() {
        let dt = (tb - state.t) / substeps as f64;
        for s in 0..substeps {
            let (next, a) = step(scheme, &state, force, gamma, dt, cached.take())?;
            if !next.x.all_finite() || !next.v.all_finite() {
                return Err(Error::non_finite("state", format!("interval {k}, step {s}")));
            }
            state = next;
            cached = a;
        }
        state.t = tb;
        out.push(state.clone());
    }
    Ok(out)
}

/// Rollout of an energy model on plain arrays.
pub fn rollout_model(
    model: &EnergyModel,
    gamma: f64,
    cfg: &IntegratorConfig,
    state0: MechState<Array>,
    boundaries: &[f64],
) -> Result<Vec<MechState<Array>>> {
    cfg.validate()?;
    let mut force = |x: &Array, t: f64| model.force(x, Some(t));
    rollout(cfg.scheme, state0, &mut force, &gamma, boundaries, cfg.substeps)
}

/// Per-state energy bookkeeping along a trajectory.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Diagnostics {
    pub times: Vec<f64>,
    /// `½ · mean ‖v‖²`.
    pub kinetic: Vec<f64>,
    /// `Ψ(X)`, zero when no energy is supplied.
    pub potential: Vec<f64>,
    pub total: Vec<f64>,
    /// `max |H − H₀| / |H₀|` (absolute when `H₀ = 0`).
    pub max_rel_drift: f64,
}

pub fn diagnostics(traj: &[MechState<Array>], model: Option<&EnergyModel>) -> Result<Diagnostics> {
    if traj.is_empty() {
        return Err(Error::data("diagnostics", "empty trajectory"));
    }
    let mut d = Diagnostics::default();
    for s in traj {
        let n = s.v.rows().max(1) as f64;
        let ke = 0.5 * s.v.data().iter().map(|v| v * v).sum::<f64>() / n;
        let pe = match model {
            Some(m) => m.energy(&s.x, Some(s.t))?,
            None => 0.0,
        };
        d.times.push(s.t);
        d.kinetic.push(ke);
        d.potential.push(pe);
        d.total.push(ke + pe);
    }
    let h0 = d.total[0];
    let denom = if h0 == 0.0 { 1.0 } else { h0.abs() };
    d.max_rel_drift = d.total.iter().map(|h| (h - h0).abs() / denom).fold(0.0, f64::max);
    Ok(d)
}
