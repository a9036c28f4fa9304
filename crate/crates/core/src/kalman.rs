//! Discretized Kalman-Bucy reference filter for linear models.
//!
//! Mean and covariance follow the Euler recursions
//!
//! ```text
//! m' = m + A m Δ + P C^T R^{-1} (ΔY - C m Δ)
//! P' = P + Ricc(P) Δ + (A - P S) P (A^T - S P) Δ²
//! ```
//!
//! which are exactly the moments of the i.i.d. particle system that uses
//! `P` itself in the gain. That system is provided as an oracle.

use nalgebra::{DMatrix, DVector, DVectorView};
use num_traits::Float;

use crate::enkbf::{log_nc_increment, particle_mean, perturbed_update, LogNCAccumulator, StepNoise, Variant};
use crate::error::{FilterError, Result};
use crate::model::{symmetrize, ModelSpec};
use crate::paths::{sample_gaussian_columns, IncrementPath, Level, NoiseSource, ParticleStreams, Purpose, SeedSpec};
use crate::scalar::Real;

/// Default bound on covariance entries before a run is declared unstable.
pub const DEFAULT_COVARIANCE_BOUND: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct KbfState<T: Real> {
    pub m: DVector<T>,
    pub p: DMatrix<T>,
    pub k: usize,
    pub level: Level,
}

impl<T: Real> KbfState<T> {
    pub fn initial(model: &ModelSpec<T>, level: Level) -> Self {
        Self {
            m: model.m0().clone(),
            p: model.p0().clone(),
            k: 0,
            level,
        }
    }
}

/// `A P + P A^T - P S P + Q`.
pub fn riccati_drift<T: Real>(p: &DMatrix<T>, model: &ModelSpec<T>) -> Result<DMatrix<T>> {
    let a = model.drift_matrix()?;
    if p.nrows() != model.dx() || p.ncols() != model.dx() {
        return Err(FilterError::DimensionMismatch {
            context: "Riccati argument",
            expected: model.dx(),
            got: p.nrows(),
        });
    }
    Ok(a * p + p * a.transpose() - p * model.s() * p + model.q())
}

/// One step of the discretized Kalman-Bucy recursion.
pub fn kbf_step<T: Real>(state: &KbfState<T>, dy: DVectorView<'_, T>, model: &ModelSpec<T>, bound: T) -> Result<KbfState<T>> {
    if dy.len() != model.dy() {
        return Err(FilterError::DimensionMismatch {
            context: "observation increment",
            expected: model.dy(),
            got: dy.len(),
        });
    }
    let a = model.drift_matrix()?;
    let delta: T = state.level.delta();
    let p = &state.p;
    let gain = p * model.ct_r_inv();
    let m = &state.m + (a * &state.m) * delta + gain * (dy - (model.c() * &state.m) * delta);

    let ricc = riccati_drift(p, model)?;
    let left = a - p * model.s();
    let second = &left * p * left.transpose();
    let p_next = symmetrize(&(p + ricc * delta + second * (delta * delta)));
    let peak = p_next.iter().fold(T::zero(), |acc, v| Float::max(acc, Float::abs(*v)));
    if !(peak <= bound) {
        return Err(FilterError::CovarianceBlowup {
            step: state.k + 1,
            value: peak.as_f64(),
            bound: bound.as_f64(),
        });
    }
    Ok(KbfState {
        m,
        p: p_next,
        k: state.k + 1,
        level: state.level,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KbfPath<T: Real> {
    pub level: Level,
    pub means: Vec<DVector<T>>,
    pub covs: Vec<DMatrix<T>>,
}

/// Runs the reference filter over the record coarsened to level `l`.
pub fn kbf_run<T: Real>(model: &ModelSpec<T>, obs: &IncrementPath<T>, l: u32) -> Result<KbfPath<T>> {
    kbf_run_bounded(model, obs, l, T::c(DEFAULT_COVARIANCE_BOUND))
}

pub fn kbf_run_bounded<T: Real>(model: &ModelSpec<T>, obs: &IncrementPath<T>, l: u32, bound: T) -> Result<KbfPath<T>> {
    model.drift_matrix()?;
    let level = Level(l);
    let obs = obs.coarsen(l)?;
    let mut state = KbfState::initial(model, level);
    let mut means = Vec::with_capacity(obs.steps() + 1);
    let mut covs = Vec::with_capacity(obs.steps() + 1);
    means.push(state.m.clone());
    covs.push(state.p.clone());
    for k in 0..obs.steps() {
        state = kbf_step(&state, obs.row_view(k), model, bound)?;
        means.push(state.m.clone());
        covs.push(state.p.clone());
    }
    Ok(KbfPath { level, means, covs })
}

/// `Σ_k <C m_k, R^{-1} ΔY_k> - Δ/2 <m_k, S m_k>` along a mean path.
pub fn exact_log_nc<T: Real>(means: &[DVector<T>], obs: &IncrementPath<T>, model: &ModelSpec<T>, l: u32) -> Result<T> {
    let obs = obs.coarsen(l)?;
    let delta = Level(l).delta();
    if means.len() < obs.steps() {
        return Err(FilterError::DimensionMismatch {
            context: "mean path length",
            expected: obs.steps() + 1,
            got: means.len(),
        });
    }
    let mut acc = LogNCAccumulator::default();
    for k in 0..obs.steps() {
        acc.add(log_nc_increment(means[k].as_view(), obs.row_view(k), model, delta));
    }
    Ok(acc.u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun<T: Real> {
    pub final_particles: DMatrix<T>,
    /// Oracle sample mean at each grid point.
    pub mean_path: Vec<DVector<T>>,
    pub log_nc: T,
    pub reference: KbfPath<T>,
}

/// Particles evolved with the perturbed-observation update but the exact
/// covariance `P_k` in the gain. Conditionally on the record they are
/// i.i.d. `N(m_k, P_k)`. `N = 1` is allowed.
pub fn iid_oracle_run<T: Real>(model: &ModelSpec<T>, obs: &IncrementPath<T>, l: u32, n: usize, seed: &SeedSpec) -> Result<OracleRun<T>> {
    let mut noise = ParticleStreams::new(seed, Purpose::OracleNoise, l, n);
    iid_oracle_run_with(model, obs, l, n, seed, &mut noise)
}

pub fn iid_oracle_run_with<T: Real, S: NoiseSource<T> + ?Sized>(
    model: &ModelSpec<T>,
    obs: &IncrementPath<T>,
    l: u32,
    n: usize,
    seed: &SeedSpec,
    noise: &mut S,
) -> Result<OracleRun<T>> {
    if n == 0 {
        return Err(FilterError::TooFewParticles { got: 0 });
    }
    let reference = kbf_run(model, obs, l)?;
    let level = Level(l);
    let delta: T = level.delta();
    let coarse = obs.coarsen(l)?;
    let mut particles = sample_gaussian_columns(model.m0(), model.p0(), n, seed, Purpose::InitialEnsemble, l);
    let mut buffers = StepNoise::buffers(Variant::Vanilla, model.dx(), model.dy(), n);
    let mut acc = LogNCAccumulator::default();
    let mut mean_path = Vec::with_capacity(coarse.steps() + 1);
    for k in 0..coarse.steps() {
        let mean = particle_mean(&particles);
        acc.add(log_nc_increment(mean.as_view(), coarse.row_view(k), model, delta));
        mean_path.push(mean);
        buffers.draw(noise);
        let (dw, dv) = (buffers.dw.as_ref().expect("vanilla buffers"), buffers.dv.as_ref().expect("vanilla buffers"));
        particles = perturbed_update(&particles, model, &reference.covs[k], coarse.row_view(k), dw, dv, delta);
    }
    mean_path.push(particle_mean(&particles));
    Ok(OracleRun {
        final_particles: particles,
        mean_path,
        log_nc: acc.u,
        reference,
    })
}
