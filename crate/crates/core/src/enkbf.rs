//! Single-level discretized ensemble Kalman-Bucy filters and the
//! normalizing-constant estimator driven by their sample mean.
//!
//! Particles are the columns of a `d_x × N` matrix. Each step evaluates the
//! sample mean and covariance of the *input* ensemble and applies one of
//!
//! * vanilla: `ξ + f(ξ)Δ + Q^{1/2}dW + P C^T R^{-1}(dY - (CξΔ + R^{1/2}dV))`
//! * deterministic: `ξ + f(ξ)Δ + Q^{1/2}dW + P C^T R^{-1}(dY - C(ξ+m)/2 Δ)`
//! * deterministic transport: `ξ + f(ξ)Δ + Q(P+λI)^{-1}(ξ-m)Δ + P C^T R^{-1}(dY - C(ξ+m)/2 Δ)`
//!
//! The log normalizing constant accumulates
//! `<C m_k, R^{-1} ΔY_k> - Δ/2 <m_k, S m_k>` over the steps.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, DVectorView};
use num_traits::Float;

use crate::error::{FilterError, Result};
use crate::model::{symmetrize, ModelSpec};
use crate::paths::{sample_gaussian_columns, IncrementPath, Level, NoiseSource, ParticleStreams, Purpose, SeedSpec};
use crate::scalar::Real;

/// Smallest and largest multipliers of `trace(P)/d_x` tried as Tikhonov
/// shift for the transport inverse.
const RIDGE_START: f64 = 1e-8;
const RIDGE_MAX: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Perturbed-observation filter (F1).
    Vanilla,
    /// Deterministic innovation (F2).
    Deterministic,
    /// Deterministic transport, no Brownian drivers (F3).
    DeterministicTransport,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::Vanilla,
        Variant::Deterministic,
        Variant::DeterministicTransport,
    ];

    pub fn needs_signal_noise(self) -> bool {
        !matches!(self, Variant::DeterministicTransport)
    }

    pub fn needs_observation_noise(self) -> bool {
        matches!(self, Variant::Vanilla)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Vanilla => "f1",
            Variant::Deterministic => "f2",
            Variant::DeterministicTransport => "f3",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f1" | "vanilla" => Ok(Variant::Vanilla),
            "f2" | "deterministic" => Ok(Variant::Deterministic),
            "f3" | "transport" | "deterministic-transport" => Ok(Variant::DeterministicTransport),
            other => Err(FilterError::InvalidConfig(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T: Real> {
    pub level: Level,
    /// `d_x × N`, one particle per column.
    pub particles: DMatrix<T>,
}

impl<T: Real> Ensemble<T> {
    pub fn new(level: Level, particles: DMatrix<T>) -> Result<Self> {
        if particles.ncols() < 2 {
            return Err(FilterError::TooFewParticles {
                got: particles.ncols(),
            });
        }
        Ok(Self { level, particles })
    }

    /// `N` i.i.d. draws from the model's initial law; particle `i` uses
    /// stream `(InitialEnsemble, level, i)`.
    pub fn initial(model: &ModelSpec<T>, level: Level, n: usize, seed: &SeedSpec) -> Result<Self> {
        let particles = sample_gaussian_columns(model.m0(), model.p0(), n, seed, Purpose::InitialEnsemble, level.0);
        Self::new(level, particles)
    }

    pub fn len(&self) -> usize {
        self.particles.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }
}

/// Column mean, summed left to right.
pub fn particle_mean<T: Real>(particles: &DMatrix<T>) -> DVector<T> {
    let n = particles.ncols();
    let mut acc = DVector::zeros(particles.nrows());
    for col in particles.column_iter() {
        acc += col;
    }
    acc / T::c(n as f64)
}

/// Unbiased sample covariance about `mean`, exactly symmetric.
pub fn particle_cov<T: Real>(particles: &DMatrix<T>, mean: &DVector<T>) -> Result<DMatrix<T>> {
    let n = particles.ncols();
    if n < 2 {
        return Err(FilterError::TooFewParticles { got: n });
    }
    let d = particles.nrows();
    let mut acc = DMatrix::zeros(d, d);
    for col in particles.column_iter() {
        let dev = col - mean;
        for j in 0..d {
            for i in j..d {
                acc[(i, j)] += dev[i] * dev[j];
            }
        }
    }
    let norm = T::c((n - 1) as f64);
    for j in 0..d {
        for i in j..d {
            let v = acc[(i, j)] / norm;
            acc[(i, j)] = v;
            acc[(j, i)] = v;
        }
    }
    Ok(acc)
}

pub fn ensemble_mean<T: Real>(ens: &Ensemble<T>) -> DVector<T> {
    particle_mean(&ens.particles)
}

pub fn ensemble_cov<T: Real>(ens: &Ensemble<T>) -> Result<DMatrix<T>> {
    particle_cov(&ens.particles, &particle_mean(&ens.particles))
}

/// `<C m, R^{-1} dY> - (Δ/2) <m, S m>`.
pub fn log_nc_increment<T: Real>(m: DVectorView<'_, T>, dy: DVectorView<'_, T>, model: &ModelSpec<T>, delta: T) -> T {
    let projected = model.ct_r_inv() * dy;
    let quad = m.dot(&(model.s() * m));
    m.dot(&projected) - delta * T::c(0.5) * quad
}

/// Running `Ū = log Z̄`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LogNCAccumulator<T: Real> {
    pub u: T,
    pub steps: usize,
}

impl<T: Real> LogNCAccumulator<T> {
    pub fn add(&mut self, increment: T) {
        self.u += increment;
        self.steps += 1;
    }

    /// `Z̄ = exp(Ū)`; may overflow on long horizons.
    pub fn normalizing_constant(&self) -> T {
        Float::exp(self.u)
    }
}

/// One step's Brownian increments (`d_x × N` and `d_y × N`).
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise<T: Real> {
    pub dw: Option<DMatrix<T>>,
    pub dv: Option<DMatrix<T>>,
}

impl<T: Real> StepNoise<T> {
    /// Buffers shaped for `variant`, zero-filled.
    pub fn buffers(variant: Variant, dx: usize, dy: usize, n: usize) -> Self {
        Self {
            dw: variant.needs_signal_noise().then(|| DMatrix::zeros(dx, n)),
            dv: variant.needs_observation_noise().then(|| DMatrix::zeros(dy, n)),
        }
    }

    pub fn draw<S: NoiseSource<T> + ?Sized>(&mut self, source: &mut S) {
        source.next_step(self.dw.as_mut(), self.dv.as_mut());
    }
}

fn dy_broadcast<T: Real>(dy: DVectorView<'_, T>, n: usize) -> DMatrix<T> {
    DMatrix::from_fn(dy.len(), n, |i, _| dy[i])
}

/// Perturbed-observation update with an arbitrary gain covariance. Shared by
/// the vanilla filter (sample covariance) and the i.i.d. oracle (exact `P`).
pub(crate) fn perturbed_update<T: Real>(
    particles: &DMatrix<T>,
    model: &ModelSpec<T>,
    gain_cov: &DMatrix<T>,
    dy: DVectorView<'_, T>,
    dw: &DMatrix<T>,
    dv: &DMatrix<T>,
    delta: T,
) -> DMatrix<T> {
    let n = particles.ncols();
    let mut next = particles + model.drift_columns(particles) * delta;
    next += model.q_sqrt() * dw;
    let gain = gain_cov * model.ct_r_inv();
    let projected = (model.c() * particles) * delta + model.r_sqrt() * dv;
    let innovation = dy_broadcast(dy, n) - projected;
    next += gain * innovation;
    next
}

fn half_innovation<T: Real>(
    particles: &DMatrix<T>,
    mean: &DVector<T>,
    model: &ModelSpec<T>,
    dy: DVectorView<'_, T>,
    delta: T,
) -> DMatrix<T> {
    let n = particles.ncols();
    let half = T::c(0.5);
    let midpoints = DMatrix::from_fn(particles.nrows(), n, |i, j| (particles[(i, j)] + mean[i]) * half);
    dy_broadcast(dy, n) - (model.c() * midpoints) * delta
}

/// Solves `(P + λI) Z = B` with the smallest workable ridge `λ`.
fn regularized_solve<T: Real>(cov: &DMatrix<T>, rhs: &DMatrix<T>) -> Result<DMatrix<T>> {
    let d = cov.nrows();
    let scale = cov.trace() / T::c(d as f64);
    if !(scale > T::zero()) || !Float::is_finite(scale) {
        return Err(FilterError::SingularCovariance);
    }
    let mut kappa = RIDGE_START;
    while kappa <= RIDGE_MAX * (1.0 + 1e-9) {
        let shifted = cov + DMatrix::identity(d, d) * (scale * T::c(kappa));
        if let Some(ch) = shifted.cholesky() {
            let z = ch.solve(rhs);
            if z.iter().all(|v| Float::is_finite(*v)) {
                return Ok(z);
            }
        }
        kappa *= 10.0;
    }
    Err(FilterError::SingularCovariance)
}

/// Advances particles one step given their sample mean and covariance.
#[allow(clippy::too_many_arguments)]
pub(crate) fn advance<T: Real>(
    particles: &DMatrix<T>,
    mean: &DVector<T>,
    cov: &DMatrix<T>,
    dy: DVectorView<'_, T>,
    model: &ModelSpec<T>,
    variant: Variant,
    noise: &StepNoise<T>,
    delta: T,
) -> Result<DMatrix<T>> {
    let next = match variant {
        Variant::Vanilla => {
            let dw = noise.dw.as_ref().ok_or_else(|| missing("dW"))?;
            let dv = noise.dv.as_ref().ok_or_else(|| missing("dV"))?;
            perturbed_update(particles, model, cov, dy, dw, dv, delta)
        }
        Variant::Deterministic => {
            let dw = noise.dw.as_ref().ok_or_else(|| missing("dW"))?;
            let mut next = particles + model.drift_columns(particles) * delta;
            next += model.q_sqrt() * dw;
            let gain = cov * model.ct_r_inv();
            next += gain * half_innovation(particles, mean, model, dy, delta);
            next
        }
        Variant::DeterministicTransport => {
            let mut next = particles + model.drift_columns(particles) * delta;
            let deviations = DMatrix::from_fn(particles.nrows(), particles.ncols(), |i, j| particles[(i, j)] - mean[i]);
            let whitened = regularized_solve(cov, &deviations)?;
            next += (model.q() * whitened) * delta;
            let gain = cov * model.ct_r_inv();
            next += gain * half_innovation(particles, mean, model, dy, delta);
            next
        }
    };
    Ok(next)
}

fn missing(what: &str) -> FilterError {
    FilterError::InvalidConfig(format!("noise buffer {what} required by this variant"))
}

fn check_dy<T: Real>(model: &ModelSpec<T>, dy: &DVectorView<'_, T>) -> Result<()> {
    if dy.len() != model.dy() {
        return Err(FilterError::DimensionMismatch {
            context: "observation increment",
            expected: model.dy(),
            got: dy.len(),
        });
    }
    Ok(())
}

/// One explicit step of the chosen variant.
pub fn enkbf_step<T: Real>(
    ens: &Ensemble<T>,
    dy: DVectorView<'_, T>,
    model: &ModelSpec<T>,
    variant: Variant,
    noise: &StepNoise<T>,
) -> Result<Ensemble<T>> {
    check_dy(model, &dy)?;
    let mean = ensemble_mean(ens);
    let cov = particle_cov(&ens.particles, &mean)?;
    let next = advance(&ens.particles, &mean, &cov, dy, model, variant, noise, ens.level.delta())?;
    if !next.iter().all(|v| Float::is_finite(*v)) {
        return Err(FilterError::NonFiniteState { step: 0 });
    }
    Ensemble::new(ens.level, next)
}

/// Mutable filter state used by single-level and coupled runners.
#[derive(Debug, Clone)]
pub(crate) struct FilterState<T: Real> {
    pub particles: DMatrix<T>,
    pub level: Level,
    pub log_nc: LogNCAccumulator<T>,
    pub means: Vec<DVector<T>>,
    pub step: usize,
}

impl<T: Real> FilterState<T> {
    pub fn new(level: Level, particles: DMatrix<T>) -> Result<Self> {
        if particles.ncols() < 2 {
            return Err(FilterError::TooFewParticles {
                got: particles.ncols(),
            });
        }
        Ok(Self {
            particles,
            level,
            log_nc: LogNCAccumulator::default(),
            means: Vec::new(),
            step: 0,
        })
    }

    pub fn advance(&mut self, dy: DVectorView<'_, T>, model: &ModelSpec<T>, variant: Variant, noise: &StepNoise<T>) -> Result<()> {
        let delta: T = self.level.delta();
        let mean = particle_mean(&self.particles);
        let cov = particle_cov(&self.particles, &mean)?;
        self.log_nc.add(log_nc_increment(mean.as_view(), dy, model, delta));
        let next = advance(&self.particles, &mean, &cov, dy, model, variant, noise, delta)?;
        if !next.iter().all(|v| Float::is_finite(*v)) {
            return Err(FilterError::NonFiniteState { step: self.step });
        }
        self.means.push(mean);
        self.particles = next;
        self.step += 1;
        Ok(())
    }

    pub fn finish(mut self) -> FilterRun<T> {
        self.means.push(particle_mean(&self.particles));
        FilterRun {
            mean_path: self.means,
            log_nc: self.log_nc,
            final_ensemble: Ensemble {
                level: self.level,
                particles: self.particles,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun<T: Real> {
    /// `m^N` at every grid point, including the final time.
    pub mean_path: Vec<DVector<T>>,
    pub log_nc: LogNCAccumulator<T>,
    pub final_ensemble: Ensemble<T>,
}

fn obs_at_level<T: Real>(obs: &IncrementPath<T>, level: Level) -> Result<IncrementPath<T>> {
    if obs.level() == level {
        Ok(obs.clone())
    } else {
        obs.coarsen(level.0)
    }
}

/// Runs a filter from a given ensemble with an arbitrary noise source over
/// the whole record (coarsened to the ensemble's level).
pub fn run_filter<T: Real, S: NoiseSource<T> + ?Sized>(
    model: &ModelSpec<T>,
    obs: &IncrementPath<T>,
    variant: Variant,
    init: Ensemble<T>,
    noise: &mut S,
) -> Result<FilterRun<T>> {
    if init.dim() != model.dx() {
        return Err(FilterError::DimensionMismatch {
            context: "ensemble state",
            expected: model.dx(),
            got: init.dim(),
        });
    }
    if obs.dim() != model.dy() {
        return Err(FilterError::DimensionMismatch {
            context: "observation record",
            expected: model.dy(),
            got: obs.dim(),
        });
    }
    let level = init.level;
    let obs = obs_at_level(obs, level)?;
    let n = init.len();
    let mut state = FilterState::new(level, init.particles)?;
    let mut buffers = StepNoise::buffers(variant, model.dx(), model.dy(), n);
    for k in 0..obs.steps() {
        buffers.draw(noise);
        state.advance(obs.row_view(k), model, variant, &buffers)?;
    }
    Ok(state.finish())
}

/// Single-level EnKBF with fresh initial draws and per-particle noise
/// streams labelled by `level`.
pub fn enkbf_run<T: Real>(
    model: &ModelSpec<T>,
    obs: &IncrementPath<T>,
    l: u32,
    n: usize,
    variant: Variant,
    seed: &SeedSpec,
) -> Result<FilterRun<T>> {
    let level = Level(l);
    let init = Ensemble::initial(model, level, n, seed)?;
    let mut noise = ParticleStreams::new(seed, Purpose::FilterNoise, l, n);
    run_filter(model, obs, variant, init, &mut noise)
}

/// Symmetrized copy, re-exported for callers that post-process covariances.
pub fn symmetric_part<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    symmetrize(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_linear_model, presets, random_unit_matrix, ModelFamily};
    use crate::paths::{simulate_truth_and_obs, Silent};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn ens1(vals: &[f64]) -> Ensemble<f64> {
        Ensemble::new(Level(0), DMatrix::from_row_slice(1, vals.len(), vals)).unwrap()
    }

    fn scalar_model(a: f64, c: f64, q: f64, r: f64) -> ModelSpec<f64> {
        build_linear_model(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, c),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
            DVector::from_element(1, 0.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn mean_examples() {
        assert_eq!(ensemble_mean(&ens1(&[0.0, 2.0]))[0], 1.0);
        assert_eq!(ensemble_mean(&ens1(&[3.5, 3.5, 3.5]))[0], 3.5);
        assert_eq!(ensemble_mean(&ens1(&[-1.0, 0.0, 1.0]))[0], 0.0);
    }

    #[test]
    fn cov_examples() {
        assert_eq!(ensemble_cov(&ens1(&[0.0, 2.0])).unwrap()[(0, 0)], 2.0);
        assert_eq!(ensemble_cov(&ens1(&[3.5, 3.5, 3.5])).unwrap()[(0, 0)], 0.0);
        assert_eq!(ensemble_cov(&ens1(&[-1.0, 0.0, 1.0])).unwrap()[(0, 0)], 1.0);
        let one = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(
            particle_cov(&one, &DVector::from_element(1, 1.0)).unwrap_err(),
            FilterError::TooFewParticles { got: 1 }
        );
        assert!(Ensemble::new(Level(0), one).is_err());
    }

    #[test]
    fn log_nc_increment_examples() {
        let m = scalar_model(0.0, 1.0, 1.0, 1.0);
        let two = DVector::from_element(1, 2.0);
        let dy = DVector::from_element(1, 0.1);
        assert_relative_eq!(log_nc_increment(two.as_view(), dy.as_view(), &m, 0.01), 0.18, epsilon = 1e-15);
        let zero = DVector::from_element(1, 0.0);
        assert_eq!(log_nc_increment(zero.as_view(), dy.as_view(), &m, 0.01), 0.0);
        let dy0 = DVector::from_element(1, 0.0);
        assert!(log_nc_increment(two.as_view(), dy0.as_view(), &m, 0.01) <= 0.0);
    }

    #[test]
    fn zero_gain_vanilla_is_plain_euler() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let a: DMatrix<f64> = random_unit_matrix(3, 3, &mut rng) - DMatrix::identity(3, 3);
        let q = crate::model::tridiagonal(3, 0.7, 0.2);
        let model = build_linear_model(
            a.clone(),
            DMatrix::zeros(2, 3),
            q.clone(),
            DMatrix::identity(2, 2),
            DVector::zeros(3),
            DMatrix::identity(3, 3),
        )
        .unwrap();
        let ens = Ensemble::new(Level(3), random_unit_matrix(3, 6, &mut rng)).unwrap();
        let noise = StepNoise {
            dw: Some(random_unit_matrix(3, 6, &mut rng)),
            dv: Some(random_unit_matrix(2, 6, &mut rng)),
        };
        let dy = DVector::from_vec(vec![0.3, -0.2]);
        let out = enkbf_step(&ens, dy.as_view(), &model, Variant::Vanilla, &noise).unwrap();
        let euler = &ens.particles + (&a * &ens.particles) * 0.125 + &q * noise.dw.as_ref().unwrap();
        assert_eq!(out.particles, euler);
    }

    #[test]
    fn degenerate_ensemble_deterministic_has_no_update() {
        let model = scalar_model(-0.5, 1.0, 0.0, 1.0);
        let ens = Ensemble::new(Level(2), DMatrix::from_element(1, 4, 1.5)).unwrap();
        let noise = StepNoise {
            dw: Some(DMatrix::from_element(1, 4, 0.3)),
            dv: None,
        };
        let out = enkbf_step(&ens, DVector::from_element(1, 0.7).as_view(), &model, Variant::Deterministic, &noise).unwrap();
        for v in out.particles.iter() {
            assert_eq!(*v, 1.5 + (-0.5 * 1.5) * 0.25);
        }
    }

    #[test]
    fn vanilla_and_deterministic_innovations_by_hand() {
        // d=1, N=2, particles {-1, 1}: P^N = 2, m = 0, gain = 2 (C = R = 1).
        let model = scalar_model(0.0, 1.0, 1.0, 1.0);
        let ens = Ensemble::new(Level(1), DMatrix::from_row_slice(1, 2, &[-1.0, 1.0])).unwrap();
        let dy = DVector::from_element(1, 0.2);
        let zeros = StepNoise {
            dw: Some(DMatrix::zeros(1, 2)),
            dv: Some(DMatrix::zeros(1, 2)),
        };
        let van = enkbf_step(&ens, dy.as_view(), &model, Variant::Vanilla, &zeros).unwrap();
        let det = enkbf_step(&ens, dy.as_view(), &model, Variant::Deterministic, &zeros).unwrap();
        // vanilla: ξ + 2 (0.2 - ξ/2); deterministic: ξ + 2 (0.2 - ξ/4)
        assert_relative_eq!(van.particles[(0, 0)], -1.0 + 2.0 * (0.2 + 0.5), epsilon = 1e-15);
        assert_relative_eq!(van.particles[(0, 1)], 1.0 + 2.0 * (0.2 - 0.5), epsilon = 1e-15);
        assert_relative_eq!(det.particles[(0, 0)], -1.0 + 2.0 * (0.2 + 0.25), epsilon = 1e-15);
        assert_relative_eq!(det.particles[(0, 1)], 1.0 + 2.0 * (0.2 - 0.25), epsilon = 1e-15);
    }

    #[test]
    fn transport_step_by_hand_and_singular() {
        // d=1, a=0, Q=1, C=R=1, particles {-1,1}, Δ=1/2: transport term (1/2)ξ/2.
        let model = scalar_model(0.0, 1.0, 1.0, 1.0);
        let ens = Ensemble::new(Level(1), DMatrix::from_row_slice(1, 2, &[-1.0, 1.0])).unwrap();
        let dy = DVector::from_element(1, 0.0);
        let none = StepNoise { dw: None, dv: None };
        let out = enkbf_step(&ens, dy.as_view(), &model, Variant::DeterministicTransport, &none).unwrap();
        let expected = |x: f64| x + x / 2.0 * 0.5 + 2.0 * (-(x / 2.0) * 0.5);
        assert_relative_eq!(out.particles[(0, 1)], expected(1.0), epsilon = 1e-7);
        assert_relative_eq!(out.particles[(0, 0)], expected(-1.0), epsilon = 1e-7);
        let flat = Ensemble::new(Level(1), DMatrix::from_element(1, 3, 2.0)).unwrap();
        assert_eq!(
            enkbf_step(&flat, dy.as_view(), &model, Variant::DeterministicTransport, &none).unwrap_err(),
            FilterError::SingularCovariance
        );
    }

    #[test]
    fn rank_deficient_transport_is_regularized() {
        let model = presets::lorenz96_family::<f64>(8, true).build(&[8.0]).unwrap();
        let seed = SeedSpec::new(4);
        let ens = Ensemble::initial(&model, Level(5), 4, &seed).unwrap();
        let dy = DVector::from_element(8, 0.01);
        let none = StepNoise { dw: None, dv: None };
        let out = enkbf_step(&ens, dy.as_view(), &model, Variant::DeterministicTransport, &none).unwrap();
        assert!(out.particles.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn horizon_zero_and_zero_c() {
        let model = presets::ou1::<f64>().unwrap();
        let empty = IncrementPath::from_rows(Level(4), 0, 1, vec![]).unwrap();
        let run = enkbf_run(&model, &empty, 4, 10, Variant::Vanilla, &SeedSpec::new(1)).unwrap();
        assert_eq!(run.log_nc.u, 0.0);
        assert_eq!(run.mean_path.len(), 1);
        let init = Ensemble::initial(&model, Level(4), 10, &SeedSpec::new(1)).unwrap();
        assert_eq!(run.mean_path[0], ensemble_mean(&init));

        let blind = build_linear_model(
            DMatrix::from_element(1, 1, -0.8),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.1),
            DMatrix::from_element(1, 1, 0.05),
        )
        .unwrap();
        let (_, obs) = simulate_truth_and_obs(&blind, 6, 2, &SeedSpec::new(2));
        for v in Variant::ALL {
            let run = enkbf_run(&blind, &obs, 4, 8, v, &SeedSpec::new(3)).unwrap();
            assert_eq!(run.log_nc.u, 0.0);
            assert_eq!(run.log_nc.steps, 32);
        }
    }

    #[test]
    fn runs_are_reproducible_and_generic() {
        let model = presets::ou1::<f32>().unwrap();
        let (_, obs) = simulate_truth_and_obs(&model, 6, 1, &SeedSpec::new(9));
        let a = enkbf_run(&model, &obs, 5, 16, Variant::Deterministic, &SeedSpec::new(1)).unwrap();
        let b = enkbf_run(&model, &obs, 5, 16, Variant::Deterministic, &SeedSpec::new(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.log_nc.u.is_finite());
        let mut silent = Silent;
        let init = Ensemble::initial(&model, Level(5), 16, &SeedSpec::new(1)).unwrap();
        assert!(run_filter(&model, &obs, Variant::Vanilla, init, &mut silent).is_ok());
    }

    proptest! {
        #[test]
        fn cov_is_psd(vals in proptest::collection::vec(-5.0f64..5.0, 12..40)) {
            let n = vals.len() / 3;
            let x = DMatrix::from_column_slice(3, n, &vals[..3 * n]);
            let ens = Ensemble::new(Level(0), x).unwrap();
            let p = ensemble_cov(&ens).unwrap();
            prop_assert_eq!(p.clone(), p.transpose());
            for k in 0..100 {
                let v = DVector::from_fn(3, |i, _| ((i * 7 + k * 13) as f64).sin());
                prop_assert!(v.dot(&(&p * &v)) >= -1e-10);
            }
        }

        #[test]
        fn permutation_equivariance(raw in proptest::collection::vec(-16i32..16, 8), perm_seed in 0u64..1000, variant_idx in 0usize..3) {
            // multiples of 1/8 with four particles keep every reduction exact, so equality is bitwise
            let n = 4;
            let x = DMatrix::from_iterator(2, n, raw.iter().map(|v| *v as f64 / 8.0));
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let permute = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), n, |i, j| m[(i, order[j])]);
            let ens = Ensemble::new(Level(3), x.clone()).unwrap();
            let pens = Ensemble::new(Level(3), permute(&x)).unwrap();
            prop_assert_eq!(ensemble_mean(&ens), ensemble_mean(&pens));
            prop_assert_eq!(ensemble_cov(&ens).unwrap(), ensemble_cov(&pens).unwrap());

            let variant = Variant::ALL[variant_idx];
            let model = build_linear_model(
                DMatrix::from_row_slice(2, 2, &[-0.5, 0.25, 0.0, -1.0]),
                DMatrix::from_row_slice(1, 2, &[1.0, 0.5]),
                DMatrix::identity(2, 2),
                DMatrix::from_element(1, 1, 2.0),
                DVector::zeros(2),
                DMatrix::identity(2, 2),
            ).unwrap();
            let dw = DMatrix::from_fn(2, n, |i, j| ((i + 3 * j) as f64) / 16.0 - 0.25);
            let dv = DMatrix::from_fn(1, n, |_, j| (j as f64) / 8.0 - 0.25);
            let noise = StepNoise { dw: Some(dw.clone()), dv: Some(dv.clone()) };
            let pnoise = StepNoise { dw: Some(permute(&dw)), dv: Some(permute(&dv)) };
            let dy = DVector::from_element(1, 0.125);
            match (enkbf_step(&ens, dy.as_view(), &model, variant, &noise), enkbf_step(&pens, dy.as_view(), &model, variant, &pnoise)) {
                (Ok(a), Ok(b)) => prop_assert_eq!(permute(&a.particles), b.particles),
                (Err(a), Err(b)) => prop_assert_eq!(a, b),
                _ => prop_assert!(false, "permutation changed success"),
            }
        }
    }
}
