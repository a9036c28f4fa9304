//! Online parameter estimation: recursive maximum likelihood with SPSA
//! finite differences of the multilevel log-normalizing-constant over unit
//! time windows.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::enkbf::{run_filter, Ensemble, Variant};
use crate::error::{FilterError, Result};
use crate::model::{ModelFamily, ThetaVector};
use crate::multilevel::{ml_log_nc_with, MLConfig};
use crate::paths::{sample_gaussian_columns, IncrementPath, Level, ParticleStreams, Purpose, SeedSpec};
use crate::scalar::Real;

/// `a_t = a0` for `t <= t0`, then `scale · t^{-alpha}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRule {
    pub a0: f64,
    pub t0: u64,
    pub scale: f64,
    pub alpha: f64,
}

impl StepRule {
    pub fn at(&self, t: u64) -> f64 {
        if t <= self.t0 {
            self.a0
        } else {
            self.scale * (t as f64).powf(-self.alpha)
        }
    }
}

/// One step rule per parameter coordinate and a shared perturbation size
/// `b_t = b0 · t^{-beta}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSchedule {
    pub steps: Vec<StepRule>,
    pub b0: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulePreset {
    Linear,
    Lorenz63,
    Lorenz96,
}

impl GainSchedule {
    pub fn new(steps: Vec<StepRule>, b0: f64, beta: f64) -> Result<Self> {
        let s = Self { steps, b0, beta };
        s.validate()?;
        Ok(s)
    }

    /// Every rule must be positive with `alpha ∈ (0.5, 1]`, and
    /// `Σ a_t² / b_t²` must converge, i.e. `2 (alpha - beta) > 1`.
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(FilterError::InvalidConfig("gain schedule has no coordinates".into()));
        }
        if !(self.b0 > 0.0) || !(self.beta >= 0.0) {
            return Err(FilterError::InvalidConfig(format!(
                "perturbation size needs b0 > 0 and beta >= 0, got {} and {}",
                self.b0, self.beta
            )));
        }
        for (k, r) in self.steps.iter().enumerate() {
            if !(r.a0 >= 0.0) || !(r.scale >= 0.0) {
                return Err(FilterError::InvalidConfig(format!("step rule {k} has a negative gain")));
            }
            if !(r.alpha > 0.5 && r.alpha <= 1.0) {
                return Err(FilterError::InvalidConfig(format!(
                    "step rule {k}: alpha = {} outside (0.5, 1]",
                    r.alpha
                )));
            }
            if !(2.0 * (r.alpha - self.beta) > 1.0) {
                return Err(FilterError::InvalidConfig(format!(
                    "step rule {k}: 2 (alpha - beta) = {} must exceed 1",
                    2.0 * (r.alpha - self.beta)
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.steps.len()
    }

    /// Default schedules for each model family and filter variant.
    pub fn preset(preset: SchedulePreset, variant: Variant, d_theta: usize) -> Self {
        let rule = |a0, t0, scale, alpha| StepRule { a0, t0, scale, alpha };
        let steps = match (preset, variant) {
            (SchedulePreset::Linear, Variant::DeterministicTransport) => {
                let all = [rule(0.02, 500, 1.0, 0.88), rule(0.02, 500, 0.2, 0.95)];
                all.iter().cycle().take(d_theta).copied().collect()
            }
            (SchedulePreset::Linear, _) => {
                let all = [rule(0.02, 50, 1.0, 0.75), rule(0.02, 50, 1.0, 0.82)];
                all.iter().cycle().take(d_theta).copied().collect()
            }
            (SchedulePreset::Lorenz63, _) => vec![rule(0.01, 100, 1.0, 0.75); d_theta],
            (SchedulePreset::Lorenz96, _) => vec![rule(0.03, 50, 1.0, 0.75); d_theta],
        };
        Self {
            steps,
            b0: 1.0,
            beta: 0.1,
        }
    }

    /// Per-coordinate `a_t` and the shared `b_t`, for `t >= 1`.
    pub fn gain_at(&self, t: u64) -> (Vec<f64>, f64) {
        let a = self.steps.iter().map(|r| r.at(t)).collect();
        (a, self.b0 * (t as f64).powf(-self.beta))
    }
}

/// I.i.d. fair signs in `{-1, +1}`.
pub fn sample_perturbation<T: Real, R: Rng + ?Sized>(d_theta: usize, rng: &mut R) -> Vec<T> {
    (0..d_theta)
        .map(|_| if rng.random::<bool>() { T::one() } else { -T::one() })
        .collect()
}

/// `θ'(k) = θ(k) + a(k) / (2 b ψ(k)) · (u_plus - u_minus)`.
pub fn spsa_update<T: Real>(theta: &[T], a: &[f64], b: f64, psi: &[T], u_plus: T, u_minus: T) -> Vec<T> {
    let diff = u_plus - u_minus;
    theta
        .iter()
        .zip(a)
        .zip(psi)
        .map(|((th, ak), pk)| *th + T::c(*ak) / (T::c(2.0 * b) * *pk) * diff)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SPSAConfig<T: Real> {
    pub theta0: Vec<T>,
    pub schedule: GainSchedule,
    pub iterations: usize,
    pub ml: MLConfig,
    pub seed: SeedSpec,
    /// Propagate carrier particles with the evaluation variant instead of
    /// the vanilla filter.
    pub propagate_with_variant: bool,
}

impl<T: Real> SPSAConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(FilterError::InvalidConfig("at least one iteration is required".into()));
        }
        self.schedule.validate()?;
        if self.schedule.dim() != self.theta0.len() {
            return Err(FilterError::DimensionMismatch {
                context: "gain schedule coordinates",
                expected: self.theta0.len(),
                got: self.schedule.dim(),
            });
        }
        if self.ml.horizon != 1 {
            return Err(FilterError::InvalidConfig("estimation windows have unit length".into()));
        }
        self.ml.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpsaRecord<T: Real> {
    pub iter: usize,
    /// Parameter after this iteration's update.
    pub theta: Vec<T>,
    pub a: Vec<f64>,
    pub b: f64,
    pub u_plus: T,
    pub u_minus: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpsaTrajectory<T: Real> {
    pub names: Vec<String>,
    pub theta0: Vec<T>,
    pub records: Vec<SpsaRecord<T>>,
    /// Set when the run stopped early; `records` holds the iterations done.
    pub aborted: Option<FilterError>,
}

impl<T: Real> SpsaTrajectory<T> {
    pub fn final_theta(&self) -> &[T] {
        self.records.last().map_or(&self.theta0, |r| &r.theta)
    }

    /// Parameter values `θ_0, θ_1, ..., θ_M` for coordinate `k`.
    pub fn coordinate(&self, k: usize) -> Vec<T> {
        std::iter::once(self.theta0[k])
            .chain(self.records.iter().map(|r| r.theta[k]))
            .collect()
    }

    pub fn into_result(self) -> Result<Self> {
        match self.aborted {
            Some(e) => Err(e),
            None => Ok(self),
        }
    }

    pub fn as_theta(&self) -> Result<ThetaVector<T>> {
        ThetaVector::new(self.final_theta().to_vec(), self.names.clone())
    }
}

/// Runs the estimator over windows `[t, t + 1)` of `data` for
/// `t = 0..iterations`. Divergence or filter failure ends the run early and
/// is reported in [`SpsaTrajectory::aborted`].
pub fn rml_spsa_run<T: Real, F: ModelFamily<T> + ?Sized>(
    family: &F,
    data: &IncrementPath<T>,
    config: &SPSAConfig<T>,
) -> Result<SpsaTrajectory<T>> {
    config.validate()?;
    let ml = &config.ml;
    if data.level().0 < ml.l_target {
        return Err(FilterError::LevelAboveSource {
            from: data.level().0,
            to: ml.l_target,
        });
    }
    if data.horizon() < config.iterations {
        return Err(FilterError::ObservationTooShort {
            available: data.steps(),
            needed: data.level().steps(config.iterations),
        });
    }
    let d_theta = config.theta0.len();
    let initial_model = family.build(&config.theta0)?;
    let total: usize = ml.particles.iter().sum();
    let mut carrier = sample_gaussian_columns(
        initial_model.m0(),
        initial_model.p0(),
        total,
        &config.seed,
        Purpose::Carrier,
        ml.l_target,
    );
    let offsets: Vec<usize> = ml
        .particles
        .iter()
        .scan(0, |acc, n| {
            let start = *acc;
            *acc += n;
            Some(start)
        })
        .collect();

    let mut theta = config.theta0.clone();
    let mut trajectory = SpsaTrajectory {
        names: family.parameter_names(),
        theta0: config.theta0.clone(),
        records: Vec::with_capacity(config.iterations),
        aborted: None,
    };
    for t in 0..config.iterations {
        let step = (t + 1) as u64;
        match iterate(family, data, config, &offsets, &carrier, &theta, t, step, d_theta) {
            Ok((record, next_carrier)) => {
                theta = record.theta.clone();
                carrier = next_carrier;
                log::debug!("iteration {step}: theta = {:?}", theta);
                trajectory.records.push(record);
            }
            Err(e) => {
                log::warn!("estimation stopped at iteration {step}: {e}");
                trajectory.aborted = Some(e);
                break;
            }
        }
    }
    Ok(trajectory)
}

#[allow(clippy::too_many_arguments)]
fn iterate<T: Real, F: ModelFamily<T> + ?Sized>(
    family: &F,
    data: &IncrementPath<T>,
    config: &SPSAConfig<T>,
    offsets: &[usize],
    carrier: &DMatrix<T>,
    theta: &[T],
    t: usize,
    step: u64,
    d_theta: usize,
) -> Result<(SpsaRecord<T>, DMatrix<T>)> {
    let ml = &config.ml;
    let iter_seed = config.seed.child(step);
    let mut psi_rng = iter_seed.stream(Purpose::Perturbation, 0, 0);
    let psi: Vec<T> = sample_perturbation(d_theta, &mut psi_rng);
    let (a, b) = config.schedule.gain_at(step);
    let shift = |sign: T| -> Vec<T> {
        theta
            .iter()
            .zip(&psi)
            .map(|(th, p)| *th + sign * T::c(b) * *p)
            .collect()
    };
    let (theta_plus, theta_minus) = (shift(T::one()), shift(-T::one()));
    let window = data.window(t, 1)?;
    let slice = |l: u32, n: usize| -> Result<DMatrix<T>> {
        let start = offsets[(l - ml.l_star) as usize];
        Ok(carrier.columns(start, n).into_owned())
    };
    // both evaluations share `iter_seed`, so they see the same increments
    let evaluate = |th: &[T]| -> Result<T> {
        let model = family.build(th)?;
        Ok(ml_log_nc_with(&model, &window, ml, &iter_seed, slice)?.u_ml)
    };
    let (u_plus, u_minus) = rayon::join(|| evaluate(&theta_plus), || evaluate(&theta_minus));
    let (u_plus, u_minus) = (u_plus?, u_minus?);

    let next = spsa_update(theta, &a, b, &psi, u_plus, u_minus);
    if !next.iter().all(|v| num_traits::Float::is_finite(*v)) {
        return Err(FilterError::NonFiniteTheta { iteration: step as usize });
    }

    let model = family.build(&next)?;
    let variant = if config.propagate_with_variant { ml.variant } else { Variant::Vanilla };
    let level = Level(ml.l_target);
    let mut noise = ParticleStreams::new(&iter_seed, Purpose::Carrier, ml.l_target, carrier.ncols());
    let run = run_filter(&model, &window, variant, Ensemble::new(level, carrier.clone())?, &mut noise)?;

    Ok((
        SpsaRecord {
            iter: step as usize,
            theta: next,
            a,
            b,
            u_plus,
            u_minus,
        },
        run.final_ensemble.particles,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;
    use crate::paths::simulate_truth_and_obs;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    #[test]
    fn perturbation_signs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let one: Vec<f64> = sample_perturbation(1, &mut rng);
        assert!(one[0] == 1.0 || one[0] == -1.0);
        let draws: Vec<Vec<f64>> = (0..10_000).map(|_| sample_perturbation(3, &mut rng)).collect();
        let mean = draws.iter().map(|d| d[0]).sum::<f64>() / 1e4;
        assert!(mean.abs() < 0.04);
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let rho = draws.iter().map(|d| d[i] * d[j]).sum::<f64>() / 1e4;
            assert!(rho.abs() < 0.05, "rho({i},{j}) = {rho}");
        }
    }

    #[test]
    fn update_examples() {
        assert_eq!(spsa_update(&[1.5, -2.0], &[0.1, 0.2], 0.5, &[1.0, -1.0], 0.3, 0.3), vec![1.5, -2.0]);
        let th = spsa_update(&[1.0], &[0.1], 0.5, &[-1.0], 1.2, 0.8);
        assert_relative_eq!(th[0], 0.96, epsilon = 1e-15);
        let flipped = spsa_update(&[1.0], &[0.1], 0.5, &[1.0], 0.8, 1.2);
        assert_eq!(th, flipped);
    }

    #[test]
    fn gain_examples() {
        let s = GainSchedule::preset(SchedulePreset::Linear, Variant::Vanilla, 2);
        let (a, b) = s.gain_at(10);
        assert_eq!(a, vec![0.02, 0.02]);
        assert_relative_eq!(b, 0.794_328_234_7, epsilon = 1e-9);
        let (a, _) = s.gain_at(100);
        assert_relative_eq!(a[0], 0.031_622_776_6, epsilon = 1e-9);
        assert_relative_eq!(a[1], 100f64.powf(-0.82), epsilon = 1e-15);
        let f3 = GainSchedule::preset(SchedulePreset::Linear, Variant::DeterministicTransport, 2);
        assert_eq!(f3.gain_at(500).0, vec![0.02, 0.02]);
        assert_relative_eq!(f3.gain_at(501).0[1], 0.2 * 501f64.powf(-0.95), epsilon = 1e-15);
        assert_eq!(GainSchedule::preset(SchedulePreset::Lorenz63, Variant::Vanilla, 3).gain_at(100).0, vec![0.01; 3]);
        assert_eq!(GainSchedule::preset(SchedulePreset::Lorenz96, Variant::Vanilla, 1).gain_at(50).0, vec![0.03]);
        for p in [SchedulePreset::Linear, SchedulePreset::Lorenz63, SchedulePreset::Lorenz96] {
            for v in Variant::ALL {
                assert!(GainSchedule::preset(p, v, 2).validate().is_ok());
            }
        }
    }

    #[test]
    fn schedule_validation() {
        let rule = StepRule { a0: 0.1, t0: 5, scale: 1.0, alpha: 0.5 };
        assert!(GainSchedule::new(vec![rule], 1.0, 0.1).is_err());
        let rule = StepRule { alpha: 0.6, ..rule };
        assert!(GainSchedule::new(vec![rule], 1.0, 0.1).is_err());
        assert!(GainSchedule::new(vec![rule], 1.0, 0.05).is_ok());
        assert!(GainSchedule::new(vec![], 1.0, 0.05).is_err());
        assert!(GainSchedule::new(vec![rule], 0.0, 0.05).is_err());
    }

    fn scalar_setup(iterations: usize, a: f64) -> (crate::model::LinearFamily<f64>, IncrementPath<f64>, SPSAConfig<f64>) {
        let family = presets::scalar_drift_family::<f64>();
        let truth = family.build(&[-2.0]).unwrap();
        let (_, data) = simulate_truth_and_obs(&truth, 6, iterations, &SeedSpec::new(21));
        let schedule = GainSchedule::new(vec![StepRule { a0: a, t0: 1000, scale: a, alpha: 0.75 }], 1.0, 0.1).unwrap();
        let config = SPSAConfig {
            theta0: vec![-1.0],
            schedule,
            iterations,
            ml: MLConfig::new(3, 4, vec![16, 8], Variant::Vanilla, 1).unwrap(),
            seed: SeedSpec::new(5),
            propagate_with_variant: false,
        };
        (family, data, config)
    }

    #[test]
    fn zero_gain_keeps_theta() {
        let (family, data, config) = scalar_setup(5, 0.0);
        let traj = rml_spsa_run(&family, &data, &config).unwrap().into_result().unwrap();
        assert_eq!(traj.records.len(), 5);
        assert!(traj.records.iter().all(|r| r.theta == vec![-1.0]));
        assert!(traj.records.iter().all(|r| r.u_plus != r.u_minus));
    }

    #[test]
    fn common_random_numbers_cancel_at_equal_parameters() {
        let (family, data, config) = scalar_setup(2, 0.1);
        let ml = &config.ml;
        let window = data.window(0, 1).unwrap();
        let model = family.build(&[-1.3]).unwrap();
        let carrier = DMatrix::from_fn(1, 24, |_, j| j as f64 * 0.1);
        let seed = config.seed.child(1);
        let slice = |l: u32, n: usize| -> Result<DMatrix<f64>> { Ok(carrier.columns(if l == 3 { 0 } else { 16 }, n).into_owned()) };
        let a = ml_log_nc_with(&model, &window, ml, &seed, slice).unwrap().u_ml;
        let b = ml_log_nc_with(&model, &window, ml, &seed, slice).unwrap().u_ml;
        assert_eq!(a, b);
        assert_eq!(spsa_update(&[-1.3], &[0.1], 0.5, &[1.0], a, b), vec![-1.3]);
    }

    #[test]
    fn trajectories_are_reproducible() {
        let (family, data, config) = scalar_setup(6, 0.05);
        let a = rml_spsa_run(&family, &data, &config).unwrap();
        let b = rml_spsa_run(&family, &data, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.coordinate(0).len(), 7);
        let other = SPSAConfig { seed: SeedSpec::new(6), ..config };
        assert_ne!(a, rml_spsa_run(&family, &data, &other).unwrap());
    }

    #[test]
    fn divergence_is_reported_with_partial_trajectory() {
        let (family, data, mut config) = scalar_setup(4, 1e308);
        config.schedule.steps[0].a0 = 1e308;
        let traj = rml_spsa_run(&family, &data, &config).unwrap();
        assert!(traj.aborted.is_some());
        assert!(traj.records.len() < 4);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (family, data, config) = scalar_setup(3, 0.01);
        let long = SPSAConfig { iterations: 10, ..config.clone() };
        assert!(rml_spsa_run(&family, &data, &long).is_err());
        let wide = SPSAConfig { theta0: vec![-1.0, 1.0], ..config.clone() };
        assert!(rml_spsa_run(&family, &data, &wide).is_err());
        let none = SPSAConfig { iterations: 0, ..config };
        assert!(rml_spsa_run(&family, &data, &none).is_err());
    }
}
