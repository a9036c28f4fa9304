//! Coupled two-level ensembles and the multilevel normalizing-constant
//! estimator.
//!
//! A coupled pair at level `l` runs a fine ensemble on the `Δ_l` grid and a
//! coarse ensemble on the `Δ_{l-1}` grid from the same initial particles.
//! The coarse leg is driven by pairwise sums of the fine increments, so the
//! difference of their estimates has small variance. The multilevel
//! estimate is a single-level base term plus the telescoping differences.

use nalgebra::{DMatrix, DVectorView};
use rayon::prelude::*;

use crate::enkbf::{enkbf_run, Ensemble, FilterRun, FilterState, StepNoise, Variant};
use crate::error::{FilterError, Result};
use crate::model::ModelSpec;
use crate::paths::{pair_sum_into, IncrementPath, Level, NoiseSource, ParticleStreams, Purpose, SeedSpec};
use crate::scalar::{compensated_sum, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct MLConfig {
    pub l_star: u32,
    pub l_target: u32,
    /// Particle counts for levels `l_star..=l_target`.
    pub particles: Vec<usize>,
    pub variant: Variant,
    pub horizon: usize,
}

impl MLConfig {
    pub fn new(l_star: u32, l_target: u32, particles: Vec<usize>, variant: Variant, horizon: usize) -> Result<Self> {
        let cfg = Self {
            l_star,
            l_target,
            particles,
            variant,
            horizon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Config with the default allocation for a given `C0`.
    pub fn allocated(c0: f64, l_star: u32, l_target: u32, variant: Variant, horizon: usize) -> Result<Self> {
        Self::new(l_star, l_target, sample_allocation(c0, l_star, l_target)?, variant, horizon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_star > self.l_target {
            return Err(FilterError::InvalidConfig(format!(
                "start level {} above target level {}",
                self.l_star, self.l_target
            )));
        }
        let expected = (self.l_target - self.l_star + 1) as usize;
        if self.particles.len() != expected {
            return Err(FilterError::InvalidConfig(format!(
                "expected {expected} particle counts, got {}",
                self.particles.len()
            )));
        }
        for (l, &n) in self.levels().zip(&self.particles) {
            if n < 2 {
                return Err(FilterError::AllocationTooSmall { level: l, n });
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> impl Iterator<Item = u32> + '_ {
        self.l_star..=self.l_target
    }

    pub fn particles_at(&self, l: u32) -> usize {
        self.particles[(l - self.l_star) as usize]
    }
}

/// `N_l = floor(C0 · 2^{2L-l} · (L - l_star + 1))` for `l = l_star..=L`.
pub fn sample_allocation(c0: f64, l_star: u32, l_target: u32) -> Result<Vec<usize>> {
    if !(c0 > 0.0) || !c0.is_finite() {
        return Err(FilterError::InvalidConfig(format!("allocation constant must be positive, got {c0}")));
    }
    if l_star > l_target {
        return Err(FilterError::InvalidConfig(format!(
            "start level {l_star} above target level {l_target}"
        )));
    }
    let span = f64::from(l_target - l_star + 1);
    (l_star..=l_target)
        .map(|l| {
            let n = (c0 * 2f64.powi((2 * l_target - l) as i32) * span).floor();
            if n < 2.0 {
                Err(FilterError::AllocationTooSmall { level: l, n: n as usize })
            } else {
                Ok(n as usize)
            }
        })
        .collect()
}

/// Fine-step cost `N · 2^l` of a single-level run.
pub fn single_level_cost(l: u32, n: usize) -> f64 {
    n as f64 * 2f64.powi(l as i32)
}

/// Cost `N (2^l + 2^{l-1})` of a coupled pair, counting both legs.
pub fn coupled_cost(l: u32, n: usize) -> f64 {
    n as f64 * (2f64.powi(l as i32) + 2f64.powi(l as i32 - 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledRunOutput<T: Real> {
    pub u_fine: T,
    pub u_coarse: T,
    /// Both legs: `N (2^l + 2^{l-1})`.
    pub cost: f64,
    /// Fine leg only: `N 2^l`.
    pub fine_cost: f64,
    pub fine: FilterRun<T>,
    pub coarse: FilterRun<T>,
}

impl<T: Real> CoupledRunOutput<T> {
    pub fn difference(&self) -> T {
        self.u_fine - self.u_coarse
    }
}

/// Coupled pair at level `l` with fresh initial particles and per-particle
/// drivers, all labelled by `l`.
pub fn coupled_run<T: Real>(
    model: &ModelSpec<T>,
    obs: &IncrementPath<T>,
    l: u32,
    n: usize,
    variant: Variant,
    seed: &SeedSpec,
) -> Result<CoupledRunOutput<T>> {
    let init = Ensemble::initial(model, Level(l), n, seed)?;
    let mut noise = ParticleStreams::new(seed, Purpose::FilterNoise, l, n);
    coupled_run_from(model, obs, l, init.particles, variant, &mut noise)
}

/// Coupled pair from explicit initial particles; `noise` yields fine-grid
/// increments and the coarse leg receives their pairwise sums.
pub fn coupled_run_from<T: Real, S: NoiseSource<T> + ?Sized>(
    model: &ModelSpec<T>,
    obs: &IncrementPath<T>,
    l: u32,
    init: DMatrix<T>,
    variant: Variant,
    noise: &mut S,
) -> Result<CoupledRunOutput<T>> {
    if l == 0 {
        return Err(FilterError::InvalidConfig("coupled runs need level >= 1".into()));
    }
    check_dims(model, obs, &init)?;
    let n = init.ncols();
    let fine_obs = obs.coarsen(l)?;
    let coarse_obs = fine_obs.coarsen(l - 1)?;
    let mut fine = FilterState::new(Level(l), init.clone())?;
    let mut coarse = FilterState::new(Level(l - 1), init)?;

    let (dx, dy) = (model.dx(), model.dy());
    let mut first = StepNoise::buffers(variant, dx, dy, n);
    let mut second = StepNoise::buffers(variant, dx, dy, n);
    let mut summed = StepNoise::buffers(variant, dx, dy, n);
    for k in 0..coarse_obs.steps() {
        first.draw(noise);
        fine.advance(fine_obs.row_view(2 * k), model, variant, &first)?;
        second.draw(noise);
        fine.advance(fine_obs.row_view(2 * k + 1), model, variant, &second)?;
        sum_buffers(&first, &second, &mut summed);
        coarse.advance(coarse_obs.row_view(k), model, variant, &summed)?;
    }
    let fine = fine.finish();
    let coarse = coarse.finish();
    Ok(CoupledRunOutput {
        u_fine: fine.log_nc.u,
        u_coarse: coarse.log_nc.u,
        cost: coupled_cost(l, n),
        fine_cost: single_level_cost(l, n),
        fine,
        coarse,
    })
}

fn sum_buffers<T: Real>(a: &StepNoise<T>, b: &StepNoise<T>, out: &mut StepNoise<T>) {
    if let (Some(x), Some(y), Some(o)) = (&a.dw, &b.dw, &mut out.dw) {
        pair_sum_into(x, y, o);
    }
    if let (Some(x), Some(y), Some(o)) = (&a.dv, &b.dv, &mut out.dv) {
        pair_sum_into(x, y, o);
    }
}

fn check_dims<T: Real>(model: &ModelSpec<T>, obs: &IncrementPath<T>, init: &DMatrix<T>) -> Result<()> {
    if init.nrows() != model.dx() {
        return Err(FilterError::DimensionMismatch {
            context: "ensemble state",
            expected: model.dx(),
            got: init.nrows(),
        });
    }
    if obs.dim() != model.dy() {
        return Err(FilterError::DimensionMismatch {
            context: "observation record",
            expected: model.dy(),
            got: obs.dim(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelContribution<T: Real> {
    pub level: u32,
    /// Fine-leg estimate (the base estimate at `l_star`).
    pub u_fine: T,
    /// Coarse-leg estimate; zero for the base term.
    pub u_coarse: T,
    pub contribution: T,
    /// Fine-step cost `N_l 2^l`.
    pub cost: f64,
    /// Cost including coarse legs.
    pub full_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MLEstimate<T: Real> {
    pub u_ml: T,
    pub per_level: Vec<LevelContribution<T>>,
}

impl<T: Real> MLEstimate<T> {
    pub fn cost(&self) -> f64 {
        self.per_level.iter().map(|c| c.cost).sum()
    }

    pub fn full_cost(&self) -> f64 {
        self.per_level.iter().map(|c| c.full_cost).sum()
    }

    pub fn normalizing_constant(&self) -> T {
        num_traits::Float::exp(self.u_ml)
    }
}

struct LevelRuns<T: Real> {
    level: u32,
    fine: FilterRun<T>,
    coarse: Option<FilterRun<T>>,
    cost: f64,
    full_cost: f64,
}

fn obs_window<T: Real>(obs: &IncrementPath<T>, horizon: usize) -> Result<IncrementPath<T>> {
    if obs.horizon() == horizon {
        Ok(obs.clone())
    } else {
        obs.window(0, horizon)
    }
}

/// Runs every level of the estimator. `init(l, n)` provides the initial
/// particles for level `l`; level `l` draws its noise from streams labelled
/// `l`, so levels are independent and can run in any order.
fn run_levels<T, F>(model: &ModelSpec<T>, obs: &IncrementPath<T>, config: &MLConfig, seed: &SeedSpec, init: F) -> Result<Vec<LevelRuns<T>>>
where
    T: Real,
    F: Fn(u32, usize) -> Result<DMatrix<T>> + Sync,
{
    config.validate()?;
    let obs = obs_window(obs, config.horizon)?;
    let levels: Vec<u32> = config.levels().collect();
    levels
        .par_iter()
        .map(|&l| {
            let n = config.particles_at(l);
            let particles = init(l, n)?;
            let mut noise = ParticleStreams::new(seed, Purpose::FilterNoise, l, n);
            if l == config.l_star {
                let ens = Ensemble::new(Level(l), particles)?;
                let run = crate::enkbf::run_filter(model, &obs, config.variant, ens, &mut noise)?;
                Ok(LevelRuns {
                    level: l,
                    fine: run,
                    coarse: None,
                    cost: single_level_cost(l, n),
                    full_cost: single_level_cost(l, n),
                })
            } else {
                let out = coupled_run_from(model, &obs, l, particles, config.variant, &mut noise)?;
                Ok(LevelRuns {
                    level: l,
                    fine: out.fine,
                    coarse: Some(out.coarse),
                    cost: out.fine_cost,
                    full_cost: out.cost,
                })
            }
        })
        .collect()
}

fn fresh_init<'a, T: Real>(model: &'a ModelSpec<T>, seed: &'a SeedSpec) -> impl Fn(u32, usize) -> Result<DMatrix<T>> + Sync + 'a {
    move |l, n| Ensemble::initial(model, Level(l), n, seed).map(|e| e.particles)
}

/// Multilevel log-normalizing-constant estimate over `[0, horizon]`.
pub fn ml_log_nc<T: Real>(model: &ModelSpec<T>, obs: &IncrementPath<T>, config: &MLConfig, seed: &SeedSpec) -> Result<MLEstimate<T>> {
    ml_log_nc_with(model, obs, config, seed, fresh_init(model, seed))
}

/// As [`ml_log_nc`] with caller-supplied initial particles per level.
pub fn ml_log_nc_with<T, F>(model: &ModelSpec<T>, obs: &IncrementPath<T>, config: &MLConfig, seed: &SeedSpec, init: F) -> Result<MLEstimate<T>>
where
    T: Real,
    F: Fn(u32, usize) -> Result<DMatrix<T>> + Sync,
{
    let runs = run_levels(model, obs, config, seed, init)?;
    let per_level: Vec<LevelContribution<T>> = runs
        .iter()
        .map(|r| {
            let u_fine = r.fine.log_nc.u;
            let u_coarse = r.coarse.as_ref().map_or(T::zero(), |c| c.log_nc.u);
            let contribution = if r.coarse.is_some() { u_fine - u_coarse } else { u_fine };
            LevelContribution {
                level: r.level,
                u_fine,
                u_coarse,
                contribution,
                cost: r.cost,
                full_cost: r.full_cost,
            }
        })
        .collect();
    let u_ml = compensated_sum(per_level.iter().map(|c| c.contribution));
    Ok(MLEstimate { u_ml, per_level })
}

/// Single-level estimate at `l` with the streams the multilevel base term
/// would use at that level.
pub fn sl_log_nc<T: Real>(model: &ModelSpec<T>, obs: &IncrementPath<T>, l: u32, n: usize, variant: Variant, seed: &SeedSpec) -> Result<T> {
    Ok(enkbf_run(model, obs, l, n, variant, seed)?.log_nc.u)
}

fn empirical<T: Real, P: Fn(DVectorView<'_, T>) -> T>(particles: &DMatrix<T>, phi: &P) -> T {
    let n = particles.ncols();
    let mut acc = T::zero();
    for j in 0..n {
        acc += phi(particles.column(j));
    }
    acc / T::c(n as f64)
}

/// Multilevel estimate of the filter expectation of `phi` at the final time.
pub fn ml_filter_estimate<T, P>(model: &ModelSpec<T>, obs: &IncrementPath<T>, config: &MLConfig, seed: &SeedSpec, phi: P) -> Result<T>
where
    T: Real,
    P: Fn(DVectorView<'_, T>) -> T,
{
    let runs = run_levels(model, obs, config, seed, fresh_init(model, seed))?;
    let terms = runs.iter().map(|r| {
        let fine = empirical(&r.fine.final_ensemble.particles, &phi);
        match &r.coarse {
            Some(c) => fine - empirical(&c.final_ensemble.particles, &phi),
            None => fine,
        }
    });
    Ok(compensated_sum(terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enkbf::run_filter;
    use crate::kalman::kbf_run;
    use crate::model::{build_linear_model, presets, random_unit_matrix};
    use crate::paths::{simulate_truth_and_obs, PairSummed, Silent};
    use nalgebra::DVector;
    use rand::SeedableRng;

    fn ou5() -> ModelSpec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        presets::ou5(random_unit_matrix(5, 5, &mut rng)).unwrap()
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(sample_allocation(0.04, 7, 9).unwrap(), vec![245, 122, 61]);
        let base = sample_allocation(0.04, 5, 8).unwrap();
        let doubled = sample_allocation(0.08, 5, 8).unwrap();
        for (a, b) in base.iter().zip(&doubled) {
            assert!(*b >= 2 * a && *b <= 2 * a + 1);
        }
        assert_eq!(sample_allocation(0.5, 6, 6).unwrap(), vec![32]);
        assert_eq!(
            sample_allocation(0.001, 2, 3).unwrap_err(),
            FilterError::AllocationTooSmall { level: 2, n: 0 }
        );
        assert!(sample_allocation(-1.0, 2, 3).is_err());
        assert!(sample_allocation(1.0, 4, 3).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MLConfig::new(3, 5, vec![8, 4, 2], Variant::Vanilla, 1).is_ok());
        assert!(MLConfig::new(3, 5, vec![8, 4], Variant::Vanilla, 1).is_err());
        assert_eq!(
            MLConfig::new(3, 4, vec![8, 1], Variant::Vanilla, 1).unwrap_err(),
            FilterError::AllocationTooSmall { level: 4, n: 1 }
        );
        assert!(MLConfig::new(5, 4, vec![8], Variant::Vanilla, 1).is_err());
    }

    #[test]
    fn costs() {
        assert_eq!(single_level_cost(3, 10), 80.0);
        assert_eq!(coupled_cost(3, 10), 120.0);
    }

    #[test]
    fn coarse_leg_matches_summed_single_level_run() {
        let model = ou5();
        let (_, obs) = simulate_truth_and_obs(&model, 8, 1, &SeedSpec::new(2));
        let seed = SeedSpec::new(7);
        for variant in Variant::ALL {
            for l in 3..=5 {
                let out = coupled_run(&model, &obs, l, 12, variant, &seed).unwrap();
                let init = Ensemble::initial(&model, Level(l), 12, &seed).unwrap();
                let fine_alone = run_filter(
                    &model,
                    &obs,
                    variant,
                    init.clone(),
                    &mut ParticleStreams::new(&seed, Purpose::FilterNoise, l, 12),
                )
                .unwrap();
                assert_eq!(out.fine, fine_alone);
                let mut summed = PairSummed::new(ParticleStreams::new(&seed, Purpose::FilterNoise, l, 12));
                let coarse_alone = run_filter(
                    &model,
                    &obs,
                    variant,
                    Ensemble::new(Level(l - 1), init.particles).unwrap(),
                    &mut summed,
                )
                .unwrap();
                assert_eq!(out.coarse, coarse_alone);
                assert_eq!(out.u_coarse, coarse_alone.log_nc.u);
            }
        }
    }

    #[test]
    fn deterministic_pair_converges_at_first_order() {
        let model = build_linear_model(
            DMatrix::from_element(1, 1, -0.8),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let (_, obs) = simulate_truth_and_obs(&model, 12, 1, &SeedSpec::new(4));
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for l in 4..=9 {
            let init = DMatrix::<f64>::from_element(1, 2, 1.0);
            let out = coupled_run_from(&model, &obs, l, init, Variant::Vanilla, &mut Silent).unwrap();
            let kbf = kbf_run(&model, &obs, l).unwrap();
            for (a, b) in out.fine.mean_path.iter().zip(&kbf.means) {
                assert!((a[0] - b[0]).abs() < 1e-12);
            }
            xs.push(f64::from(l));
            ys.push(out.difference().abs().log2());
        }
        let slope = crate::harness::fit_line(&xs, &ys).unwrap().slope;
        assert!((-1.3..=-0.7).contains(&slope), "slope {slope}");
    }

    #[test]
    fn collapsed_estimator_equals_single_level() {
        let model = ou5();
        let (_, obs) = simulate_truth_and_obs(&model, 8, 1, &SeedSpec::new(3));
        let seed = SeedSpec::new(11);
        for variant in Variant::ALL {
            let cfg = MLConfig::new(5, 5, vec![20], variant, 1).unwrap();
            let ml = ml_log_nc(&model, &obs, &cfg, &seed).unwrap();
            assert_eq!(ml.u_ml, sl_log_nc(&model, &obs, 5, 20, variant, &seed).unwrap());
            assert_eq!(ml.per_level.len(), 1);
            let first = |x: DVectorView<'_, f64>| x[0];
            let est = ml_filter_estimate(&model, &obs, &cfg, &seed, first).unwrap();
            let run = enkbf_run(&model, &obs, 5, 20, variant, &seed).unwrap();
            assert_eq!(est, run.final_ensemble.particles.row(0).sum() / 20.0);
        }
    }

    #[test]
    fn telescoping_sum_and_constant_test_function() {
        let model = ou5();
        let (_, obs) = simulate_truth_and_obs(&model, 8, 1, &SeedSpec::new(3));
        let seed = SeedSpec::new(12);
        let cfg = MLConfig::new(3, 6, vec![40, 20, 10, 5], Variant::Vanilla, 1).unwrap();
        let ml = ml_log_nc(&model, &obs, &cfg, &seed).unwrap();
        assert_eq!(ml.u_ml, compensated_sum(ml.per_level.iter().map(|c| c.contribution)));
        assert_eq!(ml.per_level[0].contribution, sl_log_nc(&model, &obs, 3, 40, Variant::Vanilla, &seed).unwrap());
        for c in &ml.per_level[1..] {
            let pair = coupled_run(&model, &obs, c.level, cfg.particles_at(c.level), Variant::Vanilla, &seed).unwrap();
            assert_eq!(c.contribution, pair.difference());
        }
        assert_eq!(ml.cost(), 40.0 * 8.0 + 20.0 * 16.0 + 10.0 * 32.0 + 5.0 * 64.0);
        assert_eq!(ml.full_cost(), 40.0 * 8.0 + 20.0 * 24.0 + 10.0 * 48.0 + 5.0 * 96.0);
        let one = ml_filter_estimate(&model, &obs, &cfg, &seed, |_| 1.0).unwrap();
        assert_eq!(one, 1.0);
    }

    #[test]
    fn blind_model_gives_zero() {
        let model = build_linear_model(
            DMatrix::from_element(1, 1, -0.8),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.1),
            DMatrix::from_element(1, 1, 0.05),
        )
        .unwrap();
        let (_, obs) = simulate_truth_and_obs(&model, 7, 2, &SeedSpec::new(3));
        for variant in Variant::ALL {
            let cfg = MLConfig::new(3, 5, vec![16, 8, 4], variant, 2).unwrap();
            assert_eq!(ml_log_nc(&model, &obs, &cfg, &SeedSpec::new(1)).unwrap().u_ml, 0.0);
        }
    }

    #[test]
    fn level_order_does_not_matter() {
        let model = ou5();
        let (_, obs) = simulate_truth_and_obs(&model, 8, 1, &SeedSpec::new(3));
        let seed = SeedSpec::new(13);
        let cfg = MLConfig::new(3, 5, vec![16, 8, 4], Variant::Deterministic, 1).unwrap();
        let together = ml_log_nc(&model, &obs, &cfg, &seed).unwrap();
        let reversed: Vec<f64> = (3..=5)
            .rev()
            .map(|l| {
                if l == 3 {
                    sl_log_nc(&model, &obs, 3, 16, Variant::Deterministic, &seed).unwrap()
                } else {
                    coupled_run(&model, &obs, l, cfg.particles_at(l), Variant::Deterministic, &seed)
                        .unwrap()
                        .difference()
                }
            })
            .collect();
        for (c, r) in together.per_level.iter().zip(reversed.iter().rev()) {
            assert_eq!(c.contribution, *r);
        }
    }

    #[test]
    fn rejects_level_zero_pair() {
        let model = presets::ou1::<f64>().unwrap();
        let (_, obs) = simulate_truth_and_obs(&model, 4, 1, &SeedSpec::new(3));
        let init = DMatrix::from_element(1, 3, 0.0);
        assert!(coupled_run_from(&model, &obs, 0, init, Variant::Vanilla, &mut Silent).is_err());
    }
}
