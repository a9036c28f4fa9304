//! Rate experiments: reference values, repeated single-level and multilevel
//! estimates on a shared record, mean squared errors, costs and log-log fits.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::enkbf::Variant;
use crate::error::{FilterError, Result};
use crate::model::ModelSpec;
use crate::multilevel::{ml_log_nc, sample_allocation, single_level_cost, sl_log_nc, MLConfig};
use crate::paths::{IncrementPath, SeedSpec};
use crate::scalar::{compensated_sum, Real};

/// Seed scopes; every repetition draws from `scope.child(rep)`.
const REFERENCE_SCOPE: u64 = 0x5245_4600;
const SINGLE_LEVEL_SCOPE: u64 = 0x534c_0000;
const MULTILEVEL_SCOPE: u64 = 0x4d4c_0000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
}

impl LineFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }

    /// `x` at which the line reaches `y`.
    pub fn solve(&self, y: f64) -> f64 {
        (y - self.intercept) / self.slope
    }
}

/// Ordinary least-squares line through `(xs[i], ys[i])`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() {
        return Err(FilterError::DimensionMismatch {
            context: "fit abscissae and ordinates",
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(FilterError::InvalidConfig(format!("a line fit needs at least 2 points, got {}", xs.len())));
    }
    let n = xs.len() as f64;
    let mx = compensated_sum(xs.iter().copied()) / n;
    let my = compensated_sum(ys.iter().copied()) / n;
    let sxx = compensated_sum(xs.iter().map(|x| (x - mx) * (x - mx)));
    let sxy = compensated_sum(xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)));
    if !(sxx > 0.0) {
        return Err(FilterError::InvalidConfig("a line fit needs at least two distinct abscissae".into()));
    }
    let slope = sxy / sxx;
    Ok(LineFit {
        slope,
        intercept: my - slope * mx,
    })
}

/// Least-squares line through `(ln x, ln y)`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<LineFit> {
    if let Some(&(x, y)) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return Err(FilterError::NonPositivePoint { x, y });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    fit_line(&xs, &ys)
}

/// Sample mean and unbiased variance in iteration order.
pub fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = compensated_sum(values.iter().copied()) / n;
    let var = if values.len() > 1 {
        compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// `mean_r (values[r] - reference)²`.
pub fn mse_against(values: &[f64], reference: f64) -> f64 {
    compensated_sum(values.iter().map(|v| (v - reference) * (v - reference))) / values.len() as f64
}

/// Runs `job(rep)` for `rep = 0..reps` on the worker pool and returns the
/// results in repetition order.
pub fn repeat<R: Send, F: Fn(usize) -> Result<R> + Send + Sync>(reps: usize, job: F) -> Result<Vec<R>> {
    (0..reps).into_par_iter().map(job).collect()
}

/// Mean of `r_ref` independent single-level estimates at `l_ref`.
#[allow(clippy::too_many_arguments)]
pub fn reference_value<T: Real>(
    model: &ModelSpec<T>,
    obs: &IncrementPath<T>,
    l_ref: u32,
    r_ref: usize,
    n_ref: usize,
    variant: Variant,
    seed: &SeedSpec,
) -> Result<f64> {
    if r_ref == 0 {
        return Err(FilterError::InvalidConfig("reference needs at least one repetition".into()));
    }
    let scope = seed.child(REFERENCE_SCOPE);
    let values = repeat(r_ref, |r| Ok(sl_log_nc(model, obs, l_ref, n_ref, variant, &scope.child(r as u64))?.as_f64()))?;
    Ok(mean_and_variance(&values).0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    SL,
    ML,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::SL => "SL",
            Estimator::ML => "ML",
        })
    }
}

impl FromStr for Estimator {
    type Err = FilterError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SL" | "sl" => Ok(Estimator::SL),
            "ML" | "ml" => Ok(Estimator::ML),
            other => Err(FilterError::InvalidConfig(format!("unknown estimator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub estimator: Estimator,
    pub level: u32,
    pub variant: Variant,
    pub reps: usize,
    pub mse: f64,
    /// Fine-step cost: `N_L 2^L` or `Σ N_l 2^l`.
    pub cost: f64,
    /// Cost including the coarse legs of coupled pairs.
    pub full_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateExperimentConfig {
    pub variant: Variant,
    pub levels: Vec<u32>,
    pub l_star: u32,
    pub c0: f64,
    pub reps: usize,
    pub l_ref: u32,
    pub r_ref: usize,
    pub n_ref: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl RateExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let max = *self
            .levels
            .iter()
            .max()
            .ok_or_else(|| FilterError::InvalidConfig("no target levels".into()))?;
        if self.l_ref <= max {
            return Err(FilterError::InvalidConfig(format!(
                "reference level {} must exceed every target level (max {max})",
                self.l_ref
            )));
        }
        if self.reps < 2 || self.r_ref < 2 {
            return Err(FilterError::InvalidConfig("repetition counts must be at least 2".into()));
        }
        if self.n_ref < 2 {
            return Err(FilterError::TooFewParticles { got: self.n_ref });
        }
        if self.horizon == 0 {
            return Err(FilterError::InvalidConfig("horizon must be positive".into()));
        }
        for &l in &self.levels {
            sample_allocation(self.c0, self.l_star, l)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateOutcome {
    pub reference: f64,
    pub records: Vec<ExperimentRecord>,
}

/// Single-level and multilevel estimates repeated `reps` times for every
/// target level, scored against a high-level reference on the same record.
/// `sink` sees each record as soon as it is complete.
pub fn run_rate_experiment<T: Real, F: FnMut(&ExperimentRecord)>(
    model: &ModelSpec<T>,
    obs: &IncrementPath<T>,
    config: &RateExperimentConfig,
    mut sink: F,
) -> Result<RateOutcome> {
    config.validate()?;
    let obs = if obs.horizon() == config.horizon {
        obs.clone()
    } else {
        obs.window(0, config.horizon)?
    };
    let seed = SeedSpec::new(config.seed);
    let reference = reference_value(model, &obs, config.l_ref, config.r_ref, config.n_ref, config.variant, &seed)?;
    log::info!("reference value {reference:.10e}");
    let sl_scope = seed.child(SINGLE_LEVEL_SCOPE);
    let ml_scope = seed.child(MULTILEVEL_SCOPE);
    let mut records = Vec::with_capacity(2 * config.levels.len());
    for &l in &config.levels {
        let ml_cfg = MLConfig::allocated(config.c0, config.l_star, l, config.variant, config.horizon)?;
        let n_l = *ml_cfg.particles.last().expect("non-empty allocation");
        let sl = repeat(config.reps, |r| {
            Ok(sl_log_nc(model, &obs, l, n_l, config.variant, &sl_scope.child(r as u64))?.as_f64())
        })?;
        let sl_cost = single_level_cost(l, n_l);
        let record = ExperimentRecord {
            estimator: Estimator::SL,
            level: l,
            variant: config.variant,
            reps: config.reps,
            mse: mse_against(&sl, reference),
            cost: sl_cost,
            full_cost: sl_cost,
        };
        sink(&record);
        records.push(record);

        let ml = repeat(config.reps, |r| ml_log_nc(model, &obs, &ml_cfg, &ml_scope.child(r as u64)))?;
        let values: Vec<f64> = ml.iter().map(|e| e.u_ml.as_f64()).collect();
        let record = ExperimentRecord {
            estimator: Estimator::ML,
            level: l,
            variant: config.variant,
            reps: config.reps,
            mse: mse_against(&values, reference),
            cost: ml[0].cost(),
            full_cost: ml[0].full_cost(),
        };
        sink(&record);
        records.push(record);
        log::info!("level {l} done");
    }
    Ok(RateOutcome { reference, records })
}

/// Log-log fit of MSE against cost for one estimator.
pub fn estimator_fit(records: &[ExperimentRecord], estimator: Estimator) -> Result<LineFit> {
    let points: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.estimator == estimator)
        .map(|r| (r.cost, r.mse))
        .collect();
    fit_loglog_slope(&points)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedCost {
    pub level: u32,
    pub ml_mse: f64,
    pub ml_cost: f64,
    /// Single-level cost predicted by the single-level log-log fit to reach `ml_mse`.
    pub sl_cost: f64,
}

/// Compares each multilevel cost with the single-level cost needed for the
/// same MSE, read off the single-level log-log fit.
pub fn matched_mse_costs(records: &[ExperimentRecord]) -> Result<Vec<MatchedCost>> {
    let fit = estimator_fit(records, Estimator::SL)?;
    Ok(records
        .iter()
        .filter(|r| r.estimator == Estimator::ML)
        .map(|r| MatchedCost {
            level: r.level,
            ml_mse: r.mse,
            ml_cost: r.cost,
            sl_cost: fit.solve(r.mse.ln()).exp(),
        })
        .collect())
}
