//! Configuration files, data sets and CSV output.
//!
//! Floats are written as `{:.16e}` (17 significant digits) so every value
//! reads back bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::enkbf::Variant;
use crate::error::{FilterError, Result};
use crate::harness::{ExperimentRecord, RateExperimentConfig};
use crate::kalman::KbfPath;
use crate::model::{presets, random_unit_matrix, ModelFamily, ModelSpec};
use crate::multilevel::{sample_allocation, MLConfig, MLEstimate};
use crate::paths::{simulate_truth_and_obs, IncrementPath, Level, Purpose, SeedSpec};
use crate::spsa::{GainSchedule, SPSAConfig, SchedulePreset, SpsaTrajectory, StepRule};

pub const OBS_FILE: &str = "obs.csv";
pub const META_FILE: &str = "meta.toml";

/// Full-precision float formatting.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| FilterError::InvalidConfig(format!("cannot parse {what} value {s:?}")))
}

/// Model selection shared by data generation and experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `ou5`, `ou1`, `linear`, `scalar-drift`, `lorenz63` (`l63`) or `lorenz96` (`l96`).
    #[serde(alias = "kind")]
    pub preset: String,
    /// Seed for a random observation matrix; defaults to the data seed.
    #[serde(default)]
    pub c_seed: Option<u64>,
    /// Parameter value for family presets; defaults to the preset's truth.
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    /// State dimension for `linear` and `lorenz96`.
    #[serde(default)]
    pub dx: Option<usize>,
    /// Lorenz 96 only: Gaussian rather than point-mass initial law.
    #[serde(default)]
    pub spread_initial: Option<bool>,
}

impl ModelConfig {
    /// Preset name with short aliases resolved.
    pub fn kind(&self) -> &str {
        match self.preset.as_str() {
            "l63" => "lorenz63",
            "l96" => "lorenz96",
            other => other,
        }
    }

    pub fn preset(name: &str) -> Self {
        Self {
            preset: name.to_string(),
            c_seed: None,
            theta: None,
            dx: None,
            spread_initial: None,
        }
    }

    fn observation_matrix(&self, rows: usize, cols: usize, fallback_seed: u64) -> DMatrix<f64> {
        let seed = SeedSpec::new(self.c_seed.unwrap_or(fallback_seed));
        let mut rng = seed.stream(Purpose::ObservationMatrix, 0, 0);
        random_unit_matrix(rows, cols, &mut rng)
    }

    /// The parametric family behind the preset, if it has one.
    pub fn family(&self, fallback_seed: u64) -> Result<Option<Box<dyn ModelFamily<f64>>>> {
        Ok(match self.kind() {
            "ou5" | "ou1" => None,
            "linear" => {
                let d = self.dx.unwrap_or(2);
                Some(Box::new(presets::linear_family(self.observation_matrix(d, d, fallback_seed))))
            }
            "scalar-drift" => Some(Box::new(presets::scalar_drift_family())),
            "lorenz63" => Some(Box::new(presets::lorenz63_family(3))),
            "lorenz96" => Some(Box::new(presets::lorenz96_family(
                self.dx.unwrap_or(40),
                self.spread_initial.unwrap_or(false),
            ))),
            other => return Err(FilterError::InvalidConfig(format!("unknown model preset {other:?}"))),
        })
    }

    /// Default true parameter of each family preset.
    pub fn default_theta(&self) -> Option<Vec<f64>> {
        match self.kind() {
            "linear" => Some(vec![-2.0, 1.0]),
            "scalar-drift" => Some(vec![-2.0]),
            "lorenz63" => Some(vec![10.0, 28.0, 8.0 / 3.0]),
            "lorenz96" => Some(vec![8.0]),
            _ => None,
        }
    }

    pub fn schedule_preset(&self) -> SchedulePreset {
        match self.kind() {
            "lorenz63" => SchedulePreset::Lorenz63,
            "lorenz96" => SchedulePreset::Lorenz96,
            _ => SchedulePreset::Linear,
        }
    }

    /// Builds the model at `theta` (or the configured/default parameter).
    pub fn build_at(&self, theta: Option<&[f64]>, fallback_seed: u64) -> Result<ModelSpec<f64>> {
        match self.kind() {
            "ou5" => presets::ou5(self.observation_matrix(5, 5, fallback_seed)),
            "ou1" => presets::ou1(),
            _ => {
                let family = self.family(fallback_seed)?.expect("family preset");
                let theta = theta
                    .map(<[f64]>::to_vec)
                    .or_else(|| self.theta.clone())
                    .or_else(|| self.default_theta())
                    .expect("family presets have a default parameter");
                family.build(&theta)
            }
        }
    }

    pub fn build(&self, fallback_seed: u64) -> Result<ModelSpec<f64>> {
        self.build_at(None, fallback_seed)
    }
}

/// Header of a generated data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMeta {
    pub model: ModelConfig,
    pub level: u32,
    pub horizon: usize,
    pub seed: u64,
    /// Observation matrix rows, for reference.
    pub c: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub meta: DataMeta,
    pub model: ModelSpec<f64>,
    pub obs: IncrementPath<f64>,
}

pub fn generate_dataset(model_cfg: &ModelConfig, level: u32, horizon: usize, seed: u64) -> Result<DataSet> {
    let model = model_cfg.build(seed)?;
    let (_, obs) = simulate_truth_and_obs(&model, level, horizon, &SeedSpec::new(seed));
    if let Some(pos) = obs.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(FilterError::NonFiniteState { step: pos / obs.dim() });
    }
    let c = model.c().row_iter().map(|r| r.iter().copied().collect()).collect();
    Ok(DataSet {
        meta: DataMeta {
            model: model_cfg.clone(),
            level,
            horizon,
            seed,
            c,
        },
        model,
        obs,
    })
}

pub fn write_obs<W: Write>(out: W, obs: &IncrementPath<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string()];
    header.extend((1..=obs.dim()).map(|i| format!("dY_{i}")));
    w.write_record(&header)?;
    for k in 0..obs.steps() {
        let mut row = vec![k.to_string()];
        row.extend(obs.row(k).iter().map(|v| fmt_f64(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_obs<R: Read>(input: R, level: u32, horizon: usize) -> Result<IncrementPath<f64>> {
    let mut r = csv::Reader::from_reader(input);
    let dim = r.headers()?.len().saturating_sub(1);
    let mut data = Vec::new();
    for (k, row) in r.records().enumerate() {
        let row = row?;
        if row.len() != dim + 1 {
            return Err(FilterError::DimensionMismatch {
                context: "observation row",
                expected: dim + 1,
                got: row.len(),
            });
        }
        if row[0].trim() != k.to_string() {
            return Err(FilterError::InvalidConfig(format!("observation rows out of order at {k}")));
        }
        for v in row.iter().skip(1) {
            data.push(parse_f64(v, "observation")?);
        }
    }
    IncrementPath::from_rows(Level(level), horizon, dim, data)
}

pub fn write_dataset(dir: &Path, data: &DataSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = toml::to_string(&data.meta).map_err(|e| FilterError::Io(e.to_string()))?;
    fs::write(dir.join(META_FILE), meta)?;
    write_obs(fs::File::create(dir.join(OBS_FILE))?, &data.obs)
}

pub fn read_dataset(dir: &Path) -> Result<DataSet> {
    let text = fs::read_to_string(dir.join(META_FILE))?;
    let meta: DataMeta = toml::from_str(&text).map_err(|e| FilterError::InvalidConfig(e.to_string()))?;
    let obs = read_obs(fs::File::open(dir.join(OBS_FILE))?, meta.level, meta.horizon)?;
    let model = meta.model.build(meta.seed)?;
    if obs.dim() != model.dy() {
        return Err(FilterError::DimensionMismatch {
            context: "stored observation width",
            expected: model.dy(),
            got: obs.dim(),
        });
    }
    Ok(DataSet { meta, model, obs })
}

/// Observation record settings inside an experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub level: Option<u32>,
    #[serde(default = "one")]
    pub horizon: usize,
    #[serde(default = "one_u64")]
    pub seed: u64,
}

fn one() -> usize {
    1
}
fn one_u64() -> u64 {
    1
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            level: None,
            horizon: 1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesSection {
    pub variant: String,
    pub levels: Vec<u32>,
    pub l_star: u32,
    pub c0: f64,
    pub reps: usize,
    pub l_ref: u32,
    pub r_ref: usize,
    pub n_ref: usize,
    #[serde(default = "one_u64")]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpsaSection {
    pub variant: String,
    pub theta0: Vec<f64>,
    /// Parameter generating the synthetic record; defaults to the preset's.
    #[serde(default)]
    pub theta_true: Option<Vec<f64>>,
    #[serde(rename = "M")]
    pub iterations: usize,
    pub l_star: u32,
    #[serde(rename = "L")]
    pub l_target: u32,
    pub c0: f64,
    #[serde(default = "one_u64")]
    pub seed: u64,
    #[serde(default)]
    pub a0: Option<f64>,
    #[serde(default)]
    pub t0: Option<u64>,
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub scale: Option<Vec<f64>>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub propagate_with_variant: bool,
}

/// An experiment file: a model, a record and a `rates` or `spsa` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub rates: Option<RatesSection>,
    #[serde(default)]
    pub spsa: Option<SpsaSection>,
}

impl ExperimentFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FilterError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Rate-experiment settings; the record defaults to level `l_ref + 2`.
    pub fn rates(&self) -> Result<(RateExperimentConfig, u32)> {
        let r = self
            .rates
            .as_ref()
            .ok_or_else(|| FilterError::InvalidConfig("missing [rates] section".into()))?;
        let cfg = RateExperimentConfig {
            variant: r.variant.parse()?,
            levels: r.levels.clone(),
            l_star: r.l_star,
            c0: r.c0,
            reps: r.reps,
            l_ref: r.l_ref,
            r_ref: r.r_ref,
            n_ref: r.n_ref,
            horizon: self.data.horizon,
            seed: r.seed,
        };
        cfg.validate()?;
        Ok((cfg, self.data.level.unwrap_or(r.l_ref + 2)))
    }

    /// Estimation settings; the record defaults to level `L + 2` and must
    /// span at least `M` unit windows.
    pub fn spsa(&self) -> Result<(SPSAConfig<f64>, Vec<f64>, u32)> {
        let s = self
            .spsa
            .as_ref()
            .ok_or_else(|| FilterError::InvalidConfig("missing [spsa] section".into()))?;
        let variant: Variant = s.variant.parse()?;
        let d = s.theta0.len();
        let mut schedule = GainSchedule::preset(self.model.schedule_preset(), variant, d);
        if let Some(beta) = s.beta {
            schedule.beta = beta;
        }
        for (k, rule) in schedule.steps.iter_mut().enumerate() {
            *rule = StepRule {
                a0: s.a0.unwrap_or(rule.a0),
                t0: s.t0.unwrap_or(rule.t0),
                scale: pick(&s.scale, k, rule.scale)?,
                alpha: pick(&s.alpha, k, rule.alpha)?,
            };
        }
        schedule.validate()?;
        let particles = sample_allocation(s.c0, s.l_star, s.l_target)?;
        let config = SPSAConfig {
            theta0: s.theta0.clone(),
            schedule,
            iterations: s.iterations,
            ml: MLConfig::new(s.l_star, s.l_target, particles, variant, 1)?,
            seed: SeedSpec::new(s.seed),
            propagate_with_variant: s.propagate_with_variant,
        };
        config.validate()?;
        let truth = s
            .theta_true
            .clone()
            .or_else(|| self.model.theta.clone())
            .or_else(|| self.model.default_theta())
            .ok_or_else(|| FilterError::InvalidConfig(format!("preset {:?} has no parameters", self.model.preset)))?;
        Ok((config, truth, self.data.level.unwrap_or(s.l_target + 2)))
    }
}

/// Per-coordinate override: one value for all coordinates or one each.
fn pick(values: &Option<Vec<f64>>, k: usize, default: f64) -> Result<f64> {
    match values.as_deref() {
        None => Ok(default),
        Some([v]) => Ok(*v),
        Some(vs) => vs
            .get(k)
            .copied()
            .ok_or_else(|| FilterError::InvalidConfig(format!("gain list has {} entries, coordinate {k} missing", vs.len()))),
    }
}

pub const RECORD_HEADER: [&str; 7] = ["estimator", "level", "variant", "reps", "mse", "cost", "full_cost"];

pub fn record_row(r: &ExperimentRecord) -> Vec<String> {
    vec![
        r.estimator.to_string(),
        r.level.to_string(),
        r.variant.tag().to_string(),
        r.reps.to_string(),
        fmt_f64(r.mse),
        fmt_f64(r.cost),
        fmt_f64(r.full_cost),
    ]
}

pub fn write_records<W: Write>(out: W, records: &[ExperimentRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RECORD_HEADER)?;
    for r in records {
        w.write_record(record_row(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<ExperimentRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RECORD_HEADER {
        return Err(FilterError::InvalidConfig(format!("unexpected record header {header:?}")));
    }
    r.records()
        .map(|row| {
            let row = row?;
            let int = |i: usize| -> Result<usize> {
                row[i]
                    .parse()
                    .map_err(|_| FilterError::InvalidConfig(format!("bad integer {:?}", &row[i])))
            };
            Ok(ExperimentRecord {
                estimator: row[0].parse()?,
                level: int(1)? as u32,
                variant: row[2].parse()?,
                reps: int(3)?,
                mse: parse_f64(&row[4], "mse")?,
                cost: parse_f64(&row[5], "cost")?,
                full_cost: parse_f64(&row[6], "full_cost")?,
            })
        })
        .collect()
}

/// `step,t,m_1..m_d,P_11..P_dd` (diagonal of `P`).
pub fn write_kbf_path<W: Write>(out: W, path: &KbfPath<f64>) -> Result<()> {
    let d = path.means.first().map_or(0, |m| m.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string(), "t".to_string()];
    header.extend((1..=d).map(|i| format!("m_{i}")));
    header.extend((1..=d).map(|i| format!("P_{i}{i}")));
    w.write_record(&header)?;
    let delta: f64 = path.level.delta();
    for (k, (m, p)) in path.means.iter().zip(&path.covs).enumerate() {
        let mut row = vec![k.to_string(), fmt_f64(k as f64 * delta)];
        row.extend(m.iter().map(|v| fmt_f64(*v)));
        row.extend((0..d).map(|i| fmt_f64(p[(i, i)])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `level,u_fine,u_coarse,contribution,cost,full_cost` plus a `total` row.
pub fn write_ml_estimate<W: Write>(out: W, est: &MLEstimate<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["level", "u_fine", "u_coarse", "contribution", "cost", "full_cost"])?;
    for c in &est.per_level {
        w.write_record([
            c.level.to_string(),
            fmt_f64(c.u_fine),
            fmt_f64(c.u_coarse),
            fmt_f64(c.contribution),
            fmt_f64(c.cost),
            fmt_f64(c.full_cost),
        ])?;
    }
    w.write_record([
        "total".to_string(),
        String::new(),
        String::new(),
        fmt_f64(est.u_ml),
        fmt_f64(est.cost()),
        fmt_f64(est.full_cost()),
    ])?;
    w.flush()?;
    Ok(())
}

/// `iter,theta_1..theta_d,a_t,b_t,U_plus,U_minus`; `a_t` is the first
/// coordinate's step size. Row 0 holds `θ_0`.
pub fn write_trajectory<W: Write>(out: W, traj: &SpsaTrajectory<f64>) -> Result<()> {
    let d = traj.theta0.len();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["iter".to_string()];
    header.extend((1..=d).map(|i| format!("theta_{i}")));
    header.extend(["a_t", "b_t", "U_plus", "U_minus"].map(String::from));
    w.write_record(&header)?;
    let mut first = vec!["0".to_string()];
    first.extend(traj.theta0.iter().map(|v| fmt_f64(*v)));
    first.extend(std::iter::repeat_n(String::new(), 4));
    w.write_record(&first)?;
    for r in &traj.records {
        let mut row = vec![r.iter.to_string()];
        row.extend(r.theta.iter().map(|v| fmt_f64(*v)));
        row.push(fmt_f64(r.a[0]));
        row.push(fmt_f64(r.b));
        row.push(fmt_f64(r.u_plus));
        row.push(fmt_f64(r.u_minus));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
