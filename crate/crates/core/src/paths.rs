//! Dyadic time grids, increment paths, labelled random streams and the
//! Brownian drivers consumed by the filters.
//!
//! Every random quantity is drawn from a ChaCha stream addressed by
//! `(master seed, scope, purpose, level, index)`, so results do not depend on
//! scheduling or thread count.

use nalgebra::{DMatrix, DVector, DVectorView};
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FilterError, Result};
use crate::model::ModelSpec;
use crate::scalar::Real;

/// Discretization level `l` with step `Δ_l = 2^{-l}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Level(pub u32);

impl Level {
    pub fn delta<T: Real>(self) -> T {
        level_delta(self.0)
    }

    pub fn steps_per_unit(self) -> usize {
        1usize << self.0
    }

    pub fn steps(self, horizon: usize) -> usize {
        horizon * self.steps_per_unit()
    }

    pub fn coarser(self) -> Option<Level> {
        self.0.checked_sub(1).map(Level)
    }
}

/// `2^{-l}`, exact in binary floating point.
pub fn level_delta<T: Real>(l: u32) -> T {
    T::c(2f64.powi(-(l as i32)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(state: u64, label: u64) -> u64 {
    splitmix64(state ^ splitmix64(label ^ 0xA076_1D64_78BD_642F))
}

/// What a random stream is used for. Distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    ObservationMatrix = 1,
    TruthInitial = 2,
    TruthSignal = 3,
    ObservationNoise = 4,
    InitialEnsemble = 5,
    FilterNoise = 6,
    OracleNoise = 7,
    Perturbation = 8,
    Carrier = 9,
}

/// Root of a tree of labelled random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedSpec {
    master: u64,
    scope: u64,
}

impl SeedSpec {
    pub fn new(master: u64) -> Self {
        Self {
            master,
            scope: splitmix64(master),
        }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// A sub-scope (repetition index, estimator tag, iteration, ...).
    pub fn child(&self, label: u64) -> Self {
        Self {
            master: self.master,
            scope: mix(self.scope, label),
        }
    }

    /// The stream for `(purpose, level, index)` within this scope.
    pub fn stream(&self, purpose: Purpose, level: u32, index: u64) -> ChaCha8Rng {
        let key = mix(mix(self.scope, purpose as u64), level as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(index);
        rng
    }
}

/// Increments of a process on the level-`l` grid over `[0, horizon]`,
/// stored row-major: one row of `dim` entries per step.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementPath<T: Real> {
    level: Level,
    horizon: usize,
    dim: usize,
    data: Vec<T>,
}

/// The observation record is the increments of `Y` on its native grid.
pub type ObservationPath<T> = IncrementPath<T>;

impl<T: Real> IncrementPath<T> {
    pub fn from_rows(level: Level, horizon: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        let expected = level.steps(horizon) * dim;
        if data.len() != expected {
            return Err(FilterError::DimensionMismatch {
                context: "increment path entries",
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            level,
            horizon,
            dim,
            data,
        })
    }

    pub fn level(&self) -> Level {
        self.level
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn steps(&self) -> usize {
        self.level.steps(self.horizon)
    }
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, k: usize) -> &[T] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn row_view(&self, k: usize) -> DVectorView<'_, T> {
        DVectorView::from_slice(self.row(k), self.dim)
    }

    /// Per-coordinate sum of all increments, left to right.
    pub fn total(&self) -> Vec<T> {
        let mut acc = vec![T::zero(); self.dim];
        for k in 0..self.steps() {
            for (a, v) in acc.iter_mut().zip(self.row(k)) {
                *a += *v;
            }
        }
        acc
    }

    /// Block-sums increments down to a coarser level by repeated pairwise
    /// halving, so coarsening chains compose bit-exactly.
    pub fn coarsen(&self, to_level: u32) -> Result<Self> {
        if to_level > self.level.0 {
            return Err(FilterError::LevelAboveSource {
                from: self.level.0,
                to: to_level,
            });
        }
        let mut current = self.clone();
        while current.level.0 > to_level {
            current = current.halve();
        }
        Ok(current)
    }

    fn halve(&self) -> Self {
        let coarse_steps = self.steps() / 2;
        let mut data = Vec::with_capacity(coarse_steps * self.dim);
        for k in 0..coarse_steps {
            let a = self.row(2 * k);
            let b = self.row(2 * k + 1);
            data.extend(a.iter().zip(b).map(|(x, y)| *x + *y));
        }
        Self {
            level: Level(self.level.0 - 1),
            horizon: self.horizon,
            dim: self.dim,
            data,
        }
    }

    /// Unit-time windows `[start, start + len)` of the record.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.horizon {
            return Err(FilterError::ObservationTooShort {
                available: self.steps(),
                needed: self.level.steps(start + len),
            });
        }
        let per = self.level.steps_per_unit() * self.dim;
        Ok(Self {
            level: self.level,
            horizon: len,
            dim: self.dim,
            data: self.data[start * per..(start + len) * per].to_vec(),
        })
    }
}

pub fn coarsen_increments<T: Real>(path: &IncrementPath<T>, to_level: u32) -> Result<IncrementPath<T>> {
    path.coarsen(to_level)
}

/// Latent states at grid points `0, Δ, ..., horizon`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalPath<T: Real> {
    pub level: Level,
    pub horizon: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Real> SignalPath<T> {
    pub fn state(&self, k: usize) -> DVectorView<'_, T> {
        DVectorView::from_slice(&self.data[k * self.dim..(k + 1) * self.dim], self.dim)
    }
}

/// A factor `L` with `L L^T = cov` for symmetric PSD `cov` (Cholesky when
/// positive definite, eigen-decomposition otherwise).
pub fn psd_factor<T: Real>(cov: &DMatrix<T>) -> DMatrix<T> {
    if cov.iter().all(|v| *v == T::zero()) {
        return DMatrix::zeros(cov.nrows(), cov.ncols());
    }
    if let Some(ch) = cov.clone().cholesky() {
        return ch.l();
    }
    let eig = cov.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| Float::sqrt(Float::max(v, T::zero())));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// Draws `n` columns from `N(mean, cov)`; column `i` uses stream
/// `(purpose, level, i)`.
pub fn sample_gaussian_columns<T: Real>(
    mean: &DVector<T>,
    cov: &DMatrix<T>,
    n: usize,
    seed: &SeedSpec,
    purpose: Purpose,
    level: u32,
) -> DMatrix<T> {
    let d = mean.len();
    let factor = psd_factor(cov);
    let mut out = DMatrix::zeros(d, n);
    for i in 0..n {
        let mut rng = seed.stream(purpose, level, i as u64);
        let z = DVector::from_fn(d, |_, _| T::standard_normal(&mut rng));
        out.set_column(i, &(mean + &factor * z));
    }
    out
}

/// Which noise terms the truth simulator includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseSwitch {
    pub signal: bool,
    pub observation: bool,
}

impl Default for NoiseSwitch {
    fn default() -> Self {
        Self {
            signal: true,
            observation: true,
        }
    }
}

/// Euler-Maruyama simulation of signal and observation increments at
/// `l_data`, starting from `X_0 ~ N(M0, P0)` and `Y_0 = 0`.
pub fn simulate_truth_and_obs<T: Real>(
    model: &ModelSpec<T>,
    l_data: u32,
    horizon: usize,
    seed: &SeedSpec,
) -> (SignalPath<T>, ObservationPath<T>) {
    simulate_with_noise(model, l_data, horizon, seed, NoiseSwitch::default())
}

pub fn simulate_with_noise<T: Real>(
    model: &ModelSpec<T>,
    l_data: u32,
    horizon: usize,
    seed: &SeedSpec,
    noise: NoiseSwitch,
) -> (SignalPath<T>, ObservationPath<T>) {
    let level = Level(l_data);
    let dt: T = level.delta();
    let sqrt_dt = Float::sqrt(dt);
    let (dx, dy) = (model.dx(), model.dy());
    let steps = level.steps(horizon);

    let x0 = sample_gaussian_columns(model.m0(), model.p0(), 1, seed, Purpose::TruthInitial, l_data);
    let mut x: DVector<T> = x0.column(0).clone_owned();
    let mut sig_rng = seed.stream(Purpose::TruthSignal, l_data, 0);
    let mut obs_rng = seed.stream(Purpose::ObservationNoise, l_data, 0);

    let mut states = Vec::with_capacity((steps + 1) * dx);
    let mut obs = Vec::with_capacity(steps * dy);
    states.extend(x.iter().copied());
    for _ in 0..steps {
        let mut dy_k = model.c() * &x * dt;
        if noise.observation {
            let dv = DVector::from_fn(dy, |_, _| T::standard_normal(&mut obs_rng) * sqrt_dt);
            dy_k += model.r_sqrt() * dv;
        }
        obs.extend(dy_k.iter().copied());

        let f = model
            .drift_eval(x.as_view())
            .expect("state dimension fixed by the model");
        let mut next = &x + f * dt;
        if noise.signal {
            let dw = DVector::from_fn(dx, |_, _| T::standard_normal(&mut sig_rng) * sqrt_dt);
            next += model.q_sqrt() * dw;
        }
        x = next;
        states.extend(x.iter().copied());
    }
    (
        SignalPath {
            level,
            horizon,
            dim: dx,
            data: states,
        },
        IncrementPath {
            level,
            horizon,
            dim: dy,
            data: obs,
        },
    )
}

/// Per-step Brownian increments for an ensemble. Buffers are `d × N` with one
/// column per particle; `None` means the term is not needed this step.
pub trait NoiseSource<T: Real> {
    fn next_step(&mut self, dw: Option<&mut DMatrix<T>>, dv: Option<&mut DMatrix<T>>);
}

/// Fresh `N(0, Δ_l)` increments, one independent stream per particle.
#[derive(Debug, Clone)]
pub struct ParticleStreams<T: Real> {
    rngs: Vec<ChaCha8Rng>,
    scale: T,
}

impl<T: Real> ParticleStreams<T> {
    pub fn new(seed: &SeedSpec, purpose: Purpose, level: u32, particles: usize) -> Self {
        let rngs = (0..particles)
            .map(|i| seed.stream(purpose, level, i as u64))
            .collect();
        Self {
            rngs,
            scale: Float::sqrt(level_delta::<T>(level)),
        }
    }

    pub fn particles(&self) -> usize {
        self.rngs.len()
    }
}

impl<T: Real> NoiseSource<T> for ParticleStreams<T> {
    fn next_step(&mut self, mut dw: Option<&mut DMatrix<T>>, mut dv: Option<&mut DMatrix<T>>) {
        for (j, rng) in self.rngs.iter_mut().enumerate() {
            if let Some(w) = dw.as_deref_mut() {
                for i in 0..w.nrows() {
                    w[(i, j)] = T::standard_normal(rng) * self.scale;
                }
            }
            if let Some(v) = dv.as_deref_mut() {
                for i in 0..v.nrows() {
                    v[(i, j)] = T::standard_normal(rng) * self.scale;
                }
            }
        }
    }
}

/// Coarse-level increments formed as `fine[2k] + fine[2k+1]` of an inner source.
#[derive(Debug, Clone)]
pub struct PairSummed<S> {
    inner: S,
}

impl<S> PairSummed<S> {
    pub fn new(inner: S) -> Self {
        Self { inner }
    }
}

/// `first + second`, entrywise; shared by the coupled runner so both legs
/// add in the same order.
pub fn pair_sum_into<T: Real>(first: &DMatrix<T>, second: &DMatrix<T>, out: &mut DMatrix<T>) {
    for ((o, a), b) in out.iter_mut().zip(first.iter()).zip(second.iter()) {
        *o = *a + *b;
    }
}

impl<T: Real, S: NoiseSource<T>> NoiseSource<T> for PairSummed<S> {
    fn next_step(&mut self, dw: Option<&mut DMatrix<T>>, dv: Option<&mut DMatrix<T>>) {
        let shape = |m: &Option<&mut DMatrix<T>>| m.as_ref().map(|m| (m.nrows(), m.ncols()));
        let (sw, sv) = (shape(&dw), shape(&dv));
        let mut w = sw.map(|(r, c)| (DMatrix::zeros(r, c), DMatrix::zeros(r, c)));
        let mut v = sv.map(|(r, c)| (DMatrix::zeros(r, c), DMatrix::zeros(r, c)));
        self.inner
            .next_step(w.as_mut().map(|p| &mut p.0), v.as_mut().map(|p| &mut p.0));
        self.inner
            .next_step(w.as_mut().map(|p| &mut p.1), v.as_mut().map(|p| &mut p.1));
        if let (Some(out), Some((a, b))) = (dw, w.as_ref()) {
            pair_sum_into(a, b, out);
        }
        if let (Some(out), Some((a, b))) = (dv, v.as_ref()) {
            pair_sum_into(a, b, out);
        }
    }
}

/// All-zero increments.
#[derive(Debug, Clone, Copy, Default)]
pub struct Silent;

impl<T: Real> NoiseSource<T> for Silent {
    fn next_step(&mut self, dw: Option<&mut DMatrix<T>>, dv: Option<&mut DMatrix<T>>) {
        if let Some(w) = dw {
            w.fill(T::zero());
        }
        if let Some(v) = dv {
            v.fill(T::zero());
        }
    }
}

/// Materialized coupled drivers: per stream, the level-`l` increments and
/// their pairwise sums at level `l - 1`. Stream `i` is the same draw
/// sequence the filters use for particle `i` under `Purpose::FilterNoise`.
pub fn coupled_brownian<T: Real>(
    l: u32,
    horizon: usize,
    dim: usize,
    n_streams: usize,
    seed: &SeedSpec,
) -> Result<(Vec<IncrementPath<T>>, Vec<IncrementPath<T>>)> {
    if l == 0 {
        return Err(FilterError::InvalidConfig("coupling needs level >= 1".into()));
    }
    let level = Level(l);
    let steps = level.steps(horizon);
    let mut source = ParticleStreams::<T>::new(seed, Purpose::FilterNoise, l, n_streams);
    let mut rows: Vec<Vec<T>> = vec![Vec::with_capacity(steps * dim); n_streams];
    let mut buf = DMatrix::zeros(dim, n_streams);
    for _ in 0..steps {
        source.next_step(Some(&mut buf), None);
        for (j, r) in rows.iter_mut().enumerate() {
            r.extend(buf.column(j).iter().copied());
        }
    }
    let mut fine = Vec::with_capacity(n_streams);
    let mut coarse = Vec::with_capacity(n_streams);
    for data in rows {
        let path = IncrementPath::from_rows(level, horizon, dim, data)?;
        coarse.push(path.coarsen(l - 1)?);
        fine.push(path);
    }
    Ok((fine, coarse))
}
