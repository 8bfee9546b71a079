//! Path simulation of the coupled `(S, v)` system with correlated drivers,
//! explosion barriers and overlay-driven stopping.
//!
//! `S` is carried in log space and advanced by the exponential-Euler step
//! `ln S += sigma dB - sigma^2 h / 2`, so it stays positive and is an exact
//! discrete martingale when `dB` is a centred Gaussian. `v` is advanced by
//! Euler (or Milstein when `mu` has a registered derivative) and truncated
//! at zero.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coeffs::{CoefficientFunction, Term, VolatilityModelSpec};
use crate::montecarlo::{run_sharded, Accumulator, MeanAccumulator, DEFAULT_SHARD_SIZE};

/// Default explosion proxy levels.
pub const DEFAULT_BARRIER_LEVELS: [f64; 4] = [1e2, 1e3, 1e4, 1e6];

#[derive(Error, Debug, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("invalid barrier: {0}")]
    InvalidBarrier(String),
    #[error("numerical blow-up at step {step}: {what} is not finite")]
    BlowUp { step: usize, what: &'static str },
    #[error("no analytic solution available: {0}")]
    NoAnalyticSolution(String),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("overlay error at step {step}: {message}")]
    Overlay { step: usize, message: String },
}

/// Uniform grid `t_i = i T / n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self, EngineError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(EngineError::InvalidGrid(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(EngineError::InvalidGrid("n_steps must be positive".into()));
        }
        Ok(TimeGrid { horizon, n_steps })
    }

    /// Grid with step `h`; `horizon / h` must be an integer.
    pub fn with_step(horizon: f64, h: f64) -> Result<Self, EngineError> {
        let n = (horizon / h).round();
        if !(h > 0.0) || n < 1.0 || ((n * h - horizon).abs() > 1e-12 * horizon) {
            return Err(EngineError::InvalidGrid(format!(
                "step {h} does not divide horizon {horizon}"
            )));
        }
        Self::new(horizon, n as usize)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn h(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            self.horizon * i as f64 / self.n_steps as f64
        }
    }

    /// Same horizon, twice as many steps.
    pub fn refined(&self) -> Self {
        TimeGrid {
            horizon: self.horizon,
            n_steps: self.n_steps * 2,
        }
    }
}

/// One step of the correlated pair `(dB, dW)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriverIncrements {
    pub db: f64,
    pub dw: f64,
}

impl DriverIncrements {
    pub fn from_normals(xi1: f64, xi2: f64, rho: f64, h: f64) -> Self {
        let sh = h.sqrt();
        DriverIncrements {
            db: sh * xi1,
            dw: sh * (rho * xi1 + (1.0 - rho * rho).sqrt() * xi2),
        }
    }
}

/// Increasing barrier levels `n` for `T_n = inf{t: v_t >= n}`. Paths stop
/// at the top level; every lower level only records its first hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplosionBarrier {
    levels: Vec<f64>,
}

impl ExplosionBarrier {
    pub fn new(levels: Vec<f64>) -> Result<Self, EngineError> {
        if levels.is_empty() {
            return Err(EngineError::InvalidBarrier("at least one level required".into()));
        }
        if levels.iter().any(|l| !(*l > 0.0)) || levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(EngineError::InvalidBarrier(format!(
                "levels must be positive and strictly increasing, got {levels:?}"
            )));
        }
        Ok(ExplosionBarrier { levels })
    }

    pub fn single(level: f64) -> Result<Self, EngineError> {
        Self::new(vec![level])
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn top(&self) -> f64 {
        self.levels[self.levels.len() - 1]
    }
}

impl Default for ExplosionBarrier {
    fn default() -> Self {
        ExplosionBarrier {
            levels: DEFAULT_BARRIER_LEVELS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    Milstein,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Random,
    /// Every Gaussian draw is zero and no jumps occur.
    Zero,
}

/// Measure under which paths are generated. `ShareNumeraire` shifts the
/// drivers by `(sigma h, rho sigma h)`, i.e. it simulates under the measure
/// with density `S_t / S_0`. The shift is a change of measure, so it
/// vanishes with the noise in zero-noise mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Original,
    ShareNumeraire,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    Matured,
    Barrier { level: f64 },
    Tau,
    JumpFloor,
}

/// Per-path random source: ChaCha8 keyed by the base seed, one stream per
/// path index.
pub struct Noise {
    rng: ChaCha8Rng,
    mode: NoiseMode,
}

impl Noise {
    pub fn for_path(seed: u64, path: u64, mode: NoiseMode) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        Noise { rng, mode }
    }

    pub fn mode(&self) -> NoiseMode {
        self.mode
    }

    /// Variance of a unit draw: 1, or 0 in zero-noise mode. Scales the Ito
    /// corrections so that switching the noise off leaves exact ODEs.
    pub fn variance(&self) -> f64 {
        match self.mode {
            NoiseMode::Random => 1.0,
            NoiseMode::Zero => 0.0,
        }
    }

    pub fn normal(&mut self) -> f64 {
        match self.mode {
            NoiseMode::Random => StandardNormal.sample(&mut self.rng),
            NoiseMode::Zero => 0.0,
        }
    }

    /// Uniform on the open interval `(0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        match self.mode {
            NoiseMode::Random => loop {
                let u: f64 = self.rng.random();
                if u > 0.0 {
                    return u;
                }
            },
            NoiseMode::Zero => 0.5,
        }
    }

    pub fn poisson(&mut self, mean: f64) -> u64 {
        if self.mode == NoiseMode::Zero || !(mean > 0.0) {
            return 0;
        }
        match Poisson::new(mean) {
            Ok(d) => d.sample(&mut self.rng) as u64,
            Err(_) => 0,
        }
    }

    /// Index drawn from a cumulative probability table.
    pub fn categorical(&mut self, cumulative: &[f64]) -> usize {
        let u = self.uniform() * cumulative[cumulative.len() - 1];
        cumulative
            .partition_point(|&c| c < u)
            .min(cumulative.len() - 1)
    }
}

/// Grid, barrier, scheme, noise and measure shared by a batch of paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub grid: TimeGrid,
    pub barrier: ExplosionBarrier,
    pub scheme: Scheme,
    pub noise: NoiseMode,
    pub measure: Measure,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(grid: TimeGrid, barrier: ExplosionBarrier, seed: u64) -> Self {
        SimConfig {
            grid,
            barrier,
            scheme: Scheme::Euler,
            noise: NoiseMode::Random,
            measure: Measure::Original,
            seed,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_noise(mut self, noise: NoiseMode) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_measure(mut self, measure: Measure) -> Self {
        self.measure = measure;
        self
    }

    pub fn with_grid(mut self, grid: TimeGrid) -> Self {
        self.grid = grid;
        self
    }
}

/// State handed to an overlay before each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepView {
    pub index: usize,
    pub t: f64,
    /// Step to the next grid point.
    pub h: f64,
    pub s: f64,
    pub v: f64,
    /// Recorded primary driver `B_t`.
    pub b: f64,
}

/// Overlay output for one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OverlayStep {
    /// Added to `b(v)` in the `v` drift.
    pub extra_drift: f64,
    pub k: f64,
    pub h: f64,
    pub j: f64,
    /// Stop at this grid index (the stopping time `tau`).
    pub stop: bool,
}

/// Per-step hook that adds drift to `v`, requests stops and may take over
/// the primary driver (for filtrations in which `B` has a drift).
pub trait DriftOverlay: Sync {
    type PathState: Send;

    /// Samples any path-level randomness (e.g. the enlarging variable).
    fn begin(&self, noise: &mut Noise, grid: &TimeGrid) -> Result<Self::PathState, EngineError>;

    fn step(&self, state: &mut Self::PathState, view: &StepView) -> Result<OverlayStep, EngineError>;

    /// Maps the drawn innovation `d_beta` to `(innovation driving S and W,
    /// increment of the recorded B)`.
    fn primary(
        &self,
        _state: &mut Self::PathState,
        _view: &StepView,
        _h: f64,
        d_beta: f64,
        _noise: &mut Noise,
    ) -> Result<(f64, f64), EngineError> {
        Ok((d_beta, d_beta))
    }

    /// Whether `k`, `H`, `J`, `Z` are meaningful and should be recorded.
    fn records_aux(&self) -> bool {
        false
    }

    fn supports_numeraire(&self) -> bool {
        true
    }
}

/// The unenlarged model.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoOverlay;

impl DriftOverlay for NoOverlay {
    type PathState = ();

    fn begin(&self, _noise: &mut Noise, _grid: &TimeGrid) -> Result<(), EngineError> {
        Ok(())
    }

    fn step(&self, _state: &mut (), _view: &StepView) -> Result<OverlayStep, EngineError> {
        Ok(OverlayStep::default())
    }
}

/// A simulated path up to and including its stop index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppedPathBundle {
    pub times: Vec<f64>,
    /// `exp(log_s)`; underflows to `0.0` only when `ln S < -745`.
    pub s: Vec<f64>,
    /// The simulated state `ln S`, always finite.
    pub log_s: Vec<f64>,
    pub v: Vec<f64>,
    pub b: Vec<f64>,
    pub w: Vec<f64>,
    pub stop_reason: StopReason,
    pub stop_index: usize,
    /// First grid index at which `v` reached each barrier level.
    pub barrier_hits: Vec<Option<usize>>,
    /// The overlay stopped the path at index 0.
    pub gate_failed: bool,
    /// `k`, `H`, `J`, `Z` when the overlay records them.
    pub aux: BTreeMap<String, Vec<f64>>,
    pub scheme: Scheme,
    pub scheme_note: Option<String>,
    /// `1/2 int (H^2 + J^2 + 2 rho H J) ds` up to the stop.
    pub novikov: f64,
}

/// Terminal information of a path, without the arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSummary {
    pub stop_reason: StopReason,
    pub stop_index: usize,
    pub stop_time: f64,
    pub log_s: f64,
    pub s: f64,
    pub v: f64,
    pub log_z: f64,
    pub novikov: f64,
    pub barrier_hits: Vec<Option<usize>>,
    pub gate_failed: bool,
    pub k0: f64,
}

impl PathSummary {
    pub fn barrier_stopped(&self) -> bool {
        matches!(self.stop_reason, StopReason::Barrier { .. })
    }
}

/// One step of `dv = mu(v) dW + (b(v) + extra) dt`, truncated at 0.
/// `var_h` is the variance of `dw` (0 in zero-noise mode).
pub fn v_step(spec: &VolatilityModelSpec, scheme: Scheme, v: f64, extra_drift: f64, h: f64, dw: f64, var_h: f64) -> f64 {
    let m = spec.mu(v);
    let mut vn = v + (spec.b(v) + extra_drift) * h + m * dw;
    if scheme == Scheme::Milstein {
        if let Some(dm) = spec.mu.derivative(v) {
            vn += 0.5 * m * dm * (dw * dw - var_h);
        }
    }
    vn.max(0.0)
}

/// Scheme actually used and the reason when it differs from the request.
pub fn effective_scheme(spec: &VolatilityModelSpec, requested: Scheme) -> (Scheme, Option<String>) {
    match requested {
        Scheme::Milstein if !spec.mu.has_derivative() => (
            Scheme::Euler,
            Some("milstein requested but mu has no registered derivative; euler used".into()),
        ),
        s => (s, None),
    }
}

#[derive(Default)]
struct Recorder {
    on: bool,
    times: Vec<f64>,
    s: Vec<f64>,
    log_s: Vec<f64>,
    v: Vec<f64>,
    b: Vec<f64>,
    w: Vec<f64>,
    k: Vec<f64>,
    h: Vec<f64>,
    j: Vec<f64>,
    z: Vec<f64>,
}

impl Recorder {
    fn state(&mut self, t: f64, log_s: f64, v: f64, b: f64, w: f64) {
        if self.on {
            self.times.push(t);
            self.s.push(log_s.exp());
            self.log_s.push(log_s);
            self.v.push(v);
            self.b.push(b);
            self.w.push(w);
        }
    }

    fn aux(&mut self, o: &OverlayStep, log_z: f64) {
        if self.on {
            self.k.push(o.k);
            self.h.push(o.h);
            self.j.push(o.j);
            self.z.push(log_z.exp());
        }
    }
}

pub(crate) fn check_finite(step: usize, what: &'static str, x: f64) -> Result<(), EngineError> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(EngineError::BlowUp { step, what })
    }
}

fn overlay_err(step: usize) -> impl Fn(EngineError) -> EngineError {
    move |e| match e {
        EngineError::Overlay { .. } | EngineError::BlowUp { .. } => e,
        other => EngineError::Overlay {
            step,
            message: other.to_string(),
        },
    }
}

fn run_model_path<O: DriftOverlay>(
    spec: &VolatilityModelSpec,
    overlay: &O,
    cfg: &SimConfig,
    path: u64,
    record: bool,
) -> Result<(PathSummary, Option<StoppedPathBundle>), EngineError> {
    if cfg.measure == Measure::ShareNumeraire && !overlay.supports_numeraire() {
        return Err(EngineError::Unsupported(
            "this overlay cannot be simulated under the share-numeraire measure".into(),
        ));
    }
    let (scheme, scheme_note) = effective_scheme(spec, cfg.scheme);
    let grid = &cfg.grid;
    let n = grid.n_steps();
    let h = grid.h();
    let sqrt_h = h.sqrt();
    let rho = spec.rho;
    let rho_c = (1.0 - rho * rho).sqrt();
    let levels = cfg.barrier.levels();
    let numeraire = cfg.measure == Measure::ShareNumeraire;

    let mut noise = Noise::for_path(cfg.seed, path, cfg.noise);
    let var_h = noise.variance() * h;
    let mut state = overlay.begin(&mut noise, grid).map_err(overlay_err(0))?;
    let mut rec = Recorder {
        on: record,
        ..Recorder::default()
    };

    let mut log_s = spec.s0.ln();
    let mut v = spec.v0;
    let (mut b, mut w) = (0.0, 0.0);
    let mut log_z = 0.0;
    let mut novikov = 0.0;
    let mut hits: Vec<Option<usize>> = levels.iter().map(|&l| (v >= l).then_some(0)).collect();
    let mut barrier_stop = v >= cfg.barrier.top();
    let mut k0 = 0.0;
    let mut i = 0usize;

    let reason = loop {
        let t = grid.time(i);
        let s = log_s.exp();
        rec.state(t, log_s, v, b, w);
        let view = StepView { index: i, t, h, s, v, b };
        let ov = overlay.step(&mut state, &view).map_err(overlay_err(i))?;
        if i == 0 {
            k0 = ov.k;
        }
        rec.aux(&ov, log_z);
        if barrier_stop {
            break StopReason::Barrier {
                level: cfg.barrier.top(),
            };
        }
        if ov.stop {
            break StopReason::Tau;
        }
        if i == n {
            break StopReason::Matured;
        }

        let xi1 = noise.normal();
        let xi2 = noise.normal();
        let sigma = spec.s_log_vol(s, v);
        let mut d_beta = sqrt_h * xi1;
        if numeraire {
            d_beta += sigma * var_h;
        }
        let (innov, db) = overlay
            .primary(&mut state, &view, h, d_beta, &mut noise)
            .map_err(overlay_err(i))?;
        let dw = rho * innov + rho_c * sqrt_h * xi2;

        log_s += sigma * innov - 0.5 * sigma * sigma * var_h;

        if ov.h != 0.0 || ov.j != 0.0 {
            let q = 0.5 * (ov.h * ov.h + ov.j * ov.j + 2.0 * rho * ov.h * ov.j) * h;
            log_z += ov.h * innov + ov.j * dw - q * noise.variance();
            novikov += q;
        }

        let vn = v_step(spec, scheme, v, ov.extra_drift, h, dw, var_h);

        i += 1;
        check_finite(i, "ln S", log_s)?;
        check_finite(i, "v", vn)?;
        check_finite(i, "ln Z", log_z)?;
        v = vn;
        b += db;
        w += dw;
        for (hit, &level) in hits.iter_mut().zip(levels) {
            if hit.is_none() && v >= level {
                *hit = Some(i);
            }
        }
        barrier_stop = v >= cfg.barrier.top();
    };

    let summary = PathSummary {
        stop_reason: reason,
        stop_index: i,
        stop_time: grid.time(i),
        log_s,
        s: log_s.exp(),
        v,
        log_z,
        novikov,
        barrier_hits: hits.clone(),
        gate_failed: reason == StopReason::Tau && i == 0,
        k0,
    };
    let bundle = record.then(|| {
        let mut aux = BTreeMap::new();
        if overlay.records_aux() {
            aux.insert("k".to_string(), std::mem::take(&mut rec.k));
            aux.insert("H".to_string(), std::mem::take(&mut rec.h));
            aux.insert("J".to_string(), std::mem::take(&mut rec.j));
            aux.insert("Z".to_string(), std::mem::take(&mut rec.z));
        }
        StoppedPathBundle {
            times: rec.times,
            s: rec.s,
            log_s: rec.log_s,
            v: rec.v,
            b: rec.b,
            w: rec.w,
            stop_reason: reason,
            stop_index: i,
            barrier_hits: hits,
            gate_failed: summary.gate_failed,
            aux,
            scheme,
            scheme_note,
            novikov,
        }
    });
    Ok((summary, bundle))
}

/// Simulates path number `path` of the batch described by `cfg`.
pub fn simulate_path<O: DriftOverlay>(
    spec: &VolatilityModelSpec,
    overlay: &O,
    cfg: &SimConfig,
    path: u64,
) -> Result<StoppedPathBundle, EngineError> {
    run_model_path(spec, overlay, cfg, path, true).map(|(_, b)| b.expect("recorded"))
}

/// As [`simulate_path`], keeping only terminal information.
pub fn simulate_summary<O: DriftOverlay>(
    spec: &VolatilityModelSpec,
    overlay: &O,
    cfg: &SimConfig,
    path: u64,
) -> Result<PathSummary, EngineError> {
    run_model_path(spec, overlay, cfg, path, false).map(|(s, _)| s)
}

fn run_scalar_path<F: Fn(f64) -> f64>(
    sigma: &F,
    x0: f64,
    cfg: &SimConfig,
    path: u64,
    record: bool,
) -> Result<(PathSummary, Option<StoppedPathBundle>), EngineError> {
    let grid = &cfg.grid;
    let n = grid.n_steps();
    let h = grid.h();
    let sqrt_h = h.sqrt();
    let levels = cfg.barrier.levels();
    let numeraire = cfg.measure == Measure::ShareNumeraire;
    let mut noise = Noise::for_path(cfg.seed, path, cfg.noise);
    let var_h = noise.variance() * h;
    let mut rec = Recorder {
        on: record,
        ..Recorder::default()
    };

    let mut log_x = x0.ln();
    let mut b = 0.0;
    let mut x = x0;
    let mut hits: Vec<Option<usize>> = levels.iter().map(|&l| (x >= l).then_some(0)).collect();
    let mut barrier_stop = x >= cfg.barrier.top();
    let mut i = 0usize;
    let reason = loop {
        rec.state(grid.time(i), log_x, f64::NAN, b, 0.0);
        if barrier_stop {
            break StopReason::Barrier {
                level: cfg.barrier.top(),
            };
        }
        if i == n {
            break StopReason::Matured;
        }
        let sg = sigma(x);
        let mut db = sqrt_h * noise.normal();
        if numeraire {
            db += sg * var_h;
        }
        log_x += sg * db - 0.5 * sg * sg * var_h;
        i += 1;
        check_finite(i, "ln X", log_x)?;
        x = log_x.exp();
        b += db;
        for (hit, &level) in hits.iter_mut().zip(levels) {
            if hit.is_none() && x >= level {
                *hit = Some(i);
            }
        }
        barrier_stop = x >= cfg.barrier.top();
    };
    let summary = PathSummary {
        stop_reason: reason,
        stop_index: i,
        stop_time: grid.time(i),
        log_s: log_x,
        s: x,
        v: f64::NAN,
        log_z: 0.0,
        novikov: 0.0,
        barrier_hits: hits.clone(),
        gate_failed: false,
        k0: 0.0,
    };
    let bundle = record.then(|| StoppedPathBundle {
        times: rec.times,
        s: rec.s,
        log_s: rec.log_s,
        v: Vec::new(),
        b: rec.b,
        w: Vec::new(),
        stop_reason: reason,
        stop_index: i,
        barrier_hits: hits,
        gate_failed: false,
        aux: BTreeMap::new(),
        scheme: Scheme::Euler,
        scheme_note: Some("scalar equation dX = X sigma(X) dB, exponential-Euler in ln X".into()),
        novikov: 0.0,
    });
    Ok((summary, bundle))
}

/// One path of `dX = X sigma(X) dB`, stopped when `X` reaches the top
/// barrier level. The path is stored in the bundle's `s` array.
pub fn simulate_scalar_sde<F: Fn(f64) -> f64>(
    sigma: &F,
    x0: f64,
    cfg: &SimConfig,
    path: u64,
) -> Result<StoppedPathBundle, EngineError> {
    run_scalar_path(sigma, x0, cfg, path, true).map(|(_, b)| b.expect("recorded"))
}

pub fn simulate_scalar_summary<F: Fn(f64) -> f64>(
    sigma: &F,
    x0: f64,
    cfg: &SimConfig,
    path: u64,
) -> Result<PathSummary, EngineError> {
    run_scalar_path(sigma, x0, cfg, path, false).map(|(s, _)| s)
}

/// Drift `m` and volatility `s` when `mu(x) = s x` and `b(x) = m x`.
pub fn gbm_parameters(spec: &VolatilityModelSpec) -> Option<(f64, f64)> {
    fn linear_coef(f: &CoefficientFunction) -> Option<f64> {
        match f {
            CoefficientFunction::Terms(terms) => terms.iter().try_fold(0.0, |acc, t| match *t {
                Term::Power { coef, exponent } if exponent == 1.0 || coef == 0.0 => Some(acc + coef),
                _ => None,
            }),
            CoefficientFunction::Tabulated { .. } => None,
        }
    }
    Some((linear_coef(&spec.b)?, linear_coef(&spec.mu)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub scheme: Scheme,
    pub step_sizes: Vec<f64>,
    pub strong_errors: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Least-squares slope of `ln error` against `ln h`; absent when every
    /// error is exactly zero.
    pub slope: Option<f64>,
}

struct LevelAccumulator(Vec<MeanAccumulator>);

impl Accumulator for LevelAccumulator {
    fn merge_from(&mut self, other: Self) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            a.merge(b);
        }
    }
}

/// Strong error `E|v_N - v(T)|` of the `v` scheme against the exact GBM
/// solution, for `h = T 2^-k`, `k` in `exponents`, with all levels driven
/// by the same fine Brownian increments.
pub fn convergence_probe(
    spec: &VolatilityModelSpec,
    scheme: Scheme,
    exponents: &[u32],
    n_paths: u64,
    seed: u64,
    threads: usize,
) -> Result<ConvergenceReport, EngineError> {
    let (m, sg) = gbm_parameters(spec).ok_or_else(|| {
        EngineError::NoAnalyticSolution("convergence probe needs mu(x) = s x and b(x) = m x".into())
    })?;
    let (scheme, _) = effective_scheme(spec, scheme);
    let k_max = *exponents
        .iter()
        .max()
        .ok_or_else(|| EngineError::InvalidGrid("no step sizes given".into()))?;
    let t_end = spec.horizon;
    let n_fine = 1usize << k_max;
    let h_fine = t_end / n_fine as f64;
    let v0 = spec.v0;

    let acc = run_sharded(
        n_paths,
        DEFAULT_SHARD_SIZE,
        threads,
        || LevelAccumulator(vec![MeanAccumulator::default(); exponents.len()]),
        |path, acc: &mut LevelAccumulator| {
            let mut noise = Noise::for_path(seed, path, NoiseMode::Random);
            let dws: Vec<f64> = (0..n_fine).map(|_| h_fine.sqrt() * noise.normal()).collect();
            let w_t: f64 = dws.iter().sum();
            let exact = v0 * ((m - 0.5 * sg * sg) * t_end + sg * w_t).exp();
            for (slot, &k) in exponents.iter().enumerate() {
                let stride = 1usize << (k_max - k);
                let h = t_end / (1usize << k) as f64;
                let mut v = v0;
                for chunk in dws.chunks(stride) {
                    let dw: f64 = chunk.iter().sum();
                    let mut vn = v + m * v * h + sg * v * dw;
                    if scheme == Scheme::Milstein {
                        vn += 0.5 * sg * sg * v * (dw * dw - h);
                    }
                    v = vn.max(0.0);
                }
                acc.0[slot].push((v - exact).abs());
            }
            Ok::<(), EngineError>(())
        },
    )?;

    let step_sizes: Vec<f64> = exponents.iter().map(|&k| t_end / (1usize << k) as f64).collect();
    let strong_errors: Vec<f64> = acc.0.iter().map(|a| a.mean()).collect();
    let std_errors = acc.0.iter().map(|a| a.std_error()).collect();
    let slope = if strong_errors.iter().all(|e| *e == 0.0) {
        None
    } else {
        let pts: Vec<(f64, f64)> = step_sizes
            .iter()
            .zip(&strong_errors)
            .filter(|(_, e)| **e > 0.0)
            .map(|(h, e)| (h.ln(), e.ln()))
            .collect();
        least_squares_slope(&pts)
    };
    Ok(ConvergenceReport {
        scheme,
        step_sizes,
        strong_errors,
        std_errors,
        slope,
    })
}

fn least_squares_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// CSV columns of a path dump.
pub const PATH_CSV_HEADER: &str = "t,S,v,B,W,k,Z";

/// Writes a bundle as CSV. Columns absent from the bundle are left empty.
pub fn write_path_csv<W: Write>(bundle: &StoppedPathBundle, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{PATH_CSV_HEADER}")?;
    let col = |v: &[f64], i: usize| v.get(i).filter(|x| x.is_finite()).map(|x| x.to_string()).unwrap_or_default();
    let k = bundle.aux.get("k").map(Vec::as_slice).unwrap_or(&[]);
    let z = bundle.aux.get("Z").map(Vec::as_slice).unwrap_or(&[]);
    for i in 0..bundle.times.len() {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            bundle.times[i],
            col(&bundle.s, i),
            col(&bundle.v, i),
            col(&bundle.b, i),
            col(&bundle.w, i),
            col(k, i),
            col(z, i)
        )?;
    }
    Ok(())
}

const REPRO_MAGIC: &[u8; 4] = b"SLMR";

/// Binary record `magic | seed (u64 LE) | sha256 of the config`.
pub fn write_repro_log<W: Write>(out: &mut W, seed: u64, config_hash: &[u8; 32]) -> std::io::Result<()> {
    out.write_all(REPRO_MAGIC)?;
    out.write_all(&seed.to_le_bytes())?;
    out.write_all(config_hash)
}

pub fn read_repro_log<R: Read>(input: &mut R) -> std::io::Result<(u64, [u8; 32])> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != REPRO_MAGIC {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "not a repro log"));
    }
    let mut seed = [0u8; 8];
    input.read_exact(&mut seed)?;
    let mut hash = [0u8; 32];
    input.read_exact(&mut hash)?;
    Ok((u64::from_le_bytes(seed), hash))
}
