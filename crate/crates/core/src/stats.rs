//! Monte Carlo estimation of the martingale defect, explosion
//! probabilities, the optional-stopping decomposition and the comparison
//! harness.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coeffs::VolatilityModelSpec;
use crate::engine::{
    simulate_path, simulate_scalar_summary, simulate_summary, DriftOverlay, EngineError, Measure, Noise, NoiseMode,
    PathSummary, SimConfig, StopReason,
};
use crate::enlargement::{validate_measure_change, MeasureChangeReport, DEFAULT_TRUNCATION_THRESHOLD};
use crate::montecarlo::{run_sharded, Accumulator, MeanAccumulator, DEFAULT_SHARD_SIZE};

/// Two-sided 95% normal quantile.
pub const DEFAULT_Z: f64 = 1.96;

/// Mixed into the seed of the share-numeraire run so that it is
/// independent of the original-measure run.
const NUMERAIRE_SEED_SALT: u64 = 0x05ee_d0f5_ba2e;

/// Truncation schedule `h(m) = m` used for the measure-change note.
pub const DEFAULT_TRUNCATION_SCHEDULE: [f64; 7] = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0];

#[derive(Error, Debug, Clone, PartialEq)]
pub enum StatsError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("hypothesis gate failed: every path stopped at tau = 0")]
    HypothesisGateFailed,
    #[error("need at least {needed} reports, got {got}")]
    TooFewReports { needed: usize, got: usize },
    #[error("invalid argument {field}: {reason}")]
    InvalidArgument { field: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectVerdict {
    MartingaleConsistent,
    StrictLmDetected,
    Inconclusive,
}

/// `E[S_{t ^ tau}]` at one step size. Barrier-stopped paths contribute 0
/// (the explosion proxy); gate-failed paths are excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectEstimate {
    pub step: f64,
    pub estimate: f64,
    pub defect: f64,
    pub std_error: f64,
    pub n_paths: u64,
    pub n_used: u64,
    pub n_gate_failed: u64,
    pub n_barrier: u64,
    pub n_tau: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectReport {
    pub t_eval: f64,
    pub s0: f64,
    /// Headline values come from the finer step.
    pub estimate_e: f64,
    pub defect: f64,
    pub std_error: f64,
    pub n_paths: u64,
    pub verdict: DefectVerdict,
    pub confidence_z: f64,
    pub coarse: DefectEstimate,
    pub fine: DefectEstimate,
    pub measure_change: Option<MeasureChangeReport>,
    pub bias_notes: Vec<String>,
}

impl DefectReport {
    pub const CSV_HEADER: &'static str =
        "t_eval,s0,estimate,defect,std_error,n_paths,verdict,coarse_step,coarse_defect,coarse_se,fine_step,fine_defect,fine_se";

    pub fn csv_row(&self) -> String {
        let verdict = serde_json::to_value(self.verdict)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.t_eval,
            self.s0,
            self.estimate_e,
            self.defect,
            self.std_error,
            self.n_paths,
            verdict,
            self.coarse.step,
            self.coarse.defect,
            self.coarse.std_error,
            self.fine.step,
            self.fine.defect,
            self.fine.std_error
        )
    }
}

#[derive(Default)]
struct DefectAcc {
    mean: MeanAccumulator,
    gate: u64,
    barrier: u64,
    tau: u64,
    novikov: Vec<f64>,
}

impl Accumulator for DefectAcc {
    fn merge_from(&mut self, other: Self) {
        self.mean.merge(&other.mean);
        self.gate += other.gate;
        self.barrier += other.barrier;
        self.tau += other.tau;
        self.novikov.extend(other.novikov);
    }
}

fn defect_run<F>(s0: f64, step: f64, n_paths: u64, threads: usize, path: F) -> Result<(DefectEstimate, Vec<f64>), StatsError>
where
    F: Fn(u64) -> Result<PathSummary, EngineError> + Sync,
{
    let acc = run_sharded(n_paths, DEFAULT_SHARD_SIZE, threads, DefectAcc::default, |i, acc: &mut DefectAcc| {
        let p = path(i)?;
        if p.gate_failed {
            acc.gate += 1;
            return Ok(());
        }
        acc.novikov.push(p.novikov);
        match p.stop_reason {
            StopReason::Barrier { .. } => {
                acc.barrier += 1;
                acc.mean.push(0.0);
            }
            StopReason::JumpFloor => acc.mean.push(0.0),
            StopReason::Tau => {
                acc.tau += 1;
                acc.mean.push(p.s);
            }
            StopReason::Matured => acc.mean.push(p.s),
        }
        Ok::<(), EngineError>(())
    })?;
    if acc.mean.n == 0 {
        return Err(StatsError::HypothesisGateFailed);
    }
    let estimate = acc.mean.mean();
    Ok((
        DefectEstimate {
            step,
            estimate,
            defect: s0 - estimate,
            std_error: acc.mean.std_error(),
            n_paths,
            n_used: acc.mean.n,
            n_gate_failed: acc.gate,
            n_barrier: acc.barrier,
            n_tau: acc.tau,
        },
        acc.novikov,
    ))
}

fn combine(coarse: DefectEstimate, fine: DefectEstimate, z: f64, t_eval: f64, s0: f64, mut notes: Vec<String>) -> DefectReport {
    let detects = |e: &DefectEstimate| e.defect > z * e.std_error;
    let consistent = |e: &DefectEstimate| e.defect.abs() <= z * e.std_error;
    let overlap = (coarse.defect - fine.defect).abs() <= z * (coarse.std_error.powi(2) + fine.std_error.powi(2)).sqrt();
    let verdict = if detects(&coarse) && detects(&fine) && overlap {
        DefectVerdict::StrictLmDetected
    } else if consistent(&coarse) && consistent(&fine) {
        DefectVerdict::MartingaleConsistent
    } else {
        if detects(&fine) != detects(&coarse) {
            notes.push("step sizes h and h/2 disagree on detection; no verdict".into());
        } else if detects(&fine) && !overlap {
            notes.push("defect estimates at h and h/2 do not overlap; discretization bias suspected".into());
        }
        if fine.defect < -z * fine.std_error {
            notes.push("defect significantly negative: scheme bias, since nonnegative local martingales are supermartingales".into());
        }
        DefectVerdict::Inconclusive
    };
    notes.push(format!(
        "stopping times rounded up to the grid; barrier-stopped paths contribute 0 ({} at h, {} at h/2)",
        coarse.n_barrier, fine.n_barrier
    ));
    if fine.n_gate_failed > 0 {
        notes.push(format!(
            "{} of {} paths failed the hypothesis gate at t = 0 and are excluded",
            fine.n_gate_failed, fine.n_paths
        ));
    }
    DefectReport {
        t_eval,
        s0,
        estimate_e: fine.estimate,
        defect: fine.defect,
        std_error: fine.std_error,
        n_paths: fine.n_paths,
        verdict,
        confidence_z: z,
        coarse,
        fine,
        measure_change: None,
        bias_notes: notes,
    }
}

/// Defect of the (possibly enlarged) model at `t_eval = cfg.grid.horizon()`,
/// run at the configured step `h` and at `h/2`.
pub fn estimate_defect<O: DriftOverlay>(
    model: &VolatilityModelSpec,
    overlay: &O,
    cfg: &SimConfig,
    n_paths: u64,
    threads: usize,
    z: f64,
) -> Result<DefectReport, StatsError> {
    let fine_cfg = cfg.clone().with_grid(cfg.grid.refined());
    let (coarse, _) = defect_run(model.s0, cfg.grid.h(), n_paths, threads, |i| {
        simulate_summary(model, overlay, cfg, i)
    })?;
    let (fine, novikov) = defect_run(model.s0, fine_cfg.grid.h(), n_paths, threads, |i| {
        simulate_summary(model, overlay, &fine_cfg, i)
    })?;
    let mut notes = vec![format!("scheme {:?}, v truncated at 0, S in log space", cfg.scheme)];
    let schedule: Vec<(f64, f64)> = DEFAULT_TRUNCATION_SCHEDULE.iter().map(|&m| (m, m)).collect();
    let mc = validate_measure_change(&novikov, &schedule, DEFAULT_TRUNCATION_THRESHOLD);
    notes.push(match mc.smallest_validated_m {
        Some(m) => format!("measure change validated from truncation level m = {m} (h(m) = m)"),
        None => "measure change not validated at any truncation level up to m = 100".into(),
    });
    let mut report = combine(coarse, fine, z, cfg.grid.horizon(), model.s0, notes);
    report.measure_change = Some(mc);
    Ok(report)
}

/// Defect of `dX = X sigma(X) dB` at `cfg.grid.horizon()`, at `h` and `h/2`.
pub fn estimate_scalar_defect<F: Fn(f64) -> f64 + Sync>(
    sigma: &F,
    x0: f64,
    cfg: &SimConfig,
    n_paths: u64,
    threads: usize,
    z: f64,
) -> Result<DefectReport, StatsError> {
    let fine_cfg = cfg.clone().with_grid(cfg.grid.refined());
    let (coarse, _) = defect_run(x0, cfg.grid.h(), n_paths, threads, |i| simulate_scalar_summary(sigma, x0, cfg, i))?;
    let (fine, _) = defect_run(x0, fine_cfg.grid.h(), n_paths, threads, |i| {
        simulate_scalar_summary(sigma, x0, &fine_cfg, i)
    })?;
    let notes = vec!["scalar equation, exponential-Euler in ln X".to_string()];
    Ok(combine(coarse, fine, z, cfg.grid.horizon(), x0, notes))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl From<&MeanAccumulator> for Estimate {
    fn from(m: &MeanAccumulator) -> Self {
        Estimate {
            mean: m.mean(),
            std_error: m.std_error(),
        }
    }
}

/// `S_0 = E[S_{t^tau^T_n} 1{t^tau < T_n}] + E[S_{T_n} 1{T_n <= t^tau}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub s0: f64,
    pub barrier_level: f64,
    pub stopped_term: Estimate,
    /// `S_0 P_hat(T_n <= t^tau)` from paths under the share numeraire.
    pub barrier_term: Estimate,
    /// Plain average of `S_{T_n} 1{T_n <= t^tau}`; heavy-tailed when the
    /// per-step volatility at the barrier is large.
    pub barrier_term_direct: Estimate,
    pub residual: f64,
    pub residual_std_error: f64,
    /// `|residual| <= 3 SE`.
    pub straddles_zero: bool,
    pub direct_residual: f64,
    pub direct_residual_std_error: f64,
}

/// Decomposition residual from `original` paths and independent
/// `numeraire` paths of the same stopped dynamics. The second term uses
/// `E[S_{T_n} 1{T_n <= t}] = S_0 P_hat(T_n <= t)`.
pub fn decomposition_check(s0: f64, barrier_level: f64, original: &[PathSummary], numeraire: &[PathSummary]) -> DecompositionReport {
    let mut stopped = MeanAccumulator::default();
    let mut direct = MeanAccumulator::default();
    let mut total = MeanAccumulator::default();
    for p in original {
        let (a, b) = if p.barrier_stopped() { (0.0, p.s) } else { (p.s, 0.0) };
        stopped.push(a);
        direct.push(b);
        total.push(a + b);
    }
    let mut hat = MeanAccumulator::default();
    for p in numeraire {
        hat.push(if p.barrier_stopped() { s0 } else { 0.0 });
    }
    let residual = stopped.mean() + hat.mean() - s0;
    let residual_std_error = (stopped.std_error().powi(2) + hat.std_error().powi(2)).sqrt();
    DecompositionReport {
        s0,
        barrier_level,
        stopped_term: (&stopped).into(),
        barrier_term: (&hat).into(),
        barrier_term_direct: (&direct).into(),
        residual,
        residual_std_error,
        straddles_zero: residual.abs() <= 3.0 * residual_std_error,
        direct_residual: total.mean() - s0,
        direct_residual_std_error: total.std_error(),
    }
}

fn collect<F>(n_paths: u64, threads: usize, path: F) -> Result<Vec<PathSummary>, StatsError>
where
    F: Fn(u64) -> Result<PathSummary, EngineError> + Sync,
{
    Ok(run_sharded(n_paths, DEFAULT_SHARD_SIZE, threads, Vec::new, |i, acc: &mut Vec<PathSummary>| {
        acc.push(path(i)?);
        Ok::<(), EngineError>(())
    })?)
}

/// Runs the scalar equation under both measures and checks the
/// decomposition at the top barrier level.
pub fn scalar_decomposition<F: Fn(f64) -> f64 + Sync>(
    sigma: &F,
    x0: f64,
    cfg: &SimConfig,
    n_paths: u64,
    threads: usize,
) -> Result<DecompositionReport, StatsError> {
    let orig_cfg = cfg.clone().with_measure(Measure::Original);
    let hat_cfg = cfg.clone().with_measure(Measure::ShareNumeraire);
    let hat_cfg = SimConfig {
        seed: cfg.seed ^ NUMERAIRE_SEED_SALT,
        ..hat_cfg
    };
    let original = collect(n_paths, threads, |i| simulate_scalar_summary(sigma, x0, &orig_cfg, i))?;
    let numeraire = collect(n_paths, threads, |i| simulate_scalar_summary(sigma, x0, &hat_cfg, i))?;
    Ok(decomposition_check(x0, cfg.barrier.top(), &original, &numeraire))
}

/// As [`scalar_decomposition`] for the `(S, v)` model with an overlay.
pub fn model_decomposition<O: DriftOverlay>(
    model: &VolatilityModelSpec,
    overlay: &O,
    cfg: &SimConfig,
    n_paths: u64,
    threads: usize,
) -> Result<DecompositionReport, StatsError> {
    let orig_cfg = cfg.clone().with_measure(Measure::Original);
    let hat_cfg = SimConfig {
        seed: cfg.seed ^ NUMERAIRE_SEED_SALT,
        ..cfg.clone().with_measure(Measure::ShareNumeraire)
    };
    let original = collect(n_paths, threads, |i| simulate_summary(model, overlay, &orig_cfg, i))?;
    let numeraire = collect(n_paths, threads, |i| simulate_summary(model, overlay, &hat_cfg, i))?;
    Ok(decomposition_check(model.s0, cfg.barrier.top(), &original, &numeraire))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplosionLevel {
    pub level: f64,
    pub probability: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplosionReport {
    pub t_eval: f64,
    pub levels: Vec<ExplosionLevel>,
    /// Probability at the largest level.
    pub liminf_proxy: f64,
    /// Nonincreasing in the level up to CI overlap.
    pub monotone: bool,
    pub n_paths: u64,
    pub n_gate_failed: u64,
}

/// `P_hat(T_n <= t ^ tau)` per barrier level, simulated under the share
/// numeraire. Gate-failed paths are excluded.
pub fn explosion_probability<O: DriftOverlay>(
    model: &VolatilityModelSpec,
    overlay: &O,
    cfg: &SimConfig,
    n_paths: u64,
    threads: usize,
    z: f64,
) -> Result<ExplosionReport, StatsError> {
    let hat_cfg = cfg.clone().with_measure(Measure::ShareNumeraire);
    let paths = collect(n_paths, threads, |i| simulate_summary(model, overlay, &hat_cfg, i))?;
    let levels = cfg.barrier.levels();
    let mut accs = vec![MeanAccumulator::default(); levels.len()];
    let mut gate = 0;
    for p in &paths {
        if p.gate_failed {
            gate += 1;
            continue;
        }
        for (acc, hit) in accs.iter_mut().zip(&p.barrier_hits) {
            acc.push(if hit.is_some() { 1.0 } else { 0.0 });
        }
    }
    if accs[0].n == 0 {
        return Err(StatsError::HypothesisGateFailed);
    }
    let out: Vec<ExplosionLevel> = levels
        .iter()
        .zip(&accs)
        .map(|(&level, a)| ExplosionLevel {
            level,
            probability: a.mean(),
            std_error: a.std_error(),
        })
        .collect();
    let monotone = out.windows(2).all(|w| {
        w[1].probability <= w[0].probability + z * (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt()
    });
    Ok(ExplosionReport {
        t_eval: cfg.grid.horizon(),
        liminf_proxy: out[out.len() - 1].probability,
        levels: out,
        monotone,
        n_paths,
        n_gate_failed: gate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonLevel {
    pub step: f64,
    pub grid_points: u64,
    pub violations: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub levels: Vec<ComparisonLevel>,
    /// Violation fraction nonincreasing as the step shrinks.
    pub nonincreasing: bool,
}

#[derive(Default)]
struct Counts {
    points: u64,
    violations: u64,
}

impl Accumulator for Counts {
    fn merge_from(&mut self, other: Self) {
        self.points += other.points;
        self.violations += other.violations;
    }
}

fn comparison_report(levels: Vec<ComparisonLevel>) -> ComparisonReport {
    let mut sorted = levels.clone();
    sorted.sort_by(|a, b| b.step.total_cmp(&a.step));
    let nonincreasing = sorted.windows(2).all(|w| w[1].fraction <= w[0].fraction);
    ComparisonReport { levels, nonincreasing }
}

/// Setup of a coupled comparison run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonSetup {
    pub x0: f64,
    pub y0: f64,
    pub horizon: f64,
    pub n_paths: u64,
    pub seed: u64,
    pub noise: NoiseMode,
    pub threads: usize,
}

/// Couples `dX = mu(X) dW + hi(X) dt` and `dY = mu(Y) dW + lo(Y) dt` through
/// the same increments and counts grid points `t > 0` with `X <= Y`, for
/// each `h = horizon 2^-k`.
pub fn comparison_harness<M, L, H>(mu: M, drift_lo: L, drift_hi: H, setup: &ComparisonSetup, exponents: &[u32]) -> Result<ComparisonReport, StatsError>
where
    M: Fn(f64) -> f64 + Sync,
    L: Fn(f64) -> f64 + Sync,
    H: Fn(f64) -> f64 + Sync,
{
    if setup.x0 < setup.y0 {
        return Err(StatsError::InvalidArgument {
            field: "x0",
            reason: "the high-drift solution must start at or above the low one".into(),
        });
    }
    let mut levels = Vec::new();
    for &k in exponents {
        let n = 1usize << k;
        let h = setup.horizon / n as f64;
        let counts = run_sharded(setup.n_paths, DEFAULT_SHARD_SIZE, setup.threads, Counts::default, |path, acc: &mut Counts| {
            let mut noise = Noise::for_path(setup.seed ^ u64::from(k), path, setup.noise);
            let (mut x, mut y) = (setup.x0, setup.y0);
            for _ in 0..n {
                let dw = h.sqrt() * noise.normal();
                let xn = (x + drift_hi(x) * h + mu(x) * dw).max(0.0);
                let yn = (y + drift_lo(y) * h + mu(y) * dw).max(0.0);
                x = xn;
                y = yn;
                acc.points += 1;
                if x <= y {
                    acc.violations += 1;
                }
            }
            Ok::<(), StatsError>(())
        })?;
        levels.push(ComparisonLevel {
            step: h,
            grid_points: counts.points,
            violations: counts.violations,
            fraction: counts.violations as f64 / counts.points.max(1) as f64,
        });
    }
    Ok(comparison_report(levels))
}

/// The explosion comparison pair: the enlarged `v` (drift
/// `b_hat`) against `dY = mu(Y) dW + (b + eps1 mu^2 - eps2 mu)(Y) dt` with
/// the same `W`, compared on `[0, tau]`.
#[allow(clippy::too_many_arguments)]
pub fn enlarged_comparison<O: DriftOverlay>(
    model: &VolatilityModelSpec,
    overlay: &O,
    cfg: &SimConfig,
    eps1: f64,
    eps2: f64,
    n_paths: u64,
    threads: usize,
    exponents: &[u32],
) -> Result<ComparisonReport, StatsError> {
    let lo = |y: f64| {
        let m = model.mu(y);
        model.b(y) + eps1 * m * m - eps2 * m
    };
    let mut levels = Vec::new();
    for &k in exponents {
        let n = 1usize << k;
        let grid = crate::engine::TimeGrid::new(cfg.grid.horizon(), n)?;
        let run_cfg = cfg.clone().with_grid(grid);
        let h = grid.h();
        let counts = run_sharded(n_paths, DEFAULT_SHARD_SIZE, threads, Counts::default, |path, acc: &mut Counts| {
            let p = simulate_path(model, overlay, &run_cfg, path)?;
            let mut y = model.v0;
            for i in 1..=p.stop_index {
                let dw = p.w[i] - p.w[i - 1];
                y = (y + lo(y) * h + model.mu(y) * dw).max(0.0);
                acc.points += 1;
                if p.v[i] <= y {
                    acc.violations += 1;
                }
            }
            Ok::<(), StatsError>(())
        })?;
        levels.push(ComparisonLevel {
            step: h,
            grid_points: counts.points,
            violations: counts.violations,
            fraction: counts.violations as f64 / counts.points.max(1) as f64,
        });
    }
    Ok(comparison_report(levels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupermartingaleScan {
    pub times: Vec<f64>,
    pub estimates: Vec<f64>,
    pub nonincreasing: bool,
    /// Consecutive `(t_i, t_{i+1})` whose increase exceeds the CI overlap.
    pub violations: Vec<(f64, f64)>,
}

/// Checks that `E[S_{t ^ tau}]` does not increase in `t` beyond
/// `z * sqrt(se_i^2 + se_j^2)`.
pub fn supermartingale_scan(reports: &[DefectReport], z: f64) -> Result<SupermartingaleScan, StatsError> {
    if reports.len() < 3 {
        return Err(StatsError::TooFewReports {
            needed: 3,
            got: reports.len(),
        });
    }
    let mut sorted: Vec<&DefectReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.t_eval.total_cmp(&b.t_eval));
    let violations: Vec<(f64, f64)> = sorted
        .windows(2)
        .filter(|w| {
            let tol = z * (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
            w[1].estimate_e > w[0].estimate_e + tol
        })
        .map(|w| (w[0].t_eval, w[1].t_eval))
        .collect();
    Ok(SupermartingaleScan {
        times: sorted.iter().map(|r| r.t_eval).collect(),
        estimates: sorted.iter().map(|r| r.estimate_e).collect(),
        nonincreasing: violations.is_empty(),
        violations,
    })
}
