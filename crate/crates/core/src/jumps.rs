//! Price driven by a compensated compound Poisson martingale (plus an
//! optional Brownian part): `dS = S_- v^alpha dM`, `dv = mu(v) dW + b(v) dt`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coeffs::VolatilityModelSpec;
use crate::engine::{
    check_finite, effective_scheme, v_step, EngineError, Noise, SimConfig, StopReason, StoppedPathBundle,
};
use crate::enlargement::AllocationRule;
use crate::montecarlo::{run_sharded, DEFAULT_SHARD_SIZE};

/// Exponents above this are treated as overflow of `exp`.
const EXP_OVERFLOW: f64 = 700.0;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum JumpError {
    #[error("invalid jump driver field {field}: {reason}")]
    InvalidDriver { field: &'static str, reason: String },
    #[error("invalid jump model: {0}")]
    InvalidModel(String),
    #[error("infeasible allocation: {0}")]
    InfeasibleAllocation(String),
    #[error("constraint residual {residual:e} exceeds 1e-12")]
    ConstraintResidual { residual: f64 },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// `M_t = sum of jump sizes - intensity E[Y] t + sigma_c beta_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpDriver {
    pub intensity: f64,
    pub sizes: Vec<f64>,
    pub probs: Vec<f64>,
    #[serde(default)]
    pub continuous_vol: f64,
}

impl JumpDriver {
    pub fn new(intensity: f64, sizes: Vec<f64>, probs: Vec<f64>, continuous_vol: f64) -> Result<Self, JumpError> {
        let d = JumpDriver {
            intensity,
            sizes,
            probs,
            continuous_vol,
        };
        d.check()?;
        Ok(d)
    }

    /// Compensated Poisson with a single jump size.
    pub fn poisson(intensity: f64, size: f64) -> Result<Self, JumpError> {
        Self::new(intensity, vec![size], vec![1.0], 0.0)
    }

    pub fn check(&self) -> Result<(), JumpError> {
        let bad = |field, reason: &str| Err(JumpError::InvalidDriver {
            field,
            reason: reason.into(),
        });
        if !(self.intensity >= 0.0 && self.intensity.is_finite()) {
            return bad("intensity", "must be finite and nonnegative");
        }
        if self.sizes.is_empty() || self.sizes.len() != self.probs.len() {
            return bad("sizes", "need one probability per size and at least one size");
        }
        if self.sizes.iter().any(|y| !y.is_finite()) {
            return bad("sizes", "must be finite");
        }
        if self.probs.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return bad("probs", "must be finite and nonnegative");
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad("probs", &format!("must sum to 1, got {total}"));
        }
        if !(self.continuous_vol >= 0.0 && self.continuous_vol.is_finite()) {
            return bad("continuous_vol", "must be finite and nonnegative");
        }
        Ok(())
    }

    pub fn mean_size(&self) -> f64 {
        self.sizes.iter().zip(&self.probs).map(|(y, p)| y * p).sum()
    }

    pub fn mean_sq_size(&self) -> f64 {
        self.sizes.iter().zip(&self.probs).map(|(y, p)| y * y * p).sum()
    }

    /// Rate of `<M^d, M^d>`.
    pub fn discrete_rate(&self) -> f64 {
        self.intensity * self.mean_sq_size()
    }

    /// Rate of `<M, M>`: jump part plus `sigma_c^2`.
    pub fn angle_bracket_rate(&self) -> f64 {
        self.discrete_rate() + self.continuous_vol * self.continuous_vol
    }

    /// Smallest size in the support (sizes with zero probability ignored).
    pub fn min_size(&self) -> f64 {
        self.sizes
            .iter()
            .zip(&self.probs)
            .filter(|(_, p)| **p > 0.0)
            .map(|(y, _)| *y)
            .fold(f64::INFINITY, f64::min)
    }

    fn cumulative(&self) -> Vec<f64> {
        self.probs
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpModelSpec {
    /// Supplies `mu`, `b`, `rho`, `s0`, `v0`; its price family is ignored.
    pub base: VolatilityModelSpec,
    pub alpha_exp: f64,
}

impl JumpModelSpec {
    pub fn new(base: VolatilityModelSpec, alpha_exp: f64) -> Result<Self, JumpError> {
        if !(alpha_exp > 0.0 && alpha_exp.is_finite()) {
            return Err(JumpError::InvalidModel(format!("alpha_exp must be positive, got {alpha_exp}")));
        }
        Ok(JumpModelSpec { base, alpha_exp })
    }

    pub fn v_pow(&self, v: f64) -> f64 {
        v.powf(self.alpha_exp)
    }
}

/// Terminal state of a jump path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpSummary {
    pub stop_reason: StopReason,
    pub stop_index: usize,
    pub log_s: f64,
    pub s: f64,
    pub v: f64,
    /// `M` at the stop.
    pub m: f64,
    /// `[M, M]` at the stop.
    pub qv: f64,
    pub n_jumps: u64,
}

fn run_jump_path(
    spec: &JumpModelSpec,
    driver: &JumpDriver,
    cfg: &SimConfig,
    path: u64,
    record: bool,
) -> Result<(JumpSummary, Option<StoppedPathBundle>), EngineError> {
    let base = &spec.base;
    let (scheme, scheme_note) = effective_scheme(base, cfg.scheme);
    let grid = &cfg.grid;
    let (n, h) = (grid.n_steps(), grid.h());
    let sqrt_h = h.sqrt();
    let rho = base.rho;
    let rho_c = (1.0 - rho * rho).sqrt();
    let levels = cfg.barrier.levels();
    let cumulative = driver.cumulative();
    let compensator = driver.intensity * driver.mean_size();
    let sc = driver.continuous_vol;

    let mut noise = Noise::for_path(cfg.seed, path, cfg.noise);
    let var_h = noise.variance() * h;
    let mut log_s = base.s0.ln();
    let mut v = base.v0;
    let (mut beta, mut w, mut m, mut qv) = (0.0, 0.0, 0.0, 0.0);
    let mut n_jumps = 0;
    let mut hits: Vec<Option<usize>> = levels.iter().map(|&l| (v >= l).then_some(0)).collect();
    let mut arrays: [Vec<f64>; 8] = Default::default();
    let mut i = 0;

    let reason = loop {
        if record {
            for (a, x) in arrays.iter_mut().zip([grid.time(i), log_s.exp(), log_s, v, beta, w, m, qv]) {
                a.push(x);
            }
        }
        if v >= cfg.barrier.top() {
            break StopReason::Barrier {
                level: cfg.barrier.top(),
            };
        }
        if i == n {
            break StopReason::Matured;
        }
        let va = spec.v_pow(v);
        let xi1 = noise.normal();
        let xi2 = noise.normal();
        let d_beta = sqrt_h * xi1;
        let dw = rho * xi1 * sqrt_h + rho_c * sqrt_h * xi2;

        let count = noise.poisson(driver.intensity * h);
        let mut jump_log = 0.0;
        let mut floor = false;
        let mut dm_jump = 0.0;
        for _ in 0..count {
            let y = driver.sizes[noise.categorical(&cumulative)];
            dm_jump += y;
            qv += y * y;
            let factor = 1.0 + va * y;
            if factor <= 0.0 {
                floor = true;
                break;
            }
            jump_log += factor.ln();
        }
        n_jumps += count;
        if floor {
            break StopReason::JumpFloor;
        }
        log_s += jump_log - va * compensator * h + va * sc * d_beta - 0.5 * va * va * sc * sc * var_h;
        m += dm_jump - compensator * h + sc * d_beta;
        qv += sc * sc * h;

        let vn = v_step(base, scheme, v, 0.0, h, dw, var_h);
        i += 1;
        check_finite(i, "ln S", log_s)?;
        check_finite(i, "v", vn)?;
        v = vn;
        beta += d_beta;
        w += dw;
        for (hit, &level) in hits.iter_mut().zip(levels) {
            if hit.is_none() && v >= level {
                *hit = Some(i);
            }
        }
    };

    let summary = JumpSummary {
        stop_reason: reason,
        stop_index: i,
        log_s,
        s: log_s.exp(),
        v,
        m,
        qv,
        n_jumps,
    };
    let bundle = record.then(|| {
        let [times, s, log_s, v, b, w, m, qv] = arrays;
        let mut aux = BTreeMap::new();
        aux.insert("M".to_string(), m);
        aux.insert("QV".to_string(), qv);
        StoppedPathBundle {
            times,
            s,
            log_s,
            v,
            b,
            w,
            stop_reason: reason,
            stop_index: i,
            barrier_hits: hits,
            gate_failed: false,
            aux,
            scheme,
            scheme_note,
            novikov: 0.0,
        }
    });
    Ok((summary, bundle))
}

/// Simulates path `path`. Jumps act multiplicatively, `S <- S (1 + v^alpha Y)`,
/// with `v` frozen over the step; a factor `<= 0` stops the path with
/// `JumpFloor` before it is applied. `b` holds the Brownian part's driver,
/// `aux` holds `M` and `[M, M]`.
pub fn simulate_jump_path(spec: &JumpModelSpec, driver: &JumpDriver, cfg: &SimConfig, path: u64) -> Result<StoppedPathBundle, EngineError> {
    run_jump_path(spec, driver, cfg, path, true).map(|(_, b)| b.expect("recorded"))
}

pub fn simulate_jump_summary(spec: &JumpModelSpec, driver: &JumpDriver, cfg: &SimConfig, path: u64) -> Result<JumpSummary, EngineError> {
    run_jump_path(spec, driver, cfg, path, false).map(|(s, _)| s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Positivity {
    Guaranteed,
    /// Positive while `v < v_bound`.
    Conditional { v_bound: f64 },
    /// `1 + v0^alpha * witness <= 0`.
    Violated { witness: f64, v: f64 },
}

/// Checks `v^alpha Y > -1` over the jump support.
pub fn jump_positivity_check(spec: &JumpModelSpec, driver: &JumpDriver) -> Positivity {
    let y = driver.min_size();
    if y >= 0.0 {
        return Positivity::Guaranteed;
    }
    let v_bound = (1.0 / y.abs()).powf(1.0 / spec.alpha_exp);
    if spec.base.v0 >= v_bound {
        Positivity::Violated { witness: y, v: spec.base.v0 }
    } else {
        Positivity::Conditional { v_bound }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// No overflow and no heavy-tail warning.
    pub finite: bool,
    /// The top 0.1% of samples carry more than half the sum.
    pub heavy_tail: bool,
    pub top_share: f64,
    pub n_paths: u64,
    pub n_overflow: u64,
}

/// Monte Carlo estimate of
/// `E[exp(int v^{2 alpha} d<M^d> + 1/2 int v^{2 alpha} d<M^c>)]` over the
/// grid horizon, with the `v` dynamics of the engine (no barrier).
pub fn moment_condition_estimate(
    spec: &JumpModelSpec,
    driver: &JumpDriver,
    cfg: &SimConfig,
    n_paths: u64,
    threads: usize,
    z: f64,
) -> Result<MomentEstimate, JumpError> {
    let base = &spec.base;
    let (scheme, _) = effective_scheme(base, cfg.scheme);
    let (n, h) = (cfg.grid.n_steps(), cfg.grid.h());
    let rate = driver.discrete_rate() + 0.5 * driver.continuous_vol * driver.continuous_vol;
    let exponents = run_sharded(n_paths, DEFAULT_SHARD_SIZE, threads, Vec::new, |path, acc: &mut Vec<f64>| {
        let mut noise = Noise::for_path(cfg.seed, path, cfg.noise);
        let var_h = noise.variance() * h;
        let mut v = base.v0;
        let mut e = 0.0;
        for _ in 0..n {
            e += spec.v_pow(v).powi(2) * rate * h;
            let dw = h.sqrt() * noise.normal();
            v = v_step(base, scheme, v, 0.0, h, dw, var_h);
            if !v.is_finite() || e > EXP_OVERFLOW {
                e = f64::INFINITY;
                break;
            }
        }
        acc.push(e);
        Ok::<(), JumpError>(())
    })?;
    let n_overflow = exponents.iter().filter(|e| !e.is_finite()).count() as u64;
    let mut values: Vec<f64> = exponents.iter().map(|e| e.exp()).collect();
    let mut acc = crate::montecarlo::MeanAccumulator::default();
    values.iter().for_each(|&x| acc.push(x));
    values.sort_by(|a, b| b.total_cmp(a));
    let top = values.len().div_ceil(1000);
    let total: f64 = values.iter().sum();
    let top_share = if total > 0.0 && total.is_finite() {
        values[..top].iter().sum::<f64>() / total
    } else {
        1.0
    };
    // a lone path cannot be judged heavy-tailed against itself
    let heavy_tail = values.len() >= 1000 && top_share > 0.5;
    let (estimate, se) = if n_overflow > 0 {
        (f64::INFINITY, f64::INFINITY)
    } else {
        (acc.mean(), acc.std_error())
    };
    Ok(MomentEstimate {
        estimate,
        std_error: se,
        ci_low: estimate - z * se,
        ci_high: estimate + z * se,
        finite: n_overflow == 0 && !heavy_tail,
        heavy_tail,
        top_share,
        n_paths,
        n_overflow,
    })
}

/// Allocation for `lambda k S^2 v^{2a} + rho J S v^a + lambda H S v^a = 0`.
pub fn allocate_jump_hj(
    k: f64,
    s: f64,
    v_pow_alpha: f64,
    lambda: f64,
    rho: f64,
    rule: AllocationRule,
) -> Result<(f64, f64), JumpError> {
    let theta = match rule {
        AllocationRule::JZero => 1.0,
        AllocationRule::HZero => 0.0,
        AllocationRule::Split { theta } if (0.0..=1.0).contains(&theta) => theta,
        AllocationRule::Split { theta } => {
            return Err(JumpError::InfeasibleAllocation(format!("theta must lie in [0, 1], got {theta}")))
        }
    };
    if theta < 1.0 && rho == 0.0 {
        return Err(JumpError::InfeasibleAllocation("J cannot carry the constraint when rho = 0".into()));
    }
    let x = k * s * v_pow_alpha;
    let h = -theta * x;
    let j = if theta == 1.0 { 0.0 } else { -(1.0 - theta) * lambda * x / rho };
    Ok((h + 0.0, j + 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpDrift {
    /// Drift of `S` under the enlarged filtration, `lambda k S^2 v^{2a}`.
    pub s_drift: f64,
    /// `k mu^2 + (rho H + J) mu`.
    pub v_drift_addition: f64,
    pub residual: f64,
}

/// Drift additions for given `(k, H, J)`; rejects allocations whose
/// constraint residual exceeds `1e-12` (relative to the largest term).
#[allow(clippy::too_many_arguments)]
pub fn enlarged_jump_drift(
    k: f64,
    h: f64,
    j: f64,
    s: f64,
    v_pow_alpha: f64,
    mu_v: f64,
    lambda: f64,
    rho: f64,
) -> Result<JumpDrift, JumpError> {
    let terms = [lambda * k * s * s * v_pow_alpha * v_pow_alpha, rho * j * s * v_pow_alpha, lambda * h * s * v_pow_alpha];
    let residual = terms.iter().sum::<f64>();
    let scale = terms.iter().fold(1.0f64, |a, t| a.max(t.abs()));
    if !(residual.abs() <= 1e-12 * scale) {
        return Err(JumpError::ConstraintResidual { residual });
    }
    Ok(JumpDrift {
        s_drift: terms[0],
        v_drift_addition: k * mu_v * mu_v + (rho * h + j) * mu_v,
        residual,
    })
}
