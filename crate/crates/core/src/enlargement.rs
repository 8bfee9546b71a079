//! Initial enlargement of the filtration by a random variable `L`: the
//! drift kernel `k^L`, the Girsanov pair `(H, J)`, the stopping time `tau`
//! and the density process `Z`.
//!
//! [`EnlargedDynamics`] packages these as an engine overlay. The enlarging
//! variable is sampled at the start of each path and `B` is then generated
//! conditionally on it (a Brownian bridge to `B_T`, or a three-dimensional
//! Bessel bridge for a hitting time), while `S` and `W` are driven by the
//! innovation of `B` in the enlarged filtration.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::coeffs::{ModelFamily, VolatilityModelSpec};
use crate::engine::{DriftOverlay, EngineError, Noise, OverlayStep, StepView, TimeGrid};

/// Default singularity guard as a fraction of the horizon.
pub const DEFAULT_GUARD_FRACTION: f64 = 1e-3;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum EnlargementError {
    #[error("k-singularity window: t = {t} is within the guard of the singular time {singular_at}")]
    KSingularity { t: f64, singular_at: f64 },
    #[error("invalid enlargement parameter {field} = {value}: {reason}")]
    InvalidParameter {
        field: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("allocation rule {rule} requires rho != 0")]
    InfeasibleAllocation { rule: &'static str },
    #[error("realized L does not match the enlargement kind")]
    RealizationMismatch,
    #[error("paths of unequal length: {0}")]
    Misaligned(String),
    #[error("density process not finite at step {0}")]
    NonFiniteDensity(usize),
}

impl From<EnlargementError> for EngineError {
    fn from(e: EnlargementError) -> Self {
        EngineError::Overlay {
            step: 0,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnlargementKind {
    /// `L = B_T`.
    BrownianTerminal,
    /// `L = T_a = inf{t: B_t = a}`.
    HittingTime { level: f64 },
    /// `L = 1{B_T > threshold}`.
    FinitePartition { threshold: f64 },
    /// `L` independent of the drivers; `k = 0`.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnlargementSpec {
    pub kind: EnlargementKind,
    /// The `T` in `B_T`.
    pub horizon: f64,
    /// Time buffer before the singular time of `k`.
    pub delta_guard: f64,
}

impl EnlargementSpec {
    /// Guard defaults to `horizon / 1000`.
    pub fn new(kind: EnlargementKind, horizon: f64) -> Result<Self, EnlargementError> {
        Self::with_guard(kind, horizon, horizon * DEFAULT_GUARD_FRACTION)
    }

    pub fn with_guard(kind: EnlargementKind, horizon: f64, delta_guard: f64) -> Result<Self, EnlargementError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(EnlargementError::InvalidParameter {
                field: "horizon",
                value: horizon,
                reason: "must be positive",
            });
        }
        if !(delta_guard > 0.0 && delta_guard < horizon) {
            return Err(EnlargementError::InvalidParameter {
                field: "delta_guard",
                value: delta_guard,
                reason: "must lie in (0, horizon)",
            });
        }
        match kind {
            EnlargementKind::HittingTime { level } if !(level > 0.0 && level.is_finite()) => {
                return Err(EnlargementError::InvalidParameter {
                    field: "level",
                    value: level,
                    reason: "hitting level must exceed B_0 = 0",
                })
            }
            EnlargementKind::FinitePartition { threshold } => {
                let p = std_normal().cdf(threshold / horizon.sqrt());
                if !(threshold.is_finite() && p > 0.0 && p < 1.0) {
                    return Err(EnlargementError::InvalidParameter {
                        field: "threshold",
                        value: threshold,
                        reason: "both cells must have positive probability",
                    });
                }
            }
            _ => {}
        }
        Ok(EnlargementSpec {
            kind,
            horizon,
            delta_guard,
        })
    }
}

/// The sampled enlarging variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RealizedL {
    BrownianTerminal { b_terminal: f64 },
    HittingTime { hitting_time: f64 },
    FinitePartition { b_terminal: f64, upper: bool },
    Independent,
}

/// Path state entering `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KInputs {
    pub t: f64,
    pub s: f64,
    pub v: f64,
    pub b: f64,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

fn singular_time(spec: &EnlargementSpec, l: &RealizedL) -> Option<f64> {
    match (spec.kind, l) {
        (EnlargementKind::Independent, _) => None,
        (EnlargementKind::HittingTime { .. }, RealizedL::HittingTime { hitting_time }) => Some(*hitting_time),
        _ => Some(spec.horizon),
    }
}

fn guard(spec: &EnlargementSpec, l: &RealizedL, t: f64) -> Result<(), EnlargementError> {
    match singular_time(spec, l) {
        Some(s) if t >= s - spec.delta_guard => Err(EnlargementError::KSingularity { t, singular_at: s }),
        _ => Ok(()),
    }
}

/// Drift of `B` in the enlarged filtration (before any measure change).
pub fn enlarged_b_drift(spec: &EnlargementSpec, l: &RealizedL, t: f64, b: f64) -> Result<f64, EnlargementError> {
    guard(spec, l, t)?;
    let tt = spec.horizon;
    match (spec.kind, l) {
        (EnlargementKind::Independent, _) => Ok(0.0),
        (EnlargementKind::BrownianTerminal, RealizedL::BrownianTerminal { b_terminal }) => {
            Ok((b_terminal - b) / (tt - t))
        }
        (EnlargementKind::HittingTime { level }, RealizedL::HittingTime { hitting_time }) => {
            let y = level - b;
            if !(y > 0.0) {
                return Err(EnlargementError::KSingularity {
                    t,
                    singular_at: *hitting_time,
                });
            }
            let tail = if hitting_time.is_finite() {
                y / (hitting_time - t)
            } else {
                0.0
            };
            Ok(-1.0 / y + tail)
        }
        (EnlargementKind::FinitePartition { threshold }, RealizedL::FinitePartition { upper, .. }) => {
            let root = (tt - t).sqrt();
            let z = (b - threshold) / root;
            let n = std_normal();
            let (num, cell) = if *upper {
                (n.pdf(z), n.cdf(z))
            } else {
                (-n.pdf(z), n.cdf(-z))
            };
            Ok(num / (root * cell))
        }
        _ => Err(EnlargementError::RealizationMismatch),
    }
}

/// The drift kernel `k^L` at one grid point.
///
/// * `B_T`: `k = X (B_T - B_t) / (T - t)`
/// * `T_a`: `k = -1/(a - B_t) + (a - B_t)/(T_a - t)`
/// * two-cell partition: `k = +-pdf(z) / (sqrt(T - t) N X)` with
///   `z = (B_t - c)/sqrt(T - t)` and `N` the conditional probability of the
///   realized cell
/// * independent: `0`
///
/// `X` is the diffusion coefficient of `S` (`S v` in the basic family).
pub fn k_value(
    spec: &EnlargementSpec,
    model: &VolatilityModelSpec,
    state: &KInputs,
    l: &RealizedL,
) -> Result<f64, EnlargementError> {
    let x = model.s_diffusion(state.s, state.v);
    let drift = enlarged_b_drift(spec, l, state.t, state.b)?;
    Ok(match spec.kind {
        EnlargementKind::Independent => 0.0,
        EnlargementKind::BrownianTerminal => x * drift,
        EnlargementKind::HittingTime { .. } => drift,
        EnlargementKind::FinitePartition { .. } => drift / x,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum AllocationRule {
    JZero,
    HZero,
    /// `H` carries the fraction `theta` of the constraint, `J` the rest.
    Split { theta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GirsanovAllocation {
    pub rule: AllocationRule,
    /// The cap `eps2` on `|rho H + J|`.
    pub cap_eps2: f64,
}

impl GirsanovAllocation {
    pub fn new(rule: AllocationRule, cap_eps2: f64, rho: f64) -> Result<Self, EnlargementError> {
        if !(cap_eps2 > 0.0) {
            return Err(EnlargementError::InvalidParameter {
                field: "eps2",
                value: cap_eps2,
                reason: "must be positive",
            });
        }
        check_rule(rule, rho)?;
        Ok(GirsanovAllocation { rule, cap_eps2 })
    }
}

fn check_rule(rule: AllocationRule, rho: f64) -> Result<(), EnlargementError> {
    match rule {
        AllocationRule::HZero if rho == 0.0 => Err(EnlargementError::InfeasibleAllocation { rule: "h_zero" }),
        AllocationRule::Split { theta } if !(0.0..=1.0).contains(&theta) => Err(EnlargementError::InvalidParameter {
            field: "theta",
            value: theta,
            reason: "must lie in [0, 1]",
        }),
        AllocationRule::Split { theta } if theta < 1.0 && rho == 0.0 => {
            Err(EnlargementError::InfeasibleAllocation { rule: "split" })
        }
        _ => Ok(()),
    }
}

/// Solves `k X^2 = -X H - rho J` for `(H, J)` under `rule`, where `X` is the
/// diffusion coefficient of `S`.
pub fn allocate_hj(k: f64, x: f64, rho: f64, rule: AllocationRule) -> Result<(f64, f64), EnlargementError> {
    check_rule(rule, rho)?;
    let theta = match rule {
        AllocationRule::JZero => 1.0,
        AllocationRule::HZero => 0.0,
        AllocationRule::Split { theta } => theta,
    };
    let h = -theta * k * x;
    let j = if theta == 1.0 { 0.0 } else { -(1.0 - theta) * k * x * x / rho };
    Ok((h + 0.0, j + 0.0))
}

/// Relative residual of `k X^2 + X H + rho J = 0`.
pub fn constraint_residual(k: f64, x: f64, rho: f64, h: f64, j: f64) -> f64 {
    let scale = (k * x * x).abs().max((x * h).abs()).max((rho * j).abs());
    let r = k * x * x + x * h + rho * j;
    if scale == 0.0 {
        r.abs()
    } else {
        r.abs() / scale
    }
}

/// Extra `v` drift from the enlargement: `k mu^2 + (rho H + J) mu`.
pub fn enlarged_drift_addition(model: &VolatilityModelSpec, k: f64, h: f64, j: f64, v: f64) -> f64 {
    let m = model.mu(v);
    k * m * m + (model.rho * h + j) * m
}

/// `b_hat(v) = b(v) + k mu^2(v) + (rho H + J) mu(v)`. For the power family
/// `mu = alpha v^gamma`, which gives `b + alpha^2 k v^(2 gamma) + v^gamma
/// (alpha rho H + alpha J)`.
pub fn enlarged_drift(model: &VolatilityModelSpec, k: f64, h: f64, j: f64, v: f64) -> f64 {
    model.b(v) + enlarged_drift_addition(model, k, h, j, v)
}

/// Thresholds of `tau = tau^k ^ tau^{H,J}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauRule {
    pub eps1: f64,
    pub eps2: f64,
    /// `alpha` of the power family (scales `k` by `alpha^2` and `rho H + J`
    /// by `alpha`); 1 for the basic family.
    pub scale: f64,
}

impl TauRule {
    pub fn new(eps1: f64, eps2: f64) -> Result<Self, EnlargementError> {
        for (field, value) in [("eps1", eps1), ("eps2", eps2)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(EnlargementError::InvalidParameter {
                    field,
                    value,
                    reason: "must be positive",
                });
            }
        }
        Ok(TauRule { eps1, eps2, scale: 1.0 })
    }

    pub fn for_model(mut self, model: &VolatilityModelSpec) -> Self {
        self.scale = match model.family {
            ModelFamily::Basic => 1.0,
            ModelFamily::Power { alpha, .. } => alpha,
        };
        self
    }

    /// Whether `tau` has occurred at a grid point with these values. The
    /// floor on `k` is one-sided: from `k_0 > eps1` a continuous `k` cannot
    /// reach `k <= -eps1` without first passing `|k| < eps1`, and on a grid
    /// the signed test also catches a step across the band.
    pub fn triggers(&self, k: f64, h: f64, j: f64, rho: f64) -> bool {
        let ks = self.scale * self.scale * k;
        let hj = self.scale * (rho * h + j);
        !(ks >= self.eps1) || !(hj.abs() <= self.eps2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TauResult {
    pub index: usize,
    /// `0 < eps1 < k_0` or `|rho H_0 + J_0| < eps2` failed; `index` is 0.
    pub gate_failed: bool,
}

/// First grid index where `k < eps1` or `|rho H + J| > eps2`, or the last
/// index when neither happens.
pub fn compute_tau(k: &[f64], h: &[f64], j: &[f64], rho: f64, eps1: f64, eps2: f64) -> Result<TauResult, EnlargementError> {
    if k.len() != h.len() || k.len() != j.len() || k.is_empty() {
        return Err(EnlargementError::Misaligned(format!(
            "k {}, H {}, J {}",
            k.len(),
            h.len(),
            j.len()
        )));
    }
    let rule = TauRule::new(eps1, eps2)?;
    match (0..k.len()).find(|&i| rule.triggers(k[i], h[i], j[i], rho)) {
        Some(0) => Ok(TauResult {
            index: 0,
            gate_failed: true,
        }),
        Some(i) => Ok(TauResult {
            index: i,
            gate_failed: false,
        }),
        None => Ok(TauResult {
            index: k.len() - 1,
            gate_failed: false,
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityProcess {
    pub z_path: Vec<f64>,
    /// `1/2 int (H^2 + J^2 + 2 rho H J) ds`.
    pub terminal_integrability_stat: f64,
}

/// `Z_{i+1} = Z_i exp(H dB + J dW - (H^2 + J^2 + 2 rho H J) h / 2)`, where
/// `H_i, J_i` act on the increment from `i` to `i + 1`.
pub fn simulate_density(
    h_path: &[f64],
    j_path: &[f64],
    db: &[f64],
    dw: &[f64],
    rho: f64,
    grid: &TimeGrid,
) -> Result<DensityProcess, EnlargementError> {
    let n = db.len();
    if dw.len() != n || h_path.len() < n || j_path.len() < n {
        return Err(EnlargementError::Misaligned(format!(
            "H {}, J {}, dB {}, dW {}",
            h_path.len(),
            j_path.len(),
            n,
            dw.len()
        )));
    }
    let step = grid.h();
    let mut log_z = 0.0;
    let mut stat = 0.0;
    let mut z_path = Vec::with_capacity(n + 1);
    z_path.push(1.0);
    for i in 0..n {
        let (hh, jj) = (h_path[i], j_path[i]);
        let q = 0.5 * (hh * hh + jj * jj + 2.0 * rho * hh * jj) * step;
        log_z += hh * db[i] + jj * dw[i] - q;
        stat += q;
        let z = log_z.exp();
        if !z.is_finite() || !(z > 0.0) {
            return Err(EnlargementError::NonFiniteDensity(i + 1));
        }
        z_path.push(z);
    }
    Ok(DensityProcess {
        z_path,
        terminal_integrability_stat: stat,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationLevel {
    pub m: f64,
    pub bound: f64,
    /// Share of paths with `T_m < T`.
    pub truncated_fraction: f64,
    pub validated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureChangeReport {
    pub levels: Vec<TruncationLevel>,
    pub threshold: f64,
    pub smallest_validated_m: Option<f64>,
}

/// Default truncated-fraction threshold below which a level validates.
pub const DEFAULT_TRUNCATION_THRESHOLD: f64 = 1e-3;

/// For each `(m, h(m))`, the share of paths whose integrability statistic
/// reaches `h(m)` (so `T_m < T`). A level validates when that share is
/// below `threshold`.
pub fn validate_measure_change(novikov_stats: &[f64], schedule: &[(f64, f64)], threshold: f64) -> MeasureChangeReport {
    let n = novikov_stats.len().max(1) as f64;
    let levels: Vec<TruncationLevel> = schedule
        .iter()
        .map(|&(m, bound)| {
            let truncated = novikov_stats.iter().filter(|&&s| s >= bound).count() as f64 / n;
            TruncationLevel {
                m,
                bound,
                truncated_fraction: truncated,
                validated: !novikov_stats.is_empty() && truncated < threshold,
            }
        })
        .collect();
    let smallest_validated_m = levels
        .iter()
        .filter(|l| l.validated)
        .map(|l| l.m)
        .fold(None, |acc: Option<f64>, m| Some(acc.map_or(m, |a| a.min(m))));
    MeasureChangeReport {
        levels,
        threshold,
        smallest_validated_m,
    }
}

/// The enlarged `(Q, G)` dynamics as an engine overlay: `S` driftless in
/// the innovation of `B`, `v` with drift `b_hat`, stopped at `tau` or at the
/// singularity guard.
#[derive(Debug, Clone)]
pub struct EnlargedDynamics<'a> {
    pub model: &'a VolatilityModelSpec,
    pub enlargement: EnlargementSpec,
    pub allocation: GirsanovAllocation,
    pub tau: TauRule,
}

impl<'a> EnlargedDynamics<'a> {
    pub fn new(
        model: &'a VolatilityModelSpec,
        enlargement: EnlargementSpec,
        allocation: GirsanovAllocation,
        eps1: f64,
    ) -> Result<Self, EnlargementError> {
        check_rule(allocation.rule, model.rho)?;
        let tau = TauRule::new(eps1, allocation.cap_eps2)?.for_model(model);
        Ok(EnlargedDynamics {
            model,
            enlargement,
            allocation,
            tau,
        })
    }

    fn independent(&self) -> bool {
        self.enlargement.kind == EnlargementKind::Independent
    }
}

/// Per-path realization of `L` plus the bridge state for hitting times.
#[derive(Debug, Clone, Copy)]
pub struct RealizedPath {
    pub l: RealizedL,
    bridge: [f64; 3],
}

impl DriftOverlay for EnlargedDynamics<'_> {
    type PathState = RealizedPath;

    fn begin(&self, noise: &mut Noise, _grid: &TimeGrid) -> Result<RealizedPath, EngineError> {
        let tt = self.enlargement.horizon;
        let l = match self.enlargement.kind {
            EnlargementKind::BrownianTerminal => RealizedL::BrownianTerminal {
                b_terminal: tt.sqrt() * noise.normal(),
            },
            EnlargementKind::FinitePartition { threshold } => {
                let b_terminal = tt.sqrt() * noise.normal();
                RealizedL::FinitePartition {
                    b_terminal,
                    upper: b_terminal > threshold,
                }
            }
            EnlargementKind::HittingTime { level } => {
                // T_a has the law of a^2 / xi^2
                let xi = noise.normal();
                RealizedL::HittingTime {
                    hitting_time: level * level / (xi * xi),
                }
            }
            EnlargementKind::Independent => RealizedL::Independent,
        };
        Ok(RealizedPath { l, bridge: [0.0; 3] })
    }

    fn step(&self, state: &mut RealizedPath, view: &StepView) -> Result<OverlayStep, EngineError> {
        if self.independent() {
            return Ok(OverlayStep::default());
        }
        // stop at the last grid point from which the next step stays
        // outside the guard window
        if let Some(s) = singular_time(&self.enlargement, &state.l) {
            if view.t + view.h > s - self.enlargement.delta_guard {
                return Ok(OverlayStep {
                    extra_drift: 0.0,
                    k: f64::NAN,
                    h: f64::NAN,
                    j: f64::NAN,
                    stop: true,
                });
            }
        }
        let inputs = KInputs {
            t: view.t,
            s: view.s,
            v: view.v,
            b: view.b,
        };
        let err = |e: EnlargementError| EngineError::Overlay {
            step: view.index,
            message: e.to_string(),
        };
        let k = k_value(&self.enlargement, self.model, &inputs, &state.l).map_err(err)?;
        let x = self.model.s_diffusion(view.s, view.v);
        let (h, j) = allocate_hj(k, x, self.model.rho, self.allocation.rule).map_err(err)?;
        Ok(OverlayStep {
            extra_drift: enlarged_drift_addition(self.model, k, h, j, view.v),
            k,
            h,
            j,
            stop: self.tau.triggers(k, h, j, self.model.rho),
        })
    }

    fn primary(
        &self,
        state: &mut RealizedPath,
        view: &StepView,
        h: f64,
        d_beta: f64,
        noise: &mut Noise,
    ) -> Result<(f64, f64), EngineError> {
        let tt = self.enlargement.horizon;
        let err = |e: EnlargementError| EngineError::Overlay {
            step: view.index,
            message: e.to_string(),
        };
        match (self.enlargement.kind, state.l) {
            (EnlargementKind::Independent, _) => Ok((d_beta, d_beta)),
            (EnlargementKind::BrownianTerminal, RealizedL::BrownianTerminal { b_terminal })
            | (EnlargementKind::FinitePartition { .. }, RealizedL::FinitePartition { b_terminal, .. }) => {
                let rem = tt - view.t;
                let bridge_drift = (b_terminal - view.b) / rem;
                let shrink = ((rem - h).max(0.0) / rem).sqrt();
                let db = bridge_drift * h + shrink * d_beta;
                let innovation = match self.enlargement.kind {
                    EnlargementKind::BrownianTerminal => d_beta,
                    _ => {
                        let g = enlarged_b_drift(&self.enlargement, &state.l, view.t, view.b).map_err(err)?;
                        d_beta + (bridge_drift - g) * h
                    }
                };
                Ok((innovation, db))
            }
            (EnlargementKind::HittingTime { level }, RealizedL::HittingTime { hitting_time }) => {
                // a - B = |U| with U a 3-d Brownian bridge from (a, 0, 0) to
                // the origin over [0, T_a]. The innovation of |U| is the
                // radial projection of the 3-d noise, and B = a - |U|.
                let mean = |t: f64| {
                    if hitting_time.is_finite() {
                        level * (1.0 - t / hitting_time)
                    } else {
                        level
                    }
                };
                let u = [mean(view.t) + state.bridge[0], state.bridge[1], state.bridge[2]];
                let y = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
                let t_next = view.t + h;
                let shrink = if hitting_time.is_finite() {
                    (hitting_time - t_next) / (hitting_time - view.t)
                } else {
                    1.0
                };
                let xi = [noise.normal(), noise.normal(), noise.normal()];
                let mut radial = 0.0;
                for c in 0..3 {
                    radial += u[c] / y * xi[c];
                    state.bridge[c] = state.bridge[c] * shrink + (h * shrink).sqrt() * xi[c];
                }
                let b = &state.bridge;
                let y_next = ((mean(t_next) + b[0]).powi(2) + b[1].powi(2) + b[2].powi(2)).sqrt();
                Ok((-h.sqrt() * radial, (level - y_next) - view.b))
            }
            _ => Err(err(EnlargementError::RealizationMismatch)),
        }
    }

    fn records_aux(&self) -> bool {
        true
    }

    fn supports_numeraire(&self) -> bool {
        !matches!(self.enlargement.kind, EnlargementKind::HittingTime { .. })
    }
}
