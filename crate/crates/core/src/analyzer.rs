//! Numerical evaluation of the asymptotic martingale / strict local
//! martingale conditions and of Feller's scale-function explosion test.
//!
//! Limit statements (`limsup`, `liminf`, behaviour of `p(x)` at a boundary)
//! cannot be certified from finite evidence. Every asymptotic quantity is
//! evaluated on a geometric grid and decided from its last two decades,
//! with a three-valued verdict: when the evidence disagrees the answer is
//! `Inconclusive` rather than a false certificate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coeffs::{ModelFamily, PhiFunction, VolatilityModelSpec, DEFAULT_X_MAX};
use crate::quadrature;

/// Accumulated scale-function value above which a side counts as divergent.
pub const DIVERGENCE_CAP: f64 = 1e12;

/// Default strictly positive floor for `liminf > 0` decisions.
pub const DEFAULT_POSITIVE_FLOOR: f64 = 1e-8;

const MIN_DECADES: f64 = 6.0;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum AnalyzerError {
    #[error("grid must be positive, increasing and span at least {MIN_DECADES} decades (spans {0:.2})")]
    GridTooShort(f64),
    #[error("phi evaluates nonpositive at x = {0}")]
    NonPositivePhi(f64),
    #[error("power-family precondition failed: rho > 0, gamma + delta > 1 required (rho = {rho}, gamma + delta = {exponent_sum})")]
    PowerPrecondition { rho: f64, exponent_sum: f64 },
    #[error("power-family check requested for a basic-family model")]
    NotPowerFamily,
    #[error("scale function inner integrand singular at y = {0} (mu vanishes inside the domain)")]
    SingularPoint(f64),
    #[error("interior point c = {c} lies outside the state space ({lower}, {upper})")]
    BadInteriorPoint { c: f64, lower: f64, upper: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Satisfied,
    Violated,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticVerdict {
    pub quantity: String,
    pub trend_values: Vec<(f64, f64)>,
    pub verdict: Verdict,
    pub extrapolation_note: String,
}

/// `points_per_decade` points per factor of ten from `x_min` to `x_max`
/// (both included).
pub fn geometric_grid(x_min: f64, x_max: f64, points_per_decade: usize) -> Vec<f64> {
    let decades = (x_max / x_min).log10();
    let n = (decades * points_per_decade as f64).round().max(1.0) as usize;
    let ratio = (x_max / x_min).ln() / n as f64;
    (0..=n)
        .map(|i| {
            if i == n {
                x_max
            } else {
                x_min * (ratio * i as f64).exp()
            }
        })
        .collect()
}

/// Default analysis grid: `[1, 1e6]`, 20 points per decade.
pub fn default_grid() -> Vec<f64> {
    geometric_grid(1.0, DEFAULT_X_MAX, 20)
}

fn check_grid(grid: &[f64]) -> Result<(), AnalyzerError> {
    let ok_shape = grid.len() >= 3 && grid[0] > 0.0 && grid.windows(2).all(|w| w[1] > w[0]);
    let span = if ok_shape {
        (grid[grid.len() - 1] / grid[0]).log10()
    } else {
        0.0
    };
    if !ok_shape || span < MIN_DECADES - 1e-9 {
        return Err(AnalyzerError::GridTooShort(span));
    }
    Ok(())
}

/// Values inside the second-to-last and last decades of the grid; the
/// shared boundary point belongs to both.
struct Tail<'a> {
    prev: Vec<&'a (f64, f64)>,
    last: Vec<&'a (f64, f64)>,
}

impl<'a> Tail<'a> {
    fn of(values: &'a [(f64, f64)]) -> Self {
        let x_end = values[values.len() - 1].0;
        let lo = x_end / 100.0 * (1.0 - 1e-9);
        let mid = x_end / 10.0;
        let split = values
            .iter()
            .min_by(|a, b| (a.0 / mid).ln().abs().total_cmp(&(b.0 / mid).ln().abs()))
            .map(|p| p.0)
            .unwrap_or(mid);
        Tail {
            prev: values.iter().filter(|p| p.0 >= lo && p.0 <= split).collect(),
            last: values.iter().filter(|p| p.0 >= split).collect(),
        }
    }

    fn trend(points: &[&(f64, f64)]) -> f64 {
        match (points.first(), points.last()) {
            (Some(a), Some(b)) => b.1 - a.1,
            _ => 0.0,
        }
    }

    fn min(points: &[&(f64, f64)]) -> f64 {
        points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min)
    }
}

/// Sign with a relative dead-band so that rounding noise on a constant
/// sequence reads as "flat".
fn trend_sign(d: f64, scale: f64) -> i8 {
    let tol = 1e-8 * scale.max(1.0);
    if d > tol {
        1
    } else if d < -tol {
        -1
    } else {
        0
    }
}

fn tail_signs(values: &[(f64, f64)]) -> (f64, f64, i8, i8) {
    let tail = Tail::of(values);
    let scale = tail
        .prev
        .iter()
        .chain(tail.last.iter())
        .map(|p| p.1.abs())
        .fold(0.0, f64::max);
    let d_prev = Tail::trend(&tail.prev);
    let d_last = Tail::trend(&tail.last);
    (d_prev, d_last, trend_sign(d_prev, scale), trend_sign(d_last, scale))
}

fn has_non_finite(values: &[(f64, f64)]) -> Option<f64> {
    values.iter().find(|p| !p.1.is_finite()).map(|p| p.0)
}

/// `limsup < infinity` decided from the last two decades.
fn bounded_above(values: &[(f64, f64)]) -> (Verdict, String) {
    if let Some(x) = has_non_finite(values) {
        return (Verdict::Inconclusive, format!("overflow at x = {x}"));
    }
    let (d_prev, d_last, s_prev, s_last) = tail_signs(values);
    if s_prev * s_last < 0 {
        return (
            Verdict::Inconclusive,
            format!("trend changes sign over the last two decades ({d_prev:.3e}, {d_last:.3e})"),
        );
    }
    if s_last <= 0 {
        return (
            Verdict::Satisfied,
            format!("non-increasing over the last decade (trend {d_last:.3e})"),
        );
    }
    if d_last < 0.5 * d_prev {
        (
            Verdict::Satisfied,
            format!("increasing but decelerating geometrically ({d_prev:.3e} -> {d_last:.3e}); extrapolated bounded"),
        )
    } else {
        (
            Verdict::Violated,
            format!("still growing at the end of the grid ({d_prev:.3e} -> {d_last:.3e}); extrapolated unbounded"),
        )
    }
}

/// `liminf > 0` decided from the last two decades.
fn positive_liminf(values: &[(f64, f64)], floor: f64) -> (Verdict, String) {
    if let Some(x) = has_non_finite(values) {
        return (Verdict::Inconclusive, format!("overflow at x = {x}"));
    }
    let (d_prev, d_last, s_prev, s_last) = tail_signs(values);
    if s_prev * s_last < 0 {
        return (
            Verdict::Inconclusive,
            format!("trend changes sign over the last two decades ({d_prev:.3e}, {d_last:.3e})"),
        );
    }
    let tail = Tail::of(values);
    let m_prev = Tail::min(&tail.prev);
    let m_last = Tail::min(&tail.last);
    if m_last <= floor {
        return (
            Verdict::Violated,
            format!("tail minimum {m_last:.3e} does not exceed the floor {floor:.1e}"),
        );
    }
    if s_last < 0 && m_last < 0.5 * m_prev {
        return (
            Verdict::Violated,
            format!("decaying geometrically toward zero ({m_prev:.3e} -> {m_last:.3e}); extrapolated liminf 0"),
        );
    }
    (
        Verdict::Satisfied,
        format!("tail minimum {m_last:.3e} above floor {floor:.1e}"),
    )
}

/// `limsup_{x->inf} (rho x mu(x) + b(x)) / x < infinity` (the power family
/// uses `rho alpha x^(gamma+delta)` in place of `rho x mu(x)`).
pub fn lm_martingale_check(
    spec: &VolatilityModelSpec,
    grid: &[f64],
) -> Result<AsymptoticVerdict, AnalyzerError> {
    check_grid(grid)?;
    let values: Vec<(f64, f64)> = grid
        .iter()
        .map(|&x| (x, (spec.correlation_drift(x) + spec.b(x)) / x))
        .collect();
    let (verdict, note) = bounded_above(&values);
    Ok(AsymptoticVerdict {
        quantity: "limsup (rho*x*mu(x)+b(x))/x".into(),
        trend_values: values,
        verdict,
        extrapolation_note: note,
    })
}

fn phi_values(phi: &PhiFunction, grid: &[f64]) -> Result<Vec<f64>, AnalyzerError> {
    grid.iter()
        .map(|&x| {
            let y = phi.eval(x);
            if y > 0.0 {
                Ok(y)
            } else {
                Err(AnalyzerError::NonPositivePhi(x))
            }
        })
        .collect()
}

/// `liminf_{x->inf} (rho x mu + b + min(e1,e2) mu^2 - max(e1,e2) mu) / phi > 0`.
pub fn lm_strict_check(
    spec: &VolatilityModelSpec,
    phi: &PhiFunction,
    eps1: f64,
    eps2: f64,
    grid: &[f64],
) -> Result<AsymptoticVerdict, AnalyzerError> {
    lm_strict_check_with_floor(spec, phi, eps1, eps2, grid, DEFAULT_POSITIVE_FLOOR)
}

pub fn lm_strict_check_with_floor(
    spec: &VolatilityModelSpec,
    phi: &PhiFunction,
    eps1: f64,
    eps2: f64,
    grid: &[f64],
    floor: f64,
) -> Result<AsymptoticVerdict, AnalyzerError> {
    check_grid(grid)?;
    let phis = phi_values(phi, grid)?;
    let (lo, hi) = (eps1.min(eps2), eps1.max(eps2));
    let values: Vec<(f64, f64)> = grid
        .iter()
        .zip(&phis)
        .map(|(&x, &p)| {
            let m = spec.mu(x);
            (x, (spec.correlation_drift(x) + spec.b(x) + lo * m * m - hi * m) / p)
        })
        .collect();
    let (verdict, note) = positive_liminf(&values, floor);
    Ok(AsymptoticVerdict {
        quantity: "liminf (rho*x*mu+b+min(e1,e2)*mu^2-max(e1,e2)*mu)/phi".into(),
        trend_values: values,
        verdict,
        extrapolation_note: note,
    })
}

/// Martingale (`limsup`) and strict (`liminf`) verdicts for the power family.
pub fn power_family_condition_check(
    spec: &VolatilityModelSpec,
    phi: &PhiFunction,
    eps1: f64,
    eps2: f64,
    grid: &[f64],
) -> Result<(AsymptoticVerdict, AsymptoticVerdict), AnalyzerError> {
    let (alpha, gamma, delta) = match spec.family {
        ModelFamily::Power {
            alpha, gamma, delta, ..
        } => (alpha, gamma, delta),
        ModelFamily::Basic => return Err(AnalyzerError::NotPowerFamily),
    };
    if !(spec.rho > 0.0 && gamma + delta > 1.0) {
        return Err(AnalyzerError::PowerPrecondition {
            rho: spec.rho,
            exponent_sum: gamma + delta,
        });
    }
    check_grid(grid)?;
    let phis = phi_values(phi, grid)?;
    let lead = |x: f64| spec.rho * alpha * x.powf(gamma + delta);

    let mart: Vec<(f64, f64)> = grid.iter().map(|&x| (x, (lead(x) + spec.b(x)) / x)).collect();
    let (mv, mnote) = bounded_above(&mart);

    let (lo, hi) = (eps1.min(eps2), eps1.max(eps2));
    let strict: Vec<(f64, f64)> = grid
        .iter()
        .zip(&phis)
        .map(|(&x, &p)| {
            let xg = x.powf(gamma);
            (x, (lead(x) + spec.b(x) + lo * xg * xg - hi * xg) / p)
        })
        .collect();
    let (sv, snote) = positive_liminf(&strict, DEFAULT_POSITIVE_FLOOR);

    Ok((
        AsymptoticVerdict {
            quantity: "limsup (rho*alpha*x^(gamma+delta)+b(x))/x".into(),
            trend_values: mart,
            verdict: mv,
            extrapolation_note: mnote,
        },
        AsymptoticVerdict {
            quantity: "liminf (rho*alpha*x^(gamma+delta)+b+min(e1,e2)x^(2gamma)-max(e1,e2)x^gamma)/phi".into(),
            trend_values: strict,
            verdict: sv,
            extrapolation_note: snote,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum PhiIntegrability {
    Integrable { value: f64, error: f64 },
    Divergent { tail_exponent: f64 },
    Inconclusive { reason: String },
}

/// `int_a^inf 1/phi(x) dx`: adaptive quadrature on `[a, x_max]` plus a
/// power-law tail fitted on the last decade. Integrable iff the fitted tail
/// exponent exceeds one.
pub fn phi_integrability(phi: &PhiFunction) -> PhiIntegrability {
    phi_integrability_to(phi, DEFAULT_X_MAX)
}

pub fn phi_integrability_to(phi: &PhiFunction, x_max: f64) -> PhiIntegrability {
    let a = phi.a;
    if !(x_max > 100.0 * a) {
        return PhiIntegrability::Inconclusive {
            reason: format!("x_max = {x_max} must exceed 100 a"),
        };
    }
    let grid = geometric_grid(a, x_max, 50);
    if let Some(x) = phi.monotonicity_witness(&grid) {
        return PhiIntegrability::Inconclusive {
            reason: format!("phi is not positive and nondecreasing on the grid (x = {x})"),
        };
    }

    let p_last = (phi.eval(x_max) / phi.eval(x_max / 10.0)).log10();
    let p_prev = (phi.eval(x_max / 10.0) / phi.eval(x_max / 100.0)).log10();
    if !p_last.is_finite() {
        return PhiIntegrability::Inconclusive {
            reason: "tail exponent is not finite".into(),
        };
    }
    if p_last <= 1.0 + 1e-6 {
        return PhiIntegrability::Divergent {
            tail_exponent: p_last,
        };
    }

    // Substituting x = e^u keeps panels of one decade well conditioned.
    let (u0, u1) = (a.ln(), x_max.ln());
    let panels = ((u1 - u0) / std::f64::consts::LN_10).ceil().max(1.0) as usize;
    let width = (u1 - u0) / panels as f64;
    let mut value = 0.0;
    let mut error = 0.0;
    for i in 0..panels {
        let lo = u0 + width * i as f64;
        let hi = if i + 1 == panels { u1 } else { lo + width };
        let r = quadrature::integrate(|u| u.exp() / phi.eval(u.exp()), lo, hi, 1e-13, 1e-12, 200);
        value += r.value;
        error += r.error;
    }
    let tail = |p: f64| x_max / ((p - 1.0) * phi.eval(x_max));
    let tail_last = tail(p_last);
    if p_prev > 1.0 + 1e-6 {
        error += (tail(p_prev) - tail_last).abs();
    }
    PhiIntegrability::Integrable {
        value: value + tail_last,
        error,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Finite(f64),
    Infinite,
}

/// Open interval `(lower, upper)`; `Infinite` means `-inf` below and `+inf`
/// above.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    pub lower: Boundary,
    pub upper: Boundary,
}

impl StateSpace {
    /// `(0, inf)`, the natural domain of a volatility.
    pub fn positive_half_line() -> Self {
        StateSpace {
            lower: Boundary::Finite(0.0),
            upper: Boundary::Infinite,
        }
    }

    /// `(-inf, inf)`
    pub fn real_line() -> Self {
        StateSpace {
            lower: Boundary::Infinite,
            upper: Boundary::Infinite,
        }
    }

    fn bounds(&self) -> (f64, f64) {
        let lo = match self.lower {
            Boundary::Finite(x) => x,
            Boundary::Infinite => f64::NEG_INFINITY,
        };
        let hi = match self.upper {
            Boundary::Finite(x) => x,
            Boundary::Infinite => f64::INFINITY,
        };
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "limit", content = "value", rename_all = "snake_case")]
pub enum BoundaryValue {
    Finite(f64),
    Divergent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplosionClass {
    NoExplosion,
    PossibleExplosion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleFunctionResult {
    pub p_at_upper: BoundaryValue,
    pub p_at_lower: BoundaryValue,
    pub classification: ExplosionClass,
    pub quadrature_error_estimate: f64,
}

/// Feller scale-function test for `dv = mu(v) dW + b(v) dt`:
///
/// ```text
/// p(x) = int_c^x exp(-2 int_c^psi b(y)/mu(y)^2 dy) dpsi
/// ```
///
/// No explosion iff `p` diverges at both ends of the state space.
pub fn feller_scale_classify(
    spec: &VolatilityModelSpec,
    c: f64,
    space: StateSpace,
) -> Result<ScaleFunctionResult, AnalyzerError> {
    let (lo, hi) = space.bounds();
    if !(c > lo && c < hi) {
        return Err(AnalyzerError::BadInteriorPoint { c, lower: lo, upper: hi });
    }
    let scale = ScaleSide { spec, c };
    let (upper, e_up) = scale.limit(space.upper, 1.0)?;
    let (lower, e_lo) = scale.limit(space.lower, -1.0)?;
    let classification = if upper == BoundaryValue::Divergent && lower == BoundaryValue::Divergent {
        ExplosionClass::NoExplosion
    } else {
        ExplosionClass::PossibleExplosion
    };
    Ok(ScaleFunctionResult {
        p_at_upper: upper,
        p_at_lower: lower,
        classification,
        quadrature_error_estimate: e_up + e_lo,
    })
}

struct ScaleSide<'a> {
    spec: &'a VolatilityModelSpec,
    c: f64,
}

/// Log of the largest outer integrand we let through before clamping.
const LOG_INTEGRAND_CLAMP: f64 = 600.0;

impl ScaleSide<'_> {
    fn inner_integrand(&self, y: f64) -> f64 {
        let m = self.spec.mu(y);
        2.0 * self.spec.b(y) / (m * m)
    }

    fn inner(&self, from: f64, to: f64) -> f64 {
        quadrature::integrate(|y| self.inner_integrand(y), from, to, 1e-12, 1e-10, 400).value
    }

    /// Breakpoints from `c` toward the boundary in direction `dir`.
    fn breakpoints(&self, boundary: Boundary, dir: f64) -> Vec<f64> {
        match boundary {
            Boundary::Infinite => {
                let unit = self.c.abs().max(1.0);
                let mut pts = vec![self.c];
                let mut d = unit / 4.0;
                while d <= DEFAULT_X_MAX {
                    pts.push(self.c + dir * d);
                    d *= 2.0;
                }
                pts
            }
            Boundary::Finite(edge) => {
                let dist = (edge - self.c).abs();
                let mut pts = vec![self.c];
                for k in 1..=50 {
                    pts.push(edge - dir * dist * 0.5f64.powi(k));
                }
                pts
            }
        }
    }

    /// Locates a zero or sign change of `mu` between consecutive probe
    /// points, returning the singular abscissa.
    fn find_singularity(&self, pts: &[f64]) -> Option<f64> {
        let mut probe = Vec::with_capacity(pts.len() * 16);
        for w in pts.windows(2) {
            for j in 0..16 {
                probe.push(w[0] + (w[1] - w[0]) * j as f64 / 16.0);
            }
        }
        probe.push(pts[pts.len() - 1]);
        for w in probe.windows(2) {
            let (m0, m1) = (self.spec.mu(w[0]), self.spec.mu(w[1]));
            if m1 == 0.0 || !m1.is_finite() {
                return Some(w[1]);
            }
            if m0.signum() != m1.signum() {
                let (mut a, mut b) = (w[0], w[1]);
                for _ in 0..200 {
                    let mid = 0.5 * (a + b);
                    let mm = self.spec.mu(mid);
                    if mm == 0.0 {
                        return Some(mid);
                    }
                    if mm.signum() == m0.signum() {
                        a = mid;
                    } else {
                        b = mid;
                    }
                }
                return Some(0.5 * (a + b));
            }
        }
        None
    }

    fn limit(&self, boundary: Boundary, dir: f64) -> Result<(BoundaryValue, f64), AnalyzerError> {
        let pts = self.breakpoints(boundary, dir);
        if let Some(y) = self.find_singularity(&pts) {
            return Err(AnalyzerError::SingularPoint(y));
        }

        let mut inner_at = 0.0;
        let mut total = 0.0f64;
        let mut error = 0.0;
        let mut log_g = Vec::with_capacity(pts.len());
        log_g.push(0.0);
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let base = inner_at;
            let g = |psi: f64| (-(base + self.inner(a, psi))).min(LOG_INTEGRAND_CLAMP).exp();
            let r = quadrature::integrate(g, a, b, 1e-12, 1e-9, 200);
            total += r.value.abs();
            error += r.error;
            inner_at = base + self.inner(a, b);
            let lg = -inner_at;
            log_g.push(lg);
            if !total.is_finite() || lg >= LOG_INTEGRAND_CLAMP {
                return Ok((BoundaryValue::Divergent, error));
            }
            let n = log_g.len();
            if total > DIVERGENCE_CAP && log_g[n - 1] >= log_g[n - 2] {
                return Ok((BoundaryValue::Divergent, error));
            }
        }

        // Power-law tail of the outer integrand against distance from c
        // (infinite side) or from the edge (finite side).
        let n = pts.len();
        let g_ratio = log_g[n - 1] - log_g[n - 2];
        match boundary {
            Boundary::Infinite => {
                let d_ratio = ((pts[n - 1] - self.c).abs() / (pts[n - 2] - self.c).abs()).ln();
                let q = -g_ratio / d_ratio;
                if q <= 1.0 + 1e-6 {
                    return Ok((BoundaryValue::Divergent, error));
                }
                let d = (pts[n - 1] - self.c).abs();
                total += log_g[n - 1].exp() * d / (q - 1.0);
            }
            Boundary::Finite(edge) => {
                let (d1, d0) = ((pts[n - 1] - edge).abs(), (pts[n - 2] - edge).abs());
                let q = g_ratio / (d0 / d1).ln();
                if q >= 1.0 - 1e-6 {
                    return Ok((BoundaryValue::Divergent, error));
                }
                total += log_g[n - 1].exp() * d1 / (1.0 - q);
            }
        }
        if total > DIVERGENCE_CAP {
            return Ok((BoundaryValue::Divergent, error));
        }
        Ok((BoundaryValue::Finite(dir * total), error))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{make_power_family, CoefficientFunction, Term};

    fn lm_spec(rho: f64) -> VolatilityModelSpec {
        VolatilityModelSpec::basic(
            CoefficientFunction::power(1.0, 1.0),
            CoefficientFunction::polynomial(&[0.0, 1.0, -rho]),
            rho,
        )
        .unwrap()
    }

    fn phi_pow(p: f64) -> PhiFunction {
        PhiFunction::new(CoefficientFunction::power(1.0, p), 1.0).unwrap()
    }

    #[test]
    fn geometric_grid_endpoints() {
        let g = geometric_grid(1.0, 1e6, 10);
        assert_eq!(g.len(), 61);
        assert_eq!(g[0], 1.0);
        assert_eq!(g[60], 1e6);
        assert!((g[10] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn martingale_check_examples() {
        let v = lm_martingale_check(&lm_spec(0.5), &default_grid()).unwrap();
        assert_eq!(v.verdict, Verdict::Satisfied);
        for (_, q) in &v.trend_values {
            assert!((q - 1.0).abs() < 1e-9);
        }

        let zero =
            VolatilityModelSpec::basic(CoefficientFunction::power(1.0, 1.0), CoefficientFunction::zero(), 0.0).unwrap();
        let v = lm_martingale_check(&zero, &default_grid()).unwrap();
        assert_eq!(v.verdict, Verdict::Satisfied);
        assert!(v.trend_values.iter().all(|p| p.1 == 0.0));

        let quad =
            VolatilityModelSpec::basic(CoefficientFunction::power(1.0, 1.0), CoefficientFunction::power(1.0, 2.0), 0.5)
                .unwrap();
        let v = lm_martingale_check(&quad, &default_grid()).unwrap();
        assert_eq!(v.verdict, Verdict::Violated);
        let (x, q) = v.trend_values[40];
        assert!((q - 1.5 * x).abs() < 1e-9 * x);
    }

    #[test]
    fn short_grid_rejected() {
        let err = lm_martingale_check(&lm_spec(0.5), &geometric_grid(1.0, 1e4, 10)).unwrap_err();
        assert!(matches!(err, AnalyzerError::GridTooShort(_)));
    }

    #[test]
    fn log_drift_ratio_is_bounded() {
        // b(x)/x = ln(x)/x decreases on the tail
        let spec = VolatilityModelSpec::basic(
            CoefficientFunction::power(1.0, 1.0),
            CoefficientFunction::Terms(vec![Term::Log { coef: 1.0 }]),
            0.0,
        )
        .unwrap();
        let v = lm_martingale_check(&spec, &default_grid()).unwrap();
        assert_eq!(v.verdict, Verdict::Satisfied);
    }

    #[test]
    fn sign_disagreement_is_inconclusive() {
        // peaks one decade before the end of the grid
        let values: Vec<(f64, f64)> = default_grid()
            .into_iter()
            .map(|x| (x, -((x.log10() - 5.0).powi(2))))
            .collect();
        let (v, _) = bounded_above(&values);
        assert_eq!(v, Verdict::Inconclusive);
        let (v, _) = positive_liminf(&values, 1e-8);
        assert_eq!(v, Verdict::Inconclusive);
    }

    #[test]
    fn strict_check_examples() {
        let v = lm_strict_check(&lm_spec(0.5), &phi_pow(2.0), 0.1, 0.1, &default_grid()).unwrap();
        assert_eq!(v.verdict, Verdict::Satisfied);
        let last = v.trend_values.last().unwrap().1;
        assert!((last - 0.1).abs() < 1e-5);

        let zero =
            VolatilityModelSpec::basic(CoefficientFunction::power(1.0, 1.0), CoefficientFunction::zero(), 0.0).unwrap();
        let v = lm_strict_check(&zero, &phi_pow(2.0), 0.0, 0.0, &default_grid()).unwrap();
        assert_eq!(v.verdict, Verdict::Violated);

        let p = make_power_family(1.0, 1.0, 1.0, 1.0, CoefficientFunction::power(-0.5, 2.0), 0.5).unwrap();
        let v = lm_strict_check(&p, &phi_pow(1.5), 0.1, 0.1, &default_grid()).unwrap();
        assert_eq!(v.verdict, Verdict::Satisfied);
        for &(x, r) in &v.trend_values {
            let expected = (0.1 * x * x - 0.1 * x) / x.powf(1.5);
            assert!((r - expected).abs() <= 1e-9 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn strict_check_rejects_nonpositive_phi() {
        let phi = PhiFunction::new(CoefficientFunction::polynomial(&[-10.0, 1.0]), 1.0).unwrap();
        let err = lm_strict_check(&lm_spec(0.5), &phi, 0.1, 0.1, &default_grid()).unwrap_err();
        assert_eq!(err, AnalyzerError::NonPositivePhi(1.0));
    }

    #[test]
    fn decaying_ratio_is_violated() {
        // numerator 0.9 x over phi = x^2 decays like 1/x
        let spec =
            VolatilityModelSpec::basic(CoefficientFunction::power(1.0, 1.0), CoefficientFunction::power(1.0, 1.0), 0.0)
                .unwrap();
        let v = lm_strict_check(&spec, &phi_pow(2.0), 0.0, 0.0, &default_grid()).unwrap();
        assert_eq!(v.verdict, Verdict::Violated);
    }

    #[test]
    fn strict_verdict_monotone_in_min_eps() {
        let grid = default_grid();
        for rho in [0.25, 0.5, 0.9] {
            let spec = lm_spec(rho);
            let mut prev: Option<(Verdict, Vec<(f64, f64)>)> = None;
            for e in [0.0, 0.05, 0.1, 0.2, 0.4] {
                let v = lm_strict_check(&spec, &phi_pow(2.0), e, 0.4, &grid).unwrap();
                if let Some((pv, pvals)) = &prev {
                    assert!(!(*pv == Verdict::Satisfied && v.verdict == Verdict::Violated));
                    for (old, new) in pvals.iter().zip(&v.trend_values) {
                        let m = spec.mu(old.0);
                        if m * m >= m {
                            assert!(new.1 >= old.1 - 1e-12 * old.1.abs().max(1.0));
                        }
                    }
                }
                prev = Some((v.verdict, v.trend_values));
            }
        }
    }

    #[test]
    fn power_family_condition_examples() {
        let grid = default_grid();
        let p = make_power_family(1.0, 1.0, 1.0, 1.0, CoefficientFunction::polynomial(&[0.0, 1.0, -0.5]), 0.5).unwrap();
        let (m, s) = power_family_condition_check(&p, &phi_pow(2.0), 0.1, 0.1, &grid).unwrap();
        assert_eq!((m.verdict, s.verdict), (Verdict::Satisfied, Verdict::Satisfied));

        let low = make_power_family(1.0, 1.0, 0.4, 0.5, CoefficientFunction::zero(), 0.5).unwrap();
        let err = power_family_condition_check(&low, &phi_pow(2.0), 0.1, 0.1, &grid).unwrap_err();
        assert!(matches!(err, AnalyzerError::PowerPrecondition { .. }));

        let b = CoefficientFunction::Terms(vec![
            Term::ExpDecay { coef: 1.0, rate: 1.0 },
            Term::Power { coef: -0.5, exponent: 2.0 },
        ]);
        let p = make_power_family(1.0, 1.0, 1.0, 1.0, b, 0.5).unwrap();
        let (m, s) = power_family_condition_check(&p, &phi_pow(1.5), 0.1, 0.1, &grid).unwrap();
        assert_eq!((m.verdict, s.verdict), (Verdict::Satisfied, Verdict::Satisfied));

        assert_eq!(
            power_family_condition_check(&lm_spec(0.5), &phi_pow(2.0), 0.1, 0.1, &grid).unwrap_err(),
            AnalyzerError::NotPowerFamily
        );
    }

    #[test]
    fn phi_integrability_examples() {
        match phi_integrability(&phi_pow(2.0)) {
            PhiIntegrability::Integrable { value, error } => {
                assert!((value - 1.0).abs() < 1e-6, "{value}");
                assert!(error < 1e-6);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(phi_integrability(&phi_pow(1.0)), PhiIntegrability::Divergent { .. }));
        // int_1^inf x^{-3/2} dx = 2
        match phi_integrability(&phi_pow(1.5)) {
            PhiIntegrability::Integrable { value, .. } => assert!((value - 2.0).abs() < 1e-6, "{value}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn phi_integrability_family() {
        for eps in [0.1, 0.5, 1.0] {
            match phi_integrability(&phi_pow(1.0 + eps)) {
                PhiIntegrability::Integrable { value, .. } => {
                    assert!((value - 1.0 / eps).abs() < 1e-6 / eps, "eps {eps}: {value}")
                }
                other => panic!("eps {eps}: {other:?}"),
            }
        }
        assert!(matches!(phi_integrability(&phi_pow(1.0)), PhiIntegrability::Divergent { .. }));
    }

    #[test]
    fn phi_integrability_non_monotone_inconclusive() {
        let phi = PhiFunction::new(
            CoefficientFunction::Terms(vec![
                Term::Power { coef: 1.0, exponent: 2.0 },
                Term::Sin { coef: 1e3 },
            ]),
            1.0,
        )
        .unwrap();
        assert!(matches!(phi_integrability(&phi), PhiIntegrability::Inconclusive { .. }));
    }

    #[test]
    fn feller_lm_model_does_not_explode() {
        let r = feller_scale_classify(&lm_spec(0.5), 1.0, StateSpace::positive_half_line()).unwrap();
        assert_eq!(r.p_at_upper, BoundaryValue::Divergent);
        assert_eq!(r.p_at_lower, BoundaryValue::Divergent);
        assert_eq!(r.classification, ExplosionClass::NoExplosion);
    }

    #[test]
    fn feller_unit_diffusion_on_real_line() {
        let spec =
            VolatilityModelSpec::basic(CoefficientFunction::constant(1.0), CoefficientFunction::zero(), 0.0).unwrap();
        let r = feller_scale_classify(&spec, 0.0, StateSpace::real_line()).unwrap();
        assert_eq!(r.classification, ExplosionClass::NoExplosion);
    }

    #[test]
    fn feller_quadratic_diffusion_possible_explosion() {
        let spec =
            VolatilityModelSpec::basic(CoefficientFunction::power(1.0, 2.0), CoefficientFunction::zero(), 0.0).unwrap();
        let r = feller_scale_classify(&spec, 1.0, StateSpace::positive_half_line()).unwrap();
        assert_eq!(r.p_at_upper, BoundaryValue::Divergent);
        match r.p_at_lower {
            // p(x) = x - 1, so p(0+) = -1
            BoundaryValue::Finite(v) => assert!((v + 1.0).abs() < 1e-6, "{v}"),
            other => panic!("{other:?}"),
        }
        assert_eq!(r.classification, ExplosionClass::PossibleExplosion);
    }

    #[test]
    fn feller_real_line_with_vanishing_mu_names_singular_point() {
        let err = feller_scale_classify(&lm_spec(0.5), 1.0, StateSpace::real_line()).unwrap_err();
        match err {
            AnalyzerError::SingularPoint(y) => assert!(y.abs() < 1e-9, "{y}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn feller_power_drift_family() {
        for k in [1.0, 2.0, 3.0] {
            for rho in [0.25, 0.5, 0.9] {
                let spec = VolatilityModelSpec::basic(
                    CoefficientFunction::power(1.0, k),
                    CoefficientFunction::Terms(vec![
                        Term::Power { coef: 1.0, exponent: 1.0 },
                        Term::Power {
                            coef: -rho,
                            exponent: k + 1.0,
                        },
                    ]),
                    rho,
                )
                .unwrap();
                let r = feller_scale_classify(&spec, 1.0, StateSpace::positive_half_line()).unwrap();
                assert_eq!(r.classification, ExplosionClass::NoExplosion, "k {k} rho {rho}: {r:?}");
            }
        }
    }

    #[test]
    fn feller_rejects_exterior_point() {
        assert!(matches!(
            feller_scale_classify(&lm_spec(0.5), -1.0, StateSpace::positive_half_line()),
            Err(AnalyzerError::BadInteriorPoint { .. })
        ));
    }
}
