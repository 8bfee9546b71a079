//! Coefficient functions and model specifications for the stochastic
//! volatility systems.
//!
//! Two families are supported:
//!
//! ```text
//! basic:  dS = S v dB,            dv = mu(v) dW + b(v) dt
//! power:  dS = S^beta v^delta dB, dv = alpha v^gamma dW + b(v) dt
//! ```
//!
//! with `d[B, W] = rho dt`. Coefficients are sums of registered closed-form
//! terms or tabulated functions, so a spec can be serialized into an
//! experiment config and rebuilt bit-for-bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default upper end of the finite grid standing in for `x -> infinity`.
pub const DEFAULT_X_MAX: f64 = 1e6;

/// Growth factor between the last two decades above which a quantity is
/// treated as still growing.
const TAIL_GROWTH_FACTOR: f64 = 2.0;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum CoeffError {
    #[error("coefficient evaluation error: {name}({x}) = {value}")]
    NonFinite { name: String, x: f64, value: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid model parameter {field} = {value}: {reason}")]
    InvalidParameter {
        field: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("invalid tabulated function: {0}")]
    InvalidTable(String),
}

/// A single closed-form building block. Coefficients are sums of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Term {
    /// `coef * x^exponent`; `exponent = 0` is a constant.
    Power { coef: f64, exponent: f64 },
    /// `coef * ln(x)`
    Log { coef: f64 },
    /// `coef * sin(x)`
    Sin { coef: f64 },
    /// `coef * exp(-rate * x)`
    ExpDecay { coef: f64, rate: f64 },
    /// `coef * min(x, cap)`
    Capped { coef: f64, cap: f64 },
}

impl Term {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Term::Power { coef, exponent } => {
                if exponent == 0.0 {
                    coef
                } else if exponent == 1.0 {
                    coef * x
                } else if exponent == 2.0 {
                    coef * x * x
                } else {
                    coef * x.powf(exponent)
                }
            }
            Term::Log { coef } => coef * x.ln(),
            Term::Sin { coef } => coef * x.sin(),
            Term::ExpDecay { coef, rate } => coef * (-rate * x).exp(),
            Term::Capped { coef, cap } => coef * x.min(cap),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Term::Power { coef, exponent } => {
                if exponent == 0.0 {
                    0.0
                } else if exponent == 1.0 {
                    coef
                } else {
                    coef * exponent * x.powf(exponent - 1.0)
                }
            }
            Term::Log { coef } => coef / x,
            Term::Sin { coef } => coef * x.cos(),
            Term::ExpDecay { coef, rate } => -coef * rate * (-rate * x).exp(),
            Term::Capped { coef, cap } => {
                if x < cap {
                    coef
                } else {
                    0.0
                }
            }
        }
    }

    fn label(&self) -> String {
        match *self {
            Term::Power { coef, exponent } => format!("{coef}*x^{exponent}"),
            Term::Log { coef } => format!("{coef}*ln(x)"),
            Term::Sin { coef } => format!("{coef}*sin(x)"),
            Term::ExpDecay { coef, rate } => format!("{coef}*exp(-{rate}x)"),
            Term::Capped { coef, cap } => format!("{coef}*min(x,{cap})"),
        }
    }
}

/// A real function on `[0, X_MAX]`: either a sum of registered terms or a
/// piecewise-linear table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientFunction {
    Terms(Vec<Term>),
    Tabulated { xs: Vec<f64>, ys: Vec<f64> },
}

impl CoefficientFunction {
    pub fn zero() -> Self {
        CoefficientFunction::Terms(Vec::new())
    }

    pub fn constant(c: f64) -> Self {
        Self::power(c, 0.0)
    }

    /// `coef * x^exponent`
    pub fn power(coef: f64, exponent: f64) -> Self {
        CoefficientFunction::Terms(vec![Term::Power { coef, exponent }])
    }

    /// `sum_i coeffs[i] * x^i`
    pub fn polynomial(coeffs: &[f64]) -> Self {
        CoefficientFunction::Terms(
            coeffs
                .iter()
                .enumerate()
                .filter(|(_, c)| **c != 0.0)
                .map(|(i, &coef)| Term::Power {
                    coef,
                    exponent: i as f64,
                })
                .collect(),
        )
    }

    pub fn tabulated(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self, CoeffError> {
        if xs.len() < 2 || xs.len() != ys.len() {
            return Err(CoeffError::InvalidTable(format!(
                "need at least two (x, y) pairs of equal length, got {} and {}",
                xs.len(),
                ys.len()
            )));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoeffError::InvalidTable(
                "abscissae must be strictly increasing".into(),
            ));
        }
        Ok(CoefficientFunction::Tabulated { xs, ys })
    }

    /// Appends a term. Tables are returned unchanged.
    pub fn plus(self, term: Term) -> Self {
        match self {
            CoefficientFunction::Terms(mut t) => {
                t.push(term);
                CoefficientFunction::Terms(t)
            }
            table => table,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            CoefficientFunction::Terms(terms) => terms.iter().map(|t| t.eval(x)).sum(),
            CoefficientFunction::Tabulated { xs, ys } => interpolate(xs, ys, x),
        }
    }

    /// Analytic derivative, when one is registered. Tables have none.
    pub fn derivative(&self, x: f64) -> Option<f64> {
        match self {
            CoefficientFunction::Terms(terms) => Some(terms.iter().map(|t| t.derivative(x)).sum()),
            CoefficientFunction::Tabulated { .. } => None,
        }
    }

    pub fn has_derivative(&self) -> bool {
        matches!(self, CoefficientFunction::Terms(_))
    }

    pub fn is_identically_zero(&self) -> bool {
        match self {
            CoefficientFunction::Terms(terms) => terms.iter().all(|t| match *t {
                Term::Power { coef, .. }
                | Term::Log { coef }
                | Term::Sin { coef }
                | Term::ExpDecay { coef, .. }
                | Term::Capped { coef, .. } => coef == 0.0,
            }),
            CoefficientFunction::Tabulated { ys, .. } => ys.iter().all(|y| *y == 0.0),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            CoefficientFunction::Terms(terms) if terms.is_empty() => "0".into(),
            CoefficientFunction::Terms(terms) => terms
                .iter()
                .map(Term::label)
                .collect::<Vec<_>>()
                .join(" + "),
            CoefficientFunction::Tabulated { xs, .. } => format!("table[{} points]", xs.len()),
        }
    }

    fn eval_checked(&self, name: &str, x: f64) -> Result<f64, CoeffError> {
        let value = self.eval(x);
        if value.is_finite() {
            Ok(value)
        } else {
            Err(CoeffError::NonFinite {
                name: name.to_string(),
                x,
                value,
            })
        }
    }
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let hi = xs.partition_point(|&p| p <= x);
    let lo = hi - 1;
    let w = (x - xs[lo]) / (xs[hi] - xs[lo]);
    ys[lo] + w * (ys[hi] - ys[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelFamily {
    Basic,
    Power {
        alpha: f64,
        beta: f64,
        gamma: f64,
        delta: f64,
    },
}

/// Coefficients, correlation and initial state of an `(S, v)` system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolatilityModelSpec {
    pub mu: CoefficientFunction,
    pub b: CoefficientFunction,
    pub rho: f64,
    pub family: ModelFamily,
    pub s0: f64,
    pub v0: f64,
    pub horizon: f64,
}

impl VolatilityModelSpec {
    /// Basic family with `S0 = v0 = 1` and horizon 1.
    pub fn basic(mu: CoefficientFunction, b: CoefficientFunction, rho: f64) -> Result<Self, CoeffError> {
        let spec = VolatilityModelSpec {
            mu,
            b,
            rho,
            family: ModelFamily::Basic,
            s0: 1.0,
            v0: 1.0,
            horizon: 1.0,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn with_initial(mut self, s0: f64, v0: f64) -> Result<Self, CoeffError> {
        self.s0 = s0;
        self.v0 = v0;
        self.check()?;
        Ok(self)
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self, CoeffError> {
        self.horizon = horizon;
        self.check()?;
        Ok(self)
    }

    /// Re-checks the structural invariants (positivity of the initial
    /// state and horizon, `rho` in `[-1, 1]`, positive power exponents).
    pub fn check(&self) -> Result<(), CoeffError> {
        positive("s0", self.s0)?;
        positive("v0", self.v0)?;
        positive("horizon", self.horizon)?;
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(CoeffError::InvalidParameter {
                field: "rho",
                value: self.rho,
                reason: "must lie in [-1, 1]",
            });
        }
        if let ModelFamily::Power {
            alpha,
            beta,
            gamma,
            delta,
        } = self.family
        {
            positive("alpha", alpha)?;
            positive("beta", beta)?;
            positive("gamma", gamma)?;
            positive("delta", delta)?;
        }
        Ok(())
    }

    pub fn mu(&self, x: f64) -> f64 {
        self.mu.eval(x)
    }

    pub fn b(&self, x: f64) -> f64 {
        self.b.eval(x)
    }

    /// Volatility scale `alpha` of the diffusion `alpha v^gamma` (1 for the
    /// basic family).
    pub fn vol_scale(&self) -> f64 {
        match self.family {
            ModelFamily::Basic => 1.0,
            ModelFamily::Power { alpha, .. } => alpha,
        }
    }

    /// Diffusion coefficient of `S`: `S v` or `S^beta v^delta`.
    pub fn s_diffusion(&self, s: f64, v: f64) -> f64 {
        s * self.s_log_vol(s, v)
    }

    /// Diffusion of `ln S`, i.e. `s_diffusion / S`.
    pub fn s_log_vol(&self, s: f64, v: f64) -> f64 {
        match self.family {
            ModelFamily::Basic => v,
            ModelFamily::Power { beta, delta, .. } => {
                let sp = if beta == 1.0 { 1.0 } else { s.powf(beta - 1.0) };
                let vp = if delta == 1.0 { v } else { v.powf(delta) };
                sp * vp
            }
        }
    }

    /// The correlation term `rho x mu(x)` (basic) or `rho alpha x^(gamma+delta)`
    /// (power) appearing in the asymptotic martingale conditions.
    pub fn correlation_drift(&self, x: f64) -> f64 {
        match self.family {
            ModelFamily::Basic => self.rho * x * self.mu(x),
            ModelFamily::Power {
                alpha,
                gamma,
                delta,
                ..
            } => self.rho * alpha * x.powf(gamma + delta),
        }
    }
}

fn positive(field: &'static str, value: f64) -> Result<(), CoeffError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(CoeffError::InvalidParameter {
            field,
            value,
            reason: "must be positive and finite",
        })
    }
}

/// Builds the power family `dS = S^beta v^delta dB`, `dv = alpha v^gamma dW + b dt`.
pub fn make_power_family(
    alpha: f64,
    beta: f64,
    gamma: f64,
    delta: f64,
    b: CoefficientFunction,
    rho: f64,
) -> Result<VolatilityModelSpec, CoeffError> {
    let spec = VolatilityModelSpec {
        mu: CoefficientFunction::power(alpha, gamma),
        b,
        rho,
        family: ModelFamily::Power {
            alpha,
            beta,
            gamma,
            delta,
        },
        s0: 1.0,
        v0: 1.0,
        horizon: 1.0,
    };
    spec.check()?;
    Ok(spec)
}

/// Increasing positive weight `phi` with a lower integration limit `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiFunction {
    pub form: CoefficientFunction,
    pub a: f64,
}

impl PhiFunction {
    pub fn new(form: CoefficientFunction, a: f64) -> Result<Self, CoeffError> {
        positive("a", a)?;
        Ok(PhiFunction { form, a })
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.form.eval(x)
    }

    /// First grid point (at or above `a`) where `phi` is nonpositive or
    /// decreases, if any.
    pub fn monotonicity_witness(&self, grid: &[f64]) -> Option<f64> {
        let mut prev: Option<f64> = None;
        for &x in grid.iter().filter(|&&x| x >= self.a) {
            let y = self.eval(x);
            if !(y > 0.0) || !y.is_finite() {
                return Some(x);
            }
            if let Some(p) = prev {
                if y < p {
                    return Some(x);
                }
            }
            prev = Some(y);
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub assumption: String,
    pub passed: bool,
    /// Grid point witnessing a failure.
    pub witness: Option<f64>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
    /// Smallest `C >= 1` with `b(x) <= C (1 + x)` on the grid.
    pub growth_constant: f64,
    /// Largest finite-difference slope of `mu` on the grid (an estimate).
    pub lipschitz_estimate: f64,
    /// Raised when the slope of `mu` is still growing at the end of the grid.
    pub lipschitz_flag: bool,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, assumption: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.assumption == assumption)
    }
}

/// Checks the standing coefficient assumptions on a finite grid:
/// `mu(0) = 0`, `b(0) >= 0`, `mu > 0` on `x > 0`, linear growth of `b`, and a
/// grid-based Lipschitz estimate for `mu`.
pub fn validate_coefficients(
    spec: &VolatilityModelSpec,
    grid: &[f64],
    x_max: f64,
) -> Result<ValidationReport, CoeffError> {
    if grid.is_empty() {
        return Err(CoeffError::InvalidGrid("grid is empty".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CoeffError::InvalidGrid("grid must be strictly increasing".into()));
    }
    if grid[0] < 0.0 || grid[grid.len() - 1] > x_max {
        return Err(CoeffError::InvalidGrid(format!(
            "grid must lie inside [0, {x_max}]"
        )));
    }

    let mu_vals = grid
        .iter()
        .map(|&x| spec.mu.eval_checked("mu", x))
        .collect::<Result<Vec<_>, _>>()?;
    let b_vals = grid
        .iter()
        .map(|&x| spec.b.eval_checked("b", x))
        .collect::<Result<Vec<_>, _>>()?;
    let mu0 = spec.mu.eval_checked("mu", 0.0)?;
    let b0 = spec.b.eval_checked("b", 0.0)?;

    let mut checks = Vec::with_capacity(5);
    checks.push(AssumptionCheck {
        assumption: "mu(0)=0".into(),
        passed: mu0.abs() <= 1e-12,
        witness: (mu0.abs() > 1e-12).then_some(0.0),
        note: format!("mu(0) = {mu0}"),
    });
    checks.push(AssumptionCheck {
        assumption: "b(0)>=0".into(),
        passed: b0 >= 0.0,
        witness: (b0 < 0.0).then_some(0.0),
        note: format!("b(0) = {b0}"),
    });

    let mu_witness = grid
        .iter()
        .zip(&mu_vals)
        .find(|(x, m)| **x > 0.0 && **m <= 0.0)
        .map(|(x, _)| *x);
    checks.push(AssumptionCheck {
        assumption: "mu>0 on x>0".into(),
        passed: mu_witness.is_none(),
        witness: mu_witness,
        note: String::new(),
    });

    let ratios: Vec<(f64, f64)> = grid
        .iter()
        .zip(&b_vals)
        .map(|(&x, &b)| (x, b.max(0.0) / (1.0 + x)))
        .collect();
    let growth_constant = ratios.iter().map(|r| r.1).fold(1.0, f64::max);
    let growth_witness = still_growing(&ratios);
    checks.push(AssumptionCheck {
        assumption: "b(x)<=C(1+x)".into(),
        passed: growth_witness.is_none(),
        witness: growth_witness,
        note: format!("fitted C = {growth_constant}"),
    });

    let slopes: Vec<(f64, f64)> = grid
        .windows(2)
        .zip(mu_vals.windows(2))
        .map(|(x, m)| (x[1], ((m[1] - m[0]) / (x[1] - x[0])).abs()))
        .collect();
    let lipschitz_estimate = slopes.iter().map(|s| s.1).fold(0.0, f64::max);
    let lip_witness = still_growing(&slopes);
    checks.push(AssumptionCheck {
        assumption: "mu Lipschitz (estimate)".into(),
        passed: lip_witness.is_none(),
        witness: lip_witness,
        note: format!("max grid slope = {lipschitz_estimate} (estimate)"),
    });

    Ok(ValidationReport {
        checks,
        growth_constant,
        lipschitz_estimate,
        lipschitz_flag: lip_witness.is_some(),
    })
}

/// Compares the maximum of `values` over the last decade of the grid with
/// the preceding decade (or the first half when the grid spans less than
/// two decades). Returns the witnessing abscissa when the tail is still
/// growing by more than `TAIL_GROWTH_FACTOR`.
fn still_growing(values: &[(f64, f64)]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let x_end = values[values.len() - 1].0;
    let (head, tail): (Vec<_>, Vec<_>) = if x_end / 100.0 >= values[0].0 && x_end > 0.0 {
        let head = values
            .iter()
            .filter(|(x, _)| *x >= x_end / 100.0 && *x < x_end / 10.0)
            .collect();
        let tail = values.iter().filter(|(x, _)| *x >= x_end / 10.0).collect();
        (head, tail)
    } else {
        let mid = values.len() / 2;
        (values[..mid].iter().collect(), values[mid..].iter().collect())
    };
    let head_max = head.iter().map(|p| p.1).fold(0.0, f64::max);
    let (tail_x, tail_max) = tail
        .iter()
        .fold((x_end, 0.0f64), |acc, p| if p.1 > acc.1 { (p.0, p.1) } else { acc });
    if head.is_empty() || tail.is_empty() {
        return None;
    }
    let scale = head_max.max(1e-300);
    (tail_max > TAIL_GROWTH_FACTOR * scale && tail_max > 1e-12).then_some(tail_x)
}

/// `{0, 1, ..., n}`
pub fn integer_grid(n: usize) -> Vec<f64> {
    (0..=n).map(|i| i as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lm_b(rho: f64) -> CoefficientFunction {
        CoefficientFunction::polynomial(&[0.0, 1.0, -rho])
    }

    #[test]
    fn lm_coefficients_pass_all_assumptions() {
        let spec = VolatilityModelSpec::basic(CoefficientFunction::power(1.0, 1.0), lm_b(0.5), 0.5).unwrap();
        let report = validate_coefficients(&spec, &integer_grid(100), DEFAULT_X_MAX).unwrap();
        assert!(report.all_passed(), "{report:?}");
        assert!(report.growth_constant >= 1.0);
        assert!(!report.lipschitz_flag);
    }

    #[test]
    fn zero_drift_satisfies_b0_nonnegative() {
        let spec =
            VolatilityModelSpec::basic(CoefficientFunction::power(1.0, 1.0), CoefficientFunction::zero(), 0.0).unwrap();
        let report = validate_coefficients(&spec, &integer_grid(100), DEFAULT_X_MAX).unwrap();
        assert!(report.all_passed());
        assert!(report.check("b(0)>=0").unwrap().passed);
    }

    #[test]
    fn quadratic_mu_raises_lipschitz_flag_only() {
        let spec =
            VolatilityModelSpec::basic(CoefficientFunction::power(1.0, 2.0), CoefficientFunction::power(1.0, 1.0), 0.0)
                .unwrap();
        let report = validate_coefficients(&spec, &integer_grid(100), DEFAULT_X_MAX).unwrap();
        assert!(report.check("b(x)<=C(1+x)").unwrap().passed);
        assert!(report.lipschitz_flag);
        let lip = report.check("mu Lipschitz (estimate)").unwrap();
        assert!(!lip.passed);
        assert!(lip.witness.unwrap() >= 10.0);
        // largest consecutive slope of x^2 on {0..100} is 99 + 100
        assert_eq!(report.lipschitz_estimate, 199.0);
    }

    #[test]
    fn superlinear_drift_fails_growth() {
        let spec =
            VolatilityModelSpec::basic(CoefficientFunction::power(1.0, 1.0), CoefficientFunction::power(1.0, 2.0), 0.0)
                .unwrap();
        let report = validate_coefficients(&spec, &integer_grid(100), DEFAULT_X_MAX).unwrap();
        assert!(!report.check("b(x)<=C(1+x)").unwrap().passed);
    }

    #[test]
    fn failing_witnesses_are_reported() {
        let spec = VolatilityModelSpec::basic(
            CoefficientFunction::polynomial(&[0.5, -1.0]),
            CoefficientFunction::constant(-1.0),
            0.0,
        )
        .unwrap();
        let report = validate_coefficients(&spec, &integer_grid(10), DEFAULT_X_MAX).unwrap();
        assert_eq!(report.check("mu(0)=0").unwrap().witness, Some(0.0));
        assert_eq!(report.check("b(0)>=0").unwrap().witness, Some(0.0));
        assert_eq!(report.check("mu>0 on x>0").unwrap().witness, Some(1.0));
    }

    #[test]
    fn non_finite_evaluation_is_an_error_with_location() {
        let b = CoefficientFunction::Terms(vec![Term::Log { coef: 1.0 }]);
        let spec = VolatilityModelSpec::basic(CoefficientFunction::power(1.0, 1.0), b, 0.5).unwrap();
        let err = validate_coefficients(&spec, &integer_grid(5), DEFAULT_X_MAX).unwrap_err();
        assert_eq!(
            err,
            CoeffError::NonFinite {
                name: "b".into(),
                x: 0.0,
                value: f64::NEG_INFINITY
            }
        );
    }

    #[test]
    fn grid_preconditions() {
        let spec = VolatilityModelSpec::basic(CoefficientFunction::power(1.0, 1.0), lm_b(0.5), 0.5).unwrap();
        assert!(validate_coefficients(&spec, &[], DEFAULT_X_MAX).is_err());
        assert!(validate_coefficients(&spec, &[2.0, 1.0], DEFAULT_X_MAX).is_err());
        assert!(validate_coefficients(&spec, &[1.0, 2e6], DEFAULT_X_MAX).is_err());
    }

    #[test]
    fn power_family_with_unit_exponents_matches_basic() {
        let p = make_power_family(1.0, 1.0, 1.0, 1.0, lm_b(0.5), 0.5).unwrap();
        let basic = VolatilityModelSpec::basic(CoefficientFunction::power(1.0, 1.0), lm_b(0.5), 0.5).unwrap();
        for &x in &[0.0, 0.3, 1.0, 7.5, 123.0] {
            assert_eq!(p.mu(x), basic.mu(x));
            assert_eq!(p.b(x), basic.b(x));
            assert_eq!(p.correlation_drift(x), basic.correlation_drift(x));
            for &s in &[0.5, 1.0, 2.0] {
                assert_eq!(p.s_diffusion(s, x), basic.s_diffusion(s, x));
            }
        }
    }

    #[test]
    fn power_family_exponent_sum_and_rejections() {
        let p = make_power_family(1.0, 2.0, 1.0, 1.0, CoefficientFunction::zero(), 0.5).unwrap();
        match p.family {
            ModelFamily::Power { gamma, delta, .. } => assert!(gamma + delta > 1.0),
            _ => unreachable!(),
        }
        assert!(make_power_family(0.0, 1.0, 1.0, 1.0, CoefficientFunction::zero(), 0.5).is_err());
        assert!(make_power_family(1.0, 1.0, -1.0, 1.0, CoefficientFunction::zero(), 0.5).is_err());
        assert!(make_power_family(1.0, 1.0, 1.0, 0.0, CoefficientFunction::zero(), 0.5).is_err());
    }

    #[test]
    fn power_family_accepts_log_remark_drift() {
        let (alpha, gamma, delta, rho) = (2.0, 1.5, 1.0, 0.5);
        let b = CoefficientFunction::Terms(vec![
            Term::Log { coef: 1.0 },
            Term::Power {
                coef: -rho * alpha,
                exponent: gamma + delta,
            },
        ]);
        let p = make_power_family(alpha, 1.0, gamma, delta, b, rho).unwrap();
        let x: f64 = 3.0;
        let expected = x.ln() - rho * alpha * x.powf(gamma + delta);
        assert!((p.b(x) - expected).abs() < 1e-12);
        assert!((p.mu(x) - alpha * x.powf(gamma)).abs() < 1e-12);
    }

    #[test]
    fn spec_invariants() {
        let mu = CoefficientFunction::power(1.0, 1.0);
        let spec = VolatilityModelSpec::basic(mu.clone(), CoefficientFunction::zero(), 0.5).unwrap();
        assert!(spec.clone().with_initial(0.0, 1.0).is_err());
        assert!(spec.clone().with_initial(1.0, -1.0).is_err());
        assert!(spec.clone().with_horizon(0.0).is_err());
        assert!(VolatilityModelSpec::basic(mu, CoefficientFunction::zero(), 1.5).is_err());
    }

    #[test]
    fn tabulated_interpolates_and_has_no_derivative() {
        let f = CoefficientFunction::tabulated(vec![0.0, 1.0, 3.0], vec![0.0, 2.0, 4.0]).unwrap();
        assert_eq!(f.eval(0.5), 1.0);
        assert_eq!(f.eval(2.0), 3.0);
        assert_eq!(f.eval(10.0), 4.0);
        assert!(f.derivative(1.0).is_none());
        assert!(CoefficientFunction::tabulated(vec![1.0, 0.0], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn phi_monotonicity() {
        let phi = PhiFunction::new(CoefficientFunction::power(1.0, 2.0), 1.0).unwrap();
        assert_eq!(phi.monotonicity_witness(&integer_grid(50)), None);
        let wobbly = PhiFunction::new(
            CoefficientFunction::Terms(vec![
                Term::Power { coef: 1.0, exponent: 1.0 },
                Term::Sin { coef: 5.0 },
            ]),
            1.0,
        )
        .unwrap();
        assert!(wobbly.monotonicity_witness(&integer_grid(50)).is_some());
    }

    #[test]
    fn serde_round_trip() {
        let b = CoefficientFunction::Terms(vec![
            Term::ExpDecay { coef: 1.0, rate: 1.0 },
            Term::Power { coef: -0.5, exponent: 2.0 },
        ]);
        let spec = make_power_family(1.0, 1.0, 1.0, 1.0, b, 0.5).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        let back: VolatilityModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }

    proptest! {
        #[test]
        fn registered_terms_match_closed_forms(
            x in 0.01f64..1e3,
            k in 0.1f64..5.0,
            a in 0.1f64..3.0,
            p in 0.1f64..3.0,
            rho in 0.0f64..1.0,
        ) {
            let cases: Vec<(CoefficientFunction, f64)> = vec![
                (CoefficientFunction::polynomial(&[0.0, 1.0, -rho]), x - rho * x * x),
                (CoefficientFunction::Terms(vec![Term::Log { coef: k }, Term::Power { coef: -rho * a, exponent: p }]),
                    k * x.ln() - rho * a * x.powf(p)),
                (CoefficientFunction::Terms(vec![Term::Sin { coef: k }, Term::Power { coef: -rho * a, exponent: p }]),
                    k * x.sin() - rho * a * x.powf(p)),
                (CoefficientFunction::Terms(vec![Term::ExpDecay { coef: k, rate: a }, Term::Power { coef: -rho * a, exponent: p }]),
                    k * (-a * x).exp() - rho * a * x.powf(p)),
                (CoefficientFunction::Terms(vec![Term::Capped { coef: k, cap: a }]), k * x.min(a)),
                (CoefficientFunction::power(a, p), a * x.powf(p)),
            ];
            for (f, expected) in cases {
                let got = f.eval(x);
                let scale = expected.abs().max(1e-300);
                prop_assert!(((got - expected) / scale).abs() <= 1e-12 || (got - expected).abs() <= 1e-12,
                    "{} at {x}: {got} vs {expected}", f.describe());
            }
        }

        #[test]
        fn remark_families_validate(
            k in 0.1f64..5.0,
            a in 0.1f64..3.0,
            m in 0.0f64..=1.0,
            rho in 0.1f64..0.9,
            alpha in 0.5f64..2.0,
            delta in 0.5f64..2.0,
            family in 0usize..3,
        ) {
            // gamma = 1 keeps mu = alpha x Lipschitz on the grid
            let gamma = 1.0;
            let decay = Term::Power { coef: -rho * alpha, exponent: gamma + delta };
            let head = match family {
                0 => Term::ExpDecay { coef: k, rate: a },
                1 => Term::Power { coef: k, exponent: m },
                _ => Term::Sin { coef: k },
            };
            let b = CoefficientFunction::Terms(vec![head, decay]);
            let spec = make_power_family(alpha, 1.0, gamma, delta, b, rho).unwrap();
            let grid: Vec<f64> = (0..=60).map(|i| if i == 0 { 0.0 } else { 10f64.powf(i as f64 / 10.0) }).collect();
            let report = validate_coefficients(&spec, &grid, DEFAULT_X_MAX).unwrap();
            prop_assert!(report.all_passed(), "{:?}", report);
        }
    }
}
