//! Experiment configs and the runner behind the command-line tool.
//!
//! A config names one experiment, a model from `[models.*]`, optionally an
//! enlargement from `[enlargements.*]`, and the numerics. Reports are
//! plain JSON values so that identical configs give identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::analyzer::{
    default_grid, feller_scale_classify, lm_martingale_check, lm_strict_check, phi_integrability, power_family_condition_check,
    StateSpace, Verdict,
};
use crate::coeffs::{validate_coefficients, CoefficientFunction, ModelFamily, PhiFunction, VolatilityModelSpec, DEFAULT_X_MAX};
use crate::engine::{
    effective_scheme, simulate_path, simulate_scalar_sde, simulate_scalar_summary, simulate_summary, write_path_csv,
    write_repro_log, DriftOverlay, ExplosionBarrier, Measure, NoOverlay, NoiseMode, Scheme, SimConfig, StopReason,
    StoppedPathBundle, TimeGrid, PATH_CSV_HEADER,
};
use crate::enlargement::{
    validate_measure_change, AllocationRule, EnlargedDynamics, EnlargementKind, EnlargementSpec, GirsanovAllocation,
    DEFAULT_TRUNCATION_THRESHOLD,
};
use crate::jumps::{jump_positivity_check, moment_condition_estimate, simulate_jump_path, simulate_jump_summary, JumpDriver, JumpModelSpec};
use crate::montecarlo::{run_sharded, Accumulator, MeanAccumulator, DEFAULT_SHARD_SIZE};
use crate::stats::{
    comparison_harness, enlarged_comparison, estimate_defect, estimate_scalar_defect, explosion_probability,
    model_decomposition, scalar_decomposition, ComparisonReport, ComparisonSetup, DefectReport, DefectVerdict,
    DEFAULT_TRUNCATION_SCHEDULE,
};

/// Environment variable consulted when neither `--out` nor `[output] dir`
/// is given.
pub const OUT_ENV: &str = "SLM_FORGE_OUT";
pub const DEFAULT_OUT_DIR: &str = "slm-forge-out";

/// A failure reported as one line naming the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub field: String,
    pub message: String,
}

impl CliError {
    pub fn new(field: impl Into<String>, message: impl ToString) -> Self {
        CliError {
            field: field.into(),
            message: message.to_string().replace('\n', " "),
        }
    }

    /// `{"error":{"field":...,"message":...}}` on a single line.
    pub fn to_line(&self) -> String {
        json!({"error": {"field": self.field, "message": self.message}}).to_string()
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Analyze,
    Feller,
    Simulate,
    Defect,
    Compare,
    Jumps,
    ValidateQ,
}

/// A coefficient given either as polynomial coefficients `[c0, c1, ...]`
/// or as a full coefficient function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoeffInput {
    Polynomial(Vec<f64>),
    Function(CoefficientFunction),
}

impl CoeffInput {
    fn build(&self) -> CoefficientFunction {
        match self {
            CoeffInput::Polynomial(c) => CoefficientFunction::polynomial(c),
            CoeffInput::Function(f) => f.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiEntry {
    pub form: CoeffInput,
    pub a: f64,
}

/// `[models.NAME]`. Either an `(S, v)` model (`mu`, `b`, optional `power`)
/// or a scalar `dX = X sigma(X) dB` (`sigma`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    #[serde(default)]
    pub mu: Option<CoeffInput>,
    #[serde(default)]
    pub b: Option<CoeffInput>,
    #[serde(default)]
    pub sigma: Option<CoeffInput>,
    #[serde(default)]
    pub power: Option<PowerParams>,
    #[serde(default)]
    pub rho: f64,
    #[serde(default = "one")]
    pub s0: f64,
    #[serde(default = "one")]
    pub v0: f64,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default)]
    pub phi: Option<PhiEntry>,
}

/// `[enlargements.NAME]`. The `kind` tag and its parameters sit beside
/// the optional fields, which rules out rejecting unknown keys here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnlargementEntry {
    #[serde(flatten)]
    pub kind: EnlargementKind,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub delta_guard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpEntry {
    pub intensity: f64,
    pub sizes: Vec<f64>,
    pub probs: Vec<f64>,
    #[serde(default)]
    pub continuous_vol: f64,
    #[serde(default = "one")]
    pub alpha_exp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareEntry {
    #[serde(default)]
    pub x0: Option<f64>,
    #[serde(default)]
    pub y0: Option<f64>,
    /// `drift_hi = b + drift_gap`, `drift_lo = b`.
    #[serde(default)]
    pub drift_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSpaceChoice {
    Positive,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    /// Mandatory unless given on the command line.
    #[serde(default)]
    pub seed: Option<i64>,
    #[serde(default = "default_paths")]
    pub n_paths: i64,
    /// Steps on `[0, t_eval]`; the defect is also run at twice this.
    #[serde(default = "default_steps")]
    pub steps: i64,
    #[serde(default)]
    pub t_eval: Option<f64>,
    #[serde(default)]
    pub barrier: Option<Vec<f64>>,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default = "default_noise")]
    pub noise: NoiseMode,
    #[serde(default = "default_measure")]
    pub measure: Measure,
    #[serde(default = "default_eps1")]
    pub eps1: f64,
    #[serde(default = "one")]
    pub eps2: f64,
    #[serde(default)]
    pub delta_guard: Option<f64>,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default = "default_allocation")]
    pub allocation: AllocationRule,
    /// Adds the decomposition and explosion probabilities to a defect run.
    #[serde(default)]
    pub diagnostics: bool,
    #[serde(default = "one")]
    pub feller_c: f64,
    #[serde(default = "default_space")]
    pub state_space: StateSpaceChoice,
    #[serde(default = "default_exponents")]
    pub exponents: Vec<u32>,
    #[serde(default = "default_dump_limit")]
    pub dump_limit: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: None,
            formats: default_formats(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub model: String,
    #[serde(default)]
    pub enlargement: Option<String>,
    #[serde(default)]
    pub models: BTreeMap<String, ModelEntry>,
    #[serde(default)]
    pub enlargements: BTreeMap<String, EnlargementEntry>,
    pub numerics: Numerics,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub jumps: Option<JumpEntry>,
    #[serde(default)]
    pub compare: Option<CompareEntry>,
}

fn one() -> f64 {
    1.0
}
fn default_paths() -> i64 {
    10_000
}
fn default_steps() -> i64 {
    256
}
fn default_scheme() -> Scheme {
    Scheme::Euler
}
fn default_noise() -> NoiseMode {
    NoiseMode::Random
}
fn default_measure() -> Measure {
    Measure::Original
}
fn default_eps1() -> f64 {
    0.05
}
fn default_confidence() -> f64 {
    0.95
}
fn default_allocation() -> AllocationRule {
    AllocationRule::JZero
}
fn default_space() -> StateSpaceChoice {
    StateSpaceChoice::Positive
}
fn default_exponents() -> Vec<u32> {
    vec![6, 8, 10]
}
fn default_dump_limit() -> i64 {
    16
}
fn default_formats() -> Vec<String> {
    vec!["json".into(), "csv".into()]
}

impl ExperimentConfig {
    /// Parses JSON when the path ends in `.json`, TOML otherwise.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::new("config", e.message()))
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::new("config", e))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).into()
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub threads: usize,
    pub strict: bool,
    pub dump_paths: bool,
    pub out: Option<PathBuf>,
}

/// A finished experiment before it is written out.
#[derive(Debug, Clone)]
pub struct Report {
    pub experiment: Experiment,
    pub json: Value,
    pub csv: Option<(String, Vec<String>)>,
    pub inconclusive: bool,
    pub dumps: Vec<StoppedPathBundle>,
}

enum ModelKind {
    Sv(VolatilityModelSpec),
    Scalar { sigma: CoefficientFunction, x0: f64, horizon: f64 },
}

/// Everything resolved and validated from a config.
struct Resolved {
    experiment: Experiment,
    model: ModelKind,
    enlargement: Option<EnlargementSpec>,
    seed: u64,
    n_paths: u64,
    steps: usize,
    t_eval: f64,
    barrier: ExplosionBarrier,
    z: f64,
    dump_limit: u64,
}

fn positive(field: &str, x: i64) -> Result<u64, CliError> {
    if x > 0 {
        Ok(x as u64)
    } else {
        Err(CliError::new(field, format!("must be positive, got {x}")))
    }
}

fn resolve(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Resolved, CliError> {
    let experiment: Experiment = serde_json::from_value(Value::String(cfg.experiment.clone()))
        .map_err(|_| CliError::new("experiment", format!("unknown experiment '{}'", cfg.experiment)))?;
    let entry = cfg
        .models
        .get(&cfg.model)
        .ok_or_else(|| CliError::new("model", format!("no [models.{}] table", cfg.model)))?;
    let mfield = |f: &str| format!("models.{}.{f}", cfg.model);
    let model = match (&entry.sigma, &entry.mu, &entry.b) {
        (Some(sigma), None, None) => {
            if !(entry.s0 > 0.0 && entry.horizon > 0.0) {
                return Err(CliError::new(mfield("s0"), "s0 and horizon must be positive"));
            }
            ModelKind::Scalar {
                sigma: sigma.build(),
                x0: entry.s0,
                horizon: entry.horizon,
            }
        }
        (None, mu, Some(b)) => {
            let spec = match (entry.power, mu) {
                (Some(p), None) => crate::coeffs::make_power_family(p.alpha, p.beta, p.gamma, p.delta, b.build(), entry.rho),
                (None, Some(mu)) => VolatilityModelSpec::basic(mu.build(), b.build(), entry.rho),
                _ => return Err(CliError::new(mfield("mu"), "give exactly one of mu and power")),
            };
            let spec = spec
                .and_then(|s| s.with_initial(entry.s0, entry.v0))
                .and_then(|s| s.with_horizon(entry.horizon))
                .map_err(|e| CliError::new(mfield("coefficients"), e))?;
            ModelKind::Sv(spec)
        }
        _ => {
            return Err(CliError::new(
                mfield("sigma"),
                "a model needs either sigma alone or b with mu or power",
            ))
        }
    };
    let horizon = match &model {
        ModelKind::Sv(s) => s.horizon,
        ModelKind::Scalar { horizon, .. } => *horizon,
    };
    let enlargement = match &cfg.enlargement {
        None => None,
        Some(name) => {
            let e = cfg
                .enlargements
                .get(name)
                .ok_or_else(|| CliError::new("enlargement", format!("no [enlargements.{name}] table")))?;
            let h = e.horizon.unwrap_or(horizon);
            let spec = match e.delta_guard.or(cfg.numerics.delta_guard) {
                Some(d) => EnlargementSpec::with_guard(e.kind, h, d),
                None => EnlargementSpec::new(e.kind, h),
            }
            .map_err(|err| CliError::new(format!("enlargements.{name}"), err))?;
            Some(spec)
        }
    };
    let n = &cfg.numerics;
    let seed = match (opts.seed, n.seed) {
        (Some(s), _) => s,
        (None, Some(s)) if s >= 0 => s as u64,
        (None, Some(s)) => return Err(CliError::new("numerics.seed", format!("must be nonnegative, got {s}"))),
        (None, None) => return Err(CliError::new("numerics.seed", "a seed is required")),
    };
    let n_paths = positive("numerics.n_paths", n.n_paths)?;
    let steps = positive("numerics.steps", n.steps)? as usize;
    let t_eval = n.t_eval.unwrap_or(horizon);
    if !(t_eval > 0.0 && t_eval.is_finite()) {
        return Err(CliError::new("numerics.t_eval", format!("must be positive, got {t_eval}")));
    }
    let barrier = match &n.barrier {
        Some(levels) => ExplosionBarrier::new(levels.clone()).map_err(|e| CliError::new("numerics.barrier", e))?,
        None => ExplosionBarrier::default(),
    };
    if !(n.confidence > 0.0 && n.confidence < 1.0) {
        return Err(CliError::new("numerics.confidence", "must lie in (0, 1)"));
    }
    if !(n.eps1 > 0.0 && n.eps2 > 0.0) {
        return Err(CliError::new("numerics.eps1", "eps1 and eps2 must be positive"));
    }
    if n.exponents.is_empty() || n.exponents.iter().any(|&k| k == 0 || k > 20) {
        return Err(CliError::new("numerics.exponents", "need step exponents in 1..=20"));
    }
    let dump_limit = positive("numerics.dump_limit", n.dump_limit)?;
    let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 + 0.5 * n.confidence);
    for f in &cfg.output.formats {
        if f != "json" && f != "csv" {
            return Err(CliError::new("output.formats", format!("unknown format '{f}'")));
        }
    }
    Ok(Resolved {
        experiment,
        model,
        enlargement,
        seed,
        n_paths,
        steps,
        t_eval,
        barrier,
        z,
        dump_limit,
    })
}

impl Resolved {
    fn sim_config(&self, n: &Numerics) -> Result<SimConfig, CliError> {
        let grid = TimeGrid::new(self.t_eval, self.steps).map_err(|e| CliError::new("numerics.steps", e))?;
        Ok(SimConfig::new(grid, self.barrier.clone(), self.seed)
            .with_scheme(n.scheme)
            .with_noise(n.noise)
            .with_measure(n.measure))
    }

    fn sv(&self) -> Result<&VolatilityModelSpec, CliError> {
        match &self.model {
            ModelKind::Sv(s) => Ok(s),
            ModelKind::Scalar { .. } => Err(CliError::new(
                "model",
                "this experiment needs an (S, v) model with mu and b",
            )),
        }
    }
}

fn verdict_str<T: Serialize>(v: T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

/// Runs the configured experiment without touching the file system.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Report, CliError> {
    let r = resolve(cfg, opts)?;
    let n = &cfg.numerics;
    let threads = opts.threads;
    let alloc_for = |model: &VolatilityModelSpec| {
        GirsanovAllocation::new(n.allocation, n.eps2, model.rho).map_err(|e| CliError::new("numerics.allocation", e))
    };

    let mut report = Report {
        experiment: r.experiment,
        json: Value::Null,
        csv: None,
        inconclusive: false,
        dumps: Vec::new(),
    };

    match r.experiment {
        Experiment::Analyze => {
            let spec = r.sv()?;
            let grid = default_grid();
            let phi = match cfg.models[&cfg.model].phi.as_ref() {
                Some(p) => PhiFunction::new(p.form.build(), p.a),
                None => PhiFunction::new(CoefficientFunction::power(1.0, 2.0), 1.0),
            }
            .map_err(|e| CliError::new(format!("models.{}.phi", cfg.model), e))?;
            let validation = validate_coefficients(spec, &grid, DEFAULT_X_MAX).map_err(|e| CliError::new("model", e))?;
            let mart = lm_martingale_check(spec, &grid).map_err(|e| CliError::new("model", e))?;
            let strict = lm_strict_check(spec, &phi, n.eps1, n.eps2, &grid).map_err(|e| CliError::new("model", e))?;
            let mut verdicts = vec![mart.verdict, strict.verdict];
            let power = match spec.family {
                ModelFamily::Power { .. } => match power_family_condition_check(spec, &phi, n.eps1, n.eps2, &grid) {
                    Ok((m, s)) => {
                        verdicts.extend([m.verdict, s.verdict]);
                        json!({"martingale": m, "strict": s})
                    }
                    Err(e) => json!({"error": e.to_string()}),
                },
                ModelFamily::Basic => Value::Null,
            };
            report.inconclusive = verdicts.contains(&Verdict::Inconclusive);
            report.csv = Some((
                "check,verdict".into(),
                vec![
                    format!("lm_martingale,{}", verdict_str(mart.verdict)),
                    format!("lm_strict,{}", verdict_str(strict.verdict)),
                ],
            ));
            report.json = json!({
                "validation": validation,
                "lm_martingale": mart,
                "lm_strict": strict,
                "phi_integrability": phi_integrability(&phi),
                "power_family": power,
            });
        }
        Experiment::Feller => {
            let spec = r.sv()?;
            let space = match n.state_space {
                StateSpaceChoice::Positive => StateSpace::positive_half_line(),
                StateSpaceChoice::Real => StateSpace::real_line(),
            };
            let res = feller_scale_classify(spec, n.feller_c, space).map_err(|e| CliError::new("numerics.feller_c", e))?;
            report.csv = Some(("classification".into(), vec![verdict_str(res.classification)]));
            report.json = to_json(&res);
        }
        Experiment::Simulate => {
            let sim = r.sim_config(n)?;
            let limit = if opts.dump_paths { r.dump_limit.min(r.n_paths) } else { 0 };
            let (summary, dumps) = match &r.model {
                ModelKind::Scalar { sigma, x0, .. } => {
                    let f = |x: f64| sigma.eval(x);
                    let s = summarize(r.n_paths, threads, |i| {
                        simulate_scalar_summary(&f, *x0, &sim, i).map(|p| (p.stop_reason, p.s, p.v))
                    })?;
                    let d = (0..limit)
                        .map(|i| simulate_scalar_sde(&f, *x0, &sim, i))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| CliError::new("simulation", e))?;
                    (s, d)
                }
                ModelKind::Sv(spec) => match r.enlargement {
                    None => simulate_model(spec, &NoOverlay, &sim, r.n_paths, threads, limit)?,
                    Some(enl) => {
                        let d = EnlargedDynamics::new(spec, enl, alloc_for(spec)?, n.eps1)
                            .map_err(|e| CliError::new("numerics.eps1", e))?;
                        simulate_model(spec, &d, &sim, r.n_paths, threads, limit)?
                    }
                },
            };
            report.csv = Some((SimSummary::CSV_HEADER.into(), vec![summary.csv_row()]));
            report.json = to_json(&summary);
            report.dumps = dumps;
        }
        Experiment::Defect => {
            let sim = r.sim_config(n)?;
            let (defect, extra) = match &r.model {
                ModelKind::Scalar { sigma, x0, .. } => {
                    let f = |x: f64| sigma.eval(x);
                    let d = estimate_scalar_defect(&f, *x0, &sim, r.n_paths, threads, r.z)
                        .map_err(|e| CliError::new("simulation", e))?;
                    let extra = if n.diagnostics {
                        let dec = scalar_decomposition(&f, *x0, &sim, r.n_paths, threads)
                            .map_err(|e| CliError::new("simulation", e))?;
                        json!({"decomposition": dec})
                    } else {
                        Value::Null
                    };
                    (d, extra)
                }
                ModelKind::Sv(spec) => match r.enlargement {
                    None => model_defect(spec, &NoOverlay, &sim, &r, threads, n.diagnostics)?,
                    Some(enl) => {
                        let d = EnlargedDynamics::new(spec, enl, alloc_for(spec)?, n.eps1)
                            .map_err(|e| CliError::new("numerics.eps1", e))?;
                        model_defect(spec, &d, &sim, &r, threads, n.diagnostics)?
                    }
                },
            };
            report.inconclusive = defect.verdict == DefectVerdict::Inconclusive;
            report.csv = Some((DefectReport::CSV_HEADER.into(), vec![defect.csv_row()]));
            report.json = json!({"defect": defect, "diagnostics": extra});
        }
        Experiment::Compare => {
            let spec = r.sv()?;
            let sim = r.sim_config(n)?;
            let cmp: ComparisonReport = match r.enlargement {
                Some(enl) => {
                    let d = EnlargedDynamics::new(spec, enl, alloc_for(spec)?, n.eps1)
                        .map_err(|e| CliError::new("numerics.eps1", e))?;
                    enlarged_comparison(spec, &d, &sim, n.eps1, n.eps2, r.n_paths, threads, &n.exponents)
                }
                None => {
                    let c = cfg.compare.clone().unwrap_or(CompareEntry {
                        x0: None,
                        y0: None,
                        drift_gap: 0.0,
                    });
                    let setup = ComparisonSetup {
                        x0: c.x0.unwrap_or(spec.v0),
                        y0: c.y0.unwrap_or(spec.v0),
                        horizon: r.t_eval,
                        n_paths: r.n_paths,
                        seed: r.seed,
                        noise: n.noise,
                        threads,
                    };
                    comparison_harness(|x| spec.mu(x), |x| spec.b(x), |x| spec.b(x) + c.drift_gap, &setup, &n.exponents)
                }
            }
            .map_err(|e| CliError::new("compare", e))?;
            report.csv = Some((
                "step,grid_points,violations,fraction".into(),
                cmp.levels
                    .iter()
                    .map(|l| format!("{},{},{},{}", l.step, l.grid_points, l.violations, l.fraction))
                    .collect(),
            ));
            report.json = to_json(&cmp);
        }
        Experiment::Jumps => {
            let base = r.sv()?.clone();
            let j = cfg
                .jumps
                .as_ref()
                .ok_or_else(|| CliError::new("jumps", "the jumps experiment needs a [jumps] table"))?;
            let driver = JumpDriver::new(j.intensity, j.sizes.clone(), j.probs.clone(), j.continuous_vol)
                .map_err(|e| CliError::new("jumps", e))?;
            let spec = JumpModelSpec::new(base, j.alpha_exp).map_err(|e| CliError::new("jumps.alpha_exp", e))?;
            let sim = r.sim_config(n)?;
            let positivity = jump_positivity_check(&spec, &driver);
            let moment = moment_condition_estimate(&spec, &driver, &sim, r.n_paths, threads, r.z)
                .map_err(|e| CliError::new("simulation", e))?;
            let acc = run_sharded(r.n_paths, DEFAULT_SHARD_SIZE, threads, JumpAcc::default, |i, a: &mut JumpAcc| {
                let p = simulate_jump_summary(&spec, &driver, &sim, i)?;
                a.m.push(p.m);
                a.qv.push(p.qv);
                a.s.push(if p.stop_reason == StopReason::JumpFloor { 0.0 } else { p.s });
                a.floor += u64::from(p.stop_reason == StopReason::JumpFloor);
                Ok::<(), crate::engine::EngineError>(())
            })
            .map_err(|e| CliError::new("simulation", e))?;
            if opts.dump_paths {
                report.dumps = (0..r.dump_limit.min(r.n_paths))
                    .map(|i| simulate_jump_path(&spec, &driver, &sim, i))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| CliError::new("simulation", e))?;
            }
            report.inconclusive = moment.heavy_tail;
            report.csv = Some((
                "m_mean,m_se,qv_mean,qv_expected,s_mean,s_se,jump_floor,moment,moment_se".into(),
                vec![format!(
                    "{},{},{},{},{},{},{},{},{}",
                    acc.m.mean(),
                    acc.m.std_error(),
                    acc.qv.mean(),
                    driver.angle_bracket_rate() * r.t_eval,
                    acc.s.mean(),
                    acc.s.std_error(),
                    acc.floor,
                    moment.estimate,
                    moment.std_error
                )],
            ));
            report.json = json!({
                "positivity": positivity,
                "moment_condition": moment,
                "driver_mean": {"mean": acc.m.mean(), "std_error": acc.m.std_error()},
                "quadratic_variation": {
                    "mean": acc.qv.mean(),
                    "std_error": acc.qv.std_error(),
                    "expected": driver.angle_bracket_rate() * r.t_eval,
                },
                "price_mean": {"mean": acc.s.mean(), "std_error": acc.s.std_error()},
                "jump_floor_stops": acc.floor,
            });
        }
        Experiment::ValidateQ => {
            let spec = r.sv()?;
            let enl = r
                .enlargement
                .ok_or_else(|| CliError::new("enlargement", "validate-q needs an enlargement"))?;
            let d = EnlargedDynamics::new(spec, enl, alloc_for(spec)?, n.eps1).map_err(|e| CliError::new("numerics.eps1", e))?;
            let sim = r.sim_config(n)?;
            let acc = run_sharded(r.n_paths, DEFAULT_SHARD_SIZE, threads, QAcc::default, |i, a: &mut QAcc| {
                let p = simulate_summary(spec, &d, &sim, i)?;
                if !p.gate_failed {
                    a.novikov.push(p.novikov);
                    a.z.push(p.log_z.exp());
                }
                Ok::<(), crate::engine::EngineError>(())
            })
            .map_err(|e| CliError::new("simulation", e))?;
            let schedule: Vec<(f64, f64)> = DEFAULT_TRUNCATION_SCHEDULE.iter().map(|&m| (m, m)).collect();
            let mc = validate_measure_change(&acc.novikov, &schedule, DEFAULT_TRUNCATION_THRESHOLD);
            report.inconclusive = mc.smallest_validated_m.is_none();
            report.csv = Some((
                "m,bound,truncated_fraction,validated".into(),
                mc.levels
                    .iter()
                    .map(|l| format!("{},{},{},{}", l.m, l.bound, l.truncated_fraction, l.validated))
                    .collect(),
            ));
            report.json = json!({
                "measure_change": mc,
                "density_mean": {"mean": acc.z.mean(), "std_error": acc.z.std_error(), "n": acc.z.n},
            });
        }
    }
    Ok(report)
}

#[derive(Default)]
struct JumpAcc {
    m: MeanAccumulator,
    qv: MeanAccumulator,
    s: MeanAccumulator,
    floor: u64,
}

impl Accumulator for JumpAcc {
    fn merge_from(&mut self, o: Self) {
        self.m.merge(&o.m);
        self.qv.merge(&o.qv);
        self.s.merge(&o.s);
        self.floor += o.floor;
    }
}

#[derive(Default)]
struct QAcc {
    novikov: Vec<f64>,
    z: MeanAccumulator,
}

impl Accumulator for QAcc {
    fn merge_from(&mut self, o: Self) {
        self.novikov.extend(o.novikov);
        self.z.merge(&o.z);
    }
}

/// Stop-reason counts and terminal means of a batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SimSummary {
    pub n_paths: u64,
    pub matured: u64,
    pub barrier: u64,
    pub tau: u64,
    pub jump_floor: u64,
    pub s_mean: f64,
    pub s_std_error: f64,
    pub v_mean: f64,
}

impl SimSummary {
    const CSV_HEADER: &'static str = "n_paths,matured,barrier,tau,jump_floor,s_mean,s_std_error,v_mean";

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.n_paths, self.matured, self.barrier, self.tau, self.jump_floor, self.s_mean, self.s_std_error, self.v_mean
        )
    }
}

#[derive(Default)]
struct SumAcc {
    counts: [u64; 4],
    s: MeanAccumulator,
    v: MeanAccumulator,
}

impl Accumulator for SumAcc {
    fn merge_from(&mut self, o: Self) {
        for (a, b) in self.counts.iter_mut().zip(o.counts) {
            *a += b;
        }
        self.s.merge(&o.s);
        self.v.merge(&o.v);
    }
}

fn summarize<F>(n_paths: u64, threads: usize, path: F) -> Result<SimSummary, CliError>
where
    F: Fn(u64) -> Result<(StopReason, f64, f64), crate::engine::EngineError> + Sync,
{
    let acc = run_sharded(n_paths, DEFAULT_SHARD_SIZE, threads, SumAcc::default, |i, a: &mut SumAcc| {
        let (reason, s, v) = path(i)?;
        let slot = match reason {
            StopReason::Matured => 0,
            StopReason::Barrier { .. } => 1,
            StopReason::Tau => 2,
            StopReason::JumpFloor => 3,
        };
        a.counts[slot] += 1;
        a.s.push(s);
        a.v.push(v);
        Ok(())
    })
    .map_err(|e: crate::engine::EngineError| CliError::new("simulation", e))?;
    Ok(SimSummary {
        n_paths,
        matured: acc.counts[0],
        barrier: acc.counts[1],
        tau: acc.counts[2],
        jump_floor: acc.counts[3],
        s_mean: acc.s.mean(),
        s_std_error: acc.s.std_error(),
        v_mean: acc.v.mean(),
    })
}

fn simulate_model<O: DriftOverlay>(
    spec: &VolatilityModelSpec,
    overlay: &O,
    sim: &SimConfig,
    n_paths: u64,
    threads: usize,
    dump: u64,
) -> Result<(SimSummary, Vec<StoppedPathBundle>), CliError> {
    let s = summarize(n_paths, threads, |i| simulate_summary(spec, overlay, sim, i).map(|p| (p.stop_reason, p.s, p.v)))?;
    let d = (0..dump)
        .map(|i| simulate_path(spec, overlay, sim, i))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::new("simulation", e))?;
    Ok((s, d))
}

fn model_defect<O: DriftOverlay>(
    spec: &VolatilityModelSpec,
    overlay: &O,
    sim: &SimConfig,
    r: &Resolved,
    threads: usize,
    diagnostics: bool,
) -> Result<(DefectReport, Value), CliError> {
    let d = estimate_defect(spec, overlay, sim, r.n_paths, threads, r.z).map_err(|e| CliError::new("simulation", e))?;
    if !diagnostics {
        return Ok((d, Value::Null));
    }
    if !overlay.supports_numeraire() {
        return Ok((d, json!({"note": "this enlargement cannot be simulated under the share numeraire"})));
    }
    let dec = model_decomposition(spec, overlay, sim, r.n_paths, threads).map_err(|e| CliError::new("simulation", e))?;
    let exp = explosion_probability(spec, overlay, sim, r.n_paths, threads, r.z).map_err(|e| CliError::new("simulation", e))?;
    Ok((d, json!({"decomposition": dec, "explosion": exp})))
}

/// The deterministic JSON document for a report.
pub fn report_document(cfg: &ExperimentConfig, opts: &RunOptions, report: &Report) -> Result<Value, CliError> {
    let r = resolve(cfg, opts)?;
    let scheme = match &r.model {
        ModelKind::Sv(spec) => {
            let (eff, note) = effective_scheme(spec, cfg.numerics.scheme);
            json!({"requested": cfg.numerics.scheme, "effective": eff, "note": note})
        }
        ModelKind::Scalar { .. } => json!({"requested": cfg.numerics.scheme, "effective": "exponential_euler", "note": "scalar equations are stepped in log space"}),
    };
    let mut hashed = cfg.clone();
    hashed.numerics.seed = Some(r.seed as i64);
    Ok(json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": report.experiment,
        "config_hash": hex::encode(hashed.hash()),
        "seed": r.seed,
        "scheme": scheme,
        "numerics": {
            "n_paths": r.n_paths,
            "steps": r.steps,
            "t_eval": r.t_eval,
            "barrier": r.barrier.levels(),
            "noise": cfg.numerics.noise,
            "measure": cfg.numerics.measure,
            "confidence": cfg.numerics.confidence,
        },
        "result": report.json,
    }))
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let err = |e: std::io::Error| CliError::new("output.dir", format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(err)?;
    tmp.write_all(bytes).map_err(err)?;
    tmp.persist(path).map_err(|e| err(e.error))?;
    Ok(())
}

/// Output directory: `--out`, then `[output] dir`, then `SLM_FORGE_OUT`,
/// then `slm-forge-out`.
pub fn output_dir(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    opts.out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Runs the experiment and writes `<experiment>.json`, `<experiment>.csv`,
/// a timestamp sidecar, the repro log and any path dumps. Returns the exit
/// code: 0, or 2 for an inconclusive verdict under `strict`.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<i32, CliError> {
    let started = Instant::now();
    let report = run_experiment(cfg, opts)?;
    let doc = report_document(cfg, opts, &report)?;
    let dir = output_dir(cfg, opts);
    fs::create_dir_all(&dir).map_err(|e| CliError::new("output.dir", format!("{}: {e}", dir.display())))?;
    let name = cfg.experiment.as_str();
    let formats = &cfg.output.formats;

    if formats.iter().any(|f| f == "json") {
        let mut text = serde_json::to_string_pretty(&doc).expect("report serializes");
        text.push('\n');
        write_atomic(&dir.join(format!("{name}.json")), text.as_bytes())?;
    }
    if let (true, Some((header, rows))) = (formats.iter().any(|f| f == "csv"), &report.csv) {
        let mut text = format!("{header}\n");
        for row in rows {
            text.push_str(row);
            text.push('\n');
        }
        write_atomic(&dir.join(format!("{name}.csv")), text.as_bytes())?;
    }
    if !report.dumps.is_empty() {
        let paths = dir.join("paths");
        fs::create_dir_all(&paths).map_err(|e| CliError::new("output.dir", e))?;
        for (i, b) in report.dumps.iter().enumerate() {
            let mut buf = Vec::new();
            write_path_csv(b, &mut buf).map_err(|e| CliError::new("output.dir", e))?;
            write_atomic(&paths.join(format!("path_{i:05}.csv")), &buf)?;
        }
    }
    let seed = doc["seed"].as_u64().unwrap_or_default();
    let mut hash = [0u8; 32];
    hex::decode_to_slice(doc["config_hash"].as_str().unwrap_or_default(), &mut hash)
        .map_err(|e| CliError::new("config", e))?;
    let mut repro = Vec::new();
    write_repro_log(&mut repro, seed, &hash).map_err(|e| CliError::new("output.dir", e))?;
    write_atomic(&dir.join(format!("{name}.repro")), &repro)?;

    let unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = json!({
        "finished_unix": unix,
        "elapsed_seconds": started.elapsed().as_secs_f64(),
        "threads": opts.threads,
        "path_csv_header": PATH_CSV_HEADER,
    });
    write_atomic(&dir.join(format!("{name}.meta.json")), meta.to_string().as_bytes())?;

    Ok(if opts.strict && report.inconclusive { 2 } else { 0 })
}
