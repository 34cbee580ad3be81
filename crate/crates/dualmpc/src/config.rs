//! JSON configuration schema and loading.
//!
//! Every real number in a config file is a decimal string and every matrix a
//! row-major array of such strings, so files round-trip bit-exactly across
//! platforms. Linear dynamics may be given either in continuous time
//! (discretized at load with an exact zero-order hold) or directly in
//! discrete time; serialization always emits the discrete form actually
//! used, so a serialized benchmark reloads to an identical model set.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::belief::CapConfig;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Basis, CostSpec, Drift, ModeModel, ModelSet};
use crate::objective::{CostExpectation, ObjectiveConfig, Propagation};
use crate::optimizer::SolverConfig;
use crate::tree::TreeTopology;

/// Matrix stored as row-major decimal strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<String>,
}

impl MatrixJson {
    pub fn parse(&self, field: &str) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Parse(format!(
                "{field}: {}x{} matrix needs {} entries, found {}",
                self.rows,
                self.cols,
                self.rows * self.cols,
                self.data.len()
            )));
        }
        let mut values = Vec::with_capacity(self.data.len());
        for (i, s) in self.data.iter().enumerate() {
            values.push(parse_real(s, &format!("{field}[{i}]"))?);
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &values))
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(format_real(m[(r, c)]));
            }
        }
        MatrixJson { rows: m.nrows(), cols: m.ncols(), data }
    }
}

/// Parse one decimal string into a finite real, naming the field on failure.
pub fn parse_real(s: &str, field: &str) -> Result<f64> {
    let v = f64::from_str(s.trim())
        .map_err(|_| Error::Parse(format!("{field}: cannot parse {s:?} as a real number")))?;
    if !v.is_finite() {
        return Err(Error::Parse(format!("{field}: {s:?} is not finite")));
    }
    Ok(v)
}

/// Shortest decimal string that parses back to exactly this value.
pub fn format_real(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v}").expect("formatting a float cannot fail");
    s
}

fn parse_vector(strings: &[String], field: &str) -> Result<DVector<f64>> {
    let mut values = Vec::with_capacity(strings.len());
    for (i, s) in strings.iter().enumerate() {
        values.push(parse_real(s, &format!("{field}[{i}]"))?);
    }
    Ok(DVector::from_vec(values))
}

fn format_vector(v: &DVector<f64>) -> Vec<String> {
    v.iter().map(|x| format_real(*x)).collect()
}

/// Continuous-time linear dynamics, discretized at load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContinuousJson {
    pub a: MatrixJson,
    pub b: MatrixJson,
    pub ts: String,
}

/// Discrete-time linear dynamics, used as given.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteJson {
    pub a: MatrixJson,
    pub b: MatrixJson,
}

/// Dynamics of one mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DynamicsJson {
    /// `x⁺ = A·x + γ·(B·u) + w` with scalar uncertain input gain γ; exactly
    /// one of `continuous` / `discrete` must be present.
    LinearInputGain {
        #[serde(skip_serializing_if = "Option::is_none")]
        continuous: Option<ContinuousJson>,
        #[serde(skip_serializing_if = "Option::is_none")]
        discrete: Option<DiscreteJson>,
    },
    /// `x⁺ = tanh(W·x)·u₁·γ + w` — a nonlinear basis without an analytic
    /// state Jacobian (exercises the finite-difference fallback).
    TanhGain { w: MatrixJson },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeJson {
    pub name: String,
    pub prior_prob: String,
    pub param_mean: Vec<String>,
    pub param_cov: MatrixJson,
    pub noise_cov: MatrixJson,
    pub dynamics: DynamicsJson,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputBoundsJson {
    pub lower: Vec<String>,
    pub upper: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostJson {
    pub q: MatrixJson,
    pub r: MatrixJson,
    pub q_terminal: MatrixJson,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveJson {
    pub propagation: String,
    pub cost_expectation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverJson {
    pub max_iters: usize,
    pub grad_tol: String,
    pub step_init: String,
    pub armijo_c: String,
    pub backtrack_factor: String,
    pub fd_step: String,
    pub memory: usize,
    pub max_backtracks: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_budget_seconds: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioJson {
    pub horizon: usize,
    pub dual_horizon: usize,
    pub num_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<usize>>,
    pub p_min: String,
    pub var_floor: Vec<Vec<String>>,
    pub objective: ObjectiveJson,
    pub solver: SolverJson,
    pub warm_start: bool,
    pub cempc_mode_weighting: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModePhaseJson {
    pub step: usize,
    pub mode: usize,
    pub gamma: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferencePhaseJson {
    pub step: usize,
    pub state: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthJson {
    pub run_length: usize,
    pub initial_state: Vec<String>,
    pub mode_schedule: Vec<ModePhaseJson>,
    pub reference_schedule: Vec<ReferencePhaseJson>,
    pub noise_scale: String,
}

/// Top-level config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigFile {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
    pub rng_seed: u64,
    pub modes: Vec<ModeJson>,
    pub input_bounds: InputBoundsJson,
    pub cost: CostJson,
    pub scenario: ScenarioJson,
    pub truth: TruthJson,
}

impl ConfigFile {
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// How the certainty-equivalence baseline weighs the mode mixture in its
/// open-loop problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeWeighting {
    /// Mix mode branch costs by the current mode probabilities.
    Posterior,
    /// Use only the currently most probable mode.
    MostLikely,
}

/// Validated scenario/solver options shared by the controllers.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub topology: TreeTopology,
    pub caps: CapConfig,
    pub objective: ObjectiveConfig,
    pub solver: SolverConfig,
    pub warm_start: bool,
    pub cempc_mode_weighting: ModeWeighting,
}

/// One phase of the true plant: from `step` onward the plant runs `mode`
/// with parameter `gamma` until the next phase begins.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthPhase {
    pub step: usize,
    pub mode: usize,
    pub gamma: DVector<f64>,
}

/// True plant description for closed-loop simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthConfig {
    pub run_length: usize,
    pub initial_state: DVector<f64>,
    pub mode_schedule: Vec<TruthPhase>,
    /// Multiplies the plant's process-noise standard deviation (0 disables
    /// process noise without touching the controllers' models).
    pub noise_scale: f64,
}

impl TruthConfig {
    /// The phase active at step `k`.
    pub fn active(&self, k: usize) -> &TruthPhase {
        let idx = self.mode_schedule.partition_point(|p| p.step <= k);
        &self.mode_schedule[idx - 1]
    }

    pub fn validate(&self, models: &ModelSet) -> Result<()> {
        if self.run_length == 0 {
            return Err(Error::Config("truth.run_length must be positive".into()));
        }
        if self.initial_state.len() != models.n_x {
            return Err(Error::Dimension(format!(
                "truth.initial_state has {} entries, model has {} states",
                self.initial_state.len(),
                models.n_x
            )));
        }
        if self.mode_schedule.is_empty() {
            return Err(Error::Config("truth.mode_schedule is empty".into()));
        }
        if self.mode_schedule[0].step != 0 {
            return Err(Error::Config("truth.mode_schedule must start at step 0".into()));
        }
        if !self.mode_schedule.windows(2).all(|w| w[0].step < w[1].step) {
            return Err(Error::Config("truth.mode_schedule steps must strictly increase".into()));
        }
        for (i, phase) in self.mode_schedule.iter().enumerate() {
            if phase.step > self.run_length {
                return Err(Error::Config(format!(
                    "truth.mode_schedule[{i}].step {} exceeds run_length {}",
                    phase.step, self.run_length
                )));
            }
            if phase.mode >= models.n_modes() {
                return Err(Error::Config(format!(
                    "truth.mode_schedule[{i}].mode {} out of range ({} modes)",
                    phase.mode,
                    models.n_modes()
                )));
            }
            let n_g = models.modes[phase.mode].n_gamma();
            if phase.gamma.len() != n_g {
                return Err(Error::Dimension(format!(
                    "truth.mode_schedule[{i}].gamma has {} entries, mode needs {n_g}",
                    phase.gamma.len()
                )));
            }
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::Config(format!(
                "truth.noise_scale must be a nonnegative real, got {}",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

/// Fully validated benchmark: everything a simulation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub name: String,
    pub provenance: Option<String>,
    pub rng_seed: u64,
    pub models: ModelSet,
    pub cost: CostSpec,
    pub scenario: ScenarioConfig,
    pub truth: TruthConfig,
}

fn build_dynamics(dynamics: &DynamicsJson, field: &str) -> Result<(Drift, Basis)> {
    match dynamics {
        DynamicsJson::LinearInputGain { continuous, discrete } => {
            let (a, b) = match (continuous, discrete) {
                (Some(_), Some(_)) => {
                    return Err(Error::Config(format!(
                        "{field}: give either continuous or discrete dynamics, not both"
                    )))
                }
                (None, None) => {
                    return Err(Error::Config(format!(
                        "{field}: linear_input_gain needs continuous or discrete matrices"
                    )))
                }
                (Some(c), None) => {
                    let a_c = c.a.parse(&format!("{field}.continuous.a"))?;
                    let b_c = c.b.parse(&format!("{field}.continuous.b"))?;
                    let ts = parse_real(&c.ts, &format!("{field}.continuous.ts"))?;
                    linalg::zoh_discretize(&a_c, &b_c, ts)?
                }
                (None, Some(d)) => {
                    (d.a.parse(&format!("{field}.discrete.a"))?, d.b.parse(&format!("{field}.discrete.b"))?)
                }
            };
            if a.nrows() != a.ncols() || a.nrows() != b.nrows() {
                return Err(Error::Dimension(format!(
                    "{field}: state matrix is {}x{}, input matrix is {}x{}",
                    a.nrows(),
                    a.ncols(),
                    b.nrows(),
                    b.ncols()
                )));
            }
            Ok((Drift::Linear { a }, Basis::input_gain(b)))
        }
        DynamicsJson::TanhGain { w } => {
            let w = w.parse(&format!("{field}.w"))?;
            Ok((Drift::Zero { n_x: w.nrows() }, Basis::TanhGain { w }))
        }
    }
}

fn parse_objective(json: &ObjectiveJson) -> Result<ObjectiveConfig> {
    let propagation = match json.propagation.as_str() {
        "certainty_equivalence" => Propagation::CertaintyEquivalence,
        "taylor_moments" => Propagation::TaylorMoments,
        other => {
            return Err(Error::Parse(format!(
                "scenario.objective.propagation: unknown value {other:?} \
                 (expected certainty_equivalence or taylor_moments)"
            )))
        }
    };
    let cost_expectation = match json.cost_expectation.as_str() {
        "mean_only" => CostExpectation::MeanOnly,
        "mean_plus_trace" => CostExpectation::MeanPlusTrace,
        other => {
            return Err(Error::Parse(format!(
                "scenario.objective.cost_expectation: unknown value {other:?} \
                 (expected mean_only or mean_plus_trace)"
            )))
        }
    };
    let cfg = ObjectiveConfig { propagation, cost_expectation };
    cfg.validate()?;
    Ok(cfg)
}

fn objective_to_json(cfg: &ObjectiveConfig) -> ObjectiveJson {
    ObjectiveJson {
        propagation: match cfg.propagation {
            Propagation::CertaintyEquivalence => "certainty_equivalence".into(),
            Propagation::TaylorMoments => "taylor_moments".into(),
        },
        cost_expectation: match cfg.cost_expectation {
            CostExpectation::MeanOnly => "mean_only".into(),
            CostExpectation::MeanPlusTrace => "mean_plus_trace".into(),
        },
    }
}

fn parse_solver(json: &SolverJson) -> Result<SolverConfig> {
    let cfg = SolverConfig {
        max_iters: json.max_iters,
        grad_tol: parse_real(&json.grad_tol, "scenario.solver.grad_tol")?,
        step_init: parse_real(&json.step_init, "scenario.solver.step_init")?,
        armijo_c: parse_real(&json.armijo_c, "scenario.solver.armijo_c")?,
        backtrack_factor: parse_real(&json.backtrack_factor, "scenario.solver.backtrack_factor")?,
        fd_step: parse_real(&json.fd_step, "scenario.solver.fd_step")?,
        memory: json.memory,
        max_backtracks: json.max_backtracks,
        time_budget: json
            .time_budget_seconds
            .as_ref()
            .map(|s| parse_real(s, "scenario.solver.time_budget_seconds"))
            .transpose()?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn solver_to_json(cfg: &SolverConfig) -> SolverJson {
    SolverJson {
        max_iters: cfg.max_iters,
        grad_tol: format_real(cfg.grad_tol),
        step_init: format_real(cfg.step_init),
        armijo_c: format_real(cfg.armijo_c),
        backtrack_factor: format_real(cfg.backtrack_factor),
        fd_step: format_real(cfg.fd_step),
        memory: cfg.memory,
        max_backtracks: cfg.max_backtracks,
        time_budget_seconds: cfg.time_budget.map(format_real),
    }
}

/// Build the validated benchmark from a parsed config file.
pub fn build_benchmark(file: &ConfigFile) -> Result<Benchmark> {
    if file.modes.is_empty() {
        return Err(Error::Config("config lists no modes".into()));
    }

    let mut modes = Vec::with_capacity(file.modes.len());
    for (i, mode) in file.modes.iter().enumerate() {
        let field = format!("modes[{i}].dynamics");
        let (drift, basis) = build_dynamics(&mode.dynamics, &field)?;
        modes.push(ModeModel {
            name: mode.name.clone(),
            drift,
            basis,
            noise_cov: mode.noise_cov.parse(&format!("modes[{i}].noise_cov"))?,
            prior_mean: parse_vector(&mode.param_mean, &format!("modes[{i}].param_mean"))?,
            prior_cov: mode.param_cov.parse(&format!("modes[{i}].param_cov"))?,
            prior_prob: parse_real(&mode.prior_prob, &format!("modes[{i}].prior_prob"))?,
        });
    }
    let n_x = modes[0].basis.n_x();
    let input_lower = parse_vector(&file.input_bounds.lower, "input_bounds.lower")?;
    let input_upper = parse_vector(&file.input_bounds.upper, "input_bounds.upper")?;
    let n_u = input_lower.len();
    let models = ModelSet::new(modes, n_x, n_u, input_lower, input_upper)?;

    let truth = {
        let mut mode_schedule = Vec::with_capacity(file.truth.mode_schedule.len());
        for (i, phase) in file.truth.mode_schedule.iter().enumerate() {
            mode_schedule.push(TruthPhase {
                step: phase.step,
                mode: phase.mode,
                gamma: parse_vector(&phase.gamma, &format!("truth.mode_schedule[{i}].gamma"))?,
            });
        }
        TruthConfig {
            run_length: file.truth.run_length,
            initial_state: parse_vector(&file.truth.initial_state, "truth.initial_state")?,
            mode_schedule,
            noise_scale: parse_real(&file.truth.noise_scale, "truth.noise_scale")?,
        }
    };
    truth.validate(&models)?;

    let reference = {
        let schedule = &file.truth.reference_schedule;
        if schedule.is_empty() {
            return Err(Error::Config("truth.reference_schedule is empty".into()));
        }
        if schedule[0].step != 0 {
            return Err(Error::Config("truth.reference_schedule must start at step 0".into()));
        }
        if !schedule.windows(2).all(|w| w[0].step < w[1].step) {
            return Err(Error::Config(
                "truth.reference_schedule steps must strictly increase".into(),
            ));
        }
        let mut phases = Vec::with_capacity(schedule.len());
        for (i, phase) in schedule.iter().enumerate() {
            if phase.step > truth.run_length {
                return Err(Error::Config(format!(
                    "truth.reference_schedule[{i}].step {} exceeds run_length {}",
                    phase.step, truth.run_length
                )));
            }
            phases.push((
                phase.step,
                parse_vector(&phase.state, &format!("truth.reference_schedule[{i}].state"))?,
            ));
        }
        let mut dense = Vec::with_capacity(truth.run_length + 1);
        let mut active = 0usize;
        for k in 0..=truth.run_length {
            if active + 1 < phases.len() && phases[active + 1].0 <= k {
                active += 1;
            }
            dense.push(phases[active].1.clone());
        }
        dense
    };
    let cost = CostSpec::new(
        file.cost.q.parse("cost.q")?,
        file.cost.r.parse("cost.r")?,
        file.cost.q_terminal.parse("cost.q_terminal")?,
        reference,
    )?;
    if cost.n_x() != models.n_x {
        return Err(Error::Dimension(format!(
            "cost.q is {}x{}, model has {} states",
            cost.n_x(),
            cost.n_x(),
            models.n_x
        )));
    }

    let scenario = {
        let s = &file.scenario;
        let topology = TreeTopology::build(
            s.horizon,
            s.dual_horizon,
            s.num_samples,
            models.n_modes(),
            s.schedule.clone(),
        )?;
        let mut var_floor = Vec::with_capacity(s.var_floor.len());
        for (i, floor) in s.var_floor.iter().enumerate() {
            var_floor.push(parse_vector(floor, &format!("scenario.var_floor[{i}]"))?);
        }
        let caps = CapConfig { p_min: parse_real(&s.p_min, "scenario.p_min")?, var_floor };
        caps.validate(&models)?;
        let cempc_mode_weighting = match s.cempc_mode_weighting.as_str() {
            "posterior" => ModeWeighting::Posterior,
            "most_likely" => ModeWeighting::MostLikely,
            other => {
                return Err(Error::Parse(format!(
                    "scenario.cempc_mode_weighting: unknown value {other:?} \
                     (expected posterior or most_likely)"
                )))
            }
        };
        ScenarioConfig {
            topology,
            caps,
            objective: parse_objective(&s.objective)?,
            solver: parse_solver(&s.solver)?,
            warm_start: s.warm_start,
            cempc_mode_weighting,
        }
    };

    Ok(Benchmark {
        name: file.name.clone(),
        provenance: file.provenance.clone(),
        rng_seed: file.rng_seed,
        models,
        cost,
        scenario,
        truth,
    })
}

/// Load and validate a benchmark config from disk.
pub fn load_benchmark(path: impl AsRef<Path>) -> Result<Benchmark> {
    let path = path.as_ref();
    let text =
        fs::read_to_string(path).map_err(|e| Error::io_at(path.display().to_string(), e))?;
    let file = ConfigFile::from_json_str(&text)?;
    build_benchmark(&file)
}

impl Benchmark {
    /// Serialize back to the schema, emitting the discrete-time dynamics in
    /// use. Reloading the result reconstructs an identical benchmark.
    pub fn to_config(&self) -> ConfigFile {
        let modes = self
            .models
            .modes
            .iter()
            .map(|mode| {
                let dynamics = match (&mode.drift, &mode.basis) {
                    (Drift::Linear { a }, Basis::Affine { cu, .. }) if cu.len() == 1 => {
                        DynamicsJson::LinearInputGain {
                            continuous: None,
                            discrete: Some(DiscreteJson {
                                a: MatrixJson::from_matrix(a),
                                b: MatrixJson::from_matrix(&cu[0]),
                            }),
                        }
                    }
                    (_, Basis::TanhGain { w }) => {
                        DynamicsJson::TanhGain { w: MatrixJson::from_matrix(w) }
                    }
                    (drift, basis) => unreachable!(
                        "config-loaded modes are linear_input_gain or tanh_gain, found {drift:?}/{basis:?}"
                    ),
                };
                ModeJson {
                    name: mode.name.clone(),
                    prior_prob: format_real(mode.prior_prob),
                    param_mean: format_vector(&mode.prior_mean),
                    param_cov: MatrixJson::from_matrix(&mode.prior_cov),
                    noise_cov: MatrixJson::from_matrix(&mode.noise_cov),
                    dynamics,
                }
            })
            .collect();

        let reference_schedule = {
            let mut out = Vec::new();
            for (k, r) in self.cost.reference.iter().enumerate() {
                if k == 0 || r != &self.cost.reference[k - 1] {
                    out.push(ReferencePhaseJson { step: k, state: format_vector(r) });
                }
            }
            out
        };

        ConfigFile {
            name: self.name.clone(),
            provenance: self.provenance.clone(),
            rng_seed: self.rng_seed,
            modes,
            input_bounds: InputBoundsJson {
                lower: format_vector(&self.models.input_lower),
                upper: format_vector(&self.models.input_upper),
            },
            cost: CostJson {
                q: MatrixJson::from_matrix(&self.cost.q),
                r: MatrixJson::from_matrix(&self.cost.r),
                q_terminal: MatrixJson::from_matrix(&self.cost.q_terminal),
            },
            scenario: ScenarioJson {
                horizon: self.scenario.topology.horizon,
                dual_horizon: self.scenario.topology.dual_horizon,
                num_samples: self.scenario.topology.num_samples,
                schedule: {
                    let default: Vec<usize> = (0..self.scenario.topology.dual_horizon).collect();
                    if self.scenario.topology.schedule == default {
                        None
                    } else {
                        Some(self.scenario.topology.schedule.clone())
                    }
                },
                p_min: format_real(self.scenario.caps.p_min),
                var_floor: self.scenario.caps.var_floor.iter().map(format_vector).collect(),
                objective: objective_to_json(&self.scenario.objective),
                solver: solver_to_json(&self.scenario.solver),
                warm_start: self.scenario.warm_start,
                cempc_mode_weighting: match self.scenario.cempc_mode_weighting {
                    ModeWeighting::Posterior => "posterior".into(),
                    ModeWeighting::MostLikely => "most_likely".into(),
                },
            },
            truth: TruthJson {
                run_length: self.truth.run_length,
                initial_state: format_vector(&self.truth.initial_state),
                mode_schedule: self
                    .truth
                    .mode_schedule
                    .iter()
                    .map(|p| ModePhaseJson {
                        step: p.step,
                        mode: p.mode,
                        gamma: format_vector(&p.gamma),
                    })
                    .collect(),
                reference_schedule,
                noise_scale: format_real(self.truth.noise_scale),
            },
        }
    }

    /// Canonical JSON of this benchmark, used for digests and re-export.
    pub fn canonical_json(&self) -> Result<String> {
        self.to_config().to_json_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::step_truth;
    use approx::assert_relative_eq;

    fn benchmark_path() -> std::path::PathBuf {
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/cessna.json")
    }

    #[test]
    fn benchmark_config_loads_with_expected_shape() {
        let bench = load_benchmark(benchmark_path()).expect("load");
        assert_eq!(bench.models.n_modes(), 2);
        assert_eq!(bench.models.n_x, 4);
        assert_eq!(bench.models.n_u, 1);
        assert_eq!(bench.scenario.topology.horizon, 20);
        assert_eq!(bench.scenario.topology.dual_horizon, 1);
        assert_eq!(bench.scenario.topology.num_samples, 2);
        assert_eq!(bench.models.prior_probs(), vec![0.95, 0.05]);
        assert_eq!(bench.models.input_lower[0], -0.2);
        assert_eq!(bench.models.input_upper[0], 0.2);
        assert_eq!(bench.truth.run_length, 100);
        assert_eq!(bench.truth.active(19).mode, 0);
        assert_eq!(bench.truth.active(20).mode, 1);
        assert_eq!(bench.truth.active(20).gamma[0], 0.25);
        assert_eq!(bench.cost.reference_at(59)[3], 0.0);
        assert_eq!(bench.cost.reference_at(60)[3], 50.0);
        assert_eq!(bench.cost.reference_at(500)[3], 50.0);
    }

    #[test]
    fn discretization_matches_high_precision_reference() {
        // Zero-order hold of the continuous-time aircraft matrices at
        // ts = 0.2, cross-checked against a 50-digit series evaluation.
        let bench = load_benchmark(benchmark_path()).expect("load");
        let nominal = &bench.models.modes[0];
        let a_d = match &nominal.drift {
            Drift::Linear { a } => a.clone(),
            other => panic!("expected linear drift, got {other:?}"),
        };
        let expect_a = [
            [0.69580635242568058, 0.0, 0.13852180668687511, 0.0],
            [-0.086972495766562071, 1.0, 0.16188847144114478, 0.0],
            [-0.76742494392352148, 0.0, 0.61744258749996266, 0.0],
            [-22.68074542736257, 25.64, 0.22719321555445371, 1.0],
        ];
        for r in 0..4 {
            for c in 0..4 {
                assert_relative_eq!(a_d[(r, c)], expect_a[r][c], epsilon = 1e-12, max_relative = 1e-12);
            }
        }

        let expect_step = [
            -0.030220358056235037,
            -0.028040294081512802,
            -0.25897116524810181,
            0.047051032738317348,
        ];
        let x = DVector::zeros(4);
        let u = DVector::from_vec(vec![0.1]);
        let w = DVector::zeros(4);
        let gamma = DVector::from_vec(vec![0.95]);
        let next = step_truth(&bench.models, 0, &gamma, &x, &u, &w).expect("step");
        for i in 0..4 {
            assert_relative_eq!(next[i], expect_step[i], epsilon = 1e-13, max_relative = 1e-12);
        }
    }

    #[test]
    fn serialized_benchmark_reloads_identically() {
        let bench = load_benchmark(benchmark_path()).expect("load");
        let json = bench.canonical_json().expect("serialize");
        let reloaded = build_benchmark(&ConfigFile::from_json_str(&json).expect("parse"))
            .expect("rebuild");
        assert_eq!(bench.models, reloaded.models);
        assert_eq!(bench.cost, reloaded.cost);
        assert_eq!(bench.scenario, reloaded.scenario);
        assert_eq!(bench.truth, reloaded.truth);
        assert_eq!(bench.rng_seed, reloaded.rng_seed);
        // A second serialization is byte-identical: the schema is a fixed
        // point after the first discretization.
        assert_eq!(json, reloaded.canonical_json().expect("serialize"));
    }

    #[test]
    fn missing_config_file_reports_the_path() {
        let err = load_benchmark("/nonexistent/nowhere.json").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("/nonexistent/nowhere.json"), "message was {msg:?}");
    }

    #[test]
    fn malformed_reals_name_the_offending_field() {
        let mut file =
            ConfigFile::from_json_str(&fs::read_to_string(benchmark_path()).expect("read"))
                .expect("parse");
        file.modes[1].prior_prob = "not-a-number".into();
        let err = build_benchmark(&file).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("modes[1].prior_prob"), "message was {msg:?}");
    }

    #[test]
    fn wrong_probability_mass_is_rejected_with_the_sum() {
        let mut file =
            ConfigFile::from_json_str(&fs::read_to_string(benchmark_path()).expect("read"))
                .expect("parse");
        file.modes[0].prior_prob = "0.7".into();
        file.modes[1].prior_prob = "0.2".into();
        let err = build_benchmark(&file).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mode probabilities sum to 0.9"), "message was {msg:?}");
    }

    #[test]
    fn zero_noise_covariance_is_rejected() {
        let mut file =
            ConfigFile::from_json_str(&fs::read_to_string(benchmark_path()).expect("read"))
                .expect("parse");
        let zero = MatrixJson {
            rows: 4,
            cols: 4,
            data: vec!["0".into(); 16],
        };
        file.modes[0].noise_cov = zero;
        let err = build_benchmark(&file).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("noise covariance not positive definite"), "message was {msg:?}");
    }

    #[test]
    fn dynamics_forms_are_mutually_exclusive() {
        let mut file =
            ConfigFile::from_json_str(&fs::read_to_string(benchmark_path()).expect("read"))
                .expect("parse");
        if let DynamicsJson::LinearInputGain { continuous, discrete } =
            &mut file.modes[0].dynamics
        {
            let c = continuous.clone().expect("continuous form");
            *discrete = Some(DiscreteJson { a: c.a.clone(), b: c.b.clone() });
        }
        assert!(build_benchmark(&file).is_err());

        let mut file =
            ConfigFile::from_json_str(&fs::read_to_string(benchmark_path()).expect("read"))
                .expect("parse");
        if let DynamicsJson::LinearInputGain { continuous, .. } = &mut file.modes[0].dynamics {
            *continuous = None;
        }
        assert!(build_benchmark(&file).is_err());
    }

    #[test]
    fn decimal_strings_round_trip_bitwise() {
        for v in [0.1, -1.2822, 1.0 / 3.0, 1e-6, 128.2, 0.0, -0.2, 50.0, f64::MIN_POSITIVE] {
            let s = format_real(v);
            let back = parse_real(&s, "test").expect("parse");
            assert_eq!(v.to_bits(), back.to_bits(), "{v} -> {s} -> {back}");
        }
    }
}
