//! Self-checks behind the `validate` subcommand.
//!
//! Each check exercises one load-bearing invariant of a loaded benchmark —
//! serialization fixed point, belief normalization, tree weight
//! conservation, objective determinism, and a short solver run — and
//! reports pass/fail with a one-line detail.

use dualmpc::belief::{full_update, BeliefState};
use dualmpc::config::{Benchmark, ConfigFile};
use dualmpc::objective::{total_objective, ControlPlan};
use dualmpc::optimizer::{minimize, Bounds, SolverConfig};
use dualmpc::tree::{expand, SampleBank};
use dualmpc::Result;
use nalgebra::DVector;

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, run: impl FnOnce() -> Result<String>) -> Check {
    match run() {
        Ok(detail) => Check { name, passed: true, detail },
        Err(e) => Check { name, passed: false, detail: e.to_string() },
    }
}

fn fail(msg: String) -> dualmpc::Error {
    dualmpc::Error::Config(msg)
}

/// Run every check against a loaded benchmark.
pub fn run_all(bench: &Benchmark) -> Vec<Check> {
    let mut checks = Vec::new();

    checks.push(check("config-round-trip", || {
        let json = bench.canonical_json()?;
        let reloaded = dualmpc::config::build_benchmark(&ConfigFile::from_json_str(&json)?)?;
        if reloaded.models != bench.models
            || reloaded.cost != bench.cost
            || reloaded.scenario != bench.scenario
            || reloaded.truth != bench.truth
        {
            return Err(fail("reloaded benchmark differs from the original".into()));
        }
        if reloaded.canonical_json()? != json {
            return Err(fail("serialization is not a fixed point".into()));
        }
        Ok("serialization round-trips to an identical benchmark".into())
    }));

    checks.push(check("belief-update", || {
        let models = &bench.models;
        let caps = &bench.scenario.caps;
        let x = bench.truth.initial_state.clone();
        let u = models.input_upper.clone();
        let x_next = models.modes[0].predict_mean(&x, &u, &models.modes[0].prior_mean);
        let posterior = full_update(&BeliefState::from_priors(models), models, caps, &x, &u, &x_next)?;
        let sum: f64 = posterior.mode_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(fail(format!("posterior mode probabilities sum to {sum}")));
        }
        if posterior.mode_probs.iter().any(|p| *p < caps.p_min - 1e-15) {
            return Err(fail("a mode probability fell below the cap".into()));
        }
        Ok(format!(
            "posterior normalized ({} modes, mass error {:.1e})",
            posterior.n_modes(),
            (sum - 1.0).abs()
        ))
    }));

    checks.push(check("tree-weights", || {
        let models = &bench.models;
        let topology = &bench.scenario.topology;
        let bank = SampleBank::for_step(topology, models, bench.rng_seed, 0)?;
        let plan = ControlPlan::zeros(topology, models.n_u);
        let tree = expand(
            models,
            &bench.scenario.caps,
            topology,
            &bank,
            &bench.truth.initial_state,
            &BeliefState::from_priors(models),
            &plan.dual_inputs,
        )?;
        let mut worst = 0f64;
        for (k, stage) in tree.stages.iter().enumerate() {
            let sum: f64 = stage.iter().map(|n| n.weight).sum();
            let expected =
                (topology.num_samples as f64).powi(topology.branch_count_below(k) as i32);
            worst = worst.max((sum - expected).abs() / expected.max(1.0));
        }
        if worst > 1e-9 {
            return Err(fail(format!("stage weight sums deviate by {worst:.2e}")));
        }
        Ok(format!(
            "weights conserved across {} stages (worst relative error {worst:.1e})",
            tree.stages.len()
        ))
    }));

    checks.push(check("objective-determinism", || {
        let models = &bench.models;
        let topology = &bench.scenario.topology;
        let bank = SampleBank::for_step(topology, models, bench.rng_seed, 0)?;
        let plan = ControlPlan::zeros(topology, models.n_u);
        let belief = BeliefState::from_priors(models);
        let evaluate = || {
            total_objective(
                models,
                &bench.cost,
                &bench.scenario.caps,
                topology,
                &bank,
                &bench.scenario.objective,
                &bench.truth.initial_state,
                &belief,
                &plan,
                0,
            )
        };
        let first = evaluate()?;
        let second = evaluate()?;
        if first.failed {
            return Err(fail("objective hit its failure sentinel at the zero plan".into()));
        }
        if first.value.to_bits() != second.value.to_bits() {
            return Err(fail("repeated evaluation changed the objective value".into()));
        }
        Ok(format!("objective at the zero plan is {} (reproducible)", first.value))
    }));

    checks.push(check("solver-smoke", || {
        let models = &bench.models;
        let topology = &bench.scenario.topology;
        let bank = SampleBank::for_step(topology, models, bench.rng_seed, 0)?;
        let plan = ControlPlan::zeros(topology, models.n_u);
        let belief = BeliefState::from_priors(models);
        let bounds = Bounds::tile(
            &models.input_lower,
            &models.input_upper,
            topology.decision_count(models.n_u) / models.n_u,
        )?;
        let objective = |flat: &DVector<f64>| -> f64 {
            let Ok(plan) = ControlPlan::from_flat(topology, models.n_u, flat) else {
                return dualmpc::objective::FAILURE_VALUE;
            };
            total_objective(
                models,
                &bench.cost,
                &bench.scenario.caps,
                topology,
                &bank,
                &bench.scenario.objective,
                &bench.truth.initial_state,
                &belief,
                &plan,
                0,
            )
            .map_or(dualmpc::objective::FAILURE_VALUE, |v| v.value)
        };
        let config = SolverConfig { max_iters: 3, ..bench.scenario.solver.clone() };
        let report = minimize(&objective, &bounds, &plan.flatten(), &config)?;
        if !report.best_value.is_finite() {
            return Err(fail("solver returned a non-finite objective".into()));
        }
        if !bounds.contains(&report.best_plan) {
            return Err(fail("solver left the admissible input box".into()));
        }
        Ok(format!(
            "{} iterations reduced the objective to {:.6} within bounds",
            report.iterations, report.best_value
        ))
    }));

    checks
}
