//! Receding-horizon controllers.
//!
//! Two controllers share one step contract: update the joint belief with the
//! previously applied transition, draw fresh scenario samples, warm start
//! from the previous solution, minimize the finite-horizon objective over
//! the admissible input box, and apply the first planned input. The dual
//! controller optimizes over a branching scenario tree whose in-prediction
//! belief updates reward informative inputs; the certainty-equivalent
//! baseline optimizes a single input sequence against the mode mixture with
//! beliefs frozen at their current values.

use std::time::Instant;

use nalgebra::DVector;

use crate::belief::{full_update, BeliefState};
use crate::config::{Benchmark, ModeWeighting};
use crate::error::{Error, Result};
use crate::objective::{mode_branch_cost, total_objective, ControlPlan, FAILURE_VALUE};
use crate::optimizer::{minimize, Bounds};
use crate::tree::{SampleBank, TreeNode, TreeTopology};

/// Which controller to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    /// Dual controller: plans over the branching scenario tree.
    Dual,
    /// Certainty-equivalent baseline: plans one sequence with frozen beliefs.
    CertaintyEquivalent,
}

impl ControllerKind {
    pub fn label(&self) -> &'static str {
        match self {
            ControllerKind::Dual => "dmpc",
            ControllerKind::CertaintyEquivalent => "cempc",
        }
    }
}

/// Open-loop solution carried between steps for warm starting.
#[derive(Debug, Clone)]
enum Plan {
    Tree(ControlPlan),
    Sequence(Vec<DVector<f64>>),
}

impl Plan {
    fn first_input(&self) -> &DVector<f64> {
        match self {
            Plan::Tree(plan) => plan.first_input(),
            Plan::Sequence(seq) => &seq[0],
        }
    }
}

/// Per-step solver and objective report.
#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    /// Objective value of the applied plan (NaN when the solver failed).
    pub objective: f64,
    pub iterations: usize,
    pub objective_evals: usize,
    pub kkt_residual: f64,
    pub converged: bool,
    /// True when the solver produced no usable plan and the warm start was
    /// applied unchanged.
    pub solver_failed: bool,
    /// Wall-clock duration of the whole controller step, in milliseconds.
    /// Informational only; excluded from serialized logs.
    pub wall_ms: f64,
}

/// Applied input and the diagnostics of the step that produced it.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub input: DVector<f64>,
    pub diagnostics: StepDiagnostics,
}

/// Shift a sequence one step forward, repeating the final input.
pub fn shift_sequence(previous: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let last = previous.len() - 1;
    (0..previous.len()).map(|t| previous[(t + 1).min(last)].clone()).collect()
}

/// Warm start a tree plan after the horizon moved one step: the stage-one
/// branches of the preferred (most probable) mode are promoted to the root.
/// The new root input averages those branches' first inputs over the
/// scenario samples, and each new branch shifts the matching old branch —
/// same sample index, same branch mode — one step forward.
///
/// Only defined for a tree that branches exactly once at stage zero; callers
/// with other shapes reuse the previous plan unchanged.
pub fn promote_tree_plan(
    topology: &TreeTopology,
    previous: &ControlPlan,
    preferred_mode: usize,
) -> ControlPlan {
    debug_assert_eq!(topology.schedule, vec![0]);
    let n_s = topology.num_samples;
    let n_m = topology.num_modes;
    let old_branch =
        |sample: usize, mode: usize| &previous.exploitation_inputs[(preferred_mode * n_s + sample) * n_m + mode];

    let mut root = DVector::zeros(previous.first_input().len());
    for s in 0..n_s {
        root += &old_branch(s, preferred_mode)[0];
    }
    root /= n_s as f64;

    let mut exploitation_inputs = Vec::with_capacity(n_s * n_m * n_m);
    for node in 0..n_s * n_m {
        let sample = node % n_s;
        for mode in 0..n_m {
            exploitation_inputs.push(shift_sequence(old_branch(sample, mode)));
        }
    }
    ControlPlan { dual_inputs: vec![vec![root]], exploitation_inputs }
}

/// One controller instance bound to a benchmark, holding the evolving
/// belief and warm-start state of a single closed-loop run.
pub struct Controller<'a> {
    bench: &'a Benchmark,
    kind: ControllerKind,
    /// Box constraints tiled over all decision variables of one plan.
    plan_bounds: Bounds,
    /// Box constraints on a single applied input.
    input_bounds: Bounds,
    belief: BeliefState,
    previous_plan: Option<Plan>,
    previous_io: Option<(DVector<f64>, DVector<f64>)>,
    step_index: usize,
}

impl<'a> Controller<'a> {
    pub fn new(bench: &'a Benchmark, kind: ControllerKind) -> Result<Self> {
        let topology = &bench.scenario.topology;
        if kind == ControllerKind::Dual && topology.dual_end() == 0 {
            return Err(Error::Config(
                "dual controller requires at least one branching stage (dual_horizon >= 1)".into(),
            ));
        }
        let n_u = bench.models.n_u;
        let blocks = match kind {
            ControllerKind::Dual => topology.decision_count(n_u) / n_u,
            ControllerKind::CertaintyEquivalent => topology.horizon,
        };
        let plan_bounds =
            Bounds::tile(&bench.models.input_lower, &bench.models.input_upper, blocks)?;
        let input_bounds =
            Bounds::new(bench.models.input_lower.clone(), bench.models.input_upper.clone())?;
        Ok(Controller {
            bench,
            kind,
            plan_bounds,
            input_bounds,
            belief: BeliefState::from_priors(&bench.models),
            previous_plan: None,
            previous_io: None,
            step_index: 0,
        })
    }

    pub fn kind(&self) -> ControllerKind {
        self.kind
    }

    /// Belief after the most recent step's measurement update.
    pub fn belief(&self) -> &BeliefState {
        &self.belief
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    fn cold_plan(&self) -> Plan {
        match self.kind {
            ControllerKind::Dual => {
                let zeros =
                    ControlPlan::zeros(&self.bench.scenario.topology, self.bench.models.n_u);
                let flat = self.plan_bounds.project(&zeros.flatten());
                Plan::Tree(
                    ControlPlan::from_flat(
                        &self.bench.scenario.topology,
                        self.bench.models.n_u,
                        &flat,
                    )
                    .expect("zero plan has the right shape"),
                )
            }
            ControllerKind::CertaintyEquivalent => {
                let zero = self.input_bounds.project(&DVector::zeros(self.bench.models.n_u));
                Plan::Sequence(vec![zero; self.bench.scenario.topology.horizon])
            }
        }
    }

    /// Starting plan for the current step: the previous solution advanced by
    /// one step when warm starts are enabled, zeros otherwise.
    fn starting_plan(&self) -> Plan {
        if !self.bench.scenario.warm_start {
            return self.cold_plan();
        }
        let Some(previous) = &self.previous_plan else {
            return self.cold_plan();
        };
        match previous {
            Plan::Sequence(seq) => Plan::Sequence(shift_sequence(seq)),
            Plan::Tree(plan) => {
                let topology = &self.bench.scenario.topology;
                if topology.schedule == vec![0] {
                    Plan::Tree(promote_tree_plan(
                        topology,
                        plan,
                        self.belief.most_probable_mode(),
                    ))
                } else {
                    // No promotion rule for deeper or deferred branchings;
                    // the previous plan is still a feasible starting point.
                    Plan::Tree(plan.clone())
                }
            }
        }
    }

    /// One controller step at measured state `x`: fold the previously
    /// applied transition into the belief, re-plan, and return the input to
    /// apply. A solver breakdown falls back to the warm-start input and is
    /// flagged; a belief-update breakdown is an error for the caller.
    pub fn step(&mut self, run_seed: u64, x: &DVector<f64>) -> Result<StepResult> {
        let started = Instant::now();
        if let Some((prev_x, prev_u)) = &self.previous_io {
            self.belief = full_update(
                &self.belief,
                &self.bench.models,
                &self.bench.scenario.caps,
                prev_x,
                prev_u,
                x,
            )?;
        }
        let start = self.starting_plan();
        let (plan, mut diagnostics, _failed) = self.solve(run_seed, x, start);
        let input = self.input_bounds.project(plan.first_input());
        self.previous_plan = Some(plan);
        self.previous_io = Some((x.clone(), input.clone()));
        self.step_index += 1;
        diagnostics.wall_ms = started.elapsed().as_secs_f64() * 1e3;
        Ok(StepResult { input, diagnostics })
    }

    fn solve(
        &self,
        run_seed: u64,
        x: &DVector<f64>,
        start: Plan,
    ) -> (Plan, StepDiagnostics, bool) {
        let bench = self.bench;
        let models = &bench.models;
        let cost = &bench.cost;
        let scenario = &bench.scenario;
        let topology = &scenario.topology;
        let n_u = models.n_u;
        let time_offset = self.step_index;

        match (&self.kind, start) {
            (ControllerKind::Dual, start) => {
                let bank = match SampleBank::for_step(
                    topology,
                    models,
                    run_seed,
                    self.step_index,
                ) {
                    Ok(b) => b,
                    Err(_) => {
                        let diag = failed_diagnostics();
                        return (start, diag, true);
                    }
                };
                let belief = &self.belief;
                let objective = |flat: &DVector<f64>| -> f64 {
                    let Ok(plan) = ControlPlan::from_flat(topology, n_u, flat) else {
                        return FAILURE_VALUE;
                    };
                    match total_objective(
                        models,
                        cost,
                        &scenario.caps,
                        topology,
                        &bank,
                        &scenario.objective,
                        x,
                        belief,
                        &plan,
                        time_offset,
                    ) {
                        Ok(v) => v.value,
                        Err(_) => FAILURE_VALUE,
                    }
                };
                let Plan::Tree(start_plan) = start else {
                    unreachable!("dual controller always carries a tree plan")
                };
                match minimize(&objective, &self.plan_bounds, &start_plan.flatten(), &scenario.solver)
                {
                    Ok(report) => {
                        let plan = ControlPlan::from_flat(topology, n_u, &report.best_plan)
                            .expect("solver preserves the decision dimension");
                        (Plan::Tree(plan), report_diagnostics(&report), false)
                    }
                    Err(_) => (Plan::Tree(start_plan), failed_diagnostics(), true),
                }
            }
            (ControllerKind::CertaintyEquivalent, start) => {
                let root = TreeNode {
                    state: x.clone(),
                    belief: self.belief.clone(),
                    weight: 1.0,
                    mode_index: None,
                };
                let weights: Vec<f64> = match scenario.cempc_mode_weighting {
                    ModeWeighting::Posterior => self.belief.mode_probs.clone(),
                    ModeWeighting::MostLikely => {
                        let mut w = vec![0.0; models.n_modes()];
                        w[self.belief.most_probable_mode()] = 1.0;
                        w
                    }
                };
                let horizon = topology.horizon;
                let objective = |flat: &DVector<f64>| -> f64 {
                    let sequence: Vec<DVector<f64>> =
                        (0..horizon).map(|t| flat.rows(t * n_u, n_u).into_owned()).collect();
                    let mut total = 0.0;
                    for (mode, w) in weights.iter().enumerate() {
                        if *w == 0.0 {
                            continue;
                        }
                        match mode_branch_cost(
                            models,
                            cost,
                            &scenario.objective,
                            &root,
                            mode,
                            &sequence,
                            time_offset,
                        ) {
                            Ok(c) => total += w * c,
                            Err(_) => return FAILURE_VALUE,
                        }
                    }
                    if total.is_finite() {
                        total
                    } else {
                        FAILURE_VALUE
                    }
                };
                let Plan::Sequence(start_seq) = start else {
                    unreachable!("baseline controller always carries a sequence")
                };
                let flat_start = stack_sequence(&start_seq);
                match minimize(&objective, &self.plan_bounds, &flat_start, &scenario.solver) {
                    Ok(report) => {
                        let sequence = (0..horizon)
                            .map(|t| report.best_plan.rows(t * n_u, n_u).into_owned())
                            .collect();
                        (Plan::Sequence(sequence), report_diagnostics(&report), false)
                    }
                    Err(_) => (Plan::Sequence(start_seq), failed_diagnostics(), true),
                }
            }
        }
    }
}

fn stack_sequence(sequence: &[DVector<f64>]) -> DVector<f64> {
    let n_u = sequence[0].len();
    let mut flat = DVector::zeros(sequence.len() * n_u);
    for (t, u) in sequence.iter().enumerate() {
        flat.rows_mut(t * n_u, n_u).copy_from(u);
    }
    flat
}

fn report_diagnostics(report: &crate::optimizer::SolveReport) -> StepDiagnostics {
    StepDiagnostics {
        objective: report.best_value,
        iterations: report.iterations,
        objective_evals: report.objective_evals,
        kkt_residual: report.kkt_residual,
        converged: report.converged,
        solver_failed: false,
        wall_ms: 0.0,
    }
}

fn failed_diagnostics() -> StepDiagnostics {
    StepDiagnostics {
        objective: f64::NAN,
        iterations: 0,
        objective_evals: 0,
        kkt_residual: f64::NAN,
        converged: false,
        solver_failed: true,
        wall_ms: 0.0,
    }
}
