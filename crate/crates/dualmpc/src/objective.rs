//! Scenario-tree objective: probability-weighted stage costs over the dual
//! part of the tree plus, from each node after the last branching stage,
//! a mode-probability-weighted exploitation cost-to-go.
//!
//! Each (node, mode) exploitation branch carries its own input sequence and
//! is rolled out with that mode's posterior parameter mean either as a plain
//! mean recursion (certainty equivalence) or as a first-order mean/covariance
//! recursion over the state extended with the constant parameters. Both
//! propagations share the identical mean code path, so their predicted means
//! agree bit for bit. Non-finite evaluations return a large sentinel value
//! with a failure flag instead of an error, which lets line searches back
//! away from divergent iterates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::belief::{BeliefState, CapConfig};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{CostSpec, ModelSet};
use crate::tree::{self, SampleBank, TreeNode, TreeTopology};

/// Sentinel returned (with the failure flag) when an evaluation leaves the
/// realm of finite numbers.
pub const FAILURE_VALUE: f64 = 1e12;

/// How exploitation branches propagate the state forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    /// Iterate the mean map at the posterior parameter mean.
    CertaintyEquivalence,
    /// Propagate mean and covariance of the parameter-extended state with a
    /// first-order expansion.
    TaylorMoments,
}

/// Which expectation of the quadratic stage cost is accumulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostExpectation {
    /// Cost of the propagated mean only.
    MeanOnly,
    /// Mean cost plus the `tr(Q·Σ_x)` correction from propagated covariances.
    MeanPlusTrace,
}

/// Objective evaluation options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub propagation: Propagation,
    pub cost_expectation: CostExpectation,
}

impl ObjectiveConfig {
    /// Plain certainty-equivalence evaluation (the default).
    pub fn certainty_equivalence() -> Self {
        ObjectiveConfig {
            propagation: Propagation::CertaintyEquivalence,
            cost_expectation: CostExpectation::MeanOnly,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cost_expectation == CostExpectation::MeanPlusTrace
            && self.propagation != Propagation::TaylorMoments
        {
            return Err(Error::Config(
                "cost expectation mean_plus_trace needs taylor_moments propagation".into(),
            ));
        }
        Ok(())
    }
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self::certainty_equivalence()
    }
}

/// Mean and covariance of the parameter-extended state `(x; γ)` along an
/// exploitation branch.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl MomentState {
    /// State block of the mean.
    pub fn state_mean(&self, n_x: usize) -> DVector<f64> {
        self.mean.rows(0, n_x).into_owned()
    }

    /// State block of the covariance.
    pub fn state_cov(&self, n_x: usize) -> DMatrix<f64> {
        self.cov.view((0, 0), (n_x, n_x)).into_owned()
    }
}

/// Decision variables of one optimization: an input per tree node at every
/// stage before `dual_end`, then an input sequence per (node, mode) branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPlan {
    /// `dual_inputs[k][node]` for stages `k = 0..dual_end`.
    pub dual_inputs: Vec<Vec<DVector<f64>>>,
    /// `exploitation_inputs[branch][t]` where
    /// `branch = node·n_m + mode` over nodes at stage `dual_end` and
    /// `t = 0..horizon - dual_end`.
    pub exploitation_inputs: Vec<Vec<DVector<f64>>>,
}

impl ControlPlan {
    /// All-zero plan of the right shape.
    pub fn zeros(topology: &TreeTopology, n_u: usize) -> Self {
        let dual_inputs = (0..topology.dual_end())
            .map(|k| vec![DVector::zeros(n_u); topology.nodes_at(k)])
            .collect();
        let branches = topology.num_modes * topology.nodes_at(topology.dual_end());
        let tail = topology.horizon - topology.dual_end();
        ControlPlan {
            dual_inputs,
            exploitation_inputs: vec![vec![DVector::zeros(n_u); tail]; branches],
        }
    }

    /// Number of exploitation branches (stage-`dual_end` nodes times modes).
    pub fn branch_count(topology: &TreeTopology) -> usize {
        topology.num_modes * topology.nodes_at(topology.dual_end())
    }

    pub fn validate_shape(&self, topology: &TreeTopology, n_u: usize) -> Result<()> {
        let dual_end = topology.dual_end();
        if self.dual_inputs.len() != dual_end {
            return Err(Error::Dimension(format!(
                "plan has {} dual stages, topology needs {dual_end}",
                self.dual_inputs.len()
            )));
        }
        for (k, stage) in self.dual_inputs.iter().enumerate() {
            if stage.len() != topology.nodes_at(k) {
                return Err(Error::Dimension(format!(
                    "plan stage {k} has {} inputs, tree has {} nodes",
                    stage.len(),
                    topology.nodes_at(k)
                )));
            }
            if stage.iter().any(|u| u.len() != n_u) {
                return Err(Error::Dimension(format!("plan stage {k} input dimension is not {n_u}")));
            }
        }
        let branches = Self::branch_count(topology);
        let tail = topology.horizon - dual_end;
        if self.exploitation_inputs.len() != branches {
            return Err(Error::Dimension(format!(
                "plan has {} exploitation sequences, tree has {branches} branches",
                self.exploitation_inputs.len()
            )));
        }
        for (b, seq) in self.exploitation_inputs.iter().enumerate() {
            if seq.len() != tail {
                return Err(Error::Dimension(format!(
                    "exploitation sequence {b} has {} steps, horizon tail is {tail}",
                    seq.len()
                )));
            }
            if seq.iter().any(|u| u.len() != n_u) {
                return Err(Error::Dimension(format!(
                    "exploitation sequence {b} input dimension is not {n_u}"
                )));
            }
        }
        Ok(())
    }

    /// Flatten to a single vector: dual stages ascending (nodes ascending,
    /// components in order), then exploitation branches ascending (steps
    /// ascending). Inverse of [`ControlPlan::from_flat`].
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::new();
        for stage in &self.dual_inputs {
            for u in stage {
                out.extend(u.iter().copied());
            }
        }
        for seq in &self.exploitation_inputs {
            for u in seq {
                out.extend(u.iter().copied());
            }
        }
        DVector::from_vec(out)
    }

    /// Rebuild a plan from its flat representation.
    pub fn from_flat(topology: &TreeTopology, n_u: usize, flat: &DVector<f64>) -> Result<Self> {
        let expect = topology.decision_count(n_u);
        if flat.len() != expect {
            return Err(Error::Dimension(format!(
                "flat plan has {} entries, topology needs {expect}",
                flat.len()
            )));
        }
        let mut plan = ControlPlan::zeros(topology, n_u);
        let mut idx = 0;
        for stage in &mut plan.dual_inputs {
            for u in stage {
                for c in 0..n_u {
                    u[c] = flat[idx];
                    idx += 1;
                }
            }
        }
        for seq in &mut plan.exploitation_inputs {
            for u in seq {
                for c in 0..n_u {
                    u[c] = flat[idx];
                    idx += 1;
                }
            }
        }
        Ok(plan)
    }

    /// The input the controller would apply now: the root node's input, or
    /// the first input of the first branch when no stage branches.
    pub fn first_input(&self) -> &DVector<f64> {
        if let Some(stage) = self.dual_inputs.first() {
            &stage[0]
        } else {
            &self.exploitation_inputs[0][0]
        }
    }
}

/// Certainty-equivalence rollout of one mode branch: returns the predicted
/// mean states `[x_0, …, x_T]` starting from the node's state, holding the
/// parameter at the node's posterior mean for that mode.
pub fn ce_propagate(
    models: &ModelSet,
    node: &TreeNode,
    mode_index: usize,
    inputs: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    let n_m = models.n_modes();
    if mode_index >= n_m {
        return Err(Error::Config(format!("mode index {mode_index} out of range ({n_m} modes)")));
    }
    let mode = &models.modes[mode_index];
    let gamma = &node.belief.params[mode_index].mean;
    let mut means = Vec::with_capacity(inputs.len() + 1);
    means.push(node.state.clone());
    for u in inputs {
        let next = mode.predict_mean(means.last().expect("nonempty"), u, gamma);
        means.push(next);
    }
    Ok(means)
}

/// First-order mean/covariance rollout of one mode branch over the
/// parameter-extended state `(x; γ)`.
///
/// The extended mean starts at `(x_node; μ_γ)` with covariance
/// `blkdiag(0, Σ_γ)`; each step maps the mean through the identical mean
/// recursion as [`ce_propagate`] and the covariance through
/// `Ā·Σ·Āᵀ + blkdiag(Σ_w, 0)` with the block Jacobian
/// `Ā = [[∂x'(x,u,γ), Φ(x,u)], [0, I]]`.
pub fn taylor_propagate(
    models: &ModelSet,
    node: &TreeNode,
    mode_index: usize,
    inputs: &[DVector<f64>],
) -> Result<Vec<MomentState>> {
    let n_m = models.n_modes();
    if mode_index >= n_m {
        return Err(Error::Config(format!("mode index {mode_index} out of range ({n_m} modes)")));
    }
    let mode = &models.modes[mode_index];
    let n_x = models.n_x;
    let n_g = mode.n_gamma();
    let n = n_x + n_g;
    let belief = &node.belief.params[mode_index];

    let mut mean = DVector::zeros(n);
    mean.rows_mut(0, n_x).copy_from(&node.state);
    mean.rows_mut(n_x, n_g).copy_from(&belief.mean);
    let mut cov = DMatrix::zeros(n, n);
    cov.view_mut((n_x, n_x), (n_g, n_g)).copy_from(&belief.cov);

    let mut out = Vec::with_capacity(inputs.len() + 1);
    out.push(MomentState { mean: mean.clone(), cov: cov.clone() });

    for u in inputs {
        let x = mean.rows(0, n_x).into_owned();
        let gamma = mean.rows(n_x, n_g).into_owned();
        let jac = mode.jacobian_x(&x, u, &gamma);
        let phi = mode.basis.eval(&x, u);

        let mut abar = DMatrix::zeros(n, n);
        abar.view_mut((0, 0), (n_x, n_x)).copy_from(&jac);
        abar.view_mut((0, n_x), (n_x, n_g)).copy_from(&phi);
        abar
            .view_mut((n_x, n_x), (n_g, n_g))
            .copy_from(&DMatrix::identity(n_g, n_g));

        let next_x = mode.predict_mean(&x, u, &gamma);
        mean.rows_mut(0, n_x).copy_from(&next_x);
        // Parameter block of the mean is constant.

        let mut next_cov = &abar * &cov * abar.transpose();
        next_cov
            .view_mut((0, 0), (n_x, n_x))
            .zip_apply(&mode.noise_cov, |c, w| *c += w);
        cov = linalg::symmetrize(&next_cov);

        out.push(MomentState { mean: mean.clone(), cov: cov.clone() });
    }
    Ok(out)
}

/// Cost of one (node, mode) exploitation branch under its input sequence:
/// stage costs from the node's stage onward plus the terminal cost, using
/// the configured propagation. `start_stage` is the absolute time index of
/// the node's stage (references are looked up per absolute time).
pub fn mode_branch_cost(
    models: &ModelSet,
    cost: &CostSpec,
    cfg: &ObjectiveConfig,
    node: &TreeNode,
    mode_index: usize,
    inputs: &[DVector<f64>],
    start_stage: usize,
) -> Result<f64> {
    let n_x = models.n_x;
    match cfg.propagation {
        Propagation::CertaintyEquivalence => {
            let n_m = models.n_modes();
            if mode_index >= n_m {
                return Err(Error::Config(format!("mode index {mode_index} out of range ({n_m} modes)")));
            }
            // Fused rollout + cost accumulation: this is the innermost loop of
            // every objective evaluation, so it runs in two swap buffers
            // instead of materialising the predicted trajectory.
            let mode = &models.modes[mode_index];
            let gamma = &node.belief.params[mode_index].mean;
            let mut x = node.state.clone();
            let mut x_next = DVector::zeros(n_x);
            let mut total = 0.0;
            for (t, u) in inputs.iter().enumerate() {
                total += cost.stage_cost(start_stage + t, &x, u);
                mode.predict_mean_into(&x, u, gamma, &mut x_next);
                std::mem::swap(&mut x, &mut x_next);
            }
            total += cost.terminal_cost(start_stage + inputs.len(), &x);
            Ok(total)
        }
        Propagation::TaylorMoments => {
            let moments = taylor_propagate(models, node, mode_index, inputs)?;
            let trace_on = cfg.cost_expectation == CostExpectation::MeanPlusTrace;
            let mut total = 0.0;
            for (t, u) in inputs.iter().enumerate() {
                let x = moments[t].state_mean(n_x);
                total += cost.stage_cost(start_stage + t, &x, u);
                if trace_on {
                    total += (&cost.q * moments[t].state_cov(n_x)).trace();
                }
            }
            let last = &moments[inputs.len()];
            total += cost.terminal_cost(start_stage + inputs.len(), &last.state_mean(n_x));
            if trace_on {
                total += (&cost.q_terminal * last.state_cov(n_x)).trace();
            }
            Ok(total)
        }
    }
}

/// Mode-probability-weighted exploitation cost-to-go from one node after the
/// last branching stage: `Σ_m p(M_m | node belief) · branch cost under the
/// mode's own input sequence`.
pub fn exploitation_cost(
    models: &ModelSet,
    cost: &CostSpec,
    cfg: &ObjectiveConfig,
    node: &TreeNode,
    sequences: &[Vec<DVector<f64>>],
    start_stage: usize,
) -> Result<f64> {
    let n_m = models.n_modes();
    if sequences.len() != n_m {
        return Err(Error::Dimension(format!(
            "{} exploitation sequences for {n_m} modes",
            sequences.len()
        )));
    }
    let mut total = 0.0;
    for (m, seq) in sequences.iter().enumerate() {
        let p = node.belief.mode_probs[m];
        if p != 0.0 {
            total += p * mode_branch_cost(models, cost, cfg, node, m, seq, start_stage)?;
        }
    }
    Ok(total)
}

/// Value of one objective evaluation. `failed` marks evaluations that left
/// finite arithmetic and were replaced by [`FAILURE_VALUE`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub failed: bool,
}

impl ObjectiveValue {
    fn failure() -> Self {
        ObjectiveValue { value: FAILURE_VALUE, failed: true }
    }
}

/// Evaluate the full objective of a plan from a root state and belief at
/// absolute time `time_offset`.
///
/// The tree is expanded under the plan's dual inputs; stage `k < dual_end`
/// accumulates `Σ_nodes (p̄/N_s^{b(k)})·l(x, u)` and each stage-`dual_end`
/// node adds `(p̄/N_s^{b(dual_end)})` times its exploitation cost-to-go.
/// Numeric breakdowns (indefinite innovation covariances on absurd iterates,
/// non-finite costs) yield the failure sentinel rather than an error.
#[allow(clippy::too_many_arguments)]
pub fn total_objective(
    models: &ModelSet,
    cost: &CostSpec,
    caps: &CapConfig,
    topology: &TreeTopology,
    bank: &SampleBank,
    cfg: &ObjectiveConfig,
    root_state: &DVector<f64>,
    root_belief: &BeliefState,
    plan: &ControlPlan,
    time_offset: usize,
) -> Result<ObjectiveValue> {
    cfg.validate()?;
    plan.validate_shape(topology, models.n_u)?;

    let scenario_tree =
        match tree::expand(models, caps, topology, bank, root_state, root_belief, &plan.dual_inputs)
        {
            Ok(t) => t,
            Err(Error::Numeric(_)) => return Ok(ObjectiveValue::failure()),
            Err(e) => return Err(e),
        };

    let dual_end = topology.dual_end();
    let mut value = 0.0;
    for k in 0..dual_end {
        let norm = (topology.num_samples as f64).powi(topology.branch_count_below(k) as i32);
        for (node, u) in scenario_tree.stages[k].iter().zip(&plan.dual_inputs[k]) {
            value += node.weight / norm * cost.stage_cost(time_offset + k, &node.state, u);
        }
    }

    let norm = (topology.num_samples as f64).powi(topology.branch_count_below(dual_end) as i32);
    let n_m = topology.num_modes;
    for (j, node) in scenario_tree.stages[dual_end].iter().enumerate() {
        let sequences = &plan.exploitation_inputs[j * n_m..(j + 1) * n_m];
        let tail = match exploitation_cost(
            models,
            cost,
            cfg,
            node,
            sequences,
            time_offset + dual_end,
        ) {
            Ok(c) => c,
            Err(Error::Numeric(_)) => return Ok(ObjectiveValue::failure()),
            Err(e) => return Err(e),
        };
        value += node.weight / norm * tail;
    }

    if value.is_finite() {
        Ok(ObjectiveValue { value, failed: false })
    } else {
        Ok(ObjectiveValue::failure())
    }
}
