//! Scenario tree over modes and sampled parameters.
//!
//! The first `dual_horizon` branching stages split every node into one child
//! per (mode, parameter sample) pair; each child carries the state predicted
//! under its hypothesis, the Bayes-updated belief an observer would hold
//! after seeing that transition, and the branch probability. Stages inside
//! the dual window that are not scheduled to branch propagate a single
//! probability-weighted mean per node with the belief frozen. Sampling goes
//! through a [`SampleBank`] drawn once per controller step, so every
//! objective evaluation within one optimization sees the same random numbers
//! and the objective is a smooth deterministic function of the inputs.

use nalgebra::DVector;

use crate::belief::{self, BeliefState, CapConfig, GaussianBelief};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::ModelSet;
use crate::rng::{self, TAG_BANK};

/// Hard cap on the number of tree scenarios, guarding against configs whose
/// branching factor and horizon would exhaust memory.
const MAX_SCENARIOS: usize = 1 << 24;

/// Static shape of the scenario tree: which stages branch and how wide.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeTopology {
    /// Prediction horizon `N` (stages `0..N` carry inputs).
    pub horizon: usize,
    /// Number of branching stages `L`.
    pub dual_horizon: usize,
    /// Parameter samples per mode at each branching stage.
    pub num_samples: usize,
    /// Number of candidate modes.
    pub num_modes: usize,
    /// Sorted branching stages; defaults to `0..L`.
    pub schedule: Vec<usize>,
}

impl TreeTopology {
    /// Build and validate a topology. `schedule = None` branches at the
    /// first `dual_horizon` stages.
    pub fn build(
        horizon: usize,
        dual_horizon: usize,
        num_samples: usize,
        num_modes: usize,
        schedule: Option<Vec<usize>>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("prediction horizon must be at least 1".into()));
        }
        if dual_horizon >= horizon {
            return Err(Error::Config(format!(
                "dual horizon {dual_horizon} must be smaller than prediction horizon {horizon}"
            )));
        }
        if num_modes == 0 {
            return Err(Error::Config("tree needs at least one mode".into()));
        }
        if num_samples == 0 && dual_horizon > 0 {
            return Err(Error::Config("branching stages need at least one parameter sample".into()));
        }
        let schedule = schedule.unwrap_or_else(|| (0..dual_horizon).collect());
        if schedule.len() != dual_horizon {
            return Err(Error::Config(format!(
                "branching schedule lists {} stages, dual horizon is {dual_horizon}",
                schedule.len()
            )));
        }
        if !schedule.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("branching schedule must be strictly increasing".into()));
        }
        if let Some(&last) = schedule.last() {
            if last >= horizon {
                return Err(Error::Config(format!(
                    "branching stage {last} lies beyond the last input stage {}",
                    horizon - 1
                )));
            }
        }
        let topo = TreeTopology { horizon, dual_horizon, num_samples, num_modes, schedule };
        match topo.branching_factor().checked_pow(dual_horizon as u32) {
            Some(n) if n <= MAX_SCENARIOS => Ok(topo),
            _ => Err(Error::Config(format!(
                "tree would have more than {MAX_SCENARIOS} scenarios ({}^{dual_horizon})",
                topo.branching_factor()
            ))),
        }
    }

    /// Children per node at a branching stage: one per (mode, sample) pair.
    pub fn branching_factor(&self) -> usize {
        self.num_samples * self.num_modes
    }

    /// Stage after the last branching stage; nodes exist at stages
    /// `0..=dual_end`, and one shared input sequence per `dual_end` node
    /// covers the remaining stages.
    pub fn dual_end(&self) -> usize {
        self.schedule.last().map_or(0, |s| s + 1)
    }

    /// Whether stage `k` splits its nodes.
    pub fn is_branching(&self, k: usize) -> bool {
        self.schedule.binary_search(&k).is_ok()
    }

    /// Number of branching stages strictly before stage `k`.
    pub fn branch_count_below(&self, k: usize) -> usize {
        self.schedule.partition_point(|&s| s < k)
    }

    /// Number of tree nodes at stage `k`.
    pub fn nodes_at(&self, k: usize) -> usize {
        self.branching_factor().pow(self.branch_count_below(k) as u32)
    }

    /// Number of leaves of the dual part (distinct futures considered).
    pub fn num_scenarios(&self) -> usize {
        self.branching_factor().pow(self.dual_horizon as u32)
    }

    /// Parent node index of child `j` at a branching transition.
    pub fn parent(&self, j: usize) -> usize {
        j / self.branching_factor()
    }

    /// Mode hypothesis of child `j` (children are mode-major, sample-minor).
    pub fn mode_of(&self, j: usize) -> usize {
        (j % self.branching_factor()) / self.num_samples
    }

    /// Sample slot of child `j` within its mode block.
    pub fn sample_of(&self, j: usize) -> usize {
        j % self.num_samples
    }

    /// Child index for (parent, mode, sample).
    pub fn child_index(&self, parent: usize, mode: usize, sample: usize) -> usize {
        parent * self.branching_factor() + mode * self.num_samples + sample
    }

    /// Total number of scalar decision variables for input dimension `n_u`:
    /// one input per node at each stage before `dual_end`, then one sequence
    /// of length `horizon - dual_end` per (`dual_end` node, mode) branch.
    pub fn decision_count(&self, n_u: usize) -> usize {
        let dual: usize = (0..self.dual_end()).map(|k| self.nodes_at(k)).sum();
        let branches = self.num_modes * self.nodes_at(self.dual_end());
        (dual + branches * (self.horizon - self.dual_end())) * n_u
    }
}

/// Standard-normal draws for every branching event of one controller step,
/// drawn once so repeated objective evaluations share them.
#[derive(Debug, Clone)]
pub struct SampleBank {
    /// `draws[b][child] = (parameter z, noise z)` for the `b`-th branching
    /// stage in the schedule; children are indexed as in the expanded tree.
    pub draws: Vec<Vec<(DVector<f64>, DVector<f64>)>>,
}

impl SampleBank {
    /// Draw a bank from an explicit generator, in a fixed order (branching
    /// stages ascending, children ascending, parameter before noise).
    pub fn draw(
        topology: &TreeTopology,
        models: &ModelSet,
        rng: &mut impl rand::Rng,
    ) -> Result<SampleBank> {
        if models.n_modes() != topology.num_modes {
            return Err(Error::Dimension(format!(
                "topology expects {} modes, model set has {}",
                topology.num_modes,
                models.n_modes()
            )));
        }
        let mut draws = Vec::with_capacity(topology.dual_horizon);
        for (b, &stage) in topology.schedule.iter().enumerate() {
            debug_assert_eq!(topology.branch_count_below(stage), b);
            let children = topology.nodes_at(stage) * topology.branching_factor();
            let mut stage_draws = Vec::with_capacity(children);
            for child in 0..children {
                let n_gamma = models.modes[topology.mode_of(child)].n_gamma();
                let z_param = rng::standard_normal_vector(rng, n_gamma);
                let z_noise = rng::standard_normal_vector(rng, models.n_x);
                stage_draws.push((z_param, z_noise));
            }
            draws.push(stage_draws);
        }
        Ok(SampleBank { draws })
    }

    /// Draw the bank for controller step `step` of the run seeded by
    /// `run_seed`, independent of every other stream in the simulation.
    pub fn for_step(
        topology: &TreeTopology,
        models: &ModelSet,
        run_seed: u64,
        step: usize,
    ) -> Result<SampleBank> {
        let mut rng = rng::chacha(rng::mix_seed(&[run_seed, step as u64, TAG_BANK]));
        Self::draw(topology, models, &mut rng)
    }
}

/// One node of the expanded tree.
#[derive(Debug, Clone)]
pub struct TreeNode {
    pub state: DVector<f64>,
    pub belief: BeliefState,
    /// Unnormalized branch probability: product of mode probabilities along
    /// the path from the root (the root has weight one).
    pub weight: f64,
    /// Mode hypothesis under which this node was generated (`None` at the
    /// root and across non-branching stages following it).
    pub mode_index: Option<usize>,
}

/// Expanded dual part of the scenario tree: `stages[k]` holds the nodes at
/// stage `k` for `k = 0..=dual_end`.
#[derive(Debug, Clone)]
pub struct ScenarioTree {
    pub stages: Vec<Vec<TreeNode>>,
}

/// Draw a parameter vector from a Gaussian belief using a standard-normal
/// vector `z`: `mean + sqrt(cov)·z`. A zero-covariance belief returns its
/// mean exactly.
pub fn param_sample(belief: &GaussianBelief, z: &DVector<f64>) -> Result<DVector<f64>> {
    if z.len() != belief.n() {
        return Err(Error::Dimension(format!(
            "normal draw has {} entries, belief has {}",
            z.len(),
            belief.n()
        )));
    }
    Ok(&belief.mean + linalg::psd_sqrt(&belief.cov)? * z)
}

/// Generate one child of `parent` under mode `mode`: sample a parameter from
/// the parent's belief, predict the next state with process noise, and run
/// the full Bayes update on the hypothesized transition.
pub fn branch_child(
    models: &ModelSet,
    caps: &CapConfig,
    parent: &TreeNode,
    mode: usize,
    u: &DVector<f64>,
    z_param: &DVector<f64>,
    z_noise: &DVector<f64>,
) -> Result<TreeNode> {
    let n_m = models.n_modes();
    if mode >= n_m {
        return Err(Error::Config(format!("mode index {mode} out of range ({n_m} modes)")));
    }
    let gamma = param_sample(&parent.belief.params[mode], z_param)?;
    let noise = linalg::chol_pd(&models.modes[mode].noise_cov, "process noise covariance")?
        .l()
        * z_noise;
    let state = models.modes[mode].predict_mean(&parent.state, u, &gamma) + noise;
    let belief = belief::full_update(&parent.belief, models, caps, &parent.state, u, &state)?;
    Ok(TreeNode {
        state,
        belief,
        weight: parent.weight * parent.belief.mode_probs[mode],
        mode_index: Some(mode),
    })
}

/// Expand the dual part of the tree from a root state and belief under the
/// given per-stage, per-node inputs (`dual_inputs[k][node]`).
pub fn expand(
    models: &ModelSet,
    caps: &CapConfig,
    topology: &TreeTopology,
    bank: &SampleBank,
    root_state: &DVector<f64>,
    root_belief: &BeliefState,
    dual_inputs: &[Vec<DVector<f64>>],
) -> Result<ScenarioTree> {
    let dual_end = topology.dual_end();
    if dual_inputs.len() != dual_end {
        return Err(Error::Dimension(format!(
            "dual inputs cover {} stages, tree needs {dual_end}",
            dual_inputs.len()
        )));
    }
    if bank.draws.len() != topology.dual_horizon {
        return Err(Error::Dimension(format!(
            "sample bank covers {} branching stages, topology has {}",
            bank.draws.len(),
            topology.dual_horizon
        )));
    }
    if root_state.len() != models.n_x {
        return Err(Error::Dimension(format!(
            "root state has {} entries, model has {} states",
            root_state.len(),
            models.n_x
        )));
    }

    let mut stages: Vec<Vec<TreeNode>> = Vec::with_capacity(dual_end + 1);
    stages.push(vec![TreeNode {
        state: root_state.clone(),
        belief: root_belief.clone(),
        weight: 1.0,
        mode_index: None,
    }]);

    for k in 0..dual_end {
        let parents = &stages[k];
        let inputs = &dual_inputs[k];
        if inputs.len() != parents.len() {
            return Err(Error::Dimension(format!(
                "stage {k} has {} nodes but {} inputs",
                parents.len(),
                inputs.len()
            )));
        }
        let next = if topology.is_branching(k) {
            let b = topology.branch_count_below(k);
            let stage_draws = &bank.draws[b];
            let expected = parents.len() * topology.branching_factor();
            if stage_draws.len() != expected {
                return Err(Error::Dimension(format!(
                    "sample bank stage {b} holds {} draws, stage {k} needs {expected}",
                    stage_draws.len()
                )));
            }
            let mut children = Vec::with_capacity(expected);
            for (p, parent) in parents.iter().enumerate() {
                for mode in 0..topology.num_modes {
                    for sample in 0..topology.num_samples {
                        let j = topology.child_index(p, mode, sample);
                        let (z_param, z_noise) = &stage_draws[j];
                        children.push(branch_child(
                            models, caps, parent, mode, &inputs[p], z_param, z_noise,
                        )?);
                    }
                }
            }
            children
        } else {
            // Deferred stage: no hypothesized observation, so the belief and
            // weight are carried through and the state advances by the
            // probability-weighted mean prediction over modes.
            parents
                .iter()
                .enumerate()
                .map(|(p, parent)| {
                    let mut state = DVector::zeros(models.n_x);
                    for (m, mode) in models.modes.iter().enumerate() {
                        let mean = mode.predict_mean(
                            &parent.state,
                            &inputs[p],
                            &parent.belief.params[m].mean,
                        );
                        state += parent.belief.mode_probs[m] * mean;
                    }
                    TreeNode {
                        state,
                        belief: parent.belief.clone(),
                        weight: parent.weight,
                        mode_index: parent.mode_index,
                    }
                })
                .collect()
        };
        stages.push(next);
    }
    Ok(ScenarioTree { stages })
}

impl ScenarioTree {
    /// Sum of node weights at each stored stage. With exact arithmetic the
    /// sum at stage `k` equals `num_samples^(branches below k)`.
    pub fn stage_weight_sums(&self) -> Vec<f64> {
        self.stages.iter().map(|nodes| nodes.iter().map(|n| n.weight).sum()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Basis, CostSpec, Drift, ModeModel};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn scalar_models(n_modes: usize, phi_zero: bool, probs: &[f64]) -> ModelSet {
        let modes = (0..n_modes)
            .map(|m| ModeModel {
                name: format!("m{m}"),
                drift: Drift::Linear { a: DMatrix::from_row_slice(1, 1, &[0.5]) },
                basis: if phi_zero {
                    Basis::zero(1, 1)
                } else {
                    Basis::input_gain(DMatrix::from_row_slice(1, 1, &[1.0]))
                },
                noise_cov: DMatrix::from_row_slice(1, 1, &[0.09]),
                prior_mean: DVector::from_vec(vec![0.4 + 0.3 * m as f64]),
                prior_cov: DMatrix::from_row_slice(1, 1, &[0.01]),
                prior_prob: probs[m],
            })
            .collect();
        ModelSet::new(
            modes,
            1,
            1,
            DVector::from_vec(vec![-1.0]),
            DVector::from_vec(vec![1.0]),
        )
        .expect("models")
    }

    fn free_caps(models: &ModelSet) -> CapConfig {
        CapConfig {
            p_min: 0.0,
            var_floor: models.modes.iter().map(|m| DVector::zeros(m.n_gamma())).collect(),
        }
    }

    fn uniform_inputs(topology: &TreeTopology, value: f64) -> Vec<Vec<DVector<f64>>> {
        (0..topology.dual_end())
            .map(|k| vec![DVector::from_vec(vec![value]); topology.nodes_at(k)])
            .collect()
    }

    #[test]
    fn default_schedule_node_counts_grow_by_branching_factor() {
        let topo = TreeTopology::build(20, 2, 2, 2, None).expect("topology");
        assert_eq!(topo.dual_end(), 2);
        assert_eq!(topo.branching_factor(), 4);
        assert_eq!((0..=2).map(|k| topo.nodes_at(k)).collect::<Vec<_>>(), vec![1, 4, 16]);
        assert_eq!(topo.num_scenarios(), 16);
        // One input per node before dual_end, then a length-18 sequence per
        // (node, mode) pair at the 16 stage-2 nodes.
        assert_eq!(topo.decision_count(1), 1 + 4 + 2 * 16 * 18);
    }

    #[test]
    fn one_branching_stage_decision_count() {
        let topo = TreeTopology::build(20, 1, 2, 2, None).expect("topology");
        assert_eq!(topo.decision_count(1), 1 + 2 * 4 * 19);
    }

    #[test]
    fn deferred_schedule_delays_branching() {
        let topo = TreeTopology::build(7, 2, 2, 2, Some(vec![2, 5])).expect("topology");
        assert_eq!(topo.dual_end(), 6);
        let counts: Vec<usize> = (0..=6).map(|k| topo.nodes_at(k)).collect();
        assert_eq!(counts, vec![1, 1, 1, 4, 4, 4, 16]);
        assert!(topo.is_branching(2) && topo.is_branching(5));
        assert!(!topo.is_branching(0) && !topo.is_branching(3));
    }

    #[test]
    fn topology_rejects_bad_shapes() {
        assert!(TreeTopology::build(5, 5, 2, 2, None).is_err());
        assert!(TreeTopology::build(5, 2, 2, 2, Some(vec![3, 1])).is_err());
        assert!(TreeTopology::build(5, 2, 2, 2, Some(vec![1, 6])).is_err());
        assert!(TreeTopology::build(5, 1, 2, 2, Some(vec![0, 1])).is_err());
        assert!(TreeTopology::build(64, 20, 10, 10, None).is_err());
    }

    #[test]
    fn child_indexing_round_trips() {
        let topo = TreeTopology::build(10, 2, 2, 2, None).expect("topology");
        assert_eq!(topo.parent(13), 3);
        assert_eq!(topo.mode_of(13), 0);
        assert_eq!(topo.sample_of(13), 1);
        for parent in 0..4 {
            for mode in 0..2 {
                for sample in 0..2 {
                    let j = topo.child_index(parent, mode, sample);
                    assert_eq!(topo.parent(j), parent);
                    assert_eq!(topo.mode_of(j), mode);
                    assert_eq!(topo.sample_of(j), sample);
                }
            }
        }
    }

    #[test]
    fn sample_bank_is_reproducible_and_shaped() {
        let topo = TreeTopology::build(6, 2, 3, 2, None).expect("topology");
        let models = scalar_models(2, false, &[0.6, 0.4]);
        let a = SampleBank::for_step(&topo, &models, 7, 3).expect("bank");
        let b = SampleBank::for_step(&topo, &models, 7, 3).expect("bank");
        let c = SampleBank::for_step(&topo, &models, 7, 4).expect("bank");
        assert_eq!(a.draws.len(), 2);
        assert_eq!(a.draws[0].len(), 6);
        assert_eq!(a.draws[1].len(), 36);
        assert_eq!(a.draws[0], b.draws[0]);
        assert_eq!(a.draws[1], b.draws[1]);
        assert_ne!(a.draws[0], c.draws[0]);
    }

    #[test]
    fn param_sample_is_exact_for_degenerate_draws() {
        let belief = GaussianBelief {
            mean: DVector::from_vec(vec![0.4, -1.5]),
            cov: DMatrix::zeros(2, 2),
        };
        let z = DVector::from_vec(vec![1.3, -0.7]);
        assert_eq!(param_sample(&belief, &z).expect("sample"), belief.mean);

        let belief = GaussianBelief {
            mean: DVector::from_vec(vec![0.4]),
            cov: DMatrix::from_row_slice(1, 1, &[0.01]),
        };
        let zero = DVector::zeros(1);
        assert_eq!(param_sample(&belief, &zero).expect("sample"), belief.mean);
        let one = DVector::from_vec(vec![1.0]);
        assert_relative_eq!(
            param_sample(&belief, &one).expect("sample")[0],
            0.5,
            max_relative = 1e-12
        );
    }

    #[test]
    fn expansion_conserves_weights_per_stage() {
        let topo = TreeTopology::build(8, 2, 3, 2, None).expect("topology");
        let models = scalar_models(2, false, &[0.7, 0.3]);
        let caps = free_caps(&models);
        let bank = SampleBank::for_step(&topo, &models, 11, 0).expect("bank");
        let tree = expand(
            &models,
            &caps,
            &topo,
            &bank,
            &DVector::from_vec(vec![0.2]),
            &BeliefState::from_priors(&models),
            &uniform_inputs(&topo, 0.5),
        )
        .expect("expand");
        let sums = tree.stage_weight_sums();
        assert_eq!(sums.len(), 3);
        assert_relative_eq!(sums[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(sums[1], 3.0, epsilon = 1e-12);
        assert_relative_eq!(sums[2], 9.0, epsilon = 1e-12);
    }

    #[test]
    fn uninformative_basis_leaves_beliefs_untouched() {
        // With a zero parameter basis, hypothesized transitions carry no
        // information: every child must inherit the parent's belief exactly,
        // and the branch weights reduce to prior-probability products.
        let topo = TreeTopology::build(4, 1, 2, 2, None).expect("topology");
        let models = scalar_models(2, true, &[0.5, 0.5]);
        let caps = free_caps(&models);
        let bank = SampleBank::for_step(&topo, &models, 3, 0).expect("bank");
        let root_belief = BeliefState::from_priors(&models);
        let tree = expand(
            &models,
            &caps,
            &topo,
            &bank,
            &DVector::from_vec(vec![1.0]),
            &root_belief,
            &uniform_inputs(&topo, 0.3),
        )
        .expect("expand");
        for child in &tree.stages[1] {
            assert_eq!(child.belief.mode_probs, root_belief.mode_probs);
            assert_eq!(child.belief.params, root_belief.params);
            assert_eq!(child.weight, 0.5);
        }
    }

    #[test]
    fn informative_basis_differentiates_child_beliefs() {
        let topo = TreeTopology::build(4, 1, 2, 2, None).expect("topology");
        let models = scalar_models(2, false, &[0.5, 0.5]);
        let caps = free_caps(&models);
        let bank = SampleBank::for_step(&topo, &models, 3, 0).expect("bank");
        let root_belief = BeliefState::from_priors(&models);
        let tree = expand(
            &models,
            &caps,
            &topo,
            &bank,
            &DVector::from_vec(vec![1.0]),
            &root_belief,
            &uniform_inputs(&topo, 0.9),
        )
        .expect("expand");
        // A child generated under mode 1's parameter prior should shift
        // belief toward mode 1 relative to a mode-0 child.
        let mode0_child = &tree.stages[1][0];
        let mode1_child = &tree.stages[1][topo.child_index(0, 1, 0)];
        assert!(mode1_child.belief.mode_probs[1] > mode0_child.belief.mode_probs[1]);
        for child in &tree.stages[1] {
            assert!(child.belief.params != root_belief.params);
        }
    }

    #[test]
    fn deferred_stages_freeze_belief_and_average_modes() {
        let topo = TreeTopology::build(6, 1, 2, 2, Some(vec![2])).expect("topology");
        let models = scalar_models(2, false, &[0.7, 0.3]);
        let caps = free_caps(&models);
        let bank = SampleBank::for_step(&topo, &models, 5, 0).expect("bank");
        let root_belief = BeliefState::from_priors(&models);
        let x0 = DVector::from_vec(vec![0.2]);
        let tree = expand(
            &models,
            &caps,
            &topo,
            &bank,
            &x0,
            &root_belief,
            &uniform_inputs(&topo, 0.5),
        )
        .expect("expand");
        assert_eq!(tree.stages.len(), 4);
        assert_eq!(tree.stages[1].len(), 1);
        assert_eq!(tree.stages[2].len(), 1);
        assert_eq!(tree.stages[3].len(), 4);

        let first = &tree.stages[1][0];
        assert_eq!(first.belief.mode_probs, root_belief.mode_probs);
        assert_eq!(first.belief.params, root_belief.params);
        assert_eq!(first.weight, 1.0);
        // x⁺ = 0.5·x + u·(0.7·0.4 + 0.3·0.7) with x = 0.2, u = 0.5.
        assert_relative_eq!(first.state[0], 0.1 + 0.5 * 0.49, max_relative = 1e-12);
    }

    #[test]
    fn tracking_cost_only_weighs_state_error() {
        // Guard placed here next to the cost users: the Q-only tracking cost
        // used for closed-loop comparisons must ignore inputs.
        let cost = CostSpec::new(
            DMatrix::from_row_slice(1, 1, &[2.0]),
            DMatrix::from_row_slice(1, 1, &[10.0]),
            DMatrix::from_row_slice(1, 1, &[2.0]),
            vec![DVector::from_vec(vec![1.0])],
        )
        .expect("cost");
        let x = DVector::from_vec(vec![3.0]);
        assert_relative_eq!(cost.tracking_cost(0, &x), 8.0, max_relative = 1e-14);
    }
}
