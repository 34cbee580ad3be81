//! Closed-loop simulation harness.
//!
//! Runs a controller against the true plant, logs every step, repeats runs
//! over paired seeds in parallel, reduces the runs to per-step quantile
//! statistics, and serializes logs, statistics, and summary charts. All
//! randomness derives from the run seed through fixed tags, so the plant
//! noise of run `i` is identical for every controller — runs are paired —
//! and repeated invocations reproduce output files byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{format_real, parse_real, Benchmark};
use crate::controller::{Controller, ControllerKind, StepDiagnostics};
use crate::error::{Error, Result};
use crate::linalg::chol_pd;
use crate::model::step_truth;
use crate::rng::{self, standard_normal_vector, TAG_PLANT, TAG_RUN};
use crate::svg::{Band, Plot, Series};

/// Everything recorded about one closed-loop step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    /// Measured state the controller planned from.
    pub state: DVector<f64>,
    /// Input actually applied to the plant.
    pub input: DVector<f64>,
    /// Realized stage cost of `(state, input)` at this step's reference.
    pub stage_cost: f64,
    pub mode_probs: Vec<f64>,
    pub param_means: Vec<DVector<f64>>,
    /// Diagonal of each mode's parameter covariance.
    pub param_vars: Vec<DVector<f64>>,
    pub diagnostics: StepDiagnostics,
}

/// Complete log of one closed-loop run.
#[derive(Debug, Clone)]
pub struct SimulationLog {
    pub controller: String,
    /// SHA-256 digest of the canonical benchmark serialization.
    pub config_digest: String,
    pub run_seed: u64,
    pub steps: Vec<StepRecord>,
    /// State reached after the final step.
    pub final_state: DVector<f64>,
}

impl SimulationLog {
    /// Trajectory of one state component, `run_length + 1` points.
    pub fn state_series(&self, i: usize) -> Vec<f64> {
        let mut out: Vec<f64> = self.steps.iter().map(|s| s.state[i]).collect();
        out.push(self.final_state[i]);
        out
    }

    /// Serialize to CSV. Floats use the shortest representation that parses
    /// back to the same bits; the trailing row carries the final state and
    /// leaves every other column empty. Wall-clock timings are deliberately
    /// not serialized so repeated runs produce identical files.
    pub fn to_csv(&self) -> String {
        let n_x = self.final_state.len();
        let n_u = self.steps.first().map_or(0, |s| s.input.len());
        let mut out = String::with_capacity(64 * self.steps.len());
        let _ = writeln!(out, "# controller: {}", self.controller);
        let _ = writeln!(out, "# config_digest: {}", self.config_digest);
        let _ = writeln!(out, "# run_seed: {}", self.run_seed);
        out.push_str("step");
        for i in 0..n_x {
            let _ = write!(out, ",x{i}");
        }
        for i in 0..n_u {
            let _ = write!(out, ",u{i}");
        }
        out.push_str(",stage_cost");
        let first = self.steps.first();
        let n_m = first.map_or(0, |s| s.mode_probs.len());
        for m in 0..n_m {
            let _ = write!(out, ",p_mode_{m}");
        }
        for m in 0..n_m {
            for i in 0..first.map_or(0, |s| s.param_means[m].len()) {
                let _ = write!(out, ",gamma_mean_{m}_{i}");
            }
        }
        for m in 0..n_m {
            for i in 0..first.map_or(0, |s| s.param_vars[m].len()) {
                let _ = write!(out, ",gamma_var_{m}_{i}");
            }
        }
        out.push_str(",objective,iterations,kkt_residual,solver_failed\n");

        for record in &self.steps {
            let _ = write!(out, "{}", record.step);
            for i in 0..n_x {
                let _ = write!(out, ",{}", format_real(record.state[i]));
            }
            for i in 0..n_u {
                let _ = write!(out, ",{}", format_real(record.input[i]));
            }
            let _ = write!(out, ",{}", format_real(record.stage_cost));
            for p in &record.mode_probs {
                let _ = write!(out, ",{}", format_real(*p));
            }
            for mean in &record.param_means {
                for v in mean.iter() {
                    let _ = write!(out, ",{}", format_real(*v));
                }
            }
            for var in &record.param_vars {
                for v in var.iter() {
                    let _ = write!(out, ",{}", format_real(*v));
                }
            }
            let d = &record.diagnostics;
            let _ = writeln!(
                out,
                ",{},{},{},{}",
                format_real(d.objective),
                d.iterations,
                format_real(d.kkt_residual),
                d.solver_failed
            );
        }

        // Final state row: only the step index and state columns are filled.
        let _ = write!(out, "{}", self.steps.len());
        for i in 0..n_x {
            let _ = write!(out, ",{}", format_real(self.final_state[i]));
        }
        let empty = 1 + n_u
            + n_m
            + self.steps.first().map_or(0, |s| {
                s.param_means.iter().map(|m| m.len()).sum::<usize>()
                    + s.param_vars.iter().map(|v| v.len()).sum::<usize>()
            })
            + 4;
        for _ in 0..empty {
            out.push(',');
        }
        out.push('\n');
        out
    }
}

/// SHA-256 hex digest of the benchmark's canonical serialization.
pub fn config_digest(bench: &Benchmark) -> Result<String> {
    let json = bench.canonical_json()?;
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        let _ = write!(hex, "{byte:02x}");
    }
    Ok(hex)
}

/// Simulate one closed-loop run of `bench.truth.run_length` steps.
///
/// The plant's process noise comes from a stream derived only from
/// `run_seed`, so different controllers on the same seed face identical
/// disturbances. A solver breakdown inside the controller is flagged in the
/// log and the loop continues; only a belief-update breakdown aborts the
/// run. When the controller fails hard the loop keeps going with a zero
/// input (projected onto the input box) and flags the step.
pub fn run_closed_loop(
    bench: &Benchmark,
    kind: ControllerKind,
    run_seed: u64,
) -> Result<SimulationLog> {
    let models = &bench.models;
    let truth = &bench.truth;
    let digest = config_digest(bench)?;
    let mut controller = Controller::new(bench, kind)?;
    let mut plant_rng = rng::chacha(rng::mix_seed(&[run_seed, TAG_PLANT]));
    let mut x = truth.initial_state.clone();
    let mut steps = Vec::with_capacity(truth.run_length);

    for k in 0..truth.run_length {
        let (input, diagnostics) = match controller.step(run_seed, &x) {
            Ok(result) => (result.input, result.diagnostics),
            Err(_) => {
                let zero = DVector::from_fn(models.n_u, |i, _| {
                    0f64.clamp(models.input_lower[i], models.input_upper[i])
                });
                (zero, failed_step_diagnostics())
            }
        };
        let belief = controller.belief();
        let record = StepRecord {
            step: k,
            state: x.clone(),
            input: input.clone(),
            stage_cost: bench.cost.stage_cost(k, &x, &input),
            mode_probs: belief.mode_probs.clone(),
            param_means: belief.params.iter().map(|p| p.mean.clone()).collect(),
            param_vars: belief.params.iter().map(|p| p.cov.diagonal()).collect(),
            diagnostics,
        };

        // The plant advances on its own noise stream regardless of the
        // noise scale, so scaling to zero still consumes the same draws and
        // keeps seed pairings intact.
        let phase = truth.active(k);
        let z = standard_normal_vector(&mut plant_rng, models.n_x);
        let chol = chol_pd(&models.modes[phase.mode].noise_cov, "plant noise covariance")?;
        let w = truth.noise_scale * (chol.l() * z);
        x = step_truth(models, phase.mode, &phase.gamma, &x, &input, &w)?;
        steps.push(record);
    }

    Ok(SimulationLog {
        controller: kind.label().to_string(),
        config_digest: digest,
        run_seed,
        steps,
        final_state: x,
    })
}

fn failed_step_diagnostics() -> StepDiagnostics {
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

/// Logs of a batch of runs, reduced in seed order.
#[derive(Debug, Clone)]
pub struct MonteCarloOutcome {
    pub logs: Vec<SimulationLog>,
    /// Runs that aborted (excluded from `logs`).
    pub failed_runs: usize,
}

/// Per-run seed of run `index` under a master seed.
pub fn run_seed(master_seed: u64, index: usize) -> u64 {
    rng::mix_seed(&[master_seed, index as u64, TAG_RUN])
}

/// Run `runs` independent closed-loop simulations in parallel and collect
/// the surviving logs in run order.
pub fn monte_carlo(
    bench: &Benchmark,
    kind: ControllerKind,
    runs: usize,
    master_seed: u64,
) -> Result<MonteCarloOutcome> {
    if runs == 0 {
        return Err(Error::Config("no runs requested".into()));
    }
    let results: Vec<Result<SimulationLog>> = (0..runs)
        .into_par_iter()
        .map(|i| run_closed_loop(bench, kind, run_seed(master_seed, i)))
        .collect();
    let mut logs = Vec::with_capacity(runs);
    let mut failed_runs = 0;
    for result in results {
        match result {
            Ok(log) => logs.push(log),
            Err(_) => failed_runs += 1,
        }
    }
    Ok(MonteCarloOutcome { logs, failed_runs })
}

/// Quantile of pre-sorted values with linear interpolation between order
/// statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    } else {
        sorted[lo]
    }
}

/// Median and 5%/95% quantiles of one logged channel over time.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub name: String,
    pub median: Vec<f64>,
    pub q05: Vec<f64>,
    pub q95: Vec<f64>,
}

/// All channel statistics of one controller's run batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsBundle {
    pub controller: String,
    pub runs_used: usize,
    pub failed_runs: usize,
    pub channels: Vec<ChannelStats>,
}

impl StatsBundle {
    pub fn channel(&self, name: &str) -> Option<&ChannelStats> {
        self.channels.iter().find(|c| c.name == name)
    }

    /// Serialize as CSV: one row per step, three columns per channel.
    /// Channels of different lengths leave their tail cells empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# controller: {}", self.controller);
        let _ = writeln!(out, "# runs_used: {}", self.runs_used);
        let _ = writeln!(out, "# failed_runs: {}", self.failed_runs);
        out.push_str("step");
        for c in &self.channels {
            let _ = write!(out, ",{0}__median,{0}__q05,{0}__q95", c.name);
        }
        out.push('\n');
        let rows = self.channels.iter().map(|c| c.median.len()).max().unwrap_or(0);
        for k in 0..rows {
            let _ = write!(out, "{k}");
            for c in &self.channels {
                if k < c.median.len() {
                    let _ = write!(
                        out,
                        ",{},{},{}",
                        format_real(c.median[k]),
                        format_real(c.q05[k]),
                        format_real(c.q95[k])
                    );
                } else {
                    out.push_str(",,,");
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parse a stats CSV produced by [`StatsBundle::to_csv`].
    pub fn from_csv(text: &str) -> Result<StatsBundle> {
        let mut controller = String::new();
        let mut runs_used = 0usize;
        let mut failed_runs = 0usize;
        let mut lines = text.lines().peekable();
        while let Some(line) = lines.peek() {
            let Some(rest) = line.strip_prefix("# ") else { break };
            if let Some(v) = rest.strip_prefix("controller: ") {
                controller = v.to_string();
            } else if let Some(v) = rest.strip_prefix("runs_used: ") {
                runs_used = v
                    .parse()
                    .map_err(|_| Error::Parse(format!("runs_used: bad count {v:?}")))?;
            } else if let Some(v) = rest.strip_prefix("failed_runs: ") {
                failed_runs = v
                    .parse()
                    .map_err(|_| Error::Parse(format!("failed_runs: bad count {v:?}")))?;
            }
            lines.next();
        }
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("stats file has no header row".into()))?;
        let columns: Vec<&str> = header.split(',').collect();
        if columns.first() != Some(&"step") || (columns.len() - 1) % 3 != 0 {
            return Err(Error::Parse(format!("unexpected stats header {header:?}")));
        }
        let mut channels = Vec::new();
        for triple in columns[1..].chunks(3) {
            let name = triple[0]
                .strip_suffix("__median")
                .ok_or_else(|| Error::Parse(format!("unexpected stats column {:?}", triple[0])))?;
            channels.push(ChannelStats {
                name: name.to_string(),
                median: Vec::new(),
                q05: Vec::new(),
                q95: Vec::new(),
            });
        }
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != columns.len() {
                return Err(Error::Parse(format!(
                    "stats row has {} cells, header has {} columns",
                    cells.len(),
                    columns.len()
                )));
            }
            for (c, triple) in channels.iter_mut().zip(cells[1..].chunks(3)) {
                if triple[0].is_empty() {
                    continue;
                }
                c.median.push(parse_real(triple[0], &format!("{}__median", c.name))?);
                c.q05.push(parse_real(triple[1], &format!("{}__q05", c.name))?);
                c.q95.push(parse_real(triple[2], &format!("{}__q95", c.name))?);
            }
        }
        Ok(StatsBundle { controller, runs_used, failed_runs, channels })
    }
}

fn channel_over_runs(
    name: &str,
    logs: &[SimulationLog],
    len: usize,
    extract: impl Fn(&SimulationLog, usize) -> f64,
) -> ChannelStats {
    let mut median = Vec::with_capacity(len);
    let mut q05 = Vec::with_capacity(len);
    let mut q95 = Vec::with_capacity(len);
    for k in 0..len {
        let mut values: Vec<f64> = logs.iter().map(|log| extract(log, k)).collect();
        values.sort_by(|a, b| a.partial_cmp(b).expect("statistics channels are NaN-free"));
        median.push(quantile(&values, 0.5));
        q05.push(quantile(&values, 0.05));
        q95.push(quantile(&values, 0.95));
    }
    ChannelStats { name: name.to_string(), median, q05, q95 }
}

/// Reduce a batch of runs to per-step quantile statistics for every state,
/// input, stage-cost, mode-probability, and parameter-belief channel.
pub fn summarize(bench: &Benchmark, outcome: &MonteCarloOutcome) -> Result<StatsBundle> {
    if outcome.logs.is_empty() {
        return Err(Error::Config(format!(
            "no runs to summarize ({} failed)",
            outcome.failed_runs
        )));
    }
    let logs = &outcome.logs;
    let n_steps = bench.truth.run_length;
    let n_x = bench.models.n_x;
    let n_u = bench.models.n_u;
    let n_m = bench.models.n_modes();
    let mut channels = Vec::new();
    for i in 0..n_x {
        channels.push(channel_over_runs(&format!("x{i}"), logs, n_steps + 1, |log, k| {
            if k < log.steps.len() {
                log.steps[k].state[i]
            } else {
                log.final_state[i]
            }
        }));
    }
    for i in 0..n_u {
        channels.push(channel_over_runs(&format!("u{i}"), logs, n_steps, |log, k| {
            log.steps[k].input[i]
        }));
    }
    channels.push(channel_over_runs("stage_cost", logs, n_steps, |log, k| {
        log.steps[k].stage_cost
    }));
    for m in 0..n_m {
        channels.push(channel_over_runs(&format!("p_mode_{m}"), logs, n_steps, |log, k| {
            log.steps[k].mode_probs[m]
        }));
    }
    for m in 0..n_m {
        for i in 0..bench.models.modes[m].n_gamma() {
            channels.push(channel_over_runs(
                &format!("gamma_mean_{m}_{i}"),
                logs,
                n_steps,
                |log, k| log.steps[k].param_means[m][i],
            ));
            channels.push(channel_over_runs(
                &format!("gamma_var_{m}_{i}"),
                logs,
                n_steps,
                |log, k| log.steps[k].param_vars[m][i],
            ));
        }
    }
    Ok(StatsBundle {
        controller: logs[0].controller.clone(),
        runs_used: logs.len(),
        failed_runs: outcome.failed_runs,
        channels,
    })
}

/// Annotations the charts need beyond the raw statistics, written next to
/// them so charts can be regenerated from a stats directory alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotMeta {
    /// State component treated as the tracked output.
    pub tracked_state: usize,
    /// Mode whose probability and parameter belief are charted.
    pub event_mode: usize,
    /// Steps where the true mode changes (chart markers).
    pub event_steps: Vec<usize>,
    /// Steps where the reference changes (chart markers).
    pub reference_steps: Vec<usize>,
    /// True parameter value of the final truth phase (chart marker).
    pub true_gamma: f64,
    pub input_lower: f64,
    pub input_upper: f64,
    /// Reference trajectory of the tracked state, dense over the run.
    pub reference: Vec<f64>,
    pub run_length: usize,
}

/// Chart annotations for a benchmark: the tracked output is the last state
/// weighted by the stage cost (falling back to the last state), and the
/// event mode is the mode of the final truth phase.
pub fn plot_meta(bench: &Benchmark) -> PlotMeta {
    let n_x = bench.models.n_x;
    let tracked_state =
        (0..n_x).rev().find(|&i| bench.cost.q[(i, i)] > 0.0).unwrap_or(n_x - 1);
    let last_phase = bench.truth.mode_schedule.last().expect("validated schedule");
    let reference: Vec<f64> =
        (0..=bench.truth.run_length).map(|k| bench.cost.reference_at(k)[tracked_state]).collect();
    let mut reference_steps = Vec::new();
    for k in 1..reference.len() {
        if reference[k] != reference[k - 1] {
            reference_steps.push(k);
        }
    }
    PlotMeta {
        tracked_state,
        event_mode: last_phase.mode,
        event_steps: bench.truth.mode_schedule.iter().skip(1).map(|p| p.step).collect(),
        reference_steps,
        true_gamma: last_phase.gamma[0],
        input_lower: bench.models.input_lower[0],
        input_upper: bench.models.input_upper[0],
        reference,
        run_length: bench.truth.run_length,
    }
}

const DUAL_COLOR: &str = "#d62728";
const BASELINE_COLOR: &str = "#1f77b4";

fn controller_color(label: &str) -> &'static str {
    if label == "dmpc" {
        DUAL_COLOR
    } else {
        BASELINE_COLOR
    }
}

fn chart_series(bundles: &[&StatsBundle], channel: &str) -> Vec<Series> {
    let mut series = Vec::new();
    for bundle in bundles {
        if let Some(c) = bundle.channel(channel) {
            series.push(Series {
                label: bundle.controller.clone(),
                color: controller_color(&bundle.controller).to_string(),
                values: c.median.clone(),
                band: Some(Band { lo: c.q05.clone(), hi: c.q95.clone() }),
                dashed: false,
            });
        }
    }
    series
}

fn event_vlines(meta: &PlotMeta) -> Vec<(f64, String)> {
    let mut vlines: Vec<(f64, String)> =
        meta.event_steps.iter().map(|s| (*s as f64, "mode change".to_string())).collect();
    vlines.extend(meta.reference_steps.iter().map(|s| (*s as f64, "reference".to_string())));
    vlines
}

/// Render the four summary charts into `out_dir`: tracked output, applied
/// input, event-mode probability, and event-mode parameter mean. Each chart
/// overlays every provided controller (median line over a 5–95% band).
pub fn write_plots(meta: &PlotMeta, bundles: &[&StatsBundle], out_dir: &Path) -> Result<()> {
    if bundles.is_empty() {
        return Err(Error::Config("no statistics to chart".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io_at(out_dir.display().to_string(), e))?;
    let write = |name: &str, plot: Plot| -> Result<()> {
        let path = out_dir.join(name);
        fs::write(&path, plot.render()).map_err(|e| Error::io_at(path.display().to_string(), e))
    };

    let mut altitude_series = chart_series(bundles, &format!("x{}", meta.tracked_state));
    altitude_series.push(Series {
        label: "reference".into(),
        color: "#444444".into(),
        values: meta.reference.clone(),
        band: None,
        dashed: true,
    });
    write(
        "altitude.svg",
        Plot {
            title: "tracked output".into(),
            x_label: "step".into(),
            y_label: format!("x{}", meta.tracked_state),
            series: altitude_series,
            vlines: event_vlines(meta),
            hlines: vec![],
        },
    )?;

    write(
        "input.svg",
        Plot {
            title: "applied input".into(),
            x_label: "step".into(),
            y_label: "u0".into(),
            series: chart_series(bundles, "u0"),
            vlines: event_vlines(meta),
            hlines: vec![
                (meta.input_lower, "lower bound".into()),
                (meta.input_upper, "upper bound".into()),
            ],
        },
    )?;

    write(
        "mode_prob.svg",
        Plot {
            title: format!("probability of mode {}", meta.event_mode),
            x_label: "step".into(),
            y_label: format!("p_mode_{}", meta.event_mode),
            series: chart_series(bundles, &format!("p_mode_{}", meta.event_mode)),
            vlines: event_vlines(meta),
            hlines: vec![],
        },
    )?;

    write(
        "param_mean.svg",
        Plot {
            title: format!("parameter belief of mode {}", meta.event_mode),
            x_label: "step".into(),
            y_label: format!("gamma_mean_{}_0", meta.event_mode),
            series: chart_series(bundles, &format!("gamma_mean_{}_0", meta.event_mode)),
            vlines: event_vlines(meta),
            hlines: vec![(meta.true_gamma, "true value".into())],
        },
    )?;

    Ok(())
}
