//! Where equilibria sit between the BP and TP solutions as the precision ratio varies.

use anyhow::Result;
use pcn_core::analytic::{solve_linear_network_equilibrium, EquilibriumMethod};
use pcn_core::data::synthetic_gaussian;
use pcn_core::inference::{run_inference, ActivityState, ClampMode, InferenceSettings};
use pcn_core::linalg::Matrix;
use pcn_core::metrics::{distance_to_reference, Probe, ProbeContext};
use pcn_core::network::{ActivationKind, Network};

use super::{hidden_net, kept, net, partition, per_seed, seeds, SMALL_SEEDS};
use crate::config::ExperimentConfig;
use crate::report::{median, spearman, Check, Report, Table};

pub const RATIOS: [f64; 5] = [1e-2, 1e-1, 1.0, 1e1, 1e2];

pub(crate) fn ratio_grid(cfg: &ExperimentConfig) -> Vec<f64> {
    cfg.ratios.clone().unwrap_or_else(|| RATIOS.to_vec())
}

/// Precisions `I` below and `ratio * I` above the hidden layer of a 3-layer net.
fn with_ratio(net: &Network, ratio: f64) -> Result<Network> {
    let mut out = net.clone();
    let p: Vec<Matrix> = (1..=net.depth())
        .map(|l| {
            let n = net.width(l);
            if l == net.depth() {
                Matrix::identity(n, n) * ratio
            } else {
                Matrix::identity(n, n)
            }
        })
        .collect();
    out.set_precisions(p)?;
    Ok(out)
}

pub(crate) struct RatioRun {
    pub ratio: f64,
    pub net: Network,
    pub mode: ClampMode,
    pub state: ActivityState,
    pub converged: bool,
    pub steps: usize,
    /// cos_eps_bp_l1, cos_x_tp_l1, dist_ff_l1, dist_tp_l1 at the equilibrium.
    pub probes: Vec<f64>,
}

const RATIO_PROBES: [Probe; 4] = [Probe::CosErrBp(1), Probe::CosActTp(1), Probe::DistFfLayer(1), Probe::DistTpLayer(1)];

fn ratio_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<RatioRun>> {
    let base = hidden_net(&[5, 5, 5], ActivationKind::Tanh, seed)?;
    let d = synthetic_gaussian(1, 5, 5, 10_000 + seed)?;
    let ctx = ProbeContext::supervised(&base, &d.inputs, &d.targets)?;
    let mode = ClampMode::supervised(d.inputs.clone(), d.targets.clone());
    let mut out = Vec::new();
    for ratio in ratio_grid(cfg) {
        let net = with_ratio(&base, ratio)?;
        // the stiffest direction scales with 1 + 2 * ratio
        let settings = InferenceSettings {
            step_size: cfg.step_size.unwrap_or(0.5 / (1.0 + 2.0 * ratio)),
            max_steps: cfg.max_steps.unwrap_or(200_000),
            convergence_tol: 1e-12,
            record_trace: false,
            ..Default::default()
        };
        let res = run_inference(&net, &mode, &settings, &[], &ctx)?;
        let probes = RATIO_PROBES
            .iter()
            .map(|p| p.evaluate(&net, &res.state, &mode, &ctx))
            .collect::<pcn_core::Result<Vec<_>>>()?;
        out.push(RatioRun {
            ratio,
            net,
            mode: mode.clone(),
            state: res.state,
            converged: res.converged,
            steps: res.steps,
            probes,
        });
    }
    Ok(out)
}

pub(crate) fn ratio_runs(cfg: &ExperimentConfig, report: &mut Report) -> Vec<(u64, Vec<RatioRun>)> {
    partition(per_seed(seeds(cfg, SMALL_SEEDS), |s| ratio_seed(cfg, s)), report)
}

/// Median over seeds of column `k` at each ratio.
fn grid_medians(t: &Table, column: &str) -> (Vec<f64>, Vec<f64>) {
    t.grouped(column)
        .into_iter()
        .map(|(keys, v)| (keys[0].parse::<f64>().unwrap_or(f64::NAN), median(&v)))
        .unzip()
}

fn monotone_check(name: &str, t: &Table, column: &str, sign: f64) -> Check {
    let (ratios, meds) = grid_medians(t, column);
    let rho = spearman(&ratios, &meds);
    let shown: Vec<String> = meds.iter().map(|m| format!("{m:.4}")).collect();
    Check::new(
        name,
        rho == sign,
        format!("Spearman {rho:.3} (need {sign:.1}); medians [{}]", shown.join(", ")),
    )
}

pub fn fig3c(cfg: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::default();
    let runs = ratio_runs(cfg, &mut report);
    let mut t = Table::new(
        "fig3c",
        &["ratio"],
        &["cos_eps_bp", "cos_x_tp", "dist_ff", "dist_tp", "steps", "converged"],
    );
    for (seed, rs) in &runs {
        for r in rs {
            let mut v = r.probes.clone();
            v.push(r.steps as f64);
            v.push(r.converged as u8 as f64);
            t.push(Some(*seed), vec![r.ratio.to_string()], v);
        }
    }
    report.checks.push(monotone_check("cos_eps_bp_decreasing", &t, "cos_eps_bp", -1.0));
    report.checks.push(monotone_check("cos_x_tp_increasing", &t, "cos_x_tp", 1.0));
    report.tables.push(t);
    Ok(report)
}

/// Linear equilibria across the ratio grid, solved in closed form.
fn linear_ratio_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<(f64, f64, f64)>> {
    let base = net(&[5, 5, 5], ActivationKind::Linear, seed)?;
    let d = synthetic_gaussian(1, 5, 5, 10_000 + seed)?;
    let ctx = ProbeContext::supervised(&base, &d.inputs, &d.targets)?;
    let ff = ctx.feedforward.expect("set by supervised");
    let tp = ctx.tp_targets.expect("linear nets invert");
    ratio_grid(cfg)
        .into_iter()
        .map(|ratio| {
            let net = with_ratio(&base, ratio)?;
            let eq = solve_linear_network_equilibrium(&net, &d.inputs, &d.targets, EquilibriumMethod::DirectSolve)?;
            let state = ActivityState::new(&net, eq.activities)?;
            Ok((
                ratio,
                distance_to_reference(&state, &ff, &[1])?,
                distance_to_reference(&state, &tp, &[1])?,
            ))
        })
        .collect()
}

fn tanh_trace_seed(cfg: &ExperimentConfig, seed: u64, stride: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let net = hidden_net(&[5, 5, 5], ActivationKind::Tanh, seed)?;
    let d = synthetic_gaussian(1, 5, 5, 10_000 + seed)?;
    let ctx = ProbeContext::supervised(&net, &d.inputs, &d.targets)?;
    let settings = InferenceSettings {
        step_size: cfg.step_size.unwrap_or(super::DEFAULT_STEP),
        max_steps: cfg.max_steps.unwrap_or(super::DEFAULT_STEPS),
        convergence_tol: 0.0,
        ..Default::default()
    };
    let mode = ClampMode::supervised(d.inputs.clone(), d.targets.clone());
    let out = run_inference(&net, &mode, &settings, &[Probe::CosErrBp(1), Probe::CosActTp(1)], &ctx)?;
    let last = out.trace.steps.len().saturating_sub(1);
    Ok(out
        .trace
        .steps
        .into_iter()
        .zip(out.trace.probe_values)
        .enumerate()
        .filter(|(i, _)| kept(*i, last, stride))
        .map(|(_, v)| v)
        .collect())
}

pub fn fig2(cfg: &ExperimentConfig) -> Result<Report> {
    let n = seeds(cfg, SMALL_SEEDS);
    let mut report = Report::default();
    let mut lin = Table::new("fig2_linear", &["ratio"], &["dist_ff", "dist_tp"]);
    for (seed, rows) in partition(per_seed(n, |s| linear_ratio_seed(cfg, s)), &mut report) {
        for (ratio, dff, dtp) in rows {
            lin.push(Some(seed), vec![ratio.to_string()], vec![dff, dtp]);
        }
    }
    report.checks.push(monotone_check("linear_dist_ff_increasing", &lin, "dist_ff", 1.0));
    report.checks.push(monotone_check("linear_dist_tp_decreasing", &lin, "dist_tp", -1.0));

    let stride = cfg.trace_stride.unwrap_or(1);
    let mut tr = Table::new("fig2_tanh", &["step"], &["cos_eps_bp", "cos_x_tp"]);
    for (seed, rows) in partition(per_seed(n, |s| tanh_trace_seed(cfg, s, stride)), &mut report) {
        for (step, v) in rows {
            tr.push(Some(seed), vec![step.to_string()], v);
        }
    }
    // step 0 has zero hidden error under feedforward init, so the BP trend starts at step 1
    let series = |col: &str| -> Vec<f64> { tr.grouped(col).into_iter().map(|(_, v)| median(&v)).collect() };
    let eps = series("cos_eps_bp");
    let x = series("cos_x_tp");
    if eps.len() >= 3 {
        let (first, last) = (eps[1], eps[eps.len() - 1]);
        report.checks.push(Check::new(
            "tanh_cos_eps_bp_falls",
            last < first,
            format!("median {first:.4} after the first step, {last:.4} at the end"),
        ));
        let (first, last) = (x[0], x[x.len() - 1]);
        report.checks.push(Check::new(
            "tanh_cos_x_tp_rises",
            last > first,
            format!("median {first:.4} at the start, {last:.4} at the end"),
        ));
    }
    report.tables.push(lin);
    report.tables.push(tr);
    Ok(report)
}
