//! Fixed points of inference: feedforward pass, TP targets, linear and
//! precision-weighted closed forms, and the marginal condition.

use anyhow::{anyhow, Result};
use pcn_core::analytic::{precision_equilibrium_layer, solve_linear_network_equilibrium, EquilibriumMethod};
use pcn_core::baselines::targetprop_targets;
use pcn_core::inference::{run_inference, ActivityState, ClampMode, InferenceOutcome, InferenceSettings, InitMode};
use pcn_core::linalg::{sup_dist, Matrix};
use pcn_core::metrics::{energy_report, energy_split_gradients, marginal_condition_residual, Probe, ProbeContext};
use pcn_core::network::{forward_pass, ActivationKind, Network};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{gaussian, kept, net, partition, per_seed, rng, seeds, similarity, SMALL_SEEDS};
use crate::config::ExperimentConfig;
use crate::report::{Check, Report, Table};

const DEEP: [usize; 5] = [5, 5, 5, 5, 5];
const SHALLOW: [usize; 3] = [5, 5, 5];

// ---- output-unclamped: settles on the feedforward pass ----

struct FfRun {
    dists: Vec<f64>,
    steps: usize,
}

fn ff_seed(cfg: &ExperimentConfig, seed: u64) -> Result<FfRun> {
    let net = net(&DEEP, ActivationKind::Tanh, seed)?;
    let mut r = rng(seed, 1);
    let x0 = gaussian(5, 1, 1.0, 1.0, &mut r);
    let settings = InferenceSettings {
        step_size: cfg.step_size.unwrap_or(0.05),
        max_steps: cfg.max_steps.unwrap_or(2000),
        convergence_tol: 0.0,
        init: InitMode::Random { std: 1.0, seed: 7_000 + seed },
        record_trace: false,
        ..Default::default()
    };
    let mode = ClampMode::input_only(x0.clone());
    let out = run_inference(&net, &mode, &settings, &[], &ProbeContext::default())?;
    let ff = forward_pass(&net, &x0)?;
    let dists = (0..=net.depth()).map(|l| sup_dist(out.state.activity(l), &ff[l])).collect();
    Ok(FfRun { dists, steps: out.steps })
}

pub fn thm31(cfg: &ExperimentConfig) -> Result<Report> {
    let n = seeds(cfg, SMALL_SEEDS);
    let mut report = Report::default();
    let runs = partition(per_seed(n, |s| ff_seed(cfg, s)), &mut report);
    let mut t = Table::new("thm31", &["layer"], &["sup_dist_ff", "steps"]);
    let mut good = 0;
    for (seed, run) in &runs {
        for (l, d) in run.dists.iter().enumerate() {
            t.push(Some(*seed), vec![l.to_string()], vec![*d, run.steps as f64]);
        }
        if run.dists.iter().all(|d| *d < 1e-6) {
            good += 1;
        }
    }
    report.tables.push(t);
    report
        .checks
        .push(Check::count("feedforward_fixed_point", good, n, n, "within 1e-6 of the feedforward pass"));
    Ok(report)
}

// ---- input-unclamped: settles on the TP targets, output side first ----

/// Square tanh chain with scaled orthogonal weights and a reachable target.
pub(crate) struct TpSetup {
    pub net: Network,
    pub target: Matrix,
    pub start: Matrix,
    pub targets: Vec<Matrix>,
}

pub(crate) fn tp_setup(seed: u64) -> Result<TpSetup> {
    let mut net = net(&DEEP, ActivationKind::Tanh, seed)?;
    let mut r = rng(seed, 2);
    for l in 1..=net.depth() {
        let q = gaussian(5, 5, 0.0, 1.0, &mut r).qr().q() * 0.6;
        net.set_weight(l, q)?;
    }
    let z = gaussian(5, 1, 0.0, 0.3, &mut r);
    let start = gaussian(5, 1, 0.0, 0.3, &mut r);
    let target = forward_pass(&net, &z)?[net.depth()].clone();
    let targets = targetprop_targets(&net, &target)?.targets;
    Ok(TpSetup { net, target, start, targets })
}

struct TpRun {
    final_dist: Vec<f64>,
    entry: Vec<Option<usize>>,
    trace: Vec<(usize, Vec<f64>)>,
    steps: usize,
}

fn tp_seed(cfg: &ExperimentConfig, seed: u64, stride: usize) -> Result<TpRun> {
    let s = tp_setup(seed)?;
    let depth = s.net.depth();
    let probes: Vec<Probe> = (0..=depth).map(Probe::DistTpLayer).collect();
    let ctx = ProbeContext {
        tp_targets: Some(s.targets.clone()),
        ..Default::default()
    };
    let settings = InferenceSettings {
        step_size: cfg.step_size.unwrap_or(0.3),
        max_steps: cfg.max_steps.unwrap_or(20_000),
        convergence_tol: 1e-13,
        ..Default::default()
    };
    let mode = ClampMode::output_only(s.target.clone(), Some(s.start.clone()));
    let out = run_inference(&s.net, &mode, &settings, &probes, &ctx)?;
    let final_dist = (0..=depth).map(|l| sup_dist(out.state.activity(l), &s.targets[l])).collect();
    let entry = (0..=depth)
        .map(|l| out.trace.probe_values.iter().position(|row| row[l] < 1e-3))
        .collect();
    let last = out.trace.steps.len().saturating_sub(1);
    let trace = out
        .trace
        .steps
        .iter()
        .zip(&out.trace.probe_values)
        .enumerate()
        .filter(|(i, _)| kept(*i, last, stride))
        .map(|(_, (st, v))| (*st, v.clone()))
        .collect();
    Ok(TpRun {
        final_dist,
        entry,
        trace,
        steps: out.steps,
    })
}

/// Entry steps non-increasing from the input side towards the output.
fn layerwise_order(entry: &[Option<usize>]) -> bool {
    entry.windows(2).all(|w| match (w[0], w[1]) {
        (Some(a), Some(b)) => a >= b,
        _ => false,
    })
}

fn tp_report(cfg: &ExperimentConfig, with_trace: bool) -> Result<Report> {
    let n = seeds(cfg, SMALL_SEEDS);
    let stride = cfg.trace_stride.unwrap_or(50);
    let mut report = Report::default();
    let runs = partition(per_seed(n, |s| tp_seed(cfg, s, stride)), &mut report);
    let mut fin = Table::new("thm33", &["layer"], &["sup_dist_tp", "entry_step", "steps"]);
    let mut trace = Table::new("fig1a", &["step", "layer"], &["dist_tp"]);
    let (mut close, mut ordered) = (0, 0);
    for (seed, run) in &runs {
        for (l, d) in run.final_dist.iter().enumerate() {
            let entry = run.entry[l].map_or(f64::NAN, |e| e as f64);
            fin.push(Some(*seed), vec![l.to_string()], vec![*d, entry, run.steps as f64]);
        }
        for (step, dists) in &run.trace {
            for (l, d) in dists.iter().enumerate() {
                trace.push(Some(*seed), vec![step.to_string(), l.to_string()], vec![*d]);
            }
        }
        close += run.final_dist.iter().all(|d| *d < 1e-5) as usize;
        ordered += layerwise_order(&run.entry) as usize;
    }
    let needed = (n * 9).div_ceil(10);
    report.checks.push(Check::count("tp_fixed_point", close, n, needed, "within 1e-5 of the TP targets"));
    report
        .checks
        .push(Check::count("layerwise_order", ordered, n, needed, "enter the 1e-3 ball output-first"));
    if with_trace {
        report.tables.push(trace);
    }
    report.tables.push(fin);
    Ok(report)
}

pub fn thm33(cfg: &ExperimentConfig) -> Result<Report> {
    tp_report(cfg, false)
}

pub fn fig1a(cfg: &ExperimentConfig) -> Result<Report> {
    tp_report(cfg, true)
}

// ---- linear nets with both ends clamped ----

/// Symmetric, strictly diagonally dominant with positive diagonal, hence SPD.
pub(crate) fn diag_dominant_spd(n: usize, r: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = r.random_range(-0.5..0.5);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| f64::abs(m[(i, j)])).sum();
        m[(i, i)] = off + r.random_range(0.5..1.5);
    }
    m
}

pub(crate) struct LinearRun {
    pub net: Network,
    pub mode: ClampMode,
    pub equilibrium: Vec<Matrix>,
    pub outcome: InferenceOutcome,
}

/// 3-layer linear net, data `N(1,1)`, target `N(-1,1)`, optionally random precisions.
/// The trace records `dist_ref` (Euclidean distance to `equilibrium`).
pub(crate) fn linear_seed(cfg: &ExperimentConfig, seed: u64, precisions: Option<bool>) -> Result<LinearRun> {
    let mut net = net(&SHALLOW, ActivationKind::Linear, seed)?;
    let mut r = rng(seed, 3);
    let x0 = gaussian(5, 1, 1.0, 1.0, &mut r);
    let t = gaussian(5, 1, -1.0, 1.0, &mut r);
    match precisions {
        Some(true) => {
            let p = vec![diag_dominant_spd(5, &mut r), diag_dominant_spd(5, &mut r)];
            net.set_precisions(p)?;
        }
        Some(false) => net.set_precisions(vec![Matrix::identity(5, 5); 2])?,
        None => {}
    }
    let equilibrium = if precisions.is_some() {
        // one hidden layer: the layer formula is the whole network solution
        let mid = precision_equilibrium_layer(
            net.weight(1),
            net.weight(2),
            net.precision(1),
            net.precision(2),
            &x0,
            &t,
        )?;
        vec![x0.clone(), mid, t.clone()]
    } else {
        solve_linear_network_equilibrium(&net, &x0, &t, EquilibriumMethod::DirectSolve)?.activities
    };
    let settings = InferenceSettings {
        step_size: cfg.step_size.unwrap_or(0.05),
        max_steps: cfg.max_steps.unwrap_or(5000),
        convergence_tol: 1e-13,
        record_activities: true,
        ..Default::default()
    };
    let mode = ClampMode::supervised(x0, t);
    let ctx = ProbeContext::default().with_reference(equilibrium.clone());
    let outcome = run_inference(&net, &mode, &settings, &[Probe::DistRef], &ctx)?;
    Ok(LinearRun {
        net,
        mode,
        equilibrium,
        outcome,
    })
}

/// Strictly decreasing until the first value below `floor`, which must occur.
fn decreasing_until(trace: &[f64], floor: f64) -> bool {
    let Some(stop) = trace.iter().position(|d| *d < floor) else {
        return false;
    };
    trace[..=stop].windows(2).all(|w| w[1] < w[0])
}

fn dist_trace(run: &LinearRun) -> Vec<f64> {
    run.outcome.trace.probe_values.iter().map(|v| v[0]).collect()
}

fn linear_checks(runs: &[(u64, LinearRun)], n: usize, prefix: &str, report: &mut Report) {
    let matched = runs
        .iter()
        .filter(|(_, r)| sup_dist(r.outcome.state.activity(1), &r.equilibrium[1]) < 1e-8)
        .count();
    let monotone = runs.iter().filter(|(_, r)| decreasing_until(&dist_trace(r), 1e-8)).count();
    report.checks.push(Check::count(
        &format!("{prefix}_matches_closed_form"),
        matched,
        n,
        n,
        "within 1e-8 of the analytic equilibrium",
    ));
    report.checks.push(Check::count(
        &format!("{prefix}_distance_decreasing"),
        monotone,
        n,
        n,
        "with a strictly decreasing distance until 1e-8",
    ));
}

fn final_table(name: &str, runs: &[(u64, LinearRun)]) -> Table {
    let mut t = Table::new(name, &[], &["sup_dist", "steps", "converged"]);
    for (seed, r) in runs {
        let d = sup_dist(r.outcome.state.activity(1), &r.equilibrium[1]);
        t.push(Some(*seed), vec![], vec![d, r.outcome.steps as f64, r.outcome.converged as u8 as f64]);
    }
    t
}

fn activity_table(name: &str, runs: &[(u64, LinearRun)], stride: usize) -> Table {
    let mut t = Table::new(name, &["step", "neuron"], &["activity", "equilibrium"]);
    for (seed, r) in runs {
        let acts = &r.outcome.trace.activities;
        let last = acts.len().saturating_sub(1);
        for (step, a) in acts.iter().enumerate().filter(|(i, _)| kept(*i, last, stride)) {
            for i in 0..a[1].nrows() {
                t.push(
                    Some(*seed),
                    vec![step.to_string(), i.to_string()],
                    vec![a[1][(i, 0)], r.equilibrium[1][(i, 0)]],
                );
            }
        }
    }
    t
}

fn distance_table(name: &str, runs: &[(u64, LinearRun)], stride: usize) -> Table {
    let mut t = Table::new(name, &["step"], &["dist"]);
    for (seed, r) in runs {
        let d = dist_trace(r);
        let last = d.len().saturating_sub(1);
        for (step, v) in d.iter().enumerate().filter(|(i, _)| kept(*i, last, stride)) {
            t.push(Some(*seed), vec![step.to_string()], vec![*v]);
        }
    }
    t
}

fn linear_runs(cfg: &ExperimentConfig, precisions: Option<bool>, report: &mut Report) -> Vec<(u64, LinearRun)> {
    let n = seeds(cfg, SMALL_SEEDS);
    partition(per_seed(n, |s| linear_seed(cfg, s, precisions)), report)
}

pub fn thm34(cfg: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::default();
    let runs = linear_runs(cfg, None, &mut report);
    linear_checks(&runs, seeds(cfg, SMALL_SEEDS), "linear", &mut report);
    report.tables.push(final_table("thm34", &runs));
    Ok(report)
}

pub fn fig1b(cfg: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::default();
    let runs = linear_runs(cfg, None, &mut report);
    linear_checks(&runs, seeds(cfg, SMALL_SEEDS), "linear", &mut report);
    report.tables.push(activity_table("fig1b", &runs, cfg.trace_stride.unwrap_or(1)));
    Ok(report)
}

pub fn fig1c(cfg: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::default();
    let runs = linear_runs(cfg, None, &mut report);
    linear_checks(&runs, seeds(cfg, SMALL_SEEDS), "linear", &mut report);
    report.tables.push(distance_table("fig1c", &runs, cfg.trace_stride.unwrap_or(1)));
    Ok(report)
}

/// Random precisions against their closed form, plus identity precisions
/// against the unweighted run.
fn precision_report(cfg: &ExperimentConfig, table: Option<(&str, bool)>) -> Result<Report> {
    let n = seeds(cfg, SMALL_SEEDS);
    let mut report = Report::default();
    let runs = linear_runs(cfg, Some(true), &mut report);
    linear_checks(&runs, n, "precision", &mut report);
    let plain = linear_runs(cfg, None, &mut report);
    let ident = linear_runs(cfg, Some(false), &mut report);
    let mut agree = 0;
    let mut worst: f64 = 0.0;
    for ((_, a), (_, b)) in plain.iter().zip(&ident) {
        let gap_dyn = sup_dist(a.outcome.state.activity(1), b.outcome.state.activity(1));
        let gap_eq = sup_dist(&a.equilibrium[1], &b.equilibrium[1]);
        worst = worst.max(gap_dyn).max(gap_eq);
        agree += (gap_dyn <= 1e-12 && gap_eq <= 1e-12) as usize;
    }
    report.checks.push(Check::new(
        "identity_reproduces_linear",
        agree == n && plain.len() == n,
        format!("{agree}/{n} seeds, worst gap {worst:e} (need <= 1e-12)"),
    ));
    let stride = cfg.trace_stride.unwrap_or(1);
    match table {
        Some((name, true)) => report.tables.push(activity_table(name, &runs, stride)),
        Some((name, false)) => report.tables.push(distance_table(name, &runs, stride)),
        None => report.tables.push(final_table("thm35", &runs)),
    }
    Ok(report)
}

pub fn thm35(cfg: &ExperimentConfig) -> Result<Report> {
    precision_report(cfg, None)
}

pub fn fig3a(cfg: &ExperimentConfig) -> Result<Report> {
    precision_report(cfg, Some(("fig3a", true)))
}

pub fn fig3b(cfg: &ExperimentConfig) -> Result<Report> {
    precision_report(cfg, Some(("fig3b", false)))
}

// ---- marginal condition ----

/// Largest relative error between the analytic partials of `L` and `E~` and
/// central differences, over the free layers.
pub(crate) fn split_gradient_fd_error(net: &Network, state: &ActivityState, mode: &ClampMode) -> Result<f64> {
    let (dl, de) = energy_split_gradients(net, state, mode);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for l in pcn_core::metrics::free_layers(net, mode) {
        let x = state.activity(l);
        let mut fd_l = Matrix::zeros(x.nrows(), x.ncols());
        let mut fd_e = Matrix::zeros(x.nrows(), x.ncols());
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let eval = |delta: f64| -> Result<(f64, f64)> {
                    let mut acts = state.activities().to_vec();
                    acts[l][(i, j)] += delta;
                    let r = energy_report(net, &ActivityState::new(net, acts)?);
                    Ok((r.output_loss, r.residual))
                };
                let (lp, ep) = eval(h)?;
                let (lm, em) = eval(-h)?;
                fd_l[(i, j)] = (lp - lm) / (2.0 * h);
                fd_e[(i, j)] = (ep - em) / (2.0 * h);
            }
        }
        for (a, f) in [(&dl[l], &fd_l), (&de[l], &fd_e)] {
            let scale = f.norm().max(a.norm());
            if scale > 1e-8 {
                worst = worst.max((a - f).norm() / scale);
            }
        }
    }
    Ok(worst)
}

pub fn lemma32(cfg: &ExperimentConfig) -> Result<Report> {
    let n = seeds(cfg, SMALL_SEEDS);
    let mut report = Report::default();
    let mut t = Table::new("lemma32", &["source"], &["marginal_residual", "fd_rel_error", "converged"]);
    let mut equilibria: Vec<(String, u64, Network, ClampMode, ActivityState, bool)> = Vec::new();
    for (source, p) in [("linear", None), ("precision", Some(true))] {
        for (seed, r) in linear_runs(cfg, p, &mut report) {
            let converged = r.outcome.converged;
            equilibria.push((source.into(), seed, r.net, r.mode, r.outcome.state, converged));
        }
    }
    for (seed, runs) in similarity::ratio_runs(cfg, &mut report) {
        for r in runs {
            equilibria.push((format!("tanh_ratio_{}", r.ratio), seed, r.net, r.mode, r.state, r.converged));
        }
    }
    let results: Vec<Result<(f64, f64)>> = {
        use rayon::prelude::*;
        equilibria
            .par_iter()
            .map(|(_, _, net, mode, state, _)| {
                Ok((
                    marginal_condition_residual(net, state, mode),
                    split_gradient_fd_error(net, state, mode)?,
                ))
            })
            .collect()
    };
    let (mut small, mut fd_ok, mut converged) = (0, 0, 0);
    for ((source, seed, _, _, _, conv), res) in equilibria.iter().zip(results) {
        let (resid, fd) = res.map_err(|e| anyhow!("seed {seed} {source}: {e}"))?;
        t.push(Some(*seed), vec![source.clone()], vec![resid, fd, *conv as u8 as f64]);
        small += (resid < 1e-6) as usize;
        fd_ok += (fd < 1e-5) as usize;
        converged += *conv as usize;
    }
    let total = equilibria.len();
    let expected = n * (2 + similarity::ratio_grid(cfg).len());
    report.checks.push(Check::new(
        "marginal_residual",
        small == expected,
        format!("{small}/{expected} equilibria below 1e-6 ({converged}/{total} converged)"),
    ));
    report.checks.push(Check::new(
        "finite_difference_crosscheck",
        fd_ok == expected,
        format!("{fd_ok}/{expected} equilibria with relative error below 1e-5"),
    ));
    report.tables.push(t);
    Ok(report)
}
