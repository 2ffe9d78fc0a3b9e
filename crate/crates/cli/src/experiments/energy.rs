//! Output loss and residual energy during inference, and the energy gradient bound.

use anyhow::Result;
use pcn_core::data::{synthetic_gaussian, Dataset};
use pcn_core::inference::{activity_step, init_activities, run_inference, ClampMode, InferenceSettings, InitMode};
use pcn_core::learning::{train, TrainOutcome, TrainSettings};
use pcn_core::metrics::{energy_report, ProbeContext};
use pcn_core::network::{ActivationKind, Network};

use super::{hidden_net, kept, partition, per_seed, seeds, SMALL_SEEDS};
use crate::config::ExperimentConfig;
use crate::report::{Check, Report, Table};

const WIDTHS: [usize; 4] = [5, 5, 5, 5];
const SAMPLES: usize = 100;
/// Relative slack for calling a change an increase (rounding only).
const SLACK: f64 = 1e-12;

fn setup(seed: u64) -> Result<(Network, Dataset)> {
    let net = hidden_net(&WIDTHS, ActivationKind::Relu, seed)?;
    let data = synthetic_gaussian(SAMPLES, 5, 5, 20_000 + seed)?;
    Ok((net, data))
}

fn step_size(cfg: &ExperimentConfig) -> f64 {
    cfg.step_size.unwrap_or(0.1)
}

fn steps(cfg: &ExperimentConfig) -> usize {
    cfg.max_steps.unwrap_or(super::DEFAULT_STEPS)
}

struct PhaseRun {
    /// (step, L, E~) summed over the batch.
    trace: Vec<(usize, f64, f64)>,
    samples_l_up: usize,
    samples_e_down: usize,
    worst_l_up: f64,
    worst_e_down: f64,
}

fn phase_seed(cfg: &ExperimentConfig, seed: u64) -> Result<PhaseRun> {
    let (net, data) = setup(seed)?;
    let settings = InferenceSettings {
        step_size: step_size(cfg),
        max_steps: steps(cfg),
        convergence_tol: 0.0,
        ..Default::default()
    };
    let mode = ClampMode::supervised(data.inputs.clone(), data.targets.clone());
    let out = run_inference(&net, &mode, &settings, &[], &ProbeContext::default())?;
    let trace = out
        .trace
        .steps
        .iter()
        .zip(&out.trace.energies)
        .map(|(s, e)| (*s, e.output_loss, e.residual))
        .collect();
    // per-sample monotonicity, one sample at a time
    let mut run = PhaseRun {
        trace,
        samples_l_up: 0,
        samples_e_down: 0,
        worst_l_up: 0.0,
        worst_e_down: 0.0,
    };
    for c in 0..data.len() {
        let (x, t) = data.gather(&[c]);
        let m = ClampMode::supervised(x, t);
        let mut state = init_activities(&net, &m, InitMode::FeedforwardPass)?;
        let mut prev = energy_report(&net, &state);
        let (mut l_up, mut e_down) = (false, false);
        for _ in 0..settings.max_steps {
            state = activity_step(&net, &state, &m, settings.step_size);
            let r = energy_report(&net, &state);
            let dl = r.output_loss - prev.output_loss;
            if dl > SLACK * prev.output_loss {
                l_up = true;
                run.worst_l_up = run.worst_l_up.max(dl / prev.output_loss);
            }
            let de = prev.residual - r.residual;
            if de > SLACK * prev.residual {
                e_down = true;
                run.worst_e_down = run.worst_e_down.max(de / prev.residual);
            }
            prev = r;
        }
        run.samples_l_up += l_up as usize;
        run.samples_e_down += e_down as usize;
    }
    Ok(run)
}

pub fn fig4a(cfg: &ExperimentConfig) -> Result<Report> {
    let n = seeds(cfg, SMALL_SEEDS);
    let mut report = Report::default();
    let runs = partition(per_seed(n, |s| phase_seed(cfg, s)), &mut report);
    let stride = cfg.trace_stride.unwrap_or(1);
    let mut t = Table::new("fig4a", &["step"], &["L", "E_tilde"]);
    let mut s = Table::new("fig4a_samples", &[], &["samples_L_up", "samples_E_down", "worst_L_up", "worst_E_down"]);
    let (mut l_ok, mut e_ok) = (0, 0);
    let (mut l_bad, mut e_bad) = (0, 0);
    for (seed, r) in &runs {
        let last = r.trace.len().saturating_sub(1);
        for (i, (step, l, e)) in r.trace.iter().enumerate() {
            if kept(i, last, stride) {
                t.push(Some(*seed), vec![step.to_string()], vec![*l, *e]);
            }
        }
        s.push(
            Some(*seed),
            vec![],
            vec![r.samples_l_up as f64, r.samples_e_down as f64, r.worst_l_up, r.worst_e_down],
        );
        let batch_l = r.trace.windows(2).all(|w| w[1].1 <= w[0].1 * (1.0 + SLACK));
        let batch_e = r.trace.windows(2).all(|w| w[1].2 >= w[0].2 * (1.0 - SLACK));
        l_ok += (batch_l && r.samples_l_up == 0) as usize;
        e_ok += (batch_e && r.samples_e_down == 0) as usize;
        l_bad += r.samples_l_up;
        e_bad += r.samples_e_down;
    }
    let total = n * SAMPLES;
    report.checks.push(Check::new(
        "L_nonincreasing_every_step",
        l_ok == n,
        format!("{l_ok}/{n} seeds clean; L rose at some step in {l_bad}/{total} samples"),
    ));
    report.checks.push(Check::new(
        "E_tilde_nondecreasing_every_step",
        e_ok == n,
        format!("{e_ok}/{n} seeds clean; E~ fell at some step in {e_bad}/{total} samples"),
    ));
    report.tables.push(t);
    report.tables.push(s);
    Ok(report)
}

/// 20 epochs of minibatch training with the bound evaluated at every inference step.
fn train_seed(cfg: &ExperimentConfig, seed: u64) -> Result<TrainOutcome> {
    let (net, data) = setup(seed)?;
    let settings = TrainSettings {
        weight_lr: cfg.weight_lr.unwrap_or(0.01),
        momentum: cfg.momentum.unwrap_or(0.0),
        epochs: cfg.epochs.unwrap_or(20),
        batch_size: cfg.batch_size.unwrap_or(10),
        loss_monitor: true,
        shuffle_seed: Some(seed),
        inference: InferenceSettings {
            step_size: step_size(cfg),
            max_steps: steps(cfg),
            convergence_tol: 0.0,
            record_trace: false,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = train(&net, &data, None, &settings)?;
    if let Some(e) = &out.error {
        anyhow::bail!("training stopped: {e}");
    }
    Ok(out)
}

pub fn fig4b(cfg: &ExperimentConfig) -> Result<Report> {
    let n = seeds(cfg, SMALL_SEEDS);
    let mut report = Report::default();
    let runs = partition(per_seed(n, |s| train_seed(cfg, s)), &mut report);
    let mut t = Table::new("fig4b", &["update"], &["delta_L"]);
    let mut e = Table::new("fig4b_epochs", &["epoch"], &["loss", "delta_L_max"]);
    let mut clean = 0;
    let mut worst = f64::NEG_INFINITY;
    for (seed, out) in &runs {
        for (i, d) in out.record.step_delta_l.iter().enumerate() {
            t.push(Some(*seed), vec![i.to_string()], vec![*d]);
        }
        for r in &out.record.epochs {
            e.push(Some(*seed), vec![r.epoch.to_string()], vec![r.loss, r.delta_l_inference]);
        }
        let m = out.record.step_delta_l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max(m);
        clean += (m <= 0.0) as usize;
    }
    report.checks.push(Check::new(
        "delta_L_nonpositive_every_phase",
        clean == n,
        format!("{clean}/{n} seeds; largest per-sample change {worst:e}"),
    ));
    report.tables.push(t);
    report.tables.push(e);
    Ok(report)
}

pub fn bound(cfg: &ExperimentConfig) -> Result<Report> {
    let n = seeds(cfg, SMALL_SEEDS);
    let mut report = Report::default();
    let runs = partition(per_seed(n, |s| train_seed(cfg, s)), &mut report);
    let mut t = Table::new("bound", &[], &["checks", "violations"]);
    let (mut clean, mut checks, mut violations) = (0, 0, 0);
    for (seed, out) in &runs {
        let r = &out.record;
        t.push(Some(*seed), vec![], vec![r.bound_checks as f64, r.bound_violations as f64]);
        clean += (r.bound_violations == 0) as usize;
        checks += r.bound_checks;
        violations += r.bound_violations;
    }
    report.checks.push(Check::new(
        "bound_every_step",
        clean == n,
        format!("{clean}/{n} seeds clean; {violations}/{checks} recorded steps violate the bound"),
    ));
    report.tables.push(t);
    Ok(report)
}
