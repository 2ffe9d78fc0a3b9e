//! Inference phase: explicit-Euler relaxation of the activities.
//!
//! The activity velocity of every free layer is
//!
//! ```text
//! dx_l/dt = -P_l e_l + W_{l+1}^T (P_{l+1} e_{l+1} .* f'(W_{l+1} x_l))
//! ```
//!
//! which is `-1/2 dF/dx_l` for `F = sum_l e_l^T P_l e_l`. The output layer has
//! no feedback term and the input layer has no error of its own. All layers are
//! updated synchronously from the pre-step state.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PcnError, Result};
use crate::linalg::{add_scaled, all_finite, sup_norm, Matrix};
use crate::metrics::{energy_report, EnergyReport, Probe, ProbeContext};
use crate::network::{forward_pass, Network};

/// Which ends of the network are fixed, and to what. Columns are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ClampMode {
    pub input_clamped: bool,
    pub output_clamped: bool,
    pub data: Option<Matrix>,
    pub target: Option<Matrix>,
}

impl ClampMode {
    /// Training mode: data at the input, target at the output.
    pub fn supervised(data: Matrix, target: Matrix) -> Self {
        ClampMode {
            input_clamped: true,
            output_clamped: true,
            data: Some(data),
            target: Some(target),
        }
    }

    /// Output free: only the input is clamped.
    pub fn input_only(data: Matrix) -> Self {
        ClampMode {
            input_clamped: true,
            output_clamped: false,
            data: Some(data),
            target: None,
        }
    }

    /// Input-unconstrained: only the output is clamped. `start` (if any)
    /// seeds the input layer for feedforward initialization.
    pub fn output_only(target: Matrix, start: Option<Matrix>) -> Self {
        ClampMode {
            input_clamped: false,
            output_clamped: true,
            data: start,
            target: Some(target),
        }
    }

    /// Validates the clamp vectors against the network and returns the batch size.
    pub fn batch_size(&self, net: &Network) -> Result<usize> {
        if self.input_clamped && self.data.is_none() {
            return Err(PcnError::MissingClamp("input"));
        }
        if self.output_clamped && self.target.is_none() {
            return Err(PcnError::MissingClamp("output"));
        }
        let mut batch = None;
        if let Some(d) = &self.data {
            if d.nrows() != net.width(0) {
                return Err(PcnError::Shape(format!(
                    "data has {} rows, input layer has width {}",
                    d.nrows(),
                    net.width(0)
                )));
            }
            batch = Some(d.ncols());
        }
        if let Some(t) = &self.target {
            if t.nrows() != net.width(net.depth()) {
                return Err(PcnError::Shape(format!(
                    "target has {} rows, output layer has width {}",
                    t.nrows(),
                    net.width(net.depth())
                )));
            }
            if let Some(b) = batch {
                if b != t.ncols() {
                    return Err(PcnError::Shape("data and target batch sizes differ".into()));
                }
            }
            batch = Some(t.ncols());
        }
        batch.ok_or(PcnError::MissingClamp("input or output"))
    }

    pub fn is_clamped(&self, net: &Network, layer: usize) -> bool {
        (layer == 0 && self.input_clamped) || (layer == net.depth() && self.output_clamped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMode {
    FeedforwardPass,
    Random { std: f64, seed: u64 },
    Zero,
}

/// The energy the activities descend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// `F = sum_l E_l`.
    Standard,
    /// `lambda * L + (1 - lambda) * E_tilde`.
    Lambda(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceSettings {
    pub step_size: f64,
    pub max_steps: usize,
    /// Threshold on the sup-norm of the activity velocity.
    pub convergence_tol: f64,
    pub init: InitMode,
    pub objective: Objective,
    pub record_trace: bool,
    pub record_activities: bool,
    /// Evaluate the energy gradient bound before every step.
    pub check_energy_bound: bool,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        InferenceSettings {
            step_size: 0.05,
            max_steps: 100,
            convergence_tol: 1e-8,
            init: InitMode::FeedforwardPass,
            objective: Objective::Standard,
            record_trace: true,
            record_activities: false,
            check_energy_bound: false,
        }
    }
}

impl InferenceSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(PcnError::InvalidSettings(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        if self.max_steps == 0 {
            return Err(PcnError::InvalidSettings("max_steps must be at least 1".into()));
        }
        if let Objective::Lambda(l) = self.objective {
            if !(0.0..=1.0).contains(&l) {
                return Err(PcnError::LambdaOutOfRange(l));
            }
        }
        Ok(())
    }
}

/// Activities `x_0..x_L`, cached pre-activations `W_l x_{l-1}` and prediction
/// errors `e_l = x_l - f_l(W_l x_{l-1})`. Index 0 of the pre-activation and
/// error lists is an unused zero block, so `errors()[l]` is `e_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityState {
    activities: Vec<Matrix>,
    preacts: Vec<Matrix>,
    errors: Vec<Matrix>,
}

impl ActivityState {
    /// Wraps activities and computes fresh errors.
    pub fn new(net: &Network, activities: Vec<Matrix>) -> Result<Self> {
        if activities.len() != net.depth() + 1 {
            return Err(PcnError::Shape(format!(
                "{} activity layers for a network with {} layers",
                activities.len(),
                net.depth() + 1
            )));
        }
        let batch = activities[0].ncols();
        for (l, a) in activities.iter().enumerate() {
            if a.nrows() != net.width(l) || a.ncols() != batch {
                return Err(PcnError::Shape(format!(
                    "layer {l} activity is {}x{}, expected {}x{batch}",
                    a.nrows(),
                    a.ncols(),
                    net.width(l)
                )));
            }
        }
        let mut preacts = vec![Matrix::zeros(net.width(0), batch)];
        for l in 1..=net.depth() {
            preacts.push(net.weight(l) * &activities[l - 1]);
        }
        let mut state = ActivityState {
            errors: vec![Matrix::zeros(net.width(0), batch)],
            activities,
            preacts,
        };
        state.refresh_errors(net);
        Ok(state)
    }

    fn refresh_errors(&mut self, net: &Network) {
        self.errors.truncate(1);
        for l in 1..=net.depth() {
            let pred = net.activation(l).apply(&self.preacts[l]);
            self.errors.push(&self.activities[l] - pred);
        }
    }

    pub fn depth(&self) -> usize {
        self.activities.len() - 1
    }

    pub fn batch_size(&self) -> usize {
        self.activities[0].ncols()
    }

    pub fn activity(&self, layer: usize) -> &Matrix {
        &self.activities[layer]
    }

    pub fn activities(&self) -> &[Matrix] {
        &self.activities
    }

    pub fn into_activities(self) -> Vec<Matrix> {
        self.activities
    }

    /// `e_l` for `l` in `1..=L`.
    pub fn error(&self, layer: usize) -> &Matrix {
        &self.errors[layer]
    }

    /// Errors indexed by layer; entry 0 is a zero block.
    pub fn errors(&self) -> &[Matrix] {
        &self.errors
    }

    /// Cached `W_l x_{l-1}`.
    pub fn preact(&self, layer: usize) -> &Matrix {
        &self.preacts[layer]
    }

    /// Adds `step * velocity` to every free layer, then refreshes
    /// pre-activations and errors.
    fn advance(&mut self, net: &Network, velocity: &[Option<Matrix>], clamped: &[bool], step: f64) {
        for (a, v) in self.activities.iter_mut().zip(velocity) {
            if let Some(v) = v {
                add_scaled(a, step, v);
            }
        }
        for l in 1..=net.depth() {
            if !clamped[l - 1] {
                self.preacts[l] = net.weight(l) * &self.activities[l - 1];
            }
        }
        self.refresh_errors(net);
    }
}

/// Prediction errors `e_1..e_L` recomputed from the activities (entry 0 is zero).
pub fn compute_errors(net: &Network, state: &ActivityState) -> Result<Vec<Matrix>> {
    let fresh = ActivityState::new(net, state.activities.clone())?;
    Ok(fresh.errors)
}

/// Sets up activities for an inference phase.
pub fn init_activities(net: &Network, mode: &ClampMode, init: InitMode) -> Result<ActivityState> {
    let batch = mode.batch_size(net)?;
    let depth = net.depth();
    let mut activities = match init {
        InitMode::FeedforwardPass => {
            let input = mode.data.as_ref().ok_or(PcnError::MissingClamp(
                "input (feedforward initialization needs an input)",
            ))?;
            forward_pass(net, input)?
        }
        InitMode::Zero => (0..=depth).map(|l| Matrix::zeros(net.width(l), batch)).collect(),
        InitMode::Random { std, seed } => {
            let normal = Normal::new(0.0, std).map_err(|e| PcnError::InvalidSettings(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..=depth)
                .map(|l| Matrix::from_fn(net.width(l), batch, |_, _| normal.sample(&mut rng)))
                .collect()
        }
    };
    if mode.input_clamped {
        activities[0] = mode.data.clone().expect("validated");
    }
    if mode.output_clamped {
        activities[depth] = mode.target.clone().expect("validated");
    }
    ActivityState::new(net, activities)
}

/// Per-layer scale applied to each error term of the energy.
pub(crate) fn energy_scales(depth: usize, objective: Objective) -> Vec<f64> {
    match objective {
        Objective::Standard => vec![1.0; depth + 1],
        Objective::Lambda(lambda) => (0..=depth)
            .map(|l| if l == depth { lambda } else { 1.0 - lambda })
            .collect(),
    }
}

/// `s_l * P_l e_l` (or `s_l * e_l` without precisions); entry 0 is an empty placeholder.
pub(crate) fn weighted_errors(
    net: &Network,
    state: &ActivityState,
    use_precision: bool,
    scales: &[f64],
) -> Vec<Matrix> {
    let mut out = Vec::with_capacity(state.errors.len());
    out.push(Matrix::zeros(0, 0));
    for l in 1..state.errors.len() {
        let mut e = if use_precision {
            net.precision(l) * &state.errors[l]
        } else {
            state.errors[l].clone()
        };
        if scales[l] != 1.0 {
            e *= scales[l];
        }
        out.push(e);
    }
    out
}

/// Feedback term `W_{l+1}^T (e_{l+1} .* f'(W_{l+1} x_l))` for `l < L`.
pub(crate) fn feedback(net: &Network, state: &ActivityState, weighted: &[Matrix], layer: usize) -> Matrix {
    let above = layer + 1;
    let gated = weighted[above].component_mul(&net.activation(above).derivative(&state.preacts[above]));
    net.weight(above).tr_mul(&gated)
}

/// Velocity of every free layer; `None` on clamped layers.
fn velocity(
    net: &Network,
    state: &ActivityState,
    clamped: &[bool],
    use_precision: bool,
    scales: &[f64],
) -> Vec<Option<Matrix>> {
    let depth = net.depth();
    let weighted = weighted_errors(net, state, use_precision, scales);
    (0..=depth)
        .map(|l| {
            if clamped[l] {
                return None;
            }
            let mut v = if l < depth {
                feedback(net, state, &weighted, l)
            } else {
                Matrix::zeros(state.activities[l].nrows(), state.activities[l].ncols())
            };
            if l > 0 {
                v -= &weighted[l];
            }
            Some(v)
        })
        .collect()
}

fn filled(state: &ActivityState, v: Vec<Option<Matrix>>) -> Vec<Matrix> {
    v.into_iter()
        .zip(&state.activities)
        .map(|(v, a)| v.unwrap_or_else(|| Matrix::zeros(a.nrows(), a.ncols())))
        .collect()
}

fn clamp_flags(net: &Network, mode: &ClampMode) -> Vec<bool> {
    (0..=net.depth()).map(|l| mode.is_clamped(net, l)).collect()
}

/// Activity velocity `dx_l/dt` for every layer (zero on clamped layers).
pub fn activity_velocity(
    net: &Network,
    state: &ActivityState,
    mode: &ClampMode,
    use_precision: bool,
    objective: Objective,
) -> Vec<Matrix> {
    let scales = energy_scales(net.depth(), objective);
    filled(state, velocity(net, state, &clamp_flags(net, mode), use_precision, &scales))
}

/// One synchronous Euler step of the identity-precision dynamics.
pub fn activity_step(net: &Network, state: &ActivityState, mode: &ClampMode, step_size: f64) -> ActivityState {
    step_with(net, state, mode, step_size, false)
}

/// One synchronous Euler step of the precision-weighted dynamics.
pub fn precision_activity_step(
    net: &Network,
    state: &ActivityState,
    mode: &ClampMode,
    step_size: f64,
) -> ActivityState {
    step_with(net, state, mode, step_size, true)
}

fn step_with(net: &Network, state: &ActivityState, mode: &ClampMode, step_size: f64, use_precision: bool) -> ActivityState {
    let clamped = clamp_flags(net, mode);
    let scales = energy_scales(net.depth(), Objective::Standard);
    let v = velocity(net, state, &clamped, use_precision, &scales);
    let mut next = state.clone();
    next.advance(net, &v, &clamped, step_size);
    next
}

/// Per-step record of an inference phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InferenceTrace {
    pub steps: Vec<usize>,
    pub energies: Vec<EnergyReport>,
    pub probe_names: Vec<String>,
    /// `probe_values[i][k]` is probe `k` at `steps[i]`.
    pub probe_values: Vec<Vec<f64>>,
    pub activities: Vec<Vec<Matrix>>,
}

impl InferenceTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Column of values for the named probe.
    pub fn probe(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.probe_names.iter().position(|n| n == name)?;
        Some(self.probe_values.iter().map(|row| row[k]).collect())
    }

    /// CSV with columns `step,F,L,E_tilde` followed by one column per probe.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "step,F,L,E_tilde")?;
        for name in &self.probe_names {
            write!(out, ",{name}")?;
        }
        writeln!(out)?;
        for (i, step) in self.steps.iter().enumerate() {
            let e = &self.energies[i];
            write!(out, "{step},{:e},{:e},{:e}", e.total, e.output_loss, e.residual)?;
            for v in &self.probe_values[i] {
                write!(out, ",{v:e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Running tally of energy gradient bound evaluations.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BoundStats {
    pub checks: usize,
    pub violations: usize,
    /// Largest `lhs - rhs` seen.
    pub worst_margin: f64,
}

#[derive(Debug, Clone)]
pub struct InferenceOutcome {
    pub state: ActivityState,
    pub trace: InferenceTrace,
    pub converged: bool,
    /// Number of Euler steps taken.
    pub steps: usize,
    pub bound: BoundStats,
}

/// Relaxes the activities until the velocity sup-norm drops below
/// `convergence_tol` or `max_steps` Euler steps have been taken. The
/// precision-weighted dynamics are used whenever the network has a
/// non-identity precision.
pub fn run_inference(
    net: &Network,
    mode: &ClampMode,
    settings: &InferenceSettings,
    probes: &[Probe],
    context: &ProbeContext,
) -> Result<InferenceOutcome> {
    settings.validate()?;
    let state = init_activities(net, mode, settings.init)?;
    relax(net, mode, settings, probes, context, state)
}

/// Like [`run_inference`] but starting from a caller-supplied state.
pub fn relax(
    net: &Network,
    mode: &ClampMode,
    settings: &InferenceSettings,
    probes: &[Probe],
    context: &ProbeContext,
    mut state: ActivityState,
) -> Result<InferenceOutcome> {
    settings.validate()?;
    mode.batch_size(net)?;
    for p in probes {
        p.check_context(context)?;
    }
    let clamped = clamp_flags(net, mode);
    let use_precision = !net.has_identity_precisions();
    let scales = energy_scales(net.depth(), settings.objective);
    let mut trace = InferenceTrace {
        probe_names: probes.iter().map(|p| p.name()).collect(),
        ..Default::default()
    };
    let mut bound = BoundStats {
        worst_margin: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut converged = false;
    let mut steps = 0;
    for step in 0..=settings.max_steps {
        let v = velocity(net, &state, &clamped, use_precision, &scales);
        if !v.iter().flatten().all(all_finite) {
            return Err(PcnError::Divergence { step });
        }
        if step == 0 && !state.activities.iter().all(all_finite) {
            return Err(PcnError::Divergence { step });
        }
        if settings.record_trace {
            trace.steps.push(step);
            trace.energies.push(energy_report(net, &state));
            trace.probe_values.push(
                probes
                    .iter()
                    .map(|p| p.evaluate(net, &state, mode, context))
                    .collect::<Result<Vec<_>>>()?,
            );
            if settings.record_activities {
                trace.activities.push(state.activities.clone());
            }
        }
        if settings.check_energy_bound {
            let check = crate::learning::energy_gradient_bound_check(net, &state, mode);
            bound.checks += 1;
            if !check.satisfied {
                bound.violations += 1;
            }
            bound.worst_margin = bound.worst_margin.max(check.lhs - check.rhs);
        }
        let speed = v.iter().flatten().map(sup_norm).fold(0.0, f64::max);
        if speed < settings.convergence_tol {
            converged = true;
            break;
        }
        if step == settings.max_steps {
            break;
        }
        state.advance(net, &v, &clamped, settings.step_size);
        steps += 1;
        let free = state.activities.iter().zip(&clamped).filter(|(_, c)| !**c);
        if !free.map(|(a, _)| a).all(all_finite) {
            return Err(PcnError::Divergence { step: step + 1 });
        }
    }
    if bound.checks == 0 {
        bound.worst_margin = 0.0;
    }
    Ok(InferenceOutcome {
        state,
        trace,
        converged,
        steps,
        bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{col, sup_dist};
    use crate::network::{build_network, ActivationKind, NetworkSpec};

    fn tanh_net(widths: &[usize], seed: u64) -> Network {
        build_network(&NetworkSpec::uniform(widths, ActivationKind::Tanh, 0.5, seed)).unwrap()
    }

    /// F/2 evaluated directly from the definition, for finite differences.
    fn half_energy(net: &Network, acts: &[Matrix], use_precision: bool) -> f64 {
        let mut f = 0.0;
        for l in 1..acts.len() {
            let pred = net.activation(l).apply(&(net.weight(l) * &acts[l - 1]));
            let e = &acts[l] - pred;
            f += if use_precision {
                (e.transpose() * net.precision(l) * &e)[(0, 0)]
            } else {
                e.norm_squared()
            };
        }
        0.5 * f
    }

    fn fd_velocity(net: &Network, acts: &[Matrix], layer: usize, use_precision: bool) -> Matrix {
        let h = 1e-6;
        Matrix::from_fn(acts[layer].nrows(), 1, |i, _| {
            let mut plus = acts.to_vec();
            plus[layer][(i, 0)] += h;
            let mut minus = acts.to_vec();
            minus[layer][(i, 0)] -= h;
            -(half_energy(net, &plus, use_precision) - half_energy(net, &minus, use_precision)) / (2.0 * h)
        })
    }

    #[test]
    fn missing_clamp_vectors_are_rejected() {
        let net = tanh_net(&[2, 3, 2], 0);
        let mode = ClampMode {
            input_clamped: true,
            output_clamped: true,
            data: Some(col(&[1.0, 2.0])),
            target: None,
        };
        assert_eq!(
            init_activities(&net, &mode, InitMode::Zero).unwrap_err(),
            PcnError::MissingClamp("output")
        );
        let wrong = ClampMode::supervised(col(&[1.0]), col(&[1.0, 2.0]));
        assert!(matches!(init_activities(&net, &wrong, InitMode::Zero), Err(PcnError::Shape(_))));
    }

    #[test]
    fn feedforward_init_has_zero_hidden_errors() {
        let net = tanh_net(&[3, 4, 4, 2], 1);
        let data = col(&[0.5, -1.0, 2.0]);
        let free = init_activities(&net, &ClampMode::input_only(data.clone()), InitMode::FeedforwardPass).unwrap();
        assert!(free.errors().iter().all(|e| sup_norm(e) == 0.0));

        let target = col(&[0.3, -0.2]);
        let clamped =
            init_activities(&net, &ClampMode::supervised(data.clone(), target.clone()), InitMode::FeedforwardPass).unwrap();
        let ff = forward_pass(&net, &data).unwrap();
        for l in 1..net.depth() {
            assert_eq!(sup_norm(clamped.error(l)), 0.0);
        }
        assert_eq!(*clamped.error(3), &target - &ff[3]);
    }

    #[test]
    fn random_init_is_reproducible() {
        let net = tanh_net(&[3, 4, 2], 2);
        let mode = ClampMode::input_only(col(&[1.0, 0.0, -1.0]));
        let init = InitMode::Random { std: 1.0, seed: 42 };
        let a = init_activities(&net, &mode, init).unwrap();
        let b = init_activities(&net, &mode, init).unwrap();
        assert_eq!(a, b);
        assert_eq!(*a.activity(0), col(&[1.0, 0.0, -1.0]));
    }

    #[test]
    fn errors_hand_arithmetic() {
        let net = Network::from_weights(
            vec![Matrix::from_element(1, 1, 1.0), Matrix::from_element(1, 1, 1.0)],
            vec![ActivationKind::Linear; 2],
        )
        .unwrap();
        let state = ActivityState::new(&net, vec![col(&[1.0]), col(&[2.0]), col(&[5.0])]).unwrap();
        let e = compute_errors(&net, &state).unwrap();
        assert_eq!(e[1], col(&[1.0]));
        assert_eq!(e[2], col(&[3.0]));
    }

    #[test]
    fn errors_match_independent_recomputation() {
        let net = tanh_net(&[3, 5, 4, 2], 3);
        let mode = ClampMode::input_only(col(&[0.1, 0.2, 0.3]));
        let state = init_activities(&net, &mode, InitMode::Random { std: 1.0, seed: 5 }).unwrap();
        for l in 1..=net.depth() {
            let w = net.weight(l);
            let x = state.activity(l - 1);
            for i in 0..w.nrows() {
                let mut acc = 0.0;
                for j in 0..w.ncols() {
                    acc += w[(i, j)] * x[(j, 0)];
                }
                let expect = state.activity(l)[(i, 0)] - acc.tanh();
                assert!((state.error(l)[(i, 0)] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let net = tanh_net(&[3, 4, 2], 4);
        let mode = ClampMode::input_only(col(&[1.0, -0.5, 0.25]));
        let state = init_activities(&net, &mode, InitMode::FeedforwardPass).unwrap();
        let next = activity_step(&net, &state, &mode, 0.1);
        for l in 0..=net.depth() {
            assert!(sup_dist(next.activity(l), state.activity(l)) < 1e-12);
        }
    }

    #[test]
    fn free_output_relaxes_geometrically() {
        let net = tanh_net(&[2, 3], 5);
        let data = col(&[0.4, -0.9]);
        let mode = ClampMode::input_only(data.clone());
        let target = forward_pass(&net, &data).unwrap()[1].clone();
        let mut state = ActivityState::new(&net, vec![data, col(&[1.0, -1.0, 0.5])]).unwrap();
        let eta = 0.2;
        let mut gap = state.activity(1) - &target;
        for _ in 0..10 {
            state = activity_step(&net, &state, &mode, eta);
            gap *= 1.0 - eta;
            assert!(sup_dist(&(state.activity(1) - &target), &gap) < 1e-14);
        }
    }

    #[test]
    fn clamped_layers_never_move() {
        let net = tanh_net(&[3, 4, 2], 6);
        let mode = ClampMode::supervised(col(&[1.0, 2.0, 3.0]), col(&[0.5, -0.5]));
        let mut state = init_activities(&net, &mode, InitMode::Random { std: 1.0, seed: 0 }).unwrap();
        for _ in 0..5 {
            state = activity_step(&net, &state, &mode, 0.1);
        }
        assert_eq!(*state.activity(0), col(&[1.0, 2.0, 3.0]));
        assert_eq!(*state.activity(2), col(&[0.5, -0.5]));
    }

    #[test]
    fn velocity_is_half_negative_energy_gradient() {
        for seed in 0..5 {
            let net = tanh_net(&[3, 4, 5, 2], 10 + seed);
            let mode = ClampMode::supervised(col(&[0.3, -0.7, 1.1]), col(&[0.2, -0.4]));
            let state = init_activities(&net, &mode, InitMode::Random { std: 1.0, seed }).unwrap();
            let v = activity_velocity(&net, &state, &mode, false, Objective::Standard);
            for l in 1..net.depth() {
                let fd = fd_velocity(&net, state.activities(), l, false);
                let err = sup_dist(&v[l], &fd) / sup_norm(&fd).max(1e-12);
                assert!(err < 1e-5, "layer {l}: {err}");
            }
            // the unclamped-input case uses only the feedback term
            let free_in = ClampMode::output_only(col(&[0.2, -0.4]), None);
            let v0 = activity_velocity(&net, &state, &free_in, false, Objective::Standard);
            let fd0 = fd_velocity(&net, state.activities(), 0, false);
            assert!(sup_dist(&v0[0], &fd0) / sup_norm(&fd0) < 1e-5);
        }
    }

    fn diag(values: &[f64]) -> Matrix {
        Matrix::from_diagonal(&crate::linalg::Vector::from_column_slice(values))
    }

    #[test]
    fn precision_step_reduces_to_plain_step() {
        let net = tanh_net(&[3, 4, 2], 7);
        let mode = ClampMode::supervised(col(&[0.1, 0.2, 0.3]), col(&[0.5, 0.1]));
        let state = init_activities(&net, &mode, InitMode::Random { std: 1.0, seed: 3 }).unwrap();
        let a = activity_step(&net, &state, &mode, 0.05);
        let b = precision_activity_step(&net, &state, &mode, 0.05);
        for l in 0..=net.depth() {
            assert_eq!(a.activity(l), b.activity(l));
        }
    }

    #[test]
    fn precision_velocity_matches_finite_differences() {
        let mut net = tanh_net(&[3, 4, 3, 2], 8);
        net.set_precisions(vec![diag(&[2.0, 0.5, 1.5, 3.0]), diag(&[0.7, 1.2, 4.0]), diag(&[5.0, 0.3])])
            .unwrap();
        let mode = ClampMode::supervised(col(&[0.3, -0.2, 0.9]), col(&[0.4, -0.6]));
        let state = init_activities(&net, &mode, InitMode::Random { std: 1.0, seed: 9 }).unwrap();
        let v = activity_velocity(&net, &state, &mode, true, Objective::Standard);
        for l in 1..net.depth() {
            let fd = fd_velocity(&net, state.activities(), l, true);
            assert!(sup_dist(&v[l], &fd) / sup_norm(&fd) < 1e-5);
        }
    }

    #[test]
    fn feedback_scales_with_upper_precision() {
        // 3-layer linear net with diagonal precisions, input and output clamped
        let w1 = Matrix::from_row_slice(2, 2, &[0.5, -0.2, 0.3, 0.8]);
        let w2 = Matrix::from_row_slice(2, 2, &[1.1, 0.4, -0.6, 0.9]);
        let mut net = Network::from_weights(vec![w1, w2], vec![ActivationKind::Linear; 2]).unwrap();
        let mode = ClampMode::supervised(col(&[1.0, -1.0]), col(&[0.5, 2.0]));
        let state = ActivityState::new(&net, vec![col(&[1.0, -1.0]), col(&[0.2, 0.3]), col(&[0.5, 2.0])]).unwrap();
        let base = activity_velocity(&net, &state, &mode, true, Objective::Standard)[1].clone();
        let ff_term = -state.error(1);
        net.set_precisions(vec![Matrix::identity(2, 2), Matrix::identity(2, 2) * 10.0]).unwrap();
        let scaled = activity_velocity(&net, &state, &mode, true, Objective::Standard)[1].clone();
        let expect = &ff_term + (&base - &ff_term) * 10.0;
        assert!(sup_dist(&scaled, &expect) < 1e-12);
    }

    #[test]
    fn output_free_feedforward_converges_immediately() {
        let net = tanh_net(&[3, 4, 4, 2], 12);
        let mode = ClampMode::input_only(col(&[0.5, 0.5, -0.5]));
        let out = run_inference(&net, &mode, &InferenceSettings::default(), &[], &ProbeContext::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.steps, 0);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn trace_respects_max_steps() {
        let net = tanh_net(&[3, 4, 2], 13);
        let mode = ClampMode::supervised(col(&[0.5, 0.5, -0.5]), col(&[0.9, -0.9]));
        let settings = InferenceSettings {
            max_steps: 7,
            ..Default::default()
        };
        let out = run_inference(&net, &mode, &settings, &[], &ProbeContext::default()).unwrap();
        assert!(!out.converged);
        assert_eq!(out.steps, 7);
        assert_eq!(out.trace.steps, (0..=7).collect::<Vec<_>>());
        let mut csv = Vec::new();
        out.trace.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("step,F,L,E_tilde\n"));
        assert_eq!(text.lines().count(), 9);
    }

    #[test]
    fn divergence_reports_step() {
        let net = Network::from_weights(vec![Matrix::from_element(1, 1, 1.0)], vec![ActivationKind::Linear]).unwrap();
        let mode = ClampMode::input_only(col(&[1.0]));
        let state = ActivityState::new(&net, vec![col(&[1.0]), col(&[1e300])]).unwrap();
        let settings = InferenceSettings {
            step_size: 1e10,
            max_steps: 50,
            ..Default::default()
        };
        let err = relax(&net, &mode, &settings, &[], &ProbeContext::default(), state).unwrap_err();
        assert!(matches!(err, PcnError::Divergence { .. }));
    }

    #[test]
    fn settings_validation() {
        let bad = InferenceSettings {
            step_size: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = InferenceSettings {
            max_steps: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = InferenceSettings {
            objective: Objective::Lambda(1.5),
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(PcnError::LambdaOutOfRange(1.5)));
    }
}
