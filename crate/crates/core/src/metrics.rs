//! Energy decomposition and the similarity / distance measures tracked during inference.

use crate::baselines::{backprop, partial_targetprop_targets};
use crate::error::{PcnError, Result};
use crate::inference::{feedback, weighted_errors, ActivityState, ClampMode};
use crate::learning::energy_gradient_bound_check;
use crate::linalg::{sup_norm, Matrix};
use crate::network::{forward_pass, Network};

/// `F = L + E_tilde` with `L = E_L` and `E_tilde = sum_{l<L} E_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub total: f64,
    pub output_loss: f64,
    pub residual: f64,
    /// `E_1..E_L` (index 0 is `E_1`).
    pub per_layer: Vec<f64>,
}

fn layer_energy(net: &Network, state: &ActivityState, layer: usize) -> f64 {
    let e = state.error(layer);
    if net.has_identity_precisions() {
        e.norm_squared()
    } else {
        e.component_mul(&(net.precision(layer) * e)).sum()
    }
}

/// Energies summed over every sample (column) of the state.
pub fn energy_report(net: &Network, state: &ActivityState) -> EnergyReport {
    let depth = net.depth();
    let per_layer: Vec<f64> = (1..=depth).map(|l| layer_energy(net, state, l)).collect();
    let residual: f64 = per_layer[..depth - 1].iter().sum();
    let output_loss = per_layer[depth - 1];
    EnergyReport {
        total: residual + output_loss,
        output_loss,
        residual,
        per_layer,
    }
}

/// `lambda * L + (1 - lambda) * E_tilde`.
pub fn lambda_energy(report: &EnergyReport, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(PcnError::LambdaOutOfRange(lambda));
    }
    Ok(lambda * report.output_loss + (1.0 - lambda) * report.residual)
}

/// Output energy `||e_L||^2` of each sample.
pub fn per_sample_output_loss(state: &ActivityState) -> Vec<f64> {
    let e = state.error(state.depth());
    e.column_iter().map(|c| c.norm_squared()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either argument is (numerically) the zero vector; `value` is then 0.
    pub degenerate: bool,
}

const ZERO_NORM: f64 = 1e-150;

/// Cosine similarity of two equally-sized blocks, flattened.
pub fn cosine_similarity(a: &Matrix, b: &Matrix) -> Cosine {
    let na = a.norm();
    let nb = b.norm();
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    Cosine {
        value: (dot / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Cosine similarity of several blocks concatenated.
pub fn cosine_similarity_concat(a: &[&Matrix], b: &[&Matrix]) -> Cosine {
    let na: f64 = a.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt();
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.dot(y)).sum();
    Cosine {
        value: (dot / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Partial gradients `dL/dx_l` and `dE_tilde/dx_l` for every layer, taken with
/// the activities as independent variables. Clamped layers get zero blocks.
pub fn energy_split_gradients(net: &Network, state: &ActivityState, mode: &ClampMode) -> (Vec<Matrix>, Vec<Matrix>) {
    let depth = net.depth();
    let scales = vec![1.0; depth + 1];
    let weighted = weighted_errors(net, state, !net.has_identity_precisions(), &scales);
    let mut d_loss = Vec::with_capacity(depth + 1);
    let mut d_resid = Vec::with_capacity(depth + 1);
    for l in 0..=depth {
        let shape = state.activity(l).shape();
        let mut gl = Matrix::zeros(shape.0, shape.1);
        let mut ge = Matrix::zeros(shape.0, shape.1);
        if !mode.is_clamped(net, l) {
            // own error term
            if l >= 1 {
                let own = &weighted[l] * 2.0;
                if l == depth {
                    gl += own;
                } else {
                    ge += own;
                }
            }
            // error of the layer above
            if l < depth {
                let fb = feedback(net, state, &weighted, l) * -2.0;
                if l + 1 == depth {
                    gl += fb;
                } else {
                    ge += fb;
                }
            }
        }
        d_loss.push(gl);
        d_resid.push(ge);
    }
    (d_loss, d_resid)
}

/// `max_l ||dL/dx_l + dE_tilde/dx_l||_inf` over the unclamped layers.
pub fn marginal_condition_residual(net: &Network, state: &ActivityState, mode: &ClampMode) -> f64 {
    let (gl, ge) = energy_split_gradients(net, state, mode);
    (0..=net.depth())
        .filter(|&l| !mode.is_clamped(net, l))
        .map(|l| sup_norm(&(&gl[l] + &ge[l])))
        .fold(0.0, f64::max)
}

/// Euclidean distance between the selected layers of `state` and `reference`.
pub fn distance_to_reference(state: &ActivityState, reference: &[Matrix], layers: &[usize]) -> Result<f64> {
    let mut sum = 0.0;
    for &l in layers {
        let (a, r) = match (state.activities().get(l), reference.get(l)) {
            (Some(a), Some(r)) => (a, r),
            _ => return Err(PcnError::Shape(format!("layer {l} missing from state or reference"))),
        };
        if a.shape() != r.shape() {
            return Err(PcnError::Shape(format!(
                "layer {l}: state {:?} vs reference {:?}",
                a.shape(),
                r.shape()
            )));
        }
        sum += (a - r).norm_squared();
    }
    Ok(sum.sqrt())
}

pub fn free_layers(net: &Network, mode: &ClampMode) -> Vec<usize> {
    (0..=net.depth()).filter(|&l| !mode.is_clamped(net, l)).collect()
}

/// Reference quantities probes compare against.
#[derive(Debug, Clone, Default)]
pub struct ProbeContext {
    pub feedforward: Option<Vec<Matrix>>,
    /// BP adjoints `dL/dx_l` at the feedforward pass.
    pub bp_adjoints: Option<Vec<Matrix>>,
    /// Layers without a TP target (below a non-invertible step) hold empty blocks.
    pub tp_targets: Option<Vec<Matrix>>,
    /// Any other per-layer reference, e.g. an analytic equilibrium.
    pub reference: Option<Vec<Matrix>>,
}

impl ProbeContext {
    /// Feedforward values, BP adjoints and (for invertible activations) TP targets
    /// for a supervised pair.
    pub fn supervised(net: &Network, data: &Matrix, target: &Matrix) -> Result<Self> {
        let feedforward = forward_pass(net, data)?;
        let (adjoints, _) = backprop(net, data, target)?;
        let tp = partial_targetprop_targets(net, target).ok();
        Ok(ProbeContext {
            feedforward: Some(feedforward),
            bp_adjoints: Some(adjoints.deltas),
            tp_targets: tp.map(|t| t.targets),
            reference: None,
        })
    }

    pub fn with_reference(mut self, reference: Vec<Matrix>) -> Self {
        self.reference = Some(reference);
        self
    }
}

/// A named quantity evaluated at every recorded inference step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    /// Cosine between `e_l` and the descent direction `-dL/dx_l` of backprop.
    CosErrBp(usize),
    /// Same, over all hidden layers concatenated.
    CosErrBpHidden,
    /// Cosine between `x_l` and its TP target.
    CosActTp(usize),
    CosActTpHidden,
    DistTp,
    DistTpLayer(usize),
    DistFf,
    DistFfLayer(usize),
    DistRef,
    DistRefLayer(usize),
    MarginalResidual,
    /// `lhs - rhs` of the energy gradient bound.
    BoundMargin,
    Energy(usize),
}

impl Probe {
    pub fn name(&self) -> String {
        match *self {
            Probe::CosErrBp(l) => format!("cos_eps_bp_l{l}"),
            Probe::CosErrBpHidden => "cos_eps_bp".into(),
            Probe::CosActTp(l) => format!("cos_x_tp_l{l}"),
            Probe::CosActTpHidden => "cos_x_tp".into(),
            Probe::DistTp => "dist_tp".into(),
            Probe::DistTpLayer(l) => format!("dist_tp_l{l}"),
            Probe::DistFf => "dist_ff".into(),
            Probe::DistFfLayer(l) => format!("dist_ff_l{l}"),
            Probe::DistRef => "dist_ref".into(),
            Probe::DistRefLayer(l) => format!("dist_ref_l{l}"),
            Probe::MarginalResidual => "marginal_residual".into(),
            Probe::BoundMargin => "bound_margin".into(),
            Probe::Energy(l) => format!("E_l{l}"),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let layered = |prefix: &str| -> Option<usize> { name.strip_prefix(prefix).and_then(|s| s.parse().ok()) };
        let probe = match name {
            "cos_eps_bp" => Probe::CosErrBpHidden,
            "cos_x_tp" => Probe::CosActTpHidden,
            "dist_tp" => Probe::DistTp,
            "dist_ff" => Probe::DistFf,
            "dist_ref" => Probe::DistRef,
            "marginal_residual" => Probe::MarginalResidual,
            "bound_margin" => Probe::BoundMargin,
            _ => {
                if let Some(l) = layered("cos_eps_bp_l") {
                    Probe::CosErrBp(l)
                } else if let Some(l) = layered("cos_x_tp_l") {
                    Probe::CosActTp(l)
                } else if let Some(l) = layered("dist_tp_l") {
                    Probe::DistTpLayer(l)
                } else if let Some(l) = layered("dist_ff_l") {
                    Probe::DistFfLayer(l)
                } else if let Some(l) = layered("dist_ref_l") {
                    Probe::DistRefLayer(l)
                } else if let Some(l) = layered("E_l") {
                    Probe::Energy(l)
                } else {
                    return Err(PcnError::UnknownProbe(name.to_string()));
                }
            }
        };
        Ok(probe)
    }

    pub(crate) fn check_context(&self, ctx: &ProbeContext) -> Result<()> {
        let needed = match self {
            Probe::CosErrBp(_) | Probe::CosErrBpHidden => ctx.bp_adjoints.is_some(),
            Probe::CosActTp(_) | Probe::CosActTpHidden | Probe::DistTp | Probe::DistTpLayer(_) => {
                ctx.tp_targets.is_some()
            }
            Probe::DistFf | Probe::DistFfLayer(_) => ctx.feedforward.is_some(),
            Probe::DistRef | Probe::DistRefLayer(_) => ctx.reference.is_some(),
            _ => true,
        };
        if needed {
            Ok(())
        } else {
            Err(PcnError::MissingReference(self.name()))
        }
    }

    pub fn evaluate(&self, net: &Network, state: &ActivityState, mode: &ClampMode, ctx: &ProbeContext) -> Result<f64> {
        self.check_context(ctx)?;
        let depth = net.depth();
        if let Some(tp) = &ctx.tp_targets {
            let used: Vec<usize> = match *self {
                Probe::CosActTp(l) | Probe::DistTpLayer(l) => vec![l],
                Probe::CosActTpHidden => (1..depth).collect(),
                Probe::DistTp => free_layers(net, mode),
                _ => vec![],
            };
            if used.iter().any(|&l| tp.get(l).is_some_and(|t| t.is_empty())) {
                return Err(PcnError::MissingReference(self.name()));
            }
        }
        let check_layer = |l: usize| -> Result<()> {
            if l > depth {
                Err(PcnError::Shape(format!("probe {} names layer {l} beyond depth {depth}", self.name())))
            } else {
                Ok(())
            }
        };
        let hidden: Vec<usize> = (1..depth).collect();
        let value = match *self {
            Probe::CosErrBp(l) => {
                check_layer(l)?;
                let delta = &ctx.bp_adjoints.as_ref().unwrap()[l];
                cosine_similarity(state.error(l.max(1)), &(-delta)).value
            }
            Probe::CosErrBpHidden => {
                let deltas = ctx.bp_adjoints.as_ref().unwrap();
                let neg: Vec<Matrix> = hidden.iter().map(|&l| -&deltas[l]).collect();
                let a: Vec<&Matrix> = hidden.iter().map(|&l| state.error(l)).collect();
                cosine_similarity_concat(&a, &neg.iter().collect::<Vec<_>>()).value
            }
            Probe::CosActTp(l) => {
                check_layer(l)?;
                cosine_similarity(state.activity(l), &ctx.tp_targets.as_ref().unwrap()[l]).value
            }
            Probe::CosActTpHidden => {
                let t = ctx.tp_targets.as_ref().unwrap();
                let a: Vec<&Matrix> = hidden.iter().map(|&l| state.activity(l)).collect();
                let b: Vec<&Matrix> = hidden.iter().map(|&l| &t[l]).collect();
                cosine_similarity_concat(&a, &b).value
            }
            Probe::DistTp => distance_to_reference(state, ctx.tp_targets.as_ref().unwrap(), &free_layers(net, mode))?,
            Probe::DistTpLayer(l) => distance_to_reference(state, ctx.tp_targets.as_ref().unwrap(), &[l])?,
            Probe::DistFf => distance_to_reference(state, ctx.feedforward.as_ref().unwrap(), &free_layers(net, mode))?,
            Probe::DistFfLayer(l) => distance_to_reference(state, ctx.feedforward.as_ref().unwrap(), &[l])?,
            Probe::DistRef => distance_to_reference(state, ctx.reference.as_ref().unwrap(), &free_layers(net, mode))?,
            Probe::DistRefLayer(l) => distance_to_reference(state, ctx.reference.as_ref().unwrap(), &[l])?,
            Probe::MarginalResidual => marginal_condition_residual(net, state, mode),
            Probe::BoundMargin => {
                let b = energy_gradient_bound_check(net, state, mode);
                b.lhs - b.rhs
            }
            Probe::Energy(l) => {
                check_layer(l)?;
                if l == 0 {
                    0.0
                } else {
                    layer_energy(net, state, l)
                }
            }
        };
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{init_activities, run_inference, InferenceSettings, InitMode};
    use crate::linalg::col;
    use crate::network::{build_network, ActivationKind, NetworkSpec};

    fn net(seed: u64) -> Network {
        build_network(&NetworkSpec::with_hidden(&[3, 4, 4, 2], ActivationKind::Tanh, 0.5, seed)).unwrap()
    }

    fn energies_from_definition(net: &Network, acts: &[Matrix]) -> (f64, f64) {
        let depth = net.depth();
        let mut resid = 0.0;
        let mut loss = 0.0;
        for l in 1..=depth {
            let pred = net.activation(l).apply(&(net.weight(l) * &acts[l - 1]));
            let e = (&acts[l] - pred).norm_squared();
            if l == depth {
                loss = e;
            } else {
                resid += e;
            }
        }
        (loss, resid)
    }

    #[test]
    fn energy_examples() {
        let n = net(1);
        let data = col(&[0.2, -0.3, 0.8]);
        let target = col(&[0.5, -0.5]);
        let mode = ClampMode::supervised(data.clone(), target);
        let ff = init_activities(&n, &mode, InitMode::FeedforwardPass).unwrap();
        let r = energy_report(&n, &ff);
        assert_eq!(r.residual, 0.0);
        assert_eq!(r.total, r.output_loss);

        let free = init_activities(&n, &ClampMode::input_only(data), InitMode::FeedforwardPass).unwrap();
        let r = energy_report(&n, &free);
        assert_eq!((r.total, r.output_loss, r.residual), (0.0, 0.0, 0.0));

        let rand = init_activities(&n, &mode, InitMode::Random { std: 1.0, seed: 2 }).unwrap();
        let r = energy_report(&n, &rand);
        let (loss, resid) = energies_from_definition(&n, rand.activities());
        assert!((r.output_loss - loss).abs() < 1e-12);
        assert!((r.residual - resid).abs() < 1e-12);
        assert_eq!(r.total - (r.output_loss + r.residual), 0.0);
    }

    #[test]
    fn lambda_energy_examples() {
        let r = EnergyReport {
            total: 3.0,
            output_loss: 1.0,
            residual: 2.0,
            per_layer: vec![2.0, 1.0],
        };
        assert_eq!(lambda_energy(&r, 0.5).unwrap(), 1.5);
        assert_eq!(lambda_energy(&r, 1.0).unwrap(), 1.0);
        assert_eq!(lambda_energy(&r, 0.0).unwrap(), 2.0);
        assert!(lambda_energy(&r, -0.1).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&col(&[1.0, 0.0]), &col(&[1.0, 0.0])).value, 1.0);
        assert_eq!(cosine_similarity(&col(&[1.0, 0.0]), &col(&[0.0, 1.0])).value, 0.0);
        assert!((cosine_similarity(&col(&[1.0, 1.0]), &col(&[-1.0, -1.0])).value + 1.0).abs() < 1e-15);
        let z = cosine_similarity(&col(&[0.0, 0.0]), &col(&[1.0, 0.0]));
        assert!(z.degenerate);
        assert_eq!(z.value, 0.0);
    }

    #[test]
    fn distance_examples() {
        let n = Network::from_weights(vec![Matrix::identity(2, 2)], vec![ActivationKind::Linear]).unwrap();
        let state = ActivityState::new(&n, vec![col(&[0.0, 0.0]), col(&[3.0, 4.0])]).unwrap();
        let refs = vec![col(&[0.0, 0.0]), col(&[0.0, 0.0])];
        assert_eq!(distance_to_reference(&state, &refs, &[1]).unwrap(), 5.0);
        assert_eq!(distance_to_reference(&state, state.activities(), &[0, 1]).unwrap(), 0.0);
        assert!(distance_to_reference(&state, &[col(&[0.0])], &[0]).is_err());
    }

    fn fd_split(n: &Network, acts: &[Matrix], layer: usize) -> (Matrix, Matrix) {
        let h = 1e-6;
        let rows = acts[layer].nrows();
        let mut gl = Matrix::zeros(rows, 1);
        let mut ge = Matrix::zeros(rows, 1);
        for i in 0..rows {
            let mut p = acts.to_vec();
            p[layer][(i, 0)] += h;
            let mut m = acts.to_vec();
            m[layer][(i, 0)] -= h;
            let (lp, ep) = energies_from_definition(n, &p);
            let (lm, em) = energies_from_definition(n, &m);
            gl[(i, 0)] = (lp - lm) / (2.0 * h);
            ge[(i, 0)] = (ep - em) / (2.0 * h);
        }
        (gl, ge)
    }

    #[test]
    fn split_gradients_match_finite_differences() {
        for seed in 0..5 {
            let n = net(seed);
            let mode = ClampMode::supervised(col(&[0.2, -0.3, 0.8]), col(&[0.5, -0.5]));
            let s = init_activities(&n, &mode, InitMode::Random { std: 1.0, seed }).unwrap();
            let (gl, ge) = energy_split_gradients(&n, &s, &mode);
            for l in 1..n.depth() {
                let (fl, fe) = fd_split(&n, s.activities(), l);
                let scale = crate::linalg::sup_norm(&fl).max(crate::linalg::sup_norm(&fe));
                assert!(crate::linalg::sup_dist(&gl[l], &fl) / scale < 1e-5);
                assert!(crate::linalg::sup_dist(&ge[l], &fe) / scale < 1e-5);
            }
        }
    }

    #[test]
    fn marginal_residual_at_ff_init_is_penultimate_loss_gradient() {
        let n = net(3);
        let mode = ClampMode::supervised(col(&[0.2, -0.3, 0.8]), col(&[0.5, -0.5]));
        let s = init_activities(&n, &mode, InitMode::FeedforwardPass).unwrap();
        let (gl, _) = energy_split_gradients(&n, &s, &mode);
        let r = marginal_condition_residual(&n, &s, &mode);
        assert_eq!(r, crate::linalg::sup_norm(&gl[n.depth() - 1]));
        assert!(r > 0.0);
    }

    #[test]
    fn marginal_residual_vanishes_at_equilibrium() {
        let n = net(4);
        let mode = ClampMode::supervised(col(&[0.2, -0.3, 0.8]), col(&[0.5, -0.5]));
        let settings = InferenceSettings {
            step_size: 0.1,
            max_steps: 20_000,
            convergence_tol: 1e-10,
            ..Default::default()
        };
        let out = run_inference(&n, &mode, &settings, &[], &ProbeContext::default()).unwrap();
        assert!(out.converged);
        assert!(marginal_condition_residual(&n, &out.state, &mode) < 1e-6);
    }

    #[test]
    fn probe_names_round_trip() {
        let probes = [
            Probe::CosErrBp(2),
            Probe::CosErrBpHidden,
            Probe::CosActTp(1),
            Probe::CosActTpHidden,
            Probe::DistTp,
            Probe::DistTpLayer(3),
            Probe::DistFf,
            Probe::DistFfLayer(0),
            Probe::DistRef,
            Probe::DistRefLayer(1),
            Probe::MarginalResidual,
            Probe::BoundMargin,
            Probe::Energy(2),
        ];
        for p in probes {
            assert_eq!(Probe::parse(&p.name()).unwrap(), p);
        }
        assert!(matches!(Probe::parse("bogus"), Err(PcnError::UnknownProbe(_))));
    }

    #[test]
    fn probes_need_their_references() {
        let n = net(5);
        let mode = ClampMode::supervised(col(&[0.2, -0.3, 0.8]), col(&[0.5, -0.5]));
        let err = run_inference(&n, &mode, &InferenceSettings::default(), &[Probe::DistRef], &ProbeContext::default())
            .unwrap_err();
        assert!(matches!(err, PcnError::MissingReference(_)));
    }

    #[test]
    fn cosine_scale_invariance() {
        use proptest::prelude::*;
        proptest!(|(a in proptest::collection::vec(-5.0f64..5.0, 4), b in proptest::collection::vec(-5.0f64..5.0, 4), s in 0.01f64..100.0)| {
            let (ma, mb) = (col(&a), col(&b));
            let base = cosine_similarity(&ma, &mb);
            let scaled = cosine_similarity(&(&ma * s), &mb);
            prop_assume!(!base.degenerate);
            prop_assert!((base.value - scaled.value).abs() < 1e-12);
            prop_assert!(base.value.abs() <= 1.0);
        });
    }
}
