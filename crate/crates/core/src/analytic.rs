//! Closed-form equilibria for linear networks, the fixed-neighbour trajectory,
//! and the convexity certificate.

use crate::error::{PcnError, Result};
use crate::inference::{activity_velocity, ActivityState, ClampMode, Objective};
use crate::linalg::{
    matrix_exponential, min_eigenvalue_symmetric, pseudoinverse, shifted_gram, solve_general, solve_spd, sup_dist,
    sup_norm, Matrix, PINV_TOL,
};
use crate::network::Network;

/// `(I + W_{l+1}^T W_{l+1})^{-1} [W_l x_below + W_{l+1}^T x_above]`.
pub fn linear_equilibrium_layer(w_l: &Matrix, w_lp1: &Matrix, x_below: &Matrix, x_above: &Matrix) -> Result<Matrix> {
    check_layer_shapes(w_l, w_lp1, x_below, x_above)?;
    solve_spd(&shifted_gram(w_lp1), &(w_l * x_below + w_lp1.tr_mul(x_above)))
}

/// `(I + P_l^{-1} W^T P_{l+1} W)^{-1} [W_l x_below + P_l^{-1} W^T P_{l+1} x_above]`.
/// The prefactor is not symmetric in general, so this uses LU.
pub fn precision_equilibrium_layer(
    w_l: &Matrix,
    w_lp1: &Matrix,
    p_l: &Matrix,
    p_lp1: &Matrix,
    x_below: &Matrix,
    x_above: &Matrix,
) -> Result<Matrix> {
    check_layer_shapes(w_l, w_lp1, x_below, x_above)?;
    if p_l.nrows() != w_l.nrows() || p_lp1.nrows() != w_lp1.nrows() {
        return Err(PcnError::Shape("precision size does not match its layer".into()));
    }
    let wt_p = w_lp1.transpose() * p_lp1;
    let scaled = solve_spd(p_l, &wt_p)?;
    let a = Matrix::identity(w_l.nrows(), w_l.nrows()) + &scaled * w_lp1;
    let b = w_l * x_below + scaled * x_above;
    solve_general(&a, &b)
}

fn check_layer_shapes(w_l: &Matrix, w_lp1: &Matrix, x_below: &Matrix, x_above: &Matrix) -> Result<()> {
    if w_lp1.ncols() != w_l.nrows() || x_below.nrows() != w_l.ncols() || x_above.nrows() != w_lp1.nrows() {
        return Err(PcnError::Shape(format!(
            "W_l {:?}, W_l+1 {:?}, x_below {:?}, x_above {:?}",
            w_l.shape(),
            w_lp1.shape(),
            x_below.shape(),
            x_above.shape()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EquilibriumMethod {
    DirectSolve,
    GaussSeidel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    pub activities: Vec<Matrix>,
    /// Sup-norm of the activity velocity at the solution.
    pub residual: f64,
    pub method: EquilibriumMethod,
    /// Gauss-Seidel sweeps used (0 for the direct solve).
    pub sweeps: usize,
}

pub const GAUSS_SEIDEL_TOL: f64 = 1e-12;
pub const GAUSS_SEIDEL_MAX_SWEEPS: usize = 200_000;

/// Equilibrium of a linear network with both ends clamped, honouring its precisions.
pub fn solve_linear_network_equilibrium(
    net: &Network,
    data: &Matrix,
    target: &Matrix,
    method: EquilibriumMethod,
) -> Result<EquilibriumSolution> {
    if !net.is_linear() {
        return Err(PcnError::InvalidSpec("analytic equilibrium needs a linear network".into()));
    }
    let mode = ClampMode::supervised(data.clone(), target.clone());
    let batch = mode.batch_size(net)?;
    let depth = net.depth();
    let (activities, sweeps) = match method {
        EquilibriumMethod::DirectSolve => (direct_solve(net, data, target)?, 0),
        EquilibriumMethod::GaussSeidel => {
            let mut acts: Vec<Matrix> = (0..=depth).map(|l| Matrix::zeros(net.width(l), batch)).collect();
            acts[0] = data.clone();
            acts[depth] = target.clone();
            let mut sweeps = 0;
            loop {
                let mut change: f64 = 0.0;
                for l in 1..depth {
                    let next = precision_equilibrium_layer(
                        net.weight(l),
                        net.weight(l + 1),
                        net.precision(l),
                        net.precision(l + 1),
                        &acts[l - 1],
                        &acts[l + 1],
                    )?;
                    change = change.max(sup_dist(&next, &acts[l]));
                    acts[l] = next;
                }
                sweeps += 1;
                if change < GAUSS_SEIDEL_TOL {
                    break;
                }
                if sweeps >= GAUSS_SEIDEL_MAX_SWEEPS {
                    return Err(PcnError::NoConvergence {
                        iterations: sweeps,
                        residual: change,
                    });
                }
            }
            (acts, sweeps)
        }
    };
    let state = ActivityState::new(net, activities)?;
    let v = activity_velocity(net, &state, &mode, true, Objective::Standard);
    let residual = v.iter().map(sup_norm).fold(0.0, f64::max);
    Ok(EquilibriumSolution {
        activities: state.into_activities(),
        residual,
        method,
        sweeps,
    })
}

/// Solves the block-tridiagonal stationarity system over all hidden layers at once.
fn direct_solve(net: &Network, data: &Matrix, target: &Matrix) -> Result<Vec<Matrix>> {
    let depth = net.depth();
    let batch = data.ncols();
    let mut acts = vec![data.clone()];
    if depth == 1 {
        acts.push(target.clone());
        return Ok(acts);
    }
    let offsets: Vec<usize> = (1..depth)
        .scan(0, |acc, l| {
            let at = *acc;
            *acc += net.width(l);
            Some(at)
        })
        .collect();
    let n: usize = (1..depth).map(|l| net.width(l)).sum();
    let mut a = Matrix::zeros(n, n);
    let mut b = Matrix::zeros(n, batch);
    for l in 1..depth {
        let r = offsets[l - 1];
        let w_up = net.weight(l + 1);
        let p_up = net.precision(l + 1);
        let diag = net.precision(l) + w_up.transpose() * p_up * w_up;
        a.view_mut((r, r), diag.shape()).copy_from(&diag);
        if l > 1 {
            let c = offsets[l - 2];
            let low = -(net.precision(l) * net.weight(l));
            a.view_mut((r, c), low.shape()).copy_from(&low);
            a.view_mut((c, r), (low.ncols(), low.nrows())).copy_from(&low.transpose());
        }
        if l == 1 {
            let rhs = net.precision(1) * net.weight(1) * data;
            let mut block = b.view_mut((r, 0), rhs.shape());
            block += rhs;
        }
        if l == depth - 1 {
            let rhs = w_up.transpose() * p_up * target;
            let mut block = b.view_mut((r, 0), rhs.shape());
            block += rhs;
        }
    }
    let x = solve_spd(&a, &b)?;
    for l in 1..depth {
        acts.push(x.view((offsets[l - 1], 0), (net.width(l), batch)).into_owned());
    }
    acts.push(target.clone());
    Ok(acts)
}

/// Closed-form trajectory of one linear layer with both neighbours held fixed:
/// `x(t) = e^{-At} (x0 - x*) + x*`, `A = I + W_{l+1}^T W_{l+1}`.
pub fn path_to_convergence(
    w_l: &Matrix,
    w_lp1: &Matrix,
    x_below: &Matrix,
    x_above: &Matrix,
    x0: &Matrix,
    t: f64,
) -> Result<Matrix> {
    let fixed = linear_equilibrium_layer(w_l, w_lp1, x_below, x_above)?;
    if x0.shape() != fixed.shape() {
        return Err(PcnError::Shape(format!("x0 is {:?}, layer is {:?}", x0.shape(), fixed.shape())));
    }
    let decay = matrix_exponential(&shifted_gram(w_lp1), -t)?;
    Ok(decay * (x0 - &fixed) + fixed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityCertificate {
    /// Smallest eigenvalue of `I + W_{l+1}^T W_{l+1}` for hidden layers `1..L-1`.
    pub min_eigs: Vec<f64>,
    pub convex: bool,
}

pub fn convexity_certificate(net: &Network) -> Result<ConvexityCertificate> {
    if !net.is_linear() {
        return Err(PcnError::InvalidSpec("convexity certificate needs a linear network".into()));
    }
    let min_eigs = (1..net.depth())
        .map(|l| min_eigenvalue_symmetric(&shifted_gram(net.weight(l + 1))))
        .collect::<Result<Vec<_>>>()?;
    let convex = min_eigs.iter().all(|&e| e >= 1.0 - 1e-9);
    Ok(ConvexityCertificate { min_eigs, convex })
}

/// For an equilibrium whose errors all vanish (below `1e-8`), the largest gap
/// `||W_l x_{l-1} - W_{l+1}^+ x_{l+1}||_inf` over hidden layers. `None` when the
/// errors are not small enough for the condition to apply.
pub fn zero_error_residual(net: &Network, state: &ActivityState) -> Result<Option<f64>> {
    let max_err = state.errors().iter().map(sup_norm).fold(0.0, f64::max);
    if max_err >= 1e-8 {
        return Ok(None);
    }
    let mut worst: f64 = 0.0;
    for l in 1..net.depth() {
        let up = net.weight(l) * state.activity(l - 1);
        let down = pseudoinverse(net.weight(l + 1), PINV_TOL)? * state.activity(l + 1);
        worst = worst.max(sup_dist(&up, &down));
    }
    Ok(Some(worst))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{activity_step, precision_activity_step, run_inference, InferenceSettings};
    use crate::linalg::col;
    use crate::metrics::ProbeContext;
    use crate::network::{build_network, ActivationKind, NetworkSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn linear(widths: &[usize], seed: u64) -> Network {
        build_network(&NetworkSpec::uniform(widths, ActivationKind::Linear, 0.5, seed)).unwrap()
    }

    fn random_col(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 1.0).unwrap();
        Matrix::from_fn(n, 1, |_, _| d.sample(&mut rng))
    }

    #[test]
    fn no_feedback_collapses_to_feedforward() {
        let w = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let x = col(&[1.0, -1.0]);
        let out = linear_equilibrium_layer(&w, &Matrix::zeros(3, 2), &x, &col(&[5.0, 5.0, 5.0])).unwrap();
        assert!(sup_dist(&out, &(&w * &x)) < 1e-15);
    }

    #[test]
    fn layer_formula_is_stationary() {
        for seed in 0..20 {
            let net = linear(&[3, 4, 2], seed);
            let (xb, xa) = (random_col(3, seed), random_col(2, seed + 100));
            let x = linear_equilibrium_layer(net.weight(1), net.weight(2), &xb, &xa).unwrap();
            let e1 = &x - net.weight(1) * &xb;
            let e2 = &xa - net.weight(2) * &x;
            assert!(sup_norm(&(-e1 + net.weight(2).tr_mul(&e2))) < 1e-10);
        }
        // orthogonal feedback weights, no feedforward drive
        let q = Matrix::from_row_slice(2, 2, &[0.6, -0.8, 0.8, 0.6]);
        let xa = col(&[1.0, 2.0]);
        let x = linear_equilibrium_layer(&Matrix::zeros(2, 2), &q, &col(&[1.0, 1.0]), &xa).unwrap();
        assert!(sup_dist(&x, &(q.tr_mul(&xa) * 0.5)) < 1e-14);
    }

    #[test]
    fn precision_formula_reduces_to_identity_case() {
        let net = linear(&[3, 4, 2], 5);
        let (xb, xa) = (random_col(3, 1), random_col(2, 2));
        let a = linear_equilibrium_layer(net.weight(1), net.weight(2), &xb, &xa).unwrap();
        let b = precision_equilibrium_layer(
            net.weight(1),
            net.weight(2),
            &Matrix::identity(4, 4),
            &Matrix::identity(2, 2),
            &xb,
            &xa,
        )
        .unwrap();
        assert!(sup_dist(&a, &b) < 1e-12);
    }

    fn diag(values: &[f64]) -> Matrix {
        Matrix::from_diagonal(&crate::linalg::Vector::from_column_slice(values))
    }

    #[test]
    fn precision_formula_is_a_fixed_point_of_the_dynamics() {
        let mut net = linear(&[3, 4, 2], 6);
        net.set_precisions(vec![diag(&[1.0, 2.0, 3.0, 0.5]), diag(&[4.0, 0.25])]).unwrap();
        let (xb, xa) = (random_col(3, 3), random_col(2, 4));
        let x = precision_equilibrium_layer(net.weight(1), net.weight(2), net.precision(1), net.precision(2), &xb, &xa)
            .unwrap();
        let mode = ClampMode::supervised(xb.clone(), xa.clone());
        let s = ActivityState::new(&net, vec![xb, x.clone(), xa]).unwrap();
        let next = precision_activity_step(&net, &s, &mode, 0.1);
        assert!(sup_dist(next.activity(1), &x) < 1e-12);
    }

    #[test]
    fn high_feedback_ratio_approaches_inverse() {
        let w1 = Matrix::from_row_slice(2, 2, &[0.3, 0.1, -0.2, 0.5]);
        let w2 = Matrix::from_row_slice(2, 2, &[1.0, 0.4, -0.3, 0.8]);
        let xa = col(&[0.7, -0.4]);
        let x = precision_equilibrium_layer(
            &w1,
            &w2,
            &Matrix::identity(2, 2),
            &(Matrix::identity(2, 2) * 1e3),
            &col(&[1.0, 1.0]),
            &xa,
        )
        .unwrap();
        let inv = w2.clone().try_inverse().unwrap() * &xa;
        assert!((&x - &inv).norm() / inv.norm() < 1e-2);
    }

    #[test]
    fn direct_and_gauss_seidel_agree() {
        for seed in 0..10 {
            let net = linear(&[3, 4, 5, 4, 2], seed);
            let (d, t) = (random_col(3, seed), random_col(2, seed + 50));
            let a = solve_linear_network_equilibrium(&net, &d, &t, EquilibriumMethod::DirectSolve).unwrap();
            let b = solve_linear_network_equilibrium(&net, &d, &t, EquilibriumMethod::GaussSeidel).unwrap();
            for l in 0..=4 {
                assert!(sup_dist(&a.activities[l], &b.activities[l]) < 1e-10);
            }
            assert!(a.residual < 1e-10);
        }
    }

    #[test]
    fn single_hidden_layer_is_one_layer_solve() {
        let net = linear(&[3, 4, 2], 7);
        let (d, t) = (random_col(3, 0), random_col(2, 1));
        let sol = solve_linear_network_equilibrium(&net, &d, &t, EquilibriumMethod::DirectSolve).unwrap();
        let layer = linear_equilibrium_layer(net.weight(1), net.weight(2), &d, &t).unwrap();
        assert!(sup_dist(&sol.activities[1], &layer) < 1e-12);
    }

    #[test]
    fn matches_dynamics() {
        let net = linear(&[3, 4, 2], 8);
        let (d, t) = (random_col(3, 2), random_col(2, 3));
        let sol = solve_linear_network_equilibrium(&net, &d, &t, EquilibriumMethod::DirectSolve).unwrap();
        let settings = InferenceSettings {
            step_size: 0.1,
            max_steps: 10_000,
            convergence_tol: 1e-12,
            ..Default::default()
        };
        let out = run_inference(&net, &ClampMode::supervised(d, t), &settings, &[], &ProbeContext::default()).unwrap();
        assert!(sup_dist(out.state.activity(1), &sol.activities[1]) < 1e-8);
    }

    #[test]
    fn nonlinear_nets_are_refused() {
        let net = build_network(&NetworkSpec::uniform(&[2, 2, 2], ActivationKind::Tanh, 0.5, 0)).unwrap();
        assert!(solve_linear_network_equilibrium(&net, &col(&[1.0, 1.0]), &col(&[1.0, 1.0]), EquilibriumMethod::DirectSolve)
            .is_err());
        assert!(convexity_certificate(&net).is_err());
    }

    #[test]
    fn path_endpoints() {
        let net = linear(&[3, 4, 2], 9);
        let (xb, xa, x0) = (random_col(3, 0), random_col(2, 1), random_col(4, 2));
        let at0 = path_to_convergence(net.weight(1), net.weight(2), &xb, &xa, &x0, 0.0).unwrap();
        assert!(sup_dist(&at0, &x0) < 1e-15);
        let late = path_to_convergence(net.weight(1), net.weight(2), &xb, &xa, &x0, 50.0).unwrap();
        let fixed = linear_equilibrium_layer(net.weight(1), net.weight(2), &xb, &xa).unwrap();
        assert!(sup_dist(&late, &fixed) < 1e-9);
    }

    #[test]
    fn path_agrees_with_euler_to_first_order() {
        let net = linear(&[3, 4, 2], 10);
        let (xb, xa, x0) = (random_col(3, 3), random_col(2, 4), random_col(4, 5));
        let horizon = 1.0;
        let exact = path_to_convergence(net.weight(1), net.weight(2), &xb, &xa, &x0, horizon).unwrap();
        let mode = ClampMode::supervised(xb.clone(), xa.clone());
        let euler = |steps: usize| {
            let mut s = ActivityState::new(&net, vec![xb.clone(), x0.clone(), xa.clone()]).unwrap();
            for _ in 0..steps {
                s = activity_step(&net, &s, &mode, horizon / steps as f64);
            }
            sup_dist(s.activity(1), &exact)
        };
        let (e1, e2) = (euler(200), euler(400));
        assert!(((e1 / e2) - 2.0).abs() < 0.2, "{}", e1 / e2);
    }

    #[test]
    fn convexity_examples() {
        let zero = Network::from_weights(vec![Matrix::zeros(2, 2); 3], vec![ActivationKind::Linear; 3]).unwrap();
        let c = convexity_certificate(&zero).unwrap();
        assert_eq!(c.min_eigs, vec![1.0, 1.0]);
        assert!(c.convex);
        let c = convexity_certificate(&linear(&[3, 5, 4, 2], 1)).unwrap();
        assert!(c.convex && c.min_eigs.len() == 2);
    }

    #[test]
    fn zero_error_gap_on_consistent_chain() {
        // square invertible chain with activities that are an exact forward pass
        let net = linear(&[3, 3, 3, 3], 11);
        let d = random_col(3, 6);
        let acts = crate::network::forward_pass(&net, &d).unwrap();
        let s = ActivityState::new(&net, acts).unwrap();
        let gap = zero_error_residual(&net, &s).unwrap().unwrap();
        assert!(gap < 1e-6);
        let noisy = ActivityState::new(&net, vec![d, random_col(3, 1), random_col(3, 2), random_col(3, 3)]).unwrap();
        assert_eq!(zero_error_residual(&net, &noisy).unwrap(), None);
    }
}
