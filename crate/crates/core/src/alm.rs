//! Reusable augmented-Lagrangian machinery: squared-hinge augmented
//! objective, multiplier and penalty updates, a projected-gradient inner
//! maximizer with Armijo backtracking, and the outer loop shared by the
//! power-control and scheduling solvers.
//!
//! Orientation: problems are maximizations with inequality residuals
//! `r_c <= 0` (positive = violated). The augmented objective is
//!
//! `f(x) - (1/(2a)) * sum_c ( max(0, P_c + a r_c)^2 - P_c^2 )`
//!
//! and multipliers update as `P_c <- max(0, P_c + a r_c)`.

use crate::error::{Error, Result};

/// Multiplier vector, penalty parameter and iteration bookkeeping for one
/// augmented-Lagrangian solve.
#[derive(Debug, Clone)]
pub struct AlmState {
    pub multipliers: Vec<f64>,
    pub alpha: f64,
    pub iteration: usize,
    /// Maximum positive residual observed at each outer iteration.
    pub violation_history: Vec<f64>,
}

impl AlmState {
    /// Reference initialization: penalty 2, every multiplier 0.1.
    pub fn paper_init(num_multipliers: usize) -> Self {
        AlmState {
            multipliers: vec![0.1; num_multipliers],
            alpha: 2.0,
            iteration: 0,
            violation_history: Vec::new(),
        }
    }

    pub fn new(num_multipliers: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidParameter(format!("alpha={alpha} must be > 0")));
        }
        Ok(AlmState {
            multipliers: vec![0.0; num_multipliers],
            alpha,
            iteration: 0,
            violation_history: Vec::new(),
        })
    }
}

/// Knobs shared by both solvers.
#[derive(Debug, Clone)]
pub struct AlmSettings {
    /// Convergence threshold on the monitored variable change.
    pub err_tol: f64,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    /// Multiplicative penalty growth applied when the maximum violation
    /// fails to shrink by a factor of 0.9.
    pub penalty_growth: f64,
    pub penalty_cap: f64,
    pub inner_step_init: f64,
    pub armijo_c: f64,
    /// Projected-gradient norm at which the inner maximizer stops.
    pub inner_grad_tol: f64,
    /// Violation level treated as feasible when tracking the best iterate,
    /// in multiples of the per-family tolerance reported by the problem.
    pub feas_ratio: f64,
}

impl Default for AlmSettings {
    fn default() -> Self {
        AlmSettings {
            err_tol: 1e-3,
            max_outer_iters: 100,
            max_inner_iters: 200,
            penalty_growth: 1.5,
            penalty_cap: 1e6,
            inner_step_init: 1.0,
            armijo_c: 1e-4,
            inner_grad_tol: 1e-7,
            feas_ratio: 1.0,
        }
    }
}

/// Squared-hinge augmented objective. Residuals are oriented so positive
/// means violated; the hinge bracket is subtracted so that violations
/// penalize the maximizer. Rejects a nonpositive penalty parameter.
pub fn augmented_objective(base_utility: f64, residuals: &[f64], state: &AlmState) -> Result<f64> {
    if !(state.alpha > 0.0) {
        return Err(Error::InvalidParameter(format!("alpha={} must be > 0", state.alpha)));
    }
    debug_assert_eq!(residuals.len(), state.multipliers.len());
    let mut penalty = 0.0;
    for (r, psi) in residuals.iter().zip(&state.multipliers) {
        let hinge = (psi + state.alpha * r).max(0.0);
        penalty += hinge * hinge - psi * psi;
    }
    Ok(base_utility - penalty / (2.0 * state.alpha))
}

/// Classic first-order multiplier update, floored at zero.
pub fn update_multiplier(psi: f64, alpha: f64, residual: f64) -> f64 {
    (psi + alpha * residual).max(0.0)
}

/// Augmented objective without the [`AlmState`] wrapper; same formula as
/// [`augmented_objective`].
pub fn hinge_penalized(base: f64, residuals: &[f64], multipliers: &[f64], alpha: f64) -> f64 {
    let mut penalty = 0.0;
    for (r, psi) in residuals.iter().zip(multipliers) {
        let hinge = (psi + alpha * r).max(0.0);
        penalty += hinge * hinge - psi * psi;
    }
    base - penalty / (2.0 * alpha)
}

/// Outcome of one inner projected-gradient maximization.
#[derive(Debug, Clone)]
pub struct InnerResult {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Objective after each accepted step (monotone nondecreasing).
    pub trace: Vec<f64>,
    pub iters: usize,
    pub converged: bool,
}

#[inline]
fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
}

/// Projected gradient ascent with Armijo backtracking on a box.
///
/// Accepts a step `x+ = proj(x + t g)` when
/// `f(x+) >= f(x) + c <g, x+ - x>`; stops when the unit-step projected
/// gradient falls below `inner_grad_tol` or the iteration budget runs out.
/// Surfaces non-finite objective evaluations as errors.
pub fn inner_maximize(
    f: &mut dyn FnMut(&[f64]) -> f64,
    grad: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    lower: &[f64],
    upper: &[f64],
    start: &[f64],
    settings: &AlmSettings,
) -> Result<InnerResult> {
    let mut x = start.to_vec();
    project(&mut x, lower, upper);
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Err(Error::NonFiniteObjective(0));
    }
    let mut trace = vec![fx];
    let mut step = settings.inner_step_init;
    let mut converged = false;
    let mut iters = 0;
    for it in 0..settings.max_inner_iters {
        iters = it + 1;
        let g = grad(&x);
        // First-order stationarity on the box: unit-step projected gradient.
        let mut pg_norm = 0.0f64;
        for i in 0..x.len() {
            let moved = (x[i] + g[i]).clamp(lower[i], upper[i]) - x[i];
            pg_norm = pg_norm.max(moved.abs());
        }
        if pg_norm <= settings.inner_grad_tol {
            converged = true;
            break;
        }
        // Armijo backtracking along the projection arc.
        let mut t = step;
        let mut accepted = false;
        for _ in 0..60 {
            let mut xt = x.clone();
            for i in 0..xt.len() {
                xt[i] += t * g[i];
            }
            project(&mut xt, lower, upper);
            let mut dir_deriv = 0.0;
            for i in 0..x.len() {
                dir_deriv += g[i] * (xt[i] - x[i]);
            }
            if dir_deriv <= 0.0 {
                break; // projection removed all ascent
            }
            let ft = f(&xt);
            if !ft.is_finite() {
                return Err(Error::NonFiniteObjective(it));
            }
            if ft >= fx + settings.armijo_c * dir_deriv {
                x = xt;
                fx = ft;
                trace.push(fx);
                accepted = true;
                // Allow the step to grow back between iterations.
                step = (t * 2.0).min(settings.inner_step_init.max(t * 2.0));
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            converged = true; // no ascent direction survives projection
            break;
        }
    }
    Ok(InnerResult { x, objective: fx, trace, iters, converged })
}

/// A box-constrained maximization with hinge-penalized inequality residuals.
pub trait AlmProblem {
    fn dim(&self) -> usize;
    fn lower(&self) -> Vec<f64>;
    fn upper(&self) -> Vec<f64>;
    fn num_residuals(&self) -> usize;
    fn base_objective(&self, x: &[f64]) -> f64;
    fn residuals(&self, x: &[f64]) -> Vec<f64>;
    /// Ascent gradient of the augmented objective at `x`.
    fn augmented_gradient(&self, x: &[f64], multipliers: &[f64], alpha: f64) -> Vec<f64>;
    /// Augmented objective at `x`. Override to share one model evaluation
    /// between the base objective and the residuals.
    fn augmented_value(&self, x: &[f64], multipliers: &[f64], alpha: f64) -> f64 {
        hinge_penalized(self.base_objective(x), &self.residuals(x), multipliers, alpha)
    }
    /// Hook called at the start of every outer iteration (for successive
    /// convex approximation refreshes). Default: no-op.
    fn refresh(&mut self, _x: &[f64]) {}
    /// Worst violation in multiples of each family's tolerance; used for
    /// best-iterate tracking. Default: raw max positive residual.
    fn violation_ratio(&self, residuals: &[f64]) -> f64 {
        residuals.iter().fold(0.0f64, |a, r| a.max(*r))
    }
    /// Indices of the variable block monitored for outer convergence.
    /// Default: every variable.
    fn monitored(&self) -> std::ops::Range<usize> {
        0..self.dim()
    }
}

/// One row of the per-iteration solve log.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub phase: &'static str,
    pub t: usize,
    pub objective: f64,
    pub max_violation: f64,
    pub alpha: f64,
}

/// Result of an outer augmented-Lagrangian loop.
#[derive(Debug, Clone)]
pub struct OuterResult {
    pub x: Vec<f64>,
    pub state: AlmState,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
    /// Best iterate seen, preferring feasibility then objective.
    pub best_x: Vec<f64>,
    pub best_objective: f64,
    pub best_violation_ratio: f64,
}

/// Alternates inner maximization with multiplier updates until the monitored
/// variables stop moving and the residuals are inside tolerance, growing the
/// penalty whenever the maximum violation fails to shrink by a factor 0.9.
pub fn outer_loop(
    problem: &mut dyn AlmProblem,
    start: &[f64],
    mut state: AlmState,
    settings: &AlmSettings,
    phase: &'static str,
) -> Result<OuterResult> {
    assert_eq!(state.multipliers.len(), problem.num_residuals());
    let lower = problem.lower();
    let upper = problem.upper();
    let mut x = start.to_vec();
    project(&mut x, &lower, &upper);
    let mut trace = Vec::new();
    let mut best_x = x.clone();
    let mut best_objective = f64::NEG_INFINITY;
    let mut best_ratio = f64::INFINITY;
    let mut prev_maxviol = f64::INFINITY;
    let mut converged = false;

    for outer in 0..settings.max_outer_iters {
        problem.refresh(&x);
        let multipliers = state.multipliers.clone();
        let alpha = state.alpha;
        let mut fobj = |y: &[f64]| problem.augmented_value(y, &multipliers, alpha);
        let mut fgrad = |y: &[f64]| problem.augmented_gradient(y, &multipliers, alpha);
        let inner = inner_maximize(&mut fobj, &mut fgrad, &lower, &upper, &x, settings)?;

        let res = problem.residuals(&inner.x);
        let maxviol = res.iter().fold(0.0f64, |a, r| a.max(*r));
        let ratio = problem.violation_ratio(&res);
        let base = problem.base_objective(&inner.x);
        trace.push(TraceRow { phase, t: outer, objective: base, max_violation: maxviol, alpha: state.alpha });
        state.violation_history.push(maxviol);
        state.iteration = outer + 1;

        let better = (ratio <= settings.feas_ratio && best_ratio <= settings.feas_ratio && base > best_objective)
            || (ratio <= settings.feas_ratio && best_ratio > settings.feas_ratio)
            || (ratio > settings.feas_ratio && best_ratio > settings.feas_ratio && ratio < best_ratio);
        if better || best_objective == f64::NEG_INFINITY {
            best_x = inner.x.clone();
            best_objective = base;
            best_ratio = ratio;
        }

        let monitored = problem.monitored();
        let delta = x[monitored.clone()]
            .iter()
            .zip(&inner.x[monitored])
            .fold(0.0f64, |a, (old, new)| a.max((old - new).abs()));
        x = inner.x;

        if delta < settings.err_tol && ratio <= settings.feas_ratio {
            converged = true;
            break;
        }

        for (psi, r) in state.multipliers.iter_mut().zip(&res) {
            *psi = update_multiplier(*psi, state.alpha, *r);
        }
        if maxviol > 0.9 * prev_maxviol && maxviol > 0.0 {
            state.alpha = (state.alpha * settings.penalty_growth).min(settings.penalty_cap);
        }
        prev_maxviol = maxviol;
    }

    Ok(OuterResult {
        x,
        state,
        converged,
        trace,
        best_x,
        best_objective,
        best_violation_ratio: best_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn augmented_objective_hand_values() {
        // Hinge: ([0.1 + 2*1]+)^2 - 0.01 = 4.4 -> contribution 4.4/4 = 1.1.
        let state = AlmState {
            multipliers: vec![0.1],
            alpha: 2.0,
            iteration: 0,
            violation_history: vec![],
        };
        let got = augmented_objective(10.0, &[1.0], &state).unwrap();
        assert!((got - (10.0 - 1.1)).abs() < 1e-12, "got {got}");

        // Zero residual contributes nothing.
        let got = augmented_objective(10.0, &[0.0], &state).unwrap();
        assert!((got - 10.0).abs() < 1e-12);

        // Inactive constraint with zero multiplier leaves the base intact.
        let zero = AlmState {
            multipliers: vec![0.0],
            alpha: 2.0,
            iteration: 0,
            violation_history: vec![],
        };
        let got = augmented_objective(7.0, &[-3.0], &zero).unwrap();
        assert_eq!(got, 7.0);
    }

    #[test]
    fn augmented_objective_rejects_bad_alpha() {
        let state =
            AlmState { multipliers: vec![], alpha: 0.0, iteration: 0, violation_history: vec![] };
        assert!(augmented_objective(1.0, &[], &state).is_err());
    }

    #[test]
    fn multiplier_update_cases() {
        assert_eq!(update_multiplier(0.1, 2.0, -1.0), 0.0);
        assert_eq!(update_multiplier(0.1, 2.0, 0.0), 0.1);
        assert!((update_multiplier(0.1, 2.0, 0.5) - 1.1).abs() < 1e-15);
        assert!(update_multiplier(0.5, 3.0, -10.0) >= 0.0);
    }

    #[test]
    fn inner_concave_quadratic_interior() {
        let settings = AlmSettings { inner_grad_tol: 1e-8, ..Default::default() };
        let mut f = |x: &[f64]| -(x[0] - 3.0).powi(2);
        let mut g = |x: &[f64]| vec![-2.0 * (x[0] - 3.0)];
        let r = inner_maximize(&mut f, &mut g, &[0.0], &[10.0], &[9.0], &settings).unwrap();
        assert!((r.x[0] - 3.0).abs() < 1e-4, "x {}", r.x[0]);
        assert!(r.converged);
    }

    #[test]
    fn inner_concave_quadratic_boundary() {
        let settings = AlmSettings::default();
        let mut f = |x: &[f64]| -(x[0] - 3.0).powi(2);
        let mut g = |x: &[f64]| vec![-2.0 * (x[0] - 3.0)];
        let r = inner_maximize(&mut f, &mut g, &[0.0], &[2.0], &[0.5], &settings).unwrap();
        assert!((r.x[0] - 2.0).abs() < 1e-9, "x {}", r.x[0]);
    }

    #[test]
    fn inner_trace_is_monotone() {
        use rand::{Rng, SeedableRng};
        let settings = AlmSettings { max_inner_iters: 60, ..Default::default() };
        for seed in 0..20u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            // Nonconcave test objective with a sine ripple.
            let af = a.clone();
            let mut f = move |x: &[f64]| {
                let mut v = 0.0;
                for i in 0..3 {
                    v += -(x[i] - af[i]).powi(2) + 0.3 * (4.0 * x[i]).sin();
                }
                v
            };
            let ag = a.clone();
            let mut g = move |x: &[f64]| {
                (0..3)
                    .map(|i| -2.0 * (x[i] - ag[i]) + 1.2 * (4.0 * x[i]).cos())
                    .collect()
            };
            let start: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r =
                inner_maximize(&mut f, &mut g, &[-3.0; 3], &[3.0; 3], &start, &settings).unwrap();
            for pair in r.trace.windows(2) {
                assert!(pair[1] >= pair[0] - 1e-12);
            }
        }
    }

    #[test]
    fn inner_surfaces_non_finite() {
        let settings = AlmSettings::default();
        let mut f = |x: &[f64]| (1.0 / x[0]).ln(); // NaN for x<0... -inf at large x
        let mut g = |_: &[f64]| vec![f64::NAN];
        let r = inner_maximize(&mut f, &mut g, &[-1.0], &[1.0], &[-0.5], &settings);
        assert!(r.is_err());
    }

    /// max -(x-3)^2 s.t. x <= 2 on [0,10]: optimum x*=2, multiplier 2.
    struct Toy1;
    impl AlmProblem for Toy1 {
        fn dim(&self) -> usize {
            1
        }
        fn lower(&self) -> Vec<f64> {
            vec![0.0]
        }
        fn upper(&self) -> Vec<f64> {
            vec![10.0]
        }
        fn num_residuals(&self) -> usize {
            1
        }
        fn base_objective(&self, x: &[f64]) -> f64 {
            -(x[0] - 3.0).powi(2)
        }
        fn residuals(&self, x: &[f64]) -> Vec<f64> {
            vec![x[0] - 2.0]
        }
        fn augmented_gradient(&self, x: &[f64], psi: &[f64], alpha: f64) -> Vec<f64> {
            let w = (psi[0] + alpha * (x[0] - 2.0)).max(0.0);
            vec![-2.0 * (x[0] - 3.0) - w]
        }
    }

    #[test]
    fn outer_converges_on_constrained_toy() {
        let mut toy = Toy1;
        let settings = AlmSettings { err_tol: 1e-5, feas_ratio: 1e-4, ..Default::default() };
        let state = AlmState::paper_init(1);
        let r = outer_loop(&mut toy, &[0.0], state, &settings, "toy").unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 2.0).abs() < 1e-3, "x {}", r.x[0]);
        // KKT: multiplier ~ 2, complementary slackness ~ 0.
        let psi = r.state.multipliers[0];
        assert!((psi - 2.0).abs() < 1e-2, "psi {psi}");
        assert!((psi * (r.x[0] - 2.0)).abs() < 1e-3);
    }

    /// Feasible unconstrained toy started at its optimum: one outer iteration.
    struct Toy2;
    impl AlmProblem for Toy2 {
        fn dim(&self) -> usize {
            1
        }
        fn lower(&self) -> Vec<f64> {
            vec![-5.0]
        }
        fn upper(&self) -> Vec<f64> {
            vec![5.0]
        }
        fn num_residuals(&self) -> usize {
            1
        }
        fn base_objective(&self, x: &[f64]) -> f64 {
            -x[0] * x[0]
        }
        fn residuals(&self, x: &[f64]) -> Vec<f64> {
            vec![x[0] - 4.0] // inactive at optimum
        }
        fn augmented_gradient(&self, x: &[f64], psi: &[f64], alpha: f64) -> Vec<f64> {
            let w = (psi[0] + alpha * (x[0] - 4.0)).max(0.0);
            vec![-2.0 * x[0] - w]
        }
    }

    #[test]
    fn outer_unconstrained_converges_in_one_iteration() {
        let mut toy = Toy2;
        let settings = AlmSettings::default();
        let state = AlmState::new(1, 2.0).unwrap();
        let r = outer_loop(&mut toy, &[0.0], state, &settings, "toy").unwrap();
        assert!(r.converged);
        assert_eq!(r.state.iteration, 1);
        assert_eq!(r.x[0], 0.0);
    }

    /// Contradictory constraints x <= 0 and x >= 1: multipliers must diverge.
    struct ToyInfeasible;
    impl AlmProblem for ToyInfeasible {
        fn dim(&self) -> usize {
            1
        }
        fn lower(&self) -> Vec<f64> {
            vec![-10.0]
        }
        fn upper(&self) -> Vec<f64> {
            vec![10.0]
        }
        fn num_residuals(&self) -> usize {
            2
        }
        fn base_objective(&self, _x: &[f64]) -> f64 {
            0.0
        }
        fn residuals(&self, x: &[f64]) -> Vec<f64> {
            vec![x[0], 1.0 - x[0]]
        }
        fn augmented_gradient(&self, x: &[f64], psi: &[f64], alpha: f64) -> Vec<f64> {
            let w0 = (psi[0] + alpha * x[0]).max(0.0);
            let w1 = (psi[1] + alpha * (1.0 - x[0])).max(0.0);
            vec![-w0 + w1]
        }
    }

    #[test]
    fn outer_reports_nonconvergence_on_infeasible_toy() {
        let mut toy = ToyInfeasible;
        let settings = AlmSettings {
            max_outer_iters: 25,
            feas_ratio: 1e-6,
            err_tol: 1e-9,
            ..Default::default()
        };
        let state = AlmState::paper_init(2);
        let r = outer_loop(&mut toy, &[5.0], state, &settings, "toy").unwrap();
        assert!(!r.converged);
        // The total multiplier mass grows monotonically once stuck.
        let psi_sum: f64 = r.state.multipliers.iter().sum();
        assert!(psi_sum > 1.0, "multipliers {:?}", r.state.multipliers);
        assert!(r.best_violation_ratio >= 0.4);
    }
}
