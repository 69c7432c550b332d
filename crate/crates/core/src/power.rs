//! Power-control sub-problem: maximize total QoE over `(p, q)` with the
//! schedule fixed, using the lambda-convexified joint-transmission bound
//! inside the SINR and the shared augmented-Lagrangian machinery.
//!
//! Only scheduled `p` entries and primary-held `q` entries are free
//! variables; everything else keeps its incoming value.

use crate::alm::{outer_loop, AlmProblem, AlmSettings, AlmState, TraceRow};
use crate::channel::OrderTable;
use crate::error::Result;
use crate::eval::{JtMode, ModelEval, RateWeights, ScheduleView};
use crate::feasibility::Tolerances;
use crate::model::{NetworkInstance, PowerAllocation, Schedule};
use crate::sinr::LambdaRule;

/// Entries below this are treated as switched off when forming the tight
/// per-pair lambda ratio.
pub const POWER_FLOOR: f64 = 1e-12;

/// Lambda refresh policy for the convexified joint-transmission term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaPolicy {
    /// One fixed lambda for every SBS pair.
    Fixed(f64),
    /// Per-pair ratio `p''/p'` from the previous outer iterate.
    RatioFromPrevious,
}

#[derive(Debug, Clone)]
pub struct PowerSolveConfig {
    pub lambda_policy: LambdaPolicy,
    pub power_floor: f64,
    pub alm: AlmSettings,
    pub tol: Tolerances,
}

impl Default for PowerSolveConfig {
    fn default() -> Self {
        PowerSolveConfig {
            lambda_policy: LambdaPolicy::RatioFromPrevious,
            power_floor: POWER_FLOOR,
            alm: AlmSettings::default(),
            tol: Tolerances::default(),
        }
    }
}

/// Tight per-pair lambda table from a previous iterate (ratio rule with the
/// power-floor fallback).
pub fn refresh_lambda(prev: &PowerAllocation, floor: f64) -> LambdaRule {
    LambdaRule::ratio_from(prev, floor)
}

/// Outcome of one sub-problem solve.
#[derive(Debug, Clone)]
pub struct PhaseReport {
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    pub outer_iters: usize,
    /// Objective of the optimization model (convexified interference).
    pub model_utility: f64,
    /// Exact-model total QoE at the returned point.
    pub exact_utility: f64,
}

struct PowerProblem<'a> {
    inst: &'a NetworkInstance,
    sched: &'a Schedule,
    order: OrderTable,
    template: PowerAllocation,
    active_p: Vec<usize>,
    active_q: Vec<usize>,
    jt: JtMode,
    policy: LambdaPolicy,
    floor: f64,
    tol: Tolerances,
}

impl<'a> PowerProblem<'a> {
    fn new(
        inst: &'a NetworkInstance,
        sched: &'a Schedule,
        start: &PowerAllocation,
        cfg: &PowerSolveConfig,
    ) -> Self {
        let (ll, gg, mm, nn) = inst.dims();
        let mut active_p = Vec::new();
        for l in 0..ll {
            for g in 0..gg {
                for n in 0..nn {
                    if sched.chi_at(l, g, n) > 0.5 {
                        active_p.push((l * gg + g) * nn + n);
                    }
                }
            }
        }
        let mut active_q = Vec::new();
        for m in 0..mm {
            for n in 0..nn {
                if inst.pi(m, n) > 0.5 {
                    active_q.push(m * nn + n);
                }
            }
        }
        let jt = match cfg.lambda_policy {
            LambdaPolicy::Fixed(v) => JtMode::Convex(LambdaRule::Fixed(v)),
            LambdaPolicy::RatioFromPrevious => {
                JtMode::Convex(refresh_lambda(start, cfg.power_floor))
            }
        };
        PowerProblem {
            inst,
            sched,
            order: OrderTable::from_schedule(inst, sched),
            template: start.clone(),
            active_p,
            active_q,
            jt,
            policy: cfg.lambda_policy,
            floor: cfg.power_floor,
            tol: cfg.tol,
        }
    }

    fn scatter(&self, x: &[f64]) -> PowerAllocation {
        let mut pw = self.template.clone();
        for (i, &idx) in self.active_p.iter().enumerate() {
            pw.p[idx] = x[i];
        }
        let off = self.active_p.len();
        for (i, &idx) in self.active_q.iter().enumerate() {
            pw.q[idx] = x[off + i];
        }
        pw
    }

    fn gather(&self, pw: &PowerAllocation) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        for &idx in &self.active_p {
            x.push(pw.p[idx]);
        }
        for &idx in &self.active_q {
            x.push(pw.q[idx]);
        }
        x
    }

    /// Residual order: mbs_power, sbs_power[l], backhaul[l], put_qos[m],
    /// mos_floor[g].
    fn residuals_from_eval(&self, pw: &PowerAllocation, ev: &ModelEval) -> Vec<f64> {
        let (ll, gg, mm, nn) = self.inst.dims();
        let cfg = &self.inst.config;
        let mut res = Vec::with_capacity(self.num_residuals());
        let mut mbs = 0.0;
        for &idx in &self.active_q {
            mbs += pw.q[idx];
        }
        res.push(mbs - cfg.q_max);
        for l in 0..ll {
            let mut s = 0.0;
            for g in 0..gg {
                for n in 0..nn {
                    s += self.sched.eps_at(l, g, n) * pw.p_at(l, g, n);
                }
            }
            res.push(s - cfg.p_max[l]);
        }
        for l in 0..ll {
            res.push(ev.backhaul_rates()[l] * cfg.subcarrier_bandwidth - cfg.backhaul_cap[l]);
        }
        for m in 0..mm {
            res.push(cfg.put_rate_min[m] - ev.put_rates()[m]);
        }
        for g in 0..gg {
            res.push(cfg.mos_min[g] - ev.mos_values()[g]);
        }
        res
    }
}

impl AlmProblem for PowerProblem<'_> {
    fn dim(&self) -> usize {
        self.active_p.len() + self.active_q.len()
    }

    fn lower(&self) -> Vec<f64> {
        vec![self.floor; self.dim()]
    }

    fn upper(&self) -> Vec<f64> {
        let (_, gg, _, nn) = self.inst.dims();
        let mut up = Vec::with_capacity(self.dim());
        for &idx in &self.active_p {
            let l = idx / (gg * nn);
            up.push(self.inst.config.p_max[l]);
        }
        for _ in &self.active_q {
            up.push(self.inst.config.q_max);
        }
        up
    }

    fn num_residuals(&self) -> usize {
        let (ll, gg, mm, _) = self.inst.dims();
        1 + 2 * ll + mm + gg
    }

    fn base_objective(&self, x: &[f64]) -> f64 {
        let pw = self.scatter(x);
        ModelEval::compute(self.inst, ScheduleView::of(self.sched), &pw, &self.jt, &self.order)
            .utility()
    }

    fn residuals(&self, x: &[f64]) -> Vec<f64> {
        let pw = self.scatter(x);
        let ev =
            ModelEval::compute(self.inst, ScheduleView::of(self.sched), &pw, &self.jt, &self.order);
        self.residuals_from_eval(&pw, &ev)
    }

    fn augmented_value(&self, x: &[f64], multipliers: &[f64], alpha: f64) -> f64 {
        let pw = self.scatter(x);
        let ev =
            ModelEval::compute(self.inst, ScheduleView::of(self.sched), &pw, &self.jt, &self.order);
        let res = self.residuals_from_eval(&pw, &ev);
        crate::alm::hinge_penalized(ev.utility(), &res, multipliers, alpha)
    }

    fn augmented_gradient(&self, x: &[f64], multipliers: &[f64], alpha: f64) -> Vec<f64> {
        let (ll, gg, mm, nn) = self.inst.dims();
        let pw = self.scatter(x);
        let ev =
            ModelEval::compute(self.inst, ScheduleView::of(self.sched), &pw, &self.jt, &self.order);
        let res = self.residuals_from_eval(&pw, &ev);
        let w: Vec<f64> =
            res.iter().zip(multipliers).map(|(r, psi)| (psi + alpha * r).max(0.0)).collect();

        let mut weights = RateWeights::zeros(self.inst);
        for g in 0..gg {
            weights.mos[g] = 1.0 + w[1 + 2 * ll + mm + g];
        }
        for m in 0..mm {
            weights.put[m] = w[1 + 2 * ll + m];
        }
        for l in 0..ll {
            weights.backhaul[l] = -w[1 + ll + l] * self.inst.config.subcarrier_bandwidth;
        }
        let (dp, dq) = ev.grad_power(&weights);

        let mut grad = Vec::with_capacity(self.dim());
        for &idx in &self.active_p {
            let l = idx / (gg * nn);
            // Linear per-SBS power-budget term; eps = 1 on active entries.
            grad.push(dp[idx] - w[1 + l]);
        }
        for &idx in &self.active_q {
            grad.push(dq[idx] - w[0]);
        }
        grad
    }

    fn refresh(&mut self, x: &[f64]) {
        if self.policy == LambdaPolicy::RatioFromPrevious {
            let pw = self.scatter(x);
            self.jt = JtMode::Convex(refresh_lambda(&pw, self.floor));
        }
    }

    fn violation_ratio(&self, residuals: &[f64]) -> f64 {
        let (ll, gg, mm, _) = self.inst.dims();
        let bw_tol = self.tol.rate * self.inst.config.subcarrier_bandwidth;
        let mut worst = 0.0f64;
        let mut scale = |r: f64, t: f64| worst = worst.max(r / t);
        scale(residuals[0], self.tol.power);
        for l in 0..ll {
            scale(residuals[1 + l], self.tol.power);
            scale(residuals[1 + ll + l], bw_tol);
        }
        for m in 0..mm {
            scale(residuals[1 + 2 * ll + m], self.tol.rate);
        }
        for g in 0..gg {
            scale(residuals[1 + 2 * ll + mm + g], self.tol.mos);
        }
        worst
    }
}

/// Solves the power sub-problem. Returns the best iterate (feasibility
/// preferred, then model objective) and a phase report; `converged` is false
/// when the iteration budget ran out before the variables settled.
pub fn solve_power(
    inst: &NetworkInstance,
    sched: &Schedule,
    start: &PowerAllocation,
    cfg: &PowerSolveConfig,
) -> Result<(PowerAllocation, PhaseReport)> {
    assert!(!sched.relaxed, "power control requires a binary schedule");
    let mut problem = PowerProblem::new(inst, sched, start, cfg);
    let x0 = problem.gather(start);
    let state = AlmState::paper_init(problem.num_residuals());
    let out = outer_loop(&mut problem, &x0, state, &cfg.alm, "power")?;

    let chosen = if out.converged { out.x.clone() } else { out.best_x.clone() };
    let pw = problem.scatter(&chosen);
    let model_utility = problem.base_objective(&chosen);
    let exact_utility = crate::sinr::total_qoe(inst, sched, &pw);
    debug_assert!(
        exact_utility >= model_utility - 1e-6,
        "convex bound must understate utility: exact {exact_utility} model {model_utility}"
    );
    Ok((
        pw,
        PhaseReport {
            trace: out.trace,
            converged: out.converged,
            outer_iters: out.state.iteration,
            model_utility,
            exact_utility,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_instance, ChannelModelParams};
    use crate::model::{NetworkConfig, ServiceKind};
    use crate::qoe::MosCurve;

    #[test]
    fn refresh_lambda_cases() {
        let mut pw = PowerAllocation::zeros(2, 1, 1, 1);
        pw.set_p(0, 0, 0, 1.0);
        pw.set_p(1, 0, 0, 4.0);
        let rule = refresh_lambda(&pw, POWER_FLOOR);
        assert_eq!(rule.lambda(0, 1, 0, 0), 4.0);
        assert_eq!(rule.lambda(1, 0, 0, 0), 0.25);
        // Equal powers -> 1.
        pw.set_p(1, 0, 0, 1.0);
        let rule = refresh_lambda(&pw, POWER_FLOOR);
        assert_eq!(rule.lambda(0, 1, 0, 0), 1.0);
        // Zero p' -> floor fallback 1.
        pw.set_p(0, 0, 0, 0.0);
        let rule = refresh_lambda(&pw, POWER_FLOOR);
        assert_eq!(rule.lambda(0, 1, 0, 0), 1.0);
    }

    /// Single SUT, single SBS, one subcarrier, PUT far away: the utility is
    /// increasing in p, so the solve concentrates at the box corner found by
    /// a dense 1-D grid search.
    #[test]
    fn single_link_concentrates_at_grid_optimum() {
        let cfg = NetworkConfig::with_dims(ServiceKind::Web, 1, 1, 1, 1, 42);
        let mut inst = generate_instance(&cfg, &ChannelModelParams::default()).unwrap();
        let sigma = inst.config.noise_power[0];
        // Keep the single-link SNR at p_max around 2^5 so rate ~5 < 7.
        inst.gain_sbs_sut[0] = 31.0 * sigma / inst.config.p_max[0];
        // PUT comfortably served: strong MBS link, weak SBS-PUT coupling.
        inst.gain_mbs_put[0] = 1e3 * sigma / inst.config.q_max;
        inst.gain_sbs_put[0] = 1e-6 * sigma / inst.config.p_max[0];
        inst.gain_mbs_sut[0] = 1e-3 * sigma / inst.config.q_max; // negligible UDL

        let mut sched = Schedule::zeros(1, 1, 1);
        sched.set_theta(0, 0, 1.0);
        sched.set_eps(0, 0, 0, 1.0);
        sched.sync_chi();

        let start = PowerAllocation::uniform_init(&inst);
        let solve_cfg = PowerSolveConfig::default();
        let (pw, report) = solve_power(&inst, &sched, &start, &solve_cfg).unwrap();

        // 1-D grid oracle over p with q fixed at the returned value.
        let curve = MosCurve::new(inst.config.service_profile());
        let mut best = f64::NEG_INFINITY;
        let mut best_p = 0.0;
        for i in 0..10_000 {
            let p = inst.config.p_max[0] * (i as f64 + 1.0) / 10_000.0;
            let mut cand = pw.clone();
            cand.set_p(0, 0, 0, p);
            let put_ok = crate::sinr::put_rate(&inst, &sched, &cand, 0)
                >= inst.config.put_rate_min[0] - 1e-6;
            if !put_ok {
                continue;
            }
            let u = curve.mos(crate::sinr::sut_rate(&inst, &sched, &cand, 0));
            if u > best {
                best = u;
                best_p = p;
            }
        }
        let got = crate::sinr::total_qoe(&inst, &sched, &pw);
        assert!(report.converged);
        assert!(got >= best - 1e-3, "solver {got} vs grid {best} (p* = {best_p})");
        assert!((pw.p_at(0, 0, 0) - inst.config.p_max[0]).abs() < 1e-3 * inst.config.p_max[0]);
    }

    /// Binding PUT protection: the SBS-PUT coupling is strong enough that
    /// full SBS power would break the PUT floor, so the returned power stays
    /// strictly below the box and the residual is nonpositive.
    #[test]
    fn put_qos_binds_power_below_box() {
        let cfg = NetworkConfig::with_dims(ServiceKind::Web, 1, 1, 1, 1, 7);
        let mut inst = generate_instance(&cfg, &ChannelModelParams::default()).unwrap();
        let sigma = inst.config.noise_power[0];
        inst.gain_sbs_sut[0] = 200.0 * sigma / inst.config.p_max[0];
        inst.gain_mbs_sut[0] = 1e-3 * sigma / inst.config.q_max;
        // At q = q_max, PUT SINR = 15/(1 + coupling*p/sigma); rate 4 when p=0.
        inst.gain_mbs_put[0] = 15.0 * sigma / inst.config.q_max;
        inst.gain_sbs_put[0] = 8.0 * sigma / inst.config.p_max[0];

        let mut sched = Schedule::zeros(1, 1, 1);
        sched.set_theta(0, 0, 1.0);
        sched.set_eps(0, 0, 0, 1.0);
        sched.sync_chi();

        let start = PowerAllocation::uniform_init(&inst);
        let mut solve_cfg = PowerSolveConfig::default();
        solve_cfg.alm.max_outer_iters = 200;
        let (pw, report) = solve_power(&inst, &sched, &start, &solve_cfg).unwrap();
        let v = crate::feasibility::violations(&inst, &sched, &pw);
        assert!(v.put_qos[0] <= 1e-4, "put residual {}", v.put_qos[0]);
        assert!(
            pw.p_at(0, 0, 0) < 0.9 * inst.config.p_max[0],
            "p {} should stay below the box",
            pw.p_at(0, 0, 0)
        );
        // Grid oracle over (p, q) confirms near-optimality under the floor.
        let curve = MosCurve::new(inst.config.service_profile());
        let mut best = f64::NEG_INFINITY;
        for i in 0..400 {
            let p = inst.config.p_max[0] * (i as f64 + 1.0) / 400.0;
            for j in 0..400 {
                let q = inst.config.q_max * (j as f64 + 1.0) / 400.0;
                let mut cand = pw.clone();
                cand.set_p(0, 0, 0, p);
                cand.set_q(0, 0, q);
                if crate::sinr::put_rate(&inst, &sched, &cand, 0)
                    < inst.config.put_rate_min[0] - 1e-6
                {
                    continue;
                }
                let u = curve.mos(crate::sinr::sut_rate(&inst, &sched, &cand, 0));
                if u > best {
                    best = u;
                }
            }
        }
        let got = crate::sinr::total_qoe(&inst, &sched, &pw);
        assert!(got >= best - 5e-3, "solver {got} vs grid {best}; report {report:?}");
    }

    /// Symmetric instance: two SUTs with identical channels end up with
    /// powers equal to within 1e-3.
    #[test]
    fn symmetric_users_get_symmetric_power()
    {
        let cfg = NetworkConfig::with_dims(ServiceKind::Web, 1, 2, 1, 2, 9);
        let mut inst = generate_instance(&cfg, &ChannelModelParams::default()).unwrap();
        let sigma = inst.config.noise_power[0];
        let h = 40.0 * sigma / inst.config.p_max[0];
        for v in inst.gain_sbs_sut.iter_mut() {
            *v = h;
        }
        for v in inst.gain_mbs_sut.iter_mut() {
            *v = 1e-3 * sigma / inst.config.q_max;
        }
        inst.gain_mbs_put = vec![1e3 * sigma / inst.config.q_max; 2];
        inst.gain_sbs_put = vec![1e-6 * sigma / inst.config.p_max[0]; 2];
        let mut sched = Schedule::zeros(1, 2, 2);
        for (g, n) in [(0usize, 0usize), (1, 1)] {
            sched.set_theta(0, g, 1.0);
            sched.set_eps(0, g, n, 1.0);
        }
        sched.sync_chi();
        let start = PowerAllocation::uniform_init(&inst);
        let (pw, _) = solve_power(&inst, &sched, &start, &PowerSolveConfig::default()).unwrap();
        let a = pw.p_at(0, 0, 0);
        let b = pw.p_at(0, 1, 1);
        assert!((a - b).abs() < 1e-3 * a.max(b), "asymmetric {a} vs {b}");
    }

    #[test]
    fn exact_utility_dominates_model_utility() {
        // JT schedule so the convex bound is active.
        let cfg = NetworkConfig::with_dims(ServiceKind::Web, 2, 2, 1, 2, 33);
        let mut inst = generate_instance(&cfg, &ChannelModelParams::default()).unwrap();
        let sigma = inst.config.noise_power[0];
        for v in inst.gain_sbs_sut.iter_mut() {
            *v = 20.0 * sigma / inst.config.p_max[0];
        }
        inst.gain_mbs_put = vec![1e3 * sigma / inst.config.q_max; 2];
        for v in inst.gain_sbs_put.iter_mut() {
            *v = 1e-6 * sigma / inst.config.p_max[0];
        }
        let mut sched = Schedule::zeros(2, 2, 2);
        // SUT 0 JT on subcarrier 0; SUT 1 single-served on subcarrier 1.
        for l in [0, 1] {
            sched.set_theta(l, 0, 1.0);
            sched.set_eps(l, 0, 0, 1.0);
        }
        sched.set_theta(0, 1, 1.0);
        sched.set_eps(0, 1, 1, 1.0);
        sched.sync_chi();
        let start = PowerAllocation::uniform_init(&inst);
        let (_, report) = solve_power(&inst, &sched, &start, &PowerSolveConfig::default()).unwrap();
        assert!(report.exact_utility >= report.model_utility - 1e-9);
    }
}
