//! Scheduling sub-problem: optimize association, subcarrier allocation and
//! their product indicator with powers fixed. The binary tensors are relaxed
//! to `[0,1]`, the product is linearized through three inequality couplings,
//! three summed binary-forcing constraints push entries back to corners, the
//! relaxed problem runs through the shared ALM loop, and the result is
//! rounded and repaired into a feasible binary schedule.

use crate::alm::{outer_loop, AlmProblem, AlmSettings, AlmState};
use crate::channel::OrderTable;
use crate::error::{Error, Result};
use crate::eval::{JtMode, ModelEval, RateWeights, ScheduleView};
use crate::feasibility::{is_feasible, violations, Tolerances};
use crate::model::{NetworkInstance, PowerAllocation, Schedule};
use crate::power::PhaseReport;

/// Scheme restrictions layered on top of the joint problem.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SchemeRules {
    /// Cap on serving SBSs per SUT; `Some(1)` disables joint transmission.
    pub max_assoc_per_sut: Option<usize>,
    /// Cap on SUTs per (SBS, subcarrier); `Some(1)` disables intra-cell NOMA.
    pub max_users_per_cell_subcarrier: Option<usize>,
}

impl SchemeRules {
    pub fn unrestricted() -> Self {
        SchemeRules::default()
    }
}

/// Relaxed decision tensors in `[0,1]`.
#[derive(Debug, Clone)]
pub struct RelaxedSchedule {
    pub num_sbs: usize,
    pub num_sut: usize,
    pub num_subcarriers: usize,
    pub theta: Vec<f64>,
    pub eps: Vec<f64>,
    pub chi: Vec<f64>,
}

impl RelaxedSchedule {
    pub fn from_schedule(sched: &Schedule) -> Self {
        RelaxedSchedule {
            num_sbs: sched.num_sbs,
            num_sut: sched.num_sut,
            num_subcarriers: sched.num_subcarriers,
            theta: sched.theta.clone(),
            eps: sched.eps.clone(),
            chi: sched.chi.clone(),
        }
    }

    #[inline]
    fn idx(&self, l: usize, g: usize, n: usize) -> usize {
        (l * self.num_sut + g) * self.num_subcarriers + n
    }
}

/// Per-entry residuals of the three product-linearization constraints:
/// `chi - theta`, `chi - eps`, `theta + eps - 1 - chi`.
pub fn linearization_residuals(s: &RelaxedSchedule) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let len = s.chi.len();
    let mut r1 = vec![0.0; len];
    let mut r2 = vec![0.0; len];
    let mut r3 = vec![0.0; len];
    for l in 0..s.num_sbs {
        for g in 0..s.num_sut {
            let th = s.theta[l * s.num_sut + g];
            for n in 0..s.num_subcarriers {
                let i = s.idx(l, g, n);
                r1[i] = s.chi[i] - th;
                r2[i] = s.chi[i] - s.eps[i];
                r3[i] = th + s.eps[i] - 1.0 - s.chi[i];
            }
        }
    }
    (r1, r2, r3)
}

/// The three summed binary-forcing residuals `sum(x - x^2)` for eps, theta
/// and chi; each is nonnegative on `[0,1]` and zero only at corners.
pub fn binary_forcing_residuals(s: &RelaxedSchedule) -> (f64, f64, f64) {
    let sum = |v: &[f64]| v.iter().map(|x| x - x * x).sum::<f64>();
    (sum(&s.eps), sum(&s.theta), sum(&s.chi))
}

#[derive(Debug, Clone)]
pub struct ScheduleSolveConfig {
    pub alm: AlmSettings,
    pub rules: SchemeRules,
    pub tol: Tolerances,
}

impl Default for ScheduleSolveConfig {
    fn default() -> Self {
        ScheduleSolveConfig {
            alm: AlmSettings::default(),
            rules: SchemeRules::unrestricted(),
            tol: Tolerances::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// Rounding and repair
// ---------------------------------------------------------------------------

struct RepairState<'a> {
    inst: &'a NetworkInstance,
    pw: &'a PowerAllocation,
    rules: SchemeRules,
    sched: Schedule,
}

impl RepairState<'_> {
    fn assoc_count(&self, l: usize) -> usize {
        (0..self.sched.num_sut).filter(|&g| self.sched.theta_at(l, g) > 0.5).count()
    }

    fn assoc_of(&self, g: usize) -> Vec<usize> {
        (0..self.sched.num_sbs).filter(|&l| self.sched.theta_at(l, g) > 0.5).collect()
    }

    fn sic_count(&self, n: usize) -> usize {
        let mut c = 0;
        for l in 0..self.sched.num_sbs {
            for g in 0..self.sched.num_sut {
                if self.sched.eps_at(l, g, n) > 0.5 {
                    c += 1;
                }
            }
        }
        c
    }

    fn cell_subcarrier_count(&self, l: usize, n: usize) -> usize {
        (0..self.sched.num_sut).filter(|&g| self.sched.eps_at(l, g, n) > 0.5).count()
    }

    fn subc_count(&self, g: usize) -> usize {
        let mut c = 0;
        for l in 0..self.sched.num_sbs {
            for n in 0..self.sched.num_subcarriers {
                if self.sched.eps_at(l, g, n) > 0.5 {
                    c += 1;
                }
            }
        }
        c
    }

    /// Achievable link rate used as the marginal score of one assignment.
    fn link_rate(&self, l: usize, g: usize, n: usize) -> f64 {
        let s = crate::sinr::sinr(self.inst, &self.sched, self.pw, l, g, n);
        (1.0 + s).log2()
    }

    /// Drops the eps grant (l, g, n); clears theta when it was the last one.
    fn drop_link(&mut self, l: usize, g: usize, n: usize) {
        self.sched.set_eps(l, g, n, 0.0);
        if (0..self.sched.num_subcarriers).all(|k| self.sched.eps_at(l, g, k) < 0.5) {
            self.sched.set_theta(l, g, 0.0);
        }
    }
}

/// Thresholds a relaxed schedule at 0.5 and repairs it into a binary
/// schedule satisfying the association/allocation constraint families and
/// the scheme rules exactly; `chi` is recomputed as the product. Fails with
/// an infeasibility report when the caps cannot accommodate every SUT.
pub fn round_and_repair(
    s: &RelaxedSchedule,
    inst: &NetworkInstance,
    pw: &PowerAllocation,
    rules: SchemeRules,
) -> Result<Schedule> {
    let (ll, gg, _, nn) = inst.dims();
    let cfg = &inst.config;

    // Capacity sanity: every SUT needs an association slot and a SIC slot.
    let assoc_capacity: usize = cfg.load_cap.iter().sum();
    let sic_capacity: usize = cfg.sic_cap.iter().sum();
    if assoc_capacity < gg || sic_capacity < gg {
        return Err(Error::Infeasible(format!(
            "caps cannot host {gg} SUTs: association capacity {assoc_capacity}, SIC capacity {sic_capacity}"
        )));
    }

    let mut st = RepairState { inst, pw, rules, sched: Schedule::zeros(ll, gg, nn) };
    for i in 0..s.theta.len() {
        st.sched.theta[i] = f64::from(s.theta[i] >= 0.5);
    }
    for i in 0..s.eps.len() {
        st.sched.eps[i] = f64::from(s.eps[i] >= 0.5);
    }
    // Precedence: no grant without association.
    for l in 0..ll {
        for g in 0..gg {
            if st.sched.theta_at(l, g) < 0.5 {
                for n in 0..nn {
                    st.sched.set_eps(l, g, n, 0.0);
                }
            }
        }
    }
    st.sched.sync_chi();

    // Scheme rule: single association keeps the best-scoring SBS.
    if let Some(cap) = rules.max_assoc_per_sut {
        for g in 0..gg {
            let mut assoc = st.assoc_of(g);
            while assoc.len() > cap {
                let (worst, _) = assoc
                    .iter()
                    .map(|&l| {
                        let score: f64 =
                            (0..nn).filter(|&n| st.sched.eps_at(l, g, n) > 0.5).map(|n| st.link_rate(l, g, n)).sum();
                        (l, score)
                    })
                    .fold((usize::MAX, f64::INFINITY), |acc, (l, sc)| {
                        if sc < acc.1 {
                            (l, sc)
                        } else {
                            acc
                        }
                    });
                st.sched.set_theta(worst, g, 0.0);
                for n in 0..nn {
                    st.sched.set_eps(worst, g, n, 0.0);
                }
                assoc.retain(|&l| l != worst);
            }
        }
    }
    // Scheme rule: at most one SUT per (SBS, subcarrier).
    if let Some(cap) = rules.max_users_per_cell_subcarrier {
        for l in 0..ll {
            for n in 0..nn {
                loop {
                    let users: Vec<usize> =
                        (0..gg).filter(|&g| st.sched.eps_at(l, g, n) > 0.5).collect();
                    if users.len() <= cap {
                        break;
                    }
                    let (worst, _) = users
                        .iter()
                        .map(|&g| (g, st.link_rate(l, g, n)))
                        .fold((usize::MAX, f64::INFINITY), |acc, (g, sc)| {
                            if sc < acc.1 {
                                (g, sc)
                            } else {
                                acc
                            }
                        });
                    st.drop_link(l, worst, n);
                }
            }
        }
    }
    st.sched.sync_chi();

    let budget = 4 * (ll * gg * nn + gg) + 16;
    for _pass in 0..budget {
        let mut changed = false;

        // Load cap: drop the lowest-scoring association of an overloaded SBS,
        // preferring users that keep another association.
        for l in 0..ll {
            while st.assoc_count(l) > cfg.load_cap[l] {
                let users: Vec<usize> =
                    (0..gg).filter(|&g| st.sched.theta_at(l, g) > 0.5).collect();
                let pick = |multi_only: bool| -> Option<usize> {
                    let mut best: Option<(usize, f64)> = None;
                    for &g in &users {
                        if multi_only && st.assoc_of(g).len() < 2 {
                            continue;
                        }
                        let score: f64 = (0..nn)
                            .filter(|&n| st.sched.eps_at(l, g, n) > 0.5)
                            .map(|n| st.link_rate(l, g, n))
                            .sum();
                        if best.map_or(true, |(_, s)| score < s) {
                            best = Some((g, score));
                        }
                    }
                    best.map(|(g, _)| g)
                };
                let victim = pick(true).or_else(|| pick(false));
                match victim {
                    Some(g) => {
                        st.sched.set_theta(l, g, 0.0);
                        for n in 0..nn {
                            st.sched.set_eps(l, g, n, 0.0);
                        }
                        changed = true;
                    }
                    None => break,
                }
            }
        }

        // SIC cap: shed the lowest-scoring link on oversubscribed subcarriers,
        // preferring links whose user keeps another subcarrier.
        for n in 0..nn {
            while st.sic_count(n) > cfg.sic_cap[n] {
                let mut links: Vec<(usize, usize)> = Vec::new();
                for l in 0..ll {
                    for g in 0..gg {
                        if st.sched.eps_at(l, g, n) > 0.5 {
                            links.push((l, g));
                        }
                    }
                }
                let pick = |multi_only: bool| -> Option<(usize, usize)> {
                    let mut best: Option<((usize, usize), f64)> = None;
                    for &(l, g) in &links {
                        if multi_only && st.subc_count(g) < 2 {
                            continue;
                        }
                        let score = st.link_rate(l, g, n);
                        if best.map_or(true, |(_, s)| score < s) {
                            best = Some(((l, g), score));
                        }
                    }
                    best.map(|(lg, _)| lg)
                };
                match pick(true).or_else(|| pick(false)) {
                    Some((l, g)) => {
                        st.drop_link(l, g, n);
                        changed = true;
                    }
                    None => break,
                }
            }
        }

        // Minimum association: orphaned SUTs join their best-gain SBS with a
        // spare load slot.
        for g in 0..gg {
            if !st.assoc_of(g).is_empty() {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for l in 0..ll {
                if st.assoc_count(l) >= cfg.load_cap[l] {
                    continue;
                }
                let gain = (0..nn).map(|n| inst.h_sbs_sut(l, g, n)).fold(0.0f64, f64::max);
                if best.map_or(true, |(_, b)| gain > b) {
                    best = Some((l, gain));
                }
            }
            match best {
                Some((l, _)) => {
                    st.sched.set_theta(l, g, 1.0);
                    changed = true;
                }
                None => {
                    return Err(Error::Infeasible(format!(
                        "no SBS has a spare association slot for SUT {g}"
                    )))
                }
            }
        }

        // Minimum allocation: grant the best-SINR subcarrier with a spare SIC
        // slot at an associated SBS (associating a fresh SBS if needed).
        for g in 0..gg {
            if st.subc_count(g) >= 1 {
                continue;
            }
            let assoc = st.assoc_of(g);
            let cell_cap = rules.max_users_per_cell_subcarrier.unwrap_or(usize::MAX);
            let mut best: Option<(usize, usize, f64)> = None;
            for &l in &assoc {
                for n in 0..nn {
                    if st.sic_count(n) >= cfg.sic_cap[n]
                        || st.cell_subcarrier_count(l, n) >= cell_cap
                    {
                        continue;
                    }
                    let score = st.link_rate(l, g, n);
                    if best.map_or(true, |(_, _, b)| score > b) {
                        best = Some((l, n, score));
                    }
                }
            }
            if best.is_none() && rules.max_assoc_per_sut.map_or(true, |cap| assoc.len() < cap) {
                // Try any SBS with spare load.
                for l in 0..ll {
                    if assoc.contains(&l) || st.assoc_count(l) >= cfg.load_cap[l] {
                        continue;
                    }
                    for n in 0..nn {
                        if st.sic_count(n) >= cfg.sic_cap[n]
                            || st.cell_subcarrier_count(l, n) >= cell_cap
                        {
                            continue;
                        }
                        let score = inst.h_sbs_sut(l, g, n);
                        if best.map_or(true, |(_, _, b)| score > b) {
                            best = Some((l, n, score));
                        }
                    }
                }
            }
            match best {
                Some((l, n, _)) => {
                    st.sched.set_theta(l, g, 1.0);
                    st.sched.set_eps(l, g, n, 1.0);
                    changed = true;
                }
                None => {
                    return Err(Error::Infeasible(format!(
                        "no subcarrier slot can be granted to SUT {g}"
                    )))
                }
            }
        }

        if !changed {
            break;
        }
    }

    st.sched.sync_chi();
    st.sched.relaxed = false;

    // Final audit of the hard families.
    for l in 0..ll {
        if st.assoc_count(l) > cfg.load_cap[l] {
            return Err(Error::Infeasible(format!("repair left SBS {l} overloaded")));
        }
    }
    for n in 0..nn {
        if st.sic_count(n) > cfg.sic_cap[n] {
            return Err(Error::Infeasible(format!("repair left subcarrier {n} oversubscribed")));
        }
    }
    for g in 0..gg {
        if st.assoc_of(g).is_empty() || st.subc_count(g) == 0 {
            return Err(Error::Infeasible(format!("repair left SUT {g} unserved")));
        }
        if let Some(cap) = rules.max_assoc_per_sut {
            if st.assoc_of(g).len() > cap {
                return Err(Error::Infeasible(format!("SUT {g} exceeds the association cap")));
            }
        }
    }
    Ok(st.sched)
}

// ---------------------------------------------------------------------------
// Relaxed ALM problem
// ---------------------------------------------------------------------------

/// Residual layout offsets for the scheduling problem.
struct ResLayout {
    sbs_power: usize,
    put_qos: usize,
    mos_floor: usize,
    backhaul: usize,
    load: usize,
    assoc: usize,
    subc: usize,
    sic: usize,
    precedence: usize,
    lin1: usize,
    lin2: usize,
    lin3: usize,
    forcing: usize,
    scheme_assoc: usize,
    scheme_cell: usize,
    total: usize,
}

impl ResLayout {
    fn new(ll: usize, gg: usize, mm: usize, nn: usize, rules: &SchemeRules) -> Self {
        let lgn = ll * gg * nn;
        let mut off = 0;
        let mut take = |k: usize| {
            let at = off;
            off += k;
            at
        };
        let sbs_power = take(ll);
        let put_qos = take(mm);
        let mos_floor = take(gg);
        let backhaul = take(ll);
        let load = take(ll);
        let assoc = take(gg);
        let subc = take(gg);
        let sic = take(nn);
        let precedence = take(lgn);
        let lin1 = take(lgn);
        let lin2 = take(lgn);
        let lin3 = take(lgn);
        let forcing = take(3);
        let scheme_assoc = take(if rules.max_assoc_per_sut.is_some() { gg } else { 0 });
        let scheme_cell =
            take(if rules.max_users_per_cell_subcarrier.is_some() { ll * nn } else { 0 });
        ResLayout {
            sbs_power,
            put_qos,
            mos_floor,
            backhaul,
            load,
            assoc,
            subc,
            sic,
            precedence,
            lin1,
            lin2,
            lin3,
            forcing,
            scheme_assoc,
            scheme_cell,
            total: off,
        }
    }
}

struct SchedulingProblem<'a> {
    inst: &'a NetworkInstance,
    pw: &'a PowerAllocation,
    order: OrderTable,
    rules: SchemeRules,
    tol: Tolerances,
    layout: ResLayout,
    jt: JtMode,
    /// Best feasible binary candidate found while iterating, scored by the
    /// exact-model utility.
    incumbent: Option<(Schedule, f64)>,
}

impl<'a> SchedulingProblem<'a> {
    fn new(
        inst: &'a NetworkInstance,
        pw: &'a PowerAllocation,
        reference: &Schedule,
        rules: SchemeRules,
        tol: Tolerances,
    ) -> Self {
        let (ll, gg, mm, nn) = inst.dims();
        SchedulingProblem {
            inst,
            pw,
            order: OrderTable::from_schedule(inst, reference),
            rules,
            tol,
            layout: ResLayout::new(ll, gg, mm, nn, &rules),
            jt: JtMode::Exact,
            incumbent: None,
        }
    }

    fn split<'x>(&self, x: &'x [f64]) -> (&'x [f64], &'x [f64], &'x [f64]) {
        let (ll, gg, _, nn) = self.inst.dims();
        let lg = ll * gg;
        let lgn = lg * nn;
        (&x[0..lg], &x[lg..lg + lgn], &x[lg + lgn..lg + 2 * lgn])
    }

    fn view<'x>(&self, x: &'x [f64]) -> ScheduleView<'x> {
        let (theta, eps, chi) = self.split(x);
        ScheduleView { theta, eps, chi }
    }

    fn residuals_from_eval(&self, x: &[f64], ev: &ModelEval) -> Vec<f64> {
        let (ll, gg, mm, nn) = self.inst.dims();
        let cfg = &self.inst.config;
        let (theta, eps, chi) = self.split(x);
        let lay = &self.layout;
        let mut res = vec![0.0; lay.total];

        for l in 0..ll {
            let mut s = 0.0;
            for g in 0..gg {
                for n in 0..nn {
                    s += eps[(l * gg + g) * nn + n] * self.pw.p_at(l, g, n);
                }
            }
            res[lay.sbs_power + l] = s - cfg.p_max[l];
            res[lay.backhaul + l] =
                ev.backhaul_rates()[l] * cfg.subcarrier_bandwidth - cfg.backhaul_cap[l];
            res[lay.load + l] =
                (0..gg).map(|g| theta[l * gg + g]).sum::<f64>() - cfg.load_cap[l] as f64;
        }
        for m in 0..mm {
            res[lay.put_qos + m] = cfg.put_rate_min[m] - ev.put_rates()[m];
        }
        for g in 0..gg {
            res[lay.mos_floor + g] = cfg.mos_min[g] - ev.mos_values()[g];
            res[lay.assoc + g] = 1.0 - (0..ll).map(|l| theta[l * gg + g]).sum::<f64>();
            let granted: f64 =
                (0..ll).map(|l| (0..nn).map(|n| eps[(l * gg + g) * nn + n]).sum::<f64>()).sum();
            res[lay.subc + g] = 1.0 - granted;
        }
        for n in 0..nn {
            let used: f64 = (0..ll)
                .map(|l| (0..gg).map(|g| eps[(l * gg + g) * nn + n]).sum::<f64>())
                .sum();
            res[lay.sic + n] = used - cfg.sic_cap[n] as f64;
        }
        for l in 0..ll {
            for g in 0..gg {
                let th = theta[l * gg + g];
                for n in 0..nn {
                    let i = (l * gg + g) * nn + n;
                    res[lay.precedence + i] = eps[i] - th;
                    res[lay.lin1 + i] = chi[i] - th;
                    res[lay.lin2 + i] = chi[i] - eps[i];
                    res[lay.lin3 + i] = th + eps[i] - 1.0 - chi[i];
                }
            }
        }
        res[lay.forcing] = eps.iter().map(|x| x - x * x).sum();
        res[lay.forcing + 1] = theta.iter().map(|x| x - x * x).sum();
        res[lay.forcing + 2] = chi.iter().map(|x| x - x * x).sum();
        if let Some(cap) = self.rules.max_assoc_per_sut {
            for g in 0..gg {
                res[lay.scheme_assoc + g] =
                    (0..ll).map(|l| theta[l * gg + g]).sum::<f64>() - cap as f64;
            }
        }
        if let Some(cap) = self.rules.max_users_per_cell_subcarrier {
            for l in 0..ll {
                for n in 0..nn {
                    res[lay.scheme_cell + l * nn + n] =
                        (0..gg).map(|g| eps[(l * gg + g) * nn + n]).sum::<f64>() - cap as f64;
                }
            }
        }
        res
    }
}

impl AlmProblem for SchedulingProblem<'_> {
    fn dim(&self) -> usize {
        let (ll, gg, _, nn) = self.inst.dims();
        ll * gg + 2 * ll * gg * nn
    }

    fn lower(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    fn upper(&self) -> Vec<f64> {
        vec![1.0; self.dim()]
    }

    fn num_residuals(&self) -> usize {
        self.layout.total
    }

    fn base_objective(&self, x: &[f64]) -> f64 {
        ModelEval::compute(self.inst, self.view(x), self.pw, &self.jt, &self.order).utility()
    }

    fn residuals(&self, x: &[f64]) -> Vec<f64> {
        let ev = ModelEval::compute(self.inst, self.view(x), self.pw, &self.jt, &self.order);
        self.residuals_from_eval(x, &ev)
    }

    fn augmented_value(&self, x: &[f64], multipliers: &[f64], alpha: f64) -> f64 {
        let ev = ModelEval::compute(self.inst, self.view(x), self.pw, &self.jt, &self.order);
        let res = self.residuals_from_eval(x, &ev);
        crate::alm::hinge_penalized(ev.utility(), &res, multipliers, alpha)
    }

    fn augmented_gradient(&self, x: &[f64], multipliers: &[f64], alpha: f64) -> Vec<f64> {
        let (ll, gg, mm, nn) = self.inst.dims();
        let lay = &self.layout;
        let ev = ModelEval::compute(self.inst, self.view(x), self.pw, &self.jt, &self.order);
        let res = self.residuals_from_eval(x, &ev);
        let w: Vec<f64> =
            res.iter().zip(multipliers).map(|(r, psi)| (psi + alpha * r).max(0.0)).collect();

        let mut weights = RateWeights::zeros(self.inst);
        for g in 0..gg {
            weights.mos[g] = 1.0 + w[lay.mos_floor + g];
        }
        for m in 0..mm {
            weights.put[m] = w[lay.put_qos + m];
        }
        for l in 0..ll {
            weights.backhaul[l] = -w[lay.backhaul + l] * self.inst.config.subcarrier_bandwidth;
        }
        let (mut dtheta, mut deps, mut dchi) = ev.grad_schedule(&weights);

        let (theta, eps, chi) = self.split(x);
        for l in 0..ll {
            for g in 0..gg {
                let tg = l * gg + g;
                dtheta[tg] += w[lay.assoc + g] - w[lay.load + l];
                if self.rules.max_assoc_per_sut.is_some() {
                    dtheta[tg] -= w[lay.scheme_assoc + g];
                }
                dtheta[tg] -= w[lay.forcing + 1] * (1.0 - 2.0 * theta[tg]);
                for n in 0..nn {
                    let i = tg * nn + n;
                    deps[i] += w[lay.subc + g] - w[lay.sic + n]
                        - w[lay.sbs_power + l] * self.pw.p_at(l, g, n);
                    if self.rules.max_users_per_cell_subcarrier.is_some() {
                        deps[i] -= w[lay.scheme_cell + l * nn + n];
                    }
                    // Precedence and linearization couplings.
                    dtheta[tg] += w[lay.precedence + i] + w[lay.lin1 + i] - w[lay.lin3 + i];
                    deps[i] += -w[lay.precedence + i] + w[lay.lin2 + i] - w[lay.lin3 + i];
                    dchi[i] += -w[lay.lin1 + i] - w[lay.lin2 + i] + w[lay.lin3 + i];
                    deps[i] -= w[lay.forcing] * (1.0 - 2.0 * eps[i]);
                    dchi[i] -= w[lay.forcing + 2] * (1.0 - 2.0 * chi[i]);
                }
            }
        }

        let mut grad = Vec::with_capacity(self.dim());
        grad.extend_from_slice(&dtheta);
        grad.extend_from_slice(&deps);
        grad.extend_from_slice(&dchi);
        grad
    }

    fn refresh(&mut self, x: &[f64]) {
        // Track the best feasible rounded candidate by exact utility.
        let (theta, eps, chi) = self.split(x);
        let relaxed = RelaxedSchedule {
            num_sbs: self.inst.config.num_sbs,
            num_sut: self.inst.config.num_sut,
            num_subcarriers: self.inst.config.num_subcarriers,
            theta: theta.to_vec(),
            eps: eps.to_vec(),
            chi: chi.to_vec(),
        };
        // The repair already guarantees the hard association/allocation
        // families; candidates are ranked by exact utility, and the smooth
        // power-coupled constraints are the power phase's responsibility.
        if let Ok(candidate) = round_and_repair(&relaxed, self.inst, self.pw, self.rules) {
            let u = crate::sinr::total_qoe(self.inst, &candidate, self.pw);
            if self.incumbent.as_ref().map_or(true, |(_, best)| u > *best) {
                self.incumbent = Some((candidate, u));
            }
        }
    }

    fn violation_ratio(&self, residuals: &[f64]) -> f64 {
        // Count families only; the smooth families are re-audited after
        // rounding, and corner convergence is what the fixpoint needs.
        let lay = &self.layout;
        let (ll, gg, _, nn) = self.inst.dims();
        let lgn = ll * gg * nn;
        let mut worst = 0.0f64;
        let mut scale = |r: f64| worst = worst.max(r / self.tol.count);
        for i in 0..ll {
            scale(residuals[lay.load + i]);
        }
        for i in 0..gg {
            scale(residuals[lay.assoc + i]);
            scale(residuals[lay.subc + i]);
        }
        for i in 0..nn {
            scale(residuals[lay.sic + i]);
        }
        for i in 0..lgn {
            scale(residuals[lay.precedence + i]);
            scale(residuals[lay.lin1 + i]);
            scale(residuals[lay.lin2 + i]);
            scale(residuals[lay.lin3 + i]);
        }
        for i in 0..3 {
            scale(residuals[lay.forcing + i]);
        }
        worst
    }

    fn monitored(&self) -> std::ops::Range<usize> {
        let (ll, gg, _, nn) = self.inst.dims();
        let lg = ll * gg;
        let lgn = lg * nn;
        lg + lgn..lg + 2 * lgn
    }
}

/// Solves the scheduling sub-problem for fixed powers: relaxed ALM ascent to
/// a chi fixpoint, then rounding + repair, returning the best feasible
/// binary schedule found (by exact-model utility).
pub fn solve_schedule(
    inst: &NetworkInstance,
    pw: &PowerAllocation,
    start: &Schedule,
    cfg: &ScheduleSolveConfig,
) -> Result<(Schedule, PhaseReport)> {
    let mut settings = cfg.alm.clone();
    // Fixpoint on chi regardless of relaxed-corner residuals; integrality is
    // restored by rounding and verified by the audit.
    settings.feas_ratio = f64::INFINITY;
    let mut problem = SchedulingProblem::new(inst, pw, start, cfg.rules, cfg.tol);

    let mut x0 = Vec::with_capacity(problem.dim());
    x0.extend_from_slice(&start.theta);
    x0.extend_from_slice(&start.eps);
    x0.extend_from_slice(&start.chi);

    let state = AlmState::paper_init(problem.num_residuals());
    let out = outer_loop(&mut problem, &x0, state, &settings, "schedule")?;

    // Final rounding of the ALM point.
    let (theta, eps, chi) = problem.split(&out.x);
    let relaxed = RelaxedSchedule {
        num_sbs: inst.config.num_sbs,
        num_sut: inst.config.num_sut,
        num_subcarriers: inst.config.num_subcarriers,
        theta: theta.to_vec(),
        eps: eps.to_vec(),
        chi: chi.to_vec(),
    };
    let rounded = round_and_repair(&relaxed, inst, pw, cfg.rules).ok().map(|sched| {
        let u = crate::sinr::total_qoe(inst, &sched, pw);
        (sched, u)
    });

    let best = match (problem.incumbent.take(), rounded) {
        (Some((s1, u1)), Some((s2, u2))) => Some(if u2 > u1 { (s2, u2) } else { (s1, u1) }),
        (a, b) => a.or(b),
    };
    let (sched, exact_utility) = best.ok_or_else(|| {
        Error::Infeasible("no feasible binary schedule reachable from the relaxed point".into())
    })?;

    let model_utility = {
        let view = ScheduleView::of(&sched);
        ModelEval::compute(inst, view, pw, &JtMode::Exact, &problem.order).utility()
    };
    Ok((
        sched,
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

    fn relaxed(ll: usize, gg: usize, nn: usize, v: f64) -> RelaxedSchedule {
        RelaxedSchedule {
            num_sbs: ll,
            num_sut: gg,
            num_subcarriers: nn,
            theta: vec![v; ll * gg],
            eps: vec![v; ll * gg * nn],
            chi: vec![v; ll * gg * nn],
        }
    }

    #[test]
    fn linearization_hand_values() {
        let mut s = relaxed(1, 1, 1, 0.0);
        s.theta[0] = 1.0;
        s.eps[0] = 1.0;
        s.chi[0] = 1.0;
        let (r1, r2, r3) = linearization_residuals(&s);
        assert!(r1[0] <= 0.0 && r2[0] <= 0.0 && r3[0] <= 0.0);

        s.chi[0] = 0.0;
        let (_, _, r3) = linearization_residuals(&s);
        assert!((r3[0] - 1.0).abs() < 1e-15);

        s.theta[0] = 0.5;
        s.eps[0] = 0.5;
        s.chi[0] = 0.25;
        let (r1, r2, r3) = linearization_residuals(&s);
        assert!((r1[0] + 0.25).abs() < 1e-15);
        assert!((r2[0] + 0.25).abs() < 1e-15);
        assert!((r3[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn binary_forcing_hand_values() {
        let s = relaxed(1, 2, 2, 1.0);
        let (re, rt, rc) = binary_forcing_residuals(&s);
        assert_eq!((re, rt, rc), (0.0, 0.0, 0.0));

        let mut s = relaxed(1, 2, 2, 0.0);
        s.eps[0] = 0.5;
        let (re, _, _) = binary_forcing_residuals(&s);
        assert!((re - 0.25).abs() < 1e-15);
    }

    #[test]
    fn forcing_zero_on_unit_box_implies_binary() {
        // On [0,1], sum(x - x^2) <= 0 forces every entry into {0,1}.
        let mut s = relaxed(2, 2, 2, 0.0);
        for (i, v) in s.eps.iter_mut().enumerate() {
            *v = if i % 3 == 0 { 1.0 } else { 0.0 };
        }
        let (re, _, _) = binary_forcing_residuals(&s);
        assert!(re <= 0.0);
        s.eps[1] = 0.3;
        let (re, _, _) = binary_forcing_residuals(&s);
        assert!(re > 0.0);
    }

    fn micro_instance(seed: u64) -> (NetworkInstance, PowerAllocation) {
        let mut cfg = NetworkConfig::with_dims(ServiceKind::Web, 2, 2, 1, 2, seed);
        cfg.load_cap = vec![2; 2];
        let mut inst = generate_instance(&cfg, &ChannelModelParams::default()).unwrap();
        let sigma = inst.config.noise_power[0];
        // Lively SNRs.
        for v in inst.gain_sbs_sut.iter_mut() {
            *v *= 30.0 * sigma / (inst.config.p_max[0] * 1e-12);
        }
        let mut pw = PowerAllocation::uniform_init(&inst);
        for v in pw.q.iter_mut() {
            *v *= 0.01;
        }
        (inst, pw)
    }

    #[test]
    fn repair_identity_on_feasible_binary() {
        let (inst, pw) = micro_instance(3);
        let mut sched = Schedule::zeros(2, 2, 2);
        sched.set_theta(0, 0, 1.0);
        sched.set_eps(0, 0, 0, 1.0);
        sched.set_theta(1, 1, 1.0);
        sched.set_eps(1, 1, 1, 1.0);
        sched.sync_chi();
        let rel = RelaxedSchedule::from_schedule(&sched);
        let repaired =
            round_and_repair(&rel, &inst, &pw, SchemeRules::unrestricted()).unwrap();
        assert_eq!(repaired, sched);
    }

    #[test]
    fn repair_grants_minimums_from_all_fractional() {
        let (inst, pw) = micro_instance(5);
        let rel = relaxed(2, 2, 2, 0.4); // thresholds to all-zero
        let repaired =
            round_and_repair(&rel, &inst, &pw, SchemeRules::unrestricted()).unwrap();
        for g in 0..2 {
            let assoc: f64 = (0..2).map(|l| repaired.theta_at(l, g)).sum();
            let grants: f64 =
                (0..2).flat_map(|l| (0..2).map(move |n| (l, n))).map(|(l, n)| repaired.eps_at(l, g, n)).sum();
            assert!(assoc >= 1.0, "SUT {g} unassociated");
            assert!(grants >= 1.0, "SUT {g} ungranted");
        }
    }

    #[test]
    fn repair_resolves_oversubscribed_subcarrier() {
        // 3 users all on subcarrier 0 of SBS 0 with SIC cap 2.
        let mut cfg = NetworkConfig::with_dims(ServiceKind::Web, 2, 3, 1, 2, 9);
        cfg.load_cap = vec![3; 2];
        let inst = generate_instance(&cfg, &ChannelModelParams::default()).unwrap();
        let pw = PowerAllocation::uniform_init(&inst);
        let mut rel = relaxed(2, 3, 2, 0.0);
        for g in 0..3 {
            rel.theta[g] = 1.0; // SBS 0
            rel.eps[g * 2] = 1.0; // subcarrier 0
        }
        let repaired =
            round_and_repair(&rel, &inst, &pw, SchemeRules::unrestricted()).unwrap();
        let v = violations(&inst, &repaired, &pw);
        assert!(v.sic.iter().all(|r| *r <= 0.0));
        assert!(v.min_subc.iter().all(|r| *r <= 0.0));
        assert!(v.load.iter().all(|r| *r <= 0.0));
    }

    #[test]
    fn repair_reports_impossible_caps() {
        // 3 SUTs but only 2 association slots in total.
        let mut cfg = NetworkConfig::with_dims(ServiceKind::Web, 2, 3, 1, 2, 11);
        cfg.load_cap = vec![1; 2];
        let inst = generate_instance(&cfg, &ChannelModelParams::default()).unwrap();
        let pw = PowerAllocation::uniform_init(&inst);
        let rel = relaxed(2, 3, 2, 0.6);
        assert!(round_and_repair(&rel, &inst, &pw, SchemeRules::unrestricted()).is_err());
    }

    #[test]
    fn repair_enforces_scheme_rules() {
        let (inst, pw) = micro_instance(13);
        let rel = relaxed(2, 2, 2, 0.9); // everything on
        let rules = SchemeRules {
            max_assoc_per_sut: Some(1),
            max_users_per_cell_subcarrier: Some(1),
        };
        let repaired = round_and_repair(&rel, &inst, &pw, rules).unwrap();
        for g in 0..2 {
            let assoc = (0..2).filter(|&l| repaired.theta_at(l, g) > 0.5).count();
            assert!(assoc == 1, "SUT {g} assoc {assoc}");
        }
        for l in 0..2 {
            for n in 0..2 {
                let users = (0..2).filter(|&g| repaired.eps_at(l, g, n) > 0.5).count();
                assert!(users <= 1);
            }
        }
    }

    #[test]
    fn forced_singleton_schedule() {
        // G=1, L=1, N=1: the only feasible schedule is full assignment.
        let cfg = NetworkConfig::with_dims(ServiceKind::Web, 1, 1, 1, 1, 17);
        let inst = generate_instance(&cfg, &ChannelModelParams::default()).unwrap();
        let pw = PowerAllocation::uniform_init(&inst);
        let start = {
            let rel = relaxed(1, 1, 1, 0.0);
            round_and_repair(&rel, &inst, &pw, SchemeRules::unrestricted()).unwrap()
        };
        assert_eq!(start.theta, vec![1.0]);
        assert_eq!(start.eps, vec![1.0]);
        let (sched, _) =
            solve_schedule(&inst, &pw, &start, &ScheduleSolveConfig::default()).unwrap();
        assert_eq!(sched.theta, vec![1.0]);
        assert_eq!(sched.eps, vec![1.0]);
        assert_eq!(sched.chi, vec![1.0]);
    }

    #[test]
    fn solver_output_satisfies_hard_families() {
        for seed in [1u64, 2, 3] {
            let (inst, pw) = micro_instance(seed);
            let start = round_and_repair(
                &relaxed(2, 2, 2, 0.0),
                &inst,
                &pw,
                SchemeRules::unrestricted(),
            )
            .unwrap();
            let (sched, _) =
                solve_schedule(&inst, &pw, &start, &ScheduleSolveConfig::default()).unwrap();
            let v = violations(&inst, &sched, &pw);
            assert!(v.load.iter().all(|r| *r <= 0.0));
            assert!(v.min_assoc.iter().all(|r| *r <= 0.0));
            assert!(v.min_subc.iter().all(|r| *r <= 0.0));
            assert!(v.sic.iter().all(|r| *r <= 0.0));
            assert!(v.precedence.iter().all(|r| *r <= 0.0));
            for l in 0..2 {
                for g in 0..2 {
                    for n in 0..2 {
                        assert_eq!(
                            sched.chi_at(l, g, n),
                            sched.theta_at(l, g) * sched.eps_at(l, g, n)
                        );
                    }
                }
            }
        }
    }
}
