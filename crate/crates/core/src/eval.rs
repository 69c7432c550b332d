//! Shared evaluation engine for the smooth (possibly relaxed) model: per-link
//! SINR, user rates, MOS, PUT rates, backhaul load, and analytic gradients of
//! weighted combinations of those quantities with respect to either the power
//! tensors or the schedule tensors.
//!
//! Both solvers and the utility-gradient operation are built on this engine.
//! Reported figures always come from the literal binary-schedule path in
//! [`crate::sinr`]; the two paths are cross-checked in tests.
//!
//! Conventions: interference terms are masked by `chi`, the rate sum is
//! masked by `theta * eps`, and the SIC decoding order is taken from a fixed
//! [`OrderTable`] so it stays well-defined while tensors are relaxed.

use crate::channel::OrderTable;
use crate::model::{NetworkInstance, PowerAllocation, Schedule};
use crate::qoe::MosCurve;
use crate::sinr::LambdaRule;

use std::f64::consts::LN_2;

/// Joint-transmission interference model used inside the SINR.
#[derive(Debug, Clone)]
pub enum JtMode {
    Exact,
    Convex(LambdaRule),
}

/// Borrowed view of schedule tensors (binary or relaxed).
#[derive(Clone, Copy)]
pub struct ScheduleView<'a> {
    pub theta: &'a [f64],
    pub eps: &'a [f64],
    pub chi: &'a [f64],
}

impl<'a> ScheduleView<'a> {
    pub fn of(sched: &'a Schedule) -> Self {
        ScheduleView { theta: &sched.theta, eps: &sched.eps, chi: &sched.chi }
    }
}

/// Coefficients of the weighted scalar whose gradient is requested:
/// `sum_g mos[g]*MOS_g + sum_m put[m]*PutRate_m + sum_l backhaul[l]*C_l`
/// (backhaul in bit/s/Hz).
#[derive(Debug, Clone)]
pub struct RateWeights {
    pub mos: Vec<f64>,
    pub put: Vec<f64>,
    pub backhaul: Vec<f64>,
}

impl RateWeights {
    pub fn zeros(inst: &NetworkInstance) -> Self {
        RateWeights {
            mos: vec![0.0; inst.config.num_sut],
            put: vec![0.0; inst.config.num_put],
            backhaul: vec![0.0; inst.config.num_sbs],
        }
    }
}

/// Evaluated model state at one (schedule, power) point.
pub struct ModelEval<'a> {
    inst: &'a NetworkInstance,
    view: ScheduleView<'a>,
    pw: &'a PowerAllocation,
    jt: &'a JtMode,
    order: &'a OrderTable,
    curve: MosCurve,
    // Per-link quantities, flattened [l][g][n].
    denom: Vec<f64>,
    gamma: Vec<f64>,
    link_rate: Vec<f64>,
    // Per (g' , g, n): sum_a chi*p*H toward receiver g (exact-JT helper).
    y_sum: Vec<f64>,
    // Per subcarrier: active (l, g) entries with chi > 0.
    active: Vec<Vec<(usize, usize)>>,
    // Per-user aggregates.
    sut_rate: Vec<f64>,
    mos: Vec<f64>,
    // Per-PUT aggregates.
    put_denom: Vec<f64>,
    put_gamma: Vec<f64>,
    put_rate: Vec<f64>,
    // Per-SBS carried rate in bit/s/Hz.
    backhaul: Vec<f64>,
}

#[inline]
fn idx3(l: usize, g: usize, n: usize, gg: usize, nn: usize) -> usize {
    (l * gg + g) * nn + n
}

impl<'a> ModelEval<'a> {
    pub fn compute(
        inst: &'a NetworkInstance,
        view: ScheduleView<'a>,
        pw: &'a PowerAllocation,
        jt: &'a JtMode,
        order: &'a OrderTable,
    ) -> Self {
        let (ll, gg, mm, nn) = inst.dims();
        let curve = MosCurve::new(inst.config.service_profile());

        // Per-SBS scheduled power on each subcarrier: S[l][n] = sum_g chi*p.
        let mut s_ln = vec![0.0; ll * nn];
        let mut active: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nn];
        for l in 0..ll {
            for g in 0..gg {
                for n in 0..nn {
                    let c = view.chi[idx3(l, g, n, gg, nn)];
                    if c > 0.0 {
                        s_ln[l * nn + n] += c * pw.p[idx3(l, g, n, gg, nn)];
                        active[n].push((l, g));
                    }
                }
            }
        }

        // UDL per (g, n): MBS scheduled power times the MBS-to-SUT gain.
        let mut qsum_n = vec![0.0; nn];
        for m in 0..mm {
            for n in 0..nn {
                qsum_n[n] += inst.pi(m, n) * pw.q_at(m, n);
            }
        }

        // CCD helper per (g, n): sum over ALL SBSs of H*(S - own-user term).
        let mut ccd_all = vec![0.0; gg * nn];
        for g in 0..gg {
            for n in 0..nn {
                let mut acc = 0.0;
                for l in 0..ll {
                    let c = view.chi[idx3(l, g, n, gg, nn)];
                    acc += inst.h_sbs_sut(l, g, n)
                        * (s_ln[l * nn + n] - c * pw.p[idx3(l, g, n, gg, nn)]);
                }
                ccd_all[g * nn + n] = acc;
            }
        }

        // NOMA suffix per (l, g, n): scheduled power of users decoded after g.
        let mut noma_suffix = vec![0.0; ll * gg * nn];
        let mut user_at_rank = vec![0usize; gg];
        for l in 0..ll {
            for n in 0..nn {
                for g in 0..gg {
                    user_at_rank[order.rank(l, g, n)] = g;
                }
                let mut acc = 0.0;
                for r in (0..gg).rev() {
                    let g = user_at_rank[r];
                    noma_suffix[idx3(l, g, n, gg, nn)] = acc;
                    acc += view.chi[idx3(l, g, n, gg, nn)] * pw.p[idx3(l, g, n, gg, nn)];
                }
            }
        }

        // Joint-transmission term per (g, n).
        let mut y_sum = vec![0.0; gg * gg * nn];
        let mut jt_term = vec![0.0; gg * nn];
        match jt {
            JtMode::Exact => {
                for gp in 0..gg {
                    for g in 0..gg {
                        for n in 0..nn {
                            let mut y = 0.0;
                            let mut z = 0.0;
                            for a in 0..ll {
                                let x = view.chi[idx3(a, gp, n, gg, nn)]
                                    * pw.p[idx3(a, gp, n, gg, nn)]
                                    * inst.h_sbs_sut(a, g, n);
                                y += x;
                                z += x * x;
                            }
                            y_sum[(gp * gg + g) * nn + n] = y;
                            if gp != g {
                                jt_term[g * nn + n] += 2.0 * (y * y - z);
                            }
                        }
                    }
                }
            }
            JtMode::Convex(rule) => {
                for g in 0..gg {
                    for n in 0..nn {
                        let mut acc = 0.0;
                        for gp in 0..gg {
                            if gp == g {
                                continue;
                            }
                            for &(a, ga) in &active[n] {
                                if ga != gp {
                                    continue;
                                }
                                let ia = view.chi[idx3(a, gp, n, gg, nn)];
                                let pa = pw.p[idx3(a, gp, n, gg, nn)];
                                let ha = inst.h_sbs_sut(a, g, n);
                                for &(b, gb) in &active[n] {
                                    if gb != gp || b == a {
                                        continue;
                                    }
                                    let ib = view.chi[idx3(b, gp, n, gg, nn)];
                                    let pb = pw.p[idx3(b, gp, n, gg, nn)];
                                    let lam = rule.lambda(a, b, gp, n);
                                    let bound = 0.5 * lam * pa * pa + 0.5 / lam * pb * pb;
                                    acc += 2.0 * ia * ib * bound * ha * inst.h_sbs_sut(b, g, n);
                                }
                            }
                        }
                        jt_term[g * nn + n] = acc;
                    }
                }
            }
        }

        // Per-link denominator, SINR, rate; per-user and per-SBS aggregates.
        let mut denom = vec![0.0; ll * gg * nn];
        let mut gamma = vec![0.0; ll * gg * nn];
        let mut link_rate = vec![0.0; ll * gg * nn];
        let mut sut_rate = vec![0.0; gg];
        let mut backhaul = vec![0.0; ll];
        for l in 0..ll {
            for g in 0..gg {
                let th = view.theta[l * gg + g];
                for n in 0..nn {
                    let i = idx3(l, g, n, gg, nn);
                    let h = inst.h_sbs_sut(l, g, n);
                    let ccd = ccd_all[g * nn + n]
                        - h * (s_ln[l * nn + n] - view.chi[i] * pw.p[i]);
                    let udl = qsum_n[n] * inst.h_mbs_sut(g, n);
                    let d = udl + ccd + h * noma_suffix[i] + jt_term[g * nn + n]
                        + inst.config.noise_power[g];
                    denom[i] = d;
                    let ga = pw.p[i] * h / d;
                    gamma[i] = ga;
                    let r = (1.0 + ga).log2();
                    link_rate[i] = r;
                    let w = th * view.eps[i];
                    if w > 0.0 {
                        sut_rate[g] += w * r;
                        backhaul[l] += w * r;
                    }
                }
            }
        }
        let mos: Vec<f64> = sut_rate.iter().map(|&r| curve.mos(r)).collect();

        // PUT side.
        let noise_put = inst.config.put_noise();
        let mut put_denom = vec![0.0; mm * nn];
        let mut put_gamma = vec![0.0; mm * nn];
        let mut put_rate = vec![0.0; mm];
        for m in 0..mm {
            for n in 0..nn {
                if inst.pi(m, n) == 0.0 {
                    continue;
                }
                let mut d = noise_put;
                for &(l, g) in &active[n] {
                    d += view.chi[idx3(l, g, n, gg, nn)]
                        * pw.p[idx3(l, g, n, gg, nn)]
                        * inst.h_sbs_put(l, m, n);
                }
                let ga = pw.q_at(m, n) * inst.h_mbs_put(m, n) / d;
                put_denom[m * nn + n] = d;
                put_gamma[m * nn + n] = ga;
                put_rate[m] += (1.0 + ga).log2();
            }
        }

        ModelEval {
            inst,
            view,
            pw,
            jt,
            order,
            curve,
            denom,
            gamma,
            link_rate,
            y_sum,
            active,
            sut_rate,
            mos,
            put_denom,
            put_gamma,
            put_rate,
            backhaul,
        }
    }

    /// Convenience wrapper for a binary schedule carrying its own ordering.
    pub fn compute_binary(
        inst: &'a NetworkInstance,
        sched: &'a Schedule,
        pw: &'a PowerAllocation,
        jt: &'a JtMode,
        order: &'a OrderTable,
    ) -> Self {
        Self::compute(inst, ScheduleView::of(sched), pw, jt, order)
    }

    pub fn utility(&self) -> f64 {
        self.mos.iter().sum()
    }

    pub fn sut_rates(&self) -> &[f64] {
        &self.sut_rate
    }

    pub fn mos_values(&self) -> &[f64] {
        &self.mos
    }

    pub fn put_rates(&self) -> &[f64] {
        &self.put_rate
    }

    /// Carried rate per SBS in bit/s/Hz.
    pub fn backhaul_rates(&self) -> &[f64] {
        &self.backhaul
    }

    pub fn link_gamma(&self, l: usize, g: usize, n: usize) -> f64 {
        let (_, gg, _, nn) = self.inst.dims();
        self.gamma[idx3(l, g, n, gg, nn)]
    }

    /// Value of the weighted scalar for `w`.
    pub fn weighted(&self, w: &RateWeights) -> f64 {
        let mut acc = 0.0;
        for (g, m) in self.mos.iter().enumerate() {
            acc += w.mos[g] * m;
        }
        for (m, r) in self.put_rate.iter().enumerate() {
            acc += w.put[m] * r;
        }
        for (l, c) in self.backhaul.iter().enumerate() {
            acc += w.backhaul[l] * c;
        }
        acc
    }

    /// Per-link weight of `d r_link` inside the weighted scalar.
    #[inline]
    fn link_weight(&self, w: &RateWeights, l: usize, g: usize, n: usize) -> f64 {
        let (_, gg, _, nn) = self.inst.dims();
        let rho = w.mos[g] * self.curve.mos_slope(self.sut_rate[g]) + w.backhaul[l];
        rho * self.view.theta[l * gg + g] * self.view.eps[idx3(l, g, n, gg, nn)]
    }

    /// Gradient of the weighted scalar with respect to `(p, q)`. Entries are
    /// laid out like [`PowerAllocation::p`] and [`PowerAllocation::q`].
    pub fn grad_power(&self, w: &RateWeights) -> (Vec<f64>, Vec<f64>) {
        let (ll, gg, mm, nn) = self.inst.dims();
        let inst = self.inst;
        let mut dp = vec![0.0; ll * gg * nn];
        let mut dq = vec![0.0; mm * nn];

        for l in 0..ll {
            for g in 0..gg {
                for n in 0..nn {
                    let i = idx3(l, g, n, gg, nn);
                    let omega = self.link_weight(w, l, g, n);
                    if omega == 0.0 {
                        continue;
                    }
                    let d = self.denom[i];
                    let kappa = omega / (LN_2 * (1.0 + self.gamma[i]) * d);
                    let h_own = inst.h_sbs_sut(l, g, n);
                    dp[i] += kappa * h_own;
                    let t = kappa * self.gamma[i];
                    if t == 0.0 {
                        continue;
                    }
                    // UDL -> q entries on this subcarrier.
                    let hm = inst.h_mbs_sut(g, n);
                    for m in 0..mm {
                        if inst.pi(m, n) > 0.0 {
                            dq[m * nn + n] -= t * hm;
                        }
                    }
                    // CCD and NOMA -> active co-channel entries.
                    for &(c, gs) in &self.active[n] {
                        let j = idx3(c, gs, n, gg, nn);
                        let chi = self.view.chi[j];
                        if c != l && gs != g {
                            dp[j] -= t * chi * inst.h_sbs_sut(c, g, n);
                        }
                        if c == l
                            && gs != g
                            && self.order.rank(l, gs, n) > self.order.rank(l, g, n)
                        {
                            dp[j] -= t * chi * h_own;
                        }
                    }
                    // JT -> entries of jointly-served other users.
                    self.jt_grad_power_into(&mut dp, t, g, n);
                }
            }
        }

        // PUT-rate terms.
        for m in 0..mm {
            if w.put[m] == 0.0 {
                continue;
            }
            for n in 0..nn {
                if inst.pi(m, n) == 0.0 {
                    continue;
                }
                let d = self.put_denom[m * nn + n];
                let ga = self.put_gamma[m * nn + n];
                let coef = w.put[m] / (LN_2 * (1.0 + ga));
                dq[m * nn + n] += coef * inst.h_mbs_put(m, n) / d;
                let back = coef * ga / d;
                for &(c, gs) in &self.active[n] {
                    let j = idx3(c, gs, n, gg, nn);
                    dp[j] -= back * self.view.chi[j] * inst.h_sbs_put(c, m, n);
                }
            }
        }
        (dp, dq)
    }

    fn jt_grad_power_into(&self, dp: &mut [f64], t: f64, g: usize, n: usize) {
        let (_, gg, _, nn) = self.inst.dims();
        let inst = self.inst;
        match self.jt {
            JtMode::Exact => {
                for &(c, gs) in &self.active[n] {
                    if gs == g {
                        continue;
                    }
                    let j = idx3(c, gs, n, gg, nn);
                    let hc = inst.h_sbs_sut(c, g, n);
                    let xc = self.view.chi[j] * self.pw.p[j] * hc;
                    let y = self.y_sum[(gs * gg + g) * nn + n];
                    dp[j] -= t * 4.0 * self.view.chi[j] * hc * (y - xc);
                }
            }
            JtMode::Convex(rule) => {
                for &(c, gs) in &self.active[n] {
                    if gs == g {
                        continue;
                    }
                    let j = idx3(c, gs, n, gg, nn);
                    let hc = inst.h_sbs_sut(c, g, n);
                    let mut acc = 0.0;
                    for &(b, gb) in &self.active[n] {
                        if gb != gs || b == c {
                            continue;
                        }
                        let jb = idx3(b, gs, n, gg, nn);
                        let lam_cb = rule.lambda(c, b, gs, n);
                        let lam_bc = rule.lambda(b, c, gs, n);
                        acc += self.view.chi[jb]
                            * inst.h_sbs_sut(b, g, n)
                            * (lam_cb + 1.0 / lam_bc);
                    }
                    dp[j] -= t * 2.0 * self.view.chi[j] * hc * self.pw.p[j] * acc;
                }
            }
        }
    }

    /// Gradient of the weighted scalar with respect to `(theta, eps, chi)`.
    pub fn grad_schedule(&self, w: &RateWeights) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (ll, gg, mm, nn) = self.inst.dims();
        let inst = self.inst;
        let mut dtheta = vec![0.0; ll * gg];
        let mut deps = vec![0.0; ll * gg * nn];
        let mut dchi = vec![0.0; ll * gg * nn];

        // Rate-mask part and the per-link denominator weights t.
        let mut t_lgn = vec![0.0; ll * gg * nn];
        let mut tau = vec![0.0; gg * nn]; // sum over l of t
        for l in 0..ll {
            for g in 0..gg {
                let rho = w.mos[g] * self.curve.mos_slope(self.sut_rate[g]) + w.backhaul[l];
                for n in 0..nn {
                    let i = idx3(l, g, n, gg, nn);
                    dtheta[l * gg + g] += rho * self.view.eps[i] * self.link_rate[i];
                    deps[i] += rho * self.view.theta[l * gg + g] * self.link_rate[i];
                    let omega = rho * self.view.theta[l * gg + g] * self.view.eps[i];
                    if omega != 0.0 {
                        let t = omega * self.gamma[i]
                            / (LN_2 * (1.0 + self.gamma[i]) * self.denom[i]);
                        t_lgn[i] = t;
                        tau[g * nn + n] += t;
                    }
                }
            }
        }

        // CCD: dchi[c,gs,n] -= p * sum_{g != gs} H[c][g][n]*(tau - t[c,g,n]).
        for c in 0..ll {
            for n in 0..nn {
                let mut phi = 0.0;
                for g in 0..gg {
                    phi += inst.h_sbs_sut(c, g, n)
                        * (tau[g * nn + n] - t_lgn[idx3(c, g, n, gg, nn)]);
                }
                for gs in 0..gg {
                    let i = idx3(c, gs, n, gg, nn);
                    let own = inst.h_sbs_sut(c, gs, n)
                        * (tau[gs * nn + n] - t_lgn[i]);
                    dchi[i] -= self.pw.p[i] * (phi - own);
                }
            }
        }

        // NOMA: dchi[l,gs,n] -= p * sum of t*H over users decoded before gs.
        let mut user_at_rank = vec![0usize; gg];
        for l in 0..ll {
            for n in 0..nn {
                for g in 0..gg {
                    user_at_rank[self.order.rank(l, g, n)] = g;
                }
                let mut acc = 0.0;
                for r in 0..gg {
                    let g = user_at_rank[r];
                    let i = idx3(l, g, n, gg, nn);
                    dchi[i] -= self.pw.p[i] * acc;
                    acc += t_lgn[i] * inst.h_sbs_sut(l, g, n);
                }
            }
        }

        // Joint-transmission part.
        match self.jt {
            JtMode::Exact => {
                for c in 0..ll {
                    for gs in 0..gg {
                        for n in 0..nn {
                            let i = idx3(c, gs, n, gg, nn);
                            let pc = self.pw.p[i];
                            if pc == 0.0 {
                                continue;
                            }
                            let mut acc = 0.0;
                            for g in 0..gg {
                                if g == gs {
                                    continue;
                                }
                                let hc = inst.h_sbs_sut(c, g, n);
                                let y = self.y_sum[(gs * gg + g) * nn + n];
                                acc += tau[g * nn + n]
                                    * hc
                                    * (y - self.view.chi[i] * pc * hc);
                            }
                            dchi[i] -= 4.0 * pc * acc;
                        }
                    }
                }
            }
            JtMode::Convex(rule) => {
                // chi enters each convex pair term linearly in both factors.
                for c in 0..ll {
                    for gs in 0..gg {
                        for n in 0..nn {
                            let i = idx3(c, gs, n, gg, nn);
                            let pc = self.pw.p[i];
                            let mut acc = 0.0;
                            for b in 0..ll {
                                if b == c {
                                    continue;
                                }
                                let jb = idx3(b, gs, n, gg, nn);
                                let ib = self.view.chi[jb];
                                if ib == 0.0 {
                                    continue;
                                }
                                let pb = self.pw.p[jb];
                                let lam_cb = rule.lambda(c, b, gs, n);
                                let lam_bc = rule.lambda(b, c, gs, n);
                                let bound_cb = 0.5 * lam_cb * pc * pc + 0.5 / lam_cb * pb * pb;
                                let bound_bc = 0.5 * lam_bc * pb * pb + 0.5 / lam_bc * pc * pc;
                                for g in 0..gg {
                                    if g == gs {
                                        continue;
                                    }
                                    let hc = inst.h_sbs_sut(c, g, n);
                                    let hb = inst.h_sbs_sut(b, g, n);
                                    acc += tau[g * nn + n]
                                        * 2.0
                                        * ib
                                        * hc
                                        * hb
                                        * (bound_cb + bound_bc);
                                }
                            }
                            dchi[i] -= acc;
                        }
                    }
                }
            }
        }

        // PUT-rate denominators.
        for m in 0..mm {
            if w.put[m] == 0.0 {
                continue;
            }
            for n in 0..nn {
                if inst.pi(m, n) == 0.0 {
                    continue;
                }
                let ga = self.put_gamma[m * nn + n];
                let coef =
                    w.put[m] * ga / (LN_2 * (1.0 + ga) * self.put_denom[m * nn + n]);
                for c in 0..ll {
                    for gs in 0..gg {
                        let i = idx3(c, gs, n, gg, nn);
                        dchi[i] -= coef * self.pw.p[i] * inst.h_sbs_put(c, m, n);
                    }
                }
            }
        }

        (dtheta, deps, dchi)
    }
}
