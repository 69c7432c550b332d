//! Interference terms, SINR, per-user and per-PUT achievable rates, and the
//! per-SBS backhaul rate.
//!
//! Four interference classes hit a SUT receiver on a shared subcarrier:
//!
//! * **UDL** — cross-tier leakage from the MBS serving primary users,
//! * **CCD** — co-channel transmissions from other SBSs to other SUTs,
//! * **NOMA** — intra-cell superposition residue not removed by SIC,
//! * **JT** — the cross-product term of joint transmissions to other SUTs.
//!
//! All rates are in bit/s/Hz; multiply by the subcarrier bandwidth only when
//! comparing against the backhaul cap, which is specified in bit/s.

use crate::channel::{decode_before, decode_key};
use crate::error::{Error, Result};
use crate::model::{NetworkInstance, PowerAllocation, Schedule};
use crate::qoe::MosCurve;

/// Per-link interference decomposition in watts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterferenceBreakdown {
    pub udl: f64,
    pub ccd: f64,
    pub noma: f64,
    pub jt: f64,
}

impl InterferenceBreakdown {
    pub fn total(&self) -> f64 {
        self.udl + self.ccd + self.noma + self.jt
    }
}

/// Cross-tier interference from the MBS at SUT `g` on subcarrier `n`:
/// the primary-held transmit power weighted by the MBS-to-SUT gain.
pub fn udl_interference(inst: &NetworkInstance, pw: &PowerAllocation, g: usize, n: usize) -> f64 {
    let (_, _, mm, _) = inst.dims();
    let h = inst.h_mbs_sut(g, n);
    (0..mm).map(|m| inst.pi(m, n) * pw.q_at(m, n) * h).sum()
}

/// Inter-cell co-channel interference at SUT `g` served by SBS `l` on
/// subcarrier `n`: every other SBS's transmissions to every other SUT.
pub fn ccd_interference(
    inst: &NetworkInstance,
    sched: &Schedule,
    pw: &PowerAllocation,
    l: usize,
    g: usize,
    n: usize,
) -> f64 {
    let (ll, gg, _, _) = inst.dims();
    let mut acc = 0.0;
    for lp in 0..ll {
        if lp == l {
            continue;
        }
        let h = inst.h_sbs_sut(lp, g, n);
        for gp in 0..gg {
            if gp == g {
                continue;
            }
            acc += sched.theta_at(lp, gp) * sched.eps_at(lp, gp, n) * pw.p_at(lp, gp, n) * h;
        }
    }
    acc
}

/// Residual intra-cell superposition interference at SUT `g` in cluster
/// `(l, n)`: power of cluster members decoded after `g`, through `g`'s own
/// channel. Members decoded before `g` are removed by SIC.
pub fn noma_interference(
    inst: &NetworkInstance,
    sched: &Schedule,
    pw: &PowerAllocation,
    l: usize,
    g: usize,
    n: usize,
) -> f64 {
    let (_, gg, _, _) = inst.dims();
    let own_key = decode_key(inst, sched, l, g, n);
    let h = inst.h_sbs_sut(l, g, n);
    let mut acc = 0.0;
    for gp in 0..gg {
        if gp == g {
            continue;
        }
        let key = decode_key(inst, sched, l, gp, n);
        if decode_before(&own_key, &key) == std::cmp::Ordering::Less {
            acc += sched.theta_at(l, gp) * sched.eps_at(l, gp, n) * pw.p_at(l, gp, n) * h;
        }
    }
    acc
}

/// Joint-transmission cross interference at SUT `g` on subcarrier `n`:
/// for every ordered SBS pair `(l', l'')` cooperatively serving another SUT,
/// twice the product of both transmit powers and both gains toward `g`.
pub fn jt_interference_exact(
    inst: &NetworkInstance,
    sched: &Schedule,
    pw: &PowerAllocation,
    g: usize,
    n: usize,
) -> f64 {
    let (ll, gg, _, _) = inst.dims();
    let mut acc = 0.0;
    for gp in 0..gg {
        if gp == g {
            continue;
        }
        for a in 0..ll {
            let wa = sched.theta_at(a, gp) * sched.eps_at(a, gp, n) * pw.p_at(a, gp, n);
            if wa == 0.0 {
                continue;
            }
            let ha = inst.h_sbs_sut(a, g, n);
            for b in 0..ll {
                if b == a {
                    continue;
                }
                let wb = sched.theta_at(b, gp) * sched.eps_at(b, gp, n) * pw.p_at(b, gp, n);
                if wb == 0.0 {
                    continue;
                }
                acc += 2.0 * wa * wb * ha * inst.h_sbs_sut(b, g, n);
            }
        }
    }
    acc
}

/// Convex upper bound of [`jt_interference_exact`] for a fixed schedule:
/// each power product `p' p''` is replaced by
/// `(lambda/2) p'^2 + (1/(2 lambda)) p''^2`, which is tight when
/// `lambda = p''/p'`. Rejects `lambda <= 0`.
pub fn jt_interference_convex(
    inst: &NetworkInstance,
    sched: &Schedule,
    pw: &PowerAllocation,
    lambda: f64,
    g: usize,
    n: usize,
) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("lambda={lambda} must be > 0")));
    }
    Ok(jt_interference_convex_with(inst, sched, pw, &LambdaRule::Fixed(lambda), g, n))
}

/// Per-pair lambda selection for the convexified joint-transmission bound.
#[derive(Debug, Clone)]
pub enum LambdaRule {
    /// Single positive scalar for every pair.
    Fixed(f64),
    /// Tight per-pair ratio `p''/p'` taken from a previous power iterate,
    /// clipped to `[1e-6, 1e6]`; pairs whose `p'` is below the power floor
    /// fall back to 1.
    Ratio { previous: PowerAllocation, floor: f64 },
}

impl LambdaRule {
    pub fn ratio_from(previous: &PowerAllocation, floor: f64) -> Self {
        LambdaRule::Ratio { previous: previous.clone(), floor }
    }

    /// Lambda for the ordered SBS pair `(a, b)` serving SUT `gp` on `n`.
    #[inline]
    pub fn lambda(&self, a: usize, b: usize, gp: usize, n: usize) -> f64 {
        match self {
            LambdaRule::Fixed(v) => *v,
            LambdaRule::Ratio { previous, floor } => {
                let pa = previous.p_at(a, gp, n);
                let pb = previous.p_at(b, gp, n);
                if pa < *floor {
                    1.0
                } else {
                    (pb / pa).clamp(1e-6, 1e6)
                }
            }
        }
    }
}

pub(crate) fn jt_interference_convex_with(
    inst: &NetworkInstance,
    sched: &Schedule,
    pw: &PowerAllocation,
    rule: &LambdaRule,
    g: usize,
    n: usize,
) -> f64 {
    let (ll, gg, _, _) = inst.dims();
    let mut acc = 0.0;
    for gp in 0..gg {
        if gp == g {
            continue;
        }
        for a in 0..ll {
            let ia = sched.theta_at(a, gp) * sched.eps_at(a, gp, n);
            if ia == 0.0 {
                continue;
            }
            let ha = inst.h_sbs_sut(a, g, n);
            let pa = pw.p_at(a, gp, n);
            for b in 0..ll {
                if b == a {
                    continue;
                }
                let ib = sched.theta_at(b, gp) * sched.eps_at(b, gp, n);
                if ib == 0.0 {
                    continue;
                }
                let lam = rule.lambda(a, b, gp, n);
                let pb = pw.p_at(b, gp, n);
                let bound = 0.5 * lam * pa * pa + 0.5 / lam * pb * pb;
                acc += 2.0 * ia * ib * bound * ha * inst.h_sbs_sut(b, g, n);
            }
        }
    }
    acc
}

pub fn interference_breakdown(
    inst: &NetworkInstance,
    sched: &Schedule,
    pw: &PowerAllocation,
    l: usize,
    g: usize,
    n: usize,
) -> InterferenceBreakdown {
    InterferenceBreakdown {
        udl: udl_interference(inst, pw, g, n),
        ccd: ccd_interference(inst, sched, pw, l, g, n),
        noma: noma_interference(inst, sched, pw, l, g, n),
        jt: jt_interference_exact(inst, sched, pw, g, n),
    }
}

/// Received SINR of SUT `g` from SBS `l` on subcarrier `n` under the exact
/// interference model.
pub fn sinr(
    inst: &NetworkInstance,
    sched: &Schedule,
    pw: &PowerAllocation,
    l: usize,
    g: usize,
    n: usize,
) -> f64 {
    let denom = interference_breakdown(inst, sched, pw, l, g, n).total()
        + inst.config.noise_power[g];
    pw.p_at(l, g, n) * inst.h_sbs_sut(l, g, n) / denom
}

/// Achievable rate of SUT `g` in bit/s/Hz: carrier aggregation over every
/// assigned `(l, n)` link.
pub fn sut_rate(inst: &NetworkInstance, sched: &Schedule, pw: &PowerAllocation, g: usize) -> f64 {
    let (ll, _, _, nn) = inst.dims();
    let mut acc = 0.0;
    for l in 0..ll {
        for n in 0..nn {
            let w = sched.theta_at(l, g) * sched.eps_at(l, g, n);
            if w > 0.0 {
                acc += w * (1.0 + sinr(inst, sched, pw, l, g, n)).log2();
            }
        }
    }
    acc
}

/// Rate of PUT `m` in bit/s/Hz over its held subcarriers, with the secondary
/// tier as interference.
pub fn put_rate(inst: &NetworkInstance, sched: &Schedule, pw: &PowerAllocation, m: usize) -> f64 {
    let (ll, gg, _, nn) = inst.dims();
    let noise = inst.config.put_noise();
    let mut acc = 0.0;
    for n in 0..nn {
        if inst.pi(m, n) == 0.0 {
            continue;
        }
        let mut denom = noise;
        for l in 0..ll {
            let h = inst.h_sbs_put(l, m, n);
            for g in 0..gg {
                denom += sched.theta_at(l, g) * sched.eps_at(l, g, n) * pw.p_at(l, g, n) * h;
            }
        }
        acc += (1.0 + pw.q_at(m, n) * inst.h_mbs_put(m, n) / denom).log2();
    }
    acc
}

/// Total rate carried by SBS `l` in bit/s/Hz.
pub fn backhaul_rate(inst: &NetworkInstance, sched: &Schedule, pw: &PowerAllocation, l: usize) -> f64 {
    let (_, gg, _, nn) = inst.dims();
    let mut acc = 0.0;
    for g in 0..gg {
        for n in 0..nn {
            let w = sched.theta_at(l, g) * sched.eps_at(l, g, n);
            if w > 0.0 {
                acc += w * (1.0 + sinr(inst, sched, pw, l, g, n)).log2();
            }
        }
    }
    acc
}

/// Same figure in bit/s, for comparison against the backhaul cap.
pub fn backhaul_rate_bps(
    inst: &NetworkInstance,
    sched: &Schedule,
    pw: &PowerAllocation,
    l: usize,
) -> f64 {
    backhaul_rate(inst, sched, pw, l) * inst.config.subcarrier_bandwidth
}

/// Total perceived quality over all SUTs under the exact interference model.
pub fn total_qoe(inst: &NetworkInstance, sched: &Schedule, pw: &PowerAllocation) -> f64 {
    let curve = MosCurve::new(inst.config.service_profile());
    (0..inst.config.num_sut).map(|g| curve.mos(sut_rate(inst, sched, pw, g))).sum()
}
