//! Rate-to-MOS mapping and the aggregate QoE objective.
//!
//! The MOS curve is logarithmic in rate and two-point calibrated: 2 bit/s/Hz
//! maps to MOS 1 and 7 bit/s/Hz maps to the per-service maximum (5.0 for
//! web, 4.5 for video and audio), clamped outside the anchor interval.

use crate::eval::{JtMode, ModelEval};
use crate::model::{NetworkInstance, PowerAllocation, Schedule, ServiceProfile};

/// Rates below this floor map straight to MOS 1.
pub const RATE_FLOOR: f64 = 1e-6;

/// Calibrated MOS curve: `mos(r) = a*log2(r) + b` on the anchor interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MosCurve {
    pub profile: ServiceProfile,
    /// MOS per log2-rate unit.
    pub slope: f64,
    /// MOS at rate 1 bit/s/Hz (before clamping).
    pub intercept: f64,
}

impl MosCurve {
    pub fn new(profile: ServiceProfile) -> Self {
        let lo = profile.rate_anchor_min.log2();
        let hi = profile.rate_anchor_max.log2();
        let slope = (profile.mos_max - 1.0) / (hi - lo);
        let intercept = 1.0 - slope * lo;
        MosCurve { profile, slope, intercept }
    }

    /// MOS for a rate in bit/s/Hz, clamped to `[1, mos_max]`.
    pub fn mos(&self, rate: f64) -> f64 {
        if rate < RATE_FLOOR {
            return 1.0;
        }
        (self.slope * rate.log2() + self.intercept).clamp(1.0, self.profile.mos_max)
    }

    /// Derivative of [`MosCurve::mos`] with respect to rate; zero in the
    /// clamped regions (subgradient convention at the anchors).
    pub fn mos_slope(&self, rate: f64) -> f64 {
        if rate <= self.profile.rate_anchor_min || rate >= self.profile.rate_anchor_max {
            return 0.0;
        }
        self.slope / (rate * std::f64::consts::LN_2)
    }
}

/// Total perceived QoE over all SUTs under the exact interference model.
/// Re-exported as [`crate::sinr::total_qoe`]; kept here for callers that
/// already hold a curve.
pub fn total_qoe(inst: &NetworkInstance, sched: &Schedule, pw: &PowerAllocation) -> f64 {
    crate::sinr::total_qoe(inst, sched, pw)
}

/// Gradient of the total QoE with respect to every transmit-power entry,
/// holding the schedule fixed. `jt` selects the exact or convexified
/// joint-transmission model used inside the SINR.
pub struct PowerGradient {
    /// d(total QoE)/d(p[l][g][n]), flattened like [`PowerAllocation::p`].
    pub dp: Vec<f64>,
    /// d(total QoE)/d(q[m][n]), flattened like [`PowerAllocation::q`].
    pub dq: Vec<f64>,
}

pub fn mos_gradient_wrt_power(
    inst: &NetworkInstance,
    sched: &Schedule,
    pw: &PowerAllocation,
    jt: &JtMode,
) -> PowerGradient {
    let order = crate::channel::OrderTable::from_schedule(inst, sched);
    let ev = ModelEval::compute_binary(inst, sched, pw, jt, &order);
    let mut weights = crate::eval::RateWeights::zeros(inst);
    for g in 0..inst.config.num_sut {
        weights.mos[g] = 1.0;
    }
    let (dp, dq) = ev.grad_power(&weights);
    PowerGradient { dp, dq }
}
