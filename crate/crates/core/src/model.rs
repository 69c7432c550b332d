//! Domain types shared by every other module: network configuration,
//! generated instances, binary schedules and power allocations.
//!
//! Index conventions used throughout the crate:
//!
//! * `l` — small base station (SBS), `0..L`
//! * `g` — secondary user terminal (SUT), `0..G`
//! * `m` — primary user terminal (PUT), `0..M`
//! * `n` — subcarrier, `0..N`
//!
//! The macro base station (MBS) is a distinguished transmitter, never part
//! of the SBS range. Channel gains are stored as power gains `|h|^2`; the
//! complex amplitude is never materialized.

use serde::{Deserialize, Serialize};

use crate::channel::decoding_order;

/// Converts a dBm figure to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Multimedia service class carried by the secondary tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    Web,
    Video,
    Audio,
}

impl ServiceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ServiceKind::Web => "web",
            ServiceKind::Video => "video",
            ServiceKind::Audio => "audio",
        }
    }
}

impl std::str::FromStr for ServiceKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "web" => Ok(ServiceKind::Web),
            "video" => Ok(ServiceKind::Video),
            "audio" => Ok(ServiceKind::Audio),
            other => Err(format!("unknown service `{other}` (expected web|video|audio)")),
        }
    }
}

/// MOS calibration anchors for one service class.
///
/// A rate of `rate_anchor_min` bit/s/Hz maps to MOS 1 and `rate_anchor_max`
/// maps to `mos_max`; the curve between them is logarithmic in rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServiceProfile {
    pub kind: ServiceKind,
    pub mos_max: f64,
    pub rate_anchor_min: f64,
    pub rate_anchor_max: f64,
}

impl ServiceProfile {
    pub fn new(kind: ServiceKind) -> Self {
        let mos_max = match kind {
            ServiceKind::Web => 5.0,
            ServiceKind::Video | ServiceKind::Audio => 4.5,
        };
        ServiceProfile { kind, mos_max, rate_anchor_min: 2.0, rate_anchor_max: 7.0 }
    }
}

/// Scenario parameters: node counts, radii, power budgets and per-entity
/// limits. All powers in watts, rates in bit/s/Hz unless noted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Number of small base stations (L).
    pub num_sbs: usize,
    /// Number of secondary user terminals (G).
    pub num_sut: usize,
    /// Number of primary user terminals (M).
    pub num_put: usize,
    /// Number of subcarriers (N).
    pub num_subcarriers: usize,
    /// MBS coverage radius in meters.
    pub mbs_radius: f64,
    /// SBS coverage radius in meters (only affects expected link distances).
    pub sbs_radius: f64,
    /// Per-subcarrier bandwidth in Hz.
    pub subcarrier_bandwidth: f64,
    /// MBS total transmit power budget in watts.
    pub q_max: f64,
    /// Per-SBS transmit power budgets in watts.
    pub p_max: Vec<f64>,
    /// Per-SBS backhaul capacity in bit/s.
    pub backhaul_cap: Vec<f64>,
    /// Per-SBS association load cap (number of SUTs).
    pub load_cap: Vec<usize>,
    /// Per-subcarrier SIC multiplexing cap (number of SUT links).
    pub sic_cap: Vec<usize>,
    /// Per-PUT minimum rate in bit/s/Hz.
    pub put_rate_min: Vec<f64>,
    /// Per-SUT minimum MOS.
    pub mos_min: Vec<f64>,
    /// Per-SUT receiver noise power in watts. PUT receivers use the common
    /// floor returned by [`NetworkConfig::put_noise`].
    pub noise_power: Vec<f64>,
    /// Service class shared by all SUTs in the scenario.
    pub service: ServiceKind,
    /// Seed for instance generation and solver initialization.
    pub rng_seed: u64,
}

impl NetworkConfig {
    /// Parameter set used by the reference experiments: 42 dBm MBS budget,
    /// 37 dBm SBS budgets, 15 kHz subcarriers, 11.183 Mbps backhaul,
    /// -117 dBm noise, 2 bit/s/Hz PUT floor, MOS floor 1, Z=3, Omega=2.
    pub fn with_dims(
        service: ServiceKind,
        num_sbs: usize,
        num_sut: usize,
        num_put: usize,
        num_subcarriers: usize,
        rng_seed: u64,
    ) -> Self {
        NetworkConfig {
            num_sbs,
            num_sut,
            num_put,
            num_subcarriers,
            mbs_radius: 500.0,
            sbs_radius: 50.0,
            subcarrier_bandwidth: 15e3,
            q_max: dbm_to_watts(42.0),
            p_max: vec![dbm_to_watts(37.0); num_sbs],
            backhaul_cap: vec![11.183e6; num_sbs],
            load_cap: vec![3; num_sbs],
            sic_cap: vec![2; num_subcarriers],
            put_rate_min: vec![2.0; num_put],
            mos_min: vec![1.0; num_sut],
            noise_power: vec![dbm_to_watts(-117.0); num_sut],
            service,
            rng_seed,
        }
    }

    /// Scenario presets matching the reference experiments per service.
    pub fn preset(service: ServiceKind, rng_seed: u64) -> Self {
        match service {
            ServiceKind::Web => Self::with_dims(service, 10, 8, 6, 32, rng_seed),
            ServiceKind::Video => Self::with_dims(service, 10, 10, 4, 16, rng_seed),
            ServiceKind::Audio => Self::with_dims(service, 10, 8, 4, 16, rng_seed),
        }
    }

    /// Common noise floor used in PUT receivers.
    pub fn put_noise(&self) -> f64 {
        self.noise_power[0]
    }

    pub fn service_profile(&self) -> ServiceProfile {
        ServiceProfile::new(self.service)
    }

    /// Checks the structural invariants of the configuration.
    pub fn validate(&self) -> Result<(), String> {
        if self.num_sbs == 0 || self.num_sut == 0 || self.num_put == 0 || self.num_subcarriers == 0
        {
            return Err("all of L, G, M, N must be >= 1".into());
        }
        if self.num_put > self.num_subcarriers {
            return Err(format!(
                "M={} PUTs cannot each hold a subcarrier with N={}",
                self.num_put, self.num_subcarriers
            ));
        }
        if !(self.mbs_radius > 0.0 && self.sbs_radius > 0.0 && self.subcarrier_bandwidth > 0.0) {
            return Err("radii and bandwidth must be strictly positive".into());
        }
        if !(self.q_max > 0.0) {
            return Err("q_max must be strictly positive".into());
        }
        let per_sbs_ok = |v: &Vec<f64>| v.len() == self.num_sbs && v.iter().all(|x| *x > 0.0);
        if !per_sbs_ok(&self.p_max) {
            return Err("p_max must list a positive budget per SBS".into());
        }
        if !per_sbs_ok(&self.backhaul_cap) {
            return Err("backhaul_cap must list a positive capacity per SBS".into());
        }
        if self.load_cap.len() != self.num_sbs || self.load_cap.iter().any(|z| *z == 0) {
            return Err("load_cap must list a cap >= 1 per SBS".into());
        }
        if self.sic_cap.len() != self.num_subcarriers || self.sic_cap.iter().any(|o| *o == 0) {
            return Err("sic_cap must list a cap >= 1 per subcarrier".into());
        }
        if self.put_rate_min.len() != self.num_put || self.put_rate_min.iter().any(|r| *r < 0.0) {
            return Err("put_rate_min must list a nonnegative floor per PUT".into());
        }
        if self.noise_power.len() != self.num_sut || self.noise_power.iter().any(|s| *s <= 0.0) {
            return Err("noise_power must list a positive value per SUT".into());
        }
        let mos_max = self.service_profile().mos_max;
        if self.mos_min.len() != self.num_sut
            || self.mos_min.iter().any(|m| *m < 1.0 || *m > mos_max)
        {
            return Err(format!("mos_min entries must lie in [1, {mos_max}]"));
        }
        Ok(())
    }
}

/// Planar position in meters.
pub type Position = (f64, f64);

pub fn distance(a: Position, b: Position) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// One immutable scenario: topology, power gains and the fixed primary-tier
/// OFDMA map. Produced by [`crate::channel::generate_instance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkInstance {
    pub config: NetworkConfig,
    pub mbs_pos: Position,
    pub sbs_pos: Vec<Position>,
    pub sut_pos: Vec<Position>,
    pub put_pos: Vec<Position>,
    /// `|h|^2` from SBS `l` to SUT `g` on subcarrier `n`, flattened `[l][g][n]`.
    pub gain_sbs_sut: Vec<f64>,
    /// `|h|^2` from SBS `l` to PUT `m` on subcarrier `n`, flattened `[l][m][n]`.
    pub gain_sbs_put: Vec<f64>,
    /// `|h|^2` from the MBS to SUT `g` on subcarrier `n`, flattened `[g][n]`.
    pub gain_mbs_sut: Vec<f64>,
    /// `|h|^2` from the MBS to PUT `m` on subcarrier `n`, flattened `[m][n]`.
    pub gain_mbs_put: Vec<f64>,
    /// Primary OFDMA map `pi[m][n]`, flattened `[m][n]`; 1 when PUT `m`
    /// holds subcarrier `n`.
    pub primary_alloc: Vec<u8>,
}

impl NetworkInstance {
    #[inline]
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (
            self.config.num_sbs,
            self.config.num_sut,
            self.config.num_put,
            self.config.num_subcarriers,
        )
    }

    #[inline]
    pub fn h_sbs_sut(&self, l: usize, g: usize, n: usize) -> f64 {
        let (_, gg, _, nn) = self.dims();
        self.gain_sbs_sut[(l * gg + g) * nn + n]
    }

    #[inline]
    pub fn h_sbs_put(&self, l: usize, m: usize, n: usize) -> f64 {
        let (_, _, mm, nn) = self.dims();
        self.gain_sbs_put[(l * mm + m) * nn + n]
    }

    #[inline]
    pub fn h_mbs_sut(&self, g: usize, n: usize) -> f64 {
        let nn = self.config.num_subcarriers;
        self.gain_mbs_sut[g * nn + n]
    }

    #[inline]
    pub fn h_mbs_put(&self, m: usize, n: usize) -> f64 {
        let nn = self.config.num_subcarriers;
        self.gain_mbs_put[m * nn + n]
    }

    #[inline]
    pub fn pi(&self, m: usize, n: usize) -> f64 {
        let nn = self.config.num_subcarriers;
        f64::from(self.primary_alloc[m * nn + n])
    }

    /// PUT holding subcarrier `n`, if any.
    pub fn put_on(&self, n: usize) -> Option<usize> {
        (0..self.config.num_put).find(|&m| self.primary_alloc[m * self.config.num_subcarriers + n] == 1)
    }
}

/// Joint association/allocation decision. `theta[l][g]` associates SUT `g`
/// with SBS `l`; `eps[l][g][n]` grants subcarrier `n` of SBS `l` to `g`;
/// `chi` is their product. Entries are `{0,1}`-valued unless `relaxed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub num_sbs: usize,
    pub num_sut: usize,
    pub num_subcarriers: usize,
    pub theta: Vec<f64>,
    pub eps: Vec<f64>,
    pub chi: Vec<f64>,
    pub relaxed: bool,
}

impl Schedule {
    pub fn zeros(num_sbs: usize, num_sut: usize, num_subcarriers: usize) -> Self {
        Schedule {
            num_sbs,
            num_sut,
            num_subcarriers,
            theta: vec![0.0; num_sbs * num_sut],
            eps: vec![0.0; num_sbs * num_sut * num_subcarriers],
            chi: vec![0.0; num_sbs * num_sut * num_subcarriers],
            relaxed: false,
        }
    }

    #[inline]
    pub fn theta_at(&self, l: usize, g: usize) -> f64 {
        self.theta[l * self.num_sut + g]
    }

    #[inline]
    pub fn eps_at(&self, l: usize, g: usize, n: usize) -> f64 {
        self.eps[(l * self.num_sut + g) * self.num_subcarriers + n]
    }

    #[inline]
    pub fn chi_at(&self, l: usize, g: usize, n: usize) -> f64 {
        self.chi[(l * self.num_sut + g) * self.num_subcarriers + n]
    }

    pub fn set_theta(&mut self, l: usize, g: usize, v: f64) {
        self.theta[l * self.num_sut + g] = v;
    }

    pub fn set_eps(&mut self, l: usize, g: usize, n: usize, v: f64) {
        self.eps[(l * self.num_sut + g) * self.num_subcarriers + n] = v;
    }

    /// Recomputes `chi = theta * eps` elementwise.
    pub fn sync_chi(&mut self) {
        for l in 0..self.num_sbs {
            for g in 0..self.num_sut {
                let th = self.theta_at(l, g);
                for n in 0..self.num_subcarriers {
                    let idx = (l * self.num_sut + g) * self.num_subcarriers + n;
                    self.chi[idx] = th * self.eps[idx];
                }
            }
        }
    }

    /// SBSs serving SUT `g` on subcarrier `n` (chi = 1).
    pub fn serving_sbs(&self, g: usize, n: usize) -> Vec<usize> {
        (0..self.num_sbs).filter(|&l| self.chi_at(l, g, n) > 0.5).collect()
    }

    /// True when SUT `g` receives joint transmission on subcarrier `n`.
    pub fn is_jt(&self, g: usize, n: usize) -> bool {
        (0..self.num_sbs).filter(|&l| self.chi_at(l, g, n) > 0.5).count() >= 2
    }
}

/// Downlink transmit powers in watts: `p[l][g][n]` from SBS `l` to SUT `g`
/// and `q[m][n]` from the MBS to PUT `m`, both per subcarrier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerAllocation {
    pub num_sbs: usize,
    pub num_sut: usize,
    pub num_put: usize,
    pub num_subcarriers: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl PowerAllocation {
    pub fn zeros(num_sbs: usize, num_sut: usize, num_put: usize, num_subcarriers: usize) -> Self {
        PowerAllocation {
            num_sbs,
            num_sut,
            num_put,
            num_subcarriers,
            p: vec![0.0; num_sbs * num_sut * num_subcarriers],
            q: vec![0.0; num_put * num_subcarriers],
        }
    }

    /// Uniform start per the reference initialization: `p = p_max/N` on every
    /// SBS link entry and `q = q_max/N` on primary-held subcarriers.
    pub fn uniform_init(inst: &NetworkInstance) -> Self {
        let (ll, gg, mm, nn) = inst.dims();
        let mut pw = PowerAllocation::zeros(ll, gg, mm, nn);
        for l in 0..ll {
            let per = inst.config.p_max[l] / nn as f64;
            for g in 0..gg {
                for n in 0..nn {
                    pw.set_p(l, g, n, per);
                }
            }
        }
        let per_q = inst.config.q_max / nn as f64;
        for m in 0..mm {
            for n in 0..nn {
                if inst.pi(m, n) > 0.5 {
                    pw.set_q(m, n, per_q);
                }
            }
        }
        pw
    }

    #[inline]
    pub fn p_at(&self, l: usize, g: usize, n: usize) -> f64 {
        self.p[(l * self.num_sut + g) * self.num_subcarriers + n]
    }

    #[inline]
    pub fn q_at(&self, m: usize, n: usize) -> f64 {
        self.q[m * self.num_subcarriers + n]
    }

    pub fn set_p(&mut self, l: usize, g: usize, n: usize, v: f64) {
        self.p[(l * self.num_sut + g) * self.num_subcarriers + n] = v;
    }

    pub fn set_q(&mut self, m: usize, n: usize, v: f64) {
        self.q[m * self.num_subcarriers + n] = v;
    }
}

/// One broken invariant found by [`validate_instance`].
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantViolation {
    pub what: String,
}

impl std::fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.what)
    }
}

/// Checks every structural invariant of an instance and returns the broken
/// ones with offending indices. An empty report means the instance is
/// well-formed. Pure and idempotent.
pub fn validate_instance(inst: &NetworkInstance) -> Vec<InvariantViolation> {
    let mut report = Vec::new();
    if let Err(e) = inst.config.validate() {
        report.push(InvariantViolation { what: format!("config: {e}") });
    }
    let (ll, gg, mm, nn) = inst.dims();
    if inst.sbs_pos.len() != ll || inst.sut_pos.len() != gg || inst.put_pos.len() != mm {
        report.push(InvariantViolation { what: "position vectors do not match config dims".into() });
        return report;
    }
    let mut check_gains = |name: &str, vals: &[f64], expect_len: usize| {
        if vals.len() != expect_len {
            report.push(InvariantViolation {
                what: format!("{name}: length {} != expected {expect_len}", vals.len()),
            });
            return;
        }
        for (i, v) in vals.iter().enumerate() {
            if !(v.is_finite() && *v > 0.0) {
                report.push(InvariantViolation {
                    what: format!("{name}[{i}] = {v} is not strictly positive and finite"),
                });
            }
        }
    };
    check_gains("gain_sbs_sut", &inst.gain_sbs_sut, ll * gg * nn);
    check_gains("gain_sbs_put", &inst.gain_sbs_put, ll * mm * nn);
    check_gains("gain_mbs_sut", &inst.gain_mbs_sut, gg * nn);
    check_gains("gain_mbs_put", &inst.gain_mbs_put, mm * nn);

    if inst.primary_alloc.len() != mm * nn {
        report.push(InvariantViolation { what: "primary_alloc has wrong length".into() });
        return report;
    }
    for n in 0..nn {
        let holders: usize = (0..mm).map(|m| usize::from(inst.primary_alloc[m * nn + n])).sum();
        if holders > 1 {
            report.push(InvariantViolation {
                what: format!("primary_alloc: subcarrier {n} held by {holders} PUTs (max 1)"),
            });
        }
    }
    for m in 0..mm {
        let held: usize = (0..nn).map(|n| usize::from(inst.primary_alloc[m * nn + n])).sum();
        if held == 0 {
            report.push(InvariantViolation { what: format!("primary_alloc: PUT {m} holds no subcarrier") });
        }
    }
    report
}

/// SUTs multiplexed on subcarrier `n` at SBS `l`, sorted in SIC decoding
/// order (decoded-first first).
pub fn noma_cluster(inst: &NetworkInstance, sched: &Schedule, l: usize, n: usize) -> Vec<usize> {
    assert!(!sched.relaxed, "noma_cluster requires a binary schedule");
    let members: Vec<usize> =
        (0..sched.num_sut).filter(|&g| sched.chi_at(l, g, n) > 0.5).collect();
    decoding_order(inst, sched, l, n, &members)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_instance, ChannelModelParams};

    fn small_instance() -> NetworkInstance {
        let cfg = NetworkConfig::with_dims(ServiceKind::Web, 2, 3, 2, 4, 7);
        generate_instance(&cfg, &ChannelModelParams::default()).unwrap()
    }

    #[test]
    fn default_instance_is_well_formed() {
        let inst = small_instance();
        assert!(validate_instance(&inst).is_empty());
    }

    #[test]
    fn double_booked_subcarrier_is_reported() {
        let mut inst = small_instance();
        let nn = inst.config.num_subcarriers;
        inst.primary_alloc[nn] = 1; // PUT 1 also takes subcarrier 0
        inst.primary_alloc[0] = 1;
        let report = validate_instance(&inst);
        assert!(report.iter().any(|v| v.what.contains("subcarrier 0") && v.what.contains("2 PUTs")));
    }

    #[test]
    fn zero_gain_is_reported() {
        let mut inst = small_instance();
        inst.gain_sbs_sut[5] = 0.0;
        let report = validate_instance(&inst);
        assert!(report.iter().any(|v| v.what.contains("gain_sbs_sut[5]")));
    }

    #[test]
    fn validate_is_idempotent() {
        let mut inst = small_instance();
        inst.gain_mbs_sut[1] = f64::NAN;
        let a = validate_instance(&inst);
        let b = validate_instance(&inst);
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn empty_cluster() {
        let inst = small_instance();
        let sched = Schedule::zeros(2, 3, 4);
        assert!(noma_cluster(&inst, &sched, 0, 0).is_empty());
    }

    #[test]
    fn singleton_cluster() {
        let inst = small_instance();
        let mut sched = Schedule::zeros(2, 3, 4);
        sched.set_theta(0, 1, 1.0);
        sched.set_eps(0, 1, 2, 1.0);
        sched.sync_chi();
        assert_eq!(noma_cluster(&inst, &sched, 0, 2), vec![1]);
    }

    #[test]
    fn weaker_gain_user_decoded_first() {
        let mut inst = small_instance();
        let nn = inst.config.num_subcarriers;
        let gg = inst.config.num_sut;
        // SBS 0, subcarrier 0: SUT 0 gain 0.9, SUT 1 gain 0.2.
        inst.gain_sbs_sut[0] = 0.9;
        inst.gain_sbs_sut[nn] = 0.2;
        let mut sched = Schedule::zeros(2, gg, nn);
        for g in [0, 1] {
            sched.set_theta(0, g, 1.0);
            sched.set_eps(0, g, 0, 1.0);
        }
        sched.sync_chi();
        assert_eq!(noma_cluster(&inst, &sched, 0, 0), vec![1, 0]);
    }

    #[test]
    fn chi_equals_theta_times_eps_exhaustively() {
        // All binary (theta, eps) combinations on a 1x2x2 shape.
        for mask in 0u32..(1 << 6) {
            let mut sched = Schedule::zeros(1, 2, 2);
            let mut bit = 0;
            for g in 0..2 {
                sched.set_theta(0, g, f64::from((mask >> bit) & 1));
                bit += 1;
            }
            for g in 0..2 {
                for n in 0..2 {
                    sched.set_eps(0, g, n, f64::from((mask >> bit) & 1));
                    bit += 1;
                }
            }
            sched.sync_chi();
            for g in 0..2 {
                for n in 0..2 {
                    assert_eq!(
                        sched.chi_at(0, g, n),
                        sched.theta_at(0, g) * sched.eps_at(0, g, n)
                    );
                }
            }
        }
    }

    #[test]
    fn dbm_conversion() {
        assert!((dbm_to_watts(30.0) - 1.0).abs() < 1e-12);
        assert!((dbm_to_watts(42.0) - 15.848931924611133).abs() < 1e-9);
    }
}
