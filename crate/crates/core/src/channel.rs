//! Seeded scenario generation: node placement, log-distance path loss with
//! Rayleigh fading, the primary-tier OFDMA map, and the SIC decoding order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::{distance, NetworkConfig, NetworkInstance, Position, Schedule};

/// Distances below this are clamped before evaluating path loss.
const MIN_LINK_DISTANCE_M: f64 = 1.0;

/// Log-distance path loss plus unit-mean exponential (Rayleigh power) fading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelModelParams {
    /// Path-loss exponent for MBS links.
    pub pathloss_exponent_mbs: f64,
    /// Path-loss exponent for SBS links.
    pub pathloss_exponent_sbs: f64,
    /// Reference loss in dB at 1 m.
    pub reference_loss_db: f64,
    /// Mean of the exponential power-gain fading draw.
    pub rayleigh_scale: f64,
}

impl Default for ChannelModelParams {
    fn default() -> Self {
        ChannelModelParams {
            pathloss_exponent_mbs: 3.76,
            pathloss_exponent_sbs: 3.67,
            reference_loss_db: 38.0,
            rayleigh_scale: 1.0,
        }
    }
}

impl ChannelModelParams {
    pub fn validate(&self) -> Result<(), String> {
        for (name, e) in [
            ("pathloss_exponent_mbs", self.pathloss_exponent_mbs),
            ("pathloss_exponent_sbs", self.pathloss_exponent_sbs),
        ] {
            if !(2.0..=6.0).contains(&e) {
                return Err(format!("{name}={e} outside [2, 6]"));
            }
        }
        if !(self.rayleigh_scale > 0.0) {
            return Err("rayleigh_scale must be > 0".into());
        }
        Ok(())
    }

    /// Mean power gain of a link of length `d` meters.
    pub fn mean_gain(&self, d: f64, exponent: f64) -> f64 {
        let d = d.max(MIN_LINK_DISTANCE_M);
        let pl_db = self.reference_loss_db + 10.0 * exponent * d.log10();
        10f64.powf(-pl_db / 10.0)
    }
}

fn uniform_in_disc(rng: &mut impl Rng, radius: f64) -> Position {
    let r = radius * rng.gen::<f64>().sqrt();
    let phi = rng.gen::<f64>() * std::f64::consts::TAU;
    (r * phi.cos(), r * phi.sin())
}

/// Builds a random instance. Deterministic for a fixed `cfg.rng_seed`:
/// positions first (SBS, SUT, PUT), then gains in fixed loop order, then the
/// round-robin primary map.
pub fn generate_instance(
    cfg: &NetworkConfig,
    ch: &ChannelModelParams,
) -> Result<NetworkInstance, Error> {
    cfg.validate().map_err(Error::InvalidConfig)?;
    ch.validate().map_err(Error::InvalidConfig)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let fading = Exp::new(1.0 / ch.rayleigh_scale).expect("validated scale");
    let (ll, gg, mm, nn) = (cfg.num_sbs, cfg.num_sut, cfg.num_put, cfg.num_subcarriers);

    let mbs_pos = (0.0, 0.0);
    let sbs_pos: Vec<Position> = (0..ll).map(|_| uniform_in_disc(&mut rng, cfg.mbs_radius)).collect();
    let sut_pos: Vec<Position> = (0..gg).map(|_| uniform_in_disc(&mut rng, cfg.mbs_radius)).collect();
    let put_pos: Vec<Position> = (0..mm).map(|_| uniform_in_disc(&mut rng, cfg.mbs_radius)).collect();

    let draw = |mean: f64, rng: &mut ChaCha8Rng| mean * fading.sample(rng);

    let mut gain_mbs_sut = vec![0.0; gg * nn];
    for g in 0..gg {
        let mean = ch.mean_gain(distance(mbs_pos, sut_pos[g]), ch.pathloss_exponent_mbs);
        for n in 0..nn {
            gain_mbs_sut[g * nn + n] = draw(mean, &mut rng);
        }
    }
    let mut gain_mbs_put = vec![0.0; mm * nn];
    for m in 0..mm {
        let mean = ch.mean_gain(distance(mbs_pos, put_pos[m]), ch.pathloss_exponent_mbs);
        for n in 0..nn {
            gain_mbs_put[m * nn + n] = draw(mean, &mut rng);
        }
    }
    let mut gain_sbs_sut = vec![0.0; ll * gg * nn];
    for l in 0..ll {
        for g in 0..gg {
            let mean = ch.mean_gain(distance(sbs_pos[l], sut_pos[g]), ch.pathloss_exponent_sbs);
            for n in 0..nn {
                gain_sbs_sut[(l * gg + g) * nn + n] = draw(mean, &mut rng);
            }
        }
    }
    let mut gain_sbs_put = vec![0.0; ll * mm * nn];
    for l in 0..ll {
        for m in 0..mm {
            let mean = ch.mean_gain(distance(sbs_pos[l], put_pos[m]), ch.pathloss_exponent_sbs);
            for n in 0..nn {
                gain_sbs_put[(l * mm + m) * nn + n] = draw(mean, &mut rng);
            }
        }
    }

    // Round-robin OFDMA map: subcarrier n goes to PUT n mod M.
    let mut primary_alloc = vec![0u8; mm * nn];
    for n in 0..nn {
        primary_alloc[(n % mm) * nn + n] = 1;
    }

    Ok(NetworkInstance {
        config: cfg.clone(),
        mbs_pos,
        sbs_pos,
        sut_pos,
        put_pos,
        gain_sbs_sut,
        gain_sbs_put,
        gain_mbs_sut,
        gain_mbs_put,
        primary_alloc,
    })
}

/// Sort key for one SUT inside a cluster: JT users first, JT users by
/// descending average serving distance, non-JT users by ascending own gain,
/// all ties by ascending index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct DecodeKey {
    pub jt: bool,
    pub avg_dist: f64,
    pub gain: f64,
    pub idx: usize,
}

pub(crate) fn decode_key(
    inst: &NetworkInstance,
    reference: &Schedule,
    l: usize,
    g: usize,
    n: usize,
) -> DecodeKey {
    let serving = reference.serving_sbs(g, n);
    let jt = serving.len() >= 2;
    let avg_dist = if serving.is_empty() {
        0.0
    } else {
        serving.iter().map(|&s| distance(inst.sbs_pos[s], inst.sut_pos[g])).sum::<f64>()
            / serving.len() as f64
    };
    DecodeKey { jt, avg_dist, gain: inst.h_sbs_sut(l, g, n), idx: g }
}

pub(crate) fn decode_before(a: &DecodeKey, b: &DecodeKey) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    match (a.jt, b.jt) {
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        (true, true) => b
            .avg_dist
            .partial_cmp(&a.avg_dist)
            .unwrap_or(Ordering::Equal)
            .then(a.idx.cmp(&b.idx)),
        (false, false) => a
            .gain
            .partial_cmp(&b.gain)
            .unwrap_or(Ordering::Equal)
            .then(a.idx.cmp(&b.idx)),
    }
}

/// Total SIC decoding order over `members` of cluster `(l, n)`:
/// decoded-first first. JT users precede non-JT users; among JT users the
/// larger average distance to the serving SBSs decodes first; among non-JT
/// users the weaker own gain decodes first.
pub fn decoding_order(
    inst: &NetworkInstance,
    sched: &Schedule,
    l: usize,
    n: usize,
    members: &[usize],
) -> Vec<usize> {
    assert!(!sched.relaxed, "decoding_order requires a binary schedule");
    let mut keys: Vec<DecodeKey> =
        members.iter().map(|&g| decode_key(inst, sched, l, g, n)).collect();
    keys.sort_by(decode_before);
    keys.into_iter().map(|k| k.idx).collect()
}

/// Positions of every SUT in the per-`(l, n)` decoding order, derived from a
/// reference schedule. `rank[l][n][g]` is the slot of SUT `g`; smaller ranks
/// decode earlier. Used to keep the order fixed while tensors are relaxed.
#[derive(Debug, Clone)]
pub struct OrderTable {
    pub num_sut: usize,
    pub num_subcarriers: usize,
    ranks: Vec<usize>,
}

impl OrderTable {
    pub fn from_schedule(inst: &NetworkInstance, reference: &Schedule) -> Self {
        let (ll, gg, _, nn) = inst.dims();
        let mut ranks = vec![0usize; ll * gg * nn];
        for l in 0..ll {
            for n in 0..nn {
                let order = decoding_order(inst, reference, l, n, &(0..gg).collect::<Vec<_>>());
                for (slot, &g) in order.iter().enumerate() {
                    ranks[(l * gg + g) * nn + n] = slot;
                }
            }
        }
        OrderTable { num_sut: gg, num_subcarriers: nn, ranks }
    }

    #[inline]
    pub fn rank(&self, l: usize, g: usize, n: usize) -> usize {
        self.ranks[(l * self.num_sut + g) * self.num_subcarriers + n]
    }
}

/// Serializes an instance to the documented JSON snapshot (lossless f64
/// round-trip).
pub fn export_instance(inst: &NetworkInstance) -> String {
    serde_json::to_string_pretty(inst).expect("instance serialization cannot fail")
}

pub fn import_instance(text: &str) -> Result<NetworkInstance, Error> {
    let inst: NetworkInstance = serde_json::from_str(text)?;
    let report = crate::model::validate_instance(&inst);
    if let Some(first) = report.first() {
        return Err(Error::InvalidConfig(format!("snapshot violates invariants: {first}")));
    }
    Ok(inst)
}
