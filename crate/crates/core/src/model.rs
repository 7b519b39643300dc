//! Core domain types shared by every other module.
//!
//! Time is carried as integer microseconds end to end. Millisecond values only
//! appear when reports are rendered.

use std::fmt;
use std::ops::{Add, Sub};

use crate::topology::{BufferMode, BufferPolicy, BufferSelection, Placement};
use crate::traffic::{SourceSelection, TrafficConfig};

pub type NodeId = u32;

/// Simulation time in integer microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;
    fn add(self, us: u64) -> SimTime {
        SimTime(self.0 + us)
    }
}

impl Sub for SimTime {
    type Output = u64;
    fn sub(self, other: SimTime) -> u64 {
        self.0 - other.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Packet priority. `High` outranks `Normal` in every comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Priority {
    #[default]
    Normal,
    High,
}

impl Priority {
    pub fn is_high(self) -> bool {
        self == Priority::High
    }

    pub fn code(self) -> char {
        match self {
            Priority::High => 'H',
            Priority::Normal => 'N',
        }
    }
}

/// One visit of a packet at a node on its way to the sink.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hop {
    pub node: NodeId,
    pub arrived_at: SimTime,
    pub departed_at: Option<SimTime>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    /// Run-wide identifier, assigned in generation order.
    pub uid: u64,
    /// Sequence number within the source's flow, starting at 0.
    pub seq: u64,
    pub source_id: NodeId,
    pub dest_id: NodeId,
    pub size_bytes: u32,
    pub priority: Priority,
    pub lifetime_deadline: SimTime,
    pub created_at: SimTime,
    pub packetized_at: SimTime,
    pub hops: Vec<Hop>,
    pub delivered_at: Option<SimTime>,
}

impl Packet {
    /// Packetization delay.
    pub fn t_p(&self) -> u64 {
        self.packetized_at - self.created_at
    }

    /// Remaining lifetime at `now`; zero or negative means expired.
    pub fn remaining_lifetime(&self, now: SimTime) -> i64 {
        self.lifetime_deadline.0 as i64 - now.0 as i64
    }

    pub fn is_expired(&self, now: SimTime) -> bool {
        now >= self.lifetime_deadline
    }

    pub fn size_bits(&self) -> u64 {
        self.size_bytes as u64 * 8
    }

    /// Checks `created_at <= packetized_at <= hop timestamps <= delivered_at`.
    pub fn timestamps_monotone(&self) -> bool {
        let mut last = self.created_at;
        if self.packetized_at < last {
            return false;
        }
        last = self.packetized_at;
        for hop in &self.hops {
            if hop.arrived_at < last {
                return false;
            }
            last = hop.arrived_at;
            if let Some(d) = hop.departed_at {
                if d < last {
                    return false;
                }
                last = d;
            }
        }
        match self.delivered_at {
            Some(d) => d >= last,
            None => true,
        }
    }
}

/// Full description of one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub area_m2: f64,
    pub node_count: u32,
    pub comm_range_m: f64,
    pub packet_size_bytes: u32,
    pub node_energy_j: f64,
    pub traffic: TrafficConfig,
    pub buffer_policy: BufferPolicy,
    pub link_rate_bps: u64,
    pub per_hop_latency_us: u64,
    pub sink_playout_delay_us: u64,
    pub energy_tx_j_per_bit: f64,
    pub energy_rx_j_per_bit: f64,
    pub placement: Placement,
    pub rng_seed: u64,
    pub sim_duration_us: u64,
}

impl Default for ScenarioConfig {
    /// Table-1 deployment: 2.5 km², 100 nodes, 50 m range, 512-byte CBR packets, 100 J.
    fn default() -> Self {
        ScenarioConfig {
            area_m2: 2_500_000.0,
            node_count: 100,
            comm_range_m: 50.0,
            packet_size_bytes: 512,
            node_energy_j: 100.0,
            traffic: TrafficConfig::default(),
            buffer_policy: BufferPolicy::default(),
            link_rate_bps: 250_000,
            per_hop_latency_us: 1_000,
            sink_playout_delay_us: 0,
            energy_tx_j_per_bit: 0.0,
            energy_rx_j_per_bit: 0.0,
            placement: Placement::Incremental,
            rng_seed: 42,
            sim_duration_us: 5_000_000,
        }
    }
}

impl ScenarioConfig {
    pub fn packet_bits(&self) -> u64 {
        self.packet_size_bytes as u64 * 8
    }

    /// Side length of the square deployment area.
    pub fn side_m(&self) -> f64 {
        self.area_m2.sqrt()
    }

    /// Serialization time of one packet on a link, rounded up to whole µs.
    pub fn tx_time_us(&self) -> u64 {
        (self.packet_bits() * 1_000_000).div_ceil(self.link_rate_bps.max(1))
    }
}

/// One violated invariant reported by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

fn positive_f64(out: &mut Vec<Violation>, field: &'static str, v: f64) {
    if !(v.is_finite() && v > 0.0) {
        out.push(Violation { field, reason: format!("must be a positive finite number, got {v}") });
    }
}

fn positive_u64(out: &mut Vec<Violation>, field: &'static str, v: u64) {
    if v == 0 {
        out.push(Violation { field, reason: "must be greater than zero".into() });
    }
}

fn non_negative_f64(out: &mut Vec<Violation>, field: &'static str, v: f64) {
    if !(v.is_finite() && v >= 0.0) {
        out.push(Violation { field, reason: format!("must be a non-negative finite number, got {v}") });
    }
}

/// Returns every violated invariant; an empty list means the config is usable.
pub fn validate(config: &ScenarioConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    positive_f64(&mut out, "area_m2", config.area_m2);
    if config.node_count < 2 {
        out.push(Violation {
            field: "node_count",
            reason: format!("need at least a sink and one source, got {}", config.node_count),
        });
    }
    positive_f64(&mut out, "comm_range_m", config.comm_range_m);
    positive_u64(&mut out, "packet_size_bytes", config.packet_size_bytes as u64);
    positive_f64(&mut out, "node_energy_j", config.node_energy_j);
    positive_u64(&mut out, "link_rate_bps", config.link_rate_bps);
    positive_u64(&mut out, "sim_duration_us", config.sim_duration_us);
    non_negative_f64(&mut out, "energy_tx_j_per_bit", config.energy_tx_j_per_bit);
    non_negative_f64(&mut out, "energy_rx_j_per_bit", config.energy_rx_j_per_bit);

    let t = &config.traffic;
    positive_u64(&mut out, "traffic.mean_bit_rate_bps", t.mean_bit_rate_bps);
    positive_u64(&mut out, "traffic.cbr_out_interval_us", t.cbr_out_interval_us);
    positive_u64(&mut out, "traffic.packets_per_source", t.packets_per_source);
    positive_u64(&mut out, "traffic.lifetime_budget_us", t.lifetime_budget_us);
    if !(0.0..=1.0).contains(&t.high_priority_fraction) {
        out.push(Violation {
            field: "traffic.high_priority_fraction",
            reason: format!("must lie in [0, 1], got {}", t.high_priority_fraction),
        });
    }
    if t.vbr_rate_levels.iter().any(|l| l.dwell_us == 0) {
        out.push(Violation { field: "traffic.vbr_rate_levels", reason: "every dwell must be > 0 µs".into() });
    } else if !t.vbr_rate_levels.is_empty() && t.vbr_rate_levels.iter().all(|l| l.rate_bps == 0) {
        out.push(Violation {
            field: "traffic.vbr_rate_levels",
            reason: "at least one level needs a non-zero rate".into(),
        });
    }
    if let SourceSelection::Ids(ids) = &t.source_ids {
        if ids.is_empty() {
            out.push(Violation { field: "traffic.source_ids", reason: "explicit source list is empty".into() });
        }
        for id in ids {
            if *id == 0 || *id >= config.node_count {
                out.push(Violation {
                    field: "traffic.source_ids",
                    reason: format!("node {id} is not a non-sink node of a {}-node network", config.node_count),
                });
            }
        }
    }

    let p = &config.buffer_policy;
    if p.proportionality_k == 0 {
        out.push(Violation { field: "buffer_policy.proportionality_k", reason: "must be at least 1".into() });
    }
    if let BufferSelection::ExplicitList(ids) = &p.selection {
        if p.mode == BufferMode::Eq1 && ids.is_empty() {
            out.push(Violation { field: "buffer_policy.selection", reason: "explicit list is empty".into() });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_defaults_are_valid() {
        assert!(validate(&ScenarioConfig::default()).is_empty());
    }

    #[test]
    fn zero_node_count_names_the_field_once() {
        let cfg = ScenarioConfig { node_count: 0, ..Default::default() };
        let v = validate(&cfg);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "node_count");
    }

    #[test]
    fn each_bad_field_is_reported_independently() {
        let cfg = ScenarioConfig { packet_size_bytes: 0, comm_range_m: -1.0, ..Default::default() };
        let fields: Vec<_> = validate(&cfg).into_iter().map(|v| v.field).collect();
        assert_eq!(fields, vec!["comm_range_m", "packet_size_bytes"]);
    }

    #[test]
    fn validate_does_not_mutate() {
        let cfg = ScenarioConfig { node_count: 1, ..Default::default() };
        let before = cfg.clone();
        let _ = validate(&cfg);
        assert_eq!(cfg, before);
    }

    #[test]
    fn tx_time_rounds_up() {
        let cfg = ScenarioConfig { link_rate_bps: 250_000, ..Default::default() };
        assert_eq!(cfg.tx_time_us(), 16_384);
        let cfg = ScenarioConfig { link_rate_bps: 3_000_000, ..Default::default() };
        // 4096 bits / 3 bits per µs = 1365.33 µs
        assert_eq!(cfg.tx_time_us(), 1_366);
    }

    #[test]
    fn expired_means_deadline_reached() {
        let p = Packet {
            uid: 0,
            seq: 0,
            source_id: 1,
            dest_id: 0,
            size_bytes: 512,
            priority: Priority::High,
            lifetime_deadline: SimTime(100),
            created_at: SimTime(0),
            packetized_at: SimTime(10),
            hops: vec![],
            delivered_at: None,
        };
        assert!(!p.is_expired(SimTime(99)));
        assert!(p.is_expired(SimTime(100)));
        assert_eq!(p.remaining_lifetime(SimTime(130)), -30);
    }
}
