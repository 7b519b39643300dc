//! Source-side traffic: variable-rate bit arrival, packetization, and the
//! optional constant-bit-rate shaper in front of the first hop.

use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{NodeId, Packet, Priority, ScenarioConfig, SimTime};

/// Scale applied to bit counts so `rate_bps * dt_us` needs no division.
const SCALE: u128 = 1_000_000;

/// One piecewise-constant segment of the variable input rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RateLevel {
    pub rate_bps: u64,
    pub dwell_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VbrMode {
    /// Levels are replayed in order, wrapping around.
    #[default]
    Cycle,
    /// Each dwell picks a level uniformly at random from the seeded stream.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum SourceSelection {
    /// The node with the greatest hop depth (lowest id on ties).
    #[default]
    Deepest,
    /// Every non-sink node.
    All,
    Ids(Vec<NodeId>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficConfig {
    pub source_ids: SourceSelection,
    /// Constant input rate used when `vbr_rate_levels` is empty.
    pub mean_bit_rate_bps: u64,
    pub vbr_rate_levels: Vec<RateLevel>,
    pub vbr_mode: VbrMode,
    pub cbr_out_interval_us: u64,
    pub packets_per_source: u64,
    pub high_priority_fraction: f64,
    pub lifetime_budget_us: u64,
    /// Space departures from the source at `cbr_out_interval_us`.
    pub shape_at_source: bool,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        TrafficConfig {
            source_ids: SourceSelection::Deepest,
            mean_bit_rate_bps: 81_920,
            // one 512-byte reading every 50 ms, alternating between a 25 ms and a 20 ms burst
            vbr_rate_levels: vec![
                RateLevel { rate_bps: 163_840, dwell_us: 25_000 },
                RateLevel { rate_bps: 0, dwell_us: 25_000 },
                RateLevel { rate_bps: 204_800, dwell_us: 20_000 },
                RateLevel { rate_bps: 0, dwell_us: 30_000 },
            ],
            vbr_mode: VbrMode::Cycle,
            cbr_out_interval_us: 50_000,
            packets_per_source: 50,
            high_priority_fraction: 0.1,
            lifetime_budget_us: 2_000_000,
            shape_at_source: false,
        }
    }
}

/// Accumulator between the bit source and the packet boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketizerState {
    packet_bits: u64,
    /// Accumulated bits scaled by 10^6.
    scaled_bits: u128,
    current_packet_created_at: Option<SimTime>,
    emitted_count: u64,
    now: SimTime,
}

/// Timestamps of one packet leaving the packetizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packetized {
    pub seq: u64,
    pub created_at: SimTime,
    pub packetized_at: SimTime,
}

impl Packetized {
    pub fn t_p(&self) -> u64 {
        self.packetized_at - self.created_at
    }
}

impl PacketizerState {
    pub fn new(packet_size_bytes: u32, start: SimTime) -> Self {
        PacketizerState {
            packet_bits: packet_size_bytes as u64 * 8,
            scaled_bits: 0,
            current_packet_created_at: None,
            emitted_count: 0,
            now: start,
        }
    }

    /// Whole bits waiting for the next packet boundary.
    pub fn bits_accumulated(&self) -> u64 {
        (self.scaled_bits / SCALE) as u64
    }

    pub fn scaled_bits(&self) -> u128 {
        self.scaled_bits
    }

    pub fn emitted_count(&self) -> u64 {
        self.emitted_count
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn current_packet_created_at(&self) -> Option<SimTime> {
        self.current_packet_created_at
    }

    fn threshold(&self) -> u128 {
        self.packet_bits as u128 * SCALE
    }

    fn emit(&mut self, at: SimTime, out: &mut Vec<Packetized>) {
        let created_at = self.current_packet_created_at.unwrap_or(at);
        out.push(Packetized { seq: self.emitted_count, created_at, packetized_at: at });
        self.emitted_count += 1;
        self.scaled_bits -= self.threshold();
    }
}

/// Feeds `rate_bps` for `dt_us` into the packetizer.
///
/// A packet is emitted at the first whole microsecond where the accumulator
/// holds a full packet; any surplus stays in the accumulator for the next one.
/// `created_at` is the instant the packet's first bits started arriving.
pub fn step_bits(mut state: PacketizerState, rate_bps: u64, dt_us: u64) -> (PacketizerState, Vec<Packetized>) {
    let mut out = Vec::new();
    let start = state.now;
    let end = start + dt_us;
    if rate_bps == 0 || dt_us == 0 {
        state.now = end;
        return (state, out);
    }
    let rate = rate_bps as u128;
    let threshold = state.threshold();
    let mut t = start;
    loop {
        if state.current_packet_created_at.is_none() {
            state.current_packet_created_at = Some(t);
        }
        let need = threshold.saturating_sub(state.scaled_bits);
        let fill = need.div_ceil(rate) as u64;
        if t.0 + fill > end.0 {
            state.scaled_bits += rate * (end.0 - t.0) as u128;
            break;
        }
        state.scaled_bits += rate * fill as u128;
        t = t + fill;
        state.emit(t, &mut out);
        state.current_packet_created_at = if state.scaled_bits > 0 || t < end { Some(t) } else { None };
        if t == end && state.scaled_bits < threshold {
            break;
        }
    }
    state.now = end;
    (state, out)
}

/// Delivers `bits` instantaneously at `now` (the infinite-rate limit).
pub fn push_bits(mut state: PacketizerState, bits: u64, now: SimTime) -> (PacketizerState, Vec<Packetized>) {
    let mut out = Vec::new();
    if now > state.now {
        state.now = now;
    }
    if bits == 0 {
        return (state, out);
    }
    if state.current_packet_created_at.is_none() {
        state.current_packet_created_at = Some(state.now);
    }
    state.scaled_bits += bits as u128 * SCALE;
    while state.scaled_bits >= state.threshold() {
        let at = state.now;
        state.emit(at, &mut out);
        state.current_packet_created_at = if state.scaled_bits > 0 { Some(at) } else { None };
    }
    (state, out)
}

/// Departure times of a CBR-shaped stream, index-aligned with `packetized_at`.
///
/// Departures are spaced by at least `interval_us` and never precede the
/// packet's own packetization time.
pub fn shape_cbr(packetized_at: &[SimTime], interval_us: u64) -> Vec<SimTime> {
    let mut out: Vec<SimTime> = Vec::with_capacity(packetized_at.len());
    for &ready in packetized_at {
        let slot = match out.last() {
            Some(prev) => *prev + interval_us,
            None => ready,
        };
        out.push(slot.max(ready));
    }
    out
}

/// Seeded Bernoulli(`fraction`) priority marking.
pub fn assign_priorities(packets: &mut [Packet], fraction: f64, seed: u64) {
    let fraction = fraction.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in packets.iter_mut() {
        p.priority = if rng.gen_bool(fraction) { Priority::High } else { Priority::Normal };
    }
}

/// Derives an independent seed for one (purpose, node) stream.
pub fn stream_seed(base: u64, tag: u64, node: NodeId) -> u64 {
    // splitmix64 finalizer over the combined inputs
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((node as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const SEED_TAG_VBR: u64 = 1;
pub const SEED_TAG_PRIORITY: u64 = 2;

/// Runs the packetizer for one source until it has produced
/// `packets_per_source` packets or the simulation horizon is reached.
pub fn packetize_flow(config: &ScenarioConfig, source: NodeId) -> Vec<Packetized> {
    let traffic = &config.traffic;
    let horizon = SimTime(config.sim_duration_us);
    let wanted = traffic.packets_per_source as usize;
    let mut state = PacketizerState::new(config.packet_size_bytes, SimTime::ZERO);
    let mut out = Vec::new();

    if traffic.vbr_rate_levels.is_empty() {
        let (_, emitted) = step_bits(state, traffic.mean_bit_rate_bps, config.sim_duration_us);
        out.extend(emitted.into_iter().filter(|p| p.packetized_at <= horizon).take(wanted));
        return out;
    }

    let levels = &traffic.vbr_rate_levels;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.rng_seed, SEED_TAG_VBR, source));
    let mut idx = 0usize;
    while out.len() < wanted && state.now() < horizon {
        let level = match traffic.vbr_mode {
            VbrMode::Cycle => {
                let l = levels[idx % levels.len()];
                idx += 1;
                l
            }
            VbrMode::Sample => levels[rng.gen_range(0..levels.len())],
        };
        let (next, emitted) = step_bits(state, level.rate_bps, level.dwell_us);
        state = next;
        out.extend(emitted.into_iter().filter(|p| p.packetized_at <= horizon));
    }
    out.truncate(wanted);
    out
}

/// Builds the packets of one flow: packetization, priorities, deadlines.
pub fn generate_flow(config: &ScenarioConfig, source: NodeId, dest: NodeId, first_uid: u64) -> Vec<Packet> {
    let traffic = &config.traffic;
    let mut packets: Vec<Packet> = packetize_flow(config, source)
        .into_iter()
        .enumerate()
        .map(|(i, p)| Packet {
            uid: first_uid + i as u64,
            seq: p.seq,
            source_id: source,
            dest_id: dest,
            size_bytes: config.packet_size_bytes,
            priority: Priority::Normal,
            lifetime_deadline: p.created_at + traffic.lifetime_budget_us,
            created_at: p.created_at,
            packetized_at: p.packetized_at,
            hops: Vec::new(),
            delivered_at: None,
        })
        .collect();
    assign_priorities(
        &mut packets,
        traffic.high_priority_fraction,
        stream_seed(config.rng_seed, SEED_TAG_PRIORITY, source),
    );
    packets
}

/// Levels for one reading per period whose bits take exactly `t_p_us` to arrive.
///
/// The burst is split so the total is exactly one packet even when the bit
/// count does not divide evenly by the burst length.
pub fn reading_levels(packet_size_bytes: u32, t_p_us: u64, period_us: u64) -> Vec<RateLevel> {
    assert!(t_p_us >= 1 && t_p_us <= period_us, "burst must fit in its period");
    let scaled = packet_size_bytes as u64 * 8 * 1_000_000;
    let mut levels = Vec::with_capacity(3);
    if scaled.is_multiple_of(t_p_us) {
        levels.push(RateLevel { rate_bps: scaled / t_p_us, dwell_us: t_p_us });
    } else {
        let base = scaled / t_p_us;
        if t_p_us > 1 {
            levels.push(RateLevel { rate_bps: base, dwell_us: t_p_us - 1 });
        }
        levels.push(RateLevel { rate_bps: scaled - base * (t_p_us - 1), dwell_us: 1 });
    }
    if period_us > t_p_us {
        levels.push(RateLevel { rate_bps: 0, dwell_us: period_us - t_p_us });
    }
    levels
}

/// Writes the per-source packet ledger as CSV.
pub fn write_ledger<W: io::Write>(packets: &[Packet], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["packet_id", "source_id", "seq", "created_at", "packetized_at", "Tp_us", "priority", "deadline"])?;
    for p in packets {
        w.write_record([
            p.uid.to_string(),
            p.source_id.to_string(),
            p.seq.to_string(),
            p.created_at.to_string(),
            p.packetized_at.to_string(),
            p.t_p().to_string(),
            p.priority.code().to_string(),
            p.lifetime_deadline.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn instant_bits_have_zero_packetization_delay() {
        let s = PacketizerState::new(512, SimTime(70));
        let (s, out) = push_bits(s, 4096, SimTime(70));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].t_p(), 0);
        assert_eq!(s.bits_accumulated(), 0);
    }

    #[test]
    fn steady_rate_gives_closed_form_delay() {
        // 4096 bits at 4.096 bits/µs
        let s = PacketizerState::new(512, SimTime::ZERO);
        let (_, out) = step_bits(s, 4_096_000, 5_000);
        assert_eq!(out.len(), 5);
        for (i, p) in out.iter().enumerate() {
            assert_eq!(p.t_p(), 1_000);
            assert_eq!(p.created_at, SimTime(1_000 * i as u64));
        }
    }

    #[test]
    fn idle_source_only_advances_time() {
        let s = PacketizerState::new(512, SimTime(10));
        let (s2, out) = step_bits(s.clone(), 0, 900);
        assert!(out.is_empty());
        assert_eq!(s2.now(), SimTime(910));
        assert_eq!(s2.scaled_bits(), s.scaled_bits());
        assert_eq!(s2.current_packet_created_at(), None);
    }

    #[test]
    fn packet_spanning_an_idle_gap_keeps_its_first_bit_time() {
        let s = PacketizerState::new(512, SimTime::ZERO);
        let (s, a) = step_bits(s, 1_000_000, 2_000); // 2000 bits
        assert!(a.is_empty());
        let (s, b) = step_bits(s, 0, 500);
        assert!(b.is_empty());
        let (_, c) = step_bits(s, 1_000_000, 2_096);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].created_at, SimTime(0));
        assert_eq!(c[0].packetized_at, SimTime(4_596));
    }

    #[test]
    fn shaping_dominates_when_packets_are_ready() {
        let d = shape_cbr(&[SimTime(0), SimTime(10), SimTime(20)], 100);
        assert_eq!(d, vec![SimTime(0), SimTime(100), SimTime(200)]);
    }

    #[test]
    fn shaping_waits_for_readiness() {
        let d = shape_cbr(&[SimTime(0), SimTime(500)], 100);
        assert_eq!(d, vec![SimTime(0), SimTime(500)]);
    }

    #[test]
    fn single_packet_departs_when_ready() {
        assert_eq!(shape_cbr(&[SimTime(42)], 100), vec![SimTime(42)]);
    }

    fn blank_packets(n: usize) -> Vec<Packet> {
        (0..n)
            .map(|i| Packet {
                uid: i as u64,
                seq: i as u64,
                source_id: 1,
                dest_id: 0,
                size_bytes: 512,
                priority: Priority::Normal,
                lifetime_deadline: SimTime(1),
                created_at: SimTime(0),
                packetized_at: SimTime(0),
                hops: vec![],
                delivered_at: None,
            })
            .collect()
    }

    #[test]
    fn priority_fraction_extremes() {
        let mut p = blank_packets(500);
        assign_priorities(&mut p, 0.0, 7);
        assert!(p.iter().all(|p| p.priority == Priority::Normal));
        assign_priorities(&mut p, 1.0, 7);
        assert!(p.iter().all(|p| p.priority == Priority::High));
    }

    #[test]
    fn priority_fraction_half_is_binomial() {
        let mut p = blank_packets(10_000);
        assign_priorities(&mut p, 0.5, 1234);
        let high = p.iter().filter(|p| p.priority.is_high()).count() as i64;
        // sigma = sqrt(10000 * 0.25) = 50
        assert!((high - 5_000).abs() <= 150, "high count {high}");
        let mut again = blank_packets(10_000);
        assign_priorities(&mut again, 0.5, 1234);
        assert_eq!(p, again);
    }

    #[test]
    fn reading_levels_are_exact() {
        for t_p in [1u64, 800, 1_799, 12_345, 30_000, 45_625] {
            let levels = reading_levels(512, t_p, 50_000);
            let s = PacketizerState::new(512, SimTime::ZERO);
            let mut s = s;
            let mut out = Vec::new();
            for l in &levels {
                let (n, e) = step_bits(s, l.rate_bps, l.dwell_us);
                s = n;
                out.extend(e);
            }
            assert_eq!(out.len(), 1, "t_p {t_p}");
            assert_eq!(out[0].t_p(), t_p);
            assert_eq!(s.scaled_bits(), 0);
            assert_eq!(s.now(), SimTime(50_000));
        }
    }

    #[test]
    fn flow_stops_at_packet_budget() {
        let cfg = ScenarioConfig::default();
        let flow = packetize_flow(&cfg, 3);
        assert_eq!(flow.len() as u64, cfg.traffic.packets_per_source);
        // alternating 25 ms / 20 ms bursts, one per 50 ms period
        assert_eq!(flow[0].created_at, SimTime(0));
        assert_eq!(flow[0].t_p(), 25_000);
        assert_eq!(flow[1].created_at, SimTime(50_000));
        assert_eq!(flow[1].t_p(), 20_000);
    }

    #[test]
    fn flow_respects_horizon() {
        let cfg = ScenarioConfig { sim_duration_us: 120_000, ..Default::default() };
        let flow = packetize_flow(&cfg, 3);
        // third packet would complete at 125 ms
        assert_eq!(flow.len(), 2);
        assert!(flow.iter().all(|p| p.packetized_at.0 <= 120_000));
    }

    proptest! {
        #[test]
        fn bits_are_conserved(steps in proptest::collection::vec((0u64..20_000_000, 1u64..5_000), 1..40)) {
            let bits = 4096u128;
            let mut s = PacketizerState::new(512, SimTime::ZERO);
            let mut fed: u128 = 0;
            let mut emitted = 0u128;
            for (rate, dt) in steps {
                fed += rate as u128 * dt as u128;
                let (n, out) = step_bits(s, rate, dt);
                s = n;
                emitted += out.len() as u128;
                for p in &out {
                    prop_assert!(p.created_at <= p.packetized_at);
                }
            }
            prop_assert_eq!(fed - s.scaled_bits(), emitted * bits * SCALE);
            prop_assert!(s.scaled_bits() < bits * SCALE);
        }

        #[test]
        fn faster_rate_never_packetizes_slower(rate in 1_000u64..10_000_000, extra in 0u64..10_000_000) {
            let (_, a) = step_bits(PacketizerState::new(512, SimTime::ZERO), rate, 100_000_000);
            let (_, b) = step_bits(PacketizerState::new(512, SimTime::ZERO), rate + extra, 100_000_000);
            prop_assert!(a[0].t_p() > 0);
            prop_assert!(b[0].t_p() <= a[0].t_p());
        }

        #[test]
        fn shaped_departures_increase_and_respect_readiness(
            mut ready in proptest::collection::vec(0u64..1_000_000, 1..50),
            interval in 1u64..10_000,
        ) {
            ready.sort_unstable();
            let ready: Vec<SimTime> = ready.into_iter().map(SimTime).collect();
            let dep = shape_cbr(&ready, interval);
            for (i, d) in dep.iter().enumerate() {
                prop_assert!(*d >= ready[i]);
                if i > 0 {
                    prop_assert!(*d >= dep[i - 1] + interval);
                }
            }
        }
    }
}
