#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wsn_dejitter::engine::RunTrace;
use wsn_dejitter::model::ScenarioConfig;
use wsn_dejitter::topology::{BufferMode, BufferSelection, Placement, Topology};
use wsn_dejitter::traffic::{RateLevel, SourceSelection, VbrMode};

/// Sink 0, relay 1, source 2 on a line, 40 m apart.
pub fn chain3() -> (ScenarioConfig, Topology) {
    let mut cfg = ScenarioConfig {
        area_m2: 10_000.0,
        node_count: 3,
        comm_range_m: 50.0,
        link_rate_bps: 4_096_000,
        per_hop_latency_us: 100,
        sink_playout_delay_us: 0,
        sim_duration_us: 100_000,
        ..Default::default()
    };
    let t = &mut cfg.traffic;
    t.source_ids = SourceSelection::Ids(vec![2]);
    t.cbr_out_interval_us = 10_000;
    t.packets_per_source = 2;
    t.high_priority_fraction = 0.0;
    t.lifetime_budget_us = 1_000_000;
    t.vbr_mode = VbrMode::Cycle;
    t.vbr_rate_levels = vec![
        RateLevel { rate_bps: 4_096_000, dwell_us: 1_000 },
        RateLevel { rate_bps: 0, dwell_us: 9_000 },
        RateLevel { rate_bps: 5_120_000, dwell_us: 800 },
        RateLevel { rate_bps: 0, dwell_us: 9_200 },
    ];
    let topo = Topology::from_positions(&[(0.0, 0.0), (40.0, 0.0), (80.0, 0.0)], 50.0, cfg.node_energy_j);
    (cfg, topo)
}

/// A small random scenario; some have tight lifetimes, high priority traffic,
/// overloaded buffers or nodes that run out of energy.
pub fn random_scenario(seed: u64) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let node_count = rng.gen_range(4..40u32);
    let mut cfg = ScenarioConfig {
        area_m2: rng.gen_range(5_000.0..60_000.0),
        node_count,
        comm_range_m: 50.0,
        packet_size_bytes: rng.gen_range(16..600),
        link_rate_bps: rng.gen_range(50_000..2_000_000),
        per_hop_latency_us: rng.gen_range(0..2_000),
        sink_playout_delay_us: if rng.gen_bool(0.3) { rng.gen_range(1..50_000) } else { 0 },
        placement: Placement::Incremental,
        rng_seed: rng.gen(),
        sim_duration_us: rng.gen_range(200_000..2_000_000),
        ..Default::default()
    };
    if rng.gen_bool(0.3) {
        cfg.node_energy_j = rng.gen_range(0.001..0.05);
        cfg.energy_tx_j_per_bit = 1e-6;
        cfg.energy_rx_j_per_bit = 5e-7;
    }
    let t = &mut cfg.traffic;
    t.source_ids = match rng.gen_range(0..3) {
        0 => SourceSelection::Deepest,
        1 => SourceSelection::All,
        _ => SourceSelection::Ids(vec![rng.gen_range(1..node_count)]),
    };
    t.mean_bit_rate_bps = rng.gen_range(1_000..400_000);
    t.vbr_rate_levels = (0..rng.gen_range(0..5))
        .map(|_| RateLevel { rate_bps: rng.gen_range(0..500_000), dwell_us: rng.gen_range(1..40_000) })
        .collect();
    if !t.vbr_rate_levels.is_empty() && t.vbr_rate_levels.iter().all(|l| l.rate_bps == 0) {
        t.vbr_rate_levels[0].rate_bps = 100_000;
    }
    t.vbr_mode = if rng.gen_bool(0.5) { VbrMode::Cycle } else { VbrMode::Sample };
    t.cbr_out_interval_us = rng.gen_range(1_000..60_000);
    t.packets_per_source = rng.gen_range(1..60);
    t.high_priority_fraction = rng.gen_range(0.0..1.0);
    t.lifetime_budget_us = rng.gen_range(1_000..500_000);
    t.shape_at_source = rng.gen_bool(0.3);
    let b = &mut cfg.buffer_policy;
    b.mode = if rng.gen_bool(0.8) { BufferMode::Eq1 } else { BufferMode::None };
    b.proportionality_k = rng.gen_range(1..4);
    if rng.gen_bool(0.2) {
        b.selection = BufferSelection::ExplicitList(vec![rng.gen_range(1..node_count)]);
    }
    cfg
}

/// One parsed trace line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Line {
    pub time: u64,
    pub kind: String,
    pub node: u32,
    pub packet: Option<u64>,
    pub detail: String,
}

pub fn parse_trace(text: &str) -> Vec<Line> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let mut it = l.splitn(5, ' ');
            let time = it.next().unwrap().parse().unwrap();
            let kind = it.next().unwrap().to_string();
            let node = it.next().unwrap().parse().unwrap();
            let packet = match it.next().unwrap() {
                "-" => None,
                p => Some(p.parse().unwrap()),
            };
            let detail = it.next().unwrap_or("-").to_string();
            Line { time, kind, node, packet, detail }
        })
        .collect()
}

fn field(detail: &str, name: &str) -> u64 {
    detail
        .split(' ')
        .find_map(|kv| kv.strip_prefix(name).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {name} in {detail}"))
        .parse()
        .unwrap()
}

/// Metrics recomputed from the text trace alone.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteMetrics {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub throughput_bps: f64,
    pub pdf_hundredths: Option<u64>,
    pub mad_us: Option<f64>,
    pub delays: Vec<u64>,
}

pub fn brute_metrics(trace: &RunTrace) -> BruteMetrics {
    let lines = parse_trace(&trace.to_text());
    let mut created = std::collections::HashMap::new();
    let mut delays = Vec::new();
    let (mut sent, mut delivered, mut dropped) = (0u64, 0u64, 0u64);
    for l in &lines {
        match l.kind.as_str() {
            "GEN" => {
                sent += 1;
                created.insert(l.packet.unwrap(), field(&l.detail, "created"));
            }
            "PLAY" => {
                delivered += 1;
                let d = l.time - created[&l.packet.unwrap()];
                assert_eq!(d, field(&l.detail, "delay"));
                delays.push(d);
            }
            "EVT" | "REJ" | "DROP" => dropped += 1,
            _ => {}
        }
    }
    let bytes = delivered * trace.config.packet_size_bytes as u64;
    let throughput_bps = bytes as f64 * 1e6 / trace.config.sim_duration_us as f64;
    // percentage in hundredths, half up: floor(10000*d/s + 1/2)
    let pdf_hundredths = (sent > 0).then(|| (2 * 10_000 * delivered + sent) / (2 * sent));
    let mad_us = (!delays.is_empty()).then(|| {
        // sum |N d - S| split at the mean: N (sum_hi - sum_lo) - S (n_hi - n_lo)
        let n = delays.len() as i128;
        let s: i128 = delays.iter().map(|&d| d as i128).sum();
        let (mut sum_hi, mut sum_lo, mut n_hi, mut n_lo) = (0i128, 0i128, 0i128, 0i128);
        for &d in &delays {
            if n * d as i128 >= s {
                sum_hi += d as i128;
                n_hi += 1;
            } else {
                sum_lo += d as i128;
                n_lo += 1;
            }
        }
        let num = n * (sum_hi - sum_lo) - s * (n_hi - n_lo);
        num as f64 / (n * n) as f64
    });
    BruteMetrics { sent, delivered, dropped, throughput_bps, pdf_hundredths, mad_us, delays }
}
