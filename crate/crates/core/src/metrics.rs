//! QoS metrics and per-packet delay decomposition computed from a [`RunTrace`].
//!
//! Delays are integers (µs). Mean and jitter keep the sums as integers and
//! divide once, so two independent computations over the same delays agree
//! bit for bit.

use std::fmt;
use std::io;

use thiserror::Error;

use crate::engine::{drain_summary, RunTrace};
use crate::model::{NodeId, Packet, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("total time is zero")]
    ZeroDuration,
    #[error("no packets were delivered")]
    NoDeliveries,
    #[error("no packets were sent")]
    NoPacketsSent,
    #[error("packet {0} was not delivered")]
    PacketNotDelivered(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThroughputWindow {
    /// Divide by the configured simulation duration.
    #[default]
    Total,
    /// Divide by the time of the last delivery.
    LastDelivery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Throughput {
    pub delivered_bytes: u64,
    pub total_time_us: u64,
}

impl Throughput {
    pub fn bytes_per_second(&self) -> f64 {
        if self.total_time_us == 0 {
            return 0.0;
        }
        self.delivered_bytes as f64 * 1e6 / self.total_time_us as f64
    }
}

pub fn throughput(trace: &RunTrace, window: ThroughputWindow) -> Result<Throughput, MetricsError> {
    let delivered_bytes: u64 = trace.delivered().map(|p| p.size_bytes as u64).sum();
    let total_time_us = match window {
        ThroughputWindow::Total => trace.end_time.as_micros(),
        ThroughputWindow::LastDelivery => match trace.delivered().filter_map(|p| p.delivered_at).max() {
            Some(t) => t.as_micros(),
            None => return Ok(Throughput { delivered_bytes: 0, total_time_us: 0 }),
        },
    };
    if total_time_us == 0 {
        return Err(MetricsError::ZeroDuration);
    }
    Ok(Throughput { delivered_bytes, total_time_us })
}

/// Delivered packets in playout order.
fn delivered_in_order(trace: &RunTrace) -> Vec<&Packet> {
    let mut v: Vec<&Packet> = trace.delivered().collect();
    v.sort_by_key(|p| (p.delivered_at, p.uid));
    v
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketDelay {
    pub uid: u64,
    pub source_id: NodeId,
    pub seq: u64,
    pub created_at: SimTime,
    pub delivered_at: SimTime,
    pub delay_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelayStats {
    pub per_packet: Vec<PacketDelay>,
}

impl DelayStats {
    pub fn delays(&self) -> Vec<u64> {
        self.per_packet.iter().map(|d| d.delay_us).collect()
    }

    pub fn mean_us(&self) -> Result<f64, MetricsError> {
        mean_us(&self.delays())
    }
}

/// Per-packet delay from first bit at the source to playout at the sink.
pub fn end_to_end_delay(trace: &RunTrace) -> DelayStats {
    let per_packet = delivered_in_order(trace)
        .into_iter()
        .map(|p| {
            let delivered_at = p.delivered_at.expect("filtered to delivered");
            PacketDelay {
                uid: p.uid,
                source_id: p.source_id,
                seq: p.seq,
                created_at: p.created_at,
                delivered_at,
                delay_us: delivered_at - p.created_at,
            }
        })
        .collect();
    DelayStats { per_packet }
}

pub fn mean_us(delays: &[u64]) -> Result<f64, MetricsError> {
    if delays.is_empty() {
        return Err(MetricsError::NoDeliveries);
    }
    let sum: u128 = delays.iter().map(|&d| d as u128).sum();
    Ok(sum as f64 / delays.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    /// Mean absolute deviation of delay about the mean delay.
    pub mad_us: f64,
    /// Population standard deviation of delay.
    pub stddev_us: f64,
    /// Mean |(R_i - R_{i-1}) - (S_i - S_{i-1})| over consecutive deliveries.
    pub interarrival_us: f64,
}

/// `(1/N) * sum |d_i - mean|`, evaluated as `sum |N*d_i - S| / N^2`.
pub fn mad_us(delays: &[u64]) -> Result<f64, MetricsError> {
    if delays.is_empty() {
        return Err(MetricsError::NoDeliveries);
    }
    let n = delays.len() as i128;
    let sum: i128 = delays.iter().map(|&d| d as i128).sum();
    let num: i128 = delays.iter().map(|&d| (n * d as i128 - sum).abs()).sum();
    Ok(num as f64 / (n * n) as f64)
}

pub fn stddev_us(delays: &[u64]) -> Result<f64, MetricsError> {
    if delays.is_empty() {
        return Err(MetricsError::NoDeliveries);
    }
    let n = delays.len() as i128;
    let sum: i128 = delays.iter().map(|&d| d as i128).sum();
    let num: u128 = delays.iter().map(|&d| (n * d as i128 - sum).unsigned_abs().pow(2)).sum();
    Ok((num as f64 / (n * n * n) as f64).sqrt())
}

/// Inter-arrival variation over `(sent, received)` pairs in arrival order.
pub fn interarrival_us(pairs: &[(SimTime, SimTime)]) -> f64 {
    if pairs.len() < 2 {
        return 0.0;
    }
    let total: u128 = pairs
        .windows(2)
        .map(|w| {
            let recv = w[1].1 .0 as i128 - w[0].1 .0 as i128;
            let sent = w[1].0 .0 as i128 - w[0].0 .0 as i128;
            (recv - sent).unsigned_abs()
        })
        .sum();
    total as f64 / (pairs.len() - 1) as f64
}

pub fn jitter(trace: &RunTrace) -> Result<Jitter, MetricsError> {
    let stats = end_to_end_delay(trace);
    let delays = stats.delays();
    let pairs: Vec<(SimTime, SimTime)> = stats.per_packet.iter().map(|d| (d.created_at, d.delivered_at)).collect();
    Ok(Jitter { mad_us: mad_us(&delays)?, stddev_us: stddev_us(&delays)?, interarrival_us: interarrival_us(&pairs) })
}

/// Delivered over sent, as a percentage with two decimals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeliveryFraction {
    pub delivered: u64,
    pub sent: u64,
}

impl DeliveryFraction {
    /// Percentage in hundredths, rounded half up.
    pub fn hundredths(&self) -> u64 {
        (self.delivered * 20_000 + self.sent) / (2 * self.sent)
    }

    pub fn percent(&self) -> f64 {
        self.hundredths() as f64 / 100.0
    }
}

impl fmt::Display for DeliveryFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = self.hundredths();
        write!(f, "{}.{:02}", h / 100, h % 100)
    }
}

pub fn packet_delivery_fraction(trace: &RunTrace) -> Result<DeliveryFraction, MetricsError> {
    let s = drain_summary(trace);
    if s.sent == 0 {
        return Err(MetricsError::NoPacketsSent);
    }
    Ok(DeliveryFraction { delivered: s.delivered, sent: s.sent })
}

/// `T_t = T_p + T_N + T_B` for one delivered packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decomposition {
    pub uid: u64,
    pub t_p: u64,
    pub t_n: u64,
    pub t_b: u64,
    pub t_t: u64,
    /// Time spent waiting at the source shaper and in relay buffers (part of `t_n`).
    pub held_us: u64,
    /// Time spent on links (part of `t_n`).
    pub transit_us: u64,
}

/// Splits a delivered packet's delay. Relay buffer holds count toward `T_N`;
/// `T_B` is the sink playout hold only.
pub fn decompose_delay(trace: &RunTrace, uid: u64) -> Result<Decomposition, MetricsError> {
    let p = trace.packets.get(uid as usize).ok_or(MetricsError::PacketNotDelivered(uid))?;
    decompose_packet(p)
}

pub fn decompose_packet(p: &Packet) -> Result<Decomposition, MetricsError> {
    let delivered = p.delivered_at.ok_or(MetricsError::PacketNotDelivered(p.uid))?;
    let sink = p.hops.last().ok_or(MetricsError::PacketNotDelivered(p.uid))?;
    let sink_departed = sink.departed_at.ok_or(MetricsError::PacketNotDelivered(p.uid))?;
    let t_t = delivered - p.created_at;
    let t_p = p.packetized_at - p.created_at;
    let t_b = sink_departed - sink.arrived_at;
    let t_n = t_t - t_p - t_b;

    // independent route: waits at each forwarding node plus time on each link
    let mut held_us = 0;
    let mut transit_us = 0;
    for w in p.hops.windows(2) {
        let departed = w[0].departed_at.expect("forwarded hops have departed");
        held_us += departed - w[0].arrived_at;
        transit_us += w[1].arrived_at - departed;
    }
    assert_eq!(t_n, held_us + transit_us, "delay decomposition mismatch for packet {}", p.uid);
    Ok(Decomposition { uid: p.uid, t_p, t_n, t_b, t_t, held_us, transit_us })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerStats {
    pub layer_n: u32,
    pub buffers: u32,
    pub capacity_packets: u32,
    pub peak_occupancy: usize,
    pub drops: u64,
    pub preemptions: u64,
}

fn per_layer(trace: &RunTrace) -> Vec<LayerStats> {
    let mut out: Vec<LayerStats> = Vec::new();
    for b in &trace.buffers {
        let idx = match out.iter().position(|l| l.layer_n == b.layer_n) {
            Some(i) => i,
            None => {
                out.push(LayerStats {
                    layer_n: b.layer_n,
                    buffers: 0,
                    capacity_packets: 0,
                    peak_occupancy: 0,
                    drops: 0,
                    preemptions: 0,
                });
                out.len() - 1
            }
        };
        let l = &mut out[idx];
        l.buffers += 1;
        l.capacity_packets += b.capacity_packets;
        l.peak_occupancy = l.peak_occupancy.max(b.peak_occupancy);
        l.drops += b.counters.drops();
        l.preemptions += b.counters.preempted;
    }
    out.sort_by_key(|l| l.layer_n);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub in_flight_at_end: u64,
    pub throughput: Throughput,
    pub mean_end_to_end_delay_us: Option<f64>,
    pub jitter: Option<Jitter>,
    pub packet_delivery_fraction: Option<DeliveryFraction>,
    pub mean_t_p_us: Option<f64>,
    pub mean_t_n_us: Option<f64>,
    pub mean_t_b_us: Option<f64>,
    pub delays: Vec<PacketDelay>,
    pub decomposition: Vec<Decomposition>,
    pub per_layer: Vec<LayerStats>,
}

pub const CSV_COLUMNS: [&str; 14] = [
    "sent",
    "delivered",
    "dropped",
    "in_flight_at_end",
    "throughput_bytes_per_s",
    "mean_delay_ms",
    "jitter_mad_ms",
    "jitter_stddev_ms",
    "jitter_interarrival_ms",
    "packet_delivery_fraction_percent",
    "mean_tp_ms",
    "mean_tn_ms",
    "mean_tb_ms",
    "buffer_preemptions",
];

fn ms(v: Option<f64>) -> String {
    v.map(|us| format!("{:.3}", us / 1000.0)).unwrap_or_else(|| "NA".into())
}

impl MetricsReport {
    pub fn from_trace(trace: &RunTrace, window: ThroughputWindow) -> Result<MetricsReport, MetricsError> {
        let summary = drain_summary(trace);
        let throughput = throughput(trace, window)?;
        let stats = end_to_end_delay(trace);
        let decomposition: Vec<Decomposition> =
            stats.per_packet.iter().map(|d| decompose_delay(trace, d.uid)).collect::<Result<_, _>>()?;
        let mean_of = |f: fn(&Decomposition) -> u64| -> Option<f64> {
            let v: Vec<u64> = decomposition.iter().map(f).collect();
            mean_us(&v).ok()
        };
        Ok(MetricsReport {
            sent: summary.sent,
            delivered: summary.delivered,
            dropped: summary.dropped,
            in_flight_at_end: summary.in_flight_at_end,
            throughput,
            mean_end_to_end_delay_us: stats.mean_us().ok(),
            jitter: jitter(trace).ok(),
            packet_delivery_fraction: packet_delivery_fraction(trace).ok(),
            mean_t_p_us: mean_of(|d| d.t_p),
            mean_t_n_us: mean_of(|d| d.t_n),
            mean_t_b_us: mean_of(|d| d.t_b),
            delays: stats.per_packet,
            decomposition,
            per_layer: per_layer(trace),
        })
    }

    pub fn preemptions(&self) -> u64 {
        self.per_layer.iter().map(|l| l.preemptions).sum()
    }

    /// Values aligned with [`CSV_COLUMNS`].
    pub fn csv_values(&self) -> Vec<String> {
        vec![
            self.sent.to_string(),
            self.delivered.to_string(),
            self.dropped.to_string(),
            self.in_flight_at_end.to_string(),
            format!("{:.3}", self.throughput.bytes_per_second()),
            ms(self.mean_end_to_end_delay_us),
            ms(self.jitter.map(|j| j.mad_us)),
            ms(self.jitter.map(|j| j.stddev_us)),
            ms(self.jitter.map(|j| j.interarrival_us)),
            self.packet_delivery_fraction.map(|p| p.to_string()).unwrap_or_else(|| "NA".into()),
            ms(self.mean_t_p_us),
            ms(self.mean_t_n_us),
            ms(self.mean_t_b_us),
            self.preemptions().to_string(),
        ]
    }

    /// Canonical `key = value` listing, one metric per line.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in CSV_COLUMNS.iter().zip(self.csv_values()) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str(&format!("delivered_bytes = {}\n", self.throughput.delivered_bytes));
        out.push_str(&format!("total_time_us = {}\n", self.throughput.total_time_us));
        for l in &self.per_layer {
            out.push_str(&format!(
                "layer.{}.buffers = {}\nlayer.{}.capacity_packets = {}\nlayer.{}.peak_occupancy = {}\nlayer.{}.drops = {}\nlayer.{}.preemptions = {}\n",
                l.layer_n, l.buffers, l.layer_n, l.capacity_packets, l.layer_n, l.peak_occupancy, l.layer_n, l.drops, l.layer_n, l.preemptions
            ));
        }
        out
    }

    /// Per-packet `T_p, T_N, T_B, T_t` rows.
    pub fn write_decomposition_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["packet_id", "source_id", "seq", "Tp_us", "TN_us", "TB_us", "Tt_us", "held_us", "transit_us"])?;
        for (d, x) in self.delays.iter().zip(&self.decomposition) {
            w.write_record([
                d.uid.to_string(),
                d.source_id.to_string(),
                d.seq.to_string(),
                x.t_p.to_string(),
                x.t_n.to_string(),
                x.t_b.to_string(),
                x.t_t.to_string(),
                x.held_us.to_string(),
                x.transit_us.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
