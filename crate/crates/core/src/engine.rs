//! Discrete-event kernel.
//!
//! Events run in `(time, seq)` order where `seq` is assigned when the event is
//! scheduled, so a run depends only on its config. Links are contention-free
//! fixed-rate pipes: forwarding a packet costs one serialization time plus a
//! fixed per-hop latency, and queueing happens only inside jitter buffers.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::dejitter::{BufferCounters, EnqueueOutcome, JitterBuffer, QueuedPacket, ScheduleModel, SinkPlayout};
use crate::model::{validate, Hop, NodeId, Packet, ScenarioConfig, SimTime, Violation};
use crate::topology::{self, Topology, TopologyError};
use crate::traffic::{self, SourceSelection};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid scenario: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("source node {0} is not part of the topology")]
    UnknownSource(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkModel {
    pub rate_bps: u64,
    pub per_hop_latency_us: u64,
    pub tx_time_us: u64,
}

impl LinkModel {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        LinkModel {
            rate_bps: cfg.link_rate_bps,
            per_hop_latency_us: cfg.per_hop_latency_us,
            tx_time_us: cfg.tx_time_us(),
        }
    }

    /// Time from the start of a transmission to arrival at the next node.
    pub fn hop_delay_us(&self) -> u64 {
        self.tx_time_us + self.per_hop_latency_us
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyModel {
    pub tx_j_per_bit: f64,
    pub rx_j_per_bit: f64,
}

impl EnergyModel {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        EnergyModel { tx_j_per_bit: cfg.energy_tx_j_per_bit, rx_j_per_bit: cfg.energy_rx_j_per_bit }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    /// Last bit of a packet reached the packetizer.
    BitsStep {
        uid: u64,
    },
    SourceEmit {
        uid: u64,
    },
    LinkDeliver {
        from: NodeId,
        to: NodeId,
        uid: u64,
    },
    BufferRelease {
        node: NodeId,
    },
    PlayoutDeliver {
        uid: u64,
    },
    EnergyExhausted {
        node: NodeId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Event {
    pub at: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceKind {
    Gen,
    Tx,
    Rx,
    Enq,
    Rel,
    Pre,
    Evt,
    Rej,
    Drop,
    Play,
    Dead,
}

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::Gen => "GEN",
            TraceKind::Tx => "TX",
            TraceKind::Rx => "RX",
            TraceKind::Enq => "ENQ",
            TraceKind::Rel => "REL",
            TraceKind::Pre => "PRE",
            TraceKind::Evt => "EVT",
            TraceKind::Rej => "REJ",
            TraceKind::Drop => "DROP",
            TraceKind::Play => "PLAY",
            TraceKind::Dead => "DEAD",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub time: SimTime,
    pub seq: u64,
    pub kind: TraceKind,
    pub node: NodeId,
    pub packet: Option<u64>,
    pub detail: String,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let packet = self.packet.map(|p| p.to_string()).unwrap_or_else(|| "-".into());
        let detail = if self.detail.is_empty() { "-" } else { &self.detail };
        write!(f, "{} {} {} {} {}", self.time, self.kind.as_str(), self.node, packet, detail)
    }
}

/// Counters maintained while the event loop runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LiveCounters {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub delivered_bytes: u64,
    pub delay_sum_us: u64,
    pub last_delivery: Option<SimTime>,
    pub energy_deaths: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeBufferStats {
    pub node: NodeId,
    pub layer_n: u32,
    pub capacity_packets: u32,
    pub peak_occupancy: usize,
    pub counters: BufferCounters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketStatus {
    Pending,
    InFlight,
    Delivered,
    Dropped,
}

/// Everything a run produced: the ordered event log plus per-packet records.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub config: ScenarioConfig,
    pub topology: Topology,
    pub sources: Vec<NodeId>,
    pub records: Vec<TraceRecord>,
    /// Every packetized packet, indexed by uid.
    pub packets: Vec<Packet>,
    pub status: Vec<PacketStatus>,
    pub counters: LiveCounters,
    pub buffers: Vec<NodeBufferStats>,
    pub end_time: SimTime,
}

/// `sent = delivered + dropped + in_flight_at_end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DrainSummary {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub in_flight_at_end: u64,
}

impl RunTrace {
    pub fn delivered(&self) -> impl Iterator<Item = &Packet> {
        self.packets.iter().filter(|p| p.delivered_at.is_some())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "# time_us kind node_id packet_id detail")?;
        for r in &self.records {
            writeln!(out, "{r}")?;
        }
        out.flush()
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("trace is ASCII")
    }

    /// Writes the trace to `path`, gzip-compressed when `gzip` is set.
    pub fn save(&self, path: &Path, gzip: bool) -> io::Result<()> {
        let file = BufWriter::new(File::create(path)?);
        if gzip {
            let mut enc = GzEncoder::new(file, Compression::default());
            self.write_to(&mut enc)?;
            enc.finish()?.flush()
        } else {
            self.write_to(file)
        }
    }
}

pub fn drain_summary(trace: &RunTrace) -> DrainSummary {
    let mut s = DrainSummary::default();
    for st in &trace.status {
        match st {
            PacketStatus::Pending => {}
            PacketStatus::InFlight => {
                s.sent += 1;
                s.in_flight_at_end += 1;
            }
            PacketStatus::Delivered => {
                s.sent += 1;
                s.delivered += 1;
            }
            PacketStatus::Dropped => {
                s.sent += 1;
                s.dropped += 1;
            }
        }
    }
    s
}

struct RelayBuffer {
    buffer: JitterBuffer,
    schedule: ScheduleModel,
    pending_wakeup: Option<SimTime>,
}

struct Simulator<'a> {
    cfg: &'a ScenarioConfig,
    topo: &'a Topology,
    link: LinkModel,
    energy_model: EnergyModel,
    heap: BinaryHeap<Reverse<Event>>,
    next_seq: u64,
    packets: Vec<Packet>,
    status: Vec<PacketStatus>,
    relays: Vec<Option<RelayBuffer>>,
    energy: Vec<f64>,
    alive: Vec<bool>,
    playout: SinkPlayout,
    records: Vec<TraceRecord>,
    counters: LiveCounters,
}

impl<'a> Simulator<'a> {
    fn schedule(&mut self, at: SimTime, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Event { at, seq, kind }));
    }

    fn record(&mut self, time: SimTime, kind: TraceKind, node: NodeId, packet: Option<u64>, detail: String) {
        let seq = self.records.len() as u64;
        self.records.push(TraceRecord { time, seq, kind, node, packet, detail });
    }

    fn last_hop_mut(&mut self, uid: u64) -> &mut Hop {
        self.packets[uid as usize].hops.last_mut().expect("packet has visited a node")
    }

    fn drop_packet(&mut self, uid: u64) {
        self.status[uid as usize] = PacketStatus::Dropped;
        self.counters.dropped += 1;
    }

    /// Charges `joules` to `node`; returns false (and kills the node) if it cannot pay.
    fn spend(&mut self, node: NodeId, joules: f64, now: SimTime) -> bool {
        if joules <= 0.0 {
            return self.alive[node as usize];
        }
        let e = &mut self.energy[node as usize];
        if *e >= joules {
            *e -= joules;
            return true;
        }
        *e = 0.0;
        if self.alive[node as usize] {
            self.alive[node as usize] = false;
            self.counters.energy_deaths += 1;
            self.schedule(now, EventKind::EnergyExhausted { node });
        }
        false
    }

    fn transmit(&mut self, node: NodeId, uid: u64, now: SimTime) {
        let parent = self.topo.node(node).parent_id.expect("only non-sink nodes transmit");
        let bits = self.packets[uid as usize].size_bits() as f64;
        if !self.alive[node as usize] || !self.spend(node, bits * self.energy_model.tx_j_per_bit, now) {
            self.record(now, TraceKind::Drop, node, Some(uid), "reason=energy".into());
            self.drop_packet(uid);
            return;
        }
        self.record(now, TraceKind::Tx, node, Some(uid), format!("to={parent}"));
        self.schedule(now + self.link.hop_delay_us(), EventKind::LinkDeliver { from: node, to: parent, uid });
    }

    fn forward_from_buffer(&mut self, node: NodeId, q: QueuedPacket, now: SimTime, kind: TraceKind) {
        let uid = q.packet.uid;
        let detail = match kind {
            TraceKind::Pre => format!("deadline={}", q.packet.lifetime_deadline),
            _ => format!("held={}", now - q.enqueued_at),
        };
        self.record(now, kind, node, Some(uid), detail);
        self.last_hop_mut(uid).departed_at = Some(now);
        self.transmit(node, uid, now);
    }

    /// Expired High packets first, then everything due; then arm the next wakeup.
    fn service_relay(&mut self, node: NodeId, now: SimTime) {
        loop {
            let relay = self.relays[node as usize].as_mut().expect("relay has a buffer");
            let Some(q) = relay.buffer.preempt_check(now) else { break };
            self.forward_from_buffer(node, q, now, TraceKind::Pre);
        }
        let relay = self.relays[node as usize].as_mut().expect("relay has a buffer");
        let due = relay.buffer.release_ready(now);
        for q in due {
            self.forward_from_buffer(node, q, now, TraceKind::Rel);
        }
        let relay = self.relays[node as usize].as_mut().expect("relay has a buffer");
        if let Some(wake) = relay.buffer.next_wakeup(now) {
            if relay.pending_wakeup.is_none_or(|p| wake < p) {
                relay.pending_wakeup = Some(wake);
                self.schedule(wake, EventKind::BufferRelease { node });
            }
        }
    }

    /// A packet arrives at `to`: sink playout, relay buffer, or straight through.
    fn deliver_hop(&mut self, from: NodeId, to: NodeId, uid: u64, now: SimTime) {
        let bits = self.packets[uid as usize].size_bits() as f64;
        if !self.alive[to as usize] || !self.spend(to, bits * self.energy_model.rx_j_per_bit, now) {
            self.record(now, TraceKind::Drop, to, Some(uid), "reason=energy".into());
            self.drop_packet(uid);
            return;
        }
        self.packets[uid as usize].hops.push(Hop { node: to, arrived_at: now, departed_at: None });
        self.record(now, TraceKind::Rx, to, Some(uid), format!("from={from}"));

        if to == self.topo.sink_id {
            let release = self.playout.playout_release(&self.packets[uid as usize], now);
            self.last_hop_mut(uid).departed_at = Some(release);
            self.schedule(release, EventKind::PlayoutDeliver { uid });
            return;
        }

        if self.relays[to as usize].is_none() {
            self.last_hop_mut(uid).departed_at = Some(now);
            self.transmit(to, uid, now);
            return;
        }

        let pkt = self.packets[uid as usize].clone();
        let relay = self.relays[to as usize].as_mut().expect("checked above");
        let outcome = relay.buffer.enqueue(pkt, now, &mut relay.schedule);
        match outcome {
            EnqueueOutcome::Queued { release } => {
                self.record(now, TraceKind::Enq, to, Some(uid), format!("release={release}"));
            }
            EnqueueOutcome::QueuedWithEviction { release, evicted } => {
                self.record(now, TraceKind::Enq, to, Some(uid), format!("release={release}"));
                self.record(now, TraceKind::Evt, to, Some(evicted.uid), format!("by={uid}"));
                self.drop_packet(evicted.uid);
            }
            EnqueueOutcome::Rejected(_) => {
                self.record(now, TraceKind::Rej, to, Some(uid), String::new());
                self.drop_packet(uid);
                return;
            }
        }
        self.service_relay(to, now);
    }

    fn handle(&mut self, ev: Event) {
        let now = ev.at;
        match ev.kind {
            EventKind::BitsStep { uid } => {
                self.counters.sent += 1;
                self.status[uid as usize] = PacketStatus::InFlight;
                let p = &self.packets[uid as usize];
                let (src, detail) = (
                    p.source_id,
                    format!("created={} deadline={} prio={}", p.created_at, p.lifetime_deadline, p.priority.code()),
                );
                self.record(now, TraceKind::Gen, src, Some(uid), detail);
            }
            EventKind::SourceEmit { uid } => {
                let p = &mut self.packets[uid as usize];
                let src = p.source_id;
                p.hops.push(Hop { node: src, arrived_at: p.packetized_at, departed_at: Some(now) });
                self.transmit(src, uid, now);
            }
            EventKind::LinkDeliver { from, to, uid } => self.deliver_hop(from, to, uid, now),
            EventKind::BufferRelease { node } => {
                let relay = self.relays[node as usize].as_mut().expect("wakeups only for relays");
                if relay.pending_wakeup == Some(now) {
                    relay.pending_wakeup = None;
                }
                if self.alive[node as usize] {
                    self.service_relay(node, now);
                }
            }
            EventKind::PlayoutDeliver { uid } => {
                let p = &mut self.packets[uid as usize];
                p.delivered_at = Some(now);
                let delay = now - p.created_at;
                let (sink, bytes) = (p.dest_id, p.size_bytes as u64);
                self.status[uid as usize] = PacketStatus::Delivered;
                self.counters.delivered += 1;
                self.counters.delivered_bytes += bytes;
                self.counters.delay_sum_us += delay;
                self.counters.last_delivery = Some(now);
                self.record(now, TraceKind::Play, sink, Some(uid), format!("delay={delay}"));
            }
            EventKind::EnergyExhausted { node } => {
                self.record(now, TraceKind::Dead, node, None, String::new());
                if let Some(relay) = self.relays[node as usize].as_mut() {
                    let flushed = relay.buffer.drain_all();
                    for q in flushed {
                        self.record(now, TraceKind::Drop, node, Some(q.packet.uid), "reason=energy".into());
                        self.drop_packet(q.packet.uid);
                    }
                }
            }
        }
    }
}

/// Resolves the configured source selection against a layered topology.
pub fn resolve_sources(cfg: &ScenarioConfig, topo: &Topology) -> Result<Vec<NodeId>, EngineError> {
    let mut ids = match &cfg.traffic.source_ids {
        SourceSelection::Deepest => topo.deepest_node().into_iter().collect(),
        SourceSelection::All => topo.nodes.iter().map(|n| n.id).filter(|&id| id != topo.sink_id).collect(),
        SourceSelection::Ids(ids) => ids.clone(),
    };
    ids.sort_unstable();
    ids.dedup();
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= topo.len() || id == topo.sink_id) {
        return Err(EngineError::UnknownSource(bad));
    }
    Ok(ids)
}

/// Generates the topology for `config` and runs the simulation on it.
pub fn run(config: &ScenarioConfig) -> Result<RunTrace, EngineError> {
    let violations = validate(config);
    if !violations.is_empty() {
        return Err(EngineError::Invalid(violations));
    }
    let topo = topology::generate(config)?;
    run_on(config, topo)
}

/// Runs the simulation on a caller-supplied topology (layers are recomputed).
pub fn run_on(config: &ScenarioConfig, topo: Topology) -> Result<RunTrace, EngineError> {
    let violations = validate(config);
    if !violations.is_empty() {
        return Err(EngineError::Invalid(violations));
    }
    let topo = topology::assign_layers(topo);
    if !topo.is_connected() {
        return Err(TopologyError::ConnectivityUnachievable {
            nodes: topo.len() as u32,
            range_m: config.comm_range_m,
            area_m2: config.area_m2,
            attempts: 0,
        }
        .into());
    }
    let topo = topology::place_buffers(topo, &config.buffer_policy)?;
    let sources = resolve_sources(config, &topo)?;

    let mut packets = Vec::new();
    for &src in &sources {
        let flow = traffic::generate_flow(config, src, topo.sink_id, packets.len() as u64);
        packets.extend(flow);
    }

    let relays = topo
        .nodes
        .iter()
        .map(|n| {
            (n.buffer_capacity_packets > 0).then(|| RelayBuffer {
                buffer: JitterBuffer::new(n.buffer_capacity_packets),
                schedule: ScheduleModel::new(config.traffic.cbr_out_interval_us),
                pending_wakeup: None,
            })
        })
        .collect::<Vec<_>>();

    let mut sim = Simulator {
        cfg: config,
        topo: &topo,
        link: LinkModel::from_config(config),
        energy_model: EnergyModel::from_config(config),
        heap: BinaryHeap::new(),
        next_seq: 0,
        status: vec![PacketStatus::Pending; packets.len()],
        packets,
        relays,
        energy: topo.nodes.iter().map(|n| n.energy_j).collect(),
        alive: vec![true; topo.len()],
        playout: SinkPlayout::new(config.sink_playout_delay_us, config.traffic.cbr_out_interval_us),
        records: Vec::new(),
        counters: LiveCounters::default(),
    };

    for &src in &sources {
        let flow: Vec<(u64, SimTime)> =
            sim.packets.iter().filter(|p| p.source_id == src).map(|p| (p.uid, p.packetized_at)).collect();
        let ready: Vec<SimTime> = flow.iter().map(|&(_, t)| t).collect();
        let departures = if config.traffic.shape_at_source {
            traffic::shape_cbr(&ready, config.traffic.cbr_out_interval_us)
        } else {
            ready.clone()
        };
        for (&(uid, t), dep) in flow.iter().zip(departures) {
            sim.schedule(t, EventKind::BitsStep { uid });
            sim.schedule(dep, EventKind::SourceEmit { uid });
        }
    }

    let horizon = SimTime(sim.cfg.sim_duration_us);
    while let Some(Reverse(ev)) = sim.heap.pop() {
        if ev.at > horizon {
            break;
        }
        sim.handle(ev);
    }

    let buffers = topo
        .nodes
        .iter()
        .zip(&sim.relays)
        .filter_map(|(n, r)| {
            r.as_ref().map(|r| NodeBufferStats {
                node: n.id,
                layer_n: n.layer_n,
                capacity_packets: n.buffer_capacity_packets,
                peak_occupancy: r.buffer.peak_occupancy(),
                counters: r.buffer.counters(),
            })
        })
        .collect();

    let mut topo_out = topo.clone();
    for (n, e) in topo_out.nodes.iter_mut().zip(&sim.energy) {
        n.energy_j = *e;
    }

    Ok(RunTrace {
        config: config.clone(),
        sources,
        records: sim.records,
        packets: sim.packets,
        status: sim.status,
        counters: sim.counters,
        buffers,
        end_time: horizon,
        topology: topo_out,
    })
}
