//! Relay jitter buffers and the sink playout buffer.
//!
//! A relay buffer holds each packet until its flow's nominal arrival slot
//! (`epoch + k * interval`, with the epoch set by the first packet seen) and
//! lets a High-priority packet whose lifetime has run out jump the queue.
//! Nothing is ever discarded except on capacity overflow.

use std::collections::BTreeMap;
use std::fmt;

use crate::model::{NodeId, Packet, Priority, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferEvent {
    Enq,
    Rel,
    Pre,
    Evt,
    Rej,
}

impl BufferEvent {
    pub fn as_str(self) -> &'static str {
        match self {
            BufferEvent::Enq => "ENQ",
            BufferEvent::Rel => "REL",
            BufferEvent::Pre => "PRE",
            BufferEvent::Evt => "EVT",
            BufferEvent::Rej => "REJ",
        }
    }
}

impl fmt::Display for BufferEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-flow nominal arrival clock: `epoch + (seq - first_seq) * interval`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleModel {
    pub interval_us: u64,
    flows: BTreeMap<NodeId, (SimTime, u64)>,
}

impl ScheduleModel {
    pub fn new(interval_us: u64) -> Self {
        ScheduleModel { interval_us, flows: BTreeMap::new() }
    }

    /// Nominal arrival of `pkt`; the first packet of a flow sets the epoch at `now`.
    pub fn expected_arrival(&mut self, pkt: &Packet, now: SimTime) -> SimTime {
        let &mut (epoch, first_seq) = self.flows.entry(pkt.source_id).or_insert((now, pkt.seq));
        slot(epoch, first_seq, pkt.seq, self.interval_us)
    }

    pub fn epoch(&self, source: NodeId) -> Option<SimTime> {
        self.flows.get(&source).map(|&(e, _)| e)
    }
}

fn slot(epoch: SimTime, first_seq: u64, seq: u64, interval_us: u64) -> SimTime {
    if seq >= first_seq {
        epoch + (seq - first_seq) * interval_us
    } else {
        epoch.saturating_sub(SimTime((first_seq - seq) * interval_us))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueuedPacket {
    pub packet: Packet,
    pub enqueued_at: SimTime,
    pub scheduled_release: SimTime,
}

impl QueuedPacket {
    fn order_key(&self) -> (SimTime, SimTime, u64) {
        (self.scheduled_release, self.enqueued_at, self.packet.uid)
    }

    pub fn hold_us(&self) -> u64 {
        self.scheduled_release - self.enqueued_at
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Queued { release: SimTime },
    QueuedWithEviction { release: SimTime, evicted: Box<Packet> },
    Rejected(Box<Packet>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BufferCounters {
    pub enqueued: u64,
    pub released: u64,
    pub preempted: u64,
    pub evicted: u64,
    pub rejected: u64,
    /// Packets discarded because the owning node ran out of energy.
    pub flushed: u64,
}

impl BufferCounters {
    pub fn drops(&self) -> u64 {
        self.evicted + self.rejected + self.flushed
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JitterBuffer {
    capacity: usize,
    queue: Vec<QueuedPacket>,
    counters: BufferCounters,
    peak_occupancy: usize,
}

impl JitterBuffer {
    pub fn new(capacity_packets: u32) -> Self {
        assert!(capacity_packets >= 1, "a jitter buffer holds at least one packet");
        JitterBuffer {
            capacity: capacity_packets as usize,
            queue: Vec::with_capacity(capacity_packets as usize),
            counters: BufferCounters::default(),
            peak_occupancy: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn queue(&self) -> &[QueuedPacket] {
        &self.queue
    }

    pub fn counters(&self) -> BufferCounters {
        self.counters
    }

    pub fn drops(&self) -> u64 {
        self.counters.drops()
    }

    pub fn preemptions(&self) -> u64 {
        self.counters.preempted
    }

    pub fn peak_occupancy(&self) -> usize {
        self.peak_occupancy
    }

    fn insert(&mut self, entry: QueuedPacket) {
        let key = entry.order_key();
        let at = self.queue.partition_point(|q| q.order_key() <= key);
        self.queue.insert(at, entry);
        self.counters.enqueued += 1;
        self.peak_occupancy = self.peak_occupancy.max(self.queue.len());
    }

    /// Latest-deadline queued packet of `priority`; later queue position wins ties.
    fn victim_index(&self, priority: Priority) -> Option<usize> {
        self.queue
            .iter()
            .enumerate()
            .filter(|(_, q)| q.packet.priority == priority)
            .max_by_key(|(i, q)| (q.packet.lifetime_deadline, *i))
            .map(|(i, _)| i)
    }

    /// Admits `pkt` with release time `max(now, nominal arrival)`.
    ///
    /// On a full buffer the latest-deadline Normal packet is evicted. With no
    /// Normal packet queued, a Normal arrival is rejected and a High arrival
    /// evicts the latest-deadline High packet only if that deadline is later
    /// than its own.
    pub fn enqueue(&mut self, pkt: Packet, now: SimTime, sched: &mut ScheduleModel) -> EnqueueOutcome {
        let release = now.max(sched.expected_arrival(&pkt, now));
        let entry = QueuedPacket { packet: pkt, enqueued_at: now, scheduled_release: release };
        if self.queue.len() < self.capacity {
            self.insert(entry);
            return EnqueueOutcome::Queued { release };
        }
        let victim = match self.victim_index(Priority::Normal) {
            Some(i) => Some(i),
            None if entry.packet.priority.is_high() => self
                .victim_index(Priority::High)
                .filter(|&i| self.queue[i].packet.lifetime_deadline > entry.packet.lifetime_deadline),
            None => None,
        };
        match victim {
            Some(i) => {
                let evicted = self.queue.remove(i).packet;
                self.counters.evicted += 1;
                self.insert(entry);
                EnqueueOutcome::QueuedWithEviction { release, evicted: Box::new(evicted) }
            }
            None => {
                self.counters.rejected += 1;
                EnqueueOutcome::Rejected(Box::new(entry.packet))
            }
        }
    }

    /// Removes the expired High packet with the earliest deadline, if any.
    pub fn preempt_check(&mut self, now: SimTime) -> Option<QueuedPacket> {
        let idx = self
            .queue
            .iter()
            .enumerate()
            .filter(|(_, q)| q.packet.priority.is_high() && q.packet.is_expired(now))
            .min_by_key(|(i, q)| (q.packet.lifetime_deadline, *i))
            .map(|(i, _)| i)?;
        self.counters.preempted += 1;
        Some(self.queue.remove(idx))
    }

    /// Removes and returns every packet due at or before `now`, in queue order.
    pub fn release_ready(&mut self, now: SimTime) -> Vec<QueuedPacket> {
        let due = self.queue.partition_point(|q| q.scheduled_release <= now);
        self.counters.released += due as u64;
        self.queue.drain(..due).collect()
    }

    /// Earliest future instant at which a release or a preemption can happen.
    pub fn next_wakeup(&self, now: SimTime) -> Option<SimTime> {
        let release = self.queue.first().map(|q| q.scheduled_release.max(now));
        let expiry = self
            .queue
            .iter()
            .filter(|q| q.packet.priority.is_high())
            .map(|q| q.packet.lifetime_deadline.max(now))
            .min();
        match (release, expiry) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Removes every queued packet (used when the owning node dies).
    pub fn drain_all(&mut self) -> Vec<QueuedPacket> {
        self.counters.flushed += self.queue.len() as u64;
        std::mem::take(&mut self.queue)
    }
}

/// Destination playout buffer adding T_B.
///
/// With a positive playout delay, packets are played on a constant-rate clock
/// `first_arrival + k * interval + T_B`; late packets play immediately. A zero
/// playout delay means there is no destination buffer and packets pass through.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SinkPlayout {
    pub playout_delay_us: u64,
    pub interval_us: u64,
    flows: BTreeMap<NodeId, (SimTime, u64)>,
}

impl SinkPlayout {
    pub fn new(playout_delay_us: u64, interval_us: u64) -> Self {
        SinkPlayout { playout_delay_us, interval_us, flows: BTreeMap::new() }
    }

    pub fn playout_release(&mut self, pkt: &Packet, now: SimTime) -> SimTime {
        if self.playout_delay_us == 0 {
            return now;
        }
        let &mut (epoch, first_seq) = self.flows.entry(pkt.source_id).or_insert((now, pkt.seq));
        now.max(slot(epoch, first_seq, pkt.seq, self.interval_us) + self.playout_delay_us)
    }
}
