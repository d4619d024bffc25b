//! Seeded discrete-event substrate: a single event queue ordered by
//! (fire time, seqno), per-node processing queues, link delays and faults.
//!
//! Time is kept in integer microseconds. A message first *arrives* after the
//! link delay, then waits for the receiver's processor, which handles
//! messages one at a time in arrival order. Links are FIFO, like a reliable
//! stream. A straggler multiplies its processing cost; link delay is
//! unaffected.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HydraError, Result};

pub type SimTime = u64;
pub type NodeId = u32;

pub fn ms(v: f64) -> SimTime {
    (v * 1000.0).round().max(0.0) as SimTime
}

pub fn to_ms(t: SimTime) -> f64 {
    t as f64 / 1000.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct SimClock {
    now: SimTime,
}

impl SimClock {
    pub fn now(&self) -> SimTime {
        self.now
    }
    pub fn now_ms(&self) -> f64 {
        to_ms(self.now)
    }
}

#[derive(Clone, Debug)]
pub struct LinkModel {
    /// Row-major `nodes x nodes` matrix of base delays.
    pub base_delay: Vec<SimTime>,
    pub nodes: usize,
    pub jitter: SimTime,
    pub delta: SimTime,
    pub gst: SimTime,
    /// Extra random delay bound for messages sent before GST.
    pub pre_gst_extra: SimTime,
}

impl LinkModel {
    pub fn uniform(nodes: usize, base: SimTime, jitter: SimTime, delta: SimTime) -> Self {
        LinkModel {
            base_delay: vec![base; nodes * nodes],
            nodes,
            jitter,
            delta,
            gst: 0,
            pre_gst_extra: 0,
        }
    }

    pub fn base(&self, from: NodeId, to: NodeId) -> SimTime {
        self.base_delay[from as usize * self.nodes + to as usize]
    }

    fn sample(&self, from: NodeId, to: NodeId, sent: SimTime, rng: &mut ChaCha8Rng) -> SimTime {
        let mut d = self.base(from, to);
        if self.jitter > 0 {
            d += rng.gen_range(0..=self.jitter);
        }
        if sent < self.gst {
            if self.pre_gst_extra > 0 {
                d += rng.gen_range(0..=self.pre_gst_extra);
            }
            // Anything sent before GST still lands by GST + delta.
            d = d.min(self.gst + self.delta - sent);
        } else {
            d = d.min(self.delta);
        }
        d
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultKind {
    Straggler,
    Crash,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub target: NodeId,
    pub factor: f64,
    pub at_ms: f64,
}

impl FaultSpec {
    pub fn straggler(target: NodeId, factor: f64) -> Self {
        FaultSpec {
            kind: FaultKind::Straggler,
            target,
            factor,
            at_ms: 0.0,
        }
    }
    pub fn crash(target: NodeId, at_ms: f64) -> Self {
        FaultSpec {
            kind: FaultKind::Crash,
            target,
            factor: 1.0,
            at_ms,
        }
    }
}

#[derive(Debug)]
pub enum Payload<M, T> {
    Arrive { from: NodeId, to: NodeId, msg: M, cost: SimTime },
    Process { from: NodeId, to: NodeId, msg: M },
    Timer { node: NodeId, timer: T },
    Crash { node: NodeId },
}

#[derive(Debug)]
pub struct Event<M, T> {
    pub fire_at: SimTime,
    pub seqno: u64,
    pub payload: Payload<M, T>,
}

impl<M, T> PartialEq for Event<M, T> {
    fn eq(&self, o: &Self) -> bool {
        self.fire_at == o.fire_at && self.seqno == o.seqno
    }
}
impl<M, T> Eq for Event<M, T> {}
impl<M, T> PartialOrd for Event<M, T> {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl<M, T> Ord for Event<M, T> {
    // BinaryHeap is a max-heap; invert so the earliest event pops first.
    fn cmp(&self, o: &Self) -> Ordering {
        (o.fire_at, o.seqno).cmp(&(self.fire_at, self.seqno))
    }
}

/// What the event loop hands to the protocol layer.
#[derive(Debug)]
pub enum Delivery<M, T> {
    Message { from: NodeId, to: NodeId, msg: M },
    Timer { node: NodeId, timer: T },
}

/// Optional human-readable trace label for messages and timers.
pub trait TraceLabel {
    fn trace_label(&self) -> String;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub at: SimTime,
    pub seqno: u64,
    pub line: String,
}

pub struct SimNet<M, T> {
    clock: SimClock,
    queue: BinaryHeap<Event<M, T>>,
    next_seqno: u64,
    link: LinkModel,
    rng: ChaCha8Rng,
    busy_until: Vec<SimTime>,
    /// Latest arrival scheduled on each ordered link; links are FIFO.
    link_tail: Vec<SimTime>,
    factor: Vec<f64>,
    crashed_at: Vec<Option<SimTime>>,
    crash_targets: BTreeSet<NodeId>,
    max_crashes: usize,
    fingerprint: u64,
    trace: Option<Vec<TraceRecord>>,
    processed: u64,
}

impl<M: TraceLabel, T: TraceLabel> SimNet<M, T> {
    /// `max_crashes` is the fault bound f.
    pub fn new(link: LinkModel, seed: u64, max_crashes: usize) -> Self {
        let nodes = link.nodes;
        SimNet {
            clock: SimClock::default(),
            queue: BinaryHeap::new(),
            next_seqno: 0,
            link,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d1e7_u64),
            busy_until: vec![0; nodes],
            link_tail: vec![0; nodes * nodes],
            factor: vec![1.0; nodes],
            crashed_at: vec![None; nodes],
            crash_targets: BTreeSet::new(),
            max_crashes,
            fingerprint: 0xcbf2_9ce4_8422_2325,
            trace: None,
            processed: 0,
        }
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.take().unwrap_or_default()
    }

    pub fn now(&self) -> SimTime {
        self.clock.now
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    pub fn link(&self) -> &LinkModel {
        &self.link
    }

    /// Running hash over every processed event; equal across identical runs.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn is_crashed(&self, node: NodeId) -> bool {
        self.crashed_at[node as usize].is_some()
    }

    pub fn factor(&self, node: NodeId) -> f64 {
        self.factor[node as usize]
    }

    fn push(&mut self, fire_at: SimTime, payload: Payload<M, T>) {
        let seqno = self.next_seqno;
        self.next_seqno += 1;
        self.queue.push(Event {
            fire_at,
            seqno,
            payload,
        });
    }

    /// Schedules delivery of `msg`; `cost` is the receiver's unscaled
    /// processing time for it.
    pub fn send(&mut self, from: NodeId, to: NodeId, msg: M, cost: SimTime) {
        if self.is_crashed(from) {
            return;
        }
        let delay = if from == to {
            0
        } else {
            self.link.sample(from, to, self.clock.now, &mut self.rng)
        };
        let tail = &mut self.link_tail[from as usize * self.link.nodes + to as usize];
        let at = (self.clock.now + delay).max(*tail);
        *tail = at;
        self.push(at, Payload::Arrive { from, to, msg, cost });
    }

    pub fn set_timer(&mut self, node: NodeId, after: SimTime, timer: T) {
        if self.is_crashed(node) {
            return;
        }
        let at = self.clock.now + after;
        self.push(at, Payload::Timer { node, timer });
    }

    /// Scales a local cost (e.g. execution) by the node's slowdown.
    pub fn scaled(&self, node: NodeId, cost: SimTime) -> SimTime {
        (cost as f64 * self.factor[node as usize]).round() as SimTime
    }

    pub fn inject_fault(&mut self, spec: FaultSpec) -> Result<()> {
        match spec.kind {
            FaultKind::Straggler => {
                if spec.factor < 1.0 {
                    return Err(HydraError::config("faults.factor", "straggler factor must be >= 1"));
                }
                self.factor[spec.target as usize] = spec.factor;
            }
            FaultKind::Crash => {
                let at = ms(spec.at_ms);
                if at < self.clock.now {
                    return Err(HydraError::config("faults.at_ms", "crash time already passed"));
                }
                let mut targets = self.crash_targets.clone();
                targets.insert(spec.target);
                if targets.len() > self.max_crashes {
                    return Err(HydraError::TooManyFaults {
                        requested: targets.len(),
                        f: self.max_crashes,
                    });
                }
                self.crash_targets = targets;
                self.push(at, Payload::Crash { node: spec.target });
            }
        }
        Ok(())
    }

    fn record(&mut self, ev_seq: u64, kind: u8, a: NodeId, b: NodeId, label: impl FnOnce() -> String) {
        let mut h = self.fingerprint;
        for x in [self.clock.now, ev_seq, kind as u64, a as u64, b as u64] {
            for byte in x.to_be_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        self.fingerprint = h;
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRecord {
                at: self.clock.now,
                seqno: ev_seq,
                line: label(),
            });
        }
    }

    /// Pops the next event due at or before `until`, returning what the
    /// protocol layer must handle. Internal events (arrivals, crashes) are
    /// consumed here and `Some(None)` is returned for them.
    fn step(&mut self, until: SimTime) -> Option<Option<Delivery<M, T>>> {
        if self.queue.peek().is_none_or(|e| e.fire_at > until) {
            return None;
        }
        let ev = self.queue.pop().expect("peeked");
        self.clock.now = ev.fire_at;
        match ev.payload {
            Payload::Arrive { from, to, msg, cost } => {
                if self.is_crashed(to) {
                    return Some(None);
                }
                let start = self.clock.now.max(self.busy_until[to as usize]);
                let done = start + self.scaled(to, cost);
                self.busy_until[to as usize] = done;
                self.push(done, Payload::Process { from, to, msg });
                Some(None)
            }
            Payload::Process { from, to, msg } => {
                if self.is_crashed(to) {
                    return Some(None);
                }
                self.processed += 1;
                self.record(ev.seqno, 1, from, to, || {
                    format!("msg {from}->{to} {}", msg.trace_label())
                });
                Some(Some(Delivery::Message { from, to, msg }))
            }
            Payload::Timer { node, timer } => {
                if self.is_crashed(node) {
                    return Some(None);
                }
                self.processed += 1;
                self.record(ev.seqno, 2, node, node, || {
                    format!("timer {node} {}", timer.trace_label())
                });
                Some(Some(Delivery::Timer { node, timer }))
            }
            Payload::Crash { node } => {
                self.crashed_at[node as usize] = Some(self.clock.now);
                self.record(ev.seqno, 3, node, node, || format!("crash {node}"));
                Some(None)
            }
        }
    }

    /// Processes every event due at or before `t` in (time, seqno) order and
    /// leaves the clock at `t`. Returns the number of handled deliveries.
    pub fn run_until<F>(&mut self, t: SimTime, mut handler: F) -> u64
    where
        F: FnMut(&mut Self, Delivery<M, T>),
    {
        let mut count = 0;
        while let Some(step) = self.step(t) {
            if let Some(d) = step {
                count += 1;
                handler(self, d);
            }
        }
        if t > self.clock.now {
            self.clock.now = t;
        }
        count
    }

    /// Like `run_until` but stops early once `done` reports true.
    pub fn run_while<F, D>(&mut self, t: SimTime, mut handler: F, mut done: D) -> u64
    where
        F: FnMut(&mut Self, Delivery<M, T>),
        D: FnMut(&Self) -> bool,
    {
        let mut count = 0;
        while !done(self) {
            match self.step(t) {
                None => break,
                Some(Some(d)) => {
                    count += 1;
                    handler(self, d);
                }
                Some(None) => {}
            }
        }
        count
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|e| e.fire_at)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Msg(u32);
    impl TraceLabel for Msg {
        fn trace_label(&self) -> String {
            format!("m{}", self.0)
        }
    }
    impl TraceLabel for () {
        fn trace_label(&self) -> String {
            String::new()
        }
    }

    fn net(base_ms: f64) -> SimNet<Msg, ()> {
        SimNet::new(LinkModel::uniform(4, ms(base_ms), 0, ms(500.0)), 1, 1)
    }

    #[test]
    fn fixed_delay_arithmetic() {
        let mut n = net(50.0);
        n.run_until(ms(100.0), |_, _| {});
        n.send(0, 1, Msg(1), 0);
        let mut got = Vec::new();
        n.run_until(ms(1000.0), |net, d| {
            if let Delivery::Message { msg, .. } = d {
                got.push((net.now(), msg));
            }
        });
        assert_eq!(got, vec![(ms(150.0), Msg(1))]);
    }

    #[test]
    fn crashed_target_drops() {
        let mut n = net(50.0);
        n.inject_fault(FaultSpec::crash(1, 80.0)).unwrap();
        n.run_until(ms(100.0), |_, _| {});
        n.send(0, 1, Msg(1), 0);
        let c = n.run_until(ms(1000.0), |_, _| {});
        assert_eq!(c, 0);
    }

    #[test]
    fn same_instant_send_order() {
        let mut n = net(5.0);
        n.send(0, 1, Msg(1), 0);
        n.send(0, 1, Msg(2), 0);
        let mut got = Vec::new();
        n.run_until(ms(10.0), |_, d| {
            if let Delivery::Message { msg, .. } = d {
                got.push(msg.0);
            }
        });
        assert_eq!(got, vec![1, 2]);
    }

    #[test]
    fn empty_queue() {
        let mut n = net(5.0);
        assert_eq!(n.run_until(ms(42.0), |_, _| {}), 0);
        assert_eq!(n.now(), ms(42.0));
    }

    #[test]
    fn too_many_crashes() {
        let mut n = net(5.0);
        n.inject_fault(FaultSpec::crash(1, 10.0)).unwrap();
        assert!(matches!(
            n.inject_fault(FaultSpec::crash(2, 10.0)),
            Err(HydraError::TooManyFaults { .. })
        ));
        // Re-crashing the same target does not count twice.
        n.inject_fault(FaultSpec::crash(1, 20.0)).unwrap();
    }

    #[test]
    fn straggler_inflates_processing_not_link() {
        let mut n = net(10.0);
        n.inject_fault(FaultSpec::straggler(1, 10.0)).unwrap();
        n.send(0, 1, Msg(1), ms(1.0));
        n.send(0, 2, Msg(2), ms(1.0));
        let mut got = Vec::new();
        n.run_until(ms(100.0), |net, d| {
            if let Delivery::Message { to, .. } = d {
                got.push((to, net.now()));
            }
        });
        assert_eq!(got, vec![(2, ms(11.0)), (1, ms(20.0))]);
    }

    #[test]
    fn post_gst_bound() {
        let mut link = LinkModel::uniform(2, ms(900.0), 0, ms(500.0));
        link.gst = 0;
        let mut n: SimNet<Msg, ()> = SimNet::new(link, 3, 0);
        n.send(0, 1, Msg(0), 0);
        n.run_until(ms(2000.0), |net, _| assert!(net.now() <= ms(500.0)));
    }
}
