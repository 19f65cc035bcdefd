//! Double-pulse transmission schedules, cycle simulation and channel-usage counts.
//!
//! Every Active and Bilateral node takes one turn per cycle, in system list
//! order, and emits two pulses separated by the inter-pulse gap. Every
//! Passive and Bilateral node timestamps every foreign pulse on its own clock.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NodeId, System};
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pulse {
    First,
    Second,
}

impl Pulse {
    pub const BOTH: [Pulse; 2] = [Pulse::First, Pulse::Second];

    pub fn index(self) -> u8 {
        match self {
            Pulse::First => 1,
            Pulse::Second => 2,
        }
    }

    pub fn from_index(index: u8) -> Result<Self> {
        match index {
            1 => Ok(Pulse::First),
            2 => Ok(Pulse::Second),
            other => Err(Error::InvalidInput(format!(
                "pulse index must be 1 or 2, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub sender: NodeId,
    pub pulse: Pulse,
    /// True emission time relative to the cycle start, seconds.
    pub emit_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSchedule {
    entries: Vec<ScheduleEntry>,
    period: f64,
}

impl PulseSchedule {
    pub fn entries(&self) -> &[ScheduleEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Time between the starts of consecutive cycles.
    pub fn period(&self) -> f64 {
        self.period
    }

    /// First to last emission within one cycle.
    pub fn span(&self) -> f64 {
        match (self.entries.first(), self.entries.last()) {
            (Some(a), Some(b)) => b.emit_time - a.emit_time,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub inter_pulse_gap: f64,
    pub turn_gap: f64,
    pub cycles: u32,
    pub timestamp_jitter_sd: f64,
    pub rng_seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            inter_pulse_gap: 200e-6,
            turn_gap: 1e-3,
            cycles: 1,
            timestamp_jitter_sd: 0.0,
            rng_seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.inter_pulse_gap) || !positive(self.turn_gap) {
            return Err(Error::InvalidInput(format!(
                "pulse gaps must be positive (inter_pulse_gap={}, turn_gap={})",
                self.inter_pulse_gap, self.turn_gap
            )));
        }
        if !(self.timestamp_jitter_sd.is_finite() && self.timestamp_jitter_sd >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "jitter standard deviation must be >= 0, got {}",
                self.timestamp_jitter_sd
            )));
        }
        if self.cycles == 0 {
            return Err(Error::InvalidInput("cycles must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TxRecord {
    pub sender: NodeId,
    pub pulse: Pulse,
    pub local_timestamp: f64,
    /// Ground truth; never read by the measurement code.
    pub true_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RxRecord {
    pub receiver: NodeId,
    pub sender: NodeId,
    pub pulse: Pulse,
    pub local_timestamp: f64,
}

/// All timestamps recorded during one cycle.
#[derive(Debug, Clone)]
pub struct CycleTrace {
    cycle_index: u64,
    tx: Vec<TxRecord>,
    rx: Vec<RxRecord>,
    system: System,
    tx_index: HashMap<(NodeId, Pulse), usize>,
    rx_index: HashMap<(NodeId, NodeId, Pulse), usize>,
}

impl CycleTrace {
    pub fn new(
        cycle_index: u64,
        tx: Vec<TxRecord>,
        rx: Vec<RxRecord>,
        system: System,
    ) -> Result<Self> {
        let mut tx_index = HashMap::with_capacity(tx.len());
        for (i, r) in tx.iter().enumerate() {
            if tx_index.insert((r.sender, r.pulse), i).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate tx record for node {} pulse {}",
                    r.sender,
                    r.pulse.index()
                )));
            }
        }
        let mut rx_index = HashMap::with_capacity(rx.len());
        for (i, r) in rx.iter().enumerate() {
            if r.receiver == r.sender {
                return Err(Error::InvalidInput(format!(
                    "node {} cannot receive its own pulse",
                    r.sender
                )));
            }
            if rx_index
                .insert((r.receiver, r.sender, r.pulse), i)
                .is_some()
            {
                return Err(Error::InvalidInput(format!(
                    "duplicate rx record at {} from {} pulse {}",
                    r.receiver,
                    r.sender,
                    r.pulse.index()
                )));
            }
        }
        Ok(Self {
            cycle_index,
            tx,
            rx,
            system,
            tx_index,
            rx_index,
        })
    }

    pub fn cycle_index(&self) -> u64 {
        self.cycle_index
    }

    pub fn tx(&self) -> &[TxRecord] {
        &self.tx
    }

    pub fn rx(&self) -> &[RxRecord] {
        &self.rx
    }

    pub fn system(&self) -> &System {
        &self.system
    }

    /// Sender-side timestamp `t_{sender,pulse}`.
    pub fn tx_local(&self, sender: NodeId, pulse: Pulse) -> Result<f64> {
        self.tx_index
            .get(&(sender, pulse))
            .map(|&i| self.tx[i].local_timestamp)
            .ok_or(Error::IncompleteTrace {
                what: "tx",
                receiver: None,
                sender,
                pulse: pulse.index(),
            })
    }

    /// Receiver-side timestamp `r_{receiver}^{sender,pulse}`.
    pub fn rx_local(&self, receiver: NodeId, sender: NodeId, pulse: Pulse) -> Result<f64> {
        self.rx_index
            .get(&(receiver, sender, pulse))
            .map(|&i| self.rx[i].local_timestamp)
            .ok_or(Error::IncompleteTrace {
                what: "rx",
                receiver: Some(receiver),
                sender,
                pulse: pulse.index(),
            })
    }

    /// Copy of the trace with every transmission matching `drop` removed,
    /// together with all of its receptions.
    pub fn without_pulses<F>(&self, drop: F) -> CycleTrace
    where
        F: Fn(NodeId, Pulse) -> bool,
    {
        let tx = self
            .tx
            .iter()
            .filter(|r| !drop(r.sender, r.pulse))
            .copied()
            .collect();
        let rx = self
            .rx
            .iter()
            .filter(|r| !drop(r.sender, r.pulse))
            .copied()
            .collect();
        CycleTrace::new(self.cycle_index, tx, rx, self.system.clone())
            .expect("subset of a valid trace is valid")
    }
}

/// Turn-based double-pulse schedule in system list order.
pub fn build_dpp_schedule(system: &System, cfg: &ProtocolConfig) -> Result<PulseSchedule> {
    cfg.validate()?;
    let turn = cfg.inter_pulse_gap + cfg.turn_gap;
    let mut entries = Vec::new();
    for (i, node) in system.transmitters().enumerate() {
        let start = i as f64 * turn;
        entries.push(ScheduleEntry {
            sender: node.id,
            pulse: Pulse::First,
            emit_time: start,
        });
        entries.push(ScheduleEntry {
            sender: node.id,
            pulse: Pulse::Second,
            emit_time: start + cfg.inter_pulse_gap,
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptySchedule);
    }
    let period = (entries.len() / 2) as f64 * turn;
    Ok(PulseSchedule { entries, period })
}

/// Simulates one cycle of `schedule`, starting at `cycle_index * period`.
pub fn simulate_cycle(
    system: &System,
    schedule: &PulseSchedule,
    cfg: &ProtocolConfig,
    cycle_index: u64,
) -> Result<CycleTrace> {
    cfg.validate()?;
    let mut last = f64::NEG_INFINITY;
    for e in schedule.entries() {
        let sender = system.try_node(e.sender)?;
        if !sender.role.can_transmit() {
            return Err(Error::InvalidRoles(format!(
                "node {} is {} and cannot transmit",
                sender.id, sender.role
            )));
        }
        if e.emit_time <= last {
            return Err(Error::InvalidInput(
                "schedule emit times must be strictly increasing".into(),
            ));
        }
        last = e.emit_time;
    }

    let jitter = if cfg.timestamp_jitter_sd > 0.0 {
        Some(
            Normal::new(0.0, cfg.timestamp_jitter_sd)
                .map_err(|e| Error::InvalidInput(e.to_string()))?,
        )
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed(cfg.rng_seed, cycle_index));

    let cycle_start = cycle_index as f64 * schedule.period();
    let v = system.signal_speed();
    let mut tx = Vec::with_capacity(schedule.len());
    let mut rx = Vec::new();
    for e in schedule.entries() {
        let sender = system.try_node(e.sender)?;
        let emit = cycle_start + e.emit_time;
        tx.push(TxRecord {
            sender: sender.id,
            pulse: e.pulse,
            local_timestamp: sender.clock.local_time(emit),
            true_time: emit,
        });
        for receiver in system.receivers().filter(|n| n.id != sender.id) {
            let arrival = emit + sender.position.distance(&receiver.position)? / v;
            let mut local = receiver.clock.local_time(arrival);
            if let Some(noise) = &jitter {
                local += noise.sample(&mut rng);
            }
            if !local.is_finite() {
                return Err(Error::Simulation(format!(
                    "non-finite reception time at node {} from node {}",
                    receiver.id, sender.id
                )));
            }
            rx.push(RxRecord {
                receiver: receiver.id,
                sender: sender.id,
                pulse: e.pulse,
                local_timestamp: local,
            });
        }
    }
    CycleTrace::new(cycle_index, tx, rx, system.clone())
}

/// Runs `cfg.cycles` consecutive cycles.
pub fn simulate(system: &System, cfg: &ProtocolConfig, mode: Execution) -> Result<Vec<CycleTrace>> {
    let schedule = build_dpp_schedule(system, cfg)?;
    par::map_indexed(cfg.cycles as usize, mode, |c| {
        simulate_cycle(system, &schedule, cfg, c as u64)
    })
    .into_iter()
    .collect()
}

/// Pulses per DPP cycle with `bilaterals` Bilateral and `actives` Active nodes.
pub fn message_count_dpp(bilaterals: u64, actives: u64) -> u64 {
    2 * (bilaterals + actives)
}

/// Pulses per DPW cycle with `mirrors` mirrors and `tags` tags.
pub fn message_count_dpw(mirrors: u64, tags: u64) -> u64 {
    3 * mirrors * tags
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DjkmCount {
    pub first_round: u64,
    pub second_round: u64,
    pub total: u64,
}

/// Pulses per DJKM cycle over `anchors` anchors with reply re-use.
pub fn message_count_djkm(anchors: u64) -> Result<DjkmCount> {
    if anchors <= 2 {
        return Err(Error::OutOfDomain(format!(
            "DJKM message count is defined for more than two anchors, got {anchors}"
        )));
    }
    let first_round = 2 * anchors - 1;
    let second_round = 2 * anchors.div_ceil(2) - 1;
    Ok(DjkmCount {
        first_round,
        second_round,
        total: first_round + second_round,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DjkmMessageKind {
    Initial,
    Reply,
    Final,
}

/// One DJKM transmission. Anchors are numbered from 1 in list order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DjkmEvent {
    pub round: u8,
    pub sender: u64,
    pub kind: DjkmMessageKind,
    /// `(initiator, responder)` of the exchange this message belongs to.
    pub exchange: (u64, u64),
    /// A reply that simultaneously opens the next exchange.
    pub also_initiates: Option<(u64, u64)>,
}

/// Two-round DJKM ordering: every anchor with its successor, then the
/// odd-indexed anchors in sequence. A reply is re-used as the initial message
/// of the responder's own exchange with the next anchor. Rounds are chained
/// independently.
pub fn build_djkm_schedule(anchors: u64) -> Result<Vec<DjkmEvent>> {
    message_count_djkm(anchors)?;
    let first: Vec<u64> = (1..=anchors).collect();
    let second: Vec<u64> = (1..=anchors).step_by(2).collect();
    let mut events = Vec::new();
    chain_round(1, &first, &mut events);
    chain_round(2, &second, &mut events);
    Ok(events)
}

fn chain_round(round: u8, chain: &[u64], out: &mut Vec<DjkmEvent>) {
    if chain.len() < 2 {
        return;
    }
    out.push(DjkmEvent {
        round,
        sender: chain[0],
        kind: DjkmMessageKind::Initial,
        exchange: (chain[0], chain[1]),
        also_initiates: None,
    });
    for i in 1..chain.len() {
        let exchange = (chain[i - 1], chain[i]);
        out.push(DjkmEvent {
            round,
            sender: chain[i],
            kind: DjkmMessageKind::Reply,
            exchange,
            also_initiates: chain.get(i + 1).map(|&next| (chain[i], next)),
        });
        out.push(DjkmEvent {
            round,
            sender: chain[i - 1],
            kind: DjkmMessageKind::Final,
            exchange,
            also_initiates: None,
        });
    }
}
