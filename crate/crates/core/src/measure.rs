//! Timespan extraction and the derived μ, TDoA, ToA and direct-distance values.
//!
//! Every value here is computed from local timestamps only. Clock offsets
//! cancel because each span is a difference of two readings of one clock.
//!
//! For a triple `(X, Y, Z)` with X receiving, Y transmitting and Z Bilateral,
//! the four spans are
//!
//! ```text
//! round_x = r_X(Z,p) - r_X(Y,1)      delay_x = r_X(Y,2) - r_X(Z,p)
//! round_z = r_Z(Y,2) - t_Z(p)        delay_z = t_Z(p)   - r_Z(Y,1)
//! ```
//!
//! and `round_x + delay_x == round_z + delay_z` on ideal clocks. The compound
//! value μ equals `d(Y,Z) - d(X,Y) + d(X,Z)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NodeId, NodePair, NodeRole, System};
use crate::protocol::{CycleTrace, Pulse};

/// Smallest accepted span denominator, seconds.
pub const DENOMINATOR_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdoaSpans {
    pub x: NodeId,
    pub y: NodeId,
    pub z: NodeId,
    pub pulse: Pulse,
    pub round_x: f64,
    pub delay_x: f64,
    pub round_z: f64,
    pub delay_z: f64,
}

impl TdoaSpans {
    fn numerator(&self) -> f64 {
        self.round_x * self.round_z - self.delay_x * self.delay_z
    }

    /// `(round_x + delay_x) - (round_z + delay_z)`; zero on ideal clocks.
    pub fn symmetry_residual(&self) -> f64 {
        (self.round_x + self.delay_x) - (self.round_z + self.delay_z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwrSpans {
    pub y: NodeId,
    pub z: NodeId,
    pub pulse: Pulse,
    pub round_y: f64,
    pub delay_y: f64,
    pub round_z: f64,
    pub delay_z: f64,
}

fn distinct(ids: &[NodeId]) -> Result<()> {
    let set: BTreeSet<_> = ids.iter().collect();
    if set.len() != ids.len() {
        return Err(Error::InvalidRoles(format!(
            "nodes must be distinct: {ids:?}"
        )));
    }
    Ok(())
}

fn require(system: &System, id: NodeId, ok: impl Fn(NodeRole) -> bool, what: &str) -> Result<()> {
    let node = system.try_node(id)?;
    if ok(node.role) {
        Ok(())
    } else {
        Err(Error::InvalidRoles(format!(
            "node {id} is {} but must be {what}",
            node.role
        )))
    }
}

fn check_triple_roles(system: &System, x: NodeId, y: NodeId, z: NodeId) -> Result<()> {
    distinct(&[x, y, z])?;
    require(system, x, NodeRole::can_receive, "able to receive")?;
    require(system, y, NodeRole::can_transmit, "able to transmit")?;
    require(system, z, |r| r == NodeRole::Bilateral, "bilateral")
}

/// Spans of the triple `(x, y, z)` using Z's pulse `p`.
pub fn extract_tdoa_spans(
    trace: &CycleTrace,
    x: NodeId,
    y: NodeId,
    z: NodeId,
    p: Pulse,
) -> Result<TdoaSpans> {
    check_triple_roles(trace.system(), x, y, z)?;
    let rx_y1 = trace.rx_local(x, y, Pulse::First)?;
    let rx_y2 = trace.rx_local(x, y, Pulse::Second)?;
    let rx_zp = trace.rx_local(x, z, p)?;
    let rz_y1 = trace.rx_local(z, y, Pulse::First)?;
    let rz_y2 = trace.rx_local(z, y, Pulse::Second)?;
    let tz_p = trace.tx_local(z, p)?;
    Ok(TdoaSpans {
        x,
        y,
        z,
        pulse: p,
        round_x: rx_zp - rx_y1,
        delay_x: rx_y2 - rx_zp,
        round_z: rz_y2 - tz_p,
        delay_z: tz_p - rz_y1,
    })
}

/// Which denominator the μ value is normalised by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuForm {
    /// X's own double-pulse span.
    FromX,
    /// Z's own double-pulse span.
    FromZ,
    /// Mean of both spans.
    Combined,
}

fn guarded(numerator: f64, denominator: f64) -> Result<f64> {
    if !(denominator >= DENOMINATOR_GUARD) {
        return Err(Error::DegenerateSchedule { denominator });
    }
    Ok(numerator / denominator)
}

pub fn mu(spans: &TdoaSpans, form: MuForm) -> Result<f64> {
    let num = spans.numerator();
    match form {
        MuForm::FromX => guarded(num, spans.round_x + spans.delay_x),
        MuForm::FromZ => guarded(num, spans.round_z + spans.delay_z),
        MuForm::Combined => guarded(
            2.0 * num,
            spans.round_x + spans.round_z + spans.delay_x + spans.delay_z,
        ),
    }
}

/// `T(x,z | source y) = μ - d(x,z)`.
pub fn tdoa_from_mu(mu: f64, d_xz: f64) -> f64 {
    mu - d_xz
}

/// `T(y,z | source x) = μ - d(y,z)`: the same μ read with X as the source.
pub fn tdoa_alternate(mu: f64, d_yz: f64) -> f64 {
    mu - d_yz
}

/// Two-way-ranging spans between Bilaterals `y` (double pulse) and `z` (pulse `q`).
pub fn extract_twr_spans(trace: &CycleTrace, y: NodeId, z: NodeId, q: Pulse) -> Result<TwrSpans> {
    distinct(&[y, z])?;
    let system = trace.system();
    require(system, y, |r| r == NodeRole::Bilateral, "bilateral")?;
    require(system, z, |r| r == NodeRole::Bilateral, "bilateral")?;
    let ty1 = trace.tx_local(y, Pulse::First)?;
    let ty2 = trace.tx_local(y, Pulse::Second)?;
    let ry_zq = trace.rx_local(y, z, q)?;
    let tz_q = trace.tx_local(z, q)?;
    let rz_y1 = trace.rx_local(z, y, Pulse::First)?;
    let rz_y2 = trace.rx_local(z, y, Pulse::Second)?;
    Ok(TwrSpans {
        y,
        z,
        pulse: q,
        round_y: ry_zq - ty1,
        delay_y: ty2 - ry_zq,
        round_z: rz_y2 - tz_q,
        delay_z: tz_q - rz_y1,
    })
}

/// Asymmetric double-sided two-way ranging: time of flight between Y and Z.
pub fn toa_distance(spans: &TwrSpans) -> Result<f64> {
    guarded(
        spans.round_y * spans.round_z - spans.delay_y * spans.delay_z,
        spans.round_y + spans.round_z + spans.delay_y + spans.delay_z,
    )
}

/// Triple key: receiver `x`, Bilateral `z`, source `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MuKey {
    pub x: NodeId,
    pub z: NodeId,
    pub y: NodeId,
}

impl MuKey {
    pub fn new(x: NodeId, y: NodeId, z: NodeId) -> Self {
        Self { x, z, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuMeasurement {
    pub cycle: u64,
    pub key: MuKey,
    pub value: f64,
}

/// `d(x,z) = (μ(x,z|y) + μ(z,x|y)) / 2` for two Bilaterals measured against the same source.
pub fn direct_distance(xzy: &MuMeasurement, zxy: &MuMeasurement) -> Result<f64> {
    let (a, b) = (xzy.key, zxy.key);
    if a.y != b.y || a.x != b.z || a.z != b.x || a.x == a.z {
        return Err(Error::InvalidPairing(format!(
            "expected ({x},{z}|{y}) and ({z},{x}|{y}), got {a:?} and {b:?}",
            x = a.x,
            z = a.z,
            y = a.y
        )));
    }
    if xzy.cycle != zxy.cycle {
        return Err(Error::InvalidPairing(format!(
            "values come from cycles {} and {}",
            xzy.cycle, zxy.cycle
        )));
    }
    Ok(0.5 * (xzy.value + zxy.value))
}

/// Which pulse of the second node feeds a span set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseChoice {
    Single(Pulse),
    /// Compute both and average.
    #[default]
    Average,
}

impl PulseChoice {
    pub fn pulses(self) -> &'static [Pulse] {
        match self {
            PulseChoice::Single(Pulse::First) => &[Pulse::First],
            PulseChoice::Single(Pulse::Second) => &[Pulse::Second],
            PulseChoice::Average => &Pulse::BOTH,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PulseChoice::Single(Pulse::First) => "1",
            PulseChoice::Single(Pulse::Second) => "2",
            PulseChoice::Average => "avg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuValue {
    /// Combined-form value per pulse of Z.
    pub per_pulse: Vec<(Pulse, f64)>,
    /// Mean over `per_pulse`.
    pub value: f64,
}

pub fn measure_mu(trace: &CycleTrace, key: MuKey, choice: PulseChoice) -> Result<MuValue> {
    let per_pulse = choice
        .pulses()
        .iter()
        .map(|&p| {
            let spans = extract_tdoa_spans(trace, key.x, key.y, key.z, p)?;
            Ok((p, mu(&spans, MuForm::Combined)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let value = per_pulse.iter().map(|(_, v)| v).sum::<f64>() / per_pulse.len() as f64;
    Ok(MuValue { per_pulse, value })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToaValue {
    /// `(double-pulsing node, responder pulse, time of flight)` per path.
    pub per_path: Vec<(NodeId, Pulse, f64)>,
    pub seconds: f64,
    pub meters: f64,
}

/// ToA between two Bilaterals, averaged over both orientations and the chosen pulses.
pub fn measure_toa(
    trace: &CycleTrace,
    a: NodeId,
    b: NodeId,
    choice: PulseChoice,
) -> Result<ToaValue> {
    let mut per_path = Vec::new();
    for (y, z) in [(a, b), (b, a)] {
        for &q in choice.pulses() {
            per_path.push((y, q, toa_distance(&extract_twr_spans(trace, y, z, q)?)?));
        }
    }
    let seconds = per_path.iter().map(|p| p.2).sum::<f64>() / per_path.len() as f64;
    Ok(ToaValue {
        per_path,
        seconds,
        meters: seconds * trace.system().signal_speed(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuSymmetry {
    pub mu_xzy: f64,
    pub mu_yzx: f64,
    pub delta: f64,
}

/// Compares `μ(x,z|y)` with `μ(y,z|x)`; both equal on ideal clocks when all three are Bilateral.
pub fn mu_symmetry_check(
    trace: &CycleTrace,
    x: NodeId,
    y: NodeId,
    z: NodeId,
) -> Result<MuSymmetry> {
    let system = trace.system();
    for id in [x, y, z] {
        require(system, id, |r| r == NodeRole::Bilateral, "bilateral")?;
    }
    let mu_xzy = measure_mu(trace, MuKey::new(x, y, z), PulseChoice::Average)?.value;
    let mu_yzx = measure_mu(trace, MuKey::new(y, x, z), PulseChoice::Average)?.value;
    Ok(MuSymmetry {
        mu_xzy,
        mu_yzx,
        delta: mu_xzy - mu_yzx,
    })
}

/// Where the distance needed to turn a μ value into a TDoA comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistancePolicy {
    /// Same-cycle ToA between Bilaterals, configured positions otherwise.
    #[default]
    PreferToa,
    /// Only configured (known) positions.
    KnownPositions,
    /// Ground-truth geometry for every pair. Oracle use only.
    GroundTruth,
}

/// Distance lookup (seconds) under a [`DistancePolicy`].
#[derive(Debug, Clone)]
pub struct DistanceBook<'a> {
    system: &'a System,
    toa: HashMap<NodePair, f64>,
    policy: DistancePolicy,
}

impl<'a> DistanceBook<'a> {
    pub fn new(
        system: &'a System,
        toa: &BTreeMap<NodePair, ToaValue>,
        policy: DistancePolicy,
    ) -> Self {
        Self {
            system,
            toa: toa.iter().map(|(k, v)| (*k, v.seconds)).collect(),
            policy,
        }
    }

    pub fn get(&self, a: NodeId, b: NodeId) -> Option<f64> {
        let (na, nb) = (self.system.node(a)?, self.system.node(b)?);
        let from_positions = || self.system.tof(a, b).ok();
        match self.policy {
            DistancePolicy::GroundTruth => from_positions(),
            DistancePolicy::PreferToa => {
                self.toa.get(&NodePair::new(a, b)).copied().or_else(|| {
                    (na.known_position && nb.known_position)
                        .then(from_positions)
                        .flatten()
                })
            }
            DistancePolicy::KnownPositions => (na.known_position && nb.known_position)
                .then(from_positions)
                .flatten(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TdoaForm {
    /// Receivers X and Z, source Y; needs `d(x,z)`.
    ReceiverPair,
    /// Receivers Y and Z, source X; needs `d(y,z)`.
    SourcePair,
}

/// `value = d(source, b) - d(a, source)`, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdoaEntry {
    pub a: NodeId,
    pub b: NodeId,
    pub source: NodeId,
    pub value: f64,
    pub form: TdoaForm,
    pub from: MuKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeasureConfig {
    pub policy: DistancePolicy,
    pub p: PulseChoice,
    pub q: PulseChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementFailure {
    pub what: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub cycle: u64,
    pub signal_speed: f64,
    pub mu: BTreeMap<MuKey, MuValue>,
    pub toa: BTreeMap<NodePair, ToaValue>,
    pub tdoa: Vec<TdoaEntry>,
    /// Keyed by `(x, z, y)` with `x < z`.
    pub direct: BTreeMap<MuKey, f64>,
    /// Triples whose receiver-pair distance is unknown under the policy.
    pub mu_only: Vec<MuKey>,
    pub failures: Vec<MeasurementFailure>,
}

impl MeasurementSet {
    pub fn mu_value(&self, x: NodeId, y: NodeId, z: NodeId) -> Option<f64> {
        self.mu.get(&MuKey::new(x, y, z)).map(|v| v.value)
    }

    pub fn toa_seconds(&self, a: NodeId, b: NodeId) -> Option<f64> {
        self.toa.get(&NodePair::new(a, b)).map(|v| v.seconds)
    }

    pub fn tdoa_value(&self, a: NodeId, b: NodeId, source: NodeId, form: TdoaForm) -> Option<f64> {
        self.tdoa
            .iter()
            .find(|e| e.a == a && e.b == b && e.source == source && e.form == form)
            .map(|e| e.value)
    }
}

/// Every ordered triple `(X, Y, Z)` a cycle of `system` produces spans for.
pub fn admissible_triples(system: &System) -> Vec<MuKey> {
    let nodes = system.nodes();
    let mut out = Vec::new();
    for x in nodes.iter().filter(|n| n.role.can_receive()) {
        for y in nodes
            .iter()
            .filter(|n| n.role.can_transmit() && n.id != x.id)
        {
            for z in nodes
                .iter()
                .filter(|n| n.role == NodeRole::Bilateral && n.id != x.id && n.id != y.id)
            {
                out.push(MuKey::new(x.id, y.id, z.id));
            }
        }
    }
    out
}

/// Every unordered Bilateral pair, in list order.
pub fn admissible_pairs(system: &System) -> Vec<NodePair> {
    let b: Vec<NodeId> = system
        .with_role(NodeRole::Bilateral)
        .map(|n| n.id)
        .collect();
    let mut out = Vec::new();
    for i in 0..b.len() {
        for j in i + 1..b.len() {
            out.push(NodePair::new(b[i], b[j]));
        }
    }
    out
}

/// All μ, ToA, TDoA and direct values of one cycle.
pub fn full_cycle_measurements(trace: &CycleTrace, cfg: &MeasureConfig) -> MeasurementSet {
    let system = trace.system();
    let mut failures = Vec::new();

    let mut toa = BTreeMap::new();
    for pair in admissible_pairs(system) {
        match measure_toa(trace, pair.first(), pair.second(), cfg.q) {
            Ok(v) => {
                toa.insert(pair, v);
            }
            Err(e) => failures.push(MeasurementFailure {
                what: format!("toa {}-{}", pair.first(), pair.second()),
                error: e.to_string(),
            }),
        }
    }

    let mut mu_map = BTreeMap::new();
    for key in admissible_triples(system) {
        match measure_mu(trace, key, cfg.p) {
            Ok(v) => {
                mu_map.insert(key, v);
            }
            Err(e) => failures.push(MeasurementFailure {
                what: format!("mu ({},{}|{})", key.x, key.z, key.y),
                error: e.to_string(),
            }),
        }
    }

    let book = DistanceBook::new(system, &toa, cfg.policy);
    let mut tdoa = Vec::new();
    let mut mu_only = Vec::new();
    for (key, v) in &mu_map {
        match book.get(key.x, key.z) {
            Some(d) => tdoa.push(TdoaEntry {
                a: key.x,
                b: key.z,
                source: key.y,
                value: tdoa_from_mu(v.value, d),
                form: TdoaForm::ReceiverPair,
                from: *key,
            }),
            None => mu_only.push(*key),
        }
        if let Some(d) = book.get(key.y, key.z) {
            tdoa.push(TdoaEntry {
                a: key.y,
                b: key.z,
                source: key.x,
                value: tdoa_alternate(v.value, d),
                form: TdoaForm::SourcePair,
                from: *key,
            });
        }
    }

    let mut direct = BTreeMap::new();
    for (key, v) in &mu_map {
        if key.x >= key.z {
            continue;
        }
        let swapped = MuKey::new(key.z, key.y, key.x);
        if let Some(w) = mu_map.get(&swapped) {
            direct.insert(*key, 0.5 * (v.value + w.value));
        }
    }

    MeasurementSet {
        cycle: trace.cycle_index(),
        signal_speed: system.signal_speed(),
        mu: mu_map,
        toa,
        tdoa,
        direct,
        mu_only,
        failures,
    }
}

/// One representative per group of μ values that are tied together once the
/// Bilateral-to-Bilateral distances are known.
///
/// Two triples are tied when they differ by swapping two Bilateral roles:
/// `μ(x,z|y) + μ(z,x|y) = 2 d(x,z)`, `μ(x,z|y) + μ(x,y|z) = 2 d(y,z)` and
/// `μ(x,z|y) = μ(y,z|x)`. The representative is the first triple when sorted
/// by the list positions of `(x, z, y)`.
pub fn canonical_mu_keys(system: &System, keys: &[MuKey]) -> Vec<MuKey> {
    let idx = |k: &MuKey| {
        (
            system.index_of(k.x).unwrap_or(usize::MAX),
            system.index_of(k.z).unwrap_or(usize::MAX),
            system.index_of(k.y).unwrap_or(usize::MAX),
        )
    };
    let mut sorted = keys.to_vec();
    sorted.sort_by_key(idx);
    sorted.dedup();
    let pos: HashMap<MuKey, usize> = sorted.iter().enumerate().map(|(i, k)| (*k, i)).collect();

    let mut parent: Vec<usize> = (0..sorted.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for (i, k) in sorted.iter().enumerate() {
        let partners = [
            MuKey::new(k.z, k.y, k.x),
            MuKey::new(k.x, k.z, k.y),
            MuKey::new(k.y, k.x, k.z),
        ];
        for p in partners {
            if let Some(&j) = pos.get(&p) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                // keep the smaller index as root so it is the representative
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    (0..sorted.len())
        .filter(|&i| find(&mut parent, i) == i)
        .map(|i| sorted[i])
        .collect()
}

#[derive(Debug, Clone)]
pub struct SubSchemeView {
    /// The trace restricted to the pulses the legacy scheme transmits.
    pub trace: CycleTrace,
    pub tdoa: f64,
    pub messages: usize,
}

/// DPW sub-scheme: Passive `x` times Active `y`'s double pulse and Bilateral
/// `z`'s first pulse as the mirror reply. Returns `T(x,z|y)`.
pub fn derive_dpw_view(
    trace: &CycleTrace,
    x: NodeId,
    y: NodeId,
    z: NodeId,
    d_xz: f64,
) -> Result<SubSchemeView> {
    let system = trace.system();
    distinct(&[x, y, z])?;
    require(system, x, |r| r == NodeRole::Passive, "passive")?;
    require(system, y, |r| r == NodeRole::Active, "active")?;
    require(system, z, |r| r == NodeRole::Bilateral, "bilateral")?;
    let view = trace.without_pulses(|s, p| !(s == y || (s == z && p == Pulse::First)));
    let spans = extract_tdoa_spans(&view, x, y, z, Pulse::First)?;
    let value = mu(&spans, MuForm::Combined)?;
    Ok(SubSchemeView {
        messages: view.tx().len(),
        trace: view,
        tdoa: tdoa_from_mu(value, d_xz),
    })
}

/// DJKM sub-scheme: Passive tag `t` hears the first pulses of anchors `an0`
/// and `an1`; `an1` reports its reply delay. Returns `T(an0,an1|t)`.
pub fn derive_djkm_view(
    trace: &CycleTrace,
    t: NodeId,
    an0: NodeId,
    an1: NodeId,
    d_anchors: f64,
) -> Result<SubSchemeView> {
    let system = trace.system();
    if an0 == an1 {
        return Err(Error::InvalidRoles(
            "DJKM needs two distinct anchors".into(),
        ));
    }
    distinct(&[t, an0, an1])?;
    require(system, t, |r| r == NodeRole::Passive, "passive")?;
    require(system, an0, |r| r == NodeRole::Bilateral, "bilateral")?;
    require(system, an1, |r| r == NodeRole::Bilateral, "bilateral")?;
    let view = trace.without_pulses(|s, p| !((s == an0 || s == an1) && p == Pulse::First));
    let tag_span = view.rx_local(t, an1, Pulse::First)? - view.rx_local(t, an0, Pulse::First)?;
    let reply_delay = view.tx_local(an1, Pulse::First)? - view.rx_local(an1, an0, Pulse::First)?;
    let mu = tag_span - reply_delay;
    Ok(SubSchemeView {
        messages: view.tx().len(),
        trace: view,
        tdoa: tdoa_alternate(mu, d_anchors),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClockModel, Node};
    use crate::par::Execution;
    use crate::protocol::{build_dpp_schedule, simulate, simulate_cycle, ProtocolConfig};

    const TOL: f64 = 1e-12;

    // v = 1 m/s puts flight times in seconds; gaps must be on the same scale
    // or the span products lose precision.
    fn unit_cfg() -> ProtocolConfig {
        ProtocolConfig {
            inter_pulse_gap: 10.0,
            turn_gap: 20.0,
            ..Default::default()
        }
    }

    fn fixture(clocks: [ClockModel; 3]) -> CycleTrace {
        // X(0,0) Y(3,0) Z(3,4) at v = 1: d_XY = 3, d_YZ = 4, d_XZ = 5
        let nodes = vec![
            Node::new(0, NodeRole::Bilateral, [0.0, 0.0]).with_clock(clocks[0]),
            Node::new(1, NodeRole::Bilateral, [3.0, 0.0]).with_clock(clocks[1]),
            Node::new(2, NodeRole::Bilateral, [3.0, 4.0]).with_clock(clocks[2]),
        ];
        let sys = System::new(nodes, 1.0).unwrap();
        let cfg = unit_cfg();
        let sched = build_dpp_schedule(&sys, &cfg).unwrap();
        simulate_cycle(&sys, &sched, &cfg, 0).unwrap()
    }

    fn ideal() -> CycleTrace {
        fixture([ClockModel::IDEAL; 3])
    }

    const X: NodeId = NodeId(0);
    const Y: NodeId = NodeId(1);
    const Z: NodeId = NodeId(2);

    #[test]
    fn span_symmetry_on_ideal_clocks() {
        let t = ideal();
        for p in Pulse::BOTH {
            let s = extract_tdoa_spans(&t, X, Y, Z, p).unwrap();
            assert!(s.symmetry_residual().abs() < TOL);
        }
    }

    #[test]
    fn drifted_span_sums_scale_with_own_clock() {
        let kx = 20e-6;
        let kz = -15e-6;
        let t = fixture([
            ClockModel::new(0.3, kx).unwrap(),
            ClockModel::new(-0.1, 5e-6).unwrap(),
            ClockModel::new(0.7, kz).unwrap(),
        ]);
        let gap = unit_cfg().inter_pulse_gap;
        let s = extract_tdoa_spans(&t, X, Y, Z, Pulse::First).unwrap();
        assert!((s.round_x + s.delay_x - (1.0 + kx) * gap).abs() < 1e-13);
        assert!((s.round_z + s.delay_z - (1.0 + kz) * gap).abs() < 1e-13);
    }

    #[test]
    fn mu_forms_match_geometry() {
        let t = ideal();
        for p in Pulse::BOTH {
            let s = extract_tdoa_spans(&t, X, Y, Z, p).unwrap();
            for form in [MuForm::FromX, MuForm::FromZ, MuForm::Combined] {
                assert!((mu(&s, form).unwrap() - 6.0).abs() < TOL, "{form:?}");
            }
        }
    }

    #[test]
    fn mu_scales_with_common_drift() {
        let eps = 20e-6;
        let c = ClockModel::new(0.0, eps).unwrap();
        let t = fixture([c, ClockModel::IDEAL, c]);
        let v = measure_mu(&t, MuKey::new(X, Y, Z), PulseChoice::Average)
            .unwrap()
            .value;
        assert!((v - (1.0 + eps) * 6.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_denominator_is_rejected() {
        let s = TdoaSpans {
            x: X,
            y: Y,
            z: Z,
            pulse: Pulse::First,
            round_x: 0.0,
            delay_x: 0.0,
            round_z: 0.0,
            delay_z: 0.0,
        };
        assert!(matches!(
            mu(&s, MuForm::Combined),
            Err(Error::DegenerateSchedule { .. })
        ));
    }

    #[test]
    fn tdoa_forms() {
        assert_eq!(tdoa_from_mu(6.0, 5.0), 1.0);
        assert_eq!(tdoa_from_mu(5.0, 5.0), 0.0);
        assert_eq!(tdoa_alternate(6.0, 4.0), 2.0);
        assert_eq!(tdoa_alternate(4.0, 4.0), 0.0);
        assert_eq!(tdoa_from_mu(6.0, 5.0) + 5.0, tdoa_alternate(6.0, 4.0) + 4.0);
    }

    #[test]
    fn toa_on_fixture() {
        let t = ideal();
        for q in Pulse::BOTH {
            let s = extract_twr_spans(&t, Y, Z, q).unwrap();
            assert!((toa_distance(&s).unwrap() - 4.0).abs() < TOL);
            let ty = t.tx_local(Y, Pulse::Second).unwrap() - t.tx_local(Y, Pulse::First).unwrap();
            assert!((s.round_y + s.delay_y - ty).abs() < TOL);
        }
    }

    #[test]
    fn toa_of_colocated_nodes_is_zero() {
        let nodes = vec![
            Node::new(0, NodeRole::Bilateral, [1.0, 1.0]),
            Node::new(1, NodeRole::Bilateral, [1.0, 1.0]),
        ];
        let sys = System::new(nodes, 1.0).unwrap();
        let cfg = ProtocolConfig::default();
        let t = simulate_cycle(&sys, &build_dpp_schedule(&sys, &cfg).unwrap(), &cfg, 0).unwrap();
        let v = measure_toa(&t, NodeId(0), NodeId(1), PulseChoice::Average).unwrap();
        assert!(v.seconds.abs() < TOL);
    }

    #[test]
    fn toa_with_common_drift_errs_by_drift_times_distance() {
        let eps = 20e-6;
        let c = ClockModel::new(0.0, eps).unwrap();
        let t = fixture([ClockModel::IDEAL, c, c]);
        let v = measure_toa(&t, Y, Z, PulseChoice::Average).unwrap();
        let expected_error = (eps + eps) / 2.0 * 4.0;
        assert!((v.seconds - 4.0 - expected_error).abs() < 1e-12);
    }

    #[test]
    fn twr_rejects_passive() {
        let nodes = vec![
            Node::new(0, NodeRole::Passive, [0.0, 0.0]),
            Node::new(1, NodeRole::Bilateral, [1.0, 0.0]),
        ];
        let sys = System::new(nodes, 1.0).unwrap();
        let cfg = ProtocolConfig::default();
        let t = simulate_cycle(&sys, &build_dpp_schedule(&sys, &cfg).unwrap(), &cfg, 0).unwrap();
        assert!(matches!(
            extract_twr_spans(&t, NodeId(0), NodeId(1), Pulse::First),
            Err(Error::InvalidRoles(_))
        ));
    }

    #[test]
    fn direct_distance_fixture() {
        let t = ideal();
        let a = MuMeasurement {
            cycle: 0,
            key: MuKey::new(X, Y, Z),
            value: measure_mu(&t, MuKey::new(X, Y, Z), PulseChoice::Average)
                .unwrap()
                .value,
        };
        let b = MuMeasurement {
            cycle: 0,
            key: MuKey::new(Z, Y, X),
            value: measure_mu(&t, MuKey::new(Z, Y, X), PulseChoice::Average)
                .unwrap()
                .value,
        };
        assert!((a.value - 6.0).abs() < TOL);
        assert!((b.value - 4.0).abs() < TOL);
        assert!((direct_distance(&a, &b).unwrap() - 5.0).abs() < TOL);
        let toa = measure_toa(&t, X, Z, PulseChoice::Average).unwrap().seconds;
        assert!((direct_distance(&a, &b).unwrap() - toa).abs() < TOL);

        assert!(matches!(
            direct_distance(&a, &a),
            Err(Error::InvalidPairing(_))
        ));
        let later = MuMeasurement { cycle: 1, ..b };
        assert!(direct_distance(&a, &later).is_err());
    }

    #[test]
    fn mu_symmetry() {
        let s = mu_symmetry_check(&ideal(), X, Y, Z).unwrap();
        assert!(s.delta.abs() < TOL);

        let (ex, ey) = (20e-6, -20e-6);
        let t = fixture([
            ClockModel::new(0.0, ex).unwrap(),
            ClockModel::new(0.0, ey).unwrap(),
            ClockModel::new(0.0, 5e-6).unwrap(),
        ]);
        let s = mu_symmetry_check(&t, X, Y, Z).unwrap();
        assert!(s.delta.abs() > 1e-6);
        assert!(s.delta.abs() <= (ex - ey).abs() * s.mu_xzy);

        let c = ClockModel::new(0.0, 13e-6).unwrap();
        let s = mu_symmetry_check(&fixture([c, c, c]), X, Y, Z).unwrap();
        assert!(s.delta.abs() < 1e-12 * s.mu_xzy);
    }

    #[test]
    fn three_bilaterals_enumeration() {
        let set = full_cycle_measurements(&ideal(), &MeasureConfig::default());
        assert_eq!(set.toa.len(), 3);
        assert_eq!(set.mu.len(), 6);
        assert!(set.failures.is_empty());
        assert!(set.mu_only.is_empty());
        // receiver-pair TDoA via ToA distance matches geometry
        let t = set.tdoa_value(X, Z, Y, TdoaForm::ReceiverPair).unwrap();
        assert!((t - 1.0).abs() < TOL);
        let t = set.tdoa_value(Y, Z, X, TdoaForm::SourcePair).unwrap();
        assert!((t - 2.0).abs() < TOL);
        assert_eq!(set.direct.len(), 3);
    }

    #[test]
    fn all_passive_system_measures_nothing() {
        let nodes = (0..3)
            .map(|i| Node::new(i, NodeRole::Passive, [i as f64, 0.0]))
            .collect();
        let sys = System::new(nodes, 1.0).unwrap();
        let trace = CycleTrace::new(0, vec![], vec![], sys).unwrap();
        let set = full_cycle_measurements(&trace, &MeasureConfig::default());
        assert!(set.mu.is_empty() && set.toa.is_empty() && set.tdoa.is_empty());
    }

    #[test]
    fn unknown_distances_stay_mu_only() {
        let nodes = vec![
            Node::new(0, NodeRole::Passive, [0.0, 0.0]),
            Node::new(1, NodeRole::Active, [5.0, 0.0]),
            Node::new(2, NodeRole::Bilateral, [0.0, 5.0]),
        ];
        let sys = System::new(nodes, 1.0).unwrap();
        let traces = simulate(&sys, &ProtocolConfig::default(), Execution::Sequential).unwrap();
        let set = full_cycle_measurements(&traces[0], &MeasureConfig::default());
        assert_eq!(set.mu.len(), 1);
        assert!(set.tdoa.is_empty());
        assert_eq!(
            set.mu_only,
            vec![MuKey::new(NodeId(0), NodeId(1), NodeId(2))]
        );
    }

    #[test]
    fn pulse_choice_invariance() {
        let t = ideal();
        let k = MuKey::new(X, Y, Z);
        let a = measure_mu(&t, k, PulseChoice::Single(Pulse::First))
            .unwrap()
            .value;
        let b = measure_mu(&t, k, PulseChoice::Single(Pulse::Second))
            .unwrap()
            .value;
        assert!((a - b).abs() < TOL);
        let a = measure_toa(&t, Y, Z, PulseChoice::Single(Pulse::First))
            .unwrap()
            .seconds;
        let b = measure_toa(&t, Y, Z, PulseChoice::Single(Pulse::Second))
            .unwrap()
            .seconds;
        assert!((a - b).abs() < TOL);
    }

    #[test]
    fn role_violations() {
        let nodes = vec![
            Node::new(0, NodeRole::Passive, [0.0, 0.0]),
            Node::new(1, NodeRole::Active, [5.0, 0.0]),
            Node::new(2, NodeRole::Bilateral, [0.0, 5.0]),
        ];
        let sys = System::new(nodes, 1.0).unwrap();
        let traces = simulate(&sys, &ProtocolConfig::default(), Execution::Sequential).unwrap();
        let t = &traces[0];
        let (p, a, b) = (NodeId(0), NodeId(1), NodeId(2));
        assert!(matches!(
            extract_tdoa_spans(t, a, p, b, Pulse::First),
            Err(Error::InvalidRoles(_))
        ));
        assert!(matches!(
            extract_tdoa_spans(t, p, a, a, Pulse::First),
            Err(Error::InvalidRoles(_))
        ));
        assert!(derive_djkm_view(t, p, b, b, 0.0).is_err());
        assert!(derive_dpw_view(t, p, b, b, 0.0).is_err());
    }

    #[test]
    fn canonical_keys_three_bilaterals_collapse() {
        let t = ideal();
        let keys = admissible_triples(t.system());
        assert_eq!(canonical_mu_keys(t.system(), &keys).len(), 1);
    }
}
