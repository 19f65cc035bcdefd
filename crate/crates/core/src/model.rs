//! Nodes, roles, imperfect clocks and the ground-truth geometry used as oracles.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Radio propagation speed in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Worst-case crystal drift assumed throughout, dimensionless (20 ppm).
pub const DEFAULT_MAX_DRIFT: f64 = 20e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Unordered node pair, stored smaller id first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodePair(NodeId, NodeId);

impl NodePair {
    pub fn new(a: NodeId, b: NodeId) -> Self {
        if a <= b {
            Self(a, b)
        } else {
            Self(b, a)
        }
    }

    pub fn first(&self) -> NodeId {
        self.0
    }

    pub fn second(&self) -> NodeId {
        self.1
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.0 == id || self.1 == id
    }

    /// The member that is not `id`.
    pub fn other(&self, id: NodeId) -> Option<NodeId> {
        if self.0 == id {
            Some(self.1)
        } else if self.1 == id {
            Some(self.0)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    /// Receive only.
    Passive,
    /// Transmit only.
    Active,
    /// Transmit and receive.
    Bilateral,
}

impl NodeRole {
    pub fn can_transmit(self) -> bool {
        matches!(self, NodeRole::Active | NodeRole::Bilateral)
    }

    pub fn can_receive(self) -> bool {
        matches!(self, NodeRole::Passive | NodeRole::Bilateral)
    }
}

impl fmt::Display for NodeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeRole::Passive => "passive",
            NodeRole::Active => "active",
            NodeRole::Bilateral => "bilateral",
        })
    }
}

/// Affine oscillator model: a node reading `offset + (1 + drift) * t` at true time `t`.
///
/// Drift is held constant for the duration of a cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    /// Local reading at true time zero, seconds.
    pub offset: f64,
    /// Fractional frequency error, e.g. `20e-6` for 20 ppm.
    pub drift: f64,
}

impl ClockModel {
    pub const IDEAL: ClockModel = ClockModel {
        offset: 0.0,
        drift: 0.0,
    };

    pub fn new(offset: f64, drift: f64) -> Result<Self> {
        if !offset.is_finite() || !drift.is_finite() {
            return Err(Error::InvalidInput(format!(
                "clock offset {offset} / drift {drift} must be finite"
            )));
        }
        if drift.abs() >= 1.0 {
            return Err(Error::InvalidInput(format!(
                "clock drift {drift} would make local time non-monotonic"
            )));
        }
        Ok(Self { offset, drift })
    }

    /// Rate factor `1 + drift`.
    pub fn scale(&self) -> f64 {
        1.0 + self.drift
    }

    pub fn local_time(&self, t_true: f64) -> f64 {
        local_time(self, t_true)
    }
}

impl Default for ClockModel {
    fn default() -> Self {
        Self::IDEAL
    }
}

pub fn local_time(clock: &ClockModel, t_true: f64) -> f64 {
    clock.offset + clock.scale() * t_true
}

/// Cartesian coordinates in meters, 2D or 3D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Position(Vec<f64>);

impl Position {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if !(2..=3).contains(&coords.len()) {
            return Err(Error::InvalidInput(format!(
                "positions must be 2D or 3D, got {} components",
                coords.len()
            )));
        }
        Ok(Self(coords))
    }

    pub fn xy(x: f64, y: f64) -> Self {
        Self(vec![x, y])
    }

    pub fn xyz(x: f64, y: f64, z: f64) -> Self {
        Self(vec![x, y, z])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    /// Euclidean distance in meters.
    pub fn distance(&self, other: &Position) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::InvalidInput(format!(
                "dimension mismatch: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        if !self.is_finite() || !other.is_finite() {
            return Err(Error::InvalidInput("non-finite position".into()));
        }
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

impl From<[f64; 2]> for Position {
    fn from(c: [f64; 2]) -> Self {
        Self(c.to_vec())
    }
}

impl From<[f64; 3]> for Position {
    fn from(c: [f64; 3]) -> Self {
        Self(c.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub role: NodeRole,
    pub position: Position,
    /// Position is configured (infrastructure) rather than estimated.
    pub known_position: bool,
    pub clock: ClockModel,
}

impl Node {
    pub fn new(id: u32, role: NodeRole, position: impl Into<Position>) -> Self {
        Self {
            id: NodeId(id),
            role,
            position: position.into(),
            known_position: false,
            clock: ClockModel::IDEAL,
        }
    }

    pub fn known(mut self) -> Self {
        self.known_position = true;
        self
    }

    pub fn with_clock(mut self, clock: ClockModel) -> Self {
        self.clock = clock;
        self
    }
}

/// Node set plus the signal speed shared by every link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct System {
    nodes: Vec<Node>,
    signal_speed: f64,
}

impl System {
    pub fn new(nodes: Vec<Node>, signal_speed: f64) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidInput("system needs at least one node".into()));
        }
        if !(signal_speed.is_finite() && signal_speed > 0.0) {
            return Err(Error::InvalidInput(format!(
                "signal speed must be positive and finite, got {signal_speed}"
            )));
        }
        let dim = nodes[0].position.dim();
        let mut seen = BTreeSet::new();
        for node in &nodes {
            if !seen.insert(node.id) {
                return Err(Error::InvalidInput(format!(
                    "duplicate node id {}",
                    node.id
                )));
            }
            if node.position.dim() != dim {
                return Err(Error::InvalidInput(format!(
                    "node {} is {}D in a {}D system",
                    node.id,
                    node.position.dim(),
                    dim
                )));
            }
            if !node.position.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "node {} has a non-finite position",
                    node.id
                )));
            }
            ClockModel::new(node.clock.offset, node.clock.drift)?;
        }
        Ok(Self {
            nodes,
            signal_speed,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn signal_speed(&self) -> f64 {
        self.signal_speed
    }

    pub fn dim(&self) -> usize {
        self.nodes[0].position.dim()
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn try_node(&self, id: NodeId) -> Result<&Node> {
        self.node(id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown node id {id}")))
    }

    /// List position of a node; defines schedule and canonical ordering.
    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn with_role(&self, role: NodeRole) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(move |n| n.role == role)
    }

    pub fn transmitters(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.role.can_transmit())
    }

    pub fn receivers(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.role.can_receive())
    }

    /// `(passive, active, bilateral)` id sets.
    pub fn partition(&self) -> (Vec<NodeId>, Vec<NodeId>, Vec<NodeId>) {
        let ids = |r| self.with_role(r).map(|n| n.id).collect::<Vec<_>>();
        (
            ids(NodeRole::Passive),
            ids(NodeRole::Active),
            ids(NodeRole::Bilateral),
        )
    }

    /// Same geometry and roles with every clock replaced.
    pub fn with_clocks(&self, clocks: &[ClockModel]) -> Result<Self> {
        if clocks.len() != self.nodes.len() {
            return Err(Error::InvalidInput(format!(
                "{} clocks for {} nodes",
                clocks.len(),
                self.nodes.len()
            )));
        }
        let nodes = self
            .nodes
            .iter()
            .zip(clocks)
            .map(|(n, c)| Node {
                clock: *c,
                ..n.clone()
            })
            .collect();
        System::new(nodes, self.signal_speed)
    }

    /// Largest absolute clock drift in the system.
    pub fn max_abs_drift(&self) -> f64 {
        self.nodes
            .iter()
            .map(|n| n.clock.drift.abs())
            .fold(0.0, f64::max)
    }

    pub fn tof(&self, a: NodeId, b: NodeId) -> Result<f64> {
        tof_distance(self.try_node(a)?, self.try_node(b)?, self.signal_speed)
    }

    pub fn true_tdoa(&self, x: NodeId, source: NodeId, z: NodeId) -> Result<f64> {
        true_tdoa(
            self.try_node(x)?,
            self.try_node(source)?,
            self.try_node(z)?,
            self.signal_speed,
        )
    }
}

/// Time of flight between two nodes, seconds.
pub fn tof_distance(a: &Node, b: &Node, speed: f64) -> Result<f64> {
    if !(speed.is_finite() && speed > 0.0) {
        return Err(Error::InvalidInput(format!("invalid signal speed {speed}")));
    }
    Ok(a.position.distance(&b.position)? / speed)
}

/// Arrival-time difference of source `y` at receivers `x` and `z`: `d(y,z) - d(x,y)`.
pub fn true_tdoa(x: &Node, source_y: &Node, z: &Node, speed: f64) -> Result<f64> {
    if x.id == source_y.id || x.id == z.id || source_y.id == z.id {
        return Err(Error::InvalidInput(format!(
            "TDoA needs three distinct nodes, got ({}, {}, {})",
            x.id, source_y.id, z.id
        )));
    }
    Ok(tof_distance(source_y, z, speed)? - tof_distance(x, source_y, speed)?)
}
