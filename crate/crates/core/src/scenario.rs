//! JSON scenario files: nodes, protocol settings and noise settings.
//!
//! ```json
//! {
//!   "dimensions": 2,
//!   "nodes": [
//!     { "id": 1, "role": "bilateral", "position": [0, 0], "known_position": true,
//!       "clock": { "offset_s": 0.25, "drift_ppm": -12 } },
//!     { "id": 2, "role": "passive", "position": [4, 3] }
//!   ],
//!   "protocol": { "signal_speed_mps": 299792458, "cycles": 1, "p": "average", "q": "average" },
//!   "noise": { "timestamp_jitter_sd_s": 0, "seed": 7 }
//! }
//! ```
//!
//! Unknown fields are rejected at every level. Drift is given in ppm and
//! stored as a fraction.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::{MeasureConfig, PulseChoice};
use crate::model::{
    ClockModel, Node, NodeId, NodeRole, Position, System, DEFAULT_MAX_DRIFT, SPEED_OF_LIGHT,
};
use crate::protocol::{ProtocolConfig, Pulse};

/// Name of the environment variable that overrides the scenario seed.
pub const SEED_ENV: &str = "DPP_SIM_SEED";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid value for `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PulseSetting {
    First,
    Second,
    #[default]
    Average,
}

impl From<PulseSetting> for PulseChoice {
    fn from(p: PulseSetting) -> Self {
        match p {
            PulseSetting::First => PulseChoice::Single(Pulse::First),
            PulseSetting::Second => PulseChoice::Single(Pulse::Second),
            PulseSetting::Average => PulseChoice::Average,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockSpec {
    #[serde(default)]
    pub offset_s: f64,
    #[serde(default)]
    pub drift_ppm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: u32,
    pub role: NodeRole,
    pub position: Vec<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub known_position: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clock: Option<ClockSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal_speed_mps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inter_pulse_gap_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_gap_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycles: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<PulseSetting>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<PulseSetting>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_jitter_sd_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub dimensions: usize,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub protocol: ProtocolSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
}

impl Scenario {
    /// Parses and validates with the default ±20 ppm drift limit.
    pub fn from_json_str(text: &str) -> Result<Self, ScenarioError> {
        Self::from_json_str_with(text, DEFAULT_MAX_DRIFT)
    }

    pub fn from_json_str_with(text: &str, max_drift: f64) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            message: e
                .to_string()
                .split(" at line ")
                .next()
                .unwrap_or_default()
                .to_string(),
        })?;
        scenario.validate(max_drift)?;
        Ok(scenario)
    }

    pub fn load(path: &Path, max_drift: f64) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json_str_with(&text, max_drift)
    }

    /// Field-level checks; also builds the system once to catch anything
    /// the model itself rejects.
    pub fn validate(&self, max_drift: f64) -> Result<(), ScenarioError> {
        if !(2..=3).contains(&self.dimensions) {
            return Err(invalid(
                "dimensions",
                format!("must be 2 or 3, got {}", self.dimensions),
            ));
        }
        if self.nodes.is_empty() {
            return Err(invalid("nodes", "at least one node is required"));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.position.len() != self.dimensions {
                return Err(invalid(
                    format!("nodes[{i}].position"),
                    format!(
                        "expected {} coordinates, got {}",
                        self.dimensions,
                        n.position.len()
                    ),
                ));
            }
            if n.position.iter().any(|c| !c.is_finite()) {
                return Err(invalid(
                    format!("nodes[{i}].position"),
                    "coordinates must be finite",
                ));
            }
            if let Some(c) = n.clock {
                if !c.offset_s.is_finite() {
                    return Err(invalid(
                        format!("nodes[{i}].clock.offset_s"),
                        "must be finite",
                    ));
                }
                if !c.drift_ppm.is_finite() || c.drift_ppm.abs() * 1e-6 > max_drift * (1.0 + 1e-12)
                {
                    return Err(invalid(
                        format!("nodes[{i}].clock.drift_ppm"),
                        format!(
                            "{} ppm exceeds the ±{} ppm limit",
                            c.drift_ppm,
                            max_drift * 1e6
                        ),
                    ));
                }
            }
        }
        let p = &self.protocol;
        let positive = |field: &str, v: Option<f64>| match v {
            Some(v) if !(v.is_finite() && v > 0.0) => {
                Err(invalid(field, format!("must be positive, got {v}")))
            }
            _ => Ok(()),
        };
        positive("protocol.signal_speed_mps", p.signal_speed_mps)?;
        positive("protocol.inter_pulse_gap_s", p.inter_pulse_gap_s)?;
        positive("protocol.turn_gap_s", p.turn_gap_s)?;
        if p.cycles == Some(0) {
            return Err(invalid("protocol.cycles", "must be at least 1"));
        }
        if let Some(j) = self.noise.timestamp_jitter_sd_s {
            if !(j.is_finite() && j >= 0.0) {
                return Err(invalid(
                    "noise.timestamp_jitter_sd_s",
                    format!("must be >= 0, got {j}"),
                ));
            }
        }
        self.system()?;
        Ok(())
    }

    pub fn signal_speed(&self) -> f64 {
        self.protocol.signal_speed_mps.unwrap_or(SPEED_OF_LIGHT)
    }

    pub fn system(&self) -> Result<System, ScenarioError> {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            let position = Position::new(n.position.clone())
                .map_err(|e| invalid(format!("nodes[{i}].position"), e.to_string()))?;
            let clock = match n.clock {
                Some(c) => ClockModel::new(c.offset_s, c.drift_ppm * 1e-6)
                    .map_err(|e| invalid(format!("nodes[{i}].clock"), e.to_string()))?,
                None => ClockModel::IDEAL,
            };
            nodes.push(Node {
                id: NodeId(n.id),
                role: n.role,
                position,
                known_position: n.known_position,
                clock,
            });
        }
        System::new(nodes, self.signal_speed()).map_err(|e| invalid("nodes", e.to_string()))
    }

    pub fn seed(&self) -> u64 {
        self.noise.seed.unwrap_or(0)
    }

    /// `cli` wins over `env`, which wins over the scenario's own seed.
    pub fn resolve_seed(&self, cli: Option<u64>, env: Option<&str>) -> Result<u64, ScenarioError> {
        if let Some(s) = cli {
            return Ok(s);
        }
        match env.map(str::trim).filter(|s| !s.is_empty()) {
            Some(text) => text
                .parse()
                .map_err(|_| invalid(SEED_ENV, format!("`{text}` is not an unsigned integer"))),
            None => Ok(self.seed()),
        }
    }

    pub fn protocol_config(&self, seed: u64) -> ProtocolConfig {
        let d = ProtocolConfig::default();
        ProtocolConfig {
            inter_pulse_gap: self.protocol.inter_pulse_gap_s.unwrap_or(d.inter_pulse_gap),
            turn_gap: self.protocol.turn_gap_s.unwrap_or(d.turn_gap),
            cycles: self.protocol.cycles.unwrap_or(d.cycles),
            timestamp_jitter_sd: self.noise.timestamp_jitter_sd_s.unwrap_or(0.0),
            rng_seed: seed,
        }
    }

    pub fn measure_config(&self) -> MeasureConfig {
        MeasureConfig {
            p: self.protocol.p.unwrap_or_default().into(),
            q: self.protocol.q.unwrap_or_default().into(),
            ..MeasureConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"{
        "dimensions": 2,
        "nodes": [
            {"id": 1, "role": "bilateral", "position": [0, 0], "known_position": true,
             "clock": {"offset_s": 0.5, "drift_ppm": -12.5}},
            {"id": 2, "role": "bilateral", "position": [10, 0]},
            {"id": 3, "role": "passive", "position": [4, 3]}
        ],
        "protocol": {"signal_speed_mps": 3e8, "cycles": 2, "q": "first"},
        "noise": {"seed": 11}
    }"#;

    #[test]
    fn parses_and_converts_ppm() {
        let s = Scenario::from_json_str(SMALL).unwrap();
        let sys = s.system().unwrap();
        assert_eq!(sys.nodes().len(), 3);
        assert_eq!(sys.signal_speed(), 3e8);
        let c = sys.node(NodeId(1)).unwrap().clock;
        assert_eq!(c.offset, 0.5);
        assert!((c.drift + 12.5e-6).abs() < 1e-18);
        assert!(sys.node(NodeId(1)).unwrap().known_position);
        assert!(!sys.node(NodeId(2)).unwrap().known_position);
        let cfg = s.protocol_config(s.seed());
        assert_eq!(cfg.cycles, 2);
        assert_eq!(cfg.rng_seed, 11);
        assert_eq!(
            cfg.inter_pulse_gap,
            ProtocolConfig::default().inter_pulse_gap
        );
        assert_eq!(s.measure_config().q, PulseChoice::Single(Pulse::First));
        assert_eq!(s.measure_config().p, PulseChoice::Average);
    }

    #[test]
    fn round_trips_through_json() {
        let s = Scenario::from_json_str(SMALL).unwrap();
        let text = serde_json::to_string_pretty(&s).unwrap();
        assert_eq!(Scenario::from_json_str(&text).unwrap(), s);
    }

    #[test]
    fn empty_input_is_a_parse_error() {
        let e = Scenario::from_json_str("").unwrap_err();
        assert!(matches!(e, ScenarioError::Parse { line: 1, .. }), "{e}");
    }

    #[test]
    fn unknown_field_reports_its_location() {
        let text = "{\n  \"dimensions\": 2,\n  \"nodes\": [],\n  \"colour\": 1\n}";
        match Scenario::from_json_str(text).unwrap_err() {
            ScenarioError::Parse { line, message, .. } => {
                assert_eq!(line, 4);
                assert!(message.contains("colour"), "{message}");
            }
            other => panic!("{other}"),
        }
        let nested = SMALL.replace("\"offset_s\"", "\"ofset_s\"");
        assert!(Scenario::from_json_str(&nested)
            .unwrap_err()
            .to_string()
            .contains("ofset_s"));
    }

    #[test]
    fn field_errors_name_the_field() {
        let cases = [
            (SMALL.replace("[4, 3]", "[4, 3, 1]"), "nodes[2].position"),
            (SMALL.replace("-12.5", "25"), "nodes[0].clock.drift_ppm"),
            (
                SMALL.replace("\"cycles\": 2", "\"cycles\": 0"),
                "protocol.cycles",
            ),
            (SMALL.replace("3e8", "-1"), "protocol.signal_speed_mps"),
            (SMALL.replace("\"id\": 2", "\"id\": 1"), "nodes"),
            (
                SMALL.replace("\"dimensions\": 2", "\"dimensions\": 4"),
                "dimensions",
            ),
        ];
        for (text, field) in cases {
            match Scenario::from_json_str(&text).unwrap_err() {
                ScenarioError::Invalid { field: f, .. } => assert_eq!(f, field),
                other => panic!("{field}: {other}"),
            }
        }
    }

    #[test]
    fn drift_limit_is_adjustable() {
        let text = SMALL.replace("-12.5", "25");
        assert!(Scenario::from_json_str_with(&text, 30e-6).is_ok());
        assert!(Scenario::from_json_str_with(&SMALL.replace("-12.5", "20"), 20e-6).is_ok());
    }

    #[test]
    fn seed_priority() {
        let s = Scenario::from_json_str(SMALL).unwrap();
        assert_eq!(s.resolve_seed(None, None).unwrap(), 11);
        assert_eq!(s.resolve_seed(None, Some("42")).unwrap(), 42);
        assert_eq!(s.resolve_seed(Some(5), Some("42")).unwrap(), 5);
        assert_eq!(s.resolve_seed(None, Some("  ")).unwrap(), 11);
        assert!(s.resolve_seed(None, Some("x")).is_err());
    }
}
