use thiserror::Error;

use crate::model::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("system has no transmitting node, schedule would be empty")]
    EmptySchedule,

    #[error("simulation failed: {0}")]
    Simulation(String),

    #[error(
        "trace has no {what} record for receiver {receiver:?}, sender {sender}, pulse {pulse}"
    )]
    IncompleteTrace {
        what: &'static str,
        receiver: Option<NodeId>,
        sender: NodeId,
        pulse: u8,
    },

    #[error("invalid roles: {0}")]
    InvalidRoles(String),

    #[error("degenerate schedule: span denominator {denominator:e} s is below the guard")]
    DegenerateSchedule { denominator: f64 },

    #[error("invalid pairing: {0}")]
    InvalidPairing(String),

    #[error("out of domain: {0}")]
    OutOfDomain(String),

    #[error("insufficient anchors: need {needed}, got {got}")]
    InsufficientAnchors { needed: usize, got: usize },

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("distance set is not metrically feasible: {0}")]
    Infeasible(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
}
