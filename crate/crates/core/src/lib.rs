//! Simulation, measurement and positioning for double-pulse time-of-flight ranging.
//!
//! Every Active or Bilateral node emits two pulses per cycle; every Passive
//! or Bilateral node timestamps what it hears on its own free-running clock.
//! From those timestamps alone the crate derives TDoA values for any
//! receiver/source/Bilateral triple and ToA distances for any Bilateral pair,
//! without synchronising clocks.
//!
//! - [`model`]: nodes, roles, affine clocks, ground-truth geometry
//! - [`protocol`]: schedules, cycle simulation, channel-usage counts
//! - [`measure`]: spans, μ, TDoA, ToA and direct distances
//! - [`bounds`]: worst-case drift error bounds and Monte-Carlo validation
//! - [`solve`]: trilateration, multilateration, relative embedding
//! - [`scenario`] / [`export`]: file formats used by the `dpp` binary
//!
//! ```
//! use dpp::measure::{full_cycle_measurements, MeasureConfig};
//! use dpp::protocol::simulate;
//! use dpp::solve::{solve_measurements, SolverOptions};
//! use dpp::{Execution, Node, NodeRole, ProtocolConfig, System};
//!
//! let sys = System::new(
//!     vec![
//!         Node::new(1, NodeRole::Bilateral, [0.0, 0.0]).known(),
//!         Node::new(2, NodeRole::Bilateral, [10.0, 0.0]).known(),
//!         Node::new(3, NodeRole::Bilateral, [5.0, 9.0]).known(),
//!         Node::new(4, NodeRole::Passive, [4.0, 3.0]),
//!     ],
//!     dpp::model::SPEED_OF_LIGHT,
//! )?;
//! let trace = simulate(&sys, &ProtocolConfig::default(), Execution::default())?.remove(0);
//! let ms = full_cycle_measurements(&trace, &MeasureConfig::default());
//! let solution = solve_measurements(&ms, &sys, &SolverOptions::default())?;
//! let p = solution.estimates[0].position.coords();
//! assert!((p[0] - 4.0).abs() < 1e-6 && (p[1] - 3.0).abs() < 1e-6);
//! # Ok::<(), dpp::Error>(())
//! ```

pub mod bounds;
pub mod error;
pub mod export;
pub mod measure;
pub mod model;
pub mod par;
pub mod protocol;
pub mod scenario;
pub mod solve;

pub use error::{Error, Result};
pub use model::{ClockModel, Node, NodeId, NodePair, NodeRole, Position, System};
pub use par::Execution;
pub use protocol::{CycleTrace, ProtocolConfig, Pulse};
