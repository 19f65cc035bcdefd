//! Worst-case clock-drift error bounds and their Monte-Carlo validation.
//!
//! The analytic bounds are first order in the drift. The simulator applies the
//! exact affine clock model, so comparisons allow a second-order slack
//! `κ = ε_max² · cycle_span`, plus a fixed [`ROUNDOFF_FLOOR`] for the f64
//! resolution of the local timestamps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{full_cycle_measurements, DistancePolicy, MeasureConfig, TdoaForm};
use crate::model::{ClockModel, NodeId, System};
use crate::par::{self, Execution};
use crate::protocol::{build_dpp_schedule, simulate_cycle, ProtocolConfig};

/// `(ε_x + ε_z) / 2 · μ`
pub fn mu_error_bound(eps_x: f64, eps_z: f64, mu_true: f64) -> f64 {
    0.5 * (eps_x + eps_z) * mu_true
}

/// `(ε_x + ε_z) · d(x,z)`
pub fn tdoa_error_bound(eps_x: f64, eps_z: f64, d_xz: f64) -> f64 {
    (eps_x + eps_z) * d_xz
}

/// `(ε_x + ε_z) / 2 · d(x,z)`, the asymmetric double-sided TWR error.
pub fn toa_error_bound(eps_x: f64, eps_z: f64, d_xz: f64) -> f64 {
    0.5 * (eps_x + eps_z) * d_xz
}

/// Inputs of the DJKM worst-case TDoA error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DjkmErrorParams {
    /// Anchor response delay, seconds.
    pub response_delay: f64,
    pub eps_tag: f64,
    pub eps_anchor: f64,
}

impl DjkmErrorParams {
    pub fn new(response_delay: f64, eps_tag: f64, eps_anchor: f64) -> Result<Self> {
        if !(response_delay.is_finite() && response_delay > 0.0) {
            return Err(Error::InvalidInput(format!(
                "response delay must be positive, got {response_delay}"
            )));
        }
        Ok(Self {
            response_delay,
            eps_tag,
            eps_anchor,
        })
    }
}

/// `D_B · (ε_T - ε_B)`
pub fn djkm_error_estimate(params: &DjkmErrorParams) -> f64 {
    params.response_delay * (params.eps_tag - params.eps_anchor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    Mu,
    Tdoa,
    Toa,
}

impl Quantity {
    pub const ALL: [Quantity; 3] = [Quantity::Mu, Quantity::Tdoa, Quantity::Toa];

    pub fn label(self) -> &'static str {
        match self {
            Quantity::Mu => "mu",
            Quantity::Tdoa => "tdoa",
            Quantity::Toa => "toa",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub trials: usize,
    /// Drifts are drawn uniformly from `[-max_drift, max_drift]`.
    pub max_drift: f64,
    /// Offsets are drawn uniformly from `[-max_offset, max_offset]` seconds.
    pub max_offset: f64,
    pub seed: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            max_drift: crate::model::DEFAULT_MAX_DRIFT,
            max_offset: 1e-3,
            seed: 0,
        }
    }
}

/// One measured value compared with its bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub trial: usize,
    pub seed: u64,
    pub quantity: Quantity,
    /// Receiver or pair members; `source` is unset for ToA.
    pub a: NodeId,
    pub b: NodeId,
    pub source: Option<NodeId>,
    pub error: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundReport {
    pub quantity: Quantity,
    /// Largest per-sample analytic bound.
    pub analytic_bound: f64,
    pub observed_max_abs_error: f64,
    /// Largest `|error| / bound` over samples with a non-zero bound.
    pub worst_ratio: f64,
    pub trials: usize,
    pub samples: usize,
    pub slack_used: f64,
    pub passed: bool,
    pub failing_seed: Option<u64>,
}

/// Float resolution of span arithmetic on millisecond-scale timestamps, seconds.
pub const ROUNDOFF_FLOOR: f64 = 1e-15;

/// `ε_max² ·` (schedule span plus the longest flight time).
pub fn second_order_slack(system: &System, cfg: &ProtocolConfig, max_drift: f64) -> Result<f64> {
    let schedule = build_dpp_schedule(system, cfg)?;
    let mut longest: f64 = 0.0;
    for a in system.nodes() {
        for b in system.nodes() {
            longest = longest.max(system.tof(a.id, b.id)?);
        }
    }
    Ok(max_drift * max_drift * (schedule.span() + longest))
}

fn random_clocks(n: usize, mc: &MonteCarloConfig, seed: u64) -> Result<Vec<ClockModel>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let drift = if mc.max_drift > 0.0 {
                rng.random_range(-mc.max_drift..=mc.max_drift)
            } else {
                0.0
            };
            let offset = if mc.max_offset > 0.0 {
                rng.random_range(-mc.max_offset..=mc.max_offset)
            } else {
                0.0
            };
            ClockModel::new(offset, drift)
        })
        .collect()
}

/// `(x, z, y, measured - truth, bound)` in seconds; `y` is empty for ToA.
pub type CycleError = (NodeId, NodeId, Option<NodeId>, f64, f64);

/// Errors of every value of `quantity` in one cycle of `system` (its clocks as given).
pub fn cycle_errors(
    system: &System,
    cfg: &ProtocolConfig,
    quantity: Quantity,
) -> Result<Vec<CycleError>> {
    let schedule = build_dpp_schedule(system, cfg)?;
    let trace = simulate_cycle(system, &schedule, cfg, 0)?;
    let set = full_cycle_measurements(
        &trace,
        &MeasureConfig {
            policy: DistancePolicy::GroundTruth,
            ..Default::default()
        },
    );
    if let Some(f) = set.failures.first() {
        return Err(Error::Simulation(format!("{}: {}", f.what, f.error)));
    }
    let eps = |id: NodeId| system.try_node(id).map(|n| n.clock.drift.abs());
    let mut out = Vec::new();
    match quantity {
        Quantity::Mu => {
            for (k, v) in &set.mu {
                let truth = system.tof(k.y, k.z)? - system.tof(k.x, k.y)? + system.tof(k.x, k.z)?;
                let bound = mu_error_bound(eps(k.x)?, eps(k.z)?, truth);
                out.push((k.x, k.z, Some(k.y), v.value - truth, bound));
            }
        }
        Quantity::Tdoa => {
            for e in set.tdoa.iter().filter(|e| e.form == TdoaForm::ReceiverPair) {
                let truth = system.true_tdoa(e.a, e.source, e.b)?;
                let bound = tdoa_error_bound(eps(e.a)?, eps(e.b)?, system.tof(e.a, e.b)?);
                out.push((e.a, e.b, Some(e.source), e.value - truth, bound));
            }
        }
        Quantity::Toa => {
            for (pair, v) in &set.toa {
                let (a, b) = (pair.first(), pair.second());
                let truth = system.tof(a, b)?;
                let bound = toa_error_bound(eps(a)?, eps(b)?, truth);
                out.push((a, b, None, v.seconds - truth, bound));
            }
        }
    }
    Ok(out)
}

/// Per-sample errors over `mc.trials` random clock draws.
pub fn empirical_error_samples(
    system: &System,
    cfg: &ProtocolConfig,
    mc: &MonteCarloConfig,
    quantity: Quantity,
    mode: Execution,
) -> Result<Vec<ErrorSample>> {
    if mc.trials == 0 {
        return Err(Error::InvalidInput("need at least one trial".into()));
    }
    if cfg.timestamp_jitter_sd != 0.0 {
        return Err(Error::InvalidInput(
            "drift bounds are validated with timestamp jitter disabled".into(),
        ));
    }
    let per_trial = par::map_indexed(mc.trials, mode, |trial| -> Result<Vec<ErrorSample>> {
        let seed = par::derive_seed(mc.seed, trial as u64);
        let clocks = random_clocks(system.nodes().len(), mc, seed)?;
        let drifted = system.with_clocks(&clocks)?;
        Ok(cycle_errors(&drifted, cfg, quantity)?
            .into_iter()
            .map(|(a, b, source, error, bound)| ErrorSample {
                trial,
                seed,
                quantity,
                a,
                b,
                source,
                error,
                bound,
            })
            .collect())
    });
    let mut samples = Vec::new();
    for t in per_trial {
        samples.extend(t?);
    }
    Ok(samples)
}

/// Summarises samples against `bound + slack`.
pub fn summarize(
    quantity: Quantity,
    trials: usize,
    samples: &[ErrorSample],
    slack: f64,
) -> ErrorBoundReport {
    let mut report = ErrorBoundReport {
        quantity,
        analytic_bound: 0.0,
        observed_max_abs_error: 0.0,
        worst_ratio: 0.0,
        trials,
        samples: samples.len(),
        slack_used: slack,
        passed: true,
        failing_seed: None,
    };
    for s in samples.iter().filter(|s| s.quantity == quantity) {
        report.analytic_bound = report.analytic_bound.max(s.bound);
        report.observed_max_abs_error = report.observed_max_abs_error.max(s.error.abs());
        if s.bound > 0.0 {
            report.worst_ratio = report.worst_ratio.max(s.error.abs() / s.bound);
        }
        if !(s.error.abs() <= s.bound + slack) && report.passed {
            report.passed = false;
            report.failing_seed = Some(s.seed);
        }
    }
    report
}

/// Monte-Carlo check of one quantity's drift bound over random drifts and offsets.
pub fn empirical_error_report(
    system: &System,
    cfg: &ProtocolConfig,
    mc: &MonteCarloConfig,
    quantity: Quantity,
) -> Result<ErrorBoundReport> {
    empirical_error_report_with(system, cfg, mc, quantity, Execution::default())
}

pub fn empirical_error_report_with(
    system: &System,
    cfg: &ProtocolConfig,
    mc: &MonteCarloConfig,
    quantity: Quantity,
    mode: Execution,
) -> Result<ErrorBoundReport> {
    let samples = empirical_error_samples(system, cfg, mc, quantity, mode)?;
    let slack = second_order_slack(system, cfg, mc.max_drift)? + ROUNDOFF_FLOOR;
    Ok(summarize(quantity, mc.trials, &samples, slack))
}

/// Smallest `error / bound` over all Bilateral pairs when every clock runs at `+eps`.
///
/// Values near one show the ToA bound is attained, not merely respected.
pub fn toa_attainment(system: &System, cfg: &ProtocolConfig, eps: f64) -> Result<f64> {
    let clocks: Vec<ClockModel> = system
        .nodes()
        .iter()
        .map(|n| ClockModel::new(n.clock.offset, eps))
        .collect::<Result<_>>()?;
    let drifted = system.with_clocks(&clocks)?;
    let errors = cycle_errors(&drifted, cfg, Quantity::Toa)?;
    if errors.is_empty() {
        return Err(Error::InvalidRoles("no Bilateral pair to range".into()));
    }
    Ok(errors
        .iter()
        .map(|(_, _, _, e, b)| e / b)
        .fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Node, NodeRole, SPEED_OF_LIGHT};

    fn room() -> System {
        let nodes = vec![
            Node::new(0, NodeRole::Passive, [1.0, 2.0]),
            Node::new(1, NodeRole::Active, [9.0, 1.0]),
            Node::new(2, NodeRole::Bilateral, [0.0, 0.0]),
            Node::new(3, NodeRole::Bilateral, [10.0, 0.0]),
            Node::new(4, NodeRole::Bilateral, [5.0, 9.0]),
        ];
        System::new(nodes, SPEED_OF_LIGHT).unwrap()
    }

    #[test]
    fn formula_values() {
        assert_eq!(mu_error_bound(0.0, 0.0, 6.0), 0.0);
        assert!((mu_error_bound(20e-6, 20e-6, 6.0) - 1.2e-4).abs() < 1e-18);
        assert_eq!(mu_error_bound(20e-6, -20e-6, 6.0), 0.0);

        let d = 5.0 / SPEED_OF_LIGHT;
        assert!((tdoa_error_bound(20e-6, 20e-6, d) - 6.6713e-13).abs() < 1e-16);
        assert_eq!(tdoa_error_bound(20e-6, 20e-6, 0.0), 0.0);
        assert!(tdoa_error_bound(20e-6, 20e-6, 2.0 * d) > tdoa_error_bound(20e-6, 20e-6, d));

        assert!((toa_error_bound(20e-6, 20e-6, d) - 3.3356e-13).abs() < 1e-16);
        assert_eq!(toa_error_bound(10e-6, -10e-6, d), 0.0);
        assert_eq!(
            2.0 * toa_error_bound(3e-6, 7e-6, d),
            tdoa_error_bound(3e-6, 7e-6, d)
        );
    }

    #[test]
    fn djkm_estimate() {
        let p = DjkmErrorParams::new(1e-3, 20e-6, -20e-6).unwrap();
        assert!((djkm_error_estimate(&p) - 4e-8).abs() < 1e-20);
        let same = DjkmErrorParams::new(1e-3, 5e-6, 5e-6).unwrap();
        assert_eq!(djkm_error_estimate(&same), 0.0);
        assert!(DjkmErrorParams::new(0.0, 0.0, 0.0).is_err());

        let dpp = tdoa_error_bound(20e-6, 20e-6, 16.678e-9);
        let ratio = djkm_error_estimate(&p) / dpp;
        assert!(ratio > 5.9e4 && ratio < 6.1e4, "{ratio}");
    }

    #[test]
    fn zero_drift_has_no_error() {
        let mc = MonteCarloConfig {
            trials: 20,
            max_drift: 0.0,
            ..Default::default()
        };
        for q in Quantity::ALL {
            let r = empirical_error_report(&room(), &ProtocolConfig::default(), &mc, q).unwrap();
            assert!(
                r.observed_max_abs_error < 1e-12,
                "{q:?} {}",
                r.observed_max_abs_error
            );
            assert!(r.passed);
        }
    }

    #[test]
    fn bounds_hold_under_drift() {
        let mc = MonteCarloConfig {
            trials: 200,
            seed: 11,
            ..Default::default()
        };
        for q in Quantity::ALL {
            let r = empirical_error_report(&room(), &ProtocolConfig::default(), &mc, q).unwrap();
            assert!(r.passed, "{r:?}");
            assert!(r.observed_max_abs_error > 0.0);
        }
    }

    #[test]
    fn jitter_is_rejected() {
        let cfg = ProtocolConfig {
            timestamp_jitter_sd: 1e-12,
            ..Default::default()
        };
        let r = empirical_error_report(&room(), &cfg, &MonteCarloConfig::default(), Quantity::Toa);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn failing_sample_reports_its_seed() {
        let s = ErrorSample {
            trial: 3,
            seed: 99,
            quantity: Quantity::Toa,
            a: NodeId(0),
            b: NodeId(1),
            source: None,
            error: 2.0,
            bound: 1.0,
        };
        let r = summarize(Quantity::Toa, 4, &[s], 0.5);
        assert!(!r.passed);
        assert_eq!(r.failing_seed, Some(99));
    }

    #[test]
    fn attainment_at_max_drift() {
        let ratio = toa_attainment(&room(), &ProtocolConfig::default(), 20e-6).unwrap();
        assert!((0.9..=1.0 + 1e-6).contains(&ratio), "{ratio}");
    }

    #[test]
    fn mu_errors_depend_on_different_clocks() {
        let nodes = vec![
            Node::new(0, NodeRole::Bilateral, [0.0, 0.0])
                .with_clock(ClockModel::new(0.0, 20e-6).unwrap()),
            Node::new(1, NodeRole::Bilateral, [6.0, 1.0])
                .with_clock(ClockModel::new(0.0, -20e-6).unwrap()),
            Node::new(2, NodeRole::Bilateral, [2.0, 7.0]),
        ];
        let sys = System::new(nodes, SPEED_OF_LIGHT).unwrap();
        let errs = cycle_errors(&sys, &ProtocolConfig::default(), Quantity::Mu).unwrap();
        let err_of = |x: u32, z: u32, y: u32| {
            errs.iter()
                .find(|e| e.0 == NodeId(x) && e.1 == NodeId(z) && e.2 == Some(NodeId(y)))
                .unwrap()
                .3
        };
        let xzy = err_of(0, 2, 1);
        let yzx = err_of(1, 2, 0);
        assert!(xzy > 0.0 && yzx < 0.0, "{xzy} {yzx}");
    }
}
