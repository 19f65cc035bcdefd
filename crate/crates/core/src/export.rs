//! CSV and JSON writers for traces, measurement sets and reports.
//!
//! Rows are emitted in a fixed order so the same input always produces the
//! same bytes.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::measure::{MeasureConfig, MeasurementFailure, MeasurementSet, MuKey, TdoaForm};
use crate::model::NodeId;
use crate::protocol::CycleTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceKind {
    Tx,
    Rx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub cycle: u64,
    pub kind: TraceKind,
    pub node: NodeId,
    pub sender: NodeId,
    pub pulse_index: u8,
    pub local_ts_s: f64,
    /// Known for transmissions only.
    pub true_ts_s: Option<f64>,
}

pub fn trace_rows(traces: &[CycleTrace]) -> Vec<TraceRow> {
    let mut rows = Vec::new();
    for t in traces {
        let cycle = t.cycle_index();
        rows.extend(t.tx().iter().map(|r| TraceRow {
            cycle,
            kind: TraceKind::Tx,
            node: r.sender,
            sender: r.sender,
            pulse_index: r.pulse.index(),
            local_ts_s: r.local_timestamp,
            true_ts_s: Some(r.true_time),
        }));
        rows.extend(t.rx().iter().map(|r| TraceRow {
            cycle,
            kind: TraceKind::Rx,
            node: r.receiver,
            sender: r.sender,
            pulse_index: r.pulse.index(),
            local_ts_s: r.local_timestamp,
            true_ts_s: None,
        }));
    }
    rows
}

pub fn write_trace_csv<W: Write>(out: W, traces: &[CycleTrace]) -> io::Result<()> {
    write_csv(out, &trace_rows(traces))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    Mu,
    /// Receiver-pair TDoA: receivers `x`, `z`, source `y`.
    Tdoa,
    /// Source-pair TDoA: receiver `x`, sources `y`, `z`.
    TdoaAlt,
    Toa,
    Direct,
}

/// One value of a [`MeasurementSet`]; `y` is empty for ToA rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRow {
    pub cycle: u64,
    pub kind: MeasurementKind,
    pub x: NodeId,
    pub y: Option<NodeId>,
    pub z: NodeId,
    pub p_or_q: String,
    pub value_s: f64,
    pub value_m: f64,
}

pub fn measurement_rows(ms: &MeasurementSet, cfg: &MeasureConfig) -> Vec<MeasurementRow> {
    let v = ms.signal_speed;
    let row = |kind, x, y, z, label: &str, value: f64| MeasurementRow {
        cycle: ms.cycle,
        kind,
        x,
        y,
        z,
        p_or_q: label.to_string(),
        value_s: value,
        value_m: value * v,
    };
    let (p, q) = (cfg.p.label(), cfg.q.label());
    let mut rows = Vec::new();
    for (k, m) in &ms.mu {
        rows.push(row(MeasurementKind::Mu, k.x, Some(k.y), k.z, p, m.value));
    }
    for e in &ms.tdoa {
        rows.push(match e.form {
            TdoaForm::ReceiverPair => {
                row(MeasurementKind::Tdoa, e.a, Some(e.source), e.b, p, e.value)
            }
            TdoaForm::SourcePair => row(
                MeasurementKind::TdoaAlt,
                e.source,
                Some(e.a),
                e.b,
                p,
                e.value,
            ),
        });
    }
    for (pair, t) in &ms.toa {
        rows.push(row(
            MeasurementKind::Toa,
            pair.first(),
            None,
            pair.second(),
            q,
            t.seconds,
        ));
    }
    for (k, d) in &ms.direct {
        rows.push(row(MeasurementKind::Direct, k.x, Some(k.y), k.z, p, *d));
    }
    rows
}

pub fn write_measurements_csv<W: Write>(
    out: W,
    sets: &[MeasurementSet],
    cfg: &MeasureConfig,
) -> io::Result<()> {
    let rows: Vec<MeasurementRow> = sets.iter().flat_map(|s| measurement_rows(s, cfg)).collect();
    write_csv(out, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: u64,
    pub rows: Vec<MeasurementRow>,
    /// Triples with a μ value but no distance to turn it into a TDoA.
    pub mu_only: Vec<MuKey>,
    pub failures: Vec<MeasurementFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementReport {
    pub signal_speed_mps: f64,
    pub p: String,
    pub q: String,
    pub cycles: Vec<CycleReport>,
}

impl MeasurementReport {
    pub fn new(sets: &[MeasurementSet], cfg: &MeasureConfig) -> Self {
        Self {
            signal_speed_mps: sets.first().map_or(0.0, |s| s.signal_speed),
            p: cfg.p.label().to_string(),
            q: cfg.q.label().to_string(),
            cycles: sets
                .iter()
                .map(|s| CycleReport {
                    cycle: s.cycle,
                    rows: measurement_rows(s, cfg),
                    mu_only: s.mu_only.clone(),
                    failures: s.failures.clone(),
                })
                .collect(),
        }
    }
}

pub fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
}

/// Pretty JSON with a trailing newline.
pub fn write_json<W: Write, T: Serialize + ?Sized>(mut out: W, value: &T) -> io::Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::full_cycle_measurements;
    use crate::model::{Node, NodeRole, System};
    use crate::par::Execution;
    use crate::protocol::{simulate, ProtocolConfig};

    fn traces() -> Vec<CycleTrace> {
        let sys = System::new(
            vec![
                Node::new(1, NodeRole::Bilateral, [0.0, 0.0]).known(),
                Node::new(2, NodeRole::Bilateral, [10.0, 0.0]).known(),
                Node::new(3, NodeRole::Passive, [4.0, 3.0]),
            ],
            crate::model::SPEED_OF_LIGHT,
        )
        .unwrap();
        simulate(&sys, &ProtocolConfig::default(), Execution::Sequential).unwrap()
    }

    #[test]
    fn trace_csv_layout() {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &traces()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("cycle,kind,node,sender,pulse_index,local_ts_s,true_ts_s")
        );
        let rows: Vec<&str> = lines.collect();
        // 2 senders x 2 pulses, each heard by the 2 other nodes
        assert_eq!(rows.iter().filter(|l| l.contains(",tx,")).count(), 4);
        assert_eq!(rows.iter().filter(|l| l.contains(",rx,")).count(), 8);
        assert!(rows
            .iter()
            .filter(|l| l.contains(",rx,"))
            .all(|l| l.ends_with(',')));
    }

    #[test]
    fn measurement_csv_has_seconds_and_meters() {
        let t = traces();
        let cfg = MeasureConfig::default();
        let ms = full_cycle_measurements(&t[0], &cfg);
        let rows = measurement_rows(&ms, &cfg);
        let toa = rows
            .iter()
            .find(|r| r.kind == MeasurementKind::Toa)
            .unwrap();
        assert_eq!(toa.y, None);
        assert!((toa.value_m - 10.0).abs() < 1e-6);
        assert!((toa.value_m - toa.value_s * ms.signal_speed).abs() < 1e-12);

        let mut buf = Vec::new();
        write_measurements_csv(&mut buf, &[ms], &cfg).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("cycle,kind,x,y,z,p_or_q,value_s,value_m\n"));
        assert!(text.contains(",toa,1,,2,avg,"));
    }

    #[test]
    fn json_report_is_stable() {
        let t = traces();
        let cfg = MeasureConfig::default();
        let sets: Vec<MeasurementSet> =
            t.iter().map(|c| full_cycle_measurements(c, &cfg)).collect();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_json(&mut a, &MeasurementReport::new(&sets, &cfg)).unwrap();
        write_json(&mut b, &MeasurementReport::new(&sets, &cfg)).unwrap();
        assert_eq!(a, b);
        let back: MeasurementReport = serde_json::from_slice(&a).unwrap();
        assert_eq!(back.cycles.len(), 1);
    }
}
