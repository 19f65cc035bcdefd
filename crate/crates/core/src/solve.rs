//! Position solvers: trilateration from ToA ranges, multilateration from TDoA
//! values, anchor-free embedding of Bilaterals, and the mobile pipeline that
//! chains the last two.
//!
//! All solvers work in meters and share one damped Gauss-Newton
//! (Levenberg-Marquardt) loop that only ever accepts steps lowering the sum of
//! squared residuals.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::MeasurementSet;
use crate::model::{NodeId, NodePair, NodeRole, Position, System, SPEED_OF_LIGHT};
use crate::par::{map_slice, Execution};

/// Candidates closer than this are the same solution, meters.
const SAME_SOLUTION: f64 = 1e-6;
/// Residual RMS difference treated as an exact tie, meters.
const NUMERIC_TIE: f64 = 1e-9;
/// Relative singular value below which a point set spans fewer dimensions.
const RANK_EPS: f64 = 1e-9;
/// Off-axis extent, relative to the frame size, below which gauge nodes are
/// considered collinear (or coplanar).
const GAUGE_EPS: f64 = 1e-6;
/// Allowed triangle-inequality excess, relative to the largest distance.
const FEASIBILITY_REL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Relative step length at which the iteration is considered settled.
    pub step_tolerance: f64,
    /// RMS residual, meters, a solution must reach to count as converged.
    pub residual_tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            step_tolerance: 1e-12,
            residual_tolerance: 1e-10 * SPEED_OF_LIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionEstimate {
    pub node: NodeId,
    pub position: Position,
    /// RMS of the residuals at `position`, meters.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Other solutions whose residual ties with `position`.
    pub alternates: Vec<Position>,
}

struct LmOutcome {
    x: DVector<f64>,
    rms: f64,
    iterations: usize,
    stationary: bool,
    #[cfg_attr(not(test), allow(dead_code))]
    costs: Vec<f64>,
}

fn levenberg_marquardt<F>(x0: DVector<f64>, model: F, opts: &SolverOptions) -> LmOutcome
where
    F: Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
{
    let mut x = x0;
    let (mut r, mut j) = model(&x);
    let m = r.len().max(1) as f64;
    let mut cost = r.norm_squared();
    let mut costs = vec![cost];
    let mut mu = 1e-3;
    let mut stationary = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        if cost == 0.0 {
            stationary = true;
            break;
        }
        iterations += 1;
        let jt = j.transpose();
        let g = &jt * &r;
        let mut a = &jt * &j;
        let scale = a.diagonal().max().max(f64::MIN_POSITIVE);
        for i in 0..a.nrows() {
            a[(i, i)] += mu * scale;
        }
        let Some(chol) = a.cholesky() else {
            mu *= 4.0;
            continue;
        };
        let step = -chol.solve(&g);
        let settled = step.norm() <= opts.step_tolerance * (x.norm() + opts.step_tolerance);
        let candidate = &x + &step;
        let (rc, jc) = model(&candidate);
        let cost_c = rc.norm_squared();
        if cost_c.is_finite() && cost_c < cost {
            x = candidate;
            r = rc;
            j = jc;
            cost = cost_c;
            costs.push(cost);
            mu = (mu / 3.0).max(1e-10);
            if settled {
                stationary = true;
                break;
            }
        } else {
            mu *= 4.0;
            if settled || mu > 1e30 {
                stationary = true;
                break;
            }
        }
    }
    LmOutcome {
        x,
        rms: (cost / m).sqrt(),
        iterations,
        stationary,
        costs,
    }
}

fn to_vector(p: &Position) -> DVector<f64> {
    DVector::from_column_slice(p.coords())
}

fn to_position(v: &DVector<f64>) -> Position {
    Position::new(v.iter().copied().collect()).expect("solver works in 2D or 3D")
}

/// Unit vector from `b` to `a`, or zero when they coincide.
fn unit_from(a: &DVector<f64>, b: &DVector<f64>) -> (f64, DVector<f64>) {
    let diff = a - b;
    let n = diff.norm();
    if n > 0.0 {
        (n, diff / n)
    } else {
        (0.0, DVector::zeros(a.len()))
    }
}

fn common_dim<'a>(points: impl IntoIterator<Item = &'a Position>) -> Result<usize> {
    let mut dim = None;
    for p in points {
        if !p.is_finite() {
            return Err(Error::InvalidInput("non-finite anchor position".into()));
        }
        match dim {
            None => dim = Some(p.dim()),
            Some(d) if d != p.dim() => {
                return Err(Error::InvalidInput(
                    "anchors mix 2D and 3D positions".into(),
                ))
            }
            _ => {}
        }
    }
    dim.ok_or(Error::InsufficientAnchors { needed: 3, got: 0 })
}

/// Singular values of the centered point cloud, largest first.
fn spread(points: &[DVector<f64>]) -> Vec<f64> {
    let dim = points[0].len();
    let c = centroid(points);
    let m = DMatrix::from_fn(points.len(), dim, |i, k| points[i][k] - c[k]);
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn require_full_rank(points: &[DVector<f64>], dim: usize, what: &str) -> Result<()> {
    let s = spread(points);
    let top = s.first().copied().unwrap_or(0.0);
    if s.len() < dim || top == 0.0 || s[dim - 1] <= RANK_EPS * top {
        return Err(Error::DegenerateGeometry(format!(
            "{what} do not span {dim} dimensions"
        )));
    }
    Ok(())
}

fn centroid(points: &[DVector<f64>]) -> DVector<f64> {
    let mut c = DVector::zeros(points[0].len());
    for p in points {
        c += p;
    }
    c / points.len() as f64
}

/// Deterministic starting points around an anchor set.
fn start_points(anchors: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let c = centroid(anchors);
    let radius = anchors
        .iter()
        .map(|a| (a - &c).norm())
        .fold(0.0, f64::max)
        .max(1.0);
    let mut out = vec![c.clone()];
    for a in anchors {
        out.push(&c + (a - &c) * 0.9);
        out.push(&c + (a - &c) * 1.5);
    }
    for k in 0..c.len() {
        for sign in [1.0, -1.0] {
            let mut p = c.clone();
            p[k] += sign * 2.0 * radius;
            out.push(p);
        }
    }
    out
}

/// Runs the solver from every start and picks the best stationary point.
fn settle<F>(
    node: NodeId,
    anchors: &[DVector<f64>],
    model: F,
    opts: &SolverOptions,
) -> Result<PositionEstimate>
where
    F: Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
{
    let c = centroid(anchors);
    let mut found: Vec<LmOutcome> = Vec::new();
    let mut best_failed = f64::INFINITY;
    for start in start_points(anchors) {
        let out = levenberg_marquardt(start, &model, opts);
        if !out.stationary || !out.rms.is_finite() {
            best_failed = best_failed.min(out.rms);
            continue;
        }
        if found.iter().all(|f| (&f.x - &out.x).norm() > SAME_SOLUTION) {
            found.push(out);
        } else if let Some(f) = found
            .iter_mut()
            .find(|f| (&f.x - &out.x).norm() <= SAME_SOLUTION)
        {
            if out.rms < f.rms {
                *f = out;
            }
        }
    }
    if found.is_empty() {
        return Err(Error::NonConvergence {
            iterations: opts.max_iterations,
            residual: best_failed,
        });
    }
    let best = found.iter().map(|f| f.rms).fold(f64::INFINITY, f64::min);
    let dist_c = |f: &LmOutcome| (&f.x - &c).norm();
    let primary = found
        .iter()
        .enumerate()
        .filter(|(_, f)| f.rms <= best + NUMERIC_TIE)
        .min_by(|(_, a), (_, b)| dist_c(a).total_cmp(&dist_c(b)))
        .map(|(i, _)| i)
        .expect("at least one candidate");
    let chosen = found.swap_remove(primary);
    found.sort_by(|a, b| a.rms.total_cmp(&b.rms));
    let alternates = found
        .iter()
        .filter(|f| f.rms <= chosen.rms + opts.residual_tolerance)
        .map(|f| to_position(&f.x))
        .collect();
    Ok(PositionEstimate {
        node,
        position: to_position(&chosen.x),
        residual_norm: chosen.rms,
        iterations: chosen.iterations,
        converged: chosen.rms <= opts.residual_tolerance,
        alternates,
    })
}

/// Trilateration from ranges (meters) between `unknown` and anchors.
pub fn solve_toa(
    distances: &BTreeMap<NodePair, f64>,
    anchors: &BTreeMap<NodeId, Position>,
    unknown: NodeId,
    opts: &SolverOptions,
) -> Result<PositionEstimate> {
    let dim = common_dim(anchors.values())?;
    let mut points = Vec::new();
    let mut ranges = Vec::new();
    for (id, pos) in anchors {
        if *id == unknown {
            continue;
        }
        if let Some(&d) = distances.get(&NodePair::new(*id, unknown)) {
            if !d.is_finite() || d < 0.0 {
                return Err(Error::InvalidInput(format!("range {id}-{unknown} is {d}")));
            }
            points.push(to_vector(pos));
            ranges.push(d);
        }
    }
    if points.len() < dim + 1 {
        return Err(Error::InsufficientAnchors {
            needed: dim + 1,
            got: points.len(),
        });
    }
    require_full_rank(&points, dim, "ranging anchors")?;

    let model = |p: &DVector<f64>| {
        let mut r = DVector::zeros(points.len());
        let mut j = DMatrix::zeros(points.len(), dim);
        for (i, (a, d)) in points.iter().zip(&ranges).enumerate() {
            let (n, u) = unit_from(p, a);
            r[i] = n - d;
            j.set_row(i, &u.transpose());
        }
        (r, j)
    };
    settle(unknown, &points, model, opts)
}

/// One TDoA value about an unknown node `p`: `(d(p, b) - d(p, a)) / v`, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdoaObservation {
    pub a: NodeId,
    pub b: NodeId,
    pub value: f64,
}

/// The TDoA values of `ms` that constrain `target` against `anchors`.
///
/// Entries whose source is the target are range differences from the target
/// to their two other nodes, whichever equation produced them.
pub fn observations_for(
    ms: &MeasurementSet,
    target: NodeId,
    anchors: &BTreeMap<NodeId, Position>,
) -> Vec<TdoaObservation> {
    ms.tdoa
        .iter()
        .filter(|e| e.source == target && anchors.contains_key(&e.a) && anchors.contains_key(&e.b))
        .map(|e| TdoaObservation {
            a: e.a,
            b: e.b,
            value: e.value,
        })
        .collect()
}

/// Hyperbolic multilateration of `unknown` from TDoA values.
pub fn solve_tdoa(
    observations: &[TdoaObservation],
    anchors: &BTreeMap<NodeId, Position>,
    unknown: NodeId,
    signal_speed: f64,
    opts: &SolverOptions,
) -> Result<PositionEstimate> {
    if !(signal_speed.is_finite() && signal_speed > 0.0) {
        return Err(Error::InvalidInput(format!(
            "signal speed must be positive, got {signal_speed}"
        )));
    }
    let dim = common_dim(anchors.values())?;
    let mut pairs = BTreeSet::new();
    let mut used = Vec::new();
    let mut involved = BTreeSet::new();
    for o in observations {
        if o.a == o.b || o.a == unknown || o.b == unknown {
            return Err(Error::InvalidInput(format!(
                "TDoA pair ({}, {}) is not usable",
                o.a, o.b
            )));
        }
        if !o.value.is_finite() {
            return Err(Error::InvalidInput(format!(
                "TDoA ({}, {}) is {}",
                o.a, o.b, o.value
            )));
        }
        let (Some(pa), Some(pb)) = (anchors.get(&o.a), anchors.get(&o.b)) else {
            continue;
        };
        pairs.insert(NodePair::new(o.a, o.b));
        involved.insert(o.a);
        involved.insert(o.b);
        used.push((to_vector(pa), to_vector(pb), o.value * signal_speed));
    }
    if pairs.len() < dim + 1 {
        return Err(Error::InsufficientAnchors {
            needed: dim + 1,
            got: pairs.len(),
        });
    }
    let points: Vec<DVector<f64>> = involved.iter().map(|id| to_vector(&anchors[id])).collect();
    require_full_rank(&points, dim, "TDoA anchors")?;

    let model = |p: &DVector<f64>| {
        let mut r = DVector::zeros(used.len());
        let mut j = DMatrix::zeros(used.len(), dim);
        for (i, (a, b, diff)) in used.iter().enumerate() {
            let (na, ua) = unit_from(p, a);
            let (nb, ub) = unit_from(p, b);
            r[i] = nb - na - diff;
            j.set_row(i, &(ub - ua).transpose());
        }
        (r, j)
    };
    settle(unknown, &points, model, opts)
}

/// Which nodes pin the relative frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gauge {
    /// Placed at the origin.
    pub origin: NodeId,
    /// Placed on the positive first axis.
    pub axis: NodeId,
    /// Placed at a positive second coordinate (and, in 3D, the next one at a
    /// positive third coordinate).
    pub orientation: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeFrame {
    pub coordinates: BTreeMap<NodeId, Position>,
    pub gauge: Gauge,
    /// RMS distance residual over the input pairs, meters.
    pub residual_rms: f64,
    pub iterations: usize,
}

/// Embeds `nodes` so that their pairwise distances match `distances` (meters).
///
/// Missing pairs are tolerated as long as the distance graph is connected.
/// The result is fixed up to rigid motion by the [`Gauge`] convention.
pub fn embed_relative(
    distances: &BTreeMap<NodePair, f64>,
    nodes: &[NodeId],
    dim: usize,
    opts: &SolverOptions,
) -> Result<RelativeFrame> {
    if !(2..=3).contains(&dim) {
        return Err(Error::InvalidInput(format!(
            "dimension must be 2 or 3, got {dim}"
        )));
    }
    let n = nodes.len();
    if n < dim + 1 {
        return Err(Error::InsufficientAnchors {
            needed: dim + 1,
            got: n,
        });
    }
    let index: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    if index.len() != n {
        return Err(Error::InvalidInput("duplicate node in embedding".into()));
    }

    let mut measured = Vec::new();
    let mut sp = DMatrix::from_element(n, n, f64::INFINITY);
    for i in 0..n {
        sp[(i, i)] = 0.0;
    }
    for (pair, &d) in distances {
        let (Some(&i), Some(&j)) = (index.get(&pair.first()), index.get(&pair.second())) else {
            continue;
        };
        if !d.is_finite() || d < 0.0 {
            return Err(Error::InvalidInput(format!(
                "distance {}-{} is {d}",
                pair.first(),
                pair.second()
            )));
        }
        if i == j {
            continue;
        }
        measured.push((i, j, d));
        sp[(i, j)] = sp[(i, j)].min(d);
        sp[(j, i)] = sp[(i, j)];
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = sp[(i, k)] + sp[(k, j)];
                if via < sp[(i, j)] {
                    sp[(i, j)] = via;
                }
            }
        }
    }
    if sp.iter().any(|d| d.is_infinite()) {
        return Err(Error::Infeasible("distance graph is not connected".into()));
    }
    let largest = measured.iter().map(|m| m.2).fold(0.0, f64::max);
    for &(i, j, d) in &measured {
        let excess = d - sp[(i, j)];
        if excess > FEASIBILITY_REL * largest {
            return Err(Error::Infeasible(format!(
                "{}-{} = {d} m exceeds a path of {} m",
                nodes[i],
                nodes[j],
                sp[(i, j)]
            )));
        }
    }

    let x0 = classical_mds(&sp, dim);
    let model = |x: &DVector<f64>| {
        let mut r = DVector::zeros(measured.len());
        let mut jac = DMatrix::zeros(measured.len(), n * dim);
        for (row, &(i, j, d)) in measured.iter().enumerate() {
            let xi = x.rows(i * dim, dim).into_owned();
            let xj = x.rows(j * dim, dim).into_owned();
            let (len, u) = unit_from(&xi, &xj);
            r[row] = len - d;
            for k in 0..dim {
                jac[(row, i * dim + k)] = u[k];
                jac[(row, j * dim + k)] = -u[k];
            }
        }
        (r, jac)
    };
    let out = levenberg_marquardt(x0, model, opts);
    if !out.stationary {
        return Err(Error::NonConvergence {
            iterations: out.iterations,
            residual: out.rms,
        });
    }
    let points: Vec<DVector<f64>> = (0..n)
        .map(|i| out.x.rows(i * dim, dim).into_owned())
        .collect();
    let (coords, gauge_idx) = apply_gauge(&points, dim)?;
    Ok(RelativeFrame {
        coordinates: nodes
            .iter()
            .zip(&coords)
            .map(|(id, p)| (*id, to_position(p)))
            .collect(),
        gauge: Gauge {
            origin: nodes[gauge_idx[0]],
            axis: nodes[gauge_idx[1]],
            orientation: gauge_idx[2..].iter().map(|&i| nodes[i]).collect(),
        },
        residual_rms: out.rms,
        iterations: out.iterations,
    })
}

/// Double-centering embedding of a full distance matrix, flattened row-major.
fn classical_mds(d: &DMatrix<f64>, dim: usize) -> DVector<f64> {
    let n = d.nrows();
    let sq = d.map(|v| v * v);
    let row_mean: Vec<f64> = (0..n).map(|i| sq.row(i).mean()).collect();
    let total = sq.mean();
    let b = DMatrix::from_fn(n, n, |i, j| {
        -0.5 * (sq[(i, j)] - row_mean[i] - row_mean[j] + total)
    });
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut x = DVector::zeros(n * dim);
    for (k, &col) in order.iter().take(dim).enumerate() {
        let s = eig.eigenvalues[col].max(0.0).sqrt();
        for i in 0..n {
            x[i * dim + k] = eig.eigenvectors[(i, col)] * s;
        }
    }
    x
}

/// Moves `points` into the gauge frame; returns the new coordinates and the
/// indices of the origin, axis and orientation nodes.
fn apply_gauge(points: &[DVector<f64>], dim: usize) -> Result<(Vec<DVector<f64>>, Vec<usize>)> {
    let origin = points[0].clone();
    let rel: Vec<DVector<f64>> = points.iter().map(|p| p - &origin).collect();
    let scale = rel.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let eps = GAUGE_EPS * scale.max(f64::MIN_POSITIVE);

    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut gauge = vec![0];
    for (i, p) in rel.iter().enumerate().skip(1) {
        if basis.len() == dim {
            break;
        }
        let mut orth = p.clone();
        for e in &basis {
            orth -= e * e.dot(p);
        }
        if orth.norm() > eps {
            basis.push(orth.normalize());
            gauge.push(i);
        }
    }
    if basis.len() < dim {
        return Err(Error::DegenerateGeometry(format!(
            "embedded nodes do not span {dim} dimensions"
        )));
    }
    let coords: Vec<DVector<f64>> = rel
        .iter()
        .map(|p| DVector::from_iterator(dim, basis.iter().map(|e| e.dot(p))))
        .collect();
    let mut coords = coords;
    for (rank, &g) in gauge.iter().enumerate() {
        coords[g].rows_range_mut(rank..).fill(0.0);
    }
    Ok((coords, gauge))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetFailure {
    pub node: NodeId,
    pub reason: String,
}

fn solve_targets<F>(
    targets: &[NodeId],
    solve_one: F,
) -> (BTreeMap<NodeId, PositionEstimate>, Vec<TargetFailure>)
where
    F: Fn(NodeId) -> Result<PositionEstimate> + Sync + Send,
{
    let results = map_slice(targets, Execution::default(), |&t| (t, solve_one(t)));
    let mut solved = BTreeMap::new();
    let mut unsolved = Vec::new();
    for (node, r) in results {
        match r {
            Ok(est) => {
                solved.insert(node, est);
            }
            Err(e) => unsolved.push(TargetFailure {
                node,
                reason: e.to_string(),
            }),
        }
    }
    (solved, unsolved)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobileSolution {
    pub frame: RelativeFrame,
    pub targets: BTreeMap<NodeId, PositionEstimate>,
    pub unsolved: Vec<TargetFailure>,
}

impl MobileSolution {
    /// Frame nodes and solved targets together.
    pub fn positions(&self) -> BTreeMap<NodeId, Position> {
        let mut out = self.frame.coordinates.clone();
        out.extend(self.targets.iter().map(|(id, e)| (*id, e.position.clone())));
        out
    }
}

/// Anchor-free positioning: Bilaterals from their ToA distances, everything
/// else by TDoA inside that frame.
pub fn pipeline_mobile(
    ms: &MeasurementSet,
    system: &System,
    opts: &SolverOptions,
) -> Result<MobileSolution> {
    let dim = system.dim();
    let bilaterals: Vec<NodeId> = system
        .with_role(NodeRole::Bilateral)
        .map(|n| n.id)
        .collect();
    if bilaterals.len() < dim + 1 {
        return Err(Error::InsufficientAnchors {
            needed: dim + 1,
            got: bilaterals.len(),
        });
    }
    let distances: BTreeMap<NodePair, f64> = ms.toa.iter().map(|(k, v)| (*k, v.meters)).collect();
    let frame = embed_relative(&distances, &bilaterals, dim, opts)?;
    let targets: Vec<NodeId> = system
        .nodes()
        .iter()
        .filter(|n| n.role != NodeRole::Bilateral)
        .map(|n| n.id)
        .collect();
    let anchors = &frame.coordinates;
    let (solved, unsolved) = solve_targets(&targets, |t| {
        solve_tdoa(
            &observations_for(ms, t, anchors),
            anchors,
            t,
            ms.signal_speed,
            opts,
        )
    });
    Ok(MobileSolution {
        frame,
        targets: solved,
        unsolved,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsoluteSolution {
    pub targets: BTreeMap<NodeId, PositionEstimate>,
    pub unsolved: Vec<TargetFailure>,
}

/// Positions every node without a known position against those with one.
///
/// Bilateral targets use ToA ranges when enough are available, all other
/// targets use TDoA.
pub fn solve_absolute(
    ms: &MeasurementSet,
    system: &System,
    opts: &SolverOptions,
) -> Result<AbsoluteSolution> {
    let dim = system.dim();
    let anchors: BTreeMap<NodeId, Position> = system
        .nodes()
        .iter()
        .filter(|n| n.known_position)
        .map(|n| (n.id, n.position.clone()))
        .collect();
    if anchors.len() < dim + 1 {
        return Err(Error::InsufficientAnchors {
            needed: dim + 1,
            got: anchors.len(),
        });
    }
    let ranges: BTreeMap<NodePair, f64> = ms.toa.iter().map(|(k, v)| (*k, v.meters)).collect();
    let targets: Vec<NodeId> = system
        .nodes()
        .iter()
        .filter(|n| !n.known_position)
        .map(|n| n.id)
        .collect();
    let (solved, unsolved) = solve_targets(&targets, |t| {
        let is_bilateral = system
            .node(t)
            .is_some_and(|n| n.role == NodeRole::Bilateral);
        if is_bilateral {
            let ranged = anchors
                .keys()
                .filter(|a| ranges.contains_key(&NodePair::new(**a, t)))
                .count();
            if ranged > dim {
                return solve_toa(&ranges, &anchors, t, opts);
            }
        }
        solve_tdoa(
            &observations_for(ms, t, &anchors),
            &anchors,
            t,
            ms.signal_speed,
            opts,
        )
    });
    Ok(AbsoluteSolution {
        targets: solved,
        unsolved,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameKind {
    /// Coordinates of the configured anchors.
    Absolute,
    /// Gauge-fixed frame of the Bilaterals.
    Relative,
}

/// Result of [`solve_measurements`], flattened for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub frame: FrameKind,
    pub gauge: Option<Gauge>,
    pub estimates: Vec<PositionEstimate>,
    pub unsolved: Vec<TargetFailure>,
}

/// Absolute solve when at least `dim + 1` positions are known, the mobile
/// pipeline otherwise.
pub fn solve_measurements(
    ms: &MeasurementSet,
    system: &System,
    opts: &SolverOptions,
) -> Result<Solution> {
    let known = system.nodes().iter().filter(|n| n.known_position).count();
    if known > system.dim() {
        let abs = solve_absolute(ms, system, opts)?;
        return Ok(Solution {
            frame: FrameKind::Absolute,
            gauge: None,
            estimates: abs.targets.into_values().collect(),
            unsolved: abs.unsolved,
        });
    }
    let mobile = pipeline_mobile(ms, system, opts)?;
    let frame_converged = mobile.frame.residual_rms <= opts.residual_tolerance;
    let mut estimates: Vec<PositionEstimate> = mobile
        .frame
        .coordinates
        .iter()
        .map(|(id, p)| PositionEstimate {
            node: *id,
            position: p.clone(),
            residual_norm: mobile.frame.residual_rms,
            iterations: mobile.frame.iterations,
            converged: frame_converged,
            alternates: Vec::new(),
        })
        .collect();
    estimates.extend(mobile.targets.into_values());
    estimates.sort_by_key(|e| e.node);
    Ok(Solution {
        frame: FrameKind::Relative,
        gauge: Some(mobile.frame.gauge),
        estimates,
        unsolved: mobile.unsolved,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcrustesFit {
    /// RMS distance between aligned estimate and truth, meters.
    pub rms: f64,
    pub reflected: bool,
    /// Row-major; maps estimate coordinates onto truth.
    pub rotation: Vec<Vec<f64>>,
    pub translation: Vec<f64>,
}

/// Best rigid alignment of `estimate` onto `truth` (Kabsch).
pub fn procrustes_align(
    estimate: &BTreeMap<NodeId, Position>,
    truth: &BTreeMap<NodeId, Position>,
    allow_reflection: bool,
) -> Result<ProcrustesFit> {
    if !estimate.keys().eq(truth.keys()) {
        return Err(Error::InvalidInput(
            "estimate and truth cover different nodes".into(),
        ));
    }
    if truth.len() < 3 {
        return Err(Error::InsufficientAnchors {
            needed: 3,
            got: truth.len(),
        });
    }
    let dim = common_dim(truth.values())?;
    if common_dim(estimate.values())? != dim {
        return Err(Error::InvalidInput(
            "estimate and truth differ in dimension".into(),
        ));
    }
    let p: Vec<DVector<f64>> = estimate.values().map(to_vector).collect();
    let q: Vec<DVector<f64>> = truth.values().map(to_vector).collect();
    let s = spread(&q);
    if s.len() < 2 || s[0] == 0.0 || s[1] <= RANK_EPS * s[0] {
        return Err(Error::DegenerateGeometry(
            "truth points are collinear".into(),
        ));
    }

    let (pc, qc) = (centroid(&p), centroid(&q));
    let mut h = DMatrix::zeros(dim, dim);
    for (a, b) in p.iter().zip(&q) {
        h += (a - &pc) * (b - &qc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let mut v = vt.transpose();
    let mut r = &v * u.transpose();
    if r.determinant() < 0.0 && !allow_reflection {
        // flip the axis with the smallest singular value
        let (k, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty");
        let col = -v.column(k);
        v.set_column(k, &col);
        r = &v * u.transpose();
    }
    let t = &qc - &r * &pc;
    let sum: f64 = p
        .iter()
        .zip(&q)
        .map(|(a, b)| (&r * a + &t - b).norm_squared())
        .sum();
    Ok(ProcrustesFit {
        rms: (sum / p.len() as f64).sqrt(),
        reflected: r.determinant() < 0.0,
        rotation: (0..dim)
            .map(|i| r.row(i).iter().copied().collect())
            .collect(),
        translation: t.iter().copied().collect(),
    })
}
