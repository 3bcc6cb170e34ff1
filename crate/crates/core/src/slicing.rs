//! Meshing of iso-energetic slices of the center manifolds.
//!
//! At an energy `h` slightly above the energy `h0` of the collinear point,
//! the slice `{ H(W̃(ŝ, 0)) = h }` of the center manifold projects onto
//! `(s1, s2, s4)` as a perturbation of a solid ellipsoid: every column in the
//! interior carries two `s3` roots, and the two sheets glue along the
//! boundary, where the roots collide. [`mesh_slice`] grids a bounding box of
//! that projection (the quadratic ellipsoid fattened by an absolute margin
//! `eps`) and recovers `s3` per column by dyadic sign bracketing, bisection,
//! and a full-order Newton polish.
//!
//! Four strategies trade scan cost for the same point set:
//!
//! 1. [`Strategy::FullScan`] — brackets and bisects with the whole expansion;
//! 2. [`Strategy::TruncatedScan`] — brackets and bisects with a low-order
//!    truncation (default order 4), polishing at full order;
//! 3. [`Strategy::CollapsedEval`] — additionally evaluates only the monomials
//!    that survive at `s5 = 0` (the collapsed center series, which is exact
//!    there);
//! 4. [`Strategy::InsideOut`] — additionally assumes the slice is convex and
//!    sweeps each axis from the inside out, abandoning a direction at its
//!    first empty column, which avoids paying the full "no root" scan on
//!    most exterior columns.

use rayon::prelude::*;

use crate::dynamics::{grad_hamiltonian, hamiltonian, Lpoint, State};
use crate::parameterize::Parameterization;
use crate::polyalg::{RealEvalScratch, RealSeries};
use crate::{Error, Result};

/// Absolute fattening of the bounding intervals around the quadratic
/// ellipsoid semi-axes, accounting for the cubic-and-higher deformation.
pub const DEFAULT_EPS: f64 = 0.05;

/// Truncation order used while bracketing in the reduced-cost strategies.
pub const DEFAULT_BRACKET_ORDER: usize = 4;

/// Initial number of subdivisions of the `s3` interval in the dyadic scan.
pub const DEFAULT_INITIAL_SUBDIVISIONS: usize = 30;

/// Number of times the dyadic scan doubles its resolution before a column is
/// declared to have no root (i.e. to lie outside the perturbed ellipsoid).
pub const DEFAULT_MAX_DOUBLINGS: usize = 10;

/// Width to which a sign-change bracket is narrowed by bisection before the
/// Newton polish takes over.
pub const BISECTION_TOL: f64 = 1e-12;

/// Roots closer than this are merged: they bracket the same tangency.
pub const ROOT_MERGE_TOL: f64 = 1e-9;

const NEWTON_STEP_TOL: f64 = 1e-13;
const MAX_NEWTON_ITERS: usize = 16;

// ---------------------------------------------------------------------------
// Parameters and mesh types
// ---------------------------------------------------------------------------

/// Root-bracketing strategy used by [`mesh_slice`]. See the module docs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    FullScan,
    TruncatedScan,
    CollapsedEval,
    InsideOut,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::FullScan,
        Strategy::TruncatedScan,
        Strategy::CollapsedEval,
        Strategy::InsideOut,
    ];

    /// Numeric id, 1 through 4, in increasing order of optimization.
    pub fn id(&self) -> u8 {
        match self {
            Strategy::FullScan => 1,
            Strategy::TruncatedScan => 2,
            Strategy::CollapsedEval => 3,
            Strategy::InsideOut => 4,
        }
    }

    pub fn from_id(id: u8) -> Result<Strategy> {
        match id {
            1 => Ok(Strategy::FullScan),
            2 => Ok(Strategy::TruncatedScan),
            3 => Ok(Strategy::CollapsedEval),
            4 => Ok(Strategy::InsideOut),
            other => Err(Error::InvalidInput(format!(
                "strategy id must be 1..=4, got {other}"
            ))),
        }
    }

    /// Whether series evaluation collapses to the 4-variable center series.
    fn collapsed(&self) -> bool {
        matches!(self, Strategy::CollapsedEval | Strategy::InsideOut)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let id: u8 = s
            .parse()
            .map_err(|_| Error::InvalidInput(format!("strategy must be 1..=4, got {s:?}")))?;
        Strategy::from_id(id)
    }
}

/// Grid density: either a point count shared by the three gridded axes, or
/// target spacings (`planar` for s1/s2, `vertical` for s4); with spacings the
/// point count per axis is the smallest whose spacing does not exceed the
/// target. Each axis interval is split into that many equal cells and the
/// grid points sit at the cell centers, so all points lie strictly inside
/// the interval and the grid is symmetric about its midpoint.
#[derive(Debug, Clone, Copy)]
pub enum AxisSpec {
    PerAxis(usize),
    Spacing { planar: f64, vertical: f64 },
}

/// Inputs of [`mesh_slice`].
#[derive(Debug, Clone)]
pub struct MeshParams {
    /// Energy level of the slice; must exceed the collinear point's energy.
    pub h: f64,
    /// Absolute fattening of the bounding intervals.
    pub eps: f64,
    pub strategy: Strategy,
    pub axes: AxisSpec,
    /// Truncation order while bracketing; `None` picks the strategy default
    /// (full order for [`Strategy::FullScan`], [`DEFAULT_BRACKET_ORDER`]
    /// otherwise).
    pub bracket_order: Option<usize>,
    /// Evaluation order cap; `None` uses the parameterization's full order.
    pub order: Option<usize>,
    pub initial_subdivisions: usize,
    pub max_doublings: usize,
    /// Extra grid steps probed past the first empty column before an
    /// inside-out direction is abandoned (guards mild non-convexity).
    pub probe_margin: usize,
}

impl MeshParams {
    pub fn new(h: f64, strategy: Strategy, axes: AxisSpec) -> MeshParams {
        MeshParams {
            h,
            eps: DEFAULT_EPS,
            strategy,
            axes,
            bracket_order: None,
            order: None,
            initial_subdivisions: DEFAULT_INITIAL_SUBDIVISIONS,
            max_doublings: DEFAULT_MAX_DOUBLINGS,
            probe_margin: 0,
        }
    }
}

/// One mesh point `ŝ = (s1, s2, s3, s4)` on the energy level, tagged with the
/// number of `s3` roots (1 or 2) its `(s1, s2, s4)` column produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshPoint {
    pub s: [f64; 4],
    pub mult: u8,
}

/// An iso-energetic slice mesh with the parameters that produced it.
#[derive(Debug, Clone)]
pub struct SliceMesh {
    pub point: Lpoint,
    pub h: f64,
    pub eps: f64,
    pub strategy: Strategy,
    pub bracket_order: usize,
    pub order: usize,
    /// Node counts on the gridded axes (s1, s2, s4).
    pub n_axes: [usize; 3],
    /// Grid nodes on the gridded axes (s1, s2, s4).
    pub axis_nodes: [Vec<f64>; 3],
    /// Points in canonical order (sorted by s1, s2, s4, s3).
    pub points: Vec<MeshPoint>,
}

impl SliceMesh {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The bare tag array of every mesh point, in canonical order.
    pub fn tags(&self) -> Vec<[f64; 4]> {
        self.points.iter().map(|p| p.s).collect()
    }

    /// Whether two meshes hold the same point set: same length, and the
    /// canonically sorted points agree componentwise within `tol` with equal
    /// multiplicity tags.
    pub fn same_point_set(&self, other: &SliceMesh, tol: f64) -> bool {
        self.points.len() == other.points.len()
            && self
                .points
                .iter()
                .zip(other.points.iter())
                .all(|(a, b)| {
                    a.mult == b.mult
                        && a.s.iter().zip(b.s.iter()).all(|(x, y)| (x - y).abs() <= tol)
                })
    }

    /// Whether every point of `self` appears in `other` within `tol`
    /// (componentwise, multiplicity ignored). Quadratic scan; meant for
    /// tests on small meshes.
    pub fn subset_of(&self, other: &SliceMesh, tol: f64) -> bool {
        self.points.iter().all(|a| {
            other
                .points
                .iter()
                .any(|b| a.s.iter().zip(b.s.iter()).all(|(x, y)| (x - y).abs() <= tol))
        })
    }
}

// ---------------------------------------------------------------------------
// Quadratic model and bounding intervals
// ---------------------------------------------------------------------------

/// Quadratic part of the energy on the center manifold:
/// `h0 + qp (s1² + s2²) + qv (s3² + s4²)`, with `(qp, qv)` the quadratic
/// energy coefficients of the parameterization's normalization. The full
/// energy differs from this by cubic-and-higher terms.
pub fn quadratic_energy(p: &Parameterization, s: &[f64; 4]) -> f64 {
    let (qp, qv) = p.quadratic_energy_coeffs();
    p.h0() + qp * (s[0] * s[0] + s[1] * s[1]) + qv * (s[2] * s[2] + s[3] * s[3])
}

/// Bounding intervals of the slice's projection: `s1, s2` range over
/// `I = [-(a_p + eps), a_p + eps]` and `s3, s4` over
/// `J = [-(a_v + eps), a_v + eps]`, where `a_p = sqrt((h - h0)/qp)` and
/// `a_v = sqrt((h - h0)/qv)` are the quadratic ellipsoid semi-axes.
pub fn bounding_intervals(
    p: &Parameterization,
    h: f64,
    eps: f64,
) -> Result<([f64; 2], [f64; 2])> {
    let h0 = p.h0();
    if !(h > h0) {
        return Err(Error::InvalidInput(format!(
            "slice energy {h} does not exceed the collinear point energy {h0}"
        )));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidInput(format!("eps must be >= 0, got {eps}")));
    }
    let (qp, qv) = p.quadratic_energy_coeffs();
    let a_p = ((h - h0) / qp).sqrt();
    let a_v = ((h - h0) / qv).sqrt();
    Ok(([-(a_p + eps), a_p + eps], [-(a_v + eps), a_v + eps]))
}

// ---------------------------------------------------------------------------
// Series evaluation on the slice
// ---------------------------------------------------------------------------

/// Evaluator of `W̃(ŝ, 0)` and its `∂/∂s3` jet, either through the full
/// 5-variable series (paying for the monomials that vanish at `s5 = 0`) or
/// through the collapsed 4-variable center series (same values, cheaper).
struct SliceEval<'p> {
    w: Vec<&'p RealSeries>,
    dw: Vec<RealSeries>,
    nvars: usize,
    mu: f64,
}

impl<'p> SliceEval<'p> {
    fn new(p: &'p Parameterization, collapsed: bool) -> SliceEval<'p> {
        let w: Vec<&RealSeries> = (0..6)
            .map(|i| {
                if collapsed {
                    p.center_series(i)
                } else {
                    p.wtilde_real_series(i)
                }
            })
            .collect();
        let dw: Vec<RealSeries> = w.iter().map(|s| s.derivative(2)).collect();
        SliceEval {
            w,
            dw,
            nvars: if collapsed { 4 } else { 5 },
            mu: p.collinear().mu,
        }
    }

    fn fill<'b>(&self, s: &[f64; 4], buf: &'b mut [f64; 5]) -> &'b [f64] {
        buf[..4].copy_from_slice(s);
        buf[4] = 0.0;
        &buf[..self.nvars]
    }

    fn state(&self, s: &[f64; 4], order: usize, scratch: &mut RealEvalScratch) -> State {
        let mut buf = [0.0; 5];
        let pt = self.fill(s, &mut buf);
        let vals = scratch.chain(self.w[0].layout(), pt, order);
        State::from_fn(|i, _| self.w[i].dot_chain(vals))
    }

    /// `H(W̃(ŝ, 0)) - h`.
    fn residual(&self, h: f64, s: &[f64; 4], order: usize, scratch: &mut RealEvalScratch) -> f64 {
        hamiltonian(self.mu, &self.state(s, order, scratch)) - h
    }

    /// Residual and its derivative with respect to `s3`, sharing one chain.
    fn residual_jet(
        &self,
        h: f64,
        s: &[f64; 4],
        order: usize,
        scratch: &mut RealEvalScratch,
    ) -> (f64, f64) {
        let mut buf = [0.0; 5];
        let pt = self.fill(s, &mut buf);
        let vals = scratch.chain(self.w[0].layout(), pt, order);
        let x = State::from_fn(|i, _| self.w[i].dot_chain(vals));
        let dx = State::from_fn(|i, _| self.dw[i].dot_chain(vals));
        (hamiltonian(self.mu, &x) - h, grad_hamiltonian(self.mu, &x).dot(&dx))
    }
}

/// Reusable per-thread buffers for column solves.
struct SolveScratch {
    chain: RealEvalScratch,
    pos: Vec<f64>,
    val: Vec<f64>,
    roots: Vec<f64>,
}

impl SolveScratch {
    fn new() -> SolveScratch {
        SolveScratch {
            chain: RealEvalScratch::new(),
            pos: Vec::new(),
            val: Vec::new(),
            roots: Vec::new(),
        }
    }
}

/// Everything needed to solve `H(W̃((s1,s2,·,s4), 0)) = h` for `s3` in one
/// `(s1, s2, s4)` column.
struct ColumnSolver<'p> {
    ev: SliceEval<'p>,
    h: f64,
    j_lo: f64,
    j_hi: f64,
    bracket_order: usize,
    polish_order: usize,
    initial_subdivisions: usize,
    max_doublings: usize,
}

impl<'p> ColumnSolver<'p> {
    /// Scan the `s3` interval for sign changes of the residual by dyadic
    /// subdivision, doubling the resolution until a bracket appears or the
    /// depth budget is exhausted; bisect each bracket at the bracketing
    /// order, then polish at full order by Newton. Distinct roots land in
    /// `scr.roots`, sorted ascending; an empty result means the column lies
    /// outside the perturbed ellipsoid.
    fn solve(&self, s1: f64, s2: f64, s4: f64, scr: &mut SolveScratch) {
        scr.roots.clear();
        let mut s = [s1, s2, 0.0, s4];

        // Initial scan.
        let n0 = self.initial_subdivisions;
        scr.pos.clear();
        scr.val.clear();
        for i in 0..=n0 {
            let x = self.j_lo + (self.j_hi - self.j_lo) * (i as f64) / (n0 as f64);
            s[2] = x;
            scr.pos.push(x);
            scr.val.push(self.ev.residual(self.h, &s, self.bracket_order, &mut scr.chain));
        }

        let mut depth = 0;
        loop {
            // Collect brackets (and exact zeros) at the current resolution.
            let mut found = false;
            for i in 0..scr.pos.len() {
                if scr.val[i] == 0.0 {
                    found = true;
                } else if i + 1 < scr.pos.len()
                    && scr.val[i] * scr.val[i + 1] < 0.0
                {
                    found = true;
                }
            }
            if found {
                break;
            }
            if depth == self.max_doublings {
                return; // outside the perturbed ellipsoid
            }
            depth += 1;
            // Double the resolution, evaluating only the new midpoints.
            let old_n = scr.pos.len();
            let mut pos = Vec::with_capacity(2 * old_n - 1);
            let mut val = Vec::with_capacity(2 * old_n - 1);
            for i in 0..old_n - 1 {
                pos.push(scr.pos[i]);
                val.push(scr.val[i]);
                let m = 0.5 * (scr.pos[i] + scr.pos[i + 1]);
                s[2] = m;
                pos.push(m);
                val.push(self.ev.residual(self.h, &s, self.bracket_order, &mut scr.chain));
            }
            pos.push(scr.pos[old_n - 1]);
            val.push(scr.val[old_n - 1]);
            scr.pos = pos;
            scr.val = val;
        }

        // Refine every bracket found at this resolution.
        for i in 0..scr.pos.len() {
            if scr.val[i] == 0.0 {
                let r = self.polish(scr.pos[i], &mut s, &mut scr.chain);
                scr.roots.push(r);
            } else if i + 1 < scr.pos.len() && scr.val[i] * scr.val[i + 1] < 0.0 {
                let r0 = self.bisect(scr.pos[i], scr.pos[i + 1], scr.val[i], &mut s, &mut scr.chain);
                let r = self.polish(r0, &mut s, &mut scr.chain);
                scr.roots.push(r);
            }
        }

        // Merge near-coincident roots from a grazing tangency.
        scr.roots.sort_unstable_by(f64::total_cmp);
        let mut merged: Vec<f64> = Vec::with_capacity(scr.roots.len());
        for &r in scr.roots.iter() {
            match merged.last() {
                Some(&last) if (r - last).abs() <= ROOT_MERGE_TOL => {}
                _ => merged.push(r),
            }
        }
        scr.roots = merged;
    }

    fn bisect(
        &self,
        mut a: f64,
        mut b: f64,
        mut fa: f64,
        s: &mut [f64; 4],
        chain: &mut RealEvalScratch,
    ) -> f64 {
        while b - a > BISECTION_TOL {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            s[2] = m;
            let fm = self.ev.residual(self.h, s, self.bracket_order, chain);
            if fm == 0.0 {
                return m;
            }
            if fa * fm < 0.0 {
                b = m;
            } else {
                a = m;
                fa = fm;
            }
        }
        0.5 * (a + b)
    }

    /// Newton at the full evaluation order, started from the bisected root of
    /// the bracketing-order residual; returns the iterate with the smallest
    /// residual magnitude.
    fn polish(&self, r0: f64, s: &mut [f64; 4], chain: &mut RealEvalScratch) -> f64 {
        let mut r = r0;
        let mut best = r0;
        let mut best_abs = f64::INFINITY;
        for _ in 0..MAX_NEWTON_ITERS {
            s[2] = r;
            let (f, df) = self.ev.residual_jet(self.h, s, self.polish_order, chain);
            if f.abs() < best_abs {
                best_abs = f.abs();
                best = r;
            }
            if f == 0.0 || df == 0.0 {
                break;
            }
            let next = (r - f / df).clamp(self.j_lo, self.j_hi);
            if (next - r).abs() <= NEWTON_STEP_TOL * r.abs().max(1.0) {
                s[2] = next;
                let (f2, _) = self.ev.residual_jet(self.h, s, self.polish_order, chain);
                if f2.abs() < best_abs {
                    best = next;
                }
                break;
            }
            r = next;
        }
        best
    }
}

// ---------------------------------------------------------------------------
// Public solve and mesh operations
// ---------------------------------------------------------------------------

/// Solve `H(W̃((s1, s2, ·, s4), 0)) = h` for `s3` inside the default
/// bounding interval, bracketing at `bracket_order` with the collapsed
/// center series and polishing at full order. Returns the distinct roots,
/// ascending; empty means the column lies outside the perturbed ellipsoid.
pub fn solve_s3(
    p: &Parameterization,
    s1: f64,
    s2: f64,
    s4: f64,
    h: f64,
    bracket_order: usize,
) -> Result<Vec<f64>> {
    let (_, j) = bounding_intervals(p, h, DEFAULT_EPS)?;
    let solver = ColumnSolver {
        ev: SliceEval::new(p, true),
        h,
        j_lo: j[0],
        j_hi: j[1],
        bracket_order: bracket_order.min(p.order()),
        polish_order: p.order(),
        initial_subdivisions: DEFAULT_INITIAL_SUBDIVISIONS,
        max_doublings: DEFAULT_MAX_DOUBLINGS,
    };
    let mut scr = SolveScratch::new();
    solver.solve(s1, s2, s4, &mut scr);
    Ok(scr.roots)
}

fn cell_centers(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let d = (hi - lo) / (n as f64);
    (0..n).map(|i| lo + d * (i as f64 + 0.5)).collect()
}

fn axis_nodes(axes: &AxisSpec, i: &[f64; 2], j: &[f64; 2]) -> Result<[Vec<f64>; 3]> {
    let counts = match *axes {
        AxisSpec::PerAxis(n) => {
            if n < 2 {
                return Err(Error::InvalidInput(format!(
                    "need at least 2 points per axis, got {n}"
                )));
            }
            [n, n, n]
        }
        AxisSpec::Spacing { planar, vertical } => {
            if !(planar > 0.0) || !(vertical > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "spacings must be positive, got planar={planar}, vertical={vertical}"
                )));
            }
            let n_of = |len: f64, d: f64| ((len / d).ceil() as usize).max(2);
            let np = n_of(i[1] - i[0], planar);
            [np, np, n_of(j[1] - j[0], vertical)]
        }
    };
    Ok([
        cell_centers(i[0], i[1], counts[0]),
        cell_centers(i[0], i[1], counts[1]),
        cell_centers(j[0], j[1], counts[2]),
    ])
}

fn box_nodes(axes: &AxisSpec, bounds: &[[f64; 2]; 3]) -> Result<[Vec<f64>; 3]> {
    let counts = match *axes {
        AxisSpec::PerAxis(n) => {
            if n < 2 {
                return Err(Error::InvalidInput(format!(
                    "need at least 2 points per axis, got {n}"
                )));
            }
            [n, n, n]
        }
        AxisSpec::Spacing { planar, vertical } => {
            if !(planar > 0.0) || !(vertical > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "spacings must be positive, got planar={planar}, vertical={vertical}"
                )));
            }
            let n_of = |len: f64, d: f64| ((len / d).ceil() as usize).max(1);
            [
                n_of(bounds[0][1] - bounds[0][0], planar),
                n_of(bounds[1][1] - bounds[1][0], planar),
                n_of(bounds[2][1] - bounds[2][0], vertical),
            ]
        }
    };
    Ok([
        cell_centers(bounds[0][0], bounds[0][1], counts[0]),
        cell_centers(bounds[1][0], bounds[1][1], counts[1]),
        cell_centers(bounds[2][0], bounds[2][1], counts[2]),
    ])
}

fn canonical_sort(points: &mut Vec<MeshPoint>) {
    points.sort_unstable_by(|a, b| {
        a.s[0]
            .total_cmp(&b.s[0])
            .then_with(|| a.s[1].total_cmp(&b.s[1]))
            .then_with(|| a.s[3].total_cmp(&b.s[3]))
            .then_with(|| a.s[2].total_cmp(&b.s[2]))
    });
}

fn resolve_orders(p: &Parameterization, params: &MeshParams) -> Result<(usize, usize)> {
    let polish_order = params.order.unwrap_or_else(|| p.order());
    if polish_order < 2 || polish_order > p.order() {
        return Err(Error::InvalidInput(format!(
            "evaluation order {polish_order} outside 2..={}",
            p.order()
        )));
    }
    let bracket_order = params
        .bracket_order
        .unwrap_or(match params.strategy {
            Strategy::FullScan => polish_order,
            _ => DEFAULT_BRACKET_ORDER,
        })
        .min(polish_order);
    if params.initial_subdivisions < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 initial subdivisions, got {}",
            params.initial_subdivisions
        )));
    }
    Ok((bracket_order, polish_order))
}

/// Mesh the iso-energetic slice at energy `params.h`. Columns are solved
/// independently (in parallel for the exhaustive strategies; the inside-out
/// sweep is sequential by nature), and the output is canonically sorted, so
/// the result does not depend on the thread count.
pub fn mesh_slice(p: &Parameterization, params: &MeshParams) -> Result<SliceMesh> {
    let (bracket_order, polish_order) = resolve_orders(p, params)?;
    let (i, j) = bounding_intervals(p, params.h, params.eps)?;
    let nodes = axis_nodes(&params.axes, &i, &j)?;

    let solver = ColumnSolver {
        ev: SliceEval::new(p, params.strategy.collapsed()),
        h: params.h,
        j_lo: j[0],
        j_hi: j[1],
        bracket_order,
        polish_order,
        initial_subdivisions: params.initial_subdivisions,
        max_doublings: params.max_doublings,
    };

    let mut points = match params.strategy {
        Strategy::InsideOut => inside_out_mesh(&solver, &nodes, params.probe_margin),
        _ => full_grid_mesh(&solver, &nodes, |_, _| true),
    };
    canonical_sort(&mut points);

    Ok(SliceMesh {
        point: p.collinear().point,
        h: params.h,
        eps: params.eps,
        strategy: params.strategy,
        bracket_order,
        order: polish_order,
        n_axes: [nodes[0].len(), nodes[1].len(), nodes[2].len()],
        axis_nodes: nodes,
        points,
    })
}

/// Mesh an explicit sub-box `bounds = [[s1_lo,s1_hi],[s2_lo,s2_hi],[s4_lo,s4_hi]]`
/// of the slice at energy `params.h`, keeping only the grid columns accepted
/// by `keep(s1, s2)`. The s3 root search still brackets over the full slice
/// interval, and the column solve matches [`mesh_slice`]'s exhaustive
/// strategies (the inside-out pruning is pointless on a hand-picked region,
/// so that strategy degrades to its exhaustive twin here).
pub fn mesh_box<F>(
    p: &Parameterization,
    params: &MeshParams,
    bounds: &[[f64; 2]; 3],
    keep: F,
) -> Result<SliceMesh>
where
    F: Fn(f64, f64) -> bool + Sync,
{
    let (bracket_order, polish_order) = resolve_orders(p, params)?;
    for (k, b) in bounds.iter().enumerate() {
        if !(b[1] > b[0]) {
            return Err(Error::InvalidInput(format!(
                "degenerate box on axis {k}: [{}, {}]",
                b[0], b[1]
            )));
        }
    }
    let (_, j) = bounding_intervals(p, params.h, params.eps)?;
    let nodes = box_nodes(&params.axes, bounds)?;

    let solver = ColumnSolver {
        ev: SliceEval::new(p, params.strategy.collapsed()),
        h: params.h,
        j_lo: j[0],
        j_hi: j[1],
        bracket_order,
        polish_order,
        initial_subdivisions: params.initial_subdivisions,
        max_doublings: params.max_doublings,
    };

    let mut points = full_grid_mesh(&solver, &nodes, keep);
    canonical_sort(&mut points);

    Ok(SliceMesh {
        point: p.collinear().point,
        h: params.h,
        eps: params.eps,
        strategy: params.strategy,
        bracket_order,
        order: polish_order,
        n_axes: [nodes[0].len(), nodes[1].len(), nodes[2].len()],
        axis_nodes: nodes,
        points,
    })
}

fn push_column(out: &mut Vec<MeshPoint>, s1: f64, s2: f64, s4: f64, roots: &[f64]) {
    let mult = roots.len() as u8;
    for &r in roots {
        out.push(MeshPoint {
            s: [s1, s2, r, s4],
            mult,
        });
    }
}

fn full_grid_mesh<F>(solver: &ColumnSolver, nodes: &[Vec<f64>; 3], keep: F) -> Vec<MeshPoint>
where
    F: Fn(f64, f64) -> bool + Sync,
{
    let (n1, n2) = (nodes[0].len(), nodes[1].len());
    (0..n1 * n2)
        .into_par_iter()
        .map_init(SolveScratch::new, |scr, idx| {
            let s1 = nodes[0][idx / n2];
            let s2 = nodes[1][idx % n2];
            let mut out = Vec::new();
            if keep(s1, s2) {
                for &s4 in &nodes[2] {
                    solver.solve(s1, s2, s4, scr);
                    push_column(&mut out, s1, s2, s4, &scr.roots);
                }
            }
            out
        })
        .collect::<Vec<Vec<MeshPoint>>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Sweep a gridded axis from its innermost node outward in both directions;
/// `probe(i)` solves whatever hangs below the node and reports whether
/// anything was found. A direction is abandoned once `margin + 1`
/// consecutive probes come back empty.
fn outward_scan(n: usize, margin: usize, mut probe: impl FnMut(usize) -> bool) -> bool {
    let mut any = false;
    let mut misses = 0usize;
    for i in n / 2..n {
        if probe(i) {
            any = true;
            misses = 0;
        } else {
            misses += 1;
            if misses > margin {
                break;
            }
        }
    }
    misses = 0;
    for i in (0..n / 2).rev() {
        if probe(i) {
            any = true;
            misses = 0;
        } else {
            misses += 1;
            if misses > margin {
                break;
            }
        }
    }
    any
}

fn inside_out_mesh(
    solver: &ColumnSolver,
    nodes: &[Vec<f64>; 3],
    margin: usize,
) -> Vec<MeshPoint> {
    let mut scr = SolveScratch::new();
    let mut out = Vec::new();
    outward_scan(nodes[0].len(), margin, |i1| {
        let s1 = nodes[0][i1];
        outward_scan(nodes[1].len(), margin, |i2| {
            let s2 = nodes[1][i2];
            outward_scan(nodes[2].len(), margin, |i4| {
                let s4 = nodes[2][i4];
                solver.solve(s1, s2, s4, &mut scr);
                push_column(&mut out, s1, s2, s4, &scr.roots);
                !scr.roots.is_empty()
            })
        })
    });
    out
}

/// Largest deviation `|H(W̃(ŝ, 0)) - h|` over the mesh, evaluated with the
/// full 5-variable series at the mesh's evaluation order (an independent
/// check of the collapsed-series solves).
pub fn max_energy_deviation(p: &Parameterization, mesh: &SliceMesh) -> f64 {
    let ev = SliceEval::new(p, false);
    mesh.points
        .par_iter()
        .map_init(RealEvalScratch::new, |chain, pt| {
            ev.residual(mesh.h, &pt.s, mesh.order, chain).abs()
        })
        .reduce(|| 0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Strategy benchmark
// ---------------------------------------------------------------------------

/// Timings and output of one strategy in [`bench_strategies`].
#[derive(Debug, Clone)]
pub struct StrategyBench {
    pub strategy: Strategy,
    pub wall_seconds: f64,
    /// Process CPU time, the machine-independent basis for comparing
    /// strategies (matches wall time on a single thread).
    pub cpu_seconds: f64,
    pub mesh: SliceMesh,
}

/// Run the four strategies on the same slice parameters (each with its
/// default bracketing order) and report per-strategy timings and meshes.
pub fn bench_strategies(p: &Parameterization, base: &MeshParams) -> Result<Vec<StrategyBench>> {
    let mut out = Vec::with_capacity(4);
    for strategy in Strategy::ALL {
        let mut params = base.clone();
        params.strategy = strategy;
        params.bracket_order = None;
        let wall = std::time::Instant::now();
        let cpu = cpu_time::ProcessTime::now();
        let mesh = mesh_slice(p, &params)?;
        out.push(StrategyBench {
            strategy,
            wall_seconds: wall.elapsed().as_secs_f64(),
            cpu_seconds: cpu.elapsed().as_secs_f64(),
            mesh,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
