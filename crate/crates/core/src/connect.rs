//! Heteroclinic connections between the center manifolds of L1 and L2.
//!
//! The pipeline has three stages. First, iso-energetic mesh points of the two
//! center manifolds are lifted a small distance `delta` along their
//! hyperbolic fibers and propagated to a fixed Poincaré section through the
//! Moon, giving two clouds of section states ([`propagate_cloud`]). Second,
//! for every arrival of the stable-side cloud the nearest unstable-side
//! arrival is found; pairs closer than a tolerance `xi` become candidate
//! connections, and the whole distance field is kept for region-of-interest
//! maps ([`match_candidates`]). Third, each candidate seeds a
//! multiple-shooting boundary-value system whose unknowns are the two
//! manifold tags, the two flight times, and the shooting nodes of both arcs;
//! a Newton iteration with minimum-norm corrections (the system is
//! underdetermined by two: the connection set is two-dimensional) drives the
//! residual below tolerance ([`ShootingSystem`]). Variants with pinned
//! unknowns give planar connections and grid scans; re-meshing helpers
//! refine the regions where candidates accumulate.

use crate::dynamics::{self, grad_hamiltonian, hamiltonian, Lpoint, State};
use crate::error::{Error, Result};
use crate::linalg::{kernel_dimension, min_norm_solve};
use crate::parameterize::{FiberJet, ManifoldKind, Parameterization};
use crate::polyalg::RealEvalScratch;
use crate::propagate::{
    integrate_fixed_times, propagate_plain, propagate_rtbp, propagate_stm, CrossDir, OdeOptions,
    PropSpec, SectionEvent, StopReason, CROSSING_G_TOL,
};
use crate::slicing::{mesh_box, MeshParams, SliceMesh};
use kdtree::distance::squared_euclidean;
use kdtree::KdTree;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Default magnitude of the fiber displacement used to leave the center
/// manifold along the hyperbolic directions.
pub const DEFAULT_DELTA: f64 = 1e-3;
/// Candidate acceptance distance for the coarse (first-pass) matching.
pub const DEFAULT_XI_LOWRES: f64 = 1e-4;
/// Candidate acceptance distance after re-meshing a region of interest.
pub const DEFAULT_XI_REMESH: f64 = 1e-3;
/// Refinement stops when the sup-norm of the shooting residual falls here.
pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 20;
/// The Newton step is halved at most this many times when the residual grows.
pub const NEWTON_MAX_HALVINGS: usize = 5;
/// A correction larger than this (2-norm) is treated as divergence.
pub const NEWTON_STEP_LIMIT: f64 = 1.0;
/// Target time length of one shooting sub-arc; arcs are split so no segment
/// integrates longer than this.
pub const SUBARC_TIME: f64 = 1.5;
/// Refined records closer than this in the joint tag space are duplicates.
pub const DEDUP_TOL: f64 = 1e-6;
/// Default cap on the flight time to the requested section crossing.
pub const DEFAULT_MAX_FLIGHT: f64 = 50.0;
/// Cloud arrivals must sit on the energy level within this.
pub const CLOUD_ENERGY_TOL: f64 = 1e-10;
/// Relative singular-value threshold of the kernel-dimension check.
pub const KERNEL_SV_REL_TOL: f64 = 1e-8;
/// Rectangle re-mesh regions are widened by this fraction of their width.
pub const RECT_FATTEN: f64 = 0.10;
/// Curve re-mesh bands are this many times the worst fit residual wide.
pub const CURVE_BAND_FACTOR: f64 = 3.0;
pub const CURVE_FIT_DEGREE: usize = 5;
/// End-to-end single-shot re-integration of a record must close within this.
pub const RECORD_CLOSURE_TOL: f64 = 1e-8;
/// Output step of the dense re-integration behind the record diagnostics.
const DIAG_OUTPUT_STEP: f64 = 1e-3;

/// The Poincaré section: the plane through the Moon orthogonal to the x
/// axis, crossed in either direction.
pub fn moon_section(mu: f64) -> SectionEvent {
    SectionEvent {
        coord: 0,
        offset: mu - 1.0,
        dir: CrossDir::Any,
    }
}

/// Signed fiber displacement of magnitude `magnitude` pointing at the Moon.
pub fn moonward_delta(p: &Parameterization, magnitude: f64) -> f64 {
    p.moonward_fiber_sign() * magnitude.abs()
}

// ---------------------------------------------------------------------------
// Section clouds
// ---------------------------------------------------------------------------

/// Why a mesh point never produced a section arrival.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    /// The trajectory entered the lunar guard sphere.
    MoonStop,
    /// The flight-time cap was reached before the requested crossing.
    TimedOut,
    /// The integrator failed (step underflow or step-count cap).
    IntegratorFailed,
}

/// One manifold point carried to the section.
#[derive(Debug, Clone, Copy)]
pub struct CloudPoint {
    /// Center-manifold tag (s1, s2, s3, s4) of the origin mesh point.
    pub s: [f64; 4],
    /// Arrival state on the section.
    pub state: State,
    /// Signed flight time to the arrival.
    pub time: f64,
}

/// All arrivals of one manifold branch on the section, plus the points that
/// never arrived and why.
#[derive(Debug, Clone)]
pub struct SectionCloud {
    pub point: Lpoint,
    pub kind: ManifoldKind,
    pub h: f64,
    /// Signed fiber displacement the mesh was lifted by.
    pub delta: f64,
    /// Section crossing index the arrivals correspond to.
    pub crossings: usize,
    pub points: Vec<CloudPoint>,
    pub dropped: Vec<([f64; 4], DropReason)>,
}

impl SectionCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Every arrival must sit on the section (within [`CROSSING_G_TOL`]) and
    /// on the energy level (within [`CLOUD_ENERGY_TOL`]). The energy bound
    /// assumes the expansion order is high enough for the slice radius; see
    /// [`SectionCloud::check_with`] for an explicit tolerance.
    pub fn check(&self, mu: f64) -> Result<()> {
        self.check_with(mu, CROSSING_G_TOL, CLOUD_ENERGY_TOL)
    }

    /// [`SectionCloud::check`] with explicit section and energy tolerances.
    pub fn check_with(&self, mu: f64, g_tol: f64, h_tol: f64) -> Result<()> {
        let g = moon_section(mu);
        for pt in &self.points {
            let gv = g.g(&pt.state).abs();
            if gv > g_tol {
                return Err(Error::NoConvergence {
                    what: "section cloud",
                    detail: format!("|g| = {gv:.3e} off the section at tag {:?}", pt.s),
                });
            }
            let dh = (hamiltonian(mu, &pt.state) - self.h).abs();
            if dh > h_tol {
                return Err(Error::NoConvergence {
                    what: "section cloud",
                    detail: format!("|H - h| = {dh:.3e} off the level at tag {:?}", pt.s),
                });
            }
        }
        Ok(())
    }
}

enum CloudOutcome {
    Arrived(CloudPoint),
    Dropped([f64; 4], DropReason),
}

/// Lift every tag along the fiber jet and fly it to the `crossings`-th
/// section crossing. The time direction follows the manifold kind: unstable
/// branches fly forward, stable branches backward. Points that enter the
/// lunar guard sphere of radius `guard` or exhaust `max_time` are recorded
/// as dropped, not errors.
pub fn propagate_cloud(
    p: &Parameterization,
    jet: &FiberJet,
    tags: &[[f64; 4]],
    h: f64,
    crossings: usize,
    max_time: f64,
    guard: f64,
    opts: &OdeOptions,
) -> Result<SectionCloud> {
    if crossings == 0 {
        return Err(Error::InvalidInput("need at least one crossing".into()));
    }
    if !(max_time > 0.0) {
        return Err(Error::InvalidInput(format!(
            "max flight time must be positive, got {max_time}"
        )));
    }
    if !(guard > 0.0) {
        return Err(Error::InvalidInput(format!(
            "lunar guard radius must be positive, got {guard}"
        )));
    }
    let mu = p.collinear().mu;
    let order = p.order();
    let dir = match p.kind() {
        ManifoldKind::CenterUnstable => 1.0,
        ManifoldKind::CenterStable => -1.0,
    };
    let spec = PropSpec {
        events: vec![moon_section(mu)],
        stop_at: Some((0, crossings)),
        moon_guard: Some(guard),
        record_dense: false,
    };
    let outcomes: Vec<CloudOutcome> = tags
        .par_iter()
        .map_init(RealEvalScratch::new, |scr, tag| {
            let y0 = jet.eval_state(tag, order, scr);
            match propagate_rtbp(mu, &y0, dir * max_time, opts, &spec) {
                Ok(out) => match out.reason {
                    StopReason::EventReached(_) => CloudOutcome::Arrived(CloudPoint {
                        s: *tag,
                        state: out.y,
                        time: out.t,
                    }),
                    StopReason::MoonImpact => CloudOutcome::Dropped(*tag, DropReason::MoonStop),
                    StopReason::TimeEnd => CloudOutcome::Dropped(*tag, DropReason::TimedOut),
                },
                Err(_) => CloudOutcome::Dropped(*tag, DropReason::IntegratorFailed),
            }
        })
        .collect();

    let mut points = Vec::new();
    let mut dropped = Vec::new();
    for oc in outcomes {
        match oc {
            CloudOutcome::Arrived(pt) => points.push(pt),
            CloudOutcome::Dropped(tag, why) => dropped.push((tag, why)),
        }
    }
    Ok(SectionCloud {
        point: p.collinear().point,
        kind: p.kind(),
        h,
        delta: jet.delta,
        crossings,
        points,
        dropped,
    })
}

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

/// A close pair of section arrivals: the seed of one Newton refinement.
#[derive(Debug, Clone, Copy)]
pub struct CandidatePair {
    pub s_s: [f64; 4],
    pub s_u: [f64; 4],
    /// Flight times of the two arcs (stable side negative).
    pub t_s: f64,
    pub t_u: f64,
    /// Euclidean distance of the two arrival states.
    pub d: f64,
}

/// Distance-field sample: one stable-side tag, its distance to the nearest
/// unstable arrival, and that arrival's index in the unstable cloud.
#[derive(Debug, Clone, Copy)]
pub struct FieldSample {
    pub s: [f64; 4],
    pub d: f64,
    pub nearest: usize,
}

fn state_key(y: &State) -> [f64; 6] {
    [y[0], y[1], y[2], y[3], y[4], y[5]]
}

/// For every stable-side arrival, find the nearest unstable-side arrival in
/// the full six-dimensional state space. Pairs with distance at most `xi`
/// are returned as candidates; the complete field (one sample per stable
/// point, in cloud order) is returned alongside for region maps.
pub fn match_candidates(
    cloud_s: &SectionCloud,
    cloud_u: &SectionCloud,
    xi: f64,
) -> Result<(Vec<CandidatePair>, Vec<FieldSample>)> {
    if cloud_s.is_empty() || cloud_u.is_empty() {
        return Err(Error::InvalidInput("cannot match an empty cloud".into()));
    }
    if (cloud_s.h - cloud_u.h).abs() > 1e-13 {
        return Err(Error::InvalidInput(format!(
            "energy mismatch between clouds: {} vs {}",
            cloud_s.h, cloud_u.h
        )));
    }
    if !(xi > 0.0) {
        return Err(Error::InvalidInput(format!("xi must be positive, got {xi}")));
    }
    let mut tree: KdTree<f64, usize, [f64; 6]> = KdTree::new(6);
    for (i, pt) in cloud_u.points.iter().enumerate() {
        tree.add(state_key(&pt.state), i).map_err(|e| Error::InvalidInput(format!(
            "non-finite section state in unstable cloud: {e:?}"
        )))?;
    }
    let mut pairs = Vec::new();
    let mut field = Vec::with_capacity(cloud_s.len());
    for sp in &cloud_s.points {
        let q = state_key(&sp.state);
        let hits = tree.nearest(&q, 1, &squared_euclidean).map_err(|e| {
            Error::InvalidInput(format!("non-finite query state in stable cloud: {e:?}"))
        })?;
        let (d2, &idx) = hits[0];
        let d = d2.sqrt();
        field.push(FieldSample { s: sp.s, d, nearest: idx });
        if d <= xi {
            let up = &cloud_u.points[idx];
            pairs.push(CandidatePair {
                s_s: sp.s,
                s_u: up.s,
                t_s: sp.time,
                t_u: up.time,
                d,
            });
        }
    }
    Ok((pairs, field))
}

/// Exhaustive reference implementation of [`match_candidates`] (quadratic
/// cost); the accelerated search is validated against it.
pub fn match_candidates_brute(
    cloud_s: &SectionCloud,
    cloud_u: &SectionCloud,
    xi: f64,
) -> Result<(Vec<CandidatePair>, Vec<FieldSample>)> {
    if cloud_s.is_empty() || cloud_u.is_empty() {
        return Err(Error::InvalidInput("cannot match an empty cloud".into()));
    }
    let mut pairs = Vec::new();
    let mut field = Vec::with_capacity(cloud_s.len());
    for sp in &cloud_s.points {
        let mut best = (f64::INFINITY, usize::MAX);
        for (i, up) in cloud_u.points.iter().enumerate() {
            let d2 = (sp.state - up.state).norm_squared();
            if d2 < best.0 {
                best = (d2, i);
            }
        }
        let d = best.0.sqrt();
        field.push(FieldSample { s: sp.s, d, nearest: best.1 });
        if d <= xi {
            let up = &cloud_u.points[best.1];
            pairs.push(CandidatePair {
                s_s: sp.s,
                s_u: up.s,
                t_s: sp.time,
                t_u: up.time,
                d,
            });
        }
    }
    Ok((pairs, field))
}

// ---------------------------------------------------------------------------
// Multiple shooting
// ---------------------------------------------------------------------------

/// The two fiber jets a refinement differentiates through: the unstable
/// branch the connection departs from and the stable branch it arrives at.
pub struct Jets<'a> {
    pub unstable: &'a FiberJet,
    pub stable: &'a FiberJet,
}

/// Which arc of a connection a constraint refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Unstable,
    Stable,
}

/// Which unknowns a refinement freezes at their seed values.
#[derive(Debug, Clone)]
pub enum PinSpec {
    /// All unknowns free: the generic two-parameter connection family.
    Free,
    /// Pin s3 and s4 of both tags to stay in the planar subproblem.
    Planar,
    /// Pin tag coordinates (indices 0..4 within each tag) per side.
    Tags { unstable: Vec<usize>, stable: Vec<usize> },
    /// Pin explicit indices of the unknown vector (see  [`ShootingSystem`]
    /// layout accessors).
    Raw(Vec<usize>),
}

/// Two-point boundary-value system for one heteroclinic connection.
///
/// Unknown vector layout (length `10 + 6 (m_u + m_s + 2)`):
/// unstable tag (4), unstable flight time (1), unstable shooting nodes
/// (`6 (m_u + 1)`), then the same for the stable side. Equations (length
/// `6 (m_u + m_s + 3) + 2`): departure node on the unstable manifold (6),
/// unstable sub-arcs chain under the flow (6 per segment), the stable twins,
/// the matching node on the section (1) and on the energy level (1), and the
/// two arcs meeting in full state (6). Two more unknowns than equations: the
/// connection set is a two-parameter family, so Newton corrections are
/// minimum-norm least-squares solutions.
#[derive(Debug, Clone)]
pub struct ShootingSystem {
    pub mu: f64,
    pub h: f64,
    pub m_u: usize,
    pub m_s: usize,
    pub section: SectionEvent,
    pub opts: OdeOptions,
}

impl ShootingSystem {
    pub fn new(mu: f64, h: f64, m_u: usize, m_s: usize, opts: OdeOptions) -> Result<Self> {
        if m_u == 0 || m_s == 0 {
            return Err(Error::InvalidInput(format!(
                "need at least one shooting segment per arc, got ({m_u}, {m_s})"
            )));
        }
        Ok(ShootingSystem {
            mu,
            h,
            m_u,
            m_s,
            section: moon_section(mu),
            opts,
        })
    }

    /// Segment counts from the arc flight times: no sub-arc longer than
    /// [`SUBARC_TIME`].
    pub fn for_times(mu: f64, h: f64, t_u: f64, t_s: f64, opts: OdeOptions) -> Result<Self> {
        let m = |t: f64| ((t.abs() / SUBARC_TIME).ceil() as usize).max(1);
        ShootingSystem::new(mu, h, m(t_u), m(t_s), opts)
    }

    pub fn n_unknowns(&self) -> usize {
        10 + 6 * (self.m_u + self.m_s + 2)
    }

    pub fn n_equations(&self) -> usize {
        2 + 6 * (self.m_u + self.m_s + 3)
    }

    /// Index of the unstable tag block (4 entries).
    pub fn i_su(&self) -> usize {
        0
    }

    /// Index of the unstable flight time.
    pub fn i_tu(&self) -> usize {
        4
    }

    /// Index of unstable shooting node `i` (6 entries), `i = 0 ..= m_u`.
    pub fn i_xu(&self, i: usize) -> usize {
        5 + 6 * i
    }

    /// Index of the stable tag block (4 entries).
    pub fn i_ss(&self) -> usize {
        5 + 6 * (self.m_u + 1)
    }

    /// Index of the stable flight time.
    pub fn i_ts(&self) -> usize {
        self.i_ss() + 4
    }

    /// Index of stable shooting node `i` (6 entries), `i = 0 ..= m_s`.
    pub fn i_xs(&self, i: usize) -> usize {
        self.i_ss() + 5 + 6 * i
    }

    /// Unknown indices of the four out-of-plane tag coordinates.
    pub fn planar_pin_indices(&self) -> [usize; 4] {
        [2, 3, self.i_ss() + 2, self.i_ss() + 3]
    }

    /// Resolve a pin request to sorted unknown indices, rejecting sets that
    /// would over-determine the two-parameter family. The planar quadruple
    /// counts as two effective constraints: on the planar invariant subspace
    /// the out-of-plane equations hold identically.
    pub fn resolve_pins(&self, pins: &PinSpec) -> Result<Vec<usize>> {
        let mut idx: Vec<usize> = match pins {
            PinSpec::Free => Vec::new(),
            PinSpec::Planar => self.planar_pin_indices().to_vec(),
            PinSpec::Tags { unstable, stable } => {
                let mut v = Vec::with_capacity(unstable.len() + stable.len());
                for (coords, base) in [(unstable, self.i_su()), (stable, self.i_ss())] {
                    for &k in coords {
                        if k >= 4 {
                            return Err(Error::InvalidInput(format!(
                                "tag coordinate index {k} outside 0..4"
                            )));
                        }
                        v.push(base + k);
                    }
                }
                v
            }
            PinSpec::Raw(v) => v.clone(),
        };
        idx.sort_unstable();
        idx.dedup();
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n_unknowns()) {
            return Err(Error::InvalidInput(format!(
                "pinned index {bad} outside the {}-entry unknown vector",
                self.n_unknowns()
            )));
        }
        let planar = self.planar_pin_indices();
        let mut effective = idx.len();
        if planar.iter().all(|i| idx.contains(i)) {
            effective -= 2;
        }
        if effective > 2 {
            return Err(Error::InvalidInput(format!(
                "{} effective pins over-determine the two-parameter connection family",
                effective
            )));
        }
        Ok(idx)
    }

    /// Initial unknown vector from a candidate pair: tags and times from the
    /// pair, shooting nodes by equal-time sampling of the two arcs.
    pub fn seed(&self, jets: &Jets, pair: &CandidatePair) -> Result<DVector<f64>> {
        let mut x = DVector::zeros(self.n_unknowns());
        let mut scr = RealEvalScratch::new();
        let f = |_t: f64, y: &State| dynamics::field(self.mu, y);

        x.rows_mut(self.i_su(), 4).copy_from_slice(&pair.s_u);
        x[self.i_tu()] = pair.t_u;
        let y0u = jets.unstable.eval_state(&pair.s_u, jets.unstable.order(), &mut scr);
        let tau_u = pair.t_u / self.m_u as f64;
        let times_u: Vec<f64> = (1..=self.m_u).map(|i| tau_u * i as f64).collect();
        let nodes_u = integrate_fixed_times(&f, 0.0, &y0u, &times_u, &self.opts)?;
        x.rows_mut(self.i_xu(0), 6).copy_from(&y0u);
        for (i, y) in nodes_u.iter().enumerate() {
            x.rows_mut(self.i_xu(i + 1), 6).copy_from(y);
        }

        x.rows_mut(self.i_ss(), 4).copy_from_slice(&pair.s_s);
        x[self.i_ts()] = pair.t_s;
        let y0s = jets.stable.eval_state(&pair.s_s, jets.stable.order(), &mut scr);
        let tau_s = pair.t_s / self.m_s as f64;
        let times_s: Vec<f64> = (1..=self.m_s).map(|i| tau_s * i as f64).collect();
        let nodes_s = integrate_fixed_times(&f, 0.0, &y0s, &times_s, &self.opts)?;
        x.rows_mut(self.i_xs(0), 6).copy_from(&y0s);
        for (i, y) in nodes_s.iter().enumerate() {
            x.rows_mut(self.i_xs(i + 1), 6).copy_from(y);
        }
        Ok(x)
    }

    fn tag_at(x: &DVector<f64>, at: usize) -> [f64; 4] {
        [x[at], x[at + 1], x[at + 2], x[at + 3]]
    }

    fn node_at(x: &DVector<f64>, at: usize) -> State {
        State::new(x[at], x[at + 1], x[at + 2], x[at + 3], x[at + 4], x[at + 5])
    }

    /// Residual of the shooting system at `x`.
    pub fn residual(&self, jets: &Jets, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut r = DVector::zeros(self.n_equations());
        let mut scr = RealEvalScratch::new();
        let mut row = 0;

        let su = Self::tag_at(x, self.i_su());
        let wu = jets.unstable.eval_state(&su, jets.unstable.order(), &mut scr);
        r.rows_mut(row, 6).copy_from(&(wu - Self::node_at(x, self.i_xu(0))));
        row += 6;
        let tau_u = x[self.i_tu()] / self.m_u as f64;
        for i in 0..self.m_u {
            let yi = Self::node_at(x, self.i_xu(i));
            let phi = propagate_plain(self.mu, &yi, tau_u, &self.opts)?;
            r.rows_mut(row, 6).copy_from(&(phi - Self::node_at(x, self.i_xu(i + 1))));
            row += 6;
        }

        let ss = Self::tag_at(x, self.i_ss());
        let ws = jets.stable.eval_state(&ss, jets.stable.order(), &mut scr);
        r.rows_mut(row, 6).copy_from(&(ws - Self::node_at(x, self.i_xs(0))));
        row += 6;
        let tau_s = x[self.i_ts()] / self.m_s as f64;
        for i in 0..self.m_s {
            let yi = Self::node_at(x, self.i_xs(i));
            let phi = propagate_plain(self.mu, &yi, tau_s, &self.opts)?;
            r.rows_mut(row, 6).copy_from(&(phi - Self::node_at(x, self.i_xs(i + 1))));
            row += 6;
        }

        let ym = Self::node_at(x, self.i_xu(self.m_u));
        r[row] = self.section.g(&ym);
        r[row + 1] = hamiltonian(self.mu, &ym) - self.h;
        r.rows_mut(row + 2, 6)
            .copy_from(&(ym - Self::node_at(x, self.i_xs(self.m_s))));
        Ok(r)
    }

    /// Residual and its Jacobian. Flow differentials come from the first
    /// variational equations, manifold differentials from the fiber jets,
    /// and the scalar rows from the exact section/energy gradients.
    pub fn residual_jacobian(&self, jets: &Jets, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (ne, nu) = (self.n_equations(), self.n_unknowns());
        let mut r = DVector::zeros(ne);
        let mut j = DMatrix::zeros(ne, nu);
        let mut scr = RealEvalScratch::new();
        let mut row = 0;

        let arc = |row: &mut usize,
                       r: &mut DVector<f64>,
                       j: &mut DMatrix<f64>,
                       jet: &FiberJet,
                       i_s: usize,
                       i_t: usize,
                       i_x: &dyn Fn(usize) -> usize,
                       m: usize,
                       scr: &mut RealEvalScratch|
         -> Result<()> {
            let tag = Self::tag_at(x, i_s);
            let (w, dw) = jet.eval_jet(&tag, jet.order(), scr);
            r.rows_mut(*row, 6).copy_from(&(w - Self::node_at(x, i_x(0))));
            for c in 0..4 {
                j.view_mut((*row, i_s + c), (6, 1)).copy_from(&dw[c]);
            }
            for k in 0..6 {
                j[(*row + k, i_x(0) + k)] = -1.0;
            }
            *row += 6;
            let tau = x[i_t] / m as f64;
            for i in 0..m {
                let yi = Self::node_at(x, i_x(i));
                let (phi, stm, _) = propagate_stm(self.mu, &yi, tau, &self.opts)?;
                r.rows_mut(*row, 6).copy_from(&(phi - Self::node_at(x, i_x(i + 1))));
                j.view_mut((*row, i_x(i)), (6, 6)).copy_from(&stm);
                let dphi_dt = dynamics::field(self.mu, &phi) / m as f64;
                j.view_mut((*row, i_t), (6, 1)).copy_from(&dphi_dt);
                for k in 0..6 {
                    j[(*row + k, i_x(i + 1) + k)] = -1.0;
                }
                *row += 6;
            }
            Ok(())
        };

        let ixu = |i: usize| self.i_xu(i);
        arc(&mut row, &mut r, &mut j, jets.unstable, self.i_su(), self.i_tu(), &ixu, self.m_u, &mut scr)?;
        let ixs = |i: usize| self.i_xs(i);
        arc(&mut row, &mut r, &mut j, jets.stable, self.i_ss(), self.i_ts(), &ixs, self.m_s, &mut scr)?;

        let im_u = self.i_xu(self.m_u);
        let im_s = self.i_xs(self.m_s);
        let ym = Self::node_at(x, im_u);
        r[row] = self.section.g(&ym);
        j[(row, im_u + self.section.coord)] = 1.0;
        r[row + 1] = hamiltonian(self.mu, &ym) - self.h;
        let gh = grad_hamiltonian(self.mu, &ym);
        for k in 0..6 {
            j[(row + 1, im_u + k)] = gh[k];
        }
        r.rows_mut(row + 2, 6).copy_from(&(ym - Self::node_at(x, im_s)));
        for k in 0..6 {
            j[(row + 2 + k, im_u + k)] = 1.0;
            j[(row + 2 + k, im_s + k)] = -1.0;
        }
        Ok((r, j))
    }

    /// Newton iteration with minimum-norm corrections from the seed `x0`,
    /// with the unknowns in `pins` frozen at their seed values. Returns the
    /// converged vector and the iteration statistics.
    pub fn newton(&self, jets: &Jets, x0: DVector<f64>, pins: &PinSpec) -> Result<(DVector<f64>, NewtonStats)> {
        let pinned = self.resolve_pins(pins)?;
        let free: Vec<usize> = (0..self.n_unknowns()).filter(|i| !pinned.contains(i)).collect();
        let mut x = x0;
        for iter in 0..NEWTON_MAX_ITER {
            let (r, j) = self.residual_jacobian(jets, &x)?;
            let rnorm = r.amax();
            if rnorm < NEWTON_TOL {
                let kernel_dim = kernel_dimension(&j, KERNEL_SV_REL_TOL);
                let rank = self.n_unknowns() - kernel_dim;
                return Ok((
                    x,
                    NewtonStats {
                        iters: iter,
                        resid_inf: rnorm,
                        rank,
                        kernel_dim,
                    },
                ));
            }
            let jr = j.select_columns(free.iter());
            let sol = min_norm_solve(&jr, &(-&r))?;
            let expected = jr.nrows().min(jr.ncols());
            if sol.rank < expected {
                return Err(Error::NoConvergence {
                    what: "connection refinement",
                    detail: format!(
                        "Jacobian rank collapsed to {} (expected {expected}) at iteration {iter}",
                        sol.rank
                    ),
                });
            }
            if sol.x.norm() > NEWTON_STEP_LIMIT {
                return Err(Error::NoConvergence {
                    what: "connection refinement",
                    detail: format!(
                        "step norm {:.3e} diverged at iteration {iter}",
                        sol.x.norm()
                    ),
                });
            }
            let mut dx = DVector::zeros(self.n_unknowns());
            for (k, &i) in free.iter().enumerate() {
                dx[i] = sol.x[k];
            }
            // Halve the step while it makes the residual worse.
            let mut scale = 1.0;
            for _ in 0..=NEWTON_MAX_HALVINGS {
                let trial = &x + &dx * scale;
                if self.residual(jets, &trial)?.amax() < rnorm {
                    break;
                }
                scale *= 0.5;
            }
            x += &dx * scale;
        }
        Err(Error::NoConvergence {
            what: "connection refinement",
            detail: format!("no convergence in {NEWTON_MAX_ITER} iterations"),
        })
    }

    /// Seed from a candidate pair and refine it into a connection record.
    pub fn refine(&self, jets: &Jets, pair: &CandidatePair, pins: &PinSpec) -> Result<ConnectionRecord> {
        let x0 = self.seed(jets, pair)?;
        let (x, stats) = self.newton(jets, x0, pins)?;
        self.record_from(&x, &stats)
    }

    /// Assemble a [`ConnectionRecord`] from a converged unknown vector.
    pub fn record_from(&self, x: &DVector<f64>, stats: &NewtonStats) -> Result<ConnectionRecord> {
        let nodes_u: Vec<State> = (0..=self.m_u).map(|i| Self::node_at(x, self.i_xu(i))).collect();
        let nodes_s: Vec<State> = (0..=self.m_s).map(|i| Self::node_at(x, self.i_xs(i))).collect();
        let t_u = x[self.i_tu()];
        let t_s = x[self.i_ts()];
        let (dmin_u, zmax_u) = arc_extrema(self.mu, &nodes_u[0], t_u, &self.opts)?;
        let (dmin_s, zmax_s) = arc_extrema(self.mu, &nodes_s[0], t_s, &self.opts)?;
        Ok(ConnectionRecord {
            h: self.h,
            s_u: Self::tag_at(x, self.i_su()),
            s_s: Self::tag_at(x, self.i_ss()),
            t_u,
            t_s,
            nodes_u,
            nodes_s,
            resid_inf: stats.resid_inf,
            iters: stats.iters,
            rank: stats.rank,
            kernel_dim: stats.kernel_dim,
            dmin_moon: dmin_u.min(dmin_s),
            zmax: zmax_u.max(zmax_s),
            t_total: t_u.abs() + t_s.abs(),
        })
    }
}

/// Convergence statistics of one Newton refinement.
#[derive(Debug, Clone, Copy)]
pub struct NewtonStats {
    pub iters: usize,
    pub resid_inf: f64,
    /// Numerical rank of the full Jacobian at the solution.
    pub rank: usize,
    /// Dimension of its kernel; 2 for the free two-parameter family.
    pub kernel_dim: usize,
}

/// Extrema along one arc, sampled by dense re-integration at a fixed output
/// step: (minimum Moon distance, maximum |z|).
pub fn arc_extrema(mu: f64, y0: &State, t: f64, opts: &OdeOptions) -> Result<(f64, f64)> {
    let n = (t.abs() / DIAG_OUTPUT_STEP).ceil() as usize;
    let times: Vec<f64> = (1..=n).map(|i| t * (i as f64) / (n as f64)).collect();
    let f = |_t: f64, y: &State| dynamics::field(mu, y);
    let states = integrate_fixed_times(&f, 0.0, y0, &times, opts)?;
    let mut dmin = dynamics::moon_distance(mu, y0);
    let mut zmax = y0[2].abs();
    for y in &states {
        dmin = dmin.min(dynamics::moon_distance(mu, y));
        zmax = zmax.max(y[2].abs());
    }
    Ok((dmin, zmax))
}

/// One refined heteroclinic connection.
#[derive(Debug, Clone)]
pub struct ConnectionRecord {
    pub h: f64,
    pub s_u: [f64; 4],
    pub s_s: [f64; 4],
    pub t_u: f64,
    pub t_s: f64,
    pub nodes_u: Vec<State>,
    pub nodes_s: Vec<State>,
    pub resid_inf: f64,
    pub iters: usize,
    pub rank: usize,
    pub kernel_dim: usize,
    /// Minimum Moon distance over both arcs (dense re-integration).
    pub dmin_moon: f64,
    /// Maximum |z| over both arcs.
    pub zmax: f64,
    /// Total flight time |T_u| + |T_s|.
    pub t_total: f64,
}

impl ConnectionRecord {
    /// Rebuild the unknown vector this record came from.
    pub fn to_vector(&self, sys: &ShootingSystem) -> DVector<f64> {
        let mut x = DVector::zeros(sys.n_unknowns());
        x.rows_mut(sys.i_su(), 4).copy_from_slice(&self.s_u);
        x[sys.i_tu()] = self.t_u;
        for (i, y) in self.nodes_u.iter().enumerate() {
            x.rows_mut(sys.i_xu(i), 6).copy_from(y);
        }
        x.rows_mut(sys.i_ss(), 4).copy_from_slice(&self.s_s);
        x[sys.i_ts()] = self.t_s;
        for (i, y) in self.nodes_s.iter().enumerate() {
            x.rows_mut(sys.i_xs(i), 6).copy_from(y);
        }
        x
    }

    /// The shooting system sized for this record.
    pub fn system(&self, mu: f64, opts: OdeOptions) -> Result<ShootingSystem> {
        ShootingSystem::new(mu, self.h, self.nodes_u.len() - 1, self.nodes_s.len() - 1, opts)
    }

    /// Re-check every invariant of a refined record: shooting residual below
    /// tolerance (which contains the on-manifold, section, and energy
    /// conditions), and single-shot end-to-end re-integration of the two
    /// arcs meeting on the section independently of the node decomposition.
    pub fn verify(&self, jets: &Jets, mu: f64) -> Result<()> {
        let sys = self.system(mu, OdeOptions::default())?;
        let r = sys.residual(jets, &self.to_vector(&sys))?;
        if r.amax() > NEWTON_TOL {
            return Err(Error::NoConvergence {
                what: "connection record",
                detail: format!("stored record has residual {:.3e}", r.amax()),
            });
        }
        let end_u = propagate_plain(mu, &self.nodes_u[0], self.t_u, &sys.opts)?;
        let end_s = propagate_plain(mu, &self.nodes_s[0], self.t_s, &sys.opts)?;
        let gap = (end_u - end_s).norm();
        if gap > RECORD_CLOSURE_TOL {
            return Err(Error::NoConvergence {
                what: "connection record",
                detail: format!("end-to-end arcs meet only to {gap:.3e}"),
            });
        }
        Ok(())
    }
}

/// Canonical order: by unstable tag, then stable tag.
fn record_key(a: &ConnectionRecord, b: &ConnectionRecord) -> std::cmp::Ordering {
    for k in 0..4 {
        match a.s_u[k].total_cmp(&b.s_u[k]) {
            std::cmp::Ordering::Equal => {}
            o => return o,
        }
    }
    for k in 0..4 {
        match a.s_s[k].total_cmp(&b.s_s[k]) {
            std::cmp::Ordering::Equal => {}
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

fn record_close(a: &ConnectionRecord, b: &ConnectionRecord, tol: f64) -> bool {
    let mut d2 = 0.0;
    for k in 0..4 {
        d2 += (a.s_u[k] - b.s_u[k]).powi(2) + (a.s_s[k] - b.s_s[k]).powi(2);
    }
    d2.sqrt() <= tol
}

/// Sort records canonically and drop every record closer than `tol` (in the
/// joint eight-dimensional tag space) to an already kept one. Many mesh
/// candidates converge to the same connection; this keeps one per connection
/// deterministically.
pub fn dedup_connections(mut records: Vec<ConnectionRecord>, tol: f64) -> Vec<ConnectionRecord> {
    records.sort_by(record_key);
    let mut kept: Vec<ConnectionRecord> = Vec::new();
    'outer: for rec in records {
        // Only records with s_u[0] within tol can be within tol overall;
        // scan kept records backward until that coordinate separates.
        for prev in kept.iter().rev() {
            if rec.s_u[0] - prev.s_u[0] > tol {
                break;
            }
            if record_close(&rec, prev, tol) {
                continue 'outer;
            }
        }
        kept.push(rec);
    }
    kept
}

/// Refine many candidate pairs, each with its own segment counts; returns
/// the converged records and the per-candidate failures.
pub fn refine_pairs(
    mu: f64,
    h: f64,
    jets: &Jets,
    pairs: &[CandidatePair],
    pins: &PinSpec,
    opts: &OdeOptions,
) -> (Vec<ConnectionRecord>, Vec<(usize, Error)>) {
    let results: Vec<(usize, Result<ConnectionRecord>)> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let rec = ShootingSystem::for_times(mu, h, pair.t_u, pair.t_s, opts.clone())
                .and_then(|sys| sys.refine(jets, pair, pins));
            (i, rec)
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (i, res) in results {
        match res {
            Ok(r) => records.push(r),
            Err(e) => failures.push((i, e)),
        }
    }
    (records, failures)
}

/// Re-converge a record with the (s1, s4) tag coordinates of one arc pinned
/// at prescribed values: the grid variant. Instead of letting the min-norm
/// corrections pick where on the two-parameter connection family a solution
/// lands, this computes the connection at an exact, caller-chosen pair of
/// tag coordinates (e.g. nodes of an equally spaced grid over the connection
/// region). Pinned coordinates come back bitwise equal to the prescription.
pub fn regrid_record(
    sys: &ShootingSystem,
    jets: &Jets,
    record: &ConnectionRecord,
    side: Side,
    s1: f64,
    s4: f64,
) -> Result<ConnectionRecord> {
    let mut x = record.to_vector(sys);
    let base = match side {
        Side::Unstable => sys.i_su(),
        Side::Stable => sys.i_ss(),
    };
    x[base] = s1;
    x[base + 3] = s4;
    let coords = vec![0usize, 3];
    let pins = match side {
        Side::Unstable => PinSpec::Tags { unstable: coords, stable: Vec::new() },
        Side::Stable => PinSpec::Tags { unstable: Vec::new(), stable: coords },
    };
    let (xr, stats) = sys.newton(jets, x, &pins)?;
    sys.record_from(&xr, &stats)
}

// ---------------------------------------------------------------------------
// Planar seeds and re-meshing
// ---------------------------------------------------------------------------

/// Mesh the planar circle of the iso-energetic slice: `n` tags
/// (r cos t, r sin t, 0, 0) with the radius solved per angle so the center
/// image sits exactly on the energy level. This is the planar Lyapunov
/// orbit of that energy.
pub fn planar_ring(p: &Parameterization, h: f64, n: usize) -> Result<Vec<[f64; 4]>> {
    if n < 4 {
        return Err(Error::InvalidInput(format!("need at least 4 ring points, got {n}")));
    }
    let h0 = p.h0();
    if !(h > h0) {
        return Err(Error::InvalidInput(format!(
            "energy {h} does not exceed the libration-point energy {h0}"
        )));
    }
    let (qp, _) = p.quadratic_energy_coeffs();
    let r0 = ((h - h0) / qp).sqrt();
    let mu = p.collinear().mu;
    let order = p.order();
    let mut scr = RealEvalScratch::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let th = 2.0 * std::f64::consts::PI * (i as f64) / (n as f64);
        let (c, s) = (th.cos(), th.sin());
        let val = |r: f64, scr: &mut RealEvalScratch| {
            let y = p.eval_center(&[r * c, r * s, 0.0, 0.0], order, scr);
            hamiltonian(mu, &y) - h
        };
        let (mut lo, mut hi) = (0.0, 1.5 * r0);
        let (flo, fhi) = (val(lo, &mut scr), val(hi, &mut scr));
        if !(flo < 0.0 && fhi > 0.0) {
            return Err(Error::NoConvergence {
                what: "planar ring",
                detail: format!("no radial bracket at angle {th:.3}"),
            });
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if val(mid, &mut scr) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let r = 0.5 * (lo + hi);
        out.push([r * c, r * s, 0.0, 0.0]);
    }
    Ok(out)
}

/// Shape of a re-meshed region of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemeshMode {
    /// Bounding rectangle of the tags in (s1, s2), fattened by
    /// [`RECT_FATTEN`] of its width.
    Rectangle,
    /// Band around a degree-5 least-squares fit s2 = p(s1), of half-width
    /// [`CURVE_BAND_FACTOR`] times the worst fit residual (at least one
    /// planar spacing); falls back to the rectangle when the fit is
    /// degenerate.
    Curve,
}

fn fattened(lo: f64, hi: f64, fallback: f64) -> [f64; 2] {
    let w = hi - lo;
    if w > 0.0 {
        let pad = 0.5 * RECT_FATTEN * w;
        [lo - pad, hi + pad]
    } else {
        [lo - fallback, hi + fallback]
    }
}

/// Least-squares polynomial fit of s2 over s1 (rescaled to [-1, 1] for
/// conditioning); returns the coefficient vector in the rescaled variable,
/// the scaling, and the worst residual, or None when degenerate.
fn curve_fit(tags: &[[f64; 4]]) -> Option<(DVector<f64>, f64, f64, f64)> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in tags {
        lo = lo.min(t[0]);
        hi = hi.max(t[0]);
    }
    if !(hi - lo > 1e-9) {
        return None;
    }
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let n = tags.len();
    let mut a = DMatrix::zeros(n, CURVE_FIT_DEGREE + 1);
    let mut b = DVector::zeros(n);
    for (i, t) in tags.iter().enumerate() {
        let u = (t[0] - mid) / half;
        let mut pw = 1.0;
        for k in 0..=CURVE_FIT_DEGREE {
            a[(i, k)] = pw;
            pw *= u;
        }
        b[i] = t[1];
    }
    let svd = a.clone().svd(true, true);
    let coef = svd.solve(&b, 1e-12).ok()?;
    let resid = (&a * &coef - &b).amax();
    Some((coef, mid, half, resid))
}

fn eval_poly(coef: &DVector<f64>, u: f64) -> f64 {
    let mut acc = 0.0;
    for &c in coef.iter().rev() {
        acc = acc * u + c;
    }
    acc
}

/// Re-mesh the region of the slice where a set of low-resolution connection
/// tags accumulates, at the spacing in `params` (normally a quarter of the
/// original). The s4 range is exactly the range attained by the tags; the
/// (s1, s2) footprint is either the fattened bounding rectangle or a band
/// around a fitted curve.
pub fn remesh_region(
    p: &Parameterization,
    params: &MeshParams,
    tags: &[[f64; 4]],
    mode: RemeshMode,
) -> Result<SliceMesh> {
    if tags.is_empty() {
        return Err(Error::InvalidInput("no tags to re-mesh around".into()));
    }
    if mode == RemeshMode::Curve && tags.len() <= CURVE_FIT_DEGREE {
        return Err(Error::InvalidInput(format!(
            "curve mode needs more than {CURVE_FIT_DEGREE} tags, got {}",
            tags.len()
        )));
    }
    let (planar_d, vertical_d) = match params.axes {
        crate::slicing::AxisSpec::Spacing { planar, vertical } => (planar, vertical),
        crate::slicing::AxisSpec::PerAxis(_) => {
            return Err(Error::InvalidInput(
                "re-meshing takes explicit spacings, not per-axis counts".into(),
            ))
        }
    };
    let mut mins = [f64::INFINITY; 4];
    let mut maxs = [f64::NEG_INFINITY; 4];
    for t in tags {
        for k in 0..4 {
            mins[k] = mins[k].min(t[k]);
            maxs[k] = maxs[k].max(t[k]);
        }
    }
    let b1 = fattened(mins[0], maxs[0], planar_d);
    let s4 = if maxs[3] - mins[3] > 0.0 {
        [mins[3], maxs[3]]
    } else {
        [mins[3] - 0.5 * vertical_d, maxs[3] + 0.5 * vertical_d]
    };

    let fit = match mode {
        RemeshMode::Curve => curve_fit(tags),
        RemeshMode::Rectangle => None,
    };
    match fit {
        Some((coef, mid, half, resid)) => {
            let band = (CURVE_BAND_FACTOR * resid).max(planar_d);
            let b2 = [mins[1] - band, maxs[1] + band];
            let bounds = [b1, b2, s4];
            mesh_box(p, params, &bounds, |s1, s2| {
                (s2 - eval_poly(&coef, (s1 - mid) / half)).abs() <= band
            })
        }
        None => {
            let b2 = fattened(mins[1], maxs[1], planar_d);
            let bounds = [b1, b2, s4];
            mesh_box(p, params, &bounds, |_, _| true)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::MU_EARTH_MOON;
    use crate::parameterize::{BuildSpec, ParamScale};
    use crate::slicing::{AxisSpec, Strategy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    const MU: f64 = MU_EARTH_MOON;
    /// Energy of the cheapest connection regime: one crossing per side.
    const H_TEST: f64 = -1.5755;
    const TEST_ORDER: usize = 14;

    fn pm(point: Lpoint, kind: ManifoldKind) -> Parameterization {
        Parameterization::build(
            MU,
            &BuildSpec {
                point,
                kind,
                scale: ParamScale::GammaUnit,
                order: TEST_ORDER,
            },
        )
        .unwrap()
    }

    struct Fixture {
        p_u: Parameterization,
        p_s: Parameterization,
        jet_u: FiberJet,
        jet_s: FiberJet,
    }

    fn fixture() -> &'static Fixture {
        static FIX: OnceLock<Fixture> = OnceLock::new();
        FIX.get_or_init(|| {
            let p_u = pm(Lpoint::L2, ManifoldKind::CenterUnstable);
            let p_s = pm(Lpoint::L1, ManifoldKind::CenterStable);
            let jet_u = p_u.fiber_jet(moonward_delta(&p_u, DEFAULT_DELTA)).unwrap();
            let jet_s = p_s.fiber_jet(moonward_delta(&p_s, DEFAULT_DELTA)).unwrap();
            Fixture { p_u, p_s, jet_u, jet_s }
        })
    }

    fn jets(fx: &Fixture) -> Jets<'_> {
        Jets {
            unstable: &fx.jet_u,
            stable: &fx.jet_s,
        }
    }

    /// Planar ring clouds at the test energy: 256 points per ring separates
    /// the two nearby distance minima of the first-crossing tube cuts.
    fn clouds(fx: &Fixture) -> (SectionCloud, SectionCloud) {
        static CL: OnceLock<(SectionCloud, SectionCloud)> = OnceLock::new();
        CL.get_or_init(|| {
            let opts = OdeOptions::default();
            let ring_u = planar_ring(&fx.p_u, H_TEST, 256).unwrap();
            let ring_s = planar_ring(&fx.p_s, H_TEST, 256).unwrap();
            let cu = propagate_cloud(&fx.p_u, &fx.jet_u, &ring_u, H_TEST, 1, DEFAULT_MAX_FLIGHT, &opts).unwrap();
            let cs = propagate_cloud(&fx.p_s, &fx.jet_s, &ring_s, H_TEST, 1, DEFAULT_MAX_FLIGHT, &opts).unwrap();
            (cs, cu)
        })
        .clone()
    }

    #[test]
    fn the_section_plane_passes_through_the_moon() {
        let g = moon_section(MU);
        let moon = State::new(MU - 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(g.g(&moon), 0.0);
        let l1 = crate::dynamics::Collinear::new(Lpoint::L1, MU).state();
        let l2 = crate::dynamics::Collinear::new(Lpoint::L2, MU).state();
        assert!(g.g(&l1) > 0.0, "L1 sits between the primaries");
        assert!(g.g(&l2) < 0.0, "L2 sits beyond the Moon");
    }

    #[test]
    fn planar_ring_tags_sit_on_the_energy_level() {
        let fx = fixture();
        let ring = planar_ring(&fx.p_u, H_TEST, 32).unwrap();
        let mut scr = RealEvalScratch::new();
        for t in &ring {
            assert_eq!(t[2], 0.0);
            assert_eq!(t[3], 0.0);
            let y = fx.p_u.eval_center(t, fx.p_u.order(), &mut scr);
            assert!((hamiltonian(MU, &y) - H_TEST).abs() < 1e-13);
        }
        assert!(planar_ring(&fx.p_u, fx.p_u.h0() - 1e-3, 8).is_err());
    }

    #[test]
    fn clouds_arrive_on_section_and_energy_level() {
        let fx = fixture();
        let (cs, cu) = clouds(fx);
        assert!(!cu.is_empty() && !cs.is_empty());
        // Section placement is exact regardless of expansion order; the
        // energy carried along the lifted fibers is limited by series
        // truncation at the large ring radius of this level (measured
        // ~5e-8 at the test order; production orders reach the 1e-10
        // default bound).
        cu.check_with(MU, CROSSING_G_TOL, 5e-7).unwrap();
        cs.check_with(MU, CROSSING_G_TOL, 5e-7).unwrap();
        for p in &cu.points {
            assert!(p.time > 0.0, "unstable branch flies forward");
        }
        for p in &cs.points {
            assert!(p.time < 0.0, "stable branch flies backward");
        }
        // The Moon guard amputates the near-Moon part of each tube; those
        // drops are reported, not silently lost.
        assert!(cu.len() + cu.dropped.len() == 256);
        assert!(cu.dropped.iter().all(|d| d.1 == DropReason::MoonStop));
    }

    fn synthetic_cloud(seed: u64, n: usize, kind: ManifoldKind) -> SectionCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| CloudPoint {
                s: std::array::from_fn(|_| rng.gen_range(-0.5..0.5)),
                state: State::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
                time: rng.gen_range(1.0..10.0),
            })
            .collect();
        SectionCloud {
            point: Lpoint::L1,
            kind,
            h: -1.58,
            delta: 1e-3,
            crossings: 1,
            points,
            dropped: Vec::new(),
        }
    }

    #[test]
    fn tree_matching_agrees_with_the_exhaustive_scan() {
        let cs = synthetic_cloud(7, 300, ManifoldKind::CenterStable);
        let cu = synthetic_cloud(8, 200, ManifoldKind::CenterUnstable);
        let (pf, ff) = match_candidates(&cs, &cu, 0.4).unwrap();
        let (pb, fb) = match_candidates_brute(&cs, &cu, 0.4).unwrap();
        assert_eq!(ff.len(), fb.len());
        for (a, b) in ff.iter().zip(fb.iter()) {
            assert_eq!(a.nearest, b.nearest);
            assert!((a.d - b.d).abs() <= 1e-15 * (1.0 + a.d));
        }
        assert_eq!(pf.len(), pb.len());
        for (a, b) in pf.iter().zip(pb.iter()) {
            assert_eq!(a.s_u, b.s_u);
            assert_eq!(a.s_s, b.s_s);
        }
    }

    #[test]
    fn a_cloud_matched_against_itself_is_identically_zero() {
        let c = synthetic_cloud(11, 150, ManifoldKind::CenterStable);
        let mut cu = synthetic_cloud(11, 150, ManifoldKind::CenterUnstable);
        cu.points = c.points.clone();
        let (pairs, field) = match_candidates(&c, &cu, 1e-12).unwrap();
        assert_eq!(pairs.len(), c.len());
        assert!(field.iter().all(|f| f.d == 0.0));
    }

    #[test]
    fn unknown_and_equation_counts_differ_by_two() {
        for (m_u, m_s) in [(1, 1), (3, 2), (7, 5)] {
            let sys = ShootingSystem::new(MU, H_TEST, m_u, m_s, OdeOptions::default()).unwrap();
            assert_eq!(sys.n_unknowns() - sys.n_equations(), 2);
            assert_eq!(sys.i_xs(m_s) + 6, sys.n_unknowns());
            let pins = sys.planar_pin_indices();
            assert_eq!(pins[0], 2);
            assert_eq!(pins[2], sys.i_ss() + 2);
        }
        assert!(ShootingSystem::new(MU, H_TEST, 0, 1, OdeOptions::default()).is_err());
    }

    #[test]
    fn over_pinning_is_rejected() {
        let sys = ShootingSystem::new(MU, H_TEST, 2, 2, OdeOptions::default()).unwrap();
        assert!(sys.resolve_pins(&PinSpec::Planar).is_ok());
        assert!(sys.resolve_pins(&PinSpec::Raw(vec![0, 3])).is_ok());
        let mut three = sys.planar_pin_indices()[..3].to_vec();
        assert!(sys.resolve_pins(&PinSpec::Raw(three.clone())).is_err());
        three.push(9_999);
        assert!(sys.resolve_pins(&PinSpec::Raw(three)).is_err());
        let mut five = sys.planar_pin_indices().to_vec();
        five.push(0);
        assert!(sys.resolve_pins(&PinSpec::Raw(five)).is_err());
    }

    /// The best matched pair of the planar clouds; shared by the Newton
    /// tests.
    fn best_pair(fx: &Fixture) -> CandidatePair {
        let (cs, cu) = clouds(fx);
        let (_, field) = match_candidates(&cs, &cu, f64::INFINITY).unwrap();
        let best = field
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.d.total_cmp(&b.1.d))
            .unwrap()
            .0;
        let sp = &cs.points[best];
        let up = &cu.points[field[best].nearest];
        CandidatePair {
            s_s: sp.s,
            s_u: up.s,
            t_s: sp.time,
            t_u: up.time,
            d: field[best].d,
        }
    }

    #[test]
    fn seeded_nodes_already_chain_under_the_flow() {
        let fx = fixture();
        let pair = best_pair(fx);
        let sys = ShootingSystem::for_times(MU, H_TEST, pair.t_u, pair.t_s, OdeOptions::default()).unwrap();
        let x0 = sys.seed(&jets(fx), &pair).unwrap();
        let r = sys.residual(&jets(fx), &x0).unwrap();
        // On-manifold and sub-arc rows are consistent by construction;
        // the matching block carries the candidate gap. The energy row
        // carries the series truncation of the lifted point (see the cloud
        // test), the section row the crossing refinement tolerance.
        let rows = sys.n_equations();
        for k in 0..rows - 8 {
            assert!(r[k].abs() < 1e-9, "seed row {k} = {:.3e}", r[k]);
        }
        assert!(r[rows - 8].abs() < 1e-9, "seed section row");
        assert!(r[rows - 7].abs() < 1e-6, "seed energy row");
        let gap = r.rows(rows - 6, 6).norm();
        assert!((gap - pair.d).abs() < 1e-6 * (1.0 + pair.d));
    }

    #[test]
    fn shooting_jacobian_matches_finite_differences() {
        let fx = fixture();
        let pair = best_pair(fx);
        let sys = ShootingSystem::for_times(MU, H_TEST, pair.t_u, pair.t_s, OdeOptions::default()).unwrap();
        let js = jets(fx);
        let x0 = sys.seed(&js, &pair).unwrap();
        let (_, j) = sys.residual_jacobian(&js, &x0).unwrap();
        let step = 1e-6;
        for col in 0..sys.n_unknowns() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[col] += step;
            xm[col] -= step;
            let rp = sys.residual(&js, &xp).unwrap();
            let rm = sys.residual(&js, &xm).unwrap();
            for row in 0..sys.n_equations() {
                let fd = (rp[row] - rm[row]) / (2.0 * step);
                // Relative bound: flow differentials reach O(100) here and
                // central differences carry matching truncation error.
                let scale = 1.0 + j[(row, col)].abs().max(fd.abs());
                assert!(
                    (j[(row, col)] - fd).abs() < 1e-5 * scale,
                    "J[{row},{col}] = {} vs FD {}",
                    j[(row, col)],
                    fd
                );
            }
        }
    }

    #[test]
    fn planar_refinement_finds_exactly_two_lyapunov_connections() {
        let fx = fixture();
        let (cs, cu) = clouds(fx);
        let (_, field) = match_candidates(&cs, &cu, f64::INFINITY).unwrap();
        // Local minima of the distance profile along the stable ring seed
        // the planar refinements.
        let n = field.len();
        let mut pairs = Vec::new();
        for i in 0..n {
            let (prev, next) = (field[(i + n - 1) % n].d, field[(i + 1) % n].d);
            if field[i].d < prev && field[i].d <= next {
                let sp = &cs.points[i];
                let up = &cu.points[field[i].nearest];
                pairs.push(CandidatePair {
                    s_s: sp.s,
                    s_u: up.s,
                    t_s: sp.time,
                    t_u: up.time,
                    d: field[i].d,
                });
            }
        }
        assert!(pairs.len() >= 2, "expected at least two distance minima");
        let (records, failures) = refine_pairs(MU, H_TEST, &jets(fx), &pairs, &PinSpec::Planar, &OdeOptions::default());
        assert!(failures.is_empty(), "refinement failures: {failures:?}");
        for r in &records {
            assert!(r.resid_inf < NEWTON_TOL);
            assert_eq!(r.s_u[2], 0.0, "pinned coordinate moved");
            assert_eq!(r.s_u[3], 0.0);
            assert_eq!(r.s_s[2], 0.0);
            assert_eq!(r.s_s[3], 0.0);
            assert!(r.zmax < 1e-10, "planar connection left the plane");
            assert_eq!(r.kernel_dim, 2);
            r.verify(&jets(fx), MU).unwrap();
        }
        let unique = dedup_connections(records, DEDUP_TOL);
        assert_eq!(unique.len(), 2, "planar Lyapunov connections at this level");
    }

    #[test]
    fn a_perturbed_solution_reconverges_nearby() {
        let fx = fixture();
        let pair = best_pair(fx);
        let sys = ShootingSystem::for_times(MU, H_TEST, pair.t_u, pair.t_s, OdeOptions::default()).unwrap();
        let js = jets(fx);
        let rec = sys.refine(&js, &pair, &PinSpec::Planar).unwrap();
        let mut x = rec.to_vector(&sys);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for v in x.iter_mut() {
            *v += rng.gen_range(-1e-6..1e-6);
        }
        let (xr, stats) = sys.newton(&js, x, &PinSpec::Free).unwrap();
        assert!(stats.resid_inf < NEWTON_TOL);
        let mut moved: f64 = 0.0;
        for k in 0..4 {
            moved = moved.max((xr[sys.i_su() + k] - rec.s_u[k]).abs());
            moved = moved.max((xr[sys.i_ss() + k] - rec.s_s[k]).abs());
        }
        assert!(moved <= 1e-4, "reconverged {moved:.3e} away");
    }

    #[test]
    fn regridding_pins_tag_coordinates_bitwise() {
        let fx = fixture();
        let pair = best_pair(fx);
        let sys = ShootingSystem::for_times(MU, H_TEST, pair.t_u, pair.t_s, OdeOptions::default()).unwrap();
        let js = jets(fx);
        let rec = sys.refine(&js, &pair, &PinSpec::Planar).unwrap();

        // Re-converging at the record's own coordinates keeps them bitwise.
        let same = regrid_record(&sys, &js, &rec, Side::Unstable, rec.s_u[0], rec.s_u[3]).unwrap();
        assert!(same.resid_inf < NEWTON_TOL);
        assert_eq!(same.s_u[0].to_bits(), rec.s_u[0].to_bits());
        assert_eq!(same.s_u[3].to_bits(), rec.s_u[3].to_bits());

        // Walk along the two-parameter family out of the plane: pin the s4
        // coordinate of both tags at a nonzero value. (At an exactly planar
        // point the family tangents are purely out-of-plane, so an in-plane
        // pin there cannot cut the family; grid pinning operates on spatial
        // connections.)
        let mut x = rec.to_vector(&sys);
        let s4 = 5e-3;
        x[sys.i_su() + 3] = s4;
        let one = PinSpec::Tags { unstable: vec![3], stable: Vec::new() };
        let (xs, stats) = sys.newton(&js, x, &one).unwrap();
        let spatial = sys.record_from(&xs, &stats).unwrap();
        assert!(spatial.resid_inf < NEWTON_TOL);
        assert_eq!(spatial.s_u[3].to_bits(), s4.to_bits());
        assert!(spatial.zmax > 1e-5, "expected a spatial connection");
        spatial.verify(&js, MU).unwrap();

        // A nearby prescribed grid node lands on the family at exactly that
        // node, close to where it started. The shift is prescribed in s4:
        // near the planar fold of the (s1, s4) chart that is the
        // well-conditioned grid direction.
        let s4b = s4 + 2e-4;
        let moved = regrid_record(&sys, &js, &spatial, Side::Unstable, spatial.s_u[0], s4b).unwrap();
        assert!(moved.resid_inf < NEWTON_TOL);
        assert!(moved.iters > 0, "expected an actual correction");
        assert_eq!(moved.s_u[0].to_bits(), spatial.s_u[0].to_bits());
        assert_eq!(moved.s_u[3].to_bits(), s4b.to_bits());
        let mut shift: f64 = 0.0;
        for k in 0..4 {
            shift = shift.max((moved.s_u[k] - spatial.s_u[k]).abs());
            shift = shift.max((moved.s_s[k] - spatial.s_s[k]).abs());
        }
        assert!(shift <= 1e-2, "regridded solution jumped {shift:.3e}");
        moved.verify(&js, MU).unwrap();

        // Stable-side pinning works symmetrically.
        let s4s = spatial.s_s[3] + 2e-4;
        let other = regrid_record(&sys, &js, &spatial, Side::Stable, spatial.s_s[0], s4s).unwrap();
        assert!(other.resid_inf < NEWTON_TOL);
        assert_eq!(other.s_s[0].to_bits(), spatial.s_s[0].to_bits());
        assert_eq!(other.s_s[3].to_bits(), s4s.to_bits());

        // Tag-pin validation: bad coordinate index and over-pinning.
        assert!(sys
            .resolve_pins(&PinSpec::Tags { unstable: vec![4], stable: vec![] })
            .is_err());
        assert!(sys
            .resolve_pins(&PinSpec::Tags { unstable: vec![0, 3], stable: vec![0] })
            .is_err());
        assert!(sys
            .resolve_pins(&PinSpec::Tags { unstable: vec![0, 3], stable: vec![] })
            .is_ok());
    }

    #[test]
    fn rectangle_remesh_covers_its_inputs() {
        let fx = fixture();
        let h = fx.p_u.h0() + 1.2e-3;
        // A handful of tags inside the slice, spread in all coordinates.
        let tags: Vec<[f64; 4]> = vec![
            [0.02, -0.01, 0.0, 0.005],
            [0.05, 0.02, 0.0, -0.01],
            [-0.01, 0.04, 0.0, 0.0],
            [0.03, 0.00, 0.0, 0.012],
            [0.00, -0.03, 0.0, -0.012],
            [0.045, 0.01, 0.0, 0.002],
            [0.01, 0.03, 0.0, -0.006],
        ];
        let params = MeshParams {
            axes: AxisSpec::Spacing {
                planar: 0.004,
                vertical: 0.004,
            },
            max_doublings: 4,
            ..MeshParams::new(h, Strategy::CollapsedEval, AxisSpec::PerAxis(2))
        };
        let mesh = remesh_region(&fx.p_u, &params, &tags, RemeshMode::Rectangle).unwrap();
        assert!(!mesh.points.is_empty());
        // The fattened box contains every tag with its margin.
        for t in &tags {
            assert!(t[0] >= mesh.axis_nodes[0][0] - 0.004 && t[0] <= *mesh.axis_nodes[0].last().unwrap() + 0.004);
            assert!(t[3] >= mesh.axis_nodes[2][0] - 0.004 && t[3] <= *mesh.axis_nodes[2].last().unwrap() + 0.004);
        }
        // Curve mode on the same tags (s2 scattered) still meshes a band
        // around the fitted polynomial, and few tags means an error.
        let curve = remesh_region(&fx.p_u, &params, &tags, RemeshMode::Curve).unwrap();
        assert!(!curve.points.is_empty());
        assert!(remesh_region(&fx.p_u, &params, &tags[..5], RemeshMode::Curve).is_err());
        assert!(remesh_region(&fx.p_u, &params, &[], RemeshMode::Rectangle).is_err());
    }

    #[test]
    fn curve_remesh_hugs_a_parabolic_ridge() {
        let fx = fixture();
        let h = fx.p_u.h0() + 1.2e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tags: Vec<[f64; 4]> = (0..40)
            .map(|i| {
                let s1 = -0.05 + 0.10 * (i as f64) / 39.0;
                let s2 = 0.01 + 0.4 * s1 - 2.0 * s1 * s1 + rng.gen_range(-5e-4..5e-4);
                [s1, s2, 0.0, 0.0]
            })
            .collect();
        let params = MeshParams {
            axes: AxisSpec::Spacing {
                planar: 0.003,
                vertical: 0.003,
            },
            max_doublings: 4,
            ..MeshParams::new(h, Strategy::CollapsedEval, AxisSpec::PerAxis(2))
        };
        let mesh = remesh_region(&fx.p_u, &params, &tags, RemeshMode::Curve).unwrap();
        assert!(!mesh.points.is_empty());
        // The band is thin: the meshed s2 extent stays well inside the
        // rectangle one would get from the same tags.
        let rect = remesh_region(&fx.p_u, &params, &tags, RemeshMode::Rectangle).unwrap();
        assert!(mesh.points.len() < rect.points.len());
    }
}
