//! Adaptive Runge-Kutta-Fehlberg 7(8) propagation with event detection.
//!
//! The core integrator is dimension-generic (the RTBP state is 6-dimensional,
//! the variational system 42, the reduced center-manifold field 5). On top of
//! it sit RTBP-specific drivers: section-crossing detection with Newton
//! refinement of the crossing time, a lunar close-approach guard, and state
//! transition matrix propagation for shooting Jacobians.

use nalgebra::{Matrix6, SVector};

use crate::dynamics::{self, State};
use crate::error::{Error, Result};

/// 13-stage RKF7(8) tableau (Fehlberg's classical coefficients).
mod tableau {
    pub const STAGES: usize = 13;

    pub const C: [f64; STAGES] = [
        0.0,
        2.0 / 27.0,
        1.0 / 9.0,
        1.0 / 6.0,
        5.0 / 12.0,
        0.5,
        5.0 / 6.0,
        1.0 / 6.0,
        2.0 / 3.0,
        1.0 / 3.0,
        1.0,
        0.0,
        1.0,
    ];

    #[rustfmt::skip]
    pub const A: [[f64; 12]; STAGES] = [
        [0.0; 12],
        [2.0/27.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [1.0/36.0, 1.0/12.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [1.0/24.0, 0.0, 1.0/8.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [5.0/12.0, 0.0, -25.0/16.0, 25.0/16.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [1.0/20.0, 0.0, 0.0, 1.0/4.0, 1.0/5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [-25.0/108.0, 0.0, 0.0, 125.0/108.0, -65.0/27.0, 125.0/54.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [31.0/300.0, 0.0, 0.0, 0.0, 61.0/225.0, -2.0/9.0, 13.0/900.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [2.0, 0.0, 0.0, -53.0/6.0, 704.0/45.0, -107.0/9.0, 67.0/90.0, 3.0, 0.0, 0.0, 0.0, 0.0],
        [-91.0/108.0, 0.0, 0.0, 23.0/108.0, -976.0/135.0, 311.0/54.0, -19.0/60.0, 17.0/6.0, -1.0/12.0, 0.0, 0.0, 0.0],
        [2383.0/4100.0, 0.0, 0.0, -341.0/164.0, 4496.0/1025.0, -301.0/82.0, 2133.0/4100.0, 45.0/82.0, 45.0/164.0, 18.0/41.0, 0.0, 0.0],
        [3.0/205.0, 0.0, 0.0, 0.0, 0.0, -6.0/41.0, -3.0/205.0, -3.0/41.0, 3.0/41.0, 6.0/41.0, 0.0, 0.0],
        [-1777.0/4100.0, 0.0, 0.0, -341.0/164.0, 4496.0/1025.0, -289.0/82.0, 2193.0/4100.0, 51.0/82.0, 33.0/164.0, 12.0/41.0, 0.0, 1.0],
    ];

    pub const B: [f64; STAGES] = [
        41.0 / 840.0,
        0.0,
        0.0,
        0.0,
        0.0,
        34.0 / 105.0,
        9.0 / 35.0,
        9.0 / 35.0,
        9.0 / 280.0,
        9.0 / 280.0,
        41.0 / 840.0,
        0.0,
        0.0,
    ];

    /// Error weights B - B_hat; the 7th-order estimate differs only through
    /// stages 0, 10, 11, 12: err = (41/840) h (k0 + k10 - k11 - k12).
    pub const B_ERR: [f64; STAGES] = [
        41.0 / 840.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        41.0 / 840.0,
        -41.0 / 840.0,
        -41.0 / 840.0,
    ];
}

/// Default relative tolerance for all trajectory work.
pub const DEFAULT_REL_TOL: f64 = 1e-14;
/// Section crossings are refined until |g| falls below this.
pub const CROSSING_G_TOL: f64 = 1e-12;
/// Step-size controller parameters.
const STEP_SAFETY: f64 = 0.9;
const STEP_FAC_MIN: f64 = 0.1;
const STEP_FAC_MAX: f64 = 5.0;
const DEFAULT_MAX_STEPS: usize = 2_000_000;
const INITIAL_STEP: f64 = 1e-3;
/// Smallest step before the integrator declares failure.
const MIN_STEP: f64 = 1e-13;
/// Iteration cap for the crossing-time Newton.
const CROSSING_MAX_ITER: usize = 40;
/// Depth cap for the tangency (double crossing) bisection safeguard.
const TANGENCY_SPLIT_DEPTH: usize = 4;

#[derive(Debug, Clone)]
pub struct OdeOptions {
    pub tol: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            tol: DEFAULT_REL_TOL,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }
}

// ---------------------------------------------------------------------------
// Generic core
// ---------------------------------------------------------------------------

/// One embedded RKF78 step: returns the 8th-order update and the sup-norm
/// error estimate.
fn rkf_step<const D: usize, F>(f: &F, t: f64, y: &SVector<f64, D>, h: f64) -> (SVector<f64, D>, f64)
where
    F: Fn(f64, &SVector<f64, D>) -> SVector<f64, D>,
{
    use tableau::*;
    let mut k: [SVector<f64, D>; STAGES] = [SVector::zeros(); STAGES];
    k[0] = f(t, y);
    for i in 1..STAGES {
        let mut yi = *y;
        for (j, kj) in k.iter().enumerate().take(i) {
            let a = A[i][j];
            if a != 0.0 {
                yi += kj * (a * h);
            }
        }
        k[i] = f(t + C[i] * h, &yi);
    }
    let mut ynew = *y;
    for (i, ki) in k.iter().enumerate() {
        if B[i] != 0.0 {
            ynew += ki * (B[i] * h);
        }
    }
    let mut err: SVector<f64, D> = SVector::zeros();
    for (i, ki) in k.iter().enumerate() {
        if B_ERR[i] != 0.0 {
            err += ki * (B_ERR[i] * h);
        }
    }
    (ynew, err.amax())
}

/// Adaptive driver advancing from `t` toward `t_end`, invoking `on_step`
/// after every accepted step with (t_prev, y_prev, t_new, y_new, h_used).
/// `on_step` may shorten the remaining span by returning `false` to stop.
fn drive<const D: usize, F, G>(
    f: &F,
    mut t: f64,
    mut y: SVector<f64, D>,
    t_end: f64,
    opts: &OdeOptions,
    mut on_step: G,
) -> Result<(f64, SVector<f64, D>)>
where
    F: Fn(f64, &SVector<f64, D>) -> SVector<f64, D>,
    G: FnMut(f64, &SVector<f64, D>, f64, &SVector<f64, D>, f64) -> bool,
{
    let dir = (t_end - t).signum();
    if dir == 0.0 || (t_end - t).abs() == 0.0 {
        return Ok((t, y));
    }
    let mut h = INITIAL_STEP * dir;
    let mut steps = 0usize;
    while (t_end - t) * dir > 0.0 {
        if (t + h - t_end) * dir > 0.0 {
            h = t_end - t;
        }
        let scale = 1.0 + y.amax();
        let (ynew, err) = rkf_step(f, t, &y, h);
        steps += 1;
        if steps > opts.max_steps {
            return Err(Error::NoConvergence {
                what: "ode",
                detail: format!("max step count {} exceeded at t={t}", opts.max_steps),
            });
        }
        if err <= opts.tol * scale {
            let t_new = t + h;
            let keep_going = on_step(t, &y, t_new, &ynew, h);
            t = t_new;
            y = ynew;
            let grow = if err == 0.0 {
                STEP_FAC_MAX
            } else {
                (STEP_SAFETY * (opts.tol * scale / err).powf(1.0 / 8.0)).clamp(STEP_FAC_MIN, STEP_FAC_MAX)
            };
            h *= grow;
            if !keep_going {
                return Ok((t, y));
            }
        } else {
            let shrink = (STEP_SAFETY * (opts.tol * scale / err).powf(1.0 / 8.0)).clamp(STEP_FAC_MIN, 1.0);
            h *= shrink;
            if h.abs() < MIN_STEP {
                return Err(Error::NoConvergence {
                    what: "ode",
                    detail: format!("step size underflow at t={t}"),
                });
            }
        }
    }
    Ok((t, y))
}

/// Integrate to each time in `times` (strictly monotone, starting after or
/// at `t0`), returning the states there. Used by observables that compare
/// flows on a shared time grid.
pub fn integrate_fixed_times<const D: usize, F>(
    f: &F,
    t0: f64,
    y0: &SVector<f64, D>,
    times: &[f64],
    opts: &OdeOptions,
) -> Result<Vec<SVector<f64, D>>>
where
    F: Fn(f64, &SVector<f64, D>) -> SVector<f64, D>,
{
    let mut out = Vec::with_capacity(times.len());
    let mut t = t0;
    let mut y = *y0;
    for &tt in times {
        if (tt - t).abs() > 0.0 {
            let (t1, y1) = drive(f, t, y, tt, opts, |_, _, _, _, _| true)?;
            t = t1;
            y = y1;
        }
        out.push(y);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// RTBP drivers: events, guard, dense output
// ---------------------------------------------------------------------------

/// Crossing direction filter for section events, relative to integration
/// time (for backward propagation "increasing" means increasing along the
/// backward parameter).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossDir {
    Any,
    Increasing,
    Decreasing,
}

/// A coordinate-plane section event g(y) = y[coord] - offset = 0.
#[derive(Debug, Clone, Copy)]
pub struct SectionEvent {
    pub coord: usize,
    pub offset: f64,
    pub dir: CrossDir,
}

impl SectionEvent {
    #[inline]
    pub fn g(&self, y: &State) -> f64 {
        y[self.coord] - self.offset
    }
    #[inline]
    fn gdot(&self, mu: f64, y: &State) -> f64 {
        dynamics::field(mu, y)[self.coord]
    }
    fn accepts(&self, gdot: f64) -> bool {
        match self.dir {
            CrossDir::Any => true,
            CrossDir::Increasing => gdot > 0.0,
            CrossDir::Decreasing => gdot < 0.0,
        }
    }
}

/// One detected section crossing.
#[derive(Debug, Clone, Copy)]
pub struct Crossing {
    pub event: usize,
    pub t: f64,
    pub y: State,
    /// Sign of dg/dt at the crossing (w.r.t. integration time).
    pub increasing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Reached the requested final time.
    TimeEnd,
    /// Stopped at the requested crossing of event `.0`.
    EventReached(usize),
    /// Entered the lunar guard sphere; state is at the sphere crossing.
    MoonImpact,
}

/// Full outcome of an RTBP propagation.
#[derive(Debug, Clone)]
pub struct PropOutcome {
    pub reason: StopReason,
    pub t: f64,
    pub y: State,
    pub crossings: Vec<Crossing>,
    /// Minimum Moon distance seen at step ends / crossings.
    pub dmin_moon: f64,
    /// Maximum |z| seen at step ends / crossings.
    pub zmax: f64,
    pub naccepted: usize,
    /// Step-end samples (t, state) when dense recording was requested.
    pub dense: Option<(Vec<f64>, Vec<State>)>,
}

/// What to record / when to stop during an RTBP propagation.
#[derive(Debug, Clone, Default)]
pub struct PropSpec {
    pub events: Vec<SectionEvent>,
    /// Stop at the n-th accepted crossing of the given event (index, n).
    pub stop_at: Option<(usize, usize)>,
    /// Stop (and refine the boundary state) when the trajectory enters the
    /// lunar guard sphere of this radius; `None` disables the guard.
    pub moon_guard: Option<f64>,
    pub record_dense: bool,
}

struct MiniSpan<'a> {
    mu: f64,
    t0: f64,
    y0: State,
    opts: &'a OdeOptions,
}

impl MiniSpan<'_> {
    /// State at t0 + tau via sub-integration from the step start.
    fn state_at(&self, tau: f64) -> Result<State> {
        if tau == 0.0 {
            return Ok(self.y0);
        }
        let f = |_t: f64, y: &State| dynamics::field(self.mu, y);
        let (_, y) = drive(&f, self.t0, self.y0, self.t0 + tau, self.opts, |_, _, _, _, _| true)?;
        Ok(y)
    }
}

/// Newton refinement of a crossing time inside one accepted step.
/// `tau` bounds are (0, h); g changes sign between them.
fn refine_crossing(
    mu: f64,
    ev: &SectionEvent,
    span: &MiniSpan,
    h: f64,
    g0: f64,
    g1: f64,
) -> Result<(f64, State)> {
    // Bracketing bisection fallback wrapped around Newton: keep the bracket
    // [lo, hi] with sign change, propose Newton steps, fall back to midpoint
    // when the proposal leaves the bracket.
    let (mut lo, mut hi) = (0.0f64, h);
    let (mut glo, _ghi) = (g0, g1);
    let mut tau = h * g0 / (g0 - g1); // secant from the endpoints
    if !(tau > lo.min(hi) && tau < lo.max(hi)) {
        tau = 0.5 * (lo + hi);
    }
    for _ in 0..CROSSING_MAX_ITER {
        let y = span.state_at(tau)?;
        let g = ev.g(&y);
        if g.abs() < CROSSING_G_TOL {
            return Ok((tau, y));
        }
        if (g > 0.0) == (glo > 0.0) {
            lo = tau;
            glo = g;
        } else {
            hi = tau;
        }
        let gd = ev.gdot(mu, &y);
        let newton = tau - g / gd;
        tau = if gd != 0.0 && newton > lo.min(hi) && newton < lo.max(hi) {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Err(Error::NoConvergence {
        what: "section crossing",
        detail: format!("Newton stalled, bracket [{lo}, {hi}]"),
    })
}

/// Scan one accepted step for crossings of `ev`, recursing when the
/// derivative changes sign (possible double crossing hidden by equal
/// endpoint signs). Appends refined crossings in increasing tau order.
#[allow(clippy::too_many_arguments)]
fn scan_step_for_event(
    mu: f64,
    idx: usize,
    ev: &SectionEvent,
    span: &MiniSpan,
    tau0: f64,
    tau1: f64,
    y_at_0: &State,
    y_at_1: &State,
    depth: usize,
    found: &mut Vec<(f64, Crossing)>,
) -> Result<()> {
    let g0 = ev.g(y_at_0);
    let g1 = ev.g(y_at_1);
    if g0 == 0.0 {
        // Exact hit at the step start was already handled by the previous
        // step's scan; skip to avoid duplicates.
    } else if (g0 > 0.0) != (g1 > 0.0) {
        let sub = MiniSpan {
            mu,
            t0: span.t0 + tau0,
            y0: *y_at_0,
            opts: span.opts,
        };
        let (tau_loc, ycross) = refine_crossing(mu, ev, &sub, tau1 - tau0, g0, g1)?;
        let gd = ev.gdot(mu, &ycross);
        found.push((
            tau0 + tau_loc,
            Crossing {
                event: idx,
                t: span.t0 + tau0 + tau_loc,
                y: ycross,
                increasing: gd > 0.0,
            },
        ));
        // A second crossing can hide behind the first inside this step;
        // scan the remainder once.
        if depth < TANGENCY_SPLIT_DEPTH {
            scan_step_for_event(mu, idx, ev, span, tau0 + tau_loc, tau1, &ycross, y_at_1, depth + 1, found)?;
        }
        return Ok(());
    } else {
        // Equal signs: only a tangency-like double crossing is possible,
        // which requires dg/dt to change sign across the step.
        let d0 = ev.gdot(mu, y_at_0);
        let d1 = ev.gdot(mu, y_at_1);
        if depth < TANGENCY_SPLIT_DEPTH && (d0 > 0.0) != (d1 > 0.0) {
            let tm = 0.5 * (tau0 + tau1);
            let ym = span.state_at(tm)?;
            scan_step_for_event(mu, idx, ev, span, tau0, tm, y_at_0, &ym, depth + 1, found)?;
            scan_step_for_event(mu, idx, ev, span, tm, tau1, &ym, y_at_1, depth + 1, found)?;
        }
    }
    Ok(())
}

/// Propagate an RTBP state for (signed) time `tf`, detecting section
/// crossings and optionally stopping at one of them or at the lunar guard.
pub fn propagate_rtbp(mu: f64, y0: &State, tf: f64, opts: &OdeOptions, spec: &PropSpec) -> Result<PropOutcome> {
    let f = |_t: f64, y: &State| dynamics::field(mu, y);
    let mut crossings: Vec<Crossing> = Vec::new();
    let mut counts = vec![0usize; spec.events.len()];
    let mut dmin = dynamics::moon_distance(mu, y0);
    let mut zmax = y0[2].abs();
    let mut naccepted = 0usize;
    let mut dense = if spec.record_dense {
        Some((vec![0.0], vec![*y0]))
    } else {
        None
    };
    let mut stop: Option<StopReason> = None;
    let mut stop_ty: Option<(f64, State)> = None;
    let mut defer: Option<Error> = None;

    let drive_res = drive(&f, 0.0, *y0, tf, opts, |t_prev, y_prev, t_new, y_new, h| {
        naccepted += 1;
        let span = MiniSpan {
            mu,
            t0: t_prev,
            y0: *y_prev,
            opts,
        };
        // Section events.
        let mut step_hits: Vec<(f64, Crossing)> = Vec::new();
        for (i, ev) in spec.events.iter().enumerate() {
            if let Err(e) = scan_step_for_event(mu, i, ev, &span, 0.0, h, y_prev, y_new, 0, &mut step_hits) {
                defer = Some(e);
                return false;
            }
        }
        step_hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for (_, cr) in step_hits {
            let ev = &spec.events[cr.event];
            let gd_sign = if cr.increasing { 1.0 } else { -1.0 };
            if !ev.accepts(gd_sign) {
                continue;
            }
            dmin = dmin.min(dynamics::moon_distance(mu, &cr.y));
            zmax = zmax.max(cr.y[2].abs());
            crossings.push(cr);
            counts[cr.event] += 1;
            if let Some((want_ev, want_n)) = spec.stop_at {
                if cr.event == want_ev && counts[cr.event] == want_n {
                    stop = Some(StopReason::EventReached(cr.event));
                    stop_ty = Some((cr.t, cr.y));
                    return false;
                }
            }
        }
        // Lunar guard.
        let d_new = dynamics::moon_distance(mu, y_new);
        dmin = dmin.min(d_new);
        zmax = zmax.max(y_new[2].abs());
        if spec.moon_guard.is_some_and(|r| d_new < r) {
            let r_guard = spec.moon_guard.unwrap();
            // Bisect for the guard-sphere crossing time.
            let gev = |y: &State| dynamics::moon_distance(mu, y) - r_guard;
            let (mut lo, mut hi) = (0.0f64, h);
            let mut ycross = *y_new;
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                match span.state_at(mid) {
                    Ok(ym) => {
                        if gev(&ym) > 0.0 {
                            lo = mid;
                        } else {
                            hi = mid;
                            ycross = ym;
                        }
                    }
                    Err(e) => {
                        defer = Some(e);
                        return false;
                    }
                }
                if (hi - lo).abs() < 1e-14 {
                    break;
                }
            }
            stop = Some(StopReason::MoonImpact);
            stop_ty = Some((t_prev + hi, ycross));
            return false;
        }
        if let Some((ts, ys)) = dense.as_mut() {
            ts.push(t_new);
            ys.push(*y_new);
        }
        true
    });

    if let Some(e) = defer {
        return Err(e);
    }
    let (t_final, y_final) = drive_res?;
    let (reason, t, y) = match (stop, stop_ty) {
        (Some(r), Some((ts, ys))) => (r, ts, ys),
        _ => (StopReason::TimeEnd, t_final, y_final),
    };
    if let Some((ts, ys)) = dense.as_mut() {
        if *ts.last().unwrap() != t {
            ts.push(t);
            ys.push(y);
        }
    }
    Ok(PropOutcome {
        reason,
        t,
        y,
        crossings,
        dmin_moon: dmin,
        zmax,
        naccepted,
        dense,
    })
}

// ---------------------------------------------------------------------------
// Variational propagation
// ---------------------------------------------------------------------------

/// Propagate state + state transition matrix over a fixed (signed) time.
/// Returns the final state, the STM, and the minimum Moon distance seen at
/// step ends (no event handling; callers decide what to do about close
/// approaches).
pub fn propagate_stm(mu: f64, y0: &State, tf: f64, opts: &OdeOptions) -> Result<(State, Matrix6<f64>, f64)> {
    let mut z0: SVector<f64, 42> = SVector::zeros();
    for i in 0..6 {
        z0[i] = y0[i];
        z0[6 + i * 6 + i] = 1.0; // STM columns start as the identity
    }
    let mut dmin = dynamics::moon_distance(mu, y0);
    let f = |_t: f64, z: &SVector<f64, 42>| -> SVector<f64, 42> {
        let y = State::new(z[0], z[1], z[2], z[3], z[4], z[5]);
        let fy = dynamics::field(mu, &y);
        let dfy = dynamics::jacobian(mu, &y);
        let mut out: SVector<f64, 42> = SVector::zeros();
        for i in 0..6 {
            out[i] = fy[i];
        }
        // X' = DF * X, X stored column-major after the state.
        for col in 0..6 {
            for row in 0..6 {
                let mut acc = 0.0;
                for k in 0..6 {
                    acc += dfy[(row, k)] * z[6 + col * 6 + k];
                }
                out[6 + col * 6 + row] = acc;
            }
        }
        out
    };
    let (_, zf) = drive(&f, 0.0, z0, tf, opts, |_, _, _, znew, _| {
        let y = State::new(znew[0], znew[1], znew[2], znew[3], znew[4], znew[5]);
        dmin = dmin.min(dynamics::moon_distance(mu, &y));
        true
    })?;
    let yf = State::new(zf[0], zf[1], zf[2], zf[3], zf[4], zf[5]);
    let mut stm = Matrix6::zeros();
    for col in 0..6 {
        for row in 0..6 {
            stm[(row, col)] = zf[6 + col * 6 + row];
        }
    }
    Ok((yf, stm, dmin))
}

/// Plain fixed-time state propagation (no events, no guard).
pub fn propagate_plain(mu: f64, y0: &State, tf: f64, opts: &OdeOptions) -> Result<State> {
    let f = |_t: f64, y: &State| dynamics::field(mu, y);
    let (_, y) = drive(&f, 0.0, *y0, tf, opts, |_, _, _, _, _| true)?;
    Ok(y)
}
