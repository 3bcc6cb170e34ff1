//! Taylor parameterizations of the center-stable and center-unstable
//! manifolds attached to the collinear points.
//!
//! The manifold is represented by an immersion `W: R^5 -> R^6` together with
//! a reduced vector field `f: R^5 -> R^5` such that the invariance equation
//! `F(W(s)) = DW(s) f(s)` holds to the truncation order, where `F` is the
//! synodic vector field. Both are computed order by order in complex
//! diagonalizing coordinates: homogeneous blocks of the composed field are
//! refreshed incrementally, the cohomological equations of each order are
//! solved coefficient by coefficient, and the block is refreshed again once
//! the new immersion terms are known.
//!
//! The style rule splits each tangential coefficient between `W` and `f` so
//! that (a) the reduced field restricted to the center (`s5 = 0`) does not
//! depend on the hyperbolic variable at all, which transports energy levels
//! along the fibers, and (b) the planar, vertical and hyperbolic subspaces
//! stay invariant for the reduced flow. Every remaining coefficient goes to
//! `f`, so no divisor close to an internal resonance is ever inverted.
//!
//! Coordinates on the manifold come in two normalizations: `Symplectic`
//! keeps the linear frame symplectic (unit symplectic pairing per plane),
//! `GammaUnit` rescales each eigencolumn to the gamma distance of the point,
//! which makes amplitudes O(1) on the energy levels of interest.

use std::cell::RefCell;
use std::sync::Arc;

use nalgebra::{Matrix6, SVector, Vector6};

use crate::dynamics::{self, Collinear, Lpoint, State};
use crate::error::{Error, Result};
use crate::polyalg::{
    derivative_hom_block, eval_many, eval_many_real, mul_accumulate_block, mul_full,
    mul_hom_blocks, pow_real, pow_real_update_block, substitute_conjugate_pairs, C64,
    EvalScratch, Layout, RealEvalScratch, RealSeries, Series,
};
use crate::propagate::{integrate_fixed_times, OdeOptions};

/// Smallest cohomological divisor the solver is willing to invert.
pub const SMALL_DIVISOR_TOL: f64 = 1e-8;

/// Relative tolerance for the imaginary residue of physical-frame
/// evaluations through the complex series (they are real by conjugate
/// symmetry of the coefficients).
pub const EVAL_IMAG_REL_TOL: f64 = 1e-9;

/// Grid points used by [`Parameterization::orbit_error`] unless the caller
/// picks another resolution.
pub const ORBIT_ERROR_GRID: usize = 100;

// ---------------------------------------------------------------------------
// Build specification
// ---------------------------------------------------------------------------

/// Which hyperbolic half of the linear frame the fifth coordinate follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifoldKind {
    /// Fifth eigenvalue `-lambda`: fibers contract forward in time.
    CenterStable,
    /// Fifth eigenvalue `+lambda`: fibers contract backward in time.
    CenterUnstable,
}

impl ManifoldKind {
    pub fn tag(&self) -> &'static str {
        match self {
            ManifoldKind::CenterStable => "cs",
            ManifoldKind::CenterUnstable => "cu",
        }
    }
}

impl std::str::FromStr for ManifoldKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<ManifoldKind> {
        match s {
            "cs" | "center-stable" => Ok(ManifoldKind::CenterStable),
            "cu" | "center-unstable" => Ok(ManifoldKind::CenterUnstable),
            other => Err(Error::InvalidInput(format!("unknown manifold kind '{other}'"))),
        }
    }
}

/// Normalization of the linear frame columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScale {
    /// Unit symplectic pairing per eigenplane.
    Symplectic,
    /// Each complex eigencolumn rescaled to physical norm `gamma`.
    GammaUnit,
}

impl ParamScale {
    pub fn tag(&self) -> &'static str {
        match self {
            ParamScale::Symplectic => "symplectic",
            ParamScale::GammaUnit => "gamma-unit",
        }
    }
}

impl std::str::FromStr for ParamScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<ParamScale> {
        match s {
            "symplectic" => Ok(ParamScale::Symplectic),
            "gamma-unit" | "gamma" => Ok(ParamScale::GammaUnit),
            other => Err(Error::InvalidInput(format!("unknown scale '{other}'"))),
        }
    }
}

/// Everything that determines one expansion.
#[derive(Debug, Clone, Copy)]
pub struct BuildSpec {
    pub point: Lpoint,
    pub kind: ManifoldKind,
    pub scale: ParamScale,
    pub order: usize,
}

// ---------------------------------------------------------------------------
// Style rule
// ---------------------------------------------------------------------------

/// Whether the tangential coefficient (component `i` in 0..5, exponents `e`)
/// is solved into the immersion (`true`) or absorbed by the reduced field
/// (`false`). See the module docs for the two families of conditions.
fn style_picks_w(i: usize, e: &[u8]) -> bool {
    let has_s5 = e[4] != 0;
    match i {
        0 | 1 => has_s5 || (e[0] == 0 && e[1] == 0),
        2 | 3 => has_s5 || (e[2] == 0 && e[3] == 0),
        4 => !has_s5,
        _ => unreachable!("tangential components only"),
    }
}

// ---------------------------------------------------------------------------
// Incremental composition of the synodic field with the immersion
// ---------------------------------------------------------------------------

/// Series intermediates for `G(w) = P^-1 F(Z0 + P w)`, refreshed one
/// homogeneous block at a time. The chain keeps the two shifted x
/// coordinates, the squared distances, their `-3/2` powers and the combined
/// gravity coefficient `cc = (1-mu) r1^-3 + mu r2^-3`.
struct Composer {
    lay: Arc<Layout>,
    mu: f64,
    z0: State,
    p: Matrix6<C64>,
    /// x - mu (offset to the large primary) and x - mu + 1 (small primary).
    za: Series,
    zb: Series,
    yy: Series,
    zz: Series,
    px: Series,
    py: Series,
    pz: Series,
    sqy: Series,
    sqz: Series,
    q1: Series,
    q2: Series,
    c1: Series,
    c2: Series,
    cc: Series,
    prodx: Series,
    prody: Series,
    prodz: Series,
}

fn refresh_affine_one(s: &mut Series, p: &Matrix6<C64>, row: usize, cst: f64, k: usize, w: &[Series]) {
    s.clear_block(k);
    if k == 0 {
        s.coeffs_mut()[0] = C64::new(cst, 0.0);
        return;
    }
    for (j, wj) in w.iter().enumerate() {
        let pij = p[(row, j)];
        if pij.re != 0.0 || pij.im != 0.0 {
            s.axpy_block(pij, wj, k);
        }
    }
}

impl Composer {
    fn new(lay: &Arc<Layout>, mu: f64, z0: &State, p: &Matrix6<C64>) -> Composer {
        let z = || Series::zero(lay);
        Composer {
            lay: lay.clone(),
            mu,
            z0: *z0,
            p: *p,
            za: z(),
            zb: z(),
            yy: z(),
            zz: z(),
            px: z(),
            py: z(),
            pz: z(),
            sqy: z(),
            sqz: z(),
            q1: z(),
            q2: z(),
            c1: z(),
            c2: z(),
            cc: z(),
            prodx: z(),
            prody: z(),
            prodz: z(),
        }
    }

    /// Refresh block `k` of the seven affine coordinate series from the
    /// current immersion blocks of the same degree.
    fn refresh_affine(&mut self, k: usize, w: &[Series]) {
        let mu = self.mu;
        refresh_affine_one(&mut self.za, &self.p, 0, self.z0[0] - mu, k, w);
        refresh_affine_one(&mut self.zb, &self.p, 0, self.z0[0] - mu + 1.0, k, w);
        refresh_affine_one(&mut self.yy, &self.p, 1, self.z0[1], k, w);
        refresh_affine_one(&mut self.zz, &self.p, 2, self.z0[2], k, w);
        refresh_affine_one(&mut self.px, &self.p, 3, self.z0[3], k, w);
        refresh_affine_one(&mut self.py, &self.p, 4, self.z0[4], k, w);
        refresh_affine_one(&mut self.pz, &self.p, 5, self.z0[5], k, w);
    }

    /// Refresh block `k` of the squared distances and inverse-cube factors.
    /// Assumes blocks `< k` are final and affine blocks `<= k` current.
    fn refresh_nonlinear(&mut self, k: usize) {
        let one = C64::new(1.0, 0.0);
        self.sqy.clear_block(k);
        mul_accumulate_block(&mut self.sqy, &self.yy, &self.yy, k, 1.0);
        self.sqz.clear_block(k);
        mul_accumulate_block(&mut self.sqz, &self.zz, &self.zz, k, 1.0);
        self.q1.clear_block(k);
        mul_accumulate_block(&mut self.q1, &self.za, &self.za, k, 1.0);
        self.q1.axpy_block(one, &self.sqy, k);
        self.q1.axpy_block(one, &self.sqz, k);
        self.q2.clear_block(k);
        mul_accumulate_block(&mut self.q2, &self.zb, &self.zb, k, 1.0);
        self.q2.axpy_block(one, &self.sqy, k);
        self.q2.axpy_block(one, &self.sqz, k);
        if k == 0 {
            let q10 = self.q1.coeffs()[0].re;
            let q20 = self.q2.coeffs()[0].re;
            self.c1.coeffs_mut()[0] = C64::new(q10.powf(-1.5), 0.0);
            self.c2.coeffs_mut()[0] = C64::new(q20.powf(-1.5), 0.0);
        } else {
            pow_real_update_block(&mut self.c1, &self.q1, -1.5, k);
            pow_real_update_block(&mut self.c2, &self.q2, -1.5, k);
        }
        self.cc.clear_block(k);
        self.cc.axpy_block(C64::new(1.0 - self.mu, 0.0), &self.c1, k);
        self.cc.axpy_block(C64::new(self.mu, 0.0), &self.c2, k);
    }

    /// Degree-k block of the conjugated field `G = P^-1 F(Z0 + P w)`, given
    /// that all intermediates are refreshed through degree `k`.
    fn g_block(&mut self, k: usize, pinv: &Matrix6<C64>) -> Vec<Vec<C64>> {
        self.prodx.clear_block(k);
        mul_accumulate_block(&mut self.prodx, &self.cc, &self.za, k, 1.0);
        self.prody.clear_block(k);
        mul_accumulate_block(&mut self.prody, &self.cc, &self.yy, k, 1.0);
        self.prodz.clear_block(k);
        mul_accumulate_block(&mut self.prodz, &self.cc, &self.zz, k, 1.0);

        let n = self.lay.block_range(k).len();
        let zero = C64::new(0.0, 0.0);
        let mut fb = vec![vec![zero; n]; 6];
        {
            let px = self.px.block(k);
            let py = self.py.block(k);
            let pz = self.pz.block(k);
            let yy = self.yy.block(k);
            let za = self.za.block(k);
            let c2 = self.c2.block(k);
            let prx = self.prodx.block(k);
            let pry = self.prody.block(k);
            let prz = self.prodz.block(k);
            let mu = self.mu;
            for o in 0..n {
                fb[0][o] = px[o] + yy[o];
                fb[1][o] = py[o] - za[o];
                fb[2][o] = pz[o];
                fb[3][o] = py[o] - prx[o] - c2[o] * mu;
                fb[4][o] = -px[o] - pry[o];
                fb[5][o] = -prz[o];
            }
            if k == 0 {
                // Z1 = za + mu: the constant shift only enters block 0.
                fb[1][0] -= C64::new(mu, 0.0);
            }
        }
        let mut g = vec![vec![zero; n]; 6];
        for i in 0..6 {
            for j in 0..6 {
                let pij = pinv[(i, j)];
                if pij.re == 0.0 && pij.im == 0.0 {
                    continue;
                }
                for o in 0..n {
                    g[i][o] += pij * fb[j][o];
                }
            }
        }
        g
    }
}

// ---------------------------------------------------------------------------
// Order-by-order solve
// ---------------------------------------------------------------------------

/// Subtract the known transport terms `sum_{l=2..k-1} [DW_{k+1-l} f_l]_k`
/// from the composed-field block.
fn subtract_known_transport(
    r: &mut [Vec<C64>],
    w: &[Series],
    f: &[Series],
    k: usize,
    lay: &Arc<Layout>,
    dbuf: &mut Vec<C64>,
) {
    for l in 2..k {
        let j = k + 1 - l;
        for (v, fv) in f.iter().enumerate() {
            if fv.block_is_zero(l) {
                continue;
            }
            let fblk = fv.block(l);
            for (i, wi) in w.iter().enumerate() {
                if wi.block_is_zero(j) {
                    continue;
                }
                derivative_hom_block(wi, v, j, dbuf);
                if dbuf.iter().all(|c| c.re == 0.0 && c.im == 0.0) {
                    continue;
                }
                mul_hom_blocks(lay, dbuf, j - 1, fblk, l, &mut r[i], -1.0);
            }
        }
    }
}

/// Distribute the order-k right-hand side between immersion and reduced
/// field coefficients, inverting cohomological divisors where the style
/// picks the immersion.
fn solve_order(
    w: &mut [Series],
    f: &mut [Series],
    r: &[Vec<C64>],
    k: usize,
    lay: &Arc<Layout>,
    eigs: &[C64; 6],
) -> Result<()> {
    let rng = lay.block_range(k);
    let base = rng.start;
    let mut wblk: Vec<&mut [C64]> = w.iter_mut().map(|s| s.block_mut(k)).collect();
    let mut fblk: Vec<&mut [C64]> = f.iter_mut().map(|s| s.block_mut(k)).collect();
    for idx in rng {
        let off = idx - base;
        let e = lay.exponents(idx);
        let mut dot = C64::new(0.0, 0.0);
        for j in 0..5 {
            if e[j] != 0 {
                dot += eigs[j] * (e[j] as f64);
            }
        }
        for i in 0..6 {
            let rhs = r[i][off];
            if i == 5 || style_picks_w(i, e) {
                let div = dot - eigs[i];
                if div.norm() < SMALL_DIVISOR_TOL {
                    return Err(Error::SmallDivisor {
                        divisor: div.norm(),
                        threshold: SMALL_DIVISOR_TOL,
                        order: k,
                        component: i + 1,
                        monomial: [e[0] as u32, e[1] as u32, e[2] as u32, e[3] as u32, e[4] as u32],
                    });
                }
                wblk[i][off] = rhs / div;
            } else {
                fblk[i][off] = rhs;
            }
        }
    }
    Ok(())
}

/// Complex diagonalizing frame: eigencolumns, inverse, eigenvalues and the
/// per-family column multipliers relative to the symplectic normalization.
fn assemble_frame(
    cp: &Collinear,
    kind: ManifoldKind,
    scale: ParamScale,
) -> Result<(Matrix6<C64>, Matrix6<C64>, [C64; 6], [f64; 3])> {
    let fr = cp.frame();
    let mult = match scale {
        ParamScale::Symplectic => [1.0, 1.0, 1.0],
        ParamScale::GammaUnit => [
            cp.gamma / fr.norm_u,
            cp.gamma / fr.norm_v,
            cp.gamma / fr.norm_w,
        ],
    };
    let u = fr.u_complex() * C64::new(mult[0], 0.0);
    let v = fr.v_complex() * C64::new(mult[1], 0.0);
    let wp: Vector6<C64> = Vector6::from_fn(|i, _| C64::new(fr.w_plus[i] * mult[2], 0.0));
    let wm: Vector6<C64> = Vector6::from_fn(|i, _| C64::new(fr.w_minus[i] * mult[2], 0.0));
    let (c5, c6, l5) = match kind {
        ManifoldKind::CenterUnstable => (wp, wm, cp.lambda),
        ManifoldKind::CenterStable => (wm, wp, -cp.lambda),
    };
    let eigs = [
        C64::new(0.0, -cp.omega_p),
        C64::new(0.0, cp.omega_p),
        C64::new(0.0, -cp.omega_v),
        C64::new(0.0, cp.omega_v),
        C64::new(l5, 0.0),
        C64::new(-l5, 0.0),
    ];
    let mut p = Matrix6::zeros();
    p.set_column(0, &u);
    p.set_column(1, &u.map(|c| c.conj()));
    p.set_column(2, &v);
    p.set_column(3, &v.map(|c| c.conj()));
    p.set_column(4, &c5);
    p.set_column(5, &c6);
    let p_inv = p
        .try_inverse()
        .ok_or_else(|| Error::InvalidInput("eigenframe is singular".into()))?;
    let resid = (p * p_inv - Matrix6::identity()).norm();
    if resid > 1e-10 {
        return Err(Error::InvalidInput(format!(
            "eigenframe inversion residual {resid:.3e}"
        )));
    }
    Ok((p, p_inv, eigs, mult))
}

// ---------------------------------------------------------------------------
// The parameterization object
// ---------------------------------------------------------------------------

/// A fully expanded manifold parameterization, with realified evaluators
/// for the immersion (full, center slice, fixed-fiber slice) and for the
/// reduced field.
pub struct Parameterization {
    cp: Collinear,
    kind: ManifoldKind,
    scale: ParamScale,
    layout: Arc<Layout>,
    /// Immersion in diagonal coordinates, 6 components over (z1..z5).
    w: Vec<Series>,
    /// Reduced field in diagonal coordinates, 5 components.
    f: Vec<Series>,
    /// Physical-frame immersion `Z0 + P W(z)`, complex in (z1..z5).
    wt: Vec<Series>,
    /// Realified physical-frame immersion over (s1..s5).
    wt_real: Vec<RealSeries>,
    /// Realified center slice (s5 = 0) over (s1..s4).
    center: Vec<RealSeries>,
    /// Realified reduced field over (s1..s5).
    fred: Vec<RealSeries>,
    p: Matrix6<C64>,
    p_inv: Matrix6<C64>,
    eigs: [C64; 6],
    mult: [f64; 3],
}

/// Complex coordinates from real manifold coordinates:
/// `z = (s1 + i s2, s1 - i s2, s3 + i s4, s3 - i s4, s5)`.
pub fn complex_point(s: &[f64; 5]) -> [C64; 5] {
    [
        C64::new(s[0], s[1]),
        C64::new(s[0], -s[1]),
        C64::new(s[2], s[3]),
        C64::new(s[2], -s[3]),
        C64::new(s[4], 0.0),
    ]
}

impl Parameterization {
    /// Expand the manifold of `spec` to its truncation order.
    pub fn build(mu: f64, spec: &BuildSpec) -> Result<Parameterization> {
        if spec.order < 2 || spec.order > 64 {
            return Err(Error::InvalidInput(format!(
                "expansion order {} out of range [2, 64]",
                spec.order
            )));
        }
        let cp = Collinear::new(spec.point, mu);
        let (p, p_inv, eigs, mult) = assemble_frame(&cp, spec.kind, spec.scale)?;
        let lay = Layout::new(5, spec.order);
        let z0 = cp.state();

        let mut w: Vec<Series> = (0..6).map(|_| Series::zero(&lay)).collect();
        let mut f: Vec<Series> = (0..5).map(|_| Series::zero(&lay)).collect();
        for i in 0..5 {
            let mut e = [0u8; 5];
            e[i] = 1;
            w[i].set_coeff(&e, C64::new(1.0, 0.0));
            f[i].set_coeff(&e, eigs[i]);
        }

        let mut comp = Composer::new(&lay, mu, &z0, &p);
        comp.refresh_affine(0, &w);
        comp.refresh_nonlinear(0);
        comp.refresh_affine(1, &w);
        comp.refresh_nonlinear(1);
        {
            let g0 = comp.g_block(0, &p_inv);
            let m = g0.iter().map(|b| b[0].norm()).fold(0.0, f64::max);
            if m > 1e-11 {
                return Err(Error::InvalidInput(format!(
                    "field does not vanish at the expansion point (|G0| = {m:.3e})"
                )));
            }
        }

        let mut dbuf: Vec<C64> = Vec::new();
        for k in 2..=spec.order {
            comp.refresh_affine(k, &w);
            comp.refresh_nonlinear(k);
            let mut r = comp.g_block(k, &p_inv);
            subtract_known_transport(&mut r, &w, &f, k, &lay, &mut dbuf);
            solve_order(&mut w, &mut f, &r, k, &lay, &eigs)?;
            comp.refresh_affine(k, &w);
            comp.refresh_nonlinear(k);
        }
        drop(comp);

        Self::assemble(cp, spec.kind, spec.scale, lay, w, f, p, p_inv, eigs, mult)
    }

    /// Reassemble a parameterization from previously computed diagonal-frame
    /// series (e.g. read back from coefficient files). The linear frame is
    /// recomputed from `(mu, point, kind, scale)` and the series' linear
    /// parts are checked against it, so mismatched files are rejected.
    pub fn from_series(mu: f64, spec: &BuildSpec, w: Vec<Series>, f: Vec<Series>) -> Result<Parameterization> {
        if w.len() != 6 || f.len() != 5 {
            return Err(Error::InvalidInput(format!(
                "expected 6 immersion and 5 field components, got {} and {}",
                w.len(),
                f.len()
            )));
        }
        for s in w.iter().chain(f.iter()) {
            if s.layout().nvars() != 5 || s.layout().max_order() != spec.order {
                return Err(Error::InvalidInput(format!(
                    "series shape ({} vars, order {}) does not match the requested order {}",
                    s.layout().nvars(),
                    s.layout().max_order(),
                    spec.order
                )));
            }
        }
        let cp = Collinear::new(spec.point, mu);
        let (p, p_inv, eigs, mult) = assemble_frame(&cp, spec.kind, spec.scale)?;
        let lay = w[0].layout().clone();
        for i in 0..5 {
            let mut e = [0u8; 5];
            e[i] = 1;
            for j in 0..5 {
                let mut ej = [0u8; 5];
                ej[j] = 1;
                let expect = if i == j { 1.0 } else { 0.0 };
                if (w[i].coeff(&ej) - C64::new(expect, 0.0)).norm() > 1e-12 {
                    return Err(Error::InvalidInput(format!(
                        "immersion component {i} has a non-identity linear part"
                    )));
                }
            }
            if (f[i].coeff(&e) - eigs[i]).norm() > 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "field component {i} linear part does not match the eigenvalue of this frame"
                )));
            }
        }
        Self::assemble(cp, spec.kind, spec.scale, lay, w, f, p, p_inv, eigs, mult)
    }

    /// Derive the physical-frame immersion, its realifications, and the
    /// realified reduced field from the diagonal-frame series.
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cp: Collinear,
        kind: ManifoldKind,
        scale: ParamScale,
        lay: Arc<Layout>,
        w: Vec<Series>,
        f: Vec<Series>,
        p: Matrix6<C64>,
        p_inv: Matrix6<C64>,
        eigs: [C64; 6],
        mult: [f64; 3],
    ) -> Result<Parameterization> {
        let z0 = cp.state();
        // Physical-frame immersion and its realifications.
        let mut wt: Vec<Series> = (0..6)
            .map(|i| {
                let mut s = Series::zero(&lay);
                s.coeffs_mut()[0] = C64::new(z0[i], 0.0);
                s
            })
            .collect();
        for (i, wti) in wt.iter_mut().enumerate() {
            for (j, wj) in w.iter().enumerate() {
                let pij = p[(i, j)];
                if pij.re != 0.0 || pij.im != 0.0 {
                    wti.axpy(pij, wj);
                }
            }
        }
        let wt_real = wt
            .iter()
            .map(substitute_conjugate_pairs)
            .collect::<Result<Vec<_>>>()?;
        let lay4 = Layout::new(4, lay.max_order());
        let zero = C64::new(0.0, 0.0);
        let center = wt
            .iter()
            .map(|s| substitute_conjugate_pairs(&s.partial_eval_last(zero, &lay4)))
            .collect::<Result<Vec<_>>>()?;

        // Realified reduced field: pairwise combinations of the complex
        // components give the real coordinates' velocities.
        let half = C64::new(0.5, 0.0);
        let ihalf = C64::new(0.0, 0.5);
        let mut g: Vec<Series> = Vec::with_capacity(5);
        for pair in 0..2 {
            let (a, b) = (2 * pair, 2 * pair + 1);
            let mut s1 = Series::zero(&lay);
            s1.axpy(half, &f[a]);
            s1.axpy(half, &f[b]);
            let mut s2 = Series::zero(&lay);
            s2.axpy(ihalf, &f[b]);
            s2.axpy(-ihalf, &f[a]);
            g.push(s1);
            g.push(s2);
        }
        g.push(f[4].clone());
        let fred = g
            .iter()
            .map(substitute_conjugate_pairs)
            .collect::<Result<Vec<_>>>()?;

        Ok(Parameterization {
            cp,
            kind,
            scale,
            layout: lay,
            w,
            f,
            wt,
            wt_real,
            center,
            fred,
            p,
            p_inv,
            eigs,
            mult,
        })
    }

    pub fn point(&self) -> Lpoint {
        self.cp.point
    }

    pub fn kind(&self) -> ManifoldKind {
        self.kind
    }

    pub fn scale(&self) -> ParamScale {
        self.scale
    }

    pub fn order(&self) -> usize {
        self.layout.max_order()
    }

    pub fn collinear(&self) -> &Collinear {
        &self.cp
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn center_layout(&self) -> &Arc<Layout> {
        self.center[0].layout()
    }

    /// Immersion component `i` (0..6) in diagonal coordinates.
    pub fn w_series(&self, i: usize) -> &Series {
        &self.w[i]
    }

    /// Reduced field component `i` (0..5) in diagonal coordinates.
    pub fn f_series(&self, i: usize) -> &Series {
        &self.f[i]
    }

    /// Physical-frame immersion component `i` (0..6), complex coefficients.
    pub fn wtilde_series(&self, i: usize) -> &Series {
        &self.wt[i]
    }

    /// Realified physical-frame immersion component `i` over (s1..s5).
    pub fn wtilde_real_series(&self, i: usize) -> &RealSeries {
        &self.wt_real[i]
    }

    /// Realified center-slice component `i` over (s1..s4).
    pub fn center_series(&self, i: usize) -> &RealSeries {
        &self.center[i]
    }

    /// Realified reduced-field component `i` over (s1..s5).
    pub fn reduced_series(&self, i: usize) -> &RealSeries {
        &self.fred[i]
    }

    pub fn eigenvalues(&self) -> &[C64; 6] {
        &self.eigs
    }

    pub fn p_matrix(&self) -> &Matrix6<C64> {
        &self.p
    }

    pub fn p_inv_matrix(&self) -> &Matrix6<C64> {
        &self.p_inv
    }

    /// Column multipliers (planar, vertical, hyperbolic) applied on top of
    /// the symplectic normalization.
    pub fn multipliers(&self) -> [f64; 3] {
        self.mult
    }

    pub fn h0(&self) -> f64 {
        self.cp.h0
    }

    /// Coefficients (qp, qv) of the energy to quadratic order on the center:
    /// `H(W(s)) = h0 + qp (s1^2 + s2^2) + qv (s3^2 + s4^2) + O(|s|^3)`.
    pub fn quadratic_energy_coeffs(&self) -> (f64, f64) {
        (
            2.0 * self.cp.omega_p * self.mult[0] * self.mult[0],
            2.0 * self.cp.omega_v * self.mult[1] * self.mult[1],
        )
    }

    /// Sign of the fiber coordinate that displaces the state toward the
    /// small primary.
    pub fn moonward_fiber_sign(&self) -> f64 {
        ((self.cp.mu - 1.0) - self.cp.x).signum()
    }

    /// Evaluate the immersion at `s` through the realified series,
    /// truncated at `order`.
    pub fn eval_physical(&self, s: &[f64; 5], order: usize, scratch: &mut RealEvalScratch) -> State {
        let refs: Vec<&RealSeries> = self.wt_real.iter().collect();
        let mut out = [0.0; 6];
        eval_many_real(&refs, s, order, scratch, &mut out);
        State::from(out)
    }

    /// Evaluate the immersion through the complex series, checking that
    /// conjugate symmetry cancels the imaginary parts. Slower than
    /// [`Self::eval_physical`]; used for cross-validation.
    pub fn eval_physical_complex(&self, s: &[f64; 5], order: usize) -> Result<State> {
        let z = complex_point(s);
        let refs: Vec<&Series> = self.wt.iter().collect();
        let mut vals = [C64::new(0.0, 0.0); 6];
        let mut scr = EvalScratch::new();
        eval_many(&refs, &z, order, &mut scr, &mut vals);
        let scale = vals.iter().map(|v| v.re.abs()).fold(1.0f64, f64::max);
        let mut x = State::zeros();
        for i in 0..6 {
            if vals[i].im.abs() > EVAL_IMAG_REL_TOL * scale {
                return Err(Error::InvalidInput(format!(
                    "evaluation lost conjugate symmetry: imag {:.3e} in component {}",
                    vals[i].im, i
                )));
            }
            x[i] = vals[i].re;
        }
        Ok(x)
    }

    /// Evaluate the center slice (s5 = 0) at `s` in real arithmetic.
    pub fn eval_center(&self, s: &[f64; 4], order: usize, scratch: &mut RealEvalScratch) -> State {
        let refs: Vec<&RealSeries> = self.center.iter().collect();
        let mut out = [0.0; 6];
        eval_many_real(&refs, s, order, scratch, &mut out);
        State::from(out)
    }

    /// Realified immersion with the fiber coordinate frozen at `delta`:
    /// six series over (s1..s4).
    pub fn collapsed_fiber(&self, delta: f64) -> Result<Vec<RealSeries>> {
        let lay4 = self.center[0].layout().clone();
        let z = C64::new(delta, 0.0);
        self.wt
            .iter()
            .map(|s| substitute_conjugate_pairs(&s.partial_eval_last(z, &lay4)))
            .collect()
    }

    /// Immersion and its four tangential partial derivatives, all collapsed
    /// on the fiber `s5 = delta`. This is the jet the connection refinement
    /// differentiates through.
    pub fn fiber_jet(&self, delta: f64) -> Result<FiberJet> {
        let lay4 = self.center[0].layout().clone();
        let z = C64::new(delta, 0.0);
        let w = self.collapsed_fiber(delta)?;
        let i1 = C64::new(0.0, 1.0);
        let one = C64::new(1.0, 0.0);
        let mut d: Vec<Vec<RealSeries>> = Vec::with_capacity(4);
        for jvar in 0..4 {
            let a = 2 * (jvar / 2);
            let b = a + 1;
            let mut cols = Vec::with_capacity(6);
            for i in 0..6 {
                let da = self.wt[i].derivative(a);
                let db = self.wt[i].derivative(b);
                let mut comb = Series::zero(&self.layout);
                if jvar % 2 == 0 {
                    comb.axpy(one, &da);
                    comb.axpy(one, &db);
                } else {
                    comb.axpy(i1, &da);
                    comb.axpy(-i1, &db);
                }
                cols.push(substitute_conjugate_pairs(&comb.partial_eval_last(z, &lay4))?);
            }
            d.push(cols);
        }
        Ok(FiberJet {
            delta,
            order: self.layout.max_order(),
            w,
            d,
        })
    }

    /// Reduced vector field at `s`, truncated at `order`.
    pub fn reduced_field(&self, s: &[f64; 5], order: usize, scratch: &mut RealEvalScratch) -> SVector<f64, 5> {
        let refs: Vec<&RealSeries> = self.fred.iter().collect();
        let mut out = [0.0; 5];
        eval_many_real(&refs, s, order, scratch, &mut out);
        SVector::from(out)
    }

    /// Orbit error of the truncated parameterization at `s0`: the sup over
    /// a time grid of the distance between the immersed reduced orbit and
    /// the synodic orbit of the immersed initial state,
    /// `max_t |W(phi_t(s0)) - Phi_t(W(s0))|`.
    pub fn orbit_error(&self, s0: &[f64; 5], t_final: f64, order: usize, ngrid: usize) -> Result<f64> {
        assert!(ngrid >= 2);
        let times: Vec<f64> = (0..ngrid)
            .map(|i| t_final * (i as f64) / ((ngrid - 1) as f64))
            .collect();
        let opts = OdeOptions::default();
        let scr = RefCell::new(RealEvalScratch::new());
        let refs: Vec<&RealSeries> = self.fred.iter().collect();
        let fred = |_t: f64, y: &SVector<f64, 5>| -> SVector<f64, 5> {
            let mut sc = scr.borrow_mut();
            let x = [y[0], y[1], y[2], y[3], y[4]];
            let mut out = [0.0; 5];
            eval_many_real(&refs, &x, order, &mut sc, &mut out);
            SVector::from(out)
        };
        let s0v = SVector::<f64, 5>::from(*s0);
        let reduced = integrate_fixed_times(&fred, 0.0, &s0v, &times, &opts)?;

        let mut esc = RealEvalScratch::new();
        let x0 = self.eval_physical(s0, order, &mut esc);
        let mu = self.cp.mu;
        let ffull = |_t: f64, y: &State| dynamics::field(mu, y);
        let full = integrate_fixed_times(&ffull, 0.0, &x0, &times, &opts)?;

        let mut emax = 0.0f64;
        for (sr, xf) in reduced.iter().zip(full.iter()) {
            let sa = [sr[0], sr[1], sr[2], sr[3], sr[4]];
            let wx = self.eval_physical(&sa, order, &mut esc);
            emax = emax.max((wx - xf).norm());
        }
        Ok(emax)
    }

    /// Residual series of the invariance equation for the truncation at
    /// order `n <= order`: six components of `G(W(z)) - DW(z) f(z)` over a
    /// layout of order `n + 2`. Blocks through `n` vanish to roundoff; the
    /// two trailing blocks carry the leading truncation error.
    pub fn invariance_residual(&self, n: usize) -> Result<Vec<Series>> {
        if n < 2 || n > self.layout.max_order() {
            return Err(Error::InvalidInput(format!(
                "residual order {n} out of range [2, {}]",
                self.layout.max_order()
            )));
        }
        let lay2 = Layout::new(5, n + 2);
        let trunc_re = |s: &Series| -> Series {
            let mut t = s.clone();
            t.truncate(n);
            t.relayout(&lay2)
        };
        let wl: Vec<Series> = self.w.iter().map(&trunc_re).collect();
        let fl: Vec<Series> = self.f.iter().map(&trunc_re).collect();
        let z0 = self.cp.state();
        let mut comp = Composer::new(&lay2, self.cp.mu, &z0, &self.p);
        let mut res: Vec<Series> = (0..6).map(|_| Series::zero(&lay2)).collect();
        for k in 0..=n + 2 {
            comp.refresh_affine(k, &wl);
            comp.refresh_nonlinear(k);
            let g = comp.g_block(k, &self.p_inv);
            for (i, ri) in res.iter_mut().enumerate() {
                ri.block_mut(k).copy_from_slice(&g[i]);
            }
        }
        for (i, ri) in res.iter_mut().enumerate() {
            for (v, fv) in fl.iter().enumerate() {
                let dv = wl[i].derivative(v);
                let prod = mul_full(&dv, fv, n + 2);
                ri.axpy(C64::new(-1.0, 0.0), &prod);
            }
        }
        Ok(res)
    }

    /// The energy composed with the immersion, as a complex series over
    /// (z1..z5) truncated at `trunc`. Realify (optionally after fixing
    /// `z5 = 0`) to read off the energy expansion on the manifold.
    pub fn hamiltonian_series(&self, trunc: usize) -> Result<Series> {
        if trunc < 2 || trunc > self.layout.max_order() {
            return Err(Error::InvalidInput(format!(
                "composition order {trunc} out of range [2, {}]",
                self.layout.max_order()
            )));
        }
        let lay2 = Layout::new(5, trunc);
        let wl: Vec<Series> = self.w.iter().map(|s| s.relayout(&lay2)).collect();
        let z0 = self.cp.state();
        let mu = self.cp.mu;
        let mut comp = Composer::new(&lay2, mu, &z0, &self.p);
        for k in 0..=trunc {
            comp.refresh_affine(k, &wl);
            comp.refresh_nonlinear(k);
        }
        let r1i = pow_real(&comp.q1, -0.5, trunc)?;
        let r2i = pow_real(&comp.q2, -0.5, trunc)?;
        let mut h = Series::zero(&lay2);
        h.axpy(C64::new(-(1.0 - mu), 0.0), &r1i);
        h.axpy(C64::new(-mu, 0.0), &r2i);
        for pc in [&comp.px, &comp.py, &comp.pz] {
            let sq = mul_full(pc, pc, trunc);
            h.axpy(C64::new(0.5, 0.0), &sq);
        }
        // -x py + y px, with x = za + mu.
        let xpy = mul_full(&comp.za, &comp.py, trunc);
        h.axpy(C64::new(-1.0, 0.0), &xpy);
        h.axpy(C64::new(-mu, 0.0), &comp.py);
        let ypx = mul_full(&comp.yy, &comp.px, trunc);
        h.axpy(C64::new(1.0, 0.0), &ypx);
        Ok(h)
    }
}

// ---------------------------------------------------------------------------
// Fiber jet
// ---------------------------------------------------------------------------

/// Immersion and tangential Jacobian on a fixed fiber `s5 = delta`,
/// realified to four variables for fast repeated evaluation.
pub struct FiberJet {
    pub delta: f64,
    order: usize,
    w: Vec<RealSeries>,
    d: Vec<Vec<RealSeries>>,
}

impl FiberJet {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn eval_state(&self, s: &[f64; 4], order: usize, scratch: &mut RealEvalScratch) -> State {
        let refs: Vec<&RealSeries> = self.w.iter().collect();
        let mut out = [0.0; 6];
        eval_many_real(&refs, s, order, scratch, &mut out);
        State::from(out)
    }

    /// State and the four columns `d W / d s_j` in one chain pass.
    pub fn eval_jet(&self, s: &[f64; 4], order: usize, scratch: &mut RealEvalScratch) -> (State, [State; 4]) {
        let mut refs: Vec<&RealSeries> = Vec::with_capacity(30);
        refs.extend(self.w.iter());
        for col in &self.d {
            refs.extend(col.iter());
        }
        let mut out = [0.0; 30];
        eval_many_real(&refs, s, order, scratch, &mut out);
        let mut state = State::zeros();
        for i in 0..6 {
            state[i] = out[i];
        }
        let mut jac = [State::zeros(); 4];
        for j in 0..4 {
            for i in 0..6 {
                jac[j][i] = out[6 + 6 * j + i];
            }
        }
        (state, jac)
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{hamiltonian, jacobian, MU_EARTH_MOON};

    fn build(point: Lpoint, kind: ManifoldKind, scale: ParamScale, order: usize) -> Parameterization {
        Parameterization::build(
            MU_EARTH_MOON,
            &BuildSpec {
                point,
                kind,
                scale,
                order,
            },
        )
        .expect("expansion should succeed")
    }

    #[test]
    fn eigenframe_diagonalizes_the_linearization() {
        for (point, kind) in [
            (Lpoint::L1, ManifoldKind::CenterStable),
            (Lpoint::L2, ManifoldKind::CenterUnstable),
        ] {
            let pm = build(point, kind, ParamScale::GammaUnit, 2);
            let cp = pm.collinear();
            let df = jacobian(cp.mu, &cp.state());
            let dfc: Matrix6<C64> = df.map(|v| C64::new(v, 0.0));
            let diag = pm.p_inv_matrix() * dfc * pm.p_matrix();
            for i in 0..6 {
                for j in 0..6 {
                    let want = if i == j { pm.eigenvalues()[i] } else { C64::new(0.0, 0.0) };
                    assert!(
                        (diag[(i, j)] - want).norm() < 1e-10,
                        "entry ({i},{j}) = {} (want {want})",
                        diag[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn linear_part_of_center_slice_matches_frame_columns() {
        let pm = build(Lpoint::L1, ManifoldKind::CenterStable, ParamScale::Symplectic, 3);
        let fr = pm.collinear().frame();
        // d W / d s1 = 2 u_r, d W / d s2 = 2 u_i, d W / d s3 = 2 v_r,
        // d W / d s4 = 2 v_i on the center slice at the origin.
        let cols = [
            (0usize, fr.u_r * 2.0),
            (1usize, fr.u_i * 2.0),
            (2usize, fr.v_r * 2.0),
            (3usize, fr.v_i * 2.0),
        ];
        for (var, want) in cols {
            let mut e = [0u8; 4];
            e[var] = 1;
            for i in 0..6 {
                let got = pm.center_series(i).coeff(&e);
                assert!(
                    (got - want[i]).abs() < 1e-12,
                    "column {var}, component {i}: {got} vs {}",
                    want[i]
                );
            }
        }
    }

    #[test]
    fn invariance_residual_vanishes_below_truncation() {
        for (point, kind) in [
            (Lpoint::L1, ManifoldKind::CenterStable),
            (Lpoint::L2, ManifoldKind::CenterUnstable),
        ] {
            let pm = build(point, kind, ParamScale::GammaUnit, 6);
            let res = pm.invariance_residual(6).unwrap();
            let lay = res[0].layout().clone();
            for comp in &res {
                for k in 0..=6usize {
                    let mx = comp.block(k).iter().map(|c| c.norm()).fold(0.0, f64::max);
                    assert!(mx < 1e-11, "block {k} residual {mx:.3e}");
                }
            }
            // The leading error blocks must carry actual content.
            let mx: f64 = res
                .iter()
                .flat_map(|c| c.block(7).iter().chain(c.block(8).iter()))
                .map(|c| c.norm())
                .fold(0.0, f64::max);
            assert!(mx > 1e-9, "expected nonzero truncation blocks, got {mx:.3e}");
            let _ = lay;
        }
    }

    #[test]
    fn invariance_holds_pointwise_through_derivatives() {
        let pm = build(Lpoint::L2, ManifoldKind::CenterUnstable, ParamScale::GammaUnit, 8);
        let mu = pm.collinear().mu;
        let s = [0.02, -0.015, 0.01, 0.025, 0.012];
        let z = complex_point(&s);
        let mut rsc = RealEvalScratch::new();
        let mut csc = EvalScratch::new();

        let x = pm.eval_physical(&s, 8, &mut rsc);
        let fx = dynamics::field(mu, &x);
        let sdot = pm.reduced_field(&s, 8, &mut rsc);

        // DW(s) sdot via complex partial derivatives: the chain through the
        // real coordinates is d/ds1 = d/dz1 + d/dz2, d/ds2 = i(d/dz1 - d/dz2),
        // and so on; the fifth coordinate is already real.
        let mut transported = State::zeros();
        for i in 0..6 {
            let wt = pm.wtilde_series(i);
            let dz: Vec<C64> = (0..5).map(|v| wt.derivative(v).eval(&z, 8, &mut csc)).collect();
            let i1 = C64::new(0.0, 1.0);
            let ds = [
                dz[0] + dz[1],
                i1 * (dz[0] - dz[1]),
                dz[2] + dz[3],
                i1 * (dz[2] - dz[3]),
                dz[4],
            ];
            let mut acc = C64::new(0.0, 0.0);
            for j in 0..5 {
                acc += ds[j] * sdot[j];
            }
            assert!(acc.im.abs() < 1e-12, "transport should be real");
            transported[i] = acc.re;
        }
        let resid = (fx - transported).norm();
        assert!(resid < 1e-12, "pointwise invariance residual {resid:.3e}");
    }

    #[test]
    fn style_zero_patterns_are_exact() {
        let pm = build(Lpoint::L1, ManifoldKind::CenterStable, ParamScale::GammaUnit, 6);
        let lay = pm.layout().clone();
        for idx in 0..lay.ncoeffs() {
            let e = lay.exponents(idx);
            let has_s5 = e[4] != 0;
            for i in 0..5 {
                let c = pm.f_series(i).coeffs()[idx];
                let must_vanish = match i {
                    0 | 1 => has_s5 || (e[0] == 0 && e[1] == 0),
                    2 | 3 => has_s5 || (e[2] == 0 && e[3] == 0),
                    4 => !has_s5,
                    _ => unreachable!(),
                };
                if must_vanish {
                    assert!(
                        c.re == 0.0 && c.im == 0.0,
                        "f[{i}] at {e:?} should be exactly zero, got {c}"
                    );
                }
            }
        }
    }

    #[test]
    fn reduced_field_linear_part_is_the_expected_rotation() {
        let pm = build(Lpoint::L2, ManifoldKind::CenterUnstable, ParamScale::GammaUnit, 4);
        let cp = pm.collinear();
        let coeff = |i: usize, var: usize| -> f64 {
            let mut e = [0u8; 5];
            e[var] = 1;
            pm.reduced_series(i).coeff(&e)
        };
        assert!((coeff(0, 1) - cp.omega_p).abs() < 1e-12);
        assert!((coeff(1, 0) + cp.omega_p).abs() < 1e-12);
        assert!((coeff(2, 3) - cp.omega_v).abs() < 1e-12);
        assert!((coeff(3, 2) + cp.omega_v).abs() < 1e-12);
        assert!((coeff(4, 4) - cp.lambda).abs() < 1e-12);

        let pm_s = build(Lpoint::L1, ManifoldKind::CenterStable, ParamScale::GammaUnit, 4);
        let mut e5 = [0u8; 5];
        e5[4] = 1;
        assert!((pm_s.reduced_series(4).coeff(&e5) + pm_s.collinear().lambda).abs() < 1e-12);
    }

    #[test]
    fn gamma_scale_is_a_reparameterization_of_symplectic() {
        let pg = build(Lpoint::L1, ManifoldKind::CenterStable, ParamScale::GammaUnit, 5);
        let ps = build(Lpoint::L1, ManifoldKind::CenterStable, ParamScale::Symplectic, 5);
        let m = pg.multipliers();
        let mut rsc = RealEvalScratch::new();
        for s in [[0.05, -0.03, 0.04, 0.02, 0.01], [0.1, 0.08, -0.06, 0.0, -0.02]] {
            let scaled = [s[0] * m[0], s[1] * m[0], s[2] * m[1], s[3] * m[1], s[4] * m[2]];
            let a = pg.eval_physical(&s, 5, &mut rsc);
            let b = ps.eval_physical(&scaled, 5, &mut rsc);
            assert!((a - b).norm() < 1e-13, "{:.3e}", (a - b).norm());
        }
    }

    #[test]
    fn real_evaluators_agree_with_complex_series() {
        let pm = build(Lpoint::L2, ManifoldKind::CenterUnstable, ParamScale::GammaUnit, 6);
        let mut rsc = RealEvalScratch::new();
        let s = [0.11, -0.07, 0.09, 0.05, 0.013];
        let a = pm.eval_physical(&s, 6, &mut rsc);
        let b = pm.eval_physical_complex(&s, 6).unwrap();
        assert!((a - b).norm() < 1e-13);

        // Center slice and collapsed fiber agree with the full evaluator.
        let s4 = [s[0], s[1], s[2], s[3]];
        let c = pm.eval_center(&s4, 6, &mut rsc);
        let d = pm.eval_physical(&[s[0], s[1], s[2], s[3], 0.0], 6, &mut rsc);
        assert!((c - d).norm() < 1e-13);

        let fib = pm.collapsed_fiber(s[4]).unwrap();
        let refs: Vec<&RealSeries> = fib.iter().collect();
        let mut out = [0.0; 6];
        eval_many_real(&refs, &s4, 6, &mut rsc, &mut out);
        let e = State::from(out);
        assert!((e - a).norm() < 1e-13);
    }

    #[test]
    fn fiber_jet_matches_finite_differences() {
        let pm = build(Lpoint::L1, ManifoldKind::CenterStable, ParamScale::GammaUnit, 8);
        let jet = pm.fiber_jet(-1e-3).unwrap();
        let mut rsc = RealEvalScratch::new();
        let s = [0.12, -0.05, 0.08, 0.06];
        let (x, jac) = jet.eval_jet(&s, 8, &mut rsc);
        let x2 = jet.eval_state(&s, 8, &mut rsc);
        assert!((x - x2).norm() < 1e-14);
        let h = 1e-6;
        for j in 0..4 {
            let mut sp = s;
            let mut sm = s;
            sp[j] += h;
            sm[j] -= h;
            let fd = (jet.eval_state(&sp, 8, &mut rsc) - jet.eval_state(&sm, 8, &mut rsc)) / (2.0 * h);
            assert!(
                (fd - jac[j]).norm() < 1e-7,
                "column {j}: fd-vs-jet {:.3e}",
                (fd - jac[j]).norm()
            );
        }
    }

    #[test]
    fn energy_expansion_has_the_frequency_quadratic_form() {
        let pm = build(Lpoint::L1, ManifoldKind::CenterStable, ParamScale::Symplectic, 6);
        let cp = pm.collinear();
        let h = pm.hamiltonian_series(6).unwrap();
        let lay4 = Layout::new(4, 6);
        let hc = substitute_conjugate_pairs(&h.partial_eval_last(C64::new(0.0, 0.0), &lay4)).unwrap();
        assert!((hc.coeff(&[0, 0, 0, 0]) - cp.h0).abs() < 1e-13);
        for var in 0..4 {
            let mut e = [0u8; 4];
            e[var] = 1;
            assert!(hc.coeff(&e).abs() < 1e-11, "linear term {var}");
        }
        let want = [2.0 * cp.omega_p, 2.0 * cp.omega_p, 2.0 * cp.omega_v, 2.0 * cp.omega_v];
        for var in 0..4 {
            let mut e = [0u8; 4];
            e[var] = 2;
            let got = hc.coeff(&e);
            assert!(
                (got - want[var]).abs() < 1e-11,
                "quadratic {var}: {got} vs {}",
                want[var]
            );
        }
        // Cross terms of the quadratic block vanish.
        for a in 0..4 {
            for b in (a + 1)..4 {
                let mut e = [0u8; 4];
                e[a] = 1;
                e[b] = 1;
                assert!(hc.coeff(&e).abs() < 1e-11);
            }
        }

        // Gamma-unit quadratic coefficients match the closed form.
        let pg = build(Lpoint::L1, ManifoldKind::CenterStable, ParamScale::GammaUnit, 6);
        let hg = pg.hamiltonian_series(6).unwrap();
        let hgc = substitute_conjugate_pairs(&hg.partial_eval_last(C64::new(0.0, 0.0), &lay4)).unwrap();
        let (qp, qv) = pg.quadratic_energy_coeffs();
        assert!((hgc.coeff(&[2, 0, 0, 0]) - qp).abs() < 1e-12 * qp.abs().max(1.0));
        assert!((hgc.coeff(&[0, 0, 2, 0]) - qv).abs() < 1e-12 * qv.abs().max(1.0));
    }

    #[test]
    fn energy_is_transported_along_fibers() {
        // The uncoupling conditions make the reduced center flow independent
        // of s5, so displacing along the fiber keeps the energy of the base
        // point up to the truncation error.
        let pm = build(Lpoint::L2, ManifoldKind::CenterUnstable, ParamScale::GammaUnit, 12);
        let mu = pm.collinear().mu;
        let mut rsc = RealEvalScratch::new();
        let s4 = [0.2, -0.1, 0.15, 0.1];
        let base = hamiltonian(mu, &pm.eval_center(&s4, 12, &mut rsc));
        let lifted = hamiltonian(
            mu,
            &pm.eval_physical(&[s4[0], s4[1], s4[2], s4[3], 1e-3], 12, &mut rsc),
        );
        // The agreement is limited by the truncation error of the order-12
        // expansion at this amplitude, scaled down by the small fiber
        // displacement; measured a few 1e-12.
        assert!(
            (base - lifted).abs() < 1e-10,
            "fiber displacement changed the energy by {:.3e}",
            base - lifted
        );
    }

    #[test]
    fn orbit_error_is_small_at_moderate_order() {
        let pm = build(Lpoint::L1, ManifoldKind::CenterStable, ParamScale::GammaUnit, 10);
        let sign = pm.moonward_fiber_sign();
        assert!(sign < 0.0, "L1 fiber toward the small primary has negative sign");
        let e = pm
            .orbit_error(&[0.15, 0.0, 0.1, 0.0, sign * 1e-3], 3.0, 10, 25)
            .unwrap();
        assert!(e < 1e-5, "orbit error {e:.3e}");

        let pu = build(Lpoint::L2, ManifoldKind::CenterUnstable, ParamScale::GammaUnit, 10);
        let sign = pu.moonward_fiber_sign();
        assert!(sign > 0.0, "L2 fiber toward the small primary has positive sign");
        let e = pu
            .orbit_error(&[0.15, 0.0, 0.1, 0.0, sign * 1e-3], -3.0, 10, 25)
            .unwrap();
        assert!(e < 1e-5, "orbit error {e:.3e}");
    }

    #[test]
    #[ignore = "timing probe for full-order expansions; run explicitly"]
    fn expansion_timing_probe() {
        for order in [16usize, 20, 24, 30] {
            let t0 = std::time::Instant::now();
            let pm = build(Lpoint::L2, ManifoldKind::CenterUnstable, ParamScale::GammaUnit, order);
            let dt = t0.elapsed();
            println!(
                "order {order}: {:.2}s, {} coefficients per component",
                dt.as_secs_f64(),
                pm.layout().ncoeffs()
            );
        }
    }

    #[test]
    fn expansion_is_deterministic() {
        let a = build(Lpoint::L1, ManifoldKind::CenterStable, ParamScale::GammaUnit, 4);
        let b = build(Lpoint::L1, ManifoldKind::CenterStable, ParamScale::GammaUnit, 4);
        for i in 0..6 {
            let ca = a.w_series(i).coeffs();
            let cb = b.w_series(i).coeffs();
            assert_eq!(ca.len(), cb.len());
            for (x, y) in ca.iter().zip(cb.iter()) {
                assert!(x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits());
            }
        }
    }

    #[test]
    fn reassembly_from_series_reproduces_the_expansion() {
        let spec = BuildSpec {
            point: Lpoint::L2,
            kind: ManifoldKind::CenterUnstable,
            scale: ParamScale::GammaUnit,
            order: 8,
        };
        let pm = Parameterization::build(MU_EARTH_MOON, &spec).unwrap();
        let w: Vec<Series> = (0..6).map(|i| pm.w_series(i).clone()).collect();
        let f: Vec<Series> = (0..5).map(|i| pm.f_series(i).clone()).collect();
        let re = Parameterization::from_series(MU_EARTH_MOON, &spec, w.clone(), f.clone()).unwrap();

        // Derived real series must agree bitwise: assembly is deterministic.
        for i in 0..6 {
            let ca = pm.wtilde_real_series(i).coeffs();
            let cb = re.wtilde_real_series(i).coeffs();
            assert_eq!(ca.len(), cb.len());
            for (x, y) in ca.iter().zip(cb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            let ca = pm.center_series(i).coeffs();
            let cb = re.center_series(i).coeffs();
            for (x, y) in ca.iter().zip(cb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(pm.h0().to_bits(), re.h0().to_bits());

        // A series with a corrupted linear part must be rejected.
        let mut bad_f = f.clone();
        let mut e = [0u8; 5];
        e[2] = 1;
        let c = bad_f[2].coeff(&e);
        bad_f[2].set_coeff(&e, c + C64::new(1e-6, 0.0));
        assert!(Parameterization::from_series(MU_EARTH_MOON, &spec, w.clone(), bad_f).is_err());

        // A wrong manifold kind changes the frame, so the field check fires.
        let other = BuildSpec {
            kind: ManifoldKind::CenterStable,
            ..spec
        };
        assert!(Parameterization::from_series(MU_EARTH_MOON, &other, w, f).is_err());
    }
}
