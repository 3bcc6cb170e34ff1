//! Spatial circular restricted three-body problem in the synodic frame,
//! Hamiltonian form.
//!
//! State order is `(x, y, z, px, py, pz)` with momenta `px = xdot - y`,
//! `py = ydot + x`, `pz = zdot`. The big primary (mass `1 - mu`) sits at
//! `(mu, 0, 0)` and the small one (mass `mu`) at `(mu - 1, 0, 0)`; for the
//! Earth-Moon system those are the Earth and the Moon.
//!
//! Besides the vector field / Hamiltonian / Jacobian, this module computes
//! the collinear points L1/L2 (quintic solved in double-double arithmetic so
//! downstream frequencies are correct to the last printed digit) and the
//! symplectic linear frame at each point that the manifold parameterizations
//! start from.

use nalgebra::{Matrix6, Vector6};
use num_complex::Complex64;

use crate::dd::Dd;

/// Earth-Moon mass ratio (DE406 ephemerides value).
pub const MU_EARTH_MOON: f64 = 1.215058560962404e-2;

/// Moon radius and Earth-Moon distance used for the close-approach guard.
pub const MOON_RADIUS_KM: f64 = 1737.4;
pub const EARTH_MOON_DISTANCE_KM: f64 = 384400.0;

/// Trajectories entering this synodic-frame distance from the Moon's center
/// (two Moon radii) are flagged as lunar impacts.
pub const MOON_GUARD_RADIUS: f64 = 2.0 * MOON_RADIUS_KM / EARTH_MOON_DISTANCE_KM;

/// Convergence threshold for the double-double Newton refinement of the
/// collinear quintic.
const QUINTIC_DD_TOL: f64 = 1e-30;

pub type State = Vector6<f64>;

#[inline]
fn body_offsets(mu: f64, s: &State) -> (f64, f64, f64, f64, f64) {
    // Returns (dx1, dx2, y, z, _) where dx1/dx2 are x-offsets from the two
    // primaries.
    (s[0] - mu, s[0] - mu + 1.0, s[1], s[2], 0.0)
}

/// RTBP Hamiltonian.
pub fn hamiltonian(mu: f64, s: &State) -> f64 {
    let (dx1, dx2, y, z, _) = body_offsets(mu, s);
    let r1 = (dx1 * dx1 + y * y + z * z).sqrt();
    let r2 = (dx2 * dx2 + y * y + z * z).sqrt();
    0.5 * (s[3] * s[3] + s[4] * s[4] + s[5] * s[5]) - s[0] * s[4] + s[1] * s[3]
        - (1.0 - mu) / r1
        - mu / r2
}

/// Gradient of the Hamiltonian with respect to the state.
pub fn grad_hamiltonian(mu: f64, s: &State) -> State {
    let (dx1, dx2, y, z, _) = body_offsets(mu, s);
    let r1sq = dx1 * dx1 + y * y + z * z;
    let r2sq = dx2 * dx2 + y * y + z * z;
    let r1c = r1sq.sqrt() * r1sq;
    let r2c = r2sq.sqrt() * r2sq;
    let a1 = (1.0 - mu) / r1c;
    let a2 = mu / r2c;
    Vector6::new(
        -s[4] + a1 * dx1 + a2 * dx2,
        s[3] + a1 * y + a2 * y,
        a1 * z + a2 * z,
        s[3] + s[1],
        s[4] - s[0],
        s[5],
    )
}

/// RTBP vector field (Hamilton's equations).
pub fn field(mu: f64, s: &State) -> State {
    let (dx1, dx2, y, z, _) = body_offsets(mu, s);
    let r1sq = dx1 * dx1 + y * y + z * z;
    let r2sq = dx2 * dx2 + y * y + z * z;
    let r1c = r1sq.sqrt() * r1sq;
    let r2c = r2sq.sqrt() * r2sq;
    let a1 = (1.0 - mu) / r1c;
    let a2 = mu / r2c;
    Vector6::new(
        s[3] + s[1],
        s[4] - s[0],
        s[5],
        s[4] - a1 * dx1 - a2 * dx2,
        -s[3] - (a1 + a2) * y,
        -(a1 + a2) * z,
    )
}

/// Jacobian of the vector field.
pub fn jacobian(mu: f64, s: &State) -> Matrix6<f64> {
    let (dx1, dx2, y, z, _) = body_offsets(mu, s);
    let r1sq = dx1 * dx1 + y * y + z * z;
    let r2sq = dx2 * dx2 + y * y + z * z;
    let r1 = r1sq.sqrt();
    let r2 = r2sq.sqrt();
    let (m1, m2) = (1.0 - mu, mu);
    let (i1, i2) = (m1 / (r1sq * r1), m2 / (r2sq * r2));
    let (j1, j2) = (3.0 * m1 / (r1sq * r1sq * r1), 3.0 * m2 / (r2sq * r2sq * r2));

    // Hessian of the gravitational potential U = -(1-mu)/r1 - mu/r2:
    // U_ab = sum_i m_i (delta_ab / r^3 - 3 d_a d_b / r^5).
    let uxx = i1 + i2 - j1 * dx1 * dx1 - j2 * dx2 * dx2;
    let uyy = i1 + i2 - j1 * y * y - j2 * y * y;
    let uzz = i1 + i2 - j1 * z * z - j2 * z * z;
    let uxy = -j1 * dx1 * y - j2 * dx2 * y;
    let uxz = -j1 * dx1 * z - j2 * dx2 * z;
    let uyz = -j1 * y * z - j2 * y * z;

    #[rustfmt::skip]
    let m = Matrix6::new(
        0.0,   1.0,  0.0,  1.0, 0.0, 0.0,
        -1.0,  0.0,  0.0,  0.0, 1.0, 0.0,
        0.0,   0.0,  0.0,  0.0, 0.0, 1.0,
        -uxx, -uxy, -uxz,  0.0, 1.0, 0.0,
        -uxy, -uyy, -uyz, -1.0, 0.0, 0.0,
        -uxz, -uyz, -uzz,  0.0, 0.0, 0.0,
    );
    m
}

/// Distance to the Moon's center.
pub fn moon_distance(mu: f64, s: &State) -> f64 {
    let dx = s[0] - (mu - 1.0);
    (dx * dx + s[1] * s[1] + s[2] * s[2]).sqrt()
}

// ---------------------------------------------------------------------------
// Collinear points
// ---------------------------------------------------------------------------

/// The two collinear points flanking the small primary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Lpoint {
    L1,
    L2,
}

impl Lpoint {
    pub fn tag(&self) -> &'static str {
        match self {
            Lpoint::L1 => "L1",
            Lpoint::L2 => "L2",
        }
    }
}

impl std::str::FromStr for Lpoint {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "L1" | "l1" => Ok(Lpoint::L1),
            "L2" | "l2" => Ok(Lpoint::L2),
            other => Err(crate::Error::InvalidInput(format!("unknown point {other:?}"))),
        }
    }
}

/// A collinear point with its frequencies and characteristic exponent.
///
/// `gamma` is the distance from the point to the small primary, `x` its
/// synodic abscissa, `c` the sum of mass-over-cubed-distance contributions
/// of the two primaries at the point (so `c = omega_v^2`), `h0` the energy
/// of the point. The planar frequency `omega_p`, the vertical frequency
/// `omega_v` and the hyperbolic exponent `lambda` follow in closed form
/// from `c`.
#[derive(Debug, Clone)]
pub struct Collinear {
    pub point: Lpoint,
    pub mu: f64,
    pub gamma: f64,
    pub x: f64,
    pub c: f64,
    pub omega_p: f64,
    pub omega_v: f64,
    pub lambda: f64,
    pub h0: f64,
}

/// Quintic for the distance gamma between a collinear point and the small
/// primary. Roots: L1 with `sgn = -1`, L2 with `sgn = +1` (the sign of the
/// `gamma^4`-adjacent family of terms flips between the two).
fn quintic(point: Lpoint, mu: f64, g: Dd) -> (Dd, Dd) {
    // L1: g^5 - (3-mu) g^4 + (3-2mu) g^3 - mu g^2 + 2 mu g - mu
    // L2: g^5 + (3-mu) g^4 + (3-2mu) g^3 - mu g^2 - 2 mu g - mu
    let (c4, c3, c2, c1, c0) = match point {
        Lpoint::L1 => (-(3.0 - mu), 3.0 - 2.0 * mu, -mu, 2.0 * mu, -mu),
        Lpoint::L2 => (3.0 - mu, 3.0 - 2.0 * mu, -mu, -2.0 * mu, -mu),
    };
    // Horner in dd, plus the derivative alongside.
    let coeffs = [1.0, c4, c3, c2, c1, c0];
    let mut p = Dd::from_f64(coeffs[0]);
    let mut dp = Dd::ZERO;
    for &co in &coeffs[1..] {
        dp = dp.mul(g).add(p);
        p = p.mul(g).add_f64(co);
    }
    (p, dp)
}

impl Collinear {
    pub fn new(point: Lpoint, mu: f64) -> Collinear {
        // f64 Newton from the classical seed, then dd refinement.
        let mut g = (mu / 3.0f64).cbrt();
        for _ in 0..60 {
            let gd = Dd::from_f64(g);
            let (p, dp) = quintic(point, mu, gd);
            let step = p.to_f64() / dp.to_f64();
            g -= step;
            if step.abs() < 1e-16 * g.abs() {
                break;
            }
        }
        let mut gd = Dd::from_f64(g);
        for _ in 0..3 {
            let (p, dp) = quintic(point, mu, gd);
            let step = p.div(dp);
            gd = gd.sub(step);
            if step.to_f64().abs() < QUINTIC_DD_TOL {
                break;
            }
        }

        // Distances to the primaries and derived quantities, all in dd.
        let one = Dd::ONE;
        let (x_dd, r1_dd) = match point {
            // x = mu - 1 + gamma, r1 = 1 - gamma
            Lpoint::L1 => (Dd::from_f64(mu - 1.0).add(gd), one.sub(gd)),
            // x = mu - 1 - gamma, r1 = 1 + gamma
            Lpoint::L2 => (Dd::from_f64(mu - 1.0).sub(gd), one.add(gd)),
        };
        let r2_dd = gd;
        let m1 = Dd::from_f64(1.0 - mu);
        let m2 = Dd::from_f64(mu);
        let r1c = r1_dd.mul(r1_dd).mul(r1_dd);
        let r2c = r2_dd.mul(r2_dd).mul(r2_dd);
        let c_dd = m1.div(r1c).add(m2.div(r2c));

        // omega_p^2 = (2 - c + sqrt(9c^2 - 8c)) / 2
        // lambda^2  = (c - 2 + sqrt(9c^2 - 8c)) / 2
        // omega_v^2 = c
        let disc = c_dd.mul(c_dd).mul_f64(9.0).sub(c_dd.mul_f64(8.0)).sqrt();
        let two = Dd::from_f64(2.0);
        let wp = two.sub(c_dd).add(disc).div(two).sqrt();
        let lam = c_dd.sub(two).add(disc).div(two).sqrt();
        let wv = c_dd.sqrt();

        // h0 = -x^2/2 - (1-mu)/r1 - mu/r2
        let h0_dd = x_dd
            .mul(x_dd)
            .mul_f64(0.5)
            .neg()
            .sub(m1.div(r1_dd))
            .sub(m2.div(r2_dd));

        Collinear {
            point,
            mu,
            gamma: gd.to_f64(),
            x: x_dd.to_f64(),
            c: c_dd.to_f64(),
            omega_p: wp.to_f64(),
            omega_v: wv.to_f64(),
            lambda: lam.to_f64(),
            h0: h0_dd.to_f64(),
        }
    }

    /// The equilibrium state in position-momentum coordinates.
    pub fn state(&self) -> State {
        Vector6::new(self.x, 0.0, 0.0, 0.0, self.x, 0.0)
    }

    /// Symplectic linear frame at the point (see [`CenterFrame`]).
    pub fn frame(&self) -> CenterFrame {
        CenterFrame::new(self)
    }
}

// ---------------------------------------------------------------------------
// Linear frames
// ---------------------------------------------------------------------------

/// Real symplectic eigenbasis at a collinear point.
///
/// Columns of `q` are `[u_r, v_r, w_plus, u_i, v_i, -w_minus]`, where
/// `u_r -/+ i u_i` span the planar elliptic plane (frequency `omega_p`),
/// `v_r, v_i` the vertical elliptic plane (frequency `omega_v`), and
/// `w_plus`/`w_minus` are the unstable/stable directions (exponent
/// `+lambda` / `-lambda`). All six vectors are scaled so that
/// `q^T J q = J`; the sixth *column* carries an internal sign so that the
/// hyperbolic pairing comes out `+1` even though the stored `w_minus`
/// keeps its conventional orientation (positive x component, matching
/// `w_plus` on the same side of the saddle).
#[derive(Debug, Clone)]
pub struct CenterFrame {
    pub u_r: Vector6<f64>,
    pub u_i: Vector6<f64>,
    pub v_r: Vector6<f64>,
    pub v_i: Vector6<f64>,
    pub w_plus: Vector6<f64>,
    pub w_minus: Vector6<f64>,
    pub q: Matrix6<f64>,
    /// Complex norms of the three symplectically-scaled column families
    /// (planar, vertical, hyperbolic): used to renormalize columns to a
    /// prescribed physical size.
    pub norm_u: f64,
    pub norm_v: f64,
    pub norm_w: f64,
}

/// Standard symplectic form matrix J (dq ^ dp pairing (1,4), (2,5), (3,6)).
pub fn symplectic_j() -> Matrix6<f64> {
    let mut j = Matrix6::zeros();
    for i in 0..3 {
        j[(i, i + 3)] = 1.0;
        j[(i + 3, i)] = -1.0;
    }
    j
}

/// Symplectic product a^T J b.
pub fn omega_form(a: &Vector6<f64>, b: &Vector6<f64>) -> f64 {
    a[0] * b[3] + a[1] * b[4] + a[2] * b[5] - a[3] * b[0] - a[4] * b[1] - a[5] * b[2]
}

impl CenterFrame {
    fn new(cp: &Collinear) -> CenterFrame {
        let c = cp.c;
        let wp = cp.omega_p;
        let wv = cp.omega_v;
        let lam = cp.lambda;

        // Planar elliptic pair: eigenvector for eigenvalue -i*omega_p is
        // u = u_r - i u_i with
        let a = wp * wp + 1.0 + 2.0 * c;
        let b = wp * wp - 1.0 - 2.0 * c;
        let cc = wp * (wp * wp - 1.0 + 2.0 * c);
        let mut u_r = Vector6::new(0.0, a, 0.0, b, 0.0, 0.0);
        let mut u_i = Vector6::new(-2.0 * wp, 0.0, 0.0, 0.0, cc, 0.0);
        let om_u = omega_form(&u_r, &u_i);
        assert!(om_u > 0.0, "planar pair should be positively oriented");
        let su = om_u.sqrt().recip();
        u_r *= su;
        u_i *= su;

        // Vertical elliptic pair.
        let mut v_r = Vector6::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0);
        let mut v_i = Vector6::new(0.0, 0.0, 0.0, 0.0, 0.0, wv);
        let sv = wv.sqrt().recip();
        v_r *= sv;
        v_i *= sv;

        // Hyperbolic pair, eigenvalues +lambda / -lambda. Both are stored
        // with positive x component; their symplectic product is negative,
        // so Q's sixth column is -w_minus to make q^T J q = J exact.
        let d = lam * lam - 1.0 - 2.0 * c;
        let e = lam * lam + 1.0 + 2.0 * c;
        let g = lam * (lam * lam + 1.0 - 2.0 * c);
        let mut w_plus = Vector6::new(2.0 * lam, d, 0.0, e, g, 0.0);
        let mut w_minus = Vector6::new(2.0 * lam, -d, 0.0, -e, g, 0.0);
        let om_w = omega_form(&w_plus, &w_minus);
        assert!(om_w < 0.0, "hyperbolic pairing sign");
        let sw = om_w.abs().sqrt().recip();
        w_plus *= sw;
        w_minus *= sw;

        let mut q = Matrix6::zeros();
        q.set_column(0, &u_r);
        q.set_column(1, &v_r);
        q.set_column(2, &w_plus);
        q.set_column(3, &u_i);
        q.set_column(4, &v_i);
        q.set_column(5, &(-w_minus));

        let cnorm = |re: &Vector6<f64>, im: &Vector6<f64>| -> f64 {
            (re.norm_squared() + im.norm_squared()).sqrt()
        };
        let norm_u = cnorm(&u_r, &u_i);
        let norm_v = cnorm(&v_r, &v_i);
        let norm_w = w_plus.norm();

        CenterFrame {
            u_r,
            u_i,
            v_r,
            v_i,
            w_plus,
            w_minus,
            q,
            norm_u,
            norm_v,
            norm_w,
        }
    }

    /// Complex planar eigenvector `u = u_r - i u_i` (eigenvalue -i omega_p).
    pub fn u_complex(&self) -> Vector6<Complex64> {
        Vector6::from_fn(|i, _| Complex64::new(self.u_r[i], -self.u_i[i]))
    }

    /// Complex vertical eigenvector `v = v_r - i v_i` (eigenvalue -i omega_v).
    pub fn v_complex(&self) -> Vector6<Complex64> {
        Vector6::from_fn(|i, _| Complex64::new(self.v_r[i], -self.v_i[i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const MU: f64 = MU_EARTH_MOON;

    fn random_state(seed: u64) -> State {
        // Cheap deterministic pseudo-random state away from both primaries.
        let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            x ^= x >> 33;
            x = x.wrapping_mul(0xff51afd7ed558ccd);
            x ^= x >> 33;
            (x as f64 / u64::MAX as f64) - 0.5
        };
        Vector6::new(
            -0.8 + 0.3 * next(),
            0.4 * next(),
            0.3 * next(),
            0.3 * next(),
            -0.8 + 0.3 * next(),
            0.3 * next(),
        )
    }

    #[test]
    fn field_is_j_times_grad_h() {
        for seed in 0..20u64 {
            let s = random_state(seed);
            let f = field(MU, &s);
            let g = grad_hamiltonian(MU, &s);
            let j = symplectic_j();
            let jg = j * g;
            assert!((f - jg).norm() < 1e-13 * (1.0 + f.norm()), "seed {seed}");
        }
    }

    #[test]
    fn grad_h_matches_finite_differences() {
        let s = random_state(5);
        let g = grad_hamiltonian(MU, &s);
        let h = 1e-6;
        for i in 0..6 {
            let mut sp = s;
            let mut sm = s;
            sp[i] += h;
            sm[i] -= h;
            let fd = (hamiltonian(MU, &sp) - hamiltonian(MU, &sm)) / (2.0 * h);
            assert_relative_eq!(g[i], fd, epsilon = 1e-7, max_relative = 1e-7);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let s = random_state(9);
        let jm = jacobian(MU, &s);
        let h = 1e-6;
        for i in 0..6 {
            let mut sp = s;
            let mut sm = s;
            sp[i] += h;
            sm[i] -= h;
            let fd = (field(MU, &sp) - field(MU, &sm)) / (2.0 * h);
            for r in 0..6 {
                assert_relative_eq!(jm[(r, i)], fd[r], epsilon = 1e-6, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn collinear_points_are_equilibria_and_quintic_roots() {
        for point in [Lpoint::L1, Lpoint::L2] {
            let cp = Collinear::new(point, MU);
            let f = field(MU, &cp.state());
            assert!(f.norm() < 1e-14, "{point:?} field norm {}", f.norm());
            // cp.gamma is the f64 rounding of the dd root: the Newton step
            // from it must be below one ulp of gamma.
            let (p, dp) = quintic(point, MU, Dd::from_f64(cp.gamma));
            let step = (p.to_f64() / dp.to_f64()).abs();
            assert!(step < 2e-17, "{point:?} gamma off by {step:.3e}");
        }
        let l1 = Collinear::new(Lpoint::L1, MU);
        let l2 = Collinear::new(Lpoint::L2, MU);
        assert_relative_eq!(l1.gamma, 0.15093, epsilon = 5e-6);
        assert_relative_eq!(l2.gamma, 0.16783, epsilon = 5e-6);
        assert!(l1.x < 0.0 && l1.x > -1.0 + MU, "L1 between Moon and Earth");
        assert!(l2.x < -1.0 + MU, "L2 beyond the Moon");
        // h0 closed form vs direct Hamiltonian evaluation at the point.
        assert_relative_eq!(l1.h0, hamiltonian(MU, &l1.state()), epsilon = 1e-14);
        assert_relative_eq!(l2.h0, hamiltonian(MU, &l2.state()), epsilon = 1e-14);
        assert!(l1.h0 < l2.h0, "L1 sits deeper in the potential");
    }

    #[test]
    fn c_matches_potential_hessian_at_point() {
        for point in [Lpoint::L1, Lpoint::L2] {
            let cp = Collinear::new(point, MU);
            let j = jacobian(MU, &cp.state());
            // Rows 4..6 carry -U_ab; at the point U_xx = -2c, U_yy = U_zz = c.
            assert_relative_eq!(-j[(3, 0)], -2.0 * cp.c, epsilon = 1e-12);
            assert_relative_eq!(-j[(4, 1)], cp.c, epsilon = 1e-12);
            assert_relative_eq!(-j[(5, 2)], cp.c, epsilon = 1e-12);
            assert_relative_eq!(j[(4, 0)], 0.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn frequencies_satisfy_characteristic_equations() {
        for point in [Lpoint::L1, Lpoint::L2] {
            let cp = Collinear::new(point, MU);
            let c = cp.c;
            // Planar quartic nu^4 + (2-c) nu^2 + (1+2c)(1-c) = 0 at nu = i wp
            // and nu = lambda.
            let quart = |nu_sq: f64| nu_sq * nu_sq + (2.0 - c) * nu_sq + (1.0 + 2.0 * c) * (1.0 - c);
            assert!(quart(-cp.omega_p * cp.omega_p).abs() < 1e-10);
            assert!(quart(cp.lambda * cp.lambda).abs() < 1e-10);
            assert_relative_eq!(cp.omega_v * cp.omega_v, c, epsilon = 1e-13);
        }
    }

    #[test]
    fn eigenvectors_diagonalize_linearization() {
        use nalgebra::Vector6 as V6;
        for point in [Lpoint::L1, Lpoint::L2] {
            let cp = Collinear::new(point, MU);
            let fr = cp.frame();
            let df = jacobian(MU, &cp.state());
            let dfc = df.map(|x| Complex64::new(x, 0.0));

            let check = |vec: V6<Complex64>, ev: Complex64, what: &str| {
                let lhs = dfc * vec;
                let rhs = vec * ev;
                let err = (lhs - rhs).norm();
                assert!(err < 1e-10, "{point:?} {what}: residual {err}");
            };
            check(fr.u_complex(), Complex64::new(0.0, -cp.omega_p), "u");
            check(fr.u_complex().map(|z| z.conj()), Complex64::new(0.0, cp.omega_p), "u conj");
            check(fr.v_complex(), Complex64::new(0.0, -cp.omega_v), "v");
            check(
                fr.w_plus.map(|x| Complex64::new(x, 0.0)),
                Complex64::new(cp.lambda, 0.0),
                "w+",
            );
            check(
                fr.w_minus.map(|x| Complex64::new(x, 0.0)),
                Complex64::new(-cp.lambda, 0.0),
                "w-",
            );
        }
    }

    #[test]
    fn frame_is_symplectic() {
        for point in [Lpoint::L1, Lpoint::L2] {
            let cp = Collinear::new(point, MU);
            let fr = cp.frame();
            let j = symplectic_j();
            let qjq = fr.q.transpose() * j * fr.q;
            let err = (qjq - j).norm();
            assert!(err < 1e-12, "{point:?}: |Q^T J Q - J| = {err}");
            // Hyperbolic vectors both point toward positive x.
            assert!(fr.w_plus[0] > 0.0 && fr.w_minus[0] > 0.0);
        }
    }

    #[test]
    fn small_mu_gamma_asymptotics() {
        let mu = 1e-9;
        for point in [Lpoint::L1, Lpoint::L2] {
            let cp = Collinear::new(point, mu);
            let hill = (mu / 3.0f64).cbrt();
            assert_relative_eq!(cp.gamma, hill, max_relative = 1e-2);
        }
    }
}
