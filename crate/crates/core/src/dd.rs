//! Minimal double-double ("dd") arithmetic.
//!
//! A `Dd` stores an unevaluated sum `hi + lo` with `|lo| <= ulp(hi)/2`,
//! giving roughly 32 significant digits. It is used in the few places where
//! a plain `f64` chain loses the last digit or two: the collinear-point
//! abscissas and the frequencies/exponents derived from them, which are
//! checked against reference values at full printed precision.

/// Double-double number: value is `hi + lo`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

/// Error-free sum: returns (s, e) with s = fl(a+b), a+b = s+e exactly.
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let v = s - a;
    let e = (a - (s - v)) + (b - v);
    (s, e)
}

/// Error-free sum assuming |a| >= |b|.
#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let e = b - (s - a);
    (s, e)
}

/// Error-free product via fused multiply-add.
#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let e = f64::mul_add(a, b, -p);
    (p, e)
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    #[inline]
    pub fn from_f64(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    /// Exact sum of two doubles as a Dd.
    #[inline]
    pub fn from_sum(a: f64, b: f64) -> Dd {
        let (hi, lo) = two_sum(a, b);
        Dd { hi, lo }
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    #[inline]
    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let e = e + self.lo + o.lo;
        let (hi, lo) = quick_two_sum(s, e);
        Dd { hi, lo }
    }

    #[inline]
    pub fn add_f64(self, o: f64) -> Dd {
        self.add(Dd::from_f64(o))
    }

    #[inline]
    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    #[inline]
    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    #[inline]
    pub fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + self.hi * o.lo + self.lo * o.hi;
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }

    #[inline]
    pub fn mul_f64(self, o: f64) -> Dd {
        let (p, e) = two_prod(self.hi, o);
        let e = e + self.lo * o;
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }

    #[inline]
    pub fn div(self, o: Dd) -> Dd {
        // One Newton refinement of the f64 quotient.
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul_f64(q1));
        let q2 = r.hi / o.hi;
        let r2 = r.sub(o.mul_f64(q2));
        let q3 = r2.hi / o.hi;
        Dd::from_sum(q1, q2).add_f64(q3)
    }

    /// Square root by one dd Newton step from the f64 estimate.
    pub fn sqrt(self) -> Dd {
        if self.hi == 0.0 {
            return Dd::ZERO;
        }
        let y = self.hi.sqrt();
        // y' = y + (x - y^2) / (2 y)
        let y_dd = Dd::from_f64(y);
        let diff = self.sub(y_dd.mul(y_dd));
        let corr = diff.hi / (2.0 * y);
        Dd::from_sum(y, corr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dd_mul_recovers_split_product() {
        // (1 + 2^-30)^2 = 1 + 2^-29 + 2^-60; the last term is below f64
        // resolution of the sum but dd keeps it.
        let x = Dd::from_sum(1.0, (2.0f64).powi(-30));
        let sq = x.mul(x);
        let expect_hi = 1.0 + (2.0f64).powi(-29);
        assert_eq!(sq.hi, expect_hi);
        assert_eq!(sq.lo, (2.0f64).powi(-60));
    }

    #[test]
    fn dd_div_and_sqrt_roundtrip() {
        let a = Dd::from_f64(2.0);
        let s = a.sqrt();
        let back = s.mul(s);
        let err = back.sub(a);
        assert!(err.to_f64().abs() < 1e-31, "sqrt roundtrip err {}", err.to_f64());

        let q = Dd::from_f64(1.0).div(Dd::from_f64(3.0));
        let back = q.mul_f64(3.0);
        assert!((back.to_f64() - 1.0).abs() < 1e-31);
    }
}
