//! Dense truncated multivariate power series.
//!
//! Monomials in a fixed number of variables are stored degree-major (all
//! monomials of total degree `k` before those of degree `k+1`); inside a
//! degree block they are ordered lexicographically with the first variable
//! heaviest, so `x1^k` opens a block and `xn^k` closes it. A [`Layout`]
//! owns the index tables shared by every series of the same shape.
//!
//! Products are computed block-recursively: a homogeneous block in `v`
//! variables is a concatenation of homogeneous blocks in `v-1` variables,
//! so the innermost loop of a product is a plain 1-D convolution with no
//! index arithmetic beyond pointer offsets. This is what makes order-30
//! expansions in 5 variables affordable.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Relative size below which the imaginary residue of a coefficient is
/// considered numerical noise when a series is certified real.
pub const REALIFY_IMAG_REL_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

/// Shared index tables for dense series in `nvars` variables truncated at
/// total degree `max_order`.
pub struct Layout {
    nvars: usize,
    max_order: usize,
    /// binom[n][k] = C(n, k), zero when k > n.
    binom: Vec<Vec<u64>>,
    /// offsets[k] = first index of the degree-k block; len = max_order + 2.
    offsets: Vec<usize>,
    /// Exponent tuples, flattened: exps[i*nvars .. (i+1)*nvars].
    exps: Vec<u8>,
    /// For every index of degree >= 1: the index of the monomial with the
    /// first nonzero exponent decremented, and which variable that was.
    parent: Vec<u32>,
    pvar: Vec<u8>,
}

impl Layout {
    pub fn new(nvars: usize, max_order: usize) -> Arc<Layout> {
        assert!((1..=8).contains(&nvars), "unsupported variable count");
        let bmax = max_order + nvars + 2;
        let mut binom = vec![vec![0u64; bmax + 1]; bmax + 1];
        for n in 0..=bmax {
            binom[n][0] = 1;
            for k in 1..=n {
                binom[n][k] = binom[n - 1][k - 1] + binom[n - 1][k];
            }
        }

        let mut offsets = Vec::with_capacity(max_order + 2);
        offsets.push(0usize);
        for k in 0..=max_order {
            let cnt = binom[k + nvars - 1][nvars - 1] as usize;
            offsets.push(offsets[k] + cnt);
        }
        let ncoeffs = *offsets.last().unwrap();

        let mut exps = Vec::with_capacity(ncoeffs * nvars);
        let mut tuple = vec![0u8; nvars];
        for k in 0..=max_order {
            fill_block(&mut exps, &mut tuple, 0, k as u8, nvars);
        }

        let mut layout = Layout {
            nvars,
            max_order,
            binom,
            offsets,
            exps,
            parent: Vec::new(),
            pvar: Vec::new(),
        };
        let mut parent = vec![0u32; ncoeffs];
        let mut pvar = vec![0u8; ncoeffs];
        let mut dec = vec![0u8; nvars];
        for i in 1..ncoeffs {
            let e = layout.exponents(i);
            let v = e.iter().position(|&m| m > 0).unwrap();
            dec.copy_from_slice(e);
            dec[v] -= 1;
            parent[i] = layout.index_of(&dec) as u32;
            pvar[i] = v as u8;
        }
        layout.parent = parent;
        layout.pvar = pvar;
        Arc::new(layout)
    }

    #[inline]
    pub fn nvars(&self) -> usize {
        self.nvars
    }

    #[inline]
    pub fn max_order(&self) -> usize {
        self.max_order
    }

    #[inline]
    pub fn ncoeffs(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Index range of the degree-k block.
    #[inline]
    pub fn block_range(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    /// Number of coefficients up to and including degree `order`.
    #[inline]
    pub fn ncoeffs_upto(&self, order: usize) -> usize {
        self.offsets[order.min(self.max_order) + 1]
    }

    #[inline]
    pub fn exponents(&self, idx: usize) -> &[u8] {
        &self.exps[idx * self.nvars..(idx + 1) * self.nvars]
    }

    /// Absolute index of an exponent tuple (must sum to <= max_order).
    pub fn index_of(&self, m: &[u8]) -> usize {
        debug_assert_eq!(m.len(), self.nvars);
        let k: usize = m.iter().map(|&x| x as usize).sum();
        debug_assert!(k <= self.max_order, "degree {k} beyond truncation");
        let mut idx = self.offsets[k];
        let mut d = k;
        for i in 0..self.nvars - 1 {
            let v = self.nvars - 1 - i;
            let mi = m[i] as usize;
            // Monomials whose i-th exponent exceeds mi (with this prefix)
            // come first; hockey-stick count of the remainder.
            idx += self.binom[d - mi + v - 1][v] as usize;
            d -= mi;
        }
        idx
    }

    #[inline]
    fn hom_size(&self, t: usize, v: usize) -> usize {
        self.binom[t + v - 1][v - 1] as usize
    }

    /// Offset of the sub-block with remaining degree `t` inside a
    /// homogeneous block in `v` variables (valid for v >= 2).
    #[inline]
    fn hom_off(&self, t: usize, v: usize) -> usize {
        self.binom[t + v - 2][v - 1] as usize
    }
}

fn fill_block(exps: &mut Vec<u8>, tuple: &mut [u8], var: usize, remaining: u8, nvars: usize) {
    if var == nvars - 1 {
        tuple[var] = remaining;
        exps.extend_from_slice(tuple);
        return;
    }
    for m in (0..=remaining).rev() {
        tuple[var] = m;
        fill_block(exps, tuple, var + 1, remaining - m, nvars);
    }
}

// ---------------------------------------------------------------------------
// Series
// ---------------------------------------------------------------------------

/// Dense complex-coefficient truncated series over a shared [`Layout`].
#[derive(Clone)]
pub struct Series {
    layout: Arc<Layout>,
    c: Vec<C64>,
}

impl Series {
    pub fn zero(layout: &Arc<Layout>) -> Series {
        Series {
            layout: layout.clone(),
            c: vec![C64::new(0.0, 0.0); layout.ncoeffs()],
        }
    }

    pub fn constant(layout: &Arc<Layout>, v: C64) -> Series {
        let mut s = Series::zero(layout);
        s.c[0] = v;
        s
    }

    #[inline]
    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    #[inline]
    pub fn coeffs(&self) -> &[C64] {
        &self.c
    }

    #[inline]
    pub fn coeffs_mut(&mut self) -> &mut [C64] {
        &mut self.c
    }

    pub fn coeff(&self, m: &[u8]) -> C64 {
        self.c[self.layout.index_of(m)]
    }

    pub fn set_coeff(&mut self, m: &[u8], v: C64) {
        let i = self.layout.index_of(m);
        self.c[i] = v;
    }

    #[inline]
    pub fn block(&self, k: usize) -> &[C64] {
        &self.c[self.layout.block_range(k)]
    }

    #[inline]
    pub fn block_mut(&mut self, k: usize) -> &mut [C64] {
        let r = self.layout.block_range(k);
        &mut self.c[r]
    }

    pub fn clear_block(&mut self, k: usize) {
        for v in self.block_mut(k) {
            *v = C64::new(0.0, 0.0);
        }
    }

    pub fn block_is_zero(&self, k: usize) -> bool {
        self.block(k).iter().all(|v| v.re == 0.0 && v.im == 0.0)
    }

    pub fn max_nonzero_degree(&self) -> usize {
        for k in (0..=self.layout.max_order).rev() {
            if !self.block_is_zero(k) {
                return k;
            }
        }
        0
    }

    /// self += w * other (whole series).
    pub fn axpy(&mut self, w: C64, other: &Series) {
        for (a, b) in self.c.iter_mut().zip(other.c.iter()) {
            *a += w * *b;
        }
    }

    /// Degree-k block of self += w * (degree-k block of other).
    pub fn axpy_block(&mut self, w: C64, other: &Series, k: usize) {
        let r = self.layout.block_range(k);
        for (a, b) in self.c[r.clone()].iter_mut().zip(other.c[r].iter()) {
            *a += w * *b;
        }
    }

    pub fn scale(&mut self, w: C64) {
        for a in self.c.iter_mut() {
            *a *= w;
        }
    }

    /// Zero every block of degree greater than `order`.
    pub fn truncate(&mut self, order: usize) {
        let start = self.layout.ncoeffs_upto(order);
        for v in &mut self.c[start..] {
            *v = C64::new(0.0, 0.0);
        }
    }

    /// Partial derivative with respect to variable `var`.
    pub fn derivative(&self, var: usize) -> Series {
        let lay = &self.layout;
        let mut out = Series::zero(lay);
        let mut dec = vec![0u8; lay.nvars];
        for k in 1..=lay.max_order {
            for i in lay.block_range(k) {
                let c = self.c[i];
                if c.re == 0.0 && c.im == 0.0 {
                    continue;
                }
                let e = lay.exponents(i);
                let m = e[var];
                if m == 0 {
                    continue;
                }
                dec.copy_from_slice(e);
                dec[var] -= 1;
                let j = lay.index_of(&dec);
                out.c[j] += c * (m as f64);
            }
        }
        out
    }

    /// Substitute the last variable by the constant `z`, producing a series
    /// over `layout_out` in one variable fewer (same truncation order).
    pub fn partial_eval_last(&self, z: C64, layout_out: &Arc<Layout>) -> Series {
        let lay = &self.layout;
        assert_eq!(layout_out.nvars, lay.nvars - 1);
        assert_eq!(layout_out.max_order, lay.max_order);
        let mut zpow = Vec::with_capacity(lay.max_order + 1);
        zpow.push(C64::new(1.0, 0.0));
        for _ in 0..lay.max_order {
            zpow.push(*zpow.last().unwrap() * z);
        }
        let mut out = Series::zero(layout_out);
        let n = lay.nvars;
        for i in 0..lay.ncoeffs() {
            let c = self.c[i];
            if c.re == 0.0 && c.im == 0.0 {
                continue;
            }
            let e = lay.exponents(i);
            let j = layout_out.index_of(&e[..n - 1]);
            out.c[j] += c * zpow[e[n - 1] as usize];
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Products
// ---------------------------------------------------------------------------

/// Recursive homogeneous-block product: out += w * a_block * b_block, where
/// the slices are homogeneous blocks of degrees ka, kb (and ka+kb) in `v`
/// variables.
fn mul_hom_rec(lay: &Layout, v: usize, a: &[C64], ka: usize, b: &[C64], kb: usize, out: &mut [C64], w: f64) {
    if v == 1 {
        out[0] += a[0] * b[0] * w;
        return;
    }
    if v == 2 {
        for (pa, &av) in a.iter().enumerate() {
            if av.re == 0.0 && av.im == 0.0 {
                continue;
            }
            let aw = av * w;
            let o = &mut out[pa..pa + kb + 1];
            for (ov, &bv) in o.iter_mut().zip(b.iter()) {
                *ov += aw * bv;
            }
        }
        return;
    }
    for ta in 0..=ka {
        let sa = &a[lay.hom_off(ta, v)..];
        let sa = &sa[..lay.hom_size(ta, v - 1)];
        for tb in 0..=kb {
            let sb = &b[lay.hom_off(tb, v)..];
            let sb = &sb[..lay.hom_size(tb, v - 1)];
            let to = lay.hom_off(ta + tb, v);
            let so = &mut out[to..to + lay.hom_size(ta + tb, v - 1)];
            mul_hom_rec(lay, v - 1, sa, ta, sb, tb, so, w);
        }
    }
}

/// out += w * a * b, where `a` and `b` are raw homogeneous blocks of degrees
/// `ka`, `kb` over `lay` and `out` is the degree-(ka+kb) block.
pub fn mul_hom_blocks(lay: &Layout, a: &[C64], ka: usize, b: &[C64], kb: usize, out: &mut [C64], w: f64) {
    mul_hom_rec(lay, lay.nvars, a, ka, b, kb, out, w);
}

/// Write the degree-(k-1) homogeneous block of `d s / d var` into `out`
/// (cleared and resized first), reading only the degree-k block of `s`.
pub fn derivative_hom_block(s: &Series, var: usize, k: usize, out: &mut Vec<C64>) {
    assert!(k >= 1);
    let lay = s.layout();
    let base = lay.block_range(k - 1).start;
    out.clear();
    out.resize(lay.block_range(k - 1).len(), C64::new(0.0, 0.0));
    let nv = lay.nvars();
    let mut dec = [0u8; 8];
    for i in lay.block_range(k) {
        let c = s.coeffs()[i];
        if c.re == 0.0 && c.im == 0.0 {
            continue;
        }
        let e = lay.exponents(i);
        let m = e[var];
        if m == 0 {
            continue;
        }
        dec[..nv].copy_from_slice(e);
        dec[var] -= 1;
        out[lay.index_of(&dec[..nv]) - base] += c * (m as f64);
    }
}

impl Series {
    /// Copy the coefficients into a different layout with the same number of
    /// variables (monomials above the target truncation are dropped).
    pub fn relayout(&self, layout: &Arc<Layout>) -> Series {
        assert_eq!(layout.nvars(), self.layout.nvars());
        let mut out = Series::zero(layout);
        let kmax = self.layout.max_order.min(layout.max_order());
        for i in 0..self.layout.ncoeffs_upto(kmax) {
            let c = self.c[i];
            if c.re == 0.0 && c.im == 0.0 {
                continue;
            }
            out.c[layout.index_of(self.layout.exponents(i))] = c;
        }
        out
    }
}

/// Accumulate the degree-k block of `w * a * b` into the degree-k block of
/// `out`. Blocks of `a`/`b` above their nonzero support are skipped.
pub fn mul_accumulate_block(out: &mut Series, a: &Series, b: &Series, k: usize, w: f64) {
    let lay = out.layout.clone();
    debug_assert!(Arc::ptr_eq(&lay, &a.layout) && Arc::ptr_eq(&lay, &b.layout));
    for ja in 0..=k {
        let jb = k - ja;
        if a.block_is_zero(ja) || b.block_is_zero(jb) {
            continue;
        }
        let ra = lay.block_range(ja);
        let rb = lay.block_range(jb);
        let ro = lay.block_range(k);
        // Split borrows: out block is disjoint from a/b (distinct series).
        let (ablk, bblk) = (&a.c[ra], &b.c[rb]);
        mul_hom_rec(&lay, lay.nvars, ablk, ja, bblk, jb, &mut out.c[ro], w);
    }
}

/// Full truncated product a * b up to total degree `order`.
pub fn mul_full(a: &Series, b: &Series, order: usize) -> Series {
    let lay = a.layout.clone();
    let mut out = Series::zero(&lay);
    let da = a.max_nonzero_degree();
    let db = b.max_nonzero_degree();
    for k in 0..=order.min(lay.max_order) {
        for ja in 0..=k.min(da) {
            let jb = k - ja;
            if jb > db || a.block_is_zero(ja) || b.block_is_zero(jb) {
                continue;
            }
            let ra = lay.block_range(ja);
            let rb = lay.block_range(jb);
            let ro = lay.block_range(k);
            mul_hom_rec(&lay, lay.nvars, &a.c[ra], ja, &b.c[rb], jb, &mut out.c[ro], 1.0);
        }
    }
    out
}

/// Set the degree-k block of `g` so that `g = f^alpha` holds through degree
/// k, given that it already holds through degree k-1 and that `f` is valid
/// through degree k. Uses the differential recurrence
/// `k f0 g_k = sum_{i<k} (alpha (k-i) - i) * (g_i * f_{k-i})_k`,
/// which follows from f g' = alpha g f' applied to homogeneous blocks.
/// `k` must be >= 1; the caller seeds `g_0 = f_0^alpha`.
pub fn pow_real_update_block(g: &mut Series, f: &Series, alpha: f64, k: usize) {
    assert!(k >= 1);
    let lay = g.layout.clone();
    let f0 = f.c[0];
    let blocksz = lay.block_range(k).len();
    let mut acc = vec![C64::new(0.0, 0.0); blocksz];
    for i in 0..k {
        let w = alpha * ((k - i) as f64) - i as f64;
        if w == 0.0 || g.block_is_zero(i) || f.block_is_zero(k - i) {
            continue;
        }
        let rg = lay.block_range(i);
        let rf = lay.block_range(k - i);
        mul_hom_rec(&lay, lay.nvars, &g.c[rg], i, &f.c[rf], k - i, &mut acc, w);
    }
    let inv = C64::new(k as f64, 0.0) * f0;
    let gb = g.block_mut(k);
    for (gv, av) in gb.iter_mut().zip(acc.iter()) {
        *gv = *av / inv;
    }
}

/// Full `f^alpha` through `order` (f must have nonzero constant term).
pub fn pow_real(f: &Series, alpha: f64, order: usize) -> Result<Series> {
    let f0 = f.c[0];
    if f0.norm() == 0.0 {
        return Err(Error::InvalidInput("pow of series with zero constant term".into()));
    }
    let mut g = Series::zero(&f.layout);
    // Real branch: constant terms in this crate are real and positive
    // (squared distances); keep the complex fallback for generality.
    g.c[0] = if f0.im == 0.0 {
        C64::new(f0.re.powf(alpha), 0.0)
    } else {
        f0.powf(alpha)
    };
    for k in 1..=order.min(f.layout.max_order) {
        pow_real_update_block(&mut g, f, alpha, k);
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Reusable buffer of per-monomial values for chain evaluation.
#[derive(Default)]
pub struct EvalScratch {
    vals: Vec<C64>,
}

impl EvalScratch {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fill per-monomial values of all monomials of degree <= order at the
    /// point `x`, returning the filled prefix. Each monomial costs one
    /// complex multiply via its parent in the layout tables.
    pub fn chain<'a>(&'a mut self, lay: &Layout, x: &[C64], order: usize) -> &'a [C64] {
        let n = lay.ncoeffs_upto(order);
        self.vals.resize(lay.ncoeffs(), C64::new(0.0, 0.0));
        self.vals[0] = C64::new(1.0, 0.0);
        for i in 1..n {
            self.vals[i] = self.vals[lay.parent[i] as usize] * x[lay.pvar[i] as usize];
        }
        &self.vals[..n]
    }
}

impl Series {
    /// Dot the coefficient vector against a chain prefix.
    pub fn dot_chain(&self, vals: &[C64]) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for (c, v) in self.c[..vals.len()].iter().zip(vals.iter()) {
            acc += *c * *v;
        }
        acc
    }

    /// Evaluate the series at `x`, using monomials of degree <= order only.
    pub fn eval(&self, x: &[C64], order: usize, scratch: &mut EvalScratch) -> C64 {
        let vals = scratch.chain(&self.layout, x, order);
        self.dot_chain(vals)
    }
}

/// Evaluate several series (sharing one layout) at one point; one chain pass.
pub fn eval_many(list: &[&Series], x: &[C64], order: usize, scratch: &mut EvalScratch, out: &mut [C64]) {
    assert_eq!(list.len(), out.len());
    if list.is_empty() {
        return;
    }
    let lay = list[0].layout.clone();
    let vals = scratch.chain(&lay, x, order);
    for (s, o) in list.iter().zip(out.iter_mut()) {
        *o = s.dot_chain(vals);
    }
}

// ---------------------------------------------------------------------------
// Real-coefficient series (same layouts)
// ---------------------------------------------------------------------------

/// Real-coefficient dense series over a shared [`Layout`]. Produced by
/// certified realification of complex series; evaluation runs in real
/// arithmetic, which matters in meshing inner loops.
#[derive(Clone)]
pub struct RealSeries {
    layout: Arc<Layout>,
    c: Vec<f64>,
}

impl RealSeries {
    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.c
    }

    pub fn coeff(&self, m: &[u8]) -> f64 {
        self.c[self.layout.index_of(m)]
    }

    pub fn dot_chain(&self, vals: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (c, v) in self.c[..vals.len()].iter().zip(vals.iter()) {
            acc = c.mul_add(*v, acc);
        }
        acc
    }

    pub fn eval(&self, x: &[f64], order: usize, scratch: &mut RealEvalScratch) -> f64 {
        let vals = scratch.chain(&self.layout, x, order);
        self.dot_chain(vals)
    }

    pub fn derivative(&self, var: usize) -> RealSeries {
        let lay = &self.layout;
        let mut c = vec![0.0; lay.ncoeffs()];
        let mut dec = vec![0u8; lay.nvars];
        for k in 1..=lay.max_order {
            for i in lay.block_range(k) {
                if self.c[i] == 0.0 {
                    continue;
                }
                let e = lay.exponents(i);
                let m = e[var];
                if m == 0 {
                    continue;
                }
                dec.copy_from_slice(e);
                dec[var] -= 1;
                c[lay.index_of(&dec)] += self.c[i] * (m as f64);
            }
        }
        RealSeries { layout: lay.clone(), c }
    }
}

/// Real chain buffer, mirroring [`EvalScratch`].
#[derive(Default)]
pub struct RealEvalScratch {
    vals: Vec<f64>,
}

impl RealEvalScratch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn chain<'a>(&'a mut self, lay: &Layout, x: &[f64], order: usize) -> &'a [f64] {
        let n = lay.ncoeffs_upto(order);
        self.vals.resize(lay.ncoeffs(), 0.0);
        self.vals[0] = 1.0;
        for i in 1..n {
            self.vals[i] = self.vals[lay.parent[i] as usize] * x[lay.pvar[i] as usize];
        }
        &self.vals[..n]
    }
}

/// Evaluate several real series at one point with a shared chain pass.
pub fn eval_many_real(list: &[&RealSeries], x: &[f64], order: usize, scratch: &mut RealEvalScratch, out: &mut [f64]) {
    assert_eq!(list.len(), out.len());
    if list.is_empty() {
        return;
    }
    let lay = list[0].layout.clone();
    let vals = scratch.chain(&lay, x, order);
    for (s, o) in list.iter().zip(out.iter_mut()) {
        *o = s.dot_chain(vals);
    }
}

/// Substitute conjugate pairs into the first four variables of a complex
/// series: `z1 = s1 + i s2, z2 = s1 - i s2, z3 = s3 + i s4, z4 = s3 - i s4`
/// (a fifth variable, when present, passes through unchanged as a real
/// coordinate), and certify that the result has real coefficients
/// (imaginary residues below [`REALIFY_IMAG_REL_TOL`] relative to the
/// largest coefficient).
///
/// This is the realification step for series whose underlying function is
/// real-analytic; the output evaluates in real arithmetic to the same values
/// as the input at `z = C s`.
pub fn substitute_conjugate_pairs(s: &Series) -> Result<RealSeries> {
    let lay = s.layout.clone();
    assert!(
        lay.nvars == 4 || lay.nvars == 5,
        "conjugate-pair substitution expects 4 or 5 variables"
    );
    let n = lay.max_order;

    // pair_rows[p] = coefficients of (a + i b)^p over powers of b:
    // coefficient of a^(p-t) b^t is C(p,t) i^t.
    let mut pair_rows: Vec<Vec<C64>> = Vec::with_capacity(n + 1);
    for p in 0..=n {
        let mut row = Vec::with_capacity(p + 1);
        for t in 0..=p {
            let b = lay.binom[p][t] as f64;
            let it = match t % 4 {
                0 => C64::new(1.0, 0.0),
                1 => C64::new(0.0, 1.0),
                2 => C64::new(-1.0, 0.0),
                _ => C64::new(0.0, -1.0),
            };
            row.push(it * b);
        }
        pair_rows.push(row);
    }
    // expansion of (a + i b)^p (a - i b)^q over powers of b (conv of rows,
    // second row conjugated).
    let pair_expansion = |p: usize, q: usize| -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); p + q + 1];
        for (tp, cp) in pair_rows[p].iter().enumerate() {
            for (tq, cq) in pair_rows[q].iter().enumerate() {
                out[tp + tq] += *cp * cq.conj();
            }
        }
        out
    };
    let mut pair_cache: Vec<Option<Vec<C64>>> = vec![None; (n + 1) * (n + 1)];

    let mut out = vec![C64::new(0.0, 0.0); lay.ncoeffs()];
    let mut m_out = [0u8; 5];
    for i in 0..lay.ncoeffs() {
        let c = s.c[i];
        if c.re == 0.0 && c.im == 0.0 {
            continue;
        }
        let e = lay.exponents(i);
        let (m1, m2, m3, m4) = (e[0] as usize, e[1] as usize, e[2] as usize, e[3] as usize);
        if lay.nvars == 5 {
            m_out[4] = e[4];
        }
        let ia = m1 * (n + 1) + m2;
        if pair_cache[ia].is_none() {
            pair_cache[ia] = Some(pair_expansion(m1, m2));
        }
        let ib = m3 * (n + 1) + m4;
        if pair_cache[ib].is_none() {
            pair_cache[ib] = Some(pair_expansion(m3, m4));
        }
        let ea = pair_cache[ia].as_ref().unwrap().clone();
        let eb = pair_cache[ib].as_ref().unwrap();
        for (ta, ca) in ea.iter().enumerate() {
            for (tb, cb) in eb.iter().enumerate() {
                m_out[0] = (m1 + m2 - ta) as u8;
                m_out[1] = ta as u8;
                m_out[2] = (m3 + m4 - tb) as u8;
                m_out[3] = tb as u8;
                out[lay.index_of(&m_out[..lay.nvars])] += c * *ca * *cb;
            }
        }
    }

    let maxabs = out.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
    let thr = REALIFY_IMAG_REL_TOL * maxabs.max(1e-300);
    for (i, v) in out.iter().enumerate() {
        if v.im.abs() > thr {
            return Err(Error::InvalidInput(format!(
                "realification residue {:.3e} at monomial {:?} (max coeff {:.3e})",
                v.im,
                lay.exponents(i),
                maxabs
            )));
        }
    }
    Ok(RealSeries {
        layout: lay,
        c: out.iter().map(|v| v.re).collect(),
    })
}
