//! Plain-text artifact files: coefficient tables for truncated series,
//! key/value context files, and the CSV tables consumed by downstream
//! stages and external plotting.
//!
//! Every writer is deterministic — identical inputs produce identical
//! bytes — so reruns of a pipeline stage can be compared with `cmp`.
//! Floats are written with 17 significant digits (`{:.16e}`), which
//! round-trips `f64` exactly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use num_complex::Complex64 as C64;

use crate::connect::{CandidatePair, CloudPoint, DropReason, FieldSample, SectionCloud};
use crate::dynamics::{Lpoint, State};
use crate::error::{Error, Result};
use crate::parameterize::ManifoldKind;
use crate::polyalg::{Layout, Series};
use crate::slicing::SliceMesh;

/// Exact-round-trip float formatting used by every writer.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn bad(path_hint: &str, what: impl std::fmt::Display) -> Error {
    Error::Io(format!("{path_hint}: {what}"))
}

// ---------------------------------------------------------------------------
// Series coefficient files
// ---------------------------------------------------------------------------

/// Write one truncated series: optional `# key=value` lines, a header line
/// `nvars max_degree count`, then one line `m1 .. mn re im` per nonzero
/// coefficient in layout order.
pub fn write_series<W: Write>(out: &mut W, s: &Series, meta: &[(String, String)]) -> Result<()> {
    let lay = s.layout();
    write_meta(out, meta)?;
    let nonzero: Vec<usize> = s
        .coeffs()
        .iter()
        .enumerate()
        .filter(|(_, c)| c.re != 0.0 || c.im != 0.0)
        .map(|(i, _)| i)
        .collect();
    writeln!(out, "{} {} {}", lay.nvars(), lay.max_order(), nonzero.len())?;
    for i in nonzero {
        for &m in lay.exponents(i) {
            write!(out, "{m} ")?;
        }
        let c = s.coeffs()[i];
        writeln!(out, "{} {}", fmt_f64(c.re), fmt_f64(c.im))?;
    }
    Ok(())
}

/// Read a series written by [`write_series`]. Coefficient lines may appear
/// in any order; duplicate multi-indices are rejected, and the declared
/// count must match the number of coefficient lines.
pub fn read_series<R: BufRead>(inp: R) -> Result<(Series, Vec<(String, String)>)> {
    let mut meta = Vec::new();
    let mut header: Option<(usize, usize, usize)> = None;
    let mut series: Option<Series> = None;
    let mut seen: Vec<bool> = Vec::new();
    let mut rows = 0usize;
    for line in inp.lines() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(rest) = t.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                meta.push((k.trim().to_string(), v.trim().to_string()));
            }
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        match header {
            None => {
                if fields.len() != 3 {
                    return Err(bad("series header", "expected `nvars max_degree count`"));
                }
                let nvars: usize = fields[0].parse()?;
                let n: usize = fields[1].parse()?;
                let count: usize = fields[2].parse()?;
                if nvars == 0 {
                    return Err(Error::InvalidInput("series with zero variables".into()));
                }
                let lay = Layout::new(nvars, n);
                seen = vec![false; lay.ncoeffs()];
                series = Some(Series::zero(&lay));
                header = Some((nvars, n, count));
            }
            Some((nvars, n, _)) => {
                if fields.len() != nvars + 2 {
                    return Err(bad(
                        "series row",
                        format!("expected {} fields, got {}", nvars + 2, fields.len()),
                    ));
                }
                let mut m = Vec::with_capacity(nvars);
                for f in &fields[..nvars] {
                    m.push(f.parse::<u8>()?);
                }
                let deg: usize = m.iter().map(|&e| e as usize).sum();
                if deg > n {
                    return Err(Error::InvalidInput(format!(
                        "multi-index of degree {deg} exceeds the declared maximum {n}"
                    )));
                }
                let re: f64 = fields[nvars].parse()?;
                let im: f64 = fields[nvars + 1].parse()?;
                let s = series.as_mut().expect("header parsed");
                let idx = s.layout().index_of(&m);
                if seen[idx] {
                    return Err(Error::InvalidInput(format!(
                        "duplicate coefficient line for multi-index {m:?}"
                    )));
                }
                seen[idx] = true;
                s.set_coeff(&m, C64::new(re, im));
                rows += 1;
            }
        }
    }
    let (_, _, count) = header.ok_or_else(|| bad("series file", "missing header line"))?;
    if rows != count {
        return Err(bad(
            "series file",
            format!("header declares {count} coefficients, found {rows}"),
        ));
    }
    Ok((series.expect("header parsed"), meta))
}

pub fn write_series_file(path: &Path, s: &Series, meta: &[(String, String)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_series(&mut w, s, meta)?;
    w.flush()?;
    Ok(())
}

pub fn read_series_file(path: &Path) -> Result<(Series, Vec<(String, String)>)> {
    read_series(BufReader::new(File::open(path)?))
}

// ---------------------------------------------------------------------------
// Key/value context files
// ---------------------------------------------------------------------------

/// Write `key = value` lines (one per pair, in the given order), preceded by
/// optional `# key=value` meta lines.
pub fn write_kv<W: Write>(out: &mut W, pairs: &[(String, String)], meta: &[(String, String)]) -> Result<()> {
    write_meta(out, meta)?;
    for (k, v) in pairs {
        writeln!(out, "{k} = {v}")?;
    }
    Ok(())
}

pub fn read_kv<R: BufRead>(inp: R) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for line in inp.lines() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| bad("key/value file", format!("line without `=`: {t}")))?;
        let k = k.trim().to_string();
        if pairs.iter().any(|(p, _): &(String, String)| *p == k) {
            return Err(Error::InvalidInput(format!("duplicate key `{k}`")));
        }
        pairs.push((k, v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn write_kv_file(path: &Path, pairs: &[(String, String)], meta: &[(String, String)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_kv(&mut w, pairs, meta)?;
    w.flush()?;
    Ok(())
}

pub fn read_kv_file(path: &Path) -> Result<Vec<(String, String)>> {
    read_kv(BufReader::new(File::open(path)?))
}

/// Look a key up in a key/value pair list.
pub fn kv_get<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::InvalidInput(format!("missing key `{key}`")))
}

// ---------------------------------------------------------------------------
// Numeric CSV tables
// ---------------------------------------------------------------------------

/// An all-numeric CSV table with `# key=value` meta lines: the common shape
/// of every pipeline artifact except coefficient files.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub meta: Vec<(String, String)>,
    /// Comma-separated column names.
    pub header: String,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: &str) -> Table {
        Table {
            meta: Vec::new(),
            header: header.to_string(),
            rows: Vec::new(),
        }
    }

    pub fn ncols(&self) -> usize {
        self.header.split(',').count()
    }

    pub fn push_meta(&mut self, key: &str, value: impl std::fmt::Display) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("missing meta key `{key}`")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        Ok(self.meta_str(key)?.parse()?)
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        Ok(self.meta_str(key)?.parse()?)
    }
}

fn write_meta<W: Write>(out: &mut W, meta: &[(String, String)]) -> Result<()> {
    for (k, v) in meta {
        writeln!(out, "# {k}={v}")?;
    }
    Ok(())
}

pub fn write_table<W: Write>(out: &mut W, t: &Table) -> Result<()> {
    let ncols = t.ncols();
    write_meta(out, &t.meta)?;
    writeln!(out, "{}", t.header)?;
    let mut line = String::new();
    for row in &t.rows {
        if row.len() != ncols {
            return Err(Error::InvalidInput(format!(
                "row with {} fields in a {ncols}-column table",
                row.len()
            )));
        }
        line.clear();
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&fmt_f64(*v));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_table<R: BufRead>(inp: R) -> Result<Table> {
    let mut t = Table::default();
    let mut have_header = false;
    let mut ncols = 0usize;
    for line in inp.lines() {
        let line = line?;
        let s = line.trim();
        if s.is_empty() {
            continue;
        }
        if let Some(rest) = s.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                t.meta.push((k.trim().to_string(), v.trim().to_string()));
            }
            continue;
        }
        if !have_header {
            t.header = s.to_string();
            ncols = t.ncols();
            have_header = true;
            continue;
        }
        let mut row = Vec::with_capacity(ncols);
        for f in s.split(',') {
            row.push(f.trim().parse::<f64>()?);
        }
        if row.len() != ncols {
            return Err(bad(
                "csv row",
                format!("expected {ncols} fields, got {}", row.len()),
            ));
        }
        t.rows.push(row);
    }
    if !have_header {
        return Err(bad("csv file", "missing header line"));
    }
    Ok(t)
}

pub fn write_table_file(path: &Path, t: &Table) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_table(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_table_file(path: &Path) -> Result<Table> {
    read_table(BufReader::new(File::open(path)?)).map_err(|e| match e {
        Error::Io(m) => Error::Io(format!("{}: {m}", path.display())),
        other => other,
    })
}

// ---------------------------------------------------------------------------
// Typed artifact tables
// ---------------------------------------------------------------------------

pub const MESH_HEADER: &str = "s1,s2,s3,s4,h,mult";
pub const CLOUD_HEADER: &str = "s1,s2,s3,s4,x,y,z,px,py,pz,t";
pub const DROPPED_HEADER: &str = "s1,s2,s3,s4,reason";
pub const CANDIDATE_HEADER: &str = "s1s,s2s,s3s,s4s,s1u,s2u,s3u,s4u,d";
pub const CONNECTION_HEADER: &str = "s1s,s2s,s3s,s4s,s1u,s2u,s3u,s4u,d,Tu,Ts,resid,dmin_moon,zmax,h";
pub const HEATMAP_HEADER: &str = "s1,s2,s4,d";
pub const ORBIT_ERROR_HEADER: &str = "s1,s2,s3,s4,e_O";
pub const ORBIT_ERROR_SUMMARY_HEADER: &str = "h,order,max_e_O";

fn expect_header(t: &Table, want: &str) -> Result<()> {
    if t.header != want {
        return Err(Error::InvalidInput(format!(
            "unexpected table header `{}` (want `{want}`)",
            t.header
        )));
    }
    Ok(())
}

/// Iso-energetic slice mesh as a table: one row per mesh point, with the
/// slice descriptors in the meta lines.
pub fn mesh_table(m: &SliceMesh) -> Table {
    let mut t = Table::new(MESH_HEADER);
    t.push_meta("point", m.point.tag());
    t.push_meta("h", fmt_f64(m.h));
    t.push_meta("eps", fmt_f64(m.eps));
    t.push_meta("strategy", m.strategy.id());
    t.push_meta("bracket_order", m.bracket_order);
    t.push_meta("order", m.order);
    for p in &m.points {
        t.rows
            .push(vec![p.s[0], p.s[1], p.s[2], p.s[3], m.h, p.mult as f64]);
    }
    t
}

/// The tag tuples of a mesh table.
pub fn mesh_tags(t: &Table) -> Result<Vec<[f64; 4]>> {
    expect_header(t, MESH_HEADER)?;
    Ok(t.rows.iter().map(|r| [r[0], r[1], r[2], r[3]]).collect())
}

fn drop_code(r: &DropReason) -> f64 {
    match r {
        DropReason::MoonStop => 0.0,
        DropReason::TimedOut => 1.0,
        DropReason::IntegratorFailed => 2.0,
    }
}

fn drop_from_code(c: f64) -> Result<DropReason> {
    match c as i64 {
        0 => Ok(DropReason::MoonStop),
        1 => Ok(DropReason::TimedOut),
        2 => Ok(DropReason::IntegratorFailed),
        other => Err(Error::InvalidInput(format!("unknown drop reason code {other}"))),
    }
}

/// A propagated section cloud as two tables: arrivals and dropped tags.
pub fn cloud_tables(c: &SectionCloud) -> (Table, Table) {
    let mut arr = Table::new(CLOUD_HEADER);
    arr.push_meta("point", c.point.tag());
    arr.push_meta("kind", c.kind.tag());
    arr.push_meta("h", fmt_f64(c.h));
    arr.push_meta("delta", fmt_f64(c.delta));
    arr.push_meta("crossings", c.crossings);
    for p in &c.points {
        let mut row = Vec::with_capacity(11);
        row.extend_from_slice(&p.s);
        row.extend(p.state.iter().copied());
        row.push(p.time);
        arr.rows.push(row);
    }
    let mut drp = Table::new(DROPPED_HEADER);
    for (s, r) in &c.dropped {
        drp.rows.push(vec![s[0], s[1], s[2], s[3], drop_code(r)]);
    }
    (arr, drp)
}

pub fn cloud_from_tables(arrivals: &Table, dropped: &Table) -> Result<SectionCloud> {
    expect_header(arrivals, CLOUD_HEADER)?;
    expect_header(dropped, DROPPED_HEADER)?;
    let point: Lpoint = arrivals.meta_str("point")?.parse()?;
    let kind: ManifoldKind = arrivals.meta_str("kind")?.parse()?;
    let h = arrivals.meta_f64("h")?;
    let delta = arrivals.meta_f64("delta")?;
    let crossings = arrivals.meta_usize("crossings")?;
    let points = arrivals
        .rows
        .iter()
        .map(|r| CloudPoint {
            s: [r[0], r[1], r[2], r[3]],
            state: State::from_column_slice(&r[4..10]),
            time: r[10],
        })
        .collect();
    let mut drp = Vec::with_capacity(dropped.rows.len());
    for r in &dropped.rows {
        drp.push(([r[0], r[1], r[2], r[3]], drop_from_code(r[4])?));
    }
    Ok(SectionCloud {
        point,
        kind,
        h,
        delta,
        crossings,
        points,
        dropped: drp,
    })
}

/// Candidate pairs as a table. The flight times are not part of the row
/// schema; they are recovered by joining the tags back to the clouds (see
/// [`candidates_from_table`]).
pub fn candidate_table(pairs: &[CandidatePair], h: f64, xi: f64) -> Table {
    let mut t = Table::new(CANDIDATE_HEADER);
    t.push_meta("h", fmt_f64(h));
    t.push_meta("xi", fmt_f64(xi));
    for p in pairs {
        let mut row = Vec::with_capacity(9);
        row.extend_from_slice(&p.s_s);
        row.extend_from_slice(&p.s_u);
        row.push(p.d);
        t.rows.push(row);
    }
    t
}

fn tag_bits(s: &[f64; 4]) -> [u64; 4] {
    [s[0].to_bits(), s[1].to_bits(), s[2].to_bits(), s[3].to_bits()]
}

/// Rebuild candidate pairs from a candidate table by looking each tag up in
/// its cloud (exact bit-level match, as both files come from the same run).
pub fn candidates_from_table(
    t: &Table,
    stable: &SectionCloud,
    unstable: &SectionCloud,
) -> Result<Vec<CandidatePair>> {
    expect_header(t, CANDIDATE_HEADER)?;
    let index = |c: &SectionCloud| -> HashMap<[u64; 4], f64> {
        c.points.iter().map(|p| (tag_bits(&p.s), p.time)).collect()
    };
    let ts = index(stable);
    let tu = index(unstable);
    let mut pairs = Vec::with_capacity(t.rows.len());
    for r in &t.rows {
        let s_s = [r[0], r[1], r[2], r[3]];
        let s_u = [r[4], r[5], r[6], r[7]];
        let t_s = *ts.get(&tag_bits(&s_s)).ok_or_else(|| {
            Error::InvalidInput(format!("candidate tag {s_s:?} not found in the stable cloud"))
        })?;
        let t_u = *tu.get(&tag_bits(&s_u)).ok_or_else(|| {
            Error::InvalidInput(format!("candidate tag {s_u:?} not found in the unstable cloud"))
        })?;
        pairs.push(CandidatePair {
            s_s,
            s_u,
            t_s,
            t_u,
            d: r[8],
        });
    }
    Ok(pairs)
}

/// One connection row of the external CSV: the converged tags and times plus
/// diagnostics. Carries everything needed to re-seed the shooting system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConnectionRow {
    pub s_s: [f64; 4],
    pub s_u: [f64; 4],
    /// Section distance of the seed candidate this record came from.
    pub d: f64,
    pub t_u: f64,
    pub t_s: f64,
    pub resid: f64,
    pub dmin_moon: f64,
    pub zmax: f64,
    pub h: f64,
}

pub fn connection_table(rows: &[ConnectionRow]) -> Table {
    let mut t = Table::new(CONNECTION_HEADER);
    for c in rows {
        let mut row = Vec::with_capacity(15);
        row.extend_from_slice(&c.s_s);
        row.extend_from_slice(&c.s_u);
        row.extend_from_slice(&[c.d, c.t_u, c.t_s, c.resid, c.dmin_moon, c.zmax, c.h]);
        t.rows.push(row);
    }
    t
}

pub fn connections_from_table(t: &Table) -> Result<Vec<ConnectionRow>> {
    expect_header(t, CONNECTION_HEADER)?;
    Ok(t.rows
        .iter()
        .map(|r| ConnectionRow {
            s_s: [r[0], r[1], r[2], r[3]],
            s_u: [r[4], r[5], r[6], r[7]],
            d: r[8],
            t_u: r[9],
            t_s: r[10],
            resid: r[11],
            dmin_moon: r[12],
            zmax: r[13],
            h: r[14],
        })
        .collect())
}

/// Distance field over the stable cloud as plot data: the (s1, s2, s4)
/// coordinates of each stable tag against its distance to the nearest
/// unstable arrival.
pub fn heatmap_table(field: &[FieldSample], h: f64) -> Table {
    let mut t = Table::new(HEATMAP_HEADER);
    t.push_meta("h", fmt_f64(h));
    for f in field {
        t.rows.push(vec![f.s[0], f.s[1], f.s[3], f.d]);
    }
    t
}
