//! File formats: observed data, covariates, group maps, edges, potential
//! outcomes, moment exports and a compact binary container for moments.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::design::AssignmentRealization;
use crate::error::{Error, Result};
use crate::moments::{DesignMoments, MomentMethod};

/// Entries below this magnitude are dropped from triplet exports.
pub const TRIPLET_DROP_TOL: f64 = 1e-12;
const CONTAINER_MAGIC: &[u8; 8] = b"DBMOMNT1";

/// Shortest decimal with at most `digits` significant digits, trailing zeros trimmed.
pub fn fmt_sig(v: f64, digits: usize) -> String {
    if v.is_nan() {
        return "NaN".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..digits as i32).contains(&exp) {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, v))
    } else {
        format!("{}e{}", trim_zeros(mantissa.to_string()), exp)
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Fifteen significant digits, the CSV output precision.
pub fn fmt15(v: f64) -> String {
    fmt_sig(v, 15)
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?)
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::InvalidArgument(format!("cannot parse {what} `{s}`")))
}

fn parse_index(s: &str, what: &str) -> Result<usize> {
    s.parse::<usize>().map_err(|_| Error::InvalidArgument(format!("cannot parse {what} `{s}` as a non-negative integer")))
}

/// Observed data in file order. Arms are 1-based in the file and 0-based here.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedTable {
    pub unit_ids: Vec<String>,
    pub arms: Vec<usize>,
    pub y: Vec<f64>,
}

impl ObservedTable {
    pub fn realization(&self, k: usize) -> Result<AssignmentRealization> {
        AssignmentRealization::new(k, self.arms.clone())
    }

    pub fn y_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.y)
    }
}

/// `unit_id,arm,y`.
pub fn read_observed_csv(path: &Path) -> Result<ObservedTable> {
    let mut rdr = reader(path)?;
    let mut t = ObservedTable { unit_ids: Vec::new(), arms: Vec::new(), y: Vec::new() };
    let mut seen = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 3 {
            return Err(Error::InvalidArgument("observed rows need unit_id,arm,y".into()));
        }
        let id = rec[0].to_string();
        if seen.insert(id.clone(), ()).is_some() {
            return Err(Error::InvalidArgument(format!("unit `{id}` appears twice")));
        }
        let arm = parse_index(&rec[1], "arm")?;
        if arm == 0 {
            return Err(Error::InvalidArgument(format!("arm labels start at 1 (unit `{id}`)")));
        }
        t.unit_ids.push(id);
        t.arms.push(arm - 1);
        t.y.push(parse_f64(&rec[2], "outcome")?);
    }
    Ok(t)
}

pub fn write_observed_csv(path: &Path, table: &ObservedTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["unit_id", "arm", "y"])?;
    for i in 0..table.y.len() {
        w.write_record([table.unit_ids[i].clone(), (table.arms[i] + 1).to_string(), fmt15(table.y[i])])?;
    }
    w.flush()?;
    Ok(())
}

/// Covariate table with missing values as `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCovariates {
    pub names: Vec<String>,
    pub unit_ids: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl RawCovariates {
    /// Rows reordered to follow `order`; every listed unit must be present.
    pub fn aligned(&self, order: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = self.unit_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut rows = Vec::with_capacity(order.len());
        for id in order {
            let i = index.get(id.as_str()).ok_or_else(|| Error::Covariates(format!("no covariates for unit `{id}`")))?;
            rows.push(self.rows[*i].clone());
        }
        Ok(Self { names: self.names.clone(), unit_ids: order.to_vec(), rows })
    }
}

/// `unit_id,x1..xp`; empty cells and `NA` are missing.
pub fn read_covariates_csv(path: &Path) -> Result<RawCovariates> {
    let mut rdr = reader(path)?;
    let header = rdr.headers()?.clone();
    if header.is_empty() {
        return Err(Error::Covariates("empty header".into()));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut out = RawCovariates { names, unit_ids: Vec::new(), rows: Vec::new() };
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Covariates(format!("row for `{}` has {} fields", &rec[0], rec.len())));
        }
        out.unit_ids.push(rec[0].to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|s| if s.is_empty() || s.eq_ignore_ascii_case("na") { Ok(None) } else { parse_f64(s, "covariate").map(Some) })
            .collect::<Result<Vec<_>>>()?;
        out.rows.push(row);
    }
    Ok(out)
}

/// `unit_id,group_id` with 0-based unit indices; returns the group label per unit.
pub fn read_groups_csv(path: &Path, n: usize) -> Result<Vec<usize>> {
    let mut rdr = reader(path)?;
    let mut labels = vec![None; n];
    for rec in rdr.records() {
        let rec = rec?;
        let unit = parse_index(&rec[0], "unit_id")?;
        let group = parse_index(&rec[1], "group_id")?;
        if unit >= n {
            return Err(Error::InvalidDesign(format!("unit {unit} outside 0..{n}")));
        }
        if labels[unit].replace(group).is_some() {
            return Err(Error::InvalidDesign(format!("unit {unit} listed twice")));
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, g)| g.ok_or_else(|| Error::InvalidDesign(format!("unit {i} has no group"))))
        .collect()
}

/// `src_id,dst_id` with 0-based node indices.
pub fn read_edges_csv(path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut rdr = reader(path)?;
    let mut edges = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        edges.push((parse_index(&rec[0], "src_id")?, parse_index(&rec[1], "dst_id")?));
    }
    Ok(edges)
}

pub fn write_edges_csv(path: &Path, edges: &[(usize, usize)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["src_id", "dst_id"])?;
    for (s, d) in edges {
        w.write_record([s.to_string(), d.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `unit_id,y_1..y_k`, returned arm-major stacked.
pub fn read_potential_csv(path: &Path) -> Result<(Vec<String>, DVector<f64>, usize)> {
    let mut rdr = reader(path)?;
    let k = rdr.headers()?.len().saturating_sub(1);
    if k == 0 {
        return Err(Error::InvalidArgument("potential outcomes need at least one arm column".into()));
    }
    let mut ids = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); k];
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != k + 1 {
            return Err(Error::InvalidArgument(format!("row for `{}` has {} fields", &rec[0], rec.len())));
        }
        ids.push(rec[0].to_string());
        for a in 0..k {
            cols[a].push(parse_f64(&rec[a + 1], "potential outcome")?);
        }
    }
    Ok((ids, DVector::from_iterator(cols.iter().map(Vec::len).sum(), cols.into_iter().flatten()), k))
}

pub fn write_potential_csv(path: &Path, y: &DVector<f64>, k: usize) -> Result<()> {
    let n = y.len() / k;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["unit_id".to_string()];
    header.extend((1..=k).map(|a| format!("y_{a}")));
    w.write_record(&header)?;
    for i in 0..n {
        let mut row = vec![i.to_string()];
        row.extend((0..k).map(|a| fmt15(y[a * n + i])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `index,arm,unit,pi` with 1-based arms.
pub fn write_pi_csv(path: &Path, moments: &DesignMoments) -> Result<()> {
    let n = moments.n();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "arm", "unit", "pi"])?;
    for u in 0..moments.kn() {
        w.write_record([u.to_string(), (u / n + 1).to_string(), (u % n).to_string(), fmt15(moments.pi[u])])?;
    }
    w.flush()?;
    Ok(())
}

/// `i,j,value`, dropping |value| < 1e-12.
pub fn write_triplets_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["i", "j", "value"])?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let v = m[(i, j)];
            if v.abs() >= TRIPLET_DROP_TOL {
                w.write_record([i.to_string(), j.to_string(), fmt15(v)])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_triplets_csv(path: &Path, dim: usize) -> Result<DMatrix<f64>> {
    let mut rdr = reader(path)?;
    let mut m = DMatrix::zeros(dim, dim);
    for rec in rdr.records() {
        let rec = rec?;
        let (i, j) = (parse_index(&rec[0], "i")?, parse_index(&rec[1], "j")?);
        if i >= dim || j >= dim {
            return Err(Error::Dimension(format!("entry ({i},{j}) outside {dim}x{dim}")));
        }
        m[(i, j)] = parse_f64(&rec[2], "value")?;
    }
    Ok(m)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64s<'a>(w: &mut impl Write, vals: impl Iterator<Item = &'a f64>) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, len: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(len);
    let mut b = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

/// Little-endian container: magic, n, k, method tag (0 exact, 1 Monte Carlo)
/// with reps and seed, then π, the column-major joint matrix and one byte
/// per cell for proven zeros. D is rebuilt on load.
pub fn save_moments(path: &Path, m: &DesignMoments) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CONTAINER_MAGIC)?;
    put_u64(&mut w, m.n() as u64)?;
    put_u64(&mut w, m.k() as u64)?;
    match m.method {
        MomentMethod::Exact => {
            put_u64(&mut w, 0)?;
            put_u64(&mut w, 0)?;
            put_u64(&mut w, 0)?;
        }
        MomentMethod::MonteCarlo { reps, seed } => {
            put_u64(&mut w, 1)?;
            put_u64(&mut w, reps)?;
            put_u64(&mut w, seed)?;
        }
    }
    put_f64s(&mut w, m.pi.iter())?;
    put_f64s(&mut w, m.p.iter())?;
    w.write_all(&m.proven_zero.iter().map(|&z| z as u8).collect::<Vec<_>>())?;
    w.flush()?;
    Ok(())
}

pub fn load_moments(path: &Path) -> Result<DesignMoments> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(Error::InvalidArgument(format!("{} is not a moments container", path.display())));
    }
    let n = get_u64(&mut r)? as usize;
    let k = get_u64(&mut r)? as usize;
    let tag = get_u64(&mut r)?;
    let reps = get_u64(&mut r)?;
    let seed = get_u64(&mut r)?;
    let method = match tag {
        0 => MomentMethod::Exact,
        1 => MomentMethod::MonteCarlo { reps, seed },
        t => return Err(Error::InvalidArgument(format!("unknown moment method tag {t}"))),
    };
    let kn = n.checked_mul(k).ok_or_else(|| Error::InvalidArgument("container dimensions overflow".into()))?;
    let pi = DVector::from_vec(get_f64s(&mut r, kn)?);
    let p = DMatrix::from_vec(kn, kn, get_f64s(&mut r, kn * kn)?);
    let mut zeros = vec![0u8; kn];
    r.read_exact(&mut zeros)?;
    DesignMoments::from_joint(n, k, pi, p, method, Some(zeros.iter().map(|&b| b != 0).collect()))
}
