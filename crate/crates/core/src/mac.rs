//! Memory access controller model.
//!
//! Every sub-block product moves three regions between external memory and
//! an array: the A block (read through the transposed copy of `A`, so each
//! column of the block is one unit-stride burst), the B block, and the result
//! tile. Transfers are described by [`BufferDescriptor`]s and timed against an
//! effective bandwidth `f(N_p, S_i)` supplied by a [`BandwidthModel`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blockmm::TileGrid;
use crate::error::{invalid, Error, Result};
use crate::wqm::WorkItem;

/// Bytes per matrix element moved over the memory interface.
pub const ELEMENT_BYTES: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// Transposed A, laid out `K × padded_M`.
    ATransposed,
    /// B, laid out `K × padded_N`.
    B,
    /// C, laid out `padded_M × padded_N`.
    C,
}

/// Placement of the three operands in a flat element-addressed space.
///
/// Addresses refer to the zero-padded logical layout, so a descriptor always
/// covers whole blocks even where the real matrix is ragged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryMap {
    pub a_base: u64,
    pub b_base: u64,
    pub c_base: u64,
    pub padded_m: u64,
    pub padded_n: u64,
}

impl MemoryMap {
    pub fn for_grid(grid: &TileGrid) -> Self {
        let (k, pm, pn) = (grid.k as u64, grid.padded_m as u64, grid.padded_n as u64);
        Self {
            a_base: 0,
            b_base: k * pm,
            c_base: k * pm + k * pn,
            padded_m: pm,
            padded_n: pn,
        }
    }
}

/// One strided block transfer: `bursts` bursts of `burst_len` consecutive
/// elements, successive bursts `stride` elements apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BufferDescriptor {
    pub region: Region,
    /// ADDR
    pub addr: u64,
    /// STR
    pub stride: u64,
    pub burst_len: u64,
    pub bursts: u64,
    /// BZ
    pub block: (usize, usize),
    /// ITER_K
    pub iter_k: usize,
}

impl BufferDescriptor {
    pub fn bytes(&self) -> u64 {
        self.burst_len * self.bursts * ELEMENT_BYTES
    }

    /// `(start address, length)` of each burst in issue order.
    pub fn bursts(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        (0..self.bursts).map(move |n| (self.addr + n * self.stride, self.burst_len))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TransferPlan {
    pub a: BufferDescriptor,
    pub b: BufferDescriptor,
    pub c: BufferDescriptor,
    pub total_bytes: u64,
}

impl TransferPlan {
    /// Bytes read before the block can start computing.
    pub fn input_bytes(&self) -> u64 {
        self.a.bytes() + self.b.bytes()
    }

    pub fn writeback_bytes(&self) -> u64 {
        self.c.bytes()
    }
}

pub fn make_transfer_plan(item: &WorkItem, map: &MemoryMap) -> TransferPlan {
    let (si, sj, k) = (item.s_i as u64, item.s_j as u64, item.k as u64);
    let block = (item.s_i, item.s_j);
    let a = BufferDescriptor {
        region: Region::ATransposed,
        addr: map.a_base + item.i as u64 * si,
        stride: map.padded_m,
        burst_len: si,
        bursts: k,
        block,
        iter_k: item.k,
    };
    let b = BufferDescriptor {
        region: Region::B,
        addr: map.b_base + item.j as u64 * sj,
        stride: map.padded_n,
        burst_len: sj,
        bursts: k,
        block,
        iter_k: item.k,
    };
    let c = BufferDescriptor {
        region: Region::C,
        addr: map.c_base + item.i as u64 * si * map.padded_n + item.j as u64 * sj,
        stride: map.padded_n,
        burst_len: sj,
        bursts: si,
        block,
        iter_k: item.k,
    };
    let total_bytes = a.bytes() + b.bytes() + c.bytes();
    TransferPlan {
        a,
        b,
        c,
        total_bytes,
    }
}

/// Seconds to move `bytes` at `bw` bytes/second.
pub fn transfer_seconds(bytes: u64, bw: f64) -> Result<f64> {
    if bw.is_nan() || bw <= 0.0 {
        return Err(invalid(format!("bandwidth must be positive, got {bw}")));
    }
    Ok(bytes as f64 / bw)
}

pub fn transfer_time(plan: &TransferPlan, bw: f64) -> Result<f64> {
    transfer_seconds(plan.total_bytes, bw)
}

/// One measured point of the effective bandwidth surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub n_p: usize,
    pub s_i: usize,
    pub bytes_per_second: f64,
}

/// Tabulated `f(N_p, S_i)`, linear in `S_i` between points of the same `N_p`
/// and flat beyond the measured range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub points: Vec<CalibrationPoint>,
    #[serde(default = "default_true")]
    pub interpolate: bool,
}

fn default_true() -> bool {
    true
}

impl CalibrationTable {
    /// Validates and builds a table. Rejects tables that are not
    /// non-decreasing in `S_i` or not non-increasing in `N_p`.
    pub fn new(points: Vec<CalibrationPoint>, interpolate: bool) -> Result<Self> {
        let table = Self {
            points,
            interpolate,
        };
        let problems = table.violations();
        if problems.is_empty() {
            Ok(table)
        } else {
            Err(Error::CalibrationRejected(problems))
        }
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let want = ["n_p", "s_i", "bytes_per_second"];
        if headers.iter().collect::<Vec<_>>() != want {
            return Err(invalid(format!(
                "calibration header must be `{}`, got `{}`",
                want.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let points = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<CalibrationPoint>, _>>()?;
        if points.is_empty() {
            return Err(invalid("calibration file has no data rows"));
        }
        Self::new(points, true)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    /// Writes the table sorted by `(n_p, s_i)` with the canonical header.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut points = self.points.clone();
        points.sort_by_key(|p| (p.n_p, p.s_i));
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &points {
            w.serialize(p)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    fn curves(&self) -> BTreeMap<usize, Vec<(usize, f64)>> {
        let mut curves: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for p in &self.points {
            curves
                .entry(p.n_p)
                .or_default()
                .push((p.s_i, p.bytes_per_second));
        }
        for c in curves.values_mut() {
            c.sort_by_key(|&(s, _)| s);
        }
        curves
    }

    fn eval_curve(curve: &[(usize, f64)], s_i: usize) -> f64 {
        let first = curve[0];
        let last = curve[curve.len() - 1];
        if s_i <= first.0 {
            return first.1;
        }
        if s_i >= last.0 {
            return last.1;
        }
        let hi = curve.partition_point(|&(s, _)| s < s_i);
        let (s1, b1) = curve[hi];
        if s1 == s_i {
            return b1;
        }
        let (s0, b0) = curve[hi - 1];
        b0 + (b1 - b0) * (s_i - s0) as f64 / (s1 - s0) as f64
    }

    pub fn lookup(&self, n_p: usize, s_i: usize) -> Result<f64> {
        let curves = self.curves();
        let curve = curves
            .get(&n_p)
            .ok_or(Error::CalibrationMissing { n_p, s_i })?;
        if !self.interpolate && !curve.iter().any(|&(s, _)| s == s_i) {
            return Err(Error::CalibrationMissing { n_p, s_i });
        }
        Ok(Self::eval_curve(curve, s_i))
    }

    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen = BTreeMap::new();
        for (row, p) in self.points.iter().enumerate() {
            let row = row + 1;
            if p.n_p == 0 || p.s_i == 0 {
                out.push(format!("row {row}: n_p and s_i must be >= 1"));
            }
            if !p.bytes_per_second.is_finite() || p.bytes_per_second <= 0.0 {
                out.push(format!(
                    "row {row}: bytes_per_second must be positive, got {}",
                    p.bytes_per_second
                ));
            }
            if let Some(prev) = seen.insert((p.n_p, p.s_i), row) {
                out.push(format!(
                    "row {row}: duplicates row {prev} (n_p={}, s_i={})",
                    p.n_p, p.s_i
                ));
            }
        }
        if !out.is_empty() {
            return out;
        }
        let row_of = |n_p: usize, s_i: usize| seen.get(&(n_p, s_i)).copied();

        let curves = self.curves();
        for (&n_p, curve) in &curves {
            for w in curve.windows(2) {
                if w[1].1 < w[0].1 {
                    out.push(format!(
                        "row {}: n_p={n_p} s_i={} has {} < {} at s_i={} (must not decrease with block size)",
                        row_of(n_p, w[1].0).unwrap_or(0),
                        w[1].0,
                        w[1].1,
                        w[0].1,
                        w[0].0
                    ));
                }
            }
        }
        // Both curves are piecewise linear with flat ends, so comparing at
        // the union of breakpoints decides the whole range.
        let nps: Vec<usize> = curves.keys().copied().collect();
        for (x, &lo) in nps.iter().enumerate() {
            for &hi in &nps[x + 1..] {
                let breaks: BTreeSet<usize> = curves[&lo]
                    .iter()
                    .chain(&curves[&hi])
                    .map(|&(s, _)| s)
                    .collect();
                for s in breaks {
                    let (b_lo, b_hi) = (
                        Self::eval_curve(&curves[&lo], s),
                        Self::eval_curve(&curves[&hi], s),
                    );
                    if b_hi > b_lo {
                        let at = row_of(hi, s)
                            .map(|r| format!("row {r}"))
                            .unwrap_or_else(|| "interpolated".into());
                        out.push(format!(
                            "{at}: n_p={hi} s_i={s} has {b_hi} > {b_lo} for n_p={lo} (must not increase with array count)"
                        ));
                    }
                }
            }
        }
        out
    }
}

/// Effective per-array bandwidth `f(N_p, S_i)` in bytes/second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BandwidthModel {
    /// Transfers take no time.
    Unlimited,
    /// `peak · S_i/(S_i + l0) / (1 + alpha·(N_p − 1))`.
    Parametric {
        peak: f64,
        l0: f64,
        alpha: f64,
    },
    Table(CalibrationTable),
}

impl Default for BandwidthModel {
    fn default() -> Self {
        BandwidthModel::Parametric {
            peak: 3.2e9,
            l0: 64.0,
            alpha: 0.3,
        }
    }
}

impl BandwidthModel {
    pub fn parametric(peak: f64, l0: f64, alpha: f64) -> Result<Self> {
        if [peak, l0, alpha].iter().any(|v| v.is_nan()) || peak <= 0.0 || l0 < 0.0 || alpha < 0.0 {
            return Err(invalid(format!(
                "parametric bandwidth needs peak > 0, L0 >= 0, alpha >= 0; got {peak}, {l0}, {alpha}"
            )));
        }
        Ok(BandwidthModel::Parametric { peak, l0, alpha })
    }

    /// Parses `unlimited`, `parametric:PEAK,L0,ALPHA` or a calibration CSV path.
    pub fn parse(text: &str) -> Result<Self> {
        if text == "unlimited" {
            return Ok(BandwidthModel::Unlimited);
        }
        if let Some(rest) = text.strip_prefix("parametric:") {
            let vals = rest
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| invalid(format!("bad parametric bandwidth `{rest}`: {e}")))?;
            return match vals[..] {
                [peak, l0, alpha] => Self::parametric(peak, l0, alpha),
                _ => Err(invalid(format!(
                    "parametric bandwidth needs 3 values, got `{rest}`"
                ))),
            };
        }
        Ok(BandwidthModel::Table(CalibrationTable::from_csv_path(
            text,
        )?))
    }

    /// `None` means unlimited.
    pub fn effective_bandwidth(&self, n_p: usize, s_i: usize) -> Result<Option<f64>> {
        if n_p == 0 || s_i == 0 {
            return Err(invalid(format!(
                "n_p and s_i must be >= 1, got {n_p}, {s_i}"
            )));
        }
        match self {
            BandwidthModel::Unlimited => Ok(None),
            BandwidthModel::Parametric { peak, l0, alpha } => {
                let s = s_i as f64;
                Ok(Some(
                    peak * (s / (s + l0)) / (1.0 + alpha * (n_p as f64 - 1.0)),
                ))
            }
            BandwidthModel::Table(t) => t.lookup(n_p, s_i).map(Some),
        }
    }

    /// Seconds to move `bytes` under this model.
    pub fn seconds_for(&self, bytes: u64, n_p: usize, s_i: usize) -> Result<f64> {
        match self.effective_bandwidth(n_p, s_i)? {
            None => Ok(0.0),
            Some(bw) => transfer_seconds(bytes, bw),
        }
    }
}
