//! Closed-form performance model and design-space exploration.
//!
//! For a design point `(N_p, S_i, S_j)` each array performs
//! `N_work = ⌈⌈M/S_i⌉·⌈N/S_j⌉ / N_p⌉` block products. One block moves
//! `4·(S_i·K + S_j·K + S_i·S_j)` bytes and computes for
//! `S_i + max(S_i,S_j)·K + Stage_fmac` cycles. Because transfers overlap
//! computation, the total time is only bracketed:
//! `T_compute ≤ T_total ≤ T_trans + T_compute`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mac::{BandwidthModel, ELEMENT_BYTES};
use crate::pe::block_cycles;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemShape {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl ProblemShape {
    pub fn new(m: usize, k: usize, n: usize) -> Result<Self> {
        if m == 0 || k == 0 || n == 0 {
            return Err(invalid(format!(
                "problem dims must be >= 1, got {m}x{k}x{n}"
            )));
        }
        Ok(Self { m, k, n })
    }

    pub fn flops(&self) -> f64 {
        2.0 * self.m as f64 * self.k as f64 * self.n as f64
    }

    pub fn macs(&self) -> u128 {
        self.m as u128 * self.k as u128 * self.n as u128
    }
}

impl std::fmt::Display for ProblemShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.m, self.k, self.n)
    }
}

impl std::str::FromStr for ProblemShape {
    type Err = Error;

    /// `MxKxN`.
    fn from_str(s: &str) -> Result<Self> {
        let dims = s
            .split(['x', 'X', '*'])
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| invalid(format!("bad shape `{s}`: {e}")))?;
        match dims[..] {
            [m, k, n] => Self::new(m, k, n),
            _ => Err(invalid(format!("shape must be MxKxN, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DesignPoint {
    pub n_p: usize,
    pub s_i: usize,
    pub s_j: usize,
}

impl DesignPoint {
    /// Square blocks, `S_j = S_i`.
    pub fn square(n_p: usize, s_i: usize) -> Self {
        Self { n_p, s_i, s_j: s_i }
    }

    /// PEs in each of the `N_p` chains when base arrays are split evenly.
    pub fn pes_per_array(&self, p: usize, p_m: usize) -> usize {
        (p_m / self.n_p.max(1)) * p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub p: usize,
    pub p_m: usize,
    pub stage_fmac: usize,
    pub f_acc: f64,
    pub bandwidth: BandwidthModel,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            p: 64,
            p_m: 4,
            stage_fmac: 8,
            f_acc: 2e8,
            bandwidth: BandwidthModel::default(),
        }
    }
}

impl ModelParams {
    /// `2·F_acc·P_m·P` in GFLOPS.
    pub fn peak_gflops(&self) -> f64 {
        2.0 * self.f_acc * (self.p_m * self.p) as f64 / 1e9
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelEstimate {
    pub n_work: usize,
    /// Effective per-array bandwidth used, `None` when unlimited.
    pub bandwidth: Option<f64>,
    pub t_work: f64,
    pub t_trans: f64,
    pub t_compute: f64,
    pub t_lower: f64,
    pub t_upper: f64,
    pub gflops_upper: f64,
    pub gflops_lower: f64,
}

pub fn n_work(shape: &ProblemShape, point: &DesignPoint) -> usize {
    let tiles = shape.m.div_ceil(point.s_i) * shape.n.div_ceil(point.s_j);
    tiles.div_ceil(point.n_p)
}

pub fn t_compute(shape: &ProblemShape, point: &DesignPoint, stage_fmac: usize, f_acc: f64) -> f64 {
    n_work(shape, point) as f64 * block_cycles(point.s_i, point.s_j, shape.k, stage_fmac) as f64
        / f_acc
}

/// Bytes moved per block.
pub fn bytes_per_block(point: &DesignPoint, k: usize) -> u64 {
    let (si, sj, k) = (point.s_i as u64, point.s_j as u64, k as u64);
    ELEMENT_BYTES * (si * k + sj * k + si * sj)
}

pub fn t_work(
    shape: &ProblemShape,
    point: &DesignPoint,
    bandwidth: &BandwidthModel,
) -> Result<f64> {
    bandwidth.seconds_for(bytes_per_block(point, shape.k), point.n_p, point.s_i)
}

pub fn t_trans(
    shape: &ProblemShape,
    point: &DesignPoint,
    bandwidth: &BandwidthModel,
) -> Result<f64> {
    Ok(n_work(shape, point) as f64 * t_work(shape, point, bandwidth)?)
}

pub fn bounds(
    shape: &ProblemShape,
    point: &DesignPoint,
    params: &ModelParams,
) -> Result<ModelEstimate> {
    if point.n_p == 0 || point.s_i == 0 || point.s_j == 0 {
        return Err(invalid(format!("degenerate design point {point:?}")));
    }
    if params.f_acc.is_nan() || params.f_acc <= 0.0 {
        return Err(invalid(format!(
            "F_acc must be positive, got {}",
            params.f_acc
        )));
    }
    let t_work = t_work(shape, point, &params.bandwidth)?;
    let n_work = n_work(shape, point);
    let t_trans = n_work as f64 * t_work;
    let t_compute = t_compute(shape, point, params.stage_fmac, params.f_acc);
    let t_upper = t_trans + t_compute;
    Ok(ModelEstimate {
        n_work,
        bandwidth: params.bandwidth.effective_bandwidth(point.n_p, point.s_i)?,
        t_work,
        t_trans,
        t_compute,
        t_lower: t_compute,
        t_upper,
        gflops_upper: shape.flops() / t_compute / 1e9,
        gflops_lower: shape.flops() / t_upper / 1e9,
    })
}

/// Array counts allowed for block height `s_i`: `N_p` chains of
/// `⌈S_i/P⌉` base arrays must fit in `P_m` base arrays.
pub fn feasible_n_p(p: usize, p_m: usize, s_i: usize) -> Vec<usize> {
    if p == 0 || s_i == 0 {
        return Vec::new();
    }
    let bases = s_i.div_ceil(p);
    (1..=p_m).filter(|n_p| n_p * bases <= p_m).collect()
}

pub fn is_feasible(point: &DesignPoint, p: usize, p_m: usize) -> bool {
    feasible_n_p(p, p_m, point.s_i).contains(&point.n_p)
}

/// All feasible square points over the candidate block sizes.
pub fn feasible_points(p: usize, p_m: usize, candidates: &[usize]) -> Vec<DesignPoint> {
    candidates
        .iter()
        .flat_map(|&s| {
            feasible_n_p(p, p_m, s)
                .into_iter()
                .map(move |n_p| DesignPoint::square(n_p, s))
        })
        .collect()
}

/// Human-readable constraint table, one row per distinct `N_p` set.
pub fn constraint_rows(p: usize, p_m: usize) -> String {
    let mut out = Vec::new();
    let mut first = 1;
    for bases in 1..=p_m {
        if bases < p_m && p_m / (bases + 1) == p_m / bases {
            continue;
        }
        let allowed: Vec<String> = (1..=p_m / bases).map(|n| n.to_string()).collect();
        out.push(format!(
            "  {} <= S_i <= {}: N_p in {{{}}}",
            (first - 1) * p + 1,
            bases * p,
            allowed.join(",")
        ));
        first = bases + 1;
    }
    out.push(format!("  S_i > {}: infeasible", p_m * p));
    out.join("\n")
}

pub fn check_point(point: &DesignPoint, p: usize, p_m: usize) -> Result<()> {
    if is_feasible(point, p, p_m) {
        Ok(())
    } else {
        Err(Error::InfeasiblePoint {
            n_p: point.n_p,
            s_i: point.s_i,
            rows: constraint_rows(p, p_m),
        })
    }
}

/// Default block-size grid: `P/8, P/4, P/2, P, 3P/2, 2P, 3P, 4P`
/// (`{8,16,32,64,96,128,192,256}` for `P = 64`).
pub fn default_candidates(p: usize) -> Vec<usize> {
    let mut c: Vec<usize> = [p / 8, p / 4, p / 2, p, 3 * p / 2, 2 * p, 3 * p, 4 * p]
        .into_iter()
        .filter(|&s| s >= 1)
        .collect();
    c.dedup();
    c
}

/// Multiples of `step` up to `P_m·P`.
pub fn stepped_candidates(p: usize, p_m: usize, step: usize) -> Vec<usize> {
    (1..)
        .map(|i| i * step.max(1))
        .take_while(|&s| s <= p * p_m)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExploreRow {
    pub point: DesignPoint,
    pub feasible: bool,
    pub estimate: Option<ModelEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exploration {
    pub shape: ProblemShape,
    /// Every `(N_p, S_i)` combination considered, feasible or not.
    pub rows: Vec<ExploreRow>,
    /// Feasible points, best first.
    pub ranked: Vec<(DesignPoint, ModelEstimate)>,
}

impl Exploration {
    pub fn best(&self) -> (DesignPoint, ModelEstimate) {
        self.ranked[0]
    }
}

/// Orders by `T_upper`, then `T_lower`, then fewer arrays, then smaller blocks.
pub fn rank_order(
    a: &(DesignPoint, ModelEstimate),
    b: &(DesignPoint, ModelEstimate),
) -> std::cmp::Ordering {
    a.1.t_upper
        .total_cmp(&b.1.t_upper)
        .then(a.1.t_lower.total_cmp(&b.1.t_lower))
        .then(a.0.n_p.cmp(&b.0.n_p))
        .then(a.0.s_i.cmp(&b.0.s_i))
        .then(a.0.s_j.cmp(&b.0.s_j))
}

pub fn explore(
    shape: &ProblemShape,
    params: &ModelParams,
    candidates: &[usize],
) -> Result<Exploration> {
    if candidates.is_empty() {
        return Err(invalid("no block-size candidates"));
    }
    let mut sizes = candidates.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let mut rows = Vec::new();
    let mut ranked = Vec::new();
    for &s in &sizes {
        let allowed = feasible_n_p(params.p, params.p_m, s);
        for n_p in 1..=params.p_m {
            let point = DesignPoint::square(n_p, s);
            if allowed.contains(&n_p) {
                let est = bounds(shape, &point, params)?;
                rows.push(ExploreRow {
                    point,
                    feasible: true,
                    estimate: Some(est),
                });
                ranked.push((point, est));
            } else {
                rows.push(ExploreRow {
                    point,
                    feasible: false,
                    estimate: None,
                });
            }
        }
    }
    if ranked.is_empty() {
        return Err(invalid(format!(
            "no feasible point among block sizes {sizes:?}"
        )));
    }
    ranked.sort_by(rank_order);
    Ok(Exploration {
        shape: *shape,
        rows,
        ranked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(m: usize, k: usize, n: usize) -> ProblemShape {
        ProblemShape::new(m, k, n).unwrap()
    }

    fn params_bw(bw: BandwidthModel) -> ModelParams {
        ModelParams {
            bandwidth: bw,
            ..ModelParams::default()
        }
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs()
    }

    #[test]
    fn n_work_examples() {
        assert_eq!(
            n_work(&shape(96, 363, 3025), &DesignPoint::square(2, 128)),
            12
        );
        assert_eq!(n_work(&shape(50, 7, 60), &DesignPoint::square(1, 64)), 1);
        assert_eq!(
            n_work(&shape(128, 9216, 4096), &DesignPoint::square(2, 128)),
            16
        );
    }

    #[test]
    fn t_compute_examples() {
        let fc6 = t_compute(
            &shape(128, 9216, 4096),
            &DesignPoint::square(2, 128),
            8,
            2e8,
        );
        assert!(close(fc6, 16.0 * 1_179_784.0 / 2e8, 1e-15));
        assert!(close(fc6, 94.38e-3, 1e-4));
        let conv2 = t_compute(&shape(128, 1200, 729), &DesignPoint::square(2, 128), 8, 2e8);
        assert_eq!(
            n_work(&shape(128, 1200, 729), &DesignPoint::square(2, 128)),
            3
        );
        assert!(close(conv2, 3.0 * 153_736.0 / 2e8, 1e-15));
        assert!(close(conv2, 2.306e-3, 1e-4));
        let tiny = t_compute(&shape(16, 1, 16), &DesignPoint::square(1, 16), 0, 2e8);
        assert_eq!(tiny, 32.0 / 2e8);
    }

    #[test]
    fn t_trans_examples() {
        let flat = |bw: f64| {
            BandwidthModel::Table(
                crate::mac::CalibrationTable::new(
                    vec![crate::mac::CalibrationPoint {
                        n_p: 2,
                        s_i: 128,
                        bytes_per_second: bw,
                    }],
                    true,
                )
                .unwrap(),
            )
        };
        let conv1 = shape(96, 363, 3025);
        let pt = DesignPoint::square(2, 128);
        let t = t_trans(&conv1, &pt, &flat(1.6e9)).unwrap();
        assert!(close(t, 12.0 * 273.28e-6, 1e-12));
        assert!(close(t, 3.279e-3, 1e-3));
        assert_eq!(t_trans(&conv1, &pt, &flat(3.2e9)).unwrap(), t / 2.0);
        let one = shape(128, 50, 128);
        assert_eq!(
            t_trans(&one, &pt, &flat(1e9)).unwrap(),
            t_work(&one, &pt, &flat(1e9)).unwrap()
        );
    }

    #[test]
    fn fc6_upper_throughput_below_peak() {
        let est = bounds(
            &shape(128, 9216, 4096),
            &DesignPoint::square(2, 128),
            &ModelParams::default(),
        )
        .unwrap();
        assert!(
            (est.gflops_upper - 102.4).abs() <= 0.1,
            "{}",
            est.gflops_upper
        );
        assert!(est.gflops_upper > 100.9);
        assert_eq!(ModelParams::default().peak_gflops(), 102.4);
    }

    #[test]
    fn feasibility_table() {
        assert_eq!(feasible_n_p(64, 4, 32), vec![1, 2, 3, 4]);
        assert_eq!(feasible_n_p(64, 4, 100), vec![1, 2]);
        assert_eq!(feasible_n_p(64, 4, 300), Vec::<usize>::new());
        for s in 1..=300 {
            let want: Vec<usize> = match s {
                1..=64 => vec![1, 2, 3, 4],
                65..=128 => vec![1, 2],
                129..=256 => vec![1],
                _ => vec![],
            };
            assert_eq!(feasible_n_p(64, 4, s), want, "s_i={s}");
        }
    }

    #[test]
    fn constraint_rows_text() {
        assert_eq!(
            constraint_rows(64, 4),
            "  1 <= S_i <= 64: N_p in {1,2,3,4}\n  65 <= S_i <= 128: N_p in {1,2}\n  129 <= S_i <= 256: N_p in {1}\n  S_i > 256: infeasible"
        );
        assert!(matches!(
            check_point(&DesignPoint::square(3, 100), 64, 4),
            Err(Error::InfeasiblePoint { .. })
        ));
        assert!(check_point(&DesignPoint::square(2, 100), 64, 4).is_ok());
    }

    #[test]
    fn candidates() {
        assert_eq!(
            default_candidates(64),
            vec![8, 16, 32, 64, 96, 128, 192, 256]
        );
        assert_eq!(
            stepped_candidates(64, 4, 32),
            vec![32, 64, 96, 128, 160, 192, 224, 256]
        );
    }

    #[test]
    fn shape_parsing() {
        assert_eq!("8x8x8".parse::<ProblemShape>().unwrap(), shape(8, 8, 8));
        assert_eq!(
            "96*363*3025".parse::<ProblemShape>().unwrap(),
            shape(96, 363, 3025)
        );
        assert!("8x8".parse::<ProblemShape>().is_err());
        assert!("0x8x8".parse::<ProblemShape>().is_err());
    }

    #[test]
    fn unlimited_bandwidth_ranks_by_compute() {
        let ex = explore(
            &shape(128, 1200, 729),
            &params_bw(BandwidthModel::Unlimited),
            &default_candidates(64),
        )
        .unwrap();
        assert!(ex
            .ranked
            .iter()
            .all(|(_, e)| e.t_trans == 0.0 && e.t_upper == e.t_lower));
        assert!(ex
            .ranked
            .windows(2)
            .all(|w| w[0].1.t_compute <= w[1].1.t_compute));
    }

    #[test]
    fn explore_reports_infeasible_rows() {
        let ex = explore(&shape(64, 64, 64), &ModelParams::default(), &[64, 300]).unwrap();
        assert_eq!(ex.rows.len(), 8);
        assert_eq!(ex.ranked.len(), 4);
        assert!(ex
            .rows
            .iter()
            .filter(|r| r.point.s_i == 300)
            .all(|r| !r.feasible && r.estimate.is_none()));
        assert!(explore(&shape(64, 64, 64), &ModelParams::default(), &[]).is_err());
        assert!(explore(&shape(64, 64, 64), &ModelParams::default(), &[300]).is_err());
    }

    #[test]
    fn single_feasible_point() {
        let ex = explore(&shape(64, 64, 64), &ModelParams::default(), &[256]).unwrap();
        assert_eq!(ex.ranked.len(), 1);
        assert_eq!(ex.best().0, DesignPoint::square(1, 256));
    }

    proptest! {
        #[test]
        fn n_work_monotone(m in 1usize..5000, n in 1usize..5000, s in 1usize..256, n_p in 1usize..4) {
            let sh = shape(m, 10, n);
            let base = n_work(&sh, &DesignPoint::square(n_p, s));
            prop_assert!(n_work(&sh, &DesignPoint::square(n_p, s + 1)) <= base);
            prop_assert!(n_work(&sh, &DesignPoint::square(n_p + 1, s)) <= base);
        }

        #[test]
        fn estimates_are_ordered_and_below_peak(
            m in 1usize..2000, k in 1usize..5000, n in 1usize..5000, seed_s in 0usize..8,
        ) {
            let params = ModelParams::default();
            let sh = shape(m, k, n);
            let s = default_candidates(64)[seed_s];
            for pt in feasible_points(64, 4, &[s]) {
                let e = bounds(&sh, &pt, &params).unwrap();
                prop_assert!(e.t_lower <= e.t_upper && e.t_lower > 0.0);
                let own_peak = 2.0 * params.f_acc * (pt.n_p * pt.pes_per_array(64, 4)) as f64 / 1e9;
                prop_assert!(e.gflops_upper <= own_peak * (1.0 + 1e-12));
                prop_assert!(e.gflops_upper <= params.peak_gflops() * (1.0 + 1e-12));
            }
        }
    }
}
