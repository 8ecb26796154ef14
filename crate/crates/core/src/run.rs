//! End-to-end runs: resolve a configuration, simulate it, check it against
//! the reference GEMM and the analytical bounds, and build the report.

use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::{self, check_point, DesignPoint, ModelEstimate, ModelParams, ProblemShape};
use crate::blockmm::{reference_gemm, Matrix};
use crate::error::{invalid, Result};
use crate::pe::{
    simulate_gemm, ArrayEvent, ArrayRunStats, MpeLayout, PortMode, SimConfig, SimReport,
};
use crate::presets::{preset, ALEXNET};

/// Relative tolerance of simulated output against the reference GEMM.
pub const OUTPUT_REL_TOL: f64 = 1e-4;
/// The simulated time may undercut `T_lower` by this fraction.
pub const LOWER_BOUND_SLACK: f64 = 1e-3;
/// Floating-point summation slack on `T_upper` (relative).
pub const UPPER_BOUND_FP_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub shape: Option<ProblemShape>,
    pub preset: Option<String>,
    pub n_p: Option<usize>,
    pub s_i: Option<usize>,
    pub s_j: Option<usize>,
    pub auto: bool,
    pub params: ModelParams,
    /// Block sizes searched by `auto`; defaults to the standard grid for `P`.
    pub candidates: Option<Vec<usize>>,
    pub seed: u64,
    /// Largest `M·K·N` that is simulated numerically and checked.
    pub verify_max_macs: u64,
    pub stealing: bool,
    pub port: PortMode,
    pub mc_depth: Option<usize>,
    pub drain_width: usize,
    pub trace: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            shape: None,
            preset: None,
            n_p: None,
            s_i: None,
            s_j: None,
            auto: false,
            params: ModelParams::default(),
            candidates: None,
            seed: 0,
            verify_max_macs: 1 << 28,
            stealing: true,
            port: PortMode::PerArray,
            mc_depth: None,
            drain_width: 1,
            trace: false,
        }
    }
}

impl RunConfig {
    pub fn resolve_shape(&self) -> Result<ProblemShape> {
        match (&self.shape, &self.preset) {
            (Some(_), Some(_)) => Err(invalid("give either a shape or a preset, not both")),
            (Some(s), None) => ProblemShape::new(s.m, s.k, s.n),
            (None, Some(name)) => Ok(preset(name)?.shape()),
            (None, None) => Err(invalid("no problem shape or preset given")),
        }
    }

    pub fn candidates(&self) -> Vec<usize> {
        self.candidates
            .clone()
            .unwrap_or_else(|| analytic::default_candidates(self.params.p))
    }

    /// The design point to run, explored when `auto` is set.
    pub fn resolve_point(&self, shape: &ProblemShape) -> Result<(DesignPoint, bool)> {
        let p = &self.params;
        if self.auto {
            if self.n_p.is_some() || self.s_i.is_some() || self.s_j.is_some() {
                return Err(invalid(
                    "auto selection conflicts with an explicit n_p/s_i/s_j",
                ));
            }
            let best = analytic::explore(shape, p, &self.candidates())?.best().0;
            return Ok((best, true));
        }
        let (Some(n_p), Some(s_i)) = (self.n_p, self.s_i) else {
            return Err(invalid("need n_p and s_i, or auto"));
        };
        let point = DesignPoint {
            n_p,
            s_i,
            s_j: self.s_j.unwrap_or(s_i),
        };
        check_point(&point, p.p, p.p_m)?;
        Ok((point, false))
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            stage_fmac: self.params.stage_fmac,
            mc_depth: self.mc_depth.unwrap_or(self.params.p * self.params.p_m),
            drain_width: self.drain_width,
            f_acc: self.params.f_acc,
            port: self.port,
            stealing: self.stealing,
            trace: self.trace,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayoutSummary {
    pub mux: Vec<bool>,
    pub array_pes: Vec<usize>,
    pub scheduled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSummary {
    pub functional: bool,
    pub tiles: usize,
    pub total_cycles: f64,
    pub total_time_s: f64,
    pub gflops: f64,
    pub steals: usize,
    pub arrays: Vec<ArrayRunStats>,
}

impl SimSummary {
    fn from_report<T>(r: &SimReport<T>) -> Self {
        Self {
            functional: r.output.is_some(),
            tiles: r.tiles,
            total_cycles: r.total_cycles,
            total_time_s: r.total_time_s,
            gflops: r.gflops,
            steals: r.steals.len(),
            arrays: r.arrays.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Verification {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bracket {
    pub t_lower: f64,
    pub t_upper: f64,
    pub simulated: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
}

impl Bracket {
    pub fn check(est: &ModelEstimate, simulated: f64) -> Self {
        Self {
            t_lower: est.t_lower,
            t_upper: est.t_upper,
            simulated,
            lower_ok: simulated >= est.t_lower * (1.0 - LOWER_BOUND_SLACK),
            upper_ok: simulated <= est.t_upper * (1.0 + UPPER_BOUND_FP_SLACK),
        }
    }

    pub fn holds(&self) -> bool {
        self.lower_ok && self.upper_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub shape: ProblemShape,
    pub preset: Option<String>,
    pub point: DesignPoint,
    pub auto_selected: bool,
    pub params: ModelParams,
    pub port: PortMode,
    pub stealing: bool,
    pub seed: u64,
    pub layout: LayoutSummary,
    pub estimate: ModelEstimate,
    pub simulation: SimSummary,
    pub verification: Option<Verification>,
    pub bracket: Bracket,
    pub violations: Vec<String>,
    pub timestamp: u64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON with the timestamp zeroed, for byte-wise comparison.
    pub fn to_json_stable(&self) -> String {
        Self {
            timestamp: 0,
            ..self.clone()
        }
        .to_json()
    }

    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub trace: Vec<ArrayEvent>,
}

fn operands(shape: &ProblemShape, seed: u64) -> Result<(Matrix<f32>, Matrix<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Matrix::random(shape.m, shape.k, &mut rng)?;
    let b = Matrix::random(shape.k, shape.n, &mut rng)?;
    Ok((a, b))
}

/// Simulates one point, timing only.
pub fn simulate_point(
    shape: &ProblemShape,
    point: &DesignPoint,
    cfg: &RunConfig,
) -> Result<SimSummary> {
    let p = &cfg.params;
    let sim = SimConfig {
        trace: false,
        ..cfg.sim_config()
    };
    let r = simulate_gemm::<f32>(
        (shape.m, shape.k, shape.n),
        (point.s_i, point.s_j),
        point.n_p,
        p.p,
        p.p_m,
        None,
        &p.bandwidth,
        &sim,
    )?;
    Ok(SimSummary::from_report(&r))
}

pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    let shape = cfg.resolve_shape()?;
    let (point, auto_selected) = cfg.resolve_point(&shape)?;
    let p = &cfg.params;
    let estimate = analytic::bounds(&shape, &point, p)?;
    let layout = MpeLayout::for_arrays(p.p_m, p.p, point.n_p)?;
    let sim_cfg = cfg.sim_config();

    let functional = shape.macs() <= cfg.verify_max_macs as u128;
    let data = if functional {
        Some(operands(&shape, cfg.seed)?)
    } else {
        None
    };
    let sim = simulate_gemm(
        (shape.m, shape.k, shape.n),
        (point.s_i, point.s_j),
        point.n_p,
        p.p,
        p.p_m,
        data.as_ref().map(|(a, b)| (a, b)),
        &p.bandwidth,
        &sim_cfg,
    )?;

    let mut violations = Vec::new();
    let verification = match (&data, &sim.output) {
        (Some((a, b)), Some(out)) => {
            let err = out.max_rel_error(&reference_gemm(a, b)?)?;
            let passed = err <= OUTPUT_REL_TOL;
            if !passed {
                violations.push(format!(
                    "output differs from reference GEMM: max relative error {err:e}"
                ));
            }
            Some(Verification {
                max_rel_error: err,
                tolerance: OUTPUT_REL_TOL,
                passed,
            })
        }
        _ => None,
    };

    let bracket = Bracket::check(&estimate, sim.total_time_s);
    // The bounds assume private per-array ports.
    if cfg.port == PortMode::PerArray {
        if !bracket.lower_ok {
            violations.push(format!(
                "simulated time {:e} s below T_lower {:e} s",
                bracket.simulated, bracket.t_lower
            ));
        }
        if !bracket.upper_ok {
            violations.push(format!(
                "simulated time {:e} s above T_upper {:e} s",
                bracket.simulated, bracket.t_upper
            ));
        }
    }
    let charged = crate::pe::block_cycles(point.s_i, point.s_j, shape.k, p.stage_fmac);
    if let Some(b) = sim.blocks.iter().find(|b| b.timing.total != charged) {
        violations.push(format!(
            "block {} charged {} cycles, expected {charged}",
            b.item.id, b.timing.total
        ));
    }

    let report = RunReport {
        shape,
        preset: cfg.preset.clone(),
        point,
        auto_selected,
        params: p.clone(),
        port: cfg.port,
        stealing: cfg.stealing,
        seed: cfg.seed,
        layout: LayoutSummary {
            mux: layout.mux.clone(),
            array_pes: layout.arrays.iter().map(|a| a.pe_count).collect(),
            scheduled: point.n_p,
        },
        estimate,
        simulation: SimSummary::from_report(&sim),
        verification,
        bracket,
        violations,
        timestamp: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    Ok(RunOutcome {
        report,
        trace: sim.trace,
    })
}

/// One row of an exploration table, flattened for CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExploreRecord {
    pub rank: Option<usize>,
    pub n_p: usize,
    pub s_i: usize,
    pub s_j: usize,
    pub feasible: bool,
    pub n_work: Option<usize>,
    pub bandwidth: Option<f64>,
    pub t_work_s: Option<f64>,
    pub t_trans_s: Option<f64>,
    pub t_lower_s: Option<f64>,
    pub t_upper_s: Option<f64>,
    pub gflops_lower: Option<f64>,
    pub gflops_upper: Option<f64>,
    pub sim_time_s: Option<f64>,
    pub sim_gflops: Option<f64>,
    pub sim_within_bounds: Option<bool>,
}

/// Tabulates an exploration; `sims` holds simulated results for feasible
/// points, aligned with `ex.rows`.
pub fn explore_records(
    ex: &analytic::Exploration,
    sims: &[Option<SimSummary>],
) -> Vec<ExploreRecord> {
    ex.rows
        .iter()
        .enumerate()
        .map(|(idx, row)| {
            let e = row.estimate;
            let sim = sims.get(idx).and_then(|s| s.as_ref());
            ExploreRecord {
                rank: ex
                    .ranked
                    .iter()
                    .position(|(pt, _)| *pt == row.point)
                    .map(|r| r + 1),
                n_p: row.point.n_p,
                s_i: row.point.s_i,
                s_j: row.point.s_j,
                feasible: row.feasible,
                n_work: e.map(|e| e.n_work),
                bandwidth: e.and_then(|e| e.bandwidth),
                t_work_s: e.map(|e| e.t_work),
                t_trans_s: e.map(|e| e.t_trans),
                t_lower_s: e.map(|e| e.t_lower),
                t_upper_s: e.map(|e| e.t_upper),
                gflops_lower: e.map(|e| e.gflops_lower),
                gflops_upper: e.map(|e| e.gflops_upper),
                sim_time_s: sim.map(|s| s.total_time_s),
                sim_gflops: sim.map(|s| s.gflops),
                sim_within_bounds: sim
                    .zip(e)
                    .map(|(s, e)| Bracket::check(&e, s.total_time_s).holds()),
            }
        })
        .collect()
}

/// Best point per AlexNet layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerChoice {
    pub layer: &'static str,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub n_p: usize,
    pub s_i: usize,
    pub t_lower_s: f64,
    pub t_upper_s: f64,
    pub gflops_lower: f64,
    pub gflops_upper: f64,
}

pub fn layer_table(params: &ModelParams, candidates: &[usize]) -> Result<Vec<LayerChoice>> {
    ALEXNET
        .iter()
        .map(|l| {
            let (pt, e) = analytic::explore(&l.shape(), params, candidates)?.best();
            Ok(LayerChoice {
                layer: l.name,
                m: l.m,
                k: l.k,
                n: l.n,
                n_p: pt.n_p,
                s_i: pt.s_i,
                t_lower_s: e.t_lower,
                t_upper_s: e.t_upper,
                gflops_lower: e.gflops_lower,
                gflops_upper: e.gflops_upper,
            })
        })
        .collect()
}

pub fn to_csv<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| crate::error::Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn small(n_p: usize, s_i: usize) -> RunConfig {
        RunConfig {
            shape: Some(ProblemShape::new(8, 8, 8).unwrap()),
            n_p: Some(n_p),
            s_i: Some(s_i),
            ..RunConfig::default()
        }
    }

    #[test]
    fn tiny_run_matches_oracle() {
        let out = run(&small(1, 8)).unwrap();
        let v = out.report.verification.unwrap();
        assert!(v.passed);
        assert_eq!(v.max_rel_error, 0.0);
        assert!(out.report.ok(), "{:?}", out.report.violations);
    }

    #[test]
    fn infeasible_point_lists_rows() {
        match run(&small(3, 100)) {
            Err(Error::InfeasiblePoint { rows, .. }) => {
                assert!(rows.contains("65 <= S_i <= 128: N_p in {1,2}"))
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn config_errors() {
        assert!(run(&RunConfig::default()).is_err());
        let both = RunConfig {
            preset: Some("conv-2".into()),
            ..small(1, 8)
        };
        assert!(run(&both).is_err());
        let conflict = RunConfig {
            auto: true,
            ..small(1, 8)
        };
        assert!(run(&conflict).is_err());
        let missing = RunConfig {
            n_p: None,
            ..small(1, 8)
        };
        assert!(run(&missing).is_err());
    }

    #[test]
    fn auto_picks_explore_argmin() {
        let cfg = RunConfig {
            preset: Some("conv-5".into()),
            auto: true,
            verify_max_macs: 0,
            ..RunConfig::default()
        };
        let out = run(&cfg).unwrap();
        let best = analytic::explore(
            &cfg.resolve_shape().unwrap(),
            &cfg.params,
            &cfg.candidates(),
        )
        .unwrap()
        .best()
        .0;
        assert_eq!(out.report.point, best);
        assert!(out.report.auto_selected);
        assert!(analytic::is_feasible(&best, 64, 4));
        assert!(out.report.verification.is_none());
    }

    #[test]
    fn config_from_toml_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"preset": "fc-8", "auto": true}"#).unwrap();
        assert_eq!(cfg.params, ModelParams::default());
        assert!(cfg.stealing);
    }

    #[test]
    fn explore_records_csv() {
        let shape = ProblemShape::new(128, 1200, 729).unwrap();
        let ex = analytic::explore(&shape, &ModelParams::default(), &[64, 128]).unwrap();
        let recs = explore_records(&ex, &[]);
        assert_eq!(recs.len(), 8);
        assert_eq!(recs.iter().filter(|r| r.rank == Some(1)).count(), 1);
        let csv = to_csv(&recs).unwrap();
        assert!(csv.starts_with("rank,n_p,s_i,s_j,feasible,n_work,bandwidth,"));
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn layer_table_has_all_layers() {
        let t = layer_table(&ModelParams::default(), &analytic::default_candidates(64)).unwrap();
        assert_eq!(t.len(), 8);
        assert!(t.iter().all(|c| c.gflops_upper <= 102.4 + 1e-9));
    }
}
