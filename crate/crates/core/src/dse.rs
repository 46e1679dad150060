//! Design-space exploration over per-die parallelism `(n, m)`.
//!
//! Every die of an FPGA is identical here, so one die is solved and the
//! result replicated. Candidates are scored by the mean modeled NVTPS over
//! a profile of batch statistics with all FPGAs of the platform busy.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DatasetShape, GnnModel};
use crate::perfmodel::{
    evaluate_batch, resource_check, throughput_nvtps, AcceleratorConfig, DieMeta, PlatformMeta, ResourceCoeffs,
};
use crate::sampler::BatchStats;
use crate::simulator::effective_pcie_bandwidth;

/// Cap on either PE count when a resource coefficient is zero.
const MAX_PES: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SearchSpace {
    pub n_max: usize,
    pub m_max: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lattice {
    /// Every integer PE count.
    #[default]
    Linear,
    /// PE counts restricted to powers of two.
    PowerOfTwo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DseOptions {
    /// Evaluate the full `1..=n_max x 1..=m_max` rectangle.
    pub exhaustive: bool,
    pub lattice: Lattice,
    pub n_limit: Option<usize>,
    pub m_limit: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DsePoint {
    /// Per-die configuration.
    pub config: AcceleratorConfig,
    pub whole_n: usize,
    pub whole_m: usize,
    pub feasible: bool,
    pub dsp_util: f64,
    pub lut_util: f64,
    /// Mean NVTPS over the profile; `None` for infeasible points.
    pub nvtps: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DseResult {
    pub search_space: SearchSpace,
    /// Evaluated points in enumeration order.
    pub points: Vec<DsePoint>,
    /// Feasible points, best first; ties go to smaller `n`, then smaller `m`.
    pub ranked: Vec<DsePoint>,
}

impl DseResult {
    pub fn optimum(&self) -> &DsePoint {
        &self.ranked[0]
    }

    /// Rank (0 = best) of a per-die configuration, if it was evaluated and feasible.
    pub fn rank_of(&self, cfg: AcceleratorConfig) -> Option<usize> {
        self.ranked.iter().position(|p| p.config == cfg)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "n,m,whole_n,whole_m,feasible,dsp_util,lut_util,nvtps")?;
        for p in &self.points {
            let nvtps = p.nvtps.map(|v| format!("{v:.6e}")).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6},{}",
                p.config.n, p.config.m, p.whole_n, p.whole_m, p.feasible, p.dsp_util, p.lut_util, nvtps
            )?;
        }
        Ok(())
    }
}

fn feasible(coeffs: &ResourceCoeffs, die: &DieMeta, n: usize, m: usize) -> bool {
    coeffs.dsp(AcceleratorConfig::new(n, m)) <= die.n_dsp && coeffs.lut(AcceleratorConfig::new(n, m)) <= die.n_lut
}

/// Largest `x` in `0..=MAX_PES` with `ok(x)`, for `ok` monotone decreasing and `ok(0)` assumed.
fn largest_feasible(ok: impl Fn(usize) -> bool) -> usize {
    if !ok(1) {
        return 0;
    }
    let mut lo = 1;
    let mut hi = 2;
    while hi <= MAX_PES && ok(hi) {
        lo = hi;
        hi *= 2;
    }
    let mut hi = hi.min(MAX_PES + 1);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// `n_max` with one update PE and `m_max` with one scatter-gather PE.
pub fn construct_search_space(coeffs: &ResourceCoeffs, die: &DieMeta) -> Result<SearchSpace> {
    coeffs.validate()?;
    if !feasible(coeffs, die, 1, 1) {
        let update_alone = coeffs.lambda1 <= die.n_dsp && coeffs.rho1 <= die.n_lut;
        return Err(Error::EmptyDesignSpace(if update_alone {
            "no scatter-gather PE fits on a die (n_max = 0)".to_string()
        } else {
            "not even one PE of each kind fits on a die".to_string()
        }));
    }
    Ok(SearchSpace {
        n_max: largest_feasible(|n| feasible(coeffs, die, n, 1)),
        m_max: largest_feasible(|m| feasible(coeffs, die, 1, m)),
    })
}

fn max_m_for(coeffs: &ResourceCoeffs, die: &DieMeta, n: usize) -> usize {
    largest_feasible(|m| feasible(coeffs, die, n, m))
}

fn powers_of_two(limit: usize) -> impl Iterator<Item = usize> {
    std::iter::successors(Some(1usize), |&x| x.checked_mul(2)).take_while(move |&x| x <= limit)
}

/// One entry of a DSE profile: a model and a representative batch of it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Workload {
    pub model: GnnModel,
    pub stats: BatchStats,
}

impl Workload {
    pub fn sampled(model: &GnnModel, profile: &[BatchStats]) -> Vec<Workload> {
        profile
            .iter()
            .map(|stats| Workload {
                model: model.clone(),
                stats: stats.clone(),
            })
            .collect()
    }

    /// Expected batches of `model` on each dataset shape, with the layer
    /// widths taken from the shape.
    pub fn expected_suite(
        model: &GnnModel,
        shapes: &[DatasetShape],
        beta: f64,
        feat_bytes: u64,
    ) -> Result<Vec<Workload>> {
        shapes
            .iter()
            .map(|shape| {
                let model = GnnModel {
                    dims: shape.dims.clone(),
                    ..model.clone()
                };
                model.validate()?;
                let stats = BatchStats::expected(shape, &model, beta, feat_bytes);
                Ok(Workload { model, stats })
            })
            .collect()
    }
}

/// Mean over the profile of the NVTPS reached when every FPGA of the
/// platform trains on that batch concurrently. Host sampling does not
/// depend on the accelerator and is left out.
pub fn profile_nvtps(profile: &[Workload], cfg: AcceleratorConfig, platform: &PlatformMeta) -> Result<f64> {
    if profile.is_empty() {
        return Err(Error::config("batch profile is empty"));
    }
    let p = platform.num_fpgas;
    let grant = effective_pcie_bandwidth(
        &vec![platform.pcie_link_bw; p],
        platform.pcie_link_bw,
        platform.cpu_mem_bw,
    )[0];
    let mut sum = 0.0;
    for w in profile {
        let cost = evaluate_batch(&w.stats, &w.model, cfg, platform, grant)?;
        sum += throughput_nvtps(
            p as f64 * w.stats.vertices_traversed(),
            cost.t_gnn + cost.t_gradient_sync,
        )?;
    }
    Ok(sum / profile.len() as f64)
}

fn rank_order(a: &DsePoint, b: &DsePoint) -> Ordering {
    let (x, y) = (
        a.nvtps.unwrap_or(f64::NEG_INFINITY),
        b.nvtps.unwrap_or(f64::NEG_INFINITY),
    );
    y.total_cmp(&x)
        .then(a.config.n.cmp(&b.config.n))
        .then(a.config.m.cmp(&b.config.m))
}

pub fn sweep(
    profile: &[Workload],
    platform: &PlatformMeta,
    coeffs: &ResourceCoeffs,
    options: DseOptions,
) -> Result<DseResult> {
    platform.validate()?;
    for w in profile {
        w.model.validate()?;
    }
    if profile.is_empty() {
        return Err(Error::config("batch profile is empty"));
    }
    let die = &platform.die;
    let space = construct_search_space(coeffs, die)?;
    let n_hi = options.n_limit.map_or(space.n_max, |l| l.min(space.n_max));
    let m_cap = options.m_limit.unwrap_or(usize::MAX);
    let dies = platform.dies_per_fpga;

    let evaluate = |cfg: AcceleratorConfig| -> Result<DsePoint> {
        let usage = resource_check(cfg, coeffs, die)?;
        let nvtps = if usage.feasible {
            Some(profile_nvtps(profile, cfg, platform)?)
        } else {
            None
        };
        let (whole_n, whole_m) = cfg.whole_fpga(dies);
        Ok(DsePoint {
            config: cfg,
            whole_n,
            whole_m,
            feasible: usage.feasible,
            dsp_util: usage.dsp_util,
            lut_util: usage.lut_util,
            nvtps,
        })
    };
    let evaluate_all =
        |cfgs: Vec<AcceleratorConfig>| -> Result<Vec<DsePoint>> { cfgs.into_par_iter().map(evaluate).collect() };

    let ns: Vec<usize> = match options.lattice {
        Lattice::Linear => (1..=n_hi).collect(),
        Lattice::PowerOfTwo => powers_of_two(n_hi).collect(),
    };

    let mut points = Vec::new();
    if options.exhaustive {
        let m_hi = space.m_max.min(m_cap);
        let cfgs = ns
            .iter()
            .flat_map(|&n| {
                let ms: Vec<usize> = match options.lattice {
                    Lattice::Linear => (1..=m_hi).collect(),
                    Lattice::PowerOfTwo => powers_of_two(m_hi).collect(),
                };
                ms.into_iter().map(move |m| AcceleratorConfig::new(n, m))
            })
            .collect();
        points = evaluate_all(cfgs)?;
    } else {
        for &n in &ns {
            let m_hi = max_m_for(coeffs, die, n).min(m_cap);
            if m_hi == 0 {
                continue;
            }
            let mut ms: Vec<usize> = powers_of_two(m_hi).collect();
            if options.lattice == Lattice::Linear && ms.last() != Some(&m_hi) {
                ms.push(m_hi);
            }
            let coarse = evaluate_all(ms.iter().map(|&m| AcceleratorConfig::new(n, m)).collect())?;
            let best = coarse.iter().min_by(|a, b| rank_order(a, b)).map(|p| p.config.m);
            points.extend(coarse);
            if let (Lattice::Linear, Some(best)) = (options.lattice, best) {
                let lo = (best * 3).div_ceil(4).max(1);
                let hi = (best * 5 / 4).min(m_hi);
                let refine: Vec<_> = (lo..=hi)
                    .filter(|m| !ms.contains(m))
                    .map(|m| AcceleratorConfig::new(n, m))
                    .collect();
                points.extend(evaluate_all(refine)?);
            }
        }
    }

    let mut ranked: Vec<DsePoint> = points.iter().filter(|p| p.feasible).copied().collect();
    if ranked.is_empty() {
        return Err(Error::EmptyDesignSpace(
            "no feasible configuration within the limits".into(),
        ));
    }
    ranked.sort_by(rank_order);
    Ok(DseResult {
        search_space: space,
        points,
        ranked,
    })
}

fn solve_2x2(a: [[f64; 2]; 2], b: [f64; 2]) -> Result<(f64, f64)> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let scale = a.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    if det.abs() <= 1e-12 * scale * scale {
        return Err(Error::Calibration("calibration points are linearly dependent".into()));
    }
    let x = (b[0] * a[1][1] - a[0][1] * b[1]) / det;
    let y = (a[0][0] * b[1] - b[0] * a[1][0]) / det;
    Ok((x, y))
}

/// Solves `λ1·m + λ2·n = util·n_dsp` through two measured points.
pub fn calibrate_dsp_coeffs(points: [(AcceleratorConfig, f64); 2], n_dsp: f64) -> Result<(f64, f64)> {
    let rows = points.map(|(c, _)| [c.m as f64, c.n as f64]);
    let rhs = points.map(|(_, u)| u * n_dsp);
    solve_2x2(rows, rhs)
}

/// Solves `ρ1·m + ρ2·(n + r·n·log2 n) = util·n_lut` with `ρ3 = r·ρ2`.
pub fn calibrate_lut_coeffs(
    points: [(AcceleratorConfig, f64); 2],
    n_lut: f64,
    rho3_ratio: f64,
) -> Result<(f64, f64, f64)> {
    let rows = points.map(|(c, _)| {
        let n = c.n as f64;
        [c.m as f64, n + rho3_ratio * n * n.log2()]
    });
    let rhs = points.map(|(_, u)| u * n_lut);
    let (rho1, rho2) = solve_2x2(rows, rhs)?;
    Ok((rho1, rho2, rho3_ratio * rho2))
}

/// Reported utilization of the two saturating U250 designs, as whole-FPGA
/// `(n, m)`, DSP fraction and LUT fraction.
pub const U250_REFERENCE_POINTS: [((usize, usize), f64, f64); 2] = [((8, 2048), 0.90, 0.72), ((16, 1024), 0.56, 0.65)];

impl ResourceCoeffs {
    /// Coefficients fitted to the U250 reference designs: DSP terms from
    /// the whole-chip DSP budget, LUT terms per die with `ρ3 = ρ2 / 4`.
    pub fn alveo_u250_fitted() -> ResourceCoeffs {
        let platform = PlatformMeta::alveo_u250(1);
        let dies = platform.dies_per_fpga;
        let per_die = U250_REFERENCE_POINTS.map(|((n, m), dsp, lut)| {
            (
                AcceleratorConfig::from_whole_fpga(n, m, dies).expect("reference points split over dies"),
                dsp,
                lut,
            )
        });
        let (lambda1, lambda2) = calibrate_dsp_coeffs(per_die.map(|(c, d, _)| (c, d)), platform.die.n_dsp)
            .expect("reference points are independent");
        let (rho1, rho2, rho3) = calibrate_lut_coeffs(per_die.map(|(c, _, l)| (c, l)), platform.die.n_lut, 0.25)
            .expect("reference points are independent");
        ResourceCoeffs {
            lambda1,
            lambda2,
            rho1,
            rho2,
            rho3,
        }
    }
}
