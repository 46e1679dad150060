//! Analytical resource and performance model of one accelerator
//! configuration executing one mini-batch.
//!
//! Every function here is pure. Times are in seconds, bandwidths in
//! bytes/s, frequencies in Hz.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GnnModel;
use crate::sampler::BatchStats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DieMeta {
    pub n_dsp: f64,
    pub n_lut: f64,
    /// DDR bandwidth of the channel attached to this die.
    pub ddr_bw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformMeta {
    pub num_fpgas: usize,
    pub dies_per_fpga: usize,
    pub die: DieMeta,
    pub freq: f64,
    /// Bandwidth of one CPU-FPGA PCIe link.
    pub pcie_link_bw: f64,
    pub cpu_mem_bw: f64,
    /// Edges sampled per second by the host for one FPGA's batch stream.
    pub sampler_rate: f64,
    pub pe_simd: f64,
    pub feat_bytes: f64,
    /// Backward-pass time as a multiple of the forward pass.
    pub bp_factor: f64,
}

impl PlatformMeta {
    /// Alveo U250 cards (four dies, one DDR channel each) behind an
    /// EPYC 7763 host.
    pub fn alveo_u250(num_fpgas: usize) -> Self {
        PlatformMeta {
            num_fpgas,
            dies_per_fpga: 4,
            die: DieMeta {
                n_dsp: 3072.0,
                n_lut: 423_000.0,
                ddr_bw: 19.25e9,
            },
            freq: 300e6,
            pcie_link_bw: 16e9,
            cpu_mem_bw: 205e9,
            sampler_rate: 45e6,
            pe_simd: 16.0,
            feat_bytes: 4.0,
            bp_factor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("platform.fpgas", self.num_fpgas as f64),
            ("platform.dies_per_fpga", self.dies_per_fpga as f64),
            ("platform.dsp_per_die", self.die.n_dsp),
            ("platform.lut_per_die", self.die.n_lut),
            ("platform.ddr_gbps_per_die", self.die.ddr_bw),
            ("platform.freq_mhz", self.freq),
            ("platform.pcie_gbps", self.pcie_link_bw),
            ("platform.cpu_mem_gbps", self.cpu_mem_bw),
            ("platform.sampler_medges_per_s", self.sampler_rate),
            ("platform.pe_simd", self.pe_simd),
            ("platform.feat_bytes", self.feat_bytes),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(Error::config(format!("{name}: must be positive, got {value}")));
            }
        }
        if !(self.bp_factor >= 0.0) {
            return Err(Error::config("platform.bp_factor: must be non-negative"));
        }
        let lanes = 512.0 / (8.0 * self.feat_bytes);
        if self.pe_simd != lanes {
            return Err(Error::config(format!(
                "platform.pe_simd: a 512-bit datapath holds {lanes} lanes of {} B, got {}",
                self.feat_bytes, self.pe_simd
            )));
        }
        Ok(())
    }

    pub fn fpga_ddr_bw(&self) -> f64 {
        self.die.ddr_bw * self.dies_per_fpga as f64
    }
}

/// Per-die parallelism: `n` scatter-gather PEs and `m` update PEs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AcceleratorConfig {
    pub n: usize,
    pub m: usize,
}

impl AcceleratorConfig {
    pub fn new(n: usize, m: usize) -> Self {
        AcceleratorConfig { n, m }
    }

    /// Splits whole-FPGA totals evenly across `dies`.
    pub fn from_whole_fpga(n: usize, m: usize, dies: usize) -> Result<Self> {
        if dies == 0 || !n.is_multiple_of(dies) || !m.is_multiple_of(dies) {
            return Err(Error::config(format!(
                "({n}, {m}) does not split evenly over {dies} dies"
            )));
        }
        Ok(AcceleratorConfig::new(n / dies, m / dies))
    }

    pub fn whole_fpga(&self, dies: usize) -> (usize, usize) {
        (self.n * dies, self.m * dies)
    }
}

/// DSP and LUT cost per PE: `λ1·m + λ2·n <= N_DSP` and
/// `ρ1·m + ρ2·n + ρ3·n·log2(n) <= N_LUT`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceCoeffs {
    pub lambda1: f64,
    pub lambda2: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub rho3: f64,
}

impl ResourceCoeffs {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("resources.lambda1", self.lambda1),
            ("resources.lambda2", self.lambda2),
            ("resources.rho1", self.rho1),
            ("resources.rho2", self.rho2),
            ("resources.rho3", self.rho3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "{name}: must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn dsp(&self, cfg: AcceleratorConfig) -> f64 {
        self.lambda1 * cfg.m as f64 + self.lambda2 * cfg.n as f64
    }

    pub fn lut(&self, cfg: AcceleratorConfig) -> f64 {
        let n = cfg.n as f64;
        self.rho1 * cfg.m as f64 + self.rho2 * n + self.rho3 * n * n.log2()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResourceUsage {
    pub feasible: bool,
    pub dsp_util: f64,
    pub lut_util: f64,
}

pub fn resource_check(cfg: AcceleratorConfig, coeffs: &ResourceCoeffs, die: &DieMeta) -> Result<ResourceUsage> {
    if cfg.n == 0 || cfg.m == 0 {
        return Err(Error::config(format!(
            "accelerator needs at least one PE of each kind, got (n={}, m={})",
            cfg.n, cfg.m
        )));
    }
    let dsp = coeffs.dsp(cfg);
    let lut = coeffs.lut(cfg);
    Ok(ResourceUsage {
        feasible: dsp <= die.n_dsp && lut <= die.n_lut,
        dsp_util: dsp / die.n_dsp,
        lut_util: lut / die.n_lut,
    })
}

/// Feature loading: the resident share `beta` streams from DDR, the rest
/// over PCIe.
pub fn t_load(v_prev: f64, beta: f64, f: f64, feat_bytes: f64, bw_ddr: f64, bw_pcie_eff: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config(format!("beta {beta} outside [0, 1]")));
    }
    if !(bw_ddr > 0.0) || !(bw_pcie_eff > 0.0) {
        return Err(Error::config(format!(
            "bandwidths must be positive (ddr {bw_ddr}, pcie {bw_pcie_eff})"
        )));
    }
    let bytes = v_prev * f * feat_bytes;
    Ok(bytes * beta / bw_ddr + bytes * (1.0 - beta) / bw_pcie_eff)
}

/// Edge-wise aggregation on `n` SIMD scatter-gather PEs.
pub fn t_compute_aggregate(edges: f64, f: f64, n: f64, pe_simd: f64, freq: f64) -> f64 {
    edges * f / (n * pe_simd * freq)
}

/// Dense feature transform on `m` update PEs.
pub fn t_update(v: f64, f_in: f64, f_out: f64, m: f64, freq: f64) -> f64 {
    v * f_in * f_out / (m * freq)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCost {
    pub t_load: f64,
    pub t_compute: f64,
    pub t_aggregate: f64,
    pub t_update: f64,
    /// Aggregation and update are pipelined, so the slower one sets the pace.
    pub t_layer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostBreakdown {
    /// Index `l - 1` holds layer `l`.
    pub layers: Vec<LayerCost>,
    pub t_fp: f64,
    pub t_lc: f64,
    pub t_bp: f64,
    pub t_gnn: f64,
    pub t_sampling: f64,
    pub t_execution: f64,
    pub t_gradient_sync: f64,
    /// Single-FPGA iteration time: `t_execution + t_gradient_sync`.
    pub t_parallel: f64,
}

/// Gather plus broadcast of every weight over one PCIe link.
pub fn gradient_sync_time(model: &GnnModel, platform: &PlatformMeta) -> f64 {
    2.0 * model.weight_count() as f64 * platform.feat_bytes / platform.pcie_link_bw
}

/// Cost of one batch on one FPGA whose PCIe link currently delivers
/// `bw_pcie_eff`. Work of each layer is split evenly across dies; layers
/// above the first read intermediate features from local memory.
pub fn evaluate_batch(
    stats: &BatchStats,
    model: &GnnModel,
    cfg: AcceleratorConfig,
    platform: &PlatformMeta,
    bw_pcie_eff: f64,
) -> Result<CostBreakdown> {
    let num_layers = model.num_layers();
    if stats.sizes.len() != num_layers + 1 || stats.edge_counts.len() != num_layers {
        return Err(Error::Shape(format!(
            "batch stats describe {} layers, model has {num_layers}",
            stats.edge_counts.len()
        )));
    }
    if cfg.n == 0 || cfg.m == 0 {
        return Err(Error::config("accelerator needs at least one PE of each kind"));
    }
    let dies = platform.dies_per_fpga as f64;
    let (n, m) = (cfg.n as f64, cfg.m as f64);

    let mut layers = Vec::with_capacity(num_layers);
    for l in 1..=num_layers {
        let f_in = model.dims[l - 1] as f64;
        let f_out = model.dims[l] as f64;
        let beta = if l == 1 && !stats.feature_dim_split {
            stats.beta
        } else {
            1.0
        };
        let load = t_load(
            stats.sizes[l - 1] / dies,
            beta,
            f_in,
            platform.feat_bytes,
            platform.die.ddr_bw,
            bw_pcie_eff / dies,
        )?;
        let compute = t_compute_aggregate(
            stats.edge_counts[l - 1] / dies,
            f_in,
            n,
            platform.pe_simd,
            platform.freq,
        );
        let update = t_update(stats.sizes[l] / dies, f_in, f_out, m, platform.freq);
        let aggregate = load.max(compute);
        layers.push(LayerCost {
            t_load: load,
            t_compute: compute,
            t_aggregate: aggregate,
            t_update: update,
            t_layer: aggregate.max(update),
        });
    }

    let t_fp: f64 = layers.iter().map(|c| c.t_layer).sum();
    let t_bp = platform.bp_factor * t_fp;
    let t_lc = stats.sizes[num_layers] * model.dims[num_layers] as f64 / (m * dies * platform.freq);
    let t_gnn = t_fp + t_lc + t_bp;
    let t_sampling = stats.sampled_edges() / platform.sampler_rate;
    let t_execution = t_sampling.max(t_gnn);
    let t_gradient_sync = gradient_sync_time(model, platform);
    Ok(CostBreakdown {
        layers,
        t_fp,
        t_lc,
        t_bp,
        t_gnn,
        t_sampling,
        t_execution,
        t_gradient_sync,
        t_parallel: t_execution + t_gradient_sync,
    })
}

/// Vertices traversed per second.
pub fn throughput_nvtps(total_vertices_traversed: f64, t_parallel: f64) -> Result<f64> {
    if !(t_parallel > 0.0) {
        return Err(Error::config(format!(
            "parallel time must be positive, got {t_parallel}"
        )));
    }
    Ok(total_vertices_traversed / t_parallel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn load_examples() {
        let local = t_load(1000.0, 1.0, 128.0, 4.0, 19.25e9, 16e9).unwrap();
        assert_relative_eq!(local, 512_000.0 / 19.25e9, max_relative = 1e-12);
        assert_relative_eq!(local, 26.6e-6, max_relative = 1e-3);
        let remote = t_load(1000.0, 0.0, 128.0, 4.0, 19.25e9, 16e9).unwrap();
        assert_relative_eq!(remote, 32e-6, max_relative = 1e-12);
        let half = t_load(1000.0, 0.5, 128.0, 4.0, 19.25e9, 16e9).unwrap();
        assert_relative_eq!(half, 0.5 * (local + remote), max_relative = 1e-12);
        assert!(t_load(1.0, 0.5, 1.0, 4.0, 0.0, 1.0).is_err());
        assert!(t_load(1.0, 1.5, 1.0, 4.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn compute_examples() {
        let t = t_compute_aggregate(38_400.0, 128.0, 8.0, 16.0, 3e8);
        assert_relative_eq!(t, 128e-6, max_relative = 1e-12);
        assert_relative_eq!(
            t_compute_aggregate(38_400.0, 128.0, 16.0, 16.0, 3e8),
            t / 2.0,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            t_compute_aggregate(8.0 * 16.0 * 3e8, 1.0, 8.0, 16.0, 3e8),
            1.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn update_examples() {
        let t = t_update(1024.0, 128.0, 128.0, 2048.0, 3e8);
        assert_relative_eq!(t, 27.3e-6, max_relative = 1e-3);
        assert_relative_eq!(
            t_update(1024.0, 128.0, 128.0, 4096.0, 3e8),
            t / 2.0,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            t_update(1024.0, 128.0, 1.0, 2048.0, 3e8),
            1024.0 * 128.0 / (2048.0 * 3e8)
        );
    }

    #[test]
    fn resource_utilization() {
        let coeffs = ResourceCoeffs {
            lambda1: 5.0,
            lambda2: 112.6,
            rho1: 0.0,
            rho2: 0.0,
            rho3: 0.0,
        };
        let whole = DieMeta {
            n_dsp: 12288.0,
            n_lut: 1.0,
            ddr_bw: 1.0,
        };
        let a = resource_check(AcceleratorConfig::new(8, 2048), &coeffs, &whole).unwrap();
        let b = resource_check(AcceleratorConfig::new(16, 1024), &coeffs, &whole).unwrap();
        assert!((a.dsp_util - 0.90).abs() < 0.01, "{}", a.dsp_util);
        assert!((b.dsp_util - 0.56).abs() < 0.01, "{}", b.dsp_util);
        assert!(a.feasible && b.feasible);
        assert!(resource_check(AcceleratorConfig::new(0, 8), &coeffs, &whole).is_err());
    }

    #[test]
    fn lut_uses_log2() {
        let coeffs = ResourceCoeffs {
            lambda1: 0.0,
            lambda2: 0.0,
            rho1: 1.0,
            rho2: 10.0,
            rho3: 100.0,
        };
        assert_eq!(coeffs.lut(AcceleratorConfig::new(1, 7)), 17.0);
        assert_eq!(coeffs.lut(AcceleratorConfig::new(8, 0)), 80.0 + 2400.0);
    }

    fn one_layer_stats(beta: f64) -> BatchStats {
        BatchStats {
            sizes: vec![5000.0, 1024.0],
            edge_counts: vec![10_240.0],
            bytes_local: 0.0,
            bytes_remote: 0.0,
            beta,
            feature_dim_split: false,
        }
    }

    fn one_layer_model() -> GnnModel {
        GnnModel::new(
            crate::model::ModelKind::Graphsage,
            crate::model::Aggregator::Mean,
            vec![602, 128],
            vec![10],
            1024,
        )
        .unwrap()
    }

    #[test]
    fn huge_parallelism_leaves_load() {
        let platform = PlatformMeta::alveo_u250(1);
        let cost = evaluate_batch(
            &one_layer_stats(1.0),
            &one_layer_model(),
            AcceleratorConfig::new(1 << 20, 1 << 20),
            &platform,
            16e9,
        )
        .unwrap();
        assert_eq!(cost.layers[0].t_aggregate, cost.layers[0].t_load);
        assert_eq!(cost.layers[0].t_layer, cost.layers[0].t_load);
    }

    #[test]
    fn infinite_sampler_rate() {
        let mut platform = PlatformMeta::alveo_u250(1);
        platform.sampler_rate = f64::INFINITY;
        let cost = evaluate_batch(
            &one_layer_stats(0.3),
            &one_layer_model(),
            AcceleratorConfig::new(2, 512),
            &platform,
            16e9,
        )
        .unwrap();
        assert_eq!(cost.t_sampling, 0.0);
        assert_eq!(cost.t_execution, cost.t_gnn);
        assert_eq!(cost.t_gnn, cost.t_fp + cost.t_lc + cost.t_bp);
        assert_eq!(cost.t_bp, cost.t_fp);
    }

    #[test]
    fn stats_shape_checked() {
        let platform = PlatformMeta::alveo_u250(1);
        let model = GnnModel::graphsage([602, 128, 41]);
        let err = evaluate_batch(
            &one_layer_stats(1.0),
            &model,
            AcceleratorConfig::new(2, 512),
            &platform,
            16e9,
        );
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn nvtps() {
        assert_eq!(throughput_nvtps(97.0, 1.0).unwrap(), 97.0);
        assert_eq!(
            throughput_nvtps(194.0, 1.0).unwrap(),
            2.0 * throughput_nvtps(97.0, 1.0).unwrap()
        );
        assert!(throughput_nvtps(1.0, 0.0).is_err());
    }

    #[test]
    fn platform_validation() {
        let mut p = PlatformMeta::alveo_u250(4);
        p.validate().unwrap();
        p.pe_simd = 8.0;
        assert!(p.validate().is_err());
        let mut q = PlatformMeta::alveo_u250(4);
        q.pcie_link_bw = 0.0;
        assert!(q.validate().unwrap_err().to_string().contains("platform.pcie_gbps"));
    }

    #[test]
    fn whole_fpga_conversion() {
        let cfg = AcceleratorConfig::from_whole_fpga(8, 2048, 4).unwrap();
        assert_eq!(cfg, AcceleratorConfig::new(2, 512));
        assert_eq!(cfg.whole_fpga(4), (8, 2048));
        assert!(AcceleratorConfig::from_whole_fpga(6, 2048, 4).is_err());
    }
}
