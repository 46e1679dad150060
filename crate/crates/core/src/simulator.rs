//! Iteration-level simulation of synchronous training on `p` FPGAs.
//!
//! Each iteration binds the scheduled slots to sampled mini-batches,
//! measures their locality on the FPGA that runs them, shares the host
//! memory bandwidth among the PCIe links that fetch remote features and
//! prices every FPGA's batches with the performance model. The iteration
//! ends when the slowest FPGA finishes and gradients are synchronized.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::GnnModel;
use crate::partition::{
    feature_store_feature_dim, feature_store_from_partition, feature_store_outdegree_cache, partition_balanced,
    partition_hash, FeatureStore, Objective, PartitionPlan, Residency, DEFAULT_FEAT_BYTES,
};
use crate::perfmodel::{
    evaluate_batch, gradient_sync_time, resource_check, AcceleratorConfig, PlatformMeta, ResourceCoeffs,
};
use crate::sampler::{batch_stats, partition_batch_quota, sample_scheduled, BatchStats, EpochTargets};
use crate::scheduler::{schedule_epoch_with, ExtraAccounting, IterationPlan, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Edge-balanced partitions, each FPGA stores its partition's features.
    Distdgl,
    /// Train-balanced partitions plus a replicated out-degree cache.
    Pagraph,
    /// Feature columns split across FPGAs, full topology everywhere.
    P3,
    /// Modulo partitioning with partition-resident features.
    Hash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub algorithm: Algorithm,
    pub workload_balance: bool,
    pub direct_cpu_fetch: bool,
    pub epochs: usize,
    pub seed: u64,
    pub fpga_count_override: Option<usize>,
    /// PaGraph cache size as a fraction of all feature bytes; 0 caches nothing.
    pub cache_fraction: f64,
    /// Per-FPGA feature budget for partition-resident stores.
    pub feature_capacity_bytes: Option<u64>,
    /// Divide the host sampling rate among the FPGAs active in an iteration.
    pub shared_sampler: bool,
    pub extra_accounting: ExtraAccounting,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            algorithm: Algorithm::Distdgl,
            workload_balance: true,
            direct_cpu_fetch: true,
            epochs: 1,
            seed: 0,
            fpga_count_override: None,
            cache_fraction: 0.2,
            feature_capacity_bytes: None,
            shared_sampler: false,
            extra_accounting: ExtraAccounting::ConsumeQuota,
        }
    }
}

impl SimConfig {
    pub fn policy(&self) -> Policy {
        if self.workload_balance {
            Policy::TwoStage
        } else {
            Policy::Unbalanced
        }
    }
}

/// Max-min fair split of the host memory bandwidth among PCIe links. Each
/// link gets at most `min(demand, link_bw)`; leftover capacity is always
/// handed to links that still want more.
pub fn effective_pcie_bandwidth(demands: &[f64], link_bw: f64, cpu_bw: f64) -> Vec<f64> {
    let caps: Vec<f64> = demands.iter().map(|&d| d.max(0.0).min(link_bw)).collect();
    if caps.iter().sum::<f64>() <= cpu_bw {
        return caps;
    }
    let mut order: Vec<usize> = (0..caps.len()).collect();
    order.sort_by(|&a, &b| caps[a].total_cmp(&caps[b]).then(a.cmp(&b)));
    let mut grants = vec![0.0; caps.len()];
    let mut left = cpu_bw;
    for (k, &i) in order.iter().enumerate() {
        let share = left / (caps.len() - k) as f64;
        grants[i] = caps[i].min(share);
        left -= grants[i];
    }
    grants
}

/// A transfer between two FPGAs is staged through host memory and so
/// crosses PCIe twice.
pub fn fpga_to_fpga_bandwidth(link_bw: f64) -> f64 {
    link_bw / 2.0
}

/// Partition plan, feature store and per-partition quotas for one run.
#[derive(Debug, Clone)]
pub struct Deployment {
    pub plan: PartitionPlan,
    pub store: FeatureStore,
    pub quotas: Vec<usize>,
    /// Vertices whose features sit on at least one FPGA.
    resident_anywhere: Vec<bool>,
}

pub fn deploy(g: &Graph, model: &GnnModel, p: usize, sim: &SimConfig) -> Result<Deployment> {
    let (plan, store) = match sim.algorithm {
        Algorithm::Distdgl => {
            let plan = partition_balanced(g, p, Objective::Edges, sim.seed)?;
            let store = feature_store_from_partition(&plan, g, sim.feature_capacity_bytes)?;
            (plan, store)
        }
        Algorithm::Hash => {
            let plan = partition_hash(g, p)?;
            let store = feature_store_from_partition(&plan, g, sim.feature_capacity_bytes)?;
            (plan, store)
        }
        Algorithm::Pagraph => {
            if !(0.0..=1.0).contains(&sim.cache_fraction) {
                return Err(Error::config(format!(
                    "simulation.cache_fraction: {} outside [0, 1]",
                    sim.cache_fraction
                )));
            }
            let plan = partition_balanced(g, p, Objective::TrainVertices, sim.seed)?;
            let total = g.num_vertices() as f64 * g.feature_dim() as f64 * DEFAULT_FEAT_BYTES as f64;
            let capacity = (sim.cache_fraction * total).floor() as u64;
            let store = if capacity < g.feature_dim() as u64 * DEFAULT_FEAT_BYTES {
                FeatureStore::empty(g, p)
            } else {
                feature_store_outdegree_cache(g, p, capacity)?
            };
            (plan, store)
        }
        Algorithm::P3 => feature_store_feature_dim(g, p)?,
    };
    let quotas = (0..p).map(|i| partition_batch_quota(&plan, model, i)).collect();
    let mut resident_anywhere = vec![false; g.num_vertices()];
    for fpga in 0..store.num_fpgas() {
        if let Residency::Vertices(set) = store.residency(fpga) {
            resident_anywhere.iter_mut().zip(set.iter()).for_each(|(a, &b)| *a |= b);
        }
    }
    Ok(Deployment {
        plan,
        store,
        quotas,
        resident_anywhere,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub batches: usize,
    pub max_batches_per_fpga: usize,
    pub t_parallel: f64,
    pub vertices: f64,
    pub nvtps: f64,
    /// Sum of PCIe bandwidth requested by FPGAs with remote traffic.
    pub pcie_demand: f64,
    /// Host memory bandwidth granted across all links.
    pub cpu_bw_granted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub algorithm: Algorithm,
    pub fpgas: usize,
    pub config: AcceleratorConfig,
    pub workload_balance: bool,
    pub direct_cpu_fetch: bool,
    pub quotas: Vec<usize>,
    pub iterations_per_epoch: usize,
    pub epoch_times: Vec<f64>,
    /// Mean over epochs.
    pub epoch_time: f64,
    pub total_vertices: f64,
    pub nvtps: f64,
    /// NVTPS per GB/s of FPGA-local memory bandwidth.
    pub bandwidth_efficiency: f64,
    pub busy_fraction: Vec<f64>,
    pub mean_beta: f64,
    pub peak_cpu_bw_occupancy: f64,
    pub speedup_vs_single: Option<f64>,
    pub iterations: Vec<IterationRecord>,
}

impl SimReport {
    pub fn write_iteration_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "epoch,iteration,batches,max_batches_per_fpga,t_parallel,vertices,nvtps,pcie_demand,cpu_bw_granted"
        )?;
        for r in &self.iterations {
            writeln!(
                out,
                "{},{},{},{},{:.9e},{},{:.6e},{:.6e},{:.6e}",
                r.epoch,
                r.iteration,
                r.batches,
                r.max_batches_per_fpga,
                r.t_parallel,
                r.vertices,
                r.nvtps,
                r.pcie_demand,
                r.cpu_bw_granted
            )?;
        }
        Ok(())
    }
}

/// Locality-relevant numbers of one bound slot.
struct SlotMeasure {
    fpga: usize,
    stats: BatchStats,
    /// Remote bytes held by some other FPGA (as opposed to host-only).
    peer_bytes: f64,
    /// `|V^(L-1)|`, the rows exchanged after layer 1 with column-split features.
    exchange_rows: f64,
}

fn measure_slot(
    g: &Graph,
    model: &GnnModel,
    deployment: &Deployment,
    targets: &EpochTargets,
    slot: &crate::scheduler::Slot,
    seed: u64,
) -> Result<SlotMeasure> {
    let batch = sample_scheduled(
        g,
        targets,
        model,
        slot.partition,
        slot.seq_no,
        deployment.quotas[slot.partition],
        seed,
    )?;
    let stats = batch_stats(&batch, &deployment.store, slot.fpga, model);
    let per_vertex = model.dims[0] as f64 * deployment.store.feat_bytes() as f64;
    let peer_bytes = match deployment.store.residency(slot.fpga) {
        Residency::Vertices(local) => {
            batch.layers[0]
                .iter()
                .filter(|&&v| !local[v as usize] && deployment.resident_anywhere[v as usize])
                .count() as f64
                * per_vertex
        }
        Residency::Columns(_) => 0.0,
    };
    let num_layers = model.num_layers();
    Ok(SlotMeasure {
        fpga: slot.fpga,
        stats,
        peer_bytes,
        exchange_rows: batch.layers[num_layers - 1].len() as f64,
    })
}

struct IterationCost {
    t_parallel: f64,
    busy: Vec<f64>,
    vertices: f64,
    demand: f64,
    granted: f64,
    max_batches: usize,
}

fn price_iteration(
    measures: &[SlotMeasure],
    model: &GnnModel,
    platform: &PlatformMeta,
    cfg: AcceleratorConfig,
    sim: &SimConfig,
    p: usize,
    feature_split: bool,
) -> Result<IterationCost> {
    let link = platform.pcie_link_bw;
    let mut batches = vec![0usize; p];
    let mut wants_link = vec![false; p];
    for m in measures {
        batches[m.fpga] += 1;
        wants_link[m.fpga] |= m.stats.bytes_remote > 0.0 && !feature_split;
        wants_link[m.fpga] |= feature_split && p > 1;
    }
    let demands: Vec<f64> = wants_link.iter().map(|&w| if w { link } else { 0.0 }).collect();
    let grants = effective_pcie_bandwidth(&demands, link, platform.cpu_mem_bw);
    let active = batches.iter().filter(|&&b| b > 0).count().max(1);

    let mut fpga_platform = platform.clone();
    if sim.shared_sampler {
        fpga_platform.sampler_rate = platform.sampler_rate / active as f64;
    }

    let mut busy = vec![0.0; p];
    let mut vertices = 0.0;
    for m in measures {
        let grant = if grants[m.fpga] > 0.0 { grants[m.fpga] } else { link };
        // Peer-resident bytes take two hops unless fetched straight from host memory.
        let remote = m.stats.bytes_remote;
        let bw_eff = if sim.direct_cpu_fetch || remote <= 0.0 {
            grant
        } else {
            let peer = m.peer_bytes.min(remote);
            remote / (peer / fpga_to_fpga_bandwidth(grant) + (remote - peer) / grant)
        };
        let cost = evaluate_batch(&m.stats, model, cfg, &fpga_platform, bw_eff)?;
        busy[m.fpga] += cost.t_execution;
        if feature_split && p > 1 {
            let bytes = m.exchange_rows * model.dims[1] as f64 * platform.feat_bytes * (p - 1) as f64 / p as f64;
            busy[m.fpga] += bytes / grant;
        }
        vertices += m.stats.vertices_traversed();
    }
    let t_parallel = busy.iter().copied().fold(0.0, f64::max) + gradient_sync_time(model, platform);
    Ok(IterationCost {
        t_parallel,
        busy,
        vertices,
        demand: demands.iter().sum(),
        granted: grants.iter().sum(),
        max_batches: batches.iter().copied().max().unwrap_or(0),
    })
}

/// Simulates `sim.epochs` epochs and reports per-epoch time and throughput.
pub fn run_epoch(
    g: &Graph,
    model: &GnnModel,
    platform: &PlatformMeta,
    coeffs: &ResourceCoeffs,
    cfg: AcceleratorConfig,
    sim: &SimConfig,
) -> Result<SimReport> {
    model.validate()?;
    platform.validate()?;
    coeffs.validate()?;
    let usage = resource_check(cfg, coeffs, &platform.die)?;
    if !usage.feasible {
        return Err(Error::Infeasible(format!(
            "(n={}, m={}) per die needs {:.0}% DSP and {:.0}% LUT",
            cfg.n,
            cfg.m,
            usage.dsp_util * 100.0,
            usage.lut_util * 100.0
        )));
    }
    if g.feature_dim() != model.dims[0] {
        return Err(Error::config(format!(
            "graph features have {} columns but the model expects {}",
            g.feature_dim(),
            model.dims[0]
        )));
    }
    if sim.epochs == 0 {
        return Err(Error::config("simulation.epochs: must be at least 1"));
    }
    let p = sim.fpga_count_override.unwrap_or(platform.num_fpgas);
    if p == 0 {
        return Err(Error::config("simulation.fpgas: must be at least 1"));
    }

    let deployment = deploy(g, model, p, sim)?;
    let schedule: Vec<IterationPlan> = schedule_epoch_with(&deployment.quotas, sim.policy(), sim.extra_accounting)?;
    let feature_split = deployment.store.is_feature_dim();

    let mut records = Vec::new();
    let mut epoch_times = Vec::with_capacity(sim.epochs);
    let mut busy_total = vec![0.0; p];
    let mut total_vertices = 0.0;
    let mut beta_sum = 0.0;
    let mut beta_count = 0usize;
    let mut peak_occupancy: f64 = 0.0;

    for epoch in 0..sim.epochs {
        let targets = EpochTargets::new(g, &deployment.plan, epoch as u64, sim.seed);
        let mut epoch_time = 0.0;
        for it in &schedule {
            let measures: Vec<SlotMeasure> = it
                .slots
                .par_iter()
                .map(|slot| measure_slot(g, model, &deployment, &targets, slot, sim.seed))
                .collect::<Result<_>>()?;
            let cost = price_iteration(&measures, model, platform, cfg, sim, p, feature_split)?;
            for m in &measures {
                beta_sum += m.stats.beta;
                beta_count += 1;
            }
            busy_total.iter_mut().zip(&cost.busy).for_each(|(t, b)| *t += b);
            epoch_time += cost.t_parallel;
            total_vertices += cost.vertices;
            peak_occupancy = peak_occupancy.max(cost.granted / platform.cpu_mem_bw);
            records.push(IterationRecord {
                epoch,
                iteration: it.iteration,
                batches: it.slots.len(),
                max_batches_per_fpga: cost.max_batches,
                t_parallel: cost.t_parallel,
                vertices: cost.vertices,
                nvtps: cost.vertices / cost.t_parallel,
                pcie_demand: cost.demand,
                cpu_bw_granted: cost.granted,
            });
        }
        epoch_times.push(epoch_time);
    }

    let total_time: f64 = epoch_times.iter().sum();
    let nvtps = if total_time > 0.0 {
        total_vertices / total_time
    } else {
        0.0
    };
    let local_gbps = platform.fpga_ddr_bw() * p as f64 / 1e9;
    Ok(SimReport {
        algorithm: sim.algorithm,
        fpgas: p,
        config: cfg,
        workload_balance: sim.workload_balance,
        direct_cpu_fetch: sim.direct_cpu_fetch,
        quotas: deployment.quotas.clone(),
        iterations_per_epoch: schedule.len(),
        epoch_time: total_time / sim.epochs as f64,
        epoch_times,
        total_vertices,
        nvtps,
        bandwidth_efficiency: nvtps / local_gbps,
        busy_fraction: busy_total
            .iter()
            .map(|b| if total_time > 0.0 { b / total_time } else { 0.0 })
            .collect(),
        mean_beta: if beta_count > 0 {
            beta_sum / beta_count as f64
        } else {
            0.0
        },
        peak_cpu_bw_occupancy: peak_occupancy,
        speedup_vs_single: None,
        iterations: records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalePoint {
    pub fpgas: usize,
    pub nvtps: f64,
    pub epoch_time: f64,
    pub speedup: f64,
}

/// Re-partitions and re-simulates for every FPGA count; speedup is
/// relative to a single FPGA.
pub fn scalability_sweep(
    g: &Graph,
    model: &GnnModel,
    platform: &PlatformMeta,
    coeffs: &ResourceCoeffs,
    cfg: AcceleratorConfig,
    sim: &SimConfig,
    p_values: &[usize],
) -> Result<Vec<ScalePoint>> {
    if p_values.contains(&0) {
        return Err(Error::config("FPGA counts must be at least 1"));
    }
    let run = |p: usize| -> Result<SimReport> {
        let sim = SimConfig {
            fpga_count_override: Some(p),
            ..sim.clone()
        };
        run_epoch(g, model, platform, coeffs, cfg, &sim)
    };
    let base = run(1)?;
    let reports: Vec<SimReport> = p_values.par_iter().map(|&p| run(p)).collect::<Result<_>>()?;
    Ok(reports
        .into_iter()
        .map(|r| ScalePoint {
            fpgas: r.fpgas,
            nvtps: r.nvtps,
            epoch_time: r.epoch_time,
            speedup: r.nvtps / base.nvtps,
        })
        .collect())
}

pub fn write_speedup_csv<W: Write>(points: &[ScalePoint], mut out: W) -> Result<()> {
    writeln!(out, "fpgas,nvtps,epoch_time,speedup")?;
    for pt in points {
        writeln!(
            out,
            "{},{:.6e},{:.9e},{:.6}",
            pt.fpgas, pt.nvtps, pt.epoch_time, pt.speedup
        )?;
    }
    Ok(())
}
