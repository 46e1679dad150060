//! Graph partitioning and per-FPGA feature residency.
//!
//! Three residency strategies are provided: partition-resident features
//! (each FPGA stores the features of the vertices it owns), a replicated
//! cache of the highest out-degree vertices, and a split of the feature
//! columns across FPGAs with the full topology everywhere.

use std::collections::VecDeque;
use std::ops::Range;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, VertexId};

/// Bytes per single-precision feature element.
pub const DEFAULT_FEAT_BYTES: u64 = 4;

const UNASSIGNED: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Vertices are split between FPGAs (edge-balanced, train-balanced or hash).
    VertexResident,
    /// Every FPGA holds the whole topology and a slice of the feature columns.
    FeatureDim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Edges,
    TrainVertices,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PartStats {
    pub vertex_count: usize,
    pub edge_count: usize,
    pub train_vertex_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    num_parts: usize,
    mode: PartitionMode,
    /// Empty in `FeatureDim` mode.
    assignment: Vec<u32>,
    per_part: Vec<PartStats>,
    feature_slices: Vec<Range<usize>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PartitionReport {
    pub num_parts: usize,
    pub mode: PartitionMode,
    pub per_part: Vec<PartStats>,
    pub edge_imbalance: f64,
    pub train_imbalance: f64,
    pub feature_slices: Vec<[usize; 2]>,
}

fn ratio(max: usize, min: usize) -> f64 {
    if min == 0 {
        if max == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        max as f64 / min as f64
    }
}

impl PartitionPlan {
    /// Builds a vertex-resident plan and recounts the per-part statistics.
    pub fn from_assignment(g: &Graph, num_parts: usize, assignment: Vec<u32>) -> Result<Self> {
        if assignment.len() != g.num_vertices() {
            return Err(Error::Shape(format!(
                "assignment covers {} of {} vertices",
                assignment.len(),
                g.num_vertices()
            )));
        }
        let mut per_part = vec![PartStats::default(); num_parts];
        for (v, &part) in assignment.iter().enumerate() {
            let stats = per_part
                .get_mut(part as usize)
                .ok_or_else(|| Error::Invariant(format!("vertex {v} assigned to partition {part} >= {num_parts}")))?;
            stats.vertex_count += 1;
            stats.edge_count += g.out_degree(v as VertexId);
            stats.train_vertex_count += g.is_train(v as VertexId) as usize;
        }
        Ok(PartitionPlan {
            num_parts,
            mode: PartitionMode::VertexResident,
            assignment,
            per_part,
            feature_slices: Vec::new(),
        })
    }

    pub fn num_parts(&self) -> usize {
        self.num_parts
    }

    pub fn mode(&self) -> PartitionMode {
        self.mode
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn part_of(&self, v: VertexId) -> Option<usize> {
        self.assignment.get(v as usize).map(|&p| p as usize)
    }

    pub fn per_part(&self) -> &[PartStats] {
        &self.per_part
    }

    pub fn feature_slices(&self) -> &[Range<usize>] {
        &self.feature_slices
    }

    /// max/min ratio of the chosen objective across partitions.
    pub fn imbalance(&self, objective: Objective) -> f64 {
        let values = self.per_part.iter().map(|s| match objective {
            Objective::Edges => s.edge_count,
            Objective::TrainVertices => s.train_vertex_count,
        });
        let (min, max) = values.fold((usize::MAX, 0), |(lo, hi), x| (lo.min(x), hi.max(x)));
        ratio(max, min)
    }

    pub fn report(&self) -> PartitionReport {
        PartitionReport {
            num_parts: self.num_parts,
            mode: self.mode,
            per_part: self.per_part.clone(),
            edge_imbalance: self.imbalance(Objective::Edges),
            train_imbalance: self.imbalance(Objective::TrainVertices),
            feature_slices: self.feature_slices.iter().map(|r| [r.start, r.end]).collect(),
        }
    }
}

/// Seeded multi-source BFS growth. At every step the partition with the
/// smallest load on `objective` (then fewest vertices, then lowest id)
/// claims the next unassigned vertex from its frontier; a partition whose
/// frontier is exhausted restarts from the next unassigned vertex in a
/// seeded vertex order.
pub fn partition_balanced(g: &Graph, p: usize, objective: Objective, seed: u64) -> Result<PartitionPlan> {
    let n = g.num_vertices();
    if p == 0 {
        return Err(Error::config("partition count must be at least 1"));
    }
    if p > n {
        return Err(Error::config(format!("{p} partitions requested for {n} vertices")));
    }

    let weight = |v: VertexId| -> u64 {
        match objective {
            Objective::Edges => g.out_degree(v) as u64,
            Objective::TrainVertices => g.is_train(v) as u64,
        }
    };

    let mut order: Vec<VertexId> = (0..n as VertexId).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut restart = 0usize;

    let mut assignment = vec![UNASSIGNED; n];
    let mut frontier: Vec<VecDeque<VertexId>> = vec![VecDeque::new(); p];
    let mut load = vec![0u64; p];
    let mut count = vec![0usize; p];

    for (part, &v) in order.iter().take(p).enumerate() {
        frontier[part].push_back(v);
    }

    let mut remaining = n;
    while remaining > 0 {
        let part = (0..p).min_by_key(|&i| (load[i], count[i], i)).unwrap();
        let next = loop {
            match frontier[part].pop_front() {
                Some(v) if assignment[v as usize] == UNASSIGNED => break v,
                Some(_) => continue,
                None => {
                    while assignment[order[restart] as usize] != UNASSIGNED {
                        restart += 1;
                    }
                    break order[restart];
                }
            }
        };
        assignment[next as usize] = part as u32;
        load[part] += weight(next);
        count[part] += 1;
        remaining -= 1;
        for &u in g.out_neighbors(next).iter().chain(g.in_neighbors(next)) {
            if assignment[u as usize] == UNASSIGNED {
                frontier[part].push_back(u);
            }
        }
    }

    PartitionPlan::from_assignment(g, p, assignment)
}

/// `assignment[v] = v mod p`.
pub fn partition_hash(g: &Graph, p: usize) -> Result<PartitionPlan> {
    if p == 0 {
        return Err(Error::config("partition count must be at least 1"));
    }
    let assignment = (0..g.num_vertices()).map(|v| (v % p) as u32).collect();
    PartitionPlan::from_assignment(g, p, assignment)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Residency {
    /// Membership bitmap over all vertices.
    Vertices(Arc<Vec<bool>>),
    Columns(Range<usize>),
}

/// Per-FPGA description of which feature bytes live in local DDR.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    resident: Vec<Residency>,
    capacity_bytes: Option<u64>,
    feat_bytes: u64,
    feature_dim: usize,
}

impl FeatureStore {
    /// A store with nothing resident: every feature read goes to the host.
    pub fn empty(g: &Graph, p: usize) -> Self {
        let none = Arc::new(vec![false; g.num_vertices()]);
        FeatureStore {
            resident: vec![Residency::Vertices(none); p],
            capacity_bytes: None,
            feat_bytes: DEFAULT_FEAT_BYTES,
            feature_dim: g.feature_dim(),
        }
    }

    pub fn num_fpgas(&self) -> usize {
        self.resident.len()
    }

    pub fn feat_bytes(&self) -> u64 {
        self.feat_bytes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn capacity_bytes(&self) -> Option<u64> {
        self.capacity_bytes
    }

    pub fn residency(&self, fpga: usize) -> &Residency {
        &self.resident[fpga]
    }

    pub fn is_feature_dim(&self) -> bool {
        matches!(self.resident.first(), Some(Residency::Columns(_)))
    }

    /// Whether the full feature vector of `v` is resident on `fpga`.
    pub fn holds_vertex(&self, fpga: usize, v: VertexId) -> bool {
        match &self.resident[fpga] {
            Residency::Vertices(set) => set[v as usize],
            Residency::Columns(_) => false,
        }
    }

    /// Number of whole feature vectors resident on `fpga`.
    pub fn resident_vertex_count(&self, fpga: usize) -> usize {
        match &self.resident[fpga] {
            Residency::Vertices(set) => set.iter().filter(|&&b| b).count(),
            Residency::Columns(_) => 0,
        }
    }

    pub fn resident_bytes(&self, fpga: usize, num_vertices: usize) -> u64 {
        match &self.resident[fpga] {
            Residency::Vertices(_) => {
                self.resident_vertex_count(fpga) as u64 * self.feature_dim as u64 * self.feat_bytes
            }
            Residency::Columns(cols) => num_vertices as u64 * cols.len() as u64 * self.feat_bytes,
        }
    }
}

fn vector_bytes(g: &Graph, feat_bytes: u64) -> u64 {
    g.feature_dim() as u64 * feat_bytes
}

/// FPGA `i` stores the features of the vertices in partition `i`.
pub fn feature_store_from_partition(
    plan: &PartitionPlan,
    g: &Graph,
    capacity_bytes: Option<u64>,
) -> Result<FeatureStore> {
    if plan.mode() != PartitionMode::VertexResident {
        return Err(Error::config("partition-resident features need a vertex-resident plan"));
    }
    let per_vector = vector_bytes(g, DEFAULT_FEAT_BYTES);
    if let Some(capacity) = capacity_bytes {
        for (fpga, stats) in plan.per_part().iter().enumerate() {
            let required = stats.vertex_count as u64 * per_vector;
            if required > capacity {
                return Err(Error::Capacity {
                    fpga,
                    required,
                    capacity,
                });
            }
        }
    }
    let mut sets = vec![vec![false; g.num_vertices()]; plan.num_parts()];
    for (v, &part) in plan.assignment().iter().enumerate() {
        sets[part as usize][v] = true;
    }
    Ok(FeatureStore {
        resident: sets.into_iter().map(|s| Residency::Vertices(Arc::new(s))).collect(),
        capacity_bytes,
        feat_bytes: DEFAULT_FEAT_BYTES,
        feature_dim: g.feature_dim(),
    })
}

/// Replicates the same cache on all `p` FPGAs: the largest prefix of
/// vertices ranked by descending out-degree (ascending id on ties) that
/// fits in `capacity_bytes`.
pub fn feature_store_outdegree_cache(g: &Graph, p: usize, capacity_bytes: u64) -> Result<FeatureStore> {
    if p == 0 {
        return Err(Error::config("FPGA count must be at least 1"));
    }
    let per_vector = vector_bytes(g, DEFAULT_FEAT_BYTES);
    if capacity_bytes < per_vector {
        return Err(Error::config(format!(
            "cache capacity {capacity_bytes} B is below one feature vector ({per_vector} B)"
        )));
    }
    let k = ((capacity_bytes / per_vector) as usize).min(g.num_vertices());
    let mut ranked: Vec<VertexId> = (0..g.num_vertices() as VertexId).collect();
    ranked.sort_by_key(|&v| (std::cmp::Reverse(g.out_degree(v)), v));
    let mut set = vec![false; g.num_vertices()];
    for &v in &ranked[..k] {
        set[v as usize] = true;
    }
    let shared = Arc::new(set);
    Ok(FeatureStore {
        resident: vec![Residency::Vertices(shared); p],
        capacity_bytes: Some(capacity_bytes),
        feat_bytes: DEFAULT_FEAT_BYTES,
        feature_dim: g.feature_dim(),
    })
}

/// Splits `[0, f0)` into `p` contiguous slices whose widths differ by at most one.
pub fn feature_store_feature_dim(g: &Graph, p: usize) -> Result<(PartitionPlan, FeatureStore)> {
    let f0 = g.feature_dim();
    if p == 0 || p > f0 {
        return Err(Error::config(format!(
            "cannot split {f0} feature columns across {p} FPGAs"
        )));
    }
    let (base, extra) = (f0 / p, f0 % p);
    let mut slices = Vec::with_capacity(p);
    let mut start = 0;
    for i in 0..p {
        let width = base + usize::from(i < extra);
        slices.push(start..start + width);
        start += width;
    }

    // Targets are dealt out evenly; the topology is shared.
    let train = g.num_train();
    let per_part = (0..p)
        .map(|i| PartStats {
            vertex_count: g.num_vertices(),
            edge_count: g.num_edges(),
            train_vertex_count: train / p + usize::from(i < train % p),
        })
        .collect();
    let plan = PartitionPlan {
        num_parts: p,
        mode: PartitionMode::FeatureDim,
        assignment: Vec::new(),
        per_part,
        feature_slices: slices.clone(),
    };
    let store = FeatureStore {
        resident: slices.into_iter().map(Residency::Columns).collect(),
        capacity_bytes: None,
        feat_bytes: DEFAULT_FEAT_BYTES,
        feature_dim: f0,
    };
    Ok((plan, store))
}
