//! Layer-wise uniform neighbor sampling and the per-batch statistics the
//! performance model consumes.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, VertexId};
use crate::model::{DatasetShape, GnnModel};
use crate::partition::{FeatureStore, PartitionMode, PartitionPlan, Residency};

/// splitmix64 finalizer, used to derive independent stream seeds.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn stream_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_u64, |acc, &x| mix(acc ^ mix(x)))
}

/// One sampled mini-batch. `layers[l]` is `V^l` (`layers[L]` are the
/// targets) and `edges[l - 1]` holds the `(u, v)` pairs of `A^l` with
/// `u` in `V^(l-1)` and `v` in `V^l`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MiniBatch {
    pub source_partition: usize,
    pub seq_no: usize,
    pub layers: Vec<Vec<VertexId>>,
    pub edges: Vec<Vec<(VertexId, VertexId)>>,
}

impl MiniBatch {
    pub fn num_layers(&self) -> usize {
        self.edges.len()
    }

    pub fn targets(&self) -> &[VertexId] {
        self.layers.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// `sum_l |V^l|`, the per-batch numerator of NVTPS.
    pub fn vertices_traversed(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn sampled_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }
}

/// Epoch-shuffled training targets of every partition.
#[derive(Debug, Clone)]
pub struct EpochTargets {
    per_part: Vec<Vec<VertexId>>,
    epoch: u64,
}

impl EpochTargets {
    /// Vertex-resident plans keep each partition's own train vertices;
    /// feature-dim plans deal the shuffled train set out round-robin.
    pub fn new(g: &Graph, plan: &PartitionPlan, epoch: u64, seed: u64) -> Self {
        let p = plan.num_parts();
        let per_part = match plan.mode() {
            PartitionMode::VertexResident => {
                let mut parts = vec![Vec::new(); p];
                for v in g.train_vertices() {
                    parts[plan.assignment()[v as usize] as usize].push(v);
                }
                for (i, part) in parts.iter_mut().enumerate() {
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, epoch, i as u64, 1]));
                    part.shuffle(&mut rng);
                }
                parts
            }
            PartitionMode::FeatureDim => {
                let mut all: Vec<VertexId> = g.train_vertices().collect();
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, epoch, 2]));
                all.shuffle(&mut rng);
                let mut parts = vec![Vec::new(); p];
                for (k, v) in all.into_iter().enumerate() {
                    parts[k % p].push(v);
                }
                parts
            }
        };
        EpochTargets { per_part, epoch }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn num_parts(&self) -> usize {
        self.per_part.len()
    }

    pub fn part(&self, part: usize) -> &[VertexId] {
        &self.per_part[part]
    }

    /// Targets of the `index`-th batch of `part`, or `None` once exhausted.
    pub fn batch_targets(&self, part: usize, index: usize, batch_size: usize) -> Option<&[VertexId]> {
        let all = &self.per_part[part];
        let start = index.checked_mul(batch_size)?;
        if start >= all.len() {
            return None;
        }
        Some(&all[start..(start + batch_size).min(all.len())])
    }
}

/// Samples the `index`-th mini-batch of `part` for the epoch `targets` was built for.
pub fn sample_minibatch(
    g: &Graph,
    targets: &EpochTargets,
    part: usize,
    model: &GnnModel,
    index: usize,
    seed: u64,
) -> Result<MiniBatch> {
    let chosen = targets
        .batch_targets(part, index, model.batch_targets)
        .ok_or(Error::Exhausted { partition: part })?;
    let rng_seed = stream_seed(&[seed, targets.epoch(), part as u64, index as u64, 3]);
    Ok(sample_from_targets(g, chosen, model, part, index, rng_seed))
}

/// Binds a scheduled `(partition, seq_no)` slot to its batch. Sequence
/// numbers past the partition's quota (oversampled extras) reuse its
/// targets cyclically but draw fresh neighbors.
pub fn sample_scheduled(
    g: &Graph,
    targets: &EpochTargets,
    model: &GnnModel,
    part: usize,
    seq_no: usize,
    quota: usize,
    seed: u64,
) -> Result<MiniBatch> {
    let index = seq_no % quota.max(1);
    let chosen = targets
        .batch_targets(part, index, model.batch_targets)
        .ok_or(Error::Exhausted { partition: part })?;
    let rng_seed = stream_seed(&[seed, targets.epoch(), part as u64, seq_no as u64, 3]);
    Ok(sample_from_targets(g, chosen, model, part, seq_no, rng_seed))
}

/// Expands `targets` layer by layer. Each vertex of `V^l` draws
/// `min(fanout_l, in_degree)` distinct in-neighbors uniformly; `V^(l-1)`
/// starts with `V^l` itself followed by newly reached vertices in
/// discovery order.
pub fn sample_from_targets(
    g: &Graph,
    targets: &[VertexId],
    model: &GnnModel,
    source_partition: usize,
    seq_no: usize,
    rng_seed: u64,
) -> MiniBatch {
    let num_layers = model.num_layers();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut layers: Vec<Vec<VertexId>> = vec![Vec::new(); num_layers + 1];
    let mut edges: Vec<Vec<(VertexId, VertexId)>> = vec![Vec::new(); num_layers];

    let mut top = Vec::with_capacity(targets.len());
    let mut dedup = HashSet::with_capacity(targets.len());
    for &v in targets {
        if dedup.insert(v) {
            top.push(v);
        }
    }
    layers[num_layers] = top;

    for l in (1..=num_layers).rev() {
        let fanout = model.fanout(l);
        let upper = &layers[l];
        let mut lower = upper.clone();
        let mut seen: HashSet<VertexId> = upper.iter().copied().collect();
        let mut layer_edges = Vec::with_capacity(upper.len() * fanout);
        for &v in upper {
            let nbrs = g.in_neighbors(v);
            let k = fanout.min(nbrs.len());
            for i in rand::seq::index::sample(&mut rng, nbrs.len(), k) {
                let u = nbrs[i];
                layer_edges.push((u, v));
                if seen.insert(u) {
                    lower.push(u);
                }
            }
        }
        edges[l - 1] = layer_edges;
        layers[l - 1] = lower;
    }

    MiniBatch {
        source_partition,
        seq_no,
        layers,
        edges,
    }
}

/// Sizes and layer-0 locality of a batch as seen by one FPGA. Counts are
/// kept as reals so profiles can hold means over many batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    /// `|V^l|` for `l = 0..=L`
    pub sizes: Vec<f64>,
    /// `|A^l|` for `l = 1..=L`
    pub edge_counts: Vec<f64>,
    pub bytes_local: f64,
    pub bytes_remote: f64,
    pub beta: f64,
    /// Layer-0 features are split by column across FPGAs.
    pub feature_dim_split: bool,
}

impl BatchStats {
    pub fn vertices_traversed(&self) -> f64 {
        self.sizes.iter().sum()
    }

    pub fn sampled_edges(&self) -> f64 {
        self.edge_counts.iter().sum()
    }

    /// Element-wise mean of a non-empty profile.
    pub fn mean(profile: &[BatchStats]) -> Result<BatchStats> {
        let first = profile.first().ok_or_else(|| Error::config("batch profile is empty"))?;
        let k = profile.len() as f64;
        let mut acc = first.clone();
        for b in &profile[1..] {
            if b.sizes.len() != acc.sizes.len() {
                return Err(Error::Shape("profile batches have different layer counts".into()));
            }
            acc.sizes.iter_mut().zip(&b.sizes).for_each(|(a, x)| *a += x);
            acc.edge_counts
                .iter_mut()
                .zip(&b.edge_counts)
                .for_each(|(a, x)| *a += x);
            acc.bytes_local += b.bytes_local;
            acc.bytes_remote += b.bytes_remote;
            acc.beta += b.beta;
        }
        acc.sizes.iter_mut().for_each(|a| *a /= k);
        acc.edge_counts.iter_mut().for_each(|a| *a /= k);
        acc.bytes_local /= k;
        acc.bytes_remote /= k;
        acc.beta /= k;
        Ok(acc)
    }

    /// Expected batch sizes on a graph of the given shape, assuming every
    /// vertex has the average degree and sampled endpoints are uniform
    /// over the vertex set (so `d` draws reach `N(1 - e^(-d/N))` distinct
    /// vertices). Used when the full dataset is too large to sample.
    pub fn expected(shape: &DatasetShape, model: &GnnModel, beta: f64, feat_bytes: u64) -> BatchStats {
        let n = shape.vertices as f64;
        let deg = shape.avg_degree();
        let num_layers = model.num_layers();
        let mut sizes = vec![0.0; num_layers + 1];
        let mut edge_counts = vec![0.0; num_layers];
        sizes[num_layers] = (model.batch_targets as f64).min(n);
        for l in (1..=num_layers).rev() {
            let upper = sizes[l];
            let draws = upper * (model.fanout(l) as f64).min(deg);
            edge_counts[l - 1] = draws;
            sizes[l - 1] = upper + (n - upper) * (1.0 - (-draws / n).exp());
        }
        let total = sizes[0] * model.dims[0] as f64 * feat_bytes as f64;
        BatchStats {
            sizes,
            edge_counts,
            bytes_local: beta * total,
            bytes_remote: (1.0 - beta) * total,
            beta,
            feature_dim_split: false,
        }
    }
}

/// Measures a batch's sizes and the share of its layer-0 feature bytes
/// resident on `executing_fpga`.
pub fn batch_stats(b: &MiniBatch, store: &FeatureStore, executing_fpga: usize, model: &GnnModel) -> BatchStats {
    let f0 = model.dims[0] as f64;
    let s = store.feat_bytes() as f64;
    let v0 = b.layers[0].len() as f64;
    let total = v0 * f0 * s;
    let (bytes_local, split) = match store.residency(executing_fpga) {
        Residency::Vertices(set) => {
            let hits = b.layers[0].iter().filter(|&&v| set[v as usize]).count() as f64;
            (hits * f0 * s, false)
        }
        Residency::Columns(cols) => (v0 * cols.len() as f64 * s, true),
    };
    let beta = if total > 0.0 { bytes_local / total } else { 1.0 };
    BatchStats {
        sizes: b.layers.iter().map(|l| l.len() as f64).collect(),
        edge_counts: b.edges.iter().map(|e| e.len() as f64).collect(),
        bytes_local,
        bytes_remote: total - bytes_local,
        beta,
        feature_dim_split: split,
    }
}

/// `ceil(train vertices of part / batch size)`.
pub fn partition_batch_quota(plan: &PartitionPlan, model: &GnnModel, part: usize) -> usize {
    plan.per_part()[part].train_vertex_count.div_ceil(model.batch_targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_synthetic, SyntheticKind};
    use crate::model::GnnModel;
    use crate::partition::{feature_store_from_partition, partition_hash, FeatureStore, PartitionPlan};

    fn one_layer(fanout: usize, batch: usize) -> GnnModel {
        GnnModel::new(
            crate::model::ModelKind::Graphsage,
            crate::model::Aggregator::Mean,
            vec![4, 4],
            vec![fanout],
            batch,
        )
        .unwrap()
    }

    #[test]
    fn fanout_at_least_degree_takes_whole_neighborhood() {
        // a -> v, b -> v
        let g = Graph::from_edges(3, &[(1, 0), (2, 0)]).unwrap();
        let b = sample_from_targets(&g, &[0], &one_layer(2, 1), 0, 0, 9);
        assert_eq!(b.layers[1], vec![0]);
        let mut v0 = b.layers[0].clone();
        v0.sort_unstable();
        assert_eq!(v0, vec![0, 1, 2]);
        assert_eq!(b.edges[0].len(), 2);
    }

    #[test]
    fn zero_degree_target_contributes_itself() {
        let g = Graph::from_edges(2, &[]).unwrap();
        let b = sample_from_targets(&g, &[1], &one_layer(5, 1), 0, 0, 1);
        assert_eq!(b.layers, vec![vec![1], vec![1]]);
        assert!(b.edges[0].is_empty());
    }

    #[test]
    fn two_layer_size_bounds_and_edge_validity() {
        let g = generate_synthetic(SyntheticKind::PowerLaw, 20_000, 30, 1.8, 4).unwrap();
        let model = GnnModel::graphsage([8, 8, 8]);
        let plan = PartitionPlan::from_assignment(&g, 1, vec![0; g.num_vertices()]).unwrap();
        let targets = EpochTargets::new(&g, &plan, 0, 5);
        let b = sample_minibatch(&g, &targets, 0, &model, 0, 5).unwrap();
        assert_eq!(b.layers[2].len(), 1024);
        assert!(b.layers[1].len() <= 1024 * 10 + 1024);
        assert!(b.layers[0].len() <= b.layers[1].len() * 25 + b.layers[1].len());
        for l in 1..=2 {
            let lower: HashSet<_> = b.layers[l - 1].iter().collect();
            let upper: HashSet<_> = b.layers[l].iter().collect();
            assert!(upper.is_subset(&lower));
            for &(u, v) in &b.edges[l - 1] {
                assert!(lower.contains(&u) && upper.contains(&v) && g.has_edge(u, v));
            }
        }
        let again = sample_minibatch(&g, &targets, 0, &model, 0, 5).unwrap();
        assert_eq!(b, again);
    }

    #[test]
    fn exhausted_partition() {
        let g = Graph::from_edges(10, &[]).unwrap();
        let plan = partition_hash(&g, 2).unwrap();
        let targets = EpochTargets::new(&g, &plan, 0, 0);
        let model = one_layer(2, 4);
        assert!(sample_minibatch(&g, &targets, 0, &model, 1, 0).is_ok());
        assert!(matches!(
            sample_minibatch(&g, &targets, 0, &model, 2, 0),
            Err(Error::Exhausted { partition: 0 })
        ));
    }

    #[test]
    fn beta_extremes() {
        let g = generate_synthetic(SyntheticKind::Uniform, 200, 8, 0.0, 2)
            .unwrap()
            .with_feature_dim(4)
            .unwrap();
        let model = one_layer(3, 16);
        let plan = partition_hash(&g, 1).unwrap();
        let targets = EpochTargets::new(&g, &plan, 0, 1);
        let b = sample_minibatch(&g, &targets, 0, &model, 0, 1).unwrap();
        let full = feature_store_from_partition(&plan, &g, None).unwrap();
        let stats = batch_stats(&b, &full, 0, &model);
        assert_eq!(stats.beta, 1.0);
        assert_eq!(stats.bytes_remote, 0.0);
        assert_eq!(stats.sizes[0], b.layers[0].len() as f64);
        let none = FeatureStore::empty(&g, 1);
        assert_eq!(batch_stats(&b, &none, 0, &model).beta, 0.0);
    }

    #[test]
    fn quota_is_ceiling() {
        let g = Graph::from_edges(4700, &[]).unwrap();
        let mut assignment = vec![0u32; 1500];
        assignment.extend(vec![1u32; 900]);
        assignment.extend(vec![2u32; 1200]);
        assignment.extend(vec![3u32; 1100]);
        let mask: Vec<bool> = (0..4700).map(|v| v < 3600).collect();
        let g = g.with_train_mask(mask).unwrap();
        let plan = PartitionPlan::from_assignment(&g, 4, assignment).unwrap();
        let model = one_layer(1, 1024);
        let quotas: Vec<_> = (0..3).map(|p| partition_batch_quota(&plan, &model, p)).collect();
        assert_eq!(quotas, vec![2, 1, 2]);
        assert_eq!(partition_batch_quota(&plan, &model, 3), 0);
    }

    #[test]
    fn expected_stats_respect_bounds() {
        let model = GnnModel::graphsage([602, 128, 41]);
        let s = BatchStats::expected(&DatasetShape::reddit(), &model, 1.0, 4);
        assert_eq!(s.sizes[2], 1024.0);
        assert!(s.sizes[1] <= 1024.0 * 11.0 && s.sizes[1] > 1024.0);
        assert!(s.sizes[0] <= s.sizes[1] * 26.0 && s.sizes[0] < 232_965.0);
        assert_eq!(s.edge_counts, vec![s.sizes[1] * 25.0, 10_240.0]);
    }

    #[test]
    fn mean_of_profile() {
        let model = GnnModel::graphsage([100, 128, 47]);
        let a = BatchStats::expected(&DatasetShape::reddit(), &model, 1.0, 4);
        let b = BatchStats::expected(&DatasetShape::yelp(), &model, 0.5, 4);
        let m = BatchStats::mean(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.sizes[0], (a.sizes[0] + b.sizes[0]) / 2.0);
        assert_eq!(m.beta, 0.75);
        assert!(BatchStats::mean(&[]).is_err());
    }
}
