//! Small-scale numeric executor for mini-batch training: forward pass,
//! MSE loss, manual backpropagation and synchronous gradient averaging.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, VertexId};
use crate::model::{Aggregator, GnnModel, ModelKind};
use crate::partition::PartitionPlan;
use crate::sampler::{sample_scheduled, stream_seed, EpochTargets, MiniBatch};
use crate::scheduler::{schedule_epoch, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    pub relu: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions { relu: true }
    }
}

/// Sparse rows of one layer's aggregation matrix: `(row, col, coef)`
/// with rows in `V^l` and columns in `V^(l-1)`.
#[derive(Debug, Clone)]
pub struct AggregationMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl AggregationMatrix {
    pub fn apply(&self, h: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, h.ncols()));
        for &(r, c, w) in &self.entries {
            out.row_mut(r).scaled_add(w, &h.row(c));
        }
        out
    }

    pub fn apply_transpose(&self, g: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.cols, g.ncols()));
        for &(r, c, w) in &self.entries {
            out.row_mut(c).scaled_add(w, &g.row(r));
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.rows, self.cols));
        for &(r, c, w) in &self.entries {
            a[[r, c]] += w;
        }
        a
    }
}

fn positions(vs: &[VertexId]) -> HashMap<VertexId, usize> {
    vs.iter().enumerate().map(|(i, &v)| (v, i)).collect()
}

/// Aggregation matrix of layer `l` (1-based). A target with no sampled
/// edge keeps its own previous representation.
pub fn aggregation_matrix(batch: &MiniBatch, l: usize, model: &GnnModel) -> Result<AggregationMatrix> {
    let lower = &batch.layers[l - 1];
    let upper = &batch.layers[l];
    let col_of = positions(lower);
    let row_of = positions(upper);
    let mut pairs = Vec::with_capacity(batch.edges[l - 1].len());
    for &(u, v) in &batch.edges[l - 1] {
        let (Some(&c), Some(&r)) = (col_of.get(&u), row_of.get(&v)) else {
            return Err(Error::Shape(format!("edge ({u}, {v}) outside layer {l} of the batch")));
        };
        pairs.push((r, c));
    }
    let mut in_deg = vec![0usize; upper.len()];
    let mut out_deg = vec![0usize; lower.len()];
    for &(r, c) in &pairs {
        in_deg[r] += 1;
        out_deg[c] += 1;
    }
    let mut entries: Vec<(usize, usize, f64)> = pairs
        .iter()
        .map(|&(r, c)| {
            let w = match (model.kind, model.aggregator) {
                (ModelKind::Gcn, _) => 1.0 / ((in_deg[r] * out_deg[c]) as f64).sqrt(),
                (_, Aggregator::Sum) => 1.0,
                (_, Aggregator::Mean) => 1.0 / in_deg[r] as f64,
            };
            (r, c, w)
        })
        .collect();
    for (r, &v) in upper.iter().enumerate() {
        if in_deg[r] == 0 {
            let c = *col_of
                .get(&v)
                .ok_or_else(|| Error::Shape(format!("target {v} missing from layer {}", l - 1)))?;
            entries.push((r, c, 1.0));
        }
    }
    Ok(AggregationMatrix {
        rows: upper.len(),
        cols: lower.len(),
        entries,
    })
}

fn check_shapes(batch: &MiniBatch, features: ArrayView2<f64>, weights: &[Array2<f64>], model: &GnnModel) -> Result<()> {
    let num_layers = model.num_layers();
    if batch.num_layers() != num_layers || batch.layers.len() != num_layers + 1 {
        return Err(Error::Shape(format!(
            "batch has {} layers, model has {num_layers}",
            batch.num_layers()
        )));
    }
    if weights.len() != num_layers {
        return Err(Error::Shape(format!(
            "{} weight matrices for {num_layers} layers",
            weights.len()
        )));
    }
    for (l, w) in weights.iter().enumerate() {
        if w.dim() != (model.dims[l], model.dims[l + 1]) {
            return Err(Error::Shape(format!(
                "W{} is {:?}, expected {:?}",
                l + 1,
                w.dim(),
                (model.dims[l], model.dims[l + 1])
            )));
        }
    }
    if features.ncols() != model.dims[0] {
        return Err(Error::Shape(format!(
            "features have {} columns, model expects {}",
            features.ncols(),
            model.dims[0]
        )));
    }
    if let Some(&v) = batch.layers[0].iter().find(|&&v| v as usize >= features.nrows()) {
        return Err(Error::Shape(format!("vertex {v} has no feature row")));
    }
    Ok(())
}

/// Intermediate values kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub matrices: Vec<AggregationMatrix>,
    /// `h^(l)` for `l = 0..=L`
    pub hidden: Vec<Array2<f64>>,
    /// Aggregated inputs of each layer.
    pub aggregated: Vec<Array2<f64>>,
    /// Pre-activations of each layer.
    pub pre: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.hidden.last().expect("at least the input layer")
    }
}

fn activate(z: &Array2<f64>, opts: ExecOptions) -> Array2<f64> {
    if opts.relu {
        z.mapv(|x| x.max(0.0))
    } else {
        z.clone()
    }
}

/// Rows of `features` are indexed by global vertex id.
pub fn forward_trace(
    batch: &MiniBatch,
    features: ArrayView2<f64>,
    weights: &[Array2<f64>],
    model: &GnnModel,
    opts: ExecOptions,
) -> Result<ForwardTrace> {
    check_shapes(batch, features, weights, model)?;
    let rows: Vec<usize> = batch.layers[0].iter().map(|&v| v as usize).collect();
    let mut hidden = vec![features.select(Axis(0), &rows)];
    let mut matrices = Vec::new();
    let mut aggregated = Vec::new();
    let mut pre = Vec::new();
    for l in 1..=model.num_layers() {
        let a = aggregation_matrix(batch, l, model)?;
        let agg = a.apply(hidden[l - 1].view());
        let z = agg.dot(&weights[l - 1]);
        hidden.push(activate(&z, opts));
        matrices.push(a);
        aggregated.push(agg);
        pre.push(z);
    }
    Ok(ForwardTrace {
        matrices,
        hidden,
        aggregated,
        pre,
    })
}

/// Embeddings of the targets, `|V^L| x f^L`.
pub fn forward(
    batch: &MiniBatch,
    features: ArrayView2<f64>,
    weights: &[Array2<f64>],
    model: &GnnModel,
    opts: ExecOptions,
) -> Result<Array2<f64>> {
    Ok(forward_trace(batch, features, weights, model, opts)?
        .hidden
        .pop()
        .expect("output layer"))
}

fn target_rows(batch: &MiniBatch, targets: ArrayView2<f64>) -> Result<Array2<f64>> {
    let rows: Vec<usize> = batch.targets().iter().map(|&v| v as usize).collect();
    if let Some(&r) = rows.iter().find(|&&r| r >= targets.nrows()) {
        return Err(Error::Shape(format!("vertex {r} has no target row")));
    }
    Ok(targets.select(Axis(0), &rows))
}

/// `0.5 * sum (out - t)^2 / |V^L|`
pub fn mse_loss(out: &Array2<f64>, t: &Array2<f64>) -> f64 {
    let n = out.nrows().max(1) as f64;
    0.5 * (out - t).mapv(|x| x * x).sum() / n
}

#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: f64,
    pub grads: Vec<Array2<f64>>,
}

/// Loss and weight gradients of one batch.
pub fn batch_gradient(
    batch: &MiniBatch,
    features: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    weights: &[Array2<f64>],
    model: &GnnModel,
    opts: ExecOptions,
) -> Result<BatchGradient> {
    let trace = forward_trace(batch, features, weights, model, opts)?;
    let t = target_rows(batch, targets)?;
    if t.ncols() != model.dims[model.num_layers()] {
        return Err(Error::Shape(format!("targets have {} columns", t.ncols())));
    }
    let out = trace.output();
    let loss = mse_loss(out, &t);
    let mut d_hidden = (out - &t) / out.nrows().max(1) as f64;
    let mut grads = vec![Array2::zeros((0, 0)); model.num_layers()];
    for l in (1..=model.num_layers()).rev() {
        let mut d_pre = d_hidden;
        if opts.relu {
            d_pre.zip_mut_with(&trace.pre[l - 1], |d, &z| {
                if z <= 0.0 {
                    *d = 0.0
                }
            });
        }
        grads[l - 1] = trace.aggregated[l - 1].t().dot(&d_pre);
        let d_agg = d_pre.dot(&weights[l - 1].t());
        d_hidden = trace.matrices[l - 1].apply_transpose(d_agg.view());
    }
    Ok(BatchGradient { loss, grads })
}

#[derive(Debug, Clone)]
pub struct SyncStep {
    pub mean_loss: f64,
    pub grads: Vec<Array2<f64>>,
    pub weights: Vec<Array2<f64>>,
}

/// One synchronous step: every batch of the iteration is differentiated
/// against the same weights, gradients are averaged in
/// `(partition, seq_no)` order and one SGD update is applied.
pub fn backward_and_sync(
    batches: &[MiniBatch],
    features: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    weights: &[Array2<f64>],
    model: &GnnModel,
    lr: f64,
    opts: ExecOptions,
) -> Result<SyncStep> {
    if batches.is_empty() {
        return Ok(SyncStep {
            mean_loss: 0.0,
            grads: weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            weights: weights.to_vec(),
        });
    }
    let mut order: Vec<&MiniBatch> = batches.iter().collect();
    order.sort_by_key(|b| (b.source_partition, b.seq_no));
    let per_batch: Vec<BatchGradient> = order
        .par_iter()
        .map(|b| batch_gradient(b, features, targets, weights, model, opts))
        .collect::<Result<_>>()?;
    let count = per_batch.len() as f64;
    let mut grads: Vec<Array2<f64>> = weights.iter().map(|w| Array2::zeros(w.dim())).collect();
    let mut loss = 0.0;
    for g in &per_batch {
        loss += g.loss;
        for (acc, d) in grads.iter_mut().zip(&g.grads) {
            *acc += d;
        }
    }
    for acc in &mut grads {
        acc.mapv_inplace(|x| x / count);
    }
    let updated = weights.iter().zip(&grads).map(|(w, g)| w - &(g * lr)).collect();
    Ok(SyncStep {
        mean_loss: loss / count,
        grads,
        weights: updated,
    })
}

/// Glorot-scaled normal initialization.
pub fn init_weights(model: &GnnModel, seed: u64) -> Vec<Array2<f64>> {
    (0..model.num_layers())
        .map(|l| {
            let (fi, fo) = (model.dims[l], model.dims[l + 1]);
            let std = (2.0 / (fi + fo) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, l as u64, 5]));
            Array2::from_shape_simple_fn((fi, fo), || normal.sample(&mut rng))
        })
        .collect()
}

/// Fixed regression targets, one row per vertex.
pub fn random_targets(num_vertices: usize, dim: usize, seed: u64) -> Array2<f64> {
    let dist = Uniform::new(-1.0, 1.0).expect("valid range");
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 6]));
    Array2::from_shape_simple_fn((num_vertices, dim), || dist.sample(&mut rng))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryStep {
    pub epoch: usize,
    pub iteration: usize,
    pub batches: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    /// Weights after every step.
    pub weights: Vec<Vec<Array2<f64>>>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainSetup<'a> {
    pub graph: &'a Graph,
    pub plan: &'a PartitionPlan,
    pub model: &'a GnnModel,
    pub features: ArrayView2<'a, f64>,
    pub targets: ArrayView2<'a, f64>,
    pub lr: f64,
    pub seed: u64,
    pub opts: ExecOptions,
}

/// Trains for `epochs` epochs following the scheduler's iterations.
/// `shuffle_slots` reverses each iteration's slot order, to check that
/// intra-iteration order is irrelevant.
pub fn train(
    setup: &TrainSetup<'_>,
    initial: Vec<Array2<f64>>,
    policy: Policy,
    epochs: usize,
    shuffle_slots: bool,
) -> Result<Trajectory> {
    let p = setup.plan.num_parts();
    let quotas: Vec<usize> = (0..p)
        .map(|i| crate::sampler::partition_batch_quota(setup.plan, setup.model, i))
        .collect();
    let schedule = schedule_epoch(&quotas, policy)?;
    let mut weights = initial;
    let mut steps = Vec::new();
    let mut history = Vec::new();
    for epoch in 0..epochs {
        let targets = EpochTargets::new(setup.graph, setup.plan, epoch as u64, setup.seed);
        for it in &schedule {
            let mut slots = it.slots.clone();
            if shuffle_slots {
                slots.reverse();
            }
            let batches: Vec<MiniBatch> = slots
                .iter()
                .map(|s| {
                    sample_scheduled(
                        setup.graph,
                        &targets,
                        setup.model,
                        s.partition,
                        s.seq_no,
                        quotas[s.partition],
                        setup.seed,
                    )
                })
                .collect::<Result<_>>()?;
            let step = backward_and_sync(
                &batches,
                setup.features,
                setup.targets,
                &weights,
                setup.model,
                setup.lr,
                setup.opts,
            )?;
            weights = step.weights;
            steps.push(TrajectoryStep {
                epoch,
                iteration: it.iteration,
                batches: batches.len(),
                mean_loss: step.mean_loss,
            });
            history.push(weights.clone());
        }
    }
    Ok(Trajectory {
        steps,
        weights: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn single_layer(agg: Aggregator, fanout: usize) -> GnnModel {
        GnnModel::new(ModelKind::Graphsage, agg, vec![1, 1], vec![fanout], 1).unwrap()
    }

    #[test]
    fn single_edge_hand_value() {
        let model = single_layer(Aggregator::Sum, 1);
        let batch = MiniBatch {
            source_partition: 0,
            seq_no: 0,
            layers: vec![vec![1, 0], vec![1]],
            edges: vec![vec![(0, 1)]],
        };
        let x = array![[3.0], [5.0]];
        let out = forward(&batch, x.view(), &[array![[2.0]]], &model, ExecOptions::default()).unwrap();
        assert_eq!(out, array![[6.0]]);
    }

    #[test]
    fn self_only_batch_is_identity() {
        let model = GnnModel::new(ModelKind::Graphsage, Aggregator::Mean, vec![3, 3], vec![2], 2).unwrap();
        let batch = MiniBatch {
            source_partition: 0,
            seq_no: 0,
            layers: vec![vec![2, 0], vec![2, 0]],
            edges: vec![vec![]],
        };
        let x = array![[1.0, -2.0, 3.0], [0.0, 0.0, 0.0], [-4.0, 5.0, 6.5]];
        let out = forward(&batch, x.view(), &[Array2::eye(3)], &model, ExecOptions { relu: false }).unwrap();
        assert_eq!(out, array![[-4.0, 5.0, 6.5], [1.0, -2.0, 3.0]]);
    }

    #[test]
    fn mean_of_equal_neighbors_is_fixed_point() {
        let model = single_layer(Aggregator::Mean, 3);
        let batch = MiniBatch {
            source_partition: 0,
            seq_no: 0,
            layers: vec![vec![0, 1, 2, 3], vec![0]],
            edges: vec![vec![(1, 0), (2, 0), (3, 0)]],
        };
        let x = array![[9.0], [0.75], [0.75], [0.75]];
        let out = forward(&batch, x.view(), &[array![[1.0]]], &model, ExecOptions::default()).unwrap();
        assert_eq!(out, array![[0.75]]);
    }

    #[test]
    fn shape_errors() {
        let model = single_layer(Aggregator::Sum, 1);
        let batch = MiniBatch {
            source_partition: 0,
            seq_no: 0,
            layers: vec![vec![0], vec![0]],
            edges: vec![vec![]],
        };
        let x = array![[1.0]];
        assert!(matches!(
            forward(
                &batch,
                x.view(),
                &[Array2::zeros((2, 1))],
                &model,
                ExecOptions::default()
            ),
            Err(Error::Shape(_))
        ));
        let wide = array![[1.0, 2.0]];
        assert!(matches!(
            forward(&batch, wide.view(), &[array![[1.0]]], &model, ExecOptions::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_loss_leaves_weights() {
        let model = single_layer(Aggregator::Sum, 1);
        let batch = MiniBatch {
            source_partition: 0,
            seq_no: 0,
            layers: vec![vec![1, 0], vec![1]],
            edges: vec![vec![(0, 1)]],
        };
        let x = array![[3.0], [5.0]];
        let w = vec![array![[2.0]]];
        let t = array![[0.0], [6.0]];
        let step = backward_and_sync(&[batch], x.view(), t.view(), &w, &model, 0.1, ExecOptions::default()).unwrap();
        assert_eq!(step.mean_loss, 0.0);
        assert_eq!(step.grads[0], array![[0.0]]);
        assert_eq!(step.weights, w);
    }
}
