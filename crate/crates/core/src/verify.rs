//! Self-check suite for the reference executor: dense-matrix forward
//! oracle, finite-difference gradients and schedule-invariant training.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::graph::{generate_synthetic, Graph, SyntheticKind, VertexId};
use crate::model::{Aggregator, GnnModel, ModelKind};
use crate::partition::partition_balanced;
use crate::refexec::{self, batch_gradient, forward, mse_loss, ExecOptions, TrainSetup};
use crate::sampler::{sample_from_targets, stream_seed, MiniBatch};
use crate::scheduler::Policy;

/// Dense `|V^l| x |V^(l-1)|` aggregation matrix built from the edge list.
pub fn dense_aggregation(batch: &MiniBatch, l: usize, model: &GnnModel) -> Array2<f64> {
    let lower = &batch.layers[l - 1];
    let upper = &batch.layers[l];
    let index = |set: &[VertexId], v: VertexId| set.iter().position(|&x| x == v).expect("vertex in layer");
    let mut a = Array2::<f64>::zeros((upper.len(), lower.len()));
    for &(u, v) in &batch.edges[l - 1] {
        a[[index(upper, v), index(lower, u)]] += 1.0;
    }
    let row_deg: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    let col_deg: Vec<f64> = a.columns().into_iter().map(|c| c.sum()).collect();
    for ((r, c), x) in a.indexed_iter_mut() {
        if *x == 0.0 {
            continue;
        }
        *x *= match (model.kind, model.aggregator) {
            (ModelKind::Gcn, _) => 1.0 / (row_deg[r] * col_deg[c]).sqrt(),
            (_, Aggregator::Sum) => 1.0,
            (_, Aggregator::Mean) => 1.0 / row_deg[r],
        };
    }
    for (r, &v) in upper.iter().enumerate() {
        if row_deg[r] == 0.0 {
            a[[r, index(lower, v)]] = 1.0;
        }
    }
    a
}

pub fn dense_forward(
    batch: &MiniBatch,
    features: ArrayView2<f64>,
    weights: &[Array2<f64>],
    model: &GnnModel,
    opts: ExecOptions,
) -> Array2<f64> {
    let mut h = Array2::<f64>::zeros((batch.layers[0].len(), features.ncols()));
    for (i, &v) in batch.layers[0].iter().enumerate() {
        h.row_mut(i).assign(&features.row(v as usize));
    }
    for l in 1..=model.num_layers() {
        let z = dense_aggregation(batch, l, model).dot(&h).dot(&weights[l - 1]);
        h = if opts.relu { z.mapv(|x| x.max(0.0)) } else { z };
    }
    h
}

/// Largest element-wise error relative to the larger magnitude, with
/// `floor` guarding near-zero entries.
pub fn max_relative_error(a: &Array2<f64>, b: &Array2<f64>, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `||a - b|| / max(||a||, ||b||, floor)` in the Frobenius norm.
pub fn norm_relative_error(a: &Array2<f64>, b: &Array2<f64>, floor: f64) -> f64 {
    let norm = |m: &Array2<f64>| m.iter().map(|x| x * x).sum::<f64>().sqrt();
    norm(&(a - b)) / norm(a).max(norm(b)).max(floor)
}

/// A random small problem: graph, model, features, targets and weights.
pub struct Problem {
    pub graph: Graph,
    pub model: GnnModel,
    pub features: Array2<f64>,
    pub targets: Array2<f64>,
    pub weights: Vec<Array2<f64>>,
}

pub fn random_problem(seed: u64, vertices: usize, max_dim: usize) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 7]));
    let layers = rng.random_range(1..=3);
    let dims: Vec<usize> = (0..=layers).map(|_| rng.random_range(1..=max_dim)).collect();
    let fanouts: Vec<usize> = (0..layers).map(|_| rng.random_range(1..=4)).collect();
    let (kind, aggregator) = match rng.random_range(0..3) {
        0 => (ModelKind::Gcn, Aggregator::Sum),
        1 => (ModelKind::Graphsage, Aggregator::Mean),
        _ => (ModelKind::Custom, Aggregator::Sum),
    };
    let model = GnnModel::new(kind, aggregator, dims.clone(), fanouts, rng.random_range(1..=8))?;
    let avg = rng.random_range(1..=4).min(vertices.saturating_sub(1) / 2).max(1);
    let graph = generate_synthetic(SyntheticKind::Uniform, vertices, avg, 1.0, seed)?
        .with_feature_dim(dims[0])?
        .with_random_features(seed)?;
    let features = graph.features().expect("random features").clone();
    let targets = refexec::random_targets(vertices, dims[layers], seed);
    let weights = refexec::init_weights(&model, seed);
    Ok(Problem {
        graph,
        model,
        features,
        targets,
        weights,
    })
}

pub fn random_batch(p: &Problem, seed: u64) -> MiniBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 8]));
    let n = p.graph.num_vertices();
    let targets: Vec<VertexId> = (0..p.model.batch_targets)
        .map(|_| rng.random_range(0..n) as VertexId)
        .collect();
    sample_from_targets(&p.graph, &targets, &p.model, 0, 0, rng.random())
}

/// Central-difference gradient of the batch loss for every weight entry.
pub fn finite_difference(p: &Problem, batch: &MiniBatch, step: f64, opts: ExecOptions) -> Result<Vec<Array2<f64>>> {
    let t: Array2<f64> = {
        let rows: Vec<usize> = batch.targets().iter().map(|&v| v as usize).collect();
        p.targets.select(ndarray::Axis(0), &rows)
    };
    let loss =
        |w: &[Array2<f64>]| -> Result<f64> { Ok(mse_loss(&forward(batch, p.features.view(), w, &p.model, opts)?, &t)) };
    let mut grads = Vec::new();
    for l in 0..p.weights.len() {
        let mut g = Array2::zeros(p.weights[l].dim());
        for idx in ndarray::indices(p.weights[l].dim()) {
            let mut w = p.weights.clone();
            w[l][idx] += step;
            let up = loss(&w)?;
            w[l][idx] -= 2.0 * step;
            let down = loss(&w)?;
            g[idx] = (up - down) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub forward_batches: usize,
    pub forward_max_rel_err: f64,
    pub gradient_checks: usize,
    pub gradient_max_rel_err: f64,
    pub trajectory_steps: usize,
    pub trajectories_identical: bool,
    pub forward_ok: bool,
    pub gradient_ok: bool,
    pub passed: bool,
}

pub const FORWARD_TOL: f64 = 1e-5;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-4;

/// Trains a `p`-way partitioned graph under both scheduling policies
/// (and with each iteration's slots reversed) and reports whether every
/// step's weights agree bit for bit.
pub fn trajectories_match(vertices: usize, p: usize, epochs: usize, seed: u64) -> Result<(usize, bool)> {
    let model = GnnModel::new(ModelKind::Graphsage, Aggregator::Mean, vec![8, 6, 4], vec![4, 3], 16)?;
    let graph = generate_synthetic(SyntheticKind::PowerLaw, vertices, 4, 1.5, seed)?
        .with_train_fraction(0.5, seed)?
        .with_feature_dim(8)?
        .with_random_features(seed)?;
    let plan = partition_balanced(&graph, p, crate::partition::Objective::Edges, seed)?;
    let targets = refexec::random_targets(vertices, 4, seed);
    let setup = TrainSetup {
        graph: &graph,
        plan: &plan,
        model: &model,
        features: graph.features().expect("random features").view(),
        targets: targets.view(),
        lr: 0.05,
        seed,
        opts: ExecOptions::default(),
    };
    let init = refexec::init_weights(&model, seed);
    let a = refexec::train(&setup, init.clone(), Policy::TwoStage, epochs, false)?;
    let b = refexec::train(&setup, init.clone(), Policy::Unbalanced, epochs, false)?;
    let c = refexec::train(&setup, init, Policy::TwoStage, epochs, true)?;
    Ok((a.weights.len(), a.weights == b.weights && a.weights == c.weights))
}

pub fn run_suite(seed: u64, forward_batches: usize, gradient_checks: usize) -> Result<VerifyReport> {
    let mut forward_err: f64 = 0.0;
    for k in 0..forward_batches {
        let p = random_problem(stream_seed(&[seed, k as u64, 9]), 50, 8)?;
        let batch = random_batch(&p, k as u64);
        let opts = ExecOptions { relu: k % 2 == 0 };
        let fast = forward(&batch, p.features.view(), &p.weights, &p.model, opts)?;
        let dense = dense_forward(&batch, p.features.view(), &p.weights, &p.model, opts);
        forward_err = forward_err.max(max_relative_error(&fast, &dense, 1e-12));
    }
    let mut grad_err: f64 = 0.0;
    for k in 0..gradient_checks {
        let p = random_problem(stream_seed(&[seed, k as u64, 10]), 20, 8)?;
        let batch = random_batch(&p, k as u64);
        let opts = ExecOptions { relu: k % 2 == 0 };
        let analytic = batch_gradient(&batch, p.features.view(), p.targets.view(), &p.weights, &p.model, opts)?;
        let numeric = finite_difference(&p, &batch, FD_STEP, opts)?;
        for (a, n) in analytic.grads.iter().zip(&numeric) {
            grad_err = grad_err.max(norm_relative_error(a, n, 1e-8));
        }
    }
    let (steps, identical) = trajectories_match(500, 3, 5, seed)?;
    let forward_ok = forward_err <= FORWARD_TOL;
    let gradient_ok = grad_err <= GRADIENT_TOL;
    Ok(VerifyReport {
        forward_batches,
        forward_max_rel_err: forward_err,
        gradient_checks,
        gradient_max_rel_err: grad_err,
        trajectory_steps: steps,
        trajectories_identical: identical,
        forward_ok,
        gradient_ok,
        passed: forward_ok && gradient_ok && identical,
    })
}
