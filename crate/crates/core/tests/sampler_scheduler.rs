use std::collections::BTreeMap;

use fpgagnn::graph::{generate_synthetic, Graph, SyntheticKind};
use fpgagnn::model::{Aggregator, GnnModel, ModelKind};
use fpgagnn::partition::{partition_balanced, partition_hash, Objective};
use fpgagnn::sampler::{partition_batch_quota, sample_minibatch, sample_scheduled, EpochTargets, MiniBatch};
use fpgagnn::scheduler::{epoch_totals, schedule_epoch, schedule_epoch_with, ExtraAccounting, Policy, Stage};
use proptest::prelude::*;

fn model(fanouts: Vec<usize>, batch: usize) -> GnnModel {
    let dims = vec![4; fanouts.len() + 1];
    GnnModel::new(ModelKind::Graphsage, Aggregator::Mean, dims, fanouts, batch).unwrap()
}

fn check_batch(g: &Graph, b: &MiniBatch, m: &GnnModel) {
    let layers = m.num_layers();
    assert_eq!(b.layers.len(), layers + 1);
    for l in 1..=layers {
        let upper = &b.layers[l];
        let lower = &b.layers[l - 1];
        assert_eq!(&lower[..upper.len()], &upper[..]);
        let mut per_target: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for &(u, v) in &b.edges[l - 1] {
            assert!(g.has_edge(u, v), "({u}, {v}) is not an edge");
            assert!(lower.contains(&u));
            per_target.entry(v).or_default().push(u);
        }
        for &v in upper {
            let drawn = per_target.remove(&v).unwrap_or_default();
            let mut distinct = drawn.clone();
            distinct.sort_unstable();
            distinct.dedup();
            assert_eq!(distinct.len(), drawn.len());
            assert_eq!(drawn.len(), m.fanout(l).min(g.in_degree(v)));
        }
        assert!(per_target.is_empty());
        let mut unique = lower.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), lower.len());
        assert!(lower.len() <= upper.len() * (1 + m.fanout(l)));
    }
}

#[test]
fn sampled_edges_exist_and_respect_fanouts() {
    let g = generate_synthetic(SyntheticKind::PowerLaw, 3_000, 8, 1.5, 2)
        .unwrap()
        .with_train_fraction(0.4, 2)
        .unwrap();
    let m = model(vec![6, 3], 50);
    let plan = partition_balanced(&g, 3, Objective::TrainVertices, 2).unwrap();
    for epoch in 0..2 {
        let targets = EpochTargets::new(&g, &plan, epoch, 5);
        for part in 0..3 {
            for i in 0..partition_batch_quota(&plan, &m, part) {
                check_batch(&g, &sample_minibatch(&g, &targets, part, &m, i, 5).unwrap(), &m);
            }
        }
    }
}

#[test]
fn epoch_targets_cover_train_set_once() {
    let g = generate_synthetic(SyntheticKind::Uniform, 2_500, 4, 0.0, 7)
        .unwrap()
        .with_train_fraction(0.37, 7)
        .unwrap();
    let m = model(vec![2], 64);
    for plan in [
        partition_balanced(&g, 4, Objective::TrainVertices, 1).unwrap(),
        partition_hash(&g, 3).unwrap(),
    ] {
        let targets = EpochTargets::new(&g, &plan, 3, 11);
        let mut seen = vec![0usize; g.num_vertices()];
        for part in 0..plan.num_parts() {
            let quota = partition_batch_quota(&plan, &m, part);
            for i in 0..quota {
                let b = sample_minibatch(&g, &targets, part, &m, i, 11).unwrap();
                for &v in b.targets() {
                    seen[v as usize] += 1;
                }
            }
            assert!(sample_minibatch(&g, &targets, part, &m, quota, 11).is_err());
        }
        for v in 0..g.num_vertices() as u32 {
            assert_eq!(seen[v as usize], g.is_train(v) as usize, "vertex {v}");
        }
    }
}

#[test]
fn scheduled_binding_is_reproducible() {
    let g = generate_synthetic(SyntheticKind::PowerLaw, 1_000, 6, 1.5, 3)
        .unwrap()
        .with_train_fraction(0.5, 3)
        .unwrap();
    let m = model(vec![4, 2], 32);
    let plan = partition_balanced(&g, 2, Objective::TrainVertices, 3).unwrap();
    let targets = EpochTargets::new(&g, &plan, 1, 9);
    let quota = partition_batch_quota(&plan, &m, 0);
    let a = sample_scheduled(&g, &targets, &m, 0, 2, quota, 9).unwrap();
    let b = sample_scheduled(&g, &targets, &m, 0, 2, quota, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, sample_minibatch(&g, &targets, 0, &m, 2, 9).unwrap());
    let wrapped = sample_scheduled(&g, &targets, &m, 0, quota + 2, quota, 9).unwrap();
    assert_eq!(wrapped.targets(), a.targets());
}

#[test]
fn worked_example_five_three_four() {
    let plans = schedule_epoch(&[5, 3, 4], Policy::TwoStage).unwrap();
    assert_eq!(plans.len(), 4);
    assert!(plans[..3].iter().all(|p| p.stage == Stage::Stage1));
    assert_eq!(plans[3].stage, Stage::Stage2);
    let last: Vec<(usize, usize, usize)> = plans[3].slots.iter().map(|s| (s.fpga, s.partition, s.seq_no)).collect();
    assert_eq!(last, vec![(0, 0, 3), (2, 2, 3), (1, 0, 4)]);
    let unbalanced = schedule_epoch(&[5, 3, 4], Policy::Unbalanced).unwrap();
    assert_eq!(unbalanced[3].max_load(3), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn two_stage_invariants(quotas in proptest::collection::vec(0usize..30, 1..9)) {
        let p = quotas.len();
        let plans = schedule_epoch(&quotas, Policy::TwoStage).unwrap();
        let total: usize = quotas.iter().sum();
        prop_assert_eq!(plans.len(), total.div_ceil(p));
        for plan in &plans {
            prop_assert!(plan.max_load(p) <= 1);
            for s in &plan.slots {
                prop_assert_eq!(s.extra, s.fpga != s.partition);
            }
        }
        let mut all: Vec<(usize, usize)> = plans.iter().flat_map(|pl| pl.batch_multiset()).collect();
        all.sort_unstable();
        let expected: Vec<(usize, usize)> = quotas
            .iter()
            .enumerate()
            .flat_map(|(i, &q)| (0..q).map(move |k| (i, k)))
            .collect();
        prop_assert_eq!(all, expected);
        let totals = epoch_totals(&plans, p);
        prop_assert_eq!(totals.per_partition, quotas.clone());
        prop_assert_eq!(totals.per_fpga.iter().sum::<usize>(), total);
    }

    #[test]
    fn policies_schedule_the_same_batches(quotas in proptest::collection::vec(0usize..20, 1..7)) {
        let a = schedule_epoch(&quotas, Policy::TwoStage).unwrap();
        let b = schedule_epoch(&quotas, Policy::Unbalanced).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.batch_multiset(), y.batch_multiset());
            for s in &y.slots {
                prop_assert_eq!(s.fpga, s.partition);
            }
        }
    }

    #[test]
    fn oversampling_fills_every_slot(quotas in proptest::collection::vec(1usize..20, 1..7)) {
        let p = quotas.len();
        let plans = schedule_epoch_with(&quotas, Policy::TwoStage, ExtraAccounting::Oversample).unwrap();
        prop_assert_eq!(plans.len(), *quotas.iter().max().unwrap());
        for (k, plan) in plans.iter().enumerate() {
            let active = quotas.iter().filter(|&&q| q > k).count();
            let expected = if active > 0 { p } else { 0 };
            prop_assert_eq!(plan.slots.len(), expected);
        }
    }
}
