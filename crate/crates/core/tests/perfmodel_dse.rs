use approx::assert_relative_eq;
use fpgagnn::dse::{construct_search_space, profile_nvtps, sweep, DseOptions, Lattice, Workload};
use fpgagnn::model::{Aggregator, DatasetShape, GnnModel, ModelKind};
use fpgagnn::perfmodel::{evaluate_batch, resource_check, AcceleratorConfig, PlatformMeta, ResourceCoeffs};
use fpgagnn::sampler::BatchStats;
use proptest::prelude::*;

fn one_layer_stats(v0: f64, v1: f64, edges: f64, beta: f64) -> BatchStats {
    BatchStats {
        sizes: vec![v0, v1],
        edge_counts: vec![edges],
        bytes_local: 0.0,
        bytes_remote: 0.0,
        beta,
        feature_dim_split: false,
    }
}

#[test]
fn spreadsheet_single_layer() {
    let model = GnnModel::new(ModelKind::Graphsage, Aggregator::Mean, vec![602, 128], vec![10], 1024).unwrap();
    let platform = PlatformMeta::alveo_u250(1);
    let cfg = AcceleratorConfig::from_whole_fpga(8, 2048, 4).unwrap();
    for beta in [0.0, 0.5, 1.0] {
        let stats = one_layer_stats(5000.0, 1024.0, 10240.0, beta);
        let cost = evaluate_batch(&stats, &model, cfg, &platform, 16e9).unwrap();

        let bytes_per_die = 1250.0 * 602.0 * 4.0;
        let load = bytes_per_die * beta / 19.25e9 + bytes_per_die * (1.0 - beta) / 4e9;
        let compute = 2560.0 * 602.0 / (2.0 * 16.0 * 300e6);
        let update = 256.0 * 602.0 * 128.0 / (512.0 * 300e6);
        let layer = load.max(compute).max(update);
        let loss = 1024.0 * 128.0 / (2048.0 * 300e6);
        let gnn = layer + loss + layer;
        let sampling = 10240.0 / 45e6;
        let sync = 2.0 * 602.0 * 128.0 * 4.0 / 16e9;

        assert_relative_eq!(cost.layers[0].t_load, load, max_relative = 1e-12);
        assert_relative_eq!(cost.layers[0].t_compute, compute, max_relative = 1e-12);
        assert_relative_eq!(cost.layers[0].t_update, update, max_relative = 1e-12);
        assert_relative_eq!(cost.t_gnn, gnn, max_relative = 1e-12);
        assert_relative_eq!(cost.t_sampling, sampling, max_relative = 1e-12);
        assert_relative_eq!(cost.t_parallel, gnn.max(sampling) + sync, max_relative = 1e-12);
    }
    let all_pcie = evaluate_batch(
        &one_layer_stats(5000.0, 1024.0, 10240.0, 0.0),
        &model,
        cfg,
        &platform,
        16e9,
    )
    .unwrap();
    assert_relative_eq!(all_pcie.t_parallel, 1.543741333e-3, max_relative = 1e-9);
}

#[test]
fn upper_layers_read_local_memory() {
    let model = GnnModel::graphsage([100, 64, 8]);
    let platform = PlatformMeta::alveo_u250(1);
    let stats = BatchStats {
        sizes: vec![4000.0, 800.0, 100.0],
        edge_counts: vec![2000.0, 500.0],
        bytes_local: 0.0,
        bytes_remote: 0.0,
        beta: 0.0,
        feature_dim_split: false,
    };
    let cost = evaluate_batch(&stats, &model, AcceleratorConfig::new(4, 64), &platform, 16e9).unwrap();
    assert_relative_eq!(
        cost.layers[1].t_load,
        200.0 * 64.0 * 4.0 / 19.25e9,
        max_relative = 1e-12
    );
}

#[derive(Debug, Clone)]
struct Draw {
    v0: f64,
    v1: f64,
    v2: f64,
    e1: f64,
    e2: f64,
    beta: f64,
    n: usize,
    m: usize,
    ddr: f64,
    pcie: f64,
}

fn draw() -> impl Strategy<Value = Draw> {
    (
        (1.0f64..2e5, 1.0f64..2e4, 1.0f64..2e3, 1.0f64..1e6, 1.0f64..1e5),
        (0.0f64..=1.0, 1usize..64, 1usize..1024, 1e9f64..4e10, 1e9f64..6e10),
    )
        .prop_map(|((v0, v1, v2, e1, e2), (beta, n, m, ddr, pcie))| Draw {
            v0,
            v1,
            v2,
            e1,
            e2,
            beta,
            n,
            m,
            ddr,
            pcie,
        })
        .prop_filter("die memory at least as fast as the link", |d| 4.0 * d.ddr >= d.pcie)
}

fn time_of(d: &Draw) -> f64 {
    let model = GnnModel::graphsage([256, 128, 32]);
    let mut platform = PlatformMeta::alveo_u250(1);
    platform.die.ddr_bw = d.ddr;
    let stats = BatchStats {
        sizes: vec![d.v0, d.v1, d.v2],
        edge_counts: vec![d.e1, d.e2],
        bytes_local: 0.0,
        bytes_remote: 0.0,
        beta: d.beta,
        feature_dim_split: false,
    };
    evaluate_batch(&stats, &model, AcceleratorConfig::new(d.n, d.m), &platform, d.pcie)
        .unwrap()
        .t_parallel
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn iteration_time_monotone(d in draw(), bump in 1.0f64..4.0, k in 0usize..7) {
        let base = time_of(&d);
        let mut more = d.clone();
        let slower_or_equal = match k {
            0 => { more.n += 1; false }
            1 => { more.m += 1; false }
            2 => { more.beta = (d.beta + (1.0 - d.beta) / bump).min(1.0); false }
            3 => { more.pcie = (d.pcie * bump).min(4.0 * d.ddr); false }
            4 => { more.v0 *= bump; true }
            5 => { more.e1 *= bump; true }
            _ => { more.e2 *= bump; true }
        };
        let after = time_of(&more);
        let slack = 1e-12 * base;
        if slower_or_equal {
            prop_assert!(after >= base - slack, "{k}: {base} -> {after}");
        } else {
            prop_assert!(after <= base + slack, "{k}: {base} -> {after}");
        }
    }
}

fn grant(platform: &PlatformMeta) -> f64 {
    platform
        .pcie_link_bw
        .min(platform.cpu_mem_bw / platform.num_fpgas as f64)
}

fn brute_mean(profile: &[Workload], cfg: AcceleratorConfig, platform: &PlatformMeta) -> f64 {
    let p = platform.num_fpgas as f64;
    let sum: f64 = profile
        .iter()
        .map(|w| {
            let c = evaluate_batch(&w.stats, &w.model, cfg, platform, grant(platform)).unwrap();
            p * w.stats.sizes.iter().sum::<f64>() / (c.t_gnn + c.t_gradient_sync)
        })
        .sum();
    sum / profile.len() as f64
}

fn test_profile() -> Vec<Workload> {
    let model = GnnModel::graphsage([602, 128, 41]);
    let mut profile = Workload::expected_suite(&model, &DatasetShape::benchmark_suite(), 0.4, 4).unwrap();
    profile.push(Workload {
        model: model.clone(),
        stats: BatchStats {
            sizes: vec![30_000.0, 9_000.0, 1024.0],
            edge_counts: vec![90_000.0, 10_240.0],
            bytes_local: 0.0,
            bytes_remote: 0.0,
            beta: 0.7,
            feature_dim_split: false,
        },
    });
    profile
}

#[test]
fn exhaustive_sweep_matches_brute_force() {
    let platform = PlatformMeta::alveo_u250(4);
    let coeffs = ResourceCoeffs::alveo_u250_fitted();
    let profile = test_profile();
    let options = DseOptions {
        exhaustive: true,
        lattice: Lattice::Linear,
        n_limit: Some(8),
        m_limit: Some(64),
    };
    let result = sweep(&profile, &platform, &coeffs, options).unwrap();
    let mut best: Option<(f64, AcceleratorConfig)> = None;
    let mut evaluated = 0;
    for n in 1..=8 {
        for m in 1..=64 {
            let cfg = AcceleratorConfig::new(n, m);
            let usage = resource_check(cfg, &coeffs, &platform.die).unwrap();
            let point = result
                .points
                .iter()
                .find(|p| p.config == cfg)
                .expect("grid point present");
            assert_eq!(point.feasible, usage.feasible);
            if !usage.feasible {
                continue;
            }
            evaluated += 1;
            let brute = brute_mean(&profile, cfg, &platform);
            assert_relative_eq!(point.nvtps.unwrap(), brute, max_relative = 1e-12);
            assert_relative_eq!(
                profile_nvtps(&profile, cfg, &platform).unwrap(),
                brute,
                max_relative = 1e-12
            );
            if best.is_none_or(|(b, _)| brute > b) {
                best = Some((brute, cfg));
            }
        }
    }
    assert_eq!(evaluated, result.ranked.len());
    assert_eq!(result.optimum().config, best.unwrap().1);

    let doubled: Vec<Workload> = profile.iter().chain(profile.iter()).cloned().collect();
    let again = sweep(&doubled, &platform, &coeffs, options).unwrap();
    assert_eq!(again.optimum().config, result.optimum().config);
}

#[test]
fn heuristic_sweep_finds_exhaustive_optimum_on_small_grid() {
    let platform = PlatformMeta::alveo_u250(4);
    let coeffs = ResourceCoeffs::alveo_u250_fitted();
    let profile = test_profile();
    let limits = |exhaustive| DseOptions {
        exhaustive,
        lattice: Lattice::PowerOfTwo,
        n_limit: Some(16),
        m_limit: Some(1024),
    };
    let full = sweep(&profile, &platform, &coeffs, limits(true)).unwrap();
    let fast = sweep(&profile, &platform, &coeffs, limits(false)).unwrap();
    assert_eq!(full.optimum().config, fast.optimum().config);
}

#[test]
fn search_space_bounds_are_tight() {
    let platform = PlatformMeta::alveo_u250(1);
    let coeffs = ResourceCoeffs::alveo_u250_fitted();
    let space = construct_search_space(&coeffs, &platform.die).unwrap();
    let fits = |n, m| {
        resource_check(AcceleratorConfig::new(n, m), &coeffs, &platform.die)
            .unwrap()
            .feasible
    };
    assert!(fits(space.n_max, 1));
    assert!(!fits(space.n_max + 1, 1));
    assert!(fits(1, space.m_max));
    assert!(!fits(1, space.m_max + 1));
}

#[test]
fn fitted_coefficients_reproduce_reference_utilization() {
    let coeffs = ResourceCoeffs::alveo_u250_fitted();
    let die = PlatformMeta::alveo_u250(1).die;
    for ((n, m), dsp, lut) in [((8, 2048), 0.90, 0.72), ((16, 1024), 0.56, 0.65)] {
        let usage = resource_check(AcceleratorConfig::from_whole_fpga(n, m, 4).unwrap(), &coeffs, &die).unwrap();
        assert_relative_eq!(usage.dsp_util, dsp, max_relative = 1e-9);
        assert_relative_eq!(usage.lut_util, lut, max_relative = 1e-9);
        assert!(usage.feasible);
    }
}
