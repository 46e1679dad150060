use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use fpgagnn::config::{ProfileSource, RunConfig};
use fpgagnn::dse::{
    calibrate_dsp_coeffs, calibrate_lut_coeffs, sweep as dse_sweep, DseResult, Workload, U250_REFERENCE_POINTS,
};
use fpgagnn::graph::{degree_stats, Graph};
use fpgagnn::model::{DatasetShape, GnnModel};
use fpgagnn::partition::Objective;
use fpgagnn::perfmodel::{resource_check, AcceleratorConfig, PlatformMeta, ResourceCoeffs};
use fpgagnn::sampler::{batch_stats, sample_minibatch, BatchStats, EpochTargets};
use fpgagnn::simulator::{deploy, run_epoch, scalability_sweep, write_speedup_csv, Algorithm, SimConfig};
use fpgagnn::verify;
use fpgagnn::Error;

#[derive(Parser)]
#[command(
    name = "fpgagnn",
    version,
    about = "Design-space exploration and simulation of multi-FPGA GNN training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model file replacing the config's [model] section
    #[arg(long)]
    model: Option<PathBuf>,
    /// Overrides every seed in the configuration
    #[arg(long)]
    seed: Option<u64>,
    /// Omit the timestamp from reports
    #[arg(long)]
    deterministic: bool,
    /// Report directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct SimFlags {
    #[arg(long, value_parser = parse_algorithm)]
    algorithm: Option<Algorithm>,
    /// Enable workload balancing
    #[arg(long, conflicts_with = "no_wb")]
    wb: bool,
    #[arg(long)]
    no_wb: bool,
    /// Enable direct CPU fetch of remote features
    #[arg(long, conflicts_with = "no_dc")]
    dc: bool,
    #[arg(long)]
    no_dc: bool,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Rank accelerator configurations by modeled throughput
    Dse {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate training epochs on the configured platform
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimFlags,
        #[arg(long)]
        fpgas: Option<usize>,
    },
    /// Throughput and speedup over a range of FPGA counts
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimFlags,
        /// Range such as `1..16` (inclusive) or a single count
        #[arg(long, default_value = "1..16", value_parser = parse_range)]
        fpgas: FpgaRange,
    },
    /// Partition and feature-store statistics
    PartitionStats {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_algorithm)]
        algorithm: Option<Algorithm>,
        #[arg(long)]
        fpgas: Option<usize>,
    },
    /// Numeric self-checks of the reference executor
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        forward_batches: usize,
        #[arg(long, default_value_t = 20)]
        gradient_checks: usize,
    },
    /// Fit resource coefficients from two measured designs
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Whole-FPGA design `n,m,dsp_util,lut_util`; give exactly two
        #[arg(long = "point", value_parser = parse_point)]
        points: Vec<(usize, usize, f64, f64)>,
        #[arg(long, default_value_t = 0.25)]
        rho3_ratio: f64,
    },
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    match s.to_ascii_lowercase().as_str() {
        "distdgl" => Ok(Algorithm::Distdgl),
        "pagraph" => Ok(Algorithm::Pagraph),
        "p3" => Ok(Algorithm::P3),
        "hash" => Ok(Algorithm::Hash),
        other => Err(format!("unknown algorithm `{other}` (distdgl, pagraph, p3, hash)")),
    }
}

#[derive(Debug, Clone)]
struct FpgaRange(Vec<usize>);

fn parse_range(s: &str) -> Result<FpgaRange, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    let (lo, hi) = match s.split_once("..") {
        Some((a, b)) => (num(a)?, num(b.trim_start_matches('='))?),
        None => (num(s)?, num(s)?),
    };
    if lo == 0 || lo > hi {
        return Err(format!("empty or zero-based range `{s}`"));
    }
    Ok(FpgaRange((lo..=hi).collect()))
}

fn parse_point(s: &str) -> Result<(usize, usize, f64, f64), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err("expected n,m,dsp_util,lut_util".into());
    }
    let int = |t: &str| t.parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    let real = |t: &str| t.parse::<f64>().map_err(|e| format!("`{t}`: {e}"));
    Ok((int(parts[0])?, int(parts[1])?, real(parts[2])?, real(parts[3])?))
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(Error::Infeasible(_) | Error::EmptyDesignSpace(_)) => 2,
            Failure::Core(Error::Invariant(_) | Error::Exhausted { .. }) => 3,
            Failure::Core(_) => 1,
            Failure::Verification(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

type Outcome = Result<(), Failure>;

struct Context {
    cfg: RunConfig,
    common: Common,
}

impl Context {
    fn new(common: &Common) -> Result<Self, Failure> {
        let mut cfg = match &common.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(path) = &common.model {
            cfg.load_model_file(path)?;
        }
        if let Some(seed) = common.seed {
            cfg.graph.seed = seed;
            cfg.simulation.seed = seed;
        }
        cfg.validate()?;
        fs::create_dir_all(&common.out)?;
        Ok(Context {
            cfg,
            common: common.clone(),
        })
    }

    fn platform(&self) -> Result<PlatformMeta, Failure> {
        Ok(self.cfg.platform.to_meta()?)
    }

    fn coeffs(&self) -> Result<ResourceCoeffs, Failure> {
        Ok(self.cfg.resources.to_coeffs()?)
    }

    fn model(&self) -> Result<GnnModel, Failure> {
        Ok(self.cfg.model.to_model()?)
    }

    fn graph(&self, model: &GnnModel) -> Result<Graph, Failure> {
        Ok(self.cfg.graph.build(&self.cfg.base_dir, model.dims[0])?)
    }

    fn sim(&self, flags: &SimFlags) -> Result<SimConfig, Failure> {
        let mut sim = self.cfg.simulation.to_sim()?;
        if let Some(a) = flags.algorithm {
            sim.algorithm = a;
        }
        if flags.wb {
            sim.workload_balance = true;
        }
        if flags.no_wb {
            sim.workload_balance = false;
        }
        if flags.dc {
            sim.direct_cpu_fetch = true;
        }
        if flags.no_dc {
            sim.direct_cpu_fetch = false;
        }
        if let Some(e) = flags.epochs {
            if e == 0 {
                return Err(Error::Config("--epochs: must be at least 1".into()).into());
            }
            sim.epochs = e;
        }
        Ok(sim)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.common.out.join(name)
    }

    /// Writes `body` with a `generated_at` field unless deterministic.
    fn write_json(&self, name: &str, mut body: Value) -> Result<PathBuf, Failure> {
        if !self.common.deterministic {
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            body["generated_at"] = json!(secs);
        }
        let path = self.path(name);
        let text = serde_json::to_string_pretty(&body).map_err(|e| Error::Invariant(e.to_string()))?;
        fs::write(&path, text + "\n")?;
        Ok(path)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, Failure> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    fn profile(&self, model: &GnnModel, platform: &PlatformMeta) -> Result<Vec<Workload>, Failure> {
        let dse = &self.cfg.dse;
        match dse.profile {
            ProfileSource::DatasetShapes => Ok(Workload::expected_suite(
                model,
                &DatasetShape::benchmark_suite(),
                dse.beta,
                platform.feat_bytes as u64,
            )?),
            ProfileSource::Sampled => {
                let g = self.graph(model)?;
                let sim = self.cfg.simulation.to_sim()?;
                let deployment = deploy(&g, model, platform.num_fpgas, &sim)?;
                let targets = EpochTargets::new(&g, &deployment.plan, 0, sim.seed);
                let mut stats: Vec<BatchStats> = Vec::new();
                'outer: for index in 0.. {
                    let mut any = false;
                    for part in 0..platform.num_fpgas {
                        if index >= deployment.quotas[part] {
                            continue;
                        }
                        any = true;
                        let b = sample_minibatch(&g, &targets, part, model, index, sim.seed)?;
                        stats.push(batch_stats(&b, &deployment.store, part, model));
                        if stats.len() == dse.profile_batches {
                            break 'outer;
                        }
                    }
                    if !any {
                        break;
                    }
                }
                if stats.is_empty() {
                    return Err(Error::Config("graph: no training vertices to profile".into()).into());
                }
                Ok(Workload::sampled(model, &stats))
            }
        }
    }

    fn run_dse(&self) -> Result<DseResult, Failure> {
        let platform = self.platform()?;
        let model = self.model()?;
        let profile = self.profile(&model, &platform)?;
        Ok(dse_sweep(
            &profile,
            &platform,
            &self.coeffs()?,
            self.cfg.dse.options()?,
        )?)
    }

    /// The configured accelerator, or the DSE optimum.
    fn accelerator(&self) -> Result<AcceleratorConfig, Failure> {
        match self.cfg.simulation.accelerator(self.cfg.platform.dies_per_fpga)? {
            Some(cfg) => Ok(cfg),
            None => Ok(self.run_dse()?.optimum().config),
        }
    }
}

fn print_rows(header: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<String>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    println!("{}", line(header.iter().map(|s| s.to_string()).collect()));
    for r in rows {
        println!("{}", line(r.clone()));
    }
}

fn emit_summary<T: Serialize>(summary: &T) {
    if let Ok(text) = serde_json::to_string(summary) {
        println!("{text}");
    }
}

fn cmd_dse(common: &Common) -> Outcome {
    let ctx = Context::new(common)?;
    let platform = ctx.platform()?;
    let res = ctx.run_dse()?;
    let best = res.optimum();
    let top: Vec<_> = res.ranked.iter().take(10).collect();
    let rows: Vec<Vec<String>> = top
        .iter()
        .enumerate()
        .map(|(i, p)| {
            vec![
                (i + 1).to_string(),
                format!("({}, {})", p.whole_n, p.whole_m),
                format!("({}, {})", p.config.n, p.config.m),
                format!("{:.3}", p.dsp_util),
                format!("{:.3}", p.lut_util),
                format!("{:.2}", p.nvtps.unwrap_or(0.0) / 1e6),
            ]
        })
        .collect();
    print_rows(&["rank", "fpga (n, m)", "die (n, m)", "dsp", "lut", "MNVTPS"], &rows);
    res.write_csv(ctx.create("dse.csv")?)?;
    let summary = json!({
        "command": "dse",
        "optimum": best,
        "search_space": res.search_space,
        "dies_per_fpga": platform.dies_per_fpga,
        "fpgas": platform.num_fpgas,
        "coefficients": ctx.coeffs()?,
        "evaluated": res.points.len(),
        "feasible": res.ranked.len(),
        "top": top,
    });
    ctx.write_json("dse.json", summary.clone())?;
    emit_summary(&json!({"command": "dse", "optimum": best}));
    Ok(())
}

fn cmd_simulate(common: &Common, flags: &SimFlags, fpgas: Option<usize>) -> Outcome {
    let ctx = Context::new(common)?;
    let platform = ctx.platform()?;
    let model = ctx.model()?;
    let mut sim = ctx.sim(flags)?;
    sim.fpga_count_override = fpgas;
    let accel = ctx.accelerator()?;
    let g = ctx.graph(&model)?;
    let report = run_epoch(&g, &model, &platform, &ctx.coeffs()?, accel, &sim)?;
    let rows: Vec<Vec<String>> = report
        .epoch_times
        .iter()
        .enumerate()
        .map(|(e, t)| vec![e.to_string(), format!("{:.6}", t)])
        .collect();
    print_rows(&["epoch", "time_s"], &rows);
    println!(
        "algorithm {:?}  fpgas {}  wb {}  dc {}  nvtps {:.3e}  iterations/epoch {}",
        report.algorithm,
        report.fpgas,
        report.workload_balance,
        report.direct_cpu_fetch,
        report.nvtps,
        report.iterations_per_epoch
    );
    report.write_iteration_csv(ctx.create("simulate_iterations.csv")?)?;
    let body = serde_json::to_value(&report).map_err(|e| Error::Invariant(e.to_string()))?;
    ctx.write_json("simulate.json", json!({"command": "simulate", "report": body}))?;
    emit_summary(&json!({
        "command": "simulate",
        "algorithm": report.algorithm,
        "fpgas": report.fpgas,
        "epoch_time": report.epoch_time,
        "nvtps": report.nvtps,
    }));
    Ok(())
}

fn cmd_sweep(common: &Common, flags: &SimFlags, fpgas: &[usize]) -> Outcome {
    let ctx = Context::new(common)?;
    let platform = ctx.platform()?;
    let model = ctx.model()?;
    let sim = ctx.sim(flags)?;
    let accel = ctx.accelerator()?;
    let g = ctx.graph(&model)?;
    let points = scalability_sweep(&g, &model, &platform, &ctx.coeffs()?, accel, &sim, fpgas)?;
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                p.fpgas.to_string(),
                format!("{:.3}", p.nvtps / 1e6),
                format!("{:.6}", p.epoch_time),
                format!("{:.3}", p.speedup),
            ]
        })
        .collect();
    print_rows(&["fpgas", "MNVTPS", "epoch_s", "speedup"], &rows);
    write_speedup_csv(&points, ctx.create("sweep.csv")?)?;
    ctx.write_json(
        "sweep.json",
        json!({"command": "sweep", "algorithm": sim.algorithm, "accelerator": accel, "points": points}),
    )?;
    emit_summary(&json!({"command": "sweep", "points": points.len()}));
    Ok(())
}

fn cmd_partition_stats(common: &Common, algorithm: Option<Algorithm>, fpgas: Option<usize>) -> Outcome {
    let ctx = Context::new(common)?;
    let model = ctx.model()?;
    let mut sim = ctx.cfg.simulation.to_sim()?;
    if let Some(a) = algorithm {
        sim.algorithm = a;
    }
    let p = fpgas.unwrap_or(ctx.cfg.platform.fpgas);
    if p == 0 {
        return Err(Error::Config("--fpgas: must be at least 1".into()).into());
    }
    let g = ctx.graph(&model)?;
    let deployment = deploy(&g, &model, p, &sim)?;
    let report = deployment.plan.report();
    let stats = degree_stats(&g);
    let rows: Vec<Vec<String>> = deployment
        .plan
        .per_part()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            vec![
                i.to_string(),
                s.vertex_count.to_string(),
                s.edge_count.to_string(),
                s.train_vertex_count.to_string(),
                deployment.quotas[i].to_string(),
                deployment.store.resident_bytes(i, g.num_vertices()).to_string(),
            ]
        })
        .collect();
    print_rows(
        &["part", "vertices", "edges", "train", "batches", "resident_bytes"],
        &rows,
    );
    let store: Vec<Value> = (0..p)
        .map(|i| {
            json!({
                "fpga": i,
                "resident_vertices": deployment.store.resident_vertex_count(i),
                "resident_bytes": deployment.store.resident_bytes(i, g.num_vertices()),
            })
        })
        .collect();
    ctx.write_json(
        "partition.json",
        json!({
            "command": "partition-stats",
            "algorithm": sim.algorithm,
            "graph": {
                "vertices": g.num_vertices(),
                "edges": g.num_edges(),
                "train_vertices": g.num_train(),
                "max_degree": stats.max(),
                "mean_degree": stats.mean(),
            },
            "partition": report,
            "edge_imbalance": deployment.plan.imbalance(Objective::Edges),
            "train_imbalance": deployment.plan.imbalance(Objective::TrainVertices),
            "quotas": deployment.quotas,
            "feature_store": store,
        }),
    )?;
    emit_summary(&json!({"command": "partition-stats", "parts": p}));
    Ok(())
}

fn cmd_verify(common: &Common, forward_batches: usize, gradient_checks: usize) -> Outcome {
    let ctx = Context::new(common)?;
    let seed = common.seed.unwrap_or(ctx.cfg.simulation.seed);
    let report = verify::run_suite(seed, forward_batches, gradient_checks)?;
    let rows = vec![
        vec![
            "forward vs dense oracle".to_string(),
            format!("{:.3e}", report.forward_max_rel_err),
            pass(report.forward_ok),
        ],
        vec![
            "gradient vs finite differences".to_string(),
            format!("{:.3e}", report.gradient_max_rel_err),
            pass(report.gradient_ok),
        ],
        vec![
            "trajectory across schedules".to_string(),
            format!("{} steps", report.trajectory_steps),
            pass(report.trajectories_identical),
        ],
    ];
    print_rows(&["check", "value", "result"], &rows);
    let body = serde_json::to_value(&report).map_err(|e| Error::Invariant(e.to_string()))?;
    ctx.write_json(
        "verify.json",
        json!({"command": "verify", "seed": seed, "report": body}),
    )?;
    emit_summary(&json!({"command": "verify", "passed": report.passed}));
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Verification("see verify.json".into()))
    }
}

fn pass(ok: bool) -> String {
    if ok { "PASS" } else { "FAIL" }.to_string()
}

fn cmd_calibrate(common: &Common, points: &[(usize, usize, f64, f64)], rho3_ratio: f64) -> Outcome {
    let ctx = Context::new(common)?;
    let platform = ctx.platform()?;
    let dies = platform.dies_per_fpga;
    let points: Vec<(usize, usize, f64, f64)> = if points.is_empty() {
        U250_REFERENCE_POINTS
            .iter()
            .map(|&((n, m), d, l)| (n, m, d, l))
            .collect()
    } else {
        points.to_vec()
    };
    if points.len() != 2 {
        return Err(Error::Config(format!("--point: exactly two designs required, got {}", points.len())).into());
    }
    let per_die: Vec<(AcceleratorConfig, f64, f64)> = points
        .iter()
        .map(|&(n, m, d, l)| Ok((AcceleratorConfig::from_whole_fpga(n, m, dies)?, d, l)))
        .collect::<Result<_, Error>>()?;
    let pair =
        |f: fn(&(AcceleratorConfig, f64, f64)) -> f64| [(per_die[0].0, f(&per_die[0])), (per_die[1].0, f(&per_die[1]))];
    let (lambda1, lambda2) = calibrate_dsp_coeffs(pair(|p| p.1), platform.die.n_dsp)?;
    let (rho1, rho2, rho3) = calibrate_lut_coeffs(pair(|p| p.2), platform.die.n_lut, rho3_ratio)?;
    let coeffs = ResourceCoeffs {
        lambda1,
        lambda2,
        rho1,
        rho2,
        rho3,
    };
    coeffs.validate()?;
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for (&(n, m, _, _), (cfg, _, _)) in points.iter().zip(&per_die) {
        let usage = resource_check(*cfg, &coeffs, &platform.die)?;
        rows.push(vec![
            format!("({n}, {m})"),
            format!("{:.4}", usage.dsp_util),
            format!("{:.4}", usage.lut_util),
        ]);
        checks.push(json!({"whole_n": n, "whole_m": m, "usage": usage}));
    }
    print_rows(&["design", "dsp", "lut"], &rows);
    println!("lambda1 {lambda1:.6}  lambda2 {lambda2:.6}  rho1 {rho1:.6}  rho2 {rho2:.6}  rho3 {rho3:.6}");
    ctx.write_json(
        "calibrate.json",
        json!({"command": "calibrate", "coefficients": coeffs, "rho3_ratio": rho3_ratio, "reproduced": checks}),
    )?;
    emit_summary(&json!({"command": "calibrate", "coefficients": coeffs}));
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Dse { common } => cmd_dse(common),
        Command::Simulate { common, sim, fpgas } => cmd_simulate(common, sim, *fpgas),
        Command::Sweep { common, sim, fpgas } => cmd_sweep(common, sim, &fpgas.0),
        Command::PartitionStats {
            common,
            algorithm,
            fpgas,
        } => cmd_partition_stats(common, *algorithm, *fpgas),
        Command::Verify {
            common,
            forward_batches,
            gradient_checks,
        } => cmd_verify(common, *forward_batches, *gradient_checks),
        Command::Calibrate {
            common,
            points,
            rho3_ratio,
        } => cmd_calibrate(common, points, *rho3_ratio),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
