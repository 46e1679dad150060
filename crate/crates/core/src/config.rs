//! TOML run configuration. Bandwidths are given in GB/s (1e9 bytes/s) and
//! clock rates in MHz.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dse::{DseOptions, Lattice};
use crate::error::{Error, Result};
use crate::graph::{generate_synthetic, load_edge_list, Directedness, Graph, SyntheticKind};
use crate::model::{Aggregator, GnnModel, ModelKind};
use crate::perfmodel::{AcceleratorConfig, DieMeta, PlatformMeta, ResourceCoeffs};
use crate::scheduler::ExtraAccounting;
use crate::simulator::{Algorithm, SimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformSection {
    pub fpgas: usize,
    pub dies_per_fpga: usize,
    pub dsp_per_die: f64,
    pub lut_per_die: f64,
    pub ddr_gbps_per_die: f64,
    pub freq_mhz: f64,
    pub pcie_gbps: f64,
    pub cpu_mem_gbps: f64,
    pub sampler_medges_per_s: f64,
    pub feat_bytes: f64,
    pub pe_simd: Option<f64>,
    #[serde(default = "one")]
    pub bp_factor: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for PlatformSection {
    fn default() -> Self {
        PlatformSection::from_meta(&PlatformMeta::alveo_u250(4))
    }
}

impl PlatformSection {
    pub fn from_meta(p: &PlatformMeta) -> Self {
        PlatformSection {
            fpgas: p.num_fpgas,
            dies_per_fpga: p.dies_per_fpga,
            dsp_per_die: p.die.n_dsp,
            lut_per_die: p.die.n_lut,
            ddr_gbps_per_die: p.die.ddr_bw / 1e9,
            freq_mhz: p.freq / 1e6,
            pcie_gbps: p.pcie_link_bw / 1e9,
            cpu_mem_gbps: p.cpu_mem_bw / 1e9,
            sampler_medges_per_s: p.sampler_rate / 1e6,
            feat_bytes: p.feat_bytes,
            pe_simd: Some(p.pe_simd),
            bp_factor: p.bp_factor,
        }
    }

    pub fn to_meta(&self) -> Result<PlatformMeta> {
        let meta = PlatformMeta {
            num_fpgas: self.fpgas,
            dies_per_fpga: self.dies_per_fpga,
            die: DieMeta {
                n_dsp: self.dsp_per_die,
                n_lut: self.lut_per_die,
                ddr_bw: self.ddr_gbps_per_die * 1e9,
            },
            freq: self.freq_mhz * 1e6,
            pcie_link_bw: self.pcie_gbps * 1e9,
            cpu_mem_bw: self.cpu_mem_gbps * 1e9,
            sampler_rate: self.sampler_medges_per_s * 1e6,
            pe_simd: self.pe_simd.unwrap_or(512.0 / (8.0 * self.feat_bytes)),
            feat_bytes: self.feat_bytes,
            bp_factor: self.bp_factor,
        };
        meta.validate()?;
        Ok(meta)
    }
}

/// Explicit coefficients, or `fitted = "alveo_u250"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ResourcesSection {
    pub fitted: Option<String>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub rho1: Option<f64>,
    pub rho2: Option<f64>,
    pub rho3: Option<f64>,
}

impl ResourcesSection {
    pub fn to_coeffs(&self) -> Result<ResourceCoeffs> {
        let explicit = [self.lambda1, self.lambda2, self.rho1, self.rho2, self.rho3];
        let coeffs = match (&self.fitted, explicit) {
            (Some(name), _) if explicit.iter().any(Option::is_some) => {
                return Err(Error::config(format!(
                    "resources.fitted: \"{name}\" cannot be combined with explicit coefficients"
                )))
            }
            (Some(name), _) if name == "alveo_u250" => ResourceCoeffs::alveo_u250_fitted(),
            (Some(name), _) => return Err(Error::config(format!("resources.fitted: unknown fit \"{name}\""))),
            (None, [None, None, None, None, None]) => ResourceCoeffs::alveo_u250_fitted(),
            (None, [Some(lambda1), Some(lambda2), Some(rho1), Some(rho2), Some(rho3)]) => ResourceCoeffs {
                lambda1,
                lambda2,
                rho1,
                rho2,
                rho3,
            },
            (None, _) => {
                let names = ["lambda1", "lambda2", "rho1", "rho2", "rho3"];
                let missing = names
                    .iter()
                    .zip(explicit)
                    .find(|(_, v)| v.is_none())
                    .map(|(n, _)| *n)
                    .unwrap_or("lambda1");
                return Err(Error::config(format!("resources.{missing}: missing")));
            }
        };
        coeffs.validate()?;
        Ok(coeffs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_kind")]
    pub kind: ModelKind,
    pub aggregator: Option<Aggregator>,
    pub dims: Vec<usize>,
    pub fanouts: Vec<usize>,
    pub batch_size: usize,
}

fn default_kind() -> ModelKind {
    ModelKind::Graphsage
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Graphsage,
            aggregator: None,
            dims: vec![100, 128, 47],
            fanouts: vec![25, 10],
            batch_size: 1024,
        }
    }
}

impl ModelSection {
    pub fn to_model(&self) -> Result<GnnModel> {
        let aggregator = self.aggregator.unwrap_or(match self.kind {
            ModelKind::Gcn => Aggregator::Sum,
            _ => Aggregator::Mean,
        });
        GnnModel::new(
            self.kind,
            aggregator,
            self.dims.clone(),
            self.fanouts.clone(),
            self.batch_size,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphSource {
    Synthetic,
    EdgeList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub source: GraphSource,
    /// Edge-list path, relative to the config file.
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub directed: bool,
    #[serde(default = "default_synthetic")]
    pub kind: SyntheticKind,
    #[serde(default = "default_vertices")]
    pub vertices: usize,
    #[serde(default = "default_degree")]
    pub avg_degree: usize,
    #[serde(default = "default_skew")]
    pub skew: f64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_synthetic() -> SyntheticKind {
    SyntheticKind::PowerLaw
}
fn default_vertices() -> usize {
    20_000
}
fn default_degree() -> usize {
    16
}
fn default_skew() -> f64 {
    1.8
}
fn default_train_fraction() -> f64 {
    0.6
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection {
            source: GraphSource::Synthetic,
            path: None,
            directed: false,
            kind: default_synthetic(),
            vertices: default_vertices(),
            avg_degree: default_degree(),
            skew: default_skew(),
            train_fraction: default_train_fraction(),
            seed: 0,
        }
    }
}

impl GraphSection {
    /// Loads or generates the graph with `feature_dim` columns.
    pub fn build(&self, base_dir: &Path, feature_dim: usize) -> Result<Graph> {
        let g = match self.source {
            GraphSource::Synthetic => {
                generate_synthetic(self.kind, self.vertices, self.avg_degree, self.skew, self.seed)?
            }
            GraphSource::EdgeList => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::config("graph.path: required when source = \"edge_list\""))?;
                let dir = if self.directed {
                    Directedness::Directed
                } else {
                    Directedness::Undirected
                };
                load_edge_list(base_dir.join(path), dir)?
            }
        };
        g.with_train_fraction(self.train_fraction, self.seed)?
            .with_feature_dim(feature_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "yes")]
    pub workload_balance: bool,
    #[serde(default = "yes")]
    pub direct_cpu_fetch: bool,
    #[serde(default = "one_usize")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cache_fraction")]
    pub cache_fraction: f64,
    pub feature_capacity_mb: Option<f64>,
    #[serde(default)]
    pub shared_sampler: bool,
    #[serde(default)]
    pub extra_accounting: ExtraAccounting,
    /// Whole-FPGA `[n, m]`; defaults to the DSE optimum of the platform.
    pub accelerator: Option<[usize; 2]>,
}

fn default_algorithm() -> Algorithm {
    Algorithm::Distdgl
}
fn yes() -> bool {
    true
}
fn one_usize() -> usize {
    1
}
fn default_cache_fraction() -> f64 {
    0.2
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            algorithm: default_algorithm(),
            workload_balance: true,
            direct_cpu_fetch: true,
            epochs: 1,
            seed: 0,
            cache_fraction: default_cache_fraction(),
            feature_capacity_mb: None,
            shared_sampler: false,
            extra_accounting: ExtraAccounting::ConsumeQuota,
            accelerator: None,
        }
    }
}

impl SimulationSection {
    pub fn to_sim(&self) -> Result<SimConfig> {
        if self.epochs == 0 {
            return Err(Error::config("simulation.epochs: must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.cache_fraction) {
            return Err(Error::config(format!(
                "simulation.cache_fraction: {} outside [0, 1]",
                self.cache_fraction
            )));
        }
        let feature_capacity_bytes = match self.feature_capacity_mb {
            Some(mb) if !(mb >= 0.0) => {
                return Err(Error::config("simulation.feature_capacity_mb: must be non-negative"))
            }
            Some(mb) => Some((mb * 1e6) as u64),
            None => None,
        };
        Ok(SimConfig {
            algorithm: self.algorithm,
            workload_balance: self.workload_balance,
            direct_cpu_fetch: self.direct_cpu_fetch,
            epochs: self.epochs,
            seed: self.seed,
            fpga_count_override: None,
            cache_fraction: self.cache_fraction,
            feature_capacity_bytes,
            shared_sampler: self.shared_sampler,
            extra_accounting: self.extra_accounting,
        })
    }

    pub fn accelerator(&self, dies: usize) -> Result<Option<AcceleratorConfig>> {
        self.accelerator
            .map(|[n, m]| {
                AcceleratorConfig::from_whole_fpga(n, m, dies).map_err(|_| {
                    Error::config(format!(
                        "simulation.accelerator: ({n}, {m}) does not split over {dies} dies"
                    ))
                })
            })
            .transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileSource {
    /// Expected batches on the four benchmark dataset shapes.
    DatasetShapes,
    /// Batches sampled from the configured graph.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DseSection {
    #[serde(default)]
    pub lattice: Lattice,
    #[serde(default)]
    pub exhaustive: bool,
    pub n_limit: Option<usize>,
    pub m_limit: Option<usize>,
    #[serde(default = "default_profile")]
    pub profile: ProfileSource,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "default_profile_batches")]
    pub profile_batches: usize,
}

fn default_profile() -> ProfileSource {
    ProfileSource::DatasetShapes
}
fn default_profile_batches() -> usize {
    8
}

impl Default for DseSection {
    fn default() -> Self {
        DseSection {
            lattice: Lattice::default(),
            exhaustive: false,
            n_limit: None,
            m_limit: None,
            profile: default_profile(),
            beta: 1.0,
            profile_batches: default_profile_batches(),
        }
    }
}

impl DseSection {
    pub fn options(&self) -> Result<DseOptions> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config(format!("dse.beta: {} outside [0, 1]", self.beta)));
        }
        if self.profile_batches == 0 {
            return Err(Error::config("dse.profile_batches: must be at least 1"));
        }
        Ok(DseOptions {
            exhaustive: self.exhaustive,
            lattice: self.lattice,
            n_limit: self.n_limit,
            m_limit: self.m_limit,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub platform: PlatformSection,
    #[serde(default)]
    pub resources: ResourcesSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub graph: GraphSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub dse: DseSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn parse_error(origin: &str, err: toml::de::Error) -> Error {
    let path = err.message().to_string();
    Error::config(format!("{origin}: {}", path.trim_end()))
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| parse_error(origin, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Replaces the model with one read from a separate file, which may
    /// hold either a `[model]` table or the model keys at top level.
    pub fn load_model_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{origin}: {e}")))?;
        let value: toml::Table = toml::from_str(&text).map_err(|e| parse_error(&origin, e))?;
        let table = match value.get("model") {
            Some(toml::Value::Table(t)) => t.clone(),
            _ => value,
        };
        self.model = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("{origin}: model: {}", e.message().trim_end())))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.platform.to_meta()?;
        self.resources.to_coeffs()?;
        self.model.to_model()?;
        self.simulation.to_sim()?;
        self.simulation.accelerator(self.platform.dies_per_fpga)?;
        self.dse.options()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn units_convert() {
        let cfg = RunConfig::parse(
            r#"
[platform]
fpgas = 2
dies_per_fpga = 4
dsp_per_die = 3072
lut_per_die = 423000
ddr_gbps_per_die = 19.25
freq_mhz = 300
pcie_gbps = 16
cpu_mem_gbps = 205
sampler_medges_per_s = 45
feat_bytes = 4
"#,
            "inline",
        )
        .unwrap();
        let meta = cfg.platform.to_meta().unwrap();
        assert_eq!(meta, PlatformMeta::alveo_u250(2));
    }

    #[test]
    fn unknown_key_names_field() {
        let err = RunConfig::parse("[simulation]\nworkload_balanse = true\n", "inline").unwrap_err();
        assert!(err.to_string().contains("workload_balanse"), "{err}");
    }

    #[test]
    fn bad_value_names_field_path() {
        let mut cfg = RunConfig::default();
        cfg.platform.pcie_gbps = 0.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("platform.pcie_gbps"));
        let mut cfg = RunConfig::default();
        cfg.model.dims = vec![10, 5];
        assert!(cfg.validate().unwrap_err().to_string().contains("model.dims"));
        let mut cfg = RunConfig::default();
        cfg.resources.lambda1 = Some(1.0);
        assert!(cfg.validate().unwrap_err().to_string().contains("resources.lambda2"));
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        assert_eq!(
            RunConfig::default().resources.to_coeffs().unwrap(),
            ResourceCoeffs::alveo_u250_fitted()
        );
    }
}
