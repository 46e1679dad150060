use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gcn,
    #[serde(alias = "graph_sage", alias = "sage")]
    Graphsage,
    Custom,
}

/// Layer dimensions and sampling shape of an `L`-layer GNN.
///
/// `dims[l]` is the feature length produced by layer `l` (`dims[0]` is the
/// input feature length). `fanouts[l - 1]` is the neighbor sample size used
/// when expanding `V^l` into `V^(l-1)`, so the last entry applies at the
/// target layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnModel {
    pub kind: ModelKind,
    pub aggregator: Aggregator,
    pub dims: Vec<usize>,
    pub fanouts: Vec<usize>,
    pub batch_targets: usize,
}

impl GnnModel {
    pub fn new(
        kind: ModelKind,
        aggregator: Aggregator,
        dims: Vec<usize>,
        fanouts: Vec<usize>,
        batch_targets: usize,
    ) -> Result<Self> {
        let model = GnnModel {
            kind,
            aggregator,
            dims,
            fanouts,
            batch_targets,
        };
        model.validate()?;
        Ok(model)
    }

    /// Two-layer GraphSAGE with fanouts 25 (input side) and 10 (targets)
    /// and 1024 targets per mini-batch.
    pub fn graphsage(dims: [usize; 3]) -> Self {
        GnnModel {
            kind: ModelKind::Graphsage,
            aggregator: Aggregator::Mean,
            dims: dims.to_vec(),
            fanouts: vec![25, 10],
            batch_targets: 1024,
        }
    }

    pub fn gcn(dims: [usize; 3]) -> Self {
        GnnModel {
            kind: ModelKind::Gcn,
            aggregator: Aggregator::Sum,
            ..Self::graphsage(dims)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let layers = self.fanouts.len();
        if layers == 0 {
            return Err(Error::config("model.fanouts: at least one layer required"));
        }
        if self.dims.len() != layers + 1 {
            return Err(Error::config(format!(
                "model.dims: expected {} entries for {} layers, got {}",
                layers + 1,
                layers,
                self.dims.len()
            )));
        }
        if self.dims.contains(&0) {
            return Err(Error::config("model.dims: every dimension must be at least 1"));
        }
        if self.fanouts.contains(&0) {
            return Err(Error::config("model.fanouts: every fanout must be at least 1"));
        }
        if self.batch_targets == 0 {
            return Err(Error::config("model.batch_size: must be at least 1"));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.fanouts.len()
    }

    pub fn fanout(&self, layer: usize) -> usize {
        self.fanouts[layer - 1]
    }

    /// Number of scalar weights across all layers.
    pub fn weight_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1]).sum()
    }
}

/// Size and layer dimensions of a benchmark dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetShape {
    pub name: String,
    pub vertices: u64,
    pub edges: u64,
    pub dims: Vec<usize>,
}

impl DatasetShape {
    pub fn new(name: &str, vertices: u64, edges: u64, dims: [usize; 3]) -> Self {
        DatasetShape {
            name: name.to_string(),
            vertices,
            edges,
            dims: dims.to_vec(),
        }
    }

    pub fn reddit() -> Self {
        Self::new("reddit", 232_965, 23_213_838, [602, 128, 41])
    }

    pub fn yelp() -> Self {
        Self::new("yelp", 716_847, 13_954_819, [300, 128, 100])
    }

    pub fn amazon() -> Self {
        Self::new("amazon", 1_569_960, 264_339_468, [200, 128, 107])
    }

    pub fn ogbn_products() -> Self {
        Self::new("ogbn-products", 2_449_029, 61_859_140, [100, 128, 47])
    }

    pub fn benchmark_suite() -> Vec<Self> {
        vec![Self::reddit(), Self::yelp(), Self::amazon(), Self::ogbn_products()]
    }

    pub fn avg_degree(&self) -> f64 {
        self.edges as f64 / self.vertices as f64
    }
}
