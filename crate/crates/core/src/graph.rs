//! Immutable CSR graph topology, edge-list ingestion and synthetic generators.
//!
//! Edges are stored directed. Both the forward (out-edge) CSR and its
//! transpose are kept because sampling walks in-neighbors while caching
//! ranks vertices by out-degree.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type VertexId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directedness {
    Directed,
    Undirected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Uniform,
    PowerLaw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    offsets: Vec<usize>,
    neighbors: Vec<VertexId>,
    in_offsets: Vec<usize>,
    in_neighbors: Vec<VertexId>,
    feature_dim: usize,
    train_mask: Vec<bool>,
    features: Option<Array2<f64>>,
}

fn build_csr(num_vertices: usize, edges: &[(VertexId, VertexId)], reverse: bool) -> (Vec<usize>, Vec<VertexId>) {
    let mut offsets = vec![0usize; num_vertices + 1];
    for &(s, d) in edges {
        let row = if reverse { d } else { s };
        offsets[row as usize + 1] += 1;
    }
    for i in 0..num_vertices {
        offsets[i + 1] += offsets[i];
    }
    let mut cursor = offsets.clone();
    let mut neighbors = vec![0 as VertexId; edges.len()];
    for &(s, d) in edges {
        let (row, col) = if reverse { (d, s) } else { (s, d) };
        neighbors[cursor[row as usize]] = col;
        cursor[row as usize] += 1;
    }
    for v in 0..num_vertices {
        neighbors[offsets[v]..offsets[v + 1]].sort_unstable();
    }
    (offsets, neighbors)
}

impl Graph {
    /// Builds a graph from directed `(src, dst)` pairs. Every vertex starts
    /// as a training vertex with a one-element feature vector.
    pub fn from_edges(num_vertices: usize, edges: &[(VertexId, VertexId)]) -> Result<Self> {
        if num_vertices > VertexId::MAX as usize {
            return Err(Error::Bounds {
                id: num_vertices as u64,
                limit: VertexId::MAX as u64,
            });
        }
        for &(s, d) in edges {
            let hi = s.max(d);
            if hi as usize >= num_vertices {
                return Err(Error::Bounds {
                    id: hi as u64,
                    limit: num_vertices as u64,
                });
            }
        }
        let (offsets, neighbors) = build_csr(num_vertices, edges, false);
        let (in_offsets, in_neighbors) = build_csr(num_vertices, edges, true);
        Ok(Graph {
            offsets,
            neighbors,
            in_offsets,
            in_neighbors,
            feature_dim: 1,
            train_mask: vec![true; num_vertices],
            features: None,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.len()
    }

    pub fn csr_offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn csr_neighbors(&self) -> &[VertexId] {
        &self.neighbors
    }

    pub fn out_neighbors(&self, v: VertexId) -> &[VertexId] {
        let v = v as usize;
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn in_neighbors(&self, v: VertexId) -> &[VertexId] {
        let v = v as usize;
        &self.in_neighbors[self.in_offsets[v]..self.in_offsets[v + 1]]
    }

    pub fn out_degree(&self, v: VertexId) -> usize {
        let v = v as usize;
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn in_degree(&self, v: VertexId) -> usize {
        let v = v as usize;
        self.in_offsets[v + 1] - self.in_offsets[v]
    }

    /// True if `src -> dst` is an edge. Binary search on the sorted row.
    pub fn has_edge(&self, src: VertexId, dst: VertexId) -> bool {
        self.out_neighbors(src).binary_search(&dst).is_ok()
    }

    /// Directed edges in CSR order.
    pub fn edges(&self) -> impl Iterator<Item = (VertexId, VertexId)> + '_ {
        (0..self.num_vertices()).flat_map(move |v| {
            self.out_neighbors(v as VertexId)
                .iter()
                .map(move |&d| (v as VertexId, d))
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self) -> Option<&Array2<f64>> {
        self.features.as_ref()
    }

    pub fn train_mask(&self) -> &[bool] {
        &self.train_mask
    }

    pub fn is_train(&self, v: VertexId) -> bool {
        self.train_mask[v as usize]
    }

    pub fn num_train(&self) -> usize {
        self.train_mask.iter().filter(|&&t| t).count()
    }

    pub fn train_vertices(&self) -> impl Iterator<Item = VertexId> + '_ {
        self.train_mask
            .iter()
            .enumerate()
            .filter(|(_, &t)| t)
            .map(|(v, _)| v as VertexId)
    }

    /// Sets the input feature length. Drops materialized features of a
    /// different width.
    pub fn with_feature_dim(mut self, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("feature_dim must be at least 1"));
        }
        if self.features.as_ref().is_some_and(|f| f.ncols() != dim) {
            self.features = None;
        }
        self.feature_dim = dim;
        Ok(self)
    }

    pub fn with_train_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.num_vertices() {
            return Err(Error::Shape(format!(
                "train mask has {} entries for {} vertices",
                mask.len(),
                self.num_vertices()
            )));
        }
        self.train_mask = mask;
        Ok(self)
    }

    /// Marks `round(fraction * |V|)` vertices, chosen by `seed`, as training vertices.
    pub fn with_train_fraction(self, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::config(format!("train fraction {fraction} outside [0, 1]")));
        }
        let n = self.num_vertices();
        let k = ((fraction * n as f64).round() as usize).min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6169_6e5f_6d61);
        let mut mask = vec![false; n];
        for v in rand::seq::index::sample(&mut rng, n, k) {
            mask[v] = true;
        }
        self.with_train_mask(mask)
    }

    pub fn with_features(mut self, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.num_vertices() || features.ncols() != self.feature_dim {
            return Err(Error::Shape(format!(
                "features are {}x{}, expected {}x{}",
                features.nrows(),
                features.ncols(),
                self.num_vertices(),
                self.feature_dim
            )));
        }
        self.features = Some(features);
        Ok(self)
    }

    /// Materializes a `|V| x feature_dim` matrix of seeded standard-normal values.
    pub fn with_random_features(self, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6665_6174_7572_6573);
        let (n, f) = (self.num_vertices(), self.feature_dim);
        let features = Array2::from_shape_simple_fn((n, f), || rng.sample::<f64, _>(StandardNormal));
        self.with_features(features)
    }

    /// Writes the topology back out in the edge-list format, with header.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# vertices={}", self.num_vertices())?;
        for (s, d) in self.edges() {
            writeln!(out, "{s} {d}")?;
        }
        Ok(())
    }
}

pub fn load_edge_list(path: impl AsRef<Path>, directedness: Directedness) -> Result<Graph> {
    let file = File::open(path)?;
    parse_edge_list(BufReader::new(file), directedness)
}

/// Parses whitespace-separated `src dst` lines. An optional first
/// non-blank line `# vertices=N` fixes the vertex count; other `#` lines
/// are comments.
pub fn parse_edge_list<R: BufRead>(reader: R, directedness: Directedness) -> Result<Graph> {
    let mut declared: Option<u64> = None;
    let mut seen_content = false;
    let mut edges = Vec::new();
    let mut max_id: Option<u64> = None;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            if !seen_content {
                if let Some(value) = comment.trim().strip_prefix("vertices=") {
                    let n = value.trim().parse::<u64>().map_err(|e| Error::Parse {
                        line: line_no,
                        message: format!("bad vertex-count header: {e}"),
                    })?;
                    if n > VertexId::MAX as u64 {
                        return Err(Error::Bounds {
                            id: n,
                            limit: VertexId::MAX as u64,
                        });
                    }
                    declared = Some(n);
                }
            }
            seen_content = true;
            continue;
        }
        seen_content = true;

        let mut parts = trimmed.split_whitespace();
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected two vertex ids, got {trimmed:?}"),
            });
        };
        let parse = |tok: &str| {
            tok.parse::<u64>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("bad vertex id {tok:?}: {e}"),
            })
        };
        let (src, dst) = (parse(a)?, parse(b)?);
        for id in [src, dst] {
            if id >= VertexId::MAX as u64 {
                return Err(Error::Bounds {
                    id,
                    limit: VertexId::MAX as u64,
                });
            }
            if let Some(n) = declared {
                if id >= n {
                    return Err(Error::Bounds { id, limit: n });
                }
            }
        }
        max_id = Some(max_id.map_or(src.max(dst), |m| m.max(src).max(dst)));
        let (src, dst) = (src as VertexId, dst as VertexId);
        edges.push((src, dst));
        if directedness == Directedness::Undirected && src != dst {
            edges.push((dst, src));
        }
    }

    let num_vertices = match declared {
        Some(n) => n as usize,
        None => max_id.map_or(0, |m| m as usize + 1),
    };
    Graph::from_edges(num_vertices, &edges)
}

/// Seeded synthetic graph with both directions of every undirected pair
/// stored, so `num_edges` is close to `num_vertices * avg_degree`.
///
/// `PowerLaw` gives vertex of rank `r` an endpoint weight `(r + 1)^(-1/skew)`,
/// which yields a degree tail with exponent `1 + skew`. Ranks are a seeded
/// permutation of vertex ids. A single vertex yields zero edges; self-loops
/// and duplicate pairs are never emitted.
pub fn generate_synthetic(
    kind: SyntheticKind,
    num_vertices: usize,
    avg_degree: usize,
    skew: f64,
    seed: u64,
) -> Result<Graph> {
    if num_vertices == 0 {
        return Err(Error::config("num_vertices must be at least 1"));
    }
    if avg_degree == 0 {
        return Err(Error::config("avg_degree must be at least 1"));
    }
    if kind == SyntheticKind::PowerLaw && !(skew.is_finite() && skew > 0.0) {
        return Err(Error::config(format!("power-law skew must be positive, got {skew}")));
    }
    if num_vertices > VertexId::MAX as usize {
        return Err(Error::Bounds {
            id: num_vertices as u64,
            limit: VertexId::MAX as u64,
        });
    }
    if num_vertices == 1 {
        return Graph::from_edges(1, &[]);
    }

    let n = num_vertices as u64;
    let target_pairs = ((n * avg_degree as u64) as f64 / 2.0).round() as u64;
    let max_pairs = n * (n - 1) / 2;
    // Rejection sampling stalls near saturation.
    if target_pairs > max_pairs / 2 {
        return Err(Error::config(format!(
            "avg_degree {avg_degree} too dense for {num_vertices} vertices"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw: Box<dyn FnMut(&mut ChaCha8Rng) -> VertexId> = match kind {
        SyntheticKind::Uniform => Box::new(move |rng| rng.random_range(0..num_vertices) as VertexId),
        SyntheticKind::PowerLaw => {
            let exponent = -1.0 / skew;
            let weights: Vec<f64> = (0..num_vertices).map(|r| ((r + 1) as f64).powf(exponent)).collect();
            let index = WeightedIndex::new(&weights).map_err(|e| Error::config(e.to_string()))?;
            let mut rank_to_vertex: Vec<VertexId> = (0..num_vertices as VertexId).collect();
            rank_to_vertex.shuffle(&mut rng);
            Box::new(move |rng| rank_to_vertex[index.sample(rng)])
        }
    };

    let mut seen = HashSet::with_capacity(target_pairs as usize);
    let mut edges = Vec::with_capacity(2 * target_pairs as usize);
    while (seen.len() as u64) < target_pairs {
        let u = draw(&mut rng);
        let v = draw(&mut rng);
        if u == v {
            continue;
        }
        if seen.insert((u.min(v), u.max(v))) {
            edges.push((u, v));
            edges.push((v, u));
        }
    }
    Graph::from_edges(num_vertices, &edges)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegreeStats {
    pub out_degrees: Vec<usize>,
    /// out-degree -> number of vertices with that degree
    pub histogram: BTreeMap<usize, usize>,
}

impl DegreeStats {
    pub fn max(&self) -> usize {
        self.out_degrees.iter().copied().max().unwrap_or(0)
    }

    pub fn mean(&self) -> f64 {
        if self.out_degrees.is_empty() {
            return 0.0;
        }
        self.out_degrees.iter().sum::<usize>() as f64 / self.out_degrees.len() as f64
    }
}

pub fn degree_stats(g: &Graph) -> DegreeStats {
    let out_degrees: Vec<usize> = g.offsets.windows(2).map(|w| w[1] - w[0]).collect();
    let mut histogram = BTreeMap::new();
    for &d in &out_degrees {
        *histogram.entry(d).or_insert(0) += 1;
    }
    DegreeStats { out_degrees, histogram }
}
