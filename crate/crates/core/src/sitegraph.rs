//! Protein-site graphs and the graph convolutional signature extractor.
//!
//! A site is a fully connected graph over its atoms with edge weights
//! `1/(1+d²)` (self-loops included, weight 1). Each layer computes
//! `H' = ReLU(D^{-1/2} A D^{-1/2} H W)`, and the signature is the sum over
//! layers `1..=L` and over atoms of `row_softmax(H W̃)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{glorot_uniform, Bound, Checkpointed, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const ELEMENT_VOCAB: usize = 24;
pub const RESIDUE_VOCAB: usize = 24;
pub const NODE_FEATURES: usize = ELEMENT_VOCAB + RESIDUE_VOCAB;

/// One site atom: element and residue indices plus coordinates in Å.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "AtomRow", into = "AtomRow")]
pub struct Atom {
    pub element: usize,
    pub residue: usize,
    pub position: [f64; 3],
}

/// Wire form of an atom: `[element, residue, x, y, z]`.
#[derive(Serialize, Deserialize)]
struct AtomRow(usize, usize, f64, f64, f64);

impl From<AtomRow> for Atom {
    fn from(r: AtomRow) -> Self {
        Atom {
            element: r.0,
            residue: r.1,
            position: [r.2, r.3, r.4],
        }
    }
}

impl From<Atom> for AtomRow {
    fn from(a: Atom) -> Self {
        AtomRow(
            a.element,
            a.residue,
            a.position[0],
            a.position[1],
            a.position[2],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProteinSiteGraph {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub id: String,
    pub atoms: Vec<Atom>,
}

impl ProteinSiteGraph {
    pub fn new(id: impl Into<String>, atoms: Vec<Atom>) -> Result<Self> {
        let g = ProteinSiteGraph {
            id: id.into(),
            atoms,
        };
        g.validate("")?;
        Ok(g)
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    /// Checks the graph invariants; `prefix` is prepended to error paths.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let at = |field: String, message: String| Error::Parse {
            location: format!("{prefix}{field}"),
            message,
        };
        if self.atoms.is_empty() {
            return Err(at("atoms".into(), "a site needs at least one atom".into()));
        }
        for (i, a) in self.atoms.iter().enumerate() {
            if a.element >= ELEMENT_VOCAB {
                return Err(at(
                    format!("atoms[{i}][0]"),
                    format!("element index {} not below {ELEMENT_VOCAB}", a.element),
                ));
            }
            if a.residue >= RESIDUE_VOCAB {
                return Err(at(
                    format!("atoms[{i}][1]"),
                    format!("residue index {} not below {RESIDUE_VOCAB}", a.residue),
                ));
            }
            if let Some(j) = a.position.iter().position(|c| !c.is_finite()) {
                return Err(at(
                    format!("atoms[{i}][{}]", j + 2),
                    "coordinate is not finite".into(),
                ));
            }
        }
        Ok(())
    }

    /// Node features: element one-hot followed by residue one-hot.
    pub fn node_features(&self) -> Tensor {
        let n = self.atoms.len();
        let mut data = vec![0.0; n * NODE_FEATURES];
        for (i, a) in self.atoms.iter().enumerate() {
            data[i * NODE_FEATURES + a.element] = 1.0;
            data[i * NODE_FEATURES + ELEMENT_VOCAB + a.residue] = 1.0;
        }
        Tensor::new(vec![n, NODE_FEATURES], data).expect("shape matches")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serialises")
    }
}

/// Parses and validates one graph record.
pub fn parse_graph(bytes: &[u8]) -> Result<ProteinSiteGraph> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let graph: ProteinSiteGraph =
        serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            location: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    graph.validate("")?;
    Ok(graph)
}

pub fn serialize_graph(graph: &ProteinSiteGraph) -> Vec<u8> {
    graph.to_json().into_bytes()
}

/// Weighted adjacency `A_ij = 1/(1+d_ij²)` and degrees `D_ii = Σ_j A_ij`.
pub fn build_adjacency(graph: &ProteinSiteGraph) -> (Tensor, Vec<f64>) {
    let n = graph.atoms.len();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (p, q) = (graph.atoms[i].position, graph.atoms[j].position);
            let d2: f64 = (0..3).map(|k| (p[k] - q[k]) * (p[k] - q[k])).sum();
            a[i * n + j] = 1.0 / (1.0 + d2);
        }
    }
    let degree = a.chunks(n).map(|row| row.iter().sum()).collect();
    (Tensor::new(vec![n, n], a).expect("square"), degree)
}

/// `D^{-1/2} A D^{-1/2}`.
pub fn normalized_adjacency(graph: &ProteinSiteGraph) -> Tensor {
    let (mut a, degree) = build_adjacency(graph);
    let n = degree.len();
    let inv: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    for (i, row) in a.data_mut().chunks_mut(n).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v *= inv[i] * inv[j];
        }
    }
    a
}

/// Precomputed constant inputs of one site graph.
#[derive(Debug, Clone)]
pub struct GraphTensors {
    pub adjacency: Tensor,
    pub features: Tensor,
}

impl GraphTensors {
    pub fn new(graph: &ProteinSiteGraph) -> Self {
        GraphTensors {
            adjacency: normalized_adjacency(graph),
            features: graph.node_features(),
        }
    }

    pub fn atom_count(&self) -> usize {
        self.features.rows()
    }
}

/// Pooled site summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSignature(pub Vec<f64>);

impl SiteSignature {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub node_features: usize,
    pub signature_dim: usize,
    pub layers: usize,
}

impl Default for GcnConfig {
    fn default() -> Self {
        GcnConfig {
            node_features: NODE_FEATURES,
            signature_dim: 100,
            layers: 2,
        }
    }
}

/// Convolution weights `W^(ℓ)` and readout weights `W̃^(ℓ)` per layer.
#[derive(Debug, Clone)]
pub struct Gcn {
    pub config: GcnConfig,
    pub params: ParamSet,
    conv: Vec<ParamId>,
    readout: Vec<ParamId>,
}

impl Gcn {
    pub fn new<R: Rng + ?Sized>(config: GcnConfig, rng: &mut R) -> Result<Self> {
        if config.layers == 0 || config.signature_dim == 0 {
            return Err(Error::Config(
                "GCN needs at least one layer and a non-empty signature".into(),
            ));
        }
        if config.node_features != NODE_FEATURES {
            return Err(Error::Config(format!(
                "GCN node features must be {NODE_FEATURES}, got {}",
                config.node_features
            )));
        }
        let f = config.node_features;
        let mut params = ParamSet::new();
        let mut conv = Vec::new();
        let mut readout = Vec::new();
        for l in 0..config.layers {
            conv.push(params.add(&format!("gcn.conv{l}"), glorot_uniform(f, f, rng)));
            readout.push(params.add(
                &format!("gcn.readout{l}"),
                glorot_uniform(f, config.signature_dim, rng),
            ));
        }
        Ok(Gcn {
            config,
            params,
            conv,
            readout,
        })
    }

    pub fn conv_weight(&self, layer: usize) -> ParamId {
        self.conv[layer]
    }

    pub fn readout_weight(&self, layer: usize) -> ParamId {
        self.readout[layer]
    }

    /// Records the signature computation; returns a length-`N_P` vector.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, graph: &GraphTensors) -> Result<Var> {
        let adj = tape.constant(graph.adjacency.clone());
        let mut h = tape.constant(graph.features.clone());
        let mut pooled: Option<Var> = None;
        for l in 0..self.config.layers {
            let hw = tape.matmul(h, bound.var(self.conv[l]))?;
            let mixed = tape.matmul(adj, hw)?;
            h = tape.relu(mixed);
            let logits = tape.matmul(h, bound.var(self.readout[l]))?;
            let soft = tape.row_softmax(logits);
            let summed = tape.sum_rows(soft);
            pooled = Some(match pooled {
                Some(p) => tape.add(p, summed)?,
                None => summed,
            });
        }
        Ok(pooled.expect("at least one layer"))
    }

    /// Inference-only signature.
    pub fn signature(&self, graph: &ProteinSiteGraph) -> Result<SiteSignature> {
        self.signature_of(&GraphTensors::new(graph))
    }

    pub fn signature_of(&self, graph: &GraphTensors) -> Result<SiteSignature> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let p = self.forward(&mut tape, &bound, graph)?;
        Ok(SiteSignature(tape.value(p).data().to_vec()))
    }
}

impl Checkpointed for Gcn {
    const KIND: &'static str = "gcn";

    fn header(&self) -> String {
        serde_json::to_string(&self.config).expect("config serialises")
    }

    fn from_header(header: &str) -> Result<Self> {
        let config: GcnConfig = serde_json::from_str(header).map_err(|e| Error::Parse {
            location: "header".into(),
            message: e.to_string(),
        })?;
        Gcn::new(config, &mut ChaCha8Rng::seed_from_u64(0))
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}
