//! The differentiable heads: binding affinity, direct mapper, toxicity and
//! chemical properties.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    BatchNorm, Bound, Checkpointed, Mlp, ParamSet, Phase, RunningUpdate, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::sitegraph::SiteSignature;

/// Predicted DSX values are learned in hundreds.
pub const DSX_SCALE: f64 = 100.0;

/// A point in the latent chemical space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentChemical(pub Vec<f64>);

impl LatentChemical {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn squared_distance(&self, other: &LatentChemical) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Layer widths and dropout rates of every head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub signature_dim: usize,
    pub gcn_layers: usize,
    pub affinity_hidden: Vec<usize>,
    pub affinity_dropout: f64,
    pub mapper_hidden: Vec<usize>,
    pub mapper_dropout: f64,
    pub toxicity_hidden: Vec<usize>,
    pub toxicity_dropout: f64,
    pub property_hidden: Vec<usize>,
    pub property_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 56,
            signature_dim: 100,
            gcn_layers: 2,
            affinity_hidden: vec![100, 50],
            affinity_dropout: 0.25,
            mapper_hidden: vec![150, 75],
            mapper_dropout: 0.4,
            toxicity_hidden: vec![100, 50],
            toxicity_dropout: 0.25,
            property_hidden: vec![120, 60],
            property_dropout: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.signature_dim == 0 || self.gcn_layers == 0 {
            return Err(Error::Config(
                "model.latent_dim, signature_dim and gcn_layers must be positive".into(),
            ));
        }
        let hidden = [
            ("affinity", &self.affinity_hidden, self.affinity_dropout),
            ("mapper", &self.mapper_hidden, self.mapper_dropout),
            ("toxicity", &self.toxicity_hidden, self.toxicity_dropout),
            ("property", &self.property_hidden, self.property_dropout),
        ];
        for (name, widths, dropout) in hidden {
            if widths.contains(&0) {
                return Err(Error::Config(format!(
                    "model.{name}_hidden has a zero width"
                )));
            }
            if !(0.0..1.0).contains(&dropout) {
                return Err(Error::Config(format!(
                    "model.{name}_dropout must be in [0, 1), got {dropout}"
                )));
            }
        }
        if self.affinity_hidden.is_empty() {
            return Err(Error::Config(
                "model.affinity_hidden needs at least one layer".into(),
            ));
        }
        Ok(())
    }
}

/// Shape of one head; also the checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub inputs: usize,
    pub hidden: Vec<usize>,
    pub outputs: usize,
    pub dropout: f64,
}

impl HeadSpec {
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.inputs];
        w.extend(&self.hidden);
        w.push(self.outputs);
        w
    }

    fn parse(header: &str) -> Result<Self> {
        serde_json::from_str(header).map_err(|e| Error::Parse {
            location: "header".into(),
            message: e.to_string(),
        })
    }
}

fn header_of(spec: &HeadSpec) -> String {
    serde_json::to_string(spec).expect("spec serialises")
}

fn row_matrix(values: &[f64]) -> Tensor {
    Tensor::new(vec![1, values.len()], values.to_vec()).expect("row")
}

fn check_width(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::dim(what, &[expected], &[got]));
    }
    Ok(())
}

/// Outputs of an affinity forward pass over a batch.
pub struct AffinityForward {
    /// Binding probabilities, length `n`.
    pub p_bind: Var,
    /// Predicted DSX in hundreds, length `n`.
    pub dsx_scaled: Var,
    pub running: Option<RunningUpdate>,
}

/// Batch-normalised MLP over `[C ; P]` with outputs `(p_B, DSX/100)`.
#[derive(Debug, Clone)]
pub struct AffinityModel {
    pub spec: HeadSpec,
    pub latent_dim: usize,
    pub params: ParamSet,
    norm: BatchNorm,
    mlp: Mlp,
}

impl AffinityModel {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let spec = HeadSpec {
            inputs: cfg.latent_dim + cfg.signature_dim,
            hidden: cfg.affinity_hidden.clone(),
            outputs: 2,
            dropout: cfg.affinity_dropout,
        };
        Self::from_spec(spec, cfg.latent_dim, rng)
    }

    fn from_spec<R: Rng + ?Sized>(spec: HeadSpec, latent_dim: usize, rng: &mut R) -> Result<Self> {
        if spec.outputs != 2 || latent_dim >= spec.inputs {
            return Err(Error::Config(format!("invalid affinity head {spec:?}")));
        }
        let mut params = ParamSet::new();
        let norm = BatchNorm::new(&mut params, "affinity.input_norm", spec.inputs);
        let mlp = Mlp::new(
            &mut params,
            "affinity.dense",
            &spec.widths(),
            spec.dropout,
            rng,
        )?;
        Ok(AffinityModel {
            spec,
            latent_dim,
            params,
            norm,
            mlp,
        })
    }

    pub fn signature_dim(&self) -> usize {
        self.spec.inputs - self.latent_dim
    }

    /// `latent: [n, dim L]`, `sites: [n, N_P]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        latent: Var,
        sites: Var,
        phase: &mut Phase<'_>,
    ) -> Result<AffinityForward> {
        check_width(
            "affinity latent",
            self.latent_dim,
            tape.value(latent).cols(),
        )?;
        check_width(
            "affinity site",
            self.signature_dim(),
            tape.value(sites).cols(),
        )?;
        let x = tape.concat_cols(latent, sites)?;
        let (x, running) = self
            .norm
            .forward(tape, &self.params, bound, x, phase.is_train())?;
        let out = self.mlp.forward(tape, bound, x, phase)?;
        let logit = tape.column(out, 0)?;
        let p_bind = tape.sigmoid(logit);
        let dsx_scaled = tape.column(out, 1)?;
        Ok(AffinityForward {
            p_bind,
            dsx_scaled,
            running,
        })
    }

    pub fn apply_running(&mut self, update: &RunningUpdate) {
        self.norm.apply_update(&mut self.params, update);
    }

    /// Inference-mode `(p_B, DSX-hat)`.
    pub fn predict(&self, c: &LatentChemical, p: &SiteSignature) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let cv = tape.constant(row_matrix(c.values()));
        let pv = tape.constant(row_matrix(p.values()));
        let out = self.forward(&mut tape, &bound, cv, pv, &mut Phase::Infer)?;
        Ok((
            tape.value(out.p_bind).item(),
            tape.value(out.dsx_scaled).item() * DSX_SCALE,
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct AffinityHeader {
    latent_dim: usize,
    #[serde(flatten)]
    head: HeadSpec,
}

impl Checkpointed for AffinityModel {
    const KIND: &'static str = "affinity";

    fn header(&self) -> String {
        let header = AffinityHeader {
            latent_dim: self.latent_dim,
            head: self.spec.clone(),
        };
        serde_json::to_string(&header).expect("header serialises")
    }

    fn from_header(header: &str) -> Result<Self> {
        let h: AffinityHeader = serde_json::from_str(header).map_err(|e| Error::Parse {
            location: "header".into(),
            message: e.to_string(),
        })?;
        Self::from_spec(h.head, h.latent_dim, &mut ChaCha8Rng::seed_from_u64(0))
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// MLP from a site signature to a latent chemical.
#[derive(Debug, Clone)]
pub struct DirectMapper {
    pub spec: HeadSpec,
    pub params: ParamSet,
    mlp: Mlp,
}

impl DirectMapper {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let spec = HeadSpec {
            inputs: cfg.signature_dim,
            hidden: cfg.mapper_hidden.clone(),
            outputs: cfg.latent_dim,
            dropout: cfg.mapper_dropout,
        };
        Self::from_spec(spec, rng)
    }

    fn from_spec<R: Rng + ?Sized>(spec: HeadSpec, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let mlp = Mlp::new(
            &mut params,
            "mapper.dense",
            &spec.widths(),
            spec.dropout,
            rng,
        )?;
        Ok(DirectMapper { spec, params, mlp })
    }

    /// `sites: [n, N_P]` to `[n, dim L]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        sites: Var,
        phase: &mut Phase<'_>,
    ) -> Result<Var> {
        check_width("mapper site", self.spec.inputs, tape.value(sites).cols())?;
        self.mlp.forward(tape, bound, sites, phase)
    }

    pub fn map(&self, p: &SiteSignature) -> Result<LatentChemical> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let pv = tape.constant(row_matrix(p.values()));
        let out = self.forward(&mut tape, &bound, pv, &mut Phase::Infer)?;
        Ok(LatentChemical(tape.value(out).data().to_vec()))
    }
}

impl Checkpointed for DirectMapper {
    const KIND: &'static str = "mapper";

    fn header(&self) -> String {
        header_of(&self.spec)
    }

    fn from_header(header: &str) -> Result<Self> {
        Self::from_spec(HeadSpec::parse(header)?, &mut ChaCha8Rng::seed_from_u64(0))
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Sigmoid-output MLP over a latent chemical.
#[derive(Debug, Clone)]
pub struct ToxicityModel {
    pub spec: HeadSpec,
    pub params: ParamSet,
    mlp: Mlp,
}

impl ToxicityModel {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let spec = HeadSpec {
            inputs: cfg.latent_dim,
            hidden: cfg.toxicity_hidden.clone(),
            outputs: 1,
            dropout: cfg.toxicity_dropout,
        };
        Self::from_spec(spec, rng)
    }

    fn from_spec<R: Rng + ?Sized>(spec: HeadSpec, rng: &mut R) -> Result<Self> {
        if spec.outputs != 1 {
            return Err(Error::Config("toxicity head has one output".into()));
        }
        let mut params = ParamSet::new();
        let mlp = Mlp::new(
            &mut params,
            "toxicity.dense",
            &spec.widths(),
            spec.dropout,
            rng,
        )?;
        Ok(ToxicityModel { spec, params, mlp })
    }

    /// `latent: [n, dim L]` to probabilities of length `n`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        latent: Var,
        phase: &mut Phase<'_>,
    ) -> Result<Var> {
        check_width(
            "toxicity latent",
            self.spec.inputs,
            tape.value(latent).cols(),
        )?;
        let out = self.mlp.forward(tape, bound, latent, phase)?;
        let logit = tape.column(out, 0)?;
        Ok(tape.sigmoid(logit))
    }

    pub fn predict(&self, c: &LatentChemical) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let cv = tape.constant(row_matrix(c.values()));
        let out = self.forward(&mut tape, &bound, cv, &mut Phase::Infer)?;
        Ok(tape.value(out).item())
    }
}

impl Checkpointed for ToxicityModel {
    const KIND: &'static str = "toxicity";

    fn header(&self) -> String {
        header_of(&self.spec)
    }

    fn from_header(header: &str) -> Result<Self> {
        Self::from_spec(HeadSpec::parse(header)?, &mut ChaCha8Rng::seed_from_u64(0))
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Predicted `(logP, QED, SAS)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Properties {
    pub log_p: f64,
    pub qed: f64,
    pub sas: f64,
}

impl Properties {
    pub fn as_array(&self) -> [f64; 3] {
        [self.log_p, self.qed, self.sas]
    }
}

/// Three-output regression MLP over a latent chemical.
#[derive(Debug, Clone)]
pub struct PropertyModel {
    pub spec: HeadSpec,
    pub params: ParamSet,
    mlp: Mlp,
}

impl PropertyModel {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let spec = HeadSpec {
            inputs: cfg.latent_dim,
            hidden: cfg.property_hidden.clone(),
            outputs: 3,
            dropout: cfg.property_dropout,
        };
        Self::from_spec(spec, rng)
    }

    fn from_spec<R: Rng + ?Sized>(spec: HeadSpec, rng: &mut R) -> Result<Self> {
        if spec.outputs != 3 {
            return Err(Error::Config("property head has three outputs".into()));
        }
        let mut params = ParamSet::new();
        let mlp = Mlp::new(
            &mut params,
            "property.dense",
            &spec.widths(),
            spec.dropout,
            rng,
        )?;
        Ok(PropertyModel { spec, params, mlp })
    }

    /// `latent: [n, dim L]` to `[n, 3]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        latent: Var,
        phase: &mut Phase<'_>,
    ) -> Result<Var> {
        check_width(
            "property latent",
            self.spec.inputs,
            tape.value(latent).cols(),
        )?;
        self.mlp.forward(tape, bound, latent, phase)
    }

    pub fn predict(&self, c: &LatentChemical) -> Result<Properties> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let cv = tape.constant(row_matrix(c.values()));
        let out = self.forward(&mut tape, &bound, cv, &mut Phase::Infer)?;
        let v = tape.value(out).data();
        Ok(Properties {
            log_p: v[0],
            qed: v[1],
            sas: v[2],
        })
    }
}

impl Checkpointed for PropertyModel {
    const KIND: &'static str = "property";

    fn header(&self) -> String {
        header_of(&self.spec)
    }

    fn from_header(header: &str) -> Result<Self> {
        Self::from_spec(HeadSpec::parse(header)?, &mut ChaCha8Rng::seed_from_u64(0))
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}
