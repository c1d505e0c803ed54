//! Run configuration and the end-to-end commands behind the CLI.
//!
//! Every command reads a [`RunConfig`], writes only under the configured
//! directories, and is deterministic given the config.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Checkpointed;
use crate::error::{Error, Result};
use crate::evalkit::{self, fmt, Table};
use crate::latentopt::{
    optimize_batch, EnergyCoeffs, EnergyReport, OptConfig, OptOutcome, TrainedHeads,
};
use crate::predictors::{
    AffinityModel, DirectMapper, LatentChemical, ModelConfig, PropertyModel, ToxicityModel,
};
use crate::sitegraph::{Gcn, GraphTensors, SiteSignature};
use crate::synthbench::{derive_seed, SynthWorld, WorldConfig, WorldManifest};
use crate::training::{
    self, load_dataset, save_dataset, split_validation, EpochLoss, JointModels, PlcRecord,
    PreparedPlc, PropRecord, ToxRecord, TrainConfig,
};

pub const WORLD_FILE: &str = "world.json";
pub const PLC_TRAIN: &str = "plc_train.jsonl";
pub const PLC_TEST: &str = "plc_test.jsonl";
pub const TOX_TRAIN: &str = "tox_train.jsonl";
pub const TOX_TEST: &str = "tox_test.jsonl";
pub const PROP_TRAIN: &str = "prop_train.jsonl";
pub const PROP_TEST: &str = "prop_test.jsonl";

pub const GCN_CKPT: &str = "gcn.ckpt";
pub const AFFINITY_CKPT: &str = "affinity.ckpt";
pub const MAPPER_CKPT: &str = "mapper.ckpt";
pub const TOXICITY_CKPT: &str = "toxicity.ckpt";
pub const PROPERTY_CKPT: &str = "properties.ckpt";

// Seed streams derived from the master seed.
const STREAM_WORLD: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_OPT: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_DATA: u64 = 5;
const STREAM_INIT: u64 = 6;

/// Section seed derived from the master seed, kept to 63 bits so it
/// survives a TOML round trip.
pub fn section_seed(master: u64, stream: u64) -> u64 {
    derive_seed(master, stream) >> 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Scrambled negatives scored per positive.
    pub scrambles: usize,
    pub histogram_bins: usize,
    /// Restricted-delta threshold.
    pub delta_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scrambles: 100,
            histogram_bins: 40,
            delta_threshold: evalkit::DELTA_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Trajectory sampling stride in steps.
    pub stride: usize,
    /// Number of test sites to optimize; all when absent.
    pub targets: Option<usize>,
    pub coeffs: EnergyCoeffs,
}

impl Default for OptimizeSection {
    fn default() -> Self {
        let run = OptConfig::default();
        OptimizeSection {
            steps: run.steps,
            learning_rate: run.learning_rate,
            seed: run.seed,
            stride: run.stride,
            targets: None,
            coeffs: EnergyCoeffs::default(),
        }
    }
}

impl OptimizeSection {
    pub fn run(&self) -> OptConfig {
        OptConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            seed: self.seed,
            stride: self.stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; section seeds left unset are derived from it.
    pub seed: u64,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub evaluation: EvalConfig,
    pub optimization: OptimizeSection,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::with_seed(0)
    }
}

impl RunConfig {
    /// Defaults with every section seed derived from `seed`.
    pub fn with_seed(seed: u64) -> Self {
        let mut cfg = RunConfig {
            seed,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            evaluation: EvalConfig::default(),
            optimization: OptimizeSection::default(),
            paths: PathsConfig::default(),
        };
        cfg.world.seed = section_seed(seed, STREAM_WORLD);
        cfg.training.seed = section_seed(seed, STREAM_TRAIN);
        cfg.optimization.seed = section_seed(seed, STREAM_OPT);
        cfg
    }

    /// Parses TOML, applies `key=value` overrides, derives unset seeds and
    /// validates the result.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            location: "config".into(),
            message: e.message().to_string(),
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let master = match table.get("seed") {
            None => 0,
            Some(toml::Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(other) => {
                return Err(Error::Config(format!(
                    "seed must be a non-negative integer, got {other}"
                )))
            }
        };
        for (section, stream) in [
            ("world", STREAM_WORLD),
            ("training", STREAM_TRAIN),
            ("optimization", STREAM_OPT),
        ] {
            let entry = table
                .entry(section)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if let toml::Value::Table(t) = entry {
                t.entry("seed")
                    .or_insert(toml::Value::Integer(section_seed(master, stream) as i64));
            }
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table))
            .map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner().message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_overrides(overrides: &[String]) -> Result<Self> {
        Self::parse("", overrides)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.training.validate()?;
        self.model.validate()?;
        self.optimization.run().validate()?;
        self.optimization.coeffs.validate()?;
        if self.model.latent_dim != self.world.latent_dim {
            return Err(Error::Config(format!(
                "model.latent_dim {} differs from world.latent_dim {}",
                self.model.latent_dim, self.world.latent_dim
            )));
        }
        if self.evaluation.scrambles == 0 || self.evaluation.histogram_bins == 0 {
            return Err(Error::Config(
                "evaluation.scrambles and histogram_bins must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.paths.data_dir.join(name)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.paths.checkpoint_dir.join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.paths.report_dir.join(name)
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override {spec:?} is not key=value")))?;
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let next = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match next {
            toml::Value::Table(t) => t,
            _ => {
                return Err(Error::Config(format!(
                    "override {key}: {part} is not a section"
                )))
            }
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_string(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Dataset sizes plus the world recipe, enough to regenerate every file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub world: WorldManifest,
    pub data_seed: u64,
    pub sizes: DatasetSizes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub plc_train: usize,
    pub plc_test: usize,
    pub tox_train: usize,
    pub tox_test: usize,
    pub prop_train: usize,
    pub prop_test: usize,
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let world = SynthWorld::new(cfg.world.clone())?;
    let t = &cfg.training;
    let data_seed = derive_seed(cfg.world.seed, STREAM_DATA);
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    ensure_dir(&cfg.paths.data_dir)?;
    let mut written = Vec::new();
    let mut emit_plc = |name: &str, n: usize, prefix: &str, rng: &mut ChaCha8Rng| -> Result<()> {
        let records = world.gen_plc_dataset(n, prefix, rng)?;
        save_dataset(&cfg.data(name), &records)?;
        written.push(cfg.data(name));
        Ok(())
    };
    emit_plc(PLC_TRAIN, t.plc_train, "train-", &mut rng)?;
    emit_plc(PLC_TEST, t.plc_test, "test-", &mut rng)?;
    for (name, n) in [(TOX_TRAIN, t.tox_train), (TOX_TEST, t.tox_test)] {
        save_dataset(&cfg.data(name), &world.gen_tox_dataset(n, &mut rng)?)?;
        written.push(cfg.data(name));
    }
    for (name, n) in [(PROP_TRAIN, t.prop_train), (PROP_TEST, t.prop_test)] {
        save_dataset(&cfg.data(name), &world.gen_prop_dataset(n, &mut rng)?)?;
        written.push(cfg.data(name));
    }
    let manifest = DataManifest {
        world: world.manifest(),
        data_seed,
        sizes: DatasetSizes {
            plc_train: t.plc_train,
            plc_test: t.plc_test,
            tox_train: t.tox_train,
            tox_test: t.tox_test,
            prop_train: t.prop_train,
            prop_test: t.prop_test,
        },
    };
    let path = cfg.data(WORLD_FILE);
    write_string(
        &path,
        &serde_json::to_string_pretty(&manifest).expect("manifest serialises"),
    )?;
    written.push(path);
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Joint,
    Toxicity,
    Properties,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Joint, Stage::Toxicity, Stage::Properties];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Joint => "joint",
            Stage::Toxicity => "toxicity",
            Stage::Properties => "properties",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown training stage {s:?}")))
    }
}

fn loss_table(stage: Stage, history: &[EpochLoss]) -> Table {
    let mut t = Table::new(
        &format!("loss_{}", stage.name()),
        &["epoch", "train", "validation"],
    );
    for h in history {
        t.push(vec![
            h.epoch.to_string(),
            fmt(h.train),
            h.validation.map(fmt).unwrap_or_default(),
        ]);
    }
    t
}

fn init_rng(cfg: &RunConfig, stage: Stage) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(
        derive_seed(cfg.training.seed, STREAM_INIT),
        stage as u64,
    ))
}

/// Trains the selected stages; returns their loss histories.
pub fn cmd_train(cfg: &RunConfig, stages: &[Stage]) -> Result<Vec<(Stage, Vec<EpochLoss>)>> {
    ensure_dir(&cfg.paths.checkpoint_dir)?;
    ensure_dir(&cfg.paths.report_dir)?;
    let t = &cfg.training;
    let mut out = Vec::new();
    for &stage in stages {
        let history = match stage {
            Stage::Joint => {
                let records: Vec<PlcRecord> = load_dataset(&cfg.data(PLC_TRAIN))?;
                let (train, val) = split_validation(&records, t.validation_fraction, t.seed);
                let train = PreparedPlc::prepare_all(&train);
                let val = PreparedPlc::prepare_all(&val);
                let mut models = JointModels::new(&cfg.model, &mut init_rng(cfg, stage))?;
                let history = training::joint_train(&train, &val, &mut models, t)?;
                models.gcn.save(&cfg.checkpoint(GCN_CKPT))?;
                models.affinity.save(&cfg.checkpoint(AFFINITY_CKPT))?;
                models.mapper.save(&cfg.checkpoint(MAPPER_CKPT))?;
                history
            }
            Stage::Toxicity => {
                let records: Vec<ToxRecord> = load_dataset(&cfg.data(TOX_TRAIN))?;
                let (train, val) = split_validation(&records, t.validation_fraction, t.seed);
                let mut model = ToxicityModel::new(&cfg.model, &mut init_rng(cfg, stage))?;
                let history = training::train_toxicity(&train, &val, &mut model, t)?;
                model.save(&cfg.checkpoint(TOXICITY_CKPT))?;
                history
            }
            Stage::Properties => {
                let records: Vec<PropRecord> = load_dataset(&cfg.data(PROP_TRAIN))?;
                let (train, val) = split_validation(&records, t.validation_fraction, t.seed);
                let mut model = PropertyModel::new(&cfg.model, &mut init_rng(cfg, stage))?;
                let history = training::train_properties(&train, &val, &mut model, t)?;
                model.save(&cfg.checkpoint(PROPERTY_CKPT))?;
                history
            }
        };
        loss_table(stage, &history)
            .write_csv(&cfg.report(&format!("loss_{}.csv", stage.name())))?;
        out.push((stage, history));
    }
    Ok(out)
}

/// All trained models, loaded from a checkpoint directory.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub gcn: Gcn,
    pub heads: TrainedHeads,
}

impl ModelBundle {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(ModelBundle {
            gcn: Gcn::load(&dir.join(GCN_CKPT))?,
            heads: TrainedHeads {
                affinity: AffinityModel::load(&dir.join(AFFINITY_CKPT))?,
                mapper: DirectMapper::load(&dir.join(MAPPER_CKPT))?,
                toxicity: ToxicityModel::load(&dir.join(TOXICITY_CKPT))?,
                properties: PropertyModel::load(&dir.join(PROPERTY_CKPT))?,
            },
        })
    }

    pub fn signatures(&self, records: &[PlcRecord]) -> Result<Vec<SiteSignature>> {
        use rayon::prelude::*;
        records
            .par_iter()
            .map(|r| self.gcn.signature_of(&GraphTensors::new(&r.site)))
            .collect()
    }
}

/// Headline numbers from `cmd_evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub auroc: f64,
    pub pearson_oracle: Option<f64>,
    pub pearson_observed: f64,
    pub spearman_observed: f64,
    pub r_e_train: evalkit::MetricSummary,
    pub r_e_test: evalkit::MetricSummary,
    /// Mean absolute error over mean absolute truth, per `(logP, QED, SAS)`.
    pub property_relative_error: [f64; 3],
    pub toxicity_mae: f64,
}

/// Rebuilds the synthetic world recorded by `cmd_gen_data`.
pub fn load_world(cfg: &RunConfig) -> Result<SynthWorld> {
    let path = cfg.data(WORLD_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DataManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    SynthWorld::new(manifest.world.config)
}

/// Writes affinity, mapper and property evaluation CSVs.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalSummary> {
    let models = ModelBundle::load(&cfg.paths.checkpoint_dir)?;
    let world = load_world(cfg)?;
    let test: Vec<PlcRecord> = load_dataset(&cfg.data(PLC_TEST))?;
    let train: Vec<PlcRecord> = load_dataset(&cfg.data(PLC_TRAIN))?;
    ensure_dir(&cfg.paths.report_dir)?;

    let sigs = models.signatures(&test)?;
    let pool: Vec<LatentChemical> = test.iter().map(|r| r.ligand.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_EVAL));
    let mut aff = Table::new(
        "affinity_eval",
        &[
            "site_id",
            "label",
            "true_dsx",
            "oracle_dsx",
            "predicted_dsx",
            "p_b",
        ],
    );
    let (mut pos_p, mut neg_p) = (Vec::new(), Vec::new());
    let (mut pred_dsx, mut obs_dsx, mut oracle_dsx) = (Vec::new(), Vec::new(), Vec::new());
    let oracle = |c: &LatentChemical, r: &PlcRecord| -> Result<Option<f64>> {
        r.archetype
            .map(|k| world.oracle_dsx_noiseless(c, k))
            .transpose()
    };
    for (r, sig) in test.iter().zip(&sigs) {
        let (p_b, dsx_hat) = models.heads.affinity.predict(&r.ligand, sig)?;
        let o = oracle(&r.ligand, r)?;
        aff.push(vec![
            r.id.clone(),
            "1".into(),
            fmt(r.dsx),
            o.map(fmt).unwrap_or_default(),
            fmt(dsx_hat),
            fmt(p_b),
        ]);
        pos_p.push(p_b);
        pred_dsx.push(dsx_hat);
        obs_dsx.push(r.dsx);
        if let Some(o) = o {
            oracle_dsx.push(o);
        }
        let negatives =
            training::scramble_batch(&vec![r.clone(); cfg.evaluation.scrambles], &pool, &mut rng)?;
        for n in negatives {
            let (p_b, dsx_hat) = models.heads.affinity.predict(&n.ligand, sig)?;
            aff.push(vec![
                r.id.clone(),
                "0".into(),
                fmt(0.0),
                oracle(&n.ligand, r)?.map(fmt).unwrap_or_default(),
                fmt(dsx_hat),
                fmt(p_b),
            ]);
            neg_p.push(p_b);
        }
    }
    let pearson_oracle = if oracle_dsx.len() == pred_dsx.len() {
        Some(evalkit::pearson(&pred_dsx, &oracle_dsx)?)
    } else {
        None
    };

    let mut mapper = Table::new("mapper_eval", &["site_id", "split", "r_e"]);
    let mut r_e_of = |records: &[PlcRecord], split: &str| -> Result<Vec<f64>> {
        let sigs = models.signatures(records)?;
        let mut values = Vec::with_capacity(records.len());
        for (r, s) in records.iter().zip(&sigs) {
            let v = evalkit::r_e(&r.ligand, &models.heads.mapper.map(s)?)?;
            mapper.push(vec![r.id.clone(), split.into(), fmt(v)]);
            values.push(v);
        }
        Ok(values)
    };
    let r_e_train = r_e_of(&train, "train")?;
    let r_e_test = r_e_of(&test, "test")?;

    let props: Vec<PropRecord> = load_dataset(&cfg.data(PROP_TEST))?;
    let mut prop = Table::new(
        "property_eval",
        &[
            "index", "logp", "logp_hat", "qed", "qed_hat", "sas", "sas_hat",
        ],
    );
    let (mut abs_err, mut abs_true) = ([0.0; 3], [0.0; 3]);
    for (i, r) in props.iter().enumerate() {
        let p = models.heads.properties.predict(&r.ligand)?.as_array();
        let mut row = vec![i.to_string()];
        for j in 0..3 {
            abs_err[j] += (p[j] - r.phi[j]).abs();
            abs_true[j] += r.phi[j].abs();
            row.push(fmt(r.phi[j]));
            row.push(fmt(p[j]));
        }
        prop.push(row);
    }
    let tox: Vec<ToxRecord> = load_dataset(&cfg.data(TOX_TEST))?;
    let mut tox_table = Table::new("toxicity_eval", &["index", "l_tox", "predicted"]);
    let mut tox_err = 0.0;
    for (i, r) in tox.iter().enumerate() {
        let p = models.heads.toxicity.predict(&r.ligand)?;
        tox_err += (p - r.l_tox).abs();
        tox_table.push(vec![i.to_string(), fmt(r.l_tox), fmt(p)]);
    }

    let summary = EvalSummary {
        auroc: evalkit::auroc(&pos_p, &neg_p)?,
        pearson_oracle,
        pearson_observed: evalkit::pearson(&pred_dsx, &obs_dsx)?,
        spearman_observed: evalkit::spearman(&pred_dsx, &obs_dsx)?,
        r_e_train: evalkit::summarize(&r_e_train)?,
        r_e_test: evalkit::summarize(&r_e_test)?,
        property_relative_error: [0, 1, 2].map(|j| abs_err[j] / abs_true[j].max(f64::MIN_POSITIVE)),
        toxicity_mae: tox_err / tox.len().max(1) as f64,
    };
    let mut metrics = Table::new("evaluation_metrics", &["metric", "value"]);
    metrics.push(vec!["auroc".into(), fmt(summary.auroc)]);
    if let Some(p) = summary.pearson_oracle {
        metrics.push(vec!["pearson_oracle_dsx".into(), fmt(p)]);
    }
    metrics.push(vec![
        "pearson_observed_dsx".into(),
        fmt(summary.pearson_observed),
    ]);
    metrics.push(vec![
        "spearman_observed_dsx".into(),
        fmt(summary.spearman_observed),
    ]);
    for (j, name) in ["logp", "qed", "sas"].iter().enumerate() {
        metrics.push(vec![
            format!("relative_error_{name}"),
            fmt(summary.property_relative_error[j]),
        ]);
    }
    metrics.push(vec!["toxicity_mae".into(), fmt(summary.toxicity_mae)]);

    let bins = cfg.evaluation.histogram_bins;
    evalkit::emit_report(
        &cfg.paths.report_dir,
        &[
            aff,
            mapper,
            prop,
            tox_table,
            metrics,
            Table::histogram("hist_p_b_positive", &pos_p, bins),
            Table::histogram("hist_p_b_scrambled", &neg_p, bins),
            Table::histogram("hist_r_e_train", &r_e_train, bins),
            Table::histogram("hist_r_e_test", &r_e_test, bins),
        ],
    )?;
    Ok(summary)
}

/// One optimized target with its oracle comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalChemical {
    pub site_id: String,
    pub c: LatentChemical,
    pub report: EnergyReport,
}

#[derive(Debug, Clone)]
pub struct OptimizeSummary {
    pub outcomes: Vec<OptOutcome>,
    /// Noiseless oracle scores, when archetypes are known.
    pub baseline: Vec<f64>,
    pub initial: Vec<f64>,
    pub optimized: Vec<f64>,
    pub delta: Option<evalkit::DeltaStats>,
}

fn report_row(site: &str, r: &EnergyReport) -> Vec<String> {
    vec![
        site.to_string(),
        r.step.to_string(),
        fmt(r.p_b),
        fmt(r.dsx_hat),
        fmt(r.log_p),
        fmt(r.qed),
        fmt(r.sas),
        fmt(r.tox),
        fmt(r.total),
    ]
}

pub fn cmd_optimize(cfg: &RunConfig, jobs: usize) -> Result<OptimizeSummary> {
    let models = ModelBundle::load(&cfg.paths.checkpoint_dir)?;
    let world = load_world(cfg)?;
    let mut test: Vec<PlcRecord> = load_dataset(&cfg.data(PLC_TEST))?;
    if let Some(n) = cfg.optimization.targets {
        test.truncate(n);
    }
    ensure_dir(&cfg.paths.report_dir)?;
    let sigs = models.signatures(&test)?;
    let opt = &cfg.optimization;
    let outcomes = optimize_batch(&sigs, &models.heads, &opt.coeffs, &opt.run(), jobs)?;

    let header = [
        "site_id", "step", "p_B", "dsx_hat", "logP", "QED", "SAS", "tox", "energy",
    ];
    let mut traj = Table::new("trajectories", &header);
    let mut finals = Vec::with_capacity(test.len());
    for (r, o) in test.iter().zip(&outcomes) {
        for rep in &o.trajectory {
            traj.push(report_row(&r.id, rep));
        }
        finals.push(FinalChemical {
            site_id: r.id.clone(),
            c: o.final_point.clone(),
            report: o.final_report.clone(),
        });
    }
    let path = cfg.report("final_chemicals.jsonl");
    let lines: Vec<String> = finals
        .iter()
        .map(|f| serde_json::to_string(f).expect("record serialises") + "\n")
        .collect();
    write_string(&path, &lines.concat())?;

    let (mut baseline, mut initial, mut optimized) = (Vec::new(), Vec::new(), Vec::new());
    let mut eval = Table::new(
        "optimization_eval",
        &[
            "site_id",
            "baseline_dsx",
            "initial_dsx",
            "optimized_dsx",
            "delta",
            "initial_energy",
            "final_energy",
        ],
    );
    let known = test.iter().all(|r| r.archetype.is_some());
    if known {
        for (r, o) in test.iter().zip(&outcomes) {
            let k = r.archetype.expect("checked");
            // One prior ligand per target stands in for a docked random chemical.
            let prior = world.sample_prior(&mut ChaCha8Rng::seed_from_u64(o.seed));
            let b = world.oracle_dsx_noiseless(&prior, k)?;
            let i = world.oracle_dsx_noiseless(&o.initial, k)?;
            let f = world.oracle_dsx_noiseless(&o.final_point, k)?;
            eval.push(vec![
                r.id.clone(),
                fmt(b),
                fmt(i),
                fmt(f),
                fmt(b - f),
                fmt(o.initial_report.total),
                fmt(o.final_report.total),
            ]);
            baseline.push(b);
            initial.push(i);
            optimized.push(f);
        }
    }
    let delta = if known && !test.is_empty() {
        Some(evalkit::delta_stats(
            &baseline,
            &optimized,
            cfg.evaluation.delta_threshold,
        )?)
    } else {
        None
    };
    let mut tables = vec![traj, eval];
    if let Some(d) = &delta {
        let mut t = Table::new(
            "delta_stats",
            &[
                "set",
                "mean",
                "se",
                "median",
                "stddev",
                "count",
                "fraction_better",
            ],
        );
        let s = d.summary()?;
        t.push(summary_row("delta", &s, Some(d.fraction_better)));
        if let Some(s) = d.restricted_summary() {
            t.push(summary_row("delta_restricted", &s, None));
        }
        tables.push(t);
        tables.push(Table::histogram(
            "hist_delta",
            &d.delta,
            cfg.evaluation.histogram_bins,
        ));
    }
    evalkit::emit_report(&cfg.paths.report_dir, &tables)?;
    Ok(OptimizeSummary {
        outcomes,
        baseline,
        initial,
        optimized,
        delta,
    })
}

fn summary_row(name: &str, s: &evalkit::MetricSummary, extra: Option<f64>) -> Vec<String> {
    vec![
        name.to_string(),
        fmt(s.mean),
        fmt(s.se),
        fmt(s.median),
        fmt(s.stddev),
        s.count.to_string(),
        extra.map(fmt).unwrap_or_default(),
    ]
}

fn column(table: &Table, name: &str) -> Result<Vec<f64>> {
    let j = table
        .header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Data(format!("{} has no column {name}", table.name)))?;
    table
        .rows
        .iter()
        .filter(|r| !r[j].is_empty())
        .map(|r| {
            r[j].parse::<f64>().map_err(|e| Error::Parse {
                location: format!("{}.{name}", table.name),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Aggregates the evaluation and optimization CSVs into `summary.csv`.
pub fn cmd_report(cfg: &RunConfig) -> Result<Table> {
    let read = |name: &str| Table::read_csv(name, &cfg.report(&format!("{name}.csv")));
    let mut out = Table::new(
        "summary",
        &["metric", "mean", "se", "median", "stddev", "count"],
    );
    let mut push = |metric: String, values: &[f64]| -> Result<()> {
        let s = evalkit::summarize(values)?;
        out.push(vec![
            metric,
            fmt(s.mean),
            fmt(s.se),
            fmt(s.median),
            fmt(s.stddev),
            s.count.to_string(),
        ]);
        Ok(())
    };
    let metrics = read("evaluation_metrics")?;
    for row in &metrics.rows {
        let v: f64 = row[1]
            .parse()
            .map_err(|e: std::num::ParseFloatError| Error::Parse {
                location: format!("evaluation_metrics.{}", row[0]),
                message: e.to_string(),
            })?;
        push(row[0].clone(), &[v])?;
    }
    let mapper = read("mapper_eval")?;
    let j = mapper.header.iter().position(|h| h == "split").unwrap_or(1);
    for split in ["train", "test"] {
        let values: Vec<f64> = mapper
            .rows
            .iter()
            .filter(|r| r[j] == split)
            .filter_map(|r| r[2].parse().ok())
            .collect();
        push(format!("r_e_{split}"), &values)?;
    }
    let aff = read("affinity_eval")?;
    let labels = column(&aff, "label")?;
    let p_b = column(&aff, "p_b")?;
    let pick = |want: f64| -> Vec<f64> {
        labels
            .iter()
            .zip(&p_b)
            .filter(|(l, _)| **l == want)
            .map(|(_, p)| *p)
            .collect()
    };
    push("p_b_positive".into(), &pick(1.0))?;
    push("p_b_scrambled".into(), &pick(0.0))?;
    if let Ok(opt) = read("optimization_eval") {
        for name in [
            "baseline_dsx",
            "initial_dsx",
            "optimized_dsx",
            "delta",
            "initial_energy",
            "final_energy",
        ] {
            let values = column(&opt, name)?;
            if !values.is_empty() {
                push(name.into(), &values)?;
            }
        }
    }
    out.write_csv(&cfg.report("summary.csv"))?;
    Ok(out)
}
