//! Datasets and the three training procedures.

mod dataset;

pub use dataset::{
    load_dataset, parse_record, save_dataset, split_validation, PlcRecord, PreparedPlc, PropRecord,
    Record, ToxRecord,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamConfig, Phase, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::predictors::{
    AffinityModel, DirectMapper, LatentChemical, ModelConfig, PropertyModel, ToxicityModel,
    DSX_SCALE,
};
use crate::sitegraph::{Gcn, GcnConfig, NODE_FEATURES};
use crate::synthbench::derive_seed;

/// Relative weights of the joint loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub bce: f64,
    pub dsx: f64,
    pub mapper: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            bce: 1.0,
            dsx: 1.0,
            mapper: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Even; half positives, half scrambled negatives in joint training.
    pub batch_size: usize,
    pub epochs: usize,
    /// Epoch counts for the toxicity and property heads; default `epochs`.
    pub toxicity_epochs: Option<usize>,
    pub property_epochs: Option<usize>,
    pub weight_decay: f64,
    /// Toxicity upweighting ceiling `W_m`.
    pub w_m: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub plc_train: usize,
    pub plc_test: usize,
    pub tox_train: usize,
    pub tox_test: usize,
    pub prop_train: usize,
    pub prop_test: usize,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 100,
            toxicity_epochs: None,
            property_epochs: None,
            weight_decay: 1e-4,
            w_m: 5.0,
            seed: 11,
            validation_fraction: 0.1,
            plc_train: 4000,
            plc_test: 500,
            tox_train: 8000,
            tox_test: 1000,
            prop_train: 20000,
            prop_test: 1000,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("training.{m}")));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return bad(format!(
                "batch_size must be even and at least 2, got {}",
                self.batch_size
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(self.w_m.is_finite() && self.w_m >= 1.0) {
            return bad(format!("w_m must be at least 1, got {}", self.w_m));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            ));
        }
        let w = &self.loss_weights;
        if [w.bce, w.dsx, w.mapper]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return bad("loss_weights must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.learning_rate).with_weight_decay(self.weight_decay)
    }
}

/// Mean losses for one epoch (numbered from 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: Option<f64>,
}

/// `W_tox = (W_m − 1)·L_tox + 1`.
pub fn tox_weight(l_tox: f64, w_m: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&l_tox) {
        return Err(Error::Data(format!(
            "toxicity label {l_tox} outside [0, 1]"
        )));
    }
    Ok((w_m - 1.0) * l_tox + 1.0)
}

/// Index of a pool ligand other than `ligand`, uniformly at random.
fn scramble_index<R: Rng + ?Sized>(
    ligand: &LatentChemical,
    pool: &[LatentChemical],
    rng: &mut R,
) -> Result<usize> {
    if pool.len() < 2 {
        return Err(Error::Config(format!(
            "scrambling needs a pool of at least 2 ligands, got {}",
            pool.len()
        )));
    }
    if pool.iter().all(|c| c == ligand) {
        return Err(Error::Config(
            "scramble pool holds only the true ligand".into(),
        ));
    }
    loop {
        let j = rng.random_range(0..pool.len());
        if pool[j] != *ligand {
            return Ok(j);
        }
    }
}

/// Pairs each positive's site with a different pool ligand, DSX target 0.
pub fn scramble_batch<R: Rng + ?Sized>(
    positives: &[PlcRecord],
    pool: &[LatentChemical],
    rng: &mut R,
) -> Result<Vec<PlcRecord>> {
    positives
        .iter()
        .map(|p| {
            let j = scramble_index(&p.ligand, pool, rng)?;
            Ok(PlcRecord {
                id: p.id.clone(),
                site: p.site.clone(),
                ligand: pool[j].clone(),
                dsx: 0.0,
                archetype: None,
            })
        })
        .collect()
}

/// The jointly trained site embedding, affinity model and direct mapper.
#[derive(Debug, Clone)]
pub struct JointModels {
    pub gcn: Gcn,
    pub affinity: AffinityModel,
    pub mapper: DirectMapper,
}

impl JointModels {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let gcn = Gcn::new(
            GcnConfig {
                node_features: NODE_FEATURES,
                signature_dim: cfg.signature_dim,
                layers: cfg.gcn_layers,
            },
            rng,
        )?;
        Ok(JointModels {
            gcn,
            affinity: AffinityModel::new(cfg, rng)?,
            mapper: DirectMapper::new(cfg, rng)?,
        })
    }
}

fn latent_matrix<'a>(rows: impl Iterator<Item = &'a LatentChemical>) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = rows.map(|c| c.values().to_vec()).collect();
    Tensor::from_rows(&rows)
}

struct JointBatch<'a> {
    positives: Vec<&'a PreparedPlc>,
    negatives: Vec<&'a LatentChemical>,
}

/// Records one mixed batch; returns the scalar loss and batchnorm statistics.
fn joint_loss(
    models: &JointModels,
    tape: &mut Tape,
    bounds: &[crate::diffcore::Bound; 3],
    batch: &JointBatch<'_>,
    weights: &LossWeights,
    phase: &mut Phase<'_>,
) -> Result<(Var, Option<crate::diffcore::RunningUpdate>)> {
    let m = batch.positives.len();
    let mut sigs = Vec::with_capacity(2 * m);
    for p in &batch.positives {
        sigs.push(models.gcn.forward(tape, &bounds[0], &p.graph)?);
    }
    let sites_pos = tape.stack_rows(&sigs)?;
    sigs.extend_from_within(..);
    let sites_all = tape.stack_rows(&sigs)?;

    let true_c = latent_matrix(batch.positives.iter().map(|p| &p.record.ligand))?;
    let all_c = latent_matrix(
        batch
            .positives
            .iter()
            .map(|p| &p.record.ligand)
            .chain(batch.negatives.iter().copied()),
    )?;
    let latent = tape.constant(all_c);
    let out = models
        .affinity
        .forward(tape, &bounds[1], latent, sites_all, phase)?;

    let mut labels = vec![1.0; m];
    labels.resize(2 * m, 0.0);
    let ones = vec![1.0; 2 * m];
    let bce = tape.bce(out.p_bind, &labels, &ones)?;
    let mut targets: Vec<f64> = batch
        .positives
        .iter()
        .map(|p| p.record.dsx / DSX_SCALE)
        .collect();
    targets.resize(2 * m, 0.0);
    let dsx = tape.mse(out.dsx_scaled, &Tensor::vector(targets))?;

    let mapped = models.mapper.forward(tape, &bounds[2], sites_pos, phase)?;
    let map = tape.mse(mapped, &true_c)?;
    let loss = tape.weighted_sum(&[
        (bce, weights.bce),
        (dsx, weights.dsx),
        (map, weights.mapper),
    ])?;
    Ok((loss, out.running))
}

fn make_batches<'a, R: Rng + ?Sized>(
    data: &'a [PreparedPlc],
    pool: &'a [LatentChemical],
    half: usize,
    shuffle: bool,
    rng: &mut R,
) -> Result<Vec<JointBatch<'a>>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order
        .chunks(half)
        .map(|chunk| {
            let positives: Vec<&PreparedPlc> = chunk.iter().map(|&i| &data[i]).collect();
            let negatives = positives
                .iter()
                .map(|p| scramble_index(&p.record.ligand, pool, rng).map(|j| &pool[j]))
                .collect::<Result<_>>()?;
            Ok(JointBatch {
                positives,
                negatives,
            })
        })
        .collect()
}

fn joint_validation_loss(
    models: &JointModels,
    data: &[PreparedPlc],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Option<f64>> {
    if data.len() < 2 {
        return Ok(None);
    }
    let pool: Vec<LatentChemical> = data.iter().map(|p| p.record.ligand.clone()).collect();
    // Same scrambles every epoch, so validation curves are comparable.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX));
    let batches = make_batches(data, &pool, cfg.batch_size / 2, false, &mut rng)?;
    let mut total = 0.0;
    for batch in &batches {
        let mut tape = Tape::new();
        let bounds = [
            models.gcn.params.bind(&mut tape, false),
            models.affinity.params.bind(&mut tape, false),
            models.mapper.params.bind(&mut tape, false),
        ];
        let (loss, _) = joint_loss(
            models,
            &mut tape,
            &bounds,
            batch,
            &cfg.loss_weights,
            &mut Phase::Infer,
        )?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: epoch,
                loss: value,
            });
        }
        total += value * batch.positives.len() as f64;
    }
    Ok(Some(total / data.len() as f64))
}

/// Joint training of the GCN, affinity model and direct mapper.
///
/// Every batch holds `batch_size / 2` positives and as many scrambled
/// negatives, each reusing its positive's site. Scrambles are redrawn every
/// epoch. The mapper loss only sees the positive half.
pub fn joint_train(
    train: &[PreparedPlc],
    validation: &[PreparedPlc],
    models: &mut JointModels,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data(
            "joint training needs at least one record".into(),
        ));
    }
    let pool: Vec<LatentChemical> = train.iter().map(|p| p.record.ligand.clone()).collect();
    let adam = cfg.adam();
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let batches = make_batches(train, &pool, cfg.batch_size / 2, true, &mut order_rng)?;
        let mut total = 0.0;
        for batch in &batches {
            step += 1;
            let mut tape = Tape::new();
            let bounds = [
                models.gcn.params.bind(&mut tape, true),
                models.affinity.params.bind(&mut tape, true),
                models.mapper.params.bind(&mut tape, true),
            ];
            let mut phase = Phase::Train(&mut dropout_rng);
            let (loss, running) = joint_loss(
                models,
                &mut tape,
                &bounds,
                batch,
                &cfg.loss_weights,
                &mut phase,
            )?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            let grads = tape.backward(loss)?;
            models
                .gcn
                .params
                .adam_step(&bounds[0].collect(&grads), &adam)?;
            models
                .affinity
                .params
                .adam_step(&bounds[1].collect(&grads), &adam)?;
            models
                .mapper
                .params
                .adam_step(&bounds[2].collect(&grads), &adam)?;
            if let Some(update) = running {
                models.affinity.apply_running(&update);
            }
            total += value * batch.positives.len() as f64;
        }
        history.push(EpochLoss {
            epoch,
            train: total / train.len() as f64,
            validation: joint_validation_loss(models, validation, cfg, epoch)?,
        });
    }
    Ok(history)
}

/// Shared minibatch loop for the single-head models.
fn train_head<T, F>(
    train: &[T],
    validation: &[T],
    epochs: usize,
    cfg: &TrainConfig,
    set: &mut crate::diffcore::ParamSet,
    loss_fn: F,
) -> Result<Vec<EpochLoss>>
where
    F: Fn(&mut Tape, &crate::diffcore::Bound, &[&T], &mut Phase<'_>) -> Result<Var>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training needs at least one record".into()));
    }
    let adam = cfg.adam();
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    let mut history = Vec::with_capacity(epochs);
    let mut step = 0usize;
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&T> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let bound = set.bind(&mut tape, true);
            let loss = loss_fn(
                &mut tape,
                &bound,
                &batch,
                &mut Phase::Train(&mut dropout_rng),
            )?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            let grads = tape.backward(loss)?;
            set.adam_step(&bound.collect(&grads), &adam)?;
            total += value * batch.len() as f64;
        }
        let validation_loss = if validation.is_empty() {
            None
        } else {
            let mut sum = 0.0;
            for chunk in validation.chunks(cfg.batch_size) {
                let batch: Vec<&T> = chunk.iter().collect();
                let mut tape = Tape::new();
                let bound = set.bind(&mut tape, false);
                let loss = loss_fn(&mut tape, &bound, &batch, &mut Phase::Infer)?;
                sum += tape.value(loss).item() * batch.len() as f64;
            }
            Some(sum / validation.len() as f64)
        };
        history.push(EpochLoss {
            epoch,
            train: total / train.len() as f64,
            validation: validation_loss,
        });
    }
    Ok(history)
}

/// Toxicity training with per-example BCE weights from `weight`.
pub fn train_toxicity_with(
    train: &[ToxRecord],
    validation: &[ToxRecord],
    model: &mut ToxicityModel,
    cfg: &TrainConfig,
    weight: impl Fn(&ToxRecord) -> Result<f64>,
) -> Result<Vec<EpochLoss>> {
    let epochs = cfg.toxicity_epochs.unwrap_or(cfg.epochs);
    let frozen = model.clone();
    let mut params = model.params.clone();
    let history = train_head(
        train,
        validation,
        epochs,
        cfg,
        &mut params,
        |tape, bound, batch, phase| {
            let x = tape.constant(latent_matrix(batch.iter().map(|r| &r.ligand))?);
            let prob = frozen.forward(tape, bound, x, phase)?;
            let labels: Vec<f64> = batch.iter().map(|r| r.l_tox).collect();
            let weights = batch
                .iter()
                .map(|r| weight(r))
                .collect::<Result<Vec<_>>>()?;
            tape.bce(prob, &labels, &weights)
        },
    )?;
    model.params = params;
    Ok(history)
}

/// Weighted BCE against soft labels with `W_tox` weights.
pub fn train_toxicity(
    train: &[ToxRecord],
    validation: &[ToxRecord],
    model: &mut ToxicityModel,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    let w_m = cfg.w_m;
    train_toxicity_with(train, validation, model, cfg, |r| tox_weight(r.l_tox, w_m))
}

/// MSE regression of `(logP, QED, SAS)`.
pub fn train_properties(
    train: &[PropRecord],
    validation: &[PropRecord],
    model: &mut PropertyModel,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    let epochs = cfg.property_epochs.unwrap_or(cfg.epochs);
    let frozen = model.clone();
    let mut params = model.params.clone();
    let history = train_head(
        train,
        validation,
        epochs,
        cfg,
        &mut params,
        |tape, bound, batch, phase| {
            let x = tape.constant(latent_matrix(batch.iter().map(|r| &r.ligand))?);
            let pred = frozen.forward(tape, bound, x, phase)?;
            let rows: Vec<Vec<f64>> = batch.iter().map(|r| r.phi.to_vec()).collect();
            tape.mse(pred, &Tensor::from_rows(&rows)?)
        },
    )?;
    model.params = params;
    Ok(history)
}
