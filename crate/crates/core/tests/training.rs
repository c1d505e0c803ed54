mod common;

use latent_design::predictors::{ModelConfig, PropertyModel, ToxicityModel};
use latent_design::synthbench::{SynthWorld, WorldConfig};
use latent_design::training::{
    joint_train, tox_weight, train_properties, train_toxicity, train_toxicity_with, JointModels,
    PreparedPlc, TrainConfig,
};
use latent_design::Error;

fn world() -> SynthWorld {
    SynthWorld::new(WorldConfig {
        latent_dim: 8,
        archetypes: 3,
        ..WorldConfig::default()
    })
    .unwrap()
}

fn model_cfg() -> ModelConfig {
    ModelConfig {
        latent_dim: 8,
        signature_dim: 6,
        affinity_hidden: vec![12, 6],
        mapper_hidden: vec![12, 8],
        toxicity_hidden: vec![10, 6],
        property_hidden: vec![10, 6],
        ..ModelConfig::default()
    }
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn unit_toxicity_weight_is_plain_bce() {
    let w = world();
    let data = w.gen_tox_dataset(60, &mut common::rng(70)).unwrap();
    let init = ToxicityModel::new(&model_cfg(), &mut common::rng(71)).unwrap();
    let cfg = TrainConfig {
        w_m: 1.0,
        ..train_cfg(4)
    };

    let mut weighted = init.clone();
    let a = train_toxicity(&data, &data[..10], &mut weighted, &cfg).unwrap();
    let mut plain = init.clone();
    let b = train_toxicity_with(&data, &data[..10], &mut plain, &cfg, |_| Ok(1.0)).unwrap();
    assert_eq!(a, b);
    let c = latent_design::predictors::LatentChemical(vec![0.2; 8]);
    assert_eq!(weighted.predict(&c).unwrap(), plain.predict(&c).unwrap());
}

#[test]
fn toxicity_weights_interpolate_to_w_m() {
    assert_eq!(tox_weight(0.0, 5.0).unwrap(), 1.0);
    assert_eq!(tox_weight(1.0, 5.0).unwrap(), 5.0);
    assert_eq!(tox_weight(0.4, 5.0).unwrap(), 2.6);
    assert!(matches!(tox_weight(1.2, 5.0), Err(Error::Data(_))));
}

#[test]
fn joint_training_is_deterministic_and_learns() {
    let w = world();
    let records = w.gen_plc_dataset(48, "j", &mut common::rng(72)).unwrap();
    let prepared = PreparedPlc::prepare_all(&records);
    let run = || {
        let mut m = JointModels::new(&model_cfg(), &mut common::rng(73)).unwrap();
        let h = joint_train(&prepared, &prepared[..8], &mut m, &train_cfg(15)).unwrap();
        (h, m)
    };
    let (h1, m1) = run();
    let (h2, m2) = run();
    assert_eq!(h1, h2);
    assert_eq!(m1.gcn.params, m2.gcn.params);
    assert_eq!(m1.affinity.params, m2.affinity.params);
    assert_eq!(m1.mapper.params, m2.mapper.params);
    assert_eq!(h1.len(), 15);
    assert!(h1.last().unwrap().train < h1[0].train, "{:?}", h1);
    assert!(h1.iter().all(|e| e.validation.is_some()));
}

#[test]
fn property_training_reduces_error() {
    let w = world();
    let data = w.gen_prop_dataset(200, &mut common::rng(74)).unwrap();
    let mut m = PropertyModel::new(&model_cfg(), &mut common::rng(75)).unwrap();
    let h = train_properties(&data, &[], &mut m, &train_cfg(20)).unwrap();
    assert!(h.last().unwrap().train < 0.5 * h[0].train, "{:?}", h);
    assert!(h.iter().all(|e| e.validation.is_none()));
}

#[test]
fn odd_batch_size_is_a_config_error() {
    let w = world();
    let records = w.gen_plc_dataset(10, "o", &mut common::rng(76)).unwrap();
    let prepared = PreparedPlc::prepare_all(&records);
    let mut m = JointModels::new(&model_cfg(), &mut common::rng(77)).unwrap();
    let cfg = TrainConfig {
        batch_size: 7,
        ..train_cfg(1)
    };
    let err = joint_train(&prepared, &[], &mut m, &cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn empty_training_sets_are_data_errors() {
    let mut m = JointModels::new(&model_cfg(), &mut common::rng(78)).unwrap();
    assert!(matches!(
        joint_train(&[], &[], &mut m, &train_cfg(1)),
        Err(Error::Data(_))
    ));
    let mut t = ToxicityModel::new(&model_cfg(), &mut common::rng(79)).unwrap();
    assert!(matches!(
        train_toxicity(&[], &[], &mut t, &train_cfg(1)),
        Err(Error::Data(_))
    ));
}

#[test]
fn property_regressor_generalizes() {
    let w = SynthWorld::new(WorldConfig::default()).unwrap();
    let mut r = common::rng(80);
    let train = w.gen_prop_dataset(4000, &mut r).unwrap();
    let test = w.gen_prop_dataset(500, &mut r).unwrap();
    let mut m = PropertyModel::new(&ModelConfig::default(), &mut common::rng(81)).unwrap();
    let cfg = TrainConfig {
        property_epochs: Some(20),
        ..TrainConfig::default()
    };
    train_properties(&train, &[], &mut m, &cfg).unwrap();
    let (mut err, mut mag) = ([0.0; 3], [0.0; 3]);
    for rec in &test {
        let p = m.predict(&rec.ligand).unwrap().as_array();
        for j in 0..3 {
            err[j] += (p[j] - rec.phi[j]).abs();
            mag[j] += rec.phi[j].abs();
        }
    }
    for j in 0..3 {
        let rel = err[j] / mag[j];
        assert!(rel < 0.35, "component {j}: relative error {rel:.3}");
    }
}
