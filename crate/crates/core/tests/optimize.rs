mod common;

use latent_design::diffcore::{Tape, Tensor, Var};
use latent_design::latentopt::{
    continue_opt, latent_opt, optimize_batch, EnergyCoeffs, EnergyModel, HeadOutputs, OptConfig,
    OptState,
};
use latent_design::predictors::LatentChemical;
use latent_design::sitegraph::SiteSignature;
use latent_design::{Error, Result};
use proptest::prelude::*;
use rand::Rng;

const DIM: usize = 8;

fn row(tape: &mut Tape, v: &[f64]) -> Var {
    tape.constant(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap())
}

fn quiet(tape: &mut Tape, p_b: Var) -> HeadOutputs {
    let zero = tape.scale(p_b, 0.0);
    let log_p = tape.offset(zero, 2.5);
    HeadOutputs {
        p_b,
        dsx: zero,
        log_p,
        qed: zero,
        sas: zero,
        tox: zero,
    }
}

fn only_p_b(weight: f64) -> EnergyCoeffs {
    EnergyCoeffs {
        alpha: [weight, 0.0],
        gamma: [0.0; 4],
        ..EnergyCoeffs::default()
    }
}

/// `p_B = ‖C − c*‖²` started from `start`.
struct Bowl {
    start: Vec<f64>,
}

impl EnergyModel for Bowl {
    type Target = Vec<f64>;

    fn latent_dim(&self) -> usize {
        DIM
    }

    fn initial_point(&self, _: &Vec<f64>) -> Result<LatentChemical> {
        Ok(LatentChemical(self.start.clone()))
    }

    fn heads(&self, tape: &mut Tape, c: Var, target: &Vec<f64>) -> Result<HeadOutputs> {
        let t = row(tape, target);
        let d = tape.sub(c, t)?;
        let d2 = tape.mul(d, d)?;
        let p_b = tape.sum(d2);
        Ok(quiet(tape, p_b))
    }
}

/// `p_B = σ(w·C)` from the origin.
struct Logistic;

impl EnergyModel for Logistic {
    type Target = Vec<f64>;

    fn latent_dim(&self) -> usize {
        DIM
    }

    fn initial_point(&self, _: &Vec<f64>) -> Result<LatentChemical> {
        Ok(LatentChemical(vec![0.0; DIM]))
    }

    fn heads(&self, tape: &mut Tape, c: Var, w: &Vec<f64>) -> Result<HeadOutputs> {
        let w = row(tape, w);
        let prod = tape.mul(c, w)?;
        let logit = tape.sum(prod);
        let p_b = tape.sigmoid(logit);
        Ok(quiet(tape, p_b))
    }
}

/// `exp(C₀)` from just below the point where it overflows.
struct Cliff;

impl EnergyModel for Cliff {
    type Target = ();

    fn latent_dim(&self) -> usize {
        DIM
    }

    fn initial_point(&self, _: &()) -> Result<LatentChemical> {
        let mut c = vec![0.0; DIM];
        c[0] = 709.0;
        Ok(LatentChemical(c))
    }

    fn heads(&self, tape: &mut Tape, c: Var, _: &()) -> Result<HeadOutputs> {
        let x = tape.element(c, 0)?;
        let p_b = tape.exp(x);
        Ok(quiet(tape, p_b))
    }
}

fn cfg(steps: usize, lr: f64) -> OptConfig {
    OptConfig {
        steps,
        learning_rate: lr,
        seed: 3,
        stride: 50,
    }
}

#[test]
fn convex_bowl_reaches_planted_minimizer() {
    let mut r = common::rng(21);
    for _ in 0..5 {
        let target: Vec<f64> = (0..DIM).map(|_| r.random_range(-2.0..2.0)).collect();
        let start: Vec<f64> = (0..DIM).map(|_| r.random_range(-2.0..2.0)).collect();
        let out = latent_opt(&target, &Bowl { start }, &only_p_b(1.0), &cfg(2000, 0.05)).unwrap();
        let dist = out
            .final_point
            .squared_distance(&LatentChemical(target))
            .sqrt();
        assert!(dist < 1e-2, "distance {dist}");
        assert!(out.final_report.total < out.initial_report.total);
    }
}

#[test]
fn resuming_matches_a_single_run_bit_for_bit() {
    let model = Bowl {
        start: vec![1.5; DIM],
    };
    let target = vec![-0.5; DIM];
    let coeffs = only_p_b(1.0);
    let c = cfg(700, 0.01);
    let mut whole = OptState::new(&model.initial_point(&target).unwrap());
    continue_opt(&mut whole, &target, &model, &coeffs, 700, &c).unwrap();
    let mut split = OptState::new(&model.initial_point(&target).unwrap());
    continue_opt(&mut split, &target, &model, &coeffs, 300, &c).unwrap();
    let tail = continue_opt(&mut split, &target, &model, &coeffs, 400, &c).unwrap();
    assert_eq!(split.steps_done(), 700);
    assert_eq!(whole.current(), split.current());
    assert_eq!(tail.last().unwrap().step, 700);
}

#[test]
fn job_count_does_not_change_results() {
    let model = Bowl {
        start: vec![0.3; DIM],
    };
    let mut r = common::rng(5);
    let targets: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..DIM).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let c = cfg(300, 0.02);
    let serial = optimize_batch(&targets, &model, &only_p_b(1.0), &c, 1).unwrap();
    let parallel = optimize_batch(&targets, &model, &only_p_b(1.0), &c, 3).unwrap();
    assert_eq!(serial, parallel);
    let seeds: std::collections::HashSet<u64> = serial.iter().map(|o| o.seed).collect();
    assert_eq!(seeds.len(), targets.len());
}

#[test]
fn trajectory_follows_the_stride() {
    let model = Bowl {
        start: vec![1.0; DIM],
    };
    let out = latent_opt(&vec![0.0; DIM], &model, &only_p_b(1.0), &cfg(120, 0.01)).unwrap();
    let steps: Vec<usize> = out.trajectory.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 50, 100, 120]);
    for r in &out.trajectory {
        let c = only_p_b(1.0);
        assert_eq!(r.reconstruct(&c), r.total);
    }
}

#[test]
fn overflow_reports_last_finite_point() {
    // A tiny weight keeps the squared gradient inside ADAM representable.
    let err = latent_opt(&(), &Cliff, &only_p_b(-1e-160), &cfg(100, 0.5)).unwrap_err();
    match err {
        Error::NonFiniteEnergy { step, last_finite } => {
            // ADAM's first step moves C₀ by the learning rate; the second
            // crosses ln(f64::MAX) ≈ 709.78.
            assert_eq!(step, 2);
            assert!((last_finite[0] - 709.5).abs() < 1e-6, "{}", last_finite[0]);
            assert!(last_finite[0].exp().is_finite());
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn site_signature_target_rejects_wrong_width() {
    let (_, heads) = common::small_models(1);
    let site = SiteSignature(vec![0.1; 3]);
    let err = latent_opt(&site, &heads, &EnergyCoeffs::default(), &cfg(5, 0.01)).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn logistic_binding_never_decreases(
        w in prop::collection::vec(-2.0f64..2.0, DIM),
        lr in 1e-3f64..5e-2,
    ) {
        prop_assume!(w.iter().all(|v| v.abs() > 1e-3));
        let c = OptConfig { stride: 1, ..cfg(200, lr) };
        let out = latent_opt(&w, &Logistic, &only_p_b(-10.0), &c).unwrap();
        for pair in out.trajectory.windows(2) {
            prop_assert!(pair[1].p_b >= pair[0].p_b, "{} then {}", pair[0].p_b, pair[1].p_b);
        }
    }

    #[test]
    fn bowl_energy_ends_below_start(
        start in prop::collection::vec(-3.0f64..3.0, DIM),
        target in prop::collection::vec(-3.0f64..3.0, DIM),
    ) {
        let out = latent_opt(&target, &Bowl { start }, &only_p_b(1.0), &cfg(400, 0.02)).unwrap();
        prop_assert!(out.final_report.total <= out.initial_report.total);
    }
}
