mod common;

use latent_design::predictors::LatentChemical;
use latent_design::sitegraph::{ProteinSiteGraph, ELEMENT_VOCAB, RESIDUE_VOCAB};
use latent_design::synthbench::{SynthWorld, WorldConfig, TOX_THRESHOLDS};
use latent_design::training::{scramble_batch, PlcRecord};
use proptest::prelude::*;

fn world() -> SynthWorld {
    SynthWorld::new(WorldConfig::default()).unwrap()
}

/// Multinomial naive Bayes over element and residue tokens.
struct NaiveBayes {
    log_element: Vec<Vec<f64>>,
    log_residue: Vec<Vec<f64>>,
}

impl NaiveBayes {
    fn fit(samples: &[(ProteinSiteGraph, usize)], classes: usize) -> Self {
        let mut el = vec![vec![1.0; ELEMENT_VOCAB]; classes];
        let mut re = vec![vec![1.0; RESIDUE_VOCAB]; classes];
        for (g, k) in samples {
            for a in &g.atoms {
                el[*k][a.element] += 1.0;
                re[*k][a.residue] += 1.0;
            }
        }
        let norm = |rows: Vec<Vec<f64>>| {
            rows.into_iter()
                .map(|r| {
                    let t: f64 = r.iter().sum();
                    r.into_iter().map(|v| (v / t).ln()).collect()
                })
                .collect()
        };
        NaiveBayes {
            log_element: norm(el),
            log_residue: norm(re),
        }
    }

    fn predict(&self, g: &ProteinSiteGraph) -> usize {
        let score = |k: usize| -> f64 {
            g.atoms
                .iter()
                .map(|a| self.log_element[k][a.element] + self.log_residue[k][a.residue])
                .sum()
        };
        (0..self.log_element.len())
            .max_by(|&a, &b| score(a).total_cmp(&score(b)))
            .unwrap()
    }
}

#[test]
fn archetypes_are_recoverable_from_site_composition() {
    let w = world();
    let mut r = common::rng(40);
    let k = w.archetype_count();
    let draw = |n: usize, r: &mut rand_chacha::ChaCha8Rng| -> Vec<(ProteinSiteGraph, usize)> {
        (0..n * k)
            .map(|i| (w.gen_site(i % k, r).unwrap(), i % k))
            .collect()
    };
    let train = draw(100, &mut r);
    let test = draw(50, &mut r);
    let nb = NaiveBayes::fit(&train, k);
    let correct = test.iter().filter(|(g, k)| nb.predict(g) == *k).count();
    let accuracy = correct as f64 / test.len() as f64;
    assert!(accuracy > 0.9, "accuracy {accuracy}");
}

#[test]
fn scrambles_are_uniform_over_other_ligands() {
    let w = world();
    let mut r = common::rng(41);
    let records = w.gen_plc_dataset(10, "s", &mut r).unwrap();
    let pool: Vec<LatentChemical> = records.iter().map(|p| p.ligand.clone()).collect();
    let draws = 9000;
    let positives = vec![records[3].clone(); draws];
    let negatives = scramble_batch(&positives, &pool, &mut r).unwrap();
    let mut counts = vec![0usize; pool.len()];
    for n in &negatives {
        assert_eq!(n.dsx, 0.0);
        assert_eq!(n.site, records[3].site);
        counts[pool.iter().position(|c| *c == n.ligand).unwrap()] += 1;
    }
    assert_eq!(counts[3], 0);
    let p = 1.0 / (pool.len() - 1) as f64;
    let (mean, sd) = (draws as f64 * p, (draws as f64 * p * (1.0 - p)).sqrt());
    for (i, &c) in counts.iter().enumerate().filter(|&(i, _)| i != 3) {
        assert!(
            (c as f64 - mean).abs() < 3.0 * sd,
            "ligand {i}: {c} vs {mean:.0} ± {sd:.1}"
        );
    }
}

#[test]
fn positives_and_scrambles_separate_under_the_oracle() {
    let w = world();
    let mut r = common::rng(42);
    let records = w.gen_plc_dataset(400, "p", &mut r).unwrap();
    let pool: Vec<LatentChemical> = records.iter().map(|p| p.ligand.clone()).collect();
    let negatives = scramble_batch(&records, &pool, &mut r).unwrap();
    let score = |c: &LatentChemical, p: &PlcRecord| {
        w.oracle_dsx_noiseless(c, p.archetype.unwrap()).unwrap()
    };
    let pos: f64 = records.iter().map(|p| score(&p.ligand, p)).sum::<f64>() / records.len() as f64;
    let neg: f64 = negatives
        .iter()
        .zip(&records)
        .map(|(n, p)| score(&n.ligand, p))
        .sum::<f64>()
        / records.len() as f64;
    assert!(neg - pos >= 100.0, "positives {pos:.1}, scrambled {neg:.1}");
}

#[test]
fn observed_dsx_is_oracle_plus_bounded_noise() {
    let w = world();
    let mut r = common::rng(43);
    let records = w.gen_plc_dataset(2000, "n", &mut r).unwrap();
    let resid: Vec<f64> = records
        .iter()
        .map(|p| {
            p.dsx
                - w.oracle_dsx_noiseless(&p.ligand, p.archetype.unwrap())
                    .unwrap()
        })
        .collect();
    let s = latent_design::evalkit::summarize(&resid).unwrap();
    assert!(s.mean.abs() < 4.0 * 10.0 / (2000f64).sqrt(), "{s:?}");
    assert!((s.stddev - 10.0).abs() < 1.0, "{s:?}");
}

#[test]
fn oracle_gradient_matches_central_differences() {
    let w = world();
    let mut r = common::rng(44);
    for i in 0..20 {
        let k = i % w.archetype_count();
        let c = w.gen_binder(k, &mut r).unwrap();
        let g = w.oracle_gradient(&c, k).unwrap();
        let numeric: Vec<f64> = (0..c.dim())
            .map(|j| {
                let mut p = c.clone();
                p.0[j] += common::FD_STEP;
                let mut m = c.clone();
                m.0[j] -= common::FD_STEP;
                (w.oracle_dsx_noiseless(&p, k).unwrap() - w.oracle_dsx_noiseless(&m, k).unwrap())
                    / (2.0 * common::FD_STEP)
            })
            .collect();
        assert!(common::relative_error(&g, &numeric) < common::FD_TOL);
    }
}

#[test]
fn manifest_regenerates_the_world() {
    let w = world();
    let m = w.manifest();
    let again = SynthWorld::new(m.config.clone()).unwrap().manifest();
    assert_eq!(
        serde_json::to_string(&m).unwrap(),
        serde_json::to_string(&again).unwrap()
    );
    assert_eq!(m.tox_thresholds, TOX_THRESHOLDS.to_vec());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn toxicity_labels_are_threshold_fractions(seed in 0u64..10_000) {
        let w = world();
        let c = w.sample_prior(&mut common::rng(seed));
        let l = w.toxicity_label(&c).unwrap();
        let steps = l * TOX_THRESHOLDS.len() as f64;
        prop_assert!((steps - steps.round()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&l));
        let s = w.toxicity_score(&c).unwrap();
        let expected = TOX_THRESHOLDS.iter().filter(|&&t| s > t).count() as f64 / TOX_THRESHOLDS.len() as f64;
        prop_assert_eq!(l, expected);
    }

    #[test]
    fn binders_are_nearest_their_own_center(seed in 0u64..10_000) {
        let w = world();
        let mut r = common::rng(seed);
        let k = (seed as usize) % w.archetype_count();
        let b = w.gen_binder(k, &mut r).unwrap();
        let own = b.squared_distance(w.center(k).unwrap());
        for j in (0..w.archetype_count()).filter(|&j| j != k) {
            prop_assert!(own < b.squared_distance(w.center(j).unwrap()));
        }
    }
}
