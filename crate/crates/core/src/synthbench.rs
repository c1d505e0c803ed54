//! A seeded synthetic world with planted binders and exact oracles.
//!
//! Each archetype owns a latent binder center, a composition profile over
//! elements and residues, and a coarse 3-D template. Ligands generated for a
//! site of archetype `k` sit near `b_k`, and the DSX oracle is a Gaussian
//! kernel around `b_k`, so every learned stage has a known right answer.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictors::LatentChemical;
use crate::sitegraph::{Atom, ProteinSiteGraph, ELEMENT_VOCAB, RESIDUE_VOCAB};
use crate::training::{PlcRecord, PropRecord, ToxRecord};

/// Soft toxicity label thresholds on `sigmoid(a4·C)`.
pub const TOX_THRESHOLDS: [f64; 5] = [0.6, 0.7, 0.8, 0.9, 0.95];

const SIGNATURE_SYMBOLS: usize = 4;
const SIGNATURE_MASS: f64 = 0.7;
const MAX_RESAMPLES: usize = 10_000;

/// Mixes a base seed with an index (splitmix64 finaliser).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub archetypes: usize,
    pub latent_dim: usize,
    /// Oracle depth `s`.
    pub oracle_scale: f64,
    /// Kernel width `τ`; defaults to the latent width.
    pub kernel_width: Option<f64>,
    pub dsx_noise: f64,
    /// Per-record ligand jitter σ is drawn uniformly from this range.
    pub jitter_min: f64,
    pub jitter_max: f64,
    pub min_atoms: usize,
    pub max_atoms: usize,
    /// Radius in Å of the ball holding every site.
    pub site_radius: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 7,
            archetypes: 8,
            latent_dim: 56,
            oracle_scale: 300.0,
            kernel_width: None,
            dsx_noise: 10.0,
            jitter_min: 0.3,
            jitter_max: 1.0,
            min_atoms: 8,
            max_atoms: 30,
            site_radius: 12.0,
        }
    }
}

impl WorldConfig {
    pub fn tau(&self) -> f64 {
        self.kernel_width.unwrap_or(self.latent_dim as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("world.{m}")));
        if self.archetypes == 0 {
            return bad("archetypes must be at least 1".into());
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1".into());
        }
        if !(self.oracle_scale.is_finite() && self.oracle_scale > 0.0) {
            return bad(format!(
                "oracle_scale must be positive, got {}",
                self.oracle_scale
            ));
        }
        if !(self.tau().is_finite() && self.tau() > 0.0) {
            return bad(format!("kernel_width must be positive, got {}", self.tau()));
        }
        if !(self.dsx_noise.is_finite() && self.dsx_noise >= 0.0) {
            return bad(format!(
                "dsx_noise must be non-negative, got {}",
                self.dsx_noise
            ));
        }
        if !(self.jitter_min >= 0.0
            && self.jitter_max >= self.jitter_min
            && self.jitter_max.is_finite())
        {
            return bad(format!(
                "jitter range [{}, {}] is invalid",
                self.jitter_min, self.jitter_max
            ));
        }
        if self.min_atoms == 0 || self.max_atoms < self.min_atoms {
            return bad(format!(
                "atom range [{}, {}] is invalid",
                self.min_atoms, self.max_atoms
            ));
        }
        if !(self.site_radius.is_finite() && self.site_radius > 0.0) {
            return bad(format!(
                "site_radius must be positive, got {}",
                self.site_radius
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub center: LatentChemical,
    pub element_profile: Vec<f64>,
    pub residue_profile: Vec<f64>,
    pub anchors: Vec<[f64; 3]>,
    /// Per-atom coordinate spread around an anchor, in Å.
    pub dispersion: f64,
}

/// Regeneration recipe plus the derived archetypes, for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldManifest {
    pub config: WorldConfig,
    pub tau: f64,
    pub tox_thresholds: Vec<f64>,
    pub archetypes: Vec<Archetype>,
    pub property_directions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    config: WorldConfig,
    archetypes: Vec<Archetype>,
    /// Unit directions for logP, QED, SAS and toxicity.
    directions: [Vec<f64>; 4],
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n);
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn profile<R: Rng + ?Sized>(rng: &mut R, vocab: usize) -> Vec<f64> {
    let mut symbols: Vec<usize> = (0..vocab).collect();
    let (chosen, _) = symbols.partial_shuffle(rng, SIGNATURE_SYMBOLS.min(vocab));
    let weights: Vec<f64> = (0..chosen.len())
        .map(|_| rng.random_range(0.5..1.5))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut p = vec![(1.0 - SIGNATURE_MASS) / vocab as f64; vocab];
    for (&s, w) in chosen.iter().zip(&weights) {
        p[s] += SIGNATURE_MASS * w / total;
    }
    p
}

fn categorical<R: Rng + ?Sized>(rng: &mut R, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

fn clip_to_ball(p: [f64; 3], radius: f64) -> [f64; 3] {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if r <= radius {
        p
    } else {
        let s = radius / r;
        [p[0] * s, p[1] * s, p[2] * s]
    }
}

impl SynthWorld {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dim = config.latent_dim;
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(config.archetypes);
        let mut attempts = 0;
        while centers.len() < config.archetypes {
            attempts += 1;
            if attempts > MAX_RESAMPLES {
                return Err(Error::Config(
                    "could not place archetype centers at pairwise distance > 1".into(),
                ));
            }
            let c = gaussian_vec(&mut rng, dim);
            let clear = centers.iter().all(|o| {
                let d2: f64 = o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                d2 > 1.0
            });
            if clear {
                centers.push(c);
            }
        }
        let anchor_spread = Normal::new(0.0, config.site_radius / 3.0).expect("finite spread");
        let archetypes = centers
            .into_iter()
            .map(|center| {
                let element_profile = profile(&mut rng, ELEMENT_VOCAB);
                let residue_profile = profile(&mut rng, RESIDUE_VOCAB);
                let n_anchors = rng.random_range(3..=6);
                let anchors = (0..n_anchors)
                    .map(|_| {
                        let p = [
                            anchor_spread.sample(&mut rng),
                            anchor_spread.sample(&mut rng),
                            anchor_spread.sample(&mut rng),
                        ];
                        clip_to_ball(p, config.site_radius * 2.0 / 3.0)
                    })
                    .collect();
                Archetype {
                    center: LatentChemical(center),
                    element_profile,
                    residue_profile,
                    anchors,
                    dispersion: rng.random_range(1.0..2.5),
                }
            })
            .collect();
        let directions = [
            unit_vec(&mut rng, dim),
            unit_vec(&mut rng, dim),
            unit_vec(&mut rng, dim),
            unit_vec(&mut rng, dim),
        ];
        Ok(SynthWorld {
            config,
            archetypes,
            directions,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn archetype_count(&self) -> usize {
        self.archetypes.len()
    }

    pub fn archetype(&self, k: usize) -> Result<&Archetype> {
        self.archetypes.get(k).ok_or(Error::Index {
            what: "archetype",
            index: k,
            len: self.archetypes.len(),
        })
    }

    pub fn center(&self, k: usize) -> Result<&LatentChemical> {
        Ok(&self.archetype(k)?.center)
    }

    fn check_width(&self, c: &LatentChemical) -> Result<()> {
        if c.dim() != self.config.latent_dim {
            return Err(Error::dim("oracle", &[c.dim()], &[self.config.latent_dim]));
        }
        Ok(())
    }

    /// `−s·exp(−‖C − b_k‖²/τ)` without observation noise.
    pub fn oracle_dsx_noiseless(&self, c: &LatentChemical, k: usize) -> Result<f64> {
        let center = self.center(k)?;
        self.check_width(c)?;
        let d2 = c.squared_distance(center);
        Ok(-self.config.oracle_scale * (-d2 / self.config.tau()).exp())
    }

    /// Noisy oracle score, as observed in datasets.
    pub fn oracle_dsx<R: Rng + ?Sized>(
        &self,
        c: &LatentChemical,
        k: usize,
        rng: &mut R,
    ) -> Result<f64> {
        let clean = self.oracle_dsx_noiseless(c, k)?;
        let z: f64 = rng.sample(StandardNormal);
        Ok(clean + self.config.dsx_noise * z)
    }

    /// Gradient of the noiseless oracle with respect to `C`.
    pub fn oracle_gradient(&self, c: &LatentChemical, k: usize) -> Result<Vec<f64>> {
        let value = self.oracle_dsx_noiseless(c, k)?;
        let tau = self.config.tau();
        let center = self.center(k)?;
        Ok(c.values()
            .iter()
            .zip(center.values())
            .map(|(x, b)| -2.0 * (x - b) / tau * value)
            .collect())
    }

    pub fn gen_site<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<ProteinSiteGraph> {
        let arch = self.archetype(k)?;
        let n = rng.random_range(self.config.min_atoms..=self.config.max_atoms);
        let jitter = Normal::new(0.0, arch.dispersion).expect("finite dispersion");
        let atoms = (0..n)
            .map(|_| {
                let anchor = arch.anchors[rng.random_range(0..arch.anchors.len())];
                let p = [
                    anchor[0] + jitter.sample(rng),
                    anchor[1] + jitter.sample(rng),
                    anchor[2] + jitter.sample(rng),
                ];
                Atom {
                    element: categorical(rng, &arch.element_profile),
                    residue: categorical(rng, &arch.residue_profile),
                    position: clip_to_ball(p, self.config.site_radius),
                }
            })
            .collect();
        ProteinSiteGraph::new("", atoms)
    }

    /// A ligand near `b_k` with a per-record jitter scale.
    pub fn gen_binder<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<LatentChemical> {
        let center = self.center(k)?;
        let sigma = if self.config.jitter_max > self.config.jitter_min {
            rng.random_range(self.config.jitter_min..=self.config.jitter_max)
        } else {
            self.config.jitter_min
        };
        Ok(LatentChemical(
            center
                .values()
                .iter()
                .map(|b| b + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        ))
    }

    /// A draw from the latent prior `N(0, I)`.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentChemical {
        LatentChemical(gaussian_vec(rng, self.config.latent_dim))
    }

    pub fn gen_plc<R: Rng + ?Sized>(&self, id: String, rng: &mut R) -> Result<PlcRecord> {
        let k = rng.random_range(0..self.archetypes.len());
        let mut site = self.gen_site(k, rng)?;
        site.id = id.clone();
        let ligand = self.gen_binder(k, rng)?;
        let dsx = self.oracle_dsx(&ligand, k, rng)?;
        Ok(PlcRecord {
            id,
            site,
            ligand,
            dsx,
            archetype: Some(k),
        })
    }

    /// `n` complexes with ids `{prefix}{index}`; one seed drawn from `rng`.
    pub fn gen_plc_dataset<R: RngCore + ?Sized>(
        &self,
        n: usize,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Vec<PlcRecord>> {
        let base = rng.next_u64();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(derive_seed(base, i as u64));
                self.gen_plc(format!("{prefix}{i:05}"), &mut r)
            })
            .collect()
    }

    pub fn true_properties(&self, c: &LatentChemical) -> Result<[f64; 3]> {
        self.check_width(c)?;
        let v = c.values();
        let log_p = (dot(&self.directions[0], v) + 2.5).clamp(-2.0, 7.0);
        let qed = sigmoid(dot(&self.directions[1], v));
        let sas = 2.0 + 2.0 * sigmoid(dot(&self.directions[2], v));
        Ok([log_p, qed, sas])
    }

    /// Underlying toxicity probability `sigmoid(a4·C)`.
    pub fn toxicity_score(&self, c: &LatentChemical) -> Result<f64> {
        self.check_width(c)?;
        Ok(sigmoid(dot(&self.directions[3], c.values())))
    }

    /// Fraction of assay thresholds the toxicity score exceeds.
    pub fn toxicity_label(&self, c: &LatentChemical) -> Result<f64> {
        let z = self.toxicity_score(c)?;
        let hits = TOX_THRESHOLDS.iter().filter(|&&t| z > t).count();
        Ok(hits as f64 / TOX_THRESHOLDS.len() as f64)
    }

    pub fn gen_tox_dataset<R: RngCore + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<ToxRecord>> {
        let base = rng.next_u64();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(derive_seed(base, i as u64));
                let ligand = self.sample_prior(&mut r);
                let l_tox = self.toxicity_label(&ligand)?;
                Ok(ToxRecord { ligand, l_tox })
            })
            .collect()
    }

    pub fn gen_prop_dataset<R: RngCore + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<PropRecord>> {
        let base = rng.next_u64();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(derive_seed(base, i as u64));
                let ligand = self.sample_prior(&mut r);
                let phi = self.true_properties(&ligand)?;
                Ok(PropRecord { ligand, phi })
            })
            .collect()
    }

    pub fn manifest(&self) -> WorldManifest {
        WorldManifest {
            config: self.config.clone(),
            tau: self.config.tau(),
            tox_thresholds: TOX_THRESHOLDS.to_vec(),
            archetypes: self.archetypes.clone(),
            property_directions: self.directions.to_vec(),
        }
    }
}
