//! The design energy and its gradient descent in latent space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamConfig, ParamSet, Phase, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::predictors::{
    AffinityModel, DirectMapper, LatentChemical, PropertyModel, ToxicityModel, DSX_SCALE,
};
use crate::sitegraph::SiteSignature;
use crate::synthbench::derive_seed;

pub const DSX_FLOOR: f64 = -250.0;
pub const LOGP_WINDOW: [f64; 2] = [0.0, 5.0];

/// `max(−250, x)`.
pub fn g_h(x: f64) -> f64 {
    x.max(DSX_FLOOR)
}

/// `−4x(x − 5)/25`, peaking at 1 for `x = 2.5`.
pub fn g_q(x: f64) -> f64 {
    crate::diffcore::tape::quad_window(x, LOGP_WINDOW[0], LOGP_WINDOW[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyCoeffs {
    /// Weights of `p_B` and `g_h(dsx)`.
    pub alpha: [f64; 2],
    /// Weights of `g_q(logP)`, QED, SAS and toxicity.
    pub gamma: [f64; 4],
    pub dsx_floor: f64,
    pub logp_window: [f64; 2],
}

impl Default for EnergyCoeffs {
    fn default() -> Self {
        EnergyCoeffs {
            alpha: [-10.0, 1.0 / 200.0],
            gamma: [-0.5, -1.0, 0.1, 1.0],
            dsx_floor: DSX_FLOOR,
            logp_window: LOGP_WINDOW,
        }
    }
}

impl EnergyCoeffs {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .alpha
            .iter()
            .chain(&self.gamma)
            .chain(&self.logp_window);
        if all.chain([&self.dsx_floor]).any(|v| !v.is_finite()) {
            return Err(Error::Config(
                "optimization.coeffs must all be finite".into(),
            ));
        }
        if self.logp_window[1] <= self.logp_window[0] {
            return Err(Error::Config(
                "optimization.coeffs.logp_window must be increasing".into(),
            ));
        }
        Ok(())
    }

    fn weights(&self) -> [f64; 6] {
        let [a1, a2] = self.alpha;
        let [g1, g2, g3, g4] = self.gamma;
        [a1, a2, g1, g2, g3, g4]
    }
}

/// One evaluation of the energy and its components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub step: usize,
    pub total: f64,
    pub p_b: f64,
    pub dsx_hat: f64,
    pub g_h: f64,
    pub log_p: f64,
    pub g_q: f64,
    pub qed: f64,
    pub sas: f64,
    pub tox: f64,
}

impl EnergyReport {
    /// The weighted sum of the components, in the order used on the tape.
    pub fn reconstruct(&self, coeffs: &EnergyCoeffs) -> f64 {
        let terms = [self.p_b, self.g_h, self.g_q, self.qed, self.sas, self.tox];
        let mut total = 0.0;
        for (c, x) in coeffs.weights().iter().zip(terms) {
            total += c * x;
        }
        total
    }
}

/// Scalar head outputs recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    pub p_b: Var,
    /// In natural DSX units.
    pub dsx: Var,
    pub log_p: Var,
    pub qed: Var,
    pub sas: Var,
    pub tox: Var,
}

/// Differentiable predictors an optimization runs against.
pub trait EnergyModel: Sync {
    type Target: Sync;

    fn latent_dim(&self) -> usize;

    /// Starting point `C_0` for a target.
    fn initial_point(&self, target: &Self::Target) -> Result<LatentChemical>;

    /// Records the heads at `c: [1, dim]`.
    fn heads(&self, tape: &mut Tape, c: Var, target: &Self::Target) -> Result<HeadOutputs>;
}

/// The trained affinity, mapper, toxicity and property models in infer mode.
#[derive(Debug, Clone)]
pub struct TrainedHeads {
    pub affinity: AffinityModel,
    pub mapper: DirectMapper,
    pub toxicity: ToxicityModel,
    pub properties: PropertyModel,
}

impl EnergyModel for TrainedHeads {
    type Target = SiteSignature;

    fn latent_dim(&self) -> usize {
        self.affinity.latent_dim
    }

    fn initial_point(&self, site: &SiteSignature) -> Result<LatentChemical> {
        self.mapper.map(site)
    }

    fn heads(&self, tape: &mut Tape, c: Var, site: &SiteSignature) -> Result<HeadOutputs> {
        let mut phase = Phase::Infer;
        let ab = self.affinity.params.bind(tape, false);
        let tb = self.toxicity.params.bind(tape, false);
        let pb = self.properties.params.bind(tape, false);
        let p = tape.constant(Tensor::new(vec![1, site.len()], site.values().to_vec())?);
        let aff = self.affinity.forward(tape, &ab, c, p, &mut phase)?;
        let p_b = tape.element(aff.p_bind, 0)?;
        let dsx_scaled = tape.element(aff.dsx_scaled, 0)?;
        let dsx = tape.scale(dsx_scaled, DSX_SCALE);
        let tox = self.toxicity.forward(tape, &tb, c, &mut phase)?;
        let tox = tape.element(tox, 0)?;
        let props = self.properties.forward(tape, &pb, c, &mut phase)?;
        Ok(HeadOutputs {
            p_b,
            dsx,
            log_p: tape.element(props, 0)?,
            qed: tape.element(props, 1)?,
            sas: tape.element(props, 2)?,
            tox,
        })
    }
}

/// Energy at `c` with its gradient with respect to `c`.
pub fn energy_with_gradient<M: EnergyModel>(
    c: &LatentChemical,
    target: &M::Target,
    model: &M,
    coeffs: &EnergyCoeffs,
) -> Result<(EnergyReport, Vec<f64>)> {
    if c.dim() != model.latent_dim() {
        return Err(Error::dim("energy", &[c.dim()], &[model.latent_dim()]));
    }
    let mut tape = Tape::new();
    let cv = tape.variable(Tensor::new(vec![1, c.dim()], c.values().to_vec())?);
    let h = model.heads(&mut tape, cv, target)?;
    let gh = tape.floor_at(h.dsx, coeffs.dsx_floor);
    let gq = tape.quad_window(h.log_p, coeffs.logp_window[0], coeffs.logp_window[1]);
    let w = coeffs.weights();
    let total = tape.weighted_sum(&[
        (h.p_b, w[0]),
        (gh, w[1]),
        (gq, w[2]),
        (h.qed, w[3]),
        (h.sas, w[4]),
        (h.tox, w[5]),
    ])?;
    let item = |v: Var| tape.value(v).item();
    let report = EnergyReport {
        step: 0,
        total: item(total),
        p_b: item(h.p_b),
        dsx_hat: item(h.dsx),
        g_h: item(gh),
        log_p: item(h.log_p),
        g_q: item(gq),
        qed: item(h.qed),
        sas: item(h.sas),
        tox: item(h.tox),
    };
    if !report.total.is_finite() {
        return Ok((report, Vec::new()));
    }
    let grads = tape.backward(total)?;
    Ok((report, grads.wrt(cv).into_data()))
}

pub fn energy<M: EnergyModel>(
    c: &LatentChemical,
    target: &M::Target,
    model: &M,
    coeffs: &EnergyCoeffs,
) -> Result<EnergyReport> {
    energy_with_gradient(c, target, model, coeffs).map(|(r, _)| r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Master seed for per-target derived seeds.
    pub seed: u64,
    /// Trajectory sampling stride in steps.
    pub stride: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            steps: 20_000,
            learning_rate: 0.01,
            seed: 13,
            stride: 100,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "optimization.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config(
                "optimization.stride must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A resumable optimization: the current point and its ADAM moments.
#[derive(Debug, Clone)]
pub struct OptState {
    params: ParamSet,
    steps_done: usize,
}

impl OptState {
    pub fn new(c0: &LatentChemical) -> Self {
        let mut params = ParamSet::new();
        params.add("latent", Tensor::vector(c0.values().to_vec()));
        OptState {
            params,
            steps_done: 0,
        }
    }

    pub fn current(&self) -> LatentChemical {
        LatentChemical(
            self.params
                .iter()
                .next()
                .expect("latent entry")
                .1
                .data()
                .to_vec(),
        )
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }
}

/// Runs `steps` more ADAM steps; returns the sampled trajectory.
///
/// Reports are taken at every multiple of `cfg.stride` and at the final
/// point. Carrying the same state through two calls reproduces a single
/// longer run exactly.
pub fn continue_opt<M: EnergyModel>(
    state: &mut OptState,
    target: &M::Target,
    model: &M,
    coeffs: &EnergyCoeffs,
    steps: usize,
    cfg: &OptConfig,
) -> Result<Vec<EnergyReport>> {
    cfg.validate()?;
    coeffs.validate()?;
    let adam = AdamConfig::new(cfg.learning_rate);
    let mut trajectory = Vec::new();
    let end = state.steps_done + steps;
    let mut previous: Option<LatentChemical> = None;
    loop {
        let t = state.steps_done;
        let c = state.current();
        let (mut report, grad) = energy_with_gradient(&c, target, model, coeffs)?;
        report.step = t;
        if !report.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            // A finite energy with an overflowing gradient still counts as finite.
            let last = if report.total.is_finite() {
                Some(c)
            } else {
                previous
            };
            return Err(Error::NonFiniteEnergy {
                step: t,
                last_finite: last.map(|c| c.0).unwrap_or_default(),
            });
        }
        previous = Some(c);
        if t.is_multiple_of(cfg.stride) || t == end {
            trajectory.push(report);
        }
        if t == end {
            return Ok(trajectory);
        }
        state.params.adam_step(&[Tensor::vector(grad)], &adam)?;
        state.steps_done += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptOutcome {
    pub initial: LatentChemical,
    pub final_point: LatentChemical,
    pub initial_report: EnergyReport,
    pub final_report: EnergyReport,
    pub trajectory: Vec<EnergyReport>,
    /// Seed derived for this target, for any per-target sampling.
    pub seed: u64,
}

/// Starts at the model's initial point and runs `cfg.steps` steps.
pub fn latent_opt<M: EnergyModel>(
    target: &M::Target,
    model: &M,
    coeffs: &EnergyCoeffs,
    cfg: &OptConfig,
) -> Result<OptOutcome> {
    let c0 = model.initial_point(target)?;
    let mut state = OptState::new(&c0);
    let trajectory = continue_opt(&mut state, target, model, coeffs, cfg.steps, cfg)?;
    Ok(OptOutcome {
        initial: c0,
        final_point: state.current(),
        initial_report: trajectory.first().expect("non-empty").clone(),
        final_report: trajectory.last().expect("non-empty").clone(),
        trajectory,
        seed: cfg.seed,
    })
}

/// Independent optimizations in input order, on up to `jobs` threads.
///
/// Target `i` runs with seed `derive_seed(cfg.seed, i)`; results do not
/// depend on `jobs`.
pub fn optimize_batch<M: EnergyModel>(
    targets: &[M::Target],
    model: &M,
    coeffs: &EnergyCoeffs,
    cfg: &OptConfig,
    jobs: usize,
) -> Result<Vec<OptOutcome>> {
    let run = |(i, t): (usize, &M::Target)| {
        let local = OptConfig {
            seed: derive_seed(cfg.seed, i as u64),
            ..cfg.clone()
        };
        latent_opt(t, model, coeffs, &local)
    };
    if jobs <= 1 {
        return targets.iter().enumerate().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| targets.par_iter().enumerate().map(run).collect())
}
