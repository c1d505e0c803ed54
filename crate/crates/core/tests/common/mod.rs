#![allow(dead_code)]

use latent_design::diffcore::{Checkpointed, Phase, Tape, Tensor, Var};
use latent_design::evalkit;
use latent_design::latentopt::{self, EnergyCoeffs, EnergyModel, HeadOutputs, TrainedHeads};
use latent_design::predictors::{
    AffinityModel, DirectMapper, LatentChemical, ModelConfig, PropertyModel, ToxicityModel,
};
use latent_design::sitegraph::{
    build_adjacency, Atom, Gcn, GcnConfig, GraphTensors, ProteinSiteGraph, SiteSignature,
    ELEMENT_VOCAB, RESIDUE_VOCAB,
};
use latent_design::synthbench::SynthWorld;
use latent_design::training::tox_weight;
use latent_design::Result;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const FD_POINTS: usize = 20;
pub const PRIMITIVE_POINTS: usize = 100;

pub type Outcome = std::result::Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Standard normal entries pushed at least `gap` away from `kink`.
pub fn away_from(shape: &[usize], kink: f64, gap: f64, rng: &mut impl Rng) -> Tensor {
    let mut t = normal(shape, rng);
    for v in t.data_mut() {
        if (*v - kink).abs() < gap {
            *v = kink + gap.copysign(*v - kink) * 2.0;
        }
    }
    t
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

type Scalar<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn eval_scalar(inputs: &[Tensor], f: &Scalar) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.value(out).item()
}

/// Largest relative error between the tape gradient of `f` and central
/// differences, taken per input tensor.
pub fn fd_inputs(inputs: &[Tensor], f: &Scalar) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v).into_data();
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            numeric.push((eval_scalar(&plus, f) - eval_scalar(&minus, f)) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Projects a tensor onto fixed random weights so any op yields a scalar.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let r = tape.constant(normal(&shape, &mut rng(seed)));
    let y = tape.mul(x, r)?;
    Ok(tape.sum(y))
}

/// Central differences at `h` and `h/2`; `None` when they disagree, which
/// means a ReLU kink lies within `h` of the point.
fn smooth_difference(f: impl Fn(f64) -> f64) -> Option<f64> {
    let at = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let (full, half) = (at(FD_STEP), at(FD_STEP / 2.0));
    let scale = full.abs().max(half.abs()).max(1e-6);
    ((full - half).abs() / scale < FD_TOL).then_some(full)
}

/// Gradient check of a model loss with respect to `coords` randomly chosen
/// trainable parameter entries and every entry of `inputs`. `None` when the
/// point sits on a kink.
pub fn fd_model<M, F>(
    model: &M,
    inputs: &[Tensor],
    coords: usize,
    seed: u64,
    loss: F,
) -> Option<f64>
where
    M: Checkpointed + Clone,
    F: Fn(&M, &mut Tape, &latent_design::diffcore::Bound, &[Var]) -> Result<Var>,
{
    let run = |m: &M, xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape, false);
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = loss(m, &mut tape, &bound, &vars).unwrap();
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = loss(model, &mut tape, &bound, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let per_entry = bound.collect(&grads);

    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    let trainable: Vec<usize> = (0..names.len())
        .filter(|&e| {
            model
                .params()
                .is_trainable(model.params().id(&names[e]).unwrap())
        })
        .collect();
    let mut r = rng(seed);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..coords {
        let e = *trainable.choose(&mut r).unwrap();
        let id = model.params().id(&names[e]).unwrap();
        let j = r.random_range(0..model.params().get(id).len());
        analytic.push(per_entry[e].data()[j]);
        numeric.push(smooth_difference(|h| {
            let mut m = model.clone();
            m.params_mut().get_mut(id).data_mut()[j] += h;
            run(&m, inputs)
        })?);
    }
    let mut worst = relative_error(&analytic, &numeric);
    for (i, &v) in vars.iter().enumerate() {
        let a = grads.wrt(v).into_data();
        let mut n = Vec::with_capacity(a.len());
        for j in 0..inputs[i].len() {
            n.push(smooth_difference(|h| {
                let mut xs = inputs.to_vec();
                xs[i].data_mut()[j] += h;
                run(model, &xs)
            })?);
        }
        worst = worst.max(relative_error(&a, &n));
    }
    Some(worst)
}

pub fn random_graph(rng: &mut impl Rng, max_atoms: usize) -> ProteinSiteGraph {
    let n = rng.random_range(1..=max_atoms);
    let atoms = (0..n)
        .map(|_| Atom {
            element: rng.random_range(0..ELEMENT_VOCAB),
            residue: rng.random_range(0..RESIDUE_VOCAB),
            position: [0, 1, 2].map(|_| rng.random_range(-8.0..8.0)),
        })
        .collect();
    ProteinSiteGraph::new("g", atoms).unwrap()
}

pub fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let q: [f64; 4] = [0, 1, 2, 3].map(|_| rng.sample(StandardNormal));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

pub fn rigid_motion(g: &ProteinSiteGraph, rng: &mut impl Rng) -> ProteinSiteGraph {
    let rot = random_rotation(rng);
    let shift: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-20.0..20.0));
    let mut out = g.clone();
    for a in &mut out.atoms {
        let p = a.position;
        a.position =
            [0, 1, 2].map(|i| rot[i][0] * p[0] + rot[i][1] * p[1] + rot[i][2] * p[2] + shift[i]);
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Adds noise to every trainable entry; zero biases would otherwise put
/// pre-activations exactly on the ReLU kink whenever a previous layer is
/// fully inactive.
pub fn jitter<M: Checkpointed>(model: &mut M, r: &mut impl Rng) {
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    for name in names {
        let id = model.params().id(&name).unwrap();
        if model.params().is_trainable(id) {
            for v in model.params_mut().get_mut(id).data_mut() {
                *v += 0.1 * r.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

/// Small model shapes so whole-network checks stay fast.
pub fn small_models(seed: u64) -> (Gcn, TrainedHeads) {
    let cfg = ModelConfig {
        latent_dim: 6,
        signature_dim: 5,
        affinity_hidden: vec![7, 4],
        mapper_hidden: vec![8, 6],
        toxicity_hidden: vec![5, 4],
        property_hidden: vec![6, 5],
        ..ModelConfig::default()
    };
    let mut r = rng(seed);
    let gcn = Gcn::new(
        GcnConfig {
            signature_dim: cfg.signature_dim,
            ..GcnConfig::default()
        },
        &mut r,
    )
    .unwrap();
    let mut heads = TrainedHeads {
        affinity: AffinityModel::new(&cfg, &mut r).unwrap(),
        mapper: DirectMapper::new(&cfg, &mut r).unwrap(),
        toxicity: ToxicityModel::new(&cfg, &mut r).unwrap(),
        properties: PropertyModel::new(&cfg, &mut r).unwrap(),
    };
    jitter(&mut heads.affinity, &mut r);
    jitter(&mut heads.mapper, &mut r);
    jitter(&mut heads.toxicity, &mut r);
    jitter(&mut heads.properties, &mut r);
    (gcn, heads)
}

/// Noiseless oracle kernel of a synthetic world as differentiable heads:
/// `p_B` is the kernel, `dsx` the oracle score, logP sits at the window
/// centre and the remaining properties are zero.
pub struct OracleHeads<'a> {
    pub world: &'a SynthWorld,
    pub mapper: &'a DirectMapper,
}

impl EnergyModel for OracleHeads<'_> {
    type Target = (SiteSignature, usize);

    fn latent_dim(&self) -> usize {
        self.world.config().latent_dim
    }

    fn initial_point(&self, t: &Self::Target) -> Result<LatentChemical> {
        self.mapper.map(&t.0)
    }

    fn heads(&self, tape: &mut Tape, c: Var, t: &Self::Target) -> Result<HeadOutputs> {
        let center = self.world.center(t.1)?;
        let b = tape.constant(Tensor::new(
            vec![1, center.dim()],
            center.values().to_vec(),
        )?);
        let d = tape.sub(c, b)?;
        let d2 = tape.mul(d, d)?;
        let d2 = tape.sum(d2);
        let arg = tape.scale(d2, -1.0 / self.world.config().tau());
        let p_b = tape.exp(arg);
        let dsx = tape.scale(p_b, -self.world.config().oracle_scale);
        let zero = tape.scale(p_b, 0.0);
        let log_p = tape.offset(zero, 2.5);
        Ok(HeadOutputs {
            p_b,
            dsx,
            log_p,
            qed: zero,
            sas: zero,
            tox: zero,
        })
    }
}

/// Worst relative error of one component, with the number of kink redraws.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: &'static str,
    pub worst: f64,
    pub redrawn: usize,
}

impl GradCheck {
    pub fn ok(&self) -> bool {
        self.worst < FD_TOL
    }
}

impl std::fmt::Display for GradCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}={:.2e}", self.name, self.worst)?;
        if self.redrawn > 0 {
            write!(f, " ({} redrawn)", self.redrawn)?;
        }
        Ok(())
    }
}

/// Draws points until `FD_POINTS` smooth ones have been checked.
fn over_points(name: &'static str, mut f: impl FnMut(u64) -> Option<f64>) -> GradCheck {
    let (mut accepted, mut redrawn, mut worst) = (0, 0, 0.0f64);
    let mut point = 0;
    while accepted < FD_POINTS {
        assert!(
            point < 10 * FD_POINTS as u64,
            "{name}: too many points on kinks"
        );
        match f(point) {
            Some(w) => {
                worst = worst.max(w);
                accepted += 1;
            }
            None => redrawn += 1,
        }
        point += 1;
    }
    GradCheck {
        name,
        worst,
        redrawn,
    }
}

/// Every tape primitive at `PRIMITIVE_POINTS` random points each.
pub fn primitive_gradients() -> Vec<GradCheck> {
    type Build = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Scalar<'static>>)>;
    let p = |seed: u64| move |t: &mut Tape, x: Var| project(t, x, seed);
    let cases: Vec<(&'static str, Build)> = vec![
        (
            "matmul",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 4], r), normal(&[4, 2], r)],
                    Box::new(move |t, v| {
                        let y = t.matmul(v[0], v[1])?;
                        p(1)(t, y)
                    }),
                )
            }),
        ),
        (
            "dense",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 4], r), normal(&[4, 2], r), normal(&[2], r)],
                    Box::new(move |t, v| {
                        let y = t.dense(v[0], v[1], v[2])?;
                        p(2)(t, y)
                    }),
                )
            }),
        ),
        (
            "add_bias",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 4], r), normal(&[4], r)],
                    Box::new(move |t, v| {
                        let y = t.add_bias(v[0], v[1])?;
                        p(3)(t, y)
                    }),
                )
            }),
        ),
        (
            "mul_cols",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 4], r), normal(&[4], r)],
                    Box::new(move |t, v| {
                        let y = t.mul_cols(v[0], v[1])?;
                        p(4)(t, y)
                    }),
                )
            }),
        ),
        (
            "add",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 4], r), normal(&[3, 4], r)],
                    Box::new(move |t, v| {
                        let y = t.add(v[0], v[1])?;
                        p(5)(t, y)
                    }),
                )
            }),
        ),
        (
            "sub",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 4], r), normal(&[3, 4], r)],
                    Box::new(move |t, v| {
                        let y = t.sub(v[0], v[1])?;
                        p(6)(t, y)
                    }),
                )
            }),
        ),
        (
            "mul",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 4], r), normal(&[3, 4], r)],
                    Box::new(move |t, v| {
                        let y = t.mul(v[0], v[1])?;
                        p(7)(t, y)
                    }),
                )
            }),
        ),
        (
            "scale",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 4], r)],
                    Box::new(move |t, v| {
                        let y = t.scale(v[0], -1.7);
                        p(8)(t, y)
                    }),
                )
            }),
        ),
        (
            "offset",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 4], r)],
                    Box::new(move |t, v| {
                        let y = t.offset(v[0], 2.5);
                        let y = t.mul(y, y)?;
                        p(9)(t, y)
                    }),
                )
            }),
        ),
        (
            "relu",
            Box::new(move |r| {
                (
                    vec![away_from(&[3, 4], 0.0, 1e-3, r)],
                    Box::new(move |t, v| {
                        let y = t.relu(v[0]);
                        p(10)(t, y)
                    }),
                )
            }),
        ),
        (
            "sigmoid",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 4], r)],
                    Box::new(move |t, v| {
                        let y = t.sigmoid(v[0]);
                        p(11)(t, y)
                    }),
                )
            }),
        ),
        (
            "exp",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 4], r)],
                    Box::new(move |t, v| {
                        let y = t.exp(v[0]);
                        p(12)(t, y)
                    }),
                )
            }),
        ),
        (
            "row_softmax",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 5], r)],
                    Box::new(move |t, v| {
                        let y = t.row_softmax(v[0]);
                        p(13)(t, y)
                    }),
                )
            }),
        ),
        (
            "sum_rows",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 4], r)],
                    Box::new(move |t, v| {
                        let y = t.sum_rows(v[0]);
                        let y = t.mul(y, y)?;
                        p(14)(t, y)
                    }),
                )
            }),
        ),
        (
            "sum",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 4], r)],
                    Box::new(move |t, v| {
                        let y = t.exp(v[0]);
                        Ok(t.sum(y))
                    }),
                )
            }),
        ),
        (
            "mean",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 4], r)],
                    Box::new(move |t, v| {
                        let y = t.exp(v[0]);
                        Ok(t.mean(y))
                    }),
                )
            }),
        ),
        (
            "concat_cols",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 2], r), normal(&[3, 4], r)],
                    Box::new(move |t, v| {
                        let y = t.concat_cols(v[0], v[1])?;
                        p(15)(t, y)
                    }),
                )
            }),
        ),
        (
            "stack_rows",
            Box::new(move |r| {
                (
                    vec![normal(&[4], r), normal(&[4], r), normal(&[4], r)],
                    Box::new(move |t, v| {
                        let y = t.stack_rows(v)?;
                        p(16)(t, y)
                    }),
                )
            }),
        ),
        (
            "column",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 4], r)],
                    Box::new(move |t, v| {
                        let y = t.column(v[0], 2)?;
                        p(17)(t, y)
                    }),
                )
            }),
        ),
        (
            "element",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 4], r)],
                    Box::new(move |t, v| {
                        let y = t.exp(v[0]);
                        t.element(y, 5)
                    }),
                )
            }),
        ),
        (
            "reshape",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 4], r)],
                    Box::new(move |t, v| {
                        let y = t.reshape(v[0], vec![4, 3])?;
                        p(18)(t, y)
                    }),
                )
            }),
        ),
        (
            "batch_normalize",
            Box::new(move |r| {
                (
                    vec![normal(&[5, 3], r)],
                    Box::new(move |t, v| {
                        let (y, _, _) = t.batch_normalize(v[0], 1e-5)?;
                        p(19)(t, y)
                    }),
                )
            }),
        ),
        (
            "mask",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 4], r)],
                    Box::new(move |t, v| {
                        let mask = (0..12)
                            .map(|i| if i % 3 == 0 { 0.0 } else { 1.5 })
                            .collect();
                        let y = t.mask(v[0], mask)?;
                        p(20)(t, y)
                    }),
                )
            }),
        ),
        (
            "mse",
            Box::new(move |r| {
                let target = normal(&[3, 4], r);
                (
                    vec![normal(&[3, 4], r)],
                    Box::new(move |t, v| t.mse(v[0], &target)),
                )
            }),
        ),
        (
            "bce",
            Box::new(move |r| {
                let labels: Vec<f64> = (0..6).map(|_| r.random_range(0.0..1.0)).collect();
                let weights: Vec<f64> = (0..6).map(|_| r.random_range(0.5..5.0)).collect();
                (
                    vec![normal(&[6], r)],
                    Box::new(move |t, v| {
                        let q = t.sigmoid(v[0]);
                        t.bce(q, &labels, &weights)
                    }),
                )
            }),
        ),
        (
            "floor_at",
            Box::new(move |r| {
                (
                    vec![away_from(&[3, 4], -0.3, 1e-3, r)],
                    Box::new(move |t, v| {
                        let y = t.floor_at(v[0], -0.3);
                        p(21)(t, y)
                    }),
                )
            }),
        ),
        (
            "quad_window",
            Box::new(move |r| {
                (
                    vec![normal(&[3, 4], r)],
                    Box::new(move |t, v| {
                        let y = t.quad_window(v[0], 0.0, 5.0);
                        p(22)(t, y)
                    }),
                )
            }),
        ),
        (
            "weighted_sum",
            Box::new(move |r| {
                let c: Vec<f64> = (0..3).map(|_| r.sample(StandardNormal)).collect();
                (
                    vec![normal(&[1], r), normal(&[1], r), normal(&[1], r)],
                    Box::new(move |t, v| {
                        let s: Vec<Var> = v.iter().map(|&x| t.exp(x)).collect();
                        t.weighted_sum(&[(s[0], c[0]), (s[1], c[1]), (s[2], c[2])])
                    }),
                )
            }),
        ),
    ];
    cases
        .iter()
        .enumerate()
        .map(|(i, (name, build))| {
            let mut r = rng(1000 + i as u64);
            let mut worst: f64 = 0.0;
            for _ in 0..PRIMITIVE_POINTS {
                let (inputs, f) = build(&mut r);
                worst = worst.max(fd_inputs(&inputs, f.as_ref()));
            }
            GradCheck {
                name,
                worst,
                redrawn: 0,
            }
        })
        .collect()
}

struct Draw {
    gcn: Gcn,
    heads: TrainedHeads,
    graph: GraphTensors,
    c: Tensor,
    s: Tensor,
    c0: LatentChemical,
}

fn draw(point: u64) -> Draw {
    let (gcn, heads) = small_models(5000 + point);
    let mut r = rng(6000 + point);
    let dim = heads.affinity.latent_dim;
    let graph = GraphTensors::new(&random_graph(&mut r, 12));
    let c = normal(&[3, dim], &mut r);
    let mut s = normal(&[3, heads.affinity.signature_dim()], &mut r);
    s.data_mut().iter_mut().for_each(|v| *v = v.abs());
    let c0 = LatentChemical(normal(&[dim], &mut r).into_data());
    Draw {
        gcn,
        heads,
        graph,
        c,
        s,
        c0,
    }
}

/// GCN, each head and the full energy at `FD_POINTS` random draws each.
pub fn network_gradients() -> Vec<GradCheck> {
    let coords = 12;
    let affinity = |train: bool| {
        move |p: u64| {
            let d = draw(p);
            fd_model(&d.heads.affinity, &[d.c, d.s], coords, p, |m, t, b, v| {
                // Training mode replays one dropout mask from a fixed seed.
                let mut dr = rng(p);
                let mut phase = if train {
                    Phase::Train(&mut dr)
                } else {
                    Phase::Infer
                };
                let out = m.forward(t, b, v[0], v[1], &mut phase)?;
                let a = project(t, out.p_bind, 32)?;
                let d = project(t, out.dsx_scaled, 33)?;
                t.add(a, d)
            })
        }
    };
    vec![
        over_points("gcn", |p| {
            let d = draw(p);
            fd_model(&d.gcn, &[], coords, p, |m, t, b, _| {
                let s = m.forward(t, b, &d.graph)?;
                project(t, s, 31)
            })
        }),
        over_points("affinity", affinity(false)),
        over_points("affinity_train", affinity(true)),
        over_points("mapper", |p| {
            let d = draw(p);
            fd_model(&d.heads.mapper, &[d.s], coords, p, |m, t, b, v| {
                let y = m.forward(t, b, v[0], &mut Phase::Infer)?;
                project(t, y, 36)
            })
        }),
        over_points("toxicity", |p| {
            let d = draw(p);
            fd_model(&d.heads.toxicity, &[d.c], coords, p, |m, t, b, v| {
                let y = m.forward(t, b, v[0], &mut Phase::Infer)?;
                project(t, y, 37)
            })
        }),
        over_points("properties", |p| {
            let d = draw(p);
            fd_model(&d.heads.properties, &[d.c], coords, p, |m, t, b, v| {
                let y = m.forward(t, b, v[0], &mut Phase::Infer)?;
                project(t, y, 38)
            })
        }),
        over_points("energy", |p| {
            let d = draw(p);
            let site = d.gcn.signature_of(&d.graph).unwrap();
            let coeffs = EnergyCoeffs::default();
            let e = |c: &LatentChemical| {
                latentopt::energy(c, &site, &d.heads, &coeffs)
                    .unwrap()
                    .total
            };
            let (_, analytic) =
                latentopt::energy_with_gradient(&d.c0, &site, &d.heads, &coeffs).unwrap();
            let mut numeric = Vec::with_capacity(analytic.len());
            for j in 0..d.c0.dim() {
                numeric.push(smooth_difference(|h| {
                    let mut c = d.c0.clone();
                    c.0[j] += h;
                    e(&c)
                })?);
            }
            Some(relative_error(&analytic, &numeric))
        }),
    ]
}

pub fn gradient_correctness() -> Outcome {
    let mut checks = primitive_gradients();
    checks.extend(network_gradients());
    let worst = checks.iter().map(|c| c.worst).fold(0.0, f64::max);
    let redrawn: usize = checks.iter().map(|c| c.redrawn).sum();
    let msg = format!(
        "{} components, max relative error {worst:.2e} (tol {FD_TOL:.0e}), {redrawn} kink redraws",
        checks.len()
    );
    let bad: Vec<String> = checks
        .iter()
        .filter(|c| !c.ok())
        .map(|c| c.to_string())
        .collect();
    if bad.is_empty() {
        Ok(msg)
    } else {
        Err(format!("{msg}: {}", bad.join(" ")))
    }
}

/// Returns the worst `(sum, permutation, rigid motion)` deviations.
pub fn signature_deviations(draws: usize) -> (f64, f64, f64) {
    let (mut sum_err, mut perm_err, mut rigid_err) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..draws as u64 {
        let mut r = rng(7000 + i);
        let layers = r.random_range(1..=3);
        let gcn = Gcn::new(
            GcnConfig {
                layers,
                ..GcnConfig::default()
            },
            &mut r,
        )
        .unwrap();
        let g = random_graph(&mut r, 30);
        let p = gcn.signature(&g).unwrap();
        let total: f64 = p.values().iter().sum();
        sum_err = sum_err.max((total - (layers * g.atom_count()) as f64).abs());

        let mut shuffled = g.clone();
        shuffled.atoms.shuffle(&mut r);
        perm_err = perm_err.max(max_abs_diff(
            p.values(),
            gcn.signature(&shuffled).unwrap().values(),
        ));
        let moved = rigid_motion(&g, &mut r);
        rigid_err = rigid_err.max(max_abs_diff(
            p.values(),
            gcn.signature(&moved).unwrap().values(),
        ));
    }
    (sum_err, perm_err, rigid_err)
}

pub fn signature_invariants() -> Outcome {
    let (s, p, m) = signature_deviations(100);
    let msg = format!("sum {s:.1e}, permutation {p:.1e}, rigid motion {m:.1e} (tol 1e-9)");
    if s < 1e-9 && p < 1e-9 && m < 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

pub fn edge_weight_at_unit_distance() -> f64 {
    let atom = |x: f64| Atom {
        element: 0,
        residue: 0,
        position: [x, 0.0, 0.0],
    };
    let g = ProteinSiteGraph::new("pair", vec![atom(0.0), atom(1.0)]).unwrap();
    let (a, _) = build_adjacency(&g);
    a.data()[1]
}

pub fn formula_units() -> Outcome {
    let checks = [
        ("g_h(-300)", latentopt::g_h(-300.0), -250.0),
        ("g_q(2.5)", latentopt::g_q(2.5), 1.0),
        ("g_q(0)", latentopt::g_q(0.0), 0.0),
        ("g_q(5)", latentopt::g_q(5.0), 0.0),
        ("W_tox(0)", tox_weight(0.0, 5.0).unwrap(), 1.0),
        ("W_tox(1)", tox_weight(1.0, 5.0).unwrap(), 5.0),
        ("e(d=1)", edge_weight_at_unit_distance(), 0.5),
    ];
    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-12)
        .map(|(n, got, want)| format!("{n}={got} want {want}"))
        .collect();
    if bad.is_empty() {
        Ok(format!("{} identities exact to 1e-12", checks.len()))
    } else {
        Err(bad.join(", "))
    }
}

/// Pair-counting AUROC: ties count one half.
pub fn brute_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

pub fn auroc_worst(instances: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..instances as u64 {
        let mut r = rng(8000 + i);
        let (np, nn) = (r.random_range(1..40), r.random_range(1..40));
        // Coarse rounding forces ties within and across classes.
        let draw = |r: &mut ChaCha8Rng, shift: f64| {
            ((r.sample::<f64, _>(StandardNormal) + shift) * 4.0).round()
        };
        let pos: Vec<f64> = (0..np).map(|_| draw(&mut r, 0.5)).collect();
        let neg: Vec<f64> = (0..nn).map(|_| draw(&mut r, 0.0)).collect();
        worst = worst.max((evalkit::auroc(&pos, &neg).unwrap() - brute_auroc(&pos, &neg)).abs());
    }
    worst
}

/// Spearman is unchanged, bit for bit, under strictly increasing maps.
pub fn spearman_monotone_exact(instances: usize) -> bool {
    (0..instances as u64).all(|i| {
        let mut r = rng(8500 + i);
        let n = r.random_range(3..60);
        let x: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let base = evalkit::spearman(&x, &y).unwrap();
        let fx: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let gy: Vec<f64> = y.iter().map(|v| v * v * v + 3.0 * v).collect();
        evalkit::spearman(&fx, &gy).unwrap() == base
    })
}

/// Monte Carlo `E‖C − C̃‖²` over prior samples `C̃`, against `‖C‖² + dim`.
pub fn chi_square_relative_error(samples: usize, dim: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let c: Vec<f64> = (0..dim)
        .map(|_| r.sample::<f64, _>(StandardNormal) * 1.5)
        .collect();
    let mut total = 0.0;
    for _ in 0..samples {
        total += c
            .iter()
            .map(|&ci| {
                let z: f64 = StandardNormal.sample(&mut r);
                (ci - z) * (ci - z)
            })
            .sum::<f64>();
    }
    let expected = c.iter().map(|v| v * v).sum::<f64>() + dim as f64;
    (total / samples as f64 - expected).abs() / expected
}

pub fn metric_oracles() -> Outcome {
    let auroc = auroc_worst(50);
    let spearman = spearman_monotone_exact(50);
    let chi = chi_square_relative_error(100_000, 56, 9);
    let msg = format!(
        "auroc gap {auroc:.1e}, spearman invariance {spearman}, chi-square error {:.3}%",
        chi * 100.0
    );
    if auroc <= 1e-12 && spearman && chi < 0.01 {
        Ok(msg)
    } else {
        Err(msg)
    }
}
