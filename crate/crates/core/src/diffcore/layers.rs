//! Layer building blocks shared by every network in the crate.

use rand::{Rng, RngCore};

use super::params::{glorot_uniform, Bound, ParamId, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Whether a forward pass is for training (stochastic) or inference.
pub enum Phase<'a> {
    Train(&'a mut dyn RngCore),
    Infer,
}

impl Phase<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Phase::Train(_))
    }
}

pub fn check_dropout(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    Ok(())
}

/// Inverted dropout: identity at inference, scaled survivors in training.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, phase: &mut Phase<'_>) -> Result<Var> {
    check_dropout(p)?;
    let rng = match phase {
        Phase::Train(rng) if p > 0.0 => rng,
        _ => return Ok(x),
    };
    let keep = 1.0 / (1.0 - p);
    let mask = (0..tape.value(x).len())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    tape.mask(x, mask)
}

/// Fully connected layer `y = xW + b`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let w = params.add(
            &format!("{name}.weight"),
            glorot_uniform(inputs, outputs, rng),
        );
        let b = params.add(&format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Dense {
            w,
            b,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.dense(x, bound.var(self.w), bound.var(self.b))
    }
}

/// Batch statistics from a training pass, to be folded into running stats.
#[derive(Debug, Clone)]
pub struct RunningUpdate {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-feature batch normalisation with learned scale and shift.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub width: usize,
}

impl BatchNorm {
    pub fn new(params: &mut ParamSet, name: &str, width: usize) -> Self {
        BatchNorm {
            scale: params.add(&format!("{name}.scale"), Tensor::full(&[width], 1.0)),
            shift: params.add(&format!("{name}.shift"), Tensor::zeros(&[width])),
            running_mean: params
                .add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[width])),
            running_var: params
                .add_buffer(&format!("{name}.running_var"), Tensor::full(&[width], 1.0)),
            width,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        bound: &Bound,
        x: Var,
        train: bool,
    ) -> Result<(Var, Option<RunningUpdate>)> {
        let cols = tape.value(x).cols();
        if cols != self.width {
            return Err(Error::dim(
                "batchnorm",
                &[self.width],
                tape.value(x).shape(),
            ));
        }
        let (normed, update) = if train {
            let (y, mean, var) = tape.batch_normalize(x, BATCHNORM_EPS)?;
            (y, Some(RunningUpdate { mean, var }))
        } else {
            let mean = params.get(self.running_mean).map(|m| -m);
            let inv = params
                .get(self.running_var)
                .map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt());
            let neg_mean = tape.constant(mean);
            let inv = tape.constant(inv);
            let centred = tape.add_bias(x, neg_mean)?;
            (tape.mul_cols(centred, inv)?, None)
        };
        let scaled = tape.mul_cols(normed, bound.var(self.scale))?;
        let out = tape.add_bias(scaled, bound.var(self.shift))?;
        Ok((out, update))
    }

    pub fn apply_update(&self, params: &mut ParamSet, update: &RunningUpdate) {
        let blend = |running: &mut Tensor, batch: &[f64]| {
            for (r, &b) in running.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BATCHNORM_MOMENTUM) * *r + BATCHNORM_MOMENTUM * b;
            }
        };
        blend(params.get_mut(self.running_mean), &update.mean);
        blend(params.get_mut(self.running_var), &update.var);
    }
}

/// Stack of dense layers with ReLU and dropout between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub dropout: f64,
}

impl Mlp {
    /// `widths` lists input, hidden and output widths in order.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        widths: &[usize],
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_dropout(dropout)?;
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(params, &format!("{prefix}{i}"), w[0], w[1], rng))
            .collect();
        Ok(Mlp { layers, dropout })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    /// Raw (pre-activation) output of the last layer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        phase: &mut Phase<'_>,
    ) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h)?;
            if i < last {
                h = tape.relu(h);
                h = dropout(tape, h, self.dropout, phase)?;
            }
        }
        Ok(h)
    }
}
