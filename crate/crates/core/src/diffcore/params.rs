use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of an entry within a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// ADAM hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Classic L2 decay: `λ·θ` is added to the gradient before moment updates.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
    m: Tensor,
    v: Tensor,
}

/// Named parameter tensors with their ADAM moments.
///
/// Non-trainable entries (batchnorm running statistics) live alongside the
/// weights so they checkpoint together, but ADAM never touches them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
    step: u64,
}

/// Tape handles for every entry of a [`ParamSet`], in entry order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// One gradient per entry, zero for untracked ones.
    pub fn collect(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

/// Glorot-uniform initialisation over `±sqrt(6/(fan_in+fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    fn push(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
            m,
            v,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// ADAM steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Replaces values by name, requiring the same names and shapes.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::Data(format!(
                "expected {} parameters, found {}",
                self.entries.len(),
                values.len()
            )));
        }
        for (entry, (name, value)) in self.entries.iter_mut().zip(values) {
            if entry.name != name {
                return Err(Error::Data(format!(
                    "expected parameter {}, found {name}",
                    entry.name
                )));
            }
            if entry.value.shape() != value.shape() {
                return Err(Error::dim(
                    "load_values",
                    entry.value.shape(),
                    value.shape(),
                ));
            }
            entry.value = value;
        }
        Ok(())
    }

    /// Places every entry on the tape. Trainable entries are tracked when
    /// `track` is set; buffers are always constants.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), track && e.trainable))
            .collect();
        Bound { vars }
    }

    /// Clears ADAM moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for e in &mut self.entries {
            e.m = Tensor::zeros(e.value.shape());
            e.v = Tensor::zeros(e.value.shape());
        }
    }

    /// One bias-corrected ADAM update of every trainable entry.
    ///
    /// `grads` holds one tensor per entry in entry order.
    pub fn adam_step(&mut self, grads: &[Tensor], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.entries.len() {
            return Err(Error::dim(
                "adam_step",
                &[self.entries.len()],
                &[grads.len()],
            ));
        }
        for (e, g) in self.entries.iter().zip(grads) {
            if e.value.shape() != g.shape() {
                return Err(Error::dim("adam_step", e.value.shape(), g.shape()));
            }
            if e.trainable && !g.is_finite() {
                return Err(Error::Numeric {
                    what: format!("gradient of {}", e.name),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (e, g) in self.entries.iter_mut().zip(grads) {
            if !e.trainable {
                continue;
            }
            let theta = e.value.data_mut();
            let m = e.m.data_mut();
            let v = e.v.data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i] + cfg.weight_decay * theta[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
