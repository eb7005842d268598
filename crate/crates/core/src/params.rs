//! Learnable parameter containers and initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Leading-diagonal weights, zero biases.
    Identity,
    /// Uniform in `±1/sqrt(d_in)`.
    Random,
}

impl std::str::FromStr for InitMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Self::Identity),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown init mode `{other}`")),
        }
    }
}

/// Deterministic source for parameter initialization.
pub struct Initializer {
    mode: InitMode,
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(mode: InitMode, seed: u64) -> Self {
        Self {
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> InitMode {
        self.mode
    }

    pub fn weight(&mut self, d_in: usize, d_out: usize) -> Tensor {
        match self.mode {
            InitMode::Identity => Tensor::eye(d_in, d_out),
            InitMode::Random => self.uniform(&[d_in, d_out], d_in),
        }
    }

    pub fn bias(&mut self, d_in: usize, d_out: usize) -> Tensor {
        match self.mode {
            InitMode::Identity => Tensor::zeros(&[d_out]),
            InitMode::Random => self.uniform(&[d_out], d_in),
        }
    }

    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = self.rng.random_range(-bound..=bound);
        }
        t
    }
}

/// Row-wise affine map `x W + b`, `W` of shape `d_in × d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(init: &mut Initializer, d_in: usize, d_out: usize, with_bias: bool) -> Self {
        let weight = init.weight(d_in, d_out);
        let bias = with_bias.then(|| init.bias(d_in, d_out));
        Self { weight, bias }
    }

    pub fn zeros(d_in: usize, d_out: usize, with_bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: with_bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLinear {
        self.bind_with(&mut |t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Binds through `put`, called on the weight and then the bias.
    pub fn bind_with(&self, put: &mut dyn FnMut(&Tensor) -> Var) -> BoundLinear {
        BoundLinear {
            weight: put(&self.weight),
            bias: self.bias.as_ref().map(&mut *put),
        }
    }
}

/// A [`Linear`] placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl BoundLinear {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }

    pub fn leaves(&self) -> Vec<Var> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Visitor over named parameter tensors, in a fixed order.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

impl Linear {
    pub(crate) fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }

    pub(crate) fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }
}
