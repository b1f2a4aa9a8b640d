use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{ParamId, ParamSet, Tape, Var};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// Fully connected stack. `layer_widths[0]` is the input width; every later
/// entry is the output width of one linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Inverted dropout after every hidden activation, training only.
    #[serde(default)]
    pub dropout_rate: f64,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, seed: u64) -> Self {
        Self {
            layer_widths,
            activation: Activation::Relu,
            dropout_rate: 0.0,
            seed,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidValue("an MLP needs at least one layer".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidValue("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidValue(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        self.layer_widths[self.layer_widths.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

/// Forward-pass mode. Training carries the dropout RNG.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train(rng) => Mode::Train(rng),
        }
    }
}

/// Output of an MLP forward pass.
#[derive(Clone, Copy, Debug)]
pub struct MlpTrace {
    /// Final linear layer output (no activation).
    pub output: Var,
    /// Input to the final layer: the last hidden activation (after dropout),
    /// or the network input for a single-layer MLP.
    pub penultimate: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<(ParamId, ParamId)>,
}

fn layer_names(prefix: &str, i: usize) -> (String, String) {
    (format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias"))
}

impl Mlp {
    /// Registers freshly initialised parameters under `prefix`. Weights are
    /// He-uniform, `U(-√(6/fan_in), √(6/fan_in))`, biases zero. Each layer
    /// draws from its own stream keyed by `(seed, prefix, index)`, so layers
    /// with the same name and shape initialise identically across models.
    pub fn new(spec: MlpSpec, params: &mut ParamSet, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.num_layers());
        for (i, w) in spec.layer_widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let (wn, bn) = layer_names(prefix, i);
            let mut rng = ChaCha8Rng::seed_from_u64(super::derive_seed(spec.seed, &wn));
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let wid = params.add(wn, Tensor2::from_vec(fan_in, fan_out, data)?);
            let bid = params.add(bn, Tensor2::zeros(1, fan_out));
            layers.push((wid, bid));
        }
        Ok(Self { spec, layers })
    }

    /// Binds to parameters that already exist in `params` (e.g. loaded from a
    /// checkpoint), checking their shapes.
    pub fn attach(spec: MlpSpec, params: &ParamSet, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.num_layers());
        for (i, w) in spec.layer_widths.windows(2).enumerate() {
            let (wn, bn) = layer_names(prefix, i);
            let find = |n: &str| {
                params
                    .find(n)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")))
            };
            let (wid, bid) = (find(&wn)?, find(&bn)?);
            if params.get(wid).shape() != (w[0], w[1]) || params.get(bid).shape() != (1, w[1]) {
                return Err(Error::Checkpoint(format!("parameter {wn} has the wrong shape")));
            }
            layers.push((wid, bid));
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// `(weight, bias)` ids of layer `i`.
    pub fn layer(&self, i: usize) -> (ParamId, ParamId) {
        self.layers[i]
    }

    pub fn num_params(&self, params: &ParamSet) -> usize {
        self.layers
            .iter()
            .map(|&(w, b)| params.get(w).data().len() + params.get(b).data().len())
            .sum()
    }

    /// Zeroes every weight and bias.
    pub fn zero(&self, params: &mut ParamSet) {
        for &(w, b) in &self.layers {
            params.get_mut(w).fill(0.0);
            params.get_mut(b).fill(0.0);
        }
    }

    /// Multiplies the weights of layer `i` by `k`.
    pub fn scale_layer(&self, params: &mut ParamSet, i: usize, k: f64) {
        params.get_mut(self.layers[i].0).scale(k);
    }

    pub fn forward(&self, tape: &mut Tape<'_>, input: Var, mut mode: Mode<'_>) -> Result<MlpTrace> {
        let cols = tape.value(input).cols();
        if cols != self.spec.input_width() {
            return Err(Error::ShapeMismatch(format!(
                "MLP expects width {}, got {cols}",
                self.spec.input_width()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = input;
        let mut penultimate = input;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(w);
            let bv = tape.param(b);
            let z = tape.matmul(h, wv)?;
            let z = tape.add_row(z, bv)?;
            if i == last {
                return Ok(MlpTrace {
                    output: z,
                    penultimate,
                });
            }
            let mut a = match self.spec.activation {
                Activation::Relu => tape.relu(z),
                Activation::Tanh => tape.tanh(z),
            };
            if let Mode::Train(rng) = &mut mode {
                let p = self.spec.dropout_rate;
                if p > 0.0 {
                    let keep = 1.0 / (1.0 - p);
                    let n = tape.value(a).data().len();
                    let mask = (0..n)
                        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                        .collect();
                    a = tape.dropout_mask(a, mask)?;
                }
            }
            penultimate = a;
            h = a;
        }
        unreachable!("validated MLP has at least one layer")
    }

    /// Eval-mode forward pass returning only the output values.
    pub fn infer(&self, params: &ParamSet, input: Tensor2) -> Result<Tensor2> {
        let mut tape = Tape::new(params);
        let x = tape.input(input);
        let trace = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(trace.output).clone())
    }
}
