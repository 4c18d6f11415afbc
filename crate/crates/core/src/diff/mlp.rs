use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Affine map `x W + b` (W is `in × out`) followed by an activation.
#[derive(Clone, Debug)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Layer {
    /// Glorot-uniform weights multiplied by `gain`, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        activation: Activation,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = gain * (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.random_range(-1.0..=1.0) * bound).collect();
        let weight = store.add(format!("{name}.weight"), Tensor::matrix(in_dim, out_dim, w).expect("dims"), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]), false));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, params[self.weight])?;
        let h = match self.bias {
            Some(b) => tape.add(h, params[b])?,
            None => h,
        };
        Ok(self.activation.apply(tape, h))
    }
}

/// Stack of [`Layer`]s.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; hidden layers use `hidden`, the last
    /// layer `output` with its initial weights scaled by `out_gain`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        out_gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let (act, gain) = if i == last { (output, out_gain) } else { (hidden, 1.0) };
                Layer::new(store, &format!("{name}.{i}"), d[0], d[1], true, act, gain, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}

/// Runs `x` (`N × in`) through the stack, recording on `tape`.
pub fn mlp_forward(tape: &mut Tape, params: &Bound, mlp: &Mlp, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape();
    if shape.len() != 2 || shape[1] != mlp.in_dim() {
        return Err(Error::shape(
            "mlp_forward",
            format!("input {:?} does not match MLP input width {}", shape, mlp.in_dim()),
        ));
    }
    for w in mlp.layers.windows(2) {
        if w[0].out_dim != w[1].in_dim {
            return Err(Error::shape("mlp_forward", format!("layer dims {} -> {} do not chain", w[0].out_dim, w[1].in_dim)));
        }
    }
    mlp.layers.iter().try_fold(x, |h, layer| layer.forward(tape, params, h))
}
