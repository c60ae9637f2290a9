use rand::Rng;

use super::cgkn::layer_dims;
use crate::diffcore::{Gradients, MlpParams, MlpVars, Tape};
use crate::error::{Error, Result};

/// Black-box drift `du/dt = NN(u)` on the full state.
#[derive(Clone, Debug, PartialEq)]
pub struct DnnModel {
    pub net: MlpParams,
    pub sigma: Vec<f64>,
}

impl DnnModel {
    pub fn new(dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            net: MlpParams::init(&layer_dims(dim, hidden, dim), rng)?,
            sigma: vec![0.0; dim],
        })
    }

    pub fn from_parts(net: MlpParams, sigma: Vec<f64>) -> Result<Self> {
        if net.input_dim() != net.output_dim() {
            return Err(Error::dim(
                "network output",
                net.input_dim(),
                net.output_dim(),
            ));
        }
        if sigma.len() != net.input_dim() {
            return Err(Error::dim("sigma length", net.input_dim(), sigma.len()));
        }
        Ok(Self { net, sigma })
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        if trainable {
            self.net.bind(tape)
        } else {
            self.net.bind_frozen(tape)
        }
    }

    pub fn gradients(vars: &MlpVars, grads: &Gradients) -> Result<Vec<Vec<f64>>> {
        vars.gradients(grads, "drift network")
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.tensors_mut()
    }
}
