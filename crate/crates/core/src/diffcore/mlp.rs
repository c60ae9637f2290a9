use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// ReLU on hidden layers, identity on the output layer.
    Relu,
}

/// Fully connected network. `weights[k]` maps layer `k` to layer `k + 1`
/// and has shape `layer_dims[k + 1] x layer_dims[k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRecord", into = "MlpRecord")]
pub struct MlpParams {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
}

/// On-disk form: flat row-major weight arrays.
#[derive(Serialize, Deserialize)]
struct MlpRecord {
    layer_dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
}

impl From<MlpParams> for MlpRecord {
    fn from(p: MlpParams) -> Self {
        MlpRecord {
            layer_dims: p.layer_dims,
            weights: p.weights.into_iter().map(Matrix::into_data).collect(),
            biases: p.biases,
            activation: p.activation,
        }
    }
}

impl TryFrom<MlpRecord> for MlpParams {
    type Error = Error;

    fn try_from(r: MlpRecord) -> Result<Self> {
        let n = r.layer_dims.len();
        if n < 2 || r.weights.len() != n - 1 || r.biases.len() != n - 1 {
            return Err(Error::Config(format!(
                "network with {} layer sizes needs {} weight and bias arrays",
                n,
                n.saturating_sub(1)
            )));
        }
        let weights = r
            .weights
            .into_iter()
            .enumerate()
            .map(|(k, w)| Matrix::new(r.layer_dims[k + 1], r.layer_dims[k], w))
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(weights, r.biases)
    }
}

impl MlpParams {
    /// Uniform initialization in `±sqrt(1 / fan_in)` for weights and biases.
    pub fn init(layer_dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {layer_dims:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (1.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            weights.push(Matrix::new(fan_out, fan_in, data)?);
            biases.push(
                (0..fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect(),
            );
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation: Activation::Relu,
        })
    }

    pub fn zeros(layer_dims: &[usize]) -> Self {
        let weights = layer_dims
            .windows(2)
            .map(|w| Matrix::zeros(w[1], w[0]))
            .collect();
        let biases = layer_dims[1..].iter().map(|&n| vec![0.0; n]).collect();
        Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation: Activation::Relu,
        }
    }

    pub fn from_layers(weights: Vec<Matrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Config("weights and biases must pair up".into()));
        }
        let mut layer_dims = vec![weights[0].cols()];
        for (k, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.cols() != layer_dims[k] {
                return Err(Error::dim("layer input width", layer_dims[k], w.cols()));
            }
            if b.len() != w.rows() {
                return Err(Error::dim("bias length", w.rows(), b.len()));
            }
            layer_dims.push(w.rows());
        }
        Ok(Self {
            layer_dims,
            weights,
            biases,
            activation: Activation::Relu,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least two layers")
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Matrix::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), input.len()));
        }
        let out = self.forward_batch(&Matrix::row_vector(input))?;
        Ok(out.into_data())
    }

    /// Row-wise forward pass over a `batch x input_dim` matrix.
    pub fn forward_batch(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), input.cols()));
        }
        let last = self.weights.len() - 1;
        let mut h = input.clone();
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.matmul_bt(w);
            for r in 0..z.rows() {
                for (v, &bi) in z.row_mut(r).iter_mut().zip(b) {
                    *v += bi;
                    if k < last && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            h = z;
        }
        if !h.is_finite() {
            return Err(Error::Numeric(
                "network produced a non-finite output".into(),
            ));
        }
        Ok(h)
    }

    /// Registers every weight and bias as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        let weights = self.weights.iter().map(|w| tape.leaf(w.clone())).collect();
        let biases = self
            .biases
            .iter()
            .map(|b| tape.leaf(Matrix::row_vector(b)))
            .collect();
        MlpVars { weights, biases }
    }

    /// Registers the network as fixed data (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> MlpVars {
        let weights = self
            .weights
            .iter()
            .map(|w| tape.constant(w.clone()))
            .collect();
        let biases = self
            .biases
            .iter()
            .map(|b| tape.constant(Matrix::row_vector(b)))
            .collect();
        MlpVars { weights, biases }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.data());
            out.push(b.as_slice());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.data_mut());
            out.push(b.as_mut_slice());
        }
        out
    }
}

/// Tape handles for one network's parameters.
#[derive(Clone, Debug)]
pub struct MlpVars {
    weights: Vec<Var>,
    biases: Vec<Var>,
}

impl MlpVars {
    /// `batch x in` to `batch x out`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let last = self.weights.len() - 1;
        let mut h = x;
        for (k, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = tape.matmul_bt(h, w);
            let z = tape.add_row(z, b);
            h = if k < last { tape.relu(z) } else { z };
        }
        h
    }

    /// Handles in the same order as [`MlpParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(&w, &b)| [w, b])
            .collect()
    }

    /// Flat gradient arrays congruent to [`MlpParams::tensors`].
    pub fn gradients(&self, grads: &Gradients, name: &str) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (layer, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            for (kind, v) in [("weight", w), ("bias", b)] {
                let g = grads.wrt(v).into_data();
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in {name} layer {layer} {kind}"
                    )));
                }
                out.push(g);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = MlpParams::zeros(&[3, 5, 2]);
        assert_eq!(net.forward(&[1.0, -4.0, 2.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_identity_layer() {
        let net = MlpParams::from_layers(vec![Matrix::identity(2)], vec![vec![0.0; 2]]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0]).unwrap(), vec![1.0, -2.0]);
    }

    #[test]
    fn matches_manual_matrix_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = MlpParams::init(&[3, 4, 2], &mut rng).unwrap();
        let x = [0.3, -1.2, 0.8];
        let (w0, w1) = (&net.weights()[0], &net.weights()[1]);
        let (b0, b1) = (&net.biases()[0], &net.biases()[1]);
        let mut h = [0.0; 4];
        for i in 0..4 {
            let mut s = b0[i];
            for j in 0..3 {
                s += w0[(i, j)] * x[j];
            }
            h[i] = s.max(0.0);
        }
        let mut expect = [0.0; 2];
        for i in 0..2 {
            let mut s = b1[i];
            for j in 0..4 {
                s += w1[(i, j)] * h[j];
            }
            expect[i] = s;
        }
        let got = net.forward(&x).unwrap();
        for (g, e) in got.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn input_width_is_checked() {
        let net = MlpParams::zeros(&[2, 2]);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn init_respects_bounds_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = MlpParams::init(&[4, 16, 3], &mut rng).unwrap();
        assert_eq!(net.weights()[0].shape(), (16, 4));
        assert_eq!(net.weights()[1].shape(), (3, 16));
        assert!(net.weights()[0].max_abs() <= 0.5);
        assert!(net.weights()[1].max_abs() <= 0.25);
        assert_eq!(net.num_params(), 4 * 16 + 16 + 16 * 3 + 3);
    }
}
