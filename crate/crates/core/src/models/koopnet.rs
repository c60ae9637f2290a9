use rand::Rng;

use super::cgkn::{layer_dims, CgknSpec};
use super::{BoundCg, CgModel, CoefSeries, Coefs, Dims, ModelKind};
use crate::diffcore::{Gradients, Matrix, MlpParams, MlpVars, Tape, Var};
use crate::error::{Error, Result};

/// CGKN with a latent drift `F2 + G2 v` that ignores the observed state.
#[derive(Clone, Debug, PartialEq)]
pub struct KoopNetModel {
    pub dims: Dims,
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    /// Maps `u1` to `[f1 | g1]`.
    pub eta: MlpParams,
    pub f2: Vec<f64>,
    pub g2: Matrix,
    pub sigma1: Vec<f64>,
    pub sigma2: f64,
}

impl KoopNetModel {
    /// Same widths as the CGKN spec; the coefficient network only emits the
    /// observed part. `F2` and `G2` start at zero.
    pub fn new(spec: &CgknSpec, rng: &mut impl Rng) -> Result<Self> {
        let Dims { d_u1, d_u2, d_v } = spec.dims;
        if d_u1 == 0 || d_u2 == 0 || d_v == 0 {
            return Err(Error::Config(format!("invalid dimensions {:?}", spec.dims)));
        }
        Ok(Self {
            dims: spec.dims,
            encoder: MlpParams::init(&layer_dims(d_u2, &spec.encoder_hidden, d_v), rng)?,
            decoder: MlpParams::init(&layer_dims(d_v, &spec.decoder_hidden, d_u2), rng)?,
            eta: MlpParams::init(&layer_dims(d_u1, &spec.eta_hidden, d_u1 * (1 + d_v)), rng)?,
            f2: vec![0.0; d_v],
            g2: Matrix::zeros(d_v, d_v),
            sigma1: vec![1.0; d_u1],
            sigma2: spec.sigma2,
        })
    }

    pub fn from_parts(
        encoder: MlpParams,
        decoder: MlpParams,
        eta: MlpParams,
        f2: Vec<f64>,
        g2: Matrix,
        sigma1: Vec<f64>,
        sigma2: f64,
    ) -> Result<Self> {
        let dims = Dims {
            d_u1: eta.input_dim(),
            d_u2: encoder.input_dim(),
            d_v: encoder.output_dim(),
        };
        if eta.output_dim() != dims.d_u1 * (1 + dims.d_v) {
            return Err(Error::dim(
                "coefficient network output",
                dims.d_u1 * (1 + dims.d_v),
                eta.output_dim(),
            ));
        }
        if decoder.input_dim() != dims.d_v || decoder.output_dim() != dims.d_u2 {
            return Err(Error::dim("decoder shape", dims.d_v, decoder.input_dim()));
        }
        if f2.len() != dims.d_v || g2.shape() != (dims.d_v, dims.d_v) {
            return Err(Error::dim("latent drift", dims.d_v, f2.len()));
        }
        if sigma1.len() != dims.d_u1 {
            return Err(Error::dim("sigma1 length", dims.d_u1, sigma1.len()));
        }
        Ok(Self {
            dims,
            encoder,
            decoder,
            eta,
            f2,
            g2,
            sigma1,
            sigma2,
        })
    }
}

struct Bound {
    dims: Dims,
    encoder: MlpVars,
    decoder: MlpVars,
    eta: MlpVars,
    f2: Var,
    g2: Var,
}

impl CgModel for KoopNetModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Koopnet
    }

    fn dims(&self) -> Dims {
        self.dims
    }

    fn sigma1(&self) -> &[f64] {
        &self.sigma1
    }

    fn set_sigma1(&mut self, sigma1: Vec<f64>) {
        self.sigma1 = sigma1;
    }

    fn sigma2(&self) -> Vec<f64> {
        vec![self.sigma2; self.dims.d_v]
    }

    fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> Box<dyn BoundCg + 'a> {
        let b = |p: &MlpParams, t: &mut Tape| {
            if trainable {
                p.bind(t)
            } else {
                p.bind_frozen(t)
            }
        };
        let encoder = b(&self.encoder, tape);
        let decoder = b(&self.decoder, tape);
        let eta = b(&self.eta, tape);
        let (f2, g2) = (Matrix::row_vector(&self.f2), self.g2.clone());
        let (f2, g2) = if trainable {
            (tape.leaf(f2), tape.leaf(g2))
        } else {
            (tape.constant(f2), tape.constant(g2))
        };
        Box::new(Bound {
            dims: self.dims,
            encoder,
            decoder,
            eta,
            f2,
            g2,
        })
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.decoder.tensors_mut());
        t.extend(self.eta.tensors_mut());
        t.push(self.f2.as_mut_slice());
        t.push(self.g2.data_mut());
        t
    }
}

impl BoundCg for Bound {
    fn encode(&self, tape: &mut Tape, u2: Var) -> Var {
        self.encoder.forward(tape, u2)
    }

    fn decode(&self, tape: &mut Tape, v: Var) -> Var {
        self.decoder.forward(tape, v)
    }

    fn coefficients(&self, tape: &mut Tape, u1: Var) -> CoefSeries {
        let Dims { d_u1, d_v, .. } = self.dims;
        let rows = tape.shape(u1).0;
        let out = self.eta.forward(tape, u1);
        let f1 = tape.slice_cols(out, 0, d_u1);
        let g1 = tape.slice_cols(out, d_u1, d_u1 * d_v);
        CoefSeries {
            coefs: Coefs::Autonomous {
                f1,
                g1,
                f2: self.f2,
                g2: self.g2,
            },
            rows,
            dims: self.dims,
        }
    }

    fn gradients(&self, grads: &Gradients) -> Result<Vec<Vec<f64>>> {
        let mut g = self.encoder.gradients(grads, "encoder")?;
        g.extend(self.decoder.gradients(grads, "decoder")?);
        g.extend(self.eta.gradients(grads, "coefficient network")?);
        for (name, v) in [("F2", self.f2), ("G2", self.g2)] {
            let gv = grads.wrt(v).into_data();
            if gv.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {name}")));
            }
            g.push(gv);
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::cg_dynamics;
    use crate::models::test_support::{affinity_defect, dynamics_match_drift, random_matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> KoopNetModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = KoopNetModel::new(&CgknSpec::psbse(1, 2, 10), &mut rng).unwrap();
        m.f2 = random_matrix(1, 10, 0.5, seed + 1).into_data();
        m.g2 = random_matrix(10, 10, 0.5, seed + 2);
        m
    }

    #[test]
    fn latent_coefficients_ignore_observations() {
        let m = model(0);
        let a = cg_dynamics(&m, &[-2.0]).unwrap();
        let b = cg_dynamics(&m, &[3.5]).unwrap();
        assert_eq!(a.f2, b.f2);
        assert_eq!(a.g2, b.g2);
        assert_eq!(a.g2, m.g2);
        assert_ne!(a.f1, b.f1);
    }

    #[test]
    fn drift_is_affine_and_consistent() {
        assert!(affinity_defect(&model(1), 3, 100) < 1e-10);
        dynamics_match_drift(&model(2), 9);
    }
}
