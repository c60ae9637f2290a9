use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BoundCg, CgModel, CoefSeries, Coefs, Dims, ModelKind};
use crate::diffcore::{Gradients, MlpParams, MlpVars, Tape, Var};
use crate::error::{Error, Result};

/// Architecture of a generic CGKN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgknSpec {
    pub dims: Dims,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub eta_hidden: Vec<usize>,
    /// Latent noise amplitude `c`, applied as `c * I`.
    pub sigma2: f64,
}

impl CgknSpec {
    /// Five-layer networks sized for the three-variable Burgers–Sivashinsky
    /// projection with one observed variable.
    pub fn psbse(d_u1: usize, d_u2: usize, d_v: usize) -> Self {
        Self {
            dims: Dims { d_u1, d_u2, d_v },
            encoder_hidden: vec![64, 64, 64],
            decoder_hidden: vec![64, 64, 64],
            eta_hidden: vec![32, 32, 32],
            sigma2: 1.0,
        }
    }
}

pub(crate) fn layer_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgknModel {
    pub dims: Dims,
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub eta: MlpParams,
    pub sigma1: Vec<f64>,
    pub sigma2: f64,
}

impl CgknModel {
    pub fn new(spec: &CgknSpec, rng: &mut impl Rng) -> Result<Self> {
        let Dims { d_u1, d_u2, d_v } = spec.dims;
        if d_u1 == 0 || d_u2 == 0 || d_v == 0 {
            return Err(Error::Config(format!("invalid dimensions {:?}", spec.dims)));
        }
        Ok(Self {
            dims: spec.dims,
            encoder: MlpParams::init(&layer_dims(d_u2, &spec.encoder_hidden, d_v), rng)?,
            decoder: MlpParams::init(&layer_dims(d_v, &spec.decoder_hidden, d_u2), rng)?,
            eta: MlpParams::init(
                &layer_dims(d_u1, &spec.eta_hidden, spec.dims.coef_len()),
                rng,
            )?,
            sigma1: vec![1.0; d_u1],
            sigma2: spec.sigma2,
        })
    }

    pub fn from_parts(
        encoder: MlpParams,
        decoder: MlpParams,
        eta: MlpParams,
        sigma1: Vec<f64>,
        sigma2: f64,
    ) -> Result<Self> {
        let d_u2 = encoder.input_dim();
        let d_v = encoder.output_dim();
        let d_u1 = eta.input_dim();
        let dims = Dims { d_u1, d_u2, d_v };
        if decoder.input_dim() != d_v || decoder.output_dim() != d_u2 {
            return Err(Error::dim("decoder shape", d_v, decoder.input_dim()));
        }
        if eta.output_dim() != dims.coef_len() {
            return Err(Error::dim(
                "coefficient network output",
                dims.coef_len(),
                eta.output_dim(),
            ));
        }
        if sigma1.len() != d_u1 {
            return Err(Error::dim("sigma1 length", d_u1, sigma1.len()));
        }
        Ok(Self {
            dims,
            encoder,
            decoder,
            eta,
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
}

impl CgModel for CgknModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Cgkn
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
        Box::new(Bound {
            dims: self.dims,
            encoder: b(&self.encoder, tape),
            decoder: b(&self.decoder, tape),
            eta: b(&self.eta, tape),
        })
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.decoder.tensors_mut());
        t.extend(self.eta.tensors_mut());
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
        let mut at = 0;
        let mut take = |tape: &mut Tape, n: usize| {
            let v = tape.slice_cols(out, at, n);
            at += n;
            v
        };
        let f1 = take(tape, d_u1);
        let g1 = take(tape, d_u1 * d_v);
        let f2 = take(tape, d_v);
        let g2 = take(tape, d_v * d_v);
        CoefSeries {
            coefs: Coefs::Dense { f1, g1, f2, g2 },
            rows,
            dims: self.dims,
        }
    }

    fn gradients(&self, grads: &Gradients) -> Result<Vec<Vec<f64>>> {
        let mut g = self.encoder.gradients(grads, "encoder")?;
        g.extend(self.decoder.gradients(grads, "decoder")?);
        g.extend(self.eta.gradients(grads, "coefficient network")?);
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Matrix;
    use crate::models::test_support::{affinity_defect, dynamics_match_drift};
    use crate::models::{cg_dynamics, decode, encode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> CgknModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CgknModel::new(&CgknSpec::psbse(1, 2, 10), &mut rng).unwrap()
    }

    #[test]
    fn psbse_coefficient_width() {
        let m = model(0);
        assert_eq!(m.eta.output_dim(), 121);
        let d = cg_dynamics(&m, &[0.3]).unwrap();
        assert_eq!(d.f1.len(), 1);
        assert_eq!(d.g1.shape(), (1, 10));
        assert_eq!(d.f2.len(), 10);
        assert_eq!(d.g2.shape(), (10, 10));
        let raw = m.eta.forward(&[0.3]).unwrap();
        assert_eq!(d.f1[0], raw[0]);
        assert_eq!(d.g1.data(), &raw[1..11]);
        assert_eq!(d.f2, raw[11..21].to_vec());
        assert_eq!(d.g2.data(), &raw[21..121]);
    }

    #[test]
    fn parameter_counts_near_reference() {
        let m = model(0);
        for (n, target) in [
            (m.encoder.num_params(), 8778.0),
            (m.decoder.num_params(), 8770.0),
            (m.eta.num_params(), 5785.0),
        ] {
            let rel = (n as f64 - target).abs() / target;
            assert!(rel < 0.2, "{n} vs {target}");
        }
    }

    #[test]
    fn zero_coefficient_network_gives_bias_dynamics() {
        let mut m = model(1);
        m.eta = MlpParams::zeros(m.eta.layer_dims());
        let d = cg_dynamics(&m, &[2.0]).unwrap();
        assert!(d.f1.iter().chain(&d.f2).all(|&x| x == 0.0));
        assert_eq!(d.g2.max_abs(), 0.0);
    }

    #[test]
    fn latent_drift_is_affine() {
        assert!(affinity_defect(&model(2), 11, 100) < 1e-10);
        dynamics_match_drift(&model(3), 5);
    }

    #[test]
    fn untrained_roundtrip_shapes() {
        let m = model(4);
        let v = encode(&m, &Matrix::zeros(1, 2)).unwrap();
        let back = decode(&m, &v).unwrap();
        assert_eq!(back.shape(), (1, 2));
        assert!(back.is_finite());
    }

    #[test]
    fn identity_autoencoder_roundtrips_exactly() {
        let id = || MlpParams::from_layers(vec![Matrix::identity(2)], vec![vec![0.0; 2]]).unwrap();
        let eta = MlpParams::zeros(&[
            1,
            4,
            Dims {
                d_u1: 1,
                d_u2: 2,
                d_v: 2,
            }
            .coef_len(),
        ]);
        let m = CgknModel::from_parts(id(), id(), eta, vec![1.0], 1.0).unwrap();
        let u2 = Matrix::from_rows(&[vec![0.5, -3.0], vec![1.25, 7.0]]).unwrap();
        assert_eq!(decode(&m, &encode(&m, &u2).unwrap()).unwrap(), u2);
    }

    #[test]
    fn wrong_width_is_rejected() {
        let m = model(5);
        assert!(matches!(
            encode(&m, &Matrix::zeros(1, 3)),
            Err(Error::Dimension { .. })
        ));
    }
}
