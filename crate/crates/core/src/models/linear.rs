use super::{BoundCg, CgDynamics, CgModel, CoefSeries, Coefs, Dims, ModelKind};
use crate::diffcore::{Gradients, Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Conditional-Gaussian system with constant coefficients and the identity
/// as encoder and decoder: `du1 = (f1 + g1 u2) dt + s1 dW1`,
/// `du2 = (f2 + g2 u2) dt + s2 dW2`. Serves as a reference for the filters.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCgModel {
    pub dynamics: CgDynamics,
    pub sigma1: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl LinearCgModel {
    pub fn new(dynamics: CgDynamics, sigma1: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        let d1 = dynamics.f1.len();
        let dv = dynamics.f2.len();
        if dynamics.g1.shape() != (d1, dv) {
            return Err(Error::dim("g1 columns", dv, dynamics.g1.cols()));
        }
        if dynamics.g2.shape() != (dv, dv) {
            return Err(Error::dim("g2 shape", dv, dynamics.g2.rows()));
        }
        if sigma1.len() != d1 || sigma2.len() != dv {
            return Err(Error::dim("noise length", d1, sigma1.len()));
        }
        Ok(Self {
            dynamics,
            sigma1,
            sigma2,
        })
    }

    /// Scalar observed and scalar hidden variable.
    pub fn scalar(f1: f64, g1: f64, f2: f64, g2: f64, sigma1: f64, sigma2: f64) -> Self {
        Self {
            dynamics: CgDynamics {
                f1: vec![f1],
                g1: Matrix::filled(1, 1, g1),
                f2: vec![f2],
                g2: Matrix::filled(1, 1, g2),
            },
            sigma1: vec![sigma1],
            sigma2: vec![sigma2],
        }
    }
}

struct Bound<'a> {
    model: &'a LinearCgModel,
}

impl CgModel for LinearCgModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Linear
    }

    fn dims(&self) -> Dims {
        Dims {
            d_u1: self.dynamics.f1.len(),
            d_u2: self.dynamics.f2.len(),
            d_v: self.dynamics.f2.len(),
        }
    }

    fn sigma1(&self) -> &[f64] {
        &self.sigma1
    }

    fn set_sigma1(&mut self, sigma1: Vec<f64>) {
        self.sigma1 = sigma1;
    }

    fn sigma2(&self) -> Vec<f64> {
        self.sigma2.clone()
    }

    fn bind<'a>(&'a self, _tape: &mut Tape, _trainable: bool) -> Box<dyn BoundCg + 'a> {
        Box::new(Bound { model: self })
    }
}

impl BoundCg for Bound<'_> {
    fn encode(&self, _tape: &mut Tape, u2: Var) -> Var {
        u2
    }

    fn decode(&self, _tape: &mut Tape, v: Var) -> Var {
        v
    }

    fn coefficients(&self, tape: &mut Tape, u1: Var) -> CoefSeries {
        let rows = tape.shape(u1).0;
        let d = &self.model.dynamics;
        let repeat = |x: &[f64]| {
            let data = (0..rows).flat_map(|_| x.iter().copied()).collect();
            Matrix::new(rows, x.len(), data).expect("sized")
        };
        let f1 = tape.constant(repeat(&d.f1));
        let g1 = tape.constant(repeat(d.g1.data()));
        let f2 = tape.constant(Matrix::row_vector(&d.f2));
        let g2 = tape.constant(d.g2.clone());
        CoefSeries {
            coefs: Coefs::Autonomous { f1, g1, f2, g2 },
            rows,
            dims: self.model.dims(),
        }
    }

    fn gradients(&self, _grads: &Gradients) -> Result<Vec<Vec<f64>>> {
        Ok(Vec::new())
    }
}
