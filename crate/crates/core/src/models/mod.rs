//! Learnable surrogates behind one conditional-Gaussian interface.
//!
//! Every CG-structured model is written once against the tape: it binds its
//! parameters, then produces encoder/decoder outputs and a [`CoefSeries`]
//! holding `(f1, g1, f2, g2)` for a batch of observed states. Numeric
//! inference reuses the same code with the parameters bound as constants.

mod cgkn;
pub(crate) use cgkn::layer_dims;
mod cgreg;
mod checkpoint;
mod dnn;
mod forecast;
mod koopnet;
mod linear;
mod local;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Gradients, Matrix, Tape, Var};
use crate::error::{Error, Result};

pub use cgkn::{CgknModel, CgknSpec};
pub use cgreg::{Basis, CgRegModel, CgRegSpec, Library};
pub use checkpoint::{AnyModel, Checkpoint, CheckpointMeta};
pub use dnn::DnnModel;
pub use forecast::{dnn_forecast, forecast, forecast_batch, ForecastPaths};
pub use koopnet::KoopNetModel;
pub use linear::LinearCgModel;
pub use local::{LocalCgknModel, LocalLayout, LocalSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cgkn,
    LocalCgkn,
    Koopnet,
    CgReg,
    Dnn,
    Linear,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Cgkn => "cgkn",
            ModelKind::LocalCgkn => "local_cgkn",
            ModelKind::Koopnet => "koopnet",
            ModelKind::CgReg => "cg_reg",
            ModelKind::Dnn => "dnn",
            ModelKind::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "cgkn" => ModelKind::Cgkn,
            "local_cgkn" => ModelKind::LocalCgkn,
            "koopnet" => ModelKind::Koopnet,
            "cg_reg" => ModelKind::CgReg,
            "dnn" => ModelKind::Dnn,
            "linear" => ModelKind::Linear,
            other => return Err(Error::Config(format!(
                "unknown model kind `{other}` (expected cgkn, local_cgkn, koopnet, cg_reg or dnn)"
            ))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_u1: usize,
    pub d_u2: usize,
    pub d_v: usize,
}

impl Dims {
    pub fn d_u(&self) -> usize {
        self.d_u1 + self.d_u2
    }

    /// Length of the flattened `[f1 | g1 | f2 | g2]` coefficient vector.
    pub fn coef_len(&self) -> usize {
        self.d_u1 * (1 + self.d_v) + self.d_v * (1 + self.d_v)
    }
}

/// `(f1, g1, f2, g2)` at one observed state.
#[derive(Clone, Debug, PartialEq)]
pub struct CgDynamics {
    pub f1: Vec<f64>,
    pub g1: Matrix,
    pub f2: Vec<f64>,
    pub g2: Matrix,
}

impl CgDynamics {
    /// `f1 + g1 v`.
    pub fn drift_u1(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.g1.matvec(v);
        out.iter_mut().zip(&self.f1).for_each(|(o, f)| *o += f);
        out
    }

    /// `f2 + g2 v`.
    pub fn drift_v(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.g2.matvec(v);
        out.iter_mut().zip(&self.f2).for_each(|(o, f)| *o += f);
        out
    }
}

/// Coefficients for a batch of `rows` observed states, as tape values.
#[derive(Clone, Debug)]
pub enum Coefs {
    /// Row `b` holds `f1` (`d_u1`), `g1` (`d_u1*d_v`), `f2` (`d_v`) and
    /// `g2` (`d_v*d_v`) at observed state `b`, each flattened row-major.
    Dense { f1: Var, g1: Var, f2: Var, g2: Var },
    /// As `Dense` for the observed part; the latent drift is shared by all
    /// rows with `f2` a `1 x d_v` row and `g2` a `d_v x d_v` matrix.
    Autonomous { f1: Var, g1: Var, f2: Var, g2: Var },
    /// Per-site network outputs, `(rows*sites) x ...`; see [`LocalLayout`].
    Local {
        u1_raw: Var,
        v_raw: Var,
        layout: Rc<LocalLayout>,
    },
}

#[derive(Clone, Debug)]
pub struct CoefSeries {
    pub coefs: Coefs,
    pub rows: usize,
    pub dims: Dims,
}

/// Coefficients at one row: `f1` is `d_u1 x 1`, `g1` `d_u1 x d_v`,
/// `f2` `d_v x 1`, `g2` `d_v x d_v`.
#[derive(Clone, Copy, Debug)]
pub struct StepCoefs {
    pub f1: Var,
    pub g1: Var,
    pub f2: Var,
    pub g2: Var,
}

impl CoefSeries {
    /// Drifts `(f1 + g1 v, f2 + g2 v)` row by row for a `rows x d_v` batch.
    pub fn drift(&self, tape: &mut Tape, v: Var) -> (Var, Var) {
        let Dims { d_u1, d_v, .. } = self.dims;
        assert_eq!(tape.shape(v), (self.rows, d_v), "latent batch shape");
        match &self.coefs {
            Coefs::Dense { f1, g1, f2, g2 } => {
                let a = tape.batch_matvec(*g1, v, d_u1, d_v);
                let du1 = tape.add(*f1, a);
                let b = tape.batch_matvec(*g2, v, d_v, d_v);
                let dv = tape.add(*f2, b);
                (du1, dv)
            }
            Coefs::Autonomous { f1, g1, f2, g2 } => {
                let a = tape.batch_matvec(*g1, v, d_u1, d_v);
                let du1 = tape.add(*f1, a);
                let b = tape.matmul_bt(v, *g2);
                let dv = tape.add_row(b, *f2);
                (du1, dv)
            }
            Coefs::Local {
                u1_raw,
                v_raw,
                layout,
            } => layout.drift(tape, *u1_raw, *v_raw, v, self.rows),
        }
    }

    /// Coefficients of row `n` as matrices.
    pub fn step(&self, tape: &mut Tape, n: usize) -> StepCoefs {
        let Dims { d_u1, d_v, .. } = self.dims;
        assert!(n < self.rows, "step {n} outside coefficient series");
        match &self.coefs {
            Coefs::Dense { f1, g1, f2, g2 } => StepCoefs {
                f1: tape.slice(*f1, n * d_u1, d_u1, 1),
                g1: tape.slice(*g1, n * d_u1 * d_v, d_u1, d_v),
                f2: tape.slice(*f2, n * d_v, d_v, 1),
                g2: tape.slice(*g2, n * d_v * d_v, d_v, d_v),
            },
            Coefs::Autonomous { f1, g1, f2, g2 } => StepCoefs {
                f1: tape.slice(*f1, n * d_u1, d_u1, 1),
                g1: tape.slice(*g1, n * d_u1 * d_v, d_u1, d_v),
                f2: tape.reshape(*f2, d_v, 1),
                g2: *g2,
            },
            Coefs::Local {
                u1_raw,
                v_raw,
                layout,
            } => layout.step(tape, *u1_raw, *v_raw, n),
        }
    }
}

/// A model with conditional-Gaussian structure.
pub trait CgModel {
    fn kind(&self) -> ModelKind;
    fn dims(&self) -> Dims;
    /// Diagonal observation-noise amplitudes (length `d_u1`).
    fn sigma1(&self) -> &[f64];
    fn set_sigma1(&mut self, sigma1: Vec<f64>);
    /// Diagonal latent-noise amplitudes (length `d_v`).
    fn sigma2(&self) -> Vec<f64>;
    /// Registers parameters on `tape`; as leaves when `trainable`.
    fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> Box<dyn BoundCg + 'a>;
    /// Trainable tensors in a fixed order (empty for fitted models).
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        Vec::new()
    }
}

/// Tape view of a bound [`CgModel`].
pub trait BoundCg {
    /// `batch x d_u2` to `batch x d_v`.
    fn encode(&self, tape: &mut Tape, u2: Var) -> Var;
    /// `batch x d_v` to `batch x d_u2`.
    fn decode(&self, tape: &mut Tape, v: Var) -> Var;
    /// Coefficients at each row of a `batch x d_u1` input.
    fn coefficients(&self, tape: &mut Tape, u1: Var) -> CoefSeries;
    /// Gradients congruent to [`CgModel::tensors_mut`].
    fn gradients(&self, grads: &Gradients) -> Result<Vec<Vec<f64>>>;
}

fn check_width(context: &'static str, m: &Matrix, expected: usize) -> Result<()> {
    if m.cols() != expected {
        return Err(Error::dim(context, expected, m.cols()));
    }
    Ok(())
}

fn finite(m: Matrix, what: &str) -> Result<Matrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::Numeric(format!(
            "{what} produced a non-finite value"
        )))
    }
}

/// Encoder applied row-wise.
pub fn encode(model: &dyn CgModel, u2: &Matrix) -> Result<Matrix> {
    check_width("encoder input", u2, model.dims().d_u2)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let x = tape.constant(u2.clone());
    let v = bound.encode(&mut tape, x);
    finite(tape.value(v).clone(), "encoder")
}

/// Decoder applied row-wise.
pub fn decode(model: &dyn CgModel, v: &Matrix) -> Result<Matrix> {
    check_width("decoder input", v, model.dims().d_v)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let x = tape.constant(v.clone());
    let u2 = bound.decode(&mut tape, x);
    finite(tape.value(u2).clone(), "decoder")
}

/// Dynamics at each row of `u1`.
pub fn dynamics_rows(model: &dyn CgModel, u1: &Matrix) -> Result<Vec<CgDynamics>> {
    check_width("observed state", u1, model.dims().d_u1)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let x = tape.constant(u1.clone());
    let series = bound.coefficients(&mut tape, x);
    (0..u1.rows())
        .map(|n| {
            let s = series.step(&mut tape, n);
            let col = |t: &Tape, v: Var| t.value(v).data().to_vec();
            let dynamics = CgDynamics {
                f1: col(&tape, s.f1),
                g1: tape.value(s.g1).clone(),
                f2: col(&tape, s.f2),
                g2: tape.value(s.g2).clone(),
            };
            if dynamics
                .f1
                .iter()
                .chain(&dynamics.f2)
                .any(|x| !x.is_finite())
                || !dynamics.g1.is_finite()
                || !dynamics.g2.is_finite()
            {
                return Err(Error::Numeric(format!(
                    "non-finite dynamics coefficients at row {n}"
                )));
            }
            Ok(dynamics)
        })
        .collect()
}

/// Dynamics at a single observed state.
pub fn cg_dynamics(model: &dyn CgModel, u1: &[f64]) -> Result<CgDynamics> {
    let mut rows = dynamics_rows(model, &Matrix::row_vector(u1))?;
    Ok(rows.pop().expect("one row"))
}

/// Row-wise drifts `(du1, dv)` for paired `u1` and `v` batches.
pub fn drift_batch(model: &dyn CgModel, u1: &Matrix, v: &Matrix) -> Result<(Matrix, Matrix)> {
    let dims = model.dims();
    check_width("observed state", u1, dims.d_u1)?;
    check_width("latent state", v, dims.d_v)?;
    if u1.rows() != v.rows() {
        return Err(Error::dim("batch rows", u1.rows(), v.rows()));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let x = tape.constant(u1.clone());
    let z = tape.constant(v.clone());
    let series = bound.coefficients(&mut tape, x);
    let (du1, dv) = series.drift(&mut tape, z);
    Ok((
        finite(tape.value(du1).clone(), "observed drift")?,
        finite(tape.value(dv).clone(), "latent drift")?,
    ))
}
