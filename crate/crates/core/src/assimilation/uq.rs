use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{clip_global_norm, Adam, CosineSchedule, Matrix, MlpParams, Tape};
use crate::error::{Error, Result};
use crate::models::layer_dims;

pub const MIN_UQ_SAMPLES: usize = 100;

/// Regression of absolute posterior-mean residuals on the observed state.
/// Outputs are read as posterior standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualUqModel {
    pub net: MlpParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UqFitConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for UqFitConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            steps: 2000,
            batch: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl ResidualUqModel {
    /// Row-wise standard deviations, clamped at zero.
    pub fn std(&self, u1: &Matrix) -> Result<Matrix> {
        Ok(self.net.forward_batch(u1)?.map(|x| x.max(0.0)))
    }
}

/// Fits `|u2_true - mu_u2|` against `u1` by mean-squared error. Rows must be
/// aligned and already exclude the warm-up.
pub fn fit_residual_uq(
    u1: &Matrix,
    mu_u2: &Matrix,
    u2_true: &Matrix,
    cfg: &UqFitConfig,
) -> Result<ResidualUqModel> {
    let n = u1.rows();
    if mu_u2.shape() != u2_true.shape() {
        return Err(Error::dim(
            "residual series width",
            u2_true.cols(),
            mu_u2.cols(),
        ));
    }
    if mu_u2.rows() != n {
        return Err(Error::dim("residual series rows", n, mu_u2.rows()));
    }
    if n < MIN_UQ_SAMPLES {
        return Err(Error::InsufficientData {
            needed: MIN_UQ_SAMPLES,
            got: n,
        });
    }
    let resid = u2_true.sub(mu_u2).map(f64::abs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = MlpParams::init(&layer_dims(u1.cols(), &cfg.hidden, resid.cols()), &mut rng)?;
    let shapes: Vec<usize> = net.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&shapes);
    let schedule = CosineSchedule {
        lr0: cfg.lr,
        lr_min: 0.0,
        total: cfg.steps,
    };
    let batch = cfg.batch.min(n).max(1);
    for step in 0..cfg.steps {
        let idx = sample(&mut rng, n, batch).into_vec();
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape);
        let x = tape.constant(u1.select_rows(&idx));
        let y = tape.constant(resid.select_rows(&idx));
        let out = vars.forward(&mut tape, x);
        let e = tape.sub(out, y);
        let e = tape.square(e);
        let loss = tape.mean(e);
        if !tape.scalar(loss).is_finite() {
            return Err(Error::Numeric(format!(
                "residual regression diverged at step {step}"
            )));
        }
        let grads = tape.backward(loss)?;
        let mut g = vars.gradients(&grads, "residual network")?;
        clip_global_norm(&mut g, 10.0);
        adam.step(net.tensors_mut(), &g, schedule.lr(step));
    }
    Ok(ResidualUqModel { net })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Matrix {
        Matrix::column(
            &(0..n)
                .map(|i| -2.0 + 4.0 * i as f64 / (n - 1) as f64)
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn too_few_samples() {
        let x = grid(50);
        let r = fit_residual_uq(&x, &x, &x, &UqFitConfig::default());
        assert!(matches!(
            r,
            Err(Error::InsufficientData {
                needed: 100,
                got: 50
            })
        ));
    }

    #[test]
    fn constant_residual_is_recovered() {
        let x = grid(400);
        let mu = Matrix::zeros(400, 2);
        let truth = Matrix::filled(400, 2, 0.5);
        let m = fit_residual_uq(
            &x,
            &mu,
            &truth,
            &UqFitConfig {
                steps: 1500,
                ..Default::default()
            },
        )
        .unwrap();
        let s = m.std(&grid(9)).unwrap();
        assert!(s.data().iter().all(|v| (v - 0.5).abs() < 0.05), "{s:?}");
    }

    #[test]
    fn absolute_value_shape_is_recovered() {
        let x = grid(1000);
        let mu = Matrix::zeros(1000, 1);
        let m = fit_residual_uq(
            &x,
            &mu,
            &x,
            &UqFitConfig {
                steps: 3000,
                lr: 3e-3,
                ..Default::default()
            },
        )
        .unwrap();
        let s = m.std(&x).unwrap();
        let mse = s
            .sub(&x.map(f64::abs))
            .data()
            .iter()
            .map(|e| e * e)
            .sum::<f64>()
            / 1000.0;
        assert!(mse < 1e-2, "{mse}");
    }

    #[test]
    fn outputs_are_nonnegative() {
        let net =
            MlpParams::from_layers(vec![Matrix::filled(1, 1, -1.0)], vec![vec![0.0]]).unwrap();
        let m = ResidualUqModel { net };
        let s = m.std(&grid(11)).unwrap();
        assert!(s.data().iter().all(|&v| v >= 0.0));
    }
}
