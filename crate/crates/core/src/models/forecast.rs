use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{decode, drift_batch, encode, CgModel, DnnModel};
use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::systems::{Trajectory, BLOWUP_NORM};

/// Forecast states for a batch of origins, one matrix per step `0..=n`.
#[derive(Clone, Debug)]
pub struct ForecastPaths {
    pub u1: Vec<Matrix>,
    pub u2: Vec<Matrix>,
}

fn add_noise(x: &mut Matrix, sigma: &[f64], dt: f64, rng: &mut ChaCha8Rng) {
    let s = dt.sqrt();
    for r in 0..x.rows() {
        for (v, sg) in x.row_mut(r).iter_mut().zip(sigma) {
            let xi: f64 = StandardNormal.sample(rng);
            *v += sg * s * xi;
        }
    }
}

fn check_blowup(step: usize, parts: &[&Matrix]) -> Result<()> {
    let rows = parts[0].rows();
    for r in 0..rows {
        let norm = parts
            .iter()
            .map(|m| m.row(r).iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !(norm <= BLOWUP_NORM) {
            return Err(Error::BlowUp { step, norm });
        }
    }
    Ok(())
}

/// Encodes `u2_0`, integrates `(u1, v)` with Euler(-Maruyama) steps of `dt`
/// and decodes `v` at every step. `noise_seed = None` gives the mean path.
pub fn forecast_batch(
    model: &dyn CgModel,
    u1_0: &Matrix,
    u2_0: &Matrix,
    n_steps: usize,
    dt: f64,
    noise_seed: Option<u64>,
) -> Result<ForecastPaths> {
    if u1_0.rows() != u2_0.rows() {
        return Err(Error::dim("forecast origins", u1_0.rows(), u2_0.rows()));
    }
    if !u1_0.is_finite() || !u2_0.is_finite() {
        return Err(Error::Config("forecast origin is not finite".into()));
    }
    let mut rng = noise_seed.map(ChaCha8Rng::seed_from_u64);
    let sigma2 = model.sigma2();
    let mut u1 = u1_0.clone();
    let mut v = encode(model, u2_0)?;
    let mut paths = ForecastPaths {
        u1: vec![u1.clone()],
        u2: vec![decode(model, &v)?],
    };
    for step in 1..=n_steps {
        let (du1, dv) = drift_batch(model, &u1, &v)?;
        u1.axpy(dt, &du1);
        v.axpy(dt, &dv);
        if let Some(rng) = rng.as_mut() {
            add_noise(&mut u1, model.sigma1(), dt, rng);
            add_noise(&mut v, &sigma2, dt, rng);
        }
        check_blowup(step, &[&u1, &v])?;
        paths.u1.push(u1.clone());
        paths.u2.push(decode(model, &v)?);
    }
    Ok(paths)
}

/// Single-origin forecast as a trajectory over the full state.
#[allow(clippy::too_many_arguments)]
pub fn forecast(
    model: &dyn CgModel,
    obs_idx: &[usize],
    unobs_idx: &[usize],
    u0: &[f64],
    n_steps: usize,
    dt: f64,
    with_noise: bool,
    seed: u64,
) -> Result<Trajectory> {
    let dim = obs_idx.len() + unobs_idx.len();
    if u0.len() != dim {
        return Err(Error::dim("initial state", dim, u0.len()));
    }
    let u1 = Matrix::row_vector(&obs_idx.iter().map(|&i| u0[i]).collect::<Vec<_>>());
    let u2 = Matrix::row_vector(&unobs_idx.iter().map(|&i| u0[i]).collect::<Vec<_>>());
    let paths = forecast_batch(model, &u1, &u2, n_steps, dt, with_noise.then_some(seed))?;
    let mut states = Matrix::zeros(n_steps + 1, dim);
    for n in 0..=n_steps {
        for (k, &i) in obs_idx.iter().enumerate() {
            states[(n, i)] = paths.u1[n][(0, k)];
        }
        for (k, &i) in unobs_idx.iter().enumerate() {
            states[(n, i)] = paths.u2[n][(0, k)];
        }
    }
    if n_steps == 0 {
        return Ok(Trajectory {
            dt,
            t0: 0.0,
            states,
            obs_idx: obs_idx.to_vec(),
            unobs_idx: unobs_idx.to_vec(),
        });
    }
    Trajectory::new(dt, states, obs_idx.to_vec(), unobs_idx.to_vec())
}

/// Euler(-Maruyama) rollout of the black-box drift for a batch of origins.
pub fn dnn_forecast(
    model: &DnnModel,
    u0: &Matrix,
    n_steps: usize,
    dt: f64,
    noise_seed: Option<u64>,
) -> Result<Vec<Matrix>> {
    if u0.cols() != model.dim() {
        return Err(Error::dim("initial state", model.dim(), u0.cols()));
    }
    let mut rng = noise_seed.map(ChaCha8Rng::seed_from_u64);
    let mut u = u0.clone();
    let mut out = vec![u.clone()];
    for step in 1..=n_steps {
        let du = model.net.forward_batch(&u)?;
        u.axpy(dt, &du);
        if let Some(rng) = rng.as_mut() {
            add_noise(&mut u, &model.sigma, dt, rng);
        }
        check_blowup(step, &[&u])?;
        out.push(u.clone());
    }
    Ok(out)
}
