use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::filter::{inverse_obs_variance, MAX_SUBSTEPS};
use super::GaussianPosterior;
use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::models::{cg_dynamics, decode, CgModel};
use crate::systems::{check_partition, SdeSystem};

/// A diffusion whose state splits into an observed part and a hidden part
/// carried by the particles.
pub trait EnsembleModel {
    fn d_obs(&self) -> usize;
    fn d_hidden(&self) -> usize;
    fn sigma_obs(&self) -> Vec<f64>;
    fn sigma_hidden(&self) -> Vec<f64>;
    /// Observed and hidden drifts for every particle (rows of `hidden`).
    fn drifts(&self, u1: &[f64], hidden: &Matrix) -> Result<(Matrix, Matrix)>;
    /// Maps hidden means to reported unobserved states.
    fn report(&self, hidden_mean: &Matrix) -> Result<Matrix> {
        Ok(hidden_mean.clone())
    }
}

/// A simulated system with particles over its unobserved coordinates.
pub struct PartitionedSystem<'a> {
    pub sys: &'a SdeSystem,
    pub obs_idx: Vec<usize>,
    pub unobs_idx: Vec<usize>,
}

impl<'a> PartitionedSystem<'a> {
    pub fn new(sys: &'a SdeSystem, obs_idx: &[usize], unobs_idx: &[usize]) -> Result<Self> {
        check_partition(sys.dim, obs_idx, unobs_idx)?;
        Ok(Self {
            sys,
            obs_idx: obs_idx.to_vec(),
            unobs_idx: unobs_idx.to_vec(),
        })
    }
}

impl EnsembleModel for PartitionedSystem<'_> {
    fn d_obs(&self) -> usize {
        self.obs_idx.len()
    }

    fn d_hidden(&self) -> usize {
        self.unobs_idx.len()
    }

    fn sigma_obs(&self) -> Vec<f64> {
        self.obs_idx
            .iter()
            .map(|&i| self.sys.noise_diag[i])
            .collect()
    }

    fn sigma_hidden(&self) -> Vec<f64> {
        self.unobs_idx
            .iter()
            .map(|&i| self.sys.noise_diag[i])
            .collect()
    }

    fn drifts(&self, u1: &[f64], hidden: &Matrix) -> Result<(Matrix, Matrix)> {
        let j = hidden.rows();
        let mut h = Matrix::zeros(j, self.d_obs());
        let mut a = Matrix::zeros(j, self.d_hidden());
        let mut x = vec![0.0; self.sys.dim];
        let mut dx = vec![0.0; self.sys.dim];
        for (&i, &v) in self.obs_idx.iter().zip(u1) {
            x[i] = v;
        }
        for p in 0..j {
            for (&i, &v) in self.unobs_idx.iter().zip(hidden.row(p)) {
                x[i] = v;
            }
            self.sys.drift_into(&x, &mut dx);
            for (o, &i) in h.row_mut(p).iter_mut().zip(&self.obs_idx) {
                *o = dx[i];
            }
            for (o, &i) in a.row_mut(p).iter_mut().zip(&self.unobs_idx) {
                *o = dx[i];
            }
        }
        Ok((h, a))
    }
}

/// Particles over the latent state of a conditional-Gaussian model; the
/// reported mean is decoded.
pub struct LatentEnsemble<'a>(pub &'a dyn CgModel);

impl EnsembleModel for LatentEnsemble<'_> {
    fn d_obs(&self) -> usize {
        self.0.dims().d_u1
    }

    fn d_hidden(&self) -> usize {
        self.0.dims().d_v
    }

    fn sigma_obs(&self) -> Vec<f64> {
        self.0.sigma1().to_vec()
    }

    fn sigma_hidden(&self) -> Vec<f64> {
        self.0.sigma2()
    }

    fn drifts(&self, u1: &[f64], hidden: &Matrix) -> Result<(Matrix, Matrix)> {
        let d = cg_dynamics(self.0, u1)?;
        let j = hidden.rows();
        let mut h = Matrix::zeros(j, self.d_obs());
        let mut a = Matrix::zeros(j, self.d_hidden());
        for p in 0..j {
            h.row_mut(p).copy_from_slice(&d.drift_u1(hidden.row(p)));
            a.row_mut(p).copy_from_slice(&d.drift_v(hidden.row(p)));
        }
        Ok((h, a))
    }

    fn report(&self, hidden_mean: &Matrix) -> Result<Matrix> {
        decode(self.0, hidden_mean)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnkbfConfig {
    pub ensemble: usize,
    pub seed: u64,
    /// Multiplies particle anomalies before every step; 1 disables inflation.
    pub inflation: f64,
    pub init_mean: Vec<f64>,
    pub init_std: Vec<f64>,
    /// Keep every ensemble covariance, not only the last.
    pub keep_cov: bool,
}

impl EnkbfConfig {
    pub fn new(ensemble: usize, seed: u64, init_mean: Vec<f64>, init_std: Vec<f64>) -> Self {
        Self {
            ensemble,
            seed,
            inflation: 1.0,
            init_mean,
            init_std,
            keep_cov: false,
        }
    }
}

/// Below this the ensemble covariance trace counts as collapsed.
const MIN_TRACE: f64 = 1e-12;

fn moments(x: &Matrix) -> (Vec<f64>, Matrix) {
    let (j, d) = x.shape();
    let mut mean = vec![0.0; d];
    for p in 0..j {
        mean.iter_mut().zip(x.row(p)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= j as f64);
    let mut cov = Matrix::zeros(d, d);
    for p in 0..j {
        let r = x.row(p);
        for a in 0..d {
            let da = r[a] - mean[a];
            for b in 0..d {
                cov.data_mut()[a * d + b] += da * (r[b] - mean[b]);
            }
        }
    }
    (mean, cov.scale(1.0 / (j as f64 - 1.0)))
}

/// Sub-steps for one observation interval. The gain term contracts the
/// ensemble at rate `tr(diag(1/s1^2) Cov(h))`; an explicit step overshoots
/// once `dt` times that approaches one, as a wide initial ensemble does.
fn ensemble_substeps(h_cov: &Matrix, inv_var1: &[f64], dt: f64) -> usize {
    let rate: f64 = inv_var1
        .iter()
        .enumerate()
        .map(|(c, w)| w * h_cov[(c, c)])
        .sum();
    let stiffness = dt * rate;
    if !stiffness.is_finite() {
        return MAX_SUBSTEPS;
    }
    ((2.0 * stiffness).ceil() as usize).clamp(1, MAX_SUBSTEPS)
}

/// Ensemble Kalman–Bucy filter on the observed series `u1` (rows every `dt`)
/// in deterministic-innovation form:
/// `dX_j = a(X_j) dt + s2 dW_j + K (du1 - (h(X_j) + mean h) dt / 2)` with
/// `K = Cov(X, h) diag(1/s1^2)`. Stiff intervals are split into equal
/// sub-steps as in the analytic filter.
pub fn enkbf(
    model: &dyn EnsembleModel,
    u1: &Matrix,
    dt: f64,
    t0: f64,
    cfg: &EnkbfConfig,
) -> Result<GaussianPosterior> {
    let (d1, d2, j) = (model.d_obs(), model.d_hidden(), cfg.ensemble);
    if j < 2 {
        return Err(Error::Config(format!(
            "ensemble size must be at least 2, got {j}"
        )));
    }
    if u1.cols() != d1 {
        return Err(Error::dim("observed series width", d1, u1.cols()));
    }
    if cfg.init_mean.len() != d2 || cfg.init_std.len() != d2 {
        return Err(Error::dim(
            "ensemble initialisation",
            d2,
            cfg.init_mean.len(),
        ));
    }
    if !(cfg.inflation >= 1.0) {
        return Err(Error::Config("inflation factor must be at least 1".into()));
    }
    let inv_var1 = inverse_obs_variance(&model.sigma_obs())?;
    let sigma2 = model.sigma_hidden();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Matrix::zeros(j, d2);
    for p in 0..j {
        for (k, v) in x.row_mut(p).iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = cfg.init_mean[k] + cfg.init_std[k] * z;
        }
    }
    let t = u1.rows();
    let mut means = Matrix::zeros(t, d2);
    let mut vars = Matrix::zeros(t, d2);
    let mut covs = Vec::new();
    let record =
        |n: usize, x: &Matrix, means: &mut Matrix, vars: &mut Matrix, covs: &mut Vec<Matrix>| {
            let (m, c) = moments(x);
            if !(c.trace() >= MIN_TRACE) {
                return Err(Error::DegenerateEnsemble {
                    step: n,
                    trace: c.trace(),
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite ensemble mean at step {n}"
                )));
            }
            means.row_mut(n).copy_from_slice(&m);
            vars.row_mut(n).copy_from_slice(&c.diag());
            if cfg.keep_cov || n + 1 == t {
                covs.push(c);
            }
            Ok(m)
        };
    let mut mean = record(0, &x, &mut means, &mut vars, &mut covs)?;
    for n in 1..t {
        if cfg.inflation != 1.0 {
            for p in 0..j {
                for (v, m) in x.row_mut(p).iter_mut().zip(&mean) {
                    *v = m + cfg.inflation * (*v - m);
                }
            }
        }
        let du1: Vec<f64> = u1
            .row(n)
            .iter()
            .zip(u1.row(n - 1))
            .map(|(b, a)| b - a)
            .collect();
        let mut k_sub = 1;
        let mut sub = 0;
        while sub < k_sub {
            let (h, a) = model.drifts(u1.row(n - 1), &x)?;
            let (h_mean, h_cov) = moments(&h);
            if sub == 0 {
                k_sub = ensemble_substeps(&h_cov, &inv_var1, dt);
            }
            let step = dt / k_sub as f64;
            let sq = step.sqrt();
            let (m, _) = moments(&x);
            // K = Cov(X, h) diag(1/s1^2), d2 x d1
            let mut k = Matrix::zeros(d2, d1);
            for p in 0..j {
                for r in 0..d2 {
                    let dx = x[(p, r)] - m[r];
                    for c in 0..d1 {
                        k.data_mut()[r * d1 + c] += dx * (h[(p, c)] - h_mean[c]);
                    }
                }
            }
            for r in 0..d2 {
                for c in 0..d1 {
                    k.data_mut()[r * d1 + c] *= inv_var1[c] / (j as f64 - 1.0);
                }
            }
            let mut innov = vec![0.0; d1];
            for p in 0..j {
                for c in 0..d1 {
                    innov[c] = du1[c] / k_sub as f64 - 0.5 * (h[(p, c)] + h_mean[c]) * step;
                }
                let corr = k.matvec(&innov);
                for (r, v) in x.row_mut(p).iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += a[(p, r)] * step + sigma2[r] * sq * z + corr[r];
                }
            }
            sub += 1;
        }
        mean = record(n, &x, &mut means, &mut vars, &mut covs)?;
    }
    let mu_u2 = model.report(&means)?;
    Ok(GaussianPosterior {
        times: (0..t).map(|n| t0 + n as f64 * dt).collect(),
        mu_v: means,
        var_v: vars,
        cov: covs,
        mu_u2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assimilation::cg_filter;
    use crate::models::LinearCgModel;
    use crate::systems::{euler_maruyama, make_linear, make_psbse};

    #[test]
    fn single_particle_is_rejected() {
        let sys = make_psbse();
        let ps = PartitionedSystem::new(&sys, &[0], &[1, 2]).unwrap();
        let cfg = EnkbfConfig::new(1, 0, vec![0.0; 2], vec![1.0; 2]);
        let r = enkbf(&ps, &Matrix::zeros(3, 1), 0.01, 0.0, &cfg);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn collapsed_ensemble_is_reported() {
        let sys = make_psbse();
        let ps = PartitionedSystem::new(&sys, &[0], &[1, 2]).unwrap();
        let cfg = EnkbfConfig::new(10, 0, vec![0.0; 2], vec![0.0; 2]);
        let r = enkbf(&ps, &Matrix::zeros(3, 1), 0.01, 0.0, &cfg);
        assert!(matches!(r, Err(Error::DegenerateEnsemble { step: 0, .. })));
    }

    #[test]
    fn near_noiseless_ensemble_tracks_truth() {
        // Weakly damped oscillator observed in its first coordinate.
        let a = Matrix::from_rows(&[vec![-0.1, 1.0], vec![-1.0, -0.1]]).unwrap();
        let truth_sys = make_linear(a.clone(), vec![0.0; 2], vec![0.0; 2]).unwrap();
        let filt_sys = make_linear(a, vec![0.0; 2], vec![1e-3; 2]).unwrap();
        let dt = 1e-3;
        let path = euler_maruyama(&truth_sys, &[1.0, 0.5], 5.0, dt, 0).unwrap();
        let u1 = path.select_cols(&[0]);
        let ps = PartitionedSystem::new(&filt_sys, &[0], &[1]).unwrap();
        let cfg = EnkbfConfig::new(50, 3, vec![0.5], vec![1e-3]);
        let post = enkbf(&ps, &u1, dt, 0.0, &cfg).unwrap();
        let n = post.len() - 1;
        assert!((post.mu_u2[(n, 0)] - path[(n, 1)]).abs() < 1e-2);
    }

    #[test]
    fn large_ensemble_matches_analytic_filter() {
        let (f1, g1, f2, g2, s1, s2) = (0.0, 1.0, 0.5, -1.0, 0.5, 0.5);
        let a = Matrix::from_rows(&[vec![0.0, g1], vec![0.0, g2]]).unwrap();
        let sys = make_linear(a, vec![f1, f2], vec![s1, s2]).unwrap();
        let dt = 0.01;
        let path = euler_maruyama(&sys, &[0.0, 0.5], 10.0, dt, 11).unwrap();
        let u1 = path.select_cols(&[0]);
        let model = LinearCgModel::scalar(f1, g1, f2, g2, s1, s2);
        let exact = cg_filter(&model, &u1, dt, 0.0, &[0.5], &Matrix::filled(1, 1, 0.25)).unwrap();
        let ps = PartitionedSystem::new(&sys, &[0], &[1]).unwrap();
        let post = enkbf(
            &ps,
            &u1,
            dt,
            0.0,
            &EnkbfConfig::new(2000, 5, vec![0.5], vec![0.5]),
        )
        .unwrap();
        let diff = post.mu_v.sub(&exact.mu_v);
        let rms = (diff.data().iter().map(|x| x * x).sum::<f64>() / diff.len() as f64).sqrt();
        let truth = path.col(1);
        let m = truth.iter().sum::<f64>() / truth.len() as f64;
        let sd = (truth.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / truth.len() as f64).sqrt();
        assert!(rms < 0.05 * sd, "{rms} vs {sd}");
        // latent ensemble over the same model agrees too
        let lat = enkbf(
            &LatentEnsemble(&model),
            &u1,
            dt,
            0.0,
            &EnkbfConfig::new(2000, 5, vec![0.5], vec![0.5]),
        )
        .unwrap();
        assert!(lat.mu_v.sub(&post.mu_v).max_abs() < 1e-9);
    }

    #[test]
    fn wide_initial_ensemble_is_substepped() {
        // dt * Var(h) / s1^2 is about 400 at the first step.
        let (f1, g1, f2, g2, s1, s2) = (0.0, 1.0, 0.0, -1.0, 0.05, 0.5);
        let a = Matrix::from_rows(&[vec![0.0, g1], vec![0.0, g2]]).unwrap();
        let sys = make_linear(a, vec![f1, f2], vec![s1, s2]).unwrap();
        let dt = 0.01;
        let path = euler_maruyama(&sys, &[0.0, 1.0], 2.0, dt, 4).unwrap();
        let u1 = path.select_cols(&[0]);
        let model = LinearCgModel::scalar(f1, g1, f2, g2, s1, s2);
        let exact = cg_filter(&model, &u1, dt, 0.0, &[0.0], &Matrix::filled(1, 1, 100.0)).unwrap();
        let ps = PartitionedSystem::new(&sys, &[0], &[1]).unwrap();
        let post = enkbf(
            &ps,
            &u1,
            dt,
            0.0,
            &EnkbfConfig::new(1000, 2, vec![0.0], vec![10.0]),
        )
        .unwrap();
        let n = post.len() - 1;
        assert!(
            (post.mu_v[(n, 0)] - exact.mu_v[(n, 0)]).abs() < 0.1,
            "{} vs {}",
            post.mu_v[(n, 0)],
            exact.mu_v[(n, 0)]
        );
        assert!((post.mu_v[(n, 0)] - path[(n, 1)]).abs() < 0.5);
    }
}
