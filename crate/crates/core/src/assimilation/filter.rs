use std::rc::Rc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::diffcore::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::models::{dynamics_rows, CgDynamics, CgModel, CoefSeries};

use super::GaussianPosterior;

/// Eigenvalues below this are lifted to it after every step.
pub const EIG_FLOOR: f64 = 1e-10;
/// A covariance eigenvalue below this is reported as an instability.
pub const EIG_FAIL: f64 = -1e-6;

const CHUNK: usize = 2048;

/// Inverse observation variances `1 / sigma1^2`.
pub(crate) fn inverse_obs_variance(sigma1: &[f64]) -> Result<Vec<f64>> {
    sigma1
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if s.is_finite() && s > 0.0 {
                Ok(1.0 / (s * s))
            } else {
                Err(Error::Config(format!(
                    "observation noise sigma1[{i}] = {s} makes the gain singular"
                )))
            }
        })
        .collect()
}

/// Returns `None` when `r` already has all eigenvalues at or above the floor,
/// otherwise the floored matrix.
pub fn floor_covariance(r: &Matrix, step: usize) -> Result<Option<Matrix>> {
    let n = r.rows();
    let mut shifted = r.clone();
    for i in 0..n {
        shifted.data_mut()[i * n + i] -= EIG_FLOOR;
    }
    if shifted.cholesky().is_ok() {
        return Ok(None);
    }
    if !r.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite covariance at step {step}"
        )));
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, r.data()));
    let min_eig = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min_eig < EIG_FAIL {
        return Err(Error::Instability { step, min_eig });
    }
    let lifted = eig.eigenvalues.map(|l| l.max(EIG_FLOOR));
    let q = &eig.eigenvectors;
    let rebuilt = q * DMatrix::from_diagonal(&lifted) * q.transpose();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.data_mut()[i * n + j] = rebuilt[(i, j)];
        }
    }
    out.symmetrize();
    Ok(Some(out))
}

/// Upper bound on Euler sub-steps within one observation interval.
pub const MAX_SUBSTEPS: usize = 1000;

/// Number of equal Euler sub-steps that keeps one observation interval
/// stable. The covariance update `R - dt R G R`, `G = g1^T S^-1 g1`, stays
/// positive while `dt * lambda_max(G R) < 1`, and the Lyapunov part while
/// `dt * |g2|` is small; `tr(G R)` and the Frobenius norm bound both.
/// Returns 1 whenever a single step is already safe.
pub fn substeps(g1: &Matrix, g2: &Matrix, inv_var1: &[f64], r: &Matrix, dt: f64) -> usize {
    let mut gain = 0.0;
    for (i, w) in inv_var1.iter().enumerate() {
        let row = g1.row(i);
        let mut quad = 0.0;
        for (a, ga) in row.iter().enumerate() {
            quad += ga * r.row(a).iter().zip(row).map(|(x, y)| x * y).sum::<f64>();
        }
        gain += w * quad.abs();
    }
    let lyap = 2.0 * g2.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let stiffness = dt * (gain + lyap);
    if !stiffness.is_finite() {
        return MAX_SUBSTEPS;
    }
    ((2.0 * stiffness).ceil() as usize).clamp(1, MAX_SUBSTEPS)
}

/// One observation interval of the mean/covariance equations, integrated by
/// forward Euler. Stiff intervals are split into equal sub-steps (see
/// [`substeps`]) with the coefficients and the observed rate `du1 / dt`
/// held fixed.
///
/// `du1` is the observed increment `u1[n+1] - u1[n]`.
#[allow(clippy::too_many_arguments)]
pub fn filter_step(
    d: &CgDynamics,
    inv_var1: &[f64],
    var2: &[f64],
    mu: &[f64],
    r: &Matrix,
    du1: &[f64],
    dt: f64,
    step: usize,
) -> Result<(Vec<f64>, Matrix)> {
    let k = substeps(&d.g1, &d.g2, inv_var1, r, dt);
    if k == 1 {
        return euler_step(d, inv_var1, var2, mu, r, du1, dt, step);
    }
    let h = dt / k as f64;
    let part: Vec<f64> = du1.iter().map(|x| x / k as f64).collect();
    let (mut mu, mut r) = (mu.to_vec(), r.clone());
    for _ in 0..k {
        (mu, r) = euler_step(d, inv_var1, var2, &mu, &r, &part, h, step)?;
    }
    Ok((mu, r))
}

/// Euler step of the covariance equation given `S = g1 R` and the gain
/// `K = S^T diag(1/sigma1^2)`, followed by symmetrization and the floor.
#[allow(clippy::too_many_arguments)]
fn covariance_step(
    g1: &Matrix,
    g2: &Matrix,
    k: &Matrix,
    s: &Matrix,
    var2: &[f64],
    r: &Matrix,
    dt: f64,
    step: usize,
) -> Result<Matrix> {
    debug_assert_eq!(g1.cols(), r.rows());
    let dv = r.rows();
    let g2r = g2.matmul(r);
    let ks = k.matmul(s);
    let mut new_r = r.clone();
    for i in 0..dv {
        for j in 0..dv {
            let mut rate = g2r[(i, j)] + g2r[(j, i)] - ks[(i, j)];
            if i == j {
                rate += var2[i];
            }
            new_r.data_mut()[i * dv + j] += rate * dt;
        }
    }
    new_r.symmetrize();
    if let Some(floored) = floor_covariance(&new_r, step)? {
        new_r = floored;
    }
    Ok(new_r)
}

#[allow(clippy::too_many_arguments)]
fn euler_step(
    d: &CgDynamics,
    inv_var1: &[f64],
    var2: &[f64],
    mu: &[f64],
    r: &Matrix,
    du1: &[f64],
    dt: f64,
    step: usize,
) -> Result<(Vec<f64>, Matrix)> {
    let dv = mu.len();
    // S = g1 R, K = S^T diag(1/sigma1^2)
    let s = d.g1.matmul(r);
    let mut k = s.transpose();
    for row in 0..dv {
        for (x, w) in k.row_mut(row).iter_mut().zip(inv_var1) {
            *x *= w;
        }
    }
    let pred = d.drift_u1(mu);
    let innov: Vec<f64> = du1.iter().zip(&pred).map(|(y, p)| y - p * dt).collect();
    let gain = k.matvec(&innov);
    let drift = d.drift_v(mu);
    let new_mu: Vec<f64> = (0..dv).map(|i| mu[i] + drift[i] * dt + gain[i]).collect();

    let new_r = covariance_step(&d.g1, &d.g2, &k, &s, var2, r, dt, step)?;
    if new_mu.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite posterior mean at step {step}"
        )));
    }
    Ok((new_mu, new_r))
}

/// Runs the filter with coefficients supplied per row by `dynamics`.
/// Row `n` of the result is the posterior given `u1[0..=n]`; row 0 is the
/// prior `(mu0, r0)`. Returns means, covariance diagonals and either every
/// covariance (`keep_cov`) or only the last.
#[allow(clippy::too_many_arguments)]
pub fn run_filter(
    mut dynamics: impl FnMut(usize) -> Result<CgDynamics>,
    u1: &Matrix,
    dt: f64,
    sigma1: &[f64],
    sigma2: &[f64],
    mu0: &[f64],
    r0: &Matrix,
    keep_cov: bool,
) -> Result<(Matrix, Matrix, Vec<Matrix>)> {
    let t = u1.rows();
    let dv = mu0.len();
    if r0.shape() != (dv, dv) {
        return Err(Error::dim("initial covariance", dv, r0.rows()));
    }
    if sigma1.len() != u1.cols() {
        return Err(Error::dim("sigma1 length", u1.cols(), sigma1.len()));
    }
    if sigma2.len() != dv {
        return Err(Error::dim("sigma2 length", dv, sigma2.len()));
    }
    let inv_var1 = inverse_obs_variance(sigma1)?;
    let var2: Vec<f64> = sigma2.iter().map(|s| s * s).collect();
    let mut means = Matrix::zeros(t, dv);
    let mut vars = Matrix::zeros(t, dv);
    let mut covs = Vec::with_capacity(if keep_cov { t } else { 1 });
    let mut mu = mu0.to_vec();
    let mut r = r0.clone();
    r.symmetrize();
    for n in 0..t {
        if n > 0 {
            let d = dynamics(n - 1)?;
            let du1: Vec<f64> = u1
                .row(n)
                .iter()
                .zip(u1.row(n - 1))
                .map(|(a, b)| a - b)
                .collect();
            let (m, c) = filter_step(&d, &inv_var1, &var2, &mu, &r, &du1, dt, n)?;
            mu = m;
            r = c;
        }
        means.row_mut(n).copy_from_slice(&mu);
        vars.row_mut(n).copy_from_slice(&r.diag());
        if keep_cov || n + 1 == t {
            covs.push(r.clone());
        }
    }
    Ok((means, vars, covs))
}

/// Exact conditional-Gaussian filter for `model` on an observed series `u1`
/// sampled every `dt`, keeping every covariance.
pub fn cg_filter(
    model: &dyn CgModel,
    u1: &Matrix,
    dt: f64,
    t0: f64,
    mu0: &[f64],
    r0: &Matrix,
) -> Result<GaussianPosterior> {
    cg_filter_with(model, u1, dt, t0, mu0, r0, true)
}

/// [`cg_filter`] that keeps only the last covariance unless `keep_cov`;
/// long series with a wide latent otherwise hold `T * d_v^2` values.
pub fn cg_filter_with(
    model: &dyn CgModel,
    u1: &Matrix,
    dt: f64,
    t0: f64,
    mu0: &[f64],
    r0: &Matrix,
    keep_cov: bool,
) -> Result<GaussianPosterior> {
    let dims = model.dims();
    if u1.cols() != dims.d_u1 {
        return Err(Error::dim("observed series width", dims.d_u1, u1.cols()));
    }
    if mu0.len() != dims.d_v {
        return Err(Error::dim("initial mean", dims.d_v, mu0.len()));
    }
    let mut cache: Vec<CgDynamics> = Vec::new();
    let mut cache_start = 0;
    let dynamics = |n: usize| -> Result<CgDynamics> {
        if n < cache_start || n >= cache_start + cache.len() {
            let count = CHUNK.min(u1.rows() - n);
            cache = dynamics_rows(model, &u1.slice_rows(n, count))?;
            cache_start = n;
        }
        Ok(cache[n - cache_start].clone())
    };
    let (mu_v, var_v, cov) = run_filter(
        dynamics,
        u1,
        dt,
        model.sigma1(),
        &model.sigma2(),
        mu0,
        r0,
        keep_cov,
    )?;
    let mut mu_u2 = Matrix::zeros(mu_v.rows(), dims.d_u2);
    for start in (0..mu_v.rows()).step_by(CHUNK) {
        let count = CHUNK.min(mu_v.rows() - start);
        let dec = crate::models::decode(model, &mu_v.slice_rows(start, count))?;
        for r in 0..count {
            mu_u2.row_mut(start + r).copy_from_slice(dec.row(r));
        }
    }
    Ok(GaussianPosterior {
        times: (0..mu_v.rows()).map(|n| t0 + n as f64 * dt).collect(),
        mu_v,
        var_v,
        cov,
        mu_u2,
    })
}

/// Differentiable filter unroll on `tape`. Returns the posterior mean as a
/// `T x d_v` variable; row 0 is `mu0`. The covariance recursion stays on the
/// tape unless `detach_cov` is set; the eigenvalue floor passes gradients
/// through unchanged.
#[allow(clippy::too_many_arguments)]
pub fn cg_filter_tape(
    tape: &mut Tape,
    coefs: &CoefSeries,
    u1: &Matrix,
    dt: f64,
    sigma1: &[f64],
    sigma2: &[f64],
    mu0: Var,
    r0: Var,
    detach_cov: bool,
) -> Result<Var> {
    let t = u1.rows();
    let dv = coefs.dims.d_v;
    if coefs.rows + 1 < t {
        return Err(Error::dim("coefficient rows", t - 1, coefs.rows));
    }
    let inv_var1: Rc<[f64]> = inverse_obs_variance(sigma1)?.into();
    let var2: Vec<f64> = sigma2.iter().map(|s| s * s).collect();
    let q_full = tape.constant(Matrix::from_diag(
        &var2.iter().map(|v| v * dt).collect::<Vec<_>>(),
    ));
    let mut mu = mu0;
    let mut r = r0;
    let mut rows = Vec::with_capacity(t);
    rows.push(mu);
    for n in 1..t {
        let c = coefs.step(tape, n - 1);
        // row-vector forms: mu is 1 x dv
        let f1 = tape.reshape(c.f1, 1, coefs.dims.d_u1);
        let f2 = tape.reshape(c.f2, 1, dv);
        let du1: Vec<f64> = u1
            .row(n)
            .iter()
            .zip(u1.row(n - 1))
            .map(|(a, b)| a - b)
            .collect();
        let k_sub = substeps(
            tape.value(c.g1),
            tape.value(c.g2),
            &inv_var1,
            tape.value(r),
            dt,
        );
        let h = dt / k_sub as f64;
        let q = if k_sub == 1 {
            q_full
        } else {
            tape.constant(Matrix::from_diag(
                &var2.iter().map(|v| v * h).collect::<Vec<_>>(),
            ))
        };
        let obs = tape.constant(Matrix::row_vector(
            &du1.iter().map(|x| x / k_sub as f64).collect::<Vec<_>>(),
        ));
        for _ in 0..k_sub {
            let s = tape.matmul(c.g1, r);
            let rg1 = tape.transpose(s);
            let k = tape.scale_cols(rg1, inv_var1.clone());
            let g1mu = tape.matmul_bt(mu, c.g1);
            let pred = tape.add(f1, g1mu);
            let pred = tape.scale(pred, h);
            let innov = tape.sub(obs, pred);
            let gain = tape.matmul_bt(innov, k);
            let g2mu = tape.matmul_bt(mu, c.g2);
            let drift = tape.add(f2, g2mu);
            let drift = tape.scale(drift, h);
            let m = tape.add(mu, drift);
            mu = tape.add(m, gain);

            if detach_cov {
                // Covariance off the tape: only its value feeds the gain.
                let next = covariance_step(
                    tape.value(c.g1),
                    tape.value(c.g2),
                    tape.value(k),
                    tape.value(s),
                    &var2,
                    tape.value(r),
                    h,
                    n,
                )?;
                r = tape.constant(next);
                continue;
            }
            let g2r = tape.matmul(c.g2, r);
            let rg2 = tape.matmul_bt(r, c.g2);
            let ks = tape.matmul(k, s);
            let lyap = tape.add(g2r, rg2);
            let rate = tape.sub(lyap, ks);
            let rate = tape.scale(rate, h);
            let next = tape.add(r, rate);
            let next = tape.add(next, q);
            let nt = tape.transpose(next);
            let sym = tape.add(next, nt);
            let mut next = tape.scale(sym, 0.5);
            if let Some(floored) = floor_covariance(tape.value(next), n)? {
                next = tape.pass_through(next, floored);
            }
            r = next;
        }
        if !tape.value(mu).is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite posterior mean at step {n}"
            )));
        }
        rows.push(mu);
    }
    Ok(tape.stack_rows(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LinearCgModel;

    /// Discrete Kalman filter on the Euler-discretized linear system:
    /// `v[n+1] = (1 + a dt) v[n] + b dt + noise(q dt)`,
    /// `y[n] = u1[n+1]-u1[n] = (f + g v[n]) dt + noise(s^2 dt)`.
    /// The observation at `n` informs `v[n]`, which is then propagated.
    fn kalman_scalar(
        (f1, g1, f2, g2, s1, s2): (f64, f64, f64, f64, f64, f64),
        u1: &[f64],
        dt: f64,
        m0: f64,
        p0: f64,
    ) -> Vec<(f64, f64)> {
        let mut out = vec![(m0, p0)];
        let (mut m, mut p) = (m0, p0);
        for n in 1..u1.len() {
            let y = u1[n] - u1[n - 1];
            let h = g1 * dt;
            let r = s1 * s1 * dt;
            // joint prediction of (v[n+1], y) given v[n] ~ N(m, p)
            let a = 1.0 + g2 * dt;
            let mean_v = a * m + f2 * dt;
            let mean_y = f1 * dt + h * m;
            let cov_vy = a * p * h;
            let var_y = h * p * h + r;
            let k = cov_vy / var_y;
            m = mean_v + k * (y - mean_y);
            p = a * p * a + s2 * s2 * dt - k * cov_vy;
            out.push((m, p));
        }
        out
    }

    fn linear_2latent() -> LinearCgModel {
        let dynamics = CgDynamics {
            f1: vec![0.1],
            g1: Matrix::row_vector(&[1.0, -0.5]),
            f2: vec![0.2, 0.0],
            g2: Matrix::from_rows(&[vec![-1.0, 0.5], vec![-0.3, -0.7]]).unwrap(),
        };
        LinearCgModel::new(dynamics, vec![0.5], vec![0.4, 0.3]).unwrap()
    }

    fn synthetic_obs(n: usize, dt: f64) -> Vec<f64> {
        (0..n)
            .map(|i| (i as f64 * dt).sin() + 0.1 * (7.0 * i as f64 * dt).cos())
            .collect()
    }

    #[test]
    fn scalar_filter_matches_discrete_kalman() {
        let p = (0.2, 1.5, 0.3, -0.8, 0.4, 0.6);
        let m = LinearCgModel::scalar(p.0, p.1, p.2, p.3, p.4, p.5);
        let dt = 1e-4;
        let obs = synthetic_obs(20001, dt);
        let u1 = Matrix::column(&obs);
        let post = cg_filter(&m, &u1, dt, 0.0, &[0.5], &Matrix::identity(1)).unwrap();
        let kf = kalman_scalar(p, &obs, dt, 0.5, 1.0);
        let mut worst = 0.0f64;
        for (n, (mk, pk)) in kf.iter().enumerate() {
            worst = worst.max((post.mu_v[(n, 0)] - mk).abs());
            worst = worst.max((post.cov[n][(0, 0)] - pk).abs());
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn decoupled_observation_gives_pure_lyapunov() {
        let m = LinearCgModel::scalar(0.0, 0.0, 1.0, -2.0, 0.5, 0.3);
        let dt = 1e-3;
        let u1 = Matrix::column(&synthetic_obs(1001, dt));
        let post = cg_filter(&m, &u1, dt, 0.0, &[0.0], &Matrix::filled(1, 1, 0.2)).unwrap();
        let (mut mu, mut r) = (0.0, 0.2);
        for n in 1..1001 {
            mu += (1.0 - 2.0 * mu) * dt;
            r += (-4.0 * r + 0.09) * dt;
            assert!((post.mu_v[(n, 0)] - mu).abs() < 1e-12);
            assert!((post.cov[n][(0, 0)] - r).abs() < 1e-12);
        }
    }

    #[test]
    fn uninformative_observations_approach_decoupled_case() {
        let dt = 1e-3;
        let u1 = Matrix::column(&synthetic_obs(2001, dt));
        let run = |g1: f64, s1: f64| {
            let m = LinearCgModel::scalar(0.1, g1, 0.5, -1.0, s1, 0.4);
            cg_filter(&m, &u1, dt, 0.0, &[0.0], &Matrix::identity(1)).unwrap()
        };
        let reference = run(0.0, 1.0);
        let mut prev = f64::INFINITY;
        for s1 in [1.0, 10.0, 100.0, 1e4] {
            let p = run(1.0, s1);
            let err = p.mu_v.sub(&reference.mu_v).max_abs();
            assert!(err < prev, "{s1}: {err} vs {prev}");
            prev = err;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn zero_sigma1_is_a_configuration_error() {
        let m = LinearCgModel::scalar(0.0, 1.0, 0.0, -1.0, 0.0, 1.0);
        let u1 = Matrix::column(&[0.0, 1.0, 2.0]);
        let r = cg_filter(&m, &u1, 0.1, 0.0, &[0.0], &Matrix::identity(1));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn covariance_floor() {
        let ok = Matrix::identity(3);
        assert!(floor_covariance(&ok, 0).unwrap().is_none());
        let slight = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1e-9]]).unwrap();
        let f = floor_covariance(&slight, 0).unwrap().unwrap();
        assert!((f[(1, 1)] - EIG_FLOOR).abs() < 1e-15);
        assert!(f[(0, 1)].abs() < 1e-15);
        let bad = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1e-3]]).unwrap();
        assert!(matches!(
            floor_covariance(&bad, 7),
            Err(Error::Instability { step: 7, .. })
        ));
    }

    #[test]
    fn tape_filter_matches_numeric_filter() {
        let m = linear_2latent();
        let dt = 0.01;
        let u1 = Matrix::column(&synthetic_obs(301, dt));
        let r0 = Matrix::from_rows(&[vec![0.3, 0.1], vec![0.1, 0.2]]).unwrap();
        let post = cg_filter(&m, &u1, dt, 0.0, &[0.1, -0.2], &r0).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let x = tape.constant(u1.slice_rows(0, 300));
        let series = bound.coefficients(&mut tape, x);
        let mu0 = tape.constant(Matrix::row_vector(&[0.1, -0.2]));
        let r0v = tape.constant(r0);
        let mu = cg_filter_tape(
            &mut tape,
            &series,
            &u1,
            dt,
            m.sigma1(),
            &m.sigma2(),
            mu0,
            r0v,
            false,
        )
        .unwrap();
        let diff = tape.value(mu).sub(&post.mu_v).max_abs();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn benign_interval_is_a_single_step() {
        let m = linear_2latent();
        let r = Matrix::identity(2);
        assert_eq!(
            substeps(&m.dynamics.g1, &m.dynamics.g2, &[1.0], &r, 0.01),
            1
        );
    }

    #[test]
    fn stiff_interval_is_substepped_and_converges() {
        // dt * g1^2 / s1^2 * R = 100: a single Euler step drives R negative.
        let m = LinearCgModel::scalar(0.0, 10.0, 0.0, -1.0, 0.1, 0.5);
        let d = &m.dynamics;
        let inv = [100.0];
        let r0 = Matrix::identity(1);
        let k = substeps(&d.g1, &d.g2, &inv, &r0, 0.01);
        assert!(k > 100, "{k}");
        assert!(matches!(
            euler_step(d, &inv, &[0.25], &[0.0], &r0, &[0.05], 0.01, 1),
            Err(Error::Instability { .. })
        ));
        let (mu, r) = filter_step(d, &inv, &[0.25], &[0.0], &r0, &[0.05], 0.01, 1).unwrap();
        // reference: the same interval cut into 10^5 plain Euler steps
        let n = 100_000;
        let (mut mu_ref, mut r_ref) = (vec![0.0], r0.clone());
        for _ in 0..n {
            (mu_ref, r_ref) = euler_step(
                d,
                &inv,
                &[0.25],
                &mu_ref,
                &r_ref,
                &[0.05 / n as f64],
                0.01 / n as f64,
                1,
            )
            .unwrap();
        }
        assert!(r[(0, 0)] > 0.0);
        assert!(
            (r[(0, 0)] - r_ref[(0, 0)]).abs() < 0.05 * r_ref[(0, 0)],
            "{r:?} vs {r_ref:?}"
        );
        assert!(
            (mu[0] - mu_ref[0]).abs() < 0.05 * mu_ref[0].abs().max(1e-3),
            "{mu:?} vs {mu_ref:?}"
        );
    }

    #[test]
    fn tape_filter_matches_numeric_filter_when_stiff() {
        let m = LinearCgModel::scalar(0.1, 10.0, 0.0, -1.0, 0.1, 0.5);
        let dt = 0.01;
        let u1 = Matrix::column(&synthetic_obs(41, dt));
        let r0 = Matrix::identity(1);
        let post = cg_filter(&m, &u1, dt, 0.0, &[0.0], &r0).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let x = tape.constant(u1.slice_rows(0, 40));
        let series = bound.coefficients(&mut tape, x);
        let mu0 = tape.constant(Matrix::row_vector(&[0.0]));
        let r0v = tape.constant(r0);
        let mu = cg_filter_tape(
            &mut tape,
            &series,
            &u1,
            dt,
            m.sigma1(),
            &m.sigma2(),
            mu0,
            r0v,
            false,
        )
        .unwrap();
        let diff = tape.value(mu).sub(&post.mu_v).max_abs();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn detached_covariance_keeps_values_and_shrinks_tape() {
        let m = LinearCgModel::new(
            CgDynamics {
                f1: vec![0.1],
                g1: Matrix::from_rows(&[vec![3.0, -1.0]]).unwrap(),
                f2: vec![0.2, 0.0],
                g2: Matrix::from_rows(&[vec![-1.0, 0.5], vec![-0.5, -0.8]]).unwrap(),
            },
            vec![0.2],
            vec![0.5, 0.4],
        )
        .unwrap();
        let dt = 0.01;
        let u1 = Matrix::column(&synthetic_obs(61, dt));
        let post = cg_filter(&m, &u1, dt, 0.0, &[0.0, 0.0], &Matrix::identity(2)).unwrap();
        let run = |detach: bool| {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape, false);
            let x = tape.constant(u1.slice_rows(0, 60));
            let series = bound.coefficients(&mut tape, x);
            let mu0 = tape.constant(Matrix::row_vector(&[0.0, 0.0]));
            let r0 = tape.constant(Matrix::identity(2));
            let mu = cg_filter_tape(
                &mut tape,
                &series,
                &u1,
                dt,
                m.sigma1(),
                &m.sigma2(),
                mu0,
                r0,
                detach,
            )
            .unwrap();
            (tape.value(mu).clone(), tape.len())
        };
        let (full, full_len) = run(false);
        let (detached, detached_len) = run(true);
        assert!(full.sub(&post.mu_v).max_abs() < 1e-12);
        assert!(detached.sub(&post.mu_v).max_abs() < 1e-12);
        // the covariance recursion no longer records nodes per step
        assert!(
            full_len - detached_len >= 10 * 60,
            "{detached_len} vs {full_len}"
        );
    }

    #[test]
    fn lean_filter_keeps_last_covariance_only() {
        let m = LinearCgModel::scalar(0.2, 1.0, 0.5, -1.0, 0.5, 0.8);
        let u1 = Matrix::column(&synthetic_obs(30, 0.01));
        let r0 = Matrix::identity(1);
        let full = cg_filter(&m, &u1, 0.01, 0.0, &[0.0], &r0).unwrap();
        let lean = cg_filter_with(&m, &u1, 0.01, 0.0, &[0.0], &r0, false).unwrap();
        assert_eq!(full.cov.len(), 30);
        assert_eq!(lean.cov.len(), 1);
        assert_eq!(lean.cov[0], full.cov[29]);
        assert_eq!(lean.mu_v, full.mu_v);
        assert_eq!(lean.var_v, full.var_v);
    }
}
