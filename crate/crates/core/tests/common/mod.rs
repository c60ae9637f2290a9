#![allow(dead_code)]

use cgkn::diffcore::{Matrix, Tape};
use cgkn::models::{CgDynamics, CgModel, CgknModel, CgknSpec, Dims, LinearCgModel};
use cgkn::training::{loss_ae, loss_da, loss_forecast, Window};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const TOY_DT: f64 = 0.05;
pub const TOY_N_S: usize = 3;
pub const TOY_N_L: usize = 5;
pub const TOY_N_B: usize = 1;

pub fn toy_cgkn(seed: u64) -> CgknModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = CgknSpec {
        dims: Dims {
            d_u1: 1,
            d_u2: 2,
            d_v: 3,
        },
        encoder_hidden: vec![5],
        decoder_hidden: vec![5],
        eta_hidden: vec![5],
        sigma2: 0.6,
    };
    let mut m = CgknModel::new(&spec, &mut rng).unwrap();
    m.sigma1 = vec![0.8];
    m
}

/// Smooth random windows of a 3-variable signal split as (x | y, z).
pub fn toy_windows(seed: u64, count: usize, rows: usize) -> Vec<Window> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let phase: [f64; 3] = [
                rng.random_range(0.0..6.0),
                rng.random_range(0.0..6.0),
                rng.random_range(0.0..6.0),
            ];
            let mut u = Matrix::zeros(rows, 3);
            for r in 0..rows {
                let t = r as f64 * TOY_DT;
                for c in 0..3 {
                    u[(r, c)] = (1.0 + 0.3 * c as f64) * (t * (1.0 + c as f64) + phase[c]).sin()
                        + 0.1 * rng.random_range(-1.0..1.0);
                }
            }
            Window {
                u1: u.select_cols(&[0]),
                u2: u.select_cols(&[1, 2]),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Ae,
    U,
    V,
    Da,
}

pub const TERMS: [Term; 4] = [Term::Ae, Term::U, Term::V, Term::Da];

/// One loss term of the toy model, with parameter gradients when
/// `with_grad`.
pub fn toy_loss(
    model: &CgknModel,
    term: Term,
    fw: &[Window],
    dw: &[Window],
    with_grad: bool,
) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, with_grad);
    let l = match term {
        Term::Ae => {
            let rows: Vec<Vec<f64>> = fw
                .iter()
                .flat_map(|w| (0..w.u2.rows()).map(|r| w.u2.row(r).to_vec()))
                .collect();
            loss_ae(
                &mut tape,
                bound.as_ref(),
                &Matrix::from_rows(&rows).unwrap(),
            )
        }
        Term::U => {
            loss_forecast(&mut tape, bound.as_ref(), fw, TOY_N_S, TOY_DT)
                .unwrap()
                .0
        }
        Term::V => {
            loss_forecast(&mut tape, bound.as_ref(), fw, TOY_N_S, TOY_DT)
                .unwrap()
                .1
        }
        Term::Da => loss_da(
            &mut tape,
            bound.as_ref(),
            model.dims(),
            dw,
            TOY_N_B,
            TOY_DT,
            model.sigma1(),
            &model.sigma2(),
            false,
        )
        .unwrap(),
    };
    let value = tape.scalar(l);
    if !with_grad {
        return (value, Vec::new());
    }
    let g = tape.backward(l).unwrap();
    let grads = bound.gradients(&g).unwrap();
    (value, grads)
}

/// Largest relative deviation between tape gradients and central finite
/// differences over every parameter. Entries whose gradient is negligible
/// next to the largest one are compared against that scale instead.
#[allow(clippy::needless_range_loop)]
pub fn gradient_check(seed: u64, term: Term) -> f64 {
    let mut model = toy_cgkn(seed);
    let fw = toy_windows(seed + 100, 4, TOY_N_S + 1);
    let dw = toy_windows(seed + 200, 2, TOY_N_L);
    let (_, grads) = toy_loss(&model, term, &fw, &dw, true);
    let scale = grads.iter().flatten().fold(0.0f64, |a, g| a.max(g.abs()));
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (t, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let orig = model.tensors_mut()[t][i];
            model.tensors_mut()[t][i] = orig + h;
            let (lp, _) = toy_loss(&model, term, &fw, &dw, false);
            model.tensors_mut()[t][i] = orig - h;
            let (lm, _) = toy_loss(&model, term, &fw, &dw, false);
            model.tensors_mut()[t][i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let denom = g[i].abs().max(fd.abs()).max(1e-3 * scale).max(1e-12);
            worst = worst.max((g[i] - fd).abs() / denom);
        }
    }
    worst
}

/// Scalar hidden variable driving a scalar observation.
pub fn scalar_linear() -> LinearCgModel {
    LinearCgModel::scalar(0.2, 1.0, 0.5, -1.0, 0.5, 0.8)
}

/// Two coupled hidden variables, one observation.
pub fn two_latent_linear() -> LinearCgModel {
    LinearCgModel::new(
        CgDynamics {
            f1: vec![0.1],
            g1: Matrix::from_rows(&[vec![1.0, -0.5]]).unwrap(),
            f2: vec![0.3, -0.2],
            g2: Matrix::from_rows(&[vec![-1.0, 0.6], vec![-0.6, -0.8]]).unwrap(),
        },
        vec![0.6],
        vec![0.7, 0.4],
    )
    .unwrap()
}

/// Euler–Maruyama path of a constant-coefficient CG system. Returns the
/// observed series and the hidden one.
pub fn simulate_linear(m: &LinearCgModel, steps: usize, dt: f64, seed: u64) -> (Matrix, Matrix) {
    let d = &m.dynamics;
    let (d1, dv) = (d.f1.len(), d.f2.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u1 = Matrix::zeros(steps + 1, d1);
    let mut v = Matrix::zeros(steps + 1, dv);
    let sq = dt.sqrt();
    for n in 0..steps {
        for i in 0..d1 {
            let drift = d.f1[i] + (0..dv).map(|j| d.g1[(i, j)] * v[(n, j)]).sum::<f64>();
            let z: f64 = StandardNormal.sample(&mut rng);
            u1[(n + 1, i)] = u1[(n, i)] + drift * dt + m.sigma1[i] * sq * z;
        }
        for i in 0..dv {
            let drift = d.f2[i] + (0..dv).map(|j| d.g2[(i, j)] * v[(n, j)]).sum::<f64>();
            let z: f64 = StandardNormal.sample(&mut rng);
            v[(n + 1, i)] = v[(n, i)] + drift * dt + m.sigma2[i] * sq * z;
        }
    }
    (u1, v)
}

fn dm(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
}

/// One-step-ahead discrete Kalman predictor for the Euler discretization
/// `v' = (I + g2 dt) v + f2 dt + w`, `du1 = (f1 + g1 v) dt + e`, with
/// `Cov w = diag(s2^2) dt` and `Cov e = diag(s1^2) dt`. Row `n` of the
/// outputs conditions on increments up to `u1[n] - u1[n-1]`.
pub fn discrete_kalman(
    m: &LinearCgModel,
    u1: &Matrix,
    dt: f64,
    mu0: &[f64],
    r0: &Matrix,
) -> (Vec<Vec<f64>>, Vec<DMatrix<f64>>) {
    let d = &m.dynamics;
    let dv = d.f2.len();
    let a = DMatrix::identity(dv, dv) + dm(&d.g2) * dt;
    let c = dm(&d.g1) * dt;
    let b = nalgebra::DVector::from_column_slice(&d.f2) * dt;
    let c0 = nalgebra::DVector::from_column_slice(&d.f1) * dt;
    let q = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        dv,
        m.sigma2.iter().map(|s| s * s * dt),
    ));
    let r = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        m.sigma1.len(),
        m.sigma1.iter().map(|s| s * s * dt),
    ));
    let mut x = nalgebra::DVector::from_column_slice(mu0);
    let mut p = dm(r0);
    let mut means = vec![x.iter().copied().collect::<Vec<_>>()];
    let mut covs = vec![p.clone()];
    for n in 1..u1.rows() {
        let y = nalgebra::DVector::from_iterator(
            u1.cols(),
            (0..u1.cols()).map(|i| u1[(n, i)] - u1[(n - 1, i)]),
        );
        let s = &c * &p * c.transpose() + &r;
        let k = &a
            * &p
            * c.transpose()
            * s.clone()
                .try_inverse()
                .expect("invertible innovation covariance");
        let innov = y - &c * &x - &c0;
        x = &a * &x + &b + &k * innov;
        p = &a * &p * a.transpose() + &q - &k * s * k.transpose();
        p = (&p + p.transpose()) * 0.5;
        means.push(x.iter().copied().collect());
        covs.push(p.clone());
    }
    (means, covs)
}
