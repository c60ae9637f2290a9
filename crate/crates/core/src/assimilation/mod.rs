//! Posterior estimation of the unobserved state from an observed series.

mod enkbf;
mod filter;
mod uq;

pub use enkbf::{enkbf, EnkbfConfig, EnsembleModel, LatentEnsemble, PartitionedSystem};
pub use filter::{
    cg_filter, cg_filter_tape, cg_filter_with, filter_step, floor_covariance, run_filter, substeps,
    EIG_FAIL, EIG_FLOOR, MAX_SUBSTEPS,
};
pub use uq::{fit_residual_uq, ResidualUqModel, UqFitConfig, MIN_UQ_SAMPLES};

use std::fmt::Write as _;

use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::systems::Normalization;

/// Filtered posterior over time.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub times: Vec<f64>,
    /// `T x d_v` posterior means.
    pub mu_v: Matrix,
    /// `T x d_v` posterior variances (covariance diagonals).
    pub var_v: Matrix,
    /// Full covariances; every step or only the last, depending on the run.
    pub cov: Vec<Matrix>,
    /// `T x d_u2` decoded means.
    pub mu_u2: Matrix,
}

impl GaussianPosterior {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Rows after the first `n_b`; see [`da_warmup_split`].
    pub fn after_warmup(&self, n_b: usize) -> Result<GaussianPosterior> {
        let t = self.len();
        if n_b >= t {
            return Err(Error::InsufficientData {
                needed: n_b + 1,
                got: t,
            });
        }
        let keep = t - n_b;
        let cov = if self.cov.len() == t {
            self.cov[n_b..].to_vec()
        } else {
            self.cov.clone()
        };
        Ok(GaussianPosterior {
            times: self.times[n_b..].to_vec(),
            mu_v: self.mu_v.slice_rows(n_b, keep),
            var_v: self.var_v.slice_rows(n_b, keep),
            cov,
            mu_u2: self.mu_u2.slice_rows(n_b, keep),
        })
    }
}

/// Drops the warm-up: keeps rows `n_b..T` (the `(N_b+1)`-th row onward).
pub fn da_warmup_split(series: &Matrix, n_b: usize) -> Result<Matrix> {
    if n_b >= series.rows() {
        return Err(Error::InsufficientData {
            needed: n_b + 1,
            got: series.rows(),
        });
    }
    Ok(series.slice_rows(n_b, series.rows() - n_b))
}

/// `t, mu_1.., std_1..` with values in physical units when `norm` is given
/// (standard deviations are scaled, not shifted).
pub fn posterior_csv(
    times: &[f64],
    mu: &Matrix,
    std: &Matrix,
    norm: Option<&Normalization>,
) -> Result<String> {
    if mu.shape() != std.shape() || mu.rows() != times.len() {
        return Err(Error::dim("posterior rows", times.len(), mu.rows()));
    }
    let d = mu.cols();
    let (mu, std) = match norm {
        Some(n) => {
            let mut s = std.clone();
            for r in 0..s.rows() {
                s.row_mut(r)
                    .iter_mut()
                    .zip(&n.std)
                    .for_each(|(x, k)| *x *= k);
            }
            (n.invert(mu), s)
        }
        None => (mu.clone(), std.clone()),
    };
    let mut out = String::from("t");
    for i in 1..=d {
        write!(out, ",mu_{i}").unwrap();
    }
    for i in 1..=d {
        write!(out, ",std_{i}").unwrap();
    }
    out.push('\n');
    for (n, t) in times.iter().enumerate() {
        write!(out, "{t:.16e}").unwrap();
        for x in mu.row(n).iter().chain(std.row(n)) {
            write!(out, ",{x:.16e}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_split_edges() {
        let m = Matrix::column(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(da_warmup_split(&m, 0).unwrap(), m);
        assert_eq!(da_warmup_split(&m, 3).unwrap().data(), &[4.0]);
        assert!(da_warmup_split(&m, 4).is_err());
    }

    #[test]
    fn psbse_warmup_is_300_stored_steps() {
        assert_eq!(crate::systems::steps_in(3.0, 0.01), 300);
    }

    #[test]
    fn posterior_csv_layout() {
        let mu = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let std = Matrix::filled(2, 2, 0.5);
        let norm = Normalization {
            mean: vec![1.0, 0.0],
            std: vec![2.0, 4.0],
        };
        let csv = posterior_csv(&[0.0, 0.5], &mu, &std, Some(&norm)).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,mu_1,mu_2,std_1,std_2");
        let row: Vec<f64> = lines
            .nth(1)
            .unwrap()
            .split(',')
            .map(|x| x.parse().unwrap())
            .collect();
        assert_eq!(row, vec![0.5, 5.0, 12.0, 1.0, 2.0]);
    }
}
