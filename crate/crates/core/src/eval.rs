//! Error metrics, error tables and the evaluation protocol.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::assimilation::{
    cg_filter_with, enkbf, EnkbfConfig, GaussianPosterior, PartitionedSystem,
};
use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::models::{dnn_forecast, encode, forecast_batch, AnyModel, Checkpoint, ModelKind};
use crate::systems::{Normalization, SdeSystem, Trajectory, BLOWUP_NORM};
use crate::training::DA_INIT_VAR;

fn column_stats(x: &Matrix, c: usize) -> (f64, f64) {
    let n = x.rows() as f64;
    let mean = (0..x.rows()).map(|r| x[(r, c)]).sum::<f64>() / n;
    let var = (0..x.rows())
        .map(|r| (x[(r, c)] - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

/// Mean over columns of `RMSE / std(truth)`.
pub fn nrmse(truth: &Matrix, approx: &Matrix) -> Result<f64> {
    if truth.shape() != approx.shape() {
        return Err(Error::dim("nrmse shapes", truth.rows(), approx.rows()));
    }
    if truth.rows() == 0 || truth.cols() == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let n = truth.rows() as f64;
    let mut acc = 0.0;
    for c in 0..truth.cols() {
        let (_, std) = column_stats(truth, c);
        if !(std > 0.0) {
            return Err(Error::DegenerateMetric { column: c });
        }
        let mse = (0..truth.rows())
            .map(|r| (truth[(r, c)] - approx[(r, c)]).powi(2))
            .sum::<f64>()
            / n;
        acc += mse.sqrt() / std;
    }
    Ok(acc / truth.cols() as f64)
}

/// Pearson correlation.
pub fn correlation(truth: &[f64], approx: &[f64]) -> Result<f64> {
    if truth.len() != approx.len() {
        return Err(Error::dim("correlation lengths", truth.len(), approx.len()));
    }
    let n = truth.len() as f64;
    let ma = truth.iter().sum::<f64>() / n;
    let mb = approx.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in truth.iter().zip(approx) {
        sab += (a - ma) * (b - mb);
        saa += (a - ma) * (a - ma);
        sbb += (b - mb) * (b - mb);
    }
    if !(saa > 0.0) {
        return Err(Error::DegenerateMetric { column: 0 });
    }
    if !(sbb > 0.0) {
        return Err(Error::DegenerateMetric { column: 1 });
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// `(truth, forecast)` pairs for a forecast that keeps the value from
/// `lead` steps earlier.
pub fn persistence_forecast(series: &Matrix, lead: usize) -> Result<(Matrix, Matrix)> {
    if lead >= series.rows() {
        return Err(Error::InsufficientData {
            needed: lead + 1,
            got: series.rows(),
        });
    }
    let n = series.rows() - lead;
    Ok((series.slice_rows(lead, n), series.slice_rows(0, n)))
}

/// Fraction of entries with `|truth - mean| <= k * std`.
pub fn coverage(truth: &Matrix, mean: &Matrix, std: &Matrix, k: f64) -> Result<f64> {
    if truth.shape() != mean.shape() || truth.shape() != std.shape() {
        return Err(Error::dim("coverage shapes", truth.rows(), mean.rows()));
    }
    let inside = truth
        .data()
        .iter()
        .zip(mean.data())
        .zip(std.data())
        .filter(|((t, m), s)| (*t - *m).abs() <= k * **s)
        .count();
    Ok(inside as f64 / truth.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cell {
    Value(f64),
    /// The method has no such result by design.
    Unavailable,
    /// The artifact needed to compute it is missing.
    Missing,
}

impl Cell {
    pub fn render(&self) -> String {
        match self {
            Cell::Value(v) => sci4(*v),
            Cell::Unavailable => "---".into(),
            Cell::Missing => "missing".into(),
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Cell::Value(v) => Some(*v),
            _ => None,
        }
    }
}

/// Scientific notation with four significant digits and a signed two-digit
/// exponent, e.g. `2.839e-01`.
pub fn sci4(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let s = format!("{x:.3e}");
    let (mant, exp) = s.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mant}e{sign}{:02}", exp.abs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRow {
    pub label: String,
    pub forecast: Cell,
    pub da: Cell,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorTable {
    pub rows: Vec<ErrorRow>,
    pub lead_steps: usize,
    pub da_steps: usize,
}

impl ErrorTable {
    pub fn has_missing(&self) -> bool {
        self.rows
            .iter()
            .any(|r| r.forecast == Cell::Missing || r.da == Cell::Missing)
    }

    pub fn row(&self, label: &str) -> Option<&ErrorRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_text(&self) -> String {
        let w0 = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(0)
            .max(6);
        let mut out = format!(
            "# forecast lead {} steps, assimilation over {} steps\n",
            self.lead_steps, self.da_steps
        );
        writeln!(
            out,
            "{:<w0$}  {:>14}  {:>14}",
            "Models", "Forecast Error", "DA Error"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{:<w0$}  {:>14}  {:>14}",
                r.label,
                r.forecast.render(),
                r.da.render()
            )
            .unwrap();
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,forecast_error,da_error\n");
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.label, r.forecast.render(), r.da.render()).unwrap();
        }
        out
    }
}

pub fn table_label(kind: Option<ModelKind>) -> &'static str {
    match kind {
        None => "True Model",
        Some(ModelKind::Cgkn) | Some(ModelKind::LocalCgkn) => "CGKN",
        Some(ModelKind::Koopnet) => "Standard KoopNet",
        Some(ModelKind::CgReg) => "CG-Reg",
        Some(ModelKind::Dnn) => "DNN",
        Some(ModelKind::Linear) => "Linear",
    }
}

/// A trained model with the state normalization it was trained under.
#[derive(Clone, Debug)]
pub struct Surrogate {
    pub model: AnyModel,
    pub normalization: Option<Normalization>,
    pub obs_idx: Vec<usize>,
    pub unobs_idx: Vec<usize>,
}

impl Surrogate {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            model: ck.model()?,
            normalization: ck.metadata.normalization.clone(),
            obs_idx: ck.metadata.obs_idx.clone(),
            unobs_idx: ck.metadata.unobs_idx.clone(),
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }

    fn to_model(&self, x: &Matrix) -> Matrix {
        match &self.normalization {
            Some(n) => n.apply(x),
            None => x.clone(),
        }
    }

    fn to_physical(&self, z: &Matrix) -> Matrix {
        match &self.normalization {
            Some(n) => n.invert(z),
            None => z.clone(),
        }
    }

    fn split(&self, x: &Matrix) -> (Matrix, Matrix) {
        (x.select_cols(&self.obs_idx), x.select_cols(&self.unobs_idx))
    }

    fn join(&self, u1: &Matrix, u2: &Matrix) -> Matrix {
        let mut x = Matrix::zeros(u1.rows(), self.obs_idx.len() + self.unobs_idx.len());
        for r in 0..u1.rows() {
            for (k, &i) in self.obs_idx.iter().enumerate() {
                x[(r, i)] = u1[(r, k)];
            }
            for (k, &i) in self.unobs_idx.iter().enumerate() {
                x[(r, i)] = u2[(r, k)];
            }
        }
        x
    }

    /// Deterministic forecasts, physical units in and out. Returns the states
    /// at every step `0..=n_steps`.
    pub fn forecast_paths(&self, origins: &Matrix, n_steps: usize, dt: f64) -> Result<Vec<Matrix>> {
        let z = self.to_model(origins);
        let paths = match &self.model {
            AnyModel::Dnn(m) => dnn_forecast(m, &z, n_steps, dt, None)?,
            other => {
                let cg = other.as_cg().expect("conditional-Gaussian model");
                let (u1, u2) = self.split(&z);
                let p = forecast_batch(cg, &u1, &u2, n_steps, dt, None)?;
                p.u1.iter()
                    .zip(&p.u2)
                    .map(|(a, b)| self.join(a, b))
                    .collect()
            }
        };
        Ok(paths.iter().map(|p| self.to_physical(p)).collect())
    }

    /// States `n_steps` ahead of each origin.
    pub fn forecast(&self, origins: &Matrix, n_steps: usize, dt: f64) -> Result<Matrix> {
        Ok(self
            .forecast_paths(origins, n_steps, dt)?
            .pop()
            .expect("at least the origin"))
    }

    /// Analytic filter on the observed part of `traj` from `(phi(0), 0.01 I)`.
    /// `mu_u2` is returned in physical units; `var_v` stays in latent units.
    pub fn assimilate(&self, traj: &Trajectory) -> Result<GaussianPosterior> {
        let cg = self
            .model
            .as_cg()
            .ok_or_else(|| Error::Config("the black-box model has no analytic filter".into()))?;
        let z = self.to_model(&traj.states);
        let (u1, _) = self.split(&z);
        let dv = cg.dims().d_v;
        let mu0 = encode(cg, &Matrix::zeros(1, self.unobs_idx.len()))?;
        let r0 = Matrix::identity(dv).scale(DA_INIT_VAR);
        let mut post = cg_filter_with(cg, &u1, traj.dt, traj.t0, mu0.row(0), &r0, false)?;
        if let Some(n) = &self.normalization {
            post.mu_u2 = n.select(&self.unobs_idx).invert(&post.mu_u2);
        }
        Ok(post)
    }

    /// Latent variances mapped to physical standard deviations of `u2` when
    /// the decoder is the identity (regression models).
    pub fn identity_decoder_std(&self, post: &GaussianPosterior) -> Option<Matrix> {
        if self.kind() != ModelKind::CgReg {
            return None;
        }
        let mut s = post.var_v.map(|v| v.max(0.0).sqrt());
        if let Some(n) = &self.normalization {
            let k = n.select(&self.unobs_idx).std;
            for r in 0..s.rows() {
                s.row_mut(r).iter_mut().zip(&k).for_each(|(x, k)| *x *= k);
            }
        }
        Some(s)
    }
}

/// Forecast origins: every `stride`-th test row that admits `lead` steps.
pub fn origin_rows(len: usize, lead: usize, stride: usize) -> Vec<usize> {
    if len <= lead {
        return Vec::new();
    }
    (0..len - lead).step_by(stride.max(1)).collect()
}

/// Forecast NRMSE over all state dimensions at `lead` stored steps.
pub fn forecast_error(
    predict: impl Fn(&Matrix) -> Result<Matrix>,
    test: &Trajectory,
    lead: usize,
    stride: usize,
) -> Result<f64> {
    let origins = origin_rows(test.len(), lead, stride);
    if origins.is_empty() {
        return Err(Error::InsufficientData {
            needed: lead + 1,
            got: test.len(),
        });
    }
    let x0 = test.states.select_rows(&origins);
    let targets: Vec<usize> = origins.iter().map(|o| o + lead).collect();
    let truth = test.states.select_rows(&targets);
    let pred = predict(&x0)?;
    nrmse(&truth, &pred)
}

/// Mean of `members` Euler–Maruyama runs of the true system from each
/// origin, `steps` steps of `dt`.
pub fn ensemble_mean_forecast(
    sys: &SdeSystem,
    origins: &Matrix,
    steps: usize,
    dt: f64,
    members: usize,
    seed: u64,
) -> Result<Matrix> {
    let d = sys.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sq = dt.sqrt();
    let mut out = Matrix::zeros(origins.rows(), d);
    let mut x = vec![0.0; d];
    let mut dx = vec![0.0; d];
    for o in 0..origins.rows() {
        for _ in 0..members {
            x.copy_from_slice(origins.row(o));
            for step in 0..steps {
                sys.drift_into(&x, &mut dx);
                for i in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x[i] += dx[i] * dt + sys.noise_diag[i] * sq * z;
                }
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(norm <= BLOWUP_NORM) {
                    return Err(Error::BlowUp {
                        step: step + 1,
                        norm,
                    });
                }
            }
            for (acc, v) in out.row_mut(o).iter_mut().zip(&x) {
                *acc += v / members as f64;
            }
        }
    }
    Ok(out)
}

/// Settings shared by every row of an error table.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub lead_steps: usize,
    pub origin_stride: usize,
    pub warmup: usize,
    /// EnKBF particles for the true model.
    pub ensemble: usize,
    /// Members of the true-model forecast ensemble.
    pub forecast_ensemble: usize,
    /// Simulation step of the true model.
    pub sim_dt: f64,
    pub seed: u64,
}

/// DA NRMSE of decoded means against the true unobserved states, rows after
/// the warm-up.
pub fn da_error(post: &GaussianPosterior, test: &Trajectory, warmup: usize) -> Result<f64> {
    let truth = crate::assimilation::da_warmup_split(&test.u2(), warmup)?;
    let mean = crate::assimilation::da_warmup_split(&post.mu_u2, warmup)?;
    nrmse(&truth, &mean)
}

/// EnKBF of the true system on the observed test series, initialized at the
/// training climatology of the unobserved variables.
pub fn true_model_da(
    sys: &SdeSystem,
    train: &Trajectory,
    test: &Trajectory,
    ensemble: usize,
    seed: u64,
) -> Result<GaussianPosterior> {
    let ps = PartitionedSystem::new(sys, &test.obs_idx, &test.unobs_idx)?;
    let clim = Normalization::fit(&train.u2())?;
    let cfg = EnkbfConfig::new(ensemble, seed, clim.mean, clim.std);
    enkbf(&ps, &test.u1(), test.dt, test.t0, &cfg)
}

/// Forecast and DA errors of the true model and each listed surrogate.
/// `None` entries are models whose checkpoint is missing.
pub fn evaluate(
    sys: &SdeSystem,
    train: &Trajectory,
    test: &Trajectory,
    models: &[(ModelKind, Option<Surrogate>)],
    s: &EvalSettings,
) -> Result<ErrorTable> {
    let stride = crate::systems::subsample_ratio(s.sim_dt, test.dt)?;
    let mut rows = Vec::new();
    let truth_forecast = forecast_error(
        |x0| {
            ensemble_mean_forecast(
                sys,
                x0,
                s.lead_steps * stride,
                s.sim_dt,
                s.forecast_ensemble,
                s.seed,
            )
        },
        test,
        s.lead_steps,
        s.origin_stride,
    )?;
    let truth_da = da_error(
        &true_model_da(sys, train, test, s.ensemble, s.seed)?,
        test,
        s.warmup,
    )?;
    rows.push(ErrorRow {
        label: table_label(None).into(),
        forecast: Cell::Value(truth_forecast),
        da: Cell::Value(truth_da),
    });
    for (kind, surrogate) in models {
        let label = table_label(Some(*kind)).to_string();
        let Some(m) = surrogate else {
            rows.push(ErrorRow {
                label,
                forecast: Cell::Missing,
                da: if *kind == ModelKind::Dnn {
                    Cell::Unavailable
                } else {
                    Cell::Missing
                },
            });
            continue;
        };
        let f = forecast_error(
            |x0| m.forecast(x0, s.lead_steps, test.dt),
            test,
            s.lead_steps,
            s.origin_stride,
        );
        let f = match f {
            Ok(v) => Cell::Value(v),
            Err(Error::BlowUp { .. }) | Err(Error::Numeric(_)) => Cell::Value(f64::INFINITY),
            Err(e) => return Err(e),
        };
        let da = if m.kind() == ModelKind::Dnn {
            Cell::Unavailable
        } else {
            match m
                .assimilate(test)
                .and_then(|p| da_error(&p, test, s.warmup))
            {
                Ok(v) => Cell::Value(v),
                Err(Error::Instability { .. }) | Err(Error::Numeric(_)) => {
                    Cell::Value(f64::INFINITY)
                }
                Err(e) => return Err(e),
            }
        };
        rows.push(ErrorRow {
            label,
            forecast: f,
            da,
        });
    }
    Ok(ErrorTable {
        rows,
        lead_steps: s.lead_steps,
        da_steps: test.len().saturating_sub(s.warmup),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::make_linear;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn nrmse_basics() {
        let x = random(50, 3, 0);
        assert_eq!(nrmse(&x, &x).unwrap(), 0.0);
        let mut y = x.clone();
        for c in 0..3 {
            let (_, s) = column_stats(&x, c);
            for r in 0..50 {
                y[(r, c)] += s;
            }
        }
        assert!((nrmse(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nrmse_matches_double_loop() {
        let x = random(5, 3, 1);
        let y = random(5, 3, 2);
        let mut total = 0.0;
        for c in 0..3 {
            let mut mean = 0.0;
            for r in 0..5 {
                mean += x[(r, c)];
            }
            mean /= 5.0;
            let (mut var, mut se) = (0.0, 0.0);
            for r in 0..5 {
                var += (x[(r, c)] - mean) * (x[(r, c)] - mean);
                se += (x[(r, c)] - y[(r, c)]) * (x[(r, c)] - y[(r, c)]);
            }
            total += (se / 5.0).sqrt() / (var / 5.0).sqrt();
        }
        assert!((nrmse(&x, &y).unwrap() - total / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nrmse_names_degenerate_column() {
        let mut x = random(6, 3, 3);
        for r in 0..6 {
            x[(r, 1)] = 4.0;
        }
        assert!(matches!(
            nrmse(&x, &x),
            Err(Error::DegenerateMetric { column: 1 })
        ));
    }

    #[test]
    fn correlation_cases() {
        let a: Vec<f64> = random(40, 1, 4).into_data();
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        let aff: Vec<f64> = a.iter().map(|x| 3.0 * x - 1.0).collect();
        assert!((correlation(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((correlation(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((correlation(&a, &aff).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            correlation(&[1.0; 5], &a[..5]),
            Err(Error::DegenerateMetric { .. })
        ));
    }

    #[test]
    fn persistence_cases() {
        let x = random(20, 2, 5);
        let (t, f) = persistence_forecast(&x, 0).unwrap();
        assert_eq!(t, f);
        let c = Matrix::filled(20, 1, 2.0);
        let (t, f) = persistence_forecast(&c, 3).unwrap();
        assert!(matches!(
            nrmse(&t, &f),
            Err(Error::DegenerateMetric { column: 0 })
        ));
        assert!(persistence_forecast(&x, 20).is_err());
    }

    #[test]
    fn persistence_correlation_decays_for_ar1() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut x = vec![0.0; 20000];
        for n in 1..x.len() {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[n] = 0.95 * x[n - 1] + z;
        }
        let m = Matrix::column(&x);
        let mut prev = 1.0;
        for lead in [1, 5, 10, 20, 40] {
            let (t, f) = persistence_forecast(&m, lead).unwrap();
            let c = correlation(t.data(), f.data()).unwrap();
            assert!(c < prev, "{lead}: {c}");
            prev = c;
        }
    }

    #[test]
    fn scientific_format() {
        assert_eq!(sci4(0.28389), "2.839e-01");
        assert_eq!(sci4(1.2884), "1.288e+00");
        assert_eq!(sci4(12.0), "1.200e+01");
        assert_eq!(sci4(0.0), "0.000e+00");
    }

    #[test]
    fn table_rendering() {
        let t = ErrorTable {
            rows: vec![
                ErrorRow {
                    label: "CGKN".into(),
                    forecast: Cell::Value(0.28389),
                    da: Cell::Value(0.72776),
                },
                ErrorRow {
                    label: "DNN".into(),
                    forecast: Cell::Missing,
                    da: Cell::Unavailable,
                },
            ],
            lead_steps: 10,
            da_steps: 100,
        };
        let csv = t.to_csv();
        assert_eq!(
            csv,
            "model,forecast_error,da_error\nCGKN,2.839e-01,7.278e-01\nDNN,missing,---\n"
        );
        assert!(t.has_missing());
        assert!(t.to_text().contains("Forecast Error"));
    }

    #[test]
    fn coverage_fraction() {
        let t = Matrix::column(&[0.0, 1.0, 2.0, 3.0]);
        let m = Matrix::zeros(4, 1);
        let s = Matrix::filled(4, 1, 0.5);
        assert_eq!(coverage(&t, &m, &s, 2.0).unwrap(), 0.5);
    }

    #[test]
    fn origins() {
        assert_eq!(origin_rows(10, 3, 1), (0..7).collect::<Vec<_>>());
        assert_eq!(origin_rows(10, 3, 3), vec![0, 3, 6]);
        assert!(origin_rows(3, 3, 1).is_empty());
    }

    #[test]
    fn noiseless_truth_copy_has_zero_forecast_error() {
        let a = Matrix::from_rows(&[vec![-0.1, 1.0], vec![-1.0, -0.1]]).unwrap();
        let sys = make_linear(a, vec![0.0; 2], vec![0.0; 2]).unwrap();
        let path = crate::systems::simulate_strided(&sys, &[1.0, 0.0], 2000, 0.001, 10, 0).unwrap();
        let test = Trajectory::new(0.01, path, vec![0], vec![1]).unwrap();
        let e = forecast_error(
            |x0| ensemble_mean_forecast(&sys, x0, 100, 0.001, 1, 0),
            &test,
            10,
            7,
        )
        .unwrap();
        assert!(e < 1e-12, "{e}");
    }
}
