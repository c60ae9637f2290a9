//! Losses, noise estimation and the two-stage optimizer loop.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assimilation::cg_filter_tape;
use crate::diffcore::{clip_global_norm, Adam, CosineSchedule, Matrix, MlpVars, Tape, Var};
use crate::error::{Error, Result};
use crate::models::{drift_batch, encode, BoundCg, CgModel, Dims, DnnModel};
use crate::systems::forward_differences;

/// Losses above this abort training.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ae: f64,
    pub u: f64,
    pub v: f64,
    pub da: f64,
}

impl LossWeights {
    /// `1/d_u2` for the autoencoder and DA terms, `1/d_u` for the forecasts.
    pub fn defaults(dims: Dims) -> Self {
        let d2 = dims.d_u2 as f64;
        let du = dims.d_u() as f64;
        Self {
            ae: 1.0 / d2,
            u: 1.0 / du,
            v: 1.0 / du,
            da: 1.0 / d2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("ae", self.ae),
            ("u", self.u),
            ("v", self.v),
            ("da", self.da),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight `{name}` must be nonnegative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    /// Forecast steps per window.
    pub n_s: usize,
    /// Rows per assimilation window.
    pub n_l: usize,
    /// Warm-up rows excluded from the assimilation loss.
    pub n_b: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Optimizer steps per epoch.
    pub batches_per_epoch: usize,
    /// Forecast windows per step.
    pub batch_size: usize,
    /// Assimilation windows per step (stage 2).
    pub da_windows: usize,
    pub lr0: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Stop gradients through the covariance recursion.
    pub detach_cov: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            n_s: 10,
            n_l: 500,
            n_b: 100,
            epochs_stage1: 500,
            epochs_stage2: 500,
            batches_per_epoch: 1,
            batch_size: 256,
            da_windows: 16,
            lr0: 1e-3,
            clip_norm: 10.0,
            seed: 0,
            detach_cov: false,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_s", self.n_s),
            ("n_l", self.n_l),
            ("batches_per_epoch", self.batches_per_epoch),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be at least 1")));
            }
        }
        if self.n_b >= self.n_l {
            return Err(Error::Config(format!(
                "warm-up n_b = {} must be below n_l = {}",
                self.n_b, self.n_l
            )));
        }
        if !(self.lr0 > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config(
                "learning rate and clip norm must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Loss terms of one evaluation; `l_da` is absent when the DA term is off.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub l_ae: f64,
    pub l_u: f64,
    pub l_v: f64,
    pub l_da: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub report: LossReport,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,total,l_ae,l_u,l_v,l_da,lr";

/// One CSV line (no newline) in [`LOG_HEADER`] order.
pub fn log_line(e: &EpochLog) -> String {
    let r = &e.report;
    let da = r.l_da.map(|x| format!("{x:.8e}")).unwrap_or_default();
    format!(
        "{},{:.8e},{:.8e},{:.8e},{:.8e},{},{:.8e}",
        e.epoch, r.total, r.l_ae, r.l_u, r.l_v, da, e.lr
    )
}

pub fn log_csv(history: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for e in history {
        writeln!(out, "{}", log_line(e)).unwrap();
    }
    out
}

/// Normalized training series split into observed and unobserved parts.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub u1: Matrix,
    pub u2: Matrix,
    pub dt: f64,
}

/// An aligned segment of the training series.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub u1: Matrix,
    pub u2: Matrix,
}

impl TrainData {
    pub fn new(u1: Matrix, u2: Matrix, dt: f64) -> Result<Self> {
        if u1.rows() != u2.rows() {
            return Err(Error::dim("training rows", u1.rows(), u2.rows()));
        }
        if !(dt > 0.0) {
            return Err(Error::Config(format!(
                "step size must be positive, got {dt}"
            )));
        }
        Ok(Self { u1, u2, dt })
    }

    pub fn len(&self) -> usize {
        self.u1.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.u1.rows() == 0
    }

    pub fn window(&self, start: usize, rows: usize) -> Window {
        Window {
            u1: self.u1.slice_rows(start, rows),
            u2: self.u2.slice_rows(start, rows),
        }
    }

    /// `count` windows of `rows` rows at uniformly random starts.
    pub fn sample_windows(
        &self,
        rows: usize,
        count: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Window>> {
        if rows > self.len() {
            return Err(Error::InsufficientData {
                needed: rows,
                got: self.len(),
            });
        }
        let last = self.len() - rows;
        Ok((0..count)
            .map(|_| self.window(rng.random_range(0..=last), rows))
            .collect())
    }
}

fn sq_norm_mean(tape: &mut Tape, diff: Var, count: usize) -> Var {
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    tape.scale(s, 1.0 / count as f64)
}

/// Batch mean of `|u2 - psi(phi(u2))|^2`.
pub fn loss_ae(tape: &mut Tape, bound: &dyn BoundCg, u2: &Matrix) -> Var {
    let x = tape.constant(u2.clone());
    let v = bound.encode(tape, x);
    let back = bound.decode(tape, v);
    let d = tape.sub(x, back);
    sq_norm_mean(tape, d, u2.rows())
}

/// Row `i` of every window, stacked.
fn rows_at(windows: &[Window], i: usize, u1: bool) -> Matrix {
    let cols = if u1 {
        windows[0].u1.cols()
    } else {
        windows[0].u2.cols()
    };
    let mut m = Matrix::zeros(windows.len(), cols);
    for (w, win) in windows.iter().enumerate() {
        let src = if u1 { &win.u1 } else { &win.u2 };
        m.row_mut(w).copy_from_slice(src.row(i));
    }
    m
}

/// Deterministic rollouts of `n_s` Euler steps from the first row of every
/// window. Returns `(l_u, l_v)`: mean over windows and steps `1..=n_s` of the
/// squared state error and of the latent error against `phi(u2*)`.
pub fn loss_forecast(
    tape: &mut Tape,
    bound: &dyn BoundCg,
    windows: &[Window],
    n_s: usize,
    dt: f64,
) -> Result<(Var, Var)> {
    if windows.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if let Some(w) = windows.iter().position(|w| w.u1.rows() < n_s + 1) {
        return Err(Error::dim(
            "forecast window rows",
            n_s + 1,
            windows[w].u1.rows(),
        ));
    }
    let count = windows.len() * n_s;
    let mut u1 = tape.constant(rows_at(windows, 0, true));
    let u2_0 = tape.constant(rows_at(windows, 0, false));
    let mut v = bound.encode(tape, u2_0);
    let mut err_u = Vec::with_capacity(n_s);
    let mut err_v = Vec::with_capacity(n_s);
    for i in 1..=n_s {
        let coefs = bound.coefficients(tape, u1);
        let (du1, dv) = coefs.drift(tape, v);
        let du1 = tape.scale(du1, dt);
        let dv = tape.scale(dv, dt);
        u1 = tape.add(u1, du1);
        v = tape.add(v, dv);
        if !tape.value(u1).is_finite() || !tape.value(v).is_finite() {
            let row = (0..windows.len())
                .find(|&r| {
                    tape.value(u1)
                        .row(r)
                        .iter()
                        .chain(tape.value(v).row(r))
                        .any(|x| !x.is_finite())
                })
                .unwrap_or(0);
            return Err(Error::Numeric(format!(
                "forecast rollout of window {row} blew up at step {i}"
            )));
        }
        let u2 = bound.decode(tape, v);
        let t1 = tape.constant(rows_at(windows, i, true));
        let t2 = tape.constant(rows_at(windows, i, false));
        let e1 = tape.sub(t1, u1);
        let e2 = tape.sub(t2, u2);
        err_u.push(sq_norm_mean(tape, e1, count));
        err_u.push(sq_norm_mean(tape, e2, count));
        let v_star = bound.encode(tape, t2);
        let ev = tape.sub(v_star, v);
        err_v.push(sq_norm_mean(tape, ev, count));
    }
    let lu = sum_vars(tape, &err_u);
    let lv = sum_vars(tape, &err_v);
    Ok((lu, lv))
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v);
    }
    acc
}

/// Initial latent covariance for assimilation windows.
pub const DA_INIT_VAR: f64 = 0.01;

/// Filters every window from `(phi(0), 0.01 I)` and averages
/// `|u2* - psi(mu_v)|^2` over windows and rows `n_b..n_l`.
#[allow(clippy::too_many_arguments)]
pub fn loss_da(
    tape: &mut Tape,
    bound: &dyn BoundCg,
    dims: Dims,
    windows: &[Window],
    n_b: usize,
    dt: f64,
    sigma1: &[f64],
    sigma2: &[f64],
    detach_cov: bool,
) -> Result<Var> {
    if windows.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let n_l = windows[0].u1.rows();
    if n_b >= n_l {
        return Err(Error::Config(format!(
            "warm-up {n_b} must be below window length {n_l}"
        )));
    }
    let kept = n_l - n_b;
    let count = windows.len() * kept;
    let zero = tape.constant(Matrix::zeros(1, dims.d_u2));
    let mu0 = bound.encode(tape, zero);
    let r0 = tape.constant(Matrix::identity(dims.d_v).scale(DA_INIT_VAR));
    let mut terms = Vec::with_capacity(windows.len());
    for (w, win) in windows.iter().enumerate() {
        if win.u1.rows() != n_l {
            return Err(Error::dim("assimilation window rows", n_l, win.u1.rows()));
        }
        let obs = tape.constant(win.u1.slice_rows(0, n_l - 1));
        let coefs = bound.coefficients(tape, obs);
        let mu = cg_filter_tape(
            tape, &coefs, &win.u1, dt, sigma1, sigma2, mu0, r0, detach_cov,
        )
        .map_err(|e| Error::Numeric(format!("assimilation window {w}: {e}")))?;
        let mu = tape.slice(mu, n_b * dims.d_v, kept, dims.d_v);
        let u2 = bound.decode(tape, mu);
        let target = tape.constant(win.u2.slice_rows(n_b, kept));
        let d = tape.sub(target, u2);
        terms.push(sq_norm_mean(tape, d, count));
    }
    Ok(sum_vars(tape, &terms))
}

/// Quadratic-variation estimate of the observation noise:
/// `sigma1^2 = dt * mean_n (du1*/dt - (f1 + g1 phi(u2*)))^2`, per component.
pub fn estimate_sigma1(model: &dyn CgModel, data: &TrainData) -> Result<Vec<f64>> {
    let t = data.len();
    if t < 2 {
        return Err(Error::InsufficientData { needed: 2, got: t });
    }
    let rates = forward_differences(&data.u1, data.dt);
    let d1 = data.u1.cols();
    let mut acc = vec![0.0; d1];
    const CHUNK: usize = 4096;
    for start in (0..t - 1).step_by(CHUNK) {
        let n = CHUNK.min(t - 1 - start);
        let u1 = data.u1.slice_rows(start, n);
        let v = encode(model, &data.u2.slice_rows(start, n))?;
        let (du1, _) = drift_batch(model, &u1, &v)?;
        for r in 0..n {
            for c in 0..d1 {
                let e = rates[(start + r, c)] - du1[(r, c)];
                acc[c] += e * e;
            }
        }
    }
    Ok(acc
        .iter()
        .map(|a| (data.dt * a / (t - 1) as f64).sqrt())
        .collect())
}

/// Weighted sum of the four loss terms on one tape.
pub struct LossVars {
    pub total: Var,
    pub l_ae: Var,
    pub l_u: Var,
    pub l_v: Var,
    pub l_da: Option<Var>,
}

impl LossVars {
    pub fn report(&self, tape: &Tape) -> LossReport {
        LossReport {
            total: tape.scalar(self.total),
            l_ae: tape.scalar(self.l_ae),
            l_u: tape.scalar(self.l_u),
            l_v: tape.scalar(self.l_v),
            l_da: self.l_da.map(|v| tape.scalar(v)),
        }
    }
}

/// Builds every loss term; the DA term only when `da_windows` is non-empty.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    bound: &dyn BoundCg,
    model: &dyn CgModel,
    weights: &LossWeights,
    forecast_windows: &[Window],
    da_windows: &[Window],
    schedule: &TrainSchedule,
    dt: f64,
) -> Result<LossVars> {
    let mut ae_rows = Vec::new();
    for w in forecast_windows {
        ae_rows.extend((0..w.u2.rows()).map(|r| w.u2.row(r).to_vec()));
    }
    let l_ae = loss_ae(tape, bound, &Matrix::from_rows(&ae_rows)?);
    let (l_u, l_v) = loss_forecast(tape, bound, forecast_windows, schedule.n_s, dt)?;
    let a = tape.scale(l_ae, weights.ae);
    let b = tape.scale(l_u, weights.u);
    let c = tape.scale(l_v, weights.v);
    let mut total = sum_vars(tape, &[a, b, c]);
    let mut l_da = None;
    if !da_windows.is_empty() {
        let l = loss_da(
            tape,
            bound,
            model.dims(),
            da_windows,
            schedule.n_b,
            dt,
            model.sigma1(),
            &model.sigma2(),
            schedule.detach_cov,
        )?;
        let d = tape.scale(l, weights.da);
        total = tape.add(total, d);
        l_da = Some(l);
    }
    Ok(LossVars {
        total,
        l_ae,
        l_u,
        l_v,
        l_da,
    })
}

fn snapshot(tensors: Vec<&mut [f64]>) -> Vec<Vec<f64>> {
    tensors.into_iter().map(|t| t.to_vec()).collect()
}

fn restore(tensors: Vec<&mut [f64]>, saved: &[Vec<f64>]) {
    for (t, s) in tensors.into_iter().zip(saved) {
        t.copy_from_slice(s);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochLog>,
    pub sigma1: Vec<f64>,
}

/// Accumulates per-step reports into an epoch mean.
#[derive(Default)]
struct Mean {
    n: usize,
    total: f64,
    ae: f64,
    u: f64,
    v: f64,
    da: Option<f64>,
}

impl Mean {
    fn push(&mut self, r: &LossReport) {
        self.n += 1;
        self.total += r.total;
        self.ae += r.l_ae;
        self.u += r.l_u;
        self.v += r.l_v;
        if let Some(d) = r.l_da {
            *self.da.get_or_insert(0.0) += d;
        }
    }

    fn report(&self) -> LossReport {
        let n = self.n as f64;
        LossReport {
            total: self.total / n,
            l_ae: self.ae / n,
            l_u: self.u / n,
            l_v: self.v / n,
            l_da: self.da.map(|d| d / n),
        }
    }
}

/// Two-stage training of a conditional-Gaussian model on normalized data:
/// stage 1 without the DA term, then `sigma1` from quadratic variation
/// (kept fixed afterwards), then stage 2 with every term. The cosine
/// schedule restarts at each stage. `on_epoch` sees every epoch as it ends.
///
/// On divergence the model is restored to its last good epoch and
/// [`Error::Diverged`] is returned.
pub fn train_cg(
    model: &mut dyn CgModel,
    data: &TrainData,
    weights: &LossWeights,
    schedule: &TrainSchedule,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    weights.validate()?;
    schedule.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let shapes: Vec<usize> = model.tensors_mut().iter().map(|t| t.len()).collect();
    if shapes.is_empty() {
        return Err(Error::Config(format!(
            "{} models have no trainable parameters",
            model.kind().label()
        )));
    }
    let mut adam = Adam::new(&shapes);
    let mut history = Vec::new();
    let mut last_good = snapshot(model.tensors_mut());
    let mut epoch = 0;
    for stage in [1u8, 2] {
        let epochs = if stage == 1 {
            schedule.epochs_stage1
        } else {
            schedule.epochs_stage2
        };
        if stage == 2 {
            let s1 = estimate_sigma1(model, data)?;
            model.set_sigma1(s1.iter().map(|s| s.max(1e-6)).collect());
        }
        let lr_schedule = CosineSchedule {
            lr0: schedule.lr0,
            lr_min: 0.0,
            total: epochs * schedule.batches_per_epoch,
        };
        for local in 0..epochs {
            epoch += 1;
            let mut mean = Mean::default();
            let mut lr = 0.0;
            for b in 0..schedule.batches_per_epoch {
                let fw = data.sample_windows(schedule.n_s + 1, schedule.batch_size, &mut rng)?;
                let dw = if stage == 2 && schedule.da_windows > 0 {
                    data.sample_windows(schedule.n_l, schedule.da_windows, &mut rng)?
                } else {
                    Vec::new()
                };
                let (report, mut grads) = {
                    let mut tape = Tape::new();
                    let bound = model.bind(&mut tape, true);
                    let w = if stage == 1 {
                        LossWeights {
                            da: 0.0,
                            ..*weights
                        }
                    } else {
                        *weights
                    };
                    let losses = total_loss(
                        &mut tape,
                        bound.as_ref(),
                        model,
                        &w,
                        &fw,
                        &dw,
                        schedule,
                        data.dt,
                    )?;
                    let report = losses.report(&tape);
                    if !(report.total <= DIVERGENCE_LOSS) {
                        drop(bound);
                        restore(model.tensors_mut(), &last_good);
                        return Err(Error::Diverged {
                            epoch,
                            loss: report.total,
                        });
                    }
                    let g = tape.backward(losses.total)?;
                    (report, bound.gradients(&g)?)
                };
                clip_global_norm(&mut grads, schedule.clip_norm);
                lr = lr_schedule.lr(local * schedule.batches_per_epoch + b);
                adam.step(model.tensors_mut(), &grads, lr);
                mean.push(&report);
            }
            last_good = snapshot(model.tensors_mut());
            let log = EpochLog {
                stage,
                epoch,
                report: mean.report(),
                lr,
            };
            on_epoch(&log)?;
            history.push(log);
        }
    }
    if schedule.epochs_stage2 == 0 {
        let s1 = estimate_sigma1(model, data)?;
        model.set_sigma1(s1.iter().map(|s| s.max(1e-6)).collect());
    }
    Ok(TrainOutcome {
        history,
        sigma1: model.sigma1().to_vec(),
    })
}

/// Mean squared state error of deterministic `n_s`-step rollouts of the
/// black-box drift.
pub fn loss_forecast_dnn(
    tape: &mut Tape,
    net: &MlpVars,
    windows: &[Matrix],
    n_s: usize,
    dt: f64,
) -> Result<Var> {
    if windows.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let d = windows[0].cols();
    let count = windows.len() * n_s;
    let stack = |i: usize| {
        let mut m = Matrix::zeros(windows.len(), d);
        for (w, win) in windows.iter().enumerate() {
            m.row_mut(w).copy_from_slice(win.row(i));
        }
        m
    };
    let mut u = tape.constant(stack(0));
    let mut terms = Vec::with_capacity(n_s);
    for i in 1..=n_s {
        let du = net.forward(tape, u);
        let du = tape.scale(du, dt);
        u = tape.add(u, du);
        if !tape.value(u).is_finite() {
            return Err(Error::Numeric(format!(
                "black-box rollout blew up at step {i}"
            )));
        }
        let t = tape.constant(stack(i));
        let e = tape.sub(t, u);
        terms.push(sq_norm_mean(tape, e, count));
    }
    Ok(sum_vars(tape, &terms))
}

/// Trains the black-box drift on the state forecast loss alone (weight
/// `1/d`), then sets its noise from the one-step residuals.
pub fn train_dnn(
    model: &mut DnnModel,
    states: &Matrix,
    dt: f64,
    schedule: &TrainSchedule,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    let d = model.dim();
    if states.cols() != d {
        return Err(Error::dim("state width", d, states.cols()));
    }
    let rows = schedule.n_s + 1;
    if states.rows() < rows {
        return Err(Error::InsufficientData {
            needed: rows,
            got: states.rows(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let shapes: Vec<usize> = model.tensors_mut().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&shapes);
    let epochs = schedule.epochs_stage1 + schedule.epochs_stage2;
    let lr_schedule = CosineSchedule {
        lr0: schedule.lr0,
        lr_min: 0.0,
        total: epochs * schedule.batches_per_epoch,
    };
    let weight = 1.0 / d as f64;
    let mut last_good = snapshot(model.tensors_mut());
    let mut history = Vec::new();
    for epoch in 1..=epochs {
        let mut sum = 0.0;
        let mut lr = 0.0;
        for b in 0..schedule.batches_per_epoch {
            let windows: Vec<Matrix> = (0..schedule.batch_size)
                .map(|_| states.slice_rows(rng.random_range(0..=states.rows() - rows), rows))
                .collect();
            let (l_u, mut grads) = {
                let mut tape = Tape::new();
                let vars = model.bind(&mut tape, true);
                let l = loss_forecast_dnn(&mut tape, &vars, &windows, schedule.n_s, dt)?;
                let total = tape.scale(l, weight);
                let l_u = tape.scalar(l);
                if !(l_u * weight <= DIVERGENCE_LOSS) {
                    restore(model.tensors_mut(), &last_good);
                    return Err(Error::Diverged {
                        epoch,
                        loss: l_u * weight,
                    });
                }
                let g = tape.backward(total)?;
                (l_u, DnnModel::gradients(&vars, &g)?)
            };
            clip_global_norm(&mut grads, schedule.clip_norm);
            lr = lr_schedule.lr((epoch - 1) * schedule.batches_per_epoch + b);
            adam.step(model.tensors_mut(), &grads, lr);
            sum += l_u;
        }
        last_good = snapshot(model.tensors_mut());
        let l_u = sum / schedule.batches_per_epoch as f64;
        let log = EpochLog {
            stage: 1,
            epoch,
            report: LossReport {
                total: weight * l_u,
                l_ae: 0.0,
                l_u,
                l_v: 0.0,
                l_da: None,
            },
            lr,
        };
        on_epoch(&log)?;
        history.push(log);
    }
    model.sigma = dnn_residual_sigma(model, states, dt)?;
    Ok(TrainOutcome {
        history,
        sigma1: model.sigma.clone(),
    })
}

/// `sqrt(dt * mean (du*/dt - NN(u))^2)` per component.
pub fn dnn_residual_sigma(model: &DnnModel, states: &Matrix, dt: f64) -> Result<Vec<f64>> {
    let t = states.rows();
    if t < 2 {
        return Err(Error::InsufficientData { needed: 2, got: t });
    }
    let rates = forward_differences(states, dt);
    let pred = model.net.forward_batch(&states.slice_rows(0, t - 1))?;
    let e = rates.sub(&pred);
    Ok((0..states.cols())
        .map(|c| (dt * e.col(c).iter().map(|x| x * x).sum::<f64>() / (t - 1) as f64).sqrt())
        .collect())
}
