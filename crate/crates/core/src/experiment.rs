//! End-to-end experiment steps behind the command line: simulate, train,
//! assimilate, forecast, evaluate and export plot data. Every step reads and
//! writes files under one output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assimilation::{fit_residual_uq, posterior_csv, ResidualUqModel, UqFitConfig};
use crate::config::ExperimentConfig;
use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::eval::{
    correlation, evaluate as evaluate_table, nrmse, origin_rows, ErrorTable, Surrogate,
};
use crate::io::write_atomic;
use crate::models::{
    AnyModel, CgRegModel, CgknModel, Checkpoint, DnnModel, KoopNetModel, LocalCgknModel, ModelKind,
};
use crate::systems::{
    build_dataset, load_trajectory, save_trajectory, write_series_csv, Normalization, Trajectory,
};
use crate::training::{log_csv, train_cg, train_dnn, EpochLog, TrainData, TrainSchedule};

/// Which training stages to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Stage 1 only; `sigma1` is estimated when it ends.
    One,
    /// Stage 2 only, continuing from an existing checkpoint.
    Two,
    All,
}

/// File layout of an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train_csv(&self) -> PathBuf {
        self.root.join("data/train.csv")
    }

    pub fn test_csv(&self) -> PathBuf {
        self.root.join("data/test.csv")
    }

    pub fn checkpoint(&self, kind: ModelKind) -> PathBuf {
        self.root.join(format!("checkpoints/{}.json", kind.label()))
    }

    pub fn train_log(&self, kind: ModelKind) -> PathBuf {
        self.root.join(format!("logs/{}_train.csv", kind.label()))
    }

    pub fn posterior(&self, kind: ModelKind) -> PathBuf {
        self.root.join(format!("posterior/{}.csv", kind.label()))
    }

    pub fn forecast(&self, kind: ModelKind) -> PathBuf {
        self.root.join(format!("forecast/{}.csv", kind.label()))
    }

    pub fn table_text(&self) -> PathBuf {
        self.root.join("results/error_table.txt")
    }

    pub fn table_csv(&self) -> PathBuf {
        self.root.join("results/error_table.csv")
    }

    pub fn plot(&self, name: &str) -> PathBuf {
        self.root.join("plots").join(name)
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join(format!("manifest_{command}.json"))
    }
}

fn write(path: &Path, text: &str, outputs: &mut Vec<PathBuf>) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    outputs.push(path.to_path_buf());
    Ok(())
}

/// Simulates the configured system and stores the train/test split.
pub fn simulate(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let sys = cfg.build_system()?;
    let split = build_dataset(&sys, &cfg.dataset_spec())?;
    let mut out = save_trajectory(&split.train, &sys, cfg.seed, &layout.train_csv())?;
    out.extend(save_trajectory(
        &split.test,
        &sys,
        cfg.seed,
        &layout.test_csv(),
    )?);
    Ok(out)
}

pub fn load_data(layout: &Layout) -> Result<(Trajectory, Trajectory)> {
    Ok((
        load_trajectory(&layout.train_csv())?,
        load_trajectory(&layout.test_csv())?,
    ))
}

fn normalized(states: &Matrix, norm: &Option<Normalization>) -> Matrix {
    match norm {
        Some(n) => n.apply(states),
        None => states.clone(),
    }
}

fn new_cg_model(cfg: &ExperimentConfig, kind: ModelKind, rng: &mut ChaCha8Rng) -> Result<AnyModel> {
    Ok(match kind {
        ModelKind::Cgkn => AnyModel::Cgkn(CgknModel::new(&cfg.cgkn_spec(), rng)?),
        ModelKind::Koopnet => AnyModel::Koopnet(KoopNetModel::new(&cfg.cgkn_spec(), rng)?),
        ModelKind::LocalCgkn => AnyModel::LocalCgkn(LocalCgknModel::new(&cfg.local_spec(), rng)?),
        other => {
            return Err(Error::Config(format!(
                "{} is not a neural CG model",
                other.label()
            )))
        }
    })
}

/// Trains (or fits) one model and writes its checkpoint and training log.
///
/// Neural CG models and the black-box model see standardized states;
/// the regression model is fitted in physical units. After training, a
/// residual uncertainty network is fitted on the training-period DA of CG
/// models and stored in the checkpoint as network `uq`.
///
/// A diverged run still writes its log and the last good parameters before
/// the error is returned.
pub fn train(
    cfg: &ExperimentConfig,
    kind: ModelKind,
    stage: Stage,
    layout: &Layout,
) -> Result<Vec<PathBuf>> {
    let (train, _) = load_data(layout)?;
    let mut outputs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let norm = if cfg.model.normalize && kind != ModelKind::CgReg {
        Some(Normalization::fit(&train.states)?)
    } else {
        None
    };
    let mut history: Vec<EpochLog> = Vec::new();
    let mut failure = None;
    let model = match kind {
        ModelKind::CgReg => AnyModel::CgReg(CgRegModel::fit(&train, &cfg.cgreg_spec())?),
        ModelKind::Dnn => {
            let mut m = DnnModel::new(train.dim(), &cfg.model.dnn_hidden, &mut rng)?;
            let base = cfg.schedule();
            let schedule = TrainSchedule {
                epochs_stage1: cfg
                    .training
                    .dnn_epochs
                    .unwrap_or(base.epochs_stage1 + base.epochs_stage2),
                epochs_stage2: 0,
                ..base
            };
            let states = normalized(&train.states, &norm);
            if let Err(e) = train_dnn(&mut m, &states, train.dt, &schedule, |l| {
                history.push(l.clone());
                Ok(())
            }) {
                failure = Some(e);
            }
            AnyModel::Dnn(m)
        }
        ModelKind::Linear => {
            return Err(Error::Config(
                "linear reference models are not trainable".into(),
            ))
        }
        _ => {
            let mut schedule = cfg.schedule();
            let mut model = match stage {
                Stage::Two => {
                    let ck = Checkpoint::load(&layout.checkpoint(kind))?;
                    if ck.metadata.kind != kind {
                        return Err(Error::Config(format!(
                            "checkpoint {} holds a {} model",
                            layout.checkpoint(kind).display(),
                            ck.metadata.kind.label()
                        )));
                    }
                    schedule.epochs_stage1 = 0;
                    ck.model()?
                }
                _ => new_cg_model(cfg, kind, &mut rng)?,
            };
            if stage == Stage::One {
                schedule.epochs_stage2 = 0;
            }
            let z = normalized(&train.states, &norm);
            let data = TrainData::new(
                z.select_cols(&train.obs_idx),
                z.select_cols(&train.unobs_idx),
                train.dt,
            )?;
            let cg = model.as_cg_mut().expect("neural CG model");
            let weights = cfg.weights(cg.dims());
            if let Err(e) = train_cg(cg, &data, &weights, &schedule, |l| {
                history.push(l.clone());
                Ok(())
            }) {
                failure = Some(e);
            }
            model
        }
    };
    if !history.is_empty() {
        write(&layout.train_log(kind), &log_csv(&history), &mut outputs)?;
    }
    let mut ck = Checkpoint::from_model(
        &model,
        train.dt,
        cfg.seed,
        &train.obs_idx,
        &train.unobs_idx,
        norm,
    );
    if failure.is_none() && stage != Stage::One && model.as_cg().is_some() {
        let surrogate = Surrogate::from_checkpoint(&ck)?;
        let uq = fit_uq(cfg, &surrogate, &train);
        match uq {
            Ok(uq) => {
                ck.networks.insert("uq".into(), uq.net);
            }
            Err(Error::Instability { .. })
            | Err(Error::Numeric(_))
            | Err(Error::InsufficientData { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let path = layout.checkpoint(kind);
    ck.save(&path)?;
    outputs.push(path);
    match failure {
        Some(e) => Err(e),
        None => Ok(outputs),
    }
}

/// Model-space observed inputs of the uncertainty network.
fn uq_input(s: &Surrogate, traj: &Trajectory) -> Matrix {
    normalized(&traj.states, &s.normalization).select_cols(&s.obs_idx)
}

fn fit_uq(cfg: &ExperimentConfig, s: &Surrogate, train: &Trajectory) -> Result<ResidualUqModel> {
    let post = s.assimilate(train)?;
    let n_b = cfg.eval.warmup.min(train.len().saturating_sub(1));
    let skip = |m: &Matrix| crate::assimilation::da_warmup_split(m, n_b);
    let uq_cfg = UqFitConfig {
        steps: cfg.training.uq_steps,
        seed: cfg.seed.wrapping_add(4),
        ..UqFitConfig::default()
    };
    fit_residual_uq(
        &skip(&uq_input(s, train))?,
        &skip(&post.mu_u2)?,
        &skip(&train.u2())?,
        &uq_cfg,
    )
}

/// A surrogate with its residual-UQ network, if one was fitted.
pub type LoadedModel = (Surrogate, Option<ResidualUqModel>);

/// Loads every listed checkpoint; absent ones are `None`.
pub fn load_surrogates(
    cfg: &ExperimentConfig,
    layout: &Layout,
) -> Result<Vec<(ModelKind, Option<LoadedModel>)>> {
    let mut out = Vec::new();
    for &kind in &cfg.model.kinds {
        match Checkpoint::load(&layout.checkpoint(kind)) {
            Ok(ck) => {
                let uq = ck
                    .networks
                    .get("uq")
                    .map(|n| ResidualUqModel { net: n.clone() });
                out.push((kind, Some((Surrogate::from_checkpoint(&ck)?, uq))));
            }
            Err(Error::MissingArtifact(_)) => out.push((kind, None)),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn first_missing(layout: &Layout, missing: &[ModelKind]) -> Result<()> {
    match missing.first() {
        Some(&k) => Err(Error::MissingArtifact(layout.checkpoint(k))),
        None => Ok(()),
    }
}

/// Posterior mean and standard deviation of `u2` on the test series, in
/// physical units.
pub fn posterior_on(
    s: &Surrogate,
    uq: Option<&ResidualUqModel>,
    traj: &Trajectory,
) -> Result<(Vec<f64>, Matrix, Matrix)> {
    let post = s.assimilate(traj)?;
    let std = match uq {
        Some(u) => u.std(&uq_input(s, traj))?,
        None => s
            .identity_decoder_std(&post)
            .unwrap_or_else(|| post.mu_u2.map(|_| f64::NAN)),
    };
    Ok((post.times, post.mu_u2, std))
}

/// Filters the observed test series through every available CG model.
pub fn assimilate(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let (_, test) = load_data(layout)?;
    let mut outputs = Vec::new();
    let mut missing = Vec::new();
    for (kind, entry) in load_surrogates(cfg, layout)? {
        let Some((s, uq)) = entry else {
            missing.push(kind);
            continue;
        };
        if s.model.as_cg().is_none() {
            continue;
        }
        let (times, mu, std) = posterior_on(&s, uq.as_ref(), &test)?;
        write(
            &layout.posterior(kind),
            &posterior_csv(&times, &mu, &std, None)?,
            &mut outputs,
        )?;
    }
    first_missing(layout, &missing)?;
    Ok(outputs)
}

fn state_names(d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("x{i}")).collect()
}

/// `lead_steps`-ahead forecasts from every test origin.
pub fn forecast(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let (_, test) = load_data(layout)?;
    let lead = cfg.eval.lead_steps;
    let stride = cfg.eval.origin_stride.max(1);
    let origins = origin_rows(test.len(), lead, stride);
    if origins.is_empty() {
        return Err(Error::InsufficientData {
            needed: lead + 1,
            got: test.len(),
        });
    }
    let x0 = test.states.select_rows(&origins);
    let mut outputs = Vec::new();
    let mut missing = Vec::new();
    for (kind, entry) in load_surrogates(cfg, layout)? {
        let Some((s, _)) = entry else {
            missing.push(kind);
            continue;
        };
        let pred = s.forecast(&x0, lead, test.dt)?;
        let csv = write_series_csv(
            &state_names(test.dim()),
            test.time(lead),
            test.dt * stride as f64,
            &pred,
        );
        write(&layout.forecast(kind), &csv, &mut outputs)?;
    }
    first_missing(layout, &missing)?;
    Ok(outputs)
}

/// Error table of the true model and every listed surrogate. The table is
/// written even when checkpoints are missing; callers check
/// [`ErrorTable::has_missing`].
pub fn evaluate(cfg: &ExperimentConfig, layout: &Layout) -> Result<(ErrorTable, Vec<PathBuf>)> {
    let (train, test) = load_data(layout)?;
    let sys = cfg.build_system()?;
    let models: Vec<(ModelKind, Option<Surrogate>)> = load_surrogates(cfg, layout)?
        .into_iter()
        .map(|(k, e)| (k, e.map(|(s, _)| s)))
        .collect();
    let table = evaluate_table(&sys, &train, &test, &models, &cfg.eval_settings())?;
    let mut outputs = Vec::new();
    write(&layout.table_text(), &table.to_text(), &mut outputs)?;
    write(&layout.table_csv(), &table.to_csv(), &mut outputs)?;
    Ok((table, outputs))
}

/// NRMSE and mean per-variable correlation at leads `1..=max_lead`.
pub fn lead_time_curve(
    s: &Surrogate,
    test: &Trajectory,
    max_lead: usize,
    stride: usize,
) -> Result<Vec<(usize, f64, f64)>> {
    let origins = origin_rows(test.len(), max_lead, stride);
    if origins.is_empty() {
        return Err(Error::InsufficientData {
            needed: max_lead + 1,
            got: test.len(),
        });
    }
    let paths = s.forecast_paths(&test.states.select_rows(&origins), max_lead, test.dt)?;
    let mut out = Vec::with_capacity(max_lead);
    for lead in 1..=max_lead {
        let targets: Vec<usize> = origins.iter().map(|o| o + lead).collect();
        let truth = test.states.select_rows(&targets);
        let pred = &paths[lead];
        let e = nrmse(&truth, pred)?;
        let mut corr = 0.0;
        for c in 0..truth.cols() {
            corr += correlation(&truth.col(c), &pred.col(c)).unwrap_or(f64::NAN);
        }
        out.push((lead, e, corr / truth.cols() as f64));
    }
    Ok(out)
}

/// Plot-ready CSVs: forecast against truth, posterior mean with a two
/// standard deviation band, and lead-time skill curves.
pub fn export_plots(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let (_, test) = load_data(layout)?;
    let lead = cfg.eval.lead_steps;
    let max_lead = cfg.eval.curve_max_lead.unwrap_or(2 * lead).max(1);
    let stride = cfg.eval.origin_stride.max(1);
    let d = test.dim();
    let mut outputs = Vec::new();
    let mut missing = Vec::new();
    for (kind, entry) in load_surrogates(cfg, layout)? {
        let Some((s, uq)) = entry else {
            missing.push(kind);
            continue;
        };
        let label = kind.label();

        let origins = origin_rows(test.len(), lead, stride);
        let pred = s.forecast(&test.states.select_rows(&origins), lead, test.dt)?;
        let mut csv = String::from("t");
        for i in 1..=d {
            write!(csv, ",truth_x{i}").unwrap();
        }
        for i in 1..=d {
            write!(csv, ",forecast_x{i}").unwrap();
        }
        csv.push('\n');
        for (r, o) in origins.iter().enumerate() {
            write!(csv, "{:.10e}", test.time(o + lead)).unwrap();
            for v in test.states.row(o + lead).iter().chain(pred.row(r)) {
                write!(csv, ",{v:.10e}").unwrap();
            }
            csv.push('\n');
        }
        write(
            &layout.plot(&format!("forecast_{label}.csv")),
            &csv,
            &mut outputs,
        )?;

        if s.model.as_cg().is_some() {
            let (times, mu, std) = posterior_on(&s, uq.as_ref(), &test)?;
            let truth = test.u2();
            let mut csv = String::from("t");
            for &i in &test.unobs_idx {
                let n = i + 1;
                write!(csv, ",truth_x{n},mean_x{n},lower_x{n},upper_x{n}").unwrap();
            }
            csv.push('\n');
            for (r, t) in times.iter().enumerate() {
                write!(csv, "{t:.10e}").unwrap();
                for c in 0..mu.cols() {
                    let (m, sd) = (mu[(r, c)], std[(r, c)]);
                    write!(
                        csv,
                        ",{:.10e},{m:.10e},{:.10e},{:.10e}",
                        truth[(r, c)],
                        m - 2.0 * sd,
                        m + 2.0 * sd
                    )
                    .unwrap();
                }
                csv.push('\n');
            }
            write(
                &layout.plot(&format!("posterior_{label}.csv")),
                &csv,
                &mut outputs,
            )?;
        }

        let mut csv = String::from("lead_steps,lead_time,nrmse,correlation\n");
        match lead_time_curve(&s, &test, max_lead, stride) {
            Ok(curve) => {
                for (l, e, c) in curve {
                    writeln!(csv, "{l},{:.10e},{e:.10e},{c:.10e}", l as f64 * test.dt).unwrap();
                }
            }
            Err(Error::BlowUp { .. }) | Err(Error::Numeric(_)) => {}
            Err(e) => return Err(e),
        }
        write(
            &layout.plot(&format!("lead_time_{label}.csv")),
            &csv,
            &mut outputs,
        )?;
    }
    first_missing(layout, &missing)?;
    Ok(outputs)
}
