//! Experiment configuration files (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalSettings;
use crate::models::{CgRegSpec, CgknSpec, Dims, LocalSpec, ModelKind};
use crate::systems::{
    check_partition, complement, make_l96, make_psbse_with, DatasetSpec, PsbseParams, SdeSystem,
};
use crate::training::{LossWeights, TrainSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Psbse,
    Lorenz96,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub kind: SystemKind,
    /// Number of Lorenz 96 variables.
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub forcing: Option<f64>,
    /// Per-variable noise amplitudes; a single value is broadcast.
    #[serde(default)]
    pub noise: Option<Vec<f64>>,
    /// `[beta_x, beta_y, beta_z, alpha]` for the Burgers–Sivashinsky triad.
    #[serde(default)]
    pub coefficients: Option<[f64; 4]>,
    pub sim_dt: f64,
    pub dt: f64,
    pub t_train: f64,
    pub t_test: f64,
    #[serde(default)]
    pub burn_in: f64,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    pub obs_idx: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kinds: Vec<ModelKind>,
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default = "default_dv")]
    pub d_v: usize,
    /// Latent variables per site of the local model.
    #[serde(default = "default_j")]
    pub local_j: usize,
    #[serde(default = "default_wide")]
    pub encoder_hidden: Vec<usize>,
    #[serde(default = "default_wide")]
    pub decoder_hidden: Vec<usize>,
    #[serde(default = "default_eta")]
    pub eta_hidden: Vec<usize>,
    #[serde(default = "default_local")]
    pub u1_hidden: Vec<usize>,
    #[serde(default = "default_local")]
    pub v_hidden: Vec<usize>,
    #[serde(default = "default_wide")]
    pub dnn_hidden: Vec<usize>,
    #[serde(default = "default_one")]
    pub sigma2: f64,
    #[serde(default = "default_threshold")]
    pub cgreg_threshold: f64,
    #[serde(default)]
    pub cgreg_local_radius: Option<usize>,
}

fn default_true() -> bool {
    true
}
fn default_dv() -> usize {
    10
}
fn default_j() -> usize {
    6
}
fn default_wide() -> Vec<usize> {
    vec![64, 64, 64]
}
fn default_eta() -> Vec<usize> {
    vec![32, 32, 32]
}
fn default_local() -> Vec<usize> {
    vec![21, 21]
}
fn default_one() -> f64 {
    1.0
}
fn default_threshold() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    pub ae: Option<f64>,
    pub u: Option<f64>,
    pub v: Option<f64>,
    pub da: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default)]
    pub weights: Option<WeightsConfig>,
    pub n_s: usize,
    pub n_l: usize,
    pub n_b: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    #[serde(default = "default_batches")]
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    #[serde(default = "default_da_windows")]
    pub da_windows: usize,
    #[serde(default = "default_lr")]
    pub lr0: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub detach_cov: bool,
    /// Epochs for the black-box model; defaults to both stages combined.
    #[serde(default)]
    pub dnn_epochs: Option<usize>,
    /// Optimizer steps of the residual uncertainty regression.
    #[serde(default = "default_uq_steps")]
    pub uq_steps: usize,
}

fn default_batches() -> usize {
    1
}
fn default_da_windows() -> usize {
    16
}
fn default_lr() -> f64 {
    1e-3
}
fn default_clip() -> f64 {
    10.0
}
fn default_uq_steps() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub lead_steps: usize,
    pub warmup: usize,
    #[serde(default = "default_ensemble")]
    pub ensemble: usize,
    #[serde(default = "default_forecast_ensemble")]
    pub forecast_ensemble: usize,
    #[serde(default = "default_stride")]
    pub origin_stride: usize,
    /// Longest lead (in stored steps) of the exported lead-time curves.
    #[serde(default)]
    pub curve_max_lead: Option<usize>,
}

fn default_ensemble() -> usize {
    100
}
fn default_forecast_ensemble() -> usize {
    20
}
fn default_stride() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub system: SystemConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Config(format!("config file {} not found", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn system_dim(&self) -> usize {
        match self.system.kind {
            SystemKind::Psbse => 3,
            SystemKind::Lorenz96 => self.system.dim.unwrap_or(40),
        }
    }

    pub fn unobs_idx(&self) -> Vec<usize> {
        complement(self.system_dim(), &self.system.obs_idx)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.system_dim();
        check_partition(dim, &self.system.obs_idx, &self.unobs_idx())
            .map_err(|e| Error::Config(format!("[system] obs_idx: {e}")))?;
        if let Some(n) = &self.system.noise {
            if n.len() != 1 && n.len() != dim {
                return Err(Error::Config(format!(
                    "[system] noise: expected 1 or {dim} values, got {}",
                    n.len()
                )));
            }
        }
        if let Some(x0) = &self.system.x0 {
            if x0.len() != dim {
                return Err(Error::Config(format!(
                    "[system] x0: expected {dim} values, got {}",
                    x0.len()
                )));
            }
        }
        if self.model.kinds.is_empty() {
            return Err(Error::Config(
                "[model] kinds: list at least one model".into(),
            ));
        }
        if self.model.kinds.contains(&ModelKind::Linear) {
            return Err(Error::Config(
                "[model] kinds: `linear` is a reference model, not trainable".into(),
            ));
        }
        if self.model.kinds.contains(&ModelKind::LocalCgkn) {
            let obs: Vec<usize> = (0..dim).step_by(2).collect();
            if self.system.kind != SystemKind::Lorenz96 || self.system.obs_idx != obs {
                return Err(Error::Config(
                    "[model] kinds: local_cgkn needs a Lorenz 96 system observed at every other variable starting from the first".into(),
                ));
            }
        }
        self.schedule()
            .validate()
            .map_err(|e| Error::Config(format!("[training] {e}")))?;
        self.weights(Dims {
            d_u1: 1,
            d_u2: 1,
            d_v: 1,
        })
        .validate()
        .map_err(|e| Error::Config(format!("[training.weights] {e}")))?;
        if self.eval.warmup >= self.test_rows() {
            return Err(Error::Config(
                "[eval] warmup: must be shorter than the test set".into(),
            ));
        }
        crate::systems::subsample_ratio(self.system.sim_dt, self.system.dt)
            .map_err(|e| Error::Config(format!("[system] dt: {e}")))?;
        Ok(())
    }

    pub fn test_rows(&self) -> usize {
        crate::systems::steps_in(self.system.t_test, self.system.dt) + 1
    }

    pub fn build_system(&self) -> Result<SdeSystem> {
        let dim = self.system_dim();
        let noise = |default: Vec<f64>| -> Vec<f64> {
            match &self.system.noise {
                Some(n) if n.len() == 1 => vec![n[0]; dim],
                Some(n) => n.clone(),
                None => default,
            }
        };
        match self.system.kind {
            SystemKind::Psbse => {
                let mut p = PsbseParams::default();
                if let Some([bx, by, bz, a]) = self.system.coefficients {
                    p.beta_x = bx;
                    p.beta_y = by;
                    p.beta_z = bz;
                    p.alpha = a;
                }
                p.sigma = noise(p.sigma.to_vec())
                    .try_into()
                    .expect("three noise values");
                Ok(make_psbse_with(p))
            }
            SystemKind::Lorenz96 => {
                let mut sys = make_l96(dim, self.system.forcing.unwrap_or(8.0), 0.5)?;
                sys.noise_diag = noise(sys.noise_diag.clone());
                Ok(sys)
            }
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let dim = self.system_dim();
        let x0 = self
            .system
            .x0
            .clone()
            .unwrap_or_else(|| match self.system.kind {
                SystemKind::Psbse => vec![1.0; 3],
                SystemKind::Lorenz96 => {
                    let mut x = vec![self.system.forcing.unwrap_or(8.0); dim];
                    x[0] += 0.01;
                    x
                }
            });
        DatasetSpec {
            sim_dt: self.system.sim_dt,
            sub_dt: self.system.dt,
            t_train: self.system.t_train,
            t_test: self.system.t_test,
            burn_in: self.system.burn_in,
            x0,
            seed: self.seed,
            obs_idx: self.system.obs_idx.clone(),
            normalize: self.model.normalize,
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        let t = &self.training;
        TrainSchedule {
            n_s: t.n_s,
            n_l: t.n_l,
            n_b: t.n_b,
            epochs_stage1: t.epochs_stage1,
            epochs_stage2: t.epochs_stage2,
            batches_per_epoch: t.batches_per_epoch,
            batch_size: t.batch_size,
            da_windows: t.da_windows,
            lr0: t.lr0,
            clip_norm: t.clip_norm,
            seed: self.seed.wrapping_add(2),
            detach_cov: t.detach_cov,
        }
    }

    pub fn weights(&self, dims: Dims) -> LossWeights {
        let d = LossWeights::defaults(dims);
        match &self.training.weights {
            None => d,
            Some(w) => LossWeights {
                ae: w.ae.unwrap_or(d.ae),
                u: w.u.unwrap_or(d.u),
                v: w.v.unwrap_or(d.v),
                da: w.da.unwrap_or(d.da),
            },
        }
    }

    pub fn dims(&self, kind: ModelKind) -> Dims {
        let d_u1 = self.system.obs_idx.len();
        let d_u2 = self.system_dim() - d_u1;
        let d_v = match kind {
            ModelKind::LocalCgkn => d_u1 * self.model.local_j,
            ModelKind::CgReg => d_u2,
            _ => self.model.d_v,
        };
        Dims { d_u1, d_u2, d_v }
    }

    pub fn cgkn_spec(&self) -> CgknSpec {
        CgknSpec {
            dims: self.dims(ModelKind::Cgkn),
            encoder_hidden: self.model.encoder_hidden.clone(),
            decoder_hidden: self.model.decoder_hidden.clone(),
            eta_hidden: self.model.eta_hidden.clone(),
            sigma2: self.model.sigma2,
        }
    }

    pub fn local_spec(&self) -> LocalSpec {
        LocalSpec {
            sites: self.system.obs_idx.len(),
            j: self.model.local_j,
            encoder_hidden: self.model.encoder_hidden.clone(),
            decoder_hidden: self.model.decoder_hidden.clone(),
            u1_hidden: self.model.u1_hidden.clone(),
            v_hidden: self.model.v_hidden.clone(),
            sigma2: self.model.sigma2,
        }
    }

    pub fn cgreg_spec(&self) -> CgRegSpec {
        CgRegSpec {
            max_degree_u1: 2,
            threshold: self.model.cgreg_threshold,
            local_radius: self.model.cgreg_local_radius,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            lead_steps: self.eval.lead_steps,
            origin_stride: self.eval.origin_stride,
            warmup: self.eval.warmup,
            ensemble: self.eval.ensemble,
            forecast_ensemble: self.eval.forecast_ensemble,
            sim_dt: self.system.sim_dt,
            seed: self.seed.wrapping_add(3),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "toy"
seed = 3

[system]
kind = "psbse"
sim_dt = 0.001
dt = 0.01
t_train = 10.0
t_test = 5.0
obs_idx = [0]

[model]
kinds = ["cgkn", "cg_reg"]

[training]
n_s = 10
n_l = 100
n_b = 20
epochs_stage1 = 2
epochs_stage2 = 2
batch_size = 8

[eval]
lead_steps = 10
warmup = 30
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = ExperimentConfig::parse(MINIMAL, "toy.toml").unwrap();
        assert_eq!(c.unobs_idx(), vec![1, 2]);
        assert_eq!(c.model.eta_hidden, vec![32, 32, 32]);
        assert_eq!(c.test_rows(), 501);
        let w = c.weights(c.dims(ModelKind::Cgkn));
        assert_eq!(w.ae, 0.5);
        assert_eq!(c.build_system().unwrap().noise_diag, vec![0.3, 0.5, 0.5]);
    }

    #[test]
    fn unknown_key_reports_location() {
        let bad = MINIMAL.replace("n_s = 10", "n_s = 10\nn_q = 4");
        let e = ExperimentConfig::parse(&bad, "toy.toml").unwrap_err();
        let msg = e.to_string();
        assert!(matches!(e, Error::Config(_)));
        assert!(msg.contains("line") && msg.contains("n_q"), "{msg}");
    }

    #[test]
    fn wrong_type_reports_line() {
        let bad = MINIMAL.replace("lead_steps = 10", "lead_steps = \"ten\"");
        let line = bad
            .lines()
            .position(|l| l.starts_with("lead_steps"))
            .unwrap()
            + 1;
        let msg = ExperimentConfig::parse(&bad, "toy.toml")
            .unwrap_err()
            .to_string();
        assert!(msg.contains(&format!("line {line}")), "{msg}");
    }

    #[test]
    fn inconsistent_partition_is_rejected() {
        let bad = MINIMAL.replace("obs_idx = [0]", "obs_idx = [0, 3]");
        assert!(matches!(
            ExperimentConfig::parse(&bad, "x"),
            Err(Error::Config(_))
        ));
        let bad = MINIMAL.replace("n_b = 20", "n_b = 100");
        assert!(matches!(
            ExperimentConfig::parse(&bad, "x"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn local_model_requires_alternating_lorenz_split() {
        let bad = MINIMAL.replace("kinds = [\"cgkn\", \"cg_reg\"]", "kinds = [\"local_cgkn\"]");
        assert!(matches!(
            ExperimentConfig::parse(&bad, "x"),
            Err(Error::Config(_))
        ));
    }
}
