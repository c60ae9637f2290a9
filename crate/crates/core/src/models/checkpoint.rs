use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    CgModel, CgRegModel, CgknModel, DnnModel, KoopNetModel, Library, LocalCgknModel, ModelKind,
};
use crate::diffcore::{Matrix, MlpParams};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::systems::Normalization;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub d_u1: usize,
    pub d_u2: usize,
    pub d_v: usize,
    pub dt: f64,
    pub sigma1: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub seed: u64,
    pub obs_idx: Vec<usize>,
    pub unobs_idx: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// One JSON document per model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub metadata: CheckpointMeta,
    #[serde(default)]
    pub networks: BTreeMap<String, MlpParams>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tensors: BTreeMap<String, Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub library: Option<Library>,
}

/// Any trained surrogate.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Cgkn(CgknModel),
    LocalCgkn(LocalCgknModel),
    Koopnet(KoopNetModel),
    CgReg(CgRegModel),
    Dnn(DnnModel),
}

impl AnyModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Cgkn(_) => ModelKind::Cgkn,
            AnyModel::LocalCgkn(_) => ModelKind::LocalCgkn,
            AnyModel::Koopnet(_) => ModelKind::Koopnet,
            AnyModel::CgReg(_) => ModelKind::CgReg,
            AnyModel::Dnn(_) => ModelKind::Dnn,
        }
    }

    /// The conditional-Gaussian view; `None` for the black-box model.
    pub fn as_cg(&self) -> Option<&dyn CgModel> {
        match self {
            AnyModel::Cgkn(m) => Some(m),
            AnyModel::LocalCgkn(m) => Some(m),
            AnyModel::Koopnet(m) => Some(m),
            AnyModel::CgReg(m) => Some(m),
            AnyModel::Dnn(_) => None,
        }
    }

    pub fn as_cg_mut(&mut self) -> Option<&mut dyn CgModel> {
        match self {
            AnyModel::Cgkn(m) => Some(m),
            AnyModel::LocalCgkn(m) => Some(m),
            AnyModel::Koopnet(m) => Some(m),
            AnyModel::CgReg(m) => Some(m),
            AnyModel::Dnn(_) => None,
        }
    }
}

fn net(ck: &Checkpoint, name: &str) -> Result<MlpParams> {
    ck.networks
        .get(name)
        .cloned()
        .ok_or_else(|| Error::Config(format!("checkpoint lacks network `{name}`")))
}

fn tensor(ck: &Checkpoint, name: &str) -> Result<Matrix> {
    ck.tensors
        .get(name)
        .cloned()
        .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor `{name}`")))
}

fn scalar_sigma2(meta: &CheckpointMeta) -> Result<f64> {
    meta.sigma2
        .first()
        .copied()
        .ok_or_else(|| Error::Config("checkpoint lacks sigma2".into()))
}

impl Checkpoint {
    pub fn from_model(
        model: &AnyModel,
        dt: f64,
        seed: u64,
        obs_idx: &[usize],
        unobs_idx: &[usize],
        normalization: Option<Normalization>,
    ) -> Checkpoint {
        let mut networks = BTreeMap::new();
        let mut tensors = BTreeMap::new();
        let mut extra = BTreeMap::new();
        let mut library = None;
        let (d_u1, d_u2, d_v, sigma1, sigma2) = match model {
            AnyModel::Dnn(m) => {
                networks.insert("drift".to_string(), m.net.clone());
                (
                    obs_idx.len(),
                    unobs_idx.len(),
                    0,
                    m.sigma.clone(),
                    Vec::new(),
                )
            }
            _ => {
                let cg = model.as_cg().expect("conditional-Gaussian model");
                let d = cg.dims();
                (d.d_u1, d.d_u2, d.d_v, cg.sigma1().to_vec(), cg.sigma2())
            }
        };
        match model {
            AnyModel::Cgkn(m) => {
                networks.insert("encoder".into(), m.encoder.clone());
                networks.insert("decoder".into(), m.decoder.clone());
                networks.insert("eta".into(), m.eta.clone());
            }
            AnyModel::LocalCgkn(m) => {
                networks.insert("encoder".into(), m.encoder.clone());
                networks.insert("decoder".into(), m.decoder.clone());
                networks.insert("net_u1".into(), m.net_u1.clone());
                networks.insert("net_v".into(), m.net_v.clone());
                extra.insert("sites".into(), serde_json::json!(m.sites));
            }
            AnyModel::Koopnet(m) => {
                networks.insert("encoder".into(), m.encoder.clone());
                networks.insert("decoder".into(), m.decoder.clone());
                networks.insert("eta".into(), m.eta.clone());
                tensors.insert("F2".into(), Matrix::row_vector(&m.f2));
                tensors.insert("G2".into(), m.g2.clone());
            }
            AnyModel::CgReg(m) => {
                tensors.insert("Xi1".into(), m.xi1.clone());
                tensors.insert("Xi2".into(), m.xi2.clone());
                library = Some(m.library.clone());
            }
            AnyModel::Dnn(_) => {}
        }
        Checkpoint {
            metadata: CheckpointMeta {
                kind: model.kind(),
                d_u1,
                d_u2,
                d_v,
                dt,
                sigma1,
                sigma2,
                seed,
                obs_idx: obs_idx.to_vec(),
                unobs_idx: unobs_idx.to_vec(),
                normalization,
                extra,
            },
            networks,
            tensors,
            library,
        }
    }

    pub fn model(&self) -> Result<AnyModel> {
        let meta = &self.metadata;
        Ok(match meta.kind {
            ModelKind::Cgkn => AnyModel::Cgkn(CgknModel::from_parts(
                net(self, "encoder")?,
                net(self, "decoder")?,
                net(self, "eta")?,
                meta.sigma1.clone(),
                scalar_sigma2(meta)?,
            )?),
            ModelKind::LocalCgkn => {
                let sites = meta
                    .extra
                    .get("sites")
                    .and_then(|v| v.as_u64())
                    .ok_or_else(|| Error::Config("local checkpoint lacks `sites`".into()))?;
                AnyModel::LocalCgkn(LocalCgknModel::from_parts(
                    sites as usize,
                    net(self, "encoder")?,
                    net(self, "decoder")?,
                    net(self, "net_u1")?,
                    net(self, "net_v")?,
                    meta.sigma1.clone(),
                    scalar_sigma2(meta)?,
                )?)
            }
            ModelKind::Koopnet => AnyModel::Koopnet(KoopNetModel::from_parts(
                net(self, "encoder")?,
                net(self, "decoder")?,
                net(self, "eta")?,
                tensor(self, "F2")?.into_data(),
                tensor(self, "G2")?,
                meta.sigma1.clone(),
                scalar_sigma2(meta)?,
            )?),
            ModelKind::CgReg => AnyModel::CgReg(CgRegModel::new(
                meta.obs_idx.clone(),
                meta.unobs_idx.clone(),
                self.library
                    .clone()
                    .ok_or_else(|| Error::Config("regression checkpoint lacks library".into()))?,
                tensor(self, "Xi1")?,
                tensor(self, "Xi2")?,
                meta.sigma1.clone(),
                meta.sigma2.clone(),
            )?),
            ModelKind::Dnn => AnyModel::Dnn(DnnModel::from_parts(
                net(self, "drift")?,
                meta.sigma1.clone(),
            )?),
            ModelKind::Linear => {
                return Err(Error::Config(
                    "linear reference models are not checkpointed".into(),
                ))
            }
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
