//! Versioned JSON checkpoints.
//!
//! Floats are written in shortest round-trip form and parsed exactly, so
//! save followed by load reproduces every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::ExactGp;
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::rff::RffModel;
use crate::training::TrainState;
use crate::vip::VipModel;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "state", rename_all = "kebab-case")]
pub enum ModelState {
    DlfmRff(RffModel),
    DlfmVip(VipModel),
    DgpRff(RffModel),
    /// One independent GP per output.
    ExactGp(Vec<ExactGp>),
}

impl ModelState {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelState::DlfmRff(_) => "dlfm-rff",
            ModelState::DlfmVip(_) => "dlfm-vip",
            ModelState::DgpRff(_) => "dgp-rff",
            ModelState::ExactGp(_) => "exact-gp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelState,
    /// Present for trained variational models; used to resume.
    pub train_state: Option<TrainState>,
    pub standardizer: Standardizer,
}

impl Checkpoint {
    pub fn new(model: ModelState, train_state: Option<TrainState>, standardizer: Standardizer) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model,
            train_state,
            standardizer,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "checkpoint version {v} is not supported (expected {CHECKPOINT_VERSION})"
                )))
            }
            None => return Err(Error::Checkpoint("missing version field".into())),
        }
        serde_json::from_value(value).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Parameterized;
    use crate::numerics::{Matrix, RngStream};
    use crate::rff::{FeatureKind, RffConfig};
    use crate::training::AdamState;
    use crate::vip::VipConfig;

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn rff_round_trip_is_bit_exact() {
        let mut cfg = RffConfig::new(FeatureKind::Ode1, 1, 1, vec![2]);
        cfg.n_rf = 7;
        let mut m = RffModel::new(&cfg, 3).unwrap();
        let mut r = RngStream::new(0, 0);
        let p: Vec<f64> = m.param_vec().iter().map(|v| v + r.normal() * 1e-3 / 3.0).collect();
        m.set_param_vec(&p);
        let state = TrainState {
            iteration: 12,
            adam: AdamState {
                m: p.iter().map(|v| v / 7.0).collect(),
                v: p.iter().map(|v| v * v / 3.0).collect(),
                step: 12,
            },
        };
        let ck = Checkpoint::new(ModelState::DlfmRff(m), Some(state), Standardizer::identity(1, 1));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        if let (ModelState::DlfmRff(mut a), ModelState::DlfmRff(mut b)) = (ck.model.clone(), back.model.clone()) {
            assert_eq!(bits(&a.param_vec()), bits(&b.param_vec()));
        }
        assert_eq!(back.to_json().unwrap(), ck.to_json().unwrap());
    }

    #[test]
    fn vip_round_trip() {
        let x = Matrix::from_fn(10, 1, |i, _| i as f64 / 10.0);
        let mut cfg = VipConfig::new(1, 1, vec![]);
        cfg.n_inducing = 4;
        let m = VipModel::new(&cfg, &x, 0).unwrap();
        let ck = Checkpoint::new(ModelState::DlfmVip(m), None, Standardizer::identity(1, 1));
        assert_eq!(Checkpoint::from_json(&ck.to_json().unwrap()).unwrap(), ck);
    }

    #[test]
    fn version_mismatch_rejected() {
        let x = Matrix::column(&[0.0, 1.0]);
        let gp = crate::baselines::ExactGp::new(x, vec![0.0, 1.0], 1.0, 1.0, 0.1).unwrap();
        let ck = Checkpoint::new(ModelState::ExactGp(vec![gp]), None, Standardizer::identity(1, 1));
        let text = ck.to_json().unwrap().replacen("\"version\":1", "\"version\":99", 1);
        let err = Checkpoint::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
        assert!(Checkpoint::from_json("{}").is_err());
    }
}
