//! Versioned binary checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multiwarp::Model;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GEOSHFT\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    Aggregator,
    Adapt,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "train-base",
            Stage::Aggregator => "train-aggregator",
            Stage::Adapt => "adapt",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub stage: Stage,
    pub step: u64,
    /// The trained model; after adaptation this is the student.
    pub model: Model,
    /// Mean-teacher mirror, present after adaptation.
    pub teacher: Option<Model>,
    /// JSON text of the configuration that produced this checkpoint.
    pub config: String,
    /// JSON text of stage metrics (e.g. validation AP).
    pub metrics: String,
}

impl Checkpoint {
    pub fn new(stage: Stage, step: u64, model: Model, teacher: Option<Model>, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            version: CHECKPOINT_VERSION,
            stage,
            step,
            model,
            teacher,
            config: serde_json::to_string(config)?,
            metrics: "{}".into(),
        })
    }

    /// The model used for inference: the teacher when present.
    pub fn inference_model(&self) -> &Model {
        self.teacher.as_ref().unwrap_or(&self.model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        bincode::serialize_into(&mut out, self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| Error::Checkpoint("not a checkpoint file".into()))?;
        let version = body
            .get(..4)
            .map(|v| u32::from_le_bytes([v[0], v[1], v[2], v[3]]))
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        bincode::deserialize(body).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint, reporting a missing file as a missing upstream `stage`.
    pub fn load(path: &Path, stage: Stage) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing {
                what: format!("{} checkpoint", stage.name()),
                detail: format!("{} not found; run `{}` first", path.display(), stage.name()),
            },
            _ => Error::io(path, e),
        })?;
        let ck = Self::from_bytes(&bytes)?;
        if ck.stage != stage {
            return Err(Error::Checkpoint(format!(
                "{} holds a {} checkpoint, expected {}",
                path.display(),
                ck.stage.name(),
                stage.name()
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(DetectorConfig::default(), &mut rng).unwrap();
        let ck = Checkpoint::new(Stage::Base, 12, model, None, &serde_json::json!({"seed": 1})).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_foreign_and_future_files() {
        assert!(Checkpoint::from_bytes(b"hello").is_err());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(DetectorConfig::default(), &mut rng).unwrap();
        let mut ck = Checkpoint::new(Stage::Base, 0, model, None, &()).unwrap();
        ck.version = 99;
        assert!(matches!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_file_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        match Checkpoint::load(&dir.path().join("base.ckpt"), Stage::Base) {
            Err(Error::Missing { what, .. }) => assert!(what.contains("train-base")),
            other => panic!("{other:?}"),
        }
    }
}
