//! JSON checkpoints: free-form metadata plus named flat parameter arrays.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, TmowError};
use crate::nncore::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, Value>,
    pub params: BTreeMap<String, ParamRecord>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            ..Self::default()
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.meta.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| TmowError::Parse(format!("checkpoint metadata lacks {key:?}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn put(&mut self, name: impl Into<String>, t: &Tensor) {
        self.params.insert(
            name.into(),
            ParamRecord {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            },
        );
    }

    pub fn take(&self, name: &str) -> Result<Tensor> {
        let r = self
            .params
            .get(name)
            .ok_or_else(|| TmowError::Parse(format!("checkpoint lacks parameter {name:?}")))?;
        Tensor::new(r.shape.clone(), r.data.clone())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(TmowError::Contract(format!(
                "expected a {kind} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| TmowError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(TmowError::MissingArtifact(vec![path.to_path_buf()]));
        }
        let text = fs::read_to_string(path).map_err(|e| TmowError::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::randn(&[3, 5], 0.7, &mut rng);
        let mut c = Checkpoint::new("test");
        c.put("w", &t);
        c.set_meta("layers", 8usize).unwrap();
        let back = Checkpoint::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.take("w").unwrap(), t);
        assert_eq!(back.meta::<usize>("layers").unwrap(), 8);
        assert!(back.take("v").is_err());
    }

    #[test]
    fn missing_file_is_a_missing_artifact() {
        let err = Checkpoint::load(Path::new("/nonexistent/x.json")).unwrap_err();
        assert!(matches!(err, TmowError::MissingArtifact(_)));
    }
}
