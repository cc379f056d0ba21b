//! Versioned JSON reports with a content digest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::Failure;

pub const SCHEMA_VERSION: u32 = 1;

/// `digest` is the hex SHA-256 of the pretty JSON of the report with the
/// digest field removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report<T> {
    pub schema: String,
    pub version: u32,
    pub tool: String,
    pub config: RunConfig,
    /// Digests of the artifacts the report was computed from.
    pub inputs: BTreeMap<String, String>,
    pub body: T,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub digest: Option<String>,
}

impl<T: Serialize + DeserializeOwned> Report<T> {
    pub fn new(schema: &str, config: &RunConfig, inputs: BTreeMap<String, String>, body: T) -> Self {
        Self {
            schema: schema.to_owned(),
            version: SCHEMA_VERSION,
            tool: concat!("ssmix ", env!("CARGO_PKG_VERSION")).to_owned(),
            config: config.clone(),
            inputs,
            body,
            digest: None,
        }
    }

    fn content_digest(&self) -> Result<String, Failure> {
        let mut v = serde_json::to_value(self).map_err(ssmix::Error::from)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("digest");
        }
        let bytes = serde_json::to_vec_pretty(&v).map_err(ssmix::Error::from)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// Stamps the digest and writes the report; returns the digest.
    pub fn write(mut self, path: &Path) -> Result<String, Failure> {
        self.digest = None;
        let d = self.content_digest()?;
        self.digest = Some(d.clone());
        let mut text = serde_json::to_string_pretty(&self).map_err(ssmix::Error::from)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Failure::io(path, e))?;
        Ok(d)
    }

    /// Reads a report and checks its digest and, when given, its schema.
    pub fn read(path: &Path, schema: Option<&str>) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        let mut r: Self = serde_json::from_str(&text).map_err(ssmix::Error::from)?;
        let bad = |m: String| Failure::Lib(ssmix::Error::Format(format!("{}: {m}", path.display())));
        let want = schema.unwrap_or(&r.schema);
        if r.schema != want || r.version != SCHEMA_VERSION {
            return Err(bad(format!("expected {want} v{SCHEMA_VERSION}, found {} v{}", r.schema, r.version)));
        }
        let stored = r.digest.take().ok_or_else(|| bad("no digest".into()))?;
        if r.content_digest()? != stored {
            return Err(bad("digest mismatch".into()));
        }
        r.digest = Some(stored);
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tampering_breaks_the_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let r = Report::new("test", &RunConfig::default(), BTreeMap::new(), vec![1.5, 2.5]);
        r.write(&path).unwrap();
        let back = Report::<Vec<f64>>::read(&path, Some("test")).unwrap();
        assert_eq!(back.body, [1.5, 2.5]);
        assert!(Report::<Vec<f64>>::read(&path, Some("other")).is_err());
        let text = std::fs::read_to_string(&path).unwrap().replace("2.5", "2.25");
        std::fs::write(&path, text).unwrap();
        assert!(Report::<Vec<f64>>::read(&path, Some("test")).is_err());
    }
}
