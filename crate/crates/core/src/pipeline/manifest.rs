use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Branch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One image with its annotation. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub domain: Branch,
    pub image: PathBuf,
    pub annotation: PathBuf,
    /// Camera pitch in degrees, positive up (perspective only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pitch_deg: Option<f64>,
    /// Horizontal field of view in degrees (perspective only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hfov_deg: Option<f64>,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    /// Directory the relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<SampleRecord>, root: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            records,
            root: root.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {:?}", r.id)));
            }
            if r.domain == Branch::Pp && (r.pitch_deg.is_none() || r.hfov_deg.is_none()) {
                return Err(Error::Data(format!(
                    "perspective sample {:?} needs pitch_deg and hfov_deg",
                    r.id
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn select(&self, split: Split, domain: Option<Branch>) -> Vec<&SampleRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split && domain.is_none_or(|d| r.domain == d))
            .collect()
    }

    /// Copy restricted to `domains`.
    pub fn filtered(&self, domains: &[Branch]) -> Manifest {
        Manifest {
            records: self
                .records
                .iter()
                .filter(|r| domains.contains(&r.domain))
                .cloned()
                .collect(),
            root: self.root.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, domain: Branch) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            domain,
            image: "a.png".into(),
            annotation: "a.json".into(),
            pitch_deg: (domain == Branch::Pp).then_some(0.0),
            hfov_deg: (domain == Branch::Pp).then_some(90.0),
            split: Split::Train,
        }
    }

    #[test]
    fn validation_and_round_trip() {
        assert!(Manifest::new(vec![rec("a", Branch::Pano), rec("a", Branch::Pp)], ".").is_err());
        let mut bad = rec("b", Branch::Pp);
        bad.pitch_deg = None;
        assert!(Manifest::new(vec![bad], ".").is_err());
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new(vec![rec("a", Branch::Pano), rec("b", Branch::Pp)], dir.path()).unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.select(Split::Train, Some(Branch::Pp)).len(), 1);
        assert_eq!(back.filtered(&[Branch::Pano]).records.len(), 1);
    }
}
