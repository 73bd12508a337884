//! Dataset manifest: one record per source frame.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    Dense,
    Medium,
    Sparse,
    NotApplicable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Relative to the dataset root, `/` separated.
    #[serde(rename = "path")]
    pub image_path: String,
    #[serde(rename = "sub_area")]
    pub sub_area_id: String,
    #[serde(rename = "date")]
    pub collection_date: Option<NaiveDate>,
    #[serde(rename = "label")]
    pub class_label: usize,
    pub density: Density,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub taxonomy: Taxonomy,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn new(taxonomy: Taxonomy, records: Vec<SampleRecord>) -> Result<Self> {
        let m = Self { schema_version: SCHEMA_VERSION, taxonomy, records };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Manifest(format!("unsupported schema version {}", self.schema_version)));
        }
        let mut seen = HashSet::new();
        let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
        for r in &self.records {
            self.taxonomy.check_label(r.class_label)?;
            let seagrass = self.taxonomy.is_seagrass(r.class_label);
            if seagrass == (r.density == Density::NotApplicable) {
                return Err(Error::Manifest(format!(
                    "density {:?} is invalid for class {} (`{}`)",
                    r.density,
                    self.taxonomy.name(r.class_label).unwrap_or("?"),
                    r.image_path
                )));
            }
            if !seen.insert(r.image_path.as_str()) {
                return Err(Error::DuplicatePath(r.image_path.clone()));
            }
            if r.split != Split::Unassigned {
                if let Some(prev) = split_of.insert(&r.sub_area_id, r.split) {
                    if prev != r.split {
                        return Err(Error::Manifest(format!("sub-area `{}` straddles train and test", r.sub_area_id)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Distinct sub-area ids in sorted order.
    pub fn sub_areas(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.records.iter().map(|r| r.sub_area_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}
