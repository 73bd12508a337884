//! Manifest construction and dataset splits.
//!
//! Directory layout: `root/<class>/<sub_area>/<image>`. A sub-area
//! directory may hold a `meta.json` with `{"date": "YYYY-MM-DD",
//! "density": "dense"|"medium"|"sparse"}`; without it the date is unknown
//! and seagrass classes default to `dense`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::manifest::{Density, Manifest, SampleRecord, Split};
use crate::rng::Rng;
use crate::taxonomy::Taxonomy;

pub const SUBAREA_META: &str = "meta.json";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubAreaMeta {
    date: Option<NaiveDate>,
    density: Option<Density>,
}

pub fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<fs::DirEntry>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

fn utf8_name(entry: &fs::DirEntry) -> Result<String> {
    entry.file_name().into_string().map_err(|n| Error::Invalid(format!("non UTF-8 file name {n:?}")))
}

/// Walks `root/<class>/<sub_area>/<image>` into an unassigned manifest,
/// sorted by path. Every image header is decoded to prove readability.
pub fn build_manifest(root: &Path, taxonomy: Taxonomy) -> Result<Manifest> {
    let mut records = Vec::new();
    for class_entry in sorted_entries(root)? {
        if !class_entry.path().is_dir() {
            continue;
        }
        let class_name = utf8_name(&class_entry)?;
        let label = taxonomy.index_of(&class_name).ok_or_else(|| Error::UnknownClass(class_name.clone()))?;
        for area_entry in sorted_entries(&class_entry.path())? {
            let area_path = area_entry.path();
            if !area_path.is_dir() {
                if is_image_file(&area_path) {
                    return Err(Error::Invalid(format!(
                        "image `{}` is not inside a sub-area directory",
                        area_path.display()
                    )));
                }
                continue;
            }
            let sub_area = utf8_name(&area_entry)?;
            let meta_path = area_path.join(SUBAREA_META);
            let meta: SubAreaMeta = if meta_path.is_file() {
                let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
                serde_json::from_str(&text)?
            } else {
                SubAreaMeta::default()
            };
            let density = if taxonomy.is_seagrass(label) {
                meta.density.unwrap_or(Density::Dense)
            } else {
                Density::NotApplicable
            };
            for image_entry in sorted_entries(&area_path)? {
                let path = image_entry.path();
                if !path.is_file() || !is_image_file(&path) {
                    continue;
                }
                image::image_dimensions(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
                records.push(SampleRecord {
                    image_path: format!("{class_name}/{sub_area}/{}", utf8_name(&image_entry)?),
                    sub_area_id: sub_area.clone(),
                    collection_date: meta.date,
                    class_label: label,
                    density,
                    split: Split::Unassigned,
                });
            }
        }
    }
    records.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    Manifest::new(taxonomy, records)
}

/// Geographic holdout: every record of a listed sub-area goes to `Test`,
/// everything else to `Train`.
pub fn split_by_subarea(manifest: &Manifest, test_subareas: &BTreeSet<String>) -> Result<Manifest> {
    let present: BTreeSet<&str> = manifest.sub_areas().into_iter().collect();
    if let Some(missing) = test_subareas.iter().find(|id| !present.contains(id.as_str())) {
        return Err(Error::UnknownSubArea(missing.clone()));
    }
    let mut out = manifest.clone();
    for r in &mut out.records {
        r.split = if test_subareas.contains(&r.sub_area_id) { Split::Test } else { Split::Train };
    }
    out.validate()?;
    Ok(out)
}

/// Reads one sub-area id per line; blank lines and `#` comments are skipped.
pub fn read_subarea_list(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(str::to_owned).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    fold_count: usize,
    assignments: Vec<usize>,
}

impl FoldAssignment {
    pub fn fold_count(&self) -> usize {
        self.fold_count
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    /// Indices held out in `fold`, ascending.
    pub fn validation(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    /// Indices trained on when `fold` is held out, ascending.
    pub fn training(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.fold_count];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles record indices with the seeded generator and deals them
/// round-robin, so fold sizes differ by at most one. Not stratified.
pub fn kfold_split<T>(records: &[T], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Invalid(format!("k-fold needs k >= 2, got {k}")));
    }
    if records.is_empty() {
        return Err(Error::Invalid("k-fold over zero records".into()));
    }
    if k > records.len() {
        return Err(Error::Invalid(format!("k = {k} exceeds record count {}", records.len())));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    Rng::seeded(seed).shuffle(&mut order);
    let mut assignments = vec![0; records.len()];
    for (position, &idx) in order.iter().enumerate() {
        assignments[idx] = position % k;
    }
    Ok(FoldAssignment { fold_count: k, assignments })
}
