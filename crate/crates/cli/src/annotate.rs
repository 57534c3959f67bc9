//! Element-presence sheets for manual review of generated images.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const ANNOTATION_SCHEMA_VERSION: u32 = 1;
/// File written next to the generated images.
pub const ANNOTATION_FILE: &str = "annotations.json";

/// Which listed elements (e.g. "A bus", "Clouds") an annotator saw in one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSheet {
    pub schema_version: u32,
    pub image_id: String,
    pub elements: Vec<String>,
    pub presence: BTreeMap<String, bool>,
    pub annotator: String,
}

impl AnnotationSheet {
    /// A sheet with every element marked absent, ready to be filled in.
    pub fn empty(image_id: &str, elements: &[String], annotator: &str) -> Self {
        Self {
            schema_version: ANNOTATION_SCHEMA_VERSION,
            image_id: image_id.to_string(),
            elements: elements.to_vec(),
            presence: elements.iter().map(|e| (e.clone(), false)).collect(),
            annotator: annotator.to_string(),
        }
    }

    /// Every listed element has exactly one presence entry and nothing else does.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.elements {
            if !seen.insert(e) {
                return Err(format!("{}: element {e:?} listed twice", self.image_id));
            }
            if !self.presence.contains_key(e) {
                return Err(format!("{}: no presence value for {e:?}", self.image_id));
            }
        }
        if let Some(extra) = self.presence.keys().find(|k| !seen.contains(k)) {
            return Err(format!(
                "{}: {extra:?} is not a listed element",
                self.image_id
            ));
        }
        Ok(())
    }
}

/// Image ids of the generated images in `dir`: PNG files with a sidecar, sorted.
pub fn generated_images(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "png") && path.with_extension("json").is_file() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// One empty sheet per generated image in `dir`.
pub fn templates(dir: &Path, elements: &[String], annotator: &str) -> Result<Vec<AnnotationSheet>> {
    let sheets: Vec<AnnotationSheet> = generated_images(dir)?
        .iter()
        .map(|id| AnnotationSheet::empty(id, elements, annotator))
        .collect();
    for s in &sheets {
        s.validate().map_err(CliError::Config)?;
    }
    Ok(sheets)
}
