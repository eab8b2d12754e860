//! The few-shot selection file: written by `select-shots`, read by `label`.
//!
//! It carries the example reports *inline* (not just ids) so a labeling run
//! never needs the original pool file, and records the seed and covered
//! findings for provenance.

use std::collections::BTreeSet;
use std::path::Path;

use radlabel_core::prompt::{FewShotExample, FewShotSet};
use serde::{Deserialize, Serialize};

use crate::errors::{CliError, CliResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShotsFile {
    /// Seed used for tie-breaking during greedy selection.
    pub seed: u64,
    pub example_ids: Vec<String>,
    /// Findings that have at least one `yes` among the examples.
    pub covered: BTreeSet<String>,
    pub examples: Vec<FewShotExample>,
}

impl ShotsFile {
    pub fn from_set(set: &FewShotSet, seed: u64) -> Self {
        ShotsFile {
            seed,
            example_ids: set.example_ids(),
            covered: set.covered.clone(),
            examples: set.examples.clone(),
        }
    }

    pub fn to_set(&self) -> FewShotSet {
        FewShotSet {
            examples: self.examples.clone(),
            covered: self.covered.clone(),
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        let file: ShotsFile = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("malformed shots file {}: {e}", path.display())))?;
        if file.examples.is_empty() {
            return Err(CliError::usage(format!(
                "shots file {} contains no examples",
                path.display()
            )));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::validation(format!("cannot serialize shots file: {e}")))?;
        text.push('\n');
        std::fs::write(path, text)
            .map_err(|e| CliError::validation(format!("cannot write {}: {e}", path.display())))
    }
}
