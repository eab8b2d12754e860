//! Run manifests: the provenance record written first into every run directory.
//!
//! A manifest pins everything needed to reproduce or safely resume a run —
//! digests of the dataset, schema, and template, the rendered-prompt
//! fingerprint, backend identity, generation parameters, and the few-shot
//! selection. `predictions.csv` is written last, so a directory containing a
//! manifest but no CSV is an interrupted run.

use std::path::Path;

use radlabel_client::{EndpointConfig, GenerationParams};
use radlabel_core::ensemble::TieBreak;
use radlabel_core::parser::NormalizationMode;
use serde::{Deserialize, Serialize};

use crate::errors::{CliError, CliResult};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

/// Post-processing applied to every parsed label vector before it is written.
pub fn pipeline_stages() -> Vec<String> {
    ["normalize", "collapse_no_information", "propagate_hierarchy"]
        .into_iter()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunManifest {
    Model(ModelRunManifest),
    Ensemble(EnsembleRunManifest),
}

impl RunManifest {
    pub fn run_id(&self) -> &str {
        match self {
            RunManifest::Model(m) => &m.run_id,
            RunManifest::Ensemble(m) => &m.run_id,
        }
    }

    pub fn dataset_digest(&self) -> &str {
        match self {
            RunManifest::Model(m) => &m.dataset_digest,
            RunManifest::Ensemble(m) => &m.dataset_digest,
        }
    }

    pub fn schema_digest(&self) -> &str {
        match self {
            RunManifest::Model(m) => &m.schema_digest,
            RunManifest::Ensemble(m) => &m.schema_digest,
        }
    }

    /// Report ids used as few-shot examples, for contamination checks.
    pub fn few_shot_ids(&self) -> &[String] {
        match self {
            RunManifest::Model(m) => m.few_shot.as_ref().map_or(&[], |f| &f.example_ids),
            RunManifest::Ensemble(_) => &[],
        }
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("malformed {}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::validation(format!("cannot serialize manifest: {e}")))?;
        text.push('\n');
        std::fs::write(&path, text)
            .map_err(|e| CliError::validation(format!("cannot write {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FewShotManifest {
    pub seed: u64,
    pub example_ids: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelRunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub created_at: String,
    /// sha256 of the dataset file bytes
    pub dataset_digest: String,
    /// sha256 of the schema file bytes
    pub schema_digest: String,
    /// sha256 of the template file bytes
    pub template_digest: String,
    /// Fingerprint of the fully rendered prompt scaffold (template + schema
    /// + shots), independent of file formatting
    pub rendered_template_hash: String,
    pub backend: String,
    pub model_name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<EndpointConfig>,
    pub params: GenerationParams,
    pub normalization: NormalizationMode,
    pub pipeline_stages: Vec<String>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub few_shot: Option<FewShotManifest>,
    pub concurrency: usize,
}

impl ModelRunManifest {
    /// A resumed run must be a continuation of the *same* experiment: same
    /// inputs, same prompt scaffold, same backend identity, same
    /// normalization. Generation params and concurrency may differ — they do
    /// not change what a cached record means.
    pub fn check_resume_compatible(&self, fresh: &ModelRunManifest) -> CliResult<()> {
        let fields = [
            ("dataset", &self.dataset_digest, &fresh.dataset_digest),
            ("schema", &self.schema_digest, &fresh.schema_digest),
            ("template", &self.template_digest, &fresh.template_digest),
            (
                "rendered prompt",
                &self.rendered_template_hash,
                &fresh.rendered_template_hash,
            ),
            ("backend", &self.backend, &fresh.backend),
            ("model", &self.model_name, &fresh.model_name),
        ];
        for (what, stored, current) in fields {
            if stored != current {
                return Err(CliError::validation(format!(
                    "cannot resume: {what} changed (run dir has {stored}, current inputs give {current})"
                )));
            }
        }
        if self.normalization != fresh.normalization {
            return Err(CliError::validation(
                "cannot resume: normalization mode changed".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleRunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub created_at: String,
    pub dataset_digest: String,
    pub schema_digest: String,
    /// Member run ids in priority order
    pub members: Vec<String>,
    pub tie_break: TieBreak,
    /// Number of (report, finding) cells decided by the tie-break rule
    pub tie_count: usize,
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}
