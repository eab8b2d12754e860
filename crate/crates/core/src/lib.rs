//! Core logic for labeling radiology reports with language models: finding
//! schemas and label vectors, prompt construction with coverage-greedy
//! few-shot selection, robust extraction of label JSON from model output,
//! hierarchy-aware post-processing, majority-vote ensembling, and the
//! evaluation statistics used to compare runs.
//!
//! Everything here is pure and deterministic; network and filesystem concerns
//! live in the companion client and CLI crates.

pub mod ensemble;
pub mod parser;
pub mod postprocess;
pub mod prompt;
pub mod report;
pub mod schema;
pub mod stats;

pub use ensemble::{majority_vote, EnsembleConfig, EnsembleError, TieBreak, VoteOutcome};
pub use parser::{
    extract_json, fold_key, normalize_label, parse_labels, ExtractionMethod, NormalizationMode,
    NormalizationPolicy, OffTemplateToken, ParseDiagnostics,
};
pub use postprocess::{collapse, propagate_hierarchy, CollapsePolicy, PostprocessError};
pub use prompt::{
    render_few_shot, render_zero_shot, select_few_shot, template_fingerprint, ChatMessage,
    FewShotExample, FewShotSet, PromptBundle, PromptError, PromptPayload, PromptTemplate,
    TemplateMode, WireMode,
};
pub use report::{binary_metrics, kappa_metrics, EvaluationReport, F1Block, KappaBlock, MetricsReport};
pub use schema::{
    validate_dataset, Dataset, FindingLabel, FindingSchema, HierarchyRule, LabelVector, Report,
    Violation,
};
pub use stats::{
    bonferroni, cohens_kappa, confusion_counts, f1_score, finding_kappa, mcnemar_p,
    micro_macro_f1, paired_contingency, stars, ConfusionCounts, PairedContingency,
    SignificanceResult, StatsError,
};
