//! Label post-processing: class collapse and hierarchy propagation.
//!
//! The pipeline runs in a fixed order: normalize, collapse `no_information`
//! away (multiclass3), propagate hierarchy, and — for binary evaluation only —
//! collapse `maybe` into `yes`. Propagation requires the `no_information`
//! collapse to have happened first, because an unranked label has no place in
//! the severity order the hierarchy relies on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{FindingLabel, FindingSchema, LabelVector};

/// How to fold the four raw labels down for a downstream consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollapsePolicy {
    /// `maybe` becomes `yes`, `no_information` becomes `no`.
    Binary,
    /// `no_information` becomes `no`; `maybe` survives.
    Multiclass3,
}

impl CollapsePolicy {
    /// Stable lowercase token, used in output file names and report headers.
    pub fn token(self) -> &'static str {
        match self {
            CollapsePolicy::Binary => "binary",
            CollapsePolicy::Multiclass3 => "multiclass3",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PostprocessError {
    #[error("hierarchy propagation requires collapsed labels, found no_information for {finding}")]
    UncollapsedLabels { finding: String },
}

/// Applies a collapse policy to every assignment.
pub fn collapse(labels: &LabelVector, policy: CollapsePolicy) -> LabelVector {
    labels.map_labels(|label| match (policy, label) {
        (CollapsePolicy::Binary, FindingLabel::Maybe) => FindingLabel::Yes,
        (_, FindingLabel::NoInformation) => FindingLabel::No,
        (_, other) => other,
    })
}

/// Promotes a parent to `yes` whenever any of its children is `yes`,
/// repeating until nothing changes. Children are never modified and `maybe`
/// never promotes. Inputs must already be free of `no_information`.
pub fn propagate_hierarchy(
    labels: &LabelVector,
    schema: &FindingSchema,
) -> Result<LabelVector, PostprocessError> {
    for (finding, label) in labels.iter() {
        if label == FindingLabel::NoInformation {
            return Err(PostprocessError::UncollapsedLabels {
                finding: finding.to_string(),
            });
        }
    }

    let mut out = labels.clone();
    loop {
        let mut changed = false;
        for rule in &schema.hierarchy {
            let parent_label = out.get(&rule.parent).unwrap_or(FindingLabel::No);
            if parent_label == FindingLabel::Yes {
                continue;
            }
            let any_yes_child = rule
                .children
                .iter()
                .any(|child| out.get(child) == Some(FindingLabel::Yes));
            if any_yes_child {
                out.set(&rule.parent, FindingLabel::Yes)
                    .expect("hierarchy findings are validated against the schema");
                changed = true;
            }
        }
        if !changed {
            return Ok(out);
        }
    }
}
