//! Finding schemas, reports, label vectors and dataset validation.
//!
//! A [`FindingSchema`] fixes everything a labeling run asks about: the ordered
//! finding list, the allowed answer classes (binary `yes`/`no` or three-class
//! `yes`/`maybe`/`no`) and the parent/child rules used when propagating labels
//! up the finding hierarchy. A [`Dataset`] pairs free-text [`Report`]s with
//! optional gold labels. [`validate_dataset`] collects every violation instead
//! of failing on the first one, so data problems surface in a single pass.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A single finding-level answer.
///
/// `NoInformation` is only ever a pre-collapse model answer: gold labels and
/// post-processed predictions are restricted to the schema's classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingLabel {
    No,
    Maybe,
    Yes,
    NoInformation,
}

impl FindingLabel {
    /// Severity rank used by hierarchy propagation: `No` < `Maybe` < `Yes`.
    ///
    /// `NoInformation` has no position on the severity scale and must be
    /// collapsed away before anything rank-based runs.
    pub fn rank(self) -> Result<u8, LabelError> {
        match self {
            FindingLabel::No => Ok(0),
            FindingLabel::Maybe => Ok(1),
            FindingLabel::Yes => Ok(2),
            FindingLabel::NoInformation => Err(LabelError::Unranked),
        }
    }

    /// Canonical lowercase token used in data files, prompts and CSV output.
    pub fn token(self) -> &'static str {
        match self {
            FindingLabel::No => "no",
            FindingLabel::Maybe => "maybe",
            FindingLabel::Yes => "yes",
            FindingLabel::NoInformation => "no_information",
        }
    }

    /// Parses a canonical token. Anything non-canonical (case variants,
    /// synonyms, prose) is the normalizer's job, not this function's.
    pub fn from_token(token: &str) -> Option<Self> {
        match token {
            "no" => Some(FindingLabel::No),
            "maybe" => Some(FindingLabel::Maybe),
            "yes" => Some(FindingLabel::Yes),
            "no_information" => Some(FindingLabel::NoInformation),
            _ => None,
        }
    }
}

impl fmt::Display for FindingLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LabelError {
    #[error("no_information carries no severity rank; collapse it before ranking")]
    Unranked,
}

/// The answer classes a schema allows models to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelClasses {
    YesNo,
    YesMaybeNo,
}

impl LabelClasses {
    pub fn labels(self) -> &'static [FindingLabel] {
        match self {
            LabelClasses::YesNo => &[FindingLabel::Yes, FindingLabel::No],
            LabelClasses::YesMaybeNo => {
                &[FindingLabel::Yes, FindingLabel::Maybe, FindingLabel::No]
            }
        }
    }

    pub fn contains(self, label: FindingLabel) -> bool {
        self.labels().contains(&label)
    }

    /// Tokens in canonical order, e.g. for a placeholder like `<yes|no>`.
    pub fn tokens(self) -> Vec<&'static str> {
        self.labels().iter().map(|l| l.token()).collect()
    }
}

impl Serialize for LabelClasses {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.tokens().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for LabelClasses {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(deserializer)?;
        let mut sorted: Vec<&str> = tokens.iter().map(String::as_str).collect();
        sorted.sort_unstable();
        match sorted.as_slice() {
            ["no", "yes"] => Ok(LabelClasses::YesNo),
            ["maybe", "no", "yes"] => Ok(LabelClasses::YesMaybeNo),
            _ => Err(serde::de::Error::custom(format!(
                "classes must be [\"yes\",\"no\"] or [\"yes\",\"maybe\",\"no\"], got {tokens:?}"
            ))),
        }
    }
}

/// One propagation rule: if any trigger child is `yes`, the parent becomes `yes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyRule {
    pub parent: String,
    pub children: Vec<String>,
}

/// The finding vocabulary for one labeling task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FindingSchema {
    pub name: String,
    pub classes: LabelClasses,
    pub findings: Vec<String>,
    #[serde(default)]
    pub hierarchy: Vec<HierarchyRule>,
    /// Optional pretty names for report tables; falls back to a prettified key.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub display_names: BTreeMap<String, String>,
}

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("failed to read schema file: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema name is empty")]
    EmptyName,
    #[error("schema declares no findings")]
    NoFindings,
    #[error("finding identifier is empty")]
    EmptyFinding,
    #[error("duplicate finding {0:?}")]
    DuplicateFinding(String),
    #[error("hierarchy rule references unknown finding {0:?}")]
    UnknownHierarchyFinding(String),
    #[error("hierarchy rule for {0:?} has no children")]
    EmptyChildren(String),
    #[error("more than one hierarchy rule for parent {0:?}")]
    DuplicateParent(String),
    #[error("hierarchy contains a cycle through {0:?}")]
    HierarchyCycle(String),
    #[error("display name given for unknown finding {0:?}")]
    UnknownDisplayName(String),
}

impl FindingSchema {
    /// Parses and validates a schema from its JSON representation.
    pub fn from_json(json: &str) -> Result<Self, SchemaError> {
        let schema: FindingSchema = serde_json::from_str(json)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SchemaError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.name.trim().is_empty() {
            return Err(SchemaError::EmptyName);
        }
        if self.findings.is_empty() {
            return Err(SchemaError::NoFindings);
        }
        let mut seen = BTreeSet::new();
        for finding in &self.findings {
            if finding.trim().is_empty() {
                return Err(SchemaError::EmptyFinding);
            }
            if !seen.insert(finding.as_str()) {
                return Err(SchemaError::DuplicateFinding(finding.clone()));
            }
        }
        let mut parents = BTreeSet::new();
        for rule in &self.hierarchy {
            if !seen.contains(rule.parent.as_str()) {
                return Err(SchemaError::UnknownHierarchyFinding(rule.parent.clone()));
            }
            if !parents.insert(rule.parent.as_str()) {
                return Err(SchemaError::DuplicateParent(rule.parent.clone()));
            }
            if rule.children.is_empty() {
                return Err(SchemaError::EmptyChildren(rule.parent.clone()));
            }
            for child in &rule.children {
                if !seen.contains(child.as_str()) {
                    return Err(SchemaError::UnknownHierarchyFinding(child.clone()));
                }
            }
        }
        self.check_acyclic()?;
        for key in self.display_names.keys() {
            if !seen.contains(key.as_str()) {
                return Err(SchemaError::UnknownDisplayName(key.clone()));
            }
        }
        Ok(())
    }

    /// Rejects cycles in the child -> parent propagation graph so that
    /// fixpoint propagation always terminates.
    fn check_acyclic(&self) -> Result<(), SchemaError> {
        // edge child -> parent for every (parent, child) pair
        let mut edges: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for rule in &self.hierarchy {
            for child in &rule.children {
                edges.entry(child.as_str()).or_default().push(rule.parent.as_str());
            }
        }
        // iterative DFS with a three-state visit mark
        let mut state: BTreeMap<&str, u8> = BTreeMap::new(); // 1 = on stack, 2 = done
        for start in edges.keys().copied().collect::<Vec<_>>() {
            if state.get(start).copied().unwrap_or(0) == 2 {
                continue;
            }
            let mut stack: Vec<(&str, usize)> = vec![(start, 0)];
            state.insert(start, 1);
            while let Some(&mut (node, ref mut next)) = stack.last_mut() {
                let parents = edges.get(node).map(Vec::as_slice).unwrap_or(&[]);
                if *next < parents.len() {
                    let parent = parents[*next];
                    *next += 1;
                    match state.get(parent).copied().unwrap_or(0) {
                        0 => {
                            state.insert(parent, 1);
                            stack.push((parent, 0));
                        }
                        1 => return Err(SchemaError::HierarchyCycle(parent.to_string())),
                        _ => {}
                    }
                } else {
                    state.insert(node, 2);
                    stack.pop();
                }
            }
        }
        Ok(())
    }

    pub fn has_finding(&self, finding: &str) -> bool {
        self.findings.iter().any(|f| f == finding)
    }

    /// Pretty name for tables: explicit display name if present, otherwise the
    /// key with separators spaced out and words capitalized.
    pub fn display_name(&self, finding: &str) -> String {
        if let Some(name) = self.display_names.get(finding) {
            return name.clone();
        }
        prettify_finding(finding)
    }
}

/// "pleural_effusion" -> "Pleural Effusion".
pub fn prettify_finding(finding: &str) -> String {
    finding
        .split(['_', '-'])
        .filter(|part| !part.is_empty())
        .map(|part| {
            let mut chars = part.chars();
            match chars.next() {
                Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// One free-text report to label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Error)]
pub enum LabelVectorError {
    #[error("unknown finding {0:?}")]
    UnknownFinding(String),
    #[error("missing finding {0:?}")]
    MissingFinding(String),
}

/// A total assignment of one label per schema finding, kept in schema order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVector {
    assignments: IndexMap<String, FindingLabel>,
}

impl LabelVector {
    /// Builds a vector by evaluating `f` for each finding in schema order.
    pub fn from_fn(schema: &FindingSchema, mut f: impl FnMut(&str) -> FindingLabel) -> Self {
        let assignments = schema
            .findings
            .iter()
            .map(|finding| (finding.clone(), f(finding)))
            .collect();
        LabelVector { assignments }
    }

    /// The same label for every finding (e.g. the all-`no` fallback vector).
    pub fn uniform(schema: &FindingSchema, label: FindingLabel) -> Self {
        Self::from_fn(schema, |_| label)
    }

    /// Builds a vector over the same findings (and order) as `template`.
    pub fn from_fn_like(template: &LabelVector, mut f: impl FnMut(&str) -> FindingLabel) -> Self {
        LabelVector {
            assignments: template
                .assignments
                .keys()
                .map(|finding| (finding.clone(), f(finding)))
                .collect(),
        }
    }

    /// Builds a vector directly from ordered (finding, label) pairs; a
    /// repeated finding keeps its first position with the last label.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, FindingLabel)>) -> Self {
        LabelVector {
            assignments: pairs.into_iter().collect(),
        }
    }

    /// A new vector with every label transformed by `f`, order preserved.
    pub fn map_labels(&self, f: impl Fn(FindingLabel) -> FindingLabel) -> Self {
        LabelVector {
            assignments: self
                .assignments
                .iter()
                .map(|(finding, label)| (finding.clone(), f(*label)))
                .collect(),
        }
    }

    /// Builds a vector from an unordered map; the map must cover the schema's
    /// findings exactly.
    pub fn from_map(
        schema: &FindingSchema,
        labels: &BTreeMap<String, FindingLabel>,
    ) -> Result<Self, LabelVectorError> {
        for key in labels.keys() {
            if !schema.has_finding(key) {
                return Err(LabelVectorError::UnknownFinding(key.clone()));
            }
        }
        let mut assignments = IndexMap::with_capacity(schema.findings.len());
        for finding in &schema.findings {
            let label = labels
                .get(finding)
                .copied()
                .ok_or_else(|| LabelVectorError::MissingFinding(finding.clone()))?;
            assignments.insert(finding.clone(), label);
        }
        Ok(LabelVector { assignments })
    }

    pub fn get(&self, finding: &str) -> Option<FindingLabel> {
        self.assignments.get(finding).copied()
    }

    /// Reassigns an existing finding; unknown findings are rejected so a
    /// vector can never drift away from its schema.
    pub fn set(&mut self, finding: &str, label: FindingLabel) -> Result<(), LabelVectorError> {
        match self.assignments.get_mut(finding) {
            Some(slot) => {
                *slot = label;
                Ok(())
            }
            None => Err(LabelVectorError::UnknownFinding(finding.to_string())),
        }
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, FindingLabel)> {
        self.assignments.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn findings(&self) -> impl Iterator<Item = &str> {
        self.assignments.keys().map(String::as_str)
    }

    /// True when both vectors cover the same findings in the same order.
    pub fn same_findings(&self, other: &LabelVector) -> bool {
        self.assignments.len() == other.assignments.len()
            && self
                .assignments
                .keys()
                .zip(other.assignments.keys())
                .all(|(a, b)| a == b)
    }

    pub fn contains_label(&self, label: FindingLabel) -> bool {
        self.assignments.values().any(|&l| l == label)
    }

    /// Serializes the vector exactly as a model is asked to answer: a pretty
    /// JSON object with one canonical lowercase token per finding, in order.
    pub fn answer_json(&self) -> String {
        let ordered: IndexMap<&str, &str> = self
            .assignments
            .iter()
            .map(|(k, v)| (k.as_str(), v.token()))
            .collect();
        serde_json::to_string_pretty(&ordered).expect("string map serialization cannot fail")
    }
}

/// Reports plus optional gold labels under one schema.
///
/// Gold labels are carried as raw tokens so that malformed entries survive
/// loading and can be reported by [`validate_dataset`]; [`Dataset::gold_vectors`]
/// converts them once validation has passed.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: FindingSchema,
    pub reports: Vec<Report>,
    pub gold: BTreeMap<String, BTreeMap<String, String>>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read dataset file: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: not a valid report row: {source}")]
    Row {
        line: usize,
        source: serde_json::Error,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportRow {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<BTreeMap<String, String>>,
}

impl Dataset {
    /// Parses JSON Lines rows (`{"id", "text", "labels"?}`); semantic problems
    /// are deferred to [`validate_dataset`].
    pub fn from_jsonl(schema: &FindingSchema, jsonl: &str) -> Result<Self, DatasetError> {
        let mut reports = Vec::new();
        let mut gold = BTreeMap::new();
        for (idx, line) in jsonl.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: ReportRow =
                serde_json::from_str(line).map_err(|source| DatasetError::Row {
                    line: idx + 1,
                    source,
                })?;
            if let Some(labels) = row.labels {
                gold.insert(row.id.clone(), labels);
            }
            reports.push(Report {
                id: row.id,
                text: row.text,
            });
        }
        Ok(Dataset {
            schema: schema.clone(),
            reports,
            gold,
        })
    }

    pub fn load(path: impl AsRef<Path>, schema: &FindingSchema) -> Result<Self, DatasetError> {
        Self::from_jsonl(schema, &std::fs::read_to_string(path)?)
    }

    pub fn report(&self, id: &str) -> Option<&Report> {
        self.reports.iter().find(|r| r.id == id)
    }

    /// Gold labels as validated [`LabelVector`]s, keyed by report id.
    ///
    /// Returns the first violation if called on an unvalidated dataset.
    pub fn gold_vectors(&self) -> Result<BTreeMap<String, LabelVector>, Violation> {
        let mut out = BTreeMap::new();
        for (id, raw) in &self.gold {
            let mut labels = BTreeMap::new();
            for (finding, token) in raw {
                if !self.schema.has_finding(finding) {
                    return Err(Violation::UnknownFinding {
                        id: id.clone(),
                        finding: finding.clone(),
                    });
                }
                let label = FindingLabel::from_token(token)
                    .filter(|l| self.schema.classes.contains(*l))
                    .ok_or_else(|| Violation::LabelOutsideClasses {
                        id: id.clone(),
                        finding: finding.clone(),
                        token: token.clone(),
                    })?;
                labels.insert(finding.clone(), label);
            }
            let vector = LabelVector::from_map(&self.schema, &labels).map_err(|e| match e {
                LabelVectorError::MissingFinding(finding) => Violation::MissingFinding {
                    id: id.clone(),
                    finding,
                },
                LabelVectorError::UnknownFinding(finding) => Violation::UnknownFinding {
                    id: id.clone(),
                    finding,
                },
            })?;
            out.insert(id.clone(), vector);
        }
        Ok(out)
    }
}

/// One problem found in a dataset. Violations are data, not control flow:
/// validation reports all of them at once.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("report at position {index} has an empty id")]
    EmptyReportId { index: usize },
    #[error("report {id:?} has empty text")]
    EmptyReportText { id: String },
    #[error("duplicate report id {id:?}")]
    DuplicateReportId { id: String },
    #[error("report {id:?}: gold labels reference unknown finding {finding:?}")]
    UnknownFinding { id: String, finding: String },
    #[error("report {id:?}: gold labels are missing finding {finding:?}")]
    MissingFinding { id: String, finding: String },
    #[error("report {id:?}: label {token:?} for {finding:?} is outside the schema classes")]
    LabelOutsideClasses {
        id: String,
        finding: String,
        token: String,
    },
}

/// Checks every report and gold entry against the dataset's schema.
/// An empty result means the dataset is ready to use.
pub fn validate_dataset(dataset: &Dataset) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen = BTreeSet::new();
    for (index, report) in dataset.reports.iter().enumerate() {
        if report.id.trim().is_empty() {
            violations.push(Violation::EmptyReportId { index });
            continue;
        }
        if !seen.insert(report.id.as_str()) {
            violations.push(Violation::DuplicateReportId {
                id: report.id.clone(),
            });
        }
        if report.text.trim().is_empty() {
            violations.push(Violation::EmptyReportText {
                id: report.id.clone(),
            });
        }
    }
    let schema = &dataset.schema;
    for (id, labels) in &dataset.gold {
        for (finding, token) in labels {
            if !schema.has_finding(finding) {
                violations.push(Violation::UnknownFinding {
                    id: id.clone(),
                    finding: finding.clone(),
                });
            } else {
                let ok = FindingLabel::from_token(token)
                    .map(|l| schema.classes.contains(l))
                    .unwrap_or(false);
                if !ok {
                    violations.push(Violation::LabelOutsideClasses {
                        id: id.clone(),
                        finding: finding.clone(),
                        token: token.clone(),
                    });
                }
            }
        }
        for finding in &schema.findings {
            if !labels.contains_key(finding) {
                violations.push(Violation::MissingFinding {
                    id: id.clone(),
                    finding: finding.clone(),
                });
            }
        }
    }
    violations
}
