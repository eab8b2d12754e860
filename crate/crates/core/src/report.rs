//! Assembled evaluation results with JSON, markdown, and CSV renderings.
//!
//! Binary-mode reports carry per-finding F1 plus micro/macro rows and an
//! optional McNemar significance section; multiclass reports carry per-finding
//! kappa with an average row. Markdown shows values to three decimals and
//! attaches significance stars to comparator column headers; the JSON form
//! keeps full float precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::postprocess::CollapsePolicy;
use crate::schema::{prettify_finding, LabelVector};
use crate::stats::{
    confusion_counts, finding_kappa, micro_macro_f1, ConfusionCounts, SignificanceResult,
    StatsError,
};

/// Per-finding F1 plus the two aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Block {
    pub per_finding: BTreeMap<String, f64>,
    pub confusion: BTreeMap<String, ConfusionCounts>,
    pub micro: f64,
    #[serde(rename = "macro")]
    pub macro_f1: f64,
}

/// Per-finding Cohen's kappa plus the unweighted average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaBlock {
    pub per_finding: BTreeMap<String, f64>,
    pub average: f64,
}

/// Metrics for one run/model; exactly one block is populated per eval mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<F1Block>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<KappaBlock>,
}

/// Binary-mode metrics: per-finding F1 over yes/no labels.
pub fn binary_metrics(
    model: &str,
    pred: &BTreeMap<String, LabelVector>,
    gold: &BTreeMap<String, LabelVector>,
    findings: &[String],
) -> Result<MetricsReport, StatsError> {
    let mut confusion = BTreeMap::new();
    let mut per_finding = BTreeMap::new();
    for finding in findings {
        let counts = confusion_counts(pred, gold, finding)?;
        per_finding.insert(finding.clone(), crate::stats::f1_score(&counts));
        confusion.insert(finding.clone(), counts);
    }
    let (micro, macro_f1) = micro_macro_f1(&confusion);
    Ok(MetricsReport {
        model: model.to_string(),
        f1: Some(F1Block {
            per_finding,
            confusion,
            micro,
            macro_f1,
        }),
        kappa: None,
    })
}

/// Multiclass-mode metrics: per-finding agreement with gold as Cohen's kappa.
pub fn kappa_metrics(
    model: &str,
    pred: &BTreeMap<String, LabelVector>,
    gold: &BTreeMap<String, LabelVector>,
    findings: &[String],
) -> Result<MetricsReport, StatsError> {
    let mut per_finding = BTreeMap::new();
    for finding in findings {
        per_finding.insert(finding.clone(), finding_kappa(pred, gold, finding)?);
    }
    let average = per_finding.values().sum::<f64>() / per_finding.len().max(1) as f64;
    Ok(MetricsReport {
        model: model.to_string(),
        kappa: Some(KappaBlock {
            per_finding,
            average,
        }),
        f1: None,
    })
}

/// A full evaluation: one metrics column per run, shared finding rows, and
/// (in binary mode with a reference) pooled significance results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: CollapsePolicy,
    pub findings: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub display_names: BTreeMap<String, String>,
    pub models: Vec<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub significance: Vec<SignificanceResult>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_finding_significance: BTreeMap<String, Vec<SignificanceResult>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bonferroni_m: Option<usize>,
    pub notes: Vec<String>,
}

impl EvaluationReport {
    fn display_name(&self, finding: &str) -> String {
        self.display_names
            .get(finding)
            .cloned()
            .unwrap_or_else(|| prettify_finding(finding))
    }

    fn stars_for(&self, model: &str) -> &str {
        self.significance
            .iter()
            .find(|s| s.comparator == model)
            .map(|s| s.stars.as_str())
            .unwrap_or("")
    }

    fn metric_for(&self, model: &MetricsReport, finding: &str) -> Option<f64> {
        match self.mode {
            CollapsePolicy::Binary => model
                .f1
                .as_ref()
                .and_then(|b| b.per_finding.get(finding))
                .copied(),
            CollapsePolicy::Multiclass3 => model
                .kappa
                .as_ref()
                .and_then(|b| b.per_finding.get(finding))
                .copied(),
        }
    }

    /// Markdown rendering: one table row per finding, aggregate footer rows,
    /// a significance table when present, and the conventions notes.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("# Evaluation report\n\n");
        out.push_str(&format!("Mode: {}\n\n", self.mode.token()));

        // header: model columns, stars attached to significant comparators
        out.push_str("| Finding |");
        for model in &self.models {
            out.push_str(&format!(" {}{} |", model.model, self.stars_for(&model.model)));
        }
        out.push('\n');
        out.push_str("|---|");
        for _ in &self.models {
            out.push_str("---:|");
        }
        out.push('\n');

        for finding in &self.findings {
            out.push_str(&format!("| {} |", self.display_name(finding)));
            for model in &self.models {
                match self.metric_for(model, finding) {
                    Some(value) => out.push_str(&format!(" {value:.3} |")),
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }

        match self.mode {
            CollapsePolicy::Binary => {
                for (label, pick) in [
                    ("Micro F1", true),
                    ("Macro F1", false),
                ] {
                    out.push_str(&format!("| {label} |"));
                    for model in &self.models {
                        match model.f1.as_ref() {
                            Some(block) => {
                                let value = if pick { block.micro } else { block.macro_f1 };
                                out.push_str(&format!(" {value:.3} |"));
                            }
                            None => out.push_str(" - |"),
                        }
                    }
                    out.push('\n');
                }
            }
            CollapsePolicy::Multiclass3 => {
                out.push_str("| Average kappa |");
                for model in &self.models {
                    match model.kappa.as_ref() {
                        Some(block) => out.push_str(&format!(" {:.3} |", block.average)),
                        None => out.push_str(" - |"),
                    }
                }
                out.push('\n');
            }
        }

        if !self.significance.is_empty() {
            out.push_str("\n## Significance vs reference\n\n");
            out.push_str("| Comparator | b | c | raw p | adjusted p | stars |\n");
            out.push_str("|---|---:|---:|---:|---:|---|\n");
            for s in &self.significance {
                out.push_str(&format!(
                    "| {} | {} | {} | {:.3} | {:.3} | {} |\n",
                    s.comparator, s.b, s.c, s.raw_p, s.adjusted_p, s.stars
                ));
            }
        }

        if !self.notes.is_empty() {
            out.push_str("\nNotes:\n");
            for note in &self.notes {
                out.push_str(&format!("- {note}\n"));
            }
        }
        out
    }

    /// Long-format CSV: `model,finding,metric,value` with full float
    /// precision; aggregates carry an empty finding column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,finding,metric,value\n");
        let metric_name = match self.mode {
            CollapsePolicy::Binary => "f1",
            CollapsePolicy::Multiclass3 => "kappa",
        };
        for model in &self.models {
            for finding in &self.findings {
                if let Some(value) = self.metric_for(model, finding) {
                    out.push_str(&format!("{},{},{},{}\n", model.model, finding, metric_name, value));
                }
            }
            if let Some(block) = &model.f1 {
                out.push_str(&format!("{},,micro_f1,{}\n", model.model, block.micro));
                out.push_str(&format!("{},,macro_f1,{}\n", model.model, block.macro_f1));
            }
            if let Some(block) = &model.kappa {
                out.push_str(&format!("{},,average_kappa,{}\n", model.model, block.average));
            }
        }
        out
    }
}
