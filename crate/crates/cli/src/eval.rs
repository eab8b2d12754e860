//! The `eval` subcommand: score prediction runs against gold labels.
//!
//! Accepts run directories (manifest + predictions.csv) or bare prediction
//! CSVs. Binary mode collapses `maybe` into `yes` on *both* sides and reports
//! per-finding/micro/macro F1, optionally with McNemar significance tests
//! against a reference run. Three-class mode keeps `yes`/`maybe`/`no` apart
//! and reports Cohen's kappa.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use radlabel_core::postprocess::{collapse, CollapsePolicy};
use radlabel_core::report::{binary_metrics, kappa_metrics, EvaluationReport, MetricsReport};
use radlabel_core::schema::{
    validate_dataset, Dataset, FindingSchema, LabelClasses, LabelVector,
};
use radlabel_core::stats::{paired_contingency, SignificanceResult};

use crate::args::{EvalArgs, EvalModeArg};
use crate::errors::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::rundir::{predictions_path, PredictionsTable};

struct RunInput {
    name: String,
    source: PathBuf,
    table: PredictionsTable,
    shot_ids: Vec<String>,
}

pub fn run(args: EvalArgs) -> CliResult<()> {
    let runs = load_runs(&args.runs)?;

    let schema = match &args.schema {
        Some(path) => FindingSchema::load(path)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?,
        None => infer_schema(&runs[0])?,
    };

    let gold_dataset = Dataset::load(&args.gold, &schema)
        .map_err(|e| CliError::validation(format!("{}: {e}", args.gold.display())))?;
    let violations = validate_dataset(&gold_dataset);
    if !violations.is_empty() {
        let listing: Vec<String> = violations.iter().map(|v| format!("  - {v}")).collect();
        return Err(CliError::validation(format!(
            "{} fails validation:\n{}",
            args.gold.display(),
            listing.join("\n")
        )));
    }
    let gold = gold_dataset
        .gold_vectors()
        .map_err(|v| CliError::validation(format!("{}: {v}", args.gold.display())))?;
    let unlabeled: Vec<&str> = gold_dataset
        .reports
        .iter()
        .filter(|r| !gold.contains_key(&r.id))
        .map(|r| r.id.as_str())
        .collect();
    if !unlabeled.is_empty() {
        return Err(CliError::validation(format!(
            "{}: reports without gold labels: {}",
            args.gold.display(),
            sample_ids(&unlabeled)
        )));
    }
    if gold.is_empty() {
        return Err(CliError::validation(format!(
            "{} contains no labeled reports",
            args.gold.display()
        )));
    }

    check_contamination(&runs, &gold)?;

    let gold_ids: BTreeSet<&String> = gold.keys().collect();
    let schema_findings: BTreeSet<&String> = schema.findings.iter().collect();
    let mut predictions: Vec<(String, BTreeMap<String, LabelVector>)> = Vec::new();
    for run in &runs {
        let run_findings: BTreeSet<&String> = run.table.findings.iter().collect();
        if run_findings != schema_findings {
            let missing: Vec<&str> = schema_findings
                .difference(&run_findings)
                .map(|f| f.as_str())
                .collect();
            let extra: Vec<&str> = run_findings
                .difference(&schema_findings)
                .map(|f| f.as_str())
                .collect();
            return Err(CliError::validation(format!(
                "run {:?} covers different findings than the schema (missing: [{}], unexpected: [{}])",
                run.name,
                missing.join(", "),
                extra.join(", ")
            )));
        }
        let run_ids: BTreeSet<&String> = run.table.rows.keys().collect();
        if run_ids != gold_ids {
            let missing: Vec<&str> = gold_ids.difference(&run_ids).map(|s| s.as_str()).collect();
            let extra: Vec<&str> = run_ids.difference(&gold_ids).map(|s| s.as_str()).collect();
            return Err(CliError::validation(format!(
                "run {:?} does not cover the gold reports exactly (missing: {}; unexpected: {})",
                run.name,
                sample_ids(&missing),
                sample_ids(&extra)
            )));
        }
        let mut vectors = BTreeMap::new();
        for id in run.table.rows.keys() {
            vectors.insert(id.clone(), run.table.row_vector(id, &run.source)?);
        }
        predictions.push((run.name.clone(), vectors));
    }

    let policy: CollapsePolicy = args.mode.into();
    let gold_scored = collapse_all(&gold, policy);
    let scored: Vec<(String, BTreeMap<String, LabelVector>)> = predictions
        .iter()
        .map(|(name, vectors)| (name.clone(), collapse_all(vectors, policy)))
        .collect();

    let mut models: Vec<MetricsReport> = Vec::new();
    for (name, vectors) in &scored {
        let metrics = match policy {
            CollapsePolicy::Binary => binary_metrics(name, vectors, &gold_scored, &schema.findings),
            CollapsePolicy::Multiclass3 => {
                kappa_metrics(name, vectors, &gold_scored, &schema.findings)
            }
        }
        .map_err(|e| CliError::validation(e.to_string()))?;
        models.push(metrics);
    }

    let (reference, significance, per_finding_significance, bonferroni_m) =
        significance_block(&args, &scored, &gold_scored, &schema)?;

    let report = EvaluationReport {
        mode: policy,
        findings: schema.findings.clone(),
        display_names: schema.display_names.clone(),
        models,
        reference,
        significance,
        per_finding_significance,
        bonferroni_m,
        notes: notes(&args, policy, bonferroni_m),
    };

    write_outputs(&args.out, &report)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn load_runs(paths: &[PathBuf]) -> CliResult<Vec<RunInput>> {
    let mut runs = Vec::new();
    let mut seen = BTreeSet::new();
    for path in paths {
        let run = if path.is_dir() {
            let manifest = RunManifest::load(path)?;
            let csv = predictions_path(path);
            if !csv.is_file() {
                return Err(CliError::validation(format!(
                    "{} has no predictions.csv (incomplete run; finish it with --resume)",
                    path.display()
                )));
            }
            RunInput {
                name: manifest.run_id().to_string(),
                source: csv.clone(),
                table: PredictionsTable::read(&csv)?,
                shot_ids: manifest.few_shot_ids().to_vec(),
            }
        } else if path.is_file() {
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .map(str::to_string)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| {
                    CliError::usage(format!("cannot derive a run name from {}", path.display()))
                })?;
            RunInput {
                name,
                source: path.clone(),
                table: PredictionsTable::read(path)?,
                shot_ids: Vec::new(),
            }
        } else {
            return Err(CliError::usage(format!(
                "{} is neither a run directory nor a predictions CSV",
                path.display()
            )));
        };
        if !seen.insert(run.name.clone()) {
            return Err(CliError::validation(format!(
                "two runs share the id {:?}; pass distinct --run-id values when labeling",
                run.name
            )));
        }
        runs.push(run);
    }
    Ok(runs)
}

/// Without a schema file, the finding vocabulary comes from the first run's
/// CSV header, with the full yes/maybe/no class set.
fn infer_schema(first: &RunInput) -> CliResult<FindingSchema> {
    let schema = FindingSchema {
        name: format!("inferred from {}", first.name),
        classes: LabelClasses::YesMaybeNo,
        findings: first.table.findings.clone(),
        hierarchy: vec![],
        display_names: BTreeMap::new(),
    };
    schema.validate().map_err(|e| {
        CliError::validation(format!(
            "cannot infer a schema from {}: {e}",
            first.source.display()
        ))
    })?;
    Ok(schema)
}

/// A report that served as a few-shot example must not be scored: the model
/// saw its gold labels verbatim in the prompt.
fn check_contamination(
    runs: &[RunInput],
    gold: &BTreeMap<String, LabelVector>,
) -> CliResult<()> {
    for run in runs {
        let contaminated: Vec<&str> = run
            .shot_ids
            .iter()
            .filter(|id| gold.contains_key(*id))
            .map(String::as_str)
            .collect();
        if !contaminated.is_empty() {
            return Err(CliError::validation(format!(
                "run {:?} used gold reports as few-shot examples: {}; \
                 evaluate on a pool that excludes them (see select-shots --residual-out)",
                run.name,
                sample_ids(&contaminated)
            )));
        }
    }
    Ok(())
}

fn collapse_all(
    vectors: &BTreeMap<String, LabelVector>,
    policy: CollapsePolicy,
) -> BTreeMap<String, LabelVector> {
    vectors
        .iter()
        .map(|(id, v)| (id.clone(), collapse(v, policy)))
        .collect()
}

type SignificanceBlock = (
    Option<String>,
    Vec<SignificanceResult>,
    BTreeMap<String, Vec<SignificanceResult>>,
    Option<usize>,
);

fn significance_block(
    args: &EvalArgs,
    scored: &[(String, BTreeMap<String, LabelVector>)],
    gold: &BTreeMap<String, LabelVector>,
    schema: &FindingSchema,
) -> CliResult<SignificanceBlock> {
    let Some(reference) = &args.reference else {
        if args.bonferroni_m.is_some() {
            return Err(CliError::usage("--bonferroni-m requires --reference"));
        }
        if args.per_finding_mcnemar {
            return Err(CliError::usage("--per-finding-mcnemar requires --reference"));
        }
        return Ok((None, Vec::new(), BTreeMap::new(), None));
    };
    if args.mode == EvalModeArg::Multiclass3 {
        return Err(CliError::usage(
            "significance testing compares binary correctness; --reference needs --mode binary",
        ));
    }
    let Some((_, reference_map)) = scored.iter().find(|(name, _)| name == reference) else {
        let names: Vec<&str> = scored.iter().map(|(n, _)| n.as_str()).collect();
        return Err(CliError::usage(format!(
            "--reference {reference:?} is not among the runs ({})",
            names.join(", ")
        )));
    };
    let comparators: Vec<&(String, BTreeMap<String, LabelVector>)> =
        scored.iter().filter(|(name, _)| name != reference).collect();
    if comparators.is_empty() {
        return Err(CliError::usage(
            "--reference needs at least one other run to compare against",
        ));
    }
    let m = match args.bonferroni_m {
        Some(0) => return Err(CliError::usage("--bonferroni-m must be at least 1")),
        Some(m) => m,
        None => comparators.len(),
    };

    let mut significance = Vec::new();
    for (name, map) in &comparators {
        let table = paired_contingency(reference_map, map, gold)
            .map_err(|e| CliError::validation(e.to_string()))?;
        significance.push(SignificanceResult::from_contingency(name, table, m));
    }

    let mut per_finding = BTreeMap::new();
    if args.per_finding_mcnemar {
        for finding in &schema.findings {
            let mut results = Vec::new();
            for (name, map) in &comparators {
                let table = finding_contingency(reference_map, map, gold, finding)?;
                results.push(SignificanceResult::from_contingency(name, table, m));
            }
            per_finding.insert(finding.clone(), results);
        }
    }

    Ok((Some(reference.clone()), significance, per_finding, Some(m)))
}

/// Discordant-pair counts restricted to a single finding.
fn finding_contingency(
    reference: &BTreeMap<String, LabelVector>,
    comparator: &BTreeMap<String, LabelVector>,
    gold: &BTreeMap<String, LabelVector>,
    finding: &str,
) -> CliResult<radlabel_core::stats::PairedContingency> {
    let mut table = radlabel_core::stats::PairedContingency::default();
    for (id, gold_vec) in gold {
        let actual = gold_vec
            .get(finding)
            .ok_or_else(|| CliError::validation(format!("gold {id:?} lacks {finding:?}")))?;
        let ref_ok = reference
            .get(id)
            .and_then(|v| v.get(finding))
            .ok_or_else(|| CliError::validation(format!("reference lacks {id:?}/{finding:?}")))?
            == actual;
        let comp_ok = comparator
            .get(id)
            .and_then(|v| v.get(finding))
            .ok_or_else(|| CliError::validation(format!("comparator lacks {id:?}/{finding:?}")))?
            == actual;
        match (ref_ok, comp_ok) {
            (true, false) => table.b += 1,
            (false, true) => table.c += 1,
            _ => {}
        }
    }
    Ok(table)
}

fn notes(args: &EvalArgs, policy: CollapsePolicy, bonferroni_m: Option<usize>) -> Vec<String> {
    let mut notes = vec![match policy {
        CollapsePolicy::Binary => {
            "binary scoring: maybe counts as yes; no_information counts as no".to_string()
        }
        CollapsePolicy::Multiclass3 => {
            "three-class scoring: yes, maybe, and no kept apart; no_information counts as no"
                .to_string()
        }
    }];
    notes.push("unparseable model responses were scored as all-no".to_string());
    if let Some(m) = bonferroni_m {
        notes.push(format!(
            "significance: two-sided McNemar tests against {:?}, Bonferroni-adjusted with m = {m}; ** p < 0.01, * p < 0.05",
            args.reference.as_deref().unwrap_or("")
        ));
    }
    notes
}

fn write_outputs(out: &Path, report: &EvaluationReport) -> CliResult<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", out.display())))?;
    let stem = report.mode.token();

    let json_path = out.join(format!("{stem}.json"));
    let mut json = serde_json::to_string_pretty(report)
        .map_err(|e| CliError::validation(format!("cannot serialize report: {e}")))?;
    json.push('\n');
    std::fs::write(&json_path, json)
        .map_err(|e| CliError::validation(format!("cannot write {}: {e}", json_path.display())))?;

    let md_path = out.join(format!("{stem}.md"));
    std::fs::write(&md_path, report.to_markdown())
        .map_err(|e| CliError::validation(format!("cannot write {}: {e}", md_path.display())))?;

    let csv_path = out.join(format!("{stem}.csv"));
    std::fs::write(&csv_path, report.to_csv())
        .map_err(|e| CliError::validation(format!("cannot write {}: {e}", csv_path.display())))?;
    Ok(())
}

fn sample_ids(ids: &[&str]) -> String {
    const SHOWN: usize = 5;
    if ids.is_empty() {
        return "[]".to_string();
    }
    let mut shown: Vec<String> = ids.iter().take(SHOWN).map(|id| format!("{id:?}")).collect();
    if ids.len() > SHOWN {
        shown.push(format!("… {} more", ids.len() - SHOWN));
    }
    format!("[{}]", shown.join(", "))
}
