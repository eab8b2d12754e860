//! The `label` subcommand: prompt a backend for every report in a dataset and
//! write a resumable run directory.
//!
//! Flow: load and validate all inputs, render every prompt up front (so a
//! template problem aborts before any request is spent), write the manifest,
//! fan requests out over a bounded worker pool, record each response as it
//! lands, and finally derive `predictions.csv` from the full record set.

use std::collections::BTreeMap;
use std::sync::Arc;

use radlabel_client::{
    Backend, BackendResponse, ClientError, EndpointConfig, GenerationParams, HttpBackend,
    MockBackend,
};
use radlabel_core::parser::{parse_labels, ExtractionMethod, NormalizationMode, NormalizationPolicy};
use radlabel_core::postprocess::{collapse, propagate_hierarchy, CollapsePolicy};
use radlabel_core::prompt::{
    render_few_shot, render_zero_shot, template_fingerprint, PromptBundle, PromptTemplate,
    TemplateMode,
};
use radlabel_core::schema::{validate_dataset, Dataset, FindingSchema, LabelVector};
use tokio::task::JoinSet;
use tracing::{info, warn};

use crate::args::{BackendKind, LabelArgs};
use crate::errors::{CliError, CliResult};
use crate::manifest::{
    now_rfc3339, pipeline_stages, FewShotManifest, ModelRunManifest, RunManifest, TOOL_VERSION,
};
use crate::rundir::{
    ensure_fresh_dir, predictions_path, read_records, run_id_from_dir, sha256_file, write_record,
    write_predictions_csv, PredictionRecord,
};
use crate::shots::ShotsFile;

pub async fn run(args: LabelArgs) -> CliResult<()> {
    let schema = FindingSchema::load(&args.schema)
        .map_err(|e| CliError::validation(format!("{}: {e}", args.schema.display())))?;
    let dataset = Dataset::load(&args.dataset, &schema)
        .map_err(|e| CliError::validation(format!("{}: {e}", args.dataset.display())))?;
    let violations = validate_dataset(&dataset);
    if !violations.is_empty() {
        let listing: Vec<String> = violations.iter().map(|v| format!("  - {v}")).collect();
        return Err(CliError::validation(format!(
            "{} fails validation:\n{}",
            args.dataset.display(),
            listing.join("\n")
        )));
    }
    if dataset.reports.is_empty() {
        return Err(CliError::validation(format!(
            "{} contains no reports",
            args.dataset.display()
        )));
    }

    let template = PromptTemplate::load(&args.template, &schema)
        .map_err(|e| CliError::usage(format!("{}: {e}", args.template.display())))?;

    let shots_file = load_shots(&args, &template, &dataset)?;
    let shots = shots_file.as_ref().map(ShotsFile::to_set);

    let setup = build_backend(&args)?;
    let wire_mode = setup.backend.wire_mode();

    // Render everything before the first request: a placeholder or empty-text
    // problem must not waste a partial run.
    let mut bundles = Vec::with_capacity(dataset.reports.len());
    for report in &dataset.reports {
        let bundle = match &shots {
            Some(set) => render_few_shot(&template, &schema, set, report, wire_mode),
            None => render_zero_shot(&template, &schema, report, wire_mode),
        }
        .map_err(|e| CliError::usage(format!("cannot render prompt for {:?}: {e}", report.id)))?;
        bundles.push(bundle);
    }

    let normalization: NormalizationMode = args.normalization.into();
    let run_id = run_id_from_dir(&args.out, args.run_id.clone())?;
    let fresh_manifest = ModelRunManifest {
        run_id,
        tool_version: TOOL_VERSION.to_string(),
        created_at: now_rfc3339(),
        dataset_digest: sha256_file(&args.dataset)?,
        schema_digest: sha256_file(&args.schema)?,
        template_digest: sha256_file(&args.template)?,
        rendered_template_hash: template_fingerprint(&template, &schema, shots.as_ref()),
        backend: setup.backend_name.clone(),
        model_name: setup.model_name.clone(),
        endpoint: setup.endpoint.clone(),
        params: setup.params,
        normalization,
        pipeline_stages: pipeline_stages(),
        seed: args.seed,
        few_shot: shots_file.as_ref().map(|file| FewShotManifest {
            seed: file.seed,
            example_ids: file.example_ids.clone(),
        }),
        concurrency: args.concurrency,
    };

    let cached = prepare_run_dir(&args, &fresh_manifest)?;
    if !cached.is_empty() {
        info!(cached = cached.len(), "resuming; cached reports will be skipped");
    }

    let policy = NormalizationPolicy::from_mode(normalization);
    let to_run: Vec<PromptBundle> = bundles
        .into_iter()
        .filter(|b| !cached.contains_key(&b.report_id))
        .collect();
    let total = dataset.reports.len();
    info!(total, pending = to_run.len(), "labeling");

    let mut failures: usize = cached.values().filter(|r| r.failed).count();
    let mut join_set: JoinSet<(PromptBundle, Result<BackendResponse, ClientError>)> =
        JoinSet::new();
    let semaphore = Arc::new(tokio::sync::Semaphore::new(args.concurrency.max(1)));
    let backend: Arc<dyn Backend> = Arc::from(setup.backend);
    for bundle in to_run {
        let backend = Arc::clone(&backend);
        let semaphore = Arc::clone(&semaphore);
        join_set.spawn(async move {
            let _permit = semaphore.acquire_owned().await.expect("semaphore closed");
            let result = backend.generate(&bundle).await;
            (bundle, result)
        });
    }

    // Single-writer drain loop: records land on disk in completion order, but
    // the CSV below is rebuilt from the sorted record set, so output is
    // deterministic regardless of scheduling.
    while let Some(joined) = join_set.join_next().await {
        let (bundle, result) = joined
            .map_err(|e| CliError::backend(format!("worker task panicked: {e}")))?;
        let record = record_from_result(&bundle.report_id, result, &schema, &policy);
        if record.failed {
            failures += 1;
            warn!(
                report_id = %record.report_id,
                reason = record.failure_reason.as_deref().unwrap_or("unknown"),
                "report failed; recorded as all-no"
            );
        }
        write_record(&args.out, &record)?;
        if let Some(budget) = args.max_failures {
            if failures > budget {
                join_set.abort_all();
                return Err(CliError::backend(format!(
                    "aborted: {failures} reports failed, exceeding --max-failures {budget}; \
                     completed records are kept for --resume"
                )));
            }
        }
    }

    let records = read_records(&args.out)?;
    if records.len() != total {
        return Err(CliError::backend(format!(
            "run incomplete: {} of {total} reports recorded",
            records.len()
        )));
    }

    let mut predictions = BTreeMap::new();
    let mut repaired = 0usize;
    let mut unparseable = 0usize;
    for record in records.values() {
        match record.diagnostics.extraction_method {
            ExtractionMethod::Failed => unparseable += 1,
            ExtractionMethod::Direct => {}
            _ => repaired += 1,
        }
        predictions.insert(record.report_id.clone(), postprocess(&record.labels, &schema)?);
    }
    write_predictions_csv(&predictions_path(&args.out), &schema, &predictions)?;

    println!("run {} complete: {total} reports", fresh_manifest.run_id);
    println!(
        "  parses: {} direct, {repaired} recovered, {unparseable} unusable (scored all-no)",
        total - repaired - unparseable
    );
    println!("  failures: {failures}");
    println!("  predictions: {}", predictions_path(&args.out).display());
    Ok(())
}

/// Applies the recorded pipeline stages to one parsed vector:
/// `no_information` is collapsed away, then parent findings are promoted.
fn postprocess(labels: &LabelVector, schema: &FindingSchema) -> CliResult<LabelVector> {
    let collapsed = collapse(labels, CollapsePolicy::Multiclass3);
    propagate_hierarchy(&collapsed, schema)
        .map_err(|e| CliError::validation(format!("post-processing failed: {e}")))
}

fn record_from_result(
    report_id: &str,
    result: Result<BackendResponse, ClientError>,
    schema: &FindingSchema,
    policy: &NormalizationPolicy,
) -> PredictionRecord {
    match result {
        Ok(response) => {
            let (labels, diagnostics) = parse_labels(&response.raw_text, schema, policy);
            PredictionRecord {
                report_id: report_id.to_string(),
                raw_text: response.raw_text,
                finish_reason: response.finish_reason,
                latency_ms: response.latency_ms,
                attempt_count: response.attempt_count,
                labels,
                diagnostics,
                failed: false,
                failure_reason: None,
            }
        }
        Err(error) => {
            // An unanswerable report still gets a total row: all-no labels
            // with the failure preserved alongside the empty-parse diagnostics.
            let (labels, diagnostics) = parse_labels("", schema, policy);
            PredictionRecord {
                report_id: report_id.to_string(),
                raw_text: String::new(),
                finish_reason: "error".to_string(),
                latency_ms: 0,
                attempt_count: 0,
                labels,
                diagnostics,
                failed: true,
                failure_reason: Some(error.to_string()),
            }
        }
    }
}

/// Fresh run: the output directory must be empty, and the manifest goes in
/// first. Resume: the stored manifest must describe the same experiment, and
/// already-recorded reports are returned so they can be skipped.
fn prepare_run_dir(
    args: &LabelArgs,
    fresh: &ModelRunManifest,
) -> CliResult<BTreeMap<String, PredictionRecord>> {
    if args.resume {
        let stored = match RunManifest::load(&args.out)? {
            RunManifest::Model(m) => m,
            RunManifest::Ensemble(_) => {
                return Err(CliError::validation(format!(
                    "{} is an ensemble run; it cannot be resumed by `label`",
                    args.out.display()
                )))
            }
        };
        stored.check_resume_compatible(fresh)?;
        read_records(&args.out)
    } else {
        ensure_fresh_dir(&args.out)?;
        RunManifest::Model(fresh.clone()).save(&args.out)?;
        Ok(BTreeMap::new())
    }
}

fn load_shots(
    args: &LabelArgs,
    template: &PromptTemplate,
    dataset: &Dataset,
) -> CliResult<Option<ShotsFile>> {
    match (template.mode, &args.few_shot) {
        (TemplateMode::FewShot, None) => Err(CliError::usage(
            "template contains an {{examples}} slot; pass --few-shot",
        )),
        (TemplateMode::ZeroShot, Some(_)) => Err(CliError::usage(
            "--few-shot given but the template has no {{examples}} slot",
        )),
        (TemplateMode::ZeroShot, None) => Ok(None),
        (TemplateMode::FewShot, Some(path)) => {
            let file = ShotsFile::load(path)?;
            let overlapping: Vec<&String> = file
                .example_ids
                .iter()
                .filter(|id| dataset.report(id).is_some())
                .collect();
            if !overlapping.is_empty() {
                // Labeling a shot report is allowed (e.g. smoke tests), but
                // eval will refuse to score it, so flag it early.
                warn!(
                    ids = ?overlapping,
                    "few-shot examples appear in the dataset being labeled; \
                     eval will reject these reports as contaminated"
                );
            }
            Ok(Some(file))
        }
    }
}

struct BackendSetup {
    backend: Box<dyn Backend>,
    backend_name: String,
    model_name: String,
    endpoint: Option<EndpointConfig>,
    params: GenerationParams,
}

fn build_backend(args: &LabelArgs) -> CliResult<BackendSetup> {
    match args.backend {
        BackendKind::Mock => {
            if args.endpoint.is_some() {
                return Err(CliError::usage("--endpoint is not used with --backend mock"));
            }
            let path = args
                .mock_script
                .as_ref()
                .ok_or_else(|| CliError::usage("--backend mock requires --mock-script"))?;
            let backend = MockBackend::from_file(path).map_err(|e| CliError::usage(e.to_string()))?;
            Ok(BackendSetup {
                backend: Box::new(backend),
                backend_name: "mock".to_string(),
                model_name: "mock".to_string(),
                endpoint: None,
                params: GenerationParams::default(),
            })
        }
        BackendKind::Http => {
            if args.mock_script.is_some() {
                return Err(CliError::usage("--mock-script is only used with --backend mock"));
            }
            let path = args
                .endpoint
                .as_ref()
                .ok_or_else(|| CliError::usage("--backend http requires --endpoint"))?;
            let config = EndpointConfig::load(path).map_err(|e| CliError::usage(e.to_string()))?;
            let backend =
                HttpBackend::new(config.clone()).map_err(|e| CliError::usage(e.to_string()))?;
            Ok(BackendSetup {
                backend: Box::new(backend),
                backend_name: "http".to_string(),
                model_name: config.model_name.clone(),
                params: config.params,
                endpoint: Some(config),
            })
        }
    }
}
