//! The `ensemble` subcommand: combine finished runs by per-finding majority
//! vote into a new run directory that `eval` can score like any other.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use radlabel_core::ensemble::{majority_vote, EnsembleConfig, TieBreak};
use radlabel_core::schema::{FindingSchema, LabelClasses, LabelVector};

use crate::args::EnsembleArgs;
use crate::errors::{CliError, CliResult};
use crate::manifest::{now_rfc3339, EnsembleRunManifest, RunManifest, TOOL_VERSION};
use crate::rundir::{
    ensure_fresh_dir, predictions_path, run_id_from_dir, write_predictions_csv, PredictionsTable,
};

struct Member {
    run_id: String,
    dataset_digest: String,
    schema_digest: String,
    csv_path: PathBuf,
    table: PredictionsTable,
}

pub fn run(args: EnsembleArgs) -> CliResult<()> {
    let members = load_members(&args.members)?;

    // Votes only mean something when every member labeled the same dataset
    // against the same schema; the manifests carry the digests to prove it.
    let first = &members[0];
    for member in &members[1..] {
        if member.dataset_digest != first.dataset_digest {
            return Err(CliError::validation(format!(
                "members {:?} and {:?} labeled different datasets ({} vs {})",
                first.run_id, member.run_id, first.dataset_digest, member.dataset_digest
            )));
        }
        if member.schema_digest != first.schema_digest {
            return Err(CliError::validation(format!(
                "members {:?} and {:?} used different schemas",
                first.run_id, member.run_id
            )));
        }
        if member.table.findings != first.table.findings {
            return Err(CliError::validation(format!(
                "members {:?} and {:?} have different prediction columns",
                first.run_id, member.run_id
            )));
        }
        let first_ids: BTreeSet<&String> = first.table.rows.keys().collect();
        let member_ids: BTreeSet<&String> = member.table.rows.keys().collect();
        if first_ids != member_ids {
            return Err(CliError::validation(format!(
                "members {:?} and {:?} cover different report ids",
                first.run_id, member.run_id
            )));
        }
    }

    let tie_break: TieBreak = args.tie_break.into();
    let member_ids: Vec<String> = members.iter().map(|m| m.run_id.clone()).collect();
    let config = EnsembleConfig::new(member_ids.clone(), tie_break)
        .map_err(|e| CliError::validation(e.to_string()))?;

    let mut votes: BTreeMap<String, LabelVector> = BTreeMap::new();
    let mut tie_count = 0usize;
    for report_id in first.table.rows.keys() {
        let mut vectors = Vec::with_capacity(members.len());
        for member in &members {
            vectors.push(member.table.row_vector(report_id, &member.csv_path)?);
        }
        let outcome = majority_vote(&vectors, &config)
            .map_err(|e| CliError::validation(format!("report {report_id:?}: {e}")))?;
        tie_count += outcome.tie_count;
        votes.insert(report_id.clone(), outcome.labels);
    }

    ensure_fresh_dir(&args.out)?;
    let run_id = run_id_from_dir(&args.out, args.run_id.clone())?;
    let manifest = RunManifest::Ensemble(EnsembleRunManifest {
        run_id: run_id.clone(),
        tool_version: TOOL_VERSION.to_string(),
        created_at: now_rfc3339(),
        dataset_digest: first.dataset_digest.clone(),
        schema_digest: first.schema_digest.clone(),
        members: member_ids,
        tie_break,
        tie_count,
    });
    manifest.save(&args.out)?;

    // Only the finding column names matter for the CSV; the class set is not
    // re-checked here because member rows were already validated tokens.
    let csv_schema = FindingSchema {
        name: run_id.clone(),
        classes: LabelClasses::YesMaybeNo,
        findings: first.table.findings.clone(),
        hierarchy: vec![],
        display_names: BTreeMap::new(),
    };
    write_predictions_csv(&predictions_path(&args.out), &csv_schema, &votes)?;

    println!(
        "ensemble {run_id} complete: {} members, {} reports, {tie_count} cells tie-broken",
        members.len(),
        votes.len()
    );
    println!("  predictions: {}", predictions_path(&args.out).display());
    Ok(())
}

fn load_members(paths: &[PathBuf]) -> CliResult<Vec<Member>> {
    let mut members = Vec::new();
    for path in paths {
        if !path.is_dir() {
            return Err(CliError::usage(format!(
                "{} is not a run directory; ensemble members need manifests to prove \
                 they labeled the same dataset",
                path.display()
            )));
        }
        let manifest = RunManifest::load(path)?;
        let csv = predictions_path(path);
        if !csv.is_file() {
            return Err(CliError::validation(format!(
                "{} has no predictions.csv (incomplete run)",
                path.display()
            )));
        }
        members.push(Member {
            run_id: manifest.run_id().to_string(),
            dataset_digest: manifest.dataset_digest().to_string(),
            schema_digest: manifest.schema_digest().to_string(),
            table: PredictionsTable::read(&csv)?,
            csv_path: csv,
        });
    }
    Ok(members)
}
