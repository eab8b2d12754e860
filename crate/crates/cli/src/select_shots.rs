//! The `select-shots` subcommand: pick a minimal set of worked examples from
//! a labeled pool, greedily maximizing the findings covered by a `yes`.
//!
//! Alongside the selection it writes the residual pool — the reports that may
//! still be used for evaluation without the model having seen their labels.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use radlabel_core::prompt::{select_few_shot, PromptError};
use radlabel_core::schema::{validate_dataset, Dataset, FindingSchema, Report};

use crate::args::SelectShotsArgs;
use crate::errors::{CliError, CliResult};
use crate::shots::ShotsFile;

pub fn run(args: SelectShotsArgs) -> CliResult<()> {
    let schema = FindingSchema::load(&args.schema)
        .map_err(|e| CliError::validation(format!("{}: {e}", args.schema.display())))?;
    let pool = Dataset::load(&args.pool, &schema)
        .map_err(|e| CliError::validation(format!("{}: {e}", args.pool.display())))?;
    let violations = validate_dataset(&pool);
    if !violations.is_empty() {
        let listing: Vec<String> = violations.iter().map(|v| format!("  - {v}")).collect();
        return Err(CliError::validation(format!(
            "{} fails validation:\n{}",
            args.pool.display(),
            listing.join("\n")
        )));
    }
    let unlabeled: Vec<&str> = pool
        .reports
        .iter()
        .filter(|r| !pool.gold.contains_key(&r.id))
        .map(|r| r.id.as_str())
        .collect();
    if !unlabeled.is_empty() {
        return Err(CliError::validation(format!(
            "{}: every pool report needs gold labels; missing for {} report(s), e.g. {:?}",
            args.pool.display(),
            unlabeled.len(),
            unlabeled[0]
        )));
    }
    if pool.reports.is_empty() {
        return Err(CliError::validation(format!(
            "{} contains no reports",
            args.pool.display()
        )));
    }

    // With --holdout, selection only sees a seeded random subset; the whole
    // subset is then kept out of the residual pool, so nothing the selector
    // even looked at can leak into evaluation.
    let (candidates, excluded): (Dataset, BTreeSet<String>) = match args.holdout {
        None => (pool.clone(), BTreeSet::new()),
        Some(0) => return Err(CliError::usage("--holdout must be at least 1")),
        Some(n) => {
            if n > pool.reports.len() {
                return Err(CliError::usage(format!(
                    "--holdout {n} exceeds the pool size ({})",
                    pool.reports.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let picked = rand::seq::index::sample(&mut rng, pool.reports.len(), n);
            let mut chosen: Vec<usize> = picked.into_iter().collect();
            chosen.sort_unstable();
            let reports: Vec<Report> = chosen
                .iter()
                .map(|&i| pool.reports[i].clone())
                .collect();
            let ids: BTreeSet<String> = reports.iter().map(|r| r.id.clone()).collect();
            let gold = pool
                .gold
                .iter()
                .filter(|(id, _)| ids.contains(*id))
                .map(|(id, labels)| (id.clone(), labels.clone()))
                .collect();
            (
                Dataset {
                    schema: schema.clone(),
                    reports,
                    gold,
                },
                ids,
            )
        }
    };

    let set = select_few_shot(&candidates, args.seed).map_err(|e| match e {
        PromptError::UncoverableFindings(_) | PromptError::InvalidPool(_) => {
            CliError::validation(e.to_string())
        }
        other => CliError::validation(other.to_string()),
    })?;

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| {
                CliError::usage(format!("cannot create {}: {e}", parent.display()))
            })?;
        }
    }
    let file = ShotsFile::from_set(&set, args.seed);
    file.save(&args.out)?;

    let residual_path = args
        .residual_out
        .clone()
        .unwrap_or_else(|| format!("{}.residual.jsonl", args.out.display()).into());
    let withheld: BTreeSet<&String> = if excluded.is_empty() {
        file.example_ids.iter().collect()
    } else {
        excluded.iter().collect()
    };
    let mut residual = String::new();
    let mut residual_count = 0usize;
    for report in &pool.reports {
        if withheld.contains(&report.id) {
            continue;
        }
        let row = serde_json::json!({
            "id": report.id,
            "text": report.text,
            "labels": pool.gold[&report.id],
        });
        residual.push_str(&row.to_string());
        residual.push('\n');
        residual_count += 1;
    }
    std::fs::write(&residual_path, residual).map_err(|e| {
        CliError::validation(format!("cannot write {}: {e}", residual_path.display()))
    })?;

    println!(
        "selected {} example(s) covering {}/{} findings",
        file.example_ids.len(),
        file.covered.len(),
        schema.findings.len()
    );
    println!("  examples: {}", file.example_ids.join(", "));
    println!("  shots file: {}", args.out.display());
    println!(
        "  residual pool: {} ({residual_count} reports)",
        residual_path.display()
    );
    Ok(())
}
