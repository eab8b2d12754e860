//! Command-line interface definition.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use radlabel_core::ensemble::TieBreak;
use radlabel_core::parser::NormalizationMode;
use radlabel_core::postprocess::CollapsePolicy;

#[derive(Debug, Parser)]
#[command(
    name = "radlabel",
    version,
    about = "Label free-text radiology reports with LLM endpoints and evaluate the results"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label a dataset by prompting an inference backend
    Label(LabelArgs),
    /// Score prediction runs against gold labels
    Eval(EvalArgs),
    /// Combine prediction runs by per-finding majority vote
    Ensemble(EnsembleArgs),
    /// Pick a minimal few-shot example set from a labeled pool
    SelectShots(SelectShotsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// POST to a chat/completions or completions endpoint
    Http,
    /// Replay scripted responses from a file (offline, deterministic)
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormalizationArg {
    /// Off-template answer tokens become `no`
    Strict,
    /// Off-template tokens go through the synonym map first
    Lenient,
}

impl From<NormalizationArg> for NormalizationMode {
    fn from(value: NormalizationArg) -> Self {
        match value {
            NormalizationArg::Strict => NormalizationMode::Strict,
            NormalizationArg::Lenient => NormalizationMode::Lenient,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalModeArg {
    /// maybe counts as yes, scored with F1
    Binary,
    /// yes/maybe/no kept apart, scored with Cohen's kappa
    Multiclass3,
}

impl From<EvalModeArg> for CollapsePolicy {
    fn from(value: EvalModeArg) -> Self {
        match value {
            EvalModeArg::Binary => CollapsePolicy::Binary,
            EvalModeArg::Multiclass3 => CollapsePolicy::Multiclass3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TieBreakArg {
    /// Highest-priority member whose label is among the tied leaders
    First,
    /// Always fall back to `no`
    No,
}

impl From<TieBreakArg> for TieBreak {
    fn from(value: TieBreakArg) -> Self {
        match value {
            TieBreakArg::First => TieBreak::FirstPriorityMember,
            TieBreakArg::No => TieBreak::FixedNo,
        }
    }
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// Dataset JSONL ({"id", "text", "labels"?} per line)
    #[arg(long)]
    pub dataset: PathBuf,

    /// Finding schema JSON
    #[arg(long)]
    pub schema: PathBuf,

    /// Prompt template file
    #[arg(long)]
    pub template: PathBuf,

    #[arg(long, value_enum, default_value = "http")]
    pub backend: BackendKind,

    /// Endpoint config JSON (required with --backend http)
    #[arg(long)]
    pub endpoint: Option<PathBuf>,

    /// Scripted responses JSON (required with --backend mock)
    #[arg(long)]
    pub mock_script: Option<PathBuf>,

    /// Few-shot selection file produced by `select-shots` (required when the
    /// template contains an examples slot)
    #[arg(long)]
    pub few_shot: Option<PathBuf>,

    /// Recorded in the run manifest for provenance
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Concurrent in-flight reports
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,

    /// Continue an interrupted run, reusing its cached raw responses
    #[arg(long)]
    pub resume: bool,

    #[arg(long, value_enum, default_value = "strict")]
    pub normalization: NormalizationArg,

    /// Run directory to create (manifest.json, raw/, predictions.csv)
    #[arg(long)]
    pub out: PathBuf,

    /// Abort with exit code 3 when more than this many reports fail
    /// (default: unlimited; failures become all-`no` rows marked failed)
    #[arg(long)]
    pub max_failures: Option<usize>,

    /// Run identifier; also the model column name in eval tables
    /// (default: the --out directory name)
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction runs: run directories or bare predictions CSVs
    #[arg(long, required = true, num_args = 1..)]
    pub runs: Vec<PathBuf>,

    /// Gold dataset JSONL (every report labeled)
    #[arg(long)]
    pub gold: PathBuf,

    #[arg(long, value_enum)]
    pub mode: EvalModeArg,

    /// Run id to test the other runs against with McNemar (binary mode only)
    #[arg(long)]
    pub reference: Option<String>,

    /// Bonferroni multiplier (default: number of comparator runs)
    #[arg(long)]
    pub bonferroni_m: Option<usize>,

    /// Finding schema JSON; when omitted, findings come from the first run's
    /// CSV header with yes/maybe/no classes
    #[arg(long)]
    pub schema: Option<PathBuf>,

    /// Also compute per-finding McNemar tables (JSON output only)
    #[arg(long)]
    pub per_finding_mcnemar: bool,

    /// Directory for <mode>.json / <mode>.md / <mode>.csv
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Member run directories (at least two)
    #[arg(long, required = true, num_args = 2..)]
    pub members: Vec<PathBuf>,

    #[arg(long, value_enum, default_value = "first")]
    pub tie_break: TieBreakArg,

    /// Run directory to create (manifest.json, predictions.csv)
    #[arg(long)]
    pub out: PathBuf,

    /// Run identifier (default: the --out directory name)
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct SelectShotsArgs {
    /// Fully labeled pool dataset JSONL
    #[arg(long)]
    pub pool: PathBuf,

    /// Finding schema JSON
    #[arg(long)]
    pub schema: PathBuf,

    /// Seed for tie-breaking among equally covering candidates
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Few-shot selection file to write
    #[arg(long)]
    pub out: PathBuf,

    /// Remaining pool JSONL, for later evaluation without contamination
    /// (default: <out>.residual.jsonl)
    #[arg(long)]
    pub residual_out: Option<PathBuf>,

    /// First draw a seeded subset of this size and select only from it;
    /// the whole subset is then excluded from the residual pool
    #[arg(long)]
    pub holdout: Option<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_internally_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn label_defaults_are_wired() {
        let cli = Cli::try_parse_from([
            "radlabel", "label", "--dataset", "d.jsonl", "--schema", "s.json", "--template",
            "t.txt", "--out", "run",
        ])
        .unwrap();
        let Command::Label(args) = cli.command else {
            panic!("expected label");
        };
        assert_eq!(args.backend, BackendKind::Http);
        assert_eq!(args.concurrency, 4);
        assert_eq!(args.normalization, NormalizationArg::Strict);
        assert_eq!(args.max_failures, None);
        assert!(!args.resume);
    }

    #[test]
    fn ensemble_requires_two_members() {
        let result = Cli::try_parse_from([
            "radlabel", "ensemble", "--members", "a", "--out", "e",
        ]);
        assert!(result.is_err());
    }
}
