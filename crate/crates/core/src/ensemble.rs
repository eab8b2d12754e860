//! Majority-vote ensembling over per-model label vectors.
//!
//! For each finding the modal label wins. Ties are broken either by walking
//! the member priority order and taking the first member whose label is among
//! the tied leaders, or by a fixed fallback to `no`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{FindingLabel, LabelVector};

/// Tie-breaking rule for findings with no unique modal label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// First member (in configured priority order) whose label is one of the
    /// tied leaders.
    FirstPriorityMember,
    /// Always fall back to `no`.
    FixedNo,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnsembleError {
    #[error("an ensemble needs at least two members, got {0}")]
    TooFewMembers(usize),
    #[error("duplicate ensemble member id: {0}")]
    DuplicateMemberIds(String),
    #[error("expected {expected} member vectors, got {got}")]
    MemberCountMismatch { expected: usize, got: usize },
    #[error("member vectors disagree on findings or their order")]
    SchemaMismatch,
}

/// Member ids in priority order plus the tie rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub members: Vec<String>,
    pub tie_break: TieBreak,
}

impl EnsembleConfig {
    pub fn new(members: Vec<String>, tie_break: TieBreak) -> Result<Self, EnsembleError> {
        if members.len() < 2 {
            return Err(EnsembleError::TooFewMembers(members.len()));
        }
        for (i, member) in members.iter().enumerate() {
            if members[..i].contains(member) {
                return Err(EnsembleError::DuplicateMemberIds(member.clone()));
            }
        }
        Ok(EnsembleConfig { members, tie_break })
    }
}

/// A voted vector plus how many findings needed the tie rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteOutcome {
    pub labels: LabelVector,
    pub tie_count: usize,
}

/// Majority vote across member vectors, one vector per configured member, in
/// the same order as `config.members`.
pub fn majority_vote(
    votes: &[LabelVector],
    config: &EnsembleConfig,
) -> Result<VoteOutcome, EnsembleError> {
    if votes.len() != config.members.len() {
        return Err(EnsembleError::MemberCountMismatch {
            expected: config.members.len(),
            got: votes.len(),
        });
    }
    let first = &votes[0];
    if votes.iter().any(|v| !first.same_findings(v)) {
        return Err(EnsembleError::SchemaMismatch);
    }

    let mut tie_count = 0usize;
    let labels = LabelVector::from_fn_like(first, |finding| {
        let member_labels: Vec<FindingLabel> = votes
            .iter()
            .map(|v| v.get(finding).expect("findings checked above"))
            .collect();

        let count = |label: FindingLabel| member_labels.iter().filter(|&&l| l == label).count();
        let candidates = [
            FindingLabel::No,
            FindingLabel::Maybe,
            FindingLabel::Yes,
            FindingLabel::NoInformation,
        ];
        let best = candidates.iter().map(|&l| count(l)).max().unwrap_or(0);
        let leaders: Vec<FindingLabel> = candidates
            .into_iter()
            .filter(|&l| count(l) == best && best > 0)
            .collect();

        if leaders.len() == 1 {
            return leaders[0];
        }
        tie_count += 1;
        match config.tie_break {
            TieBreak::FirstPriorityMember => *member_labels
                .iter()
                .find(|l| leaders.contains(l))
                .expect("some member holds every leading label"),
            TieBreak::FixedNo => FindingLabel::No,
        }
    });

    Ok(VoteOutcome { labels, tie_count })
}
