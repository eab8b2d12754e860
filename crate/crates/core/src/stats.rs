//! Evaluation statistics: confusion counts, F1, Cohen's kappa, and paired
//! McNemar tests with Bonferroni adjustment.
//!
//! Conventions baked in here: an all-zero confusion table scores F1 = 1.0
//! (nothing to find, nothing found); kappa's degenerate case (expected
//! agreement exactly 1) is detected integer-exactly on the marginals before
//! any division; McNemar switches from the exact binomial to the
//! continuity-corrected chi-square form at 25 discordant pairs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;
use thiserror::Error;

use crate::schema::{FindingLabel, LabelVector};

/// Discordant pairs below this total use the exact binomial McNemar test.
pub const MCNEMAR_EXACT_THRESHOLD: u64 = 25;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("report {id} is present in only one of the paired label sets")]
    IdMismatch { id: String },
    #[error("report {id} has no label for finding {finding}")]
    FindingMissing { id: String, finding: String },
    #[error("report {id}, finding {finding}: label {label} is not binary (yes/no)")]
    NonBinaryLabel {
        id: String,
        finding: String,
        label: FindingLabel,
    },
}

/// Per-finding binary confusion table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tpc: u64,
    pub fpc: u64,
    pub fnc: u64,
    pub tnc: u64,
}

impl ConfusionCounts {
    pub fn new(tpc: u64, fpc: u64, fnc: u64, tnc: u64) -> Self {
        ConfusionCounts { tpc, fpc, fnc, tnc }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tpc += other.tpc;
        self.fpc += other.fpc;
        self.fnc += other.fnc;
        self.tnc += other.tnc;
    }

    pub fn total(&self) -> u64 {
        self.tpc + self.fpc + self.fnc + self.tnc
    }
}

/// Collects the (predicted, gold) label pairs for one finding across reports.
/// Both maps must cover exactly the same report ids.
pub fn paired_labels(
    pred: &BTreeMap<String, LabelVector>,
    gold: &BTreeMap<String, LabelVector>,
    finding: &str,
) -> Result<Vec<(FindingLabel, FindingLabel)>, StatsError> {
    if let Some(id) = pred.keys().find(|id| !gold.contains_key(*id)) {
        return Err(StatsError::IdMismatch { id: id.clone() });
    }
    if let Some(id) = gold.keys().find(|id| !pred.contains_key(*id)) {
        return Err(StatsError::IdMismatch { id: id.clone() });
    }
    let mut pairs = Vec::with_capacity(pred.len());
    for (id, pred_vector) in pred {
        let lookup = |vector: &LabelVector| {
            vector
                .get(finding)
                .ok_or_else(|| StatsError::FindingMissing {
                    id: id.clone(),
                    finding: finding.to_string(),
                })
        };
        pairs.push((lookup(pred_vector)?, lookup(&gold[id])?));
    }
    Ok(pairs)
}

/// Binary confusion counts for one finding. Labels must be `yes`/`no`.
pub fn confusion_counts(
    pred: &BTreeMap<String, LabelVector>,
    gold: &BTreeMap<String, LabelVector>,
    finding: &str,
) -> Result<ConfusionCounts, StatsError> {
    let pairs = paired_labels(pred, gold, finding)?;
    let mut counts = ConfusionCounts::default();
    for (id, (predicted, actual)) in pred.keys().zip(pairs) {
        for label in [predicted, actual] {
            if !matches!(label, FindingLabel::Yes | FindingLabel::No) {
                return Err(StatsError::NonBinaryLabel {
                    id: id.clone(),
                    finding: finding.to_string(),
                    label,
                });
            }
        }
        match (predicted, actual) {
            (FindingLabel::Yes, FindingLabel::Yes) => counts.tpc += 1,
            (FindingLabel::Yes, FindingLabel::No) => counts.fpc += 1,
            (FindingLabel::No, FindingLabel::Yes) => counts.fnc += 1,
            _ => counts.tnc += 1,
        }
    }
    Ok(counts)
}

/// F1 = 2·tp / (2·tp + fp + fn); an empty numerator AND denominator (no
/// positives anywhere) scores 1.0.
pub fn f1_score(counts: &ConfusionCounts) -> f64 {
    let denom = 2 * counts.tpc + counts.fpc + counts.fnc;
    if denom == 0 {
        1.0
    } else {
        2.0 * counts.tpc as f64 / denom as f64
    }
}

/// Micro F1 (counts summed first) and macro F1 (mean of per-finding F1).
/// `counts` must be non-empty.
pub fn micro_macro_f1(counts: &BTreeMap<String, ConfusionCounts>) -> (f64, f64) {
    debug_assert!(!counts.is_empty(), "micro/macro F1 needs at least one finding");
    let mut pooled = ConfusionCounts::default();
    let mut f1_sum = 0.0;
    for c in counts.values() {
        pooled.merge(c);
        f1_sum += f1_score(c);
    }
    (f1_score(&pooled), f1_sum / counts.len() as f64)
}

/// Cohen's kappa over categorical rating pairs. Degenerate marginals
/// (expected agreement exactly 1, detected on integers before dividing)
/// return 1.0 when observed agreement is total and 0.0 otherwise. An empty
/// pairing counts as full agreement.
pub fn cohens_kappa(pairs: &[(FindingLabel, FindingLabel)]) -> f64 {
    let n = pairs.len() as u64;
    if n == 0 {
        return 1.0;
    }
    let categories = [
        FindingLabel::No,
        FindingLabel::Maybe,
        FindingLabel::Yes,
        FindingLabel::NoInformation,
    ];
    let mut rows = [0u64; 4];
    let mut cols = [0u64; 4];
    let mut agree = 0u64;
    for &(a, b) in pairs {
        let idx = |label: FindingLabel| categories.iter().position(|&c| c == label).unwrap();
        rows[idx(a)] += 1;
        cols[idx(b)] += 1;
        if a == b {
            agree += 1;
        }
    }
    let expected_num: u64 = rows.iter().zip(&cols).map(|(r, c)| r * c).sum();
    if expected_num == n * n {
        return if agree == n { 1.0 } else { 0.0 };
    }
    let p_o = agree as f64 / n as f64;
    let p_e = expected_num as f64 / (n * n) as f64;
    (p_o - p_e) / (1.0 - p_e)
}

/// Kappa between predictions and gold for one finding.
pub fn finding_kappa(
    pred: &BTreeMap<String, LabelVector>,
    gold: &BTreeMap<String, LabelVector>,
    finding: &str,
) -> Result<f64, StatsError> {
    Ok(cohens_kappa(&paired_labels(pred, gold, finding)?))
}

/// Discordant-pair counts between a reference run and a comparator, pooled
/// over (report, finding) pairs. `b` counts pairs the reference got right and
/// the comparator got wrong; `c` the reverse.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedContingency {
    pub b: u64,
    pub c: u64,
}

/// Builds the discordant-pair table for one finding set. All three maps must
/// cover the same report ids; findings are taken from the gold vectors.
pub fn paired_contingency(
    reference: &BTreeMap<String, LabelVector>,
    comparator: &BTreeMap<String, LabelVector>,
    gold: &BTreeMap<String, LabelVector>,
) -> Result<PairedContingency, StatsError> {
    for map in [reference, comparator] {
        if let Some(id) = map.keys().find(|id| !gold.contains_key(*id)) {
            return Err(StatsError::IdMismatch { id: id.clone() });
        }
        if let Some(id) = gold.keys().find(|id| !map.contains_key(*id)) {
            return Err(StatsError::IdMismatch { id: id.clone() });
        }
    }
    let mut table = PairedContingency::default();
    for (id, gold_vector) in gold {
        for (finding, actual) in gold_vector.iter() {
            let label_of = |map: &BTreeMap<String, LabelVector>| {
                map[id]
                    .get(finding)
                    .ok_or_else(|| StatsError::FindingMissing {
                        id: id.clone(),
                        finding: finding.to_string(),
                    })
            };
            let ref_correct = label_of(reference)? == actual;
            let comp_correct = label_of(comparator)? == actual;
            match (ref_correct, comp_correct) {
                (true, false) => table.b += 1,
                (false, true) => table.c += 1,
                _ => {}
            }
        }
    }
    Ok(table)
}

/// C(n, k) for n ≤ 63 or so; every intermediate stays integral and in range
/// for the exact-test sizes used here (n < 25).
fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Two-sided McNemar p-value on discordant counts.
///
/// No discordance at all is full agreement (p = 1). Below 25 discordant pairs
/// the exact two-sided binomial is used, `min(1, 2·Σ_{k≤min(b,c)} C(n,k)/2ⁿ)`.
/// At 25 or more, the continuity-corrected chi-square `(|b−c|−1)²/n` with one
/// degree of freedom, left unclamped to match standard statistical software.
pub fn mcnemar_p(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    if n < MCNEMAR_EXACT_THRESHOLD {
        let tail: u64 = (0..=b.min(c)).map(|k| binomial(n, k)).sum();
        let p = 2.0 * tail as f64 / 2f64.powi(n as i32);
        p.min(1.0)
    } else {
        let chi = (b.abs_diff(c) as f64 - 1.0).powi(2) / n as f64;
        if chi == 0.0 {
            return 1.0;
        }
        // survival of chi-square with 1 dof = upper regularized gamma Q(1/2, x/2)
        gamma_ur(0.5, chi / 2.0)
    }
}

/// Bonferroni adjustment: multiply by the comparison count, clamp to 1.
pub fn bonferroni(p: f64, m: usize) -> f64 {
    (p * m as f64).min(1.0)
}

/// Display stars for an adjusted p-value: `**` below 0.01, `*` below 0.05.
pub fn stars(adjusted_p: f64) -> &'static str {
    if adjusted_p < 0.01 {
        "**"
    } else if adjusted_p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// One comparator's significance row against the reference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub comparator: String,
    pub b: u64,
    pub c: u64,
    pub raw_p: f64,
    pub adjusted_p: f64,
    pub stars: String,
}

impl SignificanceResult {
    pub fn from_contingency(comparator: &str, table: PairedContingency, m: usize) -> Self {
        let raw_p = mcnemar_p(table.b, table.c);
        let adjusted_p = bonferroni(raw_p, m);
        SignificanceResult {
            comparator: comparator.to_string(),
            b: table.b,
            c: table.c,
            raw_p,
            adjusted_p,
            stars: stars(adjusted_p).to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::FindingSchema;
    use proptest::prelude::*;

    fn schema() -> FindingSchema {
        FindingSchema::from_json(
            r#"{"name": "s", "classes": ["yes", "no"], "findings": ["atelectasis", "pneumonia"]}"#,
        )
        .unwrap()
    }

    fn label_map(entries: &[(&str, [FindingLabel; 2])]) -> BTreeMap<String, LabelVector> {
        let schema = schema();
        entries
            .iter()
            .map(|(id, labels)| {
                let v = LabelVector::from_fn(&schema, |f| {
                    if f == "atelectasis" {
                        labels[0]
                    } else {
                        labels[1]
                    }
                });
                (id.to_string(), v)
            })
            .collect()
    }

    #[test]
    fn f1_handles_zero_division_as_perfect() {
        assert_eq!(f1_score(&ConfusionCounts::new(0, 0, 0, 12)), 1.0);
    }

    #[test]
    fn f1_worked_examples() {
        assert_eq!(f1_score(&ConfusionCounts::new(2, 1, 1, 0)), 2.0 / 3.0);
        assert_eq!(
            f1_score(&ConfusionCounts::new(15, 0, 5, 100)),
            0.8571428571428571
        );
    }

    #[test]
    fn micro_pools_counts_and_macro_averages_scores() {
        let counts: BTreeMap<String, ConfusionCounts> = [
            ("a".to_string(), ConfusionCounts::new(9, 1, 1, 0)),
            ("b".to_string(), ConfusionCounts::new(1, 3, 3, 0)),
        ]
        .into();
        let (micro, macro_) = micro_macro_f1(&counts);
        assert_eq!(micro, 0.7142857142857143);
        assert_eq!(macro_, 0.575);
    }

    #[test]
    fn kappa_worked_example() {
        use FindingLabel::{No, Yes};
        let pairs = [(Yes, Yes), (No, Yes), (No, No), (No, No)];
        assert_eq!(cohens_kappa(&pairs), 0.5);
    }

    #[test]
    fn kappa_degenerate_full_agreement_is_one() {
        use FindingLabel::Yes;
        let pairs = [(Yes, Yes); 7];
        assert_eq!(cohens_kappa(&pairs), 1.0);
    }

    #[test]
    fn kappa_constant_but_opposite_raters_score_zero() {
        use FindingLabel::{No, Yes};
        // expected agreement is 0, observed is 0 -> kappa 0 without the
        // degenerate branch firing
        let pairs = [(Yes, No); 5];
        assert_eq!(cohens_kappa(&pairs), 0.0);
    }

    #[test]
    fn kappa_of_empty_pairing_is_one() {
        assert_eq!(cohens_kappa(&[]), 1.0);
    }

    #[test]
    fn confusion_counts_tally_and_validate() {
        use FindingLabel::{No, Yes};
        let pred = label_map(&[("r1", [Yes, No]), ("r2", [Yes, Yes]), ("r3", [No, No])]);
        let gold = label_map(&[("r1", [Yes, No]), ("r2", [No, Yes]), ("r3", [Yes, No])]);
        let c = confusion_counts(&pred, &gold, "atelectasis").unwrap();
        assert_eq!(c, ConfusionCounts::new(1, 1, 1, 0));
        let c = confusion_counts(&pred, &gold, "pneumonia").unwrap();
        assert_eq!(c, ConfusionCounts::new(1, 0, 0, 2));
    }

    #[test]
    fn confusion_counts_reject_id_mismatch_and_nonbinary() {
        use FindingLabel::{Maybe, No, Yes};
        let pred = label_map(&[("r1", [Yes, No])]);
        let gold = label_map(&[("r2", [Yes, No])]);
        assert!(matches!(
            confusion_counts(&pred, &gold, "atelectasis"),
            Err(StatsError::IdMismatch { .. })
        ));
        let pred = label_map(&[("r1", [Maybe, No])]);
        let gold = label_map(&[("r1", [Yes, No])]);
        assert_eq!(
            confusion_counts(&pred, &gold, "atelectasis"),
            Err(StatsError::NonBinaryLabel {
                id: "r1".to_string(),
                finding: "atelectasis".to_string(),
                label: Maybe,
            })
        );
    }

    #[test]
    fn mcnemar_no_discordance_is_one() {
        assert_eq!(mcnemar_p(0, 0), 1.0);
    }

    #[test]
    fn mcnemar_exact_worked_example() {
        // n = 12, min side 2: 2 * (1 + 12 + 66) / 4096 = 79/2048, dyadic so
        // the f64 comparison is exact
        assert_eq!(mcnemar_p(10, 2), 0.03857421875);
        assert_eq!(mcnemar_p(2, 10), 0.03857421875);
    }

    #[test]
    fn mcnemar_exact_balanced_clamps_to_one() {
        assert_eq!(mcnemar_p(3, 3), 1.0);
        assert_eq!(mcnemar_p(12, 12), 1.0);
    }

    #[test]
    fn mcnemar_asymptotic_worked_example() {
        // chi-square = (|40-10|-1)^2/50 = 16.82 with 1 dof
        let p = mcnemar_p(40, 10);
        assert!((p - 4.109787809945878e-05).abs() < 1e-12, "p = {p}");
    }

    #[test]
    fn mcnemar_asymptotic_zero_statistic_is_one() {
        // |13-12| - 1 = 0 at n = 25, just over the exact threshold
        assert_eq!(mcnemar_p(13, 12), 1.0);
    }

    #[test]
    fn paired_contingency_counts_directional_flips() {
        use FindingLabel::{No, Yes};
        let gold = label_map(&[("r1", [Yes, No]), ("r2", [No, No])]);
        let reference = gold.clone();
        // comparator wrong on r1/atelectasis and r2/pneumonia only
        let comparator = label_map(&[("r1", [No, No]), ("r2", [No, Yes])]);
        let t = paired_contingency(&reference, &comparator, &gold).unwrap();
        assert_eq!(t, PairedContingency { b: 2, c: 0 });
        let t = paired_contingency(&comparator, &reference, &gold).unwrap();
        assert_eq!(t, PairedContingency { b: 0, c: 2 });
    }

    #[test]
    fn bonferroni_scales_and_clamps() {
        assert_eq!(bonferroni(0.02, 3), 0.06);
        assert_eq!(bonferroni(0.7, 3), 1.0);
        assert_eq!(bonferroni(0.5, 0), 0.0);
    }

    #[test]
    fn star_thresholds_are_half_open() {
        assert_eq!(stars(0.0099), "**");
        assert_eq!(stars(0.01), "*");
        assert_eq!(stars(0.049), "*");
        assert_eq!(stars(0.05), "");
        assert_eq!(stars(1.0), "");
    }

    #[test]
    fn significance_result_assembles_stars() {
        let r = SignificanceResult::from_contingency("comp", PairedContingency { b: 12, c: 0 }, 3);
        assert_eq!(r.raw_p, 0.00048828125);
        assert_eq!(r.adjusted_p, 0.00146484375);
        assert_eq!(r.stars, "**");
    }

    fn arb_label() -> impl Strategy<Value = FindingLabel> {
        prop_oneof![
            Just(FindingLabel::No),
            Just(FindingLabel::Maybe),
            Just(FindingLabel::Yes),
        ]
    }

    proptest! {
        #[test]
        fn f1_stays_in_unit_interval(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
            let f1 = f1_score(&ConfusionCounts::new(tp, fp, fn_, 0));
            prop_assert!((0.0..=1.0).contains(&f1));
        }

        #[test]
        fn kappa_stays_in_range(pairs in proptest::collection::vec((arb_label(), arb_label()), 1..60)) {
            let k = cohens_kappa(&pairs);
            prop_assert!((-1.0..=1.0).contains(&k), "kappa = {k}");
        }

        #[test]
        fn mcnemar_is_symmetric_and_in_unit_interval(b in 0u64..200, c in 0u64..200) {
            let p = mcnemar_p(b, c);
            prop_assert!((0.0..=1.0).contains(&p), "p = {p}");
            prop_assert_eq!(p, mcnemar_p(c, b));
        }

        /// For a fixed discordant total in the exact regime, a more lopsided
        /// split never raises the p-value.
        #[test]
        fn exact_p_shrinks_with_lopsidedness(n in 1u64..25, min_side in 0u64..12) {
            let min_side = min_side.min(n / 2);
            let p_closer = mcnemar_p(n - min_side, min_side);
            if min_side > 0 {
                let p_lopsided = mcnemar_p(n - min_side + 1, min_side - 1);
                prop_assert!(p_lopsided <= p_closer);
            }
        }
    }
}
