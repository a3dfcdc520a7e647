//! Score pooling, equal error rate, balanced accuracy, and flow reports.
//!
//! EER sweeps thresholds over the sorted union of the pooled scores. At a
//! threshold `t`, FAR is the fraction of non-target scores `>= t` and FRR the
//! fraction of target scores `< t`; the reported EER is `(FAR + FRR) / 2` at
//! the threshold minimizing `|FAR - FRR|`, ties resolved toward the lowest
//! threshold. `-inf` sentinels are mapped just below the lowest finite score
//! before sweeping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::AttributeSchema;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("score pool needs at least one target and one non-target score")]
    EmptyPool,
    #[error("class {0} has no trials")]
    EmptyClassRow(usize),
    #[error("expected {expected} scores per trial, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("length mismatch: {0} rows vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("class index {got} out of range for {classes} classes")]
    ClassOutOfRange { got: usize, classes: usize },
}

impl MetricsError {
    pub fn category(&self) -> &'static str {
        match self {
            MetricsError::EmptyPool => "EmptyPool",
            MetricsError::EmptyClassRow(_) => "EmptyClassRow",
            MetricsError::DimensionMismatch { .. } => "DimensionMismatch",
            MetricsError::LengthMismatch(..) => "LengthMismatch",
            MetricsError::ClassOutOfRange { .. } => "ClassOutOfRange",
        }
    }
}

/// Pooled target and non-target scores for a two-class trade-off.
#[derive(Debug, Clone, Default)]
pub struct ScorePool {
    pub target: Vec<f64>,
    pub nontarget: Vec<f64>,
}

impl ScorePool {
    pub fn new(target: Vec<f64>, nontarget: Vec<f64>) -> Self {
        Self { target, nontarget }
    }
}

/// EER value together with the threshold attaining it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EerPoint {
    pub eer: f64,
    pub threshold: f64,
}

/// Maps infinite sentinels to finite stand-ins preserving order:
/// `-inf` (and NaN) below the minimum finite score, `+inf` above the maximum.
fn sanitize_scores(pool: &ScorePool) -> (Vec<f64>, Vec<f64>) {
    let finite = pool
        .target
        .iter()
        .chain(&pool.nontarget)
        .copied()
        .filter(|v| v.is_finite());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in finite {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        // No finite score at all; collapse everything to one value.
        lo = 0.0;
        hi = 0.0;
    }
    let map = |v: f64| {
        if v.is_finite() {
            v
        } else if v == f64::INFINITY {
            hi + 1.0
        } else {
            lo - 1.0
        }
    };
    (
        pool.target.iter().copied().map(map).collect(),
        pool.nontarget.iter().copied().map(map).collect(),
    )
}

pub fn eer(pool: &ScorePool) -> Result<EerPoint, MetricsError> {
    if pool.target.is_empty() || pool.nontarget.is_empty() {
        return Err(MetricsError::EmptyPool);
    }
    let (mut targets, mut nontargets) = sanitize_scores(pool);
    targets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    nontargets.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut candidates: Vec<f64> = targets.iter().chain(&nontargets).copied().collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();

    let nt = targets.len() as f64;
    let nn = nontargets.len() as f64;
    let mut best: Option<(f64, EerPoint)> = None;
    for &t in &candidates {
        let frr = targets.partition_point(|&s| s < t) as f64 / nt;
        let far = (nontargets.len() - nontargets.partition_point(|&s| s < t)) as f64 / nn;
        let gap = (far - frr).abs();
        // Strict improvement keeps the lowest threshold on ties.
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((
                gap,
                EerPoint {
                    eer: (far + frr) / 2.0,
                    threshold: t,
                },
            ));
        }
    }
    Ok(best.unwrap().1)
}

/// C x C counts; rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_pairs(
        n_classes: usize,
        truths: &[usize],
        preds: &[usize],
    ) -> Result<Self, MetricsError> {
        if truths.len() != preds.len() {
            return Err(MetricsError::LengthMismatch(truths.len(), preds.len()));
        }
        let mut cm = Self::new(n_classes);
        for (&t, &p) in truths.iter().zip(preds) {
            if t >= n_classes || p >= n_classes {
                return Err(MetricsError::ClassOutOfRange {
                    got: t.max(p),
                    classes: n_classes,
                });
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }
}

/// Mean of per-class recalls.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let c = cm.n_classes();
    let mut total = 0.0;
    for i in 0..c {
        let row = cm.row_sum(i);
        if row == 0 {
            return Err(MetricsError::EmptyClassRow(i));
        }
        total += cm.counts()[i][i] as f64 / row as f64;
    }
    Ok(total / c as f64)
}

/// Balanced accuracy over class groups: a prediction counts as correct when
/// it lands in the same group as the truth. `groups[i]` is the group id of
/// class `i`. With all-distinct groups this reduces to [`balanced_accuracy`].
pub fn balanced_accuracy_grouped(
    cm: &ConfusionMatrix,
    groups: &[usize],
) -> Result<f64, MetricsError> {
    let c = cm.n_classes();
    if groups.len() != c {
        return Err(MetricsError::LengthMismatch(groups.len(), c));
    }
    let mut total = 0.0;
    for i in 0..c {
        let row = cm.row_sum(i);
        if row == 0 {
            return Err(MetricsError::EmptyClassRow(i));
        }
        let hits: u64 = (0..c)
            .filter(|&j| groups[j] == groups[i])
            .map(|j| cm.counts()[i][j])
            .sum();
        total += hits as f64 / row as f64;
    }
    Ok(total / c as f64)
}

/// Pools every (trial, class) score — target when the class is the trial's
/// true label, non-target otherwise — and returns the EER of the pool.
pub fn multiclass_eer(scores: &[Vec<f64>], truths: &[usize]) -> Result<EerPoint, MetricsError> {
    if scores.len() != truths.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), truths.len()));
    }
    let mut pool = ScorePool::default();
    for (row, &truth) in scores.iter().zip(truths) {
        if truth >= row.len() {
            return Err(MetricsError::ClassOutOfRange {
                got: truth,
                classes: row.len(),
            });
        }
        for (c, &s) in row.iter().enumerate() {
            if c == truth {
                pool.target.push(s);
            } else {
                pool.nontarget.push(s);
            }
        }
    }
    eer(&pool)
}

/// Macro-averaged variant: one EER per class (that class's scores as
/// targets on its own trials, non-targets elsewhere), then the mean.
pub fn multiclass_eer_macro(scores: &[Vec<f64>], truths: &[usize]) -> Result<f64, MetricsError> {
    if scores.len() != truths.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), truths.len()));
    }
    let n_classes = scores.first().map_or(0, |r| r.len());
    let mut sum = 0.0;
    let mut used = 0;
    for c in 0..n_classes {
        let mut pool = ScorePool::default();
        for (row, &truth) in scores.iter().zip(truths) {
            if truth == c {
                pool.target.push(row[c]);
            } else {
                pool.nontarget.push(row[c]);
            }
        }
        if pool.target.is_empty() || pool.nontarget.is_empty() {
            continue;
        }
        sum += eer(&pool)?.eer;
        used += 1;
    }
    if used == 0 {
        return Err(MetricsError::EmptyPool);
    }
    Ok(sum / used as f64)
}

/// Pools per-value probabilities of one attribute over utterances: the true
/// value's probability is a target score, the other values' probabilities are
/// non-targets.
pub fn value_score_pool(predictions: &[Vec<f64>], truths: &[usize]) -> ScorePool {
    let mut pool = ScorePool::default();
    for (pred, &truth) in predictions.iter().zip(truths) {
        for (m, &p) in pred.iter().enumerate() {
            if m == truth {
                pool.target.push(p);
            } else {
                pool.nontarget.push(p);
            }
        }
    }
    pool
}

/// Per-attack assignment counts for one attribute, plus the attribute's
/// pooled value-detection EER over utterances with ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeFlow {
    pub attribute: String,
    pub values: Vec<String>,
    /// label -> per-value count of utterances whose argmax landed there.
    pub counts: BTreeMap<String, Vec<u64>>,
    pub eer: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowReport {
    pub attributes: Vec<AttributeFlow>,
}

/// Assigns every utterance to its per-attribute argmax value and tabulates
/// the attack -> value flow. Rows exist for every label present, including
/// ones without ground truth (those do not enter the EER pools).
pub fn flow_report(
    rows: &[Vec<f64>],
    labels: &[String],
    schema: &AttributeSchema,
) -> Result<FlowReport, MetricsError> {
    if rows.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(rows.len(), labels.len()));
    }
    let m_total = schema.total_values();
    for row in rows {
        if row.len() != m_total {
            return Err(MetricsError::DimensionMismatch {
                expected: m_total,
                got: row.len(),
            });
        }
    }
    let mut attributes = Vec::with_capacity(schema.num_attributes());
    for l in 0..schema.num_attributes() {
        let range = schema.block_range(l);
        let width = range.len();
        let mut counts: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        for (row, label) in rows.iter().zip(labels) {
            let block = &row[range.clone()];
            let argmax = block
                .iter()
                .enumerate()
                .max_by(|(i, a), (j, b)| a.partial_cmp(b).unwrap().then(j.cmp(i)))
                .map(|(i, _)| i)
                .unwrap();
            counts.entry(label.clone()).or_insert_with(|| vec![0; width])[argmax] += 1;
            if let Some(truth_row) = schema.attack_values(label) {
                preds.push(block.to_vec());
                truths.push(truth_row[l]);
            }
        }
        let pooled = value_score_pool(&preds, &truths);
        let eer_value = eer(&pooled).ok().map(|p| p.eer);
        attributes.push(AttributeFlow {
            attribute: schema.attributes()[l].name.clone(),
            values: schema.attributes()[l].values.clone(),
            counts,
            eer: eer_value,
        });
    }
    Ok(FlowReport { attributes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pool(t: &[f64], n: &[f64]) -> ScorePool {
        ScorePool::new(t.to_vec(), n.to_vec())
    }

    // Independent oracle: recompute FAR/FRR by direct counting at every
    // candidate threshold.
    fn eer_oracle(targets: &[f64], nontargets: &[f64]) -> (f64, f64) {
        let mut candidates: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
        candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
        candidates.dedup();
        let mut best_gap = f64::INFINITY;
        let mut best = (0.5, 0.0);
        for &t in &candidates {
            let frr = targets.iter().filter(|&&s| s < t).count() as f64 / targets.len() as f64;
            let far =
                nontargets.iter().filter(|&&s| s >= t).count() as f64 / nontargets.len() as f64;
            if (far - frr).abs() < best_gap {
                best_gap = (far - frr).abs();
                best = ((far + frr) / 2.0, t);
            }
        }
        best
    }

    #[test]
    fn perfect_separation_gives_zero() {
        let p = pool(&[0.9, 0.8], &[0.2, 0.1]);
        assert_eq!(eer(&p).unwrap().eer, 0.0);
    }

    #[test]
    fn identical_distributions_give_half() {
        let p = pool(&[0.5, 0.5], &[0.5, 0.5]);
        assert_eq!(eer(&p).unwrap().eer, 0.5);
    }

    #[test]
    fn interleaved_pool_matches_hand_sweep() {
        // min |FAR-FRR| at t=0.7: FAR=1/3, FRR=1/3.
        let p = pool(&[0.9, 0.4, 0.8], &[0.7, 0.2, 0.1]);
        let point = eer(&p).unwrap();
        assert!((point.eer - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(point.threshold, 0.7);
    }

    #[test]
    fn empty_pool_is_rejected() {
        assert!(matches!(
            eer(&pool(&[], &[0.1])),
            Err(MetricsError::EmptyPool)
        ));
        assert!(matches!(
            eer(&pool(&[0.1], &[])),
            Err(MetricsError::EmptyPool)
        ));
    }

    #[test]
    fn neg_infinity_sentinels_sort_below_finite_scores() {
        let p = pool(&[1.0, 2.0], &[f64::NEG_INFINITY, 0.5]);
        let point = eer(&p).unwrap();
        assert_eq!(point.eer, 0.0);
    }

    #[test]
    fn balanced_accuracy_examples() {
        let diag = ConfusionMatrix::from_pairs(3, &[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(balanced_accuracy(&diag).unwrap(), 1.0);

        // Everything predicted as class 0: only class 0 has recall 1.
        let all0 = ConfusionMatrix::from_pairs(4, &[0, 1, 2, 3], &[0, 0, 0, 0]).unwrap();
        assert_eq!(balanced_accuracy(&all0).unwrap(), 0.25);

        let mut cm = ConfusionMatrix::new(2);
        for (t, p, n) in [(0, 0, 8), (0, 1, 2), (1, 0, 3), (1, 1, 7)] {
            for _ in 0..n {
                cm.record(t, p);
            }
        }
        assert!((balanced_accuracy(&cm).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn empty_class_row_is_rejected() {
        let cm = ConfusionMatrix::from_pairs(2, &[0, 0], &[0, 1]).unwrap();
        assert!(matches!(
            balanced_accuracy(&cm),
            Err(MetricsError::EmptyClassRow(1))
        ));
    }

    #[test]
    fn grouped_accuracy_merges_twin_columns() {
        // Class 0 and 1 share a group; mutual confusion does not hurt.
        let cm =
            ConfusionMatrix::from_pairs(3, &[0, 0, 1, 1, 2, 2], &[0, 1, 0, 1, 2, 2]).unwrap();
        assert_eq!(balanced_accuracy_grouped(&cm, &[0, 0, 2]).unwrap(), 1.0);
        assert!((balanced_accuracy(&cm).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn multiclass_eer_edge_cases() {
        // True class strictly highest everywhere, and above every non-target.
        let scores = vec![vec![9.0, 0.0], vec![0.1, 8.0], vec![8.5, 0.2]];
        let truths = vec![0, 1, 0];
        assert_eq!(multiclass_eer(&scores, &truths).unwrap().eer, 0.0);

        let flat = vec![vec![1.0, 1.0, 1.0]; 4];
        assert_eq!(multiclass_eer(&flat, &[0, 1, 2, 0]).unwrap().eer, 0.5);
    }

    #[test]
    fn multiclass_pool_matches_brute_force_pooling() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(5, "metrics-mc", 0);
        for _ in 0..50 {
            let c = rng.gen_range(2usize..5);
            let n = rng.gen_range(2usize..12);
            let scores: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect();
            let truths: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let got = multiclass_eer(&scores, &truths).unwrap();

            let mut t = Vec::new();
            let mut nt = Vec::new();
            for (row, &truth) in scores.iter().zip(&truths) {
                for (cls, &s) in row.iter().enumerate() {
                    if cls == truth {
                        t.push(s);
                    } else {
                        nt.push(s);
                    }
                }
            }
            let (want, _) = eer_oracle(&t, &nt);
            assert_eq!(got.eer, want);
        }
    }

    #[test]
    fn flow_report_counts_and_conservation() {
        let schema = crate::dataio::AttributeSchema::new(
            "t".into(),
            vec![
                crate::dataio::AttributeDef {
                    name: "a".into(),
                    values: vec!["x".into(), "y".into()],
                },
                crate::dataio::AttributeDef {
                    name: "b".into(),
                    values: vec!["p".into(), "q".into(), "r".into()],
                },
            ],
            [
                ("K1".to_string(), vec!["x".to_string(), "p".to_string()]),
                ("K2".to_string(), vec!["y".to_string(), "r".to_string()]),
            ]
            .into_iter()
            .collect(),
        )
        .unwrap();

        let rows = vec![
            vec![0.9, 0.1, 0.8, 0.1, 0.1], // K1, correct everywhere
            vec![0.8, 0.2, 0.7, 0.2, 0.1], // K1, correct everywhere
            vec![0.2, 0.8, 0.1, 0.2, 0.7], // K2, correct everywhere
        ];
        let labels = vec!["K1".to_string(), "K1".to_string(), "K2".to_string()];
        let report = flow_report(&rows, &labels, &schema).unwrap();

        for attr in &report.attributes {
            for (label, counts) in &attr.counts {
                let total: u64 = counts.iter().sum();
                let expected = labels.iter().filter(|l| *l == label).count() as u64;
                assert_eq!(total, expected, "row conservation for {label}");
            }
        }
        // All predictions correct: one nonzero column per attack row.
        for attr in &report.attributes {
            for counts in attr.counts.values() {
                assert_eq!(counts.iter().filter(|&&c| c > 0).count(), 1);
            }
        }
        assert_eq!(report.attributes[0].eer, Some(0.0));
    }

    // Construction oracle for confusable pairs: two attacks with identical
    // attribute rows fed the same multiset of predictions produce identical
    // flow rows.
    #[test]
    fn flow_rows_of_identical_configurations_match()  {
        let schema = crate::dataio::AttributeSchema::new(
            "twin".into(),
            vec![crate::dataio::AttributeDef {
                name: "a".into(),
                values: vec!["x".into(), "y".into(), "z".into()],
            }],
            [
                ("K1".to_string(), vec!["x".to_string()]),
                ("K2".to_string(), vec!["x".to_string()]),
            ]
            .into_iter()
            .collect(),
        )
        .unwrap();
        let shared = [
            vec![0.7, 0.2, 0.1],
            vec![0.5, 0.4, 0.1],
            vec![0.2, 0.6, 0.2],
        ];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for label in ["K1", "K2"] {
            for pred in &shared {
                rows.push(pred.clone());
                labels.push(label.to_string());
            }
        }
        let report = flow_report(&rows, &labels, &schema).unwrap();
        let attr = &report.attributes[0];
        assert_eq!(attr.counts["K1"], attr.counts["K2"]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        // Acceptance-style oracle equivalence on random pools.
        #[test]
        fn eer_matches_exhaustive_oracle(
            t in proptest::collection::vec(-100i32..100, 1..50),
            n in proptest::collection::vec(-100i32..100, 1..50),
        ) {
            let t: Vec<f64> = t.into_iter().map(|v| v as f64 / 10.0).collect();
            let n: Vec<f64> = n.into_iter().map(|v| v as f64 / 10.0).collect();
            let got = eer(&pool(&t, &n)).unwrap();
            let (eer_want, thr_want) = eer_oracle(&t, &n);
            prop_assert_eq!(got.eer, eer_want);
            prop_assert_eq!(got.threshold, thr_want);
        }

        // EER is a rank statistic: invariant under strictly increasing maps.
        #[test]
        fn eer_is_invariant_under_monotone_transforms(
            t in proptest::collection::vec(-50i32..50, 1..30),
            n in proptest::collection::vec(-50i32..50, 1..30),
        ) {
            let t: Vec<f64> = t.into_iter().map(|v| v as f64 / 7.0).collect();
            let n: Vec<f64> = n.into_iter().map(|v| v as f64 / 7.0).collect();
            let base = eer(&pool(&t, &n)).unwrap().eer;

            let exp_t: Vec<f64> = t.iter().map(|v| v.exp()).collect();
            let exp_n: Vec<f64> = n.iter().map(|v| v.exp()).collect();
            prop_assert_eq!(eer(&pool(&exp_t, &exp_n)).unwrap().eer, base);

            let aff_t: Vec<f64> = t.iter().map(|v| 3.0 * v + 11.0).collect();
            let aff_n: Vec<f64> = n.iter().map(|v| 3.0 * v + 11.0).collect();
            prop_assert_eq!(eer(&pool(&aff_t, &aff_n)).unwrap().eer, base);
        }

        // Swapping the roles of the two lists while negating scores keeps the
        // attainable EER. With tied scores several thresholds can minimize
        // |FAR-FRR| at different (FAR+FRR)/2, and the lowest-threshold rule
        // picks opposite ends of that set under negation; the symmetry
        // therefore holds at the level of the minimizing set, and exactly
        // whenever the minimizer's EER value is unique.
        #[test]
        fn eer_swap_negate_symmetry(
            t in proptest::collection::vec(-50i32..50, 1..30),
            n in proptest::collection::vec(-50i32..50, 1..30),
        ) {
            fn minimizing_eers(targets: &[f64], nontargets: &[f64]) -> Vec<f64> {
                let mut candidates: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
                candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
                candidates.dedup();
                let points: Vec<(f64, f64)> = candidates
                    .iter()
                    .map(|&thr| {
                        let frr = targets.iter().filter(|&&s| s < thr).count() as f64
                            / targets.len() as f64;
                        let far = nontargets.iter().filter(|&&s| s >= thr).count() as f64
                            / nontargets.len() as f64;
                        ((far - frr).abs(), (far + frr) / 2.0)
                    })
                    .collect();
                let min_gap = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
                points
                    .into_iter()
                    .filter(|p| (p.0 - min_gap).abs() < 1e-12)
                    .map(|p| p.1)
                    .collect()
            }

            let t: Vec<f64> = t.into_iter().map(|v| v as f64 / 3.0).collect();
            let n: Vec<f64> = n.into_iter().map(|v| v as f64 / 3.0).collect();
            let base = eer(&pool(&t, &n)).unwrap().eer;
            let neg_t: Vec<f64> = n.iter().map(|v| -v).collect();
            let neg_n: Vec<f64> = t.iter().map(|v| -v).collect();
            let swapped = eer(&pool(&neg_t, &neg_n)).unwrap().eer;

            let set = minimizing_eers(&t, &n);
            prop_assert!(set.iter().any(|&e| (e - swapped).abs() < 1e-12));
            let swapped_set = minimizing_eers(&neg_t, &neg_n);
            prop_assert!(swapped_set.iter().any(|&e| (e - base).abs() < 1e-12));
            if set.len() == 1 {
                prop_assert!((base - swapped).abs() < 1e-12);
            }
        }

        // Duplicating all trials of one class leaves per-class recalls alone.
        #[test]
        fn balanced_accuracy_duplication_invariance(
            truths in proptest::collection::vec(0usize..3, 3..30),
            preds in proptest::collection::vec(0usize..3, 3..30),
            dup_class in 0usize..3,
        ) {
            let n = truths.len().min(preds.len());
            let truths = &truths[..n];
            let preds = &preds[..n];
            prop_assume!((0..3).all(|c| truths.contains(&c)));

            let cm = ConfusionMatrix::from_pairs(3, truths, preds).unwrap();
            let base = balanced_accuracy(&cm).unwrap();

            let mut t2 = truths.to_vec();
            let mut p2 = preds.to_vec();
            for (&t, &p) in truths.iter().zip(preds) {
                if t == dup_class {
                    t2.push(t);
                    p2.push(p);
                }
            }
            let cm2 = ConfusionMatrix::from_pairs(3, &t2, &p2).unwrap();
            prop_assert!((balanced_accuracy(&cm2).unwrap() - base).abs() < 1e-12);
        }
    }
}
