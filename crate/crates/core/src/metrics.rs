//! Accuracy, ROC-AUC, concordance index, time-dependent AUC, and curve points.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::SurvivalTarget;

/// One held-out prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Class { probs: Vec<f64>, label: usize },
    Survival { risk: f64, target: SurvivalTarget },
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn class_view(records: &[EvalRecord]) -> Result<(Vec<&[f64]>, Vec<usize>)> {
    let mut probs = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        match &r.outcome {
            Outcome::Class { probs: p, label } => {
                probs.push(p.as_slice());
                labels.push(*label);
            }
            Outcome::Survival { .. } => {
                return Err(Error::MetricUndefined(format!(
                    "{} is a survival record in a classification metric",
                    r.sample_id
                )))
            }
        }
    }
    Ok((probs, labels))
}

fn survival_view(records: &[EvalRecord]) -> Result<(Vec<f64>, Vec<SurvivalTarget>)> {
    let mut risks = Vec::with_capacity(records.len());
    let mut targets = Vec::with_capacity(records.len());
    for r in records {
        match &r.outcome {
            Outcome::Survival { risk, target } => {
                risks.push(*risk);
                targets.push(*target);
            }
            Outcome::Class { .. } => {
                return Err(Error::MetricUndefined(format!(
                    "{} is a classification record in a survival metric",
                    r.sample_id
                )))
            }
        }
    }
    Ok((risks, targets))
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::MetricUndefined("accuracy of zero records".into()));
    }
    let (probs, labels) = class_view(records)?;
    let correct = probs
        .iter()
        .zip(&labels)
        .filter(|(p, &l)| argmax(p) == l)
        .count();
    Ok(correct as f64 / records.len() as f64)
}

/// Mann-Whitney AUC with midranks: `P(score_pos > score_neg) + ½·P(tie)`.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::MetricUndefined(format!(
            "AUC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps midranks integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1, midrank = (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            if positive[k] {
                twice_rank_sum += twice_mid;
            }
        }
        i = j + 1;
    }
    let n_pos64 = n_pos as u64;
    // 2·U = 2·R − n_pos(n_pos+1) counts concordant pairs twice and ties once.
    let twice_u = twice_rank_sum - n_pos64 * (n_pos64 + 1);
    Ok(pair_fraction(twice_u, (n_pos * n_neg) as u64))
}

/// `(2·concordant + ties) / (2·pairs)` as a single rounding.
pub fn pair_fraction(twice_wins: u64, pairs: u64) -> f64 {
    twice_wins as f64 / (2 * pairs) as f64
}

/// Per-class one-vs-rest AUCs (`None` where a class is absent or universal)
/// and their macro average.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AucReport {
    pub macro_auc: f64,
    pub per_class: Vec<Option<f64>>,
}

pub fn roc_auc_report(records: &[EvalRecord]) -> Result<AucReport> {
    let (probs, labels) = class_view(records)?;
    let classes = probs.first().map_or(0, |p| p.len());
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        per_class.push(binary_auc(&scores, &positive).ok());
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::MetricUndefined(
            "ROC-AUC needs at least two distinct labels".into(),
        ));
    }
    Ok(AucReport {
        macro_auc: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class,
    })
}

/// Macro one-vs-rest ROC-AUC. Classes missing from the labels are skipped.
pub fn roc_auc(records: &[EvalRecord]) -> Result<f64> {
    roc_auc_report(records).map(|r| r.macro_auc)
}

/// Integer pair counts behind a concordance index.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairCounts {
    pub concordant: u64,
    pub tied: u64,
    pub comparable: u64,
}

impl PairCounts {
    pub fn index(&self) -> Result<f64> {
        if self.comparable == 0 {
            return Err(Error::MetricUndefined("no comparable pairs".into()));
        }
        Ok(pair_fraction(
            2 * self.concordant + self.tied,
            self.comparable,
        ))
    }
}

/// Fenwick tree over risk ranks.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Self(vec![0; n + 1])
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< i`.
    fn below(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's pairs: `(i, j)` is comparable when `time_i < time_j` and `i`
/// had the event; concordant when `risk_i > risk_j`, half credit on tied risk.
/// Runs in `O(n log n)`.
pub fn concordance_counts(risks: &[f64], targets: &[SurvivalTarget]) -> PairCounts {
    assert_eq!(risks.len(), targets.len());
    let n = risks.len();
    let mut sorted_risks = risks.to_vec();
    sorted_risks.sort_by(f64::total_cmp);
    sorted_risks.dedup();
    let rank = |r: f64| sorted_risks.partition_point(|&x| x < r);

    let mut by_time: Vec<usize> = (0..n).collect();
    by_time.sort_by(|&a, &b| targets[b].time.total_cmp(&targets[a].time));

    let mut tree = Fenwick::new(sorted_risks.len());
    let mut inserted = 0u64;
    let mut counts = PairCounts::default();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && targets[by_time[j + 1]].time == targets[by_time[i]].time {
            j += 1;
        }
        for &k in &by_time[i..=j] {
            if targets[k].censored {
                continue;
            }
            let r = rank(risks[k]);
            let lower = tree.below(r);
            let upto = tree.below(r + 1);
            counts.concordant += lower;
            counts.tied += upto - lower;
            counts.comparable += inserted;
        }
        for &k in &by_time[i..=j] {
            tree.add(rank(risks[k]));
            inserted += 1;
        }
        i = j + 1;
    }
    counts
}

pub fn concordance_index(records: &[EvalRecord]) -> Result<f64> {
    let (risks, targets) = survival_view(records)?;
    concordance_counts(&risks, &targets).index()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdAucPoint {
    pub time: f64,
    pub auc: f64,
}

/// Cumulative/dynamic AUC: at each `t`, cases are events with time ≤ t and
/// controls are samples with time > t. Times lacking a case or a control
/// are skipped and returned separately.
pub fn time_dependent_auc_raw(
    risks: &[f64],
    targets: &[SurvivalTarget],
    eval_times: &[f64],
) -> (Vec<TdAucPoint>, Vec<f64>) {
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for &t in eval_times {
        let mut scores = Vec::new();
        let mut positive = Vec::new();
        for (r, s) in risks.iter().zip(targets) {
            if !s.censored && s.time <= t {
                scores.push(*r);
                positive.push(true);
            } else if s.time > t {
                scores.push(*r);
                positive.push(false);
            }
        }
        match binary_auc(&scores, &positive) {
            Ok(auc) => points.push(TdAucPoint { time: t, auc }),
            Err(_) => skipped.push(t),
        }
    }
    (points, skipped)
}

pub fn time_dependent_auc(records: &[EvalRecord], eval_times: &[f64]) -> Result<Vec<TdAucPoint>> {
    let (risks, targets) = survival_view(records)?;
    Ok(time_dependent_auc_raw(&risks, &targets, eval_times).0)
}

/// ROC staircase from (0,0) to (1,1), one step per distinct score
/// (descending). Tied scores produce a diagonal segment.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Result<Vec<(f64, f64)>> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::MetricUndefined(
            "ROC curve needs both classes".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if positive[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j + 1;
    }
    Ok(points)
}

/// One-vs-rest ROC points for `class_index`.
pub fn roc_points(records: &[EvalRecord], class_index: usize) -> Result<Vec<(f64, f64)>> {
    let (probs, labels) = class_view(records)?;
    let scores: Vec<f64> = probs.iter().map(|p| p[class_index]).collect();
    let positive: Vec<bool> = labels.iter().map(|&l| l == class_index).collect();
    roc_curve(&scores, &positive)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Decimal places for ROC point files; enough that the file's trapezoid
/// area reproduces the reported AUC to 1e-9.
pub const ROC_DECIMALS: usize = 12;
/// Decimal places for time-dependent AUC files.
pub const TD_AUC_DECIMALS: usize = 6;

pub fn write_curve_csv(
    path: &Path,
    header: (&str, &str),
    points: &[(f64, f64)],
    decimals: usize,
) -> Result<()> {
    let mut out = format!("{},{}\n", header.0, header.1);
    for (x, y) in points {
        writeln!(out, "{x:.decimals$},{y:.decimals$}").expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let parse = |s: Option<&str>| {
            s.and_then(|v| v.trim().parse::<f64>().ok()).ok_or_else(|| {
                Error::Contract(format!("{}: bad curve line {}", path.display(), i + 1))
            })
        };
        let mut parts = line.split(',');
        points.push((parse(parts.next())?, parse(parts.next())?));
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn class_records(probs: &[Vec<f64>], labels: &[usize]) -> Vec<EvalRecord> {
        probs
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (p, &l))| EvalRecord {
                sample_id: format!("s{i}"),
                outcome: Outcome::Class {
                    probs: p.clone(),
                    label: l,
                },
            })
            .collect()
    }

    fn surv(time: f64, censored: bool) -> SurvivalTarget {
        SurvivalTarget {
            time,
            censored,
            bin: 0,
        }
    }

    /// Brute-force over all positive/negative pairs.
    fn auc_oracle(scores: &[f64], positive: &[bool]) -> f64 {
        let (mut twice, mut pairs) = (0u64, 0u64);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if positive[i] && !positive[j] {
                    pairs += 1;
                    if scores[i] > scores[j] {
                        twice += 2;
                    } else if scores[i] == scores[j] {
                        twice += 1;
                    }
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    fn cindex_oracle(risks: &[f64], targets: &[SurvivalTarget]) -> Option<f64> {
        let (mut c, mut t, mut n) = (0u64, 0u64, 0u64);
        for i in 0..risks.len() {
            for j in 0..risks.len() {
                if !targets[i].censored && targets[i].time < targets[j].time {
                    n += 1;
                    if risks[i] > risks[j] {
                        c += 1;
                    } else if risks[i] == risks[j] {
                        t += 1;
                    }
                }
            }
        }
        (n > 0).then(|| (2 * c + t) as f64 / (2 * n) as f64)
    }

    #[test]
    fn accuracy_examples() {
        let p = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        assert_eq!(accuracy(&class_records(&p, &[0, 1])).unwrap(), 1.0);
        assert_eq!(accuracy(&class_records(&p, &[1, 0])).unwrap(), 0.0);
        let p4 = vec![
            vec![0.9, 0.1],
            vec![0.2, 0.8],
            vec![0.6, 0.4],
            vec![0.5, 0.5],
        ];
        assert_eq!(accuracy(&class_records(&p4, &[0, 1, 1, 0])).unwrap(), 0.75);
        assert!(accuracy(&[]).is_err());
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(binary_auc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        assert_eq!(
            binary_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(),
            0.5
        );
        assert!(binary_auc(&[0.1, 0.2], &[true, true]).is_err());
        let recs = class_records(&[vec![0.9, 0.1], vec![0.1, 0.9]], &[0, 0]);
        assert!(roc_auc(&recs).is_err());
    }

    #[test]
    fn macro_auc_skips_absent_class() {
        let p = vec![
            vec![0.7, 0.2, 0.1],
            vec![0.3, 0.6, 0.1],
            vec![0.5, 0.4, 0.1],
        ];
        let report = roc_auc_report(&class_records(&p, &[0, 1, 0])).unwrap();
        assert!(report.per_class[2].is_none());
        assert_eq!(report.per_class[0], Some(1.0));
        assert_eq!(report.macro_auc, 1.0);
    }

    #[test]
    fn auc_matches_pair_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.gen_range(2..=50);
            // Coarse scores force ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
            let mut positive: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            positive[0] = true;
            positive[1] = false;
            assert_eq!(
                binary_auc(&scores, &positive).unwrap(),
                auc_oracle(&scores, &positive)
            );
        }
    }

    #[test]
    fn cindex_examples() {
        let t = [surv(1.0, false), surv(2.0, false), surv(3.0, false)];
        assert_eq!(
            concordance_counts(&[3.0, 2.0, 1.0], &t).index().unwrap(),
            1.0
        );
        assert_eq!(
            concordance_counts(&[1.0, 2.0, 3.0], &t).index().unwrap(),
            0.0
        );
        let t2 = [surv(1.0, false), surv(2.0, true)];
        let counts = concordance_counts(&[5.0, 1.0], &t2);
        assert_eq!(counts.comparable, 1);
        assert_eq!(counts.index().unwrap(), 1.0);
        let none = [surv(1.0, true), surv(2.0, true)];
        assert!(concordance_counts(&[1.0, 2.0], &none).index().is_err());
    }

    #[test]
    fn cindex_matches_pair_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.gen_range(2..=50);
            let risks: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64).collect();
            let targets: Vec<_> = (0..n)
                .map(|_| surv(rng.gen_range(1..15) as f64, rng.gen_bool(0.3)))
                .collect();
            let got = concordance_counts(&risks, &targets).index().ok();
            assert_eq!(got, cindex_oracle(&risks, &targets));
        }
    }

    #[test]
    fn td_auc_examples_and_oracle() {
        let t = [surv(1.0, false), surv(5.0, true)];
        let (pts, _) = time_dependent_auc_raw(&[2.0, 1.0], &t, &[2.0]);
        assert_eq!(
            pts,
            vec![TdAucPoint {
                time: 2.0,
                auc: 1.0
            }]
        );
        let (pts, _) = time_dependent_auc_raw(&[1.0, 1.0], &t, &[2.0]);
        assert_eq!(pts[0].auc, 0.5);
        let (pts, skipped) = time_dependent_auc_raw(&[1.0, 1.0], &t, &[0.5, 10.0]);
        assert!(pts.is_empty());
        assert_eq!(skipped, vec![0.5, 10.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = 30;
            let risks: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
            let targets: Vec<_> = (0..n)
                .map(|_| surv(rng.gen_range(1..20) as f64, rng.gen_bool(0.3)))
                .collect();
            let times = [3.0, 7.5, 12.0];
            let (pts, _) = time_dependent_auc_raw(&risks, &targets, &times);
            for p in pts {
                let (mut twice, mut pairs) = (0u64, 0u64);
                for i in 0..n {
                    for j in 0..n {
                        let case = !targets[i].censored && targets[i].time <= p.time;
                        let control = targets[j].time > p.time;
                        if case && control {
                            pairs += 1;
                            twice += if risks[i] > risks[j] {
                                2
                            } else if risks[i] == risks[j] {
                                1
                            } else {
                                0
                            };
                        }
                    }
                }
                assert_eq!(p.auc, twice as f64 / (2 * pairs) as f64);
            }
        }
    }

    #[test]
    fn roc_points_properties() {
        let scores = [0.9, 0.8, 0.3, 0.1];
        let positive = [true, true, false, false];
        let pts = roc_curve(&scores, &positive).unwrap();
        assert!(pts.contains(&(0.0, 1.0)));
        assert_eq!(*pts.last().unwrap(), (1.0, 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = rng.gen_range(4..40);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64).collect();
            let mut positive: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            positive[0] = true;
            positive[1] = false;
            let pts = roc_curve(&scores, &positive).unwrap();
            let auc = binary_auc(&scores, &positive).unwrap();
            assert!((trapezoid_area(&pts) - auc).abs() < 1e-12);
            assert!(pts.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
            let rev: Vec<f64> = scores.iter().map(|s| -s).collect();
            let rev_area = trapezoid_area(&roc_curve(&rev, &positive).unwrap());
            assert!((rev_area - (1.0 - auc)).abs() < 1e-12);
        }
        assert!(roc_curve(&[0.1], &[true]).is_err());
    }

    #[test]
    fn curve_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roc.csv");
        let pts = vec![(0.0, 0.0), (1.0 / 3.0, 0.5), (1.0, 1.0)];
        write_curve_csv(&path, ("fpr", "tpr"), &pts, ROC_DECIMALS).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("fpr,tpr\n0.000000000000,0.000000000000\n"));
        let back = read_curve_csv(&path).unwrap();
        assert!((trapezoid_area(&back) - trapezoid_area(&pts)).abs() < 1e-11);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            scores in prop::collection::vec(-5.0f64..5.0, 2..50),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut positive: Vec<bool> = scores.iter().map(|_| rng.gen_bool(0.5)).collect();
            positive[0] = true;
            positive[1] = false;
            let a = binary_auc(&scores, &positive).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
            prop_assert_eq!(a, binary_auc(&mapped, &positive).unwrap());
        }

        #[test]
        fn cindex_flips_under_negated_risk(
            n in 2usize..50,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let risks: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let targets: Vec<_> = (0..n)
                .map(|_| surv(rng.gen_range(1.0..20.0), rng.gen_bool(0.3)))
                .collect();
            let neg: Vec<f64> = risks.iter().map(|r| -r).collect();
            let a = concordance_counts(&risks, &targets).index();
            let b = concordance_counts(&neg, &targets).index();
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
        }
    }
}
