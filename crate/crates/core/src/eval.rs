//! Patch verification (FPR at a recall level), nearest-neighbour matching
//! accuracy, and the statistics table built from a metrics log.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::ArrayView2;

use crate::data::{PatchDataset, VerificationPairs};
use crate::error::{Error, Result};
use crate::geometry::{angle, normalize, RawDescriptor, UnitDescriptor};
use crate::stats::StatState;
use crate::trainer::Model;

/// Distances with match labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPairs {
    distances: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredPairs {
    pub fn new(distances: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if distances.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} distances vs {} labels",
                distances.len(),
                labels.len()
            )));
        }
        let matches = labels.iter().filter(|l| **l).count();
        if matches == 0 || matches == labels.len() {
            return Err(Error::DegenerateLabels(format!(
                "{matches} matching and {} non-matching pairs",
                labels.len() - matches
            )));
        }
        if let Some(d) = distances.iter().find(|d| d.is_nan()) {
            return Err(Error::InvalidDistance {
                metric: "verification",
                value: *d,
            });
        }
        Ok(Self { distances, labels })
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }
}

/// False positive rate at the smallest threshold that reaches `recall`.
///
/// The threshold `t` is the `k`-th smallest matching distance with
/// `k = ⌈recall·n_match⌉`; a pair is predicted to match when its distance is
/// `≤ t`, ties included.
pub fn fpr_at_recall(scored: &ScoredPairs, recall: f64) -> Result<f64> {
    if !(recall > 0.0 && recall <= 1.0) {
        return Err(Error::OutOfRange {
            what: "recall",
            value: recall,
            range: "(0, 1]".into(),
        });
    }
    let mut matching: Vec<f64> = scored
        .distances
        .iter()
        .zip(&scored.labels)
        .filter(|(_, l)| **l)
        .map(|(d, _)| *d)
        .collect();
    matching.sort_by(f64::total_cmp);
    let n = matching.len();
    // Smallest k with k/n ≥ recall, guarding against rounding in recall·n.
    let mut k = ((recall * n as f64).ceil() as usize).clamp(1, n);
    while k > 1 && (k - 1) as f64 / n as f64 >= recall {
        k -= 1;
    }
    let threshold = matching[k - 1];
    let (mut fp, mut negatives) = (0usize, 0usize);
    for (d, l) in scored.distances.iter().zip(&scored.labels) {
        if !*l {
            negatives += 1;
            if *d <= threshold {
                fp += 1;
            }
        }
    }
    Ok(fp as f64 / negatives as f64)
}

fn unit_rows(descriptors: ArrayView2<f64>) -> Result<Vec<UnitDescriptor>> {
    descriptors
        .rows()
        .into_iter()
        .map(|r| normalize(&RawDescriptor::new(r.to_vec())?))
        .collect()
}

/// Angular distance of every pair, from per-patch descriptors.
pub fn score_pairs(descriptors: ArrayView2<f64>, pairs: &VerificationPairs) -> Result<ScoredPairs> {
    pairs.check_indices(descriptors.nrows())?;
    let units = unit_rows(descriptors)?;
    let (distances, labels) = pairs
        .pairs()
        .iter()
        .map(|p| (angle(&units[p.first], &units[p.second]), p.is_match))
        .unzip();
    ScoredPairs::new(distances, labels)
}

/// FPR@95 of `model` (inference mode) on `pairs` drawn from `dataset`.
pub fn evaluate_verification(model: &Model, dataset: &PatchDataset, pairs: &VerificationPairs) -> Result<f64> {
    pairs.check_indices(dataset.len())?;
    let descriptors = model.encode(dataset.pixels())?;
    fpr_at_recall(&score_pairs(descriptors.view(), pairs)?, 0.95)
}

/// Fraction of queries whose nearest reference (by angle, no ratio test)
/// carries the same label. Ties go to the lowest reference index.
pub fn nn_accuracy(
    reference: ArrayView2<f64>,
    reference_labels: &[u64],
    queries: ArrayView2<f64>,
    query_labels: &[u64],
) -> Result<f64> {
    if reference.nrows() != reference_labels.len() || queries.nrows() != query_labels.len() {
        return Err(Error::ShapeMismatch("descriptor and label counts differ".into()));
    }
    if reference.nrows() == 0 || queries.nrows() == 0 {
        return Err(Error::InsufficientData {
            needed: 1,
            got: 0,
        });
    }
    let refs = unit_rows(reference)?;
    let qs = unit_rows(queries)?;
    let correct = qs
        .iter()
        .zip(query_labels)
        .filter(|(q, label)| {
            let (best, _) = refs
                .iter()
                .map(|r| angle(q, r))
                .enumerate()
                .fold((0, f64::INFINITY), |b, (i, d)| if d < b.1 { (i, d) } else { b });
            reference_labels[best] == **label
        })
        .count();
    Ok(correct as f64 / qs.len() as f64)
}

/// Nearest-neighbour accuracy of `model` descriptors; labels are compared by
/// their original class identifiers.
pub fn nn_matching_accuracy(model: &Model, reference: &PatchDataset, query: &PatchDataset) -> Result<f64> {
    let ids = |ds: &PatchDataset| -> Vec<u64> { ds.labels().iter().map(|l| ds.class_id(*l)).collect() };
    let r = model.encode(reference.pixels())?;
    let q = model.encode(query.pixels())?;
    nn_accuracy(r.view(), &ids(reference), q.view(), &ids(query))
}

/// Display scaling of one table row: the printed number times the scale is
/// the value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scaling {
    Tenth,
    Hundredth,
    Unit,
    Integer,
}

impl Scaling {
    fn factor(self) -> f64 {
        match self {
            Scaling::Tenth => 0.1,
            Scaling::Hundredth => 0.01,
            Scaling::Unit | Scaling::Integer => 1.0,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Scaling::Tenth => "(1e-1)",
            Scaling::Hundredth => "(1e-2)",
            Scaling::Unit | Scaling::Integer => "",
        }
    }

    pub fn format(self, value: f64) -> String {
        match self {
            Scaling::Integer => format!("{}", value.round()),
            _ => format!("{:.2}", value / self.factor()),
        }
    }

    pub fn parse(self, text: &str) -> Result<f64> {
        let v: f64 = text
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("not a number: `{text}`")))?;
        Ok(v * self.factor())
    }

    /// Largest round-trip error of [`format`](Self::format) then
    /// [`parse`](Self::parse).
    pub fn resolution(self) -> f64 {
        match self {
            Scaling::Integer => 0.5,
            _ => 0.005 * self.factor(),
        }
    }
}

/// Table rows in display order: label, log column, scaling.
pub const REPORT_ROWS: [(&str, &str, Scaling); 8] = [
    ("E[theta_r]", "e_theta_rel", Scaling::Tenth),
    ("Std[theta_r]", "std_theta_rel", Scaling::Tenth),
    ("E[theta_p]", "e_theta_pos", Scaling::Tenth),
    ("Std[theta_p]", "std_theta_pos", Scaling::Tenth),
    ("E[theta_n]", "e_theta_neg", Scaling::Unit),
    ("Std[theta_n]", "std_theta_neg", Scaling::Hundredth),
    ("E[P_p]", "e_power_pos", Scaling::Integer),
    ("E[P_n]", "e_power_neg", Scaling::Integer),
];

/// Reads a metrics log and prints the statistics at the end of each
/// requested epoch (`iterations_per_epoch` iterations each) as a table with
/// one column per epoch.
pub fn stats_report(log: &Path, epochs: &[u64], iterations_per_epoch: u64) -> Result<String> {
    if iterations_per_epoch == 0 || epochs.is_empty() {
        return Err(Error::Config("stats report needs epochs and a positive epoch length".into()));
    }
    let mut reader = csv::Reader::from_path(log).map_err(|e| Error::format(log, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::format(log, e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(log, format!("missing column `{name}`")))
    };
    let it_col = column("iteration")?;
    let stat_cols: Vec<usize> = StatState::CSV_FIELDS.iter().map(|f| column(f)).collect::<Result<_>>()?;
    let mut rows: Vec<(u64, [f64; 8])> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::format(log, e.to_string()))?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(log, format!("bad value in column {}", headers.get(i).unwrap_or("?"))))
        };
        let it = parse(it_col)? as u64;
        let mut fields = [0.0; 8];
        for (k, c) in stat_cols.iter().enumerate() {
            fields[k] = parse(*c)?;
        }
        rows.push((it, fields));
    }
    let mut columns = Vec::new();
    for &epoch in epochs {
        let last = (epoch * iterations_per_epoch).saturating_sub(1);
        let row = rows
            .iter()
            .filter(|(it, _)| *it <= last)
            .max_by_key(|(it, _)| *it)
            .ok_or_else(|| Error::format(log, format!("no entries up to epoch {epoch}")))?;
        columns.push(StatState::from_fields(row.1, true));
    }
    let mut out = String::new();
    let _ = write!(out, "{:<18}", "Epoch");
    for e in epochs {
        let _ = write!(out, "{e:>10}");
    }
    out.push('\n');
    for (label, field, scaling) in REPORT_ROWS {
        let k = StatState::CSV_FIELDS.iter().position(|f| *f == field).expect("known field");
        let _ = write!(out, "{:<18}", format!("{label}{}", scaling.suffix()));
        for s in &columns {
            let _ = write!(out, "{:>10}", scaling.format(s.fields()[k]));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scored(m: &[f64], n: &[f64]) -> ScoredPairs {
        let mut d = m.to_vec();
        d.extend_from_slice(n);
        let mut l = vec![true; m.len()];
        l.extend(vec![false; n.len()]);
        ScoredPairs::new(d, l).unwrap()
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr_at_recall(&scored(&[0.1, 0.2], &[0.5, 0.6]), 0.95).unwrap(), 0.0);
        assert_eq!(fpr_at_recall(&scored(&[0.1, 0.2, 0.3, 0.9], &[0.25, 0.5]), 0.95).unwrap(), 1.0);
        // Ties at the threshold count as predicted matches.
        assert_eq!(fpr_at_recall(&scored(&[0.1, 0.4], &[0.4, 0.5]), 1.0).unwrap(), 0.5);
        assert!(ScoredPairs::new(vec![0.1, 0.2], vec![true, true]).is_err());
        assert!(fpr_at_recall(&scored(&[0.1], &[0.2]), 0.0).is_err());
    }

    #[test]
    fn shuffled_labels_give_chance_fpr() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let d: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let fpr = fpr_at_recall(&ScoredPairs::new(d, l).unwrap(), 0.95).unwrap();
        assert!((fpr - 0.95).abs() <= 0.01, "{fpr}");
    }

    /// Sweeps every candidate threshold and returns the FPR of the lowest one
    /// whose TPR reaches `recall`.
    fn roc_oracle(d: &[f64], l: &[bool], recall: f64) -> f64 {
        let mut thresholds: Vec<f64> = d.to_vec();
        thresholds.sort_by(f64::total_cmp);
        let pos = l.iter().filter(|x| **x).count() as f64;
        let neg = l.len() as f64 - pos;
        for t in thresholds {
            let tp = d.iter().zip(l).filter(|(x, y)| **y && **x <= t).count() as f64;
            if tp / pos >= recall {
                return d.iter().zip(l).filter(|(x, y)| !**y && **x <= t).count() as f64 / neg;
            }
        }
        unreachable!()
    }

    #[test]
    fn fpr_matches_roc_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let n = rng.random_range(2..=20);
            // Coarse grid so ties occur.
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
            let mut l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            l[0] = true;
            l[1] = false;
            let recall = [0.5, 0.8, 0.95, 1.0][rng.random_range(0..4)];
            let s = ScoredPairs::new(d.clone(), l.clone()).unwrap();
            assert_eq!(fpr_at_recall(&s, recall).unwrap(), roc_oracle(&d, &l, recall));
        }
    }

    proptest! {
        #[test]
        fn monotone_in_recall_and_rank_invariant(
            d in proptest::collection::vec(0.0f64..3.0, 4..40),
            bits in proptest::collection::vec(any::<bool>(), 40),
            r1 in 0.05f64..1.0,
            r2 in 0.05f64..1.0,
        ) {
            let mut l = bits[..d.len()].to_vec();
            l[0] = true;
            l[1] = false;
            let s = ScoredPairs::new(d.clone(), l.clone()).unwrap();
            let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
            prop_assert!(fpr_at_recall(&s, lo).unwrap() <= fpr_at_recall(&s, hi).unwrap());
            // Chordal distance is a strictly increasing function of the angle.
            let chord: Vec<f64> = d.iter().map(|t| 2.0 * (t / 2.0).sin()).collect();
            let s2 = ScoredPairs::new(chord, l).unwrap();
            prop_assert_eq!(fpr_at_recall(&s, hi).unwrap(), fpr_at_recall(&s2, hi).unwrap());
        }
    }

    #[test]
    fn far_non_match_does_not_add_false_positives() {
        let base = scored(&[0.1, 0.2, 0.3], &[0.15, 0.9]);
        let more = scored(&[0.1, 0.2, 0.3], &[0.15, 0.9, 2.0]);
        let fp = |s: &ScoredPairs, n: f64| fpr_at_recall(s, 0.95).unwrap() * n;
        assert_eq!(fp(&base, 2.0), fp(&more, 3.0));
    }

    #[test]
    fn nn_accuracy_examples() {
        let r = arr2(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.2]]);
        assert_eq!(nn_accuracy(r.view(), &[1, 2, 3], r.view(), &[1, 2, 3]).unwrap(), 1.0);
        let q = arr2(&[[0.9, 0.1]]);
        assert_eq!(nn_accuracy(r.view(), &[1, 2, 3], q.view(), &[1]).unwrap(), 1.0);
        assert_eq!(nn_accuracy(r.view(), &[1, 2, 3], q.view(), &[2]).unwrap(), 0.0);
    }

    #[test]
    fn nn_accuracy_is_chance_for_random_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let classes = 10u64;
        let r = Array2::from_shape_simple_fn((200, 8), || rng.random_range(-1.0..1.0));
        let q = Array2::from_shape_simple_fn((4000, 8), || rng.random_range(-1.0..1.0));
        let rl: Vec<u64> = (0..200).map(|_| rng.random_range(0..classes)).collect();
        let ql: Vec<u64> = (0..4000).map(|_| rng.random_range(0..classes)).collect();
        let acc = nn_accuracy(r.view(), &rl, q.view(), &ql).unwrap();
        // Binomial standard error at p = 0.1 over 4000 queries is ~0.005.
        assert!((acc - 0.1).abs() < 0.02, "{acc}");
    }

    #[test]
    fn scaling_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in [Scaling::Tenth, Scaling::Hundredth, Scaling::Unit, Scaling::Integer] {
            for _ in 0..1000 {
                let v: f64 = rng.random_range(-2.0..400.0) * s.factor();
                let back = s.parse(&s.format(v)).unwrap();
                assert!((back - v).abs() <= s.resolution() * (1.0 + 1e-9), "{s:?} {v} {back}");
            }
        }
        assert_eq!(Scaling::Tenth.format(-0.286), "-2.86");
        assert_eq!(Scaling::Hundredth.format(0.0814), "8.14");
        assert_eq!(Scaling::Integer.format(279.4), "279");
    }

    fn write_log(dir: &Path, header: &str, rows: &[String]) -> std::path::PathBuf {
        let path = dir.join("metrics.csv");
        let mut text = format!("{header}\n");
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn stats_report_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let header = "iteration,lr,pseudo_loss,valid_triplets,e_theta_pos,std_theta_pos,e_theta_neg,std_theta_neg,e_theta_rel,std_theta_rel,e_power_pos,e_power_neg";
        let rows: Vec<String> = (0..4)
            .map(|i| {
                let x = i as f64;
                format!("{i},1,0.1,10,{},0.2,1.15,0.0797,{},0.23,{},297", 0.85 - 0.01 * x, -0.3 - 0.01 * x, 281.0 - x)
            })
            .collect();
        let path = write_log(dir.path(), header, &rows);
        let table = stats_report(&path, &[1, 2], 2).unwrap();
        let expected = "\
Epoch                      1         2
E[theta_r](1e-1)       -3.10     -3.30
Std[theta_r](1e-1)      2.30      2.30
E[theta_p](1e-1)        8.40      8.20
Std[theta_p](1e-1)      2.00      2.00
E[theta_n]              1.15      1.15
Std[theta_n](1e-2)      7.97      7.97
E[P_p]                   280       278
E[P_n]                   297       297
";
        assert_eq!(table, expected);
    }

    #[test]
    fn stats_report_missing_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_log(dir.path(), "iteration,lr,e_theta_pos", &["0,1,0.5".into()]);
        assert!(matches!(stats_report(&path, &[1], 1), Err(Error::Format { .. })));
    }
}
