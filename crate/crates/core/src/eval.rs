//! Accuracy and F1 protocols, feature-space diagnostics and metric files.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::RelationExample;
use crate::error::{Error, Result};
use crate::models::argmax;
use crate::training::{train, PreparedData, System};
use crate::text::EncodedExample;

/// Per-epoch scalars. Absent values are written as empty CSV cells.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss_ic: Option<f64>,
    pub loss_i: Option<f64>,
    pub loss_d: Option<f64>,
    pub loss_a: Option<f64>,
    pub acc_icnn_dev: Option<f64>,
    pub acc_icnn_test: Option<f64>,
    pub acc_acnn_dev: Option<f64>,
    pub acc_acnn_test: Option<f64>,
    pub acc_disc: Option<f64>,
}

impl MetricsRecord {
    pub fn new(epoch: usize) -> Self {
        MetricsRecord {
            epoch,
            ..Default::default()
        }
    }
}

pub const METRICS_HEADER: [&str; 10] = [
    "epoch",
    "loss_ic",
    "loss_i",
    "loss_d",
    "loss_a",
    "acc_icnn_dev",
    "acc_icnn_test",
    "acc_acnn_dev",
    "acc_acnn_test",
    "acc_disc",
];

/// Fraction of predictions that hit any of their gold labels.
pub fn multiclass_accuracy(predictions: &[usize], golds: &[Vec<usize>]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} gold sets",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| g.contains(p))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when some denominator was zero and the score defaulted to 0.
    pub degenerate: bool,
}

fn ratio(num: usize, den: usize, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 of the positive class.
pub fn binary_f1(predictions: &[bool], golds: &[bool]) -> Result<BinaryScores> {
    if predictions.len() != golds.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} golds",
            predictions.len(),
            golds.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in predictions.iter().zip(golds) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(scores_from_counts(tp, fp, fn_))
}

fn scores_from_counts(tp: usize, fp: usize, fn_: usize) -> BinaryScores {
    let mut degenerate = false;
    let precision = ratio(tp, tp + fp, &mut degenerate);
    let recall = ratio(tp, tp + fn_, &mut degenerate);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    BinaryScores {
        precision,
        recall,
        f1,
        degenerate,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub per_class: Vec<BinaryScores>,
    /// `confusion[gold][predicted]`, with the credited gold chosen as the
    /// matched label when correct and the first listed label otherwise.
    pub confusion: Vec<Vec<usize>>,
    pub n_examples: usize,
}

impl EvalResult {
    pub fn from_predictions(
        predictions: &[usize],
        golds: &[Vec<usize>],
        n_classes: usize,
    ) -> Result<Self> {
        let accuracy = multiclass_accuracy(predictions, golds)?;
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        for (&p, g) in predictions.iter().zip(golds) {
            let first = *g
                .first()
                .ok_or_else(|| Error::invalid("empty gold label set"))?;
            let credited = if g.contains(&p) { p } else { first };
            if p >= n_classes || credited >= n_classes {
                return Err(Error::invalid(format!(
                    "class index out of range for {n_classes} classes"
                )));
            }
            confusion[credited][p] += 1;
        }
        let per_class = (0..n_classes)
            .map(|c| {
                let tp = confusion[c][c];
                let fp: usize = (0..n_classes).map(|g| confusion[g][c]).sum::<usize>() - tp;
                let fn_: usize = confusion[c].iter().sum::<usize>() - tp;
                scores_from_counts(tp, fp, fn_)
            })
            .collect();
        Ok(EvalResult {
            accuracy,
            per_class,
            confusion,
            n_examples: predictions.len(),
        })
    }
}

/// Implicit-network evaluation of `system` on `data`. Connectives are
/// dropped before prediction.
pub fn evaluate_implicit(system: &System, data: &[EncodedExample]) -> Result<EvalResult> {
    let mut preds = Vec::with_capacity(data.len());
    for ex in data {
        preds.push(argmax(&system.predict_implicit(&ex.without_connective())?));
    }
    let golds: Vec<Vec<usize>> = data.iter().map(|e| e.gold_labels.clone()).collect();
    EvalResult::from_predictions(&preds, &golds, system.n_classes)
}

/// Augmented-network evaluation (connectives used), if the system has one.
pub fn evaluate_augmented(system: &System, data: &[EncodedExample]) -> Result<Option<EvalResult>> {
    if system.augmented.is_none() {
        return Ok(None);
    }
    let mut preds = Vec::with_capacity(data.len());
    for ex in data {
        preds.push(argmax(&system.predict_augmented(ex)?.expect("augmented encoder")));
    }
    let golds: Vec<Vec<usize>> = data.iter().map(|e| e.gold_labels.clone()).collect();
    EvalResult::from_predictions(&preds, &golds, system.n_classes).map(Some)
}

// ---- one-vs-all ------------------------------------------------------------

/// Label given to every example outside the target class.
pub fn rest_label(class: &str) -> String {
    format!("not_{class}")
}

fn relabel(examples: &[RelationExample], class: &str) -> Vec<RelationExample> {
    examples
        .iter()
        .map(|e| {
            let positive = e.labels.iter().any(|l| l == class);
            RelationExample {
                labels: vec![if positive { class.to_string() } else { rest_label(class) }],
                ..e.clone()
            }
        })
        .collect()
}

/// Relabels `train` as `class` vs. rest and down-samples the majority side
/// uniformly so both sides have equal size. Original order is kept.
pub fn balanced_binary_split(
    train: &[RelationExample],
    class: &str,
    seed: u64,
) -> Result<Vec<RelationExample>> {
    let relabelled = relabel(train, class);
    let (pos, neg): (Vec<usize>, Vec<usize>) =
        (0..relabelled.len()).partition(|&i| relabelled[i].labels[0] == class);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid(format!(
            "class `{class}` needs both positive and negative training examples"
        )));
    }
    let (minority, majority) = if pos.len() <= neg.len() { (pos, neg) } else { (neg, pos) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = index::sample(&mut rng, majority.len(), minority.len())
        .into_iter()
        .map(|i| majority[i])
        .chain(minority)
        .collect();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| relabelled[i].clone()).collect())
}

#[derive(Clone, Debug)]
pub struct OneVsAllResult {
    pub class: String,
    pub train_positive: usize,
    pub train_negative: usize,
    pub implicit: BinaryScores,
    pub augmented: Option<BinaryScores>,
    pub eval: EvalResult,
}

/// Trains `config.mode` on the balanced `class`-vs-rest split and scores F1
/// on the relabelled, otherwise untouched test split.
pub fn one_vs_all_protocol(
    train_set: &[RelationExample],
    dev: &[RelationExample],
    test: &[RelationExample],
    class: &str,
    config: &TrainConfig,
) -> Result<OneVsAllResult> {
    let present = train_set
        .iter()
        .chain(test)
        .any(|e| e.labels.iter().any(|l| l == class));
    if !present {
        return Err(Error::invalid(format!("class `{class}` does not occur in the corpus")));
    }
    let balanced = balanced_binary_split(train_set, class, config.seed)?;
    let train_positive = balanced.iter().filter(|e| e.labels[0] == class).count();
    let train_negative = balanced.len() - train_positive;
    let data = PreparedData::new(&balanced, &relabel(dev, class), &relabel(test, class), config)?;
    let positive = data
        .labels
        .index(class)
        .ok_or_else(|| Error::invalid(format!("class `{class}` missing after relabelling")))?;
    let outcome = train(config, &data)?;
    let system = &outcome.system;
    let golds: Vec<bool> = data.test.iter().map(|e| e.gold_labels.contains(&positive)).collect();
    let eval = evaluate_implicit(system, &data.test)?;
    let mut preds = Vec::with_capacity(data.test.len());
    for ex in &data.test {
        preds.push(argmax(&system.predict_implicit(&ex.without_connective())?) == positive);
    }
    let implicit = binary_f1(&preds, &golds)?;
    let augmented = if system.augmented.is_some() {
        let mut preds = Vec::with_capacity(data.test.len());
        for ex in &data.test {
            let p = system.predict_augmented(ex)?.expect("augmented encoder");
            preds.push(argmax(&p) == positive);
        }
        Some(binary_f1(&preds, &golds)?)
    } else {
        None
    };
    Ok(OneVsAllResult {
        class: class.to_string(),
        train_positive,
        train_negative,
        implicit,
        augmented,
        eval,
    })
}

// ---- feature diagnostics ----------------------------------------------------

pub const PROBE_STEPS: usize = 300;
pub const PROBE_LEARNING_RATE: f64 = 0.5;

/// Held-out accuracy of a logistic probe telling `features_a` (label 1)
/// from `features_i` (label 0). 0.5 means the sources are fully mixed.
/// The `i`-th vectors of both sets are treated as two views of one example.
pub fn probe_separability(features_a: &[Vec<f64>], features_i: &[Vec<f64>], seed: u64) -> Result<f64> {
    if features_a.is_empty() || features_i.is_empty() {
        return Err(Error::invalid("probe needs non-empty feature sets"));
    }
    let dim = features_a[0].len();
    if features_a.iter().chain(features_i).any(|f| f.len() != dim) {
        return Err(Error::invalid("probe features have inconsistent dimensions"));
    }
    // both views of one example share a fold
    let n_groups = features_a.len().max(features_i.len());
    let mut groups: Vec<usize> = (0..n_groups).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    let n_train_groups = ((n_groups * 4) / 5).clamp(1, n_groups.saturating_sub(1).max(1));
    let mut in_train = vec![false; n_groups];
    for &g in &groups[..n_train_groups] {
        in_train[g] = true;
    }
    let labelled = features_a
        .iter()
        .enumerate()
        .map(|(i, f)| (i, f.as_slice(), 1.0))
        .chain(features_i.iter().enumerate().map(|(i, f)| (i, f.as_slice(), 0.0)));
    let (mut train, mut held): (Vec<(&[f64], f64)>, Vec<(&[f64], f64)>) = (Vec::new(), Vec::new());
    for (g, x, y) in labelled {
        if in_train[g] {
            train.push((x, y));
        } else {
            held.push((x, y));
        }
    }
    if held.is_empty() {
        held = train.clone();
    }
    if train.is_empty() {
        train = held.clone();
    }
    let (train, held) = (train.as_slice(), held.as_slice());

    // standardize with training statistics
    let mut mu = vec![0.0; dim];
    for (x, _) in train {
        for (m, v) in mu.iter_mut().zip(*x) {
            *m += v / train.len() as f64;
        }
    }
    let mut sd = vec![0.0; dim];
    for (x, _) in train {
        for ((s, v), m) in sd.iter_mut().zip(*x).zip(&mu) {
            *s += (v - m).powi(2) / train.len() as f64;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|s| if s > 1e-12 { s.sqrt() } else { 1.0 }).collect();
    let z = |x: &[f64]| -> Vec<f64> {
        x.iter().zip(&mu).zip(&sd).map(|((v, m), s)| (v - m) / s).collect()
    };
    let train_z: Vec<(Vec<f64>, f64)> = train.iter().map(|(x, y)| (z(x), *y)).collect();

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let n = train_z.len() as f64;
    for _ in 0..PROBE_STEPS {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, y) in &train_z {
            let p = crate::tape::sigmoid(dot(&w, x) + b);
            let r = (p - y) / n;
            gb += r;
            for (g, v) in gw.iter_mut().zip(x) {
                *g += r * v;
            }
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= PROBE_LEARNING_RATE * g;
        }
        b -= PROBE_LEARNING_RATE * gb;
    }
    let correct = held
        .iter()
        .filter(|(x, y)| (dot(&w, &z(x)) + b > 0.0) == (*y == 1.0))
        .count();
    Ok(correct as f64 / held.len() as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean-centred projection onto the two leading principal directions.
/// Each axis is signed so its first non-negligible loading is positive.
pub fn project_features_2d(features: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    if features.len() < 3 {
        return Err(Error::invalid(format!(
            "projection needs at least 3 vectors, got {}",
            features.len()
        )));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::invalid("projection features have inconsistent dimensions"));
    }
    let n = features.len();
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |r, c| features[r][c] - mean[c]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Vec::with_capacity(2);
    for &k in order.iter().take(2) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        axes.push(v);
    }
    Ok((0..n)
        .map(|r| {
            let row: Vec<f64> = centered.row(r).iter().copied().collect();
            let x = dot(&row, &axes[0]);
            let y = axes.get(1).map_or(0.0, |a| dot(&row, a));
            [x, y]
        })
        .collect())
}

// ---- files -----------------------------------------------------------------

/// Writes the metrics CSV (header always present).
pub fn emit_metrics(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(io)?;
    w.write_record(METRICS_HEADER).map_err(io)?;
    for r in records {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let header = r
        .headers()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?
        .clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected metrics header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| {
            rec.map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub source: String,
}

pub fn emit_points(points: &[ProjectedPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(io)?;
    w.write_record(["x", "y", "source"]).map_err(io)?;
    for p in points {
        w.serialize(p).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Projects `H_I` and `H_A` jointly and tags each point with its source.
pub fn project_sources(features_i: &[Vec<f64>], features_a: &[Vec<f64>]) -> Result<Vec<ProjectedPoint>> {
    let all: Vec<Vec<f64>> = features_i.iter().chain(features_a).cloned().collect();
    let xy = project_features_2d(&all)?;
    Ok(xy
        .into_iter()
        .enumerate()
        .map(|(i, [x, y])| ProjectedPoint {
            x,
            y,
            source: if i < features_i.len() { "implicit" } else { "augmented" }.to_string(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn accuracy_examples() {
        assert_eq!(multiclass_accuracy(&[0], &[vec![0, 1]]).unwrap(), 1.0);
        assert_eq!(multiclass_accuracy(&[2], &[vec![0, 1]]).unwrap(), 0.0);
        let golds: Vec<Vec<usize>> = (0..600).map(|i| vec![i % 6]).collect();
        let acc = multiclass_accuracy(&vec![0; 600], &golds).unwrap();
        assert!((acc - 1.0 / 6.0).abs() < 1e-12);
        assert!(multiclass_accuracy(&[0, 1], &[vec![0]]).is_err());
    }

    #[test]
    fn f1_examples() {
        let s = binary_f1(&[true, true, true, false], &[true, true, false, true]).unwrap();
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!(!s.degenerate);

        let s = binary_f1(&[false, false], &[true, false]).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert!(s.degenerate);

        let s = binary_f1(&[true, false], &[true, false]).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        assert!(binary_f1(&[true], &[]).is_err());
    }

    #[test]
    fn confusion_credits_matched_gold() {
        let r = EvalResult::from_predictions(&[1, 2, 0], &[vec![0, 1], vec![0, 1], vec![0]], 3).unwrap();
        assert_eq!(r.confusion[1][1], 1);
        assert_eq!(r.confusion[0][2], 1);
        assert_eq!(r.confusion[0][0], 1);
        let total: usize = r.confusion.iter().flatten().sum();
        assert_eq!(total, r.n_examples);
    }

    fn ex(label: &str, i: usize) -> RelationExample {
        RelationExample {
            arg1: format!("a{i}"),
            arg2: format!("b{i}"),
            connective: String::new(),
            labels: vec![label.to_string()],
        }
    }

    #[test]
    fn balanced_split_counts() {
        let train: Vec<RelationExample> = (0..101)
            .map(|i| ex(if i % 4 == 0 { "Cause" } else { "Contrast" }, i))
            .collect();
        let b = balanced_binary_split(&train, "Cause", 3).unwrap();
        let pos = b.iter().filter(|e| e.labels[0] == "Cause").count();
        let neg = b.len() - pos;
        assert!(pos.abs_diff(neg) <= 1);
        assert_eq!(pos, 26);
        assert!(b.iter().all(|e| e.labels[0] == "Cause" || e.labels[0] == "not_Cause"));
        assert!(balanced_binary_split(&train, "Missing", 3).is_err());
    }

    fn cloud(n: usize, dim: usize, offset: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0) + offset).collect())
            .collect()
    }

    #[test]
    fn probe_on_identical_and_offset_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = cloud(200, 6, 0.0, &mut rng);
        let acc = probe_separability(&a, &a, 1).unwrap();
        assert!((acc - 0.5).abs() <= 0.05, "{acc}");
        let far = cloud(200, 6, 10.0, &mut rng);
        assert!(probe_separability(&far, &a, 1).unwrap() >= 0.99);
        assert!(probe_separability(&[], &a, 1).is_err());
    }

    #[test]
    fn projection_cases() {
        let pts = vec![vec![1.0, 0.0], vec![-1.0, 0.5], vec![0.0, -0.5], vec![0.3, 0.2]];
        let mean = [0.075, 0.05];
        let centered: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| vec![p[0] - mean[0], p[1] - mean[1]])
            .collect();
        let proj = project_features_2d(&centered).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d0 = ((centered[i][0] - centered[j][0]).powi(2)
                    + (centered[i][1] - centered[j][1]).powi(2))
                .sqrt();
                let d1 = ((proj[i][0] - proj[j][0]).powi(2) + (proj[i][1] - proj[j][1]).powi(2)).sqrt();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
        let same = vec![vec![3.0, 1.0, 2.0]; 5];
        for p in project_features_2d(&same).unwrap() {
            assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
        }
        let line: Vec<Vec<f64>> = (0..6).map(|t| vec![t as f64, 2.0 * t as f64, -(t as f64)]).collect();
        for p in project_features_2d(&line).unwrap() {
            assert!(p[1].abs() < 1e-9);
        }
        assert!(project_features_2d(&line[..2]).is_err());
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        emit_metrics(&[], &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            format!("{}\n", METRICS_HEADER.join(","))
        );
        assert!(read_metrics(&path).unwrap().is_empty());
        let recs = vec![
            MetricsRecord {
                epoch: 1,
                loss_ic: Some(1.234_567_890_123),
                loss_a: Some(0.1),
                acc_icnn_dev: Some(0.5),
                ..MetricsRecord::new(1)
            },
            MetricsRecord {
                loss_d: Some(-1.3),
                acc_disc: Some(0.9),
                ..MetricsRecord::new(2)
            },
        ];
        emit_metrics(&recs, &path).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), recs);
    }
}
