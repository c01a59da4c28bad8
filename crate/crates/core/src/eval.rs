//! Test-set evaluation: argmax predictions with malignant tie-breaking,
//! confusion-derived metrics with malignant as the positive class, and
//! the multi-run comparison table.

use std::path::Path;

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::nn::{Mode, Network};
use crate::train::TrainItem;

/// One per-record prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub record_id: String,
    pub predicted: Label,
    pub malignant_probability: f64,
}

/// Eval-mode batched inference. Ties between the two probabilities
/// predict malignant. No augmentation or mirroring is applied.
pub fn predict(net: &mut Network, items: &[TrainItem], batch_size: usize) -> Vec<Prediction> {
    let side = net.input_side;
    let mut out = Vec::with_capacity(items.len());
    let refs: Vec<&TrainItem> = items.iter().collect();
    for batch in refs.chunks(batch_size.max(1)) {
        let mut x = ndarray::Array4::zeros((batch.len(), 3, side, side));
        for (i, item) in batch.iter().enumerate() {
            assert_eq!(item.pixels.width(), side, "patch side mismatch for {}", item.id);
            for y in 0..side {
                for xx in 0..side {
                    let v = item.pixels.get(xx, y);
                    x[(i, 0, y, xx)] = v;
                    x[(i, 1, y, xx)] = v;
                    x[(i, 2, y, xx)] = v;
                }
            }
        }
        let (_, probs) = net.forward(&x, Mode::Eval, None, false);
        for (row, item) in probs.axis_iter(ndarray::Axis(0)).zip(batch) {
            let p_malignant = row[1];
            let predicted = if p_malignant >= row[0] {
                Label::Malignant
            } else {
                Label::Benign
            };
            out.push(Prediction {
                record_id: item.id.clone(),
                predicted,
                malignant_probability: p_malignant,
            });
        }
    }
    out
}

/// Confusion counts and the derived ratios, malignant positive.
/// Ratios with a zero denominator are absent rather than zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub n_items: usize,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl MetricsReport {
    /// Derives the ratios from raw confusion counts.
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Result<MetricsReport> {
        let n_items = tp + fp + tn + fn_;
        if n_items == 0 {
            return Err(Error::Eval("empty confusion matrix".into()));
        }
        Ok(MetricsReport {
            tp,
            fp,
            tn,
            fn_,
            n_items,
            accuracy: (tp + tn) as f64 / n_items as f64,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
        })
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Folds (truth, prediction) pairs into a [`MetricsReport`].
pub fn compute_metrics(truth: &[Label], pred: &[Label]) -> Result<MetricsReport> {
    if truth.len() != pred.len() {
        return Err(Error::Eval(format!(
            "length mismatch: {} truth vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Eval("cannot compute metrics over zero items".into()));
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut tn = 0;
    let mut fn_ = 0;
    for (&t, &p) in truth.iter().zip(pred) {
        match (t, p) {
            (Label::Malignant, Label::Malignant) => tp += 1,
            (Label::Benign, Label::Malignant) => fp += 1,
            (Label::Benign, Label::Benign) => tn += 1,
            (Label::Malignant, Label::Benign) => fn_ += 1,
        }
    }
    MetricsReport::from_counts(tp, fp, tn, fn_)
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// Writes the flat key-value metrics file. Undefined ratios are omitted.
pub fn write_metrics(report: &MetricsReport, name: Option<&str>, path: &Path) -> Result<()> {
    let mut out = String::new();
    if let Some(n) = name {
        out.push_str(&format!("name = {n}\n"));
    }
    out.push_str("positive_class = MALIGNANT\n");
    out.push_str(&format!("n_items = {}\n", report.n_items));
    out.push_str(&format!("tp = {}\n", report.tp));
    out.push_str(&format!("fp = {}\n", report.fp));
    out.push_str(&format!("tn = {}\n", report.tn));
    out.push_str(&format!("fn = {}\n", report.fn_));
    out.push_str(&format!("accuracy = {:.6}\n", report.accuracy));
    if let Some(p) = report.precision {
        out.push_str(&format!("precision = {p:.6}\n"));
    }
    if let Some(r) = report.recall {
        out.push_str(&format!("recall = {r:.6}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a metrics file: confusion counts are authoritative, ratios are
/// recomputed. Returns the optional display name and epoch count.
pub fn read_metrics(path: &Path) -> Result<(MetricsReport, Option<String>, Option<usize>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut name = None;
    let mut epochs = None;
    let mut counts: [Option<usize>; 4] = [None; 4];
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse("metrics", format!("bad line {raw:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let parse_count = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|e| Error::parse("metrics", format!("{key}: {e}")))
        };
        match key {
            "name" => name = Some(value.to_string()),
            "epochs" => epochs = Some(parse_count(value)?),
            "tp" => counts[0] = Some(parse_count(value)?),
            "fp" => counts[1] = Some(parse_count(value)?),
            "tn" => counts[2] = Some(parse_count(value)?),
            "fn" => counts[3] = Some(parse_count(value)?),
            _ => {} // derived/informational keys
        }
    }
    let [tp, fp, tn, fn_] = counts;
    let report = MetricsReport::from_counts(
        tp.ok_or_else(|| Error::parse("metrics", "missing tp"))?,
        fp.ok_or_else(|| Error::parse("metrics", "missing fp"))?,
        tn.ok_or_else(|| Error::parse("metrics", "missing tn"))?,
        fn_.ok_or_else(|| Error::parse("metrics", "missing fn"))?,
    )?;
    Ok((report, name, epochs))
}

/// Writes `record_id,truth,pred,p_malignant` rows.
pub fn write_predictions(
    truth: &[(String, Label)],
    predictions: &[Prediction],
    path: &Path,
) -> Result<()> {
    let mut out = String::from("record_id,truth,pred,p_malignant\n");
    for ((id, t), p) in truth.iter().zip(predictions) {
        out.push_str(&format!(
            "{id},{t},{},{:.6}\n",
            p.predicted, p.malignant_probability
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One row of the comparison table.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub name: String,
    pub report: MetricsReport,
    pub epochs: Option<usize>,
}

/// Renders the comparison table across runs.
pub fn report_table(rows: &[ReportRow]) -> String {
    let name_width = rows
        .iter()
        .map(|r| r.name.len())
        .max()
        .unwrap_or(5)
        .max("Model".len());
    let fmt_opt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.3}"),
        None => "undef".to_string(),
    };
    let mut out = format!(
        "{:<name_width$}  {:>8}  {:>9}  {:>6}  {:>8}\n",
        "Model", "Accuracy", "Precision", "Recall", "# Epochs"
    );
    for row in rows {
        let epochs = row
            .epochs
            .map(|e| e.to_string())
            .unwrap_or_else(|| "-".to_string());
        out.push_str(&format!(
            "{:<name_width$}  {:>8.3}  {:>9}  {:>6}  {:>8}\n",
            row.name,
            row.report.accuracy,
            fmt_opt(row.report.precision),
            fmt_opt(row.report.recall),
            epochs
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn labels(spec: &str) -> Vec<Label> {
        spec.chars()
            .map(|c| if c == 'M' { Label::Malignant } else { Label::Benign })
            .collect()
    }

    #[test]
    fn perfect_classifier() {
        let t = labels("MMBB");
        let report = compute_metrics(&t, &t).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.precision, Some(1.0));
        assert_eq!(report.recall, Some(1.0));
    }

    #[test]
    fn four_item_hand_count() {
        // truth [M,M,B,B], pred [M,B,M,B]: TP=1 FN=1 FP=1 TN=1
        let report = compute_metrics(&labels("MMBB"), &labels("MBMB")).unwrap();
        assert_eq!((report.tp, report.fn_, report.fp, report.tn), (1, 1, 1, 1));
        assert_eq!(report.accuracy, 0.5);
        assert_eq!(report.precision, Some(0.5));
        assert_eq!(report.recall, Some(0.5));
    }

    #[test]
    fn undefined_ratios_are_absent() {
        // all-benign truth with all-benign predictions: no positives at all
        let report = compute_metrics(&labels("BBB"), &labels("BBB")).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.precision, None);
        assert_eq!(report.recall, None);
    }

    #[test]
    fn constant_malignant_on_balanced_truth() {
        let report = compute_metrics(&labels("MBMB"), &labels("MMMM")).unwrap();
        assert_eq!(report.recall, Some(1.0));
        assert_eq!(report.accuracy, 0.5);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(compute_metrics(&labels("MB"), &labels("M")).is_err());
        assert!(compute_metrics(&[], &[]).is_err());
    }

    #[test]
    fn permutation_invariance() {
        let truth = labels("MMBBMBMB");
        let pred = labels("MBBBMBMM");
        let report = compute_metrics(&truth, &pred).unwrap();
        // rotate both jointly
        let mut t2 = truth.clone();
        let mut p2 = pred.clone();
        t2.rotate_left(3);
        p2.rotate_left(3);
        assert_eq!(compute_metrics(&t2, &p2).unwrap(), report);
    }

    #[test]
    fn label_swap_transposes_the_confusion_matrix() {
        let truth = labels("MMBBMB");
        let pred = labels("MBMBBB");
        let report = compute_metrics(&truth, &pred).unwrap();
        let flip = |ls: &[Label]| -> Vec<Label> {
            ls.iter()
                .map(|l| match l {
                    Label::Benign => Label::Malignant,
                    Label::Malignant => Label::Benign,
                })
                .collect()
        };
        let swapped = compute_metrics(&flip(&truth), &flip(&pred)).unwrap();
        assert_eq!(swapped.tp, report.tn);
        assert_eq!(swapped.tn, report.tp);
        assert_eq!(swapped.fp, report.fn_);
        assert_eq!(swapped.fn_, report.fp);
    }

    #[test]
    fn matches_brute_force_oracle_on_random_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let n = rng.random_range(1..=200);
            let truth: Vec<Label> = (0..n)
                .map(|_| if rng.random::<f64>() < 0.5 { Label::Malignant } else { Label::Benign })
                .collect();
            let pred: Vec<Label> = (0..n)
                .map(|_| if rng.random::<f64>() < 0.5 { Label::Malignant } else { Label::Benign })
                .collect();
            let report = compute_metrics(&truth, &pred).unwrap();
            // independent oracle: direct enumeration
            let tp = truth
                .iter()
                .zip(&pred)
                .filter(|(t, p)| **t == Label::Malignant && **p == Label::Malignant)
                .count();
            let fp = truth
                .iter()
                .zip(&pred)
                .filter(|(t, p)| **t == Label::Benign && **p == Label::Malignant)
                .count();
            let tn = truth
                .iter()
                .zip(&pred)
                .filter(|(t, p)| **t == Label::Benign && **p == Label::Benign)
                .count();
            let fn_ = truth
                .iter()
                .zip(&pred)
                .filter(|(t, p)| **t == Label::Malignant && **p == Label::Benign)
                .count();
            assert_eq!((report.tp, report.fp, report.tn, report.fn_), (tp, fp, tn, fn_));
            assert_eq!(report.accuracy, (tp + tn) as f64 / n as f64);
            if tp + fp > 0 {
                assert_eq!(report.precision, Some(tp as f64 / (tp + fp) as f64));
            }
            if tp + fn_ > 0 {
                assert_eq!(report.recall, Some(tp as f64 / (tp + fn_) as f64));
            }
        }
    }

    #[test]
    fn metrics_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.metrics");
        let report = MetricsReport::from_counts(85, 7, 84, 6).unwrap();
        write_metrics(&report, Some("run-a"), &path).unwrap();
        let (back, name, _) = read_metrics(&path).unwrap();
        assert_eq!(back, report);
        assert_eq!(name.as_deref(), Some("run-a"));
    }

    #[test]
    fn prediction_ties_go_malignant() {
        // a freshly zeroed final layer makes both logits equal
        let mut net = crate::models::build_baseline(16, 0);
        net.visit_params_mut(&mut |p| {
            if p.group == "fc3" {
                p.values.fill(0.0);
            }
        });
        let items = vec![TrainItem {
            id: "t".into(),
            pixels: crate::raster::Raster::from_data(16, 16, vec![0.5; 256]),
            label: Label::Benign,
        }];
        let preds = predict(&mut net, &items, 8);
        assert_eq!(preds[0].predicted, Label::Malignant);
        assert!((preds[0].malignant_probability - 0.5).abs() < 1e-12);
    }

    #[test]
    fn predictions_are_deterministic() {
        let mut net = crate::models::build_baseline(16, 5);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let items: Vec<TrainItem> = (0..5)
            .map(|i| TrainItem {
                id: format!("r{i}"),
                pixels: crate::raster::Raster::from_data(
                    16,
                    16,
                    (0..256).map(|_| rng.random_range(0.0..1.0)).collect(),
                ),
                label: Label::Benign,
            })
            .collect();
        let a = predict(&mut net, &items, 2);
        let b = predict(&mut net, &items, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn table_lines_up() {
        let rows = vec![
            ReportRow {
                name: "GoogLeNet (Aug - Large Context)".into(),
                report: MetricsReport::from_counts(85, 7, 84, 6).unwrap(),
                epochs: Some(30),
            },
            ReportRow {
                name: "Baseline (Aug - Large Context)".into(),
                report: MetricsReport::from_counts(64, 45, 46, 27).unwrap(),
                epochs: Some(35),
            },
        ];
        let table = report_table(&rows);
        assert!(table.contains("0.929"));
        assert!(table.contains("0.924"));
        assert!(table.contains("0.934"));
        assert!(table.contains("30"));
    }
}
