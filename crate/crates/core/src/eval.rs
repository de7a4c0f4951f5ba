//! Confusion matrices, one-vs-rest counts, sensitivity / specificity /
//! accuracy, multi-run averages and report rendering.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Validation("confusion matrix rows must form a square".into()));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn from_labels(truth: &[usize], predicted: &[usize], k: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Validation(format!(
                "{} true labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new(k);
        for (i, (&t, &p)) in truth.iter().zip(predicted).enumerate() {
            if t >= k || p >= k {
                return Err(Error::Validation(format!("pair {i} ({t}, {p}) is outside [0, {k})")));
            }
            cm.counts[t * k + p] += 1;
        }
        Ok(cm)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.k..(truth + 1) * self.k]
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.row(truth).iter().sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, predicted)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }

    /// Grid with a header of predicted classes and one row per true class.
    pub fn to_csv(&self, classes: &[&str]) -> String {
        let mut out = format!("true\\predicted,{}\n", classes.join(","));
        for (t, name) in classes.iter().enumerate().take(self.k) {
            let cells: Vec<String> = self.row(t).iter().map(u64::to_string).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl BinaryCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Collapses `cm` around one positive class.
pub fn one_vs_rest(cm: &ConfusionMatrix, positive: usize) -> Result<BinaryCounts> {
    if positive >= cm.k() {
        return Err(Error::Validation(format!(
            "positive class {positive} is outside [0, {})",
            cm.k()
        )));
    }
    let tp = cm.get(positive, positive);
    let fn_ = cm.row_sum(positive) - tp;
    let fp = cm.col_sum(positive) - tp;
    let tn = cm.total() - tp - fn_ - fp;
    Ok(BinaryCounts { tp, tn, fp, fn_ })
}

/// Percentages at full precision; `None` marks a zero denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSet {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
}

fn percent(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// Sensitivity `TP/(TP+FN)` and specificity `TN/(TN+FP)` from the binary
/// counts; accuracy is `correct/total` (the matrix trace for multi-class).
pub fn metrics(counts: &BinaryCounts, correct: u64, total: u64) -> MetricSet {
    MetricSet {
        sensitivity: percent(counts.tp, counts.tp + counts.fn_),
        specificity: percent(counts.tn, counts.tn + counts.fp),
        accuracy: percent(correct, total),
    }
}

/// [`metrics`] with one-vs-rest counts for `positive` and trace accuracy.
pub fn metrics_from_confusion(cm: &ConfusionMatrix, positive: usize) -> Result<MetricSet> {
    Ok(metrics(&one_vs_rest(cm, positive)?, cm.trace(), cm.total()))
}

/// Diagonal rate per true class.
pub fn per_class_accuracy(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.k()).map(|i| percent(cm.get(i, i), cm.row_sum(i))).collect()
}

/// Half-up rounding to two decimals. The small bias absorbs binary
/// representation error so that e.g. 98.665 rounds to 98.67.
pub fn round2(x: f64) -> f64 {
    (x * 100.0 + 0.5 + 1e-9).floor() / 100.0
}

pub const UNDEFINED: &str = "undefined";

/// Two-decimal text, or the undefined marker.
pub fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| format!("{:.2}", round2(x)))
}

/// Inverse of [`fmt_metric`].
pub fn parse_metric(s: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s == UNDEFINED {
        return Ok(None);
    }
    f64::from_str(s)
        .map(Some)
        .map_err(|_| Error::Validation(format!("not a metric value: {s:?}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSet {
    pub runs: Vec<MetricSet>,
    pub average: MetricSet,
}

/// Unweighted mean per metric; a metric undefined in any run is
/// undefined in the average.
pub fn average_runs(runs: &[MetricSet]) -> Result<RunSet> {
    if runs.is_empty() {
        return Err(Error::Validation("cannot average zero runs".into()));
    }
    let mean = |f: fn(&MetricSet) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = runs.iter().map(f).collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(RunSet {
        runs: runs.to_vec(),
        average: MetricSet {
            sensitivity: mean(|m| m.sensitivity),
            specificity: mean(|m| m.specificity),
            accuracy: mean(|m| m.accuracy),
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    JsonLines,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "jsonl" | "json-lines" => Ok(ReportFormat::JsonLines),
            _ => Err(Error::Validation(format!(
                "unknown report format {s:?} (text, csv, jsonl)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub name: String,
    pub confusion: ConfusionMatrix,
}

/// One or more evaluated runs over the same class list.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<String>,
    /// Class index treated as positive for sensitivity and specificity.
    pub positive: usize,
    pub runs: Vec<RunResult>,
}

#[derive(Serialize)]
struct JsonRow<'a> {
    run: &'a str,
    sensitivity: Option<f64>,
    specificity: Option<f64>,
    accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    counts: Option<BinaryCounts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    classes: Option<&'a [String]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    confusion: Option<Vec<Vec<u64>>>,
}

impl EvalReport {
    pub fn new(classes: Vec<String>, positive: usize) -> Self {
        Self {
            classes,
            positive,
            runs: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, confusion: ConfusionMatrix) -> Result<()> {
        if confusion.k() != self.classes.len() {
            return Err(Error::Validation(format!(
                "{}x{} confusion matrix for {} classes",
                confusion.k(),
                confusion.k(),
                self.classes.len()
            )));
        }
        self.runs.push(RunResult {
            name: name.into(),
            confusion,
        });
        Ok(())
    }

    pub fn run_set(&self) -> Result<RunSet> {
        let runs = self
            .runs
            .iter()
            .map(|r| metrics_from_confusion(&r.confusion, self.positive))
            .collect::<Result<Vec<_>>>()?;
        average_runs(&runs)
    }

    fn class_refs(&self) -> Vec<&str> {
        self.classes.iter().map(String::as_str).collect()
    }

    /// Metric grid with an average row, plus the confusion matrices
    /// (text and JSON lines; the CSV form carries the one-vs-rest counts and
    /// leaves full matrices to [`ConfusionMatrix::to_csv`]).
    pub fn render(&self, format: ReportFormat) -> Result<String> {
        let set = self.run_set()?;
        let counts: Vec<BinaryCounts> = self
            .runs
            .iter()
            .map(|r| one_vs_rest(&r.confusion, self.positive))
            .collect::<Result<_>>()?;
        let mut out = String::new();
        match format {
            ReportFormat::Text => {
                let width = self.runs.iter().map(|r| r.name.len()).max().unwrap_or(0).max(7);
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>11}  {:>11}  {:>11}",
                    "run", "sensitivity", "specificity", "accuracy"
                );
                let rows = self.runs.iter().map(|r| r.name.as_str()).zip(&set.runs);
                for (name, m) in rows.chain(std::iter::once(("average", &set.average))) {
                    let _ = writeln!(
                        out,
                        "{name:<width$}  {:>11}  {:>11}  {:>11}",
                        fmt_metric(m.sensitivity),
                        fmt_metric(m.specificity),
                        fmt_metric(m.accuracy)
                    );
                }
                let _ = writeln!(out, "\npositive class: {}", self.classes[self.positive]);
                let cw = self.classes.iter().map(String::len).max().unwrap_or(0).max(6);
                for r in &self.runs {
                    let _ = writeln!(out, "\nconfusion {} (rows true, columns predicted)", r.name);
                    let _ = write!(out, "{:<cw$}", "");
                    for c in &self.classes {
                        let _ = write!(out, "  {c:>cw$}");
                    }
                    out.push('\n');
                    for (t, c) in self.classes.iter().enumerate() {
                        let _ = write!(out, "{c:<cw$}");
                        for v in r.confusion.row(t) {
                            let _ = write!(out, "  {v:>cw$}");
                        }
                        out.push('\n');
                    }
                }
            }
            ReportFormat::Csv => {
                out.push_str("run,sensitivity,specificity,accuracy,tp,tn,fp,fn\n");
                for ((r, m), c) in self.runs.iter().zip(&set.runs).zip(&counts) {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{},{}",
                        r.name,
                        fmt_metric(m.sensitivity),
                        fmt_metric(m.specificity),
                        fmt_metric(m.accuracy),
                        c.tp,
                        c.tn,
                        c.fp,
                        c.fn_
                    );
                }
                let a = &set.average;
                let _ = writeln!(
                    out,
                    "average,{},{},{},,,,",
                    fmt_metric(a.sensitivity),
                    fmt_metric(a.specificity),
                    fmt_metric(a.accuracy)
                );
            }
            ReportFormat::JsonLines => {
                let r2 = |v: Option<f64>| v.map(round2);
                for ((r, m), c) in self.runs.iter().zip(&set.runs).zip(&counts) {
                    let row = JsonRow {
                        run: &r.name,
                        sensitivity: r2(m.sensitivity),
                        specificity: r2(m.specificity),
                        accuracy: r2(m.accuracy),
                        counts: Some(*c),
                        classes: Some(&self.classes),
                        confusion: Some(r.confusion.rows()),
                    };
                    out.push_str(&serde_json::to_string(&row).expect("serializable"));
                    out.push('\n');
                }
                let a = &set.average;
                let row = JsonRow {
                    run: "average",
                    sensitivity: r2(a.sensitivity),
                    specificity: r2(a.specificity),
                    accuracy: r2(a.accuracy),
                    counts: None,
                    classes: None,
                    confusion: None,
                };
                out.push_str(&serde_json::to_string(&row).expect("serializable"));
                out.push('\n');
            }
        }
        Ok(out)
    }

    /// One CSV grid per run, keyed by run name.
    pub fn confusion_csvs(&self) -> Vec<(String, String)> {
        let classes = self.class_refs();
        self.runs
            .iter()
            .map(|r| (r.name.clone(), r.confusion.to_csv(&classes)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(s: f64, sp: f64, a: f64) -> MetricSet {
        MetricSet {
            sensitivity: Some(s),
            specificity: Some(sp),
            accuracy: Some(a),
        }
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let cm = ConfusionMatrix::from_labels(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(cm.rows(), vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]);
        let c = one_vs_rest(&cm, 2).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert_eq!(per_class_accuracy(&cm), vec![Some(100.0); 3]);
    }

    #[test]
    fn all_wrong_single_cell() {
        let cm = ConfusionMatrix::from_labels(&[0, 0, 0], &[1, 1, 1], 3).unwrap();
        assert_eq!(cm.get(0, 1), 3);
        assert_eq!(cm.total(), 3);
        assert_eq!(cm.trace(), 0);
    }

    #[test]
    fn bad_labels_rejected() {
        assert!(ConfusionMatrix::from_labels(&[0, 1], &[0], 2).is_err());
        assert!(ConfusionMatrix::from_labels(&[0, 2], &[0, 1], 2).is_err());
        assert!(one_vs_rest(&ConfusionMatrix::new(2), 2).is_err());
    }

    #[test]
    fn counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t: Vec<usize> = (0..50).map(|_| rng.random_range(0..3)).collect();
        let p: Vec<usize> = (0..50).map(|_| rng.random_range(0..3)).collect();
        let cm = ConfusionMatrix::from_labels(&t, &p, 3).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let naive = t.iter().zip(&p).filter(|(x, y)| **x == a && **y == b).count() as u64;
                assert_eq!(cm.get(a, b), naive);
            }
        }
    }

    #[test]
    fn two_class_row_pin() {
        let c = BinaryCounts {
            tp: 223,
            tn: 473,
            fp: 5,
            fn_: 3,
        };
        assert_eq!(c.total(), 704);
        let ms = metrics(&c, c.tp + c.tn, c.total());
        assert_eq!(fmt_metric(ms.sensitivity), "98.67");
        assert_eq!(fmt_metric(ms.specificity), "98.95");
        assert_eq!(fmt_metric(ms.accuracy), "98.86");
    }

    #[test]
    fn three_class_row_counts() {
        let c = BinaryCounts {
            tp: 221,
            tn: 1099,
            fp: 10,
            fn_: 5,
        };
        assert_eq!(c.total(), 1335);
        let ms = metrics(&c, 0, c.total());
        assert_eq!(fmt_metric(ms.sensitivity), "97.79");
        assert_eq!(fmt_metric(ms.specificity), "99.10");
    }

    #[test]
    fn zero_denominators_are_undefined() {
        let ms = metrics(&BinaryCounts::default(), 0, 0);
        assert_eq!(ms, MetricSet::default());
        assert_eq!(fmt_metric(ms.accuracy), "undefined");
        let cm = ConfusionMatrix::from_rows(&[vec![1, 0], vec![0, 0]]).unwrap();
        assert_eq!(per_class_accuracy(&cm), vec![Some(100.0), None]);
    }

    #[test]
    fn per_class_rates() {
        let cm = ConfusionMatrix::from_rows(&[vec![225, 1, 0], vec![0, 1, 0], vec![0, 0, 1]]).unwrap();
        assert_eq!(fmt_metric(per_class_accuracy(&cm)[0]), "99.56");
        let uniform = ConfusionMatrix::from_rows(&[vec![1; 3], vec![1; 3], vec![1; 3]]).unwrap();
        for v in per_class_accuracy(&uniform) {
            assert_eq!(fmt_metric(v), "33.33");
        }
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round2(98.665), 98.67);
        assert_eq!(round2(98.664999), 98.66);
        assert_eq!(round2(100.0), 100.0);
        assert_eq!(round2(0.005), 0.01);
    }

    #[test]
    fn table4_averages() {
        let runs = [
            m(98.67, 98.54, 98.58),
            m(98.23, 98.54, 98.44),
            m(98.67, 97.70, 98.01),
            m(98.66, 98.95, 98.86),
            m(98.67, 98.74, 98.72),
        ];
        let set = average_runs(&runs).unwrap();
        assert_eq!(fmt_metric(set.average.sensitivity), "98.58");
        assert_eq!(fmt_metric(set.average.specificity), "98.49");
        assert_eq!(fmt_metric(set.average.accuracy), "98.52");
        assert_eq!(average_runs(&runs[..1]).unwrap().average, runs[0]);
        assert!(average_runs(&[]).is_err());
    }

    #[test]
    fn table3_averages() {
        let runs = [
            m(98.21, 98.94, 95.21),
            m(99.10, 98.72, 95.43),
            m(99.10, 99.15, 95.43),
            m(96.85, 99.36, 95.13),
            m(99.10, 98.72, 95.51),
        ];
        let a = average_runs(&runs).unwrap().average;
        assert_eq!(fmt_metric(a.sensitivity), "98.47");
        assert_eq!(fmt_metric(a.specificity), "98.98");
        assert_eq!(fmt_metric(a.accuracy), "95.34");
    }

    fn report(k: usize, runs: usize, seed: u64) -> EvalReport {
        let classes = ["covid", "pneumonia", "normal"];
        let names: Vec<String> = if k == 2 {
            vec!["covid".into(), "normal".into()]
        } else {
            classes.iter().map(|s| s.to_string()).collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = EvalReport::new(names, 0);
        for i in 0..runs {
            let t: Vec<usize> = (0..200).map(|_| rng.random_range(0..k)).collect();
            let p: Vec<usize> = t
                .iter()
                .map(|&x| {
                    if rng.random_bool(0.9) {
                        x
                    } else {
                        rng.random_range(0..k)
                    }
                })
                .collect();
            r.push(
                format!("run{}", i + 1),
                ConfusionMatrix::from_labels(&t, &p, k).unwrap(),
            )
            .unwrap();
        }
        r
    }

    #[test]
    fn five_run_grid_has_six_rows() {
        let r = report(2, 5, 1);
        let csv = r.render(ReportFormat::Csv).unwrap();
        assert_eq!(csv.lines().count(), 7);
        let text = r.render(ReportFormat::Text).unwrap();
        assert_eq!(text.lines().take_while(|l| !l.is_empty()).count(), 7);
        assert_eq!(r.render(ReportFormat::JsonLines).unwrap().lines().count(), 6);
    }

    #[test]
    fn single_three_class_run_has_one_matrix_block() {
        let r = report(3, 1, 2);
        let text = r.render(ReportFormat::Text).unwrap();
        assert_eq!(text.matches("confusion run1").count(), 1);
        let block: Vec<&str> = text
            .lines()
            .skip_while(|l| !l.starts_with("confusion"))
            .skip(2)
            .collect();
        assert_eq!(block.len(), 3);
        let grids = r.confusion_csvs();
        assert_eq!(grids.len(), 1);
        assert_eq!(grids[0].1.lines().count(), 4);
    }

    #[test]
    fn formats_agree_numerically() {
        let r = report(3, 4, 3);
        let csv = r.render(ReportFormat::Csv).unwrap();
        let text = r.render(ReportFormat::Text).unwrap();
        let json = r.render(ReportFormat::JsonLines).unwrap();
        let from_csv: Vec<Vec<Option<f64>>> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').skip(1).take(3).map(|v| parse_metric(v).unwrap()).collect())
            .collect();
        let from_text: Vec<Vec<Option<f64>>> = text
            .lines()
            .skip(1)
            .take_while(|l| !l.is_empty())
            .map(|l| l.split_whitespace().skip(1).map(|v| parse_metric(v).unwrap()).collect())
            .collect();
        let from_json: Vec<Vec<Option<f64>>> = json
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                ["sensitivity", "specificity", "accuracy"]
                    .iter()
                    .map(|k| v[k].as_f64())
                    .collect()
            })
            .collect();
        assert_eq!(from_csv, from_text);
        assert_eq!(from_csv, from_json);
        assert_eq!(from_csv.len(), 5);
    }

    proptest::proptest! {
        #[test]
        fn one_vs_rest_conserves_totals(cells in proptest::collection::vec(0u64..500, 9), pos in 0usize..3) {
            let cm = ConfusionMatrix::from_rows(&[cells[..3].to_vec(), cells[3..6].to_vec(), cells[6..].to_vec()]).unwrap();
            let c = one_vs_rest(&cm, pos).unwrap();
            proptest::prop_assert_eq!(c.total(), cm.total());
        }

        #[test]
        fn metrics_bounded_and_independent(tp in 0u64..100, tn in 0u64..100, fp in 0u64..100, fn_ in 0u64..100, d in 1u64..50) {
            let c = BinaryCounts { tp, tn, fp, fn_ };
            let base = metrics(&c, tp + tn, c.total());
            for v in [base.sensitivity, base.specificity, base.accuracy].into_iter().flatten() {
                proptest::prop_assert!((0.0..=100.0).contains(&v));
            }
            let more_neg = metrics(&BinaryCounts { tn: tn + d, fp: fp + d, ..c }, 0, 1);
            proptest::prop_assert_eq!(more_neg.sensitivity, base.sensitivity);
            let more_pos = metrics(&BinaryCounts { tp: tp + d, fn_: fn_ + d, ..c }, 0, 1);
            proptest::prop_assert_eq!(more_pos.specificity, base.specificity);
        }
    }
}
