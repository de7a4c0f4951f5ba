//! Data-free checks that need no images or trained weights.

use crate::data::{split_counts, stratified_split, ClassLabel, ManifestRecord, SplitSpec};
use crate::error::Result;
use crate::eval::{average_runs, fmt_metric, metrics, one_vs_rest, BinaryCounts, ConfusionMatrix, MetricSet};
use crate::gradcheck::{layer_suite, LAYER_TOLERANCE};
use crate::model::{build_model, ModelSpec};
use crate::tensor::Tensor;
use crate::weights::WeightArchive;
use crate::Error;

pub const TABLE2_3CLASS: &str = include_str!("../fixtures/table2_3class.csv");
pub const TABLE2_2CLASS: &str = include_str!("../fixtures/table2_2class.csv");

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name,
        passed,
        detail: detail.into(),
    }
}

fn triple(m: &MetricSet) -> String {
    format!(
        "{}/{}/{}",
        fmt_metric(m.sensitivity),
        fmt_metric(m.specificity),
        fmt_metric(m.accuracy)
    )
}

fn ms(s: f64, sp: f64, a: f64) -> MetricSet {
    MetricSet {
        sensitivity: Some(s),
        specificity: Some(sp),
        accuracy: Some(a),
    }
}

/// Two-class test-set counts with covid positive.
pub fn two_class_counts() -> BinaryCounts {
    BinaryCounts {
        tp: 223,
        tn: 473,
        fp: 5,
        fn_: 3,
    }
}

/// Three-class test-set counts with covid positive.
pub fn three_class_counts() -> BinaryCounts {
    BinaryCounts {
        tp: 221,
        tn: 1099,
        fp: 10,
        fn_: 5,
    }
}

pub fn two_class_runs() -> [MetricSet; 5] {
    [
        ms(98.67, 98.54, 98.58),
        ms(98.23, 98.54, 98.44),
        ms(98.67, 97.70, 98.01),
        ms(98.66, 98.95, 98.86),
        ms(98.67, 98.74, 98.72),
    ]
}

pub fn three_class_runs() -> [MetricSet; 5] {
    [
        ms(98.21, 98.94, 95.21),
        ms(99.10, 98.72, 95.43),
        ms(99.10, 99.15, 95.43),
        ms(96.85, 99.36, 95.13),
        ms(99.10, 98.72, 95.51),
    ]
}

/// Confusion matrix realizing binary counts: row 0 is the positive class,
/// the negatives spread over the remaining `k − 1` classes with every
/// negative sample predicted correctly.
fn realize(c: &BinaryCounts, negatives: &[u64]) -> Result<ConfusionMatrix> {
    let k = negatives.len() + 1;
    let mut rows = vec![vec![0u64; k]; k];
    rows[0][0] = c.tp;
    rows[0][1] = c.fn_;
    let mut fp_left = c.fp;
    for (i, &n) in negatives.iter().enumerate() {
        let fp = fp_left.min(n);
        fp_left -= fp;
        rows[i + 1][0] = fp;
        rows[i + 1][i + 1] = n - fp;
    }
    if fp_left > 0 {
        return Err(Error::Validation("more false positives than negatives".into()));
    }
    ConfusionMatrix::from_rows(&rows)
}

pub fn metric_checks() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let c2 = two_class_counts();
    let m2 = metrics(&c2, c2.tp + c2.tn, c2.total());
    out.push(check(
        "metrics_two_class_counts",
        triple(&m2) == "98.67/98.95/98.86",
        format!("TP=223 TN=473 FP=5 FN=3 -> {}", triple(&m2)),
    ));

    let a4 = average_runs(&two_class_runs())?.average;
    out.push(check(
        "two_class_run_average",
        triple(&a4) == "98.58/98.49/98.52",
        format!("average {}", triple(&a4)),
    ));
    let a3 = average_runs(&three_class_runs())?.average;
    out.push(check(
        "three_class_run_average",
        triple(&a3) == "98.47/98.98/95.34",
        format!("average {}", triple(&a3)),
    ));

    // Two-class test set: 226 covid + 478 normal; three-class adds 631 pneumonia.
    let cm2 = realize(&c2, &[478])?;
    let c3 = three_class_counts();
    let cm3 = realize(&c3, &[631, 478])?;
    let back2 = one_vs_rest(&cm2, 0)?;
    let back3 = one_vs_rest(&cm3, 0)?;
    out.push(check(
        "one_vs_rest_conserves_totals",
        back2 == c2 && back3 == c3 && back2.total() == 704 && back3.total() == 1335,
        format!("{} = 226+478, {} = 226+631+478", back2.total(), back3.total()),
    ));
    Ok(out)
}

fn table1_records() -> Vec<ManifestRecord> {
    let mut out = Vec::new();
    for (label, n) in ClassLabel::ALL.into_iter().zip([310, 864, 654]) {
        for i in 0..n {
            out.push(ManifestRecord::new(format!("{label}/{i}.png"), label));
        }
    }
    out
}

pub fn split_check(seed: u64) -> Result<Check> {
    let split = stratified_split(&table1_records(), &SplitSpec::table1_counts(seed))?;
    let c = split_counts(&split);
    let got: Vec<(usize, usize)> = ClassLabel::ALL.iter().map(|l| (c[l].0, c[l].1)).collect();
    Ok(check(
        "table1_split_counts",
        got == [(84, 226), (233, 631), (176, 478)],
        format!("{got:?}"),
    ))
}

pub fn summary_checks() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (k, fixture, name) in [
        (3, TABLE2_3CLASS, "summary_matches_3class_table"),
        (2, TABLE2_2CLASS, "summary_matches_2class_table"),
    ] {
        let model = build_model::<f32>(&ModelSpec::new(k)?, 0)?;
        let csv = model.summarize().to_csv();
        out.push(check(name, csv == fixture, format!("{} rows", csv.lines().count() - 1)));
    }
    Ok(out)
}

pub fn format_checks() -> Result<Vec<Check>> {
    let mut a = WeightArchive::new();
    a.push("t", Tensor::from_fn(&[2, 2], |i| i as f32 - 1.5))?;
    a.push("backbone.conv1_1.bias", Tensor::from_fn(&[64], |i| (i as f32).sin()))?;
    let bytes = a.to_bytes();
    let round = WeightArchive::from_bytes(&bytes, "selftest").map(|b| b.to_bytes() == bytes);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    let magic = matches!(WeightArchive::from_bytes(&bad, "selftest"), Err(Error::Format { .. }));
    let trunc = matches!(
        WeightArchive::from_bytes(&bytes[..bytes.len() - 1], "selftest"),
        Err(Error::Corrupt { .. })
    );
    Ok(vec![
        check(
            "ccw_round_trip",
            round.unwrap_or(false),
            format!("{} bytes", bytes.len()),
        ),
        check("ccw_rejects_bad_magic", magic, "format error"),
        check("ccw_rejects_truncation", trunc, "corruption error"),
    ])
}

pub fn gradient_checks(seed: u64) -> Result<Vec<Check>> {
    Ok(layer_suite(seed)?
        .into_iter()
        .map(|r| {
            let detail = format!("max rel error {:.3e} at {}", r.max_rel_error, r.worst);
            Check {
                name: "layer_gradient",
                passed: r.passed(LAYER_TOLERANCE),
                detail: format!("{}: {detail}", r.name),
            }
        })
        .collect())
}

/// Every data-free check, in a fixed order.
pub fn run_all() -> Result<Vec<Check>> {
    let mut out = metric_checks()?;
    out.push(split_check(0)?);
    out.extend(summary_checks()?);
    out.extend(format_checks()?);
    out.extend(gradient_checks(1)?);
    Ok(out)
}
