//! Confusion matrices to sensitivity / specificity / accuracy, averaged over
//! runs and rendered in all three report formats.
use ccblock::eval::{metrics_from_confusion, ConfusionMatrix, EvalReport, ReportFormat};

fn main() -> ccblock::Result<()> {
    let classes = vec!["covid".to_string(), "normal".to_string()];
    let mut report = EvalReport::new(classes, 0);
    report.push("run1", ConfusionMatrix::from_rows(&[vec![223, 3], vec![5, 473]])?)?;
    report.push("run2", ConfusionMatrix::from_rows(&[vec![222, 4], vec![7, 471]])?)?;
    println!("{:?}", metrics_from_confusion(&report.runs[0].confusion, 0)?);
    for f in [ReportFormat::Text, ReportFormat::Csv, ReportFormat::JsonLines] {
        println!("{}", report.render(f)?);
    }
    for (run, grid) in report.confusion_csvs() {
        println!("{run}:\n{grid}");
    }
    Ok(())
}
