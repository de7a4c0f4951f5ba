//! Command-line front end. Every subcommand is a thin wrapper over the
//! library; files are only written under `--out`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    build_manifest, parse_manifest, select_split, split_counts, stratified_split, write_manifest, ClassLabel, Dataset,
    ImageDataset, ImageSpec, ManifestRecord, Split, SplitSpec, Task, DEFAULT_TRAIN_FRACTION,
};
use crate::error::{Error, Result};
use crate::eval::{per_class_accuracy, ConfusionMatrix, EvalReport, ReportFormat};
use crate::gradcheck::{layer_suite, model_check, LAYER_TOLERANCE, MODEL_STEP, MODEL_TOLERANCE};
use crate::layers::argmax_rows;
use crate::model::{build_model, ModelSpec};
use crate::train::{load_checkpoint, predict_probs, save_checkpoint, train, TrainConfig};
use crate::weights::{apply_weights, NameMap, Strictness, WeightArchive};

#[derive(Debug, Parser)]
#[command(name = "ccblock", version, about = "VGG-16 + CCBlock chest X-ray classifier")]
struct Cli {
    /// Worker threads for kernels and image loading (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan covid/, pneumonia/, normal/ under a root (or read a manifest) and
    /// write a manifest, optionally with a stratified split.
    Manifest(ManifestArgs),
    /// Print the layer table of the model.
    Summary(SummaryArgs),
    /// Load pretrained backbone weights from a CCW archive into a fresh model.
    ImportWeights(ImportArgs),
    /// Train on a manifest and write history.csv and checkpoint.ccw.
    Train(TrainArgs),
    /// Evaluate one or more checkpoints and write a report.
    Eval(EvalArgs),
    /// Print class probabilities for images.
    Predict(PredictArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Run the data-free self checks.
    Selftest,
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Fraction of each class assigned to train.
    #[arg(long, default_value_t = DEFAULT_TRAIN_FRACTION)]
    train_fraction: f64,
    /// Use the fixed per-class train counts 84 / 233 / 176.
    #[arg(long)]
    table1_counts: bool,
    /// Seed of the split shuffle.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Keep records with the same group value on one side.
    #[arg(long)]
    group_aware: bool,
}

impl SplitArgs {
    fn spec(&self) -> SplitSpec {
        let mut spec = if self.table1_counts {
            SplitSpec::table1_counts(self.split_seed)
        } else {
            SplitSpec {
                seed: self.split_seed,
                ..SplitSpec::default()
            }
        };
        spec.train_fraction = self.train_fraction;
        spec.group_aware = self.group_aware;
        spec
    }
}

#[derive(Debug, Args)]
struct ManifestArgs {
    /// Directory containing covid/, pneumonia/ and normal/ subdirectories.
    #[arg(long, conflicts_with = "input")]
    root: Option<PathBuf>,
    /// Existing manifest to (re)split instead of scanning a root.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Assign train/test splits (existing assignments are replaced).
    #[arg(long)]
    split: bool,
    #[command(flatten)]
    split_args: SplitArgs,
    /// Output directory; receives manifest.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SummaryArgs {
    /// Number of classes (2 or 3).
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Output format: text or csv.
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Debug, Args)]
struct ImportArgs {
    /// CCW archive with backbone weights.
    #[arg(long)]
    weights: PathBuf,
    /// Optional name map file (`archive_name model_name` per line).
    #[arg(long)]
    map: Option<PathBuf>,
    /// Require every model tensor (full checkpoint) instead of the backbone only.
    #[arg(long)]
    strict: bool,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Seed for the layers not covered by the archive.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives model.ccw.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Manifest CSV; records without a split are split with the split flags.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Seed for initialization and batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train only the CCBlock and FC layers.
    #[arg(long)]
    freeze_backbone: bool,
    /// Pretrained backbone archive (CCW) imported before training.
    #[arg(long, conflicts_with = "resume")]
    weights: Option<PathBuf>,
    /// Checkpoint to continue from (strict import).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Fill the seconds column of history.csv (makes it run-dependent).
    #[arg(long)]
    record_time: bool,
    #[command(flatten)]
    split_args: SplitArgs,
    /// Output directory; receives history.csv, checkpoint.ccw and manifest.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint(s); each one becomes a run in the report.
    #[arg(long, required = true, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Which records to evaluate: test, train or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Report format printed to stdout: text, csv or jsonl (all three are written).
    #[arg(long, default_value = "text")]
    format: String,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Output directory; receives report.{txt,csv,jsonl} and confusion_<run>.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG or JPEG files.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also run the end-to-end check on a width-reduced model (about a minute).
    #[arg(long)]
    model: bool,
}

/// Parses `argv` (including the program name) and runs the subcommand,
/// printing to stdout/stderr. Returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// [`run`] with explicit output streams. Usage errors exit 2, failed
/// contracts exit 1.
pub fn run_with<I, S>(argv: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command, out, err)),
            Err(e) => Err(Error::Validation(format!("cannot start {n} threads: {e}"))),
        },
        None => dispatch(cli.command, out, err),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<output stream>", e)
}

/// `Ok(false)` means the command ran but a check failed.
fn dispatch(cmd: Command, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<bool> {
    match cmd {
        Command::Manifest(a) => cmd_manifest(a, out),
        Command::Summary(a) => cmd_summary(a, out),
        Command::ImportWeights(a) => cmd_import(a, out),
        Command::Train(a) => cmd_train(a, out, err),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Selftest => cmd_selftest(out),
    }
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn print_counts(records: &[ManifestRecord], out: &mut dyn Write) -> Result<()> {
    let counts = split_counts(records);
    for label in ClassLabel::ALL {
        let (train, test, none) = counts.get(&label).copied().unwrap_or_default();
        writeln!(
            out,
            "{label}: total {} train {train} test {test} unassigned {none}",
            train + test + none
        )
        .map_err(io_err)?;
    }
    Ok(())
}

fn cmd_manifest(a: ManifestArgs, out: &mut dyn Write) -> Result<bool> {
    let mut records = match (&a.root, &a.input) {
        (Some(root), None) => build_manifest(root)?,
        (None, Some(input)) => parse_manifest(input)?,
        _ => return Err(Error::Validation("give exactly one of --root or --input".into())),
    };
    if a.split {
        records = stratified_split(&records, &a.split_args.spec())?;
    }
    create_out(&a.out)?;
    let path = a.out.join("manifest.csv");
    write_manifest(&records, &path)?;
    writeln!(out, "wrote {} records to {}", records.len(), path.display()).map_err(io_err)?;
    print_counts(&records, out)?;
    Ok(true)
}

fn cmd_summary(a: SummaryArgs, out: &mut dyn Write) -> Result<bool> {
    let model = build_model::<f32>(&ModelSpec::new(a.classes)?, 0)?;
    let summary = model.summarize();
    let text = match a.format.as_str() {
        "text" => summary.to_text(),
        "csv" => summary.to_csv(),
        f => return Err(Error::Validation(format!("unknown summary format {f:?} (text, csv)"))),
    };
    out.write_all(text.as_bytes()).map_err(io_err)?;
    Ok(true)
}

fn load_map(path: Option<&Path>) -> Result<NameMap> {
    match path {
        Some(p) => NameMap::parse(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => Ok(NameMap::identity()),
    }
}

fn cmd_import(a: ImportArgs, out: &mut dyn Write) -> Result<bool> {
    let mut model = build_model::<f32>(&ModelSpec::new(a.classes)?, a.seed)?;
    let archive = WeightArchive::load(&a.weights)?;
    let strictness = if a.strict {
        Strictness::Strict
    } else {
        Strictness::BackboneOnly
    };
    let report = apply_weights(&mut model, &archive, &load_map(a.map.as_deref())?, strictness)?;
    out.write_all(report.to_string().as_bytes()).map_err(io_err)?;
    create_out(&a.out)?;
    let path = a.out.join("model.ccw");
    save_checkpoint(&model, &path)?;
    writeln!(out, "wrote {}", path.display()).map_err(io_err)?;
    Ok(true)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<bool> {
    let task = Task::from_num_classes(a.classes)?;
    let mut records = parse_manifest(&a.manifest)?;
    if records.iter().any(|r| r.split.is_none()) {
        records = stratified_split(&records, &a.split_args.spec())?;
    }
    let spec = ImageSpec::default();
    let train_set = ImageDataset::for_task(&select_split(&records, Split::Train), task, spec.clone())?;
    let test_set = ImageDataset::for_task(&select_split(&records, Split::Test), task, spec)?;
    let cfg = TrainConfig {
        learning_rate: a.lr,
        momentum: a.momentum,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        freeze_backbone: a.freeze_backbone,
        record_time: a.record_time,
        stop_at: None,
    };
    cfg.validate()?;

    let mut model = build_model::<f32>(&ModelSpec::new(a.classes)?, a.seed)?;
    if let Some(w) = &a.weights {
        let report = apply_weights(
            &mut model,
            &WeightArchive::load(w)?,
            &NameMap::identity(),
            Strictness::BackboneOnly,
        )?;
        writeln!(
            err,
            "imported {} backbone tensors from {}",
            report.loaded.len(),
            w.display()
        )
        .map_err(io_err)?;
    }
    if let Some(r) = &a.resume {
        crate::train::resume(&mut model, r)?;
    }

    create_out(&a.out)?;
    write_manifest(&records, a.out.join("manifest.csv"))?;
    writeln!(
        err,
        "training on {} images, testing on {}",
        train_set.len(),
        test_set.len()
    )
    .map_err(io_err)?;
    let test: Option<&dyn Dataset> = (!test_set.is_empty()).then_some(&test_set as &dyn Dataset);
    let history = train(&mut model, &train_set, test, &cfg, |r| {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(
            err,
            "epoch {} train_loss {:.4} train_acc {:.4} test_loss {} test_acc {}",
            r.epoch,
            r.train_loss,
            r.train_acc,
            fmt(r.test_loss),
            fmt(r.test_acc)
        );
    })?;
    history.write_csv(a.out.join("history.csv"))?;
    save_checkpoint(&model, a.out.join("checkpoint.ccw"))?;
    writeln!(out, "wrote {}", a.out.join("history.csv").display()).map_err(io_err)?;
    writeln!(out, "wrote {}", a.out.join("checkpoint.ccw").display()).map_err(io_err)?;
    Ok(true)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<bool> {
    let format: ReportFormat = a.format.parse()?;
    let records = parse_manifest(&a.manifest)?;
    let records = match a.split.as_str() {
        "test" => select_split(&records, Split::Test),
        "train" => select_split(&records, Split::Train),
        "all" => records,
        s => return Err(Error::Validation(format!("unknown split {s:?} (test, train, all)"))),
    };
    let mut report: Option<EvalReport> = None;
    for (i, ckpt) in a.checkpoint.iter().enumerate() {
        let model = load_checkpoint(ckpt)?;
        let task = Task::from_num_classes(model.num_classes())?;
        let data = ImageDataset::for_task(&records, task, ImageSpec::default())?;
        let probs = predict_probs(&model, &data, a.batch_size)?;
        let cm = ConfusionMatrix::from_labels(data.labels(), &argmax_rows(&probs)?, task.num_classes())?;
        let r = report
            .get_or_insert_with(|| EvalReport::new(task.class_names().into_iter().map(String::from).collect(), 0));
        r.push(format!("run{}", i + 1), cm)?;
    }
    let report = report.expect("at least one checkpoint");
    create_out(&a.out)?;
    for (f, ext) in [
        (ReportFormat::Text, "txt"),
        (ReportFormat::Csv, "csv"),
        (ReportFormat::JsonLines, "jsonl"),
    ] {
        let path = a.out.join(format!("report.{ext}"));
        std::fs::write(&path, report.render(f)?).map_err(|e| Error::io(&path, e))?;
    }
    for (run, grid) in report.confusion_csvs() {
        let path = a.out.join(format!("confusion_{run}.csv"));
        std::fs::write(&path, grid).map_err(|e| Error::io(&path, e))?;
    }
    out.write_all(report.render(format)?.as_bytes()).map_err(io_err)?;
    if format == ReportFormat::Text {
        for run in &report.runs {
            let rates: Vec<String> = per_class_accuracy(&run.confusion)
                .into_iter()
                .zip(&report.classes)
                .map(|(v, c)| format!("{c} {}", crate::eval::fmt_metric(v)))
                .collect();
            writeln!(out, "per-class accuracy {}: {}", run.name, rates.join(", ")).map_err(io_err)?;
        }
    }
    Ok(true)
}

fn cmd_predict(a: PredictArgs, out: &mut dyn Write) -> Result<bool> {
    let model = load_checkpoint(&a.checkpoint)?;
    let task = Task::from_num_classes(model.num_classes())?;
    let spec = ImageSpec::default();
    for path in &a.images {
        let x = crate::data::load_image(path, &spec)?.reshape(&[1, 3, spec.size, spec.size])?;
        let probs = model.forward(&x)?;
        let fields: Vec<String> = task
            .class_names()
            .iter()
            .zip(probs.data())
            .map(|(c, p)| format!("{c}={p:.6}"))
            .collect();
        writeln!(out, "{} {}", path.display(), fields.join(" ")).map_err(io_err)?;
    }
    Ok(true)
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<bool> {
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for r in layer_suite(a.seed)? {
        let pass = r.passed(LAYER_TOLERANCE);
        ok &= pass;
        worst = worst.max(r.max_rel_error);
        writeln!(
            out,
            "{} {:<14} checked {:>4}  max rel error {:.3e}  at {}",
            if pass { "PASS" } else { "FAIL" },
            r.name,
            r.checked,
            r.max_rel_error,
            r.worst
        )
        .map_err(io_err)?;
    }
    writeln!(out, "layers: max rel error {worst:.3e} (tolerance {LAYER_TOLERANCE:e})").map_err(io_err)?;
    if a.model {
        let r = model_check(a.seed, 4, 1, MODEL_STEP)?;
        let pass = r.passed(MODEL_TOLERANCE);
        ok &= pass;
        writeln!(
            out,
            "{} {} checked {} kinks {} max rel error {:.3e} at {} (tolerance {MODEL_TOLERANCE:e})",
            if pass { "PASS" } else { "FAIL" },
            r.name,
            r.checked,
            r.kinks,
            r.max_rel_error,
            r.worst
        )
        .map_err(io_err)?;
    }
    Ok(ok)
}

fn cmd_selftest(out: &mut dyn Write) -> Result<bool> {
    let checks = crate::selftest::run_all()?;
    let mut ok = true;
    for c in &checks {
        ok &= c.passed;
        writeln!(
            out,
            "{} {} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        )
        .map_err(io_err)?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    writeln!(out, "{} checks, {failed} failed", checks.len()).map_err(io_err)?;
    Ok(ok)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::class_counts;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with(
            std::iter::once("ccblock").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn summary_three_class_has_output_row() {
        let (code, out, _) = run_capture(&["summary", "--classes", "3"]);
        assert_eq!(code, 0);
        assert!(out.contains("1x3"));
        let (_, csv, _) = run_capture(&["summary", "--classes", "2", "--format", "csv"]);
        assert_eq!(csv, crate::selftest::TABLE2_2CLASS);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_capture(&["frobnicate"]).0, 2);
        assert_eq!(run_capture(&["summary", "--bogus"]).0, 2);
        assert_eq!(run_capture(&[]).0, 2);
    }

    #[test]
    fn contract_failures_exit_1_with_one_line() {
        let (code, _, err) = run_capture(&["summary", "--classes", "4"]);
        assert_eq!(code, 1);
        assert_eq!(err.lines().count(), 1);
        assert!(err.starts_with("error: "));
    }

    #[test]
    fn help_lists_defaults() {
        let (code, out, _) = run_capture(&["train", "--help"]);
        assert_eq!(code, 0);
        for flag in [
            "--lr",
            "--momentum",
            "--batch-size",
            "--epochs",
            "--train-fraction",
            "--classes",
        ] {
            assert!(out.contains(flag), "{flag}");
        }
        for default in [
            "[default: 0.001]",
            "[default: 0.9]",
            "[default: 32]",
            "[default: 30]",
            "[default: 0.27]",
            "[default: 3]",
        ] {
            assert!(out.contains(default), "{default}");
        }
    }

    #[test]
    fn selftest_and_gradcheck_pass() {
        let (code, out, _) = run_capture(&["selftest"]);
        assert_eq!(code, 0, "{out}");
        assert!(out.contains("PASS metrics_two_class_counts TP=223 TN=473 FP=5 FN=3 -> 98.67/98.95/98.86"));
        let (code, out, _) = run_capture(&["gradcheck", "--threads", "1"]);
        assert_eq!(code, 0, "{out}");
        assert!(!out.contains("FAIL"));
    }

    #[test]
    fn manifest_from_root_with_split() {
        let dir = tempfile::tempdir().unwrap();
        for (cls, n) in [("covid", 4), ("normal", 8)] {
            std::fs::create_dir_all(dir.path().join(cls)).unwrap();
            for i in 0..n {
                std::fs::write(dir.path().join(cls).join(format!("{i}.png")), b"").unwrap();
            }
        }
        let out_dir = dir.path().join("out");
        let (code, out, err) = run_capture(&[
            "manifest",
            "--root",
            dir.path().to_str().unwrap(),
            "--split",
            "--train-fraction",
            "0.5",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{err}");
        assert!(out.contains("covid: total 4 train 2 test 2"));
        let records = parse_manifest(out_dir.join("manifest.csv")).unwrap();
        assert_eq!(class_counts(&records), [4, 0, 8]);
        assert!(records.iter().all(|r| r.path.exists()));
    }
}
