//! Manifests, the stratified train/test split, image loading and batching.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{INPUT_CHANNELS, INPUT_SIZE};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Covid,
    Pneumonia,
    Normal,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Covid, ClassLabel::Pneumonia, ClassLabel::Normal];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Covid => "covid",
            ClassLabel::Pneumonia => "pneumonia",
            ClassLabel::Normal => "normal",
        }
    }

    /// Case-insensitive; surrounding whitespace is ignored.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        Self::ALL.into_iter().find(|l| l.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which labels take part, and their class indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// covid = 0, normal = 1.
    TwoClass,
    /// covid = 0, pneumonia = 1, normal = 2.
    ThreeClass,
}

impl Task {
    pub fn from_num_classes(k: usize) -> Result<Self> {
        match k {
            2 => Ok(Task::TwoClass),
            3 => Ok(Task::ThreeClass),
            _ => Err(Error::Validation(format!("class count must be 2 or 3, got {k}"))),
        }
    }

    pub fn classes(self) -> &'static [ClassLabel] {
        match self {
            Task::TwoClass => &[ClassLabel::Covid, ClassLabel::Normal],
            Task::ThreeClass => &ClassLabel::ALL,
        }
    }

    pub fn num_classes(self) -> usize {
        self.classes().len()
    }

    pub fn index_of(self, label: ClassLabel) -> Option<usize> {
        self.classes().iter().position(|&l| l == label)
    }

    pub fn class_names(self) -> Vec<&'static str> {
        self.classes().iter().map(|l| l.as_str()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub label: ClassLabel,
    pub split: Option<Split>,
    pub source: String,
    /// Optional grouping key (e.g. a patient id) for the group-aware split.
    pub group: Option<String>,
}

impl ManifestRecord {
    pub fn new(path: impl Into<PathBuf>, label: ClassLabel) -> Self {
        Self {
            path: path.into(),
            label,
            split: None,
            source: String::new(),
            group: None,
        }
    }
}

const COLUMNS: [&str; 5] = ["path", "label", "split", "source", "group"];

/// Reads a manifest CSV. Relative image paths are resolved against the
/// manifest's directory.
pub fn parse_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest_str(&text, base, path)
}

/// Parses manifest text; `origin` is used in error messages.
pub fn parse_manifest_str(text: &str, base: &Path, origin: &Path) -> Result<Vec<ManifestRecord>> {
    let csv_err = |source| Error::Csv {
        path: origin.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(csv_err)?.clone();
    let mut col: HashMap<&str, usize> = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        let Some(&known) = COLUMNS.iter().find(|c| c.eq_ignore_ascii_case(h)) else {
            return Err(Error::Validation(format!(
                "{}: unknown manifest column {h:?} (expected {})",
                origin.display(),
                COLUMNS.join(",")
            )));
        };
        if col.insert(known, i).is_some() {
            return Err(Error::Validation(format!(
                "{}: duplicate column {h:?}",
                origin.display()
            )));
        }
    }
    for required in ["path", "label"] {
        if !col.contains_key(required) {
            return Err(Error::Validation(format!(
                "{}: manifest header lacks the {required:?} column",
                origin.display()
            )));
        }
    }

    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.records() {
        let row = row.map_err(csv_err)?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |name: &str| col.get(name).and_then(|&i| row.get(i)).unwrap_or("");
        let fail = |msg: String| Error::Validation(format!("{} line {line}: {msg}", origin.display()));

        let raw_path = field("path");
        if raw_path.is_empty() {
            return Err(fail("empty path".into()));
        }
        let label =
            ClassLabel::parse(field("label")).ok_or_else(|| fail(format!("unknown label {:?}", field("label"))))?;
        let split = match field("split").to_ascii_lowercase().as_str() {
            "" => None,
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            other => return Err(fail(format!("unknown split {other:?}"))),
        };
        let path = base.join(raw_path);
        if !seen.insert(path.clone()) {
            return Err(fail(format!("duplicate path {raw_path:?}")));
        }
        let group = Some(field("group")).filter(|g| !g.is_empty()).map(str::to_string);
        out.push(ManifestRecord {
            path,
            label,
            split,
            source: field("source").to_string(),
            group,
        });
    }
    Ok(out)
}

/// Writes a manifest. Paths under the manifest's directory are written
/// relative to it; the group column appears only when some record has one.
pub fn write_manifest(records: &[ManifestRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    std::fs::write(path, manifest_to_string(records, base)).map_err(|e| Error::io(path, e))
}

pub fn manifest_to_string(records: &[ManifestRecord], base: &Path) -> String {
    let with_group = records.iter().any(|r| r.group.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: &[&str] = if with_group { &COLUMNS } else { &COLUMNS[..4] };
    w.write_record(header).expect("in-memory write");
    for r in records {
        let p = r.path.strip_prefix(base).unwrap_or(&r.path);
        let mut fields = vec![
            p.to_string_lossy().into_owned(),
            r.label.as_str().to_string(),
            r.split.map_or("", Split::as_str).to_string(),
            r.source.clone(),
        ];
        if with_group {
            fields.push(r.group.clone().unwrap_or_default());
        }
        w.write_record(&fields).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Scans `root/{covid,pneumonia,normal}/` (missing directories are fine)
/// for PNG/JPEG files, sorted by path. The source tag is the class
/// directory name.
pub fn build_manifest(root: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let root = root.as_ref();
    let mut out = Vec::new();
    for label in ClassLabel::ALL {
        let dir = root.join(label.as_str());
        if !dir.is_dir() {
            continue;
        }
        let mut files = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = entry.map_err(|e| Error::io(&dir, e))?.path();
            let is_image = p
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)));
            if p.is_file() && is_image {
                files.push(p);
            }
        }
        files.sort();
        out.extend(files.into_iter().map(|p| ManifestRecord {
            source: label.as_str().to_string(),
            ..ManifestRecord::new(p, label)
        }));
    }
    Ok(out)
}

/// Record counts per class, in [`ClassLabel::ALL`] order.
pub fn class_counts(records: &[ManifestRecord]) -> [usize; 3] {
    let mut counts = [0; 3];
    for r in records {
        counts[r.label as usize] += 1;
    }
    counts
}

/// Per-class `(train, test, unassigned)` counts.
pub fn split_counts(records: &[ManifestRecord]) -> BTreeMap<ClassLabel, (usize, usize, usize)> {
    let mut out: BTreeMap<ClassLabel, (usize, usize, usize)> = BTreeMap::new();
    for r in records {
        let e = out.entry(r.label).or_default();
        match r.split {
            Some(Split::Train) => e.0 += 1,
            Some(Split::Test) => e.1 += 1,
            None => e.2 += 1,
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    /// Exact train counts for some classes, overriding the fraction.
    pub overrides: BTreeMap<ClassLabel, usize>,
    pub seed: u64,
    /// Keep records sharing a group key on the same side.
    pub group_aware: bool,
}

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.27;

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: DEFAULT_TRAIN_FRACTION,
            overrides: BTreeMap::new(),
            seed: 0,
            group_aware: false,
        }
    }
}

impl SplitSpec {
    /// Train counts 84 / 233 / 176 for covid / pneumonia / normal.
    pub fn table1_counts(seed: u64) -> Self {
        let overrides = [
            (ClassLabel::Covid, 84),
            (ClassLabel::Pneumonia, 233),
            (ClassLabel::Normal, 176),
        ];
        Self {
            overrides: overrides.into_iter().collect(),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "train fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// Train count for a class of `n` records.
    pub fn train_count(&self, label: ClassLabel, n: usize) -> Result<usize> {
        match self.overrides.get(&label) {
            Some(&k) if k > n => Err(Error::Validation(format!(
                "override of {k} train {label} records exceeds the {n} available"
            ))),
            Some(&k) => Ok(k),
            // The epsilon keeps exact products such as 0.27·100 from flooring to 26.
            None => Ok((self.train_fraction * n as f64 + 1e-9).floor() as usize),
        }
    }
}

/// Assigns every record to train or test, per class, by a seeded shuffle.
/// Existing split values are overwritten. Output keeps input order.
///
/// In group-aware mode whole groups are taken in shuffled order until the
/// class's train count is reached, so the final count can overshoot by
/// less than one group.
pub fn stratified_split(records: &[ManifestRecord], spec: &SplitSpec) -> Result<Vec<ManifestRecord>> {
    spec.validate()?;
    let mut out = records.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for label in ClassLabel::ALL {
        let idx: Vec<usize> = (0..out.len()).filter(|&i| out[i].label == label).collect();
        let k = spec.train_count(label, idx.len())?;
        // Groups in first-appearance order; ungrouped records are their own group.
        let mut groups: Vec<Vec<usize>> = Vec::new();
        if spec.group_aware {
            let mut by_key: HashMap<&str, usize> = HashMap::new();
            for &i in &idx {
                match out[i].group.as_deref() {
                    Some(g) => {
                        let slot = *by_key.entry(g).or_insert_with(|| {
                            groups.push(Vec::new());
                            groups.len() - 1
                        });
                        groups[slot].push(i);
                    }
                    None => groups.push(vec![i]),
                }
            }
        } else {
            groups = idx.iter().map(|&i| vec![i]).collect();
        }
        groups.shuffle(&mut rng);
        let mut taken = 0;
        for g in groups {
            let split = if taken < k { Split::Train } else { Split::Test };
            if split == Split::Train {
                taken += g.len();
            }
            for i in g {
                out[i].split = Some(split);
            }
        }
    }
    Ok(out)
}

/// Records of one split, in manifest order.
pub fn select_split(records: &[ManifestRecord], split: Split) -> Vec<ManifestRecord> {
    records.iter().filter(|r| r.split == Some(split)).cloned().collect()
}

/// Target size and per-channel normalization applied by [`load_image`].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSpec {
    pub size: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for ImageSpec {
    /// ImageNet statistics, which the pretrained backbone expects.
    fn default() -> Self {
        Self {
            size: INPUT_SIZE,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl ImageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Validation(format!("invalid image spec {self:?}")));
        }
        Ok(())
    }

    /// Inverse of the normalization: back to [0, 1] pixel values.
    pub fn denormalize(&self, t: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (c, h, w) = t.dims3()?;
        let hw = h * w;
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *v = *v * self.std[ch] + self.mean[ch];
        }
        Ok(out)
    }
}

/// Bilinear resize of one `w×h` plane with half-pixel centers and edge
/// clamping (the convention of most image libraries).
pub fn resize_bilinear(src: &[f32], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f32> {
    assert_eq!(src.len(), w * h, "plane size");
    let axis = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f32)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, (x - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = axis(ow, w);
    let ys = axis(oh, h);
    let mut out = Vec::with_capacity(ow * oh);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Grayscale images are replicated to three channels; pixels are scaled
/// to [0, 1], resized and normalized. Output is `3×size×size`.
pub fn image_to_tensor(img: &DynamicImage, spec: &ImageSpec) -> Result<Tensor<f32>> {
    spec.validate()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planes: Vec<Vec<f32>> = if img.color().has_color() {
        let rgb = img.to_rgb32f();
        (0..3).map(|c| rgb.pixels().map(|p| p.0[c]).collect()).collect()
    } else {
        let gray: Vec<f32> = img.to_luma32f().pixels().map(|p| p.0[0]).collect();
        vec![gray.clone(), gray.clone(), gray]
    };
    let s = spec.size;
    let mut data = Vec::with_capacity(INPUT_CHANNELS * s * s);
    for (c, plane) in planes.iter().enumerate() {
        let resized = resize_bilinear(plane, w, h, s, s);
        data.extend(resized.into_iter().map(|v| (v - spec.mean[c]) / spec.std[c]));
    }
    Tensor::new(vec![INPUT_CHANNELS, s, s], data)
}

/// Decodes a PNG or JPEG file into a normalized `3×size×size` tensor.
pub fn load_image(path: impl AsRef<Path>, spec: &ImageSpec) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .with_guessed_format()
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .decode()
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    image_to_tensor(&img, spec)
}

/// Shuffled index batches for one epoch. The shuffle is seeded with
/// `seed ^ epoch`; the last batch may be short.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Validation("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// What a dataset's tensors feed: raw images or precomputed backbone features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    Image,
    Features,
}

/// Indexed samples with class indices.
pub trait Dataset: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labels(&self) -> &[usize];

    fn input_kind(&self) -> InputKind;

    /// Stacks the samples at `indices` into one batch tensor.
    fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>>;
}

/// Images listed in a manifest, decoded on demand (in parallel, order kept).
#[derive(Clone, Debug)]
pub struct ImageDataset {
    records: Vec<ManifestRecord>,
    labels: Vec<usize>,
    spec: ImageSpec,
}

impl ImageDataset {
    pub fn new(records: Vec<ManifestRecord>, task: Task, spec: ImageSpec) -> Result<Self> {
        spec.validate()?;
        let labels = records
            .iter()
            .map(|r| {
                task.index_of(r.label).ok_or_else(|| {
                    Error::Validation(format!(
                        "{} is labelled {} which is not a class of the {}-class task",
                        r.path.display(),
                        r.label,
                        task.num_classes()
                    ))
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { records, labels, spec })
    }

    /// Records of `task`'s classes only.
    pub fn for_task(records: &[ManifestRecord], task: Task, spec: ImageSpec) -> Result<Self> {
        let keep = records
            .iter()
            .filter(|r| task.index_of(r.label).is_some())
            .cloned()
            .collect();
        Self::new(keep, task, spec)
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }
}

impl Dataset for ImageDataset {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn input_kind(&self) -> InputKind {
        InputKind::Image
    }

    fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let items: Vec<Tensor<f32>> = indices
            .par_iter()
            .map(|&i| load_image(&self.records[i].path, &self.spec))
            .collect::<Result<_>>()?;
        Tensor::stack(&items)
    }
}

/// In-memory samples of equal shape.
#[derive(Clone, Debug)]
pub struct TensorDataset {
    items: Vec<Tensor<f32>>,
    labels: Vec<usize>,
    kind: InputKind,
}

impl TensorDataset {
    pub fn new(items: Vec<Tensor<f32>>, labels: Vec<usize>, kind: InputKind) -> Result<Self> {
        if items.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} samples but {} labels",
                items.len(),
                labels.len()
            )));
        }
        if let Some(first) = items.first() {
            if let Some(bad) = items.iter().find(|t| t.shape() != first.shape()) {
                return Err(Error::Shape(format!(
                    "samples differ in shape: {} vs {}",
                    crate::error::fmt_shape(first.shape()),
                    crate::error::fmt_shape(bad.shape())
                )));
            }
        }
        Ok(Self { items, labels, kind })
    }

    pub fn items(&self) -> &[Tensor<f32>] {
        &self.items
    }
}

impl Dataset for TensorDataset {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn input_kind(&self) -> InputKind {
        self.kind
    }

    fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let items: Vec<Tensor<f32>> = indices.iter().map(|&i| self.items[i].clone()).collect();
        Tensor::stack(&items)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    fn records(counts: [usize; 3]) -> Vec<ManifestRecord> {
        let mut out = Vec::new();
        for (label, n) in ClassLabel::ALL.into_iter().zip(counts) {
            for i in 0..n {
                out.push(ManifestRecord::new(format!("{label}/{i}.png"), label));
            }
        }
        out
    }

    #[test]
    fn parse_valid_manifest() {
        let text = "path,label,split,source\na.png,covid,train,x\nb.png,Pneumonia,,y\nc.png,normal,test,\n";
        let r = parse_manifest_str(text, Path::new("/data"), Path::new("m.csv")).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r[0].path, Path::new("/data/a.png"));
        assert_eq!(r[1].label, ClassLabel::Pneumonia);
        assert_eq!(r[1].split, None);
        assert_eq!(r[2].split, Some(Split::Test));
        assert_eq!(r[0].source, "x");
    }

    #[test]
    fn unknown_label_reports_line() {
        let text = "path,label\na.png,covid\nb.png,covidd\n";
        let err = parse_manifest_str(text, Path::new(""), Path::new("m.csv")).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("line 3") && msg.contains("covidd"), "{msg}");
    }

    #[test]
    fn duplicate_path_and_bad_header_rejected() {
        let dup = "path,label\na.png,covid\na.png,normal\n";
        assert!(parse_manifest_str(dup, Path::new(""), Path::new("m")).is_err());
        assert!(parse_manifest_str("path\na.png\n", Path::new(""), Path::new("m")).is_err());
        assert!(parse_manifest_str("path,label,extra\na,covid,1\n", Path::new(""), Path::new("m")).is_err());
    }

    #[test]
    fn manifest_round_trip_with_group() {
        let mut r = records([1, 1, 1]);
        r[0].group = Some("p1".into());
        r[1].split = Some(Split::Train);
        let dir = tempfile::tempdir().unwrap();
        let rec: Vec<_> = r
            .into_iter()
            .map(|mut x| {
                x.path = dir.path().join(&x.path);
                x
            })
            .collect();
        let path = dir.path().join("m.csv");
        write_manifest(&rec, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(
            text.starts_with("path,label,split,source,group\ncovid/0.png,covid,,,p1\n"),
            "{text}"
        );
        assert_eq!(parse_manifest(&path).unwrap(), rec);
    }

    #[test]
    fn table1_class_totals_accepted() {
        let r = records([310, 864, 654]);
        let text = manifest_to_string(&r, Path::new(""));
        let back = parse_manifest_str(&text, Path::new(""), Path::new("m")).unwrap();
        assert_eq!(class_counts(&back), [310, 864, 654]);
    }

    #[test]
    fn table1_split_counts() {
        let r = stratified_split(&records([310, 864, 654]), &SplitSpec::table1_counts(7)).unwrap();
        let c = split_counts(&r);
        assert_eq!(c[&ClassLabel::Covid], (84, 226, 0));
        assert_eq!(c[&ClassLabel::Pneumonia], (233, 631, 0));
        assert_eq!(c[&ClassLabel::Normal], (176, 478, 0));
    }

    #[test]
    fn fraction_floors() {
        let spec = SplitSpec::default();
        assert_eq!(spec.train_count(ClassLabel::Covid, 100).unwrap(), 27);
        assert_eq!(spec.train_count(ClassLabel::Covid, 310).unwrap(), 83);
        assert_eq!(spec.train_count(ClassLabel::Covid, 3).unwrap(), 0);
    }

    #[test]
    fn split_is_seeded() {
        let r = records([100, 0, 0]);
        let spec = SplitSpec {
            seed: 11,
            ..SplitSpec::default()
        };
        let a = stratified_split(&r, &spec).unwrap();
        assert_eq!(a, stratified_split(&r, &spec).unwrap());
        let b = stratified_split(&r, &SplitSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn override_beyond_class_size_rejected() {
        let mut spec = SplitSpec::default();
        spec.overrides.insert(ClassLabel::Covid, 5);
        assert!(matches!(
            stratified_split(&records([4, 0, 0]), &spec),
            Err(Error::Validation(_))
        ));
        assert!(SplitSpec {
            train_fraction: 1.0,
            ..SplitSpec::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn group_aware_keeps_groups_together() {
        let mut r = records([40, 0, 0]);
        for (i, x) in r.iter_mut().enumerate() {
            x.group = Some(format!("p{}", i / 4));
        }
        let spec = SplitSpec {
            group_aware: true,
            seed: 3,
            ..SplitSpec::default()
        };
        let out = stratified_split(&r, &spec).unwrap();
        for chunk in out.chunks(4) {
            assert!(chunk.iter().all(|x| x.split == chunk[0].split));
        }
        // floor(0.27·40) = 10, reached with three groups of four.
        assert_eq!(split_counts(&out)[&ClassLabel::Covid].0, 12);
    }

    #[test]
    fn task_indices() {
        assert_eq!(Task::TwoClass.index_of(ClassLabel::Normal), Some(1));
        assert_eq!(Task::TwoClass.index_of(ClassLabel::Pneumonia), None);
        assert_eq!(Task::ThreeClass.index_of(ClassLabel::Normal), Some(2));
        assert!(Task::from_num_classes(4).is_err());
    }

    #[test]
    fn batches_cover_table1_train_set() {
        let b = batch_order(493, 32, 1, 0).unwrap();
        assert_eq!(b.len(), 16);
        assert!(b[..15].iter().all(|x| x.len() == 32));
        assert_eq!(b[15].len(), 13);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..493).collect::<Vec<_>>());
        assert_eq!(batch_order(5, 1, 1, 0).unwrap().len(), 5);
        assert_eq!(b, batch_order(493, 32, 1, 0).unwrap());
        assert_ne!(b, batch_order(493, 32, 1, 1).unwrap());
        assert!(batch_order(0, 32, 1, 0).is_err());
    }

    /// Independent oracle: separable weights, pixel centers at (o + 0.5)·in/out − 0.5.
    fn oracle_resize(src: &[[f64; 2]; 2], o: usize) -> Vec<f64> {
        let coord = |i: usize| ((i as f64 + 0.5) * 2.0 / o as f64 - 0.5).clamp(0.0, 1.0);
        let mut out = Vec::new();
        for y in 0..o {
            for x in 0..o {
                let (fy, fx) = (coord(y), coord(x));
                out.push(
                    src[0][0] * (1.0 - fy) * (1.0 - fx)
                        + src[0][1] * (1.0 - fy) * fx
                        + src[1][0] * fy * (1.0 - fx)
                        + src[1][1] * fy * fx,
                );
            }
        }
        out
    }

    #[test]
    fn checkerboard_resize_matches_oracle() {
        let got = resize_bilinear(&[1.0, 0.0, 0.0, 1.0], 2, 2, 4, 4);
        let want = oracle_resize(&[[1.0, 0.0], [0.0, 1.0]], 4);
        for (g, w) in got.iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-5, "{got:?} vs {want:?}");
        }
        assert_eq!(got[0], 1.0);
        assert!((got[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn grayscale_replicated_to_three_channels() {
        let img = GrayImage::from_fn(100, 80, |x, y| Luma([((x * 7 + y * 3) % 256) as u8]));
        let spec = ImageSpec {
            size: 16,
            mean: [0.0; 3],
            std: [1.0; 3],
        };
        let t = image_to_tensor(&DynamicImage::ImageLuma8(img), &spec).unwrap();
        assert_eq!(t.shape(), &[3, 16, 16]);
        let d = t.data();
        assert_eq!(&d[..256], &d[256..512]);
        assert_eq!(&d[..256], &d[512..]);
        assert!(d.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn uniform_gray_normalizes_to_zero() {
        let img = RgbImage::from_pixel(30, 20, Rgb([128, 128, 128]));
        let g = 128.0 / 255.0;
        let spec = ImageSpec {
            size: 8,
            mean: [g; 3],
            std: [1.0; 3],
        };
        let t = image_to_tensor(&DynamicImage::ImageRgb8(img), &spec).unwrap();
        assert!(t.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn normalization_inverts() {
        let img = RgbImage::from_fn(9, 7, |x, y| Rgb([(x * 20) as u8, (y * 30) as u8, 200]));
        let spec = ImageSpec {
            size: 5,
            ..ImageSpec::default()
        };
        let t = image_to_tensor(&DynamicImage::ImageRgb8(img.clone()), &spec).unwrap();
        let raw = image_to_tensor(
            &DynamicImage::ImageRgb8(img),
            &ImageSpec {
                size: 5,
                mean: [0.0; 3],
                std: [1.0; 3],
            },
        )
        .unwrap();
        let back = spec.denormalize(&t).unwrap();
        for (a, b) in back.data().iter().zip(raw.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn image_files_load_and_corrupt_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("a.png");
        GrayImage::from_pixel(50, 40, Luma([10])).save(&png).unwrap();
        let t = load_image(&png, &ImageSpec::default()).unwrap();
        assert_eq!(t.shape(), &[3, 224, 224]);

        let bad = dir.path().join("b.png");
        std::fs::write(&bad, b"not an image").unwrap();
        let err = load_image(&bad, &ImageSpec::default()).unwrap_err();
        assert!(matches!(err, Error::Decode { ref path, .. } if path == &bad));
        assert!(matches!(
            load_image(dir.path().join("none.png"), &ImageSpec::default()),
            Err(Error::Decode { .. })
        ));
    }

    #[test]
    fn build_manifest_scans_class_dirs() {
        let dir = tempfile::tempdir().unwrap();
        for (cls, name) in [
            ("covid", "b.png"),
            ("covid", "a.jpg"),
            ("normal", "c.PNG"),
            ("normal", "notes.txt"),
        ] {
            std::fs::create_dir_all(dir.path().join(cls)).unwrap();
            std::fs::write(dir.path().join(cls).join(name), b"").unwrap();
        }
        let r = build_manifest(dir.path()).unwrap();
        let names: Vec<String> = r
            .iter()
            .map(|x| x.path.strip_prefix(dir.path()).unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["covid/a.jpg", "covid/b.png", "normal/c.PNG"]);
        assert_eq!(r[2].label, ClassLabel::Normal);
    }

    proptest::proptest! {
        #[test]
        fn split_partitions_each_class(
            counts in proptest::array::uniform3(0usize..60),
            fraction in 0.05f64..0.95,
            seed in proptest::num::u64::ANY,
        ) {
            let r = records(counts);
            let spec = SplitSpec { train_fraction: fraction, seed, ..SplitSpec::default() };
            let out = stratified_split(&r, &spec).unwrap();
            proptest::prop_assert_eq!(out.len(), r.len());
            for (label, n) in ClassLabel::ALL.into_iter().zip(counts) {
                let (train, test, none) = split_counts(&out).get(&label).copied().unwrap_or_default();
                proptest::prop_assert_eq!(none, 0);
                proptest::prop_assert_eq!(train + test, n);
                proptest::prop_assert_eq!(train, spec.train_count(label, n).unwrap());
            }
        }
    }
}
