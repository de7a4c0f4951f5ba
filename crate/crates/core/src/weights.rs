//! CCW weight archives: a little-endian named-tensor container.
//!
//! ```text
//! "CCBW" | version u32 | count u32 | count × entry
//! entry: name_len u16 | name (UTF-8) | dtype u8 (0 = f32) | ndim u8 | ndim × dim u32 | f32 payload
//! ```
//!
//! Everything is little-endian and the payload is row-major.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use crate::error::{fmt_shape, Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"CCBW";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
/// Bytes before the first entry.
pub const HEADER_LEN: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor<f32>,
}

/// Ordered, uniquely named f32 tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightArchive {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl WeightArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry; names must be unique and fit the on-disk field widths.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Validation(format!(
                "entry name of {} bytes exceeds the 65535-byte limit",
                name.len()
            )));
        }
        if tensor.ndim() > u8::MAX as usize || tensor.shape().iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Validation(format!(
                "shape {} of {name} cannot be stored",
                fmt_shape(tensor.shape())
            )));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate entry name {name:?}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, tensor });
        Ok(())
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    /// Every parameter and batch-norm buffer of `model`, in layer order.
    pub fn from_model<T: Scalar>(model: &Model<T>) -> Result<Self> {
        let mut archive = Self::new();
        for (name, t) in model.named_tensors() {
            archive.push(name, t.cast())?;
        }
        Ok(archive)
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + self
                .entries
                .iter()
                .map(|e| 2 + e.name.len() + 2 + 4 * e.tensor.ndim() + 4 * e.tensor.len())
                .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(e.tensor.ndim() as u8);
            for &d in e.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses an archive; `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                path: origin.to_string(),
                msg: format!("bad magic {magic:?}, expected \"CCBW\""),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                path: origin.to_string(),
                msg: format!("unsupported version {version}, expected {VERSION}"),
            });
        }
        let count = r.u32("entry count")?;
        let mut archive = Self::new();
        for i in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Format {
                    path: origin.to_string(),
                    msg: format!("entry {i} name is not UTF-8"),
                })?
                .to_string();
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format {
                    path: origin.to_string(),
                    msg: format!("entry {name:?} has unsupported dtype code {dtype}"),
                });
            }
            let ndim = r.u8("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dimension")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| r.corrupt(format!("entry {name:?} shape overflows")))?;
            let payload = r.take(n, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Format {
                path: origin.to_string(),
                msg: format!("entry {name:?}: {e}"),
            })?;
            if archive.index.contains_key(&name) {
                return Err(Error::Validation(format!("duplicate entry name {name:?} in {origin}")));
            }
            archive.push(name, tensor)?;
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt(format!("{} trailing bytes after the last entry", bytes.len() - r.pos)));
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, msg: String) -> Error {
        Error::Corrupt {
            path: self.origin.to_string(),
            msg,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.corrupt(format!(
                "truncated: {what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Archive entry name → model tensor name. Names without an explicit
/// mapping map to themselves.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NameMap {
    renames: BTreeMap<String, String>,
}

impl NameMap {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, archive_name: impl Into<String>, model_name: impl Into<String>) {
        self.renames.insert(archive_name.into(), model_name.into());
    }

    /// Reads `archive_name model_name` pairs, one per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::identity();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [from, to] = parts[..] else {
                return Err(Error::Validation(format!(
                    "name map line {}: expected two names, got {:?}",
                    i + 1,
                    line
                )));
            };
            map.insert(from, to);
        }
        Ok(map)
    }

    pub fn target<'a>(&'a self, archive_name: &'a str) -> &'a str {
        self.renames.get(archive_name).map_or(archive_name, String::as_str)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strictness {
    /// Every model parameter and buffer must be supplied and every archive
    /// entry must be used.
    Strict,
    /// Exactly the pretrained backbone tensors are loaded; other entries
    /// are reported as skipped and the rest of the model is left untouched.
    BackboneOnly,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImportReport {
    /// Model tensor names and shapes, in archive order.
    pub loaded: Vec<(String, Vec<usize>)>,
    /// Archive entry names that were not applied.
    pub skipped: Vec<String>,
}

impl fmt::Display for ImportReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, shape) in &self.loaded {
            writeln!(f, "LOADED {name} {}", fmt_shape(shape))?;
        }
        for name in &self.skipped {
            writeln!(f, "SKIPPED {name}")?;
        }
        Ok(())
    }
}

/// Copies archive entries into `model`. Every check runs before any tensor
/// is written, so a failed import leaves the model unchanged.
pub fn apply_weights<T: Scalar>(
    model: &mut Model<T>,
    archive: &WeightArchive,
    map: &NameMap,
    strictness: Strictness,
) -> Result<ImportReport> {
    let slots = model.tensor_slots();
    let required: Vec<&str> = slots
        .iter()
        .filter(|s| match strictness {
            Strictness::Strict => true,
            Strictness::BackboneOnly => s.pretrained,
        })
        .map(|s| s.name.as_str())
        .collect();
    let required_set: HashSet<&str> = required.iter().copied().collect();
    let shapes: HashMap<&str, &[usize]> = slots.iter().map(|s| (s.name.as_str(), s.shape.as_slice())).collect();

    let mut report = ImportReport::default();
    let mut plan = Vec::new();
    let mut seen: HashMap<&str, &str> = HashMap::new();
    for e in archive.entries() {
        let target = map.target(&e.name);
        if !required_set.contains(target) {
            if strictness == Strictness::Strict {
                return Err(Error::Validation(format!(
                    "archive entry {:?} does not match any model tensor",
                    e.name
                )));
            }
            report.skipped.push(e.name.clone());
            continue;
        }
        if let Some(prev) = seen.insert(target, &e.name) {
            return Err(Error::Validation(format!(
                "archive entries {prev:?} and {:?} both map to {target}",
                e.name
            )));
        }
        let expected = shapes[target];
        if e.tensor.shape() != expected {
            return Err(Error::ShapeMismatch {
                name: target.to_string(),
                expected: fmt_shape(expected),
                found: fmt_shape(e.tensor.shape()),
            });
        }
        plan.push((target, &e.tensor));
    }
    let missing: Vec<&str> = required.iter().copied().filter(|n| !seen.contains_key(n)).collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "{} required tensor(s) missing from the archive: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    for (target, src) in plan {
        let dst = model.tensor_mut(target).expect("target validated against tensor slots");
        *dst = src.cast();
        report.loaded.push((target.to_string(), src.shape().to_vec()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::reduced_spec;
    use crate::model::build_model;

    fn sample() -> WeightArchive {
        let mut a = WeightArchive::new();
        a.push(
            "t",
            Tensor::new(vec![2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 3e38]).unwrap(),
        )
        .unwrap();
        a.push("s", Tensor::new(vec![], vec![7.0]).unwrap()).unwrap();
        a
    }

    #[test]
    fn empty_archive_is_header_only() {
        let b = WeightArchive::new().to_bytes();
        assert_eq!(b.len(), 12);
        assert_eq!(&b[..4], b"CCBW");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..], &[0, 0, 0, 0]);
    }

    #[test]
    fn single_2x2_entry_size() {
        let mut a = WeightArchive::new();
        a.push("t", Tensor::<f32>::zeros(&[2, 2])).unwrap();
        let b = a.to_bytes();
        // header + (name_len + "t") + dtype + ndim + 2 dims + 4 values
        let expected = 12 + (2 + 1) + 1 + 1 + 2 * 4 + 4 * 4;
        assert_eq!(expected, 41);
        assert_eq!(b.len(), expected);
        assert_eq!(a.encoded_len(), expected);
        // name length, name, dtype, ndim, dims
        assert_eq!(&b[12..23], &[1, 0, b't', 0, 2, 2, 0, 0, 0, 2, 0]);
    }

    #[test]
    fn round_trip_bytes_and_file() {
        let a = sample();
        let b = a.to_bytes();
        let back = WeightArchive::from_bytes(&b, "mem").unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_bytes(), b);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ccw");
        a.save(&path).unwrap();
        assert_eq!(WeightArchive::load(&path).unwrap(), a);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut b = sample().to_bytes();
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(WeightArchive::from_bytes(&b, "x"), Err(Error::Format { .. })));
    }

    #[test]
    fn unknown_version_and_dtype_are_format_errors() {
        let mut b = sample().to_bytes();
        b[4] = 2;
        assert!(matches!(WeightArchive::from_bytes(&b, "x"), Err(Error::Format { .. })));
        let mut b = sample().to_bytes();
        b[12 + 2 + 1] = 1;
        assert!(matches!(WeightArchive::from_bytes(&b, "x"), Err(Error::Format { .. })));
    }

    #[test]
    fn every_truncation_is_corrupt() {
        let b = sample().to_bytes();
        for cut in 4..b.len() {
            let err = WeightArchive::from_bytes(&b[..cut], "x").unwrap_err();
            assert!(matches!(err, Error::Corrupt { .. }), "cut {cut}: {err}");
        }
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(
            WeightArchive::from_bytes(&long, "x"),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut a = WeightArchive::new();
        a.push("t", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(a.push("t", Tensor::zeros(&[1])), Err(Error::Validation(_))));

        // Hand-assembled file with the same name twice.
        let mut b = a.to_bytes();
        let entry = b[12..].to_vec();
        b[8] = 2;
        b.extend_from_slice(&entry);
        assert!(matches!(WeightArchive::from_bytes(&b, "x"), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            WeightArchive::load("/nonexistent/w.ccw"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn name_map_parse() {
        let m = NameMap::parse("# comment\nvgg.0.w backbone.conv1_1.weight\n\n").unwrap();
        assert_eq!(m.target("vgg.0.w"), "backbone.conv1_1.weight");
        assert_eq!(m.target("other"), "other");
        assert!(NameMap::parse("a b c").is_err());
    }

    fn backbone_archive(model: &Model<f32>, value: f32) -> WeightArchive {
        let mut a = WeightArchive::new();
        for s in model.tensor_slots().into_iter().filter(|s| s.pretrained) {
            a.push(s.name, Tensor::full(&s.shape, value)).unwrap();
        }
        a
    }

    #[test]
    fn backbone_only_loads_26_and_leaves_head() {
        let mut model = build_model::<f32>(&reduced_spec(), 1).unwrap();
        let before = WeightArchive::from_model(&model).unwrap();
        let mut a = backbone_archive(&model, 0.01);
        a.push("fc2.weight", Tensor::zeros(&[1])).unwrap();
        let report = apply_weights(&mut model, &a, &NameMap::identity(), Strictness::BackboneOnly).unwrap();
        assert_eq!(report.loaded.len(), 26);
        assert_eq!(report.skipped, vec!["fc2.weight".to_string()]);
        for e in before.entries().iter().filter(|e| !e.name.starts_with("backbone.")) {
            assert_eq!(model.tensor(&e.name).unwrap(), &e.tensor, "{}", e.name);
        }
        assert!(model
            .tensor("backbone.conv1_1.weight")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.01));
        let text = report.to_string();
        assert!(text.starts_with("LOADED backbone.conv1_1.weight 8x3x3x3\n"));
        assert!(text.ends_with("SKIPPED fc2.weight\n"));
    }

    #[test]
    fn missing_required_entry_is_validation_error() {
        let mut model = build_model::<f32>(&reduced_spec(), 1).unwrap();
        let full = backbone_archive(&model, 0.5);
        let mut a = WeightArchive::new();
        for e in full.entries().iter().filter(|e| e.name != "backbone.conv5_3.bias") {
            a.push(e.name.clone(), e.tensor.clone()).unwrap();
        }
        let before = WeightArchive::from_model(&model).unwrap();
        let err = apply_weights(&mut model, &a, &NameMap::identity(), Strictness::BackboneOnly).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("backbone.conv5_3.bias")));
        assert_eq!(WeightArchive::from_model(&model).unwrap(), before);
    }

    #[test]
    fn wrong_shape_names_expected() {
        let mut model = build_model::<f32>(&crate::ModelSpec::new(3).unwrap(), 1).unwrap();
        let mut a = WeightArchive::new();
        a.push("backbone.conv1_1.weight", Tensor::zeros(&[64, 3, 5, 5]))
            .unwrap();
        let err = apply_weights(&mut model, &a, &NameMap::identity(), Strictness::BackboneOnly).unwrap_err();
        match err {
            Error::ShapeMismatch { name, expected, found } => {
                assert_eq!(name, "backbone.conv1_1.weight");
                assert_eq!(expected, "64x3x3x3");
                assert_eq!(found, "64x3x5x5");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn strict_round_trip_of_full_checkpoint() {
        let src = build_model::<f32>(&reduced_spec(), 2).unwrap();
        let ckpt = WeightArchive::from_model(&src).unwrap();
        let mut dst = build_model::<f32>(&reduced_spec(), 3).unwrap();
        let report = apply_weights(&mut dst, &ckpt, &NameMap::identity(), Strictness::Strict).unwrap();
        assert!(report.skipped.is_empty());
        assert_eq!(report.loaded.len(), src.tensor_slots().len());
        assert_eq!(WeightArchive::from_model(&dst).unwrap(), ckpt);
        // Loading again changes nothing.
        apply_weights(&mut dst, &ckpt, &NameMap::identity(), Strictness::Strict).unwrap();
        assert_eq!(WeightArchive::from_model(&dst).unwrap(), ckpt);

        let mut extra = ckpt.clone();
        extra.push("unknown", Tensor::zeros(&[1])).unwrap();
        assert!(apply_weights(&mut dst, &extra, &NameMap::identity(), Strictness::Strict).is_err());
    }

    #[test]
    fn renamed_entries_follow_the_map() {
        let mut model = build_model::<f32>(&reduced_spec(), 1).unwrap();
        let src = backbone_archive(&model, 0.25);
        let mut a = WeightArchive::new();
        let mut map = NameMap::identity();
        for (i, e) in src.entries().iter().enumerate() {
            a.push(format!("src{i}"), e.tensor.clone()).unwrap();
            map.insert(format!("src{i}"), e.name.clone());
        }
        let report = apply_weights(&mut model, &a, &map, Strictness::BackboneOnly).unwrap();
        assert_eq!(report.loaded.len(), 26);
    }

    proptest::proptest! {
        #[test]
        fn random_archives_round_trip(
            tensors in proptest::collection::vec(
                (proptest::collection::vec(1usize..5, 0..4), proptest::num::u32::ANY),
                0..6,
            )
        ) {
            let mut a = WeightArchive::new();
            for (i, (shape, bits)) in tensors.into_iter().enumerate() {
                let mut s = bits;
                let t = Tensor::from_fn(&shape, |_| {
                    s = s.wrapping_mul(747796405).wrapping_add(2891336453);
                    f32::from_bits(s)
                });
                a.push(format!("e{i}.ü"), t).unwrap();
            }
            let b = a.to_bytes();
            proptest::prop_assert_eq!(b.len(), a.encoded_len());
            let back = WeightArchive::from_bytes(&b, "p").unwrap();
            proptest::prop_assert_eq!(back.to_bytes(), b);
        }
    }
}
