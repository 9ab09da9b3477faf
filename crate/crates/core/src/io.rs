//! On-disk tensor container and dataset manifests.
//!
//! Tensor container layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "JRNT"
//! 4       4     format version (u32) = 1
//! 8       4     ndim (u32) = 3
//! 12      4     reserved (u32) = 0
//! 16      12    dims C, H, W (u32 each)
//! 28      4·CHW values (IEEE-754 binary32), channel-major, then row, column
//! ```
//!
//! Label maps and masks reuse the container with `C = 1` and integral values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::losses::{GroundTruth, ValidMask};
use crate::model::PredictionPair;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"JRNT";
pub const TENSOR_VERSION: u32 = 1;
pub const TENSOR_HEADER_LEN: usize = 16;
const DIMS_LEN: usize = 12;

/// Reads little-endian fields from a byte slice, reporting offsets on failure.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.bytes.len() as u64,
                format!("truncated: {what} needs {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len =
            n.checked_mul(4).ok_or_else(|| Error::format(self.offset(), format!("{what}: element count overflows")))?;
        let raw = self.take(len, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.offset(),
                format!("{} trailing bytes after the last field", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(TENSOR_HEADER_LEN + DIMS_LEN + 4 * t.len());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&3u32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for d in [t.channels(), t.height(), t.width()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"JRNT\"")));
    }
    let version = r.u32("version")?;
    if version != TENSOR_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let ndim = r.u32("ndim")?;
    if ndim != 3 {
        return Err(Error::format(8, format!("expected 3 dimensions, got {ndim}")));
    }
    let reserved = r.u32("reserved")?;
    if reserved != 0 {
        return Err(Error::format(12, format!("reserved field must be 0, got {reserved}")));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = r.offset();
        *d = r.u32("dimension")? as usize;
        if *d == 0 {
            return Err(Error::format(at, format!("dimension {i} is zero")));
        }
    }
    let count = dims[0]
        .checked_mul(dims[1])
        .and_then(|n| n.checked_mul(dims[2]))
        .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
        .ok_or_else(|| {
            Error::format(
                (TENSOR_HEADER_LEN + DIMS_LEN) as u64,
                format!("dimensions {dims:?} exceed the {}-byte file", bytes.len()),
            )
        })?;
    let data = r.f32s(count, "tensor data")?;
    r.finish()?;
    Tensor::new(dims[0], dims[1], dims[2], data)
}

pub fn write_tensor(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

/// One manifest entry; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub input_depth: PathBuf,
    pub input_sem: PathBuf,
    pub gt_depth: PathBuf,
    pub gt_labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<ManifestEntry>,
}

fn labels_to_tensor(labels: &[u32], h: usize, w: usize) -> Tensor<f32> {
    Tensor::new(1, h, w, labels.iter().map(|&l| l as f32).collect()).expect("label map matches size")
}

fn tensor_to_labels(t: &Tensor<f32>) -> std::result::Result<Vec<u32>, String> {
    if t.channels() != 1 {
        return Err(format!("label map must have 1 channel, got {}", t.channels()));
    }
    t.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f32 {
                Ok(v as u32)
            } else {
                Err(format!("label value {v} at pixel {i} is not a non-negative integer"))
            }
        })
        .collect()
}

fn tensor_to_mask(t: &Tensor<f32>) -> std::result::Result<ValidMask, String> {
    if t.channels() != 1 {
        return Err(format!("mask must have 1 channel, got {}", t.channels()));
    }
    let bits = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            v => Err(format!("mask value {v} at pixel {i} is neither 0 nor 1")),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    ValidMask::new(t.height(), t.width(), bits).map_err(|e| e.to_string())
}

fn load_entry(base: &Path, e: &ManifestEntry) -> std::result::Result<Sample<f32>, String> {
    let read = |p: &Path| read_tensor(base.join(p)).map_err(|err| err.to_string());
    let input_depth = read(&e.input_depth)?;
    let input_sem = read(&e.input_sem)?;
    let gt_depth = read(&e.gt_depth)?;
    let labels_t = read(&e.gt_labels)?;
    let (h, w) = (gt_depth.height(), gt_depth.width());
    for (name, t) in [("input depth", &input_depth), ("input semantics", &input_sem), ("labels", &labels_t)] {
        if (t.height(), t.width()) != (h, w) {
            return Err(format!("{name} is {}x{}, ground-truth depth is {h}x{w}", t.height(), t.width()));
        }
    }
    let mask = match &e.mask {
        Some(p) => tensor_to_mask(&read(p)?)?,
        None => ValidMask::all_valid(h, w),
    };
    if (mask.height(), mask.width()) != (h, w) {
        return Err(format!("mask is {}x{}, ground-truth depth is {h}x{w}", mask.height(), mask.width()));
    }
    if mask.count() == 0 {
        return Err("mask has no valid pixels".into());
    }
    if input_sem.channels() < 2 {
        return Err(format!("input semantics need at least 2 classes, got {}", input_sem.channels()));
    }
    let labels = tensor_to_labels(&labels_t)?;
    let gt = GroundTruth::new(gt_depth, labels, mask).map_err(|e| e.to_string())?;
    let input = PredictionPair { depth: input_depth, semantics: input_sem };
    Sample::new(e.id.clone(), input, gt).map_err(|e| e.to_string())
}

/// Loads and validates every sample listed in a JSON manifest, in order.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Vec<Sample<f32>>> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Load { sample: "<manifest>".into(), message: format!("{}: {e}", path.display()) })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let samples: Vec<Sample<f32>> = manifest
        .samples
        .iter()
        .map(|e| load_entry(base, e).map_err(|message| Error::Load { sample: e.id.clone(), message }))
        .collect::<Result<_>>()?;
    if let Some(first) = samples.first() {
        let k = first.num_classes();
        if let Some(bad) = samples.iter().find(|s| s.num_classes() != k) {
            return Err(Error::Load {
                sample: bad.id.clone(),
                message: format!("has {} classes, earlier samples have {k}", bad.num_classes()),
            });
        }
    }
    Ok(samples)
}

/// Writes each sample into `dir/<id>/` and a `manifest.json` listing them.
/// Returns the manifest path.
pub fn write_dataset(samples: &[Sample<f32>], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let sub = PathBuf::from(&s.id);
        let abs = dir.join(&sub);
        fs::create_dir_all(&abs).map_err(|e| Error::io(&abs, e))?;
        let (h, w) = (s.gt.height(), s.gt.width());
        let files = [
            ("input_depth.jrnt", s.input.depth.clone()),
            ("input_sem.jrnt", s.input.semantics.clone()),
            ("gt_depth.jrnt", s.gt.depth().clone()),
            ("gt_labels.jrnt", labels_to_tensor(s.gt.labels(), h, w)),
        ];
        for (name, t) in &files {
            write_tensor(t, abs.join(name))?;
        }
        let mask = if s.gt.mask().count() == h * w {
            None
        } else {
            let t = Tensor::new(1, h, w, s.gt.mask().bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?;
            write_tensor(&t, abs.join("mask.jrnt"))?;
            Some(sub.join("mask.jrnt"))
        };
        entries.push(ManifestEntry {
            id: s.id.clone(),
            input_depth: sub.join("input_depth.jrnt"),
            input_sem: sub.join("input_sem.jrnt"),
            gt_depth: sub.join("gt_depth.jrnt"),
            gt_labels: sub.join("gt_labels.jrnt"),
            mask,
        });
    }
    let manifest_path = dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&Manifest { samples: entries }).expect("manifest serializes");
    json.push('\n');
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_size_follows_layout() {
        let t = Tensor::from_fn(2, 3, 4, |c, y, x| (c + y + x) as f32);
        assert_eq!(encode_tensor(&t).len(), 16 + 12 + 96);
    }

    #[test]
    fn wrong_magic_rejected() {
        let mut b = encode_tensor(&Tensor::full(1, 1, 1, 1.0));
        b[0] = b'X';
        assert!(matches!(decode_tensor(&b), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let b = encode_tensor(&Tensor::full(2, 2, 2, 1.0));
        match decode_tensor(&b[..b.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, b.len() - 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(decode_tensor(&b[..10]), Err(Error::Format { .. })));
    }

    #[test]
    fn huge_dimensions_rejected() {
        let mut b = encode_tensor(&Tensor::full(1, 1, 1, 1.0));
        b[16..28].copy_from_slice(&[0xff; 12]);
        assert!(matches!(decode_tensor(&b), Err(Error::Format { .. })));
        let mut b = encode_tensor(&Tensor::full(1, 1, 1, 1.0));
        b[20..24].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_tensor(&b), Err(Error::Format { offset: 20, .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut b = encode_tensor(&Tensor::full(1, 1, 1, 1.0));
        b.push(0);
        assert!(matches!(decode_tensor(&b), Err(Error::Format { offset: 32, .. })));
    }

    #[test]
    fn negative_zero_survives() {
        let t = Tensor::new(1, 1, 3, vec![-0.0f32, f32::MIN_POSITIVE, -f32::MAX]).unwrap();
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn label_and_mask_validation() {
        let t = Tensor::new(1, 1, 2, vec![1.0, 2.5]).unwrap();
        assert!(tensor_to_labels(&t).is_err());
        let t = Tensor::new(1, 1, 2, vec![1.0, 0.5]).unwrap();
        assert!(tensor_to_mask(&t).is_err());
        let t = Tensor::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(tensor_to_mask(&t).unwrap().count(), 1);
    }
}
