//! Grayscale volumes and aligned label volumes on disk.
//!
//! A volume named `scan` is stored as two files: `scan.vol.json`, a JSON
//! header `{width, height, depth, spacing, dtype}`, and `scan.vol.raw`, the
//! voxels as little-endian `int16` with x varying fastest, then y, then z.
//! Label volumes use `scan.lab.json` / `scan.lab.raw` with `uint8` voxels and
//! an additional `class_names` list in the header.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Lowest intensity of the fixed normalization window.
pub const INTENSITY_MIN: i16 = -1024;
/// Highest intensity of the fixed normalization window.
pub const INTENSITY_MAX: i16 = 3071;

/// Default class names; class id `i` is `DEFAULT_CLASS_NAMES[i - 1]`.
pub const DEFAULT_CLASS_NAMES: [&str; 3] =
    ["normal parenchyma", "reticular pattern", "non-pulmonary tissue"];

pub const UNLABELED: u8 = 0;
pub const CLASS_NORMAL: u8 = 1;
pub const CLASS_RETICULAR: u8 = 2;
pub const CLASS_NON_PULMONARY: u8 = 3;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("dimension mismatch: expected {expected}, found {actual}")]
    DimensionMismatch { expected: String, actual: String },
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("label value {value} exceeds class count {classes}")]
    BadClassId { value: u8, classes: usize },
    #[error("slice {index} out of range for depth {depth}")]
    SliceOutOfRange { index: usize, depth: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Extents of a volume: width (x), height (y), depth (slices).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
}

impl Dims {
    pub fn new(width: usize, height: usize, depth: usize) -> Self {
        Self { width, height, depth }
    }

    pub fn slice_len(&self) -> usize {
        self.width * self.height
    }

    pub fn voxel_count(&self) -> usize {
        self.width * self.height * self.depth
    }

    fn validate(&self) -> Result<(), VolumeError> {
        if self.width == 0 || self.height == 0 || self.depth == 0 {
            return Err(VolumeError::BadHeader(format!(
                "extents must be positive, got {}x{}x{}",
                self.width, self.height, self.depth
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.depth)
    }
}

/// Maps a raw intensity to the unit interval over `[-1024, 3071]`.
#[inline]
pub fn normalize_intensity<T: Scalar>(v: i16) -> T {
    let clamped = v.clamp(INTENSITY_MIN, INTENSITY_MAX) as f64;
    T::lit((clamped - INTENSITY_MIN as f64) / (INTENSITY_MAX as f64 - INTENSITY_MIN as f64))
}

/// A grayscale scan. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    id: String,
    dims: Dims,
    spacing: [f64; 3],
    voxels: Vec<i16>,
}

impl Volume {
    pub fn new(
        id: impl Into<String>,
        dims: Dims,
        spacing: [f64; 3],
        voxels: Vec<i16>,
    ) -> Result<Self, VolumeError> {
        dims.validate()?;
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::BadHeader(format!("spacing must be positive, got {spacing:?}")));
        }
        if voxels.len() != dims.voxel_count() {
            return Err(VolumeError::DimensionMismatch {
                expected: format!("{} voxels", dims.voxel_count()),
                actual: format!("{} voxels", voxels.len()),
            });
        }
        Ok(Self { id: id.into(), dims, spacing, voxels })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    /// Borrowed plane `k`. Use [`Volume::get_slice`] for an owned copy.
    pub fn plane(&self, k: usize) -> Result<&[i16], VolumeError> {
        self.check_slice(k)?;
        let n = self.dims.slice_len();
        Ok(&self.voxels[k * n..(k + 1) * n])
    }

    pub fn get_slice(&self, k: usize) -> Result<SliceView, VolumeError> {
        Ok(SliceView {
            volume_id: self.id.clone(),
            index: k,
            width: self.dims.width,
            height: self.dims.height,
            pixels: self.plane(k)?.to_vec(),
        })
    }

    /// Plane `k` mapped through [`normalize_intensity`].
    pub fn normalized_slice<T: Scalar>(&self, k: usize) -> Result<Vec<T>, VolumeError> {
        Ok(self.plane(k)?.iter().map(|&v| normalize_intensity(v)).collect())
    }

    fn check_slice(&self, k: usize) -> Result<(), VolumeError> {
        if k >= self.dims.depth {
            return Err(VolumeError::SliceOutOfRange { index: k, depth: self.dims.depth });
        }
        Ok(())
    }
}

/// Owned snapshot of one plane of a volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceView {
    pub volume_id: String,
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<i16>,
}

/// Per-voxel class ids aligned with a [`Volume`]. `0` means unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims,
    labels: Vec<u8>,
    class_names: Vec<String>,
}

impl LabelMap {
    /// All-unlabeled map with the default three classes.
    pub fn empty(dims: Dims) -> Self {
        Self::empty_with_classes(dims, default_class_names())
    }

    pub fn empty_with_classes(dims: Dims, class_names: Vec<String>) -> Self {
        Self { dims, labels: vec![UNLABELED; dims.voxel_count()], class_names }
    }

    pub fn from_labels(
        dims: Dims,
        labels: Vec<u8>,
        class_names: Vec<String>,
    ) -> Result<Self, VolumeError> {
        dims.validate()?;
        if labels.len() != dims.voxel_count() {
            return Err(VolumeError::DimensionMismatch {
                expected: format!("{} labels", dims.voxel_count()),
                actual: format!("{} labels", labels.len()),
            });
        }
        if class_names.is_empty() || class_names.len() > u8::MAX as usize {
            return Err(VolumeError::BadHeader(format!(
                "class count {} out of range",
                class_names.len()
            )));
        }
        if let Some(&value) = labels.iter().find(|&&v| v as usize > class_names.len()) {
            return Err(VolumeError::BadClassId { value, classes: class_names.len() });
        }
        Ok(Self { dims, labels, class_names })
    }

    /// Empty map paired with `volume`.
    pub fn for_volume(volume: &Volume) -> Self {
        Self::empty(volume.dims())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn slice(&self, k: usize) -> Result<&[u8], VolumeError> {
        if k >= self.dims.depth {
            return Err(VolumeError::SliceOutOfRange { index: k, depth: self.dims.depth });
        }
        let n = self.dims.slice_len();
        Ok(&self.labels[k * n..(k + 1) * n])
    }

    pub fn slice_mut(&mut self, k: usize) -> Result<&mut [u8], VolumeError> {
        if k >= self.dims.depth {
            return Err(VolumeError::SliceOutOfRange { index: k, depth: self.dims.depth });
        }
        let n = self.dims.slice_len();
        Ok(&mut self.labels[k * n..(k + 1) * n])
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v != UNLABELED).count()
    }

    /// Slices containing at least one labeled voxel.
    pub fn labeled_slices(&self) -> Vec<usize> {
        let n = self.dims.slice_len();
        self.labels
            .chunks(n)
            .enumerate()
            .filter(|(_, s)| s.iter().any(|&v| v != UNLABELED))
            .map(|(k, _)| k)
            .collect()
    }
}

pub fn default_class_names() -> Vec<String> {
    DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Fails unless `labels` has exactly the extents of `volume`.
pub fn check_pair(volume: &Volume, labels: &LabelMap) -> Result<(), VolumeError> {
    if volume.dims() != labels.dims() {
        return Err(VolumeError::DimensionMismatch {
            expected: volume.dims().to_string(),
            actual: labels.dims().to_string(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    width: usize,
    height: usize,
    depth: usize,
    spacing: [f64; 3],
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
}

impl Header {
    fn dims(&self) -> Dims {
        Dims::new(self.width, self.height, self.depth)
    }
}

const VOL_HEADER: &str = ".vol.json";
const VOL_RAW: &str = ".vol.raw";
const LAB_HEADER: &str = ".lab.json";
const LAB_RAW: &str = ".lab.raw";

/// Resolves `path` (either the header file or a bare `<dir>/<name>` stem)
/// to the header/raw file pair with the given suffixes.
fn file_pair(path: &Path, header_suffix: &str, raw_suffix: &str) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s.strip_suffix(header_suffix).or_else(|| s.strip_suffix(raw_suffix)).unwrap_or(&s);
    (PathBuf::from(format!("{stem}{header_suffix}")), PathBuf::from(format!("{stem}{raw_suffix}")))
}

fn stem_name(header: &Path, suffix: &str) -> String {
    let name = header.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(suffix).unwrap_or(&name).to_string()
}

fn read_existing(path: &Path) -> Result<Vec<u8>, VolumeError> {
    match fs::read(path) {
        Ok(bytes) => Ok(bytes),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Err(VolumeError::MissingFile(path.into())),
        Err(e) => Err(e.into()),
    }
}

fn read_header(path: &Path, dtype: &str) -> Result<Header, VolumeError> {
    let text = read_existing(path)?;
    let header: Header =
        serde_json::from_slice(&text).map_err(|e| VolumeError::BadHeader(e.to_string()))?;
    if header.dtype != dtype {
        return Err(VolumeError::BadHeader(format!(
            "dtype {:?}, expected {dtype:?}",
            header.dtype
        )));
    }
    header.dims().validate()?;
    Ok(header)
}

fn write_header(path: &Path, header: &Header) -> Result<(), VolumeError> {
    let text = serde_json::to_string_pretty(header).map_err(|e| VolumeError::BadHeader(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

/// Loads `<name>.vol.json` + `<name>.vol.raw`. The volume id is `<name>`.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
    let (header_path, raw_path) = file_pair(path.as_ref(), VOL_HEADER, VOL_RAW);
    let header = read_header(&header_path, "int16")?;
    let raw = read_existing(&raw_path)?;
    let dims = header.dims();
    if raw.len() != 2 * dims.voxel_count() {
        return Err(VolumeError::DimensionMismatch {
            expected: format!("{} bytes", 2 * dims.voxel_count()),
            actual: format!("{} bytes", raw.len()),
        });
    }
    let voxels = raw.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
    Volume::new(stem_name(&header_path, VOL_HEADER), dims, header.spacing, voxels)
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let (header_path, raw_path) = file_pair(path.as_ref(), VOL_HEADER, VOL_RAW);
    let d = volume.dims();
    write_header(
        &header_path,
        &Header {
            width: d.width,
            height: d.height,
            depth: d.depth,
            spacing: volume.spacing(),
            dtype: "int16".into(),
            class_names: None,
        },
    )?;
    let raw: Vec<u8> = volume.voxels().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(raw_path, raw)?;
    Ok(())
}

/// Loads `<name>.lab.json` + `<name>.lab.raw`, rejecting ids above the class count.
pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap, VolumeError> {
    let (header_path, raw_path) = file_pair(path.as_ref(), LAB_HEADER, LAB_RAW);
    let header = read_header(&header_path, "uint8")?;
    let raw = read_existing(&raw_path)?;
    let dims = header.dims();
    if raw.len() != dims.voxel_count() {
        return Err(VolumeError::DimensionMismatch {
            expected: format!("{} bytes", dims.voxel_count()),
            actual: format!("{} bytes", raw.len()),
        });
    }
    let names = header.class_names.unwrap_or_else(default_class_names);
    LabelMap::from_labels(dims, raw, names)
}

/// Writes a label map. The spacing field is informational and written as 1 mm.
pub fn save_label_map(map: &LabelMap, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    save_label_map_with_spacing(map, [1.0; 3], path)
}

pub fn save_label_map_with_spacing(
    map: &LabelMap,
    spacing: [f64; 3],
    path: impl AsRef<Path>,
) -> Result<(), VolumeError> {
    let (header_path, raw_path) = file_pair(path.as_ref(), LAB_HEADER, LAB_RAW);
    let d = map.dims();
    write_header(
        &header_path,
        &Header {
            width: d.width,
            height: d.height,
            depth: d.depth,
            spacing,
            dtype: "uint8".into(),
            class_names: Some(map.class_names().to_vec()),
        },
    )?;
    fs::write(raw_path, map.labels())?;
    Ok(())
}
