//! On-disk dataset format.
//!
//! A dataset directory holds one PNG per record id and channel plus a single
//! calibration file:
//!
//! ```text
//! <root>/Left_rectified/<id>.png   8-bit RGB
//! <root>/Right_rectified/<id>.png  8-bit RGB
//! <root>/DepthL/<id>.png           16-bit grey, mm * 256, 0 = invalid
//! <root>/DepthR/<id>.png           16-bit grey, mm * 256, 0 = invalid
//! <root>/Disparity/<id>.png        16-bit grey, px * 256, 0 = invalid
//! <root>/Mask/<id>.png             8-bit indexed, see MaskLabel
//! <root>/calibration.json
//! ```
//!
//! `calibration.json` maps each id to its `P1`, `P2` (3x4) and `Q` (4x4)
//! matrices as row-major nested arrays, next to a top-level
//! `"quantization": 256` key:
//!
//! ```json
//! {
//!   "001": { "P1": [[...], [...], [...]], "P2": [...], "Q": [...] },
//!   "quantization": 256
//! }
//! ```
//!
//! Directory and calibration names can be overridden by a `layout.toml`
//! manifest in the root, one `channel = "dir"` line per remapped entry.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Matrix3x4, Matrix4};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::image::ColorImage;
use crate::reference::{DepthMap, DisparityMap, MaskLabel, MaskMap, ScalarMap};
use crate::rig::{RectifiedRig, RigError};

/// Fixed-point scale of 16-bit maps.
pub const QUANTIZATION: u32 = 256;

/// Largest value a 16-bit map can hold.
pub const MAX_Q16_VALUE: f64 = u16::MAX as f64 / QUANTIZATION as f64;

/// Max abs difference between stored and recomputed `Q` before a warning.
pub const Q_CONSISTENCY_TOLERANCE: f64 = 1e-6;

pub const MANIFEST_FILE: &str = "layout.toml";

#[derive(Error, Debug)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing {channel} file {path}")]
    MissingChannel { channel: Channel, path: PathBuf },
    #[error("cannot decode {path}: {reason}")]
    Png { path: PathBuf, reason: String },
    #[error("{path} is {actual_w}x{actual_h}, expected {expected_w}x{expected_h}")]
    Dimension { path: PathBuf, expected_w: u32, expected_h: u32, actual_w: u32, actual_h: u32 },
    #[error("value {value} at pixel ({x}, {y}) cannot be stored in a 16-bit map (range 0..={MAX_Q16_VALUE})")]
    OutOfRange { x: u32, y: u32, value: f64 },
    #[error("unknown mask index {index} at pixel ({x}, {y})")]
    UnknownMaskIndex { x: u32, y: u32, index: u8 },
    #[error("malformed calibration {path}: {reason}")]
    Calibration { path: PathBuf, reason: String },
    #[error("no calibration entry for id {id} in {path}")]
    MissingCalibration { id: String, path: PathBuf },
    #[error("malformed layout manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("invalid record id '{0}': expected at least three ASCII digits")]
    InvalidId(String),
    #[error("inconsistent record: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Rig(#[from] RigError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    LeftRectified,
    RightRectified,
    DepthLeft,
    DepthRight,
    Disparity,
    Mask,
}

impl Channel {
    pub const ALL: [Channel; 6] =
        [Channel::LeftRectified, Channel::RightRectified, Channel::DepthLeft, Channel::DepthRight, Channel::Disparity, Channel::Mask];

    pub fn default_dir(self) -> &'static str {
        match self {
            Channel::LeftRectified => "Left_rectified",
            Channel::RightRectified => "Right_rectified",
            Channel::DepthLeft => "DepthL",
            Channel::DepthRight => "DepthR",
            Channel::Disparity => "Disparity",
            Channel::Mask => "Mask",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Channel::LeftRectified => "left_rectified",
            Channel::RightRectified => "right_rectified",
            Channel::DepthLeft => "depth_left",
            Channel::DepthRight => "depth_right",
            Channel::Disparity => "disparity",
            Channel::Mask => "mask",
        }
    }
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

pub fn is_valid_id(id: &str) -> bool {
    id.len() >= 3 && id.bytes().all(|b| b.is_ascii_digit())
}

pub fn format_id(n: u32) -> String {
    format!("{n:03}")
}

fn check_id(id: &str) -> Result<(), DatasetError> {
    if is_valid_id(id) {
        Ok(())
    } else {
        Err(DatasetError::InvalidId(id.to_string()))
    }
}

/// Where each channel and the calibration file live under a root directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    root: PathBuf,
    dirs: BTreeMap<Channel, String>,
    calibration: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    left_rectified: Option<String>,
    right_rectified: Option<String>,
    depth_left: Option<String>,
    depth_right: Option<String>,
    disparity: Option<String>,
    mask: Option<String>,
    calibration: Option<String>,
}

impl Layout {
    /// Default directory names under `root`.
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let dirs = Channel::ALL.iter().map(|&c| (c, c.default_dir().to_string())).collect();
        Self { root: root.into(), dirs, calibration: "calibration.json".into() }
    }

    /// Default layout, remapped by `<root>/layout.toml` when present.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, DatasetError> {
        let root = root.into();
        let manifest = root.join(MANIFEST_FILE);
        if manifest.exists() {
            Self::from_manifest(root, &manifest)
        } else {
            Ok(Self::new(root))
        }
    }

    pub fn from_manifest(root: impl Into<PathBuf>, manifest: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
        let m: Manifest =
            toml::from_str(&text).map_err(|e| DatasetError::Manifest { path: manifest.to_path_buf(), reason: e.to_string() })?;
        let mut layout = Self::new(root);
        let entries = [
            (Channel::LeftRectified, m.left_rectified),
            (Channel::RightRectified, m.right_rectified),
            (Channel::DepthLeft, m.depth_left),
            (Channel::DepthRight, m.depth_right),
            (Channel::Disparity, m.disparity),
            (Channel::Mask, m.mask),
        ];
        for (channel, dir) in entries {
            if let Some(dir) = dir {
                layout.dirs.insert(channel, dir);
            }
        }
        if let Some(c) = m.calibration {
            layout.calibration = c;
        }
        Ok(layout)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn channel_dir(&self, channel: Channel) -> PathBuf {
        self.root.join(&self.dirs[&channel])
    }

    pub fn channel_path(&self, channel: Channel, id: &str) -> PathBuf {
        self.channel_dir(channel).join(format!("{id}.png"))
    }

    pub fn calibration_path(&self) -> PathBuf {
        self.root.join(&self.calibration)
    }

    /// Sorted ids that have a file in `channel`.
    pub fn ids(&self, channel: Channel) -> Result<Vec<String>, DatasetError> {
        list_ids(&self.channel_dir(channel))
    }
}

/// Sorted ids of the `<id>.png` files directly inside `dir`.
pub fn list_ids(dir: &Path) -> Result<Vec<String>, DatasetError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if is_valid_id(stem) {
                    ids.push(stem.to_string());
                }
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// 16-bit single-channel raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster16 {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u16>,
}

pub fn encode_q16(map: &ScalarMap) -> Result<Raster16, DatasetError> {
    let w = map.width();
    let data = map
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v.is_nan() {
                return Ok(0);
            }
            let q = (v * QUANTIZATION as f64).round();
            if !(v >= 0.0 && q <= u16::MAX as f64) {
                return Err(DatasetError::OutOfRange { x: i as u32 % w, y: i as u32 / w, value: v });
            }
            Ok((q as u16).max(1))
        })
        .collect::<Result<_, _>>()?;
    Ok(Raster16 { width: w, height: map.height(), data })
}

pub fn decode_q16(raster: &Raster16) -> ScalarMap {
    let values = raster.data.iter().map(|&q| if q == 0 { f64::NAN } else { q as f64 / QUANTIZATION as f64 }).collect();
    ScalarMap::from_values(raster.width, raster.height, values).expect("raster size matches")
}

/// Palette entries indexed by [`MaskLabel::index`].
pub fn mask_palette() -> Vec<u8> {
    MaskLabel::ALL.iter().flat_map(|l| l.color()).collect()
}

pub fn encode_mask(mask: &MaskMap) -> Vec<u8> {
    mask.labels().iter().map(|l| l.index()).collect()
}

pub fn decode_mask(width: u32, height: u32, indices: &[u8]) -> Result<MaskMap, DatasetError> {
    let labels = indices
        .iter()
        .enumerate()
        .map(|(i, &index)| {
            MaskLabel::from_index(index).ok_or(DatasetError::UnknownMaskIndex { x: i as u32 % width, y: i as u32 / width, index })
        })
        .collect::<Result<Vec<_>, _>>()?;
    MaskMap::from_labels(width, height, labels)
        .ok_or_else(|| DatasetError::Inconsistent(format!("{} mask indices for {width}x{height}", indices.len())))
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Write through a sibling temp file and rename, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), DatasetError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.{}.tmp", std::process::id(), TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)));
    let result = (|| {
        let mut out = BufWriter::new(File::create(&tmp)?);
        write(&mut out)?;
        out.into_inner().map_err(|e| e.into_error())?.sync_all()
    })();
    match result {
        Ok(()) => fs::rename(&tmp, path).map_err(io_err(path)),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(DatasetError::Io { path: path.to_path_buf(), source: e })
        }
    }
}

fn png_io(e: png::EncodingError) -> std::io::Error {
    std::io::Error::other(e)
}

fn write_png(
    path: &Path,
    width: u32,
    height: u32,
    color: png::ColorType,
    depth: png::BitDepth,
    palette: Option<Vec<u8>>,
    bytes: &[u8],
) -> Result<(), DatasetError> {
    write_atomic(path, |out| {
        let mut enc = png::Encoder::new(out, width, height);
        enc.set_color(color);
        enc.set_depth(depth);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let mut writer = enc.write_header().map_err(png_io)?;
        writer.write_image_data(bytes).map_err(png_io)?;
        writer.finish().map_err(png_io)
    })
}

struct Decoded {
    width: u32,
    height: u32,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: Vec<u8>,
}

fn read_png(path: &Path, channel: Option<Channel>) -> Result<Decoded, DatasetError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(match channel {
                Some(channel) => DatasetError::MissingChannel { channel, path: path.to_path_buf() },
                None => DatasetError::Io { path: path.to_path_buf(), source: e },
            })
        }
        Err(e) => return Err(DatasetError::Io { path: path.to_path_buf(), source: e }),
    };
    let bad = |e: png::DecodingError| DatasetError::Png { path: path.to_path_buf(), reason: e.to_string() };
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| DatasetError::Png { path: path.to_path_buf(), reason: "image too large".into() })?;
    let mut bytes = vec![0; size];
    let info = reader.next_frame(&mut bytes).map_err(bad)?;
    bytes.truncate(info.buffer_size());
    Ok(Decoded { width: info.width, height: info.height, color: info.color_type, depth: info.bit_depth, bytes })
}

fn wrong_format(path: &Path, d: &Decoded, expected: &str) -> DatasetError {
    DatasetError::Png { path: path.to_path_buf(), reason: format!("expected {expected}, found {:?} {:?}", d.color, d.depth) }
}

pub fn write_png16(path: &Path, raster: &Raster16) -> Result<(), DatasetError> {
    let bytes: Vec<u8> = raster.data.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(path, raster.width, raster.height, png::ColorType::Grayscale, png::BitDepth::Sixteen, None, &bytes)
}

fn read_png16_channel(path: &Path, channel: Option<Channel>) -> Result<Raster16, DatasetError> {
    let d = read_png(path, channel)?;
    if d.color != png::ColorType::Grayscale || d.depth != png::BitDepth::Sixteen {
        return Err(wrong_format(path, &d, "16-bit greyscale"));
    }
    let data = d.bytes.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    Ok(Raster16 { width: d.width, height: d.height, data })
}

pub fn read_png16(path: &Path) -> Result<Raster16, DatasetError> {
    read_png16_channel(path, None)
}

pub fn write_map(path: &Path, map: &ScalarMap) -> Result<(), DatasetError> {
    write_png16(path, &encode_q16(map)?)
}

pub fn read_map(path: &Path) -> Result<ScalarMap, DatasetError> {
    Ok(decode_q16(&read_png16(path)?))
}

pub fn write_color_png(path: &Path, image: &ColorImage) -> Result<(), DatasetError> {
    write_png(path, image.width(), image.height(), png::ColorType::Rgb, png::BitDepth::Eight, None, &image.as_bytes())
}

/// Encode an RGB image as PNG bytes in memory.
pub fn color_png_bytes(image: &ColorImage) -> Vec<u8> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, image.width(), image.height());
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().expect("in-memory write");
    writer.write_image_data(&image.as_bytes()).expect("in-memory write");
    writer.finish().expect("in-memory write");
    out
}

fn read_color_channel(path: &Path, channel: Option<Channel>) -> Result<ColorImage, DatasetError> {
    let d = read_png(path, channel)?;
    if d.depth != png::BitDepth::Eight {
        return Err(wrong_format(path, &d, "8-bit RGB"));
    }
    let rgb: Vec<u8> = match d.color {
        png::ColorType::Rgb => d.bytes,
        png::ColorType::Rgba => d.bytes.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => d.bytes.iter().flat_map(|&g| [g, g, g]).collect(),
        _ => return Err(wrong_format(path, &d, "8-bit RGB")),
    };
    ColorImage::from_raw(d.width, d.height, &rgb)
        .ok_or_else(|| DatasetError::Png { path: path.to_path_buf(), reason: "truncated pixel data".into() })
}

/// Read an 8-bit RGB (or RGBA / greyscale, converted) PNG.
pub fn read_color_png(path: &Path) -> Result<ColorImage, DatasetError> {
    read_color_channel(path, None)
}

pub fn write_mask_png(path: &Path, mask: &MaskMap) -> Result<(), DatasetError> {
    write_png(
        path,
        mask.width(),
        mask.height(),
        png::ColorType::Indexed,
        png::BitDepth::Eight,
        Some(mask_palette()),
        &encode_mask(mask),
    )
}

fn read_mask_channel(path: &Path, channel: Option<Channel>) -> Result<MaskMap, DatasetError> {
    let d = read_png(path, channel)?;
    if d.color != png::ColorType::Indexed || d.depth != png::BitDepth::Eight {
        return Err(wrong_format(path, &d, "8-bit indexed"));
    }
    decode_mask(d.width, d.height, &d.bytes)
}

pub fn read_mask_png(path: &Path) -> Result<MaskMap, DatasetError> {
    read_mask_channel(path, None)
}

/// Rectified projection matrices of one record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub p1: Matrix3x4<f64>,
    pub p2: Matrix3x4<f64>,
    pub q: Matrix4<f64>,
}

impl Calibration {
    pub fn from_rig(rig: &RectifiedRig) -> Self {
        let (p1, p2, q) = rig.matrices();
        Self { p1, p2, q }
    }

    pub fn rig(&self, width: u32, height: u32) -> Result<RectifiedRig, RigError> {
        RectifiedRig::from_projections(&self.p1, &self.p2, width, height)
    }

    /// Warning text when the stored `Q` disagrees with the one implied by
    /// `P1`/`P2`.
    pub fn consistency_warning(&self, width: u32, height: u32) -> Option<String> {
        let expected = match self.rig(width, height) {
            Ok(rig) => rig.q(),
            Err(e) => return Some(format!("P1/P2 do not form a rectified rig: {e}")),
        };
        let diff = (self.q - expected).amax();
        (diff > Q_CONSISTENCY_TOLERANCE).then(|| format!("Q differs from the matrix implied by P1/P2 by up to {diff:e}"))
    }

    fn to_json(self) -> Value {
        let rows = |m: &dyn Fn(usize, usize) -> f64, r: usize, c: usize| {
            Value::Array((0..r).map(|i| Value::Array((0..c).map(|j| Value::from(m(i, j))).collect())).collect())
        };
        let mut obj = serde_json::Map::new();
        obj.insert("P1".into(), rows(&|i, j| self.p1[(i, j)], 3, 4));
        obj.insert("P2".into(), rows(&|i, j| self.p2[(i, j)], 3, 4));
        obj.insert("Q".into(), rows(&|i, j| self.q[(i, j)], 4, 4));
        Value::Object(obj)
    }

    fn from_json(v: &Value) -> Result<Self, String> {
        fn matrix(v: &Value, key: &str, r: usize, c: usize) -> Result<Vec<f64>, String> {
            let rows = v.get(key).and_then(Value::as_array).ok_or_else(|| format!("missing '{key}'"))?;
            if rows.len() != r {
                return Err(format!("'{key}' has {} rows, expected {r}", rows.len()));
            }
            let mut out = Vec::with_capacity(r * c);
            for row in rows {
                let row = row.as_array().filter(|a| a.len() == c).ok_or_else(|| format!("'{key}' rows must have {c} numbers"))?;
                for x in row {
                    out.push(x.as_f64().ok_or_else(|| format!("'{key}' holds a non-number"))?);
                }
            }
            Ok(out)
        }
        Ok(Self {
            p1: Matrix3x4::from_row_slice(&matrix(v, "P1", 3, 4)?),
            p2: Matrix3x4::from_row_slice(&matrix(v, "P2", 3, 4)?),
            q: Matrix4::from_row_slice(&matrix(v, "Q", 4, 4)?),
        })
    }
}

fn read_calibration_file(path: &Path) -> Result<serde_json::Map<String, Value>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |reason: String| DatasetError::Calibration { path: path.to_path_buf(), reason };
    let value: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let Value::Object(map) = value else { return Err(bad("top level must be an object".into())) };
    if let Some(q) = map.get("quantization") {
        if q.as_u64() != Some(QUANTIZATION as u64) {
            return Err(bad(format!("unsupported quantization {q}, expected {QUANTIZATION}")));
        }
    }
    Ok(map)
}

pub fn read_calibration(layout: &Layout, id: &str) -> Result<Calibration, DatasetError> {
    read_calibration_at(&layout.calibration_path(), Some(id)).map(|(_, c)| c)
}

/// Read one entry from a calibration file at any path. Without `id` the file
/// must hold exactly one entry. Returns the id that was used.
pub fn read_calibration_at(path: &Path, id: Option<&str>) -> Result<(String, Calibration), DatasetError> {
    let map = read_calibration_file(path)?;
    let id = match id {
        Some(id) => id.to_string(),
        None => {
            let ids: Vec<&String> = map.keys().filter(|k| is_valid_id(k)).collect();
            match ids.as_slice() {
                [only] => (*only).clone(),
                _ => {
                    return Err(DatasetError::Calibration {
                        path: path.to_path_buf(),
                        reason: format!("{} entries present, an id must be chosen", ids.len()),
                    })
                }
            }
        }
    };
    let entry = map.get(&id).ok_or_else(|| DatasetError::MissingCalibration { id: id.clone(), path: path.to_path_buf() })?;
    let calib = Calibration::from_json(entry)
        .map_err(|reason| DatasetError::Calibration { path: path.to_path_buf(), reason: format!("id {id}: {reason}") })?;
    Ok((id, calib))
}

/// Insert or replace the entry for `id`, keeping the other ids.
pub fn write_calibration(layout: &Layout, id: &str, calib: &Calibration) -> Result<(), DatasetError> {
    check_id(id)?;
    let path = layout.calibration_path();
    let mut map = if path.exists() { read_calibration_file(&path)? } else { serde_json::Map::new() };
    map.insert(id.to_string(), calib.to_json());
    map.insert("quantization".into(), Value::from(QUANTIZATION));
    let text = serde_json::to_string_pretty(&Value::Object(map)).expect("json values serialise");
    write_atomic(&path, |out| {
        out.write_all(text.as_bytes())?;
        out.write_all(b"\n")
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub left: ColorImage,
    pub right: ColorImage,
    pub depth_left: DepthMap,
    pub depth_right: DepthMap,
    pub disparity: DisparityMap,
    pub mask: MaskMap,
    pub calibration: Calibration,
}

impl DatasetRecord {
    pub fn width(&self) -> u32 {
        self.left.width()
    }

    pub fn height(&self) -> u32 {
        self.left.height()
    }

    pub fn rig(&self) -> Result<RectifiedRig, RigError> {
        self.calibration.rig(self.width(), self.height())
    }

    /// All rasters share the left image's size.
    pub fn check_dimensions(&self) -> Result<(), DatasetError> {
        let (w, h) = (self.width(), self.height());
        let sizes = [
            ("right", self.right.width(), self.right.height()),
            ("depth_left", self.depth_left.width(), self.depth_left.height()),
            ("depth_right", self.depth_right.width(), self.depth_right.height()),
            ("disparity", self.disparity.width(), self.disparity.height()),
            ("mask", self.mask.width(), self.mask.height()),
        ];
        for (name, sw, sh) in sizes {
            if (sw, sh) != (w, h) {
                return Err(DatasetError::Inconsistent(format!("{name} is {sw}x{sh}, left image is {w}x{h}")));
            }
        }
        Ok(())
    }
}

pub fn write_record(layout: &Layout, record: &DatasetRecord) -> Result<(), DatasetError> {
    check_id(&record.id)?;
    record.check_dimensions()?;
    let id = &record.id;
    // Encode everything first so a range error leaves no partial record.
    let depth_l = encode_q16(&record.depth_left)?;
    let depth_r = encode_q16(&record.depth_right)?;
    let disp = encode_q16(&record.disparity)?;
    write_color_png(&layout.channel_path(Channel::LeftRectified, id), &record.left)?;
    write_color_png(&layout.channel_path(Channel::RightRectified, id), &record.right)?;
    write_png16(&layout.channel_path(Channel::DepthLeft, id), &depth_l)?;
    write_png16(&layout.channel_path(Channel::DepthRight, id), &depth_r)?;
    write_png16(&layout.channel_path(Channel::Disparity, id), &disp)?;
    write_mask_png(&layout.channel_path(Channel::Mask, id), &record.mask)?;
    write_calibration(layout, id, &record.calibration)
}

fn check_size(path: PathBuf, w: u32, h: u32, expected: (u32, u32)) -> Result<(), DatasetError> {
    if (w, h) == expected {
        Ok(())
    } else {
        Err(DatasetError::Dimension { path, expected_w: expected.0, expected_h: expected.1, actual_w: w, actual_h: h })
    }
}

pub fn read_disparity(layout: &Layout, id: &str) -> Result<DisparityMap, DatasetError> {
    let path = layout.channel_path(Channel::Disparity, id);
    Ok(DisparityMap::new(decode_q16(&read_png16_channel(&path, Some(Channel::Disparity))?)))
}

pub fn read_mask(layout: &Layout, id: &str) -> Result<MaskMap, DatasetError> {
    read_mask_channel(&layout.channel_path(Channel::Mask, id), Some(Channel::Mask))
}

pub fn read_depth(layout: &Layout, channel: Channel, id: &str) -> Result<DepthMap, DatasetError> {
    Ok(DepthMap::new(decode_q16(&read_png16_channel(&layout.channel_path(channel, id), Some(channel))?)))
}

/// Read a full record plus any calibration consistency warnings.
pub fn read_record(layout: &Layout, id: &str) -> Result<(DatasetRecord, Vec<String>), DatasetError> {
    check_id(id)?;
    let left_path = layout.channel_path(Channel::LeftRectified, id);
    let left = read_color_channel(&left_path, Some(Channel::LeftRectified))?;
    let size = (left.width(), left.height());
    let right_path = layout.channel_path(Channel::RightRectified, id);
    let right = read_color_channel(&right_path, Some(Channel::RightRectified))?;
    check_size(right_path, right.width(), right.height(), size)?;
    let depth_left = read_depth(layout, Channel::DepthLeft, id)?;
    check_size(layout.channel_path(Channel::DepthLeft, id), depth_left.width(), depth_left.height(), size)?;
    let depth_right = read_depth(layout, Channel::DepthRight, id)?;
    check_size(layout.channel_path(Channel::DepthRight, id), depth_right.width(), depth_right.height(), size)?;
    let disparity = read_disparity(layout, id)?;
    check_size(layout.channel_path(Channel::Disparity, id), disparity.width(), disparity.height(), size)?;
    let mask = read_mask(layout, id)?;
    check_size(layout.channel_path(Channel::Mask, id), mask.width(), mask.height(), size)?;
    let calibration = read_calibration(layout, id)?;
    let warnings = calibration.consistency_warning(size.0, size.1).into_iter().collect();
    let record = DatasetRecord { id: id.to_string(), left, right, depth_left, depth_right, disparity, mask, calibration };
    Ok((record, warnings))
}
