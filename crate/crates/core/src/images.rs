//! Image references for thumbnails and crops.
//!
//! Pixels never pass through this crate. A data directory holds pre-extracted
//! PNG crops at `crops/{slide_id}/{x}_{y}_{w}_{h}.png` (box in level-0 pixels,
//! rounded to integers) and one `crops/{slide_id}/thumbnail.png` per slide.
//! An optional `crops/index.json` manifest lists every file with its size and
//! SHA-256; without it the directory is scanned once at open time.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::BBox;

pub const DEFAULT_TARGET_PX: u32 = 1024;
pub const MANIFEST_PATH: &str = "crops/index.json";

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("no crop for slide `{slide_id}` at {x}_{y}_{w}_{h}")]
    CropMissing { slide_id: String, x: i64, y: i64, w: i64, h: i64 },
    #[error("no thumbnail for slide `{0}`")]
    ThumbnailMissing(String),
    #[error("crop `{path}` is {width}x{height}, expected {expected}x{expected}")]
    CropSizeMismatch { path: String, width: u32, height: u32, expected: u32 },
    #[error("invalid crop request: {0}")]
    InvalidRequest(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Opaque handle to an image file: relative path plus content hash.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: String,
    pub width: u32,
    pub height: u32,
    /// Lower-case hex SHA-256 of the file bytes.
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRequest {
    pub slide_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default = "default_target")]
    pub target_px: u32,
}

fn default_target() -> u32 {
    DEFAULT_TARGET_PX
}

impl CropRequest {
    pub fn new(slide_id: impl Into<String>, bbox: BBox) -> Self {
        Self { slide_id: slide_id.into(), bbox, target_px: DEFAULT_TARGET_PX }
    }
}

pub trait ImageProvider: Send + Sync {
    fn get_crop(&self, req: &CropRequest) -> Result<ImageRef, ImageError>;
    fn get_thumbnail(&self, slide_id: &str) -> Result<ImageRef, ImageError>;
}

fn rounded(bbox: &BBox) -> (i64, i64, i64, i64) {
    (
        bbox.x.round() as i64,
        bbox.y.round() as i64,
        bbox.w.round() as i64,
        bbox.h.round() as i64,
    )
}

/// Relative path of the crop file for `bbox` on `slide_id`.
pub fn crop_path(slide_id: &str, bbox: &BBox) -> String {
    let (x, y, w, h) = rounded(bbox);
    format!("crops/{slide_id}/{x}_{y}_{w}_{h}.png")
}

pub fn thumbnail_path(slide_id: &str) -> String {
    format!("crops/{slide_id}/thumbnail.png")
}

/// Width and height from a PNG IHDR chunk.
pub fn png_dimensions(bytes: &[u8]) -> Option<(u32, u32)> {
    const SIG: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];
    if bytes.len() < 24 || bytes[..8] != SIG || &bytes[12..16] != b"IHDR" {
        return None;
    }
    let w = u32::from_be_bytes(bytes[16..20].try_into().ok()?);
    let h = u32::from_be_bytes(bytes[20..24].try_into().ok()?);
    Some((w, h))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Crops served from a data directory, indexed once and read-only afterwards.
#[derive(Debug, Clone)]
pub struct FileImageProvider {
    root: PathBuf,
    index: BTreeMap<String, ImageRef>,
}

impl FileImageProvider {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ImageError> {
        let root = root.into();
        let manifest = root.join(MANIFEST_PATH);
        let entries: Vec<ImageRef> = if manifest.exists() {
            let text = fs::read_to_string(&manifest).map_err(|source| ImageError::Io {
                path: manifest.clone(),
                source,
            })?;
            serde_json::from_str(&text)?
        } else {
            scan(&root)?
        };
        let index = entries.into_iter().map(|r| (r.path.clone(), r)).collect();
        Ok(Self { root, index })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> impl Iterator<Item = &ImageRef> {
        self.index.values()
    }

    /// Writes `crops/index.json` for the current index.
    pub fn write_manifest(&self) -> Result<(), ImageError> {
        let path = self.root.join(MANIFEST_PATH);
        let entries: Vec<&ImageRef> = self.index.values().collect();
        let text = serde_json::to_string_pretty(&entries)?;
        fs::write(&path, text).map_err(|source| ImageError::Io { path, source })
    }
}

fn scan(root: &Path) -> Result<Vec<ImageRef>, ImageError> {
    let crops = root.join("crops");
    let mut out = Vec::new();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ImageError::Io { path, source }
    };
    if !crops.is_dir() {
        return Ok(out);
    }
    for slide_dir in fs::read_dir(&crops).map_err(io(&crops))? {
        let slide_dir = slide_dir.map_err(io(&crops))?.path();
        if !slide_dir.is_dir() {
            continue;
        }
        for file in fs::read_dir(&slide_dir).map_err(io(&slide_dir))? {
            let file = file.map_err(io(&slide_dir))?.path();
            if file.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let bytes = fs::read(&file).map_err(io(&file))?;
            let (width, height) = png_dimensions(&bytes).unwrap_or((0, 0));
            let rel = file
                .strip_prefix(root)
                .expect("scanned file lives under root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            out.push(ImageRef { path: rel, width, height, content_hash: sha256_hex(&bytes) });
        }
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

impl ImageProvider for FileImageProvider {
    fn get_crop(&self, req: &CropRequest) -> Result<ImageRef, ImageError> {
        if req.target_px == 0 {
            return Err(ImageError::InvalidRequest("target_px must be > 0".into()));
        }
        req.bbox
            .validated()
            .map_err(|e| ImageError::InvalidRequest(e.to_string()))?;
        let key = crop_path(&req.slide_id, &req.bbox);
        let found = self.index.get(&key).ok_or_else(|| {
            let (x, y, w, h) = rounded(&req.bbox);
            ImageError::CropMissing { slide_id: req.slide_id.clone(), x, y, w, h }
        })?;
        if found.width != req.target_px || found.height != req.target_px {
            return Err(ImageError::CropSizeMismatch {
                path: found.path.clone(),
                width: found.width,
                height: found.height,
                expected: req.target_px,
            });
        }
        Ok(found.clone())
    }

    fn get_thumbnail(&self, slide_id: &str) -> Result<ImageRef, ImageError> {
        self.index
            .get(&thumbnail_path(slide_id))
            .cloned()
            .ok_or_else(|| ImageError::ThumbnailMissing(slide_id.to_string()))
    }
}

/// Minimal valid-looking PNG header of the given size, for fixtures.
pub fn png_stub(width: u32, height: u32, salt: &[u8]) -> Vec<u8> {
    let mut bytes = vec![0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a, 0, 0, 0, 13];
    bytes.extend_from_slice(b"IHDR");
    bytes.extend_from_slice(&width.to_be_bytes());
    bytes.extend_from_slice(&height.to_be_bytes());
    bytes.extend_from_slice(&[8, 2, 0, 0, 0]);
    bytes.extend_from_slice(salt);
    bytes
}
