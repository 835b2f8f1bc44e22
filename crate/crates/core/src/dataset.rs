//! On-disk sample format, PNG codecs, aspect/layer bucketing, and resizing.
//!
//! A sample is a directory `<root>/<sample_id>/` holding 8-bit PNGs for the
//! source, background, and per-layer rgb/alpha planes, an optional 16-bit
//! offset-encoded shadow PNG, and a `manifest.json` written last as the
//! commit point: a directory is a sample iff its manifest parses.

use crate::compose::{ForegroundLayer, LayeredSample};
use crate::degrade::DegradationSpec;
use crate::error::{Error, Result};
use crate::fusion::resample_image;
use crate::image::{AlphaMask, Image, ShadowResidual};
use crate::selector::SelectorConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

/// Manifest schema understood by this build.
pub const SCHEMA_VERSION: u32 = 1;

/// Round-trip tolerance applied when re-validating a stored sample's
/// shadow recomposition against its quantized source.
pub const READ_ROUND_TRIP_TOLERANCE: f64 = 3.0 / 255.0;

const MANIFEST_NAME: &str = "manifest.json";

// ---------------------------------------------------------------------------
// PNG codecs
// ---------------------------------------------------------------------------

fn quantize8(v: f64) -> u8 {
    (v * 255.0).round() as u8
}

fn dequantize8(q: u8) -> f64 {
    q as f64 / 255.0
}

/// Encodes an image as an 8-bit RGB PNG.
pub fn image_to_png(image: &Image) -> Result<Vec<u8>> {
    let (h, w) = image.dims();
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize8(v)).collect();
    let buf: image::RgbImage = image::ImageBuffer::from_raw(w as u32, h as u32, bytes)
        .expect("buffer sized from dims");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Png {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
    Ok(out.into_inner())
}

/// Decodes an 8-bit RGB PNG.
pub fn png_to_image(bytes: &[u8]) -> Result<Image> {
    let decoded = image::load_from_memory(bytes).map_err(|e| Error::Png {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    let rgb = match decoded {
        image::DynamicImage::ImageRgb8(b) => b,
        other => {
            return Err(Error::Png {
                path: "<memory>".into(),
                message: format!("expected 8-bit rgb png, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = rgb.dimensions();
    Image::new(
        h as usize,
        w as usize,
        rgb.into_raw().into_iter().map(dequantize8).collect(),
    )
}

/// Encodes an alpha mask as an 8-bit grayscale PNG.
pub fn mask_to_png(mask: &AlphaMask) -> Result<Vec<u8>> {
    let (h, w) = mask.dims();
    let bytes: Vec<u8> = mask.data().iter().map(|&v| quantize8(v)).collect();
    let buf: image::GrayImage = image::ImageBuffer::from_raw(w as u32, h as u32, bytes)
        .expect("buffer sized from dims");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Png {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
    Ok(out.into_inner())
}

/// Decodes an 8-bit grayscale PNG into an alpha mask.
pub fn png_to_mask(bytes: &[u8]) -> Result<AlphaMask> {
    let decoded = image::load_from_memory(bytes).map_err(|e| Error::Png {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    let gray = match decoded {
        image::DynamicImage::ImageLuma8(b) => b,
        other => {
            return Err(Error::Png {
                path: "<memory>".into(),
                message: format!("expected 8-bit gray png, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = gray.dimensions();
    AlphaMask::new(
        h as usize,
        w as usize,
        gray.into_raw().into_iter().map(dequantize8).collect(),
    )
}

/// Encodes a signed shadow residual as a 16-bit RGB PNG with offset
/// encoding: `stored = round((s + 1) / 2 * 65535)` per channel, so a zero
/// residual stores as the midpoint 32768.
pub fn shadow_to_png(shadow: &ShadowResidual) -> Result<Vec<u8>> {
    let (h, w) = shadow.dims();
    let words: Vec<u16> = shadow
        .data()
        .iter()
        .map(|&s| ((s + 1.0) / 2.0 * 65535.0).round() as u16)
        .collect();
    let buf: image::ImageBuffer<image::Rgb<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(w as u32, h as u32, words).expect("buffer sized from dims");
    let mut out = Cursor::new(Vec::new());
    image::DynamicImage::ImageRgb16(buf)
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Png {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
    Ok(out.into_inner())
}

/// Decodes a 16-bit offset-encoded shadow PNG.
pub fn png_to_shadow(bytes: &[u8]) -> Result<ShadowResidual> {
    let decoded = image::load_from_memory(bytes).map_err(|e| Error::Png {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    let rgb16 = match decoded {
        image::DynamicImage::ImageRgb16(b) => b,
        other => {
            return Err(Error::Png {
                path: "<memory>".into(),
                message: format!("expected 16-bit rgb png, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = rgb16.dimensions();
    ShadowResidual::new(
        h as usize,
        w as usize,
        rgb16
            .into_raw()
            .into_iter()
            .map(|q| q as f64 / 65535.0 * 2.0 - 1.0)
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Bucketing
// ---------------------------------------------------------------------------

/// Default aspect bins as width:height ratios, ascending.
pub const DEFAULT_ASPECT_BINS: [(&str, f64); 7] = [
    ("1:2", 0.5),
    ("9:16", 9.0 / 16.0),
    ("3:4", 0.75),
    ("1:1", 1.0),
    ("4:3", 4.0 / 3.0),
    ("16:9", 16.0 / 9.0),
    ("2:1", 2.0),
];

/// Picks the bin whose log-ratio is nearest to `width / height`; exact ties
/// go to the lower ratio.
pub fn nearest_aspect_bin(ratio: f64) -> &'static str {
    let target = ratio.ln();
    let mut best = DEFAULT_ASPECT_BINS[0].0;
    let mut best_dist = f64::INFINITY;
    for (name, bin_ratio) in DEFAULT_ASPECT_BINS {
        let dist = (target - bin_ratio.ln()).abs();
        if dist + 1e-12 < best_dist {
            best = name;
            best_dist = dist;
        }
    }
    best
}

/// Batch-shape bucket: an aspect-ratio bin crossed with the layer count.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BucketKey {
    pub aspect_bin: String,
    pub layer_count: usize,
}

impl BucketKey {
    pub fn for_dims(height: usize, width: usize, layer_count: usize) -> Self {
        Self {
            aspect_bin: nearest_aspect_bin(width as f64 / height as f64).to_string(),
            layer_count,
        }
    }
}

impl std::fmt::Display for BucketKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}L", self.aspect_bin, self.layer_count)
    }
}

/// Partitions manifests into buckets by their stored bucket keys. Returns
/// indices into the input slice; every manifest lands in exactly one bucket.
pub fn bucketize(manifests: &[SampleManifest]) -> BTreeMap<BucketKey, Vec<usize>> {
    let mut buckets: BTreeMap<BucketKey, Vec<usize>> = BTreeMap::new();
    for (i, m) in manifests.iter().enumerate() {
        buckets.entry(m.bucket_key.clone()).or_default().push(i);
    }
    buckets
}

// ---------------------------------------------------------------------------
// Resizing
// ---------------------------------------------------------------------------

/// Bilinear downscale preserving aspect ratio so both sides fit within
/// `max_side`; never upscales. The shorter side rounds half away from zero.
pub fn resize_within(image: &Image, max_side: usize) -> Result<Image> {
    if max_side == 0 {
        return Err(Error::InvalidParameter {
            name: "max_side",
            message: "must be >= 1".into(),
        });
    }
    let (h, w) = image.dims();
    let long = h.max(w);
    if long <= max_side {
        return Ok(image.clone());
    }
    let scale = max_side as f64 / long as f64;
    let scaled = |side: usize| ((side as f64 * scale).round() as usize).max(1);
    let (nh, nw) = if h >= w {
        (max_side, scaled(w))
    } else {
        (scaled(h), max_side)
    };
    resample_image(image, nh, nw)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// One stored layer's file references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub rgb_path: String,
    pub alpha_path: String,
    pub order_index: usize,
}

/// Reproducibility record carried by every manifest: the thresholds, seeds,
/// service identities, and degradation specs that produced the sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selector: Option<SelectorConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_dup: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub service_ids: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degradations: Vec<DegradationSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_similarity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_image: Option<String>,
}

/// On-disk description of one layered sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub schema_version: u32,
    pub sample_id: String,
    pub source_path: String,
    pub background_path: String,
    pub layers: Vec<LayerEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shadow_path: Option<String>,
    pub provenance: Provenance,
    pub bucket_key: BucketKey,
}

impl SampleManifest {
    fn validate(&self, path: &Path) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::UnknownSchema {
                found: self.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.order_index != i + 1 {
                return Err(Error::InvalidManifest {
                    path: path.display().to_string(),
                    message: format!(
                        "layer {} has order_index {}, expected {}",
                        i,
                        layer.order_index,
                        i + 1
                    ),
                });
            }
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidManifest {
                path: path.display().to_string(),
                message: "manifest lists no layers".into(),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Write / read
// ---------------------------------------------------------------------------

/// Destination for sample files; injectable so tests can interrupt a write
/// mid-sequence.
pub trait FileSink {
    fn write(&mut self, path: &Path, bytes: &[u8]) -> std::io::Result<()>;
}

/// Writes through to the filesystem, creating parent directories.
pub struct FsSink;

impl FileSink for FsSink {
    fn write(&mut self, path: &Path, bytes: &[u8]) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, bytes)
    }
}

/// Writes a sample into `sample_dir` (whose final component is the sample
/// id). PNG planes go first; the manifest goes last as the commit point, so
/// an interrupted write never leaves a readable sample behind.
pub fn write_sample(
    sample: &LayeredSample,
    sample_dir: &Path,
    provenance: Provenance,
) -> Result<SampleManifest> {
    write_sample_with_sink(sample, sample_dir, provenance, &mut FsSink)
}

/// [`write_sample`] against an injectable sink.
pub fn write_sample_with_sink(
    sample: &LayeredSample,
    sample_dir: &Path,
    provenance: Provenance,
    sink: &mut dyn FileSink,
) -> Result<SampleManifest> {
    let sample_id = sample_dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidParameter {
            name: "sample_dir",
            message: format!("{} has no usable directory name", sample_dir.display()),
        })?
        .to_string();

    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let path = sample_dir.join(name);
        sink.write(&path, &bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))
    };

    put("source.png", image_to_png(sample.source())?)?;
    put("background.png", image_to_png(sample.background())?)?;
    let mut layers = Vec::with_capacity(sample.layer_count());
    for layer in sample.layers() {
        let k = layer.order_index();
        let rgb_name = format!("layer_{k}_rgb.png");
        let alpha_name = format!("layer_{k}_alpha.png");
        put(&rgb_name, image_to_png(layer.rgb())?)?;
        put(&alpha_name, mask_to_png(layer.alpha())?)?;
        layers.push(LayerEntry {
            rgb_path: rgb_name,
            alpha_path: alpha_name,
            order_index: k,
        });
    }
    let shadow_path = match sample.shadow() {
        Some(shadow) => {
            put("shadow.png", shadow_to_png(shadow)?)?;
            Some("shadow.png".to_string())
        }
        None => None,
    };

    let (h, w) = sample.dims();
    let manifest = SampleManifest {
        schema_version: SCHEMA_VERSION,
        sample_id,
        source_path: "source.png".into(),
        background_path: "background.png".into(),
        layers,
        shadow_path,
        provenance,
        bucket_key: BucketKey::for_dims(h, w, sample.layer_count()),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    put(MANIFEST_NAME, json)?;
    Ok(manifest)
}

/// Parses a manifest file without loading any image planes.
pub fn read_manifest(manifest_path: &Path) -> Result<SampleManifest> {
    let bytes = std::fs::read(manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: SampleManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::InvalidManifest {
            path: manifest_path.display().to_string(),
            message: e.to_string(),
        })?;
    manifest.validate(manifest_path)?;
    Ok(manifest)
}

/// Loads a full sample from its manifest, validating every invariant and,
/// when a shadow is present, re-checking the recomposition round trip at
/// quantization tolerance.
pub fn read_sample(manifest_path: &Path) -> Result<LayeredSample> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let load = |rel: &str| -> Result<Vec<u8>> {
        let path = dir.join(rel);
        std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))
    };

    let source = png_to_image(&load(&manifest.source_path)?)?;
    let background = png_to_image(&load(&manifest.background_path)?)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let rgb = png_to_image(&load(&entry.rgb_path)?)?;
        let alpha = png_to_mask(&load(&entry.alpha_path)?)?;
        layers.push(ForegroundLayer::new(rgb, alpha, entry.order_index)?);
    }
    let shadow = match &manifest.shadow_path {
        Some(rel) => Some(png_to_shadow(&load(rel)?)?),
        None => None,
    };
    let has_shadow = shadow.is_some();
    let sample = LayeredSample::new(source, background, layers, shadow)?;
    if has_shadow {
        sample
            .verify_round_trip(READ_ROUND_TRIP_TOLERANCE)
            .map_err(|e| match e {
                Error::InvariantViolation { message, .. } => Error::InvariantViolation {
                    path: manifest_path.display().to_string(),
                    message,
                },
                other => other,
            })?;
    }
    Ok(sample)
}

/// Lists manifest paths of the readable samples under a dataset root,
/// sorted by sample directory name. Directories without a parseable
/// manifest are ignored.
pub fn scan_dataset(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root.display().to_string(), e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let manifest = dir.join(MANIFEST_NAME);
        if manifest.is_file() && read_manifest(&manifest).is_ok() {
            out.push(manifest);
        }
    }
    Ok(out)
}
