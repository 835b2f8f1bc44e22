//! Wire protocol shared by all tool services: HTTP POST with JSON bodies,
//! images transported as base64 PNG, `{request_id, seed}` on every request
//! and `{status, payload | error}` on every response.

use crate::compose::{ForegroundLayer, LayeredSample};
use crate::dataset;
use crate::error::{Error, Result};
use crate::image::{AlphaMask, Image, ShadowResidual};
use base64::Engine;
use serde::{Deserialize, Serialize};

/// Envelope carried by every request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireRequest<T> {
    pub request_id: String,
    pub seed: u64,
    pub payload: T,
}

/// Envelope carried by every response.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum WireResponse<T> {
    Ok { payload: T },
    Error { error: WireError },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireError {
    pub message: String,
}

fn b64() -> base64::engine::GeneralPurpose {
    base64::engine::general_purpose::STANDARD
}

/// Base64 PNG encoding of an RGB image.
pub fn encode_image(image: &Image) -> Result<String> {
    Ok(b64().encode(dataset::image_to_png(image)?))
}

pub fn decode_image(text: &str) -> Result<Image> {
    let bytes = b64().decode(text).map_err(|e| Error::Png {
        path: "<wire>".into(),
        message: format!("base64: {e}"),
    })?;
    dataset::png_to_image(&bytes)
}

/// Base64 PNG encoding of an alpha mask (8-bit gray).
pub fn encode_mask(mask: &AlphaMask) -> Result<String> {
    Ok(b64().encode(dataset::mask_to_png(mask)?))
}

pub fn decode_mask(text: &str) -> Result<AlphaMask> {
    let bytes = b64().decode(text).map_err(|e| Error::Png {
        path: "<wire>".into(),
        message: format!("base64: {e}"),
    })?;
    dataset::png_to_mask(&bytes)
}

/// Base64 PNG encoding of a shadow residual (16-bit offset).
pub fn encode_shadow(shadow: &ShadowResidual) -> Result<String> {
    Ok(b64().encode(dataset::shadow_to_png(shadow)?))
}

pub fn decode_shadow(text: &str) -> Result<ShadowResidual> {
    let bytes = b64().decode(text).map_err(|e| Error::Png {
        path: "<wire>".into(),
        message: format!("base64: {e}"),
    })?;
    dataset::png_to_shadow(&bytes)
}

// --- per-endpoint payloads -------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct DetectRequest {
    pub image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DetectResponse {
    pub present: bool,
    pub description: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InstructionRequest {
    pub image: String,
    pub description: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InstructionResponse {
    pub instruction: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ApplyRequest {
    pub image: String,
    pub instruction: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ApplyResponse {
    pub image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embedding: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireLayer {
    pub rgb: String,
    pub alpha: String,
    pub order_index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireSample {
    pub source: String,
    pub background: String,
    pub layers: Vec<WireLayer>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shadow: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VerifyRequest {
    pub rendered: String,
    pub sample: WireSample,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VerifyResponse {
    pub accept: bool,
    pub reasons: Vec<String>,
}

/// Serializes a layered sample for transport.
pub fn encode_sample(sample: &LayeredSample) -> Result<WireSample> {
    Ok(WireSample {
        source: encode_image(sample.source())?,
        background: encode_image(sample.background())?,
        layers: sample
            .layers()
            .iter()
            .map(|l| {
                Ok(WireLayer {
                    rgb: encode_image(l.rgb())?,
                    alpha: encode_mask(l.alpha())?,
                    order_index: l.order_index(),
                })
            })
            .collect::<Result<Vec<_>>>()?,
        shadow: sample.shadow().map(encode_shadow).transpose()?,
    })
}

/// Reconstructs a layered sample from its wire form.
pub fn decode_sample(wire: &WireSample) -> Result<LayeredSample> {
    let source = decode_image(&wire.source)?;
    let background = decode_image(&wire.background)?;
    let layers = wire
        .layers
        .iter()
        .map(|l| ForegroundLayer::new(decode_image(&l.rgb)?, decode_mask(&l.alpha)?, l.order_index))
        .collect::<Result<Vec<_>>>()?;
    let shadow = wire.shadow.as_deref().map(decode_shadow).transpose()?;
    LayeredSample::new(source, background, layers, shadow)
}
