//! Tool-service contracts and their implementations.
//!
//! The curation pipeline drives four kinds of external tools: an agent that
//! detects foregrounds and writes editing instructions, an editor that
//! applies them, segmentation experts that produce candidate mattes, and a
//! verifier that gates final samples. An embedding service backs
//! de-duplication and proposal selection.
//!
//! Every service speaks the same wire protocol (HTTP POST, JSON bodies,
//! base64 PNG images, `{request_id, seed}` on requests); deterministic mock
//! implementations satisfy the same traits in-process and can also be
//! served over loopback for protocol-level testing.

pub mod client;
pub mod mock;
pub mod server;
pub mod wire;

use crate::compose::LayeredSample;
use crate::error::{Error, Result};
use crate::image::{AlphaMask, Image};
use crate::selector::EmbeddingProvider;
use std::collections::BTreeMap;

/// Where the real tool services live, plus call policy.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ToolEndpoints {
    pub agent_url: String,
    pub editor_url: String,
    pub segmenter_urls: Vec<String>,
    pub embedder_url: String,
    pub verifier_url: String,
    /// Per-request timeout in seconds.
    pub timeout_secs: u64,
    /// Retry attempts after the first try.
    pub retries: u32,
}

impl ToolEndpoints {
    pub fn validate(&self) -> Result<()> {
        if self.segmenter_urls.is_empty() {
            return Err(Error::Config("at least one segmenter url required".into()));
        }
        let mut urls: Vec<(&str, &String)> = vec![
            ("agent_url", &self.agent_url),
            ("editor_url", &self.editor_url),
            ("embedder_url", &self.embedder_url),
            ("verifier_url", &self.verifier_url),
        ];
        for url in &self.segmenter_urls {
            urls.push(("segmenter_urls", url));
        }
        for (name, url) in urls {
            if url.is_empty() {
                return Err(Error::Config(format!("{name} must not be empty")));
            }
            if !url.starts_with("http://") && !url.starts_with("https://") {
                return Err(Error::Config(format!(
                    "{name} '{url}' is not an http(s) url"
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of a foreground-detection query.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Detection {
    pub present: bool,
    pub description: String,
}

/// Verifier decision with human-readable reasons for rejections.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Verdict {
    pub accept: bool,
    pub reasons: Vec<String>,
}

/// The VLM-style agent: detection plus instruction writing.
pub trait AgentService {
    fn detect_foreground(&self, image: &Image) -> Result<Detection>;
    /// Instruction for removing the described foreground (and everything
    /// visually attached to it) from the image.
    fn removal_instruction(&self, image: &Image, description: &str) -> Result<String>;
    /// Instruction for erasing everything except the described foreground,
    /// leaving it on a white canvas.
    fn background_removal_instruction(&self, image: &Image, description: &str) -> Result<String>;
}

/// The image editor: applies an instruction, preserving dimensions.
pub trait EditorService {
    fn apply(&self, image: &Image, instruction: &str) -> Result<Image>;
}

/// One segmentation expert.
pub trait SegmenterService {
    fn id(&self) -> &str;
    fn segment(&self, image: &Image) -> Result<AlphaMask>;
}

/// Sample-level quality gate.
pub trait VerifierService {
    fn verify(&self, rendered: &Image, sample: &LayeredSample) -> Result<Verdict>;
}

/// A complete set of tool services, in-process or remote, used by one
/// pipeline run.
pub struct ServiceSet {
    pub agent: Box<dyn AgentService + Send + Sync>,
    pub editor: Box<dyn EditorService + Send + Sync>,
    pub segmenters: Vec<Box<dyn SegmenterService + Send + Sync>>,
    pub embedder: Box<dyn EmbeddingProvider + Send + Sync>,
    pub verifier: Box<dyn VerifierService + Send + Sync>,
    /// Service identities recorded into sample provenance.
    pub ids: BTreeMap<String, String>,
}

impl ServiceSet {
    /// Deterministic in-process mocks (see [`mock`]).
    pub fn mock(seed: u64) -> Self {
        mock::mock_service_set(seed)
    }

    /// HTTP clients speaking the wire protocol against real endpoints.
    pub fn http(endpoints: &ToolEndpoints, seed: u64) -> Result<Self> {
        client::http_service_set(endpoints, seed)
    }
}
