//! HTTP clients implementing the tool-service traits over the wire
//! protocol, with exponential-backoff retries and idempotent request ids.

use super::wire::{
    self, ApplyRequest, ApplyResponse, DetectRequest, DetectResponse, EmbedRequest, EmbedResponse,
    InstructionRequest, InstructionResponse, SegmentRequest, SegmentResponse, VerifyRequest,
    VerifyResponse, WireRequest, WireResponse,
};
use super::{
    AgentService, Detection, EditorService, SegmenterService, ServiceSet, ToolEndpoints, Verdict,
    VerifierService,
};
use crate::compose::LayeredSample;
use crate::error::{Error, Result};
use crate::image::{AlphaMask, Image};
use crate::selector::{EmbeddingProvider, EmbeddingVector};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

/// Call policy shared by all clients of one run.
#[derive(Debug, Clone)]
pub struct CallPolicy {
    pub timeout: Duration,
    /// Retry attempts after the first try.
    pub retries: u32,
    /// First backoff delay; doubles per retry.
    pub backoff_base: Duration,
    /// Seed forwarded on every request.
    pub seed: u64,
}

impl CallPolicy {
    pub fn from_endpoints(endpoints: &ToolEndpoints, seed: u64) -> Self {
        Self {
            timeout: Duration::from_secs(endpoints.timeout_secs.max(1)),
            retries: endpoints.retries,
            backoff_base: Duration::from_millis(50),
            seed,
        }
    }
}

/// One service's base URL plus the shared policy and a request counter.
///
/// Logical requests get one id each (`<service>-<seed>-<n>`); retries reuse
/// it so the server side can deduplicate.
struct Caller {
    service: &'static str,
    base_url: String,
    agent: ureq::Agent,
    policy: CallPolicy,
    counter: AtomicU64,
}

impl Caller {
    fn new(service: &'static str, base_url: &str, policy: CallPolicy) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(policy.timeout)
            .build();
        Self {
            service,
            base_url: base_url.trim_end_matches('/').to_string(),
            agent,
            policy,
            counter: AtomicU64::new(0),
        }
    }

    fn call<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        endpoint: &str,
        payload: Req,
    ) -> Result<Resp> {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let request_id = format!("{}-{}-{n}", self.service, self.policy.seed);
        let url = format!("{}/{}", self.base_url, endpoint);
        let body = serde_json::to_value(WireRequest {
            request_id: request_id.clone(),
            seed: self.policy.seed,
            payload,
        })?;

        let attempts = self.policy.retries + 1;
        let mut last_failure = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = self.policy.backoff_base * 2u32.pow(attempt - 1);
                std::thread::sleep(backoff);
            }
            match self.agent.post(&url).send_json(body.clone()) {
                Ok(response) => {
                    let parsed: WireResponse<Resp> =
                        response.into_json().map_err(|e| Error::Service {
                            service: self.service.into(),
                            endpoint: url.clone(),
                            attempts: attempt + 1,
                            message: format!("malformed response: {e}"),
                        })?;
                    return match parsed {
                        WireResponse::Ok { payload } => Ok(payload),
                        // An application-level error is authoritative;
                        // retrying would not change the answer.
                        WireResponse::Error { error } => Err(Error::Service {
                            service: self.service.into(),
                            endpoint: url.clone(),
                            attempts: attempt + 1,
                            message: error.message,
                        }),
                    };
                }
                Err(ureq::Error::Status(code, _)) => {
                    last_failure = format!("http status {code}");
                }
                Err(ureq::Error::Transport(t)) => {
                    last_failure = format!("transport: {t}");
                }
            }
        }
        Err(Error::Service {
            service: self.service.into(),
            endpoint: url,
            attempts,
            message: format!("request {request_id} failed: {last_failure}"),
        })
    }
}

pub struct HttpAgent {
    caller: Caller,
}

impl HttpAgent {
    pub fn new(base_url: &str, policy: CallPolicy) -> Self {
        Self {
            caller: Caller::new("agent", base_url, policy),
        }
    }
}

impl AgentService for HttpAgent {
    fn detect_foreground(&self, image: &Image) -> Result<Detection> {
        let resp: DetectResponse = self.caller.call(
            "detect_foreground",
            DetectRequest {
                image: wire::encode_image(image)?,
            },
        )?;
        Ok(Detection {
            present: resp.present,
            description: resp.description,
        })
    }

    fn removal_instruction(&self, image: &Image, description: &str) -> Result<String> {
        let resp: InstructionResponse = self.caller.call(
            "removal_instruction",
            InstructionRequest {
                image: wire::encode_image(image)?,
                description: description.to_string(),
            },
        )?;
        Ok(resp.instruction)
    }

    fn background_removal_instruction(&self, image: &Image, description: &str) -> Result<String> {
        let resp: InstructionResponse = self.caller.call(
            "background_removal_instruction",
            InstructionRequest {
                image: wire::encode_image(image)?,
                description: description.to_string(),
            },
        )?;
        Ok(resp.instruction)
    }
}

pub struct HttpEditor {
    caller: Caller,
}

impl HttpEditor {
    pub fn new(base_url: &str, policy: CallPolicy) -> Self {
        Self {
            caller: Caller::new("editor", base_url, policy),
        }
    }
}

impl EditorService for HttpEditor {
    fn apply(&self, image: &Image, instruction: &str) -> Result<Image> {
        let resp: ApplyResponse = self.caller.call(
            "apply",
            ApplyRequest {
                image: wire::encode_image(image)?,
                instruction: instruction.to_string(),
            },
        )?;
        let out = wire::decode_image(&resp.image)?;
        if out.dims() != image.dims() {
            return Err(Error::dims("editor apply", image.dims(), out.dims()));
        }
        Ok(out)
    }
}

pub struct HttpSegmenter {
    id: String,
    caller: Caller,
}

impl HttpSegmenter {
    pub fn new(id: impl Into<String>, base_url: &str, policy: CallPolicy) -> Self {
        Self {
            id: id.into(),
            caller: Caller::new("segmenter", base_url, policy),
        }
    }
}

impl SegmenterService for HttpSegmenter {
    fn id(&self) -> &str {
        &self.id
    }

    fn segment(&self, image: &Image) -> Result<AlphaMask> {
        let resp: SegmentResponse = self.caller.call(
            "segment",
            SegmentRequest {
                image: wire::encode_image(image)?,
            },
        )?;
        wire::decode_mask(&resp.mask)
    }
}

pub struct HttpEmbedder {
    dims: usize,
    caller: Caller,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, policy: CallPolicy, dims: usize) -> Self {
        Self {
            dims,
            caller: Caller::new("embedder", base_url, policy),
        }
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn dims(&self) -> usize {
        self.dims
    }

    fn embed(&self, image: &Image) -> Result<EmbeddingVector> {
        let resp: EmbedResponse = self.caller.call(
            "embed",
            EmbedRequest {
                image: wire::encode_image(image)?,
            },
        )?;
        EmbeddingVector::new(resp.embedding)
    }
}

pub struct HttpVerifier {
    caller: Caller,
}

impl HttpVerifier {
    pub fn new(base_url: &str, policy: CallPolicy) -> Self {
        Self {
            caller: Caller::new("verifier", base_url, policy),
        }
    }
}

impl VerifierService for HttpVerifier {
    fn verify(&self, rendered: &Image, sample: &LayeredSample) -> Result<Verdict> {
        let resp: VerifyResponse = self.caller.call(
            "verify",
            VerifyRequest {
                rendered: wire::encode_image(rendered)?,
                sample: wire::encode_sample(sample)?,
            },
        )?;
        Ok(Verdict {
            accept: resp.accept,
            reasons: resp.reasons,
        })
    }
}

/// Builds a full HTTP-backed service set from endpoint configuration.
pub fn http_service_set(endpoints: &ToolEndpoints, seed: u64) -> Result<ServiceSet> {
    endpoints.validate()?;
    let policy = CallPolicy::from_endpoints(endpoints, seed);
    let mut ids = std::collections::BTreeMap::new();
    ids.insert("agent".into(), endpoints.agent_url.clone());
    ids.insert("editor".into(), endpoints.editor_url.clone());
    for (i, url) in endpoints.segmenter_urls.iter().enumerate() {
        ids.insert(format!("segmenter_{i}"), url.clone());
    }
    ids.insert("embedder".into(), endpoints.embedder_url.clone());
    ids.insert("verifier".into(), endpoints.verifier_url.clone());
    Ok(ServiceSet {
        agent: Box::new(HttpAgent::new(&endpoints.agent_url, policy.clone())),
        editor: Box::new(HttpEditor::new(&endpoints.editor_url, policy.clone())),
        segmenters: endpoints
            .segmenter_urls
            .iter()
            .enumerate()
            .map(|(i, url)| {
                Box::new(HttpSegmenter::new(format!("segmenter_{i}"), url, policy.clone()))
                    as Box<dyn SegmenterService + Send + Sync>
            })
            .collect(),
        embedder: Box::new(HttpEmbedder::new(&endpoints.embedder_url, policy.clone(), 64)),
        verifier: Box::new(HttpVerifier::new(&endpoints.verifier_url, policy)),
        ids,
    })
}
