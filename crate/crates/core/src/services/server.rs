//! Loopback HTTP server exposing the mock services over the identical wire
//! protocol, with optional fault injection for client retry testing.

use super::mock::{MockAgent, MockEditor, MockSegmenter, MockVerifier, SegmenterBias};
use super::wire::{
    self, ApplyRequest, ApplyResponse, DetectRequest, DetectResponse, EmbedRequest, EmbedResponse,
    InstructionRequest, InstructionResponse, SegmentRequest, SegmentResponse, VerifyRequest,
    VerifyResponse, WireError, WireRequest, WireResponse,
};
use super::{AgentService, EditorService, SegmenterService, ToolEndpoints, VerifierService};
use crate::error::{Error, Result};
use crate::selector::{EmbeddingProvider, GridEmbedder};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

/// Failure modes injectable per endpoint prefix.
#[derive(Debug, Default)]
pub struct FaultPlan {
    /// Respond 500 to this many upcoming requests whose path contains the
    /// configured needle.
    fail_next: AtomicU32,
    needle: std::sync::Mutex<String>,
}

impl FaultPlan {
    /// Arms the plan: the next `count` requests whose path contains
    /// `needle` receive a 500 response.
    pub fn fail_requests(&self, needle: &str, count: u32) {
        *self.needle.lock().unwrap() = needle.to_string();
        self.fail_next.store(count, Ordering::SeqCst);
    }

    fn should_fail(&self, path: &str) -> bool {
        let needle = self.needle.lock().unwrap().clone();
        if needle.is_empty() || !path.contains(&needle) {
            return false;
        }
        self.fail_next
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
    }
}

/// A running mock server; shuts down on drop.
pub struct MockServer {
    base_url: String,
    server: Arc<tiny_http::Server>,
    handle: Option<JoinHandle<()>>,
    pub faults: Arc<FaultPlan>,
}

impl MockServer {
    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    /// Endpoint set pointing every service at this server.
    pub fn endpoints(&self, timeout_secs: u64, retries: u32) -> ToolEndpoints {
        ToolEndpoints {
            agent_url: format!("{}/agent", self.base_url),
            editor_url: format!("{}/editor", self.base_url),
            segmenter_urls: (0..3)
                .map(|i| format!("{}/segmenter/{i}", self.base_url))
                .collect(),
            embedder_url: format!("{}/embedder", self.base_url),
            verifier_url: format!("{}/verifier", self.base_url),
            timeout_secs,
            retries,
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn ok_json<T: Serialize>(payload: T) -> String {
    serde_json::to_string(&WireResponse::Ok { payload }).expect("serializable response")
}

fn err_json(message: String) -> String {
    serde_json::to_string(&WireResponse::<()>::Error {
        error: WireError { message },
    })
    .expect("serializable response")
}

fn parse_body<T: DeserializeOwned>(body: &str) -> Result<WireRequest<T>> {
    serde_json::from_str(body).map_err(Error::Json)
}

/// Dispatches one request path against the in-process mocks.
fn handle(path: &str, body: &str) -> std::result::Result<String, String> {
    let run = || -> Result<String> {
        match path {
            "/agent/detect_foreground" => {
                let req: WireRequest<DetectRequest> = parse_body(body)?;
                let image = wire::decode_image(&req.payload.image)?;
                let det = MockAgent.detect_foreground(&image)?;
                Ok(ok_json(DetectResponse {
                    present: det.present,
                    description: det.description,
                }))
            }
            "/agent/removal_instruction" => {
                let req: WireRequest<InstructionRequest> = parse_body(body)?;
                let image = wire::decode_image(&req.payload.image)?;
                let instruction = MockAgent.removal_instruction(&image, &req.payload.description)?;
                Ok(ok_json(InstructionResponse { instruction }))
            }
            "/agent/background_removal_instruction" => {
                let req: WireRequest<InstructionRequest> = parse_body(body)?;
                let image = wire::decode_image(&req.payload.image)?;
                let instruction =
                    MockAgent.background_removal_instruction(&image, &req.payload.description)?;
                Ok(ok_json(InstructionResponse { instruction }))
            }
            "/editor/apply" => {
                let req: WireRequest<ApplyRequest> = parse_body(body)?;
                let image = wire::decode_image(&req.payload.image)?;
                let out = MockEditor.apply(&image, &req.payload.instruction)?;
                Ok(ok_json(ApplyResponse {
                    image: wire::encode_image(&out)?,
                }))
            }
            "/embedder/embed" => {
                let req: WireRequest<EmbedRequest> = parse_body(body)?;
                let image = wire::decode_image(&req.payload.image)?;
                let embedding = GridEmbedder.embed(&image)?;
                Ok(ok_json(EmbedResponse {
                    embedding: embedding.as_slice().to_vec(),
                }))
            }
            "/verifier/verify" => {
                let req: WireRequest<VerifyRequest> = parse_body(body)?;
                let rendered = wire::decode_image(&req.payload.rendered)?;
                let sample = wire::decode_sample(&req.payload.sample)?;
                let verdict = MockVerifier::default().verify(&rendered, &sample)?;
                Ok(ok_json(VerifyResponse {
                    accept: verdict.accept,
                    reasons: verdict.reasons,
                }))
            }
            _ if path.starts_with("/segmenter/") => {
                let idx: usize = path
                    .trim_start_matches("/segmenter/")
                    .trim_end_matches("/segment")
                    .parse()
                    .map_err(|_| Error::Config(format!("bad segmenter path {path}")))?;
                let bias = match idx {
                    0 => SegmenterBias::Exact,
                    1 => SegmenterBias::Erode(1),
                    2 => SegmenterBias::Dilate(1),
                    _ => return Err(Error::Config(format!("no segmenter {idx}"))),
                };
                let req: WireRequest<SegmentRequest> = parse_body(body)?;
                let image = wire::decode_image(&req.payload.image)?;
                let mask = MockSegmenter::new(format!("segmenter_{idx}"), bias).segment(&image)?;
                Ok(ok_json(SegmentResponse {
                    mask: wire::encode_mask(&mask)?,
                }))
            }
            _ => Err(Error::Config(format!("unknown endpoint {path}"))),
        }
    };
    run().map_err(|e| e.to_string())
}

/// Spawns the mock server on an ephemeral loopback port.
pub fn spawn_mock_server() -> Result<MockServer> {
    let server = tiny_http::Server::http("127.0.0.1:0")
        .map_err(|e| Error::Config(format!("mock server bind: {e}")))?;
    let server = Arc::new(server);
    let port = match server.server_addr() {
        tiny_http::ListenAddr::IP(addr) => addr.port(),
        _ => return Err(Error::Config("mock server has no ip address".into())),
    };
    let faults = Arc::new(FaultPlan::default());
    let loop_server = Arc::clone(&server);
    let loop_faults = Arc::clone(&faults);
    let handle = std::thread::spawn(move || {
        for mut request in loop_server.incoming_requests() {
            let path = request.url().to_string();
            if loop_faults.should_fail(&path) {
                let _ = request.respond(
                    tiny_http::Response::from_string("injected fault").with_status_code(500),
                );
                continue;
            }
            let mut body = String::new();
            if request.as_reader().read_to_string(&mut body).is_err() {
                let _ = request.respond(
                    tiny_http::Response::from_string(err_json("unreadable body".into()))
                        .with_status_code(400),
                );
                continue;
            }
            let (status, text) = match handle(&path, &body) {
                Ok(json) => (200, json),
                Err(message) => (200, err_json(message)),
            };
            let header =
                tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
                    .expect("static header");
            let _ = request.respond(
                tiny_http::Response::from_string(text)
                    .with_status_code(status)
                    .with_header(header),
            );
        }
    });
    Ok(MockServer {
        base_url: format!("http://127.0.0.1:{port}"),
        server,
        handle: Some(handle),
        faults,
    })
}
