//! Deterministic in-process tool services for offline pipeline runs.
//!
//! The mocks operate on synthetic scenes: solid-color backgrounds with
//! axis-aligned rectangular objects and optional soft shadow patches
//! attached to them, none touching the frame border. The agent finds
//! objects by color deviation from the estimated background, the editor
//! executes `remove`/`isolate` rectangle instructions, the segmenters
//! threshold non-white pixels (with small morphological biases so fusion
//! has something to average), and the verifier applies coverage and
//! background-residual rule checks.
//!
//! Everything here is a pure function of its inputs, so a fixed seed makes
//! whole pipeline runs byte-identical.

use crate::compose::LayeredSample;
use crate::degrade::{dilate_alpha, erode_alpha};
use crate::error::{Error, Result};
use crate::image::{AlphaMask, Image};
use crate::selector::GridEmbedder;
use std::collections::BTreeMap;

use super::{AgentService, Detection, EditorService, SegmenterService, ServiceSet, Verdict, VerifierService};

/// Color deviation treated as a solid object.
const STRONG_TOL: f64 = 0.25;
/// Color deviation treated as an attached trace (shadow, halo).
const WEAK_TOL: f64 = 0.03;
/// Two strong pixels join one component only if their colors are this close.
const COLOR_JOIN_TOL: f64 = 0.15;
/// Components smaller than this are ignored as noise.
const MIN_AREA: usize = 9;

fn channel_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0, f64::max)
}

/// Per-channel median of the frame's border pixels.
fn estimate_background_color(image: &Image) -> [f64; 3] {
    let (h, w) = image.dims();
    let mut channels: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut push = |px: [f64; 3]| {
        for c in 0..3 {
            channels[c].push(px[c]);
        }
    };
    for x in 0..w {
        push(image.pixel(0, x));
        push(image.pixel(h - 1, x));
    }
    for y in 1..h.saturating_sub(1) {
        push(image.pixel(y, 0));
        push(image.pixel(y, w - 1));
    }
    let mut out = [0.0; 3];
    for c in 0..3 {
        channels[c].sort_by(|a, b| a.total_cmp(b));
        out[c] = channels[c][channels[c].len() / 2];
    }
    out
}

/// Half-open pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl PixelRect {
    fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    fn include(&mut self, y: usize, x: usize) {
        self.y0 = self.y0.min(y);
        self.x0 = self.x0.min(x);
        self.y1 = self.y1.max(y + 1);
        self.x1 = self.x1.max(x + 1);
    }
}

#[derive(Debug, Clone)]
struct Component {
    bbox: PixelRect,
    area: usize,
    pixels: Vec<usize>,
}

struct SceneAnalysis {
    bg_color: [f64; 3],
    /// Strong-component label per pixel, usize::MAX when background.
    labels: Vec<usize>,
    components: Vec<Component>,
}

fn analyze(image: &Image) -> SceneAnalysis {
    let (h, w) = image.dims();
    let bg_color = estimate_background_color(image);
    let strong: Vec<bool> = (0..h * w)
        .map(|i| channel_distance(image.pixel(i / w, i % w), bg_color) > STRONG_TOL)
        .collect();
    let mut labels = vec![usize::MAX; h * w];
    let mut components = Vec::new();
    for start in 0..h * w {
        if !strong[start] || labels[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut queue = vec![start];
        labels[start] = id;
        let mut bbox = PixelRect {
            y0: start / w,
            x0: start % w,
            y1: start / w + 1,
            x1: start % w + 1,
        };
        let mut pixels = Vec::new();
        while let Some(px) = queue.pop() {
            let (y, x) = (px / w, px % w);
            bbox.include(y, x);
            pixels.push(px);
            let here = image.pixel(y, x);
            let mut neighbors = Vec::with_capacity(4);
            if y > 0 {
                neighbors.push(px - w);
            }
            if y + 1 < h {
                neighbors.push(px + w);
            }
            if x > 0 {
                neighbors.push(px - 1);
            }
            if x + 1 < w {
                neighbors.push(px + 1);
            }
            for n in neighbors {
                if strong[n]
                    && labels[n] == usize::MAX
                    && channel_distance(image.pixel(n / w, n % w), here) <= COLOR_JOIN_TOL
                {
                    labels[n] = id;
                    queue.push(n);
                }
            }
        }
        let area = pixels.len();
        components.push(Component { bbox, area, pixels });
    }
    SceneAnalysis {
        bg_color,
        labels,
        components,
    }
}

/// Picks the frontmost component: prefer rectangle-complete components
/// (their visible pixels fill their bounding box, so nothing occludes
/// them), then larger area, then topmost-leftmost.
fn pick_front(components: &[Component]) -> Option<usize> {
    let candidates: Vec<usize> = (0..components.len())
        .filter(|&i| components[i].area >= MIN_AREA)
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let score = |i: usize| {
        let c = &components[i];
        let complete = c.area == c.bbox.area();
        (complete, c.area, std::cmp::Reverse((c.bbox.y0, c.bbox.x0)))
    };
    candidates.into_iter().max_by_key(|&i| score(i))
}

/// Grows the removal region from a component over attached weak pixels
/// (shadows, halos), never crossing into other strong components.
fn attached_region(image: &Image, analysis: &SceneAnalysis, id: usize) -> PixelRect {
    let (h, w) = image.dims();
    let mut visited = vec![false; h * w];
    let mut queue: Vec<usize> = analysis.components[id].pixels.clone();
    for &px in &queue {
        visited[px] = true;
    }
    let mut bbox = analysis.components[id].bbox;
    while let Some(px) = queue.pop() {
        let (y, x) = (px / w, px % w);
        bbox.include(y, x);
        let mut neighbors = Vec::with_capacity(4);
        if y > 0 {
            neighbors.push(px - w);
        }
        if y + 1 < h {
            neighbors.push(px + w);
        }
        if x > 0 {
            neighbors.push(px - 1);
        }
        if x + 1 < w {
            neighbors.push(px + 1);
        }
        for n in neighbors {
            if visited[n] {
                continue;
            }
            let foreign = analysis.labels[n] != usize::MAX && analysis.labels[n] != id;
            if foreign {
                continue;
            }
            let weak =
                channel_distance(image.pixel(n / w, n % w), analysis.bg_color) > WEAK_TOL;
            if weak {
                visited[n] = true;
                queue.push(n);
            }
        }
    }
    bbox
}

fn format_rect(r: PixelRect) -> String {
    format!("{},{},{},{}", r.y0, r.x0, r.y1, r.x1)
}

fn parse_rect(text: &str) -> Result<PixelRect> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidParameter {
            name: "rect",
            message: format!("{text}: {e}"),
        })?;
    if parts.len() != 4 || parts[0] >= parts[2] || parts[1] >= parts[3] {
        return Err(Error::InvalidParameter {
            name: "rect",
            message: format!("{text} is not a valid y0,x0,y1,x1 rectangle"),
        });
    }
    Ok(PixelRect {
        y0: parts[0],
        x0: parts[1],
        y1: parts[2],
        x1: parts[3],
    })
}

fn format_color(c: [f64; 3]) -> String {
    format!("{:.6},{:.6},{:.6}", c[0], c[1], c[2])
}

fn parse_color(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidParameter {
            name: "color",
            message: format!("{text}: {e}"),
        })?;
    if parts.len() != 3 {
        return Err(Error::InvalidParameter {
            name: "color",
            message: format!("{text} is not an r,g,b triple"),
        });
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn field<'a>(description: &'a str, key: &str) -> Result<&'a str> {
    description
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix(&format!("{key}=")))
        .ok_or_else(|| Error::InvalidParameter {
            name: "description",
            message: format!("missing {key}= field in '{description}'"),
        })
}

/// Pixel-level stand-in for the VLM agent.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockAgent;

impl AgentService for MockAgent {
    fn detect_foreground(&self, image: &Image) -> Result<Detection> {
        let analysis = analyze(image);
        match pick_front(&analysis.components) {
            Some(id) => {
                let core = analysis.components[id].bbox;
                let full = attached_region(image, &analysis, id);
                let description = format!(
                    "entity core={} full={} fill={}",
                    format_rect(core),
                    format_rect(full),
                    format_color(analysis.bg_color),
                );
                Ok(Detection {
                    present: true,
                    description,
                })
            }
            None => Ok(Detection {
                present: false,
                description: String::new(),
            }),
        }
    }

    fn removal_instruction(&self, _image: &Image, description: &str) -> Result<String> {
        let full = field(description, "full")?;
        let fill = field(description, "fill")?;
        Ok(format!("remove rect={full} fill={fill}"))
    }

    fn background_removal_instruction(&self, _image: &Image, description: &str) -> Result<String> {
        let core = field(description, "core")?;
        Ok(format!("isolate rect={core}"))
    }
}

/// Executes `remove rect=.. fill=..` and `isolate rect=..` instructions.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockEditor;

impl EditorService for MockEditor {
    fn apply(&self, image: &Image, instruction: &str) -> Result<Image> {
        let (h, w) = image.dims();
        if let Some(rest) = instruction.strip_prefix("remove ") {
            let rect = parse_rect(field(rest, "rect")?)?;
            let fill = parse_color(field(rest, "fill")?)?;
            let mut data = image.data().to_vec();
            for y in rect.y0..rect.y1.min(h) {
                for x in rect.x0..rect.x1.min(w) {
                    for c in 0..3 {
                        data[(y * w + x) * 3 + c] = fill[c];
                    }
                }
            }
            return Image::new(h, w, data);
        }
        if let Some(rest) = instruction.strip_prefix("isolate ") {
            let rect = parse_rect(field(rest, "rect")?)?;
            let mut data = vec![1.0; h * w * 3];
            for y in rect.y0..rect.y1.min(h) {
                for x in rect.x0..rect.x1.min(w) {
                    let px = image.pixel(y, x);
                    for c in 0..3 {
                        data[(y * w + x) * 3 + c] = px[c];
                    }
                }
            }
            return Image::new(h, w, data);
        }
        Err(Error::InvalidParameter {
            name: "instruction",
            message: format!("unsupported instruction '{instruction}'"),
        })
    }
}

/// Boundary bias applied by one mock expert, so an ensemble has genuine
/// disagreement for fusion to average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmenterBias {
    Exact,
    Erode(usize),
    Dilate(usize),
}

/// Thresholds non-white pixels of a white-background crop.
#[derive(Debug, Clone)]
pub struct MockSegmenter {
    id: String,
    bias: SegmenterBias,
}

impl MockSegmenter {
    pub fn new(id: impl Into<String>, bias: SegmenterBias) -> Self {
        Self {
            id: id.into(),
            bias,
        }
    }
}

impl SegmenterService for MockSegmenter {
    fn id(&self) -> &str {
        &self.id
    }

    fn segment(&self, image: &Image) -> Result<AlphaMask> {
        let (h, w) = image.dims();
        let data: Vec<f64> = (0..h * w)
            .map(|i| {
                let px = image.pixel(i / w, i % w);
                let non_white = channel_distance(px, [1.0, 1.0, 1.0]) > 0.02;
                if non_white {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let mask = AlphaMask::new(h, w, data)?;
        match self.bias {
            SegmenterBias::Exact => Ok(mask),
            SegmenterBias::Erode(r) => erode_alpha(&mask, r),
            SegmenterBias::Dilate(r) => dilate_alpha(&mask, r),
        }
    }
}

/// Rule-based sample gate: per-layer alpha coverage bounds and a
/// background-region residual ceiling outside the foreground supports.
#[derive(Debug, Clone, Copy)]
pub struct MockVerifier {
    pub coverage_min: f64,
    pub coverage_max: f64,
    pub bg_residual_mean_max: f64,
}

impl Default for MockVerifier {
    fn default() -> Self {
        Self {
            coverage_min: 0.005,
            coverage_max: 0.90,
            bg_residual_mean_max: 0.12,
        }
    }
}

impl VerifierService for MockVerifier {
    fn verify(&self, rendered: &Image, sample: &LayeredSample) -> Result<Verdict> {
        let mut reasons = Vec::new();
        let (h, w) = sample.dims();
        for layer in sample.layers() {
            let coverage = layer.alpha().mass() / (h * w) as f64;
            if coverage < self.coverage_min || coverage > self.coverage_max {
                reasons.push(format!(
                    "layer {} alpha coverage {:.4} outside [{}, {}]",
                    layer.order_index(),
                    coverage,
                    self.coverage_min,
                    self.coverage_max
                ));
            }
        }
        // union of supports at alpha > 0.5
        let mut support = vec![false; h * w];
        for layer in sample.layers() {
            for (s, &a) in support.iter_mut().zip(layer.alpha().data()) {
                *s |= a > 0.5;
            }
        }
        let mut residual = 0.0;
        let mut count = 0usize;
        for px in 0..h * w {
            if support[px] {
                continue;
            }
            for c in 0..3 {
                residual += (rendered.data()[px * 3 + c] - sample.source().data()[px * 3 + c]).abs();
            }
            count += 3;
        }
        if count > 0 {
            let mean = residual / count as f64;
            if mean > self.bg_residual_mean_max {
                reasons.push(format!(
                    "background-region residual {:.4} exceeds {}",
                    mean, self.bg_residual_mean_max
                ));
            }
        }
        Ok(Verdict {
            accept: reasons.is_empty(),
            reasons,
        })
    }
}

/// Standard mock set: one agent, one editor, three biased segmenters, the
/// grid embedder, and the rule verifier. The seed is recorded for
/// provenance; the mocks themselves are pure.
pub fn mock_service_set(_seed: u64) -> ServiceSet {
    let mut ids = BTreeMap::new();
    ids.insert("agent".into(), "mock-agent/1".into());
    ids.insert("editor".into(), "mock-editor/1".into());
    ids.insert("segmenter_0".into(), "mock-seg-exact".into());
    ids.insert("segmenter_1".into(), "mock-seg-erode1".into());
    ids.insert("segmenter_2".into(), "mock-seg-dilate1".into());
    ids.insert("embedder".into(), "grid-embedder-8x8".into());
    ids.insert("verifier".into(), "mock-verifier/1".into());
    ServiceSet {
        agent: Box::new(MockAgent),
        editor: Box::new(MockEditor),
        segmenters: vec![
            Box::new(MockSegmenter::new("mock-seg-exact", SegmenterBias::Exact)),
            Box::new(MockSegmenter::new("mock-seg-erode1", SegmenterBias::Erode(1))),
            Box::new(MockSegmenter::new("mock-seg-dilate1", SegmenterBias::Dilate(1))),
        ],
        embedder: Box::new(GridEmbedder),
        verifier: Box::new(MockVerifier::default()),
        ids,
    }
}
