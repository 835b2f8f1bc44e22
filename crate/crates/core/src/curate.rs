//! The three collaborative curators and the per-image pipeline.
//!
//! Background curation (BIC) loops detect-instruct-edit until no foreground
//! remains, collecting intermediate backgrounds and reusable foreground
//! descriptions. Foreground curation (FIC) revisits each step, isolates the
//! detected entity on white, and fuses an ensemble of expert mattes into an
//! RGBA layer. Layered curation (LIC) de-duplicates both pools, runs the
//! proposal selector, renders and verifies each proposal, and materializes
//! accepted ones as layered samples with shadow residuals.

use crate::compose::{composite, shadow_residual, ForegroundLayer, LayeredSample};
use crate::dataset::{write_sample, Provenance, SampleManifest};
use crate::error::{Error, Result};
use crate::fusion::{fuse_masks, make_rgba, resample_mask, ExpertMaskSet};
use crate::image::Image;
use crate::selector::{dedup, select_proposals, EmbeddingProvider, Proposal, SelectorConfig, SourceRef};
use crate::services::{AgentService, EditorService, SegmenterService, ServiceSet, VerifierService};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Round-trip tolerance every sample must satisfy before persistence.
pub const CURATION_ROUND_TRIP_TOLERANCE: f64 = 1e-6;

/// Pipeline-level knobs; thresholds are recorded into every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratorConfig {
    /// BIC iteration cap; also bounds the number of foreground layers.
    pub max_steps: usize,
    pub selector: SelectorConfig,
    /// De-duplication threshold for both pools.
    pub tau_dup: f64,
    /// Run seed, forwarded to services and recorded in provenance.
    pub seed: u64,
}

impl Default for CuratorConfig {
    fn default() -> Self {
        Self {
            max_steps: 5,
            selector: SelectorConfig::default(),
            tau_dup: 0.95,
            seed: 0,
        }
    }
}

/// One BIC step as recorded in the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicStep {
    pub description: String,
    pub instruction: String,
}

/// Output of the background curation loop.
#[derive(Debug, Clone)]
pub struct BackgroundCuration {
    /// Background candidates, one per successful removal step.
    pub backgrounds: Vec<Image>,
    /// The image each detection ran on; aligned with `descriptions`.
    pub step_inputs: Vec<Image>,
    /// Foreground descriptions, reusable by foreground curation.
    pub descriptions: Vec<String>,
    pub steps: Vec<BicStep>,
    pub warnings: Vec<String>,
}

/// Iterates foreground removal until the agent reports a clean image, the
/// editor stops making progress, or the step cap is reached.
pub fn curate_backgrounds(
    image: &Image,
    agent: &dyn AgentService,
    editor: &dyn EditorService,
    max_steps: usize,
) -> Result<BackgroundCuration> {
    if max_steps == 0 {
        return Err(Error::InvalidParameter {
            name: "max_steps",
            message: "must be >= 1".into(),
        });
    }
    let mut out = BackgroundCuration {
        backgrounds: Vec::new(),
        step_inputs: Vec::new(),
        descriptions: Vec::new(),
        steps: Vec::new(),
        warnings: Vec::new(),
    };
    let mut current = image.clone();
    let mut exhausted = true;
    for _ in 0..max_steps {
        let detection = agent.detect_foreground(&current)?;
        if !detection.present {
            exhausted = false;
            break;
        }
        let instruction = agent.removal_instruction(&current, &detection.description)?;
        let next = editor.apply(&current, &instruction)?;
        if next.dims() != current.dims() {
            return Err(Error::dims("editor output", current.dims(), next.dims()));
        }
        out.step_inputs.push(current.clone());
        out.descriptions.push(detection.description.clone());
        out.steps.push(BicStep {
            description: detection.description,
            instruction,
        });
        if next == current {
            out.warnings
                .push("editor made no progress; stopping background curation".into());
            exhausted = false;
            break;
        }
        out.backgrounds.push(next.clone());
        current = next;
    }
    if exhausted && agent.detect_foreground(&current)?.present {
        out.warnings.push(format!(
            "step cap {max_steps} reached with foreground still present"
        ));
    }
    Ok(out)
}

/// Output of foreground curation; failures are per-step, not fatal.
#[derive(Debug, Clone)]
pub struct ForegroundCuration {
    /// RGBA layers ordered front-to-back with contiguous order indices.
    pub layers: Vec<ForegroundLayer>,
    pub failures: Vec<String>,
}

/// Extracts one RGBA foreground per BIC step: isolate the entity on white,
/// collect one matte per expert, fuse, and assemble.
pub fn curate_foregrounds(
    step_inputs: &[Image],
    descriptions: &[String],
    agent: &dyn AgentService,
    editor: &dyn EditorService,
    segmenters: &[Box<dyn SegmenterService + Send + Sync>],
) -> Result<ForegroundCuration> {
    if step_inputs.len() != descriptions.len() {
        return Err(Error::InvalidParameter {
            name: "descriptions",
            message: format!(
                "{} descriptions for {} step inputs",
                descriptions.len(),
                step_inputs.len()
            ),
        });
    }
    if segmenters.is_empty() {
        return Err(Error::EmptyInput("no segmenters configured"));
    }
    let mut layers = Vec::new();
    let mut failures = Vec::new();
    for (i, (input, description)) in step_inputs.iter().zip(descriptions).enumerate() {
        let extract = || -> Result<ForegroundLayer> {
            let instruction = agent.background_removal_instruction(input, description)?;
            let white_crop = editor.apply(input, &instruction)?;
            if white_crop.dims() != input.dims() {
                return Err(Error::dims("editor output", input.dims(), white_crop.dims()));
            }
            let (h, w) = white_crop.dims();
            let mut masks = Vec::with_capacity(segmenters.len());
            let mut ids = Vec::with_capacity(segmenters.len());
            for segmenter in segmenters {
                let mask = segmenter.segment(&white_crop)?;
                masks.push(resample_mask(&mask, h, w)?);
                ids.push(segmenter.id().to_string());
            }
            let fused = fuse_masks(&ExpertMaskSet::new(masks, ids)?)?;
            make_rgba(&white_crop, &fused)
        };
        match extract() {
            Ok(layer) => layers.push(layer),
            Err(e) => failures.push(format!("step {i}: {e}")),
        }
    }
    let layers = layers
        .into_iter()
        .enumerate()
        .map(|(pos, layer)| layer.with_order(pos + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(ForegroundCuration { layers, failures })
}

/// Verifier outcome for one proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalStatus {
    Accepted,
    Rejected,
    /// Verifier was unreachable; the proposal is neither accepted nor
    /// silently dropped.
    Pending,
}

/// One proposal's audit entry; every proposal appears exactly once. The
/// thresholds in force are recorded alongside the ids and scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalAudit {
    pub proposal: Proposal,
    pub thresholds: SelectorConfig,
    pub status: ProposalStatus,
    pub reasons: Vec<String>,
}

/// Output of layered curation.
pub struct LayeredCuration {
    /// Accepted samples paired with the proposals they came from.
    pub samples: Vec<(Proposal, LayeredSample)>,
    pub audits: Vec<ProposalAudit>,
    pub kept_backgrounds: Vec<usize>,
    pub kept_foregrounds: Vec<usize>,
}

/// De-duplicates both pools, selects proposals, renders and verifies each,
/// and materializes accepted ones with their shadow residuals.
pub fn curate_layered(
    image: &Image,
    backgrounds: &[Image],
    foregrounds: &[ForegroundLayer],
    provider: &dyn EmbeddingProvider,
    config: &CuratorConfig,
    verifier: &dyn VerifierService,
) -> Result<LayeredCuration> {
    if backgrounds.is_empty() {
        return Err(Error::EmptyInput("background pool is empty"));
    }
    if foregrounds.is_empty() {
        return Err(Error::EmptyInput("foreground pool is empty"));
    }
    let kept_backgrounds = dedup(backgrounds, provider, config.tau_dup)?;
    let fg_crops: Vec<Image> = foregrounds.iter().map(|l| l.rgb().clone()).collect();
    let mut kept_foregrounds = dedup(&fg_crops, provider, config.tau_dup)?;
    kept_foregrounds.truncate(config.selector.max_foregrounds);

    let bg_pool: Vec<Image> = kept_backgrounds
        .iter()
        .map(|&i| backgrounds[i].clone())
        .collect();
    let fg_pool: Vec<ForegroundLayer> = kept_foregrounds
        .iter()
        .enumerate()
        .map(|(pos, &i)| foregrounds[i].clone().with_order(pos + 1))
        .collect::<Result<Vec<_>>>()?;

    let proposals = select_proposals(image, &bg_pool, &fg_pool, provider, &config.selector)?;

    let mut samples = Vec::new();
    let mut audits = Vec::with_capacity(proposals.len());
    for proposal in proposals {
        let source_img = match proposal.source_ref {
            SourceRef::Original => image.clone(),
            SourceRef::Background { index } => bg_pool[index].clone(),
        };
        let layers: Vec<ForegroundLayer> = proposal
            .foreground_ids
            .iter()
            .enumerate()
            .map(|(pos, &i)| fg_pool[i].clone().with_order(pos + 1))
            .collect::<Result<Vec<_>>>()?;
        let rendered = composite(&bg_pool[proposal.background_ref], &layers)?;
        let shadow = shadow_residual(&source_img, &rendered)?;
        let sample = LayeredSample::new(
            source_img,
            bg_pool[proposal.background_ref].clone(),
            layers,
            Some(shadow),
        )?;
        sample.verify_round_trip(CURATION_ROUND_TRIP_TOLERANCE)?;

        let (status, reasons) = match verifier.verify(&rendered, &sample) {
            Ok(verdict) if verdict.accept => (ProposalStatus::Accepted, verdict.reasons),
            Ok(verdict) => (ProposalStatus::Rejected, verdict.reasons),
            Err(e) => (
                ProposalStatus::Pending,
                vec![format!("verifier unavailable: {e}")],
            ),
        };
        if status == ProposalStatus::Accepted {
            samples.push((proposal.clone(), sample));
        }
        audits.push(ProposalAudit {
            proposal,
            thresholds: config.selector,
            status,
            reasons,
        });
    }
    Ok(LayeredCuration {
        samples,
        audits,
        kept_backgrounds,
        kept_foregrounds,
    })
}

/// Per-image audit log: every instruction, pool decision, proposal verdict,
/// and written sample, or the structured error that stopped the job.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageAudit {
    pub image_id: String,
    pub bic_steps: Vec<BicStep>,
    pub bic_warnings: Vec<String>,
    pub fic_failures: Vec<String>,
    pub kept_backgrounds: Vec<usize>,
    pub kept_foregrounds: Vec<usize>,
    pub proposals: Vec<ProposalAudit>,
    pub samples: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Result of one image's pipeline run.
pub struct PipelineOutcome {
    pub manifests: Vec<SampleManifest>,
    pub audit: ImageAudit,
}

/// Runs BIC, FIC, and LIC for one image and persists accepted samples under
/// `out_dir/<image_id>_pNNN/`. Failures never panic the batch: they land in
/// the audit's `error` field.
pub fn run_pipeline(
    image_id: &str,
    image: &Image,
    services: &ServiceSet,
    config: &CuratorConfig,
    out_dir: &Path,
) -> PipelineOutcome {
    let mut audit = ImageAudit {
        image_id: image_id.to_string(),
        ..ImageAudit::default()
    };
    let mut manifests = Vec::new();

    let mut run = || -> Result<()> {
        let bic = curate_backgrounds(
            image,
            services.agent.as_ref(),
            services.editor.as_ref(),
            config.max_steps,
        )?;
        audit.bic_steps = bic.steps.clone();
        audit.bic_warnings = bic.warnings.clone();
        if bic.backgrounds.is_empty() {
            return Ok(());
        }
        let fic = curate_foregrounds(
            &bic.step_inputs,
            &bic.descriptions,
            services.agent.as_ref(),
            services.editor.as_ref(),
            &services.segmenters,
        )?;
        audit.fic_failures = fic.failures.clone();
        if fic.layers.is_empty() {
            return Ok(());
        }
        let lic = curate_layered(
            image,
            &bic.backgrounds,
            &fic.layers,
            services.embedder.as_ref(),
            config,
            services.verifier.as_ref(),
        )?;
        audit.kept_backgrounds = lic.kept_backgrounds.clone();
        audit.kept_foregrounds = lic.kept_foregrounds.clone();
        audit.proposals = lic.audits.clone();

        for (index, (proposal, sample)) in lic.samples.iter().enumerate() {
            let sample_id = format!("{image_id}_p{index:03}");
            let provenance = Provenance {
                selector: Some(config.selector),
                tau_dup: Some(config.tau_dup),
                seed: Some(config.seed),
                service_ids: services.ids.clone(),
                degradations: Vec::new(),
                global_similarity: Some(proposal.global_similarity),
                source_image: Some(image_id.to_string()),
            };
            let manifest = write_sample(sample, &out_dir.join(&sample_id), provenance)?;
            audit.samples.push(sample_id);
            manifests.push(manifest);
        }
        Ok(())
    };
    if let Err(e) = run() {
        audit.error = Some(e.to_string());
    }

    // Audit log is best-effort; a failed write is recorded, not fatal.
    let audit_dir = out_dir.join("audit");
    if std::fs::create_dir_all(&audit_dir).is_ok() {
        if let Ok(mut json) = serde_json::to_vec_pretty(&audit) {
            json.push(b'\n');
            let _ = std::fs::write(audit_dir.join(format!("{image_id}.json")), json);
        }
    }
    PipelineOutcome { manifests, audit }
}
