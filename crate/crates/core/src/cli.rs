//! Subcommand implementations behind the `layerlab` binary.
//!
//! Commands are plain functions over paths and resolved configs so
//! integration tests can drive them in-process; the binary only parses
//! flags and maps errors to exit codes (0 success, 2 usage, 3 config,
//! 4 fatal IO).

use crate::compose::{composite, recompose, shadow_residual};
use crate::config::RunConfig;
use crate::curate::{run_pipeline, ImageAudit};
use crate::dataset::{
    self, bucketize, png_to_image, read_manifest, read_sample, resize_within, scan_dataset,
};
use crate::degrade::{degrade_layer, DegradationKind, DegradationSpec};
use crate::error::{Error, Result};
use crate::flow::{
    combined_loss, interpolate, interpolate_aux, predict_batch, sample_flow_batch, velocity_targets,
    OraclePredictor, Tensor,
};
use crate::metrics::{evaluate_dataset, EvalReport};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Maps an error to the documented process exit code.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) => 3,
        Error::Io { .. }
        | Error::Png { .. }
        | Error::Json(_)
        | Error::UnknownSchema { .. }
        | Error::InvalidManifest { .. }
        | Error::InvariantViolation { .. }
        | Error::Service { .. } => 4,
        _ => 2,
    }
}

#[derive(Debug, Serialize)]
struct ImageSummary {
    image_id: String,
    samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    seed: u64,
    worker_count: usize,
    images: Vec<ImageSummary>,
    total_samples: usize,
}

/// `curate`: runs the full pipeline over every PNG in `input_dir`, writing
/// samples, per-image audit logs, and a run summary under `out_dir`.
///
/// Per-image failures are recorded and reported; only configuration or
/// fatal IO problems abort the run.
pub fn cmd_curate(input_dir: &Path, out_dir: &Path, config: &RunConfig) -> Result<usize> {
    config.validate()?;
    if !input_dir.is_dir() {
        return Err(Error::Config(format!(
            "input directory {} does not exist",
            input_dir.display()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut images: Vec<(String, PathBuf)> = std::fs::read_dir(input_dir)
        .map_err(|e| Error::io(input_dir.display().to_string(), e))?
        .filter_map(|entry| entry.ok())
        .map(|entry| entry.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .filter_map(|p| {
            p.file_stem()
                .and_then(|s| s.to_str())
                .map(|s| (s.to_string(), p.clone()))
        })
        .collect();
    images.sort();

    let services = config.services()?;
    let curator_config = config.curator_config();
    let max_side = config.effective_max_side();
    let workers = config.effective_workers().min(images.len().max(1));

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<ImageSummary>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= images.len() {
                    break;
                }
                let (image_id, path) = &images[index];
                let summary = match std::fs::read(path)
                    .map_err(|e| Error::io(path.display().to_string(), e))
                    .and_then(|bytes| png_to_image(&bytes))
                    .and_then(|img| resize_within(&img, max_side))
                {
                    Ok(image) => {
                        let outcome =
                            run_pipeline(image_id, &image, &services, &curator_config, out_dir);
                        ImageSummary {
                            image_id: image_id.clone(),
                            samples: outcome.manifests.len(),
                            error: outcome.audit.error,
                        }
                    }
                    Err(e) => {
                        // audit even for unreadable inputs
                        let audit = ImageAudit {
                            image_id: image_id.clone(),
                            error: Some(e.to_string()),
                            ..ImageAudit::default()
                        };
                        let audit_dir = out_dir.join("audit");
                        if std::fs::create_dir_all(&audit_dir).is_ok() {
                            if let Ok(mut json) = serde_json::to_vec_pretty(&audit) {
                                json.push(b'\n');
                                let _ =
                                    std::fs::write(audit_dir.join(format!("{image_id}.json")), json);
                            }
                        }
                        ImageSummary {
                            image_id: image_id.clone(),
                            samples: 0,
                            error: Some(e.to_string()),
                        }
                    }
                };
                results.lock().unwrap().push(summary);
            });
        }
    });

    let mut summaries = results.into_inner().unwrap();
    summaries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let total_samples = summaries.iter().map(|s| s.samples).sum();
    for s in &summaries {
        match &s.error {
            Some(e) => println!("{}: FAILED ({e})", s.image_id),
            None => println!("{}: {} sample(s)", s.image_id, s.samples),
        }
    }
    let summary = RunSummary {
        seed: config.effective_seed(),
        worker_count: workers,
        images: summaries,
        total_samples,
    };
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    let summary_path = out_dir.join("run_summary.json");
    std::fs::write(&summary_path, json)
        .map_err(|e| Error::io(summary_path.display().to_string(), e))?;
    println!("total: {total_samples} sample(s) from {} image(s)", images.len());
    Ok(total_samples)
}

/// `compose`: renders a stored sample's stack; with `with_shadow`, adds the
/// stored residual back (reproducing the source) before writing.
pub fn cmd_compose(manifest: &Path, out: &Path, with_shadow: bool) -> Result<()> {
    let sample = read_sample(manifest)?;
    let rendered = composite(sample.background(), sample.layers())?;
    let output = if with_shadow {
        match sample.shadow() {
            Some(shadow) => {
                let restored = recompose(&rendered, shadow)?;
                let err = restored.image.max_abs_diff(sample.source())?;
                println!("recomposition max abs error vs source: {err:.3e}");
                restored.image
            }
            None => {
                return Err(Error::InvalidParameter {
                    name: "with_shadow",
                    message: "manifest stores no shadow plane".into(),
                })
            }
        }
    } else {
        rendered
    };
    let bytes = dataset::image_to_png(&output)?;
    std::fs::write(out, bytes).map_err(|e| Error::io(out.display().to_string(), e))?;
    Ok(())
}

/// `shadow`: recomputes the residual between the stored source and the
/// recomposed stack, writes it as a 16-bit offset PNG, and checks the
/// round trip.
pub fn cmd_shadow(manifest: &Path, out: &Path) -> Result<()> {
    let sample = read_sample(manifest)?;
    let rendered = composite(sample.background(), sample.layers())?;
    let shadow = shadow_residual(sample.source(), &rendered)?;
    let restored = recompose(&rendered, &shadow)?;
    let err = restored.image.max_abs_diff(sample.source())?;
    println!("shadow max |s|: {:.6}", shadow.max_abs());
    println!("round-trip max abs error: {err:.3e}");
    let bytes = dataset::shadow_to_png(&shadow)?;
    std::fs::write(out, bytes).map_err(|e| Error::io(out.display().to_string(), e))?;
    Ok(())
}

/// `degrade`: applies one degradation to a stored layer's matte and writes
/// the degraded rgb/alpha planes next to `out_prefix`.
#[allow(clippy::too_many_arguments)]
pub fn cmd_degrade(
    manifest: &Path,
    layer_index: usize,
    kind: DegradationKind,
    radius: usize,
    sigma: Option<f64>,
    seed: u64,
    out_prefix: &Path,
) -> Result<()> {
    if radius == 0 {
        return Err(Error::InvalidParameter {
            name: "radius",
            message: "must be >= 1".into(),
        });
    }
    let sample = read_sample(manifest)?;
    let layer = sample
        .layers()
        .iter()
        .find(|l| l.order_index() == layer_index)
        .ok_or(Error::InvalidParameter {
            name: "layer",
            message: format!(
                "sample has layers 1..={}, asked for {layer_index}",
                sample.layer_count()
            ),
        })?;
    let spec = DegradationSpec {
        kind,
        radius,
        blur_sigma: sigma,
        seed,
    };
    let degraded = degrade_layer(layer, &spec)?;
    let rgb_path = out_prefix.with_extension("rgb.png");
    let alpha_path = out_prefix.with_extension("alpha.png");
    std::fs::write(&rgb_path, dataset::image_to_png(degraded.rgb())?)
        .map_err(|e| Error::io(rgb_path.display().to_string(), e))?;
    std::fs::write(&alpha_path, dataset::mask_to_png(degraded.alpha())?)
        .map_err(|e| Error::io(alpha_path.display().to_string(), e))?;
    println!(
        "degraded layer {layer_index} with {}",
        serde_json::to_string(&spec)?
    );
    Ok(())
}

/// Endpoint and velocity diagnostics for one built batch.
#[derive(Debug, Serialize)]
pub struct ObjectiveReport {
    pub t: f64,
    pub lambda: f64,
    pub seed: u64,
    pub targets: usize,
    pub aux_paths: usize,
    pub degradations: Vec<DegradationSpec>,
    /// Max abs deviation of `interpolate(.., 0)` from epsilon.
    pub main_t0_max_abs: f64,
    /// Max abs deviation of `interpolate(.., 1)` from the target.
    pub main_t1_max_abs: f64,
    /// Max abs deviation of the auxiliary start from `x_d + eps`.
    pub aux_t0_max_abs: f64,
    pub aux_t1_max_abs: f64,
    /// Max abs finite-difference velocity residual over a t sweep.
    pub velocity_fd_max_residual: f64,
    pub oracle_loss: f64,
    pub zero_predictor_loss: f64,
}

/// `objective-check`: builds a flow batch from a stored sample and reports
/// endpoint exactness, finite-difference velocity residuals, and losses
/// under the oracle and a zero predictor.
pub fn cmd_objective_check(
    manifest: &Path,
    t: f64,
    seed: u64,
    lambda: f64,
) -> Result<ObjectiveReport> {
    let sample = read_sample(manifest)?;
    let built = sample_flow_batch(
        &sample,
        t,
        seed,
        lambda,
        &crate::degrade::DegradationRanges::default(),
    )?;
    let batch = &built.batch;

    let mut main_t0: f64 = 0.0;
    let mut main_t1: f64 = 0.0;
    for target in batch.targets() {
        main_t0 = main_t0.max(
            interpolate(&target.x0, &target.eps, 0.0)?.max_abs_diff(&target.eps)?,
        );
        main_t1 =
            main_t1.max(interpolate(&target.x0, &target.eps, 1.0)?.max_abs_diff(&target.x0)?);
    }
    let mut aux_t0: f64 = 0.0;
    let mut aux_t1: f64 = 0.0;
    for path in batch.aux_paths() {
        let target = &batch.targets()[path.target_index];
        let start = interpolate_aux(&target.x0, &path.xd, &path.eps, 0.0)?;
        let shifted = Tensor::new(
            path.xd.shape().to_vec(),
            path.xd
                .data()
                .iter()
                .zip(path.eps.data())
                .map(|(d, e)| d + e)
                .collect(),
        )?;
        aux_t0 = aux_t0.max(start.max_abs_diff(&shifted)?);
        aux_t1 = aux_t1
            .max(interpolate_aux(&target.x0, &path.xd, &path.eps, 1.0)?.max_abs_diff(&target.x0)?);
    }

    // finite-difference velocity residuals over a t sweep
    let h = 1e-4;
    let mut fd_max: f64 = 0.0;
    for sweep_t in [0.0, 0.25, 0.5, 0.75, 1.0 - h] {
        for target in batch.targets() {
            let (v, _) = velocity_targets(&target.x0, None, &target.eps)?;
            let z0 = interpolate(&target.x0, &target.eps, sweep_t)?;
            let z1 = interpolate(&target.x0, &target.eps, sweep_t + h)?;
            for ((a, b), tv) in z1.data().iter().zip(z0.data()).zip(v.data()) {
                fd_max = fd_max.max(((a - b) / h - tv).abs());
            }
        }
        for path in batch.aux_paths() {
            let target = &batch.targets()[path.target_index];
            let (_, v_aux) = velocity_targets(&target.x0, Some(&path.xd), &path.eps)?;
            let v_aux = v_aux.expect("xd supplied");
            let z0 = interpolate_aux(&target.x0, &path.xd, &path.eps, sweep_t)?;
            let z1 = interpolate_aux(&target.x0, &path.xd, &path.eps, sweep_t + h)?;
            for ((a, b), tv) in z1.data().iter().zip(z0.data()).zip(v_aux.data()) {
                fd_max = fd_max.max(((a - b) / h - tv).abs());
            }
        }
    }

    let oracle = OraclePredictor::for_batch(batch)?;
    let (main_preds, aux_preds) = predict_batch(batch, &oracle)?;
    let oracle_loss = combined_loss(&main_preds, &aux_preds, batch)?;

    let zero_main: Vec<Tensor> = batch
        .targets()
        .iter()
        .map(|tg| Tensor::zeros(tg.x0.shape().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let zero_aux: Vec<Tensor> = batch
        .aux_paths()
        .iter()
        .map(|p| Tensor::zeros(p.xd.shape().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let zero_predictor_loss = combined_loss(&zero_main, &zero_aux, batch)?;

    Ok(ObjectiveReport {
        t,
        lambda,
        seed,
        targets: batch.targets().len(),
        aux_paths: batch.aux_paths().len(),
        degradations: built.degradations,
        main_t0_max_abs: main_t0,
        main_t1_max_abs: main_t1,
        aux_t0_max_abs: aux_t0,
        aux_t1_max_abs: aux_t1,
        velocity_fd_max_residual: fd_max,
        oracle_loss,
        zero_predictor_loss,
    })
}

/// `eval`: pairs prediction and ground-truth datasets by sample id and
/// evaluates them at every edit budget.
pub fn cmd_eval(
    pred_dir: &Path,
    gt_dir: &Path,
    max_edits: usize,
    out: Option<&Path>,
) -> Result<EvalReport> {
    for (name, dir) in [("pred-dir", pred_dir), ("gt-dir", gt_dir)] {
        if !dir.is_dir() {
            return Err(Error::InvalidParameter {
                name: if name == "pred-dir" { "pred-dir" } else { "gt-dir" },
                message: format!("{} is not a directory", dir.display()),
            });
        }
    }
    let index = |root: &Path| -> Result<BTreeMap<String, PathBuf>> {
        Ok(scan_dataset(root)?
            .into_iter()
            .filter_map(|m| {
                m.parent()
                    .and_then(|p| p.file_name())
                    .map(|n| (n.to_string_lossy().into_owned(), m.clone()))
            })
            .collect())
    };
    let pred_index = index(pred_dir)?;
    let gt_index = index(gt_dir)?;
    let mut pairs = Vec::new();
    let mut unmatched: Vec<String> = Vec::new();
    for (id, gt_path) in &gt_index {
        match pred_index.get(id) {
            Some(pred_path) => pairs.push((pred_path.clone(), gt_path.clone())),
            None => unmatched.push(format!("missing prediction for {id}")),
        }
    }
    for id in pred_index.keys() {
        if !gt_index.contains_key(id) {
            unmatched.push(format!("prediction {id} has no ground truth"));
        }
    }
    for line in &unmatched {
        eprintln!("warning: {line}");
    }
    let report = evaluate_dataset(&pairs, max_edits)?;
    print!("{}", report.to_table_string());
    if let Some(path) = out {
        let mut json = serde_json::to_vec_pretty(&report)?;
        json.push(b'\n');
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(report)
}

/// `bucket`: groups a dataset's manifests by aspect-ratio bin and layer
/// count and prints the partition.
pub fn cmd_bucket(dir: &Path, out: Option<&Path>) -> Result<BTreeMap<String, usize>> {
    if !dir.is_dir() {
        return Err(Error::InvalidParameter {
            name: "dir",
            message: format!("{} is not a directory", dir.display()),
        });
    }
    let manifests = scan_dataset(dir)?
        .iter()
        .map(|p| read_manifest(p))
        .collect::<Result<Vec<_>>>()?;
    let buckets = bucketize(&manifests);
    let mut counts = BTreeMap::new();
    for (key, indices) in &buckets {
        println!("{key}: {}", indices.len());
        counts.insert(key.to_string(), indices.len());
    }
    println!("total: {} sample(s) in {} bucket(s)", manifests.len(), buckets.len());
    if let Some(path) = out {
        let mut json = serde_json::to_vec_pretty(&counts)?;
        json.push(b'\n');
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(counts)
}
