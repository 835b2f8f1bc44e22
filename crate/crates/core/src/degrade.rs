//! Boundary degradations for the auxiliary restoration objective.
//!
//! Foreground mattes are corrupted by erosion, dilation, Gaussian boundary
//! blur, or an expand-then-erode combination; the rgb plane always passes
//! through untouched. The structuring element is a discrete disk (Euclidean
//! radius) and neighborhoods clamp at the frame, so a constant mask is a
//! fixed point of both erosion and dilation.

use crate::compose::ForegroundLayer;
use crate::error::{Error, Result};
use crate::image::AlphaMask;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which boundary corruption to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Erode,
    Dilate,
    Blur,
    /// Dilate by `radius`, then erode by `2 * radius`; nets out to an
    /// erosion of the blob boundary that first fills pinholes.
    ExpandThenErode,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 4] = [
        DegradationKind::Erode,
        DegradationKind::Dilate,
        DegradationKind::Blur,
        DegradationKind::ExpandThenErode,
    ];
}

/// A fully-determined degradation, reproducible from its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    /// Disk radius in pixels, >= 1.
    pub radius: usize,
    /// Gaussian sigma in pixels; present for blur only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blur_sigma: Option<f64>,
    /// Seed this spec was drawn from.
    pub seed: u64,
}

impl DegradationSpec {
    fn validate(&self, dims: (usize, usize)) -> Result<()> {
        if self.radius == 0 {
            return Err(Error::InvalidParameter {
                name: "radius",
                message: "must be >= 1".into(),
            });
        }
        let limit = dims.0.min(dims.1) / 4;
        if self.radius > limit {
            return Err(Error::InvalidParameter {
                name: "radius",
                message: format!(
                    "{} exceeds min(H,W)/4 = {limit} for {}x{}",
                    self.radius, dims.0, dims.1
                ),
            });
        }
        match (self.kind, self.blur_sigma) {
            (DegradationKind::Blur, Some(s)) if s > 0.0 && s.is_finite() => Ok(()),
            (DegradationKind::Blur, _) => Err(Error::InvalidParameter {
                name: "blur_sigma",
                message: "blur requires a finite sigma > 0".into(),
            }),
            (_, _) => Ok(()),
        }
    }
}

/// Inclusive sampling ranges for [`sample_degradation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRanges {
    pub kinds: Vec<DegradationKind>,
    pub radius_min: usize,
    pub radius_max: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for DegradationRanges {
    fn default() -> Self {
        // Keeps degradations local to object boundaries at 1024^2 scale.
        Self {
            kinds: DegradationKind::ALL.to_vec(),
            radius_min: 1,
            radius_max: 8,
            sigma_min: 0.5,
            sigma_max: 4.0,
        }
    }
}

/// Half-widths of the disk's horizontal chords for dy in `0..=radius`.
fn disk_chords(radius: usize) -> Vec<usize> {
    let r2 = (radius * radius) as f64;
    (0..=radius)
        .map(|dy| (r2 - (dy * dy) as f64).sqrt().floor() as usize)
        .collect()
}

/// Sliding-window extreme over `[x-hw, x+hw]` per row, clamped at the frame.
fn horizontal_extreme(data: &[f64], h: usize, w: usize, hw: usize, minimum: bool) -> Vec<f64> {
    if hw == 0 {
        return data.to_vec();
    }
    let better = |a: f64, b: f64| if minimum { a <= b } else { a >= b };
    let mut out = vec![0.0; h * w];
    let mut deque: Vec<usize> = Vec::with_capacity(w);
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        deque.clear();
        let mut next = 0usize;
        for x in 0..w {
            let hi = (x + hw).min(w - 1);
            while next <= hi {
                while let Some(&back) = deque.last() {
                    if better(row[next], row[back]) {
                        deque.pop();
                    } else {
                        break;
                    }
                }
                deque.push(next);
                next += 1;
            }
            let lo = x.saturating_sub(hw);
            let mut start = 0;
            while deque[start] < lo {
                start += 1;
            }
            deque.drain(..start);
            out[y * w + x] = row[deque[0]];
        }
    }
    out
}

fn disk_morphology(mask: &AlphaMask, radius: usize, minimum: bool) -> Result<AlphaMask> {
    if radius == 0 {
        return Err(Error::InvalidParameter {
            name: "radius",
            message: "must be >= 1".into(),
        });
    }
    let (h, w) = mask.dims();
    let chords = disk_chords(radius);
    // One horizontally-filtered plane per distinct chord half-width.
    let mut planes: Vec<Option<Vec<f64>>> = vec![None; radius + 1];
    for &hw in &chords {
        if planes[hw].is_none() {
            planes[hw] = Some(horizontal_extreme(mask.data(), h, w, hw, minimum));
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = f64::NAN;
            for (dy, &hw) in chords.iter().enumerate() {
                let plane = planes[hw].as_ref().unwrap();
                for ny in [y.checked_sub(dy), Some(y + dy)].into_iter().flatten() {
                    if ny >= h {
                        continue;
                    }
                    let v = plane[ny * w + x];
                    if acc.is_nan() || (minimum && v < acc) || (!minimum && v > acc) {
                        acc = v;
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    Ok(AlphaMask::from_raw(h, w, out))
}

/// Per-pixel minimum over a disk of the given radius.
pub fn erode_alpha(mask: &AlphaMask, radius: usize) -> Result<AlphaMask> {
    disk_morphology(mask, radius, true)
}

/// Per-pixel maximum over a disk of the given radius.
pub fn dilate_alpha(mask: &AlphaMask, radius: usize) -> Result<AlphaMask> {
    disk_morphology(mask, radius, false)
}

/// Gaussian blur of the matte with renormalized edge handling.
///
/// The kernel is truncated at three sigma and renormalized against the
/// in-frame support, so constant masks stay constant and interior blob
/// mass is preserved.
pub fn blur_boundary(mask: &AlphaMask, sigma: f64) -> Result<AlphaMask> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter {
            name: "sigma",
            message: format!("{sigma} must be finite and > 0"),
        });
    }
    let (h, w) = mask.dims();
    let radius = (3.0 * sigma).ceil() as usize;
    let weights: Vec<f64> = (0..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();

    let pass = |data: &[f64], len_outer: usize, len_inner: usize, stride_outer: usize,
                stride_inner: usize| {
        let mut out = vec![0.0; data.len()];
        for o in 0..len_outer {
            for i in 0..len_inner {
                let mut acc = 0.0;
                let mut norm = 0.0;
                let lo = i.saturating_sub(radius);
                let hi = (i + radius).min(len_inner - 1);
                for j in lo..=hi {
                    let wgt = weights[i.abs_diff(j)];
                    acc += wgt * data[o * stride_outer + j * stride_inner];
                    norm += wgt;
                }
                out[o * stride_outer + i * stride_inner] = acc / norm;
            }
        }
        out
    };

    // Horizontal, then vertical.
    let tmp = pass(mask.data(), h, w, w, 1);
    let mut out = pass(&tmp, w, h, 1, w);
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(AlphaMask::from_raw(h, w, out))
}

/// Applies a degradation spec to a layer's matte; rgb passes through.
pub fn degrade_layer(layer: &ForegroundLayer, spec: &DegradationSpec) -> Result<ForegroundLayer> {
    spec.validate(layer.dims())?;
    let degraded = match spec.kind {
        DegradationKind::Erode => erode_alpha(layer.alpha(), spec.radius)?,
        DegradationKind::Dilate => dilate_alpha(layer.alpha(), spec.radius)?,
        DegradationKind::Blur => blur_boundary(layer.alpha(), spec.blur_sigma.unwrap())?,
        DegradationKind::ExpandThenErode => {
            let expanded = dilate_alpha(layer.alpha(), spec.radius)?;
            erode_alpha(&expanded, 2 * spec.radius)?
        }
    };
    layer.clone().with_alpha(degraded)
}

/// Draws a degradation spec deterministically from a seed.
pub fn sample_degradation(seed: u64, ranges: &DegradationRanges) -> Result<DegradationSpec> {
    if ranges.kinds.is_empty() {
        return Err(Error::EmptyInput("no degradation kinds enabled"));
    }
    if ranges.radius_min == 0 || ranges.radius_min > ranges.radius_max {
        return Err(Error::InvalidParameter {
            name: "radius range",
            message: format!("[{}, {}]", ranges.radius_min, ranges.radius_max),
        });
    }
    if !(ranges.sigma_min > 0.0) || ranges.sigma_min > ranges.sigma_max {
        return Err(Error::InvalidParameter {
            name: "sigma range",
            message: format!("[{}, {}]", ranges.sigma_min, ranges.sigma_max),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = ranges.kinds[rng.gen_range(0..ranges.kinds.len())];
    let radius = rng.gen_range(ranges.radius_min..=ranges.radius_max);
    let blur_sigma = match kind {
        DegradationKind::Blur => Some(rng.gen_range(ranges.sigma_min..=ranges.sigma_max)),
        _ => None,
    };
    Ok(DegradationSpec {
        kind,
        radius,
        blur_sigma,
        seed,
    })
}
