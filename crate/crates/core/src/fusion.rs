//! Multi-expert mask fusion and RGBA foreground assembly.
//!
//! A single segmenter tends to miss thin structures and accessory parts, so
//! candidate mattes from several experts are resampled to a common canvas
//! and averaged into one alpha map. The fused matte plus the white-background
//! crop it was derived from form an RGBA foreground layer.

use crate::compose::ForegroundLayer;
use crate::error::{Error, Result};
use crate::image::{AlphaMask, Image};

/// Candidate mattes from one or more segmentation experts.
#[derive(Debug, Clone)]
pub struct ExpertMaskSet {
    masks: Vec<AlphaMask>,
    expert_ids: Vec<String>,
}

impl ExpertMaskSet {
    pub fn new(masks: Vec<AlphaMask>, expert_ids: Vec<String>) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::EmptyInput("expert mask set needs >= 1 mask"));
        }
        if masks.len() != expert_ids.len() {
            return Err(Error::InvalidParameter {
                name: "expert_ids",
                message: format!("{} ids for {} masks", expert_ids.len(), masks.len()),
            });
        }
        Ok(Self { masks, expert_ids })
    }

    pub fn masks(&self) -> &[AlphaMask] {
        &self.masks
    }

    pub fn expert_ids(&self) -> &[String] {
        &self.expert_ids
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Resamples every mask onto a common target canvas.
    pub fn resampled(&self, target_h: usize, target_w: usize) -> Result<Self> {
        let masks = self
            .masks
            .iter()
            .map(|m| resample_mask(m, target_h, target_w))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            masks,
            expert_ids: self.expert_ids.clone(),
        })
    }
}

/// Bilinear sample of a plane at fractional source coordinates with edge
/// clamping. `data` is row-major with `stride` values per row sample.
fn bilinear_at(data: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    let top = data[y0 * w + x0] * (1.0 - fx) + data[y0 * w + x1] * fx;
    let bottom = data[y1 * w + x0] * (1.0 - fx) + data[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Maps a target pixel index to its source coordinate under center-aligned
/// resampling.
fn src_coord(t: usize, target_len: usize, source_len: usize) -> f64 {
    (t as f64 + 0.5) * source_len as f64 / target_len as f64 - 0.5
}

/// Bilinear resampling of an alpha mask with edge clamping.
///
/// Identity dimensions produce an exact copy; constant masks stay constant
/// at any scale.
pub fn resample_mask(mask: &AlphaMask, target_h: usize, target_w: usize) -> Result<AlphaMask> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidParameter {
            name: "target dims",
            message: format!("{target_h}x{target_w} must be >= 1x1"),
        });
    }
    let (sh, sw) = mask.dims();
    if (sh, sw) == (target_h, target_w) {
        return Ok(mask.clone());
    }
    let data = mask.data();
    let mut out = Vec::with_capacity(target_h * target_w);
    for ty in 0..target_h {
        let sy = src_coord(ty, target_h, sh);
        for tx in 0..target_w {
            let sx = src_coord(tx, target_w, sw);
            out.push(bilinear_at(data, sh, sw, sy, sx).clamp(0.0, 1.0));
        }
    }
    Ok(AlphaMask::from_raw(target_h, target_w, out))
}

/// Bilinear resampling of an RGB image, channel by channel.
pub fn resample_image(image: &Image, target_h: usize, target_w: usize) -> Result<Image> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidParameter {
            name: "target dims",
            message: format!("{target_h}x{target_w} must be >= 1x1"),
        });
    }
    let (sh, sw) = image.dims();
    if (sh, sw) == (target_h, target_w) {
        return Ok(image.clone());
    }
    // De-interleave once so each channel is a contiguous plane.
    let src = image.data();
    let mut planes = [
        vec![0.0; sh * sw],
        vec![0.0; sh * sw],
        vec![0.0; sh * sw],
    ];
    for px in 0..sh * sw {
        for c in 0..3 {
            planes[c][px] = src[px * 3 + c];
        }
    }
    let mut out = vec![0.0; target_h * target_w * 3];
    for ty in 0..target_h {
        let sy = src_coord(ty, target_h, sh);
        for tx in 0..target_w {
            let sx = src_coord(tx, target_w, sw);
            let i = (ty * target_w + tx) * 3;
            for c in 0..3 {
                out[i + c] = bilinear_at(&planes[c], sh, sw, sy, sx).clamp(0.0, 1.0);
            }
        }
    }
    Ok(Image::from_raw(target_h, target_w, out))
}

/// Per-pixel arithmetic mean of all expert masks.
///
/// Masks must already share dimensions (see [`ExpertMaskSet::resampled`]).
pub fn fuse_masks(set: &ExpertMaskSet) -> Result<AlphaMask> {
    let n = set.len();
    fuse_masks_weighted(set, &vec![1.0; n])
}

/// Weighted per-pixel mean; weights are normalized to sum to one.
///
/// The unweighted mean is the default in the pipeline; weighting is an
/// opt-in configuration knob.
pub fn fuse_masks_weighted(set: &ExpertMaskSet, weights: &[f64]) -> Result<AlphaMask> {
    let masks = set.masks();
    if weights.len() != masks.len() {
        return Err(Error::InvalidParameter {
            name: "weights",
            message: format!("{} weights for {} masks", weights.len(), masks.len()),
        });
    }
    if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
        return Err(Error::InvalidParameter {
            name: "weights",
            message: "weights must be finite and non-negative".into(),
        });
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "weights",
            message: "weights must not all be zero".into(),
        });
    }
    let (h, w) = masks[0].dims();
    for m in &masks[1..] {
        if m.dims() != (h, w) {
            return Err(Error::dims("fuse_masks", (h, w), m.dims()));
        }
    }
    // Summation over a sorted buffer keeps the result exactly invariant
    // under expert permutation (plain accumulation differs in the last ulp
    // when the order changes).
    let datas: Vec<&[f64]> = masks.iter().map(|m| m.data()).collect();
    let scales: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut out = Vec::with_capacity(h * w);
    let mut terms = vec![0.0; masks.len()];
    for px in 0..h * w {
        for (t, (data, scale)) in terms.iter_mut().zip(datas.iter().zip(&scales)) {
            *t = data[px] * scale;
        }
        terms.sort_by(|a, b| a.total_cmp(b));
        out.push(terms.iter().sum::<f64>().clamp(0.0, 1.0));
    }
    Ok(AlphaMask::from_raw(h, w, out))
}

/// Assembles an RGBA foreground layer from a white-background crop and its
/// fused matte. The rgb plane is kept unchanged; the stack position defaults
/// to frontmost and can be adjusted with [`ForegroundLayer::with_order`].
pub fn make_rgba(white_bg: &Image, alpha: &AlphaMask) -> Result<ForegroundLayer> {
    ForegroundLayer::new(white_bg.clone(), alpha.clone(), 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compose::composite_on_white;

    fn set(masks: Vec<AlphaMask>) -> ExpertMaskSet {
        let ids = (0..masks.len()).map(|i| format!("expert-{i}")).collect();
        ExpertMaskSet::new(masks, ids).unwrap()
    }

    #[test]
    fn resample_identity_is_exact_copy() {
        let m = AlphaMask::new(3, 2, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        assert_eq!(resample_mask(&m, 3, 2).unwrap(), m);
    }

    #[test]
    fn resample_preserves_constant_masks() {
        let m = AlphaMask::filled(5, 7, 0.7).unwrap();
        for (th, tw) in [(1, 1), (3, 3), (10, 14), (13, 5)] {
            let out = resample_mask(&m, th, tw).unwrap();
            for &v in out.data() {
                assert!((v - 0.7).abs() < 1e-12);
            }
        }
    }

    // Independent bilinear reference: explicit corner-weight formula, no
    // shared code with the implementation.
    fn bilinear_reference(src: &[Vec<f64>], th: usize, tw: usize) -> Vec<Vec<f64>> {
        let sh = src.len();
        let sw = src[0].len();
        let mut out = vec![vec![0.0; tw]; th];
        for (ty, row) in out.iter_mut().enumerate() {
            for (tx, cell) in row.iter_mut().enumerate() {
                let sy = ((ty as f64 + 0.5) * sh as f64 / th as f64 - 0.5)
                    .clamp(0.0, sh as f64 - 1.0);
                let sx = ((tx as f64 + 0.5) * sw as f64 / tw as f64 - 0.5)
                    .clamp(0.0, sw as f64 - 1.0);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(sh - 1), (x0 + 1).min(sw - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                *cell = src[y0][x0] * (1.0 - fy) * (1.0 - fx)
                    + src[y0][x1] * (1.0 - fy) * fx
                    + src[y1][x0] * fy * (1.0 - fx)
                    + src[y1][x1] * fy * fx;
            }
        }
        out
    }

    #[test]
    fn resample_checkerboard_matches_reference() {
        let m = AlphaMask::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let got = resample_mask(&m, 4, 4).unwrap();
        let expected = bilinear_reference(&[vec![1.0, 0.0], vec![0.0, 1.0]], 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                assert!(
                    (got.value(y, x) - expected[y][x]).abs() < 1e-12,
                    "mismatch at ({y},{x}): {} vs {}",
                    got.value(y, x),
                    expected[y][x]
                );
            }
        }
    }

    #[test]
    fn fuse_single_mask_is_identity() {
        let m = AlphaMask::new(2, 2, vec![0.1, 0.4, 0.7, 1.0]).unwrap();
        let fused = fuse_masks(&set(vec![m.clone()])).unwrap();
        assert_eq!(fused, m);
    }

    #[test]
    fn fuse_ones_and_zeros_is_half() {
        let fused = fuse_masks(&set(vec![
            AlphaMask::filled(2, 3, 1.0).unwrap(),
            AlphaMask::filled(2, 3, 0.0).unwrap(),
        ]))
        .unwrap();
        for &v in fused.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_three_masks_matches_mean_oracle() {
        let masks: Vec<AlphaMask> = (0..3)
            .map(|k| {
                AlphaMask::new(
                    3,
                    3,
                    (0..9).map(|i| ((i * 7 + k * 3) % 11) as f64 / 10.0).collect(),
                )
                .unwrap()
            })
            .collect();
        // brute-force per-pixel average
        let mut expected = vec![0.0; 9];
        for m in &masks {
            for (e, &v) in expected.iter_mut().zip(m.data()) {
                *e += v / 3.0;
            }
        }
        let fused = fuse_masks(&set(masks)).unwrap();
        for (&got, &want) in fused.data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_bounded_by_pixelwise_min_max() {
        let masks: Vec<AlphaMask> = (0..4)
            .map(|k| {
                AlphaMask::new(
                    2,
                    2,
                    (0..4).map(|i| ((i * 5 + k * 2) % 9) as f64 / 8.0).collect(),
                )
                .unwrap()
            })
            .collect();
        let fused = fuse_masks(&set(masks.clone())).unwrap();
        for px in 0..4 {
            let lo = masks.iter().map(|m| m.data()[px]).fold(f64::MAX, f64::min);
            let hi = masks.iter().map(|m| m.data()[px]).fold(f64::MIN, f64::max);
            assert!(fused.data()[px] >= lo - 1e-12 && fused.data()[px] <= hi + 1e-12);
        }
    }

    #[test]
    fn fusion_is_permutation_invariant() {
        let a = AlphaMask::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = AlphaMask::new(2, 2, vec![0.9, 0.8, 0.7, 0.6]).unwrap();
        let c = AlphaMask::new(2, 2, vec![0.5, 0.0, 1.0, 0.5]).unwrap();
        let f1 = fuse_masks(&set(vec![a.clone(), b.clone(), c.clone()])).unwrap();
        let f2 = fuse_masks(&set(vec![c, a, b])).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn fusion_of_identical_masks_is_that_mask() {
        let m = AlphaMask::new(2, 2, vec![0.1, 0.4, 0.7, 1.0]).unwrap();
        let fused = fuse_masks(&set(vec![m.clone(), m.clone(), m.clone()])).unwrap();
        for (&got, &want) in fused.data().iter().zip(m.data()) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_rejects_mismatched_dims() {
        let s = ExpertMaskSet::new(
            vec![
                AlphaMask::filled(2, 2, 0.5).unwrap(),
                AlphaMask::filled(3, 2, 0.5).unwrap(),
            ],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        assert!(fuse_masks(&s).is_err());
    }

    #[test]
    fn make_rgba_keeps_fields() {
        let rgb = Image::filled(2, 2, [0.3, 0.5, 0.7]).unwrap();
        let alpha = AlphaMask::new(2, 2, vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        let layer = make_rgba(&rgb, &alpha).unwrap();
        assert_eq!(layer.rgb(), &rgb);
        assert_eq!(layer.alpha(), &alpha);
        assert_eq!(layer.order_index(), 1);
    }

    #[test]
    fn make_rgba_round_trips_white_composites() {
        // x itself came from a white composite with a hard matte; rendering
        // the assembled layer back on white reproduces x. (Soft pixels blend
        // twice, so exact round-trips need a binary matte.)
        let x0 = Image::filled(2, 2, [0.2, 0.6, 0.9]).unwrap();
        let alpha = AlphaMask::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = composite_on_white(&alpha, &x0).unwrap();
        let layer = make_rgba(&x, &alpha).unwrap();
        let again = composite_on_white(layer.alpha(), layer.rgb()).unwrap();
        assert!(again.max_abs_diff(&x).unwrap() < 1e-6);
    }

    #[test]
    fn transparent_rgba_layer_is_invisible() {
        let rgb = Image::filled(2, 2, [0.9, 0.1, 0.4]).unwrap();
        let layer = make_rgba(&rgb, &AlphaMask::filled(2, 2, 0.0).unwrap()).unwrap();
        let bg = Image::filled(2, 2, [0.33, 0.66, 0.99]).unwrap();
        let out = crate::compose::composite(&bg, &[layer]).unwrap();
        assert_eq!(out, bg);
    }
}
