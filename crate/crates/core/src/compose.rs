//! Straight-alpha compositing, shadow residuals, and the layered-sample
//! value type.
//!
//! Layer order follows the front-to-back convention: `order_index` 1 is the
//! frontmost layer, so a stack is composited back-to-front (layer K first,
//! layer 1 last). The shadow residual is the signed difference between a
//! source image and its recomposed stack; adding it back reproduces the
//! source.

use crate::error::{Error, Result};
use crate::image::{AlphaMask, Image, ShadowResidual};

/// An RGB appearance plus its alpha matte, positioned in a layer stack.
///
/// `order_index` 1 is the frontmost layer and may occlude every layer
/// behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundLayer {
    rgb: Image,
    alpha: AlphaMask,
    order_index: usize,
}

impl ForegroundLayer {
    pub fn new(rgb: Image, alpha: AlphaMask, order_index: usize) -> Result<Self> {
        if rgb.dims() != alpha.dims() {
            return Err(Error::dims("foreground layer", rgb.dims(), alpha.dims()));
        }
        if order_index == 0 {
            return Err(Error::InvalidLayerOrder(
                "order_index must be >= 1 (1 is frontmost)".into(),
            ));
        }
        Ok(Self {
            rgb,
            alpha,
            order_index,
        })
    }

    pub fn rgb(&self) -> &Image {
        &self.rgb
    }

    pub fn alpha(&self) -> &AlphaMask {
        &self.alpha
    }

    pub fn order_index(&self) -> usize {
        self.order_index
    }

    pub fn dims(&self) -> (usize, usize) {
        self.rgb.dims()
    }

    /// Same layer content at a different stack position.
    pub fn with_order(self, order_index: usize) -> Result<Self> {
        Self::new(self.rgb, self.alpha, order_index)
    }

    /// Replaces the alpha matte, keeping rgb and order.
    pub fn with_alpha(self, alpha: AlphaMask) -> Result<Self> {
        Self::new(self.rgb, alpha, self.order_index)
    }

    pub fn into_parts(self) -> (Image, AlphaMask, usize) {
        (self.rgb, self.alpha, self.order_index)
    }
}

/// Maximum layer count for curated samples.
pub const MAX_LAYERS: usize = 5;

/// A decomposed image: source, clean background, ordered foreground layers,
/// and an optional shadow residual explaining illumination footprints.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredSample {
    source: Image,
    background: Image,
    layers: Vec<ForegroundLayer>,
    shadow: Option<ShadowResidual>,
}

impl LayeredSample {
    /// Validates dimensions, layer count, and ordering. Layers must be
    /// supplied front-to-back with order indices contiguous from 1.
    pub fn new(
        source: Image,
        background: Image,
        layers: Vec<ForegroundLayer>,
        shadow: Option<ShadowResidual>,
    ) -> Result<Self> {
        if source.dims() != background.dims() {
            return Err(Error::dims("sample", source.dims(), background.dims()));
        }
        if layers.is_empty() {
            return Err(Error::EmptyInput("a layered sample needs >= 1 layer"));
        }
        if layers.len() > MAX_LAYERS {
            return Err(Error::InvalidLayerOrder(format!(
                "{} layers exceeds the maximum of {MAX_LAYERS}",
                layers.len()
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.dims() != source.dims() {
                return Err(Error::dims("sample layer", source.dims(), layer.dims()));
            }
            if layer.order_index() != i + 1 {
                return Err(Error::InvalidLayerOrder(format!(
                    "layer at position {i} has order_index {}, expected {}",
                    layer.order_index(),
                    i + 1
                )));
            }
        }
        if let Some(s) = &shadow {
            if s.dims() != source.dims() {
                return Err(Error::dims("sample shadow", source.dims(), s.dims()));
            }
        }
        Ok(Self {
            source,
            background,
            layers,
            shadow,
        })
    }

    pub fn source(&self) -> &Image {
        &self.source
    }

    pub fn background(&self) -> &Image {
        &self.background
    }

    /// Layers ordered front-to-back.
    pub fn layers(&self) -> &[ForegroundLayer] {
        &self.layers
    }

    pub fn shadow(&self) -> Option<&ShadowResidual> {
        self.shadow.as_ref()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.source.dims()
    }

    /// Recomposes the stack and checks that adding the shadow residual
    /// reproduces the source within `tolerance` (max abs per channel).
    ///
    /// Samples without a shadow are checked against the bare recomposition.
    pub fn verify_round_trip(&self, tolerance: f64) -> Result<()> {
        let recomposed = composite(&self.background, &self.layers)?;
        let restored = match &self.shadow {
            Some(shadow) => recompose(&recomposed, shadow)?.image,
            None => recomposed,
        };
        let err = restored.max_abs_diff(&self.source)?;
        if err > tolerance {
            return Err(Error::InvariantViolation {
                path: "<in-memory sample>".into(),
                message: format!("round-trip error {err:.3e} exceeds tolerance {tolerance:.3e}"),
            });
        }
        Ok(())
    }
}

/// Straight-alpha blend of one layer over an underlying image:
/// `out = rgb * alpha + under * (1 - alpha)` per pixel and channel.
pub fn alpha_over(layer: &ForegroundLayer, under: &Image) -> Result<Image> {
    if layer.dims() != under.dims() {
        return Err(Error::dims("alpha_over", layer.dims(), under.dims()));
    }
    let (h, w) = under.dims();
    let rgb = layer.rgb().data();
    let alpha = layer.alpha().data();
    let under_data = under.data();
    let mut out = vec![0.0; h * w * 3];
    for (px, &a) in alpha.iter().enumerate() {
        let i = px * 3;
        for c in 0..3 {
            out[i + c] = rgb[i + c] * a + under_data[i + c] * (1.0 - a);
        }
    }
    Ok(Image::from_raw(h, w, out))
}

/// Stacks foreground layers over a background, back-to-front.
///
/// `layers` must be ordered front-to-back by `order_index`; the blend starts
/// from the background, applies the deepest layer first and the frontmost
/// last. An empty stack returns the background unchanged.
pub fn composite(background: &Image, layers: &[ForegroundLayer]) -> Result<Image> {
    for pair in layers.windows(2) {
        if pair[0].order_index() >= pair[1].order_index() {
            return Err(Error::InvalidLayerOrder(format!(
                "layers not ordered front-to-back: order {} precedes {}",
                pair[0].order_index(),
                pair[1].order_index()
            )));
        }
    }
    let (h, w) = background.dims();
    let mut out = background.data().to_vec();
    for layer in layers.iter().rev() {
        if layer.dims() != background.dims() {
            return Err(Error::dims("composite", background.dims(), layer.dims()));
        }
        let rgb = layer.rgb().data();
        let alpha = layer.alpha().data();
        for (px, &a) in alpha.iter().enumerate() {
            let i = px * 3;
            for c in 0..3 {
                out[i + c] = rgb[i + c] * a + out[i + c] * (1.0 - a);
            }
        }
    }
    Ok(Image::from_raw(h, w, out))
}

/// Signed residual `source - recomposed`, unclamped.
pub fn shadow_residual(source: &Image, recomposed: &Image) -> Result<ShadowResidual> {
    if !source.same_dims(recomposed) {
        return Err(Error::dims(
            "shadow_residual",
            source.dims(),
            recomposed.dims(),
        ));
    }
    let (h, w) = source.dims();
    let data = source
        .data()
        .iter()
        .zip(recomposed.data())
        .map(|(s, c)| s - c)
        .collect();
    Ok(ShadowResidual::from_raw(h, w, data))
}

/// Result of adding a shadow residual back onto a recomposed image.
#[derive(Debug, Clone, PartialEq)]
pub struct Recomposition {
    pub image: Image,
    /// True when some pixel left `[0,1]` and had to be clamped, which only
    /// happens when the (recomposed, shadow) pair did not originate from a
    /// valid sample.
    pub clamped: bool,
}

/// Tolerance below which out-of-range sums are treated as floating-point
/// noise rather than genuine clamping.
const CLAMP_EPS: f64 = 1e-9;

/// Adds a shadow residual onto a recomposed image, restoring the source.
pub fn recompose(recomposed: &Image, shadow: &ShadowResidual) -> Result<Recomposition> {
    if recomposed.dims() != shadow.dims() {
        return Err(Error::dims("recompose", recomposed.dims(), shadow.dims()));
    }
    let (h, w) = recomposed.dims();
    let mut clamped = false;
    let data = recomposed
        .data()
        .iter()
        .zip(shadow.data())
        .map(|(c, s)| {
            let v = c + s;
            if v < -CLAMP_EPS || v > 1.0 + CLAMP_EPS {
                clamped = true;
            }
            v.clamp(0.0, 1.0)
        })
        .collect();
    Ok(Recomposition {
        image: Image::from_raw(h, w, data),
        clamped,
    })
}

/// Renders content over a white canvas through a matte:
/// `M(alpha, x) = x * alpha + (1 - alpha)` per pixel and channel.
///
/// Fully transparent pixels come out white; fully opaque pixels keep `x`.
pub fn composite_on_white(alpha: &AlphaMask, x: &Image) -> Result<Image> {
    if alpha.dims() != x.dims() {
        return Err(Error::dims("composite_on_white", alpha.dims(), x.dims()));
    }
    let (h, w) = x.dims();
    let xd = x.data();
    let mut out = vec![0.0; h * w * 3];
    for (px, &a) in alpha.data().iter().enumerate() {
        let i = px * 3;
        for c in 0..3 {
            out[i + c] = xd[i + c] * a + (1.0 - a);
        }
    }
    Ok(Image::from_raw(h, w, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(rgb: f64, alpha: f64, order: usize) -> ForegroundLayer {
        ForegroundLayer::new(
            Image::filled(2, 2, [rgb; 3]).unwrap(),
            AlphaMask::filled(2, 2, alpha).unwrap(),
            order,
        )
        .unwrap()
    }

    #[test]
    fn alpha_over_opaque_returns_layer_rgb() {
        let l = layer(0.3, 1.0, 1);
        let under = Image::filled(2, 2, [0.9; 3]).unwrap();
        let out = alpha_over(&l, &under).unwrap();
        assert_eq!(out, *l.rgb());
    }

    #[test]
    fn alpha_over_transparent_returns_under() {
        let l = layer(0.3, 0.0, 1);
        let under = Image::filled(2, 2, [0.9; 3]).unwrap();
        let out = alpha_over(&l, &under).unwrap();
        assert_eq!(out, under);
    }

    #[test]
    fn alpha_over_single_pixel_blend() {
        // rgb 0.2 at alpha 0.5 over 1.0 -> 0.2*0.5 + 1.0*0.5 = 0.6
        let l = ForegroundLayer::new(
            Image::filled(1, 1, [0.2; 3]).unwrap(),
            AlphaMask::filled(1, 1, 0.5).unwrap(),
            1,
        )
        .unwrap();
        let under = Image::white(1, 1).unwrap();
        let out = alpha_over(&l, &under).unwrap();
        for &v in out.data() {
            assert!((v - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn alpha_over_rejects_dimension_mismatch() {
        let l = layer(0.3, 0.5, 1);
        let under = Image::filled(3, 2, [0.9; 3]).unwrap();
        assert!(matches!(
            alpha_over(&l, &under),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn composite_empty_stack_is_background() {
        let bg = Image::filled(2, 2, [0.4; 3]).unwrap();
        assert_eq!(composite(&bg, &[]).unwrap(), bg);
    }

    #[test]
    fn composite_opaque_full_frame_layer_occludes() {
        let bg = Image::filled(2, 2, [0.4; 3]).unwrap();
        let l = layer(0.8, 1.0, 1);
        assert_eq!(composite(&bg, &[l.clone()]).unwrap(), *l.rgb());
    }

    #[test]
    fn composite_matches_sequential_alpha_over() {
        // Brute-force oracle: apply alpha_over back-to-front by hand on a
        // 2x2 scene with two half-opaque layers.
        let bg = Image::new(2, 2, (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
        let l1 = ForegroundLayer::new(
            Image::new(2, 2, (0..12).map(|i| (11 - i) as f64 / 11.0).collect()).unwrap(),
            AlphaMask::new(2, 2, vec![0.5, 0.25, 0.75, 0.5]).unwrap(),
            1,
        )
        .unwrap();
        let l2 = ForegroundLayer::new(
            Image::filled(2, 2, [0.6, 0.1, 0.3]).unwrap(),
            AlphaMask::new(2, 2, vec![0.5, 0.5, 0.0, 1.0]).unwrap(),
            2,
        )
        .unwrap();

        let step1 = alpha_over(&l2, &bg).unwrap();
        let expected = alpha_over(&l1, &step1).unwrap();
        let got = composite(&bg, &[l1, l2]).unwrap();
        assert!(got.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn composite_rejects_unordered_layers() {
        let bg = Image::filled(2, 2, [0.4; 3]).unwrap();
        let out = composite(&bg, &[layer(0.1, 0.5, 2), layer(0.2, 0.5, 1)]);
        assert!(matches!(out, Err(Error::InvalidLayerOrder(_))));
    }

    #[test]
    fn shadow_residual_identical_inputs_is_zero() {
        let img = Image::filled(2, 2, [0.7; 3]).unwrap();
        let s = shadow_residual(&img, &img).unwrap();
        assert_eq!(s.max_abs(), 0.0);
    }

    #[test]
    fn shadow_residual_signed_difference() {
        let src = Image::filled(1, 1, [0.3; 3]).unwrap();
        let rec = Image::filled(1, 1, [0.5; 3]).unwrap();
        let s = shadow_residual(&src, &rec).unwrap();
        for &v in s.data() {
            assert!((v - (-0.2)).abs() < 1e-15);
        }
    }

    #[test]
    fn recompose_zero_shadow_is_identity() {
        let img = Image::filled(2, 3, [0.25; 3]).unwrap();
        let out = recompose(&img, &ShadowResidual::zero(2, 3).unwrap()).unwrap();
        assert_eq!(out.image, img);
        assert!(!out.clamped);
    }

    #[test]
    fn recompose_round_trips_random_pair() {
        // residual such that recompose returns the source exactly
        let src = Image::new(4, 4, (0..48).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let rec = Image::new(4, 4, (0..48).map(|i| (i % 5) as f64 / 5.0).collect()).unwrap();
        let s = shadow_residual(&src, &rec).unwrap();
        let out = recompose(&rec, &s).unwrap();
        assert!(out.image.max_abs_diff(&src).unwrap() <= 1e-15);
        assert!(!out.clamped);
    }

    #[test]
    fn recompose_clamps_out_of_range_with_flag() {
        let rec = Image::filled(1, 1, [0.5; 3]).unwrap();
        let s = ShadowResidual::new(1, 1, vec![0.6; 3]).unwrap();
        let out = recompose(&rec, &s).unwrap();
        assert!(out.clamped);
        for &v in out.image.data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn composite_on_white_endpoints() {
        let x = Image::new(2, 2, (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        let ones = AlphaMask::filled(2, 2, 1.0).unwrap();
        let zeros = AlphaMask::filled(2, 2, 0.0).unwrap();
        assert_eq!(composite_on_white(&ones, &x).unwrap(), x);
        assert_eq!(
            composite_on_white(&zeros, &x).unwrap(),
            Image::white(2, 2).unwrap()
        );
    }

    #[test]
    fn composite_on_white_single_pixel() {
        // X 0.2 at alpha 0.5 -> 0.2*0.5 + 0.5 = 0.6
        let x = Image::filled(1, 1, [0.2; 3]).unwrap();
        let a = AlphaMask::filled(1, 1, 0.5).unwrap();
        let out = composite_on_white(&a, &x).unwrap();
        for &v in out.data() {
            assert!((v - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn transparent_layer_never_changes_composite() {
        let bg = Image::new(3, 3, (0..27).map(|i| (i % 9) as f64 / 9.0).collect()).unwrap();
        let visible = layer_with_dims(3, 3, 0.8, 0.6, 1);
        let base = composite(&bg, &[visible.clone()]).unwrap();
        let ghost = ForegroundLayer::new(
            Image::filled(3, 3, [0.99; 3]).unwrap(),
            AlphaMask::filled(3, 3, 0.0).unwrap(),
            2,
        )
        .unwrap();
        let with_ghost = composite(&bg, &[visible, ghost]).unwrap();
        assert_eq!(base, with_ghost);
    }

    fn layer_with_dims(h: usize, w: usize, rgb: f64, alpha: f64, order: usize) -> ForegroundLayer {
        ForegroundLayer::new(
            Image::filled(h, w, [rgb; 3]).unwrap(),
            AlphaMask::filled(h, w, alpha).unwrap(),
            order,
        )
        .unwrap()
    }

    #[test]
    fn sample_requires_contiguous_order() {
        let img = Image::filled(2, 2, [0.5; 3]).unwrap();
        let bad = LayeredSample::new(
            img.clone(),
            img.clone(),
            vec![layer(0.1, 1.0, 1), layer(0.2, 1.0, 3)],
            None,
        );
        assert!(matches!(bad, Err(Error::InvalidLayerOrder(_))));
    }

    #[test]
    fn sample_rejects_more_than_max_layers() {
        let img = Image::filled(2, 2, [0.5; 3]).unwrap();
        let layers: Vec<_> = (1..=6).map(|k| layer(0.1, 0.5, k)).collect();
        assert!(LayeredSample::new(img.clone(), img, layers, None).is_err());
    }

    #[test]
    fn sample_round_trip_with_shadow() {
        let bg = Image::filled(2, 2, [0.2; 3]).unwrap();
        let layers = vec![layer(0.9, 0.5, 1)];
        let recomposed = composite(&bg, &layers).unwrap();
        let source = Image::filled(2, 2, [0.5; 3]).unwrap();
        let shadow = shadow_residual(&source, &recomposed).unwrap();
        let sample = LayeredSample::new(source, bg, layers, Some(shadow)).unwrap();
        sample.verify_round_trip(1e-6).unwrap();
    }
}
