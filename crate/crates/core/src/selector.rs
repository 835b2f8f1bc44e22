//! Proposal selection for layered compositions: embedding-based
//! de-duplication, masked-similarity constraints, and global-consistency
//! scoring.
//!
//! Candidate compositions are screened in three stages. The inter-foreground
//! constraint drops subsets where one layer's masked view of another is
//! abnormally similar to itself (same object twice, or heavy occlusion).
//! The foreground-background constraint drops pairs where the background
//! still contains the foreground content under that layer's matte. The
//! survivors are composited and kept only when the render stays globally
//! similar to the chosen source image.

use crate::compose::{composite, composite_on_white, ForegroundLayer};
use crate::error::{Error, Result};
use crate::fusion::resample_mask;
use crate::image::Image;
use serde::{Deserialize, Serialize};

/// An L2-normalized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalizes the raw vector to unit L2 norm.
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::EmptyInput("embedding must have >= 1 dimension"));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "embedding",
                message: "non-finite component".into(),
            });
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "embedding",
                message: "zero vector cannot be normalized".into(),
            });
        }
        Ok(Self(raw.into_iter().map(|v| v / norm).collect()))
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Deterministic image-to-embedding contract. Implementations must return
/// a fixed dimensionality and identical vectors for identical images.
pub trait EmbeddingProvider {
    fn dims(&self) -> usize;
    fn embed(&self, image: &Image) -> Result<EmbeddingVector>;
}

/// Cosine similarity of two normalized embeddings (their inner product).
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    if u.dims() != v.dims() {
        return Err(Error::DimMismatch {
            left: u.dims(),
            right: v.dims(),
        });
    }
    let dot: f64 = u
        .as_slice()
        .iter()
        .zip(v.as_slice())
        .map(|(a, b)| a * b)
        .sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Greedy first-seen-kept de-duplication.
///
/// Scans in input order; an image is dropped iff its cosine with an
/// already-kept representative exceeds `tau_dup`. Always keeps the first
/// image.
pub fn dedup(
    images: &[Image],
    provider: &dyn EmbeddingProvider,
    tau_dup: f64,
) -> Result<Vec<usize>> {
    if images.is_empty() {
        return Err(Error::EmptyInput("dedup needs >= 1 image"));
    }
    let mut kept: Vec<usize> = Vec::new();
    let mut kept_embeddings: Vec<EmbeddingVector> = Vec::new();
    for (idx, image) in images.iter().enumerate() {
        let embedding = provider.embed(image).map_err(|e| Error::Provider {
            item: format!("dedup[{idx}]"),
            message: e.to_string(),
        })?;
        let mut duplicate = false;
        for rep in &kept_embeddings {
            if cosine(&embedding, rep)? > tau_dup {
                duplicate = true;
                break;
            }
        }
        if !duplicate {
            kept.push(idx);
            kept_embeddings.push(embedding);
        }
    }
    Ok(kept)
}

/// Thresholds controlling the three selection constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    /// Upper bound on masked-crop similarity for the inter-foreground and
    /// foreground-background checks; higher is more permissive.
    pub tau_local: f64,
    /// Lower bound on composite-vs-source similarity; higher is stricter.
    pub tau_global: f64,
    pub max_foregrounds: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            tau_local: 0.85,
            tau_global: 0.80,
            max_foregrounds: 5,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("tau_local", self.tau_local), ("tau_global", self.tau_global)] {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) || value == 0.0 {
                return Err(Error::InvalidParameter {
                    name,
                    message: format!("{value} must lie in (0, 1]"),
                });
            }
        }
        if self.max_foregrounds == 0 || self.max_foregrounds > 5 {
            return Err(Error::InvalidParameter {
                name: "max_foregrounds",
                message: format!("{} must lie in 1..=5", self.max_foregrounds),
            });
        }
        Ok(())
    }
}

/// Which image a proposal decomposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SourceRef {
    /// The original input image.
    Original,
    /// An intermediate background acting as the source.
    Background { index: usize },
}

/// One candidate layered composition: a source, a background, and an
/// ordered foreground subset, with its global-consistency score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub source_ref: SourceRef,
    /// Index into the background pool.
    pub background_ref: usize,
    /// Ascending pool indices; pool order is front-to-back.
    pub foreground_ids: Vec<usize>,
    pub global_similarity: f64,
}

/// Pairwise masked-crop features: `features_fg[i][j]` embeds foreground j
/// seen through matte i, `features_bg[i][j]` embeds background j seen
/// through matte i. Diagonals of `features_fg` embed each foreground
/// through its own matte.
#[derive(Debug, Clone)]
pub struct MaskedFeatures {
    pub features_fg: Vec<Vec<EmbeddingVector>>,
    pub features_bg: Vec<Vec<EmbeddingVector>>,
}

/// Precomputes the full masked-similarity feature matrices.
pub fn masked_features(
    foregrounds: &[ForegroundLayer],
    backgrounds: &[Image],
    provider: &dyn EmbeddingProvider,
) -> Result<MaskedFeatures> {
    if foregrounds.is_empty() {
        return Err(Error::EmptyInput("foreground pool is empty"));
    }
    if backgrounds.is_empty() {
        return Err(Error::EmptyInput("background pool is empty"));
    }
    let embed_masked = |alpha_idx: usize, target: &Image, label: &str| -> Result<EmbeddingVector> {
        let alpha = foregrounds[alpha_idx].alpha();
        let resampled = resample_mask(alpha, target.height(), target.width())?;
        let crop = composite_on_white(&resampled, target)?;
        provider.embed(&crop).map_err(|e| Error::Provider {
            item: label.to_string(),
            message: e.to_string(),
        })
    };

    let mut features_fg = Vec::with_capacity(foregrounds.len());
    let mut features_bg = Vec::with_capacity(foregrounds.len());
    for i in 0..foregrounds.len() {
        let mut fg_row = Vec::with_capacity(foregrounds.len());
        for (j, fg) in foregrounds.iter().enumerate() {
            fg_row.push(embed_masked(i, fg.rgb(), &format!("fF[{i}][{j}]"))?);
        }
        features_fg.push(fg_row);
        let mut bg_row = Vec::with_capacity(backgrounds.len());
        for (j, bg) in backgrounds.iter().enumerate() {
            bg_row.push(embed_masked(i, bg, &format!("fB[{i}][{j}]"))?);
        }
        features_bg.push(bg_row);
    }
    Ok(MaskedFeatures {
        features_fg,
        features_bg,
    })
}

/// Enumerates every non-empty foreground subset (ascending indices, at most
/// `max_foregrounds` members) whose pairs all pass the inter-foreground
/// overlap check: no pair `i < j` with
/// `cosine(features_fg[i][i], features_fg[i][j]) > tau_local`.
pub fn valid_foreground_subsets(
    features: &MaskedFeatures,
    tau_local: f64,
    max_foregrounds: usize,
) -> Result<Vec<Vec<usize>>> {
    let k = features.features_fg.len();
    let mut subsets = Vec::new();
    for mask in 1u32..(1u32 << k) {
        if mask.count_ones() as usize > max_foregrounds {
            continue;
        }
        let members: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let mut clean = true;
        'pairs: for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                let sim = cosine(
                    &features.features_fg[i][i],
                    &features.features_fg[i][j],
                )?;
                if sim > tau_local {
                    clean = false;
                    break 'pairs;
                }
            }
        }
        if clean {
            subsets.push(members);
        }
    }
    Ok(subsets)
}

/// Runs the full three-constraint selection over every
/// (source, background, subset) combination.
///
/// Sources iterate over the original image then each background; the paired
/// background never equals the source. Survivors of the entity-level checks
/// are composited and accepted iff the render's similarity to the source
/// reaches `tau_global`.
pub fn select_proposals(
    source: &Image,
    backgrounds: &[Image],
    foregrounds: &[ForegroundLayer],
    provider: &dyn EmbeddingProvider,
    config: &SelectorConfig,
) -> Result<Vec<Proposal>> {
    config.validate()?;
    if backgrounds.is_empty() {
        return Err(Error::EmptyInput("background pool is empty"));
    }
    if foregrounds.len() > config.max_foregrounds {
        return Err(Error::InvalidParameter {
            name: "foregrounds",
            message: format!(
                "pool of {} exceeds max_foregrounds {}",
                foregrounds.len(),
                config.max_foregrounds
            ),
        });
    }
    let features = masked_features(foregrounds, backgrounds, provider)?;
    let subsets = valid_foreground_subsets(&features, config.tau_local, config.max_foregrounds)?;

    let embed = |img: &Image, label: String| -> Result<EmbeddingVector> {
        provider.embed(img).map_err(|e| Error::Provider {
            item: label,
            message: e.to_string(),
        })
    };
    let source_embedding = embed(source, "source".into())?;
    let background_embeddings: Vec<EmbeddingVector> = backgrounds
        .iter()
        .enumerate()
        .map(|(j, b)| embed(b, format!("background[{j}]")))
        .collect::<Result<Vec<_>>>()?;

    let sources: Vec<SourceRef> = std::iter::once(SourceRef::Original)
        .chain((0..backgrounds.len()).map(|index| SourceRef::Background { index }))
        .collect();

    let mut proposals = Vec::new();
    for &source_ref in &sources {
        let (src_embedding, src_bg_index) = match source_ref {
            SourceRef::Original => (&source_embedding, None),
            SourceRef::Background { index } => (&background_embeddings[index], Some(index)),
        };
        for (j, background) in backgrounds.iter().enumerate() {
            if Some(j) == src_bg_index {
                continue;
            }
            'subset: for subset in &subsets {
                for &i in subset {
                    let sim = cosine(&features.features_fg[i][i], &features.features_bg[i][j])?;
                    if sim > config.tau_local {
                        continue 'subset;
                    }
                }
                let layers: Vec<ForegroundLayer> = subset
                    .iter()
                    .enumerate()
                    .map(|(pos, &i)| foregrounds[i].clone().with_order(pos + 1))
                    .collect::<Result<Vec<_>>>()?;
                let render = composite(background, &layers)?;
                let global = cosine(&embed(&render, "composite".into())?, src_embedding)?;
                if global >= config.tau_global {
                    proposals.push(Proposal {
                        source_ref,
                        background_ref: j,
                        foreground_ids: subset.clone(),
                        global_similarity: global,
                    });
                }
            }
        }
    }
    Ok(proposals)
}

/// Deterministic reference embedder: 8x8 grayscale area downsample,
/// flattened and L2-normalized. Cheap enough for exhaustive oracles and
/// independent of pixel visit order.
#[derive(Debug, Clone, Copy, Default)]
pub struct GridEmbedder;

impl GridEmbedder {
    pub const GRID: usize = 8;
}

impl EmbeddingProvider for GridEmbedder {
    fn dims(&self) -> usize {
        Self::GRID * Self::GRID
    }

    fn embed(&self, image: &Image) -> Result<EmbeddingVector> {
        let (h, w) = image.dims();
        let g = Self::GRID;
        let mut cells = vec![0.0; g * g];
        for cy in 0..g {
            let y0 = cy * h / g;
            let y1 = (((cy + 1) * h).div_ceil(g)).clamp(y0 + 1, h.max(y0 + 1));
            for cx in 0..g {
                let x0 = cx * w / g;
                let x1 = (((cx + 1) * w).div_ceil(g)).clamp(x0 + 1, w.max(x0 + 1));
                let mut sum = 0.0;
                let mut count = 0usize;
                for y in y0..y1.min(h) {
                    for x in x0..x1.min(w) {
                        let [r, gr, b] = image.pixel(y, x);
                        sum += (r + gr + b) / 3.0;
                        count += 1;
                    }
                }
                cells[cy * g + cx] = if count > 0 { sum / count as f64 } else { 0.0 };
            }
        }
        match EmbeddingVector::new(cells) {
            Ok(v) => Ok(v),
            // All-black images have zero norm; map them to a fixed unit
            // vector so the provider stays total and deterministic.
            Err(_) => EmbeddingVector::new(vec![1.0; g * g]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::AlphaMask;

    /// Scene helper: a dark rectangle on a bright field.
    fn scene(h: usize, w: usize, bg: f64, rect: (usize, usize, usize, usize), fg: f64) -> Image {
        let mut data = vec![bg; h * w * 3];
        let (top, left, rh, rw) = rect;
        for y in top..top + rh {
            for x in left..left + rw {
                for c in 0..3 {
                    data[(y * w + x) * 3 + c] = fg;
                }
            }
        }
        Image::new(h, w, data).unwrap()
    }

    fn rect_mask(h: usize, w: usize, rect: (usize, usize, usize, usize)) -> AlphaMask {
        let mut data = vec![0.0; h * w];
        let (top, left, rh, rw) = rect;
        for y in top..top + rh {
            for x in left..left + rw {
                data[y * w + x] = 1.0;
            }
        }
        AlphaMask::new(h, w, data).unwrap()
    }

    /// Foreground layer: object on white with a hard matte.
    fn fg_layer(h: usize, w: usize, rect: (usize, usize, usize, usize), shade: f64) -> ForegroundLayer {
        let rgb = scene(h, w, 1.0, rect, shade);
        ForegroundLayer::new(rgb, rect_mask(h, w, rect), 1).unwrap()
    }

    #[test]
    fn cosine_trivial_values() {
        let u = EmbeddingVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        let v = EmbeddingVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cosine(&u, &u).unwrap(), 1.0);
        assert_eq!(cosine(&u, &v).unwrap(), 0.0);
    }

    #[test]
    fn cosine_matches_dot_product_oracle() {
        let raw_u = vec![0.3, -0.4, 0.5, 0.1];
        let raw_v = vec![-0.2, 0.9, 0.05, 0.4];
        let u = EmbeddingVector::new(raw_u.clone()).unwrap();
        let v = EmbeddingVector::new(raw_v.clone()).unwrap();
        // oracle: normalized dot product computed by hand
        let nu: f64 = raw_u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv: f64 = raw_v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let expected: f64 = raw_u
            .iter()
            .zip(&raw_v)
            .map(|(a, b)| (a / nu) * (b / nv))
            .sum();
        assert!((cosine(&u, &v).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_dim_mismatch() {
        let u = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let v = EmbeddingVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(cosine(&u, &v).is_err());
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let v = EmbeddingVector::new(vec![3.0, 4.0]).unwrap();
        let norm: f64 = v.as_slice().iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6);
        assert!(EmbeddingVector::new(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn dedup_identical_list_keeps_first() {
        let img = scene(16, 16, 0.9, (4, 4, 6, 6), 0.1);
        let kept = dedup(&[img.clone(), img.clone(), img], &GridEmbedder, 0.95).unwrap();
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn dedup_dissimilar_keeps_all() {
        let images = vec![
            scene(16, 16, 0.95, (0, 0, 6, 6), 0.05),
            scene(16, 16, 0.95, (10, 10, 6, 6), 0.05),
            scene(16, 16, 0.05, (4, 4, 8, 8), 0.9),
        ];
        let kept = dedup(&images, &GridEmbedder, 0.95).unwrap();
        assert_eq!(kept, vec![0, 1, 2]);
    }

    #[test]
    fn dedup_drops_near_duplicate_matching_pairwise_oracle() {
        let images = vec![
            scene(16, 16, 0.9, (2, 2, 8, 8), 0.1),
            scene(16, 16, 0.9, (2, 2, 8, 8), 0.12), // near duplicate of [0]
            scene(16, 16, 0.1, (6, 6, 8, 8), 0.95),
        ];
        let tau = 0.995;
        let kept = dedup(&images, &GridEmbedder, tau).unwrap();

        // exhaustive pairing oracle: greedy scan re-implemented literally
        let embeddings: Vec<_> = images
            .iter()
            .map(|i| GridEmbedder.embed(i).unwrap())
            .collect();
        let mut expected: Vec<usize> = Vec::new();
        for i in 0..images.len() {
            let dup = expected
                .iter()
                .any(|&k| cosine(&embeddings[i], &embeddings[k]).unwrap() > tau);
            if !dup {
                expected.push(i);
            }
        }
        assert_eq!(kept, expected);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn masked_feature_diagonal_matches_definition() {
        let fgs = vec![
            fg_layer(16, 16, (2, 2, 6, 6), 0.1),
            fg_layer(16, 16, (9, 9, 5, 5), 0.2),
        ];
        let bgs = vec![scene(16, 16, 0.9, (0, 0, 1, 1), 0.9)];
        let feats = masked_features(&fgs, &bgs, &GridEmbedder).unwrap();
        for (i, fg) in fgs.iter().enumerate() {
            let crop = composite_on_white(fg.alpha(), fg.rgb()).unwrap();
            let expected = GridEmbedder.embed(&crop).unwrap();
            assert_eq!(feats.features_fg[i][i], expected);
        }
    }

    #[test]
    fn masked_feature_full_alpha_embeds_background_directly() {
        let full = ForegroundLayer::new(
            scene(16, 16, 0.3, (0, 0, 1, 1), 0.3),
            AlphaMask::filled(16, 16, 1.0).unwrap(),
            1,
        )
        .unwrap();
        let bgs = vec![
            scene(16, 16, 0.8, (3, 3, 5, 5), 0.2),
            scene(16, 16, 0.4, (8, 2, 4, 9), 0.9),
        ];
        let feats = masked_features(&[full], &bgs, &GridEmbedder).unwrap();
        for (j, bg) in bgs.iter().enumerate() {
            let expected = GridEmbedder.embed(bg).unwrap();
            assert_eq!(feats.features_bg[0][j], expected);
        }
    }

    #[test]
    fn masked_features_match_per_cell_oracle() {
        let fgs = vec![
            fg_layer(12, 12, (1, 1, 5, 5), 0.15),
            fg_layer(12, 12, (6, 6, 5, 5), 0.05),
        ];
        let bgs = vec![
            scene(12, 12, 0.9, (0, 0, 1, 1), 0.9),
            scene(12, 12, 0.7, (4, 4, 4, 4), 0.2),
        ];
        let feats = masked_features(&fgs, &bgs, &GridEmbedder).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let crop_fg = composite_on_white(fgs[i].alpha(), fgs[j].rgb()).unwrap();
                assert_eq!(
                    feats.features_fg[i][j],
                    GridEmbedder.embed(&crop_fg).unwrap()
                );
                let crop_bg = composite_on_white(fgs[i].alpha(), &bgs[j]).unwrap();
                assert_eq!(
                    feats.features_bg[i][j],
                    GridEmbedder.embed(&crop_bg).unwrap()
                );
            }
        }
    }

    #[test]
    fn single_foreground_yields_single_subset() {
        let fgs = vec![fg_layer(16, 16, (4, 4, 8, 8), 0.1)];
        let bgs = vec![scene(16, 16, 0.9, (0, 0, 1, 1), 0.9)];
        let feats = masked_features(&fgs, &bgs, &GridEmbedder).unwrap();
        let subsets = valid_foreground_subsets(&feats, 0.9, 5).unwrap();
        assert_eq!(subsets, vec![vec![0]]);
    }

    #[test]
    fn identical_foregrounds_reject_their_pair() {
        let fg = fg_layer(16, 16, (4, 4, 8, 8), 0.05);
        let fgs = vec![fg.clone(), fg];
        let bgs = vec![scene(16, 16, 0.9, (0, 0, 1, 1), 0.9)];
        let feats = masked_features(&fgs, &bgs, &GridEmbedder).unwrap();
        let subsets = valid_foreground_subsets(&feats, 0.9, 5).unwrap();
        assert_eq!(subsets, vec![vec![0], vec![1]]);
    }

    #[test]
    fn dissimilar_triple_yields_all_subsets() {
        let fgs = vec![
            fg_layer(24, 24, (1, 1, 9, 9), 0.02),
            fg_layer(24, 24, (13, 13, 9, 9), 0.04),
            fg_layer(24, 24, (1, 13, 9, 9), 0.06),
        ];
        let bgs = vec![scene(24, 24, 0.9, (0, 0, 1, 1), 0.9)];
        let feats = masked_features(&fgs, &bgs, &GridEmbedder).unwrap();
        // pick tau above the cross-pair similarities but below 1
        let mut max_cross: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let s = cosine(&feats.features_fg[i][i], &feats.features_fg[i][j]).unwrap();
                    max_cross = max_cross.max(s);
                }
            }
        }
        assert!(max_cross < 1.0);
        let tau = (max_cross + 1.0) / 2.0;
        let subsets = valid_foreground_subsets(&feats, tau, 5).unwrap();
        assert_eq!(subsets.len(), 7, "expected all 7 subsets of a 3-pool");

        // enumeration oracle: literal re-check of every subset
        for subset in &subsets {
            for (a, &i) in subset.iter().enumerate() {
                for &j in &subset[a + 1..] {
                    assert!(
                        cosine(&feats.features_fg[i][i], &feats.features_fg[i][j]).unwrap() <= tau
                    );
                }
            }
        }
    }

    #[test]
    fn max_foregrounds_caps_subset_size() {
        let fgs = vec![
            fg_layer(24, 24, (1, 1, 9, 9), 0.02),
            fg_layer(24, 24, (13, 13, 9, 9), 0.04),
            fg_layer(24, 24, (1, 13, 9, 9), 0.06),
        ];
        let bgs = vec![scene(24, 24, 0.9, (0, 0, 1, 1), 0.9)];
        let feats = masked_features(&fgs, &bgs, &GridEmbedder).unwrap();
        let subsets = valid_foreground_subsets(&feats, 0.999, 1).unwrap();
        assert!(subsets.iter().all(|s| s.len() == 1));
    }

    /// Literal re-implementation of the three-constraint selection used as
    /// the equivalence oracle.
    fn brute_force_select(
        source: &Image,
        backgrounds: &[Image],
        foregrounds: &[ForegroundLayer],
        provider: &dyn EmbeddingProvider,
        config: &SelectorConfig,
    ) -> Vec<Proposal> {
        let k = foregrounds.len();
        let feats = masked_features(foregrounds, backgrounds, provider).unwrap();
        let mut valid: Vec<Vec<usize>> = Vec::new();
        for mask in 1u32..(1 << k) {
            let members: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
            if members.len() > config.max_foregrounds {
                continue;
            }
            let mut ok = true;
            for (a, &i) in members.iter().enumerate() {
                for &j in &members[a + 1..] {
                    if cosine(&feats.features_fg[i][i], &feats.features_fg[i][j]).unwrap()
                        > config.tau_local
                    {
                        ok = false;
                    }
                }
            }
            if ok {
                valid.push(members);
            }
        }
        let mut out = Vec::new();
        let mut sources = vec![SourceRef::Original];
        for i in 0..backgrounds.len() {
            sources.push(SourceRef::Background { index: i });
        }
        for &source_ref in &sources {
            for j in 0..backgrounds.len() {
                if let SourceRef::Background { index } = source_ref {
                    if index == j {
                        continue;
                    }
                }
                for subset in &valid {
                    if subset.iter().any(|&i| {
                        cosine(&feats.features_fg[i][i], &feats.features_bg[i][j]).unwrap()
                            > config.tau_local
                    }) {
                        continue;
                    }
                    let layers: Vec<ForegroundLayer> = subset
                        .iter()
                        .enumerate()
                        .map(|(pos, &i)| foregrounds[i].clone().with_order(pos + 1).unwrap())
                        .collect();
                    let render = composite(&backgrounds[j], &layers).unwrap();
                    let src_img = match source_ref {
                        SourceRef::Original => source,
                        SourceRef::Background { index } => &backgrounds[index],
                    };
                    let g = cosine(
                        &provider.embed(&render).unwrap(),
                        &provider.embed(src_img).unwrap(),
                    )
                    .unwrap();
                    if g >= config.tau_global {
                        out.push(Proposal {
                            source_ref,
                            background_ref: j,
                            foreground_ids: subset.clone(),
                            global_similarity: g,
                        });
                    }
                }
            }
        }
        out
    }

    #[test]
    fn background_containing_foreground_is_rejected() {
        let h = 16;
        let rect = (3, 3, 10, 10);
        let source = scene(h, h, 0.9, rect, 0.02);
        let clean = scene(h, h, 0.9, (0, 0, 1, 1), 0.9);
        let dirty = source.clone(); // still contains the object
        let fg = fg_layer(h, h, rect, 0.02);

        let config = SelectorConfig {
            tau_local: 0.93,
            tau_global: 0.8,
            max_foregrounds: 5,
        };
        let proposals = select_proposals(
            &source,
            &[clean, dirty],
            &[fg],
            &GridEmbedder,
            &config,
        )
        .unwrap();
        assert!(
            !proposals.is_empty(),
            "clean background should survive selection"
        );
        assert!(
            proposals.iter().all(|p| p.background_ref == 0),
            "background still containing the object must be rejected: {proposals:?}"
        );
    }

    #[test]
    fn composite_identical_to_source_scores_one() {
        let h = 16;
        let rect = (3, 3, 10, 10);
        let background = scene(h, h, 0.9, (0, 0, 1, 1), 0.9);
        let fg = fg_layer(h, h, rect, 0.02);
        let source = composite(&background, &[fg.clone()]).unwrap();
        let config = SelectorConfig {
            tau_local: 0.93,
            tau_global: 0.8,
            max_foregrounds: 5,
        };
        let proposals =
            select_proposals(&source, &[background], &[fg], &GridEmbedder, &config).unwrap();
        let best = proposals
            .iter()
            .find(|p| p.source_ref == SourceRef::Original)
            .expect("original-source proposal");
        assert!((best.global_similarity - 1.0).abs() < 1e-9);
    }

    #[test]
    fn selection_equals_brute_force_oracle() {
        let h = 32;
        let source = scene(h, h, 0.9, (2, 2, 18, 18), 0.02);
        let backgrounds = vec![
            scene(h, h, 0.9, (0, 0, 1, 1), 0.9),
            scene(h, h, 0.9, (24, 4, 6, 6), 0.7),
        ];
        let foregrounds = vec![
            fg_layer(h, h, (2, 2, 18, 18), 0.02),
            fg_layer(h, h, (12, 12, 18, 18), 0.05),
            fg_layer(h, h, (2, 12, 16, 16), 0.1),
        ];
        let config = SelectorConfig {
            tau_local: 0.93,
            tau_global: 0.7,
            max_foregrounds: 5,
        };
        let got =
            select_proposals(&source, &backgrounds, &foregrounds, &GridEmbedder, &config).unwrap();
        let expected =
            brute_force_select(&source, &backgrounds, &foregrounds, &GridEmbedder, &config);
        assert_eq!(got, expected);
        assert!(!got.is_empty());
    }

    #[test]
    fn selection_is_deterministic() {
        let h = 16;
        let source = scene(h, h, 0.9, (4, 4, 8, 8), 0.1);
        let backgrounds = vec![scene(h, h, 0.9, (0, 0, 1, 1), 0.9)];
        let foregrounds = vec![fg_layer(h, h, (4, 4, 8, 8), 0.1)];
        let config = SelectorConfig::default();
        let a = select_proposals(&source, &backgrounds, &foregrounds, &GridEmbedder, &config)
            .unwrap();
        let b = select_proposals(&source, &backgrounds, &foregrounds, &GridEmbedder, &config)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn raising_tau_local_never_shrinks_subsets() {
        let fgs = vec![
            fg_layer(16, 16, (1, 1, 7, 7), 0.05),
            fg_layer(16, 16, (8, 8, 7, 7), 0.15),
            fg_layer(16, 16, (1, 8, 7, 7), 0.3),
        ];
        let bgs = vec![scene(16, 16, 0.9, (0, 0, 1, 1), 0.9)];
        let feats = masked_features(&fgs, &bgs, &GridEmbedder).unwrap();
        let mut previous: Option<Vec<Vec<usize>>> = None;
        for tau in [0.5, 0.7, 0.85, 0.95, 1.0] {
            let subsets = valid_foreground_subsets(&feats, tau, 5).unwrap();
            if let Some(prev) = &previous {
                for s in prev {
                    assert!(subsets.contains(s), "tau={tau} lost subset {s:?}");
                }
            }
            previous = Some(subsets);
        }
    }

    #[test]
    fn raising_tau_global_never_grows_proposals() {
        let h = 16;
        let source = scene(h, h, 0.9, (4, 4, 8, 8), 0.1);
        let backgrounds = vec![
            scene(h, h, 0.9, (0, 0, 1, 1), 0.9),
            scene(h, h, 0.8, (10, 2, 4, 4), 0.3),
        ];
        let foregrounds = vec![fg_layer(h, h, (4, 4, 8, 8), 0.1)];
        let mut previous: Option<Vec<Proposal>> = None;
        for tau_global in [0.99, 0.9, 0.8, 0.5, 0.1] {
            // descending strictness: iterate ascending permissiveness
            let config = SelectorConfig {
                tau_local: 0.9,
                tau_global,
                max_foregrounds: 5,
            };
            let proposals =
                select_proposals(&source, &backgrounds, &foregrounds, &GridEmbedder, &config)
                    .unwrap();
            if let Some(prev) = &previous {
                for p in prev {
                    assert!(
                        proposals.iter().any(|q| q.source_ref == p.source_ref
                            && q.background_ref == p.background_ref
                            && q.foreground_ids == p.foreground_ids),
                        "lowering tau_global lost {p:?}"
                    );
                }
            }
            previous = Some(proposals);
        }
    }

    #[test]
    fn select_rejects_empty_backgrounds() {
        let source = scene(8, 8, 0.9, (2, 2, 4, 4), 0.1);
        let fgs = vec![fg_layer(8, 8, (2, 2, 4, 4), 0.1)];
        assert!(matches!(
            select_proposals(&source, &[], &fgs, &GridEmbedder, &SelectorConfig::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn proposal_serializes_with_refs_and_scores() {
        let p = Proposal {
            source_ref: SourceRef::Background { index: 1 },
            background_ref: 0,
            foreground_ids: vec![0, 2],
            global_similarity: 0.91,
        };
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"background\""));
        let back: Proposal = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }
}
