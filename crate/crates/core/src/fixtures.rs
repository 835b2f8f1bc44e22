//! Synthetic scene builders for offline runs, tests, and demos.
//!
//! Scenes are solid-color fields with axis-aligned rectangular objects and
//! optional soft shadow strips attached below them, matching what the mock
//! tool services understand. Objects are kept large and dark relative to
//! the field so the grid embedder separates them cleanly.

use crate::error::Result;
use crate::image::Image;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// One rectangular scene object: `rect` is `(top, left, height, width)`.
#[derive(Debug, Clone, Copy)]
pub struct SceneObject {
    pub rect: (usize, usize, usize, usize),
    pub color: [f64; 3],
    /// Adds a soft darkening strip directly below the object.
    pub shadow: bool,
}

/// Renders a field of `bg` color with the given objects painted over it,
/// shadows first so objects occlude their own shadow strips.
pub fn scene(h: usize, w: usize, bg: [f64; 3], objects: &[SceneObject]) -> Result<Image> {
    let mut data = Vec::with_capacity(h * w * 3);
    for _ in 0..h * w {
        data.extend_from_slice(&bg);
    }
    for obj in objects {
        let (top, left, oh, ow) = obj.rect;
        if obj.shadow {
            for y in (top + oh)..(top + oh + 2).min(h) {
                for x in left..(left + ow).min(w) {
                    for c in 0..3 {
                        data[(y * w + x) * 3 + c] = (bg[c] - 0.08).max(0.0);
                    }
                }
            }
        }
    }
    for obj in objects {
        let (top, left, oh, ow) = obj.rect;
        for y in top..(top + oh).min(h) {
            for x in left..(left + ow).min(w) {
                for c in 0..3 {
                    data[(y * w + x) * 3 + c] = obj.color[c];
                }
            }
        }
    }
    Image::new(h, w, data)
}

/// Deterministic multi-scene fixture: `count` scenes of one or two large
/// dark objects on a bright field, varied by the seed.
pub fn demo_scenes(seed: u64, count: usize) -> Result<Vec<(String, Image)>> {
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let side = 48;
        let bg_shade = rng.gen_range(0.84..0.92);
        let bg = [bg_shade, bg_shade - 0.01, bg_shade - 0.02];
        let dark = |rng: &mut ChaCha8Rng| {
            [
                rng.gen_range(0.02..0.12),
                rng.gen_range(0.02..0.12),
                rng.gen_range(0.02..0.12),
            ]
        };
        let objects = match k % 3 {
            // single object with shadow
            0 => vec![SceneObject {
                rect: (6, 8, 24, 26),
                color: dark(&mut rng),
                shadow: true,
            }],
            // two disjoint objects, one shadowed
            1 => vec![
                SceneObject {
                    rect: (4, 3, 20, 19),
                    color: dark(&mut rng),
                    shadow: true,
                },
                SceneObject {
                    rect: (26, 25, 18, 20),
                    color: dark(&mut rng),
                    shadow: false,
                },
            ],
            // front object overlapping a larger back object
            _ => {
                let back = SceneObject {
                    rect: (6, 6, 30, 30),
                    color: [0.30, 0.32, 0.30],
                    shadow: false,
                };
                let front = SceneObject {
                    rect: (14, 14, 14, 14),
                    color: dark(&mut rng),
                    shadow: false,
                };
                vec![back, front]
            }
        };
        out.push((format!("scene_{k:02}"), scene(side, side, bg, &objects)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_in_seed() {
        let a = demo_scenes(7, 3).unwrap();
        let b = demo_scenes(7, 3).unwrap();
        for ((name_a, img_a), (name_b, img_b)) in a.iter().zip(&b) {
            assert_eq!(name_a, name_b);
            assert_eq!(img_a, img_b);
        }
        let c = demo_scenes(8, 3).unwrap();
        assert!(a.iter().zip(&c).any(|((_, x), (_, y))| x != y));
    }

    #[test]
    fn shadow_strip_sits_below_object() {
        let img = scene(
            16,
            16,
            [0.9; 3],
            &[SceneObject {
                rect: (2, 2, 6, 6),
                color: [0.1; 3],
                shadow: true,
            }],
        )
        .unwrap();
        assert_eq!(img.pixel(4, 4), [0.1, 0.1, 0.1]);
        let below = img.pixel(8, 4);
        assert!((below[0] - 0.82).abs() < 1e-12);
        assert_eq!(img.pixel(12, 12), [0.9, 0.9, 0.9]);
    }
}
