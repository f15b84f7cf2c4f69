//! Deterministic synthetic objects and scenes.
//!
//! Used by the test suites and the Python smoke script so no external
//! image data is needed. Everything is a pure function of its seed.

use std::path::Path;

use crate::compositor::ObjectSample;
use crate::imaging::{self, Rgb8Image, Rng};
use crate::maskgen::{MaskParams, ShapeFamily};
use crate::ndgrad::Tensor;

/// Builds a car-ish object: an elliptical body silhouette over a textured
/// paint job, plus a centered soft patch mask covering roughly a fifth of
/// the object. Returns `(object, patch_mask_on_object_grid)`.
pub fn make_object(h: usize, w: usize, seed: u64) -> (ObjectSample, Tensor) {
    let mut rng = Rng::new(seed.wrapping_mul(0x9E37_79B9).wrapping_add(1));
    let (cx, cy) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (ra, rb) = (h as f64 * 0.42, w as f64 * 0.45);

    let mut mask = vec![0.0; h * w];
    let mut image = vec![0.0; h * w * 3];
    let base = [
        rng.uniform(0.25, 0.75),
        rng.uniform(0.25, 0.75),
        rng.uniform(0.25, 0.75),
    ];
    for i in 0..h {
        for j in 0..w {
            let di = (i as f64 - cx) / ra;
            let dj = (j as f64 - cy) / rb;
            let inside = di * di + dj * dj <= 1.0;
            if inside {
                mask[i * w + j] = 1.0;
            }
            // textured paint: low-frequency waves plus a little noise
            let wave = 0.12 * ((i as f64 * 0.35).sin() + (j as f64 * 0.22).cos());
            for c in 0..3 {
                let noise = rng.uniform(-0.04, 0.04);
                let v: f64 = if inside {
                    base[c] + wave + noise
                } else {
                    0.05 + noise.abs()
                };
                image[(i * w + j) * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    let object = ObjectSample::new(
        Tensor::from_vec(&[h, w, 3], image),
        Tensor::from_vec(&[h, w], mask),
    );

    let mut params = MaskParams::new(ShapeFamily::Rect);
    let (ph, pw) = (h as f64 * 0.42, w as f64 * 0.42);
    params.theta1 = [
        cy - pw / 2.0,
        cy + pw / 2.0,
        cx + ph / 2.0,
        cx - ph / 2.0,
    ];
    let patch_mask = params.mask(h, w).grid;
    (object, patch_mask)
}

/// Deterministic scene set: smooth sky/ground gradients with seeded blobs
/// so disparity models see real spatial structure.
pub fn make_scenes(n: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
    (0..n)
        .map(|k| {
            let mut rng = Rng::new(seed.wrapping_add(k as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
            let horizon = rng.uniform(0.3, 0.6) * h as f64;
            let sky = [rng.uniform(0.5, 0.8), rng.uniform(0.6, 0.9), rng.uniform(0.8, 1.0)];
            let ground = [rng.uniform(0.2, 0.5), rng.uniform(0.2, 0.5), rng.uniform(0.1, 0.4)];
            let nblobs = 3 + rng.uniform_index(4);
            let max_blob = (h as f64 / 3.0).max(3.0);
            let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..nblobs)
                .map(|_| {
                    (
                        rng.uniform(0.0, h as f64),
                        rng.uniform(0.0, w as f64),
                        rng.uniform(2.0, max_blob),
                        [
                            rng.uniform(0.1, 0.9),
                            rng.uniform(0.1, 0.9),
                            rng.uniform(0.1, 0.9),
                        ],
                    )
                })
                .collect();
            let mut data = vec![0.0; h * w * 3];
            for i in 0..h {
                for j in 0..w {
                    let t = (i as f64 / h as f64).min(1.0);
                    let below = i as f64 > horizon;
                    for c in 0..3 {
                        let mut v = if below {
                            ground[c] * (0.6 + 0.4 * t)
                        } else {
                            sky[c] * (1.0 - 0.3 * t)
                        };
                        for (bi, bj, br, col) in &blobs {
                            let d2 = (i as f64 - bi).powi(2) + (j as f64 - bj).powi(2);
                            let wgt = (-d2 / (2.0 * br * br)).exp();
                            v = v * (1.0 - 0.5 * wgt) + col[c] * 0.5 * wgt;
                        }
                        data[(i * w + j) * 3 + c] = v.clamp(0.0, 1.0);
                    }
                }
            }
            Tensor::from_vec(&[h, w, 3], data)
        })
        .collect()
}

/// Writes a complete file fixture set for the CLI: `object.ppm`,
/// `object_mask.pgm`, and `scenes/scene_XX.ppm`. Returns the paths
/// `(object, mask, scenes_dir)`.
pub fn write_fixture_set(
    dir: &Path,
    object_dims: (usize, usize),
    scene_dims: (usize, usize),
    n_scenes: usize,
    seed: u64,
) -> std::io::Result<(std::path::PathBuf, std::path::PathBuf, std::path::PathBuf)> {
    let (obj, _) = make_object(object_dims.0, object_dims.1, seed);
    let obj_path = dir.join("object.ppm");
    imaging::write_ppm(&Rgb8Image::from_tensor(&obj.image), &obj_path)
        .map_err(|e| std::io::Error::other(e.to_string()))?;

    let mask_path = dir.join("object_mask.pgm");
    let samples: Vec<u8> = obj
        .mask
        .data()
        .iter()
        .map(|&v| if v >= 0.5 { 255 } else { 0 })
        .collect();
    imaging::write_pgm8(object_dims.0, object_dims.1, &samples, &mask_path)
        .map_err(|e| std::io::Error::other(e.to_string()))?;

    let scenes_dir = dir.join("scenes");
    std::fs::create_dir_all(&scenes_dir)?;
    for (k, scene) in make_scenes(n_scenes, scene_dims.0, scene_dims.1, seed ^ 0xABCD)
        .iter()
        .enumerate()
    {
        let p = scenes_dir.join(format!("scene_{:02}.ppm", k));
        imaging::write_ppm(&Rgb8Image::from_tensor(scene), &p)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
    }
    Ok((obj_path, mask_path, scenes_dir))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn object_is_binary_masked_and_in_range() {
        let (obj, m_p) = make_object(24, 32, 7);
        assert!(obj.mask_area() > 0.0);
        assert!(obj.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(m_p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn scenes_are_deterministic() {
        let a = make_scenes(2, 16, 16, 5);
        let b = make_scenes(2, 16, 16, 5);
        assert_eq!(a[0].data(), b[0].data());
        assert_eq!(a[1].data(), b[1].data());
        assert_ne!(a[0].data(), a[1].data());
    }
}
