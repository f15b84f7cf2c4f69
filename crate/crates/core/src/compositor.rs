//! Scenario construction: patch application, random object transforms,
//! and scene embedding with warped masks.
//!
//! Per scenario the same sampled transform drives both branches: the
//! benign object goes into `X_b`, the patched object into `X_adv`, both
//! embedded into the same scene through the re-binarized object mask
//! `M_O`. The patch mask is kept soft through the warp (so gradients reach
//! the shape parameters) and multiplied by `M_O`, which guarantees the
//! nesting invariant `M_p <= M_O` and confines the patch to the object.

use crate::imaging::Rng;
use crate::ndgrad::{Affine2, Tensor};

/// Benign object on its own grid: image plus binary silhouette mask.
#[derive(Debug, Clone)]
pub struct ObjectSample {
    /// `(h_o, w_o, 3)` image in [0, 1].
    pub image: Tensor,
    /// `(h_o, w_o)` binary mask.
    pub mask: Tensor,
}

impl ObjectSample {
    pub fn new(image: Tensor, mask: Tensor) -> Self {
        let ishape = image.shape();
        assert_eq!(ishape.len(), 3, "object image must be (h, w, 3)");
        assert_eq!(ishape[2], 3);
        assert_eq!(
            mask.shape(),
            &ishape[..2],
            "object mask dims must match the image"
        );
        assert!(
            mask.data().iter().all(|&v| v == 0.0 || v == 1.0),
            "object mask must be binary"
        );
        ObjectSample { image, mask }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.image.shape()[0], self.image.shape()[1])
    }

    /// Number of mask-on pixels.
    pub fn mask_area(&self) -> f64 {
        self.mask.data().iter().sum()
    }
}

/// One sampled expectation-over-transformation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformParams {
    pub scale: f64,
    /// Rotation in radians, sampled from +-3 degrees.
    pub rotation: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Object-center placement (row, col) in scene coordinates.
    pub place: [f64; 2],
}

pub const SCALE_RANGE: (f64, f64) = (0.5, 1.0);
pub const ROTATION_DEG: f64 = 3.0;
pub const BRIGHTNESS_RANGE: (f64, f64) = (0.7, 1.3);
pub const CONTRAST_RANGE: (f64, f64) = (0.9, 1.1);
pub const SATURATION_RANGE: (f64, f64) = (0.9, 1.1);

/// One composited training sample.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub scene: Tensor,
    pub x_b: Tensor,
    pub x_adv: Tensor,
    /// Warped, re-binarized object mask in scene coordinates.
    pub m_o: Tensor,
    /// Warped soft patch mask in scene coordinates, nested inside `m_o`.
    pub m_p: Tensor,
    pub tp: TransformParams,
    pub scene_index: usize,
}

/// `O_adv = (1 - m) .* O + m .* p`, per channel.
pub fn apply_patch(object: &Tensor, mask: &Tensor, patch: &Tensor) -> Tensor {
    assert_eq!(object.shape(), patch.shape(), "patch dims must match object");
    let c = object.shape()[2];
    let m3 = mask.expand_channels(c);
    let keep = m3.rsub_s(1.0).mul(object);
    keep.add(&m3.mul(patch))
}

/// Draws one transform: scale, rotation, color factors, then a placement
/// uniform over positions that keep the scaled (and rotated) object fully
/// inside the scene. Degenerate ranges collapse to the scene center.
pub fn sample_transform(
    rng: &mut Rng,
    scene_dims: (usize, usize),
    object_dims: (usize, usize),
) -> TransformParams {
    let (sh, sw) = scene_dims;
    let (oh, ow) = object_dims;
    assert!(
        oh <= sh && ow <= sw,
        "object {}x{} larger than scene {}x{}",
        oh,
        ow,
        sh,
        sw
    );
    let scale = rng.uniform(SCALE_RANGE.0, SCALE_RANGE.1);
    let rotation = rng.uniform(-ROTATION_DEG, ROTATION_DEG).to_radians();
    let brightness = rng.uniform(BRIGHTNESS_RANGE.0, BRIGHTNESS_RANGE.1);
    let contrast = rng.uniform(CONTRAST_RANGE.0, CONTRAST_RANGE.1);
    let saturation = rng.uniform(SATURATION_RANGE.0, SATURATION_RANGE.1);

    // rotated-and-scaled half extents of the object bounding box
    let (sin, cos) = (rotation.sin().abs(), rotation.cos().abs());
    let half_r = scale * ((oh - 1) as f64 * cos + (ow - 1) as f64 * sin) / 2.0;
    let half_c = scale * ((ow - 1) as f64 * cos + (oh - 1) as f64 * sin) / 2.0;
    let center = [(sh - 1) as f64 / 2.0, (sw - 1) as f64 / 2.0];
    let row = if 2.0 * half_r < (sh - 1) as f64 {
        rng.uniform(half_r, (sh - 1) as f64 - half_r)
    } else {
        center[0] // no slack: forced center
    };
    let col = if 2.0 * half_c < (sw - 1) as f64 {
        rng.uniform(half_c, (sw - 1) as f64 - half_c)
    } else {
        center[1]
    };
    TransformParams {
        scale,
        rotation,
        brightness,
        contrast,
        saturation,
        place: [row, col],
    }
}

fn color_ops(image: &Tensor, tp: &TransformParams) -> Tensor {
    // brightness -> contrast -> saturation, clamped after each stage
    let x = image.mul_s(tp.brightness).clamp(0.0, 1.0);
    let x = x.add_s(-0.5).mul_s(tp.contrast).add_s(0.5).clamp(0.0, 1.0);
    let r = x.channel(0);
    let g = x.channel(1);
    let b = x.channel(2);
    let gray = (&(&r.mul_s(0.299) + &g.mul_s(0.587)) + &b.mul_s(0.114)).expand_channels(3);
    gray.add(&(&x - &gray).mul_s(tp.saturation)).clamp(0.0, 1.0)
}

/// Affine from object-grid coordinates to scene coordinates for `tp`.
pub fn object_to_scene_affine(tp: &TransformParams, object_dims: (usize, usize)) -> Affine2 {
    let (oh, ow) = object_dims;
    let center = [(oh - 1) as f64 / 2.0, (ow - 1) as f64 / 2.0];
    Affine2::scale_rot_about(tp.scale, tp.rotation, center, tp.place)
}

/// Warps an object-grid image and mask into scene coordinates. Color ops
/// hit the image only; the mask comes back soft — callers binarize the
/// object mask and keep the patch mask soft.
pub fn transform_object(
    image: &Tensor,
    mask: &Tensor,
    tp: &TransformParams,
    scene_dims: (usize, usize),
) -> (Tensor, Tensor) {
    let object_dims = (image.shape()[0], image.shape()[1]);
    let aff = object_to_scene_affine(tp, object_dims);
    let colored = color_ops(image, tp);
    let warped = colored.warp_affine(&aff, scene_dims.0, scene_dims.1);
    let warped_mask = mask.warp_affine(&aff, scene_dims.0, scene_dims.1);
    (warped, warped_mask)
}

/// `(1 - M) .* RS + M .* obj`, per channel.
pub fn embed(scene: &Tensor, object: &Tensor, mask: &Tensor) -> Tensor {
    assert_eq!(scene.shape(), object.shape(), "embed dims mismatch");
    let m3 = mask.expand_channels(scene.shape()[2]);
    m3.rsub_s(1.0).mul(scene).add(&m3.mul(object))
}

/// Builds one scenario from an already-patched adversarial object.
///
/// `o_adv` and `m_p_obj` may be taped (training) or plain (evaluation);
/// the benign branch is always evaluated from plain values so no patch
/// gradient can reach it.
pub fn build_scenario(
    object: &ObjectSample,
    o_adv: &Tensor,
    m_p_obj: &Tensor,
    scene: &Tensor,
    scene_index: usize,
    tp: TransformParams,
) -> Scenario {
    let scene_dims = (scene.shape()[0], scene.shape()[1]);
    let (w_ben, m_o_soft) = transform_object(&object.image, &object.mask, &tp, scene_dims);
    let m_o = m_o_soft.ste_round();
    let x_b = embed(scene, &w_ben, &m_o);

    let (w_adv, m_p_soft) = transform_object(o_adv, m_p_obj, &tp, scene_dims);
    let x_adv = embed(scene, &w_adv, &m_o);
    let m_p = m_p_soft.mul(&m_o);

    Scenario {
        scene: scene.clone(),
        x_b,
        x_adv,
        m_o,
        m_p,
        tp,
        scene_index,
    }
}

/// Samples `batch` scenarios: per scenario one scene index (uniform) and
/// one transform, the same transform driving both branches.
pub fn build_batch(
    object: &ObjectSample,
    o_adv: &Tensor,
    m_p_obj: &Tensor,
    scenes: &[Tensor],
    rng: &mut Rng,
    batch: usize,
) -> Vec<Scenario> {
    assert!(batch >= 1, "batch must be >= 1");
    assert!(!scenes.is_empty(), "scene list must be nonempty");
    (0..batch)
        .map(|_| {
            let idx = rng.uniform_index(scenes.len());
            let scene = &scenes[idx];
            let tp = sample_transform(
                rng,
                (scene.shape()[0], scene.shape()[1]),
                object.dims(),
            );
            build_scenario(object, o_adv, m_p_obj, scene, idx, tp)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Rng;
    use crate::synth;

    fn identity_tp(place: [f64; 2]) -> TransformParams {
        TransformParams {
            scale: 1.0,
            rotation: 0.0,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            place,
        }
    }

    #[test]
    fn apply_patch_blends() {
        let o = Tensor::zeros(&[2, 2, 3]);
        let p = Tensor::full(&[2, 2, 3], 1.0);
        assert_eq!(
            apply_patch(&o, &Tensor::zeros(&[2, 2]), &p).data(),
            o.data()
        );
        assert_eq!(
            apply_patch(&o, &Tensor::full(&[2, 2], 1.0), &p).data(),
            p.data()
        );
        let half = apply_patch(&o, &Tensor::full(&[2, 2], 0.5), &p);
        assert!(half.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn sample_transform_ranges_and_determinism() {
        let mut rng = Rng::new(3);
        for _ in 0..1000 {
            let tp = sample_transform(&mut rng, (96, 192), (64, 96));
            assert!((SCALE_RANGE.0..=SCALE_RANGE.1).contains(&tp.scale));
            let deg = tp.rotation.to_degrees();
            assert!((-ROTATION_DEG..=ROTATION_DEG).contains(&deg));
            assert!((BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1).contains(&tp.brightness));
            assert!((CONTRAST_RANGE.0..=CONTRAST_RANGE.1).contains(&tp.contrast));
            assert!((SATURATION_RANGE.0..=SATURATION_RANGE.1).contains(&tp.saturation));
        }
        let mut a = Rng::new(77);
        let mut b = Rng::new(77);
        assert_eq!(
            sample_transform(&mut a, (96, 192), (64, 96)),
            sample_transform(&mut b, (96, 192), (64, 96))
        );
    }

    #[test]
    fn degenerate_scene_forces_center() {
        let mut rng = Rng::new(5);
        let tp = sample_transform(&mut rng, (32, 32), (32, 32));
        // scale < 1 may still leave slack; force the no-slack branch with
        // an exactly full-size draw by checking the placement stays legal
        assert!(tp.place[0] >= 0.0 && tp.place[0] <= 31.0);
        assert!(tp.place[1] >= 0.0 && tp.place[1] <= 31.0);
    }

    #[test]
    fn identity_transform_is_pure_placement() {
        let (obj, _) = synth::make_object(16, 16, 9);
        // centered placement with matching parity: integer offset
        let tp = identity_tp([23.5, 23.5]);
        let (warped, wmask) = transform_object(&obj.image, &obj.mask, &tp, (48, 48));
        for i in 0..16 {
            for j in 0..16 {
                for c in 0..3 {
                    assert!(
                        (warped.at(&[i + 16, j + 16, c]) - obj.image.at(&[i, j, c])).abs() < 1e-12
                    );
                }
                assert!((wmask.at(&[i + 16, j + 16]) - obj.mask.at(&[i, j])).abs() < 1e-12);
            }
        }
        // vacated area is zero
        assert_eq!(warped.at(&[0, 0, 0]), 0.0);
    }

    #[test]
    fn color_op_rules() {
        let tp = TransformParams {
            brightness: 1.3,
            ..identity_tp([0.0, 0.0])
        };
        let img = Tensor::full(&[1, 1, 3], 0.9);
        let out = color_ops(&img, &tp);
        assert!(out.data().iter().all(|&v| (v - 1.0).abs() < 1e-12), "clamped");

        // full desaturation leaves the gray value
        let tp = TransformParams {
            saturation: 0.0,
            ..identity_tp([0.0, 0.0])
        };
        let img = Tensor::from_vec(&[1, 1, 3], vec![0.8, 0.2, 0.4]);
        let out = color_ops(&img, &tp);
        let gray = 0.299 * 0.8 + 0.587 * 0.2 + 0.114 * 0.4;
        for c in 0..3 {
            assert!((out.at(&[0, 0, c]) - gray).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_extremes() {
        let mut rng = Rng::new(2);
        let scene = synth::make_scenes(1, 8, 8, 4).pop().unwrap();
        let obj: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.uniform(0.0, 1.0)).collect();
        let obj = Tensor::from_vec(&[8, 8, 3], obj);
        assert_eq!(embed(&scene, &obj, &Tensor::zeros(&[8, 8])).data(), scene.data());
        assert_eq!(
            embed(&scene, &obj, &Tensor::full(&[8, 8], 1.0)).data(),
            obj.data()
        );
    }

    #[test]
    fn scenario_invariants_hold_over_batch() {
        let (obj, m_p_obj) = synth::make_object(24, 32, 11);
        let scenes = synth::make_scenes(3, 48, 64, 5);
        let mut rng = Rng::new(99);
        let patch = {
            let n = 24 * 32 * 3;
            let data: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 1.0)).collect();
            Tensor::from_vec(&[24, 32, 3], data)
        };
        let m_p_eff = m_p_obj.mul(&obj.mask);
        let o_adv = apply_patch(&obj.image, &m_p_eff, &patch);
        let batch = build_batch(&obj, &o_adv, &m_p_eff, &scenes, &mut rng, 6);
        assert_eq!(batch.len(), 6);
        for sc in &batch {
            // nesting: M_p <= M_O + 1e-6
            for (mp, mo) in sc.m_p.data().iter().zip(sc.m_o.data()) {
                assert!(mp <= &(mo + 1e-6));
            }
            // locality: X_adv == X_b wherever M_p ~ 0
            let (h, w) = (sc.x_b.shape()[0], sc.x_b.shape()[1]);
            for i in 0..h {
                for j in 0..w {
                    if sc.m_p.at(&[i, j]) < 1e-6 {
                        for c in 0..3 {
                            assert!(
                                (sc.x_adv.at(&[i, j, c]) - sc.x_b.at(&[i, j, c])).abs() < 1e-6,
                                "locality violated at ({}, {}, {})",
                                i,
                                j,
                                c
                            );
                        }
                    }
                }
            }
            // composited values stay in range
            for &v in sc.x_adv.data().iter().chain(sc.x_b.data()) {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn same_seed_same_scenario() {
        let (obj, m_p_obj) = synth::make_object(16, 16, 1);
        let scenes = synth::make_scenes(2, 32, 32, 2);
        let m_p_eff = m_p_obj.mul(&obj.mask);
        let o_adv = apply_patch(&obj.image, &m_p_eff, &Tensor::full(&[16, 16, 3], 0.5));
        let run = |seed| {
            let mut rng = Rng::new(seed);
            let b = build_batch(&obj, &o_adv, &m_p_eff, &scenes, &mut rng, 2);
            (b[0].x_adv.data().to_vec(), b[1].m_p.data().to_vec())
        };
        assert_eq!(run(42), run(42));
    }

    #[test]
    #[should_panic(expected = "nonempty")]
    fn empty_scene_list_panics() {
        let (obj, m_p_obj) = synth::make_object(8, 8, 1);
        let mut rng = Rng::new(1);
        build_batch(&obj, &obj.image, &m_p_obj, &[], &mut rng, 1);
    }
}
