//! Pluggable differentiable disparity model, the built-in seeded
//! convolutional surrogate, and disparity/depth conversion.
//!
//! The surrogate is random-initialized and never trained: the attack only
//! needs a deterministic, differentiable map with enough spatial mixing
//! that patch pixels influence disparity well outside the patch footprint.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::imaging::Rng;
use crate::ndgrad::Tensor;

/// A differentiable map from an `(H, W, 3)` image in [0, 1] to an
/// `(H, W)` disparity map in (0, 1), larger meaning closer. Forward passes
/// must participate in the caller's gradient tape and be deterministic.
pub trait DisparityModel {
    fn forward(&self, image: &Tensor) -> Tensor;
}

/// Disparity-to-depth law: `depth(d) = 1 / (1/max + (1/min - 1/max) * d)`,
/// strictly decreasing from `max_depth` at d = 0 to `min_depth` at d = 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthConversion {
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for DepthConversion {
    fn default() -> Self {
        DepthConversion {
            min_depth: 0.1,
            max_depth: 100.0,
        }
    }
}

impl DepthConversion {
    pub fn disparity_to_depth(&self, d: &Tensor) -> Tensor {
        let a = 1.0 / self.max_depth;
        let b = 1.0 / self.min_depth - 1.0 / self.max_depth;
        d.mul_s(b).add_s(a).rdiv_s(1.0)
    }

    pub fn depth_scalar(&self, d: f64) -> f64 {
        1.0 / (1.0 / self.max_depth + (1.0 / self.min_depth - 1.0 / self.max_depth) * d)
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic (expected SVPW1)")]
    BadMagic { path: String },
    #[error("{path}: truncated weight file")]
    Truncated { path: String },
    #[error("{path}: architecture mismatch at tensor {index}: expected {expected:?}, found {found:?}")]
    DimMismatch {
        path: String,
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

const WEIGHTS_MAGIC: &[u8; 5] = b"SVPW1";
const KERNEL: usize = 5;
const ENC_CHANNELS: [(usize, usize); 3] = [(3, 8), (8, 16), (16, 32)];
const DEC_CHANNELS: [(usize, usize); 3] = [(32, 16), (16, 8), (8, 1)];

/// Six-layer encoder-decoder: three stride-2 5x5 convs (3 -> 8 -> 16 -> 32),
/// then three stages of 2x bilinear upsampling plus 5x5 convs
/// (32 -> 16 -> 8 -> 1), with a final sigmoid. The conv stack is linear:
/// with unit-gain init this keeps the input-to-disparity coupling strong
/// through all six layers, which an attack target needs. Receptive field
/// is ~57 px, comfortably past the 40 px the exterior loss needs.
#[derive(Debug, Clone)]
pub struct Surrogate {
    kernels: Vec<Tensor>,
    biases: Vec<Tensor>,
}

fn layer_shapes() -> Vec<(Vec<usize>, Vec<usize>)> {
    ENC_CHANNELS
        .iter()
        .chain(DEC_CHANNELS.iter())
        .map(|&(ci, co)| (vec![KERNEL, KERNEL, ci, co], vec![co]))
        .collect()
}

impl Surrogate {
    /// Seeded init: every kernel and bias drawn uniform in
    /// `[-sqrt(3/fan_in), +sqrt(3/fan_in)]` with `fan_in = kh * kw * C_in`
    /// (unit variance gain per layer, so input perturbations survive all
    /// six layers at measurable amplitude).
    pub fn seeded(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for (kshape, bshape) in layer_shapes() {
            let fan_in = (kshape[0] * kshape[1] * kshape[2]) as f64;
            let bound = (3.0 / fan_in).sqrt();
            let kn: usize = kshape.iter().product();
            let kdata: Vec<f64> = (0..kn).map(|_| rng.uniform(-bound, bound)).collect();
            kernels.push(Tensor::from_vec(&kshape, kdata));
            let bdata: Vec<f64> = (0..bshape[0]).map(|_| rng.uniform(-bound, bound)).collect();
            biases.push(Tensor::from_vec(&bshape, bdata));
        }
        Surrogate { kernels, biases }
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let io = |e: std::io::Error| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(WEIGHTS_MAGIC).map_err(io)?;
        let tensors: Vec<&Tensor> = self
            .kernels
            .iter()
            .zip(&self.biases)
            .flat_map(|(k, b)| [k, b])
            .collect();
        f.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io)?;
        for t in tensors {
            f.write_all(&(t.shape().len() as u32).to_le_bytes()).map_err(io)?;
            for &d in t.shape() {
                f.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
            }
            for &v in t.data() {
                f.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn load_weights(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let p = path.display().to_string();
        if bytes.len() < 5 || &bytes[..5] != WEIGHTS_MAGIC {
            return Err(ModelError::BadMagic { path: p });
        }
        let mut pos = 5usize;
        let read_u32 = |pos: &mut usize| -> Result<u32, ModelError> {
            if *pos + 4 > bytes.len() {
                return Err(ModelError::Truncated { path: p.clone() });
            }
            let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
            *pos += 4;
            Ok(v)
        };
        let count = read_u32(&mut pos)? as usize;
        let expected = layer_shapes();
        if count != expected.len() * 2 {
            return Err(ModelError::DimMismatch {
                path: p.clone(),
                index: 0,
                expected: vec![expected.len() * 2],
                found: vec![count],
            });
        }
        let mut tensors = Vec::with_capacity(count);
        for idx in 0..count {
            let rank = read_u32(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut pos)? as usize);
            }
            let want = if idx % 2 == 0 {
                &expected[idx / 2].0
            } else {
                &expected[idx / 2].1
            };
            if &shape != want {
                return Err(ModelError::DimMismatch {
                    path: p.clone(),
                    index: idx,
                    expected: want.clone(),
                    found: shape,
                });
            }
            let numel: usize = shape.iter().product();
            if pos + numel * 8 > bytes.len() {
                return Err(ModelError::Truncated { path: p.clone() });
            }
            let data: Vec<f64> = bytes[pos..pos + numel * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += numel * 8;
            tensors.push(Tensor::from_vec(&shape, data));
        }
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for pair in tensors.chunks_exact(2) {
            kernels.push(pair[0].clone());
            biases.push(pair[1].clone());
        }
        Ok(Surrogate { kernels, biases })
    }
}

impl DisparityModel for Surrogate {
    fn forward(&self, image: &Tensor) -> Tensor {
        let shape = image.shape();
        assert_eq!(shape.len(), 3, "surrogate expects an (H, W, 3) image");
        assert_eq!(shape[2], 3, "surrogate expects 3 channels");
        assert!(
            shape[0] % 8 == 0 && shape[1] % 8 == 0,
            "surrogate needs H and W divisible by 8, got {}x{}",
            shape[0],
            shape[1]
        );
        let mut x = image.clone();
        for i in 0..3 {
            x = x
                .conv2d(&self.kernels[i], 2, KERNEL / 2)
                .bias_add(&self.biases[i]);
        }
        for i in 3..6 {
            x = x
                .upsample2x()
                .conv2d(&self.kernels[i], 1, KERNEL / 2)
                .bias_add(&self.biases[i]);
        }
        x.sigmoid().channel(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Rng;
    use crate::ndgrad::{fdcheck, Tape};

    fn test_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..h * w * 3).map(|_| rng.uniform(0.0, 1.0)).collect();
        Tensor::from_vec(&[h, w, 3], data)
    }

    #[test]
    fn forward_shape_and_range() {
        let model = Surrogate::seeded(7);
        let img = test_image(16, 24, 1);
        let d = model.forward(&img);
        assert_eq!(d.shape(), &[16, 24]);
        for &v in d.data() {
            assert!(v > 0.0 && v < 1.0, "disparity {} outside (0, 1)", v);
        }
    }

    #[test]
    #[should_panic(expected = "divisible by 8")]
    fn forward_rejects_indivisible_dims() {
        let model = Surrogate::seeded(7);
        model.forward(&test_image(15, 24, 1));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Surrogate::seeded(11);
        let img = test_image(16, 16, 2);
        let a = model.forward(&img);
        let b = model.forward(&img);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn receptive_field_reaches_past_twenty_pixels() {
        let model = Surrogate::seeded(3);
        let img = test_image(48, 48, 4);
        let base = model.forward(&img);

        let mut bumped = img.data().to_vec();
        let (pi, pj) = (24usize, 24usize);
        bumped[(pi * 48 + pj) * 3] = (bumped[(pi * 48 + pj) * 3] + 0.5).min(1.0);
        let out = model.forward(&Tensor::from_vec(&[48, 48, 3], bumped));

        let mut found = false;
        for i in 0..48 {
            for j in 0..48 {
                let dist = (((i as f64) - pi as f64).powi(2) + ((j as f64) - pj as f64).powi(2)).sqrt();
                if dist >= 20.0 && (out.at(&[i, j]) - base.at(&[i, j])).abs() > 0.0 {
                    found = true;
                }
            }
        }
        assert!(found, "no influence found at distance >= 20 px");
    }

    #[test]
    fn input_gradcheck() {
        let model = Surrogate::seeded(5);
        let h = 8;
        let w = 8;
        let img0 = test_image(h, w, 6).data().to_vec();

        let tape = Tape::new();
        let leaf = tape.param(&Tensor::from_vec(&[h, w, 3], img0.clone()));
        model.forward(&leaf).sum().backward().unwrap();
        let g = leaf.grad().unwrap();

        // spot-check 24 coordinates against finite differences
        let f = |v: &[f64]| {
            model
                .forward(&Tensor::from_vec(&[h, w, 3], v.to_vec()))
                .sum()
                .item()
        };
        let mut rng = Rng::new(9);
        let mut buf = img0.clone();
        for _ in 0..24 {
            let idx = rng.uniform_index(buf.len());
            let orig = buf[idx];
            let hstep = 1e-3;
            buf[idx] = orig + hstep;
            let fp = f(&buf);
            buf[idx] = orig - hstep;
            let fm = f(&buf);
            buf[idx] = orig;
            let fd = (fp - fm) / (2.0 * hstep);
            let err = fdcheck::rel_err(g.data()[idx], fd, 1e-8);
            assert!(err <= 1e-3, "idx {}: {} vs {} (rel {})", idx, g.data()[idx], fd, err);
        }
    }

    #[test]
    fn depth_conversion_cases() {
        let conv = DepthConversion::default();
        let d = Tensor::from_vec(&[3], vec![1.0, 0.0, 0.5]);
        let depth = conv.disparity_to_depth(&d);
        assert!((depth.data()[0] - 0.1).abs() < 1e-12);
        assert!((depth.data()[1] - 100.0).abs() < 1e-12);
        assert!(depth.data()[2] > 0.1 && depth.data()[2] < 100.0);

        // strictly decreasing
        let mut prev = f64::INFINITY;
        for k in 0..=100 {
            let v = conv.depth_scalar(k as f64 / 100.0);
            assert!(v < prev);
            prev = v;
        }

        // bijective on [0, 1] <-> [0.1, 100]: invert and compare
        let mut rng = Rng::new(14);
        for _ in 0..100 {
            let d0 = rng.uniform(0.0, 1.0);
            let z = conv.depth_scalar(d0);
            let back = (1.0 / z - 1.0 / conv.max_depth)
                / (1.0 / conv.min_depth - 1.0 / conv.max_depth);
            assert!((back - d0).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.svpw");
        let model = Surrogate::seeded(21);
        model.save_weights(&path).unwrap();
        let loaded = Surrogate::load_weights(&path).unwrap();

        let img = test_image(16, 16, 3);
        assert_eq!(model.forward(&img).data(), loaded.forward(&img).data());

        // truncated file
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            Surrogate::load_weights(&path),
            Err(ModelError::Truncated { .. })
        ));

        // wrong magic
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        std::fs::write(&path, &corrupt).unwrap();
        assert!(matches!(
            Surrogate::load_weights(&path),
            Err(ModelError::BadMagic { .. })
        ));
    }
}
