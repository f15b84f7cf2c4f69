//! Deterministic image codecs and the seeded PRNG used by every
//! stochastic component.
//!
//! PPM (binary P6, maxval 255) and PGM (binary P5, 8- or 16-bit) were
//! chosen over compressed formats because round trips are bit-exact and
//! test failures diff cleanly.

mod pnm;
mod rng;

pub use pnm::{
    read_pgm16, read_pgm8, read_ppm, write_pgm16, write_pgm8, write_ppm, CodecError,
};
pub use rng::Rng;

use crate::ndgrad::Tensor;

/// 8-bit RGB image, row-major, tightly packed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3, "RGB buffer size mismatch");
        Rgb8Image {
            width,
            height,
            data,
        }
    }

    /// Converts to an `(H, W, 3)` tensor in [0, 1] by dividing by 255.
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::from_vec(&[self.height, self.width, 3], data)
    }

    /// Quantizes an `(H, W, 3)` tensor in [0, 1] back to 8-bit samples by
    /// round-half-up; the `to_tensor` round trip is bit-exact.
    pub fn from_tensor(t: &Tensor) -> Self {
        let shape = t.shape();
        assert_eq!(shape.len(), 3, "expected (H, W, 3) tensor");
        assert_eq!(shape[2], 3, "expected 3 channels");
        let data: Vec<u8> = t
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
            .collect();
        Rgb8Image::new(shape[1], shape[0], data)
    }
}

#[cfg(test)]
mod tests;
