use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use super::Rgb8Image;
use crate::ndgrad::Tensor;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: expected magic {expected}, found {found}")]
    BadMagic {
        path: String,
        expected: &'static str,
        found: String,
    },
    #[error("{path}: malformed header ({detail})")]
    BadHeader { path: String, detail: String },
    #[error("{path}: truncated payload (expected {expected} bytes, got {got})")]
    Truncated {
        path: String,
        expected: usize,
        got: usize,
    },
    #[error("{path}: refusing to encode non-finite value")]
    NonFinite { path: String },
}

fn io_err(path: &Path, source: std::io::Error) -> CodecError {
    CodecError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads PNM header tokens (magic already consumed), skipping whitespace
/// and `#` comments, returning the next `n` unsigned integers and the
/// offset where the binary payload starts.
fn header_ints(
    bytes: &[u8],
    mut pos: usize,
    n: usize,
    path: &Path,
) -> Result<(Vec<usize>, usize), CodecError> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(CodecError::BadHeader {
                path: path.display().to_string(),
                detail: "expected integer token".into(),
            });
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).unwrap();
        out.push(tok.parse().map_err(|_| CodecError::BadHeader {
            path: path.display().to_string(),
            detail: format!("bad integer `{}`", tok),
        })?);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(CodecError::BadHeader {
            path: path.display().to_string(),
            detail: "missing whitespace before payload".into(),
        });
    }
    Ok((out, pos + 1))
}

/// Binary P6, maxval 255.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Rgb8Image, CodecError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(CodecError::BadMagic {
            path: path.display().to_string(),
            expected: "P6",
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned(),
        });
    }
    let (hdr, payload) = header_ints(&bytes, 2, 3, path)?;
    let (w, h, maxval) = (hdr[0], hdr[1], hdr[2]);
    if maxval != 255 {
        return Err(CodecError::BadHeader {
            path: path.display().to_string(),
            detail: format!("unsupported maxval {}", maxval),
        });
    }
    let expected = w * h * 3;
    let got = bytes.len() - payload;
    if got < expected {
        return Err(CodecError::Truncated {
            path: path.display().to_string(),
            expected,
            got,
        });
    }
    Ok(Rgb8Image::new(
        w,
        h,
        bytes[payload..payload + expected].to_vec(),
    ))
}

pub fn write_ppm(img: &Rgb8Image, path: impl AsRef<Path>) -> Result<(), CodecError> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    write!(f, "P6\n{} {}\n255\n", img.width, img.height).map_err(|e| io_err(path, e))?;
    f.write_all(&img.data).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Binary P5, maxval 255; returns `(h, w)` and samples.
pub fn read_pgm8(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>), CodecError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(CodecError::BadMagic {
            path: path.display().to_string(),
            expected: "P5",
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned(),
        });
    }
    let (hdr, payload) = header_ints(&bytes, 2, 3, path)?;
    let (w, h, maxval) = (hdr[0], hdr[1], hdr[2]);
    if maxval != 255 {
        return Err(CodecError::BadHeader {
            path: path.display().to_string(),
            detail: format!("expected maxval 255, found {}", maxval),
        });
    }
    let expected = w * h;
    let got = bytes.len() - payload;
    if got < expected {
        return Err(CodecError::Truncated {
            path: path.display().to_string(),
            expected,
            got,
        });
    }
    Ok((h, w, bytes[payload..payload + expected].to_vec()))
}

pub fn write_pgm8(h: usize, w: usize, samples: &[u8], path: impl AsRef<Path>) -> Result<(), CodecError> {
    let path = path.as_ref();
    assert_eq!(samples.len(), h * w, "PGM8 sample count mismatch");
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    write!(f, "P5\n{} {}\n255\n", w, h).map_err(|e| io_err(path, e))?;
    f.write_all(samples).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// 16-bit P5 dump of an `(H, W)` map: `round_half_up(clamp(v/scale, 0, 1) * 65535)`,
/// big-endian samples per the PNM convention.
pub fn write_pgm16(map: &Tensor, scale: f64, path: impl AsRef<Path>) -> Result<(), CodecError> {
    let path = path.as_ref();
    let shape = map.shape();
    assert_eq!(shape.len(), 2, "write_pgm16 expects an (H, W) tensor");
    if map.data().iter().any(|v| !v.is_finite()) {
        return Err(CodecError::NonFinite {
            path: path.display().to_string(),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    write!(f, "P5\n{} {}\n65535\n", w, h).map_err(|e| io_err(path, e))?;
    let mut body = Vec::with_capacity(h * w * 2);
    for &v in map.data() {
        let q = ((v / scale).clamp(0.0, 1.0) * 65535.0 + 0.5).floor() as u16;
        body.extend_from_slice(&q.to_be_bytes());
    }
    f.write_all(&body).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Reads a 16-bit P5 file back as `(h, w)` and raw samples.
pub fn read_pgm16(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u16>), CodecError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(CodecError::BadMagic {
            path: path.display().to_string(),
            expected: "P5",
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned(),
        });
    }
    let (hdr, payload) = header_ints(&bytes, 2, 3, path)?;
    let (w, h, maxval) = (hdr[0], hdr[1], hdr[2]);
    if maxval != 65535 {
        return Err(CodecError::BadHeader {
            path: path.display().to_string(),
            detail: format!("expected maxval 65535, found {}", maxval),
        });
    }
    let expected = w * h * 2;
    let got = bytes.len() - payload;
    if got < expected {
        return Err(CodecError::Truncated {
            path: path.display().to_string(),
            expected,
            got,
        });
    }
    let samples = bytes[payload..payload + expected]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((h, w, samples))
}
