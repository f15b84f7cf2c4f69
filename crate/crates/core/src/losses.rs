//! Adversarial and regularization loss terms.
//!
//! All reductions are sums, matching the explicit summation style of the
//! underlying formulas; the lambda weights absorb scale. Values are exact
//! as written: in particular `loss_l2` keeps its constant floor of
//! `N * exp(0)` from pixels with zero mask weight — that term is
//! gradient-inert, and callers that report optimization progress subtract
//! it separately.

use std::path::Path;

use thiserror::Error;

use crate::ndgrad::Tensor;

/// Weights for the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    /// Defaults chosen so the depth term dominates at reference scale;
    /// configurable, not a claim about the original experiments.
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 5e-4,
            lambda3: 5e-4,
            lambda4: 1e-3,
        }
    }
}

#[derive(Debug, Error)]
pub enum PaletteError {
    #[error("palette is empty")]
    Empty,
    #[error("palette line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("io error reading palette: {0}")]
    Io(#[from] std::io::Error),
}

/// Set of printable colors for the non-printability score.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    pub colors: Vec<[f64; 3]>,
}

const DEFAULT_PALETTE: &str = include_str!("../assets/palette_default.txt");

impl Palette {
    pub fn new(colors: Vec<[f64; 3]>) -> Result<Self, PaletteError> {
        if colors.is_empty() {
            return Err(PaletteError::Empty);
        }
        Ok(Palette { colors })
    }

    /// The shipped 30-color print-safe grid.
    pub fn default_printable() -> Self {
        Self::parse(DEFAULT_PALETTE).expect("embedded default palette is valid")
    }

    /// Parses the text format: one `r g b` triple per line, floats in
    /// [0, 1], blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self, PaletteError> {
        let mut colors = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(PaletteError::Parse {
                    line: ln + 1,
                    detail: format!("expected 3 components, found {}", parts.len()),
                });
            }
            let mut c = [0.0; 3];
            for (k, p) in parts.iter().enumerate() {
                let v: f64 = p.parse().map_err(|_| PaletteError::Parse {
                    line: ln + 1,
                    detail: format!("bad float `{}`", p),
                })?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(PaletteError::Parse {
                        line: ln + 1,
                        detail: format!("component {} out of [0, 1]", v),
                    });
                }
                c[k] = v;
            }
            colors.push(c);
        }
        Self::new(colors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PaletteError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Mask-region term: `sum(((D_adv - D_t) .* M_p)^2)`. The mask sits inside
/// the square, exactly as written.
pub fn loss_l1(d_adv: &Tensor, d_t: &Tensor, m_p: &Tensor) -> Tensor {
    (d_adv - d_t).mul(m_p).square().sum()
}

/// Exterior term: `sum(exp(|D_adv - D_t| .* max(M_O - M_p, 0)))`. Pixels
/// with zero mask weight contribute `exp(0) = 1` each, so the value is
/// bounded below by the pixel count.
pub fn loss_l2(d_adv: &Tensor, d_t: &Tensor, m_o: &Tensor, m_p: &Tensor) -> Tensor {
    let ring = (m_o - m_p).max_s(0.0);
    (d_adv - d_t).abs().mul(&ring).exp().sum()
}

/// `loss_l1 + loss_l2`.
pub fn loss_depth(d_adv: &Tensor, d_t: &Tensor, m_o: &Tensor, m_p: &Tensor) -> Tensor {
    let l1 = loss_l1(d_adv, d_t, m_p);
    let l2 = loss_l2(d_adv, d_t, m_o, m_p);
    l1.add(&l2)
}

/// Epsilon inside the total-variation square root; removes the
/// non-differentiability of perfectly flat patches.
pub const TV_EPS: f64 = 1e-12;

/// Total variation over pixels that have both a lower and a right
/// neighbor, summed per channel:
/// `sum sqrt((p[i+1,j] - p[i,j])^2 + (p[i,j+1] - p[i,j])^2 + eps)`.
pub fn loss_tv(patch: &Tensor) -> Tensor {
    let shape = patch.shape();
    let (h, w, c, p3);
    match shape.len() {
        2 => {
            h = shape[0];
            w = shape[1];
            c = 1;
            p3 = patch.slice(&[0, 0], &[h, w]).expand_channels(1);
        }
        3 => {
            h = shape[0];
            w = shape[1];
            c = shape[2];
            p3 = patch.clone();
        }
        r => panic!("loss_tv expects rank 2 or 3 patch, got rank {}", r),
    }
    assert!(h >= 2 && w >= 2, "loss_tv needs a patch of at least 2x2");
    let base = p3.slice(&[0, 0, 0], &[h - 1, w - 1, c]);
    let down = p3.slice(&[1, 0, 0], &[h - 1, w - 1, c]);
    let right = p3.slice(&[0, 1, 0], &[h - 1, w - 1, c]);
    let dv = (&down - &base).square();
    let dh = (&right - &base).square();
    (&dv + &dh).add_s(TV_EPS).sqrt().sum()
}

/// Non-printability score: `sum over pixels of min over palette colors of
/// the L2 distance between the pixel and the color`.
pub fn loss_nps(patch: &Tensor, palette: &Palette) -> Tensor {
    assert!(!palette.colors.is_empty(), "palette must be nonempty");
    let shape = patch.shape();
    assert_eq!(shape.len(), 3, "loss_nps expects an (H, W, 3) patch");
    assert_eq!(shape[2], 3, "loss_nps expects 3 channels");
    let r = patch.channel(0);
    let g = patch.channel(1);
    let b = patch.channel(2);
    let mut best: Option<Tensor> = None;
    for c in &palette.colors {
        let dr = r.add_s(-c[0]).square();
        let dg = g.add_s(-c[1]).square();
        let db = b.add_s(-c[2]).square();
        let dist = (&(&dr + &dg) + &db).sqrt();
        best = Some(match best {
            None => dist,
            Some(acc) => acc.min2(&dist),
        });
    }
    best.unwrap().sum()
}

/// Pre-reduced component values of one evaluation.
#[derive(Debug, Clone)]
pub struct LossComponents {
    pub depth: Tensor,
    pub tv: Tensor,
    pub nps: Tensor,
    pub area: Tensor,
}

/// `lambda1 * L_depth + lambda2 * L_TV + lambda3 * L_NPS + lambda4 * L_area`.
pub fn loss_total(components: &LossComponents, weights: &LossWeights) -> Tensor {
    let a = components.depth.mul_s(weights.lambda1);
    let b = components.tv.mul_s(weights.lambda2);
    let c = components.nps.mul_s(weights.lambda3);
    let d = components.area.mul_s(weights.lambda4);
    (&(&a + &b) + &c).add(&d)
}

/// Non-targeted objective `sum(((D_adv - D_b) .* M_O)^2)`, to be
/// maximized; the attack loop minimizes its negation.
pub fn loss_nontargeted(d_adv: &Tensor, d_b: &Tensor, m_o: &Tensor) -> Tensor {
    (d_adv - d_b).mul(m_o).square().sum()
}
