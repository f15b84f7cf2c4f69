//! Differentiable patch-mask generation for every shape family, plus
//! parameter clamping and area measurement.
//!
//! Index convention: `i` is the row in `[0, h)`, `j` the column in
//! `[0, w)`. `t` and `b` bound rows with `b <= t`; `l` and `r` bound
//! columns with `l <= r`. Pixel coordinates are zero-based at cell
//! centers. Rect and quad masks are soft (tanh-shaped); circle, ellipse,
//! and oval masks are binarized by the straight-through rounding so shape
//! parameters still receive gradients.

use serde::{Deserialize, Serialize};

use crate::ndgrad::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Rect,
    Quad,
    Circle,
    Ellipse,
    Oval,
}

impl ShapeFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeFamily::Rect => "rect",
            ShapeFamily::Quad => "quad",
            ShapeFamily::Circle => "circle",
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Oval => "oval",
        }
    }
}

/// Shape-family parameters. Unused fields for a given family are carried
/// along untouched so a single struct serializes every family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub family: ShapeFamily,
    /// Boundary parameters `[l, r, t, b]` in pixels.
    pub theta1: [f64; 4],
    /// Edge slopes `[s_l, s_r, s_t, s_b]`, each in [-1, 1].
    pub slopes: [f64; 4],
    /// Circle/ellipse center `(x, y)` = (row, col) in pixels.
    pub center: [f64; 2],
    /// Circle/ellipse radius in pixels.
    pub radius: f64,
    /// Ellipse shear `(s_x, s_y)`, each in [-1, 1].
    pub shear: [f64; 2],
    /// Oval semi-axes `(a, b)` in pixels.
    pub axes: [f64; 2],
}

impl MaskParams {
    pub fn new(family: ShapeFamily) -> Self {
        MaskParams {
            family,
            theta1: [0.0; 4],
            slopes: [0.0; 4],
            center: [0.0; 2],
            radius: 2.0,
            shear: [0.0; 2],
            axes: [2.0, 2.0],
        }
    }

    /// Builds the mask for this parameter set on an `h x w` grid,
    /// evaluating eagerly from plain values.
    pub fn mask(&self, h: usize, w: usize) -> Mask {
        let s = Tensor::scalar;
        match self.family {
            ShapeFamily::Rect => rect_mask(
                &s(self.theta1[0]),
                &s(self.theta1[1]),
                &s(self.theta1[2]),
                &s(self.theta1[3]),
                h,
                w,
            ),
            ShapeFamily::Quad => {
                let th = self.theta1.map(s);
                let sl = self.slopes.map(s);
                quad_mask(
                    &[&th[0], &th[1], &th[2], &th[3]],
                    &[&sl[0], &sl[1], &sl[2], &sl[3]],
                    h,
                    w,
                )
            }
            ShapeFamily::Circle => circle_mask(
                &s(self.center[0]),
                &s(self.center[1]),
                &s(self.radius),
                h,
                w,
            ),
            ShapeFamily::Ellipse => ellipse_mask(
                &s(self.center[0]),
                &s(self.center[1]),
                &s(self.radius),
                &s(self.shear[0]),
                &s(self.shear[1]),
                h,
                w,
            ),
            ShapeFamily::Oval => oval_mask(
                &s(self.center[0]),
                &s(self.center[1]),
                &s(self.axes[0]),
                &s(self.axes[1]),
                h,
                w,
            ),
        }
    }
}

/// A generated mask with values in [0, 1]; `is_binary` marks the
/// straight-through families whose grids contain only {0, 1}.
#[derive(Debug, Clone)]
pub struct Mask {
    pub grid: Tensor,
    pub is_binary: bool,
}

/// Soft rectangle, Eq-style tanh product:
/// `m[i,j] = 1/4 [-tanh(i-t) tanh(i-b) + 1] [-tanh(j-l) tanh(j-r) + 1]`.
pub fn rect_mask(l: &Tensor, r: &Tensor, t: &Tensor, b: &Tensor, h: usize, w: usize) -> Mask {
    let ig = Tensor::row_grid(h, w);
    let jg = Tensor::col_grid(h, w);
    let rows = &(&ig - t).tanh().mul(&(&ig - b).tanh()).rsub_s(1.0);
    let cols = &(&jg - l).tanh().mul(&(&jg - r).tanh()).rsub_s(1.0);
    Mask {
        grid: rows.mul(cols).mul_s(0.25),
        is_binary: false,
    }
}

/// Soft quadrilateral: each boundary of the rectangle formula shifts
/// linearly with the transverse coordinate, `t -> t + s_t (j - l)` and so
/// on, producing skewed edges. Zero slopes reduce exactly to `rect_mask`.
pub fn quad_mask(theta1: &[&Tensor; 4], slopes: &[&Tensor; 4], h: usize, w: usize) -> Mask {
    let [l, r, t, b] = *theta1;
    let [sl, sr, st, sb] = *slopes;
    let ig = Tensor::row_grid(h, w);
    let jg = Tensor::col_grid(h, w);

    let t_edge = &(&jg - l).mul(st) + t;
    let b_edge = &(&jg - r).mul(sb) + b;
    let l_edge = &(&ig - t).mul(sl) + l;
    let r_edge = &(&ig - b).mul(sr) + r;

    let rows = (&ig - &t_edge).tanh().mul(&(&ig - &b_edge).tanh()).rsub_s(1.0);
    let cols = (&jg - &l_edge).tanh().mul(&(&jg - &r_edge).tanh()).rsub_s(1.0);
    Mask {
        grid: rows.mul(&cols).mul_s(0.25),
        is_binary: false,
    }
}

/// Pre-binarization circle response `max(1 - (d^2 / R^2) / 2, 0)`; the
/// smooth path used by gradient checks.
pub fn circle_soft(x: &Tensor, y: &Tensor, radius: &Tensor, h: usize, w: usize) -> Tensor {
    let ig = Tensor::row_grid(h, w);
    let jg = Tensor::col_grid(h, w);
    let d2 = &(&ig - x).square() + &(&jg - y).square();
    d2.div(&radius.square()).mul_s(0.5).rsub_s(1.0).max_s(0.0)
}

/// Binary circle via the straight-through rounding: pixels closer to the
/// center than R round to 1 (distance exactly R gives 0.5 -> 1 under
/// round-half-up).
pub fn circle_mask(x: &Tensor, y: &Tensor, radius: &Tensor, h: usize, w: usize) -> Mask {
    Mask {
        grid: circle_soft(x, y, radius, h, w).ste_round(),
        is_binary: true,
    }
}

/// Pre-binarization sheared-ellipse response: the circle formula with
/// center offsets `x + s_x (j - y)` and `y + s_y (i - x)` inside the
/// squared distances. Zero shear reduces exactly to `circle_soft`.
pub fn ellipse_soft(
    x: &Tensor,
    y: &Tensor,
    radius: &Tensor,
    s_x: &Tensor,
    s_y: &Tensor,
    h: usize,
    w: usize,
) -> Tensor {
    let ig = Tensor::row_grid(h, w);
    let jg = Tensor::col_grid(h, w);
    let cx = &(&jg - y).mul(s_x) + x;
    let cy = &(&ig - x).mul(s_y) + y;
    let d2 = &(&ig - &cx).square() + &(&jg - &cy).square();
    d2.div(&radius.square()).mul_s(0.5).rsub_s(1.0).max_s(0.0)
}

/// Binarized sheared ellipse.
pub fn ellipse_mask(
    x: &Tensor,
    y: &Tensor,
    radius: &Tensor,
    s_x: &Tensor,
    s_y: &Tensor,
    h: usize,
    w: usize,
) -> Mask {
    Mask {
        grid: ellipse_soft(x, y, radius, s_x, s_y, h, w).ste_round(),
        is_binary: true,
    }
}

/// Pre-binarization axis-aligned oval response with semi-axes `a` (rows)
/// and `b` (columns); `a = b = R` degenerates to the circle.
pub fn oval_soft(x: &Tensor, y: &Tensor, a: &Tensor, b: &Tensor, h: usize, w: usize) -> Tensor {
    let ig = Tensor::row_grid(h, w);
    let jg = Tensor::col_grid(h, w);
    let term_i = (&ig - x).square().div(&a.square());
    let term_j = (&jg - y).square().div(&b.square());
    (&term_i + &term_j).mul_s(0.5).rsub_s(1.0).max_s(0.0)
}

/// Binarized axis-aligned oval.
pub fn oval_mask(x: &Tensor, y: &Tensor, a: &Tensor, b: &Tensor, h: usize, w: usize) -> Mask {
    Mask {
        grid: oval_soft(x, y, a, b, h, w).ste_round(),
        is_binary: true,
    }
}

/// Projects parameters back into their feasible boxes after an optimizer
/// step: boundaries into the grid with ordering restored by swapping,
/// slopes and shear into [-1, 1], radius into [2, min(h, w)/2], centers
/// inside the grid.
pub fn clamp_params(p: &MaskParams, h: usize, w: usize) -> MaskParams {
    let mut q = *p;
    let (hf, wf) = (h as f64, w as f64);

    q.theta1[0] = q.theta1[0].clamp(0.0, wf);
    q.theta1[1] = q.theta1[1].clamp(0.0, wf);
    if q.theta1[0] > q.theta1[1] {
        q.theta1.swap(0, 1);
    }
    q.theta1[2] = q.theta1[2].clamp(0.0, hf);
    q.theta1[3] = q.theta1[3].clamp(0.0, hf);
    if q.theta1[3] > q.theta1[2] {
        q.theta1.swap(2, 3);
    }
    for s in q.slopes.iter_mut() {
        *s = s.clamp(-1.0, 1.0);
    }
    for s in q.shear.iter_mut() {
        *s = s.clamp(-1.0, 1.0);
    }
    let r_max = (hf.min(wf) / 2.0).max(2.0);
    q.radius = q.radius.clamp(2.0, r_max);
    q.axes[0] = q.axes[0].clamp(2.0, r_max);
    q.axes[1] = q.axes[1].clamp(2.0, r_max);
    q.center[0] = q.center[0].clamp(0.0, hf - 1.0);
    q.center[1] = q.center[1].clamp(0.0, wf - 1.0);
    q
}

/// Patch area as the sum of the binarized mask. Soft masks pass through
/// the straight-through rounding, so the result is an integer pixel count
/// while gradients still reach the shape parameters.
pub fn mask_area(mask: &Tensor) -> Tensor {
    mask.ste_round().sum()
}
