use std::fmt;
use std::rc::Rc;

use super::ops::{self, Op};
use super::tape::{NodeId, Tape};

/// Immutable dense value: shape plus row-major `f64` storage.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Value {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Value {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "value data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Value { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Dense tensor handle. Clones share the underlying buffer.
///
/// A tensor is either *plain* (a value) or *taped* (a value plus a node on
/// a [`Tape`]). All arithmetic works on both; mixing plain and taped
/// operands interns the plain side as a constant leaf.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) value: Rc<Value>,
    pub(crate) node: Option<(Tape, NodeId)>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.value.shape)
            .field("taped", &self.node.is_some())
            .finish()
    }
}

impl Tensor {
    pub(crate) fn plain(value: Value) -> Self {
        Tensor {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Tensor::plain(Value::new(shape.to_vec(), data))
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::plain(Value::new(vec![], vec![x]))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], x: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::plain(Value::new(shape.to_vec(), vec![x; numel]))
    }

    /// Row-index grid: `t[i, j] = i` with shape `(h, w)`.
    pub fn row_grid(h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for _ in 0..w {
                data.push(i as f64);
            }
        }
        Tensor::from_vec(&[h, w], data)
    }

    /// Column-index grid: `t[i, j] = j` with shape `(h, w)`.
    pub fn col_grid(h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for _ in 0..h {
            for j in 0..w {
                data.push(j as f64);
            }
        }
        Tensor::from_vec(&[h, w], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.value.shape
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn data(&self) -> &[f64] {
        &self.value.data
    }

    /// Scalar extraction; panics unless the tensor has exactly one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.value.data[0]
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.shape().len(), "index rank mismatch");
        let mut off = 0usize;
        for (d, (&i, &n)) in idx.iter().zip(self.shape()).enumerate() {
            assert!(i < n, "index {} out of bounds for dim {} (size {})", i, d, n);
            off = off * n + i;
        }
        self.value.data[off]
    }

    /// Drops tape participation; the returned tensor is a plain value.
    pub fn detach(&self) -> Tensor {
        Tensor {
            value: Rc::clone(&self.value),
            node: None,
        }
    }

    pub fn is_taped(&self) -> bool {
        self.node.is_some()
    }

    pub fn requires_grad(&self) -> bool {
        match &self.node {
            Some((tape, id)) => tape.node_requires(*id),
            None => false,
        }
    }

    /// Gradient of the last `backward()` with respect to this tensor.
    ///
    /// `None` until a backward pass has run on the tensor's tape. Nodes off
    /// every path to the loss report an all-zero gradient.
    pub fn grad(&self) -> Option<Tensor> {
        let (tape, id) = self.node.as_ref()?;
        let data = tape.grad_of(*id)?;
        Some(Tensor::from_vec(&self.value.shape, data))
    }

    /// Reverse-mode sweep from a scalar loss. Errors if the loss is not a
    /// scalar, is not on a tape, or the tape has already been consumed.
    pub fn backward(&self) -> Result<(), super::tape::GradError> {
        super::tape::run_backward(self)
    }

    // ---- elementwise suite ----------------------------------------------

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        ops::apply(Op::Add, &[self, rhs])
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        ops::apply(Op::Sub, &[self, rhs])
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        ops::apply(Op::Mul, &[self, rhs])
    }

    pub fn div(&self, rhs: &Tensor) -> Tensor {
        ops::apply(Op::Div, &[self, rhs])
    }

    /// Elementwise minimum of two tensors; ties route the gradient left.
    pub fn min2(&self, rhs: &Tensor) -> Tensor {
        ops::apply(Op::Min2, &[self, rhs])
    }

    pub fn add_s(&self, c: f64) -> Tensor {
        ops::apply(Op::AddS(c), &[self])
    }

    pub fn mul_s(&self, c: f64) -> Tensor {
        ops::apply(Op::MulS(c), &[self])
    }

    pub fn div_s(&self, c: f64) -> Tensor {
        ops::apply(Op::DivS(c), &[self])
    }

    /// `c - t`.
    pub fn rsub_s(&self, c: f64) -> Tensor {
        ops::apply(Op::RsubS(c), &[self])
    }

    /// `c / t`.
    pub fn rdiv_s(&self, c: f64) -> Tensor {
        ops::apply(Op::RdivS(c), &[self])
    }

    pub fn tanh(&self) -> Tensor {
        ops::apply(Op::Tanh, &[self])
    }

    pub fn exp(&self) -> Tensor {
        ops::apply(Op::Exp, &[self])
    }

    /// Elementwise absolute value; subgradient 0 at exactly 0.
    pub fn abs(&self) -> Tensor {
        ops::apply(Op::Abs, &[self])
    }

    pub fn square(&self) -> Tensor {
        ops::apply(Op::Square, &[self])
    }

    /// Elementwise square root; the backward pass defines `sqrt'(0) = 0`.
    pub fn sqrt(&self) -> Tensor {
        ops::apply(Op::Sqrt, &[self])
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        ops::apply(Op::Clamp(lo, hi), &[self])
    }

    /// Elementwise `max(t, c)`; gradient passes only where `t > c`.
    pub fn max_s(&self, c: f64) -> Tensor {
        ops::apply(Op::MaxS(c), &[self])
    }

    /// Straight-through rounding: forward is round-half-up to the nearest
    /// integer, backward copies the upstream gradient unchanged.
    pub fn ste_round(&self) -> Tensor {
        ops::apply(Op::SteRound, &[self])
    }

    /// Logistic sigmoid, expressed through tanh.
    pub fn sigmoid(&self) -> Tensor {
        self.mul_s(0.5).tanh().add_s(1.0).mul_s(0.5)
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&self) -> Tensor {
        ops::apply(Op::Sum, &[self])
    }

    pub fn mean(&self) -> Tensor {
        ops::apply(Op::Mean, &[self])
    }

    // ---- structured ops --------------------------------------------------

    /// Cross-correlation with zero padding. Input `(H, W, C)`, kernel
    /// `(kh, kw, C, C')`, output `(Ho, Wo, C')`. Gradients flow to both
    /// input and kernel.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Tensor {
        ops::apply(Op::Conv2d { stride, pad }, &[self, kernel])
    }

    /// Affine warp with bilinear sampling and zero fill outside the source.
    ///
    /// `affine` maps input pixel coordinates (row, col) to output
    /// coordinates; sampling uses its inverse. Panics on a singular affine.
    /// Gradients flow to the image values only.
    pub fn warp_affine(&self, affine: &Affine2, out_h: usize, out_w: usize) -> Tensor {
        let inv = affine
            .inverse()
            .expect("warp_affine: singular affine matrix");
        ops::apply(
            Op::Warp {
                inv: inv.coeffs(),
                out_h,
                out_w,
            },
            &[self],
        )
    }

    /// 2x bilinear upsampling with half-pixel centers and edge clamping.
    pub fn upsample2x(&self) -> Tensor {
        ops::apply(Op::Upsample2x, &[self])
    }

    /// Replicates an `(H, W)` map into `(H, W, C)`.
    pub fn expand_channels(&self, c: usize) -> Tensor {
        ops::apply(Op::ExpandCh(c), &[self])
    }

    /// Extracts channel `c` of an `(H, W, C)` tensor as `(H, W)`.
    pub fn channel(&self, c: usize) -> Tensor {
        ops::apply(Op::TakeCh(c), &[self])
    }

    /// Per-channel bias add: `(H, W, C) + (C,)`.
    pub fn bias_add(&self, bias: &Tensor) -> Tensor {
        ops::apply(Op::BiasAdd, &[self, bias])
    }

    /// Rectangular slice; `start.len()` and `size.len()` must equal the rank.
    pub fn slice(&self, start: &[usize], size: &[usize]) -> Tensor {
        assert_eq!(start.len(), self.shape().len(), "slice start rank");
        assert_eq!(size.len(), self.shape().len(), "slice size rank");
        let mut s3 = [0usize; 3];
        let mut z3 = [1usize; 3];
        for (i, &v) in start.iter().enumerate() {
            s3[i] = v;
        }
        for (i, &v) in size.iter().enumerate() {
            z3[i] = v;
        }
        ops::apply(
            Op::Slice {
                start: s3,
                size: z3,
                rank: self.shape().len(),
            },
            &[self],
        )
    }
}

/// Stacks `C` maps of shape `(H, W)` into `(H, W, C)`.
pub fn stack_channels(maps: &[Tensor]) -> Tensor {
    assert!(!maps.is_empty(), "stack_channels: empty input");
    let refs: Vec<&Tensor> = maps.iter().collect();
    ops::apply(Op::StackCh, &refs)
}

impl Tensor {
    /// See [`stack_channels`].
    pub fn stack(maps: &[Tensor]) -> Tensor {
        stack_channels(maps)
    }
}

// Operator sugar on references; all delegate to the named methods.
impl std::ops::Add for &Tensor {
    type Output = Tensor;
    fn add(self, rhs: &Tensor) -> Tensor {
        Tensor::add(self, rhs)
    }
}

impl std::ops::Sub for &Tensor {
    type Output = Tensor;
    fn sub(self, rhs: &Tensor) -> Tensor {
        Tensor::sub(self, rhs)
    }
}

impl std::ops::Mul for &Tensor {
    type Output = Tensor;
    fn mul(self, rhs: &Tensor) -> Tensor {
        Tensor::mul(self, rhs)
    }
}

impl std::ops::Div for &Tensor {
    type Output = Tensor;
    fn div(self, rhs: &Tensor) -> Tensor {
        Tensor::div(self, rhs)
    }
}

impl std::ops::Add<f64> for &Tensor {
    type Output = Tensor;
    fn add(self, rhs: f64) -> Tensor {
        self.add_s(rhs)
    }
}

impl std::ops::Sub<f64> for &Tensor {
    type Output = Tensor;
    fn sub(self, rhs: f64) -> Tensor {
        self.add_s(-rhs)
    }
}

impl std::ops::Mul<f64> for &Tensor {
    type Output = Tensor;
    fn mul(self, rhs: f64) -> Tensor {
        self.mul_s(rhs)
    }
}

impl std::ops::Neg for &Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        self.mul_s(-1.0)
    }
}

/// 2D affine map on (row, col) coordinates: `out = m * in + t` with `m`
/// stored row-major as `[a, b, c, d]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub m: [f64; 4],
    pub t: [f64; 2],
}

impl Affine2 {
    pub fn identity() -> Self {
        Affine2 {
            m: [1.0, 0.0, 0.0, 1.0],
            t: [0.0, 0.0],
        }
    }

    pub fn translation(dr: f64, dc: f64) -> Self {
        Affine2 {
            m: [1.0, 0.0, 0.0, 1.0],
            t: [dr, dc],
        }
    }

    /// Uniform scale and rotation about `center`, then translation of the
    /// center to `place`.
    pub fn scale_rot_about(scale: f64, theta: f64, center: [f64; 2], place: [f64; 2]) -> Self {
        let (sin, cos) = theta.sin_cos();
        let m = [scale * cos, -scale * sin, scale * sin, scale * cos];
        let t = [
            place[0] - (m[0] * center[0] + m[1] * center[1]),
            place[1] - (m[2] * center[0] + m[3] * center[1]),
        ];
        Affine2 { m, t }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.m[0] * p[0] + self.m[1] * p[1] + self.t[0],
            self.m[2] * p[0] + self.m[3] * p[1] + self.t[1],
        ]
    }

    pub fn det(&self) -> f64 {
        self.m[0] * self.m[3] - self.m[1] * self.m[2]
    }

    pub fn inverse(&self) -> Option<Affine2> {
        let det = self.det();
        if det.abs() < 1e-12 {
            return None;
        }
        let inv = [
            self.m[3] / det,
            -self.m[1] / det,
            -self.m[2] / det,
            self.m[0] / det,
        ];
        let t = [
            -(inv[0] * self.t[0] + inv[1] * self.t[1]),
            -(inv[2] * self.t[0] + inv[3] * self.t[1]),
        ];
        Some(Affine2 { m: inv, t })
    }

    /// Flattened `[a, b, tr, c, d, tc]` form used by the warp kernel.
    pub fn coeffs(&self) -> [f64; 6] {
        [
            self.m[0], self.m[1], self.t[0], self.m[2], self.m[3], self.t[1],
        ]
    }
}
