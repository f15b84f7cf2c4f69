use std::rc::Rc;

use super::tape::{NodeId, Tape};
use super::tensor::{Tensor, Value};

/// Recorded operation. Saved fields are whatever the backward rule needs
/// beyond the parent and output values, which stay accessible on the tape.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    // binary, equal shapes or one-element broadcast
    Add,
    Sub,
    Mul,
    Div,
    Min2,
    // tensor-literal
    AddS(f64),
    MulS(f64),
    DivS(f64),
    RsubS(f64),
    RdivS(f64),
    // unary elementwise
    Tanh,
    Exp,
    Abs,
    Square,
    Sqrt,
    Clamp(f64, f64),
    MaxS(f64),
    SteRound,
    // reductions
    Sum,
    Mean,
    // structured
    Conv2d { stride: usize, pad: usize },
    Warp { inv: [f64; 6], out_h: usize, out_w: usize },
    Upsample2x,
    ExpandCh(usize),
    TakeCh(usize),
    StackCh,
    BiasAdd,
    Slice { start: [usize; 3], size: [usize; 3], rank: usize },
}

/// Round-half-up to the nearest integer (ties toward +inf).
pub(crate) fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Evaluates `op` over the operands, recording on a tape when any operand
/// is taped. Plain operands meeting a tape are interned as constant leaves.
pub(crate) fn apply(op: Op, inputs: &[&Tensor]) -> Tensor {
    #[cfg(debug_assertions)]
    for t in inputs {
        debug_assert!(
            t.data().iter().all(|v| v.is_finite()),
            "non-finite input to {:?}",
            op
        );
    }

    let values: Vec<&Value> = inputs.iter().map(|t| t.value.as_ref()).collect();
    let out = forward(&op, &values);

    let mut tape: Option<Tape> = None;
    for t in inputs {
        if let Some((tp, _)) = &t.node {
            match &tape {
                None => tape = Some(tp.clone()),
                Some(existing) => {
                    assert!(existing.same_tape(tp), "operands live on different tapes");
                }
            }
        }
    }
    match tape {
        None => Tensor::plain(out),
        Some(tp) => {
            let parents: Vec<NodeId> = inputs
                .iter()
                .map(|t| match &t.node {
                    Some((_, id)) => *id,
                    None => {
                        let leaf = tp.leaf(Rc::clone(&t.value), false);
                        leaf.node.as_ref().unwrap().1
                    }
                })
                .collect();
            tp.record(op, parents, out)
        }
    }
}

fn broadcast_shapes<'a>(a: &'a Value, b: &'a Value) -> Vec<usize> {
    if a.shape == b.shape {
        a.shape.clone()
    } else if a.numel() == 1 {
        b.shape.clone()
    } else if b.numel() == 1 {
        a.shape.clone()
    } else {
        panic!(
            "shape mismatch: {:?} vs {:?} (only one-element broadcast is supported)",
            a.shape, b.shape
        );
    }
}

fn zip_broadcast(a: &Value, b: &Value, f: impl Fn(f64, f64) -> f64) -> Value {
    let shape = broadcast_shapes(a, b);
    let data = if a.shape == b.shape {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    } else if a.numel() == 1 {
        let x = a.data[0];
        b.data.iter().map(|&y| f(x, y)).collect()
    } else {
        let y = b.data[0];
        a.data.iter().map(|&x| f(x, y)).collect()
    };
    Value::new(shape, data)
}

fn map(a: &Value, f: impl Fn(f64) -> f64) -> Value {
    Value::new(a.shape.clone(), a.data.iter().map(|&x| f(x)).collect())
}

pub(crate) fn forward(op: &Op, inputs: &[&Value]) -> Value {
    match op {
        Op::Leaf => unreachable!("leaf has no forward"),
        Op::Add => zip_broadcast(inputs[0], inputs[1], |x, y| x + y),
        Op::Sub => zip_broadcast(inputs[0], inputs[1], |x, y| x - y),
        Op::Mul => zip_broadcast(inputs[0], inputs[1], |x, y| x * y),
        Op::Div => {
            debug_assert!(
                inputs[1].data.iter().all(|&v| v != 0.0),
                "division by zero"
            );
            zip_broadcast(inputs[0], inputs[1], |x, y| x / y)
        }
        Op::Min2 => zip_broadcast(inputs[0], inputs[1], |x, y| if x <= y { x } else { y }),
        Op::AddS(c) => map(inputs[0], |x| x + c),
        Op::MulS(c) => map(inputs[0], |x| x * c),
        Op::DivS(c) => {
            assert!(*c != 0.0, "division by zero scalar");
            map(inputs[0], |x| x / c)
        }
        Op::RsubS(c) => map(inputs[0], |x| c - x),
        Op::RdivS(c) => {
            debug_assert!(inputs[0].data.iter().all(|&v| v != 0.0), "division by zero");
            map(inputs[0], |x| c / x)
        }
        Op::Tanh => map(inputs[0], f64::tanh),
        Op::Exp => map(inputs[0], f64::exp),
        Op::Abs => map(inputs[0], f64::abs),
        Op::Square => map(inputs[0], |x| x * x),
        Op::Sqrt => {
            debug_assert!(inputs[0].data.iter().all(|&v| v >= 0.0), "sqrt of negative");
            map(inputs[0], f64::sqrt)
        }
        Op::Clamp(lo, hi) => map(inputs[0], |x| x.clamp(*lo, *hi)),
        Op::MaxS(c) => map(inputs[0], |x| x.max(*c)),
        Op::SteRound => map(inputs[0], round_half_up),
        Op::Sum => {
            assert!(inputs[0].numel() > 0, "reduce over empty tensor");
            Value::new(vec![], vec![inputs[0].data.iter().sum()])
        }
        Op::Mean => {
            assert!(inputs[0].numel() > 0, "reduce over empty tensor");
            let n = inputs[0].numel() as f64;
            Value::new(vec![], vec![inputs[0].data.iter().sum::<f64>() / n])
        }
        Op::Conv2d { stride, pad } => conv2d_forward(inputs[0], inputs[1], *stride, *pad),
        Op::Warp { inv, out_h, out_w } => warp_forward(inputs[0], inv, *out_h, *out_w),
        Op::Upsample2x => upsample2x_forward(inputs[0]),
        Op::ExpandCh(c) => {
            let a = inputs[0];
            assert_eq!(a.shape.len(), 2, "expand_channels expects (H, W)");
            let (h, w) = (a.shape[0], a.shape[1]);
            let mut data = Vec::with_capacity(h * w * c);
            for &v in &a.data {
                for _ in 0..*c {
                    data.push(v);
                }
            }
            Value::new(vec![h, w, *c], data)
        }
        Op::TakeCh(c) => {
            let a = inputs[0];
            assert_eq!(a.shape.len(), 3, "channel() expects (H, W, C)");
            let (h, w, ch) = (a.shape[0], a.shape[1], a.shape[2]);
            assert!(*c < ch, "channel index out of range");
            let mut data = Vec::with_capacity(h * w);
            for px in 0..h * w {
                data.push(a.data[px * ch + c]);
            }
            Value::new(vec![h, w], data)
        }
        Op::StackCh => {
            let c = inputs.len();
            let (h, w) = (inputs[0].shape[0], inputs[0].shape[1]);
            for v in inputs {
                assert_eq!(v.shape, vec![h, w], "stack_channels shape mismatch");
            }
            let mut data = Vec::with_capacity(h * w * c);
            for px in 0..h * w {
                for v in inputs {
                    data.push(v.data[px]);
                }
            }
            Value::new(vec![h, w, c], data)
        }
        Op::BiasAdd => {
            let (a, b) = (inputs[0], inputs[1]);
            assert_eq!(a.shape.len(), 3, "bias_add expects (H, W, C)");
            let ch = a.shape[2];
            assert_eq!(b.shape, vec![ch], "bias length must equal channel count");
            let mut data = a.data.clone();
            for px in 0..a.shape[0] * a.shape[1] {
                for c in 0..ch {
                    data[px * ch + c] += b.data[c];
                }
            }
            Value::new(a.shape.clone(), data)
        }
        Op::Slice { start, size, rank } => slice_forward(inputs[0], start, size, *rank),
    }
}

/// Accumulates `d out / d parents[slot] * upstream` into `sink`.
pub(crate) fn backward_into(
    op: &Op,
    slot: usize,
    out: &Value,
    parents: &[Rc<Value>],
    upstream: &[f64],
    sink: &mut [f64],
) {
    match op {
        Op::Leaf => unreachable!("leaf has no backward"),
        Op::Add => accumulate_binary(slot, parents, upstream, sink, |_x, _y, g| g, |_x, _y, g| g),
        Op::Sub => accumulate_binary(slot, parents, upstream, sink, |_x, _y, g| g, |_x, _y, g| -g),
        Op::Mul => accumulate_binary(slot, parents, upstream, sink, |_x, y, g| g * y, |x, _y, g| g * x),
        Op::Div => accumulate_binary(
            slot,
            parents,
            upstream,
            sink,
            |_x, y, g| g / y,
            |x, y, g| -g * x / (y * y),
        ),
        Op::Min2 => accumulate_binary(
            slot,
            parents,
            upstream,
            sink,
            |x, y, g| if x <= y { g } else { 0.0 },
            |x, y, g| if x <= y { 0.0 } else { g },
        ),
        Op::AddS(_) => {
            for (s, &g) in sink.iter_mut().zip(upstream) {
                *s += g;
            }
        }
        Op::MulS(c) => {
            for (s, &g) in sink.iter_mut().zip(upstream) {
                *s += g * c;
            }
        }
        Op::DivS(c) => {
            for (s, &g) in sink.iter_mut().zip(upstream) {
                *s += g / c;
            }
        }
        Op::RsubS(_) => {
            for (s, &g) in sink.iter_mut().zip(upstream) {
                *s -= g;
            }
        }
        Op::RdivS(c) => {
            let x = &parents[0].data;
            for i in 0..sink.len() {
                sink[i] += -upstream[i] * c / (x[i] * x[i]);
            }
        }
        Op::Tanh => {
            for i in 0..sink.len() {
                let y = out.data[i];
                sink[i] += upstream[i] * (1.0 - y * y);
            }
        }
        Op::Exp => {
            for i in 0..sink.len() {
                sink[i] += upstream[i] * out.data[i];
            }
        }
        Op::Abs => {
            let x = &parents[0].data;
            for i in 0..sink.len() {
                let s = if x[i] > 0.0 {
                    1.0
                } else if x[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                sink[i] += upstream[i] * s;
            }
        }
        Op::Square => {
            let x = &parents[0].data;
            for i in 0..sink.len() {
                sink[i] += upstream[i] * 2.0 * x[i];
            }
        }
        Op::Sqrt => {
            for i in 0..sink.len() {
                let y = out.data[i];
                if y != 0.0 {
                    sink[i] += upstream[i] * 0.5 / y;
                }
            }
        }
        Op::Clamp(lo, hi) => {
            let x = &parents[0].data;
            for i in 0..sink.len() {
                if x[i] >= *lo && x[i] <= *hi {
                    sink[i] += upstream[i];
                }
            }
        }
        Op::MaxS(c) => {
            let x = &parents[0].data;
            for i in 0..sink.len() {
                if x[i] > *c {
                    sink[i] += upstream[i];
                }
            }
        }
        Op::SteRound => {
            for (s, &g) in sink.iter_mut().zip(upstream) {
                *s += g;
            }
        }
        Op::Sum => {
            let g = upstream[0];
            for s in sink.iter_mut() {
                *s += g;
            }
        }
        Op::Mean => {
            let g = upstream[0] / parents[0].numel() as f64;
            for s in sink.iter_mut() {
                *s += g;
            }
        }
        Op::Conv2d { stride, pad } => {
            conv2d_backward(slot, &parents[0], &parents[1], upstream, sink, *stride, *pad)
        }
        Op::Warp { inv, out_h, out_w } => {
            warp_backward(&parents[0], inv, *out_h, *out_w, upstream, sink)
        }
        Op::Upsample2x => upsample2x_backward(&parents[0], upstream, sink),
        Op::ExpandCh(c) => {
            for (px, s) in sink.iter_mut().enumerate() {
                let base = px * c;
                let mut acc = 0.0;
                for k in 0..*c {
                    acc += upstream[base + k];
                }
                *s += acc;
            }
        }
        Op::TakeCh(c) => {
            let ch = parents[0].shape[2];
            for (px, &g) in upstream.iter().enumerate() {
                sink[px * ch + c] += g;
            }
        }
        Op::StackCh => {
            let c = parents.len();
            for px in 0..sink.len() {
                sink[px] += upstream[px * c + slot];
            }
        }
        Op::BiasAdd => {
            if slot == 0 {
                for (s, &g) in sink.iter_mut().zip(upstream) {
                    *s += g;
                }
            } else {
                let ch = parents[1].numel();
                for (i, &g) in upstream.iter().enumerate() {
                    sink[i % ch] += g;
                }
            }
        }
        Op::Slice { start, size, rank } => {
            slice_backward(&parents[0], start, size, *rank, upstream, sink)
        }
    }
}

/// Shared scaffolding for broadcast-aware binary backward rules.
fn accumulate_binary(
    slot: usize,
    parents: &[Rc<Value>],
    upstream: &[f64],
    sink: &mut [f64],
    da: impl Fn(f64, f64, f64) -> f64,
    db: impl Fn(f64, f64, f64) -> f64,
) {
    let (a, b) = (&parents[0], &parents[1]);
    let a_scalar = a.numel() == 1 && b.numel() > 1;
    let b_scalar = b.numel() == 1 && a.numel() > 1;
    let n = upstream.len();
    if slot == 0 {
        if a_scalar {
            let x = a.data[0];
            let mut acc = 0.0;
            for i in 0..n {
                acc += da(x, b.data[i], upstream[i]);
            }
            sink[0] += acc;
        } else if b_scalar {
            let y = b.data[0];
            for i in 0..n {
                sink[i] += da(a.data[i], y, upstream[i]);
            }
        } else {
            for i in 0..n {
                sink[i] += da(a.data[i], b.data[i], upstream[i]);
            }
        }
    } else if b_scalar {
        let y = b.data[0];
        let mut acc = 0.0;
        for i in 0..n {
            acc += db(a.data[i], y, upstream[i]);
        }
        sink[0] += acc;
    } else if a_scalar {
        let x = a.data[0];
        for i in 0..n {
            sink[i] += db(x, b.data[i], upstream[i]);
        }
    } else {
        for i in 0..n {
            sink[i] += db(a.data[i], b.data[i], upstream[i]);
        }
    }
}

fn conv_dims(input: &Value, kernel: &Value, stride: usize, pad: usize) -> (usize, usize, usize, usize, usize, usize) {
    assert_eq!(input.shape.len(), 3, "conv2d input must be (H, W, C)");
    assert_eq!(kernel.shape.len(), 4, "conv2d kernel must be (kh, kw, C, C')");
    let (h, w, c) = (input.shape[0], input.shape[1], input.shape[2]);
    let (kh, kw, kc, co) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d kernel dims must be odd");
    assert!(stride >= 1, "conv2d stride must be >= 1");
    assert_eq!(kc, c, "conv2d channel mismatch: input {} vs kernel {}", c, kc);
    assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
    (h, w, c, kh, kw, co)
}

fn conv2d_forward(input: &Value, kernel: &Value, stride: usize, pad: usize) -> Value {
    let (h, w, c, kh, kw, co) = conv_dims(input, kernel, stride, pad);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; oh * ow * co];
    let kdat = &kernel.data;
    let idat = &input.data;
    for oy in 0..oh {
        let iy0 = (oy * stride) as isize - pad as isize;
        for ox in 0..ow {
            let ix0 = (ox * stride) as isize - pad as isize;
            let acc = &mut out[(oy * ow + ox) * co..(oy * ow + ox) * co + co];
            for ky in 0..kh {
                let iy = iy0 + ky as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = ix0 + kx as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_base = ((iy as usize) * w + ix as usize) * c;
                    let k_base = ((ky * kw + kx) * c) * co;
                    for ci in 0..c {
                        let s = idat[in_base + ci];
                        let krow = k_base + ci * co;
                        for (a, &kv) in acc.iter_mut().zip(&kdat[krow..krow + co]) {
                            *a += s * kv;
                        }
                    }
                }
            }
        }
    }
    Value::new(vec![oh, ow, co], out)
}

fn conv2d_backward(
    slot: usize,
    input: &Value,
    kernel: &Value,
    upstream: &[f64],
    sink: &mut [f64],
    stride: usize,
    pad: usize,
) {
    let (h, w, c) = (input.shape[0], input.shape[1], input.shape[2]);
    let (kh, kw, co) = (kernel.shape[0], kernel.shape[1], kernel.shape[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    for oy in 0..oh {
        let iy0 = (oy * stride) as isize - pad as isize;
        for ox in 0..ow {
            let ix0 = (ox * stride) as isize - pad as isize;
            let g = &upstream[(oy * ow + ox) * co..(oy * ow + ox) * co + co];
            for ky in 0..kh {
                let iy = iy0 + ky as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = ix0 + kx as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_base = ((iy as usize) * w + ix as usize) * c;
                    let k_base = ((ky * kw + kx) * c) * co;
                    if slot == 0 {
                        for ci in 0..c {
                            let krow = k_base + ci * co;
                            let mut acc = 0.0;
                            for (gi, &kv) in g.iter().zip(&kernel.data[krow..krow + co]) {
                                acc += gi * kv;
                            }
                            sink[in_base + ci] += acc;
                        }
                    } else {
                        for ci in 0..c {
                            let s = input.data[in_base + ci];
                            let krow = k_base + ci * co;
                            for (sk, &gi) in sink[krow..krow + co].iter_mut().zip(g) {
                                *sk += s * gi;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Channel count treating rank-2 maps as single-channel.
fn hw_c(v: &Value) -> (usize, usize, usize) {
    match v.shape.len() {
        2 => (v.shape[0], v.shape[1], 1),
        3 => (v.shape[0], v.shape[1], v.shape[2]),
        r => panic!("expected rank 2 or 3 image, got rank {}", r),
    }
}

fn warp_forward(input: &Value, inv: &[f64; 6], out_h: usize, out_w: usize) -> Value {
    let (h, w, c) = hw_c(input);
    let mut out = vec![0.0; out_h * out_w * c];
    for i in 0..out_h {
        for j in 0..out_w {
            let sr = inv[0] * i as f64 + inv[1] * j as f64 + inv[2];
            let sc = inv[3] * i as f64 + inv[4] * j as f64 + inv[5];
            let r0 = sr.floor();
            let c0 = sc.floor();
            let fr = sr - r0;
            let fc = sc - c0;
            let taps = [
                (r0 as isize, c0 as isize, (1.0 - fr) * (1.0 - fc)),
                (r0 as isize, c0 as isize + 1, (1.0 - fr) * fc),
                (r0 as isize + 1, c0 as isize, fr * (1.0 - fc)),
                (r0 as isize + 1, c0 as isize + 1, fr * fc),
            ];
            let ob = (i * out_w + j) * c;
            for (tr, tc, wt) in taps {
                if wt == 0.0 || tr < 0 || tr >= h as isize || tc < 0 || tc >= w as isize {
                    continue;
                }
                let ib = ((tr as usize) * w + tc as usize) * c;
                for ch in 0..c {
                    out[ob + ch] += wt * input.data[ib + ch];
                }
            }
        }
    }
    let shape = if input.shape.len() == 2 {
        vec![out_h, out_w]
    } else {
        vec![out_h, out_w, c]
    };
    Value::new(shape, out)
}

fn warp_backward(
    input: &Value,
    inv: &[f64; 6],
    out_h: usize,
    out_w: usize,
    upstream: &[f64],
    sink: &mut [f64],
) {
    let (h, w, c) = hw_c(input);
    for i in 0..out_h {
        for j in 0..out_w {
            let sr = inv[0] * i as f64 + inv[1] * j as f64 + inv[2];
            let sc = inv[3] * i as f64 + inv[4] * j as f64 + inv[5];
            let r0 = sr.floor();
            let c0 = sc.floor();
            let fr = sr - r0;
            let fc = sc - c0;
            let taps = [
                (r0 as isize, c0 as isize, (1.0 - fr) * (1.0 - fc)),
                (r0 as isize, c0 as isize + 1, (1.0 - fr) * fc),
                (r0 as isize + 1, c0 as isize, fr * (1.0 - fc)),
                (r0 as isize + 1, c0 as isize + 1, fr * fc),
            ];
            let ob = (i * out_w + j) * c;
            for (tr, tc, wt) in taps {
                if wt == 0.0 || tr < 0 || tr >= h as isize || tc < 0 || tc >= w as isize {
                    continue;
                }
                let ib = ((tr as usize) * w + tc as usize) * c;
                for ch in 0..c {
                    sink[ib + ch] += wt * upstream[ob + ch];
                }
            }
        }
    }
}

/// Source taps for one output axis position under 2x half-pixel upsampling
/// with edge clamping.
fn up2_taps(o: usize, n: usize) -> (usize, usize, f64) {
    let s = (o as f64 + 0.5) / 2.0 - 0.5;
    let s = s.clamp(0.0, (n - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    let f = s - i0 as f64;
    (i0, i1, f)
}

fn upsample2x_forward(input: &Value) -> Value {
    let (h, w, c) = hw_c(input);
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0; oh * ow * c];
    for i in 0..oh {
        let (r0, r1, fr) = up2_taps(i, h);
        for j in 0..ow {
            let (c0, c1, fc) = up2_taps(j, w);
            let ob = (i * ow + j) * c;
            for ch in 0..c {
                let v00 = input.data[(r0 * w + c0) * c + ch];
                let v01 = input.data[(r0 * w + c1) * c + ch];
                let v10 = input.data[(r1 * w + c0) * c + ch];
                let v11 = input.data[(r1 * w + c1) * c + ch];
                out[ob + ch] = (1.0 - fr) * ((1.0 - fc) * v00 + fc * v01)
                    + fr * ((1.0 - fc) * v10 + fc * v11);
            }
        }
    }
    let shape = if input.shape.len() == 2 {
        vec![oh, ow]
    } else {
        vec![oh, ow, c]
    };
    Value::new(shape, out)
}

fn upsample2x_backward(input: &Value, upstream: &[f64], sink: &mut [f64]) {
    let (h, w, c) = hw_c(input);
    let (oh, ow) = (h * 2, w * 2);
    for i in 0..oh {
        let (r0, r1, fr) = up2_taps(i, h);
        for j in 0..ow {
            let (c0, c1, fc) = up2_taps(j, w);
            let ob = (i * ow + j) * c;
            for ch in 0..c {
                let g = upstream[ob + ch];
                sink[(r0 * w + c0) * c + ch] += (1.0 - fr) * (1.0 - fc) * g;
                sink[(r0 * w + c1) * c + ch] += (1.0 - fr) * fc * g;
                sink[(r1 * w + c0) * c + ch] += fr * (1.0 - fc) * g;
                sink[(r1 * w + c1) * c + ch] += fr * fc * g;
            }
        }
    }
}

fn dims3(v: &Value) -> [usize; 3] {
    let mut d = [1usize; 3];
    for (i, &s) in v.shape.iter().enumerate() {
        d[i] = s;
    }
    d
}

fn slice_forward(input: &Value, start: &[usize; 3], size: &[usize; 3], rank: usize) -> Value {
    let d = dims3(input);
    for k in 0..3 {
        assert!(
            start[k] + size[k] <= d[k],
            "slice out of bounds on dim {}: {}+{} > {}",
            k,
            start[k],
            size[k],
            d[k]
        );
    }
    let mut out = Vec::with_capacity(size[0] * size[1] * size[2]);
    for a in 0..size[0] {
        for b in 0..size[1] {
            let base = ((start[0] + a) * d[1] + (start[1] + b)) * d[2] + start[2];
            out.extend_from_slice(&input.data[base..base + size[2]]);
        }
    }
    let shape: Vec<usize> = size[..rank].to_vec();
    Value::new(shape, out)
}

fn slice_backward(
    input: &Value,
    start: &[usize; 3],
    size: &[usize; 3],
    _rank: usize,
    upstream: &[f64],
    sink: &mut [f64],
) {
    let d = dims3(input);
    let mut idx = 0usize;
    for a in 0..size[0] {
        for b in 0..size[1] {
            let base = ((start[0] + a) * d[1] + (start[1] + b)) * d[2] + start[2];
            for k in 0..size[2] {
                sink[base + k] += upstream[idx];
                idx += 1;
            }
        }
    }
}
