//! Per-sample layer kernels. Spatial activations are `[H, W, C]`, flat
//! activations are `[D]`. Every reduction runs in a fixed loop order.

use serde::{Deserialize, Serialize};

use super::tensor::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    DepthwiseConv2d { channels: usize, kernel: usize, stride: usize, padding: usize },
    PointwiseConv2d { in_channels: usize, out_channels: usize, stride: usize },
    Relu,
    GlobalAvgPool,
    Dense { inputs: usize, units: usize },
    SoftmaxXentHead,
}

/// Shape of one activation, without the batch dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl ActShape {
    pub fn len(&self) -> usize {
        match *self {
            ActShape::Spatial { h, w, c } => h * w * c,
            ActShape::Flat(d) => d,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Spatial { h, w, c } => vec![h, w, c],
            ActShape::Flat(d) => vec![d],
        }
    }
}

fn conv_out(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (n + 2 * padding).checked_sub(kernel).map(|v| v / stride + 1)
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        !matches!(self, LayerKind::Relu | LayerKind::GlobalAvgPool | LayerKind::SoftmaxXentHead)
    }

    /// Shapes of `(weight, bias)` for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                Some((vec![kernel, kernel, in_channels, out_channels], vec![out_channels]))
            }
            LayerKind::DepthwiseConv2d { channels, kernel, .. } => {
                Some((vec![kernel, kernel, channels], vec![channels]))
            }
            LayerKind::PointwiseConv2d { in_channels, out_channels, .. } => {
                Some((vec![in_channels, out_channels], vec![out_channels]))
            }
            LayerKind::Dense { inputs, units } => Some((vec![inputs, units], vec![units])),
            _ => None,
        }
    }

    /// Fan-in used for He initialization.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv2d { in_channels, kernel, .. } => kernel * kernel * in_channels,
            LayerKind::DepthwiseConv2d { kernel, .. } => kernel * kernel,
            LayerKind::PointwiseConv2d { in_channels, .. } => in_channels,
            LayerKind::Dense { inputs, .. } => inputs,
            _ => 1,
        }
    }

    pub fn output_shape(&self, input: ActShape) -> Result<ActShape> {
        let mismatch = || Error::shape(format!("{self:?} cannot consume {input:?}"));
        match (*self, input) {
            (
                LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding },
                ActShape::Spatial { h, w, c },
            ) if c == in_channels && stride > 0 && kernel > 0 => {
                let ho = conv_out(h, kernel, stride, padding).ok_or_else(mismatch)?;
                let wo = conv_out(w, kernel, stride, padding).ok_or_else(mismatch)?;
                Ok(ActShape::Spatial { h: ho, w: wo, c: out_channels })
            }
            (
                LayerKind::DepthwiseConv2d { channels, kernel, stride, padding },
                ActShape::Spatial { h, w, c },
            ) if c == channels && stride > 0 && kernel > 0 => {
                let ho = conv_out(h, kernel, stride, padding).ok_or_else(mismatch)?;
                let wo = conv_out(w, kernel, stride, padding).ok_or_else(mismatch)?;
                Ok(ActShape::Spatial { h: ho, w: wo, c })
            }
            (
                LayerKind::PointwiseConv2d { in_channels, out_channels, stride },
                ActShape::Spatial { h, w, c },
            ) if c == in_channels && stride > 0 => Ok(ActShape::Spatial {
                h: (h - 1) / stride + 1,
                w: (w - 1) / stride + 1,
                c: out_channels,
            }),
            (LayerKind::Relu, s) => Ok(s),
            (LayerKind::GlobalAvgPool, ActShape::Spatial { c, .. }) => Ok(ActShape::Flat(c)),
            (LayerKind::Dense { inputs, units }, ActShape::Flat(d)) if d == inputs => {
                Ok(ActShape::Flat(units))
            }
            (LayerKind::SoftmaxXentHead, ActShape::Flat(d)) => Ok(ActShape::Flat(d)),
            _ => Err(mismatch()),
        }
    }
}

/// Forward pass of one layer on one sample.
pub fn forward_sample<T: Scalar>(
    kind: &LayerKind,
    input: &[T],
    in_shape: ActShape,
    out_shape: ActShape,
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let mut out = vec![T::zero(); out_shape.len()];
    match (*kind, in_shape, out_shape) {
        (
            LayerKind::Conv2d { in_channels: ci, out_channels: co, kernel: k, stride: s, padding: p },
            ActShape::Spatial { h, w, .. },
            ActShape::Spatial { h: ho, w: wo, .. },
        ) => {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = &mut out[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
                    o.copy_from_slice(bias);
                    for ky in 0..k {
                        let Some(iy) = (oy * s + ky).checked_sub(p).filter(|&v| v < h) else { continue };
                        for kx in 0..k {
                            let Some(ix) = (ox * s + kx).checked_sub(p).filter(|&v| v < w) else { continue };
                            let px = &input[(iy * w + ix) * ci..(iy * w + ix + 1) * ci];
                            let wbase = (ky * k + kx) * ci * co;
                            for (c, &v) in px.iter().enumerate() {
                                let wrow = &weight[wbase + c * co..wbase + (c + 1) * co];
                                for (acc, &wv) in o.iter_mut().zip(wrow) {
                                    *acc = *acc + v * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        (
            LayerKind::DepthwiseConv2d { channels: c, kernel: k, stride: s, padding: p },
            ActShape::Spatial { h, w, .. },
            ActShape::Spatial { h: ho, w: wo, .. },
        ) => {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = &mut out[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                    o.copy_from_slice(bias);
                    for ky in 0..k {
                        let Some(iy) = (oy * s + ky).checked_sub(p).filter(|&v| v < h) else { continue };
                        for kx in 0..k {
                            let Some(ix) = (ox * s + kx).checked_sub(p).filter(|&v| v < w) else { continue };
                            let px = &input[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                            let wrow = &weight[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                            for ((acc, &v), &wv) in o.iter_mut().zip(px).zip(wrow) {
                                *acc = *acc + v * wv;
                            }
                        }
                    }
                }
            }
        }
        (
            LayerKind::PointwiseConv2d { in_channels: ci, out_channels: co, stride: s },
            ActShape::Spatial { w, .. },
            ActShape::Spatial { h: ho, w: wo, .. },
        ) => {
            for oy in 0..ho {
                for ox in 0..wo {
                    let (iy, ix) = (oy * s, ox * s);
                    let px = &input[(iy * w + ix) * ci..(iy * w + ix + 1) * ci];
                    let o = &mut out[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
                    o.copy_from_slice(bias);
                    for (c, &v) in px.iter().enumerate() {
                        for (acc, &wv) in o.iter_mut().zip(&weight[c * co..(c + 1) * co]) {
                            *acc = *acc + v * wv;
                        }
                    }
                }
            }
        }
        (LayerKind::Relu, _, _) => {
            for (o, &v) in out.iter_mut().zip(input) {
                *o = if v > T::zero() { v } else { T::zero() };
            }
        }
        (LayerKind::GlobalAvgPool, ActShape::Spatial { h, w, c }, _) => {
            for px in input.chunks_exact(c) {
                for (o, &v) in out.iter_mut().zip(px) {
                    *o = *o + v;
                }
            }
            let n = T::from_usize(h * w).expect("pixel count");
            out.iter_mut().for_each(|o| *o = *o / n);
        }
        (LayerKind::Dense { units, .. }, _, _) => {
            out.copy_from_slice(bias);
            for (i, &v) in input.iter().enumerate() {
                for (o, &wv) in out.iter_mut().zip(&weight[i * units..(i + 1) * units]) {
                    *o = *o + v * wv;
                }
            }
        }
        (LayerKind::SoftmaxXentHead, _, _) => out.copy_from_slice(input),
        _ => unreachable!("shapes are validated when the architecture is built"),
    }
    out
}

/// Backward pass of one layer on one sample.
///
/// Parameter gradients are accumulated into `grad_w` / `grad_b` when given;
/// the input gradient is returned only when `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn backward_sample<T: Scalar>(
    kind: &LayerKind,
    input: &[T],
    in_shape: ActShape,
    out_shape: ActShape,
    weight: &[T],
    grad_out: &[T],
    mut param_grads: Option<(&mut [T], &mut [T])>,
    need_input: bool,
) -> Option<Vec<T>> {
    let mut gin = need_input.then(|| vec![T::zero(); in_shape.len()]);
    match (*kind, in_shape, out_shape) {
        (
            LayerKind::Conv2d { in_channels: ci, out_channels: co, kernel: k, stride: s, padding: p },
            ActShape::Spatial { h, w, .. },
            ActShape::Spatial { h: ho, w: wo, .. },
        ) => {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = &grad_out[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
                    if let Some((_, gb)) = param_grads.as_mut() {
                        for (b, &gv) in gb.iter_mut().zip(g) {
                            *b = *b + gv;
                        }
                    }
                    for ky in 0..k {
                        let Some(iy) = (oy * s + ky).checked_sub(p).filter(|&v| v < h) else { continue };
                        for kx in 0..k {
                            let Some(ix) = (ox * s + kx).checked_sub(p).filter(|&v| v < w) else { continue };
                            let pix = (iy * w + ix) * ci;
                            let wbase = (ky * k + kx) * ci * co;
                            for c in 0..ci {
                                let wr = wbase + c * co..wbase + (c + 1) * co;
                                if let Some((gw, _)) = param_grads.as_mut() {
                                    let v = input[pix + c];
                                    for (gwv, &gv) in gw[wr.clone()].iter_mut().zip(g) {
                                        *gwv = *gwv + v * gv;
                                    }
                                }
                                if let Some(gi) = gin.as_mut() {
                                    let mut acc = T::zero();
                                    for (&wv, &gv) in weight[wr].iter().zip(g) {
                                        acc = acc + wv * gv;
                                    }
                                    gi[pix + c] = gi[pix + c] + acc;
                                }
                            }
                        }
                    }
                }
            }
        }
        (
            LayerKind::DepthwiseConv2d { channels: c, kernel: k, stride: s, padding: p },
            ActShape::Spatial { h, w, .. },
            ActShape::Spatial { h: ho, w: wo, .. },
        ) => {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = &grad_out[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                    if let Some((_, gb)) = param_grads.as_mut() {
                        for (b, &gv) in gb.iter_mut().zip(g) {
                            *b = *b + gv;
                        }
                    }
                    for ky in 0..k {
                        let Some(iy) = (oy * s + ky).checked_sub(p).filter(|&v| v < h) else { continue };
                        for kx in 0..k {
                            let Some(ix) = (ox * s + kx).checked_sub(p).filter(|&v| v < w) else { continue };
                            let pix = (iy * w + ix) * c;
                            let wr = (ky * k + kx) * c..(ky * k + kx + 1) * c;
                            if let Some((gw, _)) = param_grads.as_mut() {
                                for ((gwv, &v), &gv) in gw[wr.clone()].iter_mut().zip(&input[pix..pix + c]).zip(g) {
                                    *gwv = *gwv + v * gv;
                                }
                            }
                            if let Some(gi) = gin.as_mut() {
                                for ((giv, &wv), &gv) in gi[pix..pix + c].iter_mut().zip(&weight[wr]).zip(g) {
                                    *giv = *giv + wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        (
            LayerKind::PointwiseConv2d { in_channels: ci, out_channels: co, stride: s },
            ActShape::Spatial { w, .. },
            ActShape::Spatial { h: ho, w: wo, .. },
        ) => {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = &grad_out[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
                    let pix = (oy * s * w + ox * s) * ci;
                    if let Some((gw, gb)) = param_grads.as_mut() {
                        for (b, &gv) in gb.iter_mut().zip(g) {
                            *b = *b + gv;
                        }
                        for c in 0..ci {
                            let v = input[pix + c];
                            for (gwv, &gv) in gw[c * co..(c + 1) * co].iter_mut().zip(g) {
                                *gwv = *gwv + v * gv;
                            }
                        }
                    }
                    if let Some(gi) = gin.as_mut() {
                        for c in 0..ci {
                            let mut acc = T::zero();
                            for (&wv, &gv) in weight[c * co..(c + 1) * co].iter().zip(g) {
                                acc = acc + wv * gv;
                            }
                            gi[pix + c] = acc;
                        }
                    }
                }
            }
        }
        (LayerKind::Relu, _, _) => {
            if let Some(gi) = gin.as_mut() {
                for ((o, &v), &g) in gi.iter_mut().zip(input).zip(grad_out) {
                    *o = if v > T::zero() { g } else { T::zero() };
                }
            }
        }
        (LayerKind::GlobalAvgPool, ActShape::Spatial { h, w, c }, _) => {
            if let Some(gi) = gin.as_mut() {
                let n = T::from_usize(h * w).expect("pixel count");
                for px in gi.chunks_exact_mut(c) {
                    for (o, &g) in px.iter_mut().zip(grad_out) {
                        *o = g / n;
                    }
                }
            }
        }
        (LayerKind::Dense { units, .. }, _, _) => {
            if let Some((gw, gb)) = param_grads.as_mut() {
                for (b, &g) in gb.iter_mut().zip(grad_out) {
                    *b = *b + g;
                }
                for (i, &v) in input.iter().enumerate() {
                    for (gwv, &g) in gw[i * units..(i + 1) * units].iter_mut().zip(grad_out) {
                        *gwv = *gwv + v * g;
                    }
                }
            }
            if let Some(gi) = gin.as_mut() {
                for (i, o) in gi.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for (&wv, &g) in weight[i * units..(i + 1) * units].iter().zip(grad_out) {
                        acc = acc + wv * g;
                    }
                    *o = acc;
                }
            }
        }
        (LayerKind::SoftmaxXentHead, _, _) => {
            if let Some(gi) = gin.as_mut() {
                gi.copy_from_slice(grad_out);
            }
        }
        _ => unreachable!("shapes are validated when the architecture is built"),
    }
    gin
}

/// Mean-free softmax cross-entropy for one sample: returns `(loss, dlogits)`.
pub fn softmax_xent<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let mut sum = T::zero();
    for &e in &exps {
        sum = sum + e;
    }
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<T> = exps.iter().map(|&e| e / sum).collect();
    grad[label] = grad[label] - T::one();
    (loss, grad)
}
