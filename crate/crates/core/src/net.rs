//! The fixed layer vocabulary and its exact reverse-mode gradients.
//!
//! There is no general tape: each layer kind supplies a hand-written
//! vector-Jacobian product, which keeps the gradient code small enough to
//! verify against finite differences (see [`finite_difference_check`]).
//!
//! Convolution is cross-correlation (no kernel flip). Relu's subgradient at
//! exactly zero is zero. Maxpool breaks ties toward the lowest flat index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

/// One layer of the stack, geometry only; parameters live in [`ParamPair`]s.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
}

/// Weight + bias for a parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamPair {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-layer parameter slot; `None` for relu/maxpool/flatten.
pub type LayerParams = Option<ParamPair>;

/// Gradients of a scalar loss with respect to the input and every parameter.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub input_grad: Tensor,
    pub param_grads: Vec<Option<ParamPair>>,
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }
}

fn pad_amounts(kernel: usize, stride: usize, input: usize, padding: Padding) -> (usize, usize, usize) {
    match padding {
        Padding::Valid => {
            let out = (input - kernel) / stride + 1;
            (0, 0, out)
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            (total / 2, total - total / 2, out)
        }
    }
}

/// Output shape of a single layer for a per-sample input shape
/// (`[C, H, W]` for spatial layers, `[D]` after flatten).
pub fn layer_output_shape(layer: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
    match layer {
        LayerSpec::Conv {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        } => {
            if *kernel == 0 || *stride == 0 {
                return Err(Error::InvalidArgument("conv kernel/stride must be positive".into()));
            }
            match input {
                [c, h, w] if c == in_ch => {
                    let padded_min = *kernel;
                    if matches!(padding, Padding::Valid) && (*h < padded_min || *w < padded_min) {
                        return Err(Error::BadShape(format!(
                            "conv kernel {kernel} exceeds input {h}x{w}"
                        )));
                    }
                    let (_, _, oh) = pad_amounts(*kernel, *stride, *h, *padding);
                    let (_, _, ow) = pad_amounts(*kernel, *stride, *w, *padding);
                    Ok(vec![*out_ch, oh, ow])
                }
                _ => Err(Error::BadShape(format!(
                    "conv expects [{in_ch},H,W], got {input:?}"
                ))),
            }
        }
        LayerSpec::Relu => Ok(input.to_vec()),
        LayerSpec::MaxPool { size, stride } => {
            if *size == 0 || *stride == 0 {
                return Err(Error::InvalidArgument("maxpool size/stride must be positive".into()));
            }
            match input {
                [c, h, w] if *h >= *size && *w >= *size => Ok(vec![
                    *c,
                    (h - size) / stride + 1,
                    (w - size) / stride + 1,
                ]),
                _ => Err(Error::BadShape(format!(
                    "maxpool {size} does not fit input {input:?}"
                ))),
            }
        }
        LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        LayerSpec::Dense { in_dim, out_dim } => match input {
            [d] if d == in_dim => Ok(vec![*out_dim]),
            _ => Err(Error::BadShape(format!(
                "dense expects [{in_dim}], got {input:?}"
            ))),
        },
    }
}

/// Per-sample shapes through the whole stack; index 0 is the input shape.
/// Errors carry the offending layer index.
pub fn stack_shapes(layers: &[LayerSpec], input: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = vec![input.to_vec()];
    for (i, layer) in layers.iter().enumerate() {
        let next = layer_output_shape(layer, shapes.last().unwrap()).map_err(|e| {
            Error::ShapeMismatch {
                layer: i,
                expected: format!("{layer:?}"),
                got: format!("{:?} ({e})", shapes.last().unwrap()),
            }
        })?;
        shapes.push(next);
    }
    Ok(shapes)
}

/// Expected parameter shapes (weight, bias) for a layer, if any.
pub fn param_shapes(layer: &LayerSpec) -> Option<(Vec<usize>, Vec<usize>)> {
    match layer {
        LayerSpec::Conv {
            in_ch,
            out_ch,
            kernel,
            ..
        } => Some((vec![*out_ch, *in_ch, *kernel, *kernel], vec![*out_ch])),
        LayerSpec::Dense { in_dim, out_dim } => Some((vec![*out_dim, *in_dim], vec![*out_dim])),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Cached intermediates for one forward pass, consumed by backprop.
pub struct ForwardTrace {
    /// activations[0] is the input; activations[i + 1] the output of layer i.
    pub activations: Vec<Tensor>,
    /// Per maxpool layer: flat argmax index (into the per-sample input) for
    /// every output element, batch-major.
    pool_argmax: Vec<Option<Vec<u32>>>,
    /// Per conv layer: im2col buffers per batch item, concatenated.
    conv_cols: Vec<Option<Vec<f32>>>,
}

fn batch_of(t: &Tensor) -> Result<usize> {
    if t.shape().len() < 2 {
        return Err(Error::BadShape(format!(
            "expected a batched tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.shape()[0])
}

fn check_params(layers: &[LayerSpec], params: &[LayerParams]) -> Result<()> {
    if layers.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} layers but {} parameter slots",
            layers.len(),
            params.len()
        )));
    }
    for (i, (layer, slot)) in layers.iter().zip(params).enumerate() {
        match (param_shapes(layer), slot) {
            (None, None) => {}
            (Some((w, b)), Some(pair)) => {
                if pair.weight.shape() != w.as_slice() || pair.bias.shape() != b.as_slice() {
                    return Err(Error::ShapeMismatch {
                        layer: i,
                        expected: format!("weight {w:?}, bias {b:?}"),
                        got: format!(
                            "weight {:?}, bias {:?}",
                            pair.weight.shape(),
                            pair.bias.shape()
                        ),
                    });
                }
            }
            (expected, _) => {
                return Err(Error::ShapeMismatch {
                    layer: i,
                    expected: format!("params {expected:?}"),
                    got: "mismatched parameter slot".into(),
                })
            }
        }
    }
    Ok(())
}

/// Run the stack on a batched input, keeping the trace for backprop.
pub fn forward_trace(
    layers: &[LayerSpec],
    params: &[LayerParams],
    input: &Tensor,
) -> Result<(Tensor, ForwardTrace)> {
    check_params(layers, params)?;
    let n = batch_of(input)?;
    let shapes = stack_shapes(layers, &input.shape()[1..])?;

    let mut trace = ForwardTrace {
        activations: Vec::with_capacity(layers.len() + 1),
        pool_argmax: vec![None; layers.len()],
        conv_cols: vec![None; layers.len()],
    };
    trace.activations.push(input.clone());

    for (i, layer) in layers.iter().enumerate() {
        let x = trace.activations.last().unwrap();
        let out = match layer {
            LayerSpec::Conv {
                kernel,
                stride,
                padding,
                ..
            } => {
                let pair = params[i].as_ref().unwrap();
                let (out, cols) = conv_forward(
                    x,
                    &shapes[i],
                    &shapes[i + 1],
                    pair,
                    *kernel,
                    *stride,
                    *padding,
                );
                trace.conv_cols[i] = Some(cols);
                out
            }
            LayerSpec::Relu => relu_forward(x),
            LayerSpec::MaxPool { size, stride } => {
                let (out, argmax) = maxpool_forward(x, &shapes[i], &shapes[i + 1], *size, *stride);
                trace.pool_argmax[i] = Some(argmax);
                out
            }
            LayerSpec::Flatten => {
                let mut shape = vec![n];
                shape.extend_from_slice(&shapes[i + 1]);
                x.reshaped(&shape)?
            }
            LayerSpec::Dense { .. } => dense_forward(x, params[i].as_ref().unwrap()),
        };
        trace.activations.push(out);
    }

    let logits = trace.activations.last().unwrap().clone();
    Ok((logits, trace))
}

/// Logits for a batched input. Pure function of inputs and parameters.
pub fn forward(layers: &[LayerSpec], params: &[LayerParams], input: &Tensor) -> Result<Tensor> {
    forward_trace(layers, params, input).map(|(logits, _)| logits)
}

fn conv_forward(
    x: &Tensor,
    in_shape: &[usize],
    out_shape: &[usize],
    pair: &ParamPair,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> (Tensor, Vec<f32>) {
    let n = x.shape()[0];
    let (ci, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (co, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let (pad_h, _, _) = pad_amounts(kernel, stride, h, padding);
    let (pad_w, _, _) = pad_amounts(kernel, stride, w, padding);

    let ksz = ci * kernel * kernel;
    let span = oh * ow;
    let mut cols = vec![0.0f32; n * ksz * span];
    let mut out = Tensor::zeros(&[n, co, oh, ow]);

    let weight = pair.weight.data();
    let bias = pair.bias.data();
    let in_per = ci * h * w;
    let out_per = co * span;

    for ni in 0..n {
        let img = &x.data()[ni * in_per..(ni + 1) * in_per];
        let col = &mut cols[ni * ksz * span..(ni + 1) * ksz * span];
        im2col(img, ci, h, w, kernel, stride, pad_h, pad_w, oh, ow, col);

        let dst = &mut out.data_mut()[ni * out_per..(ni + 1) * out_per];
        for o in 0..co {
            let w_row = &weight[o * ksz..(o + 1) * ksz];
            let c_row = &mut dst[o * span..(o + 1) * span];
            c_row.iter_mut().for_each(|v| *v = bias[o]);
            for (k, &wv) in w_row.iter().enumerate() {
                if wv != 0.0 {
                    let b_row = &col[k * span..(k + 1) * span];
                    for (cv, bv) in c_row.iter_mut().zip(b_row) {
                        *cv += wv * bv;
                    }
                }
            }
        }
    }
    (out, cols)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    let span = oh * ow;
    for c in 0..ci {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let k = (c * kernel + ky) * kernel + kx;
                let dst = &mut col[k * span..(k + 1) * span];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad_h as isize;
                    let row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // Contiguous copy with clipped edges.
                        let ix0 = kx as isize - pad_w as isize;
                        for (ox, v) in row.iter_mut().enumerate() {
                            let ix = ix0 + ox as isize;
                            *v = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    } else {
                        for (ox, v) in row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad_w as isize;
                            *v = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

fn maxpool_forward(
    x: &Tensor,
    in_shape: &[usize],
    out_shape: &[usize],
    size: usize,
    stride: usize,
) -> (Tensor, Vec<u32>) {
    let n = x.shape()[0];
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let in_per = c * h * w;

    let out_data = out.data_mut();
    for ni in 0..n {
        let img = &x.data()[ni * in_per..(ni + 1) * in_per];
        for ch in 0..c {
            let plane = &img[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..size {
                        let iy = oy * stride + ky;
                        for kx in 0..size {
                            let ix = ox * stride + kx;
                            let idx = iy * w + ix;
                            let v = plane[idx];
                            // Strict > keeps the lowest flat index on ties.
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((ni * c + ch) * oh + oy) * ow + ox;
                    out_data[o] = best;
                    argmax[o] = (ch * h * w + best_idx) as u32;
                }
            }
        }
    }
    (out, argmax)
}

fn dense_forward(x: &Tensor, pair: &ParamPair) -> Tensor {
    let n = x.shape()[0];
    let in_dim = x.shape()[1];
    let out_dim = pair.bias.numel();
    let weight = pair.weight.data();
    let bias = pair.bias.data();
    let mut out = Tensor::zeros(&[n, out_dim]);
    let out_data = out.data_mut();
    for ni in 0..n {
        let row = &x.data()[ni * in_dim..(ni + 1) * in_dim];
        let dst = &mut out_data[ni * out_dim..(ni + 1) * out_dim];
        for o in 0..out_dim {
            let w_row = &weight[o * in_dim..(o + 1) * in_dim];
            let mut acc = 0.0f32;
            for (a, b) in row.iter().zip(w_row) {
                acc += a * b;
            }
            dst[o] = acc + bias[o];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Stabilized softmax cross-entropy.
///
/// For `[C]` logits returns the per-sample loss and `softmax - onehot`; for
/// `[N, C]` returns the batch mean loss and the gradient scaled by `1/N`.
/// Row reductions run in f64 so tiny losses (confident correct logits)
/// survive the f32 output rounding.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f32, Tensor)> {
    let (n, c) = match logits.shape() {
        [c] => (1usize, *c),
        [n, c] => (*n, *c),
        other => {
            return Err(Error::BadShape(format!(
                "logits must be [C] or [N,C], got {other:?}"
            )))
        }
    };
    if targets.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} targets for batch of {}",
            targets.len(),
            n
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::InvalidArgument(format!(
            "target {t} out of range for {c} classes"
        )));
    }

    let mut grad = Tensor::zeros(logits.shape());
    let scale = 1.0 / n as f64;
    let mut total = 0.0f64;
    let grad_data = grad.data_mut();
    for ni in 0..n {
        let row = &logits.data()[ni * c..(ni + 1) * c];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v as f64) - m).exp();
        }
        let lse = m + denom.ln();
        total += lse - row[targets[ni]] as f64;
        let g_row = &mut grad_data[ni * c..(ni + 1) * c];
        for (j, &v) in row.iter().enumerate() {
            let p = ((v as f64) - lse).exp();
            let y = if j == targets[ni] { 1.0 } else { 0.0 };
            g_row[j] = ((p - y) * scale) as f32;
        }
    }
    Ok(((total * scale) as f32, grad))
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Backpropagate `d loss / d logits` through a recorded trace.
///
/// `want_params` skips parameter-gradient accumulation when only the input
/// gradient is needed (the attack loops).
pub fn backprop(
    layers: &[LayerSpec],
    params: &[LayerParams],
    trace: &ForwardTrace,
    logit_grad: &Tensor,
    want_params: bool,
) -> GradientBundle {
    backprop_with_injections(layers, params, trace, logit_grad, &[], want_params)
}

/// As [`backprop`], additionally adding `d loss / d activation` terms at the
/// given activation indices (activation i is the output of layer i - 1;
/// index 0 is the input). Used for losses that read intermediate layers.
pub fn backprop_with_injections(
    layers: &[LayerSpec],
    params: &[LayerParams],
    trace: &ForwardTrace,
    logit_grad: &Tensor,
    injections: &[(usize, Tensor)],
    want_params: bool,
) -> GradientBundle {
    let mut grad = logit_grad.clone();
    for (a, inj) in injections {
        if *a == layers.len() {
            grad.add_scaled(inj, 1.0);
        }
    }
    let mut param_grads: Vec<Option<ParamPair>> = params
        .iter()
        .map(|slot| {
            if want_params {
                slot.as_ref().map(|pair| ParamPair {
                    weight: Tensor::zeros(pair.weight.shape()),
                    bias: Tensor::zeros(pair.bias.shape()),
                })
            } else {
                None
            }
        })
        .collect();

    for (i, layer) in layers.iter().enumerate().rev() {
        let x = &trace.activations[i];
        grad = match layer {
            LayerSpec::Conv {
                kernel,
                stride,
                padding,
                ..
            } => conv_backward(
                x,
                &grad,
                params[i].as_ref().unwrap(),
                trace.conv_cols[i].as_ref().unwrap(),
                param_grads.get_mut(i).and_then(|g| g.as_mut()),
                *kernel,
                *stride,
                *padding,
            ),
            LayerSpec::Relu => {
                let mut g = grad;
                for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                    // Subgradient at exactly zero is zero.
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                g
            }
            LayerSpec::MaxPool { .. } => {
                let argmax = trace.pool_argmax[i].as_ref().unwrap();
                let mut g = Tensor::zeros(x.shape());
                let per = x.numel() / x.shape()[0];
                let n = x.shape()[0];
                let out_per = grad.numel() / n;
                let g_data = g.data_mut();
                for ni in 0..n {
                    let up = &grad.data()[ni * out_per..(ni + 1) * out_per];
                    let am = &argmax[ni * out_per..(ni + 1) * out_per];
                    let dst = &mut g_data[ni * per..(ni + 1) * per];
                    for (&u, &a) in up.iter().zip(am) {
                        dst[a as usize] += u;
                    }
                }
                g
            }
            LayerSpec::Flatten => grad.reshaped(x.shape()).unwrap(),
            LayerSpec::Dense { .. } => dense_backward(
                x,
                &grad,
                params[i].as_ref().unwrap(),
                param_grads.get_mut(i).and_then(|g| g.as_mut()),
            ),
        };
        for (a, inj) in injections {
            if *a == i {
                grad.add_scaled(inj, 1.0);
            }
        }
    }

    GradientBundle {
        input_grad: grad,
        param_grads,
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    dout: &Tensor,
    pair: &ParamPair,
    cols: &[f32],
    grads: Option<&mut ParamPair>,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Tensor {
    let n = x.shape()[0];
    let (ci, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, oh, ow) = (dout.shape()[1], dout.shape()[2], dout.shape()[3]);
    let (pad_h, _, _) = pad_amounts(kernel, stride, h, padding);
    let (pad_w, _, _) = pad_amounts(kernel, stride, w, padding);

    let ksz = ci * kernel * kernel;
    let span = oh * ow;
    let weight = pair.weight.data();
    let mut dx = Tensor::zeros(x.shape());
    let in_per = ci * h * w;
    let out_per = co * span;

    let mut dcols = vec![0.0f32; ksz * span];
    let (mut dw, mut db): (Option<&mut [f32]>, Option<&mut [f32]>) = match grads {
        Some(g) => (Some(g.weight.data_mut()), Some(g.bias.data_mut())),
        None => (None, None),
    };

    for ni in 0..n {
        let up = &dout.data()[ni * out_per..(ni + 1) * out_per];
        let col = &cols[ni * ksz * span..(ni + 1) * ksz * span];

        if let (Some(dw), Some(db)) = (dw.as_deref_mut(), db.as_deref_mut()) {
            for o in 0..co {
                let u_row = &up[o * span..(o + 1) * span];
                db[o] += u_row.iter().sum::<f32>();
                let dw_row = &mut dw[o * ksz..(o + 1) * ksz];
                for (k, dwv) in dw_row.iter_mut().enumerate() {
                    let c_row = &col[k * span..(k + 1) * span];
                    let mut acc = 0.0f32;
                    for (a, b) in u_row.iter().zip(c_row) {
                        acc += a * b;
                    }
                    *dwv += acc;
                }
            }
        }

        dcols.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..co {
            let u_row = &up[o * span..(o + 1) * span];
            let w_row = &weight[o * ksz..(o + 1) * ksz];
            for (k, &wv) in w_row.iter().enumerate() {
                if wv != 0.0 {
                    let d_row = &mut dcols[k * span..(k + 1) * span];
                    for (dv, uv) in d_row.iter_mut().zip(u_row) {
                        *dv += wv * uv;
                    }
                }
            }
        }

        col2im_add(
            &dcols,
            &mut dx.data_mut()[ni * in_per..(ni + 1) * in_per],
            ci,
            h,
            w,
            kernel,
            stride,
            pad_h,
            pad_w,
            oh,
            ow,
        );
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    dcols: &[f32],
    img: &mut [f32],
    ci: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    oh: usize,
    ow: usize,
) {
    let span = oh * ow;
    for c in 0..ci {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let k = (c * kernel + ky) * kernel + kx;
                let src = &dcols[k * span..(k + 1) * span];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row = &src[oy * ow..(oy + 1) * ow];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad_w as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn dense_backward(
    x: &Tensor,
    dout: &Tensor,
    pair: &ParamPair,
    grads: Option<&mut ParamPair>,
) -> Tensor {
    let n = x.shape()[0];
    let in_dim = x.shape()[1];
    let out_dim = dout.shape()[1];
    let weight = pair.weight.data();
    let mut dx = Tensor::zeros(x.shape());

    if let Some(g) = grads {
        let dw = g.weight.data_mut();
        let db = g.bias.data_mut();
        for ni in 0..n {
            let u = &dout.data()[ni * out_dim..(ni + 1) * out_dim];
            let row = &x.data()[ni * in_dim..(ni + 1) * in_dim];
            for (o, &uv) in u.iter().enumerate() {
                if uv != 0.0 {
                    db[o] += uv;
                    let dw_row = &mut dw[o * in_dim..(o + 1) * in_dim];
                    for (d, &xv) in dw_row.iter_mut().zip(row) {
                        *d += uv * xv;
                    }
                }
            }
        }
    }

    let dx_data = dx.data_mut();
    for ni in 0..n {
        let u = &dout.data()[ni * out_dim..(ni + 1) * out_dim];
        let dst = &mut dx_data[ni * in_dim..(ni + 1) * in_dim];
        for (o, &uv) in u.iter().enumerate() {
            if uv != 0.0 {
                let w_row = &weight[o * in_dim..(o + 1) * in_dim];
                for (d, &wv) in dst.iter_mut().zip(w_row) {
                    *d += uv * wv;
                }
            }
        }
    }
    dx
}

/// Loss and full gradients for a batch under cross-entropy toward `targets`.
pub fn backward(
    layers: &[LayerSpec],
    params: &[LayerParams],
    input: &Tensor,
    targets: &[usize],
) -> Result<(f32, GradientBundle)> {
    let (logits, trace) = forward_trace(layers, params, input)?;
    let (loss, logit_grad) = softmax_cross_entropy(&logits, targets)?;
    Ok((loss, backprop(layers, params, &trace, &logit_grad, true)))
}

/// Loss and input gradient only; parameter gradients are skipped.
pub fn backward_input(
    layers: &[LayerSpec],
    params: &[LayerParams],
    input: &Tensor,
    targets: &[usize],
) -> Result<(f32, Tensor)> {
    let (logits, trace) = forward_trace(layers, params, input)?;
    let (loss, logit_grad) = softmax_cross_entropy(&logits, targets)?;
    let bundle = backprop(layers, params, &trace, &logit_grad, false);
    Ok((loss, bundle.input_grad))
}

// ---------------------------------------------------------------------------
// Finite-difference checking
// ---------------------------------------------------------------------------

/// f64 shadow evaluation of the loss, written as direct loops (no im2col)
/// so it is an independent oracle for the f32 gradient path.
mod shadow {
    use super::*;

    pub fn loss_f64(
        layers: &[LayerSpec],
        params: &[Vec<f64>],
        input: &[f64],
        input_shape: &[usize],
        targets: &[usize],
    ) -> f64 {
        let n = input_shape[0];
        let shapes = stack_shapes(layers, &input_shape[1..]).expect("shadow shapes");
        let mut act: Vec<f64> = input.to_vec();
        let mut p_iter = 0usize;
        for (i, layer) in layers.iter().enumerate() {
            let in_shape = &shapes[i];
            let out_shape = &shapes[i + 1];
            act = match layer {
                LayerSpec::Conv {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let w = &params[p_iter];
                    let b = &params[p_iter + 1];
                    p_iter += 2;
                    conv_f64(&act, n, in_shape, out_shape, w, b, *kernel, *stride, *padding)
                }
                LayerSpec::Relu => act.iter().map(|&v| v.max(0.0)).collect(),
                LayerSpec::MaxPool { size, stride } => {
                    pool_f64(&act, n, in_shape, out_shape, *size, *stride)
                }
                LayerSpec::Flatten => act,
                LayerSpec::Dense { in_dim, out_dim } => {
                    let w = &params[p_iter];
                    let b = &params[p_iter + 1];
                    p_iter += 2;
                    let mut out = vec![0.0f64; n * out_dim];
                    for ni in 0..n {
                        for o in 0..*out_dim {
                            let mut acc = b[o];
                            for i2 in 0..*in_dim {
                                acc += act[ni * in_dim + i2] * w[o * in_dim + i2];
                            }
                            out[ni * out_dim + o] = acc;
                        }
                    }
                    out
                }
            };
        }
        let c = *shapes.last().unwrap().last().unwrap();
        let mut total = 0.0f64;
        for ni in 0..n {
            let row = &act[ni * c..(ni + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            total += m + denom.ln() - row[targets[ni]];
        }
        total / n as f64
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_f64(
        x: &[f64],
        n: usize,
        in_shape: &[usize],
        out_shape: &[usize],
        w: &[f64],
        b: &[f64],
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Vec<f64> {
        let (ci, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
        let (co, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
        let (pad_h, _, _) = pad_amounts(kernel, stride, h, padding);
        let (pad_w, _, _) = pad_amounts(kernel, stride, wd, padding);
        let mut out = vec![0.0f64; n * co * oh * ow];
        for ni in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[o];
                        for c in 0..ci {
                            for ky in 0..kernel {
                                let iy = (oy * stride + ky) as isize - pad_h as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kernel {
                                    let ix = (ox * stride + kx) as isize - pad_w as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x[((ni * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * w[((o * ci + c) * kernel + ky) * kernel + kx];
                                }
                            }
                        }
                        out[((ni * co + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pool_f64(
        x: &[f64],
        n: usize,
        in_shape: &[usize],
        out_shape: &[usize],
        size: usize,
        stride: usize,
    ) -> Vec<f64> {
        let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        let (oh, ow) = (out_shape[1], out_shape[2]);
        let mut out = vec![0.0f64; n * c * oh * ow];
        for ni in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        for ky in 0..size {
                            for kx in 0..size {
                                let v =
                                    x[((ni * c + ch) * h + oy * stride + ky) * w + ox * stride + kx];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        out[((ni * c + ch) * oh + oy) * ow + ox] = best;
                    }
                }
            }
        }
        out
    }
}

/// Compare analytic gradients against central finite differences of an f64
/// shadow forward, over every input and parameter coordinate.
///
/// Rejects inputs whose relu pre-activations or pool-window runner-up gaps
/// sit within `10 * h` of a kink; callers resample and retry.
pub fn finite_difference_check(
    layers: &[LayerSpec],
    params: &[LayerParams],
    input: &Tensor,
    targets: &[usize],
    h: f64,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::InvalidArgument("step h must be positive".into()));
    }
    check_kink_proximity(layers, params, input, (10.0 * h) as f32)?;

    let (loss32, bundle) = backward(layers, params, input, targets)?;
    if !loss32.is_finite() {
        return Err(Error::NonFinite {
            context: "finite-difference base loss".into(),
        });
    }

    // Flatten parameters in layer order: weight, bias per parameterized layer.
    let mut flat_params: Vec<Vec<f64>> = Vec::new();
    let mut flat_grads: Vec<Vec<f32>> = Vec::new();
    for (slot, grad) in params.iter().zip(&bundle.param_grads) {
        if let (Some(pair), Some(g)) = (slot, grad) {
            flat_params.push(pair.weight.data().iter().map(|&v| v as f64).collect());
            flat_params.push(pair.bias.data().iter().map(|&v| v as f64).collect());
            flat_grads.push(g.weight.data().to_vec());
            flat_grads.push(g.bias.data().to_vec());
        }
    }
    let input64: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();

    let rel_err = |analytic: f64, fd: f64| -> f64 {
        (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8)
    };

    let mut max_err = 0.0f64;
    // Input coordinates.
    {
        let mut probe = input64.clone();
        for (i, g) in bundle.input_grad.data().iter().enumerate() {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = shadow::loss_f64(layers, &flat_params, &probe, input.shape(), targets);
            probe[i] = orig - h;
            let down = shadow::loss_f64(layers, &flat_params, &probe, input.shape(), targets);
            probe[i] = orig;
            max_err = max_err.max(rel_err(*g as f64, (up - down) / (2.0 * h)));
        }
    }
    // Parameter coordinates.
    let mut probe_params = flat_params.clone();
    for (pi, grads) in flat_grads.iter().enumerate() {
        for (i, g) in grads.iter().enumerate() {
            let orig = probe_params[pi][i];
            probe_params[pi][i] = orig + h;
            let up = shadow::loss_f64(layers, &probe_params, &input64, input.shape(), targets);
            probe_params[pi][i] = orig - h;
            let down = shadow::loss_f64(layers, &probe_params, &input64, input.shape(), targets);
            probe_params[pi][i] = orig;
            max_err = max_err.max(rel_err(*g as f64, (up - down) / (2.0 * h)));
        }
    }
    Ok(max_err)
}

fn check_kink_proximity(
    layers: &[LayerSpec],
    params: &[LayerParams],
    input: &Tensor,
    margin: f32,
) -> Result<()> {
    let (_, trace) = forward_trace(layers, params, input)?;
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            LayerSpec::Relu => {
                let pre = &trace.activations[i];
                if let Some(j) = pre.data().iter().position(|v| v.abs() < margin) {
                    return Err(Error::KinkProximity {
                        coordinate: format!("relu layer {i}, element {j}"),
                        margin,
                    });
                }
            }
            LayerSpec::MaxPool { size, stride } => {
                let (size, stride) = (*size, *stride);
                let x = &trace.activations[i];
                let n = x.shape()[0];
                let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let oh = (h - size) / stride + 1;
                let ow = (w - size) / stride + 1;
                for ni in 0..n {
                    for ch in 0..c {
                        let plane = &x.data()[(ni * c + ch) * h * w..(ni * c + ch + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut vals: Vec<f32> = Vec::with_capacity(size * size);
                                for ky in 0..size {
                                    for kx in 0..size {
                                        vals.push(plane[(oy * stride + ky) * w + ox * stride + kx]);
                                    }
                                }
                                vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                                if vals.len() > 1 && (vals[0] - vals[1]).abs() < margin {
                                    return Err(Error::KinkProximity {
                                        coordinate: format!(
                                            "maxpool layer {i}, window ({ni},{ch},{oy},{ox})"
                                        ),
                                        margin,
                                    });
                                }
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_net(w: Vec<f32>, b: Vec<f32>, in_dim: usize, out_dim: usize) -> (Vec<LayerSpec>, Vec<LayerParams>) {
        let layers = vec![LayerSpec::Dense { in_dim, out_dim }];
        let params = vec![Some(ParamPair {
            weight: Tensor::from_vec(&[out_dim, in_dim], w).unwrap(),
            bias: Tensor::from_vec(&[out_dim], b).unwrap(),
        })];
        (layers, params)
    }

    #[test]
    fn dense_identity_maps_input_to_logits() {
        let (layers, params) = dense_net(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        let x = Tensor::from_vec(&[1, 2], vec![0.3, -0.7]).unwrap();
        let logits = forward(&layers, &params, &x).unwrap();
        assert_eq!(logits.shape(), &[1, 2]);
        assert_eq!(logits.data(), x.data());
    }

    #[test]
    fn conv_2x2_hand_oracle() {
        // input [[1,2],[3,4]], kernel [[1,0],[0,1]], stride 1, valid:
        // 1*1 + 2*0 + 3*0 + 4*1 = 5.
        let layers = vec![LayerSpec::Conv {
            in_ch: 1,
            out_ch: 1,
            kernel: 2,
            stride: 1,
            padding: Padding::Valid,
        }];
        let params = vec![Some(ParamPair {
            weight: Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::from_vec(&[1], vec![0.0]).unwrap(),
        })];
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = forward(&layers, &params, &x).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let layers = vec![LayerSpec::Relu];
        let params = vec![None];
        let x = Tensor::from_vec(&[1, 2], vec![-1.0, 2.0]).unwrap();
        let out = forward(&layers, &params, &x).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0]);

        // Upstream [1,1] through relu at x=[-1,2] -> [0,1].
        let (_, trace) = forward_trace(&layers, &params, &x).unwrap();
        let upstream = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let bundle = backprop(&layers, &params, &trace, &upstream, false);
        assert_eq!(bundle.input_grad.data(), &[0.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { in_dim: 3, out_dim: 2 },
        ];
        let params = vec![
            None,
            Some(ParamPair {
                weight: Tensor::zeros(&[2, 3]),
                bias: Tensor::zeros(&[2]),
            }),
        ];
        let x = Tensor::zeros(&[1, 4]);
        match forward(&layers, &params, &x) {
            Err(Error::ShapeMismatch { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_ce_symmetric_logits() {
        let logits = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);
        assert!((grad.data()[0] + 0.5).abs() < 1e-6);
        assert!((grad.data()[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn softmax_ce_confident_logits() {
        // loss = ln(1 + e^-20) ~= 2.0611537e-9, kept by the f64 row math.
        let logits = Tensor::from_vec(&[2], vec![10.0, -10.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(
            (loss - 2.0611537e-9).abs() < 1e-13,
            "loss {loss} should be ~2.0612e-9"
        );
    }

    #[test]
    fn softmax_ce_shift_invariance_and_grad_sum() {
        let logits = Tensor::from_vec(&[3], vec![0.2, -1.3, 0.9]).unwrap();
        let shifted = Tensor::from_vec(&[3], vec![5.2, 3.7, 5.9]).unwrap();
        let (l0, g0) = softmax_cross_entropy(&logits, &[1]).unwrap();
        let (l1, g1) = softmax_cross_entropy(&shifted, &[1]).unwrap();
        assert!((l0 - l1).abs() < 1e-6);
        for (a, b) in g0.data().iter().zip(g1.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let sum: f32 = g0.data().iter().sum();
        assert!(sum.abs() < 1e-6);
    }

    #[test]
    fn softmax_ce_rejects_out_of_range_target() {
        let logits = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        assert!(softmax_cross_entropy(&logits, &[2]).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_composes() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let layers = vec![
            LayerSpec::Conv {
                in_ch: 1,
                out_ch: 2,
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { in_dim: 32, out_dim: 3 },
        ];
        let params = vec![
            Some(ParamPair {
                weight: Tensor::from_vec(
                    &[2, 1, 3, 3],
                    (0..18).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                )
                .unwrap(),
                bias: Tensor::from_vec(&[2], vec![0.1, -0.1]).unwrap(),
            }),
            None,
            None,
            Some(ParamPair {
                weight: Tensor::from_vec(
                    &[3, 32],
                    (0..96).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                )
                .unwrap(),
                bias: Tensor::zeros(&[3]),
            }),
        ];
        let x = Tensor::from_vec(&[2, 1, 4, 4], (0..32).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap();

        let a = forward(&layers, &params, &x).unwrap();
        let b = forward(&layers, &params, &x).unwrap();
        assert_eq!(a, b, "bitwise deterministic");

        // Composition: running [A,B] equals running B on A's output.
        let first = forward(&layers[..2], &params[..2], &x).unwrap();
        let second = forward(&layers[2..], &params[2..], &first).unwrap();
        assert_eq!(a, second, "layer composition is bitwise associative");
    }

    #[test]
    fn fd_check_affine_network_is_tight() {
        // No relu/maxpool: loss is smooth, so central differences are
        // accurate to O(h^2) and the f64 oracle keeps noise far below 1e-6.
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { in_dim: 8, out_dim: 3 },
        ];
        let params = vec![
            None,
            Some(ParamPair {
                weight: Tensor::from_vec(&[3, 8], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap(),
                bias: Tensor::from_vec(&[3], vec![0.2, -0.4, 0.1]).unwrap(),
            }),
        ];
        let x = Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let err = finite_difference_check(&layers, &params, &x, &[1], 1e-3).unwrap();
        assert!(err < 1e-6, "affine fd error {err}");
    }

    #[test]
    fn fd_check_rejects_zero_step() {
        let layers = vec![LayerSpec::Flatten, LayerSpec::Dense { in_dim: 4, out_dim: 2 }];
        let params = vec![
            None,
            Some(ParamPair {
                weight: Tensor::zeros(&[2, 4]),
                bias: Tensor::zeros(&[2]),
            }),
        ];
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(finite_difference_check(&layers, &params, &x, &[0], 0.0).is_err());
    }
}
