//! Batched forward and reverse passes for the fixed layer set.
//!
//! Activations are stored batch-major: example `e` occupies
//! `act[e * len .. (e + 1) * len]`, with images laid out channel, row, column.

use rand::Rng;

use super::params::ModelParams;
use super::spec::{FeatureShape, Layer, NetworkSpec};
use crate::datasets::LabeledExample;
use crate::error::{Error, Result};

/// Inverted-dropout masks for one example: one vector per dropout layer, in
/// layer order, with entries in `{0, 1 / (1 - rate)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub layers: Vec<Vec<f64>>,
}

impl DropoutMask {
    fn matches(&self, spec: &NetworkSpec, shapes: &[FeatureShape]) -> bool {
        let expected: Vec<usize> = spec
            .layers
            .iter()
            .zip(shapes)
            .filter(|(l, _)| matches!(l, Layer::Dropout { .. }))
            .map(|(_, s)| s.len())
            .collect();
        expected.len() == self.layers.len()
            && expected
                .iter()
                .zip(&self.layers)
                .all(|(n, m)| *n == m.len())
    }
}

/// Draws a mask for every dropout layer of `spec`, keeping each unit with
/// probability `1 - rate`.
pub fn sample_dropout_mask<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    rate: f64,
    rng: &mut R,
) -> Result<DropoutMask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    let shapes = spec.shapes()?;
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let layers = spec
        .layers
        .iter()
        .zip(&shapes)
        .filter(|(l, _)| matches!(l, Layer::Dropout { .. }))
        .map(|(_, s)| {
            (0..s.len())
                .map(|_| {
                    if rate == 0.0 || rng.random::<f64>() < keep {
                        scale
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    Ok(DropoutMask { layers })
}

/// Logits for a single input. Without a mask, dropout layers are the identity.
pub fn forward(
    params: &ModelParams,
    spec: &NetworkSpec,
    input: &[f64],
    mask: Option<&DropoutMask>,
) -> Result<Vec<f64>> {
    let masks = mask.map(std::slice::from_ref);
    forward_batch(params, spec, input, 1, masks)
}

/// Logits for `n` inputs stored back to back; returns `n * num_classes` values.
pub fn forward_batch(
    params: &ModelParams,
    spec: &NetworkSpec,
    inputs: &[f64],
    n: usize,
    masks: Option<&[DropoutMask]>,
) -> Result<Vec<f64>> {
    let plan = Plan::new(params, spec, inputs, n, masks)?;
    Ok(plan.run(params, inputs, masks, false).0)
}

/// Soft-label cross-entropy `-sum_k y_k log softmax(logits)_k`.
pub fn soft_cross_entropy(logits: &[f64], soft_label: &[f64]) -> Result<f64> {
    if logits.len() != soft_label.len() {
        return Err(Error::InvalidLabel(format!(
            "label has {} entries for {} logits",
            soft_label.len(),
            logits.len()
        )));
    }
    crate::datasets::check_simplex(soft_label)?;
    Ok(cross_entropy_unchecked(logits, soft_label))
}

pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

fn cross_entropy_unchecked(logits: &[f64], label: &[f64]) -> f64 {
    let lse = log_sum_exp(logits);
    logits
        .iter()
        .zip(label)
        .filter(|(_, &y)| y != 0.0)
        .map(|(&l, &y)| y * (lse - l))
        .sum()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Gradient of `sum_i w_i * soft_cross_entropy(forward(x_i), y_i)`.
pub fn grad(
    params: &ModelParams,
    spec: &NetworkSpec,
    batch: &[(LabeledExample, f64)],
) -> Result<ModelParams> {
    if batch.is_empty() {
        return Ok(ModelParams::zeros(spec));
    }
    let d = spec.input.len();
    let k = spec.num_classes;
    let mut inputs = Vec::with_capacity(batch.len() * d);
    let mut labels = Vec::with_capacity(batch.len() * k);
    let mut weights = Vec::with_capacity(batch.len());
    for (ex, w) in batch {
        if *w < 0.0 {
            return Err(Error::invalid(format!("negative loss weight {w}")));
        }
        if ex.label.len() != k {
            return Err(Error::InvalidLabel(format!(
                "label has {} entries, network has {k} classes",
                ex.label.len()
            )));
        }
        crate::datasets::check_simplex(&ex.label)?;
        inputs.extend_from_slice(&ex.features);
        labels.extend_from_slice(&ex.label);
        weights.push(*w);
    }
    Ok(loss_and_grad(params, spec, &inputs, &labels, &weights, None)?.1)
}

/// Weighted loss `sum_i w_i * ce_i` and its gradient for a batch stored back
/// to back. Labels are trusted to lie on the simplex.
pub fn loss_and_grad(
    params: &ModelParams,
    spec: &NetworkSpec,
    inputs: &[f64],
    labels: &[f64],
    weights: &[f64],
    masks: Option<&[DropoutMask]>,
) -> Result<(f64, ModelParams)> {
    let n = weights.len();
    let k = spec.num_classes;
    if labels.len() != n * k {
        return Err(Error::invalid(format!(
            "expected {} label entries, got {}",
            n * k,
            labels.len()
        )));
    }
    if n == 0 {
        return Ok((0.0, ModelParams::zeros(spec)));
    }
    let plan = Plan::new(params, spec, inputs, n, masks)?;
    let (logits, tape) = plan.run(params, inputs, masks, true);
    let tape = tape.expect("tape requested");

    let mut loss = 0.0;
    let mut dlogits = vec![0.0; n * k];
    for e in 0..n {
        let l = &logits[e * k..(e + 1) * k];
        let y = &labels[e * k..(e + 1) * k];
        let w = weights[e];
        loss += w * cross_entropy_unchecked(l, y);
        let p = softmax(l);
        let ysum: f64 = y.iter().sum();
        for j in 0..k {
            dlogits[e * k + j] = w * (ysum * p[j] - y[j]);
        }
    }
    let grads = plan.backward(params, tape, dlogits, masks);
    Ok((loss, grads))
}

enum Aux {
    None,
    Cols(Vec<f64>),
    PoolIdx(Vec<u32>),
}

struct Tape {
    /// `acts[i]` is the input to layer `i`.
    acts: Vec<Vec<f64>>,
    aux: Vec<Aux>,
}

struct Plan<'a> {
    spec: &'a NetworkSpec,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the output.
    shapes: Vec<FeatureShape>,
    /// Index of the weight tensor for each parametric layer.
    param_index: Vec<Option<usize>>,
    n: usize,
}

impl<'a> Plan<'a> {
    fn new(
        params: &ModelParams,
        spec: &'a NetworkSpec,
        inputs: &[f64],
        n: usize,
        masks: Option<&[DropoutMask]>,
    ) -> Result<Self> {
        spec.validate()?;
        if !params.matches(spec) {
            return Err(Error::invalid(
                "parameter shapes do not match the network spec",
            ));
        }
        let d = spec.input.len();
        if inputs.len() != n * d {
            return Err(Error::Shape {
                layer: 0,
                kind: spec.layers[0].name(),
                detail: format!(
                    "expected {n} inputs of length {d} ({} values), got {}",
                    n * d,
                    inputs.len()
                ),
            });
        }
        let mut shapes = vec![spec.input];
        shapes.extend(spec.shapes()?);
        if let Some(m) = masks {
            if m.len() != n {
                return Err(Error::invalid(format!(
                    "{} dropout masks for a batch of {n}",
                    m.len()
                )));
            }
            if let Some(bad) = m.iter().position(|m| !m.matches(spec, &shapes[1..])) {
                return Err(Error::invalid(format!(
                    "dropout mask {bad} does not match the network's dropout layers"
                )));
            }
        }
        let mut param_index = Vec::with_capacity(spec.layers.len());
        let mut t = 0;
        for layer in &spec.layers {
            if layer.has_params() {
                param_index.push(Some(t));
                t += 1 + usize::from(layer.has_bias());
            } else {
                param_index.push(None);
            }
        }
        Ok(Plan {
            spec,
            shapes,
            param_index,
            n,
        })
    }

    fn run(
        &self,
        params: &ModelParams,
        inputs: &[f64],
        masks: Option<&[DropoutMask]>,
        keep_tape: bool,
    ) -> (Vec<f64>, Option<Tape>) {
        let n = self.n;
        let mut acts = Vec::new();
        let mut aux = Vec::new();
        let mut cur = inputs.to_vec();
        let mut dropout_idx = 0;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let in_shape = self.shapes[i];
            let out_shape = self.shapes[i + 1];
            let (next, extra) = match *layer {
                Layer::Dense {
                    inputs: din,
                    outputs: dout,
                    ..
                } => {
                    let t = self.param_index[i].unwrap();
                    let w = &params.tensors[t].data;
                    let mut out = vec![0.0; n * dout];
                    if let Some(b) = layer.has_bias().then(|| &params.tensors[t + 1].data) {
                        for row in out.chunks_exact_mut(dout) {
                            row.copy_from_slice(b);
                        }
                    }
                    // out[n x dout] += x[n x din] * W^T
                    gemm(
                        n, din, dout, &cur, din, 1, w, 1, din, &mut out, dout, 1, 1.0,
                    );
                    (out, Aux::None)
                }
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let (h, w) = hw(in_shape);
                    let (oh, ow) = hw(out_shape);
                    let ckk = in_channels * kernel * kernel;
                    let p = oh * ow;
                    let t = self.param_index[i].unwrap();
                    let weight = &params.tensors[t].data;
                    let bias = layer.has_bias().then(|| &params.tensors[t + 1].data);
                    let in_len = in_channels * h * w;
                    let mut cols = vec![0.0; n * ckk * p];
                    let mut out = vec![0.0; n * out_channels * p];
                    for e in 0..n {
                        let x = &cur[e * in_len..(e + 1) * in_len];
                        let c = &mut cols[e * ckk * p..(e + 1) * ckk * p];
                        im2col(x, in_channels, h, w, kernel, oh, ow, c);
                        let o = &mut out[e * out_channels * p..(e + 1) * out_channels * p];
                        if let Some(b) = bias {
                            for (row, &bv) in o.chunks_exact_mut(p).zip(b.iter()) {
                                row.fill(bv);
                            }
                        }
                        gemm(out_channels, ckk, p, weight, ckk, 1, c, p, 1, o, p, 1, 1.0);
                    }
                    (
                        out,
                        if keep_tape {
                            Aux::Cols(cols)
                        } else {
                            Aux::None
                        },
                    )
                }
                Layer::MaxPool2x2 => {
                    let (c, h, w) = chw(in_shape);
                    let (oh, ow) = hw(out_shape);
                    let in_len = c * h * w;
                    let out_len = c * oh * ow;
                    let mut out = vec![0.0; n * out_len];
                    let mut idx = vec![0u32; n * out_len];
                    for e in 0..n {
                        let x = &cur[e * in_len..(e + 1) * in_len];
                        for ch in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut best = ch * h * w + 2 * oy * w + 2 * ox;
                                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                        let j = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                                        if x[j] > x[best] {
                                            best = j;
                                        }
                                    }
                                    let o = e * out_len + ch * oh * ow + oy * ow + ox;
                                    out[o] = x[best];
                                    idx[o] = best as u32;
                                }
                            }
                        }
                    }
                    (
                        out,
                        if keep_tape {
                            Aux::PoolIdx(idx)
                        } else {
                            Aux::None
                        },
                    )
                }
                Layer::Relu => (cur.iter().map(|&v| v.max(0.0)).collect(), Aux::None),
                Layer::Flatten => (cur.clone(), Aux::None),
                Layer::Dropout { .. } => {
                    let mut out = cur.clone();
                    if let Some(masks) = masks {
                        let len = in_shape.len();
                        for (e, m) in masks.iter().enumerate() {
                            let mask = &m.layers[dropout_idx];
                            for (v, &s) in out[e * len..(e + 1) * len].iter_mut().zip(mask) {
                                *v *= s;
                            }
                        }
                    }
                    dropout_idx += 1;
                    (out, Aux::None)
                }
            };
            if keep_tape {
                acts.push(std::mem::replace(&mut cur, next));
                aux.push(extra);
            } else {
                cur = next;
            }
        }
        let tape = keep_tape.then_some(Tape { acts, aux });
        (cur, tape)
    }

    fn backward(
        &self,
        params: &ModelParams,
        tape: Tape,
        mut delta: Vec<f64>,
        masks: Option<&[DropoutMask]>,
    ) -> ModelParams {
        let n = self.n;
        let mut grads = ModelParams::zeros(self.spec);
        let mut dropout_idx = self
            .spec
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Dropout { .. }))
            .count();
        let Tape { acts, aux } = tape;
        for (i, layer) in self.spec.layers.iter().enumerate().rev() {
            let in_shape = self.shapes[i];
            let out_shape = self.shapes[i + 1];
            let x = &acts[i];
            let need_input_grad = i > 0;
            delta = match *layer {
                Layer::Dense {
                    inputs: din,
                    outputs: dout,
                    ..
                } => {
                    let t = self.param_index[i].unwrap();
                    // dW[dout x din] = delta^T * x
                    gemm(
                        dout,
                        n,
                        din,
                        &delta,
                        1,
                        dout,
                        x,
                        din,
                        1,
                        &mut grads.tensors[t].data,
                        din,
                        1,
                        0.0,
                    );
                    if layer.has_bias() {
                        let db = &mut grads.tensors[t + 1].data;
                        for row in delta.chunks_exact(dout) {
                            for (g, &d) in db.iter_mut().zip(row) {
                                *g += d;
                            }
                        }
                    }
                    if need_input_grad {
                        let mut dx = vec![0.0; n * din];
                        gemm(
                            n,
                            dout,
                            din,
                            &delta,
                            dout,
                            1,
                            &params.tensors[t].data,
                            din,
                            1,
                            &mut dx,
                            din,
                            1,
                            0.0,
                        );
                        dx
                    } else {
                        Vec::new()
                    }
                }
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let (h, w) = hw(in_shape);
                    let (oh, ow) = hw(out_shape);
                    let ckk = in_channels * kernel * kernel;
                    let p = oh * ow;
                    let t = self.param_index[i].unwrap();
                    let Aux::Cols(cols) = &aux[i] else {
                        unreachable!("conv layers record their columns")
                    };
                    let weight = &params.tensors[t].data;
                    let in_len = in_channels * h * w;
                    let mut dx = if need_input_grad {
                        vec![0.0; n * in_len]
                    } else {
                        Vec::new()
                    };
                    let mut dcols = vec![0.0; ckk * p];
                    for e in 0..n {
                        let d = &delta[e * out_channels * p..(e + 1) * out_channels * p];
                        let c = &cols[e * ckk * p..(e + 1) * ckk * p];
                        // dW[o x ckk] += d[o x p] * c^T
                        gemm(
                            out_channels,
                            p,
                            ckk,
                            d,
                            p,
                            1,
                            c,
                            1,
                            p,
                            &mut grads.tensors[t].data,
                            ckk,
                            1,
                            1.0,
                        );
                        if layer.has_bias() {
                            let db = &mut grads.tensors[t + 1].data;
                            for (g, row) in db.iter_mut().zip(d.chunks_exact(p)) {
                                *g += row.iter().sum::<f64>();
                            }
                        }
                        if need_input_grad {
                            // dcols[ckk x p] = W^T * d
                            gemm(
                                ckk,
                                out_channels,
                                p,
                                weight,
                                1,
                                ckk,
                                d,
                                p,
                                1,
                                &mut dcols,
                                p,
                                1,
                                0.0,
                            );
                            col2im(
                                &dcols,
                                in_channels,
                                h,
                                w,
                                kernel,
                                oh,
                                ow,
                                &mut dx[e * in_len..(e + 1) * in_len],
                            );
                        }
                    }
                    dx
                }
                Layer::MaxPool2x2 => {
                    let Aux::PoolIdx(idx) = &aux[i] else {
                        unreachable!("pool layers record their argmax")
                    };
                    let in_len = in_shape.len();
                    let out_len = out_shape.len();
                    let mut dx = vec![0.0; n * in_len];
                    for e in 0..n {
                        for o in 0..out_len {
                            let j = idx[e * out_len + o] as usize;
                            dx[e * in_len + j] += delta[e * out_len + o];
                        }
                    }
                    dx
                }
                Layer::Relu => {
                    for (d, &v) in delta.iter_mut().zip(x) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    delta
                }
                Layer::Flatten => delta,
                Layer::Dropout { .. } => {
                    dropout_idx -= 1;
                    if let Some(masks) = masks {
                        let len = in_shape.len();
                        for (e, m) in masks.iter().enumerate() {
                            for (d, &s) in delta[e * len..(e + 1) * len]
                                .iter_mut()
                                .zip(&m.layers[dropout_idx])
                            {
                                *d *= s;
                            }
                        }
                    }
                    delta
                }
            };
        }
        grads
    }
}

fn hw(s: FeatureShape) -> (usize, usize) {
    let (_, h, w) = chw(s);
    (h, w)
}

fn chw(s: FeatureShape) -> (usize, usize, usize) {
    match s {
        FeatureShape::Image {
            channels,
            height,
            width,
        } => (channels, height, width),
        FeatureShape::Flat { dim } => (1, 1, dim),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let p = oh * ow;
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let src = c * h * w + (oy + ky) * w + kx;
                    dst[oy * ow..(oy + 1) * ow].copy_from_slice(&x[src..src + ow]);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let p = oh * ow;
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let dst = c * h * w + (oy + ky) * w + kx;
                    for (d, &s) in dx[dst..dst + ow]
                        .iter_mut()
                        .zip(&src[oy * ow..(oy + 1) * ow])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `C[m x n] = A[m x k] * B[k x n] + beta * C` with arbitrary row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
