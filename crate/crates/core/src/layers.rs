//! Forward and backward kernels for every layer used by the two networks.
//!
//! Backward kernels accumulate into `weight_grad`/`bias_grad`; callers zero
//! them once per optimizer cycle via [`LayerParams::zero_grad`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Trainable weights and bias of one layer, with gradients of the same shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub weight_grad: Tensor<T>,
    pub bias_grad: Tensor<T>,
    grad_ready: bool,
}

impl<T: Scalar> LayerParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Self {
        let weight_grad = Tensor::zeros(weights.shape());
        let bias_grad = Tensor::zeros(bias.shape());
        Self {
            weights,
            bias,
            weight_grad,
            bias_grad,
            grad_ready: false,
        }
    }

    /// He-uniform conv kernel `[out, in, k, k]` with zero bias.
    pub fn conv<R: Rng + ?Sized>(out_ch: usize, in_ch: usize, kernel: usize, rng: &mut R) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weights = he_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng);
        Self::new(weights, Tensor::zeros(&[out_ch]))
    }

    /// He-uniform dense weights `[inputs, units]` with zero bias.
    pub fn dense<R: Rng + ?Sized>(inputs: usize, units: usize, rng: &mut R) -> Self {
        let weights = he_uniform(&[inputs, units], inputs, rng);
        Self::new(weights, Tensor::zeros(&[units]))
    }

    pub fn zero_grad(&mut self) {
        self.weight_grad.fill(T::zero());
        self.bias_grad.fill(T::zero());
        self.grad_ready = false;
    }

    /// True once a backward pass has written gradients since the last reset.
    pub fn grad_ready(&self) -> bool {
        self.grad_ready
    }

    pub fn mark_grad_ready(&mut self) {
        self.grad_ready = true;
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        LayerParams {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
            weight_grad: self.weight_grad.cast(),
            bias_grad: self.bias_grad.cast(),
            grad_ready: self.grad_ready,
        }
    }
}

fn he_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}

fn conv_geometry(
    input: &[usize],
    weights: &[usize],
    bias: &[usize],
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    let op = "conv2d";
    let (&[_, c, h, w], &[f, wc, kh, kw]) = (input, weights) else {
        return Err(Error::ShapeMismatch {
            op,
            expected: "input (B, C, H, W) and kernel (F, C, K, K)".into(),
            found: format!("input {input:?}, kernel {weights:?}"),
        });
    };
    if c != wc || kh != kw {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("square kernel with {c} input channels"),
            found: format!("input {input:?}, kernel {weights:?}"),
        });
    }
    if bias != [f] {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("bias [{f}]"),
            found: format!("{bias:?}"),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("padded input at least {kh}×{kw}"),
            found: format!("input {input:?} with padding {padding}"),
        });
    }
    Ok(((h + 2 * padding - kh) / stride + 1, (w + 2 * padding - kw) / stride + 1))
}

struct ConvDims {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[ox_lo, ox_hi)` whose input column lands inside the image.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let (pad, w, stride) = (self.pad as isize, self.w as isize, self.stride as isize);
        let kx = kx as isize;
        let lo = ((pad - kx).max(0) + stride - 1) / stride;
        let hi = ((w + pad - kx + stride - 1) / stride).clamp(0, self.wo as isize);
        (lo as usize, (hi.max(lo)) as usize)
    }
}

fn im2col<T: Scalar>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let plane = d.ho * d.wo;
    for ci in 0..d.c {
        let src_plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (ci * d.k + ky) * d.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = d.valid_ox(kx);
                for oy in 0..d.ho {
                    let out_row = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src_plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if d.stride == 1 {
                        let start = lo + kx - d.pad;
                        out_row[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                    } else {
                        for (ox, v) in out_row.iter_mut().enumerate().take(hi).skip(lo) {
                            *v = src_row[ox * d.stride + kx - d.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], d: &ConvDims, dx: &mut [T]) {
    let plane = d.ho * d.wo;
    for ci in 0..d.c {
        let dst_plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (ci * d.k + ky) * d.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = d.valid_ox(kx);
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst_plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let src_row = &src[oy * d.wo..(oy + 1) * d.wo];
                    for ox in lo..hi {
                        dst_row[ox * d.stride + kx - d.pad] += src_row[ox];
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of a (B, C, H, W) input with (F, C, K, K) kernels.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (ho, wo) = conv_geometry(
        input.shape(),
        params.weights.shape(),
        params.bias.shape(),
        stride,
        padding,
    )?;
    let (b, c, h, w) = input.dims4("conv2d")?;
    let f = params.weights.shape()[0];
    let d = ConvDims {
        c,
        h,
        w,
        k: params.weights.shape()[2],
        stride,
        pad: padding,
        ho,
        wo,
    };
    let plane = ho * wo;
    let rows = d.col_rows();
    let mut out = Tensor::zeros(&[b, f, ho, wo]);
    let mut cols = if d.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    let in_stride = c * h * w;
    for bi in 0..b {
        let x = &input.data()[bi * in_stride..(bi + 1) * in_stride];
        let lhs: &[T] = if d.is_pointwise() {
            x
        } else {
            im2col(x, &d, &mut cols);
            &cols
        };
        let y = &mut out.data_mut()[bi * f * plane..(bi + 1) * f * plane];
        T::gemm(
            f,
            rows,
            plane,
            T::one(),
            params.weights.data(),
            (rows as isize, 1),
            lhs,
            (plane as isize, 1),
            T::zero(),
            y,
            (plane as isize, 1),
        );
        for (fi, &bias) in params.bias.data().iter().enumerate() {
            y[fi * plane..(fi + 1) * plane].iter_mut().for_each(|v| *v += bias);
        }
    }
    Ok(out)
}

/// Backward pass of [`conv2d_forward`]; accumulates parameter gradients and
/// returns the gradient with respect to `input`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &mut LayerParams<T>,
    upstream_grad: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    conv2d_backward_with(input, params, upstream_grad, stride, padding, true)
        .map(|g| g.expect("input gradient requested"))
}

/// As [`conv2d_backward`], skipping the input gradient when `want_input_grad`
/// is false (first layer of a network).
pub fn conv2d_backward_with<T: Scalar>(
    input: &Tensor<T>,
    params: &mut LayerParams<T>,
    upstream_grad: &Tensor<T>,
    stride: usize,
    padding: usize,
    want_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    let (ho, wo) = conv_geometry(
        input.shape(),
        params.weights.shape(),
        params.bias.shape(),
        stride,
        padding,
    )?;
    let (b, c, h, w) = input.dims4("conv2d_backward")?;
    let f = params.weights.shape()[0];
    if upstream_grad.shape() != [b, f, ho, wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream {:?}", [b, f, ho, wo]),
            upstream_grad.shape(),
        ));
    }
    let d = ConvDims {
        c,
        h,
        w,
        k: params.weights.shape()[2],
        stride,
        pad: padding,
        ho,
        wo,
    };
    let plane = ho * wo;
    let rows = d.col_rows();
    let in_stride = c * h * w;
    let mut cols = if d.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    let mut dcols = vec![T::zero(); rows * plane];
    let mut dx = want_input_grad.then(|| Tensor::zeros(input.shape()));
    let mut bias_acc = vec![0.0f64; f];

    for bi in 0..b {
        let x = &input.data()[bi * in_stride..(bi + 1) * in_stride];
        let dy = &upstream_grad.data()[bi * f * plane..(bi + 1) * f * plane];
        let col_view: &[T] = if d.is_pointwise() {
            x
        } else {
            im2col(x, &d, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        T::gemm(
            f,
            plane,
            rows,
            T::one(),
            dy,
            (plane as isize, 1),
            col_view,
            (1, plane as isize),
            T::one(),
            params.weight_grad.data_mut(),
            (rows as isize, 1),
        );
        for (fi, acc) in bias_acc.iter_mut().enumerate() {
            *acc += dy[fi * plane..(fi + 1) * plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        if let Some(dx) = dx.as_mut() {
            let dx_item = &mut dx.data_mut()[bi * in_stride..(bi + 1) * in_stride];
            if d.is_pointwise() {
                // dX = Wᵀ · dY directly
                T::gemm(
                    rows,
                    f,
                    plane,
                    T::one(),
                    params.weights.data(),
                    (1, rows as isize),
                    dy,
                    (plane as isize, 1),
                    T::zero(),
                    dx_item,
                    (plane as isize, 1),
                );
            } else {
                T::gemm(
                    rows,
                    f,
                    plane,
                    T::one(),
                    params.weights.data(),
                    (1, rows as isize),
                    dy,
                    (plane as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (plane as isize, 1),
                );
                col2im(&dcols, &d, dx_item);
            }
        }
    }
    for (g, acc) in params.bias_grad.data_mut().iter_mut().zip(bias_acc) {
        *g += T::from_f64_lossy(acc);
    }
    params.mark_grad_ready();
    Ok(dx)
}

/// Argmax positions recorded by [`maxpool2_forward`], as flat indices into
/// the pooled input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    indices: Vec<u32>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.indices
    }
}

/// 2×2 max pooling with stride 2. Ties go to the first position in row-major
/// window order.
pub fn maxpool2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (b, c, h, w) = input.dims4("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("maxpool2", "even spatial extents", input.shape()));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let mut indices = vec![0u32; b * c * ho * wo];
    let x = input.data();
    let y = out.data_mut();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                let o = plane * ho * wo + oy * wo + ox;
                y[o] = x[best];
                indices[o] = best as u32;
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            indices,
        },
    ))
}

pub fn maxpool2_backward<T: Scalar>(
    indices: &PoolIndices,
    upstream_grad: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if indices.input_shape != input_shape {
        return Err(Error::shape(
            "maxpool2_backward",
            format!("input shape {:?}", indices.input_shape),
            input_shape,
        ));
    }
    if upstream_grad.len() != indices.indices.len() {
        return Err(Error::shape(
            "maxpool2_backward",
            format!("{} upstream values", indices.indices.len()),
            upstream_grad.shape(),
        ));
    }
    let mut dx = Tensor::zeros(input_shape);
    let g = dx.data_mut();
    for (&idx, &up) in indices.indices.iter().zip(upstream_grad.data()) {
        g[idx as usize] += up;
    }
    Ok(dx)
}

fn dense_geometry(input: &Tensor<impl Scalar>, params: &LayerParams<impl Scalar>) -> Result<(usize, usize, usize)> {
    let batch = input.shape()[0];
    let features = input.len() / batch;
    let (fin, units) = match *params.weights.shape() {
        [fin, units] => (fin, units),
        _ => return Err(Error::shape("dense", "weights (F, U)", params.weights.shape())),
    };
    if features != fin {
        return Err(Error::ShapeMismatch {
            op: "dense",
            expected: format!("{fin} input features (weights {:?})", params.weights.shape()),
            found: format!("input {:?}", input.shape()),
        });
    }
    if params.bias.shape() != [units] {
        return Err(Error::shape("dense", format!("bias [{units}]"), params.bias.shape()));
    }
    Ok((batch, fin, units))
}

/// `input·weights + bias`; any input rank is flattened to B×F.
pub fn dense_forward<T: Scalar>(input: &Tensor<T>, params: &LayerParams<T>) -> Result<Tensor<T>> {
    let (batch, fin, units) = dense_geometry(input, params)?;
    let mut out = Tensor::zeros(&[batch, units]);
    for row in out.data_mut().chunks_mut(units) {
        row.copy_from_slice(params.bias.data());
    }
    T::gemm(
        batch,
        fin,
        units,
        T::one(),
        input.data(),
        (fin as isize, 1),
        params.weights.data(),
        (units as isize, 1),
        T::one(),
        out.data_mut(),
        (units as isize, 1),
    );
    Ok(out)
}

/// Returns the input gradient, shaped like `input`.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &mut LayerParams<T>,
    upstream_grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (batch, fin, units) = dense_geometry(input, params)?;
    if upstream_grad.shape() != [batch, units] {
        return Err(Error::shape(
            "dense_backward",
            format!("upstream {:?}", [batch, units]),
            upstream_grad.shape(),
        ));
    }
    // dW += Xᵀ · dY
    T::gemm(
        fin,
        batch,
        units,
        T::one(),
        input.data(),
        (1, fin as isize),
        upstream_grad.data(),
        (units as isize, 1),
        T::one(),
        params.weight_grad.data_mut(),
        (units as isize, 1),
    );
    for (u, g) in params.bias_grad.data_mut().iter_mut().enumerate() {
        let col: f64 = (0..batch).map(|bi| upstream_grad.data()[bi * units + u].as_f64()).sum();
        *g += T::from_f64_lossy(col);
    }
    // dX = dY · Wᵀ
    let mut dx = Tensor::zeros(input.shape());
    T::gemm(
        batch,
        units,
        fin,
        T::one(),
        upstream_grad.data(),
        (units as isize, 1),
        params.weights.data(),
        (1, units as isize),
        T::zero(),
        dx.data_mut(),
        (fin as isize, 1),
    );
    params.mark_grad_ready();
    Ok(dx)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `upstream` where `input > 0`; the gradient at exactly 0 is 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != upstream.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?}", input.shape()),
            upstream.shape(),
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data)
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Backward of [`sigmoid`] given its forward output.
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != upstream.shape() {
        return Err(Error::shape(
            "sigmoid_backward",
            format!("{:?}", output.shape()),
            upstream.shape(),
        ));
    }
    let data = output
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor::new(output.shape(), data)
}

/// Per-element multiplier applied by inverted dropout (0 or 1/(1-rate)).
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask<T = f32> {
    scale: Vec<T>,
}

impl<T: Scalar> DropoutMask<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.scale
    }

    pub fn survivors(&self) -> usize {
        self.scale.iter().filter(|v| **v != T::zero()).count()
    }
}

/// Inverted dropout; identity when `training` is false.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<(Tensor<T>, DropoutMask<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok((
            input.clone(),
            DropoutMask {
                scale: vec![T::one(); input.len()],
            },
        ));
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let scale: Vec<T> = (0..input.len())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let data = input.data().iter().zip(&scale).map(|(&x, &s)| x * s).collect();
    Ok((Tensor::new(input.shape(), data)?, DropoutMask { scale }))
}

pub fn dropout_backward<T: Scalar>(mask: &DropoutMask<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if mask.scale.len() != upstream.len() {
        return Err(Error::shape(
            "dropout_backward",
            format!("{} values", mask.scale.len()),
            upstream.shape(),
        ));
    }
    let data = upstream.data().iter().zip(&mask.scale).map(|(&g, &s)| g * s).collect();
    Tensor::new(upstream.shape(), data)
}

/// 2× nearest-neighbour upsampling of a (B, C, H, W) tensor.
pub fn upsample2_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4("upsample2")?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[b, c, h2, w2]);
    let x = input.data();
    let y = out.data_mut();
    for plane in 0..b * c {
        for oy in 0..h2 {
            let src = &x[plane * h * w + (oy / 2) * w..plane * h * w + (oy / 2 + 1) * w];
            let dst = &mut y[plane * h2 * w2 + oy * w2..plane * h2 * w2 + (oy + 1) * w2];
            for (ox, v) in dst.iter_mut().enumerate() {
                *v = src[ox / 2];
            }
        }
    }
    Ok(out)
}

pub fn upsample2_backward<T: Scalar>(upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h2, w2) = upstream.dims4("upsample2_backward")?;
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::shape(
            "upsample2_backward",
            "even spatial extents",
            upstream.shape(),
        ));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[b, c, h, w]);
    let g = upstream.data();
    let d = dx.data_mut();
    for plane in 0..b * c {
        for oy in 0..h2 {
            for ox in 0..w2 {
                d[plane * h * w + (oy / 2) * w + ox / 2] += g[plane * h2 * w2 + oy * w2 + ox];
            }
        }
    }
    Ok(dx)
}

/// Concatenates two (B, ·, H, W) tensors along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, ca, ha, wa) = a.dims4("concat_channels")?;
    let (bb, cb, hb, wb) = b.dims4("concat_channels")?;
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            expected: format!("batch and spatial extents of {:?}", a.shape()),
            found: format!("{:?}", b.shape()),
        });
    }
    let (sa, sb) = (ca * ha * wa, cb * hb * wb);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..ba {
        data.extend_from_slice(&a.data()[i * sa..(i + 1) * sa]);
        data.extend_from_slice(&b.data()[i * sb..(i + 1) * sb]);
    }
    Tensor::new(&[ba, ca + cb, ha, wa], data)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = grad.dims4("split_channels")?;
    if first == 0 || first >= c {
        return Err(Error::shape(
            "split_channels",
            format!("more than {first} channels"),
            grad.shape(),
        ));
    }
    let second = c - first;
    let plane = h * w;
    let mut a = Vec::with_capacity(b * first * plane);
    let mut s = Vec::with_capacity(b * second * plane);
    for i in 0..b {
        let item = &grad.data()[i * c * plane..(i + 1) * c * plane];
        a.extend_from_slice(&item[..first * plane]);
        s.extend_from_slice(&item[first * plane..]);
    }
    Ok((Tensor::new(&[b, first, h, w], a)?, Tensor::new(&[b, second, h, w], s)?))
}

/// Hash of the piecewise-linear regime of a forward pass (ReLU signs and
/// pooling winners). Finite-difference probes that change it straddle a kink.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ActivationPattern(u64);

impl ActivationPattern {
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn feed(&mut self, byte: u8) {
        self.0 ^= byte as u64;
        self.0 = self.0.wrapping_mul(Self::PRIME);
    }

    pub fn record_signs<T: Scalar>(&mut self, pre_activation: &Tensor<T>) {
        for chunk in pre_activation.data().chunks(8) {
            let byte = chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, &v)| acc | (((v > T::zero()) as u8) << i));
            self.feed(byte);
        }
    }

    pub fn record_indices(&mut self, indices: &PoolIndices) {
        for &i in indices.as_slice() {
            i.to_le_bytes().into_iter().for_each(|b| self.feed(b));
        }
    }

    pub fn value(&self) -> u64 {
        self.0
    }
}
