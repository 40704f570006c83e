//! Primitive kernels: convolution, transposed convolution, max pooling,
//! dense products and elementwise activations.
//!
//! Every kernel has an eager forward entry point operating on [`Tensor`]s and
//! slice-level backward helpers used by the [`crate::autograd`] record.
//! Spatial tensors are `[C, H, W]` (single image) or `[B, C, H, W]` (batch).

use rayon::prelude::*;

use crate::tensor::{gemm, Result, Scalar, Tensor, TensorError, Trans};

/// Spatial padding policy for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output shrinks by `kernel - 1` at stride 1.
    Valid,
    /// Symmetric `(k - 1) / 2` zero padding; requires odd kernels.
    Same,
    /// Explicit symmetric zero padding on both spatial axes.
    Explicit(usize),
}

impl Padding {
    fn resolve(self, kh: usize, kw: usize) -> Result<(usize, usize)> {
        match self {
            Padding::Valid => Ok((0, 0)),
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(TensorError::Invalid(format!(
                        "same padding needs odd kernels, got {kh}x{kw}"
                    )));
                }
                Ok(((kh - 1) / 2, (kw - 1) / 2))
            }
            Padding::Explicit(p) => Ok((p, p)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the forward input `x` and output `y`.
    /// ReLU uses 0 at exactly 0.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Identity => T::one(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn apply_activation<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    input.map(|v| kind.apply(v))
}

/// Geometry of a 2-D correlation over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad_h: usize,
        pad_w: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(TensorError::Invalid("stride must be positive".into()));
        }
        if channels == 0 || height == 0 || width == 0 || kh == 0 || kw == 0 {
            return Err(TensorError::ZeroDim(vec![channels, height, width, kh, kw]));
        }
        let ph = height + 2 * pad_h;
        let pw = width + 2 * pad_w;
        if kh > ph || kw > pw {
            return Err(TensorError::KernelTooLarge {
                op: "conv2d",
                kernel: vec![kh, kw],
                input: vec![ph, pw],
            });
        }
        Ok(ConvGeom {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Unfolds one `[C, H, W]` image into `[C*kh*kw, out_h*out_w]` patches.
pub fn im2col<T: Scalar>(g: &ConvGeom, image: &[T], cols: &mut [T]) {
    debug_assert_eq!(image.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let n_out = g.col_cols();
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.pad_h as isize;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= g.height as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let x = (ox * g.stride + j) as isize - g.pad_w as isize;
                        *d = if x < 0 || x >= g.width as isize {
                            T::zero()
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch columns back into an image.
pub fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], image: &mut [T]) {
    debug_assert_eq!(image.len(), g.image_len());
    let n_out = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.pad_h as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + j) as isize - g.pad_w as isize;
                        if x >= 0 && (x as usize) < g.width {
                            dst[x as usize] = dst[x as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Splits a spatial shape into `(batch, channels, height, width)`.
pub(crate) fn spatial_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(TensorError::ShapeMismatch {
            op,
            left: shape.to_vec(),
            right: vec![0, 0, 0, 0],
        }),
    }
}

pub(crate) fn spatial_shape(batched: bool, b: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if batched {
        vec![b, c, h, w]
    } else {
        vec![c, h, w]
    }
}

/// Resolved parameters of a convolution call, reused by the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dPlan {
    pub batch: usize,
    pub out_channels: usize,
    pub geom: ConvGeom,
    pub batched: bool,
}

impl Conv2dPlan {
    pub fn new(
        input: &[usize],
        kernels: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let batched = input.len() == 4;
        let (b, c, h, w) = spatial_dims(input, "conv2d")?;
        let [k, kc, kh, kw] = *kernels else {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernels.to_vec(),
            });
        };
        if kc != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernels.to_vec(),
            });
        }
        if input.contains(&0) || kernels.contains(&0) {
            return Err(TensorError::ZeroDim(input.to_vec()));
        }
        let (ph, pw) = padding.resolve(kh, kw)?;
        let geom = ConvGeom::new(c, h, w, kh, kw, stride, ph, pw)?;
        Ok(Conv2dPlan {
            batch: b,
            out_channels: k,
            geom,
            batched,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        spatial_shape(
            self.batched,
            self.batch,
            self.out_channels,
            self.geom.out_h,
            self.geom.out_w,
        )
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.geom.col_cols()
    }

    pub fn forward<T: Scalar>(&self, x: &[T], kernels: &[T], bias: Option<&[T]>) -> Vec<T> {
        let g = self.geom;
        let out_len = self.out_len();
        let mut out = vec![T::zero(); self.batch * out_len];
        out.par_chunks_mut(out_len)
            .zip(x.par_chunks(g.image_len()))
            .for_each_init(
                || vec![T::zero(); g.col_rows() * g.col_cols()],
                |cols, (dst, img)| {
                    im2col(&g, img, cols);
                    gemm(
                        Trans::No,
                        Trans::No,
                        self.out_channels,
                        g.col_rows(),
                        g.col_cols(),
                        T::one(),
                        kernels,
                        cols,
                        T::zero(),
                        dst,
                    );
                    if let Some(b) = bias {
                        for (k, plane) in dst.chunks_mut(g.col_cols()).enumerate() {
                            plane.iter_mut().for_each(|v| *v = *v + b[k]);
                        }
                    }
                },
            );
        out
    }

    /// Returns `(d_input, d_kernels, d_bias)`; `d_input` only when requested.
    pub fn backward<T: Scalar>(
        &self,
        x: &[T],
        kernels: &[T],
        d_out: &[T],
        want_input: bool,
    ) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
        let g = self.geom;
        let out_len = self.out_len();
        let wlen = kernels.len();
        let per_sample: Vec<(Option<Vec<T>>, Vec<T>)> = (0..self.batch)
            .into_par_iter()
            .map(|s| {
                let img = &x[s * g.image_len()..(s + 1) * g.image_len()];
                let dy = &d_out[s * out_len..(s + 1) * out_len];
                let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
                im2col(&g, img, &mut cols);
                let mut dw = vec![T::zero(); wlen];
                gemm(
                    Trans::No,
                    Trans::Yes,
                    self.out_channels,
                    g.col_cols(),
                    g.col_rows(),
                    T::one(),
                    dy,
                    &cols,
                    T::zero(),
                    &mut dw,
                );
                let dx = want_input.then(|| {
                    gemm(
                        Trans::Yes,
                        Trans::No,
                        g.col_rows(),
                        self.out_channels,
                        g.col_cols(),
                        T::one(),
                        kernels,
                        dy,
                        T::zero(),
                        &mut cols,
                    );
                    let mut dx = vec![T::zero(); g.image_len()];
                    col2im(&g, &cols, &mut dx);
                    dx
                });
                (dx, dw)
            })
            .collect();
        let mut d_kernels = vec![T::zero(); wlen];
        let mut d_input = want_input.then(|| Vec::with_capacity(x.len()));
        for (dx, dw) in per_sample {
            for (a, b) in d_kernels.iter_mut().zip(dw) {
                *a = *a + b;
            }
            if let (Some(acc), Some(dx)) = (d_input.as_mut(), dx) {
                acc.extend(dx);
            }
        }
        let d_bias = channel_sums(d_out, self.batch, self.out_channels, g.col_cols());
        (d_input, d_kernels, d_bias)
    }
}

fn channel_sums<T: Scalar>(d: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for s in 0..batch {
        for (k, o) in out.iter_mut().enumerate() {
            let start = (s * channels + k) * plane;
            *o = *o + d[start..start + plane].iter().copied().sum::<T>();
        }
    }
    out
}

/// 2-D correlation `y_k = sum_c kernel_kc * x_c` (activation applied separately).
///
/// `input` is `[C, H, W]` or `[B, C, H, W]`; `kernels` is `[K, C, kh, kw]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let plan = Conv2dPlan::new(input.shape(), kernels.shape(), stride, padding)?;
    let out = plan.forward(input.data(), kernels.data(), None);
    Ok(Tensor::from_parts_unchecked(plan.output_shape(), out))
}

/// Resolved parameters of a transposed convolution.
///
/// Kernels are `[C_in, C_out, kh, kw]`; the output extent is
/// `(in - 1) * stride - 2 * padding + k + output_padding`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTransposePlan {
    pub batch: usize,
    pub in_channels: usize,
    /// Geometry of the adjoint correlation, which maps the output image back
    /// onto the input grid.
    pub geom: ConvGeom,
    pub batched: bool,
}

impl ConvTransposePlan {
    pub fn new(
        input: &[usize],
        kernels: &[usize],
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Self> {
        let batched = input.len() == 4;
        let (b, c, h, w) = spatial_dims(input, "conv_transpose2d")?;
        let [kc, k_out, kh, kw] = *kernels else {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                left: input.to_vec(),
                right: kernels.to_vec(),
            });
        };
        if kc != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                left: input.to_vec(),
                right: kernels.to_vec(),
            });
        }
        if stride == 0 || output_padding >= stride {
            return Err(TensorError::Invalid(format!(
                "conv_transpose2d: output padding {output_padding} must be below stride {stride}"
            )));
        }
        let out_h = ((h - 1) * stride + kh + output_padding)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0);
        let out_w = ((w - 1) * stride + kw + output_padding)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(TensorError::Invalid(
                "conv_transpose2d: padding leaves an empty output".into(),
            ));
        };
        let geom = ConvGeom::new(k_out, out_h, out_w, kh, kw, stride, padding, padding)?;
        debug_assert_eq!((geom.out_h, geom.out_w), (h, w));
        Ok(ConvTransposePlan {
            batch: b,
            in_channels: c,
            geom,
            batched,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        spatial_shape(
            self.batched,
            self.batch,
            self.geom.channels,
            self.geom.height,
            self.geom.width,
        )
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.geom.col_cols()
    }

    pub fn forward<T: Scalar>(&self, x: &[T], kernels: &[T], bias: Option<&[T]>) -> Vec<T> {
        let g = self.geom;
        let in_len = self.in_len();
        let mut out = vec![T::zero(); self.batch * g.image_len()];
        out.par_chunks_mut(g.image_len())
            .zip(x.par_chunks(in_len))
            .for_each_init(
                || vec![T::zero(); g.col_rows() * g.col_cols()],
                |cols, (dst, img)| {
                    gemm(
                        Trans::Yes,
                        Trans::No,
                        g.col_rows(),
                        self.in_channels,
                        g.col_cols(),
                        T::one(),
                        kernels,
                        img,
                        T::zero(),
                        cols,
                    );
                    col2im(&g, cols, dst);
                    if let Some(b) = bias {
                        let plane = g.height * g.width;
                        for (k, p) in dst.chunks_mut(plane).enumerate() {
                            p.iter_mut().for_each(|v| *v = *v + b[k]);
                        }
                    }
                },
            );
        out
    }

    pub fn backward<T: Scalar>(
        &self,
        x: &[T],
        kernels: &[T],
        d_out: &[T],
        want_input: bool,
    ) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
        let g = self.geom;
        let in_len = self.in_len();
        let wlen = kernels.len();
        let per_sample: Vec<(Option<Vec<T>>, Vec<T>)> = (0..self.batch)
            .into_par_iter()
            .map(|s| {
                let img = &x[s * in_len..(s + 1) * in_len];
                let dy = &d_out[s * g.image_len()..(s + 1) * g.image_len()];
                let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
                im2col(&g, dy, &mut cols);
                let mut dw = vec![T::zero(); wlen];
                gemm(
                    Trans::No,
                    Trans::Yes,
                    self.in_channels,
                    g.col_cols(),
                    g.col_rows(),
                    T::one(),
                    img,
                    &cols,
                    T::zero(),
                    &mut dw,
                );
                let dx = want_input.then(|| {
                    let mut dx = vec![T::zero(); in_len];
                    gemm(
                        Trans::No,
                        Trans::No,
                        self.in_channels,
                        g.col_rows(),
                        g.col_cols(),
                        T::one(),
                        kernels,
                        &cols,
                        T::zero(),
                        &mut dx,
                    );
                    dx
                });
                (dx, dw)
            })
            .collect();
        let mut d_kernels = vec![T::zero(); wlen];
        let mut d_input = want_input.then(|| Vec::with_capacity(x.len()));
        for (dx, dw) in per_sample {
            for (a, b) in d_kernels.iter_mut().zip(dw) {
                *a = *a + b;
            }
            if let (Some(acc), Some(dx)) = (d_input.as_mut(), dx) {
                acc.extend(dx);
            }
        }
        let d_bias = channel_sums(d_out, self.batch, g.channels, g.height * g.width);
        (d_input, d_kernels, d_bias)
    }
}

/// Transposed convolution (the adjoint of a strided correlation).
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor<T>> {
    let plan = ConvTransposePlan::new(
        input.shape(),
        kernels.shape(),
        stride,
        padding,
        output_padding,
    )?;
    let out = plan.forward(input.data(), kernels.data(), None);
    Ok(Tensor::from_parts_unchecked(plan.output_shape(), out))
}

/// Max pooling output together with the flat input index of every maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, pool: usize, stride: usize) -> Result<Pooled<T>> {
    let batched = input.ndim() == 4;
    let (b, c, h, w) = spatial_dims(input.shape(), "maxpool2d")?;
    if pool == 0 || stride == 0 {
        return Err(TensorError::Invalid("pool and stride must be positive".into()));
    }
    for extent in [h, w] {
        if extent < pool || (extent - pool) % stride != 0 {
            return Err(TensorError::NonDivisible {
                op: "maxpool2d",
                extent,
                window: pool,
                stride,
            });
        }
    }
    let oh = (h - pool) / stride + 1;
    let ow = (w - pool) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for p in 0..pool {
                    for q in 0..pool {
                        let idx = base + (oy * stride + p) * w + ox * stride + q;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::from_parts_unchecked(spatial_shape(batched, b, c, oh, ow), out),
        argmax,
    })
}

/// Affine map `input · weights + bias` on `[N]` or `[B, N]` input.
pub fn dense<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (rows, n, batched) = match *input.shape() {
        [n] => (1, n, false),
        [b, n] => (b, n, true),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                left: input.shape().to_vec(),
                right: weights.shape().to_vec(),
            })
        }
    };
    let [wn, m] = *weights.shape() else {
        return Err(TensorError::ShapeMismatch {
            op: "dense",
            left: input.shape().to_vec(),
            right: weights.shape().to_vec(),
        });
    };
    if wn != n || bias.shape() != [m] {
        return Err(TensorError::ShapeMismatch {
            op: "dense",
            left: input.shape().to_vec(),
            right: weights.shape().to_vec(),
        });
    }
    let mut out: Vec<T> = (0..rows).flat_map(|_| bias.data().iter().copied()).collect();
    gemm(
        Trans::No,
        Trans::No,
        rows,
        n,
        m,
        T::one(),
        input.data(),
        weights.data(),
        T::one(),
        &mut out,
    );
    let shape = if batched { vec![rows, m] } else { vec![m] };
    Ok(Tensor::from_parts_unchecked(shape, out))
}
