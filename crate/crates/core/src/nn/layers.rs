//! Layers with hand-written forward and backward passes.
//!
//! Convolutions run NHWC through im2col/col2im plus GEMM, processed in
//! batch chunks so scratch buffers stay bounded. Backward passes recompute
//! the column buffers instead of caching them.

use super::tensor::{gemm_nn, gemm_nt, gemm_tn};
use super::{NnError, Param, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scratch-buffer budget per conv GEMM operand, in elements.
const CONV_CHUNK_BUDGET: usize = 8 << 20;

/// Common layer interface; `training` selects batch-statistics /
/// stochastic behavior where a layer has any.
pub trait Layer<T: Real> {
    fn forward(&mut self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>, NnError>;
    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError>;
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        Vec::new()
    }
}

fn shape_err(op: &'static str, details: String) -> NnError {
    NnError::ShapeMismatch { op, details }
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

/// Fully connected layer: y = xW + b over (batch, features).
pub struct Dense<T> {
    pub w: Param<T>,
    pub b: Param<T>,
    cache_x: Option<Tensor<T>>,
    skip_weight_grad: bool,
}

impl<T: Real> Dense<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            w: Param::new(Tensor::glorot_uniform(&[in_dim, out_dim], in_dim, out_dim, rng)),
            b: Param::new(Tensor::zeros(&[out_dim])),
            cache_x: None,
            skip_weight_grad: false,
        }
    }

    pub fn from_params(w: Tensor<T>, b: Tensor<T>) -> Self {
        Dense { w: Param::new(w), b: Param::new(b), cache_x: None, skip_weight_grad: false }
    }

    /// When frozen, backward still returns dx but leaves w/b gradients zero.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.skip_weight_grad = frozen;
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.shape()[1]
    }
}

impl<T: Real> Layer<T> for Dense<T> {
    fn forward(&mut self, x: &Tensor<T>, _training: bool) -> Result<Tensor<T>, NnError> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_dim() {
            return Err(shape_err(
                "dense",
                format!("input {:?} vs weight {:?}", x.shape(), self.w.value.shape()),
            ));
        }
        let mut y = x.matmul(&self.w.value);
        let out = self.out_dim();
        for row in y.data_mut().chunks_mut(out) {
            for (v, b) in row.iter_mut().zip(self.b.value.data()) {
                *v = *v + *b;
            }
        }
        self.cache_x = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let x = self.cache_x.as_ref().ok_or_else(|| shape_err("dense", "backward before forward".into()))?;
        let (batch, in_dim, out) = (x.shape()[0], self.in_dim(), self.out_dim());
        if dy.shape() != [batch, out] {
            return Err(shape_err("dense", format!("dy {:?} vs (batch {batch}, out {out})", dy.shape())));
        }
        if !self.skip_weight_grad {
            // dW = x^T . dy, db = sum over batch.
            gemm_tn(in_dim, batch, out, x.data(), dy.data(), T::zero(), self.w.grad.data_mut());
            let db = self.b.grad.data_mut();
            for v in db.iter_mut() {
                *v = T::zero();
            }
            for row in dy.data().chunks(out) {
                for (g, d) in db.iter_mut().zip(row) {
                    *g = *g + *d;
                }
            }
        }
        // dx = dy . W^T.
        let mut dx = Tensor::zeros(&[batch, in_dim]);
        gemm_nt(batch, out, in_dim, dy.data(), self.w.value.data(), T::zero(), dx.data_mut());
        Ok(dx)
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![("w", &mut self.w), ("b", &mut self.b)]
    }
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

/// Integer-id row lookup with scatter-add backward.
pub struct Embedding<T> {
    pub table: Param<T>,
    cache_ids: Vec<usize>,
}

impl<T: Real> Embedding<T> {
    pub fn new(vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Embedding {
            table: Param::new(Tensor::glorot_uniform(&[vocab, dim], vocab, dim, rng)),
            cache_ids: Vec::new(),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.value.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.value.shape()[1]
    }

    /// ids (B,) -> (B, 1, E).
    pub fn forward(&mut self, ids: &[usize]) -> Result<Tensor<T>, NnError> {
        let (vocab, dim) = (self.vocab(), self.dim());
        let mut out = Tensor::zeros(&[ids.len(), 1, dim]);
        for (i, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(NnError::IdOutOfRange { id, vocab });
            }
            out.data_mut()[i * dim..(i + 1) * dim]
                .copy_from_slice(&self.table.value.data()[id * dim..(id + 1) * dim]);
        }
        self.cache_ids = ids.to_vec();
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<(), NnError> {
        let dim = self.dim();
        if dy.len() != self.cache_ids.len() * dim {
            return Err(shape_err("embedding", format!("dy {:?}", dy.shape())));
        }
        self.table.zero_grad();
        for (i, &id) in self.cache_ids.iter().enumerate() {
            let grad = &mut self.table.grad.data_mut()[id * dim..(id + 1) * dim];
            for (g, d) in grad.iter_mut().zip(&dy.data()[i * dim..(i + 1) * dim]) {
                *g = *g + *d;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Convolution geometry
// ---------------------------------------------------------------------------

/// Shared geometry for im2col/col2im. `img_*` is the large (image) side,
/// `pos_*` the strided patch-center grid.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    img_h: usize,
    img_w: usize,
    channels: usize,
    pos_h: usize,
    pos_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

/// TF-style "same" split: total padding, extra on the high side.
fn same_pad(img: usize, stride: usize, k: usize) -> (usize, usize) {
    let out = img.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(img);
    (total / 2, total)
}

impl ConvGeom {
    fn for_conv(img_h: usize, img_w: usize, channels: usize, kh: usize, kw: usize, stride: usize) -> Self {
        let (pad_top, _) = same_pad(img_h, stride, kh);
        let (pad_left, _) = same_pad(img_w, stride, kw);
        ConvGeom {
            img_h,
            img_w,
            channels,
            pos_h: img_h.div_ceil(stride),
            pos_w: img_w.div_ceil(stride),
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
        }
    }

    /// Geometry of the conv whose input-gradient a transposed conv computes:
    /// image side is (pos_h * stride, pos_w * stride).
    fn for_transpose(pos_h: usize, pos_w: usize, channels: usize, kh: usize, kw: usize, stride: usize) -> Self {
        let img_h = pos_h * stride;
        let img_w = pos_w * stride;
        let (pad_top, _) = same_pad(img_h, stride, kh);
        let (pad_left, _) = same_pad(img_w, stride, kw);
        ConvGeom { img_h, img_w, channels, pos_h, pos_w, kh, kw, stride, pad_top, pad_left }
    }

    fn cols(&self) -> usize {
        self.kh * self.kw * self.channels
    }

    fn rows_per_image(&self) -> usize {
        self.pos_h * self.pos_w
    }
}

/// Gather patches of `img` (batch chunk, NHWC) into `col`
/// (chunk * pos_h * pos_w, kh * kw * channels). `col` is fully rewritten.
fn im2col<T: Real>(img: &[T], batch: usize, g: &ConvGeom, col: &mut [T]) {
    let cols = g.cols();
    let img_stride = g.img_h * g.img_w * g.channels;
    debug_assert_eq!(img.len(), batch * img_stride);
    debug_assert_eq!(col.len(), batch * g.rows_per_image() * cols);
    for v in col.iter_mut() {
        *v = T::zero();
    }
    let rows_per = g.rows_per_image();
    for b in 0..batch {
        let src = &img[b * img_stride..(b + 1) * img_stride];
        let dst = &mut col[b * rows_per * cols..(b + 1) * rows_per * cols];
        for ph in 0..g.pos_h {
            for pw in 0..g.pos_w {
                let row = (ph * g.pos_w + pw) * cols;
                for a in 0..g.kh {
                    let h = (ph * g.stride + a) as isize - g.pad_top as isize;
                    if h < 0 || h >= g.img_h as isize {
                        continue;
                    }
                    let w0 = (pw * g.stride) as isize - g.pad_left as isize;
                    let lo = (-w0).max(0) as usize;
                    let hi = g.kw.min((g.img_w as isize - w0) as usize);
                    if lo >= hi {
                        continue;
                    }
                    let src_off = (h as usize * g.img_w + (w0 + lo as isize) as usize) * g.channels;
                    let dst_off = row + (a * g.kw + lo) * g.channels;
                    let len = (hi - lo) * g.channels;
                    dst[dst_off..dst_off + len].copy_from_slice(&src[src_off..src_off + len]);
                }
            }
        }
    }
}

/// Scatter-add `col` back into `img` (the adjoint of `im2col`).
fn col2im<T: Real>(col: &[T], batch: usize, g: &ConvGeom, img: &mut [T]) {
    let cols = g.cols();
    let img_stride = g.img_h * g.img_w * g.channels;
    debug_assert_eq!(img.len(), batch * img_stride);
    let rows_per = g.rows_per_image();
    for b in 0..batch {
        let src = &col[b * rows_per * cols..(b + 1) * rows_per * cols];
        let dst = &mut img[b * img_stride..(b + 1) * img_stride];
        for ph in 0..g.pos_h {
            for pw in 0..g.pos_w {
                let row = (ph * g.pos_w + pw) * cols;
                for a in 0..g.kh {
                    let h = (ph * g.stride + a) as isize - g.pad_top as isize;
                    if h < 0 || h >= g.img_h as isize {
                        continue;
                    }
                    let w0 = (pw * g.stride) as isize - g.pad_left as isize;
                    let lo = (-w0).max(0) as usize;
                    let hi = g.kw.min((g.img_w as isize - w0) as usize);
                    if lo >= hi {
                        continue;
                    }
                    let dst_off = (h as usize * g.img_w + (w0 + lo as isize) as usize) * g.channels;
                    let src_off = row + (a * g.kw + lo) * g.channels;
                    for i in 0..(hi - lo) * g.channels {
                        dst[dst_off + i] = dst[dst_off + i] + src[src_off + i];
                    }
                }
            }
        }
    }
}

fn chunk_size(rows_per_image: usize, cols: usize, batch: usize) -> usize {
    (CONV_CHUNK_BUDGET / (rows_per_image * cols).max(1)).clamp(1, batch.max(1))
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// Strided 2-D cross-correlation with "same" padding, NHWC.
/// Kernel layout (kh, kw, c_in, c_out).
pub struct Conv2d<T> {
    pub kernel: Param<T>,
    pub bias: Param<T>,
    stride: usize,
    cache_x: Option<Tensor<T>>,
    skip_weight_grad: bool,
}

impl<T: Real> Conv2d<T> {
    pub fn new(kh: usize, kw: usize, c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
        if stride < 1 {
            return Err(NnError::InvalidStride);
        }
        let fan_in = kh * kw * c_in;
        let fan_out = kh * kw * c_out;
        Ok(Conv2d {
            kernel: Param::new(Tensor::glorot_uniform(&[kh, kw, c_in, c_out], fan_in, fan_out, rng)),
            bias: Param::new(Tensor::zeros(&[c_out])),
            stride,
            cache_x: None,
            skip_weight_grad: false,
        })
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.skip_weight_grad = frozen;
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.kernel.value.shape();
        (s[0], s[1], s[2], s[3])
    }

    fn geom(&self, x_shape: &[usize]) -> Result<(usize, ConvGeom), NnError> {
        let (kh, kw, c_in, _) = self.dims();
        if x_shape.len() != 4 || x_shape[3] != c_in {
            return Err(shape_err(
                "conv2d",
                format!("input {:?} vs kernel {:?}", x_shape, self.kernel.value.shape()),
            ));
        }
        Ok((x_shape[0], ConvGeom::for_conv(x_shape[1], x_shape[2], c_in, kh, kw, self.stride)))
    }

    pub fn output_shape(&self, x_shape: &[usize]) -> Result<Vec<usize>, NnError> {
        let (batch, g) = self.geom(x_shape)?;
        Ok(vec![batch, g.pos_h, g.pos_w, self.dims().3])
    }
}

impl<T: Real> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _training: bool) -> Result<Tensor<T>, NnError> {
        let (batch, g) = self.geom(x.shape())?;
        let (_, _, _, c_out) = self.dims();
        let cols = g.cols();
        let rows_per = g.rows_per_image();
        let mut y = Tensor::zeros(&[batch, g.pos_h, g.pos_w, c_out]);
        let chunk = chunk_size(rows_per, cols.max(c_out), batch);
        let mut col = vec![T::zero(); chunk * rows_per * cols];
        let img_stride = g.img_h * g.img_w * g.channels;
        for b0 in (0..batch).step_by(chunk) {
            let bn = chunk.min(batch - b0);
            let col_slice = &mut col[..bn * rows_per * cols];
            im2col(&x.data()[b0 * img_stride..(b0 + bn) * img_stride], bn, &g, col_slice);
            gemm_nn(
                bn * rows_per,
                cols,
                c_out,
                col_slice,
                self.kernel.value.data(),
                T::zero(),
                &mut y.data_mut()[b0 * rows_per * c_out..(b0 + bn) * rows_per * c_out],
            );
        }
        for row in y.data_mut().chunks_mut(c_out) {
            for (v, b) in row.iter_mut().zip(self.bias.value.data()) {
                *v = *v + *b;
            }
        }
        self.cache_x = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let x = self.cache_x.as_ref().ok_or_else(|| shape_err("conv2d", "backward before forward".into()))?;
        let (batch, g) = self.geom(x.shape())?;
        let (_, _, _, c_out) = self.dims();
        if dy.shape() != [batch, g.pos_h, g.pos_w, c_out] {
            return Err(shape_err("conv2d", format!("dy {:?}", dy.shape())));
        }
        let cols = g.cols();
        let rows_per = g.rows_per_image();
        let img_stride = g.img_h * g.img_w * g.channels;

        if !self.skip_weight_grad {
            self.kernel.zero_grad();
            let db = self.bias.grad.data_mut();
            for v in db.iter_mut() {
                *v = T::zero();
            }
            for row in dy.data().chunks(c_out) {
                for (gr, d) in db.iter_mut().zip(row) {
                    *gr = *gr + *d;
                }
            }
        }

        let mut dx = Tensor::zeros(x.shape());
        let chunk = chunk_size(rows_per, cols.max(c_out), batch);
        let mut col = vec![T::zero(); chunk * rows_per * cols];
        let mut dcol = vec![T::zero(); chunk * rows_per * cols];
        for b0 in (0..batch).step_by(chunk) {
            let bn = chunk.min(batch - b0);
            let m = bn * rows_per;
            let dy_slice = &dy.data()[b0 * rows_per * c_out..(b0 + bn) * rows_per * c_out];
            if !self.skip_weight_grad {
                let col_slice = &mut col[..m * cols];
                im2col(&x.data()[b0 * img_stride..(b0 + bn) * img_stride], bn, &g, col_slice);
                // dK accumulates across chunks.
                gemm_tn(cols, m, c_out, col_slice, dy_slice, T::one(), self.kernel.grad.data_mut());
            }
            let dcol_slice = &mut dcol[..m * cols];
            gemm_nt(m, c_out, cols, dy_slice, self.kernel.value.data(), T::zero(), dcol_slice);
            col2im(dcol_slice, bn, &g, &mut dx.data_mut()[b0 * img_stride..(b0 + bn) * img_stride]);
        }
        Ok(dx)
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![("kernel", &mut self.kernel), ("bias", &mut self.bias)]
    }
}

// ---------------------------------------------------------------------------
// ConvTranspose2d
// ---------------------------------------------------------------------------

/// Transposed convolution (fractionally strided), the adjoint of [`Conv2d`]
/// with matching geometry. Output is exactly (H*s, W*s).
/// Kernel layout (kh, kw, c_out, c_in).
pub struct ConvTranspose2d<T> {
    pub kernel: Param<T>,
    pub bias: Param<T>,
    stride: usize,
    cache_x: Option<Tensor<T>>,
}

impl<T: Real> ConvTranspose2d<T> {
    /// Kernels are Normal(0, stddev) initialized.
    pub fn new(
        kh: usize,
        kw: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        kernel_stddev: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        if stride < 1 {
            return Err(NnError::InvalidStride);
        }
        Ok(ConvTranspose2d {
            kernel: Param::new(Tensor::randn(&[kh, kw, c_out, c_in], kernel_stddev, rng)),
            bias: Param::new(Tensor::zeros(&[c_out])),
            stride,
            cache_x: None,
        })
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.kernel.value.shape();
        (s[0], s[1], s[2], s[3])
    }

    fn geom(&self, x_shape: &[usize]) -> Result<(usize, ConvGeom), NnError> {
        let (kh, kw, c_out, c_in) = self.dims();
        if x_shape.len() != 4 || x_shape[3] != c_in {
            return Err(shape_err(
                "conv2d_transpose",
                format!("input {:?} vs kernel {:?}", x_shape, self.kernel.value.shape()),
            ));
        }
        Ok((x_shape[0], ConvGeom::for_transpose(x_shape[1], x_shape[2], c_out, kh, kw, self.stride)))
    }
}

impl<T: Real> Layer<T> for ConvTranspose2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _training: bool) -> Result<Tensor<T>, NnError> {
        let (batch, g) = self.geom(x.shape())?;
        let (_, _, c_out, c_in) = self.dims();
        let cols = g.cols(); // kh*kw*c_out
        let rows_per = g.rows_per_image(); // input positions
        let mut y = Tensor::zeros(&[batch, g.img_h, g.img_w, c_out]);
        let chunk = chunk_size(rows_per, cols.max(c_in), batch);
        let mut scatter = vec![T::zero(); chunk * rows_per * cols];
        let img_stride = g.img_h * g.img_w * c_out;
        for b0 in (0..batch).step_by(chunk) {
            let bn = chunk.min(batch - b0);
            let m = bn * rows_per;
            // Per input pixel, its full kh*kw*c_out contribution patch:
            // scatter = x (m, c_in) . K^T with K as (kh*kw*c_out, c_in).
            gemm_nt(
                m,
                c_in,
                cols,
                &x.data()[b0 * rows_per * c_in..(b0 + bn) * rows_per * c_in],
                self.kernel.value.data(),
                T::zero(),
                &mut scatter[..m * cols],
            );
            col2im(&scatter[..m * cols], bn, &g, &mut y.data_mut()[b0 * img_stride..(b0 + bn) * img_stride]);
        }
        for row in y.data_mut().chunks_mut(c_out) {
            for (v, b) in row.iter_mut().zip(self.bias.value.data()) {
                *v = *v + *b;
            }
        }
        self.cache_x = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let x = self
            .cache_x
            .as_ref()
            .ok_or_else(|| shape_err("conv2d_transpose", "backward before forward".into()))?;
        let (batch, g) = self.geom(x.shape())?;
        let (_, _, c_out, c_in) = self.dims();
        if dy.shape() != [batch, g.img_h, g.img_w, c_out] {
            return Err(shape_err("conv2d_transpose", format!("dy {:?}", dy.shape())));
        }
        let cols = g.cols();
        let rows_per = g.rows_per_image();
        let img_stride = g.img_h * g.img_w * c_out;

        self.kernel.zero_grad();
        {
            let db = self.bias.grad.data_mut();
            for v in db.iter_mut() {
                *v = T::zero();
            }
            for row in dy.data().chunks(c_out) {
                for (gr, d) in db.iter_mut().zip(row) {
                    *gr = *gr + *d;
                }
            }
        }

        let mut dx = Tensor::zeros(x.shape());
        let chunk = chunk_size(rows_per, cols.max(c_in), batch);
        let mut dcol = vec![T::zero(); chunk * rows_per * cols];
        for b0 in (0..batch).step_by(chunk) {
            let bn = chunk.min(batch - b0);
            let m = bn * rows_per;
            let dcol_slice = &mut dcol[..m * cols];
            // Gather dy patches once; they serve both dx and dK.
            im2col(&dy.data()[b0 * img_stride..(b0 + bn) * img_stride], bn, &g, dcol_slice);
            // dx = dcol . K, i.e. a plain convolution of dy by the kernel.
            gemm_nn(
                m,
                cols,
                c_in,
                dcol_slice,
                self.kernel.value.data(),
                T::zero(),
                &mut dx.data_mut()[b0 * rows_per * c_in..(b0 + bn) * rows_per * c_in],
            );
            // dK = dcol^T . x, accumulated across chunks.
            gemm_tn(
                cols,
                m,
                c_in,
                dcol_slice,
                &x.data()[b0 * rows_per * c_in..(b0 + bn) * rows_per * c_in],
                T::one(),
                self.kernel.grad.data_mut(),
            );
        }
        Ok(dx)
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![("kernel", &mut self.kernel), ("bias", &mut self.bias)]
    }
}

// ---------------------------------------------------------------------------
// BatchNorm
// ---------------------------------------------------------------------------

/// Per-channel batch normalization over the last axis.
///
/// Moving statistics follow `moving = momentum * moving + (1 - momentum) *
/// batch`, so momentum 0 pins them to the most recent training batch.
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub moving_mean: Tensor<T>,
    pub moving_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

struct BnCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    training: bool,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::filled(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            moving_mean: Tensor::zeros(&[channels]),
            moving_var: Tensor::filled(&[channels], T::one()),
            momentum,
            eps,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.shape()[0]
    }
}

impl<T: Real> Layer<T> for BatchNorm<T> {
    fn forward(&mut self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>, NnError> {
        let c = self.channels();
        let shape = x.shape();
        if shape.is_empty() || *shape.last().unwrap() != c {
            return Err(shape_err("batchnorm", format!("input {:?} vs {c} channels", shape)));
        }
        let reduce = x.len() / c;
        let (mean, var): (Vec<T>, Vec<T>) = if training {
            if shape[0] < 2 {
                return Err(NnError::DegenerateBatch(shape[0]));
            }
            let mut mean = vec![T::zero(); c];
            for row in x.data().chunks(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m = *m + *v;
                }
            }
            let n = T::from_f64(reduce as f64);
            for m in mean.iter_mut() {
                *m = *m / n;
            }
            let mut var = vec![T::zero(); c];
            for row in x.data().chunks(c) {
                for ((vv, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = *v - *m;
                    *vv = *vv + d * d;
                }
            }
            for v in var.iter_mut() {
                *v = *v / n;
            }
            let mom = T::from_f64(self.momentum);
            let inv_mom = T::one() - mom;
            for ((mm, m), (mv, v)) in self
                .moving_mean
                .data_mut()
                .iter_mut()
                .zip(&mean)
                .zip(self.moving_var.data_mut().iter_mut().zip(&var))
            {
                *mm = mom * *mm + inv_mom * *m;
                *mv = mom * *mv + inv_mom * *v;
            }
            (mean, var)
        } else {
            (self.moving_mean.data().to_vec(), self.moving_var.data().to_vec())
        };

        let eps = T::from_f64(self.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut x_hat = Tensor::zeros(shape);
        let mut y = Tensor::zeros(shape);
        for (row_i, (xr, (hr, yr))) in x
            .data()
            .chunks(c)
            .zip(x_hat.data_mut().chunks_mut(c).zip(y.data_mut().chunks_mut(c)))
            .enumerate()
        {
            let _ = row_i;
            for j in 0..c {
                let h = (xr[j] - mean[j]) * inv_std[j];
                hr[j] = h;
                yr[j] = self.gamma.value.data()[j] * h + self.beta.value.data()[j];
            }
        }
        self.cache = Some(BnCache { x_hat, inv_std, training });
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let cache = self.cache.as_ref().ok_or_else(|| shape_err("batchnorm", "backward before forward".into()))?;
        let c = self.channels();
        if dy.shape() != cache.x_hat.shape() {
            return Err(shape_err("batchnorm", format!("dy {:?}", dy.shape())));
        }
        let reduce = dy.len() / c;
        let n = T::from_f64(reduce as f64);

        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (dr, hr) in dy.data().chunks(c).zip(cache.x_hat.data().chunks(c)) {
            for j in 0..c {
                dgamma[j] = dgamma[j] + dr[j] * hr[j];
                dbeta[j] = dbeta[j] + dr[j];
            }
        }
        self.gamma.grad.data_mut().copy_from_slice(&dgamma);
        self.beta.grad.data_mut().copy_from_slice(&dbeta);

        let mut dx = Tensor::zeros(dy.shape());
        if cache.training {
            for ((dr, hr), xr) in dy
                .data()
                .chunks(c)
                .zip(cache.x_hat.data().chunks(c))
                .zip(dx.data_mut().chunks_mut(c))
            {
                for j in 0..c {
                    let g = self.gamma.value.data()[j];
                    xr[j] = g * cache.inv_std[j] * (dr[j] - dbeta[j] / n - hr[j] * dgamma[j] / n);
                }
            }
        } else {
            for (dr, xr) in dy.data().chunks(c).zip(dx.data_mut().chunks_mut(c)) {
                for j in 0..c {
                    xr[j] = self.gamma.value.data()[j] * cache.inv_std[j] * dr[j];
                }
            }
        }
        Ok(dx)
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

macro_rules! activation {
    ($name:ident) => {
        pub struct $name<T> {
            cache: Option<Tensor<T>>,
        }
        impl<T> Default for $name<T> {
            fn default() -> Self {
                $name { cache: None }
            }
        }
        impl<T> $name<T> {
            pub fn new() -> Self {
                $name { cache: None }
            }
        }
    };
}

activation!(Relu);
activation!(Tanh);
activation!(Sigmoid);
activation!(Softmax);

impl<T: Real> Layer<T> for Relu<T> {
    fn forward(&mut self, x: &Tensor<T>, _training: bool) -> Result<Tensor<T>, NnError> {
        let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let x = self.cache.as_ref().ok_or_else(|| shape_err("relu", "backward before forward".into()))?;
        let mut dx = dy.clone();
        for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
            if *v <= T::zero() {
                *d = T::zero();
            }
        }
        Ok(dx)
    }
}

/// LeakyReLU with configurable negative slope.
pub struct LeakyRelu<T> {
    pub alpha: f64,
    cache: Option<Tensor<T>>,
}

impl<T> LeakyRelu<T> {
    pub fn new(alpha: f64) -> Self {
        LeakyRelu { alpha, cache: None }
    }
}

impl<T: Real> Layer<T> for LeakyRelu<T> {
    fn forward(&mut self, x: &Tensor<T>, _training: bool) -> Result<Tensor<T>, NnError> {
        let a = T::from_f64(self.alpha);
        let y = x.map(|v| if v > T::zero() { v } else { a * v });
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let x = self.cache.as_ref().ok_or_else(|| shape_err("leaky_relu", "backward before forward".into()))?;
        let a = T::from_f64(self.alpha);
        let mut dx = dy.clone();
        for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
            if *v <= T::zero() {
                *d = *d * a;
            }
        }
        Ok(dx)
    }
}

impl<T: Real> Layer<T> for Tanh<T> {
    fn forward(&mut self, x: &Tensor<T>, _training: bool) -> Result<Tensor<T>, NnError> {
        let y = x.map(|v| v.tanh());
        self.cache = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let y = self.cache.as_ref().ok_or_else(|| shape_err("tanh", "backward before forward".into()))?;
        let mut dx = dy.clone();
        for (d, v) in dx.data_mut().iter_mut().zip(y.data()) {
            *d = *d * (T::one() - *v * *v);
        }
        Ok(dx)
    }
}

impl<T: Real> Layer<T> for Sigmoid<T> {
    fn forward(&mut self, x: &Tensor<T>, _training: bool) -> Result<Tensor<T>, NnError> {
        let y = x.map(|v| T::one() / (T::one() + (-v).exp()));
        self.cache = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let y = self.cache.as_ref().ok_or_else(|| shape_err("sigmoid", "backward before forward".into()))?;
        let mut dx = dy.clone();
        for (d, v) in dx.data_mut().iter_mut().zip(y.data()) {
            *d = *d * *v * (T::one() - *v);
        }
        Ok(dx)
    }
}

impl<T: Real> Layer<T> for Softmax<T> {
    /// Softmax over the last axis, stabilized by max subtraction.
    fn forward(&mut self, x: &Tensor<T>, _training: bool) -> Result<Tensor<T>, NnError> {
        let c = *x.shape().last().ok_or_else(|| shape_err("softmax", "rank 0".into()))?;
        let mut y = x.clone();
        for row in y.data_mut().chunks_mut(c) {
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        self.cache = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let y = self.cache.as_ref().ok_or_else(|| shape_err("softmax", "backward before forward".into()))?;
        let c = *y.shape().last().unwrap();
        let mut dx = dy.clone();
        for (dr, yr) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
            let dot = dr.iter().zip(yr.iter()).fold(T::zero(), |acc, (d, p)| acc + *d * *p);
            for (d, p) in dr.iter_mut().zip(yr) {
                *d = *p * (*d - dot);
            }
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout: survivors are scaled by 1/(1-rate) at training time so
/// inference is the identity.
pub struct Dropout<T> {
    pub rate: f64,
    rng: ChaCha8Rng,
    mask: Option<Tensor<T>>,
}

impl<T: Real> Dropout<T> {
    pub fn new(rate: f64, seed: u64) -> Result<Self, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::InvalidDropoutRate(rate));
        }
        Ok(Dropout { rate, rng: ChaCha8Rng::seed_from_u64(seed), mask: None })
    }
}

impl<T: Real> Layer<T> for Dropout<T> {
    fn forward(&mut self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>, NnError> {
        if !training || self.rate == 0.0 {
            self.mask = None;
            return Ok(x.clone());
        }
        let scale = T::from_f64(1.0 / (1.0 - self.rate));
        let mut mask = Tensor::zeros(x.shape());
        for m in mask.data_mut() {
            if self.rng.gen::<f64>() >= self.rate {
                *m = scale;
            }
        }
        let mut y = x.clone();
        for (v, m) in y.data_mut().iter_mut().zip(mask.data()) {
            *v = *v * *m;
        }
        self.mask = Some(mask);
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        match &self.mask {
            None => Ok(dy.clone()),
            Some(mask) => {
                let mut dx = dy.clone();
                for (d, m) in dx.data_mut().iter_mut().zip(mask.data()) {
                    *d = *d * *m;
                }
                Ok(dx)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn dense_identity_passthrough() {
        let w = Tensor::from_vec(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]);
        let b = Tensor::zeros(&[2]);
        let mut d = Dense::from_params(w, b);
        let x = Tensor::from_vec(&[1, 2], vec![3.0, -4.0]);
        let y = d.forward(&x, true).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dense_affine_example() {
        let w = Tensor::from_vec(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]);
        let b = Tensor::from_vec(&[2], vec![1.0, 1.0]);
        let mut d = Dense::from_params(w, b);
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]);
        let y = d.forward(&x, true).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
    }

    #[test]
    fn embedding_lookup_and_scatter() {
        let mut e = Embedding::<f64>::new(50, 1, &mut rng(0));
        let y = e.forward(&[0, 0, 3]).unwrap();
        assert_eq!(y.shape(), &[3, 1, 1]);
        assert_eq!(y.data()[0], e.table.value.data()[0]);
        // Two equal ids accumulate both contributions.
        let dy = Tensor::from_vec(&[3, 1, 1], vec![1.0, 2.0, 5.0]);
        e.backward(&dy).unwrap();
        assert_eq!(e.table.grad.data()[0], 3.0);
        assert_eq!(e.table.grad.data()[3], 5.0);
    }

    #[test]
    fn embedding_id_out_of_range() {
        let mut e = Embedding::<f64>::new(50, 1, &mut rng(0));
        assert!(matches!(e.forward(&[50]), Err(NnError::IdOutOfRange { id: 50, vocab: 50 })));
    }

    #[test]
    fn conv_center_one_kernel_is_identity() {
        let mut rng = rng(1);
        let mut conv = Conv2d::<f64>::new(3, 3, 1, 1, 1, &mut rng).unwrap();
        for v in conv.kernel.value.data_mut() {
            *v = 0.0;
        }
        // center tap (a=1, b=1, cin=0, cout=0)
        let idx = (1 * 3 + 1) * 1 * 1;
        conv.kernel.value.data_mut()[idx] = 1.0;
        let x = Tensor::randn(&[2, 5, 4, 1], 1.0, &mut rng);
        let y = conv.forward(&x, true).unwrap();
        assert_eq!(y.shape(), x.shape());
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut r = rng(2);
        let mut conv = Conv2d::<f64>::new(3, 3, 2, 3, 2, &mut r).unwrap();
        let x = Tensor::randn(&[2, 7, 5, 2], 1.0, &mut r);
        let y = conv.forward(&x, true).unwrap();

        // naive reference
        let (kh, kw, cin, cout) = (3usize, 3, 2, 3);
        let (h, w) = (7usize, 5);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let (pt, _) = super::same_pad(h, 2, kh);
        let (pl, _) = super::same_pad(w, 2, kw);
        for b in 0..2 {
            for i in 0..oh {
                for j in 0..ow {
                    for co in 0..cout {
                        let mut acc = conv.bias.value.data()[co];
                        for a in 0..kh {
                            for bb in 0..kw {
                                let hh = (i * 2 + a) as isize - pt as isize;
                                let ww = (j * 2 + bb) as isize - pl as isize;
                                if hh < 0 || ww < 0 || hh >= h as isize || ww >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xv = x.data()
                                        [((b * h + hh as usize) * w + ww as usize) * cin + ci];
                                    let kv = conv.kernel.value.data()
                                        [((a * kw + bb) * cin + ci) * cout + co];
                                    acc += xv * kv;
                                }
                            }
                        }
                        let got = y.data()[((b * oh + i) * ow + j) * cout + co];
                        assert!((got - acc).abs() < 1e-10, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn transpose_doubles_spatial_dims() {
        let mut r = rng(3);
        let mut t = ConvTranspose2d::<f64>::new(5, 5, 4, 2, 2, 0.02, &mut r).unwrap();
        let x = Tensor::randn(&[1, 16, 3, 4], 1.0, &mut r);
        let y = t.forward(&x, true).unwrap();
        assert_eq!(y.shape(), &[1, 32, 6, 2]);

        let mut t1 = ConvTranspose2d::<f64>::new(5, 5, 4, 2, 1, 0.02, &mut r).unwrap();
        let y1 = t1.forward(&x, true).unwrap();
        assert_eq!(y1.shape(), &[1, 16, 3, 2]);
    }

    #[test]
    fn conv_transpose_adjoint_identity() {
        // <conv(x), y> == <x, conv_transpose(y)> with the shared kernel.
        let mut r = rng(4);
        for &(h, w, ci, co, s) in
            &[(8usize, 6usize, 2usize, 3usize, 2usize), (6, 6, 1, 2, 1), (10, 4, 3, 1, 2)]
        {
            let mut conv = Conv2d::<f64>::new(3, 3, ci, co, s, &mut r).unwrap();
            let x = Tensor::randn(&[2, h, w, ci], 1.0, &mut r);
            let cx = conv.forward(&x, true).unwrap();
            let y = Tensor::randn(cx.shape(), 1.0, &mut r);

            // Transposed conv sharing the kernel bytes: (kh,kw,ci,co) read as
            // (kh,kw,c_out=ci,c_in=co).
            let mut t = ConvTranspose2d::<f64>::new(3, 3, co, ci, s, 0.0, &mut r).unwrap();
            t.kernel.value = conv.kernel.value.clone().reshape(&[3, 3, ci, co]);
            for v in t.bias.value.data_mut() {
                *v = 0.0;
            }
            let ty = t.forward(&y, true).unwrap();
            assert_eq!(ty.shape(), x.shape());

            let bias_term: f64 = cx
                .data()
                .chunks(co)
                .zip(y.data().chunks(co))
                .map(|(c, yy)| {
                    c.iter()
                        .zip(yy)
                        .zip(conv.bias.value.data())
                        .map(|((cv, yv), b)| (cv - b) * yv)
                        .sum::<f64>()
                })
                .sum();
            let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
            let scale = bias_term.abs().max(rhs.abs()).max(1.0);
            assert!(
                (bias_term - rhs).abs() / scale < 1e-12,
                "adjoint mismatch: {bias_term} vs {rhs} (h={h} w={w} s={s})"
            );
        }
    }

    #[test]
    fn batchnorm_standardizes_training_batch() {
        let mut r = rng(5);
        let mut bn = BatchNorm::<f64>::new(3, 0.0, 1e-3);
        let x = Tensor::randn(&[8, 4, 2, 3], 2.0, &mut r);
        let y = bn.forward(&x, true).unwrap();
        let n = (8 * 4 * 2) as f64;
        for c in 0..3 {
            let mean: f64 = y.data().iter().skip(c).step_by(3).sum::<f64>() / n;
            let var: f64 = y.data().iter().skip(c).step_by(3).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-2, "var {var}");
        }
    }

    #[test]
    fn batchnorm_momentum_zero_tracks_last_batch() {
        let mut r = rng(6);
        let mut bn = BatchNorm::<f64>::new(2, 0.0, 1e-3);
        let x = Tensor::randn(&[4, 2], 1.0, &mut r);
        bn.forward(&x, true).unwrap();
        let mean0: f64 = (0..4).map(|i| x.data()[i * 2]).sum::<f64>() / 4.0;
        assert!((bn.moving_mean.data()[0] - mean0).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_rejects_batch_of_one() {
        let mut bn = BatchNorm::<f64>::new(2, 0.0, 1e-3);
        let x = Tensor::zeros(&[1, 2]);
        assert!(matches!(bn.forward(&x, true), Err(NnError::DegenerateBatch(1))));
    }

    #[test]
    fn activation_values() {
        let x = Tensor::from_vec(&[1, 3], vec![-1.0f64, 0.0, 2.0]);
        let y = LeakyRelu::new(0.2).forward(&x, true).unwrap();
        assert_eq!(y.data(), &[-0.2, 0.0, 2.0]);

        let z = Tensor::from_vec(&[1, 3], vec![0.0f64, 0.0, 0.0]);
        let s = Softmax::new().forward(&z, true).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let big = Tensor::from_vec(&[1, 2], vec![700.0f64, -700.0]);
        let t = Tanh::new().forward(&big, true).unwrap();
        assert!(t.data().iter().all(|v| v.abs() <= 1.0 && v.is_finite()));
    }

    #[test]
    fn dropout_identity_paths() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let mut d = Dropout::new(0.5, 1).unwrap();
        assert_eq!(d.forward(&x, false).unwrap().data(), x.data());
        let mut d0 = Dropout::new(0.0, 1).unwrap();
        assert_eq!(d0.forward(&x, true).unwrap().data(), x.data());
        assert!(Dropout::<f64>::new(1.0, 1).is_err());
    }

    #[test]
    fn dropout_survivor_fraction() {
        let x = Tensor::filled(&[1_000_000], 1.0f32);
        let mut d = Dropout::new(0.5, 42).unwrap();
        let y = d.forward(&x, true).unwrap();
        let survivors = y.data().iter().filter(|v| **v != 0.0).count();
        let frac = survivors as f64 / 1e6;
        assert!((frac - 0.5).abs() < 0.002, "survivor fraction {frac}");
    }
}
