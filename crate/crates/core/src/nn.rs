//! Layer primitives on top of candle tensors, all differentiable.

use candle_core::{DType, Device, Tensor, Var, D};

use crate::error::{Error, Result};
use crate::params::{Init, Scope};

/// Whether batch-norm layers use batch statistics (and update their
/// running estimates) or the stored running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scope: &mut Scope<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = scope.param(
            "weight",
            &[out_channels, in_channels, kernel, kernel],
            Init::KaimingNormal { fan_in },
        )?;
        let bias = if bias {
            Some(scope.param("bias", &[out_channels], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    /// Stride-1, same-padded convolution with a bias and an explicit weight
    /// initialisation.
    pub fn with_init(
        scope: &mut Scope<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = scope.param("weight", &[out_channels, in_channels, kernel, kernel], init)?;
        let bias = Some(scope.param("bias", &[out_channels], Init::Zeros)?);
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.padding, self.stride)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, self.out_channels, 1, 1))?)?,
            None => y,
        })
    }

    /// Same as `forward(&cat(parts, 1))` without materialising the
    /// concatenation; each part meets its slice of the input channels.
    pub fn forward_concat(&self, parts: &[&Tensor]) -> Result<Tensor> {
        let mut offset = 0;
        let mut y: Option<Tensor> = None;
        for part in parts {
            let c = part.dim(1)?;
            let w = self.weight.narrow(1, offset, c)?;
            let term = conv2d(part, &w, self.padding, self.stride)?;
            y = Some(match y {
                Some(acc) => (acc + term)?,
                None => term,
            });
            offset += c;
        }
        if offset != self.in_channels {
            return Err(Error::shape("conv input channels", &[self.in_channels], &[offset]));
        }
        let y = y.expect("channel count checked");
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, self.out_channels, 1, 1))?)?,
            None => y,
        })
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    /// Multiply-accumulates for one `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_size(h, w);
        (self.in_channels * self.out_channels * self.kernel * self.kernel * oh * ow) as u64
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
}

/// Transposed convolution; weight layout `(in, out, k, k)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        scope: &mut Scope<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = out_channels * kernel * kernel;
        let weight = scope.param(
            "weight",
            &[in_channels, out_channels, kernel, kernel],
            Init::KaimingNormal { fan_in },
        )?;
        let bias = scope.param("bias", &[out_channels], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, self.padding, 0, self.stride, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.out_channels, 1, 1))?)?)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n - 1) * self.stride + self.kernel - 2 * self.padding;
        (f(h), f(w))
    }

    /// Each input pixel scatters into a `k x k` window of every output channel.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (self.in_channels * self.out_channels * self.kernel * self.kernel * h * w) as u64
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    channels: usize,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(scope: &mut Scope<'_>, channels: usize) -> Result<Self> {
        let gamma = scope.param("weight", &[channels], Init::Ones)?;
        let beta = scope.param("bias", &[channels], Init::Zeros)?;
        scope.buffer("running_mean", &[channels], Init::Zeros)?;
        scope.buffer("running_var", &[channels], Init::Ones)?;
        let running_mean = scope.buffer_var("running_mean").expect("just inserted");
        let running_var = scope.buffer_var("running_var").expect("just inserted");
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let shape = (1, self.channels, 1, 1);
        let (mean, var) = match mode {
            Mode::Train => {
                let (b, _, h, w) = x.dims4()?;
                let n = (b * h * w) as f64;
                let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered
                    .sqr()?
                    .mean_keepdim(0)?
                    .mean_keepdim(2)?
                    .mean_keepdim(3)?;
                let m = self.momentum;
                let batch_mean = mean.detach().flatten_all()?;
                let unbiased = (var.detach().flatten_all()? * (n / (n - 1.0).max(1.0)))?;
                let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (batch_mean * m)?)?;
                let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.as_tensor().reshape(shape)?,
                self.running_var.as_tensor().reshape(shape)?,
            ),
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape(shape)?)?
            .broadcast_add(&self.beta.reshape(shape)?)?)
    }
}

pub fn relu6(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?.minimum(6.0)?)
}

/// Logistic function written through `tanh` so the backward pass stays
/// finite for large-magnitude inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Interpolation weights for 1-D bilinear resampling with half-pixel
/// centres (`align_corners = false`). Row `i` holds the weights of output
/// sample `i` over the input samples.
pub fn bilinear_weights(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for i in 0..output {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[i * input + i0] += 1.0 - frac;
        m[i * input + i1] += frac;
    }
    m
}

fn weight_tensor(input: usize, output: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(bilinear_weights(input, output), (output, input), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of a `(B, C, H, W)` tensor, expressed as two matrix
/// products so gradients flow through it.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let (dtype, device) = (x.dtype(), x.device());
    let rw_t = weight_tensor(w, out_w, dtype, device)?.t()?.contiguous()?;
    let rh = weight_tensor(h, out_h, dtype, device)?;
    let y = x.reshape((b * c * h, w))?.matmul(&rw_t)?;
    let y = y.reshape((b * c, h, out_w))?;
    let rh = rh.unsqueeze(0)?.broadcast_as((b * c, out_h, h))?.contiguous()?;
    Ok(rh.matmul(&y)?.reshape((b, c, out_h, out_w))?)
}

/// Largest im2col buffer (elements) built for a stride-1 convolution;
/// bigger inputs use candle's convolution kernel.
const IM2COL_LIMIT: usize = 1 << 25;

/// `x.conv2d(w, padding, stride, 1, 1)`. Stride-1 convolutions are written
/// as matrix products (im2col for k > 1) so the backward pass runs on gemm.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (cout, _, k, _) = w.dims4()?;
    if stride == 1 {
        let (oh, ow) = (h + 2 * padding + 1 - k, wd + 2 * padding + 1 - k);
        if k == 1 && padding == 0 {
            let w = w.reshape((cout, c))?.unsqueeze(0)?.broadcast_as((b, cout, c))?.contiguous()?;
            return Ok(w.matmul(&x.reshape((b, c, h * wd))?)?.reshape((b, cout, h, wd))?);
        }
        if b * c * k * k * oh * ow <= IM2COL_LIMIT {
            let xp = x.pad_with_zeros(2, padding, padding)?.pad_with_zeros(3, padding, padding)?;
            let mut taps = Vec::with_capacity(k * k);
            for dy in 0..k {
                for dx in 0..k {
                    taps.push(xp.narrow(2, dy, oh)?.narrow(3, dx, ow)?);
                }
            }
            let cols = Tensor::stack(&taps, 2)?.reshape((b, c * k * k, oh * ow))?;
            let w = w
                .reshape((cout, c * k * k))?
                .unsqueeze(0)?
                .broadcast_as((b, cout, c * k * k))?
                .contiguous()?;
            return Ok(w.matmul(&cols)?.reshape((b, cout, oh, ow))?);
        }
    }
    // candle's CPU kernel for k > 1 mistakes a contiguous (B, C, H, W)
    // input with C == H == W for a channels-last one; such inputs get one
    // extra zero column that is trimmed from the output again.
    if k > 1 && c == h && c == wd {
        let out_w = (wd + 2 * padding - k) / stride + 1;
        let y = x.pad_with_zeros(3, 0, 1)?.conv2d(w, padding, stride, 1, 1)?;
        return Ok(y.narrow(3, 0, out_w)?);
    }
    Ok(x.conv2d(w, padding, stride, 1, 1)?)
}

/// 3x3 max pooling, stride 2, padding 1, for non-negative inputs (zero
/// padding then equals `-inf` padding). Built from element-wise maxima so
/// it is differentiable.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let x = pool_axis_3s2(x, 3)?;
    pool_axis_3s2(&x, 2)
}

fn pool_axis_3s2(x: &Tensor, axis: usize) -> Result<Tensor> {
    let n = x.dim(axis)?;
    let out = (n + 2 - 3) / 2 + 1;
    // Padded length 2*out + 2 holds every window start 2i and the trailing 2i+2.
    let padded_len = 2 * out + 2;
    let xp = x.pad_with_zeros(axis, 1, padded_len - n - 1)?;
    let mut dims = xp.dims().to_vec();
    dims[axis] = out + 1;
    dims.insert(axis + 1, 2);
    let pairs = xp.reshape(dims)?;
    let even = pairs.narrow(axis + 1, 0, 1)?.squeeze(axis + 1)?;
    let odd = pairs.narrow(axis + 1, 1, 1)?.squeeze(axis + 1)?;
    let a = even.narrow(axis, 0, out)?;
    let b = odd.narrow(axis, 0, out)?;
    let c = even.narrow(axis, 1, out)?;
    Ok(a.maximum(&b)?.maximum(&c)?)
}

/// 2x2 max pooling with stride 2 (floor mode), built from element-wise
/// maxima like the 3x3 pool.
pub fn max_pool_2x2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let x = x.narrow(2, 0, h - h % 2)?.narrow(3, 0, w - w % 2)?;
    let x = pool_axis_2(&x, 3)?;
    pool_axis_2(&x, 2)
}

fn pool_axis_2(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut dims = x.dims().to_vec();
    dims[axis] /= 2;
    dims.insert(axis + 1, 2);
    let pairs = x.reshape(dims)?;
    let a = pairs.narrow(axis + 1, 0, 1)?.squeeze(axis + 1)?;
    let b = pairs.narrow(axis + 1, 1, 1)?.squeeze(axis + 1)?;
    Ok(a.maximum(&b)?)
}

/// Mean over every dimension except the first: `(B, ...) -> (B,)`.
pub fn mean_per_sample(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    Ok(x.reshape((b, ()))?.mean(D::Minus1)?)
}
