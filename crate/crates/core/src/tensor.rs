//! Dense channel-major tensors and the convolution kernels shared by the
//! backbone and the dual network.

use crate::error::{DntError, Result};

/// `C x H x W` tensor stored channel-major, row-major within a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(DntError::Shape(format!(
                "{} values for a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Tensor3 { channels, height, width, data })
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, i: usize, j: usize) -> &mut f64 {
        &mut self.data[(c * self.height + i) * self.width + j]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` for row-major operands, where `A`
/// is `m x k` after the optional transpose and `B` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index reachable through the
    // strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a `C x H x W` input into a `(C*k*k) x (H*W)` column matrix for a
/// stride-1 convolution with `k / 2` zero padding.
pub fn im2col(input: &Tensor3, k: usize) -> Vec<f64> {
    let (h, w) = (input.height, input.width);
    let pad = (k / 2) as isize;
    let mut cols = vec![0.0; input.channels * k * k * h * w];
    for c in 0..input.channels {
        let src = input.channel(c);
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * h * w..(row + 1) * h * w];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src_row = &src[si as usize * w..(si as usize + 1) * w];
                    let dst_row = &mut dst[i * w..(i + 1) * w];
                    let j0 = (-dj).max(0) as usize;
                    let j1 = (w as isize - dj).min(w as isize).max(0) as usize;
                    for j in j0..j1 {
                        dst_row[j] = src_row[(j as isize + dj) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto the input grid.
pub fn col2im(cols: &[f64], channels: usize, h: usize, w: usize, k: usize) -> Tensor3 {
    let pad = (k / 2) as isize;
    let mut out = Tensor3::zeros(channels, h, w);
    for c in 0..channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * h * w..(row + 1) * h * w];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                let dst = out.channel_mut(c);
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let j0 = (-dj).max(0) as usize;
                    let j1 = (w as isize - dj).min(w as isize).max(0) as usize;
                    for j in j0..j1 {
                        dst[si as usize * w + (j as isize + dj) as usize] += src[i * w + j];
                    }
                }
            }
        }
    }
    out
}

/// Square-kernel, stride-1, same-padded convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out x in x k x k`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients of a [`Conv2d`] layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrad {
    pub fn zeros_like(layer: &Conv2d) -> Self {
        ConvGrad { weight: vec![0.0; layer.weight.len()], bias: vec![0.0; layer.bias.len()] }
    }
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Returns the pre-activation output together with the unfolded input,
    /// which the backward pass reuses.
    pub fn forward(&self, input: &Tensor3) -> Result<(Tensor3, Vec<f64>)> {
        if input.channels != self.in_channels {
            return Err(DntError::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        let hw = input.plane();
        let cols = im2col(input, self.kernel);
        let mut out = Tensor3::zeros(self.out_channels, input.height, input.width);
        for (o, b) in self.bias.iter().enumerate() {
            out.channel_mut(o).fill(*b);
        }
        gemm(self.out_channels, self.fan_in(), hw, 1.0, &self.weight, false, &cols, false, 1.0, &mut out.data);
        Ok((out, cols))
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the layer input when `want_input` is set.
    pub fn backward(
        &self,
        cols: &[f64],
        grad_out: &Tensor3,
        grad: &mut ConvGrad,
        want_input: bool,
    ) -> Option<Tensor3> {
        let hw = grad_out.plane();
        gemm(self.out_channels, hw, self.fan_in(), 1.0, &grad_out.data, false, cols, true, 1.0, &mut grad.weight);
        for o in 0..self.out_channels {
            grad.bias[o] += grad_out.channel(o).iter().sum::<f64>();
        }
        if !want_input {
            return None;
        }
        let mut dcols = vec![0.0; self.fan_in() * hw];
        gemm(self.fan_in(), self.out_channels, hw, 1.0, &self.weight, true, &grad_out.data, false, 0.0, &mut dcols);
        Some(col2im(&dcols, self.in_channels, grad_out.height, grad_out.width, self.kernel))
    }
}

pub fn relu_inplace(t: &mut Tensor3) {
    for v in t.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// 2x2 max pooling with stride 2 (floor on odd sizes).
pub fn max_pool2(input: &Tensor3) -> Tensor3 {
    let (h, w) = (input.height / 2, input.width / 2);
    let mut out = Tensor3::zeros(input.channels, h, w);
    for c in 0..input.channels {
        for i in 0..h {
            for j in 0..w {
                let m = input
                    .at(c, 2 * i, 2 * j)
                    .max(input.at(c, 2 * i, 2 * j + 1))
                    .max(input.at(c, 2 * i + 1, 2 * j))
                    .max(input.at(c, 2 * i + 1, 2 * j + 1));
                *out.at_mut(c, i, j) = m;
            }
        }
    }
    out
}

/// Bilinear resampling of a single `h x w` plane with half-pixel centres
/// and edge clamping.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = vec![0.0; out_h * out_w];
    for i in 0..out_h {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for j in 0..out_w {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out[i * out_w + j] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}
