//! Backbone feature extraction, Laplacian-of-Gaussian boundary maps, and
//! boundary-integrated prior maps.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint;
use crate::error::{DntError, Result};
use crate::image::ImagePatch;
use crate::tensor::{max_pool2, relu_inplace, resize_bilinear, Conv2d, Tensor3};

/// Single-channel 2-D map.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Set when the values are known to lie in `[0, 1]`.
    pub normalized: bool,
}

impl HeatMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(DntError::Shape(format!("{} values for a {height}x{width} map", values.len())));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(DntError::NonFinite("heat map"));
        }
        Ok(HeatMap { height, width, values, normalized: false })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        HeatMap { height, width, values: vec![value; height * width], normalized: (0.0..=1.0).contains(&value) }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Min-max rescale to `[0, 1]`; a (numerically) constant map becomes all
    /// zeros.
    pub fn min_max_normalized(&self) -> HeatMap {
        HeatMap { height: self.height, width: self.width, values: min_max(&self.values), normalized: true }
    }

    pub fn resized(&self, height: usize, width: usize) -> HeatMap {
        HeatMap {
            height,
            width,
            values: resize_bilinear(&self.values, self.height, self.width, height, width),
            normalized: self.normalized,
        }
    }
}

/// Range below which a map is treated as constant by [`min_max`].
pub const FLAT_RANGE: f64 = 1e-10;

pub(crate) fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > FLAT_RANGE * (1.0 + hi.abs().max(lo.abs()))) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / range).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerId {
    /// conv4-3 tap, stride 8.
    Layer1,
    /// conv5-3 tap, stride 16.
    Layer2,
}

impl LayerId {
    pub const BOTH: [LayerId; 2] = [LayerId::Layer1, LayerId::Layer2];

    pub fn index(self) -> usize {
        match self {
            LayerId::Layer1 => 0,
            LayerId::Layer2 => 1,
        }
    }
}

/// Multi-channel spatial feature maps from one backbone tap.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub values: Tensor3,
    pub layer: LayerId,
    /// Spatial downsampling factor relative to the input patch.
    pub stride: usize,
}

impl FeatureStack {
    pub fn new(values: Tensor3, layer: LayerId, stride: usize) -> Result<Self> {
        if values.channels == 0 {
            return Err(DntError::Shape("feature stack needs at least one channel".into()));
        }
        if !values.all_finite() {
            return Err(DntError::NonFinite("feature stack"));
        }
        Ok(FeatureStack { values, layer, stride })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.values.height, self.values.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatures {
    pub layer1: FeatureStack,
    pub layer2: FeatureStack,
}

impl LayerFeatures {
    pub fn get(&self, layer: LayerId) -> &FeatureStack {
        match layer {
            LayerId::Layer1 => &self.layer1,
            LayerId::Layer2 => &self.layer2,
        }
    }
}

/// A frozen feature extractor exposing the two tracking taps.
pub trait Backbone {
    /// Side of the square input patch, in pixels.
    fn input_size(&self) -> usize;

    /// `patch` must already be `input_size x input_size`.
    fn forward(&self, patch: &ImagePatch) -> Result<LayerFeatures>;
}

/// Convolutions per VGG-16 block; pooling follows each of the first four.
const VGG_BLOCKS: [usize; 5] = [2, 2, 3, 3, 3];

/// Channel widths of the standard 16-layer network.
pub const VGG16_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];

/// Narrow widths used by the seeded test backbone.
pub const TEST_WIDTHS: [usize; 5] = [4, 8, 16, 16, 16];

/// `(channels, height, width)` of the two taps for a given input side,
/// derived from the pooling schedule alone.
pub fn vgg_tap_shapes(widths: [usize; 5], input_size: usize) -> [(usize, usize, usize); 2] {
    let mut side = input_size;
    for _ in 0..3 {
        side /= 2;
    }
    let l1 = (widths[3], side, side);
    let l2 = (widths[4], side / 2, side / 2);
    [l1, l2]
}

/// VGG-16 convolutional trunk (13 conv layers, 3x3, four 2x2 max pools).
#[derive(Debug, Clone)]
pub struct VggBackbone {
    convs: Vec<Conv2d>,
    input_size: usize,
    pixel_scale: f64,
    mean: [f64; 3],
}

impl VggBackbone {
    /// Random He-initialised weights with small random biases, fully
    /// determined by `seed`.
    pub fn seeded(widths: [usize; 5], input_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bias = Normal::new(0.0, 0.01).unwrap();
        let mut convs = Vec::with_capacity(13);
        let mut c_in = 3;
        for (block, &n) in VGG_BLOCKS.iter().enumerate() {
            for _ in 0..n {
                let mut conv = Conv2d::zeros(c_in, widths[block], 3);
                let he = Normal::new(0.0, (2.0 / conv.fan_in() as f64).sqrt()).unwrap();
                conv.weight.iter_mut().for_each(|w| *w = he.sample(&mut rng));
                conv.bias.iter_mut().for_each(|b| *b = bias.sample(&mut rng));
                convs.push(conv);
                c_in = widths[block];
            }
        }
        VggBackbone { convs, input_size, pixel_scale: 1.0, mean: [0.485, 0.456, 0.406] }
    }

    /// Loads `conv{block}_{index}.weight` / `.bias` tensors from a tensor
    /// archive, e.g. converted ImageNet VGG-16 weights.
    pub fn from_archive(path: &Path, input_size: usize) -> Result<Self> {
        let archive = checkpoint::read_archive(path)
            .map_err(|e| DntError::ModelUnavailable(format!("{}: {e}", path.display())))?;
        let mut convs = Vec::with_capacity(13);
        let mut c_in = 3;
        for (block, &n) in VGG_BLOCKS.iter().enumerate() {
            for idx in 0..n {
                let name = format!("conv{}_{}", block + 1, idx + 1);
                let missing = || DntError::ModelUnavailable(format!("archive lacks {name}"));
                let w = archive.get(&format!("{name}.weight")).ok_or_else(missing)?;
                let b = archive.get(&format!("{name}.bias")).ok_or_else(missing)?;
                if w.shape.len() != 4 || w.shape[1] != c_in || w.shape[2] != 3 || w.shape[3] != 3 {
                    return Err(DntError::ModelUnavailable(format!("{name}.weight has shape {:?}", w.shape)));
                }
                let out = w.shape[0];
                if b.values.len() != out {
                    return Err(DntError::ModelUnavailable(format!("{name}.bias has {} values", b.values.len())));
                }
                let mut conv = Conv2d::zeros(c_in, out, 3);
                conv.weight.copy_from_slice(&w.values);
                conv.bias.copy_from_slice(&b.values);
                convs.push(conv);
                c_in = out;
            }
        }
        // Caffe-style preprocessing: 0..255 scale, per-channel mean.
        Ok(VggBackbone { convs, input_size, pixel_scale: 255.0, mean: [123.68, 116.779, 103.939] })
    }

    pub fn with_preprocessing(mut self, pixel_scale: f64, mean: [f64; 3]) -> Self {
        self.pixel_scale = pixel_scale;
        self.mean = mean;
        self
    }

    pub fn widths(&self) -> [usize; 5] {
        let mut w = [0; 5];
        let mut idx = 0;
        for (block, &n) in VGG_BLOCKS.iter().enumerate() {
            idx += n;
            w[block] = self.convs[idx - 1].out_channels;
        }
        w
    }

    pub fn convs(&self) -> &[Conv2d] {
        &self.convs
    }

    /// Runs the trunk on an already preprocessed `3 x H x W` tensor.
    pub fn forward_tensor(&self, input: &Tensor3) -> Result<LayerFeatures> {
        let mut x = input.clone();
        let mut layer = 0;
        let mut taps = Vec::with_capacity(2);
        for (block, &n) in VGG_BLOCKS.iter().enumerate() {
            for _ in 0..n {
                let (mut y, _) = self.convs[layer].forward(&x)?;
                relu_inplace(&mut y);
                x = y;
                layer += 1;
            }
            match block {
                3 => taps.push(FeatureStack::new(x.clone(), LayerId::Layer1, 8)?),
                4 => taps.push(FeatureStack::new(x.clone(), LayerId::Layer2, 16)?),
                _ => {}
            }
            if block < 4 {
                x = max_pool2(&x);
            }
        }
        let layer2 = taps.pop().unwrap();
        let layer1 = taps.pop().unwrap();
        Ok(LayerFeatures { layer1, layer2 })
    }
}

impl Backbone for VggBackbone {
    fn input_size(&self) -> usize {
        self.input_size
    }

    fn forward(&self, patch: &ImagePatch) -> Result<LayerFeatures> {
        if patch.width != self.input_size || patch.height != self.input_size {
            return Err(DntError::Shape(format!(
                "backbone expects {0}x{0} input, got {1}x{2}",
                self.input_size, patch.width, patch.height
            )));
        }
        patch.check_finite()?;
        self.forward_tensor(&patch.to_tensor(self.pixel_scale, self.mean))
    }
}

/// Resizes `patch` to the backbone's canonical input and runs it.
pub fn extract_features<B: Backbone + ?Sized>(backbone: &B, patch: &ImagePatch) -> Result<LayerFeatures> {
    let side = backbone.input_size();
    if patch.width == side && patch.height == side {
        backbone.forward(patch)
    } else {
        backbone.forward(&patch.resized(side, side))
    }
}

/// Discrete zero-sum Laplacian-of-Gaussian kernel, `k x k`, row-major.
pub fn log_kernel(sigma: f64, kernel_size: usize) -> Vec<f64> {
    let half = (kernel_size / 2) as isize;
    let s2 = sigma * sigma;
    let mut k = Vec::with_capacity(kernel_size * kernel_size);
    for i in -half..=half {
        for j in -half..=half {
            let r2 = (i * i + j * j) as f64;
            k.push((r2 - 2.0 * s2) / (s2 * s2) * (-r2 / (2.0 * s2)).exp());
        }
    }
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    k.iter_mut().for_each(|v| *v -= mean);
    k
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Signed LoG response of a single-channel image, reflect-padded, same size.
pub fn log_response(gray: &[f64], height: usize, width: usize, sigma: f64, kernel_size: usize) -> Vec<f64> {
    let kernel = log_kernel(sigma, kernel_size);
    let half = (kernel_size / 2) as isize;
    let mut out = vec![0.0; height * width];
    for i in 0..height as isize {
        for j in 0..width as isize {
            let mut acc = 0.0;
            for ki in -half..=half {
                let si = reflect(i - ki, height);
                let row = &gray[si * width..(si + 1) * width];
                let krow = &kernel[((ki + half) as usize) * kernel_size..];
                for kj in -half..=half {
                    acc += krow[(kj + half) as usize] * row[reflect(j - kj, width)];
                }
            }
            out[i as usize * width + j as usize] = acc;
        }
    }
    out
}

/// Boundary map: `|LoG * gray(patch)|`, min-max normalised to `[0, 1]`.
pub fn log_boundary_map(patch: &ImagePatch, sigma: f64, kernel_size: usize) -> Result<HeatMap> {
    if kernel_size < 3 || kernel_size % 2 == 0 {
        return Err(DntError::InvalidArgument(format!("LoG kernel size {kernel_size} must be odd and >= 3")));
    }
    if !(sigma > 0.0) {
        return Err(DntError::InvalidArgument(format!("LoG sigma {sigma} must be positive")));
    }
    patch.check_finite()?;
    let response = log_response(&patch.grayscale(), patch.height, patch.width, sigma, kernel_size);
    let magnitude: Vec<f64> = response.iter().map(|v| v.abs()).collect();
    // Pixel values live in [0, 1]; anything this small is round-off.
    let values = if magnitude.iter().cloned().fold(0.0, f64::max) < 1e-9 {
        vec![0.0; magnitude.len()]
    } else {
        min_max(&magnitude)
    };
    Ok(HeatMap { height: patch.height, width: patch.width, values, normalized: true })
}

/// Element-wise product of the boundary map (resampled to the stack's grid)
/// with every feature channel.
pub fn integrate(boundary: &HeatMap, features: &FeatureStack) -> Result<FeatureStack> {
    if !boundary.values.iter().all(|v| v.is_finite()) {
        return Err(DntError::NonFinite("boundary map"));
    }
    let (h, w) = features.dims();
    let b = resize_bilinear(&boundary.values, boundary.height, boundary.width, h, w);
    let mut out = features.values.clone();
    for c in 0..out.channels {
        for (v, s) in out.channel_mut(c).iter_mut().zip(&b) {
            *v *= s;
        }
    }
    FeatureStack::new(out, features.layer, features.stride)
}

/// Channel-wise mean, min-max normalised.
pub fn channel_mean(features: &FeatureStack) -> HeatMap {
    let t = &features.values;
    let mut mean = vec![0.0; t.plane()];
    for c in 0..t.channels {
        for (m, v) in mean.iter_mut().zip(t.channel(c)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t.channels as f64);
    HeatMap { height: t.height, width: t.width, values: min_max(&mean), normalized: true }
}
