//! Per-stream adaptation network mapping backbone features to a target heat
//! map, its three training objectives, and momentum SGD.
//!
//! Architecture: conv 7x7 (128) -> ReLU -> conv 5x5 (64) -> ReLU ->
//! conv 3x3 (64) -> ReLU -> conv 1x1 (1) -> sigmoid. Every layer is
//! same-padded so the output grid equals the input grid.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{self, NamedTensor};
use crate::error::{DntError, Result};
use crate::features::{FeatureStack, HeatMap, LayerId};
use crate::geometry::Rect;
use crate::image::{Frame, ImagePatch};
use crate::tensor::{relu_inplace, Conv2d, ConvGrad, Tensor3};

pub const DEFAULT_WIDTHS: [usize; 3] = [128, 64, 64];
const KERNELS: [usize; 3] = [7, 5, 3];
const LAYER_NAMES: [&str; 4] = ["conv1", "conv2", "conv3", "head"];

#[derive(Debug, Clone, PartialEq)]
pub struct DualNetWeights {
    pub layers: [Conv2d; 4],
    pub stream: LayerId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualNetGrads {
    pub layers: [ConvGrad; 4],
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    cols: [Vec<f64>; 4],
    hidden: [Tensor3; 3],
    /// Sigmoid output, `h x w`.
    pub output: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl Activations {
    /// Post-ReLU output of the last trunk layer (64 channels by default).
    pub fn trunk(&self) -> &Tensor3 {
        &self.hidden[2]
    }

    pub fn heat_map(&self) -> HeatMap {
        HeatMap { height: self.height, width: self.width, values: self.output.clone(), normalized: true }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl DualNetWeights {
    pub fn zeros(in_channels: usize, widths: [usize; 3], stream: LayerId) -> Self {
        DualNetWeights {
            layers: [
                Conv2d::zeros(in_channels, widths[0], KERNELS[0]),
                Conv2d::zeros(widths[0], widths[1], KERNELS[1]),
                Conv2d::zeros(widths[1], widths[2], KERNELS[2]),
                Conv2d::zeros(widths[2], 1, 1),
            ],
            stream,
        }
    }

    /// He-normal trunk, Xavier-normal head, zero biases.
    pub fn init(in_channels: usize, widths: [usize; 3], stream: LayerId, seed: u64) -> Self {
        Self::init_scaled(in_channels, widths, stream, seed, 1.0)
    }

    /// As [`DualNetWeights::init`] with every standard deviation multiplied
    /// by `scale`.
    pub fn init_scaled(in_channels: usize, widths: [usize; 3], stream: LayerId, seed: u64, scale: f64) -> Self {
        let mut w = Self::zeros(in_channels, widths, stream);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (idx, layer) in w.layers.iter_mut().enumerate() {
            let gain = if idx < 3 { 2.0 } else { 1.0 };
            let dist = Normal::new(0.0, scale * (gain / layer.fan_in() as f64).sqrt()).unwrap();
            layer.weight.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        }
        w
    }

    /// Sets the head bias so a zero trunk output yields `p`, the expected
    /// label value. Training then starts near the background level instead
    /// of at 0.5.
    pub fn set_output_prior(&mut self, p: f64) {
        let p = p.clamp(1e-6, 1.0 - 1e-6);
        self.layers[3].bias[0] = (p / (1.0 - p)).ln();
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn widths(&self) -> [usize; 3] {
        [self.layers[0].out_channels, self.layers[1].out_channels, self.layers[2].out_channels]
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// `||W||^2` over the convolution kernels (biases are not decayed).
    pub fn weight_norm_sq(&self) -> f64 {
        self.layers.iter().flat_map(|l| l.weight.iter()).map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn activations(&self, input: &Tensor3) -> Result<Activations> {
        if input.channels != self.in_channels() {
            return Err(DntError::Shape(format!(
                "dual network expects {} channels, got {}",
                self.in_channels(),
                input.channels
            )));
        }
        let (z1, c1) = self.layers[0].forward(input)?;
        let mut a1 = z1;
        relu_inplace(&mut a1);
        let (mut a2, c2) = self.layers[1].forward(&a1)?;
        relu_inplace(&mut a2);
        let (mut a3, c3) = self.layers[2].forward(&a2)?;
        relu_inplace(&mut a3);
        let (z4, c4) = self.layers[3].forward(&a3)?;
        let output = z4.data.iter().map(|&z| sigmoid(z)).collect();
        Ok(Activations {
            cols: [c1, c2, c3, c4],
            hidden: [a1, a2, a3],
            output,
            height: input.height,
            width: input.width,
        })
    }

    /// Back-propagates `d loss / d output` and accumulates into `grads`.
    pub fn backward(&self, acts: &Activations, grad_output: &[f64], grads: &mut DualNetGrads) {
        let mut dz = Tensor3::zeros(1, acts.height, acts.width);
        for ((d, g), s) in dz.data.iter_mut().zip(grad_output).zip(&acts.output) {
            *d = g * s * (1.0 - s);
        }
        let mut upstream = dz;
        for idx in (0..4).rev() {
            let want_input = idx > 0;
            let d_in = self.layers[idx].backward(&acts.cols[idx], &upstream, &mut grads.layers[idx], want_input);
            if let Some(mut d) = d_in {
                // ReLU mask of the layer feeding this one
                for (g, a) in d.data.iter_mut().zip(&acts.hidden[idx - 1].data) {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
                upstream = d;
            }
        }
    }

    pub fn save(&self, bin_path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        for (name, l) in LAYER_NAMES.iter().zip(&self.layers) {
            tensors.push(NamedTensor {
                name: format!("{name}.weight"),
                shape: vec![l.out_channels, l.in_channels, l.kernel, l.kernel],
                values: l.weight.clone(),
            });
            tensors.push(NamedTensor { name: format!("{name}.bias"), shape: vec![l.out_channels], values: l.bias.clone() });
        }
        tensors.push(NamedTensor { name: "stream".into(), shape: vec![1], values: vec![self.stream.index() as f64 + 1.0] });
        checkpoint::write_archive(bin_path, &tensors)
    }

    pub fn load(bin_path: &Path) -> Result<Self> {
        let archive = checkpoint::read_archive(bin_path)?;
        let get = |name: &str| {
            archive.get(name).ok_or_else(|| DntError::Checkpoint(format!("missing tensor {name}")))
        };
        let stream = match get("stream")?.values.first().copied() {
            Some(v) if v == 1.0 => LayerId::Layer1,
            Some(v) if v == 2.0 => LayerId::Layer2,
            _ => return Err(DntError::Checkpoint("bad stream id".into())),
        };
        let w1 = get("conv1.weight")?;
        let widths = [w1.shape[0], get("conv2.weight")?.shape[0], get("conv3.weight")?.shape[0]];
        let mut w = Self::zeros(w1.shape[1], widths, stream);
        for (name, l) in LAYER_NAMES.iter().zip(w.layers.iter_mut()) {
            let wt = get(&format!("{name}.weight"))?;
            let b = get(&format!("{name}.bias"))?;
            if wt.values.len() != l.weight.len() || b.values.len() != l.bias.len() {
                return Err(DntError::Checkpoint(format!("{name} has inconsistent shape")));
            }
            l.weight.copy_from_slice(&wt.values);
            l.bias.copy_from_slice(&b.values);
        }
        Ok(w)
    }
}

impl DualNetGrads {
    pub fn zeros_like(w: &DualNetWeights) -> Self {
        DualNetGrads {
            layers: [
                ConvGrad::zeros_like(&w.layers[0]),
                ConvGrad::zeros_like(&w.layers[1]),
                ConvGrad::zeros_like(&w.layers[2]),
                ConvGrad::zeros_like(&w.layers[3]),
            ],
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params().into_iter().flat_map(|s| s.iter().copied()).collect()
    }

    fn add_weight_decay(&mut self, w: &DualNetWeights, beta: f64) {
        for (g, l) in self.layers.iter_mut().zip(&w.layers) {
            for (gv, wv) in g.weight.iter_mut().zip(&l.weight) {
                *gv += 2.0 * beta * wv;
            }
        }
    }
}

/// Runs the network on a backbone feature stack of the matching stream.
pub fn forward(w: &DualNetWeights, features: &FeatureStack) -> Result<HeatMap> {
    check_stream(w, features)?;
    Ok(w.activations(&features.values)?.heat_map())
}

fn check_stream(w: &DualNetWeights, features: &FeatureStack) -> Result<()> {
    if features.layer != w.stream {
        return Err(DntError::Shape(format!("{:?} features fed to the {:?} network", features.layer, w.stream)));
    }
    Ok(())
}

/// 2-D Gaussian label.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTargetMap {
    pub map: HeatMap,
    /// `(row, col)` in map index coordinates.
    pub center: (f64, f64),
    pub sigmas: (f64, f64),
}

/// Default label spread: `sigma = 0.3 x` target half-extent per axis.
pub const DEFAULT_LABEL_SIGMA_FACTOR: f64 = 0.3;

/// Gaussian label for a target rectangle given in map cell coordinates.
///
/// Cell `(i, j)` has its centre at `(i + 0.5, j + 0.5)`, so a rectangle whose
/// centre lies on a cell centre peaks at exactly 1 there. The centre is
/// clamped into the grid.
pub fn gaussian_target_map(rect: Rect, dims: (usize, usize), sigma_factor: f64) -> GaussianTargetMap {
    let (h, w) = dims;
    let (cx, cy) = rect.center();
    let c_r = (cy - 0.5).clamp(0.0, (h - 1) as f64);
    let c_c = (cx - 0.5).clamp(0.0, (w - 1) as f64);
    let s_r = (sigma_factor * rect.h.abs() / 2.0).max(1e-3);
    let s_c = (sigma_factor * rect.w.abs() / 2.0).max(1e-3);
    let mut values = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let dr = i as f64 - c_r;
            let dc = j as f64 - c_c;
            values.push((-(dr * dr / (2.0 * s_r * s_r) + dc * dc / (2.0 * s_c * s_c))).exp());
        }
    }
    GaussianTargetMap {
        map: HeatMap { height: h, width: w, values, normalized: true },
        center: (c_r, c_c),
        sigmas: (s_r, s_c),
    }
}

/// Label for a patch: the target rectangle (frame pixels) mapped through the
/// patch's source window onto an `h x w` feature grid.
pub fn label_for_patch(target: Rect, patch: &ImagePatch, dims: (usize, usize), sigma_factor: f64) -> HeatMap {
    let in_map = target.to_grid(&patch.source_rect, dims.1, dims.0);
    gaussian_target_map(in_map, dims, sigma_factor).map
}

/// Crops the base window translated by `(dx, dy)` frame pixels, resampled
/// to the base patch's pixel size.
pub fn shifted_patch(frame: &Frame, base: &ImagePatch, dx: f64, dy: f64) -> Result<ImagePatch> {
    let r = base.source_rect;
    frame.crop(Rect::new(r.x + dx, r.y + dy, r.w, r.h), base.width, base.height, base.frame_index)
}

/// `n` centre-shifted copies of the base patch, shifts uniform in
/// `[-max_shift, max_shift]^2` frame pixels. Out-of-frame pixels are zero.
pub fn sample_random_patches<R: Rng + ?Sized>(
    frame: &Frame,
    base: &ImagePatch,
    n: usize,
    max_shift: f64,
    rng: &mut R,
) -> Result<Vec<ImagePatch>> {
    if n == 0 {
        return Err(DntError::InvalidArgument("random patch count must be >= 1".into()));
    }
    (0..n)
        .map(|_| {
            let (dx, dy) = if max_shift > 0.0 {
                (rng.random_range(-max_shift..=max_shift), rng.random_range(-max_shift..=max_shift))
            } else {
                (0.0, 0.0)
            };
            shifted_patch(frame, base, dx, dy)
        })
        .collect()
}

/// Keeps values at or above `fraction * max`, zeroing the rest.
pub fn threshold_map(map: &HeatMap, fraction: f64) -> Result<HeatMap> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DntError::InvalidArgument(format!("threshold fraction {fraction} not in (0, 1)")));
    }
    let cut = fraction * map.max();
    let values = if map.max() <= 0.0 {
        vec![0.0; map.values.len()]
    } else {
        map.values.iter().map(|&v| if v >= cut { v } else { 0.0 }).collect()
    };
    Ok(HeatMap { height: map.height, width: map.width, values, normalized: map.normalized })
}

/// A network input paired with its Gaussian label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub features: FeatureStack,
    pub label: HeatMap,
}

/// Mean squared distance between two maps of equal size.
pub fn map_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Adds `weight * D(output, target)` to `grad` (w.r.t. `output`) and returns
/// the weighted distance.
fn accumulate_distance(output: &[f64], target: &[f64], weight: f64, grad: &mut [f64]) -> f64 {
    let p = output.len() as f64;
    for ((g, o), t) in grad.iter_mut().zip(output).zip(target) {
        *g += weight * 2.0 * (o - t) / p;
    }
    weight * map_distance(output, target)
}

fn check_sample(w: &DualNetWeights, s: &Sample) -> Result<()> {
    check_stream(w, &s.features)?;
    let (h, wd) = s.features.dims();
    if s.label.height != h || s.label.width != wd {
        return Err(DntError::Shape(format!(
            "label {}x{} for a {h}x{wd} feature grid",
            s.label.height, s.label.width
        )));
    }
    Ok(())
}

/// Weighted supervised term `weight * D(g_D(sample), label)`.
fn supervised(w: &DualNetWeights, s: &Sample, weight: f64, grads: &mut DualNetGrads) -> Result<f64> {
    check_sample(w, s)?;
    let acts = w.activations(&s.features.values)?;
    let mut g = vec![0.0; acts.output.len()];
    let loss = accumulate_distance(&acts.output, &s.label.values, weight, &mut g);
    w.backward(&acts, &g, grads);
    Ok(loss)
}

fn finish(w: &DualNetWeights, mut data: f64, mut grads: DualNetGrads, beta: f64) -> (f64, DualNetGrads) {
    data += beta * w.weight_norm_sq();
    grads.add_weight_decay(w, beta);
    (data, grads)
}

/// First-frame objective:
/// `(1/N) sum_i [D(g(p), t(p)) + D(g(p_i), t(p_i))] + beta ||W||^2`.
pub fn loss_init(w: &DualNetWeights, base: &Sample, randoms: &[Sample], beta: f64) -> Result<(f64, DualNetGrads)> {
    if randoms.is_empty() {
        return Err(DntError::InvalidArgument("loss_init needs at least one random patch".into()));
    }
    let mut grads = DualNetGrads::zeros_like(w);
    let inv_n = 1.0 / randoms.len() as f64;
    // the base term is identical for every i, so its average is itself
    let mut data = supervised(w, base, 1.0, &mut grads)?;
    for s in randoms {
        data += supervised(w, s, inv_n, &mut grads)?;
    }
    Ok(finish(w, data, grads, beta))
}

/// Event-triggered objective:
/// `D(thr(g(p_t)), thr(g(p_K))) + (1 - phi) D(g(p_t), t(p_t))
///  + (1/N) sum_i D(g(p_i), t(p_i)) + beta ||W||^2`.
///
/// `best_thresholded` is the stored, already thresholded map of the best
/// tracked patch and acts as a constant target. Without it the objective
/// falls back to [`loss_init`] around the current patch.
#[allow(clippy::too_many_arguments)]
pub fn loss_stochastic(
    w: &DualNetWeights,
    best_thresholded: Option<&HeatMap>,
    current: &Sample,
    randoms: &[Sample],
    phi: bool,
    fraction: f64,
    beta: f64,
) -> Result<(f64, DualNetGrads)> {
    let Some(best) = best_thresholded else {
        return loss_init(w, current, randoms, beta);
    };
    if randoms.is_empty() {
        return Err(DntError::InvalidArgument("loss_stochastic needs at least one random patch".into()));
    }
    check_sample(w, current)?;
    if best.height != current.label.height || best.width != current.label.width {
        return Err(DntError::Shape("stored best-tracked map does not match the current grid".into()));
    }
    let mut grads = DualNetGrads::zeros_like(w);
    let acts = w.activations(&current.features.values)?;
    let out = &acts.output;
    let mut g = vec![0.0; out.len()];

    let cut = fraction * out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mask: Vec<bool> = out.iter().map(|&v| v >= cut).collect();
    let thr: Vec<f64> = out.iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
    let p = out.len() as f64;
    let mut data = map_distance(&thr, &best.values);
    for ((gi, (t, b)), m) in g.iter_mut().zip(thr.iter().zip(&best.values)).zip(&mask) {
        if *m {
            *gi += 2.0 * (t - b) / p;
        }
    }
    if !phi {
        data += accumulate_distance(out, &current.label.values, 1.0, &mut g);
    }
    w.backward(&acts, &g, &mut grads);

    let inv_n = 1.0 / randoms.len() as f64;
    for s in randoms {
        data += supervised(w, s, inv_n, &mut grads)?;
    }
    Ok(finish(w, data, grads, beta))
}

/// Fixed-interval objective: `D(g(p_K), t(p_K)) + D(g(p_1), t(p_1)) + beta ||W||^2`.
pub fn loss_periodic(w: &DualNetWeights, best: &Sample, first: &Sample, beta: f64) -> Result<(f64, DualNetGrads)> {
    let mut grads = DualNetGrads::zeros_like(w);
    let mut data = supervised(w, best, 1.0, &mut grads)?;
    data += supervised(w, first, 1.0, &mut grads)?;
    Ok(finish(w, data, grads, beta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Weight decay `beta`.
    pub weight_decay: f64,
    pub iterations: usize,
    /// Random patches per iteration (`N`).
    pub random_patches: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-6,
            momentum: 0.6,
            weight_decay: 0.005,
            iterations: 50,
            random_patches: 8,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(DntError::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DntError::Config(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(DntError::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        if self.random_patches == 0 {
            return Err(DntError::Config("random_patches must be >= 1".into()));
        }
        Ok(())
    }
}

/// Momentum buffer with the same layout as the weights.
pub type Velocity = DualNetGrads;

/// `v' = momentum * v - lr * grad`, `W' = W + v'`.
pub fn sgd_step(w: &mut DualNetWeights, grads: &DualNetGrads, cfg: &TrainConfig, velocity: &mut Velocity) {
    let mut vel: Vec<&mut [f64]> = velocity
        .layers
        .iter_mut()
        .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
        .collect();
    for ((param, grad), v) in w.params_mut().into_iter().zip(grads.params()).zip(vel.iter_mut()) {
        for ((p, g), vi) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
            *vi = cfg.momentum * *vi - cfg.learning_rate * g;
            *p += *vi;
        }
    }
}

/// Runs `cfg.iterations` momentum-SGD steps. `loss_fn` is called once per
/// iteration with the current weights and the iteration index and is
/// expected to draw fresh random patches itself. Returns the loss recorded
/// before each step.
pub fn train<F>(w: &mut DualNetWeights, mut loss_fn: F, cfg: &TrainConfig) -> Result<Vec<f64>>
where
    F: FnMut(&DualNetWeights, usize) -> Result<(f64, DualNetGrads)>,
{
    cfg.validate()?;
    let mut velocity = DualNetGrads::zeros_like(w);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (loss, grads) = loss_fn(w, it)?;
        if !loss.is_finite() {
            return Err(DntError::NonFinite("training loss"));
        }
        trace.push(loss);
        sgd_step(w, &grads, cfg, &mut velocity);
    }
    Ok(trace)
}

/// Central finite-difference gradient of `loss` with respect to every
/// parameter. Slow; meant for verification only.
pub fn numeric_gradient<F>(w: &DualNetWeights, step: f64, mut loss: F) -> Result<Vec<f64>>
where
    F: FnMut(&DualNetWeights) -> Result<f64>,
{
    let mut probe = w.clone();
    let sizes: Vec<usize> = w.params().iter().map(|s| s.len()).collect();
    let mut out = Vec::with_capacity(sizes.iter().sum());
    for (slot, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = probe.params()[slot][i];
            probe.params_mut()[slot][i] = orig + step;
            let plus = loss(&probe)?;
            probe.params_mut()[slot][i] = orig - step;
            let minus = loss(&probe)?;
            probe.params_mut()[slot][i] = orig;
            out.push((plus - minus) / (2.0 * step));
        }
    }
    Ok(out)
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn feats(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng, stream: LayerId) -> FeatureStack {
        let data = (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        FeatureStack::new(Tensor3::from_vec(c, h, w, data).unwrap(), stream, 8).unwrap()
    }

    fn sample(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Sample {
        let features = feats(c, h, w, rng, LayerId::Layer1);
        let rect = Rect::new(rng.random_range(0.0..w as f64 / 2.0), rng.random_range(0.0..h as f64 / 2.0), 2.5, 3.0);
        Sample { features, label: gaussian_target_map(rect, (h, w), 0.3).map }
    }

    fn tiny_net(seed: u64) -> DualNetWeights {
        let mut w = DualNetWeights::init(2, [2, 2, 2], LayerId::Layer1, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for p in w.params_mut() {
            p.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        w
    }

    #[test]
    fn zero_weights_give_half_everywhere() {
        let w = DualNetWeights::zeros(3, [4, 3, 2], LayerId::Layer2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward(&w, &feats(3, 9, 7, &mut rng, LayerId::Layer2)).unwrap();
        assert_eq!((out.height, out.width), (9, 7));
        assert!(out.values.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn output_prior_sets_the_zero_trunk_level() {
        let mut w = DualNetWeights::zeros(3, [4, 3, 2], LayerId::Layer1);
        w.set_output_prior(0.03);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = forward(&w, &feats(3, 5, 5, &mut rng, LayerId::Layer1)).unwrap();
        assert!(out.values.iter().all(|v| (v - 0.03).abs() < 1e-12));
    }

    #[test]
    fn single_pixel_scalar_chain() {
        // On a 1x1 grid only the centre tap of each kernel sees data.
        let mut w = DualNetWeights::zeros(1, [1, 1, 1], LayerId::Layer1);
        let centre = |k: usize| (k / 2) * k + k / 2;
        w.layers[0].weight[centre(7)] = 2.0;
        w.layers[0].bias[0] = -0.5;
        w.layers[1].weight[centre(5)] = -1.5;
        w.layers[1].bias[0] = 3.0;
        w.layers[2].weight[centre(3)] = 0.7;
        w.layers[2].bias[0] = 0.1;
        w.layers[3].weight[0] = 1.3;
        w.layers[3].bias[0] = -0.2;
        let x = 0.8;
        let a1 = (2.0 * x - 0.5f64).max(0.0);
        let a2 = (-1.5 * a1 + 3.0f64).max(0.0);
        let a3 = (0.7 * a2 + 0.1f64).max(0.0);
        let expected = 1.0 / (1.0 + (-(1.3 * a3 - 0.2f64)).exp());
        let input = FeatureStack::new(Tensor3::from_vec(1, 1, 1, vec![x]).unwrap(), LayerId::Layer1, 8).unwrap();
        let out = forward(&w, &input).unwrap();
        assert!((out.values[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn stream_and_shape_mismatch_rejected() {
        let w = DualNetWeights::zeros(2, [2, 2, 2], LayerId::Layer1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(forward(&w, &feats(2, 8, 8, &mut rng, LayerId::Layer2)).is_err());
        assert!(forward(&w, &feats(3, 8, 8, &mut rng, LayerId::Layer1)).is_err());
    }

    #[test]
    fn gaussian_label_examples() {
        let g = gaussian_target_map(Rect::new(2.5, 3.5, 10.0, 10.0), (16, 16), 0.3);
        assert_eq!(g.center, (8.0, 7.0));
        assert_eq!(g.map.at(8, 7), 1.0);
        assert_eq!(g.map.at(8 + 2, 7), g.map.at(8 - 2, 7));
        assert!((g.sigmas.0 - 1.5).abs() < 1e-12);
        assert!(g.map.values.iter().all(|v| *v > 0.0 && *v <= 1.0));
    }

    #[test]
    fn gaussian_label_one_sigma_value() {
        // sigma_r = 0.3 * 5 = 1.5 rows; centre row 10 -> row 11.5 is off-grid,
        // so use a half-extent giving integer sigma: h = 20 -> sigma 3.
        let g = gaussian_target_map(Rect::new(0.5, 0.5, 20.0, 20.0), (24, 24), 0.3);
        assert_eq!(g.center, (10.0, 10.0));
        assert!((g.map.at(13, 10) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((g.map.at(13, 10) - 0.6065306597).abs() < 1e-9);
    }

    #[test]
    fn gaussian_label_translation_consistency() {
        let a = gaussian_target_map(Rect::new(4.5, 5.5, 6.0, 6.0), (20, 20), 0.3);
        let b = gaussian_target_map(Rect::new(7.5, 3.5, 6.0, 6.0), (20, 20), 0.3);
        // b is a shifted by (+3 cols, -2 rows)
        for i in 2..18 {
            for j in 0..17 {
                assert!((b.map.at(i - 2, j + 3) - a.map.at(i, j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn random_patches_zero_shift_and_determinism() {
        let mut frame = Frame::filled(100, 80, [0.2, 0.4, 0.6]);
        frame.set(50, 40, [1.0, 1.0, 1.0]);
        let base = frame.crop(Rect::new(30.0, 20.0, 40.0, 40.0), 40, 40, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let copies = sample_random_patches(&frame, &base, 3, 0.0, &mut rng).unwrap();
        assert!(copies.iter().all(|p| p == &base));
        let a = sample_random_patches(&frame, &base, 4, 12.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_random_patches(&frame, &base, 4, 12.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| (p.source_rect.x - 30.0).abs() <= 12.0 && p.source_rect.w == 40.0));
        assert!(sample_random_patches(&frame, &base, 0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn shift_by_thirty_pixels() {
        let (fw, fh) = (120, 60);
        let mut frame = Frame::filled(fw, fh, [0.0; 3]);
        for y in 0..fh {
            for x in 0..fw {
                let v = ((x * 7 + y * 13) % 97) as f64 / 97.0;
                frame.set(x, y, [v, v * 0.5, 1.0 - v]);
            }
        }
        let base = frame.crop(Rect::new(70.0, 10.0, 40.0, 40.0), 40, 40, 0).unwrap();
        let moved = shifted_patch(&frame, &base, 30.0, 0.0).unwrap();
        for i in 0..40 {
            for j in 0..40 {
                let fx = 100 + j;
                for c in 0..3 {
                    let expect = if fx < fw { frame.get(fx, 10 + i, c) } else { 0.0 };
                    assert_eq!(moved.pixels[(i * 40 + j) * 3 + c], expect);
                }
            }
        }
    }

    #[test]
    fn threshold_cases() {
        let binary = HeatMap::new(1, 4, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(threshold_map(&binary, 0.5).unwrap().values, binary.values);
        let ramp = HeatMap::new(1, 5, vec![0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
        assert_eq!(threshold_map(&ramp, 0.5).unwrap().values, vec![0.0, 0.0, 0.5, 0.75, 1.0]);
        let zero = HeatMap::filled(3, 3, 0.0);
        assert!(threshold_map(&zero, 0.5).unwrap().values.iter().all(|v| *v == 0.0));
        assert!(threshold_map(&ramp, 1.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vals: Vec<f64> = (0..30).map(|_| rng.random::<f64>()).collect();
        let m = HeatMap::new(5, 6, vals.clone()).unwrap();
        let t = threshold_map(&m, 0.3).unwrap();
        let mx = vals.iter().cloned().fold(0.0, f64::max);
        for (o, v) in t.values.iter().zip(&vals) {
            assert_eq!(*o, if *v >= 0.3 * mx { *v } else { 0.0 });
        }
    }

    #[test]
    fn losses_vanish_on_perfect_outputs() {
        let w = DualNetWeights::zeros(2, [2, 2, 2], LayerId::Layer1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mk = |rng: &mut ChaCha8Rng| Sample { features: feats(2, 4, 4, rng, LayerId::Layer1), label: HeatMap::filled(4, 4, 0.5) };
        let base = mk(&mut rng);
        let randoms = vec![mk(&mut rng), mk(&mut rng)];
        assert_eq!(loss_init(&w, &base, &randoms, 0.0).unwrap().0, 0.0);
        assert_eq!(loss_periodic(&w, &base, &randoms[0], 0.0).unwrap().0, 0.0);
        assert!(loss_init(&w, &base, &[], 0.0).is_err());

        // beta > 0 with zero data loss: only the decay term remains
        let mut w2 = w.clone();
        // conv2/conv3/head stay zero, so the output is still 0.5 everywhere
        w2.layers[0].weight[0] = 0.5;
        w2.layers[0].weight[1] = -2.0;
        let (l, _) = loss_init(&w2, &base, &randoms, 0.01).unwrap();
        assert!((l - 0.01 * (0.25 + 4.0)).abs() < 1e-15);
    }

    #[test]
    fn stochastic_loss_reductions() {
        let w = tiny_net(3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let current = sample(2, 4, 4, &mut rng);
        let randoms = vec![sample(2, 4, 4, &mut rng), sample(2, 4, 4, &mut rng)];
        let best = threshold_map(&forward(&w, &current.features).unwrap(), 0.5).unwrap();
        let beta = 0.003;
        // p_t = p_K and phi = 1: only the random term and the decay remain
        let (l, _) = loss_stochastic(&w, Some(&best), &current, &randoms, true, 0.5, beta).unwrap();
        let mut expect = beta * w.weight_norm_sq();
        for s in &randoms {
            expect += map_distance(&forward(&w, &s.features).unwrap().values, &s.label.values) / 2.0;
        }
        assert!((l - expect).abs() < 1e-14);
        // phi = 0 adds the supervised term on the current patch
        let (l0, _) = loss_stochastic(&w, Some(&best), &current, &randoms, false, 0.5, beta).unwrap();
        let sup = map_distance(&forward(&w, &current.features).unwrap().values, &current.label.values);
        assert!((l0 - (expect + sup)).abs() < 1e-14);
        // no stored map: loss_init around the current patch
        let (lf, _) = loss_stochastic(&w, None, &current, &randoms, false, 0.5, beta).unwrap();
        assert_eq!(lf, loss_init(&w, &current, &randoms, beta).unwrap().0);
    }

    #[test]
    fn periodic_with_identical_patches_doubles() {
        let w = tiny_net(4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = sample(2, 4, 4, &mut rng);
        let d = map_distance(&forward(&w, &s.features).unwrap().values, &s.label.values);
        let (l, _) = loss_periodic(&w, &s, &s, 0.02).unwrap();
        assert!((l - (2.0 * d + 0.02 * w.weight_norm_sq())).abs() < 1e-14);
    }

    fn check_grad<F>(w: &DualNetWeights, f: F)
    where
        F: Fn(&DualNetWeights) -> Result<(f64, DualNetGrads)>,
    {
        let analytic = f(w).unwrap().1.flatten();
        let numeric = numeric_gradient(w, 1e-6, |p| Ok(f(p)?.0)).unwrap();
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = tiny_net(21);
        let base = sample(2, 4, 4, &mut rng);
        let randoms = vec![sample(2, 4, 4, &mut rng), sample(2, 4, 4, &mut rng)];
        let best = threshold_map(&forward(&w, &randoms[1].features).unwrap(), 0.5).unwrap();
        check_grad(&w, |p| loss_init(p, &base, &randoms, 0.005));
        check_grad(&w, |p| loss_stochastic(p, Some(&best), &base, &randoms, false, 0.5, 0.005));
        check_grad(&w, |p| loss_periodic(p, &base, &randoms[0], 0.005));
    }

    #[test]
    fn sgd_step_cases() {
        let mut w = tiny_net(1);
        let orig = w.clone();
        let zero = DualNetGrads::zeros_like(&w);
        let mut v = DualNetGrads::zeros_like(&w);
        let cfg = TrainConfig { learning_rate: 0.1, momentum: 0.6, ..Default::default() };
        sgd_step(&mut w, &zero, &cfg, &mut v);
        assert_eq!(w, orig);

        // plain gradient descent with zero momentum
        let mut grad = DualNetGrads::zeros_like(&w);
        grad.layers[2].weight[1] = 2.0;
        let plain = TrainConfig { momentum: 0.0, ..cfg.clone() };
        sgd_step(&mut w, &grad, &plain, &mut v);
        assert!((w.layers[2].weight[1] - (orig.layers[2].weight[1] - 0.2)).abs() < 1e-15);

        // momentum recursion: v1 = -lr g1, v2 = m v1 - lr g2
        let mut w = orig.clone();
        let mut v = DualNetGrads::zeros_like(&w);
        let (g1, g2) = (1.5, -0.5);
        grad.layers[2].weight[1] = g1;
        sgd_step(&mut w, &grad, &cfg, &mut v);
        grad.layers[2].weight[1] = g2;
        sgd_step(&mut w, &grad, &cfg, &mut v);
        let v1 = -0.1 * g1;
        let v2 = 0.6 * v1 - 0.1 * g2;
        assert!((v.layers[2].weight[1] - v2).abs() < 1e-15);
        assert!((w.layers[2].weight[1] - (orig.layers[2].weight[1] + v1 + v2)).abs() < 1e-15);
    }

    #[test]
    fn train_identity_and_convex_surrogate() {
        let mut w = tiny_net(2);
        let orig = w.clone();
        let cfg = TrainConfig { iterations: 0, learning_rate: 0.01, ..Default::default() };
        let trace = train(&mut w, |_, _| unreachable!(), &cfg).unwrap();
        assert!(trace.is_empty());
        assert_eq!(w, orig);

        // f(W) = 0.5 ||W - W*||^2 decreases monotonically for a small step
        let target = tiny_net(99);
        let cfg = TrainConfig { iterations: 40, learning_rate: 0.05, momentum: 0.6, ..Default::default() };
        let trace = train(
            &mut w,
            |p, _| {
                let mut g = DualNetGrads::zeros_like(p);
                let mut loss = 0.0;
                let mut slots: Vec<&mut [f64]> =
                    g.layers.iter_mut().flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()]).collect();
                for ((gs, ps), ts) in slots.iter_mut().zip(p.params()).zip(target.params()) {
                    for ((gi, pi), ti) in gs.iter_mut().zip(ps).zip(ts) {
                        *gi = pi - ti;
                        loss += 0.5 * (pi - ti) * (pi - ti);
                    }
                }
                Ok((loss, g))
            },
            &cfg,
        )
        .unwrap();
        assert!(trace.windows(2).all(|p| p[1] < p[0]), "{trace:?}");
    }

    #[test]
    fn train_is_reproducible() {
        let run = || {
            let mut w = tiny_net(5);
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let cfg = TrainConfig { iterations: 5, learning_rate: 0.05, ..Default::default() };
            let base = sample(2, 6, 6, &mut ChaCha8Rng::seed_from_u64(1));
            let trace = train(
                &mut w,
                |p, _| {
                    let randoms = vec![sample(2, 6, 6, &mut rng), sample(2, 6, 6, &mut rng)];
                    loss_init(p, &base, &randoms, 0.005)
                },
                &cfg,
            )
            .unwrap();
            (w, trace)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip() {
        let w = DualNetWeights::init(3, [4, 3, 2], LayerId::Layer2, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        w.save(&path).unwrap();
        assert_eq!(DualNetWeights::load(&path).unwrap(), w);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { weight_decay: -1.0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn output_in_open_unit_interval_and_shape_preserved(seed in 0u64..10_000, h in 7usize..12, wd in 7usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = DualNetWeights::init(2, [3, 2, 2], LayerId::Layer1, seed);
            let out = forward(&w, &feats(2, h, wd, &mut rng, LayerId::Layer1)).unwrap();
            prop_assert_eq!((out.height, out.width), (h, wd));
            prop_assert!(out.values.iter().all(|v| *v > 0.0 && *v < 1.0));
        }

        #[test]
        fn data_losses_are_non_negative(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = tiny_net(seed);
            let base = sample(2, 5, 5, &mut rng);
            let r = vec![sample(2, 5, 5, &mut rng)];
            prop_assert!(loss_init(&w, &base, &r, 0.0).unwrap().0 >= 0.0);
            prop_assert!(loss_periodic(&w, &base, &r[0], 0.0).unwrap().0 >= 0.0);
            let best = threshold_map(&forward(&w, &r[0].features).unwrap(), 0.5).unwrap();
            prop_assert!(loss_stochastic(&w, Some(&best), &base, &r, false, 0.5, 0.0).unwrap().0 >= 0.0);
        }
    }
}
