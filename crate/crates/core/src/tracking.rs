//! Candidate sampling, confidence scoring, anomaly detection and the
//! per-frame tracking loop with its online updates.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::dualnet::{
    label_for_patch, loss_init, loss_periodic, loss_stochastic, sample_random_patches, sgd_step, threshold_map,
    DualNetGrads, DualNetWeights, Sample, TrainConfig,
};
use crate::error::{DntError, Result};
use crate::features::{
    channel_mean, extract_features, integrate, log_boundary_map, Backbone, FeatureStack, HeatMap, LayerFeatures,
    LayerId,
};
use crate::geometry::Rect;
use crate::icar::{self, IcarConfig};
use crate::image::{Frame, ImagePatch};

/// Per-frame bounds on the scale change relative to the previous state.
pub const SCALE_CLAMP: (f64, f64) = (0.5, 2.0);

/// Centre and scale of the target; the box is the initial size times `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TargetState {
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
    pub base_w: f64,
    pub base_h: f64,
}

impl TargetState {
    pub fn from_rect(r: Rect) -> Result<Self> {
        if !r.is_finite() || !(r.w > 0.0 && r.h > 0.0) {
            return Err(DntError::InvalidArgument(format!("target rectangle {r:?} has no area")));
        }
        let (cx, cy) = r.center();
        Ok(TargetState { cx, cy, scale: 1.0, base_w: r.w, base_h: r.h })
    }

    pub fn rect(&self) -> Rect {
        Rect::from_center(self.cx, self.cy, self.base_w * self.scale, self.base_h * self.scale)
    }

    pub fn area(&self) -> f64 {
        self.rect().area()
    }
}

/// Diagonal Gaussian random walk over `(x, y, scale)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionModel {
    pub var_x: f64,
    pub var_y: f64,
    pub var_scale: f64,
}

impl Default for MotionModel {
    fn default() -> Self {
        MotionModel { var_x: 10.0, var_y: 10.0, var_scale: 0.01 }
    }
}

impl MotionModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("motion_var_x", self.var_x), ("motion_var_y", self.var_y), ("motion_var_scale", self.var_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DntError::Config(format!("{name} must be a finite non-negative variance, got {v}")));
            }
        }
        Ok(())
    }
}

/// `r` independent draws around `prev`, scale clamped to
/// [`SCALE_CLAMP`] times the previous scale.
pub fn sample_candidates<R: Rng + ?Sized>(
    prev: &TargetState,
    motion: &MotionModel,
    r: usize,
    rng: &mut R,
) -> Vec<TargetState> {
    let nx = Normal::new(0.0, motion.var_x.sqrt()).expect("validated variance");
    let ny = Normal::new(0.0, motion.var_y.sqrt()).expect("validated variance");
    let ns = Normal::new(0.0, motion.var_scale.sqrt()).expect("validated variance");
    let (lo, hi) = (SCALE_CLAMP.0 * prev.scale, SCALE_CLAMP.1 * prev.scale);
    (0..r)
        .map(|_| TargetState {
            cx: prev.cx + nx.sample(rng),
            cy: prev.cy + ny.sample(rng),
            scale: (prev.scale + ns.sample(rng)).clamp(lo, hi),
            ..*prev
        })
        .collect()
}

/// Summed-area table of a heat map, for coverage-weighted box sums.
#[derive(Debug, Clone)]
pub struct BoxSums {
    height: usize,
    width: usize,
    table: Vec<f64>,
}

impl BoxSums {
    pub fn new(map: &HeatMap) -> Self {
        let (h, w) = (map.height, map.width);
        let stride = w + 1;
        let mut table = vec![0.0; (h + 1) * stride];
        for i in 0..h {
            let mut row = 0.0;
            for j in 0..w {
                row += map.values[i * w + j];
                table[(i + 1) * stride + j + 1] = table[i * stride + j + 1] + row;
            }
        }
        BoxSums { height: h, width: w, table }
    }

    /// Integral of the piecewise-constant map over `[0, x] x [0, y]`; the
    /// table is exact at integer corners and bilinear in between.
    fn cumulative(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, self.width as f64);
        let y = y.clamp(0.0, self.height as f64);
        let (j0, i0) = ((x.floor() as usize).min(self.width.saturating_sub(1)), (y.floor() as usize).min(self.height.saturating_sub(1)));
        let (tx, ty) = (x - j0 as f64, y - i0 as f64);
        let s = self.width + 1;
        let at = |i: usize, j: usize| self.table[i * s + j];
        let top = at(i0, j0) * (1.0 - tx) + at(i0, j0 + 1) * tx;
        let bottom = at(i0 + 1, j0) * (1.0 - tx) + at(i0 + 1, j0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    pub fn sum(&self, rect: &Rect) -> f64 {
        if self.width == 0 || self.height == 0 || !(rect.w > 0.0 && rect.h > 0.0) {
            return 0.0;
        }
        self.cumulative(rect.right(), rect.bottom()) - self.cumulative(rect.x, rect.bottom())
            - self.cumulative(rect.right(), rect.y)
            + self.cumulative(rect.x, rect.y)
    }
}

/// Sum of map values inside `rect_in_map`, border cells weighted by the
/// fraction of their area the rectangle covers.
pub fn candidate_confidence(v: &HeatMap, rect_in_map: &Rect) -> f64 {
    BoxSums::new(v).sum(rect_in_map)
}

/// `(area_candidate / area_prev_best) * c`.
pub fn scale_weight(c: f64, area_candidate: f64, area_prev_best: f64) -> f64 {
    area_candidate / area_prev_best * c
}

/// Divides by the largest magnitude so the best score of a stream is 1.
pub fn normalize_by_max(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if m > 0.0 {
        scores.iter().map(|s| s / m).collect()
    } else {
        scores.to_vec()
    }
}

/// Index and value of the best `lambda * s1 + (1 - lambda) * s2`; the lowest
/// index wins ties.
pub fn fuse_and_select(layer1: &[f64], layer2: &[f64], lambda: f64) -> Result<(usize, f64)> {
    if layer1.len() != layer2.len() || layer1.is_empty() {
        return Err(DntError::Shape(format!("{} vs {} candidate scores", layer1.len(), layer2.len())));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, (a, b)) in layer1.iter().zip(layer2).enumerate() {
        let f = lambda * a + (1.0 - lambda) * b;
        if f > best.1 {
            best = (i, f);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AnomalyRule {
    /// `mu_C - c < theta`.
    Literal,
    /// `|mu_C - c| > theta`.
    Deviation,
}

impl std::str::FromStr for AnomalyRule {
    type Err = DntError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(AnomalyRule::Literal),
            "deviation" => Ok(AnomalyRule::Deviation),
            _ => Err(DntError::Config(format!("unknown anomaly_rule {s:?} (literal|deviation)"))),
        }
    }
}

impl std::fmt::Display for AnomalyRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AnomalyRule::Literal => "literal",
            AnomalyRule::Deviation => "deviation",
        })
    }
}

/// `c_hat / area_prev_best`.
pub fn normalized_confidence(c_hat: f64, area_prev_best: f64) -> f64 {
    c_hat / area_prev_best
}

/// Drift/occlusion test against the running mean of past normalised
/// confidences. Always false before any confidence has been recorded.
pub fn detect_anomaly(memory: &TrackerMemory, normalized: f64, theta: f64, rule: AnomalyRule) -> bool {
    let Some(mu) = memory.mean_confidence() else {
        return false;
    };
    match rule {
        AnomalyRule::Literal => mu - normalized < theta,
        AnomalyRule::Deviation => (mu - normalized).abs() > theta,
    }
}

/// A tracked patch kept for later updates.
#[derive(Debug, Clone)]
pub struct BufferEntry {
    pub patch: ImagePatch,
    /// Target box in frame pixels at the time the patch was taken.
    pub target: Rect,
    pub confidence: f64,
    pub features: LayerFeatures,
    /// Thresholded dual-network output, one per stream.
    pub thresholded: [HeatMap; 2],
}

impl BufferEntry {
    pub fn sample(&self, layer: LayerId, label_sigma_factor: f64) -> Sample {
        let features = self.features.get(layer).clone();
        let label = label_for_patch(self.target, &self.patch, features.dims(), label_sigma_factor);
        Sample { features, label }
    }
}

#[derive(Debug, Clone)]
pub struct TrackerMemory {
    confidence_sum: f64,
    confidence_count: usize,
    pub buffer: VecDeque<BufferEntry>,
    pub capacity: usize,
    pub first: BufferEntry,
    /// Frames processed since initialisation.
    pub frame_index: usize,
}

impl TrackerMemory {
    pub fn new(first: BufferEntry, capacity: usize) -> Self {
        TrackerMemory {
            confidence_sum: 0.0,
            confidence_count: 0,
            buffer: VecDeque::with_capacity(capacity),
            capacity,
            first,
            frame_index: 0,
        }
    }

    pub fn mean_confidence(&self) -> Option<f64> {
        (self.confidence_count > 0).then(|| self.confidence_sum / self.confidence_count as f64)
    }

    pub fn record_confidence(&mut self, c: f64) {
        self.confidence_sum += c;
        self.confidence_count += 1;
    }

    pub fn push(&mut self, entry: BufferEntry) {
        if self.capacity == 0 {
            return;
        }
        while self.buffer.len() >= self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(entry);
    }
}

/// Highest-confidence buffered entry (earliest on ties), or the first-frame
/// entry when the buffer is empty.
pub fn select_best_tracked(memory: &TrackerMemory) -> &BufferEntry {
    let mut best: Option<&BufferEntry> = None;
    for e in &memory.buffer {
        if best.is_none_or(|b| e.confidence > b.confidence) {
            best = Some(e);
        }
    }
    best.unwrap_or(&memory.first)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Weight of the LAYER1 stream when fusing scores.
    pub fusion_weight: f64,
    pub anomaly_threshold: f64,
    pub anomaly_rule: AnomalyRule,
    pub candidates: usize,
    pub update_period: usize,
    pub buffer_size: usize,
    pub motion: MotionModel,
    pub rng_seed: u64,
    /// Search-region side as a multiple of the larger target side.
    pub search_scale: f64,
    pub input_size: usize,
    pub log_sigma: f64,
    pub log_kernel_size: usize,
    pub label_sigma_factor: f64,
    pub threshold_fraction: f64,
    /// Random-patch shift bound as a fraction of the search-region side.
    pub max_shift_fraction: f64,
    /// Normalise each stream's scores by their maximum before fusing.
    pub fuse_normalize: bool,
    /// Level subtracted from the extracted maps before scoring; `None`
    /// uses [`offset_level`] around the previous box, per frame and stream.
    pub score_offset: Option<f64>,
    /// Interpolation used by the automatic offset, see [`offset_level`].
    pub offset_mix: f64,
    pub update_iterations: usize,
    /// Multiplier on the He/Xavier initialisation spread.
    pub init_scale: f64,
    /// Start the head at the mean first-frame label value rather than 0.5.
    pub prior_bias: bool,
    pub dual_widths: [usize; 3],
    pub train: TrainConfig,
    pub icar: IcarConfig,
    /// Pixel scale and per-channel mean for the pretrained backbone.
    pub pixel_scale: f64,
    pub pixel_mean: [f64; 3],
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            fusion_weight: 0.4,
            anomaly_threshold: 0.45,
            anomaly_rule: AnomalyRule::Literal,
            candidates: 600,
            update_period: 10,
            buffer_size: 10,
            motion: MotionModel::default(),
            rng_seed: 0,
            search_scale: 2.2,
            input_size: 224,
            log_sigma: 2.0,
            log_kernel_size: 13,
            label_sigma_factor: crate::dualnet::DEFAULT_LABEL_SIGMA_FACTOR,
            threshold_fraction: 0.5,
            max_shift_fraction: 0.3,
            fuse_normalize: true,
            score_offset: None,
            offset_mix: 0.6,
            update_iterations: 10,
            init_scale: 1.0,
            prior_bias: true,
            dual_widths: crate::dualnet::DEFAULT_WIDTHS,
            train: TrainConfig::default(),
            icar: IcarConfig::default(),
            pixel_scale: 255.0,
            pixel_mean: [123.68, 116.779, 103.939],
        }
    }
}

/// Level `mix` of the way from the mean of `v` outside `rect_in_map` to its
/// mean inside. For a two-level map (one level inside the target, another
/// outside) the area-weighted score peaks at the target's own size for any
/// `mix >= 0.5`; at exactly 0.5 it is flat just above that size.
pub fn offset_level(v: &HeatMap, rect_in_map: &Rect, mix: f64) -> f64 {
    let total: f64 = v.values.iter().sum();
    let cells = v.values.len() as f64;
    let clipped = Rect::new(
        rect_in_map.x.max(0.0),
        rect_in_map.y.max(0.0),
        (rect_in_map.right().min(v.width as f64) - rect_in_map.x.max(0.0)).max(0.0),
        (rect_in_map.bottom().min(v.height as f64) - rect_in_map.y.max(0.0)).max(0.0),
    );
    let area = clipped.area();
    let inside = candidate_confidence(v, &clipped);
    let mean_in = if area > 0.0 { inside / area } else { 0.0 };
    let mean_out = if cells - area > 0.0 { (total - inside) / (cells - area) } else { 0.0 };
    mean_out + mix * (mean_in - mean_out)
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            return Err(DntError::Config(format!("fusion_weight {} not in [0, 1]", self.fusion_weight)));
        }
        if !(self.anomaly_threshold > 0.0) {
            return Err(DntError::Config("anomaly_threshold must be positive".into()));
        }
        if self.candidates == 0 {
            return Err(DntError::Config("candidates must be >= 1".into()));
        }
        if self.update_period == 0 {
            return Err(DntError::Config("update_period must be >= 1".into()));
        }
        if !(self.search_scale > 0.0) || self.input_size < 16 {
            return Err(DntError::Config("search_scale must be positive and input_size >= 16".into()));
        }
        if !(self.log_sigma > 0.0) || self.log_kernel_size < 3 || self.log_kernel_size % 2 == 0 {
            return Err(DntError::Config("log_sigma must be positive and log_kernel_size odd and >= 3".into()));
        }
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction < 1.0) {
            return Err(DntError::Config("threshold_fraction must be in (0, 1)".into()));
        }
        if !(self.label_sigma_factor > 0.0) || !(self.max_shift_fraction >= 0.0) {
            return Err(DntError::Config("label_sigma_factor must be positive, max_shift_fraction >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.offset_mix) {
            return Err(DntError::Config(format!("offset_mix {} not in [0, 1]", self.offset_mix)));
        }
        if self.dual_widths.contains(&0) {
            return Err(DntError::Config("dual_widths must be positive".into()));
        }
        self.motion.validate()?;
        self.train.validate()?;
        self.icar.validate()
    }
}

/// What happened on one frame; serialised into the per-frame sidecar.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameReport {
    pub frame: usize,
    pub rect: Rect,
    pub scale: f64,
    /// Fused normalised confidence of the winning candidate.
    pub confidence: f64,
    pub mean_confidence: f64,
    /// Winning scale-weighted confidence per stream.
    pub stream_scores: [f64; 2],
    pub anomaly: bool,
    pub stochastic_update: bool,
    pub periodic_update: bool,
    pub icar_converged: [bool; 2],
    pub update_loss: Option<[f64; 2]>,
}

/// Intermediate maps of one stream, kept for inspection.
#[derive(Debug, Clone)]
pub struct StreamMaps {
    pub output: HeatMap,
    pub extracted: HeatMap,
    pub reference: HeatMap,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct FrameMaps {
    /// Search window in frame pixels the maps cover.
    pub window: Rect,
    pub boundary: HeatMap,
    pub streams: [StreamMaps; 2],
}

struct Analysis {
    patch: ImagePatch,
    features: LayerFeatures,
    maps: FrameMaps,
}

pub struct Tracker {
    backbone: Box<dyn Backbone>,
    cfg: TrackerConfig,
    nets: [DualNetWeights; 2],
    memory: TrackerMemory,
    state: TargetState,
    rng: ChaCha8Rng,
    init_traces: [Vec<f64>; 2],
    last_maps: Option<FrameMaps>,
}

fn search_window(state: &TargetState, scale: f64) -> Rect {
    search_window_for(state.rect(), scale)
}

/// Square window of side `scale * max(w, h)` centred on `r`.
pub fn search_window_for(r: Rect, scale: f64) -> Rect {
    let (cx, cy) = r.center();
    let side = scale * r.w.max(r.h);
    Rect::from_center(cx, cy, side, side)
}

/// Trains both streams in lockstep so each iteration's random patches go
/// through the backbone once.
fn train_streams<D, L>(
    nets: &mut [DualNetWeights; 2],
    cfg: &TrainConfig,
    iterations: usize,
    mut draw: D,
    loss: L,
) -> Result<[Vec<f64>; 2]>
where
    D: FnMut() -> Result<[Vec<Sample>; 2]>,
    L: Fn(usize, &DualNetWeights, &[Sample]) -> Result<(f64, DualNetGrads)>,
{
    cfg.validate()?;
    let mut velocity = [DualNetGrads::zeros_like(&nets[0]), DualNetGrads::zeros_like(&nets[1])];
    let mut traces = [Vec::with_capacity(iterations), Vec::with_capacity(iterations)];
    for _ in 0..iterations {
        let randoms = draw()?;
        for k in 0..2 {
            let (l, g) = loss(k, &nets[k], &randoms[k])?;
            if !l.is_finite() {
                return Err(DntError::NonFinite("training loss"));
            }
            traces[k].push(l);
            sgd_step(&mut nets[k], &g, cfg, &mut velocity[k]);
        }
    }
    Ok(traces)
}

impl Tracker {
    /// Builds both streams and fits them to the first frame.
    pub fn init(first_frame: &Frame, gt: Rect, cfg: TrackerConfig, backbone: Box<dyn Backbone>) -> Result<Tracker> {
        cfg.validate()?;
        if backbone.input_size() != cfg.input_size {
            return Err(DntError::Config(format!(
                "backbone expects {} px input, config says {}",
                backbone.input_size(),
                cfg.input_size
            )));
        }
        let state = TargetState::from_rect(gt)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let side = cfg.input_size;
        let patch = first_frame.crop(search_window(&state, cfg.search_scale), side, side, 0)?;
        let features = extract_features(backbone.as_ref(), &patch)?;
        let nets = [LayerId::Layer1, LayerId::Layer2].map(|layer| {
            let channels = features.get(layer).values.channels;
            DualNetWeights::init_scaled(
                channels,
                cfg.dual_widths,
                layer,
                cfg.rng_seed.wrapping_add(1 + layer.index() as u64),
                cfg.init_scale,
            )
        });
        let mut tracker = Tracker {
            backbone,
            memory: TrackerMemory::new(
                BufferEntry {
                    patch: patch.clone(),
                    target: gt,
                    confidence: 0.0,
                    features: features.clone(),
                    thresholded: [HeatMap::filled(1, 1, 0.0), HeatMap::filled(1, 1, 0.0)],
                },
                cfg.buffer_size,
            ),
            cfg,
            nets,
            state,
            rng: ChaCha8Rng::seed_from_u64(0),
            init_traces: [Vec::new(), Vec::new()],
            last_maps: None,
        };
        let base = [LayerId::Layer1, LayerId::Layer2].map(|l| tracker.memory.first.sample(l, tracker.cfg.label_sigma_factor));
        if tracker.cfg.prior_bias {
            for (net, s) in tracker.nets.iter_mut().zip(&base) {
                let v = &s.label.values;
                net.set_output_prior(v.iter().sum::<f64>() / v.len() as f64);
            }
        }
        let traces = {
            let Tracker { backbone, cfg, nets, .. } = &mut tracker;
            let shift = cfg.max_shift_fraction * patch.source_rect.w;
            train_streams(
                nets,
                &cfg.train,
                cfg.train.iterations,
                || random_samples(backbone.as_ref(), first_frame, &patch, gt, cfg, shift, &mut rng),
                |k, w, randoms| loss_init(w, &base[k], randoms, cfg.train.weight_decay),
            )?
        };
        tracker.init_traces = traces;
        tracker.rng = rng;

        let analysis = tracker.analyze(first_frame, 0)?;
        let (c, _) = tracker.confidence_of(&analysis, &tracker.state, &tracker.state);
        tracker.memory.record_confidence(c);
        tracker.memory.first = tracker.entry(&analysis, gt, c)?;
        tracker.last_maps = Some(analysis.maps);
        Ok(tracker)
    }

    pub fn state(&self) -> &TargetState {
        &self.state
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn memory(&self) -> &TrackerMemory {
        &self.memory
    }

    pub fn networks(&self) -> &[DualNetWeights; 2] {
        &self.nets
    }

    /// Loss trace of the first-frame fit, per stream.
    pub fn init_traces(&self) -> &[Vec<f64>; 2] {
        &self.init_traces
    }

    pub fn last_maps(&self) -> Option<&FrameMaps> {
        self.last_maps.as_ref()
    }

    fn analyze(&self, frame: &Frame, frame_index: usize) -> Result<Analysis> {
        let side = self.cfg.input_size;
        let patch = frame.crop(search_window(&self.state, self.cfg.search_scale), side, side, frame_index)?;
        let features = extract_features(self.backbone.as_ref(), &patch)?;
        let boundary = log_boundary_map(&patch, self.cfg.log_sigma, self.cfg.log_kernel_size)?;
        let streams = [0, 1].map(|k| self.analyze_stream(&features, &boundary, k));
        let [a, b] = streams;
        let window = patch.source_rect;
        Ok(Analysis { patch, features, maps: FrameMaps { window, boundary, streams: [a?, b?] } })
    }

    fn analyze_stream(&self, features: &LayerFeatures, boundary: &HeatMap, k: usize) -> Result<StreamMaps> {
        let net = &self.nets[k];
        let g_v = features.get(net.stream);
        let acts = net.activations(&g_v.values)?;
        let output = acts.heat_map();
        let trunk = FeatureStack::new(acts.trunk().clone(), g_v.layer, g_v.stride)?;
        let h_d = integrate(boundary, &trunk)?;
        let h_v = integrate(boundary, g_v)?;
        let reference = channel_mean(&h_v);
        match icar::extract(&h_d, &h_v, &self.cfg.icar) {
            Ok(res) => {
                if !res.converged {
                    log::debug!("stream {k}: ICA-R stopped after {} iterations", res.iterations_used);
                }
                Ok(StreamMaps { output, extracted: res.v, reference, converged: res.converged })
            }
            Err(DntError::Degenerate(why)) => {
                log::debug!("stream {k}: ICA-R input degenerate ({why}); scoring the network output");
                let extracted = output.min_max_normalized();
                Ok(StreamMaps { output, extracted, reference, converged: false })
            }
            Err(e) => Err(e),
        }
    }

    /// Fused normalised confidence of `cand` against the previous state, and
    /// the per-stream scale-weighted confidences.
    fn confidence_of(&self, a: &Analysis, cand: &TargetState, prev: &TargetState) -> (f64, [f64; 2]) {
        let src = a.patch.source_rect;
        let mut per = [0.0; 2];
        let mut fused = 0.0;
        for k in 0..2 {
            let v = &a.maps.streams[k].extracted;
            let in_map = cand.rect().to_grid(&src, v.width, v.height);
            let prev_area = prev.rect().to_grid(&src, v.width, v.height).area();
            let c_hat = scale_weight(candidate_confidence(v, &in_map), cand.area(), prev.area());
            per[k] = c_hat;
            let weight = if k == 0 { self.cfg.fusion_weight } else { 1.0 - self.cfg.fusion_weight };
            fused += weight * normalized_confidence(c_hat, prev_area);
        }
        (fused, per)
    }

    fn entry(&self, a: &Analysis, target: Rect, confidence: f64) -> Result<BufferEntry> {
        let t0 = threshold_map(&a.maps.streams[0].output, self.cfg.threshold_fraction)?;
        let t1 = threshold_map(&a.maps.streams[1].output, self.cfg.threshold_fraction)?;
        Ok(BufferEntry { patch: a.patch.clone(), target, confidence, features: a.features.clone(), thresholded: [t0, t1] })
    }

    /// Processes the next frame and returns the reported state.
    pub fn step(&mut self, frame: &Frame) -> Result<FrameReport> {
        self.memory.frame_index += 1;
        let t = self.memory.frame_index;
        let prev = self.state;
        let analysis = self.analyze(frame, t)?;
        let src = analysis.patch.source_rect;

        let candidates = sample_candidates(&prev, &self.cfg.motion, self.cfg.candidates, &mut self.rng);
        let mut scores: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for k in 0..2 {
            let v = &analysis.maps.streams[k].extracted;
            let offset_level = self
                .cfg
                .score_offset
                .unwrap_or_else(|| offset_level(v, &prev.rect().to_grid(&src, v.width, v.height), self.cfg.offset_mix));
            let offset = HeatMap {
                height: v.height,
                width: v.width,
                values: v.values.iter().map(|x| x - offset_level).collect(),
                normalized: false,
            };
            let sums = BoxSums::new(&offset);
            scores[k] = candidates
                .iter()
                .map(|c| scale_weight(sums.sum(&c.rect().to_grid(&src, v.width, v.height)), c.area(), prev.area()))
                .collect();
            if self.cfg.fuse_normalize {
                scores[k] = normalize_by_max(&scores[k]);
            }
        }
        let (best, _) = fuse_and_select(&scores[0], &scores[1], self.cfg.fusion_weight)?;
        let winner = candidates[best];
        let (confidence, stream_scores) = self.confidence_of(&analysis, &winner, &prev);
        let anomaly = detect_anomaly(&self.memory, confidence, self.cfg.anomaly_threshold, self.cfg.anomaly_rule);

        let mut update_loss = None;
        if anomaly {
            // the winner lands inside the previous box: treat the current patch as on target
            let phi = prev.rect().contains_point(winner.cx, winner.cy);
            let losses = self.stochastic_update(frame, &analysis, prev.rect(), phi)?;
            update_loss = Some(losses);
        } else {
            self.state = winner;
            let entry = self.entry(&analysis, winner.rect(), confidence)?;
            self.memory.push(entry);
            self.memory.record_confidence(confidence);
        }
        let periodic = t % self.cfg.update_period == 0;
        if periodic {
            let losses = self.periodic_update()?;
            update_loss = Some(losses);
        }
        let report = FrameReport {
            frame: t,
            rect: self.state.rect(),
            scale: self.state.scale,
            confidence,
            mean_confidence: self.memory.mean_confidence().unwrap_or(0.0),
            stream_scores,
            anomaly,
            stochastic_update: anomaly,
            periodic_update: periodic,
            icar_converged: [analysis.maps.streams[0].converged, analysis.maps.streams[1].converged],
            update_loss,
        };
        self.last_maps = Some(analysis.maps);
        Ok(report)
    }

    fn stochastic_update(&mut self, frame: &Frame, a: &Analysis, target: Rect, phi: bool) -> Result<[f64; 2]> {
        let best = if self.memory.buffer.is_empty() {
            None
        } else {
            Some(select_best_tracked(&self.memory).thresholded.clone())
        };
        let current = [LayerId::Layer1, LayerId::Layer2].map(|layer| {
            let features = a.features.get(layer).clone();
            let label = label_for_patch(target, &a.patch, features.dims(), self.cfg.label_sigma_factor);
            Sample { features, label }
        });
        let Tracker { backbone, cfg, nets, rng, .. } = self;
        let shift = cfg.max_shift_fraction * a.patch.source_rect.w;
        let traces = train_streams(
            nets,
            &cfg.train,
            cfg.update_iterations,
            || random_samples(backbone.as_ref(), frame, &a.patch, target, cfg, shift, rng),
            |k, w, randoms| {
                let stored = best.as_ref().map(|b| &b[k]);
                loss_stochastic(w, stored, &current[k], randoms, phi, cfg.threshold_fraction, cfg.train.weight_decay)
            },
        )?;
        Ok(last_losses(&traces))
    }

    fn periodic_update(&mut self) -> Result<[f64; 2]> {
        let sigma = self.cfg.label_sigma_factor;
        let best_entry = select_best_tracked(&self.memory);
        let best = [LayerId::Layer1, LayerId::Layer2].map(|l| best_entry.sample(l, sigma));
        let first = [LayerId::Layer1, LayerId::Layer2].map(|l| self.memory.first.sample(l, sigma));
        let traces = train_streams(
            &mut self.nets,
            &self.cfg.train,
            self.cfg.update_iterations,
            || Ok([Vec::new(), Vec::new()]),
            |k, w, _| loss_periodic(w, &best[k], &first[k], self.cfg.train.weight_decay),
        )?;
        Ok(last_losses(&traces))
    }
}

fn last_losses(traces: &[Vec<f64>; 2]) -> [f64; 2] {
    [traces[0].last().copied().unwrap_or(0.0), traces[1].last().copied().unwrap_or(0.0)]
}

/// Random patches around `base` with labels for `target`, already pushed
/// through the backbone.
fn random_samples<R: Rng + ?Sized>(
    backbone: &dyn Backbone,
    frame: &Frame,
    base: &ImagePatch,
    target: Rect,
    cfg: &TrackerConfig,
    max_shift: f64,
    rng: &mut R,
) -> Result<[Vec<Sample>; 2]> {
    let patches = sample_random_patches(frame, base, cfg.train.random_patches, max_shift, rng)?;
    let mut out = [Vec::with_capacity(patches.len()), Vec::with_capacity(patches.len())];
    for p in &patches {
        let f = extract_features(backbone, p)?;
        for (k, layer) in [LayerId::Layer1, LayerId::Layer2].into_iter().enumerate() {
            let features = f.get(layer).clone();
            let label = label_for_patch(target, p, features.dims(), cfg.label_sigma_factor);
            out[k].push(Sample { features, label });
        }
    }
    Ok(out)
}
