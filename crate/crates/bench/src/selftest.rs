//! Scaled-down checks of the whole system, shared by `dnt selftest` and the
//! acceptance test target. Each check builds its own expected values.

use std::fmt;
use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::Result;
use dnt_core::dualnet::{
    forward, gaussian_target_map, loss_init, loss_periodic, loss_stochastic, numeric_gradient, relative_error,
    threshold_map, DualNetGrads, DualNetWeights, Sample,
};
use dnt_core::features::{FeatureStack, HeatMap, LayerId, VggBackbone, TEST_WIDTHS};
use dnt_core::icar::{self, IcarConfig, MixedSignals, ReferenceSignal};
use dnt_core::synth::{generate, SyntheticSpec};
use dnt_core::tensor::Tensor3;
use dnt_core::tracking::{candidate_confidence, fuse_and_select, scale_weight, AnomalyRule, FrameReport, Tracker, TrackerConfig};
use dnt_core::Rect;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::load_sequence;
use crate::metrics::{center_error, curves, overlap, MetricCurves};
use crate::protocol::{evaluate, variants, Protocol, ResultLog};
use crate::report::emit_report;
use crate::runner::{track_sequence, BackboneChoice};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

impl Outcome {
    fn new(id: u8, name: &'static str, passed: bool, detail: String) -> Self {
        Outcome { id, name, status: if passed { Status::Pass } else { Status::Fail }, detail }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        write!(f, "[{tag}] {}. {}: {}", self.id, self.name, self.detail)
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut s = [0.0; 3];
    for (x, y) in a.iter().zip(b) {
        s[0] += (x - ma) * (y - mb);
        s[1] += (x - ma) * (x - ma);
        s[2] += (y - mb) * (y - mb);
    }
    s[0] / (s[1] * s[2]).sqrt()
}

/// |corr| between the recovered signal and source 0 for one seeded mixture
/// of two Laplace and two uniform sources, reference at 10 dB SNR.
pub fn icar_trial(seed: u64, samples: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sqrt3 = 3f64.sqrt();
    let sources: Vec<Vec<f64>> = (0..4)
        .map(|k| {
            (0..samples)
                .map(|_| {
                    if k < 2 {
                        let u: f64 = rng.random_range(-0.5..0.5);
                        -u.signum() * (1.0 - 2.0 * u.abs()).ln() / std::f64::consts::SQRT_2
                    } else {
                        rng.random_range(-sqrt3..sqrt3)
                    }
                })
                .collect()
        })
        .collect();
    let mixing: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rows: Vec<Vec<f64>> = (0..4)
        .map(|i| (0..samples).map(|p| (0..4).map(|j| mixing[i * 4 + j] * sources[j][p]).sum()).collect())
        .collect();
    // unit-variance source, noise variance 0.1 -> 10 dB
    let noise = Normal::new(0.0, 0.1f64.sqrt()).unwrap();
    let reference: Vec<f64> = sources[0].iter().map(|s| s + noise.sample(&mut rng)).collect();
    let cfg = IcarConfig::default();
    let z = icar::whiten(&MixedSignals::from_rows(&rows)?, cfg.whiten_eps)?;
    let r = ReferenceSignal::standardize(&reference)?;
    let res = icar::solve(&z.signals, &r, &cfg)?;
    Ok(pearson(&res.v.values, &sources[0]).abs())
}

pub fn icar_recovery() -> Result<Outcome> {
    let start = Instant::now();
    let mut good = 0;
    let mut worst = 1.0f64;
    for seed in 0..100 {
        let c = icar_trial(seed, 2000)?;
        worst = worst.min(c);
        if c > 0.95 {
            good += 1;
        }
    }
    let took = start.elapsed();
    Ok(Outcome::new(
        1,
        "ICA-R recovery",
        good >= 95 && took < Duration::from_secs(30),
        format!("{good}/100 trials with |corr| > 0.95 (need 95), worst {worst:.4}, {:.2}s (limit 30s)", took.as_secs_f64()),
    ))
}

fn grad_sample(rng: &mut ChaCha8Rng) -> Sample {
    let data = (0..2 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
    let features = FeatureStack::new(Tensor3::from_vec(2, 8, 8, data).unwrap(), LayerId::Layer1, 8).unwrap();
    let rect = Rect::new(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), 3.0, 2.5);
    Sample { features, label: gaussian_target_map(rect, (8, 8), 0.3).map }
}

fn grad_error<F>(w: &DualNetWeights, f: F) -> Result<f64>
where
    F: Fn(&DualNetWeights) -> dnt_core::Result<(f64, DualNetGrads)>,
{
    let analytic = f(w)?.1.flatten();
    let numeric = numeric_gradient(w, 1e-6, |p| Ok(f(p)?.0))?;
    Ok(relative_error(&analytic, &numeric))
}

pub fn gradient_fidelity() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = [0.0f64; 3];
    for _ in 0..20 {
        let mut w = DualNetWeights::init(2, [2, 2, 2], LayerId::Layer1, rng.random());
        for p in w.params_mut() {
            p.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        let base = grad_sample(&mut rng);
        let randoms: Vec<Sample> = (0..2).map(|_| grad_sample(&mut rng)).collect();
        let best = threshold_map(&forward(&w, &randoms[0].features)?, 0.5)?;
        let phi = rng.random::<bool>();
        let errs = [
            grad_error(&w, |p| loss_init(p, &base, &randoms, 0.005))?,
            grad_error(&w, |p| loss_stochastic(p, Some(&best), &base, &randoms, phi, 0.5, 0.005))?,
            grad_error(&w, |p| loss_periodic(p, &base, &randoms[1], 0.005))?,
        ];
        for (m, e) in worst.iter_mut().zip(errs) {
            *m = m.max(e);
        }
    }
    Ok(Outcome::new(
        2,
        "gradient fidelity",
        worst.iter().all(|&e| e < 1e-4),
        format!(
            "worst relative error over 20 draws: init {:.2e}, stochastic {:.2e}, periodic {:.2e} (limit 1e-4)",
            worst[0], worst[1], worst[2]
        ),
    ))
}

/// Configuration of the end-to-end synthetic run: reduced input size for
/// speed, the synthetic-backbone learning rate, and the two-sided anomaly
/// test with a threshold on the scale of the normalised confidences.
pub fn synthetic_config() -> TrackerConfig {
    let mut cfg = TrackerConfig {
        input_size: 128,
        anomaly_rule: AnomalyRule::Deviation,
        anomaly_threshold: 0.08,
        ..Default::default()
    };
    cfg.train.learning_rate = 1e-2;
    cfg
}

pub const SYNTHETIC_BACKBONE_SEED: u64 = 11;

pub fn first_frame_adaptation() -> Result<Outcome> {
    let seq = generate(&SyntheticSpec { frames: 1, ..Default::default() });
    let cfg = synthetic_config();
    let beta = cfg.train.weight_decay;
    let bb = VggBackbone::seeded(TEST_WIDTHS, cfg.input_size, SYNTHETIC_BACKBONE_SEED);
    let tr = Tracker::init(&seq.frames[0], seq.truth[0], cfg, Box::new(bb))?;
    let mut ratios = [0.0; 2];
    let mut parts = Vec::new();
    for (k, t) in tr.init_traces().iter().enumerate() {
        let (first, last) = (t[0], *t.last().unwrap());
        ratios[k] = last / first;
        let reg = beta * tr.networks()[k].weight_norm_sq();
        parts.push(format!(
            "stream {}: {} iterations, {first:.4} -> {last:.4} (ratio {:.3}; weight decay term {reg:.4}, data term {:.4})",
            k + 1,
            t.len(),
            ratios[k],
            last - reg
        ));
    }
    Ok(Outcome::new(3, "first-frame adaptation", ratios.iter().all(|&r| r < 0.5), parts.join("; ") + " (need ratio < 0.5)"))
}

fn coverage_loop(v: &HeatMap, r: &Rect) -> f64 {
    let mut total = 0.0;
    for i in 0..v.height {
        for j in 0..v.width {
            let ox = (r.x + r.w).min(j as f64 + 1.0) - r.x.max(j as f64);
            let oy = (r.y + r.h).min(i as f64 + 1.0) - r.y.max(i as f64);
            if ox > 0.0 && oy > 0.0 {
                total += ox * oy * v.values[i * v.width + j];
            }
        }
    }
    total
}

pub fn scoring_oracles() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
        let v = HeatMap::new(h, w, (0..h * w).map(|_| rng.random()).collect())?;
        let r = Rect::new(
            rng.random_range(-6.0..w as f64 + 2.0),
            rng.random_range(-6.0..h as f64 + 2.0),
            rng.random_range(0.01..20.0),
            rng.random_range(0.01..20.0),
        );
        worst = worst.max((candidate_confidence(&v, &r) - coverage_loop(&v, &r)).abs());
    }
    // powers of two keep both sides of each identity exactly representable
    let mut homogeneous = true;
    let mut invariant = true;
    for _ in 0..1000 {
        let k = 2f64.powi(rng.random_range(-8..9));
        let (c, a, b) = (rng.random_range(-5.0..5.0), rng.random_range(0.0..50.0), rng.random_range(0.1..50.0));
        homogeneous &= scale_weight(c, k * a, b) == k * scale_weight(c, a, b);
        let n = rng.random_range(1..100);
        let l1: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let l2: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let s1: Vec<f64> = l1.iter().map(|x| x * k).collect();
        let s2: Vec<f64> = l2.iter().map(|x| x * k).collect();
        invariant &= fuse_and_select(&l1, &l2, 0.4)?.0 == fuse_and_select(&s1, &s2, 0.4)?.0;
    }
    Ok(Outcome::new(
        4,
        "scoring oracles",
        worst < 1e-9 && homogeneous && invariant,
        format!(
            "max |confidence - loop oracle| {worst:.2e} over 1000 pairs (limit 1e-9); homogeneity exact: {homogeneous}; argmax scale invariance exact: {invariant}"
        ),
    ))
}

/// Per-frame reports and the sequence of one synthetic run.
pub fn synthetic_run() -> Result<(Vec<FrameReport>, dnt_core::synth::SyntheticSequence, Duration)> {
    let seq = generate(&SyntheticSpec::default());
    let cfg = synthetic_config();
    let start = Instant::now();
    let bb = VggBackbone::seeded(TEST_WIDTHS, cfg.input_size, SYNTHETIC_BACKBONE_SEED);
    let mut tr = Tracker::init(&seq.frames[0], seq.truth[0], cfg, Box::new(bb))?;
    let reports = seq.frames[1..].iter().map(|f| tr.step(f)).collect::<dnt_core::Result<Vec<_>>>()?;
    Ok((reports, seq, start.elapsed()))
}

pub fn synthetic_tracking() -> Result<Outcome> {
    let (a, seq, took) = synthetic_run()?;
    let (b, _, took_b) = synthetic_run()?;
    let mut ious = Vec::new();
    let mut fired = Vec::new();
    for r in &a {
        if seq.occluded[r.frame] {
            if r.anomaly {
                fired.push(r.frame);
            }
        } else {
            ious.push(overlap(&r.rect, &seq.truth[r.frame]));
        }
    }
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    let window: Vec<usize> = (0..seq.occluded.len()).filter(|&t| seq.occluded[t]).collect();
    let deterministic = a == b;
    let slowest = took.max(took_b);
    Ok(Outcome::new(
        5,
        "synthetic tracking",
        mean >= 0.5 && !fired.is_empty() && deterministic && slowest < Duration::from_secs(180),
        format!(
            "mean IoU {mean:.3} over {} visible frames (need 0.5); anomalies inside occlusion frames {:?}: {:?}; deterministic: {deterministic}; {:.1}s per run (limit 180s)",
            ious.len(),
            window,
            fired,
            slowest.as_secs_f64()
        ),
    ))
}

fn iou_oracle(a: &Rect, b: &Rect) -> f64 {
    let xs = [a.x, a.x + a.w, b.x, b.x + b.w];
    let ys = [a.y, a.y + a.h, b.y, b.y + b.h];
    let iw = (xs[1].min(xs[3]) - xs[0].max(xs[2])).max(0.0);
    let ih = (ys[1].min(ys[3]) - ys[0].max(ys[2])).max(0.0);
    let inter = iw * ih;
    inter / (a.w * a.h + b.w * b.h - inter)
}

pub fn metric_harness() -> Result<Outcome> {
    let mut notes = Vec::new();
    let mut ok = true;
    let gt: Vec<Rect> = (0..40).map(|i| Rect::new(10.0 + i as f64, 30.0 - i as f64 * 0.5, 30.0, 20.0)).collect();

    let shifted: Vec<Rect> = gt.iter().map(|r| Rect::new(r.x + 9.0, r.y - 12.0, r.w, r.h)).collect();
    let c = curves(&shifted, &gt)?;
    let step = c.precision[20] == 1.0 && c.precision[10] == 0.0;
    ok &= step;
    notes.push(format!("15 px offset: precision[20] = {}, precision[10] = {}", c.precision[20], c.precision[10]));

    let c = curves(&gt, &gt)?;
    let exact = c.success[..20].iter().all(|&s| s == 1.0);
    ok &= exact;
    notes.push(format!("exact log: success = 1 below tau = 1: {exact}, AUC {:.4}", c.auc));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let rand_rect = |rng: &mut ChaCha8Rng| {
        Rect::new(rng.random_range(-20.0..80.0), rng.random_range(-20.0..80.0), rng.random_range(0.5..60.0), rng.random_range(0.5..60.0))
    };
    let mut res = Vec::new();
    let mut truth = Vec::new();
    for _ in 0..2000 {
        let (a, b) = (rand_rect(&mut rng), rand_rect(&mut rng));
        let ce = ((a.x + a.w / 2.0 - b.x - b.w / 2.0).powi(2) + (a.y + a.h / 2.0 - b.y - b.h / 2.0).powi(2)).sqrt();
        worst = worst.max((overlap(&a, &b) - iou_oracle(&a, &b)).abs()).max((center_error(&a, &b) - ce).abs());
        res.push(a);
        truth.push(b);
    }
    ok &= worst < 1e-9;
    notes.push(format!("overlap / centre error vs oracles {worst:.1e}"));

    // per-frame brute force of the curves themselves
    let c = curves(&res, &truth)?;
    let n = res.len() as f64;
    let brute_p20 = res.iter().zip(&truth).filter(|(a, b)| center_error(a, b) <= 20.0).count() as f64 / n;
    let brute_s05 = res.iter().zip(&truth).filter(|(a, b)| iou_oracle(a, b) > 0.5).count() as f64 / n;
    let brute = c.prec_at_20 == brute_p20 && c.success[10] == brute_s05;
    ok &= brute;
    notes.push(format!("curves vs per-frame count: {brute}"));

    // every emitted report must carry monotone curves
    let tmp = std::env::temp_dir().join(format!("dnt-selftest-{}", std::process::id()));
    let seqs: Vec<crate::dataset::SequenceSpec> = (0..3)
        .map(|k| crate::dataset::SequenceSpec {
            name: format!("R{k}"),
            frames: (0..res.len() / 3).map(|i| format!("{i}.png").into()).collect(),
            groundtruth: truth[k * (res.len() / 3)..(k + 1) * (res.len() / 3)].to_vec(),
            attributes: vec![],
        })
        .collect();
    let mut monotone = true;
    for p in [Protocol::Ope, Protocol::Tre] {
        let logs: Vec<ResultLog> = seqs
            .iter()
            .enumerate()
            .flat_map(|(k, s)| {
                let base = k * (res.len() / 3);
                variants(p, s).into_iter().map(move |v| (s.name.clone(), base, v))
            })
            .map(|(name, base, v)| ResultLog { sequence: name, variant: v, rects: res[base + v.start..base + res.len() / 3].to_vec() })
            .collect();
        let report = evaluate(p, &seqs, &logs)?;
        emit_report(&report, &tmp.join(p.to_string()))?;
        monotone &= report.sequences.iter().all(|s| s.curves.check().is_ok()) && report.overall.check().is_ok();
    }
    let _ = std::fs::remove_dir_all(&tmp);
    ok &= monotone;
    notes.push(format!("emitted reports monotone: {monotone}"));
    Ok(Outcome::new(6, "metric harness", ok, notes.join("; ")))
}

/// Runs the tracker with a pretrained backbone on a user-supplied sequence.
/// Skipped unless both the weights and the sequence exist.
pub fn real_backbone(sequence: Option<&Path>, weights: Option<&Path>) -> Result<Outcome> {
    let (Some(seq_dir), Some(weights)) = (sequence, weights) else {
        return Ok(Outcome {
            id: 7,
            name: "pretrained backbone run",
            status: Status::Skip,
            detail: "set DNT_SEQUENCE to an OTB-layout sequence and DNT_WEIGHTS to a VGG-16 tensor archive to run".into(),
        });
    };
    if !seq_dir.is_dir() || !weights.is_file() {
        return Ok(Outcome {
            id: 7,
            name: "pretrained backbone run",
            status: Status::Skip,
            detail: format!("{} or {} not found", seq_dir.display(), weights.display()),
        });
    }
    let seq = load_sequence(seq_dir)?;
    let cfg = TrackerConfig::default();
    let v = variants(Protocol::Ope, &seq)[0];
    let rects = track_sequence(&seq, &v, &cfg, &BackboneChoice::Pretrained { weights: weights.to_path_buf() }, |_, _| Ok(()))?;
    let valid = rects.len() == seq.len() && rects.iter().all(|r| r.is_finite() && r.w > 0.0 && r.h > 0.0);
    let log = ResultLog { sequence: seq.name.clone(), variant: v, rects };
    let report = evaluate(Protocol::Ope, std::slice::from_ref(&seq), &[log])?;
    let monotone: Result<Vec<()>> = report.sequences.iter().map(|s| s.curves.check()).collect();
    let c: &MetricCurves = &report.overall;
    Ok(Outcome::new(
        7,
        "pretrained backbone run",
        valid && monotone.is_ok(),
        format!("{}: {} frames, valid boxes: {valid}, precision@20 {:.3}, AUC {:.3}", seq.name, seq.len(), c.prec_at_20, c.auc),
    ))
}

/// Every check in order.
pub fn run_all(sequence: Option<&Path>, weights: Option<&Path>) -> Vec<Outcome> {
    let checks: Vec<(u8, &'static str, Box<dyn Fn() -> Result<Outcome>>)> = vec![
        (1, "ICA-R recovery", Box::new(icar_recovery)),
        (2, "gradient fidelity", Box::new(gradient_fidelity)),
        (3, "first-frame adaptation", Box::new(first_frame_adaptation)),
        (4, "scoring oracles", Box::new(scoring_oracles)),
        (5, "synthetic tracking", Box::new(synthetic_tracking)),
        (6, "metric harness", Box::new(metric_harness)),
        (7, "pretrained backbone run", Box::new(move || real_backbone(sequence, weights))),
    ];
    checks
        .into_iter()
        .map(|(id, name, f)| f().unwrap_or_else(|e| Outcome { id, name, status: Status::Fail, detail: format!("error: {e:#}") }))
        .collect()
}
