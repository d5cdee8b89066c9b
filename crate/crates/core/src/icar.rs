//! One-unit independent component analysis with a reference signal.
//!
//! Mixtures are whitened, then a single unmixing direction `w` is found by a
//! Newton-like iteration on the negentropy contrast
//! `J(y) = rho (E[log cosh y] - E[log cosh nu])^2`, `nu ~ N(0, 1)`, subject to
//! the closeness constraint `mse(y, r) <= xi` handled with an
//! augmented-Lagrangian multiplier.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{DntError, Result};
use crate::features::{channel_mean, min_max, FeatureStack, HeatMap};
use crate::tensor::gemm;

/// `C x P` mixtures, one row per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSignals {
    pub channels: usize,
    pub samples: usize,
    pub data: Vec<f64>,
    pub spatial_dims: (usize, usize),
}

impl MixedSignals {
    pub fn new(channels: usize, samples: usize, data: Vec<f64>, spatial_dims: (usize, usize)) -> Result<Self> {
        if data.len() != channels * samples || spatial_dims.0 * spatial_dims.1 != samples {
            return Err(DntError::Shape(format!(
                "{} values for {channels} channels of {samples} samples ({spatial_dims:?})",
                data.len()
            )));
        }
        Ok(MixedSignals { channels, samples, data, spatial_dims })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != p) {
            return Err(DntError::Shape("ragged mixture rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), p, data, (1, p))
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    fn covariance(&self) -> DMatrix<f64> {
        let c = self.channels;
        let mut cov = vec![0.0; c * c];
        gemm(c, self.samples, c, 1.0 / self.samples as f64, &self.data, false, &self.data, true, 0.0, &mut cov);
        DMatrix::from_row_slice(c, c, &cov)
    }
}

/// Zero-mean, unit-variance guide signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSignal {
    pub values: Vec<f64>,
}

impl ReferenceSignal {
    pub fn standardize(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() || !raw.iter().all(|v| v.is_finite()) {
            return Err(DntError::InvalidArgument("reference must be non-empty and finite".into()));
        }
        let values = standardize(raw).ok_or_else(|| DntError::Degenerate("constant reference signal".into()))?;
        Ok(ReferenceSignal { values })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Zero mean, unit (population) variance; `None` for constant input.
pub fn standardize(v: &[f64]) -> Option<Vec<f64>> {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    let scale = v.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
    if !(var.sqrt() > 1e-12 * scale) {
        return None;
    }
    let sd = var.sqrt();
    Some(v.iter().map(|x| (x - m) / sd).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcarConfig {
    /// Positive weight of the negentropy contrast.
    pub rho: f64,
    /// Closeness threshold.
    pub xi: f64,
    /// Multiplier step.
    pub gamma: f64,
    /// Newton step size.
    pub eta: f64,
    pub max_iters: usize,
    /// Convergence tolerance on `||w_{k+1} -/+ w_k||`.
    pub tol: f64,
    /// `E[log cosh nu]` for `nu ~ N(0, 1)`.
    pub gauss_moment: f64,
    /// Relative eigenvalue floor used when whitening.
    pub whiten_eps: f64,
}

impl Default for IcarConfig {
    fn default() -> Self {
        IcarConfig {
            rho: 1.0,
            xi: 0.5,
            gamma: 1.0,
            eta: 1.0,
            max_iters: 200,
            tol: 1e-6,
            gauss_moment: gauss_moment(),
            whiten_eps: 1e-8,
        }
    }
}

impl IcarConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("icar_rho", self.rho),
            ("icar_xi", self.xi),
            ("icar_gamma", self.gamma),
            ("icar_eta", self.eta),
            ("icar_tol", self.tol),
            ("icar_gauss_moment", self.gauss_moment),
            ("icar_whiten_eps", self.whiten_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(DntError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_iters == 0 {
            return Err(DntError::Config("icar_max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Nodes and weights of the `n`-point Gauss-Hermite rule for the standard
/// normal density (Golub-Welsch); weights sum to one.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `E[log cosh nu]`, `nu ~ N(0, 1)`, by 120-point Gauss-Hermite quadrature.
pub fn gauss_moment() -> f64 {
    static MOMENT: OnceLock<f64> = OnceLock::new();
    *MOMENT.get_or_init(|| {
        let (x, w) = gauss_hermite(120);
        x.iter().zip(&w).map(|(x, w)| w * log_cosh(*x)).sum()
    })
}

#[inline]
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// `rho (mean(log cosh y) - gauss_moment)^2`.
pub fn negentropy(y: &[f64], cfg: &IcarConfig) -> f64 {
    let d = y.iter().map(|v| log_cosh(*v)).sum::<f64>() / y.len() as f64 - cfg.gauss_moment;
    cfg.rho * d * d
}

/// Mean squared error between the standardised `y` and the reference.
pub fn closeness(y: &[f64], r: &ReferenceSignal) -> f64 {
    let ys = standardize(y).unwrap_or_else(|| vec![0.0; y.len()]);
    ys.iter().zip(&r.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
}

/// Whitened mixtures plus the `m x C` transform that produced them
/// (`m <= C` after dropping near-null directions).
#[derive(Debug, Clone, PartialEq)]
pub struct Whitened {
    pub signals: MixedSignals,
    pub transform: DMatrix<f64>,
}

/// Centres each row and decorrelates to unit covariance. Eigen-directions
/// with eigenvalue below `eps * max_eigenvalue` are dropped.
pub fn whiten(x: &MixedSignals, eps: f64) -> Result<Whitened> {
    if x.channels < 2 {
        return Err(DntError::InvalidArgument(format!("need at least 2 mixture channels, got {}", x.channels)));
    }
    if x.samples <= x.channels {
        return Err(DntError::InvalidArgument(format!(
            "need more samples ({}) than channels ({})",
            x.samples, x.channels
        )));
    }
    if !x.data.iter().all(|v| v.is_finite()) {
        return Err(DntError::NonFinite("mixtures"));
    }
    let mut centred = x.clone();
    for c in 0..x.channels {
        let row = &mut centred.data[c * x.samples..(c + 1) * x.samples];
        let m = mean(row);
        row.iter_mut().for_each(|v| *v -= m);
    }
    let eig = SymmetricEigen::new(centred.covariance());
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if !(lmax > 1e-300) {
        return Err(DntError::Degenerate("mixtures have zero variance".into()));
    }
    let mut order: Vec<usize> = (0..x.channels).filter(|&i| eig.eigenvalues[i] > eps * lmax).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let m = order.len();
    let mut transform = DMatrix::<f64>::zeros(m, x.channels);
    for (row, &i) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        // canonical sign: largest-magnitude component positive
        let pivot = v.iter().cloned().fold(0.0f64, |acc, e| if e.abs() > acc.abs() { e } else { acc });
        let s = pivot.signum() / eig.eigenvalues[i].sqrt();
        for c in 0..x.channels {
            transform[(row, c)] = v[c] * s;
        }
    }
    let t: Vec<f64> = transform.transpose().as_slice().to_vec(); // row-major m x C
    let mut z = vec![0.0; m * x.samples];
    gemm(m, x.channels, x.samples, 1.0, &t, false, &centred.data, false, 0.0, &mut z);
    Ok(Whitened { signals: MixedSignals { channels: m, samples: x.samples, data: z, spatial_dims: x.spatial_dims }, transform })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub multiplier: f64,
    pub closeness: f64,
    pub w_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcarResult {
    /// Extracted map, min-max normalised (all zeros if constant).
    pub v: HeatMap,
    /// Sign-corrected unnormalised output `w^T z`.
    pub y: Vec<f64>,
    /// Unit-norm unmixing vector in whitened space.
    pub w: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    pub history: Vec<IterationRecord>,
}

fn project(z: &MixedSignals, w: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; z.samples];
    gemm(1, z.channels, z.samples, 1.0, w, false, &z.data, false, 0.0, &mut y);
    y
}

/// `E[z * f]` over samples, one entry per whitened row.
fn weighted_rows(z: &MixedSignals, f: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.channels];
    gemm(z.channels, z.samples, 1, 1.0 / z.samples as f64, &z.data, false, f, false, 0.0, &mut out);
    out
}

fn normalize(w: &mut [f64]) -> f64 {
    let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        w.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Runs the constrained one-unit iteration on whitened mixtures, starting
/// from the least-squares projection of the reference.
pub fn solve(z: &MixedSignals, r: &ReferenceSignal, cfg: &IcarConfig) -> Result<IcarResult> {
    solve_from(z, r, cfg, None)
}

pub fn solve_from(z: &MixedSignals, r: &ReferenceSignal, cfg: &IcarConfig, init: Option<&[f64]>) -> Result<IcarResult> {
    cfg.validate()?;
    if r.values.len() != z.samples {
        return Err(DntError::Shape(format!("reference has {} samples, mixtures {}", r.values.len(), z.samples)));
    }
    let m = z.channels;
    let mut w = match init {
        Some(w0) if w0.len() == m => w0.to_vec(),
        Some(w0) => return Err(DntError::Shape(format!("initial w has {} entries for {m} rows", w0.len()))),
        None => weighted_rows(z, &r.values),
    };
    if normalize(&mut w) < 1e-12 {
        w = vec![0.0; m];
        w[0] = 1.0;
    }

    let mut mu = 0.0;
    let mut history = Vec::new();
    let mut converged = false;
    let mut best: Option<(bool, f64, Vec<f64>)> = None;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        let y = project(z, &w);
        let eps_val = closeness(&y, r);
        let contrast = negentropy(&y, cfg);
        let feasible = eps_val <= cfg.xi;
        let score = if feasible { contrast } else { -eps_val };
        let better = match &best {
            None => true,
            Some((bf, bs, _)) => (feasible && !bf) || (feasible == *bf && score > *bs),
        };
        if better {
            best = Some((feasible, score, w.clone()));
        }

        mu = (mu + cfg.gamma * (eps_val - cfg.xi)).max(0.0);
        let t: Vec<f64> = y.iter().map(|v| v.tanh()).collect();
        let eq = y.iter().map(|v| log_cosh(*v)).sum::<f64>() / y.len() as f64;
        let rho_bar = if eq >= cfg.gauss_moment { cfg.rho } else { -cfg.rho };
        let e_q2 = t.iter().map(|v| 1.0 - v * v).sum::<f64>() / y.len() as f64;
        let e_zg = weighted_rows(z, &t);
        let diff: Vec<f64> = y.iter().zip(&r.values).map(|(a, b)| 2.0 * (a - b)).collect();
        let e_zd = weighted_rows(z, &diff);
        let mut den = rho_bar * e_q2 - mu;
        if den.abs() < 1e-12 {
            den = if den < 0.0 { -1e-12 } else { 1e-12 };
        }
        let mut next: Vec<f64> = (0..m)
            .map(|i| w[i] - cfg.eta * (rho_bar * e_zg[i] - 0.5 * mu * e_zd[i]) / den)
            .collect();
        if normalize(&mut next) == 0.0 {
            break;
        }
        iterations += 1;
        history.push(IterationRecord {
            multiplier: mu,
            closeness: eps_val,
            w_norm: next.iter().map(|v| v * v).sum::<f64>().sqrt(),
        });
        let d_minus = next.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let d_plus = next.iter().zip(&w).map(|(a, b)| (a + b) * (a + b)).sum::<f64>().sqrt();
        w = next;
        if d_minus.min(d_plus) < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        if let Some((_, _, bw)) = best {
            log::debug!("ICA-R did not converge in {} iterations; using best iterate", cfg.max_iters);
            w = bw;
        }
    }

    let mut y = project(z, &w);
    let corr: f64 = y.iter().zip(&r.values).map(|(a, b)| a * b).sum();
    if corr < 0.0 {
        y.iter_mut().for_each(|v| *v = -*v);
        w.iter_mut().for_each(|v| *v = -*v);
    }
    let (h, wd) = z.spatial_dims;
    let v = HeatMap { height: h, width: wd, values: min_max(&y), normalized: true };
    Ok(IcarResult { v, y, w, iterations_used: iterations, converged, history })
}

/// Reference built from the backbone prior map: channel mean, resampled to
/// the dual-network grid, standardised.
pub fn reference_from_prior(h_v: &FeatureStack, dims: (usize, usize)) -> Result<ReferenceSignal> {
    let prior = channel_mean(h_v).resized(dims.0, dims.1);
    ReferenceSignal::standardize(&prior.values)
}

/// Mixtures from a feature stack. When there are not more pixels than
/// channels, constant channels are dropped and the highest-variance
/// `pixels - 1` remaining channels are kept.
pub fn mixtures_from_stack(h_d: &FeatureStack) -> Result<MixedSignals> {
    let t = &h_d.values;
    let p = t.plane();
    let mut keep: Vec<usize> = (0..t.channels).collect();
    if p <= t.channels {
        let var = |c: usize| {
            let row = t.channel(c);
            let m = mean(row);
            row.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
        };
        let mut scored: Vec<(usize, f64)> = keep.iter().map(|&c| (c, var(c))).filter(|(_, v)| *v > 0.0).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(p.saturating_sub(1));
        keep = scored.into_iter().map(|(c, _)| c).collect();
        keep.sort_unstable();
    }
    let data = keep.iter().flat_map(|&c| t.channel(c).iter().copied()).collect();
    MixedSignals::new(keep.len(), p, data, (t.height, t.width))
}

/// End-to-end extraction: mixtures from the dual-network prior map,
/// reference from the backbone prior map.
pub fn extract(h_d: &FeatureStack, h_v: &FeatureStack, cfg: &IcarConfig) -> Result<IcarResult> {
    if h_d.layer != h_v.layer {
        return Err(DntError::Shape(format!("mixtures from {:?}, reference from {:?}", h_d.layer, h_v.layer)));
    }
    let dims = h_d.dims();
    let reference = reference_from_prior(h_v, dims)?;
    if reference.values.len() != dims.0 * dims.1 {
        return Err(DntError::Shape("reference does not match the mixture grid".into()));
    }
    let x = mixtures_from_stack(h_d)?;
    if x.channels == 1 {
        // a single surviving direction needs no unmixing
        let y0 = standardize(x.row(0)).ok_or_else(|| DntError::Degenerate("constant mixture".into()))?;
        let z = MixedSignals::new(1, x.samples, y0, dims)?;
        return solve(&z, &reference, cfg);
    }
    let white = whiten(&x, cfg.whiten_eps)?;
    solve(&white.signals, &reference, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::LayerId;
    use crate::tensor::Tensor3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn cov(z: &MixedSignals) -> Vec<f64> {
        let m = z.channels;
        let mut out = vec![0.0; m * m];
        for a in 0..m {
            for b in 0..m {
                out[a * m + b] = z.row(a).iter().zip(z.row(b)).map(|(x, y)| x * y).sum::<f64>() / z.samples as f64;
            }
        }
        out
    }

    #[test]
    fn gauss_moment_matches_simpson_quadrature() {
        // independent route: composite Simpson on [-40, 40]
        let n = 200_000;
        let (a, b) = (-40.0f64, 40.0f64);
        let h = (b - a) / n as f64;
        let f = |x: f64| (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt() * log_cosh(x);
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        let simpson = s * h / 3.0;
        assert!((gauss_moment() - simpson).abs() < 1e-10, "{} vs {simpson}", gauss_moment());
        assert!((gauss_moment() - 0.3746).abs() < 1e-4);
        let (_, w) = gauss_hermite(40);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negentropy_cases() {
        let cfg = IcarConfig { rho: 2.0, ..Default::default() };
        let zeros = vec![0.0; 10];
        assert!((negentropy(&zeros, &cfg) - 2.0 * cfg.gauss_moment.powi(2)).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = gaussian(&mut rng, 100_000);
        assert!(negentropy(&g, &cfg) < 0.01 * cfg.rho);
        let y: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        assert_ne!(negentropy(&y, &cfg), negentropy(&y2, &cfg));
    }

    #[test]
    fn closeness_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = ReferenceSignal::standardize(&gaussian(&mut rng, 200)).unwrap();
        assert!(closeness(&r.values, &r) < 1e-24);
        let neg: Vec<f64> = r.values.iter().map(|v| -v).collect();
        assert!((closeness(&neg, &r) - 4.0).abs() < 1e-12);

        let y = gaussian(&mut rng, 200);
        let m = y.iter().sum::<f64>() / 200.0;
        let sd = (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 200.0).sqrt();
        let mut acc = 0.0;
        for i in 0..200 {
            let d = (y[i] - m) / sd - r.values[i];
            acc += d * d;
        }
        assert!((closeness(&y, &r) - acc / 200.0).abs() < 1e-12);
    }

    #[test]
    fn whitening_gives_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..500).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        // correlate them
        let mixed: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..500).map(|p| rows[i][p] + 0.5 * rows[(i + 1) % 4][p] + 3.0).collect())
            .collect();
        let white = whiten(&MixedSignals::from_rows(&mixed).unwrap(), 1e-8).unwrap();
        assert_eq!(white.signals.channels, 4);
        let c = cov(&white.signals);
        for a in 0..4 {
            assert!(white.signals.row(a).iter().sum::<f64>().abs() < 1e-9);
            for b in 0..4 {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((c[a * 4 + b] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn whitening_white_input_is_a_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pre = MixedSignals::from_rows(&(0..3).map(|_| gaussian(&mut rng, 400)).collect::<Vec<_>>()).unwrap();
        let once = whiten(&pre, 1e-8).unwrap().signals;
        let twice = whiten(&once, 1e-8).unwrap();
        let t = &twice.transform;
        let tt = t * t.transpose();
        for a in 0..3 {
            for b in 0..3 {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((tt[(a, b)] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn whitening_rank_deficiency_and_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = gaussian(&mut rng, 100);
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        let white = whiten(&MixedSignals::from_rows(&[a, b]).unwrap(), 1e-8).unwrap();
        assert_eq!(white.signals.channels, 1);
        let zero = MixedSignals::from_rows(&[vec![1.0; 10], vec![2.0; 10]]).unwrap();
        assert!(matches!(whiten(&zero, 1e-8), Err(DntError::Degenerate(_))));
        let short = MixedSignals::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(whiten(&short, 1e-8).is_err());
    }

    fn laplace(rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.random_range(-0.5..0.5);
        -u.signum() * (1.0 - 2.0 * u.abs()).ln() / std::f64::consts::SQRT_2
    }

    #[test]
    fn recovers_reference_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = 1000;
        let s1: Vec<f64> = (0..p).map(|_| laplace(&mut rng)).collect();
        let s2: Vec<f64> = (0..p).map(|_| rng.random_range(-1.7..1.7)).collect();
        let s3 = gaussian(&mut rng, p);
        let mix = |a: f64, b: f64, c: f64| -> Vec<f64> { (0..p).map(|i| a * s1[i] + b * s2[i] + c * s3[i]).collect() };
        let x = MixedSignals::from_rows(&[mix(1.0, 0.5, 0.2), mix(-0.3, 1.0, 0.7), mix(0.4, -0.2, 1.0)]).unwrap();
        let white = whiten(&x, 1e-8).unwrap();
        let r = ReferenceSignal::standardize(&s1).unwrap();
        let cfg = IcarConfig { xi: 0.05, ..Default::default() };
        let res = solve(&white.signals, &r, &cfg).unwrap();
        let corr = pearson(&res.y, &s1);
        assert!(corr > 0.999, "corr {corr}");
        assert!((res.w.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        for rec in &res.history {
            assert!((rec.w_norm - 1.0).abs() < 1e-9);
        }
        assert!(res.v.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(res.v.max(), 1.0);
        assert_eq!(res.v.min(), 0.0);

        // started at the optimum it stops almost immediately
        let again = solve_from(&white.signals, &r, &cfg, Some(&res.w)).unwrap();
        assert!(again.converged && again.iterations_used <= 2, "{}", again.iterations_used);
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let (ma, mb) = (mean(a), mean(b));
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn multiplier_rises_while_infeasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..400).map(|_| laplace(&mut rng)).collect()).collect();
        let white = whiten(&MixedSignals::from_rows(&rows).unwrap(), 1e-8).unwrap();
        // a reference only loosely related to the sources keeps the constraint active
        let raw: Vec<f64> = (0..400).map(|i| rows[0][i] + 2.0 * rows[1][i] + gaussian(&mut rng, 1)[0] * 3.0).collect();
        let r = ReferenceSignal::standardize(&raw).unwrap();
        let res = solve(&white.signals, &r, &IcarConfig { xi: 0.1, max_iters: 50, ..Default::default() }).unwrap();
        let mut prev_mu = 0.0;
        for rec in &res.history {
            if rec.closeness > 0.1 {
                assert!(rec.multiplier >= prev_mu);
            }
            prev_mu = rec.multiplier;
        }
        assert!(res.y.iter().zip(&r.values).map(|(a, b)| a * b).sum::<f64>() >= 0.0);
    }

    fn stack(channels: &[Vec<f64>], h: usize, w: usize) -> FeatureStack {
        let data = channels.iter().flatten().copied().collect();
        FeatureStack::new(Tensor3::from_vec(channels.len(), h, w, data).unwrap(), LayerId::Layer2, 16).unwrap()
    }

    #[test]
    fn extract_follows_reference_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (h, w) = (12, 12);
        let blob: Vec<f64> = (0..h * w)
            .map(|p| {
                let (i, j) = ((p / w) as f64 - 5.5, (p % w) as f64 - 4.0);
                (-(i * i + j * j) / 8.0).exp()
            })
            .collect();
        let mut chans = vec![blob.iter().map(|v| 3.0 * v).collect::<Vec<f64>>()];
        for _ in 0..5 {
            chans.push((0..h * w).map(|_| rng.random_range(0.0..1.0)).collect());
        }
        let h_d = stack(&chans, h, w);
        let h_v = stack(&[blob.clone(), blob.iter().map(|v| 0.5 * v).collect()], h, w);
        let res = extract(&h_d, &h_v, &IcarConfig::default()).unwrap();
        assert!(pearson(&res.v.values, &blob) > 0.95);
        let again = extract(&h_d, &h_v, &IcarConfig::default()).unwrap();
        assert_eq!(res, again);
    }

    #[test]
    fn extract_with_identical_channels() {
        let (h, w) = (6, 6);
        let chan: Vec<f64> = (0..36).map(|p| ((p * 7) % 11) as f64).collect();
        let h_d = stack(&[chan.clone(), chan.clone(), chan.clone()], h, w);
        let h_v = stack(&[chan.clone()], h, w);
        let res = extract(&h_d, &h_v, &IcarConfig::default()).unwrap();
        let expected = min_max(&chan);
        for (a, b) in res.v.values.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn extract_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w) = (10, 10);
        let chans: Vec<Vec<f64>> = (0..5).map(|_| (0..100).map(|_| laplace(&mut rng)).collect()).collect();
        let reference: Vec<f64> = (0..100).map(|p| chans[2][p] + 0.3 * chans[0][p]).collect();
        let h_v = stack(&[reference], h, w);
        let a = extract(&stack(&chans, h, w), &h_v, &IcarConfig::default()).unwrap();
        let perm = vec![chans[3].clone(), chans[0].clone(), chans[4].clone(), chans[2].clone(), chans[1].clone()];
        let b = extract(&stack(&perm, h, w), &h_v, &IcarConfig::default()).unwrap();
        for (x, y) in a.v.values.iter().zip(&b.v.values) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn extract_rejects_stream_mismatch_and_flat_reference() {
        let h_d = stack(&[vec![1.0, 2.0, 3.0, 4.0], vec![4.0, 1.0, 2.0, 0.0]], 2, 2);
        let mut h_v = stack(&[vec![1.0, 2.0, 3.0, 5.0]], 2, 2);
        h_v.layer = LayerId::Layer1;
        assert!(matches!(extract(&h_d, &h_v, &IcarConfig::default()), Err(DntError::Shape(_))));
        let flat = stack(&[vec![1.0; 4]], 2, 2);
        assert!(matches!(extract(&h_d, &flat, &IcarConfig::default()), Err(DntError::Degenerate(_))));
    }
}
