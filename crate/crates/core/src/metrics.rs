//! Model-free evaluation: Fréchet distance, Inception Score, paired KL,
//! onset detection and scoring, and a cross-correlation lag.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::audiofe::MelSpectrogram;
use crate::error::{Error, Result};

/// Diagonal shrinkage added when a set has no more rows than dimensions.
pub const COV_SHRINKAGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Array2<f64>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitSet {
    pub logits: Array2<f64>,
    /// Row `i` of two paired sets describes the same item.
    pub paired: bool,
}

fn check_finite(x: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(what))
    }
}

fn mean_and_cov(x: ArrayView2<'_, f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mu = x.mean_axis(Axis(0)).expect("nonempty");
    let centered = &x - &mu;
    let denom = (n.max(2) - 1) as f64;
    let cov = centered.t().dot(&centered) / denom;
    let mut c = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    if n <= d {
        for i in 0..d {
            c[(i, i)] += COV_SHRINKAGE;
        }
    }
    (DVector::from_iterator(d, mu.iter().copied()), c)
}

/// Square root of a symmetric positive-semidefinite matrix, negative
/// eigenvalues clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `trace((A B)^{1/2})` via the symmetric form `A^{1/2} B A^{1/2}`, which
/// shares its eigenvalues with `A B`.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = psd_sqrt(a);
    let m = &ra * b * &ra;
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum()
}

pub fn frechet_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    let (na, da) = a.vectors.dim();
    let (nb, db) = b.vectors.dim();
    if da != db {
        return Err(Error::shape("frechet distance", format!("dimension {da} vs {db}")));
    }
    if na == 0 || nb == 0 {
        return Err(Error::shape("frechet distance", "empty embedding set".to_string()));
    }
    check_finite(a.vectors.view(), "embeddings a")?;
    check_finite(b.vectors.view(), "embeddings b")?;
    let (mu_a, ca) = mean_and_cov(a.vectors.view());
    let (mu_b, cb) = mean_and_cov(b.vectors.view());
    let dm = (mu_a - mu_b).norm_squared();
    let fd = dm + ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(&ca, &cb);
    Ok(fd.max(0.0))
}

fn softmax_row(l: ArrayView1<'_, f64>) -> Vec<f64> {
    let m = l.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = l.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0)
}

pub fn inception_score(l: &LogitSet) -> Result<f64> {
    let (n, k) = l.logits.dim();
    if n == 0 || k < 2 {
        return Err(Error::shape("inception score", format!("{n} rows of {k} classes")));
    }
    check_finite(l.logits.view(), "logits")?;
    let probs: Vec<Vec<f64>> = l.logits.rows().into_iter().map(softmax_row).collect();
    let mut marginal = vec![0.0; k];
    for p in &probs {
        for (m, v) in marginal.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let mean_kl = probs.iter().map(|p| kl(p, &marginal)).sum::<f64>() / n as f64;
    Ok(mean_kl.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// `KL(ground truth || generated)`.
    #[default]
    GtToGen,
    GenToGt,
}

impl KlDirection {
    pub fn name(self) -> &'static str {
        match self {
            KlDirection::GtToGen => "gt||gen",
            KlDirection::GenToGt => "gen||gt",
        }
    }
}

pub fn paired_kl(gt: &LogitSet, gen: &LogitSet, dir: KlDirection) -> Result<f64> {
    if !(gt.paired && gen.paired) {
        return Err(Error::Config("paired KL needs paired logit sets".into()));
    }
    if gt.logits.dim() != gen.logits.dim() || gt.logits.nrows() == 0 {
        return Err(Error::shape(
            "paired kl",
            format!("{:?} vs {:?}", gt.logits.dim(), gen.logits.dim()),
        ));
    }
    check_finite(gt.logits.view(), "ground-truth logits")?;
    check_finite(gen.logits.view(), "generated logits")?;
    let total: f64 = gt
        .logits
        .rows()
        .into_iter()
        .zip(gen.logits.rows())
        .map(|(a, b)| {
            let (p, q) = (softmax_row(a), softmax_row(b));
            match dir {
                KlDirection::GtToGen => kl(&p, &q),
                KlDirection::GenToGt => kl(&q, &p),
            }
        })
        .sum();
    Ok(total / gt.logits.nrows() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnsetSeries {
    /// Sorted, in `[0, duration)`.
    pub times: Vec<f64>,
    /// Detector confidence per onset; equal values when unknown.
    pub strengths: Vec<f64>,
    pub duration: f64,
}

impl OnsetSeries {
    pub fn new(mut times: Vec<f64>, duration: f64) -> Result<Self> {
        times.sort_by(|a, b| a.total_cmp(b));
        if times.iter().any(|&t| !(0.0..duration).contains(&t)) {
            return Err(Error::Config(format!("onset times must lie in [0, {duration})")));
        }
        let strengths = vec![1.0; times.len()];
        Ok(OnsetSeries {
            times,
            strengths,
            duration,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnsetParams {
    pub window_sec: f64,
    pub mad_factor: f64,
    pub min_gap_sec: f64,
    /// Peaks below this fraction of the largest flux value are ignored.
    pub rel_floor: f64,
}

impl Default for OnsetParams {
    fn default() -> Self {
        OnsetParams {
            window_sec: 1.0,
            mad_factor: 1.5,
            min_gap_sec: 0.1,
            rel_floor: 0.1,
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Half-wave-rectified frame differences summed over columns; frame 0 is 0.
pub fn spectral_flux(frames: ArrayView2<'_, f64>) -> Vec<f64> {
    let n = frames.nrows();
    let mut flux = vec![0.0; n];
    for j in 1..n {
        flux[j] = frames
            .row(j)
            .iter()
            .zip(frames.row(j - 1))
            .map(|(a, b)| (a - b).max(0.0))
            .sum();
    }
    flux
}

/// Peak picking on a flux envelope. `frame_time(j)` maps frames to seconds.
pub fn pick_onsets(flux: &[f64], fps: f64, frame_time: impl Fn(usize) -> f64, duration: f64, p: &OnsetParams) -> OnsetSeries {
    let n = flux.len();
    let max = flux.iter().copied().fold(0.0, f64::max);
    let half = ((p.window_sec * fps) / 2.0).round().max(1.0) as usize;
    let mut cands: Vec<(usize, f64)> = Vec::new();
    if max > 0.0 {
        for j in 0..n {
            let f = flux[j];
            let left_ok = j == 0 || f >= flux[j - 1];
            let right_ok = j + 1 == n || f > flux[j + 1];
            if f <= 0.0 || f < p.rel_floor * max || !left_ok || !right_ok {
                continue;
            }
            let lo = j.saturating_sub(half);
            let hi = (j + half + 1).min(n);
            let mut win = flux[lo..hi].to_vec();
            let med = median(&mut win);
            let mut dev: Vec<f64> = win.iter().map(|v| (v - med).abs()).collect();
            let mad = median(&mut dev);
            if f > med + p.mad_factor * mad {
                cands.push((j, f));
            }
        }
    }
    // Strongest first, suppressing neighbours within the minimum gap.
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<(f64, f64)> = Vec::new();
    for (j, f) in cands {
        let t = frame_time(j);
        if t < 0.0 || t >= duration {
            continue;
        }
        if kept.iter().all(|&(u, _)| (u - t).abs() >= p.min_gap_sec) {
            kept.push((t, f));
        }
    }
    kept.sort_by(|a, b| a.0.total_cmp(&b.0));
    OnsetSeries {
        times: kept.iter().map(|k| k.0).collect(),
        strengths: kept.iter().map(|k| k.1).collect(),
        duration,
    }
}

/// Onsets of a log-mel spectrogram. The log flux peaks on the first frame
/// that sees new energy, so frame `j` is stamped at the middle of the last
/// hop its window covers.
pub fn detect_onsets(mel: &MelSpectrogram, p: &OnsetParams) -> OnsetSeries {
    let sp = &mel.params;
    let sr = sp.sample_rate as f64;
    let n = mel.data.nrows();
    let duration = if n == 0 {
        0.0
    } else {
        ((n - 1) * sp.hop + sp.win_len) as f64 / sr
    };
    let flux = spectral_flux(mel.data.view());
    let offset = sp.win_len as f64 - sp.hop as f64 / 2.0;
    pick_onsets(&flux, mel.fps(), |j| (j as f64 * sp.hop as f64 + offset) / sr, duration, p)
}

/// Onsets of a single envelope sampled at `fps`, frame `j` at `j / fps`.
pub fn detect_onsets_envelope(env: &[f64], fps: f64, p: &OnsetParams) -> OnsetSeries {
    let col = ArrayView2::from_shape((env.len(), 1), env).expect("column view");
    let flux = spectral_flux(col);
    pick_onsets(&flux, fps, |j| j as f64 / fps, env.len() as f64 / fps, p)
}

/// Greedy one-to-one matching in time order: each prediction takes the
/// earliest unmatched reference within `tol`.
pub fn match_count(pred: &[f64], gt: &[f64], tol: f64) -> usize {
    let mut sorted = pred.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut used = vec![false; gt.len()];
    let mut m = 0;
    for t in sorted {
        if let Some(k) = (0..gt.len()).find(|&k| !used[k] && (gt[k] - t).abs() <= tol) {
            used[k] = true;
            m += 1;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnsetScores {
    pub accuracy: f64,
    pub ap: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn onset_scores(pred: &OnsetSeries, gt: &OnsetSeries, tol: f64) -> Result<OnsetScores> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("onset tolerance must be positive, got {tol}")));
    }
    let (np, ng) = (pred.len(), gt.len());
    if np == 0 && ng == 0 {
        return Ok(OnsetScores {
            accuracy: 1.0,
            ap: 1.0,
            f1: 1.0,
            precision: 1.0,
            recall: 1.0,
        });
    }
    let m = match_count(&pred.times, &gt.times, tol) as f64;
    let precision = if np == 0 { 0.0 } else { m / np as f64 };
    let recall = if ng == 0 { 0.0 } else { m / ng as f64 };
    let f1 = if m == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let accuracy = m / np.max(ng) as f64;

    let ap = if ng == 0 || np == 0 {
        0.0
    } else {
        let mut order: Vec<usize> = (0..np).collect();
        order.sort_by(|&a, &b| pred.strengths[b].total_cmp(&pred.strengths[a]).then(a.cmp(&b)));
        let mut points = Vec::with_capacity(np);
        let mut prefix = Vec::with_capacity(np);
        for (k, &i) in order.iter().enumerate() {
            prefix.push(pred.times[i]);
            let mk = match_count(&prefix, &gt.times, tol) as f64;
            points.push((mk / ng as f64, mk / (k + 1) as f64));
        }
        let mut area = 0.0;
        let mut prev_r = 0.0;
        for k in 0..points.len() {
            let p_interp = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
            area += (points[k].0 - prev_r) * p_interp;
            prev_r = points[k].0;
        }
        area
    };
    Ok(OnsetScores {
        accuracy,
        ap,
        f1,
        precision,
        recall,
    })
}

/// Lag in seconds maximizing the normalized cross-correlation of the
/// mean-removed envelopes over `±max_lag_sec`. Positive means `gen` trails
/// `gt`. Ties resolve towards the smaller absolute lag.
pub fn lag_metric(gen: &[f64], gt: &[f64], fps: f64, max_lag_sec: f64) -> Result<f64> {
    if gen.len() != gt.len() || gen.is_empty() {
        return Err(Error::shape("lag metric", format!("lengths {} and {}", gen.len(), gt.len())));
    }
    if gen.iter().chain(gt).any(|v| !v.is_finite()) {
        return Err(Error::non_finite("lag metric envelope"));
    }
    let centre = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|v| v - m).collect::<Vec<_>>()
    };
    let (a, b) = (centre(gen), centre(gt));
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        let which = if na == 0.0 { "generated" } else { "reference" };
        return Err(Error::UndefinedLag(format!("{which} envelope has no energy around its mean")));
    }
    let n = a.len() as i64;
    let max_lag = ((max_lag_sec * fps).round() as i64).min(n - 1);
    let mut best = (0i64, f64::NEG_INFINITY);
    for k in (0..=max_lag).flat_map(|k| if k == 0 { vec![0] } else { vec![k, -k] }) {
        let s: f64 = (0..n)
            .filter(|&j| (0..n).contains(&(j - k)))
            .map(|j| a[j as usize] * b[(j - k) as usize])
            .sum();
        let c = s / (na * nb);
        if c > best.1 {
            best = (k, c);
        }
    }
    Ok(best.0 as f64 / fps)
}
