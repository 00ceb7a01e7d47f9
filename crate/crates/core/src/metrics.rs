//! Proxy-FID, discriminator accuracy streams and augmentation-artifact
//! detectors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::augment::{self, AugmentError, AugmentKind, Policy};
use crate::gan::Strategy;
use crate::nn::{Critic, NnError, LEAKY_SLOPE};
use crate::tensor::{no_grad, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("{what} needs at least {need} images, got {got}")]
    TooFewSamples { what: &'static str, need: usize, got: usize },
    #[error("non-finite features or statistics")]
    NonFinite,
    #[error("covariance square root failed to converge")]
    SqrtFailed,
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

pub const FEATURE_DIM: usize = 64;
pub const MIN_FID_SAMPLES: usize = 64;
const EVAL_CHUNK: usize = 64;

/// Frozen random conv net: three `conv3×3 + leaky_relu` blocks (16, 32, 64
/// channels; the first two stride 2) then global average pooling.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub seed: u64,
    layers: Vec<(Tensor, usize)>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = 3;
        for (cout, stride) in [(16, 2), (32, 2), (FEATURE_DIM, 1)] {
            let fan_in = (cin * 9) as f32;
            let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("valid std");
            let w: Vec<f32> = (0..cout * cin * 9).map(|_| normal.sample(&mut rng)).collect();
            layers.push((Tensor::from_vec(w, &[cout, cin, 3, 3]).expect("shape"), stride));
            cin = cout;
        }
        Self { seed, layers }
    }

    /// `(N, 64)` features in `f64`, one row per image.
    pub fn features(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let n = images.shape().first().copied().unwrap_or(0);
        let mut out = Vec::with_capacity(n);
        no_grad(|| -> Result<()> {
            let mut start = 0;
            while start < n {
                let end = (start + EVAL_CHUNK).min(n);
                let mut h = images.slice(0, start, end)?;
                for (w, stride) in &self.layers {
                    h = h.conv2d(w, None, *stride, 1)?.leaky_relu(LEAKY_SLOPE)?;
                }
                let pooled = h.mean_axis(3)?.mean_axis(2)?;
                let d = pooled.data();
                out.extend(d.chunks(FEATURE_DIM).map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()));
                start = end;
            }
            Ok(())
        })?;
        Ok(out)
    }
}

/// Mean and covariance (unbiased) of feature rows.
pub fn gaussian_stats(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let mut centered = x;
    for j in 0..d {
        centered.column_mut(j).add_scalar_mut(-mu[j]);
    }
    let denom = (n.max(2) - 1) as f64;
    let sigma = centered.transpose() * &centered / denom;
    (mu, sigma)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, 1e-12, 10_000)?;
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// `tr((A B)^{1/2})` computed as `tr((A^{1/2} B A^{1/2})^{1/2})`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<f64> {
    let ah = psd_sqrt(a)?;
    let inner = &ah * b * &ah;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, 1e-12, 10_000)?;
    Some(eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum())
}

/// Fréchet distance between two Gaussians. On a failed square root, `εI`
/// (`ε = 1e-6`) is added to both covariances and the computation retried
/// once. The two argument orders are averaged so the result is exactly
/// symmetric, and rounding below zero is clamped.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    s1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> Result<f64> {
    let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
    if !finite(s1) || !finite(s2) || mu1.iter().chain(mu2.iter()).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let tr_cross = |a: &DMatrix<f64>, b: &DMatrix<f64>| -> Option<f64> {
        Some(0.5 * (trace_sqrt_product(a, b)? + trace_sqrt_product(b, a)?))
    };
    let (tr_cross, t1, t2) = match tr_cross(s1, s2) {
        Some(t) => (t, s1.trace(), s2.trace()),
        None => {
            let eps = DMatrix::identity(s1.nrows(), s1.ncols()) * 1e-6;
            let (a, b) = (s1 + &eps, s2 + &eps);
            let t = tr_cross(&a, &b).ok_or(MetricsError::SqrtFailed)?;
            (t, a.trace(), b.trace())
        }
    };
    let diff = mu1 - mu2;
    let fd = diff.dot(&diff) + t1 + t2 - 2.0 * tr_cross;
    if !fd.is_finite() {
        return Err(MetricsError::NonFinite);
    }
    Ok(fd.max(0.0))
}

/// Fréchet distance between extractor features of two image sets.
pub fn proxy_fid(real: &Tensor, generated: &Tensor, extractor: &FeatureExtractor) -> Result<f64> {
    for (what, t) in [("real set", real), ("generated set", generated)] {
        let got = t.shape().first().copied().unwrap_or(0);
        if got < MIN_FID_SAMPLES {
            return Err(MetricsError::TooFewSamples {
                what,
                need: MIN_FID_SAMPLES,
                got,
            });
        }
    }
    let (m1, s1) = gaussian_stats(&extractor.features(real)?);
    let (m2, s2) = gaussian_stats(&extractor.features(generated)?);
    frechet_distance(&m1, &s1, &m2, &s2)
}

/// Proxy-FID against precomputed reference statistics.
pub fn proxy_fid_to_stats(
    reference: &(DVector<f64>, DMatrix<f64>),
    generated: &Tensor,
    extractor: &FeatureExtractor,
) -> Result<f64> {
    let got = generated.shape().first().copied().unwrap_or(0);
    if got < MIN_FID_SAMPLES {
        return Err(MetricsError::TooFewSamples {
            what: "generated set",
            need: MIN_FID_SAMPLES,
            got,
        });
    }
    let (m2, s2) = gaussian_stats(&extractor.features(generated)?);
    frechet_distance(&reference.0, &reference.1, &m2, &s2)
}

/// Fraction of logits on the correct side of zero. A logit of exactly zero
/// is counted as wrong.
pub fn sign_accuracy(logits: &[f32], real: bool) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let correct = logits.iter().filter(|&&v| if real { v > 0.0 } else { v < 0.0 }).count();
    correct as f64 / logits.len() as f64
}

fn critic_logits(d: &dyn Critic, x: &Tensor) -> Result<Vec<f32>> {
    let n = x.shape().first().copied().unwrap_or(0);
    let mut out = Vec::with_capacity(n);
    no_grad(|| -> Result<()> {
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            out.extend(d.logits(&x.slice(0, start, end)?)?.to_vec());
            start = end;
        }
        Ok(())
    })?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Accuracies {
    pub train_real: f64,
    pub val_real: f64,
    /// Fakes as the discriminator sees them under the training strategy.
    pub fake: f64,
    pub t_real: f64,
    pub t_fake: f64,
    pub raw_fake: f64,
}

/// Sign-rule accuracies. `t_real`/`t_fake` use one fresh draw of `policy`
/// on the training reals and the fakes; `raw_fake` uses the fakes as is.
pub fn d_accuracies(
    d: &dyn Critic,
    train_reals: &Tensor,
    val_reals: &Tensor,
    fakes: &Tensor,
    strategy: Strategy,
    policy: &Policy,
    rng: &mut ChaCha8Rng,
) -> Result<Accuracies> {
    let (t_real_x, _) = no_grad(|| augment::apply_policy(train_reals, policy, rng))?;
    let (t_fake_x, _) = no_grad(|| augment::apply_policy(fakes, policy, rng))?;
    let train_real = sign_accuracy(&critic_logits(d, train_reals)?, true);
    let val_real = sign_accuracy(&critic_logits(d, val_reals)?, true);
    let t_real = sign_accuracy(&critic_logits(d, &t_real_x)?, true);
    let t_fake = sign_accuracy(&critic_logits(d, &t_fake_x)?, false);
    let raw_fake = sign_accuracy(&critic_logits(d, fakes)?, false);
    let fake = if strategy.augments_fakes_for_d() { t_fake } else { raw_fake };
    Ok(Accuracies {
        train_real,
        val_real,
        fake,
        t_real,
        t_fake,
        raw_fake,
    })
}

/// A pixel is near zero when every channel satisfies `|v| < NEAR_ZERO`.
pub const NEAR_ZERO: f32 = 0.05;

fn near_zero_masks(images: &Tensor) -> Result<(Vec<Vec<bool>>, usize, usize)> {
    let [n, c, h, w] = *images.shape() else {
        return Err(TensorError::InvalidArgument {
            op: "artifact_score",
            msg: format!("expects (batch, channels, height, width), got {:?}", images.shape()),
        }
        .into());
    };
    let d = images.data();
    let masks = (0..n)
        .map(|b| {
            (0..h * w)
                .map(|p| (0..c).all(|ch| d[(b * c + ch) * h * w + p].abs() < NEAR_ZERO))
                .collect()
        })
        .collect();
    Ok((masks, h, w))
}

/// Mean over images of the largest near-zero fraction inside any
/// `⌊R/2⌋`-side window.
pub fn cutout_artifact_score(images: &Tensor) -> Result<f64> {
    let (masks, h, w) = near_zero_masks(images)?;
    let side = augment::cutout_side(h.min(w)).max(1);
    let area = (side * side) as f64;
    let mut total = 0.0;
    for m in &masks {
        // Summed-area table with a zero border.
        let mut sat = vec![0u32; (h + 1) * (w + 1)];
        for y in 0..h {
            for x in 0..w {
                sat[(y + 1) * (w + 1) + x + 1] = m[y * w + x] as u32 + sat[y * (w + 1) + x + 1]
                    + sat[(y + 1) * (w + 1) + x]
                    - sat[y * (w + 1) + x];
            }
        }
        let mut best = 0u32;
        for y in 0..=h - side {
            for x in 0..=w - side {
                let s = sat[(y + side) * (w + 1) + x + side] + sat[y * (w + 1) + x]
                    - sat[y * (w + 1) + x + side]
                    - sat[(y + side) * (w + 1) + x];
                best = best.max(s);
            }
        }
        total += best as f64 / area;
    }
    Ok(if masks.is_empty() { 0.0 } else { total / masks.len() as f64 })
}

/// Mean over images of the largest near-zero fraction in a border band of
/// width 1..=⌊R/8⌋ along any of the four sides.
pub fn translation_artifact_score(images: &Tensor) -> Result<f64> {
    let (masks, h, w) = near_zero_masks(images)?;
    let max_band = (augment::max_shift(h.min(w)) as usize).max(1);
    let mut total = 0.0;
    for m in &masks {
        let row = |y: usize| (0..w).filter(|&x| m[y * w + x]).count();
        let col = |x: usize| (0..h).filter(|&y| m[y * w + x]).count();
        let mut best: f64 = 0.0;
        let (mut top, mut bottom, mut left, mut right) = (0, 0, 0, 0);
        for band in 1..=max_band {
            top += row(band - 1);
            bottom += row(h - band);
            left += col(band - 1);
            right += col(w - band);
            let horiz = (band * w) as f64;
            let vert = (band * h) as f64;
            best = best
                .max(top as f64 / horiz)
                .max(bottom as f64 / horiz)
                .max(left as f64 / vert)
                .max(right as f64 / vert);
        }
        total += best;
    }
    Ok(if masks.is_empty() { 0.0 } else { total / masks.len() as f64 })
}

/// Largest applicable detector score for `policy` (cutout and/or
/// translation); zero when neither is in the policy.
pub fn artifact_score(images: &Tensor, policy: &Policy) -> Result<f64> {
    let mut score: f64 = 0.0;
    if policy.contains(AugmentKind::Cutout) {
        score = score.max(cutout_artifact_score(images)?);
    }
    if policy.contains(AugmentKind::Translation) {
        score = score.max(translation_artifact_score(images)?);
    }
    Ok(score)
}

/// One evaluation row.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsRecord {
    pub step: u64,
    pub proxy_fid: f64,
    pub acc_train_real: f64,
    pub acc_val_real: f64,
    pub acc_fake: f64,
    pub acc_t_real: f64,
    pub acc_t_fake: f64,
    pub acc_raw_fake: f64,
    pub loss_d: f64,
    pub loss_g: f64,
}

pub const CSV_HEADER: &str =
    "step,proxy_fid,acc_train_real,acc_val_real,acc_fake,acc_T_real,acc_T_fake,acc_raw_fake,loss_d,loss_g";

impl MetricsRecord {
    pub fn from_parts(step: u64, proxy_fid: f64, acc: Accuracies, loss_d: f64, loss_g: f64) -> Self {
        Self {
            step,
            proxy_fid,
            acc_train_real: acc.train_real,
            acc_val_real: acc.val_real,
            acc_fake: acc.fake,
            acc_t_real: acc.t_real,
            acc_t_fake: acc.t_fake,
            acc_raw_fake: acc.raw_fake,
            loss_d,
            loss_g,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.proxy_fid,
            self.acc_train_real,
            self.acc_val_real,
            self.acc_fake,
            self.acc_t_real,
            self.acc_t_fake,
            self.acc_raw_fake,
            self.loss_d,
            self.loss_g
        )
    }

    pub fn parse_csv_row(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 10 {
            return None;
        }
        let p = |i: usize| f[i].parse::<f64>().ok();
        Some(Self {
            step: f[0].parse().ok()?,
            proxy_fid: p(1)?,
            acc_train_real: p(2)?,
            acc_val_real: p(3)?,
            acc_fake: p(4)?,
            acc_t_real: p(5)?,
            acc_t_fake: p(6)?,
            acc_raw_fake: p(7)?,
            loss_d: p(8)?,
            loss_g: p(9)?,
        })
    }
}

/// Whole CSV document for a sequence of records.
pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
