//! Differentiable translation, cutout and color augmentations.
//!
//! Every random draw is recorded in an [`AugmentationSample`] so that the
//! exact same transform can be replayed (for finite-difference checks and
//! for R1 through `T`) and its adjoint applied to a gradient.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("{what} {value} outside [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("unknown augmentation {0:?} (expected color, translation or cutout)")]
    UnknownToken(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = AugmentError> = std::result::Result<T, E>;

pub const BRIGHTNESS_RANGE: (f32, f32) = (-0.5, 0.5);
pub const CONTRAST_RANGE: (f32, f32) = (0.5, 1.5);
pub const SATURATION_RANGE: (f32, f32) = (0.0, 2.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentKind {
    Translation,
    Cutout,
    Brightness,
    Saturation,
    Contrast,
}

/// Largest translation (in pixels) for an axis of the given size.
pub fn max_shift(size: usize) -> i32 {
    (size / 8) as i32
}

/// Side of the cutout square for an image of the given size.
pub fn cutout_side(size: usize) -> usize {
    size / 2
}

/// The realized parameters of one augmentation applied to a batch, one
/// entry per image.
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentationSample {
    /// `(dx, dy)` per image.
    Translation { shifts: Vec<(i32, i32)> },
    /// `(top, left)` corner of the square per image.
    Cutout { corners: Vec<(i32, i32)>, side: usize },
    Brightness { factors: Vec<f32> },
    Saturation { factors: Vec<f32> },
    Contrast { factors: Vec<f32> },
}

impl AugmentationSample {
    pub fn kind(&self) -> AugmentKind {
        match self {
            AugmentationSample::Translation { .. } => AugmentKind::Translation,
            AugmentationSample::Cutout { .. } => AugmentKind::Cutout,
            AugmentationSample::Brightness { .. } => AugmentKind::Brightness,
            AugmentationSample::Saturation { .. } => AugmentKind::Saturation,
            AugmentationSample::Contrast { .. } => AugmentKind::Contrast,
        }
    }

    /// Draws fresh per-image parameters for a `(batch, ·, height, width)` input.
    pub fn draw<R: Rng + ?Sized>(kind: AugmentKind, batch: usize, height: usize, width: usize, rng: &mut R) -> Self {
        let uniform = |rng: &mut R, (lo, hi): (f32, f32)| lo + (hi - lo) * rng.random::<f32>();
        match kind {
            AugmentKind::Translation => {
                let (mx, my) = (max_shift(width), max_shift(height));
                let shifts = (0..batch)
                    .map(|_| (rng.random_range(-mx..=mx), rng.random_range(-my..=my)))
                    .collect();
                AugmentationSample::Translation { shifts }
            }
            AugmentKind::Cutout => {
                let side = cutout_side(height.min(width));
                let half = (side / 2) as i32;
                let corners = (0..batch)
                    .map(|_| {
                        (
                            rng.random_range(-half..height as i32 - half),
                            rng.random_range(-half..width as i32 - half),
                        )
                    })
                    .collect();
                AugmentationSample::Cutout { corners, side }
            }
            AugmentKind::Brightness => AugmentationSample::Brightness {
                factors: (0..batch).map(|_| uniform(rng, BRIGHTNESS_RANGE)).collect(),
            },
            AugmentKind::Saturation => AugmentationSample::Saturation {
                factors: (0..batch).map(|_| uniform(rng, SATURATION_RANGE)).collect(),
            },
            AugmentKind::Contrast => AugmentationSample::Contrast {
                factors: (0..batch).map(|_| uniform(rng, CONTRAST_RANGE)).collect(),
            },
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            AugmentationSample::Translation { shifts } => translate(x, shifts),
            AugmentationSample::Cutout { corners, side } => cutout(x, corners, *side),
            AugmentationSample::Brightness { factors } => brightness(x, factors),
            AugmentationSample::Saturation { factors } => saturation(x, factors),
            AugmentationSample::Contrast { factors } => contrast(x, factors),
        }
    }

    /// Transpose of this transform's Jacobian applied to `g`. The Jacobian
    /// does not depend on the input, so the result is exact for any point.
    pub fn apply_adjoint(&self, g: &Tensor) -> Result<Tensor> {
        match self {
            AugmentationSample::Translation { shifts } => {
                let inverse: Vec<(i32, i32)> = shifts.iter().map(|&(dx, dy)| (-dx, -dy)).collect();
                translate(g, &inverse)
            }
            AugmentationSample::Brightness { .. } => Ok(g.clone()),
            // Cutout, contrast and saturation have symmetric Jacobians.
            other => other.apply(g),
        }
    }
}

/// Translation with zero padding; see [`Tensor::translate`] for the sign
/// convention. Shifts larger than the image are rejected.
pub fn translate(x: &Tensor, shifts: &[(i32, i32)]) -> Result<Tensor> {
    if let [_, _, h, w] = *x.shape() {
        for &(dx, dy) in shifts {
            check_range("horizontal shift", dx as f64, -(w as f64), w as f64)?;
            check_range("vertical shift", dy as f64, -(h as f64), h as f64)?;
        }
    }
    Ok(x.translate(shifts)?)
}

pub fn cutout(x: &Tensor, corners: &[(i32, i32)], side: usize) -> Result<Tensor> {
    Ok(x.cutout(corners, side)?)
}

pub fn brightness(x: &Tensor, factors: &[f32]) -> Result<Tensor> {
    check_factors("brightness", factors, BRIGHTNESS_RANGE)?;
    Ok(x.brightness(factors)?)
}

pub fn contrast(x: &Tensor, factors: &[f32]) -> Result<Tensor> {
    check_factors("contrast", factors, CONTRAST_RANGE)?;
    Ok(x.contrast(factors)?)
}

pub fn saturation(x: &Tensor, factors: &[f32]) -> Result<Tensor> {
    check_factors("saturation", factors, SATURATION_RANGE)?;
    Ok(x.saturation(factors)?)
}

fn check_range(what: &'static str, value: f64, lo: f64, hi: f64) -> Result<()> {
    if !(lo..=hi).contains(&value) {
        return Err(AugmentError::OutOfRange { what, value, lo, hi });
    }
    Ok(())
}

fn check_factors(what: &'static str, factors: &[f32], (lo, hi): (f32, f32)) -> Result<()> {
    factors
        .iter()
        .try_for_each(|&f| check_range(what, f as f64, lo as f64, hi as f64))
}

/// Ordered composition of augmentations. `color` expands to brightness,
/// saturation, contrast.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Policy {
    kinds: Vec<AugmentKind>,
    tokens: Vec<String>,
}

impl Policy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn kinds(&self) -> &[AugmentKind] {
        &self.kinds
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn contains(&self, kind: AugmentKind) -> bool {
        self.kinds.contains(&kind)
    }
}

impl FromStr for Policy {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self> {
        let mut policy = Policy::none();
        for token in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let lower = token.to_ascii_lowercase();
            match lower.as_str() {
                "color" => policy
                    .kinds
                    .extend([AugmentKind::Brightness, AugmentKind::Saturation, AugmentKind::Contrast]),
                "translation" => policy.kinds.push(AugmentKind::Translation),
                "cutout" => policy.kinds.push(AugmentKind::Cutout),
                _ => return Err(AugmentError::UnknownToken(token.to_string())),
            }
            policy.tokens.push(lower);
        }
        Ok(policy)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(","))
    }
}

/// Applies `policy` to `x` with fresh per-image draws from `rng`.
/// An empty policy returns `x` itself and consumes no randomness.
pub fn apply_policy<R: Rng + ?Sized>(
    x: &Tensor,
    policy: &Policy,
    rng: &mut R,
) -> Result<(Tensor, Vec<AugmentationSample>)> {
    let [batch, _, h, w] = *x.shape() else {
        return Err(TensorError::InvalidArgument {
            op: "apply_policy",
            msg: format!("expects (batch, channels, height, width), got {:?}", x.shape()),
        }
        .into());
    };
    let mut out = x.clone();
    let mut samples = Vec::with_capacity(policy.kinds.len());
    for &kind in &policy.kinds {
        let sample = AugmentationSample::draw(kind, batch, h, w, rng);
        out = sample.apply(&out)?;
        samples.push(sample);
    }
    Ok((out, samples))
}

/// Re-applies recorded samples in order.
pub fn replay(x: &Tensor, samples: &[AugmentationSample]) -> Result<Tensor> {
    samples.iter().try_fold(x.clone(), |acc, s| s.apply(&acc))
}

/// Adjoint of the whole recorded chain: `J_Tᵀ g`.
pub fn replay_adjoint(g: &Tensor, samples: &[AugmentationSample]) -> Result<Tensor> {
    samples.iter().rev().try_fold(g.clone(), |acc, s| s.apply_adjoint(&acc))
}
