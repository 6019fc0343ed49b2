//! Weak and strong augmentation, and Mixup.
//!
//! Images are HWC rows with values in `[0, 1]`. Strong image augmentation is a
//! RandAugment-style chain: `n_ops` ops drawn uniformly from the configured set,
//! each applied at one shared integer magnitude in `0..=30`.

use std::str::FromStr;

use rand::{Rng, RngCore};
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SampleShape;
use crate::model::{ImageShape, Matrix};

pub const MAX_MAGNITUDE: u8 = 30;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("augmentation `{op}` needs {expected} samples, got {found:?}")]
    Layout {
        op: &'static str,
        expected: &'static str,
        found: SampleShape,
    },
    #[error("invalid augmentation config: {0}")]
    Config(String),
    #[error("mixup batches differ: {0}x{1} vs {2}x{3}")]
    Shape(usize, usize, usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeakAugment {
    Identity,
    /// Horizontal flip with probability 1/2, then a random crop after
    /// zero-padding `pad` pixels on every side.
    FlipCrop { pad: usize },
    /// Additive Gaussian noise for vector samples.
    Jitter { std: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    TranslateX,
    TranslateY,
    ShearX,
    ShearY,
    Rotate,
    Brightness,
    Contrast,
    Invert,
    Cutout,
}

impl AugOp {
    pub const ALL: [AugOp; 9] = [
        AugOp::TranslateX,
        AugOp::TranslateY,
        AugOp::ShearX,
        AugOp::ShearY,
        AugOp::Rotate,
        AugOp::Brightness,
        AugOp::Contrast,
        AugOp::Invert,
        AugOp::Cutout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugOp::TranslateX => "translate_x",
            AugOp::TranslateY => "translate_y",
            AugOp::ShearX => "shear_x",
            AugOp::ShearY => "shear_y",
            AugOp::Rotate => "rotate",
            AugOp::Brightness => "brightness",
            AugOp::Contrast => "contrast",
            AugOp::Invert => "invert",
            AugOp::Cutout => "cutout",
        }
    }
}

impl FromStr for AugOp {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AugOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| AugmentError::Config(format!("unknown augmentation op `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrongAugment {
    Identity,
    RandAugment {
        ops: Vec<AugOp>,
        n_ops: usize,
        magnitude: u8,
    },
    /// Vector samples: Gaussian noise with std `std * m/30` plus zero-masking of
    /// each coordinate with probability `mask_prob * m/30`.
    VectorNoise {
        std: f64,
        mask_prob: f64,
        magnitude: u8,
    },
}

impl StrongAugment {
    pub fn rand_augment_default() -> Self {
        StrongAugment::RandAugment {
            ops: AugOp::ALL.to_vec(),
            n_ops: 2,
            magnitude: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub weak: WeakAugment,
    pub strong: StrongAugment,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            weak: WeakAugment::Identity,
            strong: StrongAugment::Identity,
        }
    }

    /// Flip/crop plus RandAugment-lite for images, jitter plus strong Gaussian
    /// noise for vectors.
    pub fn default_for(shape: SampleShape) -> Self {
        match shape {
            SampleShape::Image(_) => AugmentPolicy {
                weak: WeakAugment::FlipCrop { pad: 2 },
                strong: StrongAugment::rand_augment_default(),
            },
            SampleShape::Vector(_) => AugmentPolicy {
                weak: WeakAugment::Jitter { std: 0.1 },
                strong: StrongAugment::VectorNoise {
                    std: 3.0,
                    mask_prob: 0.0,
                    magnitude: 10,
                },
            },
        }
    }

    pub fn validate(&self, shape: SampleShape) -> Result<(), AugmentError> {
        match (&self.weak, shape) {
            (WeakAugment::FlipCrop { .. }, SampleShape::Vector(_)) => {
                return Err(AugmentError::Layout {
                    op: "flip_crop",
                    expected: "image",
                    found: shape,
                })
            }
            (WeakAugment::Jitter { std }, _) if std.is_nan() || *std < 0.0 => {
                return Err(AugmentError::Config(format!("jitter std {std} < 0")))
            }
            _ => {}
        }
        match &self.strong {
            StrongAugment::Identity => Ok(()),
            StrongAugment::RandAugment {
                ops,
                n_ops,
                magnitude,
            } => {
                if !matches!(shape, SampleShape::Image(_)) {
                    return Err(AugmentError::Layout {
                        op: "rand_augment",
                        expected: "image",
                        found: shape,
                    });
                }
                if ops.is_empty() || *n_ops == 0 {
                    return Err(AugmentError::Config(
                        "rand_augment needs at least one op and n_ops >= 1".into(),
                    ));
                }
                check_magnitude(*magnitude)
            }
            StrongAugment::VectorNoise {
                std,
                mask_prob,
                magnitude,
            } => {
                if std.is_nan() || *std < 0.0 || !(0.0..=1.0).contains(mask_prob) {
                    return Err(AugmentError::Config(format!(
                        "vector noise needs std >= 0 and mask_prob in [0,1] (std={std}, mask_prob={mask_prob})"
                    )));
                }
                check_magnitude(*magnitude)
            }
        }
    }
}

fn check_magnitude(m: u8) -> Result<(), AugmentError> {
    if m > MAX_MAGNITUDE {
        Err(AugmentError::Config(format!(
            "magnitude {m} outside 0..={MAX_MAGNITUDE}"
        )))
    } else {
        Ok(())
    }
}

fn image_of(shape: SampleShape, op: &'static str) -> Result<ImageShape, AugmentError> {
    match shape {
        SampleShape::Image(img) => Ok(img),
        other => Err(AugmentError::Layout {
            op,
            expected: "image",
            found: other,
        }),
    }
}

/// Weak augmentation `alpha(x)` of one sample.
pub fn weak_augment<R: RngCore + ?Sized>(
    x: &[f64],
    shape: SampleShape,
    policy: &WeakAugment,
    rng: &mut R,
) -> Result<Vec<f64>, AugmentError> {
    match policy {
        WeakAugment::Identity => Ok(x.to_vec()),
        WeakAugment::FlipCrop { pad } => {
            let img = image_of(shape, "flip_crop")?;
            let flip = rng.random_bool(0.5);
            let (oy, ox) = (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad));
            let pad = *pad as isize;
            let mut out = vec![0.0; x.len()];
            for y in 0..img.height {
                for xx in 0..img.width {
                    let sy = y as isize + oy as isize - pad;
                    let cx = xx as isize + ox as isize - pad;
                    if sy < 0 || cx < 0 || sy >= img.height as isize || cx >= img.width as isize {
                        continue;
                    }
                    let sx = if flip {
                        img.width as isize - 1 - cx
                    } else {
                        cx
                    };
                    let src = (sy as usize * img.width + sx as usize) * img.channels;
                    let dst = (y * img.width + xx) * img.channels;
                    out[dst..dst + img.channels].copy_from_slice(&x[src..src + img.channels]);
                }
            }
            Ok(out)
        }
        WeakAugment::Jitter { std } => {
            if let SampleShape::Image(_) = shape {
                return Err(AugmentError::Layout {
                    op: "jitter",
                    expected: "vector",
                    found: shape,
                });
            }
            let normal = Normal::new(0.0, *std)
                .map_err(|e| AugmentError::Config(format!("jitter std: {e}")))?;
            Ok(x.iter().map(|v| v + normal.sample(rng)).collect())
        }
    }
}

/// Strong augmentation `A(x)` of one sample.
pub fn strong_augment<R: RngCore + ?Sized>(
    x: &[f64],
    shape: SampleShape,
    policy: &StrongAugment,
    rng: &mut R,
) -> Result<Vec<f64>, AugmentError> {
    match policy {
        StrongAugment::Identity => Ok(x.to_vec()),
        StrongAugment::RandAugment {
            ops,
            n_ops,
            magnitude,
        } => {
            let img = image_of(shape, "rand_augment")?;
            check_magnitude(*magnitude)?;
            if ops.is_empty() {
                return Err(AugmentError::Config("rand_augment op list is empty".into()));
            }
            let mut cur = x.to_vec();
            for _ in 0..*n_ops {
                let op = ops[rng.random_range(0..ops.len())];
                cur = apply_op(&cur, img, op, *magnitude, rng);
            }
            cur.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            Ok(cur)
        }
        StrongAugment::VectorNoise {
            std,
            mask_prob,
            magnitude,
        } => {
            check_magnitude(*magnitude)?;
            let f = *magnitude as f64 / MAX_MAGNITUDE as f64;
            if f == 0.0 {
                return Ok(x.to_vec());
            }
            let normal = Normal::new(0.0, std * f)
                .map_err(|e| AugmentError::Config(format!("noise std: {e}")))?;
            Ok(x.iter()
                .map(|v| {
                    let noisy = v + normal.sample(rng);
                    if rng.random_bool(mask_prob * f) {
                        0.0
                    } else {
                        noisy
                    }
                })
                .collect())
        }
    }
}

/// One image op at integer magnitude `m` (strength `m / 30`). Magnitude zero
/// is the identity for every op.
pub fn apply_op<R: RngCore + ?Sized>(
    x: &[f64],
    img: ImageShape,
    op: AugOp,
    magnitude: u8,
    rng: &mut R,
) -> Vec<f64> {
    let f = magnitude.min(MAX_MAGNITUDE) as f64 / MAX_MAGNITUDE as f64;
    if magnitude == 0 {
        return x.to_vec();
    }
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let (h, w) = (img.height as f64, img.width as f64);
    let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
    match op {
        AugOp::TranslateX => {
            let dx = (sign * f * 0.3 * w).round();
            resample(x, img, |y, xx| (y, xx - dx))
        }
        AugOp::TranslateY => {
            let dy = (sign * f * 0.3 * h).round();
            resample(x, img, |y, xx| (y - dy, xx))
        }
        AugOp::ShearX => {
            let s = sign * f * 0.3;
            resample(x, img, |y, xx| (y, xx + s * (y - cy)))
        }
        AugOp::ShearY => {
            let s = sign * f * 0.3;
            resample(x, img, |y, xx| (y + s * (xx - cx), xx))
        }
        AugOp::Rotate => {
            let theta = sign * f * 30f64.to_radians();
            let (sin, cos) = theta.sin_cos();
            resample(x, img, |y, xx| {
                let (dy, dx) = (y - cy, xx - cx);
                (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
            })
        }
        AugOp::Brightness => {
            let factor = 1.0 + sign * f * 0.9;
            x.iter().map(|v| (v * factor).clamp(0.0, 1.0)).collect()
        }
        AugOp::Contrast => {
            let factor = 1.0 + sign * f * 0.9;
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            x.iter()
                .map(|v| (mean + (v - mean) * factor).clamp(0.0, 1.0))
                .collect()
        }
        AugOp::Invert => {
            if magnitude >= MAX_MAGNITUDE {
                x.iter().map(|v| 1.0 - v).collect()
            } else {
                x.iter().map(|v| v + f * (1.0 - 2.0 * v)).collect()
            }
        }
        AugOp::Cutout => {
            let side = (f * 0.5 * img.height.min(img.width) as f64).round() as usize;
            let mut out = x.to_vec();
            if side == 0 {
                return out;
            }
            let y0 = rng.random_range(0..img.height) as isize - side as isize / 2;
            let x0 = rng.random_range(0..img.width) as isize - side as isize / 2;
            for y in y0.max(0)..(y0 + side as isize).min(img.height as isize) {
                for xx in x0.max(0)..(x0 + side as isize).min(img.width as isize) {
                    let base = (y as usize * img.width + xx as usize) * img.channels;
                    out[base..base + img.channels].iter_mut().for_each(|v| *v = 0.5);
                }
            }
            out
        }
    }
}

/// Nearest-neighbour inverse mapping; out-of-frame sources read as zero.
fn resample(x: &[f64], img: ImageShape, source: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for y in 0..img.height {
        for xx in 0..img.width {
            let (sy, sx) = source(y as f64, xx as f64);
            let (sy, sx) = (sy.round(), sx.round());
            if sy < 0.0 || sx < 0.0 || sy >= img.height as f64 || sx >= img.width as f64 {
                continue;
            }
            let src = (sy as usize * img.width + sx as usize) * img.channels;
            let dst = (y * img.width + xx) * img.channels;
            out[dst..dst + img.channels].copy_from_slice(&x[src..src + img.channels]);
        }
    }
    out
}

/// Applies `weak_augment` to every row.
pub fn weak_batch<R: RngCore + ?Sized>(
    x: &Matrix,
    shape: SampleShape,
    policy: &WeakAugment,
    rng: &mut R,
) -> Result<Matrix, AugmentError> {
    if matches!(policy, WeakAugment::Identity) {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(x.as_slice().len());
    for row in x.iter_rows() {
        out.extend(weak_augment(row, shape, policy, rng)?);
    }
    Ok(Matrix::from_vec(x.rows(), x.cols(), out).expect("augmentation preserves shape"))
}

/// Applies `strong_augment` to every row.
pub fn strong_batch<R: RngCore + ?Sized>(
    x: &Matrix,
    shape: SampleShape,
    policy: &StrongAugment,
    rng: &mut R,
) -> Result<Matrix, AugmentError> {
    if matches!(policy, StrongAugment::Identity) {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(x.as_slice().len());
    for row in x.iter_rows() {
        out.extend(strong_augment(row, shape, policy, rng)?);
    }
    Ok(Matrix::from_vec(x.rows(), x.cols(), out).expect("augmentation preserves shape"))
}

/// One Mixup weight draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixupDraw {
    pub lambda_mix: f64,
    pub a: f64,
}

/// Draws `lambda ~ Beta(a, a)`; with `max_trick` the draw is replaced by
/// `max(lambda, 1 - lambda)`.
pub fn draw_lambda<R: RngCore + ?Sized>(
    a: f64,
    max_trick: bool,
    rng: &mut R,
) -> Result<MixupDraw, AugmentError> {
    let beta =
        Beta::new(a, a).map_err(|e| AugmentError::Config(format!("mixup a={a}: {e}")))?;
    let mut lambda_mix: f64 = beta.sample(rng);
    if max_trick {
        lambda_mix = lambda_mix.max(1.0 - lambda_mix);
    }
    Ok(MixupDraw { lambda_mix, a })
}

/// `lambda * x_fix + (1 - lambda) * x_mix`, elementwise.
pub fn mix_with(x_fix: &Matrix, x_mix: &Matrix, lambda: f64) -> Result<Matrix, AugmentError> {
    if x_fix.rows() != x_mix.rows() || x_fix.cols() != x_mix.cols() {
        return Err(AugmentError::Shape(
            x_fix.rows(),
            x_fix.cols(),
            x_mix.rows(),
            x_mix.cols(),
        ));
    }
    let data = x_fix
        .as_slice()
        .iter()
        .zip(x_mix.as_slice())
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Ok(Matrix::from_vec(x_fix.rows(), x_fix.cols(), data).expect("same shape"))
}

/// One Mixup of a batch pair with a single `Beta(a, a)` weight.
pub fn mixup<R: RngCore + ?Sized>(
    x_fix: &Matrix,
    x_mix: &Matrix,
    a: f64,
    max_trick: bool,
    rng: &mut R,
) -> Result<(Matrix, MixupDraw), AugmentError> {
    let draw = draw_lambda(a, max_trick, rng)?;
    Ok((mix_with(x_fix, x_mix, draw.lambda_mix)?, draw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const IMG: ImageShape = ImageShape {
        height: 8,
        width: 8,
        channels: 1,
    };

    fn random_image(rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..IMG.len()).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn identity_weak_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_image(&mut rng);
        let y = weak_augment(&x, SampleShape::Image(IMG), &WeakAugment::Identity, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn symmetric_image_survives_flip() {
        let mut x = vec![0.0; IMG.len()];
        for y in 0..8 {
            for xx in 0..4 {
                let v = (y * 4 + xx) as f64 / 40.0;
                x[y * 8 + xx] = v;
                x[y * 8 + 7 - xx] = v;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let y = weak_augment(&x, SampleShape::Image(IMG), &WeakAugment::FlipCrop { pad: 0 }, &mut rng)
                .unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn zero_pad_crop_only_flips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_image(&mut rng);
        let mut flipped = x.clone();
        for y in 0..8 {
            flipped[y * 8..y * 8 + 8].reverse();
        }
        for _ in 0..20 {
            let y = weak_augment(&x, SampleShape::Image(IMG), &WeakAugment::FlipCrop { pad: 0 }, &mut rng)
                .unwrap();
            assert!(y == x || y == flipped);
        }
    }

    #[test]
    fn layout_mismatch_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = vec![0.5; 4];
        assert!(weak_augment(&v, SampleShape::Vector(4), &WeakAugment::FlipCrop { pad: 1 }, &mut rng).is_err());
        assert!(weak_augment(&v, SampleShape::Image(ImageShape { height: 2, width: 2, channels: 1 }), &WeakAugment::Jitter { std: 0.1 }, &mut rng).is_err());
    }

    #[test]
    fn zero_magnitude_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_image(&mut rng);
        let policy = StrongAugment::RandAugment {
            ops: AugOp::ALL.to_vec(),
            n_ops: 3,
            magnitude: 0,
        };
        for _ in 0..20 {
            assert_eq!(strong_augment(&x, SampleShape::Image(IMG), &policy, &mut rng).unwrap(), x);
        }
    }

    #[test]
    fn full_invert_twice_restores() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_image(&mut rng);
        let once = apply_op(&x, IMG, AugOp::Invert, 30, &mut rng);
        let twice = apply_op(&once, IMG, AugOp::Invert, 30, &mut rng);
        for (a, b) in x.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn unknown_op_name() {
        assert!("shear_x".parse::<AugOp>().is_ok());
        assert!(matches!("solarize".parse::<AugOp>(), Err(AugmentError::Config(_))));
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let policy = StrongAugment::RandAugment {
            ops: AugOp::ALL.to_vec(),
            n_ops: 4,
            magnitude: 30,
        };
        for _ in 0..50 {
            let x = random_image(&mut rng);
            let y = strong_augment(&x, SampleShape::Image(IMG), &policy, &mut rng).unwrap();
            assert_eq!(y.len(), x.len());
            assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn mixup_fixed_lambdas() {
        let zeros = Matrix::zeros(2, 3);
        let ones = Matrix::from_vec(2, 3, vec![1.0; 6]).unwrap();
        assert_eq!(mix_with(&zeros, &ones, 1.0).unwrap(), zeros);
        let half = mix_with(&zeros, &ones, 0.5).unwrap();
        assert!(half.as_slice().iter().all(|&v| v == 0.5));
        assert!(mix_with(&zeros, &Matrix::zeros(3, 3), 0.5).is_err());
    }

    #[test]
    fn max_trick_keeps_upper_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert!(draw_lambda(0.75, true, &mut rng).unwrap().lambda_mix >= 0.5);
        }
    }
}
