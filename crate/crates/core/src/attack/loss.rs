use ndarray::ArrayView4;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::nn::{Float, Maps};

/// Scores are clamped to `[SCORE_EPS, 1 - SCORE_EPS]` before any log.
pub const SCORE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.01,
            gamma: 1.0,
            lambda_tv: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda_tv", self.lambda_tv),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(crate::Error::Config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.alpha + self.beta + self.gamma <= 0.0 {
            return Err(crate::Error::Config(
                "at least one of alpha, beta, gamma must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn check_images<S: Float>(a: &ArrayView4<'_, S>, b: Option<&ArrayView4<'_, S>>) -> Result<()> {
    contract!(a.dim().0 > 0, "loss needs a non-empty batch");
    if let Some(b) = b {
        contract!(
            a.dim() == b.dim(),
            "shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        );
    }
    Ok(())
}

/// Batch mean of the squared L2 distance `||a - b||^2` per image.
pub(crate) fn sq_dist<T: Float>(a: &Maps<T>, b: &Maps<T>) -> (f64, Maps<T>) {
    let n = a.batch as f64;
    let scale = T::of(2.0 / n);
    let mut sum = 0.0;
    let grad = a.zip_map(b, |x, y| {
        sum += (x.as_f64() - y.as_f64()).powi(2);
        scale * (x - y)
    });
    (sum / n, grad)
}

/// Batch mean of the anisotropic squared total variation, summed over channels.
pub(crate) fn tv<T: Float>(x: &Maps<T>) -> (f64, Maps<T>) {
    let (h, w) = (x.height, x.width);
    let n = x.batch as f64;
    let scale = T::of(2.0 / n);
    let mut grad = Maps::zeros(x.channels, x.batch, h, w);
    let mut sum = 0.0;
    for c in 0..x.channels {
        for b in 0..x.batch {
            let p = x.plane(c, b);
            let g = grad.plane_mut(c, b);
            for i in 0..h {
                for j in 0..w {
                    let v = p[i * w + j];
                    if j + 1 < w {
                        let d = p[i * w + j + 1] - v;
                        sum += (p[i * w + j + 1].as_f64() - v.as_f64()).powi(2);
                        g[i * w + j + 1] = g[i * w + j + 1] + scale * d;
                        g[i * w + j] = g[i * w + j] - scale * d;
                    }
                    if i + 1 < h {
                        let d = p[(i + 1) * w + j] - v;
                        sum += (p[(i + 1) * w + j].as_f64() - v.as_f64()).powi(2);
                        g[(i + 1) * w + j] = g[(i + 1) * w + j] + scale * d;
                        g[i * w + j] = g[i * w + j] - scale * d;
                    }
                }
            }
        }
    }
    (sum / n, grad)
}

/// `mean log s` and its derivative `1 / (n s)` per score.
pub(crate) fn mean_log<T: Float>(scores: &[T]) -> (f64, Vec<T>) {
    let n = scores.len() as f64;
    let value = scores.iter().map(|s| s.as_f64().ln()).sum::<f64>() / n;
    let grad = scores.iter().map(|&s| T::one() / (T::of(n) * s)).collect();
    (value, grad)
}

/// `mean log(1 - s)` and its derivative `-1 / (n (1 - s))`.
pub(crate) fn mean_log1m<T: Float>(scores: &[T]) -> (f64, Vec<T>) {
    let n = scores.len() as f64;
    let value = scores.iter().map(|s| (-s.as_f64()).ln_1p()).sum::<f64>() / n;
    let grad = scores
        .iter()
        .map(|&s| -T::one() / (T::of(n) * (T::one() - s)))
        .collect();
    (value, grad)
}

/// Decoding loss: batch mean of `||decoded - secret||^2`.
pub fn decoding_loss<S: Float>(decoded: ArrayView4<'_, S>, secret: ArrayView4<'_, S>) -> Result<f64> {
    check_images(&decoded, Some(&secret))?;
    let n = decoded.dim().0 as f64;
    Ok(decoded
        .iter()
        .zip(secret.iter())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / n)
}

/// Transfer loss `mean log A(real) + mean log(1 - A(fake))` over clamped scores.
pub fn transfer_loss(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    contract!(
        !real_scores.is_empty() && !fake_scores.is_empty(),
        "transfer loss needs at least one real and one fake score"
    );
    contract!(
        real_scores
            .iter()
            .chain(fake_scores)
            .all(|s| (0.0..=1.0).contains(s)),
        "discriminator scores must lie in [0, 1]"
    );
    let clamp = |s: &f64| s.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
    let real: Vec<f64> = real_scores.iter().map(clamp).collect();
    let fake: Vec<f64> = fake_scores.iter().map(clamp).collect();
    Ok(mean_log(&real).0 + mean_log1m(&fake).0)
}

/// Batch mean of the squared forward differences along both spatial axes,
/// summed over channels.
pub fn total_variation<S: Float>(image: ArrayView4<'_, S>) -> Result<f64> {
    check_images(&image, None)?;
    let (_, _, h, w) = image.dim();
    contract!(h >= 2 && w >= 2, "total variation needs images of at least 2x2, got {h}x{w}");
    Ok(tv(&Maps::<f64>::from_nchw(image)).0)
}

/// Conditional loss: batch mean of `||transferred - secret||^2 + lambda * TV(transferred)`.
pub fn conditional_loss<S: Float>(
    transferred: ArrayView4<'_, S>,
    secret: ArrayView4<'_, S>,
    lambda_tv: f64,
) -> Result<f64> {
    contract!(
        lambda_tv.is_finite() && lambda_tv >= 0.0,
        "lambda_tv must be finite and non-negative, got {lambda_tv}"
    );
    Ok(decoding_loss(transferred.view(), secret)? + lambda_tv * total_variation(transferred)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array4};

    #[test]
    fn tv_two_by_two() {
        let x = array![[1.0, 2.0], [3.0, 5.0]].into_shape_with_order((1, 1, 2, 2)).unwrap();
        assert_eq!(total_variation(x.view()).unwrap(), 18.0);
        let one = Array4::<f64>::zeros((1, 1, 1, 1));
        assert!(total_variation(one.view()).is_err());
    }

    #[test]
    fn tv_constant_is_zero() {
        let x = Array4::<f32>::from_elem((2, 3, 5, 5), 0.4);
        assert_eq!(total_variation(x.view()).unwrap(), 0.0);
    }

    #[test]
    fn transfer_loss_limits() {
        let perfect = transfer_loss(&[1.0, 1.0], &[0.0]).unwrap();
        assert!(perfect < 0.0 && perfect > -1e-6);
        let bad = transfer_loss(&[0.0], &[1.0]).unwrap();
        assert!((bad - 2.0 * SCORE_EPS.ln()).abs() < 1e-6);
        assert!(transfer_loss(&[], &[0.5]).is_err());
        assert!(transfer_loss(&[f64::NAN], &[0.5]).is_err());
        assert!(transfer_loss(&[1.5], &[0.5]).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Array4::<f32>::zeros((1, 3, 4, 4));
        let b = Array4::<f32>::zeros((1, 3, 4, 5));
        assert!(decoding_loss(a.view(), b.view()).is_err());
        assert!(conditional_loss(a.view(), a.view(), -1.0).is_err());
    }

    #[test]
    fn decoding_loss_is_per_image_mean() {
        let a = Array4::<f64>::from_elem((2, 1, 2, 2), 0.5);
        let b = Array4::<f64>::zeros((2, 1, 2, 2));
        assert_eq!(decoding_loss(a.view(), b.view()).unwrap(), 1.0);
    }
}
