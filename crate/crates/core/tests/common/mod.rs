//! Brute-force reference implementations shared by the integration and
//! acceptance tests. Written independently of the library code: direct
//! nested loops, 2-D windows, centered moments, no shared helpers.

#![allow(dead_code, clippy::needless_range_loop)]

use ndarray::{Array4, ArrayView4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stegattack::attack::{
    objective_gradients, total_loss, AdversarialForm, AttackArch, AttackParams, GradFor,
    LossWeights, ObjectiveInputs,
};
use stegattack::image::ImageBatch;
use stegattack::nn::{Maps, Params};

/// Nested-loop total variation: batch mean of summed squared forward differences.
pub fn tv_oracle(x: ArrayView4<'_, f64>) -> f64 {
    let (n, c, h, w) = x.dim();
    let mut total = 0.0;
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    if j + 1 < w {
                        total += (x[[b, ch, i, j + 1]] - x[[b, ch, i, j]]).powi(2);
                    }
                    if i + 1 < h {
                        total += (x[[b, ch, i + 1, j]] - x[[b, ch, i, j]]).powi(2);
                    }
                }
            }
        }
    }
    total / n as f64
}

/// Per-image squared L2 distance, averaged over the batch.
pub fn sq_dist_oracle(a: ArrayView4<'_, f64>, b: ArrayView4<'_, f64>) -> f64 {
    let n = a.dim().0;
    let mut per_image = vec![0.0; n];
    for ((idx, &x), &y) in a.indexed_iter().zip(b.iter()) {
        per_image[idx.0] += (x - y) * (x - y);
    }
    per_image.iter().sum::<f64>() / n as f64
}

/// Scalar-by-scalar `mean log r + mean log(1 - f)` with clamping.
pub fn transfer_oracle(real: &[f64], fake: &[f64]) -> f64 {
    let eps = 1e-7;
    let mut a = 0.0;
    for &r in real {
        a += r.clamp(eps, 1.0 - eps).ln();
    }
    let mut b = 0.0;
    for &f in fake {
        b += (1.0 - f.clamp(eps, 1.0 - eps)).ln();
    }
    a / real.len() as f64 + b / fake.len() as f64
}

/// PSNR over the first three channels of a single image, peak 1.
pub fn psnr_oracle(a: &ImageBatch, b: &ImageBatch) -> f64 {
    let (_, _, h, w) = a.data().dim();
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let d = a.data()[[0, c, y, x]] as f64 - b.data()[[0, c, y, x]] as f64;
                sum += d * d;
                count += 1;
            }
        }
    }
    let mse = sum / count as f64;
    10.0 * (1.0 / mse).log10()
}

/// SSIM with an explicit 11x11 Gaussian window (sigma 1.5) evaluated at every
/// valid position, centered second moments, averaged over RGB.
pub fn ssim_oracle(a: &ImageBatch, b: &ImageBatch) -> f64 {
    let (_, _, h, w) = a.data().dim();
    let mut win = [[0.0f64; 11]; 11];
    let mut norm = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
            norm += *v;
        }
    }
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let mut total = 0.0;
    for c in 0..3 {
        let px = |y: usize, x: usize| a.data()[[0, c, y, x]] as f64;
        let py = |y: usize, x: usize| b.data()[[0, c, y, x]] as f64;
        let mut acc = 0.0;
        let mut windows = 0usize;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = win[i][j] / norm;
                        mx += wt * px(y0 + i, x0 + j);
                        my += wt * py(y0 + i, x0 + j);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = win[i][j] / norm;
                        let dx = px(y0 + i, x0 + j) - mx;
                        let dy = py(y0 + i, x0 + j) - my;
                        vx += wt * dx * dx;
                        vy += wt * dy * dy;
                        cxy += wt * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                windows += 1;
            }
        }
        total += acc / windows as f64;
    }
    total / 3.0
}

pub fn random_image<R: Rng>(rng: &mut R, channels: usize, size: usize) -> ImageBatch {
    let data = Array4::from_shape_fn((1, channels, size, size), |_| rng.random_range(0.0f32..1.0));
    ImageBatch::new(data).unwrap()
}

/// 8x8, two-channel attack with 471 parameters.
pub fn gradcheck_arch() -> AttackArch {
    AttackArch {
        channels: 2,
        image_size: 8,
        noise_dim: 4,
        decoder_hidden: 2,
        generator_hidden: 1,
        discriminator_hidden: 1,
    }
}

/// Initial parameters for gradient checks. Zero biases put width-1 ReLU
/// chains exactly on the kink, where central differences see a one-sided
/// slope, so every parameter gets a small seeded jitter.
pub fn gradcheck_params(seed: u64) -> AttackParams<f64> {
    let mut p = AttackParams::<f64>::init(gradcheck_arch(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    p
}

pub struct GradInputs {
    pub cover: Maps<f64>,
    pub container: Maps<f64>,
    pub secret: Maps<f64>,
    pub real: Maps<f64>,
    pub z: Vec<f64>,
}

impl GradInputs {
    pub fn random<R: Rng>(rng: &mut R, arch: AttackArch, batch: usize) -> Self {
        let (c, s) = (arch.channels, arch.image_size);
        let mut img = || {
            Maps::from_nchw(
                Array4::from_shape_fn((batch, c, s, s), |_| rng.random_range(0.0f64..1.0)).view(),
            )
        };
        let cover = img();
        let container = img();
        let secret = img();
        let real = img();
        let z = (0..batch * arch.noise_dim)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        Self {
            cover,
            container,
            secret,
            real,
            z,
        }
    }

    pub fn view(&self) -> ObjectiveInputs<'_, f64> {
        ObjectiveInputs {
            cover: &self.cover,
            container: &self.container,
            secret: &self.secret,
            real: &self.real,
            z: &self.z,
        }
    }
}

fn set_param(p: &mut AttackParams<f64>, k: usize, v: f64) {
    let mut k = k;
    for t in p.tensors_mut() {
        if k < t.len() {
            t[k] = v;
            return;
        }
        k -= t.len();
    }
    panic!("parameter index out of range");
}

pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: usize,
}

/// Compares analytic gradients against central differences at `coords`.
/// Under `MinMax` every coordinate is checked against the full objective.
/// Otherwise decoder/generator coordinates are checked against the objective
/// they descend and discriminator coordinates against `beta * L_t`.
pub fn grad_check(
    params: &AttackParams<f64>,
    inputs: &GradInputs,
    weights: &LossWeights,
    form: AdversarialForm,
    coords: &[usize],
    h: f64,
) -> GradCheck {
    let (_, analytic) =
        objective_gradients(params, &inputs.view(), weights, form, GradFor::All).unwrap();
    let analytic = analytic.flat();
    let (nd, ng, _) = params.group_sizes();
    let base = params.flat();
    let mut out = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: 0,
    };
    for &k in coords {
        let eval = |v: f64| {
            let mut p = params.clone();
            set_param(&mut p, k, v);
            let t = total_loss(&p, &inputs.view(), weights, form).unwrap();
            if form == AdversarialForm::MinMax {
                // the full objective; the discriminator term is the only one that
                // depends on discriminator parameters
                t.total
            } else if k < nd + ng {
                t.generator_objective
            } else {
                t.adversary
            }
        };
        let numeric = (eval(base[k] + h) - eval(base[k] - h)) / (2.0 * h);
        let a = analytic[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > out.max_rel_err {
            out.max_rel_err = rel;
            out.worst = k;
        }
        out.checked += 1;
    }
    out
}
