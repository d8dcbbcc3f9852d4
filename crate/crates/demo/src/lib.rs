//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Three operations, each a thin wrapper over the library:
//! [`compare`] distorts a synthetic image and scores it with PSNR, SSIM and
//! total variation; [`schedule`] tabulates instance-noise sigma and generator
//! steps per epoch; [`transfer_loss_value`] evaluates the adversarial term for
//! a set of discriminator scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stegattack::attack::{total_variation, transfer_loss};
use stegattack::image::ImageBatch;
use stegattack::metrics::{psnr, ssim, MetricOptions};
use stegattack::synth::SyntheticImages;
use stegattack::training::{anneal_noise, TrainSchedule};
use wasm_bindgen::prelude::*;

/// Result of [`compare`]. PSNR is `Infinity` for identical images.
#[wasm_bindgen]
pub struct Comparison {
    psnr_db: f64,
    ssim: f64,
    tv_original: f64,
    tv_distorted: f64,
    size: usize,
    original: Vec<u8>,
    distorted: Vec<u8>,
}

#[wasm_bindgen]
impl Comparison {
    #[wasm_bindgen(getter)]
    pub fn psnr_db(&self) -> f64 {
        self.psnr_db
    }

    #[wasm_bindgen(getter)]
    pub fn ssim(&self) -> f64 {
        self.ssim
    }

    #[wasm_bindgen(getter)]
    pub fn tv_original(&self) -> f64 {
        self.tv_original
    }

    #[wasm_bindgen(getter)]
    pub fn tv_distorted(&self) -> f64 {
        self.tv_distorted
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    /// RGBA bytes, row-major, for a canvas `ImageData`.
    pub fn original_rgba(&self) -> Vec<u8> {
        self.original.clone()
    }

    pub fn distorted_rgba(&self) -> Vec<u8> {
        self.distorted.clone()
    }
}

fn rgba(img: &ImageBatch) -> Vec<u8> {
    let d = img.data();
    let size = img.size();
    let mut out = Vec::with_capacity(size * size * 4);
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                out.push((d[[0, c, y, x]] * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

/// Synthetic image `index`, shifted by `offset` and perturbed with uniform
/// noise of amplitude `noise`, then clamped to `[0, 1]`.
pub fn compare_images(index: u32, size: usize, offset: f32, noise: f32) -> Result<Comparison, String> {
    if size < 11 {
        return Err("size must be at least 11 for SSIM".into());
    }
    let original = SyntheticImages::new(7, size, 3).image(index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(index as u64);
    let amp = noise.abs();
    let data = original.data().mapv(|v| {
        let n = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
        v + offset + n
    });
    let err = |e: stegattack::Error| e.to_string();
    let distorted = ImageBatch::clamped(data).map_err(err)?;
    let o = MetricOptions::default();
    Ok(Comparison {
        psnr_db: psnr(&original, &distorted, &o).map_err(err)?,
        ssim: ssim(&original, &distorted, &o).map_err(err)?,
        tv_original: total_variation(original.view()).map_err(err)?,
        tv_distorted: total_variation(distorted.view()).map_err(err)?,
        size,
        original: rgba(&original),
        distorted: rgba(&distorted),
    })
}

/// Per-epoch `[sigma, generator steps per discriminator step]`, flattened.
pub fn schedule_table(
    sigma0: f64,
    decay: f64,
    g_start: usize,
    g_final: usize,
    g_decay_epochs: usize,
    epochs: usize,
) -> Result<Vec<f64>, String> {
    let s = TrainSchedule {
        noise_sigma0: sigma0,
        noise_decay: decay,
        g_steps_per_d_step: g_start,
        g_steps_final: g_final,
        g_steps_decay_epochs: g_decay_epochs,
        ..TrainSchedule::default()
    };
    s.validate().map_err(|e| e.to_string())?;
    Ok((0..epochs)
        .flat_map(|e| [anneal_noise(e, &s), s.g_steps_at(e) as f64])
        .collect())
}

#[wasm_bindgen]
pub fn compare(index: u32, size: usize, offset: f32, noise: f32) -> Result<Comparison, JsError> {
    compare_images(index, size, offset, noise).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn schedule(
    sigma0: f64,
    decay: f64,
    g_start: usize,
    g_final: usize,
    g_decay_epochs: usize,
    epochs: usize,
) -> Result<Vec<f64>, JsError> {
    schedule_table(sigma0, decay, g_start, g_final, g_decay_epochs, epochs).map_err(|e| JsError::new(&e))
}

/// `mean log D(real) + mean log(1 - D(fake))`; scores outside `[0, 1]` are rejected.
#[wasm_bindgen]
pub fn transfer_loss_value(real: Vec<f64>, fake: Vec<f64>) -> Result<f64, JsError> {
    transfer_loss(&real, &fake).map_err(|e| JsError::new(&e.to_string()))
}
