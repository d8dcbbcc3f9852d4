//! PSNR, SSIM and Table-style evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::attack::AttackParams;
use crate::error::{contract, Error, Result};
use crate::image::ImageBatch;
use crate::training::{run_attack, StegoTuple};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricOptions {
    pub peak: f64,
    /// The fourth channel is a synthesized alpha plane; skip it unless asked.
    pub include_alpha: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            peak: 1.0,
            include_alpha: false,
        }
    }
}

fn metric_channels(img: &ImageBatch, opts: &MetricOptions) -> usize {
    if img.channels() == 4 && !opts.include_alpha {
        3
    } else {
        img.channels()
    }
}

fn check_pair(a: &ImageBatch, b: &ImageBatch) -> Result<()> {
    contract!(
        a.len() == 1 && b.len() == 1,
        "metrics compare single images, got batches of {} and {}",
        a.len(),
        b.len()
    );
    contract!(
        a.image_shape() == b.image_shape(),
        "metric inputs differ in shape: {:?} vs {:?}",
        a.image_shape(),
        b.image_shape()
    );
    Ok(())
}

/// Mean squared error over the metric channels.
pub fn mse(a: &ImageBatch, b: &ImageBatch, opts: &MetricOptions) -> Result<f64> {
    check_pair(a, b)?;
    let c = metric_channels(a, opts);
    let av = a.data().slice(s![0, 0..c, .., ..]);
    let bv = b.data().slice(s![0, 0..c, .., ..]);
    let sum: f64 = av
        .iter()
        .zip(bv.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / av.len() as f64)
}

/// `10 log10(peak^2 / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageBatch, b: &ImageBatch, opts: &MetricOptions) -> Result<f64> {
    contract!(opts.peak > 0.0, "PSNR peak must be positive");
    let m = mse(a, b, opts)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (opts.peak * opts.peak / m).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Separable valid-mode Gaussian filter.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>, peak: f64) -> f64 {
    let (h, w) = a.dim();
    let k = gaussian_window();
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let (mx, my) = (filter_valid(&x, h, w, &k), filter_valid(&y, h, w, &k));
    let (fxx, fyy) = (filter_valid(&xx, h, w, &k), filter_valid(&yy, h, w, &k));
    let fxy = filter_valid(&xy, h, w, &k);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    // Every expression is written symmetrically in (x, y) so that
    // ssim(a, b) and ssim(b, a) agree to the last bit.
    let total: f64 = (0..mx.len())
        .map(|i| {
            let mxy = mx[i] * my[i];
            let sx = fxx[i] - mx[i] * mx[i];
            let sy = fyy[i] - my[i] * my[i];
            let sxy = fxy[i] - mxy;
            let num = (2.0 * mxy + c1) * (2.0 * sxy + c2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (sx + sy + c2);
            num / den
        })
        .sum();
    total / mx.len() as f64
}

/// Gaussian-windowed SSIM (11x11, sigma 1.5, K1 0.01, K2 0.03, valid windows),
/// averaged over windows and then over the metric channels.
pub fn ssim(a: &ImageBatch, b: &ImageBatch, opts: &MetricOptions) -> Result<f64> {
    check_pair(a, b)?;
    contract!(
        a.size() >= SSIM_WINDOW,
        "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}",
        a.size()
    );
    let c = metric_channels(a, opts);
    let total: f64 = (0..c)
        .map(|ch| {
            ssim_plane(
                a.data().slice(s![0, ch, .., ..]),
                b.data().slice(s![0, ch, .., ..]),
                opts.peak,
            )
        })
        .sum();
    Ok(total / c as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    /// `f64::INFINITY` when the transferred image equals the secret.
    pub psnr_db: f64,
    pub ssim_transferred: f64,
    pub ssim_decoded: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub dataset_name: String,
    pub n_images: usize,
    /// Mean over finite rows; `f64::INFINITY` if every row is infinite.
    pub mean_psnr_db: f64,
    pub n_infinite_psnr: usize,
    pub mean_ssim_transferred: f64,
    pub mean_ssim_decoded: f64,
    pub rows: Vec<ReportRow>,
}

#[derive(Serialize, Deserialize)]
struct Summary {
    dataset_name: String,
    n_images: usize,
    /// number, or the string "inf"
    mean_psnr_db: serde_json::Value,
    n_infinite_psnr: usize,
    mean_ssim_transferred: f64,
    mean_ssim_decoded: f64,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}

impl MetricsReport {
    pub fn from_rows(dataset_name: impl Into<String>, rows: Vec<ReportRow>) -> Result<Self> {
        contract!(!rows.is_empty(), "a report needs at least one row");
        let n = rows.len() as f64;
        let finite: Vec<f64> = rows
            .iter()
            .map(|r| r.psnr_db)
            .filter(|v| v.is_finite())
            .collect();
        let n_infinite = rows.len() - finite.len();
        if n_infinite > 0 {
            log::info!("{n_infinite} image(s) reproduced exactly (infinite PSNR); excluded from mean PSNR");
        }
        let mean_psnr_db = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        Ok(Self {
            dataset_name: dataset_name.into(),
            n_images: rows.len(),
            mean_psnr_db,
            n_infinite_psnr: n_infinite,
            mean_ssim_transferred: rows.iter().map(|r| r.ssim_transferred).sum::<f64>() / n,
            mean_ssim_decoded: rows.iter().map(|r| r.ssim_decoded).sum::<f64>() / n,
            rows,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr_db,ssim_transferred,ssim_decoded\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.id,
                fmt_db(r.psnr_db),
                r.ssim_transferred,
                r.ssim_decoded
            );
        }
        out
    }

    pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
        let bad = |line: usize, m: &str| Error::Format(format!("report CSV line {line}: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some("id,psnr_db,ssim_transferred,ssim_decoded") {
            return Err(bad(1, "unexpected header"));
        }
        lines
            .enumerate()
            .map(|(i, line)| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 4 {
                    return Err(bad(i + 2, "expected 4 fields"));
                }
                let num = |s: &str| -> Result<f64> {
                    if s == "inf" {
                        Ok(f64::INFINITY)
                    } else {
                        s.parse().map_err(|_| bad(i + 2, "bad number"))
                    }
                };
                Ok(ReportRow {
                    id: f[0].to_string(),
                    psnr_db: num(f[1])?,
                    ssim_transferred: num(f[2])?,
                    ssim_decoded: num(f[3])?,
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        let psnr = if self.mean_psnr_db.is_finite() {
            serde_json::json!(self.mean_psnr_db)
        } else {
            serde_json::json!("inf")
        };
        serde_json::to_string_pretty(&Summary {
            dataset_name: self.dataset_name.clone(),
            n_images: self.n_images,
            mean_psnr_db: psnr,
            n_infinite_psnr: self.n_infinite_psnr,
            mean_ssim_transferred: self.mean_ssim_transferred,
            mean_ssim_decoded: self.mean_ssim_decoded,
        })
        .expect("summary serializes")
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))
    }
}

/// Runs the attack on every tuple and scores transferred and decoded images
/// against the secret.
pub fn evaluate(
    params: &AttackParams,
    tuples: &[StegoTuple],
    z_seed: u64,
    dataset_name: &str,
    opts: &MetricOptions,
) -> Result<MetricsReport> {
    Ok(evaluate_with_outputs(params, tuples, z_seed, dataset_name, opts)?.0)
}

/// Like [`evaluate`], also returning each tuple's `(decoded, transferred)` pair.
pub fn evaluate_with_outputs(
    params: &AttackParams,
    tuples: &[StegoTuple],
    z_seed: u64,
    dataset_name: &str,
    opts: &MetricOptions,
) -> Result<(MetricsReport, Vec<(ImageBatch, ImageBatch)>)> {
    contract!(!tuples.is_empty(), "evaluation needs at least one tuple");
    let mut rows = Vec::with_capacity(tuples.len());
    let mut outputs = Vec::with_capacity(tuples.len());
    for (i, t) in tuples.iter().enumerate() {
        let (decoded, transferred) =
            run_attack(&t.cover, &t.container, params, crate::seed::derive(z_seed, "eval", i as u64))?;
        rows.push(ReportRow {
            id: t.id.clone().unwrap_or_else(|| i.to_string()),
            psnr_db: psnr(&transferred, &t.secret, opts)?,
            ssim_transferred: ssim(&transferred, &t.secret, opts)?,
            ssim_decoded: ssim(&decoded, &t.secret, opts)?,
        });
        outputs.push((decoded, transferred));
    }
    Ok((MetricsReport::from_rows(dataset_name, rows)?, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SyntheticImages;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, n: usize) -> ImageBatch {
        let mut d = Array4::<f32>::zeros((1, c, n, n));
        d.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        ImageBatch::new(d).unwrap()
    }

    #[test]
    fn psnr_of_uniform_offset_is_20_db() {
        let a = ImageBatch::constant(1, 3, 16, 0.2).unwrap();
        let b = ImageBatch::constant(1, 3, 16, 0.3).unwrap();
        let p = psnr(&a, &b, &MetricOptions::default()).unwrap();
        // 0.3f32 - 0.2f32 is not exactly 0.1
        assert!((p - 20.0).abs() < 1e-3, "{p}");
    }

    #[test]
    fn identical_images_have_infinite_psnr_and_unit_ssim() {
        let a = SyntheticImages::new(1, 32, 4).image(0);
        let o = MetricOptions::default();
        assert_eq!(psnr(&a, &a, &o).unwrap(), f64::INFINITY);
        assert_eq!(ssim(&a, &a, &o).unwrap(), 1.0);
    }

    #[test]
    fn psnr_decreases_with_mse() {
        let a = ImageBatch::constant(1, 3, 12, 0.5).unwrap();
        let o = MetricOptions::default();
        let mut last = f64::INFINITY;
        for k in 1..10 {
            let b = ImageBatch::constant(1, 3, 12, 0.5 + 0.05 * k as f32).unwrap();
            let p = psnr(&a, &b, &o).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let o = MetricOptions::default();
        for _ in 0..20 {
            let a = random_image(&mut rng, 4, 16);
            let b = random_image(&mut rng, 4, 16);
            let ab = ssim(&a, &b, &o).unwrap();
            assert_eq!(ab.to_bits(), ssim(&b, &a, &o).unwrap().to_bits());
            assert!((-1.0..1.0).contains(&ab));
        }
    }

    #[test]
    fn alpha_is_ignored_by_default() {
        let a = ImageBatch::constant(1, 4, 12, 0.5).unwrap();
        let mut d = a.data().clone();
        d.slice_mut(s![0, 3, .., ..]).fill(0.0);
        let b = ImageBatch::new(d).unwrap();
        let o = MetricOptions::default();
        assert_eq!(psnr(&a, &b, &o).unwrap(), f64::INFINITY);
        let with_alpha = MetricOptions {
            include_alpha: true,
            ..o
        };
        assert!(psnr(&a, &b, &with_alpha).unwrap().is_finite());
    }

    #[test]
    fn small_or_mismatched_inputs_are_rejected() {
        let o = MetricOptions::default();
        let small = ImageBatch::constant(1, 3, 8, 0.5).unwrap();
        assert!(matches!(ssim(&small, &small, &o), Err(Error::Contract(_))));
        let big = ImageBatch::constant(1, 3, 12, 0.5).unwrap();
        assert!(matches!(psnr(&small, &big, &o), Err(Error::Contract(_))));
    }

    #[test]
    fn report_means_recompute_from_rows() {
        let rows = vec![
            ReportRow { id: "a".into(), psnr_db: 20.0, ssim_transferred: 0.5, ssim_decoded: 0.25 },
            ReportRow { id: "b".into(), psnr_db: f64::INFINITY, ssim_transferred: 1.0, ssim_decoded: 0.75 },
            ReportRow { id: "c".into(), psnr_db: 30.0, ssim_transferred: 0.75, ssim_decoded: 0.5 },
        ];
        let r = MetricsReport::from_rows("t", rows.clone()).unwrap();
        assert_eq!(r.mean_psnr_db, 25.0);
        assert_eq!(r.n_infinite_psnr, 1);
        assert_eq!(r.mean_ssim_transferred, 0.75);
        assert_eq!(r.mean_ssim_decoded, 0.5);
        let back = MetricsReport::rows_from_csv(&r.to_csv()).unwrap();
        assert_eq!(back, rows);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["mean_psnr_db"], 25.0);

        let only_inf = MetricsReport::from_rows("t", vec![rows[1].clone()]).unwrap();
        assert_eq!(only_inf.mean_psnr_db, f64::INFINITY);
        assert!(only_inf.to_json().contains("\"inf\""));
    }
}
