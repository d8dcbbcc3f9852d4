//! The attacked steganography system: a Prep network that turns the secret
//! into feature maps, a Hiding network that writes those features into the
//! cover, and a Reveal network that recovers the secret from the container
//! alone. All three are trained jointly.

use std::path::Path;
use std::time::Instant;

use ndarray::Array4;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{contract, Error, Result};
use crate::image::ImageBatch;
use crate::nn::{sigmoid, Activation, Adam, ConvGeom, ConvStack, Float, Maps, Params};
use crate::seed;

pub const CHECKPOINT_FORMAT: &str = "oracle";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleArch {
    pub channels: usize,
    pub image_size: usize,
    /// Hidden width of every network.
    pub hidden: usize,
    /// Channels computed by the Prep network; the secret itself is passed
    /// alongside them.
    pub features: usize,
}

impl OracleArch {
    /// Channels handed to Hide besides the cover: the secret plus the Prep output.
    pub fn feature_channels(&self) -> usize {
        self.channels + self.features
    }

    /// 32x32 images, 16 hidden channels and 16 Prep features.
    pub fn desk(channels: usize) -> Self {
        Self {
            channels,
            image_size: 32,
            hidden: 16,
            features: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleParams<T = f32> {
    pub arch: OracleArch,
    pub prep: ConvStack<T>,
    pub hide: ConvStack<T>,
    pub reveal: ConvStack<T>,
}

impl<T: Float> OracleParams<T> {
    /// Prep: 3 conv layers. Hide: 5 over `[cover, secret, prep output, phase]`.
    /// Reveal: 5 over `[container, phase]`.
    pub fn init(arch: OracleArch, seed_value: u64) -> Self {
        let mut rng = seed::rng(seed_value, "oracle-init", 0);
        let (c, h, f) = (arch.channels, arch.hidden, arch.features);
        let prep = ConvStack::init(
            &[ConvGeom::same3(c, h), ConvGeom::same3(h, h), ConvGeom::same3(h, f)],
            Activation::Relu,
            Activation::Relu,
            &mut rng,
        );
        let body = |input: usize| {
            let mut g = vec![ConvGeom::same3(input, h)];
            g.extend(std::iter::repeat_n(ConvGeom::same3(h, h), 3));
            g.push(ConvGeom::same3(h, c));
            g
        };
        // Hide predicts a logit-space correction to the cover and starts at
        // zero, so an untrained oracle returns the cover unchanged.
        let mut hide = ConvStack::init(&body(2 * c + f + 1), Activation::Relu, Activation::Identity, &mut rng);
        let head = hide.layers.last_mut().expect("hide has layers");
        head.weight.iter_mut().for_each(|v| *v = T::zero());
        head.bias.iter_mut().for_each(|v| *v = T::zero());
        let reveal = ConvStack::init(&body(c + 1), Activation::Relu, Activation::Sigmoid, &mut rng);
        Self {
            arch,
            prep,
            hide,
            reveal,
        }
    }
}

impl<T: Float> Params<T> for OracleParams<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut t = self.prep.tensors();
        t.extend(self.hide.tensors());
        t.extend(self.reveal.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut t = self.prep.tensors_mut();
        t.extend(self.hide.tensors_mut());
        t.extend(self.reveal.tensors_mut());
        t
    }

    fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            prep: self.prep.zeros_like(),
            hide: self.hide.zeros_like(),
            reveal: self.reveal.zeros_like(),
        }
    }
}

impl OracleParams<f32> {
    fn check_image(&self, img: &ImageBatch, what: &str) -> Result<()> {
        let want = (self.arch.channels, self.arch.image_size);
        contract!(
            img.image_shape() == want,
            "{what} has shape {:?} (channels, size), oracle was trained on {want:?}",
            img.image_shape()
        );
        Ok(())
    }

    /// Secret -> feature maps `[N, channels + features, H, W]`: the secret
    /// followed by the Prep network's output.
    pub fn prep(&self, secret: &ImageBatch) -> Result<Array4<f32>> {
        self.check_image(secret, "secret")?;
        let s = secret.to_maps::<f32>();
        Ok(s.concat_channels(&self.prep.forward(&s)).to_nchw())
    }

    /// Features + cover -> container.
    pub fn hide(&self, features: &Array4<f32>, cover: &ImageBatch) -> Result<ImageBatch> {
        self.check_image(cover, "cover")?;
        let (n, f, h, w) = features.dim();
        contract!(
            (n, f, h, w) == (cover.len(), self.arch.feature_channels(), cover.size(), cover.size()),
            "features shape {:?} does not match cover batch {} x {}x{} with {} feature channels",
            features.dim(),
            cover.len(),
            cover.size(),
            cover.size(),
            self.arch.feature_channels()
        );
        contract!(
            features.iter().all(|v| v.is_finite()),
            "features must be finite"
        );
        let input = cover
            .to_maps::<f32>()
            .concat_channels(&Maps::from_nchw(features.view()))
            .concat_channels(&phase_plane(cover.len(), cover.size()));
        ImageBatch::from_maps(&apply_correction(&self.hide.forward(&input), &cover.to_maps()))
    }

    pub fn reveal(&self, container: &ImageBatch) -> Result<ImageBatch> {
        self.check_image(container, "container")?;
        let input = container
            .to_maps::<f32>()
            .concat_channels(&phase_plane(container.len(), container.size()));
        ImageBatch::from_maps(&self.reveal.forward(&input))
    }

    /// `hide(prep(secret), cover)`.
    pub fn embed(&self, secret: &ImageBatch, cover: &ImageBatch) -> Result<ImageBatch> {
        contract!(
            secret.len() == cover.len(),
            "secret batch ({}) and cover batch ({}) differ in length",
            secret.len(),
            cover.len()
        );
        let features = self.prep(secret)?;
        self.hide(&features, cover)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(
            CHECKPOINT_FORMAT,
            serde_json::json!({ "arch": self.arch }),
        );
        ck.push_stack("prep", &self.prep);
        ck.push_stack("hide", &self.hide);
        ck.push_stack("reveal", &self.reveal);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_format(CHECKPOINT_FORMAT)?;
        let arch: OracleArch = serde_json::from_value(ck.meta["arch"].clone())
            .map_err(|e| Error::Format(format!("oracle arch: {e}")))?;
        let mut p = Self::init(arch, 0);
        ck.read_stack("prep", &mut p.prep)?;
        ck.read_stack("hide", &mut p.hide)?;
        ck.read_stack("reveal", &mut p.reveal)?;
        if !p.all_finite() {
            return Err(Error::Format("oracle checkpoint holds non-finite parameters".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub arch: OracleArch,
    /// Weight of the reveal term in the joint loss.
    pub reveal_weight: f64,
    pub learning_rate: f64,
    /// The rate follows a cosine from `learning_rate` down to this value over
    /// the run; set it equal to `learning_rate` for a constant rate.
    pub final_learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            arch: OracleArch::desk(4),
            reveal_weight: 4.0,
            learning_rate: 3e-3,
            final_learning_rate: 5e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            epochs: 64,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Mean joint loss per epoch, plus its two components.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleTrainLog {
    pub epochs: Vec<OracleEpoch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleEpoch {
    pub epoch: usize,
    pub joint: f64,
    pub cover_mse: f64,
    pub reveal_mse: f64,
    pub seconds: f64,
}

const LOGIT_EPS: f64 = 1e-3;

/// Fixed `(-1)^(x+y)` checkerboard appended to the Hide and Reveal inputs.
/// Convolutions are translation-equivariant, so without it neither network
/// can tell neighbouring pixels apart to modulate or demodulate the secret.
pub(crate) fn phase_plane<T: Float>(batch: usize, size: usize) -> Maps<T> {
    let mut m = Maps::zeros(1, batch, size, size);
    for n in 0..batch {
        for (i, v) in m.plane_mut(0, n).iter_mut().enumerate() {
            *v = if (i / size + i % size).is_multiple_of(2) { T::one() } else { -T::one() };
        }
    }
    m
}

/// `sigmoid(correction + logit(cover))`, with the cover clamped away from 0
/// and 1 so its logit stays finite.
fn apply_correction<T: Float>(correction: &Maps<T>, cover: &Maps<T>) -> Maps<T> {
    let (lo, hi) = (T::of(LOGIT_EPS), T::of(1.0 - LOGIT_EPS));
    correction.zip_map(cover, |d, c| {
        let c = c.max(lo).min(hi);
        sigmoid(d + (c / (T::one() - c)).ln())
    })
}

/// One optimization step's losses: `(joint, cover_mse, reveal_mse)`.
pub(crate) fn oracle_step_grads<T: Float>(
    params: &OracleParams<T>,
    secret: &Maps<T>,
    cover: &Maps<T>,
    reveal_weight: f64,
    grads: &mut OracleParams<T>,
) -> (f64, f64, f64) {
    let (features, prep_tape) = params.prep.forward_train(secret);
    let phase = phase_plane(cover.batch, cover.height);
    let hide_input = cover
        .concat_channels(secret)
        .concat_channels(&features)
        .concat_channels(&phase);
    let (correction, hide_tape) = params.hide.forward_train(&hide_input);
    let container = apply_correction(&correction, cover);
    let (revealed, reveal_tape) = params
        .reveal
        .forward_train(&container.concat_channels(&phase));

    let count = container.len() as f64;
    let scale = T::of(2.0 / count);
    let w = T::of(reveal_weight);
    let mut cover_mse = 0.0;
    let mut reveal_mse = 0.0;
    let mut g_container = container.zip_map(cover, |a, b| {
        let d = a - b;
        cover_mse += (d * d).as_f64();
        scale * d
    });
    let g_revealed = revealed.zip_map(secret, |a, b| {
        let d = a - b;
        reveal_mse += (d * d).as_f64();
        scale * w * d
    });
    cover_mse /= count;
    reveal_mse /= count;

    let through_reveal = params
        .reveal
        .backward(&reveal_tape, g_revealed, &mut grads.reveal, true)
        .expect("input grad requested")
        .split_channels(params.arch.channels)
        .0;
    g_container
        .data
        .iter_mut()
        .zip(&through_reveal.data)
        .for_each(|(g, r)| *g = *g + *r);
    let g_correction = g_container.zip_map(&container, |g, s| g * s * (T::one() - s));
    let d_input = params
        .hide
        .backward(&hide_tape, g_correction, &mut grads.hide, true)
        .expect("input grad requested");
    let (_, d_rest) = d_input.split_channels(2 * params.arch.channels);
    let (d_features, _) = d_rest.split_channels(params.arch.features);
    params
        .prep
        .backward(&prep_tape, d_features, &mut grads.prep, false);
    (cover_mse + reveal_weight * reveal_mse, cover_mse, reveal_mse)
}

/// Trains Prep, Hide and Reveal jointly on randomly re-paired (secret, cover)
/// draws from `images`, minimizing `MSE(container, cover) + w * MSE(revealed, secret)`.
pub fn train_oracle(
    images: &[ImageBatch],
    config: &OracleConfig,
) -> Result<(OracleParams, OracleTrainLog)> {
    let pool: Vec<ImageBatch> = images.iter().flat_map(|b| b.items()).collect();
    let bs = config.batch_size.max(1);
    if pool.len() < 2 * bs {
        return Err(Error::Config(format!(
            "oracle training needs at least two batches ({} images), got {}",
            2 * bs,
            pool.len()
        )));
    }
    for img in &pool {
        contract!(
            img.image_shape() == (config.arch.channels, config.arch.image_size),
            "training image shape {:?} does not match oracle architecture",
            img.image_shape()
        );
    }
    let mut params = OracleParams::<f32>::init(config.arch, config.seed);
    let mut adam = Adam::new(&params, config.learning_rate, config.adam_beta1, config.adam_beta2);
    let mut log = OracleTrainLog::default();
    let start = Instant::now();
    let mut step = 0u64;
    let total_steps = (config.epochs * (pool.len() / bs)).max(1) as f64;
    let (lr0, lr1) = (config.learning_rate, config.final_learning_rate);
    for epoch in 0..config.epochs {
        let mut rng = seed::rng(config.seed, "oracle-epoch", epoch as u64);
        let mut secrets: Vec<usize> = (0..pool.len()).collect();
        let mut covers = secrets.clone();
        secrets.shuffle(&mut rng);
        covers.shuffle(&mut rng);
        let (mut joint, mut cm, mut rm) = (0.0, 0.0, 0.0);
        let batches = pool.len() / bs;
        for b in 0..batches {
            let idx = b * bs..(b + 1) * bs;
            let s = ImageBatch::stack(secrets[idx.clone()].iter().map(|&i| &pool[i]))?;
            let c = ImageBatch::stack(covers[idx].iter().map(|&i| &pool[i]))?;
            let mut grads = params.zeros_like();
            let (j, c_mse, r_mse) = oracle_step_grads(
                &params,
                &s.to_maps(),
                &c.to_maps(),
                config.reveal_weight,
                &mut grads,
            );
            step += 1;
            if !j.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite {
                    what: "oracle joint loss".into(),
                    step,
                    hint: format!(
                        "try a smaller learning_rate (currently {})",
                        config.learning_rate
                    ),
                });
            }
            let progress = (step - 1) as f64 / total_steps;
            adam.lr = lr1 + 0.5 * (lr0 - lr1) * (1.0 + (std::f64::consts::PI * progress).cos());
            adam.step(&mut params, &grads);
            joint += j;
            cm += c_mse;
            rm += r_mse;
        }
        let n = batches as f64;
        let rec = OracleEpoch {
            epoch,
            joint: joint / n,
            cover_mse: cm / n,
            reveal_mse: rm / n,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "oracle epoch {epoch}: joint {:.5} cover {:.5} reveal {:.5} ({:.0}s)",
            rec.joint,
            rec.cover_mse,
            rec.reveal_mse,
            rec.seconds
        );
        log.epochs.push(rec);
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SyntheticImages;

    fn tiny() -> OracleArch {
        OracleArch {
            channels: 4,
            image_size: 8,
            hidden: 4,
            features: 3,
        }
    }

    #[test]
    fn shapes_and_ranges() {
        let p = OracleParams::<f32>::init(tiny(), 1);
        let gen = SyntheticImages::new(9, 8, 4);
        let s = gen.batch(0, 3);
        let c = gen.batch(10, 3);
        let f = p.prep(&s).unwrap();
        assert_eq!(f.dim(), (3, 7, 8, 8));
        assert!(f.iter().all(|v| v.is_finite()));
        let cont = p.hide(&f, &c).unwrap();
        assert_eq!(cont.data().dim(), (3, 4, 8, 8));
        let zeros = Array4::zeros(f.dim());
        assert!(p.hide(&zeros, &c).is_ok());
        let r = p.reveal(&ImageBatch::constant(2, 4, 8, 0.0).unwrap()).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(p.embed(&s, &c).unwrap(), p.hide(&p.prep(&s).unwrap(), &c).unwrap());
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let p = OracleParams::<f32>::init(tiny(), 1);
        let wrong = ImageBatch::constant(1, 4, 16, 0.5).unwrap();
        assert!(matches!(p.prep(&wrong), Err(Error::Contract(_))));
        assert!(matches!(p.reveal(&wrong), Err(Error::Contract(_))));
        let three = ImageBatch::constant(1, 3, 8, 0.5).unwrap();
        assert!(matches!(p.prep(&three), Err(Error::Contract(_))));
        let c = ImageBatch::constant(1, 4, 8, 0.5).unwrap();
        let bad = Array4::zeros((1, 2, 8, 8));
        assert!(matches!(p.hide(&bad, &c), Err(Error::Contract(_))));
    }

    #[test]
    fn batch_items_are_independent() {
        let p = OracleParams::<f32>::init(tiny(), 2);
        let gen = SyntheticImages::new(3, 8, 4);
        let s = gen.batch(0, 2);
        let c = gen.batch(5, 2);
        let pair = p.embed(&s, &c).unwrap();
        let single = p.embed(&s.item(1), &c.item(1)).unwrap();
        assert_eq!(pair.item(1), single);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let gen = SyntheticImages::new(5, 8, 4);
        let images = gen.images(0, 64);
        let config = OracleConfig {
            arch: tiny(),
            epochs: 4,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 17,
            ..OracleConfig::default()
        };
        let (p1, log1) = train_oracle(&images, &config).unwrap();
        let (p2, log2) = train_oracle(&images, &config).unwrap();
        assert_eq!(p1, p2);
        let joint = |l: &OracleTrainLog| l.epochs.iter().map(|e| e.joint).collect::<Vec<_>>();
        assert_eq!(joint(&log1), joint(&log2));
        assert!(log1.epochs.last().unwrap().joint < log1.epochs[0].joint);
    }

    #[test]
    fn too_few_images_is_config_error() {
        let images = SyntheticImages::new(5, 8, 4).images(0, 3);
        let config = OracleConfig {
            arch: tiny(),
            ..OracleConfig::default()
        };
        assert!(matches!(train_oracle(&images, &config), Err(Error::Config(_))));
    }

    #[test]
    fn huge_learning_rate_aborts_with_guidance() {
        let images = SyntheticImages::new(5, 8, 4).images(0, 32);
        let config = OracleConfig {
            arch: tiny(),
            learning_rate: f64::INFINITY,
            batch_size: 8,
            epochs: 2,
            ..OracleConfig::default()
        };
        match train_oracle(&images, &config) {
            Err(Error::NonFinite { hint, .. }) => assert!(hint.contains("learning_rate")),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = OracleParams::<f32>::init(tiny(), 4);
        let back = OracleParams::from_checkpoint(
            &Checkpoint::from_bytes(&p.to_checkpoint().to_bytes()).unwrap(),
        )
        .unwrap();
        assert_eq!(p, back);
        let gen = SyntheticImages::new(1, 8, 4);
        let (s, c) = (gen.batch(0, 2), gen.batch(2, 2));
        assert_eq!(p.embed(&s, &c).unwrap(), back.embed(&s, &c).unwrap());
    }

    #[test]
    fn untrained_oracle_returns_the_cover() {
        let p = OracleParams::<f32>::init(tiny(), 6);
        let gen = SyntheticImages::new(2, 8, 4);
        let c = gen.batch(0, 2);
        let cont = p.embed(&gen.batch(2, 2), &c).unwrap();
        let worst = cont
            .data()
            .iter()
            .zip(c.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1.01e-3, "{worst}");
    }

    #[test]
    fn joint_loss_gradients_match_central_differences() {
        use rand::{Rng, SeedableRng};
        let arch = OracleArch {
            channels: 3,
            image_size: 6,
            hidden: 3,
            features: 2,
        };
        let mut p = OracleParams::<f64>::init(arch, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        let img = |rng: &mut rand_chacha::ChaCha8Rng| {
            Maps::from_nchw(Array4::from_shape_fn((2, 3, 6, 6), |_| rng.random_range(0.0f64..1.0)).view())
        };
        let (s, c) = (img(&mut rng), img(&mut rng));
        let mut grads = p.zeros_like();
        oracle_step_grads(&p, &s, &c, 0.75, &mut grads);
        let analytic = grads.flat();
        let n = analytic.len();
        for k in (0..n).step_by(7) {
            let eval = |delta: f64| {
                let mut q = p.clone();
                let mut idx = k;
                for t in q.tensors_mut() {
                    if idx < t.len() {
                        t[idx] += delta;
                        break;
                    }
                    idx -= t.len();
                }
                oracle_step_grads(&q, &s, &c, 0.75, &mut q.zeros_like()).0
            };
            let numeric = (eval(1e-5) - eval(-1e-5)) / 2e-5;
            let rel = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "coordinate {k}: {} vs {numeric}", analytic[k]);
        }
    }
}
