//! Decode-and-transfer attack networks.
//!
//! * decoder: 5-layer ReLU CNN over the residual `container - cover` plus
//!   two pixel-parity planes, sigmoid head, producing the decoded estimate `x_d`;
//! * generator: projects the noise vector to one extra feature plane, stacks
//!   it under `x_d` and refines through 6 conv layers into `x_t`;
//! * discriminator: 4 strided convs, global average pool, sigmoid score.

mod loss;
mod objective;

pub use loss::{
    conditional_loss, decoding_loss, total_variation, transfer_loss, LossWeights, SCORE_EPS,
};
pub use objective::{
    objective_gradients, total_loss, AdversarialForm, GradFor, LossTerms, ObjectiveInputs,
};

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{contract, Error, Result};
use crate::image::ImageBatch;
use crate::nn::sigmoid;
use crate::nn::{Activation, ConvGeom, ConvStack, Float, Maps, Params, StackTape};
use crate::seed;

pub const CHECKPOINT_FORMAT: &str = "attack";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackArch {
    pub channels: usize,
    pub image_size: usize,
    pub noise_dim: usize,
    pub decoder_hidden: usize,
    pub generator_hidden: usize,
    /// Width of the first discriminator layer; later layers double it.
    pub discriminator_hidden: usize,
}

impl AttackArch {
    pub fn desk(channels: usize) -> Self {
        Self {
            channels,
            image_size: 32,
            noise_dim: 16,
            decoder_hidden: 32,
            generator_hidden: 32,
            discriminator_hidden: 16,
        }
    }
}

pub(crate) const PARITY_PLANES: usize = 2;

/// `container - cover` followed by the planes `(-1)^x` and `(-1)^y`. The
/// parity planes give the translation-equivariant decoder a phase reference,
/// so it can undo hiding schemes that alternate sign from pixel to pixel.
pub(crate) fn decoder_input<T: Float>(cover: &Maps<T>, container: &Maps<T>) -> Maps<T> {
    let mut parity = Maps::zeros(PARITY_PLANES, cover.batch, cover.height, cover.width);
    let w = cover.width;
    let sign = |k: usize| if k.is_multiple_of(2) { T::one() } else { -T::one() };
    for n in 0..cover.batch {
        for (i, v) in parity.plane_mut(0, n).iter_mut().enumerate() {
            *v = sign(i % w);
        }
        for (i, v) in parity.plane_mut(1, n).iter_mut().enumerate() {
            *v = sign(i / w);
        }
    }
    container.sub(cover).concat_channels(&parity)
}

/// I.i.d. standard-normal noise, `[batch, noise_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseVector {
    pub z: Array2<f32>,
}

impl NoiseVector {
    pub fn sample<R: Rng + ?Sized>(batch: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            z: Array2::from_shape_fn((batch, dim), |_| rng.sample::<f32, _>(StandardNormal)),
        }
    }

    pub fn from_seed(batch: usize, dim: usize, z_seed: u64) -> Self {
        Self::sample(batch, dim, &mut seed::rng(z_seed, "noise", 0))
    }

    pub fn batch(&self) -> usize {
        self.z.dim().0
    }

    pub fn dim(&self) -> usize {
        self.z.dim().1
    }

    pub(crate) fn flat<T: Float>(&self) -> Vec<T> {
        self.z.iter().map(|&v| T::of(v as f64)).collect()
    }
}

/// Transfer network: noise plane + 6 conv layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub noise_weight: Vec<T>,
    pub noise_bias: Vec<T>,
    pub stack: ConvStack<T>,
}

pub(crate) struct GeneratorTape<T> {
    stack: StackTape<T>,
    plane_len: usize,
}

impl<T: Float> Generator<T> {
    fn noise_plane(&self, z: &[T], batch: usize, h: usize, w: usize) -> Maps<T> {
        let dim = self.noise_weight.len();
        let mut plane = Maps::zeros(1, batch, h, w);
        for n in 0..batch {
            let v = z[n * dim..(n + 1) * dim]
                .iter()
                .zip(&self.noise_weight)
                .fold(self.noise_bias[0], |acc, (&a, &b)| acc + a * b);
            plane.plane_mut(0, n).fill(v);
        }
        plane
    }

    pub(crate) fn forward(&self, decoded: &Maps<T>, z: &[T]) -> Maps<T> {
        let plane = self.noise_plane(z, decoded.batch, decoded.height, decoded.width);
        self.stack.forward(&decoded.concat_channels(&plane))
    }

    pub(crate) fn forward_train(&self, decoded: &Maps<T>, z: &[T]) -> (Maps<T>, GeneratorTape<T>) {
        let plane = self.noise_plane(z, decoded.batch, decoded.height, decoded.width);
        let (out, stack) = self.stack.forward_train(&decoded.concat_channels(&plane));
        (
            out,
            GeneratorTape {
                stack,
                plane_len: decoded.plane_len(),
            },
        )
    }

    /// Returns the gradient w.r.t. the decoded input.
    pub(crate) fn backward(
        &self,
        tape: &GeneratorTape<T>,
        grad: Maps<T>,
        z: &[T],
        grads: &mut Generator<T>,
    ) -> Maps<T> {
        let d_in = self
            .stack
            .backward(&tape.stack, grad, &mut grads.stack, true)
            .expect("input grad requested");
        let channels = self.stack.in_channels() - 1;
        let (d_decoded, d_plane) = d_in.split_channels(channels);
        let dim = self.noise_weight.len();
        for n in 0..d_plane.batch {
            let dv = d_plane.plane(0, n).iter().fold(T::zero(), |a, &b| a + b);
            grads.noise_bias[0] = grads.noise_bias[0] + dv;
            for j in 0..dim {
                grads.noise_weight[j] = grads.noise_weight[j] + dv * z[n * dim + j];
            }
        }
        debug_assert_eq!(tape.plane_len, d_plane.plane_len());
        d_decoded
    }
}

/// Adversarial network with a clamped sigmoid score per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub stack: ConvStack<T>,
}

pub(crate) struct DiscriminatorTape<T> {
    stack: StackTape<T>,
    /// Unclamped sigmoid outputs.
    raw: Vec<T>,
    out_h: usize,
    out_w: usize,
}

impl<T: Float> Discriminator<T> {
    fn scores_from(&self, out: &Maps<T>) -> (Vec<T>, Vec<T>) {
        let eps = T::of(SCORE_EPS);
        let area = T::of(out.plane_len() as f64);
        let raw: Vec<T> = (0..out.batch)
            .map(|n| sigmoid(out.plane(0, n).iter().fold(T::zero(), |a, &b| a + b) / area))
            .collect();
        let clamped = raw
            .iter()
            .map(|&s| s.max(eps).min(T::one() - eps))
            .collect();
        (clamped, raw)
    }

    pub(crate) fn forward(&self, x: &Maps<T>) -> Vec<T> {
        self.scores_from(&self.stack.forward(x)).0
    }

    pub(crate) fn forward_train(&self, x: &Maps<T>) -> (Vec<T>, DiscriminatorTape<T>) {
        let (out, stack) = self.stack.forward_train(x);
        let (scores, raw) = self.scores_from(&out);
        (
            scores,
            DiscriminatorTape {
                stack,
                raw,
                out_h: out.height,
                out_w: out.width,
            },
        )
    }

    pub(crate) fn backward(
        &self,
        tape: &DiscriminatorTape<T>,
        d_scores: &[T],
        grads: &mut Discriminator<T>,
        want_input_grad: bool,
    ) -> Option<Maps<T>> {
        let eps = T::of(SCORE_EPS);
        let batch = tape.raw.len();
        let area = tape.out_h * tape.out_w;
        let mut g = Maps::zeros(1, batch, tape.out_h, tape.out_w);
        for (n, (&s, &ds)) in tape.raw.iter().zip(d_scores).enumerate() {
            // clamp has zero derivative outside [eps, 1 - eps]
            let d = if s < eps || s > T::one() - eps {
                T::zero()
            } else {
                ds * s * (T::one() - s) / T::of(area as f64)
            };
            g.plane_mut(0, n).fill(d);
        }
        self.stack
            .backward(&tape.stack, g, &mut grads.stack, want_input_grad)
    }
}

impl<T: Float> Params<T> for Generator<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut t: Vec<&[T]> = vec![&self.noise_weight, &self.noise_bias];
        t.extend(self.stack.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut t: Vec<&mut [T]> = vec![&mut self.noise_weight, &mut self.noise_bias];
        t.extend(self.stack.tensors_mut());
        t
    }

    fn zeros_like(&self) -> Self {
        Self {
            noise_weight: vec![T::zero(); self.noise_weight.len()],
            noise_bias: vec![T::zero(); self.noise_bias.len()],
            stack: self.stack.zeros_like(),
        }
    }
}

impl<T: Float> Params<T> for Discriminator<T> {
    fn tensors(&self) -> Vec<&[T]> {
        self.stack.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.stack.tensors_mut()
    }

    fn zeros_like(&self) -> Self {
        Self {
            stack: self.stack.zeros_like(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackParams<T = f32> {
    pub arch: AttackArch,
    pub decoder: ConvStack<T>,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
}

impl<T: Float> AttackParams<T> {
    pub fn init(arch: AttackArch, seed_value: u64) -> Self {
        let mut rng = seed::rng(seed_value, "attack-init", 0);
        let c = arch.channels;
        let hd = arch.decoder_hidden;
        let mut dec = vec![ConvGeom::same3(c + PARITY_PLANES, hd)];
        dec.extend(std::iter::repeat_n(ConvGeom::same3(hd, hd), 3));
        dec.push(ConvGeom::same3(hd, c));
        let decoder = ConvStack::init(&dec, Activation::Relu, Activation::Sigmoid, &mut rng);

        let hg = arch.generator_hidden;
        let mut gen = vec![ConvGeom::same3(c + 1, hg)];
        gen.extend(std::iter::repeat_n(ConvGeom::same3(hg, hg), 4));
        gen.push(ConvGeom::same3(hg, c));
        let stack = ConvStack::init(&gen, Activation::Relu, Activation::Sigmoid, &mut rng);
        let bound = 1.0 / (arch.noise_dim as f64).sqrt();
        let generator = Generator {
            noise_weight: (0..arch.noise_dim)
                .map(|_| T::of(rng.random_range(-bound..bound)))
                .collect(),
            noise_bias: vec![T::zero()],
            stack,
        };

        let ha = arch.discriminator_hidden;
        let disc = [
            ConvGeom::down3(c, ha),
            ConvGeom::down3(ha, 2 * ha),
            ConvGeom::down3(2 * ha, 4 * ha),
            ConvGeom::down3(4 * ha, 1),
        ];
        let discriminator = Discriminator {
            stack: ConvStack::init(
                &disc,
                Activation::LeakyRelu(0.2),
                Activation::Identity,
                &mut rng,
            ),
        };
        Self {
            arch,
            decoder,
            generator,
            discriminator,
        }
    }

    pub(crate) fn decode_maps(&self, cover: &Maps<T>, container: &Maps<T>) -> Maps<T> {
        self.decoder.forward(&decoder_input(cover, container))
    }

    /// Parameters of each network, `(decoder, generator, discriminator)` in [`Params`] order.
    pub fn group_sizes(&self) -> (usize, usize, usize) {
        (
            self.decoder.num_params(),
            self.generator.num_params(),
            self.discriminator.num_params(),
        )
    }
}

impl<T: Float> Params<T> for AttackParams<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut t = self.decoder.tensors();
        t.extend(self.generator.tensors());
        t.extend(self.discriminator.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut t = self.decoder.tensors_mut();
        t.extend(self.generator.tensors_mut());
        t.extend(self.discriminator.tensors_mut());
        t
    }

    fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            decoder: self.decoder.zeros_like(),
            generator: self.generator.zeros_like(),
            discriminator: self.discriminator.zeros_like(),
        }
    }
}

impl AttackParams<f32> {
    fn check_image(&self, img: &ImageBatch, what: &str) -> Result<()> {
        let want = (self.arch.channels, self.arch.image_size);
        contract!(
            img.image_shape() == want,
            "{what} has shape {:?} (channels, size), attack expects {want:?}",
            img.image_shape()
        );
        Ok(())
    }

    /// Decoded estimate `x_d` from the cover/container residual.
    pub fn decode(&self, cover: &ImageBatch, container: &ImageBatch) -> Result<ImageBatch> {
        self.check_image(cover, "cover")?;
        self.check_image(container, "container")?;
        contract!(
            cover.len() == container.len(),
            "cover and container batches differ in length"
        );
        ImageBatch::from_maps(&self.decode_maps(&cover.to_maps(), &container.to_maps()))
    }

    /// Transferred estimate `x_t = G(x_d, z)`.
    pub fn transfer(&self, decoded: &ImageBatch, z: &NoiseVector) -> Result<ImageBatch> {
        self.check_image(decoded, "decoded image")?;
        contract!(
            z.dim() == self.arch.noise_dim,
            "noise dimension {} does not match trained {}",
            z.dim(),
            self.arch.noise_dim
        );
        contract!(
            z.batch() == decoded.len(),
            "noise batch {} does not match image batch {}",
            z.batch(),
            decoded.len()
        );
        ImageBatch::from_maps(&self.generator.forward(&decoded.to_maps(), &z.flat::<f32>()))
    }

    /// Per-image probability of being real, clamped to `[SCORE_EPS, 1 - SCORE_EPS]`.
    pub fn discriminate(&self, image: &ImageBatch) -> Result<Vec<f64>> {
        self.check_image(image, "image")?;
        Ok(self
            .discriminator
            .forward(&image.to_maps::<f32>())
            .into_iter()
            .map(|s| s as f64)
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_FORMAT, serde_json::json!({ "arch": self.arch }));
        self.push_tensors(&mut ck, "");
        ck
    }

    pub(crate) fn push_tensors(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.push_stack(&format!("{prefix}decoder"), &self.decoder);
        ck.push(
            format!("{prefix}generator.noise.weight"),
            vec![1, self.arch.noise_dim],
            self.generator.noise_weight.clone(),
        );
        ck.push(
            format!("{prefix}generator.noise.bias"),
            vec![1],
            self.generator.noise_bias.clone(),
        );
        ck.push_stack(&format!("{prefix}generator"), &self.generator.stack);
        ck.push_stack(&format!("{prefix}discriminator"), &self.discriminator.stack);
    }

    pub(crate) fn read_tensors(ck: &Checkpoint, arch: AttackArch, prefix: &str) -> Result<Self> {
        let mut p = Self::init(arch, 0);
        ck.read_stack(&format!("{prefix}decoder"), &mut p.decoder)?;
        for (name, dst) in [
            ("generator.noise.weight", &mut p.generator.noise_weight),
            ("generator.noise.bias", &mut p.generator.noise_bias),
        ] {
            let t = ck.tensor(&format!("{prefix}{name}"))?;
            if t.data.len() != dst.len() {
                return Err(Error::Format(format!("tensor `{prefix}{name}` has wrong length")));
            }
            dst.copy_from_slice(&t.data);
        }
        ck.read_stack(&format!("{prefix}generator"), &mut p.generator.stack)?;
        ck.read_stack(&format!("{prefix}discriminator"), &mut p.discriminator.stack)?;
        if !p.all_finite() {
            return Err(Error::Format("attack checkpoint holds non-finite parameters".into()));
        }
        Ok(p)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_format(CHECKPOINT_FORMAT)?;
        let arch: AttackArch = serde_json::from_value(ck.meta["arch"].clone())
            .map_err(|e| Error::Format(format!("attack arch: {e}")))?;
        Self::read_tensors(ck, arch, "")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
