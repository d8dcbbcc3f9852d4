mod common;

use common::{sq_dist_oracle, transfer_oracle, tv_oracle, GradInputs};
use ndarray::Array4;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stegattack::attack::{
    conditional_loss, decoding_loss, total_loss, total_variation, transfer_loss, AdversarialForm,
    AttackArch, AttackParams, LossWeights, NoiseVector,
};
use stegattack::checkpoint::Checkpoint;
use stegattack::image::ImageBatch;
use stegattack::metrics::{psnr, ssim, MetricOptions};
use stegattack::nn::Maps;

fn image4(n: usize, c: usize, s: usize) -> impl Strategy<Value = Array4<f64>> {
    proptest::collection::vec(0.0f64..1.0, n * c * s * s)
        .prop_map(move |v| Array4::from_shape_vec((n, c, s, s), v).unwrap())
}

fn small_arch() -> AttackArch {
    AttackArch {
        channels: 4,
        image_size: 16,
        noise_dim: 4,
        decoder_hidden: 4,
        generator_hidden: 4,
        discriminator_hidden: 2,
    }
}

/// Images on the 1/256 grid inside [0.25, 0.75], so that shifting by a
/// multiple of 1/256 in [-0.25, 0.25] stays exact in f32.
fn dyadic_image(n: usize) -> impl Strategy<Value = ImageBatch> {
    proptest::collection::vec(64u32..=192, n * 4 * 16 * 16).prop_map(move |v| {
        let data = Array4::from_shape_vec((n, 4, 16, 16), v.into_iter().map(|k| k as f32 / 256.0).collect())
            .unwrap();
        ImageBatch::new(data).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tv_matches_nested_loops_and_scales_quadratically(x in image4(2, 3, 6), k in -3.0f64..3.0) {
        let tv = total_variation(x.view()).unwrap();
        prop_assert!((tv - tv_oracle(x.view())).abs() <= 1e-9 * tv.max(1.0));
        prop_assert!(tv >= 0.0);
        let scaled = x.mapv(|v| v * k);
        let tv_k = total_variation(scaled.view()).unwrap();
        prop_assert!((tv_k - k * k * tv).abs() <= 1e-9 * tv_k.max(1.0));
    }

    #[test]
    fn decoding_loss_matches_elementwise_sum(a in image4(3, 2, 5), b in image4(3, 2, 5)) {
        let d = decoding_loss(a.view(), b.view()).unwrap();
        let o = sq_dist_oracle(a.view(), b.view());
        prop_assert!((d - o).abs() <= 1e-6 * o.max(1e-12));
        prop_assert_eq!(decoding_loss(a.view(), a.view()).unwrap(), 0.0);
    }

    #[test]
    fn conditional_loss_reductions(t in image4(2, 3, 5), s in image4(2, 3, 5)) {
        let l0 = conditional_loss(t.view(), s.view(), 0.0).unwrap();
        prop_assert_eq!(l0, decoding_loss(t.view(), s.view()).unwrap());
        let same = conditional_loss(s.view(), s.view(), 1.0).unwrap();
        prop_assert_eq!(same, total_variation(s.view()).unwrap());
        prop_assert!(conditional_loss(t.view(), s.view(), 0.3).unwrap() >= 0.0);
    }

    #[test]
    fn transfer_loss_matches_log_sum(
        real in proptest::collection::vec(0.0f64..=1.0, 1..20),
        fake in proptest::collection::vec(0.0f64..=1.0, 1..20),
    ) {
        let l = transfer_loss(&real, &fake).unwrap();
        prop_assert!((l - transfer_oracle(&real, &fake)).abs() <= 1e-9);
        prop_assert!(l <= 0.0);
    }

    #[test]
    fn decode_depends_only_on_the_residual(
        cover in dyadic_image(2),
        container in dyadic_image(2),
        shift in -64i32..=64,
        seed in 0u64..1000,
    ) {
        let p = AttackParams::<f32>::init(small_arch(), seed);
        let t = shift as f32 / 256.0;
        let shifted = |x: &ImageBatch| ImageBatch::new(x.data().mapv(|v| v + t)).unwrap();
        let a = p.decode(&cover, &container).unwrap();
        let b = p.decode(&shifted(&cover), &shifted(&container)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(a in dyadic_image(1), b in dyadic_image(1)) {
        let o = MetricOptions::default();
        let s = ssim(&a, &b, &o).unwrap();
        prop_assert_eq!(s, ssim(&b, &a, &o).unwrap());
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(psnr(&a, &b, &o).unwrap(), psnr(&b, &a, &o).unwrap());
    }

    #[test]
    fn attack_checkpoint_round_trip_is_bit_exact(seed in 0u64..10_000) {
        let p = AttackParams::<f32>::init(small_arch(), seed);
        let back = AttackParams::from_checkpoint(
            &Checkpoint::from_bytes(&p.to_checkpoint().to_bytes()).unwrap(),
        )
        .unwrap();
        prop_assert_eq!(p, back);
    }
}

#[test]
fn total_loss_equals_composition_of_component_ops() {
    let arch = small_arch();
    let gen = stegattack::synth::SyntheticImages::new(3, 16, 4);
    let (secret, cover, container, real) =
        (gen.batch(0, 3), gen.batch(3, 3), gen.batch(6, 3), gen.batch(9, 4));
    let z = NoiseVector::from_seed(3, arch.noise_dim, 8);
    let w = LossWeights {
        alpha: 0.3,
        beta: 0.7,
        gamma: 1.1,
        lambda_tv: 0.05,
    };
    for seed in 0..5 {
        let p = AttackParams::<f32>::init(arch, seed);
        let decoded = p.decode(&cover, &container).unwrap();
        let transferred = p.transfer(&decoded, &z).unwrap();
        let l_d = decoding_loss(decoded.view(), secret.view()).unwrap();
        let l_t = transfer_loss(
            &p.discriminate(&real).unwrap(),
            &p.discriminate(&transferred).unwrap(),
        )
        .unwrap();
        let l_c = conditional_loss(transferred.view(), secret.view(), w.lambda_tv).unwrap();
        let expected = w.alpha * l_d + w.beta * l_t + w.gamma * l_c;

        let maps = |x: &ImageBatch| Maps::<f32>::from_nchw(x.view());
        let (mc, mk, ms, mr) = (maps(&cover), maps(&container), maps(&secret), maps(&real));
        let zf: Vec<f32> = z.z.iter().copied().collect();
        let inputs = stegattack::attack::ObjectiveInputs {
            cover: &mc,
            container: &mk,
            secret: &ms,
            real: &mr,
            z: &zf,
        };
        let t = total_loss(&p, &inputs, &w, AdversarialForm::MinMax).unwrap();
        assert!((t.total - expected).abs() <= 1e-9 * expected.abs().max(1.0), "{} vs {expected}", t.total);
        assert!((t.adversary - w.beta * l_t).abs() <= 1e-9);
    }
}

#[test]
fn analytic_total_loss_cases() {
    let arch = small_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = AttackParams::<f64>::init(arch, 1);
    let x = GradInputs::random(&mut rng, arch, 2);

    // zero the discriminator head so every score is exactly 0.5
    for l in &mut p.discriminator.stack.layers[3..] {
        l.weight.iter_mut().for_each(|v| *v = 0.0);
        l.bias.iter_mut().for_each(|v| *v = 0.0);
    }
    let only_t = LossWeights {
        alpha: 0.0,
        beta: 1.0,
        gamma: 0.0,
        lambda_tv: 0.0,
    };
    let t = total_loss(&p, &x.view(), &only_t, AdversarialForm::MinMax).unwrap();
    assert!((t.total + 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn transfer_output_reacts_to_noise() {
    let p = AttackParams::<f32>::init(small_arch(), 3);
    let d = stegattack::synth::SyntheticImages::new(0, 16, 4).batch(0, 2);
    let z1 = NoiseVector::from_seed(2, 4, 1);
    let z2 = NoiseVector::from_seed(2, 4, 2);
    assert_eq!(p.transfer(&d, &z1).unwrap(), p.transfer(&d, &z1).unwrap());
    let a = p.transfer(&d, &z1).unwrap();
    let b = p.transfer(&d, &z2).unwrap();
    let diff: f32 = a.data().iter().zip(b.data().iter()).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 0.0);
}
