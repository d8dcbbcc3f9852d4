mod common;

use common::{grad_check, gradcheck_arch, gradcheck_params, GradInputs};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stegattack::attack::{AdversarialForm, LossWeights};
use stegattack::nn::Params;

fn weights() -> LossWeights {
    // large beta and lambda so every term contributes visibly
    LossWeights {
        alpha: 1.0,
        beta: 0.5,
        gamma: 0.7,
        lambda_tv: 0.1,
    }
}

#[test]
fn miniature_config_has_at_most_500_params() {
    let p = gradcheck_params(0);
    assert_eq!(p.num_params(), 471);
    let (d, g, a) = p.group_sizes();
    assert_eq!(d + g + a, p.num_params());
}

#[test]
fn full_objective_gradients_match_central_differences_everywhere() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = gradcheck_params(seed);
        let x = GradInputs::random(&mut rng, gradcheck_arch(), 2);
        let coords: Vec<usize> = (0..p.num_params()).collect();
        let r = grad_check(&p, &x, &weights(), AdversarialForm::MinMax, &coords, 1e-5);
        assert!(r.max_rel_err < 1e-4, "seed {seed}: coordinate {} off by {}", r.worst, r.max_rel_err);
    }
}

#[test]
fn non_saturating_gradients_match_their_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = gradcheck_params(9);
    let x = GradInputs::random(&mut rng, gradcheck_arch(), 3);
    let coords: Vec<usize> = (0..p.num_params()).collect();
    let r = grad_check(&p, &x, &weights(), AdversarialForm::NonSaturating, &coords, 1e-5);
    assert!(r.max_rel_err < 1e-4, "coordinate {} off by {}", r.worst, r.max_rel_err);
}

#[test]
fn default_weights_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = gradcheck_params(4);
    let x = GradInputs::random(&mut rng, gradcheck_arch(), 2);
    let coords: Vec<usize> = (0..p.num_params()).step_by(3).collect();
    // With beta = 0.01 the discriminator gradients are ~1e-6, too small to
    // difference against the whole objective; each group is checked against
    // the term it optimizes instead.
    let r = grad_check(&p, &x, &LossWeights::default(), AdversarialForm::NonSaturating, &coords, 1e-5);
    assert!(r.max_rel_err < 1e-4, "coordinate {} off by {}", r.worst, r.max_rel_err);
}
