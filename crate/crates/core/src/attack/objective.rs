use serde::{Deserialize, Serialize};

use super::loss::{mean_log, mean_log1m, sq_dist, tv};
use super::{AttackParams, LossWeights};
use crate::error::{contract, Result};
use crate::nn::{Float, Maps, Params};

/// How the decoder/generator gradient treats the adversarial term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    /// Descend `beta * mean log(1 - A(x_t))`, the exact objective term.
    MinMax,
    /// Descend `-beta * mean log A(x_t)` instead; same fixed point, stronger
    /// early gradients.
    #[default]
    NonSaturating,
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradFor {
    DecoderGenerator,
    Discriminator,
    All,
}

/// One batch of training inputs in the engine's channel-major layout.
pub struct ObjectiveInputs<'a, T> {
    pub cover: &'a Maps<T>,
    pub container: &'a Maps<T>,
    pub secret: &'a Maps<T>,
    /// Real images shown to the discriminator.
    pub real: &'a Maps<T>,
    /// Noise, `[batch, noise_dim]` row-major.
    pub z: &'a [T],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub decoding: f64,
    pub transfer: f64,
    pub conditional: f64,
    pub total_variation: f64,
    /// `alpha * decoding + beta * transfer + gamma * conditional`, minimized by
    /// decoder and generator.
    pub total: f64,
    /// `beta * transfer`, maximized by the discriminator.
    pub adversary: f64,
    /// The quantity whose gradient the decoder/generator actually descends
    /// under the chosen [`AdversarialForm`].
    pub generator_objective: f64,
}

fn check<T: Float>(params: &AttackParams<T>, x: &ObjectiveInputs<'_, T>) -> Result<()> {
    let a = params.arch;
    let want = |m: &Maps<T>| {
        m.channels == a.channels && m.height == a.image_size && m.width == a.image_size
    };
    for (name, m) in [
        ("cover", x.cover),
        ("container", x.container),
        ("secret", x.secret),
        ("real", x.real),
    ] {
        contract!(
            want(m) && m.batch > 0,
            "{name} maps have shape {}x{}x{} for an attack on {}x{}x{}",
            m.channels,
            m.height,
            m.width,
            a.channels,
            a.image_size,
            a.image_size
        );
    }
    contract!(
        x.cover.batch == x.container.batch && x.cover.batch == x.secret.batch,
        "cover, container and secret batches differ in length"
    );
    contract!(
        x.z.len() == x.cover.batch * a.noise_dim,
        "noise has {} values, expected batch {} x noise_dim {}",
        x.z.len(),
        x.cover.batch,
        a.noise_dim
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn terms(
    w: &LossWeights,
    form: AdversarialForm,
    l_d: f64,
    tv_value: f64,
    cond_sq: f64,
    log_real: f64,
    log1m_fake: f64,
    log_fake: f64,
) -> LossTerms {
    let transfer = log_real + log1m_fake;
    let conditional = cond_sq + w.lambda_tv * tv_value;
    let shared = w.alpha * l_d + w.gamma * conditional;
    LossTerms {
        decoding: l_d,
        transfer,
        conditional,
        total_variation: tv_value,
        total: shared + w.beta * transfer,
        adversary: w.beta * transfer,
        generator_objective: match form {
            AdversarialForm::MinMax => shared + w.beta * log1m_fake,
            AdversarialForm::NonSaturating => shared - w.beta * log_fake,
        },
    }
}

/// Evaluates every loss term without building gradients.
pub fn total_loss<T: Float>(
    params: &AttackParams<T>,
    inputs: &ObjectiveInputs<'_, T>,
    weights: &LossWeights,
    form: AdversarialForm,
) -> Result<LossTerms> {
    check(params, inputs)?;
    let decoded = params.decode_maps(inputs.cover, inputs.container);
    let transferred = params.generator.forward(&decoded, inputs.z);
    let fake = params.discriminator.forward(&transferred);
    let real = params.discriminator.forward(inputs.real);
    Ok(terms(
        weights,
        form,
        sq_dist(&decoded, inputs.secret).0,
        tv(&transferred).0,
        sq_dist(&transferred, inputs.secret).0,
        mean_log(&real).0,
        mean_log1m(&fake).0,
        mean_log(&fake).0,
    ))
}

/// Loss terms and gradients. Discriminator gradients are those of
/// `beta * transfer` (to be ascended); decoder/generator gradients are those
/// of [`LossTerms::generator_objective`] (to be descended). Groups not named
/// by `want` are left at zero.
pub fn objective_gradients<T: Float>(
    params: &AttackParams<T>,
    inputs: &ObjectiveInputs<'_, T>,
    weights: &LossWeights,
    form: AdversarialForm,
    want: GradFor,
) -> Result<(LossTerms, AttackParams<T>)> {
    check(params, inputs)?;
    let players = matches!(want, GradFor::DecoderGenerator | GradFor::All);
    let adversary = matches!(want, GradFor::Discriminator | GradFor::All);
    let mut grads = params.zeros_like();
    let beta = T::of(weights.beta);

    let residual = super::decoder_input(inputs.cover, inputs.container);
    let (decoded, dec_tape) = if players {
        let (d, t) = params.decoder.forward_train(&residual);
        (d, Some(t))
    } else {
        (params.decoder.forward(&residual), None)
    };
    let (transferred, gen_tape) = if players {
        let (t, tape) = params.generator.forward_train(&decoded, inputs.z);
        (t, Some(tape))
    } else {
        (params.generator.forward(&decoded, inputs.z), None)
    };
    let (fake, fake_tape) = params.discriminator.forward_train(&transferred);
    let (real, real_tape) = if adversary {
        let (s, t) = params.discriminator.forward_train(inputs.real);
        (s, Some(t))
    } else {
        (params.discriminator.forward(inputs.real), None)
    };

    let (l_d, g_decoded) = sq_dist(&decoded, inputs.secret);
    let (cond_sq, g_cond) = sq_dist(&transferred, inputs.secret);
    let (tv_value, g_tv) = tv(&transferred);
    let (log_real, g_log_real) = mean_log(&real);
    let (log1m_fake, g_log1m_fake) = mean_log1m(&fake);
    let (log_fake, g_log_fake) = mean_log(&fake);
    let out = terms(
        weights, form, l_d, tv_value, cond_sq, log_real, log1m_fake, log_fake,
    );

    if adversary {
        let d_fake: Vec<T> = g_log1m_fake.iter().map(|&g| beta * g).collect();
        let d_real: Vec<T> = g_log_real.iter().map(|&g| beta * g).collect();
        params
            .discriminator
            .backward(&fake_tape, &d_fake, &mut grads.discriminator, false);
        params.discriminator.backward(
            real_tape.as_ref().expect("taped"),
            &d_real,
            &mut grads.discriminator,
            false,
        );
    }

    if players {
        let d_fake: Vec<T> = match form {
            AdversarialForm::MinMax => g_log1m_fake.iter().map(|&g| beta * g).collect(),
            AdversarialForm::NonSaturating => g_log_fake.iter().map(|&g| -beta * g).collect(),
        };
        let mut scratch = params.discriminator.zeros_like();
        let g_adv = params
            .discriminator
            .backward(&fake_tape, &d_fake, &mut scratch, true)
            .expect("input grad requested");
        let gamma = T::of(weights.gamma);
        let lambda = T::of(weights.lambda_tv);
        let mut g_t = g_cond.zip_map(&g_tv, |c, t| gamma * (c + lambda * t));
        g_t.data
            .iter_mut()
            .zip(&g_adv.data)
            .for_each(|(g, a)| *g = *g + *a);
        let mut g_dec = params.generator.backward(
            gen_tape.as_ref().expect("taped"),
            g_t,
            inputs.z,
            &mut grads.generator,
        );
        let alpha = T::of(weights.alpha);
        g_dec
            .data
            .iter_mut()
            .zip(&g_decoded.data)
            .for_each(|(g, d)| *g = *g + alpha * *d);
        params.decoder.backward(
            dec_tape.as_ref().expect("taped"),
            g_dec,
            &mut grads.decoder,
            false,
        );
    }
    Ok((out, grads))
}
