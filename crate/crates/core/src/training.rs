//! Alternating adversarial training of the attack networks.
//!
//! An epoch is a whole number of rounds. Each round is one discriminator step
//! followed by `g` joint decoder+generator steps, where `g` decays linearly
//! from `g_steps_per_d_step` to `g_steps_final` over `g_steps_decay_epochs`.
//! The number of rounds is the smallest that covers the training tuples once.
//! Real images shown to the discriminator carry Gaussian instance noise whose
//! standard deviation decays geometrically per epoch.

use std::time::Instant;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attack::{
    objective_gradients, AdversarialForm, AttackArch, AttackParams, GradFor, LossWeights,
    NoiseVector, ObjectiveInputs,
};
use crate::checkpoint::Checkpoint;
use crate::error::{contract, Error, Result};
use crate::image::ImageBatch;
use crate::metrics::{ssim, MetricOptions};
use crate::nn::{Adam, Maps, Params};
use crate::seed;

pub const STATE_FORMAT: &str = "attack-train-state";

/// One (secret, cover, container) triple; each image is a batch of one.
#[derive(Clone, Debug, PartialEq)]
pub struct StegoTuple {
    pub secret: ImageBatch,
    pub cover: ImageBatch,
    pub container: ImageBatch,
    pub id: Option<String>,
}

impl StegoTuple {
    pub fn new(
        secret: ImageBatch,
        cover: ImageBatch,
        container: ImageBatch,
        id: Option<String>,
    ) -> Result<Self> {
        for (name, img) in [("secret", &secret), ("cover", &cover), ("container", &container)] {
            contract!(img.len() == 1, "tuple {name} must hold exactly one image");
        }
        contract!(
            secret.image_shape() == cover.image_shape()
                && cover.image_shape() == container.image_shape(),
            "tuple images differ in shape"
        );
        Ok(Self {
            secret,
            cover,
            container,
            id,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub decoder: f64,
    pub generator: f64,
    pub discriminator: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            decoder: 2e-4,
            generator: 2e-4,
            discriminator: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub arch: AttackArch,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub learning_rates: LearningRates,
    /// Generator steps per discriminator step at epoch 0.
    pub g_steps_per_d_step: usize,
    /// Ratio reached after `g_steps_decay_epochs`; equal to the start value disables decay.
    pub g_steps_final: usize,
    pub g_steps_decay_epochs: usize,
    pub noise_sigma0: f64,
    pub noise_decay: f64,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    pub batch_size: usize,
    /// Share of the tuples held out for validation.
    pub validation_fraction: f64,
    pub adversarial_form: AdversarialForm,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            arch: AttackArch::desk(4),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            learning_rates: LearningRates::default(),
            g_steps_per_d_step: 12,
            g_steps_final: 4,
            g_steps_decay_epochs: 10,
            noise_sigma0: 0.1,
            noise_decay: 0.9,
            max_epochs: 20,
            patience: 5,
            batch_size: 16,
            validation_fraction: 0.1,
            adversarial_form: AdversarialForm::NonSaturating,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0 < self.adam_beta1 && self.adam_beta1 < self.adam_beta2 && self.adam_beta2 < 1.0) {
            return bad(format!(
                "need 0 < adam_beta1 < adam_beta2 < 1, got {} and {}",
                self.adam_beta1, self.adam_beta2
            ));
        }
        let lr = self.learning_rates;
        for (name, v) in [
            ("decoder", lr.decoder),
            ("generator", lr.generator),
            ("discriminator", lr.discriminator),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("learning_rates.{name} must be positive, got {v}"));
            }
        }
        if self.g_steps_per_d_step == 0 || self.g_steps_final == 0 {
            return bad("generator steps per discriminator step must be at least 1".into());
        }
        if !(self.noise_sigma0.is_finite() && self.noise_sigma0 >= 0.0) {
            return bad(format!("noise_sigma0 must be >= 0, got {}", self.noise_sigma0));
        }
        if !(self.noise_decay > 0.0 && self.noise_decay <= 1.0) {
            return bad(format!("noise_decay must lie in (0, 1], got {}", self.noise_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        Ok(())
    }

    /// Generator steps per discriminator step during `epoch`.
    pub fn g_steps_at(&self, epoch: usize) -> usize {
        let (a, b) = (self.g_steps_per_d_step as f64, self.g_steps_final as f64);
        if self.g_steps_decay_epochs == 0 {
            return self.g_steps_final;
        }
        let t = (epoch as f64 / self.g_steps_decay_epochs as f64).min(1.0);
        (a + (b - a) * t).round().max(1.0) as usize
    }
}

/// `noise_sigma0 * noise_decay^epoch`.
pub fn anneal_noise(epoch: usize, schedule: &TrainSchedule) -> f64 {
    schedule.noise_sigma0 * schedule.noise_decay.powi(epoch.min(i32::MAX as usize) as i32)
}

fn noise_in_place<R: Rng + ?Sized>(data: &mut [f32], sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    for v in data {
        *v = (*v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise and clamps back into `[0, 1]`.
pub fn add_instance_noise<R: Rng + ?Sized>(
    batch: &ImageBatch,
    sigma: f64,
    rng: &mut R,
) -> Result<ImageBatch> {
    contract!(
        sigma.is_finite() && sigma >= 0.0,
        "instance noise sigma must be finite and >= 0, got {sigma}"
    );
    let mut data = batch.data().clone();
    noise_in_place(data.as_slice_mut().expect("standard layout"), sigma, rng);
    ImageBatch::new(data)
}

/// `(decoded, transferred)` with the noise drawn from `z_seed`.
pub fn run_attack(
    cover: &ImageBatch,
    container: &ImageBatch,
    params: &AttackParams,
    z_seed: u64,
) -> Result<(ImageBatch, ImageBatch)> {
    let decoded = params.decode(cover, container)?;
    let z = NoiseVector::from_seed(cover.len(), params.arch.noise_dim, z_seed);
    let transferred = params.transfer(&decoded, &z)?;
    Ok((decoded, transferred))
}

/// One generator step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_t: f64,
    pub loss_c: f64,
    pub total: f64,
    pub sigma: f64,
    /// Validation scores measured at the end of this step's epoch.
    pub val_ssim_decoded: f64,
    pub val_ssim_transferred: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub d_steps: usize,
    pub g_steps: usize,
    pub g_steps_per_d_step: usize,
    pub sigma: f64,
    /// Mean `beta * L_t` seen by the discriminator steps.
    pub adversary: f64,
    pub val_ssim_decoded: f64,
    pub val_ssim_transferred: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: Option<usize>,
}

pub const LOG_HEADER: &str =
    "step,epoch,loss_d,loss_t,loss_c,total,sigma,val_ssim_decoded,val_ssim_transferred,seconds";
pub const EPOCH_HEADER: &str = "epoch,d_steps,g_steps,g_steps_per_d_step,sigma,adversary,val_ssim_decoded,val_ssim_transferred,seconds";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.step,
                r.epoch,
                r.loss_d,
                r.loss_t,
                r.loss_c,
                r.total,
                r.sigma,
                r.val_ssim_decoded,
                r.val_ssim_transferred,
                r.seconds
            ));
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = String::from(EPOCH_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                e.epoch,
                e.d_steps,
                e.g_steps,
                e.g_steps_per_d_step,
                e.sigma,
                e.adversary,
                e.val_ssim_decoded,
                e.val_ssim_transferred,
                e.seconds
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(Error::Format("training log CSV has an unexpected header".into()));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("training log line {}: malformed", i + 2));
            if f.len() != 10 {
                return Err(bad());
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad());
            records.push(StepRecord {
                step: f[0].parse().map_err(|_| bad())?,
                epoch: f[1].parse().map_err(|_| bad())?,
                loss_d: num(2)?,
                loss_t: num(3)?,
                loss_c: num(4)?,
                total: num(5)?,
                sigma: num(6)?,
                val_ssim_decoded: num(7)?,
                val_ssim_transferred: num(8)?,
                seconds: num(9)?,
            });
        }
        Ok(Self {
            records,
            ..Self::default()
        })
    }

    /// The log with wall-clock columns zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        let mut log = self.clone();
        log.records.iter_mut().for_each(|r| r.seconds = 0.0);
        log.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        log
    }
}

/// The networks trained by each optimizer.
#[derive(Clone, Debug, PartialEq)]
struct Optimizers {
    decoder: Adam<f32>,
    generator: Adam<f32>,
    discriminator: Adam<f32>,
}

#[derive(Clone, Debug)]
struct TrainState {
    params: AttackParams,
    best: AttackParams,
    opt: Optimizers,
    meta: StateMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StateMeta {
    schedule: TrainSchedule,
    weights: LossWeights,
    n_tuples: usize,
    n_real: usize,
    epoch: usize,
    step: u64,
    best_val: Option<f64>,
    since_best: usize,
    stopped: bool,
    elapsed: f64,
    log: TrainLog,
}

/// Stacked training data, indexable by tuple.
struct Pools {
    train_secret: Array4<f32>,
    train_cover: Array4<f32>,
    train_container: Array4<f32>,
    val: Vec<StegoTuple>,
    real: Array4<f32>,
}

fn stack(images: impl IntoIterator<Item = ImageBatch>) -> Result<Array4<f32>> {
    let items: Vec<ImageBatch> = images.into_iter().collect();
    Ok(ImageBatch::stack(items.iter())?.into_inner())
}

fn gather(pool: &Array4<f32>, idx: &[usize]) -> Maps<f32> {
    Maps::from_nchw(pool.select(Axis(0), idx).view())
}

/// Deterministic split of `n` tuples into (train, validation) indices.
pub fn split_indices(n: usize, validation_fraction: f64, seed_value: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed_value, "attack-split", 0));
    let n_val = ((n as f64 * validation_fraction).round() as usize).clamp(1, n.saturating_sub(1));
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Owns the whole training state; advances one epoch at a time so callers can
/// checkpoint between epochs.
pub struct AttackTrainer {
    pools: Pools,
    state: TrainState,
    started: Instant,
}

impl AttackTrainer {
    pub fn new(
        tuples: &[StegoTuple],
        real_images: &[ImageBatch],
        weights: LossWeights,
        schedule: TrainSchedule,
    ) -> Result<Self> {
        schedule.validate()?;
        weights.validate()?;
        let pools = Self::pools(tuples, real_images, &schedule)?;
        let params = AttackParams::<f32>::init(schedule.arch, seed::derive(schedule.seed, "attack-params", 0));
        let b = (schedule.adam_beta1, schedule.adam_beta2);
        let lr = schedule.learning_rates;
        let opt = Optimizers {
            decoder: Adam::new(&params.decoder, lr.decoder, b.0, b.1),
            generator: Adam::new(&params.generator, lr.generator, b.0, b.1),
            discriminator: Adam::new(&params.discriminator, lr.discriminator, b.0, b.1),
        };
        let meta = StateMeta {
            n_tuples: tuples.len(),
            n_real: pools.real.dim().0,
            schedule,
            weights,
            epoch: 0,
            step: 0,
            best_val: None,
            since_best: 0,
            stopped: false,
            elapsed: 0.0,
            log: TrainLog::default(),
        };
        Ok(Self {
            pools,
            state: TrainState {
                best: params.clone(),
                params,
                opt,
                meta,
            },
            started: Instant::now(),
        })
    }

    fn pools(tuples: &[StegoTuple], real_images: &[ImageBatch], schedule: &TrainSchedule) -> Result<Pools> {
        if tuples.len() < 2 {
            return Err(Error::Config(format!(
                "attack training needs at least 2 tuples, got {}",
                tuples.len()
            )));
        }
        let real: Vec<ImageBatch> = real_images.iter().flat_map(|b| b.items()).collect();
        if real.is_empty() {
            return Err(Error::Config(
                "attack training needs real images for the discriminator".into(),
            ));
        }
        let want = (schedule.arch.channels, schedule.arch.image_size);
        for t in tuples {
            contract!(
                t.secret.image_shape() == want,
                "tuple image shape {:?} does not match attack architecture {want:?}",
                t.secret.image_shape()
            );
        }
        for r in &real {
            contract!(
                r.image_shape() == want,
                "real image shape {:?} does not match attack architecture {want:?}",
                r.image_shape()
            );
        }
        let (train, val) = split_indices(tuples.len(), schedule.validation_fraction, schedule.seed);
        Ok(Pools {
            train_secret: stack(train.iter().map(|&i| tuples[i].secret.clone()))?,
            train_cover: stack(train.iter().map(|&i| tuples[i].cover.clone()))?,
            train_container: stack(train.iter().map(|&i| tuples[i].container.clone()))?,
            val: val.iter().map(|&i| tuples[i].clone()).collect(),
            real: stack(real)?,
        })
    }

    /// Continues from a state saved by [`AttackTrainer::state_checkpoint`].
    /// `schedule` may differ from the saved one only in `max_epochs` and `patience`.
    pub fn resume(
        tuples: &[StegoTuple],
        real_images: &[ImageBatch],
        weights: LossWeights,
        schedule: TrainSchedule,
        state: &Checkpoint,
    ) -> Result<Self> {
        state.expect_format(STATE_FORMAT)?;
        let mut meta: StateMeta = serde_json::from_value(state.meta.clone())
            .map_err(|e| Error::Format(format!("training state: {e}")))?;
        let mut fresh = Self::new(tuples, real_images, weights, schedule.clone())?;
        let mut comparable = schedule.clone();
        comparable.max_epochs = meta.schedule.max_epochs;
        comparable.patience = meta.schedule.patience;
        if comparable != meta.schedule || weights != meta.weights {
            return Err(Error::Config(
                "training state was written with a different schedule or loss weights \
                 (only max_epochs and patience may change on resume)"
                    .into(),
            ));
        }
        if meta.n_tuples != tuples.len() || meta.n_real != fresh.pools.real.dim().0 {
            return Err(Error::Config(format!(
                "training state was written for {} tuples and {} real images, got {} and {}",
                meta.n_tuples,
                meta.n_real,
                tuples.len(),
                fresh.pools.real.dim().0
            )));
        }
        let arch = schedule.arch;
        let params = AttackParams::read_tensors(state, arch, "params.")?;
        let best = AttackParams::read_tensors(state, arch, "best.")?;
        let mut opt = fresh.state.opt.clone();
        read_adam(state, "adam.decoder", &mut opt.decoder)?;
        read_adam(state, "adam.generator", &mut opt.generator)?;
        read_adam(state, "adam.discriminator", &mut opt.discriminator)?;
        meta.schedule = schedule;
        if meta.schedule.patience > 0 && meta.since_best < meta.schedule.patience {
            meta.stopped = false;
        }
        fresh.state = TrainState {
            params,
            best,
            opt,
            meta,
        };
        Ok(fresh)
    }

    pub fn state_checkpoint(&self) -> Checkpoint {
        let s = &self.state;
        let mut meta = s.meta.clone();
        meta.elapsed = self.elapsed();
        let mut ck = Checkpoint::new(
            STATE_FORMAT,
            serde_json::to_value(&meta).expect("training state serializes"),
        );
        s.params.push_tensors(&mut ck, "params.");
        s.best.push_tensors(&mut ck, "best.");
        push_adam(&mut ck, "adam.decoder", &s.opt.decoder);
        push_adam(&mut ck, "adam.generator", &s.opt.generator);
        push_adam(&mut ck, "adam.discriminator", &s.opt.discriminator);
        ck
    }

    fn elapsed(&self) -> f64 {
        self.state.meta.elapsed + self.started.elapsed().as_secs_f64()
    }

    pub fn epoch(&self) -> usize {
        self.state.meta.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.state.meta.stopped || self.state.meta.epoch >= self.state.meta.schedule.max_epochs
    }

    pub fn log(&self) -> &TrainLog {
        &self.state.meta.log
    }

    /// Parameters with the best validation score so far.
    pub fn best_params(&self) -> &AttackParams {
        &self.state.best
    }

    /// Runs one epoch. On a non-finite loss the trainer keeps the state from
    /// the start of the epoch and returns [`Error::NonFinite`].
    pub fn run_epoch(&mut self) -> Result<()> {
        if self.is_finished() {
            return Ok(());
        }
        let mut next = self.state.clone();
        self.epoch_into(&mut next)?;
        self.state = next;
        Ok(())
    }

    /// Runs epochs until done, calling `after_epoch` after each one.
    pub fn run(&mut self, mut after_epoch: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch()?;
            after_epoch(self)?;
        }
        Ok(())
    }

    pub fn finish(self) -> (AttackParams, TrainLog) {
        (self.state.best, self.state.meta.log)
    }

    fn epoch_into(&self, st: &mut TrainState) -> Result<()> {
        let sched = st.meta.schedule.clone();
        let weights = st.meta.weights;
        let epoch = st.meta.epoch;
        let mut rng = seed::rng(sched.seed, "attack-epoch", epoch as u64);
        let sigma = anneal_noise(epoch, &sched);
        let ratio = sched.g_steps_at(epoch);
        let bs = sched.batch_size;
        let n_train = self.pools.train_secret.dim().0;
        let n_real = self.pools.real.dim().0;
        let batches = n_train.div_ceil(bs);
        let rounds = batches.div_ceil(ratio).max(1);

        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng);
        let mut real_order: Vec<usize> = (0..n_real).collect();
        real_order.shuffle(&mut rng);
        let mut cursor = 0;
        let mut real_cursor = 0;
        let next_batch = |order: &[usize], cursor: &mut usize, n: usize| -> Vec<usize> {
            let idx: Vec<usize> = (0..bs.min(n)).map(|k| order[(*cursor + k) % n]).collect();
            *cursor = (*cursor + idx.len()) % n;
            idx
        };

        let first_record = st.meta.log.records.len();
        let mut adversary_sum = 0.0;
        let mut g_count = 0;
        let nonfinite = |what: &str, step: u64| Error::NonFinite {
            what: what.into(),
            step,
            hint: format!(
                "training state is kept at the start of epoch {epoch}; try smaller learning rates"
            ),
        };
        for _ in 0..rounds {
            // discriminator step
            let idx = next_batch(&order, &mut cursor, n_train);
            let ridx = next_batch(&real_order, &mut real_cursor, n_real);
            let mut real = gather(&self.pools.real, &ridx);
            noise_in_place(&mut real.data, sigma, &mut rng);
            let z: Vec<f32> = NoiseVector::sample(idx.len(), sched.arch.noise_dim, &mut rng).flat();
            let inputs = ObjectiveInputs {
                cover: &gather(&self.pools.train_cover, &idx),
                container: &gather(&self.pools.train_container, &idx),
                secret: &gather(&self.pools.train_secret, &idx),
                real: &real,
                z: &z,
            };
            let (terms, mut grads) =
                objective_gradients(&st.params, &inputs, &weights, sched.adversarial_form, GradFor::Discriminator)?;
            if !terms.adversary.is_finite() || !grads.discriminator.all_finite() {
                return Err(nonfinite("discriminator objective", st.meta.step));
            }
            // ascend beta * L_t
            for t in grads.discriminator.tensors_mut() {
                t.iter_mut().for_each(|v| *v = -*v);
            }
            st.opt
                .discriminator
                .step(&mut st.params.discriminator, &grads.discriminator);
            if !st.params.discriminator.all_finite() {
                return Err(nonfinite("discriminator parameters", st.meta.step));
            }
            adversary_sum += terms.adversary;

            for _ in 0..ratio {
                let idx = next_batch(&order, &mut cursor, n_train);
                let ridx = next_batch(&real_order, &mut real_cursor, n_real);
                let mut real = gather(&self.pools.real, &ridx);
                noise_in_place(&mut real.data, sigma, &mut rng);
                let z: Vec<f32> =
                    NoiseVector::sample(idx.len(), sched.arch.noise_dim, &mut rng).flat();
                let inputs = ObjectiveInputs {
                    cover: &gather(&self.pools.train_cover, &idx),
                    container: &gather(&self.pools.train_container, &idx),
                    secret: &gather(&self.pools.train_secret, &idx),
                    real: &real,
                    z: &z,
                };
                let (terms, grads) = objective_gradients(
                    &st.params,
                    &inputs,
                    &weights,
                    sched.adversarial_form,
                    GradFor::DecoderGenerator,
                )?;
                st.meta.step += 1;
                if !terms.total.is_finite()
                    || !terms.generator_objective.is_finite()
                    || !grads.decoder.all_finite()
                    || !grads.generator.all_finite()
                {
                    return Err(nonfinite("decoder/generator objective", st.meta.step));
                }
                st.opt.decoder.step(&mut st.params.decoder, &grads.decoder);
                st.opt
                    .generator
                    .step(&mut st.params.generator, &grads.generator);
                if !st.params.decoder.all_finite() || !st.params.generator.all_finite() {
                    return Err(nonfinite("decoder/generator parameters", st.meta.step));
                }
                g_count += 1;
                st.meta.log.records.push(StepRecord {
                    step: st.meta.step,
                    epoch,
                    loss_d: terms.decoding,
                    loss_t: terms.transfer,
                    loss_c: terms.conditional,
                    total: terms.total,
                    sigma,
                    val_ssim_decoded: 0.0,
                    val_ssim_transferred: 0.0,
                    seconds: self.elapsed(),
                });
            }
        }

        let (val_d, val_t) = validation_ssim(&st.params, &self.pools.val, sched.seed)?;
        for r in &mut st.meta.log.records[first_record..] {
            r.val_ssim_decoded = val_d;
            r.val_ssim_transferred = val_t;
        }
        st.meta.log.epochs.push(EpochRecord {
            epoch,
            d_steps: rounds,
            g_steps: g_count,
            g_steps_per_d_step: ratio,
            sigma,
            adversary: adversary_sum / rounds as f64,
            val_ssim_decoded: val_d,
            val_ssim_transferred: val_t,
            seconds: self.elapsed(),
        });
        log::info!(
            "attack epoch {epoch}: {rounds} D / {g_count} G steps, sigma {sigma:.4}, val SSIM decoded {val_d:.4} transferred {val_t:.4}"
        );

        if st.meta.best_val.is_none_or(|b| val_t > b) {
            st.meta.best_val = Some(val_t);
            st.meta.since_best = 0;
            st.best = st.params.clone();
            st.meta.log.best_epoch = Some(epoch);
        } else {
            st.meta.since_best += 1;
            if sched.patience > 0 && st.meta.since_best >= sched.patience {
                log::info!("early stop after epoch {epoch}; best epoch {:?}", st.meta.log.best_epoch);
                st.meta.stopped = true;
            }
        }
        st.meta.epoch += 1;
        Ok(())
    }
}

/// Mean SSIM of (decoded, transferred) against the secret over `tuples`,
/// with noise fixed by `seed_value`.
pub fn validation_ssim(params: &AttackParams, tuples: &[StegoTuple], seed_value: u64) -> Result<(f64, f64)> {
    let opts = MetricOptions::default();
    let z_seed = seed::derive(seed_value, "validation-noise", 0);
    let (mut sd, mut st) = (0.0, 0.0);
    for chunk in tuples.chunks(64) {
        let cover = ImageBatch::stack(chunk.iter().map(|t| &t.cover))?;
        let container = ImageBatch::stack(chunk.iter().map(|t| &t.container))?;
        let (dec, tr) = run_attack(&cover, &container, params, z_seed)?;
        for (i, t) in chunk.iter().enumerate() {
            sd += ssim(&dec.item(i), &t.secret, &opts)?;
            st += ssim(&tr.item(i), &t.secret, &opts)?;
        }
    }
    let n = tuples.len() as f64;
    Ok((sd / n, st / n))
}

fn push_adam(ck: &mut Checkpoint, prefix: &str, adam: &Adam<f32>) {
    for (i, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
        ck.push(format!("{prefix}.m.{i}"), vec![m.len()], m.clone());
        ck.push(format!("{prefix}.v.{i}"), vec![v.len()], v.clone());
    }
    // the step count is exact in f32 well past any realistic run length
    ck.push(format!("{prefix}.step"), vec![2], {
        let s = adam.step;
        vec![(s >> 32) as u32 as f32, (s & 0xffff_ffff) as u32 as f32]
    });
}

fn read_adam(ck: &Checkpoint, prefix: &str, adam: &mut Adam<f32>) -> Result<()> {
    for i in 0..adam.m.len() {
        for (kind, buf) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
            let t = ck.tensor(&format!("{prefix}.{kind}.{i}"))?;
            if t.data.len() != buf.len() {
                return Err(Error::Format(format!("optimizer tensor {prefix}.{kind}.{i} has wrong length")));
            }
            buf.copy_from_slice(&t.data);
        }
    }
    let s = &ck.tensor(&format!("{prefix}.step"))?.data;
    if s.len() != 2 {
        return Err(Error::Format(format!("optimizer step {prefix}.step is malformed")));
    }
    adam.step = ((s[0] as u64) << 32) | s[1] as u64;
    Ok(())
}

/// Trains the attack to completion (or early stop) and returns the
/// best-validation parameters with the full log.
pub fn train_attack(
    tuples: &[StegoTuple],
    real_images: &[ImageBatch],
    weights: LossWeights,
    schedule: TrainSchedule,
) -> Result<(AttackParams, TrainLog)> {
    let mut trainer = AttackTrainer::new(tuples, real_images, weights, schedule)?;
    trainer.run(|_| Ok(()))?;
    Ok(trainer.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{OracleArch, OracleParams};
    use crate::synth::SyntheticImages;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anneal_examples() {
        let s = TrainSchedule::default();
        assert_eq!(anneal_noise(0, &s), 0.1);
        assert!((anneal_noise(2, &s) - 0.081).abs() < 1e-15);
        let zero = TrainSchedule {
            noise_sigma0: 0.0,
            ..s
        };
        assert!((0..50).all(|e| anneal_noise(e, &zero) == 0.0));
    }

    #[test]
    fn instance_noise_identity_and_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = SyntheticImages::new(0, 16, 4).batch(0, 2);
        assert_eq!(add_instance_noise(&img, 0.0, &mut rng).unwrap(), img);
        let one = ImageBatch::constant(1, 4, 16, 1.0).unwrap();
        let noisy = add_instance_noise(&one, 0.5, &mut rng).unwrap();
        assert!(noisy.data().iter().all(|&v| v <= 1.0));
        assert!(add_instance_noise(&img, -1.0, &mut rng).is_err());
    }

    #[test]
    fn g_step_schedule() {
        let s = TrainSchedule::default();
        assert_eq!(s.g_steps_at(0), 12);
        assert_eq!(s.g_steps_at(5), 8);
        assert_eq!(s.g_steps_at(10), 4);
        assert_eq!(s.g_steps_at(100), 4);
        assert!((0..30).all(|e| s.g_steps_at(e + 1) <= s.g_steps_at(e)));
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let (a, b) = split_indices(50, 0.1, 3);
        assert_eq!((a.len(), b.len()), (45, 5));
        assert!(a.iter().all(|i| !b.contains(i)));
        assert_eq!(split_indices(50, 0.1, 3), (a, b));
        assert_eq!(split_indices(2, 0.1, 0).1.len(), 1);
    }

    pub(crate) fn tiny_setup(n: usize) -> (Vec<StegoTuple>, Vec<ImageBatch>, TrainSchedule) {
        let arch = AttackArch {
            channels: 4,
            image_size: 12,
            noise_dim: 3,
            decoder_hidden: 3,
            generator_hidden: 3,
            discriminator_hidden: 2,
        };
        let oracle = OracleParams::<f32>::init(
            OracleArch {
                channels: 4,
                image_size: 12,
                hidden: 3,
                features: 2,
            },
            0,
        );
        let gen = SyntheticImages::new(5, 12, 4);
        let tuples = (0..n)
            .map(|i| {
                let s = gen.image(i as u64);
                let c = gen.image(1000 + i as u64);
                let cont = oracle.embed(&s, &c).unwrap();
                StegoTuple::new(s, c, cont, None).unwrap()
            })
            .collect();
        let real = vec![SyntheticImages::new(6, 12, 4).batch(0, 8)];
        let sched = TrainSchedule {
            arch,
            max_epochs: 3,
            batch_size: 4,
            g_steps_per_d_step: 3,
            g_steps_final: 1,
            g_steps_decay_epochs: 2,
            validation_fraction: 0.25,
            ..TrainSchedule::default()
        };
        (tuples, real, sched)
    }

    #[test]
    fn accounting_determinism_and_degenerate_cases() {
        let (tuples, real, sched) = tiny_setup(12);
        let w = LossWeights::default();
        let (p1, log1) = train_attack(&tuples, &real, w, sched.clone()).unwrap();
        let (p2, log2) = train_attack(&tuples, &real, w, sched.clone()).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(log1.without_timing(), log2.without_timing());
        for e in &log1.epochs {
            assert_eq!(e.g_steps, e.g_steps_per_d_step * e.d_steps);
            let steps = log1.records.iter().filter(|r| r.epoch == e.epoch).count();
            assert_eq!(steps, e.g_steps);
        }
        let back = TrainLog::from_csv(&log1.to_csv()).unwrap();
        assert_eq!(back.records, log1.records);

        let zero = TrainSchedule {
            max_epochs: 0,
            ..sched.clone()
        };
        let (p0, log0) = train_attack(&tuples, &real, w, zero).unwrap();
        assert!(log0.records.is_empty() && log0.epochs.is_empty());
        assert_eq!(p0, AttackParams::init(sched.arch, seed::derive(sched.seed, "attack-params", 0)));

        assert!(matches!(
            train_attack(&tuples, &[], w, sched.clone()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            train_attack(&tuples[..1], &real, w, sched),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn resume_matches_straight_run() {
        let (tuples, real, sched) = tiny_setup(10);
        let w = LossWeights::default();
        let (p_straight, log_straight) = train_attack(&tuples, &real, w, sched.clone()).unwrap();

        let first = TrainSchedule {
            max_epochs: 1,
            ..sched.clone()
        };
        let mut t = AttackTrainer::new(&tuples, &real, w, first).unwrap();
        t.run(|_| Ok(())).unwrap();
        let bytes = t.state_checkpoint().to_bytes();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let mut t = AttackTrainer::resume(&tuples, &real, w, sched.clone(), &ck).unwrap();
        t.run(|_| Ok(())).unwrap();
        let (p_resumed, log_resumed) = t.finish();
        assert_eq!(p_straight, p_resumed);
        assert_eq!(log_straight.without_timing(), log_resumed.without_timing());

        let other = TrainSchedule {
            batch_size: 2,
            ..sched
        };
        assert!(AttackTrainer::resume(&tuples, &real, w, other, &ck).is_err());
    }

    #[test]
    fn nonfinite_keeps_last_good_state() {
        let (tuples, real, mut sched) = tiny_setup(8);
        sched.max_epochs = 2;
        let w = LossWeights::default();
        let mut t = AttackTrainer::new(&tuples, &real, w, sched).unwrap();
        t.run_epoch().unwrap();
        let before = t.state_checkpoint().tensors;
        t.state.params.decoder.layers[0].weight[0] = f32::NAN;
        let err = t.run_epoch().unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
        assert_eq!(t.epoch(), 1);
        t.state.params.decoder.layers[0].weight[0] = before[0].data[0];
        assert_eq!(t.state_checkpoint().tensors, before);
    }
}
