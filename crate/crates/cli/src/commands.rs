use std::path::Path;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use stegattack::attack::AttackParams;
use stegattack::checkpoint::Checkpoint;
use stegattack::dataset::{load_dataset, make_tuples, Dataset, DatasetSpec, Split};
use stegattack::image::{load_image, save_image, ImageBatch};
use stegattack::metrics::{evaluate_with_outputs, psnr, ssim, MetricOptions};
use stegattack::oracle::{train_oracle as fit_oracle, OracleEpoch, OracleParams};
use stegattack::synth::SyntheticImages;
use stegattack::training::{run_attack, AttackTrainer, StegoTuple, TrainLog};
use stegattack::Error;

use crate::archive::{read_archive, write_archive};
use crate::config::Config;
use crate::figures::{line_plot, write_panels};

const SPLITS: [(&str, Split); 2] = [("train", Split::Train), ("test", Split::Test)];

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn spec(config: &Config) -> Result<DatasetSpec> {
    config.data_root()?;
    Ok(config.dataset.clone())
}

fn images(loaded: Vec<(std::path::PathBuf, ImageBatch)>) -> Vec<ImageBatch> {
    loaded.into_iter().map(|(_, img)| img).collect()
}

fn metric_options(config: &Config) -> MetricOptions {
    MetricOptions {
        include_alpha: config.evaluate.include_alpha,
        ..MetricOptions::default()
    }
}

fn check_shape(what: &str, size: usize, channels: usize, config: &Config) -> Result<()> {
    let d = &config.dataset;
    if size != d.image_size || channels != d.channels {
        bail!(
            "{what} expects {channels}-channel {size}x{size} images but the dataset is \
             {}-channel {}x{}",
            d.channels,
            d.image_size,
            d.image_size
        );
    }
    Ok(())
}

fn load_oracle(config: &Config) -> Result<OracleParams> {
    let path = config.oracle_checkpoint();
    if !path.is_file() {
        bail!(Error::Config(format!(
            "no oracle checkpoint at {} (run train-oracle first)",
            path.display()
        )));
    }
    Ok(OracleParams::load(&path)?)
}

fn load_attack(config: &Config) -> Result<AttackParams> {
    let path = config.attack_checkpoint();
    if !path.is_file() {
        bail!(Error::Config(format!(
            "no attack checkpoint at {} (run train-attack first)",
            path.display()
        )));
    }
    Ok(AttackParams::load(&path)?)
}

pub fn synth_images(config: &Config, count: usize) -> Result<()> {
    let root = config.data_root()?;
    create_dir(root)?;
    let d = &config.dataset;
    let gen = SyntheticImages::new(stegattack::seed::derive(config.seed, "synth", 0), d.image_size, d.channels);
    for i in 0..count {
        save_image(&gen.image(i as u64), root.join(format!("synth_{i:06}.png")))?;
    }
    info!("wrote {count} images to {}", root.display());
    Ok(())
}

pub fn train_oracle(config: &Config) -> Result<()> {
    let arch = config.oracle.arch;
    check_shape("the oracle", arch.image_size, arch.channels, config)?;
    let dataset = Dataset::open(&spec(config)?)?;
    let train = images(dataset.load(Split::Train)?);
    info!("training the hiding model on {} images", train.len());
    let (params, log) = fit_oracle(&train, &config.oracle)?;
    for e in &log.epochs {
        info!(
            "epoch {}: joint {:.5} cover_mse {:.5} reveal_mse {:.5}",
            e.epoch, e.joint, e.cover_mse, e.reveal_mse
        );
    }
    create_dir(&config.checkpoint_dir())?;
    params.save(config.oracle_checkpoint())?;
    let reports = config.report_dir();
    create_dir(&reports)?;
    let path = reports.join("oracle_log.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    for e in &log.epochs {
        w.serialize(e)?;
    }
    w.flush()?;
    info!("checkpoint {}", config.oracle_checkpoint().display());
    Ok(())
}

/// Train and test tuples come from the matching dataset splits. Within each
/// split, secrets are drawn from the first half and covers from the second,
/// so the two pools never share a file.
pub fn generate_dataset(config: &Config) -> Result<()> {
    let oracle = load_oracle(config)?;
    check_shape("the oracle checkpoint", oracle.arch.image_size, oracle.arch.channels, config)?;
    let dataset = Dataset::open(&spec(config)?)?;
    for (name, split) in SPLITS {
        let budget = match split {
            Split::Train => config.tuples.train_budget,
            _ => config.tuples.test_budget,
        };
        let pool = images(dataset.load(split)?);
        let (secrets, covers) = pool.split_at(pool.len() / 2);
        let tuples = make_tuples(secrets, covers, &oracle, budget)
            .with_context(|| format!("building the {name} archive from {} {name}-split images", pool.len()))?;
        let dir = config.tuple_dir(name);
        if dir.join(crate::archive::MANIFEST).is_file() {
            std::fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        write_archive(&dir, &tuples)?;
        info!("{name}: {} tuples in {}", tuples.len(), dir.display());
    }
    Ok(())
}

fn real_images(config: &Config) -> Result<Vec<ImageBatch>> {
    match &config.tuples.real_root {
        Some(root) => Ok(load_dataset(&DatasetSpec {
            root_path: root.clone(),
            ..config.dataset.clone()
        })?),
        None => Ok(images(Dataset::open(&spec(config)?)?.load(Split::Validation)?)),
    }
}

fn train_tuples(config: &Config) -> Result<Vec<StegoTuple>> {
    let d = &config.dataset;
    read_archive(&config.tuple_dir("train"), d.image_size, d.channels)
}

fn write_train_logs(config: &Config, log: &TrainLog) -> Result<()> {
    let reports = config.report_dir();
    create_dir(&reports)?;
    write_text(&reports.join("train_log.csv"), &log.to_csv())?;
    write_text(&reports.join("epochs.csv"), &log.epochs_csv())
}

pub fn train_attack(config: &Config, resume: bool) -> Result<()> {
    let a = &config.attack;
    check_shape("the attack", a.schedule.arch.image_size, a.schedule.arch.channels, config)?;
    let tuples = train_tuples(config)?;
    let real = real_images(config)?;
    info!("{} training tuples, {} real images", tuples.len(), real.len());
    let state_path = config.attack_state();
    let mut trainer = if resume {
        if !state_path.is_file() {
            bail!("--resume given but no training state at {}", state_path.display());
        }
        let state = Checkpoint::load(&state_path)?;
        let t = AttackTrainer::resume(&tuples, &real, a.weights, a.schedule.clone(), &state)?;
        info!("resuming after epoch {}", t.epoch());
        t
    } else {
        AttackTrainer::new(&tuples, &real, a.weights, a.schedule.clone())?
    };
    create_dir(&config.checkpoint_dir())?;
    let every = a.checkpoint_every.max(1);
    while !trainer.is_finished() {
        if let Err(e) = trainer.run_epoch() {
            // keep the last good state so the run can be inspected or resumed
            trainer.state_checkpoint().save(&state_path)?;
            trainer.best_params().save(config.attack_checkpoint())?;
            write_train_logs(config, trainer.log())?;
            return Err(e).context(format!("training aborted; last good state in {}", state_path.display()));
        }
        if let Some(e) = trainer.log().epochs.last() {
            info!(
                "epoch {}: sigma {:.4} g/d {} val ssim decoded {:.4} transferred {:.4} ({:.0}s)",
                e.epoch, e.sigma, e.g_steps_per_d_step, e.val_ssim_decoded, e.val_ssim_transferred, e.seconds
            );
        }
        if trainer.epoch() % every == 0 {
            trainer.state_checkpoint().save(&state_path)?;
        }
    }
    trainer.state_checkpoint().save(&state_path)?;
    if let Some(best) = trainer.log().best_epoch {
        info!("best validation epoch {best}");
    }
    trainer.best_params().save(config.attack_checkpoint())?;
    write_train_logs(config, trainer.log())?;
    info!("checkpoint {}", config.attack_checkpoint().display());
    Ok(())
}

fn load_exact(path: &Path, size: usize, channels: usize) -> Result<ImageBatch> {
    let (w, h) = image::image_dimensions(path).with_context(|| format!("reading {}", path.display()))?;
    if (w as usize, h as usize) != (size, size) {
        bail!("{} is {w}x{h} but the attack checkpoint expects {size}x{size}", path.display());
    }
    Ok(load_image(path, size, channels)?)
}

pub fn attack(config: &Config, cover: &Path, container: &Path, secret: Option<&Path>) -> Result<()> {
    let params = load_attack(config)?;
    let (size, channels) = (params.arch.image_size, params.arch.channels);
    let cover = load_exact(cover, size, channels)?;
    let container = load_exact(container, size, channels)?;
    let (decoded, transferred) = run_attack(&cover, &container, &params, config.attack_noise_seed())?;
    let dir = config.paths.out_dir.join("attack");
    create_dir(&dir)?;
    save_image(&decoded, dir.join("decoded.png"))?;
    save_image(&transferred, dir.join("transferred.png"))?;
    println!("decoded {}", dir.join("decoded.png").display());
    println!("transferred {}", dir.join("transferred.png").display());
    if let Some(path) = secret {
        let secret = load_exact(path, size, channels)?;
        let o = metric_options(config);
        println!("psnr_db {}", psnr(&transferred, &secret, &o)?);
        println!("ssim_transferred {}", ssim(&transferred, &secret, &o)?);
        println!("ssim_decoded {}", ssim(&decoded, &secret, &o)?);
    }
    Ok(())
}

pub fn evaluate(config: &Config) -> Result<()> {
    let params = load_attack(config)?;
    let d = &config.dataset;
    check_shape("the attack checkpoint", params.arch.image_size, params.arch.channels, config)?;
    let tuples = read_archive(&config.tuple_dir("test"), d.image_size, d.channels)?;
    let (report, outputs) =
        evaluate_with_outputs(&params, &tuples, config.evaluation_seed(), "test", &metric_options(config))?;
    if report.n_infinite_psnr > 0 {
        warn!("{} tuples reproduced the secret exactly; their PSNR is excluded from the mean", report.n_infinite_psnr);
    }
    report.write(config.report_dir(), "report")?;
    let triples: Vec<[ImageBatch; 3]> = tuples
        .iter()
        .zip(outputs)
        .map(|(t, (dec, tr))| [t.secret.clone(), dec, tr])
        .collect();
    let panels = write_panels(&config.panel_dir(), &triples, config.evaluate.panel_row_width)?;
    println!(
        "n_images {} mean_psnr_db {:.3} mean_ssim_transferred {:.4} mean_ssim_decoded {:.4}",
        report.n_images, report.mean_psnr_db, report.mean_ssim_transferred, report.mean_ssim_decoded
    );
    println!("{} panels in {}", panels.len(), config.panel_dir().display());
    Ok(())
}

pub fn report(config: &Config) -> Result<()> {
    let reports = config.report_dir();
    let figures = config.figure_dir();
    let mut written = Vec::new();
    let train_log = reports.join("train_log.csv");
    let oracle_log = reports.join("oracle_log.csv");
    if !train_log.is_file() && !oracle_log.is_file() {
        bail!("no training logs in {} (run train-oracle or train-attack first)", reports.display());
    }
    create_dir(&figures)?;
    if train_log.is_file() {
        let text = std::fs::read_to_string(&train_log).with_context(|| format!("reading {}", train_log.display()))?;
        let log = TrainLog::from_csv(&text)?;
        let curve = |f: fn(&stegattack::training::StepRecord) -> f64| {
            log.records.iter().map(|r| (r.step as f64, f(r))).collect::<Vec<_>>()
        };
        for (name, series) in [
            ("loss_d", vec![curve(|r| r.loss_d)]),
            ("loss_t", vec![curve(|r| r.loss_t)]),
            ("loss_c", vec![curve(|r| r.loss_c)]),
            ("total", vec![curve(|r| r.total)]),
            ("val_ssim", vec![curve(|r| r.val_ssim_decoded), curve(|r| r.val_ssim_transferred)]),
        ] {
            let path = figures.join(format!("{name}.png"));
            line_plot(&path, &series)?;
            written.push(path);
        }
    }
    if oracle_log.is_file() {
        let mut r = csv::Reader::from_path(&oracle_log).with_context(|| format!("reading {}", oracle_log.display()))?;
        let epochs = r.deserialize().collect::<Result<Vec<OracleEpoch>, _>>()?;
        let curve = |f: fn(&OracleEpoch) -> f64| epochs.iter().map(|e| (e.epoch as f64, f(e))).collect::<Vec<_>>();
        let path = figures.join("oracle_loss.png");
        line_plot(&path, &[curve(|e| e.joint), curve(|e| e.cover_mse), curve(|e| e.reveal_mse)])?;
        written.push(path);
    }
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}
