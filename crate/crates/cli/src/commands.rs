//! Implementations behind the CLI subcommands.

use crate::dataset::{self, SampleRecord};
use msv_mamba::check::run_gradcheck_suite;
use msv_mamba::checkpoint::Checkpoint;
use msv_mamba::config::{parse as parse_config, RunConfig};
use msv_mamba::error::{Error, Result};
use msv_mamba::layers::{ParamStore, Pass};
use msv_mamba::metrics::{summary_rows, write_csv, MetricsRow};
use msv_mamba::model::Model;
use msv_mamba::pgm::{self, Pgm};
use msv_mamba::phantom::{generate_phantom, PhantomSpec};
use msv_mamba::train::{evaluate, hard_predictions, train_step, Adam, AdamConfig, Batch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

fn spec_echo(spec: &PhantomSpec) -> String {
    format!(
        "seed={};classes={};cx={:?};cy={:?};a={:?};b={:?};theta={:?};ring={:?};sigma_s={:?};blur={:?}",
        spec.seed,
        spec.classes,
        spec.cx,
        spec.cy,
        spec.a,
        spec.b,
        spec.theta,
        spec.ring,
        spec.sigma_s,
        spec.blur_sigma
    )
}

pub fn synth(
    count: usize,
    out: &Path,
    seed: u64,
    classes: usize,
    size: usize,
    split: &str,
) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("count must be positive".into()));
    }
    if classes != 2 && classes != 3 {
        return Err(Error::Config(format!(
            "classes must be 2 or 3, got {classes}"
        )));
    }
    std::fs::create_dir_all(out)?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let spec = PhantomSpec::random(size, size, classes, seed + i as u64);
        let (image, mask) = generate_phantom(&spec)?;
        let image_name = format!("image_{i:04}.pgm");
        let mask_name = format!("mask_{i:04}.pgm");
        pgm::write(&out.join(&image_name), &Pgm::new(size, size, image)?)?;
        pgm::write(&out.join(&mask_name), &Pgm::new(size, size, mask)?)?;
        records.push(SampleRecord {
            image: image_name.into(),
            mask: mask_name.into(),
            split: split.to_string(),
            spec: spec_echo(&spec),
        });
    }
    dataset::write_manifest(out, &records)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

pub struct TrainFlags {
    pub no_lms: bool,
    pub no_aux: bool,
    pub no_msaa: bool,
}

pub fn train(
    data: &Path,
    config: &Path,
    out: &Path,
    flags: &TrainFlags,
    resume: Option<&Path>,
) -> Result<()> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", config.display())))?;
    let mut cfg = parse_config(&text)?;
    if flags.no_lms {
        cfg.model.use_lms = false;
    }
    if flags.no_aux {
        cfg.model.use_aux = false;
    }
    if flags.no_msaa {
        cfg.model.use_msaa = false;
    }
    println!("epsilon = {:?}", cfg.model.effective_epsilon());

    let samples = dataset::load_samples(data, cfg.model.classes)?;
    let train_samples: Vec<_> = samples.into_iter().filter(|s| s.split == "train").collect();
    if train_samples.is_empty() {
        return Err(Error::Data(format!(
            "{} has no samples tagged train",
            data.display()
        )));
    }
    let batches = dataset::into_batches(&train_samples, cfg.batch_size)?;

    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&mut store, cfg.model.clone())?;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.seed);
    let mut start_step: u64 = 0;

    if let Some(path) = resume {
        let ckpt = Checkpoint::load(path)?;
        let saved = parse_config(&ckpt.config_text)?;
        if saved.model != cfg.model {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with a different model config",
                path.display()
            )));
        }
        rng = ckpt.restore_into(&mut store, &mut opt)?;
        start_step = ckpt.step;
        println!("resumed from {} at step {start_step}", path.display());
    }
    if start_step >= cfg.steps {
        return Err(Error::Config(format!(
            "checkpoint is already at step {start_step}, config stops at {}",
            cfg.steps
        )));
    }

    std::fs::create_dir_all(out)?;
    let report_every = (cfg.steps / 10).max(1);
    for step in start_step..cfg.steps {
        let batch = &batches[(step % batches.len() as u64) as usize];
        let out = train_step(&model, &mut store, &mut opt, batch)?;
        if (step + 1) % report_every == 0 || step + 1 == cfg.steps {
            println!(
                "step {}/{} loss {:.4} (main {:.4})",
                step + 1,
                cfg.steps,
                out.total_value,
                out.main_value,
            );
        }
    }

    let eval_batches: Vec<Batch<f32>> = train_samples
        .iter()
        .map(|s| dataset::stack(&[&s.batch]))
        .collect::<Result<_>>()?;
    let summary = evaluate(&model, &mut store, &eval_batches)?;
    let rows = summary_rows(
        cfg.steps,
        "train",
        &summary.tally,
        summary.loss_main,
        summary.loss_aux_sum,
        summary.loss_total,
    );
    write_csv(&out.join("train.csv"), &rows)?;

    let ckpt = Checkpoint::capture(&cfg.render(), cfg.steps, &rng, &store, &opt);
    ckpt.save(&out.join("model.ckpt"))?;
    println!(
        "finished at step {}: mean foreground dice {:.4}",
        cfg.steps,
        summary.tally.mean_foreground()
    );
    Ok(())
}

/// Rebuilds the model a checkpoint was trained with and restores it.
fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(RunConfig, ParamStore<f32>, Model)> {
    let cfg = parse_config(&ckpt.config_text)?;
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&mut store, cfg.model.clone())?;
    let mut opt = Adam::new(AdamConfig::default());
    ckpt.restore_into(&mut store, &mut opt)?;
    Ok((cfg, store, model))
}

pub fn eval(data: &Path, ckpt_path: &Path, csv: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (cfg, mut store, model) = model_from_checkpoint(&ckpt)?;
    let samples = dataset::load_samples(data, cfg.model.classes)?;

    let mut groups: BTreeMap<String, Vec<Batch<f32>>> = BTreeMap::new();
    for s in samples {
        groups
            .entry(s.split.clone())
            .or_default()
            .push(dataset::stack(&[&s.batch])?);
    }
    let mut rows: Vec<MetricsRow> = Vec::new();
    for (split, batches) in &groups {
        let summary = evaluate(&model, &mut store, batches)?;
        rows.extend(summary_rows(
            ckpt.step,
            split,
            &summary.tally,
            summary.loss_main,
            summary.loss_aux_sum,
            summary.loss_total,
        ));
        println!(
            "{split}: {} samples, mean foreground dice {:.4}",
            batches.len(),
            summary.tally.mean_foreground()
        );
    }
    write_csv(csv, &rows)?;
    Ok(())
}

pub fn predict(image_path: &Path, ckpt_path: &Path, mask_out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (cfg, mut store, model) = model_from_checkpoint(&ckpt)?;
    let image = pgm::read(image_path)?;
    if image.width != image.height {
        return Err(Error::Data(format!(
            "prediction needs a square image, got {}x{}",
            image.width, image.height
        )));
    }
    let size = image.width;
    let tensor = msv_mamba::tensor::Tensor::new(
        vec![1, 1, size, size],
        image.to_unit_floats::<f32>(),
    )?;
    let mut pass = Pass::new(&mut store, false);
    let x = pass.tape.constant(tensor);
    let preds = model.forward(&mut pass, x)?;
    let classes = hard_predictions(pass.tape.value(preds.logits_main));

    pgm::write(mask_out, &Pgm::new(size, size, classes.clone())?)?;

    // Overlay: source image dimmed, predicted classes brightened on top.
    let max_class = cfg.model.classes.max(2) - 1;
    let overlay: Vec<u8> = image
        .data
        .iter()
        .zip(&classes)
        .map(|(&px, &c)| {
            let tint = c as f64 * 255.0 / max_class as f64;
            (0.5 * px as f64 + 0.5 * tint).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    let overlay_path = overlay_path(mask_out);
    pgm::write(&overlay_path, &Pgm::new(size, size, overlay)?)?;
    println!(
        "wrote {} and {}",
        mask_out.display(),
        overlay_path.display()
    );
    Ok(())
}

pub fn overlay_path(mask_out: &Path) -> std::path::PathBuf {
    match mask_out.extension().and_then(|e| e.to_str()) {
        Some(ext) => mask_out.with_extension(format!("overlay.{ext}")),
        None => mask_out.with_extension("overlay"),
    }
}

pub fn gradcheck(use_f64: bool) -> Result<i32> {
    let seeds = [1, 2, 3, 4, 5];
    let cases = if use_f64 {
        run_gradcheck_suite::<f64>(&seeds)?
    } else {
        run_gradcheck_suite::<f32>(&seeds)?
    };
    let dtype = if use_f64 { "f64" } else { "f32" };
    let mut failures = 0;
    for case in &cases {
        let verdict = if case.pass() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {dtype} {} seed {} rel_err {:.3e} (< {:.0e})",
            case.name, case.seed, case.worst_rel_err, case.threshold
        );
        if !case.pass() {
            failures += 1;
        }
    }
    if failures == 0 {
        println!("all {} gradient checks passed at {dtype}", cases.len());
        Ok(0)
    } else {
        eprintln!("{failures} of {} gradient checks failed at {dtype}", cases.len());
        Ok(1)
    }
}
