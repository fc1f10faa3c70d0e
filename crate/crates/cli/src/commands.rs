use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use isda::ablation::{self, CellResult};
use isda::checkpoint;
use isda::config::RunConfig;
use isda::data::dataset::{self, Sample, TRAIN, VAL};
use isda::data::eval::EvalReport;
use isda::data::synth::{self, SceneConfig, CLASS_NAMES};
use isda::gradcheck::GradCheckOptions;
use isda::gradsuite;
use isda::model::Model;
use isda::train::{self, LogWriter};
use isda::ParamStore;
use serde::Serialize;

use crate::overlay;

fn scene_config(cfg: &RunConfig) -> SceneConfig {
    SceneConfig { size: cfg.model.image_size, twins: cfg.data.twins }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn generate(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = &cfg.paths.data;
    dataset::generate_dataset(dir, cfg.data.train_count, cfg.data.val_count, cfg.train.seed, &scene_config(cfg))?;
    println!("wrote {} train and {} val scenes to {}", cfg.data.train_count, cfg.data.val_count, dir.display());
    Ok(())
}

/// Loads a split, generating the dataset first when it is missing.
fn load(cfg: &RunConfig, split: &str) -> anyhow::Result<Vec<Sample>> {
    if !dataset::annotations_path(&cfg.paths.data, split).exists() {
        log::warn!("no dataset at {}, generating it", cfg.paths.data.display());
        generate(cfg)?;
    }
    let samples = dataset::load_split(&cfg.paths.data, split)?;
    if let Some(s) =
        samples.iter().find(|s| s.image.dim(1) != cfg.model.image_size || s.image.dim(2) != cfg.model.image_size)
    {
        return Err(isda::Error::Dataset(format!(
            "{split} image {} is {}x{} but input.size is {}",
            s.id,
            s.image.dim(2),
            s.image.dim(1),
            cfg.model.image_size
        ))
        .into());
    }
    Ok(samples)
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    let train_set = load(cfg, TRAIN)?;
    let val_set = load(cfg, VAL)?;
    let out = &cfg.paths.out;
    create_dir(&out.join("checkpoints"))?;
    fs::write(out.join("config.txt"), cfg.render()).context("writing config.txt")?;
    let log_path = out.join("train.log");
    if log_path.exists() {
        fs::remove_file(&log_path).with_context(|| format!("removing {}", log_path.display()))?;
    }
    let mut log = LogWriter::append(&log_path)?;
    let t = &cfg.train;
    let outcome = train::train(cfg, &train_set, &val_set, |entry, _, store| {
        log.write(entry)?;
        println!("{}", entry.to_line());
        if entry.epoch == t.epochs || (t.eval_every > 0 && entry.epoch % t.eval_every == 0) {
            checkpoint::save(store, &out.join("checkpoints").join(format!("epoch-{:03}.ckpt", entry.epoch)))?;
        }
        Ok(())
    })?;
    let final_path = out.join("model.ckpt");
    checkpoint::save(&outcome.store, &final_path)?;
    println!("final: {}", outcome.report);
    println!("checkpoint: {}", final_path.display());
    Ok(())
}

fn restore(cfg: &RunConfig, path: &Path) -> anyhow::Result<(Model, ParamStore)> {
    let (model, mut store) = Model::new(&cfg.model, cfg.train.seed)?;
    checkpoint::load_into(&mut store, path)?;
    Ok((model, store))
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: String,
    images: usize,
    report: &'a EvalReport,
    score_threshold: f64,
    /// Fraction of images whose instance count above the threshold is within
    /// one of the truth.
    count_within_one: f64,
}

/// Mask AP over all predictions, plus count accuracy at the score threshold.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path) -> anyhow::Result<(EvalReport, f64)> {
    let (model, store) = restore(cfg, checkpoint)?;
    let val = load(cfg, VAL)?;
    let report = train::evaluate_model(&model, &store, &val, 0.0)?;
    let preds = train::predict_all(&model, &store, &val, cfg.score_threshold)?;
    Ok((report, train::count_accuracy(&preds, &val, 1)))
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path) -> anyhow::Result<()> {
    let (report, count) = evaluate(cfg, checkpoint)?;
    println!("{report}");
    println!("count within 1 at threshold {}: {:.4}", cfg.score_threshold, count);
    for c in &report.per_class {
        println!("  {c:?}");
    }
    create_dir(&cfg.paths.out)?;
    let out = EvalOutput {
        checkpoint: checkpoint.display().to_string(),
        images: cfg.data.val_count,
        report: &report,
        score_threshold: cfg.score_threshold,
        count_within_one: count,
    };
    let path = cfg.paths.out.join("eval.json");
    fs::write(&path, serde_json::to_string_pretty(&out)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn infer(cfg: &RunConfig, checkpoint: &Path, image: &Path) -> anyhow::Result<()> {
    let (model, store) = restore(cfg, checkpoint)?;
    let (w, h, pixels) = dataset::read_pgm(image)?;
    if w != cfg.model.image_size || h != cfg.model.image_size {
        bail!("{} is {w}x{h} but the model expects {s}x{s}", image.display(), s = cfg.model.image_size);
    }
    let preds = model.predict(&store, &synth::image_from_gray(&pixels, h, w), cfg.score_threshold)?;
    let out = &cfg.paths.out;
    create_dir(out)?;
    for (k, p) in preds.iter().enumerate() {
        let bytes: Vec<u8> = p.mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
        let path = out.join(format!("instance-{k:02}-{}.pgm", CLASS_NAMES[p.class_id]));
        dataset::write_pgm(&path, w, h, &bytes)?;
        println!(
            "{}: {} conf={:.3} area={} query={}",
            path.display(),
            CLASS_NAMES[p.class_id],
            p.confidence,
            p.mask.area(),
            p.query
        );
    }
    let masks: Vec<_> = preds.iter().map(|p| &p.mask).collect();
    let overlay_path = out.join("overlay.ppm");
    dataset::write_ppm(&overlay_path, w, h, &overlay::compose(&pixels, &masks))?;
    println!("{} instances, overlay: {}", preds.len(), overlay_path.display());
    Ok(())
}

/// Returns whether every check passed.
pub fn gradcheck() -> anyhow::Result<bool> {
    let reports = gradsuite::run(&GradCheckOptions::default())?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", reports.len());
    Ok(failed == 0)
}

fn print_result(r: &CellResult) {
    println!(
        "{} mfr={} mp={} kp={} seed={} {} ({:.0}s)",
        r.cell.grid,
        r.cell.scale,
        r.cell.mfr_positions as u8,
        r.cell.kernel_positions as u8,
        r.seed,
        r.report,
        r.seconds
    );
}

pub fn ablate(cfg: &RunConfig, position: bool, resolution: bool, seeds: &[u64]) -> anyhow::Result<()> {
    if seeds.is_empty() {
        return Err(isda::Error::Config("--seeds must list at least one seed".into()).into());
    }
    let mut cells = Vec::new();
    if position {
        cells.extend(ablation::position_cells());
    }
    if resolution {
        cells.extend(ablation::resolution_cells());
    }
    let results = ablation::run(cfg, &cells, seeds, print_result)?;
    create_dir(&cfg.paths.out)?;
    let path = cfg.paths.out.join("ablation.csv");
    fs::write(&path, ablation::to_csv(&results)?).with_context(|| format!("writing {}", path.display()))?;
    if position {
        let v = ablation::position_verdict(&results);
        println!(
            "position grid: full model best on majority: {}, mp-only beats the no-position baseline on majority: {}",
            v.full_best, v.mp_beats_base
        );
    }
    if resolution {
        let v = ablation::resolution_verdict(&results);
        println!(
            "resolution grid: 1/4 >= 1/8 on majority: {}, 1/8 most large-skewed on majority: {}",
            v.quarter_beats_eighth, v.eighth_most_skewed
        );
    }
    println!("table: {}", path.display());
    Ok(())
}
