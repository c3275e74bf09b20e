use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use wbc_core::config::{Stage, StageConfig};
use wbc_core::data::{
    center_on_canvas, read_image, split_folds, synth_generate, write_png, DatasetManifest,
    FoldAssignment, ImageSet, Record, MAX_PROPORTION_GAP,
};
use wbc_core::dct::{dct2d, energy_threshold, signed_log_normalize};
use wbc_core::model::{load_checkpoint, save_checkpoint};
use wbc_core::stain::rgb_to_od;
use wbc_core::train::{evaluate, train, train_hybrid, TrainOutcome};
use wbc_core::{Error, Result, Rng, Tensor};

use crate::config::{Echo, FileConfig};
use crate::{Cli, Command, StageArgs, TrainArgs, DEFAULT_SEED};

pub fn run(cli: &Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let out = cli.out.as_path();
    match &cli.command {
        Command::Synth {
            subjects,
            cells,
            size,
            test_subjects,
        } => {
            let mut cfg = file.synth.clone();
            set(&mut cfg.subjects_per_class, *subjects);
            set(&mut cfg.cells_per_subject, *cells);
            set(&mut cfg.size, *size);
            set(&mut cfg.test_subjects_per_class, *test_subjects);
            cfg.validate()?;
            let m = synth_generate(&cfg, out, &Rng::new(seed))?;
            Echo::new("synth", seed)
                .section("synth", &cfg)?
                .write(out)?;
            println!("wrote {} images to {}", m.records.len(), out.display());
        }
        Command::Split { manifest, folds } => {
            let mut cfg = file.split.clone();
            set(&mut cfg.folds, *folds);
            let m = load_manifest(manifest)?;
            let assignment = split_folds(&m, cfg.folds, &mut Rng::new(seed))?;
            let report = assignment.check(&m)?;
            if report.max_gap > MAX_PROPORTION_GAP {
                log::warn!("largest fold class-share gap is {:.4}", report.max_gap);
            }
            std::fs::create_dir_all(out)?;
            assignment.save(&out.join("folds.csv"))?;
            Echo::new("split", seed)
                .input("manifest", manifest)
                .section("split", &cfg)?
                .write(out)?;
            for (f, c) in report.counts.iter().enumerate() {
                println!("fold {f}: {} normal, {} cancer", c[0], c[1]);
            }
            println!("max class-share gap {:.4}", report.max_gap);
        }
        Command::Preprocess { manifest, size } => {
            let size = size.unwrap_or(file.stage.input_size);
            let m = load_manifest(manifest)?;
            preprocess(&m, size, out)?;
            Echo::new("preprocess", seed)
                .input("manifest", manifest)
                .value("size", size as i64)
                .write(out)?;
            println!(
                "centred {} images on {size}×{size} canvases",
                m.records.len()
            );
        }
        Command::Train {
            data,
            stage,
            train: t,
        } => {
            let sc = stage_config(&file, stage)?;
            let tc = train_config(&file, t, seed)?;
            let m = load_manifest(&data.manifest)?;
            let folds = load_folds(&data.folds)?;
            let outcome = train(&sc, &tc, &m, &folds, data.val_fold)?;
            write_outcome(&outcome, out)?;
            Echo::new("train", seed)
                .input("manifest", &data.manifest)
                .input("folds", &data.folds)
                .value("val_fold", data.val_fold as i64)
                .section("stage", &sc)?
                .section("train", &tc)?
                .write(out)?;
            report_outcome(&outcome);
        }
        Command::TrainHybrid {
            data,
            stage,
            train: t,
            ckpt_a,
            ckpt_b,
        } => {
            let mut sc = stage_config(&file, stage)?;
            if stage.stage.is_none() && !sc.stage.is_hybrid() {
                sc.stage = Stage::S3C;
            }
            if stage.input_size.is_none() {
                let (a, _) = load_checkpoint(ckpt_a, None)?;
                sc.input_size = a.config().input_size;
            }
            let tc = train_config(&file, t, seed)?;
            let m = load_manifest(&data.manifest)?;
            let folds = load_folds(&data.folds)?;
            let h = train_hybrid(&sc, ckpt_a, ckpt_b, &tc, &m, &folds, data.val_fold)?;
            write_outcome(&h.outcome, out)?;
            let changed = h.audit.changed_components();
            let audit = Audit {
                components_unchanged: changed.is_empty(),
                changed: h.audit.changed(),
                before: h.audit.before.clone(),
                after: h.audit.after.clone(),
            };
            std::fs::write(out.join("freeze_audit.toml"), to_toml(&audit)?)?;
            Echo::new("train-hybrid", seed)
                .input("manifest", &data.manifest)
                .input("folds", &data.folds)
                .input("ckpt_a", ckpt_a)
                .input("ckpt_b", ckpt_b)
                .value("val_fold", data.val_fold as i64)
                .section("stage", &sc)?
                .section("train", &tc)?
                .write(out)?;
            report_outcome(&h.outcome);
            if !changed.is_empty() {
                return Err(Error::Contract(format!(
                    "frozen tensors changed: {}",
                    changed.join(", ")
                )));
            }
        }
        Command::Eval {
            ckpt,
            manifest,
            stage,
            split,
            folds,
            fold,
        } => {
            let (model, _) = load_checkpoint(ckpt, None)?;
            if let Some(s) = stage {
                let want: Stage = s.parse()?;
                if want != model.stage() {
                    return Err(Error::Config(format!(
                        "checkpoint holds {} but --stage is {want}",
                        model.stage()
                    )));
                }
            }
            let m = load_manifest(manifest)?;
            let assignment;
            let records: Vec<&Record> = match split.as_str() {
                "test" => m.test_records(),
                "all" => m.records.iter().collect(),
                "fold" => {
                    let (Some(path), Some(f)) = (folds, fold) else {
                        return Err(Error::Config(
                            "--split fold needs --folds and --fold".into(),
                        ));
                    };
                    assignment = load_folds(path)?;
                    if *f >= assignment.k {
                        return Err(Error::Config(format!(
                            "fold {f} is not below k = {}",
                            assignment.k
                        )));
                    }
                    assignment.fold_records(&m, *f)
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown split '{other}'; use test, all or fold"
                    )))
                }
            };
            if records.is_empty() {
                return Err(Error::Data(format!("split '{split}' has no images")));
            }
            let set = ImageSet::load(&m, &records, model.config().input_size)?;
            let report = evaluate(&model, &set, file.train.eval_batch_size)?;
            std::fs::create_dir_all(out)?;
            report.save(&out.join("metrics.toml"))?;
            let mut echo = Echo::new("eval", seed)
                .input("ckpt", ckpt)
                .input("manifest", manifest)
                .value("split", split.as_str());
            if let (Some(p), Some(f)) = (folds, fold) {
                echo = echo.input("folds", p).value("fold", *f as i64);
            }
            echo.write(out)?;
            println!(
                "{} images: accuracy {:.2}, F1 normal {:.2}, F1 cancer {:.2}",
                report.total, report.accuracy_pct, report.f1_normal_pct, report.f1_cancer_pct
            );
        }
        Command::InspectDct {
            image,
            energy_fraction,
        } => {
            let mut cfg = file.stage.dct.clone();
            set(&mut cfg.energy_fraction, *energy_fraction);
            cfg.validate()?;
            let img =
                read_image(image).map_err(|e| Error::Data(format!("{}: {e}", image.display())))?;
            let summary = inspect_dct(&img, &cfg, out)?;
            std::fs::write(out.join("dct_summary.toml"), to_toml(&summary)?)?;
            Echo::new("inspect-dct", seed)
                .input("image", image)
                .section("dct", &cfg)?
                .write(out)?;
            for p in &summary.planes {
                println!(
                    "plane {}: kept {} of {} coefficients",
                    p.channel, p.kept, p.total
                );
            }
        }
    }
    Ok(())
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Data(format!("serialising: {e}")))
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn load_folds(path: &Path) -> Result<FoldAssignment> {
    FoldAssignment::load(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn stage_config(file: &FileConfig, args: &StageArgs) -> Result<StageConfig> {
    let mut sc = file.stage.clone();
    if let Some(s) = &args.stage {
        sc.stage = s.parse()?;
    }
    if let Some(a) = &args.activation {
        sc.activation = a.parse()?;
    }
    if let Some(a) = &args.augmentation {
        sc.augmentation = a.parse()?;
    }
    set(&mut sc.input_size, args.input_size);
    sc.validate()?;
    Ok(sc)
}

fn train_config(
    file: &FileConfig,
    args: &TrainArgs,
    seed: u64,
) -> Result<wbc_core::train::TrainConfig> {
    let mut tc = file.train.clone();
    set(&mut tc.learning_rate, args.lr);
    set(&mut tc.max_epochs, args.epochs);
    set(&mut tc.patience, args.patience);
    set(&mut tc.batch_size, args.batch_size);
    tc.seed = seed;
    tc.validate()?;
    Ok(tc)
}

fn write_outcome(o: &TrainOutcome, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    save_checkpoint(&o.model, &o.meta, &out.join("best.ckpt"))?;
    o.log.save(&out.join("metrics_log.csv"))?;
    if let Some(best) = o
        .log
        .records
        .iter()
        .find(|r| r.epoch == o.meta.epoch && r.split == wbc_core::train::Split::Val)
    {
        best.report.save(&out.join("val_metrics.toml"))?;
    }
    Ok(())
}

fn report_outcome(o: &TrainOutcome) {
    println!(
        "best validation accuracy {:.2} at epoch {} of {} ({:?})",
        o.meta.val_accuracy, o.meta.epoch, o.epochs_run, o.stop
    );
}

#[derive(Serialize)]
struct Audit {
    components_unchanged: bool,
    changed: Vec<String>,
    before: std::collections::BTreeMap<String, String>,
    after: std::collections::BTreeMap<String, String>,
}

fn preprocess(m: &DatasetManifest, size: usize, out: &Path) -> Result<()> {
    m.records.par_iter().try_for_each(|r| -> Result<()> {
        let src = m.resolve(r);
        let img = read_image(&src).map_err(|e| Error::Data(format!("{}: {e}", src.display())))?;
        let canvas = center_on_canvas(&img, None, size)
            .map_err(|e| Error::Data(format!("{}: {e}", src.display())))?;
        let rel = Path::new(&r.path).with_extension("png");
        if rel.is_absolute()
            || rel
                .components()
                .any(|c| matches!(c, std::path::Component::ParentDir))
        {
            return Err(Error::Data(format!(
                "{}: path must stay inside the dataset",
                r.path
            )));
        }
        write_png(&out.join(&rel), &canvas)
    })?;
    let records = m
        .records
        .iter()
        .map(|r| Record {
            path: Path::new(&r.path)
                .with_extension("png")
                .display()
                .to_string(),
            ..r.clone()
        })
        .collect();
    DatasetManifest::new(records, out)?.save(&out.join("manifest.csv"))
}

#[derive(Serialize)]
struct PlaneSummary {
    channel: usize,
    kept: usize,
    total: usize,
    od_min: f64,
    od_max: f64,
}

#[derive(Serialize)]
struct DctSummary {
    energy_fraction: f64,
    planes: Vec<PlaneSummary>,
}

/// Stretch a plane to `[0, 255]` and write it as a grey PNG.
fn write_plane(path: &Path, plane: &[f64], h: usize, w: usize) -> Result<()> {
    let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let grey: Vec<f64> = plane.iter().map(|v| 255.0 * (v - lo) / span).collect();
    let data = [grey.clone(), grey.clone(), grey].concat();
    write_png(path, &Tensor::new(vec![3, h, w], data)?)
}

fn inspect_dct(img: &Tensor, cfg: &wbc_core::dct::DctConfig, out: &Path) -> Result<DctSummary> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let od = rgb_to_od(img)?;
    std::fs::create_dir_all(out)?;
    let mut planes = Vec::new();
    for c in 0..3 {
        let plane = Tensor::new(vec![h, w], od.data()[c * h * w..(c + 1) * h * w].to_vec())?;
        let (kept, mask) = energy_threshold(&dct2d(&plane)?, cfg)?;
        let normed = signed_log_normalize(&kept, cfg);
        write_plane(&out.join(format!("od_{c}.png")), plane.data(), h, w)?;
        write_plane(&out.join(format!("dct_{c}.png")), normed.data(), h, w)?;
        planes.push(PlaneSummary {
            channel: c,
            kept: mask.iter().filter(|&&k| k).count(),
            total: mask.len(),
            od_min: plane.data().iter().cloned().fold(f64::INFINITY, f64::min),
            od_max: plane
                .data()
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max),
        });
    }
    Ok(DctSummary {
        energy_fraction: cfg.energy_fraction,
        planes,
    })
}
