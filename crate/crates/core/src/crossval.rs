//! k-fold cross-validation for the raw and segmented pipelines.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::classifier::{grad_cam, train_fold, ClassifierArch, GradCam, LabeledImage, TrainConfig};
use crate::dataset::{plan_stratified_kfold, AugmentConfig, BinaryLabel, FoldPlan, ImageSample};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, confusion, metrics_from_matrix, FoldReport, PipelineMode, RunReport, EPOCHS_FILE};
use crate::imaging::{
    apply_mask, normalize01, resize_bilinear, resize_mask, to_rgb, write_png, BinaryMask, RasterImage,
};
use crate::seeding::derive_seed;
use crate::stream;
use crate::unet::{seg_metrics, segment, unet_input, unet_train, SegExample, UNetConfig, UNetModel};

pub const IMAGE_SIZE: usize = 128;

/// A sample resized to the network resolution.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub label: BinaryLabel,
    pub rgb: RasterImage,
    pub truth: Option<BinaryMask>,
}

pub fn prepare_samples(samples: &[ImageSample]) -> Result<Vec<PreparedSample>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(PreparedSample {
                id: s.id.clone(),
                label: s.binary_label,
                rgb: resize_bilinear(&to_rgb(&s.image), IMAGE_SIZE, IMAGE_SIZE)?,
                truth: s.truth_mask.as_ref().map(|m| resize_mask(m, IMAGE_SIZE, IMAGE_SIZE)),
            })
        })
        .collect()
}

pub fn fold_plan_for(samples: &[PreparedSample], k: usize, seed: u64) -> Result<FoldPlan> {
    let ids: Vec<(String, BinaryLabel)> = samples.iter().map(|s| (s.id.clone(), s.label)).collect();
    plan_stratified_kfold(&ids, k, seed)
}

/// Settings shared by every fold of one run.
#[derive(Clone, Debug)]
pub struct CrossvalSettings {
    pub arch: ClassifierArch,
    pub train: TrainConfig,
    pub aug: AugmentConfig,
    pub unet: UNetConfig,
    pub seed: u64,
    pub workers: usize,
    pub cam_samples: usize,
    /// Root for per-fold artifacts (`fold_{i}/...`); nothing is written when unset.
    pub artifacts: Option<PathBuf>,
}

fn classifier_input(id: &str, label: BinaryLabel, img: &RasterImage) -> LabeledImage {
    LabeledImage {
        id: id.to_string(),
        input: normalize01(img),
        label,
    }
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `<stem>.png` (8-bit heatmap) and `<stem>.csv` (coarse map).
pub fn write_cam(cam: &GradCam, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pixels = cam
        .heatmap
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    write_png(
        &RasterImage::new(cam.size, cam.size, 1, pixels)?,
        &dir.join(format!("{stem}.png")),
    )?;
    let mut csv = String::new();
    for row in cam.coarse.chunks(cam.coarse_size) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(csv, "{}", cells.join(","));
    }
    let path = dir.join(format!("{stem}.csv"));
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

/// Trains the fold's U-Net on training-partition masks and masks every
/// image of the fold. Returns the masked images by id and the mean Dice on
/// validation images that have truth masks.
fn segment_fold(
    samples: &[&PreparedSample],
    train_ids: &[&str],
    val_ids: &[&str],
    cfg: &UNetConfig,
    seed: u64,
    fold: usize,
    fold_dir: Option<&Path>,
) -> Result<(HashMap<String, RasterImage>, Option<f64>)> {
    let by_id: HashMap<&str, &PreparedSample> = samples.iter().map(|s| (s.id.as_str(), *s)).collect();
    let mut supervised: Vec<&PreparedSample> = train_ids
        .iter()
        .map(|id| by_id[id])
        .filter(|s| s.truth.is_some())
        .collect();
    if supervised.is_empty() {
        return Err(Error::Dataset(format!(
            "fold {fold}: segmented mode needs truth masks in the training partition"
        )));
    }
    if let Some(cap) = cfg.max_train_samples {
        if supervised.len() > cap {
            supervised.shuffle(&mut stream!(seed, "unet-subset", fold));
            supervised.truncate(cap);
            supervised.sort_by(|a, b| a.id.cmp(&b.id));
        }
    }
    let examples = supervised
        .iter()
        .map(|s| {
            Ok(SegExample {
                id: s.id.clone(),
                input: unet_input(&s.rgb, cfg.refine)?,
                truth: s.truth.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut unet = UNetModel::<f32>::new(cfg.base_width, &mut stream!(seed, "unet-init", fold))?;
    let log = unet_train(
        &mut unet,
        &examples,
        cfg,
        derive_seed(seed, &["unet".into(), fold.into()]),
    )?;
    if let Some(last) = log.last() {
        log::info!(
            "fold {fold} unet: final loss {:.4} train dice {:.4}",
            last.loss,
            last.dice
        );
    }
    let mask_dir = fold_dir.map(|d| d.join("masks"));
    if let Some(dir) = &mask_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        unet.to_checkpoint()
            .save(&fold_dir.expect("set with mask_dir").join("unet.ckpt"))?;
    }
    let mut masked = HashMap::new();
    let mut dice = Vec::new();
    let is_val: std::collections::HashSet<&str> = val_ids.iter().copied().collect();
    for id in train_ids.iter().chain(val_ids) {
        let s = by_id[id];
        let mask = segment(&unet, &s.rgb, cfg)?;
        if is_val.contains(id) {
            if let Some(truth) = &s.truth {
                dice.push(seg_metrics(&mask, truth)?.dice);
            }
            if let Some(dir) = &mask_dir {
                write_png(&mask.to_image(), &dir.join(format!("{}.png", file_stem(id))))?;
            }
        }
        masked.insert(id.to_string(), apply_mask(&s.rgb, &mask)?);
    }
    let mean_dice = (!dice.is_empty()).then(|| dice.iter().sum::<f64>() / dice.len() as f64);
    Ok((masked, mean_dice))
}

fn run_fold(
    samples: &[PreparedSample],
    plan: &FoldPlan,
    mode: PipelineMode,
    s: &CrossvalSettings,
    fold: usize,
) -> Result<(FoldReport, Vec<crate::classifier::EpochLog>)> {
    let train_ids = plan.train_ids(fold);
    let val_ids = plan.test_ids(fold);
    let fold_dir = s.artifacts.as_ref().map(|d| d.join(format!("fold_{fold}")));
    if let Some(d) = &fold_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let by_id: HashMap<&str, &PreparedSample> = samples.iter().map(|p| (p.id.as_str(), p)).collect();
    let (masked, unet_val_dice) = match mode {
        PipelineMode::Raw => (HashMap::new(), None),
        PipelineMode::Segmented => {
            let refs: Vec<&PreparedSample> = samples.iter().collect();
            segment_fold(&refs, &train_ids, &val_ids, &s.unet, s.seed, fold, fold_dir.as_deref())?
        }
    };
    let build = |ids: &[&str]| -> Vec<LabeledImage> {
        ids.iter()
            .map(|id| {
                let p = by_id[id];
                classifier_input(id, p.label, masked.get(*id).unwrap_or(&p.rgb))
            })
            .collect()
    };
    let (train, val) = (build(&train_ids), build(&val_ids));
    let outcome = train_fold(s.arch, &train, &val, &s.train, &s.aug, fold, s.seed)?;
    let m = confusion(&outcome.predictions, |id| by_id.get(id).map(|p| p.label))?;
    if let Some(d) = &fold_dir {
        outcome.model.to_checkpoint().save(&d.join("classifier.ckpt"))?;
        let path = d.join(EPOCHS_FILE);
        std::fs::write(&path, crate::evaluation::epochs_csv(&outcome.epochs)).map_err(|e| Error::io(&path, e))?;
        for v in val.iter().take(s.cam_samples) {
            let pred = outcome
                .predictions
                .iter()
                .find(|p| p.id == v.id)
                .expect("every val id predicted");
            let cam = grad_cam(&outcome.model, &v.input, pred.predicted)?;
            write_cam(&cam, &d.join("cam"), &file_stem(&v.id))?;
        }
    }
    if let Some(dice) = unet_val_dice {
        log::info!("fold {fold} unet held-out dice {dice:.4}");
    }
    Ok((
        FoldReport {
            fold,
            confusion: m,
            metrics: metrics_from_matrix(&m)?,
            predictions: outcome.predictions,
            unet_val_dice,
        },
        outcome.epochs,
    ))
}

/// Runs every fold (fold-parallel over `settings.workers` threads) and
/// aggregates the results in fold order.
pub fn run_crossval(
    samples: &[PreparedSample],
    plan: &FoldPlan,
    mode: PipelineMode,
    settings: &CrossvalSettings,
) -> Result<RunReport> {
    let ids: std::collections::HashSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    if ids.len() != samples.len()
        || plan.assignment.len() != ids.len()
        || !plan.assignment.keys().all(|k| ids.contains(k.as_str()))
    {
        return Err(Error::InvalidArgument("fold plan does not cover the sample set".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let results: Vec<_> = pool.install(|| {
        (0..plan.k)
            .into_par_iter()
            .map(|fold| run_fold(samples, plan, mode, settings, fold))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut folds = Vec::with_capacity(plan.k);
    let mut epochs = Vec::new();
    for (report, log) in results {
        folds.push(report);
        epochs.extend(log);
    }
    aggregate(mode, plan.seed, folds, epochs)
}
