//! Deterministic SGD training of the semantic predictor.
//!
//! Each epoch first refreshes the meta feature bank from the single-object
//! images (guided mode only), then takes one plain SGD step per image in a
//! seeded shuffled order.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{BBox, Mask, PointAnnotation};
use crate::error::{Error, Result};
use crate::eval::{evaluate, DensityBuckets};
use crate::featext::{extract_features, FeatureMap, FilterBankSpec};
use crate::ilg::{run_ilg, IlgConfig, IlgOutput};
use crate::image::ImageGrid;
use crate::losses::{
    build_affinity, total_loss, AffinityConfig, AffinityGraph, LossConfig, LossReport,
};
use crate::rng::SeedStreams;
use crate::scalar::Scalar;
use crate::sempred::{encode_meta_features, MetaUpdate, PlugModel, SemanticMap, SparseSample};

/// One training image with everything that stays fixed across epochs.
#[derive(Debug, Clone)]
pub struct TrainImage<T> {
    pub id: String,
    pub image: ImageGrid,
    pub features: FeatureMap<T>,
    /// Points at full image resolution.
    pub points: Vec<PointAnnotation>,
    /// Points mapped onto the feature grid.
    pub feature_points: Vec<PointAnnotation>,
    /// Color affinity at feature resolution.
    pub affinity: AffinityGraph,
    pub gt_boxes: Option<Vec<BBox>>,
}

/// Box-average downsampling (ceil-sized), used to bring the image to the
/// feature grid for the color prior.
pub fn downsample_image(image: &ImageGrid, stride: usize) -> ImageGrid {
    if stride <= 1 {
        return image.clone();
    }
    let (h, w) = (image.height(), image.width());
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut data = Vec::with_capacity(oh * ow * 3);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = [0u32; 3];
            let mut n = 0;
            for y in oy * stride..((oy + 1) * stride).min(h) {
                for x in ox * stride..((ox + 1) * stride).min(w) {
                    let p = image.pixel(x, y);
                    (0..3).for_each(|c| acc[c] += p[c] as u32);
                    n += 1;
                }
            }
            data.extend(acc.iter().map(|&a| ((a as f64 / n as f64).round()) as u8));
        }
    }
    ImageGrid::new(oh, ow, data).expect("downsampled dimensions are valid")
}

/// Nearest-cell mask at feature resolution: a cell is set when the pixel at
/// its centre is.
pub fn downsample_mask(mask: &Mask, stride: usize) -> Mask {
    if stride <= 1 {
        return mask.clone();
    }
    let (h, w) = (mask.height(), mask.width());
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut out = Mask::empty(oh, ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let y = (oy * stride + stride / 2).min(h - 1);
            let x = (ox * stride + stride / 2).min(w - 1);
            out.set(ox, oy, mask.get(x, y));
        }
    }
    out
}

impl<T: Scalar> TrainImage<T> {
    /// Builds a training image with features from the toy filter bank.
    pub fn prepare(
        id: impl Into<String>,
        image: ImageGrid,
        points: Vec<PointAnnotation>,
        gt_boxes: Option<Vec<BBox>>,
        spec: &FilterBankSpec,
        affinity: &AffinityConfig,
    ) -> Result<Self> {
        let features = extract_features::<T>(&image, spec)?;
        Self::with_features(id, image, features, points, gt_boxes, affinity)
    }

    /// Builds a training image around precomputed features; the stride is
    /// inferred from the size ratio.
    pub fn with_features(
        id: impl Into<String>,
        image: ImageGrid,
        features: FeatureMap<T>,
        points: Vec<PointAnnotation>,
        gt_boxes: Option<Vec<BBox>>,
        affinity: &AffinityConfig,
    ) -> Result<Self> {
        let id = id.into();
        if points.is_empty() {
            return Err(Error::Validation(format!("image {id} has no point labels")));
        }
        let s = image.height().div_ceil(features.height()).max(1);
        if (image.height().div_ceil(s), image.width().div_ceil(s))
            != (features.height(), features.width())
        {
            return Err(Error::Shape(format!(
                "image {id}: {}x{} features do not match a {}x{} image at any stride",
                features.width(),
                features.height(),
                image.width(),
                image.height()
            )));
        }
        let feature_points = points
            .iter()
            .map(|p| PointAnnotation {
                x: p.x / s,
                y: p.y / s,
                ..*p
            })
            .collect();
        let affinity = build_affinity(&downsample_image(&image, s), affinity)?;
        Ok(Self {
            id,
            image,
            features,
            points,
            feature_points,
            affinity,
            gt_boxes,
        })
    }

    pub fn is_single(&self) -> bool {
        self.points.len() == 1
    }

    pub fn stride(&self) -> usize {
        self.image.height().div_ceil(self.features.height()).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// 1-based epochs from which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub seed: u64,
    /// Sparse feature guidance on/off.
    pub sfg: bool,
    pub meta_update: MetaUpdate,
    pub loss: LossConfig,
    pub ilg: IlgConfig,
    /// Images (with ground truth) evaluated after each epoch for the log.
    pub eval_subset: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 1e-3,
            milestones: vec![8, 11],
            lr_decay: 0.1,
            seed: 0,
            sfg: true,
            meta_update: MetaUpdate::RunningMean,
            loss: LossConfig::default(),
            ilg: IlgConfig::default(),
            eval_subset: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and ≥ 0",
                self.lr
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::Config(format!(
                "lr_decay {} must be positive",
                self.lr_decay
            )));
        }
        if !(self.loss.gamma >= 0.0 && self.loss.alpha2 >= 0.0) {
            return Err(Error::Config("gamma and alpha2 must be ≥ 0".into()));
        }
        if !(self.loss.terms.positive || self.loss.terms.negative || self.loss.terms.color) {
            return Err(Error::Config(
                "at least one loss term must be enabled".into(),
            ));
        }
        self.ilg.validate()
    }

    /// Learning rate of 0-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch + 1 >= m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_pos: f64,
    pub mean_neg: f64,
    pub mean_col: f64,
    pub mean_total: f64,
    pub miou_on_train_subset: Option<f64>,
}

pub fn write_jsonl<W: Write>(log: &[EpochRecord], mut out: W) -> Result<()> {
    for r in log {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<log>", e))?;
    }
    Ok(())
}

/// Semantic map at full image resolution for ILG.
pub fn predict_full<T: Scalar>(
    model: &PlugModel<T>,
    img: &TrainImage<T>,
    guided: bool,
) -> Result<SemanticMap<T>> {
    let s = model.predict(&img.features, guided)?;
    Ok(
        if (s.height(), s.width()) == (img.image.height(), img.image.width()) {
            s
        } else {
            s.resize_bilinear(img.image.height(), img.image.width())
        },
    )
}

/// Prediction plus label generation for one image.
pub fn label_image<T: Scalar>(
    model: &PlugModel<T>,
    img: &TrainImage<T>,
    guided: bool,
    ilg: &IlgConfig,
) -> Result<IlgOutput> {
    let sem = predict_full(model, img, guided)?;
    run_ilg(&img.image, &sem, &img.points, ilg)
}

/// Whether guidance can be used: requested and at least one meta feature
/// available.
fn guided<T: Scalar>(model: &PlugModel<T>, sfg: bool) -> bool {
    sfg && model.bank.any_available()
}

/// Re-encodes the meta features from the single-object images using masks
/// from the plain predictor and ILG. Running-mean banks are rebuilt from
/// scratch; EMA banks keep their state.
pub fn refresh_bank<T: Scalar>(
    model: &mut PlugModel<T>,
    data: &[TrainImage<T>],
    ilg: &IlgConfig,
) -> Result<()> {
    let singles: Vec<&TrainImage<T>> = data.iter().filter(|d| d.is_single()).collect();
    let masks: Vec<Mask> = singles
        .par_iter()
        .map(|img| {
            let out = label_image(model, img, false, ilg)?;
            Ok(downsample_mask(
                &out.assignment.mask_of(img.points[0].instance_id),
                img.stride(),
            ))
        })
        .collect::<Result<_>>()?;
    let samples: Vec<SparseSample<T>> = singles
        .iter()
        .zip(&masks)
        .map(|(img, m)| SparseSample {
            features: &img.features,
            mask: m,
            category: img.points[0].category,
        })
        .collect();
    let mut base = model.bank.clone();
    if base.update_mode() == MetaUpdate::RunningMean {
        base.reset();
    }
    model.bank = encode_meta_features(&samples, &base)?;
    if singles.is_empty() {
        log::warn!("no single-object images: meta features unavailable, guidance falls back to zero vectors");
    } else if let Some(c) = (0..model.categories()).find(|&c| !model.bank.is_available(c)) {
        log::warn!(
            "category {} has no single-object sample; its meta feature is the zero vector",
            c + 1
        );
    }
    Ok(())
}

/// Loss and flat parameter gradient of one image.
pub fn image_gradient<T: Scalar>(
    model: &PlugModel<T>,
    img: &TrainImage<T>,
    guided: bool,
    loss: &LossConfig,
) -> Result<(LossReport, Vec<T>)> {
    let scores = model.predict(&img.features, guided)?;
    let (report, dscores) = total_loss(&scores, &img.feature_points, &img.affinity, loss)?;
    if !report.total.is_finite() {
        return Err(Error::Divergence {
            image: img.id.clone(),
        });
    }
    let grad = model.backward(&img.features, guided, &scores, &dscores)?;
    Ok((report, grad))
}

fn subset_miou<T: Scalar>(
    model: &PlugModel<T>,
    data: &[TrainImage<T>],
    cfg: &TrainConfig,
) -> Result<Option<f64>> {
    let picked: Vec<&TrainImage<T>> = data
        .iter()
        .filter(|d| d.gt_boxes.is_some())
        .take(cfg.eval_subset)
        .collect();
    if picked.is_empty() {
        return Ok(None);
    }
    let g = guided(model, cfg.sfg);
    let pseudo: Vec<Vec<BBox>> = picked
        .par_iter()
        .map(|img| {
            Ok(label_image(model, img, g, &cfg.ilg)?
                .labels
                .into_iter()
                .map(|l| l.bbox)
                .collect())
        })
        .collect::<Result<_>>()?;
    let gt: Vec<Vec<BBox>> = picked.iter().map(|d| d.gt_boxes.clone().unwrap()).collect();
    Ok(evaluate(&pseudo, &gt, &DensityBuckets::default())?.miou)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: PlugModel<T>,
    pub log: Vec<EpochRecord>,
}

pub fn train<T: Scalar>(
    data: &[TrainImage<T>],
    init: PlugModel<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if let Some(d) = data.iter().find(|d| d.features.channels() != init.dim()) {
        return Err(Error::Shape(format!(
            "image {} has {} channels, model expects {}",
            d.id,
            d.features.channels(),
            init.dim()
        )));
    }
    let mut model = init;
    model.bank.set_update_mode(cfg.meta_update);
    let streams = SeedStreams::new(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        if cfg.sfg {
            refresh_bank(&mut model, data, &cfg.ilg)?;
        }
        let g = guided(&model, cfg.sfg);
        order.shuffle(&mut streams.rng_indexed("shuffle", epoch as u64));
        let mut sums = [0.0f64; 4];
        let lr_t = T::lit(lr);
        for &k in &order {
            let img = &data[k];
            let (report, mut grad) = image_gradient(&model, img, g, &cfg.loss)?;
            if g && img.is_single() {
                // keep the shared predictor usable on raw features, which
                // the meta encoding relies on
                let (_, plain) = image_gradient(&model, img, false, &cfg.loss)?;
                grad.iter_mut().zip(&plain).for_each(|(a, b)| *a += *b);
            }
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    image: img.id.clone(),
                });
            }
            if lr > 0.0 {
                let mut params = model.params_flat();
                params
                    .iter_mut()
                    .zip(&grad)
                    .for_each(|(p, g)| *p -= lr_t * *g);
                model.set_params_flat(&params)?;
            }
            sums[0] += report.positive;
            sums[1] += report.negative;
            sums[2] += report.color_prior;
            sums[3] += report.total;
        }
        let n = data.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            mean_pos: sums[0] / n,
            mean_neg: sums[1] / n,
            mean_col: sums[2] / n,
            mean_total: sums[3] / n,
            miou_on_train_subset: subset_miou(&model, data, cfg)?,
        };
        log::info!(
            "epoch {}: lr {:.2e} loss {:.4} (pos {:.4} neg {:.4} col {:.4}) miou {:?}",
            record.epoch,
            record.lr,
            record.mean_total,
            record.mean_pos,
            record.mean_neg,
            record.mean_col,
            record.miou_on_train_subset
        );
        log.push(record);
    }
    if cfg.sfg && cfg.epochs > 0 {
        // freeze the bank against the final predictor
        refresh_bank(&mut model, data, &cfg.ilg)?;
    }
    Ok(TrainOutcome { model, log })
}
