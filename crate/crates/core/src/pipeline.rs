//! Dataset directories and the end-to-end label generation pass.
//!
//! A dataset directory holds `annotations.json` and the image files it names
//! (paths relative to the directory). Precomputed features may live in a
//! separate directory as `<image stem>.feat`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::annotation::{
    load_annotations, Annotations, DatasetFile, ImageAnnotations, ImageRecord, Mask,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, DensityBuckets, MiouReport};
use crate::featext::{load_features, FilterBankSpec};
use crate::ilg::{
    compute_cost_maps, likelihood_maps, semantic_at_resolution, sobel_edge_map, IlgConfig,
    IlgOutput,
};
use crate::image::{load_image, save_image, unit_to_bytes, write_pgm, ImageGrid};
use crate::losses::AffinityConfig;
use crate::scalar::Scalar;
use crate::scene::Scene;
use crate::sempred::PlugModel;
use crate::train::{label_image, TrainImage};

pub const ANNOTATIONS_FILE: &str = "annotations.json";

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub annotations: Annotations,
    pub images: Vec<ImageGrid>,
}

impl Dataset {
    pub fn categories(&self) -> usize {
        self.annotations.categories as usize
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Loads `annotations.json` and every image it references, checking sizes.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let root = dir.as_ref().to_path_buf();
    let annotations = load_annotations(root.join(ANNOTATIONS_FILE))?;
    let images = annotations
        .images
        .par_iter()
        .map(|rec| {
            let img = load_image(root.join(&rec.file))?;
            if (img.width(), img.height()) != (rec.width, rec.height) {
                return Err(Error::Validation(format!(
                    "{} is {}x{}, annotations say {}x{}",
                    rec.file,
                    img.width(),
                    img.height(),
                    rec.width,
                    rec.height
                )));
            }
            Ok(img)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        root,
        annotations,
        images,
    })
}

/// Writes scenes as `img_NNNN.ppm` plus the annotation manifest.
pub fn write_dataset(
    scenes: &[Scene],
    categories: u32,
    dir: impl AsRef<Path>,
) -> Result<DatasetFile> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut images = Vec::with_capacity(scenes.len());
    for (k, s) in scenes.iter().enumerate() {
        let name = format!("img_{k:04}.ppm");
        save_image(&s.image, dir.join(&name))?;
        images.push(s.to_record(name));
    }
    let file = DatasetFile {
        categories: Some(categories),
        images,
    };
    file.save(dir.join(ANNOTATIONS_FILE))?;
    Ok(file)
}

/// Where per-image features come from.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureSource {
    FilterBank(FilterBankSpec),
    /// Directory with one `<image stem>.feat` file per image.
    Files(PathBuf),
}

impl FeatureSource {
    pub fn dim(&self, ds: &Dataset) -> Result<usize> {
        match self {
            FeatureSource::FilterBank(spec) => Ok(spec.channel_count()),
            FeatureSource::Files(dir) => match ds.annotations.images.first() {
                Some(rec) => Ok(load_features::<f32>(feature_path(dir, &rec.file))?.channels()),
                None => Err(Error::Validation(
                    "cannot infer feature width from an empty dataset".into(),
                )),
            },
        }
    }
}

fn feature_path(dir: &Path, file: &str) -> PathBuf {
    let stem = Path::new(file)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    dir.join(format!("{stem}.feat"))
}

/// Features and affinities of the annotated images. Images without points
/// are skipped with a warning since they carry no supervision.
pub fn prepare_images<T: Scalar>(
    ds: &Dataset,
    source: &FeatureSource,
    affinity: &AffinityConfig,
) -> Result<Vec<TrainImage<T>>> {
    let picked: Vec<usize> = (0..ds.len())
        .filter(|&k| !ds.annotations.images[k].points.is_empty())
        .collect();
    if picked.len() < ds.len() {
        log::warn!(
            "{} images without points are skipped",
            ds.len() - picked.len()
        );
    }
    picked
        .par_iter()
        .map(|&k| {
            let rec = &ds.annotations.images[k];
            let image = ds.images[k].clone();
            let features = match source {
                FeatureSource::FilterBank(spec) => {
                    crate::featext::extract_features::<T>(&image, spec)?
                }
                FeatureSource::Files(dir) => load_features::<T>(feature_path(dir, &rec.file))?,
            };
            TrainImage::with_features(
                rec.file.clone(),
                image,
                features,
                rec.points.clone(),
                rec.gt_boxes.clone(),
                affinity,
            )
        })
        .collect()
}

/// Pseudo labels of every annotated image; images without points pass
/// through with empty label lists.
pub fn generate_labels<T: Scalar>(
    model: &PlugModel<T>,
    ds: &Dataset,
    images: &[TrainImage<T>],
    guided: bool,
    ilg: &IlgConfig,
) -> Result<(DatasetFile, Vec<Option<IlgOutput>>)> {
    let outputs: Vec<IlgOutput> = images
        .par_iter()
        .map(|img| label_image(model, img, guided, ilg))
        .collect::<Result<_>>()?;
    let mut by_file = images.iter().map(|i| i.id.as_str()).zip(outputs);
    let mut next = by_file.next();
    let mut records = Vec::with_capacity(ds.len());
    let mut all = Vec::with_capacity(ds.len());
    for rec in &ds.annotations.images {
        let out = match next.take() {
            Some((id, out)) if id == rec.file => {
                next = by_file.next();
                Some(out)
            }
            other => {
                next = other;
                None
            }
        };
        records.push(pseudo_record(rec, out.as_ref()));
        all.push(out);
    }
    Ok((
        DatasetFile {
            categories: Some(ds.annotations.categories),
            images: records,
        },
        all,
    ))
}

fn pseudo_record(rec: &ImageAnnotations, out: Option<&IlgOutput>) -> ImageRecord {
    let labels = out.map(|o| o.labels.as_slice()).unwrap_or_default();
    ImageRecord {
        file: rec.file.clone(),
        width: rec.width,
        height: rec.height,
        points: rec.points.clone(),
        gt_boxes: rec.gt_boxes.clone(),
        gt_masks: rec
            .gt_masks
            .as_ref()
            .map(|ms| ms.iter().map(Mask::to_rle).collect()),
        pseudo_boxes: Some(labels.iter().map(|l| l.bbox).collect()),
        pseudo_masks: Some(labels.iter().map(|l| l.mask.to_rle()).collect()),
    }
}

/// Writes `<stem>_inst<k>.pgm` likelihood maps, `<stem>_cat<c>.pgm`
/// semantic layers and `<stem>_assign.pgm` with raw instance ids.
pub fn export_heatmaps<T: Scalar>(
    model: &PlugModel<T>,
    img: &TrainImage<T>,
    out: &IlgOutput,
    guided: bool,
    ilg: &IlgConfig,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (img.image.height(), img.image.width());
    let stem = Path::new(&img.id)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let sem = semantic_at_resolution(&model.predict(&img.features, guided)?, h, w);
    let maps = compute_cost_maps(&sem, &sobel_edge_map(&img.image), &img.points, ilg)?;
    for (m, p) in likelihood_maps(&maps).into_iter().zip(&maps) {
        write_pgm(
            dir.join(format!("{stem}_inst{}.pgm", p.instance_id)),
            h,
            w,
            &unit_to_bytes(m),
        )?;
    }
    for c in 0..sem.categories() {
        write_pgm(
            dir.join(format!("{stem}_cat{}.pgm", c + 1)),
            h,
            w,
            &unit_to_bytes(sem.layer(c)),
        )?;
    }
    let ids: Vec<u8> = out
        .assignment
        .labels
        .iter()
        .map(|&l| l.min(255) as u8)
        .collect();
    write_pgm(dir.join(format!("{stem}_assign.pgm")), h, w, &ids)
}

/// Evaluates the pseudo boxes of a label file against its ground truth.
pub fn evaluate_file(file: &DatasetFile, buckets: &DensityBuckets) -> Result<MiouReport> {
    let mut pseudo = Vec::new();
    let mut gt = Vec::new();
    for rec in &file.images {
        let g = rec
            .gt_boxes
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("{} has no ground-truth boxes", rec.file)))?;
        let p = rec
            .pseudo_boxes
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("{} has no pseudo boxes", rec.file)))?;
        pseudo.push(p.clone());
        gt.push(g.clone());
    }
    evaluate(&pseudo, &gt, buckets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;
    use crate::scene::{DatasetSpec, SceneSpec};
    use crate::sempred::MetaUpdate;

    #[test]
    fn dataset_roundtrip_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            n_images: 3,
            objects: (1, 3),
            scene: SceneSpec {
                height: 32,
                width: 32,
                ..SceneSpec::default()
            },
            ..DatasetSpec::default()
        };
        let scenes = spec.generate(5).unwrap();
        write_dataset(&scenes, 2, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.images[1], scenes[1].image);
        let src = FeatureSource::FilterBank(FilterBankSpec::default());
        let imgs = prepare_images::<f64>(&ds, &src, &AffinityConfig::default()).unwrap();
        let model = PlugModel::init(
            10,
            2,
            MetaUpdate::RunningMean,
            &mut SeedStreams::new(0).rng("init"),
        )
        .unwrap();
        let (file, _) = generate_labels(&model, &ds, &imgs, false, &IlgConfig::default()).unwrap();
        for (rec, s) in file.images.iter().zip(&scenes) {
            let boxes = rec.pseudo_boxes.as_ref().unwrap();
            assert_eq!(boxes.len(), s.points.len());
            for (b, p) in boxes.iter().zip(&s.points) {
                assert!(b.degenerate || b.contains(p.x, p.y));
            }
        }
        let report = evaluate_file(&file, &DensityBuckets::default()).unwrap();
        assert_eq!(
            report.count,
            scenes.iter().map(|s| s.points.len()).sum::<usize>()
        );
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = DatasetSpec {
            n_images: 1,
            ..DatasetSpec::default()
        }
        .generate(1)
        .unwrap();
        write_dataset(&scenes, 2, dir.path()).unwrap();
        save_image(
            &ImageGrid::filled(4, 4, [0, 0, 0]).unwrap(),
            dir.path().join("img_0000.ppm"),
        )
        .unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
