//! Dense-object and λ studies with CSV output.
//!
//! The density study replicates one object with copy-and-paste at growing
//! counts and spacings and measures pseudo-box quality. Its control arm
//! skips the dense context: the single-object response is shifted onto each
//! copy and fused by pixelwise maximum before ILG.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, BucketStat, DensityBuckets, MiouReport};
use crate::featext::{extract_features, FilterBankSpec};
use crate::ilg::{run_ilg, IlgConfig};
use crate::rng::SeedStreams;
use crate::scalar::Scalar;
use crate::scene::{copy_paste_synthesize, generate_scene, CopyLayout, Scene, SceneSpec};
use crate::sempred::{PlugModel, SemanticMap};
use crate::train::{label_image, TrainImage};

pub const CSV_HEADER: &str = "count,gap,seed,sfg,lambda,miou,miou_s,miou_m,miou_l";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub count: Option<usize>,
    pub gap: Option<usize>,
    pub seed: u64,
    pub sfg: bool,
    pub lambda: f64,
    pub miou: Option<f64>,
    pub miou_s: Option<f64>,
    pub miou_m: Option<f64>,
    pub miou_l: Option<f64>,
}

pub fn write_csv<W: Write>(rows: &[StudyRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    let err = |e: csv::Error| Error::io("<csv>", std::io::Error::other(e));
    w.write_record(CSV_HEADER.split(',')).map_err(err)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let n = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            n(r.count),
            n(r.gap),
            r.seed.to_string(),
            r.sfg.to_string(),
            r.lambda.to_string(),
            opt(r.miou),
            opt(r.miou_s),
            opt(r.miou_m),
            opt(r.miou_l),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityStudyConfig {
    pub counts: Vec<usize>,
    pub gaps: Vec<usize>,
    /// Number of base scenes; each replicate draws its own object.
    pub replicates: usize,
    pub seed: u64,
    /// Base scene template; its object count is forced to 1.
    pub base: SceneSpec,
    pub layout: CopyLayout,
    pub sfg: bool,
    pub ilg: IlgConfig,
    pub features: FilterBankSpec,
}

impl Default for DensityStudyConfig {
    fn default() -> Self {
        Self {
            counts: vec![1, 2, 4, 8, 16],
            gaps: vec![2, 6],
            replicates: 3,
            seed: 0,
            base: SceneSpec {
                height: 96,
                width: 96,
                scale: (10, 16),
                ..SceneSpec::default()
            },
            layout: CopyLayout::Grid,
            sfg: true,
            ilg: IlgConfig::default(),
            features: FilterBankSpec::default(),
        }
    }
}

impl DensityStudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.counts.is_empty() || self.gaps.is_empty() || self.replicates == 0 {
            return Err(Error::Config(
                "density study needs counts, gaps and at least one replicate".into(),
            ));
        }
        if self.counts.contains(&0) {
            return Err(Error::Config("copy counts must be ≥ 1".into()));
        }
        self.ilg.validate()?;
        self.features.validate()?;
        self.base.validate()
    }

    pub fn base_scene(&self, replicate: usize) -> Result<Scene> {
        let seed = SeedStreams::new(self.seed).derive_indexed("replicate", replicate as u64);
        generate_scene(&SceneSpec {
            object_count: 1,
            seed,
            ..self.base.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityStudy {
    pub dense: Vec<StudyRow>,
    pub control: Vec<StudyRow>,
}

/// Shifts `base` so that its object lands on each copy and fuses the shifted
/// maps by pixelwise maximum; uncovered pixels read 0.
pub fn shift_and_fuse(
    base: &SemanticMap<f64>,
    offsets: &[(isize, isize)],
) -> Result<SemanticMap<f64>> {
    let (h, w, c) = (base.height(), base.width(), base.categories());
    let mut out = vec![0.0f64; h * w * c];
    for &(dx, dy) in offsets {
        for y in 0..h {
            let sy = y as isize - dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize - dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let src = base.at(sx as usize, sy as usize);
                let dst = &mut out[(y * w + x) * c..(y * w + x + 1) * c];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = d.max(s));
            }
        }
    }
    SemanticMap::new(h, w, c, out)
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn averaged_row(
    reports: &[MiouReport],
    count: Option<usize>,
    gap: Option<usize>,
    seed: u64,
    sfg: bool,
    lambda: f64,
) -> StudyRow {
    let size = |f: fn(&MiouReport) -> &BucketStat| mean_opt(reports.iter().map(|r| f(r).miou));
    StudyRow {
        count,
        gap,
        seed,
        sfg,
        lambda,
        miou: mean_opt(reports.iter().map(|r| r.miou)),
        miou_s: size(|r| &r.miou_s),
        miou_m: size(|r| &r.miou_m),
        miou_l: size(|r| &r.miou_l),
    }
}

fn scene_report(scene: &Scene, pseudo: Vec<crate::annotation::BBox>) -> Result<MiouReport> {
    evaluate(
        &[pseudo],
        std::slice::from_ref(&scene.boxes),
        &DensityBuckets::default(),
    )
}

/// Runs the copy-and-paste sweep. Rows are in `counts × gaps` order with
/// mIoU averaged over replicates; the seed column holds the study seed.
pub fn density_study<T: Scalar>(
    model: &PlugModel<T>,
    cfg: &DensityStudyConfig,
) -> Result<DensityStudy> {
    cfg.validate()?;
    let guided = cfg.sfg && model.bank.any_available();
    if cfg.sfg && !guided {
        log::warn!("meta features unavailable: density study runs without guidance");
    }
    let bases: Vec<Scene> = (0..cfg.replicates)
        .map(|r| cfg.base_scene(r))
        .collect::<Result<_>>()?;
    let base_sems: Vec<SemanticMap<f64>> = bases
        .par_iter()
        .map(|s| {
            let f = extract_features::<T>(&s.image, &cfg.features)?;
            let sem = model.predict(&f, guided)?;
            Ok(crate::ilg::semantic_at_resolution(
                &sem,
                s.image.height(),
                s.image.width(),
            ))
        })
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, usize)> = cfg
        .counts
        .iter()
        .flat_map(|&n| cfg.gaps.iter().map(move |&g| (n, g)))
        .collect();
    let results: Vec<(Vec<MiouReport>, Vec<MiouReport>)> = cells
        .par_iter()
        .map(|&(n, gap)| {
            let mut dense = Vec::with_capacity(bases.len());
            let mut control = Vec::with_capacity(bases.len());
            for (base, base_sem) in bases.iter().zip(&base_sems) {
                let scene = copy_paste_synthesize(base, n, gap, cfg.layout)?;
                let img = TrainImage::<T>::prepare(
                    "dense",
                    scene.image.clone(),
                    scene.points.clone(),
                    None,
                    &cfg.features,
                    &Default::default(),
                )?;
                let out = label_image(model, &img, guided, &cfg.ilg)?;
                dense.push(scene_report(
                    &scene,
                    out.labels.into_iter().map(|l| l.bbox).collect(),
                )?);
                let b = base.boxes[0];
                let offsets: Vec<(isize, isize)> = scene
                    .boxes
                    .iter()
                    .map(|c| {
                        (
                            c.x_min as isize - b.x_min as isize,
                            c.y_min as isize - b.y_min as isize,
                        )
                    })
                    .collect();
                let fused = shift_and_fuse(base_sem, &offsets)?;
                let out = run_ilg(&scene.image, &fused, &scene.points, &cfg.ilg)?;
                control.push(scene_report(
                    &scene,
                    out.labels.into_iter().map(|l| l.bbox).collect(),
                )?);
            }
            Ok((dense, control))
        })
        .collect::<Result<_>>()?;
    let mut study = DensityStudy {
        dense: Vec::new(),
        control: Vec::new(),
    };
    for (&(n, g), (d, c)) in cells.iter().zip(&results) {
        study.dense.push(averaged_row(
            d,
            Some(n),
            Some(g),
            cfg.seed,
            guided,
            cfg.ilg.lambda,
        ));
        study.control.push(averaged_row(
            c,
            Some(n),
            Some(g),
            cfg.seed,
            guided,
            cfg.ilg.lambda,
        ));
    }
    Ok(study)
}

/// The λ grid of the edge-weight sweep.
pub const LAMBDA_GRID: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];

/// Pseudo-box quality over `lambdas` on images with ground truth.
pub fn lambda_sweep<T: Scalar>(
    model: &PlugModel<T>,
    images: &[TrainImage<T>],
    guided: bool,
    base: &IlgConfig,
    lambdas: &[f64],
    seed: u64,
) -> Result<Vec<StudyRow>> {
    let picked: Vec<&TrainImage<T>> = images.iter().filter(|i| i.gt_boxes.is_some()).collect();
    if picked.is_empty() {
        return Err(Error::Validation(
            "λ sweep needs images with ground-truth boxes".into(),
        ));
    }
    let gt: Vec<Vec<crate::annotation::BBox>> =
        picked.iter().map(|i| i.gt_boxes.clone().unwrap()).collect();
    let sems: Vec<SemanticMap<T>> = picked
        .par_iter()
        .map(|i| model.predict(&i.features, guided))
        .collect::<Result<_>>()?;
    lambdas
        .iter()
        .map(|&lambda| {
            let cfg = IlgConfig { lambda, ..*base };
            let pseudo: Vec<Vec<crate::annotation::BBox>> = picked
                .par_iter()
                .zip(&sems)
                .map(|(img, sem)| {
                    Ok(run_ilg(&img.image, sem, &img.points, &cfg)?
                        .labels
                        .into_iter()
                        .map(|l| l.bbox)
                        .collect())
                })
                .collect::<Result<_>>()?;
            let r = evaluate(&pseudo, &gt, &DensityBuckets::default())?;
            Ok(averaged_row(
                std::slice::from_ref(&r),
                None,
                None,
                seed,
                guided,
                lambda,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sempred::MetaUpdate;

    #[test]
    fn shift_and_fuse_takes_max() {
        let base = SemanticMap::new(1, 4, 1, vec![0.2, 0.9, 0.1, 0.0]).unwrap();
        let f = shift_and_fuse(&base, &[(0, 0), (2, 0)]).unwrap();
        assert_eq!(f.layer(0), vec![0.2, 0.9, 0.2, 0.9]);
        let only = shift_and_fuse(&base, &[(0, 0)]).unwrap();
        assert_eq!(only, base);
    }

    #[test]
    fn csv_shape_and_blanks() {
        let rows = vec![StudyRow {
            count: None,
            gap: None,
            seed: 3,
            sfg: true,
            lambda: 0.5,
            miou: Some(0.5),
            miou_s: Some(0.5),
            miou_m: None,
            miou_l: None,
        }];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            format!("{CSV_HEADER}\n,,3,true,0.5,0.500000,0.500000,,\n")
        );
    }

    #[test]
    fn study_grid_shape() {
        let cfg = DensityStudyConfig {
            counts: vec![1, 3],
            gaps: vec![2, 4, 6],
            replicates: 2,
            base: SceneSpec {
                height: 48,
                width: 48,
                scale: (6, 9),
                ..SceneSpec::default()
            },
            ..DensityStudyConfig::default()
        };
        let model = PlugModel::<f64>::init(
            10,
            2,
            MetaUpdate::RunningMean,
            &mut SeedStreams::new(0).rng("init"),
        )
        .unwrap();
        let s = density_study(&model, &cfg).unwrap();
        assert_eq!(s.dense.len(), 6);
        assert_eq!(s.control.len(), 6);
        // one copy: the control response is the dense response
        assert_eq!(s.dense[0].miou, s.control[0].miou);
    }
}
