//! Pseudo-box quality: IoU against ground truth, bucketed by size, density
//! and category.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotation::BBox;
use crate::error::{Error, Result};

/// Inclusive-pixel intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let x0 = a.x_min.max(b.x_min);
    let y0 = a.y_min.max(b.y_min);
    let x1 = a.x_max.min(b.x_max);
    let y1 = a.y_max.min(b.y_max);
    let inter = if x0 <= x1 && y0 <= y1 {
        (x1 - x0 + 1) * (y1 - y0 + 1)
    } else {
        0
    };
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Size classes by ground-truth box area.
pub const SMALL_AREA: usize = 32 * 32;
pub const LARGE_AREA: usize = 96 * 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

pub fn size_class(area: usize) -> SizeClass {
    if area < SMALL_AREA {
        SizeClass::Small
    } else if area < LARGE_AREA {
        SizeClass::Medium
    } else {
        SizeClass::Large
    }
}

/// Lower edges of the per-image object-count buckets; the last is open.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensityBuckets(pub Vec<usize>);

impl Default for DensityBuckets {
    fn default() -> Self {
        Self(vec![1, 2, 6, 16])
    }
}

impl DensityBuckets {
    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() || self.0.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "density bucket edges must be non-empty and increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn bucket_of(&self, count: usize) -> Option<usize> {
        self.0.iter().rposition(|&lo| count >= lo)
    }

    pub fn label(&self, k: usize) -> String {
        let lo = self.0[k];
        match self.0.get(k + 1) {
            Some(&next) if next == lo + 1 => format!("{lo}"),
            Some(&next) => format!("{lo}-{}", next - 1),
            None => format!("{lo}+"),
        }
    }
}

/// Mean IoU of a group of objects; `miou` is `None` for an empty group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub miou: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Default)]
struct Acc {
    sum: f64,
    count: usize,
}

impl Acc {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn stat(&self) -> BucketStat {
        BucketStat {
            miou: (self.count > 0).then(|| self.sum / self.count as f64),
            count: self.count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityStat {
    pub bucket: String,
    pub miou: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub miou: Option<f64>,
    pub count: usize,
    pub per_category: BTreeMap<u32, BucketStat>,
    pub miou_s: BucketStat,
    pub miou_m: BucketStat,
    pub miou_l: BucketStat,
    pub density: Vec<DensityStat>,
}

impl MiouReport {
    /// Overall mIoU, 0 for an empty evaluation.
    pub fn value(&self) -> f64 {
        self.miou.unwrap_or(0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-object IoUs of one image, matched by instance id, in ground-truth order.
pub fn match_image(image: usize, pseudo: &[BBox], gt: &[BBox]) -> Result<Vec<(f64, BBox)>> {
    let mut by_id: BTreeMap<u32, &BBox> = BTreeMap::new();
    for p in pseudo {
        if by_id.insert(p.instance_id, p).is_some() {
            return Err(Error::Validation(format!(
                "image {image}: duplicate pseudo box for instance {}",
                p.instance_id
            )));
        }
    }
    let mut out = Vec::with_capacity(gt.len());
    for g in gt {
        let p = by_id.remove(&g.instance_id).ok_or_else(|| {
            Error::Validation(format!(
                "image {image}: no pseudo box for instance {}",
                g.instance_id
            ))
        })?;
        out.push((iou(p, g), *g));
    }
    if let Some(id) = by_id.keys().next() {
        return Err(Error::Validation(format!(
            "image {image}: pseudo box for instance {id} has no ground truth"
        )));
    }
    Ok(out)
}

/// Evaluates per-image pseudo boxes against ground truth.
pub fn evaluate(
    pseudo: &[Vec<BBox>],
    gt: &[Vec<BBox>],
    density: &DensityBuckets,
) -> Result<MiouReport> {
    density.validate()?;
    if pseudo.len() != gt.len() {
        return Err(Error::Validation(format!(
            "{} pseudo images vs {} ground-truth images",
            pseudo.len(),
            gt.len()
        )));
    }
    let mut all = Acc::default();
    let mut sizes = [Acc::default(), Acc::default(), Acc::default()];
    let mut dens = vec![Acc::default(); density.0.len()];
    let mut cats: BTreeMap<u32, Acc> = BTreeMap::new();
    for (k, (p, g)) in pseudo.iter().zip(gt).enumerate() {
        let bucket = density.bucket_of(g.len());
        for (v, b) in match_image(k, p, g)? {
            all.push(v);
            sizes[size_class(b.area()) as usize].push(v);
            if let Some(d) = bucket {
                dens[d].push(v);
            }
            cats.entry(b.category).or_default().push(v);
        }
    }
    Ok(MiouReport {
        miou: all.stat().miou,
        count: all.count,
        per_category: cats.into_iter().map(|(c, a)| (c, a.stat())).collect(),
        miou_s: sizes[0].stat(),
        miou_m: sizes[1].stat(),
        miou_l: sizes[2].stat(),
        density: dens
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let s = a.stat();
                DensityStat {
                    bucket: density.label(k),
                    miou: s.miou,
                    count: s.count,
                }
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: usize, y0: usize, x1: usize, y1: usize, id: u32) -> BBox {
        BBox::new(x0, y0, x1, y1, 1, id)
    }

    #[test]
    fn iou_hand_values() {
        let a = b(0, 0, 9, 9, 1);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(10, 0, 12, 3, 1)), 0.0);
        assert!((iou(&a, &b(5, 5, 14, 14, 1)) - 25.0 / 175.0).abs() < 1e-12);
        assert_eq!(iou(&b(3, 3, 3, 3, 1), &b(3, 3, 3, 3, 2)), 1.0);
    }

    #[test]
    fn size_thresholds() {
        assert_eq!(size_class(31 * 31), SizeClass::Small);
        assert_eq!(size_class(32 * 32), SizeClass::Medium);
        assert_eq!(size_class(96 * 96 - 1), SizeClass::Medium);
        assert_eq!(size_class(96 * 96), SizeClass::Large);
    }

    #[test]
    fn density_labels() {
        let d = DensityBuckets::default();
        let labels: Vec<String> = (0..4).map(|k| d.label(k)).collect();
        assert_eq!(labels, ["1", "2-5", "6-15", "16+"]);
        assert_eq!(d.bucket_of(0), None);
        assert_eq!(d.bucket_of(5), Some(1));
        assert_eq!(d.bucket_of(40), Some(3));
    }

    #[test]
    fn perfect_and_mean() {
        let gt = vec![vec![b(0, 0, 9, 9, 1), b(20, 20, 29, 29, 2)]];
        let r = evaluate(&gt, &gt, &DensityBuckets::default()).unwrap();
        assert_eq!(r.miou, Some(1.0));
        assert_eq!(r.miou_s.miou, Some(1.0));
        assert_eq!(r.miou_l.miou, None);
        // IoU 0.5 on one object: 10x10 vs the left half 10x5
        let pseudo = vec![vec![b(0, 0, 4, 9, 1), b(20, 20, 29, 29, 2)]];
        let r = evaluate(&pseudo, &gt, &DensityBuckets::default()).unwrap();
        assert!((r.value() - 0.75).abs() < 1e-12);
        assert_eq!(r.density[1].count, 2);
    }

    #[test]
    fn missing_partner_is_error() {
        let gt = vec![vec![b(0, 0, 9, 9, 1), b(20, 20, 29, 29, 2)]];
        let pseudo = vec![vec![b(0, 0, 9, 9, 1)]];
        let e = evaluate(&pseudo, &gt, &DensityBuckets::default()).unwrap_err();
        assert!(e.to_string().contains("instance 2"), "{e}");
    }
}
