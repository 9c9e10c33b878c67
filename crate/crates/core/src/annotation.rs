//! Point labels, boxes, masks, and the annotation JSON schema.
//!
//! Coordinates are `(x = column, y = row)` with the origin at the top-left
//! pixel; boxes are inclusive on both corners so a single pixel is a 1×1 box.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single labelled seed point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub x: usize,
    pub y: usize,
    pub category: u32,
    #[serde(rename = "instance")]
    pub instance_id: u32,
}

impl PointAnnotation {
    pub fn new(x: usize, y: usize, category: u32, instance_id: u32) -> Self {
        Self {
            x,
            y,
            category,
            instance_id,
        }
    }

    #[inline]
    pub fn index(&self, width: usize) -> usize {
        self.y * width + self.x
    }
}

/// Axis-aligned box with inclusive corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
    pub category: u32,
    #[serde(rename = "instance")]
    pub instance_id: u32,
    /// Set when the box is a fallback rather than the hull of assigned pixels.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl BBox {
    pub fn new(
        x_min: usize,
        y_min: usize,
        x_max: usize,
        y_max: usize,
        category: u32,
        instance_id: u32,
    ) -> Self {
        debug_assert!(x_min <= x_max && y_min <= y_max);
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            category,
            instance_id,
            degenerate: false,
        }
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x_min <= self.x_max
            && self.y_min <= self.y_max
            && self.x_max < width
            && self.y_max < height
    }
}

/// Binary mask over an H×W grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask has {} bits for {height}x{width}",
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight inclusive bounds `(x_min, y_min, x_max, y_max)`, `None` when empty.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        b
    }

    /// Row-major run lengths, alternating, starting with a (possibly empty)
    /// run of unset pixels. Serialised as space separated integers.
    pub fn to_rle(&self) -> String {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0usize;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs.iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_rle(rle: &str, height: usize, width: usize) -> Result<Self> {
        let mut bits = Vec::with_capacity(height * width);
        let mut value = false;
        for tok in rle.split_whitespace() {
            let n: usize = tok
                .parse()
                .map_err(|_| Error::Validation(format!("bad RLE count {tok:?}")))?;
            bits.extend(std::iter::repeat_n(value, n));
            value = !value;
        }
        if bits.len() != height * width {
            return Err(Error::Validation(format!(
                "RLE covers {} pixels, expected {}",
                bits.len(),
                height * width
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }
}

/// Per-pixel instance assignment; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl AssignmentMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn mask_of(&self, instance_id: u32) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.labels.iter().map(|&l| l == instance_id).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// JSON schema

/// One image entry of the annotation / pseudo-label JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub file: String,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub points: Vec<PointAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_boxes: Option<Vec<BBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_masks: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_boxes: Option<Vec<BBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_masks: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    /// Number of categories; inferred from the largest label when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<u32>,
    pub images: Vec<ImageRecord>,
}

impl DatasetFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = self.to_json()?;
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Validated annotations of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageAnnotations {
    pub file: String,
    pub width: usize,
    pub height: usize,
    /// Instance ids are contiguous from 1, in the order of the original ids.
    pub points: Vec<PointAnnotation>,
    pub gt_boxes: Option<Vec<BBox>>,
    pub gt_masks: Option<Vec<Mask>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotations {
    pub categories: u32,
    pub images: Vec<ImageAnnotations>,
    pub warnings: Vec<String>,
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Annotations> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text)
}

pub fn parse_annotations(json: &str) -> Result<Annotations> {
    let file: DatasetFile = serde_json::from_str(json)?;
    validate_dataset(&file)
}

pub fn validate_dataset(file: &DatasetFile) -> Result<Annotations> {
    let mut warnings = Vec::new();
    let mut images = Vec::with_capacity(file.images.len());
    let mut max_cat = 0;
    for (idx, rec) in file.images.iter().enumerate() {
        let img = validate_record(idx, rec, &mut warnings)?;
        max_cat = img
            .points
            .iter()
            .map(|p| p.category)
            .fold(max_cat, u32::max);
        images.push(img);
    }
    let categories = match file.categories {
        Some(c) if c < max_cat => {
            return Err(Error::Validation(format!(
                "category {max_cat} exceeds declared category count {c}"
            )))
        }
        Some(c) => c,
        None => max_cat,
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Annotations {
        categories,
        images,
        warnings,
    })
}

fn validate_record(
    idx: usize,
    rec: &ImageRecord,
    warnings: &mut Vec<String>,
) -> Result<ImageAnnotations> {
    let (w, h) = (rec.width, rec.height);
    if w == 0 || h == 0 {
        return Err(Error::Validation(format!(
            "image #{idx} ({}) has zero size",
            rec.file
        )));
    }
    let mut seen = BTreeSet::new();
    for p in &rec.points {
        if p.x >= w || p.y >= h {
            return Err(Error::Validation(format!(
                "image #{idx} ({}): point {p:?} outside {w}x{h}",
                rec.file
            )));
        }
        if p.category == 0 {
            return Err(Error::Validation(format!(
                "image #{idx} ({}): point {p:?} has category 0 (categories start at 1)",
                rec.file
            )));
        }
        if !seen.insert(p.instance_id) {
            return Err(Error::Validation(format!(
                "image #{idx} ({}): duplicate instance id {} in {p:?}",
                rec.file, p.instance_id
            )));
        }
    }
    let ids: Vec<u32> = seen.into_iter().collect();
    let contiguous = ids.iter().enumerate().all(|(i, &id)| id == i as u32 + 1);
    let renumber = |old: u32| -> Option<u32> { ids.binary_search(&old).ok().map(|i| i as u32 + 1) };
    if !contiguous {
        warnings.push(format!(
            "image #{idx} ({}): instance ids {ids:?} renumbered to 1..={}",
            rec.file,
            ids.len()
        ));
    }
    let points = rec
        .points
        .iter()
        .map(|p| PointAnnotation {
            instance_id: renumber(p.instance_id).unwrap(),
            ..*p
        })
        .collect();

    let gt_boxes = match &rec.gt_boxes {
        None => None,
        Some(boxes) => {
            let mut out = Vec::with_capacity(boxes.len());
            for b in boxes {
                if !b.fits(w, h) {
                    return Err(Error::Validation(format!(
                        "image #{idx} ({}): gt box {b:?} outside {w}x{h}",
                        rec.file
                    )));
                }
                let instance_id = renumber(b.instance_id).ok_or_else(|| {
                    Error::Validation(format!(
                        "image #{idx} ({}): gt box for instance {} has no point label",
                        rec.file, b.instance_id
                    ))
                })?;
                out.push(BBox { instance_id, ..*b });
            }
            Some(out)
        }
    };
    let gt_masks = match &rec.gt_masks {
        None => None,
        Some(rles) => {
            if gt_boxes.as_ref().is_some_and(|b| b.len() != rles.len()) {
                return Err(Error::Validation(format!(
                    "image #{idx} ({}): {} gt masks for {} gt boxes",
                    rec.file,
                    rles.len(),
                    gt_boxes.as_ref().map_or(0, |b| b.len())
                )));
            }
            Some(
                rles.iter()
                    .map(|r| Mask::from_rle(r, h, w))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
    };
    Ok(ImageAnnotations {
        file: rec.file.clone(),
        width: w,
        height: h,
        points,
        gt_boxes,
        gt_masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_image(points: &str) -> String {
        format!(r#"{{"images":[{{"file":"a.ppm","width":32,"height":24,"points":[{points}]}}]}}"#)
    }

    #[test]
    fn single_point() {
        let a =
            parse_annotations(&one_image(r#"{"x":10,"y":20,"category":3,"instance":1}"#)).unwrap();
        assert_eq!(a.images[0].points, vec![PointAnnotation::new(10, 20, 3, 1)]);
        assert_eq!(a.categories, 3);
        assert!(a.warnings.is_empty());
    }

    #[test]
    fn right_edge_is_out_of_bounds() {
        let err = parse_annotations(&one_image(r#"{"x":32,"y":0,"category":1,"instance":1}"#))
            .unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("x: 32"), "{msg}");
    }

    #[test]
    fn duplicate_instance_rejected() {
        let err = parse_annotations(&one_image(
            r#"{"x":1,"y":1,"category":1,"instance":4},{"x":2,"y":2,"category":1,"instance":4}"#,
        ))
        .unwrap_err();
        assert!(err.to_string().contains("duplicate instance id 4"));
    }

    #[test]
    fn sparse_ids_are_renumbered_in_order() {
        let a = parse_annotations(&one_image(
            r#"{"x":1,"y":1,"category":1,"instance":5},{"x":2,"y":2,"category":2,"instance":2}"#,
        ))
        .unwrap();
        let ids: Vec<(usize, u32)> = a.images[0]
            .points
            .iter()
            .map(|p| (p.x, p.instance_id))
            .collect();
        assert_eq!(ids, vec![(1, 2), (2, 1)]);
        assert_eq!(a.warnings.len(), 1);
    }

    #[test]
    fn gt_boxes_follow_renumbering() {
        let json = r#"{"images":[{"file":"a","width":8,"height":8,
            "points":[{"x":1,"y":1,"category":1,"instance":7}],
            "gt_boxes":[{"x_min":0,"y_min":0,"x_max":2,"y_max":2,"category":1,"instance":7}]}]}"#;
        let a = parse_annotations(json).unwrap();
        assert_eq!(a.images[0].gt_boxes.as_ref().unwrap()[0].instance_id, 1);
    }

    #[test]
    fn declared_category_count_enforced() {
        let json = r#"{"categories":2,"images":[{"file":"a","width":8,"height":8,
            "points":[{"x":1,"y":1,"category":3,"instance":1}]}]}"#;
        assert!(parse_annotations(json).is_err());
    }

    #[test]
    fn rle_known_encoding() {
        let m = Mask::new(2, 3, vec![true, true, false, false, true, true]).unwrap();
        assert_eq!(m.to_rle(), "0 2 2 2");
        assert_eq!(Mask::from_rle("0 2 2 2", 2, 3).unwrap(), m);
        assert!(Mask::from_rle("0 2 2", 2, 3).is_err());
        assert_eq!(m.bounds(), Some((0, 0, 2, 1)));
    }

    proptest! {
        #[test]
        fn rle_roundtrip(bits in proptest::collection::vec(any::<bool>(), 1..60)) {
            let n = bits.len();
            let m = Mask::new(1, n, bits).unwrap();
            prop_assert_eq!(Mask::from_rle(&m.to_rle(), 1, n).unwrap(), m);
        }

        #[test]
        fn validation_never_accepts_out_of_bounds(x in 0usize..40, y in 0usize..30) {
            let r = parse_annotations(&one_image(&format!(r#"{{"x":{x},"y":{y},"category":1,"instance":1}}"#)));
            prop_assert_eq!(r.is_ok(), x < 32 && y < 24);
        }
    }
}
