//! Synthetic scenes with ground-truth masks, boxes and sampled point labels.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotation::{BBox, ImageRecord, Mask, PointAnnotation};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::rng::SeedStreams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rect,
    Ellipse,
    /// Rectangle with its top-right quadrant removed.
    LShape,
}

impl Shape {
    fn min_side(self) -> usize {
        match self {
            Shape::LShape => 6,
            _ => 3,
        }
    }

    fn covers(self, x: usize, y: usize, w: usize, h: usize) -> bool {
        match self {
            Shape::Rect => true,
            Shape::Ellipse => {
                let rx = w as f64 / 2.0;
                let ry = h as f64 / 2.0;
                let dx = (x as f64 + 0.5 - rx) / rx;
                let dy = (y as f64 + 0.5 - ry) / ry;
                dx * dx + dy * dy <= 1.0
            }
            Shape::LShape => !(x >= w / 2 && y < h / 2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryStyle {
    pub shape: Shape,
    pub color: [u8; 3],
    /// One-pixel border color, drawn inside the object mask.
    #[serde(default)]
    pub outline: Option<[u8; 3]>,
    /// Std-dev of per-pixel luminance noise inside the object.
    #[serde(default)]
    pub texture: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Background {
    pub color: [u8; 3],
    /// Color reached at the right edge by a horizontal linear ramp.
    #[serde(default)]
    pub gradient_to: Option<[u8; 3]>,
    /// Std-dev of per-channel Gaussian noise.
    #[serde(default)]
    pub noise: f64,
}

impl Default for Background {
    fn default() -> Self {
        Self {
            color: [96, 104, 88],
            gradient_to: Some([132, 128, 112]),
            noise: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub object_count: usize,
    /// Style of each category; category `k` (1-based) uses entry `k − 1`.
    pub categories: Vec<CategoryStyle>,
    /// Inclusive range of object box sides in pixels.
    pub scale: (usize, usize),
    /// Minimum count of background pixels between object boxes; negative
    /// values allow overlaps of that many pixels (resolved by occlusion).
    pub min_gap: i64,
    pub background: Background,
    pub seed: u64,
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            object_count: 4,
            categories: default_palette(),
            scale: (8, 16),
            min_gap: 2,
            background: Background::default(),
            seed: 0,
            max_attempts: 2000,
        }
    }
}

pub fn default_palette() -> Vec<CategoryStyle> {
    vec![
        CategoryStyle {
            shape: Shape::Rect,
            color: [200, 64, 56],
            outline: Some([24, 20, 20]),
            texture: 3.0,
        },
        CategoryStyle {
            shape: Shape::Ellipse,
            color: [60, 150, 210],
            outline: Some([24, 20, 20]),
            texture: 3.0,
        },
    ]
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene must be at least 1x1".into()));
        }
        if self.object_count > 0 && self.categories.is_empty() {
            return Err(Error::Config(
                "scene with objects needs at least one category style".into(),
            ));
        }
        let (lo, hi) = self.scale;
        let need = self
            .categories
            .iter()
            .map(|c| c.shape.min_side())
            .max()
            .unwrap_or(3);
        if lo < need || hi < lo {
            return Err(Error::Config(format!(
                "scale range ({lo}, {hi}) must satisfy {need} ≤ min ≤ max"
            )));
        }
        if self.object_count > 0 && (hi > self.width || hi > self.height) {
            return Err(Error::Config(format!(
                "largest object side {hi} exceeds the {}x{} frame",
                self.width, self.height
            )));
        }
        if self.categories.iter().any(|c| !(c.texture >= 0.0)) || !(self.background.noise >= 0.0) {
            return Err(Error::Config("noise levels must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// A rendered scene with ground truth. `background` is the layer the objects
/// were painted on.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImageGrid,
    pub background: ImageGrid,
    pub masks: Vec<Mask>,
    pub boxes: Vec<BBox>,
    pub points: Vec<PointAnnotation>,
}

impl Scene {
    pub fn object_count(&self) -> usize {
        self.boxes.len()
    }

    pub fn to_record(&self, file: impl Into<String>) -> ImageRecord {
        ImageRecord {
            file: file.into(),
            width: self.image.width(),
            height: self.image.height(),
            points: self.points.clone(),
            gt_boxes: Some(self.boxes.clone()),
            gt_masks: Some(self.masks.iter().map(Mask::to_rle).collect()),
            pseudo_boxes: None,
            pseudo_masks: None,
        }
    }

    /// Ground-truth indicator semantics: 1 on each object's category layer
    /// inside its mask, 0 elsewhere.
    pub fn indicator_semantics(
        &self,
        categories: usize,
    ) -> Result<crate::sempred::SemanticMap<f64>> {
        let (h, w) = (self.image.height(), self.image.width());
        let mut scores = vec![0.0; h * w * categories];
        for (m, b) in self.masks.iter().zip(&self.boxes) {
            let c = b.category as usize - 1;
            if c >= categories {
                return Err(Error::Validation(format!(
                    "category {} exceeds {categories}",
                    b.category
                )));
            }
            for (i, _) in m.bits().iter().enumerate().filter(|(_, &v)| v) {
                scores[i * categories + c] = 1.0;
            }
        }
        crate::sempred::SemanticMap::new(h, w, categories, scores)
    }
}

fn render_background<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    bg: &Background,
    rng: &mut R,
) -> ImageGrid {
    let noise = (bg.noise > 0.0).then(|| Normal::new(0.0, bg.noise).unwrap());
    let mut data = Vec::with_capacity(h * w * 3);
    for _y in 0..h {
        for x in 0..w {
            let t = if w > 1 {
                x as f64 / (w - 1) as f64
            } else {
                0.0
            };
            for c in 0..3 {
                let a = bg.color[c] as f64;
                let b = bg.gradient_to.map_or(a, |g| g[c] as f64);
                let mut v = a + (b - a) * t;
                if let Some(n) = &noise {
                    v += n.sample(rng);
                }
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageGrid::new(h, w, data).expect("background dimensions are valid")
}

struct Placed {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
    category: u32,
}

impl Placed {
    /// Background pixels between the boxes along the separating axis;
    /// negative when they overlap.
    fn separation(&self, o: &Placed) -> i64 {
        let gap = |a0: usize, a1: usize, b0: usize, b1: usize| -> i64 {
            if a1 < b0 {
                b0 as i64 - a1 as i64 - 1
            } else if b1 < a0 {
                a0 as i64 - b1 as i64 - 1
            } else {
                -((a1.min(b1) - a0.max(b0) + 1) as i64)
            }
        };
        let gx = gap(self.x, self.x + self.w - 1, o.x, o.x + o.w - 1);
        let gy = gap(self.y, self.y + self.h - 1, o.y, o.y + o.h - 1);
        gx.max(gy)
    }
}

fn shape_mask(shape: Shape, p: &Placed, height: usize, width: usize) -> Mask {
    let mut m = Mask::empty(height, width);
    for dy in 0..p.h {
        for dx in 0..p.w {
            if shape.covers(dx, dy, p.w, p.h) {
                m.set(p.x + dx, p.y + dy, true);
            }
        }
    }
    m
}

/// Paints `style` onto `image` over `mask`.
fn paint<R: Rng + ?Sized>(image: &mut ImageGrid, mask: &Mask, style: &CategoryStyle, rng: &mut R) {
    let tex = (style.texture > 0.0).then(|| Normal::new(0.0, style.texture).unwrap());
    let (h, w) = (mask.height(), mask.width());
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let border = style.outline.is_some()
                && (crate::grid::neighbours(x, y, w, h, 4).count() < 4
                    || crate::grid::neighbours(x, y, w, h, 4).any(|(nx, ny)| !mask.get(nx, ny)));
            let base = match style.outline {
                Some(o) if border => o,
                _ => style.color,
            };
            let n = tex.as_ref().map_or(0.0, |d| d.sample(rng));
            let px = base.map(|c| (c as f64 + n).round().clamp(0.0, 255.0) as u8);
            image.set_pixel(x, y, px);
        }
    }
}

fn bbox_of(mask: &Mask, category: u32, id: u32) -> Option<BBox> {
    mask.bounds()
        .map(|(x0, y0, x1, y1)| BBox::new(x0, y0, x1, y1, category, id))
}

fn sample_point<R: Rng + ?Sized>(mask: &Mask, rng: &mut R) -> (usize, usize) {
    let n = mask.count();
    let k = rng.random_range(0..n);
    let i = mask
        .bits()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .nth(k)
        .unwrap()
        .0;
    (i % mask.width(), i / mask.width())
}

/// Renders a scene. Placement, painting and point sampling draw from
/// separate named streams of `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let streams = SeedStreams::new(spec.seed);
    let mut layout = streams.rng("layout");
    let mut paint_rng = streams.rng("paint");
    let mut point_rng = streams.rng("points");
    let (h, w) = (spec.height, spec.width);
    let background = render_background(h, w, &spec.background, &mut paint_rng);

    let mut placed: Vec<Placed> = Vec::with_capacity(spec.object_count);
    let mut masks: Vec<Mask> = Vec::with_capacity(spec.object_count);
    let mut areas: Vec<usize> = Vec::new();
    for k in 0..spec.object_count {
        let category = layout.random_range(0..spec.categories.len()) as u32 + 1;
        let shape = spec.categories[category as usize - 1].shape;
        let mut ok = false;
        for _ in 0..spec.max_attempts {
            let ow = layout.random_range(spec.scale.0..=spec.scale.1);
            let oh = layout.random_range(spec.scale.0..=spec.scale.1);
            let cand = Placed {
                x: layout.random_range(0..=w - ow),
                y: layout.random_range(0..=h - oh),
                w: ow,
                h: oh,
                category,
            };
            if placed.iter().any(|p| p.separation(&cand) < spec.min_gap) {
                continue;
            }
            let m = shape_mask(shape, &cand, h, w);
            // occlusion must leave every earlier object at least half visible
            let squeezed = masks.iter().zip(&areas).any(|(old, &area)| {
                let left = old
                    .bits()
                    .iter()
                    .zip(m.bits())
                    .filter(|(a, b)| **a && !**b)
                    .count();
                2 * left < area
            });
            if squeezed {
                continue;
            }
            for old in masks.iter_mut() {
                let bits: Vec<bool> = old
                    .bits()
                    .iter()
                    .zip(m.bits())
                    .map(|(a, b)| *a && !*b)
                    .collect();
                *old = Mask::new(h, w, bits)?;
            }
            areas.push(m.count());
            masks.push(m);
            placed.push(cand);
            ok = true;
            break;
        }
        if !ok {
            return Err(Error::Infeasible(format!(
                "could not place object {} of {} in a {w}x{h} frame after {} attempts; use fewer or smaller objects",
                k + 1,
                spec.object_count,
                spec.max_attempts
            )));
        }
    }

    let mut image = background.clone();
    for (m, p) in masks.iter().zip(&placed) {
        paint(
            &mut image,
            m,
            &spec.categories[p.category as usize - 1],
            &mut paint_rng,
        );
    }
    let mut boxes = Vec::with_capacity(masks.len());
    let mut points = Vec::with_capacity(masks.len());
    for (k, (m, p)) in masks.iter().zip(&placed).enumerate() {
        let id = k as u32 + 1;
        boxes.push(bbox_of(m, p.category, id).expect("placed objects stay visible"));
        let (x, y) = sample_point(m, &mut point_rng);
        points.push(PointAnnotation::new(x, y, p.category, id));
    }
    Ok(Scene {
        image,
        background,
        masks,
        boxes,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyLayout {
    /// Left to right, wrapping onto new rows when the frame is full.
    Row,
    /// Near-square grid with `ceil(sqrt(n))` columns.
    Grid,
}

/// Replaces the single object of `base` by `n` pixel-identical copies spaced
/// `gap` background pixels apart. The block starts at the original position
/// and is shifted back into the frame when it would overflow. Points keep
/// their offset inside the object.
pub fn copy_paste_synthesize(
    base: &Scene,
    n: usize,
    gap: usize,
    layout: CopyLayout,
) -> Result<Scene> {
    if base.object_count() != 1 {
        return Err(Error::Validation(format!(
            "copy-and-paste needs a single-object base scene, got {} objects",
            base.object_count()
        )));
    }
    if n == 0 {
        return Err(Error::Config("copy count must be ≥ 1".into()));
    }
    if n == 1 {
        return Ok(base.clone());
    }
    let (h, w) = (base.image.height(), base.image.width());
    let b = base.boxes[0];
    let (ow, oh) = (b.width(), b.height());
    let (sx, sy) = (ow + gap, oh + gap);
    let cols = match layout {
        CopyLayout::Row => ((w + gap) / sx).max(1).min(n),
        CopyLayout::Grid => (n as f64).sqrt().ceil() as usize,
    };
    let rows = n.div_ceil(cols);
    let block_w = cols * sx - gap;
    let block_h = rows * sy - gap;
    if block_w > w || block_h > h {
        return Err(Error::Infeasible(format!(
            "{n} copies of a {ow}x{oh} object with gap {gap} need {block_w}x{block_h}, frame is {w}x{h}"
        )));
    }
    let x0 = b.x_min.min(w - block_w);
    let y0 = b.y_min.min(h - block_h);

    let mask = &base.masks[0];
    let mut image = base.image.clone();
    for y in b.y_min..=b.y_max {
        for x in b.x_min..=b.x_max {
            if mask.get(x, y) {
                image.set_pixel(x, y, base.background.pixel(x, y));
            }
        }
    }
    let p = base.points[0];
    let mut masks = Vec::with_capacity(n);
    let mut boxes = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n);
    for k in 0..n {
        let (cx, cy) = (x0 + (k % cols) * sx, y0 + (k / cols) * sy);
        let mut m = Mask::empty(h, w);
        for dy in 0..oh {
            for dx in 0..ow {
                let (srcx, srcy) = (b.x_min + dx, b.y_min + dy);
                if mask.get(srcx, srcy) {
                    m.set(cx + dx, cy + dy, true);
                    image.set_pixel(cx + dx, cy + dy, base.image.pixel(srcx, srcy));
                }
            }
        }
        let id = k as u32 + 1;
        boxes.push(BBox::new(cx, cy, cx + ow - 1, cy + oh - 1, b.category, id));
        points.push(PointAnnotation::new(
            cx + p.x - b.x_min,
            cy + p.y - b.y_min,
            p.category,
            id,
        ));
        masks.push(m);
    }
    Ok(Scene {
        image,
        background: base.background.clone(),
        masks,
        boxes,
        points,
    })
}

/// Settings for a generated dataset: per-image object counts are drawn
/// uniformly from `objects`, except that a `single_fraction` share of the
/// images holds exactly one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_images: usize,
    pub objects: (usize, usize),
    pub single_fraction: f64,
    pub scene: SceneSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_images: 16,
            objects: (1, 6),
            single_fraction: 0.25,
            scene: SceneSpec::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.0 > self.objects.1 {
            return Err(Error::Config(format!(
                "object range {:?} is empty",
                self.objects
            )));
        }
        if !(0.0..=1.0).contains(&self.single_fraction) {
            return Err(Error::Config(format!(
                "single_fraction {} outside [0, 1]",
                self.single_fraction
            )));
        }
        self.scene.validate()
    }

    /// Scene spec of image `index`, with a seed derived from `seed`.
    pub fn scene_spec(&self, seed: u64, index: usize) -> SceneSpec {
        let streams = SeedStreams::new(seed);
        let mut rng = streams.rng_indexed("counts", index as u64);
        let single = rng.random::<f64>() < self.single_fraction;
        let count = if single {
            1
        } else {
            rng.random_range(self.objects.0..=self.objects.1)
        };
        SceneSpec {
            object_count: count,
            seed: streams.derive_indexed("scene", index as u64),
            ..self.scene.clone()
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Vec<Scene>> {
        self.validate()?;
        (0..self.n_images)
            .map(|i| generate_scene(&self.scene_spec(seed, i)))
            .collect()
    }
}
