//! Sparse-feature-guided semantic prediction.
//!
//! Category meta features are masked averages of features from images that
//! contain a single object. For every category `c` the pixel features are
//! aggregated with meta feature `c`:
//!
//! ```text
//! s   = ReLU(W_sub · (F − meta_c) + b_sub)
//! m   = ReLU(W_mul · (F ⊙ meta_c) + b_mul)
//! out = ReLU(W_cat · [s; m; F] + b_cat)
//! ```
//!
//! and a shared linear + sigmoid predictor scores `out`; only channel `c` of
//! branch `c` is kept. The same predictor applied directly to `F` is the plain
//! (unguided) predictor.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::annotation::Mask;
use crate::error::{Error, Result};
use crate::featext::FeatureMap;
use crate::scalar::{Scalar, PROB_EPS};

/// Fully connected layer, `weight` stored row-major as `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            out_dim,
            in_dim,
            weight: vec![T::zero(); out_dim * in_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn from_parts(out_dim: usize, in_dim: usize, weight: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weight.len() != out_dim * in_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "linear {out_dim}x{in_dim}: got {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            out_dim,
            in_dim,
            weight,
            bias,
        })
    }

    /// `[I | I | ...]` style block identity: row `r` has ones at `r + k·out_dim`.
    pub fn block_identity(out_dim: usize, in_dim: usize) -> Self {
        let mut l = Self::zeros(out_dim, in_dim);
        for r in 0..out_dim {
            let mut c = r;
            while c < in_dim {
                l.weight[r * in_dim + c] = T::one();
                c += out_dim;
            }
        }
        l
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.weight[r * self.in_dim..(r + 1) * self.in_dim]
    }

    #[inline]
    pub fn forward_row(&self, r: usize, x: &[T]) -> T {
        dot(self.row(r), x) + self.bias[r]
    }

    #[inline]
    pub fn forward_into(&self, x: &[T], out: &mut [T]) {
        for (r, o) in out.iter_mut().enumerate().take(self.out_dim) {
            *o = self.forward_row(r, x);
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// Aggregator weights: subtraction and multiplication branches (`D → D`) and
/// the fusion layer over their concatenation with the input (`3D → D`).
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams<T> {
    pub sub: Linear<T>,
    pub mul: Linear<T>,
    pub cat: Linear<T>,
}

impl<T: Scalar> AggregatorParams<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            sub: Linear::zeros(dim, dim),
            mul: Linear::zeros(dim, dim),
            cat: Linear::zeros(dim, 3 * dim),
        }
    }

    /// Configuration whose output is `ReLU(F)`: both branches are zero and the
    /// fusion layer selects the input slice.
    pub fn pass_through(dim: usize) -> Self {
        let mut p = Self::zeros(dim);
        for r in 0..dim {
            p.cat.weight[r * 3 * dim + 2 * dim + r] = T::one();
        }
        p
    }

    pub fn dim(&self) -> usize {
        self.sub.in_dim
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let shapes_ok = (self.sub.out_dim, self.sub.in_dim) == (d, d)
            && (self.mul.out_dim, self.mul.in_dim) == (d, d)
            && (self.cat.out_dim, self.cat.in_dim) == (d, 3 * d);
        if !shapes_ok {
            return Err(Error::Shape(format!(
                "aggregator layers are not D×D, D×D, D×3D for D = {d}"
            )));
        }
        if !(self.sub.is_finite() && self.mul.is_finite() && self.cat.is_finite()) {
            return Err(Error::Validation(
                "aggregator parameters are not finite".into(),
            ));
        }
        Ok(())
    }

    fn layers(&self) -> [&Linear<T>; 3] {
        [&self.sub, &self.mul, &self.cat]
    }

    fn layers_mut(&mut self) -> [&mut Linear<T>; 3] {
        [&mut self.sub, &mut self.mul, &mut self.cat]
    }
}

/// Shared linear + sigmoid predictor, `C × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams<T> {
    pub linear: Linear<T>,
}

impl<T: Scalar> PredictorParams<T> {
    pub fn zeros(dim: usize, categories: usize) -> Self {
        Self {
            linear: Linear::zeros(categories, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.in_dim
    }

    pub fn categories(&self) -> usize {
        self.linear.out_dim
    }

    pub fn validate(&self) -> Result<()> {
        if !self.linear.is_finite() {
            return Err(Error::Validation(
                "predictor parameters are not finite".into(),
            ));
        }
        Ok(())
    }
}

/// Score clamped into `[ε, 1 − ε]`, so finite logits never saturate.
#[inline]
pub fn score_from_logit<T: Scalar>(z: T) -> T {
    let eps = T::lit(PROB_EPS);
    z.sigmoid().max(eps).min(T::one() - eps)
}

/// How a category's meta feature absorbs new sparse representations.
#[derive(Debug, Default, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum MetaUpdate {
    /// Exact count-weighted mean of every representation seen so far.
    #[default]
    RunningMean,
    /// `v ← m·v + (1 − m)·rep`, initialised with the first representation.
    Ema { momentum: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaFeatureBank<T> {
    vectors: Vec<Vec<T>>,
    counts: Vec<u64>,
    update: MetaUpdate,
}

impl<T: Scalar> MetaFeatureBank<T> {
    pub fn new(categories: usize, dim: usize, update: MetaUpdate) -> Result<Self> {
        if let MetaUpdate::Ema { momentum } = update {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::Config(format!(
                    "EMA momentum {momentum} outside [0, 1)"
                )));
            }
        }
        Ok(Self {
            vectors: vec![vec![T::zero(); dim]; categories],
            counts: vec![0; categories],
            update,
        })
    }

    pub fn from_parts(vectors: Vec<Vec<T>>, counts: Vec<u64>, update: MetaUpdate) -> Result<Self> {
        if vectors.len() != counts.len() {
            return Err(Error::Shape(
                "bank vectors and counts differ in length".into(),
            ));
        }
        let dim = vectors.first().map_or(0, |v| v.len());
        if vectors
            .iter()
            .any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Validation(
                "bank vectors must be finite and equally sized".into(),
            ));
        }
        let mut bank = Self {
            vectors,
            counts,
            update,
        };
        for (v, &n) in bank.vectors.iter_mut().zip(&bank.counts) {
            if n == 0 {
                v.iter_mut().for_each(|x| *x = T::zero());
            }
        }
        Ok(bank)
    }

    pub fn categories(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, |v| v.len())
    }

    pub fn update_mode(&self) -> MetaUpdate {
        self.update
    }

    pub fn set_update_mode(&mut self, update: MetaUpdate) {
        self.update = update;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn vectors(&self) -> &[Vec<T>] {
        &self.vectors
    }

    /// Meta feature of a 0-based category index.
    pub fn vector(&self, index: usize) -> &[T] {
        &self.vectors[index]
    }

    pub fn is_available(&self, index: usize) -> bool {
        self.counts[index] > 0
    }

    pub fn any_available(&self) -> bool {
        self.counts.iter().any(|&n| n > 0)
    }

    pub fn reset(&mut self) {
        for v in &mut self.vectors {
            v.iter_mut().for_each(|x| *x = T::zero());
        }
        self.counts.iter_mut().for_each(|n| *n = 0);
    }

    fn absorb(&mut self, index: usize, rep: &[T]) {
        let n = self.counts[index];
        let v = &mut self.vectors[index];
        if n == 0 {
            v.copy_from_slice(rep);
        } else {
            match self.update {
                MetaUpdate::RunningMean => {
                    let k = T::from_usize_lossy(n as usize + 1);
                    for (a, &r) in v.iter_mut().zip(rep) {
                        *a += (r - *a) / k;
                    }
                }
                MetaUpdate::Ema { momentum } => {
                    let m = T::lit(momentum);
                    for (a, &r) in v.iter_mut().zip(rep) {
                        *a = m * *a + (T::one() - m) * r;
                    }
                }
            }
        }
        self.counts[index] = n + 1;
    }
}

/// Mean feature vector over the set pixels of `mask`; `None` for an empty mask.
pub fn masked_average_pool<T: Scalar>(
    features: &FeatureMap<T>,
    mask: &Mask,
) -> Result<Option<Vec<T>>> {
    if (mask.height(), mask.width()) != (features.height(), features.width()) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs features {}x{}",
            mask.height(),
            mask.width(),
            features.height(),
            features.width()
        )));
    }
    let mut acc = vec![T::zero(); features.channels()];
    let mut n = 0usize;
    for (i, _) in mask.bits().iter().enumerate().filter(|(_, &b)| b) {
        for (a, &f) in acc.iter_mut().zip(features.pixel(i)) {
            *a += f;
        }
        n += 1;
    }
    if n == 0 {
        return Ok(None);
    }
    let k = T::from_usize_lossy(n);
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(Some(acc))
}

/// One sparse (single-object) image contributing to the meta features.
#[derive(Debug, Clone, Copy)]
pub struct SparseSample<'a, T> {
    pub features: &'a FeatureMap<T>,
    pub mask: &'a Mask,
    /// 1-based category.
    pub category: u32,
}

/// Folds sparse-object representations into a copy of `bank`. Empty masks are
/// skipped with a warning.
pub fn encode_meta_features<T: Scalar>(
    samples: &[SparseSample<'_, T>],
    bank: &MetaFeatureBank<T>,
) -> Result<MetaFeatureBank<T>> {
    let mut out = bank.clone();
    for (i, s) in samples.iter().enumerate() {
        if s.category == 0 || s.category as usize > out.categories() {
            return Err(Error::Validation(format!(
                "sparse sample {i}: category {} outside 1..={}",
                s.category,
                out.categories()
            )));
        }
        if s.features.channels() != out.dim() {
            return Err(Error::Shape(format!(
                "sparse sample {i}: {} feature channels, bank has {}",
                s.features.channels(),
                out.dim()
            )));
        }
        match masked_average_pool(s.features, s.mask)? {
            Some(rep) => out.absorb(s.category as usize - 1, &rep),
            None => log::warn!(
                "sparse sample {i} (category {}) has an empty mask; skipped",
                s.category
            ),
        }
    }
    Ok(out)
}

/// H×W×C per-pixel category scores in `[0, 1]`, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap<T> {
    height: usize,
    width: usize,
    categories: usize,
    scores: Vec<T>,
}

impl<T: Scalar> SemanticMap<T> {
    pub fn new(height: usize, width: usize, categories: usize, scores: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || categories == 0 {
            return Err(Error::Shape(format!(
                "semantic map must be non-empty, got {height}x{width}x{categories}"
            )));
        }
        if scores.len() != height * width * categories {
            return Err(Error::Shape(format!(
                "semantic map has {} scores, expected {}",
                scores.len(),
                height * width * categories
            )));
        }
        if scores.iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(Error::Validation(
                "semantic scores must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            categories,
            scores,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn scores_mut(&mut self) -> &mut [T] {
        &mut self.scores
    }

    #[inline]
    pub fn pixel(&self, index: usize) -> &[T] {
        &self.scores[index * self.categories..(index + 1) * self.categories]
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[T] {
        self.pixel(y * self.width + x)
    }

    /// Category layer `c` (0-based) as a row-major plane.
    pub fn layer(&self, c: usize) -> Vec<T> {
        self.scores
            .iter()
            .skip(c)
            .step_by(self.categories)
            .copied()
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> SemanticMap<U> {
        SemanticMap {
            height: self.height,
            width: self.width,
            categories: self.categories,
            scores: crate::scalar::cast_slice(&self.scores),
        }
    }

    /// Bilinear resize (align-corners off, half-pixel centres).
    pub fn resize_bilinear(&self, height: usize, width: usize) -> SemanticMap<T> {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let c = self.categories;
        let mut scores = vec![T::zero(); height * width * c];
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = T::lit(fy - y0 as f64);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = T::lit(fx - x0 as f64);
                let (a, b) = (self.at(x0, y0), self.at(x1, y0));
                let (d, e) = (self.at(x0, y1), self.at(x1, y1));
                let o = &mut scores[(y * width + x) * c..(y * width + x + 1) * c];
                for k in 0..c {
                    let top = a[k] + (b[k] - a[k]) * wx;
                    let bot = d[k] + (e[k] - d[k]) * wx;
                    o[k] = (top + (bot - top) * wy).max(T::zero()).min(T::one());
                }
            }
        }
        SemanticMap {
            height,
            width,
            categories: c,
            scores,
        }
    }
}

/// Per-pixel aggregation scratch: pre-activations kept for backprop.
struct AggScratch<T> {
    sub_in: Vec<T>,
    mul_in: Vec<T>,
    sub_pre: Vec<T>,
    mul_pre: Vec<T>,
    cat_in: Vec<T>,
    cat_pre: Vec<T>,
    out: Vec<T>,
}

impl<T: Scalar> AggScratch<T> {
    fn new(d: usize) -> Self {
        Self {
            sub_in: vec![T::zero(); d],
            mul_in: vec![T::zero(); d],
            sub_pre: vec![T::zero(); d],
            mul_pre: vec![T::zero(); d],
            cat_in: vec![T::zero(); 3 * d],
            cat_pre: vec![T::zero(); d],
            out: vec![T::zero(); d],
        }
    }

    fn forward(&mut self, f: &[T], meta: &[T], p: &AggregatorParams<T>) {
        let d = f.len();
        for k in 0..d {
            self.sub_in[k] = f[k] - meta[k];
            self.mul_in[k] = f[k] * meta[k];
        }
        p.sub.forward_into(&self.sub_in, &mut self.sub_pre);
        p.mul.forward_into(&self.mul_in, &mut self.mul_pre);
        for k in 0..d {
            self.cat_in[k] = self.sub_pre[k].relu();
            self.cat_in[d + k] = self.mul_pre[k].relu();
            self.cat_in[2 * d + k] = f[k];
        }
        p.cat.forward_into(&self.cat_in, &mut self.cat_pre);
        for k in 0..d {
            self.out[k] = self.cat_pre[k].relu();
        }
    }
}

/// Signs of every ReLU pre-activation of the guided branches, pixel-major.
/// Two parameter vectors with equal patterns lie on the same linear piece.
pub(crate) fn relu_pattern<T: Scalar>(
    features: &FeatureMap<T>,
    bank: &MetaFeatureBank<T>,
    agg: &AggregatorParams<T>,
) -> Vec<bool> {
    let d = agg.dim();
    let mut scratch = AggScratch::new(d);
    let mut out = Vec::with_capacity(features.len() * bank.categories() * 3 * d);
    for i in 0..features.len() {
        for c in 0..bank.categories() {
            scratch.forward(features.pixel(i), bank.vector(c), agg);
            for v in scratch
                .sub_pre
                .iter()
                .chain(&scratch.mul_pre)
                .chain(&scratch.cat_pre)
            {
                out.push(*v > T::zero());
            }
        }
    }
    out
}

fn check_dims<T: Scalar>(features: &FeatureMap<T>, d: usize, what: &str) -> Result<()> {
    if features.channels() != d {
        return Err(Error::Shape(format!(
            "{} feature channels, {what} expects {d}",
            features.channels()
        )));
    }
    Ok(())
}

/// Aggregates every pixel with one meta feature; output has the input's shape.
pub fn aggregate<T: Scalar>(
    features: &FeatureMap<T>,
    meta: &[T],
    params: &AggregatorParams<T>,
) -> Result<FeatureMap<T>> {
    params.validate()?;
    let d = params.dim();
    check_dims(features, d, "aggregator")?;
    if meta.len() != d {
        return Err(Error::Shape(format!(
            "meta feature has {} values, expected {d}",
            meta.len()
        )));
    }
    let mut scratch = AggScratch::new(d);
    let mut data = Vec::with_capacity(features.data().len());
    for i in 0..features.len() {
        scratch.forward(features.pixel(i), meta, params);
        data.extend_from_slice(&scratch.out);
    }
    FeatureMap::new(features.height(), features.width(), d, data)
}

/// Plain predictor: `score = sigmoid(W·F + b)` for every category.
pub fn predict_semantic_plain<T: Scalar>(
    features: &FeatureMap<T>,
    pred: &PredictorParams<T>,
) -> Result<SemanticMap<T>> {
    pred.validate()?;
    check_dims(features, pred.dim(), "predictor")?;
    let c = pred.categories();
    let mut scores = Vec::with_capacity(features.len() * c);
    for i in 0..features.len() {
        let f = features.pixel(i);
        for k in 0..c {
            scores.push(score_from_logit(pred.linear.forward_row(k, f)));
        }
    }
    SemanticMap::new(features.height(), features.width(), c, scores)
}

/// Guided predictor: channel `c` comes from the branch aggregated with meta
/// feature `c`. Unavailable meta features are replaced by the zero vector.
pub fn predict_semantic<T: Scalar>(
    features: &FeatureMap<T>,
    bank: &MetaFeatureBank<T>,
    agg: &AggregatorParams<T>,
    pred: &PredictorParams<T>,
) -> Result<SemanticMap<T>> {
    agg.validate()?;
    pred.validate()?;
    let d = agg.dim();
    let c = pred.categories();
    check_dims(features, d, "aggregator")?;
    if pred.dim() != d || bank.dim() != d || bank.categories() != c {
        return Err(Error::Shape(format!(
            "inconsistent dims: aggregator {d}, predictor {}x{}, bank {}x{}",
            c,
            pred.dim(),
            bank.categories(),
            bank.dim()
        )));
    }
    let mut scratch = AggScratch::new(d);
    let mut scores = vec![T::zero(); features.len() * c];
    for k in 0..c {
        let meta = bank.vector(k);
        for i in 0..features.len() {
            scratch.forward(features.pixel(i), meta, agg);
            scores[i * c + k] = score_from_logit(pred.linear.forward_row(k, &scratch.out));
        }
    }
    SemanticMap::new(features.height(), features.width(), c, scores)
}

/// Pairwise cosine similarity of the meta features. Entries involving a
/// zero-norm vector are NaN.
pub fn meta_similarity_matrix<T: Scalar>(bank: &MetaFeatureBank<T>) -> Vec<Vec<f64>> {
    let vs: Vec<Vec<f64>> = bank
        .vectors()
        .iter()
        .map(|v| v.iter().map(|x| x.to_f64_lossy()).collect())
        .collect();
    let norms: Vec<f64> = vs
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        log::warn!(
            "meta feature {} has zero norm; its similarities are undefined",
            i + 1
        );
    }
    let n = vs.len();
    let mut m = vec![vec![f64::NAN; n]; n];
    for i in 0..n {
        for j in 0..n {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                m[i][j] = if i == j {
                    1.0
                } else {
                    (vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum::<f64>()
                        / (norms[i] * norms[j]))
                        .clamp(-1.0, 1.0)
                };
            }
        }
    }
    m
}

/// Trainable parameters plus the meta feature bank.
#[derive(Debug, Clone, PartialEq)]
pub struct PlugModel<T> {
    pub aggregator: AggregatorParams<T>,
    pub predictor: PredictorParams<T>,
    pub bank: MetaFeatureBank<T>,
}

impl<T: Scalar> PlugModel<T> {
    /// Random initialisation. The predictor starts near a 1% foreground prior;
    /// the aggregator starts close to a pass-through of the input features.
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        categories: usize,
        update: MetaUpdate,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || categories == 0 {
            return Err(Error::Config(
                "model needs at least one feature channel and one category".into(),
            ));
        }
        let mut aggregator = AggregatorParams::pass_through(dim);
        let he = Normal::new(0.0, (2.0 / dim as f64).sqrt()).unwrap();
        let small = Normal::new(0.0, 0.05).unwrap();
        for w in aggregator
            .sub
            .weight
            .iter_mut()
            .chain(aggregator.mul.weight.iter_mut())
        {
            *w = T::lit(he.sample(rng));
        }
        for w in aggregator.cat.weight.iter_mut() {
            *w += T::lit(small.sample(rng));
        }
        let mut predictor = PredictorParams::zeros(dim, categories);
        let tiny = Normal::new(0.0, 0.01).unwrap();
        for w in predictor.linear.weight.iter_mut() {
            *w = T::lit(tiny.sample(rng));
        }
        let prior: f64 = 0.01;
        let b0 = -((1.0 - prior) / prior).ln();
        predictor
            .linear
            .bias
            .iter_mut()
            .for_each(|b| *b = T::lit(b0));
        Ok(Self {
            aggregator,
            predictor,
            bank: MetaFeatureBank::new(categories, dim, update)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.predictor.dim()
    }

    pub fn categories(&self) -> usize {
        self.predictor.categories()
    }

    pub fn predict(&self, features: &FeatureMap<T>, guided: bool) -> Result<SemanticMap<T>> {
        if guided {
            predict_semantic(features, &self.bank, &self.aggregator, &self.predictor)
        } else {
            predict_semantic_plain(features, &self.predictor)
        }
    }

    /// Trainable parameters in checkpoint order:
    /// `w_sub, b_sub, w_mul, b_mul, w_cat, b_cat, w, b`.
    pub fn params_flat(&self) -> Vec<T> {
        let mut v = Vec::new();
        for l in self.aggregator.layers() {
            v.extend_from_slice(&l.weight);
            v.extend_from_slice(&l.bias);
        }
        v.extend_from_slice(&self.predictor.linear.weight);
        v.extend_from_slice(&self.predictor.linear.bias);
        v
    }

    pub fn set_params_flat(&mut self, flat: &[T]) -> Result<()> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(Error::Shape(format!(
                "{} parameters given, model has {expected}",
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        let mut fill = |dst: &mut [T]| dst.iter_mut().for_each(|x| *x = it.next().unwrap());
        for l in self.aggregator.layers_mut() {
            fill(&mut l.weight);
            fill(&mut l.bias);
        }
        fill(&mut self.predictor.linear.weight);
        fill(&mut self.predictor.linear.bias);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.aggregator
            .layers()
            .iter()
            .map(|l| l.param_count())
            .sum::<usize>()
            + self.predictor.linear.param_count()
    }

    /// Gradient of a loss w.r.t. the flat parameters given `dscores`, the
    /// gradient w.r.t. the semantic scores produced by [`PlugModel::predict`].
    /// Meta features are treated as constants.
    pub fn backward(
        &self,
        features: &FeatureMap<T>,
        guided: bool,
        scores: &SemanticMap<T>,
        dscores: &[T],
    ) -> Result<Vec<T>> {
        let d = self.dim();
        let c = self.categories();
        check_dims(features, d, "model")?;
        if dscores.len() != scores.scores().len() || scores.len() != features.len() {
            return Err(Error::Shape(
                "score gradient does not match prediction".into(),
            ));
        }
        let mut agg_g = AggregatorParams::zeros(d);
        let mut pred_g = PredictorParams::zeros(d, c);
        if !guided {
            for i in 0..features.len() {
                let f = features.pixel(i);
                for k in 0..c {
                    let g = dscores[i * c + k];
                    if g == T::zero() {
                        continue;
                    }
                    let y = scores.pixel(i)[k];
                    let dz = g * y * (T::one() - y);
                    let row = &mut pred_g.linear.weight[k * d..(k + 1) * d];
                    for (w, &x) in row.iter_mut().zip(f) {
                        *w += dz * x;
                    }
                    pred_g.linear.bias[k] += dz;
                }
            }
        } else {
            let mut s = AggScratch::new(d);
            let mut dcat_pre = vec![T::zero(); d];
            let mut dcat_in = vec![T::zero(); 3 * d];
            for k in 0..c {
                let meta = self.bank.vector(k);
                let wk = self.predictor.linear.row(k);
                for i in 0..features.len() {
                    let g = dscores[i * c + k];
                    if g == T::zero() {
                        continue;
                    }
                    let f = features.pixel(i);
                    s.forward(f, meta, &self.aggregator);
                    let y = scores.pixel(i)[k];
                    let dz = g * y * (T::one() - y);
                    let row = &mut pred_g.linear.weight[k * d..(k + 1) * d];
                    for (w, &x) in row.iter_mut().zip(&s.out) {
                        *w += dz * x;
                    }
                    pred_g.linear.bias[k] += dz;

                    for r in 0..d {
                        dcat_pre[r] = if s.cat_pre[r] > T::zero() {
                            dz * wk[r]
                        } else {
                            T::zero()
                        };
                    }
                    dcat_in.iter_mut().for_each(|v| *v = T::zero());
                    let cat = &self.aggregator.cat;
                    for r in 0..d {
                        let gr = dcat_pre[r];
                        if gr == T::zero() {
                            continue;
                        }
                        let grow = &mut agg_g.cat.weight[r * 3 * d..(r + 1) * 3 * d];
                        for (w, &x) in grow.iter_mut().zip(&s.cat_in) {
                            *w += gr * x;
                        }
                        agg_g.cat.bias[r] += gr;
                        for (a, &w) in dcat_in.iter_mut().zip(cat.row(r)) {
                            *a += gr * w;
                        }
                    }
                    for r in 0..d {
                        if s.sub_pre[r] > T::zero() {
                            let gr = dcat_in[r];
                            let grow = &mut agg_g.sub.weight[r * d..(r + 1) * d];
                            for (w, &x) in grow.iter_mut().zip(&s.sub_in) {
                                *w += gr * x;
                            }
                            agg_g.sub.bias[r] += gr;
                        }
                        if s.mul_pre[r] > T::zero() {
                            let gr = dcat_in[d + r];
                            let grow = &mut agg_g.mul.weight[r * d..(r + 1) * d];
                            for (w, &x) in grow.iter_mut().zip(&s.mul_in) {
                                *w += gr * x;
                            }
                            agg_g.mul.bias[r] += gr;
                        }
                    }
                }
            }
        }
        let grads = PlugModel {
            aggregator: agg_g,
            predictor: pred_g,
            bank: self.bank.clone(),
        };
        Ok(grads.params_flat())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fm(h: usize, w: usize, d: usize, v: &[f64]) -> FeatureMap<f64> {
        FeatureMap::new(h, w, d, v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_features_pool_to_the_feature() {
        let f = FeatureMap::uniform(3, 4, &[0.5, -2.0]).unwrap();
        let mut mask = Mask::empty(3, 4);
        mask.set(1, 1, true);
        mask.set(3, 2, true);
        assert_eq!(
            masked_average_pool(&f, &mask).unwrap(),
            Some(vec![0.5, -2.0])
        );
    }

    #[test]
    fn top_row_mean() {
        let f = fm(2, 2, 1, &[1.0, 3.0, 5.0, 7.0]);
        let mask = Mask::new(2, 2, vec![true, true, false, false]).unwrap();
        assert_eq!(masked_average_pool(&f, &mask).unwrap(), Some(vec![2.0]));
    }

    #[test]
    fn single_pixel_mask_is_exact() {
        let f = fm(2, 2, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        let mut mask = Mask::empty(2, 2);
        mask.set(0, 1, true);
        assert_eq!(
            masked_average_pool(&f, &mask).unwrap(),
            Some(vec![0.5, 0.6])
        );
    }

    #[test]
    fn ema_fixed_point_and_running_mean() {
        let f = FeatureMap::uniform(2, 2, &[1.5, -1.0]).unwrap();
        let mask = Mask::new(2, 2, vec![true; 4]).unwrap();
        let s = SparseSample {
            features: &f,
            mask: &mask,
            category: 2,
        };
        for update in [MetaUpdate::RunningMean, MetaUpdate::Ema { momentum: 0.9 }] {
            let bank = MetaFeatureBank::<f64>::new(2, 2, update).unwrap();
            let bank = encode_meta_features(&[s, s], &bank).unwrap();
            assert_eq!(bank.vector(1), &[1.5, -1.0]);
            assert_eq!(bank.counts(), &[0, 2]);
            assert!(!bank.is_available(0));
            assert_eq!(bank.vector(0), &[0.0, 0.0]);
        }
    }

    #[test]
    fn running_mean_is_order_invariant() {
        let maps: Vec<FeatureMap<f64>> = [1.0, 4.0, -2.5, 8.0]
            .iter()
            .map(|&v| FeatureMap::uniform(1, 2, &[v, v * 0.5]).unwrap())
            .collect();
        let mask = Mask::new(1, 2, vec![true, false]).unwrap();
        let samples: Vec<SparseSample<f64>> = maps
            .iter()
            .map(|f| SparseSample {
                features: f,
                mask: &mask,
                category: 1,
            })
            .collect();
        let bank = MetaFeatureBank::<f64>::new(1, 2, MetaUpdate::RunningMean).unwrap();
        let fwd = encode_meta_features(&samples, &bank).unwrap();
        let rev: Vec<_> = samples.iter().rev().copied().collect();
        let bwd = encode_meta_features(&rev, &bank).unwrap();
        for (a, b) in fwd.vector(0).iter().zip(bwd.vector(0)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((fwd.vector(0)[0] - 2.625).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_skipped_and_bad_category_rejected() {
        let f = FeatureMap::uniform(2, 2, &[1.0]).unwrap();
        let empty = Mask::empty(2, 2);
        let bank = MetaFeatureBank::<f64>::new(1, 1, MetaUpdate::RunningMean).unwrap();
        let out = encode_meta_features(
            &[SparseSample {
                features: &f,
                mask: &empty,
                category: 1,
            }],
            &bank,
        )
        .unwrap();
        assert_eq!(out.counts(), &[0]);
        let full = Mask::new(2, 2, vec![true; 4]).unwrap();
        assert!(encode_meta_features(
            &[SparseSample {
                features: &f,
                mask: &full,
                category: 2
            }],
            &bank
        )
        .is_err());
    }

    #[test]
    fn aggregate_hand_example() {
        // D=2, F=(1,0), meta=(1,1), identity sub/mul, w_cat = [I | I | I]
        let f = fm(1, 1, 2, &[1.0, 0.0]);
        let p = AggregatorParams {
            sub: Linear::block_identity(2, 2),
            mul: Linear::block_identity(2, 2),
            cat: Linear::block_identity(2, 6),
        };
        let out = aggregate(&f, &[1.0, 1.0], &p).unwrap();
        assert_eq!(out.data(), &[2.0, 0.0]);
    }

    #[test]
    fn aggregate_pass_through_is_relu() {
        let f = fm(1, 3, 2, &[1.0, -1.0, 0.5, 2.0, -0.1, 0.0]);
        let out = aggregate(&f, &[0.0, 0.0], &AggregatorParams::pass_through(2)).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 0.5, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn aggregate_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = PlugModel::<f64>::init(4, 2, MetaUpdate::RunningMean, &mut rng).unwrap();
        let data: Vec<f64> = (0..5 * 6 * 4)
            .map(|i| ((i * 7919) % 13) as f64 / 6.0 - 1.0)
            .collect();
        let f = fm(5, 6, 4, &data);
        let out = aggregate(&f, &[0.3, -0.2, 1.0, 0.0], &m.aggregator).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (5, 6, 4));
        assert!(out.data().iter().all(|&v| v >= 0.0));
        assert!(aggregate(&f, &[0.0; 3], &m.aggregator).is_err());
    }

    #[test]
    fn guided_pass_through_matches_hand_value() {
        // D=1, C=1, pass-through, w=2, b=-1, F=1 → sigmoid(1) = 0.7311
        let f = fm(1, 1, 1, &[1.0]);
        let pred = PredictorParams {
            linear: Linear::from_parts(1, 1, vec![2.0], vec![-1.0]).unwrap(),
        };
        let bank = MetaFeatureBank::<f64>::new(1, 1, MetaUpdate::RunningMean).unwrap();
        let s = predict_semantic(&f, &bank, &AggregatorParams::pass_through(1), &pred).unwrap();
        assert!((s.scores()[0] - 0.731_058_6).abs() < 1e-4);
    }

    #[test]
    fn zero_logit_gives_half() {
        let f = fm(1, 1, 1, &[0.0]);
        let pred = PredictorParams {
            linear: Linear::from_parts(1, 1, vec![1.0], vec![0.0]).unwrap(),
        };
        assert_eq!(predict_semantic_plain(&f, &pred).unwrap().scores()[0], 0.5);
    }

    #[test]
    fn plain_equals_guided_under_pass_through_on_nonnegative_features() {
        let f = fm(2, 2, 2, &[0.1, 0.9, 1.2, 0.0, 0.4, 0.4, 2.0, 3.0]);
        let pred = PredictorParams {
            linear: Linear::from_parts(2, 2, vec![0.5, -1.0, 2.0, 0.25], vec![0.1, -0.3]).unwrap(),
        };
        let bank = MetaFeatureBank::<f64>::new(2, 2, MetaUpdate::RunningMean).unwrap();
        let a = predict_semantic(&f, &bank, &AggregatorParams::pass_through(2), &pred).unwrap();
        let b = predict_semantic_plain(&f, &pred).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_features_give_constant_map() {
        let f = FeatureMap::uniform(3, 3, &[0.7, -0.1]).unwrap();
        let pred = PredictorParams {
            linear: Linear::from_parts(1, 2, vec![1.0, 3.0], vec![0.2]).unwrap(),
        };
        let s = predict_semantic_plain(&f, &pred).unwrap();
        assert!(s.scores().iter().all(|&v| v == s.scores()[0]));
    }

    #[test]
    fn scores_never_saturate() {
        let f = fm(1, 2, 1, &[1e6, -1e6]);
        let pred = PredictorParams {
            linear: Linear::from_parts(1, 1, vec![1.0], vec![0.0]).unwrap(),
        };
        let s = predict_semantic_plain(&f, &pred).unwrap();
        assert!(s.scores().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn category_order_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = PlugModel::<f64>::init(3, 2, MetaUpdate::RunningMean, &mut rng).unwrap();
        let bank = MetaFeatureBank::from_parts(
            vec![vec![0.5, -1.0, 0.2], vec![-0.3, 0.8, 1.1]],
            vec![1, 1],
            MetaUpdate::RunningMean,
        )
        .unwrap();
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = fm(2, 2, 3, &data);
        let s = predict_semantic(&f, &bank, &m.aggregator, &m.predictor).unwrap();
        // swap categories in both bank and predictor rows
        let swapped_bank = MetaFeatureBank::from_parts(
            vec![bank.vector(1).to_vec(), bank.vector(0).to_vec()],
            vec![1, 1],
            MetaUpdate::RunningMean,
        )
        .unwrap();
        let w = &m.predictor.linear;
        let mut weight = w.row(1).to_vec();
        weight.extend_from_slice(w.row(0));
        let pred = PredictorParams {
            linear: Linear::from_parts(2, 3, weight, vec![w.bias[1], w.bias[0]]).unwrap(),
        };
        let t = predict_semantic(&f, &swapped_bank, &m.aggregator, &pred).unwrap();
        for i in 0..4 {
            assert_eq!(s.pixel(i)[0], t.pixel(i)[1]);
            assert_eq!(s.pixel(i)[1], t.pixel(i)[0]);
        }
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn cosine_similarities() {
        let bank = MetaFeatureBank::from_parts(
            vec![
                vec![1.0, 0.0],
                vec![1.0, 1.0],
                vec![0.0, 2.0],
                vec![0.0, 0.0],
            ],
            vec![1, 1, 1, 0],
            MetaUpdate::RunningMean,
        )
        .unwrap();
        let m = meta_similarity_matrix(&bank);
        assert_eq!(m[0][0], 1.0);
        assert!((m[0][1] - 0.707_11).abs() < 1e-5);
        assert_eq!(m[0][2], 0.0);
        assert!(m[3][0].is_nan() && m[3][3].is_nan());
    }

    #[test]
    fn flat_params_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = PlugModel::<f64>::init(3, 2, MetaUpdate::RunningMean, &mut rng).unwrap();
        let flat = m.params_flat();
        assert_eq!(flat.len(), m.param_count());
        assert_eq!(flat.len(), 2 * (9 + 3) + (27 + 3) + (6 + 2));
        let bumped: Vec<f64> = flat.iter().map(|v| v + 1.0).collect();
        m.set_params_flat(&bumped).unwrap();
        assert_eq!(m.params_flat(), bumped);
    }

    #[test]
    fn bilinear_resize_identity_and_constant() {
        let s = SemanticMap::new(2, 2, 1, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        assert_eq!(s.resize_bilinear(2, 2), s);
        let c = SemanticMap::new(2, 3, 2, vec![0.3f64; 12]).unwrap();
        let up = c.resize_bilinear(7, 5);
        assert!(up.scores().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }
}
