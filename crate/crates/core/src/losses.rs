//! Point-supervised training losses with analytic gradients.
//!
//! * positive: focal loss on the labeled pixels,
//! * negative: focal loss pushing every unlabeled pixel towards zero,
//! * color prior: pairwise term asking color-similar neighbours to agree.
//!
//! Every function returns the loss together with its gradient w.r.t. the
//! semantic scores, laid out like [`SemanticMap::scores`].

use serde::{Deserialize, Serialize};

use crate::annotation::PointAnnotation;
use crate::color::image_to_lab;
use crate::error::{Error, Result};
use crate::grid::NEIGHBOURS_8;
use crate::image::ImageGrid;
use crate::scalar::{Scalar, PROB_EPS};
use crate::sempred::SemanticMap;

#[inline]
fn clamp_prob<T: Scalar>(p: T) -> T {
    let eps = T::lit(PROB_EPS);
    p.max(eps).min(T::one() - eps)
}

/// `−(1−p)^γ·ln p` and its derivative in `p`.
#[inline]
fn focal_pos<T: Scalar>(p: T, gamma: T) -> (T, T) {
    let q = clamp_prob(p);
    let one_m = T::one() - q;
    let w = one_m.powf(gamma);
    let v = -w * q.ln();
    let g = if q != p {
        T::zero()
    } else {
        let dw = if gamma == T::zero() {
            T::zero()
        } else {
            gamma * one_m.powf(gamma - T::one())
        };
        dw * q.ln() - w / q
    };
    (v, g)
}

/// `−p^γ·ln(1−p)` and its derivative in `p`.
#[inline]
fn focal_neg<T: Scalar>(p: T, gamma: T) -> (T, T) {
    let q = clamp_prob(p);
    let one_m = T::one() - q;
    let w = q.powf(gamma);
    let v = -w * one_m.ln();
    let g = if q != p {
        T::zero()
    } else {
        let dw = if gamma == T::zero() {
            T::zero()
        } else {
            gamma * q.powf(gamma - T::one())
        };
        -dw * one_m.ln() + w / one_m
    };
    (v, g)
}

/// Per-pixel multi-hot targets of the labeled pixels, sorted by pixel index.
/// Two points on the same pixel share one positive sample.
fn positive_targets<T: Scalar>(
    scores: &SemanticMap<T>,
    points: &[PointAnnotation],
) -> Result<Vec<(usize, Vec<bool>)>> {
    let c = scores.categories();
    let mut out: Vec<(usize, Vec<bool>)> = Vec::with_capacity(points.len());
    for p in points {
        if p.x >= scores.width() || p.y >= scores.height() {
            return Err(Error::Validation(format!(
                "point ({}, {}) outside {}x{} score map",
                p.x,
                p.y,
                scores.width(),
                scores.height()
            )));
        }
        if p.category == 0 || p.category as usize > c {
            return Err(Error::Validation(format!(
                "point category {} outside 1..={c}",
                p.category
            )));
        }
        let idx = p.index(scores.width());
        let slot = match out.iter().position(|(i, _)| *i == idx) {
            Some(k) => k,
            None => {
                out.push((idx, vec![false; c]));
                out.len() - 1
            }
        };
        out[slot].1[p.category as usize - 1] = true;
    }
    out.sort_by_key(|(i, _)| *i);
    Ok(out)
}

/// Mean over labeled pixels of the focal term summed over categories.
pub fn positive_loss<T: Scalar>(
    scores: &SemanticMap<T>,
    points: &[PointAnnotation],
    gamma: T,
) -> Result<(T, Vec<T>)> {
    let targets = positive_targets(scores, points)?;
    if targets.is_empty() {
        return Err(Error::Validation(
            "positive loss needs at least one labeled pixel".into(),
        ));
    }
    let c = scores.categories();
    let n = T::from_usize_lossy(targets.len());
    let mut grad = vec![T::zero(); scores.scores().len()];
    let mut total = T::zero();
    for (idx, y) in &targets {
        let s = scores.pixel(*idx);
        for k in 0..c {
            let (v, g) = if y[k] {
                focal_pos(s[k], gamma)
            } else {
                focal_neg(s[k], gamma)
            };
            total += v;
            grad[idx * c + k] = g / n;
        }
    }
    Ok((total / n, grad))
}

/// Mean over unlabeled pixels of `Σ_c −y'^γ·ln(1−y')`.
pub fn negative_loss<T: Scalar>(
    scores: &SemanticMap<T>,
    points: &[PointAnnotation],
    gamma: T,
) -> Result<(T, Vec<T>)> {
    let targets = positive_targets(scores, points)?;
    let n_neg = scores.len() - targets.len();
    if n_neg == 0 {
        return Err(Error::Validation(
            "negative loss needs at least one unlabeled pixel".into(),
        ));
    }
    let c = scores.categories();
    let mut labeled = vec![false; scores.len()];
    for (i, _) in &targets {
        labeled[*i] = true;
    }
    let n = T::from_usize_lossy(n_neg);
    let mut grad = vec![T::zero(); scores.scores().len()];
    let mut total = T::zero();
    for (i, _) in labeled.iter().enumerate().filter(|(_, l)| !**l) {
        let s = scores.pixel(i);
        for k in 0..c {
            let (v, g) = focal_neg(s[k], gamma);
            total += v;
            grad[i * c + k] = g / n;
        }
    }
    Ok((total / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffinityConfig {
    /// Similarities below this are dropped.
    pub threshold: f64,
    /// Lab distance scale of `exp(−d/σ)`.
    pub sigma: f64,
    /// 4 or 8.
    pub connectivity: usize,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            threshold: 0.3,
            sigma: 10.0,
            connectivity: 8,
        }
    }
}

impl AffinityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!(
                "affinity threshold {} outside (0, 1]",
                self.threshold
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "affinity sigma {} must be positive",
                self.sigma
            )));
        }
        if self.connectivity != 4 && self.connectivity != 8 {
            return Err(Error::Config(format!(
                "connectivity must be 4 or 8, got {}",
                self.connectivity
            )));
        }
        Ok(())
    }

    /// Similarity for Lab distance `d`, or `None` when below the threshold.
    /// The cut is applied to the distance (`d ≤ σ·ln(1/t)`), so the boundary
    /// is inclusive without depending on rounding in `exp`.
    pub fn weight(&self, d: f64) -> Option<f64> {
        let cut = self.sigma * (1.0 / self.threshold).ln();
        (d <= cut).then(|| (-d / self.sigma).exp().max(self.threshold))
    }
}

/// Symmetric color-affinity graph over pixels; only nonzero edges are stored,
/// each undirected pair once per direction.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    height: usize,
    width: usize,
    edges: Vec<(u32, u32, f64)>,
    z: f64,
}

impl AffinityGraph {
    /// Builds from directed edges; every `(i, j, a)` needs a matching `(j, i, a)`.
    pub fn from_edges(
        height: usize,
        width: usize,
        mut edges: Vec<(u32, u32, f64)>,
    ) -> Result<Self> {
        let n = (height * width) as u32;
        for &(i, j, a) in &edges {
            if i >= n || j >= n || i == j {
                return Err(Error::Validation(format!(
                    "affinity edge ({i}, {j}) invalid for {n} pixels"
                )));
            }
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Validation(format!(
                    "affinity weight {a} outside [0, 1]"
                )));
            }
        }
        edges.retain(|e| e.2 > 0.0);
        edges.sort_by_key(|e| (e.0, e.1));
        for &(i, j, a) in &edges {
            let back = edges.binary_search_by(|e| (e.0, e.1).cmp(&(j, i)));
            if back.map_or(true, |k| edges[k].2 != a) {
                return Err(Error::Validation(format!(
                    "affinity edge ({i}, {j}) has no symmetric partner"
                )));
            }
        }
        let z = edges.iter().map(|e| e.2).sum();
        Ok(Self {
            height,
            width,
            edges,
            z,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Directed nonzero edges `(i, j, A_ij)`.
    pub fn edges(&self) -> &[(u32, u32, f64)] {
        &self.edges
    }

    /// Normaliser `Z = Σ_i Σ_j A_ij`.
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.edges
            .binary_search_by(|e| (e.0, e.1).cmp(&(i as u32, j as u32)))
            .map_or(0.0, |k| self.edges[k].2)
    }
}

pub fn build_affinity(image: &ImageGrid, config: &AffinityConfig) -> Result<AffinityGraph> {
    config.validate()?;
    let (h, w) = (image.height(), image.width());
    let lab = image_to_lab(image);
    let offsets = &NEIGHBOURS_8[..config.connectivity];
    let mut edges = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for &(dx, dy) in offsets {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if let Some(a) = config.weight(lab[i].distance(&lab[j])) {
                    edges.push((i as u32, j as u32, a));
                }
            }
        }
    }
    edges.sort_by_key(|e| (e.0, e.1));
    let z = edges.iter().map(|e| e.2).sum();
    Ok(AffinityGraph {
        height: h,
        width: w,
        edges,
        z,
    })
}

/// `−(1/Z)·Σ_i Σ_j A_ij·ln(p_i·p_j)` on background-augmented, L1-normalised
/// score vectors; the inner product is clamped to `[ε, 1]`.
pub fn color_prior_loss<T: Scalar>(
    scores: &SemanticMap<T>,
    affinity: &AffinityGraph,
) -> Result<(T, Vec<T>)> {
    if (scores.height(), scores.width()) != (affinity.height(), affinity.width()) {
        return Err(Error::Shape(format!(
            "scores {}x{} vs affinity {}x{}",
            scores.height(),
            scores.width(),
            affinity.height(),
            affinity.width()
        )));
    }
    let c = scores.categories();
    let mut grad = vec![T::zero(); scores.scores().len()];
    if affinity.z() <= 0.0 {
        return Ok((T::zero(), grad));
    }
    let n = scores.len();
    let a = c + 1;
    // normalised augmented vectors and their sums
    let mut probs = vec![T::zero(); n * a];
    let mut sums = vec![T::zero(); n];
    for i in 0..n {
        let s = scores.pixel(i);
        let q0 = s.iter().fold(T::one(), |acc, &v| acc * (T::one() - v));
        let p = &mut probs[i * a..(i + 1) * a];
        p[0] = q0;
        p[1..].copy_from_slice(s);
        let sum: T = p.iter().copied().sum();
        p.iter_mut().for_each(|v| *v /= sum);
        sums[i] = sum;
    }
    let eps = T::lit(PROB_EPS);
    let z = T::lit(affinity.z());
    let mut dprob = vec![T::zero(); n * a];
    let mut total = T::zero();
    for &(i, j, w) in affinity.edges() {
        let (i, j) = (i as usize, j as usize);
        let w = T::lit(w);
        let (pi, pj) = (&probs[i * a..(i + 1) * a], &probs[j * a..(j + 1) * a]);
        let dot: T = pi.iter().zip(pj).map(|(x, y)| *x * *y).sum();
        let s = dot.max(eps).min(T::one());
        total -= w * s.ln();
        if dot > eps && dot < T::one() {
            let g = -w / (z * s);
            for k in 0..a {
                dprob[i * a + k] += g * pj[k];
                dprob[j * a + k] += g * pi[k];
            }
        }
    }
    for i in 0..n {
        let p = &probs[i * a..(i + 1) * a];
        let dp = &dprob[i * a..(i + 1) * a];
        let proj: T = p.iter().zip(dp).map(|(x, y)| *x * *y).sum();
        // d/du_k of u/Σu
        let du: Vec<T> = dp.iter().map(|&g| (g - proj) / sums[i]).collect();
        let s = scores.pixel(i);
        for k in 0..c {
            let others = s
                .iter()
                .enumerate()
                .filter(|(m, _)| *m != k)
                .fold(T::one(), |acc, (_, &v)| acc * (T::one() - v));
            grad[i * c + k] = du[k + 1] - du[0] * others;
        }
    }
    Ok((total / z, grad))
}

/// Which loss terms participate; used for the loss ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossTerms {
    pub positive: bool,
    pub negative: bool,
    pub color: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            positive: true,
            negative: true,
            color: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub gamma: f64,
    pub alpha2: f64,
    pub terms: LossTerms,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha2: 1.0,
            terms: LossTerms::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub positive: f64,
    pub negative: f64,
    pub color_prior: f64,
    pub total: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub alpha1: f64,
    pub alpha2: f64,
}

/// `L = L_pos + α1·L_neg + α2·L_col` with `α1 = N_neg / N_pos`. Disabled terms
/// are reported as 0 and contribute no gradient.
pub fn total_loss<T: Scalar>(
    scores: &SemanticMap<T>,
    points: &[PointAnnotation],
    affinity: &AffinityGraph,
    config: &LossConfig,
) -> Result<(LossReport, Vec<T>)> {
    let n_pos = positive_targets(scores, points)?.len();
    if n_pos == 0 {
        return Err(Error::Validation("image has no point labels".into()));
    }
    let n_neg = scores.len() - n_pos;
    let alpha1 = n_neg as f64 / n_pos as f64;
    let gamma = T::lit(config.gamma);
    let mut grad = vec![T::zero(); scores.scores().len()];
    let mut add = |g: &[T], wgt: f64| {
        let wgt = T::lit(wgt);
        for (a, &b) in grad.iter_mut().zip(g) {
            *a += wgt * b;
        }
    };
    let mut report = LossReport {
        positive: 0.0,
        negative: 0.0,
        color_prior: 0.0,
        total: 0.0,
        n_pos,
        n_neg,
        alpha1,
        alpha2: config.alpha2,
    };
    if config.terms.positive {
        let (v, g) = positive_loss(scores, points, gamma)?;
        report.positive = v.to_f64_lossy();
        add(&g, 1.0);
    }
    if config.terms.negative && n_neg > 0 {
        let (v, g) = negative_loss(scores, points, gamma)?;
        report.negative = v.to_f64_lossy();
        add(&g, alpha1);
    }
    if config.terms.color && config.alpha2 != 0.0 {
        let (v, g) = color_prior_loss(scores, affinity)?;
        report.color_prior = v.to_f64_lossy();
        add(&g, config.alpha2);
    }
    report.total = report.positive + alpha1 * report.negative + config.alpha2 * report.color_prior;
    Ok((report, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: usize, y: usize, c: u32, id: u32) -> PointAnnotation {
        PointAnnotation::new(x, y, c, id)
    }

    fn map(h: usize, w: usize, c: usize, v: &[f64]) -> SemanticMap<f64> {
        SemanticMap::new(h, w, c, v.to_vec()).unwrap()
    }

    #[test]
    fn positive_hand_values() {
        let (l, _) = positive_loss(&map(1, 1, 1, &[0.5]), &[pt(0, 0, 1, 1)], 2.0).unwrap();
        assert!((l - 0.173_287).abs() < 1e-6);
        let (l, _) = positive_loss(&map(1, 1, 2, &[0.9, 0.2]), &[pt(0, 0, 1, 1)], 2.0).unwrap();
        assert!((l - 0.009_979_3).abs() < 1e-7, "{l}");
        let (l, _) = positive_loss(&map(1, 1, 2, &[1.0, 0.0]), &[pt(0, 0, 1, 1)], 2.0).unwrap();
        assert!(l < 1e-5);
    }

    #[test]
    fn positive_gradient_only_at_points() {
        let s = map(2, 2, 1, &[0.3, 0.4, 0.5, 0.6]);
        let (_, g) = positive_loss(&s, &[pt(1, 0, 1, 1)], 2.0).unwrap();
        assert!(g[1] < 0.0);
        assert_eq!((g[0], g[2], g[3]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn negative_hand_values() {
        let s = map(1, 2, 1, &[0.9, 0.5]);
        let (l, _) = negative_loss(&s, &[pt(0, 0, 1, 1)], 2.0).unwrap();
        assert!((l - 0.173_287).abs() < 1e-6);
        let s = map(1, 2, 2, &[0.9, 0.9, 0.1, 0.2]);
        let (l, _) = negative_loss(&s, &[pt(0, 0, 1, 1)], 2.0).unwrap();
        assert!((l - 0.009_979_3).abs() < 1e-7);
        let s = map(1, 3, 1, &[0.5, 0.0, 0.0]);
        // clamped to ε, so the residual is ε²·ε
        assert!(negative_loss(&s, &[pt(0, 0, 1, 1)], 2.0).unwrap().0 < 1e-20);
    }

    #[test]
    fn no_points_or_no_unlabeled_pixels() {
        let s = map(1, 1, 1, &[0.5]);
        assert!(positive_loss(&s, &[], 2.0).is_err());
        assert!(negative_loss(&s, &[pt(0, 0, 1, 1)], 2.0).is_err());
    }

    #[test]
    fn affinity_constant_image() {
        let img = ImageGrid::filled(3, 4, [40, 90, 200]).unwrap();
        let g = build_affinity(&img, &AffinityConfig::default()).unwrap();
        // directed 8-neighbour pairs on a 3x4 grid
        let horiz = 3 * 3;
        let vert = 2 * 4;
        let diag = 2 * 2 * 3;
        assert_eq!(g.weight(0, 5), 1.0);
        assert_eq!(g.edges().len(), 2 * (horiz + vert + diag));
        assert!(g.edges().iter().all(|e| e.2 == 1.0));
        assert_eq!(g.z(), g.edges().len() as f64);
    }

    #[test]
    fn affinity_cuts_strong_boundaries() {
        let mut img = ImageGrid::filled(2, 4, [0, 0, 0]).unwrap();
        for y in 0..2 {
            for x in 2..4 {
                img.set_pixel(x, y, [255, 255, 255]);
            }
        }
        let g = build_affinity(&img, &AffinityConfig::default()).unwrap();
        assert!(g
            .edges()
            .iter()
            .all(|&(i, j, _)| (i % 4 < 2) == (j % 4 < 2)));
    }

    #[test]
    fn affinity_threshold_is_inclusive() {
        let cfg = AffinityConfig::default();
        let d = cfg.sigma * (1.0f64 / 0.3).ln();
        let k = cfg.weight(d).expect("boundary kept");
        assert!((k - 0.3).abs() < 1e-12);
        assert!(cfg.weight(d + 1e-9).is_none());
    }

    #[test]
    fn asymmetric_edges_rejected() {
        assert!(AffinityGraph::from_edges(1, 2, vec![(0, 1, 0.5)]).is_err());
        assert!(AffinityGraph::from_edges(1, 2, vec![(0, 1, 0.5), (1, 0, 0.4)]).is_err());
        let g = AffinityGraph::from_edges(1, 2, vec![(1, 0, 0.5), (0, 1, 0.5)]).unwrap();
        assert_eq!(g.z(), 1.0);
        assert_eq!(g.weight(0, 1), 0.5);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn color_prior_hand_values() {
        let empty = AffinityGraph::from_edges(1, 2, vec![]).unwrap();
        let s = map(1, 2, 1, &[0.3, 0.8]);
        assert_eq!(color_prior_loss(&s, &empty).unwrap().0, 0.0);

        // C=1 with y' = 0.5: augmented (0.5, 0.5) on both pixels
        let g = AffinityGraph::from_edges(1, 2, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let s = map(1, 2, 1, &[0.5, 0.5]);
        let (l, _) = color_prior_loss(&s, &g).unwrap();
        assert!((l - 0.693_147).abs() < 1e-6);

        let s = map(1, 2, 1, &[1.0, 1.0]);
        assert!(color_prior_loss(&s, &g).unwrap().0.abs() < 1e-12);
    }

    #[test]
    fn total_composes_linearly() {
        let s = map(2, 1, 1, &[0.5, 0.5]);
        let g = AffinityGraph::from_edges(2, 1, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let pts = [pt(0, 0, 1, 1)];
        let (r, grad) = total_loss(&s, &pts, &g, &LossConfig::default()).unwrap();
        assert_eq!(r.alpha1, 1.0);
        let ln2 = std::f64::consts::LN_2;
        let expected = 0.25 * ln2 + 0.25 * ln2 + ln2;
        assert!((r.total - expected).abs() < 1e-9, "{r:?}");
        let (_, gp) = positive_loss(&s, &pts, 2.0).unwrap();
        let (_, gn) = negative_loss(&s, &pts, 2.0).unwrap();
        let (_, gc) = color_prior_loss(&s, &g).unwrap();
        for k in 0..2 {
            assert!((grad[k] - (gp[k] + gn[k] + gc[k])).abs() < 1e-12);
        }
        let cfg = LossConfig {
            alpha2: 0.0,
            ..LossConfig::default()
        };
        let (r, _) = total_loss(&s, &pts, &g, &cfg).unwrap();
        assert_eq!(r.total, r.positive + r.alpha1 * r.negative);
    }
}
