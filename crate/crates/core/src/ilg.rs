//! Instance label generation.
//!
//! Every labeled point grows a shortest-path cost map over the pixel grid; the
//! step cost between adjacent pixels is the L2 distance of their semantic
//! score vectors plus `λ` times the L1 distance of their Sobel edge values.
//! A pixel joins the instance it reaches most cheaply, or background if that
//! cost exceeds `τ`. Boxes are the hulls of the resulting supports.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{AssignmentMap, BBox, Mask, PointAnnotation};
use crate::error::{Error, Result};
use crate::grid::{sobel, NEIGHBOURS_8};
use crate::image::ImageGrid;
use crate::scalar::Scalar;
use crate::sempred::SemanticMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IlgConfig {
    /// Weight of the edge term.
    pub lambda: f64,
    /// Background cost threshold.
    pub tau: f64,
    /// 4 or 8.
    pub connectivity: usize,
}

impl Default for IlgConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            tau: 0.5,
            connectivity: 8,
        }
    }
}

impl IlgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda {} must be finite and ≥ 0",
                self.lambda
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau {} must be > 0", self.tau)));
        }
        if self.connectivity != 4 && self.connectivity != 8 {
            return Err(Error::Config(format!(
                "connectivity must be 4 or 8, got {}",
                self.connectivity
            )));
        }
        Ok(())
    }
}

/// Sobel magnitude of the luma, normalised by its global maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl EdgeMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height * width == 0 || values.len() != height * width {
            return Err(Error::Shape(format!(
                "edge map {height}x{width} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("edge values must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

pub fn sobel_edge_map(image: &ImageGrid) -> EdgeMap {
    let (h, w) = (image.height(), image.width());
    let (gx, gy) = sobel(&image.luma(), h, w);
    let mut values: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let max = values.iter().copied().fold(0.0, f64::max);
    // luma steps are at least 0.114 apart, so anything this small is rounding
    // residue of a flat image
    if max > 1e-6 {
        values.iter_mut().for_each(|v| *v /= max);
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
    EdgeMap {
        height: h,
        width: w,
        values,
    }
}

/// Step cost between two pixels given their score vectors and edge values.
/// Symmetric bit-for-bit in its arguments.
#[inline]
pub fn pair_cost(sem_u: &[f64], sem_v: &[f64], edge_u: f64, edge_v: f64, lambda: f64) -> f64 {
    let mut s = 0.0;
    for (a, b) in sem_u.iter().zip(sem_v) {
        let d = a - b;
        s += d * d;
    }
    s.sqrt() + lambda * (edge_u - edge_v).abs()
}

fn check_maps(sem: &SemanticMap<f64>, edge: &EdgeMap) -> Result<()> {
    if (sem.height(), sem.width()) != (edge.height(), edge.width()) {
        return Err(Error::Shape(format!(
            "semantic map {}x{} vs edge map {}x{}",
            sem.height(),
            sem.width(),
            edge.height(),
            edge.width()
        )));
    }
    Ok(())
}

/// Cost of the grid step `u → v`; the pixels must be adjacent under
/// `connectivity`.
pub fn neighbor_cost(
    sem: &SemanticMap<f64>,
    edge: &EdgeMap,
    u: (usize, usize),
    v: (usize, usize),
    lambda: f64,
    connectivity: usize,
) -> Result<f64> {
    check_maps(sem, edge)?;
    let dx = u.0.abs_diff(v.0);
    let dy = u.1.abs_diff(v.1);
    let adjacent = match connectivity {
        4 => dx + dy == 1,
        _ => dx.max(dy) == 1,
    };
    let inside = |p: (usize, usize)| p.0 < sem.width() && p.1 < sem.height();
    if !adjacent || !inside(u) || !inside(v) {
        return Err(Error::Contract(format!(
            "pixels {u:?} and {v:?} are not {connectivity}-adjacent inside the grid"
        )));
    }
    Ok(pair_cost(
        sem.at(u.0, u.1),
        sem.at(v.0, v.1),
        edge.at(u.0, u.1),
        edge.at(v.0, v.1),
        lambda,
    ))
}

/// Forward offsets; every undirected grid edge is stored once at its base pixel.
const FORWARD: [(isize, isize); 4] = [(1, 0), (0, 1), (1, 1), (-1, 1)];

/// Precomputed step costs of a grid graph.
#[derive(Debug, Clone)]
pub struct GridGraph {
    height: usize,
    width: usize,
    connectivity: usize,
    /// `weights[k][i]`: cost from pixel `i` along `FORWARD[k]` (NaN if outside).
    weights: Vec<Vec<f64>>,
}

impl GridGraph {
    pub fn new(
        sem: &SemanticMap<f64>,
        edge: &EdgeMap,
        lambda: f64,
        connectivity: usize,
    ) -> Result<Self> {
        check_maps(sem, edge)?;
        let (h, w) = (sem.height(), sem.width());
        let dirs = if connectivity == 4 { 2 } else { 4 };
        let ev = edge.values();
        let weights = FORWARD[..dirs]
            .iter()
            .map(|&(dx, dy)| {
                let mut out = vec![f64::NAN; h * w];
                for y in 0..h {
                    for x in 0..w {
                        let (nx, ny) = (x as isize + dx, y as isize + dy);
                        if nx < 0 || nx as usize >= w || ny as usize >= h {
                            continue;
                        }
                        let (i, j) = (y * w + x, ny as usize * w + nx as usize);
                        out[i] = pair_cost(sem.pixel(i), sem.pixel(j), ev[i], ev[j], lambda);
                    }
                }
                out
            })
            .collect();
        Ok(Self {
            height: h,
            width: w,
            connectivity,
            weights,
        })
    }

    /// Graph with arbitrary symmetric step costs `cost(u, v)` (queried once
    /// per undirected edge).
    pub fn from_fn(
        height: usize,
        width: usize,
        connectivity: usize,
        mut cost: impl FnMut((usize, usize), (usize, usize)) -> f64,
    ) -> Result<Self> {
        let dirs = if connectivity == 4 { 2 } else { 4 };
        let mut weights = vec![vec![f64::NAN; height * width]; dirs];
        for (k, &(dx, dy)) in FORWARD[..dirs].iter().enumerate() {
            for y in 0..height {
                for x in 0..width {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || nx as usize >= width || ny as usize >= height {
                        continue;
                    }
                    let c = cost((x, y), (nx as usize, ny as usize));
                    if !(c >= 0.0 && c.is_finite()) {
                        return Err(Error::Validation(format!(
                            "step cost {c} must be finite and ≥ 0"
                        )));
                    }
                    weights[k][y * width + x] = c;
                }
            }
        }
        Ok(Self {
            height,
            width,
            connectivity,
            weights,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Neighbours of pixel `i` with their step costs.
    #[inline]
    pub fn for_each_neighbour(&self, i: usize, mut f: impl FnMut(usize, f64)) {
        let (x, y) = ((i % self.width) as isize, (i / self.width) as isize);
        let n = if self.connectivity == 4 { 4 } else { 8 };
        for &(dx, dy) in &NEIGHBOURS_8[..n] {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx as usize >= self.width || ny as usize >= self.height {
                continue;
            }
            let j = ny as usize * self.width + nx as usize;
            let w = match FORWARD.iter().position(|&o| o == (dx, dy)) {
                Some(k) => self.weights[k][i],
                None => {
                    let k = FORWARD.iter().position(|&o| o == (-dx, -dy)).unwrap();
                    self.weights[k][j]
                }
            };
            f(j, w);
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem {
    cost: f64,
    index: u32,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (cost, index)
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Reusable Dijkstra buffers; `dist` is all-∞ between runs.
struct Scratch {
    dist: Vec<f64>,
    done: Vec<bool>,
    touched: Vec<u32>,
    heap: BinaryHeap<HeapItem>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self {
            dist: vec![f64::INFINITY; n],
            done: vec![false; n],
            touched: Vec::new(),
            heap: BinaryHeap::new(),
        }
    }

    /// Runs Dijkstra from `source`, stopping once the smallest tentative cost
    /// exceeds `tau`; returns the finalized `(pixel, cost)` pairs in order of
    /// finalization and resets the buffers.
    fn run(&mut self, graph: &GridGraph, source: usize, tau: f64) -> Vec<(u32, f64)> {
        let mut finals = Vec::new();
        self.dist[source] = 0.0;
        self.touched.push(source as u32);
        self.heap.push(HeapItem {
            cost: 0.0,
            index: source as u32,
        });
        while let Some(HeapItem { cost, index }) = self.heap.pop() {
            if cost > tau {
                break;
            }
            let i = index as usize;
            if self.done[i] || cost > self.dist[i] {
                continue;
            }
            self.done[i] = true;
            finals.push((index, cost));
            let (dist, touched, heap, done) = (
                &mut self.dist,
                &mut self.touched,
                &mut self.heap,
                &self.done,
            );
            graph.for_each_neighbour(i, |j, w| {
                if done[j] {
                    return;
                }
                let c = cost + w;
                if c < dist[j] {
                    if dist[j] == f64::INFINITY {
                        touched.push(j as u32);
                    }
                    dist[j] = c;
                    heap.push(HeapItem {
                        cost: c,
                        index: j as u32,
                    });
                }
            });
        }
        for &t in &self.touched {
            self.dist[t as usize] = f64::INFINITY;
            self.done[t as usize] = false;
        }
        self.touched.clear();
        self.heap.clear();
        finals
    }
}

/// Shortest-path costs from one labeled point; `∞` beyond the `τ` frontier.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMap {
    pub instance_id: u32,
    pub height: usize,
    pub width: usize,
    pub costs: Vec<f64>,
}

impl CostMap {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.costs[y * self.width + x]
    }
}

fn check_point(p: &PointAnnotation, w: usize, h: usize) -> Result<()> {
    if p.x >= w || p.y >= h {
        return Err(Error::Validation(format!(
            "point ({}, {}) outside {w}x{h} grid",
            p.x, p.y
        )));
    }
    Ok(())
}

pub fn cost_map_on_graph(graph: &GridGraph, point: &PointAnnotation, tau: f64) -> Result<CostMap> {
    check_point(point, graph.width, graph.height)?;
    let mut scratch = Scratch::new(graph.height * graph.width);
    let mut costs = vec![f64::INFINITY; graph.height * graph.width];
    for (i, c) in scratch.run(graph, point.index(graph.width), tau) {
        costs[i as usize] = c;
    }
    Ok(CostMap {
        instance_id: point.instance_id,
        height: graph.height,
        width: graph.width,
        costs,
    })
}

pub fn compute_cost_map(
    sem: &SemanticMap<f64>,
    edge: &EdgeMap,
    point: &PointAnnotation,
    config: &IlgConfig,
) -> Result<CostMap> {
    config.validate()?;
    let graph = GridGraph::new(sem, edge, config.lambda, config.connectivity)?;
    cost_map_on_graph(&graph, point, config.tau)
}

/// Cost maps of every point, computed in parallel.
pub fn compute_cost_maps(
    sem: &SemanticMap<f64>,
    edge: &EdgeMap,
    points: &[PointAnnotation],
    config: &IlgConfig,
) -> Result<Vec<CostMap>> {
    config.validate()?;
    let graph = GridGraph::new(sem, edge, config.lambda, config.connectivity)?;
    points
        .par_iter()
        .map(|p| cost_map_on_graph(&graph, p, config.tau))
        .collect()
}

/// Per-pixel argmin over instances; background when the minimum exceeds `tau`,
/// ties to the smallest instance id.
pub fn assign(cost_maps: &[CostMap], tau: f64) -> Result<AssignmentMap> {
    let first = cost_maps
        .first()
        .ok_or_else(|| Error::Validation("assign needs at least one cost map".into()))?;
    let (h, w) = (first.height, first.width);
    if cost_maps
        .iter()
        .any(|m| (m.height, m.width) != (h, w) || m.costs.len() != h * w)
    {
        return Err(Error::Shape("cost maps differ in size".into()));
    }
    let labels = (0..h * w)
        .into_par_iter()
        .map(|i| {
            let mut best = (f64::INFINITY, 0u32);
            for m in cost_maps {
                let c = m.costs[i];
                if c < best.0 || (c == best.0 && c.is_finite() && m.instance_id < best.1) {
                    best = (c, m.instance_id);
                }
            }
            if best.0 > tau {
                0
            } else {
                best.1
            }
        })
        .collect();
    Ok(AssignmentMap {
        height: h,
        width: w,
        labels,
    })
}

/// Pseudo box and mask of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceLabel {
    pub bbox: BBox,
    pub mask: Mask,
}

/// Hull box of each instance's support; instances with no support get a 3×3
/// box around their point, clipped to the image and flagged degenerate.
pub fn extract_instances(
    assignment: &AssignmentMap,
    points: &[PointAnnotation],
) -> Result<Vec<InstanceLabel>> {
    let (h, w) = (assignment.height, assignment.width);
    let n = points.iter().map(|p| p.instance_id).max().unwrap_or(0) as usize;
    let mut hulls: Vec<Option<(usize, usize, usize, usize)>> = vec![None; n + 1];
    for (i, &l) in assignment.labels.iter().enumerate() {
        let l = l as usize;
        if l == 0 {
            continue;
        }
        if l > n {
            return Err(Error::Validation(format!(
                "assignment label {l} has no point"
            )));
        }
        let (x, y) = (i % w, i / w);
        hulls[l] = Some(match hulls[l] {
            None => (x, y, x, y),
            Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
        });
    }
    points
        .iter()
        .map(|p| {
            check_point(p, w, h)?;
            let bbox = match hulls[p.instance_id as usize] {
                Some((x0, y0, x1, y1)) => BBox::new(x0, y0, x1, y1, p.category, p.instance_id),
                None => {
                    let mut b = BBox::new(
                        p.x.saturating_sub(1),
                        p.y.saturating_sub(1),
                        (p.x + 1).min(w - 1),
                        (p.y + 1).min(h - 1),
                        p.category,
                        p.instance_id,
                    );
                    b.degenerate = true;
                    b
                }
            };
            Ok(InstanceLabel {
                bbox,
                mask: assignment.mask_of(p.instance_id),
            })
        })
        .collect()
}

/// `P = max(0, 1 − cost)` per instance.
pub fn likelihood_maps(cost_maps: &[CostMap]) -> Vec<Vec<f64>> {
    cost_maps
        .iter()
        .map(|m| m.costs.iter().map(|&c| (1.0 - c).max(0.0)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IlgOutput {
    pub assignment: AssignmentMap,
    pub labels: Vec<InstanceLabel>,
}

/// Brings a semantic map to the image resolution (bilinear) in `f64`.
pub fn semantic_at_resolution<T: Scalar>(
    sem: &SemanticMap<T>,
    height: usize,
    width: usize,
) -> SemanticMap<f64> {
    let s = sem.cast::<f64>();
    if (s.height(), s.width()) == (height, width) {
        s
    } else {
        s.resize_bilinear(height, width)
    }
}

/// Full label generation for one image given a precomputed edge map.
///
/// Cost maps are folded into the assignment one at a time and kept sparse,
/// so memory stays proportional to the pixels within `τ` of each point.
/// Point pixels always carry their own instance (the smallest id when
/// several points share a pixel).
pub fn run_ilg_with_edges(
    sem: &SemanticMap<f64>,
    edge: &EdgeMap,
    points: &[PointAnnotation],
    config: &IlgConfig,
) -> Result<IlgOutput> {
    config.validate()?;
    let (h, w) = (edge.height(), edge.width());
    let mut ids: Vec<u32> = points.iter().map(|p| p.instance_id).collect();
    ids.sort_unstable();
    if ids.iter().enumerate().any(|(k, &id)| id as usize != k + 1) {
        return Err(Error::Validation(
            "instance ids must be distinct and contiguous from 1".into(),
        ));
    }
    for p in points {
        check_point(p, w, h)?;
    }
    let graph = GridGraph::new(sem, edge, config.lambda, config.connectivity)?;
    let sparse: Vec<(u32, Vec<(u32, f64)>)> = points
        .par_iter()
        .map_init(
            || Scratch::new(h * w),
            |s, p| (p.instance_id, s.run(&graph, p.index(w), config.tau)),
        )
        .collect();
    let mut best = vec![(f64::INFINITY, 0u32); h * w];
    for (id, entries) in &sparse {
        for &(i, c) in entries {
            let b = &mut best[i as usize];
            if c < b.0 || (c == b.0 && *id < b.1) {
                *b = (c, *id);
            }
        }
    }
    let mut labels: Vec<u32> = best
        .iter()
        .map(|&(c, id)| if c > config.tau { 0 } else { id })
        .collect();
    let mut by_id: Vec<&PointAnnotation> = points.iter().collect();
    by_id.sort_by_key(|p| std::cmp::Reverse(p.instance_id));
    for p in by_id {
        labels[p.index(w)] = p.instance_id;
    }
    let assignment = AssignmentMap {
        height: h,
        width: w,
        labels,
    };
    let labels = extract_instances(&assignment, points)?;
    Ok(IlgOutput { assignment, labels })
}

pub fn run_ilg<T: Scalar>(
    image: &ImageGrid,
    sem: &SemanticMap<T>,
    points: &[PointAnnotation],
    config: &IlgConfig,
) -> Result<IlgOutput> {
    let edge = sobel_edge_map(image);
    let sem = semantic_at_resolution(sem, image.height(), image.width());
    run_ilg_with_edges(&sem, &edge, points, config)
}
