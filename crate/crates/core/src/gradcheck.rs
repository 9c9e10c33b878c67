//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::annotation::PointAnnotation;
use crate::error::Result;
use crate::featext::FeatureMap;
use crate::grid::neighbours;
use crate::losses::{
    color_prior_loss, negative_loss, positive_loss, total_loss, AffinityGraph, LossConfig,
};
use crate::rng::SeedStreams;
use crate::sempred::{relu_pattern, MetaFeatureBank, MetaUpdate, PlugModel, SemanticMap};

pub const DEFAULT_STEP: f64 = 1e-3;

/// Denominator floor so that coordinates where both gradients vanish do not
/// blow the relative error up.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

#[inline]
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient returned by `f` with Richardson-extrapolated
/// central differences of steps `h` and `h/2` on `coords` (all coordinates
/// when `None`).
pub fn grad_check_at<F>(f: F, params: &[f64], h: f64, coords: Option<&[usize]>) -> GradCheckReport
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut x = params.to_vec();
    for &i in coords {
        let mut central = |step: f64| {
            let x0 = x[i];
            x[i] = x0 + step;
            let (fp, _) = f(&x);
            x[i] = x0 - step;
            let (fm, _) = f(&x);
            x[i] = x0;
            (fp - fm) / (2.0 * step)
        };
        let (d1, d2) = (central(h), central(h / 2.0));
        let numeric = (4.0 * d2 - d1) / 3.0;
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.checked == 1 {
            report = GradCheckReport {
                max_rel_error: err,
                worst_index: i,
                analytic: analytic[i],
                numeric,
                checked: report.checked,
            };
        }
    }
    report
}

/// Checks up to `samples` randomly chosen coordinates.
pub fn grad_check<F, R>(
    f: F,
    params: &[f64],
    h: f64,
    samples: usize,
    rng: &mut R,
) -> GradCheckReport
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
    R: Rng + ?Sized,
{
    if samples >= params.len() {
        return grad_check_at(f, params, h, None);
    }
    let mut coords = sample(rng, params.len(), samples).into_vec();
    coords.sort_unstable();
    grad_check_at(f, params, h, Some(&coords))
}

/// A random small loss problem: scores in `[0.05, 0.95]`, 1 to 3 points
/// and a random symmetric 8-neighbour affinity.
#[derive(Debug, Clone)]
pub struct LossInstance {
    pub scores: SemanticMap<f64>,
    pub points: Vec<PointAnnotation>,
    pub affinity: AffinityGraph,
}

impl LossInstance {
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        max_side: usize,
        max_categories: usize,
    ) -> Result<Self> {
        let h = rng.random_range(2..=max_side);
        let w = rng.random_range(2..=max_side);
        let c = rng.random_range(1..=max_categories);
        let scores: Vec<f64> = (0..h * w * c)
            .map(|_| rng.random_range(0.05..0.95))
            .collect();
        let n_points = rng.random_range(1..=3.min(h * w - 1));
        let points = sample(rng, h * w, n_points)
            .into_iter()
            .enumerate()
            .map(|(k, i)| {
                PointAnnotation::new(i % w, i / w, rng.random_range(1..=c as u32), k as u32 + 1)
            })
            .collect();
        let mut edges = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as u32;
                for (nx, ny) in neighbours(x, y, w, h, 8) {
                    let j = (ny * w + nx) as u32;
                    if j > i && rng.random_bool(0.7) {
                        let a = rng.random_range(0.3..=1.0);
                        edges.push((i, j, a));
                        edges.push((j, i, a));
                    }
                }
            }
        }
        Ok(Self {
            scores: SemanticMap::new(h, w, c, scores)?,
            points,
            affinity: AffinityGraph::from_edges(h, w, edges)?,
        })
    }

    fn with_scores(&self, v: &[f64]) -> SemanticMap<f64> {
        SemanticMap::new(
            self.scores.height(),
            self.scores.width(),
            self.scores.categories(),
            v.to_vec(),
        )
        .expect("perturbed scores stay inside (0, 1)")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub instances: usize,
}

type Objective<'a> = dyn Fn(&[f64]) -> (f64, Vec<f64>) + 'a;

/// Gradient checks of the positive, negative, color-prior and total losses
/// w.r.t. the scores, and of the total loss w.r.t. the model parameters,
/// on `instances` random problems.
pub fn loss_suite(seed: u64, instances: usize) -> Result<Vec<LossCheck>> {
    let streams = SeedStreams::new(seed);
    let names = ["positive", "negative", "color_prior", "total", "model"];
    let mut worst = [0.0f64; 5];
    for k in 0..instances {
        let mut rng = streams.rng_indexed("gradcheck", k as u64);
        let inst = LossInstance::random(&mut rng, 8, 3)?;
        let x0 = inst.scores.scores().to_vec();
        let cfg = LossConfig::default();
        let checks: [&Objective; 4] = [
            &|v| positive_loss(&inst.with_scores(v), &inst.points, 2.0).unwrap(),
            &|v| negative_loss(&inst.with_scores(v), &inst.points, 2.0).unwrap(),
            &|v| color_prior_loss(&inst.with_scores(v), &inst.affinity).unwrap(),
            &|v| {
                let (r, g) =
                    total_loss(&inst.with_scores(v), &inst.points, &inst.affinity, &cfg).unwrap();
                (r.total, g)
            },
        ];
        for (w, f) in worst.iter_mut().zip(checks) {
            *w = w.max(grad_check_at(f, &x0, DEFAULT_STEP, None).max_rel_error);
        }
        worst[4] = worst[4].max(model_check(&inst, &mut rng)?.max_rel_error);
    }
    Ok(names
        .iter()
        .zip(worst)
        .map(|(&name, max_rel_error)| LossCheck {
            name,
            max_rel_error,
            instances,
        })
        .collect())
}

/// Total loss through the guided predictor w.r.t. all parameters.
/// Coordinates whose step of `h` changes any ReLU sign are skipped, since
/// central differences straddle a kink there.
fn model_check<R: Rng + ?Sized>(inst: &LossInstance, rng: &mut R) -> Result<GradCheckReport> {
    let (h, w, c) = (
        inst.scores.height(),
        inst.scores.width(),
        inst.scores.categories(),
    );
    let d = 3;
    let feats: Vec<f64> = (0..h * w * d)
        .map(|_| rng.random_range(-1.5..1.5))
        .collect();
    let features = FeatureMap::new(h, w, d, feats)?;
    let mut model = PlugModel::init(d, c, MetaUpdate::RunningMean, rng)?;
    let vectors = (0..c)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    model.bank = MetaFeatureBank::from_parts(vectors, vec![1; c], MetaUpdate::RunningMean)?;
    // predictor biases near 0 keep scores away from the clamp
    let mut p = model.params_flat();
    let k = p.len();
    p[k - c..]
        .iter_mut()
        .for_each(|b| *b = rng.random_range(-1.0..1.0));
    let cfg = LossConfig::default();
    let at = |v: &[f64]| {
        let mut m = model.clone();
        m.set_params_flat(v).unwrap();
        m
    };
    let f = |v: &[f64]| {
        let m = at(v);
        let s = m.predict(&features, true).unwrap();
        let (r, g) = total_loss(&s, &inst.points, &inst.affinity, &cfg).unwrap();
        (r.total, m.backward(&features, true, &s, &g).unwrap())
    };
    let pattern = |v: &[f64]| {
        let m = at(v);
        relu_pattern(&features, &m.bank, &m.aggregator)
    };
    let base = pattern(&p);
    let mut x = p.clone();
    let smooth: Vec<usize> = (0..k)
        .filter(|&i| {
            let x0 = x[i];
            x[i] = x0 + DEFAULT_STEP;
            let up = pattern(&x) == base;
            x[i] = x0 - DEFAULT_STEP;
            let down = pattern(&x) == base;
            x[i] = x0;
            up && down
        })
        .collect();
    Ok(grad_check_at(f, &p, DEFAULT_STEP, Some(&smooth)))
}
