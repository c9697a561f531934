//! Global alignment of pairwise pointmaps.
//!
//! Each pair `(n, m)` contributes two pointmaps expressed in camera `n`'s
//! frame at an arbitrary per-pair scale. Alignment recovers one
//! world-from-camera pose per view, one scale per pair, and a global pointmap
//! per view by minimizing the confidence-weighted squared distance
//!
//! ```text
//! Σ_(n,m) Σ_(i∈{n,m}) Σ_px C^{n,i}_px || X̂^i_px - P_n(σ_(n,m) X^{n,i}_px) ||²
//! ```
//!
//! The global pointmaps are eliminated in closed form (weighted mean of
//! their predictions); poses and scales are refined by monotone gradient
//! descent from a maximum-confidence spanning-tree initialization.
//!
//! Gauge: the reference view (index 0) has identity pose and the gauge
//! pair (first pair starting at view 0 with nonzero confidence) has σ = 1.

use std::collections::VecDeque;

use log::{debug, warn};
use nalgebra::{Matrix3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{exp_map, project_to_so3, AxisAngle, Frame, Pose, Rotation, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("pair graph over {views} views is disconnected")]
    DisconnectedGraph { views: usize },
    #[error("need at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("invalid pair ({first}, {second}) for {views} views")]
    InvalidPair {
        first: usize,
        second: usize,
        views: usize,
    },
    #[error("pair ({first}, {second}) has no prediction")]
    MissingPrediction { first: usize, second: usize },
    #[error("prediction shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("negative or non-finite confidence in pair ({first}, {second})")]
    InvalidConfidence { first: usize, second: usize },
    #[error("view {0} is never the first image of a weighted pair, so its pose is unobservable")]
    UnposedView(usize),
    #[error("alignment did not converge after {iterations} iterations (relative change {relative_change:.3e})")]
    NonConvergence {
        iterations: usize,
        relative_change: f64,
    },
    #[error("no point has confidence above {threshold}")]
    EmptyCloud { threshold: f64 },
}

/// Foundation-model output for one ordered image pair, both pointmaps in the
/// frame of the first image. Pixel `(w, h)` lives at index `h * width + w`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwisePrediction {
    pub first: usize,
    pub second: usize,
    pub width: usize,
    pub height: usize,
    pub pointmap_self: Vec<Vec3>,
    pub pointmap_other: Vec<Vec3>,
    pub confidence_self: Vec<f64>,
    pub confidence_other: Vec<f64>,
}

impl PairwisePrediction {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<(), AlignError> {
        let n = self.pixel_count();
        let lens = [
            self.pointmap_self.len(),
            self.pointmap_other.len(),
            self.confidence_self.len(),
            self.confidence_other.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(AlignError::ShapeMismatch(format!(
                "pair ({}, {}) is {}x{} but arrays have lengths {:?}",
                self.first, self.second, self.width, self.height, lens
            )));
        }
        let bad_conf = self
            .confidence_self
            .iter()
            .chain(&self.confidence_other)
            .any(|c| !(c.is_finite() && *c >= 0.0));
        if bad_conf {
            return Err(AlignError::InvalidConfidence {
                first: self.first,
                second: self.second,
            });
        }
        Ok(())
    }

    pub fn total_confidence(&self) -> f64 {
        self.confidence_self.iter().sum::<f64>() + self.confidence_other.iter().sum::<f64>()
    }
}

/// Ordered image pairs over `num_views` views.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairGraph {
    pub num_views: usize,
    pub edges: Vec<(usize, usize)>,
}

impl PairGraph {
    pub fn new(num_views: usize, edges: Vec<(usize, usize)>) -> Result<Self, AlignError> {
        for &(n, m) in &edges {
            if n == m || n >= num_views || m >= num_views {
                return Err(AlignError::InvalidPair {
                    first: n,
                    second: m,
                    views: num_views,
                });
            }
        }
        Ok(PairGraph { num_views, edges })
    }

    /// Both orderings of every view pair.
    pub fn complete(num_views: usize) -> Self {
        let edges = (0..num_views)
            .flat_map(|n| (0..num_views).filter(move |&m| m != n).map(move |m| (n, m)))
            .collect();
        PairGraph { num_views, edges }
    }

    /// Both orderings of every pair at most `width` apart in index order.
    pub fn sliding_window(num_views: usize, width: usize) -> Self {
        let edges = (0..num_views)
            .flat_map(|n| {
                (0..num_views)
                    .filter(move |&m| m != n && m.abs_diff(n) <= width)
                    .map(move |m| (n, m))
            })
            .collect();
        PairGraph { num_views, edges }
    }

    /// Complete graph up to 12 views, sliding window of width 5 beyond.
    pub fn default_for(num_views: usize) -> Self {
        if num_views <= 12 {
            PairGraph::complete(num_views)
        } else {
            PairGraph::sliding_window(num_views, 5)
        }
    }

    pub fn is_connected(&self) -> bool {
        connected(self.num_views, self.edges.iter().copied())
    }
}

fn connected(views: usize, edges: impl Iterator<Item = (usize, usize)>) -> bool {
    if views == 0 {
        return false;
    }
    let mut adj = vec![Vec::new(); views];
    for (n, m) in edges {
        adj[n].push(m);
        adj[m].push(n);
    }
    let mut seen = vec![false; views];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(v) = queue.pop_front() {
        for &u in &adj[v] {
            if !seen[u] {
                seen[u] = true;
                queue.push_back(u);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignInit {
    /// Chain weighted similarity fits along a maximum-confidence spanning tree.
    #[default]
    SpanningTree,
    /// Identity poses and unit scales.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Initial gradient step.
    pub step: f64,
    /// Relative objective change that counts as converged.
    pub tol: f64,
    pub max_iters: usize,
    pub init: AlignInit,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            step: 1e-2,
            tol: 1e-6,
            max_iters: 2000,
            init: AlignInit::SpanningTree,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub width: usize,
    pub height: usize,
    /// World-from-camera pose per view, model units.
    pub world_from_camera: Vec<Pose>,
    /// Scale per pair, parallel to `graph.edges`.
    pub pair_scales: Vec<f64>,
    pub graph: PairGraph,
    pub gauge_pair: usize,
    /// Global pointmap per view, world frame, model units.
    pub pointmaps: Vec<Vec<Vec3>>,
    /// Per-pixel confidence per view (max over predictions of that pixel).
    pub confidences: Vec<Vec<f64>>,
    pub objective: f64,
    /// Objective after each accepted step (first entry is the initial value).
    pub history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub residual_terms: usize,
}

impl AlignmentResult {
    /// Camera-from-world extrinsics, the convention calibration consumes.
    pub fn camera_poses(&self) -> Vec<Pose> {
        self.world_from_camera
            .iter()
            .map(|p| p.inverse().with_frame(Frame::CameraModel))
            .collect()
    }

    pub fn num_views(&self) -> usize {
        self.world_from_camera.len()
    }

    /// Errors if the optimizer stopped on the iteration cap.
    pub fn require_converged(&self) -> Result<(), AlignError> {
        if self.converged {
            return Ok(());
        }
        let n = self.history.len();
        let relative_change = if n >= 2 {
            (self.history[n - 2] - self.history[n - 1]).abs() / self.history[n - 2].max(f64::MIN_POSITIVE)
        } else {
            f64::INFINITY
        };
        Err(AlignError::NonConvergence {
            iterations: self.iterations,
            relative_change,
        })
    }
}

/// One confident world point with its pixel provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub point: Vec3,
    pub view: usize,
    pub pixel: (usize, usize),
    pub color: Option<[f64; 3]>,
    pub confidence: f64,
}

/// All points with confidence strictly above `threshold`, in view then
/// row-major pixel order.
pub fn extract_point_cloud(
    result: &AlignmentResult,
    threshold: f64,
) -> Result<Vec<CloudPoint>, AlignError> {
    let w = result.width;
    let cloud: Vec<CloudPoint> = result
        .pointmaps
        .iter()
        .zip(&result.confidences)
        .enumerate()
        .flat_map(|(view, (pts, conf))| {
            pts.iter()
                .zip(conf)
                .enumerate()
                .filter(|(_, (_, &c))| c > threshold)
                .map(move |(i, (p, &c))| CloudPoint {
                    point: *p,
                    view,
                    pixel: (i % w, i / w),
                    color: None,
                    confidence: c,
                })
        })
        .collect();
    if cloud.is_empty() {
        return Err(AlignError::EmptyCloud { threshold });
    }
    Ok(cloud)
}

/// Optimization state: world-from-camera per view and log-scale per pair.
#[derive(Clone)]
struct Params {
    poses: Vec<Pose>,
    log_scales: Vec<f64>,
}

struct Problem<'a> {
    pairs: Vec<&'a PairwisePrediction>,
    views: usize,
    pixels: usize,
    gauge_pair: usize,
    /// Pairs with any positive weight; others carry no information.
    active: Vec<bool>,
}

struct Evaluation {
    objective: f64,
    pointmaps: Vec<Vec<Vec3>>,
    /// Rotation (3) + translation (3) per view, then one per pair.
    gradient: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn gradient_len(&self) -> usize {
        6 * self.views + self.pairs.len()
    }

    /// Weighted-mean global pointmaps for the given parameters.
    fn global_pointmaps(&self, params: &Params) -> Vec<Vec<Vec3>> {
        let mut sum = vec![vec![Vec3::zeros(); self.pixels]; self.views];
        let mut weight = vec![vec![0.0; self.pixels]; self.views];
        for (e, pair) in self.pairs.iter().enumerate() {
            let pose = &params.poses[pair.first];
            let sigma = params.log_scales[e].exp();
            for (view, pts, conf) in [
                (pair.first, &pair.pointmap_self, &pair.confidence_self),
                (pair.second, &pair.pointmap_other, &pair.confidence_other),
            ] {
                for px in 0..self.pixels {
                    let c = conf[px];
                    if c > 0.0 {
                        sum[view][px] += pose.transform_point(&(pts[px] * sigma)) * c;
                        weight[view][px] += c;
                    }
                }
            }
        }
        sum.into_iter()
            .zip(weight)
            .map(|(s, w)| {
                s.into_iter()
                    .zip(w)
                    .map(|(p, w)| if w > 0.0 { p / w } else { Vec3::zeros() })
                    .collect()
            })
            .collect()
    }

    fn objective_at(&self, params: &Params, global: &[Vec<Vec3>]) -> f64 {
        self.accumulate(params, global, None)
    }

    fn evaluate(&self, params: &Params) -> Evaluation {
        let pointmaps = self.global_pointmaps(params);
        let mut gradient = vec![0.0; self.gradient_len()];
        let objective = self.accumulate(params, &pointmaps, Some(&mut gradient));
        // Gauge parameters are fixed.
        gradient[..6].fill(0.0);
        gradient[6 * self.views + self.gauge_pair] = 0.0;
        Evaluation {
            objective,
            pointmaps,
            gradient,
        }
    }

    /// Objective with the global pointmaps held fixed; optionally adds the
    /// gradient in local coordinates (left rotation increment, translation,
    /// log-scale).
    fn accumulate(&self, params: &Params, global: &[Vec<Vec3>], mut grad: Option<&mut [f64]>) -> f64 {
        let mut total = 0.0;
        for (e, pair) in self.pairs.iter().enumerate() {
            let pose = &params.poses[pair.first];
            let sigma = params.log_scales[e].exp();
            let mut g_rot = Vec3::zeros();
            let mut g_trans = Vec3::zeros();
            let mut g_scale = 0.0;
            for (view, pts, conf) in [
                (pair.first, &pair.pointmap_self, &pair.confidence_self),
                (pair.second, &pair.pointmap_other, &pair.confidence_other),
            ] {
                let target = &global[view];
                for px in 0..self.pixels {
                    let c = conf[px];
                    if c <= 0.0 {
                        continue;
                    }
                    let y = pose.rotation.rotate(&(pts[px] * sigma));
                    let r = target[px] - (y + pose.translation);
                    total += c * r.norm_squared();
                    if grad.is_some() {
                        g_rot += r.cross(&y) * (2.0 * c);
                        g_trans -= r * (2.0 * c);
                        g_scale -= 2.0 * c * r.dot(&y);
                    }
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                let base = 6 * pair.first;
                for k in 0..3 {
                    g[base + k] += g_rot[k];
                    g[base + 3 + k] += g_trans[k];
                }
                g[6 * self.views + e] += g_scale;
            }
        }
        total
    }

    fn retract(&self, params: &Params, direction: &[f64], step: f64) -> Params {
        let mut out = params.clone();
        for v in 1..self.views {
            let b = 6 * v;
            let w = Vec3::new(direction[b], direction[b + 1], direction[b + 2]) * step;
            let t = Vec3::new(direction[b + 3], direction[b + 4], direction[b + 5]) * step;
            let p = &mut out.poses[v];
            p.rotation = exp_map(&AxisAngle(w)) * p.rotation;
            p.translation += t;
        }
        for (e, s) in out.log_scales.iter_mut().enumerate() {
            if e != self.gauge_pair {
                *s += direction[6 * self.views + e] * step;
            }
        }
        out
    }
}

/// Minimizes the pairwise alignment objective over poses and pair scales.
///
/// Returns a result even when the iteration cap is hit; check
/// [`AlignmentResult::converged`] or [`AlignmentResult::require_converged`].
pub fn align_global(
    pairs: &[PairwisePrediction],
    graph: &PairGraph,
    config: &AlignConfig,
) -> Result<AlignmentResult, AlignError> {
    let problem = build_problem(pairs, graph)?;
    let init = match config.init {
        AlignInit::SpanningTree => spanning_tree_init(&problem)?,
        AlignInit::Identity => Params {
            poses: vec![Pose::identity(Frame::CameraModel); problem.views],
            log_scales: vec![0.0; problem.pairs.len()],
        },
    };
    Ok(optimize(&problem, init, graph, config))
}

fn build_problem<'a>(
    pairs: &'a [PairwisePrediction],
    graph: &PairGraph,
) -> Result<Problem<'a>, AlignError> {
    let views = graph.num_views;
    if views < 2 {
        return Err(AlignError::TooFewViews(views));
    }
    for &(n, m) in &graph.edges {
        if n == m || n >= views || m >= views {
            return Err(AlignError::InvalidPair {
                first: n,
                second: m,
                views,
            });
        }
    }
    if !graph.is_connected() {
        return Err(AlignError::DisconnectedGraph { views });
    }
    let mut ordered = Vec::with_capacity(graph.edges.len());
    for &(n, m) in &graph.edges {
        let pair = pairs
            .iter()
            .find(|p| p.first == n && p.second == m)
            .ok_or(AlignError::MissingPrediction { first: n, second: m })?;
        pair.validate()?;
        ordered.push(pair);
    }
    let (width, height) = (ordered[0].width, ordered[0].height);
    if let Some(p) = ordered.iter().find(|p| p.width != width || p.height != height) {
        return Err(AlignError::ShapeMismatch(format!(
            "pair ({}, {}) is {}x{}, expected {}x{}",
            p.first, p.second, p.width, p.height, width, height
        )));
    }
    let active: Vec<bool> = ordered.iter().map(|p| p.total_confidence() > 0.0).collect();
    let weighted_edges = ordered
        .iter()
        .zip(&active)
        .filter(|(_, &a)| a)
        .map(|(p, _)| (p.first, p.second));
    if !connected(views, weighted_edges) {
        return Err(AlignError::DisconnectedGraph { views });
    }
    for v in 0..views {
        if !ordered.iter().zip(&active).any(|(p, &a)| a && p.first == v) {
            return Err(AlignError::UnposedView(v));
        }
    }
    let gauge_pair = ordered
        .iter()
        .zip(&active)
        .position(|(p, &a)| a && p.first == 0)
        .ok_or(AlignError::UnposedView(0))?;
    Ok(Problem {
        pixels: width * height,
        pairs: ordered,
        views,
        gauge_pair,
        active,
    })
}

/// Weighted similarity `(s, R, t)` minimizing `Σ w ||dst - (s R src + t)||²`.
pub fn weighted_similarity(src: &[Vec3], dst: &[Vec3], weights: &[f64]) -> Option<(f64, Rotation, Vec3)> {
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        return None;
    }
    let mu_s = src.iter().zip(weights).map(|(p, w)| p * *w).sum::<Vec3>() / wsum;
    let mu_d = dst.iter().zip(weights).map(|(p, w)| p * *w).sum::<Vec3>() / wsum;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        let a = s - mu_s;
        let b = d - mu_d;
        cov += b * a.transpose() * *w;
        var_s += w * a.norm_squared();
    }
    if var_s <= 0.0 {
        return None;
    }
    let svd = SVD::new(cov, true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = project_to_so3(&(u * d * v_t));
    let trace: f64 = (Matrix3::from_diagonal(&svd.singular_values) * d).trace();
    let s = trace / var_s;
    let t = mu_d - r * mu_s * s;
    Some((s, Rotation::from_matrix_unchecked(r), t))
}

/// Scale-only fit `argmin_σ Σ w ||dst - σ src||²`.
fn weighted_scale(src: &[Vec3], dst: &[Vec3], weights: &[f64]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        num += w * s.dot(d);
        den += w * s.norm_squared();
    }
    (den > 0.0 && num > 0.0).then(|| num / den)
}

fn spanning_tree_init(problem: &Problem<'_>) -> Result<Params, AlignError> {
    let views = problem.views;
    let n_pairs = problem.pairs.len();
    let mut poses: Vec<Option<Pose>> = vec![None; views];
    let mut world: Vec<Option<Vec<Vec3>>> = vec![None; views];
    let mut log_scales: Vec<Option<f64>> = vec![None; n_pairs];

    // Highest total confidence first; stable so ties keep graph order.
    let mut order: Vec<usize> = (0..n_pairs).filter(|&e| problem.active[e]).collect();
    order.sort_by(|&a, &b| {
        problem.pairs[b]
            .total_confidence()
            .total_cmp(&problem.pairs[a].total_confidence())
    });

    let gauge = problem.pairs[problem.gauge_pair];
    poses[0] = Some(Pose::identity(Frame::CameraModel));
    world[0] = Some(gauge.pointmap_self.clone());
    log_scales[problem.gauge_pair] = Some(0.0);
    let mut known = 1;

    // Prim-style growth: repeatedly take the best pair linking a placed view
    // to an unplaced one. A view's pose and world points are placed together.
    while known < views {
        let next = order.iter().copied().find(|&e| {
            let p = problem.pairs[e];
            poses[p.first].is_some() != poses[p.second].is_some()
        });
        let Some(e) = next else {
            return Err(AlignError::DisconnectedGraph { views });
        };
        let p = problem.pairs[e];
        if let Some(pose) = poses[p.first] {
            // First view placed: fit the pair scale on its own points, then
            // place the second view's points.
            let target: Vec<Vec3> = world[p.first]
                .as_ref()
                .expect("placed view has points")
                .iter()
                .map(|x| pose.inverse().transform_point(x))
                .collect();
            let sigma = weighted_scale(&p.pointmap_self, &target, &p.confidence_self).unwrap_or(1.0);
            log_scales[e].get_or_insert(sigma.ln());
            let sigma = log_scales[e].expect("set").exp();
            world[p.second] = Some(
                p.pointmap_other
                    .iter()
                    .map(|x| pose.transform_point(&(x * sigma)))
                    .collect(),
            );
            let v = p.second;
            place_view(problem, v, &mut poses, &mut world, &mut log_scales, &order)?;
        } else {
            // Second view placed: its points in the first view's frame fix
            // the first view's pose and the pair scale.
            let target = world[p.second].as_ref().expect("placed view has points");
            let (s, r, t) = weighted_similarity(&p.pointmap_other, target, &p.confidence_other)
                .ok_or(AlignError::DisconnectedGraph { views })?;
            let pose = Pose::new(r, t, Frame::CameraModel);
            poses[p.first] = Some(pose);
            log_scales[e] = Some(s.ln());
            world[p.first] = Some(p.pointmap_self.iter().map(|x| pose.transform_point(&(x * s))).collect());
        }
        known = poses.iter().filter(|p| p.is_some()).count();
    }

    let poses: Vec<Pose> = poses.into_iter().map(|p| p.expect("all views placed")).collect();
    let log_scales = (0..n_pairs)
        .map(|e| {
            log_scales[e].unwrap_or_else(|| {
                let p = problem.pairs[e];
                let pose = poses[p.first];
                let target: Vec<Vec3> = world[p.first]
                    .as_ref()
                    .map(|w| w.iter().map(|x| pose.inverse().transform_point(x)).collect())
                    .unwrap_or_default();
                weighted_scale(&p.pointmap_self, &target, &p.confidence_self)
                    .map(f64::ln)
                    .unwrap_or(0.0)
            })
        })
        .collect();
    Ok(Params { poses, log_scales })
}

/// Fixes the pose of view `v` whose world points are known, using its
/// best-scoring self pointmap.
fn place_view(
    problem: &Problem<'_>,
    v: usize,
    poses: &mut [Option<Pose>],
    world: &mut [Option<Vec<Vec3>>],
    log_scales: &mut [Option<f64>],
    order: &[usize],
) -> Result<(), AlignError> {
    if poses[v].is_some() {
        return Ok(());
    }
    let e = order
        .iter()
        .copied()
        .find(|&e| problem.pairs[e].first == v)
        .ok_or(AlignError::UnposedView(v))?;
    let p = problem.pairs[e];
    let target = world[v].as_ref().expect("caller placed the points");
    let (s, r, t) = weighted_similarity(&p.pointmap_self, target, &p.confidence_self)
        .ok_or(AlignError::UnposedView(v))?;
    poses[v] = Some(Pose::new(r, t, Frame::CameraModel));
    log_scales[e] = Some(s.ln());
    Ok(())
}

fn optimize(problem: &Problem<'_>, init: Params, graph: &PairGraph, config: &AlignConfig) -> AlignmentResult {
    let mut params = init;
    let mut eval = problem.evaluate(&params);
    let mut history = vec![eval.objective];
    let mut step = config.step;
    let mut prev: Option<(Vec<f64>, f64)> = None;
    let mut converged = false;
    let mut iterations = 0;
    let terms = residual_terms(problem);

    while iterations < config.max_iters {
        iterations += 1;
        let g = &eval.gradient;
        let gnorm2: f64 = g.iter().map(|x| x * x).sum();
        if gnorm2 == 0.0 || eval.objective <= f64::MIN_POSITIVE * terms as f64 {
            converged = true;
            break;
        }
        // Barzilai-Borwein step from the last accepted move.
        if let Some((g_prev, s_len)) = &prev {
            let mut sy = 0.0;
            let mut ss = 0.0;
            for (a, b) in g.iter().zip(g_prev) {
                let s = -b * s_len;
                sy += s * (a - b);
                ss += s * s;
            }
            if sy > 0.0 {
                step = ss / sy;
            }
        }
        let direction: Vec<f64> = g.iter().map(|x| -x).collect();
        let mut accepted = None;
        for _ in 0..60 {
            let trial = problem.retract(&params, &direction, step);
            let pm = problem.global_pointmaps(&trial);
            let f = problem.objective_at(&trial, &pm);
            if f <= eval.objective {
                accepted = Some(trial);
                break;
            }
            step *= 0.5;
        }
        let Some(trial) = accepted else {
            debug!("no descent step found at iteration {iterations}; stopping");
            converged = true;
            break;
        };
        let old = eval.objective;
        prev = Some((eval.gradient.clone(), step));
        params = trial;
        eval = problem.evaluate(&params);
        history.push(eval.objective);
        let rel = (old - eval.objective) / old.max(f64::MIN_POSITIVE);
        if rel < config.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        let n = history.len();
        let rel = if n >= 2 {
            (history[n - 2] - history[n - 1]) / history[n - 2].max(f64::MIN_POSITIVE)
        } else {
            0.0
        };
        // Tail within 100× the tolerance still counts as settled.
        converged = rel <= 100.0 * config.tol;
        if !converged {
            warn!("alignment hit {} iterations with relative change {rel:.3e}", config.max_iters);
        }
    }
    debug!(
        "alignment: objective {:.6e} after {iterations} iterations",
        eval.objective
    );

    let confidences = per_view_confidence(problem);
    AlignmentResult {
        width: problem.pairs[0].width,
        height: problem.pairs[0].height,
        world_from_camera: params.poses,
        pair_scales: params.log_scales.iter().map(|s| s.exp()).collect(),
        graph: graph.clone(),
        gauge_pair: problem.gauge_pair,
        pointmaps: eval.pointmaps,
        confidences,
        objective: eval.objective,
        history,
        iterations,
        converged,
        residual_terms: terms,
    }
}

fn residual_terms(problem: &Problem<'_>) -> usize {
    problem
        .pairs
        .iter()
        .map(|p| {
            p.confidence_self.iter().chain(&p.confidence_other).filter(|&&c| c > 0.0).count()
        })
        .sum()
}

fn per_view_confidence(problem: &Problem<'_>) -> Vec<Vec<f64>> {
    let mut conf = vec![vec![0.0f64; problem.pixels]; problem.views];
    for p in &problem.pairs {
        for (view, c) in [(p.first, &p.confidence_self), (p.second, &p.confidence_other)] {
            for (dst, &src) in conf[view].iter_mut().zip(c.iter()) {
                *dst = dst.max(src);
            }
        }
    }
    conf
}
