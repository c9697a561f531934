//! Implicit scene fields: a one-hidden-layer MLP over sinusoidally encoded,
//! box-normalized coordinates, with occupancy, segmentation and color heads.

use std::f64::consts::PI;
use std::fmt::Debug;

use log::debug;
use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Frame, Vec3};
use crate::reconstruction::LabeledPointCloud;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("degenerate bounds: {0}")]
    DegenerateBounds(String),
    #[error("segmentation needs at least two classes, found {0}")]
    SingleClass(usize),
    #[error("color {value} at point {index} is outside [0, 1]")]
    InvalidColor { index: usize, value: f64 },
    #[error("cloud has no {0} labels")]
    MissingLabels(&'static str),
    #[error("cloud must be in the robot base frame, got {0}")]
    WrongFrame(Frame),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

/// Floating-point types the network runs in.
pub trait Real:
    Float + FromPrimitive + LinalgScalar + ScalarOperand + Debug + Send + Sync + 'static
{
}
impl<T> Real for T where
    T: Float + FromPrimitive + LinalgScalar + ScalarOperand + Debug + Send + Sync + 'static
{
}

fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncoding {
    pub num_frequencies: usize,
    pub include_raw_input: bool,
}

impl Default for PositionalEncoding {
    fn default() -> Self {
        PositionalEncoding {
            num_frequencies: 6,
            include_raw_input: true,
        }
    }
}

impl PositionalEncoding {
    pub fn dim(&self) -> usize {
        6 * self.num_frequencies + if self.include_raw_input { 3 } else { 0 }
    }

    /// `[x; sin(2^k π x); cos(2^k π x)]`, each block per axis.
    pub fn encode(&self, x: &[f64; 3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        self.encode_into(x, &mut out);
        out
    }

    fn encode_into<T: Real>(&self, x: &[f64; 3], out: &mut Vec<T>) {
        if self.include_raw_input {
            out.extend(x.iter().map(|&v| real::<T>(v)));
        }
        for k in 0..self.num_frequencies {
            let f = (1u64 << k) as f64 * PI;
            out.extend(x.iter().map(|&v| real::<T>((f * v).sin())));
            out.extend(x.iter().map(|&v| real::<T>((f * v).cos())));
        }
    }
}

/// Affine map of an axis-aligned box onto `[-1, 1]³`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Normalization {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, FieldError> {
        for k in 0..3 {
            if !(max[k] > min[k]) || !min[k].is_finite() || !max[k].is_finite() {
                return Err(FieldError::DegenerateBounds(format!(
                    "axis {k}: [{}, {}]",
                    min[k], max[k]
                )));
            }
        }
        Ok(Normalization { min, max })
    }

    pub fn apply(&self, p: &Vec3) -> [f64; 3] {
        std::array::from_fn(|k| 2.0 * (p[k] - self.min[k]) / (self.max[k] - self.min[k]) - 1.0)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    /// Sigmoid scalar trained with binary cross-entropy.
    Occupancy,
    /// Softmax over `class_ids` trained with cross-entropy.
    Segmentation { class_ids: Vec<i32> },
    /// Linear RGB trained with mean squared error.
    Color,
}

impl Head {
    pub fn outputs(&self) -> usize {
        match self {
            Head::Occupancy => 1,
            Head::Segmentation { class_ids } => class_ids.len(),
            Head::Color => 3,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match self {
            Head::Occupancy => LossKind::BinaryCrossEntropy,
            Head::Segmentation { .. } => LossKind::CrossEntropy,
            Head::Color => LossKind::MeanSquared,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    BinaryCrossEntropy,
    CrossEntropy,
    MeanSquared,
}

/// Per-batch supervision. Row order matches the input rows.
#[derive(Debug, Clone)]
pub enum Targets<T> {
    Binary(Array1<T>),
    Classes(Vec<usize>),
    Values(Array2<T>),
}

/// input → hidden (ReLU) → linear logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

/// Gradients with the same shapes as [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

impl<T: Real> Mlp<T> {
    /// He-initialized hidden layer, Glorot-initialized output, zero biases.
    pub fn random(inputs: usize, hidden: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let mut fill = |rows: usize, cols: usize, sd: f64| {
            let normal = Normal::new(0.0, sd).expect("positive std");
            Array2::from_shape_simple_fn((rows, cols), || real::<T>(normal.sample(rng)))
        };
        Mlp {
            w1: fill(inputs, hidden, (2.0 / inputs as f64).sqrt()),
            b1: Array1::zeros(hidden),
            w2: fill(hidden, outputs, (2.0 / (hidden + outputs) as f64).sqrt()),
            b2: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.w2.ncols()
    }

    fn hidden_pre(&self, x: ArrayView2<T>) -> Array2<T> {
        x.dot(&self.w1) + &self.b1
    }

    /// Raw logits, one row per input row.
    pub fn logits(&self, x: ArrayView2<T>) -> Array2<T> {
        self.hidden_pre(x).mapv(relu).dot(&self.w2) + &self.b2
    }

    /// Mean loss over the batch.
    pub fn loss(&self, x: ArrayView2<T>, targets: &Targets<T>) -> T {
        loss_and_dlogits(&self.logits(x), targets).0
    }

    /// Mean loss and its gradient with respect to every parameter.
    pub fn loss_and_gradients(&self, x: ArrayView2<T>, targets: &Targets<T>) -> (T, Gradients<T>) {
        let pre = self.hidden_pre(x);
        let h = pre.mapv(relu);
        let logits = h.dot(&self.w2) + &self.b2;
        let (loss, dz) = loss_and_dlogits(&logits, targets);
        let w2 = h.t().dot(&dz).as_standard_layout().into_owned();
        let b2 = dz.sum_axis(Axis(0));
        let mut dh = dz.dot(&self.w2.t());
        dh.zip_mut_with(&pre, |g, &p| {
            if p <= T::zero() {
                *g = T::zero();
            }
        });
        let w1 = x.t().dot(&dh).as_standard_layout().into_owned();
        let b1 = dh.sum_axis(Axis(0));
        (loss, Gradients { w1, b1, w2, b2 })
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn parameters_mut(&mut self) -> [&mut [T]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }
}

impl<T: Real> Gradients<T> {
    fn zeros_like(m: &Mlp<T>) -> Self {
        Gradients {
            w1: Array2::zeros(m.w1.raw_dim()),
            b1: Array1::zeros(m.b1.raw_dim()),
            w2: Array2::zeros(m.w2.raw_dim()),
            b2: Array1::zeros(m.b2.raw_dim()),
        }
    }

    fn slices(&self) -> [&[T]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [T]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }
}

fn relu<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn softmax_rows<T: Real>(z: &Array2<T>) -> Array2<T> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean loss and `d loss / d logits`.
fn loss_and_dlogits<T: Real>(logits: &Array2<T>, targets: &Targets<T>) -> (T, Array2<T>) {
    let n = logits.nrows();
    let inv_n = T::one() / real::<T>(n.max(1) as f64);
    match targets {
        Targets::Binary(y) => {
            let mut loss = T::zero();
            let mut dz = Array2::zeros(logits.raw_dim());
            for i in 0..n {
                let z = logits[[i, 0]];
                // softplus(z) - y z, stable for large |z|
                loss = loss + z.max(T::zero()) - y[i] * z + (-z.abs()).exp().ln_1p();
                dz[[i, 0]] = (sigmoid(z) - y[i]) * inv_n;
            }
            (loss * inv_n, dz)
        }
        Targets::Classes(labels) => {
            let p = softmax_rows(logits);
            let mut loss = T::zero();
            let mut dz = p.clone();
            for (i, &c) in labels.iter().enumerate() {
                let row = logits.row(i);
                let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
                let lse = m + row.fold(T::zero(), |a, &v| a + (v - m).exp()).ln();
                loss = loss + lse - logits[[i, c]];
                dz[[i, c]] = dz[[i, c]] - T::one();
            }
            (loss * inv_n, dz * inv_n)
        }
        Targets::Values(y) => {
            let diff = logits - y;
            let count = real::<T>(diff.len().max(1) as f64);
            let loss = diff.mapv(|d| d * d).sum() / count;
            (loss, diff * (real::<T>(2.0) / count))
        }
    }
}

/// Applies the head's output activation to logits.
pub fn activate<T: Real>(head: &Head, logits: &Array2<T>) -> Array2<T> {
    match head {
        Head::Occupancy => logits.mapv(sigmoid),
        Head::Segmentation { .. } => softmax_rows(logits),
        Head::Color => logits.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: usize,
    pub encoding: PositionalEncoding,
    /// Explicit negative-sampling box; defaults to the inflated cloud bounds.
    pub negative_bounds: Option<([f64; 3], [f64; 3])>,
    /// Per-axis inflation of the cloud bounds when no box is given.
    pub bounds_inflation: f64,
    pub negatives_per_positive: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_size: 512,
            epochs: 200,
            seed: 0,
            hidden: 256,
            encoding: PositionalEncoding::default(),
            negative_bounds: None,
            bounds_inflation: 0.2,
            negatives_per_positive: 1.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), FieldError> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.batch_size > 0
            && self.hidden > 0
            && self.negatives_per_positive >= 0.0
            && self.bounds_inflation >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(FieldError::InvalidConfig(format!("{self:?}")))
        }
    }
}

const OCCUPANCY_LOGIT_LIMIT: f64 = 30.0;

/// A trained field: encoding, normalization box, network and head.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldModel {
    pub encoding: PositionalEncoding,
    pub normalization: Normalization,
    pub head: Head,
    pub network: Mlp<f32>,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    pub config: TrainConfig,
}

impl FieldModel {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }

    fn features(&self, points: &[Vec3]) -> Array2<f32> {
        encode_points(&self.encoding, &self.normalization, points)
    }

    /// Activated outputs per point: `[p]`, class probabilities, or RGB.
    pub fn query(&self, points: &[Vec3]) -> Vec<Vec<f64>> {
        const CHUNK: usize = 4096;
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(CHUNK) {
            let mut z = self.network.logits(self.features(chunk).view()).mapv(f64::from);
            if self.head == Head::Occupancy {
                // sigmoid(±30) is still strictly inside (0, 1) in f64.
                z.mapv_inplace(|v| v.clamp(-OCCUPANCY_LOGIT_LIMIT, OCCUPANCY_LOGIT_LIMIT));
            }
            let y = activate(&self.head, &z);
            out.extend(y.rows().into_iter().map(|r| r.to_vec()));
        }
        out
    }

    /// Most probable class id per point; `None` for non-segmentation heads.
    pub fn predict_classes(&self, points: &[Vec3]) -> Option<Vec<i32>> {
        let Head::Segmentation { class_ids } = &self.head else {
            return None;
        };
        Some(
            self.query(points)
                .iter()
                .map(|p| {
                    let k = p
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(k, _)| k)
                        .unwrap_or(0);
                    class_ids[k]
                })
                .collect(),
        )
    }
}

fn encode_points<T: Real>(enc: &PositionalEncoding, norm: &Normalization, points: &[Vec3]) -> Array2<T> {
    let mut flat = Vec::with_capacity(points.len() * enc.dim());
    for p in points {
        enc.encode_into(&norm.apply(p), &mut flat);
    }
    Array2::from_shape_vec((points.len(), enc.dim()), flat).expect("encoding width")
}

fn check_cloud(cloud: &LabeledPointCloud) -> Result<(), FieldError> {
    if cloud.is_empty() {
        return Err(FieldError::EmptyCloud);
    }
    if cloud.frame != Frame::RobotBase {
        return Err(FieldError::WrongFrame(cloud.frame));
    }
    Ok(())
}

/// Training box: explicit bounds (which must contain the cloud) or the
/// cloud's bounding box inflated per axis.
fn training_box(cloud: &LabeledPointCloud, cfg: &TrainConfig) -> Result<Normalization, FieldError> {
    let (lo, hi) = cloud.bounds().ok_or(FieldError::EmptyCloud)?;
    match cfg.negative_bounds {
        Some((min, max)) => {
            let norm = Normalization::new(min, max)?;
            if !(norm.contains(&lo) && norm.contains(&hi)) {
                return Err(FieldError::DegenerateBounds(
                    "negative-sampling box does not contain the cloud".into(),
                ));
            }
            Ok(norm)
        }
        None => {
            let pad = (hi - lo) * cfg.bounds_inflation;
            Normalization::new((lo - pad).into(), (hi + pad).into())
        }
    }
}

fn sample_in(norm: &Normalization, rng: &mut impl Rng) -> Vec3 {
    Vec3::new(
        rng.random_range(norm.min[0]..=norm.max[0]),
        rng.random_range(norm.min[1]..=norm.max[1]),
        rng.random_range(norm.min[2]..=norm.max[2]),
    )
}

/// Mini-batch SGD with momentum over fixed features plus `extra` rows
/// regenerated every epoch. Returns the mean loss per epoch.
fn fit<T: Real>(
    net: &mut Mlp<T>,
    features: &Array2<T>,
    targets: &Targets<T>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut extra: impl FnMut(&mut ChaCha8Rng) -> (Array2<T>, Targets<T>),
) -> Vec<f64> {
    let lr = real::<T>(cfg.learning_rate);
    let mu = real::<T>(cfg.momentum);
    let mut velocity = Gradients::zeros_like(net);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (xe, te) = extra(rng);
        let x = if xe.nrows() > 0 {
            ndarray::concatenate(Axis(0), &[features.view(), xe.view()]).expect("same width")
        } else {
            features.clone()
        };
        let t = concat_targets(targets, &te);
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), batch);
            let tb = select_targets(&t, batch);
            let (loss, grad) = net.loss_and_gradients(xb.view(), &tb);
            total += loss.to_f64().unwrap_or(f64::NAN) * batch.len() as f64;
            for ((p, v), g) in net
                .parameters_mut()
                .into_iter()
                .zip(velocity.slices_mut())
                .zip(grad.slices())
            {
                for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = mu * *v - lr * g;
                    *p = *p + *v;
                }
            }
        }
        let mean = total / x.nrows() as f64;
        if epoch % 20 == 0 || epoch + 1 == cfg.epochs {
            debug!("epoch {epoch}: loss {mean:.5}");
        }
        history.push(mean);
    }
    history
}

fn concat_targets<T: Real>(a: &Targets<T>, b: &Targets<T>) -> Targets<T> {
    match (a, b) {
        (Targets::Binary(a), Targets::Binary(b)) => {
            Targets::Binary(a.iter().chain(b.iter()).copied().collect())
        }
        (Targets::Classes(a), Targets::Classes(b)) => Targets::Classes([a.as_slice(), b].concat()),
        (Targets::Values(a), Targets::Values(b)) => {
            Targets::Values(ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("same width"))
        }
        _ => unreachable!("target kinds are fixed per head"),
    }
}

fn select_targets<T: Real>(t: &Targets<T>, idx: &[usize]) -> Targets<T> {
    match t {
        Targets::Binary(y) => Targets::Binary(idx.iter().map(|&i| y[i]).collect()),
        Targets::Classes(y) => Targets::Classes(idx.iter().map(|&i| y[i]).collect()),
        Targets::Values(y) => Targets::Values(y.select(Axis(0), idx)),
    }
}

fn no_extra<T: Real>(width: usize, empty: Targets<T>) -> impl FnMut(&mut ChaCha8Rng) -> (Array2<T>, Targets<T>) {
    move |_| (Array2::zeros((0, width)), empty.clone())
}

/// Occupancy by noise-contrastive estimation: cloud points are positives,
/// uniform samples from the training box are negatives, redrawn each epoch.
pub fn train_occupancy(cloud: &LabeledPointCloud, cfg: &TrainConfig) -> Result<FieldModel, FieldError> {
    check_cloud(cloud)?;
    cfg.validate()?;
    let norm = training_box(cloud, cfg)?;
    let enc = cfg.encoding;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Mlp::<f32>::random(enc.dim(), cfg.hidden, 1, &mut rng);
    let features = encode_points::<f32>(&enc, &norm, &cloud.points);
    let targets = Targets::Binary(Array1::ones(cloud.len()));
    let negatives = ((cloud.len() as f64) * cfg.negatives_per_positive).round() as usize;
    let history = fit(&mut net, &features, &targets, cfg, &mut rng, |rng| {
        let pts: Vec<Vec3> = (0..negatives).map(|_| sample_in(&norm, rng)).collect();
        (encode_points(&enc, &norm, &pts), Targets::Binary(Array1::zeros(negatives)))
    });
    Ok(FieldModel {
        encoding: enc,
        normalization: norm,
        head: Head::Occupancy,
        network: net,
        loss_history: history,
        config: cfg.clone(),
    })
}

/// Per-point class prediction with a softmax head over the label values
/// present in the cloud.
pub fn train_segmentation(cloud: &LabeledPointCloud, cfg: &TrainConfig) -> Result<FieldModel, FieldError> {
    check_cloud(cloud)?;
    cfg.validate()?;
    let labels = cloud.segmentation.as_ref().ok_or(FieldError::MissingLabels("segmentation"))?;
    let mut class_ids: Vec<i32> = labels.clone();
    class_ids.sort_unstable();
    class_ids.dedup();
    if class_ids.len() < 2 {
        return Err(FieldError::SingleClass(class_ids.len()));
    }
    let norm = training_box(cloud, cfg)?;
    let enc = cfg.encoding;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Mlp::<f32>::random(enc.dim(), cfg.hidden, class_ids.len(), &mut rng);
    let features = encode_points::<f32>(&enc, &norm, &cloud.points);
    let index: Vec<usize> = labels
        .iter()
        .map(|l| class_ids.binary_search(l).expect("collected above"))
        .collect();
    let history = fit(
        &mut net,
        &features,
        &Targets::Classes(index),
        cfg,
        &mut rng,
        no_extra(enc.dim(), Targets::Classes(vec![])),
    );
    Ok(FieldModel {
        encoding: enc,
        normalization: norm,
        head: Head::Segmentation { class_ids },
        network: net,
        loss_history: history,
        config: cfg.clone(),
    })
}

/// RGB regression with a linear head; colors must lie in [0, 1].
pub fn train_color(cloud: &LabeledPointCloud, cfg: &TrainConfig) -> Result<FieldModel, FieldError> {
    check_cloud(cloud)?;
    cfg.validate()?;
    let colors = cloud.colors.as_ref().ok_or(FieldError::MissingLabels("color"))?;
    for (index, c) in colors.iter().enumerate() {
        if let Some(&value) = c.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(FieldError::InvalidColor { index, value });
        }
    }
    let norm = training_box(cloud, cfg)?;
    let enc = cfg.encoding;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Mlp::<f32>::random(enc.dim(), cfg.hidden, 3, &mut rng);
    let features = encode_points::<f32>(&enc, &norm, &cloud.points);
    let y = Array2::from_shape_fn((colors.len(), 3), |(i, k)| colors[i][k] as f32);
    // Start the linear head at the mean color with a zero output layer.
    net.w2.fill(0.0);
    net.b2 = y.mean_axis(Axis(0)).expect("non-empty cloud");
    let history = fit(
        &mut net,
        &features,
        &Targets::Values(y),
        cfg,
        &mut rng,
        no_extra(enc.dim(), Targets::Values(Array2::zeros((0, 3)))),
    );
    Ok(FieldModel {
        encoding: enc,
        normalization: norm,
        head: Head::Color,
        network: net,
        loss_history: history,
        config: cfg.clone(),
    })
}

/// Largest relative difference between the analytic gradient and central
/// finite differences (step 1e-5) over every parameter of a random f64
/// network. Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check(
    inputs: usize,
    hidden: usize,
    outputs: usize,
    kind: LossKind,
    samples: usize,
    seed: u64,
) -> f64 {
    const STEP: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outputs = match kind {
        LossKind::BinaryCrossEntropy => 1,
        _ => outputs.max(2),
    };
    let mut net = Mlp::<f64>::random(inputs, hidden, outputs, &mut rng);
    // Nonzero biases so every parameter block is exercised.
    net.b1.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    net.b2.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    let x = Array2::from_shape_simple_fn((samples, inputs), || rng.random_range(-1.0..1.0));
    let targets = match kind {
        LossKind::BinaryCrossEntropy => {
            Targets::Binary((0..samples).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect())
        }
        LossKind::CrossEntropy => Targets::Classes((0..samples).map(|_| rng.random_range(0..outputs)).collect()),
        LossKind::MeanSquared => {
            Targets::Values(Array2::from_shape_simple_fn((samples, outputs), || rng.random_range(0.0..1.0)))
        }
    };
    let (_, grad) = net.loss_and_gradients(x.view(), &targets);
    let analytic: Vec<f64> = grad.slices().iter().flat_map(|s| s.iter().copied()).collect();
    let mut worst: f64 = 0.0;
    let mut flat = 0;
    for block in 0..4 {
        let len = net.parameters_mut()[block].len();
        for i in 0..len {
            let orig = net.parameters_mut()[block][i];
            net.parameters_mut()[block][i] = orig + STEP;
            let plus = net.loss(x.view(), &targets);
            net.parameters_mut()[block][i] = orig - STEP;
            let minus = net.loss(x.view(), &targets);
            net.parameters_mut()[block][i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[flat];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
            flat += 1;
        }
    }
    worst
}

/// Fraction of `points` whose occupancy probability agrees with `occupied`
/// at threshold 0.5.
pub fn occupancy_accuracy(model: &FieldModel, points: &[Vec3], occupied: &[bool]) -> f64 {
    if points.is_empty() {
        return 1.0;
    }
    let hits = model
        .query(points)
        .iter()
        .zip(occupied)
        .filter(|(p, &o)| (p[0] > 0.5) == o)
        .count();
    hits as f64 / points.len() as f64
}

/// Split indices into a shuffled (train, held-out) pair.
pub fn holdout_split(n: usize, holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64) * holdout).round() as usize;
    let test = idx[..k].to_vec();
    let train = idx[k..].to_vec();
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud_of(points: Vec<Vec3>) -> LabeledPointCloud {
        LabeledPointCloud::from_points(points, Frame::RobotBase)
    }

    #[test]
    fn encoding_of_origin() {
        let enc = PositionalEncoding {
            num_frequencies: 1,
            include_raw_input: true,
        };
        assert_eq!(enc.encode(&[0.0; 3]), vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let enc = PositionalEncoding::default();
        assert_eq!(enc.encode(&[0.3, -0.7, 0.1]).len(), 3 + 6 * 6);
        let raw_free = PositionalEncoding {
            num_frequencies: 4,
            include_raw_input: false,
        };
        assert_eq!(raw_free.dim(), 24);
    }

    #[test]
    fn encoding_matches_scalar_terms() {
        let enc = PositionalEncoding::default();
        let x = [0.37, -0.81, 0.05];
        let e = enc.encode(&x);
        for k in 0..6 {
            for a in 0..3 {
                let f = 2f64.powi(k as i32) * PI;
                assert_eq!(e[3 + 6 * k + a], (f * x[a]).sin());
                assert_eq!(e[3 + 6 * k + 3 + a], (f * x[a]).cos());
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [LossKind::BinaryCrossEntropy, LossKind::CrossEntropy, LossKind::MeanSquared] {
            for seed in 0..3 {
                let err = gradient_check(5, 8, 3, kind, 20, seed);
                assert!(err < 1e-4, "{kind:?} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn heads_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::<f64>::random(4, 8, 3, &mut rng);
        let x = Array2::from_shape_simple_fn((50, 4), || rng.random_range(-50.0..50.0));
        let p = activate(
            &Head::Segmentation {
                class_ids: vec![0, 1, 2],
            },
            &net.logits(x.view()),
        );
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        let occ = Mlp::<f64>::random(4, 8, 1, &mut rng);
        let p = activate(&Head::Occupancy, &occ.logits(x.view()));
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0 || v == 1.0 || v == 0.0));
    }

    #[test]
    fn single_point_loss_decreases() {
        let cloud = cloud_of(vec![Vec3::new(0.1, 0.2, 0.3)]);
        let cfg = TrainConfig {
            epochs: 30,
            hidden: 16,
            negative_bounds: Some(([0.0; 3], [1.0; 3])),
            ..Default::default()
        };
        let model = train_occupancy(&cloud, &cfg).unwrap();
        assert!(model.final_loss().unwrap() < model.loss_history[0]);
        // Without an explicit box a single point has no extent.
        let bare = TrainConfig {
            negative_bounds: None,
            ..cfg
        };
        assert!(matches!(train_occupancy(&cloud, &bare), Err(FieldError::DegenerateBounds(_))));
    }

    #[test]
    fn precondition_errors() {
        let cfg = TrainConfig::default();
        assert_eq!(train_occupancy(&cloud_of(vec![]), &cfg).unwrap_err(), FieldError::EmptyCloud);
        let mut c = cloud_of(vec![Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0)]);
        c.segmentation = Some(vec![4, 4]);
        assert_eq!(train_segmentation(&c, &cfg).unwrap_err(), FieldError::SingleClass(1));
        c.colors = Some(vec![[0.5; 3], [0.2, 1.3, 0.0]]);
        assert!(matches!(train_color(&c, &cfg), Err(FieldError::InvalidColor { index: 1, .. })));
        let model_frame = LabeledPointCloud::from_points(vec![Vec3::zeros()], Frame::CameraModel);
        assert!(matches!(train_occupancy(&model_frame, &cfg), Err(FieldError::WrongFrame(_))));
        let outside = TrainConfig {
            negative_bounds: Some(([0.5; 3], [2.0; 3])),
            ..Default::default()
        };
        assert!(matches!(train_occupancy(&c, &outside), Err(FieldError::DegenerateBounds(_))));
    }

    #[test]
    fn empty_query_is_empty() {
        let cloud = cloud_of(vec![Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0)]);
        let cfg = TrainConfig {
            epochs: 1,
            hidden: 4,
            ..Default::default()
        };
        let model = train_occupancy(&cloud, &cfg).unwrap();
        assert!(model.query(&[]).is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let pts: Vec<Vec3> = (0..200)
            .map(|i| {
                let t = i as f64 / 200.0;
                Vec3::new(t, (7.0 * t).sin(), (3.0 * t).cos())
            })
            .collect();
        let cloud = cloud_of(pts);
        let cfg = TrainConfig {
            epochs: 5,
            hidden: 16,
            batch_size: 64,
            seed: 9,
            ..Default::default()
        };
        let a = train_occupancy(&cloud, &cfg).unwrap();
        let b = train_occupancy(&cloud, &cfg).unwrap();
        assert_eq!(a.network, b.network);
        assert_eq!(a.loss_history, b.loss_history);
    }
}
