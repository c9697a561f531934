//! Metric point clouds in the robot base frame.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::alignment::{AlignmentResult, CloudPoint};
use crate::calibration::CalibrationResult;
use crate::geometry::{Frame, Pose, Vec3};

/// Default confidence filter: this quantile of all per-pixel confidences.
pub const DEFAULT_CONFIDENCE_QUANTILE: f64 = 0.65;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconstructionError {
    #[error("no pose for view {0}")]
    MissingView(usize),
    #[error("calibration did not converge; pass force to use it anyway")]
    UncalibratedInput,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("cannot combine a {found} cloud with a {expected} cloud")]
    FrameMismatch { expected: Frame, found: Frame },
    #[error("point cloud is empty")]
    EmptyCloud,
}

/// A `width * height` image of per-pixel labels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelImage<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> LabelImage<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        LabelImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, w: usize, h: usize) -> &T {
        &self.data[h * self.width + w]
    }
}

/// Points with optional per-point labels and pixel provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPointCloud {
    /// `CameraModel` for aligned model-unit clouds, `RobotBase` once metric.
    pub frame: Frame,
    pub points: Vec<Vec3>,
    pub colors: Option<Vec<[f64; 3]>>,
    pub segmentation: Option<Vec<i32>>,
    pub views: Vec<usize>,
    pub pixels: Vec<(usize, usize)>,
    /// Size of the source images the pixels index into.
    pub image_size: (usize, usize),
}

impl LabeledPointCloud {
    /// Model-unit cloud from filtered alignment output.
    pub fn from_cloud_points(points: &[CloudPoint], image_size: (usize, usize)) -> Self {
        let colors = points
            .iter()
            .map(|p| p.color)
            .collect::<Option<Vec<_>>>()
            .filter(|c| !c.is_empty());
        LabeledPointCloud {
            frame: Frame::CameraModel,
            points: points.iter().map(|p| p.point).collect(),
            colors,
            segmentation: None,
            views: points.iter().map(|p| p.view).collect(),
            pixels: points.iter().map(|p| p.pixel).collect(),
            image_size,
        }
    }

    /// Metric cloud without provenance (e.g. sampled surfaces).
    pub fn from_points(points: Vec<Vec3>, frame: Frame) -> Self {
        let n = points.len();
        LabeledPointCloud {
            frame,
            points,
            colors: None,
            segmentation: None,
            views: vec![0; n],
            pixels: vec![(0, 0); n],
            image_size: (0, 0),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), ReconstructionError> {
        let n = self.points.len();
        let check = |name: &str, len: usize| {
            if len == n {
                Ok(())
            } else {
                Err(ReconstructionError::DimensionMismatch(format!(
                    "{name} has {len} entries for {n} points"
                )))
            }
        };
        check("views", self.views.len())?;
        check("pixels", self.pixels.len())?;
        if let Some(c) = &self.colors {
            check("colors", c.len())?;
        }
        if let Some(s) = &self.segmentation {
            check("segmentation", s.len())?;
        }
        Ok(())
    }

    /// Concatenates two clouds in the same frame. Labels survive only when
    /// both clouds carry them.
    pub fn merge(&self, other: &LabeledPointCloud) -> Result<LabeledPointCloud, ReconstructionError> {
        if self.frame != other.frame {
            return Err(ReconstructionError::FrameMismatch {
                expected: self.frame,
                found: other.frame,
            });
        }
        fn cat<T: Clone>(a: &Option<Vec<T>>, b: &Option<Vec<T>>) -> Option<Vec<T>> {
            match (a, b) {
                (Some(a), Some(b)) => Some(a.iter().chain(b).cloned().collect()),
                _ => None,
            }
        }
        Ok(LabeledPointCloud {
            frame: self.frame,
            points: self.points.iter().chain(&other.points).copied().collect(),
            colors: cat(&self.colors, &other.colors),
            segmentation: cat(&self.segmentation, &other.segmentation),
            views: self.views.iter().chain(&other.views).copied().collect(),
            pixels: self.pixels.iter().chain(&other.pixels).copied().collect(),
            image_size: self.image_size,
        })
    }

    /// Axis-aligned bounding box, `None` when empty.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
    }

    /// Keeps the points for which `keep(i)` holds.
    pub fn select(&self, keep: impl Fn(usize) -> bool) -> LabeledPointCloud {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        let pick = |v: &Option<Vec<_>>| v.as_ref().map(|v: &Vec<_>| idx.iter().map(|&i| v[i]).collect());
        LabeledPointCloud {
            frame: self.frame,
            points: idx.iter().map(|&i| self.points[i]).collect(),
            colors: self.colors.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
            segmentation: pick(&self.segmentation),
            views: idx.iter().map(|&i| self.views[i]).collect(),
            pixels: idx.iter().map(|&i| self.pixels[i]).collect(),
            image_size: self.image_size,
        }
    }
}

/// Maps aligned model-unit points into the metric base frame with
/// `x̄ = E_v⁻¹ X (λ P_v x)`, using each point's own view.
///
/// `camera` holds camera-from-world poses in model units and `end_effector`
/// end-effector-from-base poses, both indexed by view.
pub fn transform_to_base(
    cloud: &LabeledPointCloud,
    camera: &[Pose],
    end_effector: &[Pose],
    calib: &CalibrationResult,
    force: bool,
) -> Result<LabeledPointCloud, ReconstructionError> {
    if cloud.frame != Frame::CameraModel {
        return Err(ReconstructionError::FrameMismatch {
            expected: Frame::CameraModel,
            found: cloud.frame,
        });
    }
    cloud.validate()?;
    if !calib.converged && !force {
        return Err(ReconstructionError::UncalibratedInput);
    }
    let hand_eye = calib.hand_eye();
    let mut per_view: BTreeMap<usize, (Pose, Pose)> = BTreeMap::new();
    for &v in &cloud.views {
        if per_view.contains_key(&v) {
            continue;
        }
        let (p, e) = match (camera.get(v), end_effector.get(v)) {
            (Some(p), Some(e)) => (p, e),
            _ => return Err(ReconstructionError::MissingView(v)),
        };
        per_view.insert(v, (*p, e.inverse().compose(&hand_eye)));
    }
    let points = cloud
        .points
        .iter()
        .zip(&cloud.views)
        .map(|(x, v)| {
            let (p, base_from_cam) = &per_view[v];
            base_from_cam.transform_point(&(p.transform_point(x) * calib.scale))
        })
        .collect();
    Ok(LabeledPointCloud {
        frame: Frame::RobotBase,
        points,
        ..cloud.clone()
    })
}

fn lookup<T: Clone>(
    cloud: &LabeledPointCloud,
    images: &[LabelImage<T>],
    what: &str,
) -> Result<Vec<T>, ReconstructionError> {
    let (w, h) = cloud.image_size;
    for (v, img) in images.iter().enumerate() {
        if (img.width, img.height) != (w, h) || img.data.len() != w * h {
            return Err(ReconstructionError::DimensionMismatch(format!(
                "{what} image {v} is {}x{} ({} values), pointmaps are {w}x{h}",
                img.width,
                img.height,
                img.data.len()
            )));
        }
    }
    cloud
        .views
        .iter()
        .zip(&cloud.pixels)
        .map(|(&v, &(pw, ph))| {
            images
                .get(v)
                .map(|img| img.get(pw, ph).clone())
                .ok_or(ReconstructionError::MissingView(v))
        })
        .collect()
}

/// Attaches the label at each point's source pixel.
pub fn join_pixel_labels(
    cloud: &LabeledPointCloud,
    segmentation: Option<&[LabelImage<i32>]>,
    colors: Option<&[LabelImage<[f64; 3]>]>,
) -> Result<LabeledPointCloud, ReconstructionError> {
    cloud.validate()?;
    let mut out = cloud.clone();
    if let Some(images) = segmentation {
        out.segmentation = Some(lookup(cloud, images, "segmentation")?);
    }
    if let Some(images) = colors {
        out.colors = Some(lookup(cloud, images, "color")?);
    }
    Ok(out)
}

/// Linear-interpolated quantile, `q` in [0, 1]. `None` for empty input.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    Some(if i + 1 < v.len() {
        v[i] + (v[i + 1] - v[i]) * frac
    } else {
        v[i]
    })
}

/// Default confidence threshold over every per-pixel confidence.
pub fn default_confidence_threshold(result: &AlignmentResult) -> f64 {
    let all: Vec<f64> = result.confidences.iter().flatten().copied().collect();
    quantile(&all, DEFAULT_CONFIDENCE_QUANTILE).unwrap_or(0.0)
}

/// Height of each non-ground class above the local ground.
///
/// Heights are measured per source view and the median across views is
/// reported, so per-view pose errors shift top and ground together. Within a
/// view the top is the density peak nearest the highest points and the
/// ground is the median of ground points within `radius` (xy) of the object.
/// Views seeing fewer than `MIN_VIEW_POINTS` of either are skipped; if none
/// qualify the whole cloud is treated as one view.
pub fn object_heights(
    cloud: &LabeledPointCloud,
    ground_class: i32,
    radius: f64,
) -> Result<BTreeMap<i32, f64>, ReconstructionError> {
    const MIN_VIEW_POINTS: usize = 5;
    let seg = cloud
        .segmentation
        .as_ref()
        .ok_or_else(|| ReconstructionError::DimensionMismatch("cloud has no segmentation".into()))?;
    if !seg.contains(&ground_class) {
        return Err(ReconstructionError::EmptyCloud);
    }
    let classes: std::collections::BTreeSet<i32> =
        seg.iter().copied().filter(|&c| c != ground_class && c >= 0).collect();
    let views: std::collections::BTreeSet<usize> = cloud.views.iter().copied().collect();
    let gather = |class: i32, view: Option<usize>| -> Vec<Vec3> {
        cloud
            .points
            .iter()
            .zip(seg)
            .zip(&cloud.views)
            .filter(|((_, &c), &v)| c == class && view.map_or(true, |w| w == v))
            .map(|((p, _), _)| *p)
            .collect()
    };
    let local_height = |obj: &[Vec3], ground: &[Vec3]| -> Option<f64> {
        if obj.len() < MIN_VIEW_POINTS {
            return None;
        }
        let centroid = obj.iter().sum::<Vec3>() / obj.len() as f64;
        let near: Vec<f64> = ground
            .iter()
            .filter(|g| (g.xy() - centroid.xy()).norm() <= radius)
            .map(|g| g.z)
            .collect();
        if near.len() < MIN_VIEW_POINTS {
            return None;
        }
        let base = quantile(&near, 0.5)?;
        Some(top_level(&obj.iter().map(|p| p.z).collect::<Vec<_>>())? - base)
    };
    let mut out = BTreeMap::new();
    for class in classes {
        let per_view: Vec<f64> = views
            .iter()
            .filter_map(|&v| local_height(&gather(class, Some(v)), &gather(ground_class, Some(v))))
            .collect();
        let h = if per_view.is_empty() {
            let obj = gather(class, None);
            let ground = gather(ground_class, None);
            let centroid = obj.iter().sum::<Vec3>() / obj.len() as f64;
            let mut near: Vec<f64> = ground
                .iter()
                .filter(|g| (g.xy() - centroid.xy()).norm() <= radius)
                .map(|g| g.z)
                .collect();
            if near.is_empty() {
                near = ground.iter().map(|g| g.z).collect();
            }
            top_level(&obj.iter().map(|p| p.z).collect::<Vec<_>>()).zip(quantile(&near, 0.5)).map(|(t, b)| t - b)
        } else {
            quantile(&per_view, 0.5)
        };
        if let Some(h) = h {
            out.insert(class, h);
        }
    }
    Ok(out)
}

/// Mean-shift on heights from the 98th percentile with a window of 5% of
/// the spread: settles on the flat top rather than the upper noise tail.
fn top_level(zs: &[f64]) -> Option<f64> {
    let hi = quantile(zs, 0.98)?;
    let lo = quantile(zs, 0.02)?;
    let band = (0.05 * (hi - lo)).max(1e-6);
    let mut m = hi;
    for _ in 0..100 {
        let window: Vec<f64> = zs.iter().copied().filter(|z| (z - m).abs() <= band).collect();
        let next = window.iter().sum::<f64>() / window.len() as f64;
        if (next - m).abs() < 1e-12 {
            break;
        }
        m = next;
    }
    Some(m)
}
