//! On-disk formats: pose lists, JCRPM1 pairwise pointmaps, aligned
//! pointmaps, label images, binary PLY, field models and result records.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use ndarray::{Array1, Array2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{AlignConfig, AlignmentResult, PairGraph, PairwisePrediction};
use crate::calibration::{CalibrationConfig, CalibrationResult, PairResidual};
use crate::fields::{FieldModel, Head, Mlp, Normalization, PositionalEncoding, TrainConfig};
use crate::geometry::{Frame, Mat4, Pose, Vec3};
use crate::reconstruction::{LabelImage, LabeledPointCloud};
use crate::synth::{Dataset, GroundTruth, SceneSpec};

pub const POINTMAP_MAGIC: &[u8; 6] = b"JCRPM1";
pub const ALIGNED_MAGIC: &[u8; 6] = b"JCRAL1";
pub const LABEL_MAGIC: &[u8; 6] = b"JCRLB1";
const MODEL_FORMAT: &str = "jcr-field-1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// `{"frame": ..., "matrix": [16 numbers, row-major]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub frame: Frame,
    pub matrix: [f64; 16],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        let m = p.to_homogeneous();
        PoseRecord {
            frame: p.frame,
            matrix: std::array::from_fn(|i| m[(i / 4, i % 4)]),
        }
    }
}

impl PoseRecord {
    pub fn to_pose(&self) -> Result<Pose, String> {
        let m = Mat4::from_row_slice(&self.matrix);
        Pose::from_homogeneous(&m, self.frame).map_err(|e| e.to_string())
    }
}

fn to_records(poses: &[Pose]) -> Vec<PoseRecord> {
    poses.iter().map(PoseRecord::from).collect()
}

fn from_records(path: &Path, records: &[PoseRecord]) -> Result<Vec<Pose>, IoError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| r.to_pose().map_err(|e| format_err(path, format!("pose {i}: {e}"))))
        .collect()
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<(), IoError> {
    write_json(path, &to_records(poses))
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>, IoError> {
    let records: Vec<PoseRecord> = read_json(path)?;
    from_records(path, &records)
}

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u32).to_le_bytes())
}

fn put_f32s(w: &mut impl Write, values: impl Iterator<Item = f64>) -> std::io::Result<()> {
    for v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(self.path, "unexpected end of file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, magic: &[u8; 6]) -> Result<(), IoError> {
        if self.take(6)? != magic {
            return Err(format_err(
                self.path,
                format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
            ));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<usize, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, IoError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| format_err(self.path, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn i32s(&mut self, n: usize) -> Result<Vec<i32>, IoError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| format_err(self.path, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<(), IoError> {
        if self.pos != self.bytes.len() {
            return Err(format_err(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

fn vec3s(flat: Vec<f64>) -> Vec<Vec3> {
    flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

/// JCRPM1: magic, u32 W, H, n, m, then f32 pointmap_self, pointmap_other,
/// confidence_self, confidence_other, all row-major and little-endian.
pub fn write_pointmap(path: &Path, p: &PairwisePrediction) -> Result<(), IoError> {
    let mut w = create(path)?;
    (|| {
        w.write_all(POINTMAP_MAGIC)?;
        for v in [p.width, p.height, p.first, p.second] {
            put_u32(&mut w, v)?;
        }
        put_f32s(&mut w, p.pointmap_self.iter().flat_map(|v| [v.x, v.y, v.z]))?;
        put_f32s(&mut w, p.pointmap_other.iter().flat_map(|v| [v.x, v.y, v.z]))?;
        put_f32s(&mut w, p.confidence_self.iter().copied())?;
        put_f32s(&mut w, p.confidence_other.iter().copied())?;
        w.flush()
    })()
    .map_err(io_err(path))
}

pub fn read_pointmap(path: &Path) -> Result<PairwisePrediction, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    r.magic(POINTMAP_MAGIC)?;
    let (width, height, first, second) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let n = width * height;
    let pred = PairwisePrediction {
        first,
        second,
        width,
        height,
        pointmap_self: vec3s(r.f32s(3 * n)?),
        pointmap_other: vec3s(r.f32s(3 * n)?),
        confidence_self: r.f32s(n)?,
        confidence_other: r.f32s(n)?,
    };
    r.finish()?;
    Ok(pred)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub first: usize,
    pub second: usize,
    /// Relative to the sidecar's directory.
    pub file: String,
}

/// Sidecar listing the JCRPM1 files of one image set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairsManifest {
    pub num_views: usize,
    pub width: usize,
    pub height: usize,
    pub pairs: Vec<PairEntry>,
}

/// Writes one JCRPM1 file per prediction under `dir/pairs/` and the
/// sidecar at `dir/pairs.json`; returns the sidecar path.
pub fn write_pairs(dir: &Path, num_views: usize, preds: &[PairwisePrediction]) -> Result<PathBuf, IoError> {
    let mut entries = Vec::with_capacity(preds.len());
    for p in preds {
        let file = format!("pairs/pair_{:03}_{:03}.jcrpm", p.first, p.second);
        write_pointmap(&dir.join(&file), p)?;
        entries.push(PairEntry {
            first: p.first,
            second: p.second,
            file,
        });
    }
    let (width, height) = preds.first().map_or((0, 0), |p| (p.width, p.height));
    let sidecar = dir.join("pairs.json");
    write_json(
        &sidecar,
        &PairsManifest {
            num_views,
            width,
            height,
            pairs: entries,
        },
    )?;
    Ok(sidecar)
}

/// Loads every listed pair; the graph's edges follow the sidecar order.
pub fn read_pairs(sidecar: &Path) -> Result<(Vec<PairwisePrediction>, PairGraph), IoError> {
    let manifest: PairsManifest = read_json(sidecar)?;
    let dir = sidecar.parent().unwrap_or(Path::new("."));
    let mut preds = Vec::with_capacity(manifest.pairs.len());
    for e in &manifest.pairs {
        let path = dir.join(&e.file);
        let p = read_pointmap(&path)?;
        if (p.first, p.second) != (e.first, e.second) {
            return Err(format_err(
                &path,
                format!("header pair ({}, {}) != listed ({}, {})", p.first, p.second, e.first, e.second),
            ));
        }
        if (p.width, p.height) != (manifest.width, manifest.height) {
            return Err(format_err(&path, "image size differs from pairs.json"));
        }
        preds.push(p);
    }
    let graph = PairGraph::new(manifest.num_views, manifest.pairs.iter().map(|e| (e.first, e.second)).collect())
        .map_err(|e| format_err(sidecar, e.to_string()))?;
    Ok((preds, graph))
}

/// Alignment output minus the per-pixel arrays, which go to `aligned.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub width: usize,
    pub height: usize,
    /// Camera from world, model units.
    pub camera_poses: Vec<PoseRecord>,
    pub pair_scales: Vec<f64>,
    pub graph: PairGraph,
    pub gauge_pair: usize,
    pub objective: f64,
    pub history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub residual_terms: usize,
    pub config: AlignConfig,
    pub seed: u64,
}

/// `dir/alignment.json` plus `dir/aligned.bin` (JCRAL1: magic, u32 W, H, N,
/// then per view f32 points W×H×3 and confidences W×H).
pub fn write_alignment(dir: &Path, r: &AlignmentResult, config: &AlignConfig, seed: u64) -> Result<(), IoError> {
    let record = AlignmentRecord {
        width: r.width,
        height: r.height,
        camera_poses: to_records(&r.camera_poses()),
        pair_scales: r.pair_scales.clone(),
        graph: r.graph.clone(),
        gauge_pair: r.gauge_pair,
        objective: r.objective,
        history: r.history.clone(),
        iterations: r.iterations,
        converged: r.converged,
        residual_terms: r.residual_terms,
        config: *config,
        seed,
    };
    write_json(&dir.join("alignment.json"), &record)?;
    let path = dir.join("aligned.bin");
    let mut w = create(&path)?;
    (|| {
        w.write_all(ALIGNED_MAGIC)?;
        for v in [r.width, r.height, r.num_views()] {
            put_u32(&mut w, v)?;
        }
        for (pts, conf) in r.pointmaps.iter().zip(&r.confidences) {
            put_f32s(&mut w, pts.iter().flat_map(|v| [v.x, v.y, v.z]))?;
            put_f32s(&mut w, conf.iter().copied())?;
        }
        w.flush()
    })()
    .map_err(io_err(&path))
}

pub fn read_alignment(dir: &Path) -> Result<(AlignmentResult, AlignmentRecord), IoError> {
    let json = dir.join("alignment.json");
    let record: AlignmentRecord = read_json(&json)?;
    let camera = from_records(&json, &record.camera_poses)?;
    let path = dir.join("aligned.bin");
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: &path,
    };
    r.magic(ALIGNED_MAGIC)?;
    let (w, h, n) = (r.u32()?, r.u32()?, r.u32()?);
    if (w, h, n) != (record.width, record.height, camera.len()) {
        return Err(format_err(&path, "header disagrees with alignment.json"));
    }
    let mut pointmaps = Vec::with_capacity(n);
    let mut confidences = Vec::with_capacity(n);
    for _ in 0..n {
        pointmaps.push(vec3s(r.f32s(3 * w * h)?));
        confidences.push(r.f32s(w * h)?);
    }
    r.finish()?;
    let result = AlignmentResult {
        width: w,
        height: h,
        world_from_camera: camera.iter().map(|p| p.inverse().with_frame(Frame::CameraModel)).collect(),
        pair_scales: record.pair_scales.clone(),
        graph: record.graph.clone(),
        gauge_pair: record.gauge_pair,
        pointmaps,
        confidences,
        objective: record.objective,
        history: record.history.clone(),
        iterations: record.iterations,
        converged: record.converged,
        residual_terms: record.residual_terms,
    };
    Ok((result, record))
}

/// JCRLB1 segmentation image: magic, u32 W, H, kind 0, then i32 labels.
pub fn write_segmentation_image(path: &Path, img: &LabelImage<i32>) -> Result<(), IoError> {
    let mut w = create(path)?;
    (|| {
        w.write_all(LABEL_MAGIC)?;
        for v in [img.width, img.height, 0] {
            put_u32(&mut w, v)?;
        }
        for v in &img.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    })()
    .map_err(io_err(path))
}

/// JCRLB1 color image: magic, u32 W, H, kind 1, then f32 RGB triples.
pub fn write_color_image(path: &Path, img: &LabelImage<[f64; 3]>) -> Result<(), IoError> {
    let mut w = create(path)?;
    (|| {
        w.write_all(LABEL_MAGIC)?;
        for v in [img.width, img.height, 1] {
            put_u32(&mut w, v)?;
        }
        put_f32s(&mut w, img.data.iter().flatten().copied())?;
        w.flush()
    })()
    .map_err(io_err(path))
}

fn read_label_header<'a>(path: &'a Path, bytes: &'a [u8], kind: usize) -> Result<(Reader<'a>, usize, usize), IoError> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(LABEL_MAGIC)?;
    let (w, h, k) = (r.u32()?, r.u32()?, r.u32()?);
    if k != kind {
        return Err(format_err(path, format!("label kind {k}, expected {kind}")));
    }
    Ok((r, w, h))
}

pub fn read_segmentation_image(path: &Path) -> Result<LabelImage<i32>, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (mut r, width, height) = read_label_header(path, &bytes, 0)?;
    let data = r.i32s(width * height)?;
    r.finish()?;
    Ok(LabelImage { width, height, data })
}

pub fn read_color_image(path: &Path) -> Result<LabelImage<[f64; 3]>, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (mut r, width, height) = read_label_header(path, &bytes, 1)?;
    let data = r.f32s(3 * width * height)?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    r.finish()?;
    Ok(LabelImage { width, height, data })
}

/// Binary little-endian PLY: float x, y, z; uchar red, green, blue; int
/// label when the cloud has segmentation. Missing colors are written gray.
pub fn write_ply(path: &Path, cloud: &LabeledPointCloud) -> Result<(), IoError> {
    let mut w = create(path)?;
    let labels = cloud.segmentation.as_ref();
    (|| {
        write!(
            w,
            "ply\nformat binary_little_endian 1.0\ncomment frame {}\nelement vertex {}\n\
             property float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\n",
            cloud.frame,
            cloud.len()
        )?;
        if labels.is_some() {
            writeln!(w, "property int label")?;
        }
        writeln!(w, "end_header")?;
        for i in 0..cloud.len() {
            let p = cloud.points[i];
            put_f32s(&mut w, [p.x, p.y, p.z].into_iter())?;
            let c = cloud.colors.as_ref().map_or([0.5; 3], |c| c[i]);
            w.write_all(&c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))?;
            if let Some(l) = labels {
                w.write_all(&l[i].to_le_bytes())?;
            }
        }
        w.flush()
    })()
    .map_err(io_err(path))
}

/// Reads PLY files written by [`write_ply`]. Provenance is not stored, so
/// views and pixels come back zeroed.
pub fn read_ply(path: &Path) -> Result<LabeledPointCloud, IoError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(f);
    let mut count = None;
    let mut props = Vec::new();
    let mut frame = Frame::RobotBase;
    let mut first = true;
    loop {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(io_err(path))? == 0 {
            return Err(format_err(path, "missing end_header"));
        }
        let line = line.trim_end();
        if first {
            if line != "ply" {
                return Err(format_err(path, "not a PLY file"));
            }
            first = false;
            continue;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => return Err(format_err(path, format!("unsupported format {other}"))),
            ["comment", "frame", f] => {
                frame = serde_json::from_value(serde_json::Value::String(f.to_string()))
                    .map_err(|_| format_err(path, format!("unknown frame {f}")))?;
            }
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| format_err(path, "bad vertex count"))?);
            }
            ["property", ty, name] => props.push((ty.to_string(), name.to_string())),
            ["end_header"] => break,
            _ => return Err(format_err(path, format!("unexpected header line '{line}'"))),
        }
    }
    let n = count.ok_or_else(|| format_err(path, "no vertex element"))?;
    let expected = ["x", "y", "z", "red", "green", "blue"];
    let names: Vec<&str> = props.iter().map(|p| p.1.as_str()).collect();
    let has_label = match names.as_slice() {
        [a @ .., "label"] if a == expected => true,
        a if a == expected => false,
        _ => return Err(format_err(path, format!("unsupported properties {names:?}"))),
    };
    let stride = 15 + if has_label { 4 } else { 0 };
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(io_err(path))?;
    if body.len() != n * stride {
        return Err(format_err(path, format!("expected {} body bytes, found {}", n * stride, body.len())));
    }
    let mut points = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for rec in body.chunks_exact(stride) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().expect("4 bytes")) as f64;
        points.push(Vec3::new(f(0), f(1), f(2)));
        colors.push([rec[12], rec[13], rec[14]].map(|c| c as f64 / 255.0));
        if has_label {
            labels.push(i32::from_le_bytes(rec[15..19].try_into().expect("4 bytes")));
        }
    }
    let mut cloud = LabeledPointCloud::from_points(points, frame);
    cloud.colors = Some(colors);
    cloud.segmentation = has_label.then_some(labels);
    Ok(cloud)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Blob {
    shape: Vec<usize>,
    /// Base64 of little-endian f32 values.
    data: String,
}

fn blob(shape: &[usize], values: &[f32]) -> Blob {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    Blob {
        shape: shape.to_vec(),
        data: BASE64.encode(bytes),
    }
}

fn unblob(path: &Path, b: &Blob) -> Result<Vec<f32>, IoError> {
    let bytes = BASE64
        .decode(&b.data)
        .map_err(|e| format_err(path, format!("weights: {e}")))?;
    let expected: usize = b.shape.iter().product();
    if bytes.len() != 4 * expected {
        return Err(format_err(path, format!("weight blob has {} bytes for shape {:?}", bytes.len(), b.shape)));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    encoding: PositionalEncoding,
    normalization: Normalization,
    head: Head,
    layers: Vec<usize>,
    config: TrainConfig,
    loss_history: Vec<f64>,
    w1: Blob,
    b1: Blob,
    w2: Blob,
    b2: Blob,
}

/// JSON header with base64 float32 weights.
pub fn write_model(path: &Path, m: &FieldModel) -> Result<(), IoError> {
    let n = &m.network;
    let std_vec = |a: &ndarray::ArrayView2<f32>| a.as_standard_layout().iter().copied().collect::<Vec<_>>();
    write_json(
        path,
        &ModelFile {
            format: MODEL_FORMAT.into(),
            encoding: m.encoding,
            normalization: m.normalization,
            head: m.head.clone(),
            layers: vec![n.inputs(), n.hidden(), n.outputs()],
            config: m.config.clone(),
            loss_history: m.loss_history.clone(),
            w1: blob(n.w1.shape(), &std_vec(&n.w1.view())),
            b1: blob(n.b1.shape(), &n.b1.to_vec()),
            w2: blob(n.w2.shape(), &std_vec(&n.w2.view())),
            b2: blob(n.b2.shape(), &n.b2.to_vec()),
        },
    )
}

pub fn read_model(path: &Path) -> Result<FieldModel, IoError> {
    let f: ModelFile = read_json(path)?;
    if f.format != MODEL_FORMAT {
        return Err(format_err(path, format!("unknown model format '{}'", f.format)));
    }
    let [inputs, hidden, outputs] = f.layers[..] else {
        return Err(format_err(path, "expected three layer sizes"));
    };
    if inputs != f.encoding.dim() || outputs != f.head.outputs() {
        return Err(format_err(path, "layer sizes disagree with encoding or head"));
    }
    let shape_err = |_| format_err(path, "weight shape mismatch");
    let matrix = |b: &Blob, r: usize, c: usize| -> Result<Array2<f32>, IoError> {
        if b.shape != [r, c] {
            return Err(format_err(path, format!("blob shape {:?}, expected [{r}, {c}]", b.shape)));
        }
        Array2::from_shape_vec((r, c), unblob(path, b)?).map_err(shape_err)
    };
    let vector = |b: &Blob, n: usize| -> Result<Array1<f32>, IoError> {
        if b.shape != [n] {
            return Err(format_err(path, format!("blob shape {:?}, expected [{n}]", b.shape)));
        }
        Ok(Array1::from(unblob(path, b)?))
    };
    Ok(FieldModel {
        encoding: f.encoding,
        normalization: Normalization::new(f.normalization.min, f.normalization.max)
            .map_err(|e| format_err(path, e.to_string()))?,
        head: f.head,
        network: Mlp {
            w1: matrix(&f.w1, inputs, hidden)?,
            b1: vector(&f.b1, hidden)?,
            w2: matrix(&f.w2, hidden, outputs)?,
            b2: vector(&f.b2, outputs)?,
        },
        loss_history: f.loss_history,
        config: f.config,
    })
}

/// Serialized calibration with the config and seed that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    /// End-effector from camera, metric.
    pub hand_eye: PoseRecord,
    pub scale: f64,
    pub converged: bool,
    pub num_pairs: usize,
    pub residuals: Vec<PairResidual>,
    pub mean_translation_residual: f64,
    pub mean_rotation_residual: f64,
    pub max_translation_residual: f64,
    pub max_rotation_residual: f64,
    pub config: CalibrationConfig,
    pub seed: u64,
}

impl CalibrationRecord {
    pub fn new(r: &CalibrationResult, config: &CalibrationConfig, seed: u64) -> Self {
        CalibrationRecord {
            hand_eye: PoseRecord::from(&r.hand_eye()),
            scale: r.scale,
            converged: r.converged,
            num_pairs: r.num_pairs,
            residuals: r.residuals.clone(),
            mean_translation_residual: r.mean_translation_residual(),
            mean_rotation_residual: r.mean_rotation_residual(),
            max_translation_residual: r.max_translation_residual(),
            max_rotation_residual: r.max_rotation_residual(),
            config: *config,
            seed,
        }
    }

    pub fn to_result(&self) -> Result<CalibrationResult, String> {
        let x = self.hand_eye.to_pose()?;
        Ok(CalibrationResult {
            rotation: x.rotation,
            translation: x.translation,
            scale: self.scale,
            residuals: self.residuals.clone(),
            converged: self.converged,
            num_pairs: self.num_pairs,
        })
    }
}

pub fn write_calibration(path: &Path, r: &CalibrationResult, config: &CalibrationConfig, seed: u64) -> Result<(), IoError> {
    write_json(path, &CalibrationRecord::new(r, config, seed))
}

pub fn read_calibration(path: &Path) -> Result<(CalibrationResult, CalibrationRecord), IoError> {
    let record: CalibrationRecord = read_json(path)?;
    let result = record.to_result().map_err(|e| format_err(path, e))?;
    Ok((result, record))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectHeight {
    pub class_id: i32,
    pub name: String,
    pub height: f64,
}

/// Hidden parameters of a synthetic dataset, for evaluation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub hand_eye: PoseRecord,
    pub scale: f64,
    pub camera_metric: Vec<PoseRecord>,
    pub end_effector: Vec<PoseRecord>,
    pub pair_scales: Vec<f64>,
    /// Class of the supporting plane, if any.
    pub ground_class: Option<i32>,
    pub objects: Vec<ObjectHeight>,
    pub scene: SceneSpec,
    pub seed: u64,
}

impl GroundTruthRecord {
    pub fn new(t: &GroundTruth, seed: u64) -> Self {
        let ground_class = t
            .scene
            .primitives
            .iter()
            .find(|p| p.height().is_none())
            .map(|p| p.class_id);
        GroundTruthRecord {
            hand_eye: PoseRecord::from(&t.hand_eye),
            scale: t.scale,
            camera_metric: to_records(&t.camera_metric),
            end_effector: to_records(&t.end_effector),
            pair_scales: t.pair_scales.clone(),
            ground_class,
            objects: t
                .scene
                .primitives
                .iter()
                .filter_map(|p| {
                    p.height().map(|height| ObjectHeight {
                        class_id: p.class_id,
                        name: p.name.clone(),
                        height,
                    })
                })
                .collect(),
            scene: t.scene.clone(),
            seed,
        }
    }

    pub fn hand_eye_pose(&self) -> Result<Pose, String> {
        self.hand_eye.to_pose()
    }
}

/// Files written for a synthetic dataset, relative to its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub end_effector: String,
    pub pairs: String,
    pub segmentation: Vec<String>,
    pub colors: Vec<String>,
    pub ground_truth: String,
}

/// Writes end-effector poses, pointmaps, label images and ground truth.
pub fn write_dataset(dir: &Path, ds: &Dataset, seed: u64) -> Result<DatasetFiles, IoError> {
    let files = DatasetFiles {
        end_effector: "end_effector.json".into(),
        pairs: "pairs.json".into(),
        segmentation: (0..ds.labels.len()).map(|v| format!("labels/seg_{v:03}.jcrlb")).collect(),
        colors: (0..ds.colors.len()).map(|v| format!("labels/rgb_{v:03}.jcrlb")).collect(),
        ground_truth: "ground_truth.json".into(),
    };
    write_poses(&dir.join(&files.end_effector), &ds.end_effector)?;
    write_pairs(dir, ds.graph.num_views, &ds.predictions)?;
    for (labels, file) in ds.labels.iter().zip(&files.segmentation) {
        let img = LabelImage {
            width: ds.width,
            height: ds.height,
            data: labels.clone(),
        };
        write_segmentation_image(&dir.join(file), &img)?;
    }
    for (colors, file) in ds.colors.iter().zip(&files.colors) {
        let img = LabelImage {
            width: ds.width,
            height: ds.height,
            data: colors.clone(),
        };
        write_color_image(&dir.join(file), &img)?;
    }
    write_json(&dir.join(&files.ground_truth), &GroundTruthRecord::new(&ds.truth, seed))?;
    Ok(files)
}
