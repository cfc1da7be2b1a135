//! On-disk formats: model containers, scene bundles, float grids, PNGs,
//! parameter streams, loss traces and run configuration.
//!
//! Model container:
//!
//! ```text
//! manifest.json      units, uv_resolution, blur_sigma, threshold, parse_classes
//! s0.obj             neutral mesh with UVs
//! bs/SS_01.obj ...   blendshapes
//! r0.png             albedo, 16-bit RGB
//! parse_T.png        8-bit class indices
//! validity.png       16-bit gray
//! landmarks.json     68 vertex indices
//! corrections/*.grid optional; absent means zero corrections
//! ```
//!
//! Scene bundle:
//!
//! ```text
//! camera.toml
//! frames/0000.png     16-bit RGB
//! landmarks/0000.json 68 × [u, v, valid]
//! parse/0000.png      8-bit class indices
//! parse/0000.grid     optional soft labels, preferred over the PNG
//! gt_params.jsonl     optional ground truth
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{FitConfig, FrameObservation, TrackingParams};
use crate::grid::{Grid, Image, UvMap};
use crate::losses::{Landmark, LossBreakdown, LossWeights};
use crate::mesh::load_obj;
use crate::model::{AttentionMaskSet, ModelCorrections, ModelManifest, TemplateFaceModel};
use crate::shading::Camera;

const GRID_MAGIC: &[u8; 4] = b"FGRD";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_string(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes a float grid: `FGRD`, then width, height, channels as little-endian
/// `u32`, then the samples as little-endian `f32` in row-major, channel-last order.
pub fn write_grid(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = GRID_MAGIC.to_vec();
    for d in [grid.width(), grid.height(), grid.channels()] {
        let d = u32::try_from(d)
            .map_err(|_| Error::Invalid(format!("grid dimension {d} exceeds u32")))?;
        header.extend_from_slice(&d.to_le_bytes());
    }
    let body: Vec<u8> = grid
        .data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    w.write_all(&header)
        .and_then(|_| w.write_all(&body))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg,
    };
    if bytes.len() < 16 || &bytes[..4] != GRID_MAGIC {
        return Err(bad("not a float grid (missing FGRD header)".into()));
    }
    let dim =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, c) = (dim(0), dim(1), dim(2));
    let body = &bytes[16..];
    if body.len() != 4 * w * h * c {
        return Err(bad(format!(
            "{w}x{h}x{c} grid needs {} data bytes, found {}",
            4 * w * h * c,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    Grid::from_data(w, h, c, data)
}

/// Writes a 1- or 3-channel image in `[0, 1]` as a 16-bit PNG. Values are clamped.
pub fn write_png16(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let data: Vec<u16> = img.data().iter().map(|&v| to_u16(v)).collect();
    match img.channels() {
        1 => ImageBuffer::<Luma<u16>, _>::from_raw(w, h, data).map(|b| b.save(path)),
        3 => ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, data).map(|b| b.save(path)),
        c => {
            return Err(Error::Dimension(format!(
                "PNG output needs 1 or 3 channels, got {c}"
            )))
        }
    }
    .expect("buffer length matches dimensions")?;
    Ok(())
}

/// Reads an 8- or 16-bit PNG as `channels` (1 or 3) values in `[0, 1]`.
pub fn read_png(path: impl AsRef<Path>, channels: usize) -> Result<Image> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(e) => Error::io(path, e),
        e => Error::Image(e),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match channels {
        1 => img.into_luma16().into_raw(),
        3 => img.into_rgb16().into_raw(),
        c => {
            return Err(Error::Dimension(format!(
                "PNG input needs 1 or 3 channels, got {c}"
            )))
        }
    }
    .into_iter()
    .map(|v| f64::from(v) / 65535.0)
    .collect();
    Grid::from_data(w, h, channels, data)
}

/// Writes the arg-max class of each pixel as an 8-bit index image.
pub fn write_labels(path: impl AsRef<Path>, labels: &Image) -> Result<()> {
    let path = path.as_ref();
    if labels.channels() > 256 {
        return Err(Error::Dimension(format!(
            "{} classes do not fit an 8-bit index",
            labels.channels()
        )));
    }
    let data: Vec<u8> = labels
        .data()
        .chunks_exact(labels.channels())
        .map(|px| (0..px.len()).fold(0, |b, c| if px[c] > px[b] { c } else { b }) as u8)
        .collect();
    ImageBuffer::<Luma<u8>, _>::from_raw(labels.width() as u32, labels.height() as u32, data)
        .expect("buffer length matches dimensions")
        .save(path)?;
    Ok(())
}

/// Reads an index image into one-hot labels with `classes` channels.
pub fn read_labels(path: impl AsRef<Path>, classes: usize) -> Result<Image> {
    let path = path.as_ref();
    let idx = image::open(path)?.into_luma8();
    let (w, h) = (idx.width() as usize, idx.height() as usize);
    let mut out = Image::zeros(w, h, classes);
    for (p, &l) in idx.as_raw().iter().enumerate() {
        let l = usize::from(l);
        if l >= classes {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 0,
                msg: format!(
                    "label {l} at pixel ({}, {}) but only {classes} classes",
                    p % w,
                    p / w
                ),
            });
        }
        out.set(p % w, p / w, l, 1.0);
    }
    Ok(out)
}

fn label_count(path: &Path) -> Result<usize> {
    let idx = image::open(path)?.into_luma8();
    Ok(idx
        .as_raw()
        .iter()
        .copied()
        .max()
        .map_or(1, |m| usize::from(m) + 1))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    write_string(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// One JSON object per line.
pub fn write_params(path: impl AsRef<Path>, params: &[TrackingParams]) -> Result<()> {
    let mut text = String::new();
    for p in params {
        text += &serde_json::to_string(p)?;
        text.push('\n');
    }
    write_string(path.as_ref(), &text)
}

pub fn read_params(path: impl AsRef<Path>) -> Result<Vec<TrackingParams>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct TraceRow {
    step: usize,
    total: f64,
    photometric: f64,
    landmark: f64,
    parsing: f64,
    smoothness: f64,
    blendshape_gradient: f64,
    regularization: f64,
    photometric_color: f64,
    image_gradient: f64,
}

/// Unweighted terms and the weighted total, one row per step.
pub fn write_trace(path: impl AsRef<Path>, trace: &[LossBreakdown]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for (step, b) in trace.iter().enumerate() {
        w.serialize(TraceRow {
            step,
            total: b.total,
            photometric: b.terms.photometric,
            landmark: b.terms.landmark,
            parsing: b.terms.parsing,
            smoothness: b.terms.smoothness,
            blendshape_gradient: b.terms.blendshape_gradient,
            regularization: b.terms.regularization,
            photometric_color: b.detail.photometric_color,
            image_gradient: b.detail.image_gradient,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_camera(path: impl AsRef<Path>, camera: &Camera) -> Result<()> {
    let text = toml::to_string(camera).map_err(|e| Error::Config(e.to_string()))?;
    write_string(path.as_ref(), &text)
}

pub fn read_camera(path: impl AsRef<Path>) -> Result<Camera> {
    let path = path.as_ref();
    let cam: Camera = toml::from_str(&read_to_string(path)?)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cam.validate()?;
    Ok(cam)
}

/// Contents of a `--config` file. Every section is optional.
///
/// ```toml
/// [camera]
/// focal = 470.4
/// cx = 112.0
/// cy = 112.0
/// width = 224
/// height = 224
/// near = 10.0
/// far = 10000.0
///
/// [weights]
/// lambda_pa = 50.0
///
/// [fit]
/// stage1_steps = 800
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub camera: Option<Camera>,
    pub weights: LossWeights,
    pub fit: FitConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(c) = &cfg.camera {
            c.validate()?;
        }
        cfg.fit_config().validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&read_to_string(path)?).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    /// The fit schedule with the `[weights]` section applied.
    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            weights: self.weights,
            ..self.fit.clone()
        }
    }
}

fn blendshape_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("bs").join(format!("SS_{:02}.obj", i + 1))
}

/// Writes the template files of a model container.
pub fn save_template(dir: impl AsRef<Path>, template: &TemplateFaceModel) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(&dir.join("bs"))?;
    write_json(dir.join("manifest.json"), &template.manifest)?;
    template.s0.save_obj(dir.join("s0.obj"))?;
    for (i, b) in template.blendshapes.iter().enumerate() {
        template
            .s0
            .with_vertices(b.clone())
            .save_obj(blendshape_path(dir, i))?;
    }
    write_png16(dir.join("r0.png"), &template.r0)?;
    if let Some(p) = &template.parse_map {
        write_labels(dir.join("parse_T.png"), p)?;
    }
    write_png16(dir.join("validity.png"), &template.validity)?;
    write_json(dir.join("landmarks.json"), &template.landmark_indices()?)
}

pub fn load_template(dir: impl AsRef<Path>) -> Result<TemplateFaceModel> {
    let dir = dir.as_ref();
    let manifest: ModelManifest = read_json(dir.join("manifest.json"))?;
    let mut s0 = load_obj(dir.join("s0.obj"))?;
    let landmarks: Vec<usize> = read_json(dir.join("landmarks.json"))?;
    if let Some(&i) = landmarks.iter().find(|&&i| i >= s0.num_vertices()) {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: s0.num_vertices(),
        });
    }
    s0.landmark_indices = Some(landmarks);
    let mut blendshapes = Vec::new();
    while blendshape_path(dir, blendshapes.len()).exists() {
        let path = blendshape_path(dir, blendshapes.len());
        let mesh = load_obj(&path)?;
        if !mesh.same_topology(&s0) {
            return Err(Error::Dimension(format!(
                "{} does not share the topology of s0.obj",
                path.display()
            )));
        }
        blendshapes.push(mesh.vertices);
    }
    let r0 = read_png(dir.join("r0.png"), 3)?;
    let parse_path = dir.join("parse_T.png");
    let parse_map = if parse_path.exists() {
        let classes = match manifest.parse_classes.len() {
            0 => label_count(&parse_path)?.max(2),
            n => n,
        };
        Some(read_labels(&parse_path, classes)?)
    } else {
        None
    };
    let validity = read_png(dir.join("validity.png"), 1)?;
    TemplateFaceModel::new(s0, blendshapes, r0, parse_map, validity, manifest)
}

fn correction_paths(dir: &Path, k: usize) -> Vec<PathBuf> {
    let dir = dir.join("corrections");
    let mut paths = vec![dir.join("d_shape_00.grid")];
    paths.extend((1..=k).map(|i| dir.join(format!("d_shape_{i:02}.grid"))));
    paths.push(dir.join("d_albedo_00.grid"));
    paths.extend((1..=k).map(|i| dir.join(format!("d_albedo_{i:02}.grid"))));
    paths.push(dir.join("r0_trainable.grid"));
    paths
}

/// Writes the corrections of a model container as 32-bit float grids.
pub fn save_corrections(dir: impl AsRef<Path>, corrections: &ModelCorrections) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(&dir.join("corrections"))?;
    for (path, map) in correction_paths(dir, corrections.num_blendshapes())
        .iter()
        .zip(corrections.maps())
    {
        write_grid(path, map)?;
    }
    Ok(())
}

/// Reads the container's corrections, or zeros when it has none.
pub fn load_corrections(
    dir: impl AsRef<Path>,
    template: &TemplateFaceModel,
) -> Result<ModelCorrections> {
    let dir = dir.as_ref();
    let mut c = ModelCorrections::zeros(template);
    if !dir.join("corrections").exists() {
        return Ok(c);
    }
    let paths = correction_paths(dir, template.num_blendshapes());
    for (path, map) in paths.iter().zip(c.maps_mut()) {
        let g = read_grid(path)?;
        g.check_shape(map, &path.display().to_string())?;
        *map = g;
    }
    Ok(c)
}

pub fn save_model(
    dir: impl AsRef<Path>,
    template: &TemplateFaceModel,
    corrections: &ModelCorrections,
) -> Result<()> {
    save_template(&dir, template)?;
    save_corrections(&dir, corrections)
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<(TemplateFaceModel, ModelCorrections)> {
    let template = load_template(&dir)?;
    let corrections = load_corrections(&dir, &template)?;
    Ok((template, corrections))
}

/// Writes `masks/mask_NN.png` and `masks/mask_NN.grid` for every blendshape.
pub fn save_masks(dir: impl AsRef<Path>, masks: &AttentionMaskSet) -> Result<()> {
    let dir = dir.as_ref().join("masks");
    create_dir(&dir)?;
    for (i, m) in masks.masks.iter().enumerate() {
        write_png16(dir.join(format!("mask_{:02}.png", i + 1)), m)?;
        write_grid(dir.join(format!("mask_{:02}.grid", i + 1)), m)?;
    }
    Ok(())
}

pub fn load_masks(dir: impl AsRef<Path>, count: usize) -> Result<AttentionMaskSet> {
    let dir = dir.as_ref().join("masks");
    let masks = (1..=count)
        .map(|i| read_grid(dir.join(format!("mask_{i:02}.grid"))))
        .collect::<Result<Vec<UvMap>>>()?;
    Ok(AttentionMaskSet { masks })
}

/// Frames with their camera and, for synthetic scenes, ground truth.
#[derive(Clone, Debug)]
pub struct SceneBundle {
    pub camera: Camera,
    pub frames: Vec<FrameObservation>,
    pub gt_params: Option<Vec<TrackingParams>>,
}

fn frame_file(dir: &Path, sub: &str, n: usize, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("{n:04}.{ext}"))
}

pub fn save_scene(dir: impl AsRef<Path>, scene: &SceneBundle) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["frames", "landmarks", "parse"] {
        create_dir(&dir.join(sub))?;
    }
    write_camera(dir.join("camera.toml"), &scene.camera)?;
    for (n, f) in scene.frames.iter().enumerate() {
        write_png16(frame_file(dir, "frames", n, "png"), &f.image)?;
        write_json(frame_file(dir, "landmarks", n, "json"), &f.landmarks)?;
        write_labels(frame_file(dir, "parse", n, "png"), &f.parse)?;
        write_grid(frame_file(dir, "parse", n, "grid"), &f.parse)?;
    }
    if let Some(gt) = &scene.gt_params {
        write_params(dir.join("gt_params.jsonl"), gt)?;
    }
    Ok(())
}

/// Loads a scene whose parse maps have `classes` channels.
pub fn load_scene(dir: impl AsRef<Path>, classes: usize) -> Result<SceneBundle> {
    let dir = dir.as_ref();
    let camera = read_camera(dir.join("camera.toml"))?;
    let mut frames = Vec::new();
    while frame_file(dir, "frames", frames.len(), "png").exists() {
        let n = frames.len();
        let image = read_png(frame_file(dir, "frames", n, "png"), 3)?;
        if image.width() != camera.width || image.height() != camera.height {
            return Err(Error::Dimension(format!(
                "frame {n} is {}x{}, camera.toml says {}x{}",
                image.width(),
                image.height(),
                camera.width,
                camera.height
            )));
        }
        let landmarks: Vec<Landmark> = read_json(frame_file(dir, "landmarks", n, "json"))?;
        let soft = frame_file(dir, "parse", n, "grid");
        let parse = if soft.exists() {
            read_grid(&soft)?
        } else {
            read_labels(frame_file(dir, "parse", n, "png"), classes)?
        };
        if parse.width() != image.width()
            || parse.height() != image.height()
            || parse.channels() != classes
        {
            return Err(Error::Dimension(format!(
                "parse map {n} is {}x{}x{}, expected {}x{}x{classes}",
                parse.width(),
                parse.height(),
                parse.channels(),
                image.width(),
                image.height()
            )));
        }
        frames.push(FrameObservation {
            image,
            landmarks,
            parse,
        });
    }
    if frames.is_empty() {
        return Err(Error::Invalid(format!(
            "{} has no frames/0000.png",
            dir.display()
        )));
    }
    let gt_path = dir.join("gt_params.jsonl");
    let gt_params = if gt_path.exists() {
        let gt = read_params(&gt_path)?;
        if gt.len() != frames.len() {
            return Err(Error::Dimension(format!(
                "{} ground-truth parameter sets for {} frames",
                gt.len(),
                frames.len()
            )));
        }
        Some(gt)
    } else {
        None
    };
    Ok(SceneBundle {
        camera,
        frames,
        gt_params,
    })
}
