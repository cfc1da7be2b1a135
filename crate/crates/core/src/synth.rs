//! Procedural toy head and synthetic scenes with known ground truth.
//!
//! The toy head is a bulged height field over a regular grid with a nose,
//! painted facial features and compact bump blendshapes. Every random draw
//! comes from a `ChaCha8Rng` seeded by the caller.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fit::{FrameObservation, TrackingParams};
use crate::grid::{Image, UvMap};
use crate::losses::Landmark;
use crate::math::{Vec2, Vec3};
use crate::mesh::TriMesh;
use crate::model::{AttentionMaskSet, ModelCorrections, ModelManifest, TemplateFaceModel};
use crate::shading::{project_landmarks, Camera, ShCoeffs, SH_C0};
use crate::{fit, raster};

pub const PARSE_CLASSES: [&str; 6] = ["background", "skin", "brows", "eyes", "nose", "mouth"];

/// Half extents of the head in model units.
const HALF_WIDTH: f64 = 95.0;
const HALF_HEIGHT: f64 = 120.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyHeadSpec {
    /// Vertices per grid side.
    pub grid: usize,
    pub num_blendshapes: usize,
    pub uv_resolution: usize,
    pub seed: u64,
}

impl Default for ToyHeadSpec {
    fn default() -> Self {
        Self {
            grid: 48,
            num_blendshapes: 56,
            uv_resolution: 64,
            seed: 0,
        }
    }
}

impl ToyHeadSpec {
    /// 15×15 grid (392 triangles) with a handful of blendshapes.
    pub fn small() -> Self {
        Self {
            grid: 15,
            num_blendshapes: 6,
            uv_resolution: 16,
            seed: 0,
        }
    }
}

fn height(s: f64, t: f64) -> f64 {
    let dome = 60.0 * (1.0 - 0.6 * (s * s + t * t)).max(0.0).sqrt();
    let nose = 25.0 * (-(s * s / 0.02 + (t - 0.05).powi(2) / 0.06)).exp();
    -(dome + nose)
}

fn ellipse(s: f64, t: f64, c: Vec2, r: Vec2) -> f64 {
    (((s - c[0]) / r[0]).powi(2) + ((t - c[1]) / r[1]).powi(2)).sqrt()
}

/// 1 inside the ellipse, 0 outside, with a soft rim.
fn soft_ellipse(s: f64, t: f64, c: Vec2, r: Vec2) -> f64 {
    let d = ellipse(s, t, c, r);
    let x = ((1.15 - d) / 0.3).clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn parse_class(s: f64, t: f64) -> usize {
    let sides = [-1.0, 1.0];
    if sides
        .iter()
        .any(|&k| ellipse(s, t, [0.35 * k, -0.2], [0.16, 0.08]) <= 1.0)
    {
        3
    } else if sides
        .iter()
        .any(|&k| ellipse(s, t, [0.375 * k, -0.4], [0.25, 0.06]) <= 1.0)
    {
        2
    } else if ellipse(s, t, [0.0, 0.45], [0.33, 0.13]) <= 1.0 {
        5
    } else if ellipse(s, t, [0.0, 0.0], [0.15, 0.22]) <= 1.0 {
        4
    } else {
        1
    }
}

fn is_valid_skin(s: f64, t: f64) -> bool {
    let eye = [-1.0, 1.0]
        .iter()
        .any(|&k| ellipse(s, t, [0.35 * k, -0.2], [0.1, 0.05]) <= 1.0);
    let mouth = ellipse(s, t, [0.0, 0.45], [0.2, 0.05]) <= 1.0;
    !(eye || mouth)
}

fn albedo(s: f64, t: f64) -> [f64; 3] {
    let mut c = [0.78, 0.58, 0.48];
    let tex = 0.04 * (20.0 * s).sin() * (17.0 * t).cos() + 0.02 * (43.0 * s + 29.0 * t).sin();
    for v in &mut c {
        *v += tex;
    }
    let mut paint = |weight: f64, color: [f64; 3]| {
        for (v, k) in c.iter_mut().zip(color) {
            *v += weight * (k - *v);
        }
    };
    for k in [-1.0, 1.0] {
        paint(
            0.5 * soft_ellipse(s, t, [0.45 * k, 0.2], [0.2, 0.15]),
            [0.85, 0.5, 0.45],
        );
        paint(
            soft_ellipse(s, t, [0.375 * k, -0.4], [0.25, 0.06]),
            [0.3, 0.2, 0.15],
        );
        paint(
            soft_ellipse(s, t, [0.35 * k, -0.2], [0.16, 0.08]),
            [0.88, 0.86, 0.84],
        );
        paint(
            soft_ellipse(s, t, [0.35 * k, -0.2], [0.06, 0.06]),
            [0.2, 0.15, 0.1],
        );
    }
    paint(
        soft_ellipse(s, t, [0.0, 0.45], [0.33, 0.13]),
        [0.7, 0.3, 0.3],
    );
    paint(
        soft_ellipse(s, t, [0.0, 0.45], [0.2, 0.05]),
        [0.3, 0.1, 0.1],
    );
    c.map(|v| v.clamp(0.0, 1.0))
}

/// The 68 landmark positions in grid coordinates `(s, t) ∈ [−1, 1]²`.
fn landmark_layout() -> Vec<Vec2> {
    use std::f64::consts::PI;
    let mut pts = Vec::with_capacity(68);
    for i in 0..17 {
        let a = PI - PI * i as f64 / 16.0;
        pts.push([0.85 * a.cos(), 0.05 + 0.75 * a.sin()]);
    }
    for k in [-1.0, 1.0] {
        for i in 0..5 {
            let f = i as f64 / 4.0;
            let s = if k < 0.0 {
                -0.6 + 0.45 * f
            } else {
                0.15 + 0.45 * f
            };
            pts.push([s, -0.38 - 0.05 * (PI * f).sin()]);
        }
    }
    for i in 0..4 {
        pts.push([0.0, -0.2 + 0.1 * i as f64]);
    }
    for i in 0..5 {
        pts.push([-0.15 + 0.075 * i as f64, 0.18]);
    }
    for k in [-1.0, 1.0] {
        for i in 0..6 {
            let a = PI - 2.0 * PI * i as f64 / 6.0;
            pts.push([0.35 * k + 0.13 * a.cos(), -0.2 - 0.05 * a.sin()]);
        }
    }
    for i in 0..12 {
        let a = PI - 2.0 * PI * i as f64 / 12.0;
        pts.push([0.3 * a.cos(), 0.45 - 0.1 * a.sin()]);
    }
    for i in 0..8 {
        let a = PI - 2.0 * PI * i as f64 / 8.0;
        pts.push([0.18 * a.cos(), 0.45 - 0.04 * a.sin()]);
    }
    pts
}

/// Builds the toy template. Deterministic in `spec`.
pub fn toy_head(spec: &ToyHeadSpec) -> Result<TemplateFaceModel> {
    let n = spec.grid;
    if n < 10 {
        return Err(Error::Invalid(format!(
            "toy head grid needs at least 10 vertices per side, got {n}"
        )));
    }
    if spec.uv_resolution < 8 {
        return Err(Error::Invalid(
            "toy head UV resolution must be at least 8".into(),
        ));
    }
    let coord = |i: usize| -1.0 + 2.0 * i as f64 / (n - 1) as f64;
    let mut st = Vec::with_capacity(n * n);
    let mut vertices = Vec::with_capacity(n * n);
    let mut uv = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let (s, t) = (coord(i), coord(j));
            st.push([s, t]);
            vertices.push([HALF_WIDTH * s, HALF_HEIGHT * t, height(s, t)]);
            uv.push([(s + 1.0) / 2.0, (t + 1.0) / 2.0]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * (n - 1) * (n - 1));
    for j in 0..n - 1 {
        for i in 0..n - 1 {
            let a = j * n + i;
            let (b, c, d) = (a + 1, a + n, a + n + 1);
            // Wound so that normals face the camera (−z).
            triangles.push([a, c, b]);
            triangles.push([b, c, d]);
        }
    }

    let mut taken = vec![false; n * n];
    let landmarks = landmark_layout()
        .into_iter()
        .map(|p| {
            let best = (0..n * n)
                .filter(|&v| !taken[v])
                .min_by(|&a, &b| {
                    let da = (st[a][0] - p[0]).powi(2) + (st[a][1] - p[1]).powi(2);
                    let db = (st[b][0] - p[0]).powi(2) + (st[b][1] - p[1]).powi(2);
                    da.total_cmp(&db)
                })
                .expect("grid has more vertices than landmarks");
            taken[best] = true;
            best
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let anchors: [Vec2; 12] = [
        [0.0, 0.7],
        [-0.3, 0.45],
        [0.3, 0.45],
        [0.0, 0.35],
        [-0.35, -0.4],
        [0.35, -0.4],
        [-0.35, -0.2],
        [0.35, -0.2],
        [-0.45, 0.15],
        [0.45, 0.15],
        [0.0, 0.05],
        [0.0, -0.65],
    ];
    let blendshapes = (0..spec.num_blendshapes)
        .map(|k| {
            let a = anchors[k % anchors.len()];
            let center = [
                a[0] + rng.random_range(-0.08..0.08),
                a[1] + rng.random_range(-0.08..0.08),
            ];
            let radius = rng.random_range(0.22..0.4);
            let dir = loop {
                let d: Vec3 = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                let len = crate::math::norm(d);
                if len > 0.3 && len <= 1.0 {
                    break crate::math::scale(d, 1.0 / len);
                }
            };
            let magnitude = rng.random_range(6.0..14.0);
            vertices
                .iter()
                .zip(&st)
                .map(|(&v, p)| {
                    let d2 = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2))
                        / (radius * radius);
                    let f = if d2 < 1.0 { (1.0 - d2).powi(2) } else { 0.0 };
                    crate::math::add(v, crate::math::scale(dir, magnitude * f))
                })
                .collect()
        })
        .collect();

    let res = spec.uv_resolution;
    let texel = |x: usize, y: usize| {
        let u = (x as f64 + 0.5) / res as f64;
        let v = (y as f64 + 0.5) / res as f64;
        (2.0 * u - 1.0, 2.0 * v - 1.0)
    };
    let r0 = UvMap::from_fn(res, res, 3, |x, y, c| {
        let (s, t) = texel(x, y);
        albedo(s, t)[c]
    });
    let parse = UvMap::from_fn(res, res, PARSE_CLASSES.len(), |x, y, c| {
        let (s, t) = texel(x, y);
        f64::from(u8::from(parse_class(s, t) == c))
    });
    let validity = UvMap::from_fn(res, res, 1, |x, y, _| {
        let (s, t) = texel(x, y);
        f64::from(u8::from(is_valid_skin(s, t)))
    });

    let mut s0 = TriMesh::new(vertices, triangles, Some(uv))?;
    s0.landmark_indices = Some(landmarks);
    TemplateFaceModel::new(
        s0,
        blendshapes,
        r0,
        Some(parse),
        validity,
        ModelManifest {
            uv_resolution: res,
            parse_classes: PARSE_CLASSES.iter().map(|s| s.to_string()).collect(),
            ..ModelManifest::default()
        },
    )
}

/// Ranges of the sampled ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub frames: usize,
    pub seed: u64,
    pub camera: Camera,
    /// Blendshapes switched on per frame.
    pub active_blendshapes: usize,
    /// Bound on each rotation angle, in degrees.
    pub max_rotation_deg: f64,
    pub translation: Vec3,
    /// Scale of the ground-truth corrections; 0 renders the bare template.
    pub correction_scale: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            frames: 4,
            seed: 0,
            camera: Camera::default(),
            active_blendshapes: 3,
            max_rotation_deg: 20.0,
            translation: [0.0, 0.0, 600.0],
            correction_scale: 0.0,
        }
    }
}

/// Logit assigned to inactive blendshapes.
pub const INACTIVE_LOGIT: f64 = -8.0;

pub fn logit(w: f64) -> f64 {
    (w / (1.0 - w)).ln()
}

/// Random tracking parameters: a few active blendshapes, bounded pose and
/// mostly monochromatic lighting.
pub fn sample_params(
    rng: &mut impl Rng,
    num_blendshapes: usize,
    spec: &SceneSpec,
) -> TrackingParams {
    let mut logits = vec![INACTIVE_LOGIT; num_blendshapes];
    let active = spec.active_blendshapes.min(num_blendshapes);
    for i in rand::seq::index::sample(rng, num_blendshapes, active) {
        logits[i] = logit(rng.random_range(0.3..0.9));
    }
    let max = spec.max_rotation_deg.to_radians();
    let euler = [
        rng.random_range(-0.5..0.5) * max,
        rng.random_range(-0.75..0.75) * max,
        rng.random_range(-0.4..0.4) * max,
    ];
    let translation = [
        spec.translation[0] + rng.random_range(-15.0..15.0),
        spec.translation[1] + rng.random_range(-15.0..15.0),
        spec.translation[2] + rng.random_range(-30.0..30.0),
    ];
    let level = rng.random_range(0.8..1.1);
    let mut rel = [0.0; 9];
    rel[0] = 1.0;
    for (b, r) in rel.iter_mut().enumerate().skip(1) {
        let amp = if b < 4 { 0.15 } else { 0.05 };
        *r = rng.random_range(-amp..amp);
    }
    let mut gamma = ShCoeffs::default();
    for c in 0..3 {
        let tint = 1.0 + rng.random_range(-0.05..0.05);
        for (b, r) in rel.iter().enumerate() {
            let k = if b == 0 { tint } else { 1.0 };
            gamma.set(c, b, level * r * k / SH_C0);
        }
    }
    TrackingParams {
        logits,
        euler,
        translation,
        gamma,
    }
}

/// Smooth random field: a few low-frequency sinusoids per channel.
fn smooth_field(rng: &mut impl Rng, res: usize, channels: usize, amplitude: f64) -> UvMap {
    let waves: Vec<[f64; 4]> = (0..channels * 3)
        .map(|_| {
            [
                rng.random_range(0.5..2.5),
                rng.random_range(0.5..2.5),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    UvMap::from_fn(res, res, channels, |x, y, c| {
        let u = (x as f64 + 0.5) / res as f64;
        let v = (y as f64 + 0.5) / res as f64;
        waves[c * 3..c * 3 + 3]
            .iter()
            .map(|w| w[3] * (std::f64::consts::PI * (w[0] * u + w[1] * v) + w[2]).sin())
            .sum::<f64>()
            * amplitude
            / 3.0
    })
}

/// Ground-truth corrections: an identity offset of a few millimeters,
/// smooth expression corrections, and a mild albedo shift. `scale` 0 gives zeros.
pub fn sample_corrections(
    template: &TemplateFaceModel,
    masks: &AttentionMaskSet,
    rng: &mut impl Rng,
    scale: f64,
) -> ModelCorrections {
    let mut c = ModelCorrections::zeros(template);
    if scale == 0.0 {
        return c;
    }
    let res = template.uv_resolution();
    c.d_shape_0 = smooth_field(rng, res, 3, 3.0 * scale);
    for (d, mask) in c.d_shape.iter_mut().zip(&masks.masks) {
        *d = smooth_field(rng, res, 3, 3.0 * scale).masked(mask);
    }
    c.d_albedo_0 = smooth_field(rng, res, 3, 0.03 * scale);
    c
}

/// Quantizes to 16-bit levels, as written to PNG.
pub fn quantize16(img: &Image) -> Image {
    img.map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0)
}

/// Renders one observation: quantized color, projected landmarks, soft parse labels.
pub fn render_observation(
    template: &TemplateFaceModel,
    masks: &AttentionMaskSet,
    corrections: &ModelCorrections,
    params: &TrackingParams,
    camera: &Camera,
) -> Result<FrameObservation> {
    let rec = fit::reconstruct(template, corrections, masks, params, camera)?;
    let labels = raster::parse_labels(&rec.render, template)?;
    let lm = project_landmarks(&rec.posed, template.landmark_indices()?, camera)?;
    Ok(FrameObservation {
        image: quantize16(&rec.render.color),
        landmarks: lm.into_iter().map(|p| Landmark::new(p[0], p[1])).collect(),
        parse: labels,
    })
}

/// A rendered scene and the values it was generated from.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub frames: Vec<FrameObservation>,
    pub params: Vec<TrackingParams>,
    pub corrections: ModelCorrections,
    pub camera: Camera,
}

pub fn synth_scene(
    template: &TemplateFaceModel,
    masks: &AttentionMaskSet,
    spec: &SceneSpec,
) -> Result<SyntheticScene> {
    if spec.frames == 0 {
        return Err(Error::Invalid("a scene needs at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corrections = sample_corrections(template, masks, &mut rng, spec.correction_scale);
    // Containers store corrections as f32; rendering the stored values keeps
    // the scene reproducible from disk.
    for map in corrections.maps_mut() {
        map.data_mut()
            .iter_mut()
            .for_each(|v| *v = f64::from(*v as f32));
    }
    let params: Vec<TrackingParams> = (0..spec.frames)
        .map(|_| sample_params(&mut rng, template.num_blendshapes(), spec))
        .collect();
    let frames = params
        .iter()
        .map(|p| render_observation(template, masks, &corrections, p, &spec.camera))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticScene {
        frames,
        params,
        corrections,
        camera: spec.camera,
    })
}

/// Perturbs pose by up to `rotation_deg` per angle and `translation_mm` per
/// axis, and jitters logits by up to `logit_jitter`.
pub fn perturb_params(
    params: &TrackingParams,
    rng: &mut impl Rng,
    rotation_deg: f64,
    translation_mm: f64,
    logit_jitter: f64,
) -> TrackingParams {
    let mut p = params.clone();
    let r = rotation_deg.to_radians();
    for e in &mut p.euler {
        *e += rng.random_range(-r..=r);
    }
    for t in &mut p.translation {
        *t += rng.random_range(-translation_mm..=translation_mm);
    }
    for l in &mut p.logits {
        *l += rng.random_range(-logit_jitter..=logit_jitter);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::compute_attention_masks;

    #[test]
    fn toy_head_is_deterministic_and_well_formed() {
        let spec = ToyHeadSpec::small();
        let a = toy_head(&spec).unwrap();
        let b = toy_head(&spec).unwrap();
        assert_eq!(a.s0.vertices, b.s0.vertices);
        assert_eq!(a.blendshapes, b.blendshapes);
        assert_eq!(a.s0.triangles.len(), 2 * 14 * 14);
        let lm = a.landmark_indices().unwrap();
        assert_eq!(lm.len(), 68);
        let mut sorted = lm.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 68);
    }

    #[test]
    fn normals_face_the_camera() {
        let t = toy_head(&ToyHeadSpec::small()).unwrap();
        let n = t.s0.vertex_normals();
        let center = 7 * 15 + 7;
        assert!(n[center][2] < -0.5, "{:?}", n[center]);
    }

    #[test]
    fn frontal_render_covers_the_middle() {
        let t = toy_head(&ToyHeadSpec::small()).unwrap();
        let masks = compute_attention_masks(&t, 16, 1.0).unwrap();
        let mut params = sample_params(&mut ChaCha8Rng::seed_from_u64(1), 6, &SceneSpec::default());
        params.euler = [0.0; 3];
        params.translation = [0.0, 0.0, 600.0];
        let cam = Camera::default().resized(64, 64);
        let obs =
            render_observation(&t, &masks, &ModelCorrections::zeros(&t), &params, &cam).unwrap();
        assert!(obs.image.pixel(32, 32).iter().all(|&v| v > 0.05));
        assert_eq!(obs.parse.get(0, 0, 0), 1.0);
        let nose = t.landmark_indices().unwrap()[30];
        let p = obs.landmarks[30].pos;
        assert!(
            (p[0] - 32.0).abs() < 4.0 && (p[1] - 32.0).abs() < 8.0,
            "{nose}: {p:?}"
        );
    }

    #[test]
    fn logit_inverts_sigmoid() {
        for w in [0.3, 0.5, 0.9] {
            assert!((crate::model::sigmoid(logit(w)) - w).abs() < 1e-12);
        }
    }
}
