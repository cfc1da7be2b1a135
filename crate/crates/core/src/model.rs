//! The personalized face model: template rig, attention masks, corrected
//! shape and dynamic albedo assembly, expression coefficients and head pose.
//!
//! Shape and albedo are assembled as
//!
//! ```text
//! S = w0·S0 + F(ΔS0) + Σᵢ wᵢ·(Sᵢ + F(Aᵢ ⊙ ΔSᵢ))        w0 = 1 − Σᵢ wᵢ
//! R = Rᵗ0 + ΔR0 + Σᵢ wᵢ·(Aᵢ ⊙ ΔRᵢ)
//! ```
//!
//! where `F` samples a UV map at the vertex UVs and `Aᵢ` confines the
//! correction of blendshape `i` to the region that blendshape moves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::UvMap;
use crate::math::{self, Mat3, Vec3};
use crate::mesh::{TriMesh, UvSampler};
use crate::raster::scan_triangle;

/// Per-rig settings stored alongside the template assets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    /// Length unit of the vertex positions.
    pub units: String,
    /// Side length of every UV map (albedo, masks, corrections).
    pub uv_resolution: usize,
    /// Attention-mask blur in texels.
    pub blur_sigma: f64,
    /// Vertex displacement below which a blendshape is treated as static,
    /// in `units`.
    pub threshold: f64,
    /// Names of the parse classes; index 0 is background.
    #[serde(default)]
    pub parse_classes: Vec<String>,
}

impl Default for ModelManifest {
    fn default() -> Self {
        Self {
            units: "mm".into(),
            uv_resolution: 128,
            blur_sigma: 1.0,
            threshold: 0.001,
            parse_classes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TemplateFaceModel {
    /// Neutral mesh. Carries the UVs and the landmark indices.
    pub s0: TriMesh,
    /// Absolute expression shapes, same topology as `s0`.
    pub blendshapes: Vec<Vec<Vec3>>,
    /// Mean albedo, 3 channels in `[0, 1]`.
    pub r0: UvMap,
    /// One-hot region labels in UV space; channel 0 is background.
    pub parse_map: Option<UvMap>,
    /// 1 on skin, 0 where pixels are excluded from the photometric loss.
    pub validity: UvMap,
    pub manifest: ModelManifest,
}

impl TemplateFaceModel {
    pub fn new(
        s0: TriMesh,
        blendshapes: Vec<Vec<Vec3>>,
        r0: UvMap,
        parse_map: Option<UvMap>,
        validity: UvMap,
        manifest: ModelManifest,
    ) -> Result<Self> {
        s0.validate()?;
        s0.require_uv()?;
        let nv = s0.num_vertices();
        if let Some(i) = blendshapes.iter().position(|b| b.len() != nv) {
            return Err(Error::Dimension(format!(
                "blendshape {} has {} vertices, neutral has {nv}",
                i + 1,
                blendshapes[i].len()
            )));
        }
        let res = manifest.uv_resolution;
        if r0.channels() != 3 || r0.width() != res || r0.height() != res {
            return Err(Error::Dimension(format!(
                "albedo must be {res}x{res}x3, got {}x{}x{}",
                r0.width(),
                r0.height(),
                r0.channels()
            )));
        }
        let (lo, hi) = r0.min_max();
        if lo < 0.0 || hi > 1.0 {
            return Err(Error::Invalid(format!(
                "albedo outside [0,1]: [{lo}, {hi}]"
            )));
        }
        if validity.channels() != 1 {
            return Err(Error::Dimension(
                "validity map must have one channel".into(),
            ));
        }
        if let Some(t) = &parse_map {
            if t.channels() < 2 {
                return Err(Error::Dimension(
                    "parse map needs a background and at least one region".into(),
                ));
            }
        }
        Ok(Self {
            s0,
            blendshapes,
            r0,
            parse_map,
            validity,
            manifest,
        })
    }

    pub fn num_blendshapes(&self) -> usize {
        self.blendshapes.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.s0.num_vertices()
    }

    pub fn uv_resolution(&self) -> usize {
        self.manifest.uv_resolution
    }

    pub fn landmark_indices(&self) -> Result<&[usize]> {
        self.s0
            .landmark_indices
            .as_deref()
            .ok_or_else(|| Error::Invalid("template has no landmark indices".into()))
    }

    pub fn sampler(&self) -> Result<UvSampler> {
        let res = self.uv_resolution();
        UvSampler::new(&self.s0, res, res)
    }
}

/// One single-channel UV mask per blendshape, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaskSet {
    pub masks: Vec<UvMap>,
}

impl AttentionMaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Normalized per-vertex displacement of blendshape `index`: zero below
/// `threshold`, otherwise divided by the largest displacement.
pub fn normalized_displacement(
    template: &TemplateFaceModel,
    index: usize,
    threshold: f64,
) -> Vec<f64> {
    let d: Vec<f64> = template.blendshapes[index]
        .iter()
        .zip(&template.s0.vertices)
        .map(|(&a, &b)| math::norm(math::sub(a, b)))
        .collect();
    let max = d.iter().cloned().fold(0.0, f64::max);
    if max < threshold {
        return vec![0.0; d.len()];
    }
    d.into_iter()
        .map(|v| if v < threshold { 0.0 } else { v / max })
        .collect()
}

/// Mask of blendshape `index` before blurring: the normalized displacement
/// rasterized into UV space with barycentric interpolation. Texels outside
/// every UV triangle stay 0.
pub fn attention_mask_unblurred(
    template: &TemplateFaceModel,
    index: usize,
    resolution: usize,
) -> Result<UvMap> {
    let values = normalized_displacement(template, index, template.manifest.threshold);
    splat_vertex_values(&template.s0, &values, resolution)
}

fn splat_vertex_values(mesh: &TriMesh, values: &[f64], resolution: usize) -> Result<UvMap> {
    let uv = mesh.require_uv()?;
    let res = resolution as f64;
    let mut map = UvMap::zeros(resolution, resolution, 1);
    let mut written = vec![false; resolution * resolution];
    for t in &mesh.triangles {
        let p = t.map(|i| [uv[i][0] * res, uv[i][1] * res]);
        scan_triangle(p, resolution, resolution, true, |x, y, b| {
            let k = y * resolution + x;
            if !written[k] {
                written[k] = true;
                let v = b[0] * values[t[0]] + b[1] * values[t[1]] + b[2] * values[t[2]];
                map.set(x, y, 0, v);
            }
        });
    }
    Ok(map)
}

/// Attention masks for every blendshape at `resolution × resolution`,
/// blurred with `blur_sigma` texels and clamped to `[0, 1]`.
pub fn compute_attention_masks(
    template: &TemplateFaceModel,
    resolution: usize,
    blur_sigma: f64,
) -> Result<AttentionMaskSet> {
    if resolution < 8 {
        return Err(Error::Invalid(format!(
            "mask resolution must be at least 8, got {resolution}"
        )));
    }
    let masks = (0..template.num_blendshapes())
        .map(|i| {
            let raw = attention_mask_unblurred(template, i, resolution)?;
            Ok(raw.gaussian_blur(blur_sigma).map(|v| v.clamp(0.0, 1.0)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionMaskSet { masks })
}

/// Where each attention mask is nonzero: its texels, the vertices whose
/// bilinear footprint reaches them, and the triangles touching those vertices.
/// Outside its support a blendshape's corrections have no effect.
#[derive(Clone, Debug, Default)]
pub struct MaskSupport {
    pub texels: Vec<Vec<usize>>,
    pub vertices: Vec<Vec<usize>>,
    pub triangles: Vec<Vec<usize>>,
}

impl MaskSupport {
    pub fn new(
        template: &TemplateFaceModel,
        masks: &AttentionMaskSet,
        sampler: &UvSampler,
    ) -> Self {
        let mut out = Self::default();
        for mask in &masks.masks {
            let m = mask.data();
            let texels: Vec<usize> = (0..m.len()).filter(|&k| m[k] != 0.0).collect();
            let inside: Vec<bool> = sampler
                .taps()
                .iter()
                .map(|tap| tap.taps().iter().any(|&(k, w)| w != 0.0 && m[k] != 0.0))
                .collect();
            let vertices = (0..inside.len()).filter(|&v| inside[v]).collect();
            let triangles = (0..template.s0.triangles.len())
                .filter(|&t| template.s0.triangles[t].iter().any(|&v| inside[v]))
                .collect();
            out.texels.push(texels);
            out.vertices.push(vertices);
            out.triangles.push(triangles);
        }
        out
    }
}

/// Learnable UV-space corrections on top of the template.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCorrections {
    /// Identity shape correction ΔS0, 3 channels, model units.
    pub d_shape_0: UvMap,
    /// Per-blendshape shape corrections ΔSᵢ.
    pub d_shape: Vec<UvMap>,
    /// Static albedo correction ΔR0.
    pub d_albedo_0: UvMap,
    /// Expression-specific albedo corrections ΔRᵢ.
    pub d_albedo: Vec<UvMap>,
    /// Trainable mean albedo, initialized from the template albedo.
    pub r0_trainable: UvMap,
}

impl ModelCorrections {
    /// Zero corrections with the trainable albedo set to the template's.
    pub fn zeros(template: &TemplateFaceModel) -> Self {
        let res = template.uv_resolution();
        let z = UvMap::zeros(res, res, 3);
        let k = template.num_blendshapes();
        Self {
            d_shape_0: z.clone(),
            d_shape: vec![z.clone(); k],
            d_albedo_0: z.clone(),
            d_albedo: vec![z; k],
            r0_trainable: template.r0.clone(),
        }
    }

    pub fn num_blendshapes(&self) -> usize {
        self.d_shape.len()
    }

    pub fn resolution(&self) -> usize {
        self.d_shape_0.width()
    }

    pub fn maps(&self) -> impl Iterator<Item = &UvMap> {
        std::iter::once(&self.d_shape_0)
            .chain(&self.d_shape)
            .chain(std::iter::once(&self.d_albedo_0))
            .chain(&self.d_albedo)
            .chain(std::iter::once(&self.r0_trainable))
    }

    pub fn maps_mut(&mut self) -> impl Iterator<Item = &mut UvMap> {
        std::iter::once(&mut self.d_shape_0)
            .chain(&mut self.d_shape)
            .chain(std::iter::once(&mut self.d_albedo_0))
            .chain(&mut self.d_albedo)
            .chain(std::iter::once(&mut self.r0_trainable))
    }

    /// Shapes and finiteness of every map against the template and masks.
    pub fn check(&self, template: &TemplateFaceModel, masks: &AttentionMaskSet) -> Result<()> {
        self.check_shapes(template, masks)?;
        if let Some(k) = self
            .maps()
            .position(|m| !m.data().iter().all(|v| v.is_finite()))
        {
            return Err(Error::Invalid(format!(
                "non-finite value in correction map {k}"
            )));
        }
        Ok(())
    }

    pub fn check_shapes(
        &self,
        template: &TemplateFaceModel,
        masks: &AttentionMaskSet,
    ) -> Result<()> {
        let k = template.num_blendshapes();
        if self.d_shape.len() != k || self.d_albedo.len() != k || masks.len() != k {
            return Err(Error::Dimension(format!(
                "{k} blendshapes, {} shape corrections, {} albedo corrections, {} masks",
                self.d_shape.len(),
                self.d_albedo.len(),
                masks.len()
            )));
        }
        let res = template.uv_resolution();
        for m in self.maps() {
            if m.width() != res || m.height() != res || m.channels() != 3 {
                return Err(Error::Dimension(format!(
                    "correction map {}x{}x{} does not match {res}x{res}x3",
                    m.width(),
                    m.height(),
                    m.channels()
                )));
            }
        }
        for m in &masks.masks {
            if m.width() != res || m.height() != res || m.channels() != 1 {
                return Err(Error::Dimension(format!(
                    "attention mask is not {res}x{res}x1"
                )));
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Expression coefficients derived from unconstrained logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionCoeffs {
    pub logits: Vec<f64>,
    pub w: Vec<f64>,
    /// Neutral weight `1 − Σ w`. Negative when the weights sum past one.
    pub w0: f64,
}

impl ExpressionCoeffs {
    pub fn from_logits(logits: &[f64]) -> Self {
        let w: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
        let w0 = 1.0 - w.iter().sum::<f64>();
        Self {
            logits: logits.to_vec(),
            w,
            w0,
        }
    }

    /// Coefficients with prescribed weights. Logits are the matching inverse
    /// sigmoid (infinite at 0 and 1).
    pub fn from_weights(w: &[f64]) -> Self {
        let logits = w.iter().map(|&v| (v / (1.0 - v)).ln()).collect();
        Self {
            logits,
            w: w.to_vec(),
            w0: 1.0 - w.iter().sum::<f64>(),
        }
    }
}

pub fn coeffs_from_logits(logits: &[f64]) -> ExpressionCoeffs {
    ExpressionCoeffs::from_logits(logits)
}

/// Blendshapes with their masked shape corrections applied, plus the sampled
/// identity correction. Evaluating a new set of weights is then a weighted sum.
#[derive(Clone, Debug)]
pub struct CorrectedRig {
    pub neutral: Vec<Vec3>,
    /// `F(ΔS0)`
    pub identity_offset: Vec<Vec3>,
    /// `Sᵢ + F(Aᵢ ⊙ ΔSᵢ)`
    pub blendshapes: Vec<Vec<Vec3>>,
}

impl CorrectedRig {
    pub fn new(
        template: &TemplateFaceModel,
        corrections: &ModelCorrections,
        masks: &AttentionMaskSet,
        sampler: &UvSampler,
    ) -> Result<Self> {
        corrections.check_shapes(template, masks)?;
        let identity_offset = sampler.sample3(&corrections.d_shape_0)?;
        let blendshapes = template
            .blendshapes
            .iter()
            .zip(&corrections.d_shape)
            .zip(&masks.masks)
            .map(|((base, delta), mask)| {
                let offsets = sampler.sample3_masked(delta, mask)?;
                Ok(base
                    .iter()
                    .zip(offsets)
                    .map(|(&b, o)| math::add(b, o))
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            neutral: template.s0.vertices.clone(),
            identity_offset,
            blendshapes,
        })
    }

    pub fn evaluate(&self, coeffs: &ExpressionCoeffs) -> Result<Vec<Vec3>> {
        if coeffs.w.len() != self.blendshapes.len() {
            return Err(Error::Dimension(format!(
                "{} coefficients for {} blendshapes",
                coeffs.w.len(),
                self.blendshapes.len()
            )));
        }
        let mut out: Vec<Vec3> = self
            .neutral
            .iter()
            .zip(&self.identity_offset)
            .map(|(&s, &o)| math::add(math::scale(s, coeffs.w0), o))
            .collect();
        for (bs, &w) in self.blendshapes.iter().zip(&coeffs.w) {
            if w == 0.0 {
                continue;
            }
            for (o, &b) in out.iter_mut().zip(bs) {
                math::axpy(o, w, b);
            }
        }
        Ok(out)
    }

    /// `dL/dwᵢ` given `dL/dS`, accounting for `w0 = 1 − Σ w`.
    pub fn weight_gradient(&self, grad_shape: &[Vec3]) -> Vec<f64> {
        self.blendshapes
            .iter()
            .map(|bs| {
                bs.iter()
                    .zip(&self.neutral)
                    .zip(grad_shape)
                    .map(|((&b, &s), &g)| math::dot(g, math::sub(b, s)))
                    .sum()
            })
            .collect()
    }
}

/// Corrected face shape for one set of expression coefficients.
pub fn assemble_shape(
    template: &TemplateFaceModel,
    corrections: &ModelCorrections,
    masks: &AttentionMaskSet,
    coeffs: &ExpressionCoeffs,
) -> Result<Vec<Vec3>> {
    let sampler = template.sampler()?;
    CorrectedRig::new(template, corrections, masks, &sampler)?.evaluate(coeffs)
}

/// Static part of the albedo plus the masked dynamic corrections.
#[derive(Clone, Debug)]
pub struct CorrectedAlbedo {
    /// `Rᵗ0 + ΔR0`
    pub base: UvMap,
    /// `Aᵢ ⊙ ΔRᵢ`
    pub dynamic: Vec<UvMap>,
}

impl CorrectedAlbedo {
    pub fn new(
        template: &TemplateFaceModel,
        corrections: &ModelCorrections,
        masks: &AttentionMaskSet,
    ) -> Result<Self> {
        corrections.check_shapes(template, masks)?;
        let mut base = corrections.r0_trainable.clone();
        base.add_scaled(&corrections.d_albedo_0, 1.0);
        let dynamic = corrections
            .d_albedo
            .iter()
            .zip(&masks.masks)
            .map(|(d, m)| d.masked(m))
            .collect();
        Ok(Self { base, dynamic })
    }

    /// Unclamped albedo map for the given weights.
    pub fn evaluate(&self, coeffs: &ExpressionCoeffs) -> Result<UvMap> {
        if coeffs.w.len() != self.dynamic.len() {
            return Err(Error::Dimension(format!(
                "{} coefficients for {} albedo corrections",
                coeffs.w.len(),
                self.dynamic.len()
            )));
        }
        let mut out = self.base.clone();
        for (d, &w) in self.dynamic.iter().zip(&coeffs.w) {
            if w != 0.0 {
                out.add_scaled(d, w);
            }
        }
        Ok(out)
    }

    /// `dL/dwᵢ = ⟨dL/dR, Aᵢ ⊙ ΔRᵢ⟩`
    pub fn weight_gradient(&self, grad_albedo: &UvMap) -> Vec<f64> {
        self.dynamic
            .iter()
            .map(|d| {
                d.data()
                    .iter()
                    .zip(grad_albedo.data())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }
}

/// Corrected albedo map, stored unclamped.
pub fn assemble_albedo(
    template: &TemplateFaceModel,
    corrections: &ModelCorrections,
    masks: &AttentionMaskSet,
    coeffs: &ExpressionCoeffs,
) -> Result<UvMap> {
    CorrectedAlbedo::new(template, corrections, masks)?.evaluate(coeffs)
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn drot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]]
}

fn drot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]]
}

fn drot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]]
}

/// `Rz(γ)·Ry(β)·Rx(α)` for `euler = [α, β, γ]` in radians.
pub fn rotation_matrix(euler: Vec3) -> Mat3 {
    math::mat_mul(
        &rot_z(euler[2]),
        &math::mat_mul(&rot_y(euler[1]), &rot_x(euler[0])),
    )
}

/// Partial derivatives of [`rotation_matrix`] with respect to each angle.
pub fn rotation_matrix_derivatives(euler: Vec3) -> [Mat3; 3] {
    let (rx, ry, rz) = (rot_x(euler[0]), rot_y(euler[1]), rot_z(euler[2]));
    [
        math::mat_mul(&rz, &math::mat_mul(&ry, &drot_x(euler[0]))),
        math::mat_mul(&rz, &math::mat_mul(&drot_y(euler[1]), &rx)),
        math::mat_mul(&drot_z(euler[2]), &math::mat_mul(&ry, &rx)),
    ]
}

/// Rigid head pose `R·v + t`.
pub fn apply_pose(vertices: &[Vec3], euler: Vec3, translation: Vec3) -> Vec<Vec3> {
    let r = rotation_matrix(euler);
    vertices
        .iter()
        .map(|&v| math::add(math::mat_vec(&r, v), translation))
        .collect()
}

/// Gradients of [`apply_pose`]: `(dL/dvertices, dL/deuler, dL/dtranslation)`.
pub fn apply_pose_backward(
    vertices: &[Vec3],
    euler: Vec3,
    grad_posed: &[Vec3],
) -> (Vec<Vec3>, Vec3, Vec3) {
    let r = rotation_matrix(euler);
    let dr = rotation_matrix_derivatives(euler);
    let mut g_euler = [0.0; 3];
    let mut g_t = [0.0; 3];
    let g_vertices = vertices
        .iter()
        .zip(grad_posed)
        .map(|(&v, &g)| {
            math::add_assign(&mut g_t, g);
            for k in 0..3 {
                g_euler[k] += math::dot(g, math::mat_vec(&dr[k], v));
            }
            math::mat_t_vec(&r, g)
        })
        .collect();
    (g_vertices, g_euler, g_t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_zero_is_half() {
        let c = coeffs_from_logits(&[0.0]);
        assert_eq!(c.w[0], 0.5);
        assert_eq!(c.w0, 0.5);
    }

    #[test]
    fn saturated_logits() {
        let c = coeffs_from_logits(&[-20.0; 56]);
        assert!(c.w.iter().all(|&w| w < 1e-8));
        assert!((c.w0 - 1.0).abs() < 1e-8 * 56.0);
    }

    #[test]
    fn half_turn_yaw() {
        let p = apply_pose(
            &[[1.0, 0.0, 0.0]],
            [0.0, std::f64::consts::PI, 0.0],
            [0.0; 3],
        );
        assert!((p[0][0] + 1.0).abs() < 1e-9 && p[0][1].abs() < 1e-9 && p[0][2].abs() < 1e-9);
    }

    #[test]
    fn zero_pose_is_identity() {
        let v = vec![[1.5, -2.0, 3.25]];
        assert_eq!(apply_pose(&v, [0.0; 3], [0.0; 3]), v);
    }

    #[test]
    fn pose_backward_matches_finite_differences() {
        let v = vec![[1.0, 2.0, -0.5], [-0.3, 0.7, 2.0]];
        let g = vec![[0.2, -0.4, 1.0], [0.5, 0.1, -0.3]];
        let euler = [0.3, -0.2, 0.9];
        let loss = |e: Vec3| -> f64 {
            apply_pose(&v, e, [0.0; 3])
                .iter()
                .zip(&g)
                .map(|(&p, &gg)| math::dot(p, gg))
                .sum()
        };
        let (_, ge, gt) = apply_pose_backward(&v, euler, &g);
        let h = 1e-6;
        for k in 0..3 {
            let mut a = euler;
            let mut b = euler;
            a[k] += h;
            b[k] -= h;
            let fd = (loss(a) - loss(b)) / (2.0 * h);
            assert!((fd - ge[k]).abs() < 1e-7);
        }
        for (a, b) in gt.iter().zip([0.7, -0.3, 0.7]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
