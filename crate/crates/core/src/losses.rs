//! Training objective terms and their weighted sum.
//!
//! Every term comes as a pure function returning its value. Where the fitter
//! needs it, a `*_grad` companion returns the value together with its
//! gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, UvMap};
use crate::math::{self, Mat3, Vec2, Vec3};
use crate::mesh::{DeformationFrames, UvSampler};
use crate::model::{
    AttentionMaskSet, ExpressionCoeffs, MaskSupport, ModelCorrections, TemplateFaceModel,
};
use crate::raster::RenderOutput;
use crate::shading::{ShCoeffs, SH_BANDS};

/// Weights of the objective. `lambda_gamma` scales the overall-light term
/// inside the lighting regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ph: f64,
    pub lambda_lm: f64,
    pub lambda_pa: f64,
    pub lambda_sd: f64,
    pub lambda_bg: f64,
    pub lambda_reg: f64,
    pub lambda_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ph: 200.0,
            lambda_lm: 0.1,
            lambda_pa: 50.0,
            lambda_sd: 2.5,
            lambda_bg: 1.5,
            lambda_reg: 1e-3,
            lambda_gamma: 0.02,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_ph,
            self.lambda_lm,
            self.lambda_pa,
            self.lambda_sd,
            self.lambda_bg,
            self.lambda_reg,
            self.lambda_gamma,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Invalid(format!(
                "loss weights must be finite and nonnegative: {all:?}"
            )));
        }
        Ok(())
    }
}

/// Which terms enter the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossMode {
    /// Every term.
    #[default]
    Joint,
    /// Tracking parameters are frozen, so their regularizer is dropped.
    Finetune,
    /// The model is frozen, so the model-only terms are dropped.
    Tracking,
}

/// Raw (unweighted) values of the six objective terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Color l2,1 term plus the image-gradient term.
    pub photometric: f64,
    pub landmark: f64,
    pub parsing: f64,
    pub smoothness: f64,
    pub blendshape_gradient: f64,
    /// Expression sparsity plus lighting regularizer.
    pub regularization: f64,
}

impl LossTerms {
    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("photometric", self.photometric),
            ("landmark", self.landmark),
            ("parsing", self.parsing),
            ("smoothness", self.smoothness),
            ("blendshape_gradient", self.blendshape_gradient),
            ("regularization", self.regularization),
        ]
    }
}

/// Components that are summed into a single objective term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossDetail {
    pub photometric_color: f64,
    pub image_gradient: f64,
    pub reg_expression: f64,
    pub reg_lighting: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    pub weighted: LossTerms,
    pub detail: LossDetail,
    pub total: f64,
}

impl LossBreakdown {
    /// One key per term plus `total`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "photometric": self.terms.photometric,
            "landmark": self.terms.landmark,
            "parsing": self.terms.parsing,
            "smoothness": self.terms.smoothness,
            "blendshape_gradient": self.terms.blendshape_gradient,
            "regularization": self.terms.regularization,
            "photometric_color": self.detail.photometric_color,
            "image_gradient": self.detail.image_gradient,
            "reg_expression": self.detail.reg_expression,
            "reg_lighting": self.detail.reg_lighting,
            "total": self.total,
        })
    }
}

/// Effective weights for `mode`: `Finetune` zeroes the regularizer weight,
/// `Tracking` zeroes smoothness and blendshape-gradient weights.
pub fn mode_weights(weights: &LossWeights, mode: LossMode) -> LossWeights {
    let mut w = *weights;
    match mode {
        LossMode::Joint => {}
        LossMode::Finetune => w.lambda_reg = 0.0,
        LossMode::Tracking => {
            w.lambda_sd = 0.0;
            w.lambda_bg = 0.0;
        }
    }
    w
}

/// Weighted sum of the objective terms.
pub fn total_loss(
    terms: &LossTerms,
    weights: &LossWeights,
    mode: LossMode,
) -> Result<LossBreakdown> {
    total_loss_with_detail(terms, LossDetail::default(), weights, mode)
}

pub fn total_loss_with_detail(
    terms: &LossTerms,
    detail: LossDetail,
    weights: &LossWeights,
    mode: LossMode,
) -> Result<LossBreakdown> {
    for (name, v) in terms.named() {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
    }
    let w = mode_weights(weights, mode);
    let weighted = LossTerms {
        photometric: w.lambda_ph * terms.photometric,
        landmark: w.lambda_lm * terms.landmark,
        parsing: w.lambda_pa * terms.parsing,
        smoothness: w.lambda_sd * terms.smoothness,
        blendshape_gradient: w.lambda_bg * terms.blendshape_gradient,
        regularization: w.lambda_reg * terms.regularization,
    };
    let total = weighted.photometric
        + weighted.landmark
        + weighted.parsing
        + weighted.smoothness
        + weighted.blendshape_gradient
        + weighted.regularization;
    Ok(LossBreakdown {
        terms: *terms,
        weighted,
        detail,
        total,
    })
}

fn check_pair(target: &Image, pred: &Image, mask: &Image) -> Result<()> {
    target.check_shape(pred, "photometric images")?;
    if mask.channels() != 1 || mask.width() != target.width() || mask.height() != target.height() {
        return Err(Error::Dimension(
            "photometric mask must be single-channel and match the image".into(),
        ));
    }
    Ok(())
}

/// Masked l2,1 distance of one frame: `Σ_q ‖M(q)·(I(q) − Î(q))‖₂ / Σ_q M(q)`,
/// together with its gradient with respect to `pred`. `frame` labels errors.
pub fn masked_l21_grad(
    target: &Image,
    pred: &Image,
    mask: &Image,
    frame: usize,
) -> Result<(f64, Image)> {
    check_pair(target, pred, mask)?;
    let norm: f64 = mask.data().iter().sum();
    if !(norm > 0.0) {
        return Err(Error::EmptyMask(frame));
    }
    let ch = target.channels();
    let mut grad = Image::zeros(pred.width(), pred.height(), ch);
    let mut total = 0.0;
    for (((t, p), &m), g) in target
        .data()
        .chunks_exact(ch)
        .zip(pred.data().chunks_exact(ch))
        .zip(mask.data())
        .zip(grad.data_mut().chunks_exact_mut(ch))
    {
        if m == 0.0 {
            continue;
        }
        let dist = t
            .iter()
            .zip(p)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        total += m * dist;
        if dist > 0.0 {
            for ((gi, a), b) in g.iter_mut().zip(t).zip(p) {
                *gi = -m * (a - b) / (dist * norm);
            }
        }
    }
    Ok((total / norm, grad))
}

/// Multi-frame photometric consistency: per-frame masked l2,1, summed over frames.
pub fn photometric_l21(frames: &[Image], renders: &[RenderOutput]) -> Result<f64> {
    check_frame_count(frames.len(), renders.len())?;
    frames
        .iter()
        .zip(renders)
        .enumerate()
        .map(|(n, (f, r))| Ok(masked_l21_grad(f, &r.color, &r.mask, n)?.0))
        .sum()
}

fn check_frame_count(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{a} frames but {b} renders")));
    }
    Ok(())
}

/// Forward differences stacked as `[d/dx (C channels), d/dy (C channels)]`;
/// zero on the last column/row.
pub fn forward_differences(img: &Image) -> Image {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let src = img.data();
    let mut out = Image::zeros(w, h, 2 * ch);
    let dst = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * ch;
            let o = (y * w + x) * 2 * ch;
            for c in 0..ch {
                if x + 1 < w {
                    dst[o + c] = src[i + ch + c] - src[i + c];
                }
                if y + 1 < h {
                    dst[o + ch + c] = src[i + w * ch + c] - src[i + c];
                }
            }
        }
    }
    out
}

/// Adjoint of [`forward_differences`].
pub fn forward_differences_backward(grad: &Image, channels: usize) -> Image {
    let (w, h, ch) = (grad.width(), grad.height(), channels);
    let g = grad.data();
    let mut out = Image::zeros(w, h, ch);
    let dst = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * ch;
            let o = (y * w + x) * 2 * ch;
            for c in 0..ch {
                if x + 1 < w {
                    dst[i + ch + c] += g[o + c];
                    dst[i + c] -= g[o + c];
                }
                if y + 1 < h {
                    dst[i + w * ch + c] += g[o + ch + c];
                    dst[i + c] -= g[o + ch + c];
                }
            }
        }
    }
    out
}

/// Mask eroded so that both forward differences at a pixel stay inside it:
/// `min(M(x,y), M(x+1,y), M(x,y+1))`, zero on the last row and column.
pub fn erode_mask(mask: &Image) -> Image {
    let (w, h) = (mask.width(), mask.height());
    Image::from_fn(w, h, 1, |x, y, _| {
        if x + 1 < w && y + 1 < h {
            mask.get(x, y, 0)
                .min(mask.get(x + 1, y, 0))
                .min(mask.get(x, y + 1, 0))
        } else {
            0.0
        }
    })
}

/// Image-gradient term of one frame with its gradient with respect to `pred`:
/// the masked l2,1 distance between [`forward_differences`] of both images
/// under [`erode_mask`], evaluated in one pass.
pub fn image_gradient_grad(
    target: &Image,
    pred: &Image,
    mask: &Image,
    frame: usize,
) -> Result<(f64, Image)> {
    check_pair(target, pred, mask)?;
    let (w, h, ch) = (pred.width(), pred.height(), pred.channels());
    let (t, p, m) = (target.data(), pred.data(), mask.data());
    let eroded = |x: usize, y: usize| {
        let i = y * w + x;
        m[i].min(m[i + 1]).min(m[i + w])
    };
    let mut norm = 0.0;
    for y in 0..h.saturating_sub(1) {
        for x in 0..w - 1 {
            norm += eroded(x, y);
        }
    }
    if !(norm > 0.0) {
        return Err(Error::EmptyMask(frame));
    }
    let mut grad = Image::zeros(w, h, ch);
    let g = grad.data_mut();
    let mut total = 0.0;
    let mut d = vec![0.0; 2 * ch];
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let mq = eroded(x, y);
            if mq == 0.0 {
                continue;
            }
            let i = (y * w + x) * ch;
            let (ix, iy) = (i + ch, i + w * ch);
            for c in 0..ch {
                d[c] = (t[ix + c] - t[i + c]) - (p[ix + c] - p[i + c]);
                d[ch + c] = (t[iy + c] - t[i + c]) - (p[iy + c] - p[i + c]);
            }
            let dist = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            total += mq * dist;
            if dist > 0.0 {
                let s = -mq / (dist * norm);
                for c in 0..ch {
                    let (gx, gy) = (s * d[c], s * d[ch + c]);
                    g[ix + c] += gx;
                    g[iy + c] += gy;
                    g[i + c] -= gx + gy;
                }
            }
        }
    }
    Ok((total / norm, grad))
}

/// The photometric l2,1 loss applied to spatial gradient images.
pub fn image_gradient_loss(frames: &[Image], renders: &[RenderOutput]) -> Result<f64> {
    check_frame_count(frames.len(), renders.len())?;
    frames
        .iter()
        .zip(renders)
        .enumerate()
        .map(|(n, (f, r))| Ok(image_gradient_grad(f, &r.color, &r.mask, n)?.0))
        .sum()
}

/// A 2D landmark observation. Invalid points are ignored by the losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "LandmarkRecord", into = "LandmarkRecord")]
pub struct Landmark {
    pub pos: Vec2,
    pub valid: bool,
}

impl Landmark {
    pub fn new(u: f64, v: f64) -> Self {
        Self {
            pos: [u, v],
            valid: true,
        }
    }
}

#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
enum Flag {
    Bool(bool),
    Num(f64),
}

#[derive(Clone, Copy, Serialize, Deserialize)]
struct LandmarkRecord(f64, f64, Flag);

impl From<LandmarkRecord> for Landmark {
    fn from(r: LandmarkRecord) -> Self {
        let valid = match r.2 {
            Flag::Bool(b) => b,
            Flag::Num(n) => n != 0.0,
        };
        Self {
            pos: [r.0, r.1],
            valid,
        }
    }
}

impl From<Landmark> for LandmarkRecord {
    fn from(l: Landmark) -> Self {
        LandmarkRecord(
            l.pos[0],
            l.pos[1],
            Flag::Num(if l.valid { 1.0 } else { 0.0 }),
        )
    }
}

/// Mean squared pixel distance over valid landmarks, with the gradient with
/// respect to `pred`.
pub fn landmark_loss_grad(pred: &[Vec2], gt: &[Landmark]) -> Result<(f64, Vec<Vec2>)> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "{} predicted vs {} ground-truth landmarks",
            pred.len(),
            gt.len()
        )));
    }
    let valid = gt.iter().filter(|l| l.valid).count();
    if valid == 0 {
        return Err(Error::NoValidLandmarks);
    }
    let n = valid as f64;
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(p, l)| {
            if !l.valid {
                return [0.0; 2];
            }
            let d = [p[0] - l.pos[0], p[1] - l.pos[1]];
            total += d[0] * d[0] + d[1] * d[1];
            [2.0 * d[0] / n, 2.0 * d[1] / n]
        })
        .collect();
    Ok((total / n, grad))
}

pub fn landmark_loss(pred: &[Vec2], gt: &[Landmark]) -> Result<f64> {
    Ok(landmark_loss_grad(pred, gt)?.0)
}

/// Frobenius distance between one frame's parse maps, with the gradient with
/// respect to `pred`.
pub fn parsing_frame_grad(gt: &Image, pred: &Image) -> Result<(f64, Image)> {
    if gt.channels() != pred.channels() {
        return Err(Error::Dimension(format!(
            "parse maps have {} vs {} classes",
            gt.channels(),
            pred.channels()
        )));
    }
    gt.check_shape(pred, "parse maps")?;
    let dist = gt
        .data()
        .iter()
        .zip(pred.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let mut grad = Image::zeros(pred.width(), pred.height(), pred.channels());
    if dist > 0.0 {
        for ((g, a), b) in grad.data_mut().iter_mut().zip(gt.data()).zip(pred.data()) {
            *g = (b - a) / dist;
        }
    }
    Ok((dist, grad))
}

/// `Σ_n ‖I^pa_n − Î^pa_n‖` with the norm taken over all pixels and classes.
pub fn parsing_loss(gt: &[Image], pred: &[Image]) -> Result<f64> {
    check_frame_count(gt.len(), pred.len())?;
    gt.iter()
        .zip(pred)
        .map(|(a, b)| Ok(parsing_frame_grad(a, b)?.0))
        .sum()
}

/// Laplacian smoothness `Σ_v Σ_{u∈N(v)} ‖Δ(v) − Δ(u)‖²` over a per-vertex
/// field; every undirected edge appears twice.
pub fn shape_smoothness(field: &[Vec3], adjacency: &[Vec<usize>]) -> f64 {
    adjacency
        .iter()
        .enumerate()
        .map(|(v, nbrs)| {
            nbrs.iter()
                .map(|&u| {
                    let d = math::sub(field[v], field[u]);
                    math::dot(d, d)
                })
                .sum::<f64>()
        })
        .sum()
}

pub fn shape_smoothness_grad(field: &[Vec3], adjacency: &[Vec<usize>]) -> (f64, Vec<Vec3>) {
    let mut grad = vec![[0.0; 3]; field.len()];
    let mut total = 0.0;
    for (v, nbrs) in adjacency.iter().enumerate() {
        for &u in nbrs {
            let d = math::sub(field[v], field[u]);
            total += math::dot(d, d);
            math::axpy(&mut grad[v], 2.0, d);
            math::axpy(&mut grad[u], -2.0, d);
        }
    }
    (total, grad)
}

/// Deformation-gradient similarity between corrected and template
/// blendshapes, with the reference frames and template gradients cached.
#[derive(Clone, Debug)]
pub struct BlendshapeGradientTerm {
    frames: DeformationFrames,
    template_gradients: Vec<Vec<Mat3>>,
    /// Per blendshape, the only triangles that corrections can change.
    triangles: Option<Vec<Vec<usize>>>,
}

impl BlendshapeGradientTerm {
    pub fn new(template: &TemplateFaceModel) -> Result<Self> {
        let frames = DeformationFrames::new(&template.s0)?;
        let template_gradients = template
            .blendshapes
            .iter()
            .map(|b| frames.gradients(b))
            .collect();
        Ok(Self {
            frames,
            template_gradients,
            triangles: None,
        })
    }

    /// Skips triangles outside the mask support; the result is unchanged
    /// because untouched triangles keep their template gradient exactly.
    pub fn restricted(template: &TemplateFaceModel, support: &MaskSupport) -> Result<Self> {
        Ok(Self {
            triangles: Some(support.triangles.clone()),
            ..Self::new(template)?
        })
    }

    /// Loss for one corrected blendshape, accumulating `dL/dvertices` when requested.
    pub fn blendshape(&self, index: usize, corrected: &[Vec3], grad: Option<&mut [Vec3]>) -> f64 {
        let reference = &self.template_gradients[index];
        let mut total = 0.0;
        let mut grad = grad;
        let all: Vec<usize>;
        let triangles = match &self.triangles {
            Some(t) => &t[index],
            None => {
                all = (0..reference.len()).collect();
                &all
            }
        };
        for &t in triangles {
            let g_ref = &reference[t];
            let diff = math::mat_sub(&self.frames.gradient(corrected, t), g_ref);
            total += math::frobenius_sq(&diff);
            if let Some(g) = grad.as_deref_mut() {
                let mut gg = diff;
                gg.iter_mut().flatten().for_each(|v| *v *= 2.0);
                self.frames.gradient_backward(corrected, t, &gg, g);
            }
        }
        total
    }
}

/// Σᵢ Σ_triangles ‖G(S0 → Sᵢ + F(Aᵢ ⊙ ΔSᵢ)) − G(S0 → Sᵢ)‖²_F
pub fn blendshape_gradient_loss(
    template: &TemplateFaceModel,
    corrections: &ModelCorrections,
    masks: &AttentionMaskSet,
) -> Result<f64> {
    let sampler = template.sampler()?;
    let term = BlendshapeGradientTerm::new(template)?;
    Ok(blendshape_gradient_loss_grad(template, corrections, masks, &sampler, &term, false)?.0)
}

/// Value and per-blendshape gradients with respect to the shape correction
/// maps `ΔSᵢ` (`None` when `with_grad` is false).
pub fn blendshape_gradient_loss_grad(
    template: &TemplateFaceModel,
    corrections: &ModelCorrections,
    masks: &AttentionMaskSet,
    sampler: &UvSampler,
    term: &BlendshapeGradientTerm,
    with_grad: bool,
) -> Result<(f64, Option<Vec<UvMap>>)> {
    corrections.check_shapes(template, masks)?;
    let res = template.uv_resolution();
    let mut total = 0.0;
    let mut grads = with_grad.then(|| Vec::with_capacity(template.num_blendshapes()));
    for (i, (delta, mask)) in corrections.d_shape.iter().zip(&masks.masks).enumerate() {
        if delta.data().iter().all(|&v| v == 0.0) {
            if let Some(g) = grads.as_mut() {
                g.push(UvMap::zeros(res, res, 3));
            }
            continue;
        }
        let offsets = sampler.sample3_masked(delta, mask)?;
        let corrected: Vec<Vec3> = template.blendshapes[i]
            .iter()
            .zip(offsets)
            .map(|(&b, o)| math::add(b, o))
            .collect();
        match grads.as_mut() {
            Some(g) => {
                let mut gv = vec![[0.0; 3]; corrected.len()];
                total += term.blendshape(i, &corrected, Some(&mut gv));
                g.push(sampler.splat3(&gv).masked(mask));
            }
            None => total += term.blendshape(i, &corrected, None),
        }
    }
    Ok((total, grads))
}

/// Per-band mean over channels, broadcast back to every channel.
pub fn gamma_channel_mean(gamma: &ShCoeffs) -> ShCoeffs {
    let mut out = ShCoeffs::default();
    for b in 0..SH_BANDS {
        let m = (gamma.get(0, b) + gamma.get(1, b) + gamma.get(2, b)) / 3.0;
        for c in 0..3 {
            out.set(c, b, m);
        }
    }
    out
}

/// Regularizer pieces: `(Σ|wᵢ|, ‖γ − γ_mean‖ + λ_γ‖γ‖)`.
pub fn tracking_reg_parts(
    coeffs: &ExpressionCoeffs,
    gamma: &ShCoeffs,
    lambda_gamma: f64,
) -> (f64, f64) {
    let sparsity: f64 = coeffs.w.iter().map(|w| w.abs()).sum();
    let mean = gamma_channel_mean(gamma);
    let chroma = gamma
        .0
        .iter()
        .zip(&mean.0)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let energy = gamma.0.iter().map(|a| a * a).sum::<f64>().sqrt();
    (sparsity, chroma + lambda_gamma * energy)
}

/// `Σ|wᵢ| + ‖γ − γ_mean‖₂ + λ_γ‖γ‖₂`
pub fn tracking_reg(coeffs: &ExpressionCoeffs, gamma: &ShCoeffs, lambda_gamma: f64) -> f64 {
    let (a, b) = tracking_reg_parts(coeffs, gamma, lambda_gamma);
    a + b
}

/// Gradients of [`tracking_reg`] with respect to `w` and `γ`.
pub fn tracking_reg_grad(
    coeffs: &ExpressionCoeffs,
    gamma: &ShCoeffs,
    lambda_gamma: f64,
) -> (Vec<f64>, ShCoeffs) {
    let gw = coeffs
        .w
        .iter()
        .map(|w| w.signum() * (*w != 0.0) as i32 as f64)
        .collect();
    let mean = gamma_channel_mean(gamma);
    let resid: Vec<f64> = gamma.0.iter().zip(&mean.0).map(|(a, b)| a - b).collect();
    let rn = resid.iter().map(|r| r * r).sum::<f64>().sqrt();
    let gn = gamma.0.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut gg = ShCoeffs::default();
    for k in 0..27 {
        // The residual has zero channel mean per band, so projecting its
        // gradient back through the mean leaves it unchanged.
        if rn > 0.0 {
            gg.0[k] += resid[k] / rn;
        }
        if gn > 0.0 {
            gg.0[k] += lambda_gamma * gamma.0[k] / gn;
        }
    }
    (gw, gg)
}
