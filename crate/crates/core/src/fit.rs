//! Two-stage analysis-by-synthesis fitting.
//!
//! Stage 1 optimizes the shared [`ModelCorrections`] together with
//! per-frame [`TrackingParams`]. Stage 2 freezes the tracking parameters and
//! refines only the corrections, without the tracking regularizer. Tracking
//! alone and retargeting reuse the same evaluation path.
//!
//! Per-frame forward and adjoint passes run in parallel; their results are
//! reduced in frame order, so a fit is bit-reproducible.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, UvMap};
use crate::losses::{
    self, BlendshapeGradientTerm, Landmark, LossBreakdown, LossDetail, LossMode, LossTerms,
    LossWeights,
};
use crate::math::{self, Vec3};
use crate::mesh::{laplacian_adjacency, UvSampler};
use crate::model::{
    apply_pose, apply_pose_backward, AttentionMaskSet, CorrectedAlbedo, CorrectedRig,
    ExpressionCoeffs, MaskSupport, ModelCorrections, TemplateFaceModel,
};
use crate::raster::{self, RenderOutput};
use crate::shading::{project_landmarks, Camera, ShCoeffs, SH_C0};

/// Per-frame expression, head pose and lighting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingParams {
    pub logits: Vec<f64>,
    /// Rotation angles `[x, y, z]` in radians, applied as `Rz·Ry·Rx`.
    pub euler: Vec3,
    /// Translation in model units.
    pub translation: Vec3,
    pub gamma: ShCoeffs,
}

impl TrackingParams {
    pub fn coeffs(&self) -> ExpressionCoeffs {
        ExpressionCoeffs::from_logits(&self.logits)
    }

    fn is_finite(&self) -> bool {
        self.logits
            .iter()
            .chain(&self.euler)
            .chain(&self.translation)
            .all(|v| v.is_finite())
            && self.gamma.is_finite()
    }
}

/// One input frame: image, 68 landmarks and a one-hot parse map.
#[derive(Clone, Debug)]
pub struct FrameObservation {
    /// H×W×3 linear RGB.
    pub image: Image,
    pub landmarks: Vec<Landmark>,
    /// H×W×C one-hot region labels, class 0 = background.
    pub parse: Image,
}

/// Adam learning rates per parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageRates {
    pub logits: f64,
    pub euler: f64,
    pub translation: f64,
    pub gamma: f64,
    pub shape: f64,
    pub albedo: f64,
}

impl StageRates {
    /// The same rate for every group.
    pub fn uniform(lr: f64) -> Self {
        Self {
            logits: lr,
            euler: lr,
            translation: lr,
            gamma: lr,
            shape: lr,
            albedo: lr,
        }
    }

    pub fn stage1() -> Self {
        Self {
            logits: 0.02,
            euler: 0.002,
            translation: 0.2,
            gamma: 0.01,
            shape: 0.002,
            albedo: 0.001,
        }
    }

    pub fn stage2() -> Self {
        Self {
            shape: 0.001,
            albedo: 0.0005,
            ..Self::stage1()
        }
    }

    pub fn warmup() -> Self {
        Self {
            euler: 0.01,
            translation: 2.0,
            ..Self::stage1()
        }
    }

    pub fn scaled(&self, f: f64) -> Self {
        Self {
            logits: self.logits * f,
            euler: self.euler * f,
            translation: self.translation * f,
            gamma: self.gamma * f,
            shape: self.shape * f,
            albedo: self.albedo * f,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.logits,
            self.euler,
            self.translation,
            self.gamma,
            self.shape,
            self.albedo,
        ];
        if all.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::Invalid(format!(
                "learning rates must be positive: {all:?}"
            )));
        }
        Ok(())
    }
}

impl Default for StageRates {
    fn default() -> Self {
        Self::stage1()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Landmark-only pose steps before stage 1.
    pub warmup_steps: usize,
    /// Steps used by [`track`].
    pub track_steps: usize,
    pub stage1: StageRates,
    pub stage2: StageRates,
    pub warmup: StageRates,
    /// Learning rates decay exponentially to this fraction by the end of each stage.
    pub lr_decay: f64,
    /// Stage-1 steps during which only tracking parameters move.
    pub model_delay: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Set from the `[weights]` section of a run config, not from `[fit]`.
    #[serde(skip)]
    pub weights: LossWeights,
    /// Seeds the per-step choice of frames when more than
    /// `frames_per_identity` frames are supplied.
    pub seed: u64,
    pub frames_per_identity: usize,
    /// Initial value of every expression logit.
    pub init_logit: f64,
    /// Initial head rotation before the landmark warmup.
    pub init_euler: Vec3,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 2000,
            stage2_steps: 500,
            warmup_steps: 200,
            track_steps: 500,
            stage1: StageRates::stage1(),
            stage2: StageRates::stage2(),
            warmup: StageRates::warmup(),
            lr_decay: 0.03,
            model_delay: 300,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weights: LossWeights::default(),
            seed: 0,
            frames_per_identity: 4,
            init_logit: -4.0,
            init_euler: [0.0; 3],
        }
    }
}

impl FitConfig {
    /// Learning-rate multiplier at `step` of a stage with `total` steps.
    pub fn decay(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            1.0
        } else {
            self.lr_decay.powf(step as f64 / (total - 1) as f64)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.warmup.validate()?;
        self.weights.validate()?;
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::Invalid(
                "Adam needs 0 <= beta < 1 and eps > 0".into(),
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Invalid(format!(
                "lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.frames_per_identity == 0 {
            return Err(Error::Invalid(
                "frames_per_identity must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moment estimates of one parameter block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::Dimension(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(i));
    }
    let (b1, b2) = betas;
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Result of a fit. `trace` holds the objective before every update.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub corrections: ModelCorrections,
    pub params: Vec<TrackingParams>,
    pub trace: Vec<LossBreakdown>,
}

/// Gradients of the objective.
#[derive(Clone, Debug)]
pub struct ObjectiveGrads {
    /// Same layout as the corrections; `None` when the model is frozen.
    pub corrections: Option<ModelCorrections>,
    pub params: Vec<TrackingParams>,
}

struct FramePass {
    terms: LossTerms,
    detail: LossDetail,
    grad_shape: Vec<Vec3>,
    grad_albedo: UvMap,
    w: Vec<f64>,
    grad_params: TrackingParams,
}

/// Everything fixed during a fit: template, masks, observations and caches.
pub struct Objective<'a> {
    pub template: &'a TemplateFaceModel,
    pub masks: &'a AttentionMaskSet,
    pub frames: &'a [FrameObservation],
    pub camera: Camera,
    pub weights: LossWeights,
    sampler: UvSampler,
    support: MaskSupport,
    adjacency: Vec<Vec<usize>>,
    bg_term: BlendshapeGradientTerm,
}

impl<'a> Objective<'a> {
    pub fn new(
        template: &'a TemplateFaceModel,
        masks: &'a AttentionMaskSet,
        frames: &'a [FrameObservation],
        camera: Camera,
        weights: LossWeights,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Invalid("no frames to fit".into()));
        }
        camera.validate()?;
        weights.validate()?;
        let classes = template
            .parse_map
            .as_ref()
            .ok_or(Error::MissingParseMap)?
            .channels();
        let lm_count = template.landmark_indices()?.len();
        for (n, f) in frames.iter().enumerate() {
            if f.image.width() != camera.width
                || f.image.height() != camera.height
                || f.image.channels() != 3
            {
                return Err(Error::Dimension(format!(
                    "frame {n} is {}x{}x{}, camera expects {}x{}x3",
                    f.image.width(),
                    f.image.height(),
                    f.image.channels(),
                    camera.width,
                    camera.height
                )));
            }
            if f.parse.width() != camera.width
                || f.parse.height() != camera.height
                || f.parse.channels() != classes
            {
                return Err(Error::Dimension(format!(
                    "frame {n}: parse map does not match image size / {classes} classes"
                )));
            }
            if f.landmarks.len() != lm_count {
                return Err(Error::Dimension(format!(
                    "frame {n} has {} landmarks, template marks {lm_count}",
                    f.landmarks.len()
                )));
            }
        }
        let sampler = template.sampler()?;
        let support = MaskSupport::new(template, masks, &sampler);
        Ok(Self {
            template,
            masks,
            frames,
            camera,
            weights,
            bg_term: BlendshapeGradientTerm::restricted(template, &support)?,
            sampler,
            support,
            adjacency: laplacian_adjacency(&template.s0),
        })
    }

    fn frame_pass(
        &self,
        n: usize,
        rig: &CorrectedRig,
        albedo_rig: &CorrectedAlbedo,
        params: &TrackingParams,
        mode: LossMode,
    ) -> Result<FramePass> {
        let w = losses::mode_weights(&self.weights, mode);
        let obs = &self.frames[n];
        let coeffs = params.coeffs();
        let shape = rig.evaluate(&coeffs)?;
        let posed = apply_pose(&shape, params.euler, params.translation);
        let albedo = albedo_rig.evaluate(&coeffs)?;
        let render =
            raster::render_face(&posed, &albedo, &params.gamma, &self.camera, self.template)?;

        let (ph, g_ph) = losses::masked_l21_grad(&obs.image, &render.color, &render.mask, n)?;
        let (ig, g_ig) = losses::image_gradient_grad(&obs.image, &render.color, &render.mask, n)?;
        let labels = raster::parse_labels(&render, self.template)?;
        let (pa, g_pa) = losses::parsing_frame_grad(&obs.parse, &labels)?;
        let lm_idx = self.template.landmark_indices()?;
        let lm_pred = project_landmarks(&posed, lm_idx, &self.camera)?;
        let (lm, g_lm) = losses::landmark_loss_grad(&lm_pred, &obs.landmarks)?;
        let (reg_w, reg_gamma) = losses::tracking_reg_parts(&coeffs, &params.gamma, w.lambda_gamma);

        let mut up_color = g_ph;
        up_color.add_scaled(&g_ig, 1.0);
        up_color
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= w.lambda_ph);
        let mut up_parse = g_pa;
        up_parse
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= w.lambda_pa);
        let grads = raster::backward(&render, self.template, &up_color, Some(&up_parse))?;

        let mut g_posed = grads.vertices;
        for (&i, g) in lm_idx.iter().zip(&g_lm) {
            let g = [w.lambda_lm * g[0], w.lambda_lm * g[1]];
            math::add_assign(&mut g_posed[i], self.camera.project_backward(posed[i], g));
        }
        let (grad_shape, g_euler, g_t) = apply_pose_backward(&shape, params.euler, &g_posed);

        let (reg_gw, reg_gg) = losses::tracking_reg_grad(&coeffs, &params.gamma, w.lambda_gamma);
        let gw_shape = rig.weight_gradient(&grad_shape);
        let gw_albedo = albedo_rig.weight_gradient(&grads.albedo);
        let g_logits = coeffs
            .w
            .iter()
            .enumerate()
            .map(|(i, &wi)| {
                (gw_shape[i] + gw_albedo[i] + w.lambda_reg * reg_gw[i]) * wi * (1.0 - wi)
            })
            .collect();
        let mut g_gamma = grads.gamma;
        for (g, r) in g_gamma.0.iter_mut().zip(reg_gg.0) {
            *g += w.lambda_reg * r;
        }

        Ok(FramePass {
            terms: LossTerms {
                photometric: ph + ig,
                landmark: lm,
                parsing: pa,
                smoothness: 0.0,
                blendshape_gradient: 0.0,
                regularization: reg_w + reg_gamma,
            },
            detail: LossDetail {
                photometric_color: ph,
                image_gradient: ig,
                reg_expression: reg_w,
                reg_lighting: reg_gamma,
            },
            grad_shape,
            grad_albedo: grads.albedo,
            w: coeffs.w,
            grad_params: TrackingParams {
                logits: g_logits,
                euler: g_euler,
                translation: g_t,
                gamma: g_gamma,
            },
        })
    }

    /// Objective value over `active` frames (all when `None`) and its gradients.
    pub fn evaluate(
        &self,
        corrections: &ModelCorrections,
        params: &[TrackingParams],
        mode: LossMode,
        active: Option<&[usize]>,
    ) -> Result<(LossBreakdown, ObjectiveGrads)> {
        if params.len() != self.frames.len() {
            return Err(Error::Dimension(format!(
                "{} parameter sets for {} frames",
                params.len(),
                self.frames.len()
            )));
        }
        let k = self.template.num_blendshapes();
        if let Some(n) = params.iter().position(|p| p.logits.len() != k) {
            return Err(Error::Dimension(format!(
                "frame {n} has {} logits for {k} blendshapes",
                params[n].logits.len()
            )));
        }
        let all: Vec<usize> = (0..self.frames.len()).collect();
        let active = active.unwrap_or(&all);
        let rig = CorrectedRig::new(self.template, corrections, self.masks, &self.sampler)?;
        let albedo_rig = CorrectedAlbedo::new(self.template, corrections, self.masks)?;

        let passes: Vec<Result<FramePass>> = active
            .par_iter()
            .map(|&n| self.frame_pass(n, &rig, &albedo_rig, &params[n], mode))
            .collect();

        let w = losses::mode_weights(&self.weights, mode);
        let mut terms = LossTerms::default();
        let mut detail = LossDetail::default();
        let mut g_params: Vec<TrackingParams> = params
            .iter()
            .map(|p| TrackingParams {
                logits: vec![0.0; p.logits.len()],
                euler: [0.0; 3],
                translation: [0.0; 3],
                gamma: ShCoeffs::default(),
            })
            .collect();
        let model_grads = mode != LossMode::Tracking;
        let nv = self.template.num_vertices();
        let res = self.template.uv_resolution();
        let mut acc_shape = vec![[0.0; 3]; nv];
        let support = &self.support;
        let mut acc_shape_i: Vec<Vec<Vec3>> = if model_grads {
            support
                .vertices
                .iter()
                .map(|v| vec![[0.0; 3]; v.len()])
                .collect()
        } else {
            Vec::new()
        };
        let mut acc_albedo = UvMap::zeros(res, res, 3);
        let mut acc_albedo_i: Vec<Vec<f64>> = if model_grads {
            support
                .texels
                .iter()
                .map(|t| vec![0.0; 3 * t.len()])
                .collect()
        } else {
            Vec::new()
        };

        for (&n, pass) in active.iter().zip(passes) {
            let pass = pass?;
            terms.photometric += pass.terms.photometric;
            terms.landmark += pass.terms.landmark;
            terms.parsing += pass.terms.parsing;
            terms.regularization += pass.terms.regularization;
            detail.photometric_color += pass.detail.photometric_color;
            detail.image_gradient += pass.detail.image_gradient;
            detail.reg_expression += pass.detail.reg_expression;
            detail.reg_lighting += pass.detail.reg_lighting;
            g_params[n] = pass.grad_params;
            if model_grads {
                for (a, g) in acc_shape.iter_mut().zip(&pass.grad_shape) {
                    math::add_assign(a, *g);
                }
                acc_albedo.add_scaled(&pass.grad_albedo, 1.0);
                let ga = pass.grad_albedo.data();
                for (i, &wi) in pass.w.iter().enumerate() {
                    for (a, &v) in acc_shape_i[i].iter_mut().zip(&support.vertices[i]) {
                        math::axpy(a, wi, pass.grad_shape[v]);
                    }
                    for (a, &k) in acc_albedo_i[i].chunks_exact_mut(3).zip(&support.texels[i]) {
                        for c in 0..3 {
                            a[c] += wi * ga[3 * k + c];
                        }
                    }
                }
            }
        }

        let correction_grads = if model_grads {
            let identity_offset = &rig.identity_offset;
            let (sd, g_sd) = losses::shape_smoothness_grad(identity_offset, &self.adjacency);
            let (bg, g_bg) = losses::blendshape_gradient_loss_grad(
                self.template,
                corrections,
                self.masks,
                &self.sampler,
                &self.bg_term,
                true,
            )?;
            terms.smoothness = sd;
            terms.blendshape_gradient = bg;

            for (a, g) in acc_shape.iter_mut().zip(&g_sd) {
                math::axpy(a, w.lambda_sd, *g);
            }
            let d_shape_0 = self.sampler.splat3(&acc_shape);
            let g_bg = g_bg.unwrap_or_default();
            let taps = self.sampler.taps();
            let d_shape = acc_shape_i
                .iter()
                .zip(&self.masks.masks)
                .enumerate()
                .map(|(i, (acc, mask))| {
                    let mut g = UvMap::zeros(res, res, 3);
                    for (a, &v) in acc.iter().zip(&support.vertices[i]) {
                        taps[v].splat(&mut g, a);
                    }
                    let mut g = g.masked(mask);
                    if let Some(b) = g_bg.get(i) {
                        g.add_scaled(b, w.lambda_bg);
                    }
                    g
                })
                .collect();
            let d_albedo = acc_albedo_i
                .iter()
                .zip(&self.masks.masks)
                .enumerate()
                .map(|(i, (acc, mask))| {
                    let mut g = UvMap::zeros(res, res, 3);
                    let (m, d) = (mask.data(), g.data_mut());
                    for (a, &k) in acc.chunks_exact(3).zip(&support.texels[i]) {
                        for c in 0..3 {
                            d[3 * k + c] = m[k] * a[c];
                        }
                    }
                    g
                })
                .collect();
            Some(ModelCorrections {
                d_shape_0,
                d_shape,
                d_albedo_0: acc_albedo.clone(),
                d_albedo,
                r0_trainable: acc_albedo,
            })
        } else {
            None
        };

        let breakdown = losses::total_loss_with_detail(&terms, detail, &self.weights, mode)?;
        Ok((
            breakdown,
            ObjectiveGrads {
                corrections: correction_grads,
                params: g_params,
            },
        ))
    }

    /// Landmark term over one frame with its pose gradient.
    fn landmark_pass(
        &self,
        n: usize,
        shape: &[Vec3],
        params: &TrackingParams,
    ) -> Result<(f64, Vec3, Vec3)> {
        let posed = apply_pose(shape, params.euler, params.translation);
        let idx = self.template.landmark_indices()?;
        let pred = project_landmarks(&posed, idx, &self.camera)?;
        let (loss, g) = losses::landmark_loss_grad(&pred, &self.frames[n].landmarks)?;
        let mut g_posed = vec![[0.0; 3]; posed.len()];
        for (&i, g2) in idx.iter().zip(&g) {
            math::add_assign(&mut g_posed[i], self.camera.project_backward(posed[i], *g2));
        }
        let (_, g_euler, g_t) = apply_pose_backward(shape, params.euler, &g_posed);
        Ok((loss, g_euler, g_t))
    }
}

/// Adam state for one set of tracking parameters.
struct TrackingOpt {
    logits: AdamState,
    euler: AdamState,
    translation: AdamState,
    gamma: AdamState,
}

impl TrackingOpt {
    fn new(k: usize) -> Self {
        Self {
            logits: AdamState::new(k),
            euler: AdamState::new(3),
            translation: AdamState::new(3),
            gamma: AdamState::new(27),
        }
    }

    fn step(
        &mut self,
        p: &mut TrackingParams,
        g: &TrackingParams,
        rates: &StageRates,
        cfg: &FitConfig,
    ) -> Result<()> {
        let betas = (cfg.beta1, cfg.beta2);
        adam_step(
            &mut p.logits,
            &g.logits,
            &mut self.logits,
            rates.logits,
            betas,
            cfg.eps,
        )?;
        adam_step(
            &mut p.euler,
            &g.euler,
            &mut self.euler,
            rates.euler,
            betas,
            cfg.eps,
        )?;
        adam_step(
            &mut p.translation,
            &g.translation,
            &mut self.translation,
            rates.translation,
            betas,
            cfg.eps,
        )?;
        adam_step(
            &mut p.gamma.0,
            &g.gamma.0,
            &mut self.gamma,
            rates.gamma,
            betas,
            cfg.eps,
        )
    }
}

struct CorrectionOpt {
    states: Vec<AdamState>,
}

impl CorrectionOpt {
    fn new(c: &ModelCorrections) -> Self {
        Self {
            states: c.maps().map(|m| AdamState::new(m.len())).collect(),
        }
    }

    /// Maps of masked corrections only change on their mask support; elsewhere
    /// the gradient is exactly zero and a dense Adam update would be a no-op.
    fn step(
        &mut self,
        c: &mut ModelCorrections,
        g: &ModelCorrections,
        support: &MaskSupport,
        rates: &StageRates,
        cfg: &FitConfig,
    ) -> Result<()> {
        let k = c.num_blendshapes();
        let betas = (cfg.beta1, cfg.beta2);
        for (i, ((map, grad), state)) in
            c.maps_mut().zip(g.maps()).zip(&mut self.states).enumerate()
        {
            // maps() order: ΔS0, ΔSᵢ…, ΔR0, ΔRᵢ…, Rᵗ0
            let lr = if i <= k { rates.shape } else { rates.albedo };
            let texels = if (1..=k).contains(&i) {
                Some(&support.texels[i - 1])
            } else if (k + 2..2 * k + 2).contains(&i) {
                Some(&support.texels[i - k - 2])
            } else {
                None
            };
            match texels {
                Some(t) => {
                    adam_step_texels(map.data_mut(), grad.data(), state, t, lr, betas, cfg.eps)?
                }
                None => adam_step(map.data_mut(), grad.data(), state, lr, betas, cfg.eps)?,
            }
        }
        Ok(())
    }
}

/// [`adam_step`] restricted to the 3-channel texels listed in `texels`.
fn adam_step_texels(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    texels: &[usize],
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    let (b1, b2) = betas;
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for &k in texels {
        for j in 3 * k..3 * k + 3 {
            let g = grads[j];
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(j));
            }
            let m = &mut state.m[j];
            let v = &mut state.v[j];
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            params[j] -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
    Ok(())
}

fn landmark_stats(points: impl Iterator<Item = [f64; 2]>) -> Option<([f64; 2], f64)> {
    let pts: Vec<[f64; 2]> = points.collect();
    if pts.is_empty() {
        return None;
    }
    let n = pts.len() as f64;
    let c = [
        pts.iter().map(|p| p[0]).sum::<f64>() / n,
        pts.iter().map(|p| p[1]).sum::<f64>() / n,
    ];
    let spread = (pts
        .iter()
        .map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Some((c, spread))
}

/// Initial tracking parameters for one frame: near-neutral expression, pose
/// from landmark centroid and spread, ambient light matching the image.
pub fn initial_params(
    obs: &FrameObservation,
    template: &TemplateFaceModel,
    albedo: &UvMap,
    cam: &Camera,
    cfg: &FitConfig,
) -> Result<TrackingParams> {
    let idx = template.landmark_indices()?;
    let valid: Vec<usize> = (0..idx.len()).filter(|&j| obs.landmarks[j].valid).collect();
    let (c_img, s_img) = landmark_stats(valid.iter().map(|&j| obs.landmarks[j].pos))
        .ok_or(Error::NoValidLandmarks)?;
    let model: Vec<Vec3> = valid
        .iter()
        .map(|&j| template.s0.vertices[idx[j]])
        .collect();
    let (c_model, s_model) =
        landmark_stats(model.iter().map(|p| [p[0], p[1]])).ok_or(Error::NoValidLandmarks)?;
    let z_model = model.iter().map(|p| p[2]).sum::<f64>() / model.len() as f64;
    let depth = if s_img > 0.0 {
        cam.focal * s_model / s_img
    } else {
        600.0
    };
    let translation = [
        (c_img[0] - cam.cx) * depth / cam.focal - c_model[0],
        (c_img[1] - cam.cy) * depth / cam.focal - c_model[1],
        depth - z_model,
    ];

    // Mean intensity inside the landmark bounding box.
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for &j in &valid {
        let p = obs.landmarks[j].pos;
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let img = &obs.image;
    let (x0, x1) = (
        lo[0].max(0.0) as usize,
        (hi[0].max(0.0) as usize).min(img.width() - 1),
    );
    let (y0, y1) = (
        lo[1].max(0.0) as usize,
        (hi[1].max(0.0) as usize).min(img.height() - 1),
    );
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            sum += img.pixel(x, y).iter().sum::<f64>() / 3.0;
            count += 1;
        }
    }
    let intensity = if count > 0 { sum / count as f64 } else { 0.5 };
    let mean_albedo = albedo.data().iter().sum::<f64>() / albedo.len() as f64;
    let level = if mean_albedo > 0.0 {
        intensity / mean_albedo
    } else {
        1.0
    };
    let mut bands = [0.0; 9];
    bands[0] = level / SH_C0;

    Ok(TrackingParams {
        logits: vec![cfg.init_logit; template.num_blendshapes()],
        euler: cfg.init_euler,
        translation,
        gamma: ShCoeffs::monochrome(bands),
    })
}

/// Landmark-only pose refinement of every frame, independently.
pub fn landmark_warmup(
    objective: &Objective<'_>,
    shape: &[Vec3],
    params: &mut [TrackingParams],
    cfg: &FitConfig,
) -> Result<()> {
    let betas = (cfg.beta1, cfg.beta2);
    let results: Vec<Result<TrackingParams>> = params
        .par_iter()
        .enumerate()
        .map(|(n, p)| {
            let mut p = p.clone();
            let mut se = AdamState::new(3);
            let mut st = AdamState::new(3);
            for _ in 0..cfg.warmup_steps {
                let (_, ge, gt) = objective.landmark_pass(n, shape, &p)?;
                adam_step(&mut p.euler, &ge, &mut se, cfg.warmup.euler, betas, cfg.eps)?;
                adam_step(
                    &mut p.translation,
                    &gt,
                    &mut st,
                    cfg.warmup.translation,
                    betas,
                    cfg.eps,
                )?;
            }
            Ok(p)
        })
        .collect();
    for (p, r) in params.iter_mut().zip(results) {
        *p = r?;
    }
    Ok(())
}

/// Initial parameters for every frame, followed by the landmark warmup.
pub fn initialize_tracking(
    objective: &Objective<'_>,
    corrections: &ModelCorrections,
    cfg: &FitConfig,
) -> Result<Vec<TrackingParams>> {
    let albedo = {
        let mut a = corrections.r0_trainable.clone();
        a.add_scaled(&corrections.d_albedo_0, 1.0);
        a
    };
    let mut params = objective
        .frames
        .iter()
        .map(|f| initial_params(f, objective.template, &albedo, &objective.camera, cfg))
        .collect::<Result<Vec<_>>>()?;
    let rig = CorrectedRig::new(
        objective.template,
        corrections,
        objective.masks,
        &objective.sampler,
    )?;
    let shape = rig.evaluate(&ExpressionCoeffs::from_logits(&params[0].logits))?;
    landmark_warmup(objective, &shape, &mut params, cfg)?;
    Ok(params)
}

fn check_starvation(
    objective: &Objective<'_>,
    corrections: &ModelCorrections,
    params: &[TrackingParams],
) -> Result<()> {
    let rig = CorrectedRig::new(
        objective.template,
        corrections,
        objective.masks,
        &objective.sampler,
    )?;
    let albedo_rig = CorrectedAlbedo::new(objective.template, corrections, objective.masks)?;
    for (n, p) in params.iter().enumerate() {
        let coeffs = p.coeffs();
        let posed = apply_pose(&rig.evaluate(&coeffs)?, p.euler, p.translation);
        let render = raster::render_face(
            &posed,
            &albedo_rig.evaluate(&coeffs)?,
            &p.gamma,
            &objective.camera,
            objective.template,
        )
        .map_err(|e| {
            Error::MaskStarvation(format!("frame {n}: cannot render after warmup ({e})"))
        })?;
        let mask_sum: f64 = render.mask.data().iter().sum();
        if !(mask_sum > 0.0) {
            return Err(Error::MaskStarvation(format!(
                "frame {n}: rendered face covers {} pixels and none are valid skin; \
                 translation {:?}, rotation {:?}. Check the camera intrinsics and landmarks.",
                render.coverage.coverage_count(),
                p.translation,
                p.euler
            )));
        }
    }
    Ok(())
}

fn starvation(e: Error) -> Error {
    match e {
        Error::EmptyMask(n) => Error::MaskStarvation(format!(
            "frame {n}: the rendered face no longer overlaps any valid pixel"
        )),
        other => other,
    }
}

fn check_frames(frames: &[FrameObservation]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::Invalid("empty frame list".into()));
    }
    Ok(())
}

/// Stage 1 from an explicit starting point.
pub fn fit_joint_from(
    frames: &[FrameObservation],
    template: &TemplateFaceModel,
    masks: &AttentionMaskSet,
    camera: &Camera,
    config: &FitConfig,
    init_corrections: ModelCorrections,
    init_params: Vec<TrackingParams>,
) -> Result<FitResult> {
    check_frames(frames)?;
    config.validate()?;
    let objective = Objective::new(template, masks, frames, *camera, config.weights)?;
    if init_params.len() != frames.len() {
        return Err(Error::Dimension(format!(
            "{} initial parameter sets for {} frames",
            init_params.len(),
            frames.len()
        )));
    }
    init_corrections.check(template, masks)?;
    let mut corrections = init_corrections;
    let mut params = init_params;
    let mut copt = CorrectionOpt::new(&corrections);
    let mut topt: Vec<TrackingOpt> = (0..frames.len())
        .map(|_| TrackingOpt::new(template.num_blendshapes()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::with_capacity(config.stage1_steps);

    for step in 0..config.stage1_steps {
        let active: Option<Vec<usize>> = (frames.len() > config.frames_per_identity).then(|| {
            let mut a = sample(&mut rng, frames.len(), config.frames_per_identity).into_vec();
            a.sort_unstable();
            a
        });
        let (loss, grads) = objective
            .evaluate(&corrections, &params, LossMode::Joint, active.as_deref())
            .map_err(starvation)?;
        if step % 100 == 0 {
            log::debug!("stage 1 step {step}: total {:.6}", loss.total);
        }
        trace.push(loss);
        let rates = config
            .stage1
            .scaled(config.decay(step, config.stage1_steps));
        if step >= config.model_delay {
            let gc = grads
                .corrections
                .expect("joint mode produces model gradients");
            copt.step(&mut corrections, &gc, &objective.support, &rates, config)?;
        }
        let all: Vec<usize> = (0..frames.len()).collect();
        for &n in active.as_deref().unwrap_or(&all) {
            topt[n].step(&mut params[n], &grads.params[n], &rates, config)?;
        }
        if let Some(n) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::Invalid(format!(
                "frame {n} parameters diverged at step {step}"
            )));
        }
    }
    Ok(FitResult {
        corrections,
        params,
        trace,
    })
}

/// Stage 1: joint recovery of shared corrections and per-frame tracking
/// parameters, starting from zero corrections and a landmark warmup.
pub fn fit_joint(
    frames: &[FrameObservation],
    template: &TemplateFaceModel,
    masks: &AttentionMaskSet,
    camera: &Camera,
    config: &FitConfig,
) -> Result<FitResult> {
    check_frames(frames)?;
    config.validate()?;
    let corrections = ModelCorrections::zeros(template);
    let params = {
        let objective = Objective::new(template, masks, frames, *camera, config.weights)?;
        let params = initialize_tracking(&objective, &corrections, config)?;
        check_starvation(&objective, &corrections, &params)?;
        params
    };
    fit_joint_from(frames, template, masks, camera, config, corrections, params)
}

/// Stage 2: tracking parameters frozen, corrections refined without the
/// tracking regularizer. The stage-2 trace is appended to the input trace.
pub fn finetune_model(
    frames: &[FrameObservation],
    template: &TemplateFaceModel,
    masks: &AttentionMaskSet,
    camera: &Camera,
    fit: &FitResult,
    config: &FitConfig,
) -> Result<FitResult> {
    check_frames(frames)?;
    config.validate()?;
    let objective = Objective::new(template, masks, frames, *camera, config.weights)?;
    fit.corrections.check(template, masks)?;
    let mut corrections = fit.corrections.clone();
    let mut copt = CorrectionOpt::new(&corrections);
    let mut trace = fit.trace.clone();
    for step in 0..config.stage2_steps {
        let (loss, grads) = objective
            .evaluate(&corrections, &fit.params, LossMode::Finetune, None)
            .map_err(starvation)?;
        if step % 100 == 0 {
            log::debug!("stage 2 step {step}: total {:.6}", loss.total);
        }
        trace.push(loss);
        let gc = grads
            .corrections
            .expect("finetune mode produces model gradients");
        let rates = config
            .stage2
            .scaled(config.decay(step, config.stage2_steps));
        copt.step(&mut corrections, &gc, &objective.support, &rates, config)?;
    }
    Ok(FitResult {
        corrections,
        params: fit.params.clone(),
        trace,
    })
}

/// Per-frame tracking against a fixed model. Frames are optimized
/// independently; `init` skips the initialization and warmup.
pub fn track(
    frames: &[FrameObservation],
    template: &TemplateFaceModel,
    masks: &AttentionMaskSet,
    corrections: &ModelCorrections,
    camera: &Camera,
    config: &FitConfig,
    init: Option<&[TrackingParams]>,
) -> Result<Vec<TrackingParams>> {
    Ok(track_with_trace(frames, template, masks, corrections, camera, config, init)?.0)
}

pub fn track_with_trace(
    frames: &[FrameObservation],
    template: &TemplateFaceModel,
    masks: &AttentionMaskSet,
    corrections: &ModelCorrections,
    camera: &Camera,
    config: &FitConfig,
    init: Option<&[TrackingParams]>,
) -> Result<(Vec<TrackingParams>, Vec<LossBreakdown>)> {
    check_frames(frames)?;
    config.validate()?;
    let objective = Objective::new(template, masks, frames, *camera, config.weights)?;
    corrections.check(template, masks)?;
    let mut params = match init {
        Some(p) if p.len() == frames.len() => p.to_vec(),
        Some(p) => {
            return Err(Error::Dimension(format!(
                "{} initial parameter sets for {} frames",
                p.len(),
                frames.len()
            )))
        }
        None => {
            let p = initialize_tracking(&objective, corrections, config)?;
            check_starvation(&objective, corrections, &p)?;
            p
        }
    };
    let mut topt: Vec<TrackingOpt> = (0..frames.len())
        .map(|_| TrackingOpt::new(template.num_blendshapes()))
        .collect();
    let mut trace = Vec::with_capacity(config.track_steps);
    for step in 0..config.track_steps {
        let (loss, grads) = objective
            .evaluate(corrections, &params, LossMode::Tracking, None)
            .map_err(starvation)?;
        trace.push(loss);
        let rates = config.stage1.scaled(config.decay(step, config.track_steps));
        for (n, g) in grads.params.iter().enumerate() {
            topt[n].step(&mut params[n], g, &rates, config)?;
        }
    }
    Ok((params, trace))
}

/// Model-space shape, camera-frame shape and render for one parameter set.
pub struct Reconstruction {
    pub shape: Vec<Vec3>,
    pub posed: Vec<Vec3>,
    pub render: RenderOutput,
}

pub fn reconstruct(
    template: &TemplateFaceModel,
    corrections: &ModelCorrections,
    masks: &AttentionMaskSet,
    params: &TrackingParams,
    camera: &Camera,
) -> Result<Reconstruction> {
    let sampler = template.sampler()?;
    let rig = CorrectedRig::new(template, corrections, masks, &sampler)?;
    let albedo_rig = CorrectedAlbedo::new(template, corrections, masks)?;
    reconstruct_with(template, &rig, &albedo_rig, params, camera)
}

fn reconstruct_with(
    template: &TemplateFaceModel,
    rig: &CorrectedRig,
    albedo_rig: &CorrectedAlbedo,
    params: &TrackingParams,
    camera: &Camera,
) -> Result<Reconstruction> {
    let coeffs = params.coeffs();
    let shape = rig.evaluate(&coeffs)?;
    let posed = apply_pose(&shape, params.euler, params.translation);
    let render = raster::render_face(
        &posed,
        &albedo_rig.evaluate(&coeffs)?,
        &params.gamma,
        camera,
        template,
    )?;
    Ok(Reconstruction {
        shape,
        posed,
        render,
    })
}

/// What a retarget copies from the source besides expression.
#[derive(Clone, Debug, PartialEq)]
pub struct RetargetOptions {
    pub transfer_pose: bool,
    pub transfer_lighting: bool,
    /// Pose used when the source pose is not transferred.
    pub euler: Vec3,
    pub translation: Vec3,
    /// Lighting used when the source lighting is not transferred.
    pub gamma: ShCoeffs,
}

impl Default for RetargetOptions {
    fn default() -> Self {
        Self {
            transfer_pose: false,
            transfer_lighting: false,
            euler: [0.0; 3],
            translation: [0.0, 0.0, 600.0],
            gamma: ShCoeffs::ambient(1.0),
        }
    }
}

pub struct RetargetResult {
    /// Target model-space shape per frame.
    pub shapes: Vec<Vec<Vec3>>,
    /// Parameters used to render each frame on the target.
    pub params: Vec<TrackingParams>,
    pub frames: Vec<Image>,
}

/// Drives a target rig with source expression coefficients.
pub fn retarget(
    source_params: &[TrackingParams],
    target_template: &TemplateFaceModel,
    target_corrections: &ModelCorrections,
    target_masks: &AttentionMaskSet,
    camera: &Camera,
    options: &RetargetOptions,
) -> Result<RetargetResult> {
    let k = target_template.num_blendshapes();
    if let Some(p) = source_params.iter().find(|p| p.logits.len() != k) {
        return Err(Error::Dimension(format!(
            "source has {} blendshape coefficients, target rig has {k}",
            p.logits.len()
        )));
    }
    let sampler = target_template.sampler()?;
    let rig = CorrectedRig::new(target_template, target_corrections, target_masks, &sampler)?;
    let albedo_rig = CorrectedAlbedo::new(target_template, target_corrections, target_masks)?;
    let mut out = RetargetResult {
        shapes: Vec::with_capacity(source_params.len()),
        params: Vec::with_capacity(source_params.len()),
        frames: Vec::with_capacity(source_params.len()),
    };
    for src in source_params {
        let params = TrackingParams {
            logits: src.logits.clone(),
            euler: if options.transfer_pose {
                src.euler
            } else {
                options.euler
            },
            translation: if options.transfer_pose {
                src.translation
            } else {
                options.translation
            },
            gamma: if options.transfer_lighting {
                src.gamma
            } else {
                options.gamma
            },
        };
        let rec = reconstruct_with(target_template, &rig, &albedo_rig, &params, camera)?;
        out.shapes.push(rec.shape);
        out.frames.push(rec.render.color);
        out.params.push(params);
    }
    Ok(out)
}
