//! Evaluation metrics: landmark NME, coefficient MAE and per-frame losses.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fit::{reconstruct, FrameObservation, Objective, TrackingParams};
use crate::losses::{Landmark, LossBreakdown, LossMode, LossWeights};
use crate::math::Vec2;
use crate::model::{AttentionMaskSet, ModelCorrections, TemplateFaceModel};
use crate::shading::{project_landmarks, Camera};

/// Mean distance over valid points divided by `√(w·h)` of `bbox`.
pub fn compute_nme(pred: &[Vec2], gt: &[Landmark], bbox: (f64, f64)) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "{} predicted vs {} ground-truth landmarks",
            pred.len(),
            gt.len()
        )));
    }
    if !(bbox.0 > 0.0 && bbox.1 > 0.0) {
        return Err(Error::Invalid(format!(
            "bounding box must be positive, got {bbox:?}"
        )));
    }
    let (sum, n) = pred
        .iter()
        .zip(gt)
        .filter(|(_, g)| g.valid)
        .fold((0.0, 0usize), |(s, n), (p, g)| {
            (s + (p[0] - g.pos[0]).hypot(p[1] - g.pos[1]), n + 1)
        });
    if n == 0 {
        return Err(Error::NoValidLandmarks);
    }
    Ok(sum / n as f64 / (bbox.0 * bbox.1).sqrt())
}

/// Width and height of the box around the valid points.
pub fn landmark_bbox(points: &[Landmark]) -> Result<(f64, f64)> {
    let mut valid = points.iter().filter(|l| l.valid).map(|l| l.pos).peekable();
    let first = *valid.peek().ok_or(Error::NoValidLandmarks)?;
    let (lo, hi) = valid.fold((first, first), |(lo, hi), p| {
        (
            [lo[0].min(p[0]), lo[1].min(p[1])],
            [hi[0].max(p[0]), hi[1].max(p[1])],
        )
    });
    Ok((hi[0] - lo[0], hi[1] - lo[1]))
}

/// Mean of `|pred − gt|` over all frames and coefficients.
pub fn coefficient_mae(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "{} predicted vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (f, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Dimension(format!(
                "frame {f}: {} vs {} coefficients",
                p.len(),
                g.len()
            )));
        }
        sum += p.iter().zip(g).map(|(a, b)| (a - b).abs()).sum::<f64>();
        n += p.len();
    }
    if n == 0 {
        return Err(Error::Invalid("no coefficients to compare".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct FrameReport {
    pub loss: LossBreakdown,
    /// Mean masked RGB distance.
    pub photometric_error: f64,
    pub nme: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    /// Joint objective over all frames.
    pub loss: LossBreakdown,
    pub frames: Vec<FrameReport>,
    pub photometric_error: f64,
    pub nme: f64,
    pub coefficient_mae: Option<f64>,
}

impl EvalReport {
    /// The loss terms and `total` at the top level, followed by the metrics.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = self.loss.to_json();
        let obj = v
            .as_object_mut()
            .expect("breakdown serializes to an object");
        obj.insert("photometric_error".into(), self.photometric_error.into());
        obj.insert("nme".into(), self.nme.into());
        obj.insert("coefficient_mae".into(), self.coefficient_mae.into());
        obj.insert(
            "frames".into(),
            self.frames
                .iter()
                .map(|f| {
                    let mut v = f.loss.to_json();
                    v["photometric_error"] = f.photometric_error.into();
                    v["nme"] = f.nme.into();
                    v
                })
                .collect(),
        );
        v
    }
}

/// Scores `params` against `frames`. Each frame's loss includes the
/// identity-level terms, which do not depend on the frame.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    template: &TemplateFaceModel,
    masks: &AttentionMaskSet,
    corrections: &ModelCorrections,
    frames: &[FrameObservation],
    params: &[TrackingParams],
    camera: &Camera,
    weights: &LossWeights,
    gt: Option<&[TrackingParams]>,
) -> Result<EvalReport> {
    let objective = Objective::new(template, masks, frames, *camera, *weights)?;
    let (loss, _) = objective.evaluate(corrections, params, LossMode::Joint, None)?;
    let lm_idx = template.landmark_indices()?;
    let mut reports = Vec::with_capacity(frames.len());
    for (n, (f, p)) in frames.iter().zip(params).enumerate() {
        let (frame_loss, _) =
            objective.evaluate(corrections, params, LossMode::Joint, Some(&[n]))?;
        let rec = reconstruct(template, corrections, masks, p, camera)?;
        let pred = project_landmarks(&rec.posed, lm_idx, camera)?;
        reports.push(FrameReport {
            loss: frame_loss,
            photometric_error: frame_loss.detail.photometric_color,
            nme: compute_nme(&pred, &f.landmarks, landmark_bbox(&f.landmarks)?)?,
        });
    }
    let count = reports.len() as f64;
    let coefficient_mae = match gt {
        Some(gt) => {
            let w = |ps: &[TrackingParams]| ps.iter().map(|p| p.coeffs().w).collect::<Vec<_>>();
            Some(coefficient_mae(&w(params), &w(gt))?)
        }
        None => None,
    };
    Ok(EvalReport {
        loss,
        photometric_error: reports.iter().map(|r| r.photometric_error).sum::<f64>() / count,
        nme: reports.iter().map(|r| r.nme).sum::<f64>() / count,
        frames: reports,
        coefficient_mae,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_points(offset: f64) -> (Vec<Vec2>, Vec<Landmark>) {
        let gt: Vec<Landmark> = (0..68)
            .map(|i| Landmark::new((i % 10) as f64 * 10.0, (i / 10) as f64 * 10.0))
            .collect();
        let pred = gt.iter().map(|l| [l.pos[0] + offset, l.pos[1]]).collect();
        (pred, gt)
    }

    #[test]
    fn nme_of_exact_prediction_is_zero() {
        let (pred, gt) = grid_points(0.0);
        assert_eq!(compute_nme(&pred, &gt, (100.0, 100.0)).unwrap(), 0.0);
    }

    #[test]
    fn uniform_offset_over_box_side() {
        let (pred, gt) = grid_points(5.0);
        assert!((compute_nme(&pred, &gt, (100.0, 100.0)).unwrap() - 0.05).abs() < 1e-15);
        assert!((compute_nme(&pred, &gt, (200.0, 200.0)).unwrap() - 0.025).abs() < 1e-15);
    }

    #[test]
    fn invalid_points_are_skipped() {
        let (mut pred, mut gt) = grid_points(5.0);
        pred[3] = [1e6, 1e6];
        gt[3].valid = false;
        assert!((compute_nme(&pred, &gt, (100.0, 100.0)).unwrap() - 0.05).abs() < 1e-15);
        gt.iter_mut().for_each(|l| l.valid = false);
        assert!(matches!(
            compute_nme(&pred, &gt, (1.0, 1.0)),
            Err(Error::NoValidLandmarks)
        ));
    }

    #[test]
    fn bbox_spans_valid_points() {
        let (_, mut gt) = grid_points(0.0);
        gt.push(Landmark {
            pos: [-500.0, 0.0],
            valid: false,
        });
        assert_eq!(landmark_bbox(&gt).unwrap(), (90.0, 60.0));
    }

    #[test]
    fn mae_constant_offset() {
        let gt = vec![vec![0.2, 0.5], vec![0.0, 0.9]];
        let pred: Vec<Vec<f64>> = gt
            .iter()
            .map(|f| f.iter().map(|w| w + 0.1).collect())
            .collect();
        assert!((coefficient_mae(&pred, &gt).unwrap() - 0.1).abs() < 1e-12);
        assert!(coefficient_mae(&pred[..1], &gt).is_err());
        assert!(coefficient_mae(&[vec![0.0]], &[vec![0.0, 1.0]]).is_err());
    }
}
