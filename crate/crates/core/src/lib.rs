//! Personalized blendshape face models.
//!
//! A generic template rig (neutral mesh, blendshapes, UV albedo) is corrected
//! per identity with UV-space offset maps, rendered with a differentiable
//! rasterizer under spherical-harmonics lighting, and fitted to video frames
//! by gradient descent.

pub mod error;
pub mod eval;
pub mod fit;
pub mod grid;
pub mod io;
pub mod losses;
pub mod math;
pub mod mesh;
pub mod model;
pub mod raster;
pub mod shading;
pub mod synth;

pub use error::{Error, Result};
pub use eval::{coefficient_mae, compute_nme, EvalReport};
pub use fit::{
    adam_step, finetune_model, fit_joint, fit_joint_from, reconstruct, retarget, track,
    track_with_trace, AdamState, FitConfig, FitResult, FrameObservation, RetargetOptions,
    StageRates, TrackingParams,
};
pub use grid::{Grid, Image, UvMap};
pub use io::{RunConfig, SceneBundle};
pub use losses::{Landmark, LossBreakdown, LossMode, LossTerms, LossWeights};
pub use mesh::{load_obj, TriMesh};
pub use model::{compute_attention_masks, AttentionMaskSet, ModelCorrections, TemplateFaceModel};
pub use raster::{render_face, RenderOutput};
pub use shading::{Camera, ShCoeffs};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/rendering.md")]
    mod rendering {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/files.md")]
    mod files {}
}
