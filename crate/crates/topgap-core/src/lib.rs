//! Top-k pooled CNN with an l1 feature-sparsity penalty, plus the tooling
//! needed to study it: a deterministic autodiff core, an FPN-style model,
//! white/black-box attacks, receptive-field and saliency analysis, and a
//! synthetic shapes dataset with exact masks.
//!
//! Everything is seeded and single-precision by default; f64 exists for
//! gradient verification. Reruns with the same seeds reproduce results
//! bit for bit, independent of the rayon thread count.

pub mod analysis;
pub mod attacks;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod model;
pub(crate) mod seeds;

pub use analysis::{
    cam_iou, cam_sparsity, class_cam, erf_distance, erf_gradient_map, gradcam, k_sweep, CamLayer,
    CamMethod, CamResult, ErfReport, GradMap, OutLoc, SweepConfig, SweepReport,
};
pub use data::{load_checkpoint, save_checkpoint, Dataset, Sample};
pub use diffcore::{
    adam_step, AdamHyper, AdamState, BnMode, BnRunning, NodeId, PadMode, Scalar, Tape, Tensor,
};
pub use error::{Error, Result};
pub use model::{
    build_model, cam_mode, forward, model_loss, predict, train_model, BackboneConfig, Cam,
    ForwardOpts, ForwardPass, HeadConfig, Mode, ModelParams, TrainConfig, TrainLog,
};
