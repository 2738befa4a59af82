//! The box network: maps an image embedding to an axis-aligned region, plus the
//! losses and training loop that shape those regions.

pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod train;

pub use geometry::{corners_from_raw, LatentBox, OrderedCorners};
pub use gradcheck::{check_gradient, GradientCheck};
pub use loss::{
    backward, box_volume_loss, class_consistency_loss, combined_loss, Batch, CombinedLoss,
    LossConfig, LossParts, TextAnchors,
};
pub use model::{Activation, BoxNetModel};
pub use train::{corner_accuracy, train_stage1, EpochRecord, Stage1Config, Stage1Outcome, TrainTrace};
