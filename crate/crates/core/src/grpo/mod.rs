//! Group-relative policy optimization with tri-partition reward shaping.

pub mod ablation;
pub mod adam;
pub mod advantages;
pub mod surrogate;
pub mod train;

pub use ablation::{run_ablation, variant_config, AblationRow, Variant, VARIANTS};
pub use adam::{apply_update, AdamMoments, AdamState};
pub use advantages::advantages;
pub use surrogate::{clipped_term, surrogate_loss, surrogate_loss_with, GroupBatch, SurrogateOutput};
pub use train::{
    minibatch, train, train_with, ClassRates, StepView, Toggles, TrainConfig, TrainFailure, TrainOutcome,
    UpdateReport,
};
