//! Codebook optimization: Adam, the sharpness schedule, blockwise layer
//! reconstruction, and end-to-end distillation.

mod adam;
mod blockwise;
mod e2e;
mod layer;
mod schedule;

pub use adam::{adam_step, AdamState};
pub use blockwise::{
    blockwise_grad, blockwise_loss, optimize_blockwise, optimize_blockwise_with_base,
    BlockwiseProblem, BlockwiseRun, LossParts,
};
pub use e2e::{
    build_student, e2e_finetune, hard_kl, kl_loss, E2eLoss, E2eProblem, E2eRun, Layer, LayerQuant,
    StudentConfig, TinyNet,
};
pub use layer::{LayerState, SoftQuantLayer};
pub use schedule::{anneal_beta, BetaSchedule, FinetuneConfig};
