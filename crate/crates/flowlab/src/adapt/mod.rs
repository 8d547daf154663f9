//! Two-stage fine-tuning: EWC-gated pretraining on conditional images
//! (stage 1), then low-rank-adapter fine-tuning against the frozen base with
//! alignment losses (stage 2).

pub mod ewc;
pub mod lora;
pub mod stage1;
pub mod stage2;

pub use ewc::{empirical_fisher, ewc_penalty, EwcState};
pub use lora::{lora_forward, lora_forward_traced, AdapterGrads, AdapterSet, LoraField, LoraModel};
pub use stage1::{
    composite_stage1_loss, composite_stage1_loss_grad, stage1_diff_loss, stage1_diff_loss_grad,
    stage1_forward_noise, stage1_reconstruct, stage1_refined_step, stage1_reverse_chain,
    stage1_reverse_step, stage1_train, stage1_tweedie_refine, stage_condition, CompositeComponents,
    Stage1Config, StageBatch, StageWeights, STAGE_COND_DIM,
};
pub use stage2::{
    consistency_losses, stage2_generate, stage2_loss_grad, stage2_loss_grad_corrected, stage2_train,
    Stage2Components, Stage2Config, Stage2Weights, StepPair, SurrogateCorrection,
};
