//! A tiny decoder-only causal LM over a synthetic grid-QA task, with eager
//! attention capture and per-step attention-gradient extraction.

pub mod data;
pub mod model;
pub mod trace;
pub mod train;
pub mod vocab;

pub use data::{encode, gen_encoded, gen_gridqa, read_dataset, write_dataset, EncodedSample, GridQASample};
pub use model::{
    answer_argmax, build_forward, forward_logits, generate, read_lm, write_lm, AttnPerturb, ForwardPass,
    LMConfig, LmParams,
};
pub use trace::{
    capture_prompt, capture_step, capture_step_perturbed, read_traces, write_traces, AttentionTrace,
    HeadAttention, LayerAttention, StepCapture,
};
pub use train::{grid_accuracy, infer_vocab, train_lm, TrainOptions, TrainReport};
pub use vocab::{PromptLayout, Vocab, N_INSTR, N_SYS};
