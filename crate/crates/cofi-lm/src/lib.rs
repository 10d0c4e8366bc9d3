//! Language modelling over multi-scale codec tokens.
//!
//! Text is byte-level BPE; speech tokens of each scale occupy their own id
//! range. Two generation schemes are provided: a single model producing all
//! scales as one chain (coarse first), and a stack of per-scale models where
//! each finer model is conditioned on the last-layer hidden states of the
//! previous one. Multi-stream scales use the delay pattern.

mod attention;
mod delay;
mod error;
mod generate;
mod icl;
mod layout;
mod model;
mod sampler;
mod train;
mod vocab;

pub use attention::{attention_aggregate, ATTN_CLIP, ATTN_SCALE};
pub use delay::{delay_decode, delay_encode, DelayGrid};
pub use error::{LmError, Result};
pub use generate::{generate_cos, generate_sos, GenerateOptions};
pub use icl::{build_icl_prompt, IclPrompt};
pub use layout::{cos_build_sequence, cos_example, sos_condition, sos_example, FlatSequence, LmExample, SosCondition};
pub use model::{Additive, HiddenStates, LmConfig, LmInput, LmModel, LmOutput};
pub use sampler::{apply_repetition_penalty, sample_next, SamplerConfig};
pub use train::{evaluate_loss, teacher_forced_accuracy, LmTrainConfig, LmTrainer, StepStats};
pub use vocab::{bpe_train, Vocabulary};
