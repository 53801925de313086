//! Desk-scale masked-diffusion transformer: bidirectional forward pass,
//! masked cross-entropy training, blockwise decoding with confidence
//! remasking, and a fake-quantized execution mode.

mod config;
mod decode;
mod fakequant;
mod forward;
mod grad;
mod train;
mod weights;

pub use config::ModelConfig;
pub use decode::{
    capture_activations, decode, decode_with_logits, CapturedStep, DecodeSchedule, DecodeSession,
    DecodeState, StepRecord,
};
pub use fakequant::{fake_quantize_scaled, ActQuantizer};
pub use forward::{forward, logits, ForwardTrace, LayerTrace, NORM_EPS};
pub use grad::{masked_ce_grad, masked_ce_loss, masked_ce_loss_with_mask, sample_mask};
pub use train::{
    heldout_loss, parse_token_lines, read_token_lines, train_from, train_toy, write_token_lines,
    SyntheticLanguage, TrainOptions,
};
pub use weights::{
    layer_name, InputSite, LayerWeights, Linear, ModelWeights, CHECKPOINT_MAGIC, HEAD_INPUT_SITE,
};

pub(crate) use fakequant::quantize_scaled;
