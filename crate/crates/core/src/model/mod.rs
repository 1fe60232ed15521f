//! Attentional RNN encoder-decoder: bidirectional encoder, unidirectional
//! decoder, dot attention over the concatenated encoder states.

mod config;
mod net;
mod params;

pub use config::{count_params, AttentionType, CellType, Seq2SeqConfig};
pub use net::{
    grad_check_batch, Batch, DecoderState, DropoutCtx, EncoderOutput, ModelVars, StepOutput,
};
pub use params::{init_params, Seq2SeqParams};
