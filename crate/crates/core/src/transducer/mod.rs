//! HAT transducer decoder: stateless prediction network, joint network,
//! exact lattice loss with an enumeration oracle, greedy decoding and edit
//! distance scoring.

mod config;
mod decode;
mod decoder;
mod loss;
mod wer;

pub use config::DecoderConfig;
pub use decode::{greedy_decode, DEFAULT_MAX_SYMBOLS_PER_FRAME};
pub use decoder::{decoder_specs, joint_hat, joint_lattice, predict, prediction_contexts, HatOutput};
pub use loss::{
    alignment_count, lattice_loss, loss_bruteforce, transducer_loss, LossResult, MAX_ENUMERATED_ALIGNMENTS,
};
pub use wer::{wer, ErrorCounts};
