//! Tokenization, pack-and-separate, and the transformer encoder.

mod encoder;
mod pack;
mod vocab;

pub use encoder::{Dropout, Encoder, EncoderConfig};
pub use pack::{pack, pack_ids, separate, PackedInput, SeparatedStates};
pub use vocab::{words, Vocabulary, CLS, PAD, SEP, UNK};
