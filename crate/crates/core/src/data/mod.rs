//! Tokenization and corpus packing.

mod corpus;
mod pack;
mod tokenizer;

pub use corpus::{read_documents, tokenize_documents};
pub use pack::{pack, PackedStream, ShiftedBatch, TokenBatch};
pub use tokenizer::{TokenizerConfig, TokenizerHandle, BYTE_END_ID, BYTE_PAD_ID, BYTE_UNK_ID, BYTE_VOCAB_SIZE};
