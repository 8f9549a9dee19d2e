//! Checkpoint format, byte-level tokenizer, and corpus loading.

mod checkpoint;
mod corpus;
mod tokenizer;

pub use checkpoint::{
    generate_random_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint,
    write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use corpus::{load_corpus, load_corpus_lenient, read_corpus, CorpusEntry};
pub use tokenizer::{decode, encode, encode_continuation, token_display, BOS, EOS, PAD, RESERVED};
