//! Corpora, BPE subword segmentation, vocabularies and corpus statistics.

mod bitext;
mod bpe;
mod codec;
mod vocab;

pub use bitext::{corpus_stats, read_lines, write_lines, Bitext, CorpusStats, Sentence};
pub use bpe::{learn_bpe, reverse_bpe, BpeModel, DEFAULT_MARKER};
pub use codec::Codec;
pub use vocab::{build_vocab, Vocabulary, BOS, EOS, NUM_SPECIALS, PAD, UNK};
