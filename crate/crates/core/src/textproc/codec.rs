use std::path::Path;

use super::{build_vocab, learn_bpe, Bitext, BpeModel, Sentence, Vocabulary};
use crate::error::{io_err, Result};

/// BPE models and vocabularies for both sides of a translation direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub src_bpe: BpeModel,
    pub trg_bpe: BpeModel,
    pub src_vocab: Vocabulary,
    pub trg_vocab: Vocabulary,
}

impl Codec {
    /// Learns `merges` BPE merges per side and builds the vocabularies from
    /// the segmented training corpus.
    pub fn fit(train: &Bitext, merges: usize, min_count: usize) -> Result<Self> {
        let src_bpe = learn_bpe(&train.sources(), merges)?;
        let trg_bpe = learn_bpe(&train.targets(), merges)?;
        let seg = |bpe: &BpeModel, side: Vec<Sentence>| {
            side.iter().map(|s| bpe.apply(s)).collect::<Vec<_>>()
        };
        let src_vocab = build_vocab(&seg(&src_bpe, train.sources()), min_count);
        let trg_vocab = build_vocab(&seg(&trg_bpe, train.targets()), min_count);
        Ok(Self {
            src_bpe,
            trg_bpe,
            src_vocab,
            trg_vocab,
        })
    }

    pub fn encode_source(&self, sentence: &[String]) -> Vec<usize> {
        self.src_vocab.encode(&self.src_bpe.apply(sentence))
    }

    pub fn encode_target(&self, sentence: &[String]) -> Vec<usize> {
        self.trg_vocab.encode(&self.trg_bpe.apply(sentence))
    }

    /// Ids back to words with BPE reversed.
    pub fn decode_target(&self, ids: &[usize]) -> Sentence {
        self.trg_bpe.reverse(&self.trg_vocab.decode(ids))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.src_bpe.save(&dir.join("src.bpe"))?;
        self.trg_bpe.save(&dir.join("trg.bpe"))?;
        self.src_vocab.save(&dir.join("src.vocab"))?;
        self.trg_vocab.save(&dir.join("trg.vocab"))
    }

    pub fn load(dir: &Path, min_count: usize) -> Result<Self> {
        Ok(Self {
            src_bpe: BpeModel::load(&dir.join("src.bpe"))?,
            trg_bpe: BpeModel::load(&dir.join("trg.bpe"))?,
            src_vocab: Vocabulary::load(&dir.join("src.vocab"), min_count)?,
            trg_vocab: Vocabulary::load(&dir.join("trg.vocab"), min_count)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(s: &str) -> Sentence {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn round_trip_through_ids() {
        let bt = Bitext::new(
            "t",
            vec![
                (sent("abc abd"), sent("xyz xy")),
                (sent("ab"), sent("zz xyz")),
            ],
        )
        .unwrap();
        let codec = Codec::fit(&bt, 3, 1).unwrap();
        let mut ids = codec.encode_target(&sent("xyz xy"));
        ids.push(super::super::EOS);
        assert_eq!(codec.decode_target(&ids), sent("xyz xy"));
        let dir = tempfile::tempdir().unwrap();
        codec.save(dir.path()).unwrap();
        assert_eq!(Codec::load(dir.path(), 1).unwrap(), codec);
    }
}
