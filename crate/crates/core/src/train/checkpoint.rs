use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::decode::{translate_corpus, DecodeConfig};
use crate::error::{io_err, Result};
use crate::model::{Seq2SeqConfig, Seq2SeqParams};
use crate::textproc::{Bitext, Codec, Sentence};

pub const CONFIG_FILE: &str = "config.json";
pub const BEST_PARAMS: &str = "params.best.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: Seq2SeqConfig,
    pub train: TrainConfig,
    pub src_vocab: usize,
    pub trg_vocab: usize,
    pub best_checkpoint: usize,
}

/// A trained model with the text processing it was trained with.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Seq2SeqParams,
    pub codec: Codec,
}

/// Word-level translations, one candidate list per input line.
#[derive(Clone, Debug, PartialEq)]
pub struct Translations {
    pub nbest: Vec<Vec<Sentence>>,
    pub failures: usize,
    pub truncated: usize,
}

impl Translations {
    /// Best candidate per line, empty where decoding failed.
    pub fn best(&self) -> Vec<Sentence> {
        self.nbest
            .iter()
            .map(|c| c.first().cloned().unwrap_or_default())
            .collect()
    }
}

impl Checkpoint {
    /// Writes `config.json`, the codec files and `params.best.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&self.meta)?).map_err(io_err(&path))?;
        self.codec.save(dir)?;
        self.params.save(&dir.join(BEST_PARAMS))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let meta: CheckpointMeta =
            serde_json::from_str(&std::fs::read_to_string(&path).map_err(io_err(&path))?)?;
        let codec = Codec::load(dir, meta.train.min_count)?;
        let params = Seq2SeqParams::load(
            &dir.join(BEST_PARAMS),
            &meta.model,
            meta.src_vocab,
            meta.trg_vocab,
        )?;
        Ok(Self {
            meta,
            params,
            codec,
        })
    }

    /// Beam-search translation of word-level sentences; BPE is applied to the
    /// input and reversed on the output.
    pub fn translate(&self, sentences: &[Sentence], config: &DecodeConfig) -> Result<Translations> {
        let sources: Vec<Vec<usize>> = sentences
            .iter()
            .map(|s| self.codec.encode_source(s))
            .collect();
        let out = translate_corpus(&self.params, &sources, config)?;
        let nbest = out
            .outputs
            .iter()
            .map(|c| c.iter().map(|ids| self.codec.decode_target(ids)).collect())
            .collect();
        Ok(Translations {
            nbest,
            failures: out.failures,
            truncated: out.truncated,
        })
    }

    /// Unsmoothed per-subword perplexity over a bitext.
    pub fn perplexity(&self, bitext: &Bitext) -> Result<f64> {
        let pairs: Vec<_> = bitext
            .pairs
            .iter()
            .filter(|(s, _)| !s.is_empty())
            .map(|(s, t)| (self.codec.encode_source(s), self.codec.encode_target(t)))
            .collect();
        super::perplexity(&self.params, &pairs)
    }
}
