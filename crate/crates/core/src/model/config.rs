use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellType {
    Lstm,
    Gru,
}

impl CellType {
    pub fn gates(self) -> usize {
        match self {
            CellType::Lstm => 4,
            CellType::Gru => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionType {
    #[default]
    Dot,
}

/// Architecture hyperparameters.
///
/// `hidden_size` is the decoder width and the width of the concatenated
/// bidirectional encoder output; each encoder direction has `hidden_size / 2`
/// units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seq2SeqConfig {
    pub bpe_merges: usize,
    pub embed_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub cell_type: CellType,
    pub attention: AttentionType,
    pub rnn_dropout_inputs: f64,
    pub rnn_dropout_states: f64,
    pub embed_dropout: f64,
    pub max_seq_len: usize,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Self::large()
    }
}

impl Seq2SeqConfig {
    /// Grid values searched for the architecture sweep.
    pub const GRID_BPE: [usize; 9] = [30000, 20000, 10000, 7500, 5000, 1000, 750, 500, 250];
    pub const GRID_EMBED: [usize; 4] = [512, 256, 128, 64];
    pub const GRID_HIDDEN: [usize; 4] = [512, 256, 128, 64];
    pub const GRID_LAYERS: [usize; 2] = [2, 1];

    /// 10k BPE, 256 embed/hidden, one layer, LSTM.
    pub fn large() -> Self {
        Self {
            bpe_merges: 10000,
            embed_size: 256,
            hidden_size: 256,
            num_layers: 1,
            cell_type: CellType::Lstm,
            attention: AttentionType::Dot,
            rnn_dropout_inputs: 0.1,
            rnn_dropout_states: 0.1,
            embed_dropout: 0.0,
            max_seq_len: 100,
        }
    }

    /// Same as [`large`](Self::large) with a 500-merge BPE vocabulary.
    pub fn small() -> Self {
        Self {
            bpe_merges: 500,
            ..Self::large()
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.rnn_dropout_inputs = p;
        self.rnn_dropout_states = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden_size < 2 || !self.hidden_size.is_multiple_of(2) {
            return bad("hidden_size must be even and at least 2");
        }
        if self.embed_size == 0 || self.num_layers == 0 || self.max_seq_len == 0 {
            return bad("embed_size, num_layers and max_seq_len must be positive");
        }
        for p in [
            self.rnn_dropout_inputs,
            self.rnn_dropout_states,
            self.embed_dropout,
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad("dropout rates must lie in [0, 1)");
            }
        }
        Ok(())
    }

    pub fn encoder_direction_size(&self) -> usize {
        self.hidden_size / 2
    }
}

/// Closed-form parameter total for a configuration and vocabulary sizes.
pub fn count_params(config: &Seq2SeqConfig, src_vocab: usize, trg_vocab: usize) -> usize {
    let (e, h, g) = (
        config.embed_size,
        config.hidden_size,
        config.cell_type.gates(),
    );
    let d = h / 2;
    let layers = config.num_layers;
    let rnn = |input: usize, units: usize| g * units * (input + units + 1);

    let embeddings = (src_vocab + trg_vocab) * e;
    let encoder = 2 * rnn(e, d) + (layers - 1) * 2 * rnn(h, d);
    let decoder = rnn(e, h) + (layers - 1) * rnn(h, h);
    let init = layers * (d * h + h);
    let attention = 2 * h * h + h;
    let output = h * trg_vocab + trg_vocab;
    embeddings + encoder + decoder + init + attention + output
}
