use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::batching::BatchStream;
use super::checkpoint::{Checkpoint, CheckpointMeta, BEST_PARAMS};
use super::optim::{adam_update, clip_gradients, AdamConfig};
use super::state::{lr_schedule_step, ScheduleEvent, TrainState};
use crate::decode::DecodeConfig;
use crate::error::{io_err, Error, Result};
use crate::eval::corpus_bleu;
use crate::model::{init_params, Batch, DropoutCtx, ModelVars, Seq2SeqConfig, Seq2SeqParams};
use crate::tensor::Tape;
use crate::textproc::{Bitext, Codec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// Target tokens per batch.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Absolute gradient clipping threshold.
    pub grad_clip: f64,
    pub label_smoothing: f64,
    pub checkpoint_every: usize,
    pub max_checkpoints: usize,
    pub lr_reduce_factor: f64,
    pub lr_reduce_patience: usize,
    pub keep_last_params: usize,
    pub min_count: usize,
    /// Beam used for validation BLEU.
    pub valid_beam: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.0003,
            batch_size: 4096,
            adam: AdamConfig::default(),
            grad_clip: 1.0,
            label_smoothing: 0.1,
            checkpoint_every: 4000,
            max_checkpoints: 30,
            lr_reduce_factor: 0.7,
            lr_reduce_patience: 8,
            keep_last_params: 3,
            min_count: 1,
            valid_beam: 5,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rate = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside (0, 1]")))
            }
        };
        rate("initial_lr", self.initial_lr)?;
        rate("lr_reduce_factor", self.lr_reduce_factor)?;
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing = {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.lr_reduce_patience == 0
            || self.checkpoint_every == 0
            || self.max_checkpoints == 0
            || self.batch_size == 0
        {
            return Err(Error::Config(
                "patience, checkpoint interval, budget and batch size must be positive".into(),
            ));
        }
        if self.grad_clip <= 0.0 || self.valid_beam == 0 {
            return Err(Error::Config(
                "grad_clip and valid_beam must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Updates performed by one run.
    pub fn total_updates(&self) -> u64 {
        (self.max_checkpoints * self.checkpoint_every) as u64
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub checkpoint: usize,
    pub updates: u64,
    pub train_loss: f64,
    pub valid_ppl: f64,
    pub valid_bleu: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str =
    "checkpoint\tupdates\ttrain_loss\tvalid_ppl\tvalid_bleu\tlr\twall_seconds";

impl MetricsRow {
    /// Tab-separated row; without wall time it is a pure function of the run.
    pub fn tsv(&self, with_wall: bool) -> String {
        let mut s = format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.4}\t{:.8}",
            self.checkpoint,
            self.updates,
            self.train_loss,
            self.valid_ppl,
            self.valid_bleu,
            self.lr
        );
        if with_wall {
            let _ = write!(s, "\t{:.2}", self.wall_seconds);
        }
        s
    }
}

pub fn metrics_tsv(rows: &[MetricsRow], with_wall: bool) -> String {
    let header = if with_wall {
        METRICS_HEADER
    } else {
        METRICS_HEADER.trim_end_matches("\twall_seconds")
    };
    let mut out = format!("{header}\n");
    for r in rows {
        out.push_str(&r.tsv(with_wall));
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best checkpoint by validation BLEU.
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    /// Training pairs dropped for length or emptiness.
    pub dropped: usize,
    pub lr_reductions: usize,
}

type Pairs = Vec<(Vec<usize>, Vec<usize>)>;

/// Encodes a bitext, dropping pairs with an empty side or more than
/// `max_len` subwords on either side.
pub fn encode_pairs(codec: &Codec, bitext: &Bitext, max_len: usize) -> (Pairs, usize) {
    let mut kept = Vec::with_capacity(bitext.len());
    for (s, t) in &bitext.pairs {
        let (s, t) = (codec.encode_source(s), codec.encode_target(t));
        if !s.is_empty() && !t.is_empty() && s.len() <= max_len && t.len() <= max_len {
            kept.push((s, t));
        }
    }
    let dropped = bitext.len() - kept.len();
    (kept, dropped)
}

fn batch_of(pairs: &[(Vec<usize>, Vec<usize>)], idx: &[usize]) -> Batch {
    Batch {
        sources: idx.iter().map(|&i| pairs[i].0.clone()).collect(),
        targets: idx.iter().map(|&i| pairs[i].1.clone()).collect(),
    }
}

/// `exp(total NLL / scored tokens)` in evaluation mode, without label
/// smoothing. Every target contributes its subwords plus EOS.
pub fn perplexity(params: &Seq2SeqParams, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].0.len(), pairs[i].1.len()));
    let (mut nll, mut tokens) = (0.0, 0usize);
    for chunk in order.chunks(32) {
        let batch = batch_of(pairs, chunk);
        let mut tape = Tape::new();
        let vars = ModelVars::bind(&mut tape, params);
        let loss = vars.batch_loss(&mut tape, &batch, 0.0, &DropoutCtx::none())?;
        nll += tape.value(loss).item() as f64;
        tokens += batch.target_tokens();
    }
    if tokens == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok((nll / tokens as f64).exp())
}

fn validation_bleu(checkpoint: &Checkpoint, valid: &Bitext, beam: usize) -> Result<f64> {
    let config = DecodeConfig {
        beam_size: beam,
        ..DecodeConfig::default()
    };
    let out = checkpoint.translate(&valid.sources(), &config)?;
    Ok(corpus_bleu(&out.best(), &valid.targets())?.bleu)
}

/// Runs exactly `max_checkpoints * checkpoint_every` updates, validating at
/// every checkpoint. When `out_dir` is given, the metrics log, the codec, the
/// last `keep_last_params` parameter files and the best parameters are
/// written there.
pub fn train_loop(
    model: &Seq2SeqConfig,
    config: &TrainConfig,
    codec: &Codec,
    train: &Bitext,
    valid: &Bitext,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (pairs, dropped) = encode_pairs(codec, train, model.max_seq_len);
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (valid_pairs, _) = encode_pairs(codec, valid, model.max_seq_len);
    let params = init_params(
        model,
        codec.src_vocab.len(),
        codec.trg_vocab.len(),
        config.seed,
    )?;
    let mut state = TrainState::new(
        params,
        config.adam,
        config.initial_lr,
        config.lr_reduce_factor,
        config.lr_reduce_patience,
    );
    let mut stream = BatchStream::new(
        pairs.iter().map(|(s, t)| (s.len(), t.len())).collect(),
        config.batch_size,
        config.seed,
    );
    let meta = |best_checkpoint: usize| CheckpointMeta {
        model: model.clone(),
        train: config.clone(),
        src_vocab: codec.src_vocab.len(),
        trg_vocab: codec.trg_vocab.len(),
        best_checkpoint,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        codec.save(dir)?;
    }
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(config.max_checkpoints);
    for checkpoint in 1..=config.max_checkpoints {
        let (mut loss_sum, mut loss_tokens) = (0.0, 0usize);
        for _ in 0..config.checkpoint_every {
            let update = state.updates + 1;
            let batch = batch_of(&pairs, &stream.next_batch());
            let tokens = batch.target_tokens();
            let mut tape = Tape::new().training(true);
            let vars = ModelVars::bind(&mut tape, &state.params);
            let drop = DropoutCtx::new(model, config.seed, update);
            let summed = vars
                .batch_loss(&mut tape, &batch, config.label_smoothing, &drop)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged {
                        update,
                        loss: f64::NAN,
                    },
                    e => e,
                })?;
            let value = tape.value(summed).item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    update,
                    loss: value,
                });
            }
            let loss = tape.scale(summed, 1.0 / tokens as f32)?;
            let mut grads = tape.backward(loss)?.params();
            clip_gradients(&mut grads, config.grad_clip);
            adam_update(&mut state.adam, state.params.iter_mut(), &grads, state.lr)?;
            state.updates = update;
            loss_sum += value;
            loss_tokens += tokens;
        }
        let current = Checkpoint {
            meta: meta(checkpoint),
            params: state.params.clone(),
            codec: codec.clone(),
        };
        let valid_ppl = perplexity(&state.params, &valid_pairs)?;
        let valid_bleu = validation_bleu(&current, valid, config.valid_beam)?;
        let row = MetricsRow {
            checkpoint,
            updates: state.updates,
            train_loss: loss_sum / loss_tokens as f64,
            valid_ppl,
            valid_bleu,
            lr: state.lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("{}", row.tsv(true));
        if let Some(dir) = out_dir {
            state
                .params
                .save(&dir.join(format!("params.{checkpoint:04}.bin")))?;
        }
        let event = lr_schedule_step(&mut state, valid_bleu, valid_ppl);
        if let Some(dir) = out_dir {
            if event == ScheduleEvent::Improved {
                state.params.save(&dir.join(BEST_PARAMS))?;
            }
            if checkpoint > config.keep_last_params {
                let old = checkpoint - config.keep_last_params;
                let _ = std::fs::remove_file(dir.join(format!("params.{old:04}.bin")));
            }
            let path = dir.join("metrics.tsv");
            metrics.push(row);
            std::fs::write(&path, metrics_tsv(&metrics, true)).map_err(io_err(&path))?;
        } else {
            metrics.push(row);
        }
    }
    let best = state.best.take().expect("at least one checkpoint");
    let checkpoint = Checkpoint {
        meta: meta(best.checkpoint),
        params: best.params,
        codec: codec.clone(),
    };
    if let Some(dir) = out_dir {
        checkpoint.save(dir)?;
    }
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        dropped,
        lr_reductions: state.reductions,
    })
}
