//! Beam search, greedy decoding, exhaustive enumeration and corpus
//! translation.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{DecoderState, DropoutCtx, EncoderOutput, ModelVars, Seq2SeqParams};
use crate::tensor::{Scalar, Tape, Var};
use crate::textproc::{BOS, EOS, PAD};

/// Hard cap on output length.
pub const MAX_OUTPUT_LEN: usize = 100;

/// A decoded translation. `tokens` starts with BOS and ends with EOS when
/// `finished`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Output ids without BOS and EOS.
    pub fn output(&self) -> &[usize] {
        let end = if self.finished {
            self.tokens.len() - 1
        } else {
            self.tokens.len()
        };
        &self.tokens[1..end]
    }

    /// Generated length, EOS included.
    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    /// Best first. Finished hypotheses only, unless `truncated`.
    pub hypotheses: Vec<Hypothesis>,
    /// No hypothesis emitted EOS within `max_len`; the best unfinished one is returned.
    pub truncated: bool,
}

/// `min(2 * source_len + 10, 100)`.
pub fn default_max_len(source_len: usize) -> usize {
    (2 * source_len + 10).min(MAX_OUTPUT_LEN)
}

fn score(logprob: f64, len: usize, length_norm: bool) -> f64 {
    if length_norm {
        logprob / len as f64
    } else {
        logprob
    }
}

fn expandable(token: usize) -> bool {
    token != PAD && token != BOS
}

struct Session<T: Scalar> {
    tape: Tape<T>,
    vars: ModelVars,
    enc: EncoderOutput<T>,
}

impl<T: Scalar> Session<T> {
    fn new(params: &Seq2SeqParams<T>, source: &[usize]) -> Result<(Self, DecoderState)> {
        let mut tape = Tape::new();
        let vars = ModelVars::bind(&mut tape, params);
        let enc = vars.encode(&mut tape, &[source.to_vec()], &DropoutCtx::none())?;
        let state = vars.init_state(&mut tape, &enc)?;
        Ok((Self { tape, vars, enc }, state))
    }

    /// Log-probabilities `[rows][V]` for the next token after `prev`.
    fn step(
        &mut self,
        prev: &[usize],
        state: &DecoderState,
        t: usize,
    ) -> Result<(Vec<Vec<f64>>, DecoderState)> {
        let out = self.vars.decode_step(
            &mut self.tape,
            prev,
            state,
            &self.enc,
            &DropoutCtx::none(),
            t,
        )?;
        let lp: Var = self.tape.log_softmax(out.logits)?;
        let value = self.tape.value(lp);
        let v = value.shape()[1];
        let rows = value
            .data()
            .chunks(v)
            .map(|r| r.iter().map(|x| x.to_f64()).collect())
            .collect();
        Ok((rows, out.state))
    }
}

/// Beam search over the target vocabulary. Candidates from all live
/// hypotheses compete for `k` slots; those ending in EOS move to the
/// finished pool. Search stops once `k` hypotheses have finished and no
/// live one can still beat the k-th best, or after `max_len` tokens.
pub fn beam_search<T: Scalar>(
    params: &Seq2SeqParams<T>,
    source: &[usize],
    k: usize,
    max_len: usize,
    length_norm: bool,
) -> Result<BeamResult> {
    if k == 0 {
        return Err(Error::InvalidK);
    }
    let (mut session, mut state) = Session::new(params, source)?;
    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        logprob: 0.0,
        score: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for t in 0..max_len.max(1) {
        let prev: Vec<usize> = live.iter().map(|h| *h.tokens.last().unwrap()).collect();
        let (lp, next_state) = session.step(&prev, &state, t)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, row) in lp.iter().enumerate() {
            for (tok, &l) in row.iter().enumerate() {
                if expandable(tok) {
                    cands.push((live[i].logprob + l, i, tok));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then((a.1, a.2).cmp(&(b.1, b.2)))
        });
        let last_step = t + 1 == max_len.max(1);
        let mut rows = Vec::new();
        let mut next = Vec::new();
        for (logprob, i, tok) in cands {
            if next.len() == k {
                break;
            }
            let mut tokens = live[i].tokens.clone();
            tokens.push(tok);
            let len = tokens.len() - 1;
            let hyp = Hypothesis {
                tokens,
                logprob,
                score: score(logprob, len, length_norm),
                finished: tok == EOS,
            };
            if hyp.finished {
                finished.push(hyp);
            } else {
                rows.push(i);
                next.push(hyp);
            }
        }
        if next.is_empty() || last_step {
            live = next;
            break;
        }
        state = next_state.select(&mut session.tape, &rows)?;
        live = next;
        if finished.len() >= k {
            sort_hyps(&mut finished);
            let kth = finished[k - 1].score;
            let bound = live
                .iter()
                .map(|h| {
                    if length_norm {
                        h.logprob / max_len as f64
                    } else {
                        h.logprob
                    }
                })
                .fold(f64::NEG_INFINITY, f64::max);
            if bound <= kth {
                break;
            }
        }
    }
    if finished.is_empty() {
        sort_hyps(&mut live);
        live.truncate(1);
        return Ok(BeamResult {
            hypotheses: live,
            truncated: true,
        });
    }
    sort_hyps(&mut finished);
    finished.truncate(k);
    Ok(BeamResult {
        hypotheses: finished,
        truncated: false,
    })
}

fn sort_hyps(hyps: &mut [Hypothesis]) {
    hyps.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

/// Step-wise argmax decoding.
pub fn greedy<T: Scalar>(
    params: &Seq2SeqParams<T>,
    source: &[usize],
    max_len: usize,
) -> Result<Hypothesis> {
    let (mut session, mut state) = Session::new(params, source)?;
    let mut hyp = Hypothesis {
        tokens: vec![BOS],
        logprob: 0.0,
        score: 0.0,
        finished: false,
    };
    for t in 0..max_len.max(1) {
        let (lp, next) = session.step(&[*hyp.tokens.last().unwrap()], &state, t)?;
        let (tok, l) = lp[0]
            .iter()
            .enumerate()
            .filter(|&(tok, _)| expandable(tok))
            .fold((EOS, f64::NEG_INFINITY), |best, (tok, &l)| {
                if l > best.1 {
                    (tok, l)
                } else {
                    best
                }
            });
        hyp.tokens.push(tok);
        hyp.logprob += l;
        hyp.score = hyp.logprob;
        state = next;
        if tok == EOS {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Every EOS-terminated output of at most `max_len` tokens (EOS included)
/// with its log-probability, in breadth-first order. Outputs are ids
/// without BOS, ending in EOS.
pub fn enumerate_translations<T: Scalar>(
    params: &Seq2SeqParams<T>,
    source: &[usize],
    max_len: usize,
    limit: f64,
) -> Result<Vec<(Vec<usize>, f64)>> {
    let size = (params.trg_vocab as f64).powi(max_len as i32);
    if size > limit {
        return Err(Error::SearchSpaceTooLarge { size, limit });
    }
    let (mut session, mut state) = Session::new(params, source)?;
    let mut prefixes: Vec<(Vec<usize>, f64)> = vec![(vec![], 0.0)];
    let mut out = Vec::new();
    for t in 0..max_len {
        let prev: Vec<usize> = prefixes
            .iter()
            .map(|(p, _)| p.last().copied().unwrap_or(BOS))
            .collect();
        let (lp, next_state) = session.step(&prev, &state, t)?;
        let mut rows = Vec::new();
        let mut next = Vec::new();
        for (i, (prefix, logprob)) in prefixes.iter().enumerate() {
            for (tok, &l) in lp[i].iter().enumerate() {
                if !expandable(tok) {
                    continue;
                }
                let mut seq = prefix.clone();
                seq.push(tok);
                if tok == EOS {
                    out.push((seq, logprob + l));
                } else if t + 1 < max_len {
                    rows.push(i);
                    next.push((seq, logprob + l));
                }
            }
        }
        if next.is_empty() {
            break;
        }
        state = next_state.select(&mut session.tape, &rows)?;
        prefixes = next;
    }
    Ok(out)
}

/// Top `k` distinct finished hypotheses. The flag is set when fewer than
/// `k` exist.
pub fn best_k(hypotheses: &[Hypothesis], k: usize) -> Result<(Vec<Vec<usize>>, bool)> {
    if k == 0 {
        return Err(Error::InvalidK);
    }
    let mut sorted: Vec<&Hypothesis> = hypotheses.iter().filter(|h| h.finished).collect();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    let mut out: Vec<Vec<usize>> = Vec::new();
    for h in sorted {
        if out.len() == k {
            break;
        }
        if !out.iter().any(|o| o == h.output()) {
            out.push(h.output().to_vec());
        }
    }
    let short = out.len() < k;
    Ok((out, short))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub length_norm: bool,
    /// Candidates kept per sentence.
    pub nbest: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            length_norm: true,
            nbest: 1,
        }
    }
}

/// Translations in input order. A sentence that fails to decode yields no
/// candidates and is counted in `failures`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusTranslation {
    pub outputs: Vec<Vec<Vec<usize>>>,
    pub failures: usize,
    pub truncated: usize,
}

impl CorpusTranslation {
    /// Best candidate per sentence, empty on failure.
    pub fn best(&self) -> Vec<Vec<usize>> {
        self.outputs
            .iter()
            .map(|c| c.first().cloned().unwrap_or_default())
            .collect()
    }
}

/// Translates every source sentence with beam search, in parallel.
pub fn translate_corpus<T: Scalar>(
    params: &Seq2SeqParams<T>,
    sources: &[Vec<usize>],
    config: &DecodeConfig,
) -> Result<CorpusTranslation> {
    if config.nbest == 0 || config.beam_size < config.nbest {
        return Err(Error::InvalidK);
    }
    let results: Vec<Option<(Vec<Vec<usize>>, bool)>> = sources
        .par_iter()
        .map(|src| {
            let res = beam_search(
                params,
                src,
                config.beam_size,
                default_max_len(src.len()),
                config.length_norm,
            )
            .ok()?;
            let cands = if res.truncated {
                res.hypotheses.iter().map(|h| h.output().to_vec()).collect()
            } else {
                best_k(&res.hypotheses, config.nbest).ok()?.0
            };
            Some((cands, res.truncated))
        })
        .collect();
    let failures = results.iter().filter(|r| r.is_none()).count();
    let truncated = results
        .iter()
        .filter(|r| matches!(r, Some((_, true))))
        .count();
    if failures > 0 {
        log::warn!("{failures} of {} sentences failed to decode", sources.len());
    }
    let outputs = results
        .into_iter()
        .map(|r| r.map(|(c, _)| c).unwrap_or_default())
        .collect();
    Ok(CorpusTranslation {
        outputs,
        failures,
        truncated,
    })
}
