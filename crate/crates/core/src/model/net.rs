use std::sync::Arc;

use super::{CellType, Seq2SeqConfig, Seq2SeqParams};
use crate::error::{Error, Result};
use crate::tensor::{relative_error, MaskRng, Scalar, Tape, Tensor, Var};
use crate::textproc::{BOS, EOS, PAD};

/// Source/target id sequences without BOS/EOS.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    pub sources: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// Target tokens scored by the loss (including one EOS per sentence).
    pub fn target_tokens(&self) -> usize {
        self.targets.iter().map(|t| t.len() + 1).sum()
    }
}

#[derive(Clone, Copy)]
struct CellVars {
    wx: Var,
    wh: Var,
    b: Var,
}

/// Parameters bound as leaves on one tape.
pub struct ModelVars {
    config: Seq2SeqConfig,
    src_embed: Var,
    trg_embed: Var,
    enc: Vec<(CellVars, CellVars)>,
    dec: Vec<CellVars>,
    init: Vec<(Var, Var)>,
    att_w: Var,
    att_b: Var,
    out_w: Var,
    out_b: Var,
}

/// Dropout settings plus the mask source for one update.
#[derive(Clone, Copy, Debug)]
pub struct DropoutCtx {
    pub masks: MaskRng,
    pub inputs: f64,
    pub states: f64,
    pub embed: f64,
}

impl DropoutCtx {
    pub fn new(config: &Seq2SeqConfig, seed: u64, step: u64) -> Self {
        Self {
            masks: MaskRng::new(seed, step),
            inputs: config.rnn_dropout_inputs,
            states: config.rnn_dropout_states,
            embed: config.embed_dropout,
        }
    }

    pub fn none() -> Self {
        Self {
            masks: MaskRng::new(0, 0),
            inputs: 0.0,
            states: 0.0,
            embed: 0.0,
        }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, p: f64, key: [u64; 4]) -> Result<Var> {
        if p == 0.0 || !tape.is_training() {
            return Ok(x);
        }
        let layer = (key[0] << 56) | (key[1] << 48) | (key[2] << 40) | key[3];
        tape.dropout(x, p, &mut self.masks.stream(layer))
    }
}

/// Encoder states `[B, S, H]` plus the attention mask.
pub struct EncoderOutput<T> {
    pub states: Var,
    /// `B * S` entries, 1 for real tokens and 0 for padding.
    pub mask: Arc<Vec<T>>,
    /// Backward-direction state at position 0 of the top layer, `[B, H/2]`.
    pub final_bwd: Var,
    pub batch: usize,
    pub len: usize,
}

/// Per-layer decoder recurrent state; `c` is present for LSTM cells.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub layers: Vec<(Var, Option<Var>)>,
}

impl DecoderState {
    /// Reorders/duplicates batch rows (used by beam search).
    pub fn select<T: Scalar>(&self, tape: &mut Tape<T>, rows: &[usize]) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|&(h, c)| {
                Ok((
                    tape.gather(h, rows)?,
                    c.map(|c| tape.gather(c, rows)).transpose()?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

pub struct StepOutput {
    pub logits: Var,
    pub attention: Var,
    pub state: DecoderState,
}

fn zeros<T: Scalar>(tape: &mut Tape<T>, rows: usize, cols: usize) -> Var {
    tape.constant(Tensor::zeros(&[rows, cols]))
}

impl ModelVars {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &Seq2SeqParams<T>) -> Self {
        let mut p = |name: &str| tape.param(name, params.get(name).clone());
        let src_embed = p("src_embed");
        let trg_embed = p("trg_embed");
        let mut cell = |prefix: &str| CellVars {
            wx: p(&format!("{prefix}.wx")),
            wh: p(&format!("{prefix}.wh")),
            b: p(&format!("{prefix}.b")),
        };
        let layers = params.config.num_layers;
        let enc = (0..layers)
            .map(|l| {
                (
                    cell(&format!("enc.l{l}.fwd")),
                    cell(&format!("enc.l{l}.bwd")),
                )
            })
            .collect();
        let dec = (0..layers).map(|l| cell(&format!("dec.l{l}"))).collect();
        let init = (0..layers)
            .map(|l| {
                (
                    tape.param(
                        &format!("init.l{l}.w"),
                        params.get(&format!("init.l{l}.w")).clone(),
                    ),
                    tape.param(
                        &format!("init.l{l}.b"),
                        params.get(&format!("init.l{l}.b")).clone(),
                    ),
                )
            })
            .collect();
        let mut p = |name: &str| tape.param(name, params.get(name).clone());
        Self {
            config: params.config.clone(),
            src_embed,
            trg_embed,
            enc,
            dec,
            init,
            att_w: p("att.w"),
            att_b: p("att.b"),
            out_w: p("out.w"),
            out_b: p("out.b"),
        }
    }

    pub fn config(&self) -> &Seq2SeqConfig {
        &self.config
    }

    /// One recurrent step. `h_in` feeds the recurrent weights (possibly
    /// dropped out); `h_prev` is the undropped previous state.
    fn rnn_step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        cell: CellVars,
        x: Var,
        h_in: Var,
        h_prev: Var,
        c_prev: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        let units = tape.shape(h_prev)[1];
        match self.config.cell_type {
            CellType::Lstm => {
                let xw = tape.matmul(x, cell.wx)?;
                let hw = tape.matmul(h_in, cell.wh)?;
                let gates = tape.add(xw, hw)?;
                let gates = tape.add_bias(gates, cell.b)?;
                let c_prev = c_prev.expect("LSTM state carries a cell");
                let out = tape.lstm_cell(gates, c_prev)?;
                Ok((
                    tape.slice(out, 0, units)?,
                    Some(tape.slice(out, units, units)?),
                ))
            }
            CellType::Gru => {
                let gx = tape.matmul(x, cell.wx)?;
                let gx = tape.add_bias(gx, cell.b)?;
                let gh = tape.matmul(h_in, cell.wh)?;
                let part = |tape: &mut Tape<T>, v: Var, i: usize| tape.slice(v, i * units, units);
                let (xr, hr) = (part(tape, gx, 0)?, part(tape, gh, 0)?);
                let r = tape.add(xr, hr)?;
                let r = tape.sigmoid(r)?;
                let (xz, hz) = (part(tape, gx, 1)?, part(tape, gh, 1)?);
                let z = tape.add(xz, hz)?;
                let z = tape.sigmoid(z)?;
                let (xn, hn) = (part(tape, gx, 2)?, part(tape, gh, 2)?);
                let rh = tape.mul(r, hn)?;
                let n = tape.add(xn, rh)?;
                let n = tape.tanh(n)?;
                let diff = tape.sub(h_prev, n)?;
                let zd = tape.mul(z, diff)?;
                Ok((tape.add(n, zd)?, None))
            }
        }
    }

    /// Runs the bidirectional encoder over right-padded `sources`.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        sources: &[Vec<usize>],
        drop: &DropoutCtx,
    ) -> Result<EncoderOutput<T>> {
        if sources.is_empty() || sources.iter().any(Vec::is_empty) {
            return Err(Error::EmptySource);
        }
        let batch = sources.len();
        let len = sources.iter().map(Vec::len).max().unwrap_or(0);
        let d = self.config.encoder_direction_size();
        let lstm = self.config.cell_type == CellType::Lstm;

        let col_mask: Vec<Option<Arc<Vec<T>>>> = (0..len)
            .map(|t| {
                let m: Vec<T> = sources
                    .iter()
                    .map(|s| if t < s.len() { T::ONE } else { T::ZERO })
                    .collect();
                m.contains(&T::ZERO).then(|| Arc::new(m))
            })
            .collect();

        let mut inputs = Vec::with_capacity(len);
        for t in 0..len {
            let ids: Vec<usize> = sources
                .iter()
                .map(|s| s.get(t).copied().unwrap_or(PAD))
                .collect();
            let e = tape.gather(self.src_embed, &ids)?;
            inputs.push(drop.apply(tape, e, drop.embed, [0, 0, 0, t as u64])?);
        }

        let mut final_bwd = None;
        for (l, &(fwd, bwd)) in self.enc.iter().enumerate() {
            let mut outs: [Vec<Option<Var>>; 2] = [vec![None; len], vec![None; len]];
            for (dir, cell) in [fwd, bwd].into_iter().enumerate() {
                let mut h = zeros(tape, batch, d);
                let mut c = lstm.then(|| zeros(tape, batch, d));
                let order: Box<dyn Iterator<Item = usize>> = if dir == 0 {
                    Box::new(0..len)
                } else {
                    Box::new((0..len).rev())
                };
                for t in order {
                    let key = |kind: u64| [kind, l as u64, dir as u64, t as u64];
                    let x = drop.apply(tape, inputs[t], drop.inputs, key(1))?;
                    let h_in = drop.apply(tape, h, drop.states, key(2))?;
                    let (hn, cn) = self.rnn_step(tape, cell, x, h_in, h, c)?;
                    match &col_mask[t] {
                        Some(m) => {
                            h = tape.blend(hn, h, m.clone())?;
                            c = match (cn, c) {
                                (Some(cn), Some(c)) => Some(tape.blend(cn, c, m.clone())?),
                                _ => None,
                            };
                        }
                        None => {
                            h = hn;
                            c = cn;
                        }
                    }
                    outs[dir][t] = Some(h);
                }
            }
            let [f, b] = outs;
            inputs = f
                .into_iter()
                .zip(&b)
                .map(|(f, b)| tape.concat(&[f.unwrap(), b.unwrap()]))
                .collect::<Result<_>>()?;
            final_bwd = b[0];
        }
        let states = tape.stack(&inputs)?;
        let mask = sources
            .iter()
            .flat_map(|s| (0..len).map(move |t| if t < s.len() { T::ONE } else { T::ZERO }))
            .collect();
        Ok(EncoderOutput {
            states,
            mask: Arc::new(mask),
            final_bwd: final_bwd.unwrap(),
            batch,
            len,
        })
    }

    /// `tanh(W * final_bwd + b)` per decoder layer; LSTM cells start at zero.
    pub fn init_state<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        enc: &EncoderOutput<T>,
    ) -> Result<DecoderState> {
        let h = self.config.hidden_size;
        let layers = self
            .init
            .iter()
            .map(|&(w, b)| {
                let z = tape.matmul(enc.final_bwd, w)?;
                let z = tape.add_bias(z, b)?;
                let hs = tape.tanh(z)?;
                let c =
                    (self.config.cell_type == CellType::Lstm).then(|| zeros(tape, enc.batch, h));
                Ok((hs, c))
            })
            .collect::<Result<_>>()?;
        Ok(DecoderState { layers })
    }

    /// One decoder step from the previous target ids. Returns output logits
    /// (apply log-softmax for log-probabilities), attention weights and the
    /// new state.
    pub fn decode_step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        prev: &[usize],
        state: &DecoderState,
        enc: &EncoderOutput<T>,
        drop: &DropoutCtx,
        step: usize,
    ) -> Result<StepOutput> {
        let e = tape.gather(self.trg_embed, prev)?;
        let mut x = drop.apply(tape, e, drop.embed, [5, 0, 0, step as u64])?;
        let mut layers = Vec::with_capacity(self.dec.len());
        for (l, (&cell, &(h, c))) in self.dec.iter().zip(&state.layers).enumerate() {
            let key = |kind: u64| [kind, l as u64, 0, step as u64];
            let xin = drop.apply(tape, x, drop.inputs, key(3))?;
            let h_in = drop.apply(tape, h, drop.states, key(4))?;
            let (hn, cn) = self.rnn_step(tape, cell, xin, h_in, h, c)?;
            layers.push((hn, cn));
            x = hn;
        }
        let scores = tape.attn_scores(x, enc.states)?;
        let mask: &[T] = if enc.batch == 1 {
            &enc.mask[..enc.len]
        } else {
            &enc.mask
        };
        let attention = tape.masked_softmax(scores, mask)?;
        let ctx = tape.attn_context(attention, enc.states)?;
        let joined = tape.concat(&[x, ctx])?;
        let comb = tape.matmul(joined, self.att_w)?;
        let comb = tape.add_bias(comb, self.att_b)?;
        let comb = tape.tanh(comb)?;
        let logits = tape.matmul(comb, self.out_w)?;
        let logits = tape.add_bias(logits, self.out_b)?;
        Ok(StepOutput {
            logits,
            attention,
            state: DecoderState { layers },
        })
    }

    /// Teacher-forced decoder pass. Returns per-step logits, gold ids and
    /// loss weights (0 past each sentence's EOS).
    pub fn forward_logits<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch,
        drop: &DropoutCtx,
    ) -> Result<Vec<(Var, Vec<usize>, Vec<T>)>> {
        let enc = self.encode(tape, &batch.sources, drop)?;
        let mut state = self.init_state(tape, &enc)?;
        let steps = batch.targets.iter().map(Vec::len).max().unwrap_or(0) + 1;
        let mut out = Vec::with_capacity(steps);
        for j in 0..steps {
            let prev: Vec<usize> = batch
                .targets
                .iter()
                .map(|t| {
                    if j == 0 {
                        BOS
                    } else {
                        t.get(j - 1).copied().unwrap_or(PAD)
                    }
                })
                .collect();
            let gold: Vec<usize> = batch
                .targets
                .iter()
                .map(|t| match j.cmp(&t.len()) {
                    std::cmp::Ordering::Less => t[j],
                    std::cmp::Ordering::Equal => EOS,
                    std::cmp::Ordering::Greater => PAD,
                })
                .collect();
            let weights = batch
                .targets
                .iter()
                .map(|t| if j <= t.len() { T::ONE } else { T::ZERO })
                .collect();
            let step = self.decode_step(tape, &prev, &state, &enc, drop, j)?;
            state = step.state;
            out.push((step.logits, gold, weights));
        }
        Ok(out)
    }

    /// Summed label-smoothed cross-entropy over the batch.
    pub fn batch_loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch,
        smoothing: f64,
        drop: &DropoutCtx,
    ) -> Result<Var> {
        let steps = self.forward_logits(tape, batch, drop)?;
        let mut total: Option<Var> = None;
        for (logits, gold, weights) in steps {
            let l = tape.cross_entropy(logits, &gold, smoothing, &weights)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        Ok(total.expect("at least one decoder step"))
    }
}

/// Worst relative error between backpropagated parameter gradients of the
/// batch loss and central finite differences, over every `stride`-th scalar.
pub fn grad_check_batch(
    params: &Seq2SeqParams<f64>,
    batch: &Batch,
    smoothing: f64,
    eps: f64,
    stride: usize,
) -> Result<f64> {
    let loss_at = |p: &Seq2SeqParams<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = ModelVars::bind(&mut tape, p);
        let loss = vars.batch_loss(&mut tape, batch, smoothing, &DropoutCtx::none())?;
        Ok(tape.value(loss).item())
    };
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, params);
    let loss = vars.batch_loss(&mut tape, batch, smoothing, &DropoutCtx::none())?;
    let analytic: Vec<f64> = tape
        .backward(loss)?
        .params()
        .values()
        .flat_map(|t| t.data().to_vec())
        .collect();
    let flat = params.flatten();
    let mut worst = 0.0f64;
    for i in (0..flat.len()).step_by(stride.max(1)) {
        let mut shifted = flat.clone();
        shifted[i] = flat[i] + eps;
        let plus = loss_at(&params.unflatten(&shifted))?;
        shifted[i] = flat[i] - eps;
        let minus = loss_at(&params.unflatten(&shifted))?;
        worst = worst.max(relative_error(analytic[i], (plus - minus) / (2.0 * eps)));
    }
    Ok(worst)
}
