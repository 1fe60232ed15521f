#![allow(dead_code)]

use std::sync::Arc;

use distillforge::decode::{beam_search, enumerate_translations, greedy};
use distillforge::model::{init_params, CellType, Seq2SeqConfig, Seq2SeqParams};
use distillforge::tensor::{grad_check, seeded_rng, Tape, Tensor, Var};
use distillforge::Result;
use rand::Rng;

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    random_tensor(rng, shape).map(|x| {
        if x.abs() < 0.2 {
            x.signum() * 0.2 + x
        } else {
            x
        }
    })
}

type Case = (
    &'static str,
    Tensor<f64>,
    Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>,
);

/// Reduces any tensor to a scalar through fixed random weights.
fn project(tape: &mut Tape<f64>, y: Var, w: &Arc<Vec<f64>>) -> Result<Var> {
    let z = tape.mul_const(y, w.clone())?;
    tape.sum(z)
}

macro_rules! case {
    ($cases:ident, $rng:ident, $name:expr, $x:expr, $out_len:expr, |$t:ident, $v:ident| $body:expr) => {{
        let w: Arc<Vec<f64>> = Arc::new((0..$out_len).map(|_| $rng.gen_range(-1.0..1.0)).collect());
        $cases.push((
            $name,
            $x,
            Box::new(move |$t: &mut Tape<f64>, $v: Var| -> Result<Var> {
                let y = $body?;
                project($t, y, &w)
            }),
        ));
    }};
}

/// One finite-difference case per tape primitive, with random inputs drawn
/// from `seed`. Binary ops are checked with the leaf on each side.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = seeded_rng(seed, &[]);
    let r = &mut rng;
    let mut cases: Vec<Case> = Vec::new();

    let b = random_tensor(r, &[4, 2]);
    case!(
        cases,
        r,
        "matmul(x, b)",
        random_tensor(r, &[3, 4]),
        6,
        |t, x| {
            let c = t.constant(b.clone());
            t.matmul(x, c)
        }
    );
    let a = random_tensor(r, &[2, 3]);
    case!(
        cases,
        r,
        "matmul(a, x)",
        random_tensor(r, &[3, 4]),
        8,
        |t, x| {
            let c = t.constant(a.clone());
            t.matmul(c, x)
        }
    );
    let c34 = random_tensor(r, &[3, 4]);
    for (name, op) in [("add", 0), ("sub(x, c)", 1), ("sub(c, x)", 2), ("mul", 3)] {
        let c = c34.clone();
        case!(cases, r, name, random_tensor(r, &[3, 4]), 12, |t, x| {
            let k = t.constant(c.clone());
            match op {
                0 => t.add(x, k),
                1 => t.sub(x, k),
                2 => t.sub(k, x),
                _ => t.mul(k, x),
            }
        });
    }
    case!(cases, r, "mul(x, x)", random_tensor(r, &[5]), 5, |t, x| t
        .mul(x, x));
    let bias = random_tensor(r, &[4]);
    case!(
        cases,
        r,
        "add_bias(x, b)",
        random_tensor(r, &[3, 4]),
        12,
        |t, x| {
            let k = t.constant(bias.clone());
            t.add_bias(x, k)
        }
    );
    let m = c34.clone();
    case!(
        cases,
        r,
        "add_bias(m, x)",
        random_tensor(r, &[4]),
        12,
        |t, x| {
            let k = t.constant(m.clone());
            t.add_bias(k, x)
        }
    );
    case!(cases, r, "scale", random_tensor(r, &[3, 2]), 6, |t, x| t
        .scale(x, -1.7));
    let k: Arc<Vec<f64>> = Arc::new((0..6).map(|_| r.gen_range(-2.0..2.0)).collect());
    case!(
        cases,
        r,
        "mul_const",
        random_tensor(r, &[2, 3]),
        6,
        |t, x| t.mul_const(x, k.clone())
    );
    let old = random_tensor(r, &[3, 2]);
    let mask = Arc::new(vec![1.0, 0.0, 1.0]);
    let (o, mk) = (old.clone(), mask.clone());
    case!(
        cases,
        r,
        "blend(x, old)",
        random_tensor(r, &[3, 2]),
        6,
        |t, x| {
            let c = t.constant(o.clone());
            t.blend(x, c, mk.clone())
        }
    );
    case!(
        cases,
        r,
        "blend(new, x)",
        random_tensor(r, &[3, 2]),
        6,
        |t, x| {
            let c = t.constant(old.clone());
            t.blend(c, x, mask.clone())
        }
    );
    let right = random_tensor(r, &[2, 2]);
    case!(cases, r, "concat", random_tensor(r, &[2, 3]), 14, |t, x| {
        let c = t.constant(right.clone());
        t.concat(&[c, x, c])
    });
    case!(cases, r, "slice", random_tensor(r, &[2, 5]), 6, |t, x| t
        .slice(x, 1, 3));
    case!(cases, r, "sigmoid", random_tensor(r, &[2, 3]), 6, |t, x| t
        .sigmoid(x));
    case!(cases, r, "tanh", random_tensor(r, &[2, 3]), 6, |t, x| t
        .tanh(x));
    case!(cases, r, "relu", away_from_zero(r, &[2, 3]), 6, |t, x| t
        .relu(x));
    case!(
        cases,
        r,
        "softmax(axis 0)",
        random_tensor(r, &[3, 4]),
        12,
        |t, x| t.softmax(x, 0)
    );
    case!(
        cases,
        r,
        "softmax(axis 1)",
        random_tensor(r, &[3, 4]),
        12,
        |t, x| t.softmax(x, 1)
    );
    case!(
        cases,
        r,
        "softmax(rank 3)",
        random_tensor(r, &[2, 3, 2]),
        12,
        |t, x| t.softmax(x, 1)
    );
    case!(
        cases,
        r,
        "log_softmax",
        random_tensor(r, &[3, 4]),
        12,
        |t, x| t.log_softmax(x)
    );
    case!(
        cases,
        r,
        "masked_softmax",
        random_tensor(r, &[2, 4]),
        8,
        |t, x| { t.masked_softmax(x, &[1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0]) }
    );
    case!(cases, r, "gather", random_tensor(r, &[5, 3]), 12, |t, x| t
        .gather(x, &[0, 2, 2, 4]));
    let other = random_tensor(r, &[2, 3]);
    case!(cases, r, "stack", random_tensor(r, &[2, 3]), 18, |t, x| {
        let c = t.constant(other.clone());
        t.stack(&[x, c, x])
    });
    let keys = random_tensor(r, &[2, 4, 3]);
    case!(
        cases,
        r,
        "attn_scores(x, keys)",
        random_tensor(r, &[2, 3]),
        8,
        |t, x| {
            let k = t.constant(keys.clone());
            t.attn_scores(x, k)
        }
    );
    let query = random_tensor(r, &[2, 3]);
    case!(
        cases,
        r,
        "attn_scores(q, x)",
        random_tensor(r, &[2, 4, 3]),
        8,
        |t, x| {
            let q = t.constant(query.clone());
            t.attn_scores(q, x)
        }
    );
    case!(
        cases,
        r,
        "attn_scores(broadcast keys)",
        random_tensor(r, &[1, 4, 3]),
        8,
        |t, x| {
            let q = t.constant(random_tensor(&mut seeded_rng(seed, &[1]), &[2, 3]));
            t.attn_scores(q, x)
        }
    );
    let values = random_tensor(r, &[2, 4, 3]);
    case!(
        cases,
        r,
        "attn_context(x, values)",
        random_tensor(r, &[2, 4]),
        6,
        |t, x| {
            let v = t.constant(values.clone());
            t.attn_context(x, v)
        }
    );
    let weights = random_tensor(r, &[2, 4]);
    case!(
        cases,
        r,
        "attn_context(w, x)",
        random_tensor(r, &[2, 4, 3]),
        6,
        |t, x| {
            let w = t.constant(weights.clone());
            t.attn_context(w, x)
        }
    );
    let cell = random_tensor(r, &[2, 2]);
    case!(
        cases,
        r,
        "lstm_cell(x, c)",
        random_tensor(r, &[2, 8]),
        8,
        |t, x| {
            let c = t.constant(cell.clone());
            t.lstm_cell(x, c)
        }
    );
    let gates = random_tensor(r, &[2, 8]);
    case!(
        cases,
        r,
        "lstm_cell(g, x)",
        random_tensor(r, &[2, 2]),
        8,
        |t, x| {
            let g = t.constant(gates.clone());
            t.lstm_cell(g, x)
        }
    );
    case!(cases, r, "sum", random_tensor(r, &[2, 3]), 1, |t, x| t
        .sum(x));
    case!(cases, r, "mean", random_tensor(r, &[2, 3]), 1, |t, x| t
        .mean(x));
    case!(
        cases,
        r,
        "cross_entropy",
        random_tensor(r, &[3, 5]),
        1,
        |t, x| { t.cross_entropy(x, &[1, 4, 0], 0.1, &[1.0, 0.0, 2.0]) }
    );
    let target = {
        let raw = random_tensor(r, &[3, 5]).map(f64::exp);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                let row = raw.row(i);
                let s: f64 = row.iter().sum();
                row.iter().map(|v| v / s).collect()
            })
            .collect();
        Arc::new(Tensor::from_rows(&rows).unwrap())
    };
    case!(
        cases,
        r,
        "soft_cross_entropy",
        random_tensor(r, &[3, 5]),
        1,
        |t, x| { t.soft_cross_entropy(x, target.clone(), &[1.0, 0.5, 1.0]) }
    );
    case!(
        cases,
        r,
        "dropout",
        random_tensor(r, &[4, 4]),
        16,
        |t, x| {
            // Same seed for every evaluation, hence the same mask.
            let mut drop_rng = seeded_rng(seed, &[7]);
            t.dropout(x, 0.3, &mut drop_rng)
        }
    );
    cases
}

/// Worst relative finite-difference error per primitive. Dropout runs on a
/// training tape, everything else on an evaluation tape.
pub fn primitive_errors(seed: u64) -> Vec<(&'static str, f64)> {
    primitive_cases(seed)
        .into_iter()
        .map(|(name, x, f)| {
            let err = if name == "dropout" {
                grad_check_training(&*f, &x, 1e-6)
            } else {
                grad_check(|t, v| f(t, v), &x, 1e-6, None).unwrap_or_else(|e| panic!("{name}: {e}"))
            };
            (name, err)
        })
        .collect()
}

fn grad_check_training(
    f: &dyn Fn(&mut Tape<f64>, Var) -> Result<Var>,
    x: &Tensor<f64>,
    eps: f64,
) -> f64 {
    let eval = |p: Tensor<f64>| {
        let mut t = Tape::new().training(true);
        let v = t.param("x", Arc::new(p));
        let out = f(&mut t, v).expect("dropout case");
        t.value(out).item()
    };
    let mut t = Tape::new().training(true);
    let v = t.param("x", Arc::new(x.clone()));
    let out = f(&mut t, v).expect("dropout case");
    let analytic = t.backward(out).unwrap().wrt(v);
    (0..x.len())
        .map(|i| {
            let (mut plus, mut minus) = (x.clone(), x.clone());
            plus.data_mut()[i] += eps;
            minus.data_mut()[i] -= eps;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * eps);
            distillforge::tensor::relative_error(analytic.data()[i], numeric)
        })
        .fold(0.0, f64::max)
}

/// A small random model in f64 whose output layer is sharpened so that
/// distributions are far from uniform.
pub fn tiny_model(cell: CellType, trg_vocab: usize, seed: u64) -> Seq2SeqParams<f64> {
    let config = Seq2SeqConfig {
        embed_size: 4,
        hidden_size: 6,
        cell_type: cell,
        ..Seq2SeqConfig::small()
    };
    let mut p = init_params(&config, 8, trg_vocab, seed)
        .unwrap()
        .cast::<f64>();
    for x in p.tensor_mut("out.w").data_mut() {
        *x *= 5.0;
    }
    p
}

/// Outcome of comparing exhaustive beam search with brute-force enumeration.
pub struct BeamOracleCheck {
    pub matches_argmax: bool,
    pub beam1_is_greedy: bool,
    pub oracle: Vec<usize>,
    pub oracle_logprob: f64,
}

pub fn beam_oracle_check(
    p: &Seq2SeqParams<f64>,
    source: &[usize],
    max_len: usize,
) -> BeamOracleCheck {
    let all = enumerate_translations(p, source, max_len, 1e6).unwrap();
    let (oracle, oracle_logprob) = all
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap();
    let width = p.trg_vocab.pow(max_len as u32);
    let r = beam_search(p, source, width, max_len, false).unwrap();
    let top = &r.hypotheses[0];
    let matches_argmax = top.finished
        && top.tokens[1..] == oracle[..]
        && (top.logprob - oracle_logprob).abs() < 1e-9;
    let b1 = beam_search(p, source, 1, max_len, false).unwrap();
    let g = greedy(p, source, max_len).unwrap();
    BeamOracleCheck {
        matches_argmax,
        beam1_is_greedy: b1.hypotheses[0].tokens == g.tokens,
        oracle,
        oracle_logprob,
    }
}
