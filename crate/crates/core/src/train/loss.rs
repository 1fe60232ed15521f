//! Reference loss computations on materialized log-probabilities.

use crate::decode::enumerate_translations;
use crate::error::{Error, Result};
use crate::model::Seq2SeqParams;
use crate::tensor::{Scalar, Tensor};
use crate::textproc::PAD;

/// Summed loss and the number of scored positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenLoss {
    pub sum: f64,
    pub tokens: usize,
}

impl TokenLoss {
    pub fn mean(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.sum / self.tokens as f64
        }
    }
}

fn rows<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    t.dims2()
}

/// Label-smoothed negative log-likelihood over `[N, V]` log-probabilities.
/// Positions whose target is PAD are skipped.
pub fn nll_loss<T: Scalar>(
    log_probs: &Tensor<T>,
    targets: &[usize],
    smoothing: f64,
) -> Result<TokenLoss> {
    let (n, v) = rows(log_probs)?;
    if targets.len() != n {
        return Err(Error::Shape {
            op: "nll_loss",
            shapes: format!("{:?} vs {} targets", log_probs.shape(), targets.len()),
        });
    }
    let off = if v > 1 {
        smoothing / (v - 1) as f64
    } else {
        0.0
    };
    let mut loss = TokenLoss {
        sum: 0.0,
        tokens: 0,
    };
    for (i, &gold) in targets.iter().enumerate() {
        if gold == PAD {
            continue;
        }
        let row = log_probs.row(i);
        let total: f64 = row.iter().map(|x| x.to_f64()).sum();
        let g = row[gold].to_f64();
        loss.sum -= (1.0 - smoothing) * g + off * (total - g);
        loss.tokens += 1;
    }
    Ok(loss)
}

/// Cross-entropy between teacher distributions and student
/// log-probabilities, over positions where `mask` is true.
pub fn word_kd_loss<T: Scalar>(
    student_log_probs: &Tensor<T>,
    teacher_probs: &Tensor<T>,
    mask: &[bool],
) -> Result<TokenLoss> {
    let (n, _) = rows(student_log_probs)?;
    if teacher_probs.shape() != student_log_probs.shape() || mask.len() != n {
        return Err(Error::Shape {
            op: "word_kd_loss",
            shapes: format!(
                "{:?} vs {:?}, {} mask entries",
                student_log_probs.shape(),
                teacher_probs.shape(),
                mask.len()
            ),
        });
    }
    let mut loss = TokenLoss {
        sum: 0.0,
        tokens: 0,
    };
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        let q = teacher_probs.row(i);
        let sum: f64 = q.iter().map(|x| x.to_f64()).sum();
        if (sum - 1.0).abs() > 1e-6 || q.iter().any(|x| x.to_f64() < 0.0) {
            return Err(Error::Unnormalized { position: i, sum });
        }
        loss.sum -= q
            .iter()
            .zip(student_log_probs.row(i))
            .filter(|(q, _)| q.to_f64() > 0.0)
            .map(|(q, lp)| q.to_f64() * lp.to_f64())
            .sum::<f64>();
        loss.tokens += 1;
    }
    Ok(loss)
}

/// `alpha * word_kd + (1 - alpha) * nll`.
pub fn combined_loss(nll: f64, word_kd: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "mixing weight {alpha} outside [0, 1]"
        )));
    }
    Ok(alpha * word_kd + (1.0 - alpha) * nll)
}

/// Exhaustive sequence-level distillation loss for one source sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqKdLoss {
    /// `-sum_t q(t|s) log p(t|s)`.
    pub loss: f64,
    /// Teacher probability covered by the enumeration.
    pub teacher_mass: f64,
    /// Most probable teacher output (ids ending in EOS).
    pub mode: Vec<usize>,
    pub mode_logprob: f64,
    pub sequences: usize,
}

/// Largest `|V|^max_len` enumerated.
pub const ENUMERATION_LIMIT: f64 = 1e6;

pub fn exact_seq_kd_loss<T: Scalar>(
    teacher: &Seq2SeqParams<T>,
    student: &Seq2SeqParams<T>,
    source: &[usize],
    max_len: usize,
) -> Result<SeqKdLoss> {
    if teacher.trg_vocab != student.trg_vocab {
        return Err(Error::Config(format!(
            "target vocabularies differ: {} vs {}",
            teacher.trg_vocab, student.trg_vocab
        )));
    }
    let q = enumerate_translations(teacher, source, max_len, ENUMERATION_LIMIT)?;
    let p = enumerate_translations(student, source, max_len, ENUMERATION_LIMIT)?;
    let mut out = SeqKdLoss {
        loss: 0.0,
        teacher_mass: 0.0,
        mode: vec![],
        mode_logprob: f64::NEG_INFINITY,
        sequences: q.len(),
    };
    for ((seq, lq), (seq_p, lp)) in q.iter().zip(&p) {
        debug_assert_eq!(seq, seq_p);
        let prob = lq.exp();
        out.loss -= prob * lp;
        out.teacher_mass += prob;
        if *lq > out.mode_logprob {
            out.mode_logprob = *lq;
            out.mode = seq.clone();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Seq2SeqConfig};

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn perfect_fit_is_zero() {
        let lp = t(&[vec![-1e30, -1e30, -1e30, -1e30, 0.0]]);
        assert_eq!(nll_loss(&lp, &[4], 0.0).unwrap().sum, 0.0);
    }

    #[test]
    fn uniform_is_log_v() {
        let v = 7;
        let lp = t(&vec![vec![-(v as f64).ln(); v]; 3]);
        let l = nll_loss(&lp, &[4, 5, PAD], 0.0).unwrap();
        assert_eq!(l.tokens, 2);
        assert!((l.mean() - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn smoothed_by_hand() {
        // V = 5, eps = 0.1: gold gets 0.9, others 0.025 each.
        let row1 = vec![-3.0, -2.0, -2.5, -4.0, -0.5];
        let row2 = vec![-1.0, -1.5, -3.0, -0.8, -2.0];
        let l = nll_loss(&t(&[row1, row2]), &[4, 3], 0.1).unwrap();
        let first = 0.9 * 0.5 + 0.025 * (3.0 + 2.0 + 2.5 + 4.0);
        let second = 0.9 * 0.8 + 0.025 * (1.0 + 1.5 + 3.0 + 2.0);
        assert!((l.sum - (first + second)).abs() < 1e-12);
    }

    #[test]
    fn word_kd_by_hand() {
        let q = t(&[vec![0.5, 0.25, 0.25]]);
        let lp = t(&[vec![0.25f64.ln(), 0.5f64.ln(), 0.25f64.ln()]]);
        let l = word_kd_loss(&lp, &q, &[true]).unwrap();
        let expected = -(0.5 * 0.25f64.ln() + 0.25 * 0.5f64.ln() + 0.25 * 0.25f64.ln());
        assert!((l.sum - expected).abs() < 1e-12);
    }

    #[test]
    fn word_kd_at_teacher_is_entropy() {
        let q = [0.5, 0.3, 0.2];
        let lp = t(&[q.iter().map(|p: &f64| p.ln()).collect()]);
        let l = word_kd_loss(&lp, &t(&[q.to_vec()]), &[true]).unwrap();
        let h: f64 = -q.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((l.sum - h).abs() < 1e-12);
    }

    #[test]
    fn word_kd_rejects_unnormalized() {
        let lp = t(&[vec![-1.0, -1.0]]);
        assert!(matches!(
            word_kd_loss(&lp, &t(&[vec![0.6, 0.6]]), &[true]),
            Err(Error::Unnormalized { position: 0, .. })
        ));
        assert!(word_kd_loss(&lp, &t(&[vec![0.6, 0.6]]), &[false]).is_ok());
    }

    #[test]
    fn combination() {
        assert_eq!(combined_loss(2.0, 4.0, 0.0).unwrap(), 2.0);
        assert_eq!(combined_loss(2.0, 4.0, 1.0).unwrap(), 4.0);
        assert_eq!(combined_loss(2.0, 4.0, 0.5).unwrap(), 3.0);
        assert!(combined_loss(2.0, 4.0, 1.5).is_err());
    }

    fn toy(seed: u64) -> Seq2SeqParams<f64> {
        let c = Seq2SeqConfig {
            embed_size: 3,
            hidden_size: 4,
            ..Seq2SeqConfig::small()
        };
        init_params(&c, 6, 5, seed).unwrap().cast()
    }

    #[test]
    fn seq_kd_self_is_entropy_and_minimal() {
        let q = toy(1);
        let same = exact_seq_kd_loss(&q, &q, &[4, 5], 3).unwrap();
        let all = enumerate_translations(&q, &[4, 5], 3, ENUMERATION_LIMIT).unwrap();
        let h: f64 = -all.iter().map(|(_, l)| l.exp() * l).sum::<f64>();
        assert!((same.loss - h).abs() < 1e-12);
        assert!(same.teacher_mass <= 1.0 + 1e-9);
        let mode = all
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert_eq!(same.mode, mode.0);
        // Gibbs on the truncated space: -sum q ln p >= -sum q ln q - Q ln(P / Q).
        for seed in 2..6 {
            let p = toy(seed);
            let cross = exact_seq_kd_loss(&q, &p, &[4, 5], 3).unwrap();
            let p_mass = exact_seq_kd_loss(&p, &p, &[4, 5], 3).unwrap().teacher_mass;
            let qm = same.teacher_mass;
            assert!(cross.loss >= same.loss - qm * (p_mass / qm).ln() - 1e-12);
        }
    }

    #[test]
    fn seq_kd_refuses_large_space() {
        let q = toy(0);
        assert!(matches!(
            exact_seq_kd_loss(&q, &q, &[4], 9),
            Err(Error::SearchSpaceTooLarge { .. })
        ));
    }
}
