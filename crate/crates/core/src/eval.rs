//! Tokenized corpus BLEU and trial aggregation.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Corpus-level BLEU with its components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// Score in percent, 0..=100.
    pub bleu: f64,
    pub ngram_precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    pub fn tsv_header() -> &'static str {
        "bleu\tp1\tp2\tp3\tp4\tbp\thyp_len\tref_len"
    }

    pub fn tsv(&self) -> String {
        let p = self.ngram_precisions;
        format!(
            "{:.2}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}",
            self.bleu, p[0], p[1], p[2], p[3], self.brevity_penalty, self.hyp_len, self.ref_len
        )
    }
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.ngram_precisions.map(|v| v * 100.0);
        write!(
            f,
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            p[0],
            p[1],
            p[2],
            p[3],
            self.brevity_penalty,
            if self.ref_len == 0 {
                0.0
            } else {
                self.hyp_len as f64 / self.ref_len as f64
            },
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(AsRef::as_ref).collect())
                .or_insert(0) += 1;
        }
    }
    counts
}

/// Single-reference 4-gram BLEU with clipped counts summed over the corpus,
/// brevity penalty, and no smoothing.
pub fn corpus_bleu<S: AsRef<str>>(
    hypotheses: &[Vec<S>],
    references: &[Vec<S>],
) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=4 {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            matches[n - 1] += h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    let precisions: [f64; 4] = std::array::from_fn(|i| {
        if totals[i] == 0 {
            0.0
        } else {
            matches[i] as f64 / totals[i] as f64
        }
    });
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        ngram_precisions: precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Per-trial scores and their arithmetic mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trials: Vec<(u64, f64)>,
    pub mean: f64,
}

impl TrialSummary {
    /// `name<TAB>trial...<TAB>avg`, two decimals.
    pub fn table_row(&self, name: &str) -> String {
        let mut cells = vec![name.to_string()];
        cells.extend(self.trials.iter().map(|(_, v)| format!("{v:.2}")));
        cells.push(format!("{:.2}", self.mean));
        cells.join("\t")
    }
}

pub fn aggregate_trials(reports: &[BleuReport], seeds: &[u64]) -> Result<TrialSummary> {
    if reports.is_empty() || reports.len() != seeds.len() {
        return Err(Error::Config(format!(
            "{} reports for {} seeds",
            reports.len(),
            seeds.len()
        )));
    }
    let trials: Vec<(u64, f64)> = seeds
        .iter()
        .copied()
        .zip(reports.iter().map(|r| r.bleu))
        .collect();
    let mean = trials.iter().map(|(_, v)| v).sum::<f64>() / trials.len() as f64;
    Ok(TrialSummary { trials, mean })
}
