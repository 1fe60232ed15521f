use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{io_err, Error, Result};

pub const DEFAULT_MARKER: &str = "@@";

type Pair = (String, String);

/// Ordered BPE merge list. Earlier merges have priority.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<Pair>,
    marker: String,
    ranks: HashMap<Pair, usize>,
}

/// Learns up to `num_merges` merges, greedily taking the most frequent
/// adjacent symbol pair within words. Ties go to the lexicographically
/// smallest `(left, right)`.
pub fn learn_bpe(corpus: &[Vec<String>], num_merges: usize) -> Result<BpeModel> {
    if corpus.iter().all(Vec::is_empty) {
        return Err(Error::EmptyCorpus);
    }
    let mut freq: HashMap<&str, i64> = HashMap::new();
    for word in corpus.iter().flatten() {
        *freq.entry(word.as_str()).or_default() += 1;
    }
    let mut words: Vec<(Vec<String>, i64)> = freq
        .into_iter()
        .map(|(w, c)| (w.chars().map(String::from).collect(), c))
        .collect();
    words.sort();

    let mut counts: HashMap<Pair, i64> = HashMap::new();
    let mut occurs: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (i, (syms, c)) in words.iter().enumerate() {
        for w in syms.windows(2) {
            let pair = (w[0].clone(), w[1].clone());
            *counts.entry(pair.clone()).or_default() += c;
            occurs.entry(pair).or_default().insert(i);
        }
    }

    let mut merges = Vec::with_capacity(num_merges);
    while merges.len() < num_merges {
        let best = counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            .map(|(p, _)| p.clone());
        let Some(best) = best else { break };
        let merged = format!("{}{}", best.0, best.1);
        let mut touched: Vec<usize> = occurs
            .remove(&best)
            .unwrap_or_default()
            .into_iter()
            .collect();
        touched.sort_unstable();
        for i in touched {
            let (syms, c) = &mut words[i];
            for w in syms.windows(2) {
                let pair = (w[0].clone(), w[1].clone());
                if let Some(n) = counts.get_mut(&pair) {
                    *n -= *c;
                }
            }
            *syms = merge_pair(syms, &best, &merged);
            for w in syms.windows(2) {
                let pair = (w[0].clone(), w[1].clone());
                *counts.entry(pair.clone()).or_default() += *c;
                occurs.entry(pair).or_default().insert(i);
            }
        }
        counts.retain(|_, n| *n > 0);
        merges.push(best);
    }
    Ok(BpeModel::new(merges, DEFAULT_MARKER))
}

fn merge_pair(syms: &[String], pair: &Pair, merged: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

/// Joins subwords carrying the continuation marker back onto their successor.
pub fn reverse_bpe(tokens: &[String], marker: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut pending = String::new();
    for tok in tokens {
        match tok.strip_suffix(marker) {
            Some(stem) => pending.push_str(stem),
            None => {
                pending.push_str(tok);
                out.push(std::mem::take(&mut pending));
            }
        }
    }
    if !pending.is_empty() {
        out.push(pending);
    }
    out
}

impl BpeModel {
    pub fn new(merges: Vec<(String, String)>, marker: &str) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Self {
            merges,
            marker: marker.to_string(),
            ranks,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn marker(&self) -> &str {
        &self.marker
    }

    /// Segments a single word into subwords, marking all but the last.
    pub fn apply_word(&self, word: &str) -> Vec<String> {
        let mut syms: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let pair = &self.merges[rank];
            let merged = format!("{}{}", pair.0, pair.1);
            syms = merge_pair(&syms, pair, &merged);
        }
        let last = syms.len().saturating_sub(1);
        for s in &mut syms[..last] {
            s.push_str(&self.marker);
        }
        syms
    }

    pub fn apply(&self, sentence: &[String]) -> Vec<String> {
        sentence.iter().flat_map(|w| self.apply_word(w)).collect()
    }

    pub fn reverse(&self, tokens: &[String]) -> Vec<String> {
        reverse_bpe(tokens, &self.marker)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("#bpe v1 marker={}\n", self.marker);
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        std::fs::write(path, out).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let marker = header
            .strip_prefix("#bpe v1 marker=")
            .ok_or_else(|| bad(format!("bad header {header:?}")))?;
        let mut merges = Vec::new();
        for (n, line) in lines.enumerate() {
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("line {}: {line:?}", n + 2)))?;
            merges.push((l.to_string(), r.to_string()));
        }
        Ok(Self::new(merges, marker))
    }
}
