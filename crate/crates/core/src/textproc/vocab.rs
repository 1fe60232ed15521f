use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{io_err, Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIALS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Bijective token/id map with the four specials at fixed ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

/// Specials first, then tokens with at least `min_count` occurrences by
/// descending frequency (ties lexicographic).
pub fn build_vocab(corpus: &[Vec<String>], min_count: usize) -> Vocabulary {
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for tok in corpus.iter().flatten() {
        if !SPECIALS.contains(&tok.as_str()) {
            *freq.entry(tok.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = freq.into_iter().filter(|&(_, c)| c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = SPECIALS
        .iter()
        .copied()
        .chain(kept.into_iter().map(|(t, _)| t))
        .map(String::from)
        .collect();
    Vocabulary::from_tokens(tokens, min_count)
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            index,
            min_count,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<usize> {
        sentence.iter().map(|t| self.id(t)).collect()
    }

    /// Tokens for `ids`, stopping at EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.tokens[i].clone())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{i}");
        }
        std::fs::write(path, out).map_err(io_err(path))
    }

    pub fn load(path: &Path, min_count: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let bad = || Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {}: {line:?}", n + 1),
            };
            let (tok, id) = line.rsplit_once('\t').ok_or_else(bad)?;
            if id.parse::<usize>().map_err(|_| bad())? != n {
                return Err(bad());
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIALS {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: "specials missing".into(),
            });
        }
        Ok(Self::from_tokens(tokens, min_count))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(String::from).collect())
            .collect()
    }

    #[test]
    fn counts_and_specials() {
        let v = build_vocab(&corpus(&["a a b"]), 1);
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.token(EOS), "</s>");
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
    }

    #[test]
    fn threshold_excludes_singletons() {
        let v = build_vocab(&corpus(&["a"]), 2);
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("a"), UNK);
    }

    #[test]
    fn min_count_one_covers_corpus() {
        let c = corpus(&["the cat sat", "on the mat", "zebra"]);
        let v = build_vocab(&c, 1);
        assert!(c.iter().flatten().all(|t| v.id(t) != UNK));
    }

    #[test]
    fn ties_lexicographic() {
        let v = build_vocab(&corpus(&["z y x y"]), 1);
        assert_eq!(&v.tokens()[4..], &["y", "x", "z"]);
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = build_vocab(&corpus(&["a b"]), 1);
        assert_eq!(v.decode(&[BOS, 4, 5, EOS, 4]), vec!["a", "b"]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        let v = build_vocab(&corpus(&["x y y z"]), 1);
        v.save(&path).unwrap();
        assert!(std::fs::read_to_string(&path)
            .unwrap()
            .starts_with("<pad>\t0\n<unk>\t1\n"));
        assert_eq!(Vocabulary::load(&path, 1).unwrap(), v);
    }
}
