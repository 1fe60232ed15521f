use std::collections::HashSet;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::BpeModel;
use crate::error::{io_err, Error, Result};

pub type Sentence = Vec<String>;

/// Line-aligned source/target corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitext {
    pub name: String,
    pub pairs: Vec<(Sentence, Sentence)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CorpusStats {
    /// Target-side token count.
    pub avg_tokens: usize,
    /// Distinct target-side words.
    pub vocab_size: usize,
}

/// Target-side token and word-type counts over pairs with a non-empty target.
pub fn corpus_stats(bitext: &Bitext) -> CorpusStats {
    let targets = bitext
        .pairs
        .iter()
        .map(|(_, t)| t)
        .filter(|t| !t.is_empty());
    let mut types = HashSet::new();
    let mut tokens = 0;
    for t in targets {
        tokens += t.len();
        types.extend(t.iter().map(String::as_str));
    }
    CorpusStats {
        avg_tokens: tokens,
        vocab_size: types.len(),
    }
}

fn check_tokens(s: &Sentence) -> bool {
    s.iter()
        .all(|t| !t.is_empty() && !t.chars().any(char::is_whitespace))
}

pub fn read_lines(path: &Path) -> Result<Vec<Sentence>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect())
}

pub fn write_lines(path: &Path, lines: &[Sentence]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

impl Bitext {
    pub fn new(name: impl Into<String>, pairs: Vec<(Sentence, Sentence)>) -> Result<Self> {
        if let Some(i) = pairs
            .iter()
            .position(|(s, t)| !check_tokens(s) || !check_tokens(t))
        {
            return Err(Error::Config(format!(
                "pair {i} has an empty or whitespace-bearing token"
            )));
        }
        Ok(Self {
            name: name.into(),
            pairs,
        })
    }

    pub fn from_sides(
        name: impl Into<String>,
        sources: Vec<Sentence>,
        targets: Vec<Sentence>,
    ) -> Result<Self> {
        if sources.len() != targets.len() {
            return Err(Error::LengthMismatch {
                hyps: sources.len(),
                refs: targets.len(),
            });
        }
        Self::new(name, sources.into_iter().zip(targets).collect())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<Sentence> {
        self.pairs.iter().map(|(s, _)| s.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Sentence> {
        self.pairs.iter().map(|(_, t)| t.clone()).collect()
    }

    /// Target-to-source direction, for training a back-translation teacher.
    pub fn swapped(&self) -> Self {
        let pairs = self
            .pairs
            .iter()
            .map(|(s, t)| (t.clone(), s.clone()))
            .collect();
        Self {
            name: format!("{}.rev", self.name),
            pairs,
        }
    }

    /// Drops pairs with an empty side or more than `max_len` subwords on
    /// either side; returns the kept corpus and the drop count.
    pub fn filter_long(
        &self,
        src_bpe: &BpeModel,
        trg_bpe: &BpeModel,
        max_len: usize,
    ) -> (Self, usize) {
        let pairs: Vec<_> = self
            .pairs
            .iter()
            .filter(|(s, t)| {
                !s.is_empty()
                    && !t.is_empty()
                    && src_bpe.apply(s).len() <= max_len
                    && trg_bpe.apply(t).len() <= max_len
            })
            .cloned()
            .collect();
        let dropped = self.len() - pairs.len();
        (
            Self {
                name: self.name.clone(),
                pairs,
            },
            dropped,
        )
    }

    pub fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
        (
            dir.join(format!("{name}.src")),
            dir.join(format!("{name}.trg")),
        )
    }

    /// Loads `<dir>/<name>.src` and `<dir>/<name>.trg`.
    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let (src, trg) = Self::paths(dir, name);
        let (s, t) = (read_lines(&src)?, read_lines(&trg)?);
        if s.len() != t.len() {
            return Err(Error::Format {
                path: trg,
                msg: format!("{} lines vs {} source lines", t.len(), s.len()),
            });
        }
        Self::from_sides(name, s, t)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let (src, trg) = Self::paths(dir, &self.name);
        write_lines(&src, &self.sources())?;
        write_lines(&trg, &self.targets())
    }

    /// SHA-256 over both sides in file format.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (s, t) in &self.pairs {
            h.update(s.join(" ").as_bytes());
            h.update(b"\t");
            h.update(t.join(" ").as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(s: &str) -> Sentence {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn stats_direct_count() {
        let b = Bitext::new("t", vec![(sent("a b"), sent("x y x"))]).unwrap();
        assert_eq!(
            corpus_stats(&b),
            CorpusStats {
                avg_tokens: 3,
                vocab_size: 2
            }
        );
    }

    #[test]
    fn stats_skip_empty_targets() {
        let b = Bitext::new("t", vec![(sent("a"), sent("")), (sent("b"), sent("q r"))]).unwrap();
        assert_eq!(
            corpus_stats(&b),
            CorpusStats {
                avg_tokens: 2,
                vocab_size: 2
            }
        );
    }

    #[test]
    fn rejects_bad_tokens() {
        assert!(Bitext::new("t", vec![(vec!["a b".into()], sent("x"))]).is_err());
        assert!(Bitext::new("t", vec![(vec![String::new()], sent("x"))]).is_err());
    }

    #[test]
    fn long_pairs_dropped() {
        let bpe = BpeModel::new(vec![], "@@");
        let b = Bitext::new(
            "t",
            vec![
                (sent("ab"), sent("c")),
                (sent("abcdef"), sent("c")),
                (sent("a"), sent("")),
            ],
        )
        .unwrap();
        let (kept, dropped) = b.filter_long(&bpe, &bpe, 3);
        assert_eq!(kept.len(), 1);
        assert_eq!(dropped, 2);
    }

    #[test]
    fn save_load() {
        let dir = tempfile::tempdir().unwrap();
        let b = Bitext::new(
            "base",
            vec![(sent("a b"), sent("x")), (sent("c"), sent("y z"))],
        )
        .unwrap();
        b.save(dir.path()).unwrap();
        assert_eq!(
            std::fs::read_to_string(dir.path().join("base.trg")).unwrap(),
            "x\ny z\n"
        );
        let back = Bitext::load(dir.path(), "base").unwrap();
        assert_eq!(back, b);
        assert_eq!(back.content_hash(), b.content_hash());
    }
}
