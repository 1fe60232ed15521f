//! Synthetic translation tasks with a known conditional distribution.
//!
//! A source sentence is a sequence of phrases. Each phrase translates
//! independently into one of `m` target realizations (its modes), sampled
//! from `mode_probs`, after which every target token is replaced by a random
//! rare word with probability `noise_rate`. All modes of a phrase have the
//! same length, so a target sentence aligns to its source phrases by length.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::tensor::seeded_rng;
use crate::textproc::{Bitext, Sentence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    /// Number of distinct source phrases.
    pub source_vocab: usize,
    pub modes_per_phrase: usize,
    /// Mode distribution shared by all phrases, descending.
    pub mode_probs: Vec<f64>,
    pub noise_rate: f64,
    /// Size of the rare-word pool used by noise.
    pub rare_words: usize,
    /// Phrases per sentence, inclusive.
    pub sentence_len: (usize, usize),
    /// Source tokens per phrase, inclusive.
    pub phrase_len: (usize, usize),
    /// Target tokens per mode, inclusive.
    pub target_phrase_len: (usize, usize),
    /// Size of the target word pool modes are drawn from.
    pub target_words: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            source_vocab: 60,
            modes_per_phrase: 3,
            mode_probs: vec![0.6, 0.3, 0.1],
            noise_rate: 0.05,
            rare_words: 200,
            sentence_len: (3, 8),
            phrase_len: (1, 3),
            target_phrase_len: (1, 2),
            target_words: 120,
            seed: 1,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.source_vocab == 0 || self.modes_per_phrase == 0 {
            return bad("need at least one phrase and one mode".into());
        }
        if self.mode_probs.len() != self.modes_per_phrase {
            return bad(format!(
                "{} mode probabilities for {} modes",
                self.mode_probs.len(),
                self.modes_per_phrase
            ));
        }
        let sum: f64 = self.mode_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.mode_probs.iter().any(|&p| p < 0.0) {
            return bad(format!("mode probabilities sum to {sum}"));
        }
        if self.mode_probs.windows(2).any(|w| w[0] < w[1]) {
            return bad("mode probabilities must be descending".into());
        }
        if !(0.0..=1.0).contains(&self.noise_rate)
            || (self.noise_rate > 0.0 && self.rare_words == 0)
        {
            return bad(format!(
                "noise rate {} with {} rare words",
                self.noise_rate, self.rare_words
            ));
        }
        for (name, (lo, hi)) in [
            ("sentence_len", self.sentence_len),
            ("phrase_len", self.phrase_len),
            ("target_phrase_len", self.target_phrase_len),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range {lo}..={hi}"));
            }
        }
        let (lo, hi) = self.target_phrase_len;
        let capacity: f64 = (lo..=hi)
            .map(|l| (self.target_words as f64).powi(l as i32))
            .sum();
        if capacity < self.modes_per_phrase as f64 {
            return bad("target word pool too small for distinct modes".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    pub source: Vec<String>,
    /// Target realizations, most probable first.
    pub modes: Vec<Vec<String>>,
    pub probs: Vec<f64>,
}

/// The generating distribution: spec plus the sampled phrase inventory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    pub phrases: Vec<Phrase>,
    pub rare: Vec<String>,
    #[serde(skip)]
    word_index: HashMap<String, (usize, usize)>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const INVENTORY: u64 = 0x1a;
const SPLITS: [(&str, u64); 3] = [("train", 1), ("valid", 2), ("test", 3)];

fn fresh_word<R: Rng>(
    rng: &mut R,
    used: &mut HashSet<String>,
    syllables: (usize, usize),
) -> String {
    loop {
        let n = rng.gen_range(syllables.0..=syllables.1);
        let mut w = String::new();
        for _ in 0..n {
            w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

impl SyntheticTask {
    /// Samples the phrase inventory from `spec.seed`.
    pub fn new(spec: SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded_rng(spec.seed, &[INVENTORY]);
        let mut used = HashSet::new();
        let pool: Vec<String> = (0..spec.target_words)
            .map(|_| fresh_word(&mut rng, &mut used, (1, 3)))
            .collect();
        let rare: Vec<String> = (0..spec.rare_words)
            .map(|_| fresh_word(&mut rng, &mut used, (3, 4)))
            .collect();
        let mut phrases = Vec::with_capacity(spec.source_vocab);
        for _ in 0..spec.source_vocab {
            let len = rng.gen_range(spec.phrase_len.0..=spec.phrase_len.1);
            let source = (0..len)
                .map(|_| fresh_word(&mut rng, &mut used, (1, 3)))
                .collect();
            let tlen = rng.gen_range(spec.target_phrase_len.0..=spec.target_phrase_len.1);
            if (pool.len() as f64).powi(tlen as i32) < spec.modes_per_phrase as f64 {
                return Err(Error::Config(format!(
                    "target word pool too small for {} distinct modes",
                    spec.modes_per_phrase
                )));
            }
            let mut modes: Vec<Vec<String>> = Vec::with_capacity(spec.modes_per_phrase);
            while modes.len() < spec.modes_per_phrase {
                let m: Vec<String> = (0..tlen)
                    .map(|_| pool.choose(&mut rng).expect("non-empty pool").clone())
                    .collect();
                if !modes.contains(&m) {
                    modes.push(m);
                }
            }
            phrases.push(Phrase {
                source,
                modes,
                probs: spec.mode_probs.clone(),
            });
        }
        Ok(Self::from_parts(spec, phrases, rare))
    }

    fn from_parts(spec: SyntheticTaskSpec, phrases: Vec<Phrase>, rare: Vec<String>) -> Self {
        let mut word_index = HashMap::new();
        for (p, phrase) in phrases.iter().enumerate() {
            for (i, w) in phrase.source.iter().enumerate() {
                word_index.insert(w.clone(), (p, i));
            }
        }
        Self {
            spec,
            phrases,
            rare,
            word_index,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw: Self =
            serde_json::from_str(&std::fs::read_to_string(path).map_err(io_err(path))?)?;
        Ok(Self::from_parts(raw.spec, raw.phrases, raw.rare))
    }

    /// Splits a source sentence into phrase ids.
    pub fn parse_source(&self, source: &[String]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < source.len() {
            let &(p, pos) = self
                .word_index
                .get(&source[i])
                .ok_or_else(|| Error::UnknownPhrase(source[i].clone()))?;
            let phrase = &self.phrases[p].source;
            if pos != 0 || source.get(i..i + phrase.len()) != Some(&phrase[..]) {
                return Err(Error::UnknownPhrase(source[i..].join(" ")));
            }
            out.push(p);
            i += phrase.len();
        }
        Ok(out)
    }

    /// Samples one sentence pair from a dedicated stream.
    fn sample_pair(&self, split: u64, index: u64) -> (Sentence, Sentence) {
        let spec = &self.spec;
        let mut rng = seeded_rng(spec.seed, &[split, index]);
        let n = rng.gen_range(spec.sentence_len.0..=spec.sentence_len.1);
        let (mut src, mut trg) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let phrase = &self.phrases[rng.gen_range(0..self.phrases.len())];
            src.extend(phrase.source.iter().cloned());
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut mode = phrase.modes.len() - 1;
            for (m, &p) in phrase.probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    mode = m;
                    break;
                }
            }
            for tok in &phrase.modes[mode] {
                if spec.noise_rate > 0.0 && rng.gen::<f64>() < spec.noise_rate {
                    trg.push(self.rare[rng.gen_range(0..self.rare.len())].clone());
                } else {
                    trg.push(tok.clone());
                }
            }
        }
        (src, trg)
    }

    pub fn sample(&self, name: &str, split: u64, n: usize) -> Bitext {
        Bitext {
            name: name.to_string(),
            pairs: (0..n as u64).map(|i| self.sample_pair(split, i)).collect(),
        }
    }

    /// Train, valid and test corpora, each drawn from its own streams.
    pub fn generate_bitext(
        &self,
        n_train: usize,
        n_valid: usize,
        n_test: usize,
    ) -> SyntheticCorpora {
        let [train, valid, test] = [
            (SPLITS[0], n_train),
            (SPLITS[1], n_valid),
            (SPLITS[2], n_test),
        ]
        .map(|((name, split), n)| self.sample(name, split, n));
        SyntheticCorpora { train, valid, test }
    }

    /// Concatenation of each phrase's most probable mode.
    pub fn oracle_mode_translation(&self, source: &[String]) -> Result<Sentence> {
        Ok(self
            .parse_source(source)?
            .into_iter()
            .flat_map(|p| self.phrases[p].modes[0].iter().cloned())
            .collect())
    }

    fn token_prob(&self, observed: &str, intended: &str) -> f64 {
        let eta = self.spec.noise_rate;
        let mut p = if observed == intended { 1.0 - eta } else { 0.0 };
        if eta > 0.0 && self.rare.iter().any(|r| r == observed) {
            p += eta / self.rare.len() as f64;
        }
        p
    }

    /// Exact `D(target | source)`.
    pub fn conditional_probability(&self, source: &[String], target: &[String]) -> Result<f64> {
        let phrases = self.parse_source(source)?;
        let mut offset = 0;
        let mut prob = 1.0;
        for p in phrases {
            let phrase = &self.phrases[p];
            let len = phrase.modes[0].len();
            let Some(seg) = target.get(offset..offset + len) else {
                return Ok(0.0);
            };
            prob *= phrase
                .modes
                .iter()
                .zip(&phrase.probs)
                .map(|(mode, &pi)| {
                    pi * mode
                        .iter()
                        .zip(seg)
                        .map(|(m, o)| self.token_prob(o, m))
                        .product::<f64>()
                })
                .sum::<f64>();
            offset += len;
        }
        Ok(if offset == target.len() { prob } else { 0.0 })
    }

    /// Target segment per source phrase, or `None` when the target length
    /// does not match the phrase lengths.
    pub fn align(
        &self,
        source: &[String],
        target: &[String],
    ) -> Result<Option<Vec<(usize, Vec<String>)>>> {
        let phrases = self.parse_source(source)?;
        let total: usize = phrases
            .iter()
            .map(|&p| self.phrases[p].modes[0].len())
            .sum();
        if total != target.len() {
            return Ok(None);
        }
        let mut offset = 0;
        Ok(Some(
            phrases
                .into_iter()
                .map(|p| {
                    let len = self.phrases[p].modes[0].len();
                    offset += len;
                    (p, target[offset - len..offset].to_vec())
                })
                .collect(),
        ))
    }
}

pub struct SyntheticCorpora {
    pub train: Bitext,
    pub valid: Bitext,
    pub test: Bitext,
}

/// Empirical conditional entropy of the target realization given the source
/// phrase, in bits, averaged over the phrases that occur.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub bits: f64,
    pub phrases: usize,
    /// Pairs whose target length did not match the phrase structure.
    pub unaligned: usize,
}

pub fn conditional_entropy(bitext: &Bitext, task: &SyntheticTask) -> Result<EntropyReport> {
    let mut counts: HashMap<usize, HashMap<Vec<String>, usize>> = HashMap::new();
    let mut unaligned = 0;
    for (s, t) in &bitext.pairs {
        match task.align(s, t)? {
            Some(segments) => {
                for (p, seg) in segments {
                    *counts.entry(p).or_default().entry(seg).or_default() += 1;
                }
            }
            None => unaligned += 1,
        }
    }
    let mut keys: Vec<usize> = counts.keys().copied().collect();
    keys.sort_unstable();
    let entropies: Vec<f64> = keys
        .iter()
        .map(|p| {
            let c = &counts[p];
            let n: usize = c.values().sum();
            -c.values()
                .map(|&k| k as f64 / n as f64)
                .map(|f| f * f.log2())
                .sum::<f64>()
        })
        .collect();
    let bits = if entropies.is_empty() {
        0.0
    } else {
        entropies.iter().sum::<f64>() / entropies.len() as f64
    };
    Ok(EntropyReport {
        bits: bits.max(0.0),
        phrases: entropies.len(),
        unaligned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(m: usize, probs: &[f64], noise: f64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            modes_per_phrase: m,
            mode_probs: probs.to_vec(),
            noise_rate: noise,
            ..SyntheticTaskSpec::default()
        }
    }

    #[test]
    fn inventory_is_valid() {
        let task = SyntheticTask::new(SyntheticTaskSpec::default()).unwrap();
        assert_eq!(task.phrases.len(), 60);
        for p in &task.phrases {
            assert_eq!(p.modes.len(), 3);
            let lens: HashSet<usize> = p.modes.iter().map(Vec::len).collect();
            assert_eq!(lens.len(), 1);
            let distinct: HashSet<&Vec<String>> = p.modes.iter().collect();
            assert_eq!(distinct.len(), 3);
        }
    }

    #[test]
    fn deterministic_task_has_zero_entropy() {
        let task = SyntheticTask::new(spec(1, &[1.0], 0.0)).unwrap();
        let c = task.generate_bitext(300, 10, 10);
        let e = conditional_entropy(&c.train, &task).unwrap();
        assert_eq!(e.bits, 0.0);
        for (s, t) in &c.test.pairs {
            assert_eq!(&task.oracle_mode_translation(s).unwrap(), t);
        }
    }

    #[test]
    fn fair_coin_is_one_bit() {
        let task = SyntheticTask::new(SyntheticTaskSpec {
            source_vocab: 10,
            ..spec(2, &[0.5, 0.5], 0.0)
        })
        .unwrap();
        let c = task.generate_bitext(4000, 1, 1);
        let e = conditional_entropy(&c.train, &task).unwrap();
        assert!((e.bits - 1.0).abs() < 0.05, "{}", e.bits);
        assert_eq!(e.unaligned, 0);
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = SyntheticTask::new(SyntheticTaskSpec::default())
            .unwrap()
            .generate_bitext(50, 5, 5);
        let b = SyntheticTask::new(SyntheticTaskSpec::default())
            .unwrap()
            .generate_bitext(50, 5, 5);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_ne!(a.train.pairs[..5], a.valid.pairs[..]);
    }

    #[test]
    fn probability_normalizes_over_segments() {
        let task = SyntheticTask::new(SyntheticTaskSpec {
            rare_words: 3,
            ..spec(2, &[0.7, 0.3], 0.1)
        })
        .unwrap();
        let phrase = &task.phrases[0];
        let len = phrase.modes[0].len();
        let mut alphabet: Vec<String> = phrase.modes.iter().flatten().cloned().collect();
        alphabet.extend(task.rare.iter().cloned());
        alphabet.sort();
        alphabet.dedup();
        let mut total = 0.0;
        let mut stack = vec![vec![]];
        while let Some(prefix) = stack.pop() {
            if prefix.len() == len {
                total += task
                    .conditional_probability(&phrase.source, &prefix)
                    .unwrap();
                continue;
            }
            for w in &alphabet {
                let mut next = prefix.clone();
                next.push(w.clone());
                stack.push(next);
            }
        }
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }

    #[test]
    fn unknown_phrase_rejected() {
        let task = SyntheticTask::new(SyntheticTaskSpec::default()).unwrap();
        assert!(matches!(
            task.oracle_mode_translation(&["qqq".to_string()]),
            Err(Error::UnknownPhrase(_))
        ));
    }

    #[test]
    fn oracle_round_trip_through_json() {
        let task = SyntheticTask::new(SyntheticTaskSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracle.json");
        task.save(&path).unwrap();
        let loaded = SyntheticTask::load(&path).unwrap();
        assert_eq!(loaded.phrases, task.phrases);
        let s = &task.generate_bitext(1, 0, 0).train.pairs[0].0;
        assert_eq!(
            loaded.oracle_mode_translation(s).unwrap(),
            task.oracle_mode_translation(s).unwrap()
        );
    }
}
