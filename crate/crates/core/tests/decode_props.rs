mod common;

use distillforge::decode::{beam_search, enumerate_translations, translate_corpus, DecodeConfig};
use distillforge::model::CellType;
use distillforge::train::exact_seq_kd_loss;
use proptest::prelude::*;

fn cell(gru: bool) -> CellType {
    if gru {
        CellType::Gru
    } else {
        CellType::Lstm
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exhaustive_beam_is_exact(seed in 0u64..10_000, vocab in 5usize..7, max_len in 2usize..5, gru in any::<bool>()) {
        let p = common::tiny_model(cell(gru), vocab, seed);
        let check = common::beam_oracle_check(&p, &[4, 5, 6], max_len);
        prop_assert!(check.matches_argmax);
        prop_assert!(check.beam1_is_greedy);
    }

    #[test]
    fn top_score_non_decreasing_in_k(seed in 0u64..10_000, vocab in 5usize..9, gru in any::<bool>()) {
        let p = common::tiny_model(cell(gru), vocab, seed);
        let mut last = f64::NEG_INFINITY;
        for k in 1..=8 {
            let r = beam_search(&p, &[4, 7, 5], k, 6, false).unwrap();
            let top = r.hypotheses.iter().filter(|h| h.finished).map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(top >= last - 1e-12, "k={k}: {top} < {last}");
            last = top;
        }
    }

    #[test]
    fn hypotheses_are_well_formed(seed in 0u64..10_000, k in 1usize..6, norm in any::<bool>()) {
        let p = common::tiny_model(CellType::Lstm, 8, seed);
        let r = beam_search(&p, &[4, 5], k, 7, norm).unwrap();
        prop_assert!(!r.hypotheses.is_empty() && r.hypotheses.len() <= k);
        for w in r.hypotheses.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        for h in &r.hypotheses {
            prop_assert!(h.logprob <= 0.0);
            prop_assert!(h.tokens.len() <= 8);
            let expected = if norm { h.logprob / h.len() as f64 } else { h.logprob };
            prop_assert!((h.score - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn teacher_is_its_own_best_student() {
    for seed in 0..4 {
        let teacher = common::tiny_model(CellType::Lstm, 5, seed);
        let same = exact_seq_kd_loss(&teacher, &teacher, &[4, 6], 4).unwrap();
        for delta in [-0.3, 0.3] {
            let mut student = teacher.clone();
            for x in student.tensor_mut("out.b").data_mut().iter_mut().step_by(2) {
                *x += delta;
            }
            let other = exact_seq_kd_loss(&teacher, &student, &[4, 6], 4).unwrap();
            // Enumeration stops at max_len, so the masses Q (teacher) and P
            // (student) fall short of 1; Gibbs' inequality on the truncated
            // sums adds the Q ln(P / Q) slack.
            let q = same.teacher_mass;
            let p: f64 = enumerate_translations(&student, &[4, 6], 4, 1e6)
                .unwrap()
                .iter()
                .map(|(_, l)| l.exp())
                .sum();
            let bound = same.loss - q * (p / q).ln();
            assert!(
                other.loss >= bound - 1e-12,
                "seed {seed}: {} < {bound}",
                other.loss
            );
        }
    }
}

#[test]
fn corpus_translation_is_pure() {
    let p = common::tiny_model(CellType::Lstm, 9, 3).cast::<f32>();
    let sources: Vec<Vec<usize>> = (0..24)
        .map(|i| vec![4 + i % 4, 4 + (i * 3) % 4, 5])
        .collect();
    let config = DecodeConfig {
        beam_size: 3,
        nbest: 2,
        ..DecodeConfig::default()
    };
    let a = translate_corpus(&p, &sources, &config).unwrap();
    let b = translate_corpus(&p, &sources, &config).unwrap();
    assert_eq!(a.outputs, b.outputs);
    for (i, s) in sources.iter().enumerate() {
        let alone = translate_corpus(&p, std::slice::from_ref(s), &config).unwrap();
        assert_eq!(alone.outputs[0], a.outputs[i]);
    }
}
