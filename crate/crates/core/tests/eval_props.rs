use distillforge::eval::corpus_bleu;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn sentence() -> impl Strategy<Value = Vec<String>> {
    proptest::collection::vec("[a-f]", 4..10)
}

fn corpus() -> impl Strategy<Value = Vec<Vec<String>>> {
    proptest::collection::vec(sentence(), 1..8)
}

proptest! {
    #[test]
    fn identity_scores_100(refs in corpus()) {
        prop_assert!((corpus_bleu(&refs, &refs).unwrap().bleu - 100.0).abs() < 1e-9);
    }

    #[test]
    fn any_difference_scores_below_100(refs in corpus(), row in any::<prop::sample::Index>()) {
        let mut hyps = refs.clone();
        let i = row.index(hyps.len());
        hyps[i].push("zz".into());
        prop_assert!(corpus_bleu(&hyps, &refs).unwrap().bleu < 100.0);
    }

    #[test]
    fn report_fields_recompute_the_score(hyps in corpus(), refs in corpus()) {
        let n = hyps.len().min(refs.len());
        let r = corpus_bleu(&hyps[..n], &refs[..n]).unwrap();
        prop_assert!((0.0..=100.0).contains(&r.bleu));
        let expected = if r.ngram_precisions.contains(&0.0) {
            0.0
        } else {
            100.0 * r.brevity_penalty * (r.ngram_precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
        };
        prop_assert!((r.bleu - expected).abs() < 1e-9);
    }

    #[test]
    fn shorter_hypotheses_lower_brevity_penalty(refs in corpus()) {
        let cut = |k: usize| -> Vec<Vec<String>> { refs.iter().map(|r| r[..r.len() - k].to_vec()).collect() };
        let bp1 = corpus_bleu(&cut(1), &refs).unwrap().brevity_penalty;
        let bp2 = corpus_bleu(&cut(2), &refs).unwrap().brevity_penalty;
        prop_assert!(bp1 < 1.0 && bp2 < bp1);
    }

    #[test]
    fn order_does_not_matter(hyps in corpus(), refs in corpus(), seed in any::<u64>()) {
        let n = hyps.len().min(refs.len());
        let base = corpus_bleu(&hyps[..n], &refs[..n]).unwrap().bleu;
        let mut pairs: Vec<_> = hyps[..n].iter().cloned().zip(refs[..n].iter().cloned()).collect();
        pairs.shuffle(&mut distillforge::tensor::seeded_rng(seed, &[]));
        let (h, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        prop_assert_eq!(corpus_bleu(&h, &r).unwrap().bleu, base);
    }
}
