use distillforge::textproc::{build_vocab, learn_bpe, Bitext, Codec, UNK};
use proptest::prelude::*;

fn word() -> impl Strategy<Value = String> {
    "[a-e]{1,7}"
}

fn corpus() -> impl Strategy<Value = Vec<Vec<String>>> {
    proptest::collection::vec(proptest::collection::vec(word(), 1..6), 1..12)
}

proptest! {
    #[test]
    fn bpe_round_trip(train in corpus(), test in proptest::collection::vec(word(), 0..8), merges in 0usize..40) {
        let bpe = learn_bpe(&train, merges).unwrap();
        let pieces = bpe.apply(&test);
        prop_assert_eq!(bpe.reverse(&pieces), test.clone());
        prop_assert!(pieces.len() >= test.len());
    }

    #[test]
    fn bpe_and_vocab_are_deterministic(train in corpus(), merges in 0usize..30) {
        let a = learn_bpe(&train, merges).unwrap();
        let b = learn_bpe(&train, merges).unwrap();
        prop_assert_eq!(a.merges(), b.merges());
        prop_assert!(a.num_merges() <= merges);
        let va = build_vocab(&train, 1);
        let vb = build_vocab(&train, 1);
        prop_assert_eq!(va.tokens(), vb.tokens());
        for s in &train {
            let ids = va.encode(s);
            prop_assert!(ids.iter().all(|&i| i != UNK));
            prop_assert_eq!(&va.decode(&ids), s);
        }
    }
}

#[test]
fn codec_decodes_what_it_encodes() {
    let s = |x: &str| x.split_whitespace().map(String::from).collect::<Vec<_>>();
    let train = Bitext::new(
        "t",
        vec![(s("ka lo mi"), s("tu ra")), (s("lo lo"), s("ra ra tu"))],
    )
    .unwrap();
    let codec = Codec::fit(&train, 2, 1).unwrap();
    let ids = codec.encode_target(&s("ra tu"));
    assert_eq!(codec.decode_target(&ids), s("ra tu"));
}
