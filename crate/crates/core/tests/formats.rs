//! Corpus and dialogue file formats.

use memir_core::encoders::{load_corpus, parse_corpus, tokenize, EmbeddingCorpus};
use memir_core::evaluation::{
    gen_synthetic, load_dialogues, parse_dialogues, save_dialogues, DialogueRecord, RoundText, SyntheticConfig,
};
use memir_core::Error;
use proptest::collection::vec;
use proptest::prelude::*;

#[test]
fn synthetic_files_round_trip() {
    let ds = gen_synthetic(9, &SyntheticConfig { images: 50, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cp = dir.path().join("corpus.jsonl");
    ds.corpus.save(&cp).unwrap();
    assert_eq!(load_corpus(&cp).unwrap(), ds.corpus);
    let dp = dir.path().join("dialogues.jsonl");
    save_dialogues(&dp, &ds.dialogues).unwrap();
    assert_eq!(load_dialogues(&dp).unwrap(), ds.dialogues);
    assert!(matches!(load_corpus(dir.path().join("nope")), Err(Error::Io { .. })));
}

#[test]
fn corpus_errors_point_at_lines() {
    let ok = "{\"dim\":2,\"count\":1}\n{\"id\":\"a\",\"embedding\":[1,0],\"image_path\":\"a.png\"}\n";
    let c = parse_corpus(ok).unwrap();
    assert_eq!(c.image_path(0), Some("a.png"));
    let cases = [
        ("", 1),
        ("{\"dim\":2,\"count\":1}\n{\"id\":\"a\",\"embedding\":[1]}\n", 2),
        ("{\"dim\":2,\"count\":2}\n{\"id\":\"a\",\"embedding\":[1,0]}\n", 2),
        ("{\"dim\":2,\"count\":1}\nnot json\n", 2),
    ];
    for (text, line) in cases {
        match parse_corpus(text) {
            Err(Error::Parse { line: l, .. }) | Err(Error::Schema { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
}

#[test]
fn dialogue_errors() {
    assert!(matches!(parse_dialogues("{\"target_id\":\"\",\"caption\":\"x\",\"rounds\":[]}"), Err(Error::Schema { .. })));
    assert!(matches!(parse_dialogues("\n{oops"), Err(Error::Parse { line: 2, .. })));
    assert!(parse_dialogues("").unwrap().is_empty());
}

fn id_strategy() -> impl Strategy<Value = String> {
    "[a-z0-9_\\-\"\\\\é]{1,12}"
}

proptest! {
    #[test]
    fn corpus_text_round_trips(
        rows in vec((id_strategy(), vec(-1e6f64..1e6, 3), proptest::option::of("[a-z/]{1,8}\\.png")), 0..20),
    ) {
        let mut seen = std::collections::HashSet::new();
        let rows: Vec<_> = rows.into_iter().filter(|r| seen.insert(r.0.clone())).collect();
        let c = EmbeddingCorpus::new(3, rows).unwrap();
        prop_assert_eq!(parse_corpus(&c.to_jsonl()).unwrap(), c);
    }

    #[test]
    fn dialogues_round_trip(
        items in vec(("[a-z0-9]{1,6}", ".{0,30}", vec((".{0,20}", ".{0,20}"), 0..6)), 0..8),
    ) {
        let dl: Vec<DialogueRecord> = items
            .into_iter()
            .map(|(t, c, rs)| DialogueRecord {
                target_id: t,
                caption: c,
                rounds: rs.into_iter().map(|(q, a)| RoundText { q, a }).collect(),
            })
            .collect();
        let text = memir_core::evaluation::dialogue::dialogues_to_jsonl(&dl);
        prop_assert_eq!(parse_dialogues(&text).unwrap(), dl);
    }

    #[test]
    fn tokenizer_is_total_and_bounded(text in ".{0,200}", vocab in 2usize..5000) {
        let t = tokenize(&text, vocab);
        prop_assert!(t.ids.iter().all(|&i| (i as usize) < vocab));
        prop_assert_eq!(tokenize(&text, vocab), t);
    }
}
