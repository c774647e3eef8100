use std::collections::HashSet;
use std::io::Write;

use dami::corpus::{
    generate_synthetic, generate_synthetic_traced, Corpus, Dialogue, Label, Role, SplitSpec, SynthConfig,
    TriggerKind, TriggerRates, Utterance, WhitespaceTokenizer,
};
use proptest::prelude::*;

fn arb_dialogue(id: usize) -> impl Strategy<Value = Dialogue> {
    prop::collection::vec(
        (any::<bool>(), "[a-z]{1,6}( [a-z]{1,6}){0,4}", any::<bool>()),
        1..6,
    )
    .prop_map(move |utts| Dialogue {
        session_id: format!("d{id}"),
        utterances: utts
            .into_iter()
            .map(|(c, text, t)| {
                Utterance::new(
                    if c { Role::Customer } else { Role::Agent },
                    text,
                    if t { Label::Transferable } else { Label::Normal },
                )
            })
            .collect(),
    })
}

fn arb_corpus() -> impl Strategy<Value = Corpus> {
    (1usize..8)
        .prop_flat_map(|n| (0..n).map(arb_dialogue).collect::<Vec<_>>())
        .prop_map(|ds| Corpus::new(ds).unwrap())
}

proptest! {
    #[test]
    fn serialize_then_ingest_is_identity(c in arb_corpus()) {
        let text = c.to_jsonl_string();
        let back = Corpus::from_reader(text.as_bytes()).unwrap();
        prop_assert_eq!(back.dialogues, c.dialogues);
    }

    #[test]
    fn splits_partition_the_corpus(n in 10usize..200, seed in any::<u64>()) {
        let c = Corpus::new((0..n).map(|i| Dialogue {
            session_id: format!("s{i}"),
            utterances: vec![Utterance::new(Role::Customer, "x", Label::Normal)],
        }).collect()).unwrap();
        let spec = SplitSpec::new(0.8, 0.1, 0.1, seed).unwrap();
        let (a, b, t) = c.split(&spec).unwrap();
        let ids = |c: &Corpus| c.dialogues.iter().map(|d| d.session_id.clone()).collect::<HashSet<_>>();
        let (ia, ib, it) = (ids(&a), ids(&b), ids(&t));
        prop_assert!(ia.is_disjoint(&ib) && ia.is_disjoint(&it) && ib.is_disjoint(&it));
        prop_assert_eq!(ia.len() + ib.len() + it.len(), n);
        prop_assert_eq!(c.split(&spec).unwrap(), (a, b, t));
    }
}

#[test]
fn hundred_dialogues_split_80_10_10() {
    let c = Corpus::new(
        (0..100)
            .map(|i| Dialogue {
                session_id: format!("s{i}"),
                utterances: vec![Utterance::new(Role::Customer, "x", Label::Normal)],
            })
            .collect(),
    )
    .unwrap();
    let (a, b, t) = c.split(&SplitSpec::new(0.8, 0.1, 0.1, 3).unwrap()).unwrap();
    assert_eq!((a.len(), b.len(), t.len()), (80, 10, 10));
    let mut all: Vec<String> = [a, b, t]
        .iter()
        .flat_map(|p| p.dialogues.iter().map(|d| d.session_id.clone()))
        .collect();
    all.sort();
    let mut want: Vec<String> = (0..100).map(|i| format!("s{i}")).collect();
    want.sort();
    assert_eq!(all, want);
}

#[test]
fn ingests_a_corpus_of_table_size() {
    let c = generate_synthetic(&SynthConfig {
        n_dialogues: 3500,
        seed: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(c.to_jsonl_string().as_bytes()).unwrap();
    let back = Corpus::ingest_jsonl(f.path()).unwrap();
    assert_eq!(back.len(), 3500);
    assert_eq!(back.dialogues, c.dialogues);
}

#[test]
fn vocabulary_covers_every_token_and_is_reproducible() {
    let c = generate_synthetic(&SynthConfig {
        n_dialogues: 500,
        seed: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let a = c.build_vocabulary(1, &WhitespaceTokenizer).unwrap();
    let b = c.build_vocabulary(1, &WhitespaceTokenizer).unwrap();
    let (va, vb) = (a.vocabulary.unwrap(), b.vocabulary.unwrap());
    assert_eq!(va, vb);
    for d in &c.dialogues {
        for u in &d.utterances {
            for tok in u.text.split_whitespace() {
                assert!(va.contains(&tok.to_lowercase()), "{tok} has no id");
            }
        }
    }
}

#[test]
fn planted_repeats_always_carry_a_transferable_label() {
    let cfg = SynthConfig {
        n_dialogues: 1000,
        rates: TriggerRates {
            repeated_utterance: 0.5,
            ..TriggerRates::default()
        },
        seed: 13,
        ..SynthConfig::default()
    };
    let (c, traces) = generate_synthetic_traced(&cfg).unwrap();
    let mut with_repeat = 0;
    for (d, t) in c.dialogues.iter().zip(&traces) {
        // independent scan: a planted repeat reuses an earlier utterance's tokens
        let has_repeat = t.iter().any(|p| p.kind == TriggerKind::RepeatedUtterance);
        if has_repeat {
            with_repeat += 1;
            assert!(d.utterances.iter().any(|u| u.label == Label::Transferable), "{}", d.session_id);
        }
        // labels appear iff something was planted
        assert_eq!(d.has_handoff(), !t.is_empty());
    }
    assert!(with_repeat > 300);
}

#[test]
fn labels_are_stable_under_regeneration() {
    let cfg = SynthConfig {
        n_dialogues: 200,
        seed: 77,
        ..SynthConfig::default()
    };
    let labels = |c: Corpus| -> Vec<Vec<Label>> { c.dialogues.iter().map(Dialogue::labels).collect() };
    assert_eq!(
        labels(generate_synthetic(&cfg).unwrap()),
        labels(generate_synthetic(&cfg).unwrap())
    );
}
