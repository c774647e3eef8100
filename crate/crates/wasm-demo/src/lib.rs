//! WebAssembly bindings for the static page in `www/`.
//!
//! Every export returns a JSON string; the page does the rendering.

use dami::corpus::{generate_synthetic_traced, Role, SynthConfig, TriggerRates};
use dami::featurize::{Featurizer, FrequencyTable, LexiconScorer, LexiconTagger, Tagger};
use dami::metrics::{f1_macro_f1, gtt_session, GttConfig};
use dami::corpus::Label;
use dami::model::{Dami, ModelConfig};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// Per-offset GT-T term for offsets `-max_offset..=max_offset`.
pub fn gtt_curve_json(tolerance: u32, lambda: f64, max_offset: u32) -> Result<String, String> {
    let cfg = GttConfig::new(tolerance, lambda).map_err(|e| e.to_string())?;
    let m = i64::from(max_offset);
    let points: Vec<_> = (-m..=m).map(|d| json!({"delta": d, "score": cfg.term(d)})).collect();
    Ok(serde_json::Value::Array(points).to_string())
}

#[wasm_bindgen]
pub fn gtt_curve(tolerance: u32, lambda: f64, max_offset: u32) -> Result<String, JsError> {
    js(gtt_curve_json(tolerance, lambda, max_offset))
}

fn parse_positions(s: &str) -> Result<Vec<usize>, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("`{t}` is not a position")))
        .collect()
}

/// Scores one session given comma-separated 0-based gold and predicted
/// handoff positions.
pub fn score_session_json(gold: &str, pred: &str, len: usize, lambda: f64) -> Result<String, String> {
    let (g, p) = (parse_positions(gold)?, parse_positions(pred)?);
    let mut out = serde_json::Map::new();
    for (t, key) in [(1, "GT-I"), (2, "GT-II"), (3, "GT-III")] {
        let cfg = GttConfig::new(t, lambda).map_err(|e| e.to_string())?;
        let s = gtt_session(&g, &p, len, &cfg).map_err(|e| e.to_string())?;
        out.insert(key.into(), json!(s));
    }
    let labels = |pos: &[usize]| -> Vec<Label> {
        (0..len)
            .map(|i| if pos.contains(&i) { Label::Transferable } else { Label::Normal })
            .collect()
    };
    let (f1, macro_f1) = f1_macro_f1(&labels(&g), &labels(&p)).map_err(|e| e.to_string())?;
    out.insert("F1".into(), json!(f1));
    out.insert("MacroF1".into(), json!(macro_f1));
    Ok(serde_json::Value::Object(out).to_string())
}

#[wasm_bindgen]
pub fn score_session(gold: &str, pred: &str, len: usize, lambda: f64) -> Result<String, JsError> {
    js(score_session_json(gold, pred, len, lambda))
}

/// A synthetic dialogue with its planted triggers and the matching matrix
/// of an untrained encoder. Identical utterances give identical vectors, so
/// repeats stand out in the matrix even before training.
pub fn synthetic_dialogue_json(seed: u32, repeat_rate: f64, emotion_rate: f64) -> Result<String, String> {
    let cfg = SynthConfig {
        n_dialogues: 64,
        rates: TriggerRates {
            repeated_utterance: repeat_rate,
            negative_emotion: emotion_rate,
            ..TriggerRates::default()
        },
        max_utterances: 12,
        seed: u64::from(seed),
        ..SynthConfig::default()
    };
    let (corpus, planted) = generate_synthetic_traced(&cfg).map_err(|e| e.to_string())?;
    let tagger = LexiconTagger::synthetic();
    let corpus = corpus.build_vocabulary(1, &tagger).map_err(|e| e.to_string())?;
    let vocabulary = corpus.vocabulary.as_ref().expect("vocabulary was just built");
    let frequencies = FrequencyTable::from_vocabulary(vocabulary).map_err(|e| e.to_string())?;
    let scorer = LexiconScorer::builtin();
    let featurizer = Featurizer {
        vocabulary,
        pos_tagset: tagger.tagset(),
        frequencies: &frequencies,
        tagger: &tagger,
        scorer: &scorer,
    };
    let dialogue = &corpus.dialogues[0];
    let feats = featurizer.dialogue(dialogue).map_err(|e| e.to_string())?;
    let model = Dami::new(
        ModelConfig {
            vocab_size: vocabulary.len(),
            embed_dim: 16,
            hidden: 8,
            attention: 8,
            max_dialogue_len: 12,
            ..ModelConfig::default()
        },
        u64::from(seed),
    )
    .map_err(|e| e.to_string())?;
    let matching = model.dialogue_matching(&feats).map_err(|e| e.to_string())?;
    let utterances: Vec<_> = dialogue
        .utterances
        .iter()
        .zip(&feats.utterances)
        .enumerate()
        .map(|(t, (u, f))| {
            let trigger = planted[0].iter().find(|p| p.position == t).map(|p| format!("{:?}", p.kind));
            json!({
                "role": if u.role == Role::Customer { "customer" } else { "agent" },
                "text": u.text,
                "label": u.label.index(),
                "trigger": trigger,
                "emotion": f.emotion,
            })
        })
        .collect();
    Ok(json!({"session_id": dialogue.session_id, "utterances": utterances, "matching": matching.values}).to_string())
}

#[wasm_bindgen]
pub fn synthetic_dialogue(seed: u32, repeat_rate: f64, emotion_rate: f64) -> Result<String, JsError> {
    js(synthetic_dialogue_json(seed, repeat_rate, emotion_rate))
}
