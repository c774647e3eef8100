//! Per-utterance features for the difficulty-assisted encoder: token ids,
//! POS tags, normalized term frequencies, sinusoidal positions and an
//! emotion score.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    synthetic_inventory, Corpus, Dialogue, Label, Role, Tokenize, Utterance, Vocabulary,
    WhitespaceTokenizer, NEGATIVE_WORDS, POSITIVE_WORDS, SYNTHETIC_TAGSET,
};
use crate::error::{Error, Result};

/// Sinusoidal encoding of a 1-based token position.
///
/// Entry `2i` is `sin(p / 10000^(2i/d))` and entry `2i+1` is
/// `cos(p / 10000^(2i/d))` with `p = position - 1`.
pub fn positional_encoding(position: usize, d: usize) -> Result<Vec<f64>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Featurize(format!("embedding dimension must be even and positive, got {d}")));
    }
    if position == 0 {
        return Err(Error::Featurize("positions are 1-based".into()));
    }
    let p = (position - 1) as f64;
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = p / 10000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

/// Corpus occurrence counts per vocabulary id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    counts: Vec<u64>,
    max_count: u64,
}

impl FrequencyTable {
    /// Counts are taken from the corpus vocabulary; the reserved ids
    /// (padding, unknown) have frequency 0.
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Featurize("cannot count an empty corpus".into()));
        }
        let vocab = corpus
            .vocabulary
            .as_ref()
            .ok_or_else(|| Error::Featurize("corpus has no vocabulary; build it first".into()))?;
        Self::from_vocabulary(vocab)
    }

    pub fn from_vocabulary(vocab: &Vocabulary) -> Result<Self> {
        let counts = vocab.counts().to_vec();
        let max_count = counts.iter().copied().max().unwrap_or(0);
        if max_count == 0 {
            return Err(Error::Featurize("vocabulary has no counted tokens".into()));
        }
        Ok(FrequencyTable { counts, max_count })
    }

    pub fn max_count(&self) -> u64 {
        self.max_count
    }

    /// Normalized frequency `count / max_count`; 0 for ids never counted.
    pub fn tf(&self, id: u32) -> f64 {
        match self.counts.get(id as usize) {
            Some(&c) => c as f64 / self.max_count as f64,
            None => 0.0,
        }
    }
}

/// Tokenizer plus part-of-speech tagger.
pub trait Tagger: Tokenize {
    /// Ordered tag inventory; its length is the POS one-hot width.
    fn tagset(&self) -> &[String];
    /// One tag from [`Tagger::tagset`] per token.
    fn tag(&self, tokens: &[String]) -> Vec<String>;
}

/// Maps a text to a polarity score.
pub trait EmotionScorer {
    fn score(&self, text: &str) -> f64;
}

/// Dictionary tagger over whitespace tokens; unknown tokens receive the
/// fallback tag.
#[derive(Clone, Debug)]
pub struct LexiconTagger {
    tags: HashMap<String, String>,
    tagset: Vec<String>,
    fallback: String,
}

impl LexiconTagger {
    pub fn new(tags: HashMap<String, String>, tagset: Vec<String>, fallback: &str) -> Result<Self> {
        if !tagset.iter().any(|t| t == fallback) {
            return Err(Error::Featurize(format!("fallback tag `{fallback}` is not in the tagset")));
        }
        if let Some((w, t)) = tags.iter().find(|(_, t)| !tagset.contains(t)) {
            return Err(Error::Featurize(format!("token `{w}` has tag `{t}` outside the tagset")));
        }
        Ok(LexiconTagger {
            tags,
            tagset,
            fallback: fallback.to_string(),
        })
    }

    /// Tagger for the synthetic generator's closed inventory.
    pub fn synthetic() -> Self {
        let tagset: Vec<String> = SYNTHETIC_TAGSET.iter().map(|s| s.to_string()).collect();
        let tags = synthetic_inventory()
            .into_iter()
            .map(|(w, t)| (w, SYNTHETIC_TAGSET[t].to_string()))
            .collect();
        LexiconTagger {
            tags,
            tagset,
            fallback: "NOUN".into(),
        }
    }

    /// Reads `token<TAB>tag` lines. The tagset is the distinct tags in
    /// first-seen order, followed by `fallback` if it did not occur.
    pub fn from_tsv(path: impl AsRef<Path>, fallback: &str) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tags = HashMap::new();
        let mut tagset: Vec<String> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (tok, tag) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected `token<TAB>tag`".into(),
            })?;
            let tag = tag.trim().to_string();
            if !tagset.contains(&tag) {
                tagset.push(tag.clone());
            }
            tags.insert(tok.trim().to_lowercase(), tag);
        }
        if !tagset.iter().any(|t| t == fallback) {
            tagset.push(fallback.to_string());
        }
        Self::new(tags, tagset, fallback)
    }
}

impl Tokenize for LexiconTagger {
    fn tokenize(&self, text: &str) -> Vec<String> {
        WhitespaceTokenizer.tokenize(text)
    }
}

impl Tagger for LexiconTagger {
    fn tagset(&self) -> &[String] {
        &self.tagset
    }

    fn tag(&self, tokens: &[String]) -> Vec<String> {
        tokens
            .iter()
            .map(|t| self.tags.get(t).unwrap_or(&self.fallback).clone())
            .collect()
    }
}

/// Signed lexicon average: the mean polarity of tokens found in the
/// lexicon, 0 when none match.
#[derive(Clone, Debug, Default)]
pub struct LexiconScorer {
    polarity: HashMap<String, f64>,
}

impl LexiconScorer {
    pub fn new(polarity: HashMap<String, f64>) -> Result<Self> {
        for (w, p) in &polarity {
            if !(p.is_finite() && (-1.0..=1.0).contains(p)) {
                return Err(Error::Featurize(format!("polarity of `{w}` must lie in [-1, 1], got {p}")));
            }
        }
        Ok(LexiconScorer { polarity })
    }

    /// Built-in English cue lexicon matching the synthetic generator.
    pub fn builtin() -> Self {
        let polarity = NEGATIVE_WORDS
            .iter()
            .chain(POSITIVE_WORDS.iter())
            .map(|(w, _, p)| (w.to_string(), *p))
            .collect();
        LexiconScorer { polarity }
    }

    /// Reads `token<TAB>polarity` lines.
    pub fn from_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut polarity = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                line: i + 1,
                message,
            };
            let (tok, val) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected `token<TAB>polarity`".into()))?;
            let v: f64 = val
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad polarity `{}`: {e}", val.trim())))?;
            if !(-1.0..=1.0).contains(&v) {
                return Err(parse_err(format!("polarity {v} outside [-1, 1]")));
            }
            polarity.insert(tok.trim().to_lowercase(), v);
        }
        Ok(LexiconScorer { polarity })
    }

    pub fn len(&self) -> usize {
        self.polarity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polarity.is_empty()
    }
}

impl EmotionScorer for LexiconScorer {
    fn score(&self, text: &str) -> f64 {
        let (sum, n) = WhitespaceTokenizer
            .tokenize(text)
            .iter()
            .filter_map(|t| self.polarity.get(t))
            .fold((0.0, 0usize), |(s, n), p| (s + p, n + 1));
        if n == 0 {
            0.0
        } else {
            (sum / n as f64).clamp(-1.0, 1.0)
        }
    }
}

/// Feature bundle for one utterance. All per-token sequences share the
/// utterance length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturizedUtterance {
    pub token_ids: Vec<u32>,
    /// Index into the POS tagset per token (the one-hot's hot column).
    pub pos_tags: Vec<u16>,
    pub term_freqs: Vec<f64>,
    /// 1-based token positions.
    pub positions: Vec<u32>,
    pub emotion: f64,
    /// 1 for customer, 0 for agent.
    pub role: u8,
}

impl FeaturizedUtterance {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn role_indicator(&self) -> f64 {
        f64::from(self.role)
    }

    /// `len x n_tags` one-hot matrix in row-major order.
    pub fn pos_onehots(&self, n_tags: usize) -> Vec<Vec<f64>> {
        self.pos_tags
            .iter()
            .map(|&t| {
                let mut row = vec![0.0; n_tags];
                row[t as usize] = 1.0;
                row
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturizedDialogue {
    pub session_id: String,
    pub utterances: Vec<FeaturizedUtterance>,
    pub labels: Vec<Label>,
}

impl FeaturizedDialogue {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Featurizes `utt` against a corpus vocabulary and tagset.
pub fn featurize_utterance(
    utt: &Utterance,
    vocab: &Vocabulary,
    pos_tagset: &[String],
    freq: &FrequencyTable,
    tagger: &dyn Tagger,
    scorer: &dyn EmotionScorer,
) -> Result<FeaturizedUtterance> {
    let tokens = tagger.tokenize(&utt.text);
    if tokens.is_empty() {
        return Err(Error::Featurize(format!("utterance `{}` has no tokens", utt.text)));
    }
    let tags = tagger.tag(&tokens);
    if tags.len() != tokens.len() {
        return Err(Error::Featurize(format!(
            "tagger returned {} tags for {} tokens",
            tags.len(),
            tokens.len()
        )));
    }
    let pos_tags = tags
        .iter()
        .map(|t| {
            pos_tagset
                .iter()
                .position(|s| s == t)
                .map(|i| i as u16)
                .ok_or_else(|| Error::Featurize(format!("tag `{t}` is not in the corpus tagset")))
        })
        .collect::<Result<Vec<_>>>()?;
    let token_ids: Vec<u32> = tokens.iter().map(|t| vocab.id(t)).collect();
    let term_freqs = token_ids.iter().map(|&id| freq.tf(id)).collect();
    let emotion = scorer.score(&utt.text);
    if !emotion.is_finite() {
        return Err(Error::Featurize(format!("emotion scorer returned {emotion}")));
    }
    Ok(FeaturizedUtterance {
        positions: (1..=token_ids.len() as u32).collect(),
        token_ids,
        pos_tags,
        term_freqs,
        emotion: emotion.clamp(-1.0, 1.0),
        role: match utt.role {
            Role::Customer => 1,
            Role::Agent => 0,
        },
    })
}

/// Vocabulary, frequency table, tagset and plug-ins bundled for
/// featurizing whole corpora.
pub struct Featurizer<'a> {
    pub vocabulary: &'a Vocabulary,
    pub pos_tagset: &'a [String],
    pub frequencies: &'a FrequencyTable,
    pub tagger: &'a dyn Tagger,
    pub scorer: &'a dyn EmotionScorer,
}

impl Featurizer<'_> {
    pub fn utterance(&self, utt: &Utterance) -> Result<FeaturizedUtterance> {
        featurize_utterance(
            utt,
            self.vocabulary,
            self.pos_tagset,
            self.frequencies,
            self.tagger,
            self.scorer,
        )
    }

    pub fn dialogue(&self, d: &Dialogue) -> Result<FeaturizedDialogue> {
        let utterances = d
            .utterances
            .iter()
            .map(|u| self.utterance(u))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Featurize(format!("session `{}`: {e}", d.session_id)))?;
        Ok(FeaturizedDialogue {
            session_id: d.session_id.clone(),
            utterances,
            labels: d.labels(),
        })
    }

    pub fn corpus(&self, c: &Corpus) -> Result<Vec<FeaturizedDialogue>> {
        c.dialogues.iter().map(|d| self.dialogue(d)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Dialogue, Label};

    fn corpus(text: &str) -> Corpus {
        Corpus::new(vec![Dialogue {
            session_id: "a".into(),
            utterances: vec![Utterance::new(Role::Customer, text, Label::Normal)],
        }])
        .unwrap()
        .build_vocabulary(1, &WhitespaceTokenizer)
        .unwrap()
    }

    #[test]
    fn first_position_is_sin0_cos0() {
        assert_eq!(positional_encoding(1, 4).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
        assert!(positional_encoding(1, 5).is_err());
        assert!(positional_encoding(0, 4).is_err());
    }

    #[test]
    fn positional_values_in_unit_range() {
        for p in 1..300 {
            assert!(positional_encoding(p, 16).unwrap().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn term_frequency_ratio() {
        let c = corpus("a a b");
        let f = FrequencyTable::from_corpus(&c).unwrap();
        let v = c.vocabulary.as_ref().unwrap();
        assert_eq!(f.tf(v.id("a")), 1.0);
        assert_eq!(f.tf(v.id("b")), 0.5);
        assert_eq!(f.tf(v.id("never")), 0.0);
        assert_eq!(f.tf(9999), 0.0);
        assert!(FrequencyTable::from_corpus(&Corpus::default()).is_err());
    }

    #[test]
    fn shapes_and_role() {
        let c = corpus("w1 w2 w3 w4 w5");
        let f = FrequencyTable::from_corpus(&c).unwrap();
        let tagset: Vec<String> = (0..10).map(|i| format!("T{i}")).collect();
        let tagger = LexiconTagger::new(HashMap::new(), tagset.clone(), "T3").unwrap();
        let scorer = LexiconScorer::builtin();
        let u = Utterance::new(Role::Customer, "w1 w2 w3 w4 w5", Label::Normal);
        let fu = featurize_utterance(&u, c.vocabulary.as_ref().unwrap(), &tagset, &f, &tagger, &scorer)
            .unwrap();
        assert_eq!(fu.len(), 5);
        assert_eq!(fu.term_freqs.len(), 5);
        assert_eq!(fu.positions, vec![1, 2, 3, 4, 5]);
        let onehots = fu.pos_onehots(10);
        assert_eq!(onehots.len(), 5);
        assert!(onehots.iter().all(|r| r.len() == 10 && r.iter().sum::<f64>() == 1.0));
        assert_eq!(fu.role, 1);
        assert_eq!(fu.emotion, 0.0);
    }

    #[test]
    fn negative_token_scores_below_zero() {
        let s = LexiconScorer::builtin();
        assert!(s.score("this is terrible") < 0.0);
        assert_eq!(s.score("bako tiru"), 0.0);
        assert!(s.score("thanks great") > 0.0);
    }

    struct BrokenTagger;
    impl Tokenize for BrokenTagger {
        fn tokenize(&self, text: &str) -> Vec<String> {
            WhitespaceTokenizer.tokenize(text)
        }
    }
    impl Tagger for BrokenTagger {
        fn tagset(&self) -> &[String] {
            &[]
        }
        fn tag(&self, _: &[String]) -> Vec<String> {
            vec![]
        }
    }

    #[test]
    fn tagger_mismatch_and_empty_text_rejected() {
        let c = corpus("x y");
        let f = FrequencyTable::from_corpus(&c).unwrap();
        let v = c.vocabulary.as_ref().unwrap();
        let u = Utterance::new(Role::Agent, "x y", Label::Normal);
        let err = featurize_utterance(&u, v, &[], &f, &BrokenTagger, &LexiconScorer::default());
        assert!(matches!(err, Err(Error::Featurize(_))));
        let tagger = LexiconTagger::synthetic();
        let blank = Utterance::new(Role::Agent, "   ", Label::Normal);
        let err = featurize_utterance(&blank, v, tagger.tagset(), &f, &tagger, &LexiconScorer::default());
        assert!(err.is_err());
    }

    #[test]
    fn lexicon_files() {
        let dir = tempfile::tempdir().unwrap();
        let lex = dir.path().join("lex.tsv");
        fs::write(&lex, "bad\t-0.5\ngood\t1\n").unwrap();
        let s = LexiconScorer::from_tsv(&lex).unwrap();
        assert_eq!(s.score("bad good"), 0.25);
        fs::write(&lex, "bad\t-3\n").unwrap();
        assert!(matches!(LexiconScorer::from_tsv(&lex), Err(Error::Parse { line: 1, .. })));

        let pos = dir.path().join("pos.tsv");
        fs::write(&pos, "cat\tN\nrun\tV\n").unwrap();
        let t = LexiconTagger::from_tsv(&pos, "X").unwrap();
        assert_eq!(t.tagset(), &["N", "V", "X"]);
        assert_eq!(t.tag(&["cat".into(), "zzz".into()]), vec!["N", "X"]);
    }
}
