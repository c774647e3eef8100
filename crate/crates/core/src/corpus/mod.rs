//! Dialogue data model, JSONL ingestion, splitting and vocabulary construction.
//!
//! A corpus file holds one dialogue per line:
//!
//! ```text
//! {"session_id": "s1", "utterances": [{"role": "customer", "text": "hi", "label": 0}, ...]}
//! ```
//!
//! where `label` 1 marks a transferable utterance.

mod synth;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub use synth::{
    generate_synthetic, generate_synthetic_traced, PlantedTrigger, SynthConfig, TriggerKind,
    TriggerRates, SYNTHETIC_TAGSET,
};
pub(crate) use synth::{synthetic_inventory, NEGATIVE_WORDS, POSITIVE_WORDS};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Customer,
    Agent,
}

impl Role {
    /// Role indicator used by the role-mixed attention: 1 for customer, 0 for agent.
    pub fn indicator(self) -> f64 {
        match self {
            Role::Customer => 1.0,
            Role::Agent => 0.0,
        }
    }

    pub fn other(self) -> Role {
        match self {
            Role::Customer => Role::Agent,
            Role::Agent => Role::Customer,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Label {
    #[default]
    Normal,
    Transferable,
}

impl Label {
    pub fn from_index(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Normal),
            1 => Some(Label::Transferable),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Transferable => 1,
        }
    }

    pub fn is_transferable(self) -> bool {
        self == Label::Transferable
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.index() as u8)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Label::from_index(v)
            .ok_or_else(|| serde::de::Error::custom(format!("label must be 0 or 1, got {v}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub role: Role,
    pub text: String,
    pub label: Label,
}

impl Utterance {
    pub fn new(role: Role, text: impl Into<String>, label: Label) -> Self {
        Utterance {
            role,
            text: text.into(),
            label,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub session_id: String,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.utterances.iter().map(|u| u.label).collect()
    }

    /// 0-based positions of transferable utterances.
    pub fn transferable_positions(&self) -> Vec<usize> {
        self.utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.label.is_transferable())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn has_handoff(&self) -> bool {
        self.utterances.iter().any(|u| u.label.is_transferable())
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.utterances.is_empty() {
            return Err(format!("dialogue `{}` has no utterances", self.session_id));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if u.text.trim().is_empty() {
                return Err(format!(
                    "dialogue `{}` utterance {i} has empty text",
                    self.session_id
                ));
            }
        }
        Ok(())
    }
}

/// Splits utterance text into tokens.
pub trait Tokenize {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Lower-cased whitespace tokenization. Real Chinese corpora are expected to
/// arrive pre-segmented with spaces between words.
#[derive(Clone, Copy, Debug, Default)]
pub struct WhitespaceTokenizer;

impl Tokenize for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_lowercase).collect()
    }
}

/// Token to id map. Id 0 is padding and id 1 is the unknown token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    /// Corpus occurrence count per id; zero for the reserved ids.
    counts: Vec<u64>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from explicit `(token, count)` pairs in id order,
    /// starting after the reserved ids.
    pub fn from_counts(entries: Vec<(String, u64)>) -> Result<Self> {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut counts = vec![0, 0];
        for (tok, c) in entries {
            tokens.push(tok);
            counts.push(c);
        }
        let mut vocab = Vocabulary {
            tokens,
            counts,
            index: HashMap::new(),
        };
        vocab.rebuild_index()?;
        Ok(vocab)
    }

    fn rebuild_index(&mut self) -> Result<()> {
        self.index = HashMap::with_capacity(self.tokens.len());
        for (i, t) in self.tokens.iter().enumerate() {
            if self.index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Corpus(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(())
    }

    /// Restores the lookup index after deserialization.
    pub fn reindex(mut self) -> Result<Self> {
        if self.tokens.len() != self.counts.len() {
            return Err(Error::Corpus("vocabulary tokens and counts differ in length".into()));
        }
        if self.tokens.first().map(String::as_str) != Some(PAD_TOKEN)
            || self.tokens.get(1).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(Error::Corpus("vocabulary is missing its reserved ids".into()));
        }
        self.rebuild_index()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

/// Corpus-level counts in the style of a dataset statistics table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub dialogues: usize,
    pub normal_dialogues: usize,
    pub dialogues_with_handoff: usize,
    pub utterances: usize,
    pub normal_utterances: usize,
    pub transferable_utterances: usize,
    pub mean_utterances_per_dialogue: f64,
    pub mean_tokens_per_utterance: f64,
    pub std_tokens_per_utterance: f64,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dialogues                 {}", self.dialogues)?;
        writeln!(f, "normal dialogues          {}", self.normal_dialogues)?;
        writeln!(f, "dialogues with handoff    {}", self.dialogues_with_handoff)?;
        writeln!(f, "utterances                {}", self.utterances)?;
        writeln!(f, "normal utterances         {}", self.normal_utterances)?;
        writeln!(f, "transferable utterances   {}", self.transferable_utterances)?;
        writeln!(f, "avg utterances/dialogue   {:.2}", self.mean_utterances_per_dialogue)?;
        writeln!(f, "avg tokens/utterance      {:.2}", self.mean_tokens_per_utterance)?;
        write!(f, "std tokens/utterance      {:.2}", self.std_tokens_per_utterance)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
    pub vocabulary: Option<Vocabulary>,
    pub pos_tagset: Vec<String>,
}

impl Corpus {
    /// Validates dialogues (non-empty, non-blank text, unique session ids).
    pub fn new(dialogues: Vec<Dialogue>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(dialogues.len());
        for d in &dialogues {
            d.validate().map_err(Error::Corpus)?;
            if !seen.insert(d.session_id.as_str()) {
                return Err(Error::Corpus(format!("duplicate session_id `{}`", d.session_id)));
            }
        }
        Ok(Corpus {
            dialogues,
            vocabulary: None,
            pos_tagset: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn with_tagset(mut self, tagset: Vec<String>) -> Self {
        self.pos_tagset = tagset;
        self
    }

    /// Number of POS categories.
    pub fn n_pos(&self) -> usize {
        self.pos_tagset.len()
    }

    /// Reads a JSONL corpus. Blank lines are skipped; line numbers are 1-based.
    pub fn ingest_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut dialogues = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::io("<reader>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let d: Dialogue = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            d.validate().map_err(|message| Error::Parse {
                line: line_no,
                message,
            })?;
            if !seen.insert(d.session_id.clone()) {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("duplicate session_id `{}`", d.session_id),
                });
            }
            dialogues.push(d);
        }
        Ok(Corpus {
            dialogues,
            vocabulary: None,
            pos_tagset: Vec::new(),
        })
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut out = String::new();
        for d in &self.dialogues {
            out.push_str(&serde_json::to_string(d).expect("dialogue serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl_string().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Partitions dialogues into train/valid/test according to `spec`.
    ///
    /// Dialogues are shuffled with a seeded RNG; each part keeps the
    /// original file order. Vocabulary and tagset are shared by all parts.
    pub fn split(&self, spec: &SplitSpec) -> Result<(Corpus, Corpus, Corpus)> {
        spec.validate()?;
        if self.dialogues.is_empty() {
            return Err(Error::Split("cannot split an empty corpus".into()));
        }
        let (n_train, n_valid, n_test) = spec.sizes(self.len());
        if n_train == 0 || n_valid == 0 || n_test == 0 {
            return Err(Error::Split(format!(
                "{} dialogues give split sizes ({n_train}, {n_valid}, {n_test}); \
                 at least {} dialogues are needed for non-empty parts",
                self.len(),
                spec.minimum_corpus_size()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        order.shuffle(&mut rng);
        let part = |idx: &[usize]| {
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            Corpus {
                dialogues: idx.iter().map(|&i| self.dialogues[i].clone()).collect(),
                vocabulary: self.vocabulary.clone(),
                pos_tagset: self.pos_tagset.clone(),
            }
        };
        Ok((
            part(&order[..n_train]),
            part(&order[n_train..n_train + n_valid]),
            part(&order[n_train + n_valid..]),
        ))
    }

    /// Returns a copy of the corpus with a vocabulary over all tokens.
    ///
    /// Tokens seen fewer than `min_count` times are left out and map to
    /// the unknown id. Ids are assigned by descending count, ties broken
    /// lexicographically.
    pub fn build_vocabulary(&self, min_count: u64, tokenizer: &dyn Tokenize) -> Result<Corpus> {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        if self.dialogues.is_empty() {
            return Err(Error::Corpus("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for d in &self.dialogues {
            for u in &d.utterances {
                for tok in tokenizer.tokenize(&u.text) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut entries: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let vocabulary = Vocabulary::from_counts(entries)?;
        Ok(Corpus {
            dialogues: self.dialogues.clone(),
            vocabulary: Some(vocabulary),
            pos_tagset: self.pos_tagset.clone(),
        })
    }

    pub fn stats(&self, tokenizer: &dyn Tokenize) -> CorpusStats {
        let mut s = CorpusStats {
            dialogues: self.len(),
            normal_dialogues: 0,
            dialogues_with_handoff: 0,
            utterances: 0,
            normal_utterances: 0,
            transferable_utterances: 0,
            mean_utterances_per_dialogue: 0.0,
            mean_tokens_per_utterance: 0.0,
            std_tokens_per_utterance: 0.0,
        };
        let mut lens = Vec::new();
        for d in &self.dialogues {
            if d.has_handoff() {
                s.dialogues_with_handoff += 1;
            } else {
                s.normal_dialogues += 1;
            }
            for u in &d.utterances {
                s.utterances += 1;
                match u.label {
                    Label::Normal => s.normal_utterances += 1,
                    Label::Transferable => s.transferable_utterances += 1,
                }
                lens.push(tokenizer.tokenize(&u.text).len() as f64);
            }
        }
        if s.dialogues > 0 {
            s.mean_utterances_per_dialogue = s.utterances as f64 / s.dialogues as f64;
        }
        if !lens.is_empty() {
            let n = lens.len() as f64;
            let mean = lens.iter().sum::<f64>() / n;
            let var = lens.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
            s.mean_tokens_per_utterance = mean;
            s.std_tokens_per_utterance = var.sqrt();
        }
        s
    }
}

/// Train/valid/test fractions and the shuffle seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn new(train: f64, valid: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            train,
            valid,
            test,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::Split(format!("fractions must be positive, got {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Split(format!("fractions must sum to 1, got {sum}")));
        }
        Ok(())
    }

    /// Part sizes for `n` dialogues; the test part absorbs rounding.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let n_train = (((n as f64) * self.train).round() as usize).min(n);
        let n_valid = (((n as f64) * self.valid).round() as usize).min(n - n_train);
        (n_train, n_valid, n - n_train - n_valid)
    }

    /// Smallest corpus size for which all three parts are non-empty.
    pub fn minimum_corpus_size(&self) -> usize {
        (3..)
            .find(|&n| {
                let (a, b, c) = self.sizes(n);
                a > 0 && b > 0 && c > 0
            })
            .expect("some size yields non-empty parts")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dialogue(id: &str, texts: &[(&str, Role, u8)]) -> Dialogue {
        Dialogue {
            session_id: id.into(),
            utterances: texts
                .iter()
                .map(|(t, r, l)| Utterance::new(*r, *t, Label::from_index(*l).unwrap()))
                .collect(),
        }
    }

    fn corpus_of(n: usize) -> Corpus {
        Corpus::new(
            (0..n)
                .map(|i| dialogue(&format!("s{i}"), &[("hello there", Role::Customer, 0)]))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn ingest_two_utterances() {
        let line = r#"{"session_id":"a","utterances":[{"role":"customer","text":"where is my parcel","label":0},{"role":"agent","text":"let me check","label":1}]}"#;
        let c = Corpus::from_reader(line.as_bytes()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.dialogues[0].len(), 2);
        assert_eq!(c.dialogues[0].utterances[1].label, Label::Transferable);
        assert_eq!(c.dialogues[0].utterances[1].role, Role::Agent);
    }

    #[test]
    fn missing_label_names_line() {
        let text = concat!(
            r#"{"session_id":"a","utterances":[{"role":"customer","text":"x","label":0}]}"#,
            "\n",
            r#"{"session_id":"b","utterances":[{"role":"customer","text":"x"}]}"#,
            "\n"
        );
        match Corpus::from_reader(text.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("label"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_role_and_empty_dialogue_rejected() {
        let bad_role = r#"{"session_id":"a","utterances":[{"role":"bot","text":"x","label":0}]}"#;
        assert!(matches!(
            Corpus::from_reader(bad_role.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        let empty = r#"{"session_id":"a","utterances":[]}"#;
        assert!(matches!(
            Corpus::from_reader(empty.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        let bad_label = r#"{"session_id":"a","utterances":[{"role":"agent","text":"x","label":2}]}"#;
        assert!(Corpus::from_reader(bad_label.as_bytes()).is_err());
        let blank = r#"{"session_id":"a","utterances":[{"role":"agent","text":"   ","label":0}]}"#;
        assert!(Corpus::from_reader(blank.as_bytes()).is_err());
    }

    #[test]
    fn duplicate_session_rejected() {
        let line = r#"{"session_id":"a","utterances":[{"role":"customer","text":"x","label":0}]}"#;
        let text = format!("{line}\n{line}\n");
        assert!(matches!(
            Corpus::from_reader(text.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn split_sizes_ten() {
        let c = corpus_of(10);
        let spec = SplitSpec::new(0.8, 0.1, 0.1, 7).unwrap();
        let (a, b, t) = c.split(&spec).unwrap();
        assert_eq!((a.len(), b.len(), t.len()), (8, 1, 1));
        let (a2, b2, t2) = c.split(&spec).unwrap();
        assert_eq!((a, b, t), (a2, b2, t2));
    }

    #[test]
    fn split_too_small_advises_minimum() {
        let c = corpus_of(4);
        let err = c.split(&SplitSpec::default()).unwrap_err().to_string();
        assert!(err.contains("at least"), "{err}");
    }

    #[test]
    fn split_spec_validation() {
        assert!(SplitSpec::new(0.8, 0.1, 0.2, 0).is_err());
        assert!(SplitSpec::new(0.9, 0.1, 0.0, 0).is_err());
        assert!(SplitSpec::new(0.5, 0.25, 0.25, 0).is_ok());
    }

    #[test]
    fn vocabulary_min_count() {
        let c = Corpus::new(vec![dialogue("a", &[("a a b", Role::Customer, 0)])]).unwrap();
        let v1 = c.build_vocabulary(1, &WhitespaceTokenizer).unwrap().vocabulary.unwrap();
        assert_eq!(v1.tokens(), &["<pad>", "<unk>", "a", "b"]);
        assert_eq!(v1.id("a"), 2);
        assert_eq!(v1.id("zzz"), UNK_ID);
        let v2 = c.build_vocabulary(2, &WhitespaceTokenizer).unwrap().vocabulary.unwrap();
        assert_eq!(v2.id("b"), UNK_ID);
        assert_eq!(v2.id("a"), 2);
        assert!(c.build_vocabulary(0, &WhitespaceTokenizer).is_err());
        assert!(Corpus::default().build_vocabulary(1, &WhitespaceTokenizer).is_err());
    }

    #[test]
    fn vocabulary_reindex_after_serde() {
        let c = Corpus::new(vec![dialogue("a", &[("x y y", Role::Agent, 0)])]).unwrap();
        let v = c.build_vocabulary(1, &WhitespaceTokenizer).unwrap().vocabulary.unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        let back = back.reindex().unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("y"), 2);
    }

    #[test]
    fn stats_counts() {
        let c = Corpus::new(vec![
            dialogue("a", &[("x y", Role::Customer, 0), ("z", Role::Agent, 1)]),
            dialogue("b", &[("x y z", Role::Customer, 0)]),
        ])
        .unwrap();
        let s = c.stats(&WhitespaceTokenizer);
        assert_eq!(s.normal_dialogues, 1);
        assert_eq!(s.dialogues_with_handoff, 1);
        assert_eq!(s.transferable_utterances, 1);
        assert!((s.mean_utterances_per_dialogue - 1.5).abs() < 1e-12);
        assert!((s.mean_tokens_per_utterance - 2.0).abs() < 1e-12);
    }
}
