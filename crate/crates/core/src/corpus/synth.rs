//! Seeded synthetic dialogue generator.
//!
//! Dialogues are drawn from a closed token inventory: pseudo-words in ten
//! POS classes with Zipf-like frequencies, plus a handful of English cue
//! words (demand, negative, positive and fallback vocabularies). Handoff
//! triggers are planted at chosen utterances, which are labelled
//! transferable; every other utterance is normal.

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use super::{Corpus, Dialogue, Label, Role, Utterance};
use crate::error::{Error, Result};

/// POS inventory used by the synthetic corpus, in tag-index order.
pub const SYNTHETIC_TAGSET: [&str; 10] = [
    "NOUN", "VERB", "ADJ", "ADV", "PRON", "ADP", "NUM", "CONJ", "PART", "INTJ",
];

const NOUN: usize = 0;
const VERB: usize = 1;
const ADJ: usize = 2;
const ADV: usize = 3;
const INTJ: usize = 9;

/// Pseudo-words per POS class.
const CLASS_SIZES: [usize; 10] = [160, 100, 60, 30, 12, 15, 20, 8, 10, 8];
/// Probability of drawing each POS class for an ordinary token.
const CLASS_WEIGHTS: [f64; 10] = [0.28, 0.2, 0.1, 0.07, 0.1, 0.08, 0.04, 0.05, 0.05, 0.03];
const ZIPF_EXPONENT: f64 = 1.1;

pub(crate) const DEMAND_WORDS: [(&str, usize); 6] = [
    ("human", NOUN),
    ("agent", NOUN),
    ("staff", NOUN),
    ("person", NOUN),
    ("transfer", VERB),
    ("talk", VERB),
];

/// Negative cue words and their polarity.
pub(crate) const NEGATIVE_WORDS: [(&str, usize, f64); 8] = [
    ("angry", ADJ, -0.9),
    ("useless", ADJ, -0.8),
    ("terrible", ADJ, -0.9),
    ("awful", ADJ, -0.8),
    ("annoyed", ADJ, -0.7),
    ("ridiculous", ADJ, -0.7),
    ("disappointed", ADJ, -0.8),
    ("hate", VERB, -1.0),
];

pub(crate) const POSITIVE_WORDS: [(&str, usize, f64); 5] = [
    ("thanks", INTJ, 0.6),
    ("great", ADJ, 0.8),
    ("good", ADJ, 0.6),
    ("perfect", ADJ, 0.9),
    ("happy", ADJ, 0.7),
];

const FALLBACK_WORDS: [(&str, usize); 6] = [
    ("sorry", ADJ),
    ("understand", VERB),
    ("rephrase", VERB),
    ("unclear", ADJ),
    ("question", NOUN),
    ("again", ADV),
];

const CONSONANTS: &[u8] = b"bdgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Handoff trigger types planted by the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    ExplicitDemand,
    UnsatisfactoryAnswer,
    NegativeEmotion,
    RepeatedUtterance,
}

impl TriggerKind {
    pub const ALL: [TriggerKind; 4] = [
        TriggerKind::ExplicitDemand,
        TriggerKind::UnsatisfactoryAnswer,
        TriggerKind::NegativeEmotion,
        TriggerKind::RepeatedUtterance,
    ];
}

/// Per-dialogue probability that each trigger type is planted in a
/// handoff dialogue.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerRates {
    pub explicit_demand: f64,
    pub unsatisfactory_answer: f64,
    pub negative_emotion: f64,
    pub repeated_utterance: f64,
}

impl Default for TriggerRates {
    fn default() -> Self {
        TriggerRates {
            explicit_demand: 0.2,
            unsatisfactory_answer: 0.2,
            negative_emotion: 0.3,
            repeated_utterance: 0.4,
        }
    }
}

impl TriggerRates {
    pub fn zero() -> Self {
        TriggerRates {
            explicit_demand: 0.0,
            unsatisfactory_answer: 0.0,
            negative_emotion: 0.0,
            repeated_utterance: 0.0,
        }
    }

    pub fn get(&self, kind: TriggerKind) -> f64 {
        match kind {
            TriggerKind::ExplicitDemand => self.explicit_demand,
            TriggerKind::UnsatisfactoryAnswer => self.unsatisfactory_answer,
            TriggerKind::NegativeEmotion => self.negative_emotion,
            TriggerKind::RepeatedUtterance => self.repeated_utterance,
        }
    }

    fn as_array(&self) -> [f64; 4] {
        TriggerKind::ALL.map(|k| self.get(k))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_dialogues: usize,
    pub rates: TriggerRates,
    /// Fraction of dialogues generated without any handoff.
    pub normal_fraction: f64,
    pub mean_utterances: f64,
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub mean_tokens: f64,
    /// Probability that an utterance keeps the previous speaker's role.
    pub same_role_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_dialogues: 1000,
            rates: TriggerRates::default(),
            normal_fraction: 0.08,
            mean_utterances: 10.0,
            min_utterances: 2,
            max_utterances: 30,
            mean_tokens: 8.0,
            same_role_rate: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Synth(m));
        if self.n_dialogues == 0 {
            return bad("n_dialogues must be at least 1".into());
        }
        for (k, r) in TriggerKind::ALL.iter().zip(self.rates.as_array()) {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("rate for {k:?} must lie in [0, 1], got {r}"));
            }
        }
        for (name, v) in [
            ("normal_fraction", self.normal_fraction),
            ("same_role_rate", self.same_role_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.rates.as_array().iter().all(|&r| r == 0.0) && self.normal_fraction < 1.0 {
            return bad(
                "all trigger rates are zero but normal_fraction < 1: handoff dialogues \
                 would carry no transferable label"
                    .into(),
            );
        }
        if self.min_utterances == 0 || self.min_utterances > self.max_utterances {
            return bad(format!(
                "utterance bounds must satisfy 1 <= min <= max, got [{}, {}]",
                self.min_utterances, self.max_utterances
            ));
        }
        if !(self.mean_utterances >= self.min_utterances as f64
            && self.mean_utterances <= self.max_utterances as f64)
        {
            return bad(format!(
                "mean_utterances {} outside [{}, {}]",
                self.mean_utterances, self.min_utterances, self.max_utterances
            ));
        }
        if !(self.mean_tokens >= MIN_TOKENS as f64) {
            return bad(format!("mean_tokens must be at least {MIN_TOKENS}"));
        }
        Ok(())
    }
}

const MIN_TOKENS: usize = 3;
const MAX_TOKENS: usize = 40;

/// Every token the generator can emit with its POS tag index. The
/// inventory does not depend on the seed.
pub(crate) fn synthetic_inventory() -> Vec<(String, usize)> {
    let mut out = Vec::new();
    let mut serial = 0usize;
    for (tag, &size) in CLASS_SIZES.iter().enumerate() {
        for _ in 0..size {
            out.push((pseudo_word(serial), tag));
            serial += 1;
        }
    }
    out.extend(DEMAND_WORDS.iter().map(|(w, t)| (w.to_string(), *t)));
    out.extend(NEGATIVE_WORDS.iter().map(|(w, t, _)| (w.to_string(), *t)));
    out.extend(POSITIVE_WORDS.iter().map(|(w, t, _)| (w.to_string(), *t)));
    out.extend(FALLBACK_WORDS.iter().map(|(w, t)| (w.to_string(), *t)));
    out
}

/// Deterministic consonant-vowel pseudo-word for a serial number.
fn pseudo_word(serial: usize) -> String {
    let syllables = CONSONANTS.len() * VOWELS.len();
    let mut n = serial;
    let mut word = String::new();
    // two syllables cover 4225 words; a third keeps longer words distinct
    for _ in 0..2 {
        let s = n % syllables;
        n /= syllables;
        word.push(CONSONANTS[s / VOWELS.len()] as char);
        word.push(VOWELS[s % VOWELS.len()] as char);
    }
    if n > 0 {
        word.push(CONSONANTS[n % CONSONANTS.len()] as char);
        word.push('a');
    }
    word
}

struct Lexicon {
    classes: Vec<Vec<String>>,
    within: Vec<WeightedIndex<f64>>,
    class_pick: WeightedIndex<f64>,
}

impl Lexicon {
    fn new() -> Self {
        let inventory = synthetic_inventory();
        let mut classes = vec![Vec::new(); CLASS_SIZES.len()];
        let pseudo: usize = CLASS_SIZES.iter().sum();
        for (w, t) in inventory.into_iter().take(pseudo) {
            classes[t].push(w);
        }
        let within = classes
            .iter()
            .map(|c| {
                WeightedIndex::new((1..=c.len()).map(|r| 1.0 / (r as f64).powf(ZIPF_EXPONENT)))
                    .expect("non-empty class")
            })
            .collect();
        Lexicon {
            classes,
            within,
            class_pick: WeightedIndex::new(CLASS_WEIGHTS).expect("valid weights"),
        }
    }

    fn word(&self, rng: &mut ChaCha8Rng) -> String {
        let c = self.class_pick.sample(rng);
        self.word_of(c, rng)
    }

    fn word_of(&self, class: usize, rng: &mut ChaCha8Rng) -> String {
        self.classes[class][self.within[class].sample(rng)].clone()
    }
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    lex: Lexicon,
    len_dist: Poisson<f64>,
    tok_dist: Poisson<f64>,
    rng: ChaCha8Rng,
}

/// Where a trigger was planted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedTrigger {
    pub position: usize,
    pub kind: TriggerKind,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a SynthConfig) -> Result<Self> {
        let lam_len = (cfg.mean_utterances - cfg.min_utterances as f64).max(1e-9);
        let lam_tok = (cfg.mean_tokens - MIN_TOKENS as f64).max(1e-9);
        Ok(Generator {
            cfg,
            lex: Lexicon::new(),
            len_dist: Poisson::new(lam_len).map_err(|e| Error::Synth(e.to_string()))?,
            tok_dist: Poisson::new(lam_tok).map_err(|e| Error::Synth(e.to_string()))?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    fn n_tokens(&mut self) -> usize {
        let extra = self.tok_dist.sample(&mut self.rng) as usize;
        (MIN_TOKENS + extra).min(MAX_TOKENS)
    }

    fn ordinary_utterance(&mut self, topic: &str, positive: bool) -> Vec<String> {
        let n = self.n_tokens();
        let mut toks: Vec<String> = (0..n).map(|_| self.lex.word(&mut self.rng)).collect();
        let at = self.rng.random_range(0..toks.len());
        toks[at] = topic.to_string();
        if positive {
            let (w, _, _) = POSITIVE_WORDS.choose(&mut self.rng).expect("non-empty");
            let at = self.rng.random_range(0..=toks.len());
            toks.insert(at, w.to_string());
        }
        toks
    }

    fn dialogue(&mut self, index: usize) -> (Dialogue, Vec<PlantedTrigger>) {
        let cfg = self.cfg;
        let extra = self.len_dist.sample(&mut self.rng) as usize;
        let len = (cfg.min_utterances + extra).min(cfg.max_utterances);

        let mut roles = Vec::with_capacity(len);
        let mut role = Role::Customer;
        for t in 0..len {
            if t > 0 && !self.rng.random_bool(cfg.same_role_rate) {
                role = role.other();
            }
            roles.push(role);
        }

        let topics: Vec<String> = (0..3).map(|_| self.lex.word_of(NOUN, &mut self.rng)).collect();
        let mut current_topic = topics[0].clone();
        let mut texts: Vec<Vec<String>> = Vec::with_capacity(len);
        for &r in &roles {
            if r == Role::Customer && self.rng.random_bool(0.3) {
                current_topic = topics.choose(&mut self.rng).expect("non-empty").clone();
            }
            let positive = self.rng.random_bool(0.08);
            let topic = current_topic.clone();
            texts.push(self.ordinary_utterance(&topic, positive));
        }

        let handoff = !self.rng.random_bool(cfg.normal_fraction);
        let mut planted = Vec::new();
        if handoff {
            let mut kinds: Vec<TriggerKind> = TriggerKind::ALL
                .into_iter()
                .filter(|&k| self.rng.random_bool(cfg.rates.get(k)))
                .collect();
            if kinds.is_empty() {
                let pick = WeightedIndex::new(cfg.rates.as_array()).expect("validated rates");
                kinds.push(TriggerKind::ALL[pick.sample(&mut self.rng)]);
            }
            let mut used = BTreeSet::new();
            // repeats copy earlier text, so plant them after the others
            kinds.sort_by_key(|&k| k == TriggerKind::RepeatedUtterance);
            for kind in kinds {
                if let Some(p) = self.plant(kind, &roles, &mut texts, &used) {
                    used.insert(p);
                    planted.push(PlantedTrigger { position: p, kind });
                }
            }
            if planted.is_empty() {
                let p = self
                    .plant(TriggerKind::ExplicitDemand, &roles, &mut texts, &used)
                    .expect("first utterance is a customer turn");
                planted.push(PlantedTrigger {
                    position: p,
                    kind: TriggerKind::ExplicitDemand,
                });
            }
        }
        planted.sort_by_key(|p| p.position);

        let utterances = roles
            .iter()
            .zip(texts)
            .enumerate()
            .map(|(t, (&role, toks))| {
                let label = if planted.iter().any(|p| p.position == t) {
                    Label::Transferable
                } else {
                    Label::Normal
                };
                Utterance::new(role, toks.join(" "), label)
            })
            .collect();
        (
            Dialogue {
                session_id: format!("syn{index:06}"),
                utterances,
            },
            planted,
        )
    }

    /// Rewrites one utterance to carry `kind`; returns its position, or
    /// `None` when the dialogue has no eligible utterance.
    fn plant(
        &mut self,
        kind: TriggerKind,
        roles: &[Role],
        texts: &mut [Vec<String>],
        used: &BTreeSet<usize>,
    ) -> Option<usize> {
        let free = |t: &usize| !used.contains(t);
        match kind {
            TriggerKind::ExplicitDemand | TriggerKind::NegativeEmotion => {
                let candidates: Vec<usize> = (0..roles.len())
                    .filter(|&t| roles[t] == Role::Customer)
                    .filter(free)
                    .collect();
                let &p = candidates.choose(&mut self.rng)?;
                let toks = &mut texts[p];
                toks.retain(|w| !POSITIVE_WORDS.iter().any(|(p, _, _)| p == w));
                if kind == TriggerKind::ExplicitDemand {
                    let n = self.rng.random_range(1..=2);
                    for w in DEMAND_WORDS.choose_multiple(&mut self.rng, n) {
                        let at = self.rng.random_range(0..=toks.len());
                        toks.insert(at, w.0.to_string());
                    }
                } else {
                    let n = self.rng.random_range(1..=2);
                    for w in NEGATIVE_WORDS.choose_multiple(&mut self.rng, n) {
                        let at = self.rng.random_range(0..=toks.len());
                        toks.insert(at, w.0.to_string());
                    }
                }
                Some(p)
            }
            TriggerKind::UnsatisfactoryAnswer => {
                let candidates: Vec<usize> = (1..roles.len())
                    .filter(|&t| roles[t] == Role::Agent && roles[t - 1] == Role::Customer)
                    .filter(free)
                    .collect();
                let &p = candidates.choose(&mut self.rng)?;
                let n = self.n_tokens().saturating_sub(2).max(1);
                let mut toks: Vec<String> =
                    (0..n).map(|_| self.lex.word_of(VERB, &mut self.rng)).collect();
                let k = self.rng.random_range(2..=3);
                for w in FALLBACK_WORDS.choose_multiple(&mut self.rng, k) {
                    let at = self.rng.random_range(0..=toks.len());
                    toks.insert(at, w.0.to_string());
                }
                texts[p] = toks;
                Some(p)
            }
            TriggerKind::RepeatedUtterance => {
                // (repeat position, source position) pairs with matching roles
                let pairs: Vec<(usize, usize)> = (1..roles.len())
                    .filter(free)
                    .flat_map(|t| {
                        (0..t)
                            .filter(move |&s| roles[s] == roles[t])
                            .map(move |s| (t, s))
                    })
                    .collect();
                let &(p, src) = pairs.choose(&mut self.rng)?;
                let mut copy = texts[src].clone();
                // near-verbatim: occasionally swap two adjacent tokens
                if copy.len() > 3 && self.rng.random_bool(0.3) {
                    let i = self.rng.random_range(0..copy.len() - 1);
                    copy.swap(i, i + 1);
                }
                texts[p] = copy;
                Some(p)
            }
        }
    }
}

/// Generates `cfg.n_dialogues` labelled dialogues; see the module docs.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Corpus> {
    generate_synthetic_traced(cfg).map(|(c, _)| c)
}

/// As [`generate_synthetic`], also returning the planted triggers per dialogue.
pub fn generate_synthetic_traced(cfg: &SynthConfig) -> Result<(Corpus, Vec<Vec<PlantedTrigger>>)> {
    cfg.validate()?;
    let mut gen = Generator::new(cfg)?;
    let mut dialogues = Vec::with_capacity(cfg.n_dialogues);
    let mut traces = Vec::with_capacity(cfg.n_dialogues);
    for i in 0..cfg.n_dialogues {
        let (d, t) = gen.dialogue(i);
        dialogues.push(d);
        traces.push(t);
    }
    let corpus = Corpus::new(dialogues)?
        .with_tagset(SYNTHETIC_TAGSET.iter().map(|s| s.to_string()).collect());
    Ok((corpus, traces))
}
