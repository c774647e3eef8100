//! Corpus to model-ready tensors: split, vocabulary, frequency table and
//! featurization in one place.

use crate::corpus::{Corpus, SplitSpec, Vocabulary};
use crate::error::{Error, Result};
use crate::featurize::{EmotionScorer, FeaturizedDialogue, Featurizer, FrequencyTable, Tagger};
use crate::model::ModelConfig;

/// Featurized splits plus the tables they were built with.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub pos_tagset: Vec<String>,
    pub frequencies: FrequencyTable,
    pub train: Vec<FeaturizedDialogue>,
    pub valid: Vec<FeaturizedDialogue>,
    pub test: Vec<FeaturizedDialogue>,
}

impl Dataset {
    /// Copies vocabulary size and tagset size into `base`.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocabulary.len(),
            n_pos: self.pos_tagset.len(),
            ..base.clone()
        }
    }

    pub fn longest_dialogue(&self) -> usize {
        self.train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .map(FeaturizedDialogue::len)
            .max()
            .unwrap_or(0)
    }
}

/// Splits `corpus`, builds the vocabulary and term frequencies from the
/// training part only, and featurizes all three parts.
pub fn prepare(
    corpus: &Corpus,
    split: &SplitSpec,
    min_count: u64,
    tagger: &dyn Tagger,
    scorer: &dyn EmotionScorer,
) -> Result<Dataset> {
    let (train, valid, test) = corpus.split(split)?;
    let train = train.build_vocabulary(min_count, tagger)?;
    let vocabulary = train.vocabulary.clone().expect("vocabulary was just built");
    let frequencies = FrequencyTable::from_vocabulary(&vocabulary)?;
    let pos_tagset = tagger.tagset().to_vec();
    let (train, valid, test) = {
        let f = Featurizer {
            vocabulary: &vocabulary,
            pos_tagset: &pos_tagset,
            frequencies: &frequencies,
            tagger,
            scorer,
        };
        (f.corpus(&train)?, f.corpus(&valid)?, f.corpus(&test)?)
    };
    Ok(Dataset {
        vocabulary,
        pos_tagset,
        frequencies,
        train,
        valid,
        test,
    })
}

/// Featurizes a whole corpus against an existing vocabulary, e.g. one
/// restored from a checkpoint.
pub fn featurize_with(
    corpus: &Corpus,
    vocabulary: &Vocabulary,
    pos_tagset: &[String],
    tagger: &dyn Tagger,
    scorer: &dyn EmotionScorer,
) -> Result<Vec<FeaturizedDialogue>> {
    if tagger.tagset() != pos_tagset {
        return Err(Error::Featurize(
            "the tagger's tagset differs from the one the model was trained with".into(),
        ));
    }
    let frequencies = FrequencyTable::from_vocabulary(vocabulary)?;
    Featurizer {
        vocabulary,
        pos_tagset,
        frequencies: &frequencies,
        tagger,
        scorer,
    }
    .corpus(corpus)
}
