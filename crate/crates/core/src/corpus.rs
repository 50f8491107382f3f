//! In-memory data model for multiple-choice visual QA corpora.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of answer and rationale candidates per sample.
pub const NUM_CHOICES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Verb,
    Noun,
    Other,
}

impl PosTag {
    /// Parses a tag name. Universal-dependency style tags are folded into the
    /// three classes (`AUX` counts as a verb, `PROPN` as a noun).
    pub fn parse(tag: &str) -> Option<Self> {
        let upper = tag.trim().to_ascii_uppercase();
        match upper.as_str() {
            "VERB" | "AUX" => Some(PosTag::Verb),
            "NOUN" | "PROPN" => Some(PosTag::Noun),
            "" => None,
            _ => Some(PosTag::Other),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PosTag::Verb => "VERB",
            PosTag::Noun => "NOUN",
            PosTag::Other => "OTHER",
        }
    }
}

/// `person` followed by one or more ASCII digits, e.g. `person3`.
pub fn is_person_tag(surface: &str) -> bool {
    surface
        .strip_prefix("person")
        .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    surface: String,
    pub pos_tag: Option<PosTag>,
    is_person_ref: bool,
}

impl Token {
    /// Lowercases `surface` and flags person references with [`is_person_tag`].
    pub fn new(surface: &str) -> Result<Self, CorpusError> {
        let lower = surface.to_lowercase();
        let person = is_person_tag(&lower);
        Self::with_person_flag(&lower, person)
    }

    /// Like [`Token::new`] but with an externally decided person flag.
    pub fn with_person_flag(surface: &str, is_person_ref: bool) -> Result<Self, CorpusError> {
        if surface.is_empty() {
            return Err(CorpusError::EmptyToken);
        }
        Ok(Self { surface: surface.to_lowercase(), pos_tag: None, is_person_ref })
    }

    pub fn tagged(mut self, tag: PosTag) -> Self {
        self.pos_tag = Some(tag);
        self
    }

    #[inline]
    pub fn surface(&self) -> &str {
        &self.surface
    }

    #[inline]
    pub fn is_person_ref(&self) -> bool {
        self.is_person_ref
    }
}

/// Builds an untagged token list from surfaces. Panics on empty strings, so
/// it is meant for literals and tests.
pub fn tokens(words: &[&str]) -> Vec<Token> {
    words.iter().map(|w| Token::new(w).expect("empty token")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub question: Vec<Token>,
    pub answer_choices: [Vec<Token>; NUM_CHOICES],
    pub rationale_choices: [Vec<Token>; NUM_CHOICES],
    pub answer_label: usize,
    pub rationale_label: usize,
    pub object_tags: Vec<String>,
    pub image_feature: Vec<f64>,
}

impl Sample {
    pub fn gt_answer(&self) -> &[Token] {
        &self.answer_choices[self.answer_label]
    }

    pub fn gt_rationale(&self) -> &[Token] {
        &self.rationale_choices[self.rationale_label]
    }

    pub fn validate(&self, feature_dim: usize) -> Result<(), CorpusError> {
        for (field, value) in [("answer_label", self.answer_label), ("rationale_label", self.rationale_label)] {
            if value >= NUM_CHOICES {
                return Err(CorpusError::LabelOutOfRange { id: self.id.clone(), field, value });
            }
        }
        if self.image_feature.len() != feature_dim {
            return Err(CorpusError::FeatureLength {
                id: self.id.clone(),
                expected: feature_dim,
                actual: self.image_feature.len(),
            });
        }
        if let Some(i) = self.image_feature.iter().position(|v| !v.is_finite()) {
            return Err(CorpusError::NonFiniteFeature { id: self.id.clone(), index: i });
        }
        Ok(())
    }

    pub fn all_tokens(&self) -> impl Iterator<Item = &Token> {
        self.question
            .iter()
            .chain(self.answer_choices.iter().flatten())
            .chain(self.rationale_choices.iter().flatten())
    }
}

/// The question followed by the ground-truth answer.
pub fn concat_qa(sample: &Sample) -> Vec<Token> {
    let mut out = Vec::with_capacity(sample.question.len() + sample.gt_answer().len());
    out.extend_from_slice(&sample.question);
    out.extend_from_slice(sample.gt_answer());
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorpusError {
    #[error("empty token surface")]
    EmptyToken,
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("label out of range: {field}={value} in sample {id:?}")]
    LabelOutOfRange { id: String, field: &'static str, value: usize },
    #[error("feature length mismatch in sample {id:?}: expected {expected}, got {actual}")]
    FeatureLength { id: String, expected: usize, actual: usize },
    #[error("non-finite image feature at index {index} in sample {id:?}")]
    NonFiniteFeature { id: String, index: usize },
}

/// Word index. Index 0 is reserved for out-of-vocabulary tokens; known words
/// are numbered from 1 in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl Vocab {
    pub const UNK: u32 = 0;

    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab::default();
        for w in words {
            v.insert(w.as_ref());
        }
        v
    }

    pub fn insert(&mut self, word: &str) -> u32 {
        if let Some(&i) = self.index.get(word) {
            return i;
        }
        self.words.push(word.to_string());
        let i = self.words.len() as u32;
        self.index.insert(word.to_string(), i);
        i
    }

    pub fn get(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(Self::UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Number of known words, excluding the UNK slot.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Rows needed in an embedding table (known words plus UNK).
    pub fn table_rows(&self) -> usize {
        self.words.len() + 1
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32 + 1)).collect();
    }

    pub fn encode(&self, toks: &[Token]) -> Vec<u32> {
        toks.iter().map(|t| self.get(t.surface())).collect()
    }
}

/// Validated, immutable collection of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    samples: Vec<Sample>,
    feature_dim: usize,
    vocab: Vocab,
    by_id: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn new(samples: Vec<Sample>, feature_dim: usize) -> Result<Self, CorpusError> {
        let mut by_id = BTreeMap::new();
        let mut vocab = Vocab::default();
        for (i, s) in samples.iter().enumerate() {
            s.validate(feature_dim)?;
            if by_id.insert(s.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(s.id.clone()));
            }
            for t in s.all_tokens() {
                vocab.insert(t.surface());
            }
        }
        Ok(Self { samples, feature_dim, vocab, by_id })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.index_of(id).map(|i| &self.samples[i])
    }

    /// Corpus indices of `ids`, in the iteration order of `ids`; unknown ids
    /// are skipped.
    pub fn indices_of<'a, I>(&self, ids: I) -> Vec<usize>
    where
        I: IntoIterator<Item = &'a String>,
    {
        ids.into_iter().filter_map(|id| self.index_of(id)).collect()
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }
}
