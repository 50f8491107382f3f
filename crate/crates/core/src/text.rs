//! Word-level primitives: content words, co-occurrence, keyword extraction,
//! heuristic tagging, question categories and frequency tables.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PosTag, Sample, Token};

const DEFAULT_STOPLIST: &str = include_str!("../data/stoplist.txt");
const DEFAULT_VERBS: &str = include_str!("../data/verbs.txt");

/// Auxiliaries skipped when picking the verb that names a question category.
pub const AUXILIARIES: [&str; 16] = [
    "is", "are", "was", "were", "be", "been", "do", "does", "did", "has", "have", "had", "will", "would",
    "can", "could",
];

/// Category assigned to questions or images without a usable verb or object.
pub const NO_CATEGORY: &str = "none";

// -ing / -ed words that are not verbs.
const SUFFIX_EXCEPTIONS: &[&str] = &[
    "thing", "something", "anything", "nothing", "everything", "morning", "evening", "ceiling", "building",
    "wedding", "during", "string", "ring", "king", "wing", "spring", "sibling", "clothing", "bed", "red",
    "shed", "sled", "hundred", "seed", "speed", "weed", "feed", "breed", "need", "bleed", "naked", "sacred",
    "wicked",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WordListError {
    #[error("word list is empty")]
    Empty,
    #[error("word {0:?} is not lowercase")]
    NotLowercase(String),
}

/// Parses a one-word-per-line list. Blank lines and `#` comments are skipped.
fn parse_word_list(text: &str) -> Result<BTreeSet<String>, WordListError> {
    let mut words = BTreeSet::new();
    for line in text.lines() {
        let w = line.trim();
        if w.is_empty() || (w.starts_with('#') && w.len() > 1) {
            continue;
        }
        if w.to_lowercase() != w {
            return Err(WordListError::NotLowercase(w.to_string()));
        }
        words.insert(w.to_string());
    }
    if words.is_empty() {
        return Err(WordListError::Empty);
    }
    Ok(words)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopList {
    words: BTreeSet<String>,
}

impl StopList {
    pub fn parse(text: &str) -> Result<Self, WordListError> {
        parse_word_list(text).map(|words| Self { words })
    }

    pub fn from_words<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Result<Self, WordListError> {
        let mut set = BTreeSet::new();
        for w in words {
            let w = w.as_ref();
            if w.to_lowercase() != w {
                return Err(WordListError::NotLowercase(w.to_string()));
            }
            set.insert(w.to_string());
        }
        if set.is_empty() {
            return Err(WordListError::Empty);
        }
        Ok(Self { words: set })
    }

    pub fn contains(&self, w: &str) -> bool {
        self.words.contains(w)
    }

    pub fn words(&self) -> &BTreeSet<String> {
        &self.words
    }

    /// Returns a copy without `word`. Fails if that would empty the list.
    pub fn without(&self, word: &str) -> Result<Self, WordListError> {
        let mut words = self.words.clone();
        words.remove(word);
        if words.is_empty() {
            return Err(WordListError::Empty);
        }
        Ok(Self { words })
    }
}

impl Default for StopList {
    fn default() -> Self {
        Self::parse(DEFAULT_STOPLIST).expect("bundled stoplist is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerbLexicon {
    words: BTreeSet<String>,
}

impl VerbLexicon {
    pub fn parse(text: &str) -> Result<Self, WordListError> {
        parse_word_list(text).map(|words| Self { words })
    }

    pub fn contains(&self, w: &str) -> bool {
        self.words.contains(w)
    }
}

impl Default for VerbLexicon {
    fn default() -> Self {
        Self::parse(DEFAULT_VERBS).expect("bundled verb lexicon is valid")
    }
}

/// How two surfaces are compared in co-occurrence tests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Identical lowercase surfaces only.
    #[default]
    Exact,
    /// Strip a crude inflectional suffix (-ing, -ed, -es, -s) first.
    Stem,
}

fn crude_stem(w: &str) -> &str {
    for suffix in ["ing", "ed", "es", "s"] {
        if let Some(stem) = w.strip_suffix(suffix) {
            if stem.len() < 3 || !stem.is_ascii() {
                continue;
            }
            // running -> runn -> run
            let b = stem.as_bytes();
            let n = b.len();
            if suffix.len() > 1 && b[n - 1] == b[n - 2] && !b"aeiou".contains(&b[n - 1]) {
                return &stem[..n - 1];
            }
            return stem;
        }
    }
    w
}

fn has_alphanumeric(w: &str) -> bool {
    w.chars().any(char::is_alphanumeric)
}

fn is_content(t: &Token, stoplist: &StopList) -> bool {
    !t.is_person_ref() && !stoplist.contains(t.surface()) && has_alphanumeric(t.surface())
}

/// Surfaces that are neither stopwords, person references, nor pure punctuation.
pub fn content_words(tokens: &[Token], stoplist: &StopList) -> BTreeSet<String> {
    tokens.iter().filter(|t| is_content(t, stoplist)).map(|t| t.surface().to_string()).collect()
}

/// True iff the two token lists share a content word (exact surface match).
pub fn co_occurs(a: &[Token], b: &[Token], stoplist: &StopList) -> bool {
    co_occurs_with(a, b, stoplist, MatchMode::Exact)
}

pub fn co_occurs_with(a: &[Token], b: &[Token], stoplist: &StopList, mode: MatchMode) -> bool {
    let wa = content_words(a, stoplist);
    if wa.is_empty() {
        return false;
    }
    let wb = content_words(b, stoplist);
    match mode {
        MatchMode::Exact => !wa.is_disjoint(&wb),
        MatchMode::Stem => {
            let sa: BTreeSet<&str> = wa.iter().map(|w| crude_stem(w)).collect();
            wb.iter().any(|w| sa.contains(crude_stem(w)))
        }
    }
}

/// Stoplist, verb lexicon and match mode bundled for the corpus-level passes.
#[derive(Debug, Clone, Default)]
pub struct TextAnalyzer {
    pub stoplist: StopList,
    pub lexicon: VerbLexicon,
    pub match_mode: MatchMode,
}

impl TextAnalyzer {
    pub fn new(stoplist: StopList, lexicon: VerbLexicon, match_mode: MatchMode) -> Self {
        Self { stoplist, lexicon, match_mode }
    }

    pub fn content_words(&self, tokens: &[Token]) -> BTreeSet<String> {
        content_words(tokens, &self.stoplist)
    }

    pub fn co_occurs(&self, a: &[Token], b: &[Token]) -> bool {
        co_occurs_with(a, b, &self.stoplist, self.match_mode)
    }

    fn guess_tag(&self, t: &Token) -> PosTag {
        let w = t.surface();
        if self.stoplist.contains(w) || !has_alphanumeric(w) {
            return PosTag::Other;
        }
        if t.is_person_ref() {
            return PosTag::Noun;
        }
        if self.lexicon.contains(w) {
            return PosTag::Verb;
        }
        let long_enough = w.chars().count() >= 5;
        if long_enough
            && (w.ends_with("ing") || w.ends_with("ed"))
            && !SUFFIX_EXCEPTIONS.contains(&w)
            && w.chars().all(char::is_alphabetic)
        {
            return PosTag::Verb;
        }
        PosTag::Noun
    }

    /// Fills missing tags from the surface alone; existing tags are kept.
    pub fn heuristic_pos(&self, tokens: &[Token]) -> Vec<Token> {
        tokens
            .iter()
            .map(|t| match t.pos_tag {
                Some(_) => t.clone(),
                None => t.clone().tagged(self.guess_tag(t)),
            })
            .collect()
    }

    fn tag_of(&self, t: &Token) -> PosTag {
        t.pos_tag.unwrap_or_else(|| self.guess_tag(t))
    }

    /// First verb, else first noun, else first content word.
    pub fn extract_keyword(&self, tokens: &[Token]) -> Option<String> {
        let content: Vec<(&Token, PosTag)> = tokens
            .iter()
            .filter(|t| is_content(t, &self.stoplist))
            .map(|t| (t, self.tag_of(t)))
            .collect();
        content
            .iter()
            .find(|(_, tag)| *tag == PosTag::Verb)
            .or_else(|| content.iter().find(|(_, tag)| *tag == PosTag::Noun))
            .or_else(|| content.first())
            .map(|(t, _)| t.surface().to_string())
    }

    /// Surface of the first non-auxiliary verb, or [`NO_CATEGORY`].
    pub fn question_category(&self, question: &[Token]) -> String {
        question
            .iter()
            .find(|t| {
                !t.is_person_ref()
                    && !AUXILIARIES.contains(&t.surface())
                    && self.tag_of(t) == PosTag::Verb
            })
            .map(|t| t.surface().to_string())
            .unwrap_or_else(|| NO_CATEGORY.to_string())
    }

    /// Keyword of the ground-truth answer.
    pub fn answer_keyword(&self, sample: &Sample) -> Option<String> {
        self.extract_keyword(sample.gt_answer())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    counts: BTreeMap<String, u64>,
    total: u64,
}

impl FrequencyTable {
    pub fn add(&mut self, word: &str) {
        *self.counts.entry(word.to_string()).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn count(&self, word: &str) -> u64 {
        self.counts.get(word).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(w, &c)| (w.as_str(), c))
    }
}

impl<S: AsRef<str>> FromIterator<S> for FrequencyTable {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        let mut t = FrequencyTable::default();
        for w in iter {
            t.add(w.as_ref());
        }
        t
    }
}

/// Counts `key(s)` over the samples where it is present.
pub fn frequency_table<'a, I, F>(samples: I, key: F) -> FrequencyTable
where
    I: IntoIterator<Item = &'a Sample>,
    F: FnMut(&Sample) -> Option<String>,
{
    samples.into_iter().filter_map(key).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokens;
    use alloc::vec;
    use proptest::prelude::*;

    fn set(words: &[&str]) -> BTreeSet<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn bundled_lists_load() {
        let s = StopList::default();
        for w in ["why", "is", "he", "the", "a", "?"] {
            assert!(s.contains(w), "{w}");
        }
        for aux in AUXILIARIES {
            assert!(s.contains(aux), "{aux}");
        }
        assert!(VerbLexicon::default().contains("eat"));
        assert_eq!(StopList::parse("# only a comment\n\n"), Err(WordListError::Empty));
        assert!(matches!(StopList::parse("Why\n"), Err(WordListError::NotLowercase(_))));
    }

    #[test]
    fn content_word_examples() {
        let s = StopList::default();
        assert_eq!(content_words(&tokens(&["why", "is", "he", "running"]), &s), set(&["running"]));
        assert!(content_words(&[], &s).is_empty());
        assert!(content_words(&tokens(&["person1", "is", "person2"]), &s).is_empty());
        assert!(content_words(&tokens(&["?", ".", "..."]), &s).is_empty());
    }

    #[test]
    fn co_occurrence_examples() {
        let s = StopList::default();
        assert!(co_occurs(&tokens(&["holding", "cup"]), &tokens(&["the", "cup", "is", "hers"]), &s));
        assert!(!co_occurs(&tokens(&["running"]), &tokens(&["runs"]), &s));
        assert!(!co_occurs(&tokens(&["anything", "here"]), &[], &s));
        assert!(co_occurs_with(&tokens(&["running"]), &tokens(&["runs"]), &s, MatchMode::Stem));
        // shared person tags are references, not content
        assert!(!co_occurs(&tokens(&["person1", "sad"]), &tokens(&["person1", "happy"]), &s));
    }

    #[test]
    fn tagging_examples() {
        let an = TextAnalyzer::default();
        let t = an.heuristic_pos(&tokens(&["running", "the", "cup", "walked", "thing", "eat", "person2", "?"]));
        let tags: Vec<_> = t.iter().map(|t| t.pos_tag.unwrap()).collect();
        use PosTag::*;
        assert_eq!(tags, [Verb, Other, Noun, Verb, Noun, Verb, Noun, Other]);

        let pre = vec![Token::new("running").unwrap().tagged(Noun)];
        assert_eq!(an.heuristic_pos(&pre), pre);
    }

    #[test]
    fn keyword_examples() {
        let an = TextAnalyzer::default();
        use PosTag::*;
        let toks: Vec<Token> = ["he", "is", "eating", "pizza"]
            .iter()
            .zip([Other, Other, Verb, Noun])
            .map(|(w, t)| Token::new(w).unwrap().tagged(t))
            .collect();
        assert_eq!(an.extract_keyword(&toks).as_deref(), Some("eating"));
        let pizza = vec![Token::new("pizza").unwrap().tagged(Noun)];
        assert_eq!(an.extract_keyword(&pizza).as_deref(), Some("pizza"));
        assert_eq!(an.extract_keyword(&tokens(&["the", "a"])), None);
        // untagged input goes through the heuristic tagger
        assert_eq!(an.extract_keyword(&tokens(&["the", "pizza", "is", "burning"])).as_deref(), Some("burning"));
        // a content word tagged OTHER is still a fallback keyword
        let other = vec![Token::new("hmm").unwrap().tagged(Other)];
        assert_eq!(an.extract_keyword(&other).as_deref(), Some("hmm"));
    }

    #[test]
    fn question_category_examples() {
        let an = TextAnalyzer::default();
        assert_eq!(an.question_category(&tokens(&["what", "is", "he", "doing"])), "doing");
        assert_eq!(an.question_category(&tokens(&["why"])), NO_CATEGORY);
        // explicit AUX/VERB tags on auxiliaries are skipped
        let q: Vec<Token> = [("is", PosTag::Verb), ("person1", PosTag::Noun), ("holding", PosTag::Verb)]
            .iter()
            .map(|(w, t)| Token::new(w).unwrap().tagged(*t))
            .collect();
        assert_eq!(an.question_category(&q), "holding");
        let q = tokens(&["why", "is", "person1", "holding", "a", "cup"]);
        assert_eq!(an.question_category(&q), an.question_category(&q.clone()));
    }

    #[test]
    fn frequency_examples() {
        let t: FrequencyTable = ["a", "a", "b"].into_iter().collect();
        assert_eq!(t.count("a"), 2);
        assert_eq!(t.count("b"), 1);
        assert_eq!(t.total(), 3);
        let empty: FrequencyTable = core::iter::empty::<&str>().collect();
        assert!(empty.is_empty());
        assert_eq!(empty.total(), 0);
    }

    const WORDS: &[&str] = &["why", "is", "he", "cup", "running", "runs", "person1", "the", "pizza", "?", "hers"];

    fn token_list() -> impl Strategy<Value = Vec<Token>> {
        proptest::collection::vec(proptest::sample::select(WORDS), 0..8).prop_map(|w| tokens(&w))
    }

    proptest! {
        #[test]
        fn co_occurs_symmetric(a in token_list(), b in token_list()) {
            let s = StopList::default();
            prop_assert_eq!(co_occurs(&a, &b, &s), co_occurs(&b, &a, &s));
            prop_assert_eq!(
                co_occurs_with(&a, &b, &s, MatchMode::Stem),
                co_occurs_with(&b, &a, &s, MatchMode::Stem)
            );
        }

        #[test]
        fn content_words_subset_and_monotone(a in token_list(), drop in proptest::sample::select(WORDS)) {
            let s = StopList::default();
            let cw = content_words(&a, &s);
            let surfaces: BTreeSet<String> = a.iter().map(|t| t.surface().to_string()).collect();
            prop_assert!(cw.is_subset(&surfaces));
            let smaller = s.without(drop).unwrap();
            prop_assert!(cw.is_subset(&content_words(&a, &smaller)));
        }

        #[test]
        fn heuristic_pos_idempotent(a in token_list()) {
            let an = TextAnalyzer::default();
            let once = an.heuristic_pos(&a);
            prop_assert_eq!(an.heuristic_pos(&once), once.clone());
            prop_assert!(once.iter().all(|t| t.pos_tag.is_some()));
        }

        #[test]
        fn frequency_total_counts_present_keys(keys in proptest::collection::vec(proptest::option::of(0u8..5), 0..100)) {
            let samples: Vec<Sample> = keys
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let mut s = crate::corpus::tests::sample("x", &["q"], [&["a"], &["b"], &["c"], &["d"]], 0);
                    s.id = alloc::format!("{i}");
                    s.object_tags = k.map(|k| vec![alloc::format!("k{k}")]).unwrap_or_default();
                    s
                })
                .collect();
            let t = frequency_table(&samples, |s| s.object_tags.first().cloned());
            let present = keys.iter().filter(|k| k.is_some()).count() as u64;
            prop_assert_eq!(t.total(), present);
            prop_assert_eq!(t.iter().map(|(_, c)| c).sum::<u64>(), present);
        }
    }
}
