//! Out-of-distribution split construction.
//!
//! The text-modality split removes every sample whose question shares a content
//! word with its correct answer (or whose question+answer shares one with the
//! correct rationale), groups the survivors by question verb, and within each
//! group caps the number of samples whose answer keyword is frequent (head)
//! while keeping all infrequent (tail) ones. The visual-modality split repeats
//! the head/tail step with groups keyed by image objects instead.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{concat_qa, Corpus, Sample};
use crate::text::{FrequencyTable, TextAnalyzer, NO_CATEGORY};

/// Training-set size of the full-scale text split.
pub const FULL_SCALE_TRAIN_TARGET: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SplitError {
    #[error("no keywords in category")]
    NoKeywords,
    #[error("no samples after filtering")]
    NoSamplesAfterFiltering,
    #[error(
        "corpus too small for a split: {corpus} samples, {filtered} after filtering, \
         {validation} validation, {available} available for training"
    )]
    TooSmall { corpus: usize, filtered: usize, validation: usize, available: usize },
    #[error("train_target must be positive")]
    ZeroTrainTarget,
    #[error("split modality {0:?} does not match the requested builder")]
    WrongModality(Modality),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Qa,
    Va,
}

/// How many head samples survive per category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepPolicy {
    /// At most α head samples per category.
    #[default]
    AlphaCap,
    /// At most as many head samples as the category has tail samples.
    MatchTail,
    /// No cap; only the co-occurrence filter applies.
    KeepAll,
}

/// Image grouping for the visual split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageCategory {
    /// Most frequent object tag, ties broken lexicographically.
    #[default]
    Dominant,
    /// Sorted set of distinct object tags joined with `+`.
    Multiset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub seed: u64,
    pub train_target: usize,
    pub keep_policy: KeepPolicy,
    pub modality: Modality,
    pub image_category: ImageCategory,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_target: FULL_SCALE_TRAIN_TARGET,
            keep_policy: KeepPolicy::AlphaCap,
            modality: Modality::Qa,
            image_category: ImageCategory::Dominant,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub samples: usize,
    pub head: usize,
    pub tail: usize,
    pub kept_head: usize,
    pub kept_tail: usize,
    pub alpha: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub corpus_size: usize,
    /// Samples passing the co-occurrence filter.
    pub filtered_size: usize,
    /// Fraction of the corpus removed by the co-occurrence filter.
    pub cooc_rate: f64,
    pub categories: BTreeMap<String, CategoryStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Qa,
    Va,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub kind: SplitKind,
    pub seed: u64,
    pub train_ids: BTreeSet<String>,
    pub val_ids: BTreeSet<String>,
    /// Samples in neither set; in-distribution holdout.
    pub id_holdout_ids: BTreeSet<String>,
    pub alpha_per_category: BTreeMap<String, u64>,
    pub stats: SplitStats,
}

/// Ids of samples with no question/answer and no question+answer/rationale
/// content-word overlap, in corpus order.
pub fn filter_co_occurrence(corpus: &Corpus, analyzer: &TextAnalyzer) -> Vec<String> {
    corpus
        .samples()
        .iter()
        .filter(|s| passes_co_occurrence_filter(s, analyzer))
        .map(|s| s.id.clone())
        .collect()
}

pub fn passes_co_occurrence_filter(s: &Sample, analyzer: &TextAnalyzer) -> bool {
    !analyzer.co_occurs(&s.question, s.gt_answer()) && !analyzer.co_occurs(&concat_qa(s), s.gt_rationale())
}

/// Frequency of the middle-ranked word.
///
/// Words are ordered by count descending, ties lexicographic; with `k` words
/// the threshold is the count at index `ceil(k/2) - 1`.
pub fn median_threshold(table: &FrequencyTable) -> Result<u64, SplitError> {
    if table.is_empty() {
        return Err(SplitError::NoKeywords);
    }
    let mut ranked: Vec<(&str, u64)> = table.iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let k = ranked.len();
    Ok(ranked[k.div_ceil(2) - 1].1)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadTail {
    pub head: Vec<String>,
    pub tail: Vec<String>,
    pub alpha_per_category: BTreeMap<String, u64>,
    /// Per category: (head ids, tail ids), each in input order.
    pub by_category: BTreeMap<String, (Vec<String>, Vec<String>)>,
}

/// Splits samples into head (keyword count ≥ category α) and tail. Samples
/// without a keyword, or in a category with no keywords at all, are tail.
pub fn head_tail_split<'a, I, C, K>(samples: I, mut category_fn: C, mut keyword_fn: K) -> HeadTail
where
    I: IntoIterator<Item = &'a Sample>,
    C: FnMut(&Sample) -> String,
    K: FnMut(&Sample) -> Option<String>,
{
    let mut grouped: BTreeMap<String, Vec<(&Sample, Option<String>)>> = BTreeMap::new();
    for s in samples {
        let cat = category_fn(s);
        let kw = keyword_fn(s);
        grouped.entry(cat).or_default().push((s, kw));
    }

    let mut out = HeadTail::default();
    for (cat, members) in grouped {
        let table: FrequencyTable = members.iter().filter_map(|(_, k)| k.as_deref()).collect();
        let alpha = median_threshold(&table).ok();
        let mut head = Vec::new();
        let mut tail = Vec::new();
        for (s, kw) in members {
            let is_head = match (alpha, kw) {
                (Some(a), Some(k)) => table.count(&k) >= a,
                _ => false,
            };
            if is_head {
                head.push(s.id.clone());
            } else {
                tail.push(s.id.clone());
            }
        }
        if let Some(a) = alpha {
            out.alpha_per_category.insert(cat.clone(), a);
        }
        out.head.extend(head.iter().cloned());
        out.tail.extend(tail.iter().cloned());
        out.by_category.insert(cat, (head, tail));
    }
    out
}

/// Most frequent object tag (ties lexicographic), or [`NO_CATEGORY`].
pub fn dominant_object(tags: &[String]) -> String {
    let counts: FrequencyTable = tags.iter().collect();
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(w, _)| w.to_string())
        .unwrap_or_else(|| NO_CATEGORY.to_string())
}

pub fn object_signature(tags: &[String]) -> String {
    let set: BTreeSet<&str> = tags.iter().map(String::as_str).collect();
    if set.is_empty() {
        return NO_CATEGORY.to_string();
    }
    set.into_iter().collect::<Vec<_>>().join("+")
}

fn image_category(mode: ImageCategory, s: &Sample) -> String {
    match mode {
        ImageCategory::Dominant => dominant_object(&s.object_tags),
        ImageCategory::Multiset => object_signature(&s.object_tags),
    }
}

/// Applies the keep policy per category (in category order, one generator)
/// and returns the retained ids plus per-category stats.
fn retain(
    split: &HeadTail,
    policy: KeepPolicy,
    rng: &mut ChaCha8Rng,
) -> (BTreeSet<String>, BTreeMap<String, CategoryStats>) {
    let mut kept = BTreeSet::new();
    let mut stats = BTreeMap::new();
    for (cat, (head, tail)) in &split.by_category {
        let alpha = split.alpha_per_category.get(cat).copied();
        let cap = match policy {
            KeepPolicy::AlphaCap => alpha.map_or(0, |a| a as usize),
            KeepPolicy::MatchTail => tail.len(),
            KeepPolicy::KeepAll => head.len(),
        };
        let mut shuffled = head.clone();
        shuffled.shuffle(rng);
        shuffled.truncate(cap);
        stats.insert(
            cat.clone(),
            CategoryStats {
                samples: head.len() + tail.len(),
                head: head.len(),
                tail: tail.len(),
                kept_head: shuffled.len(),
                kept_tail: tail.len(),
                alpha,
            },
        );
        kept.extend(shuffled);
        kept.extend(tail.iter().cloned());
    }
    (kept, stats)
}

fn draw_train(
    corpus: &Corpus,
    exclude: &BTreeSet<String>,
    target: usize,
    rng: &mut ChaCha8Rng,
) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut available: Vec<&String> =
        corpus.samples().iter().map(|s| &s.id).filter(|id| !exclude.contains(*id)).collect();
    available.shuffle(rng);
    let n = target.min(available.len());
    let train = available[..n].iter().map(|s| (*s).clone()).collect();
    let rest = available[n..].iter().map(|s| (*s).clone()).collect();
    (train, rest)
}

/// Text-modality split. Validation is the filtered, head-capped pool;
/// training is drawn uniformly from the rest of the corpus.
pub fn build_vcr_ood_qa(corpus: &Corpus, cfg: &SplitConfig, analyzer: &TextAnalyzer) -> Result<SplitResult, SplitError> {
    if cfg.modality != Modality::Qa {
        return Err(SplitError::WrongModality(cfg.modality));
    }
    if cfg.train_target == 0 {
        return Err(SplitError::ZeroTrainTarget);
    }
    let filtered = filter_co_occurrence(corpus, analyzer);
    if filtered.is_empty() {
        return Err(SplitError::NoSamplesAfterFiltering);
    }
    let pool: Vec<&Sample> = filtered.iter().filter_map(|id| corpus.get(id)).collect();
    let ht = head_tail_split(
        pool.iter().copied(),
        |s| analyzer.question_category(&s.question),
        |s| analyzer.answer_keyword(s),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (val_ids, categories) = retain(&ht, cfg.keep_policy, &mut rng);
    let (train_ids, id_holdout_ids) = draw_train(corpus, &val_ids, cfg.train_target, &mut rng);
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(SplitError::TooSmall {
            corpus: corpus.len(),
            filtered: filtered.len(),
            validation: val_ids.len(),
            available: corpus.len() - val_ids.len(),
        });
    }
    Ok(SplitResult {
        kind: SplitKind::Qa,
        seed: cfg.seed,
        train_ids,
        val_ids,
        id_holdout_ids,
        alpha_per_category: ht.alpha_per_category,
        stats: SplitStats {
            corpus_size: corpus.len(),
            filtered_size: filtered.len(),
            cooc_rate: 1.0 - filtered.len() as f64 / corpus.len() as f64,
            categories,
        },
    })
}

/// Visual-modality split. Shares the text split's training set; validation
/// comes from the filtered pool outside that training set, grouped by image
/// objects.
pub fn build_vcr_ood_va(
    corpus: &Corpus,
    cfg: &SplitConfig,
    qa_result: &SplitResult,
    analyzer: &TextAnalyzer,
) -> Result<SplitResult, SplitError> {
    if cfg.modality != Modality::Va {
        return Err(SplitError::WrongModality(cfg.modality));
    }
    let filtered = filter_co_occurrence(corpus, analyzer);
    let pool: Vec<&Sample> = filtered
        .iter()
        .filter(|id| !qa_result.train_ids.contains(*id))
        .filter_map(|id| corpus.get(id))
        .collect();
    if pool.is_empty() {
        return Err(SplitError::NoSamplesAfterFiltering);
    }
    let ht = head_tail_split(
        pool.iter().copied(),
        |s| image_category(cfg.image_category, s),
        |s| analyzer.answer_keyword(s),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (val_ids, categories) = retain(&ht, cfg.keep_policy, &mut rng);
    let train_ids = qa_result.train_ids.clone();
    let id_holdout_ids = corpus
        .samples()
        .iter()
        .map(|s| &s.id)
        .filter(|id| !train_ids.contains(*id) && !val_ids.contains(*id))
        .cloned()
        .collect();
    Ok(SplitResult {
        kind: SplitKind::Va,
        seed: cfg.seed,
        train_ids,
        val_ids,
        id_holdout_ids,
        alpha_per_category: ht.alpha_per_category,
        stats: SplitStats {
            corpus_size: corpus.len(),
            filtered_size: filtered.len(),
            cooc_rate: 1.0 - filtered.len() as f64 / corpus.len().max(1) as f64,
            categories,
        },
    })
}

/// Uniform in-distribution split: `train_count` samples for training, the
/// rest as validation.
pub fn random_split(corpus: &Corpus, train_count: usize, seed: u64) -> Result<SplitResult, SplitError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_ids, val_ids) = draw_train(corpus, &BTreeSet::new(), train_count, &mut rng);
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(SplitError::TooSmall {
            corpus: corpus.len(),
            filtered: corpus.len(),
            validation: val_ids.len(),
            available: corpus.len(),
        });
    }
    Ok(SplitResult {
        kind: SplitKind::Random,
        seed,
        train_ids,
        val_ids,
        id_holdout_ids: BTreeSet::new(),
        alpha_per_category: BTreeMap::new(),
        stats: SplitStats { corpus_size: corpus.len(), filtered_size: corpus.len(), ..Default::default() },
    })
}

/// Partitions used to expose the two shortcut types.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasProbes {
    pub cooc: BTreeSet<String>,
    pub non_cooc: BTreeSet<String>,
    pub head: BTreeSet<String>,
    pub tail: BTreeSet<String>,
    pub alpha_per_category: BTreeMap<String, u64>,
}

impl BiasProbes {
    /// Keeps only ids in `ids`, e.g. a held-out set.
    pub fn restrict(&self, ids: &BTreeSet<String>) -> Self {
        let f = |s: &BTreeSet<String>| s.intersection(ids).cloned().collect();
        Self {
            cooc: f(&self.cooc),
            non_cooc: f(&self.non_cooc),
            head: f(&self.head),
            tail: f(&self.tail),
            alpha_per_category: self.alpha_per_category.clone(),
        }
    }
}

/// Co-occurrence partition by the question/answer test alone, and head/tail
/// partition over question categories.
pub fn build_bias_probes(corpus: &Corpus, analyzer: &TextAnalyzer) -> BiasProbes {
    let mut probes = BiasProbes::default();
    for s in corpus.samples() {
        if analyzer.co_occurs(&s.question, s.gt_answer()) {
            probes.cooc.insert(s.id.clone());
        } else {
            probes.non_cooc.insert(s.id.clone());
        }
    }
    let ht = head_tail_split(
        corpus.samples(),
        |s| analyzer.question_category(&s.question),
        |s| analyzer.answer_keyword(s),
    );
    probes.head = ht.head.into_iter().collect();
    probes.tail = ht.tail.into_iter().collect();
    probes.alpha_per_category = ht.alpha_per_category;
    probes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::sample;
    use alloc::vec;

    fn table(pairs: &[(&str, u64)]) -> FrequencyTable {
        pairs.iter().flat_map(|(w, c)| core::iter::repeat_n(*w, *c as usize)).collect()
    }

    #[test]
    fn median_threshold_examples() {
        assert_eq!(median_threshold(&table(&[("a", 5), ("b", 3), ("c", 2), ("d", 2), ("e", 1)])), Ok(2));
        assert_eq!(median_threshold(&table(&[("a", 4), ("b", 3), ("c", 2), ("d", 1)])), Ok(3));
        assert_eq!(median_threshold(&table(&[("a", 7)])), Ok(7));
        assert_eq!(median_threshold(&FrequencyTable::default()), Err(SplitError::NoKeywords));
    }

    fn keyed(id: &str, cat: &str, kw: Option<&str>) -> Sample {
        let mut s = sample(id, &[], [&["x"], &["y"], &["z"], &["w"]], 0);
        s.object_tags = vec![cat.into()];
        if let Some(k) = kw {
            s.object_tags.push(k.into());
        }
        s
    }

    fn ht(samples: &[Sample]) -> HeadTail {
        head_tail_split(samples, |s| s.object_tags[0].clone(), |s| s.object_tags.get(1).cloned())
    }

    #[test]
    fn head_tail_examples() {
        let mut samples = vec![];
        for i in 0..5 {
            samples.push(keyed(&alloc::format!("a{i}"), "c", Some("a")));
        }
        samples.push(keyed("b0", "c", Some("b")));
        let r = ht(&samples);
        assert_eq!(r.alpha_per_category["c"], 5);
        assert_eq!(r.head.len(), 5);
        assert_eq!(r.tail, vec!["b0".to_string()]);

        let same: Vec<_> = (0..3).map(|i| keyed(&alloc::format!("s{i}"), "c", Some("k"))).collect();
        let r = ht(&same);
        assert_eq!(r.head.len(), 3);
        assert!(r.tail.is_empty());

        // absent keywords go to tail, keyword-less categories get no alpha
        let r = ht(&[keyed("n0", "d", None), keyed("n1", "e", Some("k")), keyed("n2", "e", None)]);
        assert_eq!(r.tail, vec!["n0".to_string(), "n2".to_string()]);
        assert_eq!(r.head, vec!["n1".to_string()]);
        assert!(!r.alpha_per_category.contains_key("d"));
    }

    #[test]
    fn dominant_object_examples() {
        let tags = |t: &[&str]| t.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(dominant_object(&tags(&["cup", "cup", "person1"])), "cup");
        assert_eq!(dominant_object(&tags(&["dog", "cat"])), "cat");
        assert_eq!(dominant_object(&[]), NO_CATEGORY);
        assert_eq!(object_signature(&tags(&["dog", "cat", "dog"])), "cat+dog");
    }

    fn small_corpus() -> Corpus {
        let mut v = vec![
            sample("cooc", &["why", "holding", "cup"], [&["the", "cup"], &["dog"], &["tree"], &["car"]], 0),
            sample("clean", &["why", "holding", "cup"], [&["pizza"], &["dog"], &["tree"], &["car"]], 0),
        ];
        // rationale shares a word with the answer
        let mut r = sample("qar", &["what", "eating"], [&["pizza"], &["dog"], &["tree"], &["car"]], 0);
        r.rationale_choices[0] = crate::corpus::tokens(&["pizza", "smell"]);
        v.push(r);
        Corpus::new(v, 2).unwrap()
    }

    #[test]
    fn filter_examples() {
        let an = TextAnalyzer::default();
        assert_eq!(filter_co_occurrence(&small_corpus(), &an), vec!["clean".to_string()]);
    }

    #[test]
    fn qa_split_errors() {
        let an = TextAnalyzer::default();
        let empty = Corpus::new(vec![], 2).unwrap();
        assert_eq!(
            build_vcr_ood_qa(&empty, &SplitConfig::default(), &an),
            Err(SplitError::NoSamplesAfterFiltering)
        );
        // the only filtered sample becomes validation, nothing remains to train on
        let c = Corpus::new(vec![small_corpus().samples()[1].clone()], 2).unwrap();
        assert!(matches!(
            build_vcr_ood_qa(&c, &SplitConfig::default(), &an),
            Err(SplitError::TooSmall { corpus: 1, filtered: 1, validation: 1, available: 0 })
        ));
        let va = SplitConfig { modality: Modality::Va, ..Default::default() };
        assert_eq!(build_vcr_ood_qa(&c, &va, &an), Err(SplitError::WrongModality(Modality::Va)));
    }

    #[test]
    fn qa_split_small() {
        let an = TextAnalyzer::default();
        let c = small_corpus();
        let r = build_vcr_ood_qa(&c, &SplitConfig::default(), &an).unwrap();
        assert_eq!(r.val_ids, ["clean".to_string()].into());
        assert_eq!(r.train_ids.len(), 2);
        assert!(r.id_holdout_ids.is_empty());
        assert!((r.stats.cooc_rate - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn probes_partition() {
        let an = TextAnalyzer::default();
        let c = small_corpus();
        let p = build_bias_probes(&c, &an);
        assert_eq!(p.cooc, ["cooc".to_string()].into());
        assert_eq!(p.non_cooc.len(), 2);
        let all: BTreeSet<String> = p.head.union(&p.tail).cloned().collect();
        assert_eq!(all.len(), 3);
        assert!(p.head.is_disjoint(&p.tail));
        let r = p.restrict(&["clean".to_string()].into());
        assert!(r.cooc.is_empty());
        assert_eq!(r.non_cooc.len(), 1);
    }
}
