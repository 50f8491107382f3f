//! Synthetic corpora with tunable co-occurrence and frequency bias.
//!
//! Every sample shows a few objects. The question names a category verb and
//! some filler words; the correct answer names the one candidate object that
//! is in the image, so the task is solvable from the image alone. Two textual
//! shortcuts are layered on top:
//!
//! * with probability `rho_cooc` the correct answer repeats a filler word of
//!   the question (and the correct rationale repeats a word of question+answer);
//! * within each category the target object is drawn from a Zipf law over a
//!   category-specific ranking of objects, so a few answers dominate.
//!
//! Distractor answers and rationales are borrowed from other samples whose
//! target is absent from this image.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, Sample, Token, NUM_CHOICES};

/// Category verbs, one per question category.
pub const CATEGORY_VERBS: [&str; 16] = [
    "holding", "wearing", "watching", "eating", "carrying", "pointing", "reading", "drinking", "pushing", "pulling",
    "throwing", "painting", "cooking", "cleaning", "opening", "fixing",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_samples: usize,
    /// Number of distinct filler words.
    pub vocab_size: usize,
    pub n_objects: usize,
    pub feature_dim: usize,
    pub rho_cooc: f64,
    /// Copy probability for rationales; `None` reuses `rho_cooc`.
    pub rationale_cooc: Option<f64>,
    pub zipf_s: f64,
    /// Probability that a distractor is borrowed from a sample whose answer
    /// (or rationale) shares a word with this question (or question+answer).
    pub distractor_cooc: f64,
    /// Standard deviation of the feature noise. Infinite noise drops the
    /// object indicators and leaves unit-variance noise.
    pub noise: f64,
    pub seed: u64,
    pub n_categories: usize,
    pub objects_per_image: usize,
    pub question_words: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 5000,
            vocab_size: 200,
            n_objects: 120,
            feature_dim: 120,
            rho_cooc: 0.9,
            rationale_cooc: None,
            zipf_s: 1.2,
            distractor_cooc: 0.3,
            noise: 0.1,
            seed: 0,
            n_categories: 8,
            objects_per_image: 1,
            question_words: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Invalid(&'static str),
    #[error("vocabulary too small: {0}")]
    VocabTooSmall(&'static str),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl SynthConfig {
    pub fn rationale_rho(&self) -> f64 {
        self.rationale_cooc.unwrap_or(self.rho_cooc)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.rho_cooc) || !prob(self.rationale_rho()) || !prob(self.distractor_cooc) {
            return Err(SynthError::Invalid("probabilities must lie in [0, 1]"));
        }
        if !(self.zipf_s >= 0.0 && self.zipf_s.is_finite()) {
            return Err(SynthError::Invalid("zipf_s must be finite and nonnegative"));
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return Err(SynthError::Invalid("noise must be nonnegative"));
        }
        if self.n_samples == 0 || self.objects_per_image == 0 || self.question_words == 0 {
            return Err(SynthError::Invalid("sizes must be positive"));
        }
        if self.n_categories == 0 || self.n_categories > CATEGORY_VERBS.len() {
            return Err(SynthError::Invalid("n_categories must be between 1 and 16"));
        }
        if self.n_objects < self.objects_per_image + NUM_CHOICES - 1 {
            return Err(SynthError::VocabTooSmall("need n_objects >= objects_per_image + 3"));
        }
        if self.vocab_size < 2 * self.question_words + 1 {
            return Err(SynthError::VocabTooSmall("need vocab_size >= 2 * question_words + 1"));
        }
        if self.noise.is_finite() && self.feature_dim < self.n_objects {
            return Err(SynthError::Invalid("feature_dim must be at least n_objects"));
        }
        if self.feature_dim == 0 {
            return Err(SynthError::Invalid("feature_dim must be positive"));
        }
        Ok(())
    }
}

fn object(k: usize) -> String {
    format!("obj{k}")
}

fn filler(k: usize) -> String {
    format!("ctx{k}")
}

fn attribute(k: usize) -> String {
    format!("attr{k}")
}

fn toks(words: &[String]) -> Vec<Token> {
    words.iter().map(|w| Token::new(w).expect("generated words are non-empty")).collect()
}

/// Latent draw for one sample, before distractors are attached.
struct Latent {
    target: usize,
    objects: Vec<usize>,
    question: Vec<String>,
    answer: Vec<String>,
    rationale: Vec<String>,
}

fn draw_latent(cfg: &SynthConfig, rankings: &[Vec<usize>], zipf: &WeightedIndex<f64>, rng: &mut ChaCha8Rng) -> Latent {
    let category = rng.random_range(0..cfg.n_categories);
    let target = rankings[category][zipf.sample(rng)];
    let mut objects = Vec::with_capacity(cfg.objects_per_image);
    objects.push(target);
    while objects.len() < cfg.objects_per_image {
        let o = rng.random_range(0..cfg.n_objects);
        if !objects.contains(&o) {
            objects.push(o);
        }
    }

    let ctx: Vec<usize> = rand::seq::index::sample(rng, cfg.vocab_size, cfg.question_words).into_vec();
    let mut question = ["what", "is", "person1", CATEGORY_VERBS[category]].map(String::from).to_vec();
    question.extend(ctx.iter().map(|&k| filler(k)));

    let mut answer = ["it", "is", "the"].map(String::from).to_vec();
    answer.push(object(target));
    if rng.random_bool(cfg.rho_cooc) {
        answer.push(filler(*ctx.choose(rng).expect("question_words > 0")));
    }

    let mut rationale = ["because", "of", "the"].map(String::from).to_vec();
    rationale.push(attribute(target));
    if rng.random_bool(cfg.rationale_rho()) {
        let pool: Vec<&String> = question[4..].iter().chain(&answer[3..]).collect();
        rationale.push((*pool.choose(rng).expect("non-empty")).clone());
    }
    Latent { target, objects, question, answer, rationale }
}

/// Filler word for a borrowed distractor that does not occur in `question`.
fn foreign_filler(cfg: &SynthConfig, question: &[String], rng: &mut ChaCha8Rng) -> String {
    loop {
        let w = filler(rng.random_range(0..cfg.vocab_size));
        if !question.contains(&w) {
            return w;
        }
    }
}

/// Replaces trailing filler words of a borrowed text that happen to occur in
/// this sample's question, so only the correct answer can overlap by design.
fn scrub(mut words: Vec<String>, question: &[String], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<String> {
    for w in words.iter_mut().skip(4) {
        if question.contains(w) {
            *w = foreign_filler(cfg, question, rng);
        }
    }
    words
}

fn features(cfg: &SynthConfig, objects: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = alloc::vec![0.0; cfg.feature_dim];
    let (scale, indicators) = if cfg.noise.is_finite() { (cfg.noise, true) } else { (1.0, false) };
    if indicators {
        for &o in objects {
            x[o] = 1.0;
        }
    }
    if scale > 0.0 {
        for v in x.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += scale * z;
        }
    }
    x
}

/// Correct answers (or rationales) of all samples, indexed for borrowing.
struct DonorPool<'a> {
    latents: &'a [Latent],
    answers: bool,
    /// Samples whose text contains a given filler or object word past the
    /// fixed prefix.
    by_word: BTreeMap<&'a str, Vec<usize>>,
}

impl<'a> DonorPool<'a> {
    fn new(latents: &'a [Latent], answers: bool) -> Self {
        let mut by_word: BTreeMap<&'a str, Vec<usize>> = BTreeMap::new();
        for (j, l) in latents.iter().enumerate() {
            let text = if answers { &l.answer } else { &l.rationale };
            for w in &text[4..] {
                by_word.entry(w.as_str()).or_default().push(j);
            }
        }
        Self { latents, answers, by_word }
    }

    fn text(&self, j: usize) -> Vec<String> {
        let l = &self.latents[j];
        if self.answers { l.answer.clone() } else { l.rationale.clone() }
    }

    fn fallback(&self, o: usize) -> Vec<String> {
        let (head, last) = if self.answers { (["it", "is", "the"], object(o)) } else { (["because", "of", "the"], attribute(o)) };
        head.map(String::from).into_iter().chain([last]).collect()
    }

    /// Three wrong texts for sample `i`, each borrowed from a sample whose
    /// target is not in this image and differs from the other picks. With
    /// probability `distractor_cooc` a pick must share a word with `context`;
    /// otherwise any overlap with `context` is scrubbed.
    fn distractors(&self, i: usize, l: &Latent, context: &[String], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
        const TRIES: usize = 64;
        let mut used: Vec<usize> = l.objects.clone();
        let mut out = Vec::with_capacity(NUM_CHOICES - 1);
        while out.len() < NUM_CHOICES - 1 {
            let ok = |j: usize, used: &[usize]| j != i && !used.contains(&self.latents[j].target);
            let mut pick = None;
            if rng.random_bool(cfg.distractor_cooc) {
                let w = context.choose(rng).expect("non-empty context");
                if let Some(ds) = self.by_word.get(w.as_str()) {
                    pick = (0..TRIES).map(|_| *ds.choose(rng).expect("non-empty")).find(|&j| ok(j, &used));
                }
                if let Some(j) = pick {
                    used.push(self.latents[j].target);
                    out.push(self.text(j));
                    continue;
                }
            }
            pick = (0..TRIES).map(|_| rng.random_range(0..self.latents.len())).find(|&j| ok(j, &used));
            let (o, text) = match pick {
                Some(j) => (self.latents[j].target, self.text(j)),
                None => {
                    let o = (0..cfg.n_objects).find(|o| !used.contains(o)).expect("validated object count");
                    (o, self.fallback(o))
                }
            };
            used.push(o);
            out.push(scrub(text, context, cfg, rng));
        }
        out
    }
}

/// Draws a corpus. Deterministic in `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<Corpus, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let rankings: Vec<Vec<usize>> = (0..cfg.n_categories)
        .map(|_| {
            let mut r: Vec<usize> = (0..cfg.n_objects).collect();
            r.shuffle(&mut rng);
            r
        })
        .collect();
    let weights: Vec<f64> = (0..cfg.n_objects).map(|r| libm::pow((r + 1) as f64, -cfg.zipf_s)).collect();
    let zipf = WeightedIndex::new(&weights).map_err(|_| SynthError::Invalid("bad zipf weights"))?;

    let latents: Vec<Latent> = (0..cfg.n_samples).map(|_| draw_latent(cfg, &rankings, &zipf, &mut rng)).collect();
    let answer_pool = DonorPool::new(&latents, true);
    let rationale_pool = DonorPool::new(&latents, false);

    let mut samples = Vec::with_capacity(cfg.n_samples);
    for (i, l) in latents.iter().enumerate() {
        let qa_words: Vec<String> = l.question[4..].iter().chain(&l.answer[3..]).cloned().collect();
        let mut answers = answer_pool.distractors(i, l, &l.question[4..], cfg, &mut rng);
        let mut rationales = rationale_pool.distractors(i, l, &qa_words, cfg, &mut rng);
        let answer_label = rng.random_range(0..NUM_CHOICES);
        answers.insert(answer_label, l.answer.clone());
        let rationale_label = rng.random_range(0..NUM_CHOICES);
        rationales.insert(rationale_label, l.rationale.clone());

        // the target is tagged twice so it is the image's dominant object
        let mut tags: Vec<String> = l.objects.iter().map(|&o| object(o)).collect();
        tags.insert(0, object(l.target));
        let image_feature = features(cfg, &l.objects, &mut rng);
        samples.push(Sample {
            id: format!("s{i:06}"),
            question: question_tokens(&l.question),
            answer_choices: to_choices(&answers),
            rationale_choices: to_choices(&rationales),
            answer_label,
            rationale_label,
            object_tags: tags,
            image_feature,
        });
    }
    Ok(Corpus::new(samples, cfg.feature_dim)?)
}

fn question_tokens(words: &[String]) -> Vec<Token> {
    let mut q = toks(words);
    q[2] = Token::with_person_flag(&words[2], true).expect("non-empty");
    q
}

fn to_choices(words: &[Vec<String>]) -> [Vec<Token>; NUM_CHOICES] {
    core::array::from_fn(|i| toks(&words[i]))
}

/// Target object of a generated sample: the object named by its correct answer.
pub fn target_object(s: &Sample) -> Option<&str> {
    s.gt_answer().iter().map(|t| t.surface()).find(|w| w.starts_with("obj"))
}
