//! Accuracy metrics, scorers and bias-probe reports.

use alloc::string::String;
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causal::{intervened_logits, CausalLayer};
use crate::corpus::{Corpus, Vocab, NUM_CHOICES};
use crate::linalg::{argmax, softmax_in_place};
use crate::model::{EncodedSample, ModelParams, Task};
use crate::ood::BiasProbes;
use crate::train::{causal_layers, DebiasModel};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("evaluation set is empty")]
    Empty,
    #[error("evaluation id {0:?} is not in the corpus")]
    UnknownId(String),
    #[error("causal evaluation requested but the model has no dictionaries")]
    NoDictionary,
}

/// Anything that assigns four logits to a sample for a task.
pub trait Scorer {
    fn logits(&self, s: &EncodedSample, task: Task) -> [f64; NUM_CHOICES];

    fn predict(&self, s: &EncodedSample, task: Task) -> [f64; NUM_CHOICES] {
        let mut p = self.logits(s, task);
        softmax_in_place(&mut p);
        p
    }

    fn choose(&self, s: &EncodedSample, task: Task) -> usize {
        argmax(&self.logits(s, task)).expect("four logits")
    }
}

/// Scores with the base head, or with the adjusted logits when layers are set.
pub struct ModelScorer<'a> {
    pub params: &'a ModelParams,
    pub layers: Option<[CausalLayer<'a>; 2]>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a DebiasModel, use_causal: bool) -> Result<Self, EvalError> {
        let layers = if use_causal {
            let d = model.dictionaries.as_ref().ok_or(EvalError::NoDictionary)?;
            Some(causal_layers(d, &model.params))
        } else {
            None
        };
        Ok(Self { params: &model.params, layers })
    }
}

impl Scorer for ModelScorer<'_> {
    fn logits(&self, s: &EncodedSample, task: Task) -> [f64; NUM_CHOICES] {
        let fwd = self.params.forward(s, task);
        match &self.layers {
            Some(l) => intervened_logits(&fwd, &l[task.index()], self.params).0,
            None => self.params.scores_of(&fwd),
        }
    }
}

/// Uniformly random logits from a seeded stream.
pub struct RandomScorer {
    rng: RefCell<ChaCha8Rng>,
}

impl RandomScorer {
    pub fn new(seed: u64) -> Self {
        Self { rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)) }
    }
}

impl Scorer for RandomScorer {
    fn logits(&self, _: &EncodedSample, _: Task) -> [f64; NUM_CHOICES] {
        let mut rng = self.rng.borrow_mut();
        core::array::from_fn(|_| rng.random::<f64>())
    }
}

/// Percent accuracies. `qa_to_r` conditions on the gold answer; `q_to_ar`
/// needs both stages right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub q_to_a: f64,
    pub qa_to_r: f64,
    pub q_to_ar: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Tally {
    n: usize,
    a: usize,
    r: usize,
    ar: usize,
}

impl Tally {
    fn pct(k: usize, n: usize) -> f64 {
        100.0 * k as f64 / n as f64
    }
}

fn tally<S: Scorer + ?Sized>(scorer: &S, samples: &[EncodedSample]) -> Tally {
    let mut t = Tally::default();
    for s in samples {
        let a = scorer.choose(s, Task::QtoA) == s.label(Task::QtoA);
        let r = scorer.choose(s, Task::QAtoR) == s.label(Task::QAtoR);
        t.n += 1;
        t.a += a as usize;
        t.r += r as usize;
        t.ar += (a && r) as usize;
    }
    t
}

pub fn encode_ids<'a, I>(corpus: &Corpus, vocab: &Vocab, ids: I) -> Result<Vec<EncodedSample>, EvalError>
where
    I: IntoIterator<Item = &'a String>,
{
    ids.into_iter()
        .map(|id| {
            corpus
                .get(id)
                .map(|s| EncodedSample::new(s, vocab))
                .ok_or_else(|| EvalError::UnknownId(id.clone()))
        })
        .collect()
}

/// Accuracy of any scorer over pre-encoded samples.
pub fn evaluate_scorer<S: Scorer + ?Sized>(scorer: &S, samples: &[EncodedSample]) -> Result<EvalReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let t = tally(scorer, samples);
    Ok(EvalReport {
        count: t.n,
        q_to_a: Tally::pct(t.a, t.n),
        qa_to_r: Tally::pct(t.r, t.n),
        q_to_ar: Tally::pct(t.ar, t.n),
        config_hash: None,
        seed: None,
    })
}

/// Accuracy of `model` on the samples named by `ids`.
pub fn evaluate<'a, I>(model: &DebiasModel, corpus: &Corpus, ids: I, use_causal: bool) -> Result<EvalReport, EvalError>
where
    I: IntoIterator<Item = &'a String>,
{
    let samples = encode_ids(corpus, &model.vocab, ids)?;
    let scorer = ModelScorer::new(model, use_causal)?;
    evaluate_scorer(&scorer, &samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub count: usize,
    pub q_to_a: f64,
    /// Absent for frequency probes, which only concern answers.
    pub qa_to_r: Option<f64>,
}

/// Accuracy on each probe subset; a subset with no samples is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasProbeReport {
    pub cooc: Option<ProbeRow>,
    pub non_cooc: Option<ProbeRow>,
    pub head: Option<ProbeRow>,
    pub tail: Option<ProbeRow>,
}

fn probe_row<S: Scorer + ?Sized>(
    scorer: &S,
    corpus: &Corpus,
    vocab: &Vocab,
    ids: &alloc::collections::BTreeSet<String>,
    with_r: bool,
) -> Result<Option<ProbeRow>, EvalError> {
    if ids.is_empty() {
        return Ok(None);
    }
    let t = tally(scorer, &encode_ids(corpus, vocab, ids)?);
    Ok(Some(ProbeRow {
        count: t.n,
        q_to_a: Tally::pct(t.a, t.n),
        qa_to_r: with_r.then(|| Tally::pct(t.r, t.n)),
    }))
}

pub fn bias_probe_report<S: Scorer + ?Sized>(
    scorer: &S,
    corpus: &Corpus,
    vocab: &Vocab,
    probes: &BiasProbes,
) -> Result<BiasProbeReport, EvalError> {
    Ok(BiasProbeReport {
        cooc: probe_row(scorer, corpus, vocab, &probes.cooc, true)?,
        non_cooc: probe_row(scorer, corpus, vocab, &probes.non_cooc, true)?,
        head: probe_row(scorer, corpus, vocab, &probes.head, false)?,
        tail: probe_row(scorer, corpus, vocab, &probes.tail, false)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn enc(la: usize, lr: usize) -> EncodedSample {
        EncodedSample {
            context: [vec![1], vec![1, 2]],
            candidates: [core::array::from_fn(|i| vec![i as u32]), core::array::from_fn(|i| vec![i as u32])],
            labels: [la, lr],
            image: vec![0.0],
        }
    }

    /// Picks the candidate whose first token equals a fixed index per task.
    struct Fixed([usize; 2]);
    impl Scorer for Fixed {
        fn logits(&self, _: &EncodedSample, task: Task) -> [f64; NUM_CHOICES] {
            let mut z = [0.0; NUM_CHOICES];
            z[self.0[task.index()]] = 1.0;
            z
        }
    }

    #[test]
    fn joint_accuracy_is_conjunction() {
        // (a right, r right), (a right, r wrong), (a wrong, r right), (both wrong)
        let data = [enc(0, 0), enc(0, 1), enc(1, 0), enc(1, 1)];
        let r = evaluate_scorer(&Fixed([0, 0]), &data).unwrap();
        assert_eq!(r.count, 4);
        assert_eq!(r.q_to_a, 50.0);
        assert_eq!(r.qa_to_r, 50.0);
        assert_eq!(r.q_to_ar, 25.0);
        assert!(r.q_to_ar <= r.q_to_a.min(r.qa_to_r));
    }

    #[test]
    fn empty_set_is_an_error() {
        assert_eq!(evaluate_scorer(&Fixed([0, 0]), &[]), Err(EvalError::Empty));
    }

    #[test]
    fn predictions_are_distributions() {
        let s = RandomScorer::new(3);
        for _ in 0..50 {
            let p = s.predict(&enc(0, 0), Task::QtoA);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn random_scorer_is_seeded() {
        let data: Vec<_> = (0..64).map(|i| enc(i % 4, (i / 4) % 4)).collect();
        let a = evaluate_scorer(&RandomScorer::new(9), &data).unwrap();
        let b = evaluate_scorer(&RandomScorer::new(9), &data).unwrap();
        assert_eq!(a, b);
    }
}
