//! Backdoor-adjusted scoring with a confounder dictionary.
//!
//! The dictionary holds `N` encoded ground-truth answers. For a fused feature
//! `m`, attention over the rows gives the confounder expectation
//!
//! ```text
//! L = W1 m,  K_j = W2 r_j,  α = softmax_j(L · K_j),  E[c] = Σ_j α_j r_j
//! ```
//!
//! and the adjusted logit is `w · (m + E[c])`, i.e. the expectation over
//! confounders moved inside the softmax. [`exact_backdoor`] evaluates the
//! un-approximated sum `Σ_c P(c) softmax(logits | c)` for comparison.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Token, Vocab, NUM_CHOICES};
use crate::linalg::{axpy, dot, softmax_in_place, Matrix};
use crate::model::{EncodedSample, Forward, ModelParams, Task};
use crate::ood::SplitResult;

/// Dictionary size for full-scale runs.
pub const FULL_SCALE_DICT_SIZE: usize = 1000;
/// Hidden width for full-scale runs.
pub const FULL_SCALE_HIDDEN: usize = 512;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CausalError {
    #[error("dictionary size {requested} exceeds the {available} training samples")]
    TooLarge { requested: usize, available: usize },
    #[error("dictionary size must be at least 1")]
    Empty,
    #[error("encoder produced a {actual}-dim row, expected {expected}")]
    RowWidth { expected: usize, actual: usize },
    #[error("training id {0:?} is not in the corpus")]
    UnknownId(String),
    #[error("invalid confounder prior: {0}")]
    BadPrior(&'static str),
    #[error("prior has {prior} entries but {confounders} confounders were given")]
    PriorLength { prior: usize, confounders: usize },
}

/// Maps answer text to a row of the confounder dictionary.
pub trait AnswerEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, tokens: &[Token]) -> Vec<f64>;
}

/// Encodes text with the backbone itself (empty context, zero image).
pub struct BackboneEncoder<'a> {
    pub params: &'a ModelParams,
    pub vocab: &'a Vocab,
}

impl AnswerEncoder for BackboneEncoder<'_> {
    fn dim(&self) -> usize {
        self.params.dims().hidden
    }

    fn encode(&self, tokens: &[Token]) -> Vec<f64> {
        self.params.encode_text(&self.vocab.encode(tokens))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    /// `N × d`, one row per sampled ground-truth choice.
    pub rows: Matrix,
    pub source_ids: Vec<String>,
    pub task: Task,
    pub seed: u64,
}

impl Dictionary {
    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }
}

/// Samples `n` training ids without replacement and encodes the
/// ground-truth answer (or rationale) of each.
pub fn build_dictionary(
    corpus: &Corpus,
    split: &SplitResult,
    task: Task,
    n: usize,
    encoder: &dyn AnswerEncoder,
    seed: u64,
) -> Result<Dictionary, CausalError> {
    if n == 0 {
        return Err(CausalError::Empty);
    }
    let pool: Vec<&String> = split.train_ids.iter().collect();
    if n > pool.len() {
        return Err(CausalError::TooLarge { requested: n, available: pool.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, pool.len(), n);
    let d = encoder.dim();
    let mut data = Vec::with_capacity(n * d);
    let mut source_ids = Vec::with_capacity(n);
    for i in picks.iter() {
        let id = pool[i];
        let s = corpus.get(id).ok_or_else(|| CausalError::UnknownId(id.clone()))?;
        let toks = match task {
            Task::QtoA => s.gt_answer(),
            Task::QAtoR => s.gt_rationale(),
        };
        let row = encoder.encode(toks);
        if row.len() != d {
            return Err(CausalError::RowWidth { expected: d, actual: row.len() });
        }
        data.extend_from_slice(&row);
        source_ids.push(id.clone());
    }
    let rows = Matrix::from_vec(n, d, data).expect("row width checked");
    Ok(Dictionary { rows, source_ids, task, seed })
}

/// Dictionary together with its keys `K = rows · W2ᵀ` under fixed params.
pub struct CausalLayer<'a> {
    pub dict: &'a Dictionary,
    /// `N × attn`
    pub keys: Matrix,
}

impl<'a> CausalLayer<'a> {
    pub fn new(dict: &'a Dictionary, params: &ModelParams) -> Self {
        let n = dict.len();
        let mut keys = Matrix::zeros(n, params.w2.rows());
        for j in 0..n {
            params.w2.matvec_into(dict.rows.row(j), keys.row_mut(j));
        }
        Self { dict, keys }
    }
}

/// Intermediate values of one confounder expectation.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Vec<f64>,
    pub weights: Vec<f64>,
    pub expectation: Vec<f64>,
}

/// Attention-weighted mean of the dictionary rows for fused feature `m`.
pub fn confounder_expectation(m: &[f64], layer: &CausalLayer<'_>, params: &ModelParams) -> Attention {
    let query = params.w1.matvec(m);
    let mut weights = layer.keys.matvec(&query);
    softmax_in_place(&mut weights);
    let expectation = layer.dict.rows.matvec_t(&weights);
    Attention { query, weights, expectation }
}

/// Adjusted logits `w · (m_i + E[c | m_i])` for all candidates of a forward.
pub fn intervened_logits(
    fwd: &Forward,
    layer: &CausalLayer<'_>,
    params: &ModelParams,
) -> ([f64; NUM_CHOICES], [Attention; NUM_CHOICES]) {
    let att: [Attention; NUM_CHOICES] =
        core::array::from_fn(|i| confounder_expectation(fwd.fused(i), layer, params));
    let logits = core::array::from_fn(|i| params.score(fwd.fused(i)) + params.score(&att[i].expectation));
    (logits, att)
}

pub fn intervened_scores(
    s: &EncodedSample,
    task: Task,
    params: &ModelParams,
    layer: &CausalLayer<'_>,
) -> [f64; NUM_CHOICES] {
    intervened_logits(&params.forward(s, task), layer, params).0
}

/// Backward through one adjusted logit. Accumulates into `grads.head`,
/// `grads.w1`, `grads.w2` and returns `∂L/∂m`.
pub fn backward_intervened(
    m: &[f64],
    att: &Attention,
    d_logit: f64,
    layer: &CausalLayer<'_>,
    params: &ModelParams,
    grads: &mut ModelParams,
) -> Vec<f64> {
    let w = params.head.as_slice();
    // logit = w·m + w·E
    let mut feat = m.to_vec();
    axpy(1.0, &att.expectation, &mut feat);
    axpy(d_logit, &feat, grads.head.as_mut_slice());
    let mut dm: Vec<f64> = w.iter().map(|x| x * d_logit).collect();

    // dE = d_logit · w; dα_j = dE · r_j
    let rows = &layer.dict.rows;
    let d_alpha: Vec<f64> = (0..rows.rows()).map(|j| d_logit * dot(w, rows.row(j))).collect();
    let mean = dot(&att.weights, &d_alpha);
    let d_scores: Vec<f64> = att.weights.iter().zip(&d_alpha).map(|(a, g)| a * (g - mean)).collect();

    // s_j = L · K_j
    let d_query = layer.keys.matvec_t(&d_scores);
    for (j, &ds) in d_scores.iter().enumerate() {
        if ds != 0.0 {
            grads.w2.add_outer(ds, &att.query, rows.row(j));
        }
    }
    grads.w1.add_outer(1.0, &d_query, m);
    params.w1.matvec_t_acc(&d_query, &mut dm);
    dm
}

/// Prior over dictionary entries for the exact backdoor sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfounderPrior {
    p: Vec<f64>,
}

impl ConfounderPrior {
    pub fn new(p: Vec<f64>) -> Result<Self, CausalError> {
        if p.is_empty() {
            return Err(CausalError::BadPrior("empty"));
        }
        if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(CausalError::BadPrior("negative or non-finite entry"));
        }
        if (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(CausalError::BadPrior("does not sum to 1"));
        }
        Ok(Self { p })
    }

    pub fn uniform(n: usize) -> Result<Self, CausalError> {
        if n == 0 {
            return Err(CausalError::BadPrior("empty"));
        }
        Ok(Self { p: vec![1.0 / n as f64; n] })
    }

    pub fn one_hot(n: usize, k: usize) -> Result<Self, CausalError> {
        if k >= n {
            return Err(CausalError::BadPrior("hot index out of range"));
        }
        let mut p = vec![0.0; n];
        p[k] = 1.0;
        Ok(Self { p })
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }
}

/// Candidate logits under each confounder: `logits[j][i] = w · (m_i + r_j)`.
pub fn confounder_logits(fwd: &Forward, dict: &Dictionary, params: &ModelParams) -> Vec<[f64; NUM_CHOICES]> {
    (0..dict.len())
        .map(|j| {
            let shift = params.score(dict.rows.row(j));
            core::array::from_fn(|i| params.score(fwd.fused(i)) + shift)
        })
        .collect()
}

/// `Σ_j prior_j · softmax(logits_j)`.
pub fn exact_backdoor(
    per_confounder_logits: &[[f64; NUM_CHOICES]],
    prior: &ConfounderPrior,
) -> Result<[f64; NUM_CHOICES], CausalError> {
    if per_confounder_logits.len() != prior.p.len() {
        return Err(CausalError::PriorLength { prior: prior.p.len(), confounders: per_confounder_logits.len() });
    }
    let mut out = [0.0; NUM_CHOICES];
    for (logits, &pj) in per_confounder_logits.iter().zip(&prior.p) {
        if pj == 0.0 {
            continue;
        }
        let mut p = *logits;
        softmax_in_place(&mut p);
        for (o, x) in out.iter_mut().zip(p) {
            *o += pj * x;
        }
    }
    Ok(out)
}
