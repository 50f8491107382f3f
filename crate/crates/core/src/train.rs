//! Losses, the SGD loop, λ sweeps and the causal × negative-loss ablation.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causal::{
    backward_intervened, build_dictionary, intervened_logits, BackboneEncoder, CausalError, CausalLayer, Dictionary,
};
use crate::corpus::{Corpus, Vocab, NUM_CHOICES};
use crate::eval::{encode_ids, evaluate, EvalError, EvalReport};
use crate::linalg::{
    cross_entropy_soft, cross_entropy_soft_grad, finite_diff_grad, grad_rel_error, softmax_in_place, DEFAULT_FD_EPS,
};
use crate::model::{Dims, EncodedSample, ModelParams, Task};
use crate::ood::SplitResult;

/// Default weight of the negative-image loss.
pub const DEFAULT_LAMBDA: f64 = 3.0;

// Stream offsets so shuffling, negative sampling and dictionary draws never
// share a generator.
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const NEGATIVE_STREAM: u64 = 0x4e45_4741;
const DICT_STREAM: u64 = 0x4449_4354;

/// Objective applied to predictions made with a mismatched image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegMode {
    /// `-Σ y_i log p_i(Q, I⁻, A)`: cross-entropy toward the true label.
    #[default]
    AsWritten,
    /// The negation of `AsWritten`.
    Adversarial,
    /// Cross-entropy toward the uniform distribution.
    UniformTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_causal: bool,
    pub use_neg_loss: bool,
    pub neg_mode: NegMode,
    /// Dictionary size `N`.
    pub dict_size: usize,
    /// Fused feature width `d`.
    pub hidden: usize,
    /// Attention projection width `d'`.
    pub attn: usize,
    /// Word embedding width.
    pub embed: usize,
    /// Pin the image projection to zero (text-only backbone).
    pub image_blind: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            lr: 0.5,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            use_causal: true,
            use_neg_loss: true,
            neg_mode: NegMode::AsWritten,
            dict_size: 64,
            hidden: 16,
            attn: 16,
            embed: 32,
            image_blind: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig("lr must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::InvalidConfig("lambda must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1"));
        }
        if self.hidden == 0 || self.attn == 0 || self.embed == 0 {
            return Err(TrainError::InvalidConfig("dimensions must be positive"));
        }
        if self.use_causal && self.dict_size == 0 {
            return Err(TrainError::InvalidConfig("dict_size must be positive"));
        }
        Ok(())
    }

    pub fn dims(&self, vocab: &Vocab, feature_dim: usize) -> Dims {
        Dims {
            vocab_rows: vocab.table_rows(),
            embed: self.embed,
            feature: feature_dim,
            hidden: self.hidden,
            attn: self.attn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(&'static str),
    #[error("split has no training samples")]
    EmptyTrainSet,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error(transparent)]
    Causal(#[from] CausalError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("sweep needs at least one lambda value")]
    EmptySweep,
}

/// Parameters, vocabulary and (optionally) one dictionary per task.
#[derive(Debug, Clone, PartialEq)]
pub struct DebiasModel {
    pub vocab: Vocab,
    pub params: ModelParams,
    pub dictionaries: Option<[Dictionary; 2]>,
}

impl DebiasModel {
    pub fn dictionary(&self, task: Task) -> Option<&Dictionary> {
        self.dictionaries.as_ref().map(|d| &d[task.index()])
    }
}

/// Fixed per-task causal layers for one parameter state.
pub fn causal_layers<'a>(dicts: &'a [Dictionary; 2], params: &ModelParams) -> [CausalLayer<'a>; 2] {
    [CausalLayer::new(&dicts[0], params), CausalLayer::new(&dicts[1], params)]
}

/// Image donor for each batch member: a uniformly drawn *other* member.
/// Batches of one get no donor.
pub fn draw_negatives<R: Rng + ?Sized>(batch_len: usize, rng: &mut R) -> Vec<usize> {
    if batch_len < 2 {
        return Vec::new();
    }
    (0..batch_len)
        .map(|b| {
            let r = rng.random_range(0..batch_len - 1);
            if r >= b {
                r + 1
            } else {
                r
            }
        })
        .collect()
}

fn target_for(label: usize, mode: NegMode) -> [f64; NUM_CHOICES] {
    match mode {
        NegMode::UniformTarget => [1.0 / NUM_CHOICES as f64; NUM_CHOICES],
        NegMode::AsWritten | NegMode::Adversarial => {
            let mut t = [0.0; NUM_CHOICES];
            t[label] = 1.0;
            t
        }
    }
}

/// Mean cross-entropy of the base (or intervened, when `layer` is given)
/// predictions. Gradients of the mean, times `scale`, go into `grads`.
pub fn loss_base(
    batch: &[&EncodedSample],
    task: Task,
    params: &ModelParams,
    layer: Option<&CausalLayer<'_>>,
    scale: f64,
    mut grads: Option<&mut ModelParams>,
) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let inv = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for s in batch {
        let fwd = params.forward(s, task);
        let target = target_for(s.label(task), NegMode::AsWritten);
        let (logits, att) = match layer {
            Some(l) => {
                let (z, a) = intervened_logits(&fwd, l, params);
                (z, Some(a))
            }
            None => (params.scores_of(&fwd), None),
        };
        let mut p = logits;
        softmax_in_place(&mut p);
        total += cross_entropy_soft(&p, &target).expect("fixed length");

        if let Some(g) = grads.as_deref_mut() {
            let mut dz = [0.0; NUM_CHOICES];
            cross_entropy_soft_grad(&p, &target, &mut dz);
            let d_fused: [Vec<f64>; NUM_CHOICES] = core::array::from_fn(|i| {
                let d = dz[i] * inv * scale;
                match (layer, &att) {
                    (Some(l), Some(a)) => backward_intervened(fwd.fused(i), &a[i], d, l, params, g),
                    _ => {
                        crate::linalg::axpy(d, fwd.fused(i), g.head.as_mut_slice());
                        params.head.as_slice().iter().map(|w| w * d).collect()
                    }
                }
            });
            params.backward(&fwd, s, task, &s.image, &d_fused, g);
        }
    }
    total * inv
}

/// Mean loss of base predictions with each sample's image replaced by that
/// of `negatives[b]`. Always uses the base path.
pub fn loss_neg(
    batch: &[&EncodedSample],
    task: Task,
    params: &ModelParams,
    negatives: &[usize],
    mode: NegMode,
    scale: f64,
    mut grads: Option<&mut ModelParams>,
) -> f64 {
    if batch.len() < 2 || negatives.len() != batch.len() {
        log::warn!("negative loss needs a batch of at least 2; got {}", batch.len());
        return 0.0;
    }
    let inv = 1.0 / batch.len() as f64;
    let sign = if mode == NegMode::Adversarial { -1.0 } else { 1.0 };
    let mut total = 0.0;
    for (s, &donor) in batch.iter().zip(negatives) {
        let image = &batch[donor].image;
        let fwd = params.forward_with_image(s, task, image);
        let target = target_for(s.label(task), mode);
        let mut p = params.scores_of(&fwd);
        softmax_in_place(&mut p);
        total += sign * cross_entropy_soft(&p, &target).expect("fixed length");

        if let Some(g) = grads.as_deref_mut() {
            let mut dz = [0.0; NUM_CHOICES];
            cross_entropy_soft_grad(&p, &target, &mut dz);
            let d_fused: [Vec<f64>; NUM_CHOICES] = core::array::from_fn(|i| {
                let d = sign * dz[i] * inv * scale;
                crate::linalg::axpy(d, fwd.fused(i), g.head.as_mut_slice());
                params.head.as_slice().iter().map(|w| w * d).collect()
            });
            params.backward(&fwd, s, task, image, &d_fused, g);
        }
    }
    total * inv
}

/// `base + λ · neg`
#[inline]
pub fn total_loss(base: f64, neg: f64, lambda: f64) -> f64 {
    base + lambda * neg
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub base: f64,
    pub neg: f64,
    pub total: f64,
}

/// Training objective of one batch, averaged over both tasks:
/// `mean_t(loss_base_t + λ loss_neg_t)`.
///
/// `negatives` must come from [`draw_negatives`]; it is ignored unless the
/// config enables the negative loss. With λ = 0 the negative loss is still
/// reported but contributes no gradient.
pub fn batch_objective(
    batch: &[&EncodedSample],
    params: &ModelParams,
    layers: Option<&[CausalLayer<'_>; 2]>,
    negatives: &[usize],
    cfg: &TrainConfig,
    mut grads: Option<&mut ModelParams>,
) -> BatchLoss {
    let task_w = 1.0 / Task::ALL.len() as f64;
    let mut out = BatchLoss::default();
    for task in Task::ALL {
        let layer = if cfg.use_causal { layers.map(|l| &l[task.index()]) } else { None };
        out.base += task_w * loss_base(batch, task, params, layer, task_w, grads.as_deref_mut());
        if cfg.use_neg_loss {
            let g = if cfg.lambda != 0.0 { grads.as_deref_mut() } else { None };
            out.neg += task_w * loss_neg(batch, task, params, negatives, cfg.neg_mode, task_w * cfg.lambda, g);
        }
    }
    out.total = total_loss(out.base, out.neg, if cfg.use_neg_loss { cfg.lambda } else { 0.0 });
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_base: f64,
    pub loss_neg: f64,
    pub total: f64,
    pub val: Option<EvalReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Builds one dictionary per task from the training split with `params`
/// as the text encoder.
pub fn build_dictionaries(
    corpus: &Corpus,
    split: &SplitResult,
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<[Dictionary; 2], TrainError> {
    let enc = BackboneEncoder { params, vocab: corpus.vocab() };
    let seed = cfg.seed ^ DICT_STREAM;
    Ok([
        build_dictionary(corpus, split, Task::QtoA, cfg.dict_size, &enc, seed)?,
        build_dictionary(corpus, split, Task::QAtoR, cfg.dict_size, &enc, seed.wrapping_add(1))?,
    ])
}

/// Plain SGD over shuffled mini-batches. Validation accuracy on
/// `split.val_ids` is recorded after every epoch when that set is non-empty.
pub fn train(corpus: &Corpus, split: &SplitResult, cfg: &TrainConfig) -> Result<(DebiasModel, TrainHistory), TrainError> {
    cfg.validate()?;
    if split.train_ids.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let vocab = corpus.vocab().clone();
    let dims = cfg.dims(&vocab, corpus.feature_dim());
    let mut params = ModelParams::init(&dims, cfg.seed);
    if cfg.image_blind {
        params.image_proj.fill(0.0);
    }
    let train_set = encode_ids(corpus, &vocab, &split.train_ids)?;
    let dictionaries = if cfg.use_causal { Some(build_dictionaries(corpus, split, &params, cfg)?) } else { None };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut neg_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NEGATIVE_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut grads = params.zeros_like();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = BatchLoss::default();
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&EncodedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let negatives = if cfg.use_neg_loss { draw_negatives(batch.len(), &mut neg_rng) } else { vec![] };
            grads.scale(0.0);
            let loss = {
                let layers = dictionaries.as_ref().map(|d| causal_layers(d, &params));
                batch_objective(&batch, &params, layers.as_ref(), &negatives, cfg, Some(&mut grads))
            };
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(TrainError::Divergence { epoch, batch: b });
            }
            if cfg.image_blind {
                grads.image_proj.fill(0.0);
            }
            params.add_scaled(-cfg.lr, &grads);
            sums.base += loss.base;
            sums.neg += loss.neg;
            sums.total += loss.total;
            n_batches += 1;
        }
        let k = n_batches.max(1) as f64;
        let model = DebiasModel { vocab: vocab.clone(), params: params.clone(), dictionaries: dictionaries.clone() };
        let val = if split.val_ids.is_empty() {
            None
        } else {
            Some(evaluate(&model, corpus, &split.val_ids, cfg.use_causal)?)
        };
        history.epochs.push(EpochRecord {
            epoch,
            loss_base: sums.base / k,
            loss_neg: sums.neg / k,
            total: sums.total / k,
            val,
        });
    }
    Ok((DebiasModel { vocab, params, dictionaries }, history))
}

/// Trains with `cfg` and evaluates on the split's validation set.
pub fn run_cell(corpus: &Corpus, split: &SplitResult, cfg: &TrainConfig) -> Result<EvalReport, TrainError> {
    let (model, _) = train_without_history(corpus, split, cfg)?;
    Ok(evaluate(&model, corpus, &split.val_ids, cfg.use_causal)?)
}

/// [`train`] without per-epoch validation.
pub fn train_without_history(
    corpus: &Corpus,
    split: &SplitResult,
    cfg: &TrainConfig,
) -> Result<(DebiasModel, TrainHistory), TrainError> {
    let mut no_val = split.clone();
    no_val.val_ids.clear();
    train(corpus, &no_val, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub report: EvalReport,
}

/// Configs for a λ sweep: identical except for λ.
pub fn sweep_configs(cfg: &TrainConfig, values: &[f64]) -> Vec<TrainConfig> {
    values.iter().map(|&lambda| TrainConfig { lambda, ..cfg.clone() }).collect()
}

pub fn sweep_lambda(
    corpus: &Corpus,
    split: &SplitResult,
    cfg: &TrainConfig,
    values: &[f64],
) -> Result<Vec<SweepRow>, TrainError> {
    if values.is_empty() {
        return Err(TrainError::EmptySweep);
    }
    sweep_configs(cfg, values)
        .into_iter()
        .map(|c| Ok(SweepRow { lambda: c.lambda, report: run_cell(corpus, split, &c)? }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub use_causal: bool,
    pub use_neg_loss: bool,
    pub report: EvalReport,
}

/// The four toggle combinations, in table order: (✗,✗), (✓,✗), (✗,✓), (✓,✓).
pub fn ablation_configs(cfg: &TrainConfig) -> [TrainConfig; 4] {
    [(false, false), (true, false), (false, true), (true, true)]
        .map(|(use_causal, use_neg_loss)| TrainConfig { use_causal, use_neg_loss, ..cfg.clone() })
}

pub fn ablate(corpus: &Corpus, split: &SplitResult, cfg: &TrainConfig) -> Result<Vec<AblationRow>, TrainError> {
    ablation_configs(cfg)
        .iter()
        .map(|c| {
            Ok(AblationRow {
                use_causal: c.use_causal,
                use_neg_loss: c.use_neg_loss,
                report: run_cell(corpus, split, c)?,
            })
        })
        .collect()
}

/// A random miniature problem for gradient checks: vocabulary 20, embedding
/// 6, image features 5, d = d' = 8, four dictionary rows per task, batch 3.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckInstance {
    pub params: ModelParams,
    pub batch: Vec<EncodedSample>,
    pub dicts: [Dictionary; 2],
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub max_rel_error: f64,
    /// Flat index of the parameter with the largest error.
    pub worst_param: usize,
    pub num_params: usize,
}

impl GradCheckInstance {
    pub fn random(seed: u64) -> Self {
        const VOCAB: u32 = 20;
        const BATCH: usize = 3;
        let dims = Dims { vocab_rows: VOCAB as usize, embed: 6, feature: 5, hidden: 8, attn: 8 };
        let params = ModelParams::init(&dims, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4743_4b49);
        let toks = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.random_range(0..VOCAB)).collect::<Vec<_>>();
        let batch = (0..BATCH)
            .map(|_| {
                let q = toks(&mut rng, 3);
                let cands: [Vec<u32>; NUM_CHOICES] = core::array::from_fn(|_| toks(&mut rng, 2));
                let rats: [Vec<u32>; NUM_CHOICES] = core::array::from_fn(|_| toks(&mut rng, 3));
                let la = rng.random_range(0..NUM_CHOICES);
                let mut qa = q.clone();
                qa.extend_from_slice(&cands[la]);
                EncodedSample {
                    context: [q, qa],
                    candidates: [cands, rats],
                    labels: [la, rng.random_range(0..NUM_CHOICES)],
                    image: (0..dims.feature).map(|_| rng.random_range(-1.0..1.0)).collect(),
                }
            })
            .collect();
        let mut dict = |task| Dictionary {
            rows: crate::linalg::Matrix::from_fn(4, dims.hidden, |_, _| rng.random_range(-1.0..1.0)),
            source_ids: (0..4).map(|i| alloc::format!("d{i}")).collect(),
            task,
            seed,
        };
        let dicts = [dict(Task::QtoA), dict(Task::QAtoR)];
        let negatives = draw_negatives(BATCH, &mut rng);
        Self { params, batch, dicts, negatives }
    }

    /// Objective value and (optionally) its gradient at `params`.
    pub fn objective(&self, params: &ModelParams, cfg: &TrainConfig, grads: Option<&mut ModelParams>) -> f64 {
        let batch: Vec<&EncodedSample> = self.batch.iter().collect();
        let layers = causal_layers(&self.dicts, params);
        batch_objective(&batch, params, Some(&layers), &self.negatives, cfg, grads).total
    }

    /// Compares the analytic gradient with central differences on every
    /// parameter.
    pub fn check(&self, cfg: &TrainConfig) -> GradCheckResult {
        let mut g = self.params.zeros_like();
        self.objective(&self.params, cfg, Some(&mut g));
        let mut probe = self.params.clone();
        let fd = finite_diff_grad(
            |x| {
                probe.load_flat(x).expect("same length");
                self.objective(&probe, cfg, None)
            },
            &self.params.flatten(),
            DEFAULT_FD_EPS,
        )
        .expect("finite objective");
        let mut out = GradCheckResult { max_rel_error: 0.0, worst_param: 0, num_params: fd.len() };
        for (i, (a, n)) in g.flatten().iter().zip(&fd).enumerate() {
            let e = grad_rel_error(*a, *n);
            if e > out.max_rel_error {
                out.max_rel_error = e;
                out.worst_param = i;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini(seed: u64) -> (ModelParams, Vec<EncodedSample>) {
        let inst = GradCheckInstance::random(seed);
        (inst.params, inst.batch)
    }

    #[test]
    fn objective_gradient_matches_fd_for_all_toggles() {
        for seed in 0..3 {
            let inst = GradCheckInstance::random(seed);
            for neg_mode in [NegMode::AsWritten, NegMode::Adversarial, NegMode::UniformTarget] {
                for c in ablation_configs(&TrainConfig { neg_mode, lambda: 1.7, ..Default::default() }) {
                    let r = inst.check(&c);
                    assert!(r.max_rel_error <= 1e-4, "{seed} {neg_mode:?} {} {}: {r:?}", c.use_causal, c.use_neg_loss);
                }
            }
        }
    }

    #[test]
    fn uniform_predictions_give_ln4() {
        let (mut p, data) = mini(3);
        p.head.fill(0.0);
        let batch: Vec<&EncodedSample> = data.iter().collect();
        let ln4 = libm::log(4.0);
        assert!((loss_base(&batch, Task::QtoA, &p, None, 1.0, None) - ln4).abs() < 1e-12);
        let neg = draw_negatives(3, &mut ChaCha8Rng::seed_from_u64(0));
        let l = loss_neg(&batch, Task::QAtoR, &p, &neg, NegMode::AsWritten, 1.0, None);
        assert!((l - ln4).abs() < 1e-12);
        let l = loss_neg(&batch, Task::QAtoR, &p, &neg, NegMode::Adversarial, 1.0, None);
        assert!((l + ln4).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_has_no_negative_loss() {
        let (p, data) = mini(4);
        let batch = [&data[0]];
        let neg = draw_negatives(1, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(neg.is_empty());
        assert_eq!(loss_neg(&batch, Task::QtoA, &p, &neg, NegMode::AsWritten, 1.0, None), 0.0);
    }

    #[test]
    fn negatives_never_pick_self() {
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for len in 2..7 {
                let n = draw_negatives(len, &mut rng);
                assert_eq!(n.len(), len);
                for (b, &d) in n.iter().enumerate() {
                    assert!(d != b && d < len);
                }
            }
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.0, 0.5, 3.0), 2.5);
        assert_eq!(total_loss(1.25, 9.0, 0.0), 1.25);
        for lambda in [0.0, 0.5, 2.0, 7.0] {
            let slope = total_loss(1.0, 3.0, lambda) - total_loss(1.0, 2.0, lambda);
            assert_eq!(slope, lambda);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
    }
}
