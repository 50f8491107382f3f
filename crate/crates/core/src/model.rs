//! Mean-pooling fusion backbone and its linear scoring head.
//!
//! For a context (question, or question + gold answer) and one candidate:
//!
//! ```text
//! q = mean(E[ctx]),  a = mean(E[cand]),  v = P x
//! m = tanh(U_q q + U_a a + U_v v + U_qa (q ⊙ a) + U_va (v ⊙ a) + b)
//! score = w · m
//! ```

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{concat_qa, Corpus, Sample, Vocab, NUM_CHOICES};
use crate::linalg::{axpy, dot, Matrix};

/// Half-width of the uniform interval for word embeddings.
pub const EMBED_INIT: f64 = 1.0;

/// Half-width of the uniform initialization interval for a block: unit scale
/// for embeddings, zero for the bias, `sqrt(3 / fan_in)` elsewhere.
pub fn init_scale(block: &str, fan_in: usize) -> f64 {
    match block {
        "embedding" => EMBED_INIT,
        "bias" => 0.0,
        _ => libm::sqrt(3.0 / fan_in.max(1) as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Question → answer.
    QtoA,
    /// Question + gold answer → rationale.
    QAtoR,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::QtoA, Task::QAtoR];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Task::QtoA => 0,
            Task::QAtoR => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::QtoA => "q_to_a",
            Task::QAtoR => "qa_to_r",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Embedding rows, including the UNK row.
    pub vocab_rows: usize,
    /// Word embedding width.
    pub embed: usize,
    /// Image feature length.
    pub feature: usize,
    /// Fused feature width.
    pub hidden: usize,
    /// Width of the attention projections.
    pub attn: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("parameter block {block} has shape {actual:?}, expected {expected:?}")]
    Shape { block: &'static str, expected: (usize, usize), actual: (usize, usize) },
    #[error("parameter block {0} contains non-finite values")]
    NonFinite(&'static str),
    #[error("expected {expected} parameters, got {actual}")]
    FlatLength { expected: usize, actual: usize },
}

/// Names of the parameter blocks, in storage order.
pub const BLOCK_NAMES: [&str; 11] =
    ["embedding", "image_proj", "u_ctx", "u_cand", "u_img", "u_ctx_cand", "u_img_cand", "bias", "head", "w1", "w2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub embedding: Matrix,
    pub image_proj: Matrix,
    pub u_ctx: Matrix,
    pub u_cand: Matrix,
    pub u_img: Matrix,
    pub u_ctx_cand: Matrix,
    pub u_img_cand: Matrix,
    /// `hidden × 1`
    pub bias: Matrix,
    /// Scoring head `w`, `1 × hidden`.
    pub head: Matrix,
    /// Query projection of the fused feature, `attn × hidden`.
    pub w1: Matrix,
    /// Key projection of dictionary rows, `attn × hidden`.
    pub w2: Matrix,
}

fn expected_shapes(d: &Dims) -> [(usize, usize); 11] {
    let (e, h) = (d.embed, d.hidden);
    [
        (d.vocab_rows, e),
        (e, d.feature),
        (h, e),
        (h, e),
        (h, e),
        (h, e),
        (h, e),
        (h, 1),
        (1, h),
        (d.attn, h),
        (d.attn, h),
    ]
}

impl ModelParams {
    pub fn zeros(dims: &Dims) -> Self {
        let s = expected_shapes(dims);
        let z = |i: usize| Matrix::zeros(s[i].0, s[i].1);
        Self {
            embedding: z(0),
            image_proj: z(1),
            u_ctx: z(2),
            u_cand: z(3),
            u_img: z(4),
            u_ctx_cand: z(5),
            u_img_cand: z(6),
            bias: z(7),
            head: z(8),
            w1: z(9),
            w2: z(10),
        }
    }

    /// Uniform in `±init_scale(block)`, block by block in storage order.
    pub fn init(dims: &Dims, seed: u64) -> Self {
        let mut p = Self::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, b) in p.blocks_mut() {
            let s = init_scale(name, b.cols());
            for x in b.as_mut_slice() {
                *x = if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
            }
        }
        p
    }

    pub fn dims(&self) -> Dims {
        Dims {
            vocab_rows: self.embedding.rows(),
            embed: self.embedding.cols(),
            feature: self.image_proj.cols(),
            hidden: self.u_ctx.rows(),
            attn: self.w1.rows(),
        }
    }

    pub fn blocks(&self) -> [(&'static str, &Matrix); 11] {
        [
            (BLOCK_NAMES[0], &self.embedding),
            (BLOCK_NAMES[1], &self.image_proj),
            (BLOCK_NAMES[2], &self.u_ctx),
            (BLOCK_NAMES[3], &self.u_cand),
            (BLOCK_NAMES[4], &self.u_img),
            (BLOCK_NAMES[5], &self.u_ctx_cand),
            (BLOCK_NAMES[6], &self.u_img_cand),
            (BLOCK_NAMES[7], &self.bias),
            (BLOCK_NAMES[8], &self.head),
            (BLOCK_NAMES[9], &self.w1),
            (BLOCK_NAMES[10], &self.w2),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Matrix); 11] {
        [
            (BLOCK_NAMES[0], &mut self.embedding),
            (BLOCK_NAMES[1], &mut self.image_proj),
            (BLOCK_NAMES[2], &mut self.u_ctx),
            (BLOCK_NAMES[3], &mut self.u_cand),
            (BLOCK_NAMES[4], &mut self.u_img),
            (BLOCK_NAMES[5], &mut self.u_ctx_cand),
            (BLOCK_NAMES[6], &mut self.u_img_cand),
            (BLOCK_NAMES[7], &mut self.bias),
            (BLOCK_NAMES[8], &mut self.head),
            (BLOCK_NAMES[9], &mut self.w1),
            (BLOCK_NAMES[10], &mut self.w2),
        ]
    }

    /// Checks shapes against `dims` and that every entry is finite.
    pub fn validate(&self, dims: &Dims) -> Result<(), ModelError> {
        for ((name, b), expected) in self.blocks().into_iter().zip(expected_shapes(dims)) {
            if b.shape() != expected {
                return Err(ModelError::Shape { block: name, expected, actual: b.shape() });
            }
            if !b.is_finite() {
                return Err(ModelError::NonFinite(name));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.as_slice().len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, b) in self.blocks() {
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(ModelError::FlatLength { expected: n, actual: flat.len() });
        }
        let mut off = 0;
        for (_, b) in self.blocks_mut() {
            let len = b.as_slice().len();
            b.as_mut_slice().copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.dims())
    }

    /// `self += scale · other`, block by block.
    pub fn add_scaled(&mut self, scale: f64, other: &ModelParams) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.add_scaled(scale, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, b) in self.blocks_mut() {
            b.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.is_finite())
    }
}

/// A sample with tokens mapped to vocabulary indices.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    /// Question, and question + gold answer.
    pub context: [Vec<u32>; 2],
    /// Answer candidates, and rationale candidates.
    pub candidates: [[Vec<u32>; NUM_CHOICES]; 2],
    pub labels: [usize; 2],
    pub image: Vec<f64>,
}

impl EncodedSample {
    pub fn new(sample: &Sample, vocab: &Vocab) -> Self {
        Self {
            context: [vocab.encode(&sample.question), vocab.encode(&concat_qa(sample))],
            candidates: [
                sample.answer_choices.each_ref().map(|c| vocab.encode(c)),
                sample.rationale_choices.each_ref().map(|c| vocab.encode(c)),
            ],
            labels: [sample.answer_label, sample.rationale_label],
            image: sample.image_feature.clone(),
        }
    }

    #[inline]
    pub fn context(&self, task: Task) -> &[u32] {
        &self.context[task.index()]
    }

    #[inline]
    pub fn candidates(&self, task: Task) -> &[Vec<u32>; NUM_CHOICES] {
        &self.candidates[task.index()]
    }

    #[inline]
    pub fn label(&self, task: Task) -> usize {
        self.labels[task.index()]
    }
}

pub fn encode_corpus(corpus: &Corpus, vocab: &Vocab) -> Vec<EncodedSample> {
    corpus.samples().iter().map(|s| EncodedSample::new(s, vocab)).collect()
}

/// Intermediate values of one candidate's fusion.
#[derive(Debug, Clone)]
pub struct CandidateForward {
    pub cand_mean: Vec<f64>,
    pub ctx_cand: Vec<f64>,
    pub img_cand: Vec<f64>,
    /// The fused feature `m`.
    pub fused: Vec<f64>,
}

/// Fusion of all four candidates of one (sample, task).
#[derive(Debug, Clone)]
pub struct Forward {
    pub ctx_mean: Vec<f64>,
    pub img_proj: Vec<f64>,
    pub cands: [CandidateForward; NUM_CHOICES],
}

impl Forward {
    pub fn fused(&self, i: usize) -> &[f64] {
        &self.cands[i].fused
    }
}

fn mean_pool(emb: &Matrix, toks: &[u32]) -> Vec<f64> {
    let mut out = vec![0.0; emb.cols()];
    if toks.is_empty() {
        return out;
    }
    let inv = 1.0 / toks.len() as f64;
    for &t in toks {
        axpy(inv, emb.row(t as usize), &mut out);
    }
    out
}

fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

impl ModelParams {
    #[inline]
    fn clamp_token(&self, t: u32) -> u32 {
        if (t as usize) < self.embedding.rows() {
            t
        } else {
            crate::corpus::Vocab::UNK
        }
    }

    fn pool(&self, toks: &[u32]) -> Vec<f64> {
        let toks: Vec<u32> = toks.iter().map(|&t| self.clamp_token(t)).collect();
        mean_pool(&self.embedding, &toks)
    }

    fn fuse_one(&self, ctx_mean: &[f64], img_proj: &[f64], pre_shared: &[f64], cand: &[u32]) -> CandidateForward {
        let cand_mean = self.pool(cand);
        let ctx_cand = hadamard(ctx_mean, &cand_mean);
        let img_cand = hadamard(img_proj, &cand_mean);
        let mut h = pre_shared.to_vec();
        self.u_cand.matvec_acc(&cand_mean, &mut h);
        self.u_ctx_cand.matvec_acc(&ctx_cand, &mut h);
        self.u_img_cand.matvec_acc(&img_cand, &mut h);
        let fused = h.into_iter().map(libm::tanh).collect();
        CandidateForward { cand_mean, ctx_cand, img_cand, fused }
    }

    /// Fuses every candidate against `context` and `image`.
    pub fn forward_raw(&self, context: &[u32], cands: &[Vec<u32>; NUM_CHOICES], image: &[f64]) -> Forward {
        let ctx_mean = self.pool(context);
        let img_proj = self.image_proj.matvec(image);
        let mut shared = self.bias.as_slice().to_vec();
        self.u_ctx.matvec_acc(&ctx_mean, &mut shared);
        self.u_img.matvec_acc(&img_proj, &mut shared);
        let cands = cands.each_ref().map(|c| self.fuse_one(&ctx_mean, &img_proj, &shared, c));
        Forward { ctx_mean, img_proj, cands }
    }

    pub fn forward(&self, s: &EncodedSample, task: Task) -> Forward {
        self.forward_raw(s.context(task), s.candidates(task), &s.image)
    }

    /// Same as [`forward`](Self::forward) with the image replaced.
    pub fn forward_with_image(&self, s: &EncodedSample, task: Task, image: &[f64]) -> Forward {
        self.forward_raw(s.context(task), s.candidates(task), image)
    }

    /// The fused feature of one candidate.
    pub fn fuse(&self, s: &EncodedSample, task: Task, candidate: usize) -> Vec<f64> {
        let mut f = self.forward(s, task);
        core::mem::take(&mut f.cands[candidate].fused)
    }

    /// Fused feature of `tokens` alone: empty context, zero image. This is the
    /// text encoder used for dictionary rows.
    pub fn encode_text(&self, tokens: &[u32]) -> Vec<f64> {
        let mut h = self.bias.as_slice().to_vec();
        let a = self.pool(tokens);
        self.u_cand.matvec_acc(&a, &mut h);
        h.into_iter().map(libm::tanh).collect()
    }

    #[inline]
    pub fn score(&self, feature: &[f64]) -> f64 {
        dot(self.head.as_slice(), feature)
    }

    pub fn scores_of(&self, fwd: &Forward) -> [f64; NUM_CHOICES] {
        core::array::from_fn(|i| self.score(fwd.fused(i)))
    }

    /// Baseline logits `w · m_i`.
    pub fn base_scores(&self, s: &EncodedSample, task: Task) -> [f64; NUM_CHOICES] {
        self.scores_of(&self.forward(s, task))
    }

    /// Backpropagates `d_fused[i] = ∂L/∂m_i` through the fusion into `grads`.
    /// The scoring head is not touched; callers account for it.
    pub fn backward_fusion(
        &self,
        fwd: &Forward,
        context: &[u32],
        cands: &[Vec<u32>; NUM_CHOICES],
        image: &[f64],
        d_fused: &[Vec<f64>; NUM_CHOICES],
        grads: &mut ModelParams,
    ) {
        let e = self.embedding.cols();
        let mut d_ctx = vec![0.0; e];
        let mut d_img = vec![0.0; e];
        let mut dh_sum = vec![0.0; self.bias.rows()];
        for ((cf, dm), toks) in fwd.cands.iter().zip(d_fused).zip(cands) {
            let dh: Vec<f64> = dm.iter().zip(&cf.fused).map(|(g, m)| g * (1.0 - m * m)).collect();
            if dh.iter().all(|&x| x == 0.0) {
                continue;
            }
            axpy(1.0, &dh, &mut dh_sum);
            grads.u_cand.add_outer(1.0, &dh, &cf.cand_mean);
            grads.u_ctx_cand.add_outer(1.0, &dh, &cf.ctx_cand);
            grads.u_img_cand.add_outer(1.0, &dh, &cf.img_cand);

            let g_cc = self.u_ctx_cand.matvec_t(&dh);
            let g_ic = self.u_img_cand.matvec_t(&dh);
            let mut d_cand = self.u_cand.matvec_t(&dh);
            for k in 0..e {
                d_cand[k] += g_cc[k] * fwd.ctx_mean[k] + g_ic[k] * fwd.img_proj[k];
                d_ctx[k] += g_cc[k] * cf.cand_mean[k];
                d_img[k] += g_ic[k] * cf.cand_mean[k];
            }
            self.scatter_pool(toks, &d_cand, grads);
        }
        axpy(1.0, &dh_sum, grads.bias.as_mut_slice());
        grads.u_ctx.add_outer(1.0, &dh_sum, &fwd.ctx_mean);
        grads.u_img.add_outer(1.0, &dh_sum, &fwd.img_proj);
        self.u_ctx.matvec_t_acc(&dh_sum, &mut d_ctx);
        self.u_img.matvec_t_acc(&dh_sum, &mut d_img);
        grads.image_proj.add_outer(1.0, &d_img, image);
        self.scatter_pool(context, &d_ctx, grads);
    }

    fn scatter_pool(&self, toks: &[u32], d_mean: &[f64], grads: &mut ModelParams) {
        if toks.is_empty() {
            return;
        }
        let inv = 1.0 / toks.len() as f64;
        for &t in toks {
            let t = self.clamp_token(t) as usize;
            axpy(inv, d_mean, grads.embedding.row_mut(t));
        }
    }

    pub fn backward(
        &self,
        fwd: &Forward,
        s: &EncodedSample,
        task: Task,
        image: &[f64],
        d_fused: &[Vec<f64>; NUM_CHOICES],
        grads: &mut ModelParams,
    ) {
        self.backward_fusion(fwd, s.context(task), s.candidates(task), image, d_fused, grads);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{finite_diff_grad, grad_rel_error, DEFAULT_FD_EPS};

    pub(crate) fn dims() -> Dims {
        Dims { vocab_rows: 12, embed: 5, feature: 3, hidden: 4, attn: 4 }
    }

    pub(crate) fn enc(seed: u64) -> EncodedSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut toks = |n: usize| (0..n).map(|_| rng.random_range(0..12u32)).collect::<Vec<_>>();
        let q = toks(3);
        let cands: [Vec<u32>; 4] = core::array::from_fn(|i| toks(1 + i % 3));
        let rats: [Vec<u32>; 4] = core::array::from_fn(|i| toks(2 + i % 2));
        let mut qa = q.clone();
        qa.extend_from_slice(&cands[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
        EncodedSample {
            context: [q, qa],
            candidates: [cands, rats],
            labels: [1, 2],
            image: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn zero_input_gives_tanh_bias() {
        let d = dims();
        let mut p = ModelParams::init(&d, 1);
        p.embedding.fill(0.0);
        let mut s = enc(3);
        s.image.iter_mut().for_each(|x| *x = 0.0);
        let expected: Vec<f64> = p.bias.as_slice().iter().map(|b| libm::tanh(*b)).collect();
        for i in 0..4 {
            assert_eq!(p.fuse(&s, Task::QtoA, i), expected);
        }
    }

    #[test]
    fn purity_and_image_sensitivity() {
        let p = ModelParams::init(&dims(), 2);
        let s = enc(4);
        let a = p.forward(&s, Task::QtoA);
        let b = p.forward(&s.clone(), Task::QtoA);
        for i in 0..4 {
            assert_eq!(a.fused(i), b.fused(i));
        }
        let mut s2 = s.clone();
        s2.image[0] += 0.5;
        let c = p.forward(&s2, Task::QtoA);
        for i in 0..4 {
            assert_ne!(a.fused(i), c.fused(i), "candidate {i} ignored the image");
        }
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut p = ModelParams::init(&dims(), 5);
        p.head.fill(0.0);
        let z = p.base_scores(&enc(1), Task::QtoA);
        assert_eq!(z, [0.0; 4]);
        let pr = crate::linalg::softmax(&z).unwrap();
        assert_eq!(pr, vec![0.25; 4]);
    }

    #[test]
    fn candidate_permutation_equivariance() {
        let p = ModelParams::init(&dims(), 6);
        let s = enc(7);
        let z = p.base_scores(&s, Task::QtoA);
        let perm = [2, 0, 3, 1];
        let mut t = s.clone();
        t.candidates[0] = perm.map(|j| s.candidates[0][j].clone());
        let zp = p.base_scores(&t, Task::QtoA);
        for (i, &j) in perm.iter().enumerate() {
            assert_eq!(zp[i], z[j]);
        }
    }

    #[test]
    fn out_of_range_tokens_use_unk() {
        let p = ModelParams::init(&dims(), 8);
        let mut s = enc(9);
        s.candidates[0][0] = vec![500];
        let mut t = s.clone();
        t.candidates[0][0] = vec![Vocab::UNK];
        assert_eq!(p.fuse(&s, Task::QtoA, 0), p.fuse(&t, Task::QtoA, 0));
    }

    #[test]
    fn flatten_roundtrip_and_validate() {
        let d = dims();
        let p = ModelParams::init(&d, 10);
        let mut q = ModelParams::zeros(&d);
        q.load_flat(&p.flatten()).unwrap();
        assert_eq!(p, q);
        assert!(p.validate(&d).is_ok());
        let mut bad = p.clone();
        bad.w1 = Matrix::zeros(3, 4);
        assert!(matches!(bad.validate(&d), Err(ModelError::Shape { block: "w1", .. })));
        for (name, b) in p.blocks() {
            let s = init_scale(name, b.cols());
            assert!(b.as_slice().iter().all(|x| x.abs() <= s), "{name}");
        }
        assert_eq!(ModelParams::init(&d, 10), p);
    }

    #[test]
    fn fusion_backward_matches_finite_differences() {
        let d = dims();
        let p = ModelParams::init(&d, 11);
        let s = enc(12);
        // L = Σ_i c_i · m_i with fixed random cotangents
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cot: [Vec<f64>; 4] = core::array::from_fn(|_| (0..d.hidden).map(|_| rng.random_range(-1.0..1.0)).collect());
        let loss = |p: &ModelParams| {
            let f = p.forward(&s, Task::QAtoR);
            (0..4).map(|i| dot(f.fused(i), &cot[i])).sum::<f64>()
        };
        let mut g = p.zeros_like();
        let f = p.forward(&s, Task::QAtoR);
        p.backward(&f, &s, Task::QAtoR, &s.image, &cot, &mut g);
        let fd = finite_diff_grad(
            |x| {
                let mut q = p.clone();
                q.load_flat(x).unwrap();
                loss(&q)
            },
            &p.flatten(),
            DEFAULT_FD_EPS,
        )
        .unwrap();
        for (i, (a, n)) in g.flatten().iter().zip(&fd).enumerate() {
            assert!(grad_rel_error(*a, *n) < 1e-7, "param {i}: {a} vs {n}");
        }
    }
}
