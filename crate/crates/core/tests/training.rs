use deconfound_core::corpus::Corpus;
use deconfound_core::eval::evaluate;
use deconfound_core::model::ModelParams;
use deconfound_core::ood::{build_vcr_ood_qa, SplitConfig, SplitResult};
use deconfound_core::synth::{generate, SynthConfig};
use deconfound_core::text::TextAnalyzer;
use deconfound_core::train::{
    ablate, sweep_lambda, train, train_without_history, NegMode, TrainConfig, TrainError,
};

fn fixture() -> (Corpus, SplitResult) {
    let corpus = generate(&SynthConfig { n_samples: 1500, rationale_cooc: Some(0.0), seed: 3, ..Default::default() }).unwrap();
    let split = build_vcr_ood_qa(&corpus, &SplitConfig { train_target: 300, ..Default::default() }, &TextAnalyzer::default())
        .unwrap();
    (corpus, split)
}

fn small() -> TrainConfig {
    TrainConfig { epochs: 2, dict_size: 16, hidden: 8, attn: 8, embed: 8, neg_mode: NegMode::UniformTarget, ..Default::default() }
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let (corpus, split) = fixture();
    let cfg = TrainConfig { epochs: 0, ..small() };
    let (model, history) = train(&corpus, &split, &cfg).unwrap();
    assert!(history.epochs.is_empty());
    assert_eq!(model.params, ModelParams::init(&cfg.dims(corpus.vocab(), corpus.feature_dim()), cfg.seed));
}

#[test]
fn same_seed_same_history() {
    let (corpus, split) = fixture();
    let (a, ha) = train(&corpus, &split, &small()).unwrap();
    let (b, hb) = train(&corpus, &split, &small()).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a.params, b.params);
    assert_eq!(ha.epochs.len(), 2);
    assert!(ha.epochs.iter().all(|e| e.val.is_some() && e.total.is_finite()));
    let (c, _) = train(&corpus, &split, &TrainConfig { seed: 1, ..small() }).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn zero_lambda_sweep_row_matches_a_run_without_negative_loss() {
    let (corpus, split) = fixture();
    let rows = sweep_lambda(&corpus, &split, &small(), &[0.0, 3.0]).unwrap();
    let (plain, _) = train_without_history(&corpus, &split, &TrainConfig { use_neg_loss: false, ..small() }).unwrap();
    assert_eq!(rows[0].report, evaluate(&plain, &corpus, &split.val_ids, true).unwrap());
    assert_eq!(rows.iter().map(|r| r.lambda).collect::<Vec<_>>(), [0.0, 3.0]);
    assert_eq!(sweep_lambda(&corpus, &split, &small(), &[]), Err(TrainError::EmptySweep));
}

#[test]
fn ablation_baseline_row_matches_a_plain_run() {
    let (corpus, split) = fixture();
    let rows = ablate(&corpus, &split, &small()).unwrap();
    assert_eq!(rows.len(), 4);
    let cfg = TrainConfig { use_causal: false, use_neg_loss: false, ..small() };
    let (plain, _) = train_without_history(&corpus, &split, &cfg).unwrap();
    assert_eq!((rows[0].use_causal, rows[0].use_neg_loss), (false, false));
    assert_eq!(rows[0].report, evaluate(&plain, &corpus, &split.val_ids, false).unwrap());
}

#[test]
fn image_blind_training_keeps_the_image_path_at_zero() {
    let (corpus, split) = fixture();
    let (model, _) = train(&corpus, &split, &TrainConfig { image_blind: true, ..small() }).unwrap();
    assert!(model.params.image_proj.as_slice().iter().all(|&x| x == 0.0));
}

#[test]
fn evaluation_has_no_side_effects() {
    let (corpus, split) = fixture();
    let (model, _) = train(&corpus, &split, &small()).unwrap();
    let before = model.clone();
    let a = evaluate(&model, &corpus, &split.val_ids, true).unwrap();
    let b = evaluate(&model, &corpus, &split.val_ids, true).unwrap();
    assert_eq!(a, b);
    assert_eq!(model, before);
}

#[test]
fn bad_configs_are_rejected() {
    let (corpus, split) = fixture();
    for cfg in [
        TrainConfig { lr: 0.0, ..small() },
        TrainConfig { lambda: -1.0, ..small() },
        TrainConfig { batch_size: 0, ..small() },
        TrainConfig { dict_size: 0, ..small() },
    ] {
        assert!(matches!(train(&corpus, &split, &cfg), Err(TrainError::InvalidConfig(_))));
    }
    let mut empty = split.clone();
    empty.train_ids.clear();
    assert_eq!(train(&corpus, &empty, &small()).unwrap_err(), TrainError::EmptyTrainSet);
}
