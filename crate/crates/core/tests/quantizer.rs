mod common;

use common::*;
use rand::Rng as _;
use weaver_core::collab::{build_cooccurrence, similarity, CountMode};
use weaver_core::corpus::{synth_corpus, SyntheticSpec};
use weaver_core::quantizer::{
    fit, loss_terms, loss_terms_with_codes, quantize, QuantizerConfig, ReconMode,
};
use weaver_core::rng::{stream, Stream};
use weaver_core::sinkhorn::SinkhornSettings;

fn check_gradients(mode: ReconMode, seed: u64) -> f64 {
    let mut rng = stream(seed, Stream::Init);
    let model = random_model(tiny_config(mode, 0.7), &mut rng);
    let (es, codes, pairs) = random_batch(seed, 5, 6, 3, 2);
    let refs: Vec<&[f64]> = es.iter().map(Vec::as_slice).collect();
    let out = loss_terms_with_codes(&model, &refs, &pairs, &codes).unwrap();
    let analytic = out.grads.flatten();
    let numeric = fd_gradient(&model, &es, &codes, &pairs, 1e-5);
    let value = surrogate_loss(&model, &model, &es, &codes, &pairs);
    assert!((value - out.breakdown.total).abs() < 1e-10 * value.max(1.0));
    max_rel_err(&analytic, &numeric)
}

#[test]
fn decoder_mode_gradients_match_finite_differences() {
    for seed in 0..10 {
        let err = check_gradients(ReconMode::Decoder, seed);
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn latent_mode_gradients_match_finite_differences() {
    for seed in 0..10 {
        let err = check_gradients(ReconMode::Latent, seed);
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn selected_codes_are_greedy_without_balancing() {
    let mut cfg = tiny_config(ReconMode::Decoder, 1.0);
    cfg.sinkhorn.enabled = false;
    let model = random_model(cfg, &mut stream(4, Stream::Init));
    let (es, _, pairs) = random_batch(4, 5, 6, 3, 2);
    let refs: Vec<&[f64]> = es.iter().map(Vec::as_slice).collect();
    let out = loss_terms(&model, &refs, &pairs).unwrap();
    for (e, path) in es.iter().zip(&out.codes) {
        let z = model.encoder.forward(e);
        assert_eq!(&quantize(&model, &z).indices, path);
    }
}

#[test]
fn collab_term_is_linear_in_lambda() {
    let (es, codes, pairs) = random_batch(8, 5, 6, 3, 2);
    let refs: Vec<&[f64]> = es.iter().map(Vec::as_slice).collect();
    let at = |lambda: f64| {
        let model = random_model(tiny_config(ReconMode::Decoder, lambda), &mut stream(8, Stream::Init));
        loss_terms_with_codes(&model, &refs, &pairs, &codes).unwrap().breakdown
    };
    let (l0, l1, l3) = (at(0.0), at(1.0), at(3.0));
    assert_eq!(l0.recon, l1.recon);
    assert_eq!(l0.quant, l3.quant);
    assert!(l1.collab > 0.0);
    assert!((l3.total - l0.total - 3.0 * (l1.total - l0.total)).abs() < 1e-9);
}

#[test]
fn telescoping_holds_for_random_models() {
    let mut rng = stream(21, Stream::Queries);
    for m in 0..20 {
        let mut cfg = tiny_config(ReconMode::Latent, 0.0);
        cfg.levels = 1 + m % 4;
        let model = random_model(cfg, &mut stream(m as u64, Stream::Init));
        for _ in 0..50 {
            let e: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let z = model.encoder.forward(&e);
            let q = quantize(&model, &z);
            let last = q.residuals.last().unwrap();
            for d in 0..z.len() {
                assert!((q.zhat[d] + last[d] - z[d]).abs() < 1e-12);
            }
        }
    }
}

fn synth_setup(seed: u64) -> (weaver_core::corpus::SyntheticCorpus, weaver_core::collab::CooccurrenceGraph) {
    let syn = synth_corpus(&SyntheticSpec { seed, ..Default::default() }).unwrap();
    let g = build_cooccurrence(&syn.trajectories, &syn.corpus, CountMode::Set).unwrap();
    (syn.clone(), similarity(g, None))
}

fn small_config(seed: u64) -> QuantizerConfig {
    QuantizerConfig {
        input_dim: 32,
        latent_dim: 8,
        hidden_dims: vec![32],
        levels: 2,
        codes_per_level: 8,
        learning_rate: 3e-3,
        batch_size: 64,
        epochs: 60,
        warmup_epochs: 5,
        sinkhorn: SinkhornSettings { epsilon: 0.05, ..Default::default() },
        seed,
        ..Default::default()
    }
}

#[test]
fn zero_epochs_returns_the_initialized_model() {
    let (syn, g) = synth_setup(1);
    let cfg = QuantizerConfig { epochs: 0, ..small_config(1) };
    let m = fit(&syn.embeddings, &g, &cfg).unwrap();
    assert!(m.training_log.is_empty());
    assert_eq!(m, weaver_core::quantizer::initialize(&syn.embeddings, &cfg).unwrap());
}

#[test]
fn training_halves_reconstruction_and_is_deterministic() {
    let (syn, g) = synth_setup(2);
    let cfg = small_config(2);
    let a = fit(&syn.embeddings, &g, &cfg).unwrap();
    let first = a.training_log.first().unwrap();
    let last = a.training_log.last().unwrap();
    assert!(a.training_log.iter().all(|l| l.total.is_finite()));
    assert!(last.recon <= 0.5 * first.recon, "{} -> {}", first.recon, last.recon);
    let b = fit(&syn.embeddings, &g, &cfg).unwrap();
    assert_eq!(a, b);
}
