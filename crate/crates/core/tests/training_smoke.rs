//! Training smoke runs: the speaker criterion alone reaches high training
//! accuracy quickly, and the reconstruction criterion alone drives the
//! decoder's error down on a fixed probe batch.

use despk_core::autodiff::Tape;
use despk_core::data::{generate_synthetic_corpus, sample_training_batch, Corpus};
use despk_core::dsp::FrameParams;
use despk_core::losses::reconstruction_loss;
use despk_core::nets::{
    classify_rows, decode, encode, Component, ComponentSet, Forward, ModelBundle, ModelConfig,
};
use despk_core::train::{
    featurize, fit, frames_for_segment, FeatBatch, Features, LossSet, Schedule, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn smoke_config(losses: LossSet, n_classes: usize) -> TrainConfig {
    let frame = FrameParams { window_ms: 8.0, hop_ms: 4.0, fft_size: 128 };
    let segment_s = 1.0;
    let frames = frames_for_segment(&frame, segment_s, 16000).unwrap();
    TrainConfig {
        model: ModelConfig {
            d_emb: 16,
            n_classes,
            bins: frame.bins(),
            mel_bins: 16,
            frames,
            enc_channels: vec![2, 4],
            enc_hidden: 32,
            dec_channels: vec![4, 4],
            dec_hidden: 16,
            critic_hidden: 16,
        },
        seed: 9,
        batch_size: 16,
        segment_s,
        schedule: Schedule { base_lr: 3e-3, halve_every: 10 },
        phase1_epochs: 10,
        phase2_epochs: 0,
        steps_per_epoch: 20,
        losses,
        frame,
        ..TrainConfig::default()
    }
}

/// Mean squared reconstruction error of the decoder on a fixed batch.
fn probe_mse(bundle: &ModelBundle, probe: &FeatBatch) -> f64 {
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, bundle, ComponentSet::all());
    let mut total = 0.0;
    for item in &probe.items {
        let x = f.tape.leaf(item.spec_a.clone());
        let spk = encode(&mut f, bundle, Component::EncSpk, x).unwrap();
        let res = encode(&mut f, bundle, Component::EncRes, x).unwrap();
        let rec = decode(&mut f, bundle, spk, res).unwrap();
        let target = f.tape.leaf(item.mel_a.clone());
        let loss = reconstruction_loss(f.tape, rec, target).unwrap();
        total += f.tape.value(loss).data()[0];
    }
    total / probe.items.len() as f64
}

/// Fraction of utterances whose mean speaker embedding the classifier
/// assigns to the right speaker.
fn training_accuracy(bundle: &ModelBundle, corpus: &Corpus, cfg: &TrainConfig) -> f64 {
    let feats = Features::new(cfg.frame, cfg.model.mel_bins, 16000).unwrap();
    let mut embeddings = Vec::new();
    for u in corpus.utterances() {
        let e = despk_core::eval::embed_utterance(
            bundle,
            &u.wave,
            &feats,
            cfg.segment_s,
            Component::EncSpk,
        )
        .unwrap();
        embeddings.push(e);
    }
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, bundle, ComponentSet::all());
    let ids: Vec<_> = embeddings.iter().map(|e| f.tape.leaf(e.clone())).collect();
    let rows = f.tape.stack_rows(&ids).unwrap();
    let logits_id = classify_rows(&mut f, bundle, rows, false).unwrap();
    let logits = f.tape.value(logits_id).clone();
    let n = corpus.len();
    let c = cfg.model.n_classes;
    let mut hits = 0;
    for i in 0..n {
        let row = &logits.data()[i * c..(i + 1) * c];
        let best = (0..c).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        if best == corpus.label_of(i) {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

#[test]
fn speaker_criterion_alone_reaches_high_training_accuracy() {
    let corpus = generate_synthetic_corpus(4, 6, 2.0, 11).unwrap();
    let cfg = smoke_config(LossSet::parse("ls").unwrap(), 4);
    let out = fit(&cfg, &corpus, None).unwrap();
    assert_eq!(out.log.len(), 200);
    let acc = training_accuracy(&out.model, &corpus, &cfg);
    assert!(acc > 0.9, "training accuracy {acc} after 200 speaker-only steps");
}

#[test]
fn reconstruction_criterion_alone_strictly_reduces_probe_mse() {
    let corpus = generate_synthetic_corpus(4, 6, 2.0, 11).unwrap();
    let cfg = smoke_config(LossSet::parse("lr").unwrap(), 4);
    let feats = Features::new(cfg.frame, cfg.model.mel_bins, 16000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let probe = featurize(
        &sample_training_batch(&corpus, 8, cfg.segment_s, &mut rng).unwrap(),
        &feats,
    )
    .unwrap();

    let fresh = ModelBundle::new(cfg.model.clone(), cfg.seed).unwrap();
    let before = probe_mse(&fresh, &probe);
    let out = fit(&cfg, &corpus, None).unwrap();
    assert_eq!(out.log.len(), 200);
    let after = probe_mse(&out.model, &probe);
    assert!(
        after < before,
        "probe MSE should strictly decrease over 200 steps: {before} -> {after}"
    );
    // The logged training reconstruction error falls as well.
    let l_r = |r: &despk_core::train::StepRecord| r.report.l_r.unwrap();
    let first: f64 = out.log[..10].iter().map(l_r).sum::<f64>() / 10.0;
    let last: f64 = out.log[190..].iter().map(l_r).sum::<f64>() / 10.0;
    assert!(last < first, "logged L_R should trend down: {first} -> {last}");
}
