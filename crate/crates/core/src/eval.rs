//! Verification scoring: utterance embeddings, cosine trials, EER, and
//! embedding export.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::data::{Corpus, TrialLabel, TrialSet};
use crate::dsp::{slice_segment, stft_log_magnitude, SegmentOffset, Waveform};
use crate::error::{Error, Result};
use crate::losses::speaker_loss;
use crate::nets::{encode, Component, ComponentSet, Forward, ModelBundle};
use crate::train::{Adam, Features};
use crate::nets::Param;

/// Embeds an utterance as the mean speaker (or residual) embedding over
/// consecutive non-overlapping segments starting at sample 0.
pub fn embed_utterance(
    b: &ModelBundle,
    w: &Waveform,
    feats: &Features,
    segment_s: f64,
    which: Component,
) -> Result<Tensor> {
    let seg = (segment_s * w.sample_rate as f64).round() as usize;
    if seg == 0 || w.len() < seg {
        return Err(Error::Eval(format!(
            "utterance of {} samples is shorter than one {segment_s} s segment",
            w.len()
        )));
    }
    let n_segs = w.len() / seg;
    let mut rng = ChaCha8Rng::seed_from_u64(0); // never consulted: offsets are fixed
    let mut mean = Tensor::zeros(vec![b.config.d_emb]);
    for k in 0..n_segs {
        let (piece, _) = slice_segment(w, segment_s, SegmentOffset::At(k * seg), &mut rng)?;
        let spec = stft_log_magnitude(&piece, &feats.frame)?;
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, b, ComponentSet::NONE);
        let leaf = f.tape.leaf(spec);
        let emb = encode(&mut f, b, which, leaf)?;
        for (acc, v) in mean.data_mut().iter_mut().zip(f.tape.value(emb).data()) {
            *acc += v / n_segs as f64;
        }
    }
    Ok(mean)
}

/// Cosine similarity in [-1, 1].
pub fn score_pair(e1: &Tensor, e2: &Tensor) -> Result<f64> {
    if e1.shape() != e2.shape() {
        return Err(Error::shape("score_pair", format!("{:?} vs {:?}", e1.shape(), e2.shape())));
    }
    let dot: f64 = e1.data().iter().zip(e2.data()).map(|(a, b)| a * b).sum();
    let n1 = e1.data().iter().map(|a| a * a).sum::<f64>().sqrt();
    let n2 = e2.data().iter().map(|a| a * a).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Eval("zero-norm embedding cannot be scored".into()));
    }
    Ok(dot / (n1 * n2))
}

/// Parallel score/label lists; `targets[i]` marks a same-speaker trial.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub targets: Vec<bool>,
}

impl ScoreSet {
    pub fn push(&mut self, score: f64, target: bool) {
        self.scores.push(score);
        self.targets.push(target);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Threshold sweep over midpoints of adjacent distinct scores plus both
/// infinities. FAR = fraction of nontargets scoring >= t, FRR = fraction of
/// targets scoring < t; the reported operating point minimizes |FAR - FRR|
/// (lowest threshold on ties) with EER = (FAR + FRR) / 2 there.
pub fn compute_eer(s: &ScoreSet) -> Result<EerResult> {
    if s.scores.len() != s.targets.len() {
        return Err(Error::Eval("score/label lists differ in length".into()));
    }
    let n_tgt = s.targets.iter().filter(|&&t| t).count();
    let n_non = s.targets.len() - n_tgt;
    if n_tgt == 0 || n_non == 0 {
        return Err(Error::Eval("EER needs at least one target and one nontarget".into()));
    }
    if s.scores.iter().any(|x| !x.is_finite()) {
        return Err(Error::Eval("non-finite score".into()));
    }

    let mut pairs: Vec<(f64, bool)> =
        s.scores.iter().cloned().zip(s.targets.iter().cloned()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut distinct: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    distinct.dedup();

    let candidates = std::iter::once(f64::NEG_INFINITY)
        .chain(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0))
        .chain(std::iter::once(f64::INFINITY));

    let mut below = 0usize; // index into pairs: everything before it scores < t
    let mut tgt_below = 0usize;
    let mut best: Option<EerResult> = None;
    for t in candidates {
        while below < pairs.len() && pairs[below].0 < t {
            if pairs[below].1 {
                tgt_below += 1;
            }
            below += 1;
        }
        let non_below = below - tgt_below;
        let far = (n_non - non_below) as f64 / n_non as f64;
        let frr = tgt_below as f64 / n_tgt as f64;
        let better = match &best {
            None => true,
            Some(b) => (far - frr).abs() < (b.far - b.frr).abs(),
        };
        if better {
            best = Some(EerResult { eer: (far + frr) / 2.0, threshold: t, far, frr });
        }
    }
    Ok(best.expect("candidate list is never empty"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredTrial {
    pub label: TrialLabel,
    pub a: usize,
    pub b: usize,
    pub score: f64,
}

/// Embeds every referenced utterance once, scores all trials, and computes
/// the EER.
pub fn evaluate(
    b: &ModelBundle,
    corpus: &Corpus,
    trials: &TrialSet,
    feats: &Features,
    segment_s: f64,
) -> Result<(EerResult, Vec<ScoredTrial>)> {
    let mut cache: HashMap<usize, Tensor> = HashMap::new();
    let embed = |i: usize, cache: &mut HashMap<usize, Tensor>| -> Result<Tensor> {
        if let Some(e) = cache.get(&i) {
            return Ok(e.clone());
        }
        let e =
            embed_utterance(b, &corpus.utterance(i).wave, feats, segment_s, Component::EncSpk)?;
        cache.insert(i, e.clone());
        Ok(e)
    };
    let mut scored = Vec::with_capacity(trials.trials.len());
    let mut set = ScoreSet::default();
    for t in &trials.trials {
        let ea = embed(t.a, &mut cache)?;
        let eb = embed(t.b, &mut cache)?;
        let score = score_pair(&ea, &eb)?;
        set.push(score, t.label == TrialLabel::Target);
        scored.push(ScoredTrial { label: t.label, a: t.a, b: t.b, score });
    }
    Ok((compute_eer(&set)?, scored))
}

/// Per-trial score dump: "label,ref1,ref2,score".
pub fn score_dump_csv(c: &Corpus, scored: &[ScoredTrial]) -> String {
    let mut out = String::from("label,ref1,ref2,score\n");
    for s in scored {
        let (a, b) = (c.utterance(s.a), c.utterance(s.b));
        let label = if s.label == TrialLabel::Target { "target" } else { "nontarget" };
        writeln!(out, "{label},{}/{},{}/{},{:.9}", a.speaker, a.utt, b.speaker, b.utt, s.score)
            .expect("string write");
    }
    out
}

/// CSV of speaker and residual embeddings for every utterance:
/// speaker_id, utterance_id, kind, then one column per embedding dim.
pub fn export_embeddings(
    b: &ModelBundle,
    corpus: &Corpus,
    feats: &Features,
    segment_s: f64,
    path: &Path,
) -> Result<()> {
    let mut out = String::from("speaker_id,utterance_id,kind");
    for d in 0..b.config.d_emb {
        write!(out, ",e{d:03}").expect("string write");
    }
    out.push('\n');
    for (kind, which) in [("spk", Component::EncSpk), ("res", Component::EncRes)] {
        for u in corpus.utterances() {
            let e = embed_utterance(b, &u.wave, feats, segment_s, which)?;
            write!(out, "{},{},{kind}", u.speaker, u.utt).expect("string write");
            for v in e.data() {
                write!(out, ",{v:.9}").expect("string write");
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Accuracy of a softmax probe trained on the even-indexed embeddings and
/// scored on the odd-indexed ones. Zero initialization keeps the convex fit
/// deterministic.
pub fn linear_probe_accuracy(
    embeddings: &[Tensor],
    labels: &[usize],
    n_classes: usize,
) -> Result<f64> {
    if embeddings.len() != labels.len() || embeddings.len() < 4 {
        return Err(Error::Eval("probe needs >= 4 aligned embeddings".into()));
    }
    let d = embeddings[0].numel();
    let rows = |keep: fn(usize) -> bool| -> (Tensor, Vec<usize>) {
        let mut data = Vec::new();
        let mut labs = Vec::new();
        for (i, (e, &l)) in embeddings.iter().zip(labels).enumerate() {
            if keep(i) {
                data.extend_from_slice(e.data());
                labs.push(l);
            }
        }
        (Tensor::matrix(labs.len(), d, data).expect("aligned dims"), labs)
    };
    let (train_x, train_y) = rows(|i| i % 2 == 0);
    let (test_x, test_y) = rows(|i| i % 2 == 1);

    let mut params = vec![
        Param {
            name: "probe.w".into(),
            component: Component::Classifier,
            tensor: Tensor::zeros(vec![d, n_classes]),
        },
        Param {
            name: "probe.b".into(),
            component: Component::Classifier,
            tensor: Tensor::zeros(vec![n_classes]),
        },
    ];
    let mut opt = Adam::new(&params);
    for _ in 0..300 {
        let mut tape = Tape::new();
        let w = tape.param(0, params[0].tensor.clone());
        let bias = tape.param(1, params[1].tensor.clone());
        let x = tape.leaf(train_x.clone());
        let logits = tape.matmul(x, w)?;
        let logits = tape.row_bias(logits, bias)?;
        let loss = speaker_loss(&mut tape, logits, &train_y)?;
        let grads = tape.backward(loss)?;
        opt.step(&mut params, &grads, ComponentSet::all(), 0.05)?;
    }

    let w = params[0].tensor.data();
    let bias = params[1].tensor.data();
    let mut correct = 0usize;
    for (r, &want) in test_y.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for c in 0..n_classes {
            let mut z = bias[c];
            for k in 0..d {
                z += test_x.data()[r * d + k] * w[k * n_classes + c];
            }
            if z > best.0 {
                best = (z, c);
            }
        }
        if best.1 == want {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_y.len() as f64)
}
