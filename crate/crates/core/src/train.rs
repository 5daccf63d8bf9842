//! Optimizer and the two-phase training strategy: Phase I pre-training
//! (speaker + disentanglement + reconstruction) with critic/main
//! alternation, then the recursive two-stage identity-change procedure
//! with selective parameter updates.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::mpsc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradientMap, Tape, Tensor, ValueId};
use crate::data::{sample_training_batch, Corpus, SegmentPairBatch};
use crate::dsp::{
    build_mel_filterbank, log_mel, stft_log_magnitude, stft_power, FrameParams, MelFilterbank,
};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss, am_softmax_loss, identity_change_loss, mi_objective, reconstruction_loss,
    speaker_loss, total_loss, IcItem, LossWeights,
};
use crate::nets::{
    classify_rows, critic_apply, decode, encode, Component, ComponentSet, Forward, ModelBundle,
    ModelConfig, Param,
};

/// Adam with per-parameter step counts so that masked (selective) updates
/// stay correctly bias-corrected. Parameters outside the mask, or absent
/// from the gradient map, are left bit-identical.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(params: &[Param]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.iter().map(|p| Tensor::zeros(p.tensor.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.tensor.shape().to_vec())).collect(),
            t: vec![0; params.len()],
        }
    }

    /// Step count of parameter `i` (number of updates it has received).
    pub fn steps_of(&self, i: usize) -> u64 {
        self.t[i]
    }

    /// Applies one update to every parameter that is both in `mask` and
    /// present in `grads` (a zero gradient still advances its step count).
    pub fn step(
        &mut self,
        params: &mut [Param],
        grads: &GradientMap,
        mask: ComponentSet,
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params vs optimizer state of {}", params.len(), self.m.len()),
            ));
        }
        for (i, p) in params.iter_mut().enumerate() {
            if !mask.contains(p.component) {
                continue;
            }
            let Some(g) = grads.get(i) else { continue };
            if g.shape() != p.tensor.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("grad {:?} vs param {:?} ({})", g.shape(), p.tensor.shape(), p.name),
                ));
            }
            self.t[i] += 1;
            let c1 = 1.0 - self.beta1.powi(self.t[i] as i32);
            let c2 = 1.0 - self.beta2.powi(self.t[i] as i32);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, x) in p.tensor.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                *x -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Step-decay learning-rate schedule: base halves every `halve_every`
/// epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub halve_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { base_lr: 1e-3, halve_every: 10 }
    }
}

impl Schedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        self.base_lr * 0.5f64.powi((epoch / self.halve_every) as i32)
    }
}

/// Which criteria participate in training. `adversarial` replaces the
/// MI critic with the uniform-target classifier loss on residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSet {
    pub speaker: bool,
    pub mi: bool,
    pub recon: bool,
    pub identity: bool,
    pub adversarial: bool,
}

impl LossSet {
    /// The full proposed configuration {L_S, L_MI, L_R, L_IC}.
    pub fn full() -> Self {
        LossSet { speaker: true, mi: true, recon: true, identity: true, adversarial: false }
    }

    /// Parses a comma-separated ablation list, e.g. "ls,lr,lmi,lic" or
    /// "ls,lr,ladv".
    pub fn parse(s: &str) -> Result<Self> {
        let mut set =
            LossSet { speaker: false, mi: false, recon: false, identity: false, adversarial: false };
        for item in s.split(',') {
            match item.trim() {
                "ls" => set.speaker = true,
                "lmi" => set.mi = true,
                "lr" => set.recon = true,
                "lic" => set.identity = true,
                "ladv" => set.adversarial = true,
                "" => {}
                other => {
                    return Err(Error::Config(format!(
                        "unknown loss {other:?}; expected ls, lmi, lr, lic, ladv"
                    )))
                }
            }
        }
        if !(set.speaker || set.mi || set.recon || set.identity || set.adversarial) {
            return Err(Error::Config("ablation list enables no losses".into()));
        }
        Ok(set)
    }

    pub fn any(&self) -> bool {
        self.speaker || self.mi || self.recon || self.identity || self.adversarial
    }
}

/// Direction of the main network's interest in the critic's bound V:
/// cooperative maximizes V alongside the critic (the default), adversarial
/// minimizes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiMode {
    Cooperative,
    Adversarial,
}

/// Which classification criterion fills the speaker-loss slot: plain
/// cross-entropy or the angular-margin softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeakerLossKind {
    CrossEntropy,
    AngularMargin,
}

impl SpeakerLossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "ce" => Ok(SpeakerLossKind::CrossEntropy),
            "am" => Ok(SpeakerLossKind::AngularMargin),
            other => Err(Error::Config(format!("unknown speaker loss {other:?}; expected ce or am"))),
        }
    }
}

impl MiMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cooperative" => Ok(MiMode::Cooperative),
            "adversarial" => Ok(MiMode::Adversarial),
            other => Err(Error::Config(format!(
                "unknown mi_mode {other:?}; expected cooperative or adversarial"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub batch_size: usize,
    pub segment_s: f64,
    pub schedule: Schedule,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    /// 0 = one pass over the corpus per epoch (len / batch_size, min 1).
    pub steps_per_epoch: usize,
    pub weights: LossWeights,
    pub losses: LossSet,
    pub mi_mode: MiMode,
    /// Keep speaker/MI/adversarial criteria active during Phase II.
    pub phase2_keep_criteria: bool,
    pub frame: FrameParams,
    pub speaker_loss: SpeakerLossKind,
    /// Angular-margin softmax shape, used when `speaker_loss` is `am`.
    pub am_margin: f64,
    pub am_scale: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            seed: 0,
            batch_size: 32,
            segment_s: 3.0,
            schedule: Schedule::default(),
            phase1_epochs: 20,
            phase2_epochs: 20,
            steps_per_epoch: 0,
            weights: LossWeights::default(),
            losses: LossSet::full(),
            mi_mode: MiMode::Cooperative,
            phase2_keep_criteria: true,
            frame: FrameParams::default(),
            speaker_loss: SpeakerLossKind::CrossEntropy,
            am_margin: 0.2,
            am_scale: 30.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

/// Frame count of one training segment under `p`.
pub fn frames_for_segment(p: &FrameParams, segment_s: f64, sample_rate: u32) -> Result<usize> {
    let samples = (segment_s * sample_rate as f64).round() as usize;
    p.n_frames(samples, sample_rate)
}

impl TrainConfig {
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if !self.losses.any() {
            return Err(Error::Config("no losses enabled".into()));
        }
        if self.batch_size < 2 && self.losses.mi {
            return Err(Error::Config("the MI objective needs batch_size >= 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.model.n_classes != corpus.n_speakers() {
            return Err(Error::Config(format!(
                "model has {} classes but corpus has {} speakers",
                self.model.n_classes,
                corpus.n_speakers()
            )));
        }
        let sr = corpus.utterance(0).wave.sample_rate;
        if self.frame.bins() != self.model.bins {
            return Err(Error::Config(format!(
                "frame setup yields {} bins but model expects {}",
                self.frame.bins(),
                self.model.bins
            )));
        }
        let frames = frames_for_segment(&self.frame, self.segment_s, sr)?;
        if frames != self.model.frames {
            return Err(Error::Config(format!(
                "segment of {} s gives {frames} frames but model expects {}",
                self.segment_s, self.model.frames
            )));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config(format!("adam_eps = {} must be > 0", self.adam_eps)));
        }
        if !(self.am_margin >= 0.0) || !(self.am_scale > 0.0) {
            return Err(Error::Config(format!(
                "am_margin {} must be >= 0 and am_scale {} > 0",
                self.am_margin, self.am_scale
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch_for(&self, corpus: &Corpus) -> usize {
        if self.steps_per_epoch > 0 {
            self.steps_per_epoch
        } else {
            (corpus.len() / self.batch_size).max(1)
        }
    }
}

/// Feature extractors shared by training and evaluation: log-magnitude
/// spectrogram in, log-mel target out.
#[derive(Debug, Clone)]
pub struct Features {
    pub frame: FrameParams,
    pub fb: MelFilterbank,
}

impl Features {
    pub fn new(frame: FrameParams, n_mels: usize, sample_rate: u32) -> Result<Self> {
        let fb = build_mel_filterbank(n_mels, frame.fft_size, sample_rate, 0.0, sample_rate as f64 / 2.0)?;
        Ok(Features { frame, fb })
    }
}

/// One featurized training item: encoder inputs for segments A, A', B and
/// the decoder's log-mel targets for A and B.
#[derive(Debug, Clone)]
pub struct FeatItem {
    pub label: usize,
    pub spec_a: Tensor,
    pub spec_ap: Tensor,
    pub spec_b: Tensor,
    pub mel_a: Tensor,
    pub mel_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct FeatBatch {
    pub items: Vec<FeatItem>,
}

pub fn featurize(batch: &SegmentPairBatch, feats: &Features) -> Result<FeatBatch> {
    let mut items = Vec::with_capacity(batch.items.len());
    for it in &batch.items {
        let spec_a = stft_log_magnitude(&it.seg_a, &feats.frame)?;
        let spec_ap = stft_log_magnitude(&it.seg_ap, &feats.frame)?;
        let spec_b = stft_log_magnitude(&it.seg_b, &feats.frame)?;
        let mel_a = log_mel(&stft_power(&it.seg_a, &feats.frame)?, &feats.fb)?;
        let mel_b = log_mel(&stft_power(&it.seg_b, &feats.frame)?, &feats.fb)?;
        items.push(FeatItem { label: it.label, spec_a, spec_ap, spec_b, mel_a, mel_b });
    }
    Ok(FeatBatch { items })
}

/// Per-step loss components; disabled criteria stay `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepReport {
    pub l_s: Option<f64>,
    pub v: Option<f64>,
    pub l_r: Option<f64>,
    pub l_ic: Option<f64>,
    pub l_adv: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub report: StepReport,
}

/// Renders the training log: "step, L_S, V, L_R, L_IC, L_adv, total" with
/// empty cells for disabled criteria.
pub fn log_csv(records: &[StepRecord]) -> String {
    let mut out = String::from("step,L_S,V,L_R,L_IC,L_adv,total\n");
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{:.9}",
            r.step,
            cell(r.report.l_s),
            cell(r.report.v),
            cell(r.report.l_r),
            cell(r.report.l_ic),
            cell(r.report.l_adv),
            r.report.total
        )
        .expect("string write");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    First,
    Second,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StepMode {
    Phase1,
    Phase2(Stage),
}

/// Maximizes the critic's bound on the already-computed embedding values
/// (constants here), leaving every non-critic parameter untouched.
fn critic_update(
    bundle: &mut ModelBundle,
    spk_a: &[Tensor],
    spk_ap: &[Tensor],
    res_a: &[Tensor],
    res_ap: &[Tensor],
    opt: &mut Adam,
    lr: f64,
) -> Result<()> {
    let mut tape = Tape::new();
    let rows = |xs: &[Tensor], ys: &[Tensor]| -> Tensor {
        let d = xs[0].numel();
        let mut data = Vec::with_capacity(xs.len() * 2 * d);
        for (x, y) in xs.iter().zip(ys) {
            data.extend_from_slice(x.data());
            data.extend_from_slice(y.data());
        }
        Tensor::matrix(xs.len(), 2 * d, data).expect("consistent embedding dims")
    };
    let j1 = tape.leaf(rows(spk_a, spk_ap));
    let m1 = tape.leaf(rows(spk_a, res_a));
    let j2 = tape.leaf(rows(spk_ap, spk_a));
    let m2 = tape.leaf(rows(spk_ap, res_ap));

    let c = bundle.layout().critic.clone();
    let ids = [c.w1, c.b1, c.w2, c.b2]
        .map(|i| tape.param(i, bundle.param(i).tensor.clone()));
    let score = |tape: &mut Tape, pairs| critic_apply(tape, ids[0], ids[1], ids[2], ids[3], pairs);
    let tj1 = score(&mut tape, j1)?;
    let tm1 = score(&mut tape, m1)?;
    let tj2 = score(&mut tape, j2)?;
    let tm2 = score(&mut tape, m2)?;
    let v1 = crate::losses::dv_bound(&mut tape, tj1, tm1)?;
    let v2 = crate::losses::dv_bound(&mut tape, tj2, tm2)?;
    let v = tape.add(v1, v2)?;
    let loss = tape.neg(v)?; // critic ascends V
    let grads = tape.backward(loss)?;
    opt.step(bundle.params_mut(), &grads, ComponentSet::of(&[Component::Critic]), lr)
}

/// One optimization step shared by both phases: a critic update first when
/// the MI objective is active, then one masked main update.
fn train_step(
    bundle: &mut ModelBundle,
    batch: &FeatBatch,
    cfg: &TrainConfig,
    opt_main: &mut Adam,
    opt_critic: &mut Adam,
    lr: f64,
    mode: StepMode,
) -> Result<StepReport> {
    if batch.items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let keep = cfg.phase2_keep_criteria;
    let eff = match mode {
        StepMode::Phase1 => LossSet { identity: false, ..cfg.losses },
        StepMode::Phase2(Stage::First) => LossSet {
            speaker: cfg.losses.speaker && keep,
            mi: cfg.losses.mi && keep,
            adversarial: cfg.losses.adversarial && keep,
            recon: false,
            identity: cfg.losses.identity,
        },
        StepMode::Phase2(Stage::Second) => LossSet {
            speaker: cfg.losses.speaker && keep,
            mi: cfg.losses.mi && keep,
            adversarial: cfg.losses.adversarial && keep,
            recon: cfg.losses.recon,
            identity: false,
        },
    };
    if !eff.any() {
        return Err(Error::Config("step has no active losses".into()));
    }
    let main_set = match mode {
        StepMode::Phase1 => ComponentSet::of(&[
            Component::EncSpk,
            Component::EncRes,
            Component::Decoder,
            Component::Classifier,
        ]),
        StepMode::Phase2(Stage::First) => {
            ComponentSet::of(&[Component::Decoder, Component::EncRes])
        }
        StepMode::Phase2(Stage::Second) => {
            ComponentSet::of(&[Component::Decoder, Component::EncSpk])
        }
    };
    // The classifier weight is frozen throughout Phase II.
    let freeze_w = matches!(mode, StepMode::Phase2(_));

    let need_spk_a = eff.speaker || eff.mi || eff.recon || eff.identity;
    let need_res_a = eff.mi || eff.recon || eff.identity || eff.adversarial;

    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, bundle, main_set);
    let mut spk_a = Vec::new();
    let mut res_a = Vec::new();
    let mut spk_ap = Vec::new();
    let mut res_ap = Vec::new();
    let mut spk_b = Vec::new();
    let mut res_b = Vec::new();
    let mut mel_a = Vec::new();
    let mut mel_b = Vec::new();
    let mut labels = Vec::new();
    for it in &batch.items {
        labels.push(it.label);
        let a = f.tape.leaf(it.spec_a.clone());
        if need_spk_a {
            spk_a.push(encode(&mut f, bundle, Component::EncSpk, a)?);
        }
        if need_res_a {
            res_a.push(encode(&mut f, bundle, Component::EncRes, a)?);
        }
        if eff.mi {
            let ap = f.tape.leaf(it.spec_ap.clone());
            spk_ap.push(encode(&mut f, bundle, Component::EncSpk, ap)?);
            res_ap.push(encode(&mut f, bundle, Component::EncRes, ap)?);
        }
        if eff.identity {
            let b = f.tape.leaf(it.spec_b.clone());
            spk_b.push(encode(&mut f, bundle, Component::EncSpk, b)?);
            res_b.push(encode(&mut f, bundle, Component::EncRes, b)?);
            mel_b.push(f.tape.leaf(it.mel_b.clone()));
        }
        if eff.recon || eff.identity {
            mel_a.push(f.tape.leaf(it.mel_a.clone()));
        }
    }

    // (a) critic ascent on the current embedding values, before the main
    // update reads the refreshed critic.
    let mut report = StepReport::default();
    if eff.mi {
        let values =
            |ids: &[ValueId], f: &Forward| -> Vec<Tensor> { ids.iter().map(|&i| f.tape.value(i).clone()).collect() };
        let (va, vap, ra, rap) =
            (values(&spk_a, &f), values(&spk_ap, &f), values(&res_a, &f), values(&res_ap, &f));
        critic_update(bundle, &va, &vap, &ra, &rap, opt_critic, lr)?;
    }

    // (b) main update.
    let mut terms: Vec<(ValueId, f64)> = Vec::new();
    if eff.speaker {
        let rows = f.tape.stack_rows(&spk_a)?;
        let l = match cfg.speaker_loss {
            SpeakerLossKind::CrossEntropy => {
                let logits = classify_rows(&mut f, bundle, rows, freeze_w)?;
                speaker_loss(f.tape, logits, &labels)?
            }
            // Classifier freezing in Phase II is enforced by the update
            // mask; the margin path needs no stop-gradient of its own.
            SpeakerLossKind::AngularMargin => {
                am_softmax_loss(&mut f, bundle, rows, &labels, cfg.am_margin, cfg.am_scale)?
            }
        };
        report.l_s = Some(f.tape.value(l).data()[0]);
        terms.push((l, cfg.weights.speaker));
    }
    if eff.mi {
        let v = mi_objective(&mut f, bundle, &spk_a, &spk_ap, &res_a, &res_ap)?;
        report.v = Some(f.tape.value(v).data()[0]);
        let term = match cfg.mi_mode {
            MiMode::Cooperative => f.tape.neg(v)?,
            MiMode::Adversarial => v,
        };
        terms.push((term, cfg.weights.mi));
    }
    if eff.adversarial {
        let rows = f.tape.stack_rows(&res_a)?;
        let logits = classify_rows(&mut f, bundle, rows, true)?;
        let l = adversarial_loss(f.tape, logits)?;
        report.l_adv = Some(f.tape.value(l).data()[0]);
        terms.push((l, cfg.weights.mi));
    }
    if eff.recon {
        let mut per_item = Vec::with_capacity(batch.items.len());
        for i in 0..batch.items.len() {
            let rec = decode(&mut f, bundle, spk_a[i], res_a[i])?;
            per_item.push(reconstruction_loss(f.tape, rec, mel_a[i])?);
        }
        let stacked = f.tape.stack_scalars(&per_item)?;
        let l = f.tape.mean_all(stacked)?;
        report.l_r = Some(f.tape.value(l).data()[0]);
        terms.push((l, cfg.weights.recon));
    }
    if eff.identity {
        let items: Vec<IcItem> = (0..batch.items.len())
            .map(|i| IcItem {
                spk_a: spk_a[i],
                spk_b: spk_b[i],
                res_a: res_a[i],
                res_b: res_b[i],
                mel_a: mel_a[i],
                mel_b: mel_b[i],
            })
            .collect();
        let l = identity_change_loss(&mut f, bundle, &items)?;
        report.l_ic = Some(f.tape.value(l).data()[0]);
        terms.push((l, cfg.weights.identity));
    }

    let total = total_loss(f.tape, &terms)?;
    report.total = f.tape.value(total).data()[0];
    let grads = f.tape.backward(total)?;
    opt_main.step(bundle.params_mut(), &grads, main_set, lr)?;
    Ok(report)
}

/// Phase I: critic/main alternation over speaker, disentanglement, and
/// reconstruction criteria.
pub fn phase1_step(
    bundle: &mut ModelBundle,
    batch: &FeatBatch,
    cfg: &TrainConfig,
    opt_main: &mut Adam,
    opt_critic: &mut Adam,
    lr: f64,
) -> Result<StepReport> {
    train_step(bundle, batch, cfg, opt_main, opt_critic, lr, StepMode::Phase1)
}

/// Phase II: stage 1 trains {decoder, E_res} on the identity-change loss,
/// stage 2 trains {decoder, E_spk} on reconstruction; other criteria
/// continue per the config.
pub fn phase2_step(
    bundle: &mut ModelBundle,
    batch: &FeatBatch,
    cfg: &TrainConfig,
    stage: Stage,
    opt_main: &mut Adam,
    opt_critic: &mut Adam,
    lr: f64,
) -> Result<StepReport> {
    train_step(bundle, batch, cfg, opt_main, opt_critic, lr, StepMode::Phase2(stage))
}

#[derive(Debug)]
pub struct FitOutput {
    pub model: ModelBundle,
    /// Snapshot at the end of Phase I (the initial model if Phase I has
    /// zero epochs).
    pub phase1_model: ModelBundle,
    pub log: Vec<StepRecord>,
}

/// Full training run: Phase I for its epoch budget, then Phase II with
/// per-batch stage alternation (skipped in favor of more Phase I epochs
/// when the identity-change loss is disabled, so ablations get equal
/// optimization budgets). Batches are prepared one thread ahead through a
/// bounded queue and consumed in sampler order.
pub fn fit(cfg: &TrainConfig, corpus: &Corpus, ckpt_dir: Option<&Path>) -> Result<FitOutput> {
    cfg.validate(corpus)?;
    let sr = corpus.utterance(0).wave.sample_rate;
    let feats = Features::new(cfg.frame, cfg.model.mel_bins, sr)?;
    let steps_per_epoch = cfg.steps_per_epoch_for(corpus);
    let total_epochs = cfg.phase1_epochs + cfg.phase2_epochs;
    let total_steps = steps_per_epoch * total_epochs;

    let mut bundle = ModelBundle::new(cfg.model.clone(), cfg.seed)?;
    let mut phase1_model = bundle.clone();
    let mut opt_main = Adam::new(bundle.params_mut());
    let mut opt_critic = Adam::new(bundle.params_mut());
    for opt in [&mut opt_main, &mut opt_critic] {
        opt.beta1 = cfg.adam_beta1;
        opt.beta2 = cfg.adam_beta2;
        opt.eps = cfg.adam_eps;
    }
    let mut log = Vec::with_capacity(total_steps);

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<FeatBatch>>(4);
        let producer_feats = feats.clone();
        let (batch_size, segment_s, sampler_seed) =
            (cfg.batch_size, cfg.segment_s, cfg.seed ^ 0x5EED_BA7C);
        scope.spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(sampler_seed);
            for _ in 0..total_steps {
                let item = sample_training_batch(corpus, batch_size, segment_s, &mut rng)
                    .and_then(|b| featurize(&b, &producer_feats));
                let failed = item.is_err();
                if tx.send(item).is_err() || failed {
                    break;
                }
            }
        });

        let mut phase2_batches = 0usize;
        for epoch in 0..total_epochs {
            let lr = cfg.schedule.lr(epoch);
            let phase2 = epoch >= cfg.phase1_epochs && cfg.losses.identity;
            for _ in 0..steps_per_epoch {
                let step = log.len() + 1;
                let batch = rx.recv().map_err(|_| {
                    Error::Corpus("batch producer stopped unexpectedly".into())
                })??;
                let result = if phase2 {
                    let stage =
                        if phase2_batches % 2 == 0 { Stage::First } else { Stage::Second };
                    phase2_batches += 1;
                    phase2_step(&mut bundle, &batch, cfg, stage, &mut opt_main, &mut opt_critic, lr)
                } else {
                    phase1_step(&mut bundle, &batch, cfg, &mut opt_main, &mut opt_critic, lr)
                };
                let report = match result {
                    Ok(r) => r,
                    Err(Error::NonFinite { op }) => {
                        return Err(Error::Diverged {
                            step,
                            detail: format!("non-finite value in {op}"),
                        })
                    }
                    Err(e) => return Err(e),
                };
                if !report.total.is_finite() {
                    return Err(Error::Diverged { step, detail: format!("total = {}", report.total) });
                }
                log.push(StepRecord { step, report });
            }
            if let Some(dir) = ckpt_dir {
                bundle.save(&dir.join(format!("epoch_{epoch:03}.ckpt")))?;
            }
            if epoch + 1 == cfg.phase1_epochs {
                phase1_model = bundle.clone();
                if let Some(dir) = ckpt_dir {
                    bundle.save(&dir.join("phase1.ckpt"))?;
                }
            }
        }
        Ok(())
    })?;

    if let Some(dir) = ckpt_dir {
        bundle.save(&dir.join("final.ckpt"))?;
    }
    Ok(FitOutput { model: bundle, phase1_model, log })
}
