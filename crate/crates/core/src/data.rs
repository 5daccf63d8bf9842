//! Corpus plumbing: manifest/WAV ingestion, the synthetic source-filter
//! corpus, and the paired-segment / trial samplers.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::dsp::{read_wav, slice_segment, write_wav, SegmentOffset, Waveform};
use crate::error::{Error, Result};

pub const SYNTH_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone)]
pub struct Utterance {
    pub speaker: String,
    pub utt: String,
    pub wave: Waveform,
}

/// Immutable utterance collection. Speakers are sorted, and an utterance's
/// classification label is its speaker's index in that sorted order.
#[derive(Debug, Clone)]
pub struct Corpus {
    speakers: Vec<String>,
    utterances: Vec<Utterance>,
    by_speaker: Vec<Vec<usize>>,
}

impl Corpus {
    /// Validates and indexes: unique (speaker, utterance) keys, >= 2
    /// utterances per speaker.
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        let mut keys = HashSet::new();
        for u in &utterances {
            if !keys.insert((u.speaker.clone(), u.utt.clone())) {
                return Err(Error::Corpus(format!("duplicate utterance {}/{}", u.speaker, u.utt)));
            }
        }
        let mut speakers: Vec<String> =
            utterances.iter().map(|u| u.speaker.clone()).collect::<HashSet<_>>().into_iter().collect();
        speakers.sort();
        let index: HashMap<&str, usize> =
            speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut by_speaker = vec![Vec::new(); speakers.len()];
        for (i, u) in utterances.iter().enumerate() {
            by_speaker[index[u.speaker.as_str()]].push(i);
        }
        for (s, utts) in speakers.iter().zip(&by_speaker) {
            if utts.len() < 2 {
                return Err(Error::Corpus(format!(
                    "speaker {s} has {} utterance(s); need >= 2",
                    utts.len()
                )));
            }
        }
        Ok(Corpus { speakers, utterances, by_speaker })
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterance(&self, i: usize) -> &Utterance {
        &self.utterances[i]
    }

    /// Classification label of utterance `i`.
    pub fn label_of(&self, i: usize) -> usize {
        self.speakers.binary_search(&self.utterances[i].speaker).expect("indexed speaker")
    }

    /// Utterance indices of the speaker with label `s`.
    pub fn utterances_of(&self, s: usize) -> &[usize] {
        &self.by_speaker[s]
    }

    pub fn find(&self, speaker: &str, utt: &str) -> Option<usize> {
        self.utterances.iter().position(|u| u.speaker == speaker && u.utt == utt)
    }
}

#[derive(Debug)]
pub struct LoadOutcome {
    pub corpus: Corpus,
    /// "speaker/utt: reason" lines for manifest entries dropped at load.
    pub rejected: Vec<String>,
}

/// Loads a tab-separated manifest ("speaker<TAB>utterance<TAB>wav_path",
/// paths relative to `root`). Utterances shorter than `min_seconds` are
/// dropped into the rejection report rather than failing the load.
pub fn load_corpus(root: &Path, manifest: &Path, min_seconds: f64) -> Result<LoadOutcome> {
    let text = std::fs::read_to_string(manifest)?;
    let mut utterances = Vec::new();
    let mut rejected = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Corpus(format!(
                "manifest line {}: expected 3 tab-separated fields, got {}",
                ln + 1,
                fields.len()
            )));
        }
        let (speaker, utt, rel) = (fields[0], fields[1], fields[2]);
        for id in [speaker, utt] {
            if id.is_empty() || id.chars().any(|c| c.is_whitespace() || c == '/') {
                return Err(Error::Corpus(format!(
                    "manifest line {}: id {id:?} must be non-empty without whitespace or '/'",
                    ln + 1
                )));
            }
        }
        let wave = read_wav(&root.join(rel))?;
        if wave.duration_s() < min_seconds {
            rejected.push(format!(
                "{speaker}/{utt}: {:.3} s < minimum {min_seconds:.3} s",
                wave.duration_s()
            ));
            continue;
        }
        utterances.push(Utterance { speaker: speaker.to_string(), utt: utt.to_string(), wave });
    }
    Ok(LoadOutcome { corpus: Corpus::new(utterances)?, rejected })
}

/// Writes every utterance as `<root>/<speaker>/<utt>.wav` plus a
/// `manifest.tsv` that [`load_corpus`] accepts. Returns the manifest path.
pub fn write_corpus(c: &Corpus, root: &Path) -> Result<std::path::PathBuf> {
    let mut manifest = String::new();
    for u in c.utterances() {
        let rel = format!("{}/{}.wav", u.speaker, u.utt);
        let path = root.join(&rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        write_wav(&path, &u.wave)?;
        writeln!(manifest, "{}\t{}\t{rel}", u.speaker, u.utt).expect("string write");
    }
    let manifest_path = root.join("manifest.tsv");
    std::fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

/// Voice parameters of one synthetic speaker: a harmonic source at `f0`
/// shaped by three resonances, plus the per-utterance jitter ranges that
/// produce content variation.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpeakerSpec {
    pub f0: f64,
    pub formants: [f64; 3],
    pub bandwidths: [f64; 3],
    /// Relative F0 deviation per utterance.
    pub f0_jitter: f64,
    /// Relative formant deviation per content segment.
    pub formant_jitter: f64,
    /// Relative formant deviation per utterance (on top of segment jitter).
    pub utt_formant_jitter: f64,
}

impl SyntheticSpeakerSpec {
    pub fn validate(&self) -> Result<()> {
        let nyquist = SYNTH_SAMPLE_RATE as f64 / 2.0;
        if !(self.formants[0] < self.formants[1] && self.formants[1] < self.formants[2]) {
            return Err(Error::InvalidArgument(format!(
                "formants must be strictly increasing: {:?}",
                self.formants
            )));
        }
        if self.formants[2] >= nyquist {
            return Err(Error::InvalidArgument(format!(
                "formant {} above Nyquist {nyquist}",
                self.formants[2]
            )));
        }
        Ok(())
    }
}

/// Draws the speaker population. Ranges are deliberately crowded — and the
/// per-utterance jitters deliberately large — so that raw spectral averages
/// barely separate speakers and verification has to rely on finer voice
/// structure.
pub fn synth_speaker_specs(n_speakers: usize, seed: u64) -> Vec<SyntheticSpeakerSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 0));
    (0..n_speakers)
        .map(|_| SyntheticSpeakerSpec {
            f0: rng.random_range(120.0..210.0),
            formants: [
                rng.random_range(480.0..720.0),
                rng.random_range(1350.0..1850.0),
                rng.random_range(2600.0..3100.0),
            ],
            bandwidths: [
                rng.random_range(70.0..140.0),
                rng.random_range(80.0..160.0),
                rng.random_range(100.0..180.0),
            ],
            f0_jitter: 0.08,
            formant_jitter: 0.06,
            utt_formant_jitter: 0.07,
        })
        .collect()
}

/// splitmix64-style seed derivation: decorrelates per-utterance streams.
fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0xA0761D6478BD642F) ^ b.wrapping_mul(0xE7037ED1A0B428DB);
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Two-pole resonator bank applied over a span with constant coefficients;
/// filter state persists across spans so formant jumps do not click.
struct Resonator {
    b0: f64,
    a1: f64,
    a2: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn tuned(freq: f64, bandwidth: f64) -> Self {
        let sr = SYNTH_SAMPLE_RATE as f64;
        let r = (-std::f64::consts::PI * bandwidth / sr).exp();
        let omega = 2.0 * std::f64::consts::PI * freq / sr;
        Resonator { b0: (1.0 - r * r) * omega.sin(), a1: 2.0 * r * omega.cos(), a2: -r * r, y1: 0.0, y2: 0.0 }
    }

    fn retune(&mut self, freq: f64, bandwidth: f64) {
        let fresh = Resonator::tuned(freq, bandwidth);
        self.b0 = fresh.b0;
        self.a1 = fresh.a1;
        self.a2 = fresh.a2;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Strength of the per-utterance channel EQ, in natural-log gain units
/// (±1.0 ≈ ±8.7 dB of smooth coloration).
const EQ_LOG_GAIN: f64 = 1.0;
const EQ_TAPS: usize = 64;

/// Smooth random EQ as a linear-phase FIR: log-gains at 9 control points
/// across [0, Nyquist], interpolated over a 512-bin spectrum, brought back
/// to 64 windowed taps.
fn utterance_eq_fir(rng: &mut ChaCha8Rng) -> Vec<f64> {
    const N: usize = 512;
    let control: Vec<f64> = (0..9).map(|_| rng.random_range(-EQ_LOG_GAIN..EQ_LOG_GAIN)).collect();
    let mut spectrum = vec![Complex::new(0.0, 0.0); N];
    for k in 0..=N / 2 {
        let pos = k as f64 / (N / 2) as f64 * (control.len() - 1) as f64;
        let (lo, frac) = (pos as usize, pos.fract());
        let g = if lo + 1 < control.len() {
            control[lo] * (1.0 - frac) + control[lo + 1] * frac
        } else {
            control[lo]
        };
        spectrum[k] = Complex::new(g.exp(), 0.0);
        if k > 0 && k < N / 2 {
            spectrum[N - k] = spectrum[k];
        }
    }
    FftPlanner::new().plan_fft_inverse(N).process(&mut spectrum);
    // the real even spectrum yields a symmetric impulse response around 0;
    // rotate it to the window center and taper
    let mut taps = vec![0.0; EQ_TAPS];
    for (i, t) in taps.iter_mut().enumerate() {
        let src = (N + i - EQ_TAPS / 2) % N;
        let w = 0.54
            - 0.46 * (std::f64::consts::TAU * i as f64 / (EQ_TAPS - 1) as f64).cos();
        *t = spectrum[src].re / N as f64 * w;
    }
    taps
}

/// Renders one utterance: impulse train at the utterance's jittered F0,
/// shaped by the speaker's resonators with per-utterance and per-segment
/// formant jitter, slow amplitude modulation, a per-utterance spectral
/// tilt and random channel EQ, and white noise at 20 dB SNR.
/// Peak-normalized to 0.5.
pub fn synth_utterance(spec: &SyntheticSpeakerSpec, seconds: f64, rng: &mut ChaCha8Rng) -> Waveform {
    let sr = SYNTH_SAMPLE_RATE as f64;
    let n = (seconds * sr).round() as usize;

    let f0 = spec.f0 * (1.0 + rng.random_range(-spec.f0_jitter..spec.f0_jitter));
    let utt_shift: Vec<f64> = (0..3)
        .map(|_| 1.0 + rng.random_range(-spec.utt_formant_jitter..spec.utt_formant_jitter))
        .collect();
    let am_rate = rng.random_range(1.5..4.0);
    let am_depth = rng.random_range(0.2..0.45);
    let am_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let tilt = rng.random_range(-0.55..0.55);
    let eq = utterance_eq_fir(rng);

    // Glottal source: impulse train with slight period jitter.
    let mut src = vec![0.0; n];
    let mut mark = 0.0f64;
    while (mark as usize) < n {
        src[mark as usize] = 1.0;
        let period = sr / f0;
        mark += period * (1.0 + rng.random_range(-0.01..0.01));
    }

    // Content track: formant multipliers jump every 0.25-0.5 s around the
    // utterance's own formant shift.
    let mut resonators: Vec<Resonator> = (0..3)
        .map(|k| Resonator::tuned(spec.formants[k] * utt_shift[k], spec.bandwidths[k]))
        .collect();
    let mut out = vec![0.0; n];
    let mut start = 0usize;
    let mut first = true;
    while start < n {
        let span = ((rng.random_range(0.25..0.5) * sr) as usize).min(n - start);
        if !first {
            for (k, res) in resonators.iter_mut().enumerate() {
                let m = 1.0 + rng.random_range(-spec.formant_jitter..spec.formant_jitter);
                res.retune(spec.formants[k] * utt_shift[k] * m, spec.bandwidths[k]);
            }
        }
        for i in start..start + span {
            let mut acc = 0.0;
            for res in resonators.iter_mut() {
                acc += res.step(src[i]);
            }
            out[i] = acc;
        }
        start += span;
        first = false;
    }

    // Per-utterance tilt (one-zero filter) and slow amplitude modulation.
    let mut prev = 0.0;
    for (i, y) in out.iter_mut().enumerate() {
        let tilted = *y - tilt * prev;
        prev = *y;
        let t = i as f64 / sr;
        *y = tilted * (1.0 + am_depth * (std::f64::consts::TAU * am_rate * t + am_phase).sin());
    }

    // Per-utterance channel EQ (zero-delay linear-phase FIR).
    let half = (EQ_TAPS / 2) as isize;
    let mut colored = vec![0.0; n];
    for (i, c) in colored.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (t, &h) in eq.iter().enumerate() {
            let j = i as isize - t as isize + half;
            if (0..n as isize).contains(&j) {
                acc += h * out[j as usize];
            }
        }
        *c = acc;
    }
    let mut out = colored;

    // Additive white noise at 20 dB SNR, then peak normalization (scaling
    // signal and noise together preserves the SNR).
    let power = out.iter().map(|y| y * y).sum::<f64>() / n as f64;
    let sigma = (power / 100.0).sqrt();
    for y in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *y += sigma * z;
    }
    let peak = out.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if peak > 0.0 {
        let g = 0.5 / peak;
        for y in out.iter_mut() {
            *y *= g;
        }
    }
    Waveform::new(out, SYNTH_SAMPLE_RATE)
}

/// Deterministic synthetic corpus: `n_speakers` voices, `utts_per_speaker`
/// utterances each, every utterance `utt_seconds` long.
pub fn generate_synthetic_corpus(
    n_speakers: usize,
    utts_per_speaker: usize,
    utt_seconds: f64,
    seed: u64,
) -> Result<Corpus> {
    if n_speakers < 2 || utts_per_speaker < 2 {
        return Err(Error::InvalidArgument(format!(
            "need >= 2 speakers and >= 2 utterances each, got {n_speakers} x {utts_per_speaker}"
        )));
    }
    let specs = synth_speaker_specs(n_speakers, seed);
    let mut utterances = Vec::with_capacity(n_speakers * utts_per_speaker);
    for (s, spec) in specs.iter().enumerate() {
        spec.validate()?;
        for u in 0..utts_per_speaker {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, s as u64 + 1, u as u64 + 1));
            let wave = synth_utterance(spec, utt_seconds, &mut rng);
            utterances.push(Utterance {
                speaker: format!("s{s:03}"),
                utt: format!("u{u:03}"),
                wave,
            });
        }
    }
    Corpus::new(utterances)
}

/// One training item: segments A and A' cut from the same utterance at
/// distinct offsets, B from a different utterance of the same speaker.
#[derive(Debug, Clone)]
pub struct PairItem {
    pub label: usize,
    pub utt_a: usize,
    pub utt_b: usize,
    pub off_a: usize,
    pub off_ap: usize,
    pub seg_a: Waveform,
    pub seg_ap: Waveform,
    pub seg_b: Waveform,
}

#[derive(Debug, Clone)]
pub struct SegmentPairBatch {
    pub items: Vec<PairItem>,
}

pub fn sample_training_batch(
    c: &Corpus,
    batch_size: usize,
    segment_s: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SegmentPairBatch> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut items = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let utt_a = rng.random_range(0..c.len());
        let a = c.utterance(utt_a);
        let seg = (segment_s * a.wave.sample_rate as f64).round() as usize;
        if seg == 0 || seg >= a.wave.len() {
            return Err(Error::Corpus(format!(
                "utterance {}/{} too short for two distinct {segment_s} s offsets",
                a.speaker, a.utt
            )));
        }
        let max_off = a.wave.len() - seg;
        let off_a = rng.random_range(0..=max_off);
        let off_ap = loop {
            let o = rng.random_range(0..=max_off);
            if o != off_a {
                break o;
            }
        };
        let (seg_a, _) = slice_segment(&a.wave, segment_s, SegmentOffset::At(off_a), rng)?;
        let (seg_ap, _) = slice_segment(&a.wave, segment_s, SegmentOffset::At(off_ap), rng)?;

        let label = c.label_of(utt_a);
        let peers = c.utterances_of(label);
        let utt_b = loop {
            let b = peers[rng.random_range(0..peers.len())];
            if b != utt_a {
                break b;
            }
        };
        let (seg_b, _) =
            slice_segment(&c.utterance(utt_b).wave, segment_s, SegmentOffset::Random, rng)?;
        items.push(PairItem { label, utt_a, utt_b, off_a, off_ap, seg_a, seg_ap, seg_b });
    }
    Ok(SegmentPairBatch { items })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trial {
    pub label: TrialLabel,
    /// Utterance indices into the corpus.
    pub a: usize,
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

/// Balanced verification trials: `n_target` same-speaker different-utterance
/// pairs and `n_nontarget` cross-speaker pairs, without repetition.
pub fn make_trials(c: &Corpus, n_target: usize, n_nontarget: usize, seed: u64) -> Result<TrialSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut same: Vec<(usize, usize)> = Vec::new();
    for s in 0..c.n_speakers() {
        let utts = c.utterances_of(s);
        for i in 0..utts.len() {
            for j in i + 1..utts.len() {
                same.push((utts[i], utts[j]));
            }
        }
    }
    if n_target > same.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {n_target} target trials but only {} same-speaker pairs exist",
            same.len()
        )));
    }
    same.shuffle(&mut rng);
    same.truncate(n_target);

    let n_cross: usize = {
        let total = c.len() * (c.len() - 1) / 2;
        total - (0..c.n_speakers())
            .map(|s| {
                let k = c.utterances_of(s).len();
                k * (k - 1) / 2
            })
            .sum::<usize>()
    };
    if n_nontarget > n_cross {
        return Err(Error::InvalidArgument(format!(
            "requested {n_nontarget} nontarget trials but only {n_cross} cross-speaker pairs exist"
        )));
    }
    let mut cross = Vec::with_capacity(n_nontarget);
    let mut seen = HashSet::new();
    while cross.len() < n_nontarget {
        let a = rng.random_range(0..c.len());
        let b = rng.random_range(0..c.len());
        if a == b || c.label_of(a) == c.label_of(b) {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if seen.insert(key) {
            cross.push(key);
        }
    }

    let trials = same
        .into_iter()
        .map(|(a, b)| Trial { label: TrialLabel::Target, a, b })
        .chain(cross.into_iter().map(|(a, b)| Trial { label: TrialLabel::Nontarget, a, b }))
        .collect();
    Ok(TrialSet { trials })
}

/// Writes trials as "1|0 <speaker/utt> <speaker/utt>" lines.
pub fn write_trials(c: &Corpus, t: &TrialSet, path: &Path) -> Result<()> {
    let mut text = String::new();
    for trial in &t.trials {
        let (a, b) = (c.utterance(trial.a), c.utterance(trial.b));
        let flag = if trial.label == TrialLabel::Target { 1 } else { 0 };
        writeln!(text, "{flag} {}/{} {}/{}", a.speaker, a.utt, b.speaker, b.utt)
            .expect("string write");
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_trials(c: &Corpus, path: &Path) -> Result<TrialSet> {
    let text = std::fs::read_to_string(path)?;
    let mut trials = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Corpus(format!("trial line {}: expected 3 fields", ln + 1)));
        }
        let label = match fields[0] {
            "1" => TrialLabel::Target,
            "0" => TrialLabel::Nontarget,
            other => {
                return Err(Error::Corpus(format!("trial line {}: bad label {other:?}", ln + 1)))
            }
        };
        let resolve = |field: &str| -> Result<usize> {
            let (spk, utt) = field
                .split_once('/')
                .ok_or_else(|| Error::Corpus(format!("trial line {}: bad ref {field:?}", ln + 1)))?;
            c.find(spk, utt)
                .ok_or_else(|| Error::Corpus(format!("trial line {}: unknown {field:?}", ln + 1)))
        };
        trials.push(Trial { label, a: resolve(fields[1])?, b: resolve(fields[2])? });
    }
    Ok(TrialSet { trials })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{build_mel_filterbank, log_mel, stft_power, write_wav, FrameParams};

    #[test]
    fn corpus_loads_from_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = String::new();
        for spk in ["alice", "bob"] {
            for utt in ["a", "b"] {
                let name = format!("{spk}_{utt}.wav");
                let wave = Waveform::new(vec![0.1; 16_000], 16_000);
                write_wav(&dir.path().join(&name), &wave).unwrap();
                writeln!(manifest, "{spk}\t{utt}\t{name}").unwrap();
            }
        }
        let mpath = dir.path().join("manifest.tsv");
        std::fs::write(&mpath, manifest).unwrap();
        let out = load_corpus(dir.path(), &mpath, 0.5).unwrap();
        assert_eq!(out.corpus.len(), 4);
        assert_eq!(out.corpus.n_speakers(), 2);
        assert!(out.rejected.is_empty());
        assert_eq!(out.corpus.speakers(), ["alice".to_string(), "bob".to_string()]);
    }

    #[test]
    fn too_short_utterance_is_rejected_with_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = String::new();
        for (spk, utt, samples) in
            [("a", "u1", 16_000), ("a", "u2", 16_000), ("a", "short", 1_000)]
        {
            let name = format!("{spk}_{utt}.wav");
            write_wav(&dir.path().join(&name), &Waveform::new(vec![0.1; samples], 16_000)).unwrap();
            writeln!(manifest, "{spk}\t{utt}\t{name}").unwrap();
        }
        let mpath = dir.path().join("manifest.tsv");
        std::fs::write(&mpath, manifest).unwrap();
        let out = load_corpus(dir.path(), &mpath, 0.5).unwrap();
        assert_eq!(out.corpus.len(), 2);
        assert_eq!(out.rejected.len(), 1);
        assert!(out.rejected[0].contains("a/short"));
    }

    #[test]
    fn duplicate_key_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_wav(&dir.path().join("x.wav"), &Waveform::new(vec![0.1; 16_000], 16_000)).unwrap();
        let mpath = dir.path().join("manifest.tsv");
        std::fs::write(&mpath, "a\tu1\tx.wav\na\tu1\tx.wav\n").unwrap();
        assert!(load_corpus(dir.path(), &mpath, 0.5).is_err());
    }

    #[test]
    fn single_utterance_speaker_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_wav(&dir.path().join("x.wav"), &Waveform::new(vec![0.1; 16_000], 16_000)).unwrap();
        let mpath = dir.path().join("manifest.tsv");
        std::fs::write(&mpath, "a\tu1\tx.wav\na\tu2\tx.wav\nb\tu1\tx.wav\n").unwrap();
        let err = load_corpus(dir.path(), &mpath, 0.5).unwrap_err();
        assert!(err.to_string().contains("b"), "{err}");
    }

    #[test]
    fn synthetic_corpus_is_bit_identical_per_seed() {
        let c1 = generate_synthetic_corpus(3, 2, 0.4, 7).unwrap();
        let c2 = generate_synthetic_corpus(3, 2, 0.4, 7).unwrap();
        assert_eq!(c1.len(), c2.len());
        for (a, b) in c1.utterances().iter().zip(c2.utterances()) {
            assert_eq!(a.speaker, b.speaker);
            assert_eq!(a.utt, b.utt);
            assert_eq!(a.wave.samples, b.wave.samples);
        }
        let c3 = generate_synthetic_corpus(3, 2, 0.4, 8).unwrap();
        assert_ne!(c1.utterance(0).wave.samples, c3.utterance(0).wave.samples);
    }

    #[test]
    fn speaker_specs_satisfy_invariants() {
        for spec in synth_speaker_specs(50, 3) {
            spec.validate().unwrap();
            assert!(spec.formants[2] < SYNTH_SAMPLE_RATE as f64 / 2.0);
        }
    }

    #[test]
    fn same_speaker_utterances_share_voice_but_differ_in_content() {
        let c = generate_synthetic_corpus(2, 2, 0.4, 11).unwrap();
        let u0 = c.find("s000", "u000").unwrap();
        let u1 = c.find("s000", "u001").unwrap();
        assert_ne!(c.utterance(u0).wave.samples, c.utterance(u1).wave.samples);
        assert_eq!(c.utterance(u0).wave.len(), c.utterance(u1).wave.len());
    }

    /// Separability sanity: time-averaged log-mel vectors of one speaker sit
    /// closer together than across speakers.
    #[test]
    fn intra_speaker_spectrogram_distance_is_below_inter() {
        let c = generate_synthetic_corpus(6, 3, 1.0, 13).unwrap();
        let p = FrameParams::default();
        let fb = build_mel_filterbank(24, p.fft_size, SYNTH_SAMPLE_RATE, 0.0, 8000.0).unwrap();
        let profiles: Vec<(usize, Vec<f64>)> = (0..c.len())
            .map(|i| {
                let power = stft_power(&c.utterance(i).wave, &p).unwrap();
                let mel = log_mel(&power, &fb).unwrap();
                let frames = mel.shape()[0];
                let mut mean = vec![0.0; fb.n_mels];
                for f in 0..frames {
                    for m in 0..fb.n_mels {
                        mean[m] += mel.data()[f * fb.n_mels + m] / frames as f64;
                    }
                }
                (c.label_of(i), mean)
            })
            .collect();
        let dist = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
        for i in 0..profiles.len() {
            for j in i + 1..profiles.len() {
                let d = dist(&profiles[i].1, &profiles[j].1);
                if profiles[i].0 == profiles[j].0 {
                    intra = (intra.0 + d, intra.1 + 1);
                } else {
                    inter = (inter.0 + d, inter.1 + 1);
                }
            }
        }
        let (mi, me) = (intra.0 / intra.1 as f64, inter.0 / inter.1 as f64);
        assert!(mi < me, "intra {mi} should be below inter {me}");
    }

    #[test]
    fn pair_batch_satisfies_pairing_contract_over_many_draws() {
        let c = generate_synthetic_corpus(3, 2, 0.5, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut drawn = 0;
        while drawn < 10_000 {
            let batch = sample_training_batch(&c, 50, 0.2, &mut rng).unwrap();
            for it in &batch.items {
                assert_ne!(it.off_a, it.off_ap);
                assert_eq!(it.utt_a == it.utt_b, false);
                assert_eq!(c.label_of(it.utt_a), c.label_of(it.utt_b));
                assert_eq!(it.label, c.label_of(it.utt_a));
                assert_eq!(it.seg_a.len(), it.seg_ap.len());
                assert_eq!(it.seg_a.len(), it.seg_b.len());
            }
            drawn += batch.items.len();
        }
    }

    #[test]
    fn exact_length_utterance_cannot_give_two_offsets() {
        let c = generate_synthetic_corpus(2, 2, 0.25, 19).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        assert!(sample_training_batch(&c, 4, 0.25, &mut rng).is_err());
    }

    #[test]
    fn trials_are_balanced_and_deterministic() {
        let c = generate_synthetic_corpus(5, 3, 0.25, 23).unwrap();
        let t1 = make_trials(&c, 12, 12, 1).unwrap();
        let t2 = make_trials(&c, 12, 12, 1).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(t1.trials.len(), 24);
        let targets = t1.trials.iter().filter(|t| t.label == TrialLabel::Target).count();
        assert_eq!(targets, 12);
        for t in &t1.trials {
            assert_ne!(t.a, t.b);
            let same = c.label_of(t.a) == c.label_of(t.b);
            assert_eq!(same, t.label == TrialLabel::Target);
            if same {
                assert_ne!(c.utterance(t.a).utt, c.utterance(t.b).utt);
            }
        }
        assert!(make_trials(&c, 16, 12, 1).is_err(), "only 15 same-speaker pairs exist");
    }

    #[test]
    fn trial_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_synthetic_corpus(4, 2, 0.25, 29).unwrap();
        let t = make_trials(&c, 4, 4, 2).unwrap();
        let path = dir.path().join("trials.txt");
        write_trials(&c, &t, &path).unwrap();
        let back = read_trials(&c, &path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn write_corpus_round_trips_through_load_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_synthetic_corpus(3, 2, 0.3, 11).unwrap();
        let manifest = write_corpus(&c, dir.path()).unwrap();
        let out = load_corpus(dir.path(), &manifest, 0.0).unwrap();
        assert!(out.rejected.is_empty());
        assert_eq!(out.corpus.speakers(), c.speakers());
        assert_eq!(out.corpus.len(), c.len());
        for (a, b) in out.corpus.utterances().iter().zip(c.utterances()) {
            assert_eq!((a.speaker.as_str(), a.utt.as_str()), (b.speaker.as_str(), b.utt.as_str()));
            assert_eq!(a.wave.len(), b.wave.len());
            for (x, y) in a.wave.samples.iter().zip(&b.wave.samples) {
                assert!((x - y).abs() <= 1.0 / 32768.0, "{x} vs {y}");
            }
        }
        let dir2 = tempfile::tempdir().unwrap();
        write_corpus(&c, dir2.path()).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("s000/u001.wav")).unwrap(),
            std::fs::read(dir2.path().join("s000/u001.wav")).unwrap()
        );
        assert_eq!(
            std::fs::read(dir.path().join("manifest.tsv")).unwrap(),
            std::fs::read(dir2.path().join("manifest.tsv")).unwrap()
        );
    }
}
