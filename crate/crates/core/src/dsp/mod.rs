//! Audio feature extraction: framed STFT log-power features for the
//! encoders and log-mel targets for the decoder.

mod wav;

pub use wav::{read_wav, write_wav};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Floor applied to power values before taking logs.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Analysis framing: 25 ms Hamming window, 10 ms hop, 512-point FFT.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameParams {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
}

impl Default for FrameParams {
    fn default() -> Self {
        FrameParams { window_ms: 25.0, hop_ms: 10.0, fft_size: 512 }
    }
}

impl FrameParams {
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn n_frames(&self, n_samples: usize, sample_rate: u32) -> Result<usize> {
        let win = self.window_samples(sample_rate);
        let hop = self.hop_samples(sample_rate);
        if win == 0 || hop == 0 || hop > win || self.fft_size < win {
            return Err(Error::InvalidArgument(format!(
                "bad framing: window {win}, hop {hop}, fft {}",
                self.fft_size
            )));
        }
        if n_samples < win {
            return Err(Error::InvalidArgument(format!(
                "waveform of {n_samples} samples shorter than one {win}-sample window"
            )));
        }
        Ok((n_samples - win) / hop + 1)
    }

    fn hamming(&self, sample_rate: u32) -> Vec<f64> {
        let n = self.window_samples(sample_rate);
        (0..n)
            .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
            .collect()
    }
}

/// One-sided power spectrogram, [frames, fft/2+1].
///
/// Scaling keeps Parseval: bin 0 and Nyquist carry |X|²/N, interior bins
/// 2|X|²/N, so a row sums to the energy of its windowed frame.
pub fn stft_power(w: &Waveform, p: &FrameParams) -> Result<Tensor> {
    let frames = p.n_frames(w.len(), w.sample_rate)?;
    let win = p.window_samples(w.sample_rate);
    let hop = p.hop_samples(w.sample_rate);
    let bins = p.bins();
    let n = p.fft_size;
    let window = p.hamming(w.sample_rate);

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut out = vec![0.0; frames * bins];
    for f in 0..frames {
        let start = f * hop;
        for i in 0..n {
            let v = if i < win { w.samples[start + i] * window[i] } else { 0.0 };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        let inv_n = 1.0 / n as f64;
        for k in 0..bins {
            let mag2 = buf[k].norm_sqr();
            let scale = if k == 0 || k == n / 2 { inv_n } else { 2.0 * inv_n };
            out[f * bins + k] = mag2 * scale;
        }
    }
    Tensor::matrix(frames, bins, out)
}

/// Encoder input features: log of the floored power spectrogram.
pub fn stft_log_magnitude(w: &Waveform, p: &FrameParams) -> Result<Tensor> {
    let mut power = stft_power(w, p)?;
    for v in power.data_mut() {
        *v = v.max(LOG_FLOOR).ln();
    }
    Ok(power)
}

/// Mel frequency in the HTK convention.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, [n_mels, fft/2+1]. Triangles live in mel
/// space (HTK style) with no area normalization.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub weights: Tensor,
    pub n_mels: usize,
    pub bins: usize,
}

pub fn build_mel_filterbank(
    n_mels: usize,
    fft_size: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
) -> Result<MelFilterbank> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(0.0..nyquist).contains(&fmin) || fmax <= fmin || fmax > nyquist {
        return Err(Error::InvalidArgument(format!(
            "mel band edges [{fmin}, {fmax}] invalid for nyquist {nyquist}"
        )));
    }
    if n_mels == 0 {
        return Err(Error::InvalidArgument("n_mels must be positive".into()));
    }
    let bins = fft_size / 2 + 1;
    let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let step = (mhi - mlo) / (n_mels + 1) as f64;
    let centers: Vec<f64> = (0..n_mels + 2).map(|i| mlo + step * i as f64).collect();

    let mut w = vec![0.0; n_mels * bins];
    for k in 0..bins {
        let mk = hz_to_mel(k as f64 * sample_rate as f64 / fft_size as f64);
        for m in 0..n_mels {
            let (left, center, right) = (centers[m], centers[m + 1], centers[m + 2]);
            let v = if mk <= center {
                (mk - left) / (center - left)
            } else {
                (right - mk) / (right - center)
            };
            if v > 0.0 {
                w[m * bins + k] = v;
            }
        }
    }
    Ok(MelFilterbank { weights: Tensor::matrix(n_mels, bins, w)?, n_mels, bins })
}

impl MelFilterbank {
    /// Argmax bin of each filter row.
    pub fn peak_bins(&self) -> Vec<usize> {
        let d = self.weights.data();
        (0..self.n_mels)
            .map(|m| {
                let row = &d[m * self.bins..(m + 1) * self.bins];
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(k, _)| k)
                    .unwrap()
            })
            .collect()
    }
}

/// Log-mel target: log(max(fb · power_frame, floor)) per frame, [frames, n_mels].
pub fn log_mel(power: &Tensor, fb: &MelFilterbank) -> Result<Tensor> {
    let s = power.shape();
    if s.len() != 2 || s[1] != fb.bins {
        return Err(Error::shape("log_mel", format!("power {s:?} vs {} bins", fb.bins)));
    }
    let (frames, bins) = (s[0], s[1]);
    let pd = power.data();
    let wd = fb.weights.data();
    let mut out = vec![0.0; frames * fb.n_mels];
    for f in 0..frames {
        for m in 0..fb.n_mels {
            let mut acc = 0.0;
            for k in 0..bins {
                acc += wd[m * bins + k] * pd[f * bins + k];
            }
            out[f * fb.n_mels + m] = acc.max(LOG_FLOOR).ln();
        }
    }
    Tensor::matrix(frames, fb.n_mels, out)
}

/// Where to slice a segment from an utterance.
#[derive(Debug, Clone, Copy)]
pub enum SegmentOffset {
    /// Fixed start sample.
    At(usize),
    /// Uniform over all valid start samples.
    Random,
}

/// Contiguous slice of exactly `duration_s`; returns the slice and the
/// offset it was taken at.
pub fn slice_segment(
    w: &Waveform,
    duration_s: f64,
    offset: SegmentOffset,
    rng: &mut impl rand::Rng,
) -> Result<(Waveform, usize)> {
    let seg = (duration_s * w.sample_rate as f64).round() as usize;
    if seg == 0 {
        return Err(Error::InvalidArgument("segment duration must be positive".into()));
    }
    if seg > w.len() {
        return Err(Error::InvalidArgument(format!(
            "utterance of {} samples shorter than {seg}-sample segment",
            w.len()
        )));
    }
    let max_start = w.len() - seg;
    let start = match offset {
        SegmentOffset::At(s) => {
            if s > max_start {
                return Err(Error::InvalidArgument(format!(
                    "offset {s} exceeds max start {max_start}"
                )));
            }
            s
        }
        SegmentOffset::Random => {
            if max_start == 0 {
                0
            } else {
                rng.random_range(0..=max_start)
            }
        }
    };
    Ok((Waveform::new(w.samples[start..start + seg].to_vec(), w.sample_rate), start))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, seconds: f64, sr: u32) -> Waveform {
        let n = (seconds * sr as f64) as usize;
        let samples = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin() * 0.5)
            .collect();
        Waveform::new(samples, sr)
    }

    #[test]
    fn three_seconds_gives_298_frames_by_257_bins() {
        let w = sine(440.0, 3.0, 16000);
        let s = stft_log_magnitude(&w, &FrameParams::default()).unwrap();
        assert_eq!(s.shape(), &[298, 257]);
    }

    #[test]
    fn one_khz_sine_peaks_at_bin_32() {
        let w = sine(1000.0, 0.5, 16000);
        let s = stft_power(&w, &FrameParams::default()).unwrap();
        let bins = 257;
        for f in 0..s.shape()[0] {
            let row = &s.data()[f * bins..(f + 1) * bins];
            let peak = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(peak, 32, "frame {f}");
        }
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let w = Waveform::new(vec![0.0; 16000], 16000);
        let s = stft_log_magnitude(&w, &FrameParams::default()).unwrap();
        for &v in s.data() {
            assert_eq!(v, LOG_FLOOR.ln());
        }
    }

    #[test]
    fn power_rows_satisfy_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sr = 16000u32;
        let samples: Vec<f64> = (0..8000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Waveform::new(samples.clone(), sr);
        let p = FrameParams::default();
        let s = stft_power(&w, &p).unwrap();
        let win = p.window_samples(sr);
        let hop = p.hop_samples(sr);
        let window = p.hamming(sr);
        let bins = p.bins();
        for f in 0..s.shape()[0] {
            let energy: f64 =
                (0..win).map(|i| (samples[f * hop + i] * window[i]).powi(2)).sum();
            let row_sum: f64 = s.data()[f * bins..(f + 1) * bins].iter().sum();
            assert!(
                (row_sum - energy).abs() <= 1e-6 * energy.max(1e-12),
                "frame {f}: {row_sum} vs {energy}"
            );
        }
    }

    #[test]
    fn mel_scale_formula_values() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        let m700 = hz_to_mel(700.0);
        assert!((m700 - 781.17).abs() < 0.01, "m(700) = {m700}");
        // inverse consistency
        assert!((mel_to_hz(m700) - 700.0).abs() < 1e-9);
    }

    #[test]
    fn filterbank_rows_nonneg_unimodal_with_increasing_peaks() {
        let fb = build_mel_filterbank(64, 512, 16000, 0.0, 8000.0).unwrap();
        let d = fb.weights.data();
        for m in 0..fb.n_mels {
            let row = &d[m * fb.bins..(m + 1) * fb.bins];
            assert!(row.iter().all(|&v| v >= 0.0), "filter {m} has negative weight");
            assert!(row.iter().any(|&v| v > 0.0), "filter {m} is empty");
            // unimodal: nonzero support rises to a single peak then falls
            let peak = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            for k in 1..=peak {
                assert!(row[k] >= row[k - 1] || row[k - 1] == 0.0, "filter {m} dips before peak");
            }
            for k in peak + 1..fb.bins {
                assert!(row[k] <= row[k - 1] || row[k] == 0.0, "filter {m} rises after peak");
            }
        }
        let peaks = fb.peak_bins();
        for m in 1..peaks.len() {
            assert!(peaks[m] > peaks[m - 1], "peaks not strictly increasing at {m}: {peaks:?}");
        }
    }

    #[test]
    fn log_mel_of_zero_power_is_floor() {
        let fb = build_mel_filterbank(64, 512, 16000, 0.0, 8000.0).unwrap();
        let power = Tensor::zeros(vec![5, 257]);
        let lm = log_mel(&power, &fb).unwrap();
        for &v in lm.data() {
            assert_eq!(v, LOG_FLOOR.ln());
        }
    }

    #[test]
    fn doubling_power_adds_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fb = build_mel_filterbank(64, 512, 16000, 0.0, 8000.0).unwrap();
        let data: Vec<f64> = (0..2 * 257).map(|_| rng.random_range(0.1..2.0)).collect();
        let p1 = Tensor::matrix(2, 257, data.clone()).unwrap();
        let p2 = Tensor::matrix(2, 257, data.iter().map(|v| v * 2.0).collect()).unwrap();
        let (l1, l2) = (log_mel(&p1, &fb).unwrap(), log_mel(&p2, &fb).unwrap());
        for (a, b) in l1.data().iter().zip(l2.data()) {
            assert!((b - a - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn white_noise_tracks_filter_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<f64> = (0..16000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let w = Waveform::new(samples, 16000);
        let p = FrameParams::default();
        let power = stft_power(&w, &p).unwrap();
        let fb = build_mel_filterbank(64, 512, 16000, 0.0, 8000.0).unwrap();
        let lm = log_mel(&power, &fb).unwrap();
        let bins = p.bins();
        let mean_power: f64 =
            power.data().iter().sum::<f64>() / power.numel() as f64;
        let wd = fb.weights.data();
        // average the log-mel over frames, compare to log(filter mass * mean power)
        let frames = lm.shape()[0];
        for m in 0..fb.n_mels {
            let mass: f64 = wd[m * bins..(m + 1) * bins].iter().sum();
            let avg: f64 =
                (0..frames).map(|f| lm.data()[f * fb.n_mels + m]).sum::<f64>() / frames as f64;
            let expect = (mass * mean_power).max(LOG_FLOOR).ln();
            assert!((avg - expect).abs() <= 3.0, "mel {m}: {avg} vs {expect}");
        }
    }

    #[test]
    fn slicing_contracts() {
        let w = sine(200.0, 10.0, 16000);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (s, off) = slice_segment(&w, 3.0, SegmentOffset::At(0), &mut rng).unwrap();
        assert_eq!(s.len(), 48000);
        assert_eq!(off, 0);
        assert_eq!(&s.samples[..], &w.samples[..48000]);

        let (_, o1) = slice_segment(&w, 3.0, SegmentOffset::Random, &mut rng).unwrap();
        let (_, o2) = slice_segment(&w, 3.0, SegmentOffset::Random, &mut rng).unwrap();
        assert_ne!(o1, o2, "two draws from an advancing rng landed identically");

        assert!(slice_segment(&w, 11.0, SegmentOffset::Random, &mut rng).is_err());
    }

    #[test]
    fn features_are_bit_deterministic() {
        let w = sine(440.0, 1.0, 16000);
        let p = FrameParams::default();
        let a = stft_log_magnitude(&w, &p).unwrap();
        let b = stft_log_magnitude(&w, &p).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
