//! Mono WAV I/O (16-bit PCM and float32) via hound.

use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Wav(format!(
            "{}: expected mono, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?,
        (fmt, bits) => {
            return Err(Error::Wav(format!(
                "{}: unsupported format {fmt:?}/{bits}-bit (want 16-bit PCM or float32)",
                path.display()
            )))
        }
    };
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Writes 16-bit PCM; samples are clamped to [-1, 1).
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 32767.0 / 32768.0) * 32768.0).round() as i16;
        writer.write_sample(v).map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    }
    writer.finalize().map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    Ok(())
}
