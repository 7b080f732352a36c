use std::path::Path;

use trimodal_core::dsp::Waveform;

use crate::error::{CliError, Result};

/// Mono 16-bit PCM only.
pub fn read(path: &Path) -> Result<Waveform> {
    let mut r = hound::WavReader::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(CliError::Data(format!(
            "{}: need mono 16-bit PCM, got {} channel(s) at {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| f32::from(v) / 32767.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(Waveform::new(samples, spec.sample_rate)?)
}

pub fn write(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let fail = |e: hound::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut out = hound::WavWriter::create(path, spec).map_err(fail)?;
    for &s in &w.samples {
        out.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(fail)?;
    }
    out.finalize().map_err(fail)
}
