use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use super::resample::resample;
use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 24_000;

/// Mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidWaveform("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidWaveform("no samples".into()));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidWaveform(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples `start..start+len`.
    pub fn segment(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.samples.len() {
            return Err(Error::InvalidArgument(format!(
                "segment {start}..{} outside {} samples",
                start + len,
                self.samples.len()
            )));
        }
        Self::new(self.samples[start..start + len].to_vec(), self.sample_rate)
    }

    pub fn resampled(&self, rate: u32) -> Result<Self> {
        if rate == self.sample_rate {
            return Ok(self.clone());
        }
        Self::new(resample(&self.samples, self.sample_rate, rate), rate)
    }
}

/// Reads a mono WAV. With `target_rate`, other rates are resampled on load;
/// without it they are returned as-is.
pub fn read_wav(path: impl AsRef<Path>, target_rate: Option<u32>) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::InvalidWaveform(format!("{} channels; only mono is supported", spec.channels)));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits) if bits <= 16 => {
            let scale = (1i64 << (bits - 1)) as f64;
            reader.samples::<i16>().map(|s| s.map(|v| v as f64 / scale)).collect::<Result<_, _>>()?
        }
        (SampleFormat::Int, bits) => {
            let scale = (1i64 << (bits - 1)) as f64;
            reader.samples::<i32>().map(|s| s.map(|v| v as f64 / scale)).collect::<Result<_, _>>()?
        }
        (SampleFormat::Float, _) => reader.samples::<f32>().map(|s| s.map(|v| v as f64)).collect::<Result<_, _>>()?,
    };
    let wave = Waveform::new(samples, spec.sample_rate)?;
    match target_rate {
        Some(rate) => wave.resampled(rate),
        None => Ok(wave),
    }
}

/// Writes 16-bit PCM mono. Samples are clipped to the representable range.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    for &x in &wave.samples {
        writer.write_sample(pcm16(x))?;
    }
    writer.finalize()?;
    Ok(())
}

/// The 16-bit code `write_wav` stores for `x`.
pub fn pcm16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}
