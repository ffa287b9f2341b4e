//! Mono waveforms, WAV I/O and segment energy.

use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("malformed WAV file: {0}")]
    MalformedWav(String),
    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("segment [{start}, {start}+{length}) out of bounds for {len} samples")]
    OutOfBounds {
        start: usize,
        length: usize,
        len: usize,
    },
    #[error("sample {index} is not finite")]
    NonFinite { index: usize },
    #[error("waveform has no samples")]
    Empty,
    #[error("sample rate must be positive")]
    InvalidSampleRate,
}

/// Mono signal with nominal amplitude range `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

/// Half-open sample range `[start, start + length)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub length: usize,
}

impl Segment {
    pub fn new(start: usize, length: usize) -> Self {
        Self { start, length }
    }

    pub fn end(&self) -> usize {
        self.start + self.length
    }

    fn check(&self, len: usize) -> Result<(), SignalError> {
        if self.length == 0 || self.start.checked_add(self.length).is_none_or(|e| e > len) {
            return Err(SignalError::OutOfBounds {
                start: self.start,
                length: self.length,
                len,
            });
        }
        Ok(())
    }
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, SignalError> {
        if samples.is_empty() {
            return Err(SignalError::Empty);
        }
        if sample_rate == 0 {
            return Err(SignalError::InvalidSampleRate);
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn full(&self) -> Segment {
        Segment::new(0, self.len())
    }

    pub fn slice(&self, s: Segment) -> Result<&[f64], SignalError> {
        s.check(self.len())?;
        Ok(&self.samples[s.start..s.end()])
    }

    pub(crate) fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }
}

/// Mean power of `samples`.
pub fn mean_power(samples: &[f64]) -> f64 {
    samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64
}

/// Mean power `(1/len)·Σ x[n]²` over the segment.
pub fn segment_energy(w: &Waveform, s: Segment) -> Result<f64, SignalError> {
    Ok(mean_power(w.slice(s)?))
}

pub fn extract_segment(w: &Waveform, s: Segment) -> Result<Waveform, SignalError> {
    Ok(Waveform {
        samples: w.slice(s)?.to_vec(),
        sample_rate: w.sample_rate,
    })
}

fn map_hound(e: hound::Error) -> SignalError {
    match e {
        // hound reports short reads as `Other`.
        hound::Error::IoError(io) if matches!(io.kind(), io::ErrorKind::UnexpectedEof | io::ErrorKind::Other) => {
            SignalError::MalformedWav(format!("unexpected end of file ({io})"))
        }
        hound::Error::IoError(io) => SignalError::Io(io),
        hound::Error::FormatError(m) => SignalError::MalformedWav(m.into()),
        hound::Error::Unsupported => SignalError::UnsupportedEncoding("format tag or layout".into()),
        hound::Error::TooWide => SignalError::UnsupportedEncoding("sample width".into()),
        hound::Error::InvalidSampleFormat => SignalError::UnsupportedEncoding("sample format".into()),
        hound::Error::UnfinishedSample => SignalError::MalformedWav("truncated sample".into()),
    }
}

/// Reads PCM integer or IEEE-float WAV data, averaging channels to mono.
/// Integer samples are divided by `2^(bits-1)`.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform, SignalError> {
    let file = std::fs::File::open(path.as_ref())?;
    let reader = hound::WavReader::new(io::BufReader::new(file)).map_err(map_hound)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(SignalError::MalformedWav("zero channels".into()));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let full_scale = f64::from(1u32 << (spec.bits_per_sample - 1));
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) / full_scale))
                .collect::<Result<_, _>>()
                .map_err(map_hound)?
        }
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(SignalError::UnsupportedEncoding(format!(
                    "{}-bit float",
                    spec.bits_per_sample
                )));
            }
            reader
                .into_samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<Result<_, _>>()
                .map_err(map_hound)?
        }
    };
    if interleaved.len() % channels != 0 {
        return Err(SignalError::MalformedWav("partial frame at end of data".into()));
    }
    let mono = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(mono, spec.sample_rate).map_err(|e| match e {
        SignalError::Empty => SignalError::MalformedWav("no audio frames".into()),
        other => other,
    })
}

/// Writes 16-bit mono PCM. Samples are scaled by 2^15 and clipped to the
/// representable range, so the round trip error is at most 2^-15.
pub fn save_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<(), SignalError> {
    if let Some(index) = w.samples.iter().position(|x| !x.is_finite()) {
        return Err(SignalError::NonFinite { index });
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(map_hound)?;
    for &x in &w.samples {
        let q = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(map_hound)?;
    }
    writer.finalize().map_err(map_hound)
}
