use std::io::Cursor;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

use super::resample;

pub const CANONICAL_SAMPLE_RATE: u32 = 22_050;

/// Mono audio in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
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

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        (sum / self.samples.len() as f64).sqrt()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    pub fn slice(&self, start: usize, end: usize) -> Waveform {
        Waveform::new(self.samples[start..end].to_vec(), self.sample_rate)
    }
}

fn map_hound(err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::Io(e),
        hound::Error::Unsupported => Error::UnsupportedFormat("unsupported WAV encoding".into()),
        hound::Error::TooWide => Error::UnsupportedFormat("sample width too large".into()),
        hound::Error::InvalidSampleFormat => {
            Error::UnsupportedFormat("invalid sample format".into())
        }
        other => Error::CorruptFile(other.to_string()),
    }
}

fn read_samples<R: std::io::Read>(reader: WavReader<R>) -> Result<Waveform> {
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(Error::UnsupportedFormat(format!(
            "{} channels",
            spec.channels
        )));
    }
    if spec.sample_rate == 0 {
        return Err(Error::CorruptFile("zero sample rate".into()));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v.clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!("{fmt:?} {bits}-bit")));
        }
    };
    let channels = spec.channels as usize;
    if interleaved.len() % channels != 0 {
        return Err(Error::CorruptFile("truncated sample frame".into()));
    }
    let samples: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|c| c.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    if samples.is_empty() {
        return Err(Error::CorruptFile("no samples".into()));
    }
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Reads a PCM16 or float32 WAV file, averaging stereo to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(map_hound)?;
    read_samples(reader)
}

pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    let reader = WavReader::new(Cursor::new(bytes)).map_err(map_hound)?;
    read_samples(reader)
}

fn write_pcm16<W: std::io::Write + std::io::Seek>(w: &Waveform, sink: W) -> Result<()> {
    let canonical;
    let w = if w.sample_rate == CANONICAL_SAMPLE_RATE {
        w
    } else {
        canonical = resample(w, CANONICAL_SAMPLE_RATE);
        &canonical
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate: CANONICAL_SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::new(sink, spec).map_err(map_hound)?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(map_hound)?;
    }
    writer.finalize().map_err(map_hound)?;
    Ok(())
}

/// Writes mono PCM16 at 22 050 Hz, resampling first if needed.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_pcm16(w, file)
}

pub fn encode_wav(w: &Waveform) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    write_pcm16(w, &mut buf)?;
    Ok(buf.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw_i16(path: &Path, rate: u32, channels: u16, data: &[i16]) {
        let spec = WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(path, spec).unwrap();
        for &s in data {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn silent_pcm16_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.wav");
        write_raw_i16(&path, 16_000, 1, &vec![0; 16_000]);
        let w = load_wav(&path).unwrap();
        assert_eq!(w.sample_rate, 16_000);
        assert_eq!(w.len(), 16_000);
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_pcm16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wav");
        write_raw_i16(&path, 22_050, 1, &[32767; 100]);
        let w = load_wav(&path).unwrap();
        let expected = 32767.0f32 / 32768.0;
        assert!(w.samples.iter().all(|&s| s == expected));
        assert!((expected - 0.99997).abs() < 1e-5);
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let data: Vec<i16> = (0..200).map(|i| if i % 2 == 0 { 16384 } else { -16384 }).collect();
        write_raw_i16(&path, 22_050, 2, &data);
        let w = load_wav(&path).unwrap();
        assert_eq!(w.len(), 100);
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn float32_is_read() {
        let spec = WavSpec {
            channels: 1,
            sample_rate: 8_000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut buf = Cursor::new(Vec::new());
        {
            let mut w = WavWriter::new(&mut buf, spec).unwrap();
            for s in [0.25f32, -0.5, 0.75] {
                w.write_sample(s).unwrap();
            }
            w.finalize().unwrap();
        }
        let w = decode_wav(buf.get_ref()).unwrap();
        assert_eq!(w.samples, vec![0.25, -0.5, 0.75]);
    }

    #[test]
    fn rejects_garbage_and_8bit() {
        assert!(matches!(
            decode_wav(b"definitely not a wav file"),
            Err(Error::CorruptFile(_)) | Err(Error::UnsupportedFormat(_))
        ));
        let spec = WavSpec {
            channels: 1,
            sample_rate: 8_000,
            bits_per_sample: 8,
            sample_format: SampleFormat::Int,
        };
        let mut buf = Cursor::new(Vec::new());
        {
            let mut w = WavWriter::new(&mut buf, spec).unwrap();
            w.write_sample(3i8).unwrap();
            w.finalize().unwrap();
        }
        assert!(matches!(
            decode_wav(buf.get_ref()),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn encode_emits_canonical_rate() {
        let w = Waveform::new(vec![0.1; 1600], 16_000);
        let back = decode_wav(&encode_wav(&w).unwrap()).unwrap();
        assert_eq!(back.sample_rate, CANONICAL_SAMPLE_RATE);
        assert_eq!(back.len(), 2205);
    }
}
