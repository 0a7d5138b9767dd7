use std::path::Path;

use crate::encoder::SAMPLE_RATE;
use crate::error::{Error, Result};

/// Reads 16-bit PCM mono audio at 16 kHz as floats in [-1, 1).
pub fn read_wav(path: &Path) -> Result<Vec<f32>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.sample_rate != SAMPLE_RATE
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::InvalidInput(format!(
            "{}: expected 16 kHz mono 16-bit PCM, found {spec:?}",
            path.display()
        )));
    }
    reader
        .samples::<i16>()
        .map(|s| Ok(s? as f32 / 32768.0))
        .collect()
}

pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(quantize_sample(s))?;
    }
    w.finalize()?;
    Ok(())
}

fn quantize_sample(s: f32) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// The value a sample takes after a 16-bit PCM round trip.
pub fn pcm16_round_trip(s: f32) -> f32 {
    quantize_sample(s) as f32 / 32768.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_matches_pcm_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x: Vec<f32> = (0..1000).map(|i| ((i as f32) * 0.01).sin() * 0.7).collect();
        write_wav(&p, &x).unwrap();
        let y = read_wav(&p).unwrap();
        assert_eq!(y.len(), x.len());
        for (a, b) in x.iter().zip(&y) {
            assert_eq!(pcm16_round_trip(*a), *b);
        }
    }
}
