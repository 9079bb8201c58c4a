//! Mono WAV input and output.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use lipsam_core::signal::TimeSignal;

use crate::error::{AppError, AppResult};

fn wav_err(path: &Path) -> impl Fn(hound::Error) -> AppError + '_ {
    move |source| AppError::Wav { path: path.to_path_buf(), source }
}

/// Reads a mono file; integer samples are scaled to [-1, 1).
pub fn read_wav(path: &Path) -> AppResult<TimeSignal> {
    let mut reader = WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AppError::usage(format!("{}: expected mono audio, found {} channels", path.display(), spec.channels)));
    }
    let samples: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>(),
        SampleFormat::Int => {
            let full = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader.samples::<i32>().map(|s| s.map(|v| v as f64 / full)).collect::<Result<_, _>>()
        }
    }
    .map_err(wav_err(path))?;
    Ok(TimeSignal::new(samples, spec.sample_rate)?)
}

/// Writes 32-bit float mono audio.
pub fn write_wav(path: &Path, signal: &TimeSignal) -> AppResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate(),
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err(path))?;
    for &s in signal.samples() {
        writer.write_sample(s as f32).map_err(wav_err(path))?;
    }
    writer.finalize().map_err(wav_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let sig = TimeSignal::new(vec![0.0, 0.25, -0.5, 0.125], 8000).unwrap();
        write_wav(&path, &sig).unwrap();
        assert_eq!(read_wav(&path).unwrap(), sig);
    }

    #[test]
    fn integer_files_are_scaled_and_stereo_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.wav");
        let spec = WavSpec { channels: 1, sample_rate: 16000, bits_per_sample: 16, sample_format: SampleFormat::Int };
        let mut w = WavWriter::create(&path, spec).unwrap();
        for v in [0i16, 16384, -32768] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let sig = read_wav(&path).unwrap();
        assert_eq!(sig.samples(), &[0.0, 0.5, -1.0]);
        assert_eq!(sig.sample_rate(), 16000);

        let stereo = dir.path().join("s.wav");
        let mut w = WavWriter::create(&stereo, WavSpec { channels: 2, ..spec }).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&stereo), Err(AppError::Usage(_))));
    }
}
