//! 16-bit PCM mono little-endian RIFF read/write.

use super::{DspError, Waveform};
use std::io::{Read, Write};
use std::path::Path;

fn bad(reason: impl Into<String>) -> DspError {
    DspError::Malformed { format: "WAV", reason: reason.into() }
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<(), DspError> {
    let n = w.samples.len();
    let data_len = (n * 2) as u32;
    let mut buf = Vec::with_capacity(44 + n * 2);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&w.sample_rate.to_le_bytes());
    buf.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    buf.extend_from_slice(&2u16.to_le_bytes());
    buf.extend_from_slice(&16u16.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round() as i32;
        let q = q.clamp(-32768, 32767) as i16;
        buf.extend_from_slice(&q.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform, DspError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(bad("shorter than RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("missing RIFF/WAVE magic"));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(bad("chunk overruns file"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(bad("fmt chunk too small"));
                }
                let u16at =
                    |o: usize| u16::from_le_bytes(bytes[body_start + o..body_start + o + 2].try_into().unwrap());
                let u32at =
                    |o: usize| u32::from_le_bytes(bytes[body_start + o..body_start + o + 4].try_into().unwrap());
                fmt = Some((u16at(0), u16at(2), u32at(4), u16at(14)));
            }
            b"data" => data = Some(&bytes[body_start..body_start + size]),
            _ => {}
        }
        pos = body_start + size + (size & 1); // chunks are word-aligned
    }
    let (codec, channels, sample_rate, bits) = fmt.ok_or_else(|| bad("no fmt chunk"))?;
    if codec != 1 {
        return Err(bad(format!("unsupported encoding {codec}, want PCM")));
    }
    if channels != 1 {
        return Err(bad(format!("unsupported channel count {channels}, want mono")));
    }
    if bits != 16 {
        return Err(bad(format!("unsupported bit depth {bits}, want 16")));
    }
    let data = data.ok_or_else(|| bad("no data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(bad("odd data length"));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Ok(Waveform::new(samples, sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let mut state = 99u64;
        let samples: Vec<f64> = (0..3000)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(7);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        let w = Waveform::new(samples, 16000);
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16000);
        assert_eq!(back.len(), w.len());
        let max_diff = w
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1.0 / 32768.0, "max diff {max_diff}");
    }

    #[test]
    fn empty_file_is_a_header_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.wav");
        std::fs::write(&path, b"").unwrap();
        assert!(matches!(read_wav(&path), Err(DspError::Malformed { .. })));
    }

    #[test]
    fn non_pcm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let w = Waveform::new(vec![0.1; 64], 16000);
        write_wav(&path, &w).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[20] = 3; // IEEE float codec id
        std::fs::write(&path, &bytes).unwrap();
        let err = read_wav(&path).unwrap_err();
        assert!(err.to_string().contains("unsupported encoding"));
    }
}
