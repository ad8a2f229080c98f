//! Mel filterbank, log-mel spectrograms and the MELB interchange format.

use super::{DspError, LinearSpectrogram};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

/// Log floor applied before compression.
pub const LOG_FLOOR: f64 = 1e-5;
/// Log-domain range mapped onto [-1, 1] for GAN training.
pub const LOG_LO: f64 = -11.512925464970229; // ln(1e-5)
pub const LOG_HI: f64 = 4.605170185988092; // ln(100)

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10.0f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters, peak-normalized to 1.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// [n_mels, bins], non-negative, each row unimodal.
    pub weights: Tensor,
    pub f_min: f64,
    pub f_max: f64,
    pub sample_rate: u32,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, window: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Self {
        let bins = window / 2 + 1;
        let mel_lo = hz_to_mel(f_min);
        let mel_hi = hz_to_mel(f_max);
        let centers: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_mels * bins];
        for m in 0..n_mels {
            let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
            for k in 0..bins {
                let f = k as f64 * sample_rate as f64 / window as f64;
                let w = if f <= lo || f >= hi {
                    0.0
                } else if f <= mid {
                    (f - lo) / (mid - lo)
                } else {
                    (hi - f) / (hi - mid)
                };
                weights[m * bins + k] = w.max(0.0);
            }
        }
        MelFilterbank {
            weights: Tensor::new(vec![n_mels, bins], weights),
            f_min,
            f_max,
            sample_rate,
        }
    }

    pub fn n_mels(&self) -> usize {
        self.weights.shape[0]
    }

    pub fn bins(&self) -> usize {
        self.weights.shape[1]
    }
}

/// Log-compressed mel magnitudes, [n_mels, frames].
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// ln(max(filterbank * mags, LOG_FLOOR)), row-major [n_mels, frames].
    pub values: Tensor,
    pub frame_hop: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.values.shape[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape[1]
    }

    /// Affine map of the log values onto [-1, 1] (clamped).
    pub fn to_unit(&self) -> Tensor {
        let data = self
            .values
            .data
            .iter()
            .map(|&v| ((v - LOG_LO) / (LOG_HI - LOG_LO) * 2.0 - 1.0).clamp(-1.0, 1.0))
            .collect();
        Tensor::new(self.values.shape.clone(), data)
    }

    /// Inverse of `to_unit`.
    pub fn from_unit(unit: &Tensor, frame_hop: usize, sample_rate: u32) -> Self {
        let data = unit
            .data
            .iter()
            .map(|&v| (v.clamp(-1.0, 1.0) + 1.0) / 2.0 * (LOG_HI - LOG_LO) + LOG_LO)
            .collect();
        MelSpectrogram {
            values: Tensor::new(unit.shape.clone(), data),
            frame_hop,
            sample_rate,
        }
    }

    /// Linear-domain mel magnitudes (exp of the log values).
    pub fn linear(&self) -> Tensor {
        let data = self.values.data.iter().map(|&v| v.exp()).collect();
        Tensor::new(self.values.shape.clone(), data)
    }
}

/// values = ln(max(fb * mags, LOG_FLOOR))
pub fn mel_project(
    spec: &LinearSpectrogram,
    fb: &MelFilterbank,
) -> Result<MelSpectrogram, DspError> {
    if fb.bins() != spec.bins() {
        return Err(DspError::BinMismatch { fb_bins: fb.bins(), spec_bins: spec.bins() });
    }
    let (n_mels, bins, frames) = (fb.n_mels(), fb.bins(), spec.frames());
    let mut out = vec![0.0; n_mels * frames];
    for m in 0..n_mels {
        let wrow = &fb.weights.data[m * bins..(m + 1) * bins];
        let orow = &mut out[m * frames..(m + 1) * frames];
        for (k, &w) in wrow.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let srow = &spec.mags.data[k * frames..(k + 1) * frames];
            for (o, &s) in orow.iter_mut().zip(srow) {
                *o += w * s;
            }
        }
        for o in orow.iter_mut() {
            *o = o.max(LOG_FLOOR).ln();
        }
    }
    Ok(MelSpectrogram {
        values: Tensor::new(vec![n_mels, frames], out),
        frame_hop: spec.hop,
        sample_rate: spec.sample_rate,
    })
}

// ---------------------------------------------------------------------------
// MELB: magic `MELB`, u32 version=1, u32 F, u32 L, u32 hop, u32 sr,
// then F*L little-endian f32, row-major.
// ---------------------------------------------------------------------------

pub fn write_melb(path: &Path, mel: &MelSpectrogram) -> Result<(), DspError> {
    let mut buf = Vec::with_capacity(24 + mel.values.numel() * 4);
    buf.extend_from_slice(b"MELB");
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(mel.n_mels() as u32).to_le_bytes());
    buf.extend_from_slice(&(mel.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(mel.frame_hop as u32).to_le_bytes());
    buf.extend_from_slice(&mel.sample_rate.to_le_bytes());
    for &v in &mel.values.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_melb(path: &Path) -> Result<MelSpectrogram, DspError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |reason: &str| DspError::Malformed { format: "MELB", reason: reason.to_string() };
    if bytes.len() < 24 {
        return Err(bad("shorter than header"));
    }
    if &bytes[0..4] != b"MELB" {
        return Err(bad("missing MELB magic"));
    }
    let u32at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32at(4);
    if version != 1 {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let f = u32at(8) as usize;
    let l = u32at(12) as usize;
    let hop = u32at(16) as usize;
    let sr = u32at(20);
    let need = 24 + f * l * 4;
    if bytes.len() != need {
        return Err(bad(&format!("expected {need} bytes, found {}", bytes.len())));
    }
    let mut data = Vec::with_capacity(f * l);
    for i in 0..f * l {
        let o = 24 + i * 4;
        data.push(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64);
    }
    Ok(MelSpectrogram {
        values: Tensor::new(vec![f, l], data),
        frame_hop: hop,
        sample_rate: sr,
    })
}

/// Frame-major CSV (one row per frame) for quick inspection.
pub fn write_mel_csv(path: &Path, mel: &MelSpectrogram) -> Result<(), DspError> {
    let (f, l) = (mel.n_mels(), mel.frames());
    let mut out = String::new();
    for frame in 0..l {
        for m in 0..f {
            if m > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:.6}", mel.values.data[m * l + frame]));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::stft;

    #[test]
    fn filterbank_rows_are_unimodal_and_cover_band() {
        let fb = MelFilterbank::new(80, 640, 16000, 55.0, 8000.0);
        let (n_mels, bins) = (fb.n_mels(), fb.bins());
        for m in 0..n_mels {
            let row = &fb.weights.data[m * bins..(m + 1) * bins];
            assert!(row.iter().all(|&w| w >= 0.0));
            // unimodal: rises then falls
            let peak = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            for k in 1..=peak {
                assert!(row[k] >= row[k - 1] - 1e-12, "row {m} dips before peak");
            }
            for k in peak + 1..bins {
                assert!(row[k] <= row[k - 1] + 1e-12, "row {m} rises after peak");
            }
            assert!(row.iter().any(|&w| w > 0.0), "row {m} is all zero");
        }
        // every bin strictly inside (f_min, f_max) is covered by some filter
        for k in 0..bins {
            let f = k as f64 * 16000.0 / 640.0;
            if f > 75.0 && f < 7900.0 {
                let covered = (0..n_mels).any(|m| fb.weights.data[m * bins + k] > 0.0);
                assert!(covered, "bin {k} ({f} Hz) uncovered");
            }
        }
    }

    #[test]
    fn zero_magnitudes_hit_the_log_floor() {
        let fb = MelFilterbank::new(80, 640, 16000, 55.0, 8000.0);
        let spec = LinearSpectrogram {
            mags: Tensor::zeros(&[321, 8]),
            window: 640,
            hop: 160,
            sample_rate: 16000,
        };
        let mel = mel_project(&spec, &fb).unwrap();
        assert_eq!(mel.n_mels(), 80);
        assert!(mel.values.data.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn impulse_bin_lights_only_covering_rows() {
        let fb = MelFilterbank::new(80, 640, 16000, 55.0, 8000.0);
        let bins = fb.bins();
        let hot = 40usize; // 1 kHz
        let mut mags = Tensor::zeros(&[bins, 1]);
        mags.data[hot] = 3.0;
        let spec = LinearSpectrogram { mags, window: 640, hop: 160, sample_rate: 16000 };
        let mel = mel_project(&spec, &fb).unwrap();
        let floor = LOG_FLOOR.ln();
        for m in 0..80 {
            let lit = mel.values.data[m] > floor + 1e-9;
            let covers = fb.weights.data[m * bins + hot] > 0.0;
            assert_eq!(lit, covers, "row {m}");
        }
    }

    #[test]
    fn bin_mismatch_is_an_error() {
        let fb = MelFilterbank::new(80, 512, 16000, 55.0, 8000.0);
        let spec = LinearSpectrogram {
            mags: Tensor::zeros(&[321, 4]),
            window: 640,
            hop: 160,
            sample_rate: 16000,
        };
        assert!(matches!(mel_project(&spec, &fb), Err(DspError::BinMismatch { .. })));
    }

    #[test]
    fn canonical_pipeline_emits_4t_frames() {
        let t_frames = 16usize;
        let samples: Vec<f64> = (0..640 * t_frames).map(|i| (i as f64 * 0.05).sin() * 0.3).collect();
        let (spec, _) = stft(&samples, 640, 160, 16000).unwrap();
        let fb = MelFilterbank::new(80, 640, 16000, 55.0, 8000.0);
        let mel = mel_project(&spec, &fb).unwrap();
        assert_eq!(mel.n_mels(), 80);
        assert_eq!(mel.frames(), 4 * t_frames);
    }

    #[test]
    fn melb_roundtrip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.melb");
        let vals: Vec<f64> = (0..80 * 12).map(|i| ((i as f32) * 0.37_f32).sin() as f64).collect();
        let mel = MelSpectrogram {
            values: Tensor::new(vec![80, 12], vals),
            frame_hop: 160,
            sample_rate: 16000,
        };
        write_melb(&path, &mel).unwrap();
        let back = read_melb(&path).unwrap();
        assert_eq!(back.frame_hop, 160);
        assert_eq!(back.sample_rate, 16000);
        for (a, b) in mel.values.data.iter().zip(&back.values.data) {
            assert_eq!(*a as f32, *b as f32);
        }
        // a second write of the same data is byte-identical
        let path2 = dir.path().join("b.melb");
        write_melb(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn unit_mapping_roundtrips_inside_range() {
        let vals = vec![-11.0, -5.0, 0.0, 4.0];
        let mel = MelSpectrogram {
            values: Tensor::new(vec![4, 1], vals.clone()),
            frame_hop: 160,
            sample_rate: 16000,
        };
        let unit = mel.to_unit();
        assert!(unit.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let back = MelSpectrogram::from_unit(&unit, 160, 16000);
        for (a, b) in vals.iter().zip(&back.values.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
