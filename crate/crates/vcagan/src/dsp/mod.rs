//! Audio front-end and back-end: high-pass filtering, STFT, mel projection,
//! Griffin-Lim phase reconstruction and WAV/MELB file formats.

pub mod griffin_lim;
pub mod mel;
pub mod stft;
pub mod wav;

pub use griffin_lim::{griffin_lim, griffin_lim_with_trace};
pub use mel::{MelFilterbank, MelSpectrogram};
pub use stft::{istft, stft, LinearSpectrogram, StftPlan};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("invalid cutoff {cutoff} Hz for sample rate {sample_rate} Hz")]
    InvalidCutoff { cutoff: f64, sample_rate: u32 },
    #[error("signal must contain at least one sample")]
    EmptySignal,
    #[error("invalid framing: window {window}, hop {hop}")]
    BadFraming { window: usize, hop: usize },
    #[error("filterbank bins {fb_bins} do not match spectrogram bins {spec_bins}")]
    BinMismatch { fb_bins: usize, spec_bins: usize },
    #[error("griffin-lim needs at least one iteration")]
    BadIterCount,
    #[error("malformed {format} file: {reason}")]
    Malformed { format: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono audio samples in [-1, 1] plus their rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0);
        Waveform { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// Window/hop profiles keeping mel frames at 4x the video frame rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpsProfile {
    Fps25,
    Fps30,
}

impl FpsProfile {
    pub fn window(self) -> usize {
        match self {
            FpsProfile::Fps25 => 640,
            FpsProfile::Fps30 => 532,
        }
    }

    pub fn hop(self) -> usize {
        match self {
            FpsProfile::Fps25 => 160,
            FpsProfile::Fps30 => 133,
        }
    }

    pub fn fps(self) -> u32 {
        match self {
            FpsProfile::Fps25 => 25,
            FpsProfile::Fps30 => 30,
        }
    }
}

/// One second-order section, transposed direct form II.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    /// RBJ cookbook high-pass section.
    fn highpass(cutoff: f64, sample_rate: f64, q: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * cutoff / sample_rate;
        let alpha = w0.sin() / (2.0 * q);
        let cosw = w0.cos();
        let a0 = 1.0 + alpha;
        Biquad {
            b0: (1.0 + cosw) / 2.0 / a0,
            b1: -(1.0 + cosw) / a0,
            b2: (1.0 + cosw) / 2.0 / a0,
            a1: -2.0 * cosw / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        x.iter()
            .map(|&v| {
                let y = self.b0 * v + s1;
                s1 = self.b1 * v - self.a1 * y + s2;
                s2 = self.b2 * v - self.a2 * y;
                y
            })
            .collect()
    }
}

/// Butterworth high-pass (two cascaded biquads) from zero initial state.
/// Causal and LTI, so a shifted input yields the identically shifted output.
pub fn highpass(w: &Waveform, cutoff: f64) -> Result<Waveform, DspError> {
    if !(cutoff > 0.0) || (w.sample_rate as f64) <= 2.0 * cutoff {
        return Err(DspError::InvalidCutoff { cutoff, sample_rate: w.sample_rate });
    }
    let fs = w.sample_rate as f64;
    // Butterworth Q pairs for a 4th-order cascade.
    let sec1 = Biquad::highpass(cutoff, fs, 0.541_196_100_146_197);
    let sec2 = Biquad::highpass(cutoff, fs, 1.306_562_964_876_377);
    let y = sec2.run(&sec1.run(&w.samples));
    Ok(Waveform::new(y, w.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, seconds: f64, sr: u32, amp: f64) -> Waveform {
        let n = (seconds * sr as f64) as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        Waveform::new(samples, sr)
    }

    #[test]
    fn zero_in_zero_out() {
        let w = Waveform::new(vec![0.0; 1600], 16000);
        let y = highpass(&w, 55.0).unwrap();
        assert!(y.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dc_is_heavily_attenuated() {
        let w = Waveform::new(vec![0.5; 16000], 16000);
        let y = highpass(&w, 55.0).unwrap();
        let ein: f64 = w.samples.iter().map(|v| v * v).sum();
        let eout: f64 = y.samples.iter().map(|v| v * v).sum();
        assert!(eout < 0.01 * ein, "DC energy ratio {}", eout / ein);
    }

    #[test]
    fn tone_at_440_passes_within_1db() {
        let w = sine(440.0, 1.0, 16000, 0.5);
        let y = highpass(&w, 55.0).unwrap();
        // skip the filter transient
        let rms = |s: &[f64]| (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt();
        let rin = rms(&w.samples[2000..]);
        let rout = rms(&y.samples[2000..]);
        let db = 20.0 * (rout / rin).log10();
        assert!(db.abs() < 1.0, "440 Hz gain {db} dB");
    }

    #[test]
    fn stopband_and_passband_spec() {
        // attenuation >= 20 dB through DC..20 Hz, ripple < 1 dB above 120 Hz
        for freq in [5.0, 10.0, 15.0, 20.0] {
            let w = sine(freq, 4.0, 16000, 0.5);
            let y = highpass(&w, 55.0).unwrap();
            let rms = |s: &[f64]| (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt();
            let db = 20.0 * (rms(&y.samples[32000..]) / rms(&w.samples[32000..])).log10();
            assert!(db <= -20.0, "{freq} Hz attenuated only {db} dB");
        }
        for freq in [120.0, 200.0, 1000.0, 4000.0] {
            let w = sine(freq, 2.0, 16000, 0.5);
            let y = highpass(&w, 55.0).unwrap();
            let rms = |s: &[f64]| (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt();
            let db = 20.0 * (rms(&y.samples[8000..]) / rms(&w.samples[8000..])).log10();
            assert!(db.abs() < 1.0, "{freq} Hz ripple {db} dB");
        }
    }

    #[test]
    fn shift_invariance_on_interior() {
        let mut rng = 7u64;
        let mut noise = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let x: Vec<f64> = (0..4000).map(|_| noise()).collect();
        let shift = 37;
        let mut shifted = vec![0.0; shift];
        shifted.extend_from_slice(&x);
        let y = highpass(&Waveform::new(x, 16000), 55.0).unwrap();
        let ys = highpass(&Waveform::new(shifted, 16000), 55.0).unwrap();
        for i in 0..y.len() {
            assert!((y.samples[i] - ys.samples[i + shift]).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_cutoff() {
        let w = Waveform::new(vec![0.0; 10], 16000);
        assert!(highpass(&w, -3.0).is_err());
        assert!(highpass(&w, 9000.0).is_err());
    }
}
