//! Parametric lip-video and formant-audio renderers plus the VID0 format.

use super::{viseme_of, DataError, Phoneme, TokenScript, VideoClip, FRAMES_PER_TOKEN};
use crate::dsp::Waveform;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const FRAME_H: usize = 32;
pub const FRAME_W: usize = 32;
pub const SAMPLE_RATE: u32 = 16000;
/// 640 samples per video frame at 25 fps / 16 kHz.
pub const SAMPLES_PER_FRAME: usize = 640;

/// Mouth-opening parameters per viseme: (open_h, open_w) as fractions of the
/// lip ellipse. Viseme 0 is closed lips.
const VISEME_SHAPES: [(f64, f64); 10] = [
    (0.00, 0.30), // 0: silence, closed
    (0.55, 0.45),
    (0.25, 0.80),
    (0.75, 0.35),
    (0.40, 0.60),
    (0.85, 0.70),
    (0.15, 0.50),
    (0.60, 0.85),
    (0.35, 0.35),
    (0.70, 0.55),
];

/// Per-phoneme formant pair (f1, f2) in Hz. Homophene partners share a viseme
/// but get clearly distinct formants. Silence has none.
const FORMANTS: [(f64, f64); 12] = [
    (0.0, 0.0),       // 0: silence
    (300.0, 2200.0),  // 1
    (350.0, 900.0),   // 2  (cue for 10)
    (500.0, 1500.0),  // 3  (cue for 11)
    (650.0, 1100.0),  // 4  (cue for 8)
    (400.0, 1800.0),  // 5  (cue for 9)
    (550.0, 2400.0),  // 6
    (700.0, 1900.0),  // 7
    (320.0, 1300.0),  // 8  homophene of 9
    (620.0, 2100.0),  // 9
    (280.0, 1700.0),  // 10 homophene of 11
    (760.0, 1250.0),  // 11
];

/// Articulation envelope across the four frames of a token.
const FRAME_ENVELOPE: [f64; FRAMES_PER_TOKEN] = [0.7, 1.0, 1.0, 0.7];

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Token-level jitter derived from the clip seed and token index only, never
/// from the phoneme, so homophene partners render pixel-identically.
fn token_jitter(seed: u64, token: usize) -> (f64, f64, f64) {
    let mut z = seed ^ (0xa076_1d64_78bd_642f_u64.wrapping_mul(token as u64 + 1));
    let mut next = || {
        z = (z ^ (z >> 33)).wrapping_mul(0xff51afd7ed558ccd);
        z ^= z >> 29;
        (z >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let dx = next() * 1.0; // pixels
    let dy = next() * 1.0;
    let gain = 1.0 + next() * 0.06;
    (dx, dy, gain)
}

/// Each phoneme renders a lip ellipse whose opening is set by its viseme
/// class, with small seeded jitter per token.
pub fn render_video(script: &TokenScript, seed: u64) -> VideoClip {
    let t_frames = script.video_frames();
    let mut data = vec![0.0f64; t_frames * FRAME_H * FRAME_W];
    for (tok_idx, &phoneme) in script.tokens.iter().enumerate() {
        let v = viseme_of(phoneme) as usize;
        let (open_h, open_w) = VISEME_SHAPES[v];
        let (dx, dy, gain) = token_jitter(seed, tok_idx);
        for f_in in 0..FRAMES_PER_TOKEN {
            let frame = tok_idx * FRAMES_PER_TOKEN + f_in;
            let env = FRAME_ENVELOPE[f_in];
            let cx = FRAME_W as f64 / 2.0 + dx;
            let cy = FRAME_H as f64 / 2.0 + dy;
            let lip_rx = 11.0;
            let lip_ry = 6.5;
            let open_rx = lip_rx * open_w;
            let open_ry = (lip_ry - 1.5) * open_h * env;
            let buf = &mut data[frame * FRAME_H * FRAME_W..(frame + 1) * FRAME_H * FRAME_W];
            for y in 0..FRAME_H {
                for x in 0..FRAME_W {
                    let nx = (x as f64 - cx) / lip_rx;
                    let ny = (y as f64 - cy) / lip_ry;
                    let lip_d = (nx * nx + ny * ny).sqrt();
                    // face, lip ring, then the dark mouth opening
                    let mut val = 0.15 + 0.65 * smoothstep(1.08, 0.92, lip_d);
                    if open_ry > 1e-6 {
                        let ox = (x as f64 - cx) / open_rx.max(1e-6);
                        let oy = (y as f64 - cy) / open_ry.max(1e-6);
                        let open_d = (ox * ox + oy * oy).sqrt();
                        let inside = smoothstep(1.1, 0.9, open_d);
                        val = val * (1.0 - inside) + 0.05 * inside;
                    }
                    buf[y * FRAME_W + x] = (val * gain).clamp(0.0, 1.0);
                }
            }
        }
    }
    VideoClip {
        frames: Tensor::new(vec![t_frames, FRAME_H, FRAME_W, 1], data),
        fps: 25,
    }
}

/// Each phoneme is a harmonic tone with energy shaped around its two
/// formants; token boundaries get a 10 ms raised-cosine ramp.
pub fn render_audio(script: &TokenScript, seed: u64) -> Waveform {
    let total = script.video_frames() * SAMPLES_PER_FRAME;
    let mut out = vec![0.0f64; total];
    let f0 = 120.0;
    let ramp = 160usize; // 10 ms
    for (tok_idx, &phoneme) in script.tokens.iter().enumerate() {
        if phoneme == Phoneme::SILENCE {
            continue;
        }
        let (f1, f2) = FORMANTS[phoneme.index()];
        let (_, _, gain_jit) = token_jitter(seed, tok_idx);
        let detune = 1.0 + (gain_jit - 1.0) * 0.2; // less than +-1%
        let start = tok_idx * FRAMES_PER_TOKEN * SAMPLES_PER_FRAME;
        let len = FRAMES_PER_TOKEN * SAMPLES_PER_FRAME;
        // harmonic amplitudes from the two formant, resonance-like bumps
        let n_harm = (3800.0 / f0) as usize;
        let amps: Vec<f64> = (1..=n_harm)
            .map(|h| {
                let f = f0 * h as f64 * detune;
                let a1 = (-((f - f1) / 90.0).powi(2)).exp();
                let a2 = 0.7 * (-((f - f2) / 130.0).powi(2)).exp();
                a1 + a2
            })
            .collect();
        let norm: f64 = amps.iter().sum::<f64>().max(1e-9);
        for n in 0..len {
            let t = n as f64 / SAMPLE_RATE as f64;
            let mut s = 0.0;
            for (h, &a) in amps.iter().enumerate() {
                if a < 1e-4 {
                    continue;
                }
                s += a * (2.0 * std::f64::consts::PI * f0 * (h + 1) as f64 * detune * t).sin();
            }
            let mut env = 1.0;
            if n < ramp {
                env *= 0.5 - 0.5 * (std::f64::consts::PI * (n as f64 / ramp as f64 + 1.0)).cos();
            }
            if n >= len - ramp {
                let m = (len - 1 - n) as f64 / ramp as f64;
                env *= 0.5 - 0.5 * (std::f64::consts::PI * (m + 1.0)).cos();
            }
            out[start + n] = 0.35 * env * s / norm;
        }
    }
    Waveform::new(out, SAMPLE_RATE)
}

// ---------------------------------------------------------------------------
// VID0: magic `VID0`, u32 T, H, W, C, then T*H*W*C u8 pixels.
// ---------------------------------------------------------------------------

pub fn write_vid0(path: &Path, clip: &VideoClip) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(20 + clip.frames.numel());
    buf.extend_from_slice(b"VID0");
    for dim in &clip.frames.shape {
        buf.extend_from_slice(&(*dim as u32).to_le_bytes());
    }
    for &v in &clip.frames.data {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_vid0(path: &Path) -> Result<VideoClip, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |reason: &str| {
        DataError::Dsp(crate::dsp::DspError::Malformed {
            format: "VID0",
            reason: reason.to_string(),
        })
    };
    if bytes.len() < 20 {
        return Err(bad("shorter than header"));
    }
    if &bytes[0..4] != b"VID0" {
        return Err(bad("missing VID0 magic"));
    }
    let u32at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (t, h, w, c) = (u32at(4), u32at(8), u32at(12), u32at(16));
    let need = 20 + t * h * w * c;
    if bytes.len() != need {
        return Err(bad(&format!("expected {need} bytes, found {}", bytes.len())));
    }
    let data = bytes[20..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(VideoClip {
        frames: Tensor::new(vec![t, h, w, c], data),
        fps: 25,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{homophene_pairs, sample_seed};

    fn script(tokens: &[u8]) -> TokenScript {
        TokenScript { tokens: tokens.iter().map(|&t| Phoneme(t)).collect() }
    }

    #[test]
    fn homophene_partners_render_identical_video() {
        for (a, b) in homophene_pairs() {
            let sa = script(&[4, 1, a.0, 6]);
            let sb = script(&[4, 1, b.0, 6]);
            let seed = sample_seed(33, 0);
            let va = render_video(&sa, seed);
            let vb = render_video(&sb, seed);
            assert_eq!(va.frames.data, vb.frames.data, "pair ({},{})", a.0, b.0);
            // ...but their audio differs audibly in the ambiguous segment
            let wa = render_audio(&sa, seed);
            let wb = render_audio(&sb, seed);
            let seg = 2 * FRAMES_PER_TOKEN * SAMPLES_PER_FRAME
                ..3 * FRAMES_PER_TOKEN * SAMPLES_PER_FRAME;
            let diff: f64 = wa.samples[seg.clone()]
                .iter()
                .zip(&wb.samples[seg])
                .map(|(x, y)| (x - y).abs())
                .sum();
            assert!(diff > 1.0, "audio too similar for pair ({},{})", a.0, b.0);
        }
    }

    #[test]
    fn silence_renders_closed_lips_and_near_zero_audio() {
        let s = script(&[0, 0, 0, 0]);
        let v = render_video(&s, 1);
        let w = render_audio(&s, 1);
        assert!(w.samples.iter().all(|&x| x.abs() < 1e-12));
        // closed lips: the darkest mouth-opening pixels never appear
        assert!(v.frames.data.iter().all(|&p| p > 0.04 + 0.02));
    }

    #[test]
    fn rendering_is_deterministic_and_jitter_varies_by_token() {
        let s = script(&[1, 4, 1, 8]);
        let a = render_video(&s, 9);
        let b = render_video(&s, 9);
        assert_eq!(a.frames.data, b.frames.data);
        // same phoneme at different token slots should not be pixel-identical
        let fr0 = &a.frames.data[0..FRAME_H * FRAME_W];
        let fr8 = &a.frames.data[8 * FRAME_H * FRAME_W..9 * FRAME_H * FRAME_W];
        assert_ne!(fr0, fr8);
    }

    #[test]
    fn audio_stays_in_range() {
        let s = script(&[7, 5, 3, 11]);
        let w = render_audio(&s, 17);
        assert!(w.rms() <= 1.0);
        assert!(w.samples.iter().all(|&x| x.abs() <= 1.0));
        assert!(w.rms() > 0.01);
    }

    #[test]
    fn vid0_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.vid0");
        let s = script(&[1, 2, 10, 6]);
        let clip = render_video(&s, 3);
        write_vid0(&path, &clip).unwrap();
        let back = read_vid0(&path).unwrap();
        assert_eq!(back.frames.shape, clip.frames.shape);
        let max_diff = clip.frames.max_abs_diff(&back.frames);
        assert!(max_diff <= 0.5 / 255.0 + 1e-12, "max diff {max_diff}");
        // second write is byte-identical
        let path2 = dir.path().join("clip2.vid0");
        write_vid0(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
