//! Post-hoc measurement: synchronization scores, mel fidelity, a
//! template-matching token-recovery oracle, and artifact export.

use crate::data::{Corpus, DataError, Phoneme, Split, FRAMES_PER_TOKEN, NUM_PHONEMES};
use crate::dsp::{self, mel::MelSpectrogram, DspError};
use crate::model::{layers::Binding, Model, ModelError};
use crate::tensor::{Tape, Tensor};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("offset range {max_offset} does not fit a {t}-frame sequence")]
    OffsetTooLarge { max_offset: usize, t: usize },
    #[error("phoneme template set incomplete: missing {missing:?}")]
    IncompleteTemplates { missing: Vec<u8> },
    #[error("mel length {got} is not a multiple of the token span {span}")]
    BadSegmentation { got: usize, span: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// synchronization scoring
// ---------------------------------------------------------------------------

/// Offset-sweep synchronization scores.
///
/// d(o) is the mean frame-wise Euclidean distance between visual features and
/// audio features shifted by o. lse_d = d(0); lse_c is the median over short
/// probe windows of (mean_o d(o) - min_o d(o)).
#[derive(Debug, Clone, Copy)]
pub struct SyncScores {
    pub lse_d: f64,
    pub lse_c: f64,
    /// Offset attaining the minimum distance over the full clip.
    pub best_offset: isize,
}

const PROBE_WINDOW: usize = 5;

fn frame_dist(f_v: &Tensor, f_a: &Tensor, tv: usize, ta: usize) -> f64 {
    let d = f_v.shape[1];
    let mut acc = 0.0;
    for k in 0..d {
        let diff = f_v.data[tv * d + k] - f_a.data[ta * d + k];
        acc += diff * diff;
    }
    acc.sqrt()
}

/// Mean distance at every offset in [-max_offset, +max_offset].
fn offset_profile(
    f_v: &Tensor,
    f_a: &Tensor,
    range: std::ops::Range<usize>,
    max_offset: usize,
) -> Vec<f64> {
    let t = f_v.shape[0];
    (-(max_offset as isize)..=max_offset as isize)
        .map(|o| {
            let mut acc = 0.0;
            let mut n = 0usize;
            for tv in range.clone() {
                let ta = tv as isize + o;
                if ta >= 0 && (ta as usize) < t {
                    acc += frame_dist(f_v, f_a, tv, ta as usize);
                    n += 1;
                }
            }
            if n == 0 {
                f64::INFINITY
            } else {
                acc / n as f64
            }
        })
        .collect()
}

/// Scores for one (clip features, mel features) pair. Features must be
/// frame-aligned [T, D] sequences from the trained encoders.
pub fn sync_scores(f_v: &Tensor, f_a: &Tensor, max_offset: usize) -> Result<SyncScores, EvalError> {
    assert_eq!(f_v.shape, f_a.shape, "encoders must emit matching [T, D]");
    let t = f_v.shape[0];
    if max_offset >= t {
        return Err(EvalError::OffsetTooLarge { max_offset, t });
    }
    let profile = offset_profile(f_v, f_a, 0..t, max_offset);
    let lse_d = profile[max_offset]; // offset 0
    let best = profile
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i as isize - max_offset as isize)
        .unwrap_or(0);
    // confidence: per probe window, how much the best offset stands out
    let mut confidences = Vec::new();
    let probe = PROBE_WINDOW.min(t);
    for start in 0..=t - probe {
        let p = offset_profile(f_v, f_a, start..start + probe, max_offset);
        let finite: Vec<f64> = p.into_iter().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            continue;
        }
        let mean = finite.iter().sum::<f64>() / finite.len() as f64;
        let min = finite.iter().cloned().fold(f64::INFINITY, f64::min);
        confidences.push(mean - min);
    }
    confidences.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lse_c = if confidences.is_empty() {
        0.0
    } else {
        confidences[confidences.len() / 2]
    };
    Ok(SyncScores { lse_d, lse_c, best_offset: best })
}

/// Run both encoders of `model` on (clip, unit-range mel) and score them.
pub fn model_sync_scores(
    model: &Model,
    clip: &crate::data::VideoClip,
    mel_unit: &Tensor,
    max_offset: usize,
) -> Result<SyncScores, EvalError> {
    let mut tape = Tape::new();
    let bind = model.bind_frozen(&mut tape);
    let frames = tape.constant(&clip.frames);
    let f_v = model.phi_v.forward(&mut tape, &bind, frames)?;
    let mel = tape.constant(mel_unit);
    let f_a = model.phi_a.forward(&mut tape, &bind, mel)?;
    let fv = tape.to_tensor(f_v);
    let fa = tape.to_tensor(f_a);
    sync_scores(&fv, &fa, max_offset)
}

// ---------------------------------------------------------------------------
// mel fidelity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelMetrics {
    pub l1: f64,
    pub spectral_convergence: f64,
}

/// Element-mean L1 plus spectral convergence |y - y^|_F / |y|_F.
pub fn mel_metrics(generated: &Tensor, target: &Tensor) -> MelMetrics {
    assert_eq!(generated.shape, target.shape);
    let n = target.numel() as f64;
    let mut l1 = 0.0;
    let mut num = 0.0;
    let mut den = 0.0;
    for (g, y) in generated.data.iter().zip(&target.data) {
        l1 += (g - y).abs();
        num += (y - g) * (y - g);
        den += y * y;
    }
    MelMetrics {
        l1: l1 / n,
        spectral_convergence: if den > 0.0 { (num / den).sqrt() } else { 0.0 },
    }
}

// ---------------------------------------------------------------------------
// token recovery
// ---------------------------------------------------------------------------

/// Per-phoneme mean mel segments (unit range, [80, 16] each) built from the
/// training split's ground truth.
#[derive(Debug, Clone)]
pub struct PhonemeTemplates {
    pub segments: BTreeMap<u8, Tensor>,
    pub seg_frames: usize,
}

pub const MEL_FRAMES_PER_TOKEN: usize = 4 * FRAMES_PER_TOKEN;

impl PhonemeTemplates {
    pub fn build(corpus: &Corpus) -> Result<Self, EvalError> {
        let mut sums: BTreeMap<u8, (Tensor, usize)> = BTreeMap::new();
        for entry in corpus.entries_of(Split::Train) {
            let mel = dsp::mel::read_melb(&corpus.root.join(&entry.melb))?;
            let unit = mel.to_unit();
            let f = unit.shape[0];
            let frames = unit.shape[1];
            for (k, &tok) in entry.script.tokens.iter().enumerate() {
                let t0 = k * MEL_FRAMES_PER_TOKEN;
                if t0 + MEL_FRAMES_PER_TOKEN > frames {
                    break;
                }
                let entry = sums
                    .entry(tok.0)
                    .or_insert_with(|| (Tensor::zeros(&[f, MEL_FRAMES_PER_TOKEN]), 0));
                for row in 0..f {
                    for c in 0..MEL_FRAMES_PER_TOKEN {
                        entry.0.data[row * MEL_FRAMES_PER_TOKEN + c] +=
                            unit.data[row * frames + t0 + c];
                    }
                }
                entry.1 += 1;
            }
        }
        let missing: Vec<u8> = (0..NUM_PHONEMES as u8)
            .filter(|p| !sums.contains_key(p))
            .collect();
        if !missing.is_empty() {
            return Err(EvalError::IncompleteTemplates { missing });
        }
        let segments = sums
            .into_iter()
            .map(|(p, (mut sum, count))| {
                for v in sum.data.iter_mut() {
                    *v /= count as f64;
                }
                (p, sum)
            })
            .collect();
        Ok(PhonemeTemplates { segments, seg_frames: MEL_FRAMES_PER_TOKEN })
    }

    /// Nearest template (element-mean L1) for one [80, 16] segment.
    pub fn classify(&self, segment_l1_view: &[f64], f: usize) -> u8 {
        let mut best = 0u8;
        let mut best_d = f64::INFINITY;
        for (&p, tmpl) in &self.segments {
            let mut d = 0.0;
            for i in 0..f * self.seg_frames {
                d += (segment_l1_view[i] - tmpl.data[i]).abs();
            }
            if d < best_d {
                best_d = d;
                best = p;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TokenRecovery {
    pub accuracy: f64,
    /// Accuracy restricted to homophene tokens only.
    pub homophene_accuracy: f64,
    pub total: usize,
    pub homophene_total: usize,
}

/// Classify every 16-mel-frame segment of a unit-range mel against the
/// templates and compare with the script.
pub fn token_recovery(
    mel_unit: &Tensor,
    script: &crate::data::TokenScript,
    templates: &PhonemeTemplates,
) -> Result<TokenRecovery, EvalError> {
    let f = mel_unit.shape[0];
    let frames = mel_unit.shape[1];
    let span = templates.seg_frames;
    if frames != script.tokens.len() * span {
        return Err(EvalError::BadSegmentation { got: frames, span });
    }
    let mut correct = 0usize;
    let mut h_correct = 0usize;
    let mut h_total = 0usize;
    let mut seg = vec![0.0; f * span];
    for (k, &tok) in script.tokens.iter().enumerate() {
        for row in 0..f {
            for c in 0..span {
                seg[row * span + c] = mel_unit.data[row * frames + k * span + c];
            }
        }
        let predicted = templates.classify(&seg, f);
        let hit = predicted == tok.0;
        if hit {
            correct += 1;
        }
        if crate::data::is_homophene(tok) {
            h_total += 1;
            if hit {
                h_correct += 1;
            }
        }
    }
    let total = script.tokens.len();
    Ok(TokenRecovery {
        accuracy: correct as f64 / total as f64,
        homophene_accuracy: if h_total > 0 {
            h_correct as f64 / h_total as f64
        } else {
            0.0
        },
        total,
        homophene_total: h_total,
    })
}

/// Chance level of the token-recovery oracle.
pub fn chance_level() -> f64 {
    1.0 / NUM_PHONEMES as f64
}

// ---------------------------------------------------------------------------
// artifact export
// ---------------------------------------------------------------------------

/// Binary P5 PGM of a unit-range mel, low frequencies at the bottom row.
pub fn write_mel_pgm(path: &Path, mel_unit: &Tensor) -> Result<(), EvalError> {
    let (f, l) = (mel_unit.shape[0], mel_unit.shape[1]);
    let mut buf = format!("P5\n{l} {f}\n255\n").into_bytes();
    for row in 0..f {
        let src = f - 1 - row;
        for c in 0..l {
            let v = (mel_unit.data[src * l + c] + 1.0) / 2.0;
            buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn write_attention_csv(path: &Path, map: &Tensor) -> Result<(), EvalError> {
    let (rows, cols) = (map.shape[0], map.shape[1]);
    let mut out = String::new();
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:.8}", map.data[r * cols + c]));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Everything `synth` and `eval` drop on disk for one sample: MELB + CSV mel,
/// a PGM image, attention-map CSVs, and a WAV through postnet + Griffin-Lim.
pub struct ExportedArtifacts {
    pub melb: std::path::PathBuf,
    pub csv: std::path::PathBuf,
    pub pgm: std::path::PathBuf,
    pub wav: std::path::PathBuf,
    pub attention: Vec<std::path::PathBuf>,
}

pub fn export_artifacts(
    model: &Model,
    clip: &crate::data::VideoClip,
    out_dir: &Path,
    stem: &str,
    griffin_lim_iters: usize,
) -> Result<ExportedArtifacts, EvalError> {
    std::fs::create_dir_all(out_dir)?;
    let out = model.synthesize(clip, None)?;
    let mel_unit = &out.mels_unit[out.mels_unit.len() - 1];
    let mel = MelSpectrogram::from_unit(mel_unit, 160, 16000);

    let melb = out_dir.join(format!("{stem}.melb"));
    dsp::mel::write_melb(&melb, &mel)?;
    let csv = out_dir.join(format!("{stem}.mel.csv"));
    dsp::mel::write_mel_csv(&csv, &mel)?;
    let pgm = out_dir.join(format!("{stem}.pgm"));
    write_mel_pgm(&pgm, mel_unit)?;

    // waveform: mel -> postnet linear magnitudes -> Griffin-Lim
    let mut tape = Tape::new();
    let bind = Binding::bind_filtered(
        &model.params,
        &mut tape,
        |n| n.starts_with("postnet."),
        |_| false,
    );
    let m = tape.constant(mel_unit);
    let lin = model.postnet.forward(&mut tape, &bind, m)?;
    let mags = dsp::LinearSpectrogram {
        mags: tape.to_tensor(lin),
        window: 640,
        hop: 160,
        sample_rate: 16000,
    };
    let wave = dsp::griffin_lim(&mags, griffin_lim_iters)?;
    let wav = out_dir.join(format!("{stem}.wav"));
    dsp::wav::write_wav(&wav, &wave)?;

    let mut attention = Vec::new();
    for (i, map) in out.attention.iter().enumerate() {
        let p = out_dir.join(format!("{stem}.attn{i}.csv"));
        write_attention_csv(&p, map)?;
        attention.push(p);
    }
    Ok(ExportedArtifacts { melb, csv, pgm, wav, attention })
}

/// Flat metric=value text block.
pub fn write_metrics_summary(path: &Path, metrics: &[(&str, f64)]) -> Result<(), EvalError> {
    let mut out = String::new();
    for (k, v) in metrics {
        out.push_str(&format!("{k}={v}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_corpus, CorpusConfig, TokenScript};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn identical_features_score_zero_distance() {
        let f = Tensor::rand_uniform(&[16, 8], &mut ChaCha12Rng::seed_from_u64(1), -1.0, 1.0);
        let s = sync_scores(&f, &f, 8).unwrap();
        assert_eq!(s.lse_d, 0.0);
        assert_eq!(s.best_offset, 0);
        assert!(s.lse_c > 0.0);
    }

    #[test]
    fn offset_range_must_fit() {
        let f = Tensor::zeros(&[6, 4]);
        assert!(matches!(
            sync_scores(&f, &f, 8),
            Err(EvalError::OffsetTooLarge { .. })
        ));
    }

    #[test]
    fn shifted_features_prefer_the_true_lag() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let base = Tensor::rand_uniform(&[20, 6], &mut rng, -1.0, 1.0);
        // audio features delayed by 2 frames relative to visual
        let mut shifted = Tensor::zeros(&[20, 6]);
        for t in 0..20usize {
            let src = t.saturating_sub(2).min(19);
            for k in 0..6 {
                shifted.data[t * 6 + k] = base.data[src * 6 + k];
            }
        }
        let s = sync_scores(&base, &shifted, 6).unwrap();
        assert_eq!(s.best_offset, 2);
    }

    #[test]
    fn mel_metrics_closed_forms_and_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let y = Tensor::rand_uniform(&[8, 8], &mut rng, -1.0, 1.0);
        let same = mel_metrics(&y, &y);
        assert_eq!(same.l1, 0.0);
        assert_eq!(same.spectral_convergence, 0.0);
        let zero = Tensor::zeros(&[8, 8]);
        let z = mel_metrics(&zero, &y);
        assert!((z.spectral_convergence - 1.0).abs() < 1e-12);
        let g = Tensor::rand_uniform(&[8, 8], &mut rng, -1.0, 1.0);
        let m = mel_metrics(&g, &y);
        let mut l1 = 0.0;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..64 {
            l1 += (g.data[i] - y.data[i]).abs();
            num += (g.data[i] - y.data[i]).powi(2);
            den += y.data[i].powi(2);
        }
        assert!((m.l1 - l1 / 64.0).abs() < 1e-12);
        assert!((m.spectral_convergence - (num / den).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn token_recovery_on_ground_truth_is_high_and_constant_is_chance_like() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = build_corpus(&CorpusConfig::new(60, 5, dir.path())).unwrap();
        let templates = PhonemeTemplates::build(&corpus).unwrap();
        // ground-truth mels classify almost perfectly
        let mut total_acc = 0.0;
        let mut n = 0.0;
        for entry in corpus.entries_of(Split::Test) {
            let mel = dsp::mel::read_melb(&corpus.root.join(&entry.melb)).unwrap();
            let rec = token_recovery(&mel.to_unit(), &entry.script, &templates).unwrap();
            total_acc += rec.accuracy;
            n += 1.0;
        }
        assert!(total_acc / n >= 0.95, "ground-truth accuracy {}", total_acc / n);
        // a constant mel cannot beat chance by much
        let constant = Tensor::full(&[80, 64], 0.0);
        let script = TokenScript::decode("4 1 8 6").unwrap();
        let rec = token_recovery(&constant, &script, &templates).unwrap();
        assert!(rec.accuracy <= 0.5, "constant mel accuracy {}", rec.accuracy);
    }

    #[test]
    fn pgm_dimensions_match_mel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mel = Tensor::zeros(&[80, 32]);
        write_mel_pgm(&path, &mel).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = String::from_utf8_lossy(&bytes[0..20]).to_string();
        assert!(header.starts_with("P5\n32 80\n255\n"));
        assert_eq!(bytes.len(), "P5\n32 80\n255\n".len() + 80 * 32);
    }
}
