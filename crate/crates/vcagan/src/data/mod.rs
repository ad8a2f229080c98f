//! Procedural paired (video, audio) corpus with a known viseme-to-phoneme
//! mapping and planted homophenes.
//!
//! Twelve phonemes share ten lip shapes: two homophene pairs render to
//! pixel-identical video and are disambiguated only by a cue token placed two
//! tokens earlier — outside the local receptive field of the visual
//! front-end, so only global context can resolve them.

pub mod render;

use crate::dsp::{self, mel::MelFilterbank, DspError, FpsProfile, Waveform};
use crate::tensor::{kernels, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("corpus must contain at least one sample")]
    EmptyCorpus,
    #[error("window length {len} exceeds clip length {clip}")]
    WindowTooLong { len: usize, clip: usize },
    #[error("mel must be [{f}, 4T], got {got:?}")]
    BadMelShape { f: usize, got: Vec<usize> },
    #[error("malformed manifest line {line}: {reason}")]
    BadManifest { line: usize, reason: String },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const NUM_PHONEMES: usize = 12;
pub const NUM_VISEMES: usize = 10;
/// Video frames per token.
pub const FRAMES_PER_TOKEN: usize = 4;

/// Phoneme index in 0..NUM_PHONEMES. 0 is silence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Phoneme(pub u8);

impl Phoneme {
    pub const SILENCE: Phoneme = Phoneme(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Lip-shape class for a phoneme. The two homophene pairs (8,9) and (10,11)
/// collapse onto visemes 8 and 9.
pub fn viseme_of(p: Phoneme) -> u8 {
    match p.0 {
        0..=7 => p.0,
        8 | 9 => 8,
        10 | 11 => 9,
        _ => panic!("phoneme {} out of range", p.0),
    }
}

/// The planted homophene pairs.
pub fn homophene_pairs() -> [(Phoneme, Phoneme); 2] {
    [(Phoneme(8), Phoneme(9)), (Phoneme(10), Phoneme(11))]
}

pub fn is_homophene(p: Phoneme) -> bool {
    p.0 >= 8
}

/// Cue phonemes that force a specific homophene two tokens later.
/// P4 -> P8, P5 -> P9, P2 -> P10, P3 -> P11.
fn cue_to_homophene(cue: Phoneme) -> Option<Phoneme> {
    match cue.0 {
        4 => Some(Phoneme(8)),
        5 => Some(Phoneme(9)),
        2 => Some(Phoneme(10)),
        3 => Some(Phoneme(11)),
        _ => None,
    }
}

/// Tokens that never act as cues and never are homophenes.
const FILLERS: [Phoneme; 4] = [Phoneme(0), Phoneme(1), Phoneme(6), Phoneme(7)];

/// A clip script: one phoneme per token, each token spanning four frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenScript {
    pub tokens: Vec<Phoneme>,
}

impl TokenScript {
    pub fn video_frames(&self) -> usize {
        self.tokens.len() * FRAMES_PER_TOKEN
    }

    pub fn mel_frames(&self) -> usize {
        4 * self.video_frames()
    }

    /// Serialize as space-separated indices.
    pub fn encode(&self) -> String {
        self.tokens
            .iter()
            .map(|p| p.0.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn decode(s: &str) -> Option<Self> {
        let tokens: Option<Vec<Phoneme>> = s
            .split_whitespace()
            .map(|t| t.parse::<u8>().ok().filter(|&v| (v as usize) < NUM_PHONEMES).map(Phoneme))
            .collect();
        tokens.map(|tokens| TokenScript { tokens })
    }
}

/// Draw a script with exactly one homophene event: a cue token, one filler in
/// between, then the homophene it implies.
pub fn sample_script(tokens: usize, rng: &mut ChaCha12Rng) -> TokenScript {
    assert!(tokens >= 3, "scripts need room for cue, spacer and homophene");
    let mut out = vec![Phoneme::SILENCE; tokens];
    for slot in out.iter_mut() {
        *slot = FILLERS[rng.random_range(0..FILLERS.len())];
    }
    let k = rng.random_range(2..tokens); // homophene slot
    let cue = Phoneme([4u8, 5, 2, 3][rng.random_range(0..4)]);
    out[k - 2] = cue;
    out[k] = cue_to_homophene(cue).expect("cue table");
    TokenScript { tokens: out }
}

/// A silent lip clip: frames [T, H, W, C] with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub fps: u32,
}

impl VideoClip {
    pub fn t(&self) -> usize {
        self.frames.shape[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape[2]
    }

    pub fn channels(&self) -> usize {
        self.frames.shape[3]
    }

    /// Frames [t0, t0+len).
    pub fn window(&self, t0: usize, len: usize) -> VideoClip {
        let (data, shape) =
            kernels::slice_axis(&self.frames.data, &self.frames.shape, 0, t0, len);
        VideoClip { frames: Tensor::new(shape, data), fps: self.fps }
    }
}

/// Video, audio and the script they were cut from.
#[derive(Debug, Clone)]
pub struct RenderedPair {
    pub clip: VideoClip,
    pub wave: Waveform,
    pub script: TokenScript,
}

pub fn render_pair(script: &TokenScript, seed: u64) -> RenderedPair {
    RenderedPair {
        clip: render::render_video(script, seed),
        wave: render::render_audio(script, seed),
        script: script.clone(),
    }
}

/// Mixes the corpus seed with a sample index into an independent stream.
pub fn sample_seed(corpus_seed: u64, index: usize) -> u64 {
    // splitmix64 step
    let mut z = corpus_seed
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// multi-scale targets and window sampling
// ---------------------------------------------------------------------------

/// Bilinear downscales of an [80, 4T] mel image: [20, T], [40, 2T] and the
/// identity at full scale. Works in whatever value domain it is given.
pub fn multiscale_targets(y: &Tensor) -> Result<[Tensor; 3], DataError> {
    if y.shape.len() != 2 || y.shape[0] != 80 || y.shape[1] % 4 != 0 {
        return Err(DataError::BadMelShape { f: 80, got: y.shape.clone() });
    }
    let (f, l) = (y.shape[0], y.shape[1]);
    let t = l / 4;
    let y1 = kernels::bilinear_resize(&y.data, 1, f, l, f / 4, t);
    let y2 = kernels::bilinear_resize(&y.data, 1, f, l, f / 2, 2 * t);
    Ok([
        Tensor::new(vec![f / 4, t], y1),
        Tensor::new(vec![f / 2, 2 * t], y2),
        y.clone(),
    ])
}

/// A contiguous training window: video frames [t0, t0+len) paired with mel
/// frames [4*t0, 4*(t0+len)) and samples [640*t0, ...).
pub struct WindowSample {
    pub clip: VideoClip,
    /// Log-domain mel values [80, 4*len].
    pub mel: Tensor,
    pub start_frame: usize,
}

pub fn sample_window(
    clip: &VideoClip,
    mel: &Tensor,
    len: usize,
    rng: &mut ChaCha12Rng,
) -> Result<WindowSample, DataError> {
    let t = clip.t();
    if len > t {
        return Err(DataError::WindowTooLong { len, clip: t });
    }
    let t0 = if len == t { 0 } else { rng.random_range(0..=t - len) };
    let (mdata, mshape) = kernels::slice_axis(&mel.data, &mel.shape, 1, 4 * t0, 4 * len);
    Ok(WindowSample {
        clip: clip.window(t0, len),
        mel: Tensor::new(mshape, mdata),
        start_frame: t0,
    })
}

// ---------------------------------------------------------------------------
// corpus on disk
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub tokens_per_clip: usize,
    pub out_dir: PathBuf,
}

impl CorpusConfig {
    pub fn new(n_samples: usize, seed: u64, out_dir: impl Into<PathBuf>) -> Self {
        CorpusConfig { n_samples, seed, tokens_per_clip: 4, out_dir: out_dir.into() }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub wav: PathBuf,
    pub melb: PathBuf,
    pub video: PathBuf,
    pub script: TokenScript,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Corpus {
    /// 80/10/10 split by index.
    pub fn split_indices(&self, split: Split) -> std::ops::Range<usize> {
        let n = self.entries.len();
        let train_end = n * 8 / 10;
        let val_end = n * 9 / 10;
        match split {
            Split::Train => 0..train_end,
            Split::Val => train_end..val_end,
            Split::Test => val_end..n,
        }
    }

    pub fn entries_of(&self, split: Split) -> &[ManifestEntry] {
        &self.entries[self.split_indices(split)]
    }

    pub fn load_pair(&self, entry: &ManifestEntry) -> Result<(VideoClip, Tensor), DataError> {
        let clip = render::read_vid0(&self.root.join(&entry.video))?;
        let mel = dsp::mel::read_melb(&self.root.join(&entry.melb))?;
        Ok((clip, mel.values))
    }
}

/// Audio processing shared by corpus generation and inference: high-pass at
/// 55 Hz, then 80-mel log spectrogram at the 25 fps profile.
pub fn wave_to_mel(wave: &Waveform) -> Result<dsp::mel::MelSpectrogram, DspError> {
    let profile = FpsProfile::Fps25;
    let filtered = dsp::highpass(wave, 55.0)?;
    let (spec, _) = dsp::stft(
        &filtered.samples,
        profile.window(),
        profile.hop(),
        wave.sample_rate,
    )?;
    let fb = MelFilterbank::new(80, profile.window(), wave.sample_rate, 55.0, 8000.0);
    dsp::mel::mel_project(&spec, &fb)
}

/// Render `n` samples deterministically and write WAV + MELB + VID0 plus a
/// manifest.tsv. Rendering is parallel across samples; seeds are partitioned
/// per index so the output is identical at any worker count.
pub fn build_corpus(config: &CorpusConfig) -> Result<Corpus, DataError> {
    if config.n_samples == 0 {
        return Err(DataError::EmptyCorpus);
    }
    std::fs::create_dir_all(config.out_dir.join("wav"))?;
    std::fs::create_dir_all(config.out_dir.join("mel"))?;
    std::fs::create_dir_all(config.out_dir.join("vid"))?;

    let n = config.n_samples;
    let workers = crate::worker_threads().min(n).max(1);
    let results: Vec<Result<ManifestEntry, DataError>> = {
        let mut slots: Vec<Option<Result<ManifestEntry, DataError>>> = Vec::new();
        slots.resize_with(n, || None);
        let slots = std::sync::Mutex::new(slots);
        std::thread::scope(|scope| {
            for w in 0..workers {
                let slots = &slots;
                scope.spawn(move || {
                    let mut i = w;
                    while i < n {
                        let r = build_one_sample(config, i);
                        slots.lock().unwrap()[i] = Some(r);
                        i += workers;
                    }
                });
            }
        });
        slots.into_inner().unwrap().into_iter().map(|s| s.unwrap()).collect()
    };

    let mut entries = Vec::with_capacity(n);
    for r in results {
        entries.push(r?);
    }

    let mut manifest = String::new();
    for e in &entries {
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.id,
            e.wav.display(),
            e.melb.display(),
            e.video.display(),
            e.script.encode()
        ));
    }
    std::fs::write(config.out_dir.join("manifest.tsv"), manifest)?;
    Ok(Corpus { root: config.out_dir.clone(), entries })
}

fn build_one_sample(config: &CorpusConfig, index: usize) -> Result<ManifestEntry, DataError> {
    let seed = sample_seed(config.seed, index);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let script = sample_script(config.tokens_per_clip, &mut rng);
    let pair = render_pair(&script, seed);
    let mel = wave_to_mel(&pair.wave)?;
    debug_assert_eq!(mel.frames(), script.mel_frames());

    let id = format!("s{index:05}");
    let wav = PathBuf::from(format!("wav/{id}.wav"));
    let melb = PathBuf::from(format!("mel/{id}.melb"));
    let video = PathBuf::from(format!("vid/{id}.vid0"));
    dsp::wav::write_wav(&config.out_dir.join(&wav), &pair.wave)?;
    dsp::mel::write_melb(&config.out_dir.join(&melb), &mel)?;
    render::write_vid0(&config.out_dir.join(&video), &pair.clip)?;
    Ok(ManifestEntry { id, wav, melb, video, script })
}

pub fn load_corpus(root: &Path) -> Result<Corpus, DataError> {
    let text = std::fs::read_to_string(root.join("manifest.tsv"))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 5 {
            return Err(DataError::BadManifest {
                line: lineno + 1,
                reason: format!("expected 5 fields, found {}", parts.len()),
            });
        }
        let script = TokenScript::decode(parts[4]).ok_or_else(|| DataError::BadManifest {
            line: lineno + 1,
            reason: "bad script field".to_string(),
        })?;
        entries.push(ManifestEntry {
            id: parts[0].to_string(),
            wav: PathBuf::from(parts[1]),
            melb: PathBuf::from(parts[2]),
            video: PathBuf::from(parts[3]),
            script,
        });
    }
    if entries.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    Ok(Corpus { root: root.to_path_buf(), entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripts_place_cue_two_tokens_before_homophene() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = sample_script(4, &mut rng);
            let k = s.tokens.iter().position(|&p| is_homophene(p)).expect("one homophene");
            assert!(k >= 2);
            assert_eq!(cue_to_homophene(s.tokens[k - 2]), Some(s.tokens[k]));
            // only one homophene per script
            assert_eq!(s.tokens.iter().filter(|&&p| is_homophene(p)).count(), 1);
        }
    }

    #[test]
    fn multiscale_shapes_and_identity() {
        let y = Tensor::rand_uniform(&[80, 64], &mut ChaCha12Rng::seed_from_u64(2), -1.0, 1.0);
        let [y1, y2, y3] = multiscale_targets(&y).unwrap();
        assert_eq!(y1.shape, vec![20, 16]);
        assert_eq!(y2.shape, vec![40, 32]);
        assert_eq!(y3, y);
        // constant image stays constant at every scale
        let c = Tensor::full(&[80, 64], 0.3);
        let [c1, c2, _] = multiscale_targets(&c).unwrap();
        assert!(c1.data.iter().all(|&v| (v - 0.3).abs() < 1e-12));
        assert!(c2.data.iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn multiscale_matches_pointwise_bilinear_formula() {
        let y = Tensor::rand_uniform(&[80, 64], &mut ChaCha12Rng::seed_from_u64(3), 0.0, 1.0);
        let [y1, _, _] = multiscale_targets(&y).unwrap();
        // independent per-pixel bilinear with pixel-center mapping
        for oy in 0..20 {
            for ox in 0..16 {
                let sy = (oy as f64 + 0.5) * 4.0 - 0.5;
                let sx = (ox as f64 + 0.5) * 4.0 - 0.5;
                let y0 = sy.floor().max(0.0) as usize;
                let x0 = sx.floor().max(0.0) as usize;
                let y1i = (y0 + 1).min(79);
                let x1i = (x0 + 1).min(63);
                let fy = sy - y0 as f64;
                let fx = sx - x0 as f64;
                let v = y.data[y0 * 64 + x0] * (1.0 - fy) * (1.0 - fx)
                    + y.data[y0 * 64 + x1i] * (1.0 - fy) * fx
                    + y.data[y1i * 64 + x0] * fy * (1.0 - fx)
                    + y.data[y1i * 64 + x1i] * fy * fx;
                assert!((v - y1.data[oy * 16 + ox]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn window_alignment_and_determinism() {
        let script = TokenScript { tokens: vec![Phoneme(1), Phoneme(4), Phoneme(6), Phoneme(8)] };
        let pair = render_pair(&script, 7);
        let mel = wave_to_mel(&pair.wave).unwrap();
        let mut r1 = ChaCha12Rng::seed_from_u64(5);
        let mut r2 = ChaCha12Rng::seed_from_u64(5);
        let w1 = sample_window(&pair.clip, &mel.values, 8, &mut r1).unwrap();
        let w2 = sample_window(&pair.clip, &mel.values, 8, &mut r2).unwrap();
        assert_eq!(w1.start_frame, w2.start_frame);
        assert_eq!(w1.mel.shape, vec![80, 32]);
        assert_eq!(w1.clip.t(), 8);
        // full-length window is the identity
        let full = sample_window(&pair.clip, &mel.values, 16, &mut r1).unwrap();
        assert_eq!(full.start_frame, 0);
        assert_eq!(full.mel, mel.values);
        assert!(sample_window(&pair.clip, &mel.values, 17, &mut r1).is_err());
    }
}
