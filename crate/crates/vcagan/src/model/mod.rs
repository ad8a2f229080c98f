//! The lip-to-speech network: local/global visual encoders, a coarse-to-fine
//! generator stack with audio-visual attention, per-resolution mel heads,
//! multi-scale conditional discriminators, an audio encoder for
//! synchronization learning and a mel-to-linear postnet.

pub mod checkpoint;
pub mod layers;
pub mod net;

use crate::data::VideoClip;
use crate::tensor::{Tape, Tensor, TensorError, TensorId};
use layers::{Binding, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("clip must have at least one frame and [T,H,W,C] layout")]
    EmptyClip,
    #[error("clip is {got_h}x{got_w}x{got_c}, model expects {want_h}x{want_w}x{want_c}")]
    ClipGeometry {
        got_h: usize,
        got_w: usize,
        got_c: usize,
        want_h: usize,
        want_w: usize,
        want_c: usize,
    },
    #[error("mel must be [{expected_f}, L], got {got:?}")]
    BadMelShape { expected_f: usize, got: Vec<usize> },
    #[error("mel frame count {frames} is not divisible by 4")]
    FramesNotDivisible { frames: usize },
    #[error("stage {stage}: F_i*D_i = {f_i}*{d_i} not divisible by alpha = {alpha}")]
    AlphaDivisibility { stage: usize, f_i: usize, d_i: usize, alpha: usize },
    #[error("noise must be {expected:?}, got {got:?}")]
    BadNoiseShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters. Defaults are the desk configuration:
/// 32x32 grayscale input, F=80 mel bins, three generator stages with 2x
/// upsampling, attention reduction alpha=2.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub f_mel: usize,
    pub n_stages: usize,
    pub alpha: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub frame_c: usize,
    /// Embedding width D of local and global visual features.
    pub d_visual: usize,
    /// Channels of the noise volume z.
    pub d_noise: usize,
    /// Attention width d.
    pub d_attn: usize,
    /// Channels D_i of the three speech representations.
    pub stage_channels: Vec<usize>,
    /// 3D-conv output plus the residual stack plan of the visual encoder.
    pub visual_channels: Vec<usize>,
    /// The audio encoder's two stride-2 conv widths.
    pub audio_channels: [usize; 2],
    pub disc_channels: usize,
    pub postnet_channels: usize,
    pub gru_layers: usize,
    pub use_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            f_mel: 80,
            n_stages: 3,
            alpha: 2,
            frame_h: 32,
            frame_w: 32,
            frame_c: 1,
            d_visual: 64,
            d_noise: 16,
            d_attn: 64,
            stage_channels: vec![24, 12, 6],
            visual_channels: vec![8, 16, 32, 64, 64],
            audio_channels: [8, 16],
            disc_channels: 12,
            postnet_channels: 64,
            gru_layers: 2,
            use_attention: true,
        }
    }
}

impl ModelConfig {
    /// Spectral extent F_i of stage i: F/4, F/2, F.
    pub fn stage_f(&self, stage: usize) -> usize {
        (self.f_mel / 4) << stage
    }

    /// Mel frames at stage i for a T-frame clip: T, 2T, 4T.
    pub fn stage_t(&self, stage: usize, t: usize) -> usize {
        t << stage
    }

    pub fn stft_window(&self) -> usize {
        640
    }

    pub fn noise_shape(&self, t: usize) -> Vec<usize> {
        vec![self.d_noise, self.f_mel / 4, t]
    }

    fn validate(&self) -> Result<(), ModelError> {
        assert_eq!(self.stage_channels.len(), self.n_stages);
        assert_eq!(*self.visual_channels.last().unwrap(), self.d_visual);
        assert_eq!(self.f_mel % 4, 0);
        for stage in 0..self.n_stages - 1 {
            let f_i = self.stage_f(stage);
            let d_i = self.stage_channels[stage];
            if (f_i * d_i) % self.alpha != 0 {
                return Err(ModelError::AlphaDivisibility {
                    stage,
                    f_i,
                    d_i,
                    alpha: self.alpha,
                });
            }
        }
        Ok(())
    }
}

/// Parameter-group prefixes for the alternating updates.
pub const GENERATOR_GROUP: &[&str] = &["phi_v.", "phi_c.", "phi_a.", "gen.", "attn.", "head."];
pub const DISCRIMINATOR_GROUP: &[&str] = &["disc."];
pub const POSTNET_GROUP: &[&str] = &["postnet."];

/// Everything trainable plus the forward graph builders.
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub phi_v: net::PhiV,
    pub phi_c: net::PhiC,
    pub phi_a: net::PhiA,
    pub generator: net::Generator,
    pub attention: Option<Vec<net::AttnStage>>,
    pub discriminators: Vec<net::DiscStage>,
    pub postnet: net::Postnet,
    synth_calls: AtomicU64,
    stack_runs: AtomicU64,
}

/// Mel outputs of one synthesis pass plus the attention maps.
pub struct SynthOutput {
    /// Unit-range mel images [F_i, T_i] per stage; the last is [F, 4T].
    pub mels_unit: Vec<Tensor>,
    /// Attention maps [T_i, T], one per refiner (empty without attention).
    pub attention: Vec<Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let phi_v = net::PhiV::new(&mut store, &mut rng, &config);
        let phi_c = net::PhiC::new(&mut store, &mut rng, &config);
        let phi_a = net::PhiA::new(&mut store, &mut rng, &config);
        let generator = net::Generator::new(&mut store, &mut rng, &config);
        let attention = if config.use_attention {
            let stages: Result<Vec<_>, _> = (0..config.n_stages - 1)
                .map(|i| net::AttnStage::new(&mut store, &mut rng, &config, i))
                .collect();
            Some(stages?)
        } else {
            None
        };
        let discriminators = (0..config.n_stages)
            .map(|i| net::DiscStage::new(&mut store, &mut rng, &config, i))
            .collect();
        let postnet = net::Postnet::new(&mut store, &mut rng, &config);
        Ok(Model {
            config,
            params: store,
            phi_v,
            phi_c,
            phi_a,
            generator,
            attention,
            discriminators,
            postnet,
            synth_calls: AtomicU64::new(0),
            stack_runs: AtomicU64::new(0),
        })
    }

    /// Bind every parameter onto a tape; `trainable` picks the subset that
    /// receives gradients (see the group constants).
    pub fn bind(&self, tape: &mut Tape, trainable_prefixes: &[&str]) -> Binding {
        Binding::bind(&self.params, tape, |name| {
            trainable_prefixes.iter().any(|p| name.starts_with(p))
        })
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        self.bind(tape, &[])
    }

    fn check_clip(&self, clip: &VideoClip) -> Result<(), ModelError> {
        if clip.frames.shape.len() != 4 || clip.t() == 0 {
            return Err(ModelError::EmptyClip);
        }
        let (h, w, c) = (clip.height(), clip.width(), clip.channels());
        let cfg = &self.config;
        if (h, w, c) != (cfg.frame_h, cfg.frame_w, cfg.frame_c) {
            return Err(ModelError::ClipGeometry {
                got_h: h,
                got_w: w,
                got_c: c,
                want_h: cfg.frame_h,
                want_w: cfg.frame_w,
                want_c: cfg.frame_c,
            });
        }
        Ok(())
    }

    /// Encoders plus the full generator stack on one tape. The workhorse for
    /// both training and inference.
    pub fn forward_generator(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        clip: &VideoClip,
        z: Option<&Tensor>,
    ) -> Result<ForwardOut, ModelError> {
        self.check_clip(clip)?;
        let t_len = clip.t();
        let zshape = self.config.noise_shape(t_len);
        let z = match z {
            Some(z) => {
                if z.shape != zshape {
                    return Err(ModelError::BadNoiseShape {
                        expected: zshape,
                        got: z.shape.clone(),
                    });
                }
                z.clone()
            }
            None => Tensor::zeros(&zshape),
        };
        let frames = tape.constant(&clip.frames);
        let f_v = self.phi_v.forward(tape, bind, frames)?;
        let c_v = self.phi_c.forward(tape, bind, f_v);
        let z = tape.constant(&z);
        self.stack_runs.fetch_add(1, Ordering::Relaxed);
        let gen = self.generator.forward(
            tape,
            bind,
            &self.config,
            f_v,
            c_v,
            z,
            self.attention.as_deref(),
        );
        Ok(ForwardOut { f_v, c_v, gen })
    }

    /// One-forward-pass synthesis: arbitrary clip length in, unit-range mels
    /// at every scale plus attention maps out. No recurrence over output
    /// frames; the stack executes exactly once per call.
    pub fn synthesize(
        &self,
        clip: &VideoClip,
        z: Option<&Tensor>,
    ) -> Result<SynthOutput, ModelError> {
        self.synth_calls.fetch_add(1, Ordering::Relaxed);
        let mut tape = Tape::new();
        let bind = self.bind_frozen(&mut tape);
        let out = self.forward_generator(&mut tape, &bind, clip, z)?;
        Ok(SynthOutput {
            mels_unit: out.gen.mels.iter().map(|&m| tape.to_tensor(m)).collect(),
            attention: out.gen.attn_maps.iter().map(|&a| tape.to_tensor(a)).collect(),
        })
    }

    /// (calls, generator-stack runs) since construction.
    pub fn counters(&self) -> (u64, u64) {
        (
            self.synth_calls.load(Ordering::Relaxed),
            self.stack_runs.load(Ordering::Relaxed),
        )
    }
}

/// Tape ids produced by `forward_generator`.
pub struct ForwardOut {
    pub f_v: TensorId,
    pub c_v: TensorId,
    pub gen: net::GenOut,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_pair, sample_script, TokenScript, Phoneme};

    fn small_config() -> ModelConfig {
        ModelConfig::default()
    }

    fn clip_of_len(t_tokens: usize, seed: u64) -> VideoClip {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let script = sample_script(t_tokens, &mut rng);
        render_pair(&script, seed).clip
    }

    #[test]
    fn synthesize_shapes_follow_the_contract() {
        let model = Model::new(small_config(), 1).unwrap();
        for t_tokens in [2usize, 4, 6] {
            let clip = clip_of_len(t_tokens.max(3), 5);
            let t = clip.t();
            let out = model.synthesize(&clip, None).unwrap();
            assert_eq!(out.mels_unit[0].shape, vec![20, t]);
            assert_eq!(out.mels_unit[1].shape, vec![40, 2 * t]);
            assert_eq!(out.mels_unit[2].shape, vec![80, 4 * t]);
            assert_eq!(out.attention.len(), 2);
            assert_eq!(out.attention[0].shape, vec![t, t]);
            assert_eq!(out.attention[1].shape, vec![2 * t, t]);
            for m in &out.mels_unit {
                assert!(m.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn attention_rows_are_a_probability_simplex() {
        let model = Model::new(small_config(), 2).unwrap();
        let clip = clip_of_len(4, 9);
        let out = model.synthesize(&clip, None).unwrap();
        for map in &out.attention {
            let t = map.shape[1];
            for row in map.data.chunks(t) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn deterministic_and_counted_once_per_call() {
        let model = Model::new(small_config(), 3).unwrap();
        let clip = clip_of_len(4, 11);
        let a = model.synthesize(&clip, None).unwrap();
        let b = model.synthesize(&clip, None).unwrap();
        assert_eq!(a.mels_unit[2], b.mels_unit[2]);
        let (calls, runs) = model.counters();
        assert_eq!(calls, 2);
        assert_eq!(runs, 2);
    }

    #[test]
    fn audio_encoder_alignment_and_errors() {
        let model = Model::new(small_config(), 4).unwrap();
        let mut tape = Tape::new();
        let bind = model.bind_frozen(&mut tape);
        let mel = tape.zeros(&[80, 64]);
        let f_a = model.phi_a.forward(&mut tape, &bind, mel).unwrap();
        assert_eq!(tape.shape(f_a), &[16, 64]);
        let bad = tape.zeros(&[80, 63]);
        assert!(matches!(
            model.phi_a.forward(&mut tape, &bind, bad),
            Err(ModelError::FramesNotDivisible { frames: 63 })
        ));
    }

    #[test]
    fn no_attention_model_lacks_attention_parameters() {
        let mut cfg = small_config();
        cfg.use_attention = false;
        let model = Model::new(cfg, 5).unwrap();
        assert!(model.params.ids().all(|id| !model.params.name(id).starts_with("attn.")));
        let clip = clip_of_len(4, 13);
        let out = model.synthesize(&clip, None).unwrap();
        assert!(out.attention.is_empty());
        assert_eq!(out.mels_unit[2].shape, vec![80, 64]);
    }

    #[test]
    fn repeat_operator_rows_are_identical_before_the_stack() {
        let model = Model::new(small_config(), 6).unwrap();
        let mut tape = Tape::new();
        let bind = model.bind_frozen(&mut tape);
        let clip = clip_of_len(4, 17);
        let frames = tape.constant(&clip.frames);
        let f_v = model.phi_v.forward(&mut tape, &bind, frames).unwrap();
        let rep = {
            // same tiling the generator performs
            let t_len = tape.shape(f_v)[0];
            let d = tape.shape(f_v)[1];
            let dt = tape.transpose2(f_v);
            let dt = tape.reshape(dt, &[d, 1, t_len]);
            tape.broadcast_to(dt, &[d, 20, t_len])
        };
        let data = tape.data(rep);
        let t_len = clip.t();
        for ch in 0..8 {
            for row in 1..20 {
                for t in 0..t_len {
                    assert_eq!(
                        data[(ch * 20 + row) * t_len + t],
                        data[ch * 20 * t_len + t]
                    );
                }
            }
        }
    }

    #[test]
    fn global_encoder_sees_the_whole_sequence() {
        let model = Model::new(small_config(), 7).unwrap();
        let clip = clip_of_len(4, 19);
        // perturb the first frame, compare C_v at the last step
        let mut tape = Tape::new();
        let bind = model.bind_frozen(&mut tape);
        let frames = tape.constant(&clip.frames);
        let f_v = model.phi_v.forward(&mut tape, &bind, frames).unwrap();
        let c_v = model.phi_c.forward(&mut tape, &bind, f_v);
        let t_len = clip.t();
        let base_last = tape.data(c_v)[(t_len - 1) * 64..].to_vec();

        let mut perturbed = clip.clone();
        for px in perturbed.frames.data[0..32 * 32].iter_mut() {
            *px = (*px + 0.35).min(1.0);
        }
        let mut tape2 = Tape::new();
        let bind2 = model.bind_frozen(&mut tape2);
        let frames2 = tape2.constant(&perturbed.frames);
        let f_v2 = model.phi_v.forward(&mut tape2, &bind2, frames2).unwrap();
        let c_v2 = model.phi_c.forward(&mut tape2, &bind2, f_v2);
        let new_last = tape2.data(c_v2)[(t_len - 1) * 64..].to_vec();
        let diff: f64 = base_last
            .iter()
            .zip(&new_last)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "receptive field is not global (diff {diff})");
    }

    #[test]
    fn t_equals_one_clip_works_end_to_end() {
        let model = Model::new(small_config(), 8).unwrap();
        let script = TokenScript { tokens: vec![Phoneme(1)] };
        let pair = render_pair(&script, 3);
        let clip = pair.clip.window(0, 1);
        let out = model.synthesize(&clip, None).unwrap();
        assert_eq!(out.mels_unit[2].shape, vec![80, 4]);
    }

    #[test]
    fn postnet_output_bins_and_nonnegativity() {
        let model = Model::new(small_config(), 9).unwrap();
        let mut tape = Tape::new();
        let bind = model.bind_frozen(&mut tape);
        let mel = tape.constant(&Tensor::rand_uniform(
            &[80, 32],
            &mut ChaCha12Rng::seed_from_u64(1),
            -1.0,
            1.0,
        ));
        let lin = model.postnet.forward(&mut tape, &bind, mel).unwrap();
        assert_eq!(tape.shape(lin), &[321, 32]);
        assert!(tape.data(lin).iter().all(|&v| v >= 0.0));
        let bad = tape.zeros(&[79, 32]);
        assert!(model.postnet.forward(&mut tape, &bind, bad).is_err());
    }
}
