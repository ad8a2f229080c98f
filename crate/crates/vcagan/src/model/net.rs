//! Network components: visual/audio encoders, the multi-stage generator with
//! audio-visual attention, multi-scale discriminators and the postnet.

use super::layers::{activate, Binding, Conv, Gru, Linear, ParamId, ParamStore, ResBlock};
use super::{ModelConfig, ModelError};
use crate::tensor::{Tape, Tensor, TensorId};
use rand_chacha::ChaCha12Rng;

/// Local visual encoder: one 3D conv (temporal kernel 5) followed by a
/// per-frame 2D residual stack with global spatial pooling.
#[derive(Debug, Clone)]
pub struct PhiV {
    conv3d: Conv,
    blocks: Vec<ResBlock>,
}

impl PhiV {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, cfg: &ModelConfig) -> Self {
        let ch = &cfg.visual_channels;
        let conv3d = Conv::new(
            store,
            rng,
            "phi_v.conv3d",
            cfg.frame_c,
            ch[0],
            &[5, 3, 3],
            &[1, 2, 2],
            &[2, 1, 1],
        );
        // the residual stack is per-frame 2D: temporal kernel 1 throughout,
        // run as one rank-3 conv over all frames at once
        let mut blocks = Vec::new();
        for i in 0..ch.len() - 1 {
            let stride = if i + 2 < ch.len() { 2 } else { 1 };
            blocks.push(ResBlock::new(
                store,
                rng,
                &format!("phi_v.block{i}"),
                ch[i],
                ch[i + 1],
                &[1, 3, 3],
                &[1, stride, stride],
            ));
        }
        PhiV { conv3d, blocks }
    }

    /// frames: [T, H, W, C] in [0,1] -> local features [T, D].
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        frames: TensorId,
    ) -> Result<TensorId, ModelError> {
        let s = tape.shape(frames).to_vec();
        if s.len() != 4 || s[0] == 0 {
            return Err(ModelError::EmptyClip);
        }
        let (t_len, h, w, c) = (s[0], s[1], s[2], s[3]);
        // [T, H, W, C] -> [C, T, H, W]
        let x = if c == 1 {
            tape.reshape(frames, &[1, t_len, h, w])
        } else {
            tape.permute(frames, &[3, 0, 1, 2])
        };
        let y = self.conv3d.forward(tape, bind, x);
        let mut f = activate(tape, y);
        debug_assert_eq!(tape.shape(f)[1], t_len);
        for b in &self.blocks {
            f = b.forward(tape, bind, f);
        }
        let sh = tape.shape(f).to_vec(); // [C, T, H', W']
        let pooled = tape.sum_axes(f, &[false, false, true, true]);
        let pooled = tape.scale(pooled, 1.0 / (sh[2] * sh[3]) as f64);
        let ct = tape.reshape(pooled, &[sh[0], sh[1]]);
        Ok(tape.transpose2(ct))
    }
}

/// Global visual encoder: 2-layer bi-GRU plus a linear projection.
#[derive(Debug, Clone)]
pub struct PhiC {
    gru: Gru,
    proj: Linear,
}

impl PhiC {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.d_visual;
        let gru = Gru::new(store, rng, "phi_c.gru", d, d / 2, cfg.gru_layers);
        let proj = Linear::new(store, rng, "phi_c.proj", d, d);
        PhiC { gru, proj }
    }

    /// [T, D] -> [T, D]
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, f_v: TensorId) -> TensorId {
        let h = self.gru.forward(tape, bind, f_v);
        self.proj.forward(tape, bind, h)
    }
}

/// Local audio encoder: two stride-2 convolutions and one residual block,
/// then a per-frame linear projection. Total temporal stride is 4, so an
/// [F, 4T] mel maps to T frame-aligned feature rows.
#[derive(Debug, Clone)]
pub struct PhiA {
    conv1: Conv,
    conv2: Conv,
    res: ResBlock,
    proj: Linear,
    f_mel: usize,
}

impl PhiA {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, cfg: &ModelConfig) -> Self {
        let [c1, c2] = cfg.audio_channels;
        let conv1 = Conv::new(store, rng, "phi_a.conv1", 1, c1, &[3, 3], &[2, 2], &[1, 1]);
        let conv2 = Conv::new(store, rng, "phi_a.conv2", c1, c2, &[3, 3], &[2, 2], &[1, 1]);
        let res = ResBlock::new(store, rng, "phi_a.res", c2, c2, &[3, 3], &[1, 1]);
        let d_in = c2 * (cfg.f_mel / 4);
        let proj = Linear::new(store, rng, "phi_a.proj", d_in, cfg.d_visual);
        PhiA { conv1, conv2, res, proj, f_mel: cfg.f_mel }
    }

    /// mel (value range [-1,1]): [F, L] with L divisible by 4 -> [L/4, D]
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        mel: TensorId,
    ) -> Result<TensorId, ModelError> {
        let s = tape.shape(mel).to_vec();
        if s.len() != 2 || s[0] != self.f_mel {
            return Err(ModelError::BadMelShape { expected_f: self.f_mel, got: s });
        }
        if s[1] % 4 != 0 || s[1] == 0 {
            return Err(ModelError::FramesNotDivisible { frames: s[1] });
        }
        let t_out = s[1] / 4;
        let x = tape.reshape(mel, &[1, s[0], s[1]]);
        let h = self.conv1.forward(tape, bind, x);
        let h = activate(tape, h);
        let h = self.conv2.forward(tape, bind, h);
        let h = activate(tape, h);
        let h = self.res.forward(tape, bind, h); // [C, F/4, T]
        let sh = tape.shape(h).to_vec();
        debug_assert_eq!(sh[2], t_out);
        let per_frame = tape.permute(h, &[2, 1, 0]); // [T, F/4, C]
        let flat = tape.reshape(per_frame, &[t_out, sh[1] * sh[0]]);
        Ok(self.proj.forward(tape, bind, flat))
    }
}

/// Scaled dot-product attention from speech representation queries onto
/// global visual features.
#[derive(Debug, Clone)]
pub struct AttnStage {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    d_attn: usize,
    f_i: usize,
    d_i: usize,
    alpha: usize,
}

impl AttnStage {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        cfg: &ModelConfig,
        stage: usize,
    ) -> Result<Self, ModelError> {
        let f_i = cfg.stage_f(stage);
        let d_i = cfg.stage_channels[stage];
        if (f_i * d_i) % cfg.alpha != 0 {
            return Err(ModelError::AlphaDivisibility {
                stage,
                f_i,
                d_i,
                alpha: cfg.alpha,
            });
        }
        let fd = f_i * d_i;
        let d = cfg.d_visual;
        Ok(AttnStage {
            wq: store.add(
                format!("attn.s{stage}.wq"),
                super::layers::init_uniform(&[fd, cfg.d_attn], fd, rng),
            ),
            wk: store.add(
                format!("attn.s{stage}.wk"),
                super::layers::init_uniform(&[d, cfg.d_attn], d, rng),
            ),
            wv: store.add(
                format!("attn.s{stage}.wv"),
                super::layers::init_uniform(&[d, fd / cfg.alpha], d, rng),
            ),
            d_attn: cfg.d_attn,
            f_i,
            d_i,
            alpha: cfg.alpha,
        })
    }

    /// (F_a^i [D_i, F_i, T_i], C_v [T, D]) -> (context [D_i/alpha, F_i, T_i],
    /// attention map [T_i, T]).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        f_a: TensorId,
        c_v: TensorId,
    ) -> (TensorId, TensorId) {
        let sh = tape.shape(f_a).to_vec(); // [D_i, F_i, T_i]
        debug_assert_eq!(sh[0], self.d_i);
        debug_assert_eq!(sh[1], self.f_i);
        let t_i = sh[2];
        // flatten: merge spectral and channel dims per time step
        let flat = tape.permute(f_a, &[2, 1, 0]); // [T_i, F_i, D_i]
        let flat = tape.reshape(flat, &[t_i, self.f_i * self.d_i]);
        let q = tape.matmul(flat, bind.get(self.wq)); // [T_i, d]
        let k = tape.matmul(c_v, bind.get(self.wk)); // [T, d]
        let v = tape.matmul(c_v, bind.get(self.wv)); // [T, F_i*D_i/alpha]
        let scores = tape.matmul_nt(q, k); // [T_i, T]
        let scores = tape.scale(scores, 1.0 / (self.d_attn as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        let av = tape.matmul(attn, v); // [T_i, F_i*D_i/alpha]
        // split back into a 3D speech-shaped tensor
        let ctx = tape.reshape(av, &[t_i, self.f_i, self.d_i / self.alpha]);
        let ctx = tape.permute(ctx, &[2, 1, 0]);
        (ctx, attn)
    }

    pub fn context_channels(&self) -> usize {
        self.d_i / self.alpha
    }
}

/// The generator stack: a coarse stage fed by repeated visual features plus
/// noise, then refiner stages that consume attention context and upsample 2x.
#[derive(Debug, Clone)]
pub struct Generator {
    entries: Vec<Conv>,
    /// Learned per-spectral-row bias of the coarse stage; breaks the spectral
    /// symmetry of the repeated input so rows can specialize.
    pos_bias: ParamId,
    blocks: Vec<Vec<ResBlock>>,
    heads: Vec<Conv>,
}

impl Generator {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, cfg: &ModelConfig) -> Self {
        let n = cfg.n_stages;
        let mut entries = Vec::new();
        let mut blocks = Vec::new();
        let mut heads = Vec::new();
        for i in 0..n {
            let c_out = cfg.stage_channels[i];
            let c_in = if i == 0 {
                cfg.d_visual + cfg.d_noise
            } else {
                cfg.stage_channels[i - 1] + cfg.stage_channels[i - 1] / cfg.alpha
            };
            entries.push(Conv::new(
                store,
                rng,
                &format!("gen.s{i}.entry"),
                c_in,
                c_out,
                &[3, 1],
                &[1, 1],
                &[1, 0],
            ));
            let n_blocks = if i == 0 { 6 } else { 3 };
            let mut stage_blocks = Vec::new();
            for b in 0..n_blocks {
                stage_blocks.push(ResBlock::new(
                    store,
                    rng,
                    &format!("gen.s{i}.block{b}"),
                    c_out,
                    c_out,
                    &[3, 1],
                    &[1, 1],
                ));
            }
            blocks.push(stage_blocks);
            heads.push(Conv::new(
                store,
                rng,
                &format!("head.s{i}"),
                c_out,
                1,
                &[1, 1],
                &[1, 1],
                &[0, 0],
            ));
        }
        let pos_bias = store.add(
            "gen.s0.pos_bias".to_string(),
            Tensor::zeros(&[cfg.stage_channels[0], cfg.f_mel / 4, 1]),
        );
        Generator { entries, pos_bias, blocks, heads }
    }

    /// Tile [T, D] visual features into a [D, F/4, T] volume.
    fn repeat_visual(tape: &mut Tape, f_v: TensorId, f_quarter: usize) -> TensorId {
        let t_len = tape.shape(f_v)[0];
        let d = tape.shape(f_v)[1];
        let dt = tape.transpose2(f_v); // [D, T]
        let dt = tape.reshape(dt, &[d, 1, t_len]);
        tape.broadcast_to(dt, &[d, f_quarter, t_len])
    }

    /// Full stack pass. `attn` supplies per-refiner context; `None` swaps in
    /// zeros (the no-attention ablation and its checkpoint format).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        cfg: &ModelConfig,
        f_v: TensorId,
        c_v: TensorId,
        z: TensorId,
        attn: Option<&[AttnStage]>,
    ) -> GenOut {
        let t_len = tape.shape(f_v)[0];
        let rep = Self::repeat_visual(tape, f_v, cfg.f_mel / 4);
        let x = tape.concat(&[rep, z], 0);
        let mut h = self.entries[0].forward(tape, bind, x);
        h = tape.add(h, bind.get(self.pos_bias));
        h = activate(tape, h);
        for b in &self.blocks[0] {
            h = b.forward(tape, bind, h);
        }
        let mut f_a = vec![h];
        let mut maps = Vec::new();
        for i in 1..cfg.n_stages {
            let prev = f_a[i - 1];
            let ctx = match attn {
                Some(stages) => {
                    let (ctx, map) = stages[i - 1].forward(tape, bind, prev, c_v);
                    maps.push(map);
                    ctx
                }
                None => {
                    let sh = tape.shape(prev).to_vec();
                    tape.zeros(&[sh[0] / cfg.alpha, sh[1], sh[2]])
                }
            };
            let cat = tape.concat(&[prev, ctx], 0);
            let sh = tape.shape(cat).to_vec();
            let up = tape
                .bilinear_resize(cat, sh[1] * 2, sh[2] * 2)
                .expect("stage extents are positive");
            let mut h = self.entries[i].forward(tape, bind, up);
            h = activate(tape, h);
            for b in &self.blocks[i] {
                h = b.forward(tape, bind, h);
            }
            f_a.push(h);
        }
        let mels = (0..cfg.n_stages)
            .map(|i| {
                let m = self.heads[i].forward(tape, bind, f_a[i]);
                let m = tape.tanh(m);
                let f_i = cfg.stage_f(i);
                tape.reshape(m, &[f_i, t_len << i])
            })
            .collect();
        GenOut { f_a, mels, attn_maps: maps }
    }
}

/// Speech representations, mel heads and attention maps from one stack pass.
pub struct GenOut {
    /// [D_i, F_i, T_i] per stage.
    pub f_a: Vec<TensorId>,
    /// Unit-range mel images [F_i, T_i] per stage.
    pub mels: Vec<TensorId>,
    /// [T_i, T] rows on the probability simplex, one per refiner.
    pub attn_maps: Vec<TensorId>,
}

/// One discriminator: shared conv trunk, unconditional head, and a
/// conditional head that sees the pooled visual context broadcast-
/// concatenated as extra channels.
#[derive(Debug, Clone)]
pub struct DiscStage {
    entry: Conv,
    blocks: Vec<ResBlock>,
    head_u: Conv,
    head_c: Conv,
}

impl DiscStage {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        cfg: &ModelConfig,
        stage: usize,
    ) -> Self {
        let c = cfg.disc_channels;
        let n_blocks = 2 + stage; // 2, 3, 4 residual blocks across stages
        let entry = Conv::new(
            store,
            rng,
            &format!("disc.s{stage}.entry"),
            1,
            c,
            &[3, 3],
            &[2, 2],
            &[1, 1],
        );
        let blocks = (0..n_blocks)
            .map(|b| {
                ResBlock::new(
                    store,
                    rng,
                    &format!("disc.s{stage}.block{b}"),
                    c,
                    c,
                    &[3, 3],
                    &[2, 2],
                )
            })
            .collect();
        let head_u = Conv::new(
            store,
            rng,
            &format!("disc.s{stage}.head_u"),
            c,
            1,
            &[1, 1],
            &[1, 1],
            &[0, 0],
        );
        let head_c = Conv::new(
            store,
            rng,
            &format!("disc.s{stage}.head_c"),
            c + cfg.d_visual,
            1,
            &[1, 1],
            &[1, 1],
            &[0, 0],
        );
        DiscStage { entry, blocks, head_u, head_c }
    }

    /// mel [F_i, L_i], condition [D] -> (unconditional logit, conditional
    /// logit), both scalars.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        mel: TensorId,
        cond: TensorId,
    ) -> (TensorId, TensorId) {
        let s = tape.shape(mel).to_vec();
        let x = tape.reshape(mel, &[1, s[0], s[1]]);
        let mut t = self.entry.forward(tape, bind, x);
        t = activate(tape, t);
        for b in &self.blocks {
            t = b.forward(tape, bind, t);
        }
        let u = self.head_u.forward(tape, bind, t);
        let logit_u = tape.mean_all(u);
        let ts = tape.shape(t).to_vec();
        let d = tape.numel(cond);
        let cond3 = tape.reshape(cond, &[d, 1, 1]);
        let cond3 = tape.broadcast_to(cond3, &[d, ts[1], ts[2]]);
        let tc = tape.concat(&[t, cond3], 0);
        let c = self.head_c.forward(tape, bind, tc);
        let logit_c = tape.mean_all(c);
        (logit_u, logit_c)
    }
}

/// Mel-to-linear magnitude mapper: two 1D convolutions around three 1D
/// residual blocks, softplus output for non-negativity.
#[derive(Debug, Clone)]
pub struct Postnet {
    conv_in: Conv,
    res: Vec<ResBlock>,
    conv_out: Conv,
    f_mel: usize,
    bins: usize,
}

impl Postnet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, cfg: &ModelConfig) -> Self {
        let c = cfg.postnet_channels;
        let bins = cfg.stft_window() / 2 + 1;
        let conv_in = Conv::new(store, rng, "postnet.conv_in", cfg.f_mel, c, &[5], &[1], &[2]);
        let res = (0..3)
            .map(|i| ResBlock::new(store, rng, &format!("postnet.res{i}"), c, c, &[5], &[1]))
            .collect();
        let conv_out = Conv::new(store, rng, "postnet.conv_out", c, bins, &[5], &[1], &[2]);
        Postnet { conv_in, res, conv_out, f_mel: cfg.f_mel, bins }
    }

    /// mel (unit range) [F, L] -> linear magnitudes [bins, L], all >= 0.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        mel: TensorId,
    ) -> Result<TensorId, ModelError> {
        let s = tape.shape(mel).to_vec();
        if s.len() != 2 || s[0] != self.f_mel {
            return Err(ModelError::BadMelShape { expected_f: self.f_mel, got: s });
        }
        let mut h = self.conv_in.forward(tape, bind, mel);
        h = activate(tape, h);
        for b in &self.res {
            h = b.forward(tape, bind, h);
        }
        let out = self.conv_out.forward(tape, bind, h);
        debug_assert_eq!(tape.shape(out)[0], self.bins);
        Ok(tape.softplus(out))
    }
}

/// Temporal average pooling of [T, D] global features into a [D] clip vector.
pub fn temporal_average(tape: &mut Tape, c_v: TensorId) -> TensorId {
    let t_len = tape.shape(c_v)[0];
    let d = tape.shape(c_v)[1];
    let s = tape.sum_axes(c_v, &[true, false]);
    let s = tape.scale(s, 1.0 / t_len as f64);
    tape.reshape(s, &[d])
}
