//! Alternating adversarial optimization: one discriminator update (with R1 on
//! real targets) then one generator+encoder update per step, Adam throughout.

pub mod state;

use crate::data::{self, Corpus, DataError, Split, VideoClip};
use crate::dsp::mel::MelSpectrogram;
use crate::losses::{self, LossError, LossWeights};
use crate::model::{
    layers::{Binding, ParamId},
    net::temporal_average,
    Model, ModelConfig, ModelError, DISCRIMINATOR_GROUP, GENERATOR_GROUP, POSTNET_GROUP,
};
use crate::tensor::{Tape, Tensor, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: {record}")]
    NonFiniteLoss { step: u64, record: StepRecord },
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("gradient/parameter mismatch: {0}")]
    GradMismatch(String),
    #[error("training state: {0}")]
    State(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything the trainer reads from a flat key=value config file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    pub steps: u64,
    pub batch_size: usize,
    /// Contiguous video frames sampled per training example.
    pub window: usize,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub val_interval: u64,
    pub use_attention: bool,
    pub use_sync: bool,
    pub single_discriminator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data_dir: PathBuf::from("corpus"),
            steps: 5000,
            batch_size: 8,
            window: 8,
            seed: 1,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            val_interval: 250,
            use_attention: true,
            use_sync: true,
            single_discriminator: false,
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TrainError::BadConfig(format!("line {}: no '='", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| TrainError::BadConfig(format!("line {}: {what}", lineno + 1));
            macro_rules! num {
                () => {
                    value.parse().map_err(|_| bad("not a number"))?
                };
            }
            match key {
                "data_dir" => cfg.data_dir = PathBuf::from(value),
                "steps" => cfg.steps = num!(),
                "batch_size" => cfg.batch_size = num!(),
                "window" => cfg.window = num!(),
                "seed" => cfg.seed = num!(),
                "lr" => cfg.lr = num!(),
                "beta1" => cfg.beta1 = num!(),
                "beta2" => cfg.beta2 = num!(),
                "adam_eps" => cfg.adam_eps = num!(),
                "lambda_recon" => cfg.weights.lambda_recon = num!(),
                "lambda_sync" => cfg.weights.lambda_sync = num!(),
                "tau" => cfg.weights.tau = num!(),
                "r1_gamma" => cfg.weights.r1_gamma = num!(),
                "val_interval" => cfg.val_interval = num!(),
                "use_attention" => cfg.use_attention = parse_bool(value).ok_or_else(|| bad("not a bool"))?,
                "use_sync" => cfg.use_sync = parse_bool(value).ok_or_else(|| bad("not a bool"))?,
                "single_discriminator" => {
                    cfg.single_discriminator = parse_bool(value).ok_or_else(|| bad("not a bool"))?
                }
                other => {
                    return Err(TrainError::BadConfig(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        if !cfg.weights.validate() {
            return Err(TrainError::BadConfig("loss weights must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        format!(
            "data_dir = {}\nsteps = {}\nbatch_size = {}\nwindow = {}\nseed = {}\n\
             lr = {}\nbeta1 = {}\nbeta2 = {}\nadam_eps = {}\n\
             lambda_recon = {}\nlambda_sync = {}\ntau = {}\nr1_gamma = {}\n\
             val_interval = {}\nuse_attention = {}\nuse_sync = {}\nsingle_discriminator = {}\n",
            self.data_dir.display(),
            self.steps,
            self.batch_size,
            self.window,
            self.seed,
            self.lr,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.weights.lambda_recon,
            self.weights.lambda_sync,
            self.weights.tau,
            self.weights.r1_gamma,
            self.val_interval,
            self.use_attention,
            self.use_sync,
            self.single_discriminator,
        )
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Bias-corrected Adam over one parameter group.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(cfg: &TrainConfig, shapes: &[Vec<usize>]) -> Self {
        AdamState {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }
}

/// One Adam step over `group`; `grads[i]` pairs with `group[i]`.
pub fn adam_update(
    store: &mut crate::model::layers::ParamStore,
    group: &[ParamId],
    grads: &[Tensor],
    state: &mut AdamState,
) -> Result<(), TrainError> {
    if group.len() != grads.len() || group.len() != state.m.len() {
        return Err(TrainError::GradMismatch(format!(
            "group {} / grads {} / moments {}",
            group.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for ((&pid, g), (m, v)) in group
        .iter()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let p = store.value_mut(pid);
        if p.shape != g.shape {
            return Err(TrainError::GradMismatch(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape, g.shape
            )));
        }
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = state.beta1 * m.data[i] + (1.0 - state.beta1) * gi;
            v.data[i] = state.beta2 * v.data[i] + (1.0 - state.beta2) * gi * gi;
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            p.data[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// step records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub l_g: f64,
    pub l_d: f64,
    pub l_recon: f64,
    pub l_e_sync: f64,
    pub l_g_sync: f64,
    pub r1: f64,
}

impl StepRecord {
    pub fn finite(&self) -> bool {
        [self.l_g, self.l_d, self.l_recon, self.l_e_sync, self.l_g_sync, self.r1]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.l_g, self.l_d, self.l_recon, self.l_e_sync, self.l_g_sync, self.r1
        )
    }

    pub const CSV_HEADER: &'static str = "step,L_g,L_d,L_recon,L_e_sync,L_g_sync,R1";
}

impl std::fmt::Display for StepRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "step {}: L_g={:.4} L_d={:.4} L_recon={:.4} L_e_sync={:.4} L_g_sync={:.4} R1={:.4}",
            self.step, self.l_g, self.l_d, self.l_recon, self.l_e_sync, self.l_g_sync, self.r1
        )
    }
}

/// An in-memory training example: full clip plus unit-range mel targets.
#[derive(Debug, Clone)]
pub struct Example {
    pub clip: VideoClip,
    /// Unit-range mel image [80, 4T].
    pub mel_unit: Tensor,
}

pub fn load_examples(corpus: &Corpus, split: Split) -> Result<Vec<Example>, TrainError> {
    let mut out = Vec::new();
    for entry in corpus.entries_of(split) {
        let (clip, mel_values) = corpus.load_pair(entry)?;
        let mel = MelSpectrogram {
            values: mel_values,
            frame_hop: 160,
            sample_rate: 16000,
        };
        out.push(Example { clip, mel_unit: mel.to_unit() });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// the trainer
// ---------------------------------------------------------------------------

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub g_group: Vec<ParamId>,
    pub d_group: Vec<ParamId>,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    pub rng: ChaCha12Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, model_config: ModelConfig) -> Result<Self, TrainError> {
        let mut mc = model_config;
        mc.use_attention = config.use_attention;
        let model = Model::new(mc, config.seed)?;
        let g_group = model.params.group(GENERATOR_GROUP);
        let d_group = model.params.group(DISCRIMINATOR_GROUP);
        let g_shapes: Vec<_> = g_group.iter().map(|&p| model.params.value(p).shape.clone()).collect();
        let d_shapes: Vec<_> = d_group.iter().map(|&p| model.params.value(p).shape.clone()).collect();
        let opt_g = AdamState::new(&config, &g_shapes);
        let opt_d = AdamState::new(&config, &d_shapes);
        let rng = ChaCha12Rng::seed_from_u64(config.seed.wrapping_mul(0x9e3779b97f4a7c15));
        Ok(Trainer { model, config, g_group, d_group, opt_g, opt_d, rng, step: 0 })
    }

    fn gan_binding(&self, tape: &mut Tape, trainable: &[&str]) -> Binding {
        // postnet trains in its own stage; keep its parameters off GAN tapes
        Binding::bind_filtered(
            &self.model.params,
            tape,
            |name| !name.starts_with("postnet."),
            |name| trainable.iter().any(|p| name.starts_with(p)),
        )
    }

    /// Stage indices whose discriminators participate in the losses.
    fn active_stages(&self) -> Vec<usize> {
        if self.config.single_discriminator {
            vec![self.model.config.n_stages - 1]
        } else {
            (0..self.model.config.n_stages).collect()
        }
    }

    /// One alternating update on a batch of sampled windows: the
    /// discriminators see this step's fakes detached, update first, and the
    /// generator is then scored against the freshly updated discriminators.
    pub fn train_step(&mut self, batch: &[(VideoClip, Tensor)]) -> Result<StepRecord, TrainError> {
        assert!(!batch.is_empty());
        let n_stages = self.model.config.n_stages;
        let inv_b = 1.0 / batch.len() as f64;
        let stages = self.active_stages();

        // ---- one generator forward per sample ------------------------------
        let mut tape = Tape::new();
        let bind = self.gan_binding(&mut tape, GENERATOR_GROUP);
        let bind_phi_a_frozen = Binding::bind_filtered(
            &self.model.params,
            &mut tape,
            |name| name.starts_with("phi_a."),
            |_| false,
        );
        let mut fwds = Vec::with_capacity(batch.len());
        let mut conds = Vec::with_capacity(batch.len());
        for (clip, _) in batch.iter() {
            let z = Tensor::rand_normal(&self.model.config.noise_shape(clip.t()), &mut self.rng);
            let fwd = self.model.forward_generator(&mut tape, &bind, clip, Some(&z))?;
            let cond_full = temporal_average(&mut tape, fwd.c_v);
            conds.push(tape.detach(cond_full));
            fwds.push(fwd);
        }

        // ---- discriminator update on a separate tape ------------------------
        let mut dtape = Tape::new();
        let dbind = Binding::bind_filtered(
            &self.model.params,
            &mut dtape,
            |name| name.starts_with("disc."),
            |name| name.starts_with("disc."),
        );
        let mut d_acc: Option<TensorId> = None;
        let mut r1_pairs: Vec<(Vec<TensorId>, TensorId)> = Vec::new();
        for (i_sample, (_, mel_unit)) in batch.iter().enumerate() {
            let cond = {
                let t = tape.to_tensor(conds[i_sample]);
                dtape.constant(&t)
            };
            let targets = data::multiscale_targets(mel_unit)?;
            let mut real_u = Vec::new();
            let mut real_c = Vec::new();
            let mut fake_u = Vec::new();
            let mut fake_c = Vec::new();
            for &i in &stages {
                let y_leaf = dtape.leaf(&targets[i], true);
                let (ru_l, rc_l) =
                    self.model.discriminators[i].forward(&mut dtape, &dbind, y_leaf, cond);
                let fake = {
                    let t = tape.to_tensor(fwds[i_sample].gen.mels[i]);
                    dtape.constant(&t)
                };
                let (fu_l, fc_l) =
                    self.model.discriminators[i].forward(&mut dtape, &dbind, fake, cond);
                real_u.push(dtape.sigmoid(ru_l));
                real_c.push(dtape.sigmoid(rc_l));
                fake_u.push(dtape.sigmoid(fu_l));
                fake_c.push(dtape.sigmoid(fc_l));
                r1_pairs.push((vec![ru_l, rc_l], y_leaf));
            }
            let l_d =
                losses::gan_discriminator_loss(&mut dtape, &real_u, &real_c, &fake_u, &fake_c)?;
            d_acc = Some(match d_acc {
                Some(a) => dtape.add(a, l_d),
                None => l_d,
            });
        }
        let l_d_mean = {
            let sum = d_acc.expect("non-empty batch");
            dtape.scale(sum, inv_b)
        };
        let r1 = losses::r1_penalty(&mut dtape, &r1_pairs, self.config.weights.r1_gamma);
        let d_total = dtape.add(l_d_mean, r1);
        let d_ids = dbind.tensor_ids(&self.d_group);
        let d_grads = dtape.grad(d_total, &d_ids);
        let d_grad_tensors: Vec<Tensor> = d_grads.iter().map(|&g| dtape.to_tensor(g)).collect();
        let l_d_value = dtape.value(l_d_mean);
        let r1_value = dtape.value(r1);
        drop(dtape);
        adam_update(&mut self.model.params, &self.d_group, &d_grad_tensors, &mut self.opt_d)?;

        // ---- generator + encoder losses against the updated discriminators --
        let bind_disc_updated = Binding::bind_filtered(
            &self.model.params,
            &mut tape,
            |name| name.starts_with("disc."),
            |_| false,
        );
        let mut acc_g: Option<TensorId> = None;
        let mut acc_recon: Option<TensorId> = None;
        let mut acc_e: Option<TensorId> = None;
        let mut acc_gs: Option<TensorId> = None;
        let add_to = |tape: &mut Tape, acc: &mut Option<TensorId>, v: TensorId| {
            *acc = Some(match *acc {
                Some(a) => tape.add(a, v),
                None => v,
            });
        };
        for (i_sample, (_, mel_unit)) in batch.iter().enumerate() {
            let fwd = &fwds[i_sample];
            let cond = conds[i_sample];
            let targets = data::multiscale_targets(mel_unit)?;
            // GAN term on the active stages with the updated discriminators
            let mut p_u = Vec::new();
            let mut p_c = Vec::new();
            for &i in &stages {
                let (lu, lc) = self.model.discriminators[i].forward(
                    &mut tape,
                    &bind_disc_updated,
                    fwd.gen.mels[i],
                    cond,
                );
                p_u.push(tape.sigmoid(lu));
                p_c.push(tape.sigmoid(lc));
            }
            let l_g = losses::gan_generator_loss(&mut tape, &p_u, &p_c)?;
            add_to(&mut tape, &mut acc_g, l_g);
            // multi-scale reconstruction
            let target_ids: Vec<TensorId> = targets.iter().map(|t| tape.constant(t)).collect();
            let l_recon = losses::reconstruction_loss(&mut tape, &fwd.gen.mels, &target_ids)?;
            add_to(&mut tape, &mut acc_recon, l_recon);
            // synchronization
            if self.config.use_sync {
                let mel_id = tape.constant(mel_unit);
                let f_a = self.model.phi_a.forward(&mut tape, &bind, mel_id)?;
                let l_e = losses::encoder_sync_loss(&mut tape, f_a, fwd.f_v, self.config.weights.tau)?;
                add_to(&mut tape, &mut acc_e, l_e);
                let f_a_hat = self.model.phi_a.forward(
                    &mut tape,
                    &bind_phi_a_frozen,
                    fwd.gen.mels[n_stages - 1],
                )?;
                let l_gs = losses::generator_sync_loss(&mut tape, f_a_hat, fwd.f_v)?;
                add_to(&mut tape, &mut acc_gs, l_gs);
            }
        }
        let l_g_mean = {
            let s = acc_g.expect("non-empty");
            tape.scale(s, inv_b)
        };
        let l_recon_mean = {
            let s = acc_recon.expect("non-empty");
            tape.scale(s, inv_b)
        };
        let (l_e_mean, l_gs_mean) = if self.config.use_sync {
            let e = acc_e.expect("non-empty");
            let gs = acc_gs.expect("non-empty");
            (tape.scale(e, inv_b), tape.scale(gs, inv_b))
        } else {
            (tape.scalar(0.0), tape.scalar(0.0))
        };
        let l_sync = losses::sync_loss_total(&mut tape, l_e_mean, l_gs_mean);
        let total =
            losses::total_generator_loss(&mut tape, l_g_mean, l_recon_mean, l_sync, &self.config.weights);
        let g_ids = bind.tensor_ids(&self.g_group);
        let g_grads = tape.grad(total, &g_ids);
        let g_grad_tensors: Vec<Tensor> = g_grads.iter().map(|&g| tape.to_tensor(g)).collect();
        let record = StepRecord {
            step: self.step,
            l_g: tape.value(l_g_mean),
            l_d: l_d_value,
            l_recon: tape.value(l_recon_mean),
            l_e_sync: tape.value(l_e_mean),
            l_g_sync: tape.value(l_gs_mean),
            r1: r1_value,
        };
        drop(tape);
        if !record.finite() {
            return Err(TrainError::NonFiniteLoss { step: self.step, record });
        }
        adam_update(&mut self.model.params, &self.g_group, &g_grad_tensors, &mut self.opt_g)?;
        self.step += 1;
        Ok(record)
    }

    /// Mean validation reconstruction loss on full clips with z = 0.
    pub fn validate(&self, examples: &[Example]) -> Result<f64, TrainError> {
        let mut total = 0.0;
        for ex in examples {
            let out = self.model.synthesize(&ex.clip, None)?;
            let targets = data::multiscale_targets(&ex.mel_unit)?;
            let mut tape = Tape::new();
            let gen: Vec<TensorId> = out.mels_unit.iter().map(|m| tape.constant(m)).collect();
            let tgt: Vec<TensorId> = targets.iter().map(|t| tape.constant(t)).collect();
            let l = losses::reconstruction_loss(&mut tape, &gen, &tgt)?;
            total += tape.value(l);
        }
        Ok(total / examples.len().max(1) as f64)
    }

    /// Draw a batch of training windows.
    pub fn sample_batch(
        &mut self,
        examples: &[Example],
    ) -> Result<Vec<(VideoClip, Tensor)>, TrainError> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let idx = self.rng.random_range(0..examples.len());
            let ex = &examples[idx];
            let w = data::sample_window(&ex.clip, &ex.mel_unit, self.config.window, &mut self.rng)?;
            batch.push((w.clip, w.mel));
        }
        Ok(batch)
    }
}

/// Outcome of a `fit` run.
pub struct FitReport {
    pub initial_val: f64,
    pub best_val: f64,
    pub final_val: f64,
    pub steps_done: u64,
    pub log_path: PathBuf,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Epoch loop with window sampling, periodic validation, best-checkpoint
/// retention and bit-exact resume from the state file in `out_dir`.
pub fn fit(
    config: &TrainConfig,
    model_config: ModelConfig,
    out_dir: &Path,
    quiet: bool,
) -> Result<FitReport, TrainError> {
    std::fs::create_dir_all(out_dir)?;
    let corpus = data::load_corpus(&config.data_dir)?;
    let train = load_examples(&corpus, Split::Train)?;
    let val = load_examples(&corpus, Split::Val)?;
    if train.is_empty() {
        return Err(TrainError::BadConfig("empty training split".into()));
    }

    let state_path = out_dir.join("state.vcst");
    let log_path = out_dir.join("log.csv");
    let mut trainer = if state_path.exists() {
        state::load_state(&state_path, config)?
    } else {
        Trainer::new(config.clone(), model_config)?
    };
    let resumed_from = trainer.step;
    let mut log = std::io::BufWriter::new(if resumed_from > 0 {
        std::fs::OpenOptions::new().append(true).open(&log_path)?
    } else {
        let mut f = std::fs::File::create(&log_path)?;
        writeln!(f, "{}", StepRecord::CSV_HEADER)?;
        f
    });

    let initial_val = trainer.validate(&val)?;
    let mut best_val = f64::INFINITY;
    let best_path = out_dir.join("best.vcag");
    let final_path = out_dir.join("final.vcag");
    std::fs::write(out_dir.join("config.txt"), config.to_text())?;

    while trainer.step < config.steps {
        let batch = trainer.sample_batch(&train)?;
        let record = trainer.train_step(&batch)?;
        writeln!(log, "{}", record.csv_row())?;
        let at_val = trainer.step % config.val_interval == 0 || trainer.step == config.steps;
        if at_val {
            log.flush()?;
            let v = trainer.validate(&val)?;
            if v < best_val {
                best_val = v;
                crate::model::checkpoint::save(&best_path, &trainer.model)?;
            }
            state::save_state(&state_path, &trainer)?;
            if !quiet {
                println!("{record}  val_L_recon={v:.4}");
            }
        }
    }
    log.flush()?;
    let final_val = trainer.validate(&val)?;
    if final_val < best_val {
        best_val = final_val;
        crate::model::checkpoint::save(&best_path, &trainer.model)?;
    }
    crate::model::checkpoint::save(&final_path, &trainer.model)?;
    state::save_state(&state_path, &trainer)?;
    Ok(FitReport {
        initial_val,
        best_val,
        final_val,
        steps_done: trainer.step - resumed_from,
        log_path,
        best_checkpoint: best_path,
        final_checkpoint: final_path,
    })
}

/// Separate postnet stage: L1 regression from ground-truth mels to
/// ground-truth linear magnitudes on the training split.
pub struct PostnetReport {
    pub initial_l1: f64,
    pub final_l1: f64,
}

pub fn train_postnet(
    model: &mut Model,
    corpus: &Corpus,
    steps: u64,
    batch_size: usize,
    seed: u64,
    lr: f64,
) -> Result<PostnetReport, TrainError> {
    // (mel_unit, linear magnitudes) pairs from the train split
    let mut pairs = Vec::new();
    for entry in corpus.entries_of(Split::Train) {
        let wav = crate::dsp::wav::read_wav(&corpus.root.join(&entry.wav)).map_err(DataError::Dsp)?;
        let (lin, _) = crate::dsp::stft(&wav.samples, 640, 160, wav.sample_rate)
            .map_err(DataError::Dsp)?;
        let mel = MelSpectrogram {
            values: crate::dsp::mel::read_melb(&corpus.root.join(&entry.melb))
                .map_err(DataError::Dsp)?
                .values,
            frame_hop: 160,
            sample_rate: 16000,
        };
        pairs.push((mel.to_unit(), lin.mags));
    }
    if pairs.is_empty() {
        return Err(TrainError::BadConfig("empty training split".into()));
    }
    let group = model.params.group(POSTNET_GROUP);
    let shapes: Vec<_> = group.iter().map(|&p| model.params.value(p).shape.clone()).collect();
    let mut opt = AdamState::new(
        &TrainConfig { lr, ..TrainConfig::default() },
        &shapes,
    );
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let eval_l1 = |model: &Model, pairs: &[(Tensor, Tensor)]| -> Result<f64, TrainError> {
        let mut total = 0.0;
        for (mel, lin) in pairs.iter().take(16) {
            let mut tape = Tape::new();
            let bind = Binding::bind_filtered(
                &model.params,
                &mut tape,
                |n| n.starts_with("postnet."),
                |_| false,
            );
            let m = tape.constant(mel);
            let out = model.postnet.forward(&mut tape, &bind, m)?;
            let target = tape.constant(lin);
            let d = tape.sub(target, out);
            let a = tape.abs(d);
            let l = tape.mean_all(a);
            total += tape.value(l);
        }
        Ok(total / pairs.len().min(16) as f64)
    };

    let initial_l1 = eval_l1(model, &pairs)?;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let bind = Binding::bind_filtered(
            &model.params,
            &mut tape,
            |n| n.starts_with("postnet."),
            |n| n.starts_with("postnet."),
        );
        let mut acc: Option<TensorId> = None;
        for _ in 0..batch_size {
            let (mel, lin) = &pairs[rng.random_range(0..pairs.len())];
            let m = tape.constant(mel);
            let out = model.postnet.forward(&mut tape, &bind, m)?;
            let target = tape.constant(lin);
            let d = tape.sub(target, out);
            let a = tape.abs(d);
            let l = tape.mean_all(a);
            acc = Some(match acc {
                Some(prev) => tape.add(prev, l),
                None => l,
            });
        }
        let sum = acc.expect("non-empty batch");
        let loss = tape.scale(sum, 1.0 / batch_size as f64);
        if !tape.value(loss).is_finite() {
            return Err(TrainError::BadConfig("non-finite postnet loss".into()));
        }
        let ids = bind.tensor_ids(&group);
        let grads = tape.grad(loss, &ids);
        let grad_tensors: Vec<Tensor> = grads.iter().map(|&g| tape.to_tensor(g)).collect();
        drop(tape);
        adam_update(&mut model.params, &group, &grad_tensors, &mut opt)?;
    }
    let final_l1 = eval_l1(model, &pairs)?;
    Ok(PostnetReport { initial_l1, final_l1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut store = crate::model::layers::ParamStore::new();
        let p = store.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
        let before = store.value(p).clone();
        let cfg = TrainConfig::default();
        let mut st = AdamState::new(&cfg, &[vec![3]]);
        adam_update(&mut store, &[p], &[Tensor::zeros(&[3])], &mut st).unwrap();
        assert_eq!(store.value(p).data, before.data);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut store = crate::model::layers::ParamStore::new();
        let p = store.add("w", Tensor::new(vec![2], vec![0.3, -0.4]));
        let cfg = TrainConfig::default();
        let mut st = AdamState::new(&cfg, &[vec![2]]);
        let g = Tensor::new(vec![2], vec![0.7, -1.3]);
        adam_update(&mut store, &[p], &[g], &mut st).unwrap();
        let moved = store.value(p);
        assert!((moved.data[0] - (0.3 - 1e-4)).abs() < 1e-9);
        assert!((moved.data[1] - (-0.4 + 1e-4)).abs() < 1e-9);
    }

    #[test]
    fn adam_shape_mismatch_is_an_error() {
        let mut store = crate::model::layers::ParamStore::new();
        let p = store.add("w", Tensor::zeros(&[3]));
        let cfg = TrainConfig::default();
        let mut st = AdamState::new(&cfg, &[vec![3]]);
        let bad = Tensor::zeros(&[2]);
        assert!(adam_update(&mut store, &[p], &[bad], &mut st).is_err());
    }

    #[test]
    fn config_roundtrip_and_unknown_key() {
        let cfg = TrainConfig::default();
        let parsed = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
        assert!(TrainConfig::parse("bogus = 3").is_err());
        let with_comment = "steps = 12 # short\nlambda_recon = 50\n";
        assert_eq!(TrainConfig::parse(with_comment).unwrap().steps, 12);
    }

    #[test]
    fn defaults_match_published_operating_point() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.weights.lambda_recon, 50.0);
        assert_eq!(cfg.weights.lambda_sync, 0.5);
        assert_eq!(cfg.weights.tau, 1.0);
    }
}
