//! Training objectives: InfoNCE synchronization, encoder/generator sync
//! terms, conditional+unconditional non-saturating GAN losses with the R1
//! gradient penalty, multi-resolution L1 reconstruction, and their weighted
//! total.

use crate::tensor::{Tape, TensorError, TensorId};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("need at least two frames for contrastive negatives, got {got}")]
    SequenceTooShort { got: usize },
    #[error("feature lengths differ: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("discriminator score {value} leaves a non-positive log argument")]
    ScoreOutOfRange { value: f64 },
    #[error("stage {stage}: generated {gen:?} vs target {target:?}")]
    StageShapeMismatch { stage: usize, gen: Vec<usize>, target: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Balancing weights; defaults are the published operating point
/// (lambda_recon 50, lambda_sync 0.5, tau 1) with R1 gamma 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_recon: f64,
    pub lambda_sync: f64,
    pub tau: f64,
    pub r1_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_recon: 50.0, lambda_sync: 0.5, tau: 1.0, r1_gamma: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> bool {
        self.lambda_recon > 0.0 && self.lambda_sync > 0.0 && self.tau > 0.0 && self.r1_gamma > 0.0
    }
}

const COSINE_EPS: f64 = 1e-8;

/// Pairwise cosine-similarity matrix between two [t, d] feature sets.
fn similarity_matrix(tape: &mut Tape, a: TensorId, b: TensorId) -> TensorId {
    let t = tape.shape(a)[0];
    let dots = tape.matmul_nt(a, b); // [t, t]
    let aa = tape.mul(a, a);
    let bb = tape.mul(b, b);
    let na2 = tape.sum_axes(aa, &[false, true]); // [t,1]
    let nb2 = tape.sum_axes(bb, &[false, true]);
    let na = tape.norm_from_sq(na2);
    let nb = tape.norm_from_sq(nb2);
    let nbt = tape.reshape(nb, &[1, t]);
    let denom = tape.mul(na, nbt); // broadcast to [t, t]
    let denom = tape.max_scalar(denom, COSINE_EPS);
    let inv = tape.recip(denom);
    tape.mul(dots, inv)
}

/// InfoNCE over one sequence: the aligned frame is the positive, every other
/// frame of the same sequence is a negative.
///
/// mean over j of -log( exp(r_jj / tau) / sum_n exp(r_jn / tau) )
pub fn info_nce(
    tape: &mut Tape,
    f_a: TensorId,
    f_v: TensorId,
    tau: f64,
) -> Result<TensorId, LossError> {
    let (sa, sb) = (tape.shape(f_a).to_vec(), tape.shape(f_v).to_vec());
    if sa != sb {
        return Err(LossError::LengthMismatch { a: sa[0], b: sb[0] });
    }
    let t = sa[0];
    if t < 2 {
        return Err(LossError::SequenceTooShort { got: t });
    }
    let sims = similarity_matrix(tape, f_a, f_v);
    let scaled = tape.scale(sims, 1.0 / tau);
    // row-wise log-sum-exp with max subtraction
    let rowmax: Vec<f64> = tape
        .data(scaled)
        .chunks(t)
        .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let m = tape.constant_from(vec![t, 1], rowmax);
    let centered = tape.sub(scaled, m);
    let e = tape.exp(centered);
    let sums = tape.sum_axes(e, &[false, true]); // [t,1]
    let lse = tape.ln(sums);
    // diagonal entries via a constant mask
    let mut eye = vec![0.0; t * t];
    for j in 0..t {
        eye[j * t + j] = 1.0;
    }
    let mask = tape.constant_from(vec![t, t], eye);
    let diag_terms = tape.mul(scaled, mask);
    let pos = tape.sum_axes(diag_terms, &[false, true]); // [t,1]
    // loss_j = ln(sum_j) + (m_j - pos_j); the bracket is exactly zero when
    // the positive is the row maximum, which keeps the uniform case exact.
    let gap = tape.sub(m, pos);
    let per_row = tape.add(lse, gap);
    Ok(tape.mean_all(per_row))
}

/// Symmetric form: 1/2 [ L_c(F_a, F_v) + L_c(F_v, F_a) ].
pub fn encoder_sync_loss(
    tape: &mut Tape,
    f_a: TensorId,
    f_v: TensorId,
    tau: f64,
) -> Result<TensorId, LossError> {
    let av = info_nce(tape, f_a, f_v, tau)?;
    let va = info_nce(tape, f_v, f_a, tau)?;
    let s = tape.add(av, va);
    Ok(tape.scale(s, 0.5))
}

/// Frame-wise |1 - r(f_a_hat^t, f_v^t)| averaged over frames; 0 iff every
/// frame pair is positively collinear, at most 2.
pub fn generator_sync_loss(
    tape: &mut Tape,
    f_a_hat: TensorId,
    f_v: TensorId,
) -> Result<TensorId, LossError> {
    let (sa, sb) = (tape.shape(f_a_hat).to_vec(), tape.shape(f_v).to_vec());
    if sa != sb {
        return Err(LossError::LengthMismatch { a: sa[0], b: sb[0] });
    }
    let cos = tape.cosine_similarity_frames(f_a_hat, f_v, COSINE_EPS)?;
    let neg = tape.neg(cos);
    let gap = tape.add_scalar(neg, 1.0);
    let a = tape.abs(gap);
    Ok(tape.mean_all(a))
}

/// L_sync = L_e_sync + L_g_sync.
pub fn sync_loss_total(tape: &mut Tape, e_sync: TensorId, g_sync: TensorId) -> TensorId {
    tape.add(e_sync, g_sync)
}

fn check_log_arg(tape: &Tape, id: TensorId) -> Result<(), LossError> {
    let v = tape.value(id);
    if !(v > 0.0) {
        return Err(LossError::ScoreOutOfRange { value: v });
    }
    Ok(())
}

/// Non-saturating generator GAN loss over all stages:
/// -1/2 E_i[ log p_uncond_i + log p_cond_i ].
pub fn gan_generator_loss(
    tape: &mut Tape,
    p_uncond: &[TensorId],
    p_cond: &[TensorId],
) -> Result<TensorId, LossError> {
    assert_eq!(p_uncond.len(), p_cond.len());
    let n = p_uncond.len();
    let mut acc: Option<TensorId> = None;
    for (&pu, &pc) in p_uncond.iter().zip(p_cond) {
        for p in [pu, pc] {
            let v = tape.value(p);
            if !(v > 0.0 && v <= 1.0) {
                return Err(LossError::ScoreOutOfRange { value: v });
            }
            let l = tape.ln(p);
            acc = Some(match acc {
                Some(a) => tape.add(a, l),
                None => l,
            });
        }
    }
    Ok(tape.scale(acc.expect("at least one stage"), -0.5 / n as f64))
}

/// Discriminator loss over all stages and both heads:
/// -1/2 E_i[ log D(y_i) + log(1 - D(y^_i)) + log D(y_i, c) + log(1 - D(y^_i, c)) ].
pub fn gan_discriminator_loss(
    tape: &mut Tape,
    real_uncond: &[TensorId],
    real_cond: &[TensorId],
    fake_uncond: &[TensorId],
    fake_cond: &[TensorId],
) -> Result<TensorId, LossError> {
    let n = real_uncond.len();
    assert!(n == real_cond.len() && n == fake_uncond.len() && n == fake_cond.len());
    let mut acc: Option<TensorId> = None;
    let push = |tape: &mut Tape, acc: &mut Option<TensorId>, term: TensorId| {
        *acc = Some(match *acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    };
    for i in 0..n {
        for real in [real_uncond[i], real_cond[i]] {
            check_log_arg(tape, real)?;
            let l = tape.ln(real);
            push(tape, &mut acc, l);
        }
        for fake in [fake_uncond[i], fake_cond[i]] {
            let nf = tape.neg(fake);
            let one_m = tape.add_scalar(nf, 1.0);
            check_log_arg(tape, one_m)?;
            let l = tape.ln(one_m);
            push(tape, &mut acc, l);
        }
    }
    Ok(tape.scale(acc.expect("at least one stage"), -0.5 / n as f64))
}

/// R1 gradient penalty on real inputs: (gamma/2) * E_i ||grad_{y_i} D||^2,
/// summed over the heads attached to each input. The inputs must be leaves
/// with `requires_grad`; the result stays differentiable with respect to the
/// discriminator parameters.
pub fn r1_penalty(
    tape: &mut Tape,
    per_input: &[(Vec<TensorId>, TensorId)],
    gamma: f64,
) -> TensorId {
    let n = per_input.len().max(1);
    let mut acc: Option<TensorId> = None;
    for (logits, input) in per_input {
        for &logit in logits {
            let g = tape.grad(logit, &[*input])[0];
            let sq = tape.mul(g, g);
            let s = tape.sum_all(sq);
            acc = Some(match acc {
                Some(a) => tape.add(a, s),
                None => s,
            });
        }
    }
    let total = acc.unwrap_or_else(|| tape.scalar(0.0));
    tape.scale(total, gamma / 2.0 / n as f64)
}

/// Multi-resolution L1: mean over stages of the element-mean |y_i - y^_i|.
pub fn reconstruction_loss(
    tape: &mut Tape,
    generated: &[TensorId],
    targets: &[TensorId],
) -> Result<TensorId, LossError> {
    assert_eq!(generated.len(), targets.len());
    let n = generated.len();
    let mut acc: Option<TensorId> = None;
    for (stage, (&g, &y)) in generated.iter().zip(targets).enumerate() {
        if tape.shape(g) != tape.shape(y) {
            return Err(LossError::StageShapeMismatch {
                stage,
                gen: tape.shape(g).to_vec(),
                target: tape.shape(y).to_vec(),
            });
        }
        let d = tape.sub(y, g);
        let a = tape.abs(d);
        let m = tape.mean_all(a);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, m),
            None => m,
        });
    }
    Ok(tape.scale(acc.expect("at least one stage"), 1.0 / n as f64))
}

/// L = L_g + lambda_recon * L_recon + lambda_sync * L_sync.
pub fn total_generator_loss(
    tape: &mut Tape,
    l_g: TensorId,
    l_recon: TensorId,
    l_sync: TensorId,
    weights: &LossWeights,
) -> TensorId {
    let r = tape.scale(l_recon, weights.lambda_recon);
    let s = tape.scale(l_sync, weights.lambda_sync);
    let a = tape.add(l_g, r);
    tape.add(a, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn info_nce_aligned_two_frames() {
        // identity-aligned features: positive sims 1, cross sims 0
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let loss = info_nce(&mut tape, a, a, 1.0).unwrap();
        let expected = -((1.0f64).exp() / ((1.0f64).exp() + 1.0)).ln(); // 0.31326...
        assert!((tape.value(loss) - expected).abs() < 1e-7, "{}", tape.value(loss));
        assert!((tape.value(loss) - 0.3132616875182229).abs() < 1e-6);
    }

    #[test]
    fn info_nce_uniform_equals_log_t() {
        // identical frames: every pairwise similarity is 1
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 3], &[0.4, -0.2, 0.9, 0.4, -0.2, 0.9]), false);
        let loss = info_nce(&mut tape, a, a, 1.0).unwrap();
        assert_eq!(tape.value(loss), (2.0f64).ln()); // exact at T=2
        let mut tape = Tape::new();
        let rows: Vec<f64> = (0..5).flat_map(|_| [0.3, 0.7, -0.1]).collect();
        let b = tape.leaf(&t(&[5, 3], &rows), false);
        let loss5 = info_nce(&mut tape, b, b, 1.0).unwrap();
        assert!((tape.value(loss5) - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn info_nce_rewards_raising_the_positive_similarity() {
        // f_a^0 lives in span(e_0, e_extra); rotating it toward e_0 raises
        // r(0,0) while every other similarity stays fixed.
        let build = |theta: f64| -> f64 {
            let mut tape = Tape::new();
            let mut fa = vec![0.0; 3 * 4];
            fa[0] = theta.cos();
            fa[3] = theta.sin(); // extra dim
            fa[1 * 4 + 1] = 1.0;
            fa[2 * 4 + 2] = 1.0;
            let mut fv = vec![0.0; 3 * 4];
            fv[0] = 1.0;
            fv[1 * 4 + 1] = 1.0;
            fv[2 * 4 + 2] = 1.0;
            let a = tape.leaf(&t(&[3, 4], &fa), false);
            let v = tape.leaf(&t(&[3, 4], &fv), false);
            let l = info_nce(&mut tape, a, v, 1.0).unwrap();
            tape.value(l)
        };
        let low = build(0.9);
        let high = build(0.3); // higher positive similarity
        assert!(high < low, "{high} !< {low}");
    }

    #[test]
    fn info_nce_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 2], &[1.0, 0.0]), false);
        assert!(matches!(
            info_nce(&mut tape, a, a, 1.0),
            Err(LossError::SequenceTooShort { got: 1 })
        ));
    }

    #[test]
    fn encoder_sync_is_swap_invariant() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[3, 2], &[0.4, 1.0, -0.3, 0.2, 0.9, -0.5]), false);
        let b = tape.leaf(&t(&[3, 2], &[1.0, 0.1, 0.3, -0.8, 0.2, 0.6]), false);
        let ab = encoder_sync_loss(&mut tape, a, b, 1.0).unwrap();
        let ba = encoder_sync_loss(&mut tape, b, a, 1.0).unwrap();
        assert!((tape.value(ab) - tape.value(ba)).abs() < 1e-12);
    }

    #[test]
    fn generator_sync_identity_orthogonal_negation() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[0.6, 0.8, 1.0, 0.0]), false);
        let same = generator_sync_loss(&mut tape, a, a).unwrap();
        assert!(tape.value(same).abs() < 1e-6);
        let orth = tape.leaf(&t(&[2, 2], &[-0.8, 0.6, 0.0, 1.0]), false);
        let o = generator_sync_loss(&mut tape, a, orth).unwrap();
        assert!((tape.value(o) - 1.0).abs() < 1e-6);
        let n = tape.neg(a);
        let anti = generator_sync_loss(&mut tape, a, n).unwrap();
        assert!((tape.value(anti) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_losses_are_scale_invariant() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[3, 2], &[0.4, 1.0, -0.3, 0.2, 0.9, -0.5]), false);
        let b = tape.leaf(&t(&[3, 2], &[1.0, 0.1, 0.3, -0.8, 0.2, 0.6]), false);
        let base_nce = info_nce(&mut tape, a, b, 1.0).unwrap();
        let base_gs = generator_sync_loss(&mut tape, a, b).unwrap();
        let a3 = tape.scale(a, 3.0);
        let b3 = tape.scale(b, 3.0);
        let s_nce = info_nce(&mut tape, a3, b3, 1.0).unwrap();
        let s_gs = generator_sync_loss(&mut tape, a3, b3).unwrap();
        assert!((tape.value(base_nce) - tape.value(s_nce)).abs() < 1e-9);
        assert!((tape.value(base_gs) - tape.value(s_gs)).abs() < 1e-9);
    }

    #[test]
    fn gan_generator_closed_forms() {
        let mut tape = Tape::new();
        let one = tape.scalar(1.0);
        let l = gan_generator_loss(&mut tape, &[one, one, one], &[one, one, one]).unwrap();
        assert_eq!(tape.value(l), 0.0);
        let half = tape.scalar(0.5);
        let l = gan_generator_loss(&mut tape, &[half; 3], &[half; 3]).unwrap();
        assert!((tape.value(l) - (2.0f64).ln()).abs() < 1e-12);
        // monotone: lowering any p increases the loss
        let worse = tape.scalar(0.4);
        let l2 = gan_generator_loss(&mut tape, &[half, worse, half], &[half; 3]).unwrap();
        assert!(tape.value(l2) > tape.value(l));
        let zero = tape.scalar(0.0);
        assert!(matches!(
            gan_generator_loss(&mut tape, &[zero], &[half]),
            Err(LossError::ScoreOutOfRange { .. })
        ));
    }

    #[test]
    fn gan_discriminator_closed_forms() {
        let mut tape = Tape::new();
        let one = tape.scalar(1.0);
        let zero = tape.scalar(0.0);
        let l = gan_discriminator_loss(&mut tape, &[one; 3], &[one; 3], &[zero; 3], &[zero; 3])
            .unwrap();
        assert_eq!(tape.value(l), 0.0);
        let half = tape.scalar(0.5);
        let l = gan_discriminator_loss(&mut tape, &[half; 3], &[half; 3], &[half; 3], &[half; 3])
            .unwrap();
        assert!((tape.value(l) - 2.0 * (2.0f64).ln()).abs() < 1e-12);
        // fake score of 1 leaves log(0)
        assert!(gan_discriminator_loss(&mut tape, &[half], &[half], &[one], &[half]).is_err());
    }

    #[test]
    fn r1_of_linear_discriminator_is_weight_norm() {
        // D(y) = <w, y>: R1 = (gamma/2)|w|^2 for any y
        let w = t(&[4], &[0.5, -1.0, 2.0, 0.25]);
        let expect = 0.5 * w.data.iter().map(|v| v * v).sum::<f64>();
        for ydata in [[0.0; 4], [1.0, -2.0, 0.3, 0.9]] {
            let mut tape = Tape::new();
            let wid = tape.leaf(&w, true);
            let y = tape.leaf(&t(&[4], &ydata), true);
            let p = tape.mul(wid, y);
            let logit = tape.sum_all(p);
            let r1 = r1_penalty(&mut tape, &[(vec![logit], y)], 1.0);
            assert!((tape.value(r1) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn r1_gradient_wrt_parameters_matches_finite_differences() {
        use crate::tensor::gradcheck::check_gradients;
        let mut rng = {
            use rand::SeedableRng;
            rand_chacha::ChaCha12Rng::seed_from_u64(11)
        };
        let w = Tensor::rand_uniform(&[6], &mut rng, -1.0, 1.0);
        let y = Tensor::rand_uniform(&[6], &mut rng, -1.0, 1.0);
        let report = check_gradients(
            "r1-nonlinear",
            &[w],
            |tape, ids| {
                let yv = tape.leaf(&y, true);
                let p = tape.mul(ids[0], yv);
                let h = tape.tanh(p);
                let logit = tape.sum_all(h);
                r1_penalty(tape, &[(vec![logit], yv)], 1.0)
            },
            1e-5,
        );
        assert!(report.passed(1e-4), "{report:?}");
    }

    #[test]
    fn reconstruction_closed_forms_and_oracle() {
        let mut tape = Tape::new();
        let y = tape.leaf(&t(&[2, 3], &[0.1, 0.5, -0.4, 0.9, 0.0, -1.0]), false);
        let same = reconstruction_loss(&mut tape, &[y], &[y]).unwrap();
        assert_eq!(tape.value(same), 0.0);
        let off = tape.add_scalar(y, 0.3);
        let l = reconstruction_loss(&mut tape, &[off], &[y]).unwrap();
        assert!((tape.value(l) - 0.3).abs() < 1e-12);
        // random pair equals an element-loop L1
        let adata = [0.3, -0.9, 0.4, 0.2, 1.1, -0.3];
        let bdata = [0.0, 0.25, -0.6, 0.75, -0.2, 0.5];
        let a = tape.leaf(&t(&[2, 3], &adata), false);
        let b = tape.leaf(&t(&[2, 3], &bdata), false);
        let l = reconstruction_loss(&mut tape, &[a], &[b]).unwrap();
        let manual: f64 =
            adata.iter().zip(&bdata).map(|(x, y)| (x - y).abs()).sum::<f64>() / 6.0;
        assert!((tape.value(l) - manual).abs() < 1e-12);
        // shape mismatch is an error
        let small = tape.zeros(&[2, 2]);
        assert!(matches!(
            reconstruction_loss(&mut tape, &[small], &[b]),
            Err(LossError::StageShapeMismatch { .. })
        ));
    }

    #[test]
    fn total_loss_weighted_sum() {
        let mut tape = Tape::new();
        let one = tape.scalar(1.0);
        let total = total_generator_loss(&mut tape, one, one, one, &LossWeights::default());
        assert_eq!(tape.value(total), 51.5);
        let zero = tape.scalar(0.0);
        let total = total_generator_loss(&mut tape, zero, zero, zero, &LossWeights::default());
        assert_eq!(tape.value(total), 0.0);
    }

    #[test]
    fn sync_total_is_plain_addition() {
        let mut tape = Tape::new();
        let e = tape.scalar((2.0f64).ln());
        let g = tape.scalar(1.0);
        let s = sync_loss_total(&mut tape, e, g);
        assert_eq!(tape.value(s), (2.0f64).ln() + 1.0);
    }
}
