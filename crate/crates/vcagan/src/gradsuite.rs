//! The full finite-difference verification suite: every differentiable
//! primitive, every loss, the attention block, and an end-to-end pass through
//! the whole generator at a miniature configuration.

use crate::losses;
use crate::model::{layers::Binding, Model, ModelConfig};
use crate::tensor::gradcheck::{check_gradients, GradCheckReport};
use crate::tensor::{rnn, Tape, Tensor, TensorId};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub const SUITE_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

pub struct SuiteReport {
    pub checks: Vec<GradCheckReport>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed(SUITE_TOL))
    }
}

fn rng_for(name: &str, seed: u64) -> ChaCha12Rng {
    let mut h = 0xcbf29ce484222325u64;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    ChaCha12Rng::seed_from_u64(h ^ seed.wrapping_mul(0x9e3779b97f4a7c15))
}

/// Inputs live away from activation kinks: |x| in [0.1, 1.1).
fn smooth_uniform(shape: &[usize], rng: &mut ChaCha12Rng) -> Tensor {
    let mut t = Tensor::rand_uniform(shape, rng, 0.1, 1.1);
    let signs = Tensor::rand_uniform(&t.shape, rng, -1.0, 1.0);
    for (v, s) in t.data.iter_mut().zip(&signs.data) {
        if *s < 0.0 {
            *v = -*v;
        }
    }
    t
}

type Builder = Box<dyn Fn(&mut Tape, &[TensorId]) -> TensorId>;

fn run_check(
    out: &mut Vec<GradCheckReport>,
    name: &str,
    seeds: usize,
    make: impl Fn(&mut ChaCha12Rng) -> (Vec<Tensor>, Builder),
) {
    let mut worst: Option<GradCheckReport> = None;
    for seed in 0..seeds as u64 {
        let mut rng = rng_for(name, seed);
        let (inputs, build) = make(&mut rng);
        let report = check_gradients(name, &inputs, |t, ids| build(t, ids), EPS);
        let replace = match &worst {
            None => true,
            Some(w) => {
                !report.failures.is_empty() || report.max_rel_error > w.max_rel_error
            }
        };
        if replace {
            worst = Some(report);
        }
    }
    out.push(worst.expect("at least one seed"));
}

pub fn run_suite(seeds: usize) -> SuiteReport {
    let start = std::time::Instant::now();
    let mut checks = Vec::new();
    let c = &mut checks;

    run_check(c, "conv1d", seeds, |rng| {
        let x = smooth_uniform(&[3, 9], rng);
        let w = smooth_uniform(&[2, 3, 3], rng);
        let b = smooth_uniform(&[2], rng);
        (
            vec![x, w, b],
            Box::new(|t, ids| {
                let y = t.conv(ids[0], ids[1], &[2], &[1]).unwrap();
                let y = t.add_channel_bias(y, ids[2]);
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            }),
        )
    });

    run_check(c, "conv2d", seeds, |rng| {
        let x = smooth_uniform(&[2, 6, 5], rng);
        let w = smooth_uniform(&[3, 2, 3, 3], rng);
        (
            vec![x, w],
            Box::new(|t, ids| {
                let y = t.conv(ids[0], ids[1], &[1, 2], &[1, 1]).unwrap();
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            }),
        )
    });

    run_check(c, "conv3d", seeds, |rng| {
        let x = smooth_uniform(&[1, 4, 4, 3], rng);
        let w = smooth_uniform(&[2, 1, 3, 3, 1], rng);
        (
            vec![x, w],
            Box::new(|t, ids| {
                let y = t.conv(ids[0], ids[1], &[1, 2, 1], &[1, 1, 0]).unwrap();
                let s = t.tanh(y);
                t.sum_all(s)
            }),
        )
    });

    run_check(c, "gru_bidirectional", seeds, |rng| {
        let seq = smooth_uniform(&[4, 3], rng);
        let mk = |rng: &mut ChaCha12Rng, d_in: usize| {
            [
                Tensor::rand_uniform(&[d_in, 6], rng, -0.6, 0.6),
                Tensor::rand_uniform(&[2, 6], rng, -0.6, 0.6),
                Tensor::rand_uniform(&[1, 6], rng, -0.3, 0.3),
                Tensor::rand_uniform(&[1, 6], rng, -0.3, 0.3),
            ]
        };
        let mut inputs = vec![seq];
        inputs.extend(mk(rng, 3));
        inputs.extend(mk(rng, 3));
        (
            vec![
                inputs[0].clone(),
                inputs[1].clone(),
                inputs[2].clone(),
                inputs[3].clone(),
                inputs[4].clone(),
                inputs[5].clone(),
                inputs[6].clone(),
                inputs[7].clone(),
                inputs[8].clone(),
            ],
            Box::new(|t, ids| {
                let layer = rnn::GruLayer {
                    fwd: rnn::GruDirection { w_ih: ids[1], w_hh: ids[2], b_ih: ids[3], b_hh: ids[4] },
                    bwd: rnn::GruDirection { w_ih: ids[5], w_hh: ids[6], b_ih: ids[7], b_hh: ids[8] },
                };
                let out = rnn::gru_bidirectional(t, ids[0], &[layer], 2).unwrap();
                let sq = t.mul(out, out);
                t.sum_all(sq)
            }),
        )
    });

    run_check(c, "softmax_rows", seeds, |rng| {
        let x = Tensor::rand_uniform(&[3, 5], rng, -2.0, 2.0);
        let w = smooth_uniform(&[3, 5], rng);
        (
            vec![x, w],
            Box::new(|t, ids| {
                let s = t.softmax_rows(ids[0]);
                let p = t.mul(s, ids[1]);
                t.sum_all(p)
            }),
        )
    });

    run_check(c, "bilinear_resize", seeds, |rng| {
        let x = smooth_uniform(&[2, 4, 6], rng);
        (
            vec![x],
            Box::new(|t, ids| {
                let up = t.bilinear_resize(ids[0], 7, 9).unwrap();
                let dn = t.bilinear_resize(up, 3, 4).unwrap();
                let sq = t.mul(dn, dn);
                t.sum_all(sq)
            }),
        )
    });

    run_check(c, "cosine_similarity_frames", seeds, |rng| {
        let a = smooth_uniform(&[4, 5], rng);
        let b = smooth_uniform(&[4, 5], rng);
        (
            vec![a, b],
            Box::new(|t, ids| {
                let c = t.cosine_similarity_frames(ids[0], ids[1], 1e-8).unwrap();
                let sq = t.mul(c, c);
                t.sum_all(sq)
            }),
        )
    });

    run_check(c, "matmul_family", seeds, |rng| {
        let a = smooth_uniform(&[3, 4], rng);
        let b = smooth_uniform(&[4, 5], rng);
        let d = smooth_uniform(&[3, 5], rng);
        (
            vec![a, b, d],
            Box::new(|t, ids| {
                let ab = t.matmul(ids[0], ids[1]); // [3,5]
                let nt = t.matmul_nt(ab, ids[2]); // [3,3]
                let tn = t.matmul_tn(ids[0], ab); // [4,5]
                let s1 = t.sum_all(nt);
                let s2 = t.sum_all(tn);
                t.add(s1, s2)
            }),
        )
    });

    run_check(c, "elementwise_chain", seeds, |rng| {
        let x = smooth_uniform(&[12], rng);
        (
            vec![x],
            Box::new(|t, ids| {
                let e = t.exp(ids[0]);
                let l = t.ln(e);
                let sg = t.sigmoid(l);
                let th = t.tanh(sg);
                let sp = t.softplus(th);
                let sq = t.sqrt(sp);
                let r = t.recip(sq);
                let lr = t.leaky_relu(r, 0.2);
                let ab = t.abs(lr);
                t.sum_all(ab)
            }),
        )
    });

    run_check(c, "shape_movement", seeds, |rng| {
        let x = smooth_uniform(&[2, 3, 4], rng);
        let y = smooth_uniform(&[2, 5, 4], rng);
        (
            vec![x, y],
            Box::new(|t, ids| {
                let p = t.permute(ids[0], &[1, 0, 2]); // [3,2,4]
                let r = t.reshape(p, &[3, 8]);
                let sl = t.slice(ids[1], 1, 1, 3); // [2,3,4]
                let pd = t.pad_axis(sl, 1, 0, 3);
                let rp = t.reshape(pd, &[3, 8]);
                let cat = t.concat(&[r, rp], 0); // [6,8]
                let sm = t.sum_axes(cat, &[false, true]);
                let sq = t.mul(sm, sm);
                t.sum_all(sq)
            }),
        )
    });

    run_check(c, "attention_block", seeds, |rng| {
        // Eq.-2-shaped: flatten -> Q/K/V -> scaled dot product -> split
        let f_a = smooth_uniform(&[4, 5, 3], rng); // [D_i, F_i, T_i]
        let c_v = smooth_uniform(&[6, 4], rng); // [T, D]
        let wq = smooth_uniform(&[20, 4], rng);
        let wk = smooth_uniform(&[4, 4], rng);
        let wv = smooth_uniform(&[4, 10], rng);
        (
            vec![f_a, c_v, wq, wk, wv],
            Box::new(|t, ids| {
                let flat = t.permute(ids[0], &[2, 1, 0]);
                let flat = t.reshape(flat, &[3, 20]);
                let q = t.matmul(flat, ids[2]);
                let k = t.matmul(ids[1], ids[3]);
                let v = t.matmul(ids[1], ids[4]);
                let scores = t.matmul_nt(q, k);
                let scores = t.scale(scores, 0.5);
                let a = t.softmax_rows(scores);
                let av = t.matmul(a, v);
                let ctx = t.reshape(av, &[3, 5, 2]);
                let ctx = t.permute(ctx, &[2, 1, 0]);
                let sq = t.mul(ctx, ctx);
                t.sum_all(sq)
            }),
        )
    });

    run_check(c, "loss_info_nce", seeds, |rng| {
        let a = smooth_uniform(&[5, 4], rng);
        let b = smooth_uniform(&[5, 4], rng);
        (
            vec![a, b],
            Box::new(|t, ids| losses::info_nce(t, ids[0], ids[1], 1.0).unwrap()),
        )
    });

    run_check(c, "loss_encoder_sync", seeds, |rng| {
        let a = smooth_uniform(&[4, 3], rng);
        let b = smooth_uniform(&[4, 3], rng);
        (
            vec![a, b],
            Box::new(|t, ids| losses::encoder_sync_loss(t, ids[0], ids[1], 1.0).unwrap()),
        )
    });

    run_check(c, "loss_generator_sync", seeds, |rng| {
        let a = smooth_uniform(&[4, 3], rng);
        let b = smooth_uniform(&[4, 3], rng);
        (
            vec![a, b],
            Box::new(|t, ids| losses::generator_sync_loss(t, ids[0], ids[1]).unwrap()),
        )
    });

    run_check(c, "loss_gan_generator", seeds, |rng| {
        let logits = Tensor::rand_uniform(&[6], rng, -1.5, 1.5);
        (
            vec![logits],
            Box::new(|t, ids| {
                let mut pu = Vec::new();
                let mut pc = Vec::new();
                for i in 0..3 {
                    let lu = t.slice(ids[0], 0, i, 1);
                    let lc = t.slice(ids[0], 0, 3 + i, 1);
                    pu.push(t.sigmoid(lu));
                    pc.push(t.sigmoid(lc));
                }
                losses::gan_generator_loss(t, &pu, &pc).unwrap()
            }),
        )
    });

    run_check(c, "loss_gan_discriminator_with_r1", seeds, |rng| {
        // small nonlinear discriminator: logit = sum(tanh(w * y)) per head
        let w_u = smooth_uniform(&[6], rng);
        let w_c = smooth_uniform(&[6], rng);
        let y_real = smooth_uniform(&[6], rng);
        let y_fake = smooth_uniform(&[6], rng);
        (
            vec![w_u, w_c],
            Box::new(move |t, ids| {
                let yr = t.leaf(&y_real, true);
                let yf = t.constant(&y_fake);
                let head = |t: &mut Tape, w: TensorId, y: TensorId| {
                    let p = t.mul(w, y);
                    let h = t.tanh(p);
                    t.sum_all(h)
                };
                let lu_r = head(t, ids[0], yr);
                let lc_r = head(t, ids[1], yr);
                let lu_f = head(t, ids[0], yf);
                let lc_f = head(t, ids[1], yf);
                let ru = t.sigmoid(lu_r);
                let rc = t.sigmoid(lc_r);
                let fu = t.sigmoid(lu_f);
                let fc = t.sigmoid(lc_f);
                let l_d =
                    losses::gan_discriminator_loss(t, &[ru], &[rc], &[fu], &[fc]).unwrap();
                let r1 = losses::r1_penalty(t, &[(vec![lu_r, lc_r], yr)], 1.0);
                t.add(l_d, r1)
            }),
        )
    });

    run_check(c, "loss_reconstruction", seeds, |rng| {
        let g0 = smooth_uniform(&[4, 6], rng);
        let g1 = smooth_uniform(&[8, 12], rng);
        let y0 = smooth_uniform(&[4, 6], rng);
        let y1 = smooth_uniform(&[8, 12], rng);
        (
            vec![g0, g1],
            Box::new(move |t, ids| {
                let t0 = t.constant(&y0);
                let t1 = t.constant(&y1);
                losses::reconstruction_loss(t, &[ids[0], ids[1]], &[t0, t1]).unwrap()
            }),
        )
    });

    run_check(c, "loss_total_weighted", seeds, |rng| {
        let parts = smooth_uniform(&[3], rng);
        (
            vec![parts],
            Box::new(|t, ids| {
                let g = t.slice(ids[0], 0, 0, 1);
                let r = t.slice(ids[0], 0, 1, 1);
                let s = t.slice(ids[0], 0, 2, 1);
                let r = t.abs(r);
                let s = t.abs(s);
                losses::total_generator_loss(t, g, r, s, &losses::LossWeights::default())
            }),
        )
    });

    checks.push(end_to_end_check(seeds.min(3)));

    SuiteReport { checks, seconds: start.elapsed().as_secs_f64() }
}

/// Miniature architecture (same structure, tiny extents) for a full
/// end-to-end check: d(mean of final mel)/d(every trainable parameter).
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        f_mel: 8,
        n_stages: 3,
        alpha: 2,
        frame_h: 8,
        frame_w: 8,
        frame_c: 1,
        d_visual: 4,
        d_noise: 2,
        d_attn: 4,
        stage_channels: vec![4, 4, 2],
        visual_channels: vec![2, 2, 2, 2, 4],
        audio_channels: [2, 2],
        disc_channels: 3,
        postnet_channels: 4,
        gru_layers: 2,
        use_attention: true,
    }
}

fn end_to_end_check(seeds: usize) -> GradCheckReport {
    let mut worst = GradCheckReport {
        name: "end_to_end_generator".to_string(),
        max_rel_error: 0.0,
        worst: None,
        failures: Vec::new(),
    };
    for seed in 0..seeds as u64 {
        let model = Model::new(tiny_config(), 100 + seed).expect("tiny config");
        let group: Vec<_> = model.params.group(crate::model::GENERATOR_GROUP);
        let mut rng = rng_for("e2e", seed);
        let frames = Tensor::rand_uniform(&[3, 8, 8, 1], &mut rng, 0.0, 1.0);
        let clip = crate::data::VideoClip { frames, fps: 25 };
        let z = Tensor::rand_normal(&model.config.noise_shape(3), &mut rng);

        let forward_value = |m: &Model| -> f64 {
            let mut tape = Tape::new();
            let bind = m.bind_frozen(&mut tape);
            let out = m.forward_generator(&mut tape, &bind, &clip, Some(&z)).unwrap();
            let last = out.gen.mels[2];
            // square to make the scalar sensitive everywhere
            let sq = tape.mul(last, last);
            let s = tape.mean_all(sq);
            tape.value(s)
        };

        // analytic gradients
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape, crate::model::GENERATOR_GROUP);
        let out = model.forward_generator(&mut tape, &bind, &clip, Some(&z)).unwrap();
        let last = out.gen.mels[2];
        let sq = tape.mul(last, last);
        let scalar = tape.mean_all(sq);
        let ids = bind.tensor_ids(&group);
        let grads = tape.grad(scalar, &ids);
        let analytic: Vec<Tensor> = grads.iter().map(|&g| tape.to_tensor(g)).collect();
        drop(tape);

        // central differences over every trainable parameter element
        let mut model = model;
        for (gi, &pid) in group.iter().enumerate() {
            let n = model.params.value(pid).numel();
            for j in 0..n {
                let orig = model.params.value(pid).data[j];
                model.params.value_mut(pid).data[j] = orig + EPS;
                let fp = forward_value(&model);
                model.params.value_mut(pid).data[j] = orig - EPS;
                let fm = forward_value(&model);
                model.params.value_mut(pid).data[j] = orig;
                let numeric = (fp - fm) / (2.0 * EPS);
                let a = analytic[gi].data[j];
                if !numeric.is_finite() || !a.is_finite() {
                    worst
                        .failures
                        .push(format!("non-finite at param {gi}[{j}] seed {seed}"));
                    continue;
                }
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-6);
                if rel > worst.max_rel_error {
                    worst.max_rel_error = rel;
                    worst.worst = Some((gi, j));
                }
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_two_seeds_passes() {
        let report = run_suite(2);
        for check in &report.checks {
            assert!(
                check.passed(SUITE_TOL),
                "{}: max rel {} failures {:?}",
                check.name,
                check.max_rel_error,
                check.failures
            );
        }
    }
}
