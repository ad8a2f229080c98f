//! GRU recurrences built from tape primitives.
//!
//! Gate order is r, z, n. With all-zero weights, biases and initial state the
//! cell is a fixed point at zero: r = z = 1/2, n = tanh(0) = 0, h' = 0.

use super::{Tape, TensorError, TensorId};

/// One direction of one GRU layer. Weights are stored input-major so a row
/// vector [1, d] multiplies from the left: `w_ih` is [d_in, 3h], `w_hh` is
/// [h, 3h], biases are [1, 3h].
#[derive(Debug, Clone, Copy)]
pub struct GruDirection {
    pub w_ih: TensorId,
    pub w_hh: TensorId,
    pub b_ih: TensorId,
    pub b_hh: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct GruLayer {
    pub fwd: GruDirection,
    pub bwd: GruDirection,
}

fn gru_step(
    tape: &mut Tape,
    x_t: TensorId,
    h: TensorId,
    dir: &GruDirection,
    hidden: usize,
) -> TensorId {
    let gi = tape.matmul(x_t, dir.w_ih);
    let gi = tape.add(gi, dir.b_ih);
    let gh = tape.matmul(h, dir.w_hh);
    let gh = tape.add(gh, dir.b_hh);
    let gi_r = tape.slice(gi, 1, 0, hidden);
    let gi_z = tape.slice(gi, 1, hidden, hidden);
    let gi_n = tape.slice(gi, 1, 2 * hidden, hidden);
    let gh_r = tape.slice(gh, 1, 0, hidden);
    let gh_z = tape.slice(gh, 1, hidden, hidden);
    let gh_n = tape.slice(gh, 1, 2 * hidden, hidden);
    let r_pre = tape.add(gi_r, gh_r);
    let r = tape.sigmoid(r_pre);
    let z_pre = tape.add(gi_z, gh_z);
    let z = tape.sigmoid(z_pre);
    let rn = tape.mul(r, gh_n);
    let n_pre = tape.add(gi_n, rn);
    let n = tape.tanh(n_pre);
    // h' = (1 - z) * n + z * h
    let nz = tape.neg(z);
    let omz = tape.add_scalar(nz, 1.0);
    let a = tape.mul(omz, n);
    let b = tape.mul(z, h);
    tape.add(a, b)
}

fn run_direction(
    tape: &mut Tape,
    seq: TensorId,
    dir: &GruDirection,
    hidden: usize,
    reverse: bool,
) -> Vec<TensorId> {
    let t_len = tape.shape(seq)[0];
    let mut h = tape.zeros(&[1, hidden]);
    let mut out = vec![h; t_len];
    let order: Vec<usize> = if reverse {
        (0..t_len).rev().collect()
    } else {
        (0..t_len).collect()
    };
    for t in order {
        let x_t = tape.slice(seq, 0, t, 1);
        h = gru_step(tape, x_t, h, dir, hidden);
        out[t] = h;
    }
    out
}

/// Stacked bidirectional GRU over a [t, d_in] sequence; each layer emits
/// [t, 2*hidden] (forward and backward states concatenated per step).
pub fn gru_bidirectional(
    tape: &mut Tape,
    seq: TensorId,
    layers: &[GruLayer],
    hidden: usize,
) -> Result<TensorId, TensorError> {
    if tape.shape(seq).len() != 2 || tape.shape(seq)[0] == 0 {
        return Err(TensorError::EmptySequence);
    }
    let mut x = seq;
    for layer in layers {
        let f = run_direction(tape, x, &layer.fwd, hidden, false);
        let b = run_direction(tape, x, &layer.bwd, hidden, true);
        let rows: Vec<TensorId> = f
            .iter()
            .zip(&b)
            .map(|(&hf, &hb)| tape.concat(&[hf, hb], 1))
            .collect();
        x = tape.concat(&rows, 0);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn zero_layer(tape: &mut Tape, d_in: usize, h: usize) -> GruLayer {
        let mut dir = || GruDirection {
            w_ih: tape.zeros(&[d_in, 3 * h]),
            w_hh: tape.zeros(&[h, 3 * h]),
            b_ih: tape.zeros(&[1, 3 * h]),
            b_hh: tape.zeros(&[1, 3 * h]),
        };
        let fwd = dir();
        let bwd = dir();
        GruLayer { fwd, bwd }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut tape = Tape::new();
        let seq = Tensor::rand_uniform(&[5, 3], &mut seeded(7), -1.0, 1.0);
        let s = tape.leaf(&seq, false);
        let layer = zero_layer(&mut tape, 3, 4);
        let out = gru_bidirectional(&mut tape, s, &[layer], 4).unwrap();
        assert_eq!(tape.shape(out), &[5, 8]);
        assert!(tape.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_sequence_is_valid() {
        let mut tape = Tape::new();
        let seq = Tensor::rand_uniform(&[1, 3], &mut seeded(9), -1.0, 1.0);
        let s = tape.leaf(&seq, false);
        let layer = rand_layer(&mut tape, 3, 4, 11);
        let out = gru_bidirectional(&mut tape, s, &[layer], 4).unwrap();
        assert_eq!(tape.shape(out), &[1, 8]);
        assert!(tape.all_finite(out));
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let mut tape = Tape::new();
        let s = tape.zeros(&[0, 3]);
        let layer = zero_layer(&mut tape, 3, 4);
        assert!(matches!(
            gru_bidirectional(&mut tape, s, &[layer], 4),
            Err(TensorError::EmptySequence)
        ));
    }

    #[test]
    fn matches_scalar_recurrence() {
        // T=3, d_in=2, hidden=2, forward direction only, checked against a
        // step-by-step recurrence written with plain f64 arithmetic.
        let mut rng = seeded(42);
        let mut tape = Tape::new();
        let w_ih = Tensor::rand_uniform(&[2, 6], &mut rng, -0.7, 0.7);
        let w_hh = Tensor::rand_uniform(&[2, 6], &mut rng, -0.7, 0.7);
        let b_ih = Tensor::rand_uniform(&[1, 6], &mut rng, -0.3, 0.3);
        let b_hh = Tensor::rand_uniform(&[1, 6], &mut rng, -0.3, 0.3);
        let xs = Tensor::rand_uniform(&[3, 2], &mut rng, -1.0, 1.0);

        let dir = GruDirection {
            w_ih: tape.leaf(&w_ih, false),
            w_hh: tape.leaf(&w_hh, false),
            b_ih: tape.leaf(&b_ih, false),
            b_hh: tape.leaf(&b_hh, false),
        };
        let seq = tape.leaf(&xs, false);
        let states = run_direction(&mut tape, seq, &dir, 2, false);

        // independent scalar recurrence
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = [0.0f64; 2];
        for t in 0..3 {
            let x = [xs.data[2 * t], xs.data[2 * t + 1]];
            let mut gi = [0.0f64; 6];
            let mut gh = [0.0f64; 6];
            for j in 0..6 {
                gi[j] = x[0] * w_ih.data[j] + x[1] * w_ih.data[6 + j] + b_ih.data[j];
                gh[j] = h[0] * w_hh.data[j] + h[1] * w_hh.data[6 + j] + b_hh.data[j];
            }
            let mut hn = [0.0f64; 2];
            for k in 0..2 {
                let r = sig(gi[k] + gh[k]);
                let z = sig(gi[2 + k] + gh[2 + k]);
                let n = (gi[4 + k] + r * gh[4 + k]).tanh();
                hn[k] = (1.0 - z) * n + z * h[k];
            }
            h = hn;
            let got = tape.data(states[t]);
            assert!((got[0] - h[0]).abs() < 1e-12, "t={t}");
            assert!((got[1] - h[1]).abs() < 1e-12, "t={t}");
        }
    }

    fn seeded(s: u64) -> rand_chacha::ChaCha12Rng {
        use rand::SeedableRng;
        rand_chacha::ChaCha12Rng::seed_from_u64(s)
    }

    fn rand_layer(tape: &mut Tape, d_in: usize, h: usize, seed: u64) -> GruLayer {
        let mut rng = seeded(seed);
        let mut dir = |rng: &mut rand_chacha::ChaCha12Rng| GruDirection {
            w_ih: tape.leaf(&Tensor::rand_uniform(&[d_in, 3 * h], rng, -0.5, 0.5), false),
            w_hh: tape.leaf(&Tensor::rand_uniform(&[h, 3 * h], rng, -0.5, 0.5), false),
            b_ih: tape.leaf(&Tensor::rand_uniform(&[1, 3 * h], rng, -0.1, 0.1), false),
            b_hh: tape.leaf(&Tensor::rand_uniform(&[1, 3 * h], rng, -0.1, 0.1), false),
        };
        let fwd = dir(&mut rng);
        let bwd = dir(&mut rng);
        GruLayer { fwd, bwd }
    }
}
