//! Central finite-difference verification of reverse-mode gradients.

use super::{Tape, Tensor, TensorId};

pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    /// Worst relative error across all input elements.
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    /// Human-readable failures (non-finite values and the like).
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.failures.is_empty() && self.max_rel_error < tol
    }
}

/// Compare reverse-mode gradients of a scalar-valued closure against central
/// finite differences. `build` must construct the same computation for every
/// call; leaves are handed over in the order of `inputs`.
pub fn check_gradients<F>(name: &str, inputs: &[Tensor], build: F, eps: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        worst: None,
        failures: Vec::new(),
    };

    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
    let out = build(&mut tape, &ids);
    assert_eq!(tape.numel(out), 1, "gradcheck closures must be scalar-valued");
    if !tape.value(out).is_finite() {
        report.failures.push(format!("{name}: non-finite forward value"));
        return report;
    }
    let grads = tape.grad(out, &ids);
    let analytic: Vec<Tensor> = grads.iter().map(|&g| tape.to_tensor(g)).collect();
    for (i, g) in analytic.iter().enumerate() {
        if !g.all_finite() {
            report
                .failures
                .push(format!("{name}: non-finite gradient for input {i}"));
        }
    }
    if !report.failures.is_empty() {
        return report;
    }

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = perturbed.iter().map(|x| t.leaf(x, false)).collect();
        let out = build(&mut t, &ids);
        t.value(out)
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = work[i].data[j];
            work[i].data[j] = orig + eps;
            let fp = eval(&work);
            work[i].data[j] = orig - eps;
            let fm = eval(&work);
            work[i].data[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            if !numeric.is_finite() {
                report
                    .failures
                    .push(format!("{name}: non-finite finite difference at input {i}[{j}]"));
                continue;
            }
            let a = analytic[i].data[j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-6);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((i, j));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]);
        let report = check_gradients(
            "linear",
            &[x],
            |tape, ids| {
                let y = tape.scale(ids[0], 3.5);
                tape.sum_all(y)
            },
            DEFAULT_EPS,
        );
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn conv_softmax_composite() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = Tensor::rand_uniform(&[1, 4, 4], &mut rng, -1.0, 1.0);
        let w = Tensor::rand_uniform(&[2, 1, 3, 3], &mut rng, -0.8, 0.8);
        let report = check_gradients(
            "conv+softmax",
            &[x, w],
            |tape, ids| {
                let y = tape.conv(ids[0], ids[1], &[1, 1], &[1, 1]).unwrap();
                let flat = tape.reshape(y, &[2, 16]);
                let sm = tape.softmax_rows(flat);
                let weighted = tape.mul(sm, sm);
                tape.sum_all(weighted)
            },
            DEFAULT_EPS,
        );
        assert!(report.passed(DEFAULT_TOL), "{report:?}");
    }

    #[test]
    fn second_order_r1_style_term() {
        // s(theta) = |d/dx <theta, x>|^2 = |theta|^2; ds/dtheta = 2 theta.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let theta = Tensor::rand_uniform(&[3], &mut rng, -1.0, 1.0);
        let x = Tensor::rand_uniform(&[3], &mut rng, -1.0, 1.0);
        let report = check_gradients(
            "grad-of-grad",
            &[theta.clone()],
            |tape, ids| {
                let xv = tape.leaf(&x, true);
                let p = tape.mul(ids[0], xv);
                let d = tape.sum_all(p);
                let gx = tape.grad(d, &[xv]);
                let sq = tape.mul(gx[0], gx[0]);
                tape.sum_all(sq)
            },
            DEFAULT_EPS,
        );
        assert!(report.passed(DEFAULT_TOL), "{report:?}");
    }
}
