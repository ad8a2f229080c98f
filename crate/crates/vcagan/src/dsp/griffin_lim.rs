//! Griffin-Lim phase reconstruction by alternating projections.

use super::stft::{LinearSpectrogram, StftPlan};
use super::{DspError, Waveform};
use rustfft::num_complex::Complex;

/// Recovered waveform plus spectral convergence per iteration,
/// SC_k = |||STFT(x_k)| - M||_F / ||M||_F.
pub struct GriffinLimTrace {
    pub waveform: Waveform,
    pub convergence: Vec<f64>,
}

/// Zero-phase initialization, `iters` alternating projections.
pub fn griffin_lim(mags: &LinearSpectrogram, iters: usize) -> Result<Waveform, DspError> {
    Ok(griffin_lim_with_trace(mags, iters)?.waveform)
}

pub fn griffin_lim_with_trace(
    mags: &LinearSpectrogram,
    iters: usize,
) -> Result<GriffinLimTrace, DspError> {
    if iters < 1 {
        return Err(DspError::BadIterCount);
    }
    let plan = StftPlan::new(mags.window, mags.hop)?;
    let frames = mags.frames();
    let out_len = frames * mags.hop;
    let target = &mags.mags.data;
    let target_norm = target.iter().map(|v| v * v).sum::<f64>().sqrt();

    // zero phase: spectrum starts as the real magnitudes
    let mut cpx: Vec<Complex<f64>> = target.iter().map(|&m| Complex::new(m, 0.0)).collect();
    let mut wave = vec![0.0; out_len];
    let mut convergence = Vec::with_capacity(iters);
    for _ in 0..iters {
        wave = plan.synthesize(&cpx, frames, out_len);
        let rebuilt = plan.analyze(&wave)?;
        let mut err = 0.0;
        for (c, (&m, r)) in cpx.iter_mut().zip(target.iter().zip(&rebuilt)) {
            let d = r.norm() - m;
            err += d * d;
            // keep the rebuilt phase, enforce the target magnitude
            let n = r.norm();
            *c = if n > 1e-300 { r * (m / n) } else { Complex::new(m, 0.0) };
        }
        convergence.push(if target_norm > 0.0 { err.sqrt() / target_norm } else { 0.0 });
    }
    Ok(GriffinLimTrace {
        waveform: Waveform::new(wave, mags.sample_rate),
        convergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::stft;
    use crate::tensor::Tensor;

    #[test]
    fn zero_magnitudes_give_silence() {
        let mags = LinearSpectrogram {
            mags: Tensor::zeros(&[321, 16]),
            window: 640,
            hop: 160,
            sample_rate: 16000,
        };
        let w = griffin_lim(&mags, 5).unwrap();
        assert_eq!(w.len(), 16 * 160);
        assert!(w.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sinusoid_converges_below_point_one() {
        let sr = 16000u32;
        let x: Vec<f64> = (0..16000)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr as f64).sin())
            .collect();
        let (spec, _) = stft(&x, 640, 160, sr).unwrap();
        let trace = griffin_lim_with_trace(&spec, 100).unwrap();
        let final_sc = *trace.convergence.last().unwrap();
        assert!(final_sc < 0.1, "SC after 100 iters = {final_sc}");
    }

    #[test]
    fn convergence_is_non_increasing() {
        // smooth random-ish magnitudes
        let mut state = 1234u64;
        let mut rng = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let (bins, frames) = (321usize, 24usize);
        let mut mags = vec![0.0; bins * frames];
        for k in 0..bins {
            let band = (-((k as f64 - 60.0) / 40.0).powi(2)).exp();
            for f in 0..frames {
                mags[k * frames + f] = band * (0.5 + 0.5 * rng());
            }
        }
        let spec = LinearSpectrogram {
            mags: Tensor::new(vec![bins, frames], mags),
            window: 640,
            hop: 160,
            sample_rate: 16000,
        };
        let trace = griffin_lim_with_trace(&spec, 60).unwrap();
        for w in trace.convergence.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "SC increased: {} -> {}", w[0], w[1]);
        }
        // more iterations do at least as well as fewer
        let sc10 = trace.convergence[9];
        let sc60 = trace.convergence[59];
        assert!(sc60 <= sc10 + 1e-6);
    }

    #[test]
    fn zero_iterations_rejected() {
        let mags = LinearSpectrogram {
            mags: Tensor::zeros(&[321, 4]),
            window: 640,
            hop: 160,
            sample_rate: 16000,
        };
        assert!(matches!(griffin_lim(&mags, 0), Err(DspError::BadIterCount)));
    }
}
