use vcagan::tensor::{kernels::ConvSpec, Tensor, Tape};
use std::time::Instant;

fn main() {
    // representative stage-2 refiner conv at train window T=8: [12, 40, 16] with 3x1 kernels, c=12
    let spec = ConvSpec { c_in: 12, c_out: 12, in_spatial: [40, 16, 1], kernel: [3, 1, 1], stride: [1,1,1], pad: [1,0,0] };
    let x = vec![0.5f64; spec.input_len()];
    let w = vec![0.1f64; spec.weight_len()];
    let iters = 2000;
    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..iters {
        let y = vcagan::tensor::kernels::conv_forward(&x, &w, &spec);
        sink += y[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    let macs = spec.out_positions() * spec.c_out * spec.c_in * spec.kernel_elems();
    println!("conv3x1: {:.2} GMAC/s (sink {sink})", macs as f64 * iters as f64 / dt / 1e9);

    // a bigger 3x3 conv like the visual encoder: [16, 16, 16] spatial 2d
    let spec2 = ConvSpec { c_in: 16, c_out: 16, in_spatial: [16, 16, 1], kernel: [3, 3, 1], stride: [1,1,1], pad: [1,1,0] };
    let x2 = vec![0.5f64; spec2.input_len()];
    let w2 = vec![0.1f64; spec2.weight_len()];
    let t0 = Instant::now();
    for _ in 0..iters {
        let y = vcagan::tensor::kernels::conv_forward(&x2, &w2, &spec2);
        sink += y[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    let macs2 = spec2.out_positions() * spec2.c_out * spec2.c_in * spec2.kernel_elems();
    println!("conv3x3: {:.2} GMAC/s (sink {sink})", macs2 as f64 * iters as f64 / dt / 1e9);

    // matmul 64x480 * 480x64 (attention-ish)
    let a = vec![0.3f64; 64*480];
    let b = vec![0.2f64; 480*64];
    let t0 = Instant::now();
    for _ in 0..iters {
        let c = vcagan::tensor::kernels::matmul(&a, &b, 64, 480, 64);
        sink += c[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("matmul: {:.2} GMAC/s (sink {sink})", (64.0*480.0*64.0) * iters as f64 / dt / 1e9);

    // tape overhead: small graph of 1000 elementwise nodes
    let t0 = Instant::now();
    let reps = 200;
    for _ in 0..reps {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[24, 40, 16], 0.5), true);
        let mut y = x;
        for _ in 0..200 {
            y = tape.leaky_relu(y, 0.2);
        }
        let s = tape.mean_all(y);
        let _ = tape.grad(s, &[x]);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("tape: {:.1} us per node (fwd+bwd, 15360-elem nodes)", dt / (reps as f64 * 200.0) * 1e6);
}
