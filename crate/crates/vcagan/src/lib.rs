//! Lip-to-speech synthesis: a multi-scale GAN that maps silent lip video to
//! mel-spectrograms, with cross-modal attention for global visual context and
//! contrastive audio-visual synchronization learning.
//!
//! The crate is self-contained: a tape-based autodiff engine ([`tensor`]),
//! an audio front/back-end with Griffin-Lim phase reconstruction ([`dsp`]),
//! a procedural viseme/phoneme corpus with planted homophenes ([`data`]),
//! the network itself ([`model`]), training objectives ([`losses`]), an
//! Adam-based alternating trainer ([`trainer`]) and measurement tools
//! ([`eval`]). The `vcagan` binary wires these into subcommands.

pub mod data;
pub mod dsp;
pub mod eval;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod trainer;
pub mod tensor;

/// Worker-thread cap: the `VCAGAN_THREADS` environment variable when set,
/// otherwise the machine's available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("VCAGAN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        })
}
