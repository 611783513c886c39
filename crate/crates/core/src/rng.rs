//! Deterministic random streams.
//!
//! Every stochastic component in the crate draws from an explicitly seeded
//! ChaCha8 stream, so a run is fully determined by its seed. Gaussian draws
//! use Box-Muller with a fixed consumption of two uniforms per draw, which
//! makes RNG-accounting contracts (e.g. for Langevin sampling) checkable.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Root stream for a run.
pub fn stream_from_seed(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child stream. Used to give each sample in a batch
/// its own stream without disturbing the parent's draw sequence.
pub fn derive_stream(parent: &mut Stream) -> Stream {
    let mut seed = [0u8; 32];
    parent.fill_bytes(&mut seed);
    ChaCha8Rng::from_seed(seed)
}

/// One standard-normal draw via Box-Muller. Consumes exactly two `f64`
/// uniforms from the stream regardless of the outcome.
pub fn normal_f32(rng: &mut Stream) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

pub fn normal_f64(rng: &mut Stream) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fills a slice with standard-normal draws.
pub fn fill_normal(rng: &mut Stream, out: &mut [f32]) {
    for v in out.iter_mut() {
        *v = normal_f32(rng);
    }
}

/// Serializable snapshot of a stream: seed plus position within the stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

pub fn save_stream(rng: &Stream) -> StreamState {
    StreamState {
        seed: rng.get_seed(),
        word_pos: rng.get_word_pos(),
    }
}

pub fn restore_stream(state: &StreamState) -> Stream {
    let mut rng = ChaCha8Rng::from_seed(state.seed);
    rng.set_word_pos(state.word_pos);
    rng
}
