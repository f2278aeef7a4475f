//! Seeded random streams.
//!
//! Every consumer of randomness derives its generator from one master seed
//! plus a fixed stream id, so the measurement noise, the sampler's initial
//! latent and the power iteration never share draws even when handed the
//! same seed. The generator is ChaCha8 seeded with `seed_from_u64`; normal
//! variates come from `rand_distr::StandardNormal` (ziggurat).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    MeasurementNoise = 1,
    SamplerInit = 2,
    PowerIteration = 3,
    Synthetic = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

pub fn standard_normals<T: Real>(rng: &mut impl Rng, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}
