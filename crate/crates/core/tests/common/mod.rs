#![allow(dead_code)]

use mpgd_core::diffusion::{make_schedule, NoiseSchedule};
use mpgd_core::{Image, ImageTensor, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_image(rng: &mut ChaCha8Rng, shape: Shape) -> Image {
    ImageTensor::from_vec(
        shape,
        (0..shape.len()).map(|_| rng.random::<f64>()).collect(),
    )
    .unwrap()
}

pub fn gaussian_image(rng: &mut ChaCha8Rng, shape: Shape, mean: f64, sd: f64) -> Image {
    let data = (0..shape.len())
        .map(|_| mean + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    ImageTensor::from_vec(shape, data).unwrap()
}

pub fn schedule() -> NoiseSchedule {
    make_schedule(1000, 1e-4, 0.02).unwrap()
}

pub fn gray(side: usize) -> Shape {
    Shape::new(side, side, 1)
}
