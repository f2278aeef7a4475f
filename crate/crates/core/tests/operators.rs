mod common;

use common::{gray, rng, uniform_image};
use mpgd_core::operators::{build_blur, build_downsample, operator_norm};
use mpgd_core::{ImageTensor, LinearOperator, Shape, Task};
use proptest::prelude::*;

#[test]
fn constants_map_to_constants() {
    for task in Task::ALL {
        for shape in [gray(16), Shape::new(32, 20, 3), gray(64)] {
            let op = task.operator::<f64>(shape).unwrap();
            let out = op
                .apply(&ImageTensor::filled(shape, 0.37).unwrap())
                .unwrap();
            assert!(
                out.as_slice().iter().all(|v| (v - 0.37).abs() < 1e-6),
                "{task} {shape}"
            );
        }
    }
    let down = build_downsample::<f64>(gray(12), 3).unwrap();
    let out = down
        .apply(&ImageTensor::filled(gray(12), 0.8).unwrap())
        .unwrap();
    assert!(out.as_slice().iter().all(|v| (v - 0.8).abs() < 1e-6));
}

#[test]
fn norms_are_at_most_one() {
    for task in Task::ALL {
        let op = task.operator::<f64>(gray(32)).unwrap();
        let l = operator_norm(&op, 100, 0).unwrap();
        assert!(l > 0.0 && l <= 1.0 + 1e-9, "{task}: {l}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn adjoint_identity(seed in any::<u64>(), deblur in any::<bool>(), side in prop::sample::select(vec![4usize, 8, 16, 20])) {
        let task = if deblur { Task::Deblur } else { Task::Sr4x };
        let op = task.operator::<f64>(Shape::new(side, side, 1)).unwrap();
        let mut r = rng(seed);
        let x = uniform_image(&mut r, op.input_shape());
        let y = uniform_image(&mut r, op.output_shape());
        let ax = op.apply(&x).unwrap();
        let err = (ax.dot(&y).unwrap() - x.dot(&op.adjoint(&y).unwrap()).unwrap()).abs();
        prop_assert!(err / (ax.norm() * y.norm()) < 1e-10);
    }

    #[test]
    fn custom_blur_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0, size in prop::sample::select(vec![1usize, 3, 9, 21])) {
        let shape = Shape::new(10, 7, 3);
        let op = build_blur::<f64>(shape, size, 1.7).unwrap();
        let mut r = rng(seed);
        let x = uniform_image(&mut r, shape);
        let z = uniform_image(&mut r, shape);
        let lhs = op.apply(&x.scale(a).axpy(b, &z).unwrap()).unwrap();
        let rhs = op.apply(&x).unwrap().scale(a).axpy(b, &op.apply(&z).unwrap()).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().norm() < 1e-10);
    }
}
