mod common;

use std::collections::HashMap;
use std::time::Instant;

use ear_core::autodiff::{Graph, OpKind};
use ear_core::Tensor;
use proptest::prelude::*;

#[test]
fn every_op_kind_passes_gradient_check() {
    let start = Instant::now();
    for (kind, worst) in common::grad_check_sweep() {
        assert!(worst < common::GRAD_TOL, "{}: {worst:e}", kind.name());
    }
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn instances_are_reproducible() {
    for kind in OpKind::ALL {
        assert_eq!(
            common::check_instance(kind, 3).to_bits(),
            common::check_instance(kind, 3).to_bits()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn two_layer_network_gradients(seed in any::<u64>(), n in 1usize..4, d in 3usize..6) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut rand_t = |shape: &[usize]| {
            let len = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let mut g = Graph::new();
        let x = g.input("x", false);
        let w1 = g.input("w1", true);
        let gain = g.input("gain", true);
        let w2 = g.input("w2", true);
        let h = g.matmul(x, w1);
        let h = g.layer_norm(h, gain, 1e-5);
        let logits = g.matmul(h, w2);
        let loss = g.cross_entropy(logits, (0..n).map(|i| i % d).collect());
        let values: HashMap<String, Tensor> = [
            ("x".to_string(), rand_t(&[n, d])),
            ("w1".to_string(), rand_t(&[d, d])),
            ("gain".to_string(), rand_t(&[d])),
            ("w2".to_string(), rand_t(&[d, d])),
        ]
        .into();
        g.forward(&values).unwrap();
        let err = ear_core::autodiff::grad_check(&mut g, loss, 1e-5).unwrap();
        prop_assert!(err < common::GRAD_TOL, "{err:e}");
        let grads = g.backward(loss).unwrap();
        prop_assert!(grads.by_name("x").is_none());
        for name in ["w1", "gain", "w2"] {
            prop_assert_eq!(grads.by_name(name).unwrap().shape(), values[name].shape());
        }
    }
}
