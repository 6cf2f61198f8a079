//! Central-difference check of the full network.

mod common;

use rand::Rng;
use sspfuse::autodiff::Tensor;
use sspfuse::model::{init_params, ModelConfig, OutputHead, Variant};

fn check(variant: Variant, seed: u64) {
    let cfg = ModelConfig::tiny().with_variant(variant);
    let mut params = init_params(&cfg, seed).unwrap();
    let mut g = common::rng(seed + 100);
    // non-zero biases and a non-trivial head exercise every path
    for name in ["embed.b", "conv.b", "fc.b"] {
        params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = g.gen_range(-0.3..0.3));
    }
    params.head = OutputHead { offset: (0..8).map(|d| 1500.0 + d as f64).collect(), scale: 1.7 };
    let x = Tensor::new(vec![8, 6, 8], (0..384).map(|_| g.gen_range(-2.0..2.0)).collect()).unwrap();
    let y = Tensor::from_vec((0..8).map(|d| 1500.0 + d as f64 + g.gen_range(-3.0..3.0)).collect());
    for (name, err) in common::model_fd_errors(&params, &x, &y, 1e-5) {
        assert!(err <= 1e-4, "{variant} {name}: {err:e}");
    }
}

#[test]
fn attention_model_gradients() {
    check(Variant::Attention, 1);
    check(Variant::Attention, 2);
}

#[test]
fn cnn_model_gradients() {
    check(Variant::Cnn, 3);
}
