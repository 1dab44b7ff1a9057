use obfnet_engine::{gradient_check, gradient_check_with, CheckLoss, Network, NetworkBuilder, Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

fn random_batch(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn assert_passes(name: &str, net: &Network<f64>, batch: &Tensor<f64>, labels: &[usize]) {
    let report = gradient_check(net, batch, labels).unwrap();
    eprintln!("{name}: max rel error {:e}", report.max_rel_error());
    for l in &report.layers {
        assert!(
            l.max_rel_error < TOL,
            "{name}: layer {} ({}) rel error {:e}",
            l.index,
            l.kind,
            l.max_rel_error
        );
        assert!(l.checked > 0);
    }
    assert!(
        report.input_max_rel_error < TOL,
        "{name}: input rel error {:e}",
        report.input_max_rel_error
    );
}

#[test]
fn dense_relu_dense() {
    let net = NetworkBuilder::new("mlp", &[5])
        .dense(7)
        .relu()
        .dense(3)
        .softmax()
        .build::<f64>(1)
        .unwrap();
    assert_passes("mlp", &net, &random_batch(&[4, 5], 2), &[0, 2, 1, 2]);
}

#[test]
fn conv_valid_3x3() {
    let net = NetworkBuilder::new("conv", &[2, 6, 6])
        .conv2d(3, (3, 3), 1, Padding::Valid)
        .relu()
        .flatten()
        .dense(4)
        .softmax()
        .build::<f64>(3)
        .unwrap();
    assert_passes("conv valid", &net, &random_batch(&[3, 2, 6, 6], 4), &[3, 0, 1]);
}

#[test]
fn conv_same_strided_and_pool_same() {
    let net = NetworkBuilder::new("conv-same", &[1, 5, 7])
        .conv2d(2, (2, 4), 2, Padding::Same)
        .max_pool((2, 2), 2, Padding::Same)
        .flatten()
        .dense(3)
        .build::<f64>(5)
        .unwrap();
    assert_passes("conv same", &net, &random_batch(&[2, 1, 5, 7], 6), &[]);
}

#[test]
fn maxpool_valid() {
    let net = NetworkBuilder::new("pool", &[2, 4, 4])
        .conv2d(2, (1, 1), 1, Padding::Valid)
        .max_pool((2, 2), 2, Padding::Valid)
        .flatten()
        .dense(2)
        .softmax()
        .build::<f64>(7)
        .unwrap();
    assert_passes("pool", &net, &random_batch(&[2, 2, 4, 4], 8), &[1, 0]);
}

#[test]
fn batchnorm_dense_and_spatial() {
    let dense = NetworkBuilder::new("bn1", &[4])
        .dense(5)
        .batch_norm()
        .relu()
        .dense(3)
        .softmax()
        .build::<f64>(9)
        .unwrap();
    assert_passes("bn dense", &dense, &random_batch(&[6, 4], 10), &[0, 1, 2, 0, 1, 2]);

    let spatial = NetworkBuilder::new("bn2", &[1, 4, 5])
        .conv2d(3, (2, 2), 1, Padding::Same)
        .batch_norm()
        .flatten()
        .dense(2)
        .build::<f64>(11)
        .unwrap();
    assert_passes("bn spatial", &spatial, &random_batch(&[3, 1, 4, 5], 12), &[]);
}

#[test]
fn dropout_with_fixed_mask() {
    let net = NetworkBuilder::new("drop", &[6])
        .dense(8)
        .dropout(0.4)
        .dense(3)
        .softmax()
        .build::<f64>(13)
        .unwrap();
    assert_passes("dropout", &net, &random_batch(&[5, 6], 14), &[0, 1, 2, 1, 0]);
}

#[test]
fn softmax_general_jacobian_and_reshape() {
    let net = NetworkBuilder::new("sm", &[2, 3])
        .flatten()
        .dense(4)
        .softmax()
        .reshape(&[2, 2])
        .flatten()
        .build::<f64>(15)
        .unwrap();
    let report = gradient_check_with(&net, &random_batch(&[3, 2, 3], 16), &CheckLoss::HalfSquaredSum, 1e-4).unwrap();
    assert!(report.max_rel_error() < TOL, "{report:?}");
}

#[test]
fn frozen_layers_are_still_checked() {
    let mut net = NetworkBuilder::new("frozen", &[4])
        .dense(6)
        .relu()
        .dense(3)
        .softmax()
        .build::<f64>(17)
        .unwrap();
    net.layer_mut(2).set_trainable(false);
    let report = gradient_check(&net, &random_batch(&[3, 4], 18), &[2, 1, 0]).unwrap();
    let frozen = report.layers.iter().find(|l| l.index == 2).unwrap();
    assert!(frozen.frozen);
    assert_eq!(frozen.checked, 6 * 3 + 3);
    assert!(report.max_rel_error() < TOL);
}

#[test]
fn frozen_batchnorm_passes() {
    let mut net = NetworkBuilder::new("frozen-bn", &[3])
        .dense(4)
        .batch_norm()
        .dense(2)
        .build::<f64>(19)
        .unwrap();
    net.layer_mut(1).set_trainable(false);
    let report = gradient_check(&net, &random_batch(&[4, 3], 20), &[]).unwrap();
    assert!(report.max_rel_error() < TOL, "{report:?}");
}

#[test]
fn cross_entropy_check_needs_softmax() {
    let net = NetworkBuilder::new("nosm", &[2]).dense(2).build::<f64>(0).unwrap();
    let err = gradient_check_with(&net, &random_batch(&[1, 2], 0), &CheckLoss::CrossEntropy(vec![0]), 1e-4);
    assert!(err.is_err());
}
