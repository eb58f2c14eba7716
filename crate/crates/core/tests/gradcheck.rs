//! Analytic gradients against central finite differences, in f64.

mod common;

use birdscape::crnn::{ArchitecturePreset, Network, PresetName};
use common::{layer_checks, miniature, network_gradcheck, smooth_miniature, FD_STEP};

const TOL: f64 = 1e-3;

#[test]
fn end_to_end_miniature() {
    let (net, x, y, mask) = smooth_miniature();
    let (worst, at) = network_gradcheck(&net, &x, &y, &mask, FD_STEP);
    assert!(worst < TOL, "max relative error {worst:e} at {at}");
}

/// Default initialization across seeds. A smaller step keeps the
/// difference quotient from straddling ReLU hinges and pool ties.
#[test]
fn end_to_end_default_init_many_seeds() {
    for seed in 0..10 {
        let (net, x, y, mask) = miniature(seed);
        let (worst, at) = network_gradcheck(&net, &x, &y, &mask, 1e-5);
        assert!(worst < TOL, "seed {seed}: max relative error {worst:e} at {at}");
    }
}

#[test]
fn end_to_end_two_gru_layers() {
    let (_, x, y, mask) = miniature(0);
    let mut arch = ArchitecturePreset::new(PresetName::SeldnetSed)
        .with_conv(2, &[2, 2])
        .with_gru(3, 2);
    arch.n_mels = 16;
    let net = Network::<f64>::init(&arch, 2, 4).unwrap();
    let (worst, at) = network_gradcheck(&net, &x, &y, &mask, 1e-5);
    assert!(worst < TOL, "max relative error {worst:e} at {at}");
}

fn assert_all(layer: &str, checks: Vec<(String, f64)>) {
    assert!(!checks.is_empty());
    for (what, e) in checks {
        assert!(e < TOL, "{layer} {what}: {e:e}");
    }
}

#[test]
fn conv_alone() {
    assert_all("conv", layer_checks::conv());
}

#[test]
fn batchnorm_alone_with_mask() {
    assert_all("batchnorm", layer_checks::batchnorm_masked());
}

#[test]
fn relu_and_pool_alone() {
    assert_all("relu+pool", layer_checks::relu_and_pool());
}

#[test]
fn gru_alone_both_directions() {
    assert_all("gru", layer_checks::gru_both_directions());
}

#[test]
fn dense_and_loss_alone() {
    assert_all("dense+loss", layer_checks::dense_and_loss());
}
