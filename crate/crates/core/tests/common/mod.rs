#![allow(dead_code)]

pub mod layer_checks;

use birdscape::crnn::{bce_loss, ArchitecturePreset, Network, PresetName};
use ndarray::{Array2, Array3};

pub const FD_STEP: f64 = 1e-3;

/// Relative error with an absolute fallback when both sides vanish.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let d = a.abs().max(n.abs());
    if d < 1e-10 {
        (a - n).abs()
    } else {
        (a - n).abs() / d
    }
}

/// Central differences of `loss` around `x0`; returns the worst relative
/// error against `analytic` and its index.
pub fn fd_check(x0: &[f64], analytic: &[f64], loss: impl Fn(&[f64]) -> f64) -> (f64, usize) {
    fd_check_step(x0, analytic, FD_STEP, loss)
}

pub fn fd_check_step(x0: &[f64], analytic: &[f64], step: f64, loss: impl Fn(&[f64]) -> f64) -> (f64, usize) {
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    let mut worst = (0.0, 0);
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = loss(&x);
        x[i] = orig - step;
        let down = loss(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let e = rel_err(analytic[i], numeric);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    worst
}

pub fn flatten(net: &Network<f64>) -> Vec<f64> {
    net.trainable().into_iter().flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>()).collect()
}

pub fn unflatten(template: &Network<f64>, v: &[f64]) -> Network<f64> {
    let mut n = template.clone();
    let mut it = v.iter();
    for (_, mut t) in n.trainable_mut() {
        for x in t.iter_mut() {
            *x = *it.next().expect("enough values");
        }
    }
    assert!(it.next().is_none());
    n
}

/// The gradient-check miniature: 2 conv filters, 16 mels, 8 frames,
/// gru_hidden 4, 2 classes. Batch of three windows: one full, one with a
/// masked tail, one fully masked.
pub fn miniature(seed: u64) -> (Network<f64>, Array3<f64>, Array3<u8>, Array2<bool>) {
    let mut arch = ArchitecturePreset::new(PresetName::AdaptedSedCrnn)
        .with_conv(2, &[4, 2])
        .with_gru(4, 1);
    arch.n_mels = 16;
    let net = Network::<f64>::init(&arch, 2, seed).unwrap();
    let (b, t, f, c) = (3, 8, 16, 2);
    let x = Array3::from_shape_vec((b, t, f), lcg(5, b * t * f)).unwrap();
    let y = Array3::from_shape_vec((b, t, c), lcg(6, b * t * c).iter().map(|v| (*v > 0.0) as u8).collect()).unwrap();
    let mut mask = Array2::from_elem((b, t), true);
    for ti in 5..t {
        mask[[1, ti]] = false;
    }
    for ti in 0..t {
        mask[[2, ti]] = false;
    }
    (net, x, y, mask)
}

/// Kink-free operating point for the h = 1e-3 check: a BN shift of 2.5
/// keeps nearly every ReLU input positive, so no perturbation crosses a
/// hinge and the central difference is a valid oracle.
pub fn smooth_miniature() -> (Network<f64>, Array3<f64>, Array3<u8>, Array2<bool>) {
    let (mut net, x, y, mask) = miniature(3);
    for b in net.conv.iter_mut() {
        b.beta.fill(2.5);
    }
    (net, x, y, mask)
}

pub fn network_loss(net: &Network<f64>, x: &Array3<f64>, y: &Array3<u8>, mask: &Array2<bool>) -> f64 {
    let cache = net.forward_train(x.view(), mask.view()).unwrap();
    bce_loss(cache.probs().view(), y.view(), mask.view()).unwrap().0
}

/// Worst relative error over every parameter, with the offending name.
pub fn network_gradcheck(net: &Network<f64>, x: &Array3<f64>, y: &Array3<u8>, mask: &Array2<bool>, step: f64) -> (f64, String) {
    let cache = net.forward_train(x.view(), mask.view()).unwrap();
    let (_, dp) = bce_loss(cache.probs().view(), y.view(), mask.view()).unwrap();
    let analytic = flatten(&net.backward(&cache, dp.view()));
    assert!(analytic.iter().all(|g| g.is_finite()));
    let (e, at) = fd_check_step(&flatten(net), &analytic, step, |v| network_loss(&unflatten(net, v), x, y, mask));
    (e, flat_names(net)[at].clone())
}

/// Names of the flattened parameter positions, for failure messages.
pub fn flat_names(net: &Network<f64>) -> Vec<String> {
    net.trainable()
        .into_iter()
        .flat_map(|(n, t)| (0..t.len()).map(move |i| format!("{n}[{i}]")))
        .collect()
}

/// Deterministic pseudo-random values in [-1, 1) without an RNG crate.
pub fn lcg(seed: u64, n: usize) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}
