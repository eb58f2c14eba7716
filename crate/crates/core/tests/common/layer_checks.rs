//! Each layer's backward pass against central differences of its own
//! forward pass. Every check returns `(what, worst relative error)`.

use birdscape::crnn::bce_loss;
use birdscape::crnn::layers;
use ndarray::{Array1, Array2, Array3, Array4};

use super::{fd_check, lcg};

/// Weighted-sum probe loss `Σ w ⊙ y` so the upstream gradient is `w`.
pub fn probe(y: &[f64], w: &[f64]) -> f64 {
    y.iter().zip(w).map(|(a, b)| a * b).sum()
}

pub fn conv() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let (b, cin, cout, t, f) = (2, 2, 3, 5, 6);
    let x = Array4::from_shape_vec((b, cin, t, f), lcg(1, b * cin * t * f)).unwrap();
    let k = Array4::from_shape_vec((cout, cin, 3, 3), lcg(2, cout * cin * 9)).unwrap();
    let bias = Array1::from(lcg(3, cout));
    let w = lcg(4, b * cout * t * f);
    let dy = Array4::from_shape_vec((b, cout, t, f), w.clone()).unwrap();
    let g = layers::conv3x3_backward(x.view(), &k, dy.view(), true);

    let run = |x: &Array4<f64>, k: &Array4<f64>, bias: &Array1<f64>| {
        probe(layers::conv3x3_forward(x.view(), k, bias).as_slice().unwrap(), &w)
    };
    let (e, _) = fd_check(k.as_slice().unwrap(), g.dkernel.as_slice().unwrap(), |v| {
        run(&x, &Array4::from_shape_vec(k.raw_dim(), v.to_vec()).unwrap(), &bias)
    });
    out.push(("kernel".to_string(), e));
    let (e, _) = fd_check(bias.as_slice().unwrap(), g.dbias.as_slice().unwrap(), |v| run(&x, &k, &Array1::from(v.to_vec())));
    out.push(("bias".to_string(), e));
    let (e, _) = fd_check(x.as_slice().unwrap(), g.dx.as_slice().unwrap(), |v| {
        run(&Array4::from_shape_vec(x.raw_dim(), v.to_vec()).unwrap(), &k, &bias)
    });
    out.push(("input".to_string(), e));
    out
}

pub fn batchnorm_masked() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let (b, c, t, f) = (3, 2, 4, 3);
    let x = Array4::from_shape_vec((b, c, t, f), lcg(7, b * c * t * f)).unwrap();
    let gamma = Array1::from(vec![1.3, -0.7]);
    let beta = Array1::from(vec![0.2, 0.1]);
    let mut mask = Array2::from_elem((b, t), true);
    mask[[1, 3]] = false;
    mask[[2, 0]] = false;
    mask[[2, 2]] = false;
    let w = lcg(8, b * c * t * f);
    let dy = Array4::from_shape_vec((b, c, t, f), w.clone()).unwrap();
    let (_, cache, _, _) = layers::batchnorm_train_forward(x.view(), &gamma, &beta, mask.view());
    let (dx, dg, db) = layers::batchnorm_backward(dy.view(), &gamma, &cache);
    let run = |x: &Array4<f64>, g: &Array1<f64>, be: &Array1<f64>| {
        let (y, ..) = layers::batchnorm_train_forward(x.view(), g, be, mask.view());
        probe(y.as_slice().unwrap(), &w)
    };
    let (e, _) = fd_check(x.as_slice().unwrap(), dx.as_slice().unwrap(), |v| {
        run(&Array4::from_shape_vec(x.raw_dim(), v.to_vec()).unwrap(), &gamma, &beta)
    });
    out.push(("input".to_string(), e));
    let (e, _) = fd_check(gamma.as_slice().unwrap(), dg.as_slice().unwrap(), |v| run(&x, &Array1::from(v.to_vec()), &beta));
    out.push(("gamma".to_string(), e));
    let (e, _) = fd_check(beta.as_slice().unwrap(), db.as_slice().unwrap(), |v| run(&x, &gamma, &Array1::from(v.to_vec())));
    out.push(("beta".to_string(), e));
    out
}

pub fn relu_and_pool() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let (b, c, t, f) = (2, 2, 3, 8);
    // well separated values so no kink or tie sits within one step
    let mut vals: Vec<f64> = (0..b * c * t * f).map(|i| ((i * 37) % 101) as f64 * 0.05 - 2.52).collect();
    vals.iter_mut().for_each(|v| {
        if v.abs() < 0.01 {
            *v = 0.3
        }
    });
    let x = Array4::from_shape_vec((b, c, t, f), vals).unwrap();
    let y = layers::relu_forward(x.clone());
    let (p, arg) = layers::maxpool_freq_forward(y.view(), 4);
    let w = lcg(9, p.len());
    let dp = Array4::from_shape_vec(p.raw_dim(), w.clone()).unwrap();
    let dy = layers::maxpool_freq_backward(dp.view(), &arg, f);
    let dx = layers::relu_backward(dy, y.view());
    let (e, _) = fd_check(x.as_slice().unwrap(), dx.as_slice().unwrap(), |v| {
        let x = Array4::from_shape_vec((b, c, t, f), v.to_vec()).unwrap();
        let y = layers::relu_forward(x);
        probe(layers::maxpool_freq_forward(y.view(), 4).0.as_slice().unwrap(), &w)
    });
    out.push(("input".to_string(), e));
    out
}

pub fn gru_both_directions() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let (b, t, d, h) = (2, 6, 3, 4);
    let x = Array3::from_shape_vec((b, t, d), lcg(10, b * t * d)).unwrap();
    let wts = layers::GruWeights {
        w_input: Array2::from_shape_vec((d, 3 * h), lcg(11, d * 3 * h)).unwrap(),
        w_recurrent: Array2::from_shape_vec((h, 3 * h), lcg(12, h * 3 * h)).unwrap(),
        bias: Array1::from(lcg(13, 3 * h)),
    };
    let w = lcg(14, b * t * h);
    let dy = Array3::from_shape_vec((b, t, h), w.clone()).unwrap();
    for reverse in [false, true] {
        let (_, cache) = layers::gru_forward(&wts, x.view(), reverse);
        let (dx, g) = layers::gru_backward(&wts, x.view(), &cache, dy.view(), reverse);
        let run = |x: &Array3<f64>, p: &layers::GruWeights<f64>| probe(layers::gru_forward(p, x.view(), reverse).0.as_slice().unwrap(), &w);
        let (e, _) = fd_check(x.as_slice().unwrap(), dx.as_slice().unwrap(), |v| {
            run(&Array3::from_shape_vec(x.raw_dim(), v.to_vec()).unwrap(), &wts)
        });
        out.push((format!("input reverse={reverse}"), e));
        let (e, _) = fd_check(wts.w_input.as_slice().unwrap(), g.w_input.as_slice().unwrap(), |v| {
            let mut p = wts.clone();
            p.w_input = Array2::from_shape_vec(p.w_input.raw_dim(), v.to_vec()).unwrap();
            run(&x, &p)
        });
        out.push((format!("w_input reverse={reverse}"), e));
        let (e, _) = fd_check(wts.w_recurrent.as_slice().unwrap(), g.w_recurrent.as_slice().unwrap(), |v| {
            let mut p = wts.clone();
            p.w_recurrent = Array2::from_shape_vec(p.w_recurrent.raw_dim(), v.to_vec()).unwrap();
            run(&x, &p)
        });
        out.push((format!("w_recurrent reverse={reverse}"), e));
        let (e, _) = fd_check(wts.bias.as_slice().unwrap(), g.bias.as_slice().unwrap(), |v| {
            let mut p = wts.clone();
            p.bias = Array1::from(v.to_vec());
            run(&x, &p)
        });
        out.push((format!("bias reverse={reverse}"), e));
    }
    out
}

pub fn dense_and_loss() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let (b, t, k, c) = (2, 5, 4, 3);
    let x = Array3::from_shape_vec((b, t, k), lcg(15, b * t * k)).unwrap();
    let wd = Array2::from_shape_vec((k, c), lcg(16, k * c)).unwrap();
    let bd = Array1::from(lcg(17, c));
    let y = Array3::from_shape_vec((b, t, c), lcg(18, b * t * c).iter().map(|v| (*v > 0.2) as u8).collect()).unwrap();
    let mut mask = Array2::from_elem((b, t), true);
    mask[[1, 4]] = false;
    let loss = |x: &Array3<f64>, w: &Array2<f64>, bb: &Array1<f64>| {
        let p = layers::sigmoid_array(&layers::dense_forward(x.view(), w, bb));
        bce_loss(p.view(), y.view(), mask.view()).unwrap().0
    };
    let p = layers::sigmoid_array(&layers::dense_forward(x.view(), &wd, &bd));
    let (_, dp) = bce_loss(p.view(), y.view(), mask.view()).unwrap();
    let dz = &dp * &p.mapv(|v| v * (1.0 - v));
    let (dx, dw, db) = layers::dense_backward(x.view(), &wd, dz.view());
    let (e, _) = fd_check(x.as_slice().unwrap(), dx.as_slice().unwrap(), |v| {
        loss(&Array3::from_shape_vec(x.raw_dim(), v.to_vec()).unwrap(), &wd, &bd)
    });
    out.push(("input".to_string(), e));
    let (e, _) = fd_check(wd.as_slice().unwrap(), dw.as_slice().unwrap(), |v| {
        loss(&x, &Array2::from_shape_vec(wd.raw_dim(), v.to_vec()).unwrap(), &bd)
    });
    out.push(("weight".to_string(), e));
    let (e, _) = fd_check(bd.as_slice().unwrap(), db.as_slice().unwrap(), |v| loss(&x, &wd, &Array1::from(v.to_vec())));
    out.push(("bias".to_string(), e));
    out
}
