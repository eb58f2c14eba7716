//! Layer kernels with explicit backward passes.
//!
//! Activation layouts: conv stack `[batch, channel, time, freq]`, recurrent
//! stack `[batch, time, feature]`. Frame masks are `[batch, time]`.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis, Zip};

use super::Real;

#[inline]
pub(crate) fn lit<T: Real>(v: f64) -> T {
    T::from(v).expect("literal fits the float type")
}

/// Lower one sample `[cin, t, f]` to `[cin*9, t*f]` columns for a 3×3
/// same-padded convolution.
fn im2col<T: Real>(x: ArrayView3<T>) -> Array2<T> {
    let (cin, t, f) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut cols = Array2::zeros((cin * 9, t * f));
    let out = cols.as_slice_mut().expect("fresh array");
    for ci in 0..cin {
        let plane = &src[ci * t * f..(ci + 1) * t * f];
        for ky in 0..3 {
            for kx in 0..3 {
                let r = ci * 9 + ky * 3 + kx;
                let row = &mut out[r * t * f..(r + 1) * t * f];
                for tt in 0..t {
                    let st = tt as isize + ky as isize - 1;
                    if st < 0 || st >= t as isize {
                        continue;
                    }
                    let from = &plane[st as usize * f..(st as usize + 1) * f];
                    let dst = &mut row[tt * f..(tt + 1) * f];
                    // dst[ff] = from[ff + kx - 1]
                    match kx {
                        0 => dst[1..].copy_from_slice(&from[..f - 1]),
                        1 => dst.copy_from_slice(from),
                        _ => dst[..f - 1].copy_from_slice(&from[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<T: Real>(cols: ArrayView2<T>, cin: usize, t: usize, f: usize) -> Array3<T> {
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut x = Array3::zeros((cin, t, f));
    let out = x.as_slice_mut().expect("fresh array");
    for ci in 0..cin {
        let plane = &mut out[ci * t * f..(ci + 1) * t * f];
        for ky in 0..3 {
            for kx in 0..3 {
                let r = ci * 9 + ky * 3 + kx;
                let row = &src[r * t * f..(r + 1) * t * f];
                for tt in 0..t {
                    let st = tt as isize + ky as isize - 1;
                    if st < 0 || st >= t as isize {
                        continue;
                    }
                    let dst = &mut plane[st as usize * f..(st as usize + 1) * f];
                    let from = &row[tt * f..(tt + 1) * f];
                    let (d, s) = match kx {
                        0 => (&mut dst[..f - 1], &from[1..]),
                        1 => (&mut dst[..], from),
                        _ => (&mut dst[1..], &from[..f - 1]),
                    };
                    for (o, &v) in d.iter_mut().zip(s) {
                        *o += v;
                    }
                }
            }
        }
    }
    x
}

fn kernel_matrix<T: Real>(kernel: &Array4<T>) -> ArrayView2<'_, T> {
    let (cout, cin, kh, kw) = kernel.dim();
    kernel
        .view()
        .into_shape_with_order((cout, cin * kh * kw))
        .expect("kernel is in standard layout")
}

/// 3×3 convolution, stride 1, zero padding 1. `kernel` is `[cout, cin, 3, 3]`.
pub fn conv3x3_forward<T: Real>(x: ArrayView4<T>, kernel: &Array4<T>, bias: &Array1<T>) -> Array4<T> {
    let (b, cin, t, f) = x.dim();
    let cout = kernel.dim().0;
    assert_eq!(kernel.dim().1, cin, "conv input channels");
    let w = kernel_matrix(kernel);
    let mut y = Array4::zeros((b, cout, t, f));
    for bi in 0..b {
        let cols = im2col(x.index_axis(Axis(0), bi));
        let out = w.dot(&cols);
        let mut yb = y.index_axis_mut(Axis(0), bi);
        for (co, (mut dst, src)) in yb.outer_iter_mut().zip(out.outer_iter()).enumerate() {
            let bias = bias[co];
            Zip::from(dst.as_slice_mut().expect("contiguous"))
                .and(src)
                .for_each(|d, &s| *d = s + bias);
        }
    }
    y
}

pub struct ConvGrads<T> {
    pub dx: Array4<T>,
    pub dkernel: Array4<T>,
    pub dbias: Array1<T>,
}

pub fn conv3x3_backward<T: Real>(x: ArrayView4<T>, kernel: &Array4<T>, dy: ArrayView4<T>, need_dx: bool) -> ConvGrads<T> {
    let (b, cin, t, f) = x.dim();
    let cout = kernel.dim().0;
    let w = kernel_matrix(kernel);
    let mut dw = Array2::<T>::zeros((cout, cin * 9));
    let mut dbias = Array1::<T>::zeros(cout);
    let mut dx = if need_dx { Array4::zeros((b, cin, t, f)) } else { Array4::zeros((0, 0, 0, 0)) };
    for bi in 0..b {
        let cols = im2col(x.index_axis(Axis(0), bi));
        let dyb = dy
            .index_axis(Axis(0), bi)
            .to_owned()
            .into_shape_with_order((cout, t * f))
            .expect("owned array is standard layout");
        dw = dw + dyb.dot(&cols.t());
        dbias = dbias + dyb.sum_axis(Axis(1));
        if need_dx {
            let dcols = w.t().dot(&dyb);
            dx.index_axis_mut(Axis(0), bi).assign(&col2im(dcols.view(), cin, t, f));
        }
    }
    ConvGrads {
        dx,
        dkernel: dw.into_shape_with_order((cout, cin, 3, 3)).expect("standard layout"),
        dbias,
    }
}

pub const BN_EPS: f64 = 1e-5;

pub struct BatchNormCache<T> {
    pub xhat: Array4<T>,
    pub inv_std: Array1<T>,
    pub mask: Array2<bool>,
    pub n_valid: usize,
}

/// Training-mode batch norm. Statistics come from valid frames only, so
/// padded frames and fully masked windows never influence them.
pub fn batchnorm_train_forward<T: Real>(
    x: ArrayView4<T>,
    gamma: &Array1<T>,
    beta: &Array1<T>,
    mask: ArrayView2<bool>,
) -> (Array4<T>, BatchNormCache<T>, Array1<T>, Array1<T>) {
    let (b, c, t, f) = x.dim();
    let valid_frames = mask.iter().filter(|&&m| m).count();
    let n_valid = valid_frames * f;
    let mut xhat = x.as_standard_layout().into_owned();
    let mut mean = Array1::<T>::zeros(c);
    let mut var = Array1::<T>::ones(c);
    if n_valid > 0 {
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for (bi, sample) in xhat.outer_iter().enumerate() {
            for (ci, ch) in sample.outer_iter().enumerate() {
                let ch = ch.to_slice().expect("standard layout");
                for (ti, row) in ch.chunks_exact(f).enumerate() {
                    if mask[[bi, ti]] {
                        for &v in row {
                            let v = v.to_f64().unwrap();
                            sum[ci] += v;
                            sq[ci] += v * v;
                        }
                    }
                }
            }
        }
        for ci in 0..c {
            let m = sum[ci] / n_valid as f64;
            mean[ci] = lit(m);
            var[ci] = lit((sq[ci] / n_valid as f64 - m * m).max(0.0));
        }
    }
    let inv_std = var.mapv(|v| T::one() / (v + lit(BN_EPS)).sqrt());
    let mut y = Array4::zeros((b, c, t, f));
    for (mut xs, mut ys) in xhat.outer_iter_mut().zip(y.outer_iter_mut()) {
        for (ci, (mut xh, mut yc)) in xs.outer_iter_mut().zip(ys.outer_iter_mut()).enumerate() {
            let (m, is, g, be) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            let xh = xh.as_slice_mut().expect("standard layout");
            let yc = yc.as_slice_mut().expect("standard layout");
            for (h, yv) in xh.iter_mut().zip(yc.iter_mut()) {
                *h = (*h - m) * is;
                *yv = g * *h + be;
            }
        }
    }
    (
        y,
        BatchNormCache {
            xhat,
            inv_std,
            mask: mask.to_owned(),
            n_valid,
        },
        mean,
        var,
    )
}

pub fn batchnorm_infer_forward<T: Real>(
    x: ArrayView4<T>,
    gamma: &Array1<T>,
    beta: &Array1<T>,
    running_mean: &Array1<T>,
    running_var: &Array1<T>,
) -> Array4<T> {
    let mut y = x.to_owned();
    for mut sample in y.outer_iter_mut() {
        for (ci, mut ch) in sample.outer_iter_mut().enumerate() {
            let is = T::one() / (running_var[ci] + lit(BN_EPS)).sqrt();
            let (m, g, be) = (running_mean[ci], gamma[ci], beta[ci]);
            ch.mapv_inplace(|v| g * (v - m) * is + be);
        }
    }
    y
}

pub fn batchnorm_backward<T: Real>(
    dy: ArrayView4<T>,
    gamma: &Array1<T>,
    cache: &BatchNormCache<T>,
) -> (Array4<T>, Array1<T>, Array1<T>) {
    let (_, c, _, f) = dy.dim();
    let dy = dy.as_standard_layout();
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    for (ds, hs) in dy.outer_iter().zip(cache.xhat.outer_iter()) {
        for (ci, (d, h)) in ds.outer_iter().zip(hs.outer_iter()).enumerate() {
            let d = d.to_slice().expect("standard layout");
            let h = h.to_slice().expect("standard layout");
            let (mut sb, mut sg) = (T::zero(), T::zero());
            for (&dv, &hv) in d.iter().zip(h) {
                sb = sb + dv;
                sg = sg + dv * hv;
            }
            dbeta[ci] = dbeta[ci] + sb;
            dgamma[ci] = dgamma[ci] + sg;
        }
    }
    let mut dx = Array4::zeros(dy.dim());
    for (bi, ((ds, hs), mut xs)) in dy.outer_iter().zip(cache.xhat.outer_iter()).zip(dx.outer_iter_mut()).enumerate() {
        for (ci, ((d, h), mut o)) in ds.outer_iter().zip(hs.outer_iter()).zip(xs.outer_iter_mut()).enumerate() {
            let scale = gamma[ci] * cache.inv_std[ci];
            let (mean_dy, mean_dy_xhat) = if cache.n_valid > 0 {
                let n = lit::<T>(cache.n_valid as f64);
                (dbeta[ci] / n, dgamma[ci] / n)
            } else {
                (T::zero(), T::zero())
            };
            let d = d.to_slice().expect("standard layout");
            let h = h.to_slice().expect("standard layout");
            let o = o.as_slice_mut().expect("standard layout");
            for (ti, ((orow, drow), hrow)) in o.chunks_exact_mut(f).zip(d.chunks_exact(f)).zip(h.chunks_exact(f)).enumerate() {
                if cache.mask[[bi, ti]] && cache.n_valid > 0 {
                    for ((ov, &dv), &hv) in orow.iter_mut().zip(drow).zip(hrow) {
                        *ov = scale * (dv - mean_dy - hv * mean_dy_xhat);
                    }
                } else {
                    for (ov, &dv) in orow.iter_mut().zip(drow) {
                        *ov = scale * dv;
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_forward<T: Real>(x: Array4<T>) -> Array4<T> {
    x.mapv_into(|v| if v > T::zero() { v } else { T::zero() })
}

/// `y` is the ReLU output.
pub fn relu_backward<T: Real>(mut dy: Array4<T>, y: ArrayView4<T>) -> Array4<T> {
    Zip::from(&mut dy).and(&y).for_each(|d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
    dy
}

/// Non-overlapping max pooling along frequency only.
pub fn maxpool_freq_forward<T: Real>(x: ArrayView4<T>, k: usize) -> (Array4<T>, Array4<u32>) {
    let (b, c, t, f) = x.dim();
    assert!(k >= 1 && f % k == 0, "pool factor {k} must divide {f}");
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut y = Array4::zeros((b, c, t, f / k));
    let mut arg = Array4::<u32>::zeros((b, c, t, f / k));
    let ys = y.as_slice_mut().expect("fresh array");
    let args = arg.as_slice_mut().expect("fresh array");
    for (i, group) in src.chunks_exact(k).enumerate() {
        let mut best = group[0];
        let mut at = 0;
        for (j, &v) in group.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                at = j;
            }
        }
        ys[i] = best;
        // index within the frequency row
        args[i] = ((i * k) % f + at) as u32;
    }
    (y, arg)
}

pub fn maxpool_freq_backward<T: Real>(dy: ArrayView4<T>, arg: &Array4<u32>, f_in: usize) -> Array4<T> {
    let (b, c, t, fo) = dy.dim();
    let dy = dy.as_standard_layout();
    let arg = arg.as_standard_layout();
    let mut dx = Array4::zeros((b, c, t, f_in));
    let out = dx.as_slice_mut().expect("fresh array");
    let d = dy.as_slice().expect("standard layout");
    let a = arg.as_slice().expect("standard layout");
    for (row, (drow, arow)) in d.chunks_exact(fo).zip(a.chunks_exact(fo)).enumerate() {
        let base = row * f_in;
        for (&dv, &av) in drow.iter().zip(arow) {
            out[base + av as usize] += dv;
        }
    }
    dx
}

/// `[b, c, t, f]` -> `[b, t, c*f]`.
pub fn flatten_frames<T: Real>(x: ArrayView4<T>) -> Array3<T> {
    let (b, c, t, f) = x.dim();
    x.permuted_axes([0, 2, 1, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, t, c * f))
        .expect("standard layout")
}

pub fn unflatten_frames<T: Real>(x: ArrayView3<T>, c: usize, f: usize) -> Array4<T> {
    let (b, t, _) = x.dim();
    x.to_owned()
        .into_shape_with_order((b, t, c, f))
        .expect("standard layout")
        .permuted_axes([0, 2, 1, 3])
        .as_standard_layout()
        .into_owned()
}

/// One GRU direction. Gate blocks in the `3H` axis are ordered
/// update (z), reset (r), candidate (n):
///
/// ```text
/// z = σ(x Wz + h Uz + bz)
/// r = σ(x Wr + h Ur + br)
/// n = tanh(x Wn + (r ⊙ h) Un + bn)
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights<T> {
    /// `[input, 3H]`
    pub w_input: Array2<T>,
    /// `[H, 3H]`
    pub w_recurrent: Array2<T>,
    /// `[3H]`
    pub bias: Array1<T>,
}

impl<T: Real> GruWeights<T> {
    pub fn hidden(&self) -> usize {
        self.w_recurrent.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_input: Array2::zeros(self.w_input.raw_dim()),
            w_recurrent: Array2::zeros(self.w_recurrent.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

pub struct GruCache<T> {
    z: Array3<T>,
    r: Array3<T>,
    n: Array3<T>,
    h_prev: Array3<T>,
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// `[b, t, k]` viewed as `[b*t, k]`.
fn rows<T: Real>(x: ArrayView3<T>) -> Array2<T> {
    let (b, t, k) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * t, k))
        .expect("standard layout")
}

/// Run one direction over `[b, t, d]`; outputs `[b, t, h]` indexed by
/// original time even when `reverse` is set. The batch advances together,
/// one `[b, h] x [h, 3h]` product per step.
pub fn gru_forward<T: Real>(w: &GruWeights<T>, x: ArrayView3<T>, reverse: bool) -> (Array3<T>, GruCache<T>) {
    let (b, t, _) = x.dim();
    let h = w.hidden();
    let xp = (rows(x).dot(&w.w_input) + &w.bias)
        .into_shape_with_order((b, t, 3 * h))
        .expect("standard layout");
    let mut out = Array3::zeros((b, t, h));
    let mut cache = GruCache {
        z: Array3::zeros((b, t, h)),
        r: Array3::zeros((b, t, h)),
        n: Array3::zeros((b, t, h)),
        h_prev: Array3::zeros((b, t, h)),
    };
    let u_zr = w.w_recurrent.slice(s![.., ..2 * h]);
    let u_n = w.w_recurrent.slice(s![.., 2 * h..]);
    let mut state = Array2::<T>::zeros((b, h));
    let mut z = Array2::<T>::zeros((b, h));
    let mut r = Array2::<T>::zeros((b, h));
    let mut rh = Array2::<T>::zeros((b, h));
    for step in 0..t {
        let ti = if reverse { t - 1 - step } else { step };
        let a = xp.slice(s![.., ti, ..]);
        let hzr = state.dot(&u_zr);
        for bi in 0..b {
            for j in 0..h {
                z[[bi, j]] = sigmoid(a[[bi, j]] + hzr[[bi, j]]);
                let rv = sigmoid(a[[bi, h + j]] + hzr[[bi, h + j]]);
                r[[bi, j]] = rv;
                rh[[bi, j]] = rv * state[[bi, j]];
            }
        }
        let hn = rh.dot(&u_n);
        cache.h_prev.slice_mut(s![.., ti, ..]).assign(&state);
        for bi in 0..b {
            for j in 0..h {
                let n = (a[[bi, 2 * h + j]] + hn[[bi, j]]).tanh();
                cache.n[[bi, ti, j]] = n;
                let zv = z[[bi, j]];
                state[[bi, j]] = (T::one() - zv) * n + zv * state[[bi, j]];
            }
        }
        cache.z.slice_mut(s![.., ti, ..]).assign(&z);
        cache.r.slice_mut(s![.., ti, ..]).assign(&r);
        out.slice_mut(s![.., ti, ..]).assign(&state);
    }
    (out, cache)
}

/// Backpropagation through time for one direction.
pub fn gru_backward<T: Real>(
    w: &GruWeights<T>,
    x: ArrayView3<T>,
    cache: &GruCache<T>,
    dout: ArrayView3<T>,
    reverse: bool,
) -> (Array3<T>, GruWeights<T>) {
    let (b, t, d) = x.dim();
    let h = w.hidden();
    let u_zr = w.w_recurrent.slice(s![.., ..2 * h]);
    let u_n = w.w_recurrent.slice(s![.., 2 * h..]);
    let mut da_all = Array3::<T>::zeros((b, t, 3 * h));
    let mut dstate = Array2::<T>::zeros((b, h));
    let mut du_zr = Array2::<T>::zeros((h, 2 * h));
    let mut du_n = Array2::<T>::zeros((h, h));
    let mut dh_prev = Array2::<T>::zeros((b, h));
    let mut dan = Array2::<T>::zeros((b, h));
    let mut dzr = Array2::<T>::zeros((b, 2 * h));
    let mut rh = Array2::<T>::zeros((b, h));
    for step in (0..t).rev() {
        let ti = if reverse { t - 1 - step } else { step };
        let z = cache.z.slice(s![.., ti, ..]);
        let r = cache.r.slice(s![.., ti, ..]);
        let n = cache.n.slice(s![.., ti, ..]);
        let hp = cache.h_prev.slice(s![.., ti, ..]);
        for bi in 0..b {
            for j in 0..h {
                let dh = dstate[[bi, j]] + dout[[bi, ti, j]];
                let (zv, nv) = (z[[bi, j]], n[[bi, j]]);
                let dz = dh * (hp[[bi, j]] - nv);
                let dn = dh * (T::one() - zv);
                dh_prev[[bi, j]] = dh * zv;
                dan[[bi, j]] = dn * (T::one() - nv * nv);
                dzr[[bi, j]] = dz * zv * (T::one() - zv);
                rh[[bi, j]] = r[[bi, j]] * hp[[bi, j]];
            }
        }
        let drh = dan.dot(&u_n.t());
        for bi in 0..b {
            for j in 0..h {
                let rv = r[[bi, j]];
                let dr = drh[[bi, j]] * hp[[bi, j]];
                dh_prev[[bi, j]] += drh[[bi, j]] * rv;
                dzr[[bi, h + j]] = dr * rv * (T::one() - rv);
            }
        }
        ndarray::linalg::general_mat_mul(T::one(), &rh.t(), &dan, T::one(), &mut du_n);
        ndarray::linalg::general_mat_mul(T::one(), &hp.t(), &dzr, T::one(), &mut du_zr);
        ndarray::linalg::general_mat_mul(T::one(), &dzr, &u_zr.t(), T::one(), &mut dh_prev);
        let mut row = da_all.slice_mut(s![.., ti, ..]);
        row.slice_mut(s![.., ..2 * h]).assign(&dzr);
        row.slice_mut(s![.., 2 * h..]).assign(&dan);
        std::mem::swap(&mut dstate, &mut dh_prev);
    }
    let da = da_all.into_shape_with_order((b * t, 3 * h)).expect("standard layout");
    let xr = rows(x);
    let mut grads = w.zeros_like();
    grads.w_input = xr.t().dot(&da);
    grads.bias = da.sum_axis(Axis(0));
    grads.w_recurrent.slice_mut(s![.., ..2 * h]).assign(&du_zr);
    grads.w_recurrent.slice_mut(s![.., 2 * h..]).assign(&du_n);
    let dx = da.dot(&w.w_input.t()).into_shape_with_order((b, t, d)).expect("standard layout");
    (dx, grads)
}

/// Time-distributed affine map `[b, t, k] -> [b, t, c]`.
pub fn dense_forward<T: Real>(x: ArrayView3<T>, w: &Array2<T>, bias: &Array1<T>) -> Array3<T> {
    let (b, t, k) = x.dim();
    let flat = x.to_shape((b * t, k)).expect("reshape");
    let y = flat.dot(w) + bias;
    y.into_shape_with_order((b, t, w.ncols())).expect("standard layout")
}

pub fn dense_backward<T: Real>(
    x: ArrayView3<T>,
    w: &Array2<T>,
    dy: ArrayView3<T>,
) -> (Array3<T>, Array2<T>, Array1<T>) {
    let (b, t, k) = x.dim();
    let c = w.ncols();
    let flat = x.to_shape((b * t, k)).expect("reshape");
    let dflat = dy.to_shape((b * t, c)).expect("reshape");
    let dw = flat.t().dot(&dflat);
    let db = dflat.sum_axis(Axis(0));
    let dx = dflat.dot(&w.t()).into_shape_with_order((b, t, k)).expect("standard layout");
    (dx, dw, db)
}

pub fn sigmoid_array<T: Real>(z: &Array3<T>) -> Array3<T> {
    z.mapv(sigmoid)
}
