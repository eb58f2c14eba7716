use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis, IxDyn, Zip};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{self, lit, BatchNormCache, GruCache, GruWeights};
use super::{ArchitecturePreset, CrnnError, Real};

/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` inside the loss.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    /// `[filters, in_channels, 3, 3]`
    pub kernel: Array4<T>,
    pub bias: Array1<T>,
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub freq_pool: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruLayer<T> {
    pub forward: GruWeights<T>,
    pub backward: GruWeights<T>,
}

/// All weights of the model. The same type doubles as a gradient container
/// (running statistics are left at zero there).
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub n_mels: usize,
    pub conv: Vec<ConvBlock<T>>,
    pub gru: Vec<GruLayer<T>>,
    /// `[2 * gru_hidden, classes]`
    pub dense_w: Array2<T>,
    pub dense_b: Array1<T>,
}

fn uniform<T: Real, D: ndarray::Dimension>(shape: D, fan_in: usize, rng: &mut ChaCha8Rng) -> ndarray::Array<T, D> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    ndarray::Array::from_shape_simple_fn(shape, || lit::<T>(dist.sample(rng)))
}

fn gru_init<T: Real>(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> GruWeights<T> {
    GruWeights {
        w_input: uniform(ndarray::Ix2(input, 3 * hidden), input, rng),
        w_recurrent: uniform(ndarray::Ix2(hidden, 3 * hidden), hidden, rng),
        bias: uniform(ndarray::Ix1(3 * hidden), hidden, rng),
    }
}

pub struct ConvCache<T> {
    input: Array4<T>,
    bn: BatchNormCache<T>,
    relu_out: Array4<T>,
    pool_arg: Array4<u32>,
}

pub struct GruLayerCache<T> {
    input: Array3<T>,
    fwd: GruCache<T>,
    bwd: GruCache<T>,
}

/// Everything the backward pass needs from a training-mode forward pass.
pub struct TrainCache<T> {
    conv: Vec<ConvCache<T>>,
    flat_c: usize,
    flat_f: usize,
    gru: Vec<GruLayerCache<T>>,
    dense_in: Array3<T>,
    probs: Array3<T>,
    /// Per conv block batch mean and variance, for running-stat updates.
    pub batch_stats: Vec<(Array1<T>, Array1<T>)>,
}

impl<T: Real> TrainCache<T> {
    pub fn probs(&self) -> &Array3<T> {
        &self.probs
    }
}

impl<T: Real> Network<T> {
    /// Uniform(±sqrt(1/fan_in)) weights, unit BN scale, zero shift, running
    /// stats (0, 1). Deterministic in `seed`.
    pub fn init(arch: &ArchitecturePreset, classes: usize, seed: u64) -> Result<Self, CrnnError> {
        arch.validate()?;
        if classes == 0 {
            return Err(CrnnError::InvalidPreset("need at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = Vec::new();
        let mut cin = 1;
        for b in &arch.conv_blocks {
            let fan = cin * 9;
            conv.push(ConvBlock {
                kernel: uniform(ndarray::Ix4(b.filters, cin, 3, 3), fan, &mut rng),
                bias: uniform(ndarray::Ix1(b.filters), fan, &mut rng),
                gamma: Array1::ones(b.filters),
                beta: Array1::zeros(b.filters),
                running_mean: Array1::zeros(b.filters),
                running_var: Array1::ones(b.filters),
                freq_pool: b.freq_pool,
            });
            cin = b.filters;
        }
        let h = arch.gru_hidden;
        let mut gru = Vec::new();
        let mut input = arch.gru_input();
        for _ in 0..arch.gru_layers {
            gru.push(GruLayer {
                forward: gru_init(input, h, &mut rng),
                backward: gru_init(input, h, &mut rng),
            });
            input = 2 * h;
        }
        Ok(Self {
            n_mels: arch.n_mels,
            conv,
            gru,
            dense_w: uniform(ndarray::Ix2(2 * h, classes), 2 * h, &mut rng),
            dense_b: uniform(ndarray::Ix1(classes), 2 * h, &mut rng),
        })
    }

    pub fn classes(&self) -> usize {
        self.dense_w.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.all_tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    /// Elementwise conversion to another float type.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let c = |v: &T| U::from(*v).expect("finite cast");
        let gw = |w: &GruWeights<T>| GruWeights {
            w_input: w.w_input.map(c),
            w_recurrent: w.w_recurrent.map(c),
            bias: w.bias.map(c),
        };
        Network {
            n_mels: self.n_mels,
            conv: self
                .conv
                .iter()
                .map(|b| ConvBlock {
                    kernel: b.kernel.map(c),
                    bias: b.bias.map(c),
                    gamma: b.gamma.map(c),
                    beta: b.beta.map(c),
                    running_mean: b.running_mean.map(c),
                    running_var: b.running_var.map(c),
                    freq_pool: b.freq_pool,
                })
                .collect(),
            gru: self
                .gru
                .iter()
                .map(|g| GruLayer {
                    forward: gw(&g.forward),
                    backward: gw(&g.backward),
                })
                .collect(),
            dense_w: self.dense_w.map(c),
            dense_b: self.dense_b.map(c),
        }
    }

    fn named<'a, A, F>(&'a self, with_buffers: bool, mut f: F) -> Vec<(String, A)>
    where
        F: FnMut(ArrayViewD<'a, T>) -> A,
    {
        let mut v = Vec::new();
        for (i, b) in self.conv.iter().enumerate() {
            v.push((format!("conv{i}.kernel"), f(b.kernel.view().into_dyn())));
            v.push((format!("conv{i}.bias"), f(b.bias.view().into_dyn())));
            v.push((format!("conv{i}.bn_gamma"), f(b.gamma.view().into_dyn())));
            v.push((format!("conv{i}.bn_beta"), f(b.beta.view().into_dyn())));
            if with_buffers {
                v.push((format!("conv{i}.bn_running_mean"), f(b.running_mean.view().into_dyn())));
                v.push((format!("conv{i}.bn_running_var"), f(b.running_var.view().into_dyn())));
            }
        }
        for (i, g) in self.gru.iter().enumerate() {
            for (dir, w) in [("fwd", &g.forward), ("bwd", &g.backward)] {
                v.push((format!("gru{i}.{dir}.w_input"), f(w.w_input.view().into_dyn())));
                v.push((format!("gru{i}.{dir}.w_recurrent"), f(w.w_recurrent.view().into_dyn())));
                v.push((format!("gru{i}.{dir}.bias"), f(w.bias.view().into_dyn())));
            }
        }
        v.push(("dense.weight".into(), f(self.dense_w.view().into_dyn())));
        v.push(("dense.bias".into(), f(self.dense_b.view().into_dyn())));
        v
    }

    fn named_mut(&mut self, with_buffers: bool) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut v = Vec::new();
        for (i, b) in self.conv.iter_mut().enumerate() {
            v.push((format!("conv{i}.kernel"), b.kernel.view_mut().into_dyn()));
            v.push((format!("conv{i}.bias"), b.bias.view_mut().into_dyn()));
            v.push((format!("conv{i}.bn_gamma"), b.gamma.view_mut().into_dyn()));
            v.push((format!("conv{i}.bn_beta"), b.beta.view_mut().into_dyn()));
            if with_buffers {
                v.push((format!("conv{i}.bn_running_mean"), b.running_mean.view_mut().into_dyn()));
                v.push((format!("conv{i}.bn_running_var"), b.running_var.view_mut().into_dyn()));
            }
        }
        for (i, g) in self.gru.iter_mut().enumerate() {
            for (dir, w) in [("fwd", &mut g.forward), ("bwd", &mut g.backward)] {
                v.push((format!("gru{i}.{dir}.w_input"), w.w_input.view_mut().into_dyn()));
                v.push((format!("gru{i}.{dir}.w_recurrent"), w.w_recurrent.view_mut().into_dyn()));
                v.push((format!("gru{i}.{dir}.bias"), w.bias.view_mut().into_dyn()));
            }
        }
        v.push(("dense.weight".into(), self.dense_w.view_mut().into_dyn()));
        v.push(("dense.bias".into(), self.dense_b.view_mut().into_dyn()));
        v
    }

    /// Learnable tensors in a fixed order.
    pub fn trainable(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        self.named(false, |a| a)
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        self.named_mut(false)
    }

    /// Learnable tensors plus batch-norm running statistics.
    pub fn all_tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        self.named(true, |a| a)
    }

    pub fn all_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        self.named_mut(true)
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.all_tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &ArrayView3<T>, mask: Option<&ArrayView2<bool>>) -> Result<(), CrnnError> {
        let (b, t, f) = x.dim();
        if f != self.n_mels {
            return Err(CrnnError::ShapeMismatch(format!("input has {f} bands, model expects {}", self.n_mels)));
        }
        if b == 0 || t == 0 {
            return Err(CrnnError::ShapeMismatch(format!("empty input batch {b}x{t}")));
        }
        if let Some(m) = mask {
            if m.dim() != (b, t) {
                return Err(CrnnError::ShapeMismatch(format!("mask {:?} for input {b}x{t}", m.dim())));
            }
        }
        Ok(())
    }

    fn gru_stack_forward(&self, mut seq: Array3<T>, caches: Option<&mut Vec<GruLayerCache<T>>>) -> Array3<T> {
        let mut store = caches;
        for layer in &self.gru {
            let (yf, cf) = layers::gru_forward(&layer.forward, seq.view(), false);
            let (yb, cb) = layers::gru_forward(&layer.backward, seq.view(), true);
            let out = concatenate(Axis(2), &[yf.view(), yb.view()]).expect("same batch and time");
            if let Some(c) = store.as_deref_mut() {
                c.push(GruLayerCache {
                    input: seq,
                    fwd: cf,
                    bwd: cb,
                });
            }
            seq = out;
        }
        seq
    }

    /// Inference forward pass over `[batch, frames, n_mels]`; batch norm uses
    /// running statistics. Returns `[batch, frames, classes]` probabilities.
    pub fn forward_infer(&self, x: ArrayView3<T>) -> Result<Array3<T>, CrnnError> {
        self.check_input(&x, None)?;
        let (b, t, f) = x.dim();
        let mut h = x.to_owned().into_shape_with_order((b, 1, t, f)).expect("standard layout");
        for blk in &self.conv {
            let y = layers::conv3x3_forward(h.view(), &blk.kernel, &blk.bias);
            let y = layers::batchnorm_infer_forward(y.view(), &blk.gamma, &blk.beta, &blk.running_mean, &blk.running_var);
            let y = layers::relu_forward(y);
            h = layers::maxpool_freq_forward(y.view(), blk.freq_pool).0;
        }
        let seq = layers::flatten_frames(h.view());
        let seq = self.gru_stack_forward(seq, None);
        let logits = layers::dense_forward(seq.view(), &self.dense_w, &self.dense_b);
        Ok(layers::sigmoid_array(&logits))
    }

    /// Training forward pass. Batch-norm statistics come from frames where
    /// `mask` is true.
    pub fn forward_train(&self, x: ArrayView3<T>, mask: ArrayView2<bool>) -> Result<TrainCache<T>, CrnnError> {
        self.check_input(&x, Some(&mask))?;
        let (b, t, f) = x.dim();
        let mut h = x.to_owned().into_shape_with_order((b, 1, t, f)).expect("standard layout");
        let mut conv = Vec::with_capacity(self.conv.len());
        let mut batch_stats = Vec::with_capacity(self.conv.len());
        for blk in &self.conv {
            let y = layers::conv3x3_forward(h.view(), &blk.kernel, &blk.bias);
            let (y, bn, mean, var) = layers::batchnorm_train_forward(y.view(), &blk.gamma, &blk.beta, mask);
            let y = layers::relu_forward(y);
            let (pooled, arg) = layers::maxpool_freq_forward(y.view(), blk.freq_pool);
            conv.push(ConvCache {
                input: h,
                bn,
                relu_out: y,
                pool_arg: arg,
            });
            batch_stats.push((mean, var));
            h = pooled;
        }
        let (_, flat_c, _, flat_f) = h.dim();
        let seq = layers::flatten_frames(h.view());
        let mut gru = Vec::with_capacity(self.gru.len());
        let seq = self.gru_stack_forward(seq, Some(&mut gru));
        let logits = layers::dense_forward(seq.view(), &self.dense_w, &self.dense_b);
        let probs = layers::sigmoid_array(&logits);
        Ok(TrainCache {
            conv,
            flat_c,
            flat_f,
            gru,
            dense_in: seq,
            probs,
            batch_stats,
        })
    }

    /// Gradients of the loss given `dprobs = dL/dp` from [`bce_loss`].
    pub fn backward(&self, cache: &TrainCache<T>, dprobs: ArrayView3<T>) -> Network<T> {
        let mut g = self.zeros_like();
        let mut dz = dprobs.to_owned();
        Zip::from(&mut dz).and(&cache.probs).for_each(|d, &p| *d *= p * (T::one() - p));
        let (mut dseq, dw, db) = layers::dense_backward(cache.dense_in.view(), &self.dense_w, dz.view());
        g.dense_w = dw;
        g.dense_b = db;
        for (li, layer) in self.gru.iter().enumerate().rev() {
            let c = &cache.gru[li];
            let h = layer.forward.hidden();
            let (dxf, gf) = layers::gru_backward(&layer.forward, c.input.view(), &c.fwd, dseq.slice(s![.., .., ..h]), false);
            let (dxb, gb) = layers::gru_backward(&layer.backward, c.input.view(), &c.bwd, dseq.slice(s![.., .., h..]), true);
            g.gru[li].forward = gf;
            g.gru[li].backward = gb;
            dseq = dxf + dxb;
        }
        let mut dh = layers::unflatten_frames(dseq.view(), cache.flat_c, cache.flat_f);
        for (bi, blk) in self.conv.iter().enumerate().rev() {
            let c = &cache.conv[bi];
            let f_in = c.relu_out.dim().3;
            let dy = layers::maxpool_freq_backward(dh.view(), &c.pool_arg, f_in);
            let dy = layers::relu_backward(dy, c.relu_out.view());
            let (dy, dgamma, dbeta) = layers::batchnorm_backward(dy.view(), &blk.gamma, &c.bn);
            let cg = layers::conv3x3_backward(c.input.view(), &blk.kernel, dy.view(), bi > 0);
            let gb = &mut g.conv[bi];
            gb.kernel = cg.dkernel;
            gb.bias = cg.dbias;
            gb.gamma = dgamma;
            gb.beta = dbeta;
            dh = cg.dx;
        }
        g
    }

    /// Exponential running-stat update: `r = m r + (1 - m) batch`.
    pub fn update_running_stats(&mut self, stats: &[(Array1<T>, Array1<T>)], momentum: T) {
        for (blk, (mean, var)) in self.conv.iter_mut().zip(stats) {
            Zip::from(&mut blk.running_mean)
                .and(mean)
                .for_each(|r, &b| *r = momentum * *r + (T::one() - momentum) * b);
            Zip::from(&mut blk.running_var)
                .and(var)
                .for_each(|r, &b| *r = momentum * *r + (T::one() - momentum) * b);
        }
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.all_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect()
    }

    /// Build a zeroed network with the given layout.
    pub fn zeros(arch: &ArchitecturePreset, classes: usize) -> Result<Self, CrnnError> {
        let mut n = Self::init(arch, classes, 0)?;
        for (_, mut t) in n.all_tensors_mut() {
            t.fill(T::zero());
        }
        Ok(n)
    }
}

/// Mean binary cross-entropy over valid `(frame, class)` cells, accumulated
/// in f64, and its gradient with respect to the probabilities.
pub fn bce_loss<T: Real>(
    probs: ArrayView3<T>,
    targets: ArrayView3<u8>,
    mask: ArrayView2<bool>,
) -> Result<(f64, Array3<T>), CrnnError> {
    let (b, t, c) = probs.dim();
    if targets.dim() != (b, t, c) || mask.dim() != (b, t) {
        return Err(CrnnError::ShapeMismatch(format!(
            "probs {:?}, targets {:?}, mask {:?}",
            probs.dim(),
            targets.dim(),
            mask.dim()
        )));
    }
    let n_valid = mask.iter().filter(|&&m| m).count() * c;
    if n_valid == 0 {
        return Err(CrnnError::AllMasked);
    }
    let inv_n = 1.0 / n_valid as f64;
    let mut grad = Array3::zeros((b, t, c));
    let mut total = 0f64;
    for bi in 0..b {
        for ti in 0..t {
            if !mask[[bi, ti]] {
                continue;
            }
            for ci in 0..c {
                let p = probs[[bi, ti, ci]].to_f64().unwrap().clamp(PROB_CLIP, 1.0 - PROB_CLIP);
                let y = targets[[bi, ti, ci]] as f64;
                total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                grad[[bi, ti, ci]] = lit((-y / p + (1.0 - y) / (1.0 - p)) * inv_n);
            }
        }
    }
    Ok((total * inv_n, grad))
}

pub(crate) fn tensor_from(shape: &[usize], data: Vec<f32>) -> Option<ArrayD<f32>> {
    ArrayD::from_shape_vec(IxDyn(shape), data).ok()
}
