//! Parameter storage and the three layer kinds of the network: 2-D
//! convolution (no bias), batch normalization and a dense output layer.
//!
//! Layers hold only hyper-parameters and [`ParamId`]s into a shared
//! [`ParamStore`]; activations needed for the backward pass are kept by the
//! caller.

use rayon::prelude::*;

use crate::scalar::{matmul, Scalar};

/// Dense `N×C×H×W` activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![S::zero(); n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[S] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.n, self.c, self.h, self.w) == (other.n, other.c, other.h, other.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<S>,
    pub grad: Vec<S>,
    /// False for running statistics, which are state rather than weights.
    pub trainable: bool,
}

/// All weights and running statistics of a model, in creation order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn add(&mut self, name: String, shape: Vec<usize>, value: Vec<S>, trainable: bool) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "{name}: shape/value mismatch");
        let grad = if trainable { vec![S::zero(); value.len()] } else { Vec::new() };
        self.entries.push(ParamEntry { name, shape, value, grad, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &[S] {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.entries[id.0].value
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.entries[id.0].grad
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<S>] {
        &mut self.entries
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// For a same-size, stride-1 window offset by `(dy, dx)`, the flattened
/// output range `lo..hi` whose source index `i + shift` lies inside the plane.
/// Entries in that range whose column wrapped around a row edge are fixed up
/// by [`zero_wrapped_columns`].
fn flat_window(h: usize, w: usize, dy: isize, dx: isize) -> (usize, usize, isize) {
    let p = (h * w) as isize;
    let shift = dy * w as isize + dx;
    let lo = (-shift).clamp(0, p) as usize;
    let hi = (p - shift).clamp(0, p) as usize;
    (lo, hi.max(lo), shift)
}

fn zero_wrapped_columns<S: Scalar>(buf: &mut [S], w: usize, dx: isize) {
    if dx == 0 {
        return;
    }
    let cols = if dx < 0 { 0..(dx.unsigned_abs()).min(w) } else { w.saturating_sub(dx as usize)..w };
    for row in buf.chunks_mut(w) {
        row[cols.clone()].fill(S::zero());
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [S],
) {
    let p = ho * wo;
    let same = stride == 1 && ho == h && wo == w;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let base = ((ci * k + ky) * k + kx) * p;
                if same {
                    let dst = &mut col[base..base + p];
                    let (lo, hi, shift) = flat_window(h, w, ky as isize - pad as isize, kx as isize - pad as isize);
                    dst[..lo].fill(S::zero());
                    dst[hi..].fill(S::zero());
                    dst[lo..hi].copy_from_slice(&plane[(lo as isize + shift) as usize..(hi as isize + shift) as usize]);
                    zero_wrapped_columns(dst, w, kx as isize - pad as isize);
                    continue;
                }
                // Valid output columns: 0 <= ox*stride + kx - pad < w.
                let lo = (pad.saturating_sub(kx) + stride - 1) / stride;
                let hi = ((w + pad - kx + stride - 1) / stride).min(wo).max(lo);
                for oy in 0..ho {
                    let dst = &mut col[base + oy * wo..base + (oy + 1) * wo];
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    // Element loops: rows are often only a few pixels wide,
                    // where slice fills and copies cost more than they save.
                    for (ox, d) in dst.iter_mut().enumerate() {
                        *d = if (lo..hi).contains(&ox) { src[ox * stride + kx - pad] } else { S::zero() };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters and accumulates columns into `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    col: &mut [S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [S],
) {
    let p = ho * wo;
    let same = stride == 1 && ho == h && wo == w;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let base = ((ci * k + ky) * k + kx) * p;
                if same {
                    let src = &mut col[base..base + p];
                    let (lo, hi, shift) = flat_window(h, w, ky as isize - pad as isize, kx as isize - pad as isize);
                    zero_wrapped_columns(src, w, kx as isize - pad as isize);
                    let dst = &mut plane[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    dst.iter_mut().zip(&src[lo..hi]).for_each(|(d, s)| *d += *s);
                    continue;
                }
                let lo = (pad.saturating_sub(kx) + stride - 1) / stride;
                let hi = ((w + pad - kx + stride - 1) / stride).min(wo).max(lo);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &col[base + oy * wo..base + (oy + 1) * wo];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in lo..hi {
                        dst[ox * stride + kx - pad] += src[ox];
                    }
                }
            }
        }
    }
}

impl Conv2d {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        init: &mut impl FnMut(usize, usize) -> Vec<S>,
    ) -> Self {
        let fan_in = in_c * k * k;
        let weight = store.add(format!("{name}.weight"), vec![out_c, in_c, k, k], init(out_c * fan_in, fan_in), true);
        Self { weight, in_c, out_c, k, stride, pad: (k - 1) / 2 }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.k) / self.stride + 1, (w + 2 * self.pad - self.k) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn forward<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor<S>) -> Tensor<S> {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (ho, wo) = self.out_hw(x.h, x.w);
        let p = ho * wo;
        let kk = self.in_c * self.k * self.k;
        let weight = store.value(self.weight);
        let mut y = Tensor::zeros(x.n, self.out_c, ho, wo);
        let pointwise = self.is_pointwise();
        y.data.par_chunks_mut(self.out_c * p).enumerate().for_each_init(
            || if pointwise { Vec::new() } else { vec![S::zero(); kk * p] },
            |col, (i, yi)| {
                let xi = x.sample(i);
                if pointwise {
                    matmul(self.out_c, kk, p, weight, false, xi, false, S::zero(), yi);
                } else {
                    im2col(xi, x.c, x.h, x.w, self.k, self.stride, self.pad, ho, wo, col);
                    matmul(self.out_c, kk, p, weight, false, col, false, S::zero(), yi);
                }
            },
        );
        y
    }

    /// Accumulates the weight gradient and returns `dL/dx` when requested.
    ///
    /// Per-sample weight gradients are summed in sample order, so the result
    /// does not depend on the thread count.
    pub fn backward<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        x: &Tensor<S>,
        dy: &Tensor<S>,
        need_dx: bool,
    ) -> Option<Tensor<S>> {
        let (ho, wo) = (dy.h, dy.w);
        let p = ho * wo;
        let kk = self.in_c * self.k * self.k;
        let pointwise = self.is_pointwise();
        let weight = store.value(self.weight);
        let per_sample = |i: usize, dxi: Option<&mut [S]>, col: &mut Vec<S>| -> Vec<S> {
            let dyi = &dy.data[i * self.out_c * p..(i + 1) * self.out_c * p];
            let xi = x.sample(i);
            let mut dw = vec![S::zero(); self.out_c * kk];
            if pointwise {
                matmul(self.out_c, p, kk, dyi, false, xi, true, S::zero(), &mut dw);
            } else {
                im2col(xi, x.c, x.h, x.w, self.k, self.stride, self.pad, ho, wo, col);
                matmul(self.out_c, p, kk, dyi, false, col, true, S::zero(), &mut dw);
            }
            if let Some(dxi) = dxi {
                if pointwise {
                    matmul(kk, self.out_c, p, weight, true, dyi, false, S::zero(), dxi);
                } else {
                    matmul(kk, self.out_c, p, weight, true, dyi, false, S::zero(), col);
                    col2im(col, x.c, x.h, x.w, self.k, self.stride, self.pad, ho, wo, dxi);
                }
            }
            dw
        };
        let scratch = || if pointwise { Vec::new() } else { vec![S::zero(); kk * p] };
        let mut dx = need_dx.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
        let partials: Vec<Vec<S>> = match dx.as_mut() {
            Some(dx) => {
                let l = dx.sample_len();
                dx.data
                    .par_chunks_mut(l)
                    .enumerate()
                    .map_init(scratch, |col, (i, dxi)| per_sample(i, Some(dxi), col))
                    .collect()
            }
            None => (0..x.n).into_par_iter().map_init(scratch, |col, i| per_sample(i, None, col)).collect(),
        };
        let g = store.grad_mut(self.weight);
        for dw in &partials {
            g.iter_mut().zip(dw).for_each(|(a, b)| *a += *b);
        }
        dx
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub c: usize,
}

/// What the backward pass needs from a training-mode forward.
#[derive(Debug, Clone)]
pub struct BnCache<S> {
    xhat: Tensor<S>,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), vec![c], vec![S::one(); c], true),
            beta: store.add(format!("{name}.beta"), vec![c], vec![S::zero(); c], true),
            running_mean: store.add(format!("{name}.running_mean"), vec![c], vec![S::zero(); c], false),
            running_var: store.add(format!("{name}.running_var"), vec![c], vec![S::one(); c], false),
            c,
        }
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train<S: Scalar>(&self, store: &mut ParamStore<S>, x: &Tensor<S>) -> (Tensor<S>, BnCache<S>) {
        let (n, c, hw) = (x.n, x.c, x.plane());
        let m = (n * hw) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for i in 0..n {
            for ch in 0..c {
                let s = &x.data[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                mean[ch] += s.iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for i in 0..n {
            for ch in 0..c {
                let s = &x.data[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                let mu = mean[ch];
                var[ch] += s.iter().map(|v| (v.as_f64() - mu) * (v.as_f64() - mu)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

        let mut xhat = Tensor::zeros(n, c, x.h, x.w);
        let mut y = Tensor::zeros(n, c, x.h, x.w);
        let (gamma, beta) = (store.value(self.gamma), store.value(self.beta));
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                let (mu, is) = (S::of(mean[ch]), S::of(inv_std[ch]));
                let (g, b) = (gamma[ch], beta[ch]);
                for ((xh, yv), xv) in xhat.data[r.clone()].iter_mut().zip(&mut y.data[r.clone()]).zip(&x.data[r]) {
                    *xh = (*xv - mu) * is;
                    *yv = g * *xh + b;
                }
            }
        }

        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let rm = store.value_mut(self.running_mean);
        for (r, mu) in rm.iter_mut().zip(&mean) {
            *r = S::of((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * mu);
        }
        let rv = store.value_mut(self.running_var);
        for (r, v) in rv.iter_mut().zip(&var) {
            *r = S::of((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * v * unbias);
        }
        (y, BnCache { xhat, inv_std })
    }

    /// Normalizes with the running statistics.
    pub fn forward_eval<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor<S>) -> Tensor<S> {
        let (c, hw) = (x.c, x.plane());
        let (gamma, beta) = (store.value(self.gamma), store.value(self.beta));
        let (rm, rv) = (store.value(self.running_mean), store.value(self.running_var));
        let scale: Vec<S> = (0..c)
            .map(|ch| gamma[ch] * S::of(1.0 / (rv[ch].as_f64() + BN_EPS).sqrt()))
            .collect();
        let shift: Vec<S> = (0..c).map(|ch| beta[ch] - rm[ch] * scale[ch]).collect();
        let mut y = x.clone();
        for (j, chunk) in y.data.chunks_mut(hw).enumerate() {
            let ch = j % c;
            chunk.iter_mut().for_each(|v| *v = *v * scale[ch] + shift[ch]);
        }
        y
    }

    pub fn backward<S: Scalar>(&self, store: &mut ParamStore<S>, cache: &BnCache<S>, dy: &Tensor<S>) -> Tensor<S> {
        let (n, c, hw) = (dy.n, dy.c, dy.plane());
        let m = (n * hw) as f64;
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for (d, xh) in dy.data[r.clone()].iter().zip(&cache.xhat.data[r]) {
                    sum_dy[ch] += d.as_f64();
                    sum_dy_xhat[ch] += d.as_f64() * xh.as_f64();
                }
            }
        }
        {
            let gg = store.grad_mut(self.gamma);
            for ch in 0..c {
                gg[ch] += S::of(sum_dy_xhat[ch]);
            }
        }
        {
            let gb = store.grad_mut(self.beta);
            for ch in 0..c {
                gb[ch] += S::of(sum_dy[ch]);
            }
        }
        let gamma = store.value(self.gamma);
        let mut dx = Tensor::zeros(n, c, dy.h, dy.w);
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                let k = S::of(gamma[ch].as_f64() * cache.inv_std[ch] / m);
                let (sd, sdx) = (S::of(sum_dy[ch]), S::of(sum_dy_xhat[ch]));
                let mm = S::of(m);
                for ((o, d), xh) in dx.data[r.clone()].iter_mut().zip(&dy.data[r.clone()]).zip(&cache.xhat.data[r]) {
                    *o = k * (mm * *d - sd - *xh * sdx);
                }
            }
        }
        dx
    }
}

/// Fully connected layer `y = x·Wᵀ + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: &mut impl FnMut(usize, usize) -> Vec<S>,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), vec![outputs, inputs], init(outputs * inputs, inputs), true);
        let bias = store.add(format!("{name}.bias"), vec![outputs], vec![S::zero(); outputs], true);
        Self { weight, bias, inputs, outputs }
    }

    pub fn forward<S: Scalar>(&self, store: &ParamStore<S>, x: &[S], n: usize) -> Vec<S> {
        let mut y = vec![S::zero(); n * self.outputs];
        matmul(n, self.inputs, self.outputs, x, false, store.value(self.weight), true, S::zero(), &mut y);
        let b = store.value(self.bias);
        for row in y.chunks_mut(self.outputs) {
            row.iter_mut().zip(b).for_each(|(v, b)| *v += *b);
        }
        y
    }

    pub fn backward<S: Scalar>(&self, store: &mut ParamStore<S>, x: &[S], dy: &[S], n: usize) -> Vec<S> {
        matmul(self.outputs, n, self.inputs, dy, true, x, false, S::one(), store.grad_mut(self.weight));
        {
            let gb = store.grad_mut(self.bias);
            for row in dy.chunks(self.outputs) {
                gb.iter_mut().zip(row).for_each(|(g, d)| *g += *d);
            }
        }
        let mut dx = vec![S::zero(); n * self.inputs];
        matmul(n, self.outputs, self.inputs, dy, false, store.value(self.weight), false, S::zero(), &mut dx);
        dx
    }
}
