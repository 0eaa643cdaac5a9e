//! Wide residual network: configuration, construction, forward and backward
//! passes.

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use sigclass::rng::{stream, RandomStream, StreamPurpose};

use crate::layers::{BatchNorm2d, BnCache, Conv2d, Linear, ParamStore, Tensor};
use crate::scalar::Scalar;
use crate::WrnError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WrnConfig {
    pub depth: usize,
    pub widen: usize,
    pub dropout: f64,
    pub in_channels: usize,
    pub classes: usize,
    pub input_h: usize,
    pub input_w: usize,
}

impl Default for WrnConfig {
    fn default() -> Self {
        Self { depth: 10, widen: 1, dropout: 0.3, in_channels: 2, classes: 7, input_h: 96, input_w: 128 }
    }
}

impl WrnConfig {
    pub fn validate(&self) -> Result<(), WrnError> {
        let bad = |m: String| Err(WrnError::Config(m));
        if self.depth < 10 || (self.depth - 4) % 6 != 0 {
            return bad(format!("depth {} is not 6b+4 with b >= 1", self.depth));
        }
        if self.widen < 1 {
            return bad("widen must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.in_channels == 0 || self.classes == 0 || self.input_h == 0 || self.input_w == 0 {
            return bad("channels, classes and input size must be positive".into());
        }
        Ok(())
    }

    pub fn blocks_per_group(&self) -> usize {
        (self.depth - 4) / 6
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.input_h * self.input_w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct BasicBlock {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

struct BlockCache<S> {
    bn1: BnCache<S>,
    a: Tensor<S>,
    bn2: BnCache<S>,
    b: Tensor<S>,
    mask: Option<Vec<S>>,
}

struct ForwardCache<S> {
    input: Tensor<S>,
    blocks: Vec<BlockCache<S>>,
    bn: BnCache<S>,
    act: Tensor<S>,
    pooled: Vec<S>,
}

fn relu<S: Scalar>(mut t: Tensor<S>) -> Tensor<S> {
    t.data.iter_mut().for_each(|v| *v = v.max(S::zero()));
    t
}

/// Zeroes `d` wherever the rectifier output `act` is not positive.
fn relu_grad<S: Scalar>(mut d: Tensor<S>, act: &Tensor<S>) -> Tensor<S> {
    d.data.iter_mut().zip(&act.data).for_each(|(g, a)| {
        if *a <= S::zero() {
            *g = S::zero();
        }
    });
    d
}

fn add_into<S: Scalar>(dst: &mut Tensor<S>, src: &Tensor<S>) {
    debug_assert!(dst.same_shape(src));
    dst.data.iter_mut().zip(&src.data).for_each(|(a, b)| *a += *b);
}

/// Row-wise softmax computed in double precision.
pub fn softmax<S: Scalar>(logits: &[S], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}

pub struct WrnModel<S> {
    cfg: WrnConfig,
    store: ParamStore<S>,
    stem: Conv2d,
    blocks: Vec<BasicBlock>,
    bn: BatchNorm2d,
    fc: Linear,
    dropout_rng: RandomStream,
    /// First parameter-store entry of each block and of the head.
    stage_starts: Vec<usize>,
    cache: Option<ForwardCache<S>>,
}

impl<S: Scalar> Clone for WrnModel<S> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg,
            store: self.store.clone(),
            stem: self.stem,
            blocks: self.blocks.clone(),
            bn: self.bn,
            fc: self.fc,
            dropout_rng: self.dropout_rng.clone(),
            stage_starts: self.stage_starts.clone(),
            cache: None,
        }
    }
}

fn gaussian<S: Scalar>(rng: &mut RandomStream, len: usize, std: f64) -> Vec<S> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| S::of(normal.sample(rng))).collect()
}

impl<S: Scalar> WrnModel<S> {
    pub fn build(cfg: WrnConfig, seed: u64) -> Result<Self, WrnError> {
        cfg.validate()?;
        let mut rng = stream(seed, StreamPurpose::Init);
        let mut store = ParamStore::default();
        let mut he = |len: usize, fan_in: usize| gaussian::<S>(&mut rng, len, (2.0 / fan_in as f64).sqrt());

        let stem = Conv2d::new(&mut store, "conv0", cfg.in_channels, 16, 3, 1, &mut he);
        let mut blocks = Vec::new();
        let mut stage_starts = Vec::new();
        let mut in_c = 16;
        for (g, (width, stride)) in [(16, 1), (32, 2), (64, 2)].into_iter().enumerate() {
            let out_c = width * cfg.widen;
            for j in 0..cfg.blocks_per_group() {
                let s = if j == 0 { stride } else { 1 };
                let name = format!("group{g}.block{j}");
                stage_starts.push(store.entries().len());
                let bn1 = BatchNorm2d::new(&mut store, &format!("{name}.bn1"), in_c);
                let conv1 = Conv2d::new(&mut store, &format!("{name}.conv1"), in_c, out_c, 3, s, &mut he);
                let bn2 = BatchNorm2d::new(&mut store, &format!("{name}.bn2"), out_c);
                let conv2 = Conv2d::new(&mut store, &format!("{name}.conv2"), out_c, out_c, 3, 1, &mut he);
                let shortcut = (in_c != out_c || s != 1)
                    .then(|| Conv2d::new(&mut store, &format!("{name}.shortcut"), in_c, out_c, 1, s, &mut he));
                blocks.push(BasicBlock { bn1, conv1, bn2, conv2, shortcut });
                in_c = out_c;
            }
        }
        stage_starts.push(store.entries().len());
        let bn = BatchNorm2d::new(&mut store, "bn", in_c);
        let fc = Linear::new(&mut store, "fc", in_c, cfg.classes, &mut |len, fan_in| {
            gaussian::<S>(&mut rng, len, (1.0 / fan_in as f64).sqrt())
        });
        Ok(Self {
            cfg,
            store,
            stem,
            blocks,
            bn,
            fc,
            dropout_rng: stream(seed, StreamPurpose::Dropout),
            stage_starts,
            cache: None,
        })
    }

    pub fn config(&self) -> &WrnConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Reseeds the dropout masks, e.g. per training run.
    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout_rng = stream(seed, StreamPurpose::Dropout);
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<(), WrnError> {
        let c = &self.cfg;
        if (x.c, x.h, x.w) != (c.in_channels, c.input_h, c.input_w) || x.n == 0 {
            return Err(WrnError::Shape(format!(
                "expected N×{}×{}×{} with N>0, got {}×{}×{}×{}",
                c.in_channels, c.input_h, c.input_w, x.n, x.c, x.h, x.w
            )));
        }
        Ok(())
    }

    /// Wraps a flat batch of `n` inputs in a tensor of the configured shape.
    pub fn batch(&self, data: Vec<S>, n: usize) -> Result<Tensor<S>, WrnError> {
        let c = &self.cfg;
        if data.len() != n * c.input_len() {
            return Err(WrnError::Shape(format!("batch of {n} needs {} values, got {}", n * c.input_len(), data.len())));
        }
        Ok(Tensor::from_vec(n, c.in_channels, c.input_h, c.input_w, data))
    }

    /// Logits, `N×classes` row-major.
    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Vec<S>, WrnError> {
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => self.forward_train(x),
        }
    }

    /// Inference with running statistics and no dropout.
    pub fn forward_eval(&self, x: &Tensor<S>) -> Result<Vec<S>, WrnError> {
        self.check_input(x)?;
        let st = &self.store;
        let mut z = self.stem.forward(st, x);
        for blk in &self.blocks {
            let a = relu(blk.bn1.forward_eval(st, &z));
            let h = blk.conv1.forward(st, &a);
            let b = relu(blk.bn2.forward_eval(st, &h));
            let mut y = blk.conv2.forward(st, &b);
            match &blk.shortcut {
                Some(sc) => add_into(&mut y, &sc.forward(st, &a)),
                None => add_into(&mut y, &z),
            }
            z = y;
        }
        let act = relu(self.bn.forward_eval(st, &z));
        let pooled = global_pool(&act);
        Ok(self.fc.forward(st, &pooled, x.n))
    }

    fn block_train(&mut self, j: usize, z: &Tensor<S>) -> (Tensor<S>, BlockCache<S>) {
        let p = self.cfg.dropout;
        let blk = &self.blocks[j];
        let (o1, bn1) = blk.bn1.forward_train(&mut self.store, z);
        let a = relu(o1);
        let h = blk.conv1.forward(&self.store, &a);
        let (o2, bn2) = blk.bn2.forward_train(&mut self.store, &h);
        let mut b = relu(o2);
        let mask = (p > 0.0).then(|| {
            let threshold = (p * 4_294_967_296.0) as u64;
            let keep = S::of(1.0 / (1.0 - p));
            let m: Vec<S> = (0..b.data.len())
                .map(|_| if (self.dropout_rng.next_u32() as u64) < threshold { S::zero() } else { keep })
                .collect();
            b.data.iter_mut().zip(&m).for_each(|(v, k)| *v *= *k);
            m
        });
        let mut y = blk.conv2.forward(&self.store, &b);
        match &blk.shortcut {
            Some(sc) => add_into(&mut y, &sc.forward(&self.store, &a)),
            None => add_into(&mut y, z),
        }
        (y, BlockCache { bn1, a, bn2, b, mask })
    }

    fn head_train(&mut self, z: &Tensor<S>) -> (Vec<S>, BnCache<S>, Tensor<S>, Vec<S>) {
        let (o, bn) = self.bn.forward_train(&mut self.store, z);
        let act = relu(o);
        let pooled = global_pool(&act);
        let logits = self.fc.forward(&self.store, &pooled, z.n);
        (logits, bn, act, pooled)
    }

    fn forward_train(&mut self, x: &Tensor<S>) -> Result<Vec<S>, WrnError> {
        self.check_input(x)?;
        let mut z = self.stem.forward(&self.store, x);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for j in 0..self.blocks.len() {
            let (y, c) = self.block_train(j, &z);
            caches.push(c);
            z = y;
        }
        let (logits, bn, act, pooled) = self.head_train(&z);
        self.cache = Some(ForwardCache { input: x.clone(), blocks: caches, bn, act, pooled });
        Ok(logits)
    }

    /// Number of stages after the stem: one per block plus the output head.
    pub fn stages(&self) -> usize {
        self.blocks.len() + 1
    }

    /// Training-mode activations entering each stage.
    pub fn stage_inputs(&mut self, x: &Tensor<S>) -> Result<Vec<Tensor<S>>, WrnError> {
        self.check_input(x)?;
        let mut out = vec![self.stem.forward(&self.store, x)];
        for j in 0..self.blocks.len() {
            let (y, _) = self.block_train(j, &out[j]);
            out.push(y);
        }
        Ok(out)
    }

    /// Training-mode logits computed from the activation entering `stage`.
    pub fn forward_train_from(&mut self, stage: usize, z: &Tensor<S>) -> Vec<S> {
        let mut z = z.clone();
        for j in stage..self.blocks.len() {
            z = self.block_train(j, &z).0;
        }
        self.head_train(&z).0
    }

    /// The stage owning parameter-store entry `index`; `None` for the stem.
    pub fn stage_of(&self, index: usize) -> Option<usize> {
        self.stage_starts.iter().rposition(|&s| s <= index)
    }

    /// Back-propagates `dlogits` through the last training forward pass,
    /// accumulating into the parameter gradients.
    pub fn backward(&mut self, dlogits: &[S]) -> Result<(), WrnError> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| WrnError::Shape("backward without a training forward pass".into()))?;
        let n = cache.input.n;
        if dlogits.len() != n * self.cfg.classes {
            return Err(WrnError::Shape("gradient does not match logits".into()));
        }
        let dpooled = self.fc.backward(&mut self.store, &cache.pooled, dlogits, n);
        let act = &cache.act;
        let hw = act.plane();
        let inv = S::of(1.0 / hw as f64);
        let mut dact = Tensor::zeros(act.n, act.c, act.h, act.w);
        for (j, chunk) in dact.data.chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v = dpooled[j] * inv);
        }
        let mut dz = self.bn.backward(&mut self.store, &cache.bn, &relu_grad(dact, act));
        for (blk, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut db = blk.conv2.backward(&mut self.store, &c.b, &dz, true).expect("dx requested");
            if let Some(m) = &c.mask {
                db.data.iter_mut().zip(m).for_each(|(g, k)| *g *= *k);
            }
            let dh = blk.bn2.backward(&mut self.store, &c.bn2, &relu_grad(db, &c.b));
            let mut da = blk.conv1.backward(&mut self.store, &c.a, &dh, true).expect("dx requested");
            if let Some(sc) = &blk.shortcut {
                add_into(&mut da, &sc.backward(&mut self.store, &c.a, &dz, true).expect("dx requested"));
            }
            let mut dx = blk.bn1.backward(&mut self.store, &c.bn1, &relu_grad(da, &c.a));
            if blk.shortcut.is_none() {
                add_into(&mut dx, &dz);
            }
            dz = dx;
        }
        self.stem.backward(&mut self.store, &cache.input, &dz, false);
        Ok(())
    }

    /// Mean cross-entropy of a training-mode pass; gradients are left in the
    /// parameter store (zeroed first).
    pub fn loss_and_grads(&mut self, x: &Tensor<S>, labels: &[usize]) -> Result<f64, WrnError> {
        if labels.len() != x.n {
            return Err(WrnError::Shape(format!("{} labels for {} inputs", labels.len(), x.n)));
        }
        let k = self.cfg.classes;
        if let Some(&l) = labels.iter().find(|&&l| l >= k) {
            return Err(WrnError::Shape(format!("label {l} out of range")));
        }
        self.store.zero_grads();
        let logits = self.forward_train(x)?;
        let probs = softmax(&logits, k);
        let n = x.n as f64;
        let mut loss = 0.0;
        let mut dlogits = vec![S::zero(); logits.len()];
        for (i, &l) in labels.iter().enumerate() {
            let row = &probs[i * k..(i + 1) * k];
            loss -= row[l].max(f64::MIN_POSITIVE).ln();
            for c in 0..k {
                let target = if c == l { 1.0 } else { 0.0 };
                dlogits[i * k + c] = S::of((row[c] - target) / n);
            }
        }
        self.backward(&dlogits)?;
        Ok(loss / n)
    }

    /// Eval-mode class probabilities.
    pub fn predict_proba(&self, x: &Tensor<S>) -> Result<Vec<f64>, WrnError> {
        Ok(softmax(&self.forward_eval(x)?, self.cfg.classes))
    }
}

fn global_pool<S: Scalar>(t: &Tensor<S>) -> Vec<S> {
    let hw = t.plane();
    t.data
        .chunks(hw)
        .map(|c| S::of(c.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(h: usize, w: usize, dropout: f64) -> WrnConfig {
        WrnConfig { depth: 10, widen: 1, dropout, in_channels: 2, classes: 7, input_h: h, input_w: w }
    }

    #[test]
    fn config_validation() {
        assert!(tiny(8, 8, 0.0).validate().is_ok());
        for depth in [0, 4, 11, 12, 33] {
            let cfg = WrnConfig { depth, ..tiny(8, 8, 0.0) };
            assert!(matches!(WrnModel::<f32>::build(cfg, 1), Err(WrnError::Config(_))), "depth {depth}");
        }
        assert!(WrnConfig { widen: 0, ..tiny(8, 8, 0.0) }.validate().is_err());
        assert!(WrnConfig { dropout: 1.0, ..tiny(8, 8, 0.0) }.validate().is_err());
        assert_eq!(tiny(8, 8, 0.0).blocks_per_group(), 1);
        assert_eq!(WrnConfig { depth: 34, ..tiny(8, 8, 0.0) }.blocks_per_group(), 5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = WrnModel::<f32>::build(tiny(8, 8, 0.0), 3).unwrap();
        let x = Tensor::zeros(1, 2, 8, 9);
        assert!(matches!(m.forward_eval(&x), Err(WrnError::Shape(_))));
        assert!(m.batch(vec![0.0; 10], 1).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts() {
        let logits = [1.0f64, -2.0, 0.5, 3.0, 3.0, 3.0, -7.0];
        let p = softmax(&logits, 7);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = logits.iter().map(|v| v + 100.0).collect();
        for (a, b) in p.iter().zip(softmax(&shifted, 7)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
