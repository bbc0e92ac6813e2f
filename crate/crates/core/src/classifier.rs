//! Five-stage convolutional classifier exposing per-stage activations, its
//! supervised training loop, and the on-disk checkpoint pool used by
//! classifier-agnostic masker training.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::data::{to_batch, ImageSample, CHANNELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::nn::{
    max_pool2, max_pool2_backward, relu_backward_inplace, relu_inplace, softmax_rows, Adam,
    BatchNorm, BnCache, BnGrad, Conv2d, ConvGrad, Linear, LinearGrad,
};
use crate::tensor::{Real, Tensor};

pub const STAGE_CHANNELS: [usize; 5] = [16, 32, 64, 128, 256];
pub const NUM_STAGES: usize = 5;
pub const ARCH_TAG: &str = "shapes-cnn5-v1";
const HEAD_INIT_STD: f64 = 0.01;

/// Spatial side of activation layer `layer` (1-based) for a 64×64 input.
pub fn layer_side(layer: usize) -> usize {
    IMAGE_SIDE >> layer
}

/// Channel count of activation layer `layer` (1-based).
pub fn layer_channels(layer: usize) -> usize {
    STAGE_CHANNELS[layer - 1]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

/// conv 3×3 → batch norm → ReLU → 2×2 max pool, five times, then global
/// average pooling and a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierNet<T> {
    pub stages: Vec<Stage<T>>,
    pub head: Linear<T>,
}

pub type Classifier = ClassifierNet<f32>;

struct StageCache<T> {
    bn: BnCache<T>,
    relu_out: Tensor<T>,
    pool_arg: Vec<u8>,
}

/// Everything a forward pass produced. `activations[i]` is the pooled output
/// of stage i+1, so sides run 32, 16, 8, 4, 2.
pub struct ForwardPass<T> {
    pub input: Tensor<T>,
    pub activations: Vec<Tensor<T>>,
    pub features: Vec<T>,
    pub logits: Vec<T>,
    caches: Vec<StageCache<T>>,
}

impl<T: Real> ForwardPass<T> {
    pub fn batch(&self) -> usize {
        self.input.n
    }

    pub fn probs(&self, k: usize) -> Vec<T> {
        softmax_rows(&self.logits, k)
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierGrad<T> {
    pub stages: Vec<(ConvGrad<T>, BnGrad<T>)>,
    pub head: LinearGrad<T>,
}

impl<T: Real> ClassifierGrad<T> {
    pub fn zeros_like(net: &ClassifierNet<T>) -> Self {
        Self {
            stages: net
                .stages
                .iter()
                .map(|s| {
                    (
                        ConvGrad::zeros_like(&s.conv),
                        BnGrad::zeros(s.bn.channels()),
                    )
                })
                .collect(),
            head: LinearGrad {
                weight: vec![T::zero(); net.head.weight.len()],
                bias: vec![T::zero(); net.head.bias.len()],
            },
        }
    }
}

/// Logits, probabilities and activations of a batch, inference mode.
pub struct ClassifierOutput {
    pub num_classes: usize,
    pub logits: Vec<f32>,
    pub probs: Vec<f32>,
    pub activations: Vec<Tensor<f32>>,
}

impl ClassifierOutput {
    pub fn argmax(&self) -> Vec<usize> {
        argmax_rows(&self.logits, self.num_classes)
    }
}

pub fn argmax_rows<T: Real>(rows: &[T], k: usize) -> Vec<usize> {
    rows.chunks(k)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

fn check_input<T: Real>(x: &Tensor<T>) -> Result<()> {
    if x.c != CHANNELS || x.h != IMAGE_SIDE || x.w != IMAGE_SIDE {
        return Err(Error::Shape(format!(
            "classifier expects {IMAGE_SIDE}x{IMAGE_SIDE}x{CHANNELS} images, got {}x{}x{}",
            x.h, x.w, x.c
        )));
    }
    Ok(())
}

impl<T: Real> ClassifierNet<T> {
    pub fn new<R: Rng + ?Sized>(num_classes: usize, rng: &mut R) -> Self {
        let mut cin = CHANNELS;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for &cout in &STAGE_CHANNELS {
            stages.push(Stage {
                conv: Conv2d::new(cin, cout, 3, false, rng),
                bn: BatchNorm::new(cout),
            });
            cin = cout;
        }
        Self {
            stages,
            head: Linear::new(cin, num_classes, HEAD_INIT_STD, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.fan_out
    }

    pub fn num_params(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.conv.num_params() + 2 * s.bn.channels())
            .sum::<usize>()
            + self.head.num_params()
    }

    fn finish(
        &self,
        x: &Tensor<T>,
        activations: Vec<Tensor<T>>,
        caches: Vec<StageCache<T>>,
    ) -> ForwardPass<T> {
        let last = &activations[NUM_STAGES - 1];
        let inv = T::one() / T::from_usize(last.plane()).unwrap();
        let mut features = vec![T::zero(); last.n * last.c];
        for c in 0..last.c {
            for n in 0..last.n {
                features[n * last.c + c] = last.slice(c, n).iter().copied().sum::<T>() * inv;
            }
        }
        let logits = self.head.forward(&features, last.n);
        ForwardPass {
            input: x.clone(),
            activations,
            features,
            logits,
            caches,
        }
    }

    /// Batch-statistics forward pass; updates batch-norm running estimates.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> ForwardPass<T> {
        let mut activations: Vec<Tensor<T>> = Vec::with_capacity(NUM_STAGES);
        let mut caches = Vec::with_capacity(NUM_STAGES);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let input = if i == 0 { x } else { &activations[i - 1] };
            let z = stage.conv.forward(input);
            let (mut a, bn) = stage.bn.forward(&z, true);
            relu_inplace(&mut a);
            let (pooled, pool_arg) = max_pool2(&a);
            activations.push(pooled);
            caches.push(StageCache {
                bn,
                relu_out: a,
                pool_arg,
            });
        }
        self.finish(x, activations, caches)
    }

    /// Inference-mode forward pass (running statistics, no state change).
    pub fn forward_eval(&self, x: &Tensor<T>) -> ForwardPass<T> {
        let mut activations: Vec<Tensor<T>> = Vec::with_capacity(NUM_STAGES);
        let mut caches = Vec::with_capacity(NUM_STAGES);
        for (i, stage) in self.stages.iter().enumerate() {
            let input = if i == 0 { x } else { &activations[i - 1] };
            let z = stage.conv.forward(input);
            let (mut a, bn) = stage.bn.forward_eval(&z);
            relu_inplace(&mut a);
            let (pooled, pool_arg) = max_pool2(&a);
            activations.push(pooled);
            caches.push(StageCache {
                bn,
                relu_out: a,
                pool_arg,
            });
        }
        self.finish(x, activations, caches)
    }

    /// Backpropagates `dlogits` (N×K). Parameter gradients are accumulated
    /// into `grad` when given; the input gradient is returned when `need_dx`.
    pub fn backward(
        &self,
        pass: &ForwardPass<T>,
        dlogits: &[T],
        mut grad: Option<&mut ClassifierGrad<T>>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let n = pass.batch();
        let dfeat = self.head.backward(
            &pass.features,
            dlogits,
            n,
            grad.as_deref_mut().map(|g| &mut g.head),
        );
        let last = &pass.activations[NUM_STAGES - 1];
        let inv = T::one() / T::from_usize(last.plane()).unwrap();
        let mut dact = Tensor::zeros(last.c, n, last.h, last.w);
        for c in 0..last.c {
            for s in 0..n {
                let g = dfeat[s * last.c + c] * inv;
                dact.slice_mut(c, s).iter_mut().for_each(|v| *v = g);
            }
        }
        for i in (0..NUM_STAGES).rev() {
            let cache = &pass.caches[i];
            let mut d = max_pool2_backward(&dact, &cache.pool_arg);
            relu_backward_inplace(&cache.relu_out, &mut d);
            let (conv_grad, bn_grad) = match grad.as_deref_mut() {
                Some(g) => {
                    let (cg, bg) = &mut g.stages[i];
                    (Some(cg), Some(bg))
                }
                None => (None, None),
            };
            let dz = self.stages[i].bn.backward(&cache.bn, &d, bn_grad);
            let input = if i == 0 {
                &pass.input
            } else {
                &pass.activations[i - 1]
            };
            let want_dx = i > 0 || need_dx;
            {
                let dx = self.stages[i]
                    .conv
                    .backward(input, &dz, conv_grad, want_dx)?;
                dact = dx
            }
        }
        Some(dact)
    }

    /// Replaces stage `index` (0..5 = conv stages, 5 = head) with freshly
    /// initialised parameters.
    pub fn reinit_stage<R: Rng + ?Sized>(&mut self, index: usize, rng: &mut R) {
        if index == NUM_STAGES {
            self.head = Linear::new(self.head.fan_in, self.head.fan_out, HEAD_INIT_STD, rng);
        } else {
            let s = &self.stages[index];
            let (cin, cout) = (s.conv.cin, s.conv.cout);
            self.stages[index] = Stage {
                conv: Conv2d::new(cin, cout, 3, false, rng),
                bn: BatchNorm::new(cout),
            };
        }
    }

    pub fn cast<U: Real>(&self) -> ClassifierNet<U> {
        let cv = |v: &[T]| {
            v.iter()
                .map(|&x| U::from_f64c(x.to_f64c()))
                .collect::<Vec<U>>()
        };
        ClassifierNet {
            stages: self
                .stages
                .iter()
                .map(|s| Stage {
                    conv: Conv2d {
                        cin: s.conv.cin,
                        cout: s.conv.cout,
                        k: s.conv.k,
                        weight: cv(&s.conv.weight),
                        bias: s.conv.bias.as_deref().map(cv),
                    },
                    bn: BatchNorm {
                        gamma: cv(&s.bn.gamma),
                        beta: cv(&s.bn.beta),
                        running_mean: cv(&s.bn.running_mean),
                        running_var: cv(&s.bn.running_var),
                        eps: s.bn.eps,
                        momentum: s.bn.momentum,
                    },
                })
                .collect(),
            head: Linear {
                fan_in: self.head.fan_in,
                fan_out: self.head.fan_out,
                weight: cv(&self.head.weight),
                bias: cv(&self.head.bias),
            },
        }
    }
}

impl Classifier {
    /// Logits, probabilities and all five activation maps, inference mode.
    pub fn forward_with_activations(&self, x: &Tensor<f32>) -> Result<ClassifierOutput> {
        check_input(x)?;
        let pass = self.forward_eval(x);
        let k = self.num_classes();
        Ok(ClassifierOutput {
            num_classes: k,
            probs: pass.probs(k),
            logits: pass.logits,
            activations: pass.activations,
        })
    }

    pub fn predict_probs(&self, x: &Tensor<f32>) -> Result<Vec<f32>> {
        check_input(x)?;
        Ok(self.forward_eval(x).probs(self.num_classes()))
    }

    /// Top-1 predictions for samples, evaluated in batches of 64.
    pub fn predict_labels(&self, samples: &[&ImageSample]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let x = to_batch::<f32>(chunk);
            check_input(&x)?;
            out.extend(argmax_rows(
                &self.forward_eval(&x).logits,
                self.num_classes(),
            ));
        }
        Ok(out)
    }

    /// Percentage of samples whose top-1 matches `labels`.
    pub fn accuracy(&self, samples: &[&ImageSample], labels: &[usize]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset("accuracy needs at least one sample"));
        }
        let pred = self.predict_labels(samples)?;
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(100.0 * hits as f64 / samples.len() as f64)
    }

    /// Parameter buffers in a fixed order (optimiser layout).
    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v: Vec<&mut [f32]> = Vec::new();
        for s in &mut self.stages {
            v.push(&mut s.conv.weight);
            v.push(&mut s.bn.gamma);
            v.push(&mut s.bn.beta);
        }
        v.push(&mut self.head.weight);
        v.push(&mut self.head.bias);
        v
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let mut tensors = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            let p = format!("stage{}", i + 1);
            let c = &s.conv;
            tensors.push(NamedTensor::new(
                format!("{p}.conv.weight"),
                vec![c.cout, c.cin, c.k, c.k],
                c.weight.clone(),
            ));
            let ch = s.bn.channels();
            for (name, v) in [
                ("gamma", &s.bn.gamma),
                ("beta", &s.bn.beta),
                ("running_mean", &s.bn.running_mean),
                ("running_var", &s.bn.running_var),
            ] {
                tensors.push(NamedTensor::new(
                    format!("{p}.bn.{name}"),
                    vec![ch],
                    v.clone(),
                ));
            }
        }
        tensors.push(NamedTensor::new(
            "head.weight",
            vec![self.head.fan_out, self.head.fan_in],
            self.head.weight.clone(),
        ));
        tensors.push(NamedTensor::new(
            "head.bias",
            vec![self.head.fan_out],
            self.head.bias.clone(),
        ));
        Checkpoint {
            arch: ARCH_TAG.into(),
            step,
            meta: serde_json::json!({ "num_classes": self.num_classes() }),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.arch != ARCH_TAG {
            return Err(Error::Format(format!(
                "architecture `{}` is not a classifier ({ARCH_TAG})",
                ck.arch
            )));
        }
        let k = ck
            .meta
            .get("num_classes")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("classifier checkpoint lacks num_classes".into()))?
            as usize;
        let mut net = Self::new(k, &mut ChaCha8Rng::seed_from_u64(0));
        for (i, s) in net.stages.iter_mut().enumerate() {
            let p = format!("stage{}", i + 1);
            ck.load_into(&format!("{p}.conv.weight"), &mut s.conv.weight)?;
            ck.load_into(&format!("{p}.bn.gamma"), &mut s.bn.gamma)?;
            ck.load_into(&format!("{p}.bn.beta"), &mut s.bn.beta)?;
            ck.load_into(&format!("{p}.bn.running_mean"), &mut s.bn.running_mean)?;
            ck.load_into(&format!("{p}.bn.running_var"), &mut s.bn.running_var)?;
        }
        ck.load_into("head.weight", &mut net.head.weight)?;
        ck.load_into("head.bias", &mut net.head.bias)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path, step: u64) -> Result<()> {
        self.to_checkpoint(step).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Hash of every weight and running statistic.
    pub fn weights_hash(&self) -> String {
        self.to_checkpoint(0).weights_hash()
    }
}

/// Mean cross-entropy of logits against labels and its gradient w.r.t. the
/// logits (already divided by the batch size).
pub fn softmax_cross_entropy(logits: &[f32], labels: &[usize], k: usize) -> (f64, Vec<f32>) {
    let n = labels.len();
    let probs = softmax_rows(logits, k);
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= (probs[i * k + y] as f64).max(1e-12).ln();
        grad[i * k + y] -= 1.0;
    }
    let inv = 1.0 / n as f32;
    grad.iter_mut().for_each(|g| *g *= inv);
    (loss / n as f64, grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of the step budget after which the rate is divided by
    /// `lr_decay_factor`.
    pub lr_decay_at: f64,
    pub lr_decay_factor: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            lr_decay_at: 0.8,
            lr_decay_factor: 5.0,
            seed: 0,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be finite and > 0"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) {
            return Err(Error::config("lr_decay_at", "must lie in [0, 1]"));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor >= 1.0) {
            return Err(Error::config("lr_decay_factor", "must be >= 1"));
        }
        Ok(())
    }
}

/// Optimiser state bound to one classifier.
pub struct ClassifierTrainer {
    pub net: Classifier,
    pub opt: Adam,
    grad: ClassifierGrad<f32>,
}

impl ClassifierTrainer {
    pub fn new(net: Classifier, lr: f64, weight_decay: f64) -> Self {
        let grad = ClassifierGrad::zeros_like(&net);
        Self {
            net,
            opt: Adam::new(lr, weight_decay),
            grad,
        }
    }

    /// One cross-entropy step on a batch; returns the mean loss before the
    /// update.
    pub fn step(&mut self, x: &Tensor<f32>, labels: &[usize]) -> f64 {
        let k = self.net.num_classes();
        let pass = self.net.forward_train(x);
        let (loss, dlogits) = softmax_cross_entropy(&pass.logits, labels, k);
        self.grad = ClassifierGrad::zeros_like(&self.net);
        self.net
            .backward(&pass, &dlogits, Some(&mut self.grad), false);
        let g = &self.grad;
        let mut grads: Vec<&[f32]> = Vec::new();
        for (cg, bg) in &g.stages {
            grads.push(&cg.weight);
            grads.push(&bg.gamma);
            grads.push(&bg.beta);
        }
        grads.push(&g.head.weight);
        grads.push(&g.head.bias);
        self.opt.step(self.net.params_mut(), grads);
        loss
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainLog {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Trains a fresh classifier with mini-batch cross-entropy. `labels[i]` is
/// the training target of `samples[i]`, which lets callers train on
/// permuted labels.
pub fn train_classifier(
    samples: &[&ImageSample],
    labels: &[usize],
    num_classes: usize,
    cfg: &ClassifierTrainConfig,
) -> Result<(Classifier, ClassifierTrainLog)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset("classifier training set is empty"));
    }
    if labels.len() != samples.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} samples",
            labels.len(),
            samples.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::config(
            "labels",
            format!("label {bad} outside 0..{num_classes}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = Classifier::new(num_classes, &mut rng);
    let mut trainer = ClassifierTrainer::new(net, cfg.lr, cfg.weight_decay);
    let batches_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches_per_epoch;
    let decay_step = (cfg.lr_decay_at * total as f64).floor() as usize;
    let mut log = ClassifierTrainLog::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            if step == decay_step && total > 0 {
                trainer.opt.lr = cfg.lr / cfg.lr_decay_factor;
            }
            let batch: Vec<&ImageSample> = chunk.iter().map(|&i| samples[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let x = to_batch::<f32>(&batch);
            let loss = trainer.step(&x, &ys);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: step as u64,
                    detail: format!("classifier cross-entropy is {loss}"),
                });
            }
            log.step_losses.push(loss);
            epoch_loss += loss * chunk.len() as f64;
            step += 1;
        }
        log.epoch_losses.push(epoch_loss / samples.len() as f64);
    }
    Ok((trainer.net, log))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
struct PoolIndex {
    capacity: usize,
    next_seq: u64,
    entries: Vec<u64>,
}

/// Bounded FIFO of classifier checkpoints kept on disk as
/// `<dir>/ckpt_<seq>.bin`, indexed by `<dir>/index.json`.
#[derive(Debug)]
pub struct ClassifierPool {
    dir: PathBuf,
    capacity: usize,
    next_seq: u64,
    entries: VecDeque<u64>,
}

pub const POOL_CAPACITY: usize = 30;

impl ClassifierPool {
    /// Creates an empty pool, discarding any previous pool at `dir`.
    pub fn create(dir: &Path, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("pool_capacity", "must be >= 1"));
        }
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let pool = Self {
            dir: dir.to_path_buf(),
            capacity,
            next_seq: 0,
            entries: VecDeque::new(),
        };
        pool.write_index()?;
        Ok(pool)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let p = dir.join("index.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let idx: PoolIndex = serde_json::from_str(&text)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            capacity: idx.capacity,
            next_seq: idx.next_seq,
            entries: idx.entries.into(),
        })
    }

    fn write_index(&self) -> Result<()> {
        let idx = PoolIndex {
            capacity: self.capacity,
            next_seq: self.next_seq,
            entries: self.entries.iter().copied().collect(),
        };
        let p = self.dir.join("index.json");
        fs::write(&p, serde_json::to_string_pretty(&idx)?).map_err(|e| Error::io(&p, e))
    }

    pub fn path_of(&self, seq: u64) -> PathBuf {
        self.dir.join(format!("ckpt_{seq}.bin"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Sequence numbers currently held, oldest first.
    pub fn sequence_numbers(&self) -> Vec<u64> {
        self.entries.iter().copied().collect()
    }

    /// Appends a checkpoint, evicting the oldest entry when full. Returns the
    /// new entry's sequence number.
    pub fn push(&mut self, net: &Classifier) -> Result<u64> {
        let seq = self.next_seq;
        net.save(&self.path_of(seq), seq)?;
        self.next_seq += 1;
        self.entries.push_back(seq);
        while self.entries.len() > self.capacity {
            let old = self.entries.pop_front().expect("non-empty");
            let p = self.path_of(old);
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
        self.write_index()?;
        Ok(seq)
    }

    /// Uniformly chosen sequence number.
    pub fn sample_seq<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<u64> {
        if self.entries.is_empty() {
            return Err(Error::EmptyPool);
        }
        Ok(self.entries[rng.random_range(0..self.entries.len())])
    }

    /// Loads a uniformly chosen checkpoint. The pool itself is not modified.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(u64, Classifier)> {
        let seq = self.sample_seq(rng)?;
        Ok((seq, Classifier::load(&self.path_of(seq))?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, DatasetSpec};

    fn probe_net(seed: u64) -> Classifier {
        Classifier::new(10, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn batch(n: usize) -> Tensor<f32> {
        let spec = DatasetSpec::new(10, 4, 3);
        let samples: Vec<ImageSample> = (0..n).map(|i| generate_scene(&spec, i % 10, i)).collect();
        let refs: Vec<&ImageSample> = samples.iter().collect();
        to_batch(&refs)
    }

    #[test]
    fn activation_sides_and_channels() {
        let net = probe_net(1);
        let out = net.forward_with_activations(&batch(2)).unwrap();
        let sides: Vec<usize> = out.activations.iter().map(|a| a.h).collect();
        assert_eq!(sides, vec![32, 16, 8, 4, 2]);
        for (i, a) in out.activations.iter().enumerate() {
            assert_eq!(a.c, layer_channels(i + 1));
            assert_eq!(a.h, layer_side(i + 1));
        }
        for row in out.probs.chunks(10) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn identical_images_give_identical_logits() {
        let net = probe_net(2);
        let one = batch(1);
        let mut two = Tensor::zeros(3, 2, 64, 64);
        for c in 0..3 {
            two.slice_mut(c, 0).copy_from_slice(one.slice(c, 0));
            two.slice_mut(c, 1).copy_from_slice(one.slice(c, 0));
        }
        let out = net.forward_with_activations(&two).unwrap();
        assert_eq!(out.logits[..10], out.logits[10..]);
    }

    #[test]
    fn wrong_shape_is_reported() {
        let net = probe_net(3);
        let err = net
            .forward_with_activations(&Tensor::zeros(3, 1, 32, 32))
            .err()
            .unwrap();
        assert!(err.to_string().contains("64x64x3"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = probe_net(4);
        let back = Classifier::from_checkpoint(&net.to_checkpoint(7)).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net64: ClassifierNet<f64> = probe_net(5).cast();
        let x: Tensor<f64> = batch(2).cast();
        let w: Vec<f64> = (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let objective = |x: &Tensor<f64>| -> f64 {
            let p = net64.forward_eval(x);
            p.logits.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let pass = net64.forward_eval(&x);
        let dx = net64.backward(&pass, &w, None, true).unwrap();
        for &i in &[5usize, 777, 4096 + 100, 2 * 8192 + 4000] {
            let eps = 1e-5;
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * eps);
            let denom = fd.abs().max(dx.data[i].abs()).max(1e-8);
            assert!(
                (fd - dx.data[i]).abs() / denom < 1e-4,
                "pixel {i}: fd {fd} vs {}",
                dx.data[i]
            );
        }
    }

    #[test]
    fn pool_is_fifo_with_capacity() {
        let dir = tempfile::tempdir().unwrap();
        let mut pool = ClassifierPool::create(&dir.path().join("pool"), 3).unwrap();
        assert!(matches!(
            pool.sample_seq(&mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::EmptyPool)
        ));
        let net = probe_net(6);
        for _ in 0..5 {
            pool.push(&net).unwrap();
        }
        assert_eq!(pool.sequence_numbers(), vec![2, 3, 4]);
        assert!(!pool.path_of(0).exists());
        let reopened = ClassifierPool::open(&dir.path().join("pool")).unwrap();
        assert_eq!(reopened.sequence_numbers(), vec![2, 3, 4]);
        let (_, sampled) = pool.sample(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(sampled, net);
    }
}
