//! The masking model: one small convolution with batch norm per observed
//! classifier layer, nearest-neighbour upsampling to the finest observed
//! resolution, channel concatenation, a fusing convolution to one logit channel, upsampling to
//! image resolution, then sigmoid.
//!
//! The forward pass sees only classifier activations, never a label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::classifier::{layer_channels, layer_side, Classifier, NUM_STAGES};
use crate::data::{to_batch, ImageSample, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::nn::{
    relu_backward_inplace, relu_inplace, BatchNorm, BnCache, BnGrad, Conv2d, ConvGrad,
};
use crate::tensor::{Real, Tensor};

pub const ARCH_TAG: &str = "masker-v2";
/// Initial fusion bias: sigmoid(1) ≈ 0.73, so training starts mostly masked in.
pub const FUSE_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GumbelEstimator {
    Soft,
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GumbelConfig {
    pub temperature: f64,
    pub estimator: GumbelEstimator,
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config(
                "gumbel.temperature",
                "must be finite and > 0",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputMode {
    #[default]
    Sigmoid,
    Gumbel(GumbelConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskerConfig {
    pub observed_layers: Vec<usize>,
    pub fuse_channels: usize,
    pub output_mode: OutputMode,
}

impl Default for MaskerConfig {
    fn default() -> Self {
        Self {
            observed_layers: vec![1, 2, 3, 4, 5],
            fuse_channels: 32,
            output_mode: OutputMode::Sigmoid,
        }
    }
}

impl MaskerConfig {
    pub fn with_layers(layers: &[usize]) -> Self {
        Self {
            observed_layers: layers.to_vec(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.observed_layers;
        if l.is_empty() {
            return Err(Error::config("masker.observed_layers", "must be non-empty"));
        }
        if l.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "masker.observed_layers",
                "must be sorted and unique",
            ));
        }
        if l.iter().any(|&x| x == 0 || x > NUM_STAGES) {
            return Err(Error::config(
                "masker.observed_layers",
                format!("entries must lie in 1..={NUM_STAGES}"),
            ));
        }
        if self.fuse_channels == 0 {
            return Err(Error::config("masker.fuse_channels", "must be >= 1"));
        }
        if let OutputMode::Gumbel(g) = &self.output_mode {
            g.validate()?;
        }
        Ok(())
    }

    /// Side of the grid the fusion convolution runs on.
    pub fn working_side(&self) -> usize {
        layer_side(self.observed_layers[0])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskerNet<T> {
    pub config: MaskerConfig,
    /// 1×1 convolution (no bias) per observed layer, followed by `norms` and ReLU.
    pub branches: Vec<Conv2d<T>>,
    pub norms: Vec<BatchNorm<T>>,
    /// 3×3 convolution from the concatenated branches to one logit channel.
    pub fuse: Conv2d<T>,
}

pub type Masker = MaskerNet<f32>;

pub struct MaskerPass<T> {
    /// Per-branch inputs (the observed activations).
    inputs: Vec<Tensor<T>>,
    norm_cache: Vec<BnCache<T>>,
    /// Per-branch ReLU outputs at native resolution.
    branch_out: Vec<Tensor<T>>,
    concat: Tensor<T>,
    /// Logits at image resolution, shape (1, N, 64, 64).
    pub logits: Tensor<T>,
    /// Sigmoid of the logits.
    pub mask: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct MaskerGrad<T> {
    pub branches: Vec<ConvGrad<T>>,
    pub norms: Vec<BnGrad<T>>,
    pub fuse: ConvGrad<T>,
}

impl<T: Real> MaskerGrad<T> {
    pub fn zeros_like(m: &MaskerNet<T>) -> Self {
        Self {
            branches: m.branches.iter().map(ConvGrad::zeros_like).collect(),
            norms: m
                .norms
                .iter()
                .map(|n| BnGrad::zeros(n.channels()))
                .collect(),
            fuse: ConvGrad::zeros_like(&m.fuse),
        }
    }

    /// Flat views in the same order as [`MaskerNet::params_mut`].
    pub fn flat(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = Vec::new();
        for (b, n) in self.branches.iter().zip(&self.norms) {
            v.push(&b.weight);
            v.push(&n.gamma);
            v.push(&n.beta);
        }
        v.push(&self.fuse.weight);
        v.push(self.fuse.bias.as_deref().expect("fuse bias"));
        v
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Real> MaskerNet<T> {
    pub fn new<R: Rng + ?Sized>(config: MaskerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let f = config.fuse_channels;
        let branches = config
            .observed_layers
            .iter()
            .map(|&l| Conv2d::new(layer_channels(l), f, 1, false, rng))
            .collect();
        let norms = config
            .observed_layers
            .iter()
            .map(|_| BatchNorm::new(f))
            .collect();
        let mut fuse = Conv2d::new(f * config.observed_layers.len(), 1, 3, true, rng);
        fuse.bias = Some(vec![T::from_f64c(FUSE_BIAS_INIT)]);
        Ok(Self {
            config,
            branches,
            norms,
            fuse,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.branches.iter().map(Conv2d::num_params).sum::<usize>()
            + self.norms.iter().map(|n| 2 * n.channels()).sum::<usize>()
            + self.fuse.num_params()
    }

    /// Computes logits and the sigmoid mask from a classifier activation set
    /// (layers 1..=5 in order), with batch norm in inference mode.
    pub fn forward(&self, activations: &[Tensor<T>]) -> Result<MaskerPass<T>> {
        let mut norms = self.norms.clone();
        self.run(activations, &mut norms, false)
    }

    /// Training-mode pass: batch statistics, running estimates updated.
    pub fn forward_train(&mut self, activations: &[Tensor<T>]) -> Result<MaskerPass<T>> {
        let mut norms = std::mem::take(&mut self.norms);
        let out = self.run(activations, &mut norms, true);
        self.norms = norms;
        out
    }

    fn run(
        &self,
        activations: &[Tensor<T>],
        norms: &mut [BatchNorm<T>],
        train: bool,
    ) -> Result<MaskerPass<T>> {
        let work = self.config.working_side();
        let f = self.config.fuse_channels;
        let n = activations.first().map_or(0, |a| a.n);
        let mut inputs = Vec::with_capacity(self.branches.len());
        let mut norm_cache = Vec::with_capacity(self.branches.len());
        let mut branch_out = Vec::with_capacity(self.branches.len());
        let mut concat = Tensor::zeros(f * self.branches.len(), n, work, work);
        for (b, (&layer, conv)) in self
            .config
            .observed_layers
            .iter()
            .zip(&self.branches)
            .enumerate()
        {
            let a = activations
                .get(layer - 1)
                .ok_or(Error::MissingLayer(layer))?;
            if a.c != conv.cin || a.h != layer_side(layer) || a.n != n {
                return Err(Error::Shape(format!(
                    "layer {layer} activation is {}x{}x{} (batch {}), masker expects {}x{}x{}",
                    a.h,
                    a.w,
                    a.c,
                    a.n,
                    layer_side(layer),
                    layer_side(layer),
                    conv.cin
                )));
            }
            let (mut y, cache) = norms[b].forward(&conv.forward(a), train);
            relu_inplace(&mut y);
            norm_cache.push(cache);
            let up = y.upsample_nearest(work / a.h);
            let chunk = f * n * work * work;
            concat.data[b * chunk..(b + 1) * chunk].copy_from_slice(&up.data);
            inputs.push(a.clone());
            branch_out.push(y);
        }
        let low = self.fuse.forward(&concat);
        let logits = low.upsample_nearest(IMAGE_SIDE / work);
        let mut mask = logits.clone();
        mask.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok(MaskerPass {
            inputs,
            norm_cache,
            branch_out,
            concat,
            logits,
            mask,
        })
    }

    /// Accumulates parameter gradients given dLoss/dlogits at image resolution.
    pub fn backward(&self, pass: &MaskerPass<T>, dlogits: &Tensor<T>, grad: &mut MaskerGrad<T>) {
        let work = self.config.working_side();
        let f = self.config.fuse_channels;
        let dlow = dlogits.block_sum(IMAGE_SIDE / work);
        let dconcat = self
            .fuse
            .backward(&pass.concat, &dlow, Some(&mut grad.fuse), true)
            .expect("input gradient requested");
        let n = dconcat.n;
        let chunk = f * n * work * work;
        for (b, conv) in self.branches.iter().enumerate() {
            let side = pass.branch_out[b].h;
            let dup = Tensor::from_vec(
                f,
                n,
                work,
                work,
                dconcat.data[b * chunk..(b + 1) * chunk].to_vec(),
            );
            let mut dy = dup.block_sum(work / side);
            relu_backward_inplace(&pass.branch_out[b], &mut dy);
            let dz = self.norms[b].backward(&pass.norm_cache[b], &dy, Some(&mut grad.norms[b]));
            conv.backward(&pass.inputs[b], &dz, Some(&mut grad.branches[b]), false);
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = Vec::new();
        for (b, n) in self.branches.iter_mut().zip(&mut self.norms) {
            v.push(&mut b.weight);
            v.push(&mut n.gamma);
            v.push(&mut n.beta);
        }
        v.push(&mut self.fuse.weight);
        v.push(self.fuse.bias.as_deref_mut().expect("fuse bias"));
        v
    }

    pub fn cast<U: Real>(&self) -> MaskerNet<U> {
        let cv = |c: &Conv2d<T>| Conv2d {
            cin: c.cin,
            cout: c.cout,
            k: c.k,
            weight: c
                .weight
                .iter()
                .map(|&x| U::from_f64c(x.to_f64c()))
                .collect(),
            bias: c
                .bias
                .as_ref()
                .map(|b| b.iter().map(|&x| U::from_f64c(x.to_f64c())).collect()),
        };
        let cvec = |v: &[T]| {
            v.iter()
                .map(|&x| U::from_f64c(x.to_f64c()))
                .collect::<Vec<U>>()
        };
        MaskerNet {
            config: self.config.clone(),
            branches: self.branches.iter().map(cv).collect(),
            norms: self
                .norms
                .iter()
                .map(|n| BatchNorm {
                    gamma: cvec(&n.gamma),
                    beta: cvec(&n.beta),
                    running_mean: cvec(&n.running_mean),
                    running_var: cvec(&n.running_var),
                    eps: n.eps,
                    momentum: n.momentum,
                })
                .collect(),
            fuse: cv(&self.fuse),
        }
    }
}

impl Masker {
    /// Deterministic masks (sigmoid of logits) for samples, one H×W map each.
    /// Activations come from `feature_classifier` in inference mode.
    pub fn predict(
        &self,
        feature_classifier: &Classifier,
        samples: &[&ImageSample],
    ) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let x = to_batch::<f32>(chunk);
            let acts = feature_classifier.forward_with_activations(&x)?.activations;
            let pass = self.forward(&acts)?;
            for n in 0..chunk.len() {
                out.push(pass.mask.slice(0, n).to_vec());
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let mut tensors = Vec::new();
        for (b, (conv, bn)) in self.branches.iter().zip(&self.norms).enumerate() {
            let layer = self.config.observed_layers[b];
            tensors.push(NamedTensor::new(
                format!("branch{layer}.weight"),
                vec![conv.cout, conv.cin, 1, 1],
                conv.weight.clone(),
            ));
            for (name, v) in [
                ("gamma", &bn.gamma),
                ("beta", &bn.beta),
                ("running_mean", &bn.running_mean),
                ("running_var", &bn.running_var),
            ] {
                tensors.push(NamedTensor::new(
                    format!("branch{layer}.bn.{name}"),
                    vec![conv.cout],
                    v.clone(),
                ));
            }
        }
        tensors.push(NamedTensor::new(
            "fuse.weight",
            vec![1, self.fuse.cin, 3, 3],
            self.fuse.weight.clone(),
        ));
        tensors.push(NamedTensor::new(
            "fuse.bias",
            vec![1],
            self.fuse.bias.clone().expect("fuse bias"),
        ));
        Checkpoint {
            arch: ARCH_TAG.into(),
            step,
            meta: serde_json::json!({ "config": self.config }),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.arch != ARCH_TAG {
            return Err(Error::Format(format!(
                "architecture `{}` is not a masker ({ARCH_TAG})",
                ck.arch
            )));
        }
        let cfg_value = ck
            .meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Format("masker checkpoint lacks its config".into()))?;
        let config: MaskerConfig = serde_json::from_value(cfg_value)?;
        let mut m = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let layers = m.config.observed_layers.clone();
        for ((conv, bn), layer) in m.branches.iter_mut().zip(&mut m.norms).zip(layers) {
            ck.load_into(&format!("branch{layer}.weight"), &mut conv.weight)?;
            ck.load_into(&format!("branch{layer}.bn.gamma"), &mut bn.gamma)?;
            ck.load_into(&format!("branch{layer}.bn.beta"), &mut bn.beta)?;
            ck.load_into(
                &format!("branch{layer}.bn.running_mean"),
                &mut bn.running_mean,
            )?;
            ck.load_into(
                &format!("branch{layer}.bn.running_var"),
                &mut bn.running_var,
            )?;
        }
        ck.load_into("fuse.weight", &mut m.fuse.weight)?;
        ck.load_into("fuse.bias", m.fuse.bias.as_deref_mut().unwrap())?;
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path, step: u64) -> Result<()> {
        self.to_checkpoint(step).save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, DatasetSpec};

    fn acts<T: Real>(n: usize, seed: u64) -> Vec<Tensor<T>> {
        let net: crate::classifier::ClassifierNet<T> =
            Classifier::new(10, &mut ChaCha8Rng::seed_from_u64(seed)).cast();
        let spec = DatasetSpec::new(10, 2, 9);
        let s: Vec<ImageSample> = (0..n).map(|i| generate_scene(&spec, i % 10, i)).collect();
        let refs: Vec<&ImageSample> = s.iter().collect();
        net.forward_eval(&to_batch(&refs)).activations
    }

    #[test]
    fn zeroed_fusion_gives_half_everywhere() {
        let mut m =
            Masker::new(MaskerConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        m.fuse.weight.iter_mut().for_each(|w| *w = 0.0);
        m.fuse.bias = Some(vec![0.0]);
        let p = m.forward(&acts(2, 1)).unwrap();
        assert!(p.mask.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn shapes_for_every_single_layer() {
        let a = acts::<f32>(2, 2);
        for layer in 1..=5 {
            let m = Masker::new(
                MaskerConfig::with_layers(&[layer]),
                &mut ChaCha8Rng::seed_from_u64(3),
            )
            .unwrap();
            assert_eq!(m.config.working_side(), 64 >> layer);
            let p = m.forward(&a).unwrap();
            assert_eq!((p.mask.c, p.mask.n, p.mask.h, p.mask.w), (1, 2, 64, 64));
            assert!(p.mask.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn parameter_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let count = |cfg: MaskerConfig, rng: &mut ChaCha8Rng| {
            Masker::new(cfg, rng).unwrap().count_parameters()
        };
        let base = count(MaskerConfig::default(), &mut rng);
        let wide = count(
            MaskerConfig {
                fuse_channels: 64,
                ..MaskerConfig::default()
            },
            &mut rng,
        );
        assert!(wide > base);
        let top = count(MaskerConfig::with_layers(&[5]), &mut rng);
        let all = count(MaskerConfig::with_layers(&[1, 2, 3, 4, 5]), &mut rng);
        assert!(top < all);
        // branch: c·32 weights + 2·32 norm parameters per layer; fusion: 9·32·L + 1
        let expect = (16 + 32 + 64 + 128 + 256) * 32 + 5 * 64 + 9 * 160 + 1;
        assert_eq!(base, expect);
        let classifier = Classifier::new(10, &mut rng).num_params();
        assert!(
            (base as f64) < 0.05 * classifier as f64,
            "{base} vs {classifier}"
        );
    }

    #[test]
    fn training_pass_updates_running_statistics_only() {
        let a = acts::<f32>(2, 9);
        let mut m = Masker::new(
            MaskerConfig::with_layers(&[3, 5]),
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let before = m.forward(&a).unwrap().mask;
        let trained = m.forward_train(&a).unwrap().mask;
        assert_ne!(before.data, trained.data);
        assert!(m
            .norms
            .iter()
            .all(|n| n.running_mean.iter().any(|&v| v != 0.0)));
        let mut fresh = Masker::new(
            MaskerConfig::with_layers(&[3, 5]),
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(m.params_mut().len(), fresh.params_mut().len());
        let same = m
            .params_mut()
            .iter()
            .zip(fresh.params_mut())
            .all(|(x, y)| **x == *y);
        assert!(same);
    }

    #[test]
    fn missing_layer_is_named() {
        let m = Masker::new(
            MaskerConfig::with_layers(&[4, 5]),
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let a = acts::<f32>(1, 5);
        match m.forward(&a[..3]) {
            Err(Error::MissingLayer(4)) => {}
            other => panic!("expected missing layer 4, got {:?}", other.err()),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for layers in [vec![], vec![5, 4], vec![0], vec![6], vec![3, 3]] {
            assert!(
                Masker::new(MaskerConfig::with_layers(&layers), &mut rng).is_err(),
                "{layers:?}"
            );
        }
        let cfg = MaskerConfig {
            output_mode: OutputMode::Gumbel(GumbelConfig {
                temperature: 0.0,
                estimator: GumbelEstimator::Hard,
            }),
            ..MaskerConfig::default()
        };
        assert!(Masker::new(cfg, &mut rng).is_err());
    }

    #[test]
    fn checkpoint_round_trip_keeps_config() {
        let cfg = MaskerConfig {
            observed_layers: vec![2, 5],
            fuse_channels: 8,
            output_mode: OutputMode::Gumbel(GumbelConfig {
                temperature: 0.1,
                estimator: GumbelEstimator::Soft,
            }),
        };
        let m = Masker::new(cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(Masker::from_checkpoint(&m.to_checkpoint(3)).unwrap(), m);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let a = acts::<f64>(2, 8);
        let m: MaskerNet<f64> = Masker::new(
            MaskerConfig::with_layers(&[2, 4, 5]),
            &mut ChaCha8Rng::seed_from_u64(8),
        )
        .unwrap()
        .cast();
        let w: Vec<f64> = (0..2 * 64 * 64)
            .map(|i| ((i * 31 % 17) as f64 - 8.0) / 8.0)
            .collect();
        let loss = |m: &MaskerNet<f64>| -> f64 {
            let p = m.clone().forward_train(&a).unwrap();
            p.mask.data.iter().zip(&w).map(|(v, w)| v * w).sum()
        };
        let p = m.clone().forward_train(&a).unwrap();
        let mut dl = p.logits.clone();
        for ((d, &mk), &wi) in dl.data.iter_mut().zip(&p.mask.data).zip(&w) {
            *d = wi * mk * (1.0 - mk);
        }
        let mut g = MaskerGrad::zeros_like(&m);
        m.backward(&p, &dl, &mut g);
        // (group, index) probes: branch weight, norm gamma, norm beta, fuse weight, fuse bias
        let probes = [(0usize, 5usize), (4, 2), (5, 3), (9, 40), (10, 0)];
        let analytic: Vec<f64> = probes.iter().map(|&(gi, i)| g.flat()[gi][i]).collect();
        for (&(gi, i), an) in probes.iter().zip(analytic) {
            let eps = 1e-6;
            let mut mp = m.clone();
            mp.params_mut()[gi][i] += eps;
            let mut mm = m.clone();
            mm.params_mut()[gi][i] -= eps;
            let fd = (loss(&mp) - loss(&mm)) / (2.0 * eps);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-10);
            assert!(rel < 1e-3, "group {gi} index {i}: fd {fd} analytic {an}");
        }
    }
}
