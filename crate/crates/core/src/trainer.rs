//! Masker training against a fixed classifier (FIX) or against a pool of
//! continually trained classifiers (CA), run-directory bookkeeping, and
//! checkpoint evaluation.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, ClassifierPool, ClassifierTrainer, POOL_CAPACITY};
use crate::data::{to_batch, ImageSample};
use crate::error::{Error, Result};
use crate::masker::{Masker, MaskerConfig, MaskerGrad, OutputMode};
use crate::metrics::{evaluate_masks, EvalReport};
use crate::nn::Adam;
use crate::objectives::{combined_objective, Breakdown, ObjectiveConfig, RegularizerConfig};
use crate::perturb::{gumbel_sample, Infiller};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Fix,
    Ca,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fix" => Ok(Self::Fix),
            "ca" => Ok(Self::Ca),
            other => Err(Error::config(
                "mode",
                format!("unknown mode `{other}` (fix, ca)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub objective: ObjectiveConfig,
    pub masker: MaskerConfig,
    pub infiller: Infiller,
    /// Masker optimisation steps.
    pub steps: usize,
    pub batch_size: usize,
    pub masker_lr: f64,
    /// CA only.
    pub classifier_lr: f64,
    pub weight_decay: f64,
    /// Fraction of the budget after which both learning rates are divided
    /// by `lr_decay_factor`.
    pub lr_decay_at: f64,
    pub lr_decay_factor: f64,
    /// CA only: masker steps between pool pushes.
    pub pool_push_every: usize,
    pub pool_capacity: usize,
    /// CA only: the classifier step also sees the clean batch.
    pub ca_classifier_sees_clean: bool,
    /// Steps per log interval.
    pub log_every: usize,
    /// Steps between validation evaluations; 0 evaluates only at the end.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::ca()
    }
}

impl TrainConfig {
    pub fn ca() -> Self {
        Self {
            mode: TrainMode::Ca,
            objective: ObjectiveConfig::dual(RegularizerConfig::ca_default()),
            masker: MaskerConfig::default(),
            infiller: Infiller::None,
            steps: 400,
            batch_size: 8,
            masker_lr: 1e-3,
            classifier_lr: 3e-6,
            weight_decay: 1e-4,
            lr_decay_at: 0.8,
            lr_decay_factor: 5.0,
            pool_push_every: 100,
            pool_capacity: POOL_CAPACITY,
            ca_classifier_sees_clean: false,
            log_every: 10,
            eval_every: 0,
            seed: 0,
        }
    }

    pub fn fix() -> Self {
        Self {
            mode: TrainMode::Fix,
            objective: ObjectiveConfig::dual(RegularizerConfig::fix_default()),
            ..Self::ca()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.masker.validate()?;
        self.infiller.validate()?;
        if self.steps == 0 {
            return Err(Error::config("steps", "step budget must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        for (name, v) in [
            ("masker_lr", self.masker_lr),
            ("classifier_lr", self.classifier_lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(name, "must be finite and > 0"));
            }
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
        if self.pool_push_every == 0 {
            return Err(Error::config("pool_push_every", "must be >= 1"));
        }
        if self.pool_capacity == 0 {
            return Err(Error::config("pool_capacity", "must be >= 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be >= 1"));
        }
        Ok(())
    }

    fn decay_step(&self) -> usize {
        (self.lr_decay_at * self.steps as f64).floor() as usize
    }
}

/// Mean loss breakdown over one logging interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalLog {
    /// Global step after the interval's last update.
    pub step: u64,
    #[serde(flatten)]
    pub loss: Breakdown,
    /// Mean mask value in [0, 1].
    pub mean_mask: f64,
    /// CA only: mean classifier cross-entropy on masked images.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub classifier_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    /// Combined objective at every step, in order.
    pub step_losses: Vec<f64>,
    pub intervals: Vec<IntervalLog>,
    pub evals: Vec<EvalPoint>,
    pub checkpoints: Vec<PathBuf>,
    pub best_step: Option<u64>,
    pub pool_pushes: usize,
}

/// Output of a masker training run. In FIX mode `feature_classifier` is the
/// classifier that was passed in; in CA mode it is the continually trained
/// copy whose activations the masker reads.
pub struct MaskerRun {
    pub masker: Masker,
    pub feature_classifier: Classifier,
    /// Lowest validation LE seen (ties broken by higher PxAP), when
    /// validation was requested.
    pub best: Option<(Masker, Classifier)>,
    pub record: RunRecord,
}

impl MaskerRun {
    /// Best-on-validation masker if one was tracked, otherwise the last.
    pub fn selected(&self) -> (&Masker, &Classifier) {
        match &self.best {
            Some((m, c)) => (m, c),
            None => (&self.masker, &self.feature_classifier),
        }
    }
}

/// Append-only run directory: `config.json`, `log.jsonl`, checkpoints and
/// evaluation reports.
pub struct RunDir {
    root: PathBuf,
    log: File,
}

impl RunDir {
    /// Creates (or reuses) `root`, writes the config snapshot and truncates
    /// the log.
    pub fn create<C: Serialize>(root: &Path, config: &C) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let cfg_path = root.join("config.json");
        fs::write(&cfg_path, serde_json::to_string_pretty(config)? + "\n")
            .map_err(|e| Error::io(&cfg_path, e))?;
        let log_path = root.join("log.jsonl");
        let log = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            log,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn log<S: Serialize>(&mut self, entry: &S) -> Result<()> {
        let line = serde_json::to_string(entry)? + "\n";
        let p = self.root.join("log.jsonl");
        self.log
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&p, e))
    }

    pub fn write_json<S: Serialize>(&self, name: &str, value: &S) -> Result<PathBuf> {
        let p = self.root.join(name);
        fs::write(&p, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

/// Path of the feature classifier stored next to a masker checkpoint
/// (`ckpt_last.bin` → `ckpt_last_features.bin`).
pub fn feature_classifier_path(masker_ckpt: &Path) -> PathBuf {
    let stem = masker_ckpt
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("ckpt");
    masker_ckpt.with_file_name(format!("{stem}_features.bin"))
}

/// Saves a masker, plus its feature classifier when it differs from the
/// explained one (CA).
fn save_pair(path: &Path, masker: &Masker, features: Option<&Classifier>, step: u64) -> Result<()> {
    masker.save(path, step)?;
    if let Some(f) = features {
        f.save(&feature_classifier_path(path), step)?;
    }
    Ok(())
}

/// Loads a masker checkpoint and the classifier its activations come from:
/// the sibling `_features.bin` if present, else `base`.
pub fn load_masker_pair(masker_ckpt: &Path, base: &Classifier) -> Result<(Masker, Classifier)> {
    let masker = Masker::load(masker_ckpt)?;
    let fp = feature_classifier_path(masker_ckpt);
    let features = if fp.exists() {
        Classifier::load(&fp)?
    } else {
        base.clone()
    };
    Ok((masker, features))
}

/// Scores a masker on a labelled split. Activations come from
/// `feature_classifier`; OM and SM use `classifier`, the model being
/// explained.
pub fn evaluate_checkpoint(
    masker: &Masker,
    feature_classifier: &Classifier,
    classifier: &Classifier,
    samples: &[&ImageSample],
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("evaluation split is empty"));
    }
    let masks = masker.predict(feature_classifier, samples)?;
    let pred = classifier.predict_labels(samples)?;
    evaluate_masks(classifier, samples, &masks, &pred)
}

/// Draws epoch-shuffled batches, recycling the data as often as needed.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Masker steps in a few-shot run: one epoch over the full training set.
pub fn fewshot_budget(full_train_size: usize, batch_size: usize) -> usize {
    full_train_size.div_ceil(batch_size).max(1)
}

pub fn train_fix(
    classifier: &Classifier,
    train: &[&ImageSample],
    val: Option<&[&ImageSample]>,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<MaskerRun> {
    if cfg.mode != TrainMode::Fix {
        return Err(Error::config("mode", "train_fix needs mode = fix"));
    }
    train_masker(classifier, train, val, cfg, run_dir)
}

pub fn train_ca(
    classifier: &Classifier,
    train: &[&ImageSample],
    val: Option<&[&ImageSample]>,
    cfg: &TrainConfig,
    run_dir: &Path,
) -> Result<MaskerRun> {
    if cfg.mode != TrainMode::Ca {
        return Err(Error::config("mode", "train_ca needs mode = ca"));
    }
    train_masker(classifier, train, val, cfg, Some(run_dir))
}

/// Trains on a few-shot subsample with the budget fixed to one epoch over
/// `full_train_size` examples.
pub fn train_fewshot(
    classifier: &Classifier,
    subsample: &[&ImageSample],
    full_train_size: usize,
    val: Option<&[&ImageSample]>,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<MaskerRun> {
    let cfg = TrainConfig {
        steps: fewshot_budget(full_train_size, cfg.batch_size),
        ..cfg.clone()
    };
    train_masker(classifier, subsample, val, &cfg, run_dir)
}

#[derive(Default)]
struct Accum {
    n: usize,
    loss: Breakdown,
    mean_mask: f64,
    classifier_loss: f64,
}

impl Accum {
    fn add(&mut self, b: &Breakdown, mean_mask: f64, cls: f64) {
        self.n += 1;
        self.loss.total += b.total;
        self.loss.out_term += b.out_term;
        self.loss.in_term += b.in_term;
        self.loss.l1_in += b.l1_in;
        self.loss.l1_out += b.l1_out;
        self.loss.tv += b.tv;
        self.mean_mask += mean_mask;
        self.classifier_loss += cls;
    }

    fn take(&mut self, step: u64, ca: bool) -> IntervalLog {
        let k = 1.0 / self.n.max(1) as f64;
        let l = &self.loss;
        let out = IntervalLog {
            step,
            loss: Breakdown {
                total: l.total * k,
                out_term: l.out_term * k,
                in_term: l.in_term * k,
                l1_in: l.l1_in * k,
                l1_out: l.l1_out * k,
                tv: l.tv * k,
            },
            mean_mask: self.mean_mask * k,
            classifier_loss: ca.then_some(self.classifier_loss * k),
        };
        *self = Self::default();
        out
    }
}

/// Classifier sampled for the masker objective in CA mode; reloaded only
/// when the draw changes.
struct PoolDraw {
    pool: ClassifierPool,
    cached: Option<(u64, Classifier)>,
}

impl PoolDraw {
    fn sample<R: Rng>(&mut self, rng: &mut R) -> Result<&Classifier> {
        let seq = self.pool.sample_seq(rng)?;
        if self.cached.as_ref().map(|(s, _)| *s) != Some(seq) {
            self.cached = Some((seq, Classifier::load(&self.pool.path_of(seq))?));
        }
        Ok(&self.cached.as_ref().expect("cached").1)
    }
}

fn better(a: &EvalReport, b: &EvalReport) -> bool {
    a.le < b.le || (a.le == b.le && a.pxap > b.pxap)
}

/// Shared FIX/CA loop. FIX never touches `classifier`; CA trains a copy of
/// it and keeps a pool of its past weights on disk under `run_dir/pool`.
pub fn train_masker(
    classifier: &Classifier,
    train: &[&ImageSample],
    val: Option<&[&ImageSample]>,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<MaskerRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("masker training set is empty"));
    }
    let k = classifier.num_classes();
    if let Some(bad) = train.iter().find(|s| s.label >= k) {
        return Err(Error::Sample {
            id: bad.id.clone(),
            reason: format!("label {} outside the classifier's {k} classes", bad.label),
        });
    }
    let ca = cfg.mode == TrainMode::Ca;
    if ca && run_dir.is_none() {
        return Err(Error::config(
            "run_dir",
            "CA training keeps its classifier pool in the run directory",
        ));
    }
    let mut dir = run_dir.map(|p| RunDir::create(p, cfg)).transpose()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut masker = Masker::new(cfg.masker.clone(), &mut rng)?;
    let mut opt = Adam::new(cfg.masker_lr, cfg.weight_decay);
    let mut sampler = BatchSampler::new(train.len(), rng.random());

    let mut ca_state = if ca {
        let root = dir.as_ref().expect("checked above").path("pool");
        let mut pool = ClassifierPool::create(&root, cfg.pool_capacity)?;
        pool.push(classifier)?;
        let trainer =
            ClassifierTrainer::new(classifier.clone(), cfg.classifier_lr, cfg.weight_decay);
        Some((PoolDraw { pool, cached: None }, trainer))
    } else {
        None
    };

    let mut record = RunRecord {
        config: cfg.clone(),
        step_losses: Vec::with_capacity(cfg.steps),
        intervals: Vec::new(),
        evals: Vec::new(),
        checkpoints: Vec::new(),
        best_step: None,
        pool_pushes: usize::from(ca),
    };
    let mut best: Option<(EvalReport, Masker, Classifier)> = None;
    let mut acc = Accum::default();
    let decay_step = cfg.decay_step();

    for step in 0..cfg.steps {
        if step == decay_step && step > 0 {
            opt.lr = cfg.masker_lr / cfg.lr_decay_factor;
            if let Some((_, t)) = ca_state.as_mut() {
                t.opt.lr = cfg.classifier_lr / cfg.lr_decay_factor;
            }
        }
        let idx = sampler.next(cfg.batch_size);
        let batch: Vec<&ImageSample> = idx.iter().map(|&i| train[i]).collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let x = to_batch::<f32>(&batch);

        let features = match &ca_state {
            Some((_, t)) => &t.net,
            None => classifier,
        };
        let acts = features.forward_with_activations(&x)?.activations;
        let pass = masker.forward_train(&acts)?;
        let (mask, dmask_dlogit) = match &cfg.masker.output_mode {
            OutputMode::Sigmoid => {
                let mut d = pass.mask.clone();
                d.data.iter_mut().for_each(|m| *m *= 1.0 - *m);
                (pass.mask.clone(), d)
            }
            OutputMode::Gumbel(g) => {
                let s = gumbel_sample(&pass.logits, g, &mut rng)?;
                let d = s.dvalue_dlogit();
                (s.value, d)
            }
        };

        let target: &Classifier = match ca_state.as_mut() {
            Some((draw, _)) => draw.sample(&mut rng)?,
            None => classifier,
        };
        let eval = combined_objective(
            target,
            &mask,
            &x,
            &labels,
            &cfg.objective,
            &cfg.infiller,
            None,
        )?;
        let bd = eval.breakdown;
        if !bd.is_finite() {
            return Err(Error::Diverged {
                step: step as u64,
                detail: format!(
                    "non-finite masker objective: {}",
                    serde_json::to_string(&bd)?
                ),
            });
        }

        let mut dlogits = eval.dmask;
        for (g, d) in dlogits.data.iter_mut().zip(&dmask_dlogit.data) {
            *g *= *d;
        }
        let mut grad = MaskerGrad::zeros_like(&masker);
        masker.backward(&pass, &dlogits, &mut grad);
        opt.step(masker.params_mut(), grad.flat());

        let mut cls_loss = 0.0;
        if let Some((draw, trainer)) = ca_state.as_mut() {
            let (cx, cy) = if cfg.ca_classifier_sees_clean {
                (
                    concat(&eval.masked_out, &x),
                    [labels.clone(), labels.clone()].concat(),
                )
            } else {
                (eval.masked_out, labels.clone())
            };
            cls_loss = trainer.step(&cx, &cy);
            if !cls_loss.is_finite() {
                return Err(Error::Diverged {
                    step: step as u64,
                    detail: format!("CA classifier cross-entropy is {cls_loss}"),
                });
            }
            if (step + 1) % cfg.pool_push_every == 0 {
                draw.pool.push(&trainer.net)?;
                record.pool_pushes += 1;
            }
        }

        let mean_mask = mask.data.iter().map(|&v| v as f64).sum::<f64>() / mask.data.len() as f64;
        record.step_losses.push(bd.total);
        acc.add(&bd, mean_mask, cls_loss);
        let done = step + 1;
        if done % cfg.log_every == 0 || done == cfg.steps {
            let entry = acc.take(done as u64, ca);
            if let Some(d) = dir.as_mut() {
                d.log(&entry)?;
            }
            record.intervals.push(entry);
        }

        let eval_now = (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.steps;
        if let (Some(v), true) = (val, eval_now) {
            let features = ca_state.as_ref().map_or(classifier, |(_, t)| &t.net);
            let report = evaluate_checkpoint(&masker, features, classifier, v)?;
            record.evals.push(EvalPoint {
                step: done as u64,
                report,
            });
            if best.as_ref().is_none_or(|(b, _, _)| better(&report, b)) {
                best = Some((report, masker.clone(), features.clone()));
                record.best_step = Some(done as u64);
                if let Some(d) = &dir {
                    let p = d.path("ckpt_best.bin");
                    save_pair(&p, &masker, ca.then_some(features), done as u64)?;
                    if !record.checkpoints.contains(&p) {
                        record.checkpoints.push(p);
                    }
                }
            }
        }
    }

    let feature_classifier = match ca_state {
        Some((_, t)) => t.net,
        None => classifier.clone(),
    };
    if let Some(d) = &dir {
        let p = d.path("ckpt_last.bin");
        save_pair(
            &p,
            &masker,
            ca.then_some(&feature_classifier),
            cfg.steps as u64,
        )?;
        record.checkpoints.push(p);
        if let Some(last) = record.evals.last() {
            d.write_json("eval_val.json", &last.report)?;
        }
        d.write_json("record.json", &record)?;
    }
    Ok(MaskerRun {
        masker,
        feature_classifier,
        best: best.map(|(_, m, c)| (m, c)),
        record,
    })
}

fn concat(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    let mut out = Tensor::zeros(a.c, a.n + b.n, a.h, a.w);
    for c in 0..a.c {
        for n in 0..a.n {
            out.slice_mut(c, n).copy_from_slice(a.slice(c, n));
        }
        for n in 0..b.n {
            out.slice_mut(c, a.n + n).copy_from_slice(b.slice(c, n));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, DatasetSpec};

    fn scenes(n: usize) -> Vec<ImageSample> {
        let spec = DatasetSpec::new(10, 10, 3);
        (0..n)
            .map(|i| generate_scene(&spec, i % 10, i / 10))
            .collect()
    }

    fn base() -> Classifier {
        Classifier::new(10, &mut ChaCha8Rng::seed_from_u64(5))
    }

    fn tiny(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            steps: 4,
            batch_size: 4,
            log_every: 2,
            pool_push_every: 2,
            ..if mode == TrainMode::Fix {
                TrainConfig::fix()
            } else {
                TrainConfig::ca()
            }
        }
    }

    #[test]
    fn sampler_recycles_small_sets() {
        let mut s = BatchSampler::new(3, 1);
        let b = s.next(7);
        assert_eq!(b.len(), 7);
        let mut first: Vec<usize> = b[..3].to_vec();
        first.sort();
        assert_eq!(first, vec![0, 1, 2]);
    }

    #[test]
    fn fewshot_budget_is_one_full_epoch() {
        assert_eq!(fewshot_budget(900, 64), 15);
        assert_eq!(fewshot_budget(896, 64), 14);
        assert_eq!(fewshot_budget(0, 64), 1);
    }

    #[test]
    fn config_validation_names_fields() {
        let mut c = TrainConfig::fix();
        c.steps = 0;
        assert!(c.validate().unwrap_err().to_string().contains("steps"));
        let mut c = TrainConfig::ca();
        c.objective.reg.lambda_tv = -1.0;
        assert!(c.validate().unwrap_err().to_string().contains("lambda_tv"));
        let json = serde_json::to_string(&TrainConfig::ca()).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, TrainConfig::ca());
    }

    #[test]
    fn fix_leaves_classifier_untouched_and_is_deterministic() {
        let data = scenes(8);
        let refs: Vec<&ImageSample> = data.iter().collect();
        let net = base();
        let before = net.weights_hash();
        let cfg = tiny(TrainMode::Fix);
        let a = train_fix(&net, &refs, Some(&refs[..4]), &cfg, None).unwrap();
        assert_eq!(net.weights_hash(), before);
        assert_eq!(a.feature_classifier.weights_hash(), before);
        assert_eq!(a.record.intervals.len(), 2);
        assert_eq!(a.record.intervals[1].step, 4);
        let b = train_fix(&net, &refs, Some(&refs[..4]), &cfg, None).unwrap();
        assert_eq!(a.record.step_losses, b.record.step_losses);
        assert_eq!(a.masker, b.masker);
    }

    #[test]
    fn ca_fills_pool_and_writes_run_dir() {
        let data = scenes(8);
        let refs: Vec<&ImageSample> = data.iter().collect();
        let net = base();
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(TrainMode::Ca);
        let run = train_ca(&net, &refs, Some(&refs[..4]), &cfg, dir.path()).unwrap();
        assert_ne!(run.feature_classifier.weights_hash(), net.weights_hash());
        // initial push plus one every two steps
        assert_eq!(run.record.pool_pushes, 3);
        let pool = ClassifierPool::open(&dir.path().join("pool")).unwrap();
        assert_eq!(pool.sequence_numbers(), vec![0, 1, 2]);
        assert_eq!(
            Classifier::load(&pool.path_of(0)).unwrap().weights_hash(),
            net.weights_hash()
        );
        for f in [
            "config.json",
            "log.jsonl",
            "ckpt_last.bin",
            "ckpt_last_features.bin",
            "ckpt_best.bin",
            "eval_val.json",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let log = fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        let lines: Vec<serde_json::Value> = log
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        for key in [
            "step",
            "total",
            "out_term",
            "in_term",
            "l1_in",
            "l1_out",
            "tv",
            "mean_mask",
            "classifier_loss",
        ] {
            assert!(lines[0].get(key).is_some(), "{key}");
        }
        let (m, f) = load_masker_pair(&dir.path().join("ckpt_last.bin"), &net).unwrap();
        assert_eq!(m, run.masker);
        assert_eq!(f.weights_hash(), run.feature_classifier.weights_hash());
    }

    #[test]
    fn ca_requires_run_dir_and_matching_mode() {
        let data = scenes(4);
        let refs: Vec<&ImageSample> = data.iter().collect();
        let err = train_masker(&base(), &refs, None, &tiny(TrainMode::Ca), None)
            .err()
            .unwrap();
        assert!(err.to_string().contains("run_dir"));
        assert!(train_fix(&base(), &refs, None, &tiny(TrainMode::Ca), None).is_err());
    }

    #[test]
    fn evaluate_rejects_empty_split() {
        let net = base();
        let m = Masker::new(MaskerConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            evaluate_checkpoint(&m, &net, &net, &[]),
            Err(Error::EmptyDataset(_))
        ));
    }
}
