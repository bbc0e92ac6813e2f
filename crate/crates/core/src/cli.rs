//! `salfit` command-line interface. Every command writes its effective
//! configuration into its output directory before doing any work.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::classifier::{train_classifier, Classifier, ClassifierTrainConfig};
use crate::config::{apply_override, config_from_value, load_config, read_json};
use crate::data::{
    build_dataset, open_manifest, subsample_fewshot, DatasetManifest, DatasetSpec, ImageSample,
};
use crate::error::{Error, Result};
use crate::export::export_saliency;
use crate::masker::{GumbelConfig, GumbelEstimator};
use crate::plot::{line_chart, Series};
use crate::sanity::{
    drt_run, mprt_run, random_maps, roar_curve, DrtConfig, Measure, RoarCurve, DEFAULT_T_GRID,
};
use crate::trainer::{evaluate_checkpoint, load_masker_pair, train_masker, RunDir, TrainConfig};

pub const RUNS_DIR_ENV: &str = "SF_RUNS_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "salfit",
    version,
    about = "Train and evaluate masking-based saliency maps on synthetic shapes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic shapes dataset (images, masks, manifest).
    GenData(GenDataArgs),
    /// Train a classifier on a dataset's training split.
    TrainClassifier(TrainClassifierArgs),
    /// Train a masker against a trained classifier.
    TrainMasker(TrainMaskerArgs),
    /// Score a masker checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write masks, overlays, masked-in composites and a mask histogram.
    ExportSaliency(ExportArgs),
    /// Saliency sanity checks.
    #[command(subcommand)]
    Sanity(SanityCommand),
    /// Train maskers on class/example subsamples with a one-epoch budget.
    FewshotSweep(FewshotArgs),
}

#[derive(Subcommand, Debug)]
pub enum SanityCommand {
    /// Remove-and-retrain against a random-saliency control.
    Roar(RoarArgs),
    /// Cascading classifier parameter randomization.
    Mprt(MprtArgs),
    /// Classifier and masker trained on shuffled labels.
    Drt(DrtArgs),
}

#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set objective.reg.lambda_tv=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct OutputArgs {
    /// Run name; output goes to `$SF_RUNS_DIR/<name>` (default runs root: `runs`).
    #[arg(long)]
    pub name: Option<String>,
    /// Explicit output directory (takes precedence over --name).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct TrainClassifierArgs {
    /// Dataset manifest (or dataset directory).
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct TrainMaskerArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Classifier checkpoint.
    #[arg(long)]
    pub classifier: PathBuf,
    /// fix | ca
    #[arg(long)]
    pub mode: Option<String>,
    /// dual | dual-minclass | in | out-ent | out-class
    #[arg(long)]
    pub objective: Option<String>,
    /// Observed classifier layers, e.g. `3,4,5`.
    #[arg(long)]
    pub layers: Option<String>,
    /// none | mean | blur[:sigma] | external:<program>[,arg...]
    #[arg(long)]
    pub infiller: Option<String>,
    /// soft:<temperature> | hard:<temperature>
    #[arg(long)]
    pub gumbel: Option<String>,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Masker checkpoint.
    #[arg(long)]
    pub masker: PathBuf,
    /// Classifier being explained; defaults to the one recorded in the
    /// masker's run directory.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Dataset manifest; defaults to the one recorded in the masker's run
    /// directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// train | val | all
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Output directory (default: the masker checkpoint's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub masker: PathBuf,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Export at most this many samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RoarArgs {
    #[arg(long)]
    pub masker: PathBuf,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Removal fractions, starting at 0.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Seed of the random-saliency control.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Retraining recipe (classifier config).
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct MprtArgs {
    #[arg(long)]
    pub masker: PathBuf,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct DrtArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct FewshotArgs {
    /// Source dataset; subsamples are drawn from its training split.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub classifier: PathBuf,
    /// Evaluation dataset (default: the source's validation split).
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Class counts to sweep.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    pub classes: Vec<usize>,
    /// Examples per class to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,25")]
    pub per_class: Vec<usize>,
    /// Seeds per cell.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Size of the full training set that defines the one-epoch budget
    /// (default: the source's training split size).
    #[arg(long)]
    pub full_size: Option<usize>,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// Paths a run consumed, recorded so later commands can default to them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunInputs {
    pub command: String,
    pub data: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    pub masker: Option<PathBuf>,
}

impl RunInputs {
    fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("inputs.json");
        fs::write(&p, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&p, e))
    }

    fn read_near(ckpt: &Path) -> Option<Self> {
        let p = ckpt.parent()?.join("inputs.json");
        serde_json::from_str(&fs::read_to_string(p).ok()?).ok()
    }
}

pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn output_dir(o: &OutputArgs, default_name: &str) -> PathBuf {
    match (&o.out, &o.name) {
        (Some(p), _) => p.clone(),
        (None, Some(n)) => runs_root().join(n),
        (None, None) => runs_root().join(default_name),
    }
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.json")
    } else {
        p.to_path_buf()
    }
}

fn read_manifest(p: &Path) -> Result<(PathBuf, DatasetManifest)> {
    let mp = manifest_path(p);
    let root = mp
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((root, DatasetManifest::read(&mp)?))
}

fn select_split(m: &DatasetManifest, split: &str) -> Result<DatasetManifest> {
    let (train, val) = m.split();
    match split {
        "train" => Ok(train),
        "val" => Ok(val),
        "all" => Ok(m.clone()),
        other => Err(Error::config(
            "split",
            format!("unknown split `{other}` (train, val, all)"),
        )),
    }
}

fn read_samples(root: &Path, m: DatasetManifest) -> Result<Vec<ImageSample>> {
    open_manifest(root, m).collect()
}

/// Loads one split of a dataset from its manifest.
pub fn load_split(data: &Path, split: &str) -> Result<Vec<ImageSample>> {
    let (root, m) = read_manifest(data)?;
    read_samples(&root, select_split(&m, split)?)
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| Error::io(path, e))
}

fn refs(v: &[ImageSample]) -> Vec<&ImageSample> {
    v.iter().collect()
}

/// Converts the convenience flags of `train-masker` into overrides.
fn masker_flag_overrides(a: &TrainMaskerArgs) -> Result<Vec<String>> {
    let mut o = Vec::new();
    if let Some(m) = &a.mode {
        let mode: crate::trainer::TrainMode = m.parse()?;
        o.push(format!("mode={}", serde_json::to_string(&mode)?));
    }
    if let Some(name) = &a.objective {
        // keeps the regularizer of the file/defaults, swaps the objective terms
        o.push(format!("objective.__name={name}"));
    }
    if let Some(l) = &a.layers {
        let layers: Vec<usize> = l
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::config("--layers", format!("bad layer `{s}`")))
            })
            .collect::<Result<_>>()?;
        o.push(format!(
            "masker.observed_layers={}",
            serde_json::to_string(&layers)?
        ));
    }
    if let Some(i) = &a.infiller {
        o.push(format!(
            "infiller={}",
            serde_json::to_string(&parse_infiller(i)?)?
        ));
    }
    if let Some(g) = &a.gumbel {
        let (est, temp) = g.split_once(':').unwrap_or((g.as_str(), "0.5"));
        let estimator = match est {
            "soft" => GumbelEstimator::Soft,
            "hard" => GumbelEstimator::Hard,
            other => {
                return Err(Error::config(
                    "--gumbel",
                    format!("unknown estimator `{other}` (soft, hard)"),
                ))
            }
        };
        let temperature: f64 = temp
            .parse()
            .map_err(|_| Error::config("--gumbel", format!("bad temperature `{temp}`")))?;
        let mode = crate::masker::OutputMode::Gumbel(GumbelConfig {
            temperature,
            estimator,
        });
        o.push(format!(
            "masker.output_mode={}",
            serde_json::to_string(&mode)?
        ));
    }
    Ok(o)
}

pub fn parse_infiller(s: &str) -> Result<crate::perturb::Infiller> {
    use crate::perturb::Infiller;
    let (kind, rest) = s.split_once(':').map_or((s, None), |(k, r)| (k, Some(r)));
    match (kind, rest) {
        ("none", None) => Ok(Infiller::None),
        ("mean", None) => Ok(Infiller::Mean),
        ("blur", r) => {
            let sigma = match r {
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::config("--infiller", format!("bad sigma `{v}`")))?,
                None => 3.0,
            };
            Ok(Infiller::Blur { sigma })
        }
        ("external", Some(r)) => {
            let mut parts = r.split(',').map(str::to_string);
            let program = parts.next().unwrap_or_default();
            Ok(Infiller::External {
                program,
                args: parts.collect(),
            })
        }
        _ => Err(Error::config(
            "--infiller",
            format!(
                "unknown infiller `{s}` (none, mean, blur[:sigma], external:<program>[,arg...])"
            ),
        )),
    }
}

/// Loads a train config. Without a config file the defaults follow the
/// requested mode (FIX and CA use different regularizer weights). The
/// pseudo-field `objective.__name` swaps in a named objective while keeping
/// the configured regularizer; explicit `--set objective.*` still wins.
fn load_train_config(c: &ConfigArgs, flags: Vec<String>) -> Result<TrainConfig> {
    let mut all = flags;
    all.extend(c.overrides.iter().cloned());
    let (named, rest): (Vec<String>, Vec<String>) = all
        .into_iter()
        .partition(|o| o.starts_with("objective.__name="));
    let base = match &c.config {
        Some(p) => read_json(p)?,
        None => {
            let fix = rest
                .iter()
                .rev()
                .find_map(|o| o.strip_prefix("mode="))
                .map(|m| m.trim_matches('"') == "fix");
            serde_json::to_value(if fix == Some(true) {
                TrainConfig::fix()
            } else {
                TrainConfig::ca()
            })?
        }
    };
    let Some(n) = named.last() else {
        return config_from_value(base, &rest);
    };
    let (objective_sets, early): (Vec<String>, Vec<String>) =
        rest.into_iter().partition(|o| o.starts_with("objective."));
    let mut doc = base;
    for o in &early {
        apply_override(&mut doc, o)?;
    }
    let reg: crate::objectives::RegularizerConfig =
        serde_json::from_value(doc["objective"]["reg"].clone())
            .map_err(|e| Error::config("objective.reg", e.to_string()))?;
    let objective =
        crate::objectives::ObjectiveConfig::from_name(&n["objective.__name=".len()..], reg)?;
    doc["objective"] = serde_json::to_value(objective)?;
    config_from_value(doc, &objective_sets)
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let spec: DatasetSpec = load_config(a.config.config.as_deref(), &a.config.overrides)?;
    write_json(&a.out.join("config.json"), &spec)?;
    let m = build_dataset(&spec, &a.out)?;
    println!(
        "wrote {} samples to {} (checksum {})",
        m.len(),
        a.out.display(),
        m.checksum()
    );
    Ok(())
}

#[derive(Serialize)]
struct EpochLog {
    epoch: usize,
    step: usize,
    loss: f64,
}

#[derive(Serialize)]
struct ClassifierEval {
    train_accuracy: f64,
    val_accuracy: f64,
    n_train: usize,
    n_val: usize,
}

fn cmd_train_classifier(a: &TrainClassifierArgs) -> Result<()> {
    let cfg: ClassifierTrainConfig = load_config(a.config.config.as_deref(), &a.config.overrides)?;
    let dir = output_dir(&a.output, "classifier");
    let mut run = RunDir::create(&dir, &cfg)?;
    RunInputs {
        command: "train-classifier".into(),
        data: Some(absolute(&manifest_path(&a.data))),
        ..Default::default()
    }
    .write(&dir)?;
    let (root, m) = read_manifest(&a.data)?;
    let k = m.spec.num_classes;
    let (tm, vm) = m.split();
    let train = read_samples(&root, tm)?;
    let val = read_samples(&root, vm)?;
    let (tr, va) = (refs(&train), refs(&val));
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let (net, log) = train_classifier(&tr, &labels, k, &cfg)?;
    let per_epoch = log.step_losses.len() / log.epoch_losses.len().max(1);
    for (e, loss) in log.epoch_losses.iter().enumerate() {
        run.log(&EpochLog {
            epoch: e + 1,
            step: (e + 1) * per_epoch,
            loss: *loss,
        })?;
    }
    net.save(&dir.join("classifier.bin"), log.step_losses.len() as u64)?;
    let val_labels: Vec<usize> = val.iter().map(|s| s.label).collect();
    let report = ClassifierEval {
        train_accuracy: net.accuracy(&tr, &labels)?,
        val_accuracy: if va.is_empty() {
            0.0
        } else {
            net.accuracy(&va, &val_labels)?
        },
        n_train: tr.len(),
        n_val: va.len(),
    };
    run.write_json("eval_val.json", &report)?;
    println!(
        "classifier -> {} (train {:.1}%, val {:.1}%)",
        dir.join("classifier.bin").display(),
        report.train_accuracy,
        report.val_accuracy
    );
    Ok(())
}

fn cmd_train_masker(a: &TrainMaskerArgs) -> Result<()> {
    let cfg = load_train_config(&a.config, masker_flag_overrides(a)?)?;
    let dir = output_dir(&a.output, "masker");
    RunInputs {
        command: "train-masker".into(),
        data: Some(absolute(&manifest_path(&a.data))),
        classifier: Some(absolute(&a.classifier)),
        masker: None,
    }
    .write(&dir)?;
    let classifier = Classifier::load(&a.classifier)?;
    let (root, m) = read_manifest(&a.data)?;
    let (tm, vm) = m.split();
    let train = read_samples(&root, tm)?;
    let val = read_samples(&root, vm)?;
    let va = refs(&val);
    let run = train_masker(
        &classifier,
        &refs(&train),
        (!va.is_empty()).then_some(&va[..]),
        &cfg,
        Some(&dir),
    )?;
    match run.record.evals.last() {
        Some(e) => println!(
            "masker -> {} (val LE {:.1}, PxAP {:.1})",
            dir.join("ckpt_last.bin").display(),
            e.report.le,
            e.report.pxap
        ),
        None => println!("masker -> {}", dir.join("ckpt_last.bin").display()),
    }
    Ok(())
}

/// Resolves the classifier and dataset for a masker checkpoint, falling back
/// to the paths recorded in its run directory.
fn masker_inputs(
    masker: &Path,
    classifier: &Option<PathBuf>,
    data: &Option<PathBuf>,
) -> Result<(PathBuf, PathBuf)> {
    let recorded = RunInputs::read_near(masker).unwrap_or_default();
    let c = classifier.clone().or(recorded.classifier).ok_or_else(|| {
        Error::config(
            "--classifier",
            "required (no inputs.json next to the masker)",
        )
    })?;
    let d = data
        .clone()
        .or(recorded.data)
        .ok_or_else(|| Error::config("--data", "required (no inputs.json next to the masker)"))?;
    Ok((c, d))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (cp, dp) = masker_inputs(&a.masker, &a.classifier, &a.data)?;
    let classifier = Classifier::load(&cp)?;
    let (masker, features) = load_masker_pair(&a.masker, &classifier)?;
    let samples = load_split(&dp, &a.split)?;
    let report = evaluate_checkpoint(&masker, &features, &classifier, &refs(&samples))?;
    let dir = a
        .out
        .clone()
        .unwrap_or_else(|| a.masker.parent().map(Path::to_path_buf).unwrap_or_default());
    let p = dir.join(format!("eval_{}.json", a.split));
    write_json(&p, &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let (cp, dp) = masker_inputs(&a.masker, &a.classifier, &a.data)?;
    let classifier = Classifier::load(&cp)?;
    let (masker, features) = load_masker_pair(&a.masker, &classifier)?;
    let mut samples = load_split(&dp, &a.split)?;
    if let Some(n) = a.limit {
        samples.truncate(n);
    }
    RunInputs {
        command: "export-saliency".into(),
        data: Some(absolute(&manifest_path(&dp))),
        classifier: Some(absolute(&cp)),
        masker: Some(absolute(&a.masker)),
    }
    .write(&a.out)?;
    let r = refs(&samples);
    let masks = masker.predict(&features, &r)?;
    let hist = export_saliency(&r, &masks, &a.out)?;
    println!(
        "exported {} samples to {} (extreme-bucket mass {:.1}%)",
        r.len(),
        a.out.display(),
        100.0 * hist.extreme_fraction()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct RoarSnapshot {
    grid: Vec<f64>,
    control_seed: u64,
    classifier: ClassifierTrainConfig,
}

#[derive(Serialize, Deserialize)]
pub struct RoarReport {
    pub masker: RoarCurve,
    pub random: RoarCurve,
}

fn cmd_roar(a: &RoarArgs) -> Result<()> {
    let cfg: ClassifierTrainConfig = load_config(a.config.config.as_deref(), &a.config.overrides)?;
    let grid = a.grid.clone().unwrap_or_else(|| DEFAULT_T_GRID.to_vec());
    let dir = output_dir(&a.output, "roar");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(
        &dir.join("config.json"),
        &RoarSnapshot {
            grid: grid.clone(),
            control_seed: a.seed,
            classifier: cfg.clone(),
        },
    )?;
    let (cp, dp) = masker_inputs(&a.masker, &a.classifier, &a.data)?;
    let classifier = Classifier::load(&cp)?;
    let (masker, features) = load_masker_pair(&a.masker, &classifier)?;
    let (root, m) = read_manifest(&dp)?;
    let k = m.spec.num_classes;
    let (tm, vm) = m.split();
    let train = read_samples(&root, tm)?;
    let val = read_samples(&root, vm)?;
    let (tr, va) = (refs(&train), refs(&val));
    let pixels = train.first().map_or(0, |s| s.height * s.width);
    let mtr = masker.predict(&features, &tr)?;
    let mva = masker.predict(&features, &va)?;
    let masker_curve = roar_curve("masker", &tr, &mtr, &va, &mva, &grid, k, &cfg, None)?;
    let rtr = random_maps(tr.len(), pixels, a.seed);
    let rva = random_maps(va.len(), pixels, a.seed.wrapping_add(1));
    let random = roar_curve(
        "random",
        &tr,
        &rtr,
        &va,
        &rva,
        &grid,
        k,
        &cfg,
        masker_curve.at(0.0),
    )?;
    let report = RoarReport {
        masker: masker_curve,
        random,
    };
    write_json(&dir.join("roar.json"), &report)?;
    let series = [&report.masker, &report.random].map(|c| Series {
        name: &c.label,
        points: c.points.iter().map(|p| (p.t, p.accuracy)).collect(),
    });
    line_chart(&dir.join("roar.png"), &series, &grid, Some((0.0, 100.0)))?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_mprt(a: &MprtArgs) -> Result<()> {
    let dir = output_dir(&a.output, "mprt");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(
        &dir.join("config.json"),
        &serde_json::json!({"split": a.split, "limit": a.limit, "seed": a.seed}),
    )?;
    let (cp, dp) = masker_inputs(&a.masker, &a.classifier, &a.data)?;
    let classifier = Classifier::load(&cp)?;
    let (masker, features) = load_masker_pair(&a.masker, &classifier)?;
    let mut samples = load_split(&dp, &a.split)?;
    if let Some(n) = a.limit {
        samples.truncate(n);
    }
    let report = mprt_run(&masker, &features, &refs(&samples), a.seed)?;
    write_json(&dir.join("mprt.json"), &report)?;
    let xs: Vec<f64> = (0..report.stages.len()).map(|i| i as f64).collect();
    let series = [Measure::RankAbs, Measure::Rank, Measure::Ssim].map(|m| Series {
        name: match m {
            Measure::RankAbs => "rank_abs",
            Measure::Rank => "rank",
            Measure::Ssim => "ssim",
        },
        points: xs.iter().copied().zip(report.series(m)).collect(),
    });
    line_chart(&dir.join("mprt.png"), &series, &xs, Some((-1.0, 1.0)))?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_drt(a: &DrtArgs) -> Result<()> {
    let cfg: DrtConfig = load_config(a.config.config.as_deref(), &a.config.overrides)?;
    let dir = output_dir(&a.output, "drt");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&dir.join("config.json"), &cfg)?;
    let (root, m) = read_manifest(&a.data)?;
    let k = m.spec.num_classes;
    let (tm, vm) = m.split();
    let train = read_samples(&root, tm)?;
    let val = read_samples(&root, vm)?;
    let result = drt_run(&refs(&train), &refs(&val), k, &cfg, &dir)?;
    write_json(&dir.join("drt.json"), &result)?;
    println!("{}", serde_json::to_string(&result)?);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewshotCell {
    pub classes: usize,
    pub per_class: usize,
    pub steps: usize,
    pub le: Vec<f64>,
    pub pxap: Vec<f64>,
    pub median_le: f64,
    pub median_pxap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewshotSummary {
    pub full_size: usize,
    pub cells: Vec<FewshotCell>,
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn cmd_fewshot(a: &FewshotArgs) -> Result<()> {
    let cfg = load_train_config(&a.config, Vec::new())?;
    if a.seeds == 0 {
        return Err(Error::config("--seeds", "must be >= 1"));
    }
    let dir = output_dir(&a.output, "fewshot");
    RunDir::create(&dir, &cfg)?;
    RunInputs {
        command: "fewshot-sweep".into(),
        data: Some(absolute(&manifest_path(&a.data))),
        classifier: Some(absolute(&a.classifier)),
        masker: None,
    }
    .write(&dir)?;
    let classifier = Classifier::load(&a.classifier)?;
    let (root, m) = read_manifest(&a.data)?;
    let (source, source_val) = m.split();
    let eval = match &a.eval_data {
        Some(p) => load_split(p, "val")?,
        None => read_samples(&root, source_val)?,
    };
    let ev = refs(&eval);
    let full_size = a.full_size.unwrap_or(source.len());
    let steps = crate::trainer::fewshot_budget(full_size, cfg.batch_size);
    let mut cells = Vec::new();
    for &c in &a.classes {
        for &e in &a.per_class {
            let mut le = Vec::new();
            let mut pxap = Vec::new();
            for seed in 0..a.seeds {
                let sub = subsample_fewshot(&source, c, e, seed)?;
                let samples = read_samples(&root, sub)?;
                let run_cfg = TrainConfig {
                    seed: cfg.seed.wrapping_add(seed),
                    eval_every: 0,
                    ..cfg.clone()
                };
                let cell_dir = dir.join(format!("c{c}_e{e}_s{seed}"));
                let run = crate::trainer::train_fewshot(
                    &classifier,
                    &refs(&samples),
                    full_size,
                    Some(&ev),
                    &run_cfg,
                    Some(&cell_dir),
                )?;
                let r = run.record.evals.last().expect("final evaluation").report;
                le.push(r.le);
                pxap.push(r.pxap);
            }
            println!(
                "classes {c} per-class {e}: median LE {:.1}, PxAP {:.1}",
                median(&le),
                median(&pxap)
            );
            cells.push(FewshotCell {
                classes: c,
                per_class: e,
                steps,
                median_le: median(&le),
                median_pxap: median(&pxap),
                le,
                pxap,
            });
        }
    }
    write_json(
        &dir.join("summary.json"),
        &FewshotSummary { full_size, cells },
    )?;
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::TrainClassifier(a) => cmd_train_classifier(a),
        Command::TrainMasker(a) => cmd_train_masker(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ExportSaliency(a) => cmd_export(a),
        Command::Sanity(SanityCommand::Roar(a)) => cmd_roar(a),
        Command::Sanity(SanityCommand::Mprt(a)) => cmd_mprt(a),
        Command::Sanity(SanityCommand::Drt(a)) => cmd_drt(a),
        Command::FewshotSweep(a) => cmd_fewshot(a),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["salfit"]), 1);
        assert_eq!(run(["salfit", "frobnicate"]), 1);
        assert_eq!(run(["salfit", "--help"]), 0);
    }

    #[test]
    fn infiller_flags() {
        use crate::perturb::Infiller;
        assert_eq!(parse_infiller("none").unwrap(), Infiller::None);
        assert_eq!(
            parse_infiller("blur").unwrap(),
            Infiller::Blur { sigma: 3.0 }
        );
        assert_eq!(
            parse_infiller("blur:1.5").unwrap(),
            Infiller::Blur { sigma: 1.5 }
        );
        assert_eq!(
            parse_infiller("external:/bin/fill,-q").unwrap(),
            Infiller::External {
                program: "/bin/fill".into(),
                args: vec!["-q".into()]
            }
        );
        assert!(parse_infiller("paint").is_err());
    }

    #[test]
    fn masker_flags_become_config_fields() {
        let cli = Cli::try_parse_from([
            "salfit",
            "train-masker",
            "--data",
            "d",
            "--classifier",
            "c",
            "--mode",
            "fix",
            "--objective",
            "in",
            "--layers",
            "4,5",
            "--gumbel",
            "hard:0.3",
            "--set",
            "steps=7",
        ])
        .unwrap();
        let Command::TrainMasker(a) = &cli.command else {
            panic!()
        };
        let cfg = load_train_config(&a.config, masker_flag_overrides(a).unwrap()).unwrap();
        assert_eq!(cfg.mode, crate::trainer::TrainMode::Fix);
        assert_eq!(cfg.objective.out_kind, crate::objectives::OutKind::None);
        assert_eq!(cfg.masker.observed_layers, vec![4, 5]);
        assert_eq!(cfg.steps, 7);
        assert!(
            matches!(cfg.masker.output_mode, crate::masker::OutputMode::Gumbel(g) if g.temperature == 0.3)
        );
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
