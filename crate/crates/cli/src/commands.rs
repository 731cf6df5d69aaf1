use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::json;

use apm_core::adversarial::{run_adversarial, write_trace_csv, Direction, PerturbConfig};
use apm_core::data::{
    generate_synthetic, load_samples, parse_score_rows, DatasetSplit, Image, Sample, SynthSpec,
    SyntheticCorpus,
};
use apm_core::distcore::{dataset_metrics, mean_metrics, RawPrediction, ScoreDistribution};
use apm_core::model::{
    load_checkpoint, save_checkpoint, BackboneConfig, HeadConfig, HeadVariant, Network, NetworkConfig,
    Prediction, StageTag,
};
use apm_core::training::{
    generate_teacher_targets, predict_all, read_teacher_targets, train_aesthetic, train_distill,
    train_teacher, write_loss_csv, write_teacher_targets, InitPolicy, LossKind, OptimizerConfig,
    StagedModel, TrainConfig,
};
use apm_core::Error;

use crate::manifest::{from_config, now_unix, usage, RunManifest, Timestamps};
use crate::{
    AdversarialArgs, BackboneArg, DirectionArg, EvalArgs, LossArg, MetricsArgs, MinSizeArgs, NetArgs,
    OptimArgs, RerunArgs, StageArg, SubsetArg, SynthArgs, TeacherArgs, TrainArgs, VariantArg,
};

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> anyhow::Result<&'a T> {
    value.as_ref().ok_or_else(|| usage(format!("--{flag} is required")))
}

fn out_dir(out: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
    let dir = required(out, "out")?.clone();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

struct Run {
    command: &'static str,
    config: serde_json::Value,
    seed: Option<u64>,
    started: f64,
    inputs: Vec<PathBuf>,
}

impl Run {
    fn start(command: &'static str, args: &impl Serialize, seed: Option<u64>) -> anyhow::Result<Self> {
        Ok(Self {
            command,
            config: serde_json::to_value(args)?,
            seed,
            started: now_unix(),
            inputs: Vec::new(),
        })
    }

    fn finish(self, dir: &Path, outputs: &[&str]) -> anyhow::Result<()> {
        RunManifest {
            command: self.command.into(),
            config: self.config,
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            timestamps: Timestamps {
                started_unix: self.started,
                finished_unix: now_unix(),
            },
            inputs: self.inputs,
            outputs: outputs.iter().map(|o| dir.join(o)).collect(),
        }
        .write(dir)
    }
}

fn backbone(arg: BackboneArg) -> BackboneConfig {
    match arg {
        BackboneArg::Tiny => BackboneConfig::tiny(),
        BackboneArg::Desk => BackboneConfig::desk_default(),
    }
}

fn network_config(net: &NetArgs, distill_classes: Option<usize>) -> NetworkConfig {
    NetworkConfig {
        backbone: backbone(net.backbone),
        spp_n: net.spp_n,
        head: HeadConfig {
            hidden: net.hidden,
            variant: match net.variant {
                VariantArg::Dist => HeadVariant::Dist,
                VariantArg::Mean => HeadVariant::Mean,
                VariantArg::Dual => HeadVariant::Dual,
            },
        },
        distill_classes,
    }
}

fn optimizer(o: &OptimArgs, seed: u64) -> OptimizerConfig {
    OptimizerConfig {
        base_lr: o.lr,
        momentum: o.momentum,
        weight_decay: o.weight_decay,
        batch_size: o.batch_size,
        step_iters: o.step_iters,
        lr_factor: o.lr_factor,
        seed,
    }
}

pub fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let dir = out_dir(&a.out)?;
    let run = Run::start("synth", &a, Some(a.seed))?;
    let defaults = SynthSpec::default();
    let spec = SynthSpec {
        n_images: a.n,
        min_side: a.min_side,
        max_side: a.max_side,
        n_classes: a.classes,
        class_std: defaults.class_std.iter().copied().take(a.classes).collect(),
        votes_per_image: a.votes,
        outlier_rate: a.outlier_rate,
        seed: a.seed,
        ..defaults
    };
    generate_synthetic(&spec)?.save(&dir)?;
    run.finish(&dir, &["manifest.json", "annotations.csv", "images"])
}

pub fn teacher(a: TeacherArgs) -> anyhow::Result<()> {
    let data = required(&a.data, "data")?.clone();
    let dir = out_dir(&a.out)?;
    let mut run = Run::start("teacher", &a, Some(a.seed))?;
    run.inputs.push(data.clone());

    let corpus = SyntheticCorpus::load(&data)?;
    let classes = corpus.spec.n_classes;
    let ids = corpus.ids();
    let labels = corpus.labels();
    let images: Vec<Image> = corpus.items.into_iter().map(|it| it.image).collect();
    let cfg = TrainConfig {
        optimizer: optimizer(&a.optim, a.seed),
        iterations: a.optim.iterations,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let start = StagedModel {
        network: Network::<f32>::new(network_config(&a.net, Some(classes)), a.seed)?,
        stage: StageTag::Init,
    };
    let outcome = train_teacher(start, &images, &labels, classes, &cfg)?;
    let targets = generate_teacher_targets(&outcome.network, &ids, &images)?;
    let correct = (0..targets.len())
        .filter(|&i| {
            let s = targets.target(i);
            let best = (0..s.len()).fold(0, |b, k| if s[k] > s[b] { k } else { b });
            best == labels[i]
        })
        .count();
    let (initial, last) = outcome.objective.expect("classifier stage");

    save_checkpoint(&outcome.network, &outcome.meta, &dir.join("teacher.ckpt"))?;
    write_teacher_targets(&targets, &dir.join("targets.csv"))?;
    write_loss_csv(&outcome.log, &dir.join("loss.csv"))?;
    write_json(
        &dir.join("report.json"),
        &json!({
            "accuracy": correct as f64 / targets.len() as f64,
            "initial_cross_entropy": initial,
            "final_cross_entropy": last,
            "classes": classes,
        }),
    )?;
    run.finish(&dir, &["teacher.ckpt", "targets.csv", "loss.csv", "report.json"])
}

fn select<'a>(samples: &'a [Sample], ids: &[String]) -> anyhow::Result<Vec<Sample>> {
    let index: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|s| (*s).clone())
                .ok_or_else(|| Error::InvalidAnnotation(format!("split lists unknown image `{id}`")).into())
        })
        .collect()
}

pub fn train(a: TrainArgs) -> anyhow::Result<()> {
    let stage = *required(&a.stage, "stage")?;
    let data = required(&a.data, "data")?.clone();
    if stage == StageArg::Distill && a.targets.is_none() {
        return Err(usage("the distill stage needs --targets (teacher soft targets)"));
    }
    if stage == StageArg::Aesthetic {
        match (&a.init_from, a.from_scratch) {
            (Some(_), true) => return Err(usage("--init-from and --from-scratch are mutually exclusive")),
            (None, false) => {
                return Err(Error::StageOrder(
                    "aesthetic training starts from a distilled checkpoint (--init-from) \
                     or explicitly from scratch (--from-scratch)"
                        .into(),
                )
                .into())
            }
            _ => {}
        }
    }
    let dir = out_dir(&a.out)?;
    let mut run = Run::start("train", &a, Some(a.seed))?;
    run.inputs.push(data.clone());

    let samples = load_samples(&data, a.resize)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = apm_core::data::make_split_with_test(&ids, a.val_count, a.test_count, a.seed)?;
    write_json(&dir.join("split.json"), &split)?;
    let train_set = select(&samples, &split.train)?;
    let val_set = select(&samples, &split.val)?;
    let cfg = TrainConfig {
        optimizer: optimizer(&a.optim, a.seed),
        iterations: a.optim.iterations,
        loss: match a.loss {
            LossArg::Huber => LossKind::Huber,
            LossArg::Euclidean => LossKind::Euclidean,
        },
        huber_sigma: a.huber_sigma,
        eval_every: a.eval_every,
        threshold: a.threshold,
    };
    let config = network_config(&a.net, None);

    let outcome = match stage {
        StageArg::Distill => {
            let path = a.targets.clone().expect("checked above");
            run.inputs.push(path.clone());
            let targets = read_teacher_targets(&path)?;
            let missing: Vec<&str> = train_set
                .iter()
                .filter(|s| targets.get(&s.id).is_none())
                .map(|s| s.id.as_str())
                .collect();
            if !missing.is_empty() {
                return Err(Error::InvalidAnnotation(format!(
                    "no teacher target for {} image(s): {}",
                    missing.len(),
                    missing.join(", ")
                ))
                .into());
            }
            let ordered = apm_core::training::TeacherTargets::new(
                train_set.iter().map(|s| s.id.clone()).collect(),
                train_set.iter().map(|s| targets.get(&s.id).expect("checked").to_vec()).collect(),
            )?;
            let images: Vec<Image> = train_set.iter().map(|s| s.image.clone()).collect();
            let start = StagedModel {
                network: Network::<f32>::new(config, a.seed)?,
                stage: StageTag::Init,
            };
            train_distill(start, &images, &ordered, &cfg)?
        }
        StageArg::Aesthetic => {
            let (start, init) = match &a.init_from {
                Some(path) => {
                    run.inputs.push(path.clone());
                    let (network, meta) = load_checkpoint::<f32>(path)?;
                    let mut expected = network.config().clone();
                    expected.distill_classes = None;
                    if expected != config {
                        return Err(usage(format!(
                            "{} was built with a different network layout than the flags describe",
                            path.display()
                        )));
                    }
                    (StagedModel { network, stage: meta.stage }, InitPolicy::Distilled)
                }
                None => (
                    StagedModel {
                        network: Network::<f32>::new(config, a.seed)?,
                        stage: StageTag::Init,
                    },
                    InitPolicy::Scratch,
                ),
            };
            train_aesthetic(start, init, &train_set, &val_set, &cfg)?
        }
    };

    save_checkpoint(&outcome.network, &outcome.meta, &dir.join("model.ckpt"))?;
    write_loss_csv(&outcome.log, &dir.join("loss.csv"))?;
    let evals: Vec<_> = outcome
        .evals
        .iter()
        .map(|(iteration, report)| json!({ "iteration": iteration, "report": report }))
        .collect();
    write_json(
        &dir.join("report.json"),
        &json!({
            "stage": outcome.meta.stage,
            "iterations": outcome.meta.iteration,
            "objective": outcome.objective.map(|(a, b)| json!({ "initial": a, "final": b })),
            "fusion_weight": outcome.network.fusion(),
            "evals": evals,
        }),
    )?;
    run.finish(&dir, &["model.ckpt", "loss.csv", "report.json", "split.json"])
}

fn predictions_csv(ids: &[&str], preds: &[Prediction]) -> anyhow::Result<String> {
    let mut out = String::new();
    for (id, p) in ids.iter().zip(preds) {
        out.push_str(id);
        match p {
            Prediction::Distribution(raw) => {
                for v in raw.normalize()?.probs() {
                    write!(out, ",{v}")?;
                }
            }
            Prediction::Mean(m) => write!(out, ",{m}")?,
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let checkpoint = required(&a.checkpoint, "checkpoint")?.clone();
    let data = required(&a.data, "data")?.clone();
    let dir = out_dir(&a.out)?;
    let mut run = Run::start("eval", &a, None)?;
    run.inputs.extend([checkpoint.clone(), data.clone()]);

    let (net, _) = load_checkpoint::<f32>(&checkpoint)?;
    let mut samples = load_samples(&data, a.resize)?;
    if let Some(path) = &a.split {
        run.inputs.push(path.clone());
        let split: DatasetSplit = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::InvalidAnnotation(format!("{}: {e}", path.display())))?;
        let ids = match a.subset {
            SubsetArg::All => [split.train, split.val, split.test].concat(),
            SubsetArg::Train => split.train,
            SubsetArg::Val => split.val,
            SubsetArg::Test => split.test,
        };
        samples = select(&samples, &ids)?;
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput("no images to evaluate").into());
    }
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let gts: Vec<ScoreDistribution> = samples.iter().map(|s| s.target).collect();
    let preds = predict_all(&net, &images)?;
    let report = match net.config().head.variant {
        HeadVariant::Mean => {
            let means: Vec<f64> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Mean(m) => *m,
                    Prediction::Distribution(_) => unreachable!("mean head"),
                })
                .collect();
            mean_metrics(&means, &gts, a.threshold)?
        }
        _ => {
            let raw: Vec<RawPrediction> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Distribution(d) => *d,
                    Prediction::Mean(_) => unreachable!("distribution head"),
                })
                .collect();
            dataset_metrics(&raw, &gts, a.threshold)?
        }
    };
    let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    std::fs::write(dir.join("predictions.csv"), predictions_csv(&ids, &preds)?)?;
    write_json(&dir.join("report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    run.finish(&dir, &["report.json", "predictions.csv"])
}

fn to_distribution(id: &str, values: &[f64]) -> apm_core::Result<ScoreDistribution> {
    let sum: f64 = values.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::InvalidAnnotation(format!("ground truth for `{id}` has zero mass")));
    }
    let mut p = [0.0; apm_core::distcore::BINS];
    for (dst, v) in p.iter_mut().zip(values) {
        *dst = v / sum;
    }
    ScoreDistribution::new(p)
}

pub fn metrics(a: MetricsArgs) -> anyhow::Result<()> {
    let pred_path = required(&a.pred, "pred")?.clone();
    let gt_path = required(&a.gt, "gt")?.clone();
    let mut run = Run::start("metrics", &a, None)?;
    run.inputs.extend([pred_path.clone(), gt_path.clone()]);

    let preds: HashMap<String, [f64; 10]> = parse_score_rows(&pred_path)?.into_iter().collect();
    let gts = parse_score_rows(&gt_path)?;
    let gt_ids: HashSet<&str> = gts.iter().map(|(id, _)| id.as_str()).collect();
    let mut missing: Vec<&str> = gts
        .iter()
        .map(|(id, _)| id.as_str())
        .filter(|id| !preds.contains_key(*id))
        .collect();
    let mut extra: Vec<&str> = preds.keys().map(String::as_str).filter(|id| !gt_ids.contains(id)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        missing.sort_unstable();
        extra.sort_unstable();
        return Err(Error::InvalidAnnotation(format!(
            "image ids do not match; missing predictions: [{}]; predictions without ground truth: [{}]",
            missing.join(", "),
            extra.join(", ")
        ))
        .into());
    }
    let mut raw = Vec::with_capacity(gts.len());
    let mut dists = Vec::with_capacity(gts.len());
    for (id, g) in &gts {
        raw.push(RawPrediction::new(preds[id])?);
        dists.push(to_distribution(id, g)?);
    }
    let report = dataset_metrics(&raw, &dists, a.threshold)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if a.out.is_some() {
        let dir = out_dir(&a.out)?;
        write_json(&dir.join("report.json"), &report)?;
        run.finish(&dir, &["report.json"])?;
    }
    Ok(())
}

pub fn adversarial(a: AdversarialArgs) -> anyhow::Result<()> {
    let checkpoint = required(&a.checkpoint, "checkpoint")?.clone();
    let image_path = required(&a.image, "image")?.clone();
    let cfg = PerturbConfig {
        direction: match a.direction {
            DirectionArg::Improve => Direction::Improve,
            DirectionArg::Worsen => Direction::Worsen,
        },
        shift_amount: a.shift,
        steps: a.steps,
        step_size: a.step_size,
        linf_budget: a.linf_budget,
        pixel_range: (0.0, 1.0),
        huber_sigma: a.huber_sigma,
    };
    cfg.validate()?;
    let dir = out_dir(&a.out)?;
    let mut run = Run::start("adversarial", &a, None)?;
    run.inputs.extend([checkpoint.clone(), image_path.clone()]);

    let (net, _) = load_checkpoint::<f32>(&checkpoint)?;
    let image = Image::load_png(&image_path)?;
    let (outcome, result) = run_adversarial(&net, &image, &cfg)?;
    outcome.image.save_png(&dir.join("perturbed.png"))?;
    result.map.save_png(&dir.join("heatmap.png"))?;
    result.map.write_csv(&dir.join("heatmap.csv"))?;
    write_trace_csv(&outcome.trace, &dir.join("trace.csv"))?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "original_mean": result.original_mean,
            "perturbed_mean": result.perturbed_mean,
            "iterations": result.iterations,
            "heatmap_max": result.map.max(),
            "heatmap_mean": result.map.mean(),
        }),
    )?;
    run.finish(
        &dir,
        &["perturbed.png", "heatmap.png", "heatmap.csv", "trace.csv", "summary.json"],
    )
}

pub fn min_size(a: MinSizeArgs) -> anyhow::Result<()> {
    let config = match &a.checkpoint {
        Some(path) => load_checkpoint::<f32>(path)?.0.config().clone(),
        None => NetworkConfig {
            backbone: backbone(a.backbone),
            spp_n: a.spp_n,
            ..NetworkConfig::default()
        },
    };
    config.validate()?;
    println!("{}", config.min_input_side());
    Ok(())
}

pub fn rerun(a: RerunArgs) -> anyhow::Result<()> {
    let manifest = RunManifest::read(&a.manifest)?;
    let mut config = manifest.config;
    if let Some(out) = &a.out {
        let obj = config
            .as_object_mut()
            .ok_or_else(|| usage("manifest config is not an object"))?;
        obj.insert("out".into(), serde_json::to_value(out)?);
    }
    match manifest.command.as_str() {
        "synth" => synth(from_config(config)?),
        "teacher" => teacher(from_config(config)?),
        "train" => train(from_config(config)?),
        "eval" => eval(from_config(config)?),
        "metrics" => metrics(from_config(config)?),
        "adversarial" => adversarial(from_config(config)?),
        other => Err(usage(format!("manifest records unknown command `{other}`"))),
    }
}
