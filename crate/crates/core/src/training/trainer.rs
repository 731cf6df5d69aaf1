use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{lr_at, sgd_step, OptimizerConfig, SgdState};
use super::teacher::TeacherTargets;
use crate::autodiff::{Real, Tape, Var};
use crate::data::{Image, Sample};
use crate::distcore::{dataset_metrics, mean_metrics, EvalReport, HuberConfig, RawPrediction, DEFAULT_THRESHOLD};
use crate::model::{learn_fusion_weight, CheckpointMeta, HeadVariant, Mode, Network, Prediction, StageTag};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Huber,
    Euclidean,
}

/// Which objective an iteration optimized. `Teacher` is the preparatory classifier run that
/// produces soft targets; it is not part of the student's schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStage {
    Teacher,
    Distill,
    Aesthetic,
}

impl fmt::Display for TrainStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Teacher => "teacher",
            Self::Distill => "distill",
            Self::Aesthetic => "aesthetic",
        })
    }
}

/// How the aesthetic stage may start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitPolicy {
    /// Continue from a checkpoint tagged `distilled`.
    Distilled,
    /// Start from a freshly initialized network, skipping distillation on purpose.
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub iterations: usize,
    pub loss: LossKind,
    pub huber_sigma: f64,
    /// Validation report every this many iterations; 0 reports only at the end.
    pub eval_every: usize,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            iterations: 10_000,
            loss: LossKind::Huber,
            huber_sigma: 3.0,
            eval_every: 1000,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        HuberConfig::new(self.huber_sigma)?;
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// A network together with the stage that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedModel<T> {
    pub network: Network<T>,
    pub stage: StageTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub stage: TrainStage,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub network: Network<T>,
    pub meta: CheckpointMeta,
    pub log: Vec<LossRecord>,
    /// `(iteration, report)` on the validation set.
    pub evals: Vec<(usize, EvalReport)>,
    /// Mean cross-entropy over the training set before and after, for the classifier stages.
    pub objective: Option<(f64, f64)>,
}

pub fn write_loss_csv(records: &[LossRecord], path: &Path) -> Result<()> {
    let mut out = String::from("iter,stage,lr,loss\n");
    for r in records {
        writeln!(out, "{},{},{},{}", r.iteration, r.stage, r.lr, r.loss).expect("write to string");
    }
    std::fs::write(path, out)?;
    Ok(())
}

type SampleGrad<T> = (f64, Vec<(usize, Vec<T>)>);

fn collect_grads<T: Real>(tape: &mut Tape<T>, loss: Var, params: &[(usize, Var)]) -> Result<SampleGrad<T>> {
    tape.backward(loss)?;
    let value = tape.value(loss).data()[0].as_f64();
    let grads = params
        .iter()
        .map(|&(i, v)| {
            let g = tape
                .take_grad(v)
                .unwrap_or_else(|| vec![T::zero(); tape.value(v).len()]);
            (i, g)
        })
        .collect();
    Ok((value, grads))
}

fn classifier_sample<T: Real>(net: &Network<T>, image: &Image, target: &[f64]) -> Result<SampleGrad<T>> {
    let mut tape = Tape::new();
    let x = tape.leaf(image.to_tensor(), false);
    let pass = net.build(&mut tape, x, Mode::Distill, true)?;
    let target: Vec<T> = target.iter().map(|&v| T::of(v)).collect();
    let loss = tape.cross_entropy_soft(pass.distill_logits.expect("distill mode"), &target)?;
    collect_grads(&mut tape, loss, &pass.params)
}

fn aesthetic_sample<T: Real>(net: &Network<T>, sample: &Sample, cfg: &TrainConfig) -> Result<SampleGrad<T>> {
    let mut tape = Tape::new();
    let x = tape.leaf(sample.image.to_tensor(), false);
    let pass = net.build(&mut tape, x, Mode::Aesthetic, true)?;
    let target: Vec<f64> = match net.config().head.variant {
        HeadVariant::Mean => vec![sample.target.mean()],
        HeadVariant::Dist | HeadVariant::Dual => sample.target.probs().to_vec(),
    };
    let delta = HuberConfig::new(cfg.huber_sigma)?.delta();
    let branch_loss = |tape: &mut Tape<T>, out: Var| match cfg.loss {
        LossKind::Huber => tape.huber(out, &target, delta),
        LossKind::Euclidean => tape.euclidean(out, &target),
    };
    let mut loss = branch_loss(&mut tape, pass.main.expect("aesthetic mode"))?;
    if let Some(gmp) = pass.gmp {
        let second = branch_loss(&mut tape, gmp)?;
        loss = tape.add(loss, second)?;
    }
    collect_grads(&mut tape, loss, &pass.params)
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Mini-batch SGD over `n` examples. Batches walk a per-epoch shuffle, so their composition
/// depends only on (seed, epoch, position); per-sample gradients are reduced in batch order.
fn optimize<T, F>(
    net: &mut Network<T>,
    n: usize,
    cfg: &TrainConfig,
    stage: TrainStage,
    sample_grad: F,
    mut after_step: impl FnMut(usize, &Network<T>) -> Result<()>,
) -> Result<Vec<LossRecord>>
where
    T: Real,
    F: Fn(&Network<T>, usize) -> Result<SampleGrad<T>> + Sync,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::EmptyInput("training set is empty"));
    }
    let opt = &cfg.optimizer;
    let mut state = SgdState::new(net.params());
    let mut log = Vec::with_capacity(cfg.iterations);
    let (mut epoch, mut cursor) = (0u64, 0usize);
    let mut order = epoch_order(n, opt.seed, epoch);
    for iter in 0..cfg.iterations {
        if cursor == n {
            epoch += 1;
            cursor = 0;
            order = epoch_order(n, opt.seed, epoch);
        }
        let end = (cursor + opt.batch_size).min(n);
        let batch = &order[cursor..end];
        cursor = end;

        let frozen = &*net;
        let results = batch
            .par_iter()
            .map(|&i| sample_grad(frozen, i))
            .collect::<Result<Vec<_>>>()?;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; net.params().len()];
        let mut loss = 0.0;
        for (l, sample_grads) in results {
            loss += l;
            for (i, g) in sample_grads {
                match &mut grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let scale = T::of(1.0 / batch.len() as f64);
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v = *v * scale);
        }
        loss /= batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "{stage} loss became non-finite ({loss}) at iteration {iter}"
            )));
        }
        sgd_step(net.params_mut(), &grads, &mut state, opt, iter)?;
        log.push(LossRecord {
            iteration: iter,
            stage,
            lr: lr_at(iter, opt),
            loss,
        });
        after_step(iter + 1, net)?;
    }
    Ok(log)
}

/// Mean soft cross-entropy of the classifier head against `targets`.
pub fn mean_cross_entropy<T: Real>(net: &Network<T>, images: &[Image], targets: &[Vec<f64>]) -> Result<f64> {
    if images.is_empty() || images.len() != targets.len() {
        return Err(Error::shape(
            "mean_cross_entropy",
            format!("{} images for {} targets", images.len(), targets.len()),
        ));
    }
    let total: f64 = images
        .par_iter()
        .zip(targets)
        .map(|(img, s)| {
            let p = net.class_probabilities(img)?;
            Ok(-s.iter().zip(&p).map(|(t, q)| t * q.max(1e-300).ln()).sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum();
    Ok(total / images.len() as f64)
}

fn classifier_stage<T: Real>(
    start: StagedModel<T>,
    images: &[Image],
    targets: &[Vec<f64>],
    cfg: &TrainConfig,
    stage: TrainStage,
) -> Result<(Network<T>, Vec<LossRecord>, (f64, f64))> {
    if start.stage != StageTag::Init {
        return Err(Error::StageOrder(format!(
            "the {stage} stage starts from a freshly initialized network, got a `{:?}` checkpoint",
            start.stage
        )));
    }
    if images.len() != targets.len() {
        return Err(Error::shape(
            "train",
            format!("{} images for {} targets", images.len(), targets.len()),
        ));
    }
    let classes = targets.first().map_or(0, Vec::len);
    let mut net = start.network;
    match net.config().distill_classes {
        None => net.attach_distill_head(classes, cfg.optimizer.seed)?,
        Some(k) if k == classes => {}
        Some(k) => {
            return Err(Error::shape(
                "train",
                format!("classifier head has {k} outputs, targets have {classes} classes"),
            ))
        }
    }
    let initial = mean_cross_entropy(&net, images, targets)?;
    let log = optimize(
        &mut net,
        images.len(),
        cfg,
        stage,
        |n, i| classifier_sample(n, &images[i], &targets[i]),
        |_, _| Ok(()),
    )?;
    let last = mean_cross_entropy(&net, images, targets)?;
    Ok((net, log, (initial, last)))
}

/// Train a classifier on the latent labels; its softmax becomes the teacher targets.
pub fn train_teacher<T: Real>(
    start: StagedModel<T>,
    images: &[Image],
    labels: &[usize],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidAnnotation(format!("label {bad} outside {classes} classes")));
    }
    let one_hot: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| (0..classes).map(|k| if k == l { 1.0 } else { 0.0 }).collect())
        .collect();
    let (network, log, objective) = classifier_stage(start, images, &one_hot, cfg, TrainStage::Teacher)?;
    Ok(TrainOutcome {
        network,
        meta: CheckpointMeta {
            iteration: cfg.iterations,
            stage: StageTag::Teacher,
            seed: cfg.optimizer.seed,
        },
        log,
        evals: Vec::new(),
        objective: Some(objective),
    })
}

/// Fit the classifier head on top of the SPP vector to the teacher's soft targets, then drop
/// the head. Images are matched to targets by position.
pub fn train_distill<T: Real>(
    start: StagedModel<T>,
    images: &[Image],
    targets: &TeacherTargets,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let soft: Vec<Vec<f64>> = (0..targets.len()).map(|i| targets.target(i).to_vec()).collect();
    let (mut network, log, objective) = classifier_stage(start, images, &soft, cfg, TrainStage::Distill)?;
    network.strip_distill_head();
    Ok(TrainOutcome {
        network,
        meta: CheckpointMeta {
            iteration: cfg.iterations,
            stage: StageTag::Distilled,
            seed: cfg.optimizer.seed,
        },
        log,
        evals: Vec::new(),
        objective: Some(objective),
    })
}

/// Score-distribution regression. Refuses to run unless `init` agrees with the stage the
/// network came from. Dual-branch networks get their fusion weight fitted on `val` at the end.
pub fn train_aesthetic<T: Real>(
    start: StagedModel<T>,
    init: InitPolicy,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    match (init, start.stage) {
        (InitPolicy::Distilled, StageTag::Distilled) | (InitPolicy::Scratch, StageTag::Init) => {}
        (InitPolicy::Distilled, found) => {
            return Err(Error::StageOrder(format!(
                "aesthetic training needs a distilled checkpoint, got `{found:?}`; \
                 run the distill stage first or start from scratch explicitly"
            )))
        }
        (InitPolicy::Scratch, found) => {
            return Err(Error::StageOrder(format!(
                "from-scratch aesthetic training needs an untrained network, got `{found:?}`"
            )))
        }
    }
    let mut network = start.network;
    network.strip_distill_head();
    let mut evals = Vec::new();
    let log = optimize(
        &mut network,
        train.len(),
        cfg,
        TrainStage::Aesthetic,
        |n, i| aesthetic_sample(n, &train[i], cfg),
        |iter, net| {
            let due = iter == cfg.iterations || (cfg.eval_every > 0 && iter % cfg.eval_every == 0);
            if due && !val.is_empty() {
                match evaluate(net, val, cfg.threshold) {
                    Ok(report) => {
                        log::info!("iter {iter}: {report:?}");
                        evals.push((iter, report));
                    }
                    Err(Error::DegeneratePrediction(msg)) => log::warn!("iter {iter}: skipped evaluation, {msg}"),
                    Err(e) => return Err(e),
                }
            }
            Ok(())
        },
    )?;
    if network.config().head.variant == HeadVariant::Dual && !val.is_empty() {
        let branches = val
            .par_iter()
            .map(|s| network.forward_branches(&s.image))
            .collect::<Result<Vec<_>>>()?;
        let (spp, gmp): (Vec<RawPrediction>, Vec<RawPrediction>) = branches.into_iter().unzip();
        let gts: Vec<_> = val.iter().map(|s| s.target).collect();
        network.set_fusion(Some(learn_fusion_weight(&spp, &gmp, &gts)?));
    }
    Ok(TrainOutcome {
        network,
        meta: CheckpointMeta {
            iteration: cfg.iterations,
            stage: StageTag::Aesthetic,
            seed: cfg.optimizer.seed,
        },
        log,
        evals,
        objective: None,
    })
}

pub fn predict_all<T: Real>(net: &Network<T>, images: &[&Image]) -> Result<Vec<Prediction>> {
    images.par_iter().map(|img| net.forward(img)).collect()
}

/// Metric bundle of `net` on `samples`; all-zero distribution outputs are an error.
pub fn evaluate<T: Real>(net: &Network<T>, samples: &[Sample], threshold: f64) -> Result<EvalReport> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let gts: Vec<_> = samples.iter().map(|s| s.target).collect();
    let preds = predict_all(net, &images)?;
    match net.config().head.variant {
        HeadVariant::Mean => {
            let means: Vec<f64> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Mean(m) => *m,
                    Prediction::Distribution(_) => unreachable!("mean head"),
                })
                .collect();
            mean_metrics(&means, &gts, threshold)
        }
        HeadVariant::Dist | HeadVariant::Dual => {
            let raw: Vec<RawPrediction> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Distribution(d) => *d,
                    Prediction::Mean(_) => unreachable!("distribution head"),
                })
                .collect();
            dataset_metrics(&raw, &gts, threshold)
        }
    }
}
