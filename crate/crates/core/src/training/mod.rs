//! Staged training: deblurring pretraining, disparity pretraining, then
//! joint optimisation of the whole model.

mod augment;
mod optim;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::exec;
use crate::losses::{self, ConvFeatures, FeatureExtractor, IdentityExtractor, LossWeights};
use crate::network::{self, write_checkpoint, Builder, Checkpoint, Davanet, ForwardOptions, Subnet};
use crate::synth::StereoSample;
use crate::tensor::Tensor;

pub use augment::{
    augment, epipolar_excess, rng_for, warp_residual, AugmentConfig, AugmentRecord, AugmentedSample, Chroma,
};
pub use optim::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Deblur,
    Disp,
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Deblur => "deblur",
            Stage::Disp => "disp",
            Stage::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        match s {
            "deblur" => Ok(Stage::Deblur),
            "disp" => Ok(Stage::Disp),
            "joint" => Ok(Stage::Joint),
            _ => Err(Error::config(format!("unknown stage `{s}` (expected deblur, disp or joint)"))),
        }
    }

    pub fn trainable(self) -> &'static [Subnet] {
        match self {
            Stage::Deblur => &[Subnet::Deblur],
            Stage::Disp => &[Subnet::Disp],
            Stage::Joint => &Subnet::ALL,
        }
    }

    fn stream(self) -> u64 {
        match self {
            Stage::Deblur => 1,
            Stage::Disp => 2,
            Stage::Joint => 3,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Fixed-seed convolutional stand-in.
    Conv,
    Identity,
}

impl ExtractorKind {
    pub fn build(self) -> Box<dyn FeatureExtractor> {
        match self {
            ExtractorKind::Conv => Box::new(ConvFeatures::default()),
            ExtractorKind::Identity => Box::new(IdentityExtractor),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageBudgets {
    pub deblur: usize,
    pub disp: usize,
    pub joint: usize,
}

impl Default for StageBudgets {
    fn default() -> Self {
        StageBudgets {
            deblur: 500,
            disp: 500,
            joint: 500,
        }
    }
}

impl StageBudgets {
    pub fn get(&self, stage: Stage) -> usize {
        match stage {
            Stage::Deblur => self.deblur,
            Stage::Disp => self.disp,
            Stage::Joint => self.joint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub iterations: StageBudgets,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many iterations (0: only at the end).
    pub checkpoint_interval: usize,
    pub loss_weights: LossWeights,
    pub double_view_sum: bool,
    pub masked_mean: bool,
    /// Weight of the disparity loss in the joint stage.
    pub joint_disp_weight: f64,
    /// Samples whose ground-truth disparity exceeds this are skipped when
    /// pretraining the disparity network.
    pub disp_cap: f64,
    pub extractor: ExtractorKind,
    pub augment: AugmentConfig,
    pub smoothing_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2,
            adam: AdamConfig::default(),
            base_lr: 1e-4,
            decay_factor: 0.5,
            decay_interval: 200,
            iterations: StageBudgets::default(),
            seed: 0,
            checkpoint_interval: 0,
            loss_weights: LossWeights::default(),
            double_view_sum: false,
            masked_mean: false,
            joint_disp_weight: 1.0,
            disp_cap: 90.0,
            extractor: ExtractorKind::Conv,
            augment: AugmentConfig::default(),
            smoothing_window: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("decay_factor must lie in (0, 1]"));
        }
        if self.decay_interval == 0 {
            return Err(Error::config("decay_interval must be positive"));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return Err(Error::config("adam moments must lie in [0, 1) and eps must be positive"));
        }
        if !(self.joint_disp_weight >= 0.0) {
            return Err(Error::config("joint_disp_weight must be non-negative"));
        }
        if self.smoothing_window == 0 {
            return Err(Error::config("smoothing_window must be positive"));
        }
        self.loss_weights.validate()?;
        self.augment.validate()
    }
}

/// Step-decayed learning rate: `base · factor^floor(iteration / interval)`.
pub fn lr_at(iteration: usize, config: &TrainConfig) -> f64 {
    config.base_lr * config.decay_factor.powi((iteration / config.decay_interval) as i32)
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub stage: Stage,
    pub total: f64,
    pub mse: f64,
    pub perceptual: f64,
    pub disp: f64,
}

pub fn write_loss_csv(records: &[LossRecord], path: &Path) -> Result<()> {
    let mut out = String::from("iteration,stage,loss_total,loss_mse,loss_perc,loss_disp\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration, r.stage, r.total, r.mse, r.perceptual, r.disp
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Trailing moving average of the total loss.
pub fn smoothed(records: &[LossRecord], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(records.len());
    let mut acc = 0.0;
    for (i, r) in records.iter().enumerate() {
        acc += r.total;
        if i >= window {
            acc -= records[i - window].total;
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Mean of the first and of the last `window` total losses.
pub fn initial_and_final(records: &[LossRecord], window: usize) -> Option<(f64, f64)> {
    if records.is_empty() {
        return None;
    }
    let k = window.clamp(1, records.len());
    let mean = |rs: &[LossRecord]| rs.iter().map(|r| r.total).sum::<f64>() / rs.len() as f64;
    Some((mean(&records[..k]), mean(&records[records.len() - k..])))
}

/// A training batch stacked along the batch dimension.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub blurry: [Tensor; 2],
    pub sharp: [Tensor; 2],
    pub disp: [Tensor; 2],
    pub mask: [Tensor; 2],
}

impl Batch {
    pub fn from_samples(samples: &[&StereoSample]) -> Result<Batch> {
        let stack = |f: &dyn Fn(&StereoSample) -> Tensor| -> Result<Tensor> {
            let ts: Vec<Tensor> = samples.iter().map(|s| f(s)).collect();
            Tensor::stack(&ts.iter().collect::<Vec<_>>())
        };
        Ok(Batch {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            blurry: [stack(&|s| s.blurry_left.clone())?, stack(&|s| s.blurry_right.clone())?],
            sharp: [stack(&|s| s.sharp_left.clone())?, stack(&|s| s.sharp_right.clone())?],
            disp: [stack(&|s| s.disp_left.to_tensor())?, stack(&|s| s.disp_right.to_tensor())?],
            mask: [stack(&|s| s.mask_left.to_tensor())?, stack(&|s| s.mask_right.to_tensor())?],
        })
    }
}

/// Loss values and parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub record: LossRecord,
    pub grads: Vec<(String, Tensor)>,
}

struct LossVars {
    total: Var,
    mse: Option<Var>,
    perceptual: Option<Var>,
    disp: Option<Var>,
}

fn build_loss(b: &mut Builder, model: &Davanet, stage: Stage, batch: &Batch, config: &TrainConfig, extractor: &dyn FeatureExtractor) -> Result<LossVars> {
    let cfg = &model.config;
    let inputs = [b.input(batch.blurry[0].clone()), b.input(batch.blurry[1].clone())];
    let sharp = [b.input(batch.sharp[0].clone()), b.input(batch.sharp[1].clone())];
    let disp_loss = |b: &mut Builder, pred: [&[Var]; 2]| -> Result<Var> {
        let levels = pred[0].len();
        let (gl, ml) = losses::gt_pyramid(&batch.disp[0], &batch.mask[0], levels)?;
        let (gr, mr) = losses::gt_pyramid(&batch.disp[1], &batch.mask[1], levels)?;
        losses::disparity_loss(&mut b.graph, pred, [&gl, &gr], [&ml, &mr], config.masked_mean)
    };
    match stage {
        Stage::Deblur => {
            let (l, _) = network::deblurnet_forward(b, cfg, inputs[0])?;
            let (r, _) = network::deblurnet_forward(b, cfg, inputs[1])?;
            let d = losses::deblur_loss(&mut b.graph, [l, r], sharp, config.loss_weights, extractor, config.double_view_sum)?;
            Ok(LossVars {
                total: d.total,
                mse: Some(d.mse),
                perceptual: Some(d.perceptual),
                disp: None,
            })
        }
        Stage::Disp => {
            let out = network::dispbinet_forward(b, cfg, inputs[0], inputs[1])?;
            let total = disp_loss(b, [&out.left, &out.right])?;
            Ok(LossVars {
                total,
                mse: None,
                perceptual: None,
                disp: Some(total),
            })
        }
        Stage::Joint => {
            let out = network::davanet_forward(b, cfg, inputs[0], inputs[1], &ForwardOptions::default())?;
            let d = losses::deblur_loss(
                &mut b.graph,
                [out.restored_left, out.restored_right],
                sharp,
                config.loss_weights,
                extractor,
                config.double_view_sum,
            )?;
            let disp = disp_loss(b, [&out.disp.left, &out.disp.right])?;
            let weighted = b.graph.scale(disp, config.joint_disp_weight);
            let total = b.graph.add(d.total, weighted);
            Ok(LossVars {
                total,
                mse: Some(d.mse),
                perceptual: Some(d.perceptual),
                disp: Some(disp),
            })
        }
    }
}

/// Forward and backward pass of `stage`'s objective on one batch.
fn record_of(b: &Builder, vars: &LossVars, stage: Stage, iteration: usize) -> LossRecord {
    let value = |v: Option<Var>| v.map_or(0.0, |v| b.graph.scalar_value(v));
    LossRecord {
        iteration,
        stage,
        total: b.graph.scalar_value(vars.total),
        mse: value(vars.mse),
        perceptual: value(vars.perceptual),
        disp: value(vars.disp),
    }
}

/// Value of `stage`'s objective on one batch, without gradients.
pub fn evaluate_loss(model: &Davanet, stage: Stage, batch: &Batch, config: &TrainConfig, iteration: usize) -> Result<LossRecord> {
    let extractor = config.extractor.build();
    let mut b = model.builder(&[]);
    let vars = build_loss(&mut b, model, stage, batch, config, extractor.as_ref())?;
    Ok(record_of(&b, &vars, stage, iteration))
}

pub fn compute_step(model: &Davanet, stage: Stage, batch: &Batch, config: &TrainConfig, iteration: usize) -> Result<StepResult> {
    let extractor = config.extractor.build();
    let mut b = model.builder(stage.trainable());
    let vars = build_loss(&mut b, model, stage, batch, config, extractor.as_ref())?;
    let record = record_of(&b, &vars, stage, iteration);
    if !record.total.is_finite() {
        return Ok(StepResult {
            record,
            grads: Vec::new(),
        });
    }
    let mut grads = b.graph.backward(vars.total);
    let tracked = b.tracked();
    let grads = tracked
        .into_iter()
        .map(|(name, v)| {
            let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(b.graph.shape(v)));
            (name, g)
        })
        .collect();
    Ok(StepResult { record, grads })
}

/// Checkpoint and loss curve produced by a stage.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRecord>,
    /// Final checkpoint path when an output directory was given.
    pub path: Option<PathBuf>,
}

/// Samples eligible for `stage`.
pub fn stage_samples<'a>(stage: Stage, data: &'a [StereoSample], config: &TrainConfig) -> Vec<&'a StereoSample> {
    data.iter()
        .filter(|s| {
            stage != Stage::Disp || s.disp_left.max_value().max(s.disp_right.max_value()) <= config.disp_cap
        })
        .collect()
}

fn dump_batch(dir: Option<&Path>, stage: Stage, record: &LossRecord, ids: &[String]) -> String {
    let mut msg = format!(
        "non-finite {stage} loss at iteration {} on batch [{}]",
        record.iteration,
        ids.join(", ")
    );
    if let Some(dir) = dir {
        let path = dir.join(format!("nonfinite_{stage}_{}.json", record.iteration));
        let body = serde_json::json!({
            "stage": stage,
            "iteration": record.iteration,
            "sample_ids": ids,
            "loss_total": record.total.to_string(),
            "loss_mse": record.mse.to_string(),
            "loss_perc": record.perceptual.to_string(),
            "loss_disp": record.disp.to_string(),
        });
        if fs::write(&path, serde_json::to_vec_pretty(&body).expect("json")).is_ok() {
            msg.push_str(&format!("; dump written to {}", path.display()));
        }
    }
    msg
}

/// Whether `start` is a valid starting point for `stage`.
pub fn check_start(stage: Stage, start: &Checkpoint) -> Result<()> {
    if stage == Stage::Joint && !(start.has_completed(Stage::Deblur) && start.has_completed(Stage::Disp)) {
        return Err(Error::config(
            "the joint stage needs a checkpoint with both the deblur and disp stages completed",
        ));
    }
    Ok(())
}

/// Run `stage` from `start` for the configured number of iterations.
///
/// When `start` was itself written by `stage`, training resumes at its
/// iteration count (optimizer moments restart from zero). With `out_dir`
/// set, the loss curve is written to `<stage>_loss.csv`, intermediate
/// checkpoints to `<stage>_<iteration>.ckpt` and the final one to
/// `<stage>.ckpt`.
pub fn train_stage(
    stage: Stage,
    start: Checkpoint,
    data: &[StereoSample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<StageOutcome> {
    config.validate()?;
    check_start(stage, &start)?;
    let budget = config.iterations.get(stage);
    let first = if start.header.stage == Some(stage) && !start.has_completed(stage) {
        start.header.iteration.min(budget)
    } else {
        0
    };
    let pool = stage_samples(stage, data, config);
    if pool.is_empty() && first < budget {
        return Err(Error::data(format!("no training samples are eligible for the {stage} stage")));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut ckpt = start;
    let mut adam = Adam::new(config.adam);
    let mut records = Vec::with_capacity(budget - first);
    for it in first..budget {
        let batch = make_batch(stage, &pool, config, it)?;
        let step = compute_step(&ckpt.model, stage, &batch, config, it)?;
        if !step.record.total.is_finite() {
            return Err(Error::Numeric(dump_batch(out_dir, stage, &step.record, &batch.ids)));
        }
        adam.update(&mut ckpt.model.params, &step.grads, lr_at(it, config));
        records.push(step.record);
        log::debug!("{stage} {it}: loss {:.6}", step.record.total);
        if config.checkpoint_interval > 0 && (it + 1) % config.checkpoint_interval == 0 && it + 1 < budget {
            if let Some(dir) = out_dir {
                ckpt.header.stage = Some(stage);
                ckpt.header.iteration = it + 1;
                write_checkpoint(&ckpt, &dir.join(format!("{stage}_{}.ckpt", it + 1)))?;
            }
        }
    }
    ckpt.header.stage = Some(stage);
    ckpt.header.iteration = budget;
    ckpt.header.seed = config.seed;
    if !ckpt.header.completed.contains(&stage) {
        ckpt.header.completed.push(stage);
    }
    let path = match out_dir {
        Some(dir) => {
            let path = dir.join(format!("{stage}.ckpt"));
            write_checkpoint(&ckpt, &path)?;
            write_loss_csv(&records, &dir.join(format!("{stage}_loss.csv")))?;
            Some(path)
        }
        None => None,
    };
    Ok(StageOutcome {
        checkpoint: ckpt,
        losses: records,
        path,
    })
}

/// The augmented batch `stage` trains on at iteration `it`.
fn make_batch(stage: Stage, pool: &[&StereoSample], config: &TrainConfig, it: usize) -> Result<Batch> {
    let bs = config.batch_size;
    let items: Vec<usize> = (0..bs).map(|k| batch_index(config.seed, stage, it, k, bs, pool.len())).collect();
    let augmented = exec::map_indices(bs, |k| {
        let mut rng = rng_for(config.seed, (stage.stream() << 56) ^ ((it as u64) << 16) ^ k as u64);
        augment(pool[items[k]], &config.augment, &mut rng).map(|a| a.sample)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Batch::from_samples(&augmented.iter().collect::<Vec<_>>())
}

/// Losses of `model` under `stage`'s objective on the batches of
/// iterations `its`, without updating it.
pub fn objective_curve(
    stage: Stage,
    model: &Davanet,
    data: &[StereoSample],
    config: &TrainConfig,
    its: std::ops::Range<usize>,
) -> Result<Vec<LossRecord>> {
    let pool = stage_samples(stage, data, config);
    if pool.is_empty() {
        return Err(Error::data(format!("no samples are eligible for the {stage} stage")));
    }
    its.map(|it| {
        let batch = make_batch(stage, &pool, config, it)?;
        evaluate_loss(model, stage, &batch, config, it)
    })
    .collect()
}

/// Sample index for slot `k` of iteration `it`: the pool is walked in a
/// fresh seeded permutation every epoch.
fn batch_index(seed: u64, stage: Stage, it: usize, k: usize, batch: usize, n: usize) -> usize {
    use rand::seq::SliceRandom;
    let flat = it * batch + k;
    let (epoch, pos) = (flat / n, flat % n);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_for(seed ^ stage.stream(), epoch as u64));
    perm[pos]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use crate::synth::{generate_sample, SynthConfig};

    fn data(n: usize) -> Vec<StereoSample> {
        let cfg = SynthConfig {
            width: 16,
            height: 16,
            focal_length_px: 16.0,
            subframe_choices: vec![3],
            supersample: 1,
            ..SynthConfig::default()
        };
        (0..n).map(|i| generate_sample(&cfg, i).unwrap()).collect()
    }

    fn config(iters: usize) -> TrainConfig {
        TrainConfig {
            iterations: StageBudgets {
                deblur: iters,
                disp: iters,
                joint: iters,
            },
            augment: AugmentConfig {
                crop_size: 16,
                ..AugmentConfig::default()
            },
            base_lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn fresh() -> Checkpoint {
        Checkpoint::fresh(Davanet::new(ModelConfig::with_width(4)).unwrap(), 0)
    }

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 1e-4);
        assert_eq!(lr_at(199, &c), 1e-4);
        assert_eq!(lr_at(200, &c), 5e-5);
        assert_eq!(lr_at(400, &c), 2.5e-5);
        let mut prev = f64::INFINITY;
        for it in (0..5000).step_by(37) {
            assert!(lr_at(it, &c) <= prev);
            prev = lr_at(it, &c);
        }
    }

    #[test]
    fn zero_iterations_keep_weights() {
        let d = data(2);
        let start = fresh();
        let out = train_stage(Stage::Deblur, start.clone(), &d, &config(0), None).unwrap();
        assert_eq!(out.checkpoint.model, start.model);
        assert!(out.losses.is_empty());
        assert!(out.checkpoint.has_completed(Stage::Deblur));
    }

    #[test]
    fn deterministic_and_isolated() {
        let d = data(3);
        let a = train_stage(Stage::Deblur, fresh(), &d, &config(4), None).unwrap();
        let b = train_stage(Stage::Deblur, fresh(), &d, &config(4), None).unwrap();
        assert_eq!(a.checkpoint.model, b.checkpoint.model);
        assert_eq!(a.losses, b.losses);
        let start = fresh();
        for (name, t) in a.checkpoint.model.params.iter() {
            let before = start.model.params.get(name).unwrap();
            if Subnet::of(name) != Some(Subnet::Deblur) {
                assert_eq!(t, before, "{name}");
            }
        }
        assert_ne!(a.checkpoint.model, start.model);
        let c = train_stage(Stage::Disp, fresh(), &d, &config(3), None).unwrap();
        for (name, t) in c.checkpoint.model.params.iter() {
            if Subnet::of(name) != Some(Subnet::Disp) {
                assert_eq!(t, start.model.params.get(name).unwrap(), "{name}");
            }
        }
    }

    #[test]
    fn objective_curve_replays_training_batches() {
        let d = data(3);
        let start = fresh();
        let run = train_stage(Stage::Deblur, start.clone(), &d, &config(3), None).unwrap();
        let replay = objective_curve(Stage::Deblur, &start.model, &d, &config(3), 0..1).unwrap();
        assert_eq!(replay[0], run.losses[0]);
        let after = objective_curve(Stage::Deblur, &run.checkpoint.model, &d, &config(3), 0..1).unwrap();
        assert_ne!(after[0], run.losses[0]);
    }

    #[test]
    fn joint_requires_pretraining_and_moves_everything() {
        let d = data(2);
        assert!(matches!(
            train_stage(Stage::Joint, fresh(), &d, &config(1), None),
            Err(Error::Config(_))
        ));
        let a = train_stage(Stage::Deblur, fresh(), &d, &config(2), None).unwrap();
        let b = train_stage(Stage::Disp, a.checkpoint, &d, &config(2), None).unwrap();
        let before = b.checkpoint.clone();
        let j = train_stage(Stage::Joint, b.checkpoint, &d, &config(1), None).unwrap();
        for subnet in Subnet::ALL {
            let changed = j
                .checkpoint
                .model
                .params
                .iter()
                .any(|(n, t)| Subnet::of(n) == Some(subnet) && before.model.params.get(n).unwrap() != t);
            assert!(changed, "{subnet:?} did not move");
        }
        assert_eq!(j.checkpoint.header.completed, vec![Stage::Deblur, Stage::Disp, Stage::Joint]);
    }

    #[test]
    fn disparity_cap_filters_samples() {
        let d = data(4);
        let cfg = TrainConfig {
            disp_cap: 0.0,
            ..config(1)
        };
        assert!(stage_samples(Stage::Disp, &d, &cfg).is_empty());
        assert_eq!(stage_samples(Stage::Deblur, &d, &cfg).len(), 4);
        assert!(matches!(train_stage(Stage::Disp, fresh(), &d, &cfg, None), Err(Error::Data(_))));
    }

    #[test]
    fn non_finite_loss_aborts_with_dump() {
        let mut d = data(1);
        d[0].sharp_left.data_mut()[0] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            augment: AugmentConfig::off(),
            ..config(2)
        };
        match train_stage(Stage::Deblur, fresh(), &d, &cfg, Some(dir.path())) {
            Err(Error::Numeric(msg)) => assert!(msg.contains(&d[0].id), "{msg}"),
            other => panic!("expected numeric failure, got {other:?}"),
        }
        assert!(dir.path().join("nonfinite_deblur_0.json").exists());
    }

    #[test]
    fn outputs_on_disk_and_resume() {
        let d = data(2);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_interval: 2,
            ..config(4)
        };
        let full = train_stage(Stage::Deblur, fresh(), &d, &cfg, Some(dir.path())).unwrap();
        let csv = fs::read_to_string(dir.path().join("deblur_loss.csv")).unwrap();
        assert!(csv.starts_with("iteration,stage,loss_total,loss_mse,loss_perc,loss_disp\n0,deblur,"));
        assert_eq!(csv.lines().count(), 5);
        let mid = network::read_checkpoint(&dir.path().join("deblur_2.ckpt"), None).unwrap();
        assert_eq!(mid.header.iteration, 2);
        let resumed = train_stage(Stage::Deblur, mid, &d, &cfg, None).unwrap();
        assert_eq!(resumed.losses.len(), 2);
        assert_eq!(resumed.losses[0].iteration, 2);
        assert_eq!(resumed.checkpoint.header.iteration, full.checkpoint.header.iteration);
    }

    #[test]
    fn smoothing() {
        let recs: Vec<LossRecord> = (0..6)
            .map(|i| LossRecord {
                iteration: i,
                stage: Stage::Deblur,
                total: i as f64,
                mse: 0.0,
                perceptual: 0.0,
                disp: 0.0,
            })
            .collect();
        assert_eq!(smoothed(&recs, 2), vec![0.0, 0.5, 1.5, 2.5, 3.5, 4.5]);
        assert_eq!(initial_and_final(&recs, 3), Some((1.0, 4.0)));
    }
}
