//! The three-stage procedure end to end: full training, structure probing
//! with frozen weights, masked retraining from the original initialization —
//! plus the privileged-data oracle probe, module introspection, random and
//! magnitude baselines, the two directional ablations and the joint-pruning
//! variant.

use crate::data::{stream_rng, EnvironmentDataset};
use crate::error::{Error, Result};
use crate::mask::{
    gumbel_sigmoid_sample, harden, init_logits, keep_ratio, per_layer_keep_ratio,
    random_mask_global, random_mask_layerwise, relaxed_logit_grad_factor, sparsity_penalty,
    straight_through, BinaryMask, MaskLogits,
};
use crate::nn::{
    backward, build_convnet, commit_bn_stats, forward, forward_tape, init_params, mask_raw_grads,
    optimizer_step, InitSnapshot, MaskMultiplier, Mode, ModelArchitecture, OptimizerConfig,
    OptimizerState, ParamKind, ParamTensor, ParameterSet,
};
use crate::objective::{objective_on_scores, DroState, ObjectiveSpec, RiskKind};
use crate::scalar::{c, Scalar};
use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Curves are recorded every this many steps plus at the final step.
pub const EVAL_CADENCE: usize = 100;
/// Mid-run evaluations use at most this many items per split; the final
/// evaluation always uses the full split.
const EVAL_SUBSET: usize = 256;
// Stages 1 and 3 share this stream salt so an all-ones mask reproduces the
// stage-1 trajectory bitwise.
const WEIGHT_SALT: u64 = 0x57A6;
const PROBE_SALT: u64 = 0xBE77;

/// Where a dataset came from, enforced on the privileged-probe and
/// evaluation paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    SeenTrain,
    OutDomainInSplit,
    OutDomainOutSplit,
}

#[derive(Debug, Clone)]
pub struct TaggedDataset<T: Scalar> {
    pub data: EnvironmentDataset<T>,
    pub provenance: Provenance,
}

/// Training environments plus the held-out domain's probe and evaluation
/// halves.
#[derive(Debug, Clone)]
pub struct PipelineData<T: Scalar> {
    pub train_envs: Vec<EnvironmentDataset<T>>,
    pub probe_split: TaggedDataset<T>,
    pub eval_split: TaggedDataset<T>,
}

impl<T: Scalar> PipelineData<T> {
    /// Splits generated environments into seen training domains and the
    /// (last, unseen) domain's in/out halves.
    pub fn from_environments(
        envs: Vec<EnvironmentDataset<T>>,
        split_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut train_envs: Vec<EnvironmentDataset<T>> = Vec::new();
        let mut held_out = None;
        for env in envs {
            if env.seen {
                train_envs.push(env);
            } else {
                held_out = Some(env);
            }
        }
        let held_out =
            held_out.ok_or_else(|| Error::invalid("no unseen environment in dataset"))?;
        if train_envs.is_empty() {
            return Err(Error::invalid("no seen environments in dataset"));
        }
        let pair = crate::data::split_out_domain(&held_out, split_fraction, seed)?;
        Ok(PipelineData {
            train_envs,
            probe_split: TaggedDataset {
                data: pair.in_split,
                provenance: Provenance::OutDomainInSplit,
            },
            eval_split: TaggedDataset {
                data: pair.out_split,
                provenance: Provenance::OutDomainOutSplit,
            },
        })
    }

    pub fn input_channels(&self) -> usize {
        self.train_envs[0].images.dim().1
    }
}

/// Which label channel a probe or evaluation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelTarget {
    Class,
    Color,
}

/// All step counts, optimizers and mask hyperparameters of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrmConfig {
    pub objective: ObjectiveSpec,
    /// Sparsity penalty coefficient α.
    pub alpha: f64,
    /// Stage-1 and stage-3 step count.
    pub n1: usize,
    /// Stage-2 step count.
    pub n2: usize,
    pub model_optimizer: OptimizerConfig,
    pub logit_optimizer: OptimizerConfig,
    /// Per-environment batch size.
    pub batch_size: usize,
    pub temperature: f64,
    pub init_logit: f64,
    pub seed: u64,
    /// Curve-recording interval in steps.
    pub eval_cadence: usize,
    /// Cap on items per split for the end-of-stage accuracies (mid-run
    /// points are always subsampled); `None` evaluates the full splits.
    pub final_eval_cap: Option<usize>,
}

impl MrmConfig {
    pub fn new(objective: ObjectiveSpec, seed: u64) -> Self {
        MrmConfig {
            objective,
            alpha: 1e-5,
            n1: 2000,
            n2: 2000,
            model_optimizer: OptimizerConfig::sgd_momentum(0.1),
            logit_optimizer: OptimizerConfig::adam(0.1),
            batch_size: 128,
            temperature: 1.0,
            init_logit: 0.0,
            seed,
            eval_cadence: EVAL_CADENCE,
            final_eval_cap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::invalid("alpha must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::invalid("temperature must be positive"));
        }
        if self.eval_cadence == 0 {
            return Err(Error::invalid("eval_cadence must be positive"));
        }
        self.model_optimizer.validate()?;
        self.logit_optimizer.validate()
    }
}

/// JSON cannot represent NaN (stages without an evaluation split report NaN
/// out-domain accuracy), so it round-trips as null.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    #[serde(with = "nan_as_null")]
    pub ood_accuracy: f64,
    pub keep_ratio: Option<f64>,
}

/// What one stage did: loss trace, accuracy curve at the evaluation
/// cadence, final accuracies and (for mask stages) keep ratios.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub losses: Vec<f64>,
    pub curve: Vec<CurvePoint>,
    pub train_env_accuracy: Vec<f64>,
    #[serde(with = "nan_as_null")]
    pub ood_accuracy: f64,
    pub keep_ratio_global: Option<f64>,
    pub keep_ratio_per_layer: Option<Vec<f64>>,
    pub wall_clock_secs: f64,
}

/// Cycles through an environment's items in seeded-shuffle epochs.
struct EnvSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl EnvSampler {
    fn new(n: usize, seed: u64, salt: u64) -> Self {
        let mut s = EnvSampler { order: (0..n).collect(), cursor: 0, rng: stream_rng(seed, salt) };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

fn label_of<T: Scalar>(env: &EnvironmentDataset<T>, i: usize, target: LabelTarget) -> usize {
    match target {
        LabelTarget::Class => env.class_labels[i] as usize,
        LabelTarget::Color => env.color_labels[i] as usize,
    }
}

fn gather_batch<T: Scalar>(
    env: &EnvironmentDataset<T>,
    idx: &[usize],
    target: LabelTarget,
) -> (Array4<T>, Vec<usize>) {
    let (_, ch, h, w) = env.images.dim();
    let mut batch = Array4::zeros((idx.len(), ch, h, w));
    let mut labels = Vec::with_capacity(idx.len());
    for (j, &i) in idx.iter().enumerate() {
        batch.index_axis_mut(Axis(0), j).assign(&env.images.index_axis(Axis(0), i));
        labels.push(label_of(env, i, target));
    }
    (batch, labels)
}

fn argmax_row<T: Scalar>(row: &ndarray::ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy_on<T: Scalar>(
    arch: &ModelArchitecture,
    params: &ParameterSet<T>,
    mask: Option<&MaskMultiplier<T>>,
    env: &EnvironmentDataset<T>,
    target: LabelTarget,
    limit: Option<usize>,
) -> Result<f64> {
    let n = limit.map_or(env.len(), |l| l.min(env.len()));
    if n == 0 {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + 256).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (batch, labels) = gather_batch(env, &idx, target);
        let scores = forward(arch, params, mask, &batch, Mode::Eval)?;
        for (row, &label) in scores.axis_iter(Axis(0)).zip(&labels) {
            if argmax_row(&row) == label {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Argmax-score accuracy of (optionally masked) parameters on a dataset,
/// deterministic (evaluation-mode normalization statistics).
pub fn evaluate<T: Scalar>(
    arch: &ModelArchitecture,
    params: &ParameterSet<T>,
    mask: Option<&BinaryMask>,
    env: &EnvironmentDataset<T>,
    target: LabelTarget,
) -> Result<f64> {
    let mult = mask.map(|m| m.to_multiplier::<T>());
    accuracy_on(arch, params, mult.as_ref(), env, target, None)
}

/// [`evaluate`] with a provenance guard: only the out-domain's evaluation
/// half is accepted.
pub fn evaluate_out<T: Scalar>(
    arch: &ModelArchitecture,
    params: &ParameterSet<T>,
    mask: Option<&BinaryMask>,
    eval: &TaggedDataset<T>,
    target: LabelTarget,
) -> Result<f64> {
    if eval.provenance != Provenance::OutDomainOutSplit {
        return Err(Error::Provenance(format!(
            "evaluation requires the out-domain out-split, got {:?}",
            eval.provenance
        )));
    }
    evaluate(arch, params, mask, &eval.data, target)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// The weight-training loop shared by stages 1 and 3 (and the ablations):
/// per-environment batches, the configured objective, SGD with momentum.
fn train_weights<T: Scalar>(
    arch: &ModelArchitecture,
    params: &mut ParameterSet<T>,
    data: &PipelineData<T>,
    cfg: &MrmConfig,
    steps: usize,
    mask: Option<&MaskMultiplier<T>>,
) -> Result<StageReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut samplers: Vec<EnvSampler> = data
        .train_envs
        .iter()
        .enumerate()
        .map(|(e, env)| EnvSampler::new(env.len(), cfg.seed, WEIGHT_SALT + e as u64))
        .collect();
    let mut opt = OptimizerState::new(cfg.model_optimizer.clone(), params)?;
    let mut dro = matches!(cfg.objective.kind, RiskKind::Dro)
        .then(|| DroState::uniform(data.train_envs.len()));
    let mut losses = Vec::with_capacity(steps);
    let mut curve = Vec::new();

    for step in 0..steps {
        let batches: Vec<(Array4<T>, Vec<usize>)> = data
            .train_envs
            .iter()
            .zip(&mut samplers)
            .map(|(env, s)| gather_batch(env, &s.next_batch(cfg.batch_size), LabelTarget::Class))
            .collect();
        let mut scores = Vec::with_capacity(batches.len());
        let mut tapes = Vec::with_capacity(batches.len());
        for (batch, _) in &batches {
            let (s, t) = forward_tape(arch, params, mask, batch)?;
            scores.push(s);
            tapes.push(t);
        }
        let labels: Vec<Vec<usize>> = batches.iter().map(|(_, l)| l.clone()).collect();
        let obj = objective_on_scores(&cfg.objective, step, &scores, &labels, dro.as_mut())?;
        if !obj.total.is_finite() {
            return Err(Error::NumericalFailure {
                step,
                message: "non-finite objective".into(),
            });
        }
        let mut grads: Option<Vec<ArrayD<T>>> = None;
        for (tape, d_scores) in tapes.into_iter().zip(&obj.d_scores) {
            commit_bn_stats(params, &tape);
            let bw = backward(arch, params, mask, tape, d_scores)?;
            match &mut grads {
                None => grads = Some(bw.grads_effective),
                Some(g) => {
                    for (acc, add) in g.iter_mut().zip(bw.grads_effective) {
                        *acc += &add;
                    }
                }
            }
        }
        let grads = mask_raw_grads(params, mask, grads.expect("at least one environment"));
        optimizer_step(&mut opt, params, &grads, step)?;
        losses.push(obj.total.as_f64());

        if step % cfg.eval_cadence == 0 || step + 1 == steps {
            let train_acc: Vec<f64> = data
                .train_envs
                .iter()
                .map(|env| {
                    accuracy_on(arch, params, mask, env, LabelTarget::Class, Some(EVAL_SUBSET))
                })
                .collect::<Result<_>>()?;
            let ood = accuracy_on(
                arch,
                params,
                mask,
                &data.eval_split.data,
                LabelTarget::Class,
                Some(EVAL_SUBSET),
            )?;
            curve.push(CurvePoint {
                step,
                loss: obj.total.as_f64(),
                train_accuracy: mean(&train_acc),
                ood_accuracy: ood,
                keep_ratio: None,
            });
        }
    }

    let train_env_accuracy: Vec<f64> = data
        .train_envs
        .iter()
        .map(|env| accuracy_on(arch, params, mask, env, LabelTarget::Class, cfg.final_eval_cap))
        .collect::<Result<_>>()?;
    let ood_accuracy =
        accuracy_on(arch, params, mask, &data.eval_split.data, LabelTarget::Class, cfg.final_eval_cap)?;
    Ok(StageReport {
        losses,
        curve,
        train_env_accuracy,
        ood_accuracy,
        keep_ratio_global: None,
        keep_ratio_per_layer: None,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Stage 1: full-model training under the configured objective. The
/// initialization snapshot is taken before the first step and returned
/// untouched.
pub fn stage1_train<T: Scalar>(
    arch: &ModelArchitecture,
    mut params: ParameterSet<T>,
    data: &PipelineData<T>,
    cfg: &MrmConfig,
) -> Result<(ParameterSet<T>, InitSnapshot<T>, StageReport)> {
    let snapshot = InitSnapshot::take(&params, cfg.seed);
    let report = train_weights(arch, &mut params, data, cfg, cfg.n1, None)?;
    Ok((params, snapshot, report))
}

fn logits_to_params<T: Scalar>(logits: &MaskLogits<T>) -> Result<ParameterSet<T>> {
    ParameterSet::new(
        logits
            .names
            .iter()
            .zip(&logits.layers)
            .map(|(name, l)| ParamTensor {
                name: name.clone(),
                kind: ParamKind::Weight,
                values: l.clone(),
            })
            .collect(),
    )
}

fn params_to_logits<T: Scalar>(params: &ParameterSet<T>) -> MaskLogits<T> {
    MaskLogits {
        names: params.maskable_names(),
        layers: params.maskable().iter().map(|p| p.values.clone()).collect(),
    }
}

/// Stage 2: structure probing. Model weights stay frozen; each step samples
/// a fresh relaxed mask, runs the objective on the straight-through masked
/// forward pass plus the sparsity penalty, and updates the logits only.
pub fn stage2_probe<T: Scalar>(
    arch: &ModelArchitecture,
    frozen: &ParameterSet<T>,
    probe_envs: &[&EnvironmentDataset<T>],
    target: LabelTarget,
    eval_split: Option<&TaggedDataset<T>>,
    cfg: &MrmConfig,
) -> Result<(MaskLogits<T>, StageReport)> {
    cfg.validate()?;
    if probe_envs.is_empty() {
        return Err(Error::invalid("probing needs at least one environment"));
    }
    let start = Instant::now();
    let mut samplers: Vec<EnvSampler> = probe_envs
        .iter()
        .enumerate()
        .map(|(e, env)| EnvSampler::new(env.len(), cfg.seed, PROBE_SALT + e as u64))
        .collect();
    let mut logit_params = logits_to_params(&init_logits(frozen, cfg.init_logit))?;
    let mut opt = OptimizerState::new(cfg.logit_optimizer.clone(), &logit_params)?;
    let mut gumbel_rng = stream_rng(cfg.seed, PROBE_SALT ^ 0xFFFF);
    let mut dro =
        matches!(cfg.objective.kind, RiskKind::Dro).then(|| DroState::uniform(probe_envs.len()));
    let weights: Vec<ArrayD<T>> =
        frozen.maskable().iter().map(|p| p.values.clone()).collect();
    let alpha = c::<T>(cfg.alpha);
    let mut losses = Vec::with_capacity(cfg.n2);
    let mut curve = Vec::new();

    for step in 0..cfg.n2 {
        let logits = params_to_logits(&logit_params);
        let relaxed = gumbel_sigmoid_sample(&logits, cfg.temperature, &mut gumbel_rng)?;
        let mult = straight_through(&relaxed);
        let factor = relaxed_logit_grad_factor(&relaxed);

        let batches: Vec<(Array4<T>, Vec<usize>)> = probe_envs
            .iter()
            .zip(&mut samplers)
            .map(|(env, s)| gather_batch(env, &s.next_batch(cfg.batch_size), target))
            .collect();
        let mut scores = Vec::with_capacity(batches.len());
        let mut tapes = Vec::with_capacity(batches.len());
        for (batch, _) in &batches {
            let (s, t) = forward_tape(arch, frozen, Some(&mult), batch)?;
            scores.push(s);
            tapes.push(t);
        }
        let labels: Vec<Vec<usize>> = batches.iter().map(|(_, l)| l.clone()).collect();
        let obj = objective_on_scores(&cfg.objective, step, &scores, &labels, dro.as_mut())?;
        let total = obj.total + sparsity_penalty(&logits, cfg.alpha);
        if !total.is_finite() {
            return Err(Error::NumericalFailure {
                step,
                message: "non-finite probing objective".into(),
            });
        }

        // d(total)/dπ = d(total)/d(w_eff) ⊙ w ⊙ relaxed(1−relaxed)/τ + α
        let mut logit_grads: Option<Vec<ArrayD<T>>> = None;
        for (tape, d_scores) in tapes.into_iter().zip(&obj.d_scores) {
            let bw = backward(arch, frozen, Some(&mult), tape, d_scores)?;
            let maskable_grads = maskable_effective_grads(frozen, bw.grads_effective);
            match &mut logit_grads {
                None => logit_grads = Some(maskable_grads),
                Some(g) => {
                    for (acc, add) in g.iter_mut().zip(maskable_grads) {
                        *acc += &add;
                    }
                }
            }
        }
        let mut logit_grads = logit_grads.expect("at least one environment");
        for ((g, w), f) in logit_grads.iter_mut().zip(&weights).zip(&factor) {
            ndarray::Zip::from(g).and(w).and(f).for_each(|g, &w, &f| {
                *g = *g * w * f + alpha;
            });
        }
        optimizer_step(&mut opt, &mut logit_params, &logit_grads, step)?;
        losses.push(total.as_f64());

        if step % cfg.eval_cadence == 0 || step + 1 == cfg.n2 {
            let hard = harden(&params_to_logits(&logit_params));
            let hard_mult = hard.to_multiplier::<T>();
            let train_acc: Vec<f64> = probe_envs
                .iter()
                .map(|env| {
                    accuracy_on(arch, frozen, Some(&hard_mult), env, target, Some(EVAL_SUBSET))
                })
                .collect::<Result<_>>()?;
            let ood = match eval_split {
                Some(eval) => accuracy_on(
                    arch,
                    frozen,
                    Some(&hard_mult),
                    &eval.data,
                    target,
                    Some(EVAL_SUBSET),
                )?,
                None => f64::NAN,
            };
            curve.push(CurvePoint {
                step,
                loss: total.as_f64(),
                train_accuracy: mean(&train_acc),
                ood_accuracy: ood,
                keep_ratio: Some(keep_ratio(&hard)),
            });
        }
    }

    let logits = params_to_logits(&logit_params);
    let hard = harden(&logits);
    let hard_mult = hard.to_multiplier::<T>();
    let train_env_accuracy: Vec<f64> = probe_envs
        .iter()
        .map(|env| accuracy_on(arch, frozen, Some(&hard_mult), env, target, cfg.final_eval_cap))
        .collect::<Result<_>>()?;
    let ood_accuracy = match eval_split {
        Some(eval) => accuracy_on(arch, frozen, Some(&hard_mult), &eval.data, target, cfg.final_eval_cap)?,
        None => f64::NAN,
    };
    let report = StageReport {
        losses,
        curve,
        train_env_accuracy,
        ood_accuracy,
        keep_ratio_global: Some(keep_ratio(&hard)),
        keep_ratio_per_layer: Some(per_layer_keep_ratio(&hard)),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((logits, report))
}

/// The effective-weight gradients of just the maskable tensors, in mask
/// layer order.
fn maskable_effective_grads<T: Scalar>(
    params: &ParameterSet<T>,
    grads_effective: Vec<ArrayD<T>>,
) -> Vec<ArrayD<T>> {
    params
        .trainable_indices()
        .into_iter()
        .zip(grads_effective)
        .filter(|(pi, _)| params.params()[*pi].kind.maskable())
        .map(|(_, g)| g)
        .collect()
}

/// Stage 3: restore the initialization snapshot exactly, then train under a
/// fixed binary mask. Masked-out weights contribute nothing to any forward
/// pass and receive exactly zero gradient.
pub fn stage3_retrain<T: Scalar>(
    arch: &ModelArchitecture,
    snapshot: &InitSnapshot<T>,
    mask: &BinaryMask,
    data: &PipelineData<T>,
    cfg: &MrmConfig,
) -> Result<(ParameterSet<T>, StageReport)> {
    let mut params = snapshot.restore();
    let mult = mask.to_multiplier::<T>();
    let mut report = train_weights(arch, &mut params, data, cfg, cfg.n1, Some(&mult))?;
    report.keep_ratio_global = Some(keep_ratio(mask));
    report.keep_ratio_per_layer = Some(per_layer_keep_ratio(mask));
    Ok((params, report))
}

/// Everything a three-stage run produces, including the stage-1 artifacts
/// so oracle and baseline runs can share them.
#[derive(Debug, Clone)]
pub struct MrmArtifacts<T: Scalar> {
    pub arch: ModelArchitecture,
    pub snapshot: InitSnapshot<T>,
    pub stage1_params: ParameterSet<T>,
    pub stage1: StageReport,
    pub logits: MaskLogits<T>,
    pub stage2: StageReport,
    pub mask: BinaryMask,
    pub final_params: ParameterSet<T>,
    pub stage3: StageReport,
}

/// The full three-stage procedure with a shared seed.
pub fn run_mrm<T: Scalar>(cfg: &MrmConfig, data: &PipelineData<T>) -> Result<MrmArtifacts<T>> {
    let (arch, params) = build_convnet::<T>(data.input_channels(), 10, cfg.seed)?;
    let (stage1_params, snapshot, stage1) = stage1_train(&arch, params, data, cfg)?;
    run_mrm_from_stage1(cfg, data, arch, stage1_params, snapshot, stage1)
}

/// Stages 2 and 3 on top of an existing stage-1 run.
pub fn run_mrm_from_stage1<T: Scalar>(
    cfg: &MrmConfig,
    data: &PipelineData<T>,
    arch: ModelArchitecture,
    stage1_params: ParameterSet<T>,
    snapshot: InitSnapshot<T>,
    stage1: StageReport,
) -> Result<MrmArtifacts<T>> {
    let probe_envs: Vec<&EnvironmentDataset<T>> = data.train_envs.iter().collect();
    let (logits, stage2) = stage2_probe(
        &arch,
        &stage1_params,
        &probe_envs,
        LabelTarget::Class,
        Some(&data.eval_split),
        cfg,
    )?;
    let mask = harden(&logits);
    let (final_params, stage3) = stage3_retrain(&arch, &snapshot, &mask, data, cfg)?;
    Ok(MrmArtifacts {
        arch,
        snapshot,
        stage1_params,
        stage1,
        logits,
        stage2,
        mask,
        final_params,
        stage3,
    })
}

/// Probe a mask on the out-domain's in-split — privileged data, allowed
/// here and only here. Evaluation of the result must use the out-split.
pub fn oracle_probe<T: Scalar>(
    arch: &ModelArchitecture,
    trained: &ParameterSet<T>,
    probe: &TaggedDataset<T>,
    cfg: &MrmConfig,
) -> Result<(BinaryMask, StageReport)> {
    if probe.provenance != Provenance::OutDomainInSplit {
        return Err(Error::Provenance(format!(
            "oracle probing requires the out-domain in-split, got {:?}",
            probe.provenance
        )));
    }
    let (logits, report) =
        stage2_probe(arch, trained, &[&probe.data], LabelTarget::Class, None, cfg)?;
    Ok((harden(&logits), report))
}

/// Probe a subnetwork for one semantic task (digit class or color) and
/// report its accuracy on the evaluation split for that task.
pub fn module_introspection<T: Scalar>(
    arch: &ModelArchitecture,
    trained: &ParameterSet<T>,
    probe_envs: &[&EnvironmentDataset<T>],
    target: LabelTarget,
    eval_split: &TaggedDataset<T>,
    cfg: &MrmConfig,
) -> Result<(BinaryMask, f64)> {
    if matches!(target, LabelTarget::Color)
        && probe_envs.iter().any(|env| env.color_labels.len() != env.len())
    {
        return Err(Error::invalid("color probing needs color labels"));
    }
    let (logits, _) = stage2_probe(arch, trained, probe_envs, target, None, cfg)?;
    let mask = harden(&logits);
    let acc = evaluate_out(arch, trained, Some(&mask), eval_split, target)?;
    Ok((mask, acc))
}

/// Retrain from the snapshot under random masks matching the reference's
/// global ratio (`rand_whole`) and per-layer ratios (`rand_layer`).
pub fn run_random_baselines<T: Scalar>(
    arch: &ModelArchitecture,
    snapshot: &InitSnapshot<T>,
    reference: &BinaryMask,
    data: &PipelineData<T>,
    cfg: &MrmConfig,
) -> Result<((BinaryMask, StageReport), (BinaryMask, StageReport))> {
    let mut rng = stream_rng(cfg.seed, 0x4A4D);
    let shapes: Vec<Vec<usize>> =
        reference.layers.iter().map(|l| l.shape().to_vec()).collect();
    let whole =
        random_mask_global(reference.names.clone(), &shapes, keep_ratio(reference), &mut rng)?;
    let layer = random_mask_layerwise(reference, &mut rng);
    let (_, whole_report) = stage3_retrain(arch, snapshot, &whole, data, cfg)?;
    let (_, layer_report) = stage3_retrain(arch, snapshot, &layer, data, cfg)?;
    Ok(((whole, whole_report), (layer, layer_report)))
}

/// Does the mask still win from a fresh initialization? Retrains under the
/// given mask from a new seed's random weights.
pub fn ablation_reinit<T: Scalar>(
    arch: &ModelArchitecture,
    mask: &BinaryMask,
    data: &PipelineData<T>,
    cfg: &MrmConfig,
    fresh_seed: u64,
) -> Result<(ParameterSet<T>, StageReport)> {
    if fresh_seed == cfg.seed {
        return Err(Error::invalid("reinitialization needs a seed distinct from the original"));
    }
    let params = init_params::<T>(arch, fresh_seed)?;
    let snapshot = InitSnapshot::take(&params, fresh_seed);
    stage3_retrain(arch, &snapshot, mask, data, cfg)
}

/// Does the mask merely memorize the bias mapping? Retrains from the
/// ORIGINAL snapshot under the given mask on data with a rearranged bias.
pub fn ablation_rebias<T: Scalar>(
    arch: &ModelArchitecture,
    snapshot: &InitSnapshot<T>,
    mask: &BinaryMask,
    rebias_data: &PipelineData<T>,
    cfg: &MrmConfig,
) -> Result<(ParameterSet<T>, StageReport)> {
    stage3_retrain(arch, snapshot, mask, rebias_data, cfg)
}

#[derive(Debug, Clone)]
pub struct JointPruneOutcome<T: Scalar> {
    pub mask: BinaryMask,
    pub target_reached: bool,
    pub prune_steps: usize,
    pub retrained: ParameterSet<T>,
    pub retrain_report: StageReport,
}

/// Joint pruning: update weights and mask logits together each step and
/// stop once the hardened keep ratio is at or below the target, then
/// retrain from the initialization under the frozen mask. If the target is
/// not reached within the `n2` step budget the best (sparsest) mask found
/// is used and `target_reached` is false.
pub fn joint_prune<T: Scalar>(
    data: &PipelineData<T>,
    cfg: &MrmConfig,
    target_keep_ratio: f64,
) -> Result<JointPruneOutcome<T>> {
    if !(0.0 < target_keep_ratio && target_keep_ratio <= 1.0) {
        return Err(Error::invalid("target keep ratio must be in (0,1]"));
    }
    cfg.validate()?;
    let (arch, mut params) = build_convnet::<T>(data.input_channels(), 10, cfg.seed)?;
    let snapshot = InitSnapshot::take(&params, cfg.seed);
    // A positive starting logit so the initial hardened mask is all-ones.
    let mut logit_params = logits_to_params(&init_logits(&params, 0.5))?;
    let mut w_opt = OptimizerState::new(cfg.model_optimizer.clone(), &params)?;
    let mut l_opt = OptimizerState::new(cfg.logit_optimizer.clone(), &logit_params)?;
    let mut samplers: Vec<EnvSampler> = data
        .train_envs
        .iter()
        .enumerate()
        .map(|(e, env)| EnvSampler::new(env.len(), cfg.seed, 0x0901 + e as u64))
        .collect();
    let mut gumbel_rng = stream_rng(cfg.seed, 0x0901 ^ 0xFFFF);
    let mut dro = matches!(cfg.objective.kind, RiskKind::Dro)
        .then(|| DroState::uniform(data.train_envs.len()));
    let alpha = c::<T>(cfg.alpha);

    let mut best_mask = harden(&params_to_logits(&logit_params));
    let mut target_reached = keep_ratio(&best_mask) <= target_keep_ratio;
    let mut steps_used = 0usize;
    while !target_reached && steps_used < cfg.n2 {
        let step = steps_used;
        let logits = params_to_logits(&logit_params);
        let relaxed = gumbel_sigmoid_sample(&logits, cfg.temperature, &mut gumbel_rng)?;
        let mult = straight_through(&relaxed);
        let factor = relaxed_logit_grad_factor(&relaxed);
        let batches: Vec<(Array4<T>, Vec<usize>)> = data
            .train_envs
            .iter()
            .zip(&mut samplers)
            .map(|(env, s)| gather_batch(env, &s.next_batch(cfg.batch_size), LabelTarget::Class))
            .collect();
        let mut scores = Vec::with_capacity(batches.len());
        let mut tapes = Vec::with_capacity(batches.len());
        for (batch, _) in &batches {
            let (s, t) = forward_tape(&arch, &params, Some(&mult), batch)?;
            scores.push(s);
            tapes.push(t);
        }
        let labels: Vec<Vec<usize>> = batches.iter().map(|(_, l)| l.clone()).collect();
        let obj = objective_on_scores(&cfg.objective, step, &scores, &labels, dro.as_mut())?;
        if !obj.total.is_finite() {
            return Err(Error::NumericalFailure {
                step,
                message: "non-finite pruning objective".into(),
            });
        }
        let mut eff: Option<Vec<ArrayD<T>>> = None;
        for (tape, d_scores) in tapes.into_iter().zip(&obj.d_scores) {
            commit_bn_stats(&mut params, &tape);
            let bw = backward(&arch, &params, Some(&mult), tape, d_scores)?;
            match &mut eff {
                None => eff = Some(bw.grads_effective),
                Some(g) => {
                    for (acc, add) in g.iter_mut().zip(bw.grads_effective) {
                        *acc += &add;
                    }
                }
            }
        }
        let eff = eff.expect("at least one environment");
        let mut logit_grads = maskable_effective_grads(&params, eff.clone());
        let weights: Vec<ArrayD<T>> = params.maskable().iter().map(|p| p.values.clone()).collect();
        for ((g, w), f) in logit_grads.iter_mut().zip(&weights).zip(&factor) {
            ndarray::Zip::from(g).and(w).and(f).for_each(|g, &w, &f| {
                *g = *g * w * f + alpha;
            });
        }
        let w_grads = mask_raw_grads(&params, Some(&mult), eff);
        optimizer_step(&mut w_opt, &mut params, &w_grads, step)?;
        optimizer_step(&mut l_opt, &mut logit_params, &logit_grads, step)?;
        steps_used += 1;
        let hard = harden(&params_to_logits(&logit_params));
        if keep_ratio(&hard) <= keep_ratio(&best_mask) {
            best_mask = hard;
        }
        target_reached = keep_ratio(&best_mask) <= target_keep_ratio;
    }

    let (retrained, retrain_report) = stage3_retrain(&arch, &snapshot, &best_mask, data, cfg)?;
    Ok(JointPruneOutcome {
        mask: best_mask,
        target_reached,
        prune_steps: steps_used,
        retrained,
        retrain_report,
    })
}

/// The hardened stage-2 mask applied directly to the stage-1 weights — the
/// "without stage 3" variant of the procedure.
pub fn masked_stage1_accuracy<T: Scalar>(
    artifacts: &MrmArtifacts<T>,
    data: &PipelineData<T>,
) -> Result<f64> {
    evaluate_out(
        &artifacts.arch,
        &artifacts.stage1_params,
        Some(&artifacts.mask),
        &data.eval_split,
        LabelTarget::Class,
    )
}

// Re-exported so callers can stack scores for custom evaluations.
pub fn forward_scores<T: Scalar>(
    arch: &ModelArchitecture,
    params: &ParameterSet<T>,
    mask: Option<&BinaryMask>,
    batch: &Array4<T>,
) -> Result<Array2<T>> {
    let mult = mask.map(|m| m.to_multiplier::<T>());
    forward(arch, params, mult.as_ref(), batch, Mode::Eval)
}
