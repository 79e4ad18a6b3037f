//! RAdam with warmup, token-budget batching, gradient accumulation and
//! two-stage (many-to-many then many-to-one) orchestration.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{is_lang_tag, subset_for_target, CorpusError, LangId, ParallelCorpus, SentencePair};
use crate::model::{
    loss_sum, save_checkpoint, Batch, CheckpointError, Example, Gradients, LossSum, ModelError, ModelParams,
};
use crate::subword::{SubwordVocab, EOS};
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train plan: {0}")]
    Plan(String),
    #[error("learning-rate step must be >= 1, got {0}")]
    BadStep(usize),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("pair {index}: source is not tagged for its target language {tgt}")]
    Untagged { index: usize, tgt: LangId },
    #[error("finetuning needs a single target language, found {0:?}")]
    MultipleTargets(Vec<String>),
    #[error("non-finite gradient at step {0}")]
    NonFiniteGradient(u64),
    #[error("training loss became non-finite at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            other => Err(TrainError::Plan(format!("unknown stage {other:?}"))),
        }
    }
}

/// Optimizer, schedule and batching settings for one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub init_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub accum: usize,
    pub batch_tokens: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub label_smoothing: f64,
    pub stage: Stage,
    pub seed: u64,
    pub eval_interval: usize,
}

/// Finetuning learning rates offered for sweeps.
pub const FINETUNE_LR_SWEEP: [f64; 3] = [1e-4, 1e-5, 1e-6];

impl TrainPlan {
    /// Desk-scale many-to-many pretraining defaults.
    pub fn pretrain() -> Self {
        Self {
            init_lr: 4e-3,
            warmup_steps: 50,
            total_steps: 500,
            accum: 1,
            batch_tokens: 512,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            label_smoothing: 0.1,
            stage: Stage::Pretrain,
            seed: 1,
            eval_interval: 100,
        }
    }

    /// Desk-scale many-to-one finetuning defaults.
    pub fn finetune() -> Self {
        Self {
            init_lr: 1e-4,
            warmup_steps: 200,
            total_steps: 1000,
            stage: Stage::Finetune,
            ..Self::pretrain()
        }
    }

    /// Full-size pretraining settings (warmup 10k for 12E6D, 30k for 24E12D).
    pub fn full_pretrain(warmup_steps: usize) -> Self {
        Self {
            init_lr: 0.025,
            warmup_steps,
            total_steps: 10 * warmup_steps,
            accum: 16,
            batch_tokens: 3072,
            eval_interval: 1000,
            ..Self::pretrain()
        }
    }

    pub fn full_finetune(init_lr: f64) -> Self {
        Self {
            init_lr,
            warmup_steps: 8000,
            total_steps: 80_000,
            accum: 16,
            batch_tokens: 3072,
            eval_interval: 1000,
            ..Self::finetune()
        }
    }

    /// Named plan presets: `pretrain`, `finetune`, `full-pretrain-12E6D`,
    /// `full-pretrain-24E12D`, `full-finetune`.
    pub fn preset(name: &str) -> Result<Self, TrainError> {
        match name {
            "pretrain" => Ok(Self::pretrain()),
            "finetune" => Ok(Self::finetune()),
            "full-pretrain-12E6D" => Ok(Self::full_pretrain(10_000)),
            "full-pretrain-24E12D" => Ok(Self::full_pretrain(30_000)),
            "full-finetune" => Ok(Self::full_finetune(FINETUNE_LR_SWEEP[0])),
            other => Err(TrainError::Plan(format!("unknown plan preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Plan(m.to_owned()));
        if !(self.init_lr > 0.0 && self.init_lr.is_finite()) {
            return fail("init_lr must be positive");
        }
        if self.warmup_steps == 0 || self.warmup_steps > self.total_steps {
            return fail("need 1 <= warmup_steps <= total_steps");
        }
        if self.accum == 0 || self.batch_tokens == 0 || self.eval_interval == 0 {
            return fail("accum, batch_tokens and eval_interval must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.beta2 == 0.0 {
            return fail("betas must lie in (0, 1)");
        }
        if !(self.eps > 0.0) || !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("eps must be positive and label_smoothing in [0, 1)");
        }
        Ok(())
    }

    /// Parses a flat `key = value` file; absent keys keep `base` values.
    pub fn from_kv_text(text: &str, base: &TrainPlan) -> Result<Self, TrainError> {
        let overrides: toml::Table = text.parse().map_err(|e: toml::de::Error| TrainError::Plan(e.to_string()))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| TrainError::Plan(e.to_string()))?;
        for (k, v) in overrides {
            if !merged.contains_key(&k) {
                return Err(TrainError::Plan(format!("unknown key {k:?}")));
            }
            merged.insert(k, v);
        }
        let plan: TrainPlan = merged.try_into().map_err(|e: toml::de::Error| TrainError::Plan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_kv_text(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }
}

/// Linear warmup to `init_lr`, then `init_lr * sqrt(warmup / step)`.
pub fn lr_at(plan: &TrainPlan, step: usize) -> Result<f64, TrainError> {
    if step < 1 {
        return Err(TrainError::BadStep(step));
    }
    let (s, w) = (step as f64, plan.warmup_steps as f64);
    Ok(if step <= plan.warmup_steps { plan.init_lr * s / w } else { plan.init_lr * (w / s).sqrt() })
}

/// RAdam moments; shapes mirror the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub t: u64,
    pub m: Gradients<T>,
    pub v: Gradients<T>,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self { t: 0, m: params.zeros_like(), v: params.zeros_like() }
    }
}

/// `ρ∞ = 2 / (1 − β2) − 1`.
pub fn rho_inf(beta2: f64) -> f64 {
    2.0 / (1.0 - beta2) - 1.0
}

/// `ρ_t = ρ∞ − 2 t β2^t / (1 − β2^t)`.
pub fn rho_t(beta2: f64, t: u64) -> f64 {
    let b = beta2.powi(t as i32);
    rho_inf(beta2) - 2.0 * t as f64 * b / (1.0 - b)
}

/// One RAdam update of a flat parameter slice at (already incremented)
/// step `t`.
#[allow(clippy::too_many_arguments)]
pub fn radam_update<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let bias1 = 1.0 - beta1.powi(t as i32);
    let bias2 = 1.0 - beta2.powi(t as i32);
    let rho = rho_t(beta2, t);
    let rinf = rho_inf(beta2);
    let eps = T::from_f64_lossy(eps);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + c1 * g;
        v[i] = b2 * v[i] + c2 * g * g;
    }
    if rho > 4.0 {
        let r = ((rho - 4.0) * (rho - 2.0) * rinf / ((rinf - 4.0) * (rinf - 2.0) * rho)).sqrt();
        let step = T::from_f64_lossy(lr * r / bias1);
        let inv_b2 = T::from_f64_lossy(1.0 / bias2);
        for i in 0..params.len() {
            params[i] = params[i] - step * m[i] / ((v[i] * inv_b2).sqrt() + eps);
        }
    } else {
        let step = T::from_f64_lossy(lr / bias1);
        for i in 0..params.len() {
            params[i] = params[i] - step * m[i];
        }
    }
}

/// Applies one rectified-Adam step to every tensor and advances `state.t`.
pub fn radam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &Gradients<T>,
    state: &mut OptState<T>,
    lr: f64,
    plan: &TrainPlan,
) -> Result<(), TrainError> {
    if !grads.all_finite() {
        return Err(TrainError::NonFiniteGradient(state.t + 1));
    }
    state.t += 1;
    let t = state.t;
    let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
    let moments = state.m.tensors_mut().into_iter().zip(state.v.tensors_mut());
    for ((p, g), (m, v)) in tensors.zip(moments) {
        radam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), t, lr, plan.beta1, plan.beta2, plan.eps);
    }
    Ok(())
}

/// Encodes a pair for the model: source ids plus EOS, bare target ids.
pub fn encode_pair(vocab: &SubwordVocab, pair: &SentencePair) -> Example {
    let mut src = vocab.encode(&pair.source);
    src.push(EOS);
    Example { src, tgt: vocab.encode(&pair.target) }
}

/// Checks tagging (and, for finetuning, a single target language), then
/// encodes every pair.
pub fn prepare_examples(corpus: &ParallelCorpus, vocab: &SubwordVocab, stage: Stage) -> Result<Vec<Example>, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    for (index, p) in corpus.pairs().iter().enumerate() {
        let tagged = p.source.last().is_some_and(|t| is_lang_tag(t) && *t == p.tgt_lang.tag());
        if !tagged {
            return Err(TrainError::Untagged { index, tgt: p.tgt_lang.clone() });
        }
    }
    if stage == Stage::Finetune {
        let targets: Vec<String> = corpus.target_sizes().keys().map(|l| l.to_string()).collect();
        if targets.len() > 1 {
            return Err(TrainError::MultipleTargets(targets));
        }
    }
    Ok(corpus.pairs().iter().map(|p| encode_pair(vocab, p)).collect())
}

/// Budget cost of one example: its longer side, counting the EOS shift.
pub fn example_tokens(e: &Example) -> usize {
    e.src.len().max(e.tgt.len() + 1)
}

/// Shuffles with `seed` and greedily packs consecutive examples while the
/// summed [`example_tokens`] stays within `batch_tokens` (an oversized
/// example forms its own batch).
pub fn make_batches(examples: &[Example], batch_tokens: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut used = 0;
    for i in order {
        let cost = example_tokens(&examples[i]);
        if !cur.is_empty() && used + cost > batch_tokens {
            batches.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += cost;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

fn gather(examples: &[Example], idx: &[usize]) -> Batch {
    let rows: Vec<Example> = idx.iter().map(|&i| examples[i].clone()).collect();
    Batch::new(&rows)
}

fn mix(a: u64, b: u64) -> u64 {
    (a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15)).rotate_left(17).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Dev loss (token mean) of `params` on pre-encoded examples.
pub fn dev_loss<T: Scalar>(params: &ModelParams<T>, dev: &[Example], label_smoothing: f64) -> Result<f64, TrainError> {
    let mut sum = LossSum::default();
    for chunk in dev.chunks(256) {
        sum.add(loss_sum(params, &Batch::new(chunk), label_smoothing)?);
    }
    Ok(sum.mean())
}

/// One optimizer update from `accum` micro-batches. Gradients are summed
/// and divided by the total target-token count, which equals one step on
/// the concatenated batch.
pub fn accumulated_step(
    params: &mut ModelParams<f32>,
    state: &mut OptState<f32>,
    micro_batches: &[Batch],
    lr: f64,
    plan: &TrainPlan,
    dropout_seed: u64,
) -> Result<f64, TrainError> {
    let mut sum = LossSum::default();
    let mut grads: Option<Gradients<f32>> = None;
    for (i, b) in micro_batches.iter().enumerate() {
        let (s, g) = crate::model::loss_and_grad_sum(params, b, plan.label_smoothing, mix(dropout_seed, i as u64))?;
        sum.add(s);
        match grads.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads = Some(g),
        }
    }
    let mut grads = grads.ok_or(ModelError::EmptyBatch)?;
    grads.scale(1.0 / sum.tokens as f32);
    radam_step(params, &grads, state, lr, plan)?;
    Ok(sum.mean())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub step: usize,
    pub dev_loss: f64,
    pub path: Option<PathBuf>,
}

/// Index of the lowest dev loss (earliest on ties).
pub fn select_best(records: &[CheckpointRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        if best.is_none_or(|b| r.dev_loss < records[b].dev_loss) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub best: ModelParams<f32>,
    pub best_step: usize,
    pub records: Vec<CheckpointRecord>,
    /// `(step, mean training loss)` for every optimizer step.
    pub train_losses: Vec<(usize, f64)>,
}

/// Trains one stage and returns the parameters of the checkpoint with the
/// lowest dev loss. Dev loss is measured before the first step, every
/// `eval_interval` steps and after the last step. With `out_dir`, each
/// evaluated checkpoint is written to `<out_dir>/<stage>/<step>.ckpt` and
/// the records to `<out_dir>/<stage>/records.tsv`.
pub fn train_stage(
    params: ModelParams<f32>,
    corpus: &ParallelCorpus,
    dev: &ParallelCorpus,
    plan: &TrainPlan,
    vocab: &SubwordVocab,
    out_dir: Option<&Path>,
) -> Result<StageOutcome, TrainError> {
    plan.validate()?;
    let train = prepare_examples(corpus, vocab, plan.stage)?;
    let dev = prepare_examples(dev, vocab, plan.stage)?;
    let stage_dir = match out_dir {
        Some(d) => {
            let p = d.join(plan.stage.name());
            fs::create_dir_all(&p)?;
            Some(p)
        }
        None => None,
    };

    let mut params = params;
    let mut state = OptState::new(&params);
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, ModelParams<f32>)> = None;
    let mut evaluate = |params: &ModelParams<f32>, step: usize, records: &mut Vec<CheckpointRecord>| {
        let loss = dev_loss(params, &dev, plan.label_smoothing)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, loss });
        }
        let path = match &stage_dir {
            Some(dir) => {
                let p = dir.join(format!("{step}.ckpt"));
                save_checkpoint(params, &p)?;
                Some(p)
            }
            None => None,
        };
        records.push(CheckpointRecord { step, dev_loss: loss, path });
        if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
            best = Some((loss, step, params.clone()));
        }
        Ok::<(), TrainError>(())
    };

    evaluate(&params, 0, &mut records)?;
    let mut train_losses = Vec::with_capacity(plan.total_steps);
    let mut epoch = 0u64;
    let mut queue: Vec<Vec<usize>> = Vec::new();
    for step in 1..=plan.total_steps {
        let mut micro = Vec::with_capacity(plan.accum);
        while micro.len() < plan.accum {
            if queue.is_empty() {
                queue = make_batches(&train, plan.batch_tokens, mix(plan.seed, epoch));
                queue.reverse();
                epoch += 1;
            }
            micro.push(gather(&train, &queue.pop().expect("nonempty queue")));
        }
        let lr = lr_at(plan, step)?;
        let loss = match accumulated_step(&mut params, &mut state, &micro, lr, plan, mix(plan.seed ^ 0xd0, step as u64)) {
            Err(TrainError::Model(ModelError::NonFiniteLoss(loss))) => {
                return Err(TrainError::NonFiniteLoss { step, loss })
            }
            other => other?,
        };
        train_losses.push((step, loss));
        if step % plan.eval_interval == 0 || step == plan.total_steps {
            evaluate(&params, step, &mut records)?;
        }
    }

    if let Some(dir) = &stage_dir {
        let mut f = fs::File::create(dir.join("records.tsv"))?;
        writeln!(f, "step\tdev_loss")?;
        for r in &records {
            writeln!(f, "{}\t{:.6}", r.step, r.dev_loss)?;
        }
    }
    let (_, best_step, best) = best.expect("at least one evaluation");
    Ok(StageOutcome { best, best_step, records, train_losses })
}

pub struct TwoStageOutcome {
    pub pretrained: StageOutcome,
    pub finetuned: BTreeMap<LangId, Result<StageOutcome, TrainError>>,
}

/// Pretrains once on `full_corpus`, then finetunes a many-to-one model for
/// every target language in `per_target_dev`. A failing language does not
/// stop the others.
pub fn two_stage(
    params0: ModelParams<f32>,
    full_corpus: &ParallelCorpus,
    per_target_dev: &BTreeMap<LangId, ParallelCorpus>,
    pre_plan: &TrainPlan,
    ft_plan: &TrainPlan,
    vocab: &SubwordVocab,
    out_dir: Option<&Path>,
) -> Result<TwoStageOutcome, TrainError> {
    let all_dev = ParallelCorpus::concat(per_target_dev.values().cloned());
    let pre_plan = TrainPlan { stage: Stage::Pretrain, ..pre_plan.clone() };
    let pretrained = train_stage(params0, full_corpus, &all_dev, &pre_plan, vocab, out_dir)?;
    let ft_plan = TrainPlan { stage: Stage::Finetune, ..ft_plan.clone() };
    let mut finetuned = BTreeMap::new();
    for (lang, dev) in per_target_dev {
        let subset = subset_for_target(full_corpus, lang);
        let dir = out_dir.map(|d| d.join(lang.code()));
        let result = train_stage(pretrained.best.clone(), &subset, dev, &ft_plan, vocab, dir.as_deref());
        finetuned.insert(lang.clone(), result);
    }
    Ok(TwoStageOutcome { pretrained, finetuned })
}
