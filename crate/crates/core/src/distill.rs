//! Sequence-level distillation: a teacher's rank-1 beam outputs replace the
//! reference targets, and a student trains on the result.

use std::path::Path;

use crate::corpus::{ParallelCorpus, SentencePair};
use crate::decode::{decode_corpus, DecodeError, SearchConfig, StepModel};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::subword::SubwordVocab;
use crate::trainer::{train_stage, StageOutcome, TrainError, TrainPlan};

#[derive(Clone, Debug, PartialEq)]
pub struct DistillOutput {
    pub corpus: ParallelCorpus,
    /// Pairs whose decode did not finish or came back empty.
    pub dropped: usize,
}

/// Re-targets every pair with the teacher's best beam output. Sources and
/// direction labels are kept as they are.
pub fn make_distill_corpus<M: StepModel>(
    teacher: &M,
    vocab: &SubwordVocab,
    corpus: &ParallelCorpus,
    cfg: &SearchConfig,
) -> Result<DistillOutput, DecodeError> {
    let decoded = decode_corpus(teacher, vocab, corpus, cfg)?;
    let mut pairs = Vec::with_capacity(decoded.len());
    let mut dropped = 0;
    for d in decoded {
        if !d.hypothesis.finished || d.text.is_empty() {
            dropped += 1;
            continue;
        }
        pairs.push(SentencePair { target: d.text, ..d.pair });
    }
    Ok(DistillOutput { corpus: ParallelCorpus::new(pairs), dropped })
}

/// Comment lines recorded at the top of a distilled corpus file.
pub fn provenance_header(teacher_checksum: u64, cfg: &SearchConfig, input: usize, dropped: usize) -> Vec<String> {
    vec![format!(
        "distilled teacher={teacher_checksum:016x} beam={} alpha={} input={input} emitted={} dropped={dropped}",
        cfg.beam,
        cfg.alpha,
        input - dropped
    )]
}

/// Trains a freshly initialized student (seeded by `plan.seed`) on a
/// distilled corpus.
pub fn train_student(
    student_config: &ModelConfig,
    distill_corpus: &ParallelCorpus,
    dev: &ParallelCorpus,
    plan: &TrainPlan,
    vocab: &SubwordVocab,
    out_dir: Option<&Path>,
) -> Result<StageOutcome, TrainError> {
    student_config.validate()?;
    let params: ModelParams<f32> = init_params(student_config, plan.seed);
    train_stage(params, distill_corpus, dev, plan, vocab, out_dir)
}
