//! Greedy and beam-search decoding, and two-hop pivot translation.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{LangId, ParallelCorpus, SentencePair};
use crate::model::{decode_step, encode, DecoderCache, EncoderMemory, ModelError, ModelParams};
use crate::subword::{SubwordVocab, VocabError, BOS, EOS};
use crate::tensor::Scalar;
use crate::trainer::encode_pair;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("beam size must be >= 1")]
    ZeroBeam,
    #[error("max_len must be >= 1")]
    ZeroMaxLen,
    #[error("no language tag for {0} in the vocabulary")]
    MissingTag(LangId),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Autoregressive scorer: anything that yields next-token log-probabilities.
pub trait StepModel: Sync {
    type State: Clone + Send;

    fn vocab_size(&self) -> usize;

    /// Upper bound on tokens fed to [`StepModel::advance`] per sentence.
    fn max_steps(&self) -> usize {
        usize::MAX
    }

    /// Prepares decoding of `src`; nothing has been fed yet.
    fn start(&self, src: &[u32]) -> Result<Self::State, DecodeError>;

    /// Feeds `token` and returns log-probabilities for the next token.
    fn advance(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>, DecodeError>;
}

#[derive(Clone, Debug)]
pub struct TransformerState<T> {
    memory: Arc<EncoderMemory<T>>,
    cache: DecoderCache<T>,
}

impl<T: Scalar> StepModel for ModelParams<T> {
    type State = TransformerState<T>;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_steps(&self) -> usize {
        self.config.max_len
    }

    fn start(&self, src: &[u32]) -> Result<Self::State, DecodeError> {
        Ok(TransformerState { memory: Arc::new(encode(self, src)?), cache: DecoderCache::new(self) })
    }

    fn advance(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>, DecodeError> {
        let lp = decode_step(self, &state.memory, &mut state.cache, token)?;
        Ok(lp.into_iter().map(Scalar::as_f64).collect())
    }
}

/// A decoded sequence. `ids` starts with BOS and, when `finished`, ends
/// with EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<u32>,
    pub logprob: f64,
    pub normalized_score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens, counting EOS but not BOS.
    pub fn len(&self) -> usize {
        self.ids.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ids without BOS/EOS.
    pub fn content(&self) -> &[u32] {
        let body = &self.ids[1..];
        body.strip_suffix(&[EOS]).unwrap_or(body)
    }
}

/// `logprob / len^alpha`.
pub fn normalized(logprob: f64, len: usize, alpha: f64) -> f64 {
    logprob / (len as f64).powf(alpha)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub beam: usize,
    /// Maximum generated tokens including EOS; `None` means
    /// `2 * src_len + 8`.
    pub max_len: Option<usize>,
    pub alpha: f64,
    /// Smallest id that may be generated besides EOS (keeps specials and
    /// language tags out of outputs).
    pub min_content_id: u32,
}

pub const DEFAULT_ALPHA: f64 = 0.6;

impl SearchConfig {
    pub fn new(beam: usize, min_content_id: u32) -> Self {
        Self { beam, max_len: None, alpha: DEFAULT_ALPHA, min_content_id }
    }

    /// Beam search that never emits specials or tags of `vocab`.
    pub fn for_vocab(beam: usize, vocab: &SubwordVocab) -> Self {
        Self::new(beam, vocab.num_specials() as u32)
    }

    pub fn with_alpha(self, alpha: f64) -> Self {
        Self { alpha, ..self }
    }

    pub fn with_max_len(self, max_len: usize) -> Self {
        Self { max_len: Some(max_len), ..self }
    }

    pub fn resolved_max_len(&self, src_len: usize) -> usize {
        self.max_len.unwrap_or(2 * src_len + 8)
    }
}

pub fn default_max_len(src_len: usize) -> usize {
    2 * src_len + 8
}

fn generatable(id: u32, min_content_id: u32) -> bool {
    id == EOS || id >= min_content_id
}

fn step_limit<M: StepModel>(model: &M, src: &[u32], cfg: &SearchConfig) -> Result<usize, DecodeError> {
    let limit = cfg.resolved_max_len(src.len()).min(model.max_steps());
    if limit == 0 {
        return Err(DecodeError::ZeroMaxLen);
    }
    Ok(limit)
}

/// Argmax decoding, one token at a time.
pub fn greedy_decode<M: StepModel>(model: &M, src: &[u32], cfg: &SearchConfig) -> Result<Hypothesis, DecodeError> {
    let limit = step_limit(model, src, cfg)?;
    let mut state = model.start(src)?;
    let mut ids = vec![BOS];
    let mut logprob = 0.0;
    let mut lp = model.advance(&mut state, BOS)?;
    loop {
        let (tok, score) = lp
            .iter()
            .enumerate()
            .filter(|&(i, _)| generatable(i as u32, cfg.min_content_id))
            .fold((0u32, f64::NEG_INFINITY), |best, (i, &s)| if s > best.1 { (i as u32, s) } else { best });
        ids.push(tok);
        logprob += score;
        let done = tok == EOS;
        if done || ids.len() - 1 == limit {
            let len = ids.len() - 1;
            return Ok(Hypothesis { ids, logprob, normalized_score: normalized(logprob, len, cfg.alpha), finished: done });
        }
        lp = model.advance(&mut state, tok)?;
    }
}

struct Active<S> {
    ids: Vec<u32>,
    logprob: f64,
    state: S,
    next: Vec<f64>,
}

fn rank(hyps: &mut [Hypothesis]) {
    hyps.sort_by(|a, b| {
        b.normalized_score
            .total_cmp(&a.normalized_score)
            .then(b.logprob.total_cmp(&a.logprob))
            .then(a.ids.cmp(&b.ids))
    });
}

/// Beam search with length-normalized final ranking.
///
/// At each step every active hypothesis proposes its extensions. EOS
/// finishes a hypothesis when it ranks within that hypothesis's own top
/// `beam` extensions. The best `beam` non-EOS extensions overall stay
/// active, ordered by score, then token id, then hypothesis index. Search
/// ends at `max_len`, when nothing is active, or once `beam` hypotheses
/// have finished and no active one has a higher raw log-probability than
/// the `beam`-th best finished one. Returns up to `beam` finished
/// hypotheses best first, or the best unfinished one (flagged) if none
/// finished.
pub fn beam_search<M: StepModel>(model: &M, src: &[u32], cfg: &SearchConfig) -> Result<Vec<Hypothesis>, DecodeError> {
    if cfg.beam == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    let limit = step_limit(model, src, cfg)?;
    let mut state = model.start(src)?;
    let next = model.advance(&mut state, BOS)?;
    let mut active = vec![Active { ids: vec![BOS], logprob: 0.0, state, next }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for depth in 1..=limit {
        // (score, token, parent)
        let mut pool: Vec<(f64, u32, usize)> = Vec::new();
        for (h, a) in active.iter().enumerate() {
            let mut ext: Vec<(f64, u32)> = a
                .next
                .iter()
                .enumerate()
                .filter(|&(i, _)| generatable(i as u32, cfg.min_content_id))
                .map(|(i, &lp)| (a.logprob + lp, i as u32))
                .collect();
            ext.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            ext.truncate(cfg.beam);
            for (score, tok) in ext {
                if tok == EOS {
                    let mut ids = a.ids.clone();
                    ids.push(EOS);
                    finished.push(Hypothesis {
                        ids,
                        logprob: score,
                        normalized_score: normalized(score, depth, cfg.alpha),
                        finished: true,
                    });
                } else {
                    pool.push((score, tok, h));
                }
            }
        }
        pool.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        pool.truncate(cfg.beam);

        let stop = if finished.len() >= cfg.beam {
            let mut lps: Vec<f64> = finished.iter().map(|h| h.logprob).collect();
            lps.sort_by(|a, b| b.total_cmp(a));
            let threshold = lps[cfg.beam - 1];
            pool.first().is_none_or(|best| best.0 <= threshold)
        } else {
            pool.is_empty()
        };
        if stop || depth == limit {
            if finished.is_empty() {
                let mut unfinished: Vec<Hypothesis> = pool
                    .iter()
                    .map(|&(score, tok, h)| {
                        let mut ids = active[h].ids.clone();
                        ids.push(tok);
                        Hypothesis { ids, logprob: score, normalized_score: normalized(score, depth, cfg.alpha), finished: false }
                    })
                    .collect();
                rank(&mut unfinished);
                unfinished.truncate(1);
                return Ok(unfinished);
            }
            break;
        }

        let mut next_active = Vec::with_capacity(pool.len());
        for &(score, tok, h) in &pool {
            let parent = &active[h];
            let mut state = parent.state.clone();
            let next = model.advance(&mut state, tok)?;
            let mut ids = parent.ids.clone();
            ids.push(tok);
            next_active.push(Active { ids, logprob: score, state, next });
        }
        active = next_active;
    }
    rank(&mut finished);
    finished.truncate(cfg.beam);
    Ok(finished)
}

/// Rank-1 beam output.
pub fn beam_best<M: StepModel>(model: &M, src: &[u32], cfg: &SearchConfig) -> Result<Hypothesis, DecodeError> {
    Ok(beam_search(model, src, cfg)?.swap_remove(0))
}

pub const PIVOT_FIRST_BEAM: usize = 5;
pub const PIVOT_SECOND_BEAM: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct PivotOutput {
    pub hop1: Hypothesis,
    /// Final hypothesis; `finished` is false if either hop failed to finish.
    pub output: Hypothesis,
}

/// Encoder input for the second hop: hop-1 content, target tag, EOS.
pub fn retag(hyp: &Hypothesis, target_tag: u32) -> Vec<u32> {
    let mut src = hyp.content().to_vec();
    src.extend([target_tag, EOS]);
    src
}

/// X→pivot with `first` settings, then the rank-1 output re-tagged for
/// the final language and decoded by the second model with `second`.
pub fn pivot_translate<A: StepModel, B: StepModel>(
    x_to_pivot: &A,
    pivot_to_y: &B,
    src: &[u32],
    target_tag: u32,
    first: &SearchConfig,
    second: &SearchConfig,
) -> Result<PivotOutput, DecodeError> {
    let hop1 = beam_best(x_to_pivot, src, first)?;
    let mut output = beam_best(pivot_to_y, &retag(&hop1, target_tag), second)?;
    output.finished &= hop1.finished;
    Ok(PivotOutput { hop1, output })
}

/// One decoded corpus line.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedPair {
    pub pair: SentencePair,
    pub hypothesis: Hypothesis,
    /// Surface tokens of the hypothesis content.
    pub text: Vec<String>,
}

/// Decodes every (tagged) pair in parallel; output order follows input.
pub fn decode_corpus<M: StepModel>(
    model: &M,
    vocab: &SubwordVocab,
    corpus: &ParallelCorpus,
    cfg: &SearchConfig,
) -> Result<Vec<DecodedPair>, DecodeError> {
    corpus
        .pairs()
        .par_iter()
        .map(|pair| {
            let src = encode_pair(vocab, pair).src;
            let hypothesis = beam_best(model, &src, cfg)?;
            let text = vocab.decode(hypothesis.content())?;
            Ok(DecodedPair { pair: pair.clone(), hypothesis, text })
        })
        .collect()
}

/// Writes `src_lang, tgt_lang, source, hypothesis, logprob` rows.
pub fn write_decode_tsv(mut w: impl Write, rows: &[DecodedPair]) -> std::io::Result<()> {
    writeln!(w, "src_lang\ttgt_lang\tsource\thypothesis\tlogprob")?;
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{:.6}",
            r.pair.src_lang,
            r.pair.tgt_lang,
            r.pair.source.join(" "),
            r.text.join(" "),
            r.hypothesis.logprob
        )?;
    }
    Ok(())
}

/// Fraction of decoded lines whose text equals the reference target.
pub fn exact_match(rows: &[DecodedPair]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| r.text == r.pair.target).count() as f64 / rows.len() as f64
}
