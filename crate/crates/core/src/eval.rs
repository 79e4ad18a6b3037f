//! Corpus BLEU and decoding latency.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use thiserror::Error;

use crate::decode::{beam_best, DecodeError, SearchConfig, StepModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("need at least one sentence")]
    Empty,
    #[error("latency benchmarks need >= {min} sentences, got {got}")]
    TooFewSentences { min: usize, got: usize },
    #[error("latency benchmarks need >= {min} warmup iterations, got {got}")]
    TooFewWarmup { min: usize, got: usize },
    #[error("max_n and n_repeats must be >= 1")]
    BadParameter,
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Smoothing {
    None,
    /// Zero match counts become 0.1.
    Floor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// In `[0, 100]`.
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU over pre-tokenized, case-sensitive sentences with
/// clipped n-gram counts aggregated across the corpus.
pub fn corpus_bleu<S: AsRef<str>>(
    hyps: &[Vec<S>],
    refs: &[Vec<S>],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<BleuReport, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    if hyps.is_empty() {
        return Err(EvalError::Empty);
    }
    if max_n == 0 {
        return Err(EvalError::BadParameter);
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(&g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let mut log_sum = 0.0;
    let mut defined = hyp_len > 0;
    for (&m, &t) in matches.iter().zip(&totals) {
        let m = match (m, smoothing) {
            _ if t == 0 => {
                defined = false;
                break;
            }
            (0, Smoothing::None) => {
                defined = false;
                break;
            }
            (0, Smoothing::Floor) => 0.1,
            (m, _) => m as f64,
        };
        log_sum += (m / t as f64).ln() / max_n as f64;
    }
    let bleu = if defined { 100.0 * brevity_penalty * log_sum.exp() } else { 0.0 };
    Ok(BleuReport { bleu, precisions, matches, totals, brevity_penalty, hyp_len, ref_len })
}

/// [`corpus_bleu`] on whitespace-split strings.
pub fn corpus_bleu_text(hyps: &[&str], refs: &[&str], max_n: usize, smoothing: Smoothing) -> Result<BleuReport, EvalError> {
    fn split<'a>(v: &[&'a str]) -> Vec<Vec<&'a str>> {
        v.iter().map(|s| s.split_whitespace().collect()).collect()
    }
    corpus_bleu(&split(hyps), &split(refs), max_n, smoothing)
}

pub const MIN_BENCH_SENTENCES: usize = 30;
pub const MIN_WARMUP: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub label: String,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub tokens_per_sec: f64,
    pub n_sentences: usize,
}

/// Serializes timing so concurrent callers never measure at once.
static BENCH_LOCK: Mutex<()> = Mutex::new(());

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Times `run` once per sentence per repeat, one sentence at a time, after
/// `warmup_iters` discarded calls. `run` returns the number of tokens it
/// generated.
pub fn bench_fn<F>(
    label: &str,
    sentences: &[Vec<u32>],
    warmup_iters: usize,
    n_repeats: usize,
    mut run: F,
) -> Result<LatencyReport, EvalError>
where
    F: FnMut(&[u32]) -> Result<usize, EvalError>,
{
    if sentences.len() < MIN_BENCH_SENTENCES {
        return Err(EvalError::TooFewSentences { min: MIN_BENCH_SENTENCES, got: sentences.len() });
    }
    if warmup_iters < MIN_WARMUP {
        return Err(EvalError::TooFewWarmup { min: MIN_WARMUP, got: warmup_iters });
    }
    if n_repeats == 0 {
        return Err(EvalError::BadParameter);
    }
    let _guard = BENCH_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    for i in 0..warmup_iters {
        run(&sentences[i % sentences.len()])?;
    }
    let mut times = Vec::with_capacity(sentences.len() * n_repeats);
    let mut tokens = 0usize;
    for _ in 0..n_repeats {
        for s in sentences {
            let t0 = Instant::now();
            tokens += run(s)?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    let total_ms: f64 = times.iter().sum();
    times.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        label: label.to_owned(),
        mean_ms: total_ms / times.len() as f64,
        median_ms: median(&times),
        p95_ms: percentile(&times, 0.95),
        tokens_per_sec: tokens as f64 / (total_ms / 1e3),
        n_sentences: sentences.len(),
    })
}

/// Single-sentence beam decoding latency. Encoding and decoding count;
/// vocabulary work happens outside the timed region.
pub fn latency_bench<M: StepModel>(
    model: &M,
    label: &str,
    sentences: &[Vec<u32>],
    cfg: &SearchConfig,
    warmup_iters: usize,
    n_repeats: usize,
) -> Result<LatencyReport, EvalError> {
    bench_fn(label, sentences, warmup_iters, n_repeats, |src| Ok(beam_best(model, src, cfg)?.len()))
}

pub fn write_latency_tsv(mut w: impl Write, reports: &[LatencyReport]) -> std::io::Result<()> {
    writeln!(w, "config\tmean_ms\tmedian_ms\tp95_ms\ttokens_per_sec\tn_sentences")?;
    for r in reports {
        writeln!(
            w,
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.1}\t{}",
            r.label, r.mean_ms, r.median_ms, r.p95_ms, r.tokens_per_sec, r.n_sentences
        )?;
    }
    Ok(())
}

/// Fixed-width table for terminals.
pub fn latency_table(reports: &[LatencyReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<14} {:>10} {:>10} {:>10} {:>12} {:>6}", "config", "mean ms", "median ms", "p95 ms", "tok/s", "n");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<14} {:>10.3} {:>10.3} {:>10.3} {:>12.1} {:>6}",
            r.label, r.mean_ms, r.median_ms, r.p95_ms, r.tokens_per_sec, r.n_sentences
        );
    }
    s
}

/// Quality/latency trade-off rows as `config,median_ms,bleu`.
pub fn write_tradeoff_csv(mut w: impl Write, rows: &[(String, f64, f64)]) -> std::io::Result<()> {
    writeln!(w, "config,median_ms,bleu")?;
    for (label, ms, bleu) in rows {
        writeln!(w, "{label},{ms:.4},{bleu:.2}")?;
    }
    Ok(())
}
