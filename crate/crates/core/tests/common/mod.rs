//! Oracles shared by integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

use mnmt_core::corpus::{temperature_sample, LangId, ParallelCorpus, SentencePair};
use mnmt_core::model::{init_params, loss_and_grad_sum, loss_sum, Batch, Example, ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub const VOCAB: usize = 11;

pub fn check_config() -> ModelConfig {
    ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        d_model: 16,
        d_ffn: 32,
        n_heads: 1,
        vocab_size: VOCAB,
        max_len: 16,
        dropout: 0.0,
    }
}

/// Three sentence pairs of mixed length, so the batch carries padding.
pub fn check_batch(seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba7c);
    let examples: Vec<Example> = (0..3)
        .map(|_| {
            let sl = rng.gen_range(2..=6);
            let tl = rng.gen_range(1..=5);
            let mut src: Vec<u32> = (0..sl).map(|_| rng.gen_range(4..VOCAB as u32)).collect();
            src.push(2);
            let tgt = (0..tl).map(|_| rng.gen_range(4..VOCAB as u32)).collect();
            Example { src, tgt }
        })
        .collect();
    Batch::new(&examples)
}

/// Initialized weights with every tensor (gains and biases included) nudged
/// off its initial value.
pub fn check_params(seed: u64) -> ModelParams<f64> {
    let mut p = init_params::<f64>(&check_config(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e55);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    p
}

#[derive(Clone, Copy, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub coords: usize,
}

/// Compares every analytic coordinate of the summed smoothed loss against a
/// five-point central difference.
pub fn gradient_check(seed: u64) -> GradReport {
    let params = check_params(seed);
    let batch = check_batch(seed);
    let smoothing = 0.1;
    let (_, analytic) = loss_and_grad_sum(&params, &batch, smoothing, 0).unwrap();
    let h = 1e-3;
    let f = |p: &ModelParams<f64>| loss_sum(p, &batch, smoothing).unwrap().total;
    let mut probe = params.clone();
    let n_tensors = params.tensors().len();
    let mut max_rel_error = 0.0f64;
    let mut coords = 0;
    for ti in 0..n_tensors {
        let len = params.tensors()[ti].len();
        for ci in 0..len {
            let x0 = params.tensors()[ti].data()[ci];
            let mut at = |dx: f64| {
                probe.tensors_mut()[ti].data_mut()[ci] = x0 + dx;
                let v = f(&probe);
                probe.tensors_mut()[ti].data_mut()[ci] = x0;
                v
            };
            let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            let a = analytic.tensors()[ti].data()[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            max_rel_error = max_rel_error.max(rel);
            coords += 1;
        }
    }
    GradReport { max_rel_error, coords }
}

/// A corpus whose target-language groups have the given sizes.
pub fn grouped_corpus(sizes: &[(&str, usize)]) -> ParallelCorpus {
    let src = LangId::new("src").unwrap();
    let mut pairs = Vec::new();
    for (lang, n) in sizes {
        for i in 0..*n {
            pairs.push(SentencePair {
                source: vec![format!("w{i}")],
                target: vec![format!("{lang}{i}")],
                src_lang: src.clone(),
                tgt_lang: LangId::new(*lang).unwrap(),
            });
        }
    }
    ParallelCorpus::new(pairs)
}

/// Closed-form sampling distribution, computed independently of the library:
/// q_i = p_i^(1/T) / sum_j p_j^(1/T).
pub fn closed_form_q(sizes: &[(&str, usize)], temperature: f64) -> BTreeMap<String, f64> {
    let total: usize = sizes.iter().map(|s| s.1).sum();
    let scaled: Vec<f64> = sizes.iter().map(|s| (s.1 as f64 / total as f64).powf(1.0 / temperature)).collect();
    let z: f64 = scaled.iter().sum();
    sizes.iter().zip(scaled).map(|(s, v)| (s.0.to_string(), v / z)).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct ChiSquare {
    pub statistic: f64,
    pub critical: f64,
}

impl ChiSquare {
    pub fn passes(&self) -> bool {
        self.statistic <= self.critical
    }
}

/// Pearson goodness-of-fit of `n` temperature samples against `expected`.
pub fn chi_square_groups(corpus: &ParallelCorpus, temperature: f64, n: usize, seed: u64, expected: &BTreeMap<String, f64>, alpha: f64) -> ChiSquare {
    let sample = temperature_sample(corpus, temperature, n, seed).unwrap();
    let mut observed: BTreeMap<String, usize> = expected.keys().map(|k| (k.clone(), 0)).collect();
    for p in sample.pairs() {
        *observed.get_mut(p.tgt_lang.code()).unwrap() += 1;
    }
    let statistic = expected
        .iter()
        .map(|(k, q)| {
            let e = q * n as f64;
            (observed[k] as f64 - e).powi(2) / e
        })
        .sum();
    let dof = (expected.len() - 1) as f64;
    let critical = ChiSquared::new(dof).unwrap().inverse_cdf(1.0 - alpha);
    ChiSquare { statistic, critical }
}
