//! Synthetic multilingual worlds and evaluation helpers shared by the
//! command-line pipeline and the acceptance suite.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{
    filter_empty, gen_synthetic, latent_sentences, pivot_align, tag_corpus, temperature_sample, CorpusError, LangId, ParallelCorpus,
    SentencePair, SyntheticLangSpec,
};
use crate::decode::{
    beam_best, decode_corpus, pivot_translate, DecodeError, DecodedPair, SearchConfig, StepModel, PIVOT_FIRST_BEAM,
    PIVOT_SECOND_BEAM,
};
use crate::eval::{bench_fn, corpus_bleu, EvalError, LatencyReport, Smoothing};
use crate::subword::{train_vocab_exhaustive, SubwordVocab, VocabError, EOS};
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no model for target {0}")]
    MissingModel(LangId),
}

/// Shape of a synthetic world. The first language is the English-like pivot;
/// `pivot_sizes[i]` is the number of pivot-aligned sentences for
/// `langs[i + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub langs: Vec<String>,
    pub latent_vocab: usize,
    pub length_range: (usize, usize),
    pub pivot_sizes: Vec<usize>,
    pub dev_per_direction: usize,
}

impl WorldConfig {
    /// Four languages with skewed data sizes; the last one is low-resource.
    pub fn skewed4(seed: u64) -> Self {
        Self {
            seed,
            langs: ["en", "de", "fr", "cs"].map(String::from).to_vec(),
            latent_vocab: 24,
            length_range: (3, 8),
            pivot_sizes: vec![1200, 600, 150],
            dev_per_direction: 100,
        }
    }

    /// `n` languages with equal sizes.
    pub fn uniform(seed: u64, n: usize, size: usize) -> Self {
        let pool = ["en", "de", "fr", "cs", "ja", "zh", "ru", "es", "it", "pl", "ko"];
        Self {
            seed,
            langs: pool.iter().take(n).map(|s| s.to_string()).collect(),
            latent_vocab: 16,
            length_range: (3, 8),
            pivot_sizes: vec![size; n.saturating_sub(1)],
            dev_per_direction: 20,
        }
    }
}

fn mix(a: u64, b: u64) -> u64 {
    (a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15)).rotate_left(23).wrapping_mul(0x94d0_49bb_1331_11eb)
}

/// Languages that are seeded relabelings of one latent language.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub specs: Vec<SyntheticLangSpec>,
}

impl SyntheticWorld {
    pub fn new(config: WorldConfig) -> Result<Self, CorpusError> {
        if config.langs.len() < 2 || config.pivot_sizes.len() != config.langs.len() - 1 {
            return Err(CorpusError::TooFewLanguages(config.langs.len()));
        }
        let specs = config
            .langs
            .iter()
            .enumerate()
            .map(|(i, l)| {
                SyntheticLangSpec::new(
                    LangId::new(l.as_str())?,
                    mix(config.seed, i as u64 + 1),
                    config.latent_vocab,
                    config.length_range,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { config, specs })
    }

    pub fn langs(&self) -> Vec<LangId> {
        self.specs.iter().map(|s| s.lang.clone()).collect()
    }

    pub fn pivot(&self) -> &SyntheticLangSpec {
        &self.specs[0]
    }

    pub fn spec(&self, lang: &LangId) -> Option<&SyntheticLangSpec> {
        self.specs.iter().find(|s| &s.lang == lang)
    }

    fn corpus(&self, src: &SyntheticLangSpec, tgt: &SyntheticLangSpec, latents: &[Vec<usize>]) -> ParallelCorpus {
        ParallelCorpus::new(
            latents
                .iter()
                .map(|z| SentencePair {
                    source: src.realize(z),
                    target: tgt.realize(z),
                    src_lang: src.lang.clone(),
                    tgt_lang: tgt.lang.clone(),
                })
                .collect(),
        )
    }

    /// Pivot→X bitext for one language. All pivot bitexts draw from the
    /// pivot language's latent stream, so smaller ones are prefixes of
    /// larger ones.
    pub fn pivot_bitext(&self, index: usize) -> Result<ParallelCorpus, CorpusError> {
        gen_synthetic(&self.specs[index + 1], self.pivot(), self.config.pivot_sizes[index])
    }

    /// Pivot↔X pairs in both directions for every X.
    pub fn english_centric(&self) -> Result<ParallelCorpus, CorpusError> {
        let mut parts = Vec::new();
        for i in 0..self.specs.len() - 1 {
            let fwd = self.pivot_bitext(i)?;
            parts.push(fwd.reversed());
            parts.push(fwd);
        }
        Ok(ParallelCorpus::concat(parts))
    }

    /// English-centric data plus X↔Y pairs built by joining pivot bitexts on
    /// their pivot side.
    pub fn multi_way(&self) -> Result<ParallelCorpus, CorpusError> {
        let mut parts = vec![self.english_centric()?];
        let n = self.specs.len() - 1;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let (x, y) = (&self.specs[i + 1].lang, &self.specs[j + 1].lang);
                    parts.push(pivot_align(&self.pivot_bitext(i)?, &self.pivot_bitext(j)?, x, y)?);
                }
            }
        }
        Ok(ParallelCorpus::concat(parts))
    }

    /// Fresh held-out sentences for every direction.
    pub fn dev(&self) -> ParallelCorpus {
        let latents = latent_sentences(
            mix(self.config.seed, 0xd3e7),
            self.config.latent_vocab,
            self.config.length_range,
            self.config.dev_per_direction,
        );
        let mut parts = Vec::new();
        for s in &self.specs {
            for t in &self.specs {
                if s.lang != t.lang {
                    parts.push(self.corpus(s, t, &latents));
                }
            }
        }
        ParallelCorpus::concat(parts)
    }

    /// Exact translation of surface `words` from `src` into `tgt`.
    pub fn translate(&self, src: &LangId, tgt: &LangId, words: &[String]) -> Option<Vec<String>> {
        let latent = self.spec(src)?.latent_of(words)?;
        Some(self.spec(tgt)?.realize(&latent))
    }
}

/// Filters empty sides and appends target tags.
pub fn prepare_corpus(corpus: &ParallelCorpus) -> Result<ParallelCorpus, CorpusError> {
    tag_corpus(&filter_empty(corpus))
}

/// Dev pairs going into `target`, grouped for per-target evaluation.
pub fn dev_by_target(dev: &ParallelCorpus) -> BTreeMap<LangId, ParallelCorpus> {
    dev.target_sizes()
        .into_keys()
        .map(|l| (l.clone(), dev.filter(|p| p.tgt_lang == l)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct DevScore {
    pub bleu: f64,
    pub exact_match: f64,
    pub rows: Vec<DecodedPair>,
}

/// Beam-decodes a tagged dev corpus and scores it against its targets.
pub fn score_model<M: StepModel>(
    model: &M,
    vocab: &SubwordVocab,
    dev: &ParallelCorpus,
    cfg: &SearchConfig,
) -> Result<DevScore, EvalError> {
    let rows = decode_corpus(model, vocab, dev, cfg)?;
    let hyps: Vec<Vec<String>> = rows.iter().map(|r| r.text.clone()).collect();
    let refs: Vec<Vec<String>> = rows.iter().map(|r| r.pair.target.clone()).collect();
    let bleu = corpus_bleu(&hyps, &refs, 4, Smoothing::None)?.bleu;
    Ok(DevScore { bleu, exact_match: crate::decode::exact_match(&rows), rows })
}

/// Direction-wise exact-match fractions.
pub fn exact_by_direction(rows: &[DecodedPair]) -> BTreeMap<(LangId, LangId), f64> {
    let mut acc: BTreeMap<(LangId, LangId), (usize, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.pair.direction()).or_default();
        e.0 += usize::from(r.text == r.pair.target);
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (hit, n))| (k, hit as f64 / n as f64)).collect()
}

/// Everything a training run needs from a world: tagged training and dev
/// data, the shared vocabulary and the temperature-sampled pretraining mix.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub world: SyntheticWorld,
    /// Untagged training pairs.
    pub raw_train: ParallelCorpus,
    /// Untagged dev pairs.
    pub raw_dev: ParallelCorpus,
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub vocab: SubwordVocab,
    pub pretrain_mix: ParallelCorpus,
}

impl Prepared {
    /// Uses multi-way data when `multi_way` is set, English-centric data
    /// otherwise. The pretraining mix has as many pairs as the training set.
    pub fn new(world: SyntheticWorld, multi_way: bool, temperature: f64, sample_seed: u64) -> Result<Self, ExperimentError> {
        let raw_train = filter_empty(&if multi_way { world.multi_way()? } else { world.english_centric()? });
        let raw_dev = world.dev();
        let train = tag_corpus(&raw_train)?;
        let dev = tag_corpus(&raw_dev)?;
        let vocab = train_vocab_exhaustive(&train)?;
        let pretrain_mix = temperature_sample(&train, temperature, train.len(), sample_seed)?;
        Ok(Self { world, raw_train, raw_dev, train, dev, vocab, pretrain_mix })
    }

    /// Tagged dev pairs going into `target`.
    pub fn dev_for(&self, target: &LangId) -> ParallelCorpus {
        self.dev.filter(|p| &p.tgt_lang == target)
    }
}

/// Encoder input for `words` translated into `target`.
pub fn source_ids(vocab: &SubwordVocab, words: &[String], target: &LangId) -> Result<Vec<u32>, DecodeError> {
    let tag = vocab.tag_id(target).ok_or_else(|| DecodeError::MissingTag(target.clone()))?;
    let mut ids = vocab.encode(words);
    ids.extend([tag, EOS]);
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionComparison {
    pub direction: (LangId, LangId),
    pub sentences: usize,
    /// Exact-match percentage of direct decoding.
    pub direct: f64,
    /// Exact-match percentage of pivot decoding.
    pub pivot: f64,
}

/// Exact match of direct X→Y decoding with the many-to-Y model against
/// X→pivot→Y decoding through the many-to-pivot and many-to-Y models, on
/// every untagged dev pair whose sides both differ from `pivot`.
pub fn direct_vs_pivot<M: StepModel>(
    models: &BTreeMap<LangId, M>,
    pivot: &LangId,
    vocab: &SubwordVocab,
    raw_dev: &ParallelCorpus,
    beam: usize,
) -> Result<Vec<DirectionComparison>, ExperimentError> {
    let to_pivot = models.get(pivot).ok_or_else(|| ExperimentError::MissingModel(pivot.clone()))?;
    let direct_cfg = SearchConfig::for_vocab(beam, vocab);
    let first = SearchConfig::for_vocab(PIVOT_FIRST_BEAM, vocab);
    let second = SearchConfig::for_vocab(PIVOT_SECOND_BEAM, vocab);
    let mut out = Vec::new();
    for (direction, _) in raw_dev.direction_index() {
        let (x, y) = direction;
        if x == pivot || y == pivot {
            continue;
        }
        let to_y = models.get(y).ok_or_else(|| ExperimentError::MissingModel(y.clone()))?;
        let y_tag = vocab.tag_id(y).ok_or_else(|| DecodeError::MissingTag(y.clone()))?;
        let pairs: Vec<&SentencePair> = raw_dev.pairs().iter().filter(|p| &p.direction() == direction).collect();
        let hits = pairs
            .par_iter()
            .map(|p| {
                let direct = beam_best(to_y, &source_ids(vocab, &p.source, y)?, &direct_cfg)?;
                let piv = pivot_translate(to_pivot, to_y, &source_ids(vocab, &p.source, pivot)?, y_tag, &first, &second)?;
                let d = vocab.decode(direct.content())? == p.target;
                let v = vocab.decode(piv.output.content())? == p.target;
                Ok((usize::from(d), usize::from(v)))
            })
            .collect::<Result<Vec<_>, DecodeError>>()?;
        let n = hits.len();
        let (d, v) = hits.iter().fold((0, 0), |a, h| (a.0 + h.0, a.1 + h.1));
        out.push(DirectionComparison {
            direction: direction.clone(),
            sentences: n,
            direct: 100.0 * d as f64 / n as f64,
            pivot: 100.0 * v as f64 / n as f64,
        });
    }
    Ok(out)
}

/// Per-sentence latency of two-hop pivot decoding.
pub fn pivot_latency<A: StepModel, B: StepModel>(
    x_to_pivot: &A,
    pivot_to_y: &B,
    label: &str,
    sentences: &[Vec<u32>],
    target_tag: u32,
    vocab: &SubwordVocab,
    warmup_iters: usize,
    n_repeats: usize,
) -> Result<LatencyReport, EvalError> {
    let first = SearchConfig::for_vocab(PIVOT_FIRST_BEAM, vocab);
    let second = SearchConfig::for_vocab(PIVOT_SECOND_BEAM, vocab);
    bench_fn(label, sentences, warmup_iters, n_repeats, |src| {
        Ok(pivot_translate(x_to_pivot, pivot_to_y, src, target_tag, &first, &second)?.output.len())
    })
}

/// Median of a nonempty sample.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
