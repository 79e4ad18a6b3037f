//! Multilingual parallel corpora: filtering, English-pivot alignment,
//! temperature sampling, target-language tagging and synthetic languages.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Upper bound on X-Y combinations emitted per shared English sentence.
pub const PIVOT_JOIN_CAP: usize = 16;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid language id {0:?}: must be nonempty lowercase ASCII")]
    InvalidLangId(String),
    #[error("source and target language are both {0}")]
    SameLanguage(LangId),
    #[error("source already ends with a language tag ({0})")]
    AlreadyTagged(String),
    #[error("language counts must be positive (got {count} for {lang})")]
    NonPositiveCount { lang: LangId, count: usize },
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("cannot sample from an empty corpus")]
    EmptyCorpus,
    #[error("need at least 2 languages, got {0}")]
    TooFewLanguages(usize),
    #[error("expected only {expected} pairs, found {found}")]
    UnexpectedDirection { expected: String, found: String },
    #[error("synthetic specs disagree on vocabulary size ({0} vs {1})")]
    VocabMismatch(usize, usize),
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Short language code such as `en` or `de`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LangId(String);

impl LangId {
    pub fn new(code: impl Into<String>) -> Result<Self> {
        let code = code.into();
        let ok = !code.is_empty()
            && code
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-');
        if ok {
            Ok(Self(code))
        } else {
            Err(CorpusError::InvalidLangId(code))
        }
    }

    pub fn code(&self) -> &str {
        &self.0
    }

    /// The atomic target-language token, e.g. `<2fr>`.
    pub fn tag(&self) -> String {
        format!("<2{}>", self.0)
    }
}

impl fmt::Display for LangId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for LangId {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        Self::new(s)
    }
}

/// True when `token` has the `<2xx>` language-tag shape.
pub fn is_lang_tag(token: &str) -> bool {
    token
        .strip_prefix("<2")
        .and_then(|rest| rest.strip_suffix('>'))
        .is_some_and(|code| LangId::new(code).is_ok())
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub src_lang: LangId,
    pub tgt_lang: LangId,
}

impl SentencePair {
    pub fn new(
        source: Vec<String>,
        target: Vec<String>,
        src_lang: LangId,
        tgt_lang: LangId,
    ) -> Result<Self> {
        if src_lang == tgt_lang {
            return Err(CorpusError::SameLanguage(src_lang));
        }
        Ok(Self {
            source,
            target,
            src_lang,
            tgt_lang,
        })
    }

    /// Builds a pair from whitespace-delimited text.
    pub fn from_text(source: &str, target: &str, src_lang: &LangId, tgt_lang: &LangId) -> Result<Self> {
        Self::new(
            split_tokens(source),
            split_tokens(target),
            src_lang.clone(),
            tgt_lang.clone(),
        )
    }

    pub fn direction(&self) -> (LangId, LangId) {
        (self.src_lang.clone(), self.tgt_lang.clone())
    }
}

pub fn split_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// Ordered sentence pairs plus a per-direction count index that always
/// matches the pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pairs: Vec<SentencePair>,
    direction_index: BTreeMap<(LangId, LangId), usize>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>) -> Self {
        let mut direction_index = BTreeMap::new();
        for p in &pairs {
            *direction_index.entry(p.direction()).or_insert(0) += 1;
        }
        Self {
            pairs,
            direction_index,
        }
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn into_pairs(self) -> Vec<SentencePair> {
        self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn direction_index(&self) -> &BTreeMap<(LangId, LangId), usize> {
        &self.direction_index
    }

    /// Every language that appears on either side.
    pub fn languages(&self) -> Vec<LangId> {
        let mut langs: Vec<LangId> = self
            .direction_index
            .keys()
            .flat_map(|(s, t)| [s.clone(), t.clone()])
            .collect();
        langs.sort();
        langs.dedup();
        langs
    }

    /// Pair counts grouped by target language.
    pub fn target_sizes(&self) -> BTreeMap<LangId, usize> {
        let mut sizes = BTreeMap::new();
        for ((_, tgt), n) in &self.direction_index {
            *sizes.entry(tgt.clone()).or_insert(0) += n;
        }
        sizes
    }

    pub fn concat(parts: impl IntoIterator<Item = ParallelCorpus>) -> Self {
        Self::new(parts.into_iter().flat_map(|c| c.pairs).collect())
    }

    /// Swaps source and target of every pair.
    pub fn reversed(&self) -> Self {
        Self::new(
            self.pairs
                .iter()
                .map(|p| SentencePair {
                    source: p.target.clone(),
                    target: p.source.clone(),
                    src_lang: p.tgt_lang.clone(),
                    tgt_lang: p.src_lang.clone(),
                })
                .collect(),
        )
    }

    /// Keeps only the pairs for which `keep` holds, in order.
    pub fn filter(&self, mut keep: impl FnMut(&SentencePair) -> bool) -> Self {
        Self::new(self.pairs.iter().filter(|p| keep(p)).cloned().collect())
    }

    pub fn take(&self, n: usize) -> Self {
        Self::new(self.pairs.iter().take(n).cloned().collect())
    }

    /// Reads the four-column TSV format, skipping `#` comment lines.
    pub fn read_tsv(reader: impl BufRead) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(CorpusError::Parse {
                    line: line_no,
                    msg: format!("expected 4 tab-separated fields, found {}", fields.len()),
                });
            }
            let parse_lang = |s: &str| {
                LangId::new(s).map_err(|e| CorpusError::Parse {
                    line: line_no,
                    msg: e.to_string(),
                })
            };
            let src = parse_lang(fields[0])?;
            let tgt = parse_lang(fields[1])?;
            let pair = SentencePair::from_text(fields[2], fields[3], &src, &tgt).map_err(|e| {
                CorpusError::Parse {
                    line: line_no,
                    msg: e.to_string(),
                }
            })?;
            pairs.push(pair);
        }
        Ok(Self::new(pairs))
    }

    /// Writes the TSV format; `header` lines are emitted as `# ` comments.
    pub fn write_tsv(&self, mut w: impl Write, header: &[String]) -> Result<()> {
        for h in header {
            writeln!(w, "# {h}")?;
        }
        for p in &self.pairs {
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                p.src_lang,
                p.tgt_lang,
                p.source.join(" "),
                p.target.join(" ")
            )?;
        }
        Ok(())
    }
}

/// Drops every pair with an empty source or target side.
pub fn filter_empty(corpus: &ParallelCorpus) -> ParallelCorpus {
    corpus.filter(|p| !p.source.is_empty() && !p.target.is_empty())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DirectionCounts {
    /// All translation directions, `|L| * (|L| - 1)`.
    pub total: usize,
    /// English-centric language pairs, `|L| - 1`.
    pub en_centric: usize,
    /// Non-English language pairs, `(|L| - 1)(|L| - 2) / 2`.
    pub non_en: usize,
}

pub fn count_directions(num_langs: usize) -> Result<DirectionCounts> {
    if num_langs < 2 {
        return Err(CorpusError::TooFewLanguages(num_langs));
    }
    Ok(DirectionCounts {
        total: num_langs * (num_langs - 1),
        en_centric: num_langs - 1,
        non_en: (num_langs - 1) * (num_langs - 2) / 2,
    })
}

/// Joins pivot→x and pivot→y data on byte-identical pivot sentences,
/// producing x→y pairs.
///
/// Each side is first deduplicated by exact (pivot, foreign) pair; the
/// cross-product per pivot sentence is then capped at [`PIVOT_JOIN_CAP`].
/// Output follows the first-occurrence order of pivot sentences in `en_x`.
pub fn pivot_align(
    en_x: &ParallelCorpus,
    en_y: &ParallelCorpus,
    x: &LangId,
    y: &LangId,
) -> Result<ParallelCorpus> {
    if x == y {
        return Err(CorpusError::SameLanguage(x.clone()));
    }
    let pivot = match en_x.pairs.first().or(en_y.pairs.first()) {
        Some(p) => p.src_lang.clone(),
        None => return Ok(ParallelCorpus::default()),
    };
    let check = |c: &ParallelCorpus, tgt: &LangId| -> Result<()> {
        for ((s, t), _) in &c.direction_index {
            if s != &pivot || t != tgt {
                return Err(CorpusError::UnexpectedDirection {
                    expected: format!("{pivot}->{tgt}"),
                    found: format!("{s}->{t}"),
                });
            }
        }
        Ok(())
    };
    check(en_x, x)?;
    check(en_y, y)?;

    type Groups<'a> = (Vec<&'a [String]>, HashMap<&'a [String], Vec<&'a [String]>>);
    fn group(c: &ParallelCorpus) -> Groups<'_> {
        let mut order: Vec<&[String]> = Vec::new();
        let mut groups: HashMap<&[String], Vec<&[String]>> = HashMap::new();
        for p in &c.pairs {
            let entry = groups.entry(p.source.as_slice()).or_insert_with(|| {
                order.push(p.source.as_slice());
                Vec::new()
            });
            if !entry.contains(&p.target.as_slice()) {
                entry.push(p.target.as_slice());
            }
        }
        (order, groups)
    }
    let (x_order, x_groups) = group(en_x);
    let (_, y_groups) = group(en_y);

    let mut pairs = Vec::new();
    for key in x_order {
        let Some(ys) = y_groups.get(key) else { continue };
        let combos = x_groups[key]
            .iter()
            .flat_map(|xs| ys.iter().map(move |ys| (*xs, *ys)))
            .take(PIVOT_JOIN_CAP);
        for (xs, ys) in combos {
            pairs.push(SentencePair {
                source: xs.to_vec(),
                target: ys.to_vec(),
                src_lang: x.clone(),
                tgt_lang: y.clone(),
            });
        }
    }
    Ok(ParallelCorpus::new(pairs))
}

/// Temperature-scaled sampling distribution `q_i ∝ (n_i / Σn)^(1/T)`.
pub fn temperature_weights(
    sizes: &BTreeMap<LangId, usize>,
    temperature: f64,
) -> Result<BTreeMap<LangId, f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(CorpusError::BadTemperature(temperature));
    }
    if let Some((lang, &count)) = sizes.iter().find(|(_, &n)| n == 0) {
        return Err(CorpusError::NonPositiveCount {
            lang: lang.clone(),
            count,
        });
    }
    let total: f64 = sizes.values().map(|&n| n as f64).sum();
    let scaled: Vec<f64> = sizes
        .values()
        .map(|&n| (n as f64 / total).powf(1.0 / temperature))
        .collect();
    let norm: f64 = scaled.iter().sum();
    Ok(sizes
        .keys()
        .cloned()
        .zip(scaled.into_iter().map(|s| s / norm))
        .collect())
}

/// Draws `n_samples` pairs with replacement: first a target-language group
/// according to [`temperature_weights`], then a pair uniformly within it.
pub fn temperature_sample(
    corpus: &ParallelCorpus,
    temperature: f64,
    n_samples: usize,
    seed: u64,
) -> Result<ParallelCorpus> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut groups: BTreeMap<LangId, Vec<usize>> = BTreeMap::new();
    for (i, p) in corpus.pairs.iter().enumerate() {
        groups.entry(p.tgt_lang.clone()).or_default().push(i);
    }
    let sizes: BTreeMap<LangId, usize> = groups.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let weights = temperature_weights(&sizes, temperature)?;
    let members: Vec<&Vec<usize>> = groups.values().collect();
    let dist = WeightedIndex::new(weights.values()).expect("weights are positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n_samples)
        .map(|_| {
            let group = members[dist.sample(&mut rng)];
            corpus.pairs[group[rng.gen_range(0..group.len())]].clone()
        })
        .collect();
    Ok(ParallelCorpus::new(pairs))
}

/// Appends the target-language tag to the source side.
pub fn tag_source(pair: &SentencePair) -> Result<SentencePair> {
    if let Some(last) = pair.source.last() {
        if is_lang_tag(last) {
            return Err(CorpusError::AlreadyTagged(last.clone()));
        }
    }
    let mut tagged = pair.clone();
    tagged.source.push(pair.tgt_lang.tag());
    Ok(tagged)
}

pub fn tag_corpus(corpus: &ParallelCorpus) -> Result<ParallelCorpus> {
    Ok(ParallelCorpus::new(
        corpus.pairs.iter().map(tag_source).collect::<Result<_>>()?,
    ))
}

/// The many-to-`target` subset, order preserved.
pub fn subset_for_target(corpus: &ParallelCorpus, target: &LangId) -> ParallelCorpus {
    corpus.filter(|p| &p.tgt_lang == target)
}

/// A synthetic language: a seeded relabeling of a shared latent vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticLangSpec {
    pub lang: LangId,
    pub seed: u64,
    pub vocab_size: usize,
    /// `permutation[latent] = surface id`.
    pub permutation: Vec<usize>,
    pub length_range: (usize, usize),
}

impl SyntheticLangSpec {
    pub fn new(lang: LangId, seed: u64, vocab_size: usize, length_range: (usize, usize)) -> Result<Self> {
        let mut permutation: Vec<usize> = (0..vocab_size).collect();
        permutation.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self::with_permutation(lang, seed, permutation, length_range)
    }

    pub fn identity(lang: LangId, seed: u64, vocab_size: usize, length_range: (usize, usize)) -> Result<Self> {
        Self::with_permutation(lang, seed, (0..vocab_size).collect(), length_range)
    }

    pub fn with_permutation(
        lang: LangId,
        seed: u64,
        permutation: Vec<usize>,
        length_range: (usize, usize),
    ) -> Result<Self> {
        let vocab_size = permutation.len();
        if vocab_size < 10 {
            return Err(CorpusError::BadSpec(format!("vocab_size {vocab_size} < 10")));
        }
        let mut seen = vec![false; vocab_size];
        for &p in &permutation {
            if p >= vocab_size || std::mem::replace(&mut seen[p], true) {
                return Err(CorpusError::BadSpec("permutation is not a bijection".into()));
            }
        }
        let (lo, hi) = length_range;
        if lo == 0 || lo > hi {
            return Err(CorpusError::BadSpec(format!("bad length range {lo}..={hi}")));
        }
        Ok(Self {
            lang,
            seed,
            vocab_size,
            permutation,
            length_range,
        })
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.vocab_size];
        for (latent, &surface) in self.permutation.iter().enumerate() {
            inv[surface] = latent;
        }
        inv
    }

    /// Surface word for a surface id, e.g. `de7`.
    pub fn word(&self, surface_id: usize) -> String {
        format!("{}{}", self.lang, surface_id)
    }

    /// Inverse of [`Self::word`].
    pub fn parse_word(&self, word: &str) -> Option<usize> {
        word.strip_prefix(self.lang.code())?
            .parse::<usize>()
            .ok()
            .filter(|&id| id < self.vocab_size)
    }

    pub fn realize(&self, latent: &[usize]) -> Vec<String> {
        latent.iter().map(|&z| self.word(self.permutation[z])).collect()
    }

    /// Latent sentence behind a surface sentence, if every word belongs to
    /// this language.
    pub fn latent_of(&self, words: &[String]) -> Option<Vec<usize>> {
        let inv = self.inverse();
        words.iter().map(|w| self.parse_word(w).map(|s| inv[s])).collect()
    }

    pub fn to_kv(&self) -> String {
        let perm: Vec<String> = self.permutation.iter().map(usize::to_string).collect();
        format!(
            "lang={}\nseed={}\nvocab_size={}\nmin_len={}\nmax_len={}\npermutation={}\n",
            self.lang,
            self.seed,
            self.vocab_size,
            self.length_range.0,
            self.length_range.1,
            perm.join(",")
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CorpusError::Parse {
                line: i + 1,
                msg: "expected key=value".into(),
            })?;
            kv.insert(k.trim().to_owned(), v.trim().to_owned());
        }
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| CorpusError::BadSpec(format!("missing key {k}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| CorpusError::BadSpec(format!("{k} is not an integer")))
        };
        let permutation = get("permutation")?
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| CorpusError::BadSpec("bad permutation".into()))?;
        let spec = Self::with_permutation(
            LangId::new(get("lang")?.as_str())?,
            num("seed")?,
            permutation,
            (num("min_len")? as usize, num("max_len")? as usize),
        )?;
        if spec.vocab_size as u64 != num("vocab_size")? {
            return Err(CorpusError::BadSpec("vocab_size disagrees with permutation".into()));
        }
        Ok(spec)
    }
}

/// Latent sentences drawn from `seed`; the stream is a prefix-stable
/// function of the seed, so corpora generated from the same base share
/// their first sentences.
pub fn latent_sentences(seed: u64, vocab_size: usize, length_range: (usize, usize), n: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7e_0000_0000);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(length_range.0..=length_range.1);
            (0..len).map(|_| rng.gen_range(0..vocab_size)).collect()
        })
        .collect()
}

/// Generates `n` base→spec pairs over a shared latent sentence stream
/// seeded by `base.seed`. Every target token is the exact relabeling of
/// the source token at the same position.
pub fn gen_synthetic(spec: &SyntheticLangSpec, base: &SyntheticLangSpec, n: usize) -> Result<ParallelCorpus> {
    if spec.vocab_size != base.vocab_size {
        return Err(CorpusError::VocabMismatch(base.vocab_size, spec.vocab_size));
    }
    if spec.lang == base.lang {
        return Err(CorpusError::SameLanguage(spec.lang.clone()));
    }
    let pairs = latent_sentences(base.seed, base.vocab_size, base.length_range, n)
        .into_iter()
        .map(|z| SentencePair {
            source: base.realize(&z),
            target: spec.realize(&z),
            src_lang: base.lang.clone(),
            tgt_lang: spec.lang.clone(),
        })
        .collect();
    Ok(ParallelCorpus::new(pairs))
}
