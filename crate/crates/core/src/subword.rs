//! Shared byte-pair-encoding vocabulary over all languages.
//!
//! Words are whitespace tokens; each word is split into characters plus an
//! end-of-word marker before merging. Special tokens (padding, sentence
//! boundaries, unknown, and one atomic tag per language) occupy the lowest
//! ids.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::corpus::{LangId, ParallelCorpus};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";
pub const END_OF_WORD: &str = "</w>";

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot train a vocabulary on an empty corpus")]
    EmptyCorpus,
    #[error("target size {requested} is below the {minimum} specials and characters")]
    TooSmall { requested: usize, minimum: usize },
    #[error("target size {requested} is unreachable: merges run out at {max}")]
    Unreachable { requested: usize, max: usize },
    #[error("word {0:?} contains the reserved end-of-word marker")]
    ReservedMarker(String),
    #[error("token id {0} is out of range")]
    IdOutOfRange(u32),
    #[error("malformed vocabulary file at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VocabError>;

#[derive(Clone, Debug, PartialEq)]
pub struct SubwordVocab {
    merges: Vec<(String, String)>,
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
    num_specials: usize,
    /// (left id, right id) -> (rank, merged id)
    merge_table: HashMap<(u32, u32), (usize, u32)>,
}

impl SubwordVocab {
    fn from_parts(merges: Vec<(String, String)>, id_to_token: Vec<String>, num_specials: usize) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), i as u32).is_some() {
                return Err(VocabError::Parse {
                    line: 0,
                    msg: format!("duplicate token {tok:?}"),
                });
            }
        }
        let mut merge_table = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |s: &str| {
                token_to_id.get(s).copied().ok_or_else(|| VocabError::Parse {
                    line: 0,
                    msg: format!("merge references unknown symbol {s:?}"),
                })
            };
            let merged = lookup(&format!("{l}{r}"))?;
            merge_table.insert((lookup(l)?, lookup(r)?), (rank, merged));
        }
        Ok(Self {
            merges,
            id_to_token,
            token_to_id,
            num_specials,
            merge_table,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Number of special ids; every id below this is a special token.
    pub fn num_specials(&self) -> usize {
        self.num_specials
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// Atomic id of a language tag, if the language was known at training.
    pub fn tag_id(&self, lang: &LangId) -> Option<u32> {
        self.id(&lang.tag()).filter(|&id| (id as usize) < self.num_specials)
    }

    /// Encodes whitespace tokens to ids. No BOS/EOS are added.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        let mut out = Vec::new();
        for tok in tokens {
            let tok = tok.as_ref();
            match self.token_to_id.get(tok) {
                Some(&id) if (id as usize) < self.num_specials => out.push(id),
                _ => self.encode_word(tok, &mut out),
            }
        }
        out
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let eow = self.token_to_id[END_OF_WORD];
        let mut symbols: Vec<u32> = word
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.token_to_id.get(c.encode_utf8(&mut buf) as &str).copied().unwrap_or(UNK)
            })
            .chain(std::iter::once(eow))
            .collect();
        // Lowest-rank-first merging is equivalent to applying rules in order:
        // a merged symbol only takes part in rules learned after it.
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_table.get(&(w[0], w[1])).map(|&(rank, id)| (rank, w[0], w[1], id)))
                .min_by_key(|&(rank, ..)| rank);
            let Some((_, left, right, merged)) = best else { break };
            symbols = merge_pair(&symbols, left, right, merged);
        }
        out.extend(symbols);
    }

    /// Maps ids back to whitespace tokens. Specials decode to their own
    /// surface form.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        let mut words = Vec::new();
        let mut pending = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(VocabError::IdOutOfRange(id))?;
            if (id as usize) < self.num_specials {
                if !pending.is_empty() {
                    words.push(std::mem::take(&mut pending));
                }
                words.push(tok.to_owned());
            } else if let Some(stem) = tok.strip_suffix(END_OF_WORD) {
                pending.push_str(stem);
                words.push(std::mem::take(&mut pending));
            } else {
                pending.push_str(tok);
            }
        }
        if !pending.is_empty() {
            words.push(pending);
        }
        Ok(words)
    }

    /// Writes the plain-text vocabulary: a header line, the merge rules,
    /// then the `id<TAB>token` table.
    pub fn write(&self, mut w: impl Write) -> Result<()> {
        writeln!(
            w,
            "mnmt-vocab\ttokens={}\tmerges={}\tspecials={}",
            self.len(),
            self.merges.len(),
            self.num_specials
        )?;
        for (l, r) in &self.merges {
            writeln!(w, "{l} {r}")?;
        }
        for (i, tok) in self.id_to_token.iter().enumerate() {
            writeln!(w, "{i}\t{tok}")?;
        }
        Ok(())
    }

    pub fn read(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines();
        let bad = |line: usize, msg: &str| VocabError::Parse {
            line,
            msg: msg.to_owned(),
        };
        let header = lines.next().ok_or_else(|| bad(1, "missing header"))??;
        let mut fields = header.split('\t');
        if fields.next() != Some("mnmt-vocab") {
            return Err(bad(1, "not a vocabulary file"));
        }
        let mut sizes = BTreeMap::new();
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| bad(1, "bad header field"))?;
            sizes.insert(k.to_owned(), v.parse::<usize>().map_err(|_| bad(1, "bad header size"))?);
        }
        let get = |k: &str| sizes.get(k).copied().ok_or_else(|| bad(1, "missing header size"));
        let (n_tokens, n_merges, n_specials) = (get("tokens")?, get("merges")?, get("specials")?);

        let mut merges = Vec::with_capacity(n_merges);
        for i in 0..n_merges {
            let line_no = i + 2;
            let line = lines.next().ok_or_else(|| bad(line_no, "truncated merges"))??;
            let (l, r) = line.split_once(' ').ok_or_else(|| bad(line_no, "bad merge rule"))?;
            merges.push((l.to_owned(), r.to_owned()));
        }
        let mut tokens = Vec::with_capacity(n_tokens);
        for i in 0..n_tokens {
            let line_no = i + 2 + n_merges;
            let line = lines.next().ok_or_else(|| bad(line_no, "truncated token table"))??;
            let (id, tok) = line.split_once('\t').ok_or_else(|| bad(line_no, "bad token row"))?;
            if id.parse::<usize>().ok() != Some(i) {
                return Err(bad(line_no, "token ids must be dense and ordered"));
            }
            tokens.push(tok.to_owned());
        }
        Self::from_parts(merges, tokens, n_specials)
    }
}

fn merge_pair(symbols: &[u32], left: u32, right: u32, merged: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

/// Special tokens for a corpus: the four fixed ones, then one tag per
/// language in sorted order.
pub fn special_tokens(langs: &[LangId]) -> Vec<String> {
    let mut specials: Vec<String> = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN]
        .into_iter()
        .map(str::to_owned)
        .collect();
    let mut tags: Vec<String> = langs.iter().map(LangId::tag).collect();
    tags.sort();
    tags.dedup();
    specials.extend(tags);
    specials
}

struct Learner {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    words: Vec<(Vec<u32>, u64)>,
    merges: Vec<(String, String)>,
    num_specials: usize,
}

impl Learner {
    fn new(corpus: &ParallelCorpus) -> Result<Self> {
        if corpus.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        let mut word_counts: BTreeMap<&str, u64> = BTreeMap::new();
        for p in corpus.pairs() {
            for w in p.source.iter().chain(&p.target) {
                if crate::corpus::is_lang_tag(w) {
                    continue;
                }
                if w.contains(END_OF_WORD) {
                    return Err(VocabError::ReservedMarker(w.clone()));
                }
                *word_counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut tokens = special_tokens(&corpus.languages());
        let num_specials = tokens.len();
        let mut alphabet: Vec<String> = word_counts
            .keys()
            .flat_map(|w| w.chars().map(String::from))
            .collect();
        alphabet.push(END_OF_WORD.to_owned());
        alphabet.sort();
        alphabet.dedup();
        tokens.extend(alphabet);
        let index: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let eow = index[END_OF_WORD];
        let words = word_counts
            .iter()
            .map(|(w, &n)| {
                let syms = w
                    .chars()
                    .map(|c| index[&c.to_string()])
                    .chain(std::iter::once(eow))
                    .collect();
                (syms, n)
            })
            .collect();
        Ok(Self {
            tokens,
            index,
            words,
            merges: Vec::new(),
            num_specials,
        })
    }

    /// Applies the next merge; false when no adjacent pair is left.
    fn step(&mut self) -> bool {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, n) in &self.words {
            for w in syms.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += n;
            }
        }
        let tokens = &self.tokens;
        // Highest count; ties go to the lexicographically smallest pair.
        let best = counts.into_iter().min_by(|(pa, ca), (pb, cb)| {
            cb.cmp(ca).then_with(|| {
                (&tokens[pa.0 as usize], &tokens[pa.1 as usize])
                    .cmp(&(&tokens[pb.0 as usize], &tokens[pb.1 as usize]))
            })
        });
        let Some(((l, r), _)) = best else { return false };
        let (ls, rs) = (self.tokens[l as usize].clone(), self.tokens[r as usize].clone());
        let name = format!("{ls}{rs}");
        let merged = match self.index.get(&name) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len() as u32;
                self.tokens.push(name.clone());
                self.index.insert(name, id);
                id
            }
        };
        for (syms, _) in &mut self.words {
            if syms.len() > 1 {
                *syms = merge_pair(syms, l, r, merged);
            }
        }
        self.merges.push((ls, rs));
        true
    }

    fn finish(self) -> Result<SubwordVocab> {
        SubwordVocab::from_parts(self.merges, self.tokens, self.num_specials)
    }
}

/// Greedy BPE: merges the most frequent adjacent symbol pair until the
/// vocabulary holds exactly `target_size` tokens.
pub fn train_vocab(corpus: &ParallelCorpus, target_size: usize) -> Result<SubwordVocab> {
    let mut learner = Learner::new(corpus)?;
    let minimum = learner.tokens.len();
    if target_size < minimum {
        return Err(VocabError::TooSmall {
            requested: target_size,
            minimum,
        });
    }
    while learner.tokens.len() < target_size {
        if !learner.step() {
            return Err(VocabError::Unreachable {
                requested: target_size,
                max: learner.tokens.len(),
            });
        }
    }
    learner.finish()
}

/// Merges until every training word is a single symbol.
pub fn train_vocab_exhaustive(corpus: &ParallelCorpus) -> Result<SubwordVocab> {
    let mut learner = Learner::new(corpus)?;
    while learner.step() {}
    learner.finish()
}
