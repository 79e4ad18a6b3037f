use super::{ModelConfig, ModelError};
use crate::subword::{BOS, EOS, PAD};

/// One training example as ids: the full encoder input (tagged source plus
/// EOS) and the bare target content. BOS/EOS are added by [`Batch`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

/// Padded id matrices with validity masks (`true` = real token).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub src_ids: Vec<Vec<u32>>,
    pub tgt_in_ids: Vec<Vec<u32>>,
    pub tgt_out_ids: Vec<Vec<u32>>,
    pub src_mask: Vec<Vec<bool>>,
    pub tgt_mask: Vec<Vec<bool>>,
}

fn pad_row(ids: &[u32], len: usize) -> (Vec<u32>, Vec<bool>) {
    let mut row = ids.to_vec();
    let mut mask = vec![true; ids.len()];
    row.resize(len, PAD);
    mask.resize(len, false);
    (row, mask)
}

impl Batch {
    /// Pads to the longest source and target in `examples`.
    pub fn new(examples: &[Example]) -> Self {
        let s = examples.iter().map(|e| e.src.len()).max().unwrap_or(0);
        let t = examples.iter().map(|e| e.tgt.len() + 1).max().unwrap_or(0);
        Self::padded(examples, s, t).expect("lengths fit by construction")
    }

    /// Pads every row to exactly `src_len` / `tgt_len` (target length counts
    /// the BOS/EOS shift).
    pub fn padded(examples: &[Example], src_len: usize, tgt_len: usize) -> Result<Self, ModelError> {
        let mut b = Batch {
            src_ids: Vec::new(),
            tgt_in_ids: Vec::new(),
            tgt_out_ids: Vec::new(),
            src_mask: Vec::new(),
            tgt_mask: Vec::new(),
        };
        for e in examples {
            if e.src.len() > src_len || e.tgt.len() + 1 > tgt_len {
                return Err(ModelError::Malformed("example longer than requested padding".into()));
            }
            let (src, sm) = pad_row(&e.src, src_len);
            let tin: Vec<u32> = std::iter::once(BOS).chain(e.tgt.iter().copied()).collect();
            let tout: Vec<u32> = e.tgt.iter().copied().chain(std::iter::once(EOS)).collect();
            let (tin, tm) = pad_row(&tin, tgt_len);
            let (tout, _) = pad_row(&tout, tgt_len);
            b.src_ids.push(src);
            b.src_mask.push(sm);
            b.tgt_in_ids.push(tin);
            b.tgt_out_ids.push(tout);
            b.tgt_mask.push(tm);
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.src_ids.len()
    }

    pub fn tgt_len(&self) -> usize {
        self.tgt_in_ids.first().map_or(0, Vec::len)
    }

    pub fn num_target_tokens(&self) -> usize {
        self.tgt_mask.iter().flatten().filter(|&&m| m).count()
    }

    /// Checks shapes, mask layout, lengths and id ranges against `config`.
    pub fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let n = self.rows();
        if [self.tgt_in_ids.len(), self.tgt_out_ids.len(), self.src_mask.len(), self.tgt_mask.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(ModelError::Malformed("row counts differ".into()));
        }
        for i in 0..n {
            let (s, sm) = (&self.src_ids[i], &self.src_mask[i]);
            let (ti, to, tm) = (&self.tgt_in_ids[i], &self.tgt_out_ids[i], &self.tgt_mask[i]);
            if s.len() != sm.len() || ti.len() != tm.len() || to.len() != tm.len() {
                return Err(ModelError::Malformed(format!("row {i}: mask shape differs from ids")));
            }
            for mask in [sm, tm] {
                let valid = mask.iter().take_while(|&&m| m).count();
                if mask[valid..].iter().any(|&m| m) {
                    return Err(ModelError::Malformed(format!("row {i}: padding must be trailing")));
                }
                if valid > config.max_len {
                    return Err(ModelError::TooLong { len: valid, max_len: config.max_len });
                }
            }
            let has_tgt = tm.iter().any(|&m| m);
            if has_tgt && !sm.iter().any(|&m| m) {
                return Err(ModelError::EmptySequence);
            }
            let ids = s.iter().zip(sm).chain(ti.iter().zip(tm)).chain(to.iter().zip(tm));
            for (&id, &m) in ids {
                if m && id as usize >= config.vocab_size {
                    return Err(ModelError::TokenOutOfRange { id, vocab_size: config.vocab_size });
                }
            }
        }
        Ok(())
    }
}
