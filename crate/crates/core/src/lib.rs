//! Multilingual translation workbench: synthetic corpora, a shared subword
//! vocabulary, a transformer with analytic gradients, RAdam training in two
//! stages, beam and pivot decoding, distillation, BLEU and latency.

pub mod corpus;
pub mod decode;
pub mod distill;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod subword;
pub mod tensor;
pub mod trainer;
