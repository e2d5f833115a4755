//! Fuzzy-causal text forecasting.
//!
//! Numeric series are fuzzified and searched for lagged causal parents, the
//! parents of the target are rendered as short texts, tokenized with a
//! GPT-2 compatible BPE, and an attention-pooled transformer regresses the
//! next target value from the tokens. [`harness`] runs the windowed
//! ablation over text modes and freezing.

pub mod causal;
pub mod fuzzy;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod series;
pub mod synth;
pub mod textgen;
pub mod tokenizer;
