//! End-to-end genotype risk modeling: parse and filter SNP cohorts, tokenize
//! calls onto a compact vocabulary, pretrain and fine-tune a low-rank
//! attention classifier, and attribute its predictions back to individual
//! variants with integrated gradients.

pub mod attribution;
pub mod cohort;
pub mod metrics;
pub mod model;
pub mod report;
pub mod synth;
pub mod tokenizer;
pub mod train;

pub use attribution::{AttributionRecord, AttributionTable, Baseline};
pub use cohort::{Cohort, CohortError, GenotypeCall, KnownLociList, KnownLocus, Sample, Variant};
pub use model::{ModelConfig, ModelError, ModelParameters};
pub use synth::{GroundTruth, SynthConfig};
pub use tokenizer::{TokenId, TokenizedDataset, CLS_ID, MASK_ID, NAN_ID, VOCAB_SIZE};
pub use train::{FoldPlan, TrainConfig};
