//! Corpus ingestion, tokenization and batch assembly.

pub mod batch;
pub mod corpus;
pub mod synth;
pub mod tokenizer;

pub use batch::{build_batches, encode_records, render_prompt, BatchSampler, Example, TokenBatch};
pub use corpus::{load_corpus, parse_jsonl, split_records, write_jsonl, CorpusSplits, InstructionRecord, SplitSpec};
pub use synth::synthetic_corpus;
pub use tokenizer::{ByteTokenizer, BOS_ID, BYTE_OFFSET, EOS_ID, PAD_ID, VOCAB_SIZE};
