//! Synthetic instruction data: corpus generation, chat rendering,
//! tokenisation, batching and leakage removal.

pub mod chat;
pub mod collate;
pub mod corpus;
pub mod tokenizer;

pub use chat::{render_chat, render_completion, render_prompt, RenderOptions};
pub use collate::{collate, encode_prompt, Batch, GraphFeaturizer};
pub use corpus::{
    by_split, caption, generate_corpus, leakage_key, leakage_scan, molecule_sample, pretraining_corpus, read_jsonl, write_jsonl, CorpusSpec,
    InstructionSample, LeakageReport, Split, Subtask, TaskCategory,
};
pub use tokenizer::Tokenizer;
