//! Toy-scale multi-task molecular instruction tuning: a frozen decoder wrapped
//! with gradient-adaptive LoRA adapters and a mixture of adapter experts,
//! together with the data pipeline, metrics and representation analysis
//! needed to exercise it end to end.

pub mod alignment;
pub mod error;
pub mod gal;
pub mod metrics;
pub mod model;
pub mod moge;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod taskforge;
pub mod tselfies;

pub use error::{Error, Result};
