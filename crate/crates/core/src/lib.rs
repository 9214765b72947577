//! Object captioning and natural-language object retrieval networks built on
//! a shared detector: a conv backbone, region proposals, RoIAlign pooling and
//! LSTM heads, plus training, inference and caption metrics.

pub mod autograd;
pub mod captionhead;
pub mod checkpoint;
pub mod datasets;
pub mod detectnet;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod infer_eval;
pub mod model;
pub mod nn;
pub mod par;
pub mod params;
pub mod retrievalhead;
pub mod seqcore;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
