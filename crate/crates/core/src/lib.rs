//! Time-contrastive prompt retrieval and in-context segmentation.

pub mod encoder;
pub mod eval;
pub mod loss;
pub mod pipeline;
pub mod retrieval;
pub mod sampler;
pub mod synthvideo;
pub mod trainer;
pub mod vos;
