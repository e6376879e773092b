pub mod conv;
pub mod error;
pub mod events;
pub mod grad;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod labeler;
pub mod manifest;
pub mod model;
pub mod par;
pub mod parity;
pub mod perf;
pub mod pool;
pub mod quant;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
