//! Complex-valued convolutional networks for mitigating atmospheric
//! turbulence in video, together with the degradation simulator, training
//! loop, quality metrics and frame-sequence I/O around them.

pub mod architecture;
pub mod autodiff;
pub mod checkpoint;
pub mod conv;
pub mod cvnn;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod training;
pub mod turbulence;

pub use error::{Error, Result};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
