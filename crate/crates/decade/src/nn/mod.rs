//! Noise-prediction networks: a UNet backbone, a conditional control branch
//! grafted onto it, and the flat-file checkpoint format.

pub mod checkpoint;
pub mod control;
pub mod ops;
pub mod param;
pub mod unet;

pub use control::{ConditionalModel, ControlBranch};
pub use ops::Feat;
pub use param::{Grads, Init, ParamId, ParamStore};
pub use unet::{BaseModel, NetworkConfig};
