//! Layer primitives with hand-written forward and backward passes.

pub mod conv;
pub mod linear;
pub mod norm;
pub mod params;
pub mod tensor;

pub use conv::{Conv2d, ConvTranspose2d, Window};
pub use linear::{global_avg_pool, global_avg_pool_backward, relu_backward_in_place, relu_in_place, Linear};
pub use norm::{BatchNorm2d, BnCache};
pub use params::{ParamId, ParamKind, ParamLayout, ParamSpec, ParamStore};
pub use tensor::{FeatureMap, Matrix};
