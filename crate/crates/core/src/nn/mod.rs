//! Layer primitives with hand-written backward passes.

pub mod conv;
pub mod norm;
pub mod se;

pub use conv::{conv3d, conv3d_backward, ConvBlock, ConvBlockCache, Conv3d};
pub use norm::{InstanceNorm, LEAKY_SLOPE, NORM_EPS};
pub use se::{SeBlock, SeCache};
