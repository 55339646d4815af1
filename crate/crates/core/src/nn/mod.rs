pub mod layers;
pub mod params;

pub use layers::{channel_mean, gap, ChannelNorm, Conv2d, ConvTranspose2d};
pub use params::{ParamBuilder, ParamId, ParamStore};
