//! Network definitions on top of the autodiff engine.

pub mod layers;
pub mod unet;

pub use layers::{AttentionKind, Builder, Context, Ctx};
pub use unet::{ControlEncoder, Denoiser, DenoiserOutput, Encoded, GuidanceNet, GuidanceOutput, UNetConfig};
