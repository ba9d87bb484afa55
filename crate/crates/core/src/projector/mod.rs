//! Learnable-query cross-attention projector with frame masks.

mod config;
mod frames;
mod forward;
mod io;
mod params;
mod tpe;

pub use config::ProjectorConfig;
pub use frames::FrameEmbeddings;
pub use forward::{
    attention_core, finish, forward_cached, forward_image, forward_tokens, forward_video, gelu, gelu_grad,
    layer_norm, normalized_queries, query_output_independence_check, ForwardCache, LayerNormCache, LN_EPS,
};
pub use io::{decode_params, encode_params, manifest, read_params, write_params, ParamsManifest, SectionInfo, PARAMS_FORMAT};
pub use params::{init_params, ProjectorParams};
pub use tpe::{add_tpe, tpe_value};
