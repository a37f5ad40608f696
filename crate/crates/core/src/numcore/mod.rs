//! Dense numeric core: matrices, flat parameter vectors, a small reverse-mode
//! tape, MLP forward passes and Adam.

mod adam;
mod matrix;
mod mlp;
mod params;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use matrix::Matrix;
pub use mlp::{mlp_forward, mlp_forward_traced, mlp_param_count, push_mlp_layout, Activation};
pub use params::{Layout, ParamVector, Segment};
pub use tape::{ObsDensity, Tape, Var};
