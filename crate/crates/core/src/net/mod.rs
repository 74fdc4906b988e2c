pub mod adam;
pub mod mlp;
pub mod model;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use mlp::{Dense, Mlp, MlpConfig};
pub use model::{BatchCache, FieldCache, FieldModel, MaterialChannel, ModelGrad, PendingGrad};
