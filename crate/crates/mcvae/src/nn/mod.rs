mod adamw;
mod layers;
mod params;
mod rng;

pub use adamw::AdamW;
pub use layers::{feature_dropout, standard_normal_input, BatchNorm, BatchStats, Dense};
pub use params::{Binding, ParamId, Params};
pub use rng::{stream_rng, Stream};
