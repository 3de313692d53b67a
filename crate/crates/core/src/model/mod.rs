//! Toy pre-norm transformer with a frozen backbone and trainable low-rank
//! adapters, cut into a client head (blocks `1..=p`), an edge middle
//! (`p+1..=p+q`) and a client tail (`p+q+1..=M`) that owns the
//! classification head.

mod block;
mod config;
mod params;
mod split;

pub use config::{ModelConfig, Part};
pub use params::{Backbone, BlockAdapter, BlockWeights, Head, LoraPair, TrainableParams};
pub use split::{
    init_model, Activation, HeadCache, PartCache, SplitGrads, SplitModel, SplitModelState, SplitTape,
    TailGrads, TailOutput, PAD,
};
