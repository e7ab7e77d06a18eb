//! End-to-end streaming: feature sources, position embedding, the per-step
//! loop, a classification head with cross-entropy training, and the
//! concat/avg-pool baselines.

mod dataset;
pub mod features;
mod model;
mod position;
mod run;
mod stream;
mod synthetic;
pub mod tasks;
mod train;

pub use dataset::{DatasetItem, Example, LabeledDataset, Source, Split};
pub use features::{load_features, write_features, FeatureWriter};
pub use model::{
    argmax, classify, cross_entropy, embed_frame, forward_tokens, isolated_frame, Aggregation, HeadParams, ModelConfig,
    ModelParams,
};
pub use position::{position_embed, position_embed_scaled, sinusoid, PositionEncoding};
pub use run::{baseline_avgpool, baseline_concat, run_stream, StepTrace, StreamRun};
pub use stream::FeatureStream;
pub use synthetic::{generate_synthetic, Segment, SyntheticSpec};
pub use train::{evaluate, example_gradients, predict, train, train_from, Evaluation, Optimizer, TrainConfig, TrainOutcome};
