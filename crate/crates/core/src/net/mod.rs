//! Multi-head network, CCC losses, optimizer, training loops and checkpoints.

pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::{load as load_checkpoint, save as save_checkpoint};
pub use loss::{batch_loss_aggregate, batch_loss_individual, AggregateItem, IndividualItem, LossOutput};
pub use model::{
    Branch, Embedding, Gradients, Head, HeadRef, HeadSelector, Linear, ModelConfig, ModelParams, Prediction,
};
pub use optim::Adam;
pub use train::{
    aggregate_items, aggregate_score, finetune_aggregate, individual_items, individual_score, per_head_ccc,
    train_aggregate, train_aggregate_epochs, train_individual, EarlyStopping, EpochRecord, FinetuneMode,
    TrainConfig, TrainHistory, Trained,
};
