//! Desk-scale shared-head pseudo-labeling. Synthetic tasks assign an oracle
//! metric to every graph; each graph also defines a body that maps synthetic
//! image features to latents, and a shared head trained across many bodies
//! scores a body after brief fine-tuning.

mod body;
mod head;
mod task;

pub use body::{latent_stats, sample_latent, update_pool, BodyPool, SyntheticBody};
pub use head::{label_graphs, pseudo_label, train_shared_head, HeadHyper, PseudoHyper, SharedHead, Strategy};
pub use task::{graph_features, SyntheticTask, TaskSpec};

use crate::error::{GraphError, NumericError};
use crate::graph::SpaceError;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("bad task: {0}")]
    BadTask(String),
    #[error("bad hyperparameters: {0}")]
    BadHyper(String),
    #[error("body pool is empty or not full")]
    EmptyPool,
    #[error("head expects latent dim {head}, body produces {body}")]
    LatentMismatch { head: usize, body: usize },
}
