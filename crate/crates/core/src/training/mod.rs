//! The regularised training objective, a plain gradient-descent loop for
//! the fusion module and the `(μ, ν)` grid search.

mod grid;
mod loss;
mod train;

pub use grid::{grid_search, GridPoint, GridResult, GridSpec};
pub use loss::{
    conditional_entropy_term, kl_term, loss_on, total_loss, LossParts, LossVars, PROB_FLOOR,
};
pub use train::{checkpoint_id, mean_loss, train, Hyperparams, StepRecord, TrainExample, TrainReport};
