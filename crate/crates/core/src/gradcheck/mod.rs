//! Reverse-mode gradients of the projector, a central-difference oracle for
//! them, and a small trainer for the synthetic temporal-order task.

mod backward;
mod finite_diff;
mod order;

pub use backward::{backward, backward_from_cache, Gradients};
pub use finite_diff::{central_difference, compare, finite_diff, gradcheck_case, GradCheckSummary, DEFAULT_STEP};
pub use order::{
    make_order_dataset, train_order_probe, OrderDataset, OrderDatasetSpec, OrderExample, OrderProbe, TrainOptions,
    TrainReport,
};
