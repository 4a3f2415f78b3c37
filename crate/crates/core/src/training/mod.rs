//! Surrogate-gradient BPTT, quantization-aware training, targets, losses
//! and the optimizer.

mod adam;
mod config;
mod loss;
pub mod surrogate;
mod target;
mod trainer;

pub use adam::{Adam, AdamParams};
pub use config::{
    write_loss_history, write_loss_history_to, TrainConfig, DEFAULT_EPOCHS, DEFAULT_LAMBDA_SYNOPS,
    DEFAULT_LAMBDA_WEIGHTMAX, DEFAULT_SYNOPS_WARMUP,
};
pub use loss::{add_weightmax_grad, loss, mse, mse_grad, weightmax_penalty, LossBreakdown};
pub use surrogate::{surrogate_grad, DEFAULT_GAMMA};
pub use target::{encode_target, NEIGHBOR, PEAK};
pub use trainer::{deployment_weights, fit, local_errors, loss_and_gradient, mean_local_error, train_bptt, train_qat, TrainOutcome};
