//! Losses, the two-phase training schedule and gradient checking.

mod gradcheck;
mod loss;
mod schedule;

pub use gradcheck::{check_gradients, gradcheck, relative_error, GradcheckOptions, GradcheckReport, ParamCheck};
pub use loss::{aspect_loss, document_loss, AspectLoss};
pub use schedule::{
    aspect_batch_loss, document_batch_loss, evaluate_model, token_accuracy, train, EpochLog, Phase, Schedule,
    TrainData, TrainOutcome,
};
